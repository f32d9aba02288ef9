#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace tardis {

// Dense real vector. Value type; copies are deep.
class Vector {
public:
    Vector() = default;
    explicit Vector(std::size_t dim, double fill = 0.0) : data_(dim, fill) {}
    Vector(std::initializer_list<double> values) : data_(values) {}
    explicit Vector(std::vector<double> values) : data_(std::move(values)) {}

    std::size_t dim() const { return data_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> span() { return data_; }
    std::span<const double> span() const { return data_; }
    const std::vector<double>& values() const { return data_; }

    auto begin() { return data_.begin(); }
    auto end() { return data_.end(); }
    auto begin() const { return data_.begin(); }
    auto end() const { return data_.end(); }

    bool operator==(const Vector&) const = default;

private:
    std::vector<double> data_;
};

Vector operator+(const Vector& a, const Vector& b);
Vector operator-(const Vector& a, const Vector& b);
Vector operator-(const Vector& a);
Vector operator*(double s, const Vector& v);
double dot(const Vector& a, const Vector& b);
double norm(const Vector& v);
bool all_finite(std::span<const double> values);

// Dense row-major real matrix.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Matrix from_columns(std::span<const Vector> columns);
    static Matrix identity(std::size_t n);
    static Matrix diagonal(std::span<const double> values);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
    Vector column(std::size_t c) const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<const double> values() const { return data_; }

    Matrix transpose() const;

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
double frobenius_norm(const Matrix& m);

// Column mean of a d x n matrix. Each component is summed in sorted order
// after subtracting the component minimum, so the result does not depend on
// column order and a constant input is reproduced exactly.
Vector mean_columns(const Matrix& m);

// Thin factors of a truncated SVD, M ~= U diag(S) V^T.
struct SvdFactors {
    Matrix u;  // d x k, orthonormal columns
    Vector s;  // k singular values, descending, non-negative
    Matrix v;  // n x k, orthonormal columns

    Matrix reconstruct() const;
};

// Rank-k truncated SVD by one-sided Jacobi rotations. Each column of U is
// sign-normalised so that its largest-magnitude entry is positive (first
// index wins ties). Throws ArgumentError for k outside [1, min(d, n)] and
// NumericalError if the sweep cap is hit before the columns are orthogonal.
SvdFactors truncated_svd(const Matrix& m, std::size_t k);

// Numerically stable softmax (max subtraction).
Vector softmax(const Vector& z);
void softmax_inplace(std::span<double> z);

// Seeded random stream. The engine is std::mt19937_64, whose output sequence
// for a given 64-bit seed is fixed by the C++ standard. Derived quantities
// avoid the implementation-defined std distributions:
//   uniform()        = (next_u64() >> 11) * 2^-53, in [0, 1)
//   uniform_index(n) = rejection sampling on next_u64() against the largest
//                      multiple of n, then modulo n
//   categorical(p)   = first i with uniform() < cumulative(p)[i] (scaled by
//                      the total mass), falling back to the last positive entry
//   shuffle          = Fisher-Yates from the back, j = uniform_index(i + 1)
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    std::size_t uniform_index(std::size_t n);
    std::size_t categorical(std::span<const double> weights);

    template <typename T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = uniform_index(i);
            std::swap(items[i - 1], items[j]);
        }
    }
    template <typename T>
    void shuffle(std::vector<T>& items) { shuffle(std::span<T>(items)); }

private:
    std::mt19937_64 engine_;
};

Rng seeded_rng(std::uint64_t seed);

// splitmix64 finaliser applied to (seed, fnv1a64(tag)); used to give every
// consumer of a run seed its own independent stream.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view text);

} // namespace tardis
