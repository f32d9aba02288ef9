#include "tardis/numerics.hpp"

#include "tardis/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace tardis {

namespace {

void require_same_dim(const Vector& a, const Vector& b, const char* op) {
    if (a.dim() != b.dim()) {
        std::ostringstream os;
        os << op << ": dimension mismatch (" << a.dim() << " vs " << b.dim() << ")";
        throw ArgumentError(os.str());
    }
}

} // namespace

Vector operator+(const Vector& a, const Vector& b) {
    require_same_dim(a, b, "operator+");
    Vector out(a.dim());
    for (std::size_t i = 0; i < a.dim(); ++i) out[i] = a[i] + b[i];
    return out;
}

Vector operator-(const Vector& a, const Vector& b) {
    require_same_dim(a, b, "operator-");
    Vector out(a.dim());
    for (std::size_t i = 0; i < a.dim(); ++i) out[i] = a[i] - b[i];
    return out;
}

Vector operator-(const Vector& a) {
    Vector out(a.dim());
    for (std::size_t i = 0; i < a.dim(); ++i) out[i] = -a[i];
    return out;
}

Vector operator*(double s, const Vector& v) {
    Vector out(v.dim());
    for (std::size_t i = 0; i < v.dim(); ++i) out[i] = s * v[i];
    return out;
}

double dot(const Vector& a, const Vector& b) {
    require_same_dim(a, b, "dot");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.dim(); ++i) acc += a[i] * b[i];
    return acc;
}

double norm(const Vector& v) { return std::sqrt(dot(v, v)); }

bool all_finite(std::span<const double> values) {
    return std::all_of(values.begin(), values.end(), [](double x) { return std::isfinite(x); });
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ArgumentError("Matrix: data length does not equal rows * cols");
    }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    std::size_t r = rows.size();
    std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
        if (row.size() != c) throw ArgumentError("Matrix::from_rows: ragged rows");
        std::size_t j = 0;
        for (double x : row) m(i, j++) = x;
        ++i;
    }
    return m;
}

Matrix Matrix::from_columns(std::span<const Vector> columns) {
    if (columns.empty()) return Matrix();
    std::size_t d = columns.front().dim();
    Matrix m(d, columns.size());
    for (std::size_t j = 0; j < columns.size(); ++j) {
        if (columns[j].dim() != d) throw ArgumentError("Matrix::from_columns: ragged columns");
        for (std::size_t i = 0; i < d; ++i) m(i, j) = columns[j][i];
    }
    return m;
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::diagonal(std::span<const double> values) {
    Matrix m(values.size(), values.size());
    for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
    return m;
}

Vector Matrix::column(std::size_t c) const {
    Vector out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
}

Matrix Matrix::transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw ArgumentError("matmul: inner dimensions differ");
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* orow = out.row(i).data();
        for (std::size_t k = 0; k < a.cols(); ++k) {
            double aik = a(i, k);
            const double* brow = b.row(k).data();
            for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ArgumentError("Matrix operator-: shape mismatch");
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows() * a.cols(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    return out;
}

double frobenius_norm(const Matrix& m) {
    double acc = 0.0;
    for (double x : m.values()) acc += x * x;
    return std::sqrt(acc);
}

Vector mean_columns(const Matrix& m) {
    if (m.cols() == 0) throw ArgumentError("mean_columns: matrix has no columns");
    const std::size_t n = m.cols();
    Vector out(m.rows());
    std::vector<double> buf(n);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto row = m.row(i);
        std::copy(row.begin(), row.end(), buf.begin());
        std::sort(buf.begin(), buf.end());
        const double shift = buf.front();
        double acc = 0.0;
        for (double x : buf) acc += x - shift;
        out[i] = shift + acc / static_cast<double>(n);
    }
    return out;
}

Matrix SvdFactors::reconstruct() const {
    Matrix us(u.rows(), u.cols());
    for (std::size_t i = 0; i < u.rows(); ++i)
        for (std::size_t j = 0; j < u.cols(); ++j) us(i, j) = u(i, j) * s[j];
    return matmul(us, v.transpose());
}

namespace {

constexpr int kMaxJacobiSweeps = 80;

// Columns stored as contiguous rows: cols[j] has length p.
struct ColumnSet {
    std::size_t count = 0;
    std::size_t length = 0;
    std::vector<double> data;

    double* col(std::size_t j) { return data.data() + j * length; }
    const double* col(std::size_t j) const { return data.data() + j * length; }
};

double col_dot(const double* a, const double* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

void rotate(double* a, double* b, std::size_t n, double c, double s) {
    for (std::size_t i = 0; i < n; ++i) {
        const double x = a[i];
        const double y = b[i];
        a[i] = c * x - s * y;
        b[i] = s * x + c * y;
    }
}

// Replace near-null columns of an orthonormal-ish set by Gram-Schmidt
// completions drawn from the canonical basis.
void complete_basis(ColumnSet& u, const std::vector<bool>& valid) {
    for (std::size_t j = 0; j < u.count; ++j) {
        if (valid[j]) continue;
        for (std::size_t e = 0; e < u.length; ++e) {
            std::vector<double> cand(u.length, 0.0);
            cand[e] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t q = 0; q < u.count; ++q) {
                    if (q == j || (!valid[q] && q > j)) continue;
                    const double* uq = u.col(q);
                    double proj = col_dot(cand.data(), uq, u.length);
                    for (std::size_t i = 0; i < u.length; ++i) cand[i] -= proj * uq[i];
                }
            }
            double nrm = std::sqrt(col_dot(cand.data(), cand.data(), u.length));
            if (nrm > 1e-6) {
                for (std::size_t i = 0; i < u.length; ++i) u.col(j)[i] = cand[i] / nrm;
                break;
            }
        }
    }
}

} // namespace

SvdFactors truncated_svd(const Matrix& m, std::size_t k) {
    const std::size_t d = m.rows();
    const std::size_t n = m.cols();
    const std::size_t r = std::min(d, n);
    if (k < 1 || k > r) {
        std::ostringstream os;
        os << "truncated_svd: k=" << k << " outside [1, " << r << "] for a " << d << "x" << n << " matrix";
        throw ArgumentError(os.str());
    }
    if (!all_finite(m.values())) throw ArgumentError("truncated_svd: input contains non-finite entries");

    // Work on A (p x q, p >= q) and orthogonalise its q columns.
    const bool transposed = d < n;
    const std::size_t p = transposed ? n : d;
    const std::size_t q = transposed ? d : n;

    ColumnSet a{q, p, std::vector<double>(p * q)};
    for (std::size_t j = 0; j < q; ++j)
        for (std::size_t i = 0; i < p; ++i) a.col(j)[i] = transposed ? m(j, i) : m(i, j);
    ColumnSet w{q, q, std::vector<double>(q * q, 0.0)};
    for (std::size_t j = 0; j < q; ++j) w.col(j)[j] = 1.0;

    const double tol = 1e-15;
    int sweep = 0;
    double worst = 0.0;
    for (; sweep < kMaxJacobiSweeps; ++sweep) {
        bool rotated = false;
        worst = 0.0;
        for (std::size_t i = 0; i + 1 < q; ++i) {
            for (std::size_t j = i + 1; j < q; ++j) {
                const double alpha = col_dot(a.col(i), a.col(i), p);
                const double beta = col_dot(a.col(j), a.col(j), p);
                const double gamma = col_dot(a.col(i), a.col(j), p);
                if (alpha == 0.0 || beta == 0.0) continue;
                const double ratio = std::abs(gamma) / std::sqrt(alpha * beta);
                worst = std::max(worst, ratio);
                if (ratio <= tol) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                rotate(a.col(i), a.col(j), p, c, s);
                rotate(w.col(i), w.col(j), q, c, s);
            }
        }
        if (!rotated) break;
    }
    if (sweep == kMaxJacobiSweeps) {
        std::ostringstream os;
        os << "truncated_svd: Jacobi sweeps did not converge after " << kMaxJacobiSweeps
           << " sweeps on a " << d << "x" << n << " matrix (max column cosine " << worst << ")";
        throw NumericalError(os.str());
    }

    std::vector<double> sigma(q);
    for (std::size_t j = 0; j < q; ++j) sigma[j] = std::sqrt(col_dot(a.col(j), a.col(j), p));
    std::vector<std::size_t> order(q);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    // Left vectors of A from normalised columns; right vectors are columns of W.
    const double smax = sigma[order.front()];
    const double null_tol = static_cast<double>(p) * std::numeric_limits<double>::epsilon() * smax;
    ColumnSet left{q, p, std::vector<double>(p * q, 0.0)};
    ColumnSet right{q, q, std::vector<double>(q * q, 0.0)};
    std::vector<bool> valid(q, true);
    Vector s(k);
    for (std::size_t jj = 0; jj < q; ++jj) {
        std::size_t j = order[jj];
        const double sj = sigma[j];
        if (jj < k) s[jj] = sj;
        if (sj > null_tol && sj > 0.0) {
            for (std::size_t i = 0; i < p; ++i) left.col(jj)[i] = a.col(j)[i] / sj;
        } else {
            valid[jj] = false;
        }
        std::copy(w.col(j), w.col(j) + q, right.col(jj));
    }
    complete_basis(left, valid);

    // Map back to M: if M = A, U = left, V = right; if M = A^T, U = right, V = left.
    const ColumnSet& uc = transposed ? right : left;
    const ColumnSet& vc = transposed ? left : right;
    SvdFactors f{Matrix(d, k), std::move(s), Matrix(n, k)};
    for (std::size_t j = 0; j < k; ++j) {
        const double* ucol = uc.col(j);
        std::size_t arg = 0;
        for (std::size_t i = 1; i < d; ++i)
            if (std::abs(ucol[i]) > std::abs(ucol[arg])) arg = i;
        const double sign = ucol[arg] < 0.0 ? -1.0 : 1.0;
        for (std::size_t i = 0; i < d; ++i) f.u(i, j) = sign * ucol[i];
        for (std::size_t i = 0; i < n; ++i) f.v(i, j) = sign * vc.col(j)[i];
    }
    return f;
}

void softmax_inplace(std::span<double> z) {
    if (z.empty()) throw ArgumentError("softmax: empty input");
    const double mx = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (double& x : z) {
        x = std::exp(x - mx);
        total += x;
    }
    for (double& x : z) x /= total;
}

Vector softmax(const Vector& z) {
    if (!all_finite(z.span())) throw ArgumentError("softmax: non-finite input");
    Vector out = z;
    softmax_inplace(out.span());
    return out;
}

double Rng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::size_t Rng::uniform_index(std::size_t n) {
    if (n == 0) throw ArgumentError("Rng::uniform_index: n must be positive");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % bound);
}

std::size_t Rng::categorical(std::span<const double> weights) {
    double total = 0.0;
    std::size_t last_positive = weights.size();
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (weights[i] < 0.0 || !std::isfinite(weights[i])) throw ArgumentError("Rng::categorical: invalid weight");
        total += weights[i];
        if (weights[i] > 0.0) last_positive = i;
    }
    if (last_positive == weights.size()) throw ArgumentError("Rng::categorical: all weights are zero");
    const double u = uniform() * total;
    double cum = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        cum += weights[i];
        if (u < cum && weights[i] > 0.0) return i;
    }
    return last_positive;
}

Rng seeded_rng(std::uint64_t seed) { return Rng(seed); }

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

} // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return splitmix64(splitmix64(seed) ^ stream);
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
    return derive_seed(seed, fnv1a64(tag));
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t basis) {
    std::uint64_t h = basis;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t fnv1a64(std::string_view text) {
    return fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

} // namespace tardis
