#pragma once

#include "json.hpp"
#include "tardis/numerics.hpp"

#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tardis {

enum class AttentionMode { causal, bidirectional };

std::string to_string(AttentionMode mode);
AttentionMode parse_attention_mode(std::string_view text);

struct ModelConfig {
    std::size_t vocab_size = 200;
    std::size_t d_model = 32;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_ff = 64;
    std::size_t max_seq_len = 24;
    std::size_t n_classes = 3;
    AttentionMode attention_mode = AttentionMode::causal;
    std::uint64_t seed = 0;

    std::size_t head_dim() const { return d_model / n_heads; }
    // Throws ArgumentError on zero counts or d_model % n_heads != 0.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class Sublayer { attention_out, ffn_out };

// A sublayer output inside one transformer block, read or modified right
// before the residual addition consumes it.
struct HookSite {
    std::size_t layer_index = 0;
    Sublayer sublayer = Sublayer::ffn_out;

    auto operator<=>(const HookSite&) const = default;
};

using SiteSet = std::set<HookSite>;

std::string to_string(const HookSite& site);  // "ffn_out@3"
HookSite parse_hook_site(std::string_view text);
SiteSet parse_site_list(std::string_view text);  // comma separated
std::string to_string(const SiteSet& sites);

// ffn_out of the last min(3, n_layers) layers in causal mode; ffn_out of the
// last layer in bidirectional mode.
SiteSet default_sites(const ModelConfig& config);
SiteSet all_sites(const ModelConfig& config);

// Right-padded token batch. pad_mask[b * seq_len + s] != 0 marks padding.
struct Batch {
    std::size_t batch_size = 0;
    std::size_t seq_len = 0;
    std::vector<std::int32_t> token_ids;
    std::vector<std::uint8_t> pad_mask;
    std::vector<std::int32_t> labels;  // empty, or one per example

    // Throws ArgumentError if a sequence is empty.
    static Batch from_sequences(std::span<const std::vector<std::int32_t>> sequences,
                                std::span<const std::int32_t> labels = {});

    std::int32_t token(std::size_t b, std::size_t s) const { return token_ids[b * seq_len + s]; }
    bool is_pad(std::size_t b, std::size_t s) const { return pad_mask[b * seq_len + s] != 0; }
};

struct CaptureResult {
    Matrix logits;                         // batch x n_classes
    std::map<HookSite, Matrix> captured;   // batch x d_model, pooled per example
};

// Adds alpha * direction at every non-pad position of the site's output.
// Several entries for the same site are applied in list order.
struct Intervention {
    HookSite site;
    Vector direction;
    double alpha = 1.0;
};

using InterventionList = std::vector<Intervention>;

struct TensorSpec {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t offset = 0;

    std::size_t size() const { return rows * cols; }
};

// Pre-layernorm transformer classifier. All parameters live in one flat
// buffer described by tensors(); weight matrices are stored (in x out).
class Model {
public:
    struct LayerOffsets {
        std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
        std::size_t ln2_g, ln2_b, w1, b1, w2, b2;
    };

    // Zero parameters with the layout for `config`. Use init_model() for a
    // trainable starting point.
    explicit Model(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    std::span<double> parameters() { return params_; }
    std::span<const double> parameters() const { return params_; }
    std::size_t parameter_count() const { return params_.size(); }

    const std::vector<TensorSpec>& tensors() const { return tensors_; }
    const TensorSpec& tensor(std::string_view name) const;
    std::span<double> tensor_data(std::string_view name);
    std::span<const double> tensor_data(std::string_view name) const;

    // FNV-1a over the config and the little-endian parameter bytes.
    std::uint64_t fingerprint() const;

    std::size_t tok_emb() const { return tok_emb_; }
    std::size_t pos_emb() const { return pos_emb_; }
    std::size_t lnf_g() const { return lnf_g_; }
    std::size_t lnf_b() const { return lnf_b_; }
    std::size_t head_w() const { return head_w_; }
    std::size_t head_b() const { return head_b_; }
    const LayerOffsets& layer(std::size_t l) const { return layers_[l]; }

    bool operator==(const Model& other) const {
        return config_ == other.config_ && params_ == other.params_;
    }

private:
    std::size_t add_tensor(std::string name, std::size_t rows, std::size_t cols);

    ModelConfig config_;
    std::vector<TensorSpec> tensors_;
    std::vector<double> params_;
    std::vector<LayerOffsets> layers_;
    std::size_t tok_emb_ = 0, pos_emb_ = 0, lnf_g_ = 0, lnf_b_ = 0, head_w_ = 0, head_b_ = 0;
};

// Deterministic init from config.seed: linear weights U(-1/sqrt(fan_in), +),
// embeddings U(-1/sqrt(d_model), +), layernorm gains 1, all biases 0, and a
// zero classifier head.
Model init_model(const ModelConfig& config);

CaptureResult forward_with_capture(const Model& model, const Batch& batch, const SiteSet& sites);

CaptureResult forward_with_intervention(const Model& model, const Batch& batch,
                                        const InterventionList& interventions,
                                        const SiteSet& capture_sites = {});

struct LossResult {
    double loss = 0.0;         // mean cross-entropy over the batch
    std::size_t correct = 0;   // argmax hits
};

// Mean cross-entropy and its gradient w.r.t. every parameter (grad is
// overwritten). Chunked accumulation with a fixed chunk count keeps the
// result independent of the worker count.
LossResult loss_and_gradient(const Model& model, const Batch& batch, std::span<double> grad);
LossResult evaluate_loss(const Model& model, const Batch& batch);

// Index of the largest logit (first on ties).
std::size_t argmax(std::span<const double> values);

} // namespace tardis
