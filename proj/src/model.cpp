#include "tardis/model.hpp"

#include "tardis/errors.hpp"
#include "tardis/parallel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <sstream>

namespace tardis {

std::string to_string(AttentionMode mode) {
    return mode == AttentionMode::causal ? "causal" : "bidirectional";
}

AttentionMode parse_attention_mode(std::string_view text) {
    if (text == "causal") return AttentionMode::causal;
    if (text == "bidirectional") return AttentionMode::bidirectional;
    throw ArgumentError("unknown attention mode '" + std::string(text) + "'");
}

void ModelConfig::validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || max_seq_len < 1 || n_classes < 1)
        throw ArgumentError("ModelConfig: all counts must be >= 1");
    if (d_model % n_heads != 0) {
        std::ostringstream os;
        os << "ModelConfig: d_model=" << d_model << " is not divisible by n_heads=" << n_heads;
        throw ArgumentError(os.str());
    }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_layers", c.n_layers},
                       {"n_heads", c.n_heads},       {"d_ff", c.d_ff},         {"max_seq_len", c.max_seq_len},
                       {"n_classes", c.n_classes},   {"attention_mode", to_string(c.attention_mode)},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.d_model = j.value("d_model", d.d_model);
    c.n_layers = j.value("n_layers", d.n_layers);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.d_ff = j.value("d_ff", d.d_ff);
    c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
    c.n_classes = j.value("n_classes", d.n_classes);
    c.attention_mode = parse_attention_mode(j.value("attention_mode", to_string(d.attention_mode)));
    c.seed = j.value("seed", d.seed);
}

std::string to_string(const HookSite& site) {
    std::ostringstream os;
    os << (site.sublayer == Sublayer::attention_out ? "attention_out" : "ffn_out") << "@" << site.layer_index;
    return os.str();
}

HookSite parse_hook_site(std::string_view text) {
    auto at = text.find('@');
    if (at == std::string_view::npos) throw ArgumentError("hook site '" + std::string(text) + "' must look like ffn_out@3");
    auto kind = text.substr(0, at);
    HookSite site;
    if (kind == "attention_out" || kind == "attn") {
        site.sublayer = Sublayer::attention_out;
    } else if (kind == "ffn_out" || kind == "ffn") {
        site.sublayer = Sublayer::ffn_out;
    } else {
        throw ArgumentError("unknown sublayer '" + std::string(kind) + "'");
    }
    try {
        std::size_t used = 0;
        std::string idx(text.substr(at + 1));
        long v = std::stol(idx, &used);
        if (used != idx.size() || v < 0) throw ArgumentError("bad layer index");
        site.layer_index = static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw ArgumentError("bad layer index in hook site '" + std::string(text) + "'");
    }
    return site;
}

SiteSet parse_site_list(std::string_view text) {
    SiteSet out;
    std::size_t start = 0;
    while (start <= text.size()) {
        auto comma = text.find(',', start);
        auto piece = text.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
        while (!piece.empty() && piece.front() == ' ') piece.remove_prefix(1);
        while (!piece.empty() && piece.back() == ' ') piece.remove_suffix(1);
        if (!piece.empty()) out.insert(parse_hook_site(piece));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

std::string to_string(const SiteSet& sites) {
    std::string out;
    for (const auto& s : sites) {
        if (!out.empty()) out += ",";
        out += to_string(s);
    }
    return out;
}

SiteSet default_sites(const ModelConfig& config) {
    SiteSet out;
    const std::size_t count = config.attention_mode == AttentionMode::causal ? std::min<std::size_t>(3, config.n_layers) : 1;
    for (std::size_t i = config.n_layers - count; i < config.n_layers; ++i) out.insert({i, Sublayer::ffn_out});
    return out;
}

SiteSet all_sites(const ModelConfig& config) {
    SiteSet out;
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        out.insert({l, Sublayer::attention_out});
        out.insert({l, Sublayer::ffn_out});
    }
    return out;
}

Batch Batch::from_sequences(std::span<const std::vector<std::int32_t>> sequences, std::span<const std::int32_t> labels) {
    if (!labels.empty() && labels.size() != sequences.size())
        throw ArgumentError("Batch::from_sequences: label count does not match sequence count");
    Batch b;
    b.batch_size = sequences.size();
    for (std::size_t i = 0; i < sequences.size(); ++i) {
        if (sequences[i].empty())
            throw ArgumentError("Batch::from_sequences: example " + std::to_string(i) + " has no tokens");
        b.seq_len = std::max(b.seq_len, sequences[i].size());
    }
    b.token_ids.assign(b.batch_size * b.seq_len, 0);
    b.pad_mask.assign(b.batch_size * b.seq_len, 1);
    for (std::size_t i = 0; i < sequences.size(); ++i) {
        for (std::size_t t = 0; t < sequences[i].size(); ++t) {
            b.token_ids[i * b.seq_len + t] = sequences[i][t];
            b.pad_mask[i * b.seq_len + t] = 0;
        }
    }
    b.labels.assign(labels.begin(), labels.end());
    return b;
}

Model::Model(const ModelConfig& config) : config_(config) {
    config_.validate();
    const std::size_t d = config_.d_model;
    tok_emb_ = add_tensor("tok_emb", config_.vocab_size, d);
    pos_emb_ = add_tensor("pos_emb", config_.max_seq_len, d);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        LayerOffsets o{};
        o.ln1_g = add_tensor(p + "ln1.gain", 1, d);
        o.ln1_b = add_tensor(p + "ln1.bias", 1, d);
        o.wq = add_tensor(p + "attn.wq", d, d);
        o.bq = add_tensor(p + "attn.bq", 1, d);
        o.wk = add_tensor(p + "attn.wk", d, d);
        o.bk = add_tensor(p + "attn.bk", 1, d);
        o.wv = add_tensor(p + "attn.wv", d, d);
        o.bv = add_tensor(p + "attn.bv", 1, d);
        o.wo = add_tensor(p + "attn.wo", d, d);
        o.bo = add_tensor(p + "attn.bo", 1, d);
        o.ln2_g = add_tensor(p + "ln2.gain", 1, d);
        o.ln2_b = add_tensor(p + "ln2.bias", 1, d);
        o.w1 = add_tensor(p + "ffn.w1", d, config_.d_ff);
        o.b1 = add_tensor(p + "ffn.b1", 1, config_.d_ff);
        o.w2 = add_tensor(p + "ffn.w2", config_.d_ff, d);
        o.b2 = add_tensor(p + "ffn.b2", 1, d);
        layers_.push_back(o);
    }
    lnf_g_ = add_tensor("lnf.gain", 1, d);
    lnf_b_ = add_tensor("lnf.bias", 1, d);
    head_w_ = add_tensor("head.weight", d, config_.n_classes);
    head_b_ = add_tensor("head.bias", 1, config_.n_classes);
}

std::size_t Model::add_tensor(std::string name, std::size_t rows, std::size_t cols) {
    const std::size_t offset = params_.size();
    tensors_.push_back({std::move(name), rows, cols, offset});
    params_.resize(offset + rows * cols, 0.0);
    return offset;
}

const TensorSpec& Model::tensor(std::string_view name) const {
    for (const auto& t : tensors_)
        if (t.name == name) return t;
    throw ArgumentError("unknown tensor '" + std::string(name) + "'");
}

std::span<double> Model::tensor_data(std::string_view name) {
    const auto& t = tensor(name);
    return {params_.data() + t.offset, t.size()};
}

std::span<const double> Model::tensor_data(std::string_view name) const {
    const auto& t = tensor(name);
    return {params_.data() + t.offset, t.size()};
}

std::uint64_t Model::fingerprint() const {
    nlohmann::json j = config_;
    std::uint64_t h = fnv1a64(j.dump());
    std::uint8_t bytes[8];
    for (double x : params_) {
        auto bits = std::bit_cast<std::uint64_t>(x);
        for (int i = 0; i < 8; ++i) bytes[i] = static_cast<std::uint8_t>(bits >> (8 * i));
        h = fnv1a64(std::span<const std::uint8_t>(bytes, 8), h);
    }
    return h;
}

Model init_model(const ModelConfig& config) {
    Model model(config);
    Rng rng(derive_seed(config.seed, "model-init"));
    auto params = model.parameters();
    for (const auto& t : model.tensors()) {
        const bool is_gain = t.name.ends_with(".gain");
        const bool is_head = t.name.starts_with("head.");
        const bool is_vector = t.rows == 1;
        double* p = params.data() + t.offset;
        if (is_gain) {
            std::fill(p, p + t.size(), 1.0);
        } else if (is_head || is_vector) {
            std::fill(p, p + t.size(), 0.0);
        } else {
            const bool embedding = t.name == "tok_emb" || t.name == "pos_emb";
            const double bound = 1.0 / std::sqrt(static_cast<double>(embedding ? config.d_model : t.rows));
            for (std::size_t i = 0; i < t.size(); ++i) p[i] = rng.uniform(-bound, bound);
        }
    }
    return model;
}

std::size_t argmax(std::span<const double> values) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i)
        if (values[i] > values[best]) best = i;
    return best;
}

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;
constexpr std::size_t kGradChunks = 8;

double log_sum_exp(std::span<const double> z) {
    const double mx = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (double x : z) total += std::exp(x - mx);
    return mx + std::log(total);
}

// y[L x out] = b + x[L x in] * W[in x out]
void linear(const double* x, std::size_t rows, std::size_t in, const double* w, const double* b, std::size_t out, double* y) {
    for (std::size_t r = 0; r < rows; ++r) {
        double* yr = y + r * out;
        std::copy(b, b + out, yr);
        const double* xr = x + r * in;
        for (std::size_t i = 0; i < in; ++i) {
            const double xi = xr[i];
            const double* wi = w + i * out;
            for (std::size_t j = 0; j < out; ++j) yr[j] += xi * wi[j];
        }
    }
}

// dW += x^T dy, db += sum_r dy, dx = dy W^T (dx overwritten if non-null).
void linear_backward(const double* x, const double* dy, std::size_t rows, std::size_t in, const double* w, std::size_t out,
                     double* dw, double* db, double* dx) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * in;
        const double* dyr = dy + r * out;
        for (std::size_t j = 0; j < out; ++j) db[j] += dyr[j];
        for (std::size_t i = 0; i < in; ++i) {
            const double xi = xr[i];
            double* dwi = dw + i * out;
            for (std::size_t j = 0; j < out; ++j) dwi[j] += xi * dyr[j];
        }
        if (dx) {
            double* dxr = dx + r * in;
            for (std::size_t i = 0; i < in; ++i) {
                const double* wi = w + i * out;
                double acc = 0.0;
                for (std::size_t j = 0; j < out; ++j) acc += wi[j] * dyr[j];
                dxr[i] = acc;
            }
        }
    }
}

void layernorm(const double* x, std::size_t rows, std::size_t d, const double* g, const double* b, double* xhat, double* rstd,
               double* y) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * d;
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) mean += xr[i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
        rstd[r] = rs;
        for (std::size_t i = 0; i < d; ++i) {
            const double h = (xr[i] - mean) * rs;
            xhat[r * d + i] = h;
            y[r * d + i] = g[i] * h + b[i];
        }
    }
}

// dx += layernorm backward of dy.
void layernorm_backward(const double* dy, const double* xhat, const double* rstd, std::size_t rows, std::size_t d,
                        const double* g, double* dg, double* db, double* dx) {
    std::vector<double> dxhat(d);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* dyr = dy + r * d;
        const double* hr = xhat + r * d;
        double mean_dxhat = 0.0;
        double mean_dxhat_h = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            dg[i] += dyr[i] * hr[i];
            db[i] += dyr[i];
            dxhat[i] = dyr[i] * g[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_h += dxhat[i] * hr[i];
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_h /= static_cast<double>(d);
        for (std::size_t i = 0; i < d; ++i) dx[r * d + i] += rstd[r] * (dxhat[i] - mean_dxhat - hr[i] * mean_dxhat_h);
    }
}

struct LayerCache {
    std::vector<double> ln1_xhat, ln1_rstd, ln1_out;
    std::vector<double> q, k, v, probs, heads;
    std::vector<double> ln2_xhat, ln2_rstd, ln2_out;
    std::vector<double> pre_act, act;
};

struct SequenceCache {
    std::size_t length = 0;
    std::vector<std::int32_t> tokens;
    std::vector<std::size_t> positions;
    std::vector<LayerCache> layers;
    std::vector<double> lnf_xhat, lnf_rstd;
    std::vector<double> pooled;
    std::vector<double> logits;
};

// Interventions grouped per (layer, sublayer) in list order.
struct InterventionIndex {
    std::vector<std::vector<const Intervention*>> attention;
    std::vector<std::vector<const Intervention*>> ffn;
};

InterventionIndex index_interventions(const Model& model, const InterventionList& interventions) {
    const auto& cfg = model.config();
    InterventionIndex idx{std::vector<std::vector<const Intervention*>>(cfg.n_layers),
                          std::vector<std::vector<const Intervention*>>(cfg.n_layers)};
    for (const auto& iv : interventions) {
        if (iv.site.layer_index >= cfg.n_layers)
            throw ArgumentError("intervention at unknown site " + to_string(iv.site));
        if (iv.direction.dim() != cfg.d_model) {
            std::ostringstream os;
            os << "intervention at " << to_string(iv.site) << " has dimension " << iv.direction.dim()
               << ", model d_model is " << cfg.d_model;
            throw ArgumentError(os.str());
        }
        if (!std::isfinite(iv.alpha) || !all_finite(iv.direction.span()))
            throw ArgumentError("intervention at " + to_string(iv.site) + " is not finite");
        if (iv.alpha == 0.0) continue;
        auto& bucket = iv.site.sublayer == Sublayer::attention_out ? idx.attention : idx.ffn;
        bucket[iv.site.layer_index].push_back(&iv);
    }
    return idx;
}

void apply_and_capture(std::vector<double>& out, std::size_t length, std::size_t d,
                       const std::vector<const Intervention*>& ivs, double* capture) {
    for (const Intervention* iv : ivs) {
        const double a = iv->alpha;
        const double* dir = iv->direction.data();
        for (std::size_t t = 0; t < length; ++t)
            for (std::size_t i = 0; i < d; ++i) out[t * d + i] += a * dir[i];
    }
    if (capture) {
        for (std::size_t i = 0; i < d; ++i) {
            double acc = 0.0;
            for (std::size_t t = 0; t < length; ++t) acc += out[t * d + i];
            capture[i] = acc / static_cast<double>(length);
        }
    }
}

struct CaptureSlots {
    std::vector<double*> attention;  // per layer, nullptr if not captured
    std::vector<double*> ffn;
};

// Runs one sequence made of its non-pad tokens at their original positions.
void run_sequence(const Model& model, SequenceCache& c, const InterventionIndex& ivs, const CaptureSlots& slots) {
    const auto& cfg = model.config();
    const double* p = model.parameters().data();
    const std::size_t L = c.length;
    const std::size_t d = cfg.d_model;
    const std::size_t ff = cfg.d_ff;
    const std::size_t H = cfg.n_heads;
    const std::size_t dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool causal = cfg.attention_mode == AttentionMode::causal;

    std::vector<double> x(L * d);
    for (std::size_t t = 0; t < L; ++t) {
        const double* te = p + model.tok_emb() + static_cast<std::size_t>(c.tokens[t]) * d;
        const double* pe = p + model.pos_emb() + c.positions[t] * d;
        for (std::size_t i = 0; i < d; ++i) x[t * d + i] = te[i] + pe[i];
    }

    c.layers.resize(cfg.n_layers);
    std::vector<double> sub(L * d);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& o = model.layer(l);
        auto& lc = c.layers[l];
        lc.ln1_xhat.resize(L * d);
        lc.ln1_rstd.resize(L);
        lc.ln1_out.resize(L * d);
        layernorm(x.data(), L, d, p + o.ln1_g, p + o.ln1_b, lc.ln1_xhat.data(), lc.ln1_rstd.data(), lc.ln1_out.data());

        lc.q.resize(L * d);
        lc.k.resize(L * d);
        lc.v.resize(L * d);
        linear(lc.ln1_out.data(), L, d, p + o.wq, p + o.bq, d, lc.q.data());
        linear(lc.ln1_out.data(), L, d, p + o.wk, p + o.bk, d, lc.k.data());
        linear(lc.ln1_out.data(), L, d, p + o.wv, p + o.bv, d, lc.v.data());

        lc.probs.assign(H * L * L, 0.0);
        lc.heads.assign(L * d, 0.0);
        for (std::size_t h = 0; h < H; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t i = 0; i < L; ++i) {
                double* prow = lc.probs.data() + (h * L + i) * L;
                const std::size_t jmax = causal ? i + 1 : L;
                double mx = -INFINITY;
                for (std::size_t j = 0; j < jmax; ++j) {
                    double s = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) s += lc.q[i * d + off + e] * lc.k[j * d + off + e];
                    prow[j] = s * scale;
                    mx = std::max(mx, prow[j]);
                }
                double total = 0.0;
                for (std::size_t j = 0; j < jmax; ++j) {
                    prow[j] = std::exp(prow[j] - mx);
                    total += prow[j];
                }
                for (std::size_t j = 0; j < jmax; ++j) prow[j] /= total;
                double* hrow = lc.heads.data() + i * d + off;
                for (std::size_t j = 0; j < jmax; ++j) {
                    const double pj = prow[j];
                    const double* vj = lc.v.data() + j * d + off;
                    for (std::size_t e = 0; e < dh; ++e) hrow[e] += pj * vj[e];
                }
            }
        }
        linear(lc.heads.data(), L, d, p + o.wo, p + o.bo, d, sub.data());
        apply_and_capture(sub, L, d, ivs.attention[l], slots.attention[l]);
        for (std::size_t i = 0; i < L * d; ++i) x[i] += sub[i];

        lc.ln2_xhat.resize(L * d);
        lc.ln2_rstd.resize(L);
        lc.ln2_out.resize(L * d);
        layernorm(x.data(), L, d, p + o.ln2_g, p + o.ln2_b, lc.ln2_xhat.data(), lc.ln2_rstd.data(), lc.ln2_out.data());
        lc.pre_act.resize(L * ff);
        lc.act.resize(L * ff);
        linear(lc.ln2_out.data(), L, d, p + o.w1, p + o.b1, ff, lc.pre_act.data());
        for (std::size_t i = 0; i < L * ff; ++i) {
            const double u = lc.pre_act[i];
            lc.act[i] = 0.5 * u * (1.0 + std::tanh(kGeluC * (u + kGeluA * u * u * u)));
        }
        linear(lc.act.data(), L, ff, p + o.w2, p + o.b2, d, sub.data());
        apply_and_capture(sub, L, d, ivs.ffn[l], slots.ffn[l]);
        for (std::size_t i = 0; i < L * d; ++i) x[i] += sub[i];
    }

    c.lnf_xhat.resize(L * d);
    c.lnf_rstd.resize(L);
    std::vector<double> y(L * d);
    layernorm(x.data(), L, d, p + model.lnf_g(), p + model.lnf_b(), c.lnf_xhat.data(), c.lnf_rstd.data(), y.data());
    c.pooled.assign(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (std::size_t t = 0; t < L; ++t) acc += y[t * d + i];
        c.pooled[i] = acc / static_cast<double>(L);
    }
    c.logits.resize(cfg.n_classes);
    linear(c.pooled.data(), 1, d, p + model.head_w(), p + model.head_b(), cfg.n_classes, c.logits.data());
}

// Accumulates d(loss_scale * CE)/dtheta into grad; returns the example's CE.
double backward_sequence(const Model& model, const SequenceCache& c, std::int32_t label, double loss_scale, double* grad) {
    const auto& cfg = model.config();
    const double* p = model.parameters().data();
    const std::size_t L = c.length;
    const std::size_t d = cfg.d_model;
    const std::size_t ff = cfg.d_ff;
    const std::size_t H = cfg.n_heads;
    const std::size_t dh = cfg.head_dim();
    const std::size_t C = cfg.n_classes;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool causal = cfg.attention_mode == AttentionMode::causal;

    std::vector<double> probs(c.logits);
    softmax_inplace(probs);
    const double ce = log_sum_exp(c.logits) - c.logits[static_cast<std::size_t>(label)];
    std::vector<double> dlogits(C);
    for (std::size_t k = 0; k < C; ++k) dlogits[k] = loss_scale * (probs[k] - (k == static_cast<std::size_t>(label) ? 1.0 : 0.0));

    std::vector<double> dpooled(d);
    linear_backward(c.pooled.data(), dlogits.data(), 1, d, p + model.head_w(), C, grad + model.head_w(), grad + model.head_b(),
                    dpooled.data());

    std::vector<double> dy(L * d);
    for (std::size_t t = 0; t < L; ++t)
        for (std::size_t i = 0; i < d; ++i) dy[t * d + i] = dpooled[i] / static_cast<double>(L);
    std::vector<double> dx(L * d, 0.0);
    layernorm_backward(dy.data(), c.lnf_xhat.data(), c.lnf_rstd.data(), L, d, p + model.lnf_g(), grad + model.lnf_g(),
                       grad + model.lnf_b(), dx.data());

    std::vector<double> dsub(L * d), dact(L * ff), dln(L * d), dheads(L * d);
    std::vector<double> dq(L * d), dk(L * d), dv(L * d), dp(L), tmp(L * d);
    for (std::size_t li = cfg.n_layers; li-- > 0;) {
        const auto& o = model.layer(li);
        const auto& lc = c.layers[li];

        // ffn branch: x_out = x_mid + W2 gelu(W1 ln2(x_mid))
        linear_backward(lc.act.data(), dx.data(), L, ff, p + o.w2, d, grad + o.w2, grad + o.b2, dact.data());
        for (std::size_t i = 0; i < L * ff; ++i) {
            const double u = lc.pre_act[i];
            const double th = std::tanh(kGeluC * (u + kGeluA * u * u * u));
            const double dgelu = 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * u * u);
            dact[i] *= dgelu;
        }
        linear_backward(lc.ln2_out.data(), dact.data(), L, d, p + o.w1, ff, grad + o.w1, grad + o.b1, dln.data());
        layernorm_backward(dln.data(), lc.ln2_xhat.data(), lc.ln2_rstd.data(), L, d, p + o.ln2_g, grad + o.ln2_g, grad + o.ln2_b,
                           dx.data());

        // attention branch: x_mid = x_in + Wo attn(ln1(x_in))
        linear_backward(lc.heads.data(), dx.data(), L, d, p + o.wo, d, grad + o.wo, grad + o.bo, dheads.data());
        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        for (std::size_t h = 0; h < H; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t i = 0; i < L; ++i) {
                const double* prow = lc.probs.data() + (h * L + i) * L;
                const std::size_t jmax = causal ? i + 1 : L;
                const double* dhrow = dheads.data() + i * d + off;
                double dot_pd = 0.0;
                for (std::size_t j = 0; j < jmax; ++j) {
                    const double* vj = lc.v.data() + j * d + off;
                    double s = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) s += dhrow[e] * vj[e];
                    dp[j] = s;
                    dot_pd += prow[j] * s;
                    double* dvj = dv.data() + j * d + off;
                    for (std::size_t e = 0; e < dh; ++e) dvj[e] += prow[j] * dhrow[e];
                }
                const double* qi = lc.q.data() + i * d + off;
                double* dqi = dq.data() + i * d + off;
                for (std::size_t j = 0; j < jmax; ++j) {
                    const double ds = prow[j] * (dp[j] - dot_pd) * scale;
                    const double* kj = lc.k.data() + j * d + off;
                    double* dkj = dk.data() + j * d + off;
                    for (std::size_t e = 0; e < dh; ++e) {
                        dqi[e] += ds * kj[e];
                        dkj[e] += ds * qi[e];
                    }
                }
            }
        }
        linear_backward(lc.ln1_out.data(), dq.data(), L, d, p + o.wq, d, grad + o.wq, grad + o.bq, dln.data());
        linear_backward(lc.ln1_out.data(), dk.data(), L, d, p + o.wk, d, grad + o.wk, grad + o.bk, tmp.data());
        for (std::size_t i = 0; i < L * d; ++i) dln[i] += tmp[i];
        linear_backward(lc.ln1_out.data(), dv.data(), L, d, p + o.wv, d, grad + o.wv, grad + o.bv, tmp.data());
        for (std::size_t i = 0; i < L * d; ++i) dln[i] += tmp[i];
        layernorm_backward(dln.data(), lc.ln1_xhat.data(), lc.ln1_rstd.data(), L, d, p + o.ln1_g, grad + o.ln1_g, grad + o.ln1_b,
                           dx.data());
    }

    for (std::size_t t = 0; t < L; ++t) {
        double* gt = grad + model.tok_emb() + static_cast<std::size_t>(c.tokens[t]) * d;
        double* gp = grad + model.pos_emb() + c.positions[t] * d;
        for (std::size_t i = 0; i < d; ++i) {
            gt[i] += dx[t * d + i];
            gp[i] += dx[t * d + i];
        }
    }
    return ce;
}

void load_sequence(const Model& model, const Batch& batch, std::size_t b, SequenceCache& c) {
    const auto& cfg = model.config();
    c.tokens.clear();
    c.positions.clear();
    for (std::size_t s = 0; s < batch.seq_len; ++s) {
        if (batch.is_pad(b, s)) continue;
        const std::int32_t tok = batch.token(b, s);
        if (tok < 0 || static_cast<std::size_t>(tok) >= cfg.vocab_size) {
            std::ostringstream os;
            os << "token id " << tok << " at example " << b << " is outside vocab_size " << cfg.vocab_size;
            throw ArgumentError(os.str());
        }
        c.tokens.push_back(tok);
        c.positions.push_back(s);
    }
    if (c.tokens.empty()) {
        std::ostringstream os;
        os << "example " << b << " has no non-pad tokens";
        throw ArgumentError(os.str());
    }
    c.length = c.tokens.size();
}

void validate_batch_shape(const Model& model, const Batch& batch) {
    if (batch.token_ids.size() != batch.batch_size * batch.seq_len || batch.pad_mask.size() != batch.token_ids.size())
        throw ArgumentError("Batch: token/pad arrays do not match batch_size x seq_len");
    if (batch.seq_len > model.config().max_seq_len) {
        std::ostringstream os;
        os << "Batch: seq_len " << batch.seq_len << " exceeds max_seq_len " << model.config().max_seq_len;
        throw ArgumentError(os.str());
    }
}

void validate_sites(const Model& model, const SiteSet& sites) {
    for (const auto& s : sites)
        if (s.layer_index >= model.config().n_layers) throw ArgumentError("unknown hook site " + to_string(s));
}

void validate_labels(const Model& model, const Batch& batch) {
    if (batch.labels.size() != batch.batch_size) throw ArgumentError("Batch: labels required for loss computation");
    for (auto y : batch.labels)
        if (y < 0 || static_cast<std::size_t>(y) >= model.config().n_classes)
            throw ArgumentError("Batch: label " + std::to_string(y) + " out of range");
}

} // namespace

CaptureResult forward_with_intervention(const Model& model, const Batch& batch, const InterventionList& interventions,
                                        const SiteSet& capture_sites) {
    validate_batch_shape(model, batch);
    validate_sites(model, capture_sites);
    const auto& cfg = model.config();
    const InterventionIndex idx = index_interventions(model, interventions);

    CaptureResult result;
    result.logits = Matrix(batch.batch_size, cfg.n_classes);
    for (const auto& s : capture_sites) result.captured.emplace(s, Matrix(batch.batch_size, cfg.d_model));

    parallel_for(batch.batch_size, [&](std::size_t begin, std::size_t end) {
        SequenceCache cache;
        CaptureSlots slots{std::vector<double*>(cfg.n_layers, nullptr), std::vector<double*>(cfg.n_layers, nullptr)};
        for (std::size_t b = begin; b < end; ++b) {
            for (auto& [site, m] : result.captured) {
                auto& slot = site.sublayer == Sublayer::attention_out ? slots.attention : slots.ffn;
                slot[site.layer_index] = m.row(b).data();
            }
            load_sequence(model, batch, b, cache);
            run_sequence(model, cache, idx, slots);
            std::copy(cache.logits.begin(), cache.logits.end(), result.logits.row(b).begin());
        }
    });
    return result;
}

CaptureResult forward_with_capture(const Model& model, const Batch& batch, const SiteSet& sites) {
    return forward_with_intervention(model, batch, {}, sites);
}

LossResult loss_and_gradient(const Model& model, const Batch& batch, std::span<double> grad) {
    validate_batch_shape(model, batch);
    validate_labels(model, batch);
    if (grad.size() != model.parameter_count()) throw ArgumentError("loss_and_gradient: gradient buffer has wrong size");
    if (batch.batch_size == 0) throw ArgumentError("loss_and_gradient: empty batch");
    const auto& cfg = model.config();
    const std::size_t B = batch.batch_size;
    const std::size_t chunks = std::min(B, kGradChunks);
    const double loss_scale = 1.0 / static_cast<double>(B);

    std::vector<std::vector<double>> partial(chunks);
    std::vector<double> chunk_loss(chunks, 0.0);
    std::vector<std::size_t> chunk_correct(chunks, 0);
    const InterventionIndex idx = index_interventions(model, {});

    parallel_for(chunks, [&](std::size_t cbegin, std::size_t cend) {
        SequenceCache cache;
        CaptureSlots slots{std::vector<double*>(cfg.n_layers, nullptr), std::vector<double*>(cfg.n_layers, nullptr)};
        for (std::size_t ch = cbegin; ch < cend; ++ch) {
            const std::size_t begin = ch * B / chunks;
            const std::size_t end = (ch + 1) * B / chunks;
            auto& g = partial[ch];
            g.assign(model.parameter_count(), 0.0);
            for (std::size_t b = begin; b < end; ++b) {
                load_sequence(model, batch, b, cache);
                run_sequence(model, cache, idx, slots);
                const auto label = batch.labels[b];
                if (argmax(cache.logits) == static_cast<std::size_t>(label)) ++chunk_correct[ch];
                chunk_loss[ch] += backward_sequence(model, cache, label, loss_scale, g.data());
            }
        }
    });

    std::fill(grad.begin(), grad.end(), 0.0);
    LossResult r;
    for (std::size_t ch = 0; ch < chunks; ++ch) {
        const auto& g = partial[ch];
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
        r.loss += chunk_loss[ch];
        r.correct += chunk_correct[ch];
    }
    r.loss /= static_cast<double>(B);
    return r;
}

LossResult evaluate_loss(const Model& model, const Batch& batch) {
    validate_labels(model, batch);
    const CaptureResult out = forward_with_capture(model, batch, {});
    LossResult r;
    for (std::size_t b = 0; b < batch.batch_size; ++b) {
        const auto z = out.logits.row(b);
        const auto label = static_cast<std::size_t>(batch.labels[b]);
        if (argmax(z) == label) ++r.correct;
        r.loss += log_sum_exp(z) - z[label];
    }
    r.loss /= static_cast<double>(batch.batch_size);
    return r;
}

} // namespace tardis
