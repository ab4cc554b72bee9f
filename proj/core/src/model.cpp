#include "smmini/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "smmini/error.hpp"
#include "smmini/rng.hpp"

namespace smmini {

namespace {

constexpr double kNormEps = 1e-5;
constexpr std::size_t kLinearsPerLayer = 7;
constexpr const char* kLayerLinearNames[kLinearsPerLayer] = {"wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"};

Matrix gaussian(std::size_t rows, std::size_t cols, double std_dev, Rng& rng) {
    Matrix m(rows, cols);
    for (double& v : m.values()) {
        v = std_dev * rng.normal();
    }
    return m;
}

Matrix row_vector(const std::vector<double>& v) {
    Matrix m(1, v.size());
    std::copy(v.begin(), v.end(), m.values().begin());
    return m;
}

struct Dropout {
    bool active = false;
    double p = 0.0;
    std::uint64_t seed = 0;
};

struct LinearCache {
    Matrix dropped;    // adapter input after dropout
    Matrix projected;  // dropped * A^T
    Matrix keep;       // per-element dropout multiplier; empty when dropout is off
};

Matrix linear_forward(const Linear& lin, const Matrix& x, const Dropout& drop, std::size_t index,
                      LinearCache* cache) {
    Matrix y = matmul_nt(x, lin.weight);
    if (!lin.adapter) {
        return y;
    }
    const LoraAdapter& ad = *lin.adapter;
    Matrix dropped = x;
    Matrix keep;
    if (drop.active && ad.dropout > 0.0) {
        keep = Matrix(x.rows(), x.cols());
        const double inv_keep = 1.0 / (1.0 - ad.dropout);
        for (std::size_t t = 0; t < x.rows(); ++t) {
            for (std::size_t i = 0; i < x.cols(); ++i) {
                const bool kept = hash_uniform(drop.seed, index, t, i) >= ad.dropout;
                keep(t, i) = kept ? inv_keep : 0.0;
                dropped(t, i) *= keep(t, i);
            }
        }
    }
    Matrix projected = matmul_nt(dropped, ad.a);
    add_scaled(y, matmul_nt(projected, ad.b), ad.scale());
    if (cache) {
        cache->dropped = std::move(dropped);
        cache->projected = std::move(projected);
        cache->keep = std::move(keep);
    }
    return y;
}

// Accumulates dA/dB into `grad_a`/`grad_b` (when adapted) and returns dX.
Matrix linear_backward(const Linear& lin, const LinearCache& cache, const Matrix& dy, Matrix* grad_a,
                       Matrix* grad_b) {
    Matrix dx = matmul_nn(dy, lin.weight);
    if (!lin.adapter) {
        return dx;
    }
    const LoraAdapter& ad = *lin.adapter;
    const double s = ad.scale();
    const Matrix g = matmul_nn(dy, ad.b);  // T x r
    add_scaled(*grad_b, matmul_tn(dy, cache.projected), s);
    add_scaled(*grad_a, matmul_tn(g, cache.dropped), s);
    Matrix d_dropped = matmul_nn(g, ad.a);
    auto dd = d_dropped.values();
    auto dxv = dx.values();
    if (cache.keep.empty()) {
        for (std::size_t i = 0; i < dd.size(); ++i) {
            dxv[i] += s * dd[i];
        }
    } else {
        auto keep = cache.keep.values();
        for (std::size_t i = 0; i < dd.size(); ++i) {
            dxv[i] += s * dd[i] * keep[i];
        }
    }
    return dx;
}

Matrix rmsnorm_forward(const Matrix& x, const std::vector<double>& gain, std::vector<double>* inv_rms) {
    Matrix y(x.rows(), x.cols());
    if (inv_rms) {
        inv_rms->assign(x.rows(), 0.0);
    }
    const double d = static_cast<double>(x.cols());
    for (std::size_t t = 0; t < x.rows(); ++t) {
        double ss = 0.0;
        for (double v : x.row(t)) {
            ss += v * v;
        }
        const double r = 1.0 / std::sqrt(ss / d + kNormEps);
        for (std::size_t i = 0; i < x.cols(); ++i) {
            y(t, i) = x(t, i) * r * gain[i];
        }
        if (inv_rms) {
            (*inv_rms)[t] = r;
        }
    }
    return y;
}

Matrix rmsnorm_backward(const Matrix& x, const std::vector<double>& gain, const std::vector<double>& inv_rms,
                        const Matrix& dy) {
    Matrix dx(x.rows(), x.cols());
    const double d = static_cast<double>(x.cols());
    for (std::size_t t = 0; t < x.rows(); ++t) {
        const double r = inv_rms[t];
        double dot = 0.0;
        for (std::size_t i = 0; i < x.cols(); ++i) {
            dot += gain[i] * dy(t, i) * x(t, i);
        }
        const double coef = r * r * r * dot / d;
        for (std::size_t i = 0; i < x.cols(); ++i) {
            dx(t, i) = r * gain[i] * dy(t, i) - x(t, i) * coef;
        }
    }
    return dx;
}

double sigmoid(double x) {
    return 1.0 / (1.0 + std::exp(-x));
}

struct LayerCache {
    Matrix x_in;
    Matrix h1;
    std::vector<double> r1;
    LinearCache q_cache, k_cache, v_cache, o_cache;
    Matrix q, k, v;
    std::vector<Matrix> probs;  // per head, T x T (lower triangle used)
    Matrix attended;
    Matrix x_mid;
    Matrix h2;
    std::vector<double> r2;
    LinearCache gate_cache, up_cache, down_cache;
    Matrix gate, up, mixed;
};

struct ForwardCache {
    std::vector<LayerCache> layers;
    Matrix x_final;
    std::vector<double> r_final;
    Matrix normed_final;
    LinearCache head_cache;
};

// Causal multi-head attention. Row t only ever reads rows <= t, and every
// reduction runs in a fixed order, so earlier rows are bitwise independent of later tokens.
Matrix attention_forward(const Matrix& q, const Matrix& k, const Matrix& v, int n_heads,
                         std::vector<Matrix>* probs_out) {
    const std::size_t T = q.rows();
    const std::size_t d = q.cols();
    const std::size_t hd = d / static_cast<std::size_t>(n_heads);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    Matrix out(T, d);
    if (probs_out) {
        probs_out->assign(static_cast<std::size_t>(n_heads), Matrix(T, T));
    }
    std::vector<double> scores(T);
    for (std::size_t h = 0; h < static_cast<std::size_t>(n_heads); ++h) {
        const std::size_t off = h * hd;
        for (std::size_t t = 0; t < T; ++t) {
            double max_s = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j <= t; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < hd; ++c) {
                    s += q(t, off + c) * k(j, off + c);
                }
                scores[j] = s * inv_sqrt;
                max_s = std::max(max_s, scores[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j <= t; ++j) {
                scores[j] = std::exp(scores[j] - max_s);
                z += scores[j];
            }
            for (std::size_t j = 0; j <= t; ++j) {
                const double p = scores[j] / z;
                if (probs_out) {
                    (*probs_out)[h](t, j) = p;
                }
                for (std::size_t c = 0; c < hd; ++c) {
                    out(t, off + c) += p * v(j, off + c);
                }
            }
        }
    }
    return out;
}

void attention_backward(const LayerCache& lc, const Matrix& d_out, int n_heads, Matrix& dq, Matrix& dk,
                        Matrix& dv) {
    const std::size_t T = lc.q.rows();
    const std::size_t d = lc.q.cols();
    const std::size_t hd = d / static_cast<std::size_t>(n_heads);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    dq = Matrix(T, d);
    dk = Matrix(T, d);
    dv = Matrix(T, d);
    std::vector<double> dp(T);
    for (std::size_t h = 0; h < static_cast<std::size_t>(n_heads); ++h) {
        const std::size_t off = h * hd;
        const Matrix& P = lc.probs[h];
        for (std::size_t t = 0; t < T; ++t) {
            double weighted = 0.0;
            for (std::size_t j = 0; j <= t; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < hd; ++c) {
                    s += d_out(t, off + c) * lc.v(j, off + c);
                    dv(j, off + c) += P(t, j) * d_out(t, off + c);
                }
                dp[j] = s;
                weighted += P(t, j) * s;
            }
            for (std::size_t j = 0; j <= t; ++j) {
                const double ds = P(t, j) * (dp[j] - weighted) * inv_sqrt;
                for (std::size_t c = 0; c < hd; ++c) {
                    dq(t, off + c) += ds * lc.k(j, off + c);
                    dk(j, off + c) += ds * lc.q(t, off + c);
                }
            }
        }
    }
}

Matrix run_forward(const Parameters& params, std::span<const TokenId> tokens, Mode mode, std::uint64_t seed,
                   ForwardCache* cache) {
    const ModelConfig& cfg = params.config;
    if (tokens.size() > static_cast<std::size_t>(cfg.max_sequence_length)) {
        throw Error(ErrorKind::length, "sequence of " + std::to_string(tokens.size()) +
                                           " tokens exceeds max_sequence_length " +
                                           std::to_string(cfg.max_sequence_length));
    }
    const std::size_t T = tokens.size();
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const Dropout drop{mode == Mode::train, cfg.lora_dropout, seed};

    Matrix x(T, d);
    for (std::size_t t = 0; t < T; ++t) {
        const TokenId id = tokens[t];
        if (id < 0 || id >= cfg.vocab_size) {
            throw Error(ErrorKind::token, "token id " + std::to_string(id) + " outside vocabulary");
        }
        const auto emb = params.token_embedding.row(static_cast<std::size_t>(id));
        const auto pos = params.position_embedding.row(t);
        for (std::size_t i = 0; i < d; ++i) {
            x(t, i) = emb[i] + pos[i];
        }
    }

    if (cache) {
        cache->layers.resize(params.layers.size());
    }
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        const DecoderLayer& layer = params.layers[l];
        const std::size_t base = l * kLinearsPerLayer;
        LayerCache local;
        LayerCache& lc = cache ? cache->layers[l] : local;
        const bool keep = cache != nullptr;

        std::vector<double> r1;
        Matrix h1 = rmsnorm_forward(x, layer.attn_norm, &r1);
        Matrix q = linear_forward(layer.wq, h1, drop, base + 0, keep ? &lc.q_cache : nullptr);
        Matrix k = linear_forward(layer.wk, h1, drop, base + 1, keep ? &lc.k_cache : nullptr);
        Matrix v = linear_forward(layer.wv, h1, drop, base + 2, keep ? &lc.v_cache : nullptr);
        Matrix attended = attention_forward(q, k, v, cfg.n_heads, keep ? &lc.probs : nullptr);
        Matrix o = linear_forward(layer.wo, attended, drop, base + 3, keep ? &lc.o_cache : nullptr);
        Matrix x_mid = x;
        add_scaled(x_mid, o, 1.0);

        std::vector<double> r2;
        Matrix h2 = rmsnorm_forward(x_mid, layer.mlp_norm, &r2);
        Matrix gate = linear_forward(layer.w_gate, h2, drop, base + 4, keep ? &lc.gate_cache : nullptr);
        Matrix up = linear_forward(layer.w_up, h2, drop, base + 5, keep ? &lc.up_cache : nullptr);
        Matrix mixed(gate.rows(), gate.cols());
        {
            auto g = gate.values();
            auto u = up.values();
            auto m = mixed.values();
            for (std::size_t i = 0; i < m.size(); ++i) {
                m[i] = g[i] * sigmoid(g[i]) * u[i];
            }
        }
        Matrix down = linear_forward(layer.w_down, mixed, drop, base + 6, keep ? &lc.down_cache : nullptr);
        Matrix x_out = x_mid;
        add_scaled(x_out, down, 1.0);

        if (keep) {
            lc.x_in = std::move(x);
            lc.h1 = std::move(h1);
            lc.r1 = std::move(r1);
            lc.q = std::move(q);
            lc.k = std::move(k);
            lc.v = std::move(v);
            lc.attended = std::move(attended);
            lc.x_mid = std::move(x_mid);
            lc.h2 = std::move(h2);
            lc.r2 = std::move(r2);
            lc.gate = std::move(gate);
            lc.up = std::move(up);
            lc.mixed = std::move(mixed);
        }
        x = std::move(x_out);
    }

    std::vector<double> r_final;
    Matrix normed = rmsnorm_forward(x, params.final_norm, &r_final);
    const std::size_t head_index = params.layers.size() * kLinearsPerLayer;
    Matrix logits = linear_forward(params.head, normed, drop, head_index, cache ? &cache->head_cache : nullptr);
    if (cache) {
        cache->x_final = std::move(x);
        cache->r_final = std::move(r_final);
        cache->normed_final = std::move(normed);
    }
    return logits;
}

void check_linear(const Linear& lin, const std::string& name) {
    if (!lin.adapter) {
        return;
    }
    const auto& ad = *lin.adapter;
    if (ad.a.rows() != static_cast<std::size_t>(ad.rank) || ad.a.cols() != lin.in_features() ||
        ad.b.rows() != lin.out_features() || ad.b.cols() != static_cast<std::size_t>(ad.rank)) {
        throw Error(ErrorKind::shape, "adapter shapes inconsistent with linear layer " + name);
    }
}

}  // namespace

std::string_view to_string(LoraTarget target) noexcept {
    switch (target) {
        case LoraTarget::all_linear: return "all_linear";
        case LoraTarget::attention_mlp: return "attention_mlp";
    }
    return "unknown";
}

LoraTarget parse_lora_target(std::string_view text) {
    if (text == "all_linear" || text == "all-linear") {
        return LoraTarget::all_linear;
    }
    if (text == "attention_mlp" || text == "attention-mlp") {
        return LoraTarget::attention_mlp;
    }
    throw Error(ErrorKind::config, "unknown lora target '" + std::string(text) + "'");
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorKind::config, what); };
    if (vocab_size < 1) fail("vocab_size must be positive");
    if (d_model < 1) fail("d_model must be positive");
    if (n_heads < 1) fail("n_heads must be positive");
    if (d_model % n_heads != 0) {
        fail("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" + std::to_string(n_heads) +
             ")");
    }
    if (n_layers < 0) fail("n_layers must be non-negative");
    if (d_ff < 1) fail("d_ff must be positive");
    if (max_sequence_length < 1) fail("max_sequence_length must be positive");
    if (lora_r < 1) fail("lora_r must be at least 1");
    if (!std::isfinite(lora_alpha)) fail("lora_alpha must be finite");
    if (!(lora_dropout >= 0.0 && lora_dropout < 1.0)) fail("lora_dropout must lie in [0, 1)");
    if (!(init_std >= 0.0) || !std::isfinite(init_std)) fail("init_std must be finite and non-negative");
}

Matrix lora_delta(const LoraAdapter& adapter) {
    if (adapter.a.rows() != adapter.b.cols() || adapter.a.rows() != static_cast<std::size_t>(adapter.rank)) {
        throw Error(ErrorKind::shape, "lora_delta: A is " + std::to_string(adapter.a.rows()) + "x" +
                                          std::to_string(adapter.a.cols()) + ", B is " +
                                          std::to_string(adapter.b.rows()) + "x" + std::to_string(adapter.b.cols()) +
                                          ", rank " + std::to_string(adapter.rank));
    }
    Matrix delta = matmul_nn(adapter.b, adapter.a);
    const double s = adapter.scale();
    for (double& v : delta.values()) {
        v *= s;
    }
    return delta;
}

std::vector<Linear*> Parameters::linears() {
    std::vector<Linear*> out;
    out.reserve(layers.size() * kLinearsPerLayer + 1);
    for (auto& l : layers) {
        for (Linear* lin : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w_gate, &l.w_up, &l.w_down}) {
            out.push_back(lin);
        }
    }
    out.push_back(&head);
    return out;
}

std::vector<const Linear*> Parameters::linears() const {
    auto mut = const_cast<Parameters*>(this)->linears();
    return {mut.begin(), mut.end()};
}

std::vector<std::string> Parameters::linear_names() const {
    std::vector<std::string> out;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        for (const char* name : kLayerLinearNames) {
            out.push_back("layers." + std::to_string(l) + "." + name);
        }
    }
    out.emplace_back("head");
    return out;
}

std::vector<Matrix*> Parameters::trainable_tensors() {
    std::vector<Matrix*> out;
    for (Linear* lin : linears()) {
        if (lin->adapter) {
            out.push_back(&lin->adapter->a);
            out.push_back(&lin->adapter->b);
        }
    }
    return out;
}

std::vector<const Matrix*> Parameters::trainable_tensors() const {
    auto mut = const_cast<Parameters*>(this)->trainable_tensors();
    return {mut.begin(), mut.end()};
}

std::vector<std::string> Parameters::trainable_names() const {
    std::vector<std::string> out;
    const auto names = linear_names();
    const auto lins = linears();
    for (std::size_t i = 0; i < lins.size(); ++i) {
        if (lins[i]->adapter) {
            out.push_back(names[i] + ".lora_a");
            out.push_back(names[i] + ".lora_b");
        }
    }
    return out;
}

std::vector<std::pair<std::string, Matrix>> Parameters::frozen_snapshot() const {
    std::vector<std::pair<std::string, Matrix>> out;
    out.emplace_back("token_embedding", token_embedding);
    out.emplace_back("position_embedding", position_embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string prefix = "layers." + std::to_string(l) + ".";
        out.emplace_back(prefix + "attn_norm", row_vector(layers[l].attn_norm));
        out.emplace_back(prefix + "mlp_norm", row_vector(layers[l].mlp_norm));
    }
    out.emplace_back("final_norm", row_vector(final_norm));
    const auto names = linear_names();
    const auto lins = linears();
    for (std::size_t i = 0; i < lins.size(); ++i) {
        out.emplace_back(names[i] + ".weight", lins[i]->weight);
    }
    return out;
}

Parameters init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    const auto d = static_cast<std::size_t>(config.d_model);
    const auto ff = static_cast<std::size_t>(config.d_ff);
    const auto vocab = static_cast<std::size_t>(config.vocab_size);
    const double sd = config.init_std;
    Rng rng(seed);

    Parameters p;
    p.config = config;
    p.token_embedding = gaussian(vocab, d, sd, rng);
    p.position_embedding = gaussian(static_cast<std::size_t>(config.max_sequence_length), d, sd, rng);
    p.layers.resize(static_cast<std::size_t>(config.n_layers));
    for (auto& l : p.layers) {
        l.attn_norm.assign(d, 1.0);
        l.mlp_norm.assign(d, 1.0);
        l.wq.weight = gaussian(d, d, sd, rng);
        l.wk.weight = gaussian(d, d, sd, rng);
        l.wv.weight = gaussian(d, d, sd, rng);
        l.wo.weight = gaussian(d, d, sd, rng);
        l.w_gate.weight = gaussian(ff, d, sd, rng);
        l.w_up.weight = gaussian(ff, d, sd, rng);
        l.w_down.weight = gaussian(d, ff, sd, rng);
    }
    p.final_norm.assign(d, 1.0);
    p.head.weight = gaussian(vocab, d, sd, rng);

    // Adapters are drawn after every base tensor, so the target set never shifts base weights.
    const auto r = static_cast<std::size_t>(config.lora_r);
    auto lins = p.linears();
    for (std::size_t i = 0; i < lins.size(); ++i) {
        const bool is_head = i + 1 == lins.size();
        if (is_head && config.lora_target != LoraTarget::all_linear) {
            continue;
        }
        Linear& lin = *lins[i];
        LoraAdapter ad;
        ad.rank = config.lora_r;
        ad.alpha = config.lora_alpha;
        ad.dropout = config.lora_dropout;
        ad.a = gaussian(r, lin.in_features(), sd, rng);
        ad.b = Matrix(lin.out_features(), r);
        lin.adapter = std::move(ad);
    }
    return p;
}

void quantize_base(Parameters& params, std::size_t block_size, QuantMode mode) {
    for (Linear* lin : params.linears()) {
        lin->packed = quantize_blockwise(lin->weight, block_size, mode);
        lin->weight = dequantize(*lin->packed);
    }
}

Parameters merge_adapters(const Parameters& params) {
    Parameters merged = params;
    const auto names = merged.linear_names();
    auto lins = merged.linears();
    for (std::size_t i = 0; i < lins.size(); ++i) {
        Linear& lin = *lins[i];
        if (!lin.adapter) {
            continue;
        }
        check_linear(lin, names[i]);
        add_scaled(lin.weight, lora_delta(*lin.adapter), 1.0);
        lin.adapter.reset();
        lin.packed.reset();
    }
    return merged;
}

Parameters strip_adapters(const Parameters& params) {
    Parameters base = params;
    for (Linear* lin : base.linears()) {
        lin->adapter.reset();
    }
    return base;
}

Matrix forward(const Parameters& params, std::span<const TokenId> tokens, Mode mode, std::uint64_t seed) {
    return run_forward(params, tokens, mode, seed, nullptr);
}

Matrix log_softmax(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t t = 0; t < logits.rows(); ++t) {
        const auto row = logits.row(t);
        const double m = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) {
            z += std::exp(v - m);
        }
        const double lse = m + std::log(z);
        for (std::size_t i = 0; i < row.size(); ++i) {
            out(t, i) = row[i] - lse;
        }
    }
    return out;
}

double loss(const Matrix& logits, std::span<const TokenId> tokens, std::span<const std::uint8_t> loss_mask) {
    if (tokens.size() != loss_mask.size()) {
        throw Error(ErrorKind::shape, "tokens and loss_mask differ in length");
    }
    if (logits.rows() + 1 < tokens.size()) {
        throw Error(ErrorKind::shape, "not enough logit rows for the targets");
    }
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t t = 1; t < tokens.size(); ++t) {
        if (!loss_mask[t]) {
            continue;
        }
        const auto row = logits.row(t - 1);
        const auto target = static_cast<std::size_t>(tokens[t]);
        if (target >= row.size()) {
            throw Error(ErrorKind::token, "target id outside the logit vocabulary");
        }
        const double m = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) {
            z += std::exp(v - m);
        }
        total += m + std::log(z) - row[target];
        ++count;
    }
    if (count == 0) {
        throw Error(ErrorKind::loss, "loss mask selects no target positions");
    }
    return total / static_cast<double>(count);
}

LossAndGradients backward(const Parameters& params, std::span<const TokenId> tokens,
                          std::span<const std::uint8_t> loss_mask, std::uint64_t seed, Mode mode) {
    if (tokens.size() != loss_mask.size()) {
        throw Error(ErrorKind::shape, "tokens and loss_mask differ in length");
    }
    ForwardCache cache;
    const Matrix logits = run_forward(params, tokens, mode, seed, &cache);

    LossAndGradients out;
    out.loss = loss(logits, tokens, loss_mask);
    for (std::size_t t = 1; t < tokens.size(); ++t) {
        out.target_count += loss_mask[t] ? 1 : 0;
    }

    // d loss / d logits: (softmax - onehot) / count on every selected row.
    Matrix d_logits(logits.rows(), logits.cols());
    const double inv_count = 1.0 / static_cast<double>(out.target_count);
    for (std::size_t t = 1; t < tokens.size(); ++t) {
        if (!loss_mask[t]) {
            continue;
        }
        const auto row = logits.row(t - 1);
        const double m = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) {
            z += std::exp(v - m);
        }
        auto drow = d_logits.row(t - 1);
        for (std::size_t i = 0; i < row.size(); ++i) {
            drow[i] = std::exp(row[i] - m) / z * inv_count;
        }
        drow[static_cast<std::size_t>(tokens[t])] -= inv_count;
    }

    // Gradient slots follow Parameters::trainable_tensors(): A then B per adapted linear.
    const auto lins = params.linears();
    std::vector<int> slot(lins.size(), -1);
    for (std::size_t i = 0; i < lins.size(); ++i) {
        if (lins[i]->adapter) {
            slot[i] = static_cast<int>(out.grads.size());
            out.grads.emplace_back(lins[i]->adapter->a.rows(), lins[i]->adapter->a.cols());
            out.grads.emplace_back(lins[i]->adapter->b.rows(), lins[i]->adapter->b.cols());
        }
    }
    auto back = [&](std::size_t index, const LinearCache& lc, const Matrix& dy) {
        Matrix* ga = slot[index] >= 0 ? &out.grads[static_cast<std::size_t>(slot[index])] : nullptr;
        Matrix* gb = slot[index] >= 0 ? &out.grads[static_cast<std::size_t>(slot[index]) + 1] : nullptr;
        return linear_backward(*lins[index], lc, dy, ga, gb);
    };

    const std::size_t head_index = params.layers.size() * kLinearsPerLayer;
    const Matrix d_normed = back(head_index, cache.head_cache, d_logits);
    Matrix dx = rmsnorm_backward(cache.x_final, params.final_norm, cache.r_final, d_normed);

    for (std::size_t l = params.layers.size(); l-- > 0;) {
        const DecoderLayer& layer = params.layers[l];
        const LayerCache& lc = cache.layers[l];
        const std::size_t base = l * kLinearsPerLayer;

        const Matrix d_mixed = back(base + 6, lc.down_cache, dx);
        Matrix d_gate(d_mixed.rows(), d_mixed.cols());
        Matrix d_up(d_mixed.rows(), d_mixed.cols());
        {
            auto g = lc.gate.values();
            auto u = lc.up.values();
            auto dm = d_mixed.values();
            auto dg = d_gate.values();
            auto du = d_up.values();
            for (std::size_t i = 0; i < dm.size(); ++i) {
                const double sg = sigmoid(g[i]);
                du[i] = dm[i] * g[i] * sg;
                dg[i] = dm[i] * u[i] * sg * (1.0 + g[i] * (1.0 - sg));
            }
        }
        Matrix dh2 = back(base + 4, lc.gate_cache, d_gate);
        add_scaled(dh2, back(base + 5, lc.up_cache, d_up), 1.0);
        Matrix dx_mid = dx;
        add_scaled(dx_mid, rmsnorm_backward(lc.x_mid, layer.mlp_norm, lc.r2, dh2), 1.0);

        const Matrix d_attended = back(base + 3, lc.o_cache, dx_mid);
        Matrix dq, dk, dv;
        attention_backward(lc, d_attended, params.config.n_heads, dq, dk, dv);
        Matrix dh1 = back(base + 0, lc.q_cache, dq);
        add_scaled(dh1, back(base + 1, lc.k_cache, dk), 1.0);
        add_scaled(dh1, back(base + 2, lc.v_cache, dv), 1.0);
        dx = std::move(dx_mid);
        add_scaled(dx, rmsnorm_backward(lc.x_in, layer.attn_norm, lc.r1, dh1), 1.0);
    }
    return out;
}

}  // namespace smmini
