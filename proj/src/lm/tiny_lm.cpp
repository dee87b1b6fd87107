#include "pal/lm/tiny_lm.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include "pal/errors.h"
#include "pal/text.h"

namespace pal::lm {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

// y[T x n] = x[T x m] * W[m x n] + b
void matmul(const double* x, std::size_t T, std::size_t m, const double* W, const double* b, std::size_t n,
            double* y) {
    for (std::size_t t = 0; t < T; ++t) {
        double* yr = y + t * n;
        std::copy(b, b + n, yr);
        const double* xr = x + t * m;
        for (std::size_t k = 0; k < m; ++k) {
            const double xv = xr[k];
            const double* wr = W + k * n;
            for (std::size_t j = 0; j < n; ++j) yr[j] += xv * wr[j];
        }
    }
}

// Accumulates dW += x^T dy, db += sum_t dy, and (when dx != nullptr) dx += dy W^T.
void matmul_backward(const double* x, const double* dy, const double* W, std::size_t T, std::size_t m,
                     std::size_t n, double* dx, double* dW, double* db) {
    for (std::size_t t = 0; t < T; ++t) {
        const double* dyr = dy + t * n;
        const double* xr = x + t * m;
        for (std::size_t j = 0; j < n; ++j) db[j] += dyr[j];
        for (std::size_t k = 0; k < m; ++k) {
            const double xv = xr[k];
            double* dwr = dW + k * n;
            const double* wr = W + k * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                dwr[j] += xv * dyr[j];
                acc += dyr[j] * wr[j];
            }
            if (dx) dx[t * m + k] += acc;
        }
    }
}

void layernorm(const double* x, std::size_t T, std::size_t d, const double* g, const double* b, double* y,
               double* mu, double* rs) {
    for (std::size_t t = 0; t < T; ++t) {
        const double* xr = x + t * d;
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) mean += xr[i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= static_cast<double>(d);
        const double r = 1.0 / std::sqrt(var + kLnEps);
        for (std::size_t i = 0; i < d; ++i) y[t * d + i] = (xr[i] - mean) * r * g[i] + b[i];
        mu[t] = mean;
        rs[t] = r;
    }
}

void layernorm_backward(const double* x, const double* dy, std::size_t T, std::size_t d, const double* g,
                        const double* mu, const double* rs, double* dx, double* dg, double* db) {
    std::vector<double> dxhat(d);
    for (std::size_t t = 0; t < T; ++t) {
        const double* xr = x + t * d;
        const double* dyr = dy + t * d;
        double mean_dxhat = 0.0;
        double mean_dxhat_xhat = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double xhat = (xr[i] - mu[t]) * rs[t];
            dg[i] += dyr[i] * xhat;
            db[i] += dyr[i];
            dxhat[i] = dyr[i] * g[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xhat;
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        for (std::size_t i = 0; i < d; ++i) {
            const double xhat = (xr[i] - mu[t]) * rs[t];
            dx[t * d + i] += rs[t] * (dxhat[i] - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
}

double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u))); }

double gelu_grad(double u) {
    const double th = std::tanh(kGeluC * (u + 0.044715 * u * u * u));
    return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
}

// In-place log-softmax of one row.
void log_softmax(double* row, std::size_t n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, row[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += std::exp(row[i] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t i = 0; i < n; ++i) row[i] -= lse;
}

// Geometric per-head distance penalties 2^(-8(h+1)/H); all zero with learned positions.
std::vector<double> head_slopes(const TinyLmConfig& c) {
    std::vector<double> out(static_cast<std::size_t>(c.n_heads), 0.0);
    if (c.positions != PositionMode::alibi) return out;
    for (std::size_t h = 0; h < out.size(); ++h)
        out[h] = std::pow(2.0, -8.0 * static_cast<double>(h + 1) / static_cast<double>(c.n_heads));
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------

nlohmann::json TinyLmConfig::to_json() const {
    return {{"d_model", d_model},
            {"n_layers", n_layers},
            {"n_heads", n_heads},
            {"d_ff", d_ff},
            {"context", context},
            {"seed", seed},
            {"init", init == InitMode::random ? "random" : "uniform"},
            {"init_std", init_std},
            {"positions", positions == PositionMode::learned ? "learned" : "alibi"},
            {"optimizer",
             {{"kind", optimizer.kind == OptimizerKind::adam ? "adam" : "sgd"},
              {"beta1", optimizer.beta1},
              {"beta2", optimizer.beta2},
              {"eps", optimizer.eps},
              {"max_grad_norm", optimizer.max_grad_norm}}}};
}

TinyLmConfig TinyLmConfig::from_json(const nlohmann::json& j) {
    TinyLmConfig c;
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.context = j.value("context", c.context);
    c.seed = j.value("seed", c.seed);
    const auto init = j.value("init", std::string("random"));
    if (init != "random" && init != "uniform") throw ConfigError("model.init must be random or uniform");
    c.init = init == "random" ? InitMode::random : InitMode::uniform;
    c.init_std = j.value("init_std", c.init_std);
    const auto positions = j.value("positions", std::string("learned"));
    if (positions != "learned" && positions != "alibi") throw ConfigError("model.positions must be learned or alibi");
    c.positions = positions == "learned" ? PositionMode::learned : PositionMode::alibi;
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        const auto kind = o.value("kind", std::string("adam"));
        if (kind != "adam" && kind != "sgd") throw ConfigError("optimizer.kind must be adam or sgd");
        c.optimizer.kind = kind == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
        c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
        c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
        c.optimizer.eps = o.value("eps", c.optimizer.eps);
        c.optimizer.max_grad_norm = o.value("max_grad_norm", c.optimizer.max_grad_norm);
    }
    return c;
}

// ---------------------------------------------------------------------------

struct TinyLm::ForwardCache {
    struct Layer {
        std::vector<double> x_in, h1, mu1, rs1, qkv, att, o, x_mid, h2, mu2, rs2, u, a;
    };
    std::size_t T = 0;
    std::vector<Layer> layers;
    std::vector<double> x_final, hf, muf, rsf;
};

TinyLm::TinyLm(Tokenizer tokenizer, TinyLmConfig config) : tokenizer_(std::move(tokenizer)), config_(config) {
    if (config_.d_model <= 0 || config_.n_layers <= 0 || config_.n_heads <= 0 || config_.d_ff <= 0 ||
        config_.context <= 1) {
        throw ConfigError("tiny model dimensions must be positive (context > 1)");
    }
    if (config_.d_model % config_.n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    layout();
    initialize();
}

TinyLm::TinyLm(const TinyLm& other)
    : Backend(),
      tokenizer_(other.tokenizer_),
      config_(other.config_),
      off_(other.off_),
      params_(other.params_),
      grads_(other.grads_),
      adam_m_(other.adam_m_),
      adam_v_(other.adam_v_),
      step_(other.step_),
      frozen_(other.frozen_),
      truncations_(other.truncations_.load()) {}

void TinyLm::layout() {
    const std::size_t V = tokenizer_.vocab_size();
    const auto d = static_cast<std::size_t>(config_.d_model);
    const auto f = static_cast<std::size_t>(config_.d_ff);
    const auto C = static_cast<std::size_t>(config_.context);
    std::size_t at = 0;
    auto take = [&at](std::size_t n) {
        std::size_t o = at;
        at += n;
        return o;
    };
    off_.tok_emb = take(V * d);
    off_.pos_emb = take(config_.positions == PositionMode::learned ? C * d : 0);
    off_.layers.clear();
    for (int l = 0; l < config_.n_layers; ++l) {
        LayerOffsets lo{};
        lo.ln1_g = take(d);
        lo.ln1_b = take(d);
        lo.w_qkv = take(d * 3 * d);
        lo.b_qkv = take(3 * d);
        lo.w_o = take(d * d);
        lo.b_o = take(d);
        lo.ln2_g = take(d);
        lo.ln2_b = take(d);
        lo.w_fc1 = take(d * f);
        lo.b_fc1 = take(f);
        lo.w_fc2 = take(f * d);
        lo.b_fc2 = take(d);
        off_.layers.push_back(lo);
    }
    off_.lnf_g = take(d);
    off_.lnf_b = take(d);
    off_.w_out = take(d * V);
    off_.b_out = take(V);
    off_.total = at;
    params_.assign(at, 0.0);
    grads_.assign(at, 0.0);
}

void TinyLm::initialize() {
    std::mt19937_64 rng(config_.seed);
    std::normal_distribution<double> normal(0.0, config_.init_std);
    const std::size_t V = tokenizer_.vocab_size();
    const auto d = static_cast<std::size_t>(config_.d_model);
    const auto f = static_cast<std::size_t>(config_.d_ff);
    const auto C = static_cast<std::size_t>(config_.context);
    const double resid_scale = 1.0 / std::sqrt(2.0 * config_.n_layers);
    auto fill = [&](std::size_t o, std::size_t n, double scale) {
        for (std::size_t i = 0; i < n; ++i) params_[o + i] = normal(rng) * scale;
    };
    auto ones = [&](std::size_t o, std::size_t n) { std::fill_n(params_.begin() + static_cast<long>(o), n, 1.0); };
    fill(off_.tok_emb, V * d, 1.0);
    if (config_.positions == PositionMode::learned) fill(off_.pos_emb, C * d, 1.0);
    for (const auto& lo : off_.layers) {
        ones(lo.ln1_g, d);
        fill(lo.w_qkv, d * 3 * d, 1.0);
        fill(lo.w_o, d * d, resid_scale);
        ones(lo.ln2_g, d);
        fill(lo.w_fc1, d * f, 1.0);
        fill(lo.w_fc2, f * d, resid_scale);
    }
    ones(off_.lnf_g, d);
    if (config_.init == InitMode::random) fill(off_.w_out, d * V, 1.0);
}

void TinyLm::require_trainable(const char* what) const {
    if (frozen_) throw UsageError(std::string(what) + " on a frozen model handle");
}

std::span<double> TinyLm::mutable_parameters() {
    require_trainable("mutable_parameters");
    return params_;
}

std::string TinyLm::checkpoint_id() const {
    std::string blob(reinterpret_cast<const char*>(params_.data()), params_.size() * sizeof(double));
    blob += tokenizer_.to_json().dump();
    return "tiny-" + text::sha256_hex(blob).substr(0, 16);
}

TokenSequence TinyLm::with_bos(const TokenSequence& prompt, const TokenSequence& target) const {
    TokenSequence input;
    input.reserve(1 + prompt.size() + target.size());
    input.push_back(tokenizer_.eot());
    input.insert(input.end(), prompt.begin(), prompt.end());
    if (!target.empty()) input.insert(input.end(), target.begin(), target.end() - 1);
    if (input.size() > static_cast<std::size_t>(config_.context)) {
        throw LengthError("sequence of " + std::to_string(input.size()) + " positions exceeds the context limit of " +
                          std::to_string(config_.context) + " tokens");
    }
    return input;
}

void TinyLm::forward(const TokenSequence& input, ForwardCache& c) const {
    const std::size_t T = input.size();
    const auto d = static_cast<std::size_t>(config_.d_model);
    const auto f = static_cast<std::size_t>(config_.d_ff);
    const auto H = static_cast<std::size_t>(config_.n_heads);
    const std::size_t dh = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto slopes = head_slopes(config_);
    const bool learned_positions = config_.positions == PositionMode::learned;
    const double* P = params_.data();

    c.T = T;
    c.layers.resize(off_.layers.size());
    std::vector<double> x(T * d);
    for (std::size_t t = 0; t < T; ++t) {
        const double* te = P + off_.tok_emb + static_cast<std::size_t>(input[t]) * d;
        for (std::size_t i = 0; i < d; ++i) x[t * d + i] = te[i];
        if (learned_positions) {
            const double* pe = P + off_.pos_emb + t * d;
            for (std::size_t i = 0; i < d; ++i) x[t * d + i] += pe[i];
        }
    }

    for (std::size_t l = 0; l < off_.layers.size(); ++l) {
        const auto& lo = off_.layers[l];
        auto& L = c.layers[l];
        L.x_in = x;
        L.h1.assign(T * d, 0.0);
        L.mu1.assign(T, 0.0);
        L.rs1.assign(T, 0.0);
        layernorm(x.data(), T, d, P + lo.ln1_g, P + lo.ln1_b, L.h1.data(), L.mu1.data(), L.rs1.data());
        L.qkv.assign(T * 3 * d, 0.0);
        matmul(L.h1.data(), T, d, P + lo.w_qkv, P + lo.b_qkv, 3 * d, L.qkv.data());

        L.att.assign(H * T * T, 0.0);
        L.o.assign(T * d, 0.0);
        std::vector<double> sc(T);
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t t = 0; t < T; ++t) {
                const double* q = L.qkv.data() + t * 3 * d + h * dh;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t s = 0; s <= t; ++s) {
                    const double* k = L.qkv.data() + s * 3 * d + d + h * dh;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < dh; ++i) dot += q[i] * k[i];
                    sc[s] = dot * scale - slopes[h] * static_cast<double>(t - s);
                    mx = std::max(mx, sc[s]);
                }
                double sum = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    sc[s] = std::exp(sc[s] - mx);
                    sum += sc[s];
                }
                double* arow = L.att.data() + (h * T + t) * T;
                double* orow = L.o.data() + t * d + h * dh;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double p = sc[s] / sum;
                    arow[s] = p;
                    const double* v = L.qkv.data() + s * 3 * d + 2 * d + h * dh;
                    for (std::size_t i = 0; i < dh; ++i) orow[i] += p * v[i];
                }
            }
        }

        std::vector<double> proj(T * d);
        matmul(L.o.data(), T, d, P + lo.w_o, P + lo.b_o, d, proj.data());
        for (std::size_t i = 0; i < T * d; ++i) x[i] += proj[i];
        L.x_mid = x;

        L.h2.assign(T * d, 0.0);
        L.mu2.assign(T, 0.0);
        L.rs2.assign(T, 0.0);
        layernorm(x.data(), T, d, P + lo.ln2_g, P + lo.ln2_b, L.h2.data(), L.mu2.data(), L.rs2.data());
        L.u.assign(T * f, 0.0);
        matmul(L.h2.data(), T, d, P + lo.w_fc1, P + lo.b_fc1, f, L.u.data());
        L.a.resize(T * f);
        for (std::size_t i = 0; i < T * f; ++i) L.a[i] = gelu(L.u[i]);
        std::vector<double> m(T * d);
        matmul(L.a.data(), T, f, P + lo.w_fc2, P + lo.b_fc2, d, m.data());
        for (std::size_t i = 0; i < T * d; ++i) x[i] += m[i];
    }

    c.x_final = x;
    c.hf.assign(T * d, 0.0);
    c.muf.assign(T, 0.0);
    c.rsf.assign(T, 0.0);
    layernorm(x.data(), T, d, P + off_.lnf_g, P + off_.lnf_b, c.hf.data(), c.muf.data(), c.rsf.data());
}

void TinyLm::output_logprobs(const ForwardCache& c, std::span<const std::size_t> positions,
                                            std::vector<double>& rows) const {
    const std::size_t V = tokenizer_.vocab_size();
    const auto d = static_cast<std::size_t>(config_.d_model);
    rows.assign(positions.size() * V, 0.0);
    for (std::size_t i = 0; i < positions.size(); ++i) {
        matmul(c.hf.data() + positions[i] * d, 1, d, params_.data() + off_.w_out, params_.data() + off_.b_out, V,
               rows.data() + i * V);
        log_softmax(rows.data() + i * V, V);
    }
}

void TinyLm::backward(const TokenSequence& input, const ForwardCache& c, std::span<const std::size_t> positions,
                      const std::vector<double>& dlogits) {
    const std::size_t T = c.T;
    const std::size_t V = tokenizer_.vocab_size();
    const auto d = static_cast<std::size_t>(config_.d_model);
    const auto f = static_cast<std::size_t>(config_.d_ff);
    const auto H = static_cast<std::size_t>(config_.n_heads);
    const std::size_t dh = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const double* P = params_.data();
    double* G = grads_.data();

    std::vector<double> dhf(T * d, 0.0);
    for (std::size_t i = 0; i < positions.size(); ++i) {
        const std::size_t pos = positions[i];
        matmul_backward(c.hf.data() + pos * d, dlogits.data() + i * V, P + off_.w_out, 1, d, V, dhf.data() + pos * d,
                        G + off_.w_out, G + off_.b_out);
    }
    std::vector<double> dx(T * d, 0.0);
    layernorm_backward(c.x_final.data(), dhf.data(), T, d, P + off_.lnf_g, c.muf.data(), c.rsf.data(), dx.data(),
                       G + off_.lnf_g, G + off_.lnf_b);

    for (std::size_t l = off_.layers.size(); l-- > 0;) {
        const auto& lo = off_.layers[l];
        const auto& L = c.layers[l];

        // x_out = x_mid + fc2(gelu(fc1(ln2(x_mid))))
        std::vector<double> da(T * f, 0.0);
        matmul_backward(L.a.data(), dx.data(), P + lo.w_fc2, T, f, d, da.data(), G + lo.w_fc2, G + lo.b_fc2);
        for (std::size_t i = 0; i < T * f; ++i) da[i] *= gelu_grad(L.u[i]);
        std::vector<double> dh2(T * d, 0.0);
        matmul_backward(L.h2.data(), da.data(), P + lo.w_fc1, T, d, f, dh2.data(), G + lo.w_fc1, G + lo.b_fc1);
        std::vector<double> dx_mid = dx;
        layernorm_backward(L.x_mid.data(), dh2.data(), T, d, P + lo.ln2_g, L.mu2.data(), L.rs2.data(), dx_mid.data(),
                           G + lo.ln2_g, G + lo.ln2_b);

        // x_mid = x_in + proj(attn(qkv(ln1(x_in))))
        std::vector<double> dout(T * d, 0.0);
        matmul_backward(L.o.data(), dx_mid.data(), P + lo.w_o, T, d, d, dout.data(), G + lo.w_o, G + lo.b_o);
        std::vector<double> dqkv(T * 3 * d, 0.0);
        std::vector<double> datt(T);
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t t = 0; t < T; ++t) {
                const double* arow = L.att.data() + (h * T + t) * T;
                const double* dorow = dout.data() + t * d + h * dh;
                double weighted = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double* v = L.qkv.data() + s * 3 * d + 2 * d + h * dh;
                    double* dv = dqkv.data() + s * 3 * d + 2 * d + h * dh;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < dh; ++i) {
                        dot += dorow[i] * v[i];
                        dv[i] += arow[s] * dorow[i];
                    }
                    datt[s] = dot;
                    weighted += arow[s] * dot;
                }
                const double* q = L.qkv.data() + t * 3 * d + h * dh;
                double* dq = dqkv.data() + t * 3 * d + h * dh;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double ds = arow[s] * (datt[s] - weighted) * scale;
                    const double* k = L.qkv.data() + s * 3 * d + d + h * dh;
                    double* dk = dqkv.data() + s * 3 * d + d + h * dh;
                    for (std::size_t i = 0; i < dh; ++i) {
                        dq[i] += ds * k[i];
                        dk[i] += ds * q[i];
                    }
                }
            }
        }
        std::vector<double> dh1(T * d, 0.0);
        matmul_backward(L.h1.data(), dqkv.data(), P + lo.w_qkv, T, d, 3 * d, dh1.data(), G + lo.w_qkv, G + lo.b_qkv);
        dx = dx_mid;
        layernorm_backward(L.x_in.data(), dh1.data(), T, d, P + lo.ln1_g, L.mu1.data(), L.rs1.data(), dx.data(),
                           G + lo.ln1_g, G + lo.ln1_b);
    }

    for (std::size_t t = 0; t < T; ++t) {
        double* te = G + off_.tok_emb + static_cast<std::size_t>(input[t]) * d;
        for (std::size_t i = 0; i < d; ++i) te[i] += dx[t * d + i];
        if (config_.positions == PositionMode::learned) {
            double* pe = G + off_.pos_emb + t * d;
            for (std::size_t i = 0; i < d; ++i) pe[i] += dx[t * d + i];
        }
    }
}

TokenSequence TinyLm::encode_target(std::string_view target, bool terminate) const {
    TokenSequence ids = tokenizer_.encode(target);
    if (terminate) ids.push_back(tokenizer_.eot());
    return ids;
}

ScoredContinuation TinyLm::score_tokens(const TokenSequence& prompt, const TokenSequence& target) const {
    ScoredContinuation out;
    if (target.empty()) return out;
    const TokenSequence input = with_bos(prompt, target);
    ForwardCache cache;
    forward(input, cache);
    std::vector<std::size_t> positions(target.size());
    for (std::size_t j = 0; j < target.size(); ++j) positions[j] = prompt.size() + j;
    std::vector<double> rows;
    output_logprobs(cache, positions, rows);
    const std::size_t V = tokenizer_.vocab_size();
    out.logprobs.resize(target.size());
    for (std::size_t j = 0; j < target.size(); ++j) {
        out.logprobs[j] = rows[j * V + static_cast<std::size_t>(target[j])];
        out.total += out.logprobs[j];
    }
    return out;
}

ScoredContinuation TinyLm::accumulate_gradient_tokens(const TokenSequence& prompt, const TokenSequence& target,
                                                      double weight) {
    require_trainable("accumulate_gradient");
    ScoredContinuation out;
    if (target.empty()) return out;
    const TokenSequence input = with_bos(prompt, target);
    ForwardCache cache;
    forward(input, cache);
    std::vector<std::size_t> positions(target.size());
    for (std::size_t j = 0; j < target.size(); ++j) positions[j] = prompt.size() + j;
    std::vector<double> rows;
    output_logprobs(cache, positions, rows);
    const std::size_t V = tokenizer_.vocab_size();
    out.logprobs.resize(target.size());
    // d(weight * log p[y]) / d logits = weight * (onehot(y) - p)
    std::vector<double> dlogits(rows.size());
    for (std::size_t j = 0; j < target.size(); ++j) {
        const auto y = static_cast<std::size_t>(target[j]);
        out.logprobs[j] = rows[j * V + y];
        out.total += out.logprobs[j];
        for (std::size_t v = 0; v < V; ++v) dlogits[j * V + v] = -weight * std::exp(rows[j * V + v]);
        dlogits[j * V + y] += weight;
    }
    backward(input, cache, positions, dlogits);
    return out;
}

ScoredContinuation TinyLm::score(std::string_view prompt, std::string_view target, bool terminate) const {
    return score_tokens(tokenizer_.encode(prompt), encode_target(target, terminate));
}

ScoredContinuation TinyLm::accumulate_gradient(std::string_view prompt, std::string_view target, double weight,
                                               bool terminate) {
    return accumulate_gradient_tokens(tokenizer_.encode(prompt), encode_target(target, terminate), weight);
}

bool TinyLm::fits(std::string_view prompt, std::string_view target, bool terminate) const {
    // BOS + prompt + target minus the last target token.
    const std::size_t positions = tokenizer_.encode(prompt).size() + target_length(target, terminate);
    return positions <= static_cast<std::size_t>(config_.context);
}

std::size_t TinyLm::target_length(std::string_view target, bool terminate) const {
    return tokenizer_.encode(target).size() + (terminate ? 1 : 0);
}

std::vector<double> TinyLm::next_token_logprobs(const TokenSequence& prefix) const {
    TokenSequence input;
    input.push_back(tokenizer_.eot());
    input.insert(input.end(), prefix.begin(), prefix.end());
    if (input.size() > static_cast<std::size_t>(config_.context)) {
        throw LengthError("sequence of " + std::to_string(input.size()) + " positions exceeds the context limit of " +
                          std::to_string(config_.context) + " tokens");
    }
    ForwardCache cache;
    forward(input, cache);
    const std::size_t last = input.size() - 1;
    std::vector<double> rows;
    output_logprobs(cache, std::span<const std::size_t>(&last, 1), rows);
    return rows;
}

TokenSequence TinyLm::generate_tokens(const TokenSequence& prompt, int max_new, bool stop_at_eot) const {
    if (max_new < 1) throw UsageError("generate: max_new must be at least 1");
    const std::size_t C = static_cast<std::size_t>(config_.context);
    if (static_cast<std::size_t>(max_new) >= C) {
        throw LengthError("generate: max_new " + std::to_string(max_new) + " leaves no room in the context limit of " +
                          std::to_string(C) + " tokens");
    }
    TokenSequence seq;
    seq.push_back(tokenizer_.eot());
    seq.insert(seq.end(), prompt.begin(), prompt.end());
    // Positions fed: |seq| + max_new - 1 <= C.
    const std::size_t keep = C - static_cast<std::size_t>(max_new) + 1;
    if (seq.size() > keep) {
        seq.erase(seq.begin(), seq.end() - static_cast<long>(keep));
        ++truncations_;
    }

    const std::size_t V = tokenizer_.vocab_size();
    const auto d = static_cast<std::size_t>(config_.d_model);
    const auto f = static_cast<std::size_t>(config_.d_ff);
    const auto H = static_cast<std::size_t>(config_.n_heads);
    const std::size_t dh = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto slopes = head_slopes(config_);
    const bool learned_positions = config_.positions == PositionMode::learned;
    const double* P = params_.data();
    const std::size_t NL = off_.layers.size();

    std::vector<std::vector<double>> K(NL, std::vector<double>(C * d));
    std::vector<std::vector<double>> Vc(NL, std::vector<double>(C * d));
    std::vector<double> x(d), h(d), qkv(3 * d), o(d), tmp(d), u(f), a(f), logits(V), sc(C);
    double mu = 0.0, rs = 0.0;

    auto step = [&](TokenId tok, std::size_t pos, bool want_logits) {
        const double* te = P + off_.tok_emb + static_cast<std::size_t>(tok) * d;
        for (std::size_t i = 0; i < d; ++i) x[i] = te[i];
        if (learned_positions) {
            const double* pe = P + off_.pos_emb + pos * d;
            for (std::size_t i = 0; i < d; ++i) x[i] += pe[i];
        }
        for (std::size_t l = 0; l < NL; ++l) {
            const auto& lo = off_.layers[l];
            layernorm(x.data(), 1, d, P + lo.ln1_g, P + lo.ln1_b, h.data(), &mu, &rs);
            matmul(h.data(), 1, d, P + lo.w_qkv, P + lo.b_qkv, 3 * d, qkv.data());
            std::copy(qkv.begin() + static_cast<long>(d), qkv.begin() + static_cast<long>(2 * d),
                      K[l].begin() + static_cast<long>(pos * d));
            std::copy(qkv.begin() + static_cast<long>(2 * d), qkv.end(), Vc[l].begin() + static_cast<long>(pos * d));
            std::fill(o.begin(), o.end(), 0.0);
            for (std::size_t hh = 0; hh < H; ++hh) {
                const double* q = qkv.data() + hh * dh;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t s = 0; s <= pos; ++s) {
                    const double* k = K[l].data() + s * d + hh * dh;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < dh; ++i) dot += q[i] * k[i];
                    sc[s] = dot * scale - slopes[hh] * static_cast<double>(pos - s);
                    mx = std::max(mx, sc[s]);
                }
                double sum = 0.0;
                for (std::size_t s = 0; s <= pos; ++s) {
                    sc[s] = std::exp(sc[s] - mx);
                    sum += sc[s];
                }
                for (std::size_t s = 0; s <= pos; ++s) {
                    const double p = sc[s] / sum;
                    const double* v = Vc[l].data() + s * d + hh * dh;
                    for (std::size_t i = 0; i < dh; ++i) o[hh * dh + i] += p * v[i];
                }
            }
            matmul(o.data(), 1, d, P + lo.w_o, P + lo.b_o, d, tmp.data());
            for (std::size_t i = 0; i < d; ++i) x[i] += tmp[i];
            layernorm(x.data(), 1, d, P + lo.ln2_g, P + lo.ln2_b, h.data(), &mu, &rs);
            matmul(h.data(), 1, d, P + lo.w_fc1, P + lo.b_fc1, f, u.data());
            for (std::size_t i = 0; i < f; ++i) a[i] = gelu(u[i]);
            matmul(a.data(), 1, f, P + lo.w_fc2, P + lo.b_fc2, d, tmp.data());
            for (std::size_t i = 0; i < d; ++i) x[i] += tmp[i];
        }
        if (want_logits) {
            layernorm(x.data(), 1, d, P + off_.lnf_g, P + off_.lnf_b, h.data(), &mu, &rs);
            matmul(h.data(), 1, d, P + off_.w_out, P + off_.b_out, V, logits.data());
        }
    };

    for (std::size_t i = 0; i < seq.size(); ++i) step(seq[i], i, i + 1 == seq.size());
    std::size_t pos = seq.size();
    TokenSequence out;
    while (true) {
        TokenId best = 0;
        for (std::size_t v = 1; v < V; ++v) {
            if (logits[v] > logits[static_cast<std::size_t>(best)]) best = static_cast<TokenId>(v);
        }
        out.push_back(best);
        if ((stop_at_eot && best == tokenizer_.eot()) || out.size() == static_cast<std::size_t>(max_new)) break;
        step(best, pos++, true);
    }
    return out;
}

std::string TinyLm::generate(std::string_view prompt, int max_new) const {
    return text::sanitize_utf8(tokenizer_.decode(generate_tokens(tokenizer_.encode(prompt), max_new, true)));
}

std::unique_ptr<Backend> TinyLm::clone_frozen() const {
    auto copy = std::make_unique<TinyLm>(*this);
    copy->frozen_ = true;
    copy->grads_.clear();
    copy->grads_.shrink_to_fit();
    copy->adam_m_.clear();
    copy->adam_v_.clear();
    return copy;
}

void TinyLm::zero_gradients() {
    if (!frozen_) std::fill(grads_.begin(), grads_.end(), 0.0);
}

StepStats TinyLm::apply_gradients(double lr) {
    require_trainable("apply_gradients");
    double sq = 0.0;
    for (double g : grads_) sq += g * g;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw TrainingAborted("non-finite gradient norm at step " + std::to_string(step_ + 1));
    double clip = 1.0;
    const auto& oc = config_.optimizer;
    if (oc.max_grad_norm > 0.0 && norm > oc.max_grad_norm) clip = oc.max_grad_norm / norm;

    ++step_;
    if (oc.kind == OptimizerKind::sgd) {
        if (lr != 0.0) {
            for (std::size_t i = 0; i < params_.size(); ++i) params_[i] -= lr * clip * grads_[i];
        }
    } else {
        if (adam_m_.size() != params_.size()) {
            adam_m_.assign(params_.size(), 0.0);
            adam_v_.assign(params_.size(), 0.0);
        }
        const double bc1 = 1.0 - std::pow(oc.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(oc.beta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const double g = grads_[i] * clip;
            adam_m_[i] = oc.beta1 * adam_m_[i] + (1.0 - oc.beta1) * g;
            adam_v_[i] = oc.beta2 * adam_v_[i] + (1.0 - oc.beta2) * g * g;
            if (lr != 0.0) {
                params_[i] -= lr * (adam_m_[i] / bc1) / (std::sqrt(adam_v_[i] / bc2) + oc.eps);
            }
        }
    }
    std::fill(grads_.begin(), grads_.end(), 0.0);
    return StepStats{norm, step_};
}

void TinyLm::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json meta{{"format", "pal-tiny-lm/1"},
                        {"config", config_.to_json()},
                        {"tokenizer", tokenizer_.to_json()},
                        {"step", step_},
                        {"parameter_count", params_.size()},
                        {"checkpoint_id", checkpoint_id()}};
    std::ofstream m(dir / "model.json", std::ios::trunc);
    if (!m) throw PalError("cannot write " + (dir / "model.json").string());
    m << meta.dump(2) << '\n';
    std::ofstream p(dir / "params.bin", std::ios::binary | std::ios::trunc);
    p.write(reinterpret_cast<const char*>(params_.data()), static_cast<std::streamsize>(params_.size() * sizeof(double)));
    if (!p) throw PalError("cannot write " + (dir / "params.bin").string());
}

std::unique_ptr<TinyLm> TinyLm::load(const std::filesystem::path& dir) {
    std::ifstream m(dir / "model.json");
    if (!m) throw DependencyError("no model found at " + dir.string());
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(m);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError((dir / "model.json").string() + ": " + e.what());
    }
    if (meta.value("format", "") != "pal-tiny-lm/1") throw ParseError("unsupported model format in " + dir.string());
    auto model = std::make_unique<TinyLm>(Tokenizer::from_json(meta.at("tokenizer")),
                                          TinyLmConfig::from_json(meta.at("config")));
    std::ifstream p(dir / "params.bin", std::ios::binary);
    p.read(reinterpret_cast<char*>(model->params_.data()),
           static_cast<std::streamsize>(model->params_.size() * sizeof(double)));
    if (!p || p.gcount() != static_cast<std::streamsize>(model->params_.size() * sizeof(double))) {
        throw ParseError("truncated parameter blob in " + dir.string());
    }
    model->step_ = meta.value("step", std::size_t{0});
    return model;
}

}  // namespace pal::lm
