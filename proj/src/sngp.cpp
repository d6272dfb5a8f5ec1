#include "truecam/sngp.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "truecam/numerics.hpp"

namespace truecam {

namespace {

void he_init(Matrix& w, Rng& rng) {
    const double scale = std::sqrt(2.0 / static_cast<double>(w.cols));
    for (auto& v : w.data) v = scale * rng.normal();
}

std::vector<double> softmax(std::span<const double> z) {
    const double top = *std::max_element(z.begin(), z.end());
    std::vector<double> p(z.size());
    double total = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) {
        p[k] = std::exp(z[k] - top);
        total += p[k];
    }
    for (auto& v : p) v /= total;
    return p;
}

double log_sum_exp(std::span<const double> z) {
    const double top = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (double v : z) total += std::exp(v - top);
    return top + std::log(total);
}

constexpr double kRffSign = -1.0;  // phi = s * cos(-W h + b)

// Everything the backward pass needs from one sample's forward pass.
struct ForwardCache {
    std::vector<std::vector<double>> acts;  // acts[0] = x, acts[l+1] after ReLU
    std::vector<std::vector<double>> pre;   // per-layer preactivations
    std::vector<double> u;                  // -W_L h + b_L
    std::vector<double> phi;
    std::vector<double> logits;
    std::vector<double> probs;
};

ForwardCache forward_sample(const SnMlp& mlp, const RffProjection& proj,
                            const Matrix& beta, std::span<const double> x) {
    ForwardCache c;
    c.acts.emplace_back(x.begin(), x.end());
    for (const auto& layer : mlp.layers) {
        auto pre = linalg::matvec(layer.w, c.acts.back());
        for (std::size_t i = 0; i < pre.size(); ++i) pre[i] += layer.b[i];
        std::vector<double> act(pre.size());
        for (std::size_t i = 0; i < pre.size(); ++i)
            act[i] = pre[i] > 0.0 ? pre[i] : 0.0;
        c.pre.push_back(std::move(pre));
        c.acts.push_back(std::move(act));
    }

    c.u = linalg::matvec(proj.w, c.acts.back());
    const double s = std::sqrt(2.0 / static_cast<double>(proj.w.rows));
    c.phi.resize(c.u.size());
    for (std::size_t i = 0; i < c.u.size(); ++i) {
        c.u[i] = kRffSign * c.u[i] + proj.b[i];
        c.phi[i] = s * std::cos(c.u[i]);
    }

    c.logits = linalg::matvec_transposed(beta, c.phi);
    c.probs = softmax(c.logits);
    return c;
}

// Gradient accumulators shaped like the trainable parameters.
struct Grads {
    std::vector<Matrix> w;               // per hidden layer
    std::vector<std::vector<double>> b;
    Matrix beta;

    Grads(const SnMlp& mlp, const Matrix& beta_shape) {
        for (const auto& layer : mlp.layers) {
            w.emplace_back(layer.w.rows, layer.w.cols, 0.0);
            b.emplace_back(layer.b.size(), 0.0);
        }
        beta = Matrix(beta_shape.rows, beta_shape.cols, 0.0);
    }

    void scale(double f) {
        for (auto& m : w)
            for (auto& v : m.data) v *= f;
        for (auto& vec : b)
            for (auto& v : vec) v *= f;
        for (auto& v : beta.data) v *= f;
    }
};

void backward_sample(const SnMlp& mlp, const RffProjection& proj,
                     const Matrix& beta, const ForwardCache& c, int label,
                     Grads& g) {
    const std::size_t k = beta.cols;
    std::vector<double> dlogits = c.probs;
    dlogits[static_cast<std::size_t>(label)] -= 1.0;

    // beta and phi
    std::vector<double> dphi(c.phi.size(), 0.0);
    for (std::size_t i = 0; i < c.phi.size(); ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            g.beta.at(i, j) += c.phi[i] * dlogits[j];
            dphi[i] += beta.at(i, j) * dlogits[j];
        }
    }

    // through the cosine and the fixed projection
    const double s = std::sqrt(2.0 / static_cast<double>(proj.w.rows));
    std::vector<double> du(c.u.size());
    for (std::size_t i = 0; i < c.u.size(); ++i)
        du[i] = -s * std::sin(c.u[i]) * dphi[i];
    std::vector<double> dact = linalg::matvec_transposed(proj.w, du);
    for (auto& v : dact) v *= kRffSign;

    // through the ReLU stack
    for (std::size_t l = mlp.layers.size(); l-- > 0;) {
        std::vector<double> dpre(dact.size());
        for (std::size_t i = 0; i < dact.size(); ++i)
            dpre[i] = c.pre[l][i] > 0.0 ? dact[i] : 0.0;
        const auto& below = c.acts[l];
        auto& gw = g.w[l];
        for (std::size_t i = 0; i < dpre.size(); ++i) {
            g.b[l][i] += dpre[i];
            for (std::size_t j = 0; j < below.size(); ++j)
                gw.at(i, j) += dpre[i] * below[j];
        }
        dact = linalg::matvec_transposed(mlp.layers[l].w, dpre);
    }
}

// Adam moments for one tensor.
struct AdamState {
    std::vector<double> m, v;
    explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

void adam_update(std::vector<double>& param, const std::vector<double>& grad,
                 AdamState& st, double lr, double b1, double b2, double t) {
    constexpr double eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, t);
    const double c2 = 1.0 - std::pow(b2, t);
    for (std::size_t i = 0; i < param.size(); ++i) {
        st.m[i] = b1 * st.m[i] + (1.0 - b1) * grad[i];
        st.v[i] = b2 * st.v[i] + (1.0 - b2) * grad[i] * grad[i];
        const double mhat = st.m[i] / c1;
        const double vhat = st.v[i] / c2;
        param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xff));
    out.push_back(static_cast<unsigned char>(v >> 8));
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::vector<unsigned char>& out, double d) {
    const auto bits = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i)
        out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xff));
}

struct ByteReader {
    const std::vector<unsigned char>& buf;
    std::size_t pos = 0;
    const char* op;

    void need(std::size_t n) const {
        if (pos + n > buf.size())
            throw std::runtime_error(std::string(op) + ": truncated checkpoint");
    }
    std::uint16_t u16() {
        need(2);
        const std::uint16_t v =
            static_cast<std::uint16_t>(buf[pos] | (buf[pos + 1] << 8));
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    double f64() {
        need(8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i)
            bits |= static_cast<std::uint64_t>(buf[pos + i]) << (8 * i);
        pos += 8;
        return std::bit_cast<double>(bits);
    }
};

void check_mlp_config(const SnMlpConfig& cfg, const char* op) {
    if (cfg.layer_dims.size() < 2)
        throw std::invalid_argument(std::string(op) +
                                    ": layer_dims needs input dim plus at least one hidden layer");
    for (auto d : cfg.layer_dims)
        if (d == 0) throw std::invalid_argument(std::string(op) + ": zero layer dim");
    if (!(cfg.sn_cap > 0.0))
        throw std::invalid_argument(std::string(op) + ": spectral-norm cap must be positive");
    if (cfg.power_iters == 0)
        throw std::invalid_argument(std::string(op) + ": power_iters must be >= 1");
}

}  // namespace

std::vector<double> SnMlp::forward(std::span<const double> x) const {
    if (layers.empty()) throw std::invalid_argument("forward: mlp has no layers");
    if (x.size() != layers.front().w.cols)
        throw std::invalid_argument("forward: input dim mismatch");
    std::vector<double> act(x.begin(), x.end());
    for (const auto& layer : layers) {
        auto next = linalg::matvec(layer.w, act);
        for (std::size_t i = 0; i < next.size(); ++i) {
            next[i] += layer.b[i];
            if (next[i] < 0.0) next[i] = 0.0;
        }
        act = std::move(next);
    }
    return act;
}

Matrix apply_spectral_normalization(const Matrix& w, double c,
                                    std::size_t power_iters, Rng& rng) {
    if (!(c > 0.0))
        throw std::invalid_argument("apply_spectral_normalization: cap must be positive");
    const double lambda = spectral_norm(w, power_iters, rng);
    if (lambda <= c) return w;
    Matrix out = w;
    const double f = c / lambda;
    for (auto& v : out.data) v *= f;
    return out;
}

RffProjection make_rff_projection(std::size_t rff_dim, std::size_t input_dim,
                                  Rng& rng) {
    if (rff_dim == 0 || input_dim == 0)
        throw std::invalid_argument("make_rff_projection: zero dimension");
    RffProjection proj;
    proj.w = Matrix(rff_dim, input_dim);
    for (auto& v : proj.w.data) v = rng.normal();
    proj.b.resize(rff_dim);
    for (auto& v : proj.b) v = rng.uniform(0.0, 2.0 * std::numbers::pi);
    return proj;
}

std::vector<double> rff_transform(std::span<const double> h,
                                  const RffProjection& proj) {
    if (h.size() != proj.w.cols)
        throw std::invalid_argument("rff_transform: input dim mismatch");
    auto u = linalg::matvec(proj.w, h);
    const double s = std::sqrt(2.0 / static_cast<double>(proj.w.rows));
    std::vector<double> phi(u.size());
    for (std::size_t i = 0; i < u.size(); ++i)
        phi[i] = s * std::cos(kRffSign * u[i] + proj.b[i]);
    return phi;
}

FitResult fit_head(const Matrix& x, const std::vector<int>& labels,
                   std::size_t num_classes, const SnMlpConfig& mlp_cfg,
                   std::size_t rff_dim, const TrainConfig& cfg) {
    check_mlp_config(mlp_cfg, "fit_head");
    if (x.rows == 0 || x.rows != labels.size())
        throw std::invalid_argument("fit_head: rows and labels must match and be nonempty");
    if (x.cols != mlp_cfg.layer_dims.front())
        throw std::invalid_argument("fit_head: input dim does not match layer_dims[0]");
    if (num_classes < 2)
        throw std::invalid_argument("fit_head: need at least two classes");
    if (x.rows < num_classes)
        throw std::invalid_argument("fit_head: fewer samples than classes");
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
            throw std::invalid_argument("fit_head: label out of range");
    if (rff_dim == 0) throw std::invalid_argument("fit_head: rff_dim must be >= 1");
    if (cfg.epochs == 0 || cfg.batch_size == 0)
        throw std::invalid_argument("fit_head: epochs and batch_size must be >= 1");
    if (!(cfg.lr > 0.0)) throw std::invalid_argument("fit_head: lr must be positive");
    if (!(cfg.lr_decay > 0.0) || cfg.lr_decay_every == 0)
        throw std::invalid_argument("fit_head: bad lr decay schedule");
    if (!(cfg.tau > 0.0)) throw std::invalid_argument("fit_head: tau must be positive");
    if (!x.all_finite()) throw std::invalid_argument("fit_head: non-finite input");

    Rng init_rng(mix_seed(cfg.seed, 1));
    Rng rff_rng(mix_seed(cfg.seed, 2));
    Rng shuffle_rng(mix_seed(cfg.seed, 3));
    Rng sn_rng(mix_seed(cfg.seed, 4));

    SngpHead head;
    head.mlp.cfg = mlp_cfg;
    for (std::size_t l = 0; l + 1 < mlp_cfg.layer_dims.size(); ++l) {
        DenseLayer layer;
        layer.w = Matrix(mlp_cfg.layer_dims[l + 1], mlp_cfg.layer_dims[l]);
        he_init(layer.w, init_rng);
        layer.b.assign(mlp_cfg.layer_dims[l + 1], 0.0);
        head.mlp.layers.push_back(std::move(layer));
    }
    head.rff = make_rff_projection(rff_dim, mlp_cfg.layer_dims.back(), rff_rng);
    head.posterior.beta = Matrix(rff_dim, num_classes, 0.0);
    head.posterior.tau = cfg.tau;
    head.posterior.num_classes = num_classes;

    // cap the freshly initialized weights before the first step
    for (auto& layer : head.mlp.layers)
        layer.w = apply_spectral_normalization(layer.w, mlp_cfg.sn_cap,
                                               mlp_cfg.power_iters, sn_rng);

    std::vector<AdamState> w_state, b_state;
    for (const auto& layer : head.mlp.layers) {
        w_state.emplace_back(layer.w.data.size());
        b_state.emplace_back(layer.b.size());
    }
    AdamState beta_state(head.posterior.beta.data.size());

    FitResult result;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = shuffle_rng.permutation(x.rows);
        double epoch_loss_sum = 0.0;

        for (std::size_t start = 0; start < x.rows; start += cfg.batch_size) {
            const std::size_t stop = std::min(start + cfg.batch_size, x.rows);
            const std::size_t n = stop - start;

            Grads grads(head.mlp, head.posterior.beta);
            double batch_loss = 0.0;
            for (std::size_t i = start; i < stop; ++i) {
                const std::size_t row = order[i];
                const auto cache = forward_sample(head.mlp, head.rff,
                                                  head.posterior.beta, x.row(row));
                batch_loss += log_sum_exp(cache.logits) -
                              cache.logits[static_cast<std::size_t>(labels[row])];
                backward_sample(head.mlp, head.rff, head.posterior.beta, cache,
                                labels[row], grads);
            }
            batch_loss /= static_cast<double>(n);
            if (!std::isfinite(batch_loss))
                throw std::runtime_error("fit_head: training diverged (non-finite loss)");
            epoch_loss_sum += batch_loss * static_cast<double>(n);
            grads.scale(1.0 / static_cast<double>(n));

            const double lr =
                cfg.lr * std::pow(cfg.lr_decay,
                                  static_cast<double>(step / cfg.lr_decay_every));
            const auto t = static_cast<double>(step + 1);
            for (std::size_t l = 0; l < head.mlp.layers.size(); ++l) {
                adam_update(head.mlp.layers[l].w.data, grads.w[l].data, w_state[l],
                            lr, cfg.adam_beta1, cfg.adam_beta2, t);
                adam_update(head.mlp.layers[l].b, grads.b[l], b_state[l], lr,
                            cfg.adam_beta1, cfg.adam_beta2, t);
            }
            adam_update(head.posterior.beta.data, grads.beta.data, beta_state, lr,
                        cfg.adam_beta1, cfg.adam_beta2, t);
            ++step;

            for (auto& layer : head.mlp.layers)
                layer.w = apply_spectral_normalization(
                    layer.w, mlp_cfg.sn_cap, mlp_cfg.power_iters, sn_rng);
        }
        result.epoch_losses.push_back(epoch_loss_sum / static_cast<double>(x.rows));
    }

    // one pass over the final features: precision = Phi^T Phi + tau I
    Matrix precision(rff_dim, rff_dim, 0.0);
    std::size_t correct = 0;
    for (std::size_t row = 0; row < x.rows; ++row) {
        const auto h = head.mlp.forward(x.row(row));
        const auto phi = rff_transform(h, head.rff);
        for (std::size_t i = 0; i < rff_dim; ++i) {
            const double pi_val = phi[i];
            if (pi_val == 0.0) continue;
            for (std::size_t j = i; j < rff_dim; ++j)
                precision.at(i, j) += pi_val * phi[j];
        }
        const auto logits = linalg::matvec_transposed(head.posterior.beta, phi);
        const auto top = static_cast<int>(
            std::max_element(logits.begin(), logits.end()) - logits.begin());
        if (top == labels[row]) ++correct;
    }
    for (std::size_t i = 0; i < rff_dim; ++i) {
        precision.at(i, i) += cfg.tau;
        for (std::size_t j = i + 1; j < rff_dim; ++j)
            precision.at(j, i) = precision.at(i, j);
    }
    head.posterior.precision = std::move(precision);
    head.posterior.chol = linalg::cholesky(head.posterior.precision);

    result.train_accuracy =
        static_cast<double>(correct) / static_cast<double>(x.rows);
    result.head = std::move(head);
    return result;
}

PredictiveOutput predict(std::span<const double> x, const SngpHead& head,
                         PredictiveIntegral integral, std::size_t mc_samples,
                         std::uint64_t mc_seed) {
    if (!head.trained())
        throw std::invalid_argument("predict: head is not trained");

    const auto h = head.mlp.forward(x);
    const auto phi = rff_transform(h, head.rff);

    PredictiveOutput out;
    out.mu = linalg::matvec_transposed(head.posterior.beta, phi);
    const double quad = linalg::quad_form_inverse(head.posterior.chol, phi);
    const double variance = std::max(0.0, head.posterior.tau * quad);
    out.uncertainty = std::sqrt(variance);
    out.sigma.assign(head.posterior.num_classes, out.uncertainty);

    if (integral == PredictiveIntegral::MeanField) {
        const double shrink =
            1.0 / std::sqrt(1.0 + (std::numbers::pi / 8.0) * variance);
        std::vector<double> scaled(out.mu.size());
        for (std::size_t k = 0; k < out.mu.size(); ++k)
            scaled[k] = out.mu[k] * shrink;
        out.probs = softmax(scaled);
    } else {
        if (mc_samples == 0)
            throw std::invalid_argument("predict: mc_samples must be >= 1");
        Rng rng(mc_seed);
        out.probs.assign(out.mu.size(), 0.0);
        std::vector<double> z(out.mu.size());
        for (std::size_t s = 0; s < mc_samples; ++s) {
            for (std::size_t k = 0; k < z.size(); ++k)
                z[k] = out.mu[k] + out.sigma[k] * rng.normal();
            const auto p = softmax(z);
            for (std::size_t k = 0; k < p.size(); ++k) out.probs[k] += p[k];
        }
        for (auto& p : out.probs) p /= static_cast<double>(mc_samples);
    }
    return out;
}

Matrix predict_probs(const Matrix& x, const SngpHead& head) {
    Matrix probs(x.rows, head.posterior.num_classes);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const auto out = predict(x.row(i), head);
        std::copy(out.probs.begin(), out.probs.end(), probs.row(i).begin());
    }
    return probs;
}

std::vector<double> predict_uncertainty(const Matrix& x, const SngpHead& head) {
    std::vector<double> u(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i)
        u[i] = predict(x.row(i), head).uncertainty;
    return u;
}

void save_checkpoint(const std::string& path, const SngpHead& head) {
    if (!head.trained())
        throw std::invalid_argument("save_checkpoint: head is not trained");

    std::vector<unsigned char> buf;
    buf.insert(buf.end(), {'S', 'N', 'G', 'P'});
    put_u16(buf, 1);

    const auto& dims = head.mlp.cfg.layer_dims;
    put_u32(buf, static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) put_u32(buf, static_cast<std::uint32_t>(d));
    put_f64(buf, head.mlp.cfg.sn_cap);
    put_u32(buf, static_cast<std::uint32_t>(head.mlp.cfg.power_iters));
    put_u32(buf, static_cast<std::uint32_t>(head.rff.w.rows));
    put_u32(buf, static_cast<std::uint32_t>(head.posterior.num_classes));
    put_f64(buf, head.posterior.tau);

    for (const auto& layer : head.mlp.layers) {
        for (double v : layer.w.data) put_f64(buf, v);
        for (double v : layer.b) put_f64(buf, v);
    }
    for (double v : head.rff.w.data) put_f64(buf, v);
    for (double v : head.rff.b) put_f64(buf, v);
    for (double v : head.posterior.beta.data) put_f64(buf, v);
    for (double v : head.posterior.precision.data) put_f64(buf, v);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

SngpHead load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::vector<unsigned char> buf{std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>()};

    ByteReader r{buf, 0, "load_checkpoint"};
    r.need(4);
    if (std::memcmp(buf.data(), "SNGP", 4) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    r.pos = 4;
    const auto version = r.u16();
    if (version != 1)
        throw std::runtime_error("load_checkpoint: unsupported version " +
                                 std::to_string(version));

    SngpHead head;
    const auto n_dims = r.u32();
    if (n_dims < 2) throw std::runtime_error("load_checkpoint: bad layer_dims");
    head.mlp.cfg.layer_dims.resize(n_dims);
    for (auto& d : head.mlp.cfg.layer_dims) d = r.u32();
    head.mlp.cfg.sn_cap = r.f64();
    head.mlp.cfg.power_iters = r.u32();
    const auto rff_dim = r.u32();
    const auto num_classes = r.u32();
    head.posterior.tau = r.f64();
    head.posterior.num_classes = num_classes;
    check_mlp_config(head.mlp.cfg, "load_checkpoint");
    if (rff_dim == 0 || num_classes == 0 || !(head.posterior.tau > 0.0))
        throw std::runtime_error("load_checkpoint: bad header fields");

    const auto& dims = head.mlp.cfg.layer_dims;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        DenseLayer layer;
        layer.w = Matrix(dims[l + 1], dims[l]);
        for (auto& v : layer.w.data) v = r.f64();
        layer.b.resize(dims[l + 1]);
        for (auto& v : layer.b) v = r.f64();
        head.mlp.layers.push_back(std::move(layer));
    }
    head.rff.w = Matrix(rff_dim, dims.back());
    for (auto& v : head.rff.w.data) v = r.f64();
    head.rff.b.resize(rff_dim);
    for (auto& v : head.rff.b) v = r.f64();
    head.posterior.beta = Matrix(rff_dim, num_classes);
    for (auto& v : head.posterior.beta.data) v = r.f64();
    head.posterior.precision = Matrix(rff_dim, rff_dim);
    for (auto& v : head.posterior.precision.data) v = r.f64();

    if (r.pos != buf.size())
        throw std::runtime_error("load_checkpoint: trailing bytes in " + path);

    head.posterior.chol = linalg::cholesky(head.posterior.precision);
    return head;
}

DropoutHead make_dropout_head(std::size_t input_dim, std::size_t hidden_dim,
                              std::size_t num_classes, double rate, Rng& rng) {
    if (input_dim == 0 || hidden_dim == 0 || num_classes < 2)
        throw std::invalid_argument("make_dropout_head: bad dimensions");
    if (rate < 0.0 || rate >= 1.0)
        throw std::invalid_argument("make_dropout_head: rate must be in [0,1)");
    DropoutHead head;
    head.w1 = Matrix(hidden_dim, input_dim);
    he_init(head.w1, rng);
    head.b1.assign(hidden_dim, 0.0);
    head.w2 = Matrix(hidden_dim, hidden_dim);
    he_init(head.w2, rng);
    head.b2.assign(hidden_dim, 0.0);
    head.w_out = Matrix(num_classes, hidden_dim);
    he_init(head.w_out, rng);
    head.b_out.assign(num_classes, 0.0);
    head.rate = rate;
    return head;
}

namespace {

// One dropout-masked dense+ReLU layer; one uniform draw per unit, always.
std::vector<double> dropout_layer(const Matrix& w, const std::vector<double>& b,
                                  std::span<const double> in, double rate,
                                  Rng& rng) {
    auto act = linalg::matvec(w, in);
    const double keep_scale = 1.0 / (1.0 - rate);
    for (std::size_t i = 0; i < act.size(); ++i) {
        act[i] += b[i];
        if (act[i] < 0.0) act[i] = 0.0;
        const bool keep = rng.uniform() >= rate;
        act[i] = keep ? act[i] * keep_scale : 0.0;
    }
    return act;
}

}  // namespace

std::pair<std::vector<double>, std::vector<double>> mc_dropout_predict(
    std::span<const double> x, const DropoutHead& head, std::size_t passes,
    Rng& rng) {
    if (passes < 2)
        throw std::invalid_argument("mc_dropout_predict: passes must be >= 2");
    if (x.size() != head.w1.cols)
        throw std::invalid_argument("mc_dropout_predict: input dim mismatch");

    const std::size_t k = head.w_out.rows;
    std::vector<double> mean(k, 0.0), sq(k, 0.0);
    for (std::size_t pass = 0; pass < passes; ++pass) {
        const auto a1 = dropout_layer(head.w1, head.b1, x, head.rate, rng);
        const auto a2 = dropout_layer(head.w2, head.b2, a1, head.rate, rng);
        auto logits = linalg::matvec(head.w_out, a2);
        for (std::size_t i = 0; i < k; ++i) logits[i] += head.b_out[i];
        const auto p = softmax(logits);
        for (std::size_t i = 0; i < k; ++i) {
            mean[i] += p[i];
            sq[i] += p[i] * p[i];
        }
    }
    const auto n = static_cast<double>(passes);
    std::vector<double> stddev(k);
    for (std::size_t i = 0; i < k; ++i) {
        mean[i] /= n;
        stddev[i] = std::sqrt(std::max(0.0, sq[i] / n - mean[i] * mean[i]));
    }
    return {std::move(mean), std::move(stddev)};
}

AbmilNet make_abmil(std::size_t input_dim, const AbmilConfig& cfg, Rng& rng) {
    if (input_dim == 0 || cfg.embed_dim == 0 || cfg.attn_dim == 0)
        throw std::invalid_argument("make_abmil: bad dimensions");
    AbmilNet net;
    net.cfg = cfg;
    net.w_embed = Matrix(cfg.embed_dim, input_dim);
    he_init(net.w_embed, rng);
    net.b_embed.assign(cfg.embed_dim, 0.0);
    net.v_attn = Matrix(cfg.attn_dim, cfg.embed_dim);
    const double v_scale = std::sqrt(1.0 / static_cast<double>(cfg.embed_dim));
    for (auto& v : net.v_attn.data) v = v_scale * rng.normal();
    net.w_attn.resize(cfg.attn_dim);
    const double w_scale = std::sqrt(1.0 / static_cast<double>(cfg.attn_dim));
    for (auto& v : net.w_attn) v = w_scale * rng.normal();
    return net;
}

AbmilPooled abmil_pool(const Matrix& tiles, const AbmilNet& net) {
    if (tiles.rows == 0)
        throw std::invalid_argument("abmil_pool: no tiles");
    if (tiles.cols != net.w_embed.cols)
        throw std::invalid_argument("abmil_pool: tile dim mismatch");

    std::vector<std::vector<double>> embedded;
    std::vector<double> scores(tiles.rows);
    for (std::size_t i = 0; i < tiles.rows; ++i) {
        auto e = linalg::matvec(net.w_embed, tiles.row(i));
        for (std::size_t j = 0; j < e.size(); ++j) {
            e[j] += net.b_embed[j];
            if (e[j] < 0.0) e[j] = 0.0;
        }
        auto gate = linalg::matvec(net.v_attn, e);
        for (auto& g : gate) g = std::tanh(g);
        scores[i] = linalg::dot(net.w_attn, gate);
        embedded.push_back(std::move(e));
    }

    AbmilPooled pooled;
    pooled.attention = softmax(scores);
    pooled.representation.assign(net.cfg.embed_dim, 0.0);
    for (std::size_t i = 0; i < tiles.rows; ++i)
        for (std::size_t j = 0; j < net.cfg.embed_dim; ++j)
            pooled.representation[j] += pooled.attention[i] * embedded[i][j];
    return pooled;
}

namespace detail {

double batch_cross_entropy(const SnMlp& mlp, const RffProjection& proj,
                           const Matrix& beta, const Matrix& x,
                           const std::vector<int>& labels) {
    double total = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) {
        const auto c = forward_sample(mlp, proj, beta, x.row(i));
        total += log_sum_exp(c.logits) -
                 c.logits[static_cast<std::size_t>(labels[i])];
    }
    return total / static_cast<double>(x.rows);
}

Matrix beta_gradient(const SnMlp& mlp, const RffProjection& proj,
                     const Matrix& beta, const Matrix& x,
                     const std::vector<int>& labels) {
    Grads grads(mlp, beta);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const auto c = forward_sample(mlp, proj, beta, x.row(i));
        backward_sample(mlp, proj, beta, c, labels[i], grads);
    }
    grads.scale(1.0 / static_cast<double>(x.rows));
    return grads.beta;
}

}  // namespace detail

}  // namespace truecam
