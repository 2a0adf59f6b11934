#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "adamw.hpp"
#include "data_pipeline.hpp"

namespace gobfeed {

using Features = std::array<double, 7>;  // T, MS, tube rotation, phase, dSP, dLP, dUP
inline constexpr std::size_t delta_offset = 4;

struct NetworkSpec {
    std::size_t input_dim = 7;
    std::vector<std::size_t> hidden = {128, 64};
    bool batch_norm_after_first_hidden = true;
    double dropout_rate = 0.1;  // after the first hidden activation
    std::size_t output_dim = 2;

    std::size_t parameter_count() const {
        std::size_t n = 0, in = input_dim;
        for (auto h : hidden) {
            n += in * h + h;
            in = h;
        }
        n += in * output_dim + output_dim;
        if (batch_norm_after_first_hidden && !hidden.empty()) n += 2 * hidden.front();
        return n;
    }
};

inline void validate_spec(const NetworkSpec& s) {
    if (s.input_dim == 0 || s.output_dim == 0) throw std::invalid_argument("network spec: zero dimension");
    for (auto h : s.hidden)
        if (h == 0) throw std::invalid_argument("network spec: empty hidden layer");
    if (!(s.dropout_rate >= 0.0 && s.dropout_rate < 1.0)) throw std::invalid_argument("network spec: dropout in [0, 1)");
}

namespace kernel {

// y[r,:] = b + sum_k x[r,k] * wt[k,:]      (wt is in x out)
inline void dense_forward(const double* __restrict x, std::size_t rows, std::size_t in, const double* __restrict wt,
                          const double* __restrict b, std::size_t out, double* __restrict y) {
    for (std::size_t r = 0; r < rows; ++r) {
        double* __restrict yr = y + r * out;
        const double* __restrict xr = x + r * in;
        for (std::size_t o = 0; o < out; ++o) yr[o] = b[o];
        for (std::size_t k = 0; k < in; ++k) {
            const double xk = xr[k];
            const double* __restrict wk = wt + k * out;
            for (std::size_t o = 0; o < out; ++o) yr[o] += xk * wk[o];
        }
    }
}

// dx[r,:] = sum_o dy[r,o] * w[o,:]      (w is out x in)
inline void dense_backward_input(const double* __restrict dy, std::size_t rows, std::size_t out,
                                 const double* __restrict w, std::size_t in, double* __restrict dx) {
    for (std::size_t r = 0; r < rows; ++r) {
        double* __restrict dxr = dx + r * in;
        for (std::size_t k = 0; k < in; ++k) dxr[k] = 0.0;
        for (std::size_t o = 0; o < out; ++o) {
            const double g = dy[r * out + o];
            if (g == 0.0) continue;
            const double* __restrict wo = w + o * in;
            for (std::size_t k = 0; k < in; ++k) dxr[k] += g * wo[k];
        }
    }
}

// dw[o,:] += sum_r dy[r,o] * x[r,:];  db[o] += sum_r dy[r,o]
inline void dense_backward_weights(const double* __restrict dy, const double* __restrict x, std::size_t rows,
                                   std::size_t out, std::size_t in, double* __restrict dw, double* __restrict db) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* __restrict xr = x + r * in;
        for (std::size_t o = 0; o < out; ++o) {
            const double g = dy[r * out + o];
            db[o] += g;
            if (g == 0.0) continue;
            double* __restrict wo = dw + o * in;
            for (std::size_t k = 0; k < in; ++k) wo[k] += g * xr[k];
        }
    }
}

}  // namespace kernel

// Fully connected network; all trainable values live in one flat vector.
class Mlp {
public:
    Mlp() = default;

    explicit Mlp(NetworkSpec spec) : m_spec(std::move(spec)) {
        validate_spec(m_spec);
        std::size_t off = 0, in = m_spec.input_dim;
        std::vector<std::size_t> dims = m_spec.hidden;
        dims.push_back(m_spec.output_dim);
        for (auto out : dims) {
            m_layers.push_back({in, out, off, off + in * out});
            off += in * out + out;
            in = out;
        }
        if (has_batch_norm()) {
            m_bn_offset = off;
            off += 2 * m_spec.hidden.front();
            m_running_mean.assign(m_spec.hidden.front(), 0.0);
            m_running_var.assign(m_spec.hidden.front(), 1.0);
        }
        m_params.assign(off, 0.0);
        if (has_batch_norm()) std::fill_n(m_params.begin() + static_cast<std::ptrdiff_t>(m_bn_offset), m_spec.hidden.front(), 1.0);
        refresh();
    }

    // Uniform in +-sqrt(6 / fan_in); biases zero; batch-norm scale 1, shift 0.
    static Mlp build(const NetworkSpec& spec, std::uint64_t seed) {
        Mlp net(spec);
        std::mt19937_64 rng(seed);
        for (const auto& l : net.m_layers) {
            const double a = std::sqrt(6.0 / static_cast<double>(l.in));
            std::uniform_real_distribution<double> u(-a, a);
            for (std::size_t i = 0; i < l.in * l.out; ++i) net.m_params[l.w + i] = u(rng);
        }
        net.refresh();
        return net;
    }

    const NetworkSpec& spec() const noexcept { return m_spec; }
    std::size_t parameter_count() const noexcept { return m_params.size(); }
    std::vector<double>& params() noexcept { return m_params; }
    const std::vector<double>& params() const noexcept { return m_params; }

    std::size_t layer_count() const noexcept { return m_layers.size(); }
    std::size_t in_dim(std::size_t l) const { return m_layers.at(l).in; }
    std::size_t out_dim(std::size_t l) const { return m_layers.at(l).out; }
    std::size_t weight_offset(std::size_t l) const { return m_layers.at(l).w; }
    std::size_t bias_offset(std::size_t l) const { return m_layers.at(l).b; }
    const double* weight(std::size_t l) const { return m_params.data() + m_layers.at(l).w; }
    const double* bias(std::size_t l) const { return m_params.data() + m_layers.at(l).b; }
    const double* weight_t(std::size_t l) const { return m_wt.at(l).data(); }

    bool has_batch_norm() const noexcept { return m_spec.batch_norm_after_first_hidden && !m_spec.hidden.empty(); }
    std::size_t bn_offset() const noexcept { return m_bn_offset; }
    std::size_t bn_dim() const noexcept { return has_batch_norm() ? m_spec.hidden.front() : 0; }
    const double* bn_gamma() const { return m_params.data() + m_bn_offset; }
    const double* bn_beta() const { return m_params.data() + m_bn_offset + bn_dim(); }
    std::vector<double>& running_mean() noexcept { return m_running_mean; }
    std::vector<double>& running_var() noexcept { return m_running_var; }
    const std::vector<double>& running_mean() const noexcept { return m_running_mean; }
    const std::vector<double>& running_var() const noexcept { return m_running_var; }

    static constexpr double bn_momentum = 0.9;
    static constexpr double bn_eps = 1e-5;

    // Call after any change to params().
    void refresh() {
        m_wt.resize(m_layers.size());
        for (std::size_t l = 0; l < m_layers.size(); ++l) {
            const auto& L = m_layers[l];
            m_wt[l].assign(L.in * L.out, 0.0);
            for (std::size_t o = 0; o < L.out; ++o)
                for (std::size_t k = 0; k < L.in; ++k) m_wt[l][k * L.out + o] = m_params[L.w + o * L.in + k];
        }
    }

    // Inference-mode batch-norm as an affine map.
    void bn_affine(std::vector<double>& scale, std::vector<double>& shift) const {
        const std::size_t d = bn_dim();
        scale.resize(d);
        shift.resize(d);
        for (std::size_t j = 0; j < d; ++j) {
            scale[j] = bn_gamma()[j] / std::sqrt(m_running_var[j] + bn_eps);
            shift[j] = bn_beta()[j] - m_running_mean[j] * scale[j];
        }
    }

    // Inference: dropout off, batch-norm on running statistics. x is rows x input_dim.
    void infer(const double* x, std::size_t rows, double* y) const { run(x, rows, y, nullptr); }

    // Reverse mode through inference mode: dx = (dy/dx)^T cot.
    void input_vjp(const double* x, std::size_t rows, const double* cot, double* dx) const {
        std::vector<std::vector<double>> pre;
        std::vector<double> y(rows * m_spec.output_dim);
        run(x, rows, y.data(), &pre);
        const std::size_t L = m_layers.size();
        std::vector<double> g(cot, cot + rows * m_spec.output_dim), next;
        std::vector<double> scale, shift;
        if (has_batch_norm()) bn_affine(scale, shift);
        for (std::size_t l = L; l-- > 0;) {
            const auto& lay = m_layers[l];
            if (l + 1 < L) {
                // g is d(activation); apply relu mask (and bn scale for layer 0)
                const auto& z = pre[l];
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t o = 0; o < lay.out; ++o) {
                        double& gi = g[r * lay.out + o];
                        if (!(z[r * lay.out + o] > 0.0)) gi = 0.0;
                        else if (l == 0 && has_batch_norm()) gi *= scale[o];
                    }
            }
            next.assign(rows * lay.in, 0.0);
            kernel::dense_backward_input(g.data(), rows, lay.out, m_params.data() + lay.w, lay.in, next.data());
            g.swap(next);
        }
        std::copy(g.begin(), g.end(), dx);
    }

private:
    struct Layer {
        std::size_t in, out, w, b;
    };

    // pre[l] holds the value fed to the rectifier of hidden layer l (after batch-norm for l == 0).
    void run(const double* x, std::size_t rows, double* y, std::vector<std::vector<double>>* pre) const {
        const std::size_t L = m_layers.size();
        std::vector<double> a(x, x + rows * m_spec.input_dim), z;
        std::vector<double> scale, shift;
        if (has_batch_norm()) bn_affine(scale, shift);
        if (pre) pre->assign(L, {});
        for (std::size_t l = 0; l < L; ++l) {
            const auto& lay = m_layers[l];
            z.assign(rows * lay.out, 0.0);
            kernel::dense_forward(a.data(), rows, lay.in, m_wt[l].data(), m_params.data() + lay.b, lay.out, z.data());
            if (l + 1 < L) {
                if (l == 0 && has_batch_norm())
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t o = 0; o < lay.out; ++o)
                            z[r * lay.out + o] = z[r * lay.out + o] * scale[o] + shift[o];
                if (pre) (*pre)[l] = z;
                for (auto& v : z) v = v > 0.0 ? v : 0.0;
            }
            a.swap(z);
        }
        std::copy(a.begin(), a.end(), y);
    }

    NetworkSpec m_spec;
    std::vector<Layer> m_layers;
    std::size_t m_bn_offset = 0;
    std::vector<double> m_params;
    std::vector<double> m_running_mean, m_running_var;
    std::vector<std::vector<double>> m_wt;
};

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
    std::size_t input_dim = 0;
    std::size_t output_dim = 0;
    std::vector<double> x;  // rows x input_dim
    std::vector<double> y;  // rows x output_dim

    std::size_t rows() const { return input_dim == 0 ? 0 : x.size() / input_dim; }

    static Dataset from_samples(const std::vector<DifferentialSample>& samples) {
        Dataset d;
        d.input_dim = 7;
        d.output_dim = 2;
        d.x.reserve(samples.size() * 7);
        d.y.reserve(samples.size() * 2);
        for (const auto& s : samples) {
            const auto f = s.features();
            d.x.insert(d.x.end(), f.begin(), f.end());
            d.y.push_back(s.target.dw);
            d.y.push_back(s.target.dl);
        }
        return d;
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    double learning_rate = 0.0;
    std::vector<double> train_mae;  // per target, physical units, training mode
    std::vector<double> val_mae;    // per target, physical units, inference mode
};

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Trained network plus frozen z-score statistics.
struct TrainedModel {
    Mlp net;
    std::vector<double> input_mean, input_std, output_mean, output_std;
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;

    std::size_t input_dim() const { return net.spec().input_dim; }
    std::size_t output_dim() const { return net.spec().output_dim; }

    // x: rows x input_dim, physical units. Returns rows x output_dim, physical units.
    std::vector<double> predict_rows(const double* x, std::size_t rows) const {
        const std::size_t di = input_dim(), dout = output_dim();
        std::vector<double> xn(rows * di), yn(rows * dout);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < di; ++k) xn[r * di + k] = (x[r * di + k] - input_mean[k]) / input_std[k];
        net.infer(xn.data(), rows, yn.data());
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < dout; ++k) yn[r * dout + k] = yn[r * dout + k] * output_std[k] + output_mean[k];
        return yn;
    }

    std::vector<double> predict_rows(const std::vector<double>& x) const {
        if (x.size() % input_dim() != 0) throw std::invalid_argument("predict: feature dimension mismatch");
        return predict_rows(x.data(), x.size() / input_dim());
    }

    std::vector<GobDelta> predict(const std::vector<Features>& rows) const {
        require_standard_schema();
        auto y = predict_rows(reinterpret_cast<const double*>(rows.data()), rows.size());
        std::vector<GobDelta> out(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) out[r] = {y[2 * r], y[2 * r + 1]};
        return out;
    }

    GobDelta predict(const Features& f) const { return predict(std::vector<Features>{f}).front(); }

    // cot: d(loss)/d(prediction) per row, physical units. Returns d(loss)/d(input), physical units.
    std::vector<double> input_vjp_rows(const double* x, std::size_t rows, const double* cot) const {
        const std::size_t di = input_dim(), dout = output_dim();
        std::vector<double> xn(rows * di), cn(rows * dout), dx(rows * di);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t k = 0; k < di; ++k) xn[r * di + k] = (x[r * di + k] - input_mean[k]) / input_std[k];
            for (std::size_t k = 0; k < dout; ++k) cn[r * dout + k] = cot[r * dout + k] * output_std[k];
        }
        net.input_vjp(xn.data(), rows, cn.data(), dx.data());
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < di; ++k) dx[r * di + k] /= input_std[k];
        return dx;
    }

    std::vector<DeadpointDelta> delta_vjp(const std::vector<Features>& rows, const std::vector<GobDelta>& cot) const {
        require_standard_schema();
        if (cot.size() != rows.size()) throw std::invalid_argument("delta_vjp: size mismatch");
        auto dx = input_vjp_rows(reinterpret_cast<const double*>(rows.data()), rows.size(),
                                 reinterpret_cast<const double*>(cot.data()));
        std::vector<DeadpointDelta> out(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r)
            out[r] = {dx[7 * r + delta_offset], dx[7 * r + delta_offset + 1], dx[7 * r + delta_offset + 2]};
        return out;
    }

    // Gradient of sum_k w_k (yhat_k - t_k)^2 with respect to the three delta inputs.
    DeadpointDelta input_gradient(const Features& f, const GobDelta& target, const GobDelta& weights = {1.0, 1.0}) const {
        const auto p = predict(f);
        const GobDelta cot{2.0 * weights.dw * (p.dw - target.dw), 2.0 * weights.dl * (p.dl - target.dl)};
        return delta_vjp({f}, {cot}).front();
    }

private:
    void require_standard_schema() const {
        if (input_dim() != 7 || output_dim() != 2)
            throw std::invalid_argument("model does not use the 7-feature / 2-target schema");
    }
};

static_assert(sizeof(Features) == 7 * sizeof(double));
static_assert(sizeof(GobDelta) == 2 * sizeof(double));

inline TrainedModel untrained_model(const Mlp& net, const Dataset& train) {
    TrainedModel m;
    m.net = net;
    const std::size_t di = train.input_dim, dout = train.output_dim, n = train.rows();
    auto stats = [n](const std::vector<double>& v, std::size_t d, std::vector<double>& mean, std::vector<double>& sd) {
        mean.assign(d, 0.0);
        sd.assign(d, 0.0);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t k = 0; k < d; ++k) mean[k] += v[r * d + k];
        for (auto& x : mean) x /= static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t k = 0; k < d; ++k) sd[k] += (v[r * d + k] - mean[k]) * (v[r * d + k] - mean[k]);
        for (auto& x : sd) {
            x = std::sqrt(x / static_cast<double>(n));
            if (!(x > 1e-12)) x = 1.0;
        }
    };
    stats(train.x, di, m.input_mean, m.input_std);
    stats(train.y, dout, m.output_mean, m.output_std);
    return m;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    double learning_rate = 8e-3;
    double weight_decay = 1e-2;
    std::size_t batch_size = 1024;
    std::size_t max_epochs = 400;
    std::size_t patience = 80;
    std::uint64_t seed = 1;
    bool cosine_schedule = true;
    bool recalibrate_batch_norm = true;  // population statistics over the training split before each validation
};

inline void validate_train_config(const TrainConfig& c) {
    if (!(c.learning_rate > 0.0) || !(c.weight_decay >= 0.0) || c.batch_size < 2 || c.patience < 1)
        throw std::invalid_argument("train config: learning_rate > 0, weight_decay >= 0, batch_size >= 2, patience >= 1");
}

namespace detail {

class TrainingPass {
public:
    explicit TrainingPass(const Mlp& net, double dropout) : m_net(net), m_dropout(dropout) {}

    // Forward in training mode, MAE loss summed over targets, backward into grad. Returns loss (normalized units).
    double run(const double* x, const double* y, std::size_t rows, std::vector<double>& grad, std::mt19937_64& rng,
               std::vector<double>& batch_mean, std::vector<double>& batch_var, double* yhat_out) {
        const auto& spec = m_net.spec();
        const std::size_t L = m_net.layer_count();
        m_a.resize(L + 1);
        m_z.resize(L);
        m_a[0].assign(x, x + rows * spec.input_dim);
        const bool bn = m_net.has_batch_norm();
        const double keep = 1.0 - m_dropout;
        for (std::size_t l = 0; l < L; ++l) {
            const std::size_t in = m_net.in_dim(l), out = m_net.out_dim(l);
            auto& z = m_z[l];
            z.assign(rows * out, 0.0);
            kernel::dense_forward(m_a[l].data(), rows, in, m_net.weight_t(l), m_net.bias(l), out, z.data());
            auto& a = m_a[l + 1];
            if (l + 1 == L) {
                a = z;
                break;
            }
            a = z;
            if (l == 0 && bn) {
                batch_mean.assign(out, 0.0);
                batch_var.assign(out, 0.0);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t o = 0; o < out; ++o) batch_mean[o] += z[r * out + o];
                for (auto& v : batch_mean) v /= static_cast<double>(rows);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t o = 0; o < out; ++o) {
                        const double d = z[r * out + o] - batch_mean[o];
                        batch_var[o] += d * d;
                    }
                for (auto& v : batch_var) v /= static_cast<double>(rows);
                m_inv_std.resize(out);
                for (std::size_t o = 0; o < out; ++o) m_inv_std[o] = 1.0 / std::sqrt(batch_var[o] + Mlp::bn_eps);
                m_xhat.assign(rows * out, 0.0);
                const double* gamma = m_net.bn_gamma();
                const double* beta = m_net.bn_beta();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t o = 0; o < out; ++o) {
                        const double xh = (z[r * out + o] - batch_mean[o]) * m_inv_std[o];
                        m_xhat[r * out + o] = xh;
                        a[r * out + o] = gamma[o] * xh + beta[o];
                    }
            }
            if (l == 0) m_bn_out = a;
            for (auto& v : a) v = v > 0.0 ? v : 0.0;
            if (l == 0 && m_dropout > 0.0) {
                m_mask.assign(rows * out, 0.0);
                std::bernoulli_distribution keep_d(keep);
                for (std::size_t i = 0; i < rows * out; ++i) {
                    m_mask[i] = keep_d(rng) ? 1.0 / keep : 0.0;
                    a[i] *= m_mask[i];
                }
            }
        }

        // MAE loss and its gradient.
        const std::size_t dout = spec.output_dim;
        const auto& yhat = m_a[L];
        if (yhat_out) std::copy(yhat.begin(), yhat.end(), yhat_out);
        std::vector<double> g(rows * dout);
        double loss = 0.0;
        const double inv_rows = 1.0 / static_cast<double>(rows);
        for (std::size_t i = 0; i < rows * dout; ++i) {
            const double d = yhat[i] - y[i];
            loss += std::abs(d);
            g[i] = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) * inv_rows;
        }
        loss *= inv_rows;

        std::fill(grad.begin(), grad.end(), 0.0);
        std::vector<double> gp;
        for (std::size_t l = L; l-- > 0;) {
            const std::size_t in = m_net.in_dim(l), out = m_net.out_dim(l);
            kernel::dense_backward_weights(g.data(), m_a[l].data(), rows, out, in, grad.data() + m_net.weight_offset(l),
                                           grad.data() + m_net.bias_offset(l));
            if (l == 0) break;
            gp.assign(rows * in, 0.0);
            kernel::dense_backward_input(g.data(), rows, out, m_net.weight(l), in, gp.data());
            // back through the activation of hidden layer l-1
            const std::size_t h = l - 1;
            const auto& pre = (h == 0) ? m_bn_out : m_z[h];
            if (h == 0 && m_dropout > 0.0)
                for (std::size_t i = 0; i < gp.size(); ++i) gp[i] *= m_mask[i];
            for (std::size_t i = 0; i < gp.size(); ++i)
                if (!(pre[i] > 0.0)) gp[i] = 0.0;
            if (h == 0 && bn) {
                const std::size_t d = in;
                double* dgamma = grad.data() + m_net.bn_offset();
                double* dbeta = dgamma + d;
                const double* gamma = m_net.bn_gamma();
                std::vector<double> sum_g(d, 0.0), sum_gx(d, 0.0);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t o = 0; o < d; ++o) {
                        const double gi = gp[r * d + o];
                        dbeta[o] += gi;
                        dgamma[o] += gi * m_xhat[r * d + o];
                        sum_g[o] += gi * gamma[o];
                        sum_gx[o] += gi * gamma[o] * m_xhat[r * d + o];
                    }
                const double n = static_cast<double>(rows);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t o = 0; o < d; ++o) {
                        const double gx = gp[r * d + o] * gamma[o];
                        gp[r * d + o] = m_inv_std[o] / n * (n * gx - sum_g[o] - m_xhat[r * d + o] * sum_gx[o]);
                    }
            }
            g.swap(gp);
        }
        return loss;
    }

private:
    const Mlp& m_net;
    double m_dropout;
    std::vector<std::vector<double>> m_a, m_z;
    std::vector<double> m_xhat, m_inv_std, m_mask, m_bn_out;
};

inline std::vector<double> normalize_rows(const std::vector<double>& v, std::size_t d, const std::vector<double>& mean,
                                          const std::vector<double>& sd) {
    std::vector<double> out(v.size());
    const std::size_t n = v.size() / d;
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t k = 0; k < d; ++k) out[r * d + k] = (v[r * d + k] - mean[k]) / sd[k];
    return out;
}

// Batch-norm population statistics of the first hidden pre-activation over xn (normalized inputs).
inline void recalibrate_bn(Mlp& net, const std::vector<double>& xn, std::size_t rows) {
    const std::size_t in = net.in_dim(0), out = net.out_dim(0);
    std::vector<double> mean(out, 0.0), var(out, 0.0), z;
    const std::size_t chunk = 4096;
    std::vector<double> sum(out, 0.0), sumsq(out, 0.0);
    // two passes for a stable variance
    for (std::size_t s = 0; s < rows; s += chunk) {
        const std::size_t m = std::min(chunk, rows - s);
        z.assign(m * out, 0.0);
        kernel::dense_forward(xn.data() + s * in, m, in, net.weight_t(0), net.bias(0), out, z.data());
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t o = 0; o < out; ++o) sum[o] += z[r * out + o];
    }
    for (std::size_t o = 0; o < out; ++o) mean[o] = sum[o] / static_cast<double>(rows);
    for (std::size_t s = 0; s < rows; s += chunk) {
        const std::size_t m = std::min(chunk, rows - s);
        z.assign(m * out, 0.0);
        kernel::dense_forward(xn.data() + s * in, m, in, net.weight_t(0), net.bias(0), out, z.data());
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t o = 0; o < out; ++o) {
                const double d = z[r * out + o] - mean[o];
                sumsq[o] += d * d;
            }
    }
    for (std::size_t o = 0; o < out; ++o) var[o] = sumsq[o] / static_cast<double>(rows);
    net.running_mean() = mean;
    net.running_var() = var;
}

inline std::vector<double> mae_per_target(const std::vector<double>& yhat, const std::vector<double>& y, std::size_t d) {
    std::vector<double> m(d, 0.0);
    const std::size_t n = y.size() / d;
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t k = 0; k < d; ++k) m[k] += std::abs(yhat[r * d + k] - y[r * d + k]);
    for (auto& v : m) v /= static_cast<double>(std::max<std::size_t>(n, 1));
    return m;
}

}  // namespace detail

// Minimizes MAE summed over targets (z-scored). Returns the best-validation snapshot.
inline TrainedModel train(const Mlp& init, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg) {
    validate_train_config(cfg);
    const auto& spec = init.spec();
    if (train_set.rows() == 0 || val_set.rows() == 0) throw std::invalid_argument("train: empty dataset");
    if (train_set.input_dim != spec.input_dim || train_set.output_dim != spec.output_dim ||
        val_set.input_dim != spec.input_dim || val_set.output_dim != spec.output_dim)
        throw std::invalid_argument("train: dataset dimensions do not match the network");

    TrainedModel model = untrained_model(init, train_set);
    if (cfg.max_epochs == 0) return model;

    const std::size_t di = spec.input_dim, dout = spec.output_dim, n = train_set.rows();
    const auto xn = detail::normalize_rows(train_set.x, di, model.input_mean, model.input_std);
    const auto yn = detail::normalize_rows(train_set.y, dout, model.output_mean, model.output_std);

    Mlp& net = model.net;
    std::vector<double> grad(net.parameter_count(), 0.0);
    AdamW opt(net.parameter_count(), {cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay});
    std::mt19937_64 rng(cfg.seed);
    detail::TrainingPass pass(net, spec.dropout_rate);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::size_t bs = std::min(cfg.batch_size, n);
    const std::size_t batches_per_epoch = std::max<std::size_t>(1, (n + bs - 1) / bs);
    const double total_steps = static_cast<double>(batches_per_epoch * cfg.max_epochs);
    std::vector<double> bx, by, bhat, bmean, bvar;
    std::size_t step = 0;

    TrainedModel best = model;
    double best_score = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        for (std::size_t i = n; i > 1; --i) {
            const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
            std::swap(order[i - 1], order[j]);
        }
        std::vector<double> train_abs(dout, 0.0);
        std::size_t seen = 0;
        double lr = cfg.learning_rate;
        for (std::size_t s = 0; s < n; s += bs) {
            const std::size_t m = std::min(bs, n - s);
            if (m < 2) continue;
            bx.resize(m * di);
            by.resize(m * dout);
            bhat.resize(m * dout);
            for (std::size_t r = 0; r < m; ++r) {
                std::copy_n(xn.data() + order[s + r] * di, di, bx.data() + r * di);
                std::copy_n(yn.data() + order[s + r] * dout, dout, by.data() + r * dout);
            }
            const double loss = pass.run(bx.data(), by.data(), m, grad, rng, bmean, bvar, bhat.data());
            if (!std::isfinite(loss))
                throw TrainingError("non-finite training loss at epoch " + std::to_string(epoch) + ", learning rate " +
                                    std::to_string(lr) + "; retry with a lower learning rate");
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t k = 0; k < dout; ++k)
                    train_abs[k] += std::abs(bhat[r * dout + k] - by[r * dout + k]) * model.output_std[k];
            seen += m;
            if (net.has_batch_norm()) {
                const double mom = Mlp::bn_momentum;
                const double unbias = static_cast<double>(m) / static_cast<double>(m - 1);
                for (std::size_t o = 0; o < bmean.size(); ++o) {
                    net.running_mean()[o] = mom * net.running_mean()[o] + (1.0 - mom) * bmean[o];
                    net.running_var()[o] = mom * net.running_var()[o] + (1.0 - mom) * bvar[o] * unbias;
                }
            }
            lr = cfg.cosine_schedule
                     ? cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total_steps))
                     : cfg.learning_rate;
            opt.step(net.params(), grad, lr);
            net.refresh();
            ++step;
        }
        if (net.has_batch_norm() && cfg.recalibrate_batch_norm) detail::recalibrate_bn(net, xn, n);

        EpochRecord rec;
        rec.epoch = epoch;
        rec.learning_rate = lr;
        rec.train_mae = train_abs;
        for (auto& v : rec.train_mae) v /= static_cast<double>(std::max<std::size_t>(seen, 1));
        rec.val_mae = detail::mae_per_target(model.predict_rows(val_set.x), val_set.y, dout);
        const double score = std::accumulate(rec.val_mae.begin(), rec.val_mae.end(), 0.0);
        if (!std::isfinite(score))
            throw TrainingError("non-finite validation error at epoch " + std::to_string(epoch) +
                                "; retry with a lower learning rate");
        model.history.push_back(rec);
        if (score < best_score) {
            best_score = score;
            since_best = 0;
            best.net = net;
            best.best_epoch = epoch;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    best.history = model.history;
    return best;
}

inline TrainedModel train(const Mlp& init, const std::vector<DifferentialSample>& train_set,
                          const std::vector<DifferentialSample>& val_set, const TrainConfig& cfg) {
    return train(init, Dataset::from_samples(train_set), Dataset::from_samples(val_set), cfg);
}

// ---------------------------------------------------------------------------
// Metrics

struct TargetMetrics {
    std::size_t count = 0;
    double mae = 0.0;
    double rmse = 0.0;
    double medae = 0.0;
    std::optional<double> r2;
    std::optional<double> evs;
};

inline TargetMetrics target_metrics(const std::vector<double>& y, const std::vector<double>& yhat) {
    if (y.empty() || y.size() != yhat.size()) throw std::invalid_argument("metrics: need equal, non-empty inputs");
    TargetMetrics m;
    const std::size_t n = y.size();
    m.count = n;
    std::vector<double> err(n), abs_err(n);
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        err[i] = y[i] - yhat[i];
        abs_err[i] = std::abs(err[i]);
        m.mae += abs_err[i];
        sse += err[i] * err[i];
    }
    m.mae /= static_cast<double>(n);
    m.rmse = std::sqrt(sse / static_cast<double>(n));
    m.medae = detail::median_of(abs_err);
    if (n >= 2) {
        const double ybar = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
        const double ebar = std::accumulate(err.begin(), err.end(), 0.0) / static_cast<double>(n);
        double sst = 0.0, sse_c = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            sst += (y[i] - ybar) * (y[i] - ybar);
            sse_c += (err[i] - ebar) * (err[i] - ebar);
        }
        if (sst > 0.0) {
            m.r2 = 1.0 - sse / sst;
            m.evs = 1.0 - sse_c / sst;
        }
    }
    return m;
}

struct ClassMetric {
    std::string target;     // "weight" or "length"
    double class_low = 0.0;  // lower class edge, g or mm
    std::size_t count = 0;
    double mae = 0.0;
};

struct MetricReport {
    TargetMetrics weight;
    TargetMetrics length;
    std::vector<ClassMetric> per_class;
};

struct ClassBins {
    double weight_ratio = 0.05;
    double length_ratio = 0.05;
};

inline std::int64_t relative_class(double x, double ratio) {
    return static_cast<std::int64_t>(std::floor(std::log(x) / std::log1p(ratio)));
}

inline MetricReport evaluate(const TrainedModel& model, const std::vector<DifferentialSample>& data,
                             const ClassBins& classes = {}) {
    if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
    const auto ds = Dataset::from_samples(data);
    const auto yhat = model.predict_rows(ds.x);
    std::vector<double> yw, yl, pw, pl;
    for (std::size_t i = 0; i < data.size(); ++i) {
        yw.push_back(ds.y[2 * i]);
        yl.push_back(ds.y[2 * i + 1]);
        pw.push_back(yhat[2 * i]);
        pl.push_back(yhat[2 * i + 1]);
    }
    MetricReport rep;
    rep.weight = target_metrics(yw, pw);
    rep.length = target_metrics(yl, pl);

    // Classes follow the gob the correction is applied to: reference + variation.
    std::map<std::int64_t, std::pair<std::size_t, double>> wc, lc;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double w = data[i].reference_weight_g + yw[i];
        const double l = data[i].reference_length_mm + yl[i];
        if (w > 0.0) {
            auto& c = wc[relative_class(w, classes.weight_ratio)];
            ++c.first;
            c.second += std::abs(yw[i] - pw[i]);
        }
        if (l > 0.0) {
            auto& c = lc[relative_class(l, classes.length_ratio)];
            ++c.first;
            c.second += std::abs(yl[i] - pl[i]);
        }
    }
    for (const auto& [k, c] : wc)
        rep.per_class.push_back({"weight", std::pow(1.0 + classes.weight_ratio, static_cast<double>(k)), c.first,
                                 c.second / static_cast<double>(c.first)});
    for (const auto& [k, c] : lc)
        rep.per_class.push_back({"length", std::pow(1.0 + classes.length_ratio, static_cast<double>(k)), c.first,
                                 c.second / static_cast<double>(c.first)});
    return rep;
}

// ---------------------------------------------------------------------------
// Random hyperparameter search

struct SearchSpace {
    Range log10_learning_rate{-3.5, -2.0};
    Range log10_weight_decay{-4.0, -1.0};
    Range dropout{0.0, 0.3};
    std::vector<std::size_t> batch_sizes{128, 256, 512, 1024};
};

struct Trial {
    std::size_t index = 0;
    TrainConfig config;
    double dropout = 0.0;
    std::vector<double> val_mae;
    double score = 0.0;  // val MAE weight + length
};

struct SearchResult {
    Trial best;
    std::vector<Trial> leaderboard;  // ascending score
};

inline Trial sample_trial(const SearchSpace& space, std::size_t index, std::uint64_t seed, const TrainConfig& base,
                          double base_dropout, bool include_default) {
    Trial t;
    t.index = index;
    t.config = base;
    t.dropout = base_dropout;
    if (index == 0 && include_default) return t;
    std::mt19937_64 rng(mix_seed(seed, index));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto lerp = [&](const Range& r) { return r.lo + u(rng) * (r.hi - r.lo); };
    t.config.learning_rate = std::pow(10.0, lerp(space.log10_learning_rate));
    t.config.weight_decay = std::pow(10.0, lerp(space.log10_weight_decay));
    t.dropout = lerp(space.dropout);
    t.config.batch_size = space.batch_sizes[static_cast<std::size_t>(u(rng) * space.batch_sizes.size()) %
                                            space.batch_sizes.size()];
    t.config.seed = mix_seed(seed, index + 1000003);
    return t;
}

inline SearchResult hyper_search(const SearchSpace& space, std::size_t budget, std::uint64_t seed,
                                 const NetworkSpec& spec, const Dataset& train_set, const Dataset& val_set,
                                 const TrainConfig& base = {}, bool include_default = true) {
    if (budget < 1) throw std::invalid_argument("hyper_search: budget must be >= 1");
    SearchResult res;
    for (std::size_t i = 0; i < budget; ++i) {
        Trial t = sample_trial(space, i, seed, base, spec.dropout_rate, include_default);
        NetworkSpec s = spec;
        s.dropout_rate = t.dropout;
        const auto model = train(Mlp::build(s, t.config.seed), train_set, val_set, t.config);
        t.val_mae = model.history.empty() ? std::vector<double>(spec.output_dim, 0.0)
                                          : model.history[model.best_epoch - 1].val_mae;
        t.score = std::accumulate(t.val_mae.begin(), t.val_mae.end(), 0.0);
        res.leaderboard.push_back(t);
    }
    std::stable_sort(res.leaderboard.begin(), res.leaderboard.end(),
                     [](const Trial& a, const Trial& b) { return a.score < b.score; });
    res.best = res.leaderboard.front();
    return res;
}

}  // namespace gobfeed
