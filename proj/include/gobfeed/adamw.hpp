#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace gobfeed {

// Adam with decoupled weight decay.
class AdamW {
public:
    struct Params {
        double learning_rate = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double epsilon = 1e-8;
        double weight_decay = 1e-2;
    };

    AdamW() = default;
    AdamW(std::size_t parameter_count, Params params) : m_params(params) { reset(parameter_count); }

    void reset(std::size_t parameter_count) {
        m_moment1.assign(parameter_count, 0.0);
        m_moment2.assign(parameter_count, 0.0);
        m_step = 0;
    }

    const Params& params() const noexcept { return m_params; }
    std::size_t step_index() const noexcept { return m_step; }

    void step(std::vector<double>& parameters, const std::vector<double>& gradients, double learning_rate) {
        if (parameters.size() != m_moment1.size() || gradients.size() != m_moment1.size())
            throw std::invalid_argument("AdamW::step: size mismatch");
        ++m_step;
        const double b1 = m_params.beta1, b2 = m_params.beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(m_step));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(m_step));
        const double decay = 1.0 - learning_rate * m_params.weight_decay;
        const double step_size = learning_rate / c1;
        const double inv_sqrt_c2 = 1.0 / std::sqrt(c2);
        const std::size_t n = parameters.size();
        double* p = parameters.data();
        const double* g = gradients.data();
        double* m = m_moment1.data();
        double* v = m_moment2.data();
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] = p[i] * decay - step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_c2 + m_params.epsilon);
        }
    }

private:
    Params m_params;
    std::vector<double> m_moment1;
    std::vector<double> m_moment2;
    std::size_t m_step = 0;
};

}  // namespace gobfeed
