#include "nd/optim.hpp"

#include <cmath>

namespace nd {

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2,
           double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2),
      eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    t_.assign(params_.size(), 0);
    for (const Tensor& p : params_) {
        if (!p.defined())
            throw stan::ContractError("adam: undefined parameter");
        if (p.frozen())
            throw stan::ContractError("adam: frozen parameter registered");
        m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    }
}

void Adam::step() {
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Tensor& p = params_[k];
        if (p.frozen())
            throw stan::ContractError("adam: parameter froze after registration");
        if (!p.has_grad()) continue;
        const double* g = p.grad();
        double* w = p.data();
        std::vector<double>& m = m_[k];
        std::vector<double>& v = v_[k];
        const std::int64_t t = ++t_[k];
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t));
        const std::size_t n = m.size();
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

void Adam::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

}  // namespace nd
