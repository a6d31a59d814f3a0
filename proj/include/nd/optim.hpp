#pragma once

#include <vector>

#include "nd/tensor.hpp"

namespace nd {

// Adam with bias correction. Parameters are registered once; a frozen
// parameter is rejected both at construction and again at step time, since
// freezing after registration would otherwise be silently overwritten.
class Adam {
public:
    explicit Adam(std::vector<Tensor> params, double lr,
                  double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    // Applies one update from the gradients currently attached to the
    // parameters. Parameters with no gradient buffer are left untouched.
    void step();

    // Drops every parameter's gradient buffer.
    void zero_grad();

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    std::size_t size() const { return params_.size(); }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::vector<std::int64_t> t_;
    double lr_, beta1_, beta2_, eps_;
};

}  // namespace nd
