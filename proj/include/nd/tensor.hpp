#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "nd/rng.hpp"
#include "stan/errors.hpp"

namespace nd {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

namespace detail {

// Flat row-major storage plus the gradient buffer written by backward().
// Allocation is tracked globally so the efficiency harness can report a
// peak-memory estimate.
struct Storage {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until backward touches this tensor
    bool requires_grad = false;
    bool frozen = false;

    Storage(Shape s, std::vector<double> v, bool rg);
    ~Storage();
    Storage(const Storage&) = delete;
    Storage& operator=(const Storage&) = delete;

    std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
    void ensure_grad();
};

}  // namespace detail

// Live tensor bytes (values + grads) and the high-water mark since the last
// reset. Estimates allocator pressure, not RSS.
struct MemStats {
    static std::int64_t current_bytes();
    static std::int64_t peak_bytes();
    static void reset_peak();
};

// Toggle for the post-op finiteness sweep. On by default; every op checks its
// output and raises NumericError instead of letting NaN/Inf propagate.
void set_finite_checks(bool on);
bool finite_checks_enabled();

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double v, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    // Xavier-style uniform init over fan_in/fan_out.
    static Tensor xavier(Shape shape, std::int64_t fan_in, std::int64_t fan_out,
                         Rng& rng, bool requires_grad = true);

    bool defined() const { return s_ != nullptr; }
    const Shape& shape() const;
    std::int64_t ndim() const { return static_cast<std::int64_t>(shape().size()); }
    std::int64_t dim(int i) const { return shape()[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const;

    bool requires_grad() const;
    void set_requires_grad(bool rg);
    bool frozen() const;
    void set_frozen(bool f);

    double* data();
    const double* data() const;
    std::span<const double> values() const;

    // Scalar access; throws ContractError unless numel()==1.
    double item() const;
    double at(std::initializer_list<std::int64_t> idx) const;

    bool has_grad() const;
    const double* grad() const;           // nullptr when absent
    double* grad_data();                  // allocates zeros on first use
    Tensor grad_tensor() const;           // copy of grad with this shape
    void zero_grad();                     // drops the buffer

    Tensor clone() const;                 // deep copy, keeps requires_grad
    Tensor detach() const;                // deep copy, no grad participation

    void check_finite(const char* what) const;

    // Internal handle used by the op implementations.
    const std::shared_ptr<detail::Storage>& storage() const { return s_; }

private:
    explicit Tensor(std::shared_ptr<detail::Storage> s) : s_(std::move(s)) {}
    std::shared_ptr<detail::Storage> s_;

    friend Tensor make_tensor(Shape, std::vector<double>, bool);
};

Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad);

// Wengert list. Ops append a backward closure as they execute; backward()
// walks the list in reverse and clears it. One tape per thread.
class Tape {
public:
    static Tape& active();

    bool recording() const { return pause_depth_ == 0; }
    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    friend struct NoGradGuard;
    friend void backward(const Tensor&);
    std::vector<std::function<void()>> nodes_;
    int pause_depth_ = 0;
};

// Suspends tape recording for inference-only work.
struct NoGradGuard {
    NoGradGuard() { ++Tape::active().pause_depth_; }
    ~NoGradGuard() { --Tape::active().pause_depth_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// ---- differentiable ops ------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor affine(const Tensor& x, double scale, double shift);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

// Valid (unpadded) cross-correlation. x: [n_in, T], kernels: [n_out, n_in, k].
Tensor conv1d(const Tensor& x, const Tensor& kernels);
// x: [c, h, w], kernels: [f, c, kh, kw].
Tensor conv2d(const Tensor& x, const Tensor& kernels);

Tensor channel_bias(const Tensor& x, const Tensor& b);  // b over axis 0
Tensor row_bias(const Tensor& x, const Tensor& b);      // x[m,n] + b[n]

Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// Indicator x > 0. Detached by construction: its derivative is zero almost
// everywhere, which is the value used for second-order WGAN-GP terms.
Tensor step(const Tensor& x);

// Softmax along `axis` (default last). Max-subtracted; the denominator is
// summed in value order so node permutations reproduce bit-identical maps.
Tensor softmax(const Tensor& x, int axis = -1);

// Normalizes the last axis to zero mean / unit variance, then applies the
// affine (gain, bias). gain/bias have the length of the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

Tensor row(const Tensor& x, std::int64_t i);   // [m,n] -> [n]
Tensor reshape(const Tensor& x, Shape shape);
Tensor mean_cols(const Tensor& x);             // [r,c] -> [r]
Tensor sum(const Tensor& x);                   // -> [1]
Tensor mean(const Tensor& x);                  // -> [1]

Tensor stack_rows(std::span<const Tensor> rows);     // n x [k] -> [n,k]
Tensor concat(std::span<const Tensor> parts);        // 1-D concat
Tensor weighted_sum(std::span<const Tensor> xs, const Tensor& w);

// Inverted dropout; scales survivors by 1/(1-p). Caller gates on training.
Tensor dropout(const Tensor& x, double p, Rng& rng);

// Non-overlapping mean pooling; window clamped to the map when it is smaller
// than `pool`, trailing remainder dropped.
Tensor avg_pool2d(const Tensor& x, std::int64_t pool);

Tensor sqrt_scalar(const Tensor& x);  // numel()==1
// Mean binary cross entropy over a vector of logits against one hard label.
Tensor bce_with_logits(const Tensor& logits, double target);

// Reverse pass from a scalar loss. Populates grads for every requires_grad
// tensor reachable on the tape, then clears the tape.
void backward(const Tensor& loss);

}  // namespace nd
