#include "nd/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>

namespace nd {

namespace {

std::atomic<std::int64_t> g_current_bytes{0};
std::atomic<std::int64_t> g_peak_bytes{0};
bool g_finite_checks = true;

void track_alloc(std::int64_t bytes) {
    const std::int64_t cur = g_current_bytes.fetch_add(bytes) + bytes;
    std::int64_t peak = g_peak_bytes.load();
    while (cur > peak && !g_peak_bytes.compare_exchange_weak(peak, cur)) {
    }
}

bool grads_wanted(std::initializer_list<const Tensor*> ins) {
    if (!Tape::active().recording()) return false;
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

void check_out_finite(const Tensor& t, const char* op) {
    if (g_finite_checks) t.check_finite(op);
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (std::int64_t d : s) n *= d;
    return n;
}

void set_finite_checks(bool on) { g_finite_checks = on; }
bool finite_checks_enabled() { return g_finite_checks; }

namespace detail {

Storage::Storage(Shape s, std::vector<double> v, bool rg)
    : shape(std::move(s)), value(std::move(v)), requires_grad(rg) {
    track_alloc(static_cast<std::int64_t>(value.size() * sizeof(double)));
}

Storage::~Storage() {
    track_alloc(-static_cast<std::int64_t>((value.size() + grad.size()) *
                                           sizeof(double)));
}

void Storage::ensure_grad() {
    if (grad.empty()) {
        grad.assign(value.size(), 0.0);
        track_alloc(static_cast<std::int64_t>(grad.size() * sizeof(double)));
    }
}

}  // namespace detail

std::int64_t MemStats::current_bytes() { return g_current_bytes.load(); }
std::int64_t MemStats::peak_bytes() { return g_peak_bytes.load(); }
void MemStats::reset_peak() { g_peak_bytes.store(g_current_bytes.load()); }

// ---- Tensor ------------------------------------------------------------

Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    for (std::int64_t d : shape)
        if (d <= 0)
            throw stan::ShapeError("tensor: non-positive dimension in " +
                                   shape_str(shape));
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
        throw stan::ShapeError("tensor: shape " + shape_str(shape) +
                               " does not match buffer of " +
                               std::to_string(data.size()) + " values");
    return Tensor(std::make_shared<detail::Storage>(std::move(shape),
                                                    std::move(data),
                                                    requires_grad));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    return make_tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::full(Shape shape, double x, bool requires_grad) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)), x);
    return make_tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
    return make_tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return make_tensor({1}, {v}, requires_grad);
}

Tensor Tensor::xavier(Shape shape, std::int64_t fan_in, std::int64_t fan_out,
                      Rng& rng, bool requires_grad) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (double& x : v) x = rng.uniform(-a, a);
    return make_tensor(std::move(shape), std::move(v), requires_grad);
}

const Shape& Tensor::shape() const {
    if (!s_) throw stan::ContractError("tensor: undefined handle");
    return s_->shape;
}

std::int64_t Tensor::numel() const {
    if (!s_) throw stan::ContractError("tensor: undefined handle");
    return s_->numel();
}

bool Tensor::requires_grad() const { return s_ && s_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
    if (!s_) throw stan::ContractError("tensor: undefined handle");
    s_->requires_grad = rg;
}

bool Tensor::frozen() const { return s_ && s_->frozen; }

void Tensor::set_frozen(bool f) {
    if (!s_) throw stan::ContractError("tensor: undefined handle");
    s_->frozen = f;
}

double* Tensor::data() {
    if (!s_) throw stan::ContractError("tensor: undefined handle");
    return s_->value.data();
}

const double* Tensor::data() const {
    if (!s_) throw stan::ContractError("tensor: undefined handle");
    return s_->value.data();
}

std::span<const double> Tensor::values() const {
    if (!s_) throw stan::ContractError("tensor: undefined handle");
    return {s_->value.data(), s_->value.size()};
}

double Tensor::item() const {
    if (numel() != 1)
        throw stan::ContractError("tensor: item() on non-scalar shape " +
                                  shape_str(shape()));
    return s_->value[0];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    const Shape& sh = shape();
    if (idx.size() != sh.size())
        throw stan::ContractError("tensor: index rank mismatch");
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (std::int64_t i : idx) {
        if (i < 0 || i >= sh[k])
            throw stan::ContractError("tensor: index out of range");
        flat = flat * sh[k] + i;
        ++k;
    }
    return s_->value[static_cast<std::size_t>(flat)];
}

bool Tensor::has_grad() const { return s_ && !s_->grad.empty(); }

const double* Tensor::grad() const {
    return (s_ && !s_->grad.empty()) ? s_->grad.data() : nullptr;
}

double* Tensor::grad_data() {
    if (!s_) throw stan::ContractError("tensor: undefined handle");
    s_->ensure_grad();
    return s_->grad.data();
}

Tensor Tensor::grad_tensor() const {
    if (!has_grad())
        throw stan::ContractError("tensor: gradient not populated");
    return make_tensor(s_->shape, s_->grad, false);
}

void Tensor::zero_grad() {
    if (s_ && !s_->grad.empty()) {
        track_alloc(-static_cast<std::int64_t>(s_->grad.size() * sizeof(double)));
        s_->grad.clear();
        s_->grad.shrink_to_fit();
    }
}

Tensor Tensor::clone() const {
    return make_tensor(s_->shape, s_->value, s_->requires_grad);
}

Tensor Tensor::detach() const { return make_tensor(s_->shape, s_->value, false); }

void Tensor::check_finite(const char* what) const {
    for (double v : s_->value)
        if (!std::isfinite(v))
            throw stan::NumericError(std::string(what) +
                                     ": non-finite value in result " +
                                     shape_str(s_->shape));
}

Tape& Tape::active() {
    thread_local Tape tape;
    return tape;
}

// ---- ops ---------------------------------------------------------------

namespace {

using detail::Storage;
using StoragePtr = std::shared_ptr<Storage>;

// Adds src into dst's grad buffer.
void axpy_grad(const StoragePtr& dst, const std::vector<double>& src) {
    dst->ensure_grad();
    const std::size_t n = src.size();
    for (std::size_t i = 0; i < n; ++i) dst->grad[i] += src[i];
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw stan::ShapeError(std::string(op) + ": shape mismatch " +
                               shape_str(a.shape()) + " vs " +
                               shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    const std::size_t n = static_cast<std::size_t>(a.numel());
    std::vector<double> out(n);
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
    const bool rg = grads_wanted({&a, &b});
    Tensor y = make_tensor(a.shape(), std::move(out), rg);
    check_out_finite(y, "add");
    if (rg) {
        StoragePtr as = a.storage(), bs = b.storage(), ys = y.storage();
        Tape::active().record([as, bs, ys] {
            if (ys->grad.empty()) return;
            if (as->requires_grad) axpy_grad(as, ys->grad);
            if (bs->requires_grad) axpy_grad(bs, ys->grad);
        });
    }
    return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    const std::size_t n = static_cast<std::size_t>(a.numel());
    std::vector<double> out(n);
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i];
    const bool rg = grads_wanted({&a, &b});
    Tensor y = make_tensor(a.shape(), std::move(out), rg);
    check_out_finite(y, "sub");
    if (rg) {
        StoragePtr as = a.storage(), bs = b.storage(), ys = y.storage();
        Tape::active().record([as, bs, ys] {
            if (ys->grad.empty()) return;
            if (as->requires_grad) axpy_grad(as, ys->grad);
            if (bs->requires_grad) {
                bs->ensure_grad();
                for (std::size_t i = 0; i < ys->grad.size(); ++i)
                    bs->grad[i] -= ys->grad[i];
            }
        });
    }
    return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    const std::size_t n = static_cast<std::size_t>(a.numel());
    std::vector<double> out(n);
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i];
    const bool rg = grads_wanted({&a, &b});
    Tensor y = make_tensor(a.shape(), std::move(out), rg);
    check_out_finite(y, "mul");
    if (rg) {
        StoragePtr as = a.storage(), bs = b.storage(), ys = y.storage();
        Tape::active().record([as, bs, ys] {
            if (ys->grad.empty()) return;
            if (as->requires_grad) {
                as->ensure_grad();
                for (std::size_t i = 0; i < ys->grad.size(); ++i)
                    as->grad[i] += bs->value[i] * ys->grad[i];
            }
            if (bs->requires_grad) {
                bs->ensure_grad();
                for (std::size_t i = 0; i < ys->grad.size(); ++i)
                    bs->grad[i] += as->value[i] * ys->grad[i];
            }
        });
    }
    return y;
}

Tensor affine(const Tensor& x, double scale, double shift) {
    const std::size_t n = static_cast<std::size_t>(x.numel());
    std::vector<double> out(n);
    const double* px = x.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = scale * px[i] + shift;
    const bool rg = grads_wanted({&x});
    Tensor y = make_tensor(x.shape(), std::move(out), rg);
    check_out_finite(y, "affine");
    if (rg) {
        StoragePtr xs = x.storage(), ys = y.storage();
        Tape::active().record([xs, ys, scale] {
            if (ys->grad.empty()) return;
            xs->ensure_grad();
            for (std::size_t i = 0; i < ys->grad.size(); ++i)
                xs->grad[i] += scale * ys->grad[i];
        });
    }
    return y;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw stan::ShapeError("matmul: expects 2-D operands, got " +
                               shape_str(a.shape()) + " and " +
                               shape_str(b.shape()));
    const std::int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw stan::ShapeError("matmul: inner dimensions disagree for shapes " +
                               shape_str(a.shape()) + " and " +
                               shape_str(b.shape()));
    std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
    const double* pa = a.data();
    const double* pb = b.data();
    // i-k-j order keeps both streams contiguous.
    for (std::int64_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * n;
        const double* arow = pa + i * k;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = pb + kk * n;
            for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    const bool rg = grads_wanted({&a, &b});
    Tensor y = make_tensor({m, n}, std::move(out), rg);
    check_out_finite(y, "matmul");
    if (rg) {
        StoragePtr as = a.storage(), bs = b.storage(), ys = y.storage();
        Tape::active().record([as, bs, ys, m, k, n] {
            if (ys->grad.empty()) return;
            const double* gy = ys->grad.data();
            if (as->requires_grad) {
                as->ensure_grad();
                // dA = dY * B^T
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j) {
                        const double g = gy[i * n + j];
                        if (g == 0.0) continue;
                        const double* brow = bs->value.data();
                        for (std::int64_t kk = 0; kk < k; ++kk)
                            as->grad[i * k + kk] += g * brow[kk * n + j];
                    }
            }
            if (bs->requires_grad) {
                bs->ensure_grad();
                // dB = A^T * dY
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t kk = 0; kk < k; ++kk) {
                        const double av = as->value[i * k + kk];
                        if (av == 0.0) continue;
                        for (std::int64_t j = 0; j < n; ++j)
                            bs->grad[kk * n + j] += av * gy[i * n + j];
                    }
            }
        });
    }
    return y;
}

Tensor transpose(const Tensor& x) {
    if (x.ndim() != 2)
        throw stan::ShapeError("transpose: expects 2-D, got " +
                               shape_str(x.shape()));
    const std::int64_t m = x.dim(0), n = x.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m * n));
    const double* px = x.data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = px[i * n + j];
    const bool rg = grads_wanted({&x});
    Tensor y = make_tensor({n, m}, std::move(out), rg);
    if (rg) {
        StoragePtr xs = x.storage(), ys = y.storage();
        Tape::active().record([xs, ys, m, n] {
            if (ys->grad.empty()) return;
            xs->ensure_grad();
            for (std::int64_t j = 0; j < n; ++j)
                for (std::int64_t i = 0; i < m; ++i)
                    xs->grad[i * n + j] += ys->grad[j * m + i];
        });
    }
    return y;
}

Tensor conv1d(const Tensor& x, const Tensor& kernels) {
    if (x.ndim() != 2 || kernels.ndim() != 3)
        throw stan::ShapeError("conv1d: expects x[n_in,T], kernels[n_out,n_in,k], got " +
                               shape_str(x.shape()) + " and " +
                               shape_str(kernels.shape()));
    const std::int64_t cin = x.dim(0), T = x.dim(1);
    const std::int64_t cout = kernels.dim(0), kin = kernels.dim(1),
                       kw = kernels.dim(2);
    if (cin != kin)
        throw stan::ShapeError("conv1d: channel mismatch " + shape_str(x.shape()) +
                               " vs " + shape_str(kernels.shape()));
    if (T < kw)
        throw stan::InputTooShortError(
            "conv1d: input length " + std::to_string(T) +
            " shorter than kernel " + std::to_string(kw));
    const std::int64_t L = T - kw + 1;
    std::vector<double> out(static_cast<std::size_t>(cout * L), 0.0);
    const double* px = x.data();
    const double* pk = kernels.data();
    for (std::int64_t o = 0; o < cout; ++o)
        for (std::int64_t c = 0; c < cin; ++c) {
            const double* krow = pk + (o * cin + c) * kw;
            const double* xrow = px + c * T;
            double* orow = out.data() + o * L;
            for (std::int64_t j = 0; j < kw; ++j) {
                const double kv = krow[j];
                if (kv == 0.0) continue;
                for (std::int64_t t = 0; t < L; ++t) orow[t] += kv * xrow[t + j];
            }
        }
    const bool rg = grads_wanted({&x, &kernels});
    Tensor y = make_tensor({cout, L}, std::move(out), rg);
    check_out_finite(y, "conv1d");
    if (rg) {
        StoragePtr xs = x.storage(), ks = kernels.storage(), ys = y.storage();
        Tape::active().record([xs, ks, ys, cin, T, cout, kw, L] {
            if (ys->grad.empty()) return;
            const double* gy = ys->grad.data();
            if (xs->requires_grad) {
                xs->ensure_grad();
                for (std::int64_t o = 0; o < cout; ++o)
                    for (std::int64_t c = 0; c < cin; ++c) {
                        const double* krow = ks->value.data() + (o * cin + c) * kw;
                        double* gx = xs->grad.data() + c * T;
                        for (std::int64_t j = 0; j < kw; ++j) {
                            const double kv = krow[j];
                            if (kv == 0.0) continue;
                            for (std::int64_t t = 0; t < L; ++t)
                                gx[t + j] += kv * gy[o * L + t];
                        }
                    }
            }
            if (ks->requires_grad) {
                ks->ensure_grad();
                for (std::int64_t o = 0; o < cout; ++o)
                    for (std::int64_t c = 0; c < cin; ++c) {
                        double* gk = ks->grad.data() + (o * cin + c) * kw;
                        const double* xrow = xs->value.data() + c * T;
                        for (std::int64_t j = 0; j < kw; ++j) {
                            double acc = 0.0;
                            for (std::int64_t t = 0; t < L; ++t)
                                acc += xrow[t + j] * gy[o * L + t];
                            gk[j] += acc;
                        }
                    }
            }
        });
    }
    return y;
}

Tensor conv2d(const Tensor& x, const Tensor& kernels) {
    if (x.ndim() != 3 || kernels.ndim() != 4)
        throw stan::ShapeError("conv2d: expects x[c,h,w], kernels[f,c,kh,kw], got " +
                               shape_str(x.shape()) + " and " +
                               shape_str(kernels.shape()));
    const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::int64_t f = kernels.dim(0), kc = kernels.dim(1),
                       kh = kernels.dim(2), kw = kernels.dim(3);
    if (c != kc)
        throw stan::ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) +
                               " vs " + shape_str(kernels.shape()));
    if (h < kh || w < kw)
        throw stan::InputTooShortError(
            "conv2d: input " + shape_str(x.shape()) + " smaller than kernel " +
            shape_str(kernels.shape()));
    const std::int64_t oh = h - kh + 1, ow = w - kw + 1;
    std::vector<double> out(static_cast<std::size_t>(f * oh * ow), 0.0);
    const double* px = x.data();
    const double* pk = kernels.data();
    for (std::int64_t o = 0; o < f; ++o)
        for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t ki = 0; ki < kh; ++ki)
                for (std::int64_t kj = 0; kj < kw; ++kj) {
                    const double kv = pk[((o * c + ci) * kh + ki) * kw + kj];
                    if (kv == 0.0) continue;
                    for (std::int64_t i = 0; i < oh; ++i) {
                        const double* xrow = px + (ci * h + i + ki) * w + kj;
                        double* orow = out.data() + (o * oh + i) * ow;
                        for (std::int64_t j = 0; j < ow; ++j)
                            orow[j] += kv * xrow[j];
                    }
                }
    const bool rg = grads_wanted({&x, &kernels});
    Tensor y = make_tensor({f, oh, ow}, std::move(out), rg);
    check_out_finite(y, "conv2d");
    if (rg) {
        StoragePtr xs = x.storage(), ks = kernels.storage(), ys = y.storage();
        Tape::active().record([xs, ks, ys, c, h, w, f, kh, kw, oh, ow] {
            if (ys->grad.empty()) return;
            const double* gy = ys->grad.data();
            if (xs->requires_grad) {
                xs->ensure_grad();
                for (std::int64_t o = 0; o < f; ++o)
                    for (std::int64_t ci = 0; ci < c; ++ci)
                        for (std::int64_t ki = 0; ki < kh; ++ki)
                            for (std::int64_t kj = 0; kj < kw; ++kj) {
                                const double kv =
                                    ks->value[((o * c + ci) * kh + ki) * kw + kj];
                                if (kv == 0.0) continue;
                                for (std::int64_t i = 0; i < oh; ++i) {
                                    double* gx =
                                        xs->grad.data() + (ci * h + i + ki) * w + kj;
                                    const double* grow = gy + (o * oh + i) * ow;
                                    for (std::int64_t j = 0; j < ow; ++j)
                                        gx[j] += kv * grow[j];
                                }
                            }
            }
            if (ks->requires_grad) {
                ks->ensure_grad();
                for (std::int64_t o = 0; o < f; ++o)
                    for (std::int64_t ci = 0; ci < c; ++ci)
                        for (std::int64_t ki = 0; ki < kh; ++ki)
                            for (std::int64_t kj = 0; kj < kw; ++kj) {
                                double acc = 0.0;
                                for (std::int64_t i = 0; i < oh; ++i) {
                                    const double* xrow =
                                        xs->value.data() + (ci * h + i + ki) * w + kj;
                                    const double* grow = gy + (o * oh + i) * ow;
                                    for (std::int64_t j = 0; j < ow; ++j)
                                        acc += xrow[j] * grow[j];
                                }
                                ks->grad[((o * c + ci) * kh + ki) * kw + kj] += acc;
                            }
            }
        });
    }
    return y;
}

Tensor channel_bias(const Tensor& x, const Tensor& b) {
    if (x.ndim() < 1 || b.ndim() != 1 || b.dim(0) != x.dim(0))
        throw stan::ShapeError("channel_bias: bias " + shape_str(b.shape()) +
                               " does not match axis 0 of " +
                               shape_str(x.shape()));
    const std::int64_t ch = x.dim(0);
    const std::int64_t inner = x.numel() / ch;
    std::vector<double> out(static_cast<std::size_t>(x.numel()));
    const double* px = x.data();
    const double* pb = b.data();
    for (std::int64_t ci = 0; ci < ch; ++ci)
        for (std::int64_t j = 0; j < inner; ++j)
            out[ci * inner + j] = px[ci * inner + j] + pb[ci];
    const bool rg = grads_wanted({&x, &b});
    Tensor y = make_tensor(x.shape(), std::move(out), rg);
    check_out_finite(y, "channel_bias");
    if (rg) {
        StoragePtr xs = x.storage(), bs = b.storage(), ys = y.storage();
        Tape::active().record([xs, bs, ys, ch, inner] {
            if (ys->grad.empty()) return;
            if (xs->requires_grad) axpy_grad(xs, ys->grad);
            if (bs->requires_grad) {
                bs->ensure_grad();
                for (std::int64_t ci = 0; ci < ch; ++ci) {
                    double acc = 0.0;
                    for (std::int64_t j = 0; j < inner; ++j)
                        acc += ys->grad[ci * inner + j];
                    bs->grad[ci] += acc;
                }
            }
        });
    }
    return y;
}

Tensor row_bias(const Tensor& x, const Tensor& b) {
    if (x.ndim() != 2 || b.ndim() != 1 || b.dim(0) != x.dim(1))
        throw stan::ShapeError("row_bias: bias " + shape_str(b.shape()) +
                               " does not match columns of " +
                               shape_str(x.shape()));
    const std::int64_t m = x.dim(0), n = x.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m * n));
    const double* px = x.data();
    const double* pb = b.data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[i * n + j] = px[i * n + j] + pb[j];
    const bool rg = grads_wanted({&x, &b});
    Tensor y = make_tensor(x.shape(), std::move(out), rg);
    check_out_finite(y, "row_bias");
    if (rg) {
        StoragePtr xs = x.storage(), bs = b.storage(), ys = y.storage();
        Tape::active().record([xs, bs, ys, m, n] {
            if (ys->grad.empty()) return;
            if (xs->requires_grad) axpy_grad(xs, ys->grad);
            if (bs->requires_grad) {
                bs->ensure_grad();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j)
                        bs->grad[j] += ys->grad[i * n + j];
            }
        });
    }
    return y;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor pointwise(const Tensor& x, const char* name, Fwd fwd, Bwd dydx_from_xy) {
    const std::size_t n = static_cast<std::size_t>(x.numel());
    std::vector<double> out(n);
    const double* px = x.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(px[i]);
    const bool rg = grads_wanted({&x});
    Tensor y = make_tensor(x.shape(), std::move(out), rg);
    check_out_finite(y, name);
    if (rg) {
        StoragePtr xs = x.storage(), ys = y.storage();
        Tape::active().record([xs, ys, dydx_from_xy] {
            if (ys->grad.empty()) return;
            xs->ensure_grad();
            for (std::size_t i = 0; i < ys->grad.size(); ++i)
                xs->grad[i] +=
                    dydx_from_xy(xs->value[i], ys->value[i]) * ys->grad[i];
        });
    }
    return y;
}

}  // namespace

Tensor tanh(const Tensor& x) {
    return pointwise(
        x, "tanh", [](double v) { return std::tanh(v); },
        [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
    return pointwise(
        x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
    return pointwise(
        x, "sigmoid",
        [](double v) {
            return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                            : std::exp(v) / (1.0 + std::exp(v));
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor step(const Tensor& x) {
    const std::size_t n = static_cast<std::size_t>(x.numel());
    std::vector<double> out(n);
    const double* px = x.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = px[i] > 0.0 ? 1.0 : 0.0;
    // Derivative is zero almost everywhere; emitted detached.
    return make_tensor(x.shape(), std::move(out), false);
}

namespace {

// Value-ordered summation: permutation-invariant, slightly more accurate.
double sorted_sum(std::vector<double>& scratch) {
    std::sort(scratch.begin(), scratch.end());
    double acc = 0.0;
    for (double v : scratch) acc += v;
    return acc;
}

void softmax_row(const double* x, double* y, std::int64_t n,
                 std::vector<double>& scratch) {
    double mx = x[0];
    for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    scratch.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] - mx);
        scratch[static_cast<std::size_t>(i)] = y[i];
    }
    const double denom = sorted_sum(scratch);
    for (std::int64_t i = 0; i < n; ++i) y[i] /= denom;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
    if (x.ndim() == 2 && (axis == 0 || axis == -2))
        return transpose(softmax(transpose(x), -1));
    if (!(axis == -1 || axis == x.ndim() - 1))
        throw stan::ContractError("softmax: unsupported axis " +
                                  std::to_string(axis) + " for " +
                                  shape_str(x.shape()));
    const std::int64_t n = x.shape().back();
    const std::int64_t rows = x.numel() / n;
    std::vector<double> out(static_cast<std::size_t>(x.numel()));
    std::vector<double> scratch;
    const double* px = x.data();
    for (std::int64_t r = 0; r < rows; ++r)
        softmax_row(px + r * n, out.data() + r * n, n, scratch);
    const bool rg = grads_wanted({&x});
    Tensor y = make_tensor(x.shape(), std::move(out), rg);
    check_out_finite(y, "softmax");
    if (rg) {
        StoragePtr xs = x.storage(), ys = y.storage();
        Tape::active().record([xs, ys, rows, n] {
            if (ys->grad.empty()) return;
            xs->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* yv = ys->value.data() + r * n;
                const double* gy = ys->grad.data() + r * n;
                double dot = 0.0;
                for (std::int64_t i = 0; i < n; ++i) dot += yv[i] * gy[i];
                double* gx = xs->grad.data() + r * n;
                for (std::int64_t i = 0; i < n; ++i)
                    gx[i] += yv[i] * (gy[i] - dot);
            }
        });
    }
    return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
    const std::int64_t n = x.shape().back();
    if (gain.ndim() != 1 || gain.dim(0) != n || bias.ndim() != 1 ||
        bias.dim(0) != n)
        throw stan::ShapeError("layer_norm: affine params " +
                               shape_str(gain.shape()) + "/" +
                               shape_str(bias.shape()) +
                               " do not match last axis of " +
                               shape_str(x.shape()));
    const std::int64_t rows = x.numel() / n;
    std::vector<double> out(static_cast<std::size_t>(x.numel()));
    std::vector<double> normed(static_cast<std::size_t>(x.numel()));
    std::vector<double> inv_sigma(static_cast<std::size_t>(rows));
    const double* px = x.data();
    const double* pg = gain.data();
    const double* pb = bias.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * n;
        double mu = 0.0;
        for (std::int64_t i = 0; i < n; ++i) mu += xr[i];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            const double d = xr[i] - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[static_cast<std::size_t>(r)] = is;
        for (std::int64_t i = 0; i < n; ++i) {
            const double nv = (xr[i] - mu) * is;
            normed[static_cast<std::size_t>(r * n + i)] = nv;
            out[static_cast<std::size_t>(r * n + i)] = pg[i] * nv + pb[i];
        }
    }
    const bool rg = grads_wanted({&x, &gain, &bias});
    Tensor y = make_tensor(x.shape(), std::move(out), rg);
    check_out_finite(y, "layer_norm");
    if (rg) {
        StoragePtr xs = x.storage(), gs = gain.storage(), bs = bias.storage(),
                   ys = y.storage();
        auto captured_normed = std::make_shared<std::vector<double>>(std::move(normed));
        auto captured_is = std::make_shared<std::vector<double>>(std::move(inv_sigma));
        Tape::active().record([xs, gs, bs, ys, captured_normed, captured_is, rows,
                               n] {
            if (ys->grad.empty()) return;
            const std::vector<double>& nm = *captured_normed;
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* gy = ys->grad.data() + r * n;
                const double* nr = nm.data() + r * n;
                if (xs->requires_grad) {
                    xs->ensure_grad();
                    const double is = (*captured_is)[static_cast<std::size_t>(r)];
                    double mean_dyg = 0.0, mean_dyg_n = 0.0;
                    for (std::int64_t i = 0; i < n; ++i) {
                        const double dyg = gy[i] * gs->value[static_cast<std::size_t>(i)];
                        mean_dyg += dyg;
                        mean_dyg_n += dyg * nr[i];
                    }
                    mean_dyg /= static_cast<double>(n);
                    mean_dyg_n /= static_cast<double>(n);
                    double* gx = xs->grad.data() + r * n;
                    for (std::int64_t i = 0; i < n; ++i) {
                        const double dyg = gy[i] * gs->value[static_cast<std::size_t>(i)];
                        gx[i] += (dyg - mean_dyg - nr[i] * mean_dyg_n) * is;
                    }
                }
                if (gs->requires_grad) {
                    gs->ensure_grad();
                    for (std::int64_t i = 0; i < n; ++i)
                        gs->grad[static_cast<std::size_t>(i)] += gy[i] * nr[i];
                }
                if (bs->requires_grad) {
                    bs->ensure_grad();
                    for (std::int64_t i = 0; i < n; ++i)
                        bs->grad[static_cast<std::size_t>(i)] += gy[i];
                }
            }
        });
    }
    return y;
}

Tensor row(const Tensor& x, std::int64_t i) {
    if (x.ndim() != 2)
        throw stan::ShapeError("row: expects 2-D, got " + shape_str(x.shape()));
    if (i < 0 || i >= x.dim(0))
        throw stan::ContractError("row: index " + std::to_string(i) +
                                  " out of range for " + shape_str(x.shape()));
    const std::int64_t n = x.dim(1);
    std::vector<double> out(x.data() + i * n, x.data() + (i + 1) * n);
    const bool rg = grads_wanted({&x});
    Tensor y = make_tensor({n}, std::move(out), rg);
    if (rg) {
        StoragePtr xs = x.storage(), ys = y.storage();
        Tape::active().record([xs, ys, i, n] {
            if (ys->grad.empty()) return;
            xs->ensure_grad();
            for (std::int64_t j = 0; j < n; ++j)
                xs->grad[i * n + j] += ys->grad[static_cast<std::size_t>(j)];
        });
    }
    return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw stan::ShapeError("reshape: " + shape_str(x.shape()) +
                               " cannot become " + shape_str(shape));
    std::vector<double> out(x.data(), x.data() + x.numel());
    const bool rg = grads_wanted({&x});
    Tensor y = make_tensor(std::move(shape), std::move(out), rg);
    if (rg) {
        StoragePtr xs = x.storage(), ys = y.storage();
        Tape::active().record([xs, ys] {
            if (ys->grad.empty()) return;
            axpy_grad(xs, ys->grad);
        });
    }
    return y;
}

Tensor mean_cols(const Tensor& x) {
    if (x.ndim() != 2)
        throw stan::ShapeError("mean_cols: expects 2-D, got " +
                               shape_str(x.shape()));
    const std::int64_t r = x.dim(0), c = x.dim(1);
    std::vector<double> out(static_cast<std::size_t>(r));
    const double* px = x.data();
    for (std::int64_t i = 0; i < r; ++i) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < c; ++j) acc += px[i * c + j];
        out[static_cast<std::size_t>(i)] = acc / static_cast<double>(c);
    }
    const bool rg = grads_wanted({&x});
    Tensor y = make_tensor({r}, std::move(out), rg);
    check_out_finite(y, "mean_cols");
    if (rg) {
        StoragePtr xs = x.storage(), ys = y.storage();
        Tape::active().record([xs, ys, r, c] {
            if (ys->grad.empty()) return;
            xs->ensure_grad();
            const double inv = 1.0 / static_cast<double>(c);
            for (std::int64_t i = 0; i < r; ++i) {
                const double g = ys->grad[static_cast<std::size_t>(i)] * inv;
                for (std::int64_t j = 0; j < c; ++j) xs->grad[i * c + j] += g;
            }
        });
    }
    return y;
}

namespace {

Tensor reduce_all(const Tensor& x, const char* name, bool take_mean) {
    const std::size_t n = static_cast<std::size_t>(x.numel());
    const double* px = x.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += px[i];
    const double denom = take_mean ? static_cast<double>(n) : 1.0;
    const bool rg = grads_wanted({&x});
    Tensor y = make_tensor({1}, {acc / denom}, rg);
    check_out_finite(y, name);
    if (rg) {
        StoragePtr xs = x.storage(), ys = y.storage();
        Tape::active().record([xs, ys, denom] {
            if (ys->grad.empty()) return;
            xs->ensure_grad();
            const double g = ys->grad[0] / denom;
            for (double& gv : xs->grad) gv += g;
        });
    }
    return y;
}

}  // namespace

Tensor sum(const Tensor& x) { return reduce_all(x, "sum", false); }
Tensor mean(const Tensor& x) { return reduce_all(x, "mean", true); }

Tensor stack_rows(std::span<const Tensor> rows) {
    if (rows.empty()) throw stan::ContractError("stack_rows: empty input");
    const std::int64_t k = rows[0].numel();
    for (const Tensor& t : rows)
        if (t.ndim() != 1 || t.numel() != k)
            throw stan::ShapeError("stack_rows: inconsistent row " +
                                   shape_str(t.shape()));
    const std::int64_t n = static_cast<std::int64_t>(rows.size());
    std::vector<double> out(static_cast<std::size_t>(n * k));
    bool any_rg = false;
    for (std::int64_t i = 0; i < n; ++i) {
        std::memcpy(out.data() + i * k, rows[static_cast<std::size_t>(i)].data(),
                    static_cast<std::size_t>(k) * sizeof(double));
        any_rg = any_rg || rows[static_cast<std::size_t>(i)].requires_grad();
    }
    const bool rg = Tape::active().recording() && any_rg;
    Tensor y = make_tensor({n, k}, std::move(out), rg);
    if (rg) {
        std::vector<StoragePtr> srcs;
        srcs.reserve(rows.size());
        for (const Tensor& t : rows) srcs.push_back(t.storage());
        StoragePtr ys = y.storage();
        Tape::active().record([srcs, ys, k] {
            if (ys->grad.empty()) return;
            for (std::size_t i = 0; i < srcs.size(); ++i) {
                if (!srcs[i]->requires_grad) continue;
                srcs[i]->ensure_grad();
                for (std::int64_t j = 0; j < k; ++j)
                    srcs[i]->grad[static_cast<std::size_t>(j)] +=
                        ys->grad[i * static_cast<std::size_t>(k) +
                                 static_cast<std::size_t>(j)];
            }
        });
    }
    return y;
}

Tensor concat(std::span<const Tensor> parts) {
    if (parts.empty()) throw stan::ContractError("concat: empty input");
    std::int64_t total = 0;
    bool any_rg = false;
    for (const Tensor& t : parts) {
        if (t.ndim() != 1)
            throw stan::ShapeError("concat: expects 1-D parts, got " +
                                   shape_str(t.shape()));
        total += t.numel();
        any_rg = any_rg || t.requires_grad();
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(total));
    for (const Tensor& t : parts)
        out.insert(out.end(), t.data(), t.data() + t.numel());
    const bool rg = Tape::active().recording() && any_rg;
    Tensor y = make_tensor({total}, std::move(out), rg);
    if (rg) {
        std::vector<StoragePtr> srcs;
        srcs.reserve(parts.size());
        for (const Tensor& t : parts) srcs.push_back(t.storage());
        StoragePtr ys = y.storage();
        Tape::active().record([srcs, ys] {
            if (ys->grad.empty()) return;
            std::size_t off = 0;
            for (const StoragePtr& s : srcs) {
                if (s->requires_grad) {
                    s->ensure_grad();
                    for (std::size_t j = 0; j < s->value.size(); ++j)
                        s->grad[j] += ys->grad[off + j];
                }
                off += s->value.size();
            }
        });
    }
    return y;
}

Tensor weighted_sum(std::span<const Tensor> xs, const Tensor& w) {
    if (xs.empty()) throw stan::ContractError("weighted_sum: empty input");
    if (w.ndim() != 1 || w.dim(0) != static_cast<std::int64_t>(xs.size()))
        throw stan::ShapeError("weighted_sum: weight " + shape_str(w.shape()) +
                               " does not match " + std::to_string(xs.size()) +
                               " terms");
    const Shape& sh = xs[0].shape();
    for (const Tensor& t : xs) require_same_shape(xs[0], t, "weighted_sum");
    const std::size_t n = static_cast<std::size_t>(xs[0].numel());
    std::vector<double> out(n, 0.0);
    const double* pw = w.data();
    bool any_rg = w.requires_grad();
    for (std::size_t k = 0; k < xs.size(); ++k) {
        const double wv = pw[k];
        const double* px = xs[k].data();
        for (std::size_t i = 0; i < n; ++i) out[i] += wv * px[i];
        any_rg = any_rg || xs[k].requires_grad();
    }
    const bool rg = Tape::active().recording() && any_rg;
    Tensor y = make_tensor(sh, std::move(out), rg);
    check_out_finite(y, "weighted_sum");
    if (rg) {
        std::vector<StoragePtr> srcs;
        srcs.reserve(xs.size());
        for (const Tensor& t : xs) srcs.push_back(t.storage());
        StoragePtr ws = w.storage(), ys = y.storage();
        Tape::active().record([srcs, ws, ys] {
            if (ys->grad.empty()) return;
            for (std::size_t k = 0; k < srcs.size(); ++k) {
                if (srcs[k]->requires_grad) {
                    srcs[k]->ensure_grad();
                    const double wv = ws->value[k];
                    for (std::size_t i = 0; i < ys->grad.size(); ++i)
                        srcs[k]->grad[i] += wv * ys->grad[i];
                }
                if (ws->requires_grad) {
                    ws->ensure_grad();
                    double acc = 0.0;
                    for (std::size_t i = 0; i < ys->grad.size(); ++i)
                        acc += srcs[k]->value[i] * ys->grad[i];
                    ws->grad[k] += acc;
                }
            }
        });
    }
    return y;
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0)
        throw stan::ContractError("dropout: p must lie in [0,1), got " +
                                  std::to_string(p));
    if (p == 0.0) return x;
    const std::size_t n = static_cast<std::size_t>(x.numel());
    auto mask = std::make_shared<std::vector<double>>(n);
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> out(n);
    const double* px = x.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double m = rng.uniform() >= p ? keep_scale : 0.0;
        (*mask)[i] = m;
        out[i] = px[i] * m;
    }
    const bool rg = grads_wanted({&x});
    Tensor y = make_tensor(x.shape(), std::move(out), rg);
    if (rg) {
        StoragePtr xs = x.storage(), ys = y.storage();
        Tape::active().record([xs, ys, mask] {
            if (ys->grad.empty()) return;
            xs->ensure_grad();
            for (std::size_t i = 0; i < ys->grad.size(); ++i)
                xs->grad[i] += (*mask)[i] * ys->grad[i];
        });
    }
    return y;
}

Tensor avg_pool2d(const Tensor& x, std::int64_t pool) {
    if (x.ndim() != 3)
        throw stan::ShapeError("avg_pool2d: expects [c,h,w], got " +
                               shape_str(x.shape()));
    if (pool < 1) throw stan::ContractError("avg_pool2d: pool must be >= 1");
    const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::int64_t ph = std::min(pool, h), pw = std::min(pool, w);
    const std::int64_t oh = h / ph, ow = w / pw;
    const double inv = 1.0 / static_cast<double>(ph * pw);
    std::vector<double> out(static_cast<std::size_t>(c * oh * ow), 0.0);
    const double* px = x.data();
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t i = 0; i < oh; ++i)
            for (std::int64_t j = 0; j < ow; ++j) {
                double acc = 0.0;
                for (std::int64_t a = 0; a < ph; ++a)
                    for (std::int64_t b = 0; b < pw; ++b)
                        acc += px[(ci * h + i * ph + a) * w + j * pw + b];
                out[(ci * oh + i) * ow + j] = acc * inv;
            }
    const bool rg = grads_wanted({&x});
    Tensor y = make_tensor({c, oh, ow}, std::move(out), rg);
    if (rg) {
        StoragePtr xs = x.storage(), ys = y.storage();
        Tape::active().record([xs, ys, c, h, w, ph, pw, oh, ow, inv] {
            if (ys->grad.empty()) return;
            xs->ensure_grad();
            for (std::int64_t ci = 0; ci < c; ++ci)
                for (std::int64_t i = 0; i < oh; ++i)
                    for (std::int64_t j = 0; j < ow; ++j) {
                        const double g = ys->grad[(ci * oh + i) * ow + j] * inv;
                        for (std::int64_t a = 0; a < ph; ++a)
                            for (std::int64_t b = 0; b < pw; ++b)
                                xs->grad[(ci * h + i * ph + a) * w + j * pw + b] += g;
                    }
        });
    }
    return y;
}

Tensor sqrt_scalar(const Tensor& x) {
    if (x.numel() != 1)
        throw stan::ContractError("sqrt_scalar: expects scalar, got " +
                                  shape_str(x.shape()));
    const double v = x.item();
    if (v < 0.0)
        throw stan::NumericError("sqrt_scalar: negative operand " +
                                 std::to_string(v));
    const bool rg = grads_wanted({&x});
    Tensor y = make_tensor({1}, {std::sqrt(v)}, rg);
    if (rg) {
        StoragePtr xs = x.storage(), ys = y.storage();
        Tape::active().record([xs, ys] {
            if (ys->grad.empty()) return;
            xs->ensure_grad();
            const double denom = std::max(ys->value[0], 1e-150);
            xs->grad[0] += 0.5 / denom * ys->grad[0];
        });
    }
    return y;
}

Tensor bce_with_logits(const Tensor& logits, double target) {
    if (logits.ndim() != 1)
        throw stan::ShapeError("bce_with_logits: expects 1-D logits, got " +
                               shape_str(logits.shape()));
    if (target != 0.0 && target != 1.0)
        throw stan::ContractError("bce_with_logits: target must be 0 or 1");
    const std::int64_t n = logits.dim(0);
    const double* pz = logits.data();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double z = pz[i];
        // Stable form: max(z,0) - z*y + log(1 + exp(-|z|)).
        acc += std::max(z, 0.0) - z * target + std::log1p(std::exp(-std::abs(z)));
    }
    const double loss = acc / static_cast<double>(n);
    const bool rg = grads_wanted({&logits});
    Tensor y = make_tensor({1}, {loss}, rg);
    check_out_finite(y, "bce_with_logits");
    if (rg) {
        StoragePtr zs = logits.storage(), ys = y.storage();
        Tape::active().record([zs, ys, target, n] {
            if (ys->grad.empty()) return;
            zs->ensure_grad();
            const double g = ys->grad[0] / static_cast<double>(n);
            for (std::int64_t i = 0; i < n; ++i) {
                const double z = zs->value[static_cast<std::size_t>(i)];
                const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                                          : std::exp(z) / (1.0 + std::exp(z));
                zs->grad[static_cast<std::size_t>(i)] += (s - target) * g;
            }
        });
    }
    return y;
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw stan::ContractError("backward: loss must be a defined scalar");
    Tape& tape = Tape::active();
    if (tape.nodes_.empty())
        throw stan::ContractError("backward: tape is empty");
    loss.storage()->ensure_grad();
    loss.storage()->grad[0] = 1.0;
    for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) (*it)();
    tape.clear();
}

}  // namespace nd
