#ifndef MULTIFUSE_OPS_HPP
#define MULTIFUSE_OPS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "multifuse/compute_graph.hpp"
#include "multifuse/errors.hpp"
#include "multifuse/tensor.hpp"

namespace multifuse::ops {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <class T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <class T>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

template <class T>
MatMap<T> mat(std::span<T> s, std::size_t rows, std::size_t cols)
{
    return MatMap<T>(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <class T>
ConstMatMap<T> mat(std::span<const T> s, std::size_t rows, std::size_t cols)
{
    return ConstMatMap<T>(s.data(), static_cast<Eigen::Index>(rows),
                          static_cast<Eigen::Index>(cols));
}
template <class T>
VecMap<T> vec(std::span<T> s)
{
    return VecMap<T>(s.data(), static_cast<Eigen::Index>(s.size()));
}
template <class T>
ConstVecMap<T> vec(std::span<const T> s)
{
    return ConstVecMap<T>(s.data(), static_cast<Eigen::Index>(s.size()));
}

template <class T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op, const char* name)
{
    if (!t.defined() || t.rank() != rank) {
        throw ContractError(std::string(op) + ": " + name + " must have rank "
                            + std::to_string(rank)
                            + (t.defined() ? ", got " + shape_str(t.shape()) : ", got null"));
    }
}

template <class T>
Tensor<T> make_output(ComputeGraph<T>& g, Shape shape,
                      std::initializer_list<std::reference_wrapper<const Tensor<std::type_identity_t<T>>>> inputs)
{
    return Tensor<T>(std::move(shape), T(0), g.any_needs_grad(inputs));
}

inline std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride,
                                std::size_t pad, const char* op)
{
    const long long span = static_cast<long long>(in) + 2LL * static_cast<long long>(pad)
                           - static_cast<long long>(k);
    if (stride == 0 || span < 0) {
        throw ConfigError(std::string(op) + ": output dimension < 1 (input " + std::to_string(in)
                          + ", window " + std::to_string(k) + ", stride "
                          + std::to_string(stride) + ", padding " + std::to_string(pad) + ")");
    }
    return static_cast<std::size_t>(span) / stride + 1;
}

struct ConvGeometry {
    std::size_t c_in, d, h, w;
    std::size_t k, stride, pad;
    std::size_t od, oh, ow;
    std::size_t out_spatial() const { return od * oh * ow; }
    std::size_t patch() const { return c_in * k * k * k; }
};

// Valid output range [lo, hi) along one axis for kernel offset kk.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in, std::size_t kk,
                                                        std::size_t stride, std::size_t pad)
{
    std::size_t lo = 0;
    if (kk < pad) lo = (pad - kk + stride - 1) / stride;
    if (in + pad <= kk) return {0, 0};
    const std::size_t hi = std::min(out, (in + pad - kk - 1) / stride + 1);
    return {std::min(lo, hi), hi};
}

// cols[(c,kz,ky,kx), (oz,oy,ox)] = x[c, oz*s-p+kz, oy*s-p+ky, ox*s-p+kx] (0 outside),
// for output slices oz in [z0, z1); cols has (z1-z0)*oh*ow columns.
template <class T>
void im2col(const ConvGeometry& geo, const T* x, T* cols, std::size_t z0, std::size_t z1)
{
    const std::size_t P = (z1 - z0) * geo.oh * geo.ow;
    std::size_t row = 0;
    for (std::size_t c = 0; c < geo.c_in; ++c) {
        const T* xc = x + c * geo.d * geo.h * geo.w;
        for (std::size_t kz = 0; kz < geo.k; ++kz)
            for (std::size_t ky = 0; ky < geo.k; ++ky)
                for (std::size_t kx = 0; kx < geo.k; ++kx, ++row) {
                    T* dst = cols + row * P;
                    const auto [xlo, xhi] = valid_range(geo.ow, geo.w, kx, geo.stride, geo.pad);
                    for (std::size_t oz = z0; oz < z1; ++oz) {
                        const long long iz = static_cast<long long>(oz * geo.stride + kz)
                                             - static_cast<long long>(geo.pad);
                        for (std::size_t oy = 0; oy < geo.oh; ++oy) {
                            const long long iy = static_cast<long long>(oy * geo.stride + ky)
                                                 - static_cast<long long>(geo.pad);
                            T* d = dst + ((oz - z0) * geo.oh + oy) * geo.ow;
                            if (iz < 0 || iz >= static_cast<long long>(geo.d) || iy < 0
                                || iy >= static_cast<long long>(geo.h) || xlo >= xhi) {
                                std::fill(d, d + geo.ow, T(0));
                                continue;
                            }
                            const T* src = xc + (static_cast<std::size_t>(iz) * geo.h
                                                 + static_cast<std::size_t>(iy))
                                                    * geo.w;
                            const std::size_t off = kx + xlo * geo.stride - geo.pad;
                            std::fill(d, d + xlo, T(0));
                            if (geo.stride == 1) {
                                std::copy(src + off, src + off + (xhi - xlo), d + xlo);
                            } else {
                                for (std::size_t ox = xlo; ox < xhi; ++ox)
                                    d[ox] = src[off + (ox - xlo) * geo.stride];
                            }
                            std::fill(d + xhi, d + geo.ow, T(0));
                        }
                    }
                }
    }
}

template <class T>
void col2im_add(const ConvGeometry& geo, const T* cols, T* dx, std::size_t z0, std::size_t z1)
{
    const std::size_t P = (z1 - z0) * geo.oh * geo.ow;
    std::size_t row = 0;
    for (std::size_t c = 0; c < geo.c_in; ++c) {
        T* xc = dx + c * geo.d * geo.h * geo.w;
        for (std::size_t kz = 0; kz < geo.k; ++kz)
            for (std::size_t ky = 0; ky < geo.k; ++ky)
                for (std::size_t kx = 0; kx < geo.k; ++kx, ++row) {
                    const T* src = cols + row * P;
                    const auto [xlo, xhi] = valid_range(geo.ow, geo.w, kx, geo.stride, geo.pad);
                    if (xlo >= xhi) continue;
                    for (std::size_t oz = z0; oz < z1; ++oz) {
                        const long long iz = static_cast<long long>(oz * geo.stride + kz)
                                             - static_cast<long long>(geo.pad);
                        if (iz < 0 || iz >= static_cast<long long>(geo.d)) continue;
                        for (std::size_t oy = 0; oy < geo.oh; ++oy) {
                            const long long iy = static_cast<long long>(oy * geo.stride + ky)
                                                 - static_cast<long long>(geo.pad);
                            if (iy < 0 || iy >= static_cast<long long>(geo.h)) continue;
                            const T* s = src + ((oz - z0) * geo.oh + oy) * geo.ow;
                            T* d = xc + (static_cast<std::size_t>(iz) * geo.h
                                         + static_cast<std::size_t>(iy))
                                            * geo.w;
                            const std::size_t off = kx + xlo * geo.stride - geo.pad;
                            for (std::size_t ox = xlo; ox < xhi; ++ox)
                                d[off + (ox - xlo) * geo.stride] += s[ox];
                        }
                    }
                }
    }
}

// Output z-slices per tile so one tile of columns stays around 1 MiB.
template <class T>
std::size_t conv_tile_slices(const ConvGeometry& geo)
{
    const std::size_t per_slice = geo.patch() * geo.oh * geo.ow * sizeof(T);
    return std::clamp<std::size_t>((std::size_t(1) << 20) / std::max<std::size_t>(per_slice, 1), 1, geo.od);
}

// Y[c_out, P] (+)= K[c_out, R] * im2col(x), tiled over output slices.
template <class T>
void conv_forward_raw(const ConvGeometry& geo, const T* x, const T* K, std::size_t c_out, T* y,
                      bool accumulate)
{
    const std::size_t P = geo.out_spatial(), R = geo.patch();
    const std::size_t tz = conv_tile_slices<T>(geo), slice = geo.oh * geo.ow;
    AlignedVector<T> cols(R * tz * slice);
    auto Y = mat(std::span<T>(y, c_out * P), c_out, P);
    const auto Km = mat(std::span<const T>(K, c_out * R), c_out, R);
    for (std::size_t z0 = 0; z0 < geo.od; z0 += tz) {
        const std::size_t z1 = std::min(geo.od, z0 + tz), n = (z1 - z0) * slice;
        im2col(geo, x, cols.data(), z0, z1);
        auto block = Y.middleCols(static_cast<Eigen::Index>(z0 * slice), static_cast<Eigen::Index>(n));
        const auto C = mat(std::span<const T>(cols.data(), R * n), R, n);
        if (accumulate) block.noalias() += Km * C;
        else block.noalias() = Km * C;
    }
}

} // namespace detail

/// Sum of all entries, as a scalar.
template <class T>
Tensor<T> sum(ComputeGraph<T>& g, const Tensor<T>& x)
{
    auto out = detail::make_output(g, Shape{1}, {x});
    T acc = T(0);
    for (T v : x.data()) acc += v;
    out[0] = acc;
    return g.record("sum", out, {x}, [&g, x, out]() mutable {
        if (!g.needs_grad(x)) return;
        const T go = out.grad()[0];
        for (T& gx : x.grad()) gx += go;
    });
}

/// y = W x + b for a single sample.
template <class T>
Tensor<T> dense(ComputeGraph<T>& g, const Tensor<T>& x, const Tensor<T>& W, const Tensor<T>& b)
{
    detail::require_rank(W, 2, "dense", "W");
    detail::require_rank(b, 1, "dense", "b");
    const std::size_t n_out = W.dim(0), n_in = W.dim(1);
    if (x.size() != n_in || b.size() != n_out) {
        throw ContractError("dense: x " + shape_str(x.shape()) + ", W " + shape_str(W.shape())
                            + ", b " + shape_str(b.shape()) + " do not conform");
    }
    auto out = detail::make_output(g, Shape{n_out}, {x, W, b});
    detail::vec(out.data()).noalias() =
        detail::mat(W.data(), n_out, n_in) * detail::vec(x.data()) + detail::vec(b.data());
    return g.record("dense", out, {x, W, b}, [&g, x, W, b, out, n_in, n_out]() mutable {
        auto go = detail::vec(std::span<const T>(out.grad()));
        if (g.needs_grad(W)) {
            detail::mat(W.grad(), n_out, n_in).noalias() +=
                go * detail::vec(x.data()).transpose();
        }
        if (g.needs_grad(b)) detail::vec(b.grad()) += go;
        if (g.needs_grad(x)) {
            detail::vec(x.grad()).noalias() +=
                detail::mat(W.data(), n_out, n_in).transpose() * go;
        }
    });
}

/// Y = X W with X [n x k], W [k x m].
template <class T>
Tensor<T> matmul(ComputeGraph<T>& g, const Tensor<T>& X, const Tensor<T>& W)
{
    detail::require_rank(X, 2, "matmul", "X");
    detail::require_rank(W, 2, "matmul", "W");
    const std::size_t n = X.dim(0), k = X.dim(1), m = W.dim(1);
    if (W.dim(0) != k) {
        throw ContractError("matmul: " + shape_str(X.shape()) + " x " + shape_str(W.shape()));
    }
    auto out = detail::make_output(g, Shape{n, m}, {X, W});
    detail::mat(out.data(), n, m).noalias() =
        detail::mat(X.data(), n, k) * detail::mat(W.data(), k, m);
    return g.record("matmul", out, {X, W}, [&g, X, W, out, n, k, m]() mutable {
        auto go = detail::mat(std::span<const T>(out.grad()), n, m);
        if (g.needs_grad(W)) {
            detail::mat(W.grad(), k, m).noalias() += detail::mat(X.data(), n, k).transpose() * go;
        }
        if (g.needs_grad(X)) {
            detail::mat(X.grad(), n, k).noalias() += go * detail::mat(W.data(), k, m).transpose();
        }
    });
}

/// Y = M X where M [n x n] is a constant operator (adjacency, Laplacian).
template <class T>
Tensor<T> const_matmul(ComputeGraph<T>& g, const Tensor<T>& M, const Tensor<T>& X)
{
    detail::require_rank(M, 2, "const_matmul", "M");
    detail::require_rank(X, 2, "const_matmul", "X");
    const std::size_t r = M.dim(0), n = M.dim(1), f = X.dim(1);
    if (X.dim(0) != n) {
        throw ContractError("const_matmul: " + shape_str(M.shape()) + " x "
                            + shape_str(X.shape()));
    }
    auto out = detail::make_output(g, Shape{r, f}, {X});
    detail::mat(out.data(), r, f).noalias() =
        detail::mat(M.data(), r, n) * detail::mat(X.data(), n, f);
    return g.record("const_matmul", out, {X}, [&g, M, X, out, r, n, f]() mutable {
        if (!g.needs_grad(X)) return;
        detail::mat(X.grad(), n, f).noalias() +=
            detail::mat(M.data(), r, n).transpose()
            * detail::mat(std::span<const T>(out.grad()), r, f);
    });
}

/// alpha * a + beta * b, same shapes.
template <class T>
Tensor<T> axpby(ComputeGraph<T>& g, T alpha, const Tensor<T>& a, T beta, const Tensor<T>& b)
{
    if (a.shape() != b.shape()) {
        throw ContractError("axpby: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    auto out = detail::make_output(g, a.shape(), {a, b});
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * a[i] + beta * b[i];
    return g.record("axpby", out, {a, b}, [&g, alpha, a, beta, b, out]() mutable {
        auto go = out.grad();
        if (g.needs_grad(a)) {
            auto ga = a.grad();
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += alpha * go[i];
        }
        if (g.needs_grad(b)) {
            auto gb = b.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gb[i] += beta * go[i];
        }
    });
}

template <class T>
Tensor<T> add(ComputeGraph<T>& g, const Tensor<T>& a, const Tensor<T>& b)
{
    return axpby(g, T(1), a, T(1), b);
}

/// X [n x f] + b[f] broadcast over rows.
template <class T>
Tensor<T> add_row_bias(ComputeGraph<T>& g, const Tensor<T>& X, const Tensor<T>& b)
{
    detail::require_rank(X, 2, "add_row_bias", "X");
    const std::size_t n = X.dim(0), f = X.dim(1);
    if (b.size() != f) {
        throw ContractError("add_row_bias: bias " + shape_str(b.shape()) + " vs X "
                            + shape_str(X.shape()));
    }
    auto out = detail::make_output(g, X.shape(), {X, b});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < f; ++j) out[i * f + j] = X[i * f + j] + b[j];
    return g.record("add_row_bias", out, {X, b}, [&g, X, b, out, n, f]() mutable {
        auto go = out.grad();
        if (g.needs_grad(X)) {
            auto gx = X.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
        }
        if (g.needs_grad(b)) {
            auto gb = b.grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < f; ++j) gb[j] += go[i * f + j];
        }
    });
}

template <class T>
Tensor<T> relu(ComputeGraph<T>& g, const Tensor<T>& x)
{
    auto out = detail::make_output(g, x.shape(), {x});
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] < T(0) ? T(0) : x[i]; // NaN passes through
    return g.record("relu", out, {x}, [&g, x, out]() mutable {
        if (!g.needs_grad(x)) return;
        auto go = out.grad();
        std::vector<T> local(go.size());
        switch (g.relu_mode()) {
        case ReluBackwardMode::Standard:
            for (std::size_t i = 0; i < go.size(); ++i) local[i] = x[i] > T(0) ? go[i] : T(0);
            break;
        case ReluBackwardMode::Guided:
            for (std::size_t i = 0; i < go.size(); ++i)
                local[i] = (x[i] > T(0) && go[i] > T(0)) ? go[i] : T(0);
            break;
        case ReluBackwardMode::GuidedGradientOnly:
            for (std::size_t i = 0; i < go.size(); ++i) local[i] = go[i] > T(0) ? go[i] : T(0);
            break;
        }
        if (g.relu_hook()) g.relu_hook()(std::span<const T>(local));
        auto gx = x.grad();
        for (std::size_t i = 0; i < local.size(); ++i) gx[i] += local[i];
    });
}

/// Numerically stabilized softmax over a 1-D tensor.
template <class T>
Tensor<T> softmax(ComputeGraph<T>& g, const Tensor<T>& x)
{
    detail::require_rank(x, 1, "softmax", "x");
    auto out = detail::make_output(g, x.shape(), {x});
    const T mx = *std::max_element(x.data().begin(), x.data().end());
    T z = T(0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x[i] - mx);
        z += out[i];
    }
    for (std::size_t i = 0; i < x.size(); ++i) out[i] /= z;
    return g.record("softmax", out, {x}, [&g, x, out]() mutable {
        if (!g.needs_grad(x)) return;
        auto go = out.grad();
        T dot = T(0);
        for (std::size_t i = 0; i < go.size(); ++i) dot += go[i] * out[i];
        auto gx = x.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += out[i] * (go[i] - dot);
    });
}

/// Scalar loss  -weight * log softmax(logits)[target].
template <class T>
Tensor<T> weighted_cross_entropy(ComputeGraph<T>& g, const Tensor<T>& logits, std::size_t target,
                                 T weight)
{
    detail::require_rank(logits, 1, "weighted_cross_entropy", "logits");
    if (target >= logits.size()) {
        throw ContractError("weighted_cross_entropy: target " + std::to_string(target)
                            + " out of range");
    }
    auto out = detail::make_output(g, Shape{1}, {logits});
    const T mx = *std::max_element(logits.data().begin(), logits.data().end());
    T z = T(0);
    for (T v : logits.data()) z += std::exp(v - mx);
    const T lse = mx + std::log(z);
    out[0] = weight * (lse - logits[target]);
    return g.record("weighted_cross_entropy", out, {logits},
                    [&g, logits, target, weight, out, lse]() mutable {
                        if (!g.needs_grad(logits)) return;
                        const T go = out.grad()[0];
                        auto gl = logits.grad();
                        for (std::size_t i = 0; i < gl.size(); ++i) {
                            const T p = std::exp(logits[i] - lse);
                            gl[i] += go * weight * (p - (i == target ? T(1) : T(0)));
                        }
                    });
}

/// Single entry of x as a scalar (e.g. the target-class logit).
template <class T>
Tensor<T> select(ComputeGraph<T>& g, const Tensor<T>& x, std::size_t index)
{
    if (index >= x.size()) throw ContractError("select: index out of range");
    auto out = detail::make_output(g, Shape{1}, {x});
    out[0] = x[index];
    return g.record("select", out, {x}, [&g, x, index, out]() mutable {
        if (g.needs_grad(x)) x.grad()[index] += out.grad()[0];
    });
}

/// Same data, new shape (element count preserved).
template <class T>
Tensor<T> reshape(ComputeGraph<T>& g, const Tensor<T>& x, Shape shape)
{
    if (numel(shape) != x.size()) {
        throw ContractError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    auto out = detail::make_output(g, std::move(shape), {x});
    std::copy(x.data().begin(), x.data().end(), out.data().begin());
    return g.record("reshape", out, {x}, [&g, x, out]() mutable {
        if (!g.needs_grad(x)) return;
        auto gx = x.grad();
        auto go = out.grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
    });
}

/// Concatenate tensors into one flat vector.
template <class T>
Tensor<T> concat(ComputeGraph<T>& g, const std::vector<Tensor<T>>& parts)
{
    std::size_t total = 0;
    bool grad = false;
    for (const auto& p : parts) {
        total += p.size();
        grad = grad || g.needs_grad(p);
    }
    Tensor<T> out(Shape{total}, T(0), grad);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out.data().begin() + off);
        off += p.size();
    }
    if (!grad) return g.record_list("concat", out, parts, nullptr);
    return g.record_list("concat", out, parts, [&g, parts, out]() mutable {
        std::size_t o = 0;
        auto go = out.grad();
        for (auto& p : parts) {
            if (g.needs_grad(p)) {
                auto gp = p.grad();
                for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += go[o + i];
            }
            o += p.size();
        }
    });
}

/// 3-D cross-correlation. x [C_in, D, H, W], kernels [C_out, C_in, k, k, k], bias [C_out].
template <class T>
Tensor<T> conv3d(ComputeGraph<T>& g, const Tensor<T>& x, const Tensor<T>& kernels,
                 const Tensor<T>& bias, std::size_t stride, std::size_t padding)
{
    detail::require_rank(x, 4, "conv3d", "x");
    detail::require_rank(kernels, 5, "conv3d", "kernels");
    const std::size_t c_out = kernels.dim(0), k = kernels.dim(2);
    if (kernels.dim(1) != x.dim(0) || kernels.dim(3) != k || kernels.dim(4) != k
        || bias.size() != c_out) {
        throw ContractError("conv3d: x " + shape_str(x.shape()) + ", kernels "
                            + shape_str(kernels.shape()) + ", bias " + shape_str(bias.shape())
                            + " do not conform");
    }
    detail::ConvGeometry geo{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k, stride, padding, 0, 0, 0};
    geo.od = detail::conv_out_dim(geo.d, k, stride, padding, "conv3d");
    geo.oh = detail::conv_out_dim(geo.h, k, stride, padding, "conv3d");
    geo.ow = detail::conv_out_dim(geo.w, k, stride, padding, "conv3d");
    const std::size_t P = geo.out_spatial(), R = geo.patch();
    const std::size_t tz = detail::conv_tile_slices<T>(geo), slice = geo.oh * geo.ow;

    auto out = detail::make_output(g, Shape{c_out, geo.od, geo.oh, geo.ow}, {x, kernels, bias});
    auto Y = detail::mat(out.data(), c_out, P);
    detail::conv_forward_raw(geo, x.data().data(), kernels.data().data(), c_out, out.data().data(), false);
    for (std::size_t c = 0; c < c_out; ++c) Y.row(static_cast<Eigen::Index>(c)).array() += bias[c];

    if (!out.requires_grad()) return g.record("conv3d", out, {x, kernels, bias}, nullptr);
    return g.record("conv3d", out, {x, kernels, bias}, [&g, x, kernels, bias, out, geo, c_out, P, R, tz, slice]() mutable {
        auto go = detail::mat(std::span<const T>(out.grad()), c_out, P);
        if (g.needs_grad(bias)) {
            auto gb = bias.grad();
            for (std::size_t c = 0; c < c_out; ++c) gb[c] += go.row(static_cast<Eigen::Index>(c)).sum();
        }
        bool gk = g.needs_grad(kernels), gx = g.needs_grad(x);
        if (gx && geo.stride == 1 && geo.pad < geo.k) {
            // stride 1: dx is a correlation of the output gradient with flipped, transposed kernels
            const std::size_t k = geo.k, k3 = k * k * k;
            AlignedVector<T> flipped(geo.c_in * c_out * k3);
            auto kd = kernels.data();
            for (std::size_t o = 0; o < c_out; ++o)
                for (std::size_t i = 0; i < geo.c_in; ++i)
                    for (std::size_t t = 0; t < k3; ++t)
                        flipped[(i * c_out + o) * k3 + (k3 - 1 - t)] = kd[(o * geo.c_in + i) * k3 + t];
            detail::ConvGeometry back{c_out, geo.od, geo.oh, geo.ow, k, 1, k - 1 - geo.pad, geo.d, geo.h, geo.w};
            detail::conv_forward_raw(back, out.grad().data(), flipped.data(), geo.c_in, x.grad().data(), true);
            gx = false;
        }
        if (!gk && !gx) return;
        AlignedVector<T> cols(R * tz * slice);
        const auto Km = detail::mat(kernels.data(), c_out, R);
        for (std::size_t z0 = 0; z0 < geo.od; z0 += tz) {
            const std::size_t z1 = std::min(geo.od, z0 + tz), n = (z1 - z0) * slice;
            auto go_t = go.middleCols(static_cast<Eigen::Index>(z0 * slice), static_cast<Eigen::Index>(n));
            auto C = detail::mat(std::span<T>(cols.data(), R * n), R, n);
            if (gk) {
                detail::im2col(geo, x.data().data(), cols.data(), z0, z1);
                detail::mat(kernels.grad(), c_out, R).noalias() += go_t * C.transpose();
            }
            if (gx) {
                C.noalias() = Km.transpose() * go_t;
                detail::col2im_add(geo, cols.data(), x.grad().data(), z0, z1);
            }
        }
    });
}

/// Max pooling with floor semantics; ties go to the lowest linear index.
template <class T>
Tensor<T> maxpool3d(ComputeGraph<T>& g, const Tensor<T>& x, std::size_t window, std::size_t stride)
{
    detail::require_rank(x, 4, "maxpool3d", "x");
    const std::size_t C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (window == 0 || window > D || window > H || window > W) {
        throw ConfigError("maxpool3d: window " + std::to_string(window)
                          + " larger than a spatial dimension of " + shape_str(x.shape()));
    }
    const std::size_t od = detail::conv_out_dim(D, window, stride, 0, "maxpool3d");
    const std::size_t oh = detail::conv_out_dim(H, window, stride, 0, "maxpool3d");
    const std::size_t ow = detail::conv_out_dim(W, window, stride, 0, "maxpool3d");
    auto out = detail::make_output(g, Shape{C, od, oh, ow}, {x});
    std::vector<std::size_t> argmax(out.size());
    std::size_t o = 0;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t z = 0; z < od; ++z)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t xx = 0; xx < ow; ++xx, ++o) {
                    std::size_t best = ((c * D + z * stride) * H + y * stride) * W + xx * stride;
                    T bv = x[best];
                    for (std::size_t dz = 0; dz < window; ++dz)
                        for (std::size_t dy = 0; dy < window; ++dy)
                            for (std::size_t dx = 0; dx < window; ++dx) {
                                const std::size_t idx =
                                    ((c * D + z * stride + dz) * H + y * stride + dy) * W
                                    + xx * stride + dx;
                                if (x[idx] > bv || (std::isnan(x[idx]) && !std::isnan(bv))) {
                                    bv = x[idx];
                                    best = idx;
                                }
                            }
                    out[o] = bv;
                    argmax[o] = best;
                }
    return g.record("maxpool3d", out, {x}, [&g, x, out, argmax = std::move(argmax)]() mutable {
        if (!g.needs_grad(x)) return;
        auto gx = x.grad();
        auto go = out.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gx[argmax[i]] += go[i];
    });
}

} // namespace multifuse::ops

#endif
