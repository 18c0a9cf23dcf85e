#ifndef MULTIFUSE_GRAPH_NN_HPP
#define MULTIFUSE_GRAPH_NN_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "multifuse/compute_graph.hpp"
#include "multifuse/errors.hpp"
#include "multifuse/ops.hpp"
#include "multifuse/tensor.hpp"

namespace multifuse {

enum class GraphKind { Functional, Structural };

/// Complete undirected weighted graph with a fixed node count.
template <class T>
struct ConnGraph {
    Tensor<T> weights;       // [n x n], symmetric, zero diagonal
    Tensor<T> node_features; // [n x f]

    std::size_t n_nodes() const { return weights.dim(0); }

    /// Graph with all-ones scalar node features, as fed to the network.
    static ConnGraph with_unit_features(Tensor<T> weights)
    {
        const std::size_t n = weights.dim(0);
        return ConnGraph{std::move(weights), Tensor<T>(Shape{n, 1}, T(1))};
    }
};

/// Check the connectivity-graph invariants; throws ContractError naming the violation.
template <class T>
void validate_graph(const Tensor<T>& w, GraphKind kind, double sym_tol = 1e-9)
{
    if (w.rank() != 2 || w.dim(0) != w.dim(1)) {
        throw ContractError("graph: weights must be square, got " + shape_str(w.shape()));
    }
    const std::size_t n = w.dim(0);
    for (std::size_t i = 0; i < n; ++i) {
        if (w[i * n + i] != T(0)) {
            throw ContractError("graph: nonzero diagonal at node " + std::to_string(i));
        }
        for (std::size_t j = 0; j < n; ++j) {
            const T v = w[i * n + j];
            if (std::abs(static_cast<double>(v - w[j * n + i])) > sym_tol) {
                throw ContractError("graph: asymmetric weights at (" + std::to_string(i) + ","
                                    + std::to_string(j) + ")");
            }
            if (kind == GraphKind::Functional && (v < T(-1) || v > T(1))) {
                throw ContractError("graph: functional weight outside [-1,1]");
            }
            if (kind == GraphKind::Structural && v < T(0)) {
                throw ContractError("graph: negative structural weight");
            }
        }
    }
}

/// L = I - D^{-1/2} A D^{-1/2}; zero-degree nodes keep an identity row.
template <class T>
Tensor<T> normalized_laplacian(const Tensor<T>& A)
{
    if (A.rank() != 2 || A.dim(0) != A.dim(1)) {
        throw ContractError("normalized_laplacian: adjacency must be square");
    }
    const std::size_t n = A.dim(0);
    std::vector<T> dinv(n, T(0));
    for (std::size_t i = 0; i < n; ++i) {
        T d = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            const T v = A[i * n + j];
            if (v < T(0)) {
                throw ContractError("normalized_laplacian: negative weight at ("
                                    + std::to_string(i) + "," + std::to_string(j) + ")");
            }
            d += v;
        }
        dinv[i] = d > T(0) ? T(1) / std::sqrt(d) : T(0);
    }
    Tensor<T> L(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            L[i * n + j] = (i == j ? T(1) : T(0)) - dinv[i] * A[i * n + j] * dinv[j];
    return L;
}

template <class T>
Tensor<T> normalized_laplacian(const ConnGraph<T>& g)
{
    return normalized_laplacian(g.weights);
}

/// Largest eigenvalue of a symmetric matrix.
template <class T>
T largest_eigenvalue(const Tensor<T>& M)
{
    const std::size_t n = M.dim(0);
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic> m(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = M[i * n + j];
    Eigen::SelfAdjointEigenSolver<decltype(m)> es(m, Eigen::EigenvaluesOnly);
    return static_cast<T>(es.eigenvalues().maxCoeff());
}

/// L_hat = (2 / lambda_max) L - I.
template <class T>
Tensor<T> scaled_laplacian(const Tensor<T>& L, T lambda_max)
{
    if (!(lambda_max > T(0))) throw ConfigError("scaled_laplacian: lambda_max must be > 0");
    const std::size_t n = L.dim(0);
    Tensor<T> out(Shape{n, n});
    const T s = T(2) / lambda_max;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out[i * n + j] = s * L[i * n + j] - (i == j ? T(1) : T(0));
    return out;
}

/// Divide structural counts by the subject's maximum so weights lie in [0, 1].
template <class T>
Tensor<T> rescale_to_unit_max(const Tensor<T>& w)
{
    Tensor<T> out = w.detached();
    T mx = T(0);
    for (T v : out.data()) mx = std::max(mx, v);
    if (mx > T(0)) {
        for (T& v : out.data()) v /= mx;
    }
    return out;
}

/// Chebyshev filter bank: K coefficient matrices theta_k [f_in x f_out], optional bias.
template <class T>
struct ChebFilterBank {
    std::vector<Tensor<T>> theta;
    Tensor<T> bias; // may be undefined
    T lambda_max = T(2);

    std::size_t order() const { return theta.size(); }
};

/// X' = sum_k T_k(L_hat) X theta_k with the three-term recurrence applied to X.
template <class T>
Tensor<T> cheb_conv(ComputeGraph<T>& g, const Tensor<T>& L_hat, const Tensor<T>& X,
                    const ChebFilterBank<T>& filt)
{
    const std::size_t K = filt.order();
    if (K < 1) throw ConfigError("cheb_conv: K must be >= 1");
    const std::size_t f_in = filt.theta[0].dim(0), f_out = filt.theta[0].dim(1);
    for (const auto& th : filt.theta) {
        if (th.rank() != 2 || th.dim(0) != f_in || th.dim(1) != f_out) {
            throw ConfigError("cheb_conv: theta matrices must share shape");
        }
    }
    if (X.rank() != 2 || X.dim(1) != f_in || X.dim(0) != L_hat.dim(0)) {
        throw ContractError("cheb_conv: node features " + shape_str(X.shape())
                            + " do not match operator " + shape_str(L_hat.shape())
                            + " and f_in " + std::to_string(f_in));
    }
    Tensor<T> z_prev = X;
    Tensor<T> out = ops::matmul(g, X, filt.theta[0]);
    if (K > 1) {
        Tensor<T> z = ops::const_matmul(g, L_hat, X);
        out = ops::add(g, out, ops::matmul(g, z, filt.theta[1]));
        for (std::size_t k = 2; k < K; ++k) {
            Tensor<T> z_next =
                ops::axpby(g, T(2), ops::const_matmul(g, L_hat, z), T(-1), z_prev);
            out = ops::add(g, out, ops::matmul(g, z_next, filt.theta[k]));
            z_prev = z;
            z = z_next;
        }
    }
    if (filt.bias.defined()) out = ops::add_row_bias(g, out, filt.bias);
    return out;
}

/// Convenience form: builds L_hat from the graph's (nonnegative) weights.
template <class T>
Tensor<T> cheb_conv(ComputeGraph<T>& g, const ConnGraph<T>& graph, const ChebFilterBank<T>& filt)
{
    if (filt.order() < 1) throw ConfigError("cheb_conv: K must be >= 1");
    return cheb_conv(g, scaled_laplacian(normalized_laplacian(graph.weights), filt.lambda_max),
                     graph.node_features, filt);
}

/// Weighted message passing: X' = X W1 + A X W2 + b with signed adjacency A.
template <class T>
Tensor<T> graph_conv(ComputeGraph<T>& g, const Tensor<T>& A, const Tensor<T>& X,
                     const Tensor<T>& W1, const Tensor<T>& W2, const Tensor<T>& b)
{
    if (W1.shape() != W2.shape() || W1.rank() != 2 || b.size() != W1.dim(1)) {
        throw ContractError("graph_conv: W1 " + shape_str(W1.shape()) + ", W2 "
                            + shape_str(W2.shape()) + ", b " + shape_str(b.shape())
                            + " do not conform");
    }
    if (X.rank() != 2 || X.dim(0) != A.dim(0) || X.dim(1) != W1.dim(0)) {
        throw ContractError("graph_conv: node features " + shape_str(X.shape())
                            + " vs adjacency " + shape_str(A.shape()) + " and W "
                            + shape_str(W1.shape()));
    }
    Tensor<T> root = ops::matmul(g, X, W1);
    Tensor<T> msg = ops::matmul(g, ops::const_matmul(g, A, X), W2);
    return ops::add_row_bias(g, ops::add(g, root, msg), b);
}

template <class T>
Tensor<T> graph_conv(ComputeGraph<T>& g, const ConnGraph<T>& graph, const Tensor<T>& W1,
                     const Tensor<T>& W2, const Tensor<T>& b)
{
    return graph_conv(g, graph.weights, graph.node_features, W1, W2, b);
}

} // namespace multifuse

#endif
