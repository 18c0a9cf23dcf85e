#ifndef MULTIFUSE_CONNECTOMICS_HPP
#define MULTIFUSE_CONNECTOMICS_HPP

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "multifuse/errors.hpp"
#include "multifuse/tensor.hpp"

namespace multifuse {

enum class MetricKind { Strength, Betweenness };

inline const char* to_string(MetricKind k) { return k == MetricKind::Strength ? "strength" : "betweenness"; }

namespace conn_detail {

template <class T>
std::size_t square_dim(const Tensor<T>& w, const char* op)
{
    if (w.rank() != 2 || w.dim(0) != w.dim(1)) {
        throw ContractError(std::string(op) + ": matrix must be square, got " + shape_str(w.shape()));
    }
    return w.dim(0);
}

} // namespace conn_detail

/// s_i = sum_{j != i} w_ij (signed, or |w_ij| with `absolute`).
template <class T>
std::vector<double> node_strength(const Tensor<T>& w, bool absolute = false)
{
    const std::size_t n = conn_detail::square_dim(w, "node_strength");
    std::vector<double> s(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double v = static_cast<double>(w[i * n + j]);
            s[i] += absolute ? std::abs(v) : v;
        }
    return s;
}

enum class DistanceTransform { Inverse, NegLog };

/// Brandes betweenness on an undirected weighted graph with edge length 1/w
/// (or -log(w / max w)); zero weights are absent edges. Unnormalized sum over
/// unordered pairs; `normalized` divides by (n-1)(n-2)/2.
template <class T>
std::vector<double> betweenness(const Tensor<T>& w, bool normalized = false,
                                DistanceTransform transform = DistanceTransform::Inverse)
{
    const std::size_t n = conn_detail::square_dim(w, "betweenness");
    double wmax = 0;
    for (std::size_t i = 0; i < n * n; ++i) {
        const double v = static_cast<double>(w[i]);
        if (v < 0) throw ContractError("betweenness: negative weight");
        wmax = std::max(wmax, v);
    }
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> len(n * n, inf);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double v = static_cast<double>(w[i * n + j]);
            if (i == j || v <= 0) continue;
            len[i * n + j] = transform == DistanceTransform::Inverse ? 1.0 / v : -std::log(v / wmax);
        }
    // NegLog maps the strongest edge to length 0; keep it strictly positive.
    if (transform == DistanceTransform::NegLog)
        for (auto& l : len)
            if (l == 0.0) l = 1e-12;

    auto same = [](double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(std::abs(a), std::abs(b)); };

    std::vector<double> bc(n, 0.0), dist(n), sigma(n), delta(n);
    std::vector<std::vector<std::size_t>> pred(n);
    std::vector<char> done(n);
    std::vector<std::size_t> order;
    for (std::size_t s = 0; s < n; ++s) {
        std::fill(dist.begin(), dist.end(), inf);
        std::fill(sigma.begin(), sigma.end(), 0.0);
        std::fill(delta.begin(), delta.end(), 0.0);
        std::fill(done.begin(), done.end(), 0);
        for (auto& p : pred) p.clear();
        order.clear();
        dist[s] = 0;
        sigma[s] = 1;
        // dense Dijkstra: graphs are small and complete-ish
        for (;;) {
            std::size_t u = n;
            for (std::size_t v = 0; v < n; ++v)
                if (!done[v] && dist[v] < inf && (u == n || dist[v] < dist[u])) u = v;
            if (u == n) break;
            done[u] = 1;
            order.push_back(u);
            for (std::size_t v = 0; v < n; ++v) {
                const double l = len[u * n + v];
                if (done[v] || l == inf) continue;
                const double nd = dist[u] + l;
                if (dist[v] < inf && same(nd, dist[v])) {
                    sigma[v] += sigma[u];
                    pred[v].push_back(u);
                } else if (nd < dist[v]) {
                    dist[v] = nd;
                    sigma[v] = sigma[u];
                    pred[v].assign(1, u);
                }
            }
        }
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            const std::size_t v = *it;
            for (std::size_t u : pred[v]) delta[u] += sigma[u] / sigma[v] * (1.0 + delta[v]);
            if (v != s) bc[v] += delta[v];
        }
    }
    const double scale = normalized && n > 2 ? 2.0 / static_cast<double>((n - 1) * (n - 2)) : 1.0;
    for (auto& b : bc) b *= 0.5 * scale; // each unordered pair was counted from both ends
    return bc;
}

} // namespace multifuse

#endif
