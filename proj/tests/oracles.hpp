#ifndef MULTIFUSE_TESTS_ORACLES_HPP
#define MULTIFUSE_TESTS_ORACLES_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

namespace multifuse::testing {

// Two-sided Mann-Whitney p by enumerating every split of the pooled sample.
inline double mwu_permutation_p(const std::vector<double>& x, const std::vector<double>& y)
{
    std::vector<double> pooled(x);
    pooled.insert(pooled.end(), y.begin(), y.end());
    const std::size_t n = x.size(), N = pooled.size();
    auto u_of = [&](const std::vector<char>& in_x) {
        double u = 0;
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < N; ++j)
                if (in_x[i] && !in_x[j]) u += pooled[i] > pooled[j] ? 1.0 : pooled[i] == pooled[j] ? 0.5 : 0.0;
        return u;
    };
    std::vector<char> obs(N, 0);
    std::fill(obs.begin(), obs.begin() + static_cast<long>(n), 1);
    const double mu = static_cast<double>(n * (N - n)) / 2.0;
    const double d_obs = std::abs(u_of(obs) - mu);

    std::vector<char> mask(N, 0);
    std::fill(mask.end() - static_cast<long>(n), mask.end(), 1);
    double hits = 0, total = 0;
    do {
        total += 1;
        if (std::abs(u_of(mask) - mu) >= d_obs - 1e-9) hits += 1;
    } while (std::next_permutation(mask.begin(), mask.end()));
    return hits / total;
}

// BH adjusted values straight from the definition q_i = min_{j: p_j >= p_i} p_j m / rank_j.
inline std::vector<double> bh_oracle(const std::vector<double>& p)
{
    const std::size_t m = p.size();
    std::vector<double> sorted(p);
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> q(m);
    for (std::size_t i = 0; i < m; ++i) {
        double best = 1.0;
        for (std::size_t r = 0; r < m; ++r)
            if (sorted[r] >= p[i]) best = std::min(best, sorted[r] * static_cast<double>(m) / static_cast<double>(r + 1));
        q[i] = best;
    }
    return q;
}

// Betweenness by listing every simple path; length of edge (i,j) is 1/w_ij.
inline std::vector<double> betweenness_bruteforce(const std::vector<double>& w, std::size_t n)
{
    std::vector<double> bc(n, 0.0);
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t t = s + 1; t < n; ++t) {
            std::vector<std::pair<double, std::vector<std::size_t>>> paths;
            std::vector<std::size_t> cur{s};
            std::vector<char> seen(n, 0);
            seen[s] = 1;
            std::function<void(std::size_t, double)> dfs = [&](std::size_t u, double len) {
                if (u == t) {
                    paths.emplace_back(len, cur);
                    return;
                }
                for (std::size_t v = 0; v < n; ++v) {
                    if (seen[v] || w[u * n + v] <= 0) continue;
                    seen[v] = 1;
                    cur.push_back(v);
                    dfs(v, len + 1.0 / w[u * n + v]);
                    cur.pop_back();
                    seen[v] = 0;
                }
            };
            dfs(s, 0.0);
            if (paths.empty()) continue;
            double best = std::numeric_limits<double>::infinity();
            for (const auto& p : paths) best = std::min(best, p.first);
            std::vector<double> through(n, 0.0);
            double count = 0;
            for (const auto& p : paths) {
                if (std::abs(p.first - best) > 1e-12 * best) continue;
                count += 1;
                for (std::size_t k = 1; k + 1 < p.second.size(); ++k) through[p.second[k]] += 1;
            }
            for (std::size_t v = 0; v < n; ++v) bc[v] += through[v] / count;
        }
    return bc;
}

} // namespace multifuse::testing

#endif
