#ifndef MULTIFUSE_STATS_HPP
#define MULTIFUSE_STATS_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "multifuse/errors.hpp"

namespace multifuse {

enum class MwuMethod { Auto, Exact, Normal };

struct MannWhitney {
    double u = 0;     // U of the first sample
    double p = 1;     // two-sided
    bool exact = false;
};

namespace stats_detail {

// counts[u] = number of orderings of n x's and m y's with U_x = u.
inline std::vector<double> u_distribution(std::size_t n, std::size_t m)
{
    // f[i][j][u] built incrementally: f(i,j,u) = f(i-1,j,u-j) + f(i,j-1,u)
    std::vector<std::vector<std::vector<double>>> f(n + 1, std::vector<std::vector<double>>(m + 1));
    for (std::size_t i = 0; i <= n; ++i)
        for (std::size_t j = 0; j <= m; ++j) {
            auto& cur = f[i][j];
            cur.assign(i * j + 1, 0.0);
            if (i == 0 || j == 0) {
                cur[0] = 1.0;
                continue;
            }
            const auto& a = f[i - 1][j];
            for (std::size_t u = 0; u < a.size(); ++u) cur[u + j] += a[u];
            const auto& b = f[i][j - 1];
            for (std::size_t u = 0; u < b.size(); ++u) cur[u] += b[u];
        }
    return f[n][m];
}

inline double median(std::vector<double> v)
{
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace stats_detail

/// Two-sided Mann-Whitney U. Exact null distribution when n + m <= 20 and the
/// pooled sample has no ties; otherwise the normal approximation with tie
/// correction and continuity correction. `method` forces one path; Exact
/// requires tie-free data.
inline MannWhitney mann_whitney(const std::vector<double>& x, const std::vector<double>& y,
                                MwuMethod method = MwuMethod::Auto)
{
    if (x.empty() || y.empty()) throw ContractError("mann_whitney: empty sample");
    const std::size_t n = x.size(), m = y.size(), N = n + m;
    MannWhitney r;
    for (double a : x)
        for (double b : y) r.u += a > b ? 1.0 : (a == b ? 0.5 : 0.0);

    std::vector<double> pooled(x);
    pooled.insert(pooled.end(), y.begin(), y.end());
    std::sort(pooled.begin(), pooled.end());
    double tie_term = 0;
    bool ties = false;
    for (std::size_t i = 0; i < N;) {
        std::size_t j = i;
        while (j < N && pooled[j] == pooled[i]) ++j;
        const double t = static_cast<double>(j - i);
        if (t > 1) ties = true;
        tie_term += t * t * t - t;
        i = j;
    }

    const double nm = static_cast<double>(n * m);
    if (method == MwuMethod::Exact && ties) throw ContractError("mann_whitney: exact path needs tie-free data");
    const bool exact = method == MwuMethod::Exact || (method == MwuMethod::Auto && N <= 20 && !ties);
    if (exact) {
        r.exact = true;
        const auto counts = stats_detail::u_distribution(n, m);
        const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
        const auto u = static_cast<std::size_t>(std::lround(r.u));
        double lo = 0, hi = 0;
        for (std::size_t k = 0; k < counts.size(); ++k) {
            if (k <= u) lo += counts[k];
            if (k >= u) hi += counts[k];
        }
        r.p = std::min(1.0, 2.0 * std::min(lo, hi) / total);
        return r;
    }
    const double Nd = static_cast<double>(N);
    const double var = nm / 12.0 * ((Nd + 1.0) - tie_term / (Nd * (Nd - 1.0)));
    if (var <= 0) {
        r.p = 1.0;
        return r;
    }
    const double z = std::max(0.0, std::abs(r.u - nm / 2.0) - 0.5) / std::sqrt(var);
    r.p = std::clamp(std::erfc(z / std::sqrt(2.0)), std::numeric_limits<double>::min(), 1.0);
    return r;
}

struct FdrResult {
    std::vector<double> adjusted;
    std::vector<bool> rejected;
};

/// Benjamini-Hochberg step-up adjustment.
inline FdrResult fdr_bh(const std::vector<double>& p, double alpha = 0.05)
{
    for (double v : p) {
        if (!(v > 0.0 && v <= 1.0)) throw ContractError("fdr_bh: p value outside (0,1]");
    }
    const std::size_t m = p.size();
    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
    FdrResult r{std::vector<double>(m), std::vector<bool>(m)};
    double run = 1.0;
    for (std::size_t k = m; k-- > 0;) {
        const double q = p[idx[k]] * static_cast<double>(m) / static_cast<double>(k + 1);
        run = std::min(run, q);
        r.adjusted[idx[k]] = std::clamp(run, p[idx[k]], 1.0); // q >= p despite rounding
    }
    for (std::size_t i = 0; i < m; ++i) r.rejected[i] = r.adjusted[i] <= alpha;
    return r;
}

struct Feature {
    std::string name;
    std::vector<double> values; // one per subject, parallel to the label vector
};

struct TestResult {
    std::string name;
    double u = 0;
    double p = 1;
    double p_fdr = 1;
    std::string direction; // "NEG>POS", "NEG<POS" or "n.s."
    std::size_t n_neg = 0, n_pos = 0;
    bool exact = false;
};

/// One Mann-Whitney test per feature (NEG sample first), BH-adjusted within
/// the given family. `is_pos[i]` is the class of subject i.
inline std::vector<TestResult> group_compare(const std::vector<Feature>& family, const std::vector<bool>& is_pos,
                                             double alpha = 0.05)
{
    std::vector<TestResult> out;
    std::vector<double> ps;
    for (const auto& f : family) {
        if (f.values.size() != is_pos.size()) {
            throw ContractError("group_compare: feature " + f.name + " length does not match labels");
        }
        std::vector<double> neg, pos;
        for (std::size_t i = 0; i < f.values.size(); ++i) (is_pos[i] ? pos : neg).push_back(f.values[i]);
        if (neg.empty() || pos.empty()) throw ContractError("group_compare: a class is empty");
        const auto mw = mann_whitney(neg, pos);
        TestResult t;
        t.name = f.name;
        t.u = mw.u;
        t.p = mw.p;
        t.exact = mw.exact;
        t.n_neg = neg.size();
        t.n_pos = pos.size();
        const double mn = stats_detail::median(neg), mp = stats_detail::median(pos);
        const double centre = static_cast<double>(neg.size() * pos.size()) / 2.0;
        const bool neg_higher = mn != mp ? mn > mp : mw.u > centre;
        t.direction = neg_higher ? "NEG>POS" : "NEG<POS";
        out.push_back(t);
        ps.push_back(mw.p);
    }
    if (out.empty()) return out;
    const auto fdr = fdr_bh(ps, alpha);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i].p_fdr = fdr.adjusted[i];
        if (!fdr.rejected[i]) out[i].direction = "n.s.";
    }
    return out;
}

} // namespace multifuse

#endif
