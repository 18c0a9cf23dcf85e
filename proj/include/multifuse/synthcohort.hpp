#ifndef MULTIFUSE_SYNTHCOHORT_HPP
#define MULTIFUSE_SYNTHCOHORT_HPP

// Seeded synthetic cohort: gray-matter volumes, functional connectivity
// (correlation) matrices and structural streamline-count matrices with
// planted group effects, plus a Voronoi atlas.
//
// Each planted feature carries a per-modality latent score
//   z = sqrt(rho) * u + sqrt(1 - rho) * e + d * y
// (u shared by the planted features of one modality, e per feature, y = 1
// for POS), so effects are split across modalities and independent between
// them.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "multifuse/errors.hpp"
#include "multifuse/mmt1.hpp"
#include "multifuse/rng.hpp"
#include "multifuse/tensor.hpp"

namespace multifuse {

using json = nlohmann::json;
using Dims3 = std::array<std::size_t, 3>;

enum class Label : int { Neg = 0, Pos = 1 };

inline const char* to_string(Label l) { return l == Label::Pos ? "POS" : "NEG"; }

inline Label parse_label(const std::string& s)
{
    if (s == "POS") return Label::Pos;
    if (s == "NEG") return Label::Neg;
    throw LoadError(LoadError::Kind::Malformed, "cohort: unknown label '" + s + "'");
}

struct EffectSpec {
    std::vector<int> gm_rois{5, 11, 14, 22, 33, 38, 45, 52}; // atlas labels (1-based)
    double gm_delta = 1.5;                                    // Cohen's d on the latent
    std::vector<int> fnc_nodes{4, 17, 30, 41};                // 0-based node indices
    double fnc_delta = 1.5;
    std::vector<int> sc_nodes{10, 26, 47, 63};
    double sc_delta = 1.5;
    double within_corr = 0.7; // rho: shared fraction among one modality's planted features

    static EffectSpec none()
    {
        EffectSpec e;
        e.gm_delta = e.fnc_delta = e.sc_delta = 0.0;
        return e;
    }
};

struct CohortParams {
    std::uint64_t seed = 0;
    std::size_t n_neg = 185;
    std::size_t n_pos = 133;
    Dims3 shape{32, 32, 32};
    std::size_t n_rois = 56;
    std::size_t fnc_nodes = 53;
    std::size_t sc_nodes = 84;
    double abeta_cutoff = 980.0;
    EffectSpec effect;
};

inline constexpr int kGeneratorVersion = 1;

// ---------------------------------------------------------------- naming

inline std::vector<std::string> roi_names(std::size_t n)
{
    static const char* base[] = {"Accumbens", "Amygdala", "Caudate", "Hippocampus", "Pallidum",
                                 "Putamen", "Thalamus", "VentralDC", "Cerebellum",
                                 "Precentral", "Postcentral", "SuperiorFrontal", "MiddleFrontal",
                                 "InferiorFrontal", "Orbitofrontal", "Insula", "SuperiorTemporal",
                                 "MiddleTemporal", "InferiorTemporal", "Fusiform",
                                 "Parahippocampal", "Precuneus", "PosteriorCingulate",
                                 "AnteriorCingulate", "SuperiorParietal", "InferiorParietal",
                                 "Supramarginal", "Lingual"};
    std::vector<std::string> out;
    if (n == 56) {
        for (const char* side : {"_L", "_R"})
            for (const char* b : base) out.push_back(std::string(b) + side);
        return out;
    }
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back("ROI" + std::string(i + 1 < 10 ? "0" : "") + std::to_string(i + 1));
    }
    return out;
}

inline std::vector<std::string> fnc_node_names(std::size_t n)
{
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back("IC" + std::string(i + 1 < 10 ? "0" : "") + std::to_string(i + 1));
    }
    return out;
}

inline std::vector<std::string> sc_node_names(std::size_t n)
{
    static const char* dk[] = {"BSTS", "CACG", "CMFG", "CU",    "EC",   "FG",   "IPG",  "ITG",
                               "ICG",  "LOG",  "LOFG", "LG",    "MOFG", "MTG",  "PHIG", "PCG",
                               "POP",  "POR",  "PTR",  "PCAL",  "PoCG", "PCC",  "PrCG", "PCU",
                               "RACG", "RMFG", "SFG",  "SPG",   "STG",  "SMG",  "FP",   "TP",
                               "TTG",  "IN",   "THAL", "CAUD",  "PUT",  "PAL",  "HIPP", "AMYG",
                               "ACCU", "CER"};
    std::vector<std::string> out;
    if (n == 84) {
        for (const char* side : {"L.", "R."})
            for (const char* b : dk) out.push_back(std::string(side) + b);
        return out;
    }
    for (std::size_t i = 0; i < n; ++i) out.push_back("N" + std::to_string(i + 1));
    return out;
}

// ---------------------------------------------------------------- atlas

struct AtlasVolume {
    Dims3 shape{};
    std::vector<std::int32_t> labels; // 0 = background, 1..n_rois
    std::size_t n_rois = 0;
    std::vector<std::string> names;   // names[r - 1] for label r

    std::size_t voxels() const { return shape[0] * shape[1] * shape[2]; }

    std::vector<std::size_t> voxel_counts() const
    {
        std::vector<std::size_t> c(n_rois + 1, 0);
        for (auto l : labels) ++c[static_cast<std::size_t>(l)];
        return c;
    }
};

namespace synth_detail {

inline double ellipsoid_radius2(const Dims3& shape, std::size_t z, std::size_t y, std::size_t x)
{
    double r = 0;
    const std::size_t idx[3] = {z, y, x};
    const double axes[3] = {0.42, 0.46, 0.40};
    for (int a = 0; a < 3; ++a) {
        const double c = (static_cast<double>(shape[a]) - 1.0) / 2.0;
        const double s = axes[a] * static_cast<double>(shape[a]);
        const double d = (static_cast<double>(idx[a]) - c) / s;
        r += d * d;
    }
    return r;
}

inline std::vector<std::uint8_t> brain_mask(const Dims3& shape)
{
    std::vector<std::uint8_t> m(shape[0] * shape[1] * shape[2]);
    std::size_t i = 0;
    for (std::size_t z = 0; z < shape[0]; ++z)
        for (std::size_t y = 0; y < shape[1]; ++y)
            for (std::size_t x = 0; x < shape[2]; ++x, ++i) m[i] = ellipsoid_radius2(shape, z, y, x) <= 1.0;
    return m;
}

// In-place separable 3-tap box blur, repeated `passes` times, with edge clamping.
inline void box_blur(std::vector<double>& f, const Dims3& s, int passes)
{
    std::vector<double> tmp(f.size());
    const std::size_t strides[3] = {s[1] * s[2], s[2], 1};
    for (int p = 0; p < passes; ++p) {
        for (int axis = 0; axis < 3; ++axis) {
            const std::size_t n = s[axis], st = strides[axis];
            for (std::size_t i = 0; i < f.size(); ++i) {
                const std::size_t pos = (i / st) % n;
                const double a = f[pos > 0 ? i - st : i];
                const double b = f[pos + 1 < n ? i + st : i];
                tmp[i] = (a + f[i] + b) / 3.0;
            }
            f.swap(tmp);
        }
    }
}

inline std::vector<double> smooth_noise(Rng& rng, const Dims3& s, int passes)
{
    std::vector<double> f(s[0] * s[1] * s[2]);
    for (auto& v : f) v = rng.normal();
    box_blur(f, s, passes);
    double ss = 0;
    for (double v : f) ss += v * v;
    const double sd = std::sqrt(ss / static_cast<double>(f.size()));
    if (sd > 0)
        for (auto& v : f) v /= sd;
    return f;
}

// Domain sizes of a 53-component functional parcellation; scaled for other n.
inline std::vector<int> fnc_networks(std::size_t n)
{
    static const int sizes[] = {5, 2, 9, 9, 17, 7, 4};
    std::vector<int> net;
    if (n == 53) {
        for (int d = 0; d < 7; ++d)
            for (int k = 0; k < sizes[d]; ++k) net.push_back(d);
        return net;
    }
    for (std::size_t i = 0; i < n; ++i) net.push_back(static_cast<int>(i * 7 / n));
    return net;
}

inline double lognormal_from_moments(Rng& rng, double mean, double sd)
{
    const double s2 = std::log(1.0 + (sd * sd) / (mean * mean));
    return std::exp(std::log(mean) - s2 / 2.0 + std::sqrt(s2) * rng.normal());
}

inline double round1(double v) { return std::round(v * 10.0) / 10.0; }

} // namespace synth_detail

/// Voronoi partition of an ellipsoidal brain mask; left-half sites get the
/// "_L" names, right-half sites "_R".
inline AtlasVolume generate_atlas(std::uint64_t seed, const Dims3& shape, std::size_t n_rois = 56)
{
    const std::size_t nvox = shape[0] * shape[1] * shape[2];
    if (n_rois == 0 || n_rois > nvox / 8) {
        throw ConfigError("atlas: n_rois must be in 1..voxels/8");
    }
    const auto mask = synth_detail::brain_mask(shape);
    std::vector<std::size_t> inside;
    for (std::size_t i = 0; i < nvox; ++i)
        if (mask[i]) inside.push_back(i);
    if (inside.size() < n_rois) throw ConfigError("atlas: brain mask smaller than n_rois");

    auto coord = [&](std::size_t i) {
        return std::array<double, 3>{static_cast<double>(i / (shape[1] * shape[2])),
                                     static_cast<double>((i / shape[2]) % shape[1]),
                                     static_cast<double>(i % shape[2])};
    };
    const double cx = (static_cast<double>(shape[2]) - 1.0) / 2.0;
    Rng rng(derive_seed(seed, "atlas"));
    double r_min = 0.8 * std::cbrt(static_cast<double>(inside.size()) / static_cast<double>(n_rois));
    std::vector<std::size_t> sites;
    std::set<std::size_t> used;
    std::size_t failures = 0;
    while (sites.size() < n_rois) {
        const bool left = sites.size() < n_rois / 2;
        const std::size_t cand = inside[rng.below(inside.size())];
        const auto c = coord(cand);
        bool ok = !used.count(cand) && (n_rois == 1 || (left ? c[2] < cx : c[2] >= cx));
        for (std::size_t s : sites) {
            if (!ok) break;
            const auto o = coord(s);
            const double d2 = (c[0] - o[0]) * (c[0] - o[0]) + (c[1] - o[1]) * (c[1] - o[1])
                              + (c[2] - o[2]) * (c[2] - o[2]);
            ok = d2 >= r_min * r_min;
        }
        if (ok) {
            sites.push_back(cand);
            used.insert(cand);
            failures = 0;
        } else if (++failures > 2000) {
            r_min *= 0.9;
            failures = 0;
        }
    }

    AtlasVolume atlas;
    atlas.shape = shape;
    atlas.n_rois = n_rois;
    atlas.names = roi_names(n_rois);
    atlas.labels.assign(nvox, 0);
    std::vector<std::array<double, 3>> sc;
    for (auto s : sites) sc.push_back(coord(s));
    for (std::size_t i : inside) {
        const auto c = coord(i);
        std::size_t best = 0;
        double bd = 1e300;
        for (std::size_t k = 0; k < sc.size(); ++k) {
            const double d2 = (c[0] - sc[k][0]) * (c[0] - sc[k][0]) + (c[1] - sc[k][1]) * (c[1] - sc[k][1])
                              + (c[2] - sc[k][2]) * (c[2] - sc[k][2]);
            if (d2 < bd) {
                bd = d2;
                best = k;
            }
        }
        atlas.labels[i] = static_cast<std::int32_t>(best + 1);
    }
    return atlas;
}

// ---------------------------------------------------------------- records

struct SubjectRecord {
    std::string id;
    Label label = Label::Neg;
    double age = 0;
    std::string sex;
    double mmse = 0;
    double abeta42 = 0;
    std::string gm_path, fnc_path, sc_path; // relative to the cohort root
};

template <class T>
struct SubjectData {
    Tensor<T> gm;  // [D, H, W]
    Tensor<T> fnc; // [n, n], unit diagonal as stored
    Tensor<T> sc;  // [n, n] counts
};

struct Cohort {
    std::filesystem::path root;
    json manifest;
    CohortParams params;
    AtlasVolume atlas;
    std::vector<std::string> fnc_names, sc_names;
    std::vector<SubjectRecord> subjects;
    std::vector<SubjectData<float>> data; // parallel to subjects; empty if payloads not loaded

    std::vector<Label> labels() const
    {
        std::vector<Label> l;
        for (const auto& s : subjects) l.push_back(s.label);
        return l;
    }
    std::size_t count(Label l) const
    {
        return static_cast<std::size_t>(std::count_if(subjects.begin(), subjects.end(),
                                                      [&](const SubjectRecord& s) { return s.label == l; }));
    }
};

inline void validate_params(const CohortParams& p)
{
    if (p.n_neg < 10 || p.n_pos < 10) throw ConfigError("generate: n_neg and n_pos must be >= 10");
    for (auto d : p.shape)
        if (d < 16) throw ConfigError("generate: volume shape must be >= 16 per axis");
    if (p.n_rois == 0 || p.n_rois > p.shape[0] * p.shape[1] * p.shape[2] / 8) {
        throw ConfigError("generate: n_rois must be in 1..voxels/8");
    }
    if (p.fnc_nodes < 2 || p.sc_nodes < 2) throw ConfigError("generate: graphs need >= 2 nodes");
    auto check = [](const std::vector<int>& ids, int lo, int hi, const char* what) {
        std::set<int> seen;
        for (int v : ids) {
            if (v < lo || v > hi) {
                throw ConfigError(std::string("generate: ") + what + " id " + std::to_string(v)
                                  + " outside " + std::to_string(lo) + ".." + std::to_string(hi));
            }
            if (!seen.insert(v).second) throw ConfigError(std::string("generate: duplicate ") + what + " id");
        }
    };
    check(p.effect.gm_rois, 1, static_cast<int>(p.n_rois), "gm_rois");
    check(p.effect.fnc_nodes, 0, static_cast<int>(p.fnc_nodes) - 1, "fnc_nodes");
    check(p.effect.sc_nodes, 0, static_cast<int>(p.sc_nodes) - 1, "sc_nodes");
    if (p.effect.within_corr < 0 || p.effect.within_corr > 1) {
        throw ConfigError("generate: within_corr must be in [0,1]");
    }
}

inline std::string subject_id(std::size_t i)
{
    std::string n = std::to_string(i + 1);
    return "sub-" + std::string(n.size() < 4 ? 4 - n.size() : 0, '0') + n;
}

namespace synth_detail {

// Cohort-level structure shared by all subjects.
struct Layout {
    AtlasVolume atlas;
    std::vector<double> template_gm;   // per voxel, inside mask
    std::vector<int> networks;         // FNC domain per node
    std::vector<double> sc_backbone;   // n x n expected relative counts (0 = no edge)
    std::vector<std::vector<int>> corridors; // partners of each planted SC node
};

inline Layout build_layout(const CohortParams& p)
{
    Layout L;
    L.atlas = generate_atlas(p.seed, p.shape, p.n_rois);
    const Dims3& s = p.shape;
    const std::size_t nvox = s[0] * s[1] * s[2];

    Rng trng(derive_seed(p.seed, "template"));
    std::vector<double> base(p.n_rois + 1);
    for (std::size_t r = 1; r <= p.n_rois; ++r) base[r] = trng.uniform(0.45, 0.75);
    auto field = smooth_noise(trng, s, 3);
    L.template_gm.assign(nvox, 0.0);
    for (std::size_t i = 0; i < nvox; ++i) {
        const auto r = static_cast<std::size_t>(L.atlas.labels[i]);
        if (r) L.template_gm[i] = base[r] + 0.04 * field[i];
    }

    L.networks = fnc_networks(p.fnc_nodes);

    // SC: nodes on an ellipsoid shell per hemisphere, distance-decay backbone.
    Rng srng(derive_seed(p.seed, "sc_layout"));
    const std::size_t n = p.sc_nodes;
    std::vector<std::array<double, 3>> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double side = i < n / 2 ? -1.0 : 1.0;
        double v[3];
        double norm = 0;
        for (double& c : v) {
            c = srng.normal();
            norm += c * c;
        }
        norm = std::sqrt(norm);
        pos[i] = {side * (0.15 + 0.5 * std::abs(v[0]) / norm), 0.9 * v[1] / norm, 0.7 * v[2] / norm};
    }
    L.sc_backbone.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            double d2 = 0;
            for (int a = 0; a < 3; ++a) d2 += (pos[i][a] - pos[j][a]) * (pos[i][a] - pos[j][a]);
            const double d = std::sqrt(d2);
            const double b = std::exp(-d / 0.3);
            const bool same = (i < n / 2) == (j < n / 2);
            const bool homolog = !same && (j == i + n / 2);
            const double keep = homolog ? 1.0 : (same ? std::min(1.0, 2.0 * b) : 0.3 * b);
            if (srng.uniform() < keep) L.sc_backbone[i * n + j] = L.sc_backbone[j * n + i] = b;
        }
    }
    for (int v : p.effect.sc_nodes) {
        std::vector<int> partners;
        while (partners.size() < 8) {
            const int c = static_cast<int>(srng.below(n));
            if (c == v || std::find(partners.begin(), partners.end(), c) != partners.end()) continue;
            if (std::find(p.effect.sc_nodes.begin(), p.effect.sc_nodes.end(), c) != p.effect.sc_nodes.end()) continue;
            partners.push_back(c);
        }
        L.corridors.push_back(partners);
    }
    return L;
}

// Latent score per planted feature for one subject and modality.
inline std::vector<double> planted_latents(Rng& rng, std::size_t k, double rho, double d, bool pos)
{
    const double u = rng.normal();
    std::vector<double> z(k);
    for (auto& v : z) v = std::sqrt(rho) * u + std::sqrt(1.0 - rho) * rng.normal() + (pos ? d : 0.0);
    return z;
}

inline std::vector<float> make_gm(const CohortParams& p, const Layout& L, Rng& rng, bool pos)
{
    constexpr double kRoiSd = 0.05;
    const std::size_t nvox = L.template_gm.size();
    std::vector<double> offset(p.n_rois + 1, 0.0);
    for (std::size_t r = 1; r <= p.n_rois; ++r) offset[r] = kRoiSd * rng.normal();
    const auto z = planted_latents(rng, p.effect.gm_rois.size(), p.effect.within_corr, p.effect.gm_delta, pos);
    // planted ROIs: variance kept at kRoiSd^2, mean lowered for POS (atrophy)
    for (std::size_t k = 0; k < p.effect.gm_rois.size(); ++k) {
        offset[static_cast<std::size_t>(p.effect.gm_rois[k])] = -kRoiSd * z[k];
    }
    const auto noise = smooth_noise(rng, p.shape, 1);
    std::vector<float> out(nvox, 0.0f);
    for (std::size_t i = 0; i < nvox; ++i) {
        const auto r = static_cast<std::size_t>(L.atlas.labels[i]);
        if (!r) continue;
        const double v = L.template_gm[i] + offset[r] + 0.03 * noise[i];
        out[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    return out;
}

// Correlation matrix of a factor model whose planted nodes load more on a
// global factor in POS subjects (raising their node strength).
inline std::vector<float> make_fnc(const CohortParams& p, const Layout& L, Rng& rng, bool pos)
{
    const std::size_t n = p.fnc_nodes;
    const int n_net = 1 + *std::max_element(L.networks.begin(), L.networks.end());
    const std::size_t q = static_cast<std::size_t>(n_net) + 2 + 3; // networks, anti, global, idiosyncratic
    std::vector<double> lam(n * q, 0.0);
    const auto z = planted_latents(rng, p.effect.fnc_nodes.size(), p.effect.within_corr, p.effect.fnc_delta, pos);
    std::vector<double> zn(n, 0.0);
    for (std::size_t k = 0; k < z.size(); ++k) zn[static_cast<std::size_t>(p.effect.fnc_nodes[k])] = z[k];
    std::vector<bool> planted(n, false);
    for (int v : p.effect.fnc_nodes) planted[static_cast<std::size_t>(v)] = true;
    for (std::size_t i = 0; i < n; ++i) {
        const int net = L.networks[i];
        lam[i * q + static_cast<std::size_t>(net)] = 0.55 + 0.08 * rng.normal();
        const double anti = net == 5 ? 0.35 : (net == 4 ? -0.35 : 0.0);
        lam[i * q + static_cast<std::size_t>(n_net)] = anti + 0.05 * rng.normal();
        const double g = planted[i] ? 0.25 + 0.12 * zn[i] : 0.15 + 0.05 * rng.normal();
        lam[i * q + static_cast<std::size_t>(n_net) + 1] = g;
        for (std::size_t f = static_cast<std::size_t>(n_net) + 2; f < q; ++f) lam[i * q + f] = 0.12 * rng.normal();
    }
    std::vector<double> cov(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) {
            double s = 0;
            for (std::size_t f = 0; f < q; ++f) s += lam[i * q + f] * lam[j * q + f];
            if (i == j) s += 0.35;
            cov[i * n + j] = cov[j * n + i] = s;
        }
    std::vector<float> out(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) {
            const double r = i == j ? 1.0 : cov[i * n + j] / std::sqrt(cov[i * n + i] * cov[j * n + j]);
            out[i * n + j] = out[j * n + i] = static_cast<float>(r);
        }
    return out;
}

// Streamline counts: log-normal scatter around the backbone; planted nodes'
// corridor edges scaled by exp(0.5 * z), shortening paths through them.
inline std::vector<float> make_sc(const CohortParams& p, const Layout& L, Rng& rng, bool pos)
{
    const std::size_t n = p.sc_nodes;
    std::vector<double> w(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double b = L.sc_backbone[i * n + j];
            const double e = rng.normal();
            if (b > 0) w[i * n + j] = w[j * n + i] = std::round(4000.0 * b * std::exp(0.5 * e));
        }
    const auto z = planted_latents(rng, p.effect.sc_nodes.size(), p.effect.within_corr, p.effect.sc_delta, pos);
    for (std::size_t k = 0; k < p.effect.sc_nodes.size(); ++k) {
        const auto v = static_cast<std::size_t>(p.effect.sc_nodes[k]);
        const double gain = std::exp(0.5 * z[k]);
        for (int c : L.corridors[k]) {
            const auto u = static_cast<std::size_t>(c);
            const double base = std::max(w[v * n + u], 1500.0);
            w[v * n + u] = w[u * n + v] = std::round(base * gain);
        }
    }
    std::vector<float> out(n * n);
    for (std::size_t i = 0; i < n * n; ++i) out[i] = static_cast<float>(w[i]);
    return out;
}

} // namespace synth_detail

inline json effect_to_json(const EffectSpec& e)
{
    return json{{"gm_rois", e.gm_rois},     {"gm_delta", e.gm_delta},   {"fnc_nodes", e.fnc_nodes},
                {"fnc_delta", e.fnc_delta}, {"sc_nodes", e.sc_nodes},   {"sc_delta", e.sc_delta},
                {"within_corr", e.within_corr}};
}

inline EffectSpec effect_from_json(const json& j)
{
    EffectSpec e;
    e.gm_rois = j.at("gm_rois").get<std::vector<int>>();
    e.gm_delta = j.at("gm_delta").get<double>();
    e.fnc_nodes = j.at("fnc_nodes").get<std::vector<int>>();
    e.fnc_delta = j.at("fnc_delta").get<double>();
    e.sc_nodes = j.at("sc_nodes").get<std::vector<int>>();
    e.sc_delta = j.at("sc_delta").get<double>();
    e.within_corr = j.at("within_corr").get<double>();
    return e;
}

/// Write a cohort to `out` (manifest.json, atlas.mmt1, <id>/{gm,fnc,sc}.mmt1)
/// and return the manifest.
inline json generate_cohort(const CohortParams& p, const std::filesystem::path& out)
{
    namespace fs = std::filesystem;
    validate_params(p);
    const auto L = synth_detail::build_layout(p);
    fs::create_directories(out);

    const Dims3& s = p.shape;
    mmt1::write<std::int32_t>(out / "atlas.mmt1", Shape{s[0], s[1], s[2]}, L.atlas.labels);

    const std::size_t n = p.n_neg + p.n_pos;
    std::vector<Label> labels(p.n_neg, Label::Neg);
    labels.insert(labels.end(), p.n_pos, Label::Pos);
    Rng lrng(derive_seed(p.seed, "labels"));
    lrng.shuffle(labels);

    // exact sex split per class, matching the reference proportions
    const double male_frac[2] = {68.0 / 185.0, 71.0 / 133.0};
    std::vector<std::string> sex_pool[2];
    for (int c = 0; c < 2; ++c) {
        const std::size_t nc = c ? p.n_pos : p.n_neg;
        const auto males = static_cast<std::size_t>(std::lround(male_frac[c] * static_cast<double>(nc)));
        sex_pool[c].assign(males, "M");
        sex_pool[c].insert(sex_pool[c].end(), nc - males, "F");
        Rng r(derive_seed(p.seed, c ? "sex_pos" : "sex_neg"));
        r.shuffle(sex_pool[c]);
    }
    std::size_t sex_next[2] = {0, 0};

    json subjects = json::array();
    for (std::size_t i = 0; i < n; ++i) {
        const bool pos = labels[i] == Label::Pos;
        const int c = pos ? 1 : 0;
        const std::string id = subject_id(i);
        Rng rng(derive_seed(derive_seed(p.seed, "subject"), i));

        SubjectRecord rec;
        rec.id = id;
        rec.label = labels[i];
        rec.age = synth_detail::round1(pos ? 74.5 + 7.5 * rng.normal() : 71.8 + 7.1 * rng.normal());
        rec.sex = sex_pool[c][sex_next[c]++];
        rec.mmse = std::clamp(std::round(pos ? 25.3 + 4.3 * rng.normal() : 28.9 + 1.5 * rng.normal()), 0.0, 30.0);
        double ab;
        do {
            ab = pos ? synth_detail::lognormal_from_moments(rng, 607.5, 189.3)
                     : synth_detail::lognormal_from_moments(rng, 1684.3, 601.2);
            ab = synth_detail::round1(ab);
        } while (pos ? !(ab < p.abeta_cutoff) : !(ab >= p.abeta_cutoff));
        rec.abeta42 = ab;

        Rng grng(derive_seed(rng.next_u64(), "gm"));
        Rng frng(derive_seed(rng.next_u64(), "fnc"));
        Rng srng(derive_seed(rng.next_u64(), "sc"));
        const auto gm = synth_detail::make_gm(p, L, grng, pos);
        const auto fnc = synth_detail::make_fnc(p, L, frng, pos);
        const auto sc = synth_detail::make_sc(p, L, srng, pos);

        fs::create_directories(out / id);
        rec.gm_path = id + "/gm.mmt1";
        rec.fnc_path = id + "/fnc.mmt1";
        rec.sc_path = id + "/sc.mmt1";
        mmt1::write<float>(out / rec.gm_path, Shape{s[0], s[1], s[2]}, gm);
        mmt1::write<float>(out / rec.fnc_path, Shape{p.fnc_nodes, p.fnc_nodes}, fnc);
        mmt1::write<float>(out / rec.sc_path, Shape{p.sc_nodes, p.sc_nodes}, sc);

        subjects.push_back(json{{"id", rec.id},
                                {"label", to_string(rec.label)},
                                {"age", rec.age},
                                {"sex", rec.sex},
                                {"mmse", rec.mmse},
                                {"abeta42", rec.abeta42},
                                {"gm", rec.gm_path},
                                {"fnc", rec.fnc_path},
                                {"sc", rec.sc_path}});
    }

    json m;
    m["generator"] = "multifuse-synthcohort";
    m["generator_version"] = kGeneratorVersion;
    m["seed"] = p.seed;
    m["shape"] = std::vector<std::size_t>{s[0], s[1], s[2]};
    m["counts"] = json{{"NEG", p.n_neg}, {"POS", p.n_pos}};
    m["abeta42_cutoff"] = p.abeta_cutoff;
    m["effect"] = effect_to_json(p.effect);
    m["atlas"] = json{{"file", "atlas.mmt1"}, {"n_rois", p.n_rois}, {"names", L.atlas.names}};
    m["fnc"] = json{{"n_nodes", p.fnc_nodes}, {"names", fnc_node_names(p.fnc_nodes)}};
    m["sc"] = json{{"n_nodes", p.sc_nodes}, {"names", sc_node_names(p.sc_nodes)}};
    m["subjects"] = subjects;

    std::ofstream os(out / "manifest.json", std::ios::trunc);
    if (!os) throw IoError("generate: cannot write manifest in " + out.string());
    os << m.dump(2) << '\n';
    return m;
}

// ---------------------------------------------------------------- loading

namespace synth_detail {

inline Tensor<float> load_payload(const std::filesystem::path& root, const std::string& rel,
                                  const std::string& id, const Shape& expect)
{
    const auto path = root / rel;
    if (!std::filesystem::exists(path)) {
        throw LoadError(LoadError::Kind::MissingFile, "cohort: subject " + id + ": missing file " + rel);
    }
    mmt1::Array a;
    try {
        a = mmt1::read(path);
    } catch (const IoError& e) {
        throw LoadError(LoadError::Kind::Malformed, "cohort: subject " + id + ": " + e.what());
    }
    if (a.shape != expect) {
        throw LoadError(LoadError::Kind::ShapeMismatch, "cohort: subject " + id + ": " + rel + " has shape "
                                                            + shape_str(a.shape) + ", expected " + shape_str(expect));
    }
    return Tensor<float>(a.shape, a.values<float>());
}

inline void check_matrix(const Tensor<float>& m, const std::string& id, const std::string& what, bool functional)
{
    const std::size_t n = m.dim(0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const float v = m[i * n + j];
            if (!std::isfinite(v)) {
                throw LoadError(LoadError::Kind::OutOfRange, "cohort: subject " + id + ": non-finite " + what);
            }
            if (std::abs(static_cast<double>(v) - m[j * n + i]) > 1e-6) {
                throw LoadError(LoadError::Kind::Asymmetric, "cohort: subject " + id + ": " + what
                                                                 + " asymmetric at (" + std::to_string(i) + ","
                                                                 + std::to_string(j) + ")");
            }
            if (functional && (v < -1.0f || v > 1.0f)) {
                throw LoadError(LoadError::Kind::OutOfRange, "cohort: subject " + id + ": " + what
                                                                 + " value " + std::to_string(v) + " outside [-1,1]");
            }
            if (!functional && v < 0.0f) {
                throw LoadError(LoadError::Kind::OutOfRange, "cohort: subject " + id + ": negative " + what);
            }
        }
    }
}

} // namespace synth_detail

/// Read and validate a cohort. `path` is the cohort directory or its manifest.json.
inline Cohort load_cohort(const std::filesystem::path& path, bool load_payloads = true)
{
    namespace fs = std::filesystem;
    Cohort c;
    fs::path mpath = fs::is_directory(path) ? path / "manifest.json" : path;
    c.root = mpath.parent_path();
    if (!fs::exists(mpath)) throw LoadError(LoadError::Kind::MissingFile, "cohort: missing " + mpath.string());
    try {
        std::ifstream is(mpath);
        c.manifest = json::parse(is);
        const json& m = c.manifest;
        c.params.seed = m.at("seed").get<std::uint64_t>();
        const auto shape = m.at("shape").get<std::vector<std::size_t>>();
        if (shape.size() != 3) throw LoadError(LoadError::Kind::Malformed, "cohort: shape needs 3 entries");
        c.params.shape = {shape[0], shape[1], shape[2]};
        c.params.n_neg = m.at("counts").at("NEG").get<std::size_t>();
        c.params.n_pos = m.at("counts").at("POS").get<std::size_t>();
        c.params.abeta_cutoff = m.at("abeta42_cutoff").get<double>();
        c.params.effect = effect_from_json(m.at("effect"));
        c.params.n_rois = m.at("atlas").at("n_rois").get<std::size_t>();
        c.params.fnc_nodes = m.at("fnc").at("n_nodes").get<std::size_t>();
        c.params.sc_nodes = m.at("sc").at("n_nodes").get<std::size_t>();
        c.atlas.names = m.at("atlas").at("names").get<std::vector<std::string>>();
        c.fnc_names = m.at("fnc").at("names").get<std::vector<std::string>>();
        c.sc_names = m.at("sc").at("names").get<std::vector<std::string>>();
        for (const auto& s : m.at("subjects")) {
            SubjectRecord r;
            r.id = s.at("id").get<std::string>();
            r.label = parse_label(s.at("label").get<std::string>());
            r.age = s.at("age").get<double>();
            r.sex = s.at("sex").get<std::string>();
            r.mmse = s.at("mmse").get<double>();
            r.abeta42 = s.at("abeta42").get<double>();
            r.gm_path = s.at("gm").get<std::string>();
            r.fnc_path = s.at("fnc").get<std::string>();
            r.sc_path = s.at("sc").get<std::string>();
            if ((r.label == Label::Pos) != (r.abeta42 < c.params.abeta_cutoff)) {
                throw LoadError(LoadError::Kind::Malformed, "cohort: subject " + r.id + ": label inconsistent with abeta42");
            }
            c.subjects.push_back(std::move(r));
        }
    } catch (const json::exception& e) {
        throw LoadError(LoadError::Kind::Malformed, "cohort: malformed manifest: " + std::string(e.what()));
    }
    if (c.count(Label::Neg) != c.params.n_neg || c.count(Label::Pos) != c.params.n_pos) {
        throw LoadError(LoadError::Kind::Malformed, "cohort: label counts do not match manifest counts");
    }

    const Dims3& s = c.params.shape;
    const Shape vshape{s[0], s[1], s[2]};
    const auto apath = c.root / c.manifest["atlas"]["file"].get<std::string>();
    if (!fs::exists(apath)) throw LoadError(LoadError::Kind::MissingFile, "cohort: missing atlas " + apath.string());
    auto a = mmt1::read(apath);
    if (a.shape != vshape || a.dtype != mmt1::DType::Int32) {
        throw LoadError(LoadError::Kind::ShapeMismatch, "cohort: atlas shape/dtype mismatch");
    }
    c.atlas.shape = s;
    c.atlas.n_rois = c.params.n_rois;
    c.atlas.labels = a.i32;
    for (auto l : c.atlas.labels) {
        if (l < 0 || static_cast<std::size_t>(l) > c.atlas.n_rois) {
            throw LoadError(LoadError::Kind::OutOfRange, "cohort: atlas label out of range");
        }
    }

    if (!load_payloads) return c;
    const Shape fshape{c.params.fnc_nodes, c.params.fnc_nodes}, sshape{c.params.sc_nodes, c.params.sc_nodes};
    for (const auto& r : c.subjects) {
        SubjectData<float> d;
        d.gm = synth_detail::load_payload(c.root, r.gm_path, r.id, vshape);
        d.fnc = synth_detail::load_payload(c.root, r.fnc_path, r.id, fshape);
        d.sc = synth_detail::load_payload(c.root, r.sc_path, r.id, sshape);
        for (float v : d.gm.data()) {
            if (!std::isfinite(v)) throw LoadError(LoadError::Kind::OutOfRange, "cohort: subject " + r.id + ": non-finite gm");
        }
        synth_detail::check_matrix(d.fnc, r.id, "fnc", true);
        synth_detail::check_matrix(d.sc, r.id, "sc", false);
        c.data.push_back(std::move(d));
    }
    return c;
}

/// Mean GM intensity of each ROI (index r-1 for label r) for one volume.
template <class T>
std::vector<double> roi_means(const Tensor<T>& gm, const AtlasVolume& atlas)
{
    std::vector<double> sum(atlas.n_rois + 1, 0.0);
    std::vector<std::size_t> cnt(atlas.n_rois + 1, 0);
    for (std::size_t i = 0; i < atlas.labels.size(); ++i) {
        const auto r = static_cast<std::size_t>(atlas.labels[i]);
        sum[r] += gm[i];
        ++cnt[r];
    }
    std::vector<double> out(atlas.n_rois);
    for (std::size_t r = 1; r <= atlas.n_rois; ++r) out[r - 1] = cnt[r] ? sum[r] / static_cast<double>(cnt[r]) : 0.0;
    return out;
}

} // namespace multifuse

#endif
