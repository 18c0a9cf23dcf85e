#ifndef MULTIFUSE_ATTRIBUTION_HPP
#define MULTIFUSE_ATTRIBUTION_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "multifuse/compute_graph.hpp"
#include "multifuse/errors.hpp"
#include "multifuse/fusion_model.hpp"
#include "multifuse/ops.hpp"
#include "multifuse/synthcohort.hpp"

namespace multifuse {

enum class Modality { Volume, Func, Struct };

inline const char* to_string(Modality m)
{
    switch (m) {
    case Modality::Volume: return "volume";
    case Modality::Func: return "func";
    case Modality::Struct: return "struct";
    }
    return "?";
}

inline Modality modality_of(BranchKind k)
{
    switch (k) {
    case BranchKind::Volume: return Modality::Volume;
    case BranchKind::FuncGraph: return Modality::Func;
    case BranchKind::StructGraph: return Modality::Struct;
    }
    return Modality::Volume;
}

struct AttributionMap {
    Modality modality = Modality::Volume;
    std::string subject;
    Label target = Label::Pos;
    Shape shape;                // [D, H, W] for the volume, [n] for graphs
    std::vector<double> values; // row-major
};

/// Guided-backprop maps of the target-class logit with respect to each
/// configured modality input. Parameters are left untouched.
template <class T>
std::vector<AttributionMap> guided_attribution(const FusionModel<T>& model, const SubjectInput<T>& in, Label target,
                                               const std::string& subject = {},
                                               ReluBackwardMode mode = ReluBackwardMode::Guided,
                                               typename ComputeGraph<T>::ReluHook hook = {})
{
    SubjectInput<T> x = in;
    auto track = [](Tensor<T>& t) {
        if (!t.defined()) return;
        t = t.detached();
        t.set_requires_grad(true);
    };
    track(x.volume);
    track(x.fnc_x);
    track(x.sc_x);

    ComputeGraph<T> g;
    g.set_track_parameters(false);
    g.set_relu_mode(mode);
    if (hook) g.set_relu_hook(std::move(hook));
    const auto r = model.forward(g, x);
    auto score = ops::select(g, r.logits, target == Label::Pos ? 1 : 0);
    g.backward(score);

    std::vector<AttributionMap> maps;
    for (const auto& b : model.config().branches) {
        AttributionMap m;
        m.modality = modality_of(b.kind);
        m.subject = subject;
        m.target = target;
        const Tensor<T>* src = nullptr;
        switch (b.kind) {
        case BranchKind::Volume:
            src = &x.volume;
            m.shape = Shape(x.volume.shape().begin() + 1, x.volume.shape().end());
            break;
        case BranchKind::FuncGraph:
            src = &x.fnc_x;
            m.shape = Shape{x.fnc_x.dim(0)};
            break;
        case BranchKind::StructGraph:
            src = &x.sc_x;
            m.shape = Shape{x.sc_x.dim(0)};
            break;
        }
        const auto gr = src->grad();
        m.values.assign(gr.begin(), gr.end());
        for (double v : m.values) {
            if (!std::isfinite(v)) throw NumericError("guided_attribution: non-finite attribution for " + subject);
        }
        maps.push_back(std::move(m));
    }
    return maps;
}

/// Elementwise mean over the maps whose subject is in `ids`.
inline AttributionMap average_positive_map(const std::vector<AttributionMap>& maps, const std::set<std::string>& ids)
{
    AttributionMap out;
    std::size_t n = 0;
    for (const auto& m : maps) {
        if (!ids.count(m.subject)) continue;
        if (n == 0) {
            out.modality = m.modality;
            out.target = m.target;
            out.shape = m.shape;
            out.values.assign(m.values.size(), 0.0);
        } else if (m.modality != out.modality || m.shape != out.shape) {
            throw ContractError("average_positive_map: maps differ in modality or shape");
        }
        for (std::size_t i = 0; i < m.values.size(); ++i) out.values[i] += m.values[i];
        ++n;
    }
    if (n == 0) throw ContractError("average_positive_map: no correctly classified POS subject to average");
    for (auto& v : out.values) v /= static_cast<double>(n);
    out.subject = "mean";
    return out;
}

struct RegionRow {
    std::size_t index = 0; // 0-based region / node index
    std::string name;
    double raw = 0;
    double weighted = 0; // per-voxel mean for ROIs; equals raw for graph nodes
    double pct_within = 0;
    double pct_across = 0;
    double pct_within_signed = 0; // 100 * weighted / sum |weighted|
};

struct RegionTable {
    Modality modality = Modality::Volume;
    std::vector<RegionRow> rows;
    double background = 0; // volume only: attribution outside every ROI
    bool zero_mass = false;
};

/// Sum of attributions inside each atlas ROI, divided by its voxel count.
inline RegionTable roi_aggregate(const AttributionMap& map, const AtlasVolume& atlas)
{
    if (map.modality != Modality::Volume) throw ContractError("roi_aggregate: volume map expected");
    const Shape as{atlas.shape[0], atlas.shape[1], atlas.shape[2]};
    if (map.shape != as) {
        throw ContractError("roi_aggregate: map shape " + shape_str(map.shape) + " does not match atlas " +
                            shape_str(as));
    }
    RegionTable t;
    t.modality = Modality::Volume;
    t.rows.resize(atlas.n_rois);
    const auto counts = atlas.voxel_counts();
    for (std::size_t r = 0; r < atlas.n_rois; ++r) {
        t.rows[r].index = r;
        t.rows[r].name = atlas.names.at(r);
    }
    for (std::size_t i = 0; i < map.values.size(); ++i) {
        const int l = atlas.labels[i];
        if (l == 0) t.background += map.values[i];
        else t.rows[static_cast<std::size_t>(l - 1)].raw += map.values[i];
    }
    for (std::size_t r = 0; r < atlas.n_rois; ++r) {
        const auto c = counts.at(r + 1);
        t.rows[r].weighted = c ? t.rows[r].raw / static_cast<double>(c) : 0.0;
    }
    return t;
}

/// Graph node scores are the attribution values themselves.
inline RegionTable node_table(const AttributionMap& map, const std::vector<std::string>& names)
{
    if (map.modality == Modality::Volume) throw ContractError("node_table: graph map expected");
    if (names.size() != map.values.size()) throw ContractError("node_table: name count does not match node count");
    RegionTable t;
    t.modality = map.modality;
    for (std::size_t i = 0; i < map.values.size(); ++i) {
        t.rows.push_back({i, names[i], map.values[i], map.values[i], 0, 0, 0});
    }
    return t;
}

/// Fill within- and across-modality percentages over max(weighted, 0).
inline void percentages(std::vector<RegionTable>& tables)
{
    double all = 0;
    std::vector<double> mass(tables.size(), 0.0);
    for (std::size_t t = 0; t < tables.size(); ++t) {
        for (const auto& r : tables[t].rows) mass[t] += std::max(r.weighted, 0.0);
        all += mass[t];
    }
    for (std::size_t t = 0; t < tables.size(); ++t) {
        auto& tab = tables[t];
        tab.zero_mass = mass[t] == 0;
        double abs_mass = 0;
        for (const auto& r : tab.rows) abs_mass += std::abs(r.weighted);
        for (auto& r : tab.rows) {
            const double s = std::max(r.weighted, 0.0);
            r.pct_within = tab.zero_mass ? 0.0 : 100.0 * s / mass[t];
            r.pct_across = all > 0 ? 100.0 * s / all : 0.0;
            r.pct_within_signed = abs_mass > 0 ? 100.0 * r.weighted / abs_mass : 0.0;
        }
    }
}

/// Row positions ranked by within-modality percentage, ties by index.
inline std::vector<std::size_t> top_k(const RegionTable& table, std::size_t k = 10)
{
    if (k > table.rows.size()) {
        throw ContractError("top_k: k = " + std::to_string(k) + " exceeds " + std::to_string(table.rows.size()) +
                            " regions");
    }
    std::vector<std::size_t> idx(table.rows.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const auto &ra = table.rows[a], &rb = table.rows[b];
        if (ra.pct_within != rb.pct_within) return ra.pct_within > rb.pct_within;
        return ra.index < rb.index;
    });
    idx.resize(k);
    return idx;
}

} // namespace multifuse

#endif
