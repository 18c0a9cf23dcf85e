#ifndef MULTIFUSE_FUSION_MODEL_HPP
#define MULTIFUSE_FUSION_MODEL_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "multifuse/compute_graph.hpp"
#include "multifuse/config.hpp"
#include "multifuse/errors.hpp"
#include "multifuse/graph_nn.hpp"
#include "multifuse/mmt1.hpp"
#include "multifuse/ops.hpp"
#include "multifuse/rng.hpp"
#include "multifuse/tensor.hpp"

namespace multifuse {

enum class BranchKind { Volume, FuncGraph, StructGraph };

inline const char* to_string(BranchKind k)
{
    switch (k) {
    case BranchKind::Volume: return "volume";
    case BranchKind::FuncGraph: return "func";
    case BranchKind::StructGraph: return "struct";
    }
    return "?";
}

inline BranchKind parse_branch_kind(const std::string& s)
{
    if (s == "volume" || s == "smri") return BranchKind::Volume;
    if (s == "func" || s == "fmri") return BranchKind::FuncGraph;
    if (s == "struct" || s == "dmri") return BranchKind::StructGraph;
    throw ConfigError("unknown branch kind '" + s + "'");
}

enum class LambdaMaxMode { Fixed, Exact };

struct BranchConfig {
    BranchKind kind = BranchKind::Volume;
    std::size_t latent_dim = 100;

    // volume branch
    std::array<std::size_t, 3> input_shape{32, 32, 32};
    std::vector<std::size_t> conv_channels{8, 8, 16, 16, 32, 32};
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t padding = 1;
    std::vector<std::size_t> pool_after{2, 4, 6}; // 1-based conv indices
    std::size_t pool_window = 2;
    std::vector<std::size_t> dense_widths{512, 256, 128}; // hidden; a 4th dense maps to latent

    // graph branches
    std::size_t n_nodes = 0;
    std::vector<std::size_t> graph_widths{16, 32};
    std::size_t cheb_k = 3;
    LambdaMaxMode lambda_mode = LambdaMaxMode::Fixed;

    static BranchConfig volume()
    {
        return BranchConfig{};
    }
    static BranchConfig func()
    {
        BranchConfig c;
        c.kind = BranchKind::FuncGraph;
        c.n_nodes = 53;
        return c;
    }
    static BranchConfig structural()
    {
        BranchConfig c;
        c.kind = BranchKind::StructGraph;
        c.n_nodes = 84;
        return c;
    }

    /// Spatial shape after the conv/pool schedule (volume branch).
    std::array<std::size_t, 3> volume_output_shape() const
    {
        auto dims = input_shape;
        for (std::size_t i = 0; i < conv_channels.size(); ++i) {
            for (auto& d : dims) d = ops::detail::conv_out_dim(d, kernel, stride, padding, "volume branch");
            if (std::find(pool_after.begin(), pool_after.end(), i + 1) != pool_after.end()) {
                for (auto& d : dims) {
                    if (pool_window > d) {
                        throw ConfigError("volume branch: pooling window exceeds spatial size");
                    }
                    d = ops::detail::conv_out_dim(d, pool_window, pool_window, 0, "volume branch");
                }
            }
        }
        return dims;
    }

    std::size_t flatten_size() const
    {
        if (kind == BranchKind::Volume) {
            const auto d = volume_output_shape();
            return conv_channels.back() * d[0] * d[1] * d[2];
        }
        return n_nodes * graph_widths.back();
    }

    void validate() const
    {
        if (latent_dim == 0) throw ConfigError("branch: latent_dim must be > 0");
        if (kind == BranchKind::Volume) {
            if (conv_channels.size() != 6) throw ConfigError("volume branch: needs exactly 6 conv layers");
            if (pool_after.size() != 3) throw ConfigError("volume branch: needs exactly 3 pooling layers");
            if (dense_widths.size() != 3) {
                throw ConfigError("volume branch: needs exactly 4 dense layers (3 hidden widths)");
            }
            if (kernel == 0 || stride == 0) throw ConfigError("volume branch: kernel/stride must be > 0");
            for (auto p : pool_after) {
                if (p < 1 || p > 6) throw ConfigError("volume branch: pool_after index out of 1..6");
            }
            for (auto c : conv_channels) {
                if (c == 0) throw ConfigError("volume branch: zero conv channels");
            }
            (void)volume_output_shape();
        } else {
            if (graph_widths.size() != 2) throw ConfigError("graph branch: needs exactly 2 graph layers");
            if (n_nodes == 0) throw ConfigError("graph branch: n_nodes must be > 0");
            if (kind == BranchKind::StructGraph && cheb_k < 1) {
                throw ConfigError("struct branch: cheb_k must be >= 1");
            }
        }
        for (auto w : dense_widths) {
            if (w == 0) throw ConfigError("branch: zero dense width");
        }
    }
};

struct HeadConfig {
    std::vector<std::size_t> hidden{128, 32};
    std::size_t n_classes = 2;
};

struct ModelConfig {
    std::vector<BranchConfig> branches;
    HeadConfig head;

    static ModelConfig multimodal()
    {
        return ModelConfig{{BranchConfig::volume(), BranchConfig::func(), BranchConfig::structural()}, {}};
    }

    static ModelConfig unimodal(const ModelConfig& full, BranchKind kind)
    {
        ModelConfig out;
        out.head = full.head;
        for (const auto& b : full.branches) {
            if (b.kind == kind) out.branches.push_back(b);
        }
        if (out.branches.size() != 1) {
            throw ConfigError(std::string("unimodal: branch '") + to_string(kind) + "' not configured");
        }
        return out;
    }

    const BranchConfig* find(BranchKind kind) const
    {
        for (const auto& b : branches) {
            if (b.kind == kind) return &b;
        }
        return nullptr;
    }

    std::size_t fused_size() const
    {
        std::size_t s = 0;
        for (const auto& b : branches) s += b.latent_dim;
        return s;
    }

    void validate() const
    {
        if (branches.empty()) throw ConfigError("model: no branches");
        for (std::size_t i = 0; i < branches.size(); ++i) {
            branches[i].validate();
            if (branches[i].latent_dim != branches[0].latent_dim) {
                throw ConfigError("model: latent_dim must be identical across branches");
            }
            for (std::size_t j = 0; j < i; ++j) {
                if (branches[j].kind == branches[i].kind) throw ConfigError("model: duplicate branch");
            }
        }
        if (head.hidden.size() != 2) throw ConfigError("model: classifier needs exactly 3 dense layers");
        if (head.n_classes != 2) throw ConfigError("model: binary classifier expected");
    }
};

/// Read the [model], [volume], [func], [struct], [head] sections onto `base`.
inline ModelConfig model_config_from(const Config& cfg, ModelConfig base = ModelConfig::multimodal())
{
    const std::size_t latent = config_get<std::size_t>(cfg, "model.latent_dim", base.branches.at(0).latent_dim);
    if (auto kinds = cfg.get_optional<std::string>("model.branches")) {
        ModelConfig picked;
        picked.head = base.head;
        std::stringstream ss(*kinds);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item.erase(0, item.find_first_not_of(" \t"));
            item.erase(item.find_last_not_of(" \t") + 1);
            if (item.empty()) continue;
            const BranchKind k = parse_branch_kind(item);
            const BranchConfig* b = base.find(k);
            picked.branches.push_back(b ? *b : (k == BranchKind::Volume ? BranchConfig::volume()
                                              : k == BranchKind::FuncGraph ? BranchConfig::func()
                                                                           : BranchConfig::structural()));
        }
        base = picked;
    }
    for (auto& b : base.branches) {
        b.latent_dim = latent;
        const std::string s = to_string(b.kind);
        if (b.kind == BranchKind::Volume) {
            auto shape = config_get_list(cfg, s + ".input_shape", {b.input_shape[0], b.input_shape[1], b.input_shape[2]});
            if (shape.size() != 3) throw ConfigError("volume.input_shape needs 3 entries");
            b.input_shape = {shape[0], shape[1], shape[2]};
            b.conv_channels = config_get_list(cfg, s + ".conv_channels", b.conv_channels);
            b.kernel = config_get<std::size_t>(cfg, s + ".kernel", b.kernel);
            b.stride = config_get<std::size_t>(cfg, s + ".stride", b.stride);
            b.padding = config_get<std::size_t>(cfg, s + ".padding", b.padding);
            b.pool_after = config_get_list(cfg, s + ".pool_after", b.pool_after);
            b.pool_window = config_get<std::size_t>(cfg, s + ".pool_window", b.pool_window);
            b.dense_widths = config_get_list(cfg, s + ".dense_widths", b.dense_widths);
        } else {
            b.n_nodes = config_get<std::size_t>(cfg, s + ".n_nodes", b.n_nodes);
            b.graph_widths = config_get_list(cfg, s + ".widths", b.graph_widths);
            if (b.kind == BranchKind::StructGraph) {
                b.cheb_k = config_get<std::size_t>(cfg, s + ".cheb_k", b.cheb_k);
                const std::string lm = config_get<std::string>(cfg, s + ".lambda_max", "fixed");
                if (lm != "fixed" && lm != "exact") throw ConfigError("struct.lambda_max must be fixed|exact");
                b.lambda_mode = lm == "exact" ? LambdaMaxMode::Exact : LambdaMaxMode::Fixed;
            }
        }
    }
    base.head.hidden = config_get_list(cfg, "head.hidden", base.head.hidden);
    base.validate();
    return base;
}

inline void model_config_to(const ModelConfig& m, Config& cfg)
{
    std::string kinds;
    for (const auto& b : m.branches) {
        if (!kinds.empty()) kinds += ',';
        kinds += to_string(b.kind);
    }
    cfg.put("model.branches", kinds);
    cfg.put("model.latent_dim", m.branches.at(0).latent_dim);
    for (const auto& b : m.branches) {
        const std::string s = to_string(b.kind);
        if (b.kind == BranchKind::Volume) {
            cfg.put(s + ".input_shape", join_list({b.input_shape[0], b.input_shape[1], b.input_shape[2]}));
            cfg.put(s + ".conv_channels", join_list(b.conv_channels));
            cfg.put(s + ".kernel", b.kernel);
            cfg.put(s + ".stride", b.stride);
            cfg.put(s + ".padding", b.padding);
            cfg.put(s + ".pool_after", join_list(b.pool_after));
            cfg.put(s + ".pool_window", b.pool_window);
            cfg.put(s + ".dense_widths", join_list(b.dense_widths));
        } else {
            cfg.put(s + ".n_nodes", b.n_nodes);
            cfg.put(s + ".widths", join_list(b.graph_widths));
            if (b.kind == BranchKind::StructGraph) {
                cfg.put(s + ".cheb_k", b.cheb_k);
                cfg.put(s + ".lambda_max", b.lambda_mode == LambdaMaxMode::Exact ? "exact" : "fixed");
            }
        }
    }
    cfg.put("head.hidden", join_list(m.head.hidden));
}

/// Closed-form parameter count for a configuration.
///   conv layer      c_in*c_out*k^3 + c_out
///   graph_conv      2*f_in*f_out + f_out
///   cheb_conv       K*f_in*f_out + f_out
///   dense           n_in*n_out + n_out
inline std::size_t parameter_count(const ModelConfig& m)
{
    auto dense_chain = [](std::vector<std::size_t> widths) {
        std::size_t n = 0;
        for (std::size_t i = 1; i < widths.size(); ++i) n += widths[i - 1] * widths[i] + widths[i];
        return n;
    };
    std::size_t total = 0;
    for (const auto& b : m.branches) {
        if (b.kind == BranchKind::Volume) {
            std::size_t c_in = 1;
            for (auto c : b.conv_channels) {
                total += c_in * c * b.kernel * b.kernel * b.kernel + c;
                c_in = c;
            }
            std::vector<std::size_t> w{b.flatten_size()};
            w.insert(w.end(), b.dense_widths.begin(), b.dense_widths.end());
            w.push_back(b.latent_dim);
            total += dense_chain(w);
        } else {
            std::size_t f_in = 1;
            for (auto f : b.graph_widths) {
                const std::size_t mult = b.kind == BranchKind::FuncGraph ? 2 : b.cheb_k;
                total += mult * f_in * f + f;
                f_in = f;
            }
            total += dense_chain({b.flatten_size(), b.latent_dim});
        }
    }
    std::vector<std::size_t> w{m.fused_size()};
    w.insert(w.end(), m.head.hidden.begin(), m.head.hidden.end());
    w.push_back(m.head.n_classes);
    return total + dense_chain(w);
}

/// Network-ready tensors for one subject.
template <class T>
struct SubjectInput {
    Tensor<T> volume;  // [1, D, H, W]
    Tensor<T> fnc_adj; // [n, n] signed, zero diagonal
    Tensor<T> fnc_x;   // [n, 1] ones
    Tensor<T> sc_op;   // [n, n] scaled Laplacian of rescaled SC
    Tensor<T> sc_x;    // [n, 1] ones
};

/// Build network inputs from on-disk payloads: FNC diagonal zeroed, SC
/// rescaled by its maximum and turned into the scaled normalized Laplacian.
template <class T>
SubjectInput<T> prepare_input(const Tensor<T>& gm, const Tensor<T>& fnc, const Tensor<T>& sc,
                              LambdaMaxMode mode = LambdaMaxMode::Fixed)
{
    SubjectInput<T> in;
    if (gm.defined()) {
        Shape s{1};
        for (auto d : gm.shape()) s.push_back(d);
        if (gm.rank() == 4) s = gm.shape();
        in.volume = Tensor<T>(s, gm.values());
    }
    if (fnc.defined()) {
        in.fnc_adj = fnc.detached();
        const std::size_t n = fnc.dim(0);
        for (std::size_t i = 0; i < n; ++i) in.fnc_adj[i * n + i] = T(0);
        in.fnc_x = Tensor<T>(Shape{n, 1}, T(1));
    }
    if (sc.defined()) {
        Tensor<T> w = rescale_to_unit_max(sc);
        const std::size_t n = w.dim(0);
        for (std::size_t i = 0; i < n; ++i) w[i * n + i] = T(0);
        Tensor<T> L = normalized_laplacian(w);
        T lmax = T(2);
        if (mode == LambdaMaxMode::Exact) lmax = std::max(largest_eigenvalue(L), T(1e-6));
        in.sc_op = scaled_laplacian(L, lmax);
        in.sc_x = Tensor<T>(Shape{n, 1}, T(1));
    }
    return in;
}

template <class T>
struct ForwardResult {
    std::vector<Tensor<T>> latents; // one per configured branch, in config order
    Tensor<T> fused;
    Tensor<T> logits;
    Tensor<T> probs;
};

template <class T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;
    std::size_t fan_in = 0; // 0 for biases
};

/// Three feature-reduction branches (any non-empty subset) plus the fusion MLP head.
template <class T>
class FusionModel {
public:
    /// Kaiming-uniform (fan-in) weights, zero biases, reproducible from seed.
    FusionModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed)
    {
        cfg_.validate();
        build();
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (p.fan_in == 0) continue;
            Rng rng(derive_seed(seed_, p.name));
            const double bound = std::sqrt(6.0 / static_cast<double>(p.fan_in));
            for (T& v : p.tensor.data()) v = static_cast<T>(rng.uniform(-bound, bound));
        }
    }

    FusionModel(const FusionModel& other) : cfg_(other.cfg_), seed_(other.seed_)
    {
        build();
        copy_values_from(other);
    }

    FusionModel& operator=(const FusionModel& other)
    {
        if (this != &other) {
            cfg_ = other.cfg_;
            seed_ = other.seed_;
            params_.clear();
            build();
            copy_values_from(other);
        }
        return *this;
    }

    FusionModel(FusionModel&&) noexcept = default;
    FusionModel& operator=(FusionModel&&) noexcept = default;

    const ModelConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }

    std::vector<NamedParam<T>>& parameters() { return params_; }
    const std::vector<NamedParam<T>>& parameters() const { return params_; }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.tensor.size();
        return n;
    }

    void zero_grad()
    {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    const Tensor<T>& param(const std::string& name) const
    {
        for (const auto& p : params_) {
            if (p.name == name) return p.tensor;
        }
        throw UsageError("model: no parameter named " + name);
    }

    ForwardResult<T> forward(ComputeGraph<T>& g, const SubjectInput<T>& in) const
    {
        ForwardResult<T> r;
        for (const auto& b : cfg_.branches) {
            switch (b.kind) {
            case BranchKind::Volume: r.latents.push_back(forward_volume(g, b, in.volume)); break;
            case BranchKind::FuncGraph: r.latents.push_back(forward_func(g, b, in.fnc_adj, in.fnc_x)); break;
            case BranchKind::StructGraph: r.latents.push_back(forward_struct(g, b, in.sc_op, in.sc_x)); break;
            }
        }
        r.fused = r.latents.size() == 1 ? r.latents[0] : ops::concat(g, r.latents);
        Tensor<T> h = r.fused;
        h = ops::relu(g, ops::dense(g, h, p("head.dense1.weight"), p("head.dense1.bias")));
        h = ops::relu(g, ops::dense(g, h, p("head.dense2.weight"), p("head.dense2.bias")));
        r.logits = ops::dense(g, h, p("head.dense3.weight"), p("head.dense3.bias"));
        r.probs = ops::softmax(g, r.logits);
        return r;
    }

    /// Checkpoint: manifest.txt (key = value) plus one MMT1 file per parameter.
    void save(const std::filesystem::path& dir) const
    {
        std::filesystem::create_directories(dir);
        Config cfg;
        cfg.put("checkpoint.format", "multifuse-checkpoint-1");
        cfg.put("checkpoint.precision", sizeof(T) == 4 ? "32" : "64");
        cfg.put("checkpoint.seed", seed_);
        cfg.put("checkpoint.n_params", params_.size());
        model_config_to(cfg_, cfg);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const auto& p = params_[i];
            cfg.put("params." + std::to_string(i), p.name);
            mmt1::write(dir / (p.name + ".mmt1"), p.tensor);
        }
        write_config(dir / "manifest.txt", cfg);
    }

    static FusionModel load(const std::filesystem::path& dir)
    {
        if (!std::filesystem::exists(dir / "manifest.txt")) {
            throw IoError("checkpoint: missing manifest in " + dir.string());
        }
        Config cfg = read_config(dir / "manifest.txt");
        if (cfg.get<std::string>("checkpoint.format", "") != "multifuse-checkpoint-1") {
            throw IoError("checkpoint: unknown format in " + dir.string());
        }
        const std::string prec = cfg.get<std::string>("checkpoint.precision", "");
        if (prec != (sizeof(T) == 4 ? "32" : "64")) {
            throw IoError("checkpoint: precision " + prec + " does not match requested type");
        }
        ModelConfig mc = model_config_from(cfg);
        FusionModel m(mc, cfg.get<std::uint64_t>("checkpoint.seed"));
        for (auto& p : m.params_) {
            mmt1::Array a = mmt1::read(dir / (p.name + ".mmt1"));
            if (a.dtype != mmt1::dtype_of<T>() || a.shape != p.tensor.shape()) {
                throw IoError("checkpoint: parameter " + p.name + " has wrong dtype/shape");
            }
            auto vals = a.values<T>();
            std::copy(vals.begin(), vals.end(), p.tensor.data().begin());
        }
        return m;
    }

private:
    void add_param(std::string name, Shape shape, std::size_t fan_in)
    {
        Tensor<T> t(std::move(shape));
        t.mark_parameter();
        index_[name] = params_.size();
        params_.push_back(NamedParam<T>{std::move(name), std::move(t), fan_in});
    }

    void add_dense(const std::string& prefix, std::size_t n_in, std::size_t n_out)
    {
        add_param(prefix + ".weight", Shape{n_out, n_in}, n_in);
        add_param(prefix + ".bias", Shape{n_out}, 0);
    }

    void build()
    {
        index_.clear();
        for (const auto& b : cfg_.branches) {
            const std::string s = to_string(b.kind);
            if (b.kind == BranchKind::Volume) {
                std::size_t c_in = 1;
                const std::size_t k = b.kernel;
                for (std::size_t i = 0; i < b.conv_channels.size(); ++i) {
                    const std::size_t c = b.conv_channels[i];
                    const std::string pre = s + ".conv" + std::to_string(i + 1);
                    add_param(pre + ".weight", Shape{c, c_in, k, k, k}, c_in * k * k * k);
                    add_param(pre + ".bias", Shape{c}, 0);
                    c_in = c;
                }
                std::size_t n_in = b.flatten_size();
                for (std::size_t i = 0; i < b.dense_widths.size(); ++i) {
                    add_dense(s + ".dense" + std::to_string(i + 1), n_in, b.dense_widths[i]);
                    n_in = b.dense_widths[i];
                }
                add_dense(s + ".dense" + std::to_string(b.dense_widths.size() + 1), n_in, b.latent_dim);
            } else {
                std::size_t f_in = 1;
                for (std::size_t i = 0; i < b.graph_widths.size(); ++i) {
                    const std::size_t f = b.graph_widths[i];
                    const std::string pre = s + ".gc" + std::to_string(i + 1);
                    if (b.kind == BranchKind::FuncGraph) {
                        add_param(pre + ".w_root", Shape{f_in, f}, f_in);
                        add_param(pre + ".w_nbr", Shape{f_in, f}, f_in);
                    } else {
                        for (std::size_t kk = 0; kk < b.cheb_k; ++kk) {
                            add_param(pre + ".theta" + std::to_string(kk), Shape{f_in, f},
                                      f_in * b.cheb_k);
                        }
                    }
                    add_param(pre + ".bias", Shape{f}, 0);
                    f_in = f;
                }
                add_dense(s + ".dense1", b.flatten_size(), b.latent_dim);
            }
        }
        std::size_t n_in = cfg_.fused_size();
        for (std::size_t i = 0; i < cfg_.head.hidden.size(); ++i) {
            add_dense("head.dense" + std::to_string(i + 1), n_in, cfg_.head.hidden[i]);
            n_in = cfg_.head.hidden[i];
        }
        add_dense("head.dense" + std::to_string(cfg_.head.hidden.size() + 1), n_in, cfg_.head.n_classes);
    }

    void copy_values_from(const FusionModel& other)
    {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto src = other.params_[i].tensor.data();
            std::copy(src.begin(), src.end(), params_[i].tensor.data().begin());
        }
    }

    const Tensor<T>& p(const std::string& name) const { return params_[index_.at(name)].tensor; }

    Tensor<T> forward_volume(ComputeGraph<T>& g, const BranchConfig& b, const Tensor<T>& vol) const
    {
        if (!vol.defined() || vol.rank() != 4 || vol.dim(0) != 1 || vol.dim(1) != b.input_shape[0]
            || vol.dim(2) != b.input_shape[1] || vol.dim(3) != b.input_shape[2]) {
            throw ContractError("volume branch: expected input [1x" + std::to_string(b.input_shape[0]) + "x"
                                + std::to_string(b.input_shape[1]) + "x" + std::to_string(b.input_shape[2])
                                + "], got " + (vol.defined() ? shape_str(vol.shape()) : "none"));
        }
        Tensor<T> h = vol;
        for (std::size_t i = 0; i < b.conv_channels.size(); ++i) {
            const std::string pre = "volume.conv" + std::to_string(i + 1);
            h = ops::relu(g, ops::conv3d(g, h, p(pre + ".weight"), p(pre + ".bias"), b.stride, b.padding));
            if (std::find(b.pool_after.begin(), b.pool_after.end(), i + 1) != b.pool_after.end()) {
                h = ops::maxpool3d(g, h, b.pool_window, b.pool_window);
            }
        }
        h = ops::reshape(g, h, Shape{h.size()});
        for (std::size_t i = 0; i <= b.dense_widths.size(); ++i) {
            const std::string pre = "volume.dense" + std::to_string(i + 1);
            h = ops::relu(g, ops::dense(g, h, p(pre + ".weight"), p(pre + ".bias")));
        }
        return h;
    }

    Tensor<T> forward_func(ComputeGraph<T>& g, const BranchConfig& b, const Tensor<T>& A,
                           const Tensor<T>& X) const
    {
        if (!A.defined() || A.rank() != 2 || A.dim(0) != b.n_nodes || A.dim(1) != b.n_nodes
            || !X.defined() || X.dim(0) != b.n_nodes) {
            throw ContractError("func branch: expected " + std::to_string(b.n_nodes) + "-node graph, got "
                                + (A.defined() ? shape_str(A.shape()) : "none"));
        }
        Tensor<T> h = X;
        for (std::size_t i = 0; i < b.graph_widths.size(); ++i) {
            const std::string pre = "func.gc" + std::to_string(i + 1);
            h = ops::relu(g, graph_conv(g, A, h, p(pre + ".w_root"), p(pre + ".w_nbr"), p(pre + ".bias")));
        }
        h = ops::reshape(g, h, Shape{h.size()});
        return ops::relu(g, ops::dense(g, h, p("func.dense1.weight"), p("func.dense1.bias")));
    }

    Tensor<T> forward_struct(ComputeGraph<T>& g, const BranchConfig& b, const Tensor<T>& L_hat,
                             const Tensor<T>& X) const
    {
        if (!L_hat.defined() || L_hat.rank() != 2 || L_hat.dim(0) != b.n_nodes
            || L_hat.dim(1) != b.n_nodes || !X.defined() || X.dim(0) != b.n_nodes) {
            throw ContractError("struct branch: expected " + std::to_string(b.n_nodes) + "-node graph, got "
                                + (L_hat.defined() ? shape_str(L_hat.shape()) : "none"));
        }
        Tensor<T> h = X;
        for (std::size_t i = 0; i < b.graph_widths.size(); ++i) {
            const std::string pre = "struct.gc" + std::to_string(i + 1);
            ChebFilterBank<T> filt;
            for (std::size_t k = 0; k < b.cheb_k; ++k) filt.theta.push_back(p(pre + ".theta" + std::to_string(k)));
            filt.bias = p(pre + ".bias");
            h = ops::relu(g, cheb_conv(g, L_hat, h, filt));
        }
        h = ops::reshape(g, h, Shape{h.size()});
        return ops::relu(g, ops::dense(g, h, p("struct.dense1.weight"), p("struct.dense1.bias")));
    }

    ModelConfig cfg_;
    std::uint64_t seed_ = 0;
    std::vector<NamedParam<T>> params_;
    std::map<std::string, std::size_t> index_;
};

/// Branch plus its own classifier head (latent -> 128 -> 32 -> 2).
template <class T>
FusionModel<T> unimodal_model(BranchKind kind, const ModelConfig& full, std::uint64_t seed)
{
    return FusionModel<T>(ModelConfig::unimodal(full, kind), seed);
}

} // namespace multifuse

#endif
