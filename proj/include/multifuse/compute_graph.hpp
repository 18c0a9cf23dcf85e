#ifndef MULTIFUSE_COMPUTE_GRAPH_HPP
#define MULTIFUSE_COMPUTE_GRAPH_HPP

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "multifuse/errors.hpp"
#include "multifuse/tensor.hpp"

namespace multifuse {

/// How ReLU propagates gradients during a backward pass.
///   Standard           : pass where forward input > 0
///   Guided             : pass where forward input > 0 and upstream gradient > 0
///   GuidedGradientOnly : pass where upstream gradient > 0 (forward mask ignored)
enum class ReluBackwardMode { Standard, Guided, GuidedGradientOnly };

inline const char* to_string(ReluBackwardMode m)
{
    switch (m) {
    case ReluBackwardMode::Standard: return "standard";
    case ReluBackwardMode::Guided: return "guided";
    case ReluBackwardMode::GuidedGradientOnly: return "guided-gradient-only";
    }
    return "?";
}

#ifdef NDEBUG
inline constexpr bool kCheckFiniteDefault = false;
#else
inline constexpr bool kCheckFiniteDefault = true;
#endif

/// Tape of primitive operations recorded during a forward pass.
///
/// Nodes are appended in execution order, so reverse iteration is a valid
/// topological order and every node is visited exactly once per backward().
/// Leaf tensors (parameters, inputs) accumulate into their grad buffers;
/// intermediate gradients are reset at the start of each backward().
template <class T>
class ComputeGraph {
public:
    struct Node {
        std::string op;
        std::vector<std::size_t> parents; // indices of producing nodes; leaves omitted
        Tensor<T> output;
        std::function<void()> backward;
    };

    using ReluHook = std::function<void(std::span<const T>)>;

    ComputeGraph() = default;
    ComputeGraph(const ComputeGraph&) = delete;
    ComputeGraph& operator=(const ComputeGraph&) = delete;

    void set_relu_mode(ReluBackwardMode mode)
    {
        if (in_backward_) throw UsageError("set_relu_mode: backward pass in flight");
        relu_mode_ = mode;
    }
    ReluBackwardMode relu_mode() const { return relu_mode_; }

    /// When false, parameter leaves are treated as constants (no dW work).
    void set_track_parameters(bool on) { track_parameters_ = on; }
    bool track_parameters() const { return track_parameters_; }

    void set_check_finite(bool on) { check_finite_ = on; }
    bool check_finite() const { return check_finite_; }

    /// Called with the gradient each ReLU hands to its input, after masking.
    void set_relu_hook(ReluHook hook) { relu_hook_ = std::move(hook); }
    const ReluHook& relu_hook() const { return relu_hook_; }

    bool in_backward() const { return in_backward_; }

    bool needs_grad(const Tensor<T>& t) const
    {
        return t.defined() && t.requires_grad() && (track_parameters_ || !t.is_parameter());
    }

    bool any_needs_grad(std::initializer_list<std::reference_wrapper<const Tensor<T>>> ts) const
    {
        for (const Tensor<T>& t : ts) {
            if (needs_grad(t)) return true;
        }
        return false;
    }

    /// Register an op output. `backward` reads output.grad() and accumulates into inputs.
    Tensor<T> record(std::string op, Tensor<T> output,
                     std::initializer_list<std::reference_wrapper<const Tensor<T>>> inputs,
                     std::function<void()> backward)
    {
        std::vector<const void*> ids;
        for (const Tensor<T>& in : inputs) ids.push_back(in.identity());
        return record_impl(std::move(op), std::move(output), ids, std::move(backward));
    }

    Tensor<T> record_list(std::string op, Tensor<T> output, const std::vector<Tensor<T>>& inputs,
                          std::function<void()> backward)
    {
        std::vector<const void*> ids;
        for (const auto& in : inputs) ids.push_back(in.identity());
        return record_impl(std::move(op), std::move(output), ids, std::move(backward));
    }

    void backward(Tensor<T>& loss)
    {
        if (loss.size() != 1) {
            throw UsageError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        }
        if (in_backward_) throw UsageError("backward: re-entrant call");
        if (!loss.requires_grad()) return;

        struct Guard {
            bool& flag;
            explicit Guard(bool& f) : flag(f) { flag = true; }
            ~Guard() { flag = false; }
        } guard(in_backward_);

        for (auto& n : nodes_) n.output.zero_grad();
        loss.grad()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->backward) it->backward();
        }
    }

    const std::vector<Node>& nodes() const { return nodes_; }
    std::size_t size() const { return nodes_.size(); }

private:
    Tensor<T> record_impl(std::string op, Tensor<T> output, const std::vector<const void*>& inputs,
                          std::function<void()> backward)
    {
        if (check_finite_ && !output.all_finite()) {
            throw NumericError(op + ": non-finite value in output " + shape_str(output.shape()));
        }
        if (!output.requires_grad()) return output; // constant subgraph, nothing to record
        Node node;
        node.op = std::move(op);
        for (const void* id : inputs) {
            auto it = index_.find(id);
            if (it != index_.end()) node.parents.push_back(it->second);
        }
        node.output = output;
        node.backward = std::move(backward);
        index_.emplace(output.identity(), nodes_.size());
        nodes_.push_back(std::move(node));
        return output;
    }

    std::vector<Node> nodes_;
    std::unordered_map<const void*, std::size_t> index_;
    ReluBackwardMode relu_mode_ = ReluBackwardMode::Standard;
    ReluHook relu_hook_;
    bool track_parameters_ = true;
    bool check_finite_ = kCheckFiniteDefault;
    bool in_backward_ = false;
};

} // namespace multifuse

#endif
