#pragma once

#include <cstddef>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace mdseg {

/// A differentiable operation. Ops may keep state from forward() for use in backward()
/// (pooling masks, im2col buffers); a Graph owns each Op exclusively.
class Op {
public:
    virtual ~Op() = default;
    virtual const char* kind() const = 0;

    virtual Tensor forward(std::span<const Tensor* const> inputs) = 0;

    /// Accumulates (+=) input gradients. Entries of `grads` are null for inputs that
    /// do not require a gradient.
    virtual void backward(std::span<const Tensor* const> inputs, const Tensor& output, const Tensor& grad_output,
                          std::span<Tensor* const> grads) = 0;
};

class Graph;

/// Handle to a node of a Graph.
struct Var {
    Graph* graph = nullptr;
    std::size_t index = std::numeric_limits<std::size_t>::max();

    bool valid() const { return graph != nullptr; }
};

using Bindings = std::map<std::string, Tensor>;
using Gradients = std::map<std::string, Tensor>;

/// Static computation graph with reverse-mode differentiation.
///
/// Nodes are appended in topological order (an op can only reference existing nodes).
/// evaluate() runs every node front to back and caches values; backprop() walks from
/// the root back to the first node, visiting each node once. A node with several
/// consumers receives the sum of their gradient contributions.
///
/// Parameters are non-owning references to tensors held elsewhere (usually a Model),
/// so an optimizer can update them in place between evaluations.
class Graph {
public:
    enum class NodeKind { input, parameter, constant, op };

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var input(std::string name, Shape shape) {
        Node n;
        n.kind = NodeKind::input;
        n.name = std::move(name);
        n.input_shape = shape;
        return push(std::move(n));
    }

    Var parameter(std::string name, Tensor& storage) {
        Node n;
        n.kind = NodeKind::parameter;
        n.name = std::move(name);
        n.storage = &storage;
        n.requires_grad = true;
        return push(std::move(n));
    }

    Var constant(Tensor value, std::string name = {}) {
        Node n;
        n.kind = NodeKind::constant;
        n.name = std::move(name);
        n.value = std::move(value);
        return push(std::move(n));
    }

    Var apply(std::unique_ptr<Op> op, std::vector<Var> inputs, std::string name = {}) {
        Node n;
        n.kind = NodeKind::op;
        n.name = name.empty() ? std::string(op->kind()) + "#" + std::to_string(nodes_.size()) : std::move(name);
        for (const Var& v : inputs) {
            if (v.graph != this || v.index >= nodes_.size())
                throw Error("node '" + n.name + "' references a node of another graph");
            n.inputs.push_back(v.index);
            n.requires_grad = n.requires_grad || nodes_[v.index].requires_grad;
        }
        n.op = std::move(op);
        return push(std::move(n));
    }

    /// Whether bound inputs receive gradients (on by default; training turns it off).
    void set_input_gradients(bool enabled) {
        input_grads_ = enabled;
        refresh_requires_grad();
    }

    void set_root(Var v) { root_ = checked(v).index; }
    Var root() const { return {const_cast<Graph*>(this), root_index()}; }

    std::size_t size() const { return nodes_.size(); }

    /// Runs the forward pass with the given input bindings and returns the root value.
    const Tensor& evaluate(Bindings inputs) {
        bindings_ = std::move(inputs);
        return evaluate();
    }

    /// Replaces the input bindings without evaluating; the next evaluation is a full pass.
    void bind(Bindings inputs) {
        bindings_ = std::move(inputs);
        evaluated_count_ = 0;
    }

    /// Re-runs the forward pass with the most recent bindings.
    const Tensor& evaluate() { return evaluate_from(0); }

    /// Evaluates only nodes appended since the last evaluation (e.g. a loss built on
    /// top of an evaluated forward pass). Falls back to a full pass if nothing ran yet.
    const Tensor& evaluate_pending() { return evaluate_from(evaluated_count_); }

    /// Reverse pass from the root. Returns gradients of every named input and parameter.
    Gradients backprop(const Tensor& seed) {
        if (!evaluated_) throw Error("backprop called before evaluate");
        const std::size_t root = root_index();
        if (!(seed.shape() == nodes_[root].value.shape()))
            throw ShapeError("seed shape " + seed.shape().str() + " does not match root shape " +
                             nodes_[root].value.shape().str());
        for (Node& n : nodes_) {
            n.grad = Tensor();
            n.has_grad = false;
        }
        nodes_[root].grad = seed;
        nodes_[root].has_grad = true;

        std::vector<const Tensor*> args;
        std::vector<Tensor*> grads;
        for (std::size_t i = root + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.kind != NodeKind::op || !n.has_grad || !n.requires_grad) continue;
            if (!n.grad.all_finite()) throw NumericError("non-finite gradient at node '" + n.name + "'");
            args.clear();
            grads.clear();
            for (std::size_t j : n.inputs) {
                Node& in = nodes_[j];
                args.push_back(&in.value);
                if (in.requires_grad) {
                    if (!in.has_grad) {
                        in.grad = Tensor(in.value.shape());
                        in.has_grad = true;
                    }
                    grads.push_back(&in.grad);
                } else {
                    grads.push_back(nullptr);
                }
            }
            n.op->backward(args, n.value, n.grad, grads);
        }

        Gradients out;
        for (Node& n : nodes_) {
            if (n.kind != NodeKind::input && n.kind != NodeKind::parameter) continue;
            if (!n.requires_grad) continue;
            if (n.has_grad && !n.grad.all_finite()) throw NumericError("non-finite gradient at node '" + n.name + "'");
            out[n.name] = n.has_grad ? n.grad : Tensor(n.value.shape());
        }
        return out;
    }

    const Tensor& value(Var v) const { return nodes_[checked(v).index].value; }

    /// Gradient of the root w.r.t. a node after backprop(); zeros if the node is off the root's path.
    Tensor grad(Var v) const {
        const Node& n = nodes_[checked(v).index];
        return n.has_grad ? n.grad : Tensor(n.value.shape());
    }

    Op* op(Var v) { return nodes_[checked(v).index].op.get(); }
    const std::string& name(Var v) const { return nodes_[checked(v).index].name; }
    NodeKind kind(Var v) const { return nodes_[checked(v).index].kind; }
    bool evaluated() const { return evaluated_; }
    Var node(std::size_t index) { return checked({this, index}); }

    /// Finds an input or parameter by name.
    Var find_leaf(std::string_view name) {
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const Node& n = nodes_[i];
            if ((n.kind == NodeKind::input || n.kind == NodeKind::parameter) && n.name == name) return {this, i};
        }
        throw Error("no input or parameter named '" + std::string(name) + "'");
    }

    /// Mutable access to the tensor a leaf reads from: the parameter storage or the input binding.
    Tensor& leaf_tensor(Var v) {
        Node& n = nodes_[checked(v).index];
        if (n.kind == NodeKind::parameter) return *n.storage;
        if (n.kind == NodeKind::input) {
            auto it = bindings_.find(n.name);
            if (it == bindings_.end()) throw Error("input '" + n.name + "' is not bound");
            return it->second;
        }
        throw Error("node '" + n.name + "' is not a leaf");
    }

    /// Names of all trainable parameters, in insertion order.
    std::vector<std::string> parameter_names() const {
        std::vector<std::string> names;
        for (const Node& n : nodes_)
            if (n.kind == NodeKind::parameter) names.push_back(n.name);
        return names;
    }

private:
    struct Node {
        NodeKind kind = NodeKind::constant;
        std::string name;
        std::vector<std::size_t> inputs;
        std::unique_ptr<Op> op;
        Tensor* storage = nullptr;
        Shape input_shape;
        Tensor value;
        Tensor grad;
        bool has_grad = false;
        bool requires_grad = false;
    };

    const Tensor& evaluate_from(std::size_t first) {
        std::vector<const Tensor*> args;
        for (std::size_t i = first; i < nodes_.size(); ++i) {
            Node& n = nodes_[i];
            switch (n.kind) {
            case NodeKind::input: {
                auto it = bindings_.find(n.name);
                if (it == bindings_.end()) throw Error("input '" + n.name + "' is not bound");
                if (!(it->second.shape() == n.input_shape))
                    throw ShapeError("input '" + n.name + "' expects shape " + n.input_shape.str() + ", got " +
                                     it->second.shape().str());
                n.value = it->second;
                break;
            }
            case NodeKind::parameter:
                n.value = *n.storage;
                break;
            case NodeKind::constant:
                break;
            case NodeKind::op: {
                args.clear();
                for (std::size_t j : n.inputs) args.push_back(&nodes_[j].value);
                try {
                    n.value = n.op->forward(args);
                } catch (const ShapeError& e) {
                    throw ShapeError("node '" + n.name + "': " + e.what());
                } catch (const ArgumentError& e) {
                    throw ArgumentError("node '" + n.name + "': " + e.what());
                }
                if (!n.value.all_finite()) throw NumericError("non-finite value produced at node '" + n.name + "'");
                break;
            }
            }
        }
        evaluated_ = true;
        evaluated_count_ = nodes_.size();
        return nodes_[root_index()].value;
    }

    Var push(Node n) {
        if (n.kind == NodeKind::input) n.requires_grad = input_grads_;
        nodes_.push_back(std::move(n));
        evaluated_ = false;
        return {this, nodes_.size() - 1};
    }

    void refresh_requires_grad() {
        for (Node& n : nodes_) {
            if (n.kind == NodeKind::input) n.requires_grad = input_grads_;
            if (n.kind != NodeKind::op) continue;
            n.requires_grad = false;
            for (std::size_t j : n.inputs) n.requires_grad = n.requires_grad || nodes_[j].requires_grad;
        }
    }

    const Var& checked(const Var& v) const {
        if (v.graph != this || v.index >= nodes_.size()) throw Error("variable does not belong to this graph");
        return v;
    }

    std::size_t root_index() const {
        if (nodes_.empty()) throw Error("empty graph");
        return root_ == kNoRoot ? nodes_.size() - 1 : root_;
    }

    static constexpr std::size_t kNoRoot = std::numeric_limits<std::size_t>::max();

    std::vector<Node> nodes_;
    Bindings bindings_;
    std::size_t root_ = kNoRoot;
    bool input_grads_ = true;
    bool evaluated_ = false;
    std::size_t evaluated_count_ = 0;
};

/// Central-difference gradient check of the root w.r.t. one leaf.
///
/// The checked scalar is sum(root * seed); `seed` defaults to all ones. Returns the
/// largest |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) over the leaf's
/// coordinates. The leaf is restored exactly afterwards.
inline Scalar finite_difference_check(Graph& graph, std::string_view leaf, Scalar eps, const Tensor* seed = nullptr) {
    if (!(eps > 0)) throw ArgumentError("finite_difference_check: eps must be positive");
    Var v = graph.find_leaf(leaf);
    const Tensor& root_value = graph.evaluate();
    const Tensor weights = seed ? *seed : Tensor(root_value.shape(), 1);
    Gradients grads = graph.backprop(weights);
    const Tensor analytic = grads.at(std::string(leaf));

    Tensor& x = graph.leaf_tensor(v);
    Scalar worst = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const Scalar saved = x[i];
        x[i] = saved + eps;
        const Scalar f_plus = dot(graph.evaluate(), weights);
        x[i] = saved - eps;
        const Scalar f_minus = dot(graph.evaluate(), weights);
        x[i] = saved;
        const Scalar numeric = (f_plus - f_minus) / (2 * eps);
        if (!std::isfinite(numeric) || !std::isfinite(analytic[i]))
            throw NumericError("finite_difference_check: non-finite derivative for '" + std::string(leaf) + "'");
        const Scalar denom = std::max({std::abs(analytic[i]), std::abs(numeric), Scalar(1e-8)});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    graph.evaluate();
    return worst;
}

} // namespace mdseg
