#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dblend/tensor.hpp"

namespace dblend {

using NodeId = std::uint32_t;
inline constexpr NodeId no_node = ~NodeId(0);

enum class Op : std::uint8_t {
    leaf,
    matmul,
    conv2d,
    add,
    scale,
    mul,
    silu,
    group_norm,
    softmax,
    reshape,
    transpose,
    mean,
    abs,
    concat,
    embedding,
    upsample2x,
    downsample2x,
};

const char* op_name(Op op);

// Reverse-mode tape over a fixed primitive set. Every primitive is evaluated
// eagerly when recorded; the tape can later be replayed from rebound leaves.
//
// Shapes: conv2d/group_norm/up/downsample operate on [C,H,W]; matmul and
// transpose on rank-2 tensors; softmax normalizes the last dimension. The only
// broadcast is add() with a rank-0 operand.
template <typename T>
class Tape {
   public:
    using tensor_type = BasicTensor<T>;

    NodeId leaf(tensor_type value, std::string name = {});

    NodeId matmul(NodeId a, NodeId b);
    NodeId conv2d(NodeId x, NodeId weight, NodeId bias = no_node);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b) { return add(a, scale(b, T(-1))); }
    NodeId scale(NodeId a, T factor);
    NodeId mul(NodeId a, NodeId b);
    NodeId silu(NodeId a);
    NodeId group_norm(NodeId x, NodeId gamma, NodeId beta, std::size_t groups, T eps = T(1e-5));
    NodeId softmax(NodeId a);
    NodeId reshape(NodeId a, Shape shape);
    NodeId transpose(NodeId a);
    NodeId mean(NodeId a);
    NodeId abs(NodeId a);
    NodeId concat(std::span<const NodeId> parts, std::size_t axis);
    NodeId embedding(NodeId table, std::vector<int> ids);
    NodeId upsample2x(NodeId x);
    NodeId downsample2x(NodeId x);

    const tensor_type& value(NodeId id) const { return nodes_.at(id).value; }
    Op op(NodeId id) const { return nodes_.at(id).op; }
    std::span<const NodeId> inputs(NodeId id) const { return nodes_.at(id).inputs; }
    std::size_t size() const noexcept { return nodes_.size(); }

    void set_name(NodeId id, std::string name);
    const std::string& name(NodeId id) const { return nodes_.at(id).name; }
    NodeId find(const std::string& name) const;

    // Replace a leaf's value; the shape must not change. Call replay() afterwards.
    void bind(NodeId leaf_id, tensor_type value);
    void bind(const std::string& name, tensor_type value) { bind(find(name), std::move(value)); }

    // Recompute every non-leaf node from the current leaf values, in recording order.
    void replay();

    // Gradients of a rank-0 node with respect to each node in `wrt`. Nodes that
    // the output does not depend on receive zeros.
    std::vector<tensor_type> backward(NodeId output, std::span<const NodeId> wrt) const;

    // Test hook: scales the gradient emitted by one primitive's backward rule.
    void corrupt_backward(Op op, T factor) {
        corrupt_op_ = op;
        corrupt_factor_ = factor;
    }

   private:
    struct Node {
        Op op = Op::leaf;
        std::vector<NodeId> inputs;
        tensor_type value;
        std::string name;
        std::vector<tensor_type> saved;
        std::vector<int> ids;
        Shape shape_attr;
        T scalar = T(0);
        std::size_t count = 0;
    };

    NodeId push(Node node);
    void evaluate(Node& node) const;
    void backward_node(const Node& node, const tensor_type& grad, std::vector<tensor_type>& grads,
                       std::vector<bool>& have, const std::vector<bool>& live) const;
    void check(NodeId id) const;

    std::vector<Node> nodes_;
    Op corrupt_op_ = Op::leaf;
    T corrupt_factor_ = T(1);
};

// Rebinds the named leaves, replays the tape, and returns every named node's value.
template <typename T>
std::map<std::string, BasicTensor<T>> forward_eval(Tape<T>& tape,
                                                   const std::map<std::string, BasicTensor<T>>& leaf_values);

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t coords_checked = 0;
    bool passed = false;
};

// Compares backward() against central finite differences (step 1e-5) on
// every coordinate of `wrt`, or on a seeded sample of `max_coords`
// coordinates when the tensor is larger. The relative error of one
// coordinate is |a - n| / max(|a|, |n|, floor), where floor is 1e-8 scaled by
// the largest numeric gradient magnitude observed.
GradCheckReport grad_check(Tape<double>& tape, NodeId output, NodeId wrt, double tolerance,
                           std::size_t max_coords = 0, std::uint64_t seed = 0);

std::string describe(const GradCheckReport& report);

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace dblend
