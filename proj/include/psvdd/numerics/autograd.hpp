#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "psvdd/numerics/tensor.hpp"

namespace psvdd::numerics {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool leaf = true;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward_fn;
};

/// Handle to a value in the computation graph. Copies share the node.
///
/// Leaves created with `parameter` track gradients; leaves created with
/// `constant` do not. An op records its inputs only when at least one of them
/// tracks gradients, so inference over frozen weights builds no graph.
template <typename T>
class Var {
   public:
    Var() = default;

    static Var constant(Tensor<T> value);
    static Var parameter(Tensor<T> value);
    static Var from_op(Tensor<T> value, std::vector<Var> inputs, std::function<void(Node<T>&)> backward_fn);

    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& mutable_grad() { return node_->grad; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool valid() const { return node_ != nullptr; }

    void zero_grad();
    /// Freezes or unfreezes a leaf; frozen leaves are not recorded by later ops.
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    const std::shared_ptr<Node<T>>& node() const { return node_; }

   private:
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}
    std::shared_ptr<Node<T>> node_;
};

/// Valid 2-D convolution. `input` is [H,W,Cin] or batched [N,H,W,Cin];
/// `kernel` is [kh,kw,Cin,Cout]; `bias` is [Cout].
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const Var<T>& bias, std::size_t stride);

/// Elementwise max(x, alpha*x). The derivative at exactly 0 is alpha.
template <typename T>
Var<T> leaky_relu(const Var<T>& x, T alpha);

/// `input` [n] or [B,n] times `weight` [n,m] plus `bias` [m].
template <typename T>
Var<T> linear(const Var<T>& input, const Var<T>& weight, const Var<T>& bias);

/// -log softmax(logits)[label] for logits [k].
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, int label);

/// Mean cross-entropy over the rows of logits [B,k].
template <typename T>
Var<T> softmax_cross_entropy_mean(const Var<T>& logits, std::span<const int> labels);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
/// a [B,D] minus row [D] broadcast over B.
template <typename T>
Var<T> sub_row(const Var<T>& a, const Var<T>& row);
template <typename T>
Var<T> scale(const Var<T>& a, T factor);
template <typename T>
Var<T> sum(const Var<T>& a);
template <typename T>
Var<T> mean(const Var<T>& a);
template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape);
/// Rows [begin, end) along axis 0.
template <typename T>
Var<T> slice_rows(const Var<T>& a, std::size_t begin, std::size_t end);
/// sqrt(sum_j a[i,j]^2 + eps) for each row of a [B,D]; result [B].
template <typename T>
Var<T> row_norms(const Var<T>& a, T eps);

/// Reverse pass from a scalar. Leaf gradients accumulate across calls;
/// intermediate gradients are reset on every call.
template <typename T>
void backward(const Var<T>& loss);

}  // namespace psvdd::numerics
