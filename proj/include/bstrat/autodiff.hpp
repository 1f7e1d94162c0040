#pragma once
// Reverse-mode automatic differentiation on a tape.
//
// Ops append nodes to a Tape; backward() sweeps the tape in reverse creation
// order (which is a valid topological order) accumulating gradients.  The
// graph is rebuilt every step - parameters enter through leaf nodes that copy
// the current value in and route gradients back out to Param::grad.
//
// Everything is double precision: the acceptance gradient checks compare
// analytic gradients against float64 central differences at 1e-4 relative
// error, which float32 arithmetic could not satisfy.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "bstrat/tensor.hpp"

namespace bstrat::ad {

// A trainable parameter.  Gradients accumulate across backward passes until
// zero_grad().  Optimizer state lives in the optimizer, keyed by pointer.
struct Param {
  Tensor value;
  Tensor grad;

  Param() = default;
  explicit Param(Tensor t) : value(std::move(t)), grad(value.shape) {}

  void zero_grad() {
    if (grad.shape != value.shape) grad = Tensor(value.shape);
    grad.fill(0.0);
  }
};

using NamedParams = std::vector<std::pair<std::string, Param*>>;

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& val() const;
  double scalar() const { return val().at(0); }
};

struct Node {
  Tensor val;
  Tensor grad;
  bool requires_grad = false;
  bool grad_alloc = false;
  Param* param = nullptr;
  std::function<void(Tape&, int)> backward;  // (tape, own node id)
};

class Tape {
 public:
  std::vector<Node> nodes;

  void clear() { nodes.clear(); }

  int push(Tensor val, bool requires_grad) {
    Node n;
    n.val = std::move(val);
    n.requires_grad = requires_grad;
    nodes.push_back(std::move(n));
    return static_cast<int>(nodes.size()) - 1;
  }

  Var var(int id) { return Var{this, id}; }

  // Gradient buffer of a node, allocated (zeroed) on first touch.
  Tensor& grad(int id) {
    Node& n = nodes[static_cast<size_t>(id)];
    if (!n.grad_alloc) {
      n.grad = Tensor(n.val.shape);
      n.grad_alloc = true;
    }
    return n.grad;
  }

  bool has_grad(int id) const { return nodes[static_cast<size_t>(id)].grad_alloc; }

  // Reverse sweep from a scalar loss.  Parameter leaves accumulate into
  // their Param::grad at the end.
  void backward(Var loss);
};

// ----- graph construction ----------------------------------------------------

Var constant(Tape& t, Tensor value);
Var leaf(Tape& t, Tensor value, bool requires_grad);
Var param(Tape& t, Param& p);

// elementwise / shape
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var square(Var a);
Var reshape(Var a, std::vector<int> shape);
Var permute01(Var a);         // [A,B,d] -> [B,A,d]
Var transpose_last2(Var a);   // [B,C,L] -> [B,L,C]
Var mean_axis1(Var a);        // [A,B,d] -> [A,d]
Var sum_all(Var a);           // -> [1]
Var mean_all(Var a);          // -> [1]
Var abs_op(Var a);
Var gather_rows(Var a, std::vector<int> rows);                     // [N,d] -> [|rows|,d]
Var concat_rows(const std::vector<Var>& parts);                    // [Ni,d] each -> [sum Ni, d]
Var rows_dot(Var a, Var b);                                        // [N,d],[N,d] -> [N]
Var mask_replace_rows(Var a, Var token, std::vector<int> rows);    // token: [d] or [1,d]
Var unfold_rows(Var a, int window);                                // [N,d] -> [N-w+1, w*d]
Var add_cols_broadcast(Var a, Var p);  // [A,B,d] + [B,d]  (positions)
Var add_rows_broadcast(Var a, Var e);  // [A,B,d] + [A,d]  (per-row embeddings)
Var add_cols_const(Var a, const Tensor& p);  // [A,B,d] + const [B,d]

// activations
Var relu(Var a);
Var gelu(Var a);
Var tanh_act(Var a);
Var dropout_mask(Var a, const Tensor& mask);  // mask entries are 0 or 1/(1-p)

// linear algebra
Var matmul(Var a, Var b);                    // [m,k] x [k,n]
Var linear(Var x, Var W, Var b);             // [N,din] x [din,dout] + [dout]; b may be invalid
Var conv1d(Var x, Var w, Var b, int stride, int pad);
Var conv1d_transpose(Var x, Var w, Var b, int stride, int pad, int out_pad);
Var layer_norm(Var x, Var gamma, Var beta, double eps);      // x: [N,d]
Var group_norm(Var x, Var gamma, Var beta, int groups, double eps);  // x: [B,C,L]

// attention core: q,k,v [S,L,hd]; returns output [S,L,hd]; *probs_out (optional)
// receives the row-softmax probabilities [S,L,L] as a non-differentiable node.
Var attention(Var q, Var k, Var v, double att_scale, Var* probs_out);

// head split/merge for multi-head attention
Var split_heads(Var x, int S, int L, int H);  // [S,L,d] -> [S*H, L, d/H]
Var merge_heads(Var x, int S, int L, int H);  // [S*H,L,hd] -> [S,L,hd*H]

// quantization: forward emits `quantized` values, backward passes gradients
// through to `x` unchanged (straight-through).
Var straight_through(Var x, const Tensor& quantized);
Var detach(Var x);

// losses (scalar outputs)
Var bce_with_logits_mean(Var logits, const Tensor& targets01);
// sum over rows of row_weight[r] * CE(logits[r], target[r]); target < 0 -> weight forced 0
Var cross_entropy_rows(Var logits, std::vector<int> targets, std::vector<double> row_weights);
// negative log-likelihood of `labels` under CTC alignment; labels exclude blanks
Var ctc_loss(Var logits, std::vector<int> labels, int blank);

}  // namespace bstrat::ad
