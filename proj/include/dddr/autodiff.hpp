#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dddr/tensor.hpp"

namespace dddr {

/// Handle to a node on a Tape.
struct Var {
  int id = -1;
  bool valid() const noexcept { return id >= 0; }
};

/// Reverse-mode tape over a closed set of kernels.
///
/// Every kernel validates shapes (ShapeError naming the kernel and shapes) and
/// checks its output for NaN/Inf (NumericError naming the kernel). Reductions
/// accumulate in double in index-ascending order; matmul goes through Eigen's
/// single-threaded GEMM, which is deterministic for a fixed build.
template <class T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;

  /// Leaf without gradient.
  Var constant(TensorT value);
  /// Leaf whose gradient is tracked.
  Var parameter(TensorT value);

  // Rank-2 kernels. Rank-1 operands are treated as a single row.
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  /// Same-shape addition, or row-broadcast of `b` with b.size() == a.cols().
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  /// scale * a + shift
  Var affine(Var a, T scale, T shift = T{0});
  Var relu(Var a);
  Var silu(Var a);
  Var square(Var a);
  Var softmax(Var a);
  Var log_softmax(Var a);
  Var l2_normalize(Var a);
  /// Column concatenation; row counts must agree.
  Var concat(Var a, Var b);
  Var sum(Var a);
  Var mean(Var a);

  const TensorT& value(Var v) const { return node(v).value; }
  T scalar(Var v) const;
  /// Gradient accumulated by backward(); zeros if the node received none.
  TensorT grad(Var v) const;
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Seeds d(loss)/d(loss) = 1 and propagates. `loss` must hold one value.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  enum class Op : std::uint8_t {
    Leaf, MatMul, Transpose, Add, AddRow, Sub, Mul, Affine, Relu, Silu, Square,
    Softmax, LogSoftmax, L2Normalize, Concat, Sum, Mean,
  };
  struct Node {
    Op op = Op::Leaf;
    int a = -1;
    int b = -1;
    T s0{};
    bool requires_grad = false;
    TensorT value;
    std::vector<T> grad;
  };

  const Node& node(Var v) const;
  Var push(Op op, int a, int b, TensorT value, T s0 = T{});
  static const char* op_name(Op op);
  void accumulate(int id, const std::vector<T>& g);
  std::vector<T>& grad_buffer(int id);

  std::vector<Node> nodes_;
};

extern template class Tape<float>;
extern template class Tape<double>;

/// Parameter-name -> tape handle.
using ParamVars = std::map<std::string, Var>;

template <class T>
ParamVars bind_params(Tape<T>& tape, const BasicParamSet<T>& params, bool trainable);

template <class T>
BasicParamSet<T> collect_grads(const Tape<T>& tape, const BasicParamSet<T>& params, const ParamVars& vars);

/// A loss graph builder: receives the tape and bound parameters, returns the
/// scalar loss handle.
template <class T>
using GraphFn = std::function<Var(Tape<T>&, const ParamVars&)>;

template <class T>
struct Evaluation {
  T loss{};
  BasicParamSet<T> grads;
};

/// Builds the graph over `trainable` (gradients returned for each entry) and
/// `frozen` (bound as constants, no gradients).
template <class T>
Evaluation<T> evaluate_with_gradients(const GraphFn<T>& f, const BasicParamSet<T>& trainable,
                                      const BasicParamSet<T>& frozen = {});

/// Forward-only evaluation.
template <class T>
T evaluate(const GraphFn<T>& f, const BasicParamSet<T>& params);

// Standalone kernels on row-major matrices (no tape), used by evaluation code.
template <class T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> log_softmax_rows(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> l2_normalize_rows(const BasicTensor<T>& x);

}  // namespace dddr
