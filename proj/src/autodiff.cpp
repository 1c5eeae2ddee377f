#include "dddr/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace dddr {
namespace {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const Mat<T>>;
template <class T>
using MapM = Eigen::Map<Mat<T>>;

template <class T>
void softmax_row(const T* x, T* y, std::size_t n) {
  T mx = x[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    y[j] = std::exp(x[j] - mx);
    s += static_cast<double>(y[j]);
  }
  const double inv = 1.0 / s;
  for (std::size_t j = 0; j < n; ++j) y[j] = static_cast<T>(static_cast<double>(y[j]) * inv);
}

template <class T>
void log_softmax_row(const T* x, T* y, std::size_t n) {
  T mx = x[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(static_cast<double>(x[j] - mx));
  const double lse = static_cast<double>(mx) + std::log(s);
  for (std::size_t j = 0; j < n; ++j) y[j] = static_cast<T>(static_cast<double>(x[j]) - lse);
}

template <class T>
double row_norm(const T* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += static_cast<double>(x[j]) * static_cast<double>(x[j]);
  return std::sqrt(s);
}

}  // namespace

template <class T>
const typename Tape<T>::Node& Tape<T>::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
    throw Error(ErrorKind::Usage, "tape: invalid variable handle");
  return nodes_[static_cast<std::size_t>(v.id)];
}

template <class T>
const char* Tape<T>::op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Add: return "add";
    case Op::AddRow: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Affine: return "affine";
    case Op::Relu: return "relu";
    case Op::Silu: return "silu";
    case Op::Square: return "square";
    case Op::Softmax: return "softmax";
    case Op::LogSoftmax: return "log_softmax";
    case Op::L2Normalize: return "l2_normalize";
    case Op::Concat: return "concat";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
  }
  return "?";
}

template <class T>
Var Tape<T>::push(Op op, int a, int b, TensorT value, T s0) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by kernel '") + op_name(op) + "'");
  Node n;
  n.op = op;
  n.a = a;
  n.b = b;
  n.s0 = s0;
  n.requires_grad = (a >= 0 && nodes_[static_cast<std::size_t>(a)].requires_grad) ||
                    (b >= 0 && nodes_[static_cast<std::size_t>(b)].requires_grad);
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

template <class T>
Var Tape<T>::constant(TensorT value) {
  if (value.empty()) throw ShapeError("leaf: empty tensor");
  return push(Op::Leaf, -1, -1, std::move(value));
}

template <class T>
Var Tape<T>::parameter(TensorT value) {
  Var v = constant(std::move(value));
  nodes_.back().requires_grad = true;
  return v;
}

template <class T>
Var Tape<T>::matmul(Var a, Var b) {
  const auto& A = node(a).value;
  const auto& B = node(b).value;
  if (A.cols() != B.rows() || A.rank() > 2 || B.rank() > 2)
    throw ShapeError("matmul: incompatible shapes " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  const auto m = static_cast<Eigen::Index>(A.rows()), k = static_cast<Eigen::Index>(A.cols()),
             n = static_cast<Eigen::Index>(B.cols());
  TensorT out(Shape{A.rows(), B.cols()});
  MapM<T>(out.data(), m, n).noalias() = MapC<T>(A.data(), m, k) * MapC<T>(B.data(), k, n);
  return push(Op::MatMul, a.id, b.id, std::move(out));
}

template <class T>
Var Tape<T>::transpose(Var a) {
  const auto& A = node(a).value;
  if (A.rank() > 2) throw ShapeError("transpose: rank > 2 input " + shape_str(A.shape()));
  const auto m = static_cast<Eigen::Index>(A.rows()), n = static_cast<Eigen::Index>(A.cols());
  TensorT out(Shape{A.cols(), A.rows()});
  MapM<T>(out.data(), n, m) = MapC<T>(A.data(), m, n).transpose();
  return push(Op::Transpose, a.id, -1, std::move(out));
}

template <class T>
Var Tape<T>::add(Var a, Var b) {
  const auto& A = node(a).value;
  const auto& B = node(b).value;
  if (A.shape() == B.shape()) {
    TensorT out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
    return push(Op::Add, a.id, b.id, std::move(out));
  }
  if (B.size() == A.cols() && B.rows() == 1) {
    TensorT out = A;
    const std::size_t n = A.cols();
    for (std::size_t r = 0; r < A.rows(); ++r)
      for (std::size_t c = 0; c < n; ++c) out[r * n + c] += B[c];
    return push(Op::AddRow, a.id, b.id, std::move(out));
  }
  throw ShapeError("add: incompatible shapes " + shape_str(A.shape()) + " + " + shape_str(B.shape()));
}

template <class T>
Var Tape<T>::sub(Var a, Var b) {
  const auto& A = node(a).value;
  const auto& B = node(b).value;
  if (A.shape() != B.shape())
    throw ShapeError("sub: incompatible shapes " + shape_str(A.shape()) + " - " + shape_str(B.shape()));
  TensorT out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  return push(Op::Sub, a.id, b.id, std::move(out));
}

template <class T>
Var Tape<T>::mul(Var a, Var b) {
  const auto& A = node(a).value;
  const auto& B = node(b).value;
  if (A.shape() != B.shape())
    throw ShapeError("mul: incompatible shapes " + shape_str(A.shape()) + " * " + shape_str(B.shape()));
  TensorT out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return push(Op::Mul, a.id, b.id, std::move(out));
}

template <class T>
Var Tape<T>::affine(Var a, T scale, T shift) {
  TensorT out = node(a).value;
  for (auto& v : out.values()) v = scale * v + shift;
  return push(Op::Affine, a.id, -1, std::move(out), scale);
}

template <class T>
Var Tape<T>::relu(Var a) {
  TensorT out = node(a).value;
  for (auto& v : out.values()) v = v > T{0} ? v : T{0};
  return push(Op::Relu, a.id, -1, std::move(out));
}

template <class T>
Var Tape<T>::silu(Var a) {
  TensorT out = node(a).value;
  for (auto& v : out.values()) v = v / (T{1} + std::exp(-v));
  return push(Op::Silu, a.id, -1, std::move(out));
}

template <class T>
Var Tape<T>::square(Var a) {
  TensorT out = node(a).value;
  for (auto& v : out.values()) v = v * v;
  return push(Op::Square, a.id, -1, std::move(out));
}

template <class T>
Var Tape<T>::softmax(Var a) {
  return push(Op::Softmax, a.id, -1, softmax_rows(node(a).value));
}

template <class T>
Var Tape<T>::log_softmax(Var a) {
  return push(Op::LogSoftmax, a.id, -1, log_softmax_rows(node(a).value));
}

template <class T>
Var Tape<T>::l2_normalize(Var a) {
  return push(Op::L2Normalize, a.id, -1, l2_normalize_rows(node(a).value));
}

template <class T>
Var Tape<T>::concat(Var a, Var b) {
  const auto& A = node(a).value;
  const auto& B = node(b).value;
  if (A.rows() != B.rows())
    throw ShapeError("concat: row counts differ " + shape_str(A.shape()) + " | " + shape_str(B.shape()));
  const std::size_t m = A.rows(), ka = A.cols(), kb = B.cols();
  TensorT out(Shape{m, ka + kb});
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(A.data() + r * ka, ka, out.data() + r * (ka + kb));
    std::copy_n(B.data() + r * kb, kb, out.data() + r * (ka + kb) + ka);
  }
  return push(Op::Concat, a.id, b.id, std::move(out));
}

template <class T>
Var Tape<T>::sum(Var a) {
  double s = 0.0;
  for (T v : node(a).value.values()) s += static_cast<double>(v);
  return push(Op::Sum, a.id, -1, TensorT::scalar(static_cast<T>(s)));
}

template <class T>
Var Tape<T>::mean(Var a) {
  const auto& A = node(a).value;
  double s = 0.0;
  for (T v : A.values()) s += static_cast<double>(v);
  return push(Op::Mean, a.id, -1, TensorT::scalar(static_cast<T>(s / static_cast<double>(A.size()))));
}

template <class T>
T Tape<T>::scalar(Var v) const {
  const auto& t = node(v).value;
  if (t.size() != 1) throw ShapeError("scalar: tensor " + shape_str(t.shape()) + " is not a scalar");
  return t[0];
}

template <class T>
typename Tape<T>::TensorT Tape<T>::grad(Var v) const {
  const auto& n = node(v);
  if (n.grad.empty()) return TensorT(n.value.shape());
  return TensorT(n.value.shape(), n.grad);
}

template <class T>
std::vector<T>& Tape<T>::grad_buffer(int id) {
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
  return n.grad;
}

template <class T>
void Tape<T>::accumulate(int id, const std::vector<T>& g) {
  auto& buf = grad_buffer(id);
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

template <class T>
void Tape<T>::backward(Var loss) {
  const auto& L = node(loss);
  if (L.value.size() != 1) throw ShapeError("backward: loss " + shape_str(L.value.shape()) + " is not a scalar");
  for (auto& n : nodes_) n.grad.clear();
  grad_buffer(loss.id)[0] = T{1};

  auto wants = [&](int id) { return id >= 0 && nodes_[static_cast<std::size_t>(id)].requires_grad; };

  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.op == Op::Leaf || !n.requires_grad || n.grad.empty()) continue;
    const std::vector<T>& g = n.grad;
    const TensorT& y = n.value;
    switch (n.op) {
      case Op::Leaf: break;
      case Op::MatMul: {
        const auto& A = nodes_[static_cast<std::size_t>(n.a)].value;
        const auto& B = nodes_[static_cast<std::size_t>(n.b)].value;
        const auto m = static_cast<Eigen::Index>(A.rows()), k = static_cast<Eigen::Index>(A.cols()),
                   nn = static_cast<Eigen::Index>(B.cols());
        MapC<T> G(g.data(), m, nn);
        if (wants(n.a))
          MapM<T>(grad_buffer(n.a).data(), m, k).noalias() += G * MapC<T>(B.data(), k, nn).transpose();
        if (wants(n.b))
          MapM<T>(grad_buffer(n.b).data(), k, nn).noalias() += MapC<T>(A.data(), m, k).transpose() * G;
        break;
      }
      case Op::Transpose: {
        if (!wants(n.a)) break;
        const auto m = static_cast<Eigen::Index>(y.rows()), c = static_cast<Eigen::Index>(y.cols());
        MapM<T>(grad_buffer(n.a).data(), c, m) += MapC<T>(g.data(), m, c).transpose();
        break;
      }
      case Op::Add: {
        if (wants(n.a)) accumulate(n.a, g);
        if (wants(n.b)) accumulate(n.b, g);
        break;
      }
      case Op::AddRow: {
        if (wants(n.a)) accumulate(n.a, g);
        if (wants(n.b)) {
          auto& gb = grad_buffer(n.b);
          const std::size_t rows = y.rows(), cols = y.cols();
          for (std::size_t c = 0; c < cols; ++c) {
            double s = 0.0;
            for (std::size_t r = 0; r < rows; ++r) s += static_cast<double>(g[r * cols + c]);
            gb[c] += static_cast<T>(s);
          }
        }
        break;
      }
      case Op::Sub: {
        if (wants(n.a)) accumulate(n.a, g);
        if (wants(n.b)) {
          auto& gb = grad_buffer(n.b);
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
        }
        break;
      }
      case Op::Mul: {
        const auto& A = nodes_[static_cast<std::size_t>(n.a)].value;
        const auto& B = nodes_[static_cast<std::size_t>(n.b)].value;
        if (wants(n.a)) {
          auto& ga = grad_buffer(n.a);
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * B[i];
        }
        if (wants(n.b)) {
          auto& gb = grad_buffer(n.b);
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * A[i];
        }
        break;
      }
      case Op::Affine: {
        auto& ga = grad_buffer(n.a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.s0 * g[i];
        break;
      }
      case Op::Relu: {
        const auto& X = nodes_[static_cast<std::size_t>(n.a)].value;
        auto& ga = grad_buffer(n.a);
        for (std::size_t i = 0; i < ga.size(); ++i)
          if (X[i] > T{0}) ga[i] += g[i];
        break;
      }
      case Op::Silu: {
        const auto& X = nodes_[static_cast<std::size_t>(n.a)].value;
        auto& ga = grad_buffer(n.a);
        for (std::size_t i = 0; i < ga.size(); ++i) {
          const T s = T{1} / (T{1} + std::exp(-X[i]));
          ga[i] += g[i] * s * (T{1} + X[i] * (T{1} - s));
        }
        break;
      }
      case Op::Square: {
        const auto& X = nodes_[static_cast<std::size_t>(n.a)].value;
        auto& ga = grad_buffer(n.a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += T{2} * X[i] * g[i];
        break;
      }
      case Op::Softmax: {
        auto& ga = grad_buffer(n.a);
        const std::size_t rows = y.rows(), cols = y.cols();
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += static_cast<double>(g[r * cols + c] * y[r * cols + c]);
          for (std::size_t c = 0; c < cols; ++c)
            ga[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - static_cast<T>(dot));
        }
        break;
      }
      case Op::LogSoftmax: {
        auto& ga = grad_buffer(n.a);
        const std::size_t rows = y.rows(), cols = y.cols();
        for (std::size_t r = 0; r < rows; ++r) {
          double gs = 0.0;
          for (std::size_t c = 0; c < cols; ++c) gs += static_cast<double>(g[r * cols + c]);
          for (std::size_t c = 0; c < cols; ++c)
            ga[r * cols + c] += g[r * cols + c] - std::exp(y[r * cols + c]) * static_cast<T>(gs);
        }
        break;
      }
      case Op::L2Normalize: {
        const auto& X = nodes_[static_cast<std::size_t>(n.a)].value;
        auto& ga = grad_buffer(n.a);
        const std::size_t rows = y.rows(), cols = y.cols();
        for (std::size_t r = 0; r < rows; ++r) {
          const double norm = row_norm(X.data() + r * cols, cols);
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += static_cast<double>(g[r * cols + c] * y[r * cols + c]);
          for (std::size_t c = 0; c < cols; ++c)
            ga[r * cols + c] += static_cast<T>((static_cast<double>(g[r * cols + c]) -
                                                static_cast<double>(y[r * cols + c]) * dot) / norm);
        }
        break;
      }
      case Op::Concat: {
        const auto& A = nodes_[static_cast<std::size_t>(n.a)].value;
        const std::size_t rows = y.rows(), ka = A.cols(), kt = y.cols(), kb = kt - ka;
        if (wants(n.a)) {
          auto& ga = grad_buffer(n.a);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < ka; ++c) ga[r * ka + c] += g[r * kt + c];
        }
        if (wants(n.b)) {
          auto& gb = grad_buffer(n.b);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < kb; ++c) gb[r * kb + c] += g[r * kt + ka + c];
        }
        break;
      }
      case Op::Sum: {
        auto& ga = grad_buffer(n.a);
        for (auto& v : ga) v += g[0];
        break;
      }
      case Op::Mean: {
        auto& ga = grad_buffer(n.a);
        const T s = g[0] / static_cast<T>(ga.size());
        for (auto& v : ga) v += s;
        break;
      }
    }
  }
}

template <class T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
  if (x.empty()) throw ShapeError("softmax: empty input");
  BasicTensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) softmax_row(x.data() + r * x.cols(), out.data() + r * x.cols(), x.cols());
  return out;
}

template <class T>
BasicTensor<T> log_softmax_rows(const BasicTensor<T>& x) {
  if (x.empty()) throw ShapeError("log_softmax: empty input");
  BasicTensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r)
    log_softmax_row(x.data() + r * x.cols(), out.data() + r * x.cols(), x.cols());
  return out;
}

template <class T>
BasicTensor<T> l2_normalize_rows(const BasicTensor<T>& x) {
  if (x.empty()) throw ShapeError("l2_normalize: empty input");
  BasicTensor<T> out(x.shape());
  const std::size_t cols = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double norm = row_norm(x.data() + r * cols, cols);
    if (!(norm > 0.0)) throw NumericError("l2_normalize: zero-norm row " + std::to_string(r) + " (degenerate feature)");
    for (std::size_t c = 0; c < cols; ++c)
      out[r * cols + c] = static_cast<T>(static_cast<double>(x[r * cols + c]) / norm);
  }
  return out;
}

template <class T>
ParamVars bind_params(Tape<T>& tape, const BasicParamSet<T>& params, bool trainable) {
  ParamVars vars;
  for (const auto& [name, t] : params) vars[name] = trainable ? tape.parameter(t) : tape.constant(t);
  return vars;
}

template <class T>
BasicParamSet<T> collect_grads(const Tape<T>& tape, const BasicParamSet<T>& params, const ParamVars& vars) {
  BasicParamSet<T> out;
  for (const auto& [name, t] : params) {
    auto it = vars.find(name);
    if (it == vars.end()) throw Error(ErrorKind::Usage, "collect_grads: parameter '" + name + "' was not bound");
    auto g = tape.grad(it->second);
    if (!g.all_finite()) throw NumericError("non-finite gradient for parameter '" + name + "'");
    out.set(name, std::move(g));
  }
  return out;
}

template <class T>
Evaluation<T> evaluate_with_gradients(const GraphFn<T>& f, const BasicParamSet<T>& trainable,
                                      const BasicParamSet<T>& frozen) {
  Tape<T> tape;
  ParamVars vars = bind_params(tape, trainable, true);
  for (const auto& [name, v] : bind_params(tape, frozen, false)) {
    if (vars.count(name)) throw Error(ErrorKind::Usage, "evaluate_with_gradients: '" + name + "' is both trainable and frozen");
    vars[name] = v;
  }
  const Var loss = f(tape, vars);
  Evaluation<T> out;
  out.loss = tape.scalar(loss);
  tape.backward(loss);
  out.grads = collect_grads(tape, trainable, vars);
  return out;
}

template <class T>
T evaluate(const GraphFn<T>& f, const BasicParamSet<T>& params) {
  Tape<T> tape;
  const ParamVars vars = bind_params(tape, params, false);
  return tape.scalar(f(tape, vars));
}

template class Tape<float>;
template class Tape<double>;

#define DDDR_INSTANTIATE(T)                                                                                     \
  template ParamVars bind_params<T>(Tape<T>&, const BasicParamSet<T>&, bool);                                  \
  template BasicParamSet<T> collect_grads<T>(const Tape<T>&, const BasicParamSet<T>&, const ParamVars&);       \
  template Evaluation<T> evaluate_with_gradients<T>(const GraphFn<T>&, const BasicParamSet<T>&,                \
                                                    const BasicParamSet<T>&);                                  \
  template T evaluate<T>(const GraphFn<T>&, const BasicParamSet<T>&);                                          \
  template BasicTensor<T> softmax_rows<T>(const BasicTensor<T>&);                                              \
  template BasicTensor<T> log_softmax_rows<T>(const BasicTensor<T>&);                                          \
  template BasicTensor<T> l2_normalize_rows<T>(const BasicTensor<T>&);

DDDR_INSTANTIATE(float)
DDDR_INSTANTIATE(double)
#undef DDDR_INSTANTIATE

}  // namespace dddr
