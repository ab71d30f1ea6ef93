#include "docdet/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace docdet::nn {

namespace {

MatMap map2d(Tensor& t, int rows, int cols) { return MatMap(t.v.data(), rows, cols); }
ConstMatMap map2d(const Tensor& t, int rows, int cols) {
  return ConstMatMap(t.v.data(), rows, cols);
}

void check(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

Tape::Id Tape::push(Tensor val, bool requires_grad, std::function<void()> back) {
  nodes_.push_back(Node{std::move(val), Tensor{}, requires_grad, false, std::move(back)});
  return static_cast<Id>(nodes_.size()) - 1;
}

Tape::Id Tape::input(Tensor val, bool requires_grad) {
  return push(std::move(val), requires_grad, nullptr);
}

const Tensor& Tape::grad(Id id) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.grad_live) throw std::logic_error("Tape::grad: no gradient at this node");
  return n.grad;
}

Tensor& Tape::grad_buf(Id id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.grad_live) {
    n.grad = Tensor(n.val.shape);
    n.grad_live = true;
  }
  return n.grad;
}

void Tape::add_grad(Id id, const Eigen::ArrayXd& g) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.requires_grad) return;
  grad_buf(id).v += g;
}

void Tape::backward(Id root) {
  check(val(root).numel() == 1, "backward: root must be scalar");
  grad_buf(root).v.setConstant(1.0);
  for (Id i = root; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.grad_live || !n.back) continue;
    n.back();
  }
}

// ---------- elementwise unary ----------

Tape::Id Tape::neg(Id a) { return affine(a, -1.0, 0.0); }

Tape::Id Tape::affine(Id a, double scale, double shift) {
  Tensor out = val(a);
  out.v = scale * out.v + shift;
  Id id = push(std::move(out), requires_grad(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, id, scale] {
    add_grad(a, scale * grad(id).v);
  };
  return id;
}

Tape::Id Tape::log(Id a) {
  Tensor out = val(a);
  out.v = out.v.log();
  Id id = push(std::move(out), requires_grad(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, id] { add_grad(a, grad(id).v / val(a).v); };
  return id;
}

Tape::Id Tape::exp(Id a) {
  Tensor out = val(a);
  out.v = out.v.exp();
  Id id = push(std::move(out), requires_grad(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, id] { add_grad(a, grad(id).v * val(id).v); };
  return id;
}

Tape::Id Tape::sigmoid(Id a) {
  Tensor out = val(a);
  out.v = 1.0 / (1.0 + (-out.v).exp());
  Id id = push(std::move(out), requires_grad(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, id] {
    const auto& s = val(id).v;
    add_grad(a, grad(id).v * s * (1.0 - s));
  };
  return id;
}

Tape::Id Tape::relu(Id a) {
  Tensor out = val(a);
  out.v = out.v.max(0.0);
  Id id = push(std::move(out), requires_grad(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, id] {
    add_grad(a, grad(id).v * (val(a).v > 0.0).cast<double>());
  };
  return id;
}

Tape::Id Tape::abs(Id a) {
  Tensor out = val(a);
  out.v = out.v.abs();
  Id id = push(std::move(out), requires_grad(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, id] {
    add_grad(a, grad(id).v * val(a).v.sign());
  };
  return id;
}

Tape::Id Tape::sqrt(Id a) {
  Tensor out = val(a);
  out.v = out.v.sqrt();
  Id id = push(std::move(out), requires_grad(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, id] {
    add_grad(a, grad(id).v * 0.5 / val(id).v);
  };
  return id;
}

Tape::Id Tape::clamp(Id a, double lo, double hi) {
  Tensor out = val(a);
  out.v = out.v.max(lo).min(hi);
  Id id = push(std::move(out), requires_grad(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, id, lo, hi] {
    const auto& x = val(a).v;
    add_grad(a, grad(id).v * ((x >= lo) && (x <= hi)).cast<double>());
  };
  return id;
}

// ---------- elementwise binary ----------

Tape::Id Tape::add(Id a, Id b) {
  check(val(a).same_shape(val(b)), "add: shape mismatch");
  Tensor out = val(a);
  out.v += val(b).v;
  Id id = push(std::move(out), requires_grad(a) || requires_grad(b), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, b, id] {
    add_grad(a, grad(id).v);
    add_grad(b, grad(id).v);
  };
  return id;
}

Tape::Id Tape::sub(Id a, Id b) {
  check(val(a).same_shape(val(b)), "sub: shape mismatch");
  Tensor out = val(a);
  out.v -= val(b).v;
  Id id = push(std::move(out), requires_grad(a) || requires_grad(b), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, b, id] {
    add_grad(a, grad(id).v);
    add_grad(b, -grad(id).v);
  };
  return id;
}

Tape::Id Tape::mul(Id a, Id b) {
  check(val(a).same_shape(val(b)), "mul: shape mismatch");
  Tensor out = val(a);
  out.v *= val(b).v;
  Id id = push(std::move(out), requires_grad(a) || requires_grad(b), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, b, id] {
    add_grad(a, grad(id).v * val(b).v);
    add_grad(b, grad(id).v * val(a).v);
  };
  return id;
}

Tape::Id Tape::div(Id a, Id b) {
  check(val(a).same_shape(val(b)), "div: shape mismatch");
  Tensor out = val(a);
  out.v /= val(b).v;
  Id id = push(std::move(out), requires_grad(a) || requires_grad(b), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, b, id] {
    const auto& bv = val(b).v;
    add_grad(a, grad(id).v / bv);
    add_grad(b, -grad(id).v * val(a).v / (bv * bv));
  };
  return id;
}

Tape::Id Tape::minimum(Id a, Id b) {
  check(val(a).same_shape(val(b)), "minimum: shape mismatch");
  Tensor out = val(a);
  out.v = out.v.min(val(b).v);
  Id id = push(std::move(out), requires_grad(a) || requires_grad(b), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, b, id] {
    auto take_a = (val(a).v <= val(b).v).cast<double>();
    add_grad(a, grad(id).v * take_a);
    add_grad(b, grad(id).v * (1.0 - take_a));
  };
  return id;
}

Tape::Id Tape::maximum(Id a, Id b) {
  check(val(a).same_shape(val(b)), "maximum: shape mismatch");
  Tensor out = val(a);
  out.v = out.v.max(val(b).v);
  Id id = push(std::move(out), requires_grad(a) || requires_grad(b), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, b, id] {
    auto take_a = (val(a).v >= val(b).v).cast<double>();
    add_grad(a, grad(id).v * take_a);
    add_grad(b, grad(id).v * (1.0 - take_a));
  };
  return id;
}

// ---------- broadcast ----------

Tape::Id Tape::add_rowvec(Id x, Id b) {
  const Tensor& xv = val(x);
  const Tensor& bv = val(b);
  check(xv.rank() == 2 && bv.numel() == xv.cols(), "add_rowvec: shape mismatch");
  Tensor out = xv;
  {
    auto m = map2d(out, xv.rows(), xv.cols());
    m.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.v.data(), bv.numel());
  }
  Id id = push(std::move(out), requires_grad(x) || requires_grad(b), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, x, b, id] {
    const Tensor& g = grad(id);
    add_grad(x, g.v);
    if (requires_grad(b)) {
      auto gm = map2d(g, g.rows(), g.cols());
      grad_buf(b).v += gm.colwise().sum().transpose().array();
    }
  };
  return id;
}

Tape::Id Tape::mul_rowvec(Id x, Id s) {
  const Tensor& xv = val(x);
  const Tensor& sv = val(s);
  check(xv.rank() == 2 && sv.numel() == xv.cols(), "mul_rowvec: shape mismatch");
  Tensor out = xv;
  {
    auto m = map2d(out, xv.rows(), xv.cols());
    m.array().rowwise() *= Eigen::Map<const Eigen::RowVectorXd>(sv.v.data(), sv.numel()).array();
  }
  Id id = push(std::move(out), requires_grad(x) || requires_grad(s), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, x, s, id] {
    const Tensor& g = grad(id);
    auto gm = map2d(g, g.rows(), g.cols());
    if (requires_grad(x)) {
      auto& gx = grad_buf(x);
      auto gxm = map2d(gx, g.rows(), g.cols());
      gxm.array() += gm.array().rowwise() *
                     Eigen::Map<const Eigen::RowVectorXd>(val(s).v.data(), val(s).numel()).array();
    }
    if (requires_grad(s)) {
      auto xm = map2d(val(x), g.rows(), g.cols());
      grad_buf(s).v += (gm.array() * xm.array()).colwise().sum().transpose();
    }
  };
  return id;
}

Tape::Id Tape::mul_colvec(Id x, Id s) {
  const Tensor& xv = val(x);
  const Tensor& sv = val(s);
  check(xv.rank() == 2 && sv.numel() == xv.rows(), "mul_colvec: shape mismatch");
  Tensor out = xv;
  {
    auto m = map2d(out, xv.rows(), xv.cols());
    m.array().colwise() *= Eigen::Map<const Eigen::VectorXd>(sv.v.data(), sv.numel()).array();
  }
  Id id = push(std::move(out), requires_grad(x) || requires_grad(s), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, x, s, id] {
    const Tensor& g = grad(id);
    auto gm = map2d(g, g.rows(), g.cols());
    if (requires_grad(x)) {
      auto gxm = map2d(grad_buf(x), g.rows(), g.cols());
      gxm.array() += gm.array().colwise() *
                     Eigen::Map<const Eigen::VectorXd>(val(s).v.data(), val(s).numel()).array();
    }
    if (requires_grad(s)) {
      auto xm = map2d(val(x), g.rows(), g.cols());
      grad_buf(s).v += (gm.array() * xm.array()).rowwise().sum();
    }
  };
  return id;
}

// ---------- matmul ----------

Tape::Id Tape::mm(Id a, Id b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  check(av.rank() == 2 && bv.rank() == 2 && av.cols() == bv.rows(), "mm: shape mismatch");
  Tensor out({av.rows(), bv.cols()});
  map2d(out, av.rows(), bv.cols()).noalias() = av.mat() * bv.mat();
  Id id = push(std::move(out), requires_grad(a) || requires_grad(b), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, b, id] {
    const Tensor& g = grad(id);
    if (requires_grad(a)) grad_buf(a).mat().noalias() += g.mat() * val(b).mat().transpose();
    if (requires_grad(b)) grad_buf(b).mat().noalias() += val(a).mat().transpose() * g.mat();
  };
  return id;
}

Tape::Id Tape::mm_nt(Id a, Id b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  check(av.rank() == 2 && bv.rank() == 2 && av.cols() == bv.cols(), "mm_nt: shape mismatch");
  Tensor out({av.rows(), bv.rows()});
  map2d(out, av.rows(), bv.rows()).noalias() = av.mat() * bv.mat().transpose();
  Id id = push(std::move(out), requires_grad(a) || requires_grad(b), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, b, id] {
    const Tensor& g = grad(id);
    if (requires_grad(a)) grad_buf(a).mat().noalias() += g.mat() * val(b).mat();
    if (requires_grad(b)) grad_buf(b).mat().noalias() += g.mat().transpose() * val(a).mat();
  };
  return id;
}

// ---------- reductions ----------

Tape::Id Tape::sum_all(Id a) {
  Tensor out({1});
  out.v[0] = val(a).v.sum();
  Id id = push(std::move(out), requires_grad(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, id] {
    add_grad(a, Eigen::ArrayXd::Constant(val(a).numel(), grad(id).v[0]));
  };
  return id;
}

Tape::Id Tape::sum_rows(Id a) {
  const Tensor& av = val(a);
  check(av.rank() == 2, "sum_rows: rank-2 expected");
  Tensor out({av.rows()});
  Eigen::Map<Eigen::VectorXd>(out.v.data(), av.rows()) = av.mat().rowwise().sum();
  Id id = push(std::move(out), requires_grad(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, id] {
    if (!requires_grad(a)) return;
    const Tensor& g = grad(id);
    auto gm = map2d(grad_buf(a), val(a).rows(), val(a).cols());
    gm.array().colwise() += Eigen::Map<const Eigen::ArrayXd>(g.v.data(), g.numel());
  };
  return id;
}

Tape::Id Tape::max_rows(Id a) {
  const Tensor& av = val(a);
  check(av.rank() == 2, "max_rows: rank-2 expected");
  int n = av.rows(), d = av.cols();
  Tensor out({n});
  auto arg = std::make_shared<std::vector<int>>(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    int best = 0;
    double bv = av.at(i, 0);
    for (int j = 1; j < d; ++j)
      if (av.at(i, j) > bv) {
        bv = av.at(i, j);
        best = j;
      }
    out.v[i] = bv;
    (*arg)[static_cast<size_t>(i)] = best;
  }
  Id id = push(std::move(out), requires_grad(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, id, arg, n] {
    if (!requires_grad(a)) return;
    Tensor& ga = grad_buf(a);
    const Tensor& g = grad(id);
    for (int i = 0; i < n; ++i) ga.at(i, (*arg)[static_cast<size_t>(i)]) += g.v[i];
  };
  return id;
}

// ---------- structure ----------

Tape::Id Tape::reshape(Id a, std::vector<int> shape) {
  check(Tensor::count(shape) == val(a).numel(), "reshape: element count mismatch");
  Tensor out = val(a);
  out.shape = std::move(shape);
  Id id = push(std::move(out), requires_grad(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, id] { add_grad(a, grad(id).v); };
  return id;
}

Tape::Id Tape::concat_rows(const std::vector<Id>& parts) {
  check(!parts.empty(), "concat_rows: empty");
  int cols = val(parts[0]).cols();
  int rows = 0;
  bool rg = false;
  for (Id p : parts) {
    check(val(p).rank() == 2 && val(p).cols() == cols, "concat_rows: col mismatch");
    rows += val(p).rows();
    rg = rg || requires_grad(p);
  }
  Tensor out({rows, cols});
  int r = 0;
  for (Id p : parts) {
    int pr = val(p).rows();
    out.v.segment(static_cast<int64_t>(r) * cols, static_cast<int64_t>(pr) * cols) = val(p).v;
    r += pr;
  }
  auto list = std::make_shared<std::vector<Id>>(parts);
  Id id = push(std::move(out), rg, nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, id, list, cols] {
    const Tensor& g = grad(id);
    int r = 0;
    for (Id p : *list) {
      int pr = val(p).rows();
      add_grad(p, g.v.segment(static_cast<int64_t>(r) * cols, static_cast<int64_t>(pr) * cols));
      r += pr;
    }
  };
  return id;
}

Tape::Id Tape::slice_rows(Id a, int r0, int r1) {
  const Tensor& av = val(a);
  check(av.rank() == 2 && 0 <= r0 && r0 <= r1 && r1 <= av.rows(), "slice_rows: bad range");
  int cols = av.cols();
  Tensor out({r1 - r0, cols});
  out.v = av.v.segment(static_cast<int64_t>(r0) * cols, static_cast<int64_t>(r1 - r0) * cols);
  Id id = push(std::move(out), requires_grad(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, id, r0, cols] {
    if (!requires_grad(a)) return;
    const Tensor& g = grad(id);
    grad_buf(a).v.segment(static_cast<int64_t>(r0) * cols, g.numel()) += g.v;
  };
  return id;
}

Tape::Id Tape::gather_rows(Id a, std::vector<int> idx) {
  const Tensor& av = val(a);
  check(av.rank() == 2, "gather_rows: rank-2 expected");
  int cols = av.cols();
  int n = static_cast<int>(idx.size());
  Tensor out({n, cols});
  for (int i = 0; i < n; ++i) {
    check(idx[static_cast<size_t>(i)] >= 0 && idx[static_cast<size_t>(i)] < av.rows(),
          "gather_rows: index out of range");
    out.v.segment(static_cast<int64_t>(i) * cols, cols) =
        av.v.segment(static_cast<int64_t>(idx[static_cast<size_t>(i)]) * cols, cols);
  }
  auto ix = std::make_shared<std::vector<int>>(std::move(idx));
  Id id = push(std::move(out), requires_grad(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, id, ix, cols] {
    if (!requires_grad(a)) return;
    const Tensor& g = grad(id);
    Tensor& ga = grad_buf(a);
    for (size_t i = 0; i < ix->size(); ++i)
      ga.v.segment(static_cast<int64_t>((*ix)[i]) * cols, cols) +=
          g.v.segment(static_cast<int64_t>(i) * cols, cols);
  };
  return id;
}

Tape::Id Tape::slice_cols(Id a, int c0, int c1) {
  const Tensor& av = val(a);
  check(av.rank() == 2 && 0 <= c0 && c0 <= c1 && c1 <= av.cols(), "slice_cols: bad range");
  int n = av.rows(), w = c1 - c0;
  Tensor out({n, w});
  map2d(out, n, w) = av.mat().middleCols(c0, w);
  Id id = push(std::move(out), requires_grad(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, id, c0, w] {
    if (!requires_grad(a)) return;
    const Tensor& g = grad(id);
    grad_buf(a).mat().middleCols(c0, w) += g.mat();
  };
  return id;
}

Tape::Id Tape::concat_cols(const std::vector<Id>& parts) {
  check(!parts.empty(), "concat_cols: empty");
  int rows = val(parts[0]).rows();
  int cols = 0;
  bool rg = false;
  for (Id p : parts) {
    check(val(p).rank() == 2 && val(p).rows() == rows, "concat_cols: row mismatch");
    cols += val(p).cols();
    rg = rg || requires_grad(p);
  }
  Tensor out({rows, cols});
  int c = 0;
  for (Id p : parts) {
    int pc = val(p).cols();
    map2d(out, rows, cols).middleCols(c, pc) = val(p).mat();
    c += pc;
  }
  auto list = std::make_shared<std::vector<Id>>(parts);
  Id id = push(std::move(out), rg, nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, id, list] {
    const Tensor& g = grad(id);
    int c = 0;
    for (Id p : *list) {
      int pc = val(p).cols();
      if (requires_grad(p)) grad_buf(p).mat() += g.mat().middleCols(c, pc);
      c += pc;
    }
  };
  return id;
}

Tape::Id Tape::transpose(Id a) {
  const Tensor& av = val(a);
  check(av.rank() == 2, "transpose: rank-2 input required");
  int r = av.rows(), c = av.cols();
  Tensor out({c, r});
  out.mat() = av.mat().transpose();
  Id id = push(std::move(out), requires_grad(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, id] {
    if (requires_grad(a)) grad_buf(a).mat() += grad(id).mat().transpose();
  };
  return id;
}

// ---------- nn ----------

Tape::Id Tape::softmax_rows(Id a, Id additive_mask) {
  const Tensor& av = val(a);
  check(av.rank() == 2, "softmax_rows: rank-2 expected");
  int n = av.rows(), d = av.cols();
  Tensor out = av;
  if (additive_mask != kNone) {
    check(val(additive_mask).same_shape(av), "softmax_rows: mask shape mismatch");
    out.v += val(additive_mask).v;
  }
  for (int i = 0; i < n; ++i) {
    auto row = out.v.segment(static_cast<int64_t>(i) * d, d);
    double m = kMaskNegInf;
    for (int j = 0; j < d; ++j)
      if (row[j] > kMaskNegInf && row[j] > m) m = row[j];
    if (m <= kMaskNegInf) {  // fully masked row
      row.setZero();
      continue;
    }
    double z = 0.0;
    for (int j = 0; j < d; ++j) {
      row[j] = row[j] <= kMaskNegInf ? 0.0 : std::exp(row[j] - m);
      z += row[j];
    }
    row /= z;
  }
  Id id = push(std::move(out), requires_grad(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, a, id, n, d] {
    if (!requires_grad(a)) return;
    const Tensor& g = grad(id);
    const Tensor& s = val(id);
    Tensor& ga = grad_buf(a);
    for (int i = 0; i < n; ++i) {
      auto gr = g.v.segment(static_cast<int64_t>(i) * d, d);
      auto sr = s.v.segment(static_cast<int64_t>(i) * d, d);
      double dot = (gr * sr).sum();
      ga.v.segment(static_cast<int64_t>(i) * d, d) += sr * (gr - dot);
    }
  };
  return id;
}

Tape::Id Tape::layernorm(Id x, Id gamma, Id beta, double eps) {
  const Tensor& xv = val(x);
  check(xv.rank() == 2, "layernorm: rank-2 expected");
  int n = xv.rows(), d = xv.cols();
  check(val(gamma).numel() == d && val(beta).numel() == d, "layernorm: param shape mismatch");
  Tensor out({n, d});
  auto xhat = std::make_shared<Tensor>(Tensor({n, d}));
  auto inv_std = std::make_shared<Eigen::ArrayXd>(n);
  const auto& gam = val(gamma).v;
  const auto& bet = val(beta).v;
  for (int i = 0; i < n; ++i) {
    auto row = xv.v.segment(static_cast<int64_t>(i) * d, d);
    double mu = row.mean();
    double var = (row - mu).square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    auto xh = xhat->v.segment(static_cast<int64_t>(i) * d, d);
    xh = (row - mu) * is;
    out.v.segment(static_cast<int64_t>(i) * d, d) = xh * gam + bet;
  }
  bool rg = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
  Id id = push(std::move(out), rg, nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, x, gamma, beta, id, xhat, inv_std, n, d] {
    const Tensor& g = grad(id);
    const auto& gam = val(gamma).v;
    for (int i = 0; i < n; ++i) {
      auto gr = g.v.segment(static_cast<int64_t>(i) * d, d);
      auto xh = xhat->v.segment(static_cast<int64_t>(i) * d, d);
      if (requires_grad(gamma)) grad_buf(gamma).v += gr * xh;
      if (requires_grad(beta)) grad_buf(beta).v += gr;
      if (requires_grad(x)) {
        Eigen::ArrayXd dxh = gr * gam;
        double m1 = dxh.mean();
        double m2 = (dxh * xh).mean();
        grad_buf(x).v.segment(static_cast<int64_t>(i) * d, d) +=
            (dxh - m1 - xh * m2) * (*inv_std)[i];
      }
    }
  };
  return id;
}

// ---------- conv2d ----------

Tape::Id Tape::conv2d(Id x, Id w, Id b, int stride, int pad) {
  const Tensor& xv = val(x);
  const Tensor& wv = val(w);
  check(xv.rank() == 3 && wv.rank() == 4, "conv2d: bad ranks");
  int cin = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  int cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  check(wv.dim(1) == cin, "conv2d: channel mismatch");
  check(val(b).numel() == cout, "conv2d: bias mismatch");
  int oh = (h + 2 * pad - kh) / stride + 1;
  int ow = (wd + 2 * pad - kw) / stride + 1;
  check(oh > 0 && ow > 0, "conv2d: output too small");
  int ckk = cin * kh * kw;
  int osz = oh * ow;

  auto col = std::make_shared<Tensor>(Tensor({ckk, osz}));
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        int row = (c * kh + ky) * kw + kx;
        double* dst = col->v.data() + static_cast<int64_t>(row) * osz;
        const double* src = xv.v.data() + static_cast<int64_t>(c) * h * wd;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride + ky - pad;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride + kx - pad;
            dst[oy * ow + ox] =
                (iy >= 0 && iy < h && ix >= 0 && ix < wd) ? src[iy * wd + ix] : 0.0;
          }
        }
      }

  Tensor out({cout, oh, ow});
  {
    MatMap om(out.v.data(), cout, osz);
    om.noalias() = ConstMatMap(wv.v.data(), cout, ckk) * col->mat();
    om.colwise() += Eigen::Map<const Eigen::VectorXd>(val(b).v.data(), cout);
  }
  bool rg = requires_grad(x) || requires_grad(w) || requires_grad(b);
  Id id = push(std::move(out), rg, nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, x, w, b, id, col, stride, pad, cin, h, wd, cout,
                                          kh, kw, oh, ow] {
    int ckk = cin * kh * kw;
    int osz = oh * ow;
    const Tensor& g = grad(id);
    ConstMatMap gm(g.v.data(), cout, osz);
    if (requires_grad(b))
      grad_buf(b).v += gm.rowwise().sum().array();
    if (requires_grad(w)) {
      MatMap gw(grad_buf(w).v.data(), cout, ckk);
      gw.noalias() += gm * col->mat().transpose();
    }
    if (requires_grad(x)) {
      Tensor dcol({ckk, osz});
      dcol.mat().noalias() = ConstMatMap(val(w).v.data(), cout, ckk).transpose() * gm;
      Tensor& gx = grad_buf(x);
      for (int c = 0; c < cin; ++c)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            int row = (c * kh + ky) * kw + kx;
            const double* src = dcol.v.data() + static_cast<int64_t>(row) * osz;
            double* dst = gx.v.data() + static_cast<int64_t>(c) * h * wd;
            for (int oy = 0; oy < oh; ++oy) {
              int iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= h) continue;
              for (int ox = 0; ox < ow; ++ox) {
                int ix = ox * stride + kx - pad;
                if (ix >= 0 && ix < wd) dst[iy * wd + ix] += src[oy * ow + ox];
              }
            }
          }
    }
  };
  return id;
}

// ---------- bilinear resize (clamp-to-edge) ----------

namespace {
struct ResizeAxis {
  std::vector<int> i0, i1;
  std::vector<double> w1;  // weight of i1; weight of i0 = 1 - w1
};
ResizeAxis resize_axis(int in, int out) {
  ResizeAxis ax;
  ax.i0.resize(static_cast<size_t>(out));
  ax.i1.resize(static_cast<size_t>(out));
  ax.w1.resize(static_cast<size_t>(out));
  for (int o = 0; o < out; ++o) {
    double s = (o + 0.5) * static_cast<double>(in) / out - 0.5;
    if (s < 0) s = 0;
    if (s > in - 1) s = in - 1;
    int i0 = static_cast<int>(std::floor(s));
    int i1 = std::min(i0 + 1, in - 1);
    ax.i0[static_cast<size_t>(o)] = i0;
    ax.i1[static_cast<size_t>(o)] = i1;
    ax.w1[static_cast<size_t>(o)] = s - i0;
  }
  return ax;
}
}  // namespace

Tape::Id Tape::bilinear_resize(Id x, int out_h, int out_w) {
  const Tensor& xv = val(x);
  check(xv.rank() == 3, "bilinear_resize: [C,H,W] expected");
  int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  auto ay = std::make_shared<ResizeAxis>(resize_axis(h, out_h));
  auto axx = std::make_shared<ResizeAxis>(resize_axis(w, out_w));
  Tensor out({c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch) {
    const double* src = xv.v.data() + static_cast<int64_t>(ch) * h * w;
    double* dst = out.v.data() + static_cast<int64_t>(ch) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      int y0 = ay->i0[static_cast<size_t>(oy)], y1 = ay->i1[static_cast<size_t>(oy)];
      double fy = ay->w1[static_cast<size_t>(oy)];
      for (int ox = 0; ox < out_w; ++ox) {
        int x0 = axx->i0[static_cast<size_t>(ox)], x1 = axx->i1[static_cast<size_t>(ox)];
        double fx = axx->w1[static_cast<size_t>(ox)];
        dst[oy * out_w + ox] = (1 - fy) * ((1 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1]) +
                               fy * ((1 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
      }
    }
  }
  Id id = push(std::move(out), requires_grad(x), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, x, id, ay, axx, c, h, w, out_h, out_w] {
    if (!requires_grad(x)) return;
    const Tensor& g = grad(id);
    Tensor& gx = grad_buf(x);
    for (int ch = 0; ch < c; ++ch) {
      double* dst = gx.v.data() + static_cast<int64_t>(ch) * h * w;
      const double* src = g.v.data() + static_cast<int64_t>(ch) * out_h * out_w;
      for (int oy = 0; oy < out_h; ++oy) {
        int y0 = ay->i0[static_cast<size_t>(oy)], y1 = ay->i1[static_cast<size_t>(oy)];
        double fy = ay->w1[static_cast<size_t>(oy)];
        for (int ox = 0; ox < out_w; ++ox) {
          int x0 = axx->i0[static_cast<size_t>(ox)], x1 = axx->i1[static_cast<size_t>(ox)];
          double fx = axx->w1[static_cast<size_t>(ox)];
          double gv = src[oy * out_w + ox];
          dst[y0 * w + x0] += gv * (1 - fy) * (1 - fx);
          dst[y0 * w + x1] += gv * (1 - fy) * fx;
          dst[y1 * w + x0] += gv * fy * (1 - fx);
          dst[y1 * w + x1] += gv * fy * fx;
        }
      }
    }
  };
  return id;
}

// ---------- multi-scale deformable attention ----------

Tape::Id Tape::ms_deform_attn(Id value, Id locs, Id weights, const LevelGrid& grid, int heads,
                              int points) {
  const Tensor& vv = val(value);
  const Tensor& lv = val(locs);
  const Tensor& wv = val(weights);
  check(vv.rank() == 2 && vv.rows() == grid.total(), "ms_deform_attn: value/grid mismatch");
  int d = vv.cols();
  check(d % heads == 0, "ms_deform_attn: dim not divisible by heads");
  int hd = d / heads;
  int nlev = grid.num_levels();
  int m = heads * nlev * points;
  int q = lv.rows();
  check(lv.cols() == 2 * m, "ms_deform_attn: locs shape mismatch");
  check(wv.rows() == q && wv.cols() == m, "ms_deform_attn: weights shape mismatch");

  auto lg = std::make_shared<LevelGrid>(grid);
  Tensor out({q, d});
  const double* vp = vv.v.data();
  for (int qi = 0; qi < q; ++qi) {
    double* orow = out.v.data() + static_cast<int64_t>(qi) * d;
    for (int hh = 0; hh < heads; ++hh) {
      double* oblk = orow + hh * hd;
      for (int l = 0; l < nlev; ++l) {
        const auto& lev = grid.levels[static_cast<size_t>(l)];
        for (int p = 0; p < points; ++p) {
          int mi = (hh * nlev + l) * points + p;
          double wgt = wv.at(qi, mi);
          double px = lv.at(qi, 2 * mi) * lev.w - 0.5;
          double py = lv.at(qi, 2 * mi + 1) * lev.h - 0.5;
          int x0 = static_cast<int>(std::floor(px));
          int y0 = static_cast<int>(std::floor(py));
          double fx = px - x0, fy = py - y0;
          for (int cy = 0; cy < 2; ++cy) {
            int yy = y0 + cy;
            if (yy < 0 || yy >= lev.h) continue;
            double wy = cy ? fy : 1.0 - fy;
            for (int cx = 0; cx < 2; ++cx) {
              int xx = x0 + cx;
              if (xx < 0 || xx >= lev.w) continue;
              double cw = wgt * wy * (cx ? fx : 1.0 - fx);
              const double* vrow =
                  vp + (static_cast<int64_t>(lev.start) + yy * lev.w + xx) * d + hh * hd;
              for (int ch = 0; ch < hd; ++ch) oblk[ch] += cw * vrow[ch];
            }
          }
        }
      }
    }
  }
  bool rg = requires_grad(value) || requires_grad(locs) || requires_grad(weights);
  Id id = push(std::move(out), rg, nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, value, locs, weights, id, lg, heads, points, d,
                                          hd, q] {
    const Tensor& g = grad(id);
    const Tensor& vv = val(value);
    const Tensor& lv = val(locs);
    const Tensor& wv = val(weights);
    int nlev = lg->num_levels();
    bool need_v = requires_grad(value);
    bool need_l = requires_grad(locs);
    bool need_w = requires_grad(weights);
    Tensor* gv = need_v ? &grad_buf(value) : nullptr;
    Tensor* gl = need_l ? &grad_buf(locs) : nullptr;
    Tensor* gw = need_w ? &grad_buf(weights) : nullptr;
    const double* vp = vv.v.data();
    for (int qi = 0; qi < q; ++qi) {
      const double* grow = g.v.data() + static_cast<int64_t>(qi) * d;
      for (int hh = 0; hh < heads; ++hh) {
        const double* gblk = grow + hh * hd;
        for (int l = 0; l < nlev; ++l) {
          const auto& lev = lg->levels[static_cast<size_t>(l)];
          for (int p = 0; p < points; ++p) {
            int mi = (hh * nlev + l) * points + p;
            double wgt = wv.at(qi, mi);
            double px = lv.at(qi, 2 * mi) * lev.w - 0.5;
            double py = lv.at(qi, 2 * mi + 1) * lev.h - 0.5;
            int x0 = static_cast<int>(std::floor(px));
            int y0 = static_cast<int>(std::floor(py));
            double fx = px - x0, fy = py - y0;
            // corner values dotted with upstream grad, for loc/weight grads
            double s_dot = 0.0;     // sum cw_rel * dot(v, g)
            double dsx_dot = 0.0;   // d(sample)/dpx dotted with g
            double dsy_dot = 0.0;
            for (int cy = 0; cy < 2; ++cy) {
              int yy = y0 + cy;
              if (yy < 0 || yy >= lev.h) continue;
              double wy = cy ? fy : 1.0 - fy;
              double dwy = cy ? 1.0 : -1.0;
              for (int cx = 0; cx < 2; ++cx) {
                int xx = x0 + cx;
                if (xx < 0 || xx >= lev.w) continue;
                double wx = cx ? fx : 1.0 - fx;
                double dwx = cx ? 1.0 : -1.0;
                int64_t vidx = (static_cast<int64_t>(lev.start) + yy * lev.w + xx) * d + hh * hd;
                const double* vrow = vp + vidx;
                double dot = 0.0;
                for (int ch = 0; ch < hd; ++ch) dot += vrow[ch] * gblk[ch];
                s_dot += wy * wx * dot;
                dsx_dot += wy * dwx * dot;
                dsy_dot += dwy * wx * dot;
                if (need_v) {
                  double cw = wgt * wy * wx;
                  double* gvrow = gv->v.data() + vidx;
                  for (int ch = 0; ch < hd; ++ch) gvrow[ch] += cw * gblk[ch];
                }
              }
            }
            if (need_w) gw->at(qi, mi) += s_dot;
            if (need_l) {
              gl->at(qi, 2 * mi) += wgt * dsx_dot * lev.w;
              gl->at(qi, 2 * mi + 1) += wgt * dsy_dot * lev.h;
            }
          }
        }
      }
    }
  };
  return id;
}

// ---------- RoIAlign ----------

Tape::Id Tape::roi_align(Id fmap, const std::vector<std::array<double, 4>>& boxes, int out,
                         int sampling_ratio) {
  const Tensor& fv = val(fmap);
  check(fv.rank() == 3, "roi_align: [C,H,W] expected");
  int c = fv.dim(0), h = fv.dim(1), w = fv.dim(2);
  int k = static_cast<int>(boxes.size());
  auto bx = std::make_shared<std::vector<std::array<double, 4>>>(boxes);
  Tensor outp({k, c * out * out});
  const double inv_cnt = 1.0 / (sampling_ratio * sampling_ratio);
  for (int b = 0; b < k; ++b) {
    // half-pixel alignment: normalized corners to continuous pixel coords
    double x1 = boxes[static_cast<size_t>(b)][0] * w - 0.5;
    double y1 = boxes[static_cast<size_t>(b)][1] * h - 0.5;
    double x2 = boxes[static_cast<size_t>(b)][2] * w - 0.5;
    double y2 = boxes[static_cast<size_t>(b)][3] * h - 0.5;
    double bw = (x2 - x1) / out, bh = (y2 - y1) / out;
    double* orow = outp.v.data() + static_cast<int64_t>(b) * c * out * out;
    for (int by = 0; by < out; ++by)
      for (int bxi = 0; bxi < out; ++bxi)
        for (int sy = 0; sy < sampling_ratio; ++sy)
          for (int sx = 0; sx < sampling_ratio; ++sx) {
            double yy = y1 + (by + (sy + 0.5) / sampling_ratio) * bh;
            double xx = x1 + (bxi + (sx + 0.5) / sampling_ratio) * bw;
            if (yy < -1.0 || yy > h || xx < -1.0 || xx > w) continue;
            yy = std::min(std::max(yy, 0.0), h - 1.0);
            xx = std::min(std::max(xx, 0.0), w - 1.0);
            int y0 = static_cast<int>(yy), x0 = static_cast<int>(xx);
            int y1i = std::min(y0 + 1, h - 1), x1i = std::min(x0 + 1, w - 1);
            double fy = yy - y0, fx = xx - x0;
            for (int ch = 0; ch < c; ++ch) {
              const double* src = fv.v.data() + static_cast<int64_t>(ch) * h * w;
              double s = (1 - fy) * ((1 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1i]) +
                         fy * ((1 - fx) * src[y1i * w + x0] + fx * src[y1i * w + x1i]);
              orow[ch * out * out + by * out + bxi] += s * inv_cnt;
            }
          }
  }
  Id id = push(std::move(outp), requires_grad(fmap), nullptr);
  nodes_[static_cast<size_t>(id)].back = [this, fmap, id, bx, out, sampling_ratio, c, h, w] {
    if (!requires_grad(fmap)) return;
    const Tensor& g = grad(id);
    Tensor& gf = grad_buf(fmap);
    const double inv_cnt = 1.0 / (sampling_ratio * sampling_ratio);
    for (int b = 0; b < static_cast<int>(bx->size()); ++b) {
      double x1 = (*bx)[static_cast<size_t>(b)][0] * w - 0.5;
      double y1 = (*bx)[static_cast<size_t>(b)][1] * h - 0.5;
      double x2 = (*bx)[static_cast<size_t>(b)][2] * w - 0.5;
      double y2 = (*bx)[static_cast<size_t>(b)][3] * h - 0.5;
      double bw = (x2 - x1) / out, bh = (y2 - y1) / out;
      const double* grow = g.v.data() + static_cast<int64_t>(b) * c * out * out;
      for (int by = 0; by < out; ++by)
        for (int bxi = 0; bxi < out; ++bxi)
          for (int sy = 0; sy < sampling_ratio; ++sy)
            for (int sx = 0; sx < sampling_ratio; ++sx) {
              double yy = y1 + (by + (sy + 0.5) / sampling_ratio) * bh;
              double xx = x1 + (bxi + (sx + 0.5) / sampling_ratio) * bw;
              if (yy < -1.0 || yy > h || xx < -1.0 || xx > w) continue;
              yy = std::min(std::max(yy, 0.0), h - 1.0);
              xx = std::min(std::max(xx, 0.0), w - 1.0);
              int y0 = static_cast<int>(yy), x0 = static_cast<int>(xx);
              int y1i = std::min(y0 + 1, h - 1), x1i = std::min(x0 + 1, w - 1);
              double fy = yy - y0, fx = xx - x0;
              for (int ch = 0; ch < c; ++ch) {
                double gv = grow[ch * out * out + by * out + bxi] * inv_cnt;
                double* dst = gf.v.data() + static_cast<int64_t>(ch) * h * w;
                dst[y0 * w + x0] += gv * (1 - fy) * (1 - fx);
                dst[y0 * w + x1i] += gv * (1 - fy) * fx;
                dst[y1i * w + x0] += gv * fy * (1 - fx);
                dst[y1i * w + x1i] += gv * fy * fx;
              }
            }
    }
  };
  return id;
}

}  // namespace docdet::nn
