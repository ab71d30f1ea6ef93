#include "docdet/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace docdet::nn {

int ParamStore::create(const std::string& name, std::vector<int> shape) {
  if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
  const int idx = static_cast<int>(params_.size());
  index_[name] = idx;
  params_.push_back({name, Tensor(std::move(shape)), Tensor(), Tensor()});
  return idx;
}

int ParamStore::find(const std::string& name) const {
  const auto it = index_.find(name);
  return it == index_.end() ? -1 : it->second;
}

std::int64_t ParamStore::total_elements() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

Graph::Graph(ParamStore& s) : store(&s) {
  ids.reserve(s.size());
  for (int i = 0; i < s.size(); ++i) ids.push_back(tape.input(s.at(i).value, true));
}

std::vector<Tensor> Graph::grads() const {
  std::vector<Tensor> out;
  out.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (tape.has_grad(ids[i]))
      out.push_back(tape.grad(ids[i]));
    else
      out.push_back(Tensor(store->at(static_cast<int>(i)).value.shape));
  }
  return out;
}

double he_stddev(int fan_in) { return std::sqrt(2.0 / fan_in); }
double xavier_stddev(int fan_in, int fan_out) { return std::sqrt(2.0 / (fan_in + fan_out)); }

Linear::Linear(ParamStore& s, const std::string& name, int in, int out, Rng& rng, double stddev)
    : in_(in), out_(out) {
  if (stddev < 0) stddev = xavier_stddev(in, out);
  w_ = s.create(name + ".w", {in, out});
  s.at(w_).value = Tensor::randn({in, out}, rng, stddev);
  b_ = s.create(name + ".b", {out});
}

Tape::Id Linear::apply(Graph& g, Tape::Id x) const {
  return g.tape.add_rowvec(g.tape.mm(x, g.p(w_)), g.p(b_));
}

LayerNorm::LayerNorm(ParamStore& s, const std::string& name, int dim) {
  gamma_ = s.create(name + ".gamma", {dim});
  s.at(gamma_).value.v.setConstant(1.0);
  beta_ = s.create(name + ".beta", {dim});
}

Tape::Id LayerNorm::apply(Graph& g, Tape::Id x) const {
  return g.tape.layernorm(x, g.p(gamma_), g.p(beta_));
}

Mlp::Mlp(ParamStore& s, const std::string& name, const std::vector<int>& dims, Rng& rng) {
  if (dims.size() < 2) throw std::invalid_argument("Mlp: need at least input and output dims");
  for (std::size_t i = 0; i + 1 < dims.size(); ++i)
    layers_.emplace_back(s, name + ".fc" + std::to_string(i), dims[i], dims[i + 1], rng);
}

Tape::Id Mlp::apply(Graph& g, Tape::Id x) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i].apply(g, x);
    if (i + 1 < layers_.size()) x = g.tape.relu(x);
  }
  return x;
}

MultiHeadAttention::MultiHeadAttention(ParamStore& s, const std::string& name, int dim, int heads,
                                       Rng& rng)
    : dim_(dim), heads_(heads) {
  if (dim % heads != 0)
    throw std::invalid_argument("MultiHeadAttention: dim must divide by heads");
  wq_ = Linear(s, name + ".q", dim, dim, rng);
  wk_ = Linear(s, name + ".k", dim, dim, rng);
  wv_ = Linear(s, name + ".v", dim, dim, rng);
  wo_ = Linear(s, name + ".o", dim, dim, rng);
}

Tape::Id MultiHeadAttention::apply(Graph& g, Tape::Id q, Tape::Id k, Tape::Id v,
                                   Tape::Id additive_mask) const {
  Tape& t = g.tape;
  const Tape::Id qp = wq_.apply(g, q);
  const Tape::Id kp = wk_.apply(g, k);
  const Tape::Id vp = wv_.apply(g, v);
  const int dh = dim_ / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<Tape::Id> head_out;
  for (int h = 0; h < heads_; ++h) {
    const Tape::Id qh = t.slice_cols(qp, h * dh, (h + 1) * dh);
    const Tape::Id kh = t.slice_cols(kp, h * dh, (h + 1) * dh);
    const Tape::Id vh = t.slice_cols(vp, h * dh, (h + 1) * dh);
    const Tape::Id attn = t.softmax_rows(t.affine(t.mm_nt(qh, kh), scale, 0.0), additive_mask);
    head_out.push_back(t.mm(attn, vh));
  }
  return wo_.apply(g, t.concat_cols(head_out));
}

Conv2d::Conv2d(ParamStore& s, const std::string& name, int cin, int cout, int k, int stride,
               int pad, Rng& rng)
    : stride_(stride), pad_(pad) {
  w_ = s.create(name + ".w", {cout, cin, k, k});
  s.at(w_).value = Tensor::randn({cout, cin, k, k}, rng, he_stddev(cin * k * k));
  b_ = s.create(name + ".b", {cout});
}

Tape::Id Conv2d::apply(Graph& g, Tape::Id x) const {
  return g.tape.conv2d(x, g.p(w_), g.p(b_), stride_, pad_);
}

void AdamW::step(ParamStore& store, const std::vector<Tensor>& grads) {
  if (static_cast<int>(grads.size()) != store.size())
    throw std::invalid_argument("AdamW::step: gradient list does not match parameter store");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (int i = 0; i < store.size(); ++i) {
    Param& p = store.at(i);
    const Tensor& g = grads[static_cast<std::size_t>(i)];
    if (!p.value.same_shape(g))
      throw std::invalid_argument("AdamW::step: gradient shape mismatch for " + p.name);
    if (p.m.numel() == 0) {
      p.m = Tensor(p.value.shape);
      p.v = Tensor(p.value.shape);
    }
    p.m.v = cfg_.beta1 * p.m.v + (1.0 - cfg_.beta1) * g.v;
    p.v.v = cfg_.beta2 * p.v.v + (1.0 - cfg_.beta2) * g.v.square();
    const Eigen::ArrayXd mhat = p.m.v / bc1;
    const Eigen::ArrayXd vhat = p.v.v / bc2;
    p.value.v -= cfg_.lr * (mhat / (vhat.sqrt() + cfg_.eps) + cfg_.weight_decay * p.value.v);
  }
}

}  // namespace docdet::nn
