#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "docdet/autodiff.hpp"
#include "docdet/random.hpp"
#include "docdet/tensor.hpp"

namespace docdet::nn {

struct Param {
  std::string name;
  Tensor value;
  Tensor m, v;  // optimizer moments, sized on first step
};

// Named parameter registry. Creation order is canonical: gradient vectors,
// optimizer state, and checkpoints all follow it.
class ParamStore {
 public:
  int create(const std::string& name, std::vector<int> shape);  // throws on duplicate names
  int find(const std::string& name) const;                      // -1 when absent
  Param& at(int i) { return params_[static_cast<std::size_t>(i)]; }
  const Param& at(int i) const { return params_[static_cast<std::size_t>(i)]; }
  int size() const { return static_cast<int>(params_.size()); }
  std::int64_t total_elements() const;

 private:
  std::vector<Param> params_;
  std::map<std::string, int> index_;
};

// One forward/backward pass: a fresh tape with every parameter entered as a
// differentiable input, in store order.
struct Graph {
  explicit Graph(ParamStore& s);
  Tape tape;
  ParamStore* store = nullptr;
  std::vector<Tape::Id> ids;
  Tape::Id p(int param) const { return ids[static_cast<std::size_t>(param)]; }
  std::vector<Tensor> grads() const;  // after backward; zeros for untouched params
};

double he_stddev(int fan_in);
double xavier_stddev(int fan_in, int fan_out);

class Linear {
 public:
  Linear() = default;
  // stddev < 0 picks Xavier-normal
  Linear(ParamStore& s, const std::string& name, int in, int out, Rng& rng, double stddev = -1);
  Tape::Id apply(Graph& g, Tape::Id x) const;  // [n, in] -> [n, out]
  int out_dim() const { return out_; }

 private:
  int w_ = -1, b_ = -1, in_ = 0, out_ = 0;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore& s, const std::string& name, int dim);
  Tape::Id apply(Graph& g, Tape::Id x) const;

 private:
  int gamma_ = -1, beta_ = -1;
};

// Linear stack with relu between layers (none after the last)
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore& s, const std::string& name, const std::vector<int>& dims, Rng& rng);
  Tape::Id apply(Graph& g, Tape::Id x) const;

 private:
  std::vector<Linear> layers_;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& s, const std::string& name, int dim, int heads, Rng& rng);
  // q [nq, dim], k and v [nk, dim]; additive_mask is kNone or [nq, nk]
  Tape::Id apply(Graph& g, Tape::Id q, Tape::Id k, Tape::Id v,
                 Tape::Id additive_mask = Tape::kNone) const;

 private:
  Linear wq_, wk_, wv_, wo_;
  int dim_ = 0, heads_ = 0;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore& s, const std::string& name, int cin, int cout, int k, int stride, int pad,
         Rng& rng);  // He-normal weights, zero bias
  Tape::Id apply(Graph& g, Tape::Id x) const;  // [cin, H, W] -> [cout, H', W']

 private:
  int w_ = -1, b_ = -1, stride_ = 1, pad_ = 0;
};

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 1e-4;
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}
  AdamWConfig& config() { return cfg_; }
  const AdamWConfig& config() const { return cfg_; }
  void step(ParamStore& store, const std::vector<Tensor>& grads);
  int steps_taken() const { return t_; }
  void set_steps_taken(int t) { t_ = t; }

 private:
  AdamWConfig cfg_;
  int t_ = 0;
};

}  // namespace docdet::nn
