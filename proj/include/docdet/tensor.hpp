#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

#include "docdet/random.hpp"

namespace docdet::nn {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Dense row-major double tensor. Rank 1-3 covers everything in this codebase;
// images are stored [C, H, W], token matrices [n, d].
struct Tensor {
  std::vector<int> shape;
  Eigen::ArrayXd v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) { v = Eigen::ArrayXd::Zero(count(shape)); }

  static int64_t count(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int> s, double value) {
    Tensor t(std::move(s));
    t.v.setConstant(value);
    return t;
  }

  static Tensor from(std::vector<int> s, std::initializer_list<double> vals) {
    Tensor t(std::move(s));
    if (static_cast<int64_t>(vals.size()) != t.numel())
      throw std::invalid_argument("Tensor::from: element count mismatch");
    int64_t i = 0;
    for (double x : vals) t.v[i++] = x;
    return t;
  }

  static Tensor from_vec(std::vector<int> s, const std::vector<double>& vals) {
    Tensor t(std::move(s));
    if (static_cast<int64_t>(vals.size()) != t.numel())
      throw std::invalid_argument("Tensor::from_vec: element count mismatch");
    for (int64_t i = 0; i < t.numel(); ++i) t.v[i] = vals[static_cast<size_t>(i)];
    return t;
  }

  static Tensor randn(std::vector<int> s, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(s));
    for (int64_t i = 0; i < t.numel(); ++i) t.v[i] = rng.normal(0.0, stddev);
    return t;
  }

  int64_t numel() const { return v.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  // rank-2 accessors
  int rows() const { return shape.at(0); }
  int cols() const { return rank() >= 2 ? shape.at(1) : 1; }
  double& at(int r, int c) { return v[static_cast<int64_t>(r) * cols() + c]; }
  double at(int r, int c) const { return v[static_cast<int64_t>(r) * cols() + c]; }

  MatMap mat() { return MatMap(v.data(), rows(), cols()); }
  ConstMatMap mat() const { return ConstMatMap(v.data(), rows(), cols()); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

}  // namespace docdet::nn
