#pragma once

// Parameter registry and the small layer vocabulary the segmentation model is built from.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "groundseg/error.hpp"
#include "groundseg/nn/autograd.hpp"

namespace groundseg::model {

using nn::Matrix;
using nn::Var;

/// Which part of the network a parameter belongs to; drives the freezing policy.
enum class ParamGroup { image_encoder, prompt_encoder_base, prompt_encoder_lora, adapter, decoder };

template <typename T>
struct NamedParam {
  std::string name;
  Var<T> var;
  ParamGroup group;
};

/// Ordered set of named leaves. Initial values are drawn in double precision so
/// float and double instantiations built from the same seed hold equal weights.
template <typename T>
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed) : rng_(seed) {}

  Var<T> uniform(const std::string& name, ParamGroup group, int rows, int cols, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng_));
    return add(name, group, std::move(m));
  }

  Var<T> normal(const std::string& name, ParamGroup group, int rows, int cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng_));
    return add(name, group, std::move(m));
  }

  Var<T> constant(const std::string& name, ParamGroup group, int rows, int cols, double value) {
    return add(name, group, Matrix<T>::Constant(rows, cols, static_cast<T>(value)));
  }

  Var<T> add(const std::string& name, ParamGroup group, Matrix<T> value) {
    for (const auto& p : params_) {
      if (p.name == name) throw Error("duplicate parameter name " + name);
    }
    Var<T> v(std::move(value), true);
    params_.push_back({name, v, group});
    return v;
  }

  [[nodiscard]] std::vector<NamedParam<T>>& params() { return params_; }
  [[nodiscard]] const std::vector<NamedParam<T>>& params() const { return params_; }

  [[nodiscard]] Var<T> find(const std::string& name) const {
    for (const auto& p : params_) {
      if (p.name == name) return p.var;
    }
    throw Error("no parameter named " + name);
  }

 private:
  std::mt19937_64 rng_;
  std::vector<NamedParam<T>> params_;
};

/// y = x W + b, optionally with a low-rank update (alpha / r) * x A B.
template <typename T>
struct Linear {
  Var<T> weight;  // in x out
  Var<T> bias;    // 1 x out
  Var<T> lora_a;  // in x r
  Var<T> lora_b;  // r x out, zero-initialised
  T lora_scale = T(0);

  Linear() = default;
  Linear(ParameterStore<T>& store, const std::string& name, ParamGroup group, int in, int out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = store.uniform(name + ".weight", group, in, out, bound);
    bias = store.uniform(name + ".bias", group, 1, out, bound);
  }

  void attach_lora(ParameterStore<T>& store, const std::string& name, int rank, double alpha) {
    const int in = static_cast<int>(weight.rows());
    const int out = static_cast<int>(weight.cols());
    lora_a = store.uniform(name + ".lora_a", ParamGroup::prompt_encoder_lora, in, rank,
                           1.0 / std::sqrt(static_cast<double>(in)));
    lora_b = store.constant(name + ".lora_b", ParamGroup::prompt_encoder_lora, rank, out, 0.0);
    lora_scale = static_cast<T>(alpha / rank);
  }

  [[nodiscard]] Var<T> operator()(const Var<T>& x) const {
    Var<T> y = nn::add_row(nn::matmul(x, weight), bias);
    if (lora_a.defined()) y = nn::add(y, nn::scale(nn::matmul(nn::matmul(x, lora_a), lora_b), lora_scale));
    return y;
  }
};

template <typename T>
struct LayerNorm {
  Var<T> gamma;
  Var<T> beta;

  LayerNorm() = default;
  LayerNorm(ParameterStore<T>& store, const std::string& name, ParamGroup group, int dim) {
    gamma = store.constant(name + ".gamma", group, 1, dim, 1.0);
    beta = store.constant(name + ".beta", group, 1, dim, 0.0);
  }

  [[nodiscard]] Var<T> operator()(const Var<T>& x) const { return nn::layer_norm(x, gamma, beta); }
};

/// Multi-head attention; `mask`, when given, is added to the attention logits.
template <typename T>
struct Attention {
  Linear<T> q;
  Linear<T> k;
  Linear<T> v;
  Linear<T> o;
  int heads = 1;

  Attention() = default;
  Attention(ParameterStore<T>& store, const std::string& name, ParamGroup group, int dim, int num_heads)
      : q(store, name + ".q", group, dim, dim),
        k(store, name + ".k", group, dim, dim),
        v(store, name + ".v", group, dim, dim),
        o(store, name + ".o", group, dim, dim),
        heads(num_heads) {}

  void attach_lora(ParameterStore<T>& store, const std::string& name, int rank, double alpha) {
    q.attach_lora(store, name + ".q", rank, alpha);
    k.attach_lora(store, name + ".k", rank, alpha);
    v.attach_lora(store, name + ".v", rank, alpha);
    o.attach_lora(store, name + ".o", rank, alpha);
  }

  [[nodiscard]] Var<T> operator()(const Var<T>& query, const Var<T>& key, const Var<T>& value,
                                  const Var<T>* mask = nullptr) const {
    const Var<T> qp = q(query);
    const Var<T> kp = k(key);
    const Var<T> vp = v(value);
    const auto dim = qp.cols();
    const auto dh = dim / heads;
    const T inv = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Var<T>> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      auto qh = nn::slice_cols(qp, h * dh, dh);
      auto kh = nn::slice_cols(kp, h * dh, dh);
      auto vh = nn::slice_cols(vp, h * dh, dh);
      auto scores = nn::scale(nn::matmul_nt(qh, kh), inv);
      if (mask != nullptr) scores = nn::add(scores, *mask);
      outs.push_back(nn::matmul(nn::softmax_rows(scores), vh));
    }
    return o(heads == 1 ? outs.front() : nn::concat_cols(outs));
  }
};

/// Sequence of linear layers with an activation between them.
template <typename T>
struct Mlp {
  std::vector<Linear<T>> layers;
  enum class Act { relu, gelu, silu } act = Act::relu;

  Mlp() = default;
  Mlp(ParameterStore<T>& store, const std::string& name, ParamGroup group, const std::vector<int>& widths, Act a)
      : act(a) {
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      layers.emplace_back(store, name + "." + std::to_string(i), group, widths[i], widths[i + 1]);
    }
  }

  [[nodiscard]] Var<T> operator()(Var<T> x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](x);
      if (i + 1 < layers.size()) {
        switch (act) {
          case Act::relu: x = nn::relu(x); break;
          case Act::gelu: x = nn::gelu(x); break;
          case Act::silu: x = nn::silu(x); break;
        }
      }
    }
    return x;
  }
};

/// Fixed 2-D sinusoidal position table, (side*side) x dim.
template <typename T>
Matrix<T> sinusoid_grid(int side, int dim) {
  Matrix<T> pe(side * side, dim);
  const int quarter = dim / 4;
  for (int i = 0; i < side; ++i) {
    for (int j = 0; j < side; ++j) {
      const auto row = static_cast<Eigen::Index>(i) * side + j;
      for (int c = 0; c < dim; ++c) {
        const int band = (c % std::max(quarter, 1));
        const double freq = std::pow(100.0, -static_cast<double>(band) / std::max(quarter, 1));
        const double pos = c < dim / 2 ? i : j;
        const bool use_sin = (c / std::max(quarter, 1)) % 2 == 0;
        pe(row, c) = static_cast<T>(use_sin ? std::sin(pos * freq) : std::cos(pos * freq));
      }
    }
  }
  return pe;
}

}  // namespace groundseg::model
