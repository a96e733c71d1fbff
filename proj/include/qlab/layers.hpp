#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "qlab/tensor.hpp"

namespace qlab {

template <typename Real>
using NamedParams = std::vector<std::pair<std::string, Tensor<Real>>>;

namespace detail {

// All linear maps initialize uniform in +-1/sqrt(fan_in); biases start at zero.
template <typename Real>
std::vector<Real> uniform_fan_in(std::size_t fan_in, std::size_t count, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<Real> v(count);
  for (auto& x : v) x = static_cast<Real>(rng.uniform(-bound, bound));
  return v;
}

}  // namespace detail

template <typename Real>
struct Linear {
  Tensor<Real> weight;  // [in x out]
  Tensor<Real> bias;    // [out]

  Linear() = default;

  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight(Tensor<Real>::param({in, out}, detail::uniform_fan_in<Real>(in, in * out, rng))),
        bias(Tensor<Real>::param({out}, std::vector<Real>(out, Real(0)))) {}

  Tensor<Real> forward(const Tensor<Real>& x) const { return affine(x, weight, bias); }

  std::size_t in_dim() const { return weight.rows(); }
  std::size_t out_dim() const { return weight.cols(); }

  Linear clone() const {
    Linear c;
    c.weight = weight.clone();
    c.bias = bias.clone();
    return c;
  }

  void named_params(NamedParams<Real>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <typename Real>
struct LayerNorm {
  Tensor<Real> gain;  // [n]
  Tensor<Real> bias;  // [n]
  Real eps = Real(1e-5);

  LayerNorm() = default;

  explicit LayerNorm(std::size_t n)
      : gain(Tensor<Real>::param({n}, std::vector<Real>(n, Real(1)))),
        bias(Tensor<Real>::param({n}, std::vector<Real>(n, Real(0)))) {}

  Tensor<Real> forward(const Tensor<Real>& x) const { return layer_norm(x, gain, bias, eps); }

  LayerNorm clone() const {
    LayerNorm c;
    c.gain = gain.clone();
    c.bias = bias.clone();
    c.eps = eps;
    return c;
  }

  void named_params(NamedParams<Real>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".gain", gain);
    out.emplace_back(prefix + ".bias", bias);
  }
};

// Denominator convention for the attention logits: per-head width is the
// default; full_model uses the whole embedding width.
enum class AttentionScale { kPerHead, kFullModel };

// Multi-head self-attention over a token sequence. Each head owns distinct
// q/k/v projections; heads are concatenated and mixed by the output matrix.
// No positional encoding and no masking: the layer is permutation-equivariant.
template <typename Real>
struct MultiHeadAttention {
  std::size_t heads = 1;
  std::size_t d_model = 0;
  AttentionScale scale_mode = AttentionScale::kPerHead;
  std::vector<Tensor<Real>> wq, wk, wv;  // per head, [d_model x d_head]
  Tensor<Real> w_out;                    // [d_model x d_model]

  MultiHeadAttention() = default;

  MultiHeadAttention(std::size_t d_model_, std::size_t heads_, AttentionScale mode, Rng& rng)
      : heads(heads_), d_model(d_model_), scale_mode(mode) {
    if (heads == 0) throw ParameterError("mha: head count must be >= 1");
    if (d_model % heads != 0) {
      throw ParameterError("mha: d_model " + std::to_string(d_model) +
                           " not divisible by heads " + std::to_string(heads));
    }
    const std::size_t d_head = d_model / heads;
    for (std::size_t h = 0; h < heads; ++h) {
      wq.push_back(Tensor<Real>::param({d_model, d_head},
                                       detail::uniform_fan_in<Real>(d_model, d_model * d_head, rng)));
      wk.push_back(Tensor<Real>::param({d_model, d_head},
                                       detail::uniform_fan_in<Real>(d_model, d_model * d_head, rng)));
      wv.push_back(Tensor<Real>::param({d_model, d_head},
                                       detail::uniform_fan_in<Real>(d_model, d_model * d_head, rng)));
    }
    w_out = Tensor<Real>::param({d_model, d_model},
                                detail::uniform_fan_in<Real>(d_model, d_model * d_model, rng));
  }

  std::size_t head_dim() const { return d_model / heads; }

  Real logit_scale() const {
    const std::size_t d = scale_mode == AttentionScale::kPerHead ? head_dim() : d_model;
    return Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(d)));
  }

  // tokens [L x d_model] -> [L x d_model]. When attn_out is non-null it
  // receives the per-head [L x L] attention weight matrices.
  Tensor<Real> forward(const Tensor<Real>& tokens,
                       std::vector<Tensor<Real>>* attn_out = nullptr) const {
    if (tokens.rows() == 0) throw ParameterError("mha: empty token sequence");
    if (tokens.cols() != d_model) {
      throw DimensionError("mha: token width " + std::to_string(tokens.cols()) +
                           " does not match d_model " + std::to_string(d_model));
    }
    std::vector<Tensor<Real>> contexts;
    contexts.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor<Real> q = matmul(tokens, wq[h]);
      Tensor<Real> k = matmul(tokens, wk[h]);
      Tensor<Real> v = matmul(tokens, wv[h]);
      Tensor<Real> scores = scale(matmul(q, transpose(k)), logit_scale());
      Tensor<Real> attn = row_softmax(scores);
      if (attn_out) attn_out->push_back(attn);
      contexts.push_back(matmul(attn, v));
    }
    return matmul(concat_cols(contexts), w_out);
  }

  // Rows of x are independent single-token sequences. Attention over one
  // token is the constant weight 1, so the layer reduces to the v-projections
  // concatenated and mixed by w_out; q/k never enter.
  Tensor<Real> forward_single_token_rows(const Tensor<Real>& x) const {
    if (x.rows() == 0) throw ParameterError("mha: empty token sequence");
    if (x.cols() != d_model) {
      throw DimensionError("mha: token width " + std::to_string(x.cols()) +
                           " does not match d_model " + std::to_string(d_model));
    }
    std::vector<Tensor<Real>> contexts;
    contexts.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) contexts.push_back(matmul(x, wv[h]));
    return matmul(concat_cols(contexts), w_out);
  }

  MultiHeadAttention clone() const {
    MultiHeadAttention c;
    c.heads = heads;
    c.d_model = d_model;
    c.scale_mode = scale_mode;
    for (const auto& t : wq) c.wq.push_back(t.clone());
    for (const auto& t : wk) c.wk.push_back(t.clone());
    for (const auto& t : wv) c.wv.push_back(t.clone());
    c.w_out = w_out.clone();
    return c;
  }

  void named_params(NamedParams<Real>& out, const std::string& prefix) const {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::string hp = prefix + ".head" + std::to_string(h);
      out.emplace_back(hp + ".wq", wq[h]);
      out.emplace_back(hp + ".wk", wk[h]);
      out.emplace_back(hp + ".wv", wv[h]);
    }
    out.emplace_back(prefix + ".w_out", w_out);
  }
};

// Identity connection around an inner shape-preserving map: x + inner(x).
template <typename Real, typename Inner = Linear<Real>>
struct Residual {
  Inner inner;

  Residual() = default;
  explicit Residual(Inner inner_) : inner(std::move(inner_)) {}

  Tensor<Real> forward(const Tensor<Real>& x) const {
    Tensor<Real> y = inner.forward(x);
    if (!y.same_shape(x)) {
      throw DimensionError("residual: inner output " + detail::shape_str(y.shape()) +
                           " does not match input " + detail::shape_str(x.shape()));
    }
    return add(x, y);
  }

  Residual clone() const { return Residual(inner.clone()); }

  void named_params(NamedParams<Real>& out, const std::string& prefix) const {
    inner.named_params(out, prefix + ".inner");
  }
};

}  // namespace qlab
