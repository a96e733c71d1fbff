#pragma once

#include <algorithm>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qlab/layers.hpp"
#include "qlab/tensor.hpp"

namespace qlab {

enum class QVariant { kRedqBase, kDroqBase, kMhaRedq, kMhaDroq, kIdentityDroq };

inline const char* to_string(QVariant v) {
  switch (v) {
    case QVariant::kRedqBase: return "REDQ_BASE";
    case QVariant::kDroqBase: return "DROQ_BASE";
    case QVariant::kMhaRedq: return "MHA_REDQ";
    case QVariant::kMhaDroq: return "MHA_DROQ";
    case QVariant::kIdentityDroq: return "IDENTITY_DROQ";
  }
  return "?";
}

inline QVariant parse_qvariant(const std::string& s) {
  if (s == "REDQ_BASE") return QVariant::kRedqBase;
  if (s == "DROQ_BASE") return QVariant::kDroqBase;
  if (s == "MHA_REDQ") return QVariant::kMhaRedq;
  if (s == "MHA_DROQ") return QVariant::kMhaDroq;
  if (s == "IDENTITY_DROQ") return QVariant::kIdentityDroq;
  throw ParameterError("unknown variant '" + s + "'");
}

inline bool variant_has_mha(QVariant v) {
  return v == QVariant::kMhaRedq || v == QVariant::kMhaDroq;
}

inline bool variant_has_residual(QVariant v) { return v == QVariant::kIdentityDroq; }

// Dropout + layer normalization in the trunk.
inline bool variant_is_droq(QVariant v) {
  return v == QVariant::kDroqBase || v == QVariant::kMhaDroq || v == QVariant::kIdentityDroq;
}

template <typename Real>
struct QNetworkConfig {
  QVariant variant = QVariant::kMhaRedq;
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  std::size_t d_model = 256;  // embedding width and trunk width
  std::size_t heads = 8;
  Real dropout_rate = Real(0.01);
  AttentionScale attention_scale = AttentionScale::kPerHead;
  Real ln_eps = Real(1e-5);
};

// One Q-function: embed -> (mha | residual | nothing) -> trunk -> scalar head.
// Trunk is two hidden layers of width d_model; DroQ-derived variants order
// each hidden layer as linear -> dropout -> layer_norm -> relu.
template <typename Real>
class QNetwork {
 public:
  QNetwork() = default;

  QNetwork(const QNetworkConfig<Real>& cfg, Rng& rng) : cfg_(cfg) {
    const std::size_t in = cfg.state_dim + cfg.action_dim;
    embed_ = Linear<Real>(in, cfg.d_model, rng);
    if (variant_has_mha(cfg.variant)) {
      mha_.emplace(cfg.d_model, cfg.heads, cfg.attention_scale, rng);
    }
    if (variant_has_residual(cfg.variant)) {
      residual_.emplace(Linear<Real>(cfg.d_model, cfg.d_model, rng));
    }
    h1_ = Linear<Real>(cfg.d_model, cfg.d_model, rng);
    h2_ = Linear<Real>(cfg.d_model, cfg.d_model, rng);
    if (variant_is_droq(cfg.variant)) {
      ln1_.emplace(cfg.d_model);
      ln2_.emplace(cfg.d_model);
      ln1_->eps = cfg.ln_eps;
      ln2_->eps = cfg.ln_eps;
    }
    head_ = Linear<Real>(cfg.d_model, 1, rng);
  }

  const QNetworkConfig<Real>& config() const { return cfg_; }
  std::size_t token_width() const { return cfg_.state_dim + cfg_.action_dim; }

  // pairs [T x (state_dim+action_dim)], T a multiple of group_len. Rows are
  // partitioned into consecutive groups of group_len tokens; attention acts
  // within a group only. group_len == 1 uses the exact single-token
  // degenerate form (no cross-row coupling anywhere).
  Tensor<Real> forward(const Tensor<Real>& pairs, std::size_t group_len, bool training,
                       Rng& rng) const {
    if (pairs.rows() == 0) throw ParameterError("qnet: empty input");
    if (pairs.cols() != token_width()) {
      throw DimensionError("qnet: token width " + std::to_string(pairs.cols()) + " != expected " +
                           std::to_string(token_width()));
    }
    if (group_len == 0 || pairs.rows() % group_len != 0) {
      throw ContractError("qnet: rows " + std::to_string(pairs.rows()) +
                          " not a multiple of group length " + std::to_string(group_len));
    }
    Tensor<Real> h = embed_.forward(pairs);
    if (mha_) {
      if (group_len == 1) {
        h = mha_->forward_single_token_rows(h);
      } else if (group_len == pairs.rows()) {
        h = mha_->forward(h);
      } else {
        const std::size_t n_groups = pairs.rows() / group_len;
        std::vector<Tensor<Real>> parts;
        parts.reserve(n_groups);
        for (std::size_t g = 0; g < n_groups; ++g) {
          parts.push_back(mha_->forward(slice_rows(h, g * group_len, (g + 1) * group_len)));
        }
        h = concat_rows(parts);
      }
    } else if (residual_) {
      h = residual_->forward(h);
    }
    h = trunk_layer(h, h1_, ln1_, training, rng);
    h = trunk_layer(h, h2_, ln2_, training, rng);
    return head_.forward(h);  // [T x 1]
  }

  // Convenience for rows-as-independent-pairs evaluation (acting,
  // diagnostics, the actor objective).
  Tensor<Real> forward_rows(const Tensor<Real>& pairs, bool training, Rng& rng) const {
    return forward(pairs, 1, training, rng);
  }

  QNetwork clone() const {
    QNetwork c;
    c.cfg_ = cfg_;
    c.embed_ = embed_.clone();
    if (mha_) c.mha_.emplace(mha_->clone());
    if (residual_) c.residual_.emplace(residual_->clone());
    c.h1_ = h1_.clone();
    c.h2_ = h2_.clone();
    if (ln1_) c.ln1_.emplace(ln1_->clone());
    if (ln2_) c.ln2_.emplace(ln2_->clone());
    c.head_ = head_.clone();
    return c;
  }

  void named_params(NamedParams<Real>& out, const std::string& prefix) const {
    embed_.named_params(out, prefix + ".embed");
    if (mha_) mha_->named_params(out, prefix + ".mha");
    if (residual_) residual_->named_params(out, prefix + ".residual");
    h1_.named_params(out, prefix + ".h1");
    if (ln1_) ln1_->named_params(out, prefix + ".ln1");
    h2_.named_params(out, prefix + ".h2");
    if (ln2_) ln2_->named_params(out, prefix + ".ln2");
    head_.named_params(out, prefix + ".head");
  }

  std::vector<Tensor<Real>> params() const {
    NamedParams<Real> named;
    named_params(named, "q");
    std::vector<Tensor<Real>> out;
    out.reserve(named.size());
    for (auto& [_, t] : named) out.push_back(t);
    return out;
  }

  // Direct access for tests that hand-build networks.
  Linear<Real>& embed() { return embed_; }
  Linear<Real>& hidden1() { return h1_; }
  Linear<Real>& hidden2() { return h2_; }
  Linear<Real>& head() { return head_; }
  std::optional<MultiHeadAttention<Real>>& mha() { return mha_; }
  std::optional<Residual<Real, Linear<Real>>>& residual() { return residual_; }

 private:
  Tensor<Real> trunk_layer(const Tensor<Real>& x, const Linear<Real>& lin,
                           const std::optional<LayerNorm<Real>>& ln, bool training,
                           Rng& rng) const {
    Tensor<Real> h = lin.forward(x);
    if (variant_is_droq(cfg_.variant)) {
      h = dropout(h, cfg_.dropout_rate, training, rng);
      h = ln->forward(h);
    }
    return relu(h);
  }

  QNetworkConfig<Real> cfg_;
  Linear<Real> embed_;
  std::optional<MultiHeadAttention<Real>> mha_;
  std::optional<Residual<Real, Linear<Real>>> residual_;
  Linear<Real> h1_, h2_;
  std::optional<LayerNorm<Real>> ln1_, ln2_;
  Linear<Real> head_;
};

enum class TargetReduction { kMin, kMean };

// N online Q-functions plus mirrored target copies. Members are
// independently initialized; targets start as exact copies.
template <typename Real>
class CriticEnsemble {
 public:
  CriticEnsemble() = default;

  CriticEnsemble(const QNetworkConfig<Real>& cfg, std::size_t n, std::uint64_t seed) {
    if (n == 0) throw ParameterError("ensemble: N must be >= 1");
    for (std::size_t i = 0; i < n; ++i) {
      Rng rng(Rng::derive(seed, {stream::kInit, i}));
      members_.push_back(QNetwork<Real>(cfg, rng));
      targets_.push_back(members_.back().clone());
    }
  }

  std::size_t size() const { return members_.size(); }
  QNetwork<Real>& member(std::size_t i) { return members_[i]; }
  const QNetwork<Real>& member(std::size_t i) const { return members_[i]; }
  QNetwork<Real>& target(std::size_t i) { return targets_[i]; }
  const QNetwork<Real>& target(std::size_t i) const { return targets_[i]; }

  // Elementwise reduction of target-network Q-values over an M-subset of
  // distinct member indices. Runs in eval mode off the tape.
  std::vector<Real> reduce_over_subset(std::span<const std::size_t> subset,
                                       const Tensor<Real>& pairs, std::size_t group_len,
                                       TargetReduction reduction) const {
    check_subset(subset);
    NoGradGuard<Real> no_grad;
    Rng dummy(0);
    std::vector<Real> acc;
    for (std::size_t k = 0; k < subset.size(); ++k) {
      Tensor<Real> q = targets_[subset[k]].forward(pairs, group_len, /*training=*/false, dummy);
      auto qv = q.data();
      if (k == 0) {
        acc.assign(qv.begin(), qv.end());
      } else if (reduction == TargetReduction::kMin) {
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = std::min(acc[i], qv[i]);
      } else {
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += qv[i];
      }
    }
    if (reduction == TargetReduction::kMean) {
      for (auto& v : acc) v /= static_cast<Real>(subset.size());
    }
    return acc;
  }

  std::vector<Real> min_over_subset(std::span<const std::size_t> subset, const Tensor<Real>& pairs,
                                    std::size_t group_len) const {
    return reduce_over_subset(subset, pairs, group_len, TargetReduction::kMin);
  }

  // Mean over the online members, one row per input pair (the actor
  // objective and Q-prediction diagnostics evaluate this in eval mode).
  std::vector<Real> mean_member_q_rows(const Tensor<Real>& pairs) const {
    NoGradGuard<Real> no_grad;
    Rng dummy(0);
    std::vector<Real> acc(pairs.rows(), Real(0));
    for (const auto& m : members_) {
      Tensor<Real> q = m.forward_rows(pairs, /*training=*/false, dummy);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += q.data()[i];
    }
    for (auto& v : acc) v /= static_cast<Real>(members_.size());
    return acc;
  }

  void named_params(NamedParams<Real>& out) const {
    for (std::size_t i = 0; i < members_.size(); ++i) {
      members_[i].named_params(out, "member" + std::to_string(i));
    }
    for (std::size_t i = 0; i < targets_.size(); ++i) {
      targets_[i].named_params(out, "target" + std::to_string(i));
    }
  }

 private:
  void check_subset(std::span<const std::size_t> subset) const {
    if (subset.empty() || subset.size() > members_.size()) {
      throw ParameterError("subset: size " + std::to_string(subset.size()) +
                           " out of range for ensemble of " + std::to_string(members_.size()));
    }
    for (std::size_t i = 0; i < subset.size(); ++i) {
      if (subset[i] >= members_.size()) {
        throw ParameterError("subset: index " + std::to_string(subset[i]) + " out of range");
      }
      for (std::size_t j = i + 1; j < subset.size(); ++j) {
        if (subset[i] == subset[j]) {
          throw ParameterError("subset: duplicate index " + std::to_string(subset[i]));
        }
      }
    }
  }

  std::vector<QNetwork<Real>> members_;
  std::vector<QNetwork<Real>> targets_;
};

}  // namespace qlab
