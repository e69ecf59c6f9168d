// Copyright 2026 The Mogen Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mogen/ad.hpp"
#include "mogen/common.hpp"
#include "mogen/rng.hpp"

namespace mogen::nn {

struct Param {
  std::string name;
  Mat value;
  // Adam state.
  Mat m;
  Mat v;
};

class ParamStore {
 public:
  Param* add(std::string name, Mat init) {
    check(by_name_.find(name) == by_name_.end(), "duplicate parameter: " + name);
    auto p = std::make_unique<Param>();
    p->name = std::move(name);
    p->value = std::move(init);
    p->m = Mat::Zero(p->value.rows(), p->value.cols());
    p->v = Mat::Zero(p->value.rows(), p->value.cols());
    Param* raw = p.get();
    by_name_[raw->name] = raw;
    params_.push_back(std::move(p));
    return raw;
  }

  const std::vector<std::unique_ptr<Param>>& all() const { return params_; }

  Param* find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
  }

  std::size_t tensor_count() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

 private:
  std::vector<std::unique_ptr<Param>> params_;
  std::unordered_map<std::string, Param*> by_name_;
};

// Per-step association of parameters with tape leaves.
class Binding {
 public:
  Binding(ad::Tape& tape, const ParamStore& store) {
    for (const auto& p : store.all()) vars_[p.get()] = tape.leaf(p->value);
  }

  ad::Var operator[](const Param* p) const {
    auto it = vars_.find(p);
    check(it != vars_.end(), "parameter not bound: " + p->name);
    return it->second;
  }

  const std::unordered_map<const Param*, ad::Var>& vars() const { return vars_; }

 private:
  std::unordered_map<const Param*, ad::Var> vars_;
};

struct Ctx {
  ad::Tape& tape;
  const Binding& bind;
  bool train = false;
  Rng* rng = nullptr;
};

inline Mat xavier(Rng& rng, Eigen::Index in, Eigen::Index out) {
  return rng.normal_matrix(in, out, std::sqrt(2.0 / static_cast<double>(in + out)));
}

struct Linear {
  Param* W = nullptr;
  Param* b = nullptr;

  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, Eigen::Index in,
         Eigen::Index out, Rng& rng)
      : W(ps.add(name + ".W", xavier(rng, in, out))),
        b(ps.add(name + ".b", Mat::Zero(1, out))) {}

  ad::Var operator()(const Ctx& c, ad::Var x) const {
    return c.tape.linear(x, c.bind[W], c.bind[b]);
  }
};

struct LayerNorm {
  Param* gamma = nullptr;
  Param* beta = nullptr;

  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, Eigen::Index dim)
      : gamma(ps.add(name + ".gamma", Mat::Ones(1, dim))),
        beta(ps.add(name + ".beta", Mat::Zero(1, dim))) {}

  ad::Var operator()(const Ctx& c, ad::Var x) const {
    return c.tape.layer_norm_rows(x, c.bind[gamma], c.bind[beta]);
  }
};

inline ad::Var dropout(const Ctx& c, ad::Var x, double p) {
  if (!c.train || p <= 0.0) return x;
  check(c.rng != nullptr, "dropout: training context has no rng");
  const Mat& v = c.tape.val(x);
  Mat mask(v.rows(), v.cols());
  const double keep = 1.0 - p;
  for (Eigen::Index j = 0; j < v.cols(); ++j) {
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      mask(i, j) = c.rng->bernoulli(keep) ? 1.0 / keep : 0.0;
    }
  }
  return c.tape.mul_const(x, mask);
}

// Pre-norm residual block: y = LN(x); y + fc2(drop(gelu(fc1(y)))).
// The residual is added to the normalized input.
struct ResidualBlock {
  LayerNorm ln;
  Linear fc1;
  Linear fc2;
  double drop = 0.0;

  ResidualBlock() = default;
  ResidualBlock(ParamStore& ps, const std::string& name, Eigen::Index dim,
                double dropout_p, Rng& rng)
      : ln(ps, name + ".ln", dim),
        fc1(ps, name + ".fc1", dim, dim, rng),
        fc2(ps, name + ".fc2", dim, dim, rng),
        drop(dropout_p) {}

  ad::Var operator()(const Ctx& c, ad::Var x) const {
    ad::Var y = ln(c, x);
    ad::Var r = fc2(c, dropout(c, c.tape.gelu(fc1(c, y)), drop));
    return c.tape.add(y, r);
  }
};

// Linear projection, a stack of residual blocks, then LayerNorm + Linear head.
struct ResidualMLP {
  Linear in_proj;
  std::vector<ResidualBlock> blocks;
  LayerNorm out_ln;
  Linear out_proj;

  ResidualMLP() = default;
  ResidualMLP(ParamStore& ps, const std::string& name, Eigen::Index in,
              Eigen::Index hidden, Eigen::Index out, int n_blocks,
              double dropout_p, Rng& rng)
      : in_proj(ps, name + ".in", in, hidden, rng),
        out_ln(ps, name + ".out_ln", hidden),
        out_proj(ps, name + ".out", hidden, out, rng) {
    blocks.reserve(static_cast<std::size_t>(n_blocks));
    for (int i = 0; i < n_blocks; ++i) {
      blocks.emplace_back(ps, name + ".block" + std::to_string(i), hidden,
                          dropout_p, rng);
    }
  }

  ad::Var operator()(const Ctx& c, ad::Var x) const {
    ad::Var h = in_proj(c, x);
    for (const auto& blk : blocks) h = blk(c, h);
    return out_proj(c, out_ln(c, h));
  }
};

// Token embedding table queried as mean over token ids per row.
struct EmbeddingBag {
  Param* table = nullptr;

  EmbeddingBag() = default;
  EmbeddingBag(ParamStore& ps, const std::string& name, Eigen::Index vocab,
               Eigen::Index dim, Rng& rng)
      : table(ps.add(name + ".table", rng.normal_matrix(vocab, dim, 0.02))) {}

  ad::Var operator()(const Ctx& c,
                     const std::vector<std::vector<Eigen::Index>>& bags) const {
    return c.tape.bag_mean_rows(c.bind[table], bags);
  }
};

struct TransformerConfig {
  int layers = 4;
  int heads = 4;
  Eigen::Index width = 256;
  Eigen::Index ffn = 512;
  double dropout = 0.0;
};

// Pre-norm multi-head self-attention encoder over stacked sequences.
// Input is (B*S)xW with each sequence occupying S consecutive rows.
struct Transformer {
  TransformerConfig cfg;

  struct Layer {
    LayerNorm ln1;
    Linear wq, wk, wv, wo;
    LayerNorm ln2;
    Linear fc1, fc2;
  };
  std::vector<Layer> layers;
  LayerNorm final_ln;

  Transformer() = default;
  Transformer(ParamStore& ps, const std::string& name, TransformerConfig config,
              Rng& rng)
      : cfg(config) {
    check(cfg.width % cfg.heads == 0, "transformer: width must divide by heads");
    layers.resize(static_cast<std::size_t>(cfg.layers));
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string base = name + ".layer" + std::to_string(l);
      Layer& ly = layers[static_cast<std::size_t>(l)];
      ly.ln1 = LayerNorm(ps, base + ".ln1", cfg.width);
      ly.wq = Linear(ps, base + ".wq", cfg.width, cfg.width, rng);
      ly.wk = Linear(ps, base + ".wk", cfg.width, cfg.width, rng);
      ly.wv = Linear(ps, base + ".wv", cfg.width, cfg.width, rng);
      ly.wo = Linear(ps, base + ".wo", cfg.width, cfg.width, rng);
      ly.ln2 = LayerNorm(ps, base + ".ln2", cfg.width);
      ly.fc1 = Linear(ps, base + ".fc1", cfg.width, cfg.ffn, rng);
      ly.fc2 = Linear(ps, base + ".fc2", cfg.ffn, cfg.width, rng);
    }
    final_ln = LayerNorm(ps, name + ".final_ln", cfg.width);
  }

  ad::Var operator()(const Ctx& c, ad::Var x, Eigen::Index batch,
                     Eigen::Index seq) const {
    check(c.tape.val(x).rows() == batch * seq, "transformer: bad stacked shape");
    const Eigen::Index dk = cfg.width / cfg.heads;
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    for (const Layer& ly : layers) {
      ad::Var h = ly.ln1(c, x);
      ad::Var q = ly.wq(c, h);
      ad::Var k = ly.wk(c, h);
      ad::Var v = ly.wv(c, h);
      std::vector<ad::Var> seq_outs;
      seq_outs.reserve(static_cast<std::size_t>(batch));
      for (Eigen::Index b = 0; b < batch; ++b) {
        ad::Var qb = c.tape.rows(q, b * seq, seq);
        ad::Var kb = c.tape.rows(k, b * seq, seq);
        ad::Var vb = c.tape.rows(v, b * seq, seq);
        std::vector<ad::Var> heads;
        heads.reserve(static_cast<std::size_t>(cfg.heads));
        for (int hd = 0; hd < cfg.heads; ++hd) {
          ad::Var qh = c.tape.cols(qb, hd * dk, dk);
          ad::Var kh = c.tape.cols(kb, hd * dk, dk);
          ad::Var vh = c.tape.cols(vb, hd * dk, dk);
          ad::Var scores = c.tape.scale(c.tape.matmul_nt(qh, kh), inv_sqrt_dk);
          ad::Var attn = c.tape.softmax_rows(scores);
          heads.push_back(c.tape.matmul(attn, vh));
        }
        seq_outs.push_back(c.tape.hstack(heads));
      }
      ad::Var merged = batch == 1 ? seq_outs[0] : c.tape.vstack(seq_outs);
      x = c.tape.add(x, dropout(c, ly.wo(c, merged), cfg.dropout));
      ad::Var f = ly.ln2(c, x);
      f = ly.fc2(c, dropout(c, c.tape.gelu(ly.fc1(c, f)), cfg.dropout));
      x = c.tape.add(x, f);
    }
    return final_ln(c, x);
  }
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One row of a training curve.
struct TrainPoint {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

inline nlohmann::json train_log_to_json(const std::vector<TrainPoint>& log) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& pt : log) {
    out.push_back({{"step", pt.step}, {"loss", pt.loss}, {"lr", pt.lr}});
  }
  return out;
}

inline std::vector<TrainPoint> train_log_from_json(const nlohmann::json& j) {
  std::vector<TrainPoint> out;
  for (const auto& pt : j) {
    out.push_back({pt.at("step").get<int>(), pt.at("loss").get<double>(),
                   pt.at("lr").get<double>()});
  }
  return out;
}

// lr * 0.5 * (1 + cos(pi * step / total)), the annealing schedule used by
// every training stage here.
inline double cosine_lr(double base, std::int64_t step, std::int64_t total) {
  if (total <= 0) return base;
  const double t = std::min<double>(1.0, static_cast<double>(step) / static_cast<double>(total));
  return base * 0.5 * (1.0 + std::cos(M_PI * t));
}

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // Applies one update from gradients recorded on the tape.
  void step(ParamStore& store, const Binding& bind, const ad::Tape& tape,
            double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& p : store.all()) {
      const Mat g = tape.grad_of(bind[p.get()]);
      p->m = cfg_.beta1 * p->m + (1.0 - cfg_.beta1) * g;
      p->v = cfg_.beta2 * p->v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      const Mat mhat = p->m / bc1;
      const Mat vhat = p->v / bc2;
      p->value -= lr * (mhat.array() / (vhat.array().sqrt() + cfg_.eps)).matrix();
    }
  }

  std::int64_t steps_taken() const { return t_; }

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
};

// Divergence guard: a blown-up update can hide behind downstream
// normalization, so the parameters themselves are what gets checked.
inline void ensure_finite(const ParamStore& store, const std::string& where) {
  for (const auto& p : store.all()) {
    if (!p->value.allFinite()) {
      throw TrainingError(where + ": parameter " + p->name + " became non-finite");
    }
  }
}

}  // namespace mogen::nn
