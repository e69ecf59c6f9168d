// Copyright 2026 The Mogen Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mogen/ad.hpp"
#include "mogen/checkpoint.hpp"
#include "mogen/common.hpp"
#include "mogen/domain.hpp"
#include "mogen/geometry.hpp"
#include "mogen/nn.hpp"
#include "mogen/rng.hpp"

namespace mogen::align {

// ---- feature math ----

inline double cosine_similarity(const Vec& a, const Vec& b) {
  check(a.size() == b.size(), "cosine: dimension mismatch");
  const double na = a.norm();
  const double nb = b.norm();
  check(na > 0.0 && nb > 0.0, "cosine: zero vector");
  return a.dot(b) / (na * nb);
}

// Row i holds the softmax over candidates j of cossim(queries_i, cands_j)/H.
inline Mat pair_probabilities(const Mat& queries, const Mat& cands, double temperature) {
  check(temperature > 0.0, "pair_probabilities: temperature must be positive");
  check(queries.rows() >= 1 && cands.rows() >= 1, "pair_probabilities: empty batch");
  check(queries.cols() == cands.cols(), "pair_probabilities: dimension mismatch");
  Mat qn = queries;
  Mat cn = cands;
  for (Eigen::Index i = 0; i < qn.rows(); ++i) {
    const double n = qn.row(i).norm();
    check(n > 0.0, "pair_probabilities: zero query row");
    qn.row(i) /= n;
  }
  for (Eigen::Index i = 0; i < cn.rows(); ++i) {
    const double n = cn.row(i).norm();
    check(n > 0.0, "pair_probabilities: zero candidate row");
    cn.row(i) /= n;
  }
  Mat logits = (qn * cn.transpose()) / temperature;
  Mat out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const Eigen::ArrayXd e = (logits.row(i).array() - mx).exp();
    out.row(i) = (e / e.sum()).matrix();
  }
  return out;
}

// Symmetric InfoNCE over a paired batch, averaged over the batch. Both
// conditioning directions contribute, so a perfectly aligned single pair
// scores exactly zero.
inline double contrastive_loss(const Mat& view_feats, const Mat& text_feats,
                               double temperature) {
  check(view_feats.rows() == text_feats.rows(), "contrastive: batch size mismatch");
  const Mat p_tv = pair_probabilities(text_feats, view_feats, temperature);
  const Mat p_vt = pair_probabilities(view_feats, text_feats, temperature);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < p_tv.rows(); ++i) {
    loss += -std::log(p_tv(i, i)) - std::log(p_vt(i, i));
  }
  return loss / static_cast<double>(p_tv.rows());
}

// Differentiable counterpart used by the training loop.
inline ad::Var contrastive_loss(ad::Tape& tape, ad::Var view_feats, ad::Var text_feats,
                                double temperature) {
  check(temperature > 0.0, "contrastive: temperature must be positive");
  const Eigen::Index b = tape.val(view_feats).rows();
  check(tape.val(text_feats).rows() == b, "contrastive: batch size mismatch");
  const ad::Var vn = tape.normalize_rows(view_feats);
  const ad::Var tn = tape.normalize_rows(text_feats);
  const Mat eye = Mat::Identity(b, b);

  auto direction = [&](ad::Var q, ad::Var c) {
    const ad::Var logits = tape.scale(tape.matmul_nt(q, c), 1.0 / temperature);
    const ad::Var lse = tape.logv(tape.rowwise_sum(tape.expv(logits)));
    const ad::Var diag = tape.rowwise_sum(tape.mul_const(logits, eye));
    return tape.mean(tape.sub(lse, diag));
  };
  return tape.add(direction(tn, vn), direction(vn, tn));
}

// ---- model ----

struct AlignerConfig {
  Eigen::Index dim = 64;
  double temperature = 0.07;
  Eigen::Index text_hidden = 256;
  int text_blocks = 2;
  Eigen::Index view_hidden = 512;
  int view_blocks = 3;
  Eigen::Index view_input = 32;  // 2 coordinates per joint
  std::vector<double> azimuths = geo::default_azimuths();
  Eigen::Index batch = 256;
  int steps = 240;
  double lr = 2e-3;
  int log_every = 20;

  void validate() const {
    check_config(dim > 0 && text_hidden > 0 && view_hidden > 0 && view_input > 0,
                 "aligner: dimensions must be positive");
    check_config(temperature > 0.0, "aligner: temperature must be positive");
    check_config(text_blocks >= 0 && view_blocks >= 0, "aligner: negative block count");
    check_config(!azimuths.empty(), "aligner: no view azimuths");
    check_config(batch >= 2 && steps >= 1 && lr > 0.0, "aligner: bad training setup");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"dim", dim},
                          {"temperature", temperature},
                          {"text_hidden", text_hidden},
                          {"text_blocks", text_blocks},
                          {"view_hidden", view_hidden},
                          {"view_blocks", view_blocks},
                          {"view_input", view_input},
                          {"azimuths", azimuths},
                          {"batch", batch},
                          {"steps", steps},
                          {"lr", lr},
                          {"log_every", log_every}};
  }

  static AlignerConfig from_json(const nlohmann::json& j) {
    AlignerConfig c;
    c.dim = j.at("dim").get<Eigen::Index>();
    c.temperature = j.at("temperature").get<double>();
    c.text_hidden = j.at("text_hidden").get<Eigen::Index>();
    c.text_blocks = j.at("text_blocks").get<int>();
    c.view_hidden = j.at("view_hidden").get<Eigen::Index>();
    c.view_blocks = j.at("view_blocks").get<int>();
    c.view_input = j.at("view_input").get<Eigen::Index>();
    c.azimuths = j.at("azimuths").get<std::vector<double>>();
    c.batch = j.at("batch").get<Eigen::Index>();
    c.steps = j.at("steps").get<int>();
    c.lr = j.at("lr").get<double>();
    c.log_every = j.at("log_every").get<int>();
    return c;
  }
};

using TrainPoint = nn::TrainPoint;

struct AlignerModel {
  AlignerConfig config;
  std::vector<std::string> vocab;
  std::uint64_t seed = 0;
  bool frozen = false;
  nn::ParamStore params;
  nn::EmbeddingBag text_emb;
  nn::ResidualMLP text_mlp;
  nn::ResidualMLP view_mlp;
  std::vector<TrainPoint> train_log;

  AlignerModel(AlignerConfig cfg, std::vector<std::string> words, std::uint64_t sd)
      : config(std::move(cfg)), vocab(std::move(words)), seed(sd) {
    config.validate();
    check_config(!vocab.empty(), "aligner: empty vocabulary");
    Rng rng(seed, 0xa119ull);
    text_emb = nn::EmbeddingBag(params, "text.emb",
                                static_cast<Eigen::Index>(vocab.size()), config.dim, rng);
    text_mlp = nn::ResidualMLP(params, "text.mlp", config.dim, config.text_hidden,
                               config.dim, config.text_blocks, 0.0, rng);
    view_mlp = nn::ResidualMLP(params, "view.mlp", config.view_input, config.view_hidden,
                               config.dim, config.view_blocks, 0.0, rng);
  }

  AlignerModel(const AlignerModel&) = delete;
  AlignerModel& operator=(const AlignerModel&) = delete;
  AlignerModel(AlignerModel&&) = default;
  AlignerModel& operator=(AlignerModel&&) = default;

  std::vector<Eigen::Index> token_ids(const std::vector<std::string>& tokens) const {
    std::vector<Eigen::Index> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) {
      const auto it = std::find(vocab.begin(), vocab.end(), t);
      check(it != vocab.end(), "aligner: token not in vocabulary: " + t);
      ids.push_back(std::distance(vocab.begin(), it));
    }
    check(!ids.empty(), "aligner: empty caption");
    return ids;
  }
};

// ---- encoding ----

// One row of view-encoder input: projected joints flattened as x0 y0 x1 y1 ...
inline Eigen::RowVectorXd view_input_row(const geo::ViewDescriptor& vd) {
  Eigen::RowVectorXd row(static_cast<Eigen::Index>(vd.points2d.size()) * 2);
  for (std::size_t j = 0; j < vd.points2d.size(); ++j) {
    row(static_cast<Eigen::Index>(2 * j)) = vd.points2d[j].x();
    row(static_cast<Eigen::Index>(2 * j) + 1) = vd.points2d[j].y();
  }
  return row;
}

// All configured views of a flattened pose row, stacked one view per row.
inline Mat pose_view_inputs(const AlignerModel& model, const Eigen::RowVectorXd& pose_row,
                            const geo::Skeleton& skeleton) {
  const geo::Pose pose = geo::pose_from_row(pose_row, 0, skeleton.njoints());
  const geo::JointPositions pos = geo::forward_kinematics(pose, skeleton);
  const auto views = geo::project_views(pos, model.config.azimuths);
  Mat out(static_cast<Eigen::Index>(views.size()), model.config.view_input);
  for (std::size_t v = 0; v < views.size(); ++v) {
    const auto row = view_input_row(views[v]);
    check(row.size() == model.config.view_input, "aligner: view input width mismatch");
    out.row(static_cast<Eigen::Index>(v)) = row;
  }
  return out;
}

namespace detail {

inline std::vector<std::vector<Eigen::Index>> view_groups(Eigen::Index n,
                                                          Eigen::Index per_group) {
  std::vector<std::vector<Eigen::Index>> groups(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    auto& g = groups[static_cast<std::size_t>(i)];
    for (Eigen::Index v = 0; v < per_group; ++v) g.push_back(i * per_group + v);
  }
  return groups;
}

// Forward pass for a batch of token id bags; rows are unit length.
inline ad::Var text_features(const AlignerModel& m, const nn::Ctx& c,
                             const std::vector<std::vector<Eigen::Index>>& bags) {
  return c.tape.normalize_rows(m.text_mlp(c, m.text_emb(c, bags)));
}

// Forward pass over stacked view inputs, averaged per pose; rows unit length.
inline ad::Var view_features(const AlignerModel& m, const nn::Ctx& c, ad::Var stacked,
                             Eigen::Index poses) {
  const auto views_per_pose = static_cast<Eigen::Index>(m.config.azimuths.size());
  const ad::Var encoded = m.view_mlp(c, stacked);
  const ad::Var pooled =
      c.tape.bag_mean_rows(encoded, view_groups(poses, views_per_pose));
  return c.tape.normalize_rows(pooled);
}

}  // namespace detail

// Unit-normalized text features, one caption per row.
inline Mat encode_texts(const AlignerModel& model,
                        const std::vector<std::vector<std::string>>& captions) {
  check(!captions.empty(), "aligner: no captions");
  std::vector<std::vector<Eigen::Index>> bags;
  bags.reserve(captions.size());
  for (const auto& toks : captions) bags.push_back(model.token_ids(toks));
  ad::Tape tape;
  nn::Binding bind(tape, model.params);
  nn::Ctx c{tape, bind, false, nullptr};
  return tape.val(detail::text_features(model, c, bags));
}

inline Vec encode_text(const AlignerModel& model, const domain::Caption& caption) {
  return encode_texts(model, {caption.tokens}).row(0).transpose();
}

// Raw (unnormalized) feature of a single rendered view.
inline Vec encode_view(const AlignerModel& model, const geo::ViewDescriptor& vd) {
  const auto row = view_input_row(vd);
  check(row.size() == model.config.view_input, "aligner: view input width mismatch");
  ad::Tape tape;
  nn::Binding bind(tape, model.params);
  nn::Ctx c{tape, bind, false, nullptr};
  return tape.val(model.view_mlp(c, tape.leaf(row))).row(0).transpose();
}

// Unit-normalized pose features via render-and-encode: forward kinematics,
// projection to every configured azimuth, view encoding, then averaging.
inline Mat encode_poses(const AlignerModel& model, const Mat& pose_rows,
                        const geo::Skeleton& skeleton) {
  check(pose_rows.rows() >= 1, "aligner: no poses");
  const auto views_per_pose = static_cast<Eigen::Index>(model.config.azimuths.size());
  Mat stacked(pose_rows.rows() * views_per_pose, model.config.view_input);
  for (Eigen::Index i = 0; i < pose_rows.rows(); ++i) {
    stacked.middleRows(i * views_per_pose, views_per_pose) =
        pose_view_inputs(model, pose_rows.row(i), skeleton);
  }
  ad::Tape tape;
  nn::Binding bind(tape, model.params);
  nn::Ctx c{tape, bind, false, nullptr};
  return tape.val(detail::view_features(model, c, tape.leaf(stacked), pose_rows.rows()));
}

// Fraction of query rows whose best-cosine candidate carries the same label.
inline double top1_accuracy(const Mat& queries, const std::vector<int>& query_labels,
                            const Mat& cands, const std::vector<int>& cand_labels) {
  check(queries.rows() == static_cast<Eigen::Index>(query_labels.size()),
        "top1: query label count mismatch");
  check(cands.rows() == static_cast<Eigen::Index>(cand_labels.size()),
        "top1: candidate label count mismatch");
  Eigen::Index hits = 0;
  for (Eigen::Index i = 0; i < queries.rows(); ++i) {
    Eigen::Index best = 0;
    double best_sim = -2.0;
    for (Eigen::Index j = 0; j < cands.rows(); ++j) {
      const double s = cosine_similarity(queries.row(i).transpose(), cands.row(j).transpose());
      if (s > best_sim) {
        best_sim = s;
        best = j;
      }
    }
    if (cand_labels[static_cast<std::size_t>(best)] ==
        query_labels[static_cast<std::size_t>(i)]) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(queries.rows());
}

// ---- training ----

inline AlignerModel train_aligner(const domain::Dataset& ds, const geo::Skeleton& skeleton,
                                  const AlignerConfig& config, std::uint64_t seed) {
  config.validate();
  check(!ds.pairs.empty(), "aligner: dataset has no caption-pose pairs");

  AlignerModel model(config, domain::vocabulary(), seed);
  const auto views_per_pose = static_cast<Eigen::Index>(config.azimuths.size());
  const auto n = static_cast<Eigen::Index>(ds.pairs.size());

  // Rendering is frozen relative to the parameters, so precompute every
  // pair's stacked view inputs and token bags once.
  Mat all_views(n * views_per_pose, config.view_input);
  std::vector<std::vector<Eigen::Index>> all_bags;
  all_bags.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& rec = ds.pairs[static_cast<std::size_t>(i)];
    all_views.middleRows(i * views_per_pose, views_per_pose) =
        pose_view_inputs(model, rec.rot6d, skeleton);
    all_bags.push_back(model.token_ids(rec.caption.tokens));
  }

  Rng rng(seed, 0xa17eull);
  nn::Adam adam;
  for (int step = 0; step < config.steps; ++step) {
    ad::Tape tape;
    nn::Binding bind(tape, model.params);
    nn::Ctx c{tape, bind, true, &rng};

    Mat batch_views(config.batch * views_per_pose, config.view_input);
    std::vector<std::vector<Eigen::Index>> batch_bags;
    batch_bags.reserve(static_cast<std::size_t>(config.batch));
    for (Eigen::Index b = 0; b < config.batch; ++b) {
      const auto pick = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n)));
      batch_views.middleRows(b * views_per_pose, views_per_pose) =
          all_views.middleRows(pick * views_per_pose, views_per_pose);
      batch_bags.push_back(all_bags[static_cast<std::size_t>(pick)]);
    }

    const ad::Var vf = detail::view_features(model, c, tape.leaf(batch_views), config.batch);
    const ad::Var tf = detail::text_features(model, c, batch_bags);
    const ad::Var loss = contrastive_loss(tape, vf, tf, config.temperature);
    const double loss_value = tape.val(loss)(0, 0);
    if (!std::isfinite(loss_value)) {
      throw TrainingError("aligner: loss diverged at step " + std::to_string(step) +
                          " (lr " + std::to_string(nn::cosine_lr(config.lr, step, config.steps)) +
                          ")");
    }
    tape.backward(loss);
    const double lr = nn::cosine_lr(config.lr, step, config.steps);
    adam.step(model.params, bind, tape, lr);
    nn::ensure_finite(model.params, "aligner step " + std::to_string(step));
    if (step % config.log_every == 0 || step + 1 == config.steps) {
      model.train_log.push_back({step, loss_value, lr});
    }
  }
  model.frozen = true;
  return model;
}

// ---- persistence ----

inline void save_aligner(const std::filesystem::path& path, const AlignerModel& model) {
  nlohmann::json meta{{"kind", "aligner"},
                      {"schema_version", 1},
                      {"seed", model.seed},
                      {"frozen", model.frozen},
                      {"vocab", model.vocab},
                      {"config", model.config.to_json()}};
  meta["train_log"] = nn::train_log_to_json(model.train_log);
  ckpt::save(path, model.params, meta);
}

inline AlignerModel load_aligner(const std::filesystem::path& path) {
  const nlohmann::json meta = ckpt::peek_meta(path);
  check_io(meta.value("kind", std::string()) == "aligner", "checkpoint is not an aligner");
  check_io(meta.value("schema_version", 0) == 1, "aligner: unsupported checkpoint schema");
  AlignerModel model(AlignerConfig::from_json(meta.at("config")),
                     meta.at("vocab").get<std::vector<std::string>>(),
                     meta.at("seed").get<std::uint64_t>());
  ckpt::load(path, model.params);
  model.frozen = meta.value("frozen", true);
  model.train_log = nn::train_log_from_json(meta.value("train_log", nlohmann::json::array()));
  return model;
}

}  // namespace mogen::align
