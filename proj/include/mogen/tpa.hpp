// Copyright 2026 The Mogen Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef MOGEN_TPA_HPP
#define MOGEN_TPA_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mogen/aligner.hpp"
#include "mogen/checkpoint.hpp"
#include "mogen/common.hpp"
#include "mogen/domain.hpp"
#include "mogen/geometry.hpp"
#include "mogen/nn.hpp"

// Distilled pose scoring. The render-and-encode pipeline (forward kinematics,
// multi-view projection, view encoding, averaging) is slow because every pose
// pays for five view passes; this module trains a single residual MLP on the
// flattened pose to predict the pipeline's output directly.
namespace mogen::tpa {

// ---- pipeline targets ----

// Raw averaged view features, one pose per row. This is the distillation
// target: the pipeline output before any normalization. Refuses unfrozen
// aligners since a moving target makes the distilled weights meaningless.
inline Mat pipeline_feature_rows(const align::AlignerModel& model,
                                 const geo::Skeleton& skeleton, const Mat& pose_rows) {
  check(model.frozen, "tpa: aligner must be frozen before distillation");
  check(pose_rows.rows() > 0, "tpa: no poses");
  check(pose_rows.cols() == skeleton.njoints() * 6, "tpa: pose width mismatch");
  const auto views = static_cast<Eigen::Index>(model.config.azimuths.size());
  Mat out(pose_rows.rows(), model.config.dim);
  const Eigen::Index chunk = 512;
  for (Eigen::Index lo = 0; lo < pose_rows.rows(); lo += chunk) {
    const Eigen::Index n = std::min(chunk, pose_rows.rows() - lo);
    Mat stacked(n * views, model.config.view_input);
    for (Eigen::Index i = 0; i < n; ++i) {
      stacked.middleRows(i * views, views) =
          align::pose_view_inputs(model, pose_rows.row(lo + i), skeleton);
    }
    ad::Tape tape;
    nn::Binding bind(tape, model.params);
    nn::Ctx c{tape, bind, false, nullptr};
    const ad::Var encoded = model.view_mlp(c, tape.leaf(stacked));
    const ad::Var pooled =
        tape.bag_mean_rows(encoded, align::detail::view_groups(n, views));
    out.middleRows(lo, n) = tape.val(pooled);
  }
  return out;
}

inline Vec pipeline_pose_features(const align::AlignerModel& model,
                                  const geo::Skeleton& skeleton, const geo::Pose& pose) {
  return pipeline_feature_rows(model, skeleton, geo::flatten_pose(pose)).row(0).transpose();
}

// ---- distillation objective ----

// Element-level distance plus a direction term: ||a - b|| - cos(a, b).
// Minimum -1, attained exactly when the prediction matches the target.
inline double distill_loss(const Vec& predicted, const Vec& target) {
  check(predicted.size() == target.size() && predicted.size() > 0,
        "tpa: feature size mismatch");
  check(predicted.allFinite() && target.allFinite(), "tpa: non-finite feature");
  check(target.norm() > 0.0, "tpa: zero distillation target");
  check(predicted.norm() > 0.0, "tpa: zero predicted feature");
  const double dist = (predicted - target).norm();
  if (dist == 0.0) return -1.0;
  const double cos =
      std::clamp(align::cosine_similarity(predicted, target), -1.0, 1.0);
  return dist - cos;
}

// Batch form on the tape, averaged over rows.
inline ad::Var distill_loss_rows(ad::Tape& tape, ad::Var predicted, ad::Var target) {
  const ad::Var dist = tape.row_norms(tape.sub(predicted, target));
  const ad::Var cos = tape.rowwise_sum(
      tape.mul(tape.normalize_rows(predicted), tape.normalize_rows(target)));
  return tape.mean(tape.sub(dist, cos));
}

// ---- model ----

struct TPAConfig {
  Eigen::Index dim = 64;
  Eigen::Index hidden = 256;
  int blocks = 6;
  double dropout = 0.0;
  Eigen::Index batch = 1024;
  int epochs = 40;
  double lr = 2e-3;
  double holdout_frac = 0.1;
  double cosine_bar = 0.99;

  void validate() const {
    check_config(dim > 0 && hidden > 0 && blocks >= 0, "tpa: bad architecture");
    check_config(dropout >= 0.0 && dropout < 1.0, "tpa: bad dropout");
    check_config(batch > 0 && epochs > 0 && lr > 0.0, "tpa: bad training plan");
    check_config(holdout_frac > 0.0 && holdout_frac < 0.5, "tpa: bad holdout fraction");
    check_config(cosine_bar > 0.0 && cosine_bar <= 1.0, "tpa: bad cosine bar");
  }

  nlohmann::json to_json() const {
    return {{"dim", dim},       {"hidden", hidden},
            {"blocks", blocks}, {"dropout", dropout},
            {"batch", batch},   {"epochs", epochs},
            {"lr", lr},         {"holdout_frac", holdout_frac},
            {"cosine_bar", cosine_bar}};
  }

  static TPAConfig from_json(const nlohmann::json& j) {
    TPAConfig c;
    c.dim = j.at("dim").get<Eigen::Index>();
    c.hidden = j.at("hidden").get<Eigen::Index>();
    c.blocks = j.at("blocks").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.batch = j.at("batch").get<Eigen::Index>();
    c.epochs = j.at("epochs").get<int>();
    c.lr = j.at("lr").get<double>();
    c.holdout_frac = j.at("holdout_frac").get<double>();
    c.cosine_bar = j.at("cosine_bar").get<double>();
    c.validate();
    return c;
  }
};

struct TPAEncoder {
  TPAConfig config;
  Eigen::Index pose_dim = 0;
  std::uint64_t seed = 0;
  bool trained = false;
  nn::ParamStore params;
  nn::ResidualMLP mlp;
  std::vector<nn::TrainPoint> train_log;
  double heldout_cosine = 0.0;

  TPAEncoder(TPAConfig cfg, Eigen::Index dim, std::uint64_t sd)
      : config(std::move(cfg)), pose_dim(dim), seed(sd) {
    config.validate();
    check_config(pose_dim > 0, "tpa: bad pose dimension");
    Rng rng(seed, 0x7a70ull);
    mlp = nn::ResidualMLP(params, "enc", pose_dim, config.hidden, config.dim,
                          config.blocks, config.dropout, rng);
  }

  TPAEncoder(const TPAEncoder&) = delete;
  TPAEncoder& operator=(const TPAEncoder&) = delete;
  TPAEncoder(TPAEncoder&&) = default;
  TPAEncoder& operator=(TPAEncoder&&) = default;
};

// ---- inference ----

inline Mat encode_pose_rows(const TPAEncoder& enc, const Mat& pose_rows) {
  check(enc.trained, "tpa: encoder is untrained");
  check(pose_rows.rows() > 0 && pose_rows.cols() == enc.pose_dim,
        "tpa: pose row shape mismatch");
  ad::Tape tape;
  nn::Binding bind(tape, enc.params);
  nn::Ctx c{tape, bind, false, nullptr};
  return tape.val(enc.mlp(c, tape.leaf(pose_rows)));
}

inline Vec encode_pose_feature(const TPAEncoder& enc, const geo::Pose& pose) {
  return encode_pose_rows(enc, geo::flatten_pose(pose)).row(0).transpose();
}

// Text-pose score: cosine between a text feature and the distilled pose
// feature. Stands in for the slow pipeline score after training.
inline double tpa_score(const Vec& text_feat, const geo::Pose& pose,
                        const TPAEncoder& enc) {
  return align::cosine_similarity(text_feat, encode_pose_feature(enc, pose));
}

// ---- target cache ----

// Cache key covering everything the targets depend on: the pose rows, the
// frozen view-encoder weights, and the camera set.
inline std::string distill_digest(const Mat& pose_rows, const align::AlignerModel& model) {
  std::uint64_t h = fnv1a64("tpa_targets");
  auto mix_mat = [&h](const Mat& m) {
    const Eigen::Index dims[2] = {m.rows(), m.cols()};
    h = fnv1a64(dims, sizeof(dims), h);
    h = fnv1a64(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()), h);
  };
  mix_mat(pose_rows);
  for (const auto& p : model.params.all()) {
    h = fnv1a64(p->name, h);
    mix_mat(p->value);
  }
  for (double a : model.config.azimuths) h = fnv1a64(&a, sizeof(a), h);
  h = fnv1a64(&model.config.dim, sizeof(model.config.dim), h);
  return hex64(h);
}

inline void save_feature_cache(const std::filesystem::path& path,
                               const std::string& digest, const Mat& targets) {
  std::string out = "{\"kind\":\"tpa_feature_cache\",\"schema_version\":1,";
  out += "\"dataset_digest\":\"" + digest + "\",";
  out += "\"rows\":" + std::to_string(targets.rows()) + ",";
  out += "\"cols\":" + std::to_string(targets.cols()) + ",";
  out += "\"values\":";
  const Mat row_major = targets.transpose();
  domain::detail::append_double_array(
      out, row_major.data(), static_cast<std::size_t>(row_major.size()));
  out += "}";
  write_text_file(path, out);
}

// Returns the cached targets when the stored digest matches, nothing when the
// cache belongs to different data. Malformed files are reported, not ignored.
inline std::optional<Mat> load_feature_cache(const std::filesystem::path& path,
                                             const std::string& digest) {
  if (!std::filesystem::exists(path)) return std::nullopt;
  const std::string text = read_text_file(path);
  check_io(domain::detail::parse_string_field(text, "kind") == "tpa_feature_cache",
           "tpa: not a feature cache file: " + path.string());
  if (domain::detail::parse_string_field(text, "dataset_digest") != digest) {
    return std::nullopt;
  }
  const auto rows = static_cast<Eigen::Index>(domain::detail::parse_int_field(text, "rows"));
  const auto cols = static_cast<Eigen::Index>(domain::detail::parse_int_field(text, "cols"));
  check_io(rows > 0 && cols > 0, "tpa: bad cache shape in " + path.string());
  std::size_t pos = domain::detail::find_key(text, "values");
  Mat m(cols, rows);
  domain::detail::parse_double_array(text, pos, m.data(),
                                     static_cast<std::size_t>(m.size()));
  return Mat(m.transpose());
}

// ---- training ----

inline TPAEncoder train_tpa(const Mat& pose_rows, const geo::Skeleton& skeleton,
                            const align::AlignerModel& aligner, const TPAConfig& config,
                            std::uint64_t seed,
                            const std::optional<std::filesystem::path>& cache_path =
                                std::nullopt) {
  config.validate();
  check(aligner.frozen, "tpa: aligner must be frozen before distillation");
  check(config.dim == aligner.config.dim, "tpa: feature dimension mismatch");
  check(pose_rows.rows() >= 64, "tpa: need at least 64 training poses");

  Mat targets;
  const std::string digest = distill_digest(pose_rows, aligner);
  bool cached = false;
  if (cache_path) {
    if (auto hit = load_feature_cache(*cache_path, digest)) {
      targets = std::move(*hit);
      cached = true;
    }
  }
  if (!cached) {
    targets = pipeline_feature_rows(aligner, skeleton, pose_rows);
    if (cache_path) save_feature_cache(*cache_path, digest, targets);
  }
  check(targets.rows() == pose_rows.rows() && targets.cols() == config.dim,
        "tpa: target shape mismatch");

  TPAEncoder enc(config, pose_rows.cols(), seed);
  Rng rng(seed, 0x7a21ull);

  std::vector<Eigen::Index> order(static_cast<std::size_t>(pose_rows.rows()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Eigen::Index>(i);
  rng.shuffle(order);
  const auto holdout_n = std::max<std::size_t>(
      1, static_cast<std::size_t>(static_cast<double>(order.size()) * config.holdout_frac));
  const std::vector<Eigen::Index> holdout(order.end() - static_cast<std::ptrdiff_t>(holdout_n),
                                          order.end());
  order.resize(order.size() - holdout_n);

  nn::Adam adam;
  const auto steps_per_epoch =
      static_cast<int>((order.size() + static_cast<std::size_t>(config.batch) - 1) /
                       static_cast<std::size_t>(config.batch));
  const int total_steps = steps_per_epoch * config.epochs;
  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (int s = 0; s < steps_per_epoch; ++s, ++step) {
      const auto begin = static_cast<std::size_t>(s) * static_cast<std::size_t>(config.batch);
      const auto count = std::min(static_cast<std::size_t>(config.batch),
                                  order.size() - begin);
      Mat x(static_cast<Eigen::Index>(count), pose_rows.cols());
      Mat t(static_cast<Eigen::Index>(count), config.dim);
      for (std::size_t i = 0; i < count; ++i) {
        x.row(static_cast<Eigen::Index>(i)) = pose_rows.row(order[begin + i]);
        t.row(static_cast<Eigen::Index>(i)) = targets.row(order[begin + i]);
      }

      ad::Tape tape;
      nn::Binding bind(tape, enc.params);
      nn::Ctx c{tape, bind, true, &rng};
      const ad::Var loss =
          distill_loss_rows(tape, enc.mlp(c, tape.leaf(x)), tape.leaf(t));
      const double lv = tape.val(loss)(0, 0);
      if (!std::isfinite(lv)) {
        throw TrainingError("tpa: loss diverged at step " + std::to_string(step));
      }
      tape.backward(loss);
      adam.step(enc.params, bind, tape, nn::cosine_lr(config.lr, step, total_steps));
      nn::ensure_finite(enc.params, "tpa step " + std::to_string(step));
      epoch_loss += lv * static_cast<double>(count);
    }
    epoch_loss /= static_cast<double>(order.size());
    enc.train_log.push_back({epoch, epoch_loss, nn::cosine_lr(config.lr, step, total_steps)});
  }
  enc.trained = true;

  Mat hx(static_cast<Eigen::Index>(holdout.size()), pose_rows.cols());
  Mat ht(static_cast<Eigen::Index>(holdout.size()), config.dim);
  for (std::size_t i = 0; i < holdout.size(); ++i) {
    hx.row(static_cast<Eigen::Index>(i)) = pose_rows.row(holdout[i]);
    ht.row(static_cast<Eigen::Index>(i)) = targets.row(holdout[i]);
  }
  const Mat pred = encode_pose_rows(enc, hx);
  double cos_sum = 0.0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    cos_sum += align::cosine_similarity(pred.row(i).transpose(), ht.row(i).transpose());
  }
  enc.heldout_cosine = cos_sum / static_cast<double>(pred.rows());
  if (enc.heldout_cosine < config.cosine_bar) {
    throw TrainingError("tpa: held-out cosine " + std::to_string(enc.heldout_cosine) +
                        " misses the bar " + std::to_string(config.cosine_bar));
  }
  return enc;
}

// ---- persistence ----

inline void save_tpa(const std::filesystem::path& path, const TPAEncoder& enc) {
  nlohmann::json meta = {{"kind", "tpa"},
                         {"schema_version", 1},
                         {"config", enc.config.to_json()},
                         {"pose_dim", enc.pose_dim},
                         {"seed", enc.seed},
                         {"trained", enc.trained},
                         {"heldout_cosine", enc.heldout_cosine},
                         {"train_log", nn::train_log_to_json(enc.train_log)}};
  ckpt::save(path, enc.params, meta);
}

inline TPAEncoder load_tpa(const std::filesystem::path& path) {
  const nlohmann::json meta = ckpt::peek_meta(path);
  check_io(meta.value("kind", "") == "tpa",
           "tpa: not a tpa checkpoint: " + path.string());
  check_io(meta.value("schema_version", 0) == 1,
           "tpa: unsupported schema in " + path.string());
  TPAEncoder enc(TPAConfig::from_json(meta.at("config")),
                 meta.at("pose_dim").get<Eigen::Index>(),
                 meta.at("seed").get<std::uint64_t>());
  ckpt::load(path, enc.params);
  enc.trained = meta.at("trained").get<bool>();
  enc.heldout_cosine = meta.at("heldout_cosine").get<double>();
  enc.train_log = nn::train_log_from_json(meta.at("train_log"));
  return enc;
}

}  // namespace mogen::tpa

#endif  // MOGEN_TPA_HPP
