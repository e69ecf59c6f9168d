// Copyright 2026 The Mogen Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mogen/ad.hpp"
#include "mogen/checkpoint.hpp"
#include "mogen/common.hpp"
#include "mogen/domain.hpp"
#include "mogen/geometry.hpp"
#include "mogen/nn.hpp"
#include "mogen/rng.hpp"

namespace mogen::prior {

inline constexpr Eigen::Index kLatentDim = 32;

// KL(N(mu, exp(logvar)) || N(0, I)), summed over dimensions.
inline double kl_divergence(const Vec& mu, const Vec& logvar) {
  check(mu.size() == logvar.size(), "kl: dimension mismatch");
  double kl = 0.0;
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    kl += 0.5 * (mu(i) * mu(i) + std::exp(logvar(i)) - 1.0 - logvar(i));
  }
  return kl;
}

struct PriorConfig {
  Eigen::Index latent = kLatentDim;
  Eigen::Index hidden = 128;
  int blocks = 1;
  double kl_weight = 1e-3;
  Eigen::Index batch = 256;
  int epochs = 32;
  double lr = 2e-3;
  double holdout_frac = 0.1;
  double recon_bar = 0.05;  // held-out mean joint-position error / height

  void validate() const {
    check_config(latent > 0 && hidden > 0 && blocks >= 0, "prior: bad dimensions");
    check_config(kl_weight >= 0.0, "prior: negative KL weight");
    check_config(batch >= 2 && epochs >= 1 && lr > 0.0, "prior: bad training setup");
    check_config(holdout_frac > 0.0 && holdout_frac < 0.5, "prior: bad holdout fraction");
    check_config(recon_bar > 0.0, "prior: reconstruction bar must be positive");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"latent", latent},       {"hidden", hidden},
                          {"blocks", blocks},       {"kl_weight", kl_weight},
                          {"batch", batch},         {"epochs", epochs},
                          {"lr", lr},               {"holdout_frac", holdout_frac},
                          {"recon_bar", recon_bar}};
  }

  static PriorConfig from_json(const nlohmann::json& j) {
    PriorConfig c;
    c.latent = j.at("latent").get<Eigen::Index>();
    c.hidden = j.at("hidden").get<Eigen::Index>();
    c.blocks = j.at("blocks").get<int>();
    c.kl_weight = j.at("kl_weight").get<double>();
    c.batch = j.at("batch").get<Eigen::Index>();
    c.epochs = j.at("epochs").get<int>();
    c.lr = j.at("lr").get<double>();
    c.holdout_frac = j.at("holdout_frac").get<double>();
    c.recon_bar = j.at("recon_bar").get<double>();
    return c;
  }

  std::string digest() const { return hex64(fnv1a64(to_json().dump())); }
};

struct PriorVAE {
  PriorConfig config;
  Eigen::Index pose_dim = 96;
  std::uint64_t seed = 0;
  bool trained = false;
  nn::ParamStore params;
  nn::ResidualMLP enc_trunk;
  nn::Linear mu_head;
  nn::Linear logvar_head;
  nn::ResidualMLP decoder;
  std::vector<nn::TrainPoint> train_log;
  double heldout_error = 0.0;  // mean joint-position error / height, post-training

  PriorVAE(PriorConfig cfg, Eigen::Index dim, std::uint64_t sd)
      : config(std::move(cfg)), pose_dim(dim), seed(sd) {
    config.validate();
    check_config(pose_dim > 0 && pose_dim % 6 == 0, "prior: pose dim must be a 6D multiple");
    Rng rng(seed, 0x9105ull);
    enc_trunk = nn::ResidualMLP(params, "enc.trunk", pose_dim, config.hidden,
                                config.hidden, config.blocks, 0.0, rng);
    mu_head = nn::Linear(params, "enc.mu", config.hidden, config.latent, rng);
    logvar_head = nn::Linear(params, "enc.logvar", config.hidden, config.latent, rng);
    decoder = nn::ResidualMLP(params, "dec", config.latent, config.hidden, pose_dim,
                              config.blocks, 0.0, rng);
  }

  PriorVAE(const PriorVAE&) = delete;
  PriorVAE& operator=(const PriorVAE&) = delete;
  PriorVAE(PriorVAE&&) = default;
  PriorVAE& operator=(PriorVAE&&) = default;
};

namespace detail {

struct EncodedBatch {
  ad::Var mu;
  ad::Var logvar;
};

inline EncodedBatch encode_batch(const PriorVAE& vae, const nn::Ctx& c, ad::Var x) {
  const ad::Var h = vae.enc_trunk(c, x);
  return {vae.mu_head(c, h), vae.logvar_head(c, h)};
}

}  // namespace detail

// Training objective on one batch: squared reconstruction error plus weighted
// KL to the standard normal, both averaged over the batch. eps carries the
// fixed reparameterization noise for the step.
inline ad::Var prior_loss(const PriorVAE& vae, const nn::Ctx& c, ad::Var x,
                          const Mat& eps, double kl_weight) {
  auto& tape = c.tape;
  const auto enc = detail::encode_batch(vae, c, x);
  const ad::Var sigma = tape.expv(tape.scale(enc.logvar, 0.5));
  const ad::Var z = tape.add(enc.mu, tape.mul(sigma, tape.leaf(eps)));
  const ad::Var xhat = vae.decoder(c, z);
  const ad::Var recon = tape.mean(tape.rowwise_sum(tape.square(tape.sub(xhat, x))));
  const ad::Var kl_terms = tape.sub(
      tape.add(tape.square(enc.mu), tape.expv(enc.logvar)),
      tape.add_scalar(enc.logvar, 1.0));
  const ad::Var kl = tape.scale(tape.mean(tape.rowwise_sum(kl_terms)), 0.5);
  return tape.add(recon, tape.scale(kl, kl_weight));
}

// ---- inference ----

inline Mat encode_means(const PriorVAE& vae, const Mat& pose_rows) {
  check(vae.trained, "prior: model is untrained");
  check(pose_rows.cols() == vae.pose_dim, "prior: pose width mismatch");
  ad::Tape tape;
  nn::Binding bind(tape, vae.params);
  nn::Ctx c{tape, bind, false, nullptr};
  return tape.val(detail::encode_batch(vae, c, tape.leaf(pose_rows)).mu);
}

inline std::pair<Vec, Vec> encode_pose(const PriorVAE& vae, const geo::Pose& p) {
  check(vae.trained, "prior: model is untrained");
  const Eigen::RowVectorXd row = geo::flatten_pose(p);
  check(row.size() == vae.pose_dim, "prior: pose width mismatch");
  ad::Tape tape;
  nn::Binding bind(tape, vae.params);
  nn::Ctx c{tape, bind, false, nullptr};
  const auto enc = detail::encode_batch(vae, c, tape.leaf(row));
  return {tape.val(enc.mu).row(0).transpose(), tape.val(enc.logvar).row(0).transpose()};
}

// Raw decoded rows; callers needing Pose objects go through decode_latent.
inline Mat decode_latents(const PriorVAE& vae, const Mat& z_rows) {
  check(vae.trained, "prior: model is untrained");
  check(z_rows.cols() == vae.config.latent, "prior: latent width mismatch");
  ad::Tape tape;
  nn::Binding bind(tape, vae.params);
  nn::Ctx c{tape, bind, false, nullptr};
  return tape.val(vae.decoder(c, tape.leaf(z_rows)));
}

inline geo::Pose decode_latent(const PriorVAE& vae, const Vec& z) {
  const Mat row = decode_latents(vae, z.transpose());
  geo::Pose p;
  p.rot6d.resize(vae.pose_dim / 6, 6);
  for (Eigen::Index j = 0; j < p.rot6d.rows(); ++j) {
    p.rot6d.row(j) = row.block(0, j * 6, 1, 6);
    geo::rot6d_to_matrix(p.rot6d.row(j).transpose());  // must orthonormalize
  }
  return p;
}

inline geo::Pose neutral_pose(const PriorVAE& vae) {
  return decode_latent(vae, Vec::Zero(vae.config.latent));
}

// Mean joint-rotation reconstruction error through encode-mean/decode.
inline double pose_in_distrib_error(const PriorVAE& vae, const Eigen::RowVectorXd& pose_row) {
  check(vae.trained, "prior: model is untrained");
  const Mat mu = encode_means(vae, pose_row);
  const Mat rec = decode_latents(vae, mu);
  const Eigen::Index joints = vae.pose_dim / 6;
  double err = 0.0;
  for (Eigen::Index j = 0; j < joints; ++j) {
    err += (rec.block(0, j * 6, 1, 6) - pose_row.segment(j * 6, 6)).norm();
  }
  return err / static_cast<double>(joints);
}

inline double pose_in_distrib_error(const PriorVAE& vae, const geo::Pose& p) {
  return pose_in_distrib_error(vae, Eigen::RowVectorXd(geo::flatten_pose(p)));
}

// Mean joint-position displacement between two flattened poses, as a fraction
// of skeleton height.
inline double position_error_fraction(const geo::Skeleton& skeleton,
                                      const Eigen::RowVectorXd& a,
                                      const Eigen::RowVectorXd& b) {
  const Eigen::Index J = skeleton.njoints();
  const auto pa = geo::forward_kinematics(geo::pose_from_row(a, 0, J), skeleton);
  const auto pb = geo::forward_kinematics(geo::pose_from_row(b, 0, J), skeleton);
  double err = 0.0;
  for (std::size_t j = 0; j < pa.size(); ++j) err += (pa[j] - pb[j]).norm();
  return err / static_cast<double>(pa.size()) / skeleton.rest_height();
}

// ---- training ----

// Attribute-conditioned pose rows sampled uniformly over all tuples; the
// standard source for prior training sets.
inline Mat sample_pose_rows(const geo::Skeleton& skeleton, Eigen::Index n,
                            double noise_scale, std::uint64_t seed) {
  check(n > 0, "sample_pose_rows: need a positive count");
  const auto tuples = domain::all_attribute_tuples();
  Rng rng(seed, 0x9053ull);
  Mat rows(n, skeleton.njoints() * 6);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& tup = tuples[rng.index(tuples.size())];
    rows.row(i) = geo::flatten_pose(
        domain::attributes_to_pose(tup, noise_scale, rng.bits(), skeleton));
  }
  return rows;
}

inline PriorVAE train_prior(const Mat& pose_rows, const geo::Skeleton& skeleton,
                            const PriorConfig& config, std::uint64_t seed) {
  config.validate();
  check(pose_rows.rows() >= 4096, "prior: need at least 4096 training poses");
  check(pose_rows.cols() == skeleton.njoints() * 6, "prior: pose width mismatch");

  PriorVAE vae(config, pose_rows.cols(), seed);
  Rng rng(seed, 0x91a1ull);

  // Deterministic holdout split from the tail of a seeded permutation.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(pose_rows.rows()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Eigen::Index>(i);
  rng.shuffle(order);
  const auto holdout_n = static_cast<std::size_t>(
      static_cast<double>(order.size()) * config.holdout_frac);
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
      for (std::size_t i = 0; i < count; ++i) {
        x.row(static_cast<Eigen::Index>(i)) = pose_rows.row(order[begin + i]);
      }
      const Mat eps = rng.normal_matrix(x.rows(), config.latent, 1.0);

      ad::Tape tape;
      nn::Binding bind(tape, vae.params);
      nn::Ctx c{tape, bind, true, &rng};
      const ad::Var loss = prior_loss(vae, c, tape.leaf(x), eps, config.kl_weight);
      const double lv = tape.val(loss)(0, 0);
      if (!std::isfinite(lv)) {
        throw TrainingError("prior: loss diverged at step " + std::to_string(step));
      }
      tape.backward(loss);
      adam.step(vae.params, bind, tape, nn::cosine_lr(config.lr, step, total_steps));
      nn::ensure_finite(vae.params, "prior step " + std::to_string(step));
      epoch_loss += lv * static_cast<double>(count);
    }
    epoch_loss /= static_cast<double>(order.size());
    vae.train_log.push_back({epoch, epoch_loss, nn::cosine_lr(config.lr, step, total_steps)});
  }
  vae.trained = true;

  // Post-training bar on held-out reconstruction.
  double held_err = 0.0;
  {
    Mat hx(static_cast<Eigen::Index>(holdout.size()), pose_rows.cols());
    for (std::size_t i = 0; i < holdout.size(); ++i) {
      hx.row(static_cast<Eigen::Index>(i)) = pose_rows.row(holdout[i]);
    }
    const Mat rec = decode_latents(vae, encode_means(vae, hx));
    for (Eigen::Index i = 0; i < hx.rows(); ++i) {
      held_err += position_error_fraction(skeleton, hx.row(i), rec.row(i));
    }
    held_err /= static_cast<double>(hx.rows());
  }
  vae.heldout_error = held_err;
  if (held_err > config.recon_bar) {
    throw TrainingError("prior: held-out reconstruction error " + std::to_string(held_err) +
                        " exceeds the configured bar " + std::to_string(config.recon_bar));
  }
  return vae;
}

// ---- persistence ----

inline void save_prior(const std::filesystem::path& path, const PriorVAE& vae) {
  nlohmann::json meta{{"kind", "pose_prior"},
                      {"schema_version", 1},
                      {"seed", vae.seed},
                      {"pose_dim", vae.pose_dim},
                      {"trained", vae.trained},
                      {"heldout_error", vae.heldout_error},
                      {"config", vae.config.to_json()}};
  meta["train_log"] = nn::train_log_to_json(vae.train_log);
  ckpt::save(path, vae.params, meta);
}

inline PriorVAE load_prior(const std::filesystem::path& path) {
  const nlohmann::json meta = ckpt::peek_meta(path);
  check_io(meta.value("kind", std::string()) == "pose_prior",
           "checkpoint is not a pose prior");
  check_io(meta.value("schema_version", 0) == 1, "prior: unsupported checkpoint schema");
  PriorVAE vae(PriorConfig::from_json(meta.at("config")),
               meta.at("pose_dim").get<Eigen::Index>(),
               meta.at("seed").get<std::uint64_t>());
  ckpt::load(path, vae.params);
  vae.trained = meta.value("trained", false);
  vae.heldout_error = meta.value("heldout_error", 0.0);
  vae.train_log = nn::train_log_from_json(meta.value("train_log", nlohmann::json::array()));
  return vae;
}

// ---- golden fixture ----

// The pinned recipe behind the neutral-pose regression fixture.
inline constexpr std::uint64_t kGoldenPosesSeed = 61866;
inline constexpr std::uint64_t kGoldenTrainSeed = 20260;

inline PriorConfig golden_prior_config() { return PriorConfig{}; }

inline PriorVAE train_golden_prior(const geo::Skeleton& skeleton) {
  const Mat poses = sample_pose_rows(skeleton, 4096, 1.0, kGoldenPosesSeed);
  return train_prior(poses, skeleton, golden_prior_config(), kGoldenTrainSeed);
}

inline void save_neutral_fixture(const std::filesystem::path& path, const PriorVAE& vae) {
  const geo::Pose neutral = neutral_pose(vae);
  const Eigen::RowVectorXd row = geo::flatten_pose(neutral);
  std::string body = "{\"schema_version\":1,\"recipe\":{\"poses_seed\":" +
                     std::to_string(kGoldenPosesSeed) + ",\"train_seed\":" +
                     std::to_string(kGoldenTrainSeed) + ",\"config_digest\":\"" +
                     vae.config.digest() + "\"},\"rot6d\":";
  domain::detail::append_double_array(body, row.data(), static_cast<std::size_t>(row.size()));
  body += "}\n";
  write_text_file(path, body);
}

inline Eigen::RowVectorXd load_neutral_fixture(const std::filesystem::path& path,
                                               Eigen::Index pose_dim) {
  const std::string text = read_text_file(path);
  const nlohmann::json doc = nlohmann::json::parse(text, nullptr, false);
  check_io(!doc.is_discarded(), "neutral fixture: malformed JSON");
  check_io(doc.value("schema_version", 0) == 1, "neutral fixture: unsupported schema");
  Eigen::RowVectorXd row(pose_dim);
  std::size_t pos = domain::detail::find_key(text, "rot6d");
  domain::detail::parse_double_array(text, pos, row.data(),
                                     static_cast<std::size_t>(pose_dim));
  return row;
}

}  // namespace mogen::prior
