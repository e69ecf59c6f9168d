// Copyright 2026 The Mogen Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef MOGEN_TEXT_TO_POSE_HPP
#define MOGEN_TEXT_TO_POSE_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mogen/aligner.hpp"
#include "mogen/checkpoint.hpp"
#include "mogen/common.hpp"
#include "mogen/domain.hpp"
#include "mogen/nn.hpp"
#include "mogen/pose_prior.hpp"
#include "mogen/tpa.hpp"

// Text-to-pose generation trained without captions. The generator maps a text
// feature to a latent pose; during wordless training the "text" features are
// random unit vectors and the distilled pose scorer provides the supervision.
namespace mogen::t2p {

// ---- wordless feature sampling ----

struct RandomFeatureSpec {
  Eigen::Index dim = 64;
  bool bias = true;
};

// Each sample: elementwise noise drawn from a standard normal or a uniform
// [-1,1] (a fair coin picks the family per sample), plus an optional uniform
// [-1,1] bias vector that keeps the features away from zero, then unit-norm.
inline Mat sample_wordless_features(const RandomFeatureSpec& spec, Eigen::Index n,
                                    Rng& rng) {
  check(spec.dim > 0, "t2p: bad feature dimension");
  check(n >= 1, "t2p: need at least one sample");
  Mat out(n, spec.dim);
  Eigen::RowVectorXd row(spec.dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    double norm = 0.0;
    do {
      const bool gaussian = rng.uniform() < 0.5;
      for (Eigen::Index j = 0; j < spec.dim; ++j) {
        row(j) = gaussian ? rng.normal() : rng.uniform(-1.0, 1.0);
      }
      if (spec.bias) {
        for (Eigen::Index j = 0; j < spec.dim; ++j) row(j) += rng.uniform(-1.0, 1.0);
      }
      norm = row.norm();
    } while (norm == 0.0);
    out.row(i) = row / norm;
  }
  return out;
}

inline Mat sample_wordless_features(const RandomFeatureSpec& spec, Eigen::Index n,
                                    std::uint64_t seed) {
  Rng rng(seed, 0x57f5ull);
  return sample_wordless_features(spec, n, rng);
}

// ---- caption feature sources ----

// Where text-supervised training gets its features. Wordless modes never
// receive one, so they cannot touch caption bytes by construction.
struct CaptionFeatureSource {
  virtual ~CaptionFeatureSource() = default;
  virtual Mat sample(Eigen::Index n, Rng& rng) const = 0;
};

// Uniform draws from a fixed feature matrix.
struct FixedFeatureSource final : CaptionFeatureSource {
  Mat features;

  explicit FixedFeatureSource(Mat f) : features(std::move(f)) {
    check(features.rows() > 0, "t2p: empty feature source");
  }

  Mat sample(Eigen::Index n, Rng& rng) const override {
    check(n >= 1, "t2p: need at least one sample");
    Mat out(n, features.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      out.row(i) = features.row(static_cast<Eigen::Index>(
          rng.index(static_cast<std::size_t>(features.rows()))));
    }
    return out;
  }
};

// Encodes every training caption of a dataset through the frozen aligner.
inline FixedFeatureSource caption_feature_source(const domain::Dataset& ds,
                                                 const align::AlignerModel& aligner) {
  check(aligner.frozen, "t2p: aligner must be frozen");
  check(!ds.pairs.empty(), "t2p: dataset has no caption pairs");
  std::vector<std::vector<std::string>> tokens;
  tokens.reserve(ds.pairs.size());
  for (const auto& p : ds.pairs) tokens.push_back(p.caption.tokens);
  return FixedFeatureSource(align::encode_texts(aligner, tokens));
}

// ---- losses ----

// Contrastive text-pose objective plus latent regularization: the pose
// decoded from the i-th feature is that feature's positive, every other batch
// member is a negative, and the latent norm is pulled toward zero.
inline ad::Var t2p_loss(const nn::Ctx& tpa_ctx, const tpa::TPAEncoder& enc,
                        ad::Var latents, ad::Var poses, ad::Var text_feats,
                        double temperature, double lambda_l2) {
  auto& tape = tpa_ctx.tape;
  check(tape.val(latents).rows() == tape.val(poses).rows() &&
            tape.val(poses).rows() == tape.val(text_feats).rows(),
        "t2p: batch size mismatch");
  const ad::Var pose_feats = enc.mlp(tpa_ctx, poses);
  const ad::Var contrast =
      align::contrastive_loss(tape, pose_feats, text_feats, temperature);
  if (lambda_l2 == 0.0) return contrast;
  const ad::Var reg = tape.scale(tape.mean(tape.row_norms(latents)), lambda_l2);
  return tape.add(contrast, reg);
}

// Direct score maximization: negative mean cosine between each pose feature
// and its own text feature. No negatives, no regularizer.
inline ad::Var score_loss(const nn::Ctx& tpa_ctx, const tpa::TPAEncoder& enc,
                          ad::Var poses, ad::Var text_feats) {
  auto& tape = tpa_ctx.tape;
  check(tape.val(poses).rows() == tape.val(text_feats).rows(),
        "t2p: batch size mismatch");
  const ad::Var pose_feats = enc.mlp(tpa_ctx, poses);
  const ad::Var cos = tape.rowwise_sum(
      tape.mul(tape.normalize_rows(pose_feats), tape.normalize_rows(text_feats)));
  return tape.scale(tape.mean(cos), -1.0);
}

// ---- generator ----

enum class TrainMode { random_t2p, random_tpa, text_tpa, text_score };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::random_t2p: return "random_t2p";
    case TrainMode::random_tpa: return "random_tpa";
    case TrainMode::text_tpa: return "text_tpa";
    case TrainMode::text_score: return "text_score";
  }
  throw ValidationError("t2p: bad mode");
}

inline TrainMode mode_from_string(const std::string& s) {
  if (s == "random_t2p") return TrainMode::random_t2p;
  if (s == "random_tpa") return TrainMode::random_tpa;
  if (s == "text_tpa") return TrainMode::text_tpa;
  if (s == "text_score") return TrainMode::text_score;
  throw ValidationError("t2p: unknown mode '" + s + "'");
}

inline bool is_wordless(TrainMode m) {
  return m == TrainMode::random_t2p || m == TrainMode::random_tpa;
}

struct T2PConfig {
  Eigen::Index dim = 64;
  Eigen::Index latent = 32;
  Eigen::Index hidden = 256;
  int blocks = 2;
  double dropout = 0.0;
  Eigen::Index batch = 256;
  int steps = 600;
  double lr = 1e-3;
  double lambda_l2 = 0.1;
  double temperature = 0.07;
  bool bias = true;
  int log_every = 20;

  void validate() const {
    check_config(dim > 0 && latent > 0 && hidden > 0 && blocks >= 0,
                 "t2p: bad architecture");
    check_config(dropout >= 0.0 && dropout < 1.0, "t2p: bad dropout");
    check_config(batch > 0 && steps > 0 && lr > 0.0, "t2p: bad training plan");
    check_config(lambda_l2 >= 0.0, "t2p: bad latent weight");
    check_config(temperature > 0.0, "t2p: bad temperature");
    check_config(log_every > 0, "t2p: bad log interval");
  }

  nlohmann::json to_json() const {
    return {{"dim", dim},
            {"latent", latent},
            {"hidden", hidden},
            {"blocks", blocks},
            {"dropout", dropout},
            {"batch", batch},
            {"steps", steps},
            {"lr", lr},
            {"lambda_l2", lambda_l2},
            {"temperature", temperature},
            {"bias", bias},
            {"log_every", log_every}};
  }

  static T2PConfig from_json(const nlohmann::json& j) {
    T2PConfig c;
    c.dim = j.at("dim").get<Eigen::Index>();
    c.latent = j.at("latent").get<Eigen::Index>();
    c.hidden = j.at("hidden").get<Eigen::Index>();
    c.blocks = j.at("blocks").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.batch = j.at("batch").get<Eigen::Index>();
    c.steps = j.at("steps").get<int>();
    c.lr = j.at("lr").get<double>();
    c.lambda_l2 = j.at("lambda_l2").get<double>();
    c.temperature = j.at("temperature").get<double>();
    c.bias = j.at("bias").get<bool>();
    c.log_every = j.at("log_every").get<int>();
    c.validate();
    return c;
  }
};

struct PoseGenerator {
  T2PConfig config;
  TrainMode mode = TrainMode::random_t2p;
  std::uint64_t seed = 0;
  bool trained = false;
  nn::ParamStore params;
  nn::ResidualMLP mlp;
  std::vector<nn::TrainPoint> train_log;

  PoseGenerator(T2PConfig cfg, std::uint64_t sd) : config(std::move(cfg)), seed(sd) {
    config.validate();
    Rng rng(seed, 0x7270ull);
    mlp = nn::ResidualMLP(params, "gen", config.dim, config.hidden, config.latent,
                          config.blocks, config.dropout, rng);
  }

  PoseGenerator(const PoseGenerator&) = delete;
  PoseGenerator& operator=(const PoseGenerator&) = delete;
  PoseGenerator(PoseGenerator&&) = default;
  PoseGenerator& operator=(PoseGenerator&&) = default;
};

// ---- training ----

inline PoseGenerator train_generator(TrainMode mode, const CaptionFeatureSource* captions,
                                     const tpa::TPAEncoder& enc, const prior::PriorVAE& vae,
                                     const T2PConfig& config, std::uint64_t seed) {
  config.validate();
  check(enc.trained, "t2p: pose encoder is untrained");
  check(vae.trained, "t2p: pose prior is untrained");
  check(config.dim == enc.config.dim, "t2p: feature dimension mismatch");
  check(config.latent == vae.config.latent, "t2p: latent dimension mismatch");
  check(vae.pose_dim == enc.pose_dim, "t2p: pose dimension mismatch");
  if (is_wordless(mode)) {
    check(captions == nullptr, "t2p: wordless training does not accept a caption source");
  } else {
    check(captions != nullptr, "t2p: text-supervised training needs a caption source");
  }

  PoseGenerator gen(config, seed);
  gen.mode = mode;
  Rng rng(seed, 0x7261ull);
  const RandomFeatureSpec spec{config.dim, config.bias};
  nn::Adam adam;

  for (int step = 0; step < config.steps; ++step) {
    const Mat feats = is_wordless(mode) ? sample_wordless_features(spec, config.batch, rng)
                                        : captions->sample(config.batch, rng);
    check(feats.cols() == config.dim, "t2p: caption feature width mismatch");

    ad::Tape tape;
    nn::Binding gen_bind(tape, gen.params);
    nn::Binding tpa_bind(tape, enc.params);
    nn::Binding prior_bind(tape, vae.params);
    nn::Ctx gen_ctx{tape, gen_bind, true, &rng};
    nn::Ctx tpa_ctx{tape, tpa_bind, false, nullptr};
    nn::Ctx prior_ctx{tape, prior_bind, false, nullptr};

    const ad::Var f = tape.leaf(feats);
    const ad::Var z = gen.mlp(gen_ctx, f);
    const ad::Var poses = vae.decoder(prior_ctx, z);

    ad::Var loss;
    switch (mode) {
      case TrainMode::random_t2p:
        loss = t2p_loss(tpa_ctx, enc, z, poses, f, config.temperature, config.lambda_l2);
        break;
      case TrainMode::random_tpa:
      case TrainMode::text_tpa:
        loss = t2p_loss(tpa_ctx, enc, z, poses, f, config.temperature, 0.0);
        break;
      case TrainMode::text_score:
        loss = score_loss(tpa_ctx, enc, poses, f);
        break;
    }
    const double lv = tape.val(loss)(0, 0);
    if (!std::isfinite(lv)) {
      throw TrainingError("t2p: loss diverged at step " + std::to_string(step));
    }
    tape.backward(loss);
    adam.step(gen.params, gen_bind, tape, nn::cosine_lr(config.lr, step, config.steps));
    nn::ensure_finite(gen.params, "t2p step " + std::to_string(step));
    if (step % config.log_every == 0 || step + 1 == config.steps) {
      gen.train_log.push_back({step, lv, nn::cosine_lr(config.lr, step, config.steps)});
    }
  }
  gen.trained = true;
  return gen;
}

// ---- inference ----

inline Mat generate_latents(const PoseGenerator& gen, const Mat& text_feats) {
  check(gen.trained, "t2p: generator is untrained");
  check(text_feats.rows() > 0 && text_feats.cols() == gen.config.dim,
        "t2p: feature shape mismatch");
  ad::Tape tape;
  nn::Binding bind(tape, gen.params);
  nn::Ctx c{tape, bind, false, nullptr};
  return tape.val(gen.mlp(c, tape.leaf(text_feats)));
}

struct GeneratedPose {
  geo::Pose pose;
  Vec latent;
};

// Full text-to-pose path: frozen text encoder, generator, prior decoder.
inline GeneratedPose generate_pose(const PoseGenerator& gen, const prior::PriorVAE& vae,
                                   const align::AlignerModel& aligner,
                                   const domain::Caption& caption) {
  check(aligner.frozen, "t2p: aligner must be frozen");
  check(vae.trained, "t2p: pose prior is untrained");
  const Vec text = align::encode_text(aligner, caption);
  const Vec z = generate_latents(gen, text.transpose()).row(0).transpose();
  return {prior::decode_latent(vae, z), z};
}

inline GeneratedPose generate_pose(const PoseGenerator& gen, const prior::PriorVAE& vae,
                                   const align::AlignerModel& aligner,
                                   const std::string& text) {
  domain::Caption caption;
  caption.tokens = domain::tokenize(text);
  return generate_pose(gen, vae, aligner, caption);
}

// ---- persistence ----

inline void save_generator(const std::filesystem::path& path, const PoseGenerator& gen) {
  nlohmann::json meta = {{"kind", "t2p"},
                         {"schema_version", 1},
                         {"config", gen.config.to_json()},
                         {"mode", to_string(gen.mode)},
                         {"seed", gen.seed},
                         {"trained", gen.trained},
                         {"train_log", nn::train_log_to_json(gen.train_log)}};
  ckpt::save(path, gen.params, meta);
}

inline PoseGenerator load_generator(const std::filesystem::path& path) {
  const nlohmann::json meta = ckpt::peek_meta(path);
  check_io(meta.value("kind", "") == "t2p",
           "t2p: not a generator checkpoint: " + path.string());
  check_io(meta.value("schema_version", 0) == 1,
           "t2p: unsupported schema in " + path.string());
  PoseGenerator gen(T2PConfig::from_json(meta.at("config")),
                    meta.at("seed").get<std::uint64_t>());
  ckpt::load(path, gen.params);
  gen.mode = mode_from_string(meta.at("mode").get<std::string>());
  gen.trained = meta.at("trained").get<bool>();
  gen.train_log = nn::train_log_from_json(meta.at("train_log"));
  return gen;
}

}  // namespace mogen::t2p

#endif  // MOGEN_TEXT_TO_POSE_HPP
