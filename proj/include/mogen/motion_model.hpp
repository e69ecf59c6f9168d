// Copyright 2026 The Mogen Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef MOGEN_MOTION_MODEL_HPP
#define MOGEN_MOTION_MODEL_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mogen/checkpoint.hpp"
#include "mogen/common.hpp"
#include "mogen/domain.hpp"
#include "mogen/geometry.hpp"
#include "mogen/nn.hpp"
#include "mogen/pose_prior.hpp"

// Masked motion completion. A sequence VAE over fixed-length clips: the
// encoder reads the full motion through two query tokens and emits a latent
// distribution; the generator reads the motion with a random subset of frames
// replaced by a learnable mask embedding, plus one latent token, and
// reconstructs every frame. At inference the prompt keeps a handful of
// condition poses and the rest is filled in.
namespace mogen::motion {

// ---- masking ----

struct MaskedMotion {
  Mat frames;
  std::vector<int> keep;
};

// Exactly c_t * p_t + (1 - c_t) * e_mask per frame.
inline MaskedMotion mask_motion(const Mat& frames, const std::vector<int>& keep,
                                const Eigen::RowVectorXd& e_mask) {
  check(static_cast<Eigen::Index>(keep.size()) == frames.rows(),
        "motion: keep mask length mismatch");
  check(e_mask.size() == frames.cols(), "motion: mask embedding width mismatch");
  MaskedMotion out;
  out.frames.resize(frames.rows(), frames.cols());
  out.keep = keep;
  for (Eigen::Index t = 0; t < frames.rows(); ++t) {
    const int c = keep[static_cast<std::size_t>(t)];
    check(c == 0 || c == 1, "motion: keep flags must be 0 or 1");
    out.frames.row(t) =
        static_cast<double>(c) * frames.row(t) + (1.0 - static_cast<double>(c)) * e_mask;
  }
  return out;
}

inline MaskedMotion mask_motion(const geo::Motion& m, const std::vector<int>& keep,
                                const Eigen::RowVectorXd& e_mask) {
  return mask_motion(m.frames, keep, e_mask);
}

// Per-sample keep mask: a keep ratio drawn uniformly from [lo, hi], then one
// independent coin per frame.
inline std::vector<int> draw_keep_mask(Rng& rng, Eigen::Index frames, double lo,
                                       double hi) {
  check(frames > 0, "motion: empty mask");
  check(0.0 <= lo && lo <= hi && hi <= 1.0, "motion: bad mask ratio range");
  const double ratio = rng.uniform(lo, hi);
  std::vector<int> keep(static_cast<std::size_t>(frames));
  for (auto& c : keep) c = rng.uniform() < ratio ? 1 : 0;
  return keep;
}

// ---- reconstruction objective ----

// Per-frame rotation distance plus joint-position distance after forward
// kinematics, averaged over frames, plus the weighted encoder KL.
inline double motion_recon_loss(const geo::Motion& pred, const geo::Motion& truth,
                                const geo::Skeleton& skeleton, const Vec& mu,
                                const Vec& logvar, double lambda_kl) {
  check(pred.frames.rows() == truth.frames.rows() &&
            pred.frames.cols() == truth.frames.cols(),
        "motion: length mismatch");
  check(pred.frames.rows() > 0, "motion: empty motion");
  const Eigen::Index J = skeleton.njoints();
  check(pred.frames.cols() == J * 6, "motion: frame width mismatch");
  double rec = 0.0;
  for (Eigen::Index t = 0; t < pred.frames.rows(); ++t) {
    rec += (pred.frames.row(t) - truth.frames.row(t)).norm();
    const auto pa = geo::forward_kinematics(geo::pose_from_row(pred.frames, t, J), skeleton);
    const auto pb = geo::forward_kinematics(geo::pose_from_row(truth.frames, t, J), skeleton);
    double sq = 0.0;
    for (Eigen::Index j = 0; j < J; ++j) {
      sq += (pa[static_cast<std::size_t>(j)] - pb[static_cast<std::size_t>(j)]).squaredNorm();
    }
    rec += std::sqrt(sq);
  }
  rec /= static_cast<double>(pred.frames.rows());
  if (lambda_kl == 0.0) return rec;
  return rec + lambda_kl * prior::kl_divergence(mu, logvar);
}

// Tape form over a batch of stacked sequences: pred and truth are (B*T) x
// (J*6), mu and logvar are B x latent. True joint positions are constant, so
// they enter as data.
inline ad::Var motion_recon_loss_rows(ad::Tape& tape, ad::Var pred, const Mat& truth,
                                      const Mat& truth_positions,
                                      const geo::Skeleton& skeleton, ad::Var mu,
                                      ad::Var logvar, double lambda_kl) {
  check(tape.val(pred).rows() == truth.rows() && tape.val(pred).cols() == truth.cols(),
        "motion: length mismatch");
  const ad::Var rot_dist = tape.row_norms(tape.sub(pred, tape.leaf(truth)));
  const ad::Var pos = geo::ad_forward_kinematics(tape, pred, skeleton);
  const ad::Var pos_dist = tape.row_norms(tape.sub(pos, tape.leaf(truth_positions)));
  const ad::Var rec = tape.mean(tape.add(rot_dist, pos_dist));
  if (lambda_kl == 0.0) return rec;
  const ad::Var kl_terms = tape.sub(
      tape.add(tape.square(mu), tape.expv(logvar)), tape.add_scalar(logvar, 1.0));
  const ad::Var kl = tape.scale(tape.mean(tape.rowwise_sum(kl_terms)), 0.5);
  return tape.add(rec, tape.scale(kl, lambda_kl));
}

// Plain FK positions for stacked frames, (N x J*6) -> (N x J*3).
inline Mat fk_position_rows(const Mat& frames, const geo::Skeleton& skeleton) {
  const Eigen::Index J = skeleton.njoints();
  Mat out(frames.rows(), J * 3);
  for (Eigen::Index t = 0; t < frames.rows(); ++t) {
    const auto pos = geo::forward_kinematics(geo::pose_from_row(frames, t, J), skeleton);
    for (Eigen::Index j = 0; j < J; ++j) {
      out.block<1, 3>(t, j * 3) = pos[static_cast<std::size_t>(j)].transpose();
    }
  }
  return out;
}

// ---- model ----

struct MotionConfig {
  Eigen::Index frames = 60;
  Eigen::Index latent = 256;
  int layers = 4;
  int heads = 4;
  Eigen::Index width = 256;
  Eigen::Index ffn = 512;
  double dropout = 0.0;
  double lambda_kl = 1e-4;
  double mask_lo = 0.1;
  double mask_hi = 0.9;
  Eigen::Index batch = 16;
  int steps = 400;
  double lr = 1e-3;
  double holdout_frac = 0.1;
  double recon_bar = 0.05;  // held-out half-masked position error / height
  int log_every = 10;

  void validate() const {
    check_config(frames >= 2 && latent > 0 && width > 0 && ffn > 0, "motion: bad dimensions");
    check_config(layers >= 1 && heads >= 1 && width % heads == 0, "motion: bad attention shape");
    check_config(dropout >= 0.0 && dropout < 1.0, "motion: bad dropout");
    check_config(lambda_kl >= 0.0, "motion: negative KL weight");
    check_config(0.0 <= mask_lo && mask_lo <= mask_hi && mask_hi <= 1.0,
                 "motion: bad mask ratio range");
    check_config(batch > 0 && steps > 0 && lr > 0.0, "motion: bad training plan");
    check_config(holdout_frac > 0.0 && holdout_frac < 0.5, "motion: bad holdout fraction");
    check_config(recon_bar > 0.0, "motion: reconstruction bar must be positive");
    check_config(log_every > 0, "motion: bad log interval");
  }

  nlohmann::json to_json() const {
    return {{"frames", frames},   {"latent", latent},
            {"layers", layers},   {"heads", heads},
            {"width", width},     {"ffn", ffn},
            {"dropout", dropout}, {"lambda_kl", lambda_kl},
            {"mask_lo", mask_lo}, {"mask_hi", mask_hi},
            {"batch", batch},     {"steps", steps},
            {"lr", lr},           {"holdout_frac", holdout_frac},
            {"recon_bar", recon_bar}, {"log_every", log_every}};
  }

  static MotionConfig from_json(const nlohmann::json& j) {
    MotionConfig c;
    c.frames = j.at("frames").get<Eigen::Index>();
    c.latent = j.at("latent").get<Eigen::Index>();
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.width = j.at("width").get<Eigen::Index>();
    c.ffn = j.at("ffn").get<Eigen::Index>();
    c.dropout = j.at("dropout").get<double>();
    c.lambda_kl = j.at("lambda_kl").get<double>();
    c.mask_lo = j.at("mask_lo").get<double>();
    c.mask_hi = j.at("mask_hi").get<double>();
    c.batch = j.at("batch").get<Eigen::Index>();
    c.steps = j.at("steps").get<int>();
    c.lr = j.at("lr").get<double>();
    c.holdout_frac = j.at("holdout_frac").get<double>();
    c.recon_bar = j.at("recon_bar").get<double>();
    c.log_every = j.at("log_every").get<int>();
    c.validate();
    return c;
  }
};

struct MotionModel {
  MotionConfig config;
  Eigen::Index pose_dim = 0;
  std::uint64_t seed = 0;
  bool trained = false;
  nn::ParamStore params;

  nn::Linear enc_in;
  nn::Param* enc_tokens = nullptr;  // two query rows: mean and log-variance
  nn::Param* enc_pos = nullptr;
  nn::Transformer enc_tf;
  nn::Linear mu_head;
  nn::Linear logvar_head;

  nn::Param* mask_embed = nullptr;
  nn::Linear gen_in;
  nn::Linear lat_in;
  nn::Param* gen_pos = nullptr;
  nn::Transformer gen_tf;
  nn::Linear out_head;

  std::vector<nn::TrainPoint> train_log;
  double heldout_error = 0.0;

  MotionModel(MotionConfig cfg, Eigen::Index dim, std::uint64_t sd)
      : config(std::move(cfg)), pose_dim(dim), seed(sd) {
    config.validate();
    check_config(pose_dim > 0 && pose_dim % 6 == 0, "motion: bad pose dimension");
    Rng rng(seed, 0x6d6full);
    const nn::TransformerConfig tf{config.layers, config.heads, config.width,
                                   config.ffn, config.dropout};
    enc_in = nn::Linear(params, "enc.in", pose_dim, config.width, rng);
    enc_tokens = params.add("enc.tokens", rng.normal_matrix(2, config.width, 0.02));
    enc_pos = params.add("enc.pos",
                         rng.normal_matrix(config.frames + 2, config.width, 0.02));
    enc_tf = nn::Transformer(params, "enc.tf", tf, rng);
    mu_head = nn::Linear(params, "enc.mu", config.width, config.latent, rng);
    logvar_head = nn::Linear(params, "enc.logvar", config.width, config.latent, rng);

    mask_embed = params.add("gen.mask", Mat::Zero(1, pose_dim));
    gen_in = nn::Linear(params, "gen.in", pose_dim, config.width, rng);
    lat_in = nn::Linear(params, "gen.lat", config.latent, config.width, rng);
    gen_pos = params.add("gen.pos",
                         rng.normal_matrix(config.frames + 1, config.width, 0.02));
    gen_tf = nn::Transformer(params, "gen.tf", tf, rng);
    out_head = nn::Linear(params, "gen.out", config.width, pose_dim, rng);
  }

  MotionModel(const MotionModel&) = delete;
  MotionModel& operator=(const MotionModel&) = delete;
  MotionModel(MotionModel&&) = default;
  MotionModel& operator=(MotionModel&&) = default;

  Eigen::RowVectorXd mask_embedding() const { return mask_embed->value.row(0); }
};

namespace detail {

// Interleaves per-sample prefix tokens with per-sample frame blocks:
// row layout per sample is [prefix rows..., frame rows...].
inline std::vector<Eigen::Index> seq_indices(Eigen::Index batch, Eigen::Index prefix,
                                             Eigen::Index frames) {
  std::vector<Eigen::Index> idx;
  idx.reserve(static_cast<std::size_t>(batch * (prefix + frames)));
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index k = 0; k < prefix; ++k) idx.push_back(b * prefix + k);
    for (Eigen::Index t = 0; t < frames; ++t) idx.push_back(batch * prefix + b * frames + t);
  }
  return idx;
}

inline std::vector<Eigen::Index> token_positions(Eigen::Index batch, Eigen::Index prefix,
                                                 Eigen::Index frames, Eigen::Index slot) {
  std::vector<Eigen::Index> idx;
  idx.reserve(static_cast<std::size_t>(batch));
  for (Eigen::Index b = 0; b < batch; ++b) idx.push_back(b * (prefix + frames) + slot);
  return idx;
}

inline std::vector<Eigen::Index> frame_positions(Eigen::Index batch, Eigen::Index prefix,
                                                 Eigen::Index frames) {
  std::vector<Eigen::Index> idx;
  idx.reserve(static_cast<std::size_t>(batch * frames));
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index t = 0; t < frames; ++t) idx.push_back(b * (prefix + frames) + prefix + t);
  }
  return idx;
}

struct EncoderOut {
  ad::Var mu;
  ad::Var logvar;
};

// Encoder pass over stacked true frames, (B*T) x pose_dim.
inline EncoderOut encode_motions(const MotionModel& m, const nn::Ctx& c, ad::Var frames,
                                 Eigen::Index batch) {
  auto& tape = c.tape;
  const Eigen::Index T = m.config.frames;
  const ad::Var proj = m.enc_in(c, frames);
  const ad::Var toks = tape.tile_rows(c.bind[m.enc_tokens], batch);
  const ad::Var seq = tape.gather_rows(tape.vstack({toks, proj}), seq_indices(batch, 2, T));
  ad::Var x = tape.add(seq, tape.tile_rows(c.bind[m.enc_pos], batch));
  x = m.enc_tf(c, x, batch, T + 2);
  const ad::Var mu = m.mu_head(c, tape.gather_rows(x, token_positions(batch, 2, T, 0)));
  const ad::Var logvar =
      m.logvar_head(c, tape.gather_rows(x, token_positions(batch, 2, T, 1)));
  return {mu, logvar};
}

// Generator pass: masked frames (B*T) x pose_dim and latents B x latent to
// predicted frames (B*T) x pose_dim.
inline ad::Var generate_frames(const MotionModel& m, const nn::Ctx& c, ad::Var masked,
                               ad::Var latents, Eigen::Index batch) {
  auto& tape = c.tape;
  const Eigen::Index T = m.config.frames;
  const ad::Var fproj = m.gen_in(c, masked);
  const ad::Var lproj = m.lat_in(c, latents);
  const ad::Var seq =
      tape.gather_rows(tape.vstack({lproj, fproj}), seq_indices(batch, 1, T));
  ad::Var x = tape.add(seq, tape.tile_rows(c.bind[m.gen_pos], batch));
  x = m.gen_tf(c, x, batch, T + 1);
  return m.out_head(c, tape.gather_rows(x, frame_positions(batch, 1, T)));
}

// On-tape masking so the mask embedding receives gradients.
inline ad::Var mask_on_tape(const MotionModel& m, const nn::Ctx& c, const Mat& frames,
                            const Mat& keep01) {
  auto& tape = c.tape;
  const ad::Var kept = tape.mul(tape.leaf(keep01), tape.leaf(frames));
  const Mat inv = Mat::Ones(keep01.rows(), keep01.cols()) - keep01;
  const ad::Var fill = tape.mul(
      tape.leaf(inv), tape.tile_rows(c.bind[m.mask_embed], frames.rows()));
  return tape.add(kept, fill);
}

}  // namespace detail

// ---- prompts ----

struct Prompt {
  Mat frames;
  std::vector<int> keep;
};

// Kept slots: the neutral pose (zero latent of the prior) always at frame 0;
// one condition pose sits mid-clip; several spread evenly over the back
// three quarters in their given order.
inline Prompt build_prompt(const std::vector<geo::Pose>& poses, Eigen::Index frames,
                           const prior::PriorVAE& vae) {
  const auto K = static_cast<Eigen::Index>(poses.size());
  check(frames >= 2, "motion: prompt needs at least two frames");
  check(K <= frames - 1, "motion: more condition poses than frames");
  const geo::Pose neutral = prior::neutral_pose(vae);
  const Eigen::RowVectorXd neutral_row = geo::flatten_pose(neutral);

  Prompt p;
  p.frames = Mat::Zero(frames, neutral_row.size());
  p.keep.assign(static_cast<std::size_t>(frames), 0);
  p.frames.row(0) = neutral_row;
  p.keep[0] = 1;

  std::vector<Eigen::Index> slots;
  if (K == 1) {
    slots.push_back(frames / 2);
  } else if (K > 1) {
    const Eigen::Index lo = frames / 4;
    const Eigen::Index hi = frames - 1;
    for (Eigen::Index k = 0; k < K; ++k) {
      const double f = static_cast<double>(k) / static_cast<double>(K - 1);
      slots.push_back(lo + static_cast<Eigen::Index>(
                               std::llround(f * static_cast<double>(hi - lo))));
    }
  }
  for (Eigen::Index k = 0; k < K; ++k) {
    const Eigen::Index t = slots[static_cast<std::size_t>(k)];
    const Eigen::RowVectorXd row = geo::flatten_pose(poses[static_cast<std::size_t>(k)]);
    check(row.size() == p.frames.cols(), "motion: condition pose width mismatch");
    check(p.keep[static_cast<std::size_t>(t)] == 0, "motion: prompt slot collision");
    p.frames.row(t) = row;
    p.keep[static_cast<std::size_t>(t)] = 1;
  }
  return p;
}

// ---- inference ----

inline geo::Motion generate_motion(const MotionModel& model, const Prompt& prompt,
                                   const Vec& latent, double fps = 30.0) {
  check(model.trained, "motion: model is untrained");
  check(prompt.frames.rows() == model.config.frames, "motion: prompt length mismatch");
  check(prompt.frames.cols() == model.pose_dim, "motion: prompt width mismatch");
  check(latent.size() == model.config.latent, "motion: latent size mismatch");
  const MaskedMotion masked =
      mask_motion(prompt.frames, prompt.keep, model.mask_embedding());

  ad::Tape tape;
  nn::Binding bind(tape, model.params);
  nn::Ctx c{tape, bind, false, nullptr};
  const ad::Var pred = detail::generate_frames(
      model, c, tape.leaf(masked.frames), tape.leaf(latent.transpose()), 1);
  geo::Motion out;
  out.frames = tape.val(pred);
  out.fps = fps;
  return out;
}

inline geo::Motion generate_motion(const MotionModel& model, const Prompt& prompt) {
  return generate_motion(model, prompt, Vec::Zero(model.config.latent));
}

// Held-out masked-reconstruction quality: mean joint displacement between the
// reconstruction and the original, as a fraction of skeleton height.
inline double masked_recon_position_error(const MotionModel& model,
                                          const geo::Skeleton& skeleton,
                                          const Mat& frames,
                                          const std::vector<int>& keep) {
  check(model.trained, "motion: model is untrained");
  check(frames.rows() == model.config.frames, "motion: clip length mismatch");
  const MaskedMotion masked = mask_motion(frames, keep, model.mask_embedding());
  ad::Tape tape;
  nn::Binding bind(tape, model.params);
  nn::Ctx c{tape, bind, false, nullptr};
  const ad::Var pred = detail::generate_frames(
      model, c, tape.leaf(masked.frames),
      tape.leaf(Mat::Zero(1, model.config.latent)), 1);
  const Mat got = tape.val(pred);
  const Eigen::Index J = skeleton.njoints();
  double err = 0.0;
  for (Eigen::Index t = 0; t < frames.rows(); ++t) {
    const auto pa = geo::forward_kinematics(geo::pose_from_row(got, t, J), skeleton);
    const auto pb = geo::forward_kinematics(geo::pose_from_row(frames, t, J), skeleton);
    for (Eigen::Index j = 0; j < J; ++j) {
      err += (pa[static_cast<std::size_t>(j)] - pb[static_cast<std::size_t>(j)]).norm();
    }
  }
  return err / (static_cast<double>(frames.rows() * J) * skeleton.rest_height());
}

// ---- training ----

inline MotionModel train_motion_model(const std::vector<Mat>& motions,
                                      const geo::Skeleton& skeleton,
                                      const MotionConfig& config, std::uint64_t seed) {
  config.validate();
  check(motions.size() >= 2048, "motion: need at least 2048 training motions");
  const Eigen::Index pose_dim = skeleton.njoints() * 6;
  for (const Mat& m : motions) {
    check(m.rows() == config.frames && m.cols() == pose_dim,
          "motion: clip shape mismatch");
  }

  MotionModel model(config, pose_dim, seed);
  Rng rng(seed, 0x6d74ull);

  std::vector<std::size_t> order(motions.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  const auto holdout_n = std::max<std::size_t>(
      1, static_cast<std::size_t>(static_cast<double>(order.size()) * config.holdout_frac));
  const std::vector<std::size_t> holdout(order.end() - static_cast<std::ptrdiff_t>(holdout_n),
                                         order.end());
  order.resize(order.size() - holdout_n);

  const Eigen::Index T = config.frames;
  nn::Adam adam;
  for (int step = 0; step < config.steps; ++step) {
    const auto B = std::min<Eigen::Index>(config.batch,
                                          static_cast<Eigen::Index>(order.size()));
    Mat truth(B * T, pose_dim);
    Mat keep01(B * T, pose_dim);
    for (Eigen::Index b = 0; b < B; ++b) {
      const Mat& clip = motions[order[rng.index(order.size())]];
      truth.middleRows(b * T, T) = clip;
      const auto keep = draw_keep_mask(rng, T, config.mask_lo, config.mask_hi);
      for (Eigen::Index t = 0; t < T; ++t) {
        keep01.row(b * T + t).setConstant(static_cast<double>(keep[static_cast<std::size_t>(t)]));
      }
    }
    const Mat truth_pos = fk_position_rows(truth, skeleton);
    const Mat eps = rng.normal_matrix(B, config.latent, 1.0);

    ad::Tape tape;
    nn::Binding bind(tape, model.params);
    nn::Ctx c{tape, bind, true, &rng};
    const auto enc = detail::encode_motions(model, c, tape.leaf(truth), B);
    const ad::Var sigma = tape.expv(tape.scale(enc.logvar, 0.5));
    const ad::Var z = tape.add(enc.mu, tape.mul(sigma, tape.leaf(eps)));
    const ad::Var masked = detail::mask_on_tape(model, c, truth, keep01);
    const ad::Var pred = detail::generate_frames(model, c, masked, z, B);
    const ad::Var loss = motion_recon_loss_rows(tape, pred, truth, truth_pos, skeleton,
                                                enc.mu, enc.logvar, config.lambda_kl);
    const double lv = tape.val(loss)(0, 0);
    if (!std::isfinite(lv)) {
      throw TrainingError("motion: loss diverged at step " + std::to_string(step));
    }
    tape.backward(loss);
    adam.step(model.params, bind, tape, nn::cosine_lr(config.lr, step, config.steps));
    nn::ensure_finite(model.params, "motion step " + std::to_string(step));
    if (step % config.log_every == 0 || step + 1 == config.steps) {
      model.train_log.push_back({step, lv, nn::cosine_lr(config.lr, step, config.steps)});
    }
  }
  model.trained = true;

  // Held-out gate: half-masked reconstruction with a fixed evaluation stream.
  Rng eval_rng(seed, 0x6d65ull);
  double err = 0.0;
  for (const std::size_t i : holdout) {
    const auto keep = draw_keep_mask(eval_rng, T, 0.5, 0.5);
    err += masked_recon_position_error(model, skeleton, motions[i], keep);
  }
  model.heldout_error = err / static_cast<double>(holdout.size());
  if (model.heldout_error > config.recon_bar) {
    throw TrainingError("motion: held-out masked error " +
                        std::to_string(model.heldout_error) + " exceeds the bar " +
                        std::to_string(config.recon_bar));
  }
  return model;
}

inline std::vector<Mat> dataset_motion_clips(const domain::Dataset& ds) {
  std::vector<Mat> clips;
  clips.reserve(ds.motions.size());
  for (const auto& rec : ds.motions) clips.push_back(rec.frames);
  return clips;
}

// ---- persistence ----

inline void save_motion_model(const std::filesystem::path& path, const MotionModel& m) {
  nlohmann::json meta = {{"kind", "motion"},
                         {"schema_version", 1},
                         {"config", m.config.to_json()},
                         {"pose_dim", m.pose_dim},
                         {"seed", m.seed},
                         {"trained", m.trained},
                         {"heldout_error", m.heldout_error},
                         {"train_log", nn::train_log_to_json(m.train_log)}};
  ckpt::save(path, m.params, meta);
}

inline MotionModel load_motion_model(const std::filesystem::path& path) {
  const nlohmann::json meta = ckpt::peek_meta(path);
  check_io(meta.value("kind", "") == "motion",
           "motion: not a motion checkpoint: " + path.string());
  check_io(meta.value("schema_version", 0) == 1,
           "motion: unsupported schema in " + path.string());
  MotionModel m(MotionConfig::from_json(meta.at("config")),
                meta.at("pose_dim").get<Eigen::Index>(),
                meta.at("seed").get<std::uint64_t>());
  ckpt::load(path, m.params);
  m.trained = meta.at("trained").get<bool>();
  m.heldout_error = meta.at("heldout_error").get<double>();
  m.train_log = nn::train_log_from_json(meta.at("train_log"));
  return m;
}

// ---- motion export ----

// Self-describing clip file: frame-major 6D rotations plus the skeleton's
// joint names so a reader can check it against its own skeleton.
inline void export_motion(const std::filesystem::path& path, const geo::Motion& m,
                          const geo::Skeleton& skeleton) {
  const Eigen::Index J = skeleton.njoints();
  check(m.frames.cols() == J * 6, "motion export: frame width mismatch");
  std::string out = "{\"schema_version\":1,\"fps\":";
  domain::detail::append_double(out, m.fps);
  out += ",\"frames\":" + std::to_string(m.frames.rows());
  out += ",\"joints\":[";
  for (Eigen::Index j = 0; j < J; ++j) {
    if (j) out += ',';
    out += '"' + domain::detail::json_escape(skeleton.joints[static_cast<std::size_t>(j)].name) + '"';
  }
  out += "],\"rot6d\":";
  const Mat row_major = m.frames.transpose();
  domain::detail::append_double_array(out, row_major.data(),
                                      static_cast<std::size_t>(row_major.size()));
  out += "}";
  write_text_file(path, out);
}

inline geo::Motion import_motion(const std::filesystem::path& path,
                                 const geo::Skeleton& skeleton) {
  const std::string text = read_text_file(path);
  check_io(domain::detail::parse_int_field(text, "schema_version") == 1,
           "motion import: unsupported schema in " + path.string());
  const auto frames = static_cast<Eigen::Index>(
      domain::detail::parse_int_field(text, "frames"));
  check_io(frames > 0, "motion import: bad frame count in " + path.string());
  const Eigen::Index J = skeleton.njoints();
  // Joint list must match the reader's skeleton exactly.
  std::size_t pos = domain::detail::find_key(text, "joints");
  nlohmann::json names = nlohmann::json::parse(
      text.substr(pos, text.find(']', pos) - pos + 1), nullptr, false);
  check_io(!names.is_discarded() && names.is_array() &&
               static_cast<Eigen::Index>(names.size()) == J,
           "motion import: joint list mismatch in " + path.string());
  for (Eigen::Index j = 0; j < J; ++j) {
    check_io(names[static_cast<std::size_t>(j)].get<std::string>() ==
                 skeleton.joints[static_cast<std::size_t>(j)].name,
             "motion import: joint name mismatch in " + path.string());
  }
  geo::Motion m;
  double fps = 0.0;
  std::size_t fpos = domain::detail::find_key(text, "fps");
  domain::detail::parse_double_array;  // namespace anchor, no-op
  {
    const char* begin = text.data() + fpos;
    auto res = std::from_chars(begin, text.data() + text.size(), fps);
    check_io(res.ec == std::errc(), "motion import: malformed fps");
  }
  m.fps = fps;
  Mat buf(J * 6, frames);
  std::size_t rpos = domain::detail::find_key(text, "rot6d");
  domain::detail::parse_double_array(text, rpos, buf.data(),
                                     static_cast<std::size_t>(buf.size()));
  m.frames = buf.transpose();
  return m;
}

}  // namespace mogen::motion

#endif  // MOGEN_MOTION_MODEL_HPP
