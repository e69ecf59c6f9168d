// Copyright 2026 The Mogen Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "mogen/pose_prior.hpp"
#include "mogen/tpa.hpp"
#include "testutil.hpp"

using namespace mogen;
using namespace mogen::tpa;

namespace {

const geo::Skeleton& skel() {
  static const geo::Skeleton s = geo::default_skeleton();
  return s;
}

align::AlignerConfig tiny_aligner_config() {
  align::AlignerConfig cfg;
  cfg.dim = 32;
  cfg.text_hidden = 64;
  cfg.view_hidden = 96;
  cfg.text_blocks = 1;
  cfg.view_blocks = 1;
  return cfg;
}

// Random frozen aligner: distillation needs a stable target, not a good one.
const align::AlignerModel& frozen_aligner() {
  static const align::AlignerModel model = [] {
    align::AlignerModel m{tiny_aligner_config(), domain::vocabulary(), 11};
    m.frozen = true;
    return m;
  }();
  return model;
}

TPAConfig tiny_config() {
  TPAConfig cfg;
  cfg.dim = 32;
  cfg.hidden = 64;
  cfg.blocks = 2;
  cfg.batch = 256;
  cfg.epochs = 80;
  cfg.lr = 2e-3;
  cfg.cosine_bar = 0.97;
  return cfg;
}

const TPAEncoder& tiny_trained() {
  static const TPAEncoder enc = train_tpa(
      prior::sample_pose_rows(skel(), 512, 1.0, 7), skel(), frozen_aligner(),
      tiny_config(), 5);
  return enc;
}

}  // namespace

TEST_CASE("distillation loss hand values") {
  Vec e1 = Vec::Zero(4), e2 = Vec::Zero(4);
  e1(0) = 1.0;
  e2(1) = 1.0;

  REQUIRE(distill_loss(e1, e1) == -1.0);
  REQUIRE(distill_loss(e1, e2) == Catch::Approx(std::sqrt(2.0)).margin(1e-15));
  REQUIRE(distill_loss(e1, Vec(-e1)) == 3.0);

  Vec scaled = 0.25 * e1;
  REQUIRE(distill_loss(scaled, e1) == Catch::Approx(0.75 - 1.0).margin(1e-15));

  REQUIRE_THROWS_AS(distill_loss(Vec::Zero(4), e1), ValidationError);
  REQUIRE_THROWS_AS(distill_loss(e1, Vec::Zero(4)), ValidationError);
  REQUIRE_THROWS_AS(distill_loss(e1, Vec::Zero(3)), ValidationError);
}

TEST_CASE("distillation loss is bounded below by -1") {
  Rng rng(21);
  for (int i = 0; i < 200; ++i) {
    const Vec a = rng.normal_matrix(6, 1, 1.0).col(0);
    const Vec b = rng.normal_matrix(6, 1, 1.0).col(0);
    REQUIRE(distill_loss(a, b) > -1.0);
    REQUIRE(distill_loss(a, a) == -1.0);
  }
}

TEST_CASE("batched distillation loss matches the scalar form") {
  const Mat pred = testutil::random_matrix(5, 8, 31);
  const Mat tgt = testutil::random_matrix(5, 8, 32);

  double expect = 0.0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    expect += distill_loss(pred.row(i).transpose(), tgt.row(i).transpose());
  }
  expect /= static_cast<double>(pred.rows());

  ad::Tape tape;
  const ad::Var loss = distill_loss_rows(tape, tape.leaf(pred), tape.leaf(tgt));
  REQUIRE(tape.val(loss)(0, 0) == Catch::Approx(expect).epsilon(1e-12));

  SECTION("gradient matches finite differences") {
    const auto res = ad::finite_diff_check(
        [](ad::Tape& tp, const std::vector<ad::Var>& in) {
          return distill_loss_rows(tp, in[0], in[1]);
        },
        {pred, tgt});
    REQUIRE(res.max_rel_err < 1e-3);
  }
}

TEST_CASE("pipeline features average exactly the configured views") {
  const align::AlignerModel& model = frozen_aligner();
  const geo::Pose pose = domain::attributes_to_pose(domain::tuple_from_index(17), 1.0, 4, skel());

  const Vec got = pipeline_pose_features(model, skel(), pose);
  REQUIRE(got.size() == model.config.dim);
  REQUIRE(got.allFinite());

  // Oracle: re-encode each rendered view separately and average by hand.
  const auto pos = geo::forward_kinematics(pose, skel());
  const auto views = geo::project_views(pos, model.config.azimuths);
  REQUIRE(views.size() == 5);
  Vec mean = Vec::Zero(model.config.dim);
  for (const auto& v : views) mean += align::encode_view(model, v);
  mean /= static_cast<double>(views.size());
  REQUIRE((got - mean).cwiseAbs().maxCoeff() < 1e-12);

  SECTION("global translation leaves the feature unchanged") {
    geo::JointPositions moved = pos;
    for (auto& p : moved) p += Vec3(0.3, -1.2, 2.0);
    Vec mean2 = Vec::Zero(model.config.dim);
    for (const auto& v : geo::project_views(moved, model.config.azimuths)) {
      mean2 += align::encode_view(model, v);
    }
    mean2 /= 5.0;
    REQUIRE((got - mean2).cwiseAbs().maxCoeff() < 1e-9);
  }

  SECTION("repeated calls are bit-identical") {
    const Vec again = pipeline_pose_features(model, skel(), pose);
    REQUIRE((got - again).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("unfrozen aligners are refused") {
    align::AlignerModel loose{tiny_aligner_config(), domain::vocabulary(), 11};
    REQUIRE_THROWS_AS(pipeline_pose_features(loose, skel(), pose), ValidationError);
  }
}

TEST_CASE("feature cache round trips and is keyed by content") {
  const align::AlignerModel& model = frozen_aligner();
  const Mat poses = prior::sample_pose_rows(skel(), 32, 1.0, 9);
  const Mat targets = pipeline_feature_rows(model, skel(), poses);
  const std::string digest = distill_digest(poses, model);

  const auto dir = testutil::scratch_dir("tpa_cache");
  const auto path = dir / "targets.json";
  REQUIRE_FALSE(load_feature_cache(path, digest).has_value());

  save_feature_cache(path, digest, targets);
  const auto back = load_feature_cache(path, digest);
  REQUIRE(back.has_value());
  REQUIRE((*back - targets).cwiseAbs().maxCoeff() == 0.0);

  // A different dataset or different weights must produce a different key.
  Mat other = poses;
  other(0, 0) += 1e-9;
  REQUIRE(distill_digest(other, model) != digest);
  REQUIRE_FALSE(load_feature_cache(path, distill_digest(other, model)).has_value());

  write_text_file(dir / "bogus.json", "{\"kind\":\"something\"}");
  REQUIRE_THROWS_AS(load_feature_cache(dir / "bogus.json", digest), IoError);
}

TEST_CASE("distillation reaches the cosine bar") {
  const TPAEncoder& enc = tiny_trained();
  REQUIRE(enc.trained);
  REQUIRE(enc.heldout_cosine >= 0.97);
  REQUIRE(enc.train_log.size() == 80);
  REQUIRE(enc.train_log.back().loss < enc.train_log.front().loss);

  const Mat fresh = prior::sample_pose_rows(skel(), 8, 1.0, 99);
  const Mat targets = pipeline_feature_rows(frozen_aligner(), skel(), fresh);
  const Vec text = align::encode_text(
      frozen_aligner(), domain::attributes_to_caption(domain::tuple_from_index(40), 0));

  SECTION("score approximates the pipeline score on held-out poses") {
    for (Eigen::Index i = 0; i < fresh.rows(); ++i) {
      const geo::Pose p = geo::pose_from_row(fresh, i, skel().njoints());
      const double distilled = tpa_score(text, p, enc);
      const double pipeline =
          align::cosine_similarity(text, Vec(targets.row(i).transpose()));
      REQUIRE(std::abs(distilled - pipeline) < 0.05);
    }
  }

  SECTION("score is cosine against the distilled feature") {
    const geo::Pose p = geo::pose_from_row(fresh, 0, skel().njoints());
    const Vec feat = encode_pose_feature(enc, p);
    REQUIRE(tpa_score(feat, p, enc) == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(tpa_score(text, p, enc) == align::cosine_similarity(feat, text));
  }

  SECTION("encoder is a pure function") {
    const geo::Pose p = geo::pose_from_row(fresh, 3, skel().njoints());
    const Vec a = encode_pose_feature(enc, p);
    const Vec b = encode_pose_feature(enc, p);
    REQUIRE((a - b).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("tpa training is deterministic in the seed") {
  const Mat poses = prior::sample_pose_rows(skel(), 128, 1.0, 3);
  TPAConfig cfg = tiny_config();
  cfg.epochs = 3;
  cfg.cosine_bar = 1e-4;

  const auto dir = testutil::scratch_dir("tpa_determinism");
  save_tpa(dir / "a.mgck", train_tpa(poses, skel(), frozen_aligner(), cfg, 77));
  save_tpa(dir / "b.mgck", train_tpa(poses, skel(), frozen_aligner(), cfg, 77));
  save_tpa(dir / "c.mgck", train_tpa(poses, skel(), frozen_aligner(), cfg, 78));
  REQUIRE(file_digest(dir / "a.mgck") == file_digest(dir / "b.mgck"));
  REQUIRE(file_digest(dir / "a.mgck") != file_digest(dir / "c.mgck"));

  SECTION("a warm cache changes nothing about the result") {
    const auto cache = dir / "targets.json";
    save_tpa(dir / "d.mgck", train_tpa(poses, skel(), frozen_aligner(), cfg, 77, cache));
    REQUIRE(std::filesystem::exists(cache));
    save_tpa(dir / "e.mgck", train_tpa(poses, skel(), frozen_aligner(), cfg, 77, cache));
    REQUIRE(file_digest(dir / "d.mgck") == file_digest(dir / "a.mgck"));
    REQUIRE(file_digest(dir / "e.mgck") == file_digest(dir / "a.mgck"));
  }
}

TEST_CASE("tpa training rejects bad setups and divergence") {
  const Mat poses = prior::sample_pose_rows(skel(), 128, 1.0, 3);

  TPAConfig diverge = tiny_config();
  diverge.epochs = 2;
  diverge.lr = 1e308;
  diverge.cosine_bar = 1e-4;
  REQUIRE_THROWS_AS(train_tpa(poses, skel(), frozen_aligner(), diverge, 1), TrainingError);

  TPAConfig strict = tiny_config();
  strict.epochs = 1;
  strict.cosine_bar = 0.999999;
  REQUIRE_THROWS_AS(train_tpa(poses, skel(), frozen_aligner(), strict, 1), TrainingError);

  TPAConfig wrong_dim = tiny_config();
  wrong_dim.dim = 16;
  REQUIRE_THROWS_AS(train_tpa(poses, skel(), frozen_aligner(), wrong_dim, 1),
                    ValidationError);

  align::AlignerModel loose{tiny_aligner_config(), domain::vocabulary(), 11};
  REQUIRE_THROWS_AS(train_tpa(poses, skel(), loose, tiny_config(), 1), ValidationError);

  REQUIRE_THROWS_AS(train_tpa(poses.topRows(8), skel(), frozen_aligner(), tiny_config(), 1),
                    ValidationError);

  TPAEncoder untrained(tiny_config(), 96, 4);
  REQUIRE_THROWS_AS(encode_pose_rows(untrained, poses), ValidationError);
}

TEST_CASE("tpa checkpoints round trip") {
  const TPAEncoder& enc = tiny_trained();
  const auto dir = testutil::scratch_dir("tpa_ckpt");
  save_tpa(dir / "enc.mgck", enc);

  const TPAEncoder back = load_tpa(dir / "enc.mgck");
  REQUIRE(back.trained);
  REQUIRE(back.heldout_cosine == enc.heldout_cosine);
  REQUIRE(back.train_log.size() == enc.train_log.size());

  const Mat probe = prior::sample_pose_rows(skel(), 4, 1.0, 123);
  REQUIRE((encode_pose_rows(back, probe) - encode_pose_rows(enc, probe))
              .cwiseAbs()
              .maxCoeff() == 0.0);

  ckpt::save(dir / "other.mgck", back.params,
             nlohmann::json{{"kind", "pose_prior"}, {"schema_version", 1}});
  REQUIRE_THROWS_AS(load_tpa(dir / "other.mgck"), IoError);
}
