// Copyright 2026 The Mogen Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "mogen/pose_prior.hpp"
#include "testutil.hpp"

using namespace mogen;
using namespace mogen::prior;

namespace {

const geo::Skeleton& skel() {
  static const geo::Skeleton s = geo::default_skeleton();
  return s;
}

// One golden training run shared by the expensive sections.
const PriorVAE& golden() {
  static const PriorVAE vae = train_golden_prior(skel());
  return vae;
}

PriorConfig tiny_config() {
  PriorConfig cfg;
  cfg.hidden = 32;
  cfg.blocks = 0;
  cfg.epochs = 2;
  cfg.batch = 512;
  cfg.lr = 1e-3;
  cfg.recon_bar = 10.0;
  return cfg;
}

std::filesystem::path fixture_path() {
  return std::filesystem::path(MOGEN_SOURCE_DIR) / "data" / "golden" / "neutral_pose.json";
}

}  // namespace

TEST_CASE("kl divergence closed form matches a monte carlo estimate") {
  Vec mu(6), logvar(6);
  mu << 0.3, -0.7, 1.2, 0.0, 0.5, -0.2;
  logvar << 0.4, -0.3, 0.0, 0.8, -1.0, 0.1;
  const double analytic = kl_divergence(mu, logvar);

  Rng rng(314);
  const int n = 400000;
  double mc = 0.0;
  for (int i = 0; i < n; ++i) {
    double term = 0.0;
    for (Eigen::Index d = 0; d < mu.size(); ++d) {
      const double sigma = std::exp(0.5 * logvar(d));
      const double z = mu(d) + sigma * rng.normal();
      const double log_q = -0.5 * (std::log(2.0 * M_PI) + logvar(d) +
                                   (z - mu(d)) * (z - mu(d)) / std::exp(logvar(d)));
      const double log_p = -0.5 * (std::log(2.0 * M_PI) + z * z);
      term += log_q - log_p;
    }
    mc += term;
  }
  mc /= n;
  REQUIRE(std::abs(mc - analytic) / analytic < 0.02);

  // Exactly standard-normal posterior carries zero KL.
  REQUIRE(kl_divergence(Vec::Zero(6), Vec::Zero(6)) == 0.0);
}

TEST_CASE("reparameterized gradients match finite differences") {
  PriorConfig cfg;
  cfg.latent = 4;
  cfg.hidden = 8;
  cfg.blocks = 1;
  PriorVAE vae(cfg, 12, 17);

  Rng rng(3);
  const Mat x = rng.normal_matrix(3, 12, 1.0);
  const Mat eps = rng.normal_matrix(3, 4, 1.0);

  auto forward = [&]() {
    ad::Tape tape;
    nn::Binding bind(tape, vae.params);
    nn::Ctx c{tape, bind, false, nullptr};
    return tape.val(prior_loss(vae, c, tape.leaf(x), eps, 0.05))(0, 0);
  };

  // Analytic gradients from one taped pass.
  std::unordered_map<const nn::Param*, Mat> grads;
  {
    ad::Tape tape;
    nn::Binding bind(tape, vae.params);
    nn::Ctx c{tape, bind, false, nullptr};
    const ad::Var loss = prior_loss(vae, c, tape.leaf(x), eps, 0.05);
    tape.backward(loss);
    for (const auto& p : vae.params.all()) grads[p.get()] = tape.grad_of(bind[p.get()]);
  }

  const double h = 1e-5;
  double max_rel = 0.0;
  for (const auto& p : vae.params.all()) {
    for (Eigen::Index i = 0; i < p->value.rows(); ++i) {
      for (Eigen::Index j = 0; j < p->value.cols(); ++j) {
        const double keep = p->value(i, j);
        p->value(i, j) = keep + h;
        const double up = forward();
        p->value(i, j) = keep - h;
        const double down = forward();
        p->value(i, j) = keep;
        const double fd = (up - down) / (2.0 * h);
        const double an = grads[p.get()](i, j);
        max_rel = std::max(max_rel, std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)}));
      }
    }
  }
  REQUIRE(max_rel < 1e-3);
}

TEST_CASE("untrained models refuse inference") {
  PriorVAE vae(golden_prior_config(), 96, 5);
  REQUIRE_THROWS_AS(encode_pose(vae, geo::identity_pose(skel())), ValidationError);
  REQUIRE_THROWS_AS(decode_latent(vae, Vec::Zero(32)), ValidationError);
  REQUIRE_THROWS_AS(pose_in_distrib_error(vae, geo::identity_pose(skel())), ValidationError);
}

TEST_CASE("golden training clears the bar with a monotone curve") {
  const PriorVAE& vae = golden();
  REQUIRE(vae.trained);
  REQUIRE(vae.heldout_error < vae.config.recon_bar);

  // Smoothed (window 3) epoch losses decrease monotonically after warmup.
  const auto& log = vae.train_log;
  REQUIRE(log.size() >= 8);
  auto smooth = [&](std::size_t k) {
    return (log[k].loss + log[k + 1].loss + log[k + 2].loss) / 3.0;
  };
  for (std::size_t k = 1; k + 3 < log.size(); ++k) {
    REQUIRE(smooth(k + 1) <= smooth(k) + 1e-9);
  }

  SECTION("zero latent decodes to the golden neutral pose bit-exactly") {
    const geo::Pose neutral = neutral_pose(vae);
    const Eigen::RowVectorXd row = geo::flatten_pose(neutral);
    const Eigen::RowVectorXd fixture = load_neutral_fixture(fixture_path(), 96);
    REQUIRE(row.size() == fixture.size());
    for (Eigen::Index i = 0; i < row.size(); ++i) {
      REQUIRE(row(i) == fixture(i));
    }
  }

  SECTION("training poses reconstruct under the position bar") {
    const Mat fresh = sample_pose_rows(skel(), 16, 1.0, 20101);
    const Mat rec = decode_latents(vae, encode_means(vae, fresh));
    double err = 0.0;
    for (Eigen::Index i = 0; i < fresh.rows(); ++i) {
      err += position_error_fraction(skel(), fresh.row(i), rec.row(i));
    }
    REQUIRE(err / 16.0 < 0.05);
  }

  SECTION("scrambled poses sit far out of distribution") {
    const Mat fresh = sample_pose_rows(skel(), 8, 1.0, 313);
    double e_train = 0.0;
    for (Eigen::Index i = 0; i < 8; ++i) {
      e_train += pose_in_distrib_error(vae, Eigen::RowVectorXd(fresh.row(i)));
    }
    Rng rng(555);
    double e_scram = 0.0;
    for (int i = 0; i < 8; ++i) {
      e_scram += pose_in_distrib_error(vae, Eigen::RowVectorXd(rng.normal_matrix(1, 96, 1.0).row(0)));
    }
    REQUIRE(e_scram >= 3.0 * e_train);
  }

  SECTION("decoding is deterministic and yields valid poses") {
    Rng rng(8);
    const Vec z = rng.normal_matrix(32, 1, 1.0).col(0);
    const geo::Pose a = decode_latent(vae, z);
    const geo::Pose b = decode_latent(vae, z);
    REQUIRE((a.rot6d - b.rot6d).cwiseAbs().maxCoeff() == 0.0);
    for (Eigen::Index j = 0; j < 16; ++j) {
      REQUIRE_NOTHROW(geo::rot6d_to_matrix(a.rot6d.row(j).transpose()));
    }
    const double e1 = pose_in_distrib_error(vae, geo::identity_pose(skel()));
    const double e2 = pose_in_distrib_error(vae, geo::identity_pose(skel()));
    REQUIRE(e1 == e2);
  }

  SECTION("checkpoints round trip and preserve the zero-latent pose") {
    const auto dir = testutil::scratch_dir("prior_ckpt");
    const auto path = dir / "prior.mgck";
    save_prior(path, vae);
    const PriorVAE back = load_prior(path);
    REQUIRE(back.trained);
    REQUIRE(back.heldout_error == vae.heldout_error);
    const Eigen::RowVectorXd a = geo::flatten_pose(neutral_pose(vae));
    const Eigen::RowVectorXd b = geo::flatten_pose(neutral_pose(back));
    for (Eigen::Index i = 0; i < a.size(); ++i) REQUIRE(a(i) == b(i));
  }
}

TEST_CASE("same seed reproduces the prior checkpoint byte for byte") {
  const Mat poses = sample_pose_rows(skel(), 4096, 1.0, 42);
  const auto dir = testutil::scratch_dir("prior_determinism");
  const PriorVAE a = train_prior(poses, skel(), tiny_config(), 99);
  const PriorVAE b = train_prior(poses, skel(), tiny_config(), 99);
  save_prior(dir / "a.mgck", a);
  save_prior(dir / "b.mgck", b);
  REQUIRE(file_digest(dir / "a.mgck") == file_digest(dir / "b.mgck"));

  const PriorVAE c = train_prior(poses, skel(), tiny_config(), 100);
  save_prior(dir / "c.mgck", c);
  REQUIRE(file_digest(dir / "a.mgck") != file_digest(dir / "c.mgck"));
}

TEST_CASE("prior training aborts on divergence and unreachable bars") {
  const Mat poses = sample_pose_rows(skel(), 4096, 1.0, 43);
  PriorConfig diverge = tiny_config();
  diverge.lr = 1e308;
  REQUIRE_THROWS_AS(train_prior(poses, skel(), diverge, 1), TrainingError);

  PriorConfig strict = tiny_config();
  strict.epochs = 1;
  strict.recon_bar = 1e-6;
  REQUIRE_THROWS_AS(train_prior(poses, skel(), strict, 1), TrainingError);

  REQUIRE_THROWS_AS(train_prior(poses.topRows(100), skel(), tiny_config(), 1),
                    ValidationError);
}

TEST_CASE("prior checkpoints reject foreign files") {
  const auto dir = testutil::scratch_dir("prior_reject");
  PriorVAE vae(tiny_config(), 96, 3);
  ckpt::save(dir / "x.mgck", vae.params, nlohmann::json{{"kind", "aligner"}, {"schema_version", 1}});
  REQUIRE_THROWS_AS(load_prior(dir / "x.mgck"), IoError);
}
