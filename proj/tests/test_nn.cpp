// Copyright 2026 The Mogen Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <unordered_map>
#include <vector>

#include "mogen/nn.hpp"
#include "testutil.hpp"

using namespace mogen;
using ad::Tape;
using ad::Var;

TEST_CASE("linear layer matches manual product", "[nn]") {
  nn::ParamStore ps;
  Rng rng(1);
  nn::Linear lin(ps, "lin", 3, 2, rng);
  Mat x = rng.normal_matrix(4, 3);

  Tape tape;
  nn::Binding bind(tape, ps);
  nn::Ctx c{tape, bind, false, nullptr};
  Mat y = tape.val(lin(c, tape.leaf(x)));
  Mat expect = (x * lin.W->value).rowwise() + lin.b->value.row(0);
  REQUIRE(y.isApprox(expect));
}

TEST_CASE("residual block adds its branch to the normalized input", "[nn]") {
  nn::ParamStore ps;
  Rng rng(2);
  nn::ResidualBlock blk(ps, "blk", 4, 0.0, rng);
  // Zero the second linear layer: the block must reduce to plain layer norm.
  blk.fc2.W->value.setZero();
  blk.fc2.b->value.setZero();

  Tape tape;
  nn::Binding bind(tape, ps);
  nn::Ctx c{tape, bind, false, nullptr};
  Mat x = rng.normal_matrix(3, 4);
  Var out = blk(c, tape.leaf(x));
  Var ln_only = tape.layer_norm_rows(tape.leaf(x), bind[blk.ln.gamma], bind[blk.ln.beta]);
  REQUIRE(tape.val(out).isApprox(tape.val(ln_only)));
}

TEST_CASE("residual mlp parameter gradients agree with finite differences",
          "[nn][gradcheck]") {
  nn::ParamStore ps;
  Rng rng(3);
  nn::ResidualMLP mlp(ps, "mlp", 3, 5, 2, 2, 0.0, rng);
  Mat x0 = rng.normal_matrix(2, 3);

  // Input first, then every parameter tensor, all treated as leaves.
  std::vector<Mat> inputs{x0};
  std::unordered_map<const nn::Param*, std::size_t> slot;
  for (const auto& p : ps.all()) {
    slot[p.get()] = inputs.size();
    inputs.push_back(p->value);
  }

  auto build = [&](Tape& t, const std::vector<Var>& v) {
    auto pv = [&](const nn::Param* p) { return v[slot.at(p)]; };
    Var h = t.linear(v[0], pv(mlp.in_proj.W), pv(mlp.in_proj.b));
    for (const auto& blk : mlp.blocks) {
      Var y = t.layer_norm_rows(h, pv(blk.ln.gamma), pv(blk.ln.beta));
      Var r = t.linear(t.gelu(t.linear(y, pv(blk.fc1.W), pv(blk.fc1.b))),
                       pv(blk.fc2.W), pv(blk.fc2.b));
      h = t.add(y, r);
    }
    h = t.layer_norm_rows(h, pv(mlp.out_ln.gamma), pv(mlp.out_ln.beta));
    h = t.linear(h, pv(mlp.out_proj.W), pv(mlp.out_proj.b));
    return t.mean(t.square(h));
  };

  auto res = ad::finite_diff_check(build, inputs);
  INFO("max_rel_err=" << res.max_rel_err);
  REQUIRE(res.max_rel_err < 1e-3);

  // The hand-built graph above must match what the layer object computes.
  Tape tape;
  nn::Binding bind(tape, ps);
  nn::Ctx c{tape, bind, false, nullptr};
  Var via_layer = tape.mean(tape.square(mlp(c, tape.leaf(x0))));
  Tape tape2;
  std::vector<Var> vs;
  for (const Mat& m : inputs) vs.push_back(tape2.leaf(m));
  REQUIRE(tape.val(via_layer)(0, 0) ==
          Catch::Approx(tape2.val(build(tape2, vs))(0, 0)));
}

TEST_CASE("transformer forward is deterministic and shape-correct", "[nn]") {
  nn::ParamStore ps;
  Rng rng(4);
  nn::TransformerConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.width = 8;
  cfg.ffn = 16;
  nn::Transformer tr(ps, "tr", cfg, rng);

  Rng drng(5);
  Mat x = drng.normal_matrix(2 * 5, 8);
  auto run = [&]() {
    Tape tape;
    nn::Binding bind(tape, ps);
    nn::Ctx c{tape, bind, false, nullptr};
    return Mat(tape.val(tr(c, tape.leaf(x), 2, 5)));
  };
  Mat a = run();
  Mat b = run();
  REQUIRE(a.rows() == 10);
  REQUIRE(a.cols() == 8);
  REQUIRE(a.isApprox(b));
  REQUIRE(a.allFinite());
}

TEST_CASE("attention mixes information only within a sequence", "[nn]") {
  nn::ParamStore ps;
  Rng rng(6);
  nn::TransformerConfig cfg;
  cfg.layers = 1;
  cfg.heads = 1;
  cfg.width = 4;
  cfg.ffn = 8;
  nn::Transformer tr(ps, "tr", cfg, rng);

  Rng drng(7);
  Mat x = drng.normal_matrix(2 * 3, 4);
  auto run = [&](const Mat& input) {
    Tape tape;
    nn::Binding bind(tape, ps);
    nn::Ctx c{tape, bind, false, nullptr};
    return Mat(tape.val(tr(c, tape.leaf(input), 2, 3)));
  };
  Mat base = run(x);
  Mat modified = x;
  modified.row(4).setConstant(9.0);  // a frame of the second sequence
  Mat out = run(modified);
  REQUIRE(out.topRows(3).isApprox(base.topRows(3)));
  REQUIRE(!out.bottomRows(3).isApprox(base.bottomRows(3)));
}

TEST_CASE("transformer input gradients agree with finite differences",
          "[nn][gradcheck]") {
  nn::ParamStore ps;
  Rng rng(8);
  nn::TransformerConfig cfg;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.width = 4;
  cfg.ffn = 6;
  nn::Transformer tr(ps, "tr", cfg, rng);
  Rng drng(9);
  Mat x = drng.normal_matrix(2 * 3, 4);

  auto build = [&](Tape& t, const std::vector<Var>& v) {
    nn::Binding bind(t, ps);
    nn::Ctx c{t, bind, false, nullptr};
    return t.mean(t.square(tr(c, v[0], 2, 3)));
  };
  auto res = ad::finite_diff_check(build, {x});
  INFO("max_rel_err=" << res.max_rel_err);
  REQUIRE(res.max_rel_err < 1e-3);
}

TEST_CASE("dropout is identity in eval mode and unbiased in train mode", "[nn]") {
  Tape tape;
  nn::ParamStore ps;
  nn::Binding bind(tape, ps);
  Rng rng(10);
  Mat x = Mat::Ones(200, 50);

  nn::Ctx eval_ctx{tape, bind, false, nullptr};
  REQUIRE(tape.val(nn::dropout(eval_ctx, tape.leaf(x), 0.5)).isApprox(x));

  nn::Ctx train_ctx{tape, bind, true, &rng};
  Mat y = tape.val(nn::dropout(train_ctx, tape.leaf(x), 0.5));
  REQUIRE(std::abs(y.mean() - 1.0) < 0.05);
  const double zeros =
      static_cast<double>((y.array() == 0.0).count()) / static_cast<double>(y.size());
  REQUIRE(std::abs(zeros - 0.5) < 0.05);
}

TEST_CASE("adam minimizes a quadratic", "[nn]") {
  nn::ParamStore ps;
  nn::Param* w = ps.add("w", Mat::Constant(1, 3, 5.0));
  nn::Adam opt;
  for (int i = 0; i < 300; ++i) {
    Tape tape;
    nn::Binding bind(tape, ps);
    Var loss = tape.sum(tape.square(bind[w]));
    tape.backward(loss);
    opt.step(ps, bind, tape, 0.1);
  }
  REQUIRE(w->value.cwiseAbs().maxCoeff() < 1e-2);
}

TEST_CASE("cosine schedule endpoints", "[nn]") {
  REQUIRE(nn::cosine_lr(1e-3, 0, 100) == Catch::Approx(1e-3));
  REQUIRE(nn::cosine_lr(1e-3, 50, 100) == Catch::Approx(5e-4));
  REQUIRE(nn::cosine_lr(1e-3, 100, 100) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("training steps lower the loss of a small regression", "[nn]") {
  nn::ParamStore ps;
  Rng rng(11);
  nn::ResidualMLP mlp(ps, "m", 4, 8, 2, 1, 0.0, rng);
  Mat x = rng.normal_matrix(16, 4);
  Mat target = rng.normal_matrix(16, 2);
  nn::Adam opt;

  auto loss_value = [&]() {
    Tape tape;
    nn::Binding bind(tape, ps);
    nn::Ctx c{tape, bind, false, nullptr};
    Var d = tape.sub(mlp(c, tape.leaf(x)), tape.leaf(target));
    return tape.val(tape.mean(tape.square(d)))(0, 0);
  };

  const double before = loss_value();
  for (int i = 0; i < 20; ++i) {
    Tape tape;
    nn::Binding bind(tape, ps);
    nn::Ctx c{tape, bind, true, nullptr};
    Var d = tape.sub(mlp(c, tape.leaf(x)), tape.leaf(target));
    tape.backward(tape.mean(tape.square(d)));
    opt.step(ps, bind, tape, 1e-2);
  }
  REQUIRE(loss_value() < before);
}
