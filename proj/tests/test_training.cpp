#include <catch2/catch_amalgamated.hpp>

#include "atomo/training.hpp"

using namespace atomo;
using namespace atomo::training;
namespace sk = atomo::skeleton;
namespace dio = atomo::dataio;

namespace {

struct LossFixture {
  sk::SkeletonTopology topo = sk::default_topology();
  sk::ShapeBasis basis = sk::default_shape_basis(topo);
  int T = 8;
  Targets<double> tgt;
  Mat<double> beta_gt;  // sequence beta broadcast to every frame

  LossFixture() {
    Rng rng(14);
    auto data = dio::synth_dataset(rng, 1, T, 60.0);
    auto ps = prepare_sequence<double>(data[0], topo, basis);
    tgt = ps.targets;
    beta_gt.resize(T, 16);
    for (int t = 0; t < T; ++t)
      for (int k = 0; k < 16; ++k) beta_gt(t, k) = double(data[0].beta[size_t(k)]);
  }

  // evaluate all loss components for a prediction equal to the targets
  // plus optional perturbations
  std::array<double, 8> eval(const Mat<double>& rot6d, const Mat<double>& beta,
                             const Targets<double>& t, const LossWeights& w = {}) const {
    tape::Tape<double> tp;
    model::ForwardOut<double> out;
    out.rot6d = tp.leaf(rot6d);
    out.beta = tp.leaf(beta);
    LossGraph<double> lg = build_losses(tp, out, t, topo, basis, 30, w);
    return {tp.val(lg.ori)(0, 0), tp.val(lg.rot)(0, 0),     tp.val(lg.pos)(0, 0),
            tp.val(lg.vel)(0, 0), tp.val(lg.acc)(0, 0),     tp.val(lg.reg)(0, 0),
            tp.val(lg.consist)(0, 0), tp.val(lg.total)(0, 0)};
  }
};

}  // namespace

TEST_CASE("losses vanish at the ground truth", "[training]") {
  LossFixture fx;
  auto l = fx.eval(fx.tgt.rot6d, fx.beta_gt, fx.tgt);
  REQUIRE(l[0] == 0.0);                               // ori
  REQUIRE(l[1] == 0.0);                               // rot
  REQUIRE(l[2] == Catch::Approx(0.0).margin(1e-9));   // pos
  REQUIRE(l[3] == Catch::Approx(0.0).margin(1e-10));  // vel
  REQUIRE(l[4] == Catch::Approx(0.0).margin(1e-10));  // acc
  REQUIRE(l[6] == 0.0);                               // consist (constant beta)
  REQUIRE(l[5] >= 0.0);                               // reg measures magnitude only
}

TEST_CASE("rotation losses split root and body and scale as means", "[training]") {
  LossFixture fx;
  Mat<double> beta = Mat<double>::Zero(fx.T, 16);

  // nudge one root channel on one frame by +0.5
  Mat<double> pred = fx.tgt.rot6d;
  pred(2, 3) += 0.5;
  auto l = fx.eval(pred, beta, fx.tgt);
  REQUIRE(l[0] == Catch::Approx(0.5 / (fx.T * 6)).epsilon(1e-12));
  REQUIRE(l[1] == 0.0);  // body loss unaffected by the root

  // nudge a body joint channel
  Mat<double> pred2 = fx.tgt.rot6d;
  pred2(1, 6 * 5 + 2) += 0.25;
  auto l2 = fx.eval(pred2, beta, fx.tgt);
  REQUIRE(l2[0] == 0.0);
  REQUIRE(l2[1] == Catch::Approx(0.25 / (fx.T * 21 * 6)).epsilon(1e-12));
}

TEST_CASE("position losses: constant offset hits pos only", "[training]") {
  LossFixture fx;
  Mat<double> beta = Mat<double>::Zero(fx.T, 16);
  const Vec3 d(0.02, -0.01, 0.03);

  // shifting the target positions by a constant is equivalent to a
  // constant prediction error
  Targets<double> shifted = fx.tgt;
  for (int t = 0; t < fx.T; ++t)
    for (int j = 0; j < 22; ++j)
      for (int c = 0; c < 3; ++c) shifted.positions(t, j * 3 + c) += d[c];

  // need pred positions == original gt positions: gt rotations and the
  // sequence beta. Zero beta changes bone lengths, so bake the true beta
  // into the target comparison by zeroing the basis contribution: here we
  // simply compare against targets built with beta = 0 predictions.
  Targets<double> base = fx.tgt;
  {
    // rebuild gt positions with beta = 0 so pred (beta=0) matches exactly
    auto rots = std::vector<Vec3>();
    for (int t = 0; t < fx.T; ++t)
      for (int j = 0; j < 22; ++j) {
        rotmath::Rot6D r6;
        for (int c = 0; c < 6; ++c) r6.a[c] = base.rot6d(t, j * 6 + c);
        Mat3 m = rotmath::rot6d_to_matrix(r6).m;
        rots.push_back(rotmath::matrix_to_axis_angle({m}).v);
      }
    std::vector<Vec3> roots;
    for (int t = 0; t < fx.T; ++t)
      roots.emplace_back(base.root_pos(t, 0), base.root_pos(t, 1), base.root_pos(t, 2));
    auto fk = sk::forward_kinematics(fx.topo, fx.basis, rots, roots, {});
    for (int t = 0; t < fx.T; ++t)
      for (int j = 0; j < 22; ++j)
        for (int c = 0; c < 3; ++c) base.positions(t, j * 3 + c) = fk.pos(t, j)[c];
  }
  auto l0 = fx.eval(base.rot6d, beta, base);
  REQUIRE(l0[2] == Catch::Approx(0.0).margin(1e-9));
  REQUIRE(l0[3] == Catch::Approx(0.0).margin(1e-9));
  REQUIRE(l0[4] == Catch::Approx(0.0).margin(1e-9));

  Targets<double> base_shifted = base;
  for (int t = 0; t < fx.T; ++t)
    for (int j = 0; j < 22; ++j)
      for (int c = 0; c < 3; ++c) base_shifted.positions(t, j * 3 + c) += d[c];
  auto l = fx.eval(base.rot6d, beta, base_shifted);
  double mean_abs = (std::abs(d[0]) + std::abs(d[1]) + std::abs(d[2])) / 3.0;
  REQUIRE(l[2] == Catch::Approx(mean_abs).margin(1e-9));
  REQUIRE(l[3] == Catch::Approx(0.0).margin(1e-10));  // differences kill constants
  REQUIRE(l[4] == Catch::Approx(0.0).margin(1e-10));
}

TEST_CASE("shape losses", "[training]") {
  Mat<double> zero = Mat<double>::Zero(5, 16);
  auto [reg0, con0] = loss_shape(zero);
  REQUIRE(reg0 == 0.0);
  REQUIRE(con0 == 0.0);

  // worked example: coefficient 0 takes values 1,2,3 over T=3
  Mat<double> b = Mat<double>::Zero(3, 16);
  b(0, 0) = 1;
  b(1, 0) = 2;
  b(2, 0) = 3;
  auto [reg, con] = loss_shape(b);
  REQUIRE(con == Catch::Approx(2.0 / 3.0).epsilon(1e-12));
  REQUIRE(reg == Catch::Approx((1.0 + 4.0 + 9.0) / (3 * 16)).epsilon(1e-12));

  // constant beta: no consistency penalty, nonzero regularizer
  Mat<double> c = Mat<double>::Constant(4, 16, 0.3);
  auto [regc, conc] = loss_shape(c);
  REQUIRE(conc == 0.0);
  REQUIRE(regc > 0.0);

  // invariance to a constant shift applied to every frame
  Rng rng(3);
  Mat<double> r(6, 16), shift_row(1, 16);
  for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = rng.normal();
  for (int k = 0; k < 16; ++k) shift_row(0, k) = rng.normal();
  Mat<double> shifted = r;
  shifted.rowwise() += shift_row.row(0);
  REQUIRE(loss_shape(r).second == Catch::Approx(loss_shape(shifted).second).margin(1e-12));
}

TEST_CASE("total loss is the weighted sum and scales linearly", "[training]") {
  LossFixture fx;
  Mat<double> beta = Mat<double>::Constant(fx.T, 16, 0.1);
  Mat<double> pred = fx.tgt.rot6d;
  pred.array() += 0.01;

  LossWeights w;
  auto l = fx.eval(pred, beta, fx.tgt, w);
  double expect = w.ori * l[0] + w.rot * l[1] + w.pos * l[2] + w.vel * l[3] + w.acc * l[4] +
                  w.reg * l[5] + w.consist * l[6];
  REQUIRE(l[7] == Catch::Approx(expect).epsilon(1e-12));

  LossWeights w2 = w;
  w2.pos *= 2.0;
  auto l2 = fx.eval(pred, beta, fx.tgt, w2);
  REQUIRE(l2[7] - l[7] == Catch::Approx(w.pos * l[2]).epsilon(1e-9));
}

TEST_CASE("adamw identities", "[training]") {
  auto scheme = sk::default_partition(sk::default_topology());
  model::ModelConfig cfg;
  cfg.blocks = 1;
  cfg.embed = 8;
  cfg.heads = 2;
  cfg.window = 4;
  Rng rng(5);
  auto mp = model::init_params<double>(cfg, rng, scheme);
  auto snapshot = mp;

  model::GradBuffer<double> g;
  g.init(mp.store);
  for (auto& m : g.g) m.setConstant(0.37);

  TrainConfig tc;
  tc.weight_decay = 0.0;
  AdamW<double> opt(mp.store, tc);
  opt.step(mp.store, g, 0.0);  // lr 0, decay 0: bit identical
  for (size_t i = 0; i < mp.store.entries.size(); ++i)
    REQUIRE(mp.store.entries[i].value == snapshot.store.entries[i].value);

  TrainConfig tc2;
  tc2.weight_decay = 0.01;
  AdamW<double> opt2(mp.store, tc2);
  opt2.step(mp.store, g, 0.0);  // lr 0: only decay moves parameters
  for (size_t i = 0; i < mp.store.entries.size(); ++i)
    REQUIRE((mp.store.entries[i].value - 0.99 * snapshot.store.entries[i].value)
                .cwiseAbs()
                .maxCoeff() < 1e-15);

  // lr > 0 moves against the gradient sign on the first step
  auto mp3 = snapshot;
  TrainConfig tc3;
  tc3.weight_decay = 0.0;
  AdamW<double> opt3(mp3.store, tc3);
  model::GradBuffer<double> g3;
  g3.init(mp3.store);
  for (auto& m : g3.g) m.setConstant(1.0);
  opt3.step(mp3.store, g3, 1e-3);
  for (size_t i = 0; i < mp3.store.entries.size(); ++i)
    REQUIRE(((snapshot.store.entries[i].value - mp3.store.entries[i].value).array() > 0).all());
}

TEST_CASE("zero training steps keep the initialization", "[training]") {
  Rng rng(31);
  auto data = dio::synth_dataset(rng, 2, 16, 60.0);
  model::ModelConfig cfg;
  cfg.blocks = 1;
  cfg.embed = 16;
  cfg.heads = 2;
  cfg.window = 8;
  cfg.dropout = 0.0;
  TrainConfig tc;
  tc.steps = 0;
  tc.batch = 2;
  tc.seed = 9;
  auto result = train<float>(data, cfg, tc);

  auto scheme = sk::default_partition(sk::default_topology());
  Rng init_rng(9);
  auto expect = model::init_params<float>(cfg, init_rng, scheme);
  REQUIRE(result.log.empty());
  for (size_t i = 0; i < expect.store.entries.size(); ++i)
    REQUIRE(result.params.store.entries[i].value == expect.store.entries[i].value);
}

TEST_CASE("loss decreases on a fixed batch", "[training]") {
  auto topo = sk::default_topology();
  auto basis = sk::default_shape_basis(topo);
  auto scheme = sk::default_partition(topo);
  auto sensors = sk::sensor_config("hmd");

  Rng rng(77);
  auto data = dio::synth_dataset(rng, 2, 24, 60.0);
  model::ModelConfig cfg;
  cfg.blocks = 2;
  cfg.embed = 16;
  cfg.heads = 2;
  cfg.window = 12;
  cfg.dropout = 0.0;
  auto mp = model::init_params<float>(cfg, rng, scheme);

  std::vector<PreparedSequence<float>> prep;
  for (const auto& seq : data) prep.push_back(prepare_sequence<float>(seq, topo, basis));

  // one fixed batch of 4 windows
  struct Sample {
    int seq, t0;
    dio::MaskVector mask;
  };
  dio::CurriculumState cur{0, dio::CurriculumState::Mode::kDecaying, 50000};
  std::vector<Sample> batch;
  for (int i = 0; i < 4; ++i)
    batch.push_back({int(rng.below(2)), int(rng.below(24 - cfg.window + 1)),
                     dio::sample_mask(rng, sensors, cur)});

  TrainConfig tc;
  tc.weight_decay = 0.0;
  AdamW<float> opt(mp.store, tc);
  model::GradBuffer<float> gb;
  gb.init(mp.store);
  LossWeights w;

  std::vector<double> losses;
  for (int step = 0; step < 50; ++step) {
    gb.zero();
    double total = 0;
    for (const auto& s : batch) {
      auto win = dio::slice_window(prep[size_t(s.seq)].features, s.t0 + cfg.window - 1,
                                   cfg.window);
      dio::normalize_inplace(win);
      win = dio::apply_mask(std::move(win), s.mask, sensors);
      tape::Tape<float> tp;
      auto out = model::forward<float>(tp, mp, &gb, win, scheme);
      auto lg = build_losses(tp, out, slice_targets(prep[size_t(s.seq)].targets, s.t0, cfg.window),
                             topo, basis, 30, w);
      total += double(tp.val(lg.total)(0, 0));
      tp.backward(lg.total, 0.25f);
    }
    losses.push_back(total / 4.0);
    opt.step(mp.store, gb, 2e-3);
  }
  for (size_t i = 1; i < losses.size(); ++i) REQUIRE(losses[i] < losses[i - 1]);
}

TEST_CASE("training is reproducible", "[training]") {
  Rng rng(101);
  auto data = dio::synth_dataset(rng, 2, 20, 60.0);
  model::ModelConfig cfg;
  cfg.blocks = 1;
  cfg.embed = 16;
  cfg.heads = 2;
  cfg.window = 10;
  cfg.dropout = 0.1;  // exercises the seeded dropout path too
  TrainConfig tc;
  tc.steps = 5;
  tc.batch = 3;
  tc.lr = 1e-3;
  tc.seed = 2024;

  auto a = train<float>(data, cfg, tc);
  auto b = train<float>(data, cfg, tc);
  REQUIRE(a.log.size() == b.log.size());
  for (size_t i = 0; i < a.log.size(); ++i) {
    REQUIRE(a.log[i].total == b.log[i].total);
    REQUIRE(a.log[i].masked_fraction == b.log[i].masked_fraction);
  }
  for (size_t i = 0; i < a.params.store.entries.size(); ++i)
    REQUIRE(a.params.store.entries[i].value == b.params.store.entries[i].value);
}

TEST_CASE("non-finite parameters abort training", "[training]") {
  Rng rng(55);
  auto data = dio::synth_dataset(rng, 1, 12, 60.0);
  model::ModelConfig cfg;
  cfg.blocks = 1;
  cfg.embed = 8;
  cfg.heads = 2;
  cfg.window = 6;
  cfg.dropout = 0.0;
  TrainConfig tc;
  tc.steps = 1;
  tc.batch = 1;
  tc.lr = std::numeric_limits<double>::quiet_NaN();
  // NaN lr poisons the first update; the invariant we care about is that
  // train() raises NonFiniteError instead of silently logging NaNs, but
  // the poison only lands after the first loss is computed, so use 2 steps
  tc.steps = 2;
  REQUIRE_THROWS_AS(train<float>(data, cfg, tc), NonFiniteError);
}

TEST_CASE("gradient check on a tiny instance", "[training]") {
  auto rep = grad_check(7, 1e-5, 1, 6, 2, 3);
  CAPTURE(rep.max_rel);
  REQUIRE(rep.max_rel < 1e-4);
  REQUIRE(!rep.groups.empty());
}
