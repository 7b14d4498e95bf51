#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "atomo/model.hpp"

using namespace atomo;
using namespace atomo::model;
namespace sk = atomo::skeleton;
namespace dio = atomo::dataio;

namespace {

ModelConfig small_cfg(int window = 8) {
  ModelConfig cfg;
  cfg.blocks = 2;
  cfg.embed = 16;
  cfg.heads = 2;
  cfg.window = window;
  cfg.dropout = 0.0;
  return cfg;
}

template <typename S>
dio::FeatureTensor<S> sparse_window(int window, uint64_t seed = 5) {
  auto topo = sk::default_topology();
  auto basis = sk::default_shape_basis(topo);
  auto sensors = sk::sensor_config("hmd");
  Rng rng(seed);
  auto seqs = dio::synth_dataset(rng, 1, window + 4, 60.0);
  auto feats = dio::build_features<S>(seqs[0], topo, basis);
  auto win = dio::slice_window(feats, window + 1, window);
  dio::normalize_inplace(win);
  dio::MaskVector m;
  for (int j = 0; j < 22; ++j) m.m[size_t(j)] = uint8_t(sensors.is_observed(j));
  return dio::apply_mask(std::move(win), m, sensors);
}

}  // namespace

TEST_CASE("parameter registry follows the sharing rule", "[model]") {
  auto scheme = sk::default_partition(sk::default_topology());
  Rng rng(0);
  auto mp = init_params<float>(small_cfg(), rng, scheme);

  // 3 temporal-attention parameter sets per block, one spatial set
  for (int b = 0; b < mp.cfg.blocks; ++b) {
    int tiers = 0;
    for (int k = 0; k < 5; ++k)
      if (mp.store.by_name.count("blk" + std::to_string(b) + ".tmsa" + std::to_string(k) + ".q.W"))
        ++tiers;
    REQUIRE(tiers == 3);
  }
  // 3 decoder sets total
  int decs = 0;
  for (int k = 0; k < 5; ++k)
    if (mp.store.by_name.count("dec" + std::to_string(k) + ".fc1.W")) ++decs;
  REQUIRE(decs == 3);

  // tier map: torso alone, arms share, legs share
  REQUIRE(tier_of(0) == 0);
  REQUIRE(tier_of(1) == 1);
  REQUIRE(tier_of(2) == 1);
  REQUIRE(tier_of(3) == 2);
  REQUIRE(tier_of(4) == 2);
}

TEST_CASE("initialization matches the published scheme", "[model]") {
  auto scheme = sk::default_partition(sk::default_topology());
  Rng rng(1);
  auto mp = init_params<double>(small_cfg(), rng, scheme);
  const int P = kPartitions;

  const auto& topo = mp.store.value("blk0.topo.W");
  for (int p = 0; p < P; ++p)
    for (int q = 0; q < P; ++q) {
      double expect = p == q ? 1.0 : ((p == 0 || q == 0) ? 0.1 : 0.0);
      for (int e = 0; e < mp.cfg.embed; ++e) REQUIRE(topo(p * P + q, e) == expect);
    }
  REQUIRE((mp.store.value("blk0.gateA").array() == 2.0).all());
  REQUIRE((mp.store.value("blk1.gateT").array() == -2.0).all());
  REQUIRE((mp.store.value("blk0.ln1.g").array() == 1.0).all());

  // pose decoder bias starts at the identity 6D encoding
  const auto& b2 = mp.store.value("dec0.fc2.b");
  for (int j = 0; j < 6; ++j)
    for (int c = 0; c < 6; ++c)
      REQUIRE(b2(0, j * 6 + c) == ((c == 0 || c == 4) ? 1.0 : 0.0));

  // deterministic given the seed
  Rng rng2(1);
  auto mp2 = init_params<double>(small_cfg(), rng2, scheme);
  for (size_t i = 0; i < mp.store.entries.size(); ++i)
    REQUIRE(mp.store.entries[i].value == mp2.store.entries[i].value);
}

TEST_CASE("embedding of zero input is the positional encoding", "[model]") {
  auto scheme = sk::default_partition(sk::default_topology());
  auto cfg = small_cfg(6);
  Rng rng(2);
  auto mp = init_params<double>(cfg, rng, scheme);

  tape::Tape<double> tp(false);
  Runner<double> run(tp, mp, nullptr);
  Mat<double> zeros = Mat<double>::Zero(6, 6 * dio::kChannels);
  Mat<double> aux = Mat<double>::Zero(6, 3);
  std::array<tape::Tape<double>::Var, 2> cat{tp.constant(zeros), tp.constant(aux)};
  auto emb = tp.add(run.affine(tp.hcat(cat), "embed.p0"),
                    tp.constant(positional_encoding<double>(6, cfg.embed)));
  REQUIRE(tp.val(emb) == positional_encoding<double>(6, cfg.embed));
}

TEST_CASE("forward shapes and determinism", "[model]") {
  auto scheme = sk::default_partition(sk::default_topology());
  auto cfg = small_cfg(8);
  Rng rng(3);
  auto mp = init_params<float>(cfg, rng, scheme);
  auto win = sparse_window<float>(8);

  auto a = infer(mp, win, scheme);
  REQUIRE(a.rot6d.rows() == 8);
  REQUIRE(a.rot6d.cols() == 22 * 6);
  REQUIRE(a.beta.rows() == 8);
  REQUIRE(a.beta.cols() == 16);
  REQUIRE(a.rot6d.allFinite());

  auto b = infer(mp, win, scheme);
  REQUIRE(a.rot6d == b.rot6d);
  REQUIRE(a.beta == b.beta);
}

TEST_CASE("gsm scale-shift formula", "[model]") {
  // E' = E (1 + alpha) + beta at the op level
  tape::Tape<float> tp(false);
  Mat<float> e = Mat<float>::Random(4, 16);
  auto ev = tp.constant(e);
  auto doubled =
      tp.add(tp.add(ev, tp.mul(ev, tp.constant(Mat<float>(Mat<float>::Ones(4, 16))))),
             tp.constant(Mat<float>(Mat<float>::Zero(4, 16))));
  REQUIRE(tp.val(doubled) == Mat<float>(2.0f * e));

  auto same = tp.add(tp.add(ev, tp.mul(ev, tp.constant(Mat<float>(Mat<float>::Zero(4, 16))))),
                     tp.constant(Mat<float>(Mat<float>::Zero(4, 16))));
  REQUIRE(tp.val(same) == e);
}

TEST_CASE("identical arm inputs with shared tiers decode identically", "[model]") {
  auto topo = sk::default_topology();
  auto scheme = sk::default_partition(topo);
  auto cfg = small_cfg(6);
  Rng rng(5);
  auto mp = init_params<float>(cfg, rng, scheme);

  // neutralize the pieces that intentionally distinguish the two arms:
  // per-partition embeddings (copy p1 -> p2) and the per-partition GSM
  // output slices (zeroed)
  mp.store.value("embed.p2.W") = mp.store.value("embed.p1.W");
  mp.store.value("embed.p2.b") = mp.store.value("embed.p1.b");
  mp.store.value("gsm.fc2.W").setZero();
  mp.store.value("gsm.fc2.b").setZero();

  auto win = sparse_window<float>(6);
  for (size_t i = 0; i < scheme.groups[1].size(); ++i) {
    int lj = scheme.groups[1][i];
    int rj = scheme.groups[2][i];
    win.x.middleCols(rj * dio::kChannels, dio::kChannels) =
        win.x.middleCols(lj * dio::kChannels, dio::kChannels);
  }

  auto out = infer(mp, win, scheme);
  for (size_t i = 0; i < scheme.groups[1].size(); ++i) {
    int lj = scheme.groups[1][i];
    int rj = scheme.groups[2][i];
    REQUIRE(out.rot6d.middleCols(lj * 6, 6) == out.rot6d.middleCols(rj * 6, 6));
  }
}

TEST_CASE("every sparse input channel reaches the output", "[model]") {
  auto scheme = sk::default_partition(sk::default_topology());
  auto cfg = small_cfg(6);
  Rng rng(6);
  auto mp = init_params<float>(cfg, rng, scheme);

  auto win = sparse_window<float>(6);
  auto base = infer(mp, win, scheme);

  // a masked (all-zero) leg joint still has live wiring: perturbing it
  // changes the output
  auto win2 = win;
  float* leg = win2.joint_ptr(3, sk::kLeftKnee);
  for (int c = 0; c < dio::kChannels; ++c) leg[c] = 0.25f;
  auto moved = infer(mp, win2, scheme);
  REQUIRE((moved.rot6d - base.rot6d).cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("decoded joint order matches the partition permutation", "[model]") {
  auto scheme = sk::default_partition(sk::default_topology());
  auto cfg = small_cfg(3);
  Rng rng(8);
  auto mp = init_params<float>(cfg, rng, scheme);

  // zero decoder weights; give each tier a recognizable bias pattern
  for (int k = 0; k < 3; ++k) {
    std::string d = "dec" + std::to_string(k);
    mp.store.value(d + ".fc1.W").setZero();
    mp.store.value(d + ".fc1.b").setZero();
    mp.store.value(d + ".fc2.W").setZero();
    auto& b2 = mp.store.value(d + ".fc2.b");
    for (int c = 0; c < b2.cols(); ++c) b2(0, c) = float(100 * k + c);
  }
  auto win = sparse_window<float>(3);
  auto out = infer(mp, win, scheme);
  for (int p = 0; p < kPartitions; ++p) {
    const auto& g = scheme.groups[size_t(p)];
    for (size_t i = 0; i < g.size(); ++i)
      for (int c = 0; c < 6; ++c)
        REQUIRE(out.rot6d(1, g[i] * 6 + c) == float(100 * tier_of(p) + int(i) * 6 + c));
  }
}

TEST_CASE("shape decoder is per-frame and sees all partitions", "[model]") {
  auto scheme = sk::default_partition(sk::default_topology());
  auto cfg = small_cfg(4);
  Rng rng(9);
  auto mp = init_params<float>(cfg, rng, scheme);
  REQUIRE(mp.store.value("shape.fc1.W").rows() == kPartitions * cfg.embed);

  // zero weights: beta equals the output bias on every frame
  mp.store.value("shape.fc1.W").setZero();
  mp.store.value("shape.fc1.b").setZero();
  mp.store.value("shape.fc2.W").setZero();
  auto& bias = mp.store.value("shape.fc2.b");
  for (int k = 0; k < 16; ++k) bias(0, k) = float(k) * 0.5f;
  auto win = sparse_window<float>(4);
  auto out = infer(mp, win, scheme);
  for (int t = 0; t < 4; ++t)
    for (int k = 0; k < 16; ++k) REQUIRE(out.beta(t, k) == float(k) * 0.5f);
}

TEST_CASE("checkpoint round trip is bit exact", "[model]") {
  auto scheme = sk::default_partition(sk::default_topology());
  auto cfg = small_cfg(6);
  cfg.dropout = 0.07;
  Rng rng(10);
  auto mp = init_params<float>(cfg, rng, scheme);

  auto dir = std::filesystem::temp_directory_path() / "atomo_model_test";
  std::filesystem::create_directories(dir);
  std::string path = (dir / "ck.atmo").string();
  save_checkpoint(mp, path);
  auto mp2 = load_checkpoint<float>(path);

  REQUIRE(mp2.cfg.blocks == cfg.blocks);
  REQUIRE(mp2.cfg.embed == cfg.embed);
  REQUIRE(mp2.cfg.heads == cfg.heads);
  REQUIRE(mp2.cfg.window == cfg.window);
  REQUIRE(mp2.cfg.dropout == cfg.dropout);
  REQUIRE(mp2.store.entries.size() == mp.store.entries.size());
  for (size_t i = 0; i < mp.store.entries.size(); ++i) {
    REQUIRE(mp2.store.entries[i].name == mp.store.entries[i].name);
    REQUIRE(mp2.store.entries[i].value == mp.store.entries[i].value);
  }

  auto win = sparse_window<float>(6);
  REQUIRE(infer(mp, win, scheme).rot6d == infer(mp2, win, scheme).rot6d);
}

TEST_CASE("gate and topology bounds hold after initialization", "[model]") {
  auto scheme = sk::default_partition(sk::default_topology());
  Rng rng(11);
  auto mp = init_params<double>(small_cfg(), rng, scheme);
  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  for (int b = 0; b < mp.cfg.blocks; ++b) {
    std::string blk = "blk" + std::to_string(b);
    const auto& ga = mp.store.value(blk + ".gateA");
    const auto& gt = mp.store.value(blk + ".gateT");
    const auto& tw = mp.store.value(blk + ".topo.W");
    for (int e = 0; e < mp.cfg.embed; ++e) {
      REQUIRE((sig(ga(0, e)) > 0.0));
      REQUIRE((sig(ga(0, e)) < 1.0));
      REQUIRE((sig(gt(0, e)) > 0.0));
      REQUIRE((sig(gt(0, e)) < 1.0));
    }
    for (Eigen::Index i = 0; i < tw.size(); ++i) {
      REQUIRE(std::tanh(tw.data()[i]) < 1.0);
      REQUIRE(std::tanh(tw.data()[i]) > -1.0);
    }
  }
}
