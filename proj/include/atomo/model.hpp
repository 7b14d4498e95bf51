#pragma once

// The network: per-partition embeddings, global synchronized modulation,
// stacked blocks (per-partition temporal attention, dual-branch spatial
// mixing with a learnable topology tensor, gated fusion, FFN) and the
// decoupled pose / centralized shape decoders.
//
// Parameter sharing follows the floor(p/2)+1 tier rule: the torso owns
// tier 1, the arms share tier 2, the legs share tier 3, for both temporal
// attention and pose decoders.

#include <string>
#include <unordered_map>
#include <vector>

#include "atomo/common.hpp"
#include "atomo/container.hpp"
#include "atomo/dataio.hpp"
#include "atomo/skeleton.hpp"
#include "atomo/tape.hpp"

namespace atomo::model {

using skeleton::kPartitions;

struct ModelConfig {
  int blocks = 6;
  int embed = 256;
  int heads = 8;
  int window = 40;
  double dropout = 0.1;

  void validate() const {
    if (blocks < 1) throw ShapeMismatch("config: blocks must be >= 1");
    if (embed % heads != 0) throw ShapeMismatch("config: embed must divide by heads");
    if (window < 1) throw ShapeMismatch("config: window must be >= 1");
  }
};

// tier index for the floor(p/2)+1 sharing rule, 0-based partitions
inline int tier_of(int p) { return (p + 1) / 2; }

template <typename S>
struct ParamStore {
  struct Entry {
    std::string name;
    Mat<S> value;
  };
  std::vector<Entry> entries;
  std::unordered_map<std::string, int> by_name;

  int add(const std::string& name, int rows, int cols) {
    by_name.emplace(name, int(entries.size()));
    entries.push_back({name, Mat<S>::Zero(rows, cols)});
    return int(entries.size()) - 1;
  }
  int index(const std::string& name) const {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ShapeMismatch("params: unknown name " + name);
    return it->second;
  }
  Mat<S>& value(const std::string& name) { return entries[size_t(index(name))].value; }
  const Mat<S>& value(const std::string& name) const {
    return entries[size_t(index(name))].value;
  }
  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& e : entries) n += size_t(e.value.size());
    return n;
  }
};

template <typename S>
struct GradBuffer {
  std::vector<Mat<S>> g;

  template <typename S2>
  void init(const ParamStore<S2>& store) {
    g.clear();
    g.reserve(store.entries.size());
    for (const auto& e : store.entries)
      g.push_back(Mat<S>::Zero(e.value.rows(), e.value.cols()));
  }
  void zero() {
    for (auto& m : g) m.setZero();
  }
  void accumulate(const GradBuffer& other) {
    for (size_t i = 0; i < g.size(); ++i) g[i] += other.g[i];
  }
};

template <typename S>
struct ModelParams {
  ModelConfig cfg;
  ParamStore<S> store;
  std::array<int, kPartitions> part_sizes{};  // joints per partition

  template <typename S2>
  ModelParams<S2> cast() const {
    ModelParams<S2> out;
    out.cfg = cfg;
    out.part_sizes = part_sizes;
    for (const auto& e : store.entries) {
      out.store.add(e.name, int(e.value.rows()), int(e.value.cols()));
      out.store.entries.back().value = e.value.template cast<S2>();
    }
    return out;
  }
};

// sinusoidal positional encoding over the window
template <typename S>
Mat<S> positional_encoding(int frames, int embed) {
  Mat<S> pe(frames, embed);
  for (int t = 0; t < frames; ++t)
    for (int i = 0; i < embed; i += 2) {
      double freq = std::pow(10000.0, -double(i) / double(embed));
      pe(t, i) = S(std::sin(double(t) * freq));
      if (i + 1 < embed) pe(t, i + 1) = S(std::cos(double(t) * freq));
    }
  return pe;
}

// ---------------------------------------------------------------------
// Initialization. Linear weights use Glorot-uniform; pose decoder output
// biases start at the identity 6D encoding; the topology tensor starts as
// the torso-rooted star (diag 1, torso-limb 0.1, elsewhere 0); gates start
// at +2 / -2.
// ---------------------------------------------------------------------

template <typename S = float>
ModelParams<S> init_params(const ModelConfig& cfg, Rng& rng,
                           const skeleton::PartitionScheme& scheme) {
  cfg.validate();
  ModelParams<S> mp;
  mp.cfg = cfg;
  for (int p = 0; p < kPartitions; ++p) mp.part_sizes[size_t(p)] = scheme.size_of(p);

  auto& st = mp.store;
  const int E = cfg.embed;

  auto glorot = [&rng](Mat<S>& w) {
    double lim = std::sqrt(6.0 / double(w.rows() + w.cols()));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = S(rng.uniform(-lim, lim));
  };
  auto linear = [&](const std::string& base, int in, int out) {
    glorot(st.entries[size_t(st.add(base + ".W", in, out))].value);
    st.add(base + ".b", 1, out);
  };

  for (int p = 0; p < kPartitions; ++p)
    linear("embed.p" + std::to_string(p), mp.part_sizes[size_t(p)] * dataio::kChannels + 3, E);
  linear("gsm.fc1", kPartitions * E, 2 * E);
  linear("gsm.fc2", 2 * E, 2 * kPartitions * E);

  for (int i = 0; i < cfg.blocks; ++i) {
    std::string blk = "blk" + std::to_string(i);
    for (int k = 0; k < 3; ++k) {
      std::string t = blk + ".tmsa" + std::to_string(k);
      linear(t + ".q", E, E);
      linear(t + ".k", E, E);
      linear(t + ".v", E, E);
      linear(t + ".o", E, E);
    }
    linear(blk + ".smsa.q", E, E);
    linear(blk + ".smsa.k", E, E);
    linear(blk + ".smsa.v", E, E);
    linear(blk + ".smsa.o", E, E);

    Mat<S>& topo = st.entries[size_t(st.add(blk + ".topo.W", kPartitions * kPartitions, E))].value;
    for (int p = 0; p < kPartitions; ++p) topo.row(p * kPartitions + p).setConstant(S(1));
    for (int q = 1; q < kPartitions; ++q) {
      topo.row(0 * kPartitions + q).setConstant(S(0.1));
      topo.row(q * kPartitions + 0).setConstant(S(0.1));
    }
    st.entries[size_t(st.add(blk + ".gateA", 1, E))].value.setConstant(S(2.0));
    st.entries[size_t(st.add(blk + ".gateT", 1, E))].value.setConstant(S(-2.0));
    st.entries[size_t(st.add(blk + ".ln1.g", 1, E))].value.setConstant(S(1));
    st.add(blk + ".ln1.b", 1, E);
    linear(blk + ".ffn.fc1", E, 2 * E);
    linear(blk + ".ffn.fc2", 2 * E, E);
    st.entries[size_t(st.add(blk + ".ln2.g", 1, E))].value.setConstant(S(1));
    st.add(blk + ".ln2.b", 1, E);
  }

  // decoders: one per tier; tiers 1/2 (arms/legs) serve two partitions
  const int tier_joints[3] = {mp.part_sizes[0], mp.part_sizes[1], mp.part_sizes[3]};
  for (int k = 0; k < 3; ++k) {
    std::string d = "dec" + std::to_string(k);
    linear(d + ".fc1", E, E);
    linear(d + ".fc2", E, tier_joints[k] * 6);
    Mat<S>& b2 = st.value(d + ".fc2.b");
    for (int j = 0; j < tier_joints[k]; ++j) {
      b2(0, j * 6 + 0) = S(1);
      b2(0, j * 6 + 4) = S(1);
    }
  }
  linear("shape.fc1", kPartitions * E, E);
  linear("shape.fc2", E, skeleton::kShapeCoeffs);
  return mp;
}

// ---------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------

template <typename S>
struct ForwardOut {
  typename tape::Tape<S>::Var rot6d;  // T x (J*6), joint-major
  typename tape::Tape<S>::Var beta;   // T x 16
};

// values captured before gated fusion in every block, for the analysis
// tooling: backbone H, gated dynamic branch, gated static branch, all in
// the stacked frame-major (T*P) x E layout
template <typename S>
struct ForwardTrace {
  std::vector<Mat<S>> backbone, dynamic_branch, static_branch;
  std::vector<Mat<S>> temporal_probs;  // per block, probs of partition 0's T-MSA
};

template <typename S>
class Runner {
 public:
  using Var = typename tape::Tape<S>::Var;

  Runner(tape::Tape<S>& tp, const ModelParams<S>& mp, GradBuffer<S>* gb)
      : tp_(tp), mp_(mp) {
    vars_.resize(mp.store.entries.size());
    for (size_t i = 0; i < vars_.size(); ++i)
      vars_[i] = tp.param(&mp.store.entries[i].value, gb ? &gb->g[i] : nullptr);
  }

  Var p(const std::string& name) { return vars_[size_t(mp_.store.index(name))]; }

  Var affine(Var x, const std::string& base) {
    return tp_.affine(x, p(base + ".W"), p(base + ".b"));
  }

  Var mlp2(Var x, const std::string& base) {
    return affine(tp_.gelu(affine(x, base + ".fc1")), base + ".fc2");
  }

  tape::Tape<S>& tape() { return tp_; }

 private:
  tape::Tape<S>& tp_;
  const ModelParams<S>& mp_;
  std::vector<Var> vars_;
};

template <typename S>
ForwardOut<S> forward(tape::Tape<S>& tp, const ModelParams<S>& mp, GradBuffer<S>* gb,
                      const dataio::FeatureTensor<S>& X,
                      const skeleton::PartitionScheme& scheme, Rng* dropout_rng = nullptr,
                      ForwardTrace<S>* trace = nullptr) {
  using Var = typename tape::Tape<S>::Var;
  const ModelConfig& cfg = mp.cfg;
  cfg.validate();
  const int T = X.frames;
  const int E = cfg.embed;
  const int P = kPartitions;
  if (X.x.cols() != X.joints * dataio::kChannels)
    throw ShapeMismatch("forward: feature width");
  for (int p = 0; p < P; ++p)
    if (scheme.size_of(p) != mp.part_sizes[size_t(p)])
      throw ShapeMismatch("forward: partition sizes differ from trained layout");

  Runner<S> run(tp, mp, gb);
  const double rate = dropout_rng ? cfg.dropout : 0.0;
  auto drop = [&](Var v) { return rate > 0.0 ? tp.dropout(v, rate, *dropout_rng) : v; };

  // per-partition input slabs + shared aux, as constants
  auto parts = dataio::partition<S>(X, scheme);
  Var aux = tp.constant(X.aux);
  Var pe = tp.constant(positional_encoding<S>(T, E));

  std::array<Var, kPartitions> F;
  for (int p = 0; p < P; ++p) {
    std::array<Var, 2> cat{tp.constant(std::move(parts[size_t(p)])), aux};
    Var e = run.affine(tp.hcat(cat), "embed.p" + std::to_string(p));
    F[size_t(p)] = tp.add(e, pe);
  }

  // global synchronized modulation
  {
    Var concat = tp.hcat(std::span<const Var>(F.data(), F.size()));
    Var mod = run.affine(tp.gelu(run.affine(concat, "gsm.fc1")), "gsm.fc2");
    for (int p = 0; p < P; ++p) {
      Var alpha = tp.slice_cols(mod, 2 * p * E, E);
      Var beta = tp.slice_cols(mod, (2 * p + 1) * E, E);
      F[size_t(p)] = tp.add(tp.add(F[size_t(p)], tp.mul(F[size_t(p)], alpha)), beta);
    }
  }

  for (int i = 0; i < cfg.blocks; ++i) {
    std::string blk = "blk" + std::to_string(i);

    // temporal attention per partition, tier-shared parameters
    std::array<Var, kPartitions> H;
    for (int p = 0; p < P; ++p) {
      std::string t = blk + ".tmsa" + std::to_string(tier_of(p));
      Var q = run.affine(F[size_t(p)], t + ".q");
      Var k = run.affine(F[size_t(p)], t + ".k");
      Var v = run.affine(F[size_t(p)], t + ".v");
      Mat<S> probs;
      Var att = tp.attention(q, k, v, cfg.heads, T,
                             (trace && p == 0) ? &probs : nullptr);
      if (trace && p == 0) trace->temporal_probs.push_back(std::move(probs));
      Var o = drop(run.affine(att, t + ".o"));
      H[size_t(p)] = tp.add(F[size_t(p)], o);
    }

    Var Hs = tp.stack_parts(std::span<const Var>(H.data(), H.size()));

    // dynamic branch: per-frame attention over the five partition tokens
    Var qs = run.affine(Hs, blk + ".smsa.q");
    Var ks = run.affine(Hs, blk + ".smsa.k");
    Var vs = run.affine(Hs, blk + ".smsa.v");
    Var attn = drop(run.affine(tp.attention(qs, ks, vs, cfg.heads, P), blk + ".smsa.o"));

    // static branch: tanh-activated topology tensor aggregation
    Var topo = tp.topo_mix(run.p(blk + ".topo.W"), Hs, P);

    Var a_gated = tp.gate_scale(attn, run.p(blk + ".gateA"));
    Var t_gated = tp.gate_scale(topo, run.p(blk + ".gateT"));
    if (trace) {
      trace->backbone.push_back(tp.val(Hs));
      trace->dynamic_branch.push_back(tp.val(a_gated));
      trace->static_branch.push_back(tp.val(t_gated));
    }

    Var Z = tp.layernorm(tp.add(tp.add(Hs, a_gated), t_gated), run.p(blk + ".ln1.g"),
                         run.p(blk + ".ln1.b"));
    Var f1 = drop(tp.gelu(run.affine(Z, blk + ".ffn.fc1")));
    Var f2 = run.affine(f1, blk + ".ffn.fc2");
    Var Fs = tp.layernorm(tp.add(Z, f2), run.p(blk + ".ln2.g"), run.p(blk + ".ln2.b"));

    for (int p = 0; p < P; ++p) F[size_t(p)] = tp.unstack_part(Fs, p, P);
  }

  // decoupled pose decoders (tier-shared), assembled back to joint order
  std::vector<Var> decoded;
  for (int p = 0; p < P; ++p)
    decoded.push_back(run.mlp2(F[size_t(p)], "dec" + std::to_string(tier_of(p))));
  Var pose_part_order = tp.hcat(decoded);
  std::vector<int> perm(static_cast<size_t>(X.joints) * 6);
  for (int j = 0; j < X.joints; ++j)
    for (int c = 0; c < 6; ++c)
      perm[size_t(j * 6 + c)] = scheme.inv_order[size_t(j)] * 6 + c;
  ForwardOut<S> out;
  out.rot6d = tp.permute_cols(pose_part_order, std::move(perm));

  // centralized shape decoder
  Var concat = tp.hcat(std::span<const Var>(F.data(), F.size()));
  out.beta = run.mlp2(concat, "shape");
  return out;
}

// ---------------------------------------------------------------------
// Inference wrapper (values only)
// ---------------------------------------------------------------------

template <typename S>
struct PoseEstimate {
  Mat<S> rot6d;       // T x (J*6)
  Mat<S> beta;        // T x 16
  std::vector<Vec3> positions;  // T*J, filled by FK post-processing
};

template <typename S>
PoseEstimate<S> infer(const ModelParams<S>& mp, const dataio::FeatureTensor<S>& window,
                      const skeleton::PartitionScheme& scheme,
                      ForwardTrace<S>* trace = nullptr) {
  tape::Tape<S> tp(false);
  ForwardOut<S> out = forward<S>(tp, mp, nullptr, window, scheme, nullptr, trace);
  PoseEstimate<S> pe;
  pe.rot6d = tp.val(out.rot6d);
  pe.beta = tp.val(out.beta);
  return pe;
}

// ---------------------------------------------------------------------
// Checkpoints (bit-exact round trip)
// ---------------------------------------------------------------------

template <typename S>
void save_checkpoint(const ModelParams<S>& mp, const std::string& path) {
  nlohmann::json header;
  header["type"] = "checkpoint";
  header["config"] = {{"blocks", mp.cfg.blocks},   {"embed", mp.cfg.embed},
                      {"heads", mp.cfg.heads},     {"window", mp.cfg.window},
                      {"dropout", mp.cfg.dropout}};
  header["dtype"] = std::is_same_v<S, float> ? "f32" : "f64";
  io::ContainerWriter w(header);
  for (const auto& e : mp.store.entries) {
    std::vector<int64_t> shape{e.value.rows(), e.value.cols()};
    if constexpr (std::is_same_v<S, float>)
      w.add_f32(e.name, e.value.data(), shape);
    else
      w.add_f64(e.name, e.value.data(), shape);
  }
  w.write(path);
}

template <typename S = float>
ModelParams<S> load_checkpoint(const std::string& path) {
  io::Container c = io::read_container(path, "checkpoint");
  ModelConfig cfg;
  try {
    const auto& j = c.header.at("config");
    cfg.blocks = j.at("blocks").get<int>();
    cfg.embed = j.at("embed").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.window = j.at("window").get<int>();
    cfg.dropout = j.at("dropout").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FileFormatError(std::string("checkpoint: bad config: ") + e.what());
  }
  std::string dtype = std::is_same_v<S, float> ? "f32" : "f64";
  if (c.header.at("dtype") != dtype)
    throw FileFormatError("checkpoint: dtype mismatch");
  Rng rng(0);
  ModelParams<S> mp = init_params<S>(cfg, rng, skeleton::default_partition(skeleton::default_topology()));
  for (auto& e : mp.store.entries) {
    auto data = c.array<S>(e.name);
    if (int64_t(data.size()) != int64_t(e.value.size()))
      throw FileFormatError("checkpoint: array size mismatch for " + e.name);
    std::copy(data.begin(), data.end(), e.value.data());
  }
  return mp;
}

}  // namespace atomo::model
