#pragma once

// Introspection tooling: statistics of the tanh-activated topology
// tensors and layer-wise magnitudes of the backbone / dynamic / static
// features captured before gated fusion.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "atomo/common.hpp"
#include "atomo/dataio.hpp"
#include "atomo/model.hpp"

namespace atomo::analysis {

using P5 = Eigen::Matrix<double, skeleton::kPartitions, skeleton::kPartitions>;

struct TopoStats {
  int layer = -1;  // -1 = averaged across all blocks
  P5 pos_mean = P5::Zero();
  P5 neg_mean = P5::Zero();
  P5 mean = P5::Zero();
  P5 abs_mean = P5::Zero();
};

// Statistics along the feature dimension of tanh(W_topo). Default
// averages the activated tensors across blocks first; per_layer keeps one
// matrix set per block.
template <typename S>
std::vector<TopoStats> topo_stats(const model::ModelParams<S>& mp, bool per_layer = false) {
  const int P = skeleton::kPartitions;
  const int E = mp.cfg.embed;
  std::vector<Mat<double>> activated;
  for (int i = 0; i < mp.cfg.blocks; ++i) {
    const Mat<S>& w = mp.store.value("blk" + std::to_string(i) + ".topo.W");
    activated.push_back(w.template cast<double>().array().tanh().matrix());
  }
  std::vector<Mat<double>> slabs;
  std::vector<int> layers;
  if (per_layer) {
    slabs = std::move(activated);
    for (int i = 0; i < mp.cfg.blocks; ++i) layers.push_back(i);
  } else {
    Mat<double> avg = Mat<double>::Zero(P * P, E);
    for (const auto& a : activated) avg += a;
    avg /= double(activated.size());
    slabs.push_back(std::move(avg));
    layers.push_back(-1);
  }

  std::vector<TopoStats> out;
  for (size_t s = 0; s < slabs.size(); ++s) {
    TopoStats st;
    st.layer = layers[s];
    for (int p = 0; p < P; ++p)
      for (int q = 0; q < P; ++q) {
        const auto row = slabs[s].row(p * P + q);
        double pos = 0, neg = 0, sum = 0, abs = 0;
        int npos = 0, nneg = 0;
        for (int e = 0; e < E; ++e) {
          double v = row(e);
          sum += v;
          abs += std::abs(v);
          if (v > 0) { pos += v; ++npos; }
          if (v < 0) { neg += v; ++nneg; }
        }
        st.pos_mean(p, q) = npos ? pos / npos : 0.0;
        st.neg_mean(p, q) = nneg ? neg / nneg : 0.0;
        st.mean(p, q) = sum / E;
        st.abs_mean(p, q) = abs / E;
      }
    out.push_back(st);
  }
  return out;
}

// ---------------------------------------------------------------------
// Dual-branch feature magnitudes
// ---------------------------------------------------------------------

struct MagnitudeRow {
  int layer;       // 0-based block index
  int partition;   // 0..4, or -1 for the overall mean
  double backbone, dynamic_branch, static_branch;
};

struct BranchMagnitudes {
  std::vector<MagnitudeRow> rows;  // blocks * (partitions + 1)
};

// Seed-pinned probe: sparse-input windows cut from synthetic sequences.
template <typename S>
std::vector<dataio::FeatureTensor<S>> make_probe_batch(const model::ModelConfig& cfg,
                                                       int count = 32, uint64_t seed = 123) {
  auto topo = skeleton::default_topology();
  auto basis = skeleton::default_shape_basis(topo);
  auto sensors = skeleton::sensor_config("hmd");
  Rng rng(seed);
  auto seqs = dataio::synth_dataset(rng, std::max(1, count / 8), cfg.window + count + 8, 60.0);
  dataio::MaskVector mask;
  for (int j = 0; j < skeleton::kJoints; ++j) mask.m[size_t(j)] = uint8_t(sensors.is_observed(j));
  std::vector<dataio::FeatureTensor<S>> out;
  for (int i = 0; i < count; ++i) {
    const auto& seq = seqs[size_t(i) % seqs.size()];
    auto feats = dataio::build_features<S>(seq, topo, basis);
    int end = cfg.window - 1 + int(rng.below(int64_t(feats.frames - cfg.window + 1)));
    auto win = dataio::slice_window(feats, end, cfg.window);
    dataio::normalize_inplace(win);
    out.push_back(dataio::apply_mask(std::move(win), mask, sensors));
  }
  return out;
}

// L2 norm along the feature dimension of the three pre-fusion tensors,
// averaged over frames and the probe batch, per layer and partition.
template <typename S>
BranchMagnitudes branch_magnitudes(const model::ModelParams<S>& mp,
                                   const std::vector<dataio::FeatureTensor<S>>& probe,
                                   const skeleton::PartitionScheme& scheme) {
  const int L = mp.cfg.blocks;
  const int P = skeleton::kPartitions;
  Mat<double> h_sum = Mat<double>::Zero(L, P), d_sum = Mat<double>::Zero(L, P),
              s_sum = Mat<double>::Zero(L, P);
  int64_t per_cell = 0;
  for (const auto& win : probe) {
    model::ForwardTrace<S> trace;
    model::infer(mp, win, scheme, &trace);
    per_cell += win.frames;
    for (int l = 0; l < L; ++l) {
      for (int t = 0; t < win.frames; ++t)
        for (int p = 0; p < P; ++p) {
          h_sum(l, p) += double(trace.backbone[size_t(l)].row(t * P + p).norm());
          d_sum(l, p) += double(trace.dynamic_branch[size_t(l)].row(t * P + p).norm());
          s_sum(l, p) += double(trace.static_branch[size_t(l)].row(t * P + p).norm());
        }
    }
  }
  BranchMagnitudes out;
  for (int l = 0; l < L; ++l) {
    for (int p = 0; p < P; ++p)
      out.rows.push_back({l, p, h_sum(l, p) / double(per_cell), d_sum(l, p) / double(per_cell),
                          s_sum(l, p) / double(per_cell)});
    out.rows.push_back({l, -1, h_sum.row(l).sum() / double(per_cell * P),
                        d_sum.row(l).sum() / double(per_cell * P),
                        s_sum.row(l).sum() / double(per_cell * P)});
  }
  return out;
}

// ---------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------

inline void write_matrix_csv(const P5& m, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("analysis: cannot open " + path);
  char buf[64];
  for (int r = 0; r < m.rows(); ++r) {
    for (int c = 0; c < m.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", m(r, c));
      f << buf << (c + 1 < m.cols() ? "," : "\n");
    }
  }
}

inline P5 read_matrix_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("analysis: cannot open " + path);
  P5 m;
  std::string line;
  for (int r = 0; r < m.rows(); ++r) {
    if (!std::getline(f, line)) throw FileFormatError("analysis: short CSV " + path);
    size_t at = 0;
    for (int c = 0; c < m.cols(); ++c) {
      size_t next = line.find(',', at);
      m(r, c) = std::stod(line.substr(at, next - at));
      at = next == std::string::npos ? line.size() : next + 1;
    }
  }
  return m;
}

inline void write_matrix_pgm(const P5& m, const std::string& path) {
  double lo = m.minCoeff(), hi = m.maxCoeff();
  std::ofstream f(path);
  if (!f) throw IoError("analysis: cannot open " + path);
  f << "P2\n" << m.cols() << " " << m.rows() << "\n255\n";
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) {
      int v = hi > lo ? int(std::lround(255.0 * (m(r, c) - lo) / (hi - lo))) : 0;
      f << v << (c + 1 < m.cols() ? " " : "\n");
    }
}

// CSV matrices plus grayscale maps; filenames carry stat kind and layer.
inline std::vector<std::string> export_heatmaps(const std::vector<TopoStats>& stats,
                                                const std::string& dir, bool pgm = true) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> written;
  auto emit = [&](const P5& m, const std::string& kind, int layer) {
    std::string stem = "topo_" + kind + (layer < 0 ? "" : "_blk" + std::to_string(layer));
    std::string csv = dir + "/" + stem + ".csv";
    write_matrix_csv(m, csv);
    written.push_back(csv);
    if (pgm) {
      std::string img = dir + "/" + stem + ".pgm";
      write_matrix_pgm(m, img);
      written.push_back(img);
    }
  };
  for (const auto& st : stats) {
    emit(st.pos_mean, "pos_mean", st.layer);
    emit(st.neg_mean, "neg_mean", st.layer);
    emit(st.mean, "mean", st.layer);
    emit(st.abs_mean, "abs_mean", st.layer);
  }
  return written;
}

inline std::vector<std::string> export_magnitudes(const BranchMagnitudes& mags,
                                                  const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::string path = dir + "/branch_magnitudes.csv";
  std::ofstream f(path);
  if (!f) throw IoError("analysis: cannot open " + path);
  f << "layer,partition,H,dyn,static\n";
  char buf[160];
  for (const auto& r : mags.rows) {
    std::string part = r.partition < 0 ? std::string("all") : std::to_string(r.partition);
    std::snprintf(buf, sizeof buf, "%d,%s,%.9g,%.9g,%.9g\n", r.layer, part.c_str(), r.backbone,
                  r.dynamic_branch, r.static_branch);
    f << buf;
  }
  return {path};
}

}  // namespace atomo::analysis
