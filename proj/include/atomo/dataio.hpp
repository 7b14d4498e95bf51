#pragma once

// Feature construction, normalization, masking with its curriculum,
// hand-tracking FoV simulation, the five-cluster partition split, the
// synthetic motion generator and motion file I/O.
//
// Per-joint feature layout (C = 18):
//   [0..3)   global position, meters
//   [3..6)   linear velocity, meters/s (frame 0 copies frame 1)
//   [6..12)  6D encoding of the global joint rotation
//   [12..18) 6D encoding of the per-frame delta rotation (frame 0 copies frame 1)

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "atomo/common.hpp"
#include "atomo/container.hpp"
#include "atomo/rotmath.hpp"
#include "atomo/skeleton.hpp"

namespace atomo::dataio {

inline constexpr int kChannels = 18;

// ---------------------------------------------------------------------
// Core records
// ---------------------------------------------------------------------

// Ground-truth poses over a time window. Stored as float32 so that the
// on-disk container round-trips bit-exactly.
struct MotionSequence {
  int frames = 0;
  int joints = skeleton::kJoints;
  double fps = 60.0;
  std::vector<float> rotations;             // frames * joints * 3, local axis-angle
  std::vector<float> root_pos;              // frames * 3
  std::array<float, skeleton::kShapeCoeffs> beta{};  // constant per sequence

  Vec3 rot(int t, int j) const {
    const float* p = &rotations[(size_t(t) * size_t(joints) + size_t(j)) * 3];
    return Vec3(p[0], p[1], p[2]);
  }
  Vec3 root(int t) const {
    const float* p = &root_pos[size_t(t) * 3];
    return Vec3(p[0], p[1], p[2]);
  }
  std::vector<Vec3> rotations_d() const {
    std::vector<Vec3> out(static_cast<size_t>(frames) * static_cast<size_t>(joints));
    for (int t = 0; t < frames; ++t)
      for (int j = 0; j < joints; ++j) out[size_t(t) * size_t(joints) + size_t(j)] = rot(t, j);
    return out;
  }
  std::vector<Vec3> root_d() const {
    std::vector<Vec3> out(static_cast<size_t>(frames));
    for (int t = 0; t < frames; ++t) out[size_t(t)] = root(t);
    return out;
  }
  std::vector<double> beta_d() const {
    return std::vector<double>(beta.begin(), beta.end());
  }

  void validate() const {
    if (frames < 2) throw ShapeMismatch("motion: needs at least 2 frames");
    if (!(fps > 0)) throw ShapeMismatch("motion: fps must be positive");
    if (int(rotations.size()) != frames * joints * 3 || int(root_pos.size()) != frames * 3)
      throw ShapeMismatch("motion: array sizes inconsistent with frame count");
  }
};

// The T x (J*18) network input plus the per-frame auxiliary conditioning
// vector produced by temporal normalization.
template <typename S>
struct FeatureTensor {
  int frames = 0;
  int joints = skeleton::kJoints;
  Mat<S> x;                            // frames x (joints*18)
  Mat<S> aux;                          // frames x 3, zero until normalize()
  std::array<uint8_t, skeleton::kJoints> joint_visible{};  // 0 = masked out

  FeatureTensor() { joint_visible.fill(1); }

  S* row(int t) { return x.row(t).data(); }
  const S* joint_ptr(int t, int j) const { return x.row(t).data() + j * kChannels; }
  S* joint_ptr(int t, int j) { return x.row(t).data() + j * kChannels; }
};

struct MaskVector {
  std::array<uint8_t, skeleton::kJoints> m{};
};

// Masked-data fraction schedule. Decaying mode ramps 0.8 -> 0 linearly
// over `horizon` steps; continuous mode stays at 0.8.
struct CurriculumState {
  enum class Mode { kDecaying, kContinuous };
  int64_t step = 0;
  Mode mode = Mode::kDecaying;
  int64_t horizon = 50000;

  double masked_fraction() const {
    if (mode == Mode::kContinuous) return 0.8;
    double f = 0.8 * (1.0 - double(step) / double(horizon));
    return f > 0.0 ? f : 0.0;
  }
};

// ---------------------------------------------------------------------
// Feature construction
// ---------------------------------------------------------------------

template <typename S = float>
FeatureTensor<S> build_features(const MotionSequence& seq, const skeleton::SkeletonTopology& topo,
                                const skeleton::ShapeBasis& basis) {
  seq.validate();
  const int T = seq.frames;
  const int J = seq.joints;
  auto rots = seq.rotations_d();
  auto roots = seq.root_d();
  auto beta = seq.beta_d();
  skeleton::FkSequence fk = skeleton::forward_kinematics(topo, basis, rots, roots, beta);

  FeatureTensor<S> out;
  out.frames = T;
  out.joints = J;
  out.x.setZero(T, J * kChannels);
  out.aux.setZero(T, 3);

  std::vector<double> r6(static_cast<size_t>(T) * static_cast<size_t>(J) * 6);
  for (int t = 0; t < T; ++t) {
    for (int j = 0; j < J; ++j) {
      rotmath::Rot6D r = rotmath::matrix_to_rot6d({fk.rot(t, j)});
      for (int c = 0; c < 6; ++c) r6[(size_t(t) * size_t(J) + size_t(j)) * 6 + size_t(c)] = r.a[c];
    }
  }
  for (int t = 0; t < T; ++t) {
    int tv = std::max(t, 1);  // frame 0 copies frame 1 for the two velocity slots
    for (int j = 0; j < J; ++j) {
      S* dst = out.joint_ptr(t, j);
      const Vec3& p = fk.pos(t, j);
      Vec3 v = (fk.pos(tv, j) - fk.pos(tv - 1, j)) * seq.fps;
      for (int c = 0; c < 3; ++c) dst[c] = S(p[c]);
      for (int c = 0; c < 3; ++c) dst[3 + c] = S(v[c]);
      const double* r = &r6[(size_t(t) * size_t(J) + size_t(j)) * 6];
      for (int c = 0; c < 6; ++c) dst[6 + c] = S(r[c]);
      Mat3 delta = fk.rot(tv - 1, j).transpose() * fk.rot(tv, j);
      rotmath::Rot6D d6 = rotmath::matrix_to_rot6d({delta});
      for (int c = 0; c < 6; ++c) dst[12 + c] = S(d6.a[c]);
    }
  }
  return out;
}

// Spatial normalization: horizontal (x, y) position channels become
// head-relative, vertical stays global. Temporal normalization: the head
// position delta to the window's first frame goes into `aux`.
template <typename S>
void normalize_inplace(FeatureTensor<S>& X, int head_joint = skeleton::kHead) {
  const int T = X.frames;
  for (int t = 0; t < T; ++t) {
    const S* head = X.joint_ptr(t, head_joint);
    bool any = false;
    for (int c = 0; c < kChannels; ++c) any = any || head[c] != S(0);
    if (!any) throw MissingAnchor("normalize: head features are zero");
  }
  Eigen::Matrix<S, Eigen::Dynamic, 3, Eigen::RowMajor> head_pos(T, 3);
  for (int t = 0; t < T; ++t) {
    const S* head = X.joint_ptr(t, head_joint);
    head_pos(t, 0) = head[0];
    head_pos(t, 1) = head[1];
    head_pos(t, 2) = head[2];
  }
  for (int t = 0; t < T; ++t) {
    for (int j = 0; j < X.joints; ++j) {
      S* p = X.joint_ptr(t, j);
      p[0] -= head_pos(t, 0);
      p[1] -= head_pos(t, 1);
    }
    for (int c = 0; c < 3; ++c) X.aux(t, c) = head_pos(t, c) - head_pos(0, c);
  }
}

template <typename S>
FeatureTensor<S> normalize(FeatureTensor<S> X, int head_joint = skeleton::kHead) {
  normalize_inplace(X, head_joint);
  return X;
}

// ---------------------------------------------------------------------
// Masking
// ---------------------------------------------------------------------

template <typename S>
FeatureTensor<S> apply_mask(FeatureTensor<S> X, const MaskVector& m,
                            const skeleton::SensorConfig& config) {
  for (int j : config.observed)
    if (!m.m[size_t(j)]) throw AnchorMasked("apply_mask: anchor joint masked");
  for (int j = 0; j < X.joints; ++j) {
    X.joint_visible[size_t(j)] = m.m[size_t(j)];
    if (m.m[size_t(j)]) continue;
    for (int t = 0; t < X.frames; ++t) {
      S* p = X.joint_ptr(t, j);
      for (int c = 0; c < kChannels; ++c) p[c] = S(0);
    }
  }
  return X;
}

// With probability masked_fraction: keep anchors, Bernoulli(0.5) over the
// rest. Otherwise: the pure sparse input (anchors only).
inline MaskVector sample_mask(Rng& rng, const skeleton::SensorConfig& config,
                              const CurriculumState& curriculum) {
  MaskVector mv;
  bool masked_mode = rng.uniform() < curriculum.masked_fraction();
  for (int j = 0; j < skeleton::kJoints; ++j) {
    if (config.is_observed(j))
      mv.m[size_t(j)] = 1;
    else
      mv.m[size_t(j)] = masked_mode ? uint8_t(rng.bernoulli(0.5)) : uint8_t(0);
  }
  return mv;
}

// ---------------------------------------------------------------------
// Hand-tracking FoV simulation
// ---------------------------------------------------------------------

// Per-frame wrist visibility against a cone of half-angle fov/2 about the
// head's local -Z axis. Boundary inclusive (1e-9 slack). Expects
// unnormalized features (global positions/rotations).
template <typename S>
std::vector<std::array<uint8_t, 2>> fov_visibility(const FeatureTensor<S>& X,
                                                   double fov_degrees = 120.0) {
  const double cos_half = std::cos(fov_degrees * 0.5 * M_PI / 180.0);
  std::vector<std::array<uint8_t, 2>> vis(static_cast<size_t>(X.frames), {1, 1});
  const int wrists[2] = {skeleton::kLeftWrist, skeleton::kRightWrist};
  for (int t = 0; t < X.frames; ++t) {
    const S* head = X.joint_ptr(t, skeleton::kHead);
    rotmath::Rot6D hr;
    for (int c = 0; c < 6; ++c) hr.a[c] = double(head[6 + c]);
    Vec3 fwd = rotmath::rot6d_to_matrix(hr).m * Vec3(0, 0, -1);
    Vec3 hp{double(head[0]), double(head[1]), double(head[2])};
    for (int w = 0; w < 2; ++w) {
      const S* wp = X.joint_ptr(t, wrists[w]);
      Vec3 dir = Vec3(double(wp[0]), double(wp[1]), double(wp[2])) - hp;
      double n = dir.norm();
      if (n < 1e-9) continue;  // hand at the head counts as visible
      vis[size_t(t)][size_t(w)] = uint8_t(dir.dot(fwd) / n >= cos_half - 1e-9);
    }
  }
  return vis;
}

template <typename S>
void zero_invisible_wrists(FeatureTensor<S>& X,
                           const std::vector<std::array<uint8_t, 2>>& vis) {
  const int wrists[2] = {skeleton::kLeftWrist, skeleton::kRightWrist};
  for (int t = 0; t < X.frames; ++t)
    for (int w = 0; w < 2; ++w)
      if (!vis[size_t(t)][size_t(w)]) {
        S* p = X.joint_ptr(t, wrists[w]);
        for (int c = 0; c < kChannels; ++c) p[c] = S(0);
      }
}

template <typename S>
FeatureTensor<S> apply_fov(FeatureTensor<S> X, double fov_degrees = 120.0) {
  auto vis = fov_visibility(X, fov_degrees);
  zero_invisible_wrists(X, vis);
  return X;
}

// ---------------------------------------------------------------------
// Partition split / merge
// ---------------------------------------------------------------------

template <typename S>
std::array<Mat<S>, skeleton::kPartitions> partition(const FeatureTensor<S>& X,
                                                    const skeleton::PartitionScheme& scheme) {
  std::array<Mat<S>, skeleton::kPartitions> out;
  for (int p = 0; p < skeleton::kPartitions; ++p) {
    const auto& g = scheme.groups[size_t(p)];
    out[size_t(p)].resize(X.frames, int(g.size()) * kChannels);
    for (int i = 0; i < int(g.size()); ++i)
      out[size_t(p)].middleCols(i * kChannels, kChannels) =
          X.x.middleCols(g[size_t(i)] * kChannels, kChannels);
  }
  return out;
}

template <typename S>
Mat<S> merge_partitions(const std::array<Mat<S>, skeleton::kPartitions>& parts,
                        const skeleton::PartitionScheme& scheme, int joints) {
  Mat<S> x(parts[0].rows(), joints * kChannels);
  for (int p = 0; p < skeleton::kPartitions; ++p) {
    const auto& g = scheme.groups[size_t(p)];
    for (int i = 0; i < int(g.size()); ++i)
      x.middleCols(g[size_t(i)] * kChannels, kChannels) =
          parts[size_t(p)].middleCols(i * kChannels, kChannels);
  }
  return x;
}

// ---------------------------------------------------------------------
// Window slicing (sliding-window protocol; warm-up repeats frame 0)
// ---------------------------------------------------------------------

template <typename S>
FeatureTensor<S> slice_window(const FeatureTensor<S>& X, int end_frame, int window) {
  FeatureTensor<S> out;
  out.frames = window;
  out.joints = X.joints;
  out.joint_visible = X.joint_visible;
  out.x.resize(window, X.x.cols());
  out.aux.setZero(window, 3);
  for (int i = 0; i < window; ++i) {
    int t = end_frame - window + 1 + i;
    out.x.row(i) = X.x.row(std::max(t, 0));
  }
  return out;
}

// ---------------------------------------------------------------------
// Synthetic motion generator
// ---------------------------------------------------------------------

struct SynthParams {
  double joint_amplitude = 0.30;   // radians
  double joint_bias = 0.08;        // radians
  double min_freq = 0.4, max_freq = 1.1;  // Hz, drawn per partition
  double root_height = 0.95;       // meters
  double root_speed = 0.10;        // meters/s scale of the damped walk
  double yaw_amplitude = 0.35;     // radians
  double beta_range = 1.0;
  // arm posture: rest T-pose, hanging down (hands in front of a -Z-facing
  // head) or raised up (hands behind it)
  enum class ArmStyle { kTpose, kDown, kUp };
  ArmStyle arms = ArmStyle::kTpose;
};

// Procedural motions: sinusoidal joint oscillations with per-partition
// frequencies/phases, a damped random-walk root trajectory, random shape.
inline std::vector<MotionSequence> synth_dataset(Rng& rng, int n_sequences, int frames,
                                                 double fps, const SynthParams& sp = {}) {
  if (frames < 2) throw ShapeMismatch("synth_dataset: frames must be >= 2");
  auto topo = skeleton::default_topology();
  auto scheme = skeleton::default_partition(topo);
  const int J = topo.joints();
  std::vector<MotionSequence> out;
  out.reserve(size_t(n_sequences));
  for (int s = 0; s < n_sequences; ++s) {
    MotionSequence seq;
    seq.frames = frames;
    seq.joints = J;
    seq.fps = fps;
    seq.rotations.assign(size_t(frames) * size_t(J) * 3, 0.0f);
    seq.root_pos.assign(size_t(frames) * 3, 0.0f);
    for (auto& b : seq.beta) b = float(rng.uniform(-sp.beta_range, sp.beta_range));

    std::array<double, skeleton::kPartitions> part_freq, part_phase;
    for (int p = 0; p < skeleton::kPartitions; ++p) {
      part_freq[size_t(p)] = rng.uniform(sp.min_freq, sp.max_freq);
      part_phase[size_t(p)] = rng.uniform(0.0, 2.0 * M_PI);
    }
    struct JointOsc {
      Vec3 axis;
      double amp, phase, bias;
    };
    std::vector<JointOsc> osc(static_cast<size_t>(J));
    for (int j = 0; j < J; ++j) {
      Vec3 axis(rng.normal(), rng.normal(), rng.normal());
      if (axis.norm() < 1e-6) axis = Vec3(1, 0, 0);
      axis.normalize();
      osc[size_t(j)] = {axis, rng.uniform(0.3, 1.0) * sp.joint_amplitude,
                        part_phase[size_t(scheme.part_of[size_t(j)])] + rng.uniform(-0.6, 0.6),
                        rng.uniform(-sp.joint_bias, sp.joint_bias)};
    }
    double yaw_freq = rng.uniform(0.1, 0.3);
    double yaw_phase = rng.uniform(0.0, 2.0 * M_PI);

    Vec3 root(0, 0, sp.root_height);
    Vec3 vel(0, 0, 0);
    for (int t = 0; t < frames; ++t) {
      double time = double(t) / fps;
      // damped horizontal walk, bounded by the pull back toward the start
      vel.x() = 0.9 * vel.x() + 0.1 * sp.root_speed * rng.normal();
      vel.y() = 0.9 * vel.y() + 0.1 * sp.root_speed * rng.normal();
      root.x() = 0.999 * root.x() + vel.x() / fps;
      root.y() = 0.999 * root.y() + vel.y() / fps;
      root.z() = sp.root_height + 0.02 * std::sin(2.0 * M_PI * 0.5 * time);
      for (int c = 0; c < 3; ++c) seq.root_pos[size_t(t) * 3 + size_t(c)] = float(root[c]);
      for (int j = 0; j < J; ++j) {
        double f = part_freq[size_t(scheme.part_of[size_t(j)])];
        double ang = osc[size_t(j)].bias +
                     osc[size_t(j)].amp * std::sin(2.0 * M_PI * f * time + osc[size_t(j)].phase);
        Vec3 axis = osc[size_t(j)].axis;
        if (j == skeleton::kPelvis) {
          ang = sp.yaw_amplitude * std::sin(2.0 * M_PI * yaw_freq * time + yaw_phase);
          axis = Vec3(0, 0, 1);
        } else if (sp.arms != SynthParams::ArmStyle::kTpose &&
                   (j == skeleton::kLeftShoulder || j == skeleton::kRightShoulder ||
                    j == skeleton::kLeftElbow || j == skeleton::kRightElbow ||
                    j == skeleton::kLeftWrist || j == skeleton::kRightWrist)) {
          // posture bias rotates the arm about y; oscillation rides the
          // same axis so hands stay on the intended side of the head
          double side = (j == skeleton::kLeftShoulder || j == skeleton::kLeftElbow ||
                         j == skeleton::kLeftWrist)
                            ? 1.0
                            : -1.0;
          double updown = sp.arms == SynthParams::ArmStyle::kDown ? 1.0 : -1.0;
          double bias = (j == skeleton::kLeftShoulder || j == skeleton::kRightShoulder)
                            ? side * updown * M_PI / 2
                            : 0.0;
          ang = bias + 0.4 * osc[size_t(j)].amp *
                           std::sin(2.0 * M_PI * f * time + osc[size_t(j)].phase);
          axis = Vec3(0, 1, 0);
        }
        Vec3 v = axis * ang;
        for (int c = 0; c < 3; ++c)
          seq.rotations[(size_t(t) * size_t(J) + size_t(j)) * 3 + size_t(c)] = float(v[c]);
      }
    }
    out.push_back(std::move(seq));
  }
  return out;
}

// ---------------------------------------------------------------------
// Motion file I/O (container format, float32 payload)
// ---------------------------------------------------------------------

inline void save_motion_file(const MotionSequence& seq, const std::string& path) {
  seq.validate();
  nlohmann::json header;
  header["type"] = "motion";
  header["frames"] = seq.frames;
  header["joints"] = seq.joints;
  header["fps"] = seq.fps;
  io::ContainerWriter w(header);
  w.add_f32("rotations", seq.rotations.data(), {seq.frames, seq.joints, 3});
  w.add_f32("root_pos", seq.root_pos.data(), {seq.frames, 3});
  w.add_f32("beta", seq.beta.data(), {skeleton::kShapeCoeffs});
  w.write(path);
}

inline MotionSequence load_motion_file(const std::string& path) {
  io::Container c = io::read_container(path, "motion");
  MotionSequence seq;
  try {
    seq.frames = c.header.at("frames").get<int>();
    seq.joints = c.header.at("joints").get<int>();
    seq.fps = c.header.at("fps").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FileFormatError(std::string("motion: missing header field: ") + e.what());
  }
  seq.rotations = c.array<float>("rotations");
  seq.root_pos = c.array<float>("root_pos");
  auto beta = c.array<float>("beta");
  if (int(beta.size()) != skeleton::kShapeCoeffs)
    throw FileFormatError("motion: beta must have 16 coefficients");
  std::copy(beta.begin(), beta.end(), seq.beta.begin());
  seq.validate();
  return seq;
}

}  // namespace atomo::dataio
