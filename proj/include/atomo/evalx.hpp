#pragma once

// The four evaluation metrics, the sliding-window inference protocol and
// the standard / hand-tracking / sensor-scalability evaluation harness.
//
// Predicted bodies have no global translation of their own: FK runs with
// the root at the origin and the result is rigidly anchored to the
// observed head position per frame.

#include <array>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "atomo/common.hpp"
#include "atomo/dataio.hpp"
#include "atomo/model.hpp"
#include "atomo/rotmath.hpp"
#include "atomo/skeleton.hpp"

namespace atomo::evalx {

struct MetricReport {
  std::string config;
  std::string mode;
  double mpjre = 0;  // degrees
  double mpjpe = 0;  // cm
  double mpjve = 0;  // cm/s
  double jitter = 0; // 1e2 m/s^3
};

// ---------------------------------------------------------------------
// Metric accumulator; sums in sequence/frame/joint order so reduction is
// reproducible.
// ---------------------------------------------------------------------

class MetricAccum {
 public:
  void add_rotations(std::span<const Mat3> pred, std::span<const Mat3> gt) {
    if (pred.size() != gt.size()) throw ShapeMismatch("mpjre: size mismatch");
    for (size_t i = 0; i < pred.size(); ++i) {
      rot_sum_ += rotmath::geodesic_angle({pred[i]}, {gt[i]});
      ++rot_n_;
    }
  }

  void add_positions(std::span<const Vec3> pred, std::span<const Vec3> gt, int frames,
                     int joints, double fps) {
    if (pred.size() != gt.size() || int(pred.size()) != frames * joints)
      throw ShapeMismatch("position metrics: size mismatch");
    auto at = [joints](std::span<const Vec3> s, int t, int j) -> const Vec3& {
      return s[size_t(t) * size_t(joints) + size_t(j)];
    };
    for (int t = 0; t < frames; ++t)
      for (int j = 0; j < joints; ++j) {
        pos_sum_ += (at(pred, t, j) - at(gt, t, j)).norm();
        ++pos_n_;
      }
    for (int t = 1; t < frames; ++t)
      for (int j = 0; j < joints; ++j) {
        Vec3 vp = (at(pred, t, j) - at(pred, t - 1, j)) * fps;
        Vec3 vg = (at(gt, t, j) - at(gt, t - 1, j)) * fps;
        vel_sum_ += (vp - vg).norm();
        ++vel_n_;
      }
    for (int t = 3; t < frames; ++t)
      for (int j = 0; j < joints; ++j) {
        Vec3 jerk = (at(pred, t, j) - 3.0 * at(pred, t - 1, j) + 3.0 * at(pred, t - 2, j) -
                     at(pred, t - 3, j)) *
                    (fps * fps * fps);
        jit_sum_ += jerk.norm();
        ++jit_n_;
      }
  }

  MetricReport report() const {
    MetricReport r;
    r.mpjre = rot_n_ ? rot_sum_ / double(rot_n_) * 180.0 / M_PI : 0.0;
    r.mpjpe = pos_n_ ? pos_sum_ / double(pos_n_) * 100.0 : 0.0;
    r.mpjve = vel_n_ ? vel_sum_ / double(vel_n_) * 100.0 : 0.0;
    r.jitter = jit_n_ ? jit_sum_ / double(jit_n_) * 1e-2 : 0.0;
    return r;
  }

 private:
  double rot_sum_ = 0, pos_sum_ = 0, vel_sum_ = 0, jit_sum_ = 0;
  int64_t rot_n_ = 0, pos_n_ = 0, vel_n_ = 0, jit_n_ = 0;
};

inline double mpjre(std::span<const Mat3> pred, std::span<const Mat3> gt) {
  MetricAccum a;
  a.add_rotations(pred, gt);
  return a.report().mpjre;
}

inline double mpjpe(std::span<const Vec3> pred, std::span<const Vec3> gt, int frames,
                    int joints) {
  MetricAccum a;
  a.add_positions(pred, gt, frames, joints, 1.0);
  return a.report().mpjpe;
}

inline double mpjve(std::span<const Vec3> pred, std::span<const Vec3> gt, int frames, int joints,
                    double fps) {
  MetricAccum a;
  a.add_positions(pred, gt, frames, joints, fps);
  return a.report().mpjve;
}

inline double jitter(std::span<const Vec3> pred, int frames, int joints, double fps) {
  MetricAccum a;
  a.add_positions(pred, pred, frames, joints, fps);
  return a.report().jitter;
}

// ---------------------------------------------------------------------
// Sliding-window inference
// ---------------------------------------------------------------------

// Predicted pose of one frame: local 6D rotations (J*6) and shape (16).
template <typename S>
struct FramePose {
  Eigen::Matrix<S, 1, Eigen::Dynamic> rot6d;
  Eigen::Matrix<S, 1, Eigen::Dynamic> beta;
};

// Callback receives the fully prepared window (normalized, FoV-zeroed,
// masked) plus the stream index of its last frame.
template <typename S>
using WindowInferFn = std::function<FramePose<S>(const dataio::FeatureTensor<S>&, int)>;

template <typename S>
struct PoseStream {
  int frames = 0;
  int joints = 0;
  Mat<S> rot6d;  // frames x (J*6)
  Mat<S> beta;   // frames x 16
};

// One output pose per stream frame; frames before window-1 use left-padded
// windows (first frame repeated).
template <typename S>
PoseStream<S> sliding_window_infer(const WindowInferFn<S>& fn,
                                   const dataio::FeatureTensor<S>& raw, int window,
                                   const dataio::MaskVector& mask,
                                   const skeleton::SensorConfig& sensors,
                                   const std::vector<std::array<uint8_t, 2>>* visibility) {
  if (raw.frames < window) throw ShapeMismatch("sliding_window_infer: stream shorter than window");
  PoseStream<S> out;
  out.frames = raw.frames;
  out.joints = raw.joints;
  out.rot6d.resize(raw.frames, raw.joints * 6);
  out.beta.resize(raw.frames, skeleton::kShapeCoeffs);
  parallel_chunks(raw.frames, [&](int64_t b, int64_t e) {
    for (int64_t t = b; t < e; ++t) {
      dataio::FeatureTensor<S> win = dataio::slice_window(raw, int(t), window);
      dataio::normalize_inplace(win);
      if (visibility) {
        std::vector<std::array<uint8_t, 2>> vis(static_cast<size_t>(window));
        for (int i = 0; i < window; ++i)
          vis[size_t(i)] = (*visibility)[size_t(std::max<int>(int(t) - window + 1 + i, 0))];
        dataio::zero_invisible_wrists(win, vis);
      }
      win = dataio::apply_mask(std::move(win), mask, sensors);
      FramePose<S> fp = fn(win, int(t));
      out.rot6d.row(int(t)) = fp.rot6d;
      out.beta.row(int(t)) = fp.beta;
    }
  });
  return out;
}

template <typename S>
WindowInferFn<S> model_infer_fn(const model::ModelParams<S>& mp,
                                const skeleton::PartitionScheme& scheme) {
  return [&mp, &scheme](const dataio::FeatureTensor<S>& win, int) -> FramePose<S> {
    model::PoseEstimate<S> pe = model::infer(mp, win, scheme);
    return {pe.rot6d.row(pe.rot6d.rows() - 1), pe.beta.row(pe.beta.rows() - 1)};
  };
}

// ---------------------------------------------------------------------
// Full evaluation over a dataset
// ---------------------------------------------------------------------

enum class Mode { kStandard, kHandTracking };

inline const char* mode_name(Mode m) {
  return m == Mode::kStandard ? "standard" : "handtracking";
}

template <typename S>
struct EvalContext {
  skeleton::SkeletonTopology topo = skeleton::default_topology();
  skeleton::ShapeBasis basis;
  skeleton::PartitionScheme scheme;
  double fov_degrees = 120.0;

  EvalContext()
      : basis(skeleton::default_shape_basis(topo)), scheme(skeleton::default_partition(topo)) {}
};

template <typename S>
MetricReport evaluate(const WindowInferFn<S>& fn, const std::vector<dataio::MotionSequence>& data,
                      Mode mode, const skeleton::SensorConfig& sensors, int window,
                      const EvalContext<S>& ctx) {
  if (data.empty()) throw ShapeMismatch("evaluate: empty dataset");
  MetricAccum acc;
  for (const auto& seq : data) {
    const int T = seq.frames;
    const int J = seq.joints;
    auto rots = seq.rotations_d();
    auto roots = seq.root_d();
    auto beta = seq.beta_d();
    skeleton::FkSequence gt_fk = skeleton::forward_kinematics(ctx.topo, ctx.basis, rots, roots, beta);

    dataio::FeatureTensor<S> raw = dataio::build_features<S>(seq, ctx.topo, ctx.basis);
    std::vector<std::array<uint8_t, 2>> vis;
    if (mode == Mode::kHandTracking) vis = dataio::fov_visibility(raw, ctx.fov_degrees);
    dataio::MaskVector mask;  // pure sparse input: anchors only
    for (int j = 0; j < J; ++j) mask.m[size_t(j)] = uint8_t(sensors.is_observed(j));

    PoseStream<S> pred = sliding_window_infer<S>(fn, raw, window, mask, sensors,
                                                 mode == Mode::kHandTracking ? &vis : nullptr);

    // local rotation matrices (pred through Gram-Schmidt) and positions
    std::vector<Mat3> pred_rot(static_cast<size_t>(T) * static_cast<size_t>(J)), gt_rot(static_cast<size_t>(T) * static_cast<size_t>(J));
    std::vector<Vec3> pred_local_aa(static_cast<size_t>(T) * static_cast<size_t>(J));
    for (int t = 0; t < T; ++t)
      for (int j = 0; j < J; ++j) {
        rotmath::Rot6D r;
        for (int c = 0; c < 6; ++c) r.a[c] = double(pred.rot6d(t, j * 6 + c));
        Mat3 m = rotmath::rot6d_to_matrix(r).m;
        pred_rot[size_t(t) * size_t(J) + size_t(j)] = m;
        pred_local_aa[size_t(t) * size_t(J) + size_t(j)] =
            rotmath::matrix_to_axis_angle({m}).v;
        gt_rot[size_t(t) * size_t(J) + size_t(j)] =
            rotmath::axis_angle_to_matrix({rots[size_t(t) * size_t(J) + size_t(j)]}).m;
      }
    std::vector<double> pred_beta(static_cast<size_t>(T) * skeleton::kShapeCoeffs);
    for (int t = 0; t < T; ++t)
      for (int k = 0; k < skeleton::kShapeCoeffs; ++k)
        pred_beta[size_t(t) * skeleton::kShapeCoeffs + size_t(k)] = double(pred.beta(t, k));

    std::vector<Vec3> zero_root(static_cast<size_t>(T), Vec3::Zero());
    skeleton::FkSequence pred_fk =
        skeleton::forward_kinematics(ctx.topo, ctx.basis, pred_local_aa, zero_root, pred_beta);
    std::vector<Vec3> observed_head(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) observed_head[size_t(t)] = gt_fk.pos(t, skeleton::kHead);
    std::vector<Vec3> pred_pos =
        skeleton::anchor_to_head(pred_fk.positions, J, observed_head);

    acc.add_rotations(pred_rot, gt_rot);
    acc.add_positions(pred_pos, gt_fk.positions, T, J, seq.fps);
  }
  MetricReport r = acc.report();
  r.config = sensors.label;
  r.mode = mode_name(mode);
  return r;
}

template <typename S = float>
MetricReport evaluate(const model::ModelParams<S>& mp,
                      const std::vector<dataio::MotionSequence>& data, Mode mode,
                      const skeleton::SensorConfig& sensors, const EvalContext<S>& ctx) {
  return evaluate<S>(model_infer_fn<S>(mp, ctx.scheme), data, mode, sensors, mp.cfg.window, ctx);
}

// ---------------------------------------------------------------------
// Report output
// ---------------------------------------------------------------------

inline void write_report_csv(const std::vector<MetricReport>& reports, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("report: cannot open " + path);
  f << "config,mode,MPJRE,MPJPE,MPJVE,Jitter\n";
  char buf[256];
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.9g,%.9g,%.9g,%.9g\n", r.config.c_str(),
                  r.mode.c_str(), r.mpjre, r.mpjpe, r.mpjve, r.jitter);
    f << buf;
  }
}

inline std::string format_report_table(const std::vector<MetricReport>& reports) {
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof buf, "%-8s %-13s %10s %10s %10s %10s\n", "config", "mode",
                "MPJRE", "MPJPE", "MPJVE", "Jitter");
  out += buf;
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%-8s %-13s %10.4f %10.4f %10.4f %10.4f\n",
                  r.config.c_str(), r.mode.c_str(), r.mpjre, r.mpjpe, r.mpjve, r.jitter);
    out += buf;
  }
  return out;
}

}  // namespace atomo::evalx
