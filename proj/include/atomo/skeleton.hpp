#pragma once

// The 22-joint kinematic tree, its five-cluster partition, forward
// kinematics, and a linear bone-length shape basis. Topology, basis and
// partition are immutable after construction; FK is pure.

#include <algorithm>
#include <array>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "atomo/common.hpp"
#include "atomo/rotmath.hpp"

namespace atomo::skeleton {

inline constexpr int kJoints = 22;
inline constexpr int kShapeCoeffs = 16;
inline constexpr int kPartitions = 5;

// Canonical joint indices of the 22-joint body tree.
enum JointId : int {
  kPelvis = 0,
  kLeftHip = 1,
  kRightHip = 2,
  kSpine1 = 3,
  kLeftKnee = 4,
  kRightKnee = 5,
  kSpine2 = 6,
  kLeftAnkle = 7,
  kRightAnkle = 8,
  kSpine3 = 9,
  kLeftFoot = 10,
  kRightFoot = 11,
  kNeck = 12,
  kLeftCollar = 13,
  kRightCollar = 14,
  kHead = 15,
  kLeftShoulder = 16,
  kRightShoulder = 17,
  kLeftElbow = 18,
  kRightElbow = 19,
  kLeftWrist = 20,
  kRightWrist = 21,
};

struct SkeletonTopology {
  std::vector<int> parent;                 // parent[root] = -1, parent[j] < j
  std::vector<Vec3> rest_offsets;          // bone vector in the parent frame, meters
  std::vector<std::string> joint_names;

  int joints() const { return int(parent.size()); }

  void validate() const {
    if (parent.empty() || parent.size() != rest_offsets.size())
      throw ShapeMismatch("topology: parent/offset size mismatch");
    int roots = 0;
    for (int j = 0; j < joints(); ++j) {
      if (parent[size_t(j)] < 0) {
        ++roots;
      } else if (parent[size_t(j)] >= j) {
        throw ShapeMismatch("topology: parents must precede children");
      }
      if (!rest_offsets[size_t(j)].allFinite())
        throw ShapeMismatch("topology: non-finite rest offset");
    }
    if (roots != 1) throw ShapeMismatch("topology: exactly one root required");
  }
};

// Five functional clusters: torso(6), left/right arm(4), left/right leg(4).
struct PartitionScheme {
  std::array<std::vector<int>, kPartitions> groups;
  std::vector<int> order;      // concatenation of groups, length = joints
  std::vector<int> inv_order;  // joint index -> slot in `order`
  std::vector<int> part_of;    // joint index -> partition index (0-based)

  int size_of(int p) const { return int(groups[size_t(p)].size()); }

  void finalize(int joints) {
    order.clear();
    part_of.assign(size_t(joints), -1);
    for (int p = 0; p < kPartitions; ++p) {
      for (int j : groups[size_t(p)]) {
        order.push_back(j);
        part_of[size_t(j)] = p;
      }
    }
    if (int(order.size()) != joints)
      throw ShapeMismatch("partition: joint lists must cover every joint once");
    inv_order.assign(size_t(joints), -1);
    for (int s = 0; s < joints; ++s) inv_order[size_t(order[size_t(s)])] = s;
    for (int j = 0; j < joints; ++j)
      if (part_of[size_t(j)] < 0)
        throw ShapeMismatch("partition: joint missing from all groups");
  }
};

// Linear bone-offset shape basis: offset(j, beta) = mean[j] + sum_k beta_k * delta[k][j].
struct ShapeBasis {
  std::vector<Vec3> mean_offsets;                 // [joints]
  std::vector<std::vector<Vec3>> delta;           // [kShapeCoeffs][joints]

  int joints() const { return int(mean_offsets.size()); }

  Vec3 offset(int j, std::span<const double> beta) const {
    Vec3 o = mean_offsets[size_t(j)];
    int k = int(std::min(beta.size(), delta.size()));
    for (int i = 0; i < k; ++i) o += beta[size_t(i)] * delta[size_t(i)][size_t(j)];
    return o;
  }
};

struct SensorConfig {
  std::string label;
  std::vector<int> observed;  // sorted joint indices, always includes HMD anchors

  bool is_observed(int j) const {
    for (int o : observed)
      if (o == j) return true;
    return false;
  }
};

// ---------------------------------------------------------------------
// Default builders
// ---------------------------------------------------------------------

inline SkeletonTopology default_topology() {
  SkeletonTopology t;
  t.parent = {-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19};
  t.joint_names = {"pelvis",     "left_hip",      "right_hip",      "spine1",
                   "left_knee",  "right_knee",    "spine2",         "left_ankle",
                   "right_ankle","spine3",        "left_foot",      "right_foot",
                   "neck",       "left_collar",   "right_collar",   "head",
                   "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
                   "left_wrist", "right_wrist"};
  // z is up, y is forward, x is the subject's left. Arms rest in T-pose.
  t.rest_offsets.assign(kJoints, Vec3::Zero());
  t.rest_offsets[kLeftHip] = {0.09, 0.0, -0.06};
  t.rest_offsets[kRightHip] = {-0.09, 0.0, -0.06};
  t.rest_offsets[kSpine1] = {0.0, 0.0, 0.11};
  t.rest_offsets[kLeftKnee] = {0.0, 0.0, -0.40};
  t.rest_offsets[kRightKnee] = {0.0, 0.0, -0.40};
  t.rest_offsets[kSpine2] = {0.0, 0.0, 0.12};
  t.rest_offsets[kLeftAnkle] = {0.0, 0.0, -0.42};
  t.rest_offsets[kRightAnkle] = {0.0, 0.0, -0.42};
  t.rest_offsets[kSpine3] = {0.0, 0.0, 0.13};
  t.rest_offsets[kLeftFoot] = {0.0, 0.13, -0.06};
  t.rest_offsets[kRightFoot] = {0.0, 0.13, -0.06};
  t.rest_offsets[kNeck] = {0.0, 0.0, 0.14};
  t.rest_offsets[kLeftCollar] = {0.08, 0.0, 0.04};
  t.rest_offsets[kRightCollar] = {-0.08, 0.0, 0.04};
  t.rest_offsets[kHead] = {0.0, 0.0, 0.10};
  t.rest_offsets[kLeftShoulder] = {0.10, 0.0, 0.02};
  t.rest_offsets[kRightShoulder] = {-0.10, 0.0, 0.02};
  t.rest_offsets[kLeftElbow] = {0.26, 0.0, 0.0};
  t.rest_offsets[kRightElbow] = {-0.26, 0.0, 0.0};
  t.rest_offsets[kLeftWrist] = {0.25, 0.0, 0.0};
  t.rest_offsets[kRightWrist] = {-0.25, 0.0, 0.0};
  t.validate();
  return t;
}

inline PartitionScheme default_partition(const SkeletonTopology& topo) {
  topo.validate();
  if (topo.joints() != kJoints)
    throw ShapeMismatch("default_partition: expects the 22-joint tree");
  PartitionScheme s;
  s.groups[0] = {kPelvis, kSpine1, kSpine2, kSpine3, kNeck, kHead};
  s.groups[1] = {kLeftCollar, kLeftShoulder, kLeftElbow, kLeftWrist};
  s.groups[2] = {kRightCollar, kRightShoulder, kRightElbow, kRightWrist};
  s.groups[3] = {kLeftHip, kLeftKnee, kLeftAnkle, kLeftFoot};
  s.groups[4] = {kRightHip, kRightKnee, kRightAnkle, kRightFoot};
  s.finalize(topo.joints());
  return s;
}

// First 4 coefficients scale body, arm, leg and spine bone lengths; the
// remaining 12 are null (soft-tissue directions are out of scope).
inline ShapeBasis default_shape_basis(const SkeletonTopology& topo) {
  ShapeBasis b;
  b.mean_offsets = topo.rest_offsets;
  b.delta.assign(kShapeCoeffs, std::vector<Vec3>(size_t(topo.joints()), Vec3::Zero()));
  auto scale_group = [&](int k, const std::vector<int>& js, double f) {
    for (int j : js) b.delta[size_t(k)][size_t(j)] = f * topo.rest_offsets[size_t(j)];
  };
  std::vector<int> all(static_cast<size_t>(topo.joints()));
  for (int j = 0; j < topo.joints(); ++j) all[size_t(j)] = j;
  scale_group(0, all, 0.06);
  scale_group(1, {kLeftCollar, kLeftShoulder, kLeftElbow, kLeftWrist,
                  kRightCollar, kRightShoulder, kRightElbow, kRightWrist}, 0.10);
  scale_group(2, {kLeftHip, kLeftKnee, kLeftAnkle, kLeftFoot,
                  kRightHip, kRightKnee, kRightAnkle, kRightFoot}, 0.10);
  scale_group(3, {kSpine1, kSpine2, kSpine3, kNeck, kHead}, 0.08);
  return b;
}

inline SensorConfig sensor_config(std::string_view label) {
  SensorConfig c;
  c.observed = {kHead, kLeftWrist, kRightWrist};
  if (label == "hmd" || label == "HMD") {
    c.label = "HMD";
  } else if (label == "hmd1" || label == "HMD+1") {
    c.label = "HMD+1";
    c.observed.push_back(kPelvis);
  } else if (label == "hmd2" || label == "HMD+2") {
    c.label = "HMD+2";
    c.observed.push_back(kLeftAnkle);
    c.observed.push_back(kRightAnkle);
  } else if (label == "hmd3" || label == "HMD+3") {
    c.label = "HMD+3";
    c.observed.push_back(kPelvis);
    c.observed.push_back(kLeftAnkle);
    c.observed.push_back(kRightAnkle);
  } else {
    throw UnknownConfig("sensor_config: unknown label '" + std::string(label) + "'");
  }
  std::sort(c.observed.begin(), c.observed.end());
  return c;
}

// ---------------------------------------------------------------------
// Forward kinematics
// ---------------------------------------------------------------------

struct FkFrame {
  std::vector<Vec3> positions;   // [joints], meters
  std::vector<Mat3> global_rot;  // [joints]
};

// One frame. rotations are per-joint local axis-angle; beta may be empty
// (treated as zero).
inline FkFrame fk_frame(const SkeletonTopology& topo, const ShapeBasis& basis,
                        std::span<const Vec3> rotations, const Vec3& root_pos,
                        std::span<const double> beta) {
  const int J = topo.joints();
  FkFrame out;
  out.positions.resize(size_t(J));
  out.global_rot.resize(size_t(J));
  for (int j = 0; j < J; ++j) {
    Mat3 local = rotmath::axis_angle_to_matrix({rotations[size_t(j)]}).m;
    int p = topo.parent[size_t(j)];
    if (p < 0) {
      out.global_rot[size_t(j)] = local;
      out.positions[size_t(j)] = root_pos;
    } else {
      out.global_rot[size_t(j)] = out.global_rot[size_t(p)] * local;
      out.positions[size_t(j)] =
          out.positions[size_t(p)] + out.global_rot[size_t(p)] * basis.offset(j, beta);
    }
  }
  return out;
}

struct FkSequence {
  int frames = 0;
  int joints = 0;
  std::vector<Vec3> positions;   // frames * joints
  std::vector<Mat3> global_rot;  // frames * joints

  const Vec3& pos(int t, int j) const { return positions[size_t(t) * size_t(joints) + size_t(j)]; }
  const Mat3& rot(int t, int j) const { return global_rot[size_t(t) * size_t(joints) + size_t(j)]; }
};

inline FkSequence forward_kinematics(const SkeletonTopology& topo, const ShapeBasis& basis,
                                     std::span<const Vec3> rotations,  // T*J local axis-angle
                                     std::span<const Vec3> root_pos,   // T
                                     std::span<const double> beta) {   // 16 (constant) or T*16
  const int J = topo.joints();
  const int T = int(root_pos.size());
  if (int(rotations.size()) != T * J)
    throw ShapeMismatch("forward_kinematics: rotation count != T*J");
  const bool per_frame_beta = int(beta.size()) == T * kShapeCoeffs;
  FkSequence out;
  out.frames = T;
  out.joints = J;
  out.positions.resize(size_t(T) * size_t(J));
  out.global_rot.resize(size_t(T) * size_t(J));
  for (int t = 0; t < T; ++t) {
    std::span<const double> bt =
        beta.empty() ? beta
                     : (per_frame_beta ? beta.subspan(size_t(t) * kShapeCoeffs, kShapeCoeffs) : beta);
    FkFrame f = fk_frame(topo, basis, rotations.subspan(size_t(t) * size_t(J), size_t(J)),
                         root_pos[size_t(t)], bt);
    std::copy(f.positions.begin(), f.positions.end(),
              out.positions.begin() + size_t(t) * size_t(J));
    std::copy(f.global_rot.begin(), f.global_rot.end(),
              out.global_rot.begin() + size_t(t) * size_t(J));
  }
  return out;
}

// Rigid per-frame translation making the head joint match the observed head.
inline std::vector<Vec3> anchor_to_head(std::span<const Vec3> positions, int joints,
                                        std::span<const Vec3> observed_head,
                                        int head_joint = kHead) {
  const int T = int(observed_head.size());
  if (int(positions.size()) != T * joints)
    throw ShapeMismatch("anchor_to_head: position count != T*joints");
  std::vector<Vec3> out(positions.begin(), positions.end());
  for (int t = 0; t < T; ++t) {
    Vec3 shift = observed_head[size_t(t)] - positions[size_t(t) * size_t(joints) + size_t(head_joint)];
    for (int j = 0; j < joints; ++j) out[size_t(t) * size_t(joints) + size_t(j)] += shift;
  }
  return out;
}

// ---------------------------------------------------------------------
// Skeleton file: versioned JSON with parent / offsets / names and an
// optional shape basis.
// ---------------------------------------------------------------------

inline void save_skeleton(const SkeletonTopology& topo, const ShapeBasis* basis,
                          const std::string& path) {
  nlohmann::json j;
  j["format"] = "atomo-skeleton";
  j["version"] = 1;
  j["parent"] = topo.parent;
  j["names"] = topo.joint_names;
  auto& offs = j["offsets"] = nlohmann::json::array();
  for (const Vec3& o : topo.rest_offsets) offs.push_back({o.x(), o.y(), o.z()});
  if (basis) {
    auto& sb = j["shape_basis"] = nlohmann::json::array();
    for (const auto& coeff : basis->delta) {
      nlohmann::json row = nlohmann::json::array();
      for (const Vec3& o : coeff) row.push_back({o.x(), o.y(), o.z()});
      sb.push_back(row);
    }
  }
  std::ofstream f(path);
  if (!f) throw IoError("save_skeleton: cannot open " + path);
  f << j.dump(1) << "\n";
}

inline SkeletonTopology load_skeleton(const std::string& path, ShapeBasis* basis_out = nullptr) {
  std::ifstream f(path);
  if (!f) throw IoError("load_skeleton: cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FileFormatError(std::string("load_skeleton: bad JSON: ") + e.what());
  }
  if (!j.contains("format") || j["format"] != "atomo-skeleton")
    throw FileFormatError("load_skeleton: not an atomo-skeleton file");
  SkeletonTopology t;
  try {
    t.parent = j.at("parent").get<std::vector<int>>();
    t.joint_names = j.at("names").get<std::vector<std::string>>();
    for (const auto& o : j.at("offsets"))
      t.rest_offsets.emplace_back(o.at(0).get<double>(), o.at(1).get<double>(),
                                  o.at(2).get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw FileFormatError(std::string("load_skeleton: missing field: ") + e.what());
  }
  t.validate();
  if (basis_out) {
    *basis_out = default_shape_basis(t);
    if (j.contains("shape_basis")) {
      basis_out->delta.clear();
      for (const auto& row : j["shape_basis"]) {
        std::vector<Vec3> coeff;
        for (const auto& o : row)
          coeff.emplace_back(o.at(0).get<double>(), o.at(1).get<double>(), o.at(2).get<double>());
        if (int(coeff.size()) != t.joints())
          throw FileFormatError("load_skeleton: shape basis row size mismatch");
        basis_out->delta.push_back(std::move(coeff));
      }
      if (int(basis_out->delta.size()) != kShapeCoeffs)
        throw FileFormatError("load_skeleton: shape basis must have 16 coefficients");
    }
  }
  return t;
}

}  // namespace atomo::skeleton
