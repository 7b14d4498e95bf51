#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "atomo/skeleton.hpp"

using namespace atomo;
using namespace atomo::skeleton;

TEST_CASE("default topology matches the standard joint tree", "[skeleton]") {
  auto topo = default_topology();
  REQUIRE(topo.joints() == 22);
  REQUIRE(topo.parent[kHead] == kNeck);
  REQUIRE(topo.parent[kLeftWrist] == kLeftElbow);
  REQUIRE(topo.parent[kLeftHip] == kPelvis);
  REQUIRE(topo.parent[kPelvis] == -1);

  // exactly 5 leaves: head, wrists, feet
  std::vector<int> child_count(22, 0);
  for (int j = 0; j < 22; ++j)
    if (topo.parent[size_t(j)] >= 0) child_count[size_t(topo.parent[size_t(j)])]++;
  std::vector<int> leaves;
  for (int j = 0; j < 22; ++j)
    if (child_count[size_t(j)] == 0) leaves.push_back(j);
  REQUIRE(leaves == std::vector<int>{kLeftFoot, kRightFoot, kHead, kLeftWrist, kRightWrist});

  // chain depths stay small
  for (int j = 0; j < 22; ++j) {
    int depth = 0;
    for (int p = j; p >= 0; p = topo.parent[size_t(p)]) ++depth;
    REQUIRE(depth <= 8);
  }
}

TEST_CASE("default partition", "[skeleton]") {
  auto topo = default_topology();
  auto scheme = default_partition(topo);
  REQUIRE(scheme.size_of(0) == 6);
  for (int p = 1; p < 5; ++p) REQUIRE(scheme.size_of(p) == 4);

  // torso holds both pelvis and head
  REQUIRE(std::find(scheme.groups[0].begin(), scheme.groups[0].end(), kPelvis) !=
          scheme.groups[0].end());
  REQUIRE(std::find(scheme.groups[0].begin(), scheme.groups[0].end(), kHead) !=
          scheme.groups[0].end());

  // left/right limb lists mirror index-by-index
  const char* sides[2][2] = {{"left_", "right_"}, {"left_", "right_"}};
  (void)sides;
  for (int pair = 0; pair < 2; ++pair) {
    const auto& l = scheme.groups[size_t(1 + 2 * pair)];
    const auto& r = scheme.groups[size_t(2 + 2 * pair)];
    for (size_t i = 0; i < l.size(); ++i) {
      std::string ln = topo.joint_names[size_t(l[i])];
      std::string rn = topo.joint_names[size_t(r[i])];
      REQUIRE(ln.substr(0, 5) == "left_");
      REQUIRE(rn.substr(0, 6) == "right_");
      REQUIRE(ln.substr(5) == rn.substr(6));
    }
  }

  // bijection onto the 22 joints
  std::vector<int> seen(22, 0);
  for (int p = 0; p < 5; ++p)
    for (int j : scheme.groups[size_t(p)]) seen[size_t(j)]++;
  for (int j = 0; j < 22; ++j) REQUIRE(seen[size_t(j)] == 1);
}

TEST_CASE("sensor configs", "[skeleton]") {
  auto hmd = sensor_config("hmd");
  REQUIRE(hmd.observed.size() == 3);
  REQUIRE(hmd.is_observed(kHead));
  REQUIRE(hmd.is_observed(kLeftWrist));
  REQUIRE(hmd.is_observed(kRightWrist));

  auto h1 = sensor_config("hmd1");
  REQUIRE(h1.observed.size() == 4);
  REQUIRE(h1.is_observed(kPelvis));

  auto h2 = sensor_config("hmd2");
  REQUIRE(h2.observed.size() == 5);
  REQUIRE(h2.is_observed(kLeftAnkle));
  REQUIRE(h2.is_observed(kRightAnkle));

  auto h3 = sensor_config("hmd3");
  REQUIRE(h3.observed.size() == 6);

  // nesting: HMD subset of HMD+1 subset of HMD+3
  for (int j : hmd.observed) {
    REQUIRE(h1.is_observed(j));
    REQUIRE(h3.is_observed(j));
  }
  for (int j : h1.observed) REQUIRE(h3.is_observed(j));

  REQUIRE_THROWS_AS(sensor_config("hmd9"), UnknownConfig);
}

TEST_CASE("fk zero pose accumulates rest offsets exactly", "[skeleton]") {
  auto topo = default_topology();
  auto basis = default_shape_basis(topo);
  std::vector<Vec3> rots(22, Vec3::Zero());
  std::vector<Vec3> root{Vec3::Zero()};
  auto fk = forward_kinematics(topo, basis, rots, root, {});
  for (int j = 0; j < 22; ++j) {
    // accumulate root-to-joint, the same association order as FK
    std::vector<int> chain;
    for (int p = j; p >= 0; p = topo.parent[size_t(p)]) chain.push_back(p);
    Vec3 expect = Vec3::Zero();
    for (auto it = chain.rbegin(); it != chain.rend(); ++it)
      expect += topo.rest_offsets[size_t(*it)];
    REQUIRE((fk.pos(0, j) - expect).norm() == 0.0);
  }
}

TEST_CASE("fk two-bone right angle", "[skeleton]") {
  SkeletonTopology topo;
  topo.parent = {-1, 0};
  topo.rest_offsets = {Vec3::Zero(), Vec3(1, 0, 0)};
  topo.joint_names = {"a", "b"};
  ShapeBasis basis;
  basis.mean_offsets = topo.rest_offsets;
  basis.delta.assign(kShapeCoeffs, std::vector<Vec3>(2, Vec3::Zero()));

  std::vector<Vec3> rots{Vec3(0, 0, M_PI / 2), Vec3::Zero()};
  std::vector<Vec3> root{Vec3::Zero()};
  auto fk = forward_kinematics(topo, basis, rots, root, {});
  REQUIRE((fk.pos(0, 1) - Vec3(0, 1, 0)).norm() < 1e-9);
}

TEST_CASE("fk root translation shifts everything", "[skeleton]") {
  auto topo = default_topology();
  auto basis = default_shape_basis(topo);
  Rng rng(4);
  std::vector<Vec3> rots(22);
  for (auto& r : rots) r = 0.3 * Vec3(rng.normal(), rng.normal(), rng.normal());
  Vec3 t(0.3, -0.2, 0.7);
  auto a = forward_kinematics(topo, basis, rots, std::vector<Vec3>{Vec3::Zero()}, {});
  auto b = forward_kinematics(topo, basis, rots, std::vector<Vec3>{t}, {});
  for (int j = 0; j < 22; ++j)
    REQUIRE((b.pos(0, j) - a.pos(0, j) - t).norm() < 1e-12);
}

TEST_CASE("fk equivariance under a global rotation", "[skeleton]") {
  auto topo = default_topology();
  auto basis = default_shape_basis(topo);
  Rng rng(15);
  std::vector<Vec3> rots(22);
  for (auto& r : rots) r = 0.4 * Vec3(rng.normal(), rng.normal(), rng.normal());
  std::vector<double> beta(16);
  for (auto& b : beta) b = rng.uniform(-1, 1);

  Vec3 q_axis = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
  Mat3 q = rotmath::axis_angle_to_matrix({q_axis * 0.9}).m;

  Vec3 root(0.2, 0.1, 0.9);
  auto plain = forward_kinematics(topo, basis, rots, std::vector<Vec3>{root}, beta);

  // rotate the root joint rotation and the root position by Q
  auto rots2 = rots;
  Mat3 root_rot = rotmath::axis_angle_to_matrix({rots[0]}).m;
  rots2[0] = rotmath::matrix_to_axis_angle({q * root_rot}).v;
  auto rotated = forward_kinematics(topo, basis, rots2, std::vector<Vec3>{q * root}, beta);
  for (int j = 0; j < 22; ++j)
    REQUIRE((rotated.pos(0, j) - q * plain.pos(0, j)).norm() < 1e-6);
}

TEST_CASE("fk depends on a joint only through its descendants", "[skeleton]") {
  auto topo = default_topology();
  auto basis = default_shape_basis(topo);
  Rng rng(8);
  std::vector<Vec3> rots(22);
  for (auto& r : rots) r = 0.3 * Vec3(rng.normal(), rng.normal(), rng.normal());
  auto base = forward_kinematics(topo, basis, rots, std::vector<Vec3>{Vec3::Zero()}, {});

  // perturbing a leaf rotation moves no joint positions at all
  auto rots2 = rots;
  rots2[kHead] += Vec3(0.5, -0.2, 0.1);
  rots2[kLeftWrist] += Vec3(0.1, 0.9, -0.3);
  auto moved = forward_kinematics(topo, basis, rots2, std::vector<Vec3>{Vec3::Zero()}, {});
  for (int j = 0; j < 22; ++j) REQUIRE((moved.pos(0, j) - base.pos(0, j)).norm() == 0.0);

  // perturbing the left elbow moves only the left wrist among positions
  auto rots3 = rots;
  rots3[kLeftElbow] += Vec3(0.4, 0, 0);
  auto elbow = forward_kinematics(topo, basis, rots3, std::vector<Vec3>{Vec3::Zero()}, {});
  for (int j = 0; j < 22; ++j) {
    double d = (elbow.pos(0, j) - base.pos(0, j)).norm();
    if (j == kLeftWrist)
      REQUIRE(d > 1e-6);
    else
      REQUIRE(d == 0.0);
  }
}

TEST_CASE("shape offsets are affine in beta", "[skeleton]") {
  auto topo = default_topology();
  auto basis = default_shape_basis(topo);
  Rng rng(21);
  std::vector<double> b1(16), b2(16), sum(16);
  for (int k = 0; k < 16; ++k) {
    b1[size_t(k)] = rng.uniform(-1, 1);
    b2[size_t(k)] = rng.uniform(-1, 1);
    sum[size_t(k)] = b1[size_t(k)] + b2[size_t(k)];
  }
  std::vector<double> zero(16, 0.0);
  for (int j = 0; j < 22; ++j) {
    Vec3 o0 = basis.offset(j, zero);
    REQUIRE((o0 - basis.mean_offsets[size_t(j)]).norm() == 0.0);
    Vec3 lhs = basis.offset(j, sum) - o0;
    Vec3 rhs = (basis.offset(j, b1) - o0) + (basis.offset(j, b2) - o0);
    REQUIRE((lhs - rhs).norm() < 1e-12);
  }
}

TEST_CASE("anchor to head", "[skeleton]") {
  auto topo = default_topology();
  auto basis = default_shape_basis(topo);
  std::vector<Vec3> rots(22, Vec3::Zero());
  auto fk = forward_kinematics(topo, basis, rots, std::vector<Vec3>{Vec3(0, 0, 1)}, {});

  std::vector<Vec3> head{fk.pos(0, kHead)};
  auto same = anchor_to_head(fk.positions, 22, head);
  for (int j = 0; j < 22; ++j) REQUIRE((same[size_t(j)] - fk.pos(0, j)).norm() == 0.0);

  std::vector<Vec3> shifted{fk.pos(0, kHead) + Vec3(0, 0, 0.1)};
  auto moved = anchor_to_head(fk.positions, 22, shifted);
  for (int j = 0; j < 22; ++j)
    REQUIRE((moved[size_t(j)] - fk.pos(0, j) - Vec3(0, 0, 0.1)).norm() < 1e-12);
}

TEST_CASE("skeleton file round trip", "[skeleton]") {
  auto topo = default_topology();
  auto basis = default_shape_basis(topo);
  auto dir = std::filesystem::temp_directory_path() / "atomo_skel_test";
  std::filesystem::create_directories(dir);
  std::string path = (dir / "skel.json").string();
  save_skeleton(topo, &basis, path);

  ShapeBasis basis2;
  auto topo2 = load_skeleton(path, &basis2);
  REQUIRE(topo2.parent == topo.parent);
  REQUIRE(topo2.joint_names == topo.joint_names);
  for (int j = 0; j < 22; ++j) {
    REQUIRE((topo2.rest_offsets[size_t(j)] - topo.rest_offsets[size_t(j)]).norm() < 1e-12);
    for (int k = 0; k < 16; ++k)
      REQUIRE((basis2.delta[size_t(k)][size_t(j)] - basis.delta[size_t(k)][size_t(j)]).norm() <
              1e-12);
  }

  std::string bad = (dir / "bad.json").string();
  {
    std::ofstream f(bad);
    f << "{\"format\": \"something-else\"}";
  }
  REQUIRE_THROWS_AS(load_skeleton(bad), FileFormatError);
}
