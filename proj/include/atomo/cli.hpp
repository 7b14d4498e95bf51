#pragma once

// Command-line entry points: gen-data, train, eval, infer, inspect.
// Every command is deterministic under --seed and emits a run manifest
// with checksums of the files it produced.
//
// Exit codes: 0 ok, 2 bad flags, 3 data error, 4 numeric failure.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "atomo/analysis.hpp"
#include "atomo/common.hpp"
#include "atomo/dataio.hpp"
#include "atomo/evalx.hpp"
#include "atomo/model.hpp"
#include "atomo/training.hpp"

namespace atomo::cli {

namespace fs = std::filesystem;

inline uint64_t file_checksum(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checksum: cannot open " + path);
  std::vector<char> buf(std::istreambuf_iterator<char>(f), {});
  return fnv1a64(buf.data(), buf.size());
}

class Manifest {
 public:
  Manifest(std::string command, nlohmann::json config, uint64_t seed)
      : started_(now()), command_(std::move(command)), config_(std::move(config)), seed_(seed) {}

  void add_output(const std::string& path) { outputs_.push_back(path); }

  void write(const std::string& path) const {
    nlohmann::json j;
    j["command"] = command_;
    j["config"] = config_;
    j["seed"] = seed_;
    j["started"] = started_;
    j["finished"] = now();
    auto& outs = j["outputs"] = nlohmann::json::array();
    for (const auto& p : outputs_) {
      char sum[32];
      std::snprintf(sum, sizeof sum, "%016llx",
                    static_cast<unsigned long long>(file_checksum(p)));
      outs.push_back({{"path", p}, {"fnv1a64", sum}});
    }
    std::ofstream f(path);
    if (!f) throw IoError("manifest: cannot open " + path);
    f << j.dump(1) << "\n";
  }

 private:
  static std::string now() {
    auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
  }

  std::string started_;
  std::string command_;
  nlohmann::json config_;
  uint64_t seed_;
  std::vector<std::string> outputs_;
};

inline void save_motion_json(const dataio::MotionSequence& seq, const std::string& path) {
  nlohmann::json j;
  j["type"] = "motion";
  j["frames"] = seq.frames;
  j["joints"] = seq.joints;
  j["fps"] = seq.fps;
  j["rotations"] = seq.rotations;
  j["root_pos"] = seq.root_pos;
  j["beta"] = std::vector<float>(seq.beta.begin(), seq.beta.end());
  std::ofstream f(path);
  if (!f) throw IoError("motion json: cannot open " + path);
  f << j.dump() << "\n";
}

inline std::vector<dataio::MotionSequence> load_dataset_dir(const std::string& dir) {
  std::vector<std::string> paths;
  if (!fs::is_directory(dir)) throw IoError("dataset: not a directory: " + dir);
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".atmo") paths.push_back(e.path().string());
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw FileFormatError("dataset: no .atmo files in " + dir);
  std::vector<dataio::MotionSequence> out;
  for (const auto& p : paths) out.push_back(dataio::load_motion_file(p));
  return out;
}

// ---------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------

struct GenDataArgs {
  int n = 64;
  int frames = 200;
  double fps = 60.0;
  uint64_t seed = 0;
  std::string out;
  std::string format = "atmo";
};

inline int cmd_gen_data(const GenDataArgs& a) {
  if (a.n <= 0) throw BadFlag("gen-data: --n must be positive");
  if (a.frames < 2) throw BadFlag("gen-data: --frames must be >= 2");
  fs::create_directories(a.out);
  Manifest man("gen-data",
               {{"n", a.n}, {"frames", a.frames}, {"fps", a.fps}, {"format", a.format}}, a.seed);
  Rng rng(a.seed);
  auto seqs = dataio::synth_dataset(rng, a.n, a.frames, a.fps);
  for (int i = 0; i < a.n; ++i) {
    char name[48];
    std::snprintf(name, sizeof name, "seq_%04d.%s", i, a.format == "json" ? "json" : "atmo");
    std::string path = a.out + "/" + name;
    if (a.format == "json")
      save_motion_json(seqs[size_t(i)], path);
    else
      dataio::save_motion_file(seqs[size_t(i)], path);
    man.add_output(path);
  }
  man.write(a.out + "/manifest.json");
  std::cout << "wrote " << a.n << " sequences to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string out;
  int window = 40;
  int blocks = 6;
  int embed = 256;
  int heads = 8;
  double dropout = 0.1;
  std::string curriculum = "decaying";
  int64_t curriculum_steps = 50000;
  int steps = 1000;
  int batch = 256;
  double lr = 1e-4;
  bool constant_lr = false;
  double weight_decay = 1e-4;
  int fk_frames = 30;
  uint64_t seed = 0;
  std::string sensors = "hmd";
};

inline int cmd_train(const TrainArgs& a) {
  fs::create_directories(a.out);
  model::ModelConfig mcfg;
  mcfg.blocks = a.blocks;
  mcfg.embed = a.embed;
  mcfg.heads = a.heads;
  mcfg.window = a.window;
  mcfg.dropout = a.dropout;
  training::TrainConfig tc;
  tc.batch = a.batch;
  tc.steps = a.steps;
  tc.lr = a.lr;
  tc.cosine_lr = !a.constant_lr;
  tc.weight_decay = a.weight_decay;
  tc.curriculum = a.curriculum == "continuous" ? dataio::CurriculumState::Mode::kContinuous
                                               : dataio::CurriculumState::Mode::kDecaying;
  tc.curriculum_steps = a.curriculum_steps;
  tc.fk_frames = a.fk_frames;
  tc.seed = a.seed;
  tc.sensors = a.sensors;

  Manifest man("train",
               {{"data", a.data},
                {"window", a.window},
                {"blocks", a.blocks},
                {"embed", a.embed},
                {"heads", a.heads},
                {"dropout", a.dropout},
                {"curriculum", a.curriculum},
                {"curriculum_steps", a.curriculum_steps},
                {"steps", a.steps},
                {"batch", a.batch},
                {"lr", a.lr},
                {"constant_lr", a.constant_lr},
                {"weight_decay", a.weight_decay},
                {"fk_frames", a.fk_frames},
                {"sensors", a.sensors}},
               a.seed);

  auto data = load_dataset_dir(a.data);
  auto result = training::train<float>(data, mcfg, tc);
  std::string ckpt = a.out + "/checkpoint.atmo";
  std::string log = a.out + "/loss.csv";
  model::save_checkpoint(result.params, ckpt);
  training::write_loss_log(result.log, log);
  man.add_output(ckpt);
  man.add_output(log);
  man.write(a.out + "/manifest.json");
  if (!result.log.empty())
    std::cout << "final loss " << result.log.back().total << " after " << a.steps << " steps\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string mode = "standard";
  std::string sensors = "hmd";
  std::string out;
  uint64_t seed = 0;
};

inline int cmd_eval(const EvalArgs& a) {
  fs::create_directories(a.out);
  Manifest man("eval", {{"ckpt", a.ckpt}, {"data", a.data}, {"mode", a.mode}, {"sensors", a.sensors}},
               a.seed);
  auto mp = model::load_checkpoint<float>(a.ckpt);
  auto data = load_dataset_dir(a.data);
  evalx::EvalContext<float> ctx;
  auto sensors = skeleton::sensor_config(a.sensors);
  evalx::Mode mode =
      a.mode == "handtracking" ? evalx::Mode::kHandTracking : evalx::Mode::kStandard;
  evalx::MetricReport rep = evalx::evaluate(mp, data, mode, sensors, ctx);
  std::vector<evalx::MetricReport> reports{rep};
  std::string csv = a.out + "/report.csv";
  evalx::write_report_csv(reports, csv);
  man.add_output(csv);
  man.write(a.out + "/manifest.json");
  std::cout << evalx::format_report_table(reports);
  return 0;
}

struct InferArgs {
  std::string ckpt;
  std::string input;
  std::string out;
  std::string sensors = "hmd";
  std::string mode = "standard";
  std::string format = "atmo";
  bool no_anchor = false;
};

inline int cmd_infer(const InferArgs& a) {
  Manifest man("infer",
               {{"ckpt", a.ckpt},
                {"input", a.input},
                {"sensors", a.sensors},
                {"mode", a.mode},
                {"anchor", !a.no_anchor},
                {"format", a.format}},
               0);
  auto mp = model::load_checkpoint<float>(a.ckpt);
  dataio::MotionSequence seq = dataio::load_motion_file(a.input);
  evalx::EvalContext<float> ctx;
  auto sensors = skeleton::sensor_config(a.sensors);

  auto raw = dataio::build_features<float>(seq, ctx.topo, ctx.basis);
  std::vector<std::array<uint8_t, 2>> vis;
  if (a.mode == "handtracking") vis = dataio::fov_visibility(raw);
  dataio::MaskVector mask;
  for (int j = 0; j < seq.joints; ++j) mask.m[size_t(j)] = uint8_t(sensors.is_observed(j));
  auto pred = evalx::sliding_window_infer<float>(evalx::model_infer_fn<float>(mp, ctx.scheme), raw,
                                                 mp.cfg.window, mask, sensors,
                                                 a.mode == "handtracking" ? &vis : nullptr);

  // reconstructed motion: predicted local rotations, head-anchored root
  dataio::MotionSequence out_seq;
  out_seq.frames = seq.frames;
  out_seq.joints = seq.joints;
  out_seq.fps = seq.fps;
  out_seq.rotations.assign(size_t(seq.frames) * size_t(seq.joints) * 3, 0.0f);
  out_seq.root_pos.assign(size_t(seq.frames) * 3, 0.0f);
  std::vector<Vec3> local_aa(static_cast<size_t>(seq.frames) * static_cast<size_t>(seq.joints));
  std::vector<double> beta_stream(static_cast<size_t>(seq.frames) * skeleton::kShapeCoeffs);
  Eigen::Matrix<double, 1, skeleton::kShapeCoeffs> beta_mean;
  beta_mean.setZero();
  for (int t = 0; t < seq.frames; ++t) {
    for (int j = 0; j < seq.joints; ++j) {
      rotmath::Rot6D r;
      for (int c = 0; c < 6; ++c) r.a[c] = double(pred.rot6d(t, j * 6 + c));
      Vec3 aa = rotmath::matrix_to_axis_angle(rotmath::rot6d_to_matrix(r)).v;
      local_aa[size_t(t) * size_t(seq.joints) + size_t(j)] = aa;
      for (int c = 0; c < 3; ++c)
        out_seq.rotations[(size_t(t) * size_t(seq.joints) + size_t(j)) * 3 + size_t(c)] =
            float(aa[c]);
    }
    for (int k = 0; k < skeleton::kShapeCoeffs; ++k) {
      beta_stream[size_t(t) * skeleton::kShapeCoeffs + size_t(k)] = double(pred.beta(t, k));
      beta_mean(0, k) += double(pred.beta(t, k));
    }
  }
  beta_mean /= double(seq.frames);
  for (int k = 0; k < skeleton::kShapeCoeffs; ++k) out_seq.beta[size_t(k)] = float(beta_mean(0, k));

  if (!a.no_anchor) {
    auto rots = seq.rotations_d();
    auto roots = seq.root_d();
    auto beta = seq.beta_d();
    auto gt_fk = skeleton::forward_kinematics(ctx.topo, ctx.basis, rots, roots, beta);
    std::vector<Vec3> zero_root(static_cast<size_t>(seq.frames), Vec3::Zero());
    auto pred_fk =
        skeleton::forward_kinematics(ctx.topo, ctx.basis, local_aa, zero_root, beta_stream);
    for (int t = 0; t < seq.frames; ++t) {
      Vec3 shift = gt_fk.pos(t, skeleton::kHead) - pred_fk.pos(t, skeleton::kHead);
      for (int c = 0; c < 3; ++c) out_seq.root_pos[size_t(t) * 3 + size_t(c)] = float(shift[c]);
    }
  }

  if (a.format == "json")
    save_motion_json(out_seq, a.out);
  else
    dataio::save_motion_file(out_seq, a.out);
  man.add_output(a.out);
  man.write(a.out + ".manifest.json");
  std::cout << "wrote " << a.out << "\n";
  return 0;
}

struct InspectArgs {
  std::string ckpt;
  std::string out;
  bool topo = false;
  bool magnitudes = false;
  bool per_layer = false;
  int probe = 32;
  uint64_t seed = 123;
};

inline int cmd_inspect(const InspectArgs& a) {
  if (!a.topo && !a.magnitudes)
    throw BadFlag("inspect: pass --topo and/or --magnitudes");
  fs::create_directories(a.out);
  Manifest man("inspect",
               {{"ckpt", a.ckpt},
                {"topo", a.topo},
                {"magnitudes", a.magnitudes},
                {"per_layer", a.per_layer},
                {"probe", a.probe}},
               a.seed);
  auto mp = model::load_checkpoint<float>(a.ckpt);
  if (a.topo) {
    auto stats = analysis::topo_stats(mp, a.per_layer);
    for (const auto& p : analysis::export_heatmaps(stats, a.out)) man.add_output(p);
  }
  if (a.magnitudes) {
    auto scheme = skeleton::default_partition(skeleton::default_topology());
    auto probe = analysis::make_probe_batch<float>(mp.cfg, a.probe, a.seed);
    auto mags = analysis::branch_magnitudes(mp, probe, scheme);
    for (const auto& p : analysis::export_magnitudes(mags, a.out)) man.add_output(p);
  }
  man.write(a.out + "/manifest.json");
  std::cout << "inspection artifacts in " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------

inline int dispatch(std::vector<std::string> args) {
  CLI::App app{"sparse-input full-body motion reconstruction"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic motion dataset");
  gen->add_option("--n", gd.n, "number of sequences");
  gen->add_option("--frames", gd.frames, "frames per sequence");
  gen->add_option("--fps", gd.fps, "frame rate");
  gen->add_option("--seed", gd.seed, "rng seed");
  gen->add_option("--out", gd.out, "output directory")->required();
  gen->add_option("--format", gd.format, "atmo|json")
      ->check(CLI::IsMember({"atmo", "json"}));

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--data", tr.data, "dataset directory")->required();
  train->add_option("--out", tr.out, "output directory")->required();
  train->add_option("--window", tr.window, "input window")->check(CLI::IsMember({40, 80}));
  train->add_option("--blocks", tr.blocks, "block count");
  train->add_option("--embed", tr.embed, "embedding dim");
  train->add_option("--heads", tr.heads, "attention heads");
  train->add_option("--dropout", tr.dropout, "dropout rate");
  train->add_option("--curriculum", tr.curriculum, "decaying|continuous")
      ->check(CLI::IsMember({"decaying", "continuous"}));
  train->add_option("--curriculum-steps", tr.curriculum_steps, "decay horizon");
  train->add_option("--steps", tr.steps, "training steps");
  train->add_option("--batch", tr.batch, "batch size");
  train->add_option("--lr", tr.lr, "learning rate");
  train->add_flag("--constant-lr", tr.constant_lr, "disable cosine decay");
  train->add_option("--weight-decay", tr.weight_decay, "decoupled weight decay");
  train->add_option("--fk-frames", tr.fk_frames, "frames carrying FK losses");
  train->add_option("--seed", tr.seed, "rng seed");
  train->add_option("--sensors", tr.sensors, "hmd|hmd1|hmd2|hmd3")
      ->check(CLI::IsMember({"hmd", "hmd1", "hmd2", "hmd3"}));

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--ckpt", ev.ckpt, "checkpoint file")->required();
  eval->add_option("--data", ev.data, "dataset directory")->required();
  eval->add_option("--mode", ev.mode, "standard|handtracking")
      ->check(CLI::IsMember({"standard", "handtracking"}));
  eval->add_option("--sensors", ev.sensors, "hmd|hmd1|hmd2|hmd3")
      ->check(CLI::IsMember({"hmd", "hmd1", "hmd2", "hmd3"}));
  eval->add_option("--out", ev.out, "output directory")->required();

  InferArgs in;
  auto* infer = app.add_subcommand("infer", "reconstruct full-body motion from sparse signals");
  infer->add_option("--ckpt", in.ckpt, "checkpoint file")->required();
  infer->add_option("--input", in.input, "input motion file")->required();
  infer->add_option("--out", in.out, "output motion file")->required();
  infer->add_option("--sensors", in.sensors, "hmd|hmd1|hmd2|hmd3")
      ->check(CLI::IsMember({"hmd", "hmd1", "hmd2", "hmd3"}));
  infer->add_option("--mode", in.mode, "standard|handtracking")
      ->check(CLI::IsMember({"standard", "handtracking"}));
  infer->add_option("--format", in.format, "atmo|json")->check(CLI::IsMember({"atmo", "json"}));
  infer->add_flag("--no-anchor", in.no_anchor, "skip head anchoring of the output root");

  InspectArgs ins;
  auto* inspect = app.add_subcommand("inspect", "export topology statistics and magnitudes");
  inspect->add_option("--ckpt", ins.ckpt, "checkpoint file")->required();
  inspect->add_option("--out", ins.out, "output directory")->required();
  inspect->add_flag("--topo", ins.topo, "topology tensor statistics");
  inspect->add_flag("--magnitudes", ins.magnitudes, "dual-branch feature magnitudes");
  inspect->add_flag("--per-layer", ins.per_layer, "keep per-block matrices");
  inspect->add_option("--probe", ins.probe, "probe batch size");
  inspect->add_option("--seed", ins.seed, "probe seed");

  try {
    std::vector<const char*> argv;
    argv.push_back("atomo");
    for (const auto& s : args) argv.push_back(s.c_str());
    app.parse(int(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gd);
    if (train->parsed()) return cmd_train(tr);
    if (eval->parsed()) return cmd_eval(ev);
    if (infer->parsed()) return cmd_infer(in);
    if (inspect->parsed()) return cmd_inspect(ins);
    return 2;
  } catch (const BadFlag& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NonFiniteError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace atomo::cli
