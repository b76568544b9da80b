#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "kslam/pipeline.h"
#include "kslam/place_recognition.h"
#include "kslam/simulator.h"
#include "kslam/trajectory.h"
#include "kslam/vocabulary.h"
#include "kslam/world_map.h"

namespace {

using namespace kslam;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << bytes;
  if (!out) throw std::runtime_error("write failed for " + path);
}

/// Evenly strided descriptor sample across all observations, capped so
/// vocabulary training stays fast on long sequences.
std::vector<Descriptor> sample_descriptors(const SimulatedSequence& seq, size_t cap) {
  size_t total = 0;
  for (const Frame& f : seq.frames) total += f.observations.size();
  const size_t stride = std::max<size_t>(1, total / std::max<size_t>(cap, 1));
  std::vector<Descriptor> out;
  size_t i = 0;
  for (const Frame& f : seq.frames) {
    for (const Observation& ob : f.observations) {
      if (i++ % stride == 0) out.push_back(ob.descriptor);
    }
  }
  return out;
}

Vocabulary train_vocabulary(const SimulatedSequence& seq) {
  return build_vocabulary(sample_descriptors(seq, 20000), 10, 3, 1);
}

int cmd_simulate(const std::string& config_path, const std::string& out_dir) {
  const WorldConfig config = world_config_from_json(read_file(config_path));
  const SimulatedSequence seq = generate_sequence(config);
  save_sequence(out_dir, seq);
  std::cout << "wrote " << seq.frames.size() << " frames to " << out_dir << "\n";
  return 0;
}

int cmd_run(const std::string& seq_dir, const std::string& mode_name,
            const std::string& map_path, bool deterministic, bool no_loop,
            const std::string& out_dir) {
  const SimulatedSequence seq = load_sequence(seq_dir);

  PipelineConfig config;
  config.K = seq.config.K;
  config.enable_loop_closing = !no_loop;
  const RunMode mode =
      mode_name == "localization" ? RunMode::LocalizationOnly : RunMode::Mapping;

  // A loaded map carries its own vocabulary, so training is only needed for
  // runs that start from scratch.
  Vocabulary vocab;
  if (map_path.empty()) vocab = train_vocabulary(seq);

  System system(config, std::move(vocab), mode, deterministic);
  if (!map_path.empty()) system.load_map(deserialize_map(read_file(map_path)));

  int ok = 0;
  int lost = 0;
  for (const Frame& frame : seq.frames) {
    const FrameRecord record = system.process_frame(frame);
    if (record.status == TrackStatus::Ok) ++ok;
    if (record.status == TrackStatus::Lost) ++lost;
  }
  system.finish();

  std::filesystem::create_directories(out_dir);
  const std::filesystem::path out(out_dir);
  write_tum((out / "keyframe_trajectory.txt").string(), system.keyframe_trajectory());
  write_tum((out / "frame_trajectory.txt").string(), system.frame_trajectory());
  write_kitti((out / "frame_trajectory_kitti.txt").string(), system.frame_trajectory());
  write_file((out / "map.txt").string(), system.serialize_map_bytes());

  std::ostringstream log;
  for (const LogEntry& entry : system.log()) {
    char line[160];
    std::snprintf(line, sizeof(line), "%.6f %s %.3f %lld\n", entry.timestamp,
                  entry.task.c_str(), entry.ms,
                  static_cast<long long>(entry.value));
    log << line;
  }
  write_file((out / "run_log.txt").string(), log.str());

  const FullBaStats stats = system.full_ba_stats();
  std::cout << "frames " << seq.frames.size() << " ok " << ok << " lost " << lost
            << " keyframes " << system.keyframe_trajectory().size() << "\n"
            << "full_ba launches " << stats.launches << " aborts " << stats.aborts
            << " merges " << stats.merges << "\n";
  return 0;
}

Trajectory read_trajectory(const std::string& path, const std::string& format) {
  return format == "kitti" ? read_kitti(path) : read_tum(path);
}

int cmd_evaluate(const std::string& est_path, const std::string& gt_path,
                 const std::string& format, bool no_align) {
  const Trajectory est = read_trajectory(est_path, format);
  const Trajectory gt = read_trajectory(gt_path, format);

  MetricReport report;
  report.t_abs = ate_rmse(est, gt, !no_align);
  report.t_rel = std::nan("");
  report.r_rel = std::nan("");
  try {
    const RelErrors rel = kitti_rel_errors(est, gt);
    if (rel.samples > 0) {
      report.t_rel = rel.t_rel;
      report.r_rel = rel.r_rel;
    }
  } catch (const std::runtime_error&) {
    // Path shorter than the smallest KITTI length; t_abs alone is reported.
  }

  char buf[160];
  std::snprintf(buf, sizeof(buf), "t_abs %.9g m\nt_rel %.9g %%\nr_rel %.9g deg/100m\n",
                report.t_abs, report.t_rel, report.r_rel);
  std::cout << buf;
  return 0;
}

int cmd_plot_data(const std::string& est_path, const std::string& gt_path,
                  const std::string& out_path) {
  const Trajectory est = read_tum(est_path);
  const Trajectory gt = read_tum(gt_path);

  // Associate by nearest timestamp, same tolerance as the metrics.
  std::vector<std::pair<StampedPose, StampedPose>> pairs;
  size_t j = 0;
  for (const StampedPose& e : est) {
    while (j + 1 < gt.size() &&
           std::abs(gt[j + 1].timestamp - e.timestamp) <=
               std::abs(gt[j].timestamp - e.timestamp)) {
      ++j;
    }
    if (!gt.empty() && std::abs(gt[j].timestamp - e.timestamp) <= kAssociationTolerance) {
      pairs.push_back({e, gt[j]});
    }
  }
  if (pairs.size() < 3) throw std::runtime_error("fewer than 3 associated pose pairs");

  std::vector<Eigen::Vector3d> src;
  std::vector<Eigen::Vector3d> dst;
  for (const auto& [e, g] : pairs) {
    src.push_back(e.pose.translation());
    dst.push_back(g.pose.translation());
  }
  const Pose align = horn_align(src, dst);

  std::ostringstream csv;
  csv << "timestamp,est_x,est_y,est_z,gt_x,gt_y,gt_z\n";
  for (const auto& [e, g] : pairs) {
    const Eigen::Vector3d p = align * e.pose.translation();
    const Eigen::Vector3d& q = g.pose.translation();
    char line[240];
    std::snprintf(line, sizeof(line), "%.6f,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                  e.timestamp, p.x(), p.y(), p.z(), q.x(), q.y(), q.z());
    csv << line;
  }
  write_file(out_path, csv.str());
  std::cout << "wrote " << pairs.size() << " pairs to " << out_path << "\n";
  return 0;
}

int cmd_vocab(const std::string& train_dir, const std::string& out_path) {
  const SimulatedSequence seq = load_sequence(train_dir);
  const Vocabulary vocab = train_vocabulary(seq);
  write_file(out_path, vocab.serialize());
  std::cout << "trained " << vocab.num_words() << " words to " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stereo keyframe SLAM: simulation, runs and trajectory evaluation"};
  app.require_subcommand(1);

  std::string config_path;
  std::string seq_dir;
  std::string mode_name = "slam";
  std::string map_path;
  std::string est_path;
  std::string gt_path;
  std::string format = "tum";
  std::string train_dir;
  std::string out_path;
  bool deterministic = false;
  bool no_loop = false;
  bool no_align = false;

  CLI::App* simulate = app.add_subcommand("simulate", "generate a sequence from a config");
  simulate->add_option("--config", config_path, "world config (json)")->required();
  simulate->add_option("--out", out_path, "output sequence directory")->required();

  CLI::App* run = app.add_subcommand("run", "run the pipeline on a sequence");
  run->add_option("--sequence", seq_dir, "sequence directory")->required();
  run->add_option("--mode", mode_name, "slam|localization")
      ->check(CLI::IsMember({"slam", "localization"}));
  run->add_option("--map", map_path, "previously serialized map");
  run->add_flag("--deterministic", deterministic, "single-threaded reproducible run");
  run->add_flag("--no-loop", no_loop, "disable loop closing");
  run->add_option("--out", out_path, "output directory")->required();

  CLI::App* evaluate = app.add_subcommand("evaluate", "trajectory metrics");
  evaluate->add_option("--est", est_path, "estimated trajectory")->required();
  evaluate->add_option("--gt", gt_path, "ground-truth trajectory")->required();
  evaluate->add_option("--format", format, "tum|kitti")
      ->check(CLI::IsMember({"tum", "kitti"}));
  evaluate->add_flag("--no-align", no_align, "skip rigid alignment before ATE");

  CLI::App* plot = app.add_subcommand("plot-data", "aligned trajectory pairs as csv");
  plot->add_option("--est", est_path, "estimated trajectory (tum)")->required();
  plot->add_option("--gt", gt_path, "ground-truth trajectory (tum)")->required();
  plot->add_option("--out", out_path, "output csv")->required();

  CLI::App* vocab = app.add_subcommand("vocab", "train a vocabulary from a sequence");
  vocab->add_option("--train", train_dir, "sequence directory")->required();
  vocab->add_option("--out", out_path, "output vocabulary file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (simulate->parsed()) return cmd_simulate(config_path, out_path);
    if (run->parsed())
      return cmd_run(seq_dir, mode_name, map_path, deterministic, no_loop, out_path);
    if (evaluate->parsed()) return cmd_evaluate(est_path, gt_path, format, no_align);
    if (plot->parsed()) return cmd_plot_data(est_path, gt_path, out_path);
    if (vocab->parsed()) return cmd_vocab(train_dir, out_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
