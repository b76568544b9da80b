#ifndef KSLAM_SIMULATOR_H
#define KSLAM_SIMULATOR_H

#include <cstdint>
#include <string>
#include <vector>

#include "kslam/frame.h"
#include "kslam/trajectory.h"

namespace kslam {

enum class TrajectoryKind { Line, Circuit, FigureEight };

struct NoiseConfig {
  double pixel_sigma = 0.0;       // left-image keypoint noise, pixels
  double depth_sigma0 = 0.0;      // sigma_d = sigma0 * d^2 / (fx * b)
  double p_bit = 0.0;             // per-bit descriptor flip probability
  double dropout = 0.0;           // probability a stereo match fails (demotes to mono)
  double depth_scale_bias = 1.0;  // multiplicative depth bias (sensor miscalibration)
};

struct WorldConfig {
  int landmark_count = 2000;
  double extent = 20.0;     // lateral spread of landmarks around the path, meters
  double depth_min = 2.0;   // landmark placement depth range in front of the camera
  double depth_max = 35.0;
  TrajectoryKind kind = TrajectoryKind::Circuit;
  double length = 200.0;    // path length, meters
  int frames = 400;
  double frame_rate = 10.0;  // Hz
  int image_width = 752;
  int image_height = 480;
  Intrinsics K{450.0, 450.0, 376.0, 240.0, 0.2};
  NoiseConfig noise;
  uint64_t seed = 1;
};

/// Throws std::invalid_argument describing the first violated constraint.
void validate(const WorldConfig& config);

/// JSON codec for configs. from_json throws std::runtime_error on malformed
/// input, std::invalid_argument on out-of-range values.
std::string world_config_to_json(const WorldConfig& config);
WorldConfig world_config_from_json(const std::string& text);

struct SimulatedLandmark {
  uint64_t id = 0;
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Descriptor signature;
};

struct SimulatedSequence {
  WorldConfig config;
  Trajectory ground_truth;  // one world-from-camera pose per frame
  std::vector<Frame> frames;
  std::vector<SimulatedLandmark> landmarks;
  // Source landmark of each observation, parallel to frames[i].observations.
  std::vector<std::vector<uint64_t>> observed_landmarks;
};

/// Ground-truth pose on the configured path at arc length s in [0, length].
/// Circuit and figure-eight paths return to the start pose at s = length.
Pose path_pose(const WorldConfig& config, double s);

/// Deterministic under config.seed, byte-for-byte. Throws on invalid config.
SimulatedSequence generate_sequence(const WorldConfig& config);

/// Directory layout: config.json, gt_trajectory.txt (TUM), landmarks.txt,
/// frames.txt. Save overwrites; load throws std::runtime_error on missing or
/// malformed files. save_sequence output is byte-stable.
void save_sequence(const std::string& dir, const SimulatedSequence& seq);
SimulatedSequence load_sequence(const std::string& dir);

}  // namespace kslam

#endif
