#ifndef KSLAM_FRAME_H
#define KSLAM_FRAME_H

#include <vector>

#include "kslam/map_types.h"

namespace kslam {

enum class SensorKind { Stereo, RGBD, Mono };

/// One preprocessed input frame: timestamped keypoints with descriptors.
/// RGB-D features with invalid depth appear as MonoKeypoint observations.
/// Observation::point_id holds the map-point association made by tracking.
struct Frame {
  double timestamp = 0.0;
  SensorKind sensor = SensorKind::Stereo;
  std::vector<Observation> observations;
};

}  // namespace kslam

#endif
