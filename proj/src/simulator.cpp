#include "kslam/simulator.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace kslam {

namespace {

double uniform01(std::mt19937_64& rng) {
  return double(rng() >> 11) * 0x1.0p-53;  // [0, 1)
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

double normal(std::mt19937_64& rng) {
  // Stateless Box-Muller keeps the draw sequence platform-stable.
  const double u1 = std::max(uniform01(rng), 1e-300);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

Descriptor random_signature(std::mt19937_64& rng) {
  Descriptor d;
  for (auto& w : d.words) w = rng();
  return d;
}

void put_double(std::string& out, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

}  // namespace

void validate(const WorldConfig& c) {
  const auto fail = [](const char* what) { throw std::invalid_argument(what); };
  if (c.landmark_count < 1) fail("WorldConfig: landmark_count must be positive");
  if (!(c.extent > 0.0)) fail("WorldConfig: extent must be positive");
  if (!(c.depth_min > 0.0) || !(c.depth_max > c.depth_min)) {
    fail("WorldConfig: need 0 < depth_min < depth_max");
  }
  if (!(c.length > 0.0)) fail("WorldConfig: length must be positive");
  if (c.frames < 2) fail("WorldConfig: need at least 2 frames");
  if (!(c.frame_rate > 0.0)) fail("WorldConfig: frame_rate must be positive");
  if (c.image_width < 2 || c.image_height < 2) fail("WorldConfig: bad image size");
  if (!(c.K.fx > 0.0) || !(c.K.fy > 0.0) || !(c.K.baseline > 0.0)) {
    fail("WorldConfig: bad intrinsics");
  }
  const auto rate_ok = [](double r) { return r >= 0.0 && r <= 1.0; };
  if (!rate_ok(c.noise.p_bit)) fail("WorldConfig: p_bit must be in [0, 1]");
  if (!rate_ok(c.noise.dropout)) fail("WorldConfig: dropout must be in [0, 1]");
  if (c.noise.pixel_sigma < 0.0) fail("WorldConfig: pixel_sigma must be non-negative");
  if (c.noise.depth_sigma0 < 0.0) fail("WorldConfig: depth_sigma0 must be non-negative");
  if (!(c.noise.depth_scale_bias > 0.0)) {
    fail("WorldConfig: depth_scale_bias must be positive");
  }
}

Pose path_pose(const WorldConfig& config, double s) {
  Eigen::Vector3d p;
  Eigen::Vector3d forward;
  switch (config.kind) {
    case TrajectoryKind::Line: {
      p = Eigen::Vector3d(0.0, 0.0, s);
      forward = Eigen::Vector3d(0.0, 0.0, 1.0);
      break;
    }
    case TrajectoryKind::Circuit: {
      const double radius = config.length / (2.0 * M_PI);
      const double theta = s / radius;
      p = Eigen::Vector3d(radius * (1.0 - std::cos(theta)), 0.0, radius * std::sin(theta));
      forward = Eigen::Vector3d(std::sin(theta), 0.0, std::cos(theta));
      break;
    }
    case TrajectoryKind::FigureEight: {
      const double radius = config.length / (4.0 * M_PI);
      const double half = config.length / 2.0;
      if (s < half) {
        const double theta = s / radius;
        p = Eigen::Vector3d(radius * (1.0 - std::cos(theta)), 0.0, radius * std::sin(theta));
        forward = Eigen::Vector3d(std::sin(theta), 0.0, std::cos(theta));
      } else {
        const double phi = (s - half) / radius;
        p = Eigen::Vector3d(-radius * (1.0 - std::cos(phi)), 0.0, radius * std::sin(phi));
        forward = Eigen::Vector3d(-std::sin(phi), 0.0, std::cos(phi));
      }
      break;
    }
  }
  const Eigen::Vector3d down(0.0, 1.0, 0.0);
  const Eigen::Vector3d right = down.cross(forward).normalized();
  Eigen::Matrix3d R;
  R.col(0) = right;
  R.col(1) = down;
  R.col(2) = forward;
  return Pose(R, p);
}

SimulatedSequence generate_sequence(const WorldConfig& config) {
  validate(config);
  std::mt19937_64 rng(config.seed);

  SimulatedSequence seq;
  seq.config = config;

  seq.landmarks.reserve(size_t(config.landmark_count));
  for (int i = 0; i < config.landmark_count; ++i) {
    const double s = uniform(rng, 0.0, config.length);
    const Pose anchor = path_pose(config, s);
    const double z = uniform(rng, config.depth_min, config.depth_max);
    const double half_w = std::min(config.extent / 2.0, 0.9 * z * config.K.cx / config.K.fx);
    const double half_h = std::min(config.extent / 2.0, 0.9 * z * config.K.cy / config.K.fy);
    const Eigen::Vector3d xc(uniform(rng, -half_w, half_w), uniform(rng, -half_h, half_h), z);
    seq.landmarks.push_back({uint64_t(i), anchor * xc, random_signature(rng)});
  }

  seq.ground_truth.reserve(size_t(config.frames));
  seq.frames.reserve(size_t(config.frames));
  seq.observed_landmarks.resize(size_t(config.frames));

  const NoiseConfig& noise = config.noise;
  for (int f = 0; f < config.frames; ++f) {
    const double t = double(f) / config.frame_rate;
    const double s = config.length * double(f) / double(config.frames - 1);
    const Pose T_wc = path_pose(config, s);
    const Pose T_cw = T_wc.inverse();
    seq.ground_truth.push_back({t, T_wc});

    Frame frame;
    frame.timestamp = t;
    frame.sensor = SensorKind::Stereo;
    for (const SimulatedLandmark& lm : seq.landmarks) {
      const Eigen::Vector3d xc = T_cw * lm.position;
      if (xc.z() < 0.3) continue;
      const Eigen::Vector2d px = project_mono(xc, config.K);
      if (px.x() < 0.0 || px.x() >= config.image_width || px.y() < 0.0 ||
          px.y() >= config.image_height) {
        continue;
      }

      const double uL = px.x() + noise.pixel_sigma * normal(rng);
      const double vL = px.y() + noise.pixel_sigma * normal(rng);
      const double sigma_d =
          noise.depth_sigma0 * xc.z() * xc.z() / (config.K.fx * config.K.baseline);
      const double depth = xc.z() * noise.depth_scale_bias + sigma_d * normal(rng);

      Descriptor d = lm.signature;
      for (int b = 0; b < 256; ++b) {
        if (uniform01(rng) < noise.p_bit) d.flip_bit(b);
      }

      Observation obs;
      obs.descriptor = d;
      const bool stereo_failed = uniform01(rng) < noise.dropout || depth <= 0.1;
      if (stereo_failed) {
        obs.kp = MonoKeypoint{uL, vL, 0};
      } else {
        obs.kp = StereoKeypoint{uL, vL, synth_right_coord(uL, depth, config.K), 0};
      }
      frame.observations.push_back(std::move(obs));
      seq.observed_landmarks[size_t(f)].push_back(lm.id);
    }
    seq.frames.push_back(std::move(frame));
  }
  return seq;
}

namespace {

constexpr const char* kKindNames[] = {"line", "circuit", "figure-eight"};

TrajectoryKind kind_from_name(const std::string& name) {
  for (int i = 0; i < 3; ++i) {
    if (name == kKindNames[i]) return TrajectoryKind(i);
  }
  throw std::invalid_argument("WorldConfig: unknown trajectory kind '" + name + "'");
}

}  // namespace

std::string world_config_to_json(const WorldConfig& c) {
  nlohmann::ordered_json j;
  j["landmark_count"] = c.landmark_count;
  j["extent"] = c.extent;
  j["depth_min"] = c.depth_min;
  j["depth_max"] = c.depth_max;
  j["trajectory"] = kKindNames[int(c.kind)];
  j["length"] = c.length;
  j["frames"] = c.frames;
  j["frame_rate"] = c.frame_rate;
  j["image_width"] = c.image_width;
  j["image_height"] = c.image_height;
  j["intrinsics"] = {{"fx", c.K.fx},
                     {"fy", c.K.fy},
                     {"cx", c.K.cx},
                     {"cy", c.K.cy},
                     {"baseline", c.K.baseline}};
  j["noise"] = {{"pixel_sigma", c.noise.pixel_sigma},
                {"depth_sigma0", c.noise.depth_sigma0},
                {"p_bit", c.noise.p_bit},
                {"dropout", c.noise.dropout},
                {"depth_scale_bias", c.noise.depth_scale_bias}};
  j["seed"] = c.seed;
  return j.dump(2) + "\n";
}

namespace {

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                const char* scope) {
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(),
                     [&](const char* a) { return key == a; }) == allowed.end()) {
      throw std::runtime_error(std::string("WorldConfig: unknown ") + scope + " key '" +
                               key + "'");
    }
  }
}

}  // namespace

WorldConfig world_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("WorldConfig: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::runtime_error("WorldConfig: expected a JSON object");
  check_keys(j,
             {"landmark_count", "extent", "depth_min", "depth_max", "trajectory", "length",
              "frames", "frame_rate", "image_width", "image_height", "intrinsics", "noise",
              "seed"},
             "config");
  if (j.contains("intrinsics")) {
    check_keys(j["intrinsics"], {"fx", "fy", "cx", "cy", "baseline"}, "intrinsics");
  }
  if (j.contains("noise")) {
    check_keys(j["noise"],
               {"pixel_sigma", "depth_sigma0", "p_bit", "dropout", "depth_scale_bias"},
               "noise");
  }
  WorldConfig c;
  try {
    c.landmark_count = j.value("landmark_count", c.landmark_count);
    c.extent = j.value("extent", c.extent);
    c.depth_min = j.value("depth_min", c.depth_min);
    c.depth_max = j.value("depth_max", c.depth_max);
    if (j.contains("trajectory")) c.kind = kind_from_name(j["trajectory"].get<std::string>());
    c.length = j.value("length", c.length);
    c.frames = j.value("frames", c.frames);
    c.frame_rate = j.value("frame_rate", c.frame_rate);
    c.image_width = j.value("image_width", c.image_width);
    c.image_height = j.value("image_height", c.image_height);
    if (j.contains("intrinsics")) {
      const auto& k = j["intrinsics"];
      c.K.fx = k.value("fx", c.K.fx);
      c.K.fy = k.value("fy", c.K.fy);
      c.K.cx = k.value("cx", c.K.cx);
      c.K.cy = k.value("cy", c.K.cy);
      c.K.baseline = k.value("baseline", c.K.baseline);
    }
    if (j.contains("noise")) {
      const auto& n = j["noise"];
      c.noise.pixel_sigma = n.value("pixel_sigma", c.noise.pixel_sigma);
      c.noise.depth_sigma0 = n.value("depth_sigma0", c.noise.depth_sigma0);
      c.noise.p_bit = n.value("p_bit", c.noise.p_bit);
      c.noise.dropout = n.value("dropout", c.noise.dropout);
      c.noise.depth_scale_bias = n.value("depth_scale_bias", c.noise.depth_scale_bias);
    }
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("WorldConfig: bad field type: ") + e.what());
  }
  validate(c);
  return c;
}

namespace {

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << bytes;
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

void save_sequence(const std::string& dir, const SimulatedSequence& seq) {
  std::filesystem::create_directories(dir);
  write_file(dir + "/config.json", world_config_to_json(seq.config));
  write_file(dir + "/gt_trajectory.txt", to_tum(seq.ground_truth));

  std::string lm;
  char buf[64];
  std::snprintf(buf, sizeof buf, "landmarks %zu\n", seq.landmarks.size());
  lm += buf;
  for (const SimulatedLandmark& l : seq.landmarks) {
    std::snprintf(buf, sizeof buf, "%llu", static_cast<unsigned long long>(l.id));
    lm += buf;
    for (double v : {l.position.x(), l.position.y(), l.position.z()}) {
      lm += ' ';
      put_double(lm, v);
    }
    lm += ' ';
    lm += to_hex(l.signature);
    lm += '\n';
  }
  write_file(dir + "/landmarks.txt", lm);

  std::string fr;
  std::snprintf(buf, sizeof buf, "frames %zu\n", seq.frames.size());
  fr += buf;
  for (size_t f = 0; f < seq.frames.size(); ++f) {
    const Frame& frame = seq.frames[f];
    std::snprintf(buf, sizeof buf, "frame %zu ", f);
    fr += buf;
    put_double(fr, frame.timestamp);
    std::snprintf(buf, sizeof buf, " %zu\n", frame.observations.size());
    fr += buf;
    for (size_t o = 0; o < frame.observations.size(); ++o) {
      const Observation& obs = frame.observations[o];
      const uint64_t lm_id = seq.observed_landmarks[f][o];
      std::snprintf(buf, sizeof buf, "%llu ", static_cast<unsigned long long>(lm_id));
      if (const auto* skp = std::get_if<StereoKeypoint>(&obs.kp)) {
        fr += "s ";
        fr += buf;
        put_double(fr, skp->uL);
        fr += ' ';
        put_double(fr, skp->vL);
        fr += ' ';
        put_double(fr, skp->uR);
        std::snprintf(buf, sizeof buf, " %d ", skp->octave);
        fr += buf;
      } else {
        const auto& mkp = std::get<MonoKeypoint>(obs.kp);
        fr += "m ";
        fr += buf;
        put_double(fr, mkp.uL);
        fr += ' ';
        put_double(fr, mkp.vL);
        std::snprintf(buf, sizeof buf, " %d ", mkp.octave);
        fr += buf;
      }
      fr += to_hex(obs.descriptor);
      fr += '\n';
    }
  }
  write_file(dir + "/frames.txt", fr);
}

SimulatedSequence load_sequence(const std::string& dir) {
  SimulatedSequence seq;
  seq.config = world_config_from_json(read_file(dir + "/config.json"));
  seq.ground_truth = from_tum(read_file(dir + "/gt_trajectory.txt"));

  const auto fail = [](const std::string& file, const std::string& what) {
    throw std::runtime_error(file + ": " + what);
  };

  {
    std::istringstream in(read_file(dir + "/landmarks.txt"));
    std::string tag;
    size_t count = 0;
    if (!(in >> tag >> count) || tag != "landmarks") fail("landmarks.txt", "bad header");
    seq.landmarks.reserve(count);
    for (size_t i = 0; i < count; ++i) {
      SimulatedLandmark l;
      std::string hex;
      if (!(in >> l.id >> l.position.x() >> l.position.y() >> l.position.z() >> hex)) {
        fail("landmarks.txt", "bad landmark record");
      }
      l.signature = descriptor_from_hex(hex);
      seq.landmarks.push_back(std::move(l));
    }
  }

  {
    std::istringstream in(read_file(dir + "/frames.txt"));
    std::string tag;
    size_t count = 0;
    if (!(in >> tag >> count) || tag != "frames") fail("frames.txt", "bad header");
    seq.frames.resize(count);
    seq.observed_landmarks.resize(count);
    for (size_t f = 0; f < count; ++f) {
      size_t idx = 0, nobs = 0;
      Frame& frame = seq.frames[f];
      if (!(in >> tag >> idx) || tag != "frame" || idx != f ||
          !(in >> frame.timestamp >> nobs)) {
        fail("frames.txt", "bad frame header");
      }
      frame.sensor = SensorKind::Stereo;
      frame.observations.reserve(nobs);
      seq.observed_landmarks[f].reserve(nobs);
      for (size_t o = 0; o < nobs; ++o) {
        std::string kind, hex;
        uint64_t lm_id = 0;
        Observation obs;
        if (!(in >> kind >> lm_id)) fail("frames.txt", "bad observation record");
        if (kind == "s") {
          StereoKeypoint kp;
          if (!(in >> kp.uL >> kp.vL >> kp.uR >> kp.octave >> hex)) {
            fail("frames.txt", "bad stereo observation");
          }
          obs.kp = kp;
        } else if (kind == "m") {
          MonoKeypoint kp;
          if (!(in >> kp.uL >> kp.vL >> kp.octave >> hex)) {
            fail("frames.txt", "bad mono observation");
          }
          obs.kp = kp;
        } else {
          fail("frames.txt", "unknown observation kind '" + kind + "'");
        }
        obs.descriptor = descriptor_from_hex(hex);
        frame.observations.push_back(std::move(obs));
        seq.observed_landmarks[f].push_back(lm_id);
      }
    }
  }
  return seq;
}

}  // namespace kslam
