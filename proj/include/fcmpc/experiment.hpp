#pragma once

#include "fcmpc/core.hpp"
#include "fcmpc/diffusion.hpp"
#include "fcmpc/fcm.hpp"
#include "fcmpc/io.hpp"
#include "fcmpc/metrics.hpp"
#include "fcmpc/renderer.hpp"
#include "fcmpc/scenes.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace fcmpc {

/// Bad or inconsistent experiment configuration. The CLI maps it to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration schema

struct SceneSource {
  std::string generator = "torus";  // ignored when `ply` is set
  std::string ply;
  int points = 256;
  std::uint64_t seed = 0;

  bool operator==(const SceneSource&) const = default;
};

struct PriorMode {
  SceneSource source;
  double weight = 1.0;
  std::optional<double> stddev;  // falls back to PriorSpec::stddev

  bool operator==(const PriorMode&) const = default;
};

struct PriorSpec {
  double stddev = 0.2;
  std::vector<PriorMode> modes;

  bool operator==(const PriorSpec&) const = default;
};

struct OrbitPose {
  double azimuth = 0.0;  // degrees
  double elevation = 0.0;
  double distance = 2.2;
  double fov = 40.0;

  bool operator==(const OrbitPose&) const = default;
};

struct LookAtPose {
  std::array<double, 3> eye{0.0, 0.0, 2.2};
  std::array<double, 3> target{0.0, 0.0, 0.0};
  std::array<double, 3> up{0.0, 1.0, 0.0};
  double focal = 88.0;  // pixels

  bool operator==(const LookAtPose&) const = default;
};

struct ExplicitPose {
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major world -> camera
  std::array<double, 3> translation{0.0, 0.0, 0.0};
  std::array<double, 2> focal{88.0, 88.0};
  std::array<double, 2> principal_point{32.0, 32.0};

  bool operator==(const ExplicitPose&) const = default;
};

struct CameraSpec {
  std::variant<OrbitPose, LookAtPose, ExplicitPose> pose = OrbitPose{};
  int width = 64;
  int height = 64;
  OperatorKind op = OperatorKind::color;
  std::string reference;  // PPM/PFM measurement file; empty renders the scene instead

  bool operator==(const CameraSpec&) const = default;
};

struct ScheduleSpec {
  int steps = 64;
  double beta_min = 1e-4;
  double beta_max = 0.02;

  bool operator==(const ScheduleSpec&) const = default;
};

struct SamplerSpec {
  double eta = 0.0;
  std::uint64_t seed = 0;
  std::string guidance = "fcm";  // fcm | dps | none
  FCMConfig fcm;
  DPSGuidance dps;
  int snapshot_every = 0;

  bool operator==(const SamplerSpec&) const = default;
};

struct MetricsSpec {
  double tau = 0.05;

  bool operator==(const MetricsSpec&) const = default;
};

struct AblationSpec {
  std::vector<double> gammas{0.01, 0.05, 0.1};
  int seeds = 10;

  bool operator==(const AblationSpec&) const = default;
};

struct GradcheckSpec {
  int scenes = 50;
  int points = 64;
  int resolution = 32;
  std::uint64_t seed = 0;
  double step = 1e-5;

  bool operator==(const GradcheckSpec&) const = default;
};

struct ExperimentConfig {
  std::optional<SceneSource> scene;
  PriorSpec prior;
  std::vector<CameraSpec> cameras;
  ScheduleSpec schedule;
  SamplerSpec sampler;
  RasterConfig raster;
  MetricsSpec metrics;
  AblationSpec ablation;
  GradcheckSpec gradcheck;
  std::string output = "out";

  bool operator==(const ExperimentConfig&) const = default;
};

namespace detail {

using json = nlohmann::json;

template <class T>
T convert(const json& j, const std::string& path) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) throw ConfigError(path + ": expected a boolean");
    return j.get<bool>();
  } else if constexpr (std::is_same_v<T, std::uint64_t>) {
    if (!j.is_number_unsigned()) throw ConfigError(path + ": expected a non-negative integer");
    return j.get<std::uint64_t>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!j.is_number_integer()) throw ConfigError(path + ": expected an integer");
    const auto v = j.get<std::int64_t>();
    if (v < std::numeric_limits<T>::min() || v > std::numeric_limits<T>::max()) {
      throw ConfigError(path + ": integer out of range");
    }
    return static_cast<T>(v);
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!j.is_number()) throw ConfigError(path + ": expected a number");
    return j.get<double>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) throw ConfigError(path + ": expected a string");
    return j.get<std::string>();
  } else {
    static_assert(sizeof(T) == 0, "unsupported config value type");
  }
}

template <std::size_t N>
std::array<double, N> convert_array(const json& j, const std::string& path) {
  if (!j.is_array() || j.size() != N) {
    throw ConfigError(path + ": expected an array of " + std::to_string(N) + " numbers");
  }
  std::array<double, N> out{};
  for (std::size_t i = 0; i < N; ++i) {
    out[i] = convert<double>(j[i], path + "[" + std::to_string(i) + "]");
  }
  return out;
}

inline std::vector<double> convert_vector(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path + ": expected an array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    out.push_back(convert<double>(j[i], path + "[" + std::to_string(i) + "]"));
  }
  return out;
}

// Reads keys from one JSON object and rejects any it did not consume.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* child(const std::string& key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  void get(const std::string& key, T& out) {
    if (const json* c = child(key)) out = convert<T>(*c, key_path(key));
  }
  template <std::size_t N>
  void get(const std::string& key, std::array<double, N>& out) {
    if (const json* c = child(key)) out = convert_array<N>(*c, key_path(key));
  }
  void get(const std::string& key, std::vector<double>& out) {
    if (const json* c = child(key)) out = convert_vector(*c, key_path(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.contains(it.key())) {
        throw ConfigError(key_path(it.key()) + ": unknown key");
      }
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline void read_scene_keys(ObjectReader& r, SceneSource& s) {
  r.get("generator", s.generator);
  r.get("ply", s.ply);
  r.get("points", s.points);
  r.get("seed", s.seed);
}

inline SceneSource parse_scene(const json& j, const std::string& path) {
  ObjectReader r(j, path);
  SceneSource s;
  read_scene_keys(r, s);
  r.finish();
  return s;
}

inline PriorSpec parse_prior(const json& j) {
  ObjectReader r(j, "prior");
  PriorSpec p;
  r.get("stddev", p.stddev);
  if (const json* modes = r.child("modes")) {
    if (!modes->is_array()) throw ConfigError("prior.modes: expected an array");
    for (std::size_t i = 0; i < modes->size(); ++i) {
      ObjectReader m((*modes)[i], "prior.modes[" + std::to_string(i) + "]");
      PriorMode mode;
      read_scene_keys(m, mode.source);
      m.get("weight", mode.weight);
      if (const json* sd = m.child("stddev")) mode.stddev = convert<double>(*sd, m.key_path("stddev"));
      m.finish();
      p.modes.push_back(std::move(mode));
    }
  }
  r.finish();
  return p;
}

inline OperatorKind parse_operator(const json& j, const std::string& path) {
  const auto s = convert<std::string>(j, path);
  if (s == "color") return OperatorKind::color;
  if (s == "depth") return OperatorKind::depth;
  throw ConfigError(path + ": operator must be \"color\" or \"depth\", got \"" + s + "\"");
}

inline CameraSpec parse_camera(const json& j, const std::string& path) {
  ObjectReader r(j, path);
  CameraSpec c;
  const int kinds = int(r.has("orbit")) + int(r.has("look_at")) + int(r.has("explicit"));
  if (kinds != 1) {
    throw ConfigError(path + ": exactly one of \"orbit\", \"look_at\", \"explicit\" is required");
  }
  if (const json* o = r.child("orbit")) {
    ObjectReader p(*o, path + ".orbit");
    OrbitPose pose;
    p.get("azimuth", pose.azimuth);
    p.get("elevation", pose.elevation);
    p.get("distance", pose.distance);
    p.get("fov", pose.fov);
    p.finish();
    c.pose = pose;
  }
  if (const json* o = r.child("look_at")) {
    ObjectReader p(*o, path + ".look_at");
    LookAtPose pose;
    p.get("eye", pose.eye);
    p.get("target", pose.target);
    p.get("up", pose.up);
    p.get("focal", pose.focal);
    p.finish();
    c.pose = pose;
  }
  if (const json* o = r.child("explicit")) {
    ObjectReader p(*o, path + ".explicit");
    ExplicitPose pose;
    p.get("rotation", pose.rotation);
    p.get("translation", pose.translation);
    p.get("focal", pose.focal);
    p.get("principal_point", pose.principal_point);
    p.finish();
    c.pose = pose;
  }
  r.get("width", c.width);
  r.get("height", c.height);
  if (const json* op = r.child("operator")) c.op = parse_operator(*op, r.key_path("operator"));
  r.get("reference", c.reference);
  r.finish();
  return c;
}

inline SamplerSpec parse_sampler(const json& j) {
  ObjectReader r(j, "sampler");
  SamplerSpec s;
  r.get("eta", s.eta);
  r.get("seed", s.seed);
  r.get("guidance", s.guidance);
  r.get("snapshot_every", s.snapshot_every);
  if (const json* f = r.child("fcm")) {
    ObjectReader p(*f, "sampler.fcm");
    p.get("delta0", s.fcm.delta0);
    p.get("eta_fcm", s.fcm.eta_fcm);
    p.get("lipschitz", s.fcm.lipschitz);
    p.get("epsilon", s.fcm.epsilon);
    p.get("k_fcm", s.fcm.k_fcm);
    p.get("grad_floor", s.fcm.grad_floor);
    p.finish();
  }
  if (const json* d = r.child("dps")) {
    ObjectReader p(*d, "sampler.dps");
    p.get("gamma", s.dps.gamma);
    p.get("steps", s.dps.steps);
    p.finish();
  }
  r.finish();
  return s;
}

inline RasterConfig parse_raster(const json& j) {
  ObjectReader r(j, "raster");
  RasterConfig c;
  r.get("radius", c.radius);
  r.get("points_per_pixel", c.points_per_pixel);
  r.get("background_color", c.background_color);
  r.get("background_depth", c.background_depth);
  r.finish();
  return c;
}

inline json scene_json(const SceneSource& s) {
  if (!s.ply.empty()) return json{{"ply", s.ply}};
  return json{{"generator", s.generator}, {"points", s.points}, {"seed", s.seed}};
}

}  // namespace detail

/// Semantic checks beyond the schema. Throws ConfigError.
inline void validate(const ExperimentConfig& cfg) {
  auto check_scene = [](const SceneSource& s, const std::string& path) {
    if (!s.ply.empty()) return;
    const auto names = scenes::generator_names();
    if (std::find(names.begin(), names.end(), s.generator) == names.end()) {
      throw ConfigError(path + ".generator: unknown scene generator \"" + s.generator + "\"");
    }
    if (s.points < 1) throw ConfigError(path + ".points: must be >= 1");
  };
  if (cfg.scene) check_scene(*cfg.scene, "scene");
  if (!(cfg.prior.stddev > 0.0)) throw ConfigError("prior.stddev: must be positive");
  for (std::size_t i = 0; i < cfg.prior.modes.size(); ++i) {
    const auto& m = cfg.prior.modes[i];
    const std::string path = "prior.modes[" + std::to_string(i) + "]";
    check_scene(m.source, path);
    if (!(m.weight > 0.0)) throw ConfigError(path + ".weight: must be positive");
    if (m.stddev && !(*m.stddev > 0.0)) throw ConfigError(path + ".stddev: must be positive");
  }
  for (std::size_t i = 0; i < cfg.cameras.size(); ++i) {
    const auto& c = cfg.cameras[i];
    const std::string path = "cameras[" + std::to_string(i) + "]";
    if (c.width < 1 || c.height < 1) throw ConfigError(path + ": resolution must be at least 1x1");
    if (const auto* o = std::get_if<OrbitPose>(&c.pose)) {
      if (!(o->distance > 0.0)) throw ConfigError(path + ".orbit.distance: must be positive");
      if (!(o->fov > 0.0 && o->fov < 180.0)) throw ConfigError(path + ".orbit.fov: must be in (0, 180)");
    }
    if (const auto* l = std::get_if<LookAtPose>(&c.pose)) {
      if (!(l->focal > 0.0)) throw ConfigError(path + ".look_at.focal: must be positive");
      if (l->eye == l->target) throw ConfigError(path + ".look_at: eye and target coincide");
    }
    if (!cfg.scene && c.reference.empty()) {
      throw ConfigError(path + ": no reference file and no scene to render one from");
    }
  }
  const auto& s = cfg.schedule;
  if (s.steps < 1) throw ConfigError("schedule.steps: must be >= 1");
  if (!(s.beta_min > 0.0 && s.beta_min <= s.beta_max && s.beta_max < 1.0)) {
    throw ConfigError("schedule: need 0 < beta_min <= beta_max < 1");
  }
  const auto& sm = cfg.sampler;
  if (!(sm.eta >= 0.0)) throw ConfigError("sampler.eta: must be >= 0");
  if (sm.guidance != "fcm" && sm.guidance != "dps" && sm.guidance != "none") {
    throw ConfigError("sampler.guidance: expected \"fcm\", \"dps\" or \"none\", got \"" + sm.guidance + "\"");
  }
  if (sm.snapshot_every < 0) throw ConfigError("sampler.snapshot_every: must be >= 0");
  try {
    sm.fcm.validate();
    cfg.raster.validate(cfg.raster.background_color.size());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (!(sm.dps.gamma >= 0.0) || sm.dps.steps < 0) throw ConfigError("sampler.dps: need gamma >= 0, steps >= 0");
  if (!(cfg.metrics.tau > 0.0)) throw ConfigError("metrics.tau: must be positive");
  if (cfg.ablation.seeds < 1) throw ConfigError("ablation.seeds: must be >= 1");
  if (cfg.ablation.gammas.empty()) throw ConfigError("ablation.gammas: must be nonempty");
  for (double g : cfg.ablation.gammas) {
    if (!(g >= 0.0)) throw ConfigError("ablation.gammas: entries must be >= 0");
  }
  const auto& gc = cfg.gradcheck;
  if (gc.scenes < 1 || gc.points < 1) throw ConfigError("gradcheck: scenes and points must be >= 1");
  if (gc.resolution < 8) throw ConfigError("gradcheck.resolution: must be >= 8");
  if (!(gc.step > 0.0)) throw ConfigError("gradcheck.step: must be positive");
  if (cfg.output.empty()) throw ConfigError("output: must be a nonempty path");
}

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  detail::ObjectReader r(j, "");
  ExperimentConfig cfg;
  if (const auto* s = r.child("scene")) cfg.scene = detail::parse_scene(*s, "scene");
  if (const auto* p = r.child("prior")) cfg.prior = detail::parse_prior(*p);
  if (const auto* cams = r.child("cameras")) {
    if (!cams->is_array()) throw ConfigError("cameras: expected an array");
    for (std::size_t i = 0; i < cams->size(); ++i) {
      cfg.cameras.push_back(detail::parse_camera((*cams)[i], "cameras[" + std::to_string(i) + "]"));
    }
  }
  if (const auto* s = r.child("schedule")) {
    detail::ObjectReader p(*s, "schedule");
    p.get("steps", cfg.schedule.steps);
    p.get("beta_min", cfg.schedule.beta_min);
    p.get("beta_max", cfg.schedule.beta_max);
    p.finish();
  }
  if (const auto* s = r.child("sampler")) cfg.sampler = detail::parse_sampler(*s);
  if (const auto* s = r.child("raster")) cfg.raster = detail::parse_raster(*s);
  if (const auto* s = r.child("metrics")) {
    detail::ObjectReader p(*s, "metrics");
    p.get("tau", cfg.metrics.tau);
    p.finish();
  }
  if (const auto* s = r.child("ablation")) {
    detail::ObjectReader p(*s, "ablation");
    p.get("gammas", cfg.ablation.gammas);
    p.get("seeds", cfg.ablation.seeds);
    p.finish();
  }
  if (const auto* s = r.child("gradcheck")) {
    detail::ObjectReader p(*s, "gradcheck");
    p.get("scenes", cfg.gradcheck.scenes);
    p.get("points", cfg.gradcheck.points);
    p.get("resolution", cfg.gradcheck.resolution);
    p.get("seed", cfg.gradcheck.seed);
    p.get("step", cfg.gradcheck.step);
    p.finish();
  }
  r.get("output", cfg.output);
  r.finish();
  validate(cfg);
  return cfg;
}

/// Parses JSON text; syntax errors carry the line and column.
inline ExperimentConfig parse_config_text(const std::string& text, const std::string& source = "<config>") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return parse_config(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

/// Canonical JSON form with every field present.
inline nlohmann::json to_json(const ExperimentConfig& cfg) {
  using detail::json;
  json j;
  if (cfg.scene) j["scene"] = detail::scene_json(*cfg.scene);
  json modes = json::array();
  for (const auto& m : cfg.prior.modes) {
    json mj = detail::scene_json(m.source);
    mj["weight"] = m.weight;
    if (m.stddev) mj["stddev"] = *m.stddev;
    modes.push_back(std::move(mj));
  }
  j["prior"] = {{"stddev", cfg.prior.stddev}, {"modes", modes}};
  json cams = json::array();
  for (const auto& c : cfg.cameras) {
    json cj{{"width", c.width}, {"height", c.height}, {"operator", to_string(c.op)}};
    if (!c.reference.empty()) cj["reference"] = c.reference;
    if (const auto* o = std::get_if<OrbitPose>(&c.pose)) {
      cj["orbit"] = {{"azimuth", o->azimuth}, {"elevation", o->elevation}, {"distance", o->distance}, {"fov", o->fov}};
    } else if (const auto* l = std::get_if<LookAtPose>(&c.pose)) {
      cj["look_at"] = {{"eye", l->eye}, {"target", l->target}, {"up", l->up}, {"focal", l->focal}};
    } else {
      const auto& e = std::get<ExplicitPose>(c.pose);
      cj["explicit"] = {{"rotation", e.rotation},
                        {"translation", e.translation},
                        {"focal", e.focal},
                        {"principal_point", e.principal_point}};
    }
    cams.push_back(std::move(cj));
  }
  j["cameras"] = cams;
  j["schedule"] = {{"steps", cfg.schedule.steps},
                   {"beta_min", cfg.schedule.beta_min},
                   {"beta_max", cfg.schedule.beta_max}};
  const auto& s = cfg.sampler;
  j["sampler"] = {{"eta", s.eta},
                  {"seed", s.seed},
                  {"guidance", s.guidance},
                  {"snapshot_every", s.snapshot_every},
                  {"fcm",
                   {{"delta0", s.fcm.delta0},
                    {"eta_fcm", s.fcm.eta_fcm},
                    {"lipschitz", s.fcm.lipschitz},
                    {"epsilon", s.fcm.epsilon},
                    {"k_fcm", s.fcm.k_fcm},
                    {"grad_floor", s.fcm.grad_floor}}},
                  {"dps", {{"gamma", s.dps.gamma}, {"steps", s.dps.steps}}}};
  j["raster"] = {{"radius", cfg.raster.radius},
                 {"points_per_pixel", cfg.raster.points_per_pixel},
                 {"background_color", cfg.raster.background_color},
                 {"background_depth", cfg.raster.background_depth}};
  j["metrics"] = {{"tau", cfg.metrics.tau}};
  j["ablation"] = {{"gammas", cfg.ablation.gammas}, {"seeds", cfg.ablation.seeds}};
  j["gradcheck"] = {{"scenes", cfg.gradcheck.scenes},
                    {"points", cfg.gradcheck.points},
                    {"resolution", cfg.gradcheck.resolution},
                    {"seed", cfg.gradcheck.seed},
                    {"step", cfg.gradcheck.step}};
  j["output"] = cfg.output;
  return j;
}

// ---------------------------------------------------------------------------
// Builders

inline ColoredPointCloud load_scene(const SceneSource& s) {
  if (!s.ply.empty()) return read_ply(std::filesystem::path(s.ply));
  return scenes::make(s.generator, static_cast<std::size_t>(s.points), s.seed);
}

inline Camera build_camera(const CameraSpec& c) {
  try {
    if (const auto* o = std::get_if<OrbitPose>(&c.pose)) {
      return scenes::orbit_camera(o->azimuth, o->elevation, o->distance, o->fov, c.width, c.height);
    }
    if (const auto* l = std::get_if<LookAtPose>(&c.pose)) {
      auto v = [](const std::array<double, 3>& a) { return Eigen::Vector3d(a[0], a[1], a[2]); };
      return Camera::look_at(v(l->eye), v(l->target), v(l->up), l->focal, c.width, c.height);
    }
    const auto& e = std::get<ExplicitPose>(c.pose);
    Camera cam;
    for (int i = 0; i < 9; ++i) cam.rotation(i / 3, i % 3) = e.rotation[static_cast<std::size_t>(i)];
    cam.translation = {e.translation[0], e.translation[1], e.translation[2]};
    cam.focal = {e.focal[0], e.focal[1]};
    cam.principal_point = {e.principal_point[0], e.principal_point[1]};
    cam.width = c.width;
    cam.height = c.height;
    cam.validate();
    return cam;
  } catch (const std::invalid_argument& err) {
    throw ConfigError(std::string("camera: ") + err.what());
  }
}

inline NoiseSchedule build_schedule(const ScheduleSpec& s) {
  return make_linear_schedule(s.steps, s.beta_min, s.beta_max);
}

inline GaussianMixturePrior build_prior(const PriorSpec& p) {
  if (p.modes.empty()) throw ConfigError("prior.modes: sampling needs at least one mode");
  std::vector<GaussianMixturePrior::Component> comps;
  Eigen::Index dim = -1;
  for (std::size_t i = 0; i < p.modes.size(); ++i) {
    const auto& m = p.modes[i];
    Vector mean = load_scene(m.source).to_state();
    if (dim >= 0 && mean.size() != dim) {
      throw ConfigError("prior.modes[" + std::to_string(i) + "]: state size " + std::to_string(mean.size()) +
                        " differs from " + std::to_string(dim));
    }
    dim = mean.size();
    comps.push_back({m.weight, std::move(mean), m.stddev.value_or(p.stddev)});
  }
  return GaussianMixturePrior::normalized(std::move(comps));
}

inline Guidance build_guidance(const SamplerSpec& s) {
  if (s.guidance == "fcm") return s.fcm;
  if (s.guidance == "dps") return s.dps;
  return NoGuidance{};
}

/// One measurement per camera, loaded from its reference file or rendered
/// from the ground-truth scene.
inline std::vector<Measurement> build_measurements(const ExperimentConfig& cfg,
                                                   const std::optional<ColoredPointCloud>& truth) {
  if (cfg.cameras.empty()) throw ConfigError("cameras: at least one camera is required");
  std::vector<Measurement> out;
  for (const auto& c : cfg.cameras) {
    const Camera cam = build_camera(c);
    if (c.reference.empty()) {
      if (!truth) throw ConfigError("camera without reference needs a scene");
      out.push_back(make_measurement(c.op, *truth, cam, cfg.raster));
      continue;
    }
    Measurement m{c.op, cam, cfg.raster, Image{}};
    if (c.op == OperatorKind::color) {
      m.reference = read_ppm(std::filesystem::path(c.reference));
    } else {
      m.reference = read_pfm(std::filesystem::path(c.reference));
    }
    out.push_back(std::move(m));
  }
  return out;
}

/// Everything a sampling run needs, built once from a config.
struct Experiment {
  ExperimentConfig config;
  std::optional<ColoredPointCloud> truth;
  std::size_t channels = 3;
  std::vector<Measurement> views;
  OracleDenoiser denoiser;
  RenderObjective objective;
};

inline Experiment build_experiment(const ExperimentConfig& cfg) {
  std::optional<ColoredPointCloud> truth;
  if (cfg.scene) truth = load_scene(*cfg.scene);
  GaussianMixturePrior prior = build_prior(cfg.prior);
  const std::size_t channels = static_cast<std::size_t>(cfg.raster.background_color.size());
  if (prior.dim() % static_cast<Eigen::Index>(3 + channels) != 0) {
    throw ConfigError("prior state size does not match " + std::to_string(channels) + " feature channels");
  }
  if (truth && truth->state_size() != prior.dim()) {
    throw ConfigError("scene state size " + std::to_string(truth->state_size()) + " differs from prior state size " +
                      std::to_string(prior.dim()));
  }
  auto views = build_measurements(cfg, truth);
  for (const auto& v : views) {
    try {
      v.validate(channels);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("measurement: ") + e.what());
    }
  }
  RenderObjective objective(views, channels);
  return Experiment{cfg,
                    std::move(truth),
                    channels,
                    std::move(views),
                    OracleDenoiser(std::move(prior), build_schedule(cfg.schedule)),
                    std::move(objective)};
}

// ---------------------------------------------------------------------------
// Drivers

struct RunResult {
  SampleResult sample;
  double final_residual = 0.0;
  std::optional<MetricReport> metrics;
};

inline std::optional<MetricReport> metrics_against_truth(const Experiment& ex, const ColoredPointCloud& cloud) {
  if (!ex.truth || ex.truth->size() != cloud.size() || cloud.size() > kEmdExactLimit) return std::nullopt;
  return evaluate_metrics(cloud.positions(), ex.truth->positions(), ex.config.metrics.tau);
}

/// One posterior sample. Throws NumericalError on divergence.
inline RunResult run_sample(const Experiment& ex, const Guidance& guidance, std::uint64_t seed,
                            int snapshot_every = 0) {
  SamplerConfig sc;
  sc.eta = ex.config.sampler.eta;
  sc.seed = seed;
  sc.guidance = guidance;
  sc.snapshot_every = snapshot_every;
  RenderObjective objective = ex.objective;
  OracleDenoiser denoiser = ex.denoiser;
  RunResult out;
  out.sample = sample_posterior(denoiser, objective, denoiser.schedule(), ex.denoiser.prior().dim(), sc);
  out.final_residual = objective.value(out.sample.x0);
  out.metrics = metrics_against_truth(ex, ColoredPointCloud::from_state(out.sample.x0, ex.channels));
  return out;
}

inline void write_metrics_csv(std::ostream& os, const MetricReport& m, bool header = true) {
  if (header) os << "chamfer_l1,emd,fscore,threshold\n";
  os << detail::format_double(m.chamfer_l1) << ',' << detail::format_double(m.emd) << ','
     << detail::format_double(m.fscore) << ',' << detail::format_double(m.threshold) << '\n';
}

/// Per-timestep residuals followed by `k_columns` flattened FCM inner-step
/// records (empty cells when a step has fewer records).
inline void write_sampler_trace_csv(std::ostream& os, const std::vector<TimestepRecord>& trace, int k_columns) {
  os << "t,residual_before_fcm,residual_after_fcm";
  for (int k = 0; k < k_columns; ++k) {
    os << ",k" << k << "_loss_after,k" << k << "_g_norm,k" << k << "_alpha_raw,k" << k << "_alpha_final,k" << k
       << "_halved";
  }
  os << '\n';
  for (const auto& r : trace) {
    os << r.t << ',' << detail::format_double(r.residual_before) << ',' << detail::format_double(r.residual_after);
    for (int k = 0; k < k_columns; ++k) {
      if (static_cast<std::size_t>(k) < r.fcm.size()) {
        const auto& f = r.fcm[static_cast<std::size_t>(k)];
        os << ',' << detail::format_double(f.loss_after) << ',' << detail::format_double(f.g_norm) << ','
           << detail::format_double(f.alpha_raw) << ',' << detail::format_double(f.alpha_final) << ','
           << (f.halved ? 1 : 0);
      } else {
        os << ",,,,,";
      }
    }
    os << '\n';
  }
}

inline void write_view(const std::filesystem::path& stem, const ColoredPointCloud& cloud, const Measurement& m) {
  if (m.kind == OperatorKind::color) {
    write_ppm(std::filesystem::path(stem.string() + ".ppm"), render_color(cloud, m.camera, m.raster));
  } else {
    write_pfm(std::filesystem::path(stem.string() + ".pfm"), render_depth(cloud, m.camera, m.raster));
  }
}

inline std::string view_name(std::size_t i) {
  std::string s = std::to_string(i);
  return "view_" + std::string(s.size() < 2 ? 2 - s.size() : 0, '0') + s;
}

/// Renders the scene through every camera into `out_dir`.
inline std::vector<std::filesystem::path> render_views(const ExperimentConfig& cfg,
                                                       const std::filesystem::path& out_dir) {
  if (!cfg.scene) throw ConfigError("render needs a scene");
  const ColoredPointCloud cloud = load_scene(*cfg.scene);
  std::vector<std::filesystem::path> written;
  for (std::size_t i = 0; i < cfg.cameras.size(); ++i) {
    const auto& c = cfg.cameras[i];
    Measurement m{c.op, build_camera(c), cfg.raster, Image{}};
    const auto stem = out_dir / view_name(i);
    write_view(stem, cloud, m);
    written.push_back(stem.string() + (c.op == OperatorKind::color ? ".ppm" : ".pfm"));
  }
  return written;
}

/// Full reconstruction: final PLY, trace CSV, snapshots of view 0, metrics.
inline RunResult reconstruct(const Experiment& ex, const std::filesystem::path& out_dir) {
  const auto& sm = ex.config.sampler;
  RunResult r = run_sample(ex, build_guidance(sm), sm.seed, sm.snapshot_every);
  const ColoredPointCloud cloud = ColoredPointCloud::from_state(r.sample.x0, ex.channels);
  write_ply(out_dir / "reconstruction.ply", cloud);
  {
    auto os = detail::open_out(out_dir / "trace.csv");
    write_sampler_trace_csv(os, r.sample.trace, sm.guidance == "fcm" ? sm.fcm.k_fcm : 0);
  }
  for (const auto& snap : r.sample.snapshots) {
    const auto c = ColoredPointCloud::from_state(snap.x0, ex.channels);
    const std::string t = std::to_string(snap.t);
    const auto stem = out_dir / "snapshots" / ("t" + std::string(t.size() < 4 ? 4 - t.size() : 0, '0') + t);
    write_ply(std::filesystem::path(stem.string() + ".ply"), c);
    write_view(stem, c, ex.views.front());
  }
  if (r.metrics) {
    auto os = detail::open_out(out_dir / "metrics.csv");
    write_metrics_csv(os, *r.metrics);
  }
  return r;
}

// ---------------------------------------------------------------------------
// FCM vs DPS ablation

struct AblationRun {
  std::string method;  // "fcm" or "dps"
  double gamma = 0.0;  // DPS step; 0 for FCM
  std::uint64_t seed = 0;
  std::vector<double> residuals;  // residual after refinement, t = T .. 1
  double final_residual = 0.0;
  std::optional<MetricReport> metrics;
};

struct AblationResult {
  std::vector<int> timesteps;
  std::vector<double> gammas;
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRun> runs;  // per gamma x seed for DPS, then per seed for FCM
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Matched-NFE trajectories: one denoiser call per timestep for every method,
/// FCM with its k_fcm refinements, DPS with the configured number of fixed
/// steps for each gamma in the grid. Seeds run sequentially in a fixed order.
inline AblationResult run_ablation(const Experiment& ex, std::uint64_t base_seed) {
  const auto& cfg = ex.config;
  AblationResult out;
  out.gammas = cfg.ablation.gammas;
  for (int s = 0; s < cfg.ablation.seeds; ++s) out.seeds.push_back(base_seed + static_cast<std::uint64_t>(s));
  for (int t = cfg.schedule.steps; t >= 1; --t) out.timesteps.push_back(t);

  auto record = [&](std::string method, double gamma, std::uint64_t seed, const Guidance& g) {
    RunResult r = run_sample(ex, g, seed);
    AblationRun run{std::move(method), gamma, seed, {}, r.final_residual, r.metrics};
    for (const auto& tr : r.sample.trace) run.residuals.push_back(tr.residual_after);
    out.runs.push_back(std::move(run));
  };
  for (double gamma : out.gammas) {
    for (auto seed : out.seeds) {
      record("dps", gamma, seed, DPSGuidance{gamma, cfg.sampler.dps.steps});
    }
  }
  for (auto seed : out.seeds) record("fcm", 0.0, seed, cfg.sampler.fcm);
  return out;
}

inline std::vector<const AblationRun*> select_runs(const AblationResult& r, const std::string& method,
                                                   double gamma = 0.0) {
  std::vector<const AblationRun*> out;
  for (const auto& run : r.runs) {
    if (run.method == method && (method != "dps" || run.gamma == gamma)) out.push_back(&run);
  }
  return out;
}

inline double median_final_residual(const AblationResult& r, const std::string& method, double gamma = 0.0) {
  std::vector<double> v;
  for (const auto* run : select_runs(r, method, gamma)) v.push_back(run->final_residual);
  return median(v);
}

inline double median_fscore(const AblationResult& r, const std::string& method, double gamma = 0.0) {
  std::vector<double> v;
  for (const auto* run : select_runs(r, method, gamma)) {
    if (!run->metrics) throw std::invalid_argument("ablation runs carry no metrics (no ground-truth scene)");
    v.push_back(run->metrics->fscore);
  }
  return median(v);
}

/// DPS step size with the lowest median final residual.
inline double best_dps_gamma(const AblationResult& r) {
  double best = r.gammas.front();
  for (double g : r.gammas) {
    if (median_final_residual(r, "dps", g) < median_final_residual(r, "dps", best)) best = g;
  }
  return best;
}

/// Residual columns: t, dps_g<gamma>_s<seed> for each gamma and seed, then fcm_s<seed>.
inline void write_ablation_csv(std::ostream& os, const AblationResult& r) {
  os << 't';
  for (const auto& run : r.runs) {
    if (run.method == "dps") {
      os << ",dps_g" << detail::format_double(run.gamma) << "_s" << run.seed;
    } else {
      os << ',' << run.method << "_s" << run.seed;
    }
  }
  os << '\n';
  for (std::size_t i = 0; i < r.timesteps.size(); ++i) {
    os << r.timesteps[i];
    for (const auto& run : r.runs) os << ',' << detail::format_double(run.residuals[i]);
    os << '\n';
  }
}

inline void write_ablation_summary_csv(std::ostream& os, const AblationResult& r) {
  os << "method,gamma,seed,final_residual,fscore,chamfer_l1,emd\n";
  for (const auto& run : r.runs) {
    os << run.method << ',' << detail::format_double(run.gamma) << ',' << run.seed << ','
       << detail::format_double(run.final_residual);
    if (run.metrics) {
      os << ',' << detail::format_double(run.metrics->fscore) << ',' << detail::format_double(run.metrics->chamfer_l1)
         << ',' << detail::format_double(run.metrics->emd);
    } else {
      os << ",,,";
    }
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Renderer gradient check

/// Footprint radius in pixels for gradient-check scenes. With every point
/// projected within 0.08 px of a pixel center, pixel centers sit at distance
/// <= sqrt(2) + 0.08 or >= 2 - 0.08, both clear of 1.7 px by more than 5%.
inline constexpr double kGradcheckPixelRadius = 1.7;

struct GradcheckScene {
  ColoredPointCloud cloud;
  Measurement measurement;
};

/// Random scene whose fragment selection is locally constant: points are
/// unprojected from jittered pixel centers at random depths, and depths are
/// redrawn until is_boundary_safe() holds.
inline GradcheckScene make_gradcheck_scene(Rng& rng, int points, int resolution, OperatorKind kind) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Camera cam = scenes::orbit_camera(360.0 * unit(rng), 60.0 * unit(rng) - 30.0, 2.5, 50.0, resolution,
                                          resolution);
  RasterConfig raster;
  raster.radius = kGradcheckPixelRadius / cam.ndc_scale();
  std::uniform_int_distribution<int> pixel(1, resolution - 2);
  std::vector<std::array<double, 2>> uv(static_cast<std::size_t>(points));
  for (auto& p : uv) {
    const double r = 0.08 * std::sqrt(unit(rng));
    const double a = 2.0 * std::numbers::pi * unit(rng);
    p = {pixel(rng) + 0.5 + r * std::cos(a), pixel(rng) + 0.5 + r * std::sin(a)};
  }
  Features colors(points, 3);
  for (Eigen::Index i = 0; i < colors.size(); ++i) colors.data()[i] = 0.05 + 0.9 * unit(rng);

  for (int attempt = 0; attempt < 1000; ++attempt) {
    Positions pos(points, 3);
    for (int i = 0; i < points; ++i) {
      const double depth = 1.5 + 2.0 * unit(rng);
      const auto& p = uv[static_cast<std::size_t>(i)];
      pos.row(i) = cam.unproject(p[0], p[1], depth).transpose();
    }
    ColoredPointCloud cloud(std::move(pos), colors);
    if (!is_boundary_safe(cloud, cam, raster)) continue;

    Measurement m{kind, cam, raster, Image{}};
    if (kind == OperatorKind::color) {
      Features other(points, 3);
      for (Eigen::Index i = 0; i < other.size(); ++i) other.data()[i] = unit(rng);
      m.reference = render_color(ColoredPointCloud(cloud.positions(), other), cam, raster);
    } else {
      DepthMap d = render_depth(cloud, cam, raster);
      for (double& v : d.pixels) v += 0.4 * unit(rng) - 0.2;
      m.reference = std::move(d);
    }
    return {std::move(cloud), std::move(m)};
  }
  throw NumericalError("could not build a boundary-safe gradient-check scene");
}

struct GradcheckReport {
  OperatorKind kind = OperatorKind::color;
  std::size_t compared = 0;  // components above the magnitude floor
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

/// Analytic gradient against central differences of the loss.
inline GradcheckReport check_gradient(const ColoredPointCloud& cloud, const Measurement& m, double step,
                                      double magnitude_floor = 1e-6) {
  const Vector analytic = loss_gradient(cloud, m).gradient;
  Vector x = cloud.to_state();
  GradcheckReport rep;
  rep.kind = m.kind;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const double orig = x[j];
    x[j] = orig + step;
    const double up = loss(ColoredPointCloud::from_state(x, cloud.channels()), m);
    x[j] = orig - step;
    const double down = loss(ColoredPointCloud::from_state(x, cloud.channels()), m);
    x[j] = orig;
    const double fd = (up - down) / (2.0 * step);
    const double err = std::abs(analytic[j] - fd);
    rep.max_abs_error = std::max(rep.max_abs_error, err);
    const double scale = std::max(std::abs(analytic[j]), std::abs(fd));
    if (scale > magnitude_floor) {
      ++rep.compared;
      rep.max_rel_error = std::max(rep.max_rel_error, err / scale);
    }
  }
  return rep;
}

/// Alternates color and depth operators across scenes.
inline std::vector<GradcheckReport> run_gradcheck(const GradcheckSpec& spec) {
  Rng rng(spec.seed);
  std::vector<GradcheckReport> out;
  for (int i = 0; i < spec.scenes; ++i) {
    const auto kind = i % 2 == 0 ? OperatorKind::color : OperatorKind::depth;
    const GradcheckScene scene = make_gradcheck_scene(rng, spec.points, spec.resolution, kind);
    out.push_back(check_gradient(scene.cloud, scene.measurement, spec.step));
  }
  return out;
}

inline void write_gradcheck_csv(std::ostream& os, const std::vector<GradcheckReport>& reports) {
  os << "scene,operator,compared,max_rel_error,max_abs_error\n";
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    os << i << ',' << to_string(r.kind) << ',' << r.compared << ',' << detail::format_double(r.max_rel_error) << ','
       << detail::format_double(r.max_abs_error) << '\n';
  }
}

}  // namespace fcmpc
