#pragma once
// Experiment configuration: TOML in, validated struct out.
//
// Precedence is file < environment (ROTO_SEED, ROTO_OUT_DIR) < command line.
// Unknown keys are errors so that typos do not silently fall back to defaults.
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#define TOML_EXCEPTIONS 1
#include "toml.hpp"
#include "json.hpp"

#include "roto/errors.hpp"
#include "roto/gbml.hpp"
#include "roto/homogenizer.hpp"
#include "roto/isi.hpp"
#include "roto/networks.hpp"
#include "roto/taskgen.hpp"

namespace roto::config {

using nlohmann::json;

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t iterations = 1000;
  std::size_t log_interval = 10;
  std::size_t checkpoint_interval = 0;  // 0: only the final checkpoint
  std::string out_dir = "runs";
  std::string encoder = "mlp-small";  // mlp-small, conv-tiny, linear
  std::size_t n_way = 5;
  std::size_t k_shot = 5;
  std::size_t n_query = 15;
  std::size_t tasks = 4;  // N
  tasks::BatchMode batch_mode = tasks::BatchMode::StrongOOD;
  std::vector<std::string> train_families;  // empty: every family
  bool trace = false;
};

struct HomogenizerSection {
  bool enabled = true;
  bool freeze = false;  // omega = 1, gamma = I, never updated
  double beta = 0.1;
  double weight_rate = 5e-4;
  double rotation_rate = 5e-4;
  double omega_min = 1e-3;
  bool normalize = true;
  bool reset_per_batch = false;
  bool bind_by_family = true;
  double p_follower = 0.0;
  double p_leader = 0.51;
  double t0 = 1000.0;
  double anchor = 0.0;  // <= 0: log n for classification, first loss for regression
};

struct EvalConfig {
  std::size_t episodes = 600;
  std::uint64_t seed = 20240601;
  std::size_t steps = 0;  // 0: the training inner-step count
  std::vector<std::string> families;  // empty: the training families
};

struct ExperimentConfig {
  RunConfig run;
  gbml::GbmlConfig gbml;
  HomogenizerSection homogenizer;
  isi::ISIConfig isi;
  std::map<std::string, tasks::FamilySpec> families;
  EvalConfig eval;

  std::vector<std::string> training_family_names() const {
    if (!run.train_families.empty()) return run.train_families;
    std::vector<std::string> all;
    for (const auto& [name, _] : families) all.push_back(name);
    return all;
  }

  std::vector<std::string> eval_family_names() const {
    return eval.families.empty() ? training_family_names() : eval.families;
  }

  void validate() const;
  json to_json() const;
  std::string hash() const;
};

namespace detail {

/// Reads keys out of one JSON object and remembers which were consumed.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected a table");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    out = convert<T>(*it, path_ + "." + key);
  }

  bool has(const char* key) const { return j_.contains(key); }

  const json& raw(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(path_ + ": unknown key '" + it.key() + "'");
  }

  template <class T>
  static T convert(const json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where + ": expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where + ": expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where + ": expected a number");
      return v.get<double>();
    } else if constexpr (std::is_unsigned_v<T>) {
      if (v.is_number_unsigned()) return static_cast<T>(v.get<std::uint64_t>());
      if (v.is_number_integer()) throw ConfigError(where + ": must be >= 0");
      throw ConfigError(where + ": expected a non-negative integer");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
      return static_cast<T>(v.get<std::int64_t>());
    } else {
      if (!v.is_array()) throw ConfigError(where + ": expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i)
        out.push_back(convert<typename T::value_type>(v[i], where + "[" + std::to_string(i) + "]"));
      return out;
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline json from_toml_node(const toml::node& n, const std::string& where) {
  if (auto t = n.as_table()) {
    json o = json::object();
    for (auto&& [k, v] : *t) o[std::string(k.str())] = from_toml_node(v, where + "." + std::string(k.str()));
    return o;
  }
  if (auto a = n.as_array()) {
    json o = json::array();
    for (auto&& v : *a) o.push_back(from_toml_node(v, where));
    return o;
  }
  if (auto s = n.as_string()) return s->get();
  if (auto i = n.as_integer()) {
    const std::int64_t v = i->get();
    return v >= 0 ? json(static_cast<std::uint64_t>(v)) : json(v);
  }
  if (auto f = n.as_floating_point()) return f->get();
  if (auto b = n.as_boolean()) return b->get();
  throw ConfigError(where + ": dates and times are not supported");
}

inline tasks::FamilySpec family_from_json(const std::string& name, const json& j) {
  Section s(j, "families." + name);
  tasks::FamilySpec f;
  f.name = name;
  std::string kind = "gaussian-blobs";
  s.get("kind", kind);
  f.kind = tasks::family_kind_from(kind);
  s.get("seed", f.seed);
  s.get("dim", f.dim);
  s.get("classes", f.num_classes);
  s.get("spread", f.center_spread);
  s.get("noise", f.noise);
  s.get("scale", f.input_scale);
  s.get("shift", f.input_shift);
  s.get("train_fraction", f.train_fraction);
  s.get("amp_lo", f.amp_lo);
  s.get("amp_hi", f.amp_hi);
  s.get("phase_lo", f.phase_lo);
  s.get("phase_hi", f.phase_hi);
  s.get("x_lo", f.x_lo);
  s.get("x_hi", f.x_hi);
  s.get("side", f.image_side);
  s.get("period", f.texture_period);
  s.get("correlation", f.texture_correlation);
  s.get("amplitude", f.texture_amplitude);
  s.get("pixel_noise", f.pixel_noise);
  if (s.has("atoms") || s.has("labels") || s.has("probs")) {
    tasks::DiscreteMeasure m;
    s.get("atoms", m.atoms);
    s.get("labels", m.labels);
    s.get("probs", m.probs);
    f.base_measure = m;
  }
  s.finish();
  return f;
}

inline json family_to_json(const tasks::FamilySpec& f) {
  json j{{"kind", tasks::to_string(f.kind)}, {"seed", f.seed}};
  if (f.base_measure) {
    j["atoms"] = f.base_measure->atoms;
    j["labels"] = f.base_measure->labels;
    j["probs"] = f.base_measure->probs;
    return j;
  }
  switch (f.kind) {
    case tasks::FamilyKind::GaussianBlobs:
      j.update({{"dim", f.dim}, {"classes", f.num_classes}, {"spread", f.center_spread}, {"noise", f.noise},
                {"scale", f.input_scale}, {"shift", f.input_shift}, {"train_fraction", f.train_fraction}});
      break;
    case tasks::FamilyKind::SinusoidRegression:
      j.update({{"amp_lo", f.amp_lo}, {"amp_hi", f.amp_hi}, {"phase_lo", f.phase_lo}, {"phase_hi", f.phase_hi},
                {"x_lo", f.x_lo}, {"x_hi", f.x_hi}});
      break;
    case tasks::FamilyKind::ShapeTexture:
      j.update({{"side", f.image_side}, {"period", f.texture_period}, {"correlation", f.texture_correlation},
                {"amplitude", f.texture_amplitude}, {"pixel_noise", f.pixel_noise}});
      break;
  }
  return j;
}

}  // namespace detail

/// Build a config from the JSON image of a TOML document.
inline ExperimentConfig from_json(const json& root) {
  ExperimentConfig c;
  detail::Section top(root, "config");

  if (root.contains("run")) {
    detail::Section s(top.raw("run"), "run");
    auto& r = c.run;
    s.get("seed", r.seed);
    s.get("iterations", r.iterations);
    s.get("log_interval", r.log_interval);
    s.get("checkpoint_interval", r.checkpoint_interval);
    s.get("out_dir", r.out_dir);
    s.get("encoder", r.encoder);
    s.get("n_way", r.n_way);
    s.get("k_shot", r.k_shot);
    s.get("n_query", r.n_query);
    s.get("tasks", r.tasks);
    std::string mode = tasks::to_string(r.batch_mode);
    s.get("batch_mode", mode);
    r.batch_mode = tasks::batch_mode_from(mode);
    s.get("train_families", r.train_families);
    s.get("trace", r.trace);
    s.finish();
  }
  if (root.contains("gbml")) {
    detail::Section s(top.raw("gbml"), "gbml");
    auto& g = c.gbml;
    std::string bb = gbml::to_string(g.backbone);
    s.get("backbone", bb);
    g.backbone = gbml::backbone_from(bb);
    s.get("inner_steps", g.inner_steps);
    s.get("inner_rate", g.inner_rate);
    s.get("outer_rate", g.outer_rate);
    s.get("imaml_lambda", g.imaml_lambda);
    s.get("cg_iters", g.cg_iters);
    s.get("cg_tol", g.cg_tol);
    s.get("cg_max_residual", g.cg_max_residual);
    s.finish();
  }
  if (root.contains("homogenizer")) {
    detail::Section s(top.raw("homogenizer"), "homogenizer");
    auto& h = c.homogenizer;
    s.get("enabled", h.enabled);
    s.get("freeze", h.freeze);
    s.get("beta", h.beta);
    s.get("weight_rate", h.weight_rate);
    s.get("rotation_rate", h.rotation_rate);
    s.get("omega_min", h.omega_min);
    s.get("normalize", h.normalize);
    s.get("reset_per_batch", h.reset_per_batch);
    s.get("bind_by_family", h.bind_by_family);
    s.get("p_follower", h.p_follower);
    s.get("p_leader", h.p_leader);
    s.get("t0", h.t0);
    s.get("anchor", h.anchor);
    s.finish();
  }
  if (root.contains("isi")) {
    detail::Section s(top.raw("isi"), "isi");
    auto& i = c.isi;
    s.get("enabled", i.enabled);
    s.get("hooked_layers", i.hooked_layers);
    s.get("patch", i.patch);
    s.get("stride", i.stride);
    s.get("radius", i.radius);
    s.get("bandwidth", i.bandwidth);
    s.get("temperature", i.temperature);
    s.get("drop_rate", i.drop_rate);
    s.get("normalize", i.normalize);
    s.get("info_cap", i.info_cap);
    s.finish();
  }
  if (root.contains("families")) {
    const json& fams = top.raw("families");
    if (!fams.is_object()) throw ConfigError("families: expected a table of named families");
    for (auto it = fams.begin(); it != fams.end(); ++it) c.families[it.key()] = detail::family_from_json(it.key(), *it);
  }
  if (root.contains("eval")) {
    detail::Section s(top.raw("eval"), "eval");
    s.get("episodes", c.eval.episodes);
    s.get("seed", c.eval.seed);
    s.get("steps", c.eval.steps);
    s.get("families", c.eval.families);
    s.finish();
  }
  top.finish();
  return c;
}

inline json ExperimentConfig::to_json() const {
  json fams = json::object();
  for (const auto& [name, f] : families) fams[name] = detail::family_to_json(f);
  return json{
      {"run",
       {{"seed", run.seed},
        {"iterations", run.iterations},
        {"log_interval", run.log_interval},
        {"checkpoint_interval", run.checkpoint_interval},
        {"out_dir", run.out_dir},
        {"encoder", run.encoder},
        {"n_way", run.n_way},
        {"k_shot", run.k_shot},
        {"n_query", run.n_query},
        {"tasks", run.tasks},
        {"batch_mode", tasks::to_string(run.batch_mode)},
        {"train_families", run.train_families},
        {"trace", run.trace}}},
      {"gbml",
       {{"backbone", gbml::to_string(gbml.backbone)},
        {"inner_steps", gbml.inner_steps},
        {"inner_rate", gbml.inner_rate},
        {"outer_rate", gbml.outer_rate},
        {"imaml_lambda", gbml.imaml_lambda},
        {"cg_iters", gbml.cg_iters},
        {"cg_tol", gbml.cg_tol},
        {"cg_max_residual", gbml.cg_max_residual}}},
      {"homogenizer",
       {{"enabled", homogenizer.enabled},
        {"freeze", homogenizer.freeze},
        {"beta", homogenizer.beta},
        {"weight_rate", homogenizer.weight_rate},
        {"rotation_rate", homogenizer.rotation_rate},
        {"omega_min", homogenizer.omega_min},
        {"normalize", homogenizer.normalize},
        {"reset_per_batch", homogenizer.reset_per_batch},
        {"bind_by_family", homogenizer.bind_by_family},
        {"p_follower", homogenizer.p_follower},
        {"p_leader", homogenizer.p_leader},
        {"t0", homogenizer.t0},
        {"anchor", homogenizer.anchor}}},
      {"isi",
       {{"enabled", isi.enabled},
        {"hooked_layers", isi.hooked_layers},
        {"patch", isi.patch},
        {"stride", isi.stride},
        {"radius", isi.radius},
        {"bandwidth", isi.bandwidth},
        {"temperature", isi.temperature},
        {"drop_rate", isi.drop_rate},
        {"normalize", isi.normalize},
        {"info_cap", isi.info_cap}}},
      {"families", fams},
      {"eval", {{"episodes", eval.episodes}, {"seed", eval.seed}, {"steps", eval.steps}, {"families", eval.families}}}};
}

/// 16 hex digits of FNV-1a over the canonical JSON dump. Output locations
/// and logging cadence are excluded so that moving a run keeps its hash.
inline std::string ExperimentConfig::hash() const {
  json j = to_json();
  j["run"].erase("out_dir");
  j["run"].erase("log_interval");
  j["run"].erase("checkpoint_interval");
  j["run"].erase("trace");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(tasks::fnv1a(j.dump())));
  return buf;
}

inline void ExperimentConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (run.iterations > 0 && run.log_interval == 0) fail("run.log_interval must be >= 1");
  if (run.n_way < 1 || run.k_shot < 1 || run.n_query < 1) fail("run: n_way, k_shot and n_query must be >= 1");
  if (run.tasks < 1) fail("run.tasks (N) must be >= 1");
  if (run.encoder != "mlp-small" && run.encoder != "conv-tiny" && run.encoder != "linear")
    fail("run.encoder: unknown encoder '" + run.encoder + "'");
  if (!(gbml.inner_rate > 0.0) || !(gbml.outer_rate > 0.0)) fail("gbml: rates must be > 0");
  if (gbml.inner_steps < 1) fail("gbml.inner_steps must be >= 1");
  if (!(gbml.imaml_lambda > 0.0)) fail("gbml.imaml_lambda must be > 0");
  if (gbml.cg_iters < 1) fail("gbml.cg_iters must be >= 1");
  const auto& h = homogenizer;
  if (!(h.weight_rate > 0.0) || !(h.rotation_rate > 0.0)) fail("homogenizer: rates must be > 0");
  if (!(h.beta >= 0.0)) fail("homogenizer.beta must be >= 0");
  if (!(h.omega_min > 0.0 && h.omega_min < 1.0)) fail("homogenizer.omega_min must be in (0, 1)");
  if (!(h.t0 > 0.0)) fail("homogenizer.t0 must be > 0");
  if (!(h.p_follower >= 0.0) || !(h.p_leader > h.p_follower))
    fail("homogenizer: need 0 <= p_follower < p_leader");
  if (isi.enabled && run.encoder != "conv-tiny") fail("isi: masks attach to conv layers; use encoder conv-tiny");
  try {
    isi.validate();
  } catch (const PreconditionError& e) {
    fail(e.what());
  }
  if (families.empty()) fail("no families defined");
  for (const auto& [name, f] : families) {
    try {
      f.validate();
    } catch (const PreconditionError& e) {
      fail("families." + name + ": " + e.what());
    }
  }
  auto check_refs = [&](const std::vector<std::string>& names, const char* where) {
    for (const auto& n : names)
      if (!families.count(n)) fail(std::string(where) + ": family '" + n + "' is not defined");
  };
  check_refs(run.train_families, "run.train_families");
  check_refs(eval.families, "eval.families");
  if (run.batch_mode == tasks::BatchMode::StrongOOD && training_family_names().size() < run.tasks)
    fail("run: strong-ood batches need at least N = " + std::to_string(run.tasks) + " training families");
  if (eval.episodes < 1) fail("eval.episodes must be >= 1");
}

inline ExperimentConfig parse_toml(std::string_view text, const std::string& source = "config") {
  toml::table t;
  try {
    t = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    std::string msg = source + ":" + std::to_string(e.source().begin.line) + ": " + std::string(e.description());
    throw ConfigError(msg);
  }
  return from_json(detail::from_toml_node(t, "config"));
}

inline ExperimentConfig load_file(const std::string& path) {
  toml::table t;
  try {
    t = toml::parse_file(path);
  } catch (const toml::parse_error& e) {
    throw ConfigError(path + ":" + std::to_string(e.source().begin.line) + ": " + std::string(e.description()));
  }
  return from_json(detail::from_toml_node(t, "config"));
}

inline void apply_env(ExperimentConfig& c) {
  if (const char* s = std::getenv("ROTO_SEED"); s && *s) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (*end != '\0' || s[0] == '-') throw ConfigError("ROTO_SEED: not a non-negative integer: '" + std::string(s) + "'");
    c.run.seed = v;
  }
  if (const char* d = std::getenv("ROTO_OUT_DIR"); d && *d) c.run.out_dir = d;
}

/// Architecture for the configured encoder, checked against every family
/// the run touches.
inline nn::Architecture architecture(const ExperimentConfig& c) {
  std::vector<std::string> names = c.training_family_names();
  for (const auto& n : c.eval_family_names()) names.push_back(n);
  std::optional<Shape> input;
  bool regression = false;
  for (const auto& n : names) {
    auto it = c.families.find(n);
    if (it == c.families.end()) throw ConfigError("family '" + n + "' is not defined");
    tasks::TaskDistribution f = tasks::make_family(it->second);
    if (input && !(*input == f.input_shape))
      throw ConfigError("family '" + n + "' has input shape " + f.input_shape.str() + ", expected " + input->str());
    input = f.input_shape;
    regression = regression || f.regression();
  }
  if (!input) throw ConfigError("no families to size the encoder");
  const std::size_t outputs = regression ? 1 : c.run.n_way;
  nn::Architecture a;
  if (c.run.encoder == "mlp-small") {
    if (input->rank() != 1) throw ConfigError("encoder mlp-small needs flat inputs, families give " + input->str());
    a = nn::mlp_small((*input)[0], outputs);
  } else if (c.run.encoder == "conv-tiny") {
    if (input->rank() != 3) throw ConfigError("encoder conv-tiny needs image inputs, families give " + input->str());
    a = nn::conv_tiny(outputs, (*input)[0], (*input)[2]);
    for (auto l : c.isi.hooked_layers)
      if (c.isi.enabled && l >= a.encoder.size()) throw ConfigError("isi.hooked_layers: no encoder layer " + std::to_string(l));
  } else if (c.run.encoder == "linear") {
    a.name = "linear";
    a.input = Shape{input->numel()};
    if (input->rank() != 1) throw ConfigError("encoder linear needs flat inputs, families give " + input->str());
    a.outputs = outputs;
  } else {
    throw ConfigError("unknown encoder '" + c.run.encoder + "'");
  }
  a.validate();
  return a;
}

}  // namespace roto::config
