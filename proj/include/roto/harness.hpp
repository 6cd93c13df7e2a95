#pragma once
// Experiment orchestration: meta-training, meta-testing, diagnostics, sweeps.
//
// Each training step runs, in order: sample a batch, inner loops (with ISI),
// rotate features, weighted outer losses, psi update, omega update, gamma
// update. Every number written to the event stream is a function of the
// config and seed; wall time only goes to the CSV summary.
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "roto/checkpoint.hpp"
#include "roto/config.hpp"
#include "roto/diagnostics.hpp"
#include "roto/errors.hpp"
#include "roto/gbml.hpp"
#include "roto/homogenizer.hpp"
#include "roto/networks.hpp"
#include "roto/random.hpp"
#include "roto/taskgen.hpp"

namespace roto::harness {

using nlohmann::json;
using config::ExperimentConfig;

inline constexpr int kRecordVersion = 1;

inline std::vector<tasks::TaskDistribution> make_families(const ExperimentConfig& c,
                                                          const std::vector<std::string>& names) {
  std::vector<tasks::TaskDistribution> out;
  for (const auto& n : names) {
    auto it = c.families.find(n);
    if (it == c.families.end()) throw ConfigError("family '" + n + "' is not defined");
    out.push_back(tasks::make_family(it->second));
  }
  return out;
}

inline bool all_finite(std::span<const Tensor> ts) {
  for (const auto& t : ts)
    for (double v : t.data())
      if (!std::isfinite(v)) return false;
  return true;
}

/// Independent streams for initialization, episode sampling and ISI masks.
struct Streams {
  Rng init, data, isi;
  explicit Streams(std::uint64_t seed) : init(0), data(0), isi(0) {
    Rng master(seed);
    init = master.split();
    data = master.split();
    isi = master.split();
  }
};

inline homog::HomogenizerState initial_homogenizer(const ExperimentConfig& c, const nn::Architecture& arch,
                                                   bool regression) {
  homog::HomogenizerConfig h;
  h.slots = c.run.tasks;
  h.feature_dim = arch.feature_dim();
  h.beta = c.homogenizer.beta;
  h.weight_rate = c.homogenizer.weight_rate;
  h.rotation_rate = c.homogenizer.rotation_rate;
  h.omega_min = c.homogenizer.omega_min;
  h.normalize = c.homogenizer.normalize;
  h.reset_per_batch = c.homogenizer.reset_per_batch;
  h.anchor = c.homogenizer.anchor > 0.0 ? c.homogenizer.anchor
                                        : (regression ? 0.0 : homog::classification_anchor(c.run.n_way));
  return homog::HomogenizerState::init(h);
}

/// Summary of one set of task gradients for the event stream.
inline json geometry_json(const diag::GradReport& r) {
  return {{"mean_cosine", r.mean_cosine}, {"magnitude_cv", r.magnitude_cv}, {"norms", r.norms}};
}

// ---------------------------------------------------------------------------
// Training.

struct Sinks {
  std::ostream* events = nullptr;             // JSONL
  std::function<void(const json&)> on_record;  // every emitted record
  gbml::TraceFn trace;                         // step-ordering log
  std::string abort_checkpoint;                // where the last good state goes on abort
  std::string checkpoint_dir;                  // periodic checkpoint-<step>.bin files, when set
  // After every completed step, once the leader has moved.
  std::function<void(std::size_t step, const gbml::MetaState&, const homog::HomogenizerState*,
                     const gbml::MetaStepResult&)>
      on_step;
};

struct TrainResult {
  ckpt::Checkpoint checkpoint;
  std::size_t steps = 0;
  bool aborted = false;
  std::string abort_reason;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  double wall_seconds = 0.0;
};

namespace detail {

inline void emit(const Sinks& s, const json& rec) {
  if (s.events) *s.events << rec.dump() << '\n';
  if (s.on_record) s.on_record(rec);
}

inline ckpt::Checkpoint make_checkpoint(const ExperimentConfig& c, const gbml::MetaState& meta,
                                        const std::optional<homog::HomogenizerState>& hs, const Streams& st) {
  ckpt::Checkpoint k;
  k.config_json = c.to_json().dump();
  k.step = meta.step;
  k.params = meta.params.tensors;
  k.adam = meta.adam;
  k.homogenizer = hs;
  k.data_rng = st.data.state();
  k.isi_rng = st.isi.state();
  return k;
}

}  // namespace detail

inline TrainResult train(const ExperimentConfig& c, const Sinks& sinks = {}) {
  c.validate();
  const auto start = std::chrono::steady_clock::now();
  const nn::Architecture arch = config::architecture(c);
  const std::vector<tasks::TaskDistribution> fams = make_families(c, c.training_family_names());
  const bool regression = fams.front().regression();
  for (const auto& f : fams)
    if (f.regression() != regression) throw ConfigError("training families mix regression and classification");

  Streams st(c.run.seed);
  gbml::MetaState meta = gbml::MetaState::init(arch, c.gbml, st.init);
  std::optional<homog::HomogenizerState> hs;
  if (c.homogenizer.enabled) hs = initial_homogenizer(c, arch, regression);
  const bool leader = hs && !c.homogenizer.freeze;
  const bool report = hs && c.run.tasks >= 2;

  homog::ScheduleConfig weight_sched{c.gbml.outer_rate, c.homogenizer.weight_rate, c.homogenizer.p_follower,
                                     c.homogenizer.p_leader, c.homogenizer.t0};
  homog::ScheduleConfig rotation_sched = weight_sched;
  rotation_sched.leader_rate = c.homogenizer.rotation_rate;

  detail::emit(sinks, {{"event", "start"},
                       {"version", kRecordVersion},
                       {"config_hash", c.hash()},
                       {"seed", c.run.seed},
                       {"architecture", arch.name},
                       {"parameters", meta.params.count()},
                       {"config", c.to_json()}});

  TrainResult res;
  const auto& trace = sinks.trace;
  for (std::size_t t = 0; t < c.run.iterations; ++t) {
    const gbml::MetaState good_meta = meta;
    const std::optional<homog::HomogenizerState> good_hs = hs;
    const std::string good_data = st.data.state(), good_isi = st.isi.state();

    if (trace) trace("sample_batch step=" + std::to_string(t));
    tasks::MetaBatch batch = tasks::sample_minibatch(fams, c.run.n_way, c.run.k_shot, c.run.n_query, c.run.tasks,
                                                     c.run.batch_mode, st.data, tasks::ClassSplit::Train);
    std::vector<std::size_t> binding;
    if (hs) {
      std::vector<std::uint64_t> ids;
      for (const auto& e : batch.episodes) ids.push_back(e.family_id);
      binding = homog::reset_for_batch(*hs, ids, c.homogenizer.bind_by_family);
    }
    const homog::Rates wr = homog::stackelberg_schedule(t, weight_sched);
    const double rot_rate = homog::stackelberg_schedule(t, rotation_sched).leader;

    std::string failure;
    gbml::MetaStepResult r;
    try {
      r = gbml::meta_step(meta, batch, hs ? &*hs : nullptr, binding, &c.isi, st.isi, wr.follower, trace);
      if (!std::isfinite(r.mean_loss) || !std::isfinite(r.mean_weighted_loss)) failure = "non-finite outer loss";
      else if (!all_finite(meta.params.tensors)) failure = "non-finite parameters after the meta-update";
    } catch (const NumericError& e) {
      failure = e.what();
    }
    if (!failure.empty()) {
      meta = good_meta;
      hs = good_hs;
      st.data.set_state(good_data);
      st.isi.set_state(good_isi);
      res.aborted = true;
      res.abort_reason = failure;
      res.checkpoint = detail::make_checkpoint(c, meta, hs, st);
      if (!sinks.abort_checkpoint.empty()) ckpt::save(res.checkpoint, sinks.abort_checkpoint);
      detail::emit(sinks, {{"event", "abort"}, {"step", t + 1}, {"reason", failure}, {"last_good_step", meta.step}});
      break;
    }

    std::optional<diag::HomogeneityReport> applied;
    if (report) applied = diag::homogeneity_report(r.snapshot);
    homog::ReweightReport rw;
    if (leader) {
      rw = homog::reweight_update(*hs, r.snapshot, wr.leader);
      if (trace) trace("update_omega step=" + std::to_string(meta.step));
      homog::rotation_update(*hs, r.snapshot, rot_rate);
      if (trace) trace("update_gamma step=" + std::to_string(meta.step));
    }
    res.steps = t + 1;
    res.final_loss = r.mean_loss;
    if (sinks.on_step) sinks.on_step(t + 1, meta, hs ? &*hs : nullptr, r);

    const std::size_t s = t + 1;
    if (c.run.checkpoint_interval > 0 && s % c.run.checkpoint_interval == 0 && !sinks.checkpoint_dir.empty()) {
      const std::string file = "checkpoint-" + std::to_string(s) + ".bin";
      ckpt::save(detail::make_checkpoint(c, meta, hs, st), (std::filesystem::path(sinks.checkpoint_dir) / file).string());
      detail::emit(sinks, {{"event", "checkpoint"}, {"step", s}, {"file", file}});
    }
    if (s % c.run.log_interval != 0 && s != c.run.iterations) continue;
    json rec{{"event", "step"},
             {"step", s},
             {"loss", r.mean_loss},
             {"weighted_loss", r.mean_weighted_loss},
             {"follower_rate", wr.follower},
             {"weight_rate", wr.leader},
             {"rotation_rate", rot_rate}};
    std::vector<std::string> fam_names;
    for (const auto& e : batch.episodes)
      for (const auto& f : fams)
        if (f.id == e.family_id) {
          fam_names.push_back(f.spec.name);
          break;
        }
    rec["families"] = fam_names;
    if (hs) {
      rec["omega"] = hs->omega;
      rec["binding"] = binding;
    }
    if (leader) rec["balance_loss"] = rw.loss;
    if (applied) {
      // "after" applies this step's updated omega and gamma to the same task gradients.
      homog::GradSnapshot post = r.snapshot;
      for (std::size_t i = 0; i < post.size(); ++i) {
        post.rotated_grads[i] = hs->rotation[i] * post.feature_grads[i];
        post.weighted_norms[i] = hs->omega[i] * post.encoder_norms[i];
      }
      post.finalize();
      const diag::HomogeneityReport after = diag::homogeneity_report(post);
      rec["homogeneity"] = {{"before", geometry_json(applied->before)},
                            {"applied", geometry_json(applied->after)},
                            {"after", geometry_json(after.after)}};
    }
    detail::emit(sinks, rec);
  }

  if (!res.aborted) res.checkpoint = detail::make_checkpoint(c, meta, hs, st);
  detail::emit(sinks, {{"event", "end"},
                       {"steps", res.steps},
                       {"status", res.aborted ? "aborted" : "ok"},
                       {"final_loss", res.final_loss}});
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

// ---------------------------------------------------------------------------
// Meta-testing.

struct EvalResult {
  std::string metric = "accuracy";  // "mse" for regression families
  double mean = 0.0;
  double sigma = 0.0;  // population standard deviation over episodes
  double ci95 = 0.0;   // 1.96 sigma / sqrt(episodes)
  std::size_t episodes = 0;
  std::vector<std::string> families;
  std::vector<double> scores;

  json to_json() const {
    return {{"event", "eval"}, {"metric", metric}, {"mean", mean},         {"ci95", ci95},
            {"sigma", sigma},  {"episodes", episodes}, {"families", families}};
  }
};

inline EvalResult summarize(std::vector<double> scores) {
  require(!scores.empty(), "summarize: no episodes");
  EvalResult r;
  const double n = static_cast<double>(scores.size());
  // Deviations from the first score keep identical scores exactly at sigma = 0.
  const double s0 = scores.front();
  double m = 0.0;
  for (double v : scores) m += v - s0;
  m /= n;
  double var = 0.0;
  for (double v : scores) var += (v - s0 - m) * (v - s0 - m);
  r.mean = s0 + m;
  r.sigma = std::sqrt(var / n);
  r.ci95 = 1.96 * r.sigma / std::sqrt(n);
  r.episodes = scores.size();
  r.scores = std::move(scores);
  return r;
}

struct EvalOptions {
  std::vector<std::string> families;  // empty: from the checkpoint's config
  std::size_t episodes = 0;           // 0: from the config
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
};

/// Fine-tune on each test-split support set with ISI and the homogenizer
/// removed; score the query set. Episodes go round-robin over the families.
inline EvalResult evaluate(const ckpt::Checkpoint& k, const EvalOptions& o = {}) {
  const ExperimentConfig c = config::from_json(json::parse(k.config_json));
  const nn::Architecture arch = config::architecture(c);
  const std::vector<std::string> names = o.families.empty() ? c.eval_family_names() : o.families;
  const std::vector<tasks::TaskDistribution> fams = make_families(c, names);
  for (std::size_t i = 0; i < fams.size(); ++i)
    if (!(fams[i].input_shape == arch.input))
      throw ConfigError("family '" + names[i] + "' gives inputs " + fams[i].input_shape.str() + " but encoder " +
                        arch.name + " expects " + arch.input.str());
  const std::size_t E = o.episodes ? o.episodes : c.eval.episodes;
  require(E >= 1, "evaluate: episodes must be >= 1");
  const std::size_t steps = o.steps ? *o.steps : (c.eval.steps ? c.eval.steps : c.gbml.inner_steps);
  nn::ModelParams params{arch, k.params};
  Rng rng(o.seed ? *o.seed : c.eval.seed);
  std::vector<double> scores;
  bool regression = false;
  for (std::size_t e = 0; e < E; ++e) {
    const auto& f = fams[e % fams.size()];
    regression = f.regression();
    tasks::Episode ep = tasks::sample_episode(f, c.run.n_way, c.run.k_shot, c.run.n_query, rng, tasks::ClassSplit::Test);
    gbml::EpisodeScore sc = gbml::evaluate_episode(params, c.gbml, ep, steps);
    scores.push_back(regression ? sc.loss : sc.accuracy);
  }
  EvalResult r = summarize(std::move(scores));
  r.metric = regression ? "mse" : "accuracy";
  r.families = names;
  return r;
}

// ---------------------------------------------------------------------------
// Run directories and CSV summaries.

inline std::string run_name(const ExperimentConfig& c) { return "run-" + c.hash() + "-s" + std::to_string(c.run.seed); }

inline const char* summary_header() {
  return "config_hash,seed,backbone,homogenizer,isi,iterations,steps,status,final_loss,metric,eval_mean,eval_ci95,"
         "eval_episodes,wall_seconds";
}

inline std::string summary_row(const ExperimentConfig& c, const TrainResult& t, const EvalResult* e) {
  std::ostringstream os;
  os.precision(10);
  const char* homogenizer = !c.homogenizer.enabled ? "off" : (c.homogenizer.freeze ? "frozen" : "on");
  os << c.hash() << ',' << c.run.seed << ',' << gbml::to_string(c.gbml.backbone) << ',' << homogenizer << ','
     << (c.isi.enabled ? "on" : "off") << ',' << c.run.iterations << ',' << t.steps << ','
     << (t.aborted ? "aborted" : "ok") << ',' << t.final_loss << ',';
  if (e) os << e->metric << ',' << e->mean << ',' << e->ci95 << ',' << e->episodes;
  else os << ",,,";
  os << ',' << t.wall_seconds;
  return os.str();
}

struct RunOutput {
  std::filesystem::path dir;
  TrainResult train;
  std::optional<EvalResult> eval;
};

/// Train, save the checkpoint, evaluate, and write events.jsonl,
/// checkpoint.bin, summary.csv (and trace.log when tracing) under
/// out_dir/run-<hash>-s<seed>.
inline RunOutput run_experiment(const ExperimentConfig& c, bool evaluate_after = true) {
  c.validate();
  RunOutput out;
  out.dir = std::filesystem::path(c.run.out_dir) / run_name(c);
  std::filesystem::create_directories(out.dir);
  std::ofstream events(out.dir / "events.jsonl", std::ios::trunc);
  std::ofstream trace_file;
  Sinks sinks;
  sinks.events = &events;
  sinks.abort_checkpoint = (out.dir / "checkpoint.bin").string();
  sinks.checkpoint_dir = out.dir.string();
  if (c.run.trace) {
    trace_file.open(out.dir / "trace.log", std::ios::trunc);
    sinks.trace = [&](const std::string& line) { trace_file << line << '\n'; };
  }
  out.train = train(c, sinks);
  ckpt::save(out.train.checkpoint, (out.dir / "checkpoint.bin").string());
  if (evaluate_after && !out.train.aborted) {
    out.eval = evaluate(out.train.checkpoint);
    events << out.eval->to_json().dump() << '\n';
  }
  std::ofstream csv(out.dir / "summary.csv", std::ios::trunc);
  csv << summary_header() << '\n' << summary_row(c, out.train, out.eval ? &*out.eval : nullptr) << '\n';
  return out;
}

// ---------------------------------------------------------------------------
// Diagnostics.

struct DiagnoseOptions {
  std::string suite;                   // bound, homogeneity, saliency
  std::string out_dir = "diagnostics";
  std::vector<std::string> families;   // empty: suite default
  std::uint64_t seed = 7;
  // bound
  std::size_t trials = 100;
  std::size_t budget = 1000;
  std::optional<double> eta;  // default: the config's inner rate
  double radius = 0.5;
  double perturbation = 0.1;
  bool sampled = false;
  // saliency
  std::size_t images = 8;
  double sigma = 0.1;
  std::size_t samples = 25;
};

struct DiagnoseReport {
  std::vector<json> records;
  std::filesystem::path jsonl, csv;
  std::size_t checks = 0;
  std::size_t passed = 0;
};

/// Parameters and homogenizer state to diagnose: a checkpoint, or the
/// initialization a run of `c` would start from.
struct Subject {
  ExperimentConfig config;
  std::vector<Tensor> params;
  std::optional<homog::HomogenizerState> homogenizer;

  static Subject from_checkpoint(const ckpt::Checkpoint& k) {
    return {config::from_json(json::parse(k.config_json)), k.params, k.homogenizer};
  }
  static Subject from_config(const ExperimentConfig& c) {
    c.validate();
    const nn::Architecture arch = config::architecture(c);
    Streams st(c.run.seed);
    Subject s{c, nn::ModelParams::init(arch, st.init).tensors, std::nullopt};
    const bool regression = make_families(c, c.training_family_names()).front().regression();
    s.homogenizer = initial_homogenizer(c, arch, regression);
    return s;
  }
};

namespace detail {

inline DiagnoseReport bound_suite(const Subject& s, const DiagnoseOptions& o, std::ostream& jl, std::ostream& csv) {
  const nn::Architecture arch = config::architecture(s.config);
  std::vector<std::string> names = o.families;
  if (names.empty())
    for (const auto& [n, f] : s.config.families)
      if (f.base_measure) names.push_back(n);
  if (names.size() < 2) throw ConfigError("diagnose bound: need at least two families with explicit atoms");
  const auto fams = make_families(s.config, names);
  diag::BoundCheckConfig bc;
  bc.eta = o.eta ? *o.eta : s.config.gbml.inner_rate;
  bc.budget = o.budget;
  bc.radius = o.radius;
  bc.trials = o.trials;
  bc.perturbation = o.perturbation;
  bc.mode = o.sampled ? diag::BoundMode::Sampled : diag::BoundMode::Exact;
  bc.n_support = s.config.run.k_shot;
  bc.n_query = s.config.run.n_query;
  Rng rng(o.seed);
  DiagnoseReport rep;
  csv << "family_i,family_j,trial,mode,d_ij,bound,slack,pass,tvd,G,L\n";
  csv.precision(12);
  for (std::size_t i = 0; i < fams.size(); ++i)
    for (std::size_t j = i + 1; j < fams.size(); ++j) {
      auto results = diag::bound_check(arch, s.params, fams[i], fams[j], bc, rng);
      for (std::size_t t = 0; t < results.size(); ++t) {
        const auto& b = results[t];
        json rec = b.to_json();
        rec["suite"] = "bound";
        rec["family_i"] = names[i];
        rec["family_j"] = names[j];
        rec["trial"] = t;
        jl << rec.dump() << '\n';
        rep.records.push_back(rec);
        csv << names[i] << ',' << names[j] << ',' << t << ',' << rec["mode"].get<std::string>() << ',' << b.d << ','
            << b.bound << ',' << b.slack << ',' << (b.pass ? 1 : 0) << ',' << b.tvd << ',' << b.constants.G << ','
            << b.constants.L << '\n';
        ++rep.checks;
        rep.passed += b.pass;
      }
    }
  return rep;
}

inline DiagnoseReport homogeneity_suite(const Subject& s, const DiagnoseOptions& o, std::ostream& jl,
                                        std::ostream& csv) {
  const ExperimentConfig& c = s.config;
  require(c.run.tasks >= 2, "diagnose homogeneity: need N >= 2 tasks per batch");
  const nn::Architecture arch = config::architecture(c);
  const auto fams = make_families(c, o.families.empty() ? c.training_family_names() : o.families);
  homog::HomogenizerState hs = s.homogenizer ? *s.homogenizer
                                             : initial_homogenizer(c, arch, fams.front().regression());
  Rng rng(o.seed), isi_rng(o.seed + 1);
  tasks::MetaBatch batch = tasks::sample_minibatch(fams, c.run.n_way, c.run.k_shot, c.run.n_query, c.run.tasks,
                                                   c.run.batch_mode, rng, tasks::ClassSplit::Train);
  std::vector<std::uint64_t> ids;
  for (const auto& e : batch.episodes) ids.push_back(e.family_id);
  auto binding = homog::reset_for_batch(hs, ids, c.homogenizer.bind_by_family);
  gbml::MetaState meta;
  meta.params = nn::ModelParams{arch, s.params};
  meta.cfg = c.gbml;
  isi::ISIConfig no_isi = c.isi;
  no_isi.enabled = false;
  gbml::MetaStepResult r = gbml::meta_step(meta, batch, &hs, binding, &no_isi, isi_rng, c.gbml.outer_rate);
  const diag::HomogeneityReport h = diag::homogeneity_report(r.snapshot);
  json rec = h.to_json();
  rec["suite"] = "homogeneity";
  rec["omega"] = hs.omega;
  rec["losses"] = r.snapshot.losses;
  jl << rec.dump() << '\n';
  csv << "stage,mean_cosine,magnitude_cv\n";
  csv.precision(12);
  csv << "before," << h.before.mean_cosine << ',' << h.before.magnitude_cv << '\n';
  csv << "after," << h.after.mean_cosine << ',' << h.after.magnitude_cv << '\n';
  DiagnoseReport rep;
  rep.records.push_back(rec);
  return rep;
}

inline DiagnoseReport saliency_suite(const Subject& s, const DiagnoseOptions& o, const std::filesystem::path& dir,
                                     std::ostream& jl, std::ostream& csv) {
  const ExperimentConfig& c = s.config;
  const nn::Architecture arch = config::architecture(c);
  const auto fams = make_families(c, o.families.empty() ? c.training_family_names() : o.families);
  Rng rng(o.seed);
  tasks::Episode ep = tasks::sample_episode(fams.front(), c.run.n_way, c.run.k_shot, c.run.n_query, rng);
  const std::size_t n = std::min(o.images, ep.query.size());
  const std::size_t per = arch.input.numel();
  csv << "image,label,max_abs,mean_abs,pgm\n";
  csv.precision(12);
  DiagnoseReport rep;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor img(arch.input);
    std::copy_n(ep.query.x.data().begin() + static_cast<std::ptrdiff_t>(i * per), per, img.data().begin());
    Tensor map = diag::smoothgrad_saliency(arch, s.params, img, o.sigma, o.samples, rng);
    double mx = 0.0, mean = 0.0;
    for (double v : map.data()) {
      mx = std::max(mx, std::abs(v));
      mean += std::abs(v);
    }
    mean /= static_cast<double>(map.size());
    std::string pgm;
    if (map.rank() == 3) {
      pgm = "saliency_" + std::to_string(i) + ".pgm";
      std::ofstream os(dir / pgm, std::ios::binary | std::ios::trunc);
      diag::write_pgm(os, map);
    }
    const int label = ep.query.labels.empty() ? -1 : ep.query.labels[i];
    json rec{{"suite", "saliency"}, {"image", i}, {"label", label}, {"max_abs", mx}, {"mean_abs", mean}, {"pgm", pgm}};
    jl << rec.dump() << '\n';
    csv << i << ',' << label << ',' << mx << ',' << mean << ',' << pgm << '\n';
    rep.records.push_back(rec);
  }
  return rep;
}

}  // namespace detail

inline DiagnoseReport diagnose(const Subject& s, const DiagnoseOptions& o) {
  if (o.suite != "bound" && o.suite != "homogeneity" && o.suite != "saliency")
    throw ConfigError("unknown diagnose suite '" + o.suite + "' (expected bound, homogeneity or saliency)");
  const std::filesystem::path dir(o.out_dir);
  std::filesystem::create_directories(dir);
  const auto jpath = dir / (o.suite + ".jsonl"), cpath = dir / (o.suite + ".csv");
  std::ofstream jl(jpath, std::ios::trunc), csv(cpath, std::ios::trunc);
  DiagnoseReport rep;
  if (o.suite == "bound") rep = detail::bound_suite(s, o, jl, csv);
  else if (o.suite == "homogeneity") rep = detail::homogeneity_suite(s, o, jl, csv);
  else rep = detail::saliency_suite(s, o, dir, jl, csv);
  rep.jsonl = jpath;
  rep.csv = cpath;
  return rep;
}

// ---------------------------------------------------------------------------
// Sweeps.

/// Dotted config path for a sweep parameter; a few short names are accepted.
inline std::string resolve_param(const std::string& p) {
  static const std::map<std::string, std::string> alias{
      {"beta", "homogenizer.beta"},         {"β", "homogenizer.beta"},
      {"seed", "run.seed"},                 {"tau", "gbml.inner_steps"},
      {"τ", "gbml.inner_steps"},            {"eta_base", "gbml.inner_rate"},
      {"eta_meta", "gbml.outer_rate"},      {"eta_gamma", "homogenizer.rotation_rate"},
      {"eta_omega", "homogenizer.weight_rate"}, {"N", "run.tasks"},
      {"T", "isi.temperature"},             {"C", "isi.radius"},
      {"h", "isi.bandwidth"},               {"backbone", "gbml.backbone"}};
  auto it = alias.find(p);
  return it == alias.end() ? p : it->second;
}

/// Copy of `c` with one dotted parameter replaced. The value is read as JSON
/// when possible (numbers, booleans) and as a plain string otherwise.
inline ExperimentConfig with_param(const ExperimentConfig& c, const std::string& param, const std::string& value) {
  const std::string path = resolve_param(param);
  json j = c.to_json();
  json v = json::parse(value, nullptr, false);
  if (v.is_discarded()) v = value;
  json* node = &j;
  std::size_t pos = 0;
  while (true) {
    const std::size_t dot = path.find('.', pos);
    const std::string key = path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (!node->is_object() || !node->contains(key)) throw ConfigError("sweep: unknown parameter '" + param + "'");
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }
  *node = v;
  ExperimentConfig out = config::from_json(j);
  out.validate();
  return out;
}

struct SweepPoint {
  std::string value;
  RunOutput run;
};

/// One full run per value; out_dir/sweep.csv collects the summary rows.
inline std::vector<SweepPoint> sweep(const ExperimentConfig& base, const std::string& param,
                                     const std::vector<std::string>& values) {
  require(!values.empty(), "sweep: no values");
  std::vector<ExperimentConfig> configs;
  for (const auto& v : values) configs.push_back(with_param(base, param, v));
  std::filesystem::create_directories(base.run.out_dir);
  std::ofstream csv(std::filesystem::path(base.run.out_dir) / "sweep.csv", std::ios::trunc);
  csv << "param,value," << summary_header() << '\n';
  std::vector<SweepPoint> out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    SweepPoint p{values[i], run_experiment(configs[i])};
    csv << resolve_param(param) << ',' << values[i] << ','
        << summary_row(configs[i], p.run.train, p.run.eval ? &*p.run.eval : nullptr) << '\n';
    csv.flush();
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace roto::harness
