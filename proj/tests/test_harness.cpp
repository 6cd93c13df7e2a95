#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "roto/harness.hpp"

using namespace roto;
using namespace roto::harness;
namespace fs = std::filesystem;

namespace {

const char* kSmall = R"(
[run]
seed = 4
iterations = 6
log_interval = 2
encoder = "mlp-small"
n_way = 3
k_shot = 2
n_query = 3
tasks = 3
batch_mode = "strong-ood"

[gbml]
backbone = "maml"
inner_steps = 2
inner_rate = 0.05
outer_rate = 0.01

[homogenizer]
beta = 0.1
weight_rate = 0.01
rotation_rate = 0.01

[families.a]
dim = 6
classes = 12
seed = 1

[families.b]
dim = 6
classes = 12
seed = 2
scale = 0.5

[families.c]
dim = 6
classes = 12
seed = 3
scale = 2.0

[eval]
episodes = 12
seed = 99
)";

config::ExperimentConfig small_config() {
  config::ExperimentConfig c = config::parse_toml(kSmall);
  c.validate();
  return c;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("roto_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::string event_stream(const config::ExperimentConfig& c) {
  std::ostringstream os;
  Sinks s;
  s.events = &os;
  train(c, s);
  return os.str();
}

std::vector<nlohmann::json> records(const std::string& jsonl) {
  std::vector<nlohmann::json> out;
  std::istringstream is(jsonl);
  for (std::string line; std::getline(is, line);) out.push_back(nlohmann::json::parse(line));
  return out;
}

struct EnvGuard {
  std::string name;
  explicit EnvGuard(std::string n, const char* value) : name(std::move(n)) { ::setenv(name.c_str(), value, 1); }
  ~EnvGuard() { ::unsetenv(name.c_str()); }
};

int run_cli(const std::string& args, const fs::path& cwd, std::string* output = nullptr) {
  const fs::path log = cwd / "cli_output.txt";
  const std::string cmd = "cd '" + cwd.string() + "' && '" + std::string(ROTO_CLI_PATH) + "' " + args + " > '" +
                          log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  if (output) *output = slurp(log);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration.

TEST(Config, ReadsEverySection) {
  auto c = config::parse_toml(R"(
[run]
seed = 11
iterations = 7
encoder = "linear"
n_way = 2
tasks = 2
batch_mode = "weak-ood"
train_families = ["x"]
[gbml]
backbone = "anil"
inner_steps = 3
imaml_lambda = 2.5
[homogenizer]
freeze = true
beta = 1.5
p_leader = 0.75
[isi]
enabled = true
hooked_layers = [0]
temperature = 0.5
[families.x]
kind = "gaussian-blobs"
dim = 3
classes = 4
scale = 2
[families.y]
atoms = [[0, 1], [1, 0]]
labels = [0, 1]
probs = [0.25, 0.75]
[eval]
episodes = 30
families = ["x"]
)");
  EXPECT_EQ(c.run.seed, 11u);
  EXPECT_EQ(c.run.iterations, 7u);
  EXPECT_EQ(c.run.batch_mode, tasks::BatchMode::WeakOOD);
  EXPECT_EQ(c.gbml.backbone, gbml::Backbone::Anil);
  EXPECT_EQ(c.gbml.inner_steps, 3u);
  EXPECT_EQ(c.gbml.imaml_lambda, 2.5);
  EXPECT_EQ(c.gbml.inner_rate, 0.01);
  EXPECT_EQ(c.gbml.outer_rate, 1e-3);
  EXPECT_TRUE(c.homogenizer.freeze);
  EXPECT_EQ(c.homogenizer.beta, 1.5);
  EXPECT_EQ(c.homogenizer.rotation_rate, 5e-4);
  EXPECT_EQ(c.homogenizer.p_leader, 0.75);
  EXPECT_TRUE(c.isi.enabled);
  EXPECT_EQ(c.isi.hooked_layers, std::vector<std::size_t>{0});
  EXPECT_EQ(c.isi.temperature, 0.5);
  ASSERT_EQ(c.families.size(), 2u);
  EXPECT_EQ(c.families.at("x").input_scale, 2.0);
  EXPECT_EQ(c.families.at("x").name, "x");
  ASSERT_TRUE(c.families.at("y").base_measure);
  EXPECT_EQ(c.families.at("y").base_measure->probs[1], 0.75);
  EXPECT_EQ(c.eval.episodes, 30u);
  EXPECT_THROW(c.validate(), ConfigError);  // ISI on a dense encoder
  c.isi.enabled = false;
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, DefaultsFollowTheStatedValues) {
  config::ExperimentConfig c;
  EXPECT_EQ(c.gbml.inner_rate, 0.01);
  EXPECT_EQ(c.gbml.outer_rate, 0.001);
  EXPECT_EQ(c.gbml.inner_steps, 5u);
  EXPECT_EQ(c.homogenizer.rotation_rate, 5e-4);
  EXPECT_EQ(c.homogenizer.beta, 0.1);
  EXPECT_EQ(c.run.tasks, 4u);
  EXPECT_EQ(c.eval.episodes, 600u);
}

TEST(Config, UnknownKeysAreErrors) {
  EXPECT_THROW(config::parse_toml("[run]\nseeed = 3\n"), ConfigError);
  EXPECT_THROW(config::parse_toml("[runn]\nseed = 3\n"), ConfigError);
  EXPECT_THROW(config::parse_toml("[families.a]\ndimm = 3\n"), ConfigError);
}

TEST(Config, TypeErrors) {
  EXPECT_THROW(config::parse_toml("[run]\nseed = \"x\"\n"), ConfigError);
  EXPECT_THROW(config::parse_toml("[run]\niterations = -1\n"), ConfigError);
  EXPECT_THROW(config::parse_toml("[run]\niterations = 1.5\n"), ConfigError);
  EXPECT_THROW(config::parse_toml("[homogenizer]\nenabled = 1\n"), ConfigError);
  EXPECT_THROW(config::parse_toml("[gbml]\nbackbone = \"protonet\"\n"), ConfigError);
  EXPECT_THROW(config::parse_toml("[run\nseed = 1\n"), ConfigError);
  EXPECT_THROW(config::parse_toml("[run]\nseed = 1979-05-27\n"), ConfigError);
}

TEST(Config, ValidationRejectsBadValues) {
  auto bad = [](auto mutate) {
    auto c = small_config();
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  bad([](auto& c) { c.gbml.inner_rate = 0.0; });
  bad([](auto& c) { c.gbml.outer_rate = -1.0; });
  bad([](auto& c) { c.homogenizer.rotation_rate = 0.0; });
  bad([](auto& c) { c.homogenizer.weight_rate = 0.0; });
  bad([](auto& c) { c.run.tasks = 0; });
  bad([](auto& c) { c.run.tasks = 4; });  // strong OOD with three families
  bad([](auto& c) { c.run.train_families = {"a", "zz"}; });
  bad([](auto& c) { c.eval.families = {"zz"}; });
  bad([](auto& c) { c.families.clear(); });
  bad([](auto& c) { c.homogenizer.p_leader = 0.0; });
  bad([](auto& c) { c.isi.drop_rate = 1.0; });
  bad([](auto& c) { c.isi.enabled = true; });  // dense encoder
  bad([](auto& c) { c.run.encoder = "resnet"; });
  bad([](auto& c) { c.families["a"].noise = -1.0; });
}

TEST(Config, JsonRoundTripIsExact) {
  auto c = config::parse_toml(R"(
[run]
seed = 5
[homogenizer]
beta = 0.3333333333333333
[families.a]
dim = 3
scale = 0.1
[families.b]
atoms = [[0.1, 0.2]]
labels = [0]
probs = [1.0]
)");
  const auto j = c.to_json();
  const auto again = config::from_json(j);
  EXPECT_EQ(again.to_json(), j);
  EXPECT_EQ(again.hash(), c.hash());
}

TEST(Config, HashTracksSubstanceOnly) {
  auto a = small_config(), b = small_config();
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.hash().size(), 16u);
  b.run.out_dir = "elsewhere";
  b.run.log_interval = 1;
  EXPECT_EQ(a.hash(), b.hash());
  b.run.seed = 5;
  EXPECT_NE(a.hash(), b.hash());
  b = a;
  b.families["c"].input_scale = 2.5;
  EXPECT_NE(a.hash(), b.hash());
}

TEST(Config, EnvironmentOverridesFile) {
  auto c = small_config();
  {
    EnvGuard s("ROTO_SEED", "77"), d("ROTO_OUT_DIR", "/tmp/somewhere");
    config::apply_env(c);
  }
  EXPECT_EQ(c.run.seed, 77u);
  EXPECT_EQ(c.run.out_dir, "/tmp/somewhere");
  EnvGuard s("ROTO_SEED", "-3");
  EXPECT_THROW(config::apply_env(c), ConfigError);
}

TEST(Config, ArchitectureFollowsFamilies) {
  auto c = small_config();
  nn::Architecture a = config::architecture(c);
  EXPECT_EQ(a.input, Shape{6});
  EXPECT_EQ(a.outputs, 3u);
  c.families["c"].dim = 7;
  EXPECT_THROW(config::architecture(c), ConfigError);
  c = small_config();
  c.run.encoder = "conv-tiny";
  EXPECT_THROW(config::architecture(c), ConfigError);
}

// ---------------------------------------------------------------------------
// Checkpoints.

namespace {

ckpt::Checkpoint trained_checkpoint() {
  auto c = small_config();
  return train(c).checkpoint;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitIdentical) {
  ckpt::Checkpoint k = trained_checkpoint();
  ASSERT_TRUE(k.homogenizer);
  // Values whose bit patterns a text format would lose.
  k.params[0][0] = -0.0;
  k.params[0][1] = std::numeric_limits<double>::denorm_min();
  k.params[0][2] = std::nextafter(1.0, 2.0);
  const std::string bytes = ckpt::serialize(k);
  const ckpt::Checkpoint back = ckpt::deserialize(bytes);
  EXPECT_EQ(ckpt::serialize(back), bytes);
  EXPECT_EQ(back.step, k.step);
  EXPECT_EQ(back.config_json, k.config_json);
  EXPECT_EQ(back.data_rng, k.data_rng);
  ASSERT_EQ(back.params.size(), k.params.size());
  for (std::size_t i = 0; i < k.params.size(); ++i) {
    EXPECT_EQ(back.params[i].shape(), k.params[i].shape());
    EXPECT_EQ(std::memcmp(back.params[i].data().data(), k.params[i].data().data(), k.params[i].size() * 8), 0);
  }
  EXPECT_TRUE(std::signbit(back.params[0][0]));
  EXPECT_EQ(back.adam.t, k.adam.t);
  EXPECT_EQ(back.homogenizer->omega, k.homogenizer->omega);
  for (std::size_t i = 0; i < k.homogenizer->slots(); ++i) {
    EXPECT_EQ(back.homogenizer->rotation[i], k.homogenizer->rotation[i]);
    EXPECT_EQ(back.homogenizer->skew[i], k.homogenizer->skew[i]);
  }
  EXPECT_EQ(back.homogenizer->slot_family, k.homogenizer->slot_family);
  EXPECT_EQ(back.homogenizer->leader_steps, k.homogenizer->leader_steps);
}

TEST(Checkpoint, FileRoundTrip) {
  const fs::path dir = scratch("ckpt_file");
  ckpt::Checkpoint k = trained_checkpoint();
  ckpt::save(k, (dir / "a.bin").string());
  EXPECT_TRUE(ckpt::identical(ckpt::load((dir / "a.bin").string()), k));
  EXPECT_EQ(slurp(dir / "a.bin").substr(0, 8), "ROTOCKPT");
  EXPECT_THROW(ckpt::load((dir / "missing.bin").string()), Error);
  fs::remove_all(dir);
}

TEST(Checkpoint, CorruptedByteIsAChecksumError) {
  const std::string bytes = ckpt::serialize(trained_checkpoint());
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::string bad = bytes;
    const std::size_t at = 16 + rng.index(bytes.size() - 16);
    bad[at] = static_cast<char>(bad[at] ^ (1 << rng.index(8)));
    EXPECT_THROW(ckpt::deserialize(bad), ChecksumError) << "byte " << at;
  }
}

TEST(Checkpoint, OtherVersionIsAVersionError) {
  std::string bytes = ckpt::serialize(trained_checkpoint());
  bytes[8] = 0;  // version field, little-endian low byte
  try {
    ckpt::deserialize(bytes);
    FAIL() << "expected a version error";
  } catch (const VersionError& e) {
    EXPECT_NE(std::string(e.what()).find("version 0"), std::string::npos);
  }
}

TEST(Checkpoint, TruncationIsAFormatError) {
  const std::string bytes = ckpt::serialize(trained_checkpoint());
  for (std::size_t n : {std::size_t{0}, std::size_t{7}, std::size_t{15}, std::size_t{19}, bytes.size() / 2,
                        bytes.size() - 5, bytes.size() - 1})
    EXPECT_THROW(ckpt::deserialize(bytes.substr(0, n)), FormatError) << n;
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(ckpt::deserialize(magic), FormatError);
}

// ---------------------------------------------------------------------------
// Training.

TEST(Train, ZeroIterationsReturnsTheInitialization) {
  auto c = small_config();
  c.run.iterations = 0;
  TrainResult r = train(c);
  Streams st(c.run.seed);
  gbml::MetaState init = gbml::MetaState::init(config::architecture(c), c.gbml, st.init);
  EXPECT_EQ(r.steps, 0u);
  EXPECT_EQ(r.checkpoint.step, 0u);
  EXPECT_EQ(r.checkpoint.params, init.params.tensors);
  EXPECT_TRUE(r.checkpoint.adam.m.empty());
  ASSERT_TRUE(r.checkpoint.homogenizer);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(r.checkpoint.homogenizer->omega[i], 1.0);
    EXPECT_TRUE(r.checkpoint.homogenizer->rotation[i].isIdentity(0.0));
  }
  EXPECT_EQ(r.checkpoint.homogenizer->anchors[0], std::log(3.0));
}

TEST(Train, SameConfigAndSeedGiveIdenticalStreams) {
  auto c = small_config();
  const std::string a = event_stream(c), b = event_stream(c);
  EXPECT_EQ(a, b);
  EXPECT_TRUE(ckpt::identical(train(c).checkpoint, train(c).checkpoint));
  c.run.seed = 5;
  EXPECT_NE(event_stream(c), a);
}

TEST(Train, FrozenHomogenizerMatchesVanillaAtEveryStep) {
  auto frozen = small_config(), vanilla = small_config();
  frozen.homogenizer.freeze = true;
  vanilla.homogenizer.enabled = false;
  frozen.run.log_interval = vanilla.run.log_interval = 1;
  frozen.run.iterations = vanilla.run.iterations = 20;
  auto rf = records(event_stream(frozen)), rv = records(event_stream(vanilla));
  ASSERT_EQ(rf.size(), rv.size());
  std::size_t steps = 0;
  for (std::size_t i = 0; i < rf.size(); ++i) {
    if (rf[i]["event"] != "step") continue;
    ++steps;
    EXPECT_EQ(rf[i]["loss"].get<double>(), rv[i]["loss"].get<double>());
    EXPECT_EQ(rf[i]["weighted_loss"].get<double>(), rv[i]["loss"].get<double>());
    const auto& h = rf[i]["homogeneity"];
    EXPECT_EQ(h["before"], h["after"]);
    EXPECT_EQ(h["before"], h["applied"]);
  }
  EXPECT_EQ(steps, 20u);
  EXPECT_EQ(train(frozen).checkpoint.params, train(vanilla).checkpoint.params);
}

TEST(Train, TraceFollowsTheAlgorithmOrder) {
  auto c = small_config();
  c.run.iterations = 3;
  std::vector<std::string> lines;
  Sinks s;
  s.trace = [&](const std::string& l) { lines.push_back(l.substr(0, l.find(' '))); };
  train(c, s);
  std::vector<std::string> one{"sample_batch"};
  for (int e = 0; e < 3; ++e) {
    one.push_back("inner_loop");
    one.push_back("rotate_features");
    one.push_back("outer_loss");
  }
  for (const char* l : {"update_params", "update_omega", "update_gamma"}) one.push_back(l);
  std::vector<std::string> want;
  for (int t = 0; t < 3; ++t) want.insert(want.end(), one.begin(), one.end());
  EXPECT_EQ(lines, want);
}

TEST(Train, TraceMarksIsiState) {
  auto c = config::parse_toml(R"(
[run]
iterations = 1
encoder = "conv-tiny"
n_way = 2
k_shot = 1
n_query = 1
tasks = 2
[gbml]
backbone = "fomaml"
inner_steps = 1
[families.p]
kind = "shape-texture"
seed = 1
[families.q]
kind = "shape-texture"
seed = 2
)");
  std::vector<std::string> lines;
  Sinks s;
  s.trace = [&](const std::string& l) { lines.push_back(l); };
  train(c, s);
  EXPECT_EQ(lines[1], "inner_loop task=0 isi=off");
  c.isi.enabled = true;
  lines.clear();
  train(c, s);
  EXPECT_EQ(lines[1], "inner_loop task=0 isi=on");
  c.isi.hooked_layers = {5};
  EXPECT_THROW(train(c, s), ConfigError);
}

TEST(Train, EventSchema) {
  auto c = small_config();
  c.run.iterations = 5;
  auto rs = records(event_stream(c));
  ASSERT_EQ(rs.size(), 5u);  // start, steps 2 and 4, final step 5, end
  EXPECT_EQ(rs[0]["event"], "start");
  EXPECT_EQ(rs[0]["config_hash"], c.hash());
  EXPECT_EQ(rs[0]["config"], c.to_json());
  std::vector<std::size_t> steps;
  for (std::size_t i = 1; i < 4; ++i) {
    const auto& r = rs[i];
    EXPECT_EQ(r["event"], "step");
    steps.push_back(r["step"]);
    for (const char* k : {"loss", "weighted_loss", "follower_rate", "weight_rate", "rotation_rate", "families",
                          "omega", "binding", "balance_loss", "homogeneity"})
      EXPECT_TRUE(r.contains(k)) << k;
    for (const char* k : {"before", "applied", "after"})
      for (const char* f : {"mean_cosine", "magnitude_cv", "norms"}) EXPECT_TRUE(r["homogeneity"][k].contains(f));
    double sum = 0.0;
    for (double w : r["omega"]) sum += w;
    EXPECT_EQ(sum, 3.0);
    EXPECT_EQ(r["families"].size(), 3u);
  }
  EXPECT_EQ(steps, (std::vector<std::size_t>{2, 4, 5}));
  EXPECT_EQ(rs[4]["event"], "end");
  EXPECT_EQ(rs[4]["status"], "ok");
  EXPECT_EQ(rs[4]["steps"], 5);
}

TEST(Train, ScheduleRatesFollowTheLeaderDecay) {
  auto c = small_config();
  c.run.log_interval = 1;
  c.homogenizer.t0 = 2.0;
  for (const auto& r : records(event_stream(c))) {
    if (r["event"] != "step") continue;
    const double t = r["step"].get<double>() - 1.0;
    EXPECT_DOUBLE_EQ(r["rotation_rate"].get<double>(), 0.01 * std::pow(1.0 + t / 2.0, -0.51));
    EXPECT_DOUBLE_EQ(r["follower_rate"].get<double>(), 0.01);
  }
}

TEST(Train, NonFiniteLossAbortsWithLastGoodCheckpoint) {
  const fs::path dir = scratch("abort");
  auto c = small_config();
  c.gbml.outer_rate = 1e200;  // the first Adam step sends every weight to ~1e200
  c.run.iterations = 10;
  std::ostringstream os;
  Sinks s;
  s.events = &os;
  s.abort_checkpoint = (dir / "last_good.bin").string();
  TrainResult r = train(c, s);
  ASSERT_TRUE(r.aborted);
  EXPECT_FALSE(r.abort_reason.empty());
  EXPECT_LT(r.checkpoint.step, 10u);
  EXPECT_EQ(r.checkpoint.step, r.steps);
  EXPECT_TRUE(all_finite(r.checkpoint.params));
  EXPECT_TRUE(ckpt::identical(ckpt::load(s.abort_checkpoint), r.checkpoint));
  auto rs = records(os.str());
  EXPECT_EQ(rs[rs.size() - 2]["event"], "abort");
  EXPECT_EQ(rs.back()["status"], "aborted");
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Meta-testing.

TEST(Evaluate, IdenticalScoresGiveZeroInterval) {
  EvalResult r = summarize(std::vector<double>(37, 0.4));
  EXPECT_EQ(r.mean, 0.4);
  EXPECT_EQ(r.ci95, 0.0);
}

TEST(Evaluate, IntervalMatchesHandComputation) {
  EvalResult r = summarize({0.2, 0.4, 0.6, 1.0});
  // mean 0.55, population variance (0.1225 + 0.0225 + 0.0025 + 0.2025) / 4
  EXPECT_NEAR(r.mean, 0.55, 1e-15);
  EXPECT_NEAR(r.sigma, std::sqrt(0.35 / 4.0), 1e-15);
  EXPECT_NEAR(r.ci95, 1.96 * std::sqrt(0.35 / 4.0) / 2.0, 1e-15);
}

TEST(Evaluate, ZeroModelScoresChanceExactly) {
  auto c = small_config();
  c.run.iterations = 0;
  ckpt::Checkpoint k = train(c).checkpoint;
  for (auto& t : k.params) t = Tensor(t.shape(), 0.0);
  EvalOptions o;
  o.episodes = 600;
  EvalResult r = evaluate(k, o);
  EXPECT_EQ(r.episodes, 600u);
  EXPECT_NEAR(r.mean, 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.ci95, 0.0, 1e-12);
}

TEST(Evaluate, ReproducibleAndIgnoresHomogenizer) {
  auto c = small_config();
  ckpt::Checkpoint k = train(c).checkpoint;
  EvalResult a = evaluate(k), b = evaluate(k);
  EXPECT_EQ(a.scores, b.scores);
  EXPECT_EQ(a.episodes, 12u);
  ckpt::Checkpoint stripped = k;
  stripped.homogenizer.reset();
  EXPECT_EQ(evaluate(stripped).scores, a.scores);
  EvalOptions o;
  o.seed = 1234;
  EXPECT_NE(evaluate(k, o).scores, a.scores);
}

TEST(Evaluate, RoundRobinOverFamilies) {
  auto c = small_config();
  ckpt::Checkpoint k = train(c).checkpoint;
  EvalOptions o;
  o.families = {"b"};
  o.episodes = 3;
  EvalResult r = evaluate(k, o);
  EXPECT_EQ(r.families, std::vector<std::string>{"b"});
  EXPECT_EQ(r.scores.size(), 3u);
}

TEST(Evaluate, FamilyEncoderMismatchIsAnError) {
  auto c = small_config();
  c.run.iterations = 0;
  c.families["wide"] = c.families["a"];
  c.families["wide"].dim = 9;
  c.run.train_families = {"a", "b", "c"};
  c.eval.families = {"a"};
  ckpt::Checkpoint k = train(c).checkpoint;
  EvalOptions o;
  o.families = {"wide"};
  EXPECT_THROW(evaluate(k, o), ConfigError);
  o.families = {"nope"};
  EXPECT_THROW(evaluate(k, o), ConfigError);
}

// ---------------------------------------------------------------------------
// Diagnostics.

namespace {

config::ExperimentConfig two_atom_config() {
  return config::parse_toml(R"(
[run]
seed = 3
iterations = 0
encoder = "linear"
n_way = 2
k_shot = 1
n_query = 2
tasks = 2
[families.even]
atoms = [[1.0, -0.5], [-0.3, 0.8]]
labels = [0, 1]
probs = [0.5, 0.5]
[families.skewed]
atoms = [[1.0, -0.5], [-0.3, 0.8]]
labels = [0, 1]
probs = [0.2, 0.8]
)");
}

}  // namespace

TEST(Diagnose, BoundSuiteOnTwoAtomFamilies) {
  const fs::path dir = scratch("bound");
  DiagnoseOptions o;
  o.suite = "bound";
  o.out_dir = dir.string();
  DiagnoseReport r = diagnose(Subject::from_config(two_atom_config()), o);
  EXPECT_EQ(r.checks, 100u);
  EXPECT_EQ(r.passed, 100u);
  for (const auto& rec : r.records) {
    EXPECT_NEAR(rec["tvd"].get<double>(), 0.3, 1e-15);
    EXPECT_LE(rec["d_ij"].get<double>(), rec["bound"].get<double>());
  }
  std::ifstream csv(r.csv);
  std::size_t lines = 0;
  for (std::string l; std::getline(csv, l);) ++lines;
  EXPECT_EQ(lines, 101u);
  EXPECT_EQ(records(slurp(r.jsonl)).size(), 100u);
  fs::remove_all(dir);
}

TEST(Diagnose, BoundSuiteNeedsDiscreteFamilies) {
  DiagnoseOptions o;
  o.suite = "bound";
  o.out_dir = scratch("bound_blobs").string();
  EXPECT_THROW(diagnose(Subject::from_config(small_config()), o), ConfigError);
  fs::remove_all(o.out_dir);
}

TEST(Diagnose, HomogeneityOnFreshInitChangesNothing) {
  DiagnoseOptions o;
  o.suite = "homogeneity";
  o.out_dir = scratch("homog").string();
  DiagnoseReport r = diagnose(Subject::from_config(small_config()), o);
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_EQ(r.records[0]["before"], r.records[0]["after"]);
  fs::remove_all(o.out_dir);
}

TEST(Diagnose, HomogeneityAfterTrainingUsesTheLearnedState) {
  auto c = small_config();
  c.run.iterations = 30;
  DiagnoseOptions o;
  o.suite = "homogeneity";
  o.out_dir = scratch("homog_trained").string();
  DiagnoseReport r = diagnose(Subject::from_checkpoint(train(c).checkpoint), o);
  EXPECT_NE(r.records[0]["before"]["pair_cosines"], r.records[0]["after"]["pair_cosines"]);
  fs::remove_all(o.out_dir);
}

TEST(Diagnose, SaliencyOfAConstantModelIsZero) {
  auto c = config::parse_toml(R"(
[run]
iterations = 0
encoder = "conv-tiny"
n_way = 3
k_shot = 1
n_query = 2
tasks = 1
batch_mode = "id"
[families.shapes]
kind = "shape-texture"
)");
  Subject s = Subject::from_config(c);
  for (auto& t : s.params) t = Tensor(t.shape(), 0.0);
  DiagnoseOptions o;
  o.suite = "saliency";
  o.out_dir = scratch("saliency").string();
  o.images = 4;
  o.samples = 3;
  DiagnoseReport r = diagnose(s, o);
  ASSERT_EQ(r.records.size(), 4u);
  for (const auto& rec : r.records) {
    EXPECT_EQ(rec["max_abs"].get<double>(), 0.0);
    const std::string pgm = slurp(fs::path(o.out_dir) / rec["pgm"].get<std::string>());
    ASSERT_EQ(pgm.substr(0, 13), "P5\n16 16\n255\n");
    EXPECT_EQ(pgm.size(), 13u + 256u);
    for (std::size_t i = 13; i < pgm.size(); ++i) EXPECT_EQ(pgm[i], '\0');
  }
  fs::remove_all(o.out_dir);
}

TEST(Diagnose, UnknownSuite) {
  DiagnoseOptions o;
  o.suite = "spectral";
  EXPECT_THROW(diagnose(Subject::from_config(small_config()), o), ConfigError);
}

// ---------------------------------------------------------------------------
// Sweeps.

TEST(Sweep, ParameterPaths) {
  auto c = small_config();
  EXPECT_EQ(with_param(c, "β", "1.5").homogenizer.beta, 1.5);
  EXPECT_EQ(with_param(c, "homogenizer.beta", "0").homogenizer.beta, 0.0);
  EXPECT_EQ(with_param(c, "tau", "3").gbml.inner_steps, 3u);
  EXPECT_EQ(with_param(c, "backbone", "fomaml").gbml.backbone, gbml::Backbone::Fomaml);
  EXPECT_EQ(with_param(c, "T", "2").isi.temperature, 2.0);
  EXPECT_THROW(with_param(c, "isi.enabled", "true"), ConfigError);
  EXPECT_THROW(with_param(c, "homogenizer.gamma", "1"), ConfigError);
  EXPECT_THROW(with_param(c, "beta", "\"high\""), ConfigError);
  EXPECT_THROW(with_param(c, "gbml.inner_rate", "0"), ConfigError);
}

TEST(Sweep, OneRunPerValue) {
  auto c = small_config();
  c.run.out_dir = scratch("sweep").string();
  c.run.iterations = 2;
  c.eval.episodes = 3;
  auto points = sweep(c, "beta", {"0", "1.5"});
  ASSERT_EQ(points.size(), 2u);
  EXPECT_NE(points[0].run.dir, points[1].run.dir);
  std::ifstream csv(fs::path(c.run.out_dir) / "sweep.csv");
  std::vector<std::string> lines;
  for (std::string l; std::getline(csv, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[1].rfind("homogenizer.beta,0,", 0), 0u);
  EXPECT_EQ(lines[2].rfind("homogenizer.beta,1.5,", 0), 0u);
  for (const auto& p : points) {
    EXPECT_TRUE(fs::exists(p.run.dir / "events.jsonl"));
    EXPECT_TRUE(fs::exists(p.run.dir / "checkpoint.bin"));
    EXPECT_TRUE(fs::exists(p.run.dir / "summary.csv"));
  }
  fs::remove_all(c.run.out_dir);
}

TEST(RunExperiment, WallTimeStaysOutOfTheEventStream) {
  auto c = small_config();
  c.run.out_dir = scratch("run_a").string();
  RunOutput a = run_experiment(c);
  const std::string first = slurp(a.dir / "events.jsonl");
  RunOutput b = run_experiment(c);
  EXPECT_EQ(slurp(b.dir / "events.jsonl"), first);
  EXPECT_EQ(first.find("wall"), std::string::npos);
  EXPECT_NE(slurp(a.dir / "summary.csv").find("wall_seconds"), std::string::npos);
  EXPECT_EQ(records(first).back()["event"], "eval");
  fs::remove_all(c.run.out_dir);
}

TEST(RunExperiment, PeriodicCheckpointsMatchAShorterRun) {
  auto c = small_config();
  c.run.out_dir = scratch("periodic").string();
  c.run.iterations = 6;
  c.run.checkpoint_interval = 3;
  RunOutput a = run_experiment(c, false);
  ASSERT_TRUE(fs::exists(a.dir / "checkpoint-6.bin"));
  const ckpt::Checkpoint mid = ckpt::load((a.dir / "checkpoint-3.bin").string());
  EXPECT_EQ(mid.step, 3u);
  std::size_t marks = 0;
  for (const auto& r : records(slurp(a.dir / "events.jsonl"))) marks += r["event"] == "checkpoint";
  EXPECT_EQ(marks, 2u);

  auto shorter = c;
  shorter.run.iterations = 3;
  shorter.run.checkpoint_interval = 0;
  const ckpt::Checkpoint direct = train(shorter).checkpoint;
  EXPECT_EQ(mid.params, direct.params);
  EXPECT_EQ(mid.data_rng, direct.data_rng);
  ASSERT_TRUE(mid.homogenizer && direct.homogenizer);
  EXPECT_EQ(mid.homogenizer->omega, direct.homogenizer->omega);
  fs::remove_all(c.run.out_dir);
}

// ---------------------------------------------------------------------------
// Command line.

TEST(Cli, TrainEvalDiagnose) {
  const fs::path dir = scratch("cli");
  {
    std::ofstream f(dir / "exp.toml");
    f << kSmall;
  }
  std::string out;
  ASSERT_EQ(run_cli("train --config exp.toml --out-dir runs --iterations 3 --seed 9", dir, &out), 0) << out;
  auto c = small_config();
  c.run.seed = 9;
  c.run.iterations = 3;
  const fs::path run = dir / "runs" / run_name(c);
  ASSERT_TRUE(fs::exists(run / "checkpoint.bin")) << out;
  EXPECT_NE(out.find("accuracy"), std::string::npos);

  ASSERT_EQ(run_cli("eval --checkpoint " + (run / "checkpoint.bin").string() + " --families a,b --episodes 4", dir, &out), 0)
      << out;
  auto j = nlohmann::json::parse(out);
  EXPECT_EQ(j["episodes"], 4);
  EXPECT_EQ(j["families"], (std::vector<std::string>{"a", "b"}));

  ASSERT_EQ(run_cli("diagnose --suite homogeneity --checkpoint " + (run / "checkpoint.bin").string() +
                        " --out-dir diag",
                    dir, &out),
            0)
      << out;
  EXPECT_TRUE(fs::exists(dir / "diag" / "homogeneity.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "diag" / "homogeneity.csv"));
  EXPECT_EQ(run_cli("diagnose --suite nope --config exp.toml", dir, &out), 2);
  EXPECT_NE(out.find("unknown diagnose suite"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, EnvironmentThenFlags) {
  const fs::path dir = scratch("cli_env");
  {
    std::ofstream f(dir / "exp.toml");
    f << kSmall;
  }
  auto c = small_config();
  c.run.iterations = 1;
  std::string out;
  ASSERT_EQ(run_cli("train --config exp.toml --iterations 1 --no-eval", dir, &out), 0) << out;
  EXPECT_TRUE(fs::exists(dir / "runs" / run_name(c)));
  {
    EnvGuard s("ROTO_SEED", "21"), d("ROTO_OUT_DIR", "from_env");
    ASSERT_EQ(run_cli("train --config exp.toml --iterations 1 --no-eval", dir, &out), 0) << out;
    c.run.seed = 21;
    EXPECT_TRUE(fs::exists(dir / "from_env" / run_name(c)));
    ASSERT_EQ(run_cli("train --config exp.toml --iterations 1 --no-eval --seed 22 --out-dir flags", dir, &out), 0)
        << out;
    c.run.seed = 22;
    EXPECT_TRUE(fs::exists(dir / "flags" / run_name(c)));
  }
  fs::remove_all(dir);
}

TEST(Cli, UsageAndConfigErrors) {
  const fs::path dir = scratch("cli_err");
  {
    std::ofstream f(dir / "bad.toml");
    f << "[run]\nseed = 1\nbogus = 2\n";
  }
  std::string out;
  EXPECT_EQ(run_cli("", dir, &out), 2);
  EXPECT_EQ(run_cli("train", dir, &out), 2);
  EXPECT_EQ(run_cli("train --config bad.toml", dir, &out), 2);
  EXPECT_NE(out.find("unknown key 'bogus'"), std::string::npos) << out;
  EXPECT_EQ(run_cli("sweep --config bad.toml --param beta --values 0,1", dir, &out), 2);
  {
    std::ofstream f(dir / "corrupt.bin");
    f << "ROTOCKPT garbage";
  }
  EXPECT_EQ(run_cli("eval --checkpoint corrupt.bin", dir, &out), 1);
  fs::remove_all(dir);
}

TEST(Cli, NonFiniteTrainingExitsWithAbortCode) {
  const fs::path dir = scratch("cli_nan");
  {
    std::ofstream f(dir / "exp.toml");
    std::string text = kSmall;
    text.replace(text.find("outer_rate = 0.01"), 17, "outer_rate = 1e200");
    f << text;
  }
  std::string out;
  EXPECT_EQ(run_cli("train --config exp.toml --out-dir runs", dir, &out), 3) << out;
  EXPECT_NE(out.find("training aborted"), std::string::npos);
  fs::remove_all(dir);
}
