#pragma once

// Synthetic episodic task families.
//
// gaussian-blobs: every class is an isotropic Gaussian around a per-family
//   random center; inputs are scaled and shifted per family.
// sinusoid-regression: y = A sin(x - phase), A and phase drawn per episode.
// shape-texture: 16x16 single-channel images; the label is the shape, the
//   fill texture is a nuisance correlated with the label at a tunable rate.
//
// A family may instead carry an explicit finite base measure (atoms with
// labels and probabilities), which makes total variation distances exact.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "roto/errors.hpp"
#include "roto/networks.hpp"
#include "roto/random.hpp"
#include "roto/tensor.hpp"

namespace roto::tasks {

enum class FamilyKind { GaussianBlobs, SinusoidRegression, ShapeTexture };
enum class BatchMode { ID, WeakOOD, StrongOOD };
enum class ClassSplit { All, Train, Test };

inline std::string to_string(FamilyKind k) {
  switch (k) {
    case FamilyKind::GaussianBlobs: return "gaussian-blobs";
    case FamilyKind::SinusoidRegression: return "sinusoid-regression";
    case FamilyKind::ShapeTexture: return "shape-texture";
  }
  return "?";
}

inline FamilyKind family_kind_from(const std::string& s) {
  if (s == "gaussian-blobs") return FamilyKind::GaussianBlobs;
  if (s == "sinusoid-regression") return FamilyKind::SinusoidRegression;
  if (s == "shape-texture" || s == "shape-texture-images") return FamilyKind::ShapeTexture;
  throw ConfigError("unknown family kind '" + s + "'");
}

inline std::string to_string(BatchMode m) {
  switch (m) {
    case BatchMode::ID: return "id";
    case BatchMode::WeakOOD: return "weak-ood";
    case BatchMode::StrongOOD: return "strong-ood";
  }
  return "?";
}

inline BatchMode batch_mode_from(const std::string& s) {
  if (s == "id") return BatchMode::ID;
  if (s == "weak-ood" || s == "weak") return BatchMode::WeakOOD;
  if (s == "strong-ood" || s == "strong") return BatchMode::StrongOOD;
  throw ConfigError("unknown batch mode '" + s + "'");
}

/// Finite support with labels and probabilities.
struct DiscreteMeasure {
  std::vector<std::vector<double>> atoms;
  std::vector<int> labels;
  std::vector<double> probs;

  void validate() const {
    if (atoms.empty()) throw PreconditionError("discrete measure: no atoms");
    if (labels.size() != atoms.size() || probs.size() != atoms.size())
      throw PreconditionError("discrete measure: atoms, labels and probabilities differ in length");
    double s = 0.0;
    for (std::size_t i = 0; i < atoms.size(); ++i) {
      if (atoms[i].size() != atoms[0].size()) throw PreconditionError("discrete measure: ragged atoms");
      if (labels[i] < 0) throw PreconditionError("discrete measure: negative label");
      if (!(probs[i] >= 0.0)) throw PreconditionError("discrete measure: negative probability");
      s += probs[i];
    }
    if (std::abs(s - 1.0) > 1e-12) throw PreconditionError("discrete measure: probabilities sum to " + std::to_string(s));
  }
};

struct FamilySpec {
  std::string name;
  FamilyKind kind = FamilyKind::GaussianBlobs;
  std::uint64_t seed = 0;

  // gaussian-blobs
  std::size_t dim = 16;
  std::size_t num_classes = 40;
  double center_spread = 1.0;
  double noise = 0.5;
  double input_scale = 1.0;
  double input_shift = 0.0;
  double train_fraction = 0.75;

  // sinusoid-regression
  double amp_lo = 0.1, amp_hi = 5.0;
  double phase_lo = 0.0, phase_hi = std::numbers::pi;
  double x_lo = -5.0, x_hi = 5.0;

  // shape-texture
  std::size_t image_side = 16;
  double texture_period = 2.0;
  double texture_correlation = 1.0;
  double texture_amplitude = 1.0;
  double pixel_noise = 0.05;

  std::optional<DiscreteMeasure> base_measure;

  void validate() const {
    if (base_measure) {
      base_measure->validate();
      return;
    }
    switch (kind) {
      case FamilyKind::GaussianBlobs:
        require(dim >= 1, "gaussian-blobs: dim must be >= 1");
        require(num_classes >= 2, "gaussian-blobs: need at least 2 classes");
        require(center_spread >= 0.0, "gaussian-blobs: center spread must be >= 0");
        require(noise >= 0.0, "gaussian-blobs: noise must be >= 0");
        require(input_scale > 0.0, "gaussian-blobs: input scale must be > 0");
        require(train_fraction > 0.0 && train_fraction < 1.0, "gaussian-blobs: train fraction must be in (0, 1)");
        break;
      case FamilyKind::SinusoidRegression:
        require(amp_lo >= 0.0 && amp_lo <= amp_hi, "sinusoid: need 0 <= amp_lo <= amp_hi");
        require(phase_lo <= phase_hi, "sinusoid: need phase_lo <= phase_hi");
        require(x_lo < x_hi, "sinusoid: need x_lo < x_hi");
        break;
      case FamilyKind::ShapeTexture:
        require(image_side >= 8, "shape-texture: image side must be >= 8");
        require(texture_period >= 2.0, "shape-texture: texture period must be >= 2");
        require(texture_correlation >= 0.0 && texture_correlation <= 1.0, "shape-texture: correlation must be in [0, 1]");
        require(texture_amplitude > 0.0, "shape-texture: amplitude must be > 0");
        require(pixel_noise >= 0.0, "shape-texture: noise must be >= 0");
        break;
    }
  }

  /// Canonical text of every field that affects sampling.
  std::string canonical() const {
    char buf[64];
    std::string s = to_string(kind) + "|seed=" + std::to_string(seed);
    auto num = [&](const char* key, double v) {
      std::snprintf(buf, sizeof buf, "|%s=%.17g", key, v);
      s += buf;
    };
    if (base_measure) {
      s += "|measure";
      for (std::size_t i = 0; i < base_measure->atoms.size(); ++i) {
        s += "|atom";
        for (double v : base_measure->atoms[i]) num("x", v);
        s += "|y=" + std::to_string(base_measure->labels[i]);
        num("p", base_measure->probs[i]);
      }
      return s;
    }
    switch (kind) {
      case FamilyKind::GaussianBlobs:
        num("dim", static_cast<double>(dim));
        num("classes", static_cast<double>(num_classes));
        num("spread", center_spread);
        num("noise", noise);
        num("scale", input_scale);
        num("shift", input_shift);
        num("train_fraction", train_fraction);
        break;
      case FamilyKind::SinusoidRegression:
        num("amp_lo", amp_lo);
        num("amp_hi", amp_hi);
        num("phase_lo", phase_lo);
        num("phase_hi", phase_hi);
        num("x_lo", x_lo);
        num("x_hi", x_hi);
        break;
      case FamilyKind::ShapeTexture:
        num("side", static_cast<double>(image_side));
        num("period", texture_period);
        num("correlation", texture_correlation);
        num("amplitude", texture_amplitude);
        num("noise", pixel_noise);
        break;
    }
    return s;
  }
};

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline constexpr std::size_t kShapeCount = 6;
inline constexpr std::size_t kTextureCount = 5;
inline const char* shape_name(std::size_t s) {
  static const char* names[kShapeCount] = {"circle", "triangle", "bar", "vbar", "square", "cross"};
  return names[s];
}

struct TaskDistribution {
  FamilySpec spec;
  std::uint64_t id = 0;
  Shape input_shape;  // per example
  std::size_t num_classes = 0;
  std::vector<std::vector<double>> centers;  // gaussian-blobs
  std::vector<std::size_t> train_classes, test_classes;

  bool regression() const { return !spec.base_measure && spec.kind == FamilyKind::SinusoidRegression; }

  std::vector<std::size_t> classes(ClassSplit split) const {
    if (split == ClassSplit::Train && !train_classes.empty()) return train_classes;
    if (split == ClassSplit::Test && !test_classes.empty()) return test_classes;
    std::vector<std::size_t> all(num_classes);
    for (std::size_t i = 0; i < num_classes; ++i) all[i] = i;
    return all;
  }
};

inline TaskDistribution make_family(const FamilySpec& spec) {
  spec.validate();
  TaskDistribution f;
  f.spec = spec;
  f.id = fnv1a(spec.canonical());
  if (spec.base_measure) {
    const auto& m = *spec.base_measure;
    f.input_shape = Shape{m.atoms[0].size()};
    f.num_classes = static_cast<std::size_t>(*std::max_element(m.labels.begin(), m.labels.end())) + 1;
    return f;
  }
  Rng rng(spec.seed);
  switch (spec.kind) {
    case FamilyKind::GaussianBlobs: {
      f.input_shape = Shape{spec.dim};
      f.num_classes = spec.num_classes;
      f.centers.assign(spec.num_classes, std::vector<double>(spec.dim));
      for (auto& c : f.centers)
        for (auto& v : c) v = rng.normal(0.0, spec.center_spread);
      const auto n_train = std::max<std::size_t>(
          1, std::min(spec.num_classes - 1,
                      static_cast<std::size_t>(std::floor(spec.train_fraction * static_cast<double>(spec.num_classes)))));
      for (std::size_t c = 0; c < spec.num_classes; ++c) (c < n_train ? f.train_classes : f.test_classes).push_back(c);
      break;
    }
    case FamilyKind::SinusoidRegression:
      f.input_shape = Shape{1};
      f.num_classes = 1;
      break;
    case FamilyKind::ShapeTexture:
      f.input_shape = Shape{spec.image_side, spec.image_side, 1};
      f.num_classes = kShapeCount;
      break;
  }
  return f;
}

/// One shape-texture image: pixel values and the inside-shape mask.
struct ShapeImage {
  std::vector<double> pixels;
  std::vector<std::uint8_t> inside;
  std::size_t texture = 0;
};

inline bool shape_contains(std::size_t shape, double x, double y, double cx, double cy, double r) {
  const double dx = x - cx, dy = y - cy;
  switch (shape) {
    case 0: return dx * dx + dy * dy <= r * r;
    case 1: return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) * 0.5 + 0.5;
    case 2: return std::abs(dy) <= 1.5 && std::abs(dx) <= r + 1.0;
    case 3: return std::abs(dx) <= 1.5 && std::abs(dy) <= r + 1.0;
    case 4: return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case 5: return (std::abs(dy) <= 1.0 && std::abs(dx) <= r + 0.5) || (std::abs(dx) <= 1.0 && std::abs(dy) <= r + 0.5);
  }
  return false;
}

inline bool texture_on(std::size_t texture, std::size_t x, std::size_t y, std::size_t ox, std::size_t oy, std::size_t h) {
  const std::size_t u = (x + ox) / h, v = (y + oy) / h;
  switch (texture) {
    case 0: return (u + v) % 2 == 0;
    case 1: return v % 2 == 0;
    case 2: return u % 2 == 0;
    case 3: return u % 2 == 0 && v % 2 == 0;
    case 4: return ((x + y + ox) / (2 * h)) % 2 == 0;
  }
  return false;
}

inline ShapeImage render_shape(const FamilySpec& spec, std::size_t shape, Rng& rng) {
  const std::size_t S = spec.image_side;
  ShapeImage img;
  img.pixels.assign(S * S, 0.0);
  img.inside.assign(S * S, 0);
  const double mid = (static_cast<double>(S) - 1.0) / 2.0;
  const double cx = mid + rng.uniform(-1.5, 1.5), cy = mid + rng.uniform(-1.5, 1.5);
  const double r = static_cast<double>(S) * rng.uniform(0.25, 0.36);
  img.texture = rng.bernoulli(spec.texture_correlation) ? shape % kTextureCount : rng.index(kTextureCount);
  const auto h = std::max<std::size_t>(1, static_cast<std::size_t>(spec.texture_period / 2.0));
  const std::size_t ox = rng.index(2 * h), oy = rng.index(2 * h);
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      const std::size_t i = y * S + x;
      if (shape_contains(shape, static_cast<double>(x), static_cast<double>(y), cx, cy, r)) {
        img.inside[i] = 1;
        img.pixels[i] = spec.texture_amplitude * (texture_on(img.texture, x, y, ox, oy, h) ? 1.0 : 0.35);
      }
      img.pixels[i] += rng.normal(0.0, spec.pixel_noise);
    }
  return img;
}

struct Episode {
  LabeledSet support;
  LabeledSet query;
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::uint64_t family_id = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> source_classes;  // family class behind each episode label
};

namespace detail {

inline std::size_t draw_atom(const DiscreteMeasure& m, const std::vector<std::size_t>& idx, double total, Rng& rng) {
  double u = rng.uniform() * total;
  for (std::size_t i : idx) {
    u -= m.probs[i];
    if (u < 0.0) return i;
  }
  return idx.back();
}

}  // namespace detail

/// n-way k-shot episode with n_query query examples per class (regression
/// families: k support and n_query query points). The episode is generated
/// from its own seed, drawn from `rng`, so it can be regenerated from that seed.
inline Episode sample_episode(const TaskDistribution& f, std::size_t n, std::size_t k, std::size_t n_query, Rng& rng,
                              ClassSplit split = ClassSplit::All) {
  require(k >= 1 && n_query >= 1, "sample_episode: k and n_query must be >= 1");
  Episode e;
  e.seed = rng.next_u64();
  e.family_id = f.id;
  e.k_shot = k;
  Rng r(e.seed);

  if (f.regression()) {
    e.n_way = 1;
    const auto& s = f.spec;
    const double amp = r.uniform(s.amp_lo, s.amp_hi), phase = r.uniform(s.phase_lo, s.phase_hi);
    auto fill = [&](LabeledSet& d, std::size_t count) {
      d.x = Tensor(Shape{count, 1});
      d.targets.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        const double x = r.uniform(s.x_lo, s.x_hi);
        d.x[i] = x;
        d.targets[i] = amp * std::sin(x - phase);
      }
    };
    fill(e.support, k);
    fill(e.query, n_query);
    return e;
  }

  std::vector<std::size_t> pool = f.classes(split);
  if (f.spec.base_measure) {
    std::vector<std::size_t> present;
    for (std::size_t c : pool)
      for (std::size_t i = 0; i < f.spec.base_measure->atoms.size(); ++i)
        if (static_cast<std::size_t>(f.spec.base_measure->labels[i]) == c && f.spec.base_measure->probs[i] > 0.0) {
          present.push_back(c);
          break;
        }
    pool = present;
  }
  require(n >= 1 && n <= pool.size(), "sample_episode: family has " + std::to_string(pool.size()) +
                                          " classes available, requested n = " + std::to_string(n));
  r.shuffle(pool);
  pool.resize(n);
  e.n_way = n;
  e.source_classes = pool;

  const std::size_t per = f.input_shape.numel();
  auto make_set = [&](std::size_t per_class) {
    LabeledSet d;
    std::vector<std::size_t> dims{n * per_class};
    for (auto v : f.input_shape.dims()) dims.push_back(v);
    d.x = Tensor(Shape(std::span<const std::size_t>(dims)));
    d.labels.resize(n * per_class);
    return d;
  };
  e.support = make_set(k);
  e.query = make_set(n_query);

  auto fill_row = [&](LabeledSet& d, std::size_t row, std::size_t label) {
    const std::size_t cls = pool[label];
    d.labels[row] = static_cast<int>(label);
    double* out = d.x.data().data() + row * per;
    if (f.spec.base_measure) {
      const auto& m = *f.spec.base_measure;
      std::vector<std::size_t> idx;
      double total = 0.0;
      for (std::size_t i = 0; i < m.atoms.size(); ++i)
        if (static_cast<std::size_t>(m.labels[i]) == cls) {
          idx.push_back(i);
          total += m.probs[i];
        }
      const auto& a = m.atoms[detail::draw_atom(m, idx, total, r)];
      std::copy(a.begin(), a.end(), out);
      return;
    }
    switch (f.spec.kind) {
      case FamilyKind::GaussianBlobs:
        for (std::size_t j = 0; j < per; ++j)
          out[j] = f.spec.input_scale * (f.centers[cls][j] + r.normal(0.0, f.spec.noise)) + f.spec.input_shift;
        break;
      case FamilyKind::ShapeTexture: {
        ShapeImage img = render_shape(f.spec, cls, r);
        std::copy(img.pixels.begin(), img.pixels.end(), out);
        break;
      }
      case FamilyKind::SinusoidRegression:
        break;
    }
  };
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t j = 0; j < k; ++j) fill_row(e.support, c * k + j, c);
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t j = 0; j < n_query; ++j) fill_row(e.query, c * n_query + j, c);
  return e;
}

struct MetaBatch {
  std::vector<Episode> episodes;
  BatchMode mode = BatchMode::ID;
  std::size_t size() const { return episodes.size(); }
};

/// ID: one family for every episode. Weak OOD: each episode from an
/// independently drawn family. Strong OOD: pairwise-distinct families.
inline MetaBatch sample_minibatch(std::span<const TaskDistribution> families, std::size_t n, std::size_t k,
                                  std::size_t n_query, std::size_t N, BatchMode mode, Rng& rng,
                                  ClassSplit split = ClassSplit::All) {
  require(!families.empty(), "sample_minibatch: no families");
  require(N >= 1, "sample_minibatch: N must be >= 1");
  MetaBatch b;
  b.mode = mode;
  std::vector<std::size_t> pick(N);
  switch (mode) {
    case BatchMode::ID: {
      const std::size_t f = rng.index(families.size());
      std::fill(pick.begin(), pick.end(), f);
      break;
    }
    case BatchMode::WeakOOD:
      for (auto& p : pick) p = rng.index(families.size());
      break;
    case BatchMode::StrongOOD: {
      if (families.size() < N)
        throw PreconditionError("sample_minibatch: strong OOD needs " + std::to_string(N) + " families, have " +
                                std::to_string(families.size()));
      std::vector<std::size_t> perm(families.size());
      for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
      rng.shuffle(perm);
      std::copy_n(perm.begin(), N, pick.begin());
      break;
    }
  }
  for (std::size_t i = 0; i < N; ++i) b.episodes.push_back(sample_episode(families[pick[i]], n, k, n_query, rng, split));
  return b;
}

/// Half the l1 distance between two finite measures over the union of their
/// atoms; an atom absent from one measure has probability zero there.
inline double tvd(const DiscreteMeasure& p, const DiscreteMeasure& q) {
  p.validate();
  q.validate();
  if (p.atoms[0].size() != q.atoms[0].size()) throw ShapeError("tvd: atom dimensions differ");
  using Key = std::pair<std::vector<double>, int>;
  std::map<Key, std::pair<double, double>> mass;
  for (std::size_t i = 0; i < p.atoms.size(); ++i) mass[{p.atoms[i], p.labels[i]}].first += p.probs[i];
  for (std::size_t i = 0; i < q.atoms.size(); ++i) mass[{q.atoms[i], q.labels[i]}].second += q.probs[i];
  double s = 0.0;
  for (const auto& [key, pq] : mass) s += std::abs(pq.first - pq.second);
  return std::clamp(0.5 * s, 0.0, 1.0);
}

inline double tvd(const TaskDistribution& a, const TaskDistribution& b) {
  if (!a.spec.base_measure || !b.spec.base_measure) throw PreconditionError("tvd: family without an explicit base measure");
  return tvd(*a.spec.base_measure, *b.spec.base_measure);
}

inline nlohmann::json episode_json(const Episode& e) {
  auto dims = [](const Tensor& t) {
    auto d = t.shape().dims();
    return std::vector<std::size_t>(d.begin(), d.end());
  };
  nlohmann::json j;
  j["family_id"] = e.family_id;
  j["seed"] = e.seed;
  j["n_way"] = e.n_way;
  j["k_shot"] = e.k_shot;
  j["support_shape"] = dims(e.support.x);
  j["query_shape"] = dims(e.query.x);
  if (e.support.regression()) {
    j["support_targets"] = e.support.targets;
    j["query_targets"] = e.query.targets;
  } else {
    j["support_labels"] = e.support.labels;
    j["query_labels"] = e.query.labels;
  }
  return j;
}

inline void write_jsonl(std::ostream& os, const MetaBatch& b) {
  for (const auto& e : b.episodes) os << episode_json(e).dump() << '\n';
}

}  // namespace roto::tasks
