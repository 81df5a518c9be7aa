#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pat/array.hpp"
#include "pat/errors.hpp"
#include "pat/image.hpp"
#include "pat/rng.hpp"

namespace pat {

/// Fixed per-(seed, class) sprites. Each sprite is a low-frequency random
/// field (a 4x4 seed grid bilinearly upsampled) normalized to span [0,1];
/// smooth patterns survive the 2x patch upscaling that inference applies,
/// unlike per-pixel noise sprites.
struct GlyphAtlas {
  std::uint32_t glyph_size = 16;
  std::vector<std::vector<double>> sprites;  // q sprites, glyph_size^2 each
  std::vector<double> contrast;              // (0,1] per class

  static GlyphAtlas make(std::uint32_t classes, std::uint32_t glyph_size, std::uint64_t seed,
                         std::vector<double> contrast);
};

namespace detail {

inline std::vector<double> sprite_candidate(std::uint64_t seed, std::uint32_t glyph_size) {
  Rng rng(seed);
  const std::size_t base = 4;
  std::vector<double> field(base * base);
  for (double& x : field) x = rng.uniform();
  std::vector<double> s = bilinear_resize(field, base, glyph_size);
  const auto [mn_it, mx_it] = std::minmax_element(s.begin(), s.end());
  const double lo = *mn_it, hi = *mx_it;
  if (hi - lo <= 0.0) return {};  // flat field, caller redraws
  for (double& x : s) x = (x - lo) / (hi - lo);
  return s;
}

inline std::size_t binarized_hamming(std::span<const double> a, std::span<const double> b) {
  std::size_t d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] > 0.5) != (b[i] > 0.5);
  return d;
}

}  // namespace detail

inline GlyphAtlas GlyphAtlas::make(std::uint32_t classes, std::uint32_t glyph_size,
                                   std::uint64_t seed, std::vector<double> contrast) {
  if (contrast.size() != classes) throw ConfigError("atlas: contrast list must have q entries");
  for (double c : contrast)
    if (!(c > 0.0 && c <= 1.0)) throw ConfigError("atlas: contrast must lie in (0,1]");
  GlyphAtlas atlas;
  atlas.glyph_size = glyph_size;
  atlas.contrast = std::move(contrast);
  const std::size_t min_dist = static_cast<std::size_t>(glyph_size) * glyph_size / 8;
  for (std::uint32_t k = 0; k < classes; ++k) {
    for (std::uint64_t attempt = 0;; ++attempt) {
      std::vector<double> s =
          detail::sprite_candidate(derive_seed(seed, "atlas", (static_cast<std::uint64_t>(k) << 20) + attempt),
                                   glyph_size);
      if (s.empty()) continue;
      bool distinct = true;
      for (const auto& prev : atlas.sprites)
        if (detail::binarized_hamming(s, prev) < min_dist) distinct = false;
      if (distinct) {
        atlas.sprites.push_back(std::move(s));
        break;
      }
      if (attempt > 1000) throw ConfigError("atlas: could not draw distinct sprites");
    }
  }
  return atlas;
}

/// Directed co-occurrence edge: if class `src` is present, `dst` joins with
/// probability rho; when `src` is absent, `dst` appears alone with
/// probability solo_prob.
struct Coupling {
  std::uint32_t src = 0;
  std::uint32_t dst = 0;
  double rho = 0.0;
  double solo_prob = 0.0;
};

struct CooccurrenceSpec {
  std::uint32_t classes = 0;
  std::vector<double> anchor_prob;    // independent presence probability per class
  std::vector<Coupling> couplings;    // acyclic, processed in topological order
  std::uint32_t max_objects = 0;      // 0 = unlimited
  bool allow_colocate = true;

  void validate() const;
  /// Couplings sorted so every source is decided before its dependents.
  std::vector<std::size_t> topological_coupling_order() const;
};

inline void CooccurrenceSpec::validate() const {
  if (classes == 0) throw ConfigError("spec: classes must be >= 1");
  if (anchor_prob.size() != classes) throw ConfigError("spec: anchor_prob must have q entries");
  for (double p : anchor_prob)
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("spec: anchor probabilities must lie in [0,1]");
  double max_rho = 0.0;
  for (const Coupling& c : couplings) {
    if (c.src >= classes || c.dst >= classes || c.src == c.dst)
      throw ConfigError("spec: coupling endpoints out of range");
    if (!(c.rho >= 0.0 && c.rho <= 1.0) || !(c.solo_prob >= 0.0 && c.solo_prob <= 1.0))
      throw ConfigError("spec: coupling probabilities must lie in [0,1]");
    max_rho = std::max(max_rho, c.rho);
  }
  if (!couplings.empty() && max_rho <= 0.2)
    throw ConfigError("spec: at least one coupling must imply P(B|A) > 0.2");
  topological_coupling_order();  // throws on cycles
}

inline std::vector<std::size_t> CooccurrenceSpec::topological_coupling_order() const {
  // Kahn's algorithm over the class graph; stable by class index.
  std::vector<std::vector<std::size_t>> out_edges(classes);
  std::vector<int> indegree(classes, 0);
  for (std::size_t e = 0; e < couplings.size(); ++e) {
    out_edges[couplings[e].src].push_back(e);
    indegree[couplings[e].dst] += 1;
  }
  std::vector<std::uint32_t> ready;
  for (std::uint32_t k = 0; k < classes; ++k)
    if (indegree[k] == 0) ready.push_back(k);
  std::vector<std::size_t> order;
  std::size_t head = 0;
  while (head < ready.size()) {
    const std::uint32_t k = ready[head++];
    for (std::size_t e : out_edges[k]) {
      order.push_back(e);
      if (--indegree[couplings[e].dst] == 0) ready.push_back(couplings[e].dst);
    }
  }
  if (order.size() != couplings.size()) throw ConfigError("spec: coupling graph has a cycle");
  return order;
}

struct Placement {
  std::uint32_t class_index = 0;
  std::uint32_t quadrant = 0;  // 0=TL 1=TR 2=BL 3=BR
  std::uint32_t off_row = 0;   // offset inside the quadrant
  std::uint32_t off_col = 0;
};

struct SceneExample {
  std::vector<float> image;          // S*S pixels in [0,1]
  std::vector<std::uint8_t> labels;  // length q
  std::vector<Placement> placements;
};

struct Dataset {
  std::uint32_t side = 0;
  std::uint32_t classes = 0;
  std::string split;
  std::uint64_t seed = 0;
  double noise_sd = 0.0;
  CooccurrenceSpec spec;
  std::vector<SceneExample> examples;

  std::size_t size() const { return examples.size(); }
};

/// Draws one label vector: anchors first, then couplings in topological
/// order, then truncation to max_objects (higher class indices drop first).
inline std::vector<std::uint8_t> sample_label_vector(const CooccurrenceSpec& spec, Rng& rng) {
  std::vector<std::uint8_t> y(spec.classes, 0);
  for (std::uint32_t k = 0; k < spec.classes; ++k)
    if (spec.anchor_prob[k] > 0.0 && rng.bernoulli(spec.anchor_prob[k])) y[k] = 1;
  for (std::size_t e : spec.topological_coupling_order()) {
    const Coupling& c = spec.couplings[e];
    const double p = y[c.src] ? c.rho : c.solo_prob;
    if (p > 0.0 && rng.bernoulli(p)) y[c.dst] = 1;
  }
  if (spec.max_objects > 0) {
    std::uint32_t count = 0;
    for (std::uint8_t b : y) count += b;
    for (std::uint32_t k = spec.classes; k-- > 0 && count > spec.max_objects;) {
      if (y[k]) {
        y[k] = 0;
        --count;
      }
    }
  }
  return y;
}

/// Renders present classes into quadrants: distinct quadrants while they
/// last, then (if co-location is allowed) additive blending into random
/// quadrants. Glyphs are scaled by class contrast, the sum is clamped, and
/// Gaussian pixel noise is applied last.
inline SceneExample render_scene(const std::vector<std::uint8_t>& labels, const GlyphAtlas& atlas,
                                 Rng& rng, double noise_sd, std::uint32_t side,
                                 bool allow_colocate = true) {
  const std::uint32_t half = side / 2;
  const std::uint32_t g = atlas.glyph_size;
  require_shape(side % 2 == 0, "render_scene: side must be even");
  require_shape(g <= half, "render_scene: glyph must fit in a quadrant");
  require_shape(labels.size() == atlas.sprites.size(), "render_scene: labels/atlas size mismatch");

  std::vector<std::uint32_t> present;
  for (std::uint32_t k = 0; k < labels.size(); ++k)
    if (labels[k]) present.push_back(k);
  if (present.size() > 4 && !allow_colocate)
    throw ConfigError("render_scene: more than 4 present classes with co-location disabled");

  std::vector<std::uint32_t> quads = {0, 1, 2, 3};
  rng.shuffle(quads);

  SceneExample ex;
  ex.labels = labels;
  std::vector<double> canvas(static_cast<std::size_t>(side) * side, 0.0);
  const std::uint32_t max_off = half - g;
  for (std::size_t i = 0; i < present.size(); ++i) {
    const std::uint32_t k = present[i];
    const std::uint32_t quad =
        i < 4 ? quads[i] : static_cast<std::uint32_t>(rng.below(4));
    const std::uint32_t off_r = static_cast<std::uint32_t>(rng.below(max_off + 1));
    const std::uint32_t off_c = static_cast<std::uint32_t>(rng.below(max_off + 1));
    const std::uint32_t row0 = (quad / 2) * half + off_r;
    const std::uint32_t col0 = (quad % 2) * half + off_c;
    const double c = atlas.contrast[k];
    const std::vector<double>& sprite = atlas.sprites[k];
    for (std::uint32_t r = 0; r < g; ++r)
      for (std::uint32_t cc = 0; cc < g; ++cc)
        canvas[(row0 + r) * side + col0 + cc] += c * sprite[r * g + cc];
    ex.placements.push_back({k, quad, off_r, off_c});
  }
  for (double& x : canvas) x = std::clamp(x, 0.0, 1.0);
  if (noise_sd > 0.0) {
    for (double& x : canvas) x = std::clamp(x + rng.normal(0.0, noise_sd), 0.0, 1.0);
  }
  ex.image.resize(canvas.size());
  for (std::size_t i = 0; i < canvas.size(); ++i) ex.image[i] = static_cast<float>(canvas[i]);
  return ex;
}

inline Dataset generate_split(const CooccurrenceSpec& spec, const GlyphAtlas& atlas,
                              std::size_t count, std::uint64_t seed, const std::string& split,
                              double noise_sd, std::uint32_t side) {
  spec.validate();
  Dataset ds;
  ds.side = side;
  ds.classes = spec.classes;
  ds.split = split;
  ds.seed = seed;
  ds.noise_sd = noise_sd;
  ds.spec = spec;
  ds.examples.resize(count);
  const std::string stream = "data/" + split;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, stream, i));
    const std::vector<std::uint8_t> y = sample_label_vector(spec, rng);
    ds.examples[i] = render_scene(y, atlas, rng, noise_sd, side, spec.allow_colocate);
  }
  return ds;
}

inline std::pair<Dataset, Dataset> generate_dataset(const CooccurrenceSpec& spec,
                                                    const GlyphAtlas& atlas, std::size_t n_train,
                                                    std::size_t n_test, std::uint64_t seed,
                                                    double noise_sd, std::uint32_t side) {
  if (n_train < 1 || n_test < 1) throw ConfigError("generate_dataset: need n_train, n_test >= 1");
  return {generate_split(spec, atlas, n_train, seed, "train", noise_sd, side),
          generate_split(spec, atlas, n_test, seed, "test", noise_sd, side)};
}

// ---------------------------------------------------------------------------
// Default desk-scale benchmark: 64x64 scenes, ten classes, three anchored
// pairs (0->1, 2->3, 4->5) at rho=0.9 whose partners are low-contrast, plus
// four free mid-contrast classes.

inline CooccurrenceSpec default_benchmark_spec() {
  CooccurrenceSpec spec;
  spec.classes = 10;
  spec.anchor_prob = {0.5, 0.0, 0.5, 0.0, 0.5, 0.0, 0.35, 0.35, 0.35, 0.35};
  spec.couplings = {{0, 1, 0.9, 0.05}, {2, 3, 0.9, 0.05}, {4, 5, 0.9, 0.05}};
  spec.max_objects = 0;
  spec.allow_colocate = true;
  return spec;
}

inline std::vector<double> default_contrast(std::uint32_t classes) {
  // anchors bright, coupled partners faint ("hard"), free classes in between
  std::vector<double> c(classes, 0.5);
  for (std::uint32_t k : {0u, 2u, 4u})
    if (k < classes) c[k] = 0.65;
  for (std::uint32_t k : {1u, 3u, 5u})
    if (k < classes) c[k] = 0.15;
  return c;
}

inline constexpr double kDefaultNoiseSd = 0.05;
inline constexpr std::uint32_t kDefaultSide = 64;
inline constexpr std::uint32_t kDefaultGlyph = 16;

// ---------------------------------------------------------------------------
// Dataset file (.dsb): magic "PATD", version, n, S, q, then per example the
// labels as q bytes followed by S*S little-endian f32 pixels. A plain-text
// key=value manifest travels next to the binary.

inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_dsb(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  os.write("PATD", 4);
  write_u32(os, kDatasetVersion);
  write_u32(os, static_cast<std::uint32_t>(ds.size()));
  write_u32(os, ds.side);
  write_u32(os, ds.classes);
  for (const SceneExample& ex : ds.examples) {
    os.write(reinterpret_cast<const char*>(ex.labels.data()),
             static_cast<std::streamsize>(ex.labels.size()));
    for (float p : ex.image) write_f32(os, p);
  }
  if (!os) throw IoError("write failed: " + path);
}

inline Dataset load_dsb(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "PATD") throw IoError("not a dataset file: " + path);
  const std::uint32_t version = read_u32(is);
  if (version != kDatasetVersion)
    throw IoError("unsupported dataset version " + std::to_string(version) + ": " + path);
  Dataset ds;
  const std::uint32_t n = read_u32(is);
  ds.side = read_u32(is);
  ds.classes = read_u32(is);
  ds.examples.resize(n);
  const std::size_t npix = static_cast<std::size_t>(ds.side) * ds.side;
  for (SceneExample& ex : ds.examples) {
    ex.labels.resize(ds.classes);
    is.read(reinterpret_cast<char*>(ex.labels.data()), static_cast<std::streamsize>(ds.classes));
    ex.image.resize(npix);
    for (float& p : ex.image) p = read_f32(is);
  }
  if (!is) throw IoError("truncated dataset file: " + path);
  return ds;
}

inline void save_manifest(const Dataset& train, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for write: " + path);
  os << "seed=" << train.seed << "\n";
  os << "side=" << train.side << "\n";
  os << "classes=" << train.classes << "\n";
  os << "noise_sd=" << train.noise_sd << "\n";
  os << "max_objects=" << train.spec.max_objects << "\n";
  os << "allow_colocate=" << (train.spec.allow_colocate ? 1 : 0) << "\n";
  std::ostringstream ap;
  for (std::size_t k = 0; k < train.spec.anchor_prob.size(); ++k)
    ap << (k ? "," : "") << train.spec.anchor_prob[k];
  os << "anchor_prob=" << ap.str() << "\n";
  for (const Coupling& c : train.spec.couplings)
    os << "coupling=" << c.src << ">" << c.dst << ":" << c.rho << ":" << c.solo_prob << "\n";
  if (!os) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Empirical label statistics, shared by the synth command and the tests.

inline std::vector<double> label_marginals(const Dataset& ds) {
  std::vector<double> m(ds.classes, 0.0);
  for (const SceneExample& ex : ds.examples)
    for (std::uint32_t k = 0; k < ds.classes; ++k) m[k] += ex.labels[k];
  for (double& x : m) x /= static_cast<double>(ds.size());
  return m;
}

/// Empirical P(b present | a present); NaN when a never occurs.
inline double empirical_conditional(const Dataset& ds, std::uint32_t b, std::uint32_t a) {
  std::size_t na = 0, nab = 0;
  for (const SceneExample& ex : ds.examples) {
    if (ex.labels[a]) {
      ++na;
      if (ex.labels[b]) ++nab;
    }
  }
  if (na == 0) return std::nan("");
  return static_cast<double>(nab) / static_cast<double>(na);
}

}  // namespace pat
