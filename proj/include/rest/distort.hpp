#pragma once

// Distorted-dataset generation: uniform sampling over unions of disjoint bands
// (so near-identity values are never drawn), the transformation families, and
// the 16 direction-constrained rotation/scale/translation combinations.

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "rest/image.hpp"
#include "rest/keyvalue.hpp"
#include "rest/random.hpp"
#include "rest/warp.hpp"

namespace rest {

struct Band {
  double lo = 0.0;
  double hi = 0.0;
  double length() const { return hi - lo; }
  friend bool operator==(const Band&, const Band&) = default;
};

/// Union of ordered, non-overlapping bands. Values strictly between two
/// consecutive bands are never sampled.
class ExclusiveInterval {
 public:
  ExclusiveInterval() = default;
  explicit ExclusiveInterval(std::vector<Band> bands) : bands_(std::move(bands)) {
    if (bands_.empty()) throw std::invalid_argument("ExclusiveInterval: no bands");
    for (std::size_t i = 0; i < bands_.size(); ++i) {
      if (!(bands_[i].lo <= bands_[i].hi)) throw std::invalid_argument("ExclusiveInterval: band with lo > hi");
      if (i > 0 && !(bands_[i - 1].hi <= bands_[i].lo)) {
        throw std::invalid_argument("ExclusiveInterval: bands overlap or are unordered");
      }
    }
  }
  ExclusiveInterval(Band negative, Band positive) : ExclusiveInterval(std::vector<Band>{negative, positive}) {}

  /// [-hi, -lo] together with [lo, hi].
  static ExclusiveInterval symmetric(double lo, double hi) { return {{-hi, -lo}, {lo, hi}}; }

  const std::vector<Band>& bands() const { return bands_; }
  double total_length() const {
    double t = 0.0;
    for (const Band& b : bands_) t += b.length();
    return t;
  }
  bool contains(double v) const {
    return std::any_of(bands_.begin(), bands_.end(), [v](const Band& b) { return v >= b.lo && v <= b.hi; });
  }

  friend bool operator==(const ExclusiveInterval&, const ExclusiveInterval&) = default;

 private:
  std::vector<Band> bands_;
};

/// Uniform draw from the union; each band is chosen with probability
/// proportional to its length (uniformly among bands if all are points).
inline double sample_exclusive(const ExclusiveInterval& interval, Rng& rng) {
  const auto& bands = interval.bands();
  if (bands.empty()) throw std::invalid_argument("sample_exclusive: empty interval");
  const double total = interval.total_length();
  if (total <= 0.0) {
    std::uniform_int_distribution<std::size_t> pick(0, bands.size() - 1);
    return bands[pick(rng)].lo;
  }
  double u = std::uniform_real_distribution<double>(0.0, total)(rng);
  for (const Band& b : bands) {
    if (u <= b.length()) return std::clamp(b.lo + u, b.lo, b.hi);
    u -= b.length();
  }
  return bands.back().hi;
}

enum class Family { kIdentity, kR, kRSc, kRSh, kRSS, kRSST, kRST };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::kIdentity: return "identity";
    case Family::kR: return "R";
    case Family::kRSc: return "RSc";
    case Family::kRSh: return "RSh";
    case Family::kRSS: return "RSS";
    case Family::kRSST: return "RSST";
    case Family::kRST: return "RST";
  }
  return "?";
}

inline Family parse_family(const std::string& name) {
  for (Family f : {Family::kIdentity, Family::kR, Family::kRSc, Family::kRSh, Family::kRSS,
                   Family::kRSST, Family::kRST}) {
    if (name == to_string(f)) return f;
  }
  throw std::invalid_argument("unknown distortion family '" + name + "'");
}

/// Which parameters to sample and from where; unset parameters keep their
/// identity value. Indices follow AffineParams::to_array().
struct DistortionSpec {
  Family family = Family::kIdentity;
  std::array<std::optional<ExclusiveInterval>, AffineParams::kSize> intervals{};
  std::uint64_t seed = 0;
};

enum ParamIndex : int {
  kRotation = 0,
  kScale1 = 1,
  kScale2 = 2,
  kShear1 = 3,
  kShear2 = 4,
  kTranslate1 = 5,
  kTranslate2 = 6,
};

/// Sampling ranges for one experiment setting.
struct DistortionRanges {
  ExclusiveInterval rotation;
  ExclusiveInterval scale;
  ExclusiveInterval shear;
  ExclusiveInterval translation;

  /// Recovery and sample-efficiency experiments.
  static DistortionRanges standard() {
    return {ExclusiveInterval::symmetric(20.0, 50.0), ExclusiveInterval({0.8, 0.9}, {1.1, 1.2}),
            ExclusiveInterval::symmetric(0.2, 0.5), ExclusiveInterval::symmetric(3.0, 6.0)};
  }
  /// Generalization experiment (wider gaps, no shear).
  static DistortionRanges generalization() {
    return {ExclusiveInterval::symmetric(50.0, 60.0), ExclusiveInterval({0.75, 0.8}, {1.2, 1.25}),
            ExclusiveInterval::symmetric(0.2, 0.5), ExclusiveInterval::symmetric(6.0, 7.0)};
  }
};

/// Spec for a family. RST defaults to the generalization ranges, all other
/// families to the standard ones.
inline DistortionSpec make_spec(Family family, std::uint64_t seed,
                                const std::optional<DistortionRanges>& ranges_override = std::nullopt) {
  const DistortionRanges r = ranges_override.value_or(
      family == Family::kRST ? DistortionRanges::generalization() : DistortionRanges::standard());
  DistortionSpec spec;
  spec.family = family;
  spec.seed = seed;
  auto& iv = spec.intervals;
  const bool rotate = family != Family::kIdentity;
  const bool scale = family == Family::kRSc || family == Family::kRSS || family == Family::kRSST ||
                     family == Family::kRST;
  const bool shear = family == Family::kRSh || family == Family::kRSS || family == Family::kRSST;
  const bool translate = family == Family::kRSST || family == Family::kRST;
  if (rotate) iv[kRotation] = r.rotation;
  if (scale) iv[kScale1] = iv[kScale2] = r.scale;
  if (shear) iv[kShear1] = iv[kShear2] = r.shear;
  if (translate) iv[kTranslate1] = iv[kTranslate2] = r.translation;
  return spec;
}

/// One draw of the spec's parameters.
inline AffineParams sample_params(const DistortionSpec& spec, Rng& rng) {
  std::array<double, AffineParams::kSize> values = AffineParams::identity().to_array();
  for (int i = 0; i < AffineParams::kSize; ++i) {
    if (spec.intervals[i]) values[i] = sample_exclusive(*spec.intervals[i], rng);
  }
  return AffineParams::from_array(values);
}

/// Applies a seeded, independently drawn distortion to every image. Image i
/// draws from a generator seeded by (spec.seed, i), so the result does not
/// depend on processing order. Labels are kept.
inline LabeledSet make_distorted_dataset(const LabeledSet& canonical, const DistortionSpec& spec,
                                         std::vector<AffineParams>* applied = nullptr) {
  if (canonical.empty()) throw std::invalid_argument("make_distorted_dataset: empty input set");
  LabeledSet out;
  out.images.reserve(canonical.size());
  out.labels = canonical.labels;
  if (applied) applied->clear();
  for (std::size_t i = 0; i < canonical.size(); ++i) {
    Rng rng(derive_seed(spec.seed, i));
    const AffineParams p = sample_params(spec, rng);
    out.images.push_back(warp_image(canonical.images[i], p));
    if (applied) applied->push_back(p);
  }
  return out;
}

enum class RotationDir { kRight, kLeft };
enum class ScaleDir { kUp, kDown };
enum class TranslationDir { kRight, kLeft, kUp, kDown };

/// One direction choice per transformation. Rotation right is clockwise on
/// screen (positive angle); translation up is towards row 0.
struct RstCombo {
  RotationDir rotation = RotationDir::kRight;
  ScaleDir scale = ScaleDir::kUp;
  TranslationDir translation = TranslationDir::kRight;

  friend bool operator==(const RstCombo&, const RstCombo&) = default;
};

inline std::string to_string(const RstCombo& c) {
  static constexpr const char* kRot[] = {"right", "left"};
  static constexpr const char* kScale[] = {"up", "down"};
  static constexpr const char* kTrans[] = {"right", "left", "up", "down"};
  return std::string("R:") + kRot[static_cast<int>(c.rotation)] + "/S:" +
         kScale[static_cast<int>(c.scale)] + "/T:" + kTrans[static_cast<int>(c.translation)];
}

/// All 16 combinations, rotation-major then scale then translation.
inline std::vector<RstCombo> enumerate_rst_combos() {
  std::vector<RstCombo> out;
  for (auto r : {RotationDir::kRight, RotationDir::kLeft}) {
    for (auto s : {ScaleDir::kUp, ScaleDir::kDown}) {
      for (auto t : {TranslationDir::kRight, TranslationDir::kLeft, TranslationDir::kUp,
                     TranslationDir::kDown}) {
        out.push_back({r, s, t});
      }
    }
  }
  return out;
}

struct ComboSplit {
  std::vector<RstCombo> train;
  std::vector<RstCombo> test;
};

/// Seeded random partition into `train_count` training combos and the rest.
inline ComboSplit split_disjoint(const std::vector<RstCombo>& combos, int train_count, std::uint64_t seed) {
  if (train_count <= 0 || train_count >= static_cast<int>(combos.size())) {
    throw std::invalid_argument("split_disjoint: train_count must be in (0, " +
                                std::to_string(combos.size()) + ")");
  }
  std::vector<RstCombo> shuffled = combos;
  Rng rng = make_rng(seed, 0x5b1);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  ComboSplit split;
  split.train.assign(shuffled.begin(), shuffled.begin() + train_count);
  split.test.assign(shuffled.begin() + train_count, shuffled.end());
  return split;
}

/// Keeps only the band of each range that matches the combo's direction.
/// Both scale factors share the chosen band; translation moves along one axis.
inline DistortionSpec combo_to_spec(const RstCombo& combo,
                                    const DistortionRanges& ranges = DistortionRanges::generalization(),
                                    std::uint64_t seed = 0) {
  auto pick = [](const ExclusiveInterval& iv, bool upper) {
    const auto& b = iv.bands();
    return ExclusiveInterval({upper ? b.back() : b.front()});
  };
  DistortionSpec spec;
  spec.family = Family::kRST;
  spec.seed = seed;
  spec.intervals[kRotation] = pick(ranges.rotation, combo.rotation == RotationDir::kRight);
  spec.intervals[kScale1] = spec.intervals[kScale2] = pick(ranges.scale, combo.scale == ScaleDir::kUp);
  switch (combo.translation) {
    case TranslationDir::kRight: spec.intervals[kTranslate1] = pick(ranges.translation, true); break;
    case TranslationDir::kLeft: spec.intervals[kTranslate1] = pick(ranges.translation, false); break;
    case TranslationDir::kDown: spec.intervals[kTranslate2] = pick(ranges.translation, true); break;
    case TranslationDir::kUp: spec.intervals[kTranslate2] = pick(ranges.translation, false); break;
  }
  return spec;
}

/// Each image gets one combo chosen uniformly from `combos`, then a draw from
/// that combo's spec; seeded per image like make_distorted_dataset.
inline LabeledSet make_combo_dataset(const LabeledSet& canonical, const std::vector<RstCombo>& combos,
                                     std::uint64_t seed,
                                     const DistortionRanges& ranges = DistortionRanges::generalization()) {
  if (canonical.empty()) throw std::invalid_argument("make_combo_dataset: empty input set");
  if (combos.empty()) throw std::invalid_argument("make_combo_dataset: no combos");
  std::vector<DistortionSpec> specs;
  for (const RstCombo& c : combos) specs.push_back(combo_to_spec(c, ranges));
  LabeledSet out;
  out.labels = canonical.labels;
  for (std::size_t i = 0; i < canonical.size(); ++i) {
    Rng rng(derive_seed(seed, i));
    const std::size_t which = std::uniform_int_distribution<std::size_t>(0, specs.size() - 1)(rng);
    out.images.push_back(warp_image(canonical.images[i], sample_params(specs[which], rng)));
  }
  return out;
}

inline std::string describe(const ExclusiveInterval& iv) {
  std::string s;
  for (const Band& b : iv.bands()) {
    if (!s.empty()) s += " U ";
    s += "[" + std::to_string(b.lo) + "," + std::to_string(b.hi) + "]";
  }
  return s;
}

/// Sidecar manifest describing how a distorted set was generated.
inline io::KeyValues distortion_manifest(const DistortionSpec& spec, std::size_t count) {
  static constexpr const char* kNames[] = {"rotation", "scale1", "scale2", "shear1",
                                           "shear2", "translate1", "translate2"};
  io::KeyValues kv;
  kv["family"] = to_string(spec.family);
  kv["seed"] = std::to_string(spec.seed);
  kv["count"] = std::to_string(count);
  for (int i = 0; i < AffineParams::kSize; ++i) {
    kv[std::string("interval.") + kNames[i]] = spec.intervals[i] ? describe(*spec.intervals[i]) : "identity";
  }
  return kv;
}

}  // namespace rest
