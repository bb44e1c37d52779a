#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rcn/flow.hpp"

namespace rcn::data {

enum class Emotion { Negative = 0, Positive = 1, Surprise = 2 };
inline constexpr std::size_t kNumClasses = 3;

std::string_view to_string(Emotion e);
Emotion parse_emotion(std::string_view name);

struct SampleRecord {
  std::string sample_id;
  std::string subject;
  std::string domain;
  Emotion label = Emotion::Negative;
  // Either an onset/apex pair or a frame sequence. Paths are relative to the
  // manifest directory unless absolute.
  std::string onset_path;
  std::string apex_path;
  std::vector<std::string> frames;
  std::size_t onset_index = 0;
  std::optional<std::size_t> apex_index;
  std::string motion_mask_path;  // synthetic data only

  bool operator==(const SampleRecord&) const = default;
};

struct DomainProfile {
  std::string name;
  double brightness = 0;     // additive, intensity units
  double contrast = 1;       // multiplicative around mid-gray
  double noise_sigma = 0;    // per-frame Gaussian noise
  double blur_radius = 0;    // Gaussian sigma in pixels, 0 = none
  double jitter = 0;         // max global head motion between onset and apex, pixels
  std::size_t resolution = 160;

  void validate() const;
  bool operator==(const DomainProfile&) const = default;
};

/// Three pseudo-domains echoing the three constituent datasets.
std::vector<DomainProfile> default_domains();

/// Moves every profile toward a clean reference (scale 0) or away from it (> 1).
std::vector<DomainProfile> scale_domain_shift(std::vector<DomainProfile> domains, double scale);

struct Manifest {
  std::vector<SampleRecord> records;
  std::uint64_t seed = 0;
  std::vector<DomainProfile> domains;
  std::string base_dir;  // directory the manifest was loaded from

  void validate() const;
  std::vector<std::string> subjects() const;  // sorted, unique
  std::string resolve(const std::string& path) const;
};

inline constexpr int kManifestVersion = 1;

/// JSON-lines: a header line {"kind":"manifest",...} then one {"kind":"sample",...} per record.
Manifest load_manifest(const std::string& path);
void save_manifest(const Manifest& manifest, const std::string& path);

struct GeneratorConfig {
  std::size_t subjects = 12;
  std::size_t samples_per_subject = 9;
  std::vector<DomainProfile> domains = default_domains();
  std::uint64_t seed = 1;
  double min_amplitude = 1.0;  // class motion, pixels
  double max_amplitude = 3.0;
};

/// Writes onset/apex/mask graymaps and manifest.jsonl under out_dir.
Manifest generate_dataset(const GeneratorConfig& cfg, const std::string& out_dir);

/// In-memory synthesis of one sample (used by the generator and by tests).
struct SyntheticSample {
  flow::Frame onset;
  flow::Frame apex;
  flow::Plane motion_mask;  // 1 inside the true motion region
  flow::FlowField true_motion;
};

/// Stable 64-bit stream id for (seed, key).
std::uint64_t stream_id(std::uint64_t seed, std::string_view key);

flow::Plane subject_face(std::size_t resolution, std::uint64_t subject_stream);
SyntheticSample synthesize_sample(const flow::Plane& face, Emotion label, const DomainProfile& profile,
                                  double min_amplitude, double max_amplitude, std::uint64_t sample_stream);

}  // namespace rcn::data
