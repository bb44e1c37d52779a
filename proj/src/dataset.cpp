#include "rcn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>

#include <json.hpp>

#include "rcn/error.hpp"
#include "rcn/image_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace rcn::data {

std::string_view to_string(Emotion e) {
  switch (e) {
    case Emotion::Negative: return "negative";
    case Emotion::Positive: return "positive";
    case Emotion::Surprise: return "surprise";
  }
  return "negative";
}

Emotion parse_emotion(std::string_view name) {
  if (name == "negative") return Emotion::Negative;
  if (name == "positive") return Emotion::Positive;
  if (name == "surprise") return Emotion::Surprise;
  throw DataError("unknown emotion label '" + std::string(name) + "'");
}

void DomainProfile::validate() const {
  if (!(contrast > 0 && contrast <= 3) || std::abs(brightness) > 0.5 || !(noise_sigma >= 0 && noise_sigma <= 0.5) ||
      !(blur_radius >= 0 && blur_radius <= 8) || !(jitter >= 0 && jitter <= 10) || resolution < 16 ||
      resolution > 1024) {
    throw UsageError("domain profile '" + name + "' outside supported ranges");
  }
}

std::vector<DomainProfile> default_domains() {
  return {
      {"d0", -0.06, 0.85, 0.020, 1.0, 0.6, 160},
      {"d1", 0.00, 1.00, 0.010, 0.0, 0.3, 160},
      {"d2", 0.08, 1.20, 0.015, 2.0, 0.9, 160},
  };
}

std::vector<DomainProfile> scale_domain_shift(std::vector<DomainProfile> domains, double scale) {
  for (auto& d : domains) {
    d.brightness *= scale;
    d.contrast = 1.0 + (d.contrast - 1.0) * scale;
    d.noise_sigma *= scale;
    d.blur_radius *= scale;
    d.jitter *= scale;
  }
  return domains;
}

void Manifest::validate() const {
  std::set<std::string> ids;
  std::map<std::string, std::string> subject_domain;
  for (const auto& r : records) {
    if (r.sample_id.empty() || r.subject.empty()) throw DataError("manifest: empty sample_id or subject");
    if (!ids.insert(r.sample_id).second) throw DataError("manifest: duplicate sample_id '" + r.sample_id + "'");
    auto [it, fresh] = subject_domain.emplace(r.subject, r.domain);
    if (!fresh && it->second != r.domain) {
      throw DataError("manifest: subject '" + r.subject + "' appears in more than one domain");
    }
    const bool pair = !r.onset_path.empty() && !r.apex_path.empty();
    if (!pair && r.frames.size() < 2) {
      throw DataError("manifest: sample '" + r.sample_id + "' has neither an onset/apex pair nor a sequence");
    }
    if (!pair && (r.onset_index >= r.frames.size() || (r.apex_index && *r.apex_index >= r.frames.size()))) {
      throw DataError("manifest: sample '" + r.sample_id + "' frame index out of range");
    }
  }
}

std::vector<std::string> Manifest::subjects() const {
  std::set<std::string> s;
  for (const auto& r : records) s.insert(r.subject);
  return {s.begin(), s.end()};
}

std::string Manifest::resolve(const std::string& path) const {
  if (path.empty() || fs::path(path).is_absolute() || base_dir.empty()) return path;
  return (fs::path(base_dir) / path).string();
}

namespace {

json profile_json(const DomainProfile& d) {
  return {{"name", d.name},         {"brightness", d.brightness}, {"contrast", d.contrast},
          {"noise_sigma", d.noise_sigma}, {"blur_radius", d.blur_radius}, {"jitter", d.jitter},
          {"resolution", d.resolution}};
}

DomainProfile profile_from(const json& j) {
  DomainProfile d;
  d.name = j.at("name").get<std::string>();
  d.brightness = j.at("brightness").get<double>();
  d.contrast = j.at("contrast").get<double>();
  d.noise_sigma = j.at("noise_sigma").get<double>();
  d.blur_radius = j.at("blur_radius").get<double>();
  d.jitter = j.at("jitter").get<double>();
  d.resolution = j.at("resolution").get<std::size_t>();
  return d;
}

}  // namespace

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path);
  Manifest m;
  m.base_dir = fs::path(path).parent_path().string();
  std::string line;
  std::size_t lineno = 0;
  try {
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const json j = json::parse(line);
      const auto kind = j.value("kind", std::string("sample"));
      if (kind == "manifest") {
        if (j.value("version", kManifestVersion) != kManifestVersion) throw DataError("unsupported manifest version");
        m.seed = j.value("seed", std::uint64_t{0});
        for (const auto& d : j.value("domains", json::array())) m.domains.push_back(profile_from(d));
        continue;
      }
      if (kind != "sample") throw DataError("unknown record kind '" + kind + "'");
      SampleRecord r;
      r.sample_id = j.at("sample_id").get<std::string>();
      r.subject = j.at("subject").get<std::string>();
      r.domain = j.value("domain", std::string{});
      r.label = parse_emotion(j.at("label").get<std::string>());
      r.onset_path = j.value("onset", std::string{});
      r.apex_path = j.value("apex", std::string{});
      r.frames = j.value("frames", std::vector<std::string>{});
      r.onset_index = j.value("onset_index", std::size_t{0});
      if (j.contains("apex_index")) r.apex_index = j.at("apex_index").get<std::size_t>();
      r.motion_mask_path = j.value("motion_mask", std::string{});
      m.records.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
  }
  m.validate();
  return m;
}

void save_manifest(const Manifest& manifest, const std::string& path) {
  manifest.validate();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest " + path);
  json header{{"kind", "manifest"}, {"version", kManifestVersion}, {"seed", manifest.seed}};
  header["domains"] = json::array();
  for (const auto& d : manifest.domains) header["domains"].push_back(profile_json(d));
  out << header.dump() << '\n';
  for (const auto& r : manifest.records) {
    json j{{"kind", "sample"},   {"sample_id", r.sample_id}, {"subject", r.subject},
           {"domain", r.domain}, {"label", to_string(r.label)}};
    if (!r.onset_path.empty()) j["onset"] = r.onset_path;
    if (!r.apex_path.empty()) j["apex"] = r.apex_path;
    if (!r.frames.empty()) {
      j["frames"] = r.frames;
      j["onset_index"] = r.onset_index;
    }
    if (r.apex_index) j["apex_index"] = *r.apex_index;
    if (!r.motion_mask_path.empty()) j["motion_mask"] = r.motion_mask_path;
    out << j.dump() << '\n';
  }
  if (!out) throw DataError("write failed for " + path);
}

// ---- synthesis -------------------------------------------------------------

std::uint64_t stream_id(std::uint64_t seed, std::string_view key) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : key) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull + h;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

namespace {

using flow::Plane;
using Engine = std::mt19937_64;

double gauss2(double dx, double dy, double sx, double sy) {
  return std::exp(-0.5 * (dx * dx / (sx * sx) + dy * dy / (sy * sy)));
}

Plane gaussian_blur(const Plane& src, double sigma) {
  if (sigma <= 0) return src;
  const long r = long(std::ceil(3 * sigma));
  std::vector<double> k(std::size_t(2 * r + 1));
  double total = 0;
  for (long i = -r; i <= r; ++i) total += k[std::size_t(i + r)] = std::exp(-0.5 * double(i * i) / (sigma * sigma));
  for (auto& v : k) v /= total;
  Plane tmp(src.width, src.height), out(src.width, src.height);
  for (std::size_t y = 0; y < src.height; ++y)
    for (std::size_t x = 0; x < src.width; ++x) {
      double acc = 0;
      for (long i = -r; i <= r; ++i) acc += k[std::size_t(i + r)] * src.clamped(long(x) + i, long(y));
      tmp(x, y) = acc;
    }
  for (std::size_t y = 0; y < src.height; ++y)
    for (std::size_t x = 0; x < src.width; ++x) {
      double acc = 0;
      for (long i = -r; i <= r; ++i) acc += k[std::size_t(i + r)] * tmp.clamped(long(x), long(y) + i);
      out(x, y) = acc;
    }
  return out;
}

struct Bump {
  double cx, cy, sx, sy;  // normalized coordinates
  double dx, dy;          // displacement direction, scaled by amplitude
};

std::vector<Bump> class_bumps(Emotion label, double amp, double jx, double jy) {
  switch (label) {
    case Emotion::Positive:  // mouth region lifts
      return {{0.5 + jx, 0.72 + jy, 0.08, 0.06, 0.0, -amp}};
    case Emotion::Surprise:  // brow band rises
      return {{0.5 + jx, 0.30 + jy, 0.20, 0.05, 0.0, -amp}};
    case Emotion::Negative:  // brows draw together
      return {{0.36 + jx, 0.30 + jy, 0.07, 0.05, amp, 0.3 * amp},
              {0.64 + jx, 0.30 + jy, 0.07, 0.05, -amp, 0.3 * amp}};
  }
  return {};
}

}  // namespace

Plane subject_face(std::size_t resolution, std::uint64_t subject_stream) {
  Engine rng(subject_stream);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  const double S = double(resolution);
  struct Blob {
    double cx, cy, s, a;
  };
  struct Wave {
    double fx, fy, phase, a;
  };
  std::vector<Blob> blobs(24);
  for (auto& b : blobs) b = {U(rng), U(rng), 0.03 + 0.09 * U(rng), -0.15 + 0.3 * U(rng)};
  std::vector<Wave> waves(12);
  for (auto& w : waves) {
    const double f = 4.0 + 10.0 * U(rng), th = 2 * std::numbers::pi * U(rng);
    w = {f * std::cos(th), f * std::sin(th), 2 * std::numbers::pi * U(rng), 0.02 + 0.04 * U(rng)};
  }
  const Blob features[] = {{0.35, 0.40, 0.05, -0.20}, {0.65, 0.40, 0.05, -0.20}, {0.50, 0.76, 0.06, -0.15},
                           {0.50, 0.56, 0.04, 0.08}};
  Plane face(resolution, resolution);
  for (std::size_t y = 0; y < resolution; ++y) {
    for (std::size_t x = 0; x < resolution; ++x) {
      const double u = (double(x) + 0.5) / S, v = (double(y) + 0.5) / S;
      double val = 0.5;
      for (const auto& b : blobs) val += b.a * gauss2(u - b.cx, v - b.cy, b.s, b.s);
      for (const auto& b : features) val += b.a * gauss2(u - b.cx, v - b.cy, b.s, b.s);
      for (const auto& w : waves) val += w.a * std::sin(2 * std::numbers::pi * (w.fx * u + w.fy * v) + w.phase);
      const double oval = ((u - 0.5) * (u - 0.5)) / 0.16 + ((v - 0.5) * (v - 0.5)) / 0.22;
      if (oval > 1) val -= 0.1 * std::min(1.0, oval - 1);
      face(x, y) = std::clamp(val, 0.05, 0.95);
    }
  }
  return face;
}

SyntheticSample synthesize_sample(const Plane& face, Emotion label, const DomainProfile& profile,
                                  double min_amplitude, double max_amplitude, std::uint64_t sample_stream) {
  Engine rng(sample_stream);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::normal_distribution<double> N01(0.0, 1.0);
  const std::size_t res = profile.resolution;
  const double S = double(res);
  const Plane base = face.width == res ? face : flow::resize(face, res, res);

  const double amp = min_amplitude + (max_amplitude - min_amplitude) * U(rng);
  const double jx = 0.06 * (U(rng) - 0.5), jy = 0.06 * (U(rng) - 0.5);
  const auto bumps = class_bumps(label, amp, jx, jy);
  const double r = profile.jitter * std::sqrt(U(rng)), th = 2 * std::numbers::pi * U(rng);
  const double gx = r * std::cos(th), gy = r * std::sin(th);

  SyntheticSample s{Plane(res, res), Plane(res, res), Plane(res, res),
                    {Plane(res, res), Plane(res, res)}};
  for (std::size_t y = 0; y < res; ++y) {
    for (std::size_t x = 0; x < res; ++x) {
      const double u = (double(x) + 0.5) / S, v = (double(y) + 0.5) / S;
      double dx = gx, dy = gy, peak = 0;
      for (const auto& b : bumps) {
        const double g = gauss2(u - b.cx, v - b.cy, b.sx, b.sy);
        dx += b.dx * g;
        dy += b.dy * g;
        peak = std::max(peak, g);
      }
      s.true_motion.vx(x, y) = dx;
      s.true_motion.vy(x, y) = dy;
      s.motion_mask(x, y) = peak >= 0.1 ? 1.0 : 0.0;
    }
  }
  // Content moves by the displacement: apex(x) = onset(x - d(x)).
  Plane moved(res, res);
  for (std::size_t y = 0; y < res; ++y)
    for (std::size_t x = 0; x < res; ++x)
      moved(x, y) = base.sample(double(x) - s.true_motion.vx(x, y), double(y) - s.true_motion.vy(x, y));

  auto render = [&](const Plane& src) {
    Plane out = gaussian_blur(src, profile.blur_radius);
    for (auto& val : out.values) {
      val = 0.5 + profile.contrast * (val - 0.5) + profile.brightness;
      if (profile.noise_sigma > 0) val += profile.noise_sigma * N01(rng);
      val = std::clamp(val, 0.0, 1.0);
    }
    return out;
  };
  s.onset = render(base);
  s.apex = render(moved);
  return s;
}

Manifest generate_dataset(const GeneratorConfig& cfg, const std::string& out_dir) {
  if (cfg.domains.empty() || cfg.subjects < cfg.domains.size()) {
    throw UsageError("generate_dataset: need subjects >= domains >= 1");
  }
  if (cfg.samples_per_subject == 0) throw UsageError("generate_dataset: need at least one sample per subject");
  for (const auto& d : cfg.domains) d.validate();
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "frames", ec);
  if (ec) throw DataError("cannot create output directory " + out_dir + ": " + ec.message());

  Manifest m;
  m.seed = cfg.seed;
  m.domains = cfg.domains;
  m.base_dir = out_dir;
  char buf[32];
  for (std::size_t s = 0; s < cfg.subjects; ++s) {
    std::snprintf(buf, sizeof buf, "s%02zu", s + 1);
    const std::string subject = buf;
    const DomainProfile& profile = cfg.domains[s % cfg.domains.size()];
    const Plane face = subject_face(profile.resolution, stream_id(cfg.seed, subject));
    for (std::size_t k = 0; k < cfg.samples_per_subject; ++k) {
      std::snprintf(buf, sizeof buf, "_e%02zu", k + 1);
      SampleRecord r;
      r.sample_id = subject + buf;
      r.subject = subject;
      r.domain = profile.name;
      r.label = Emotion(k % kNumClasses);
      const auto sample = synthesize_sample(face, r.label, profile, cfg.min_amplitude, cfg.max_amplitude,
                                            stream_id(cfg.seed, r.sample_id));
      r.onset_path = "frames/" + r.sample_id + "_onset.pgm";
      r.apex_path = "frames/" + r.sample_id + "_apex.pgm";
      r.motion_mask_path = "frames/" + r.sample_id + "_mask.pgm";
      io::write_frame(m.resolve(r.onset_path), sample.onset);
      io::write_frame(m.resolve(r.apex_path), sample.apex);
      io::write_frame(m.resolve(r.motion_mask_path), sample.motion_mask);
      m.records.push_back(std::move(r));
    }
  }
  save_manifest(m, (fs::path(out_dir) / "manifest.jsonl").string());
  return m;
}

}  // namespace rcn::data
