#include <doctest.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "rcn/dataset.hpp"
#include "rcn/error.hpp"
#include "rcn/flow_cache.hpp"
#include "rcn/image_io.hpp"

using namespace rcn;
using namespace rcn::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("rcn_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

GeneratorConfig small_config(std::size_t subjects, std::size_t domains) {
  GeneratorConfig g;
  g.subjects = subjects;
  g.samples_per_subject = 3;
  g.domains = default_domains();
  g.domains.resize(domains);
  for (auto& d : g.domains) d.resolution = 48;
  return g;
}

}  // namespace

TEST_CASE("graymap decoding") {
  const std::string pgm = "P5\n# comment\n2 1\n255\n";
  std::vector<std::uint8_t> bytes(pgm.begin(), pgm.end());
  bytes.push_back(128);
  bytes.push_back(255);
  const auto f = io::decode_pgm(bytes);
  CHECK(f.width == 2);
  CHECK(f(0, 0) == doctest::Approx(128.0 / 255));
  CHECK(f(1, 0) == 1.0);
  bytes.pop_back();
  CHECK_THROWS_AS(io::decode_pgm(bytes), DataError);
  std::vector<std::uint8_t> p2{'P', '2', '\n'};
  CHECK_THROWS_AS(io::decode_pgm(p2), DataError);
  flow::Plane p(3, 2, 0.25);
  CHECK(io::decode_pgm(io::encode_pgm(p)) == io::decode_pgm(io::encode_pgm(io::decode_pgm(io::encode_pgm(p)))));
}

TEST_CASE("flow map files") {
  flow::FlowMap m{60, 60, std::vector<float>(60 * 60 * 3)};
  std::mt19937_64 rng(1);
  std::normal_distribution<float> N(0, 2);
  for (auto& v : m.values) v = N(rng);
  const auto bytes = io::encode_flow_map(m);
  CHECK(io::decode_flow_map(bytes) == m);
  auto cut = bytes;
  cut.resize(cut.size() - 5);
  CHECK_THROWS_AS(io::decode_flow_map(cut), DataError);
  auto bad = bytes;
  bad[1] = 'X';
  CHECK_THROWS_AS(io::decode_flow_map(bad), DataError);
  auto nan = m;
  nan.values[7] = std::nanf("");
  CHECK_THROWS_AS(io::decode_flow_map(io::encode_flow_map(nan)), DataError);

  const auto dir = scratch("rcnf");
  io::write_flow_map((dir / "a.rcnf").string(), m);
  CHECK(io::read_flow_map((dir / "a.rcnf").string()) == m);
}

TEST_CASE("manifest validation and round trip") {
  Manifest m;
  m.seed = 7;
  m.domains = default_domains();
  SampleRecord r{"s1_a", "s1", "d0", Emotion::Surprise, "a.pgm", "b.pgm", {}, 0, std::nullopt, ""};
  m.records.push_back(r);
  SampleRecord q = r;
  q.sample_id = "s1_b";
  q.onset_path = q.apex_path = "";
  q.frames = {"f0.pgm", "f1.pgm", "f2.pgm"};
  q.apex_index = 2;
  m.records.push_back(q);
  const auto dir = scratch("manifest");
  save_manifest(m, (dir / "m.jsonl").string());
  const auto back = load_manifest((dir / "m.jsonl").string());
  CHECK(back.records == m.records);
  CHECK(back.domains == m.domains);
  CHECK(back.seed == 7);

  auto dup = m;
  dup.records[1].sample_id = "s1_a";
  CHECK_THROWS_AS(dup.validate(), DataError);
  auto cross = m;
  cross.records[1].domain = "d1";
  CHECK_THROWS_AS(cross.validate(), DataError);
  std::ofstream(dir / "bad.jsonl") << "{\"kind\":\"sample\",\"sample_id\":\"x\"}\n";
  CHECK_THROWS_AS(load_manifest((dir / "bad.jsonl").string()), DataError);
  CHECK(parse_emotion("positive") == Emotion::Positive);
  CHECK_THROWS_AS(parse_emotion("happy"), DataError);
}

TEST_CASE("generator counts and determinism") {
  auto g = small_config(6, 3);
  g.samples_per_subject = 9;
  const auto a = scratch("gen_a"), b = scratch("gen_b");
  const auto m = generate_dataset(g, a.string());
  generate_dataset(g, b.string());
  CHECK(m.records.size() == 54);
  std::size_t per[3] = {0, 0, 0};
  for (const auto& r : m.records) ++per[int(r.label)];
  CHECK(per[0] == 18);
  CHECK(per[1] == 18);
  CHECK(per[2] == 18);
  CHECK(m.subjects().size() == 6);
  for (const auto& r : m.records) {
    CHECK(slurp(a / r.apex_path) == slurp(b / r.apex_path));
    CHECK(slurp(a / r.onset_path) == slurp(b / r.onset_path));
  }
  CHECK(slurp(a / "manifest.jsonl") == slurp(b / "manifest.jsonl"));
  CHECK_THROWS_AS(generate_dataset(small_config(2, 3), scratch("gen_c").string()), UsageError);
}

TEST_CASE("clean samples only change inside the motion region") {
  DomainProfile clean{"clean", 0, 1, 0, 0, 0, 64};
  const auto face = subject_face(64, 3);
  for (auto label : {Emotion::Negative, Emotion::Positive, Emotion::Surprise}) {
    const auto s = synthesize_sample(face, label, clean, 2, 2, 99 + int(label));
    double outside = 0, inside = 0;
    for (std::size_t i = 0; i < s.onset.values.size(); ++i) {
      const double d = std::abs(s.onset.values[i] - s.apex.values[i]);
      (s.motion_mask.values[i] > 0.5 ? inside : outside) = std::max(s.motion_mask.values[i] > 0.5 ? inside : outside, d);
    }
    CHECK(inside > 0.01);
    CHECK(outside < 0.2 * inside);  // Gaussian tails below the mask threshold
  }
}

TEST_CASE("class motion directions differ") {
  DomainProfile clean{"clean", 0, 1, 0, 0, 0, 96};
  const auto face = subject_face(96, 4);
  auto mean_motion = [&](Emotion e) {
    const auto s = synthesize_sample(face, e, clean, 2, 2, 5);
    double mx = 0, my = 0, n = 0, spread = 0;
    for (std::size_t y = 0; y < 96; ++y)
      for (std::size_t x = 0; x < 96; ++x) {
        if (s.motion_mask(x, y) < 0.5) continue;
        mx += s.true_motion.vx(x, y);
        my += s.true_motion.vy(x, y);
        spread += (double(x) - 48) * s.true_motion.vx(x, y);
        ++n;
      }
    return std::array<double, 3>{mx / n, my / n, spread / n};
  };
  const auto pos = mean_motion(Emotion::Positive), sur = mean_motion(Emotion::Surprise),
             neg = mean_motion(Emotion::Negative);
  CHECK(pos[1] < -0.5);
  CHECK(sur[1] < -0.5);
  CHECK(neg[2] < -1.0);  // contracting: motion points toward the centre line
}

TEST_CASE("domains differ more than subjects within a domain") {
  auto hist = [](const flow::Plane& p) {
    std::vector<double> h(32, 0);
    for (double v : p.values) h[std::min<std::size_t>(31, std::size_t(v * 32))] += 1.0 / double(p.values.size());
    return h;
  };
  auto l1 = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s;
  };
  const auto doms = default_domains();
  std::vector<std::vector<std::vector<double>>> h(doms.size());
  for (std::size_t d = 0; d < doms.size(); ++d)
    for (std::uint64_t subj = 0; subj < 4; ++subj) {
      const auto face = subject_face(doms[d].resolution, stream_id(1, "s" + std::to_string(d * 10 + subj)));
      h[d].push_back(hist(synthesize_sample(face, Emotion::Positive, doms[d], 1, 3, subj).onset));
    }
  double intra = 0, inter = 0;
  std::size_t ni = 0, nx = 0;
  for (std::size_t d = 0; d < h.size(); ++d)
    for (std::size_t e = d; e < h.size(); ++e)
      for (std::size_t i = 0; i < h[d].size(); ++i)
        for (std::size_t j = 0; j < h[e].size(); ++j) {
          if (d == e && j <= i) continue;
          (d == e ? intra : inter) += l1(h[d][i], h[e][j]);
          ++(d == e ? ni : nx);
        }
  CHECK(inter / double(nx) >= 2 * intra / double(ni));
}

TEST_CASE("flow cache") {
  const auto dir = scratch("cache");
  const auto m = generate_dataset(small_config(3, 1), (dir / "data").string());
  flow::FlowSolverConfig cfg;
  cfg.pyramid_levels = 2;
  cfg.irls_iters = 2;
  cfg.jacobi_sweeps = 5;
  const std::size_t res[] = {20, 32};
  const auto cache = (dir / "cache").string();
  const auto first = precompute_flows(m, cfg, res, cache, 2);
  CHECK(first.entries.size() == 18);
  CHECK(first.recomputed == 18);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir / "cache" / "flows")) files += e.path().extension() == ".rcnf";
  CHECK(files == 18);

  const auto index_before = slurp(dir / "cache" / kFlowIndexName);
  const auto again = precompute_flows(m, cfg, res, cache, 1);
  CHECK(again.recomputed == 0);
  CHECK(slurp(dir / "cache" / kFlowIndexName) == index_before);
  CHECK(again.entries.size() == first.entries.size());

  const auto victim = fs::path(cache) / first.entries[4].path;
  const auto before = slurp(victim);
  fs::remove(victim);
  const auto third = precompute_flows(m, cfg, res, cache, 1);
  CHECK(third.recomputed == 1);
  CHECK(slurp(victim) == before);

  // asking for one resolution keeps the other in the index
  const std::size_t only[] = {20};
  const auto partial = precompute_flows(m, cfg, only, cache, 1);
  CHECK(partial.recomputed == 0);
  CHECK(partial.entries.size() == 18);
  CHECK(slurp(dir / "cache" / kFlowIndexName) == index_before);

  const auto set = load_flow_set(m, load_flow_index(cache), 32);
  CHECK(set.size() == 9);
  CHECK(set[0].map.height == 32);
}
