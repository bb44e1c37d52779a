// Acceptance run: one PASS/FAIL line per criterion.
//   acceptance [criteria...] [--work DIR] [--known-fail ID...]
#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "flow_fixtures.hpp"
#include "helpers.hpp"
#include "rcn/checkpoint.hpp"
#include "rcn/eval.hpp"
#include "rcn/image_io.hpp"
#include "rcn/search.hpp"

using namespace rcn;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

fs::path g_work;
int g_failed = 0;
std::set<int> g_failed_ids;

double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

void verdict(int id, bool pass, const std::string& detail) {
  if (!pass) {
    ++g_failed;
    g_failed_ids.insert(id);
  }
  std::printf("[%s] C%d %s\n", pass ? "PASS" : "FAIL", id, detail.c_str());
  std::fflush(stdout);
}

void note(const std::string& text) {
  std::printf("  .. %s\n", text.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Desk-scale solver settings. The library defaults (lr 1e-4, up to 500
// epochs) are far beyond a single-core budget for the multi-seed criteria.
TrainConfig desk_config(std::uint64_t seed) {
  TrainConfig c;
  c.learning_rate = 0.01;
  c.max_epochs = 40;
  c.loss_stop = 0.3;
  c.seed = seed;
  return c;
}

constexpr std::size_t kSeeds = 5;
std::uint64_t run_seed(std::size_t i) { return 1 + 1000 * i; }

// Default composite dataset with flows at the given resolutions, built once.
const data::Manifest& composite(std::span<const std::size_t> resolutions, data::FlowCacheIndex& index) {
  static data::Manifest manifest;
  static bool ready = false;
  const fs::path dir = g_work / "composite";
  if (!ready) {
    data::GeneratorConfig cfg;  // 12 subjects, 3 domains, 9 samples each
    cfg.seed = 1;
    manifest = data::generate_dataset(cfg, dir.string());
    ready = true;
  }
  index = data::precompute_flows(manifest, {}, resolutions, (dir / "flows").string(), 1);
  return manifest;
}

// ---------------------------------------------------------------- C1
void gradient_suite() {
  const auto t0 = Clock::now();
  std::string cmd = std::string(RCN_ACC_GRAD) + " 20 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return verdict(1, false, "cannot launch " + std::string(RCN_ACC_GRAD));
  std::string out;
  char buf[512];
  while (std::fgets(buf, sizeof buf, p)) out += buf;
  const int status = pclose(p);
  const double secs = since(t0);
  std::istringstream lines(out);
  std::string line, summary;
  while (std::getline(lines, line)) {
    if (line.rfind("grad suite:", 0) == 0) summary = line.substr(12);
    else note(line);
  }
  const bool ok = WIFEXITED(status) && WEXITSTATUS(status) == 0 && !summary.empty();
  verdict(1, ok && secs < 300, summary + fmt(" [limit 1e-5, wall %.0f s / 300 s]", secs));
}

// ---------------------------------------------------------------- C2
void oracle_suite() {
  std::mt19937_64 rng(2024);
  // first layer, dilated streams, recurrent feed-forward and recurrent kernels
  const struct { std::size_t k; ConvSpec spec; } combos[] = {
      {3, {3, 1, 1}}, {3, {3, 2, 2}}, {3, {3, 3, 3}}, {1, {1, 0, 1}}, {3, {1, 1, 1}}};
  std::uniform_int_distribution<std::size_t> small(1, 4), side(4, 12);
  std::size_t cases = 0, exact = 0;
  while (cases < 200) {
    const auto& c = combos[cases % std::size(combos)];
    const std::size_t n = small(rng), ci = small(rng), co = small(rng), h = side(rng), w = side(rng);
    auto x = testutil::random_tensor({n, ci, h, w}, rng);
    auto wt = testutil::random_tensor({co, ci, c.k, c.k}, rng);
    auto b = testutil::random_tensor({co}, rng);
    const auto got = conv2d(x, wt, b, c.spec);
    const auto want = testutil::naive_conv(x, wt, b, c.spec);
    bool same = got.numel() == want.size();
    for (std::size_t i = 0; same && i < want.size(); ++i) same = got[i] == want[i];
    exact += same;
    ++cases;
  }
  ConfusionMatrix cm(3);
  const std::size_t v[] = {8, 1, 1, 1, 3, 1, 0, 1, 4};
  std::copy(std::begin(v), std::end(v), cm.counts.begin());
  const double uar = compute_uar(cm), uf1 = compute_uf1(cm);
  // The quoted 0.7333 and 0.7231 are rounded; compare against the exact fractions.
  const double uar_exact = (0.8 + 0.6 + 0.8) / 3, uf1_exact = (16.0 / 19 + 0.6 + 8.0 / 11) / 3;
  verdict(2, exact == cases && std::abs(uar - uar_exact) < 1e-6 && std::abs(uf1 - uf1_exact) < 1e-6,
          fmt("conv2d exact on %zu/%zu cases; UAR %.6f (0.7333), UF1 %.6f (0.7231) [tol 1e-6]", exact, cases, uar, uf1));
}

// ---------------------------------------------------------------- C3
void parameter_invariance() {
  const ModelKind kinds[] = {ModelKind::Rcn,  ModelKind::RcnW, ModelKind::RcnS, ModelKind::RcnA,
                             ModelKind::RcnC, ModelKind::RcnF, ModelKind::RcnP};
  const std::size_t settings[][3] = {{16, 5, 3}, {32, 3, 3}, {64, 7, 3}, {8, 1, 5}, {12, 4, 2}};
  bool ok = true;
  std::string detail;
  for (const auto& s : settings) {
    std::set<std::size_t> counts;
    for (auto k : kinds) counts.insert(build_named(k, s[0], s[1], s[2], 60, 1).parameter_count());
    ok = ok && counts.size() == 1;
    detail += fmt("M=%zu K=%zu C=%zu: %zu; ", s[0], s[1], s[2], *counts.begin());
    if (counts.size() != 1) detail += "(mismatch) ";
  }
  verdict(3, ok, detail + "7 variants each, exact equality");
}

// ---------------------------------------------------------------- C4
void flow_suite() {
  using testutil::texture;
  const auto t0 = Clock::now();
  double worst_epe = 0;
  for (double d : {1.0, 1.5, 2.0, 2.5, 3.0}) {
    for (int dir = 0; dir < 3; ++dir) {
      const double dx = dir == 1 ? 0 : d, dy = dir == 0 ? 0 : (dir == 1 ? d : -d / 2);
      const auto a = texture(64, 0, 0, 40 + dir), b = texture(64, dx, dy, 40 + dir);
      worst_epe = std::max(worst_epe, testutil::mean_epe(flow::estimate_flow(a, b), dx, dy, 8));
    }
  }
  double zero = 0;
  for (std::uint64_t s = 1; s <= 3; ++s) {
    const auto a = texture(64, 0, 0, s);
    const auto f = flow::estimate_flow(a, a);
    for (std::size_t i = 0; i < f.vx.values.size(); ++i)
      zero = std::max({zero, std::abs(f.vx.values[i]), std::abs(f.vy.values[i])});
  }
  // uniform strain: affine fields have constant derivatives
  double strain_err = 0;
  const struct { double a, b, c, d, want; } fields[] = {
      {0, 0, 0, 0, 0}, {1, 0, 0, 0, 1}, {0, 0, 1, 0, std::sqrt(0.5)}, {0.3, 0, 0, -0.4, 0.5},
      {0.2, 0.1, 0.1, 0.2, 0.3}};
  for (const auto& f : fields) {
    flow::FlowField ff{flow::Plane(32, 32), flow::Plane(32, 32)};
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) {
        ff.vx(x, y) = 2.5 + f.a * double(x) + f.b * double(y);
        ff.vy(x, y) = -1 + f.c * double(x) + f.d * double(y);
      }
    for (double v : flow::optical_strain(ff).values) strain_err = std::max(strain_err, std::abs(v - f.want));
  }
  const double secs = since(t0);
  verdict(4, worst_epe < 0.2 && zero < 1e-6 && strain_err < 1e-6 && secs < 120,
          fmt("worst mean EPE %.4f px over 1-3 px shifts (< 0.2); zero-motion max %.2e, uniform strain max err %.2e "
              "(< 1e-6); %.1f s (< 120 s)",
              worst_epe, zero, strain_err, secs));
}

// ---------------------------------------------------------------- C5, C6
struct Runs {
  std::map<std::string, std::vector<double>> uar;  // name -> per-seed UAR
};

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()); }

std::string list(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += fmt("%s%.3f", s.empty() ? "" : " ", x);
  return s;
}

double loso_uar(const std::vector<data::FlowSample>& set, ModelKind kind, std::size_t R, std::uint64_t seed,
                const std::string& name) {
  const auto t0 = Clock::now();
  const auto desc = named_descriptor(kind, 16, 5, 3, R);
  const auto rep = run_loso(set, desc, desk_config(seed));
  write_report(rep, (g_work / (name + "_seed" + std::to_string(seed) + ".jsonl")).string());
  std::size_t epochs = 0;
  for (const auto& f : rep.folds) epochs += f.epochs;
  note(fmt("%s seed %llu: UAR %.4f UF1 %.4f (%zu epochs over %zu folds, %.0f s)", name.c_str(),
           (unsigned long long)seed, rep.uar, rep.uf1, epochs, rep.folds.size(), since(t0)));
  return rep.uar;
}

Runs g_runs;

void trend() {
  const auto t0 = Clock::now();
  data::FlowCacheIndex index;
  const std::size_t res[] = {60, 250};
  const auto& m = composite(res, index);
  const auto small = data::load_flow_set(m, index, 60);
  const auto large = data::load_flow_set(m, index, 250);
  note(fmt("composite set: %zu samples, %zu subjects, flows ready after %.0f s", m.records.size(), m.subjects().size(),
           since(t0)));
  auto& a = g_runs.uar["model2@60"];
  auto& b = g_runs.uar["model4@250"];
  a.clear();
  b.clear();
  std::size_t wins = 0;
  for (std::size_t i = 0; i < kSeeds; ++i) {
    a.push_back(loso_uar(small, ModelKind::Model2, 60, run_seed(i), "model2_R60"));
    b.push_back(loso_uar(large, ModelKind::Model4, 250, run_seed(i), "model4_R250"));
    wins += a.back() > b.back();
  }
  const double secs = since(t0);
  verdict(5, mean(a) > mean(b) && wins >= 4 && secs < 7200,
          fmt("mean UAR model2@60 %.4f [%s] vs model4@250 %.4f [%s]; positive gap in %zu/5 seeds (>= 4); %.0f s (< 7200)",
              mean(a), list(a).c_str(), mean(b), list(b).c_str(), wins, secs));
}

void module_benefit() {
  data::FlowCacheIndex index;
  const std::size_t res[] = {60};
  const auto& m = composite(res, index);
  const auto set = data::load_flow_set(m, index, 60);
  // Model 2 is the basic RCN; reuse its runs when criterion 5 already made them.
  auto& base = g_runs.uar["model2@60"];
  if (base.size() != kSeeds) {
    base.clear();
    for (std::size_t i = 0; i < kSeeds; ++i) base.push_back(loso_uar(set, ModelKind::Rcn, 60, run_seed(i), "model2_R60"));
  }
  const std::pair<ModelKind, const char*> variants[] = {
      {ModelKind::RcnA, "rcn-a"}, {ModelKind::RcnS, "rcn-s"}, {ModelKind::RcnW, "rcn-w"}};
  std::size_t better = 0;
  std::string detail = fmt("rcn %.4f [%s]", mean(base), list(base).c_str());
  for (const auto& [kind, name] : variants) {
    std::vector<double> u;
    for (std::size_t i = 0; i < kSeeds; ++i) u.push_back(loso_uar(set, kind, 60, run_seed(i), std::string(name) + "_R60"));
    better += mean(u) > mean(base);
    detail += fmt("; %s %.4f [%s]", name, mean(u), list(u).c_str());
  }
  verdict(6, better >= 2, detail + fmt("; %zu/3 above rcn (>= 2)", better));
}

// ---------------------------------------------------------------- C7
void search_sanity() {
  const SearchSpace space;
  std::size_t wins = 0;
  double worst_sum = 0;
  std::string detail;
  for (std::size_t i = 0; i < kSeeds; ++i) {
    const auto t0 = Clock::now();
    SearchConfig cfg;
    cfg.seed = run_seed(i);
    cfg.epochs = 20;
    cfg.resolution = 30;
    cfg.feature_maps = 8;
    cfg.pool_size = 3;
    const auto samples = attention_favoring_set(10, 9, cfg.resolution, cfg.seed);
    const auto result = search(samples, space, cfg);
    write_search_report(result, space, cfg, (g_work / ("search_seed" + std::to_string(cfg.seed) + ".jsonl")).string());
    for (const auto& e : result.epochs)
      for (const auto& node : e.coefficients)
        worst_sum = std::max(worst_sum, std::abs(std::accumulate(node.begin(), node.end(), 0.0) - 1));
    const auto& att = result.epochs.back().coefficients.back();
    const std::size_t best = std::size_t(std::max_element(att.begin(), att.end()) - att.begin());
    const bool win = space.attention[best] != AttentionPlacement::None;
    wins += win;
    const auto none_at = std::size_t(std::find(space.attention.begin(), space.attention.end(), AttentionPlacement::None) -
                                     space.attention.begin());
    note(fmt("search seed %llu: top placement %s (%.3f) vs none %.3f; top-1 %s (%.0f s)", (unsigned long long)cfg.seed,
             std::string(to_string(space.attention[best])).c_str(), att[best], att[none_at],
             result.ranking.front().descriptor.to_string().c_str(), since(t0)));
    detail += win ? "+" : "-";
  }
  verdict(7, wins >= 4 && worst_sum < 1e-6,
          fmt("attention placement above none in %zu/5 seeds (>= 4) [%s]; max |sum - 1| %.2e (< 1e-6)", wins,
              detail.c_str(), worst_sum));
}

// ---------------------------------------------------------------- C8
void cam_localization() {
  const fs::path dir = g_work / "clean";
  data::GeneratorConfig cfg;
  cfg.seed = 8;
  for (auto& d : cfg.domains) d.noise_sigma = d.jitter = 0;
  const auto m = data::generate_dataset(cfg, dir.string());
  const std::size_t R = 60;
  const std::size_t res[] = {R};
  const auto index = data::precompute_flows(m, {}, res, (dir / "flows").string(), 1);
  const auto set = data::load_flow_set(m, index, R);
  const auto subjects = m.subjects();
  const std::set<std::string> held(subjects.end() - 3, subjects.end());
  std::vector<const data::FlowSample*> train;
  for (const auto& s : set)
    if (!held.count(s.subject)) train.push_back(&s);
  auto trained = train_single(train, named_descriptor(ModelKind::Rcn, 16, 5, 3, R), desk_config(8));
  double total = 0;
  std::size_t n = 0, correct = 0;
  std::map<std::string, std::string> masks;
  for (const auto& r : m.records) masks[r.sample_id] = m.resolve(r.motion_mask_path);
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (!held.count(set[i].subject)) continue;
    const auto mask = io::read_frame(masks.at(set[i].sample_id));
    flow::Plane cam;
    const int pred = compute_cam(trained.model, set[i], mask.width, mask.height, cam);
    correct += pred == set[i].label;
    total += top_decile_hit_rate(cam, mask);
    ++n;
    if (n <= 3) export_cam(trained.model, set[i], (g_work / ("cam_" + set[i].sample_id + ".pgm")).string());
  }
  const double rate = total / double(n);
  verdict(8, rate >= 0.5,
          fmt("top-decile CAM pixels inside the motion region: %.3f (>= 0.5) over %zu held-out samples "
              "(held-out accuracy %zu/%zu)",
              rate, n, correct, n));
}

// ---------------------------------------------------------------- C9
std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void determinism_and_leakage() {
  data::FlowCacheIndex index;
  const std::size_t res[] = {60};
  const auto& m = composite(res, index);
  auto set = data::load_flow_set(m, index, 60);
  // five subjects keep this quick
  const auto subjects = m.subjects();
  const std::set<std::string> keep(subjects.begin(), subjects.begin() + 5);
  std::erase_if(set, [&](const data::FlowSample& s) { return !keep.count(s.subject); });
  const auto desc = named_descriptor(ModelKind::RcnA, 16, 5, 3, 60);
  auto cfg = desk_config(9);
  cfg.max_epochs = 6;

  std::vector<const data::FlowSample*> all;
  for (const auto& s : set) all.push_back(&s);
  const auto c1 = serialize_checkpoint(train_single(all, desc, cfg).model);
  const auto c2 = serialize_checkpoint(train_single(all, desc, cfg).model);
  const bool ckpt = c1 == c2;

  write_report(run_loso(set, desc, cfg), (g_work / "det_a.jsonl").string(), false);
  write_report(run_loso(set, desc, cfg), (g_work / "det_b.jsonl").string(), false);
  write_report(run_loso(set, desc, cfg, {2, {}}), (g_work / "det_par.jsonl").string(), false);
  const auto ra = slurp(g_work / "det_a.jsonl");
  const bool report = ra == slurp(g_work / "det_b.jsonl") && ra == slurp(g_work / "det_par.jsonl");
  const auto back = read_report((g_work / "det_a.jsonl").string());
  const bool metrics = std::abs(compute_uar(back.global, true) - back.uar) <= 1e-12 &&
                       std::abs(compute_uf1(back.global) - back.uf1) <= 1e-12;

  // Fold 0 holds out the first subject; scrambling its maps must not change the fold model.
  const auto held = fold_subjects(set).front();
  const auto before = serialize_checkpoint(train_fold(set, desc, cfg, 0).model);
  auto perturbed = set;
  std::mt19937_64 g(9);
  std::normal_distribution<float> noise(0, 5);
  for (auto& s : perturbed)
    if (s.subject == held) {
      for (auto& v : s.map.values) v = noise(g);
      s.label = (s.label + 1) % 3;
    }
  const bool leak = serialize_checkpoint(train_fold(perturbed, desc, cfg, 0).model) == before;
  verdict(9, ckpt && report && metrics && leak,
          fmt("checkpoints identical: %s; reports identical (rerun and 2 workers): %s; metrics recomputed to 1e-12: %s; "
              "held-out perturbation leaves fold checkpoint identical: %s",
              ckpt ? "yes" : "no", report ? "yes" : "no", metrics ? "yes" : "no", leak ? "yes" : "no"));
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::string work = "acceptance_work";
  app.add_option("criteria", only, "Subset of criteria to run (default: all)")->check(CLI::Range(1, 9));
  app.add_option("--work", work, "Scratch directory");
  std::vector<int> known;
  app.add_option("--known-fail", known, "Criteria whose failure is documented; still reported, not fatal")
      ->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);
  g_work = fs::absolute(work);
  fs::create_directories(g_work);

  const auto want = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  const std::pair<int, void (*)()> criteria[] = {
      {1, gradient_suite}, {2, oracle_suite}, {3, parameter_invariance}, {4, flow_suite}, {5, trend},
      {6, module_benefit}, {7, search_sanity}, {8, cam_localization}, {9, determinism_and_leakage}};
  const auto t0 = Clock::now();
  for (const auto& [id, fn] : criteria) {
    if (!want(id)) continue;
    try {
      fn();
    } catch (const std::exception& e) {
      verdict(id, false, std::string("threw: ") + e.what());
    }
  }
  std::printf("acceptance: %d failed, %.0f s\n", g_failed, since(t0));
  int unexpected = 0;
  for (int id : g_failed_ids) {
    if (std::find(known.begin(), known.end(), id) != known.end()) {
      std::printf("acceptance: C%d failure is a known, documented result\n", id);
    } else {
      ++unexpected;
    }
  }
  return unexpected == 0 ? 0 : 1;
}
