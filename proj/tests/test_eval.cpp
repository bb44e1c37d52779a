#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "rcn/checkpoint.hpp"
#include "rcn/error.hpp"
#include "rcn/eval.hpp"
#include "rcn/image_io.hpp"

using namespace rcn;
namespace fs = std::filesystem;

namespace {

ConfusionMatrix from_rows(std::vector<std::vector<std::size_t>> rows) {
  ConfusionMatrix cm(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows.size(); ++j) cm.at(i, j) = rows[i][j];
  return cm;
}

// Class-coded blobs: an easy, subject-tagged toy set.
std::vector<data::FlowSample> toy_set(std::size_t subjects, std::size_t per_subject, std::size_t R,
                                      std::uint64_t seed, double noise = 0.2) {
  std::vector<data::FlowSample> out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N(0, noise);
  for (std::size_t s = 0; s < subjects; ++s)
    for (std::size_t k = 0; k < per_subject; ++k) {
      data::FlowSample smp;
      smp.subject = "t" + std::to_string(s);
      smp.sample_id = smp.subject + "_" + std::to_string(k);
      smp.domain = s % 2 ? "odd" : "even";
      smp.label = int(k % 3);
      smp.map = {R, R, std::vector<float>(R * R * 3)};
      for (std::size_t y = 0; y < R; ++y)
        for (std::size_t x = 0; x < R; ++x) {
          const bool in = (smp.label == 0 && x < R / 3) || (smp.label == 1 && x >= 2 * R / 3) ||
                          (smp.label == 2 && y < R / 3);
          smp.map.at(y, x, 0) = float((in ? 1.0 : 0.0) + N(rng));
          smp.map.at(y, x, 1) = float(N(rng));
          smp.map.at(y, x, 2) = float(in ? 0.5 : 0.0);
        }
      out.push_back(std::move(smp));
    }
  return out;
}

TrainConfig quick(std::size_t epochs) {
  TrainConfig c;
  c.learning_rate = 0.02;
  c.max_epochs = epochs;
  c.dropout = 0.2;
  c.batch_size = 8;
  return c;
}

}  // namespace

TEST_CASE("UAR and UF1") {
  const auto cm = from_rows({{8, 1, 1}, {1, 3, 1}, {0, 1, 4}});
  CHECK(compute_uar(cm) == doctest::Approx((0.8 + 0.6 + 0.8) / 3).epsilon(1e-12));
  CHECK(std::abs(compute_uar(cm) - 0.7333) < 1e-4);
  const auto f1 = per_class_f1(cm);
  CHECK(std::abs(f1[0] - 0.8421) < 1e-4);
  CHECK(std::abs(f1[1] - 0.6000) < 1e-4);
  CHECK(std::abs(f1[2] - 0.7273) < 1e-4);
  CHECK(std::abs(compute_uf1(cm) - 0.7231) < 1e-4);

  const auto diag = from_rows({{3, 0, 0}, {0, 5, 0}, {0, 0, 2}});
  CHECK(compute_uar(diag) == 1.0);
  CHECK(compute_uf1(diag) == 1.0);
  const auto flat = from_rows({{4, 0, 0}, {4, 0, 0}, {4, 0, 0}});
  CHECK(compute_uar(flat) == doctest::Approx(1.0 / 3));
  std::vector<std::string> warnings;
  const auto f = per_class_f1(flat, &warnings);
  CHECK(f[1] == 0);
  CHECK(f[2] == 0);
  CHECK(warnings.size() == 2);

  const auto empty = from_rows({{3, 0, 0}, {0, 0, 0}, {1, 0, 2}});
  CHECK_THROWS_AS(compute_uar(empty), DataError);
  CHECK(compute_uar(empty, true) == doctest::Approx((1.0 + 2.0 / 3) / 2));
}

TEST_CASE("training stops on schedule") {
  const auto set = toy_set(2, 6, 20, 1);
  std::vector<const data::FlowSample*> ptrs;
  for (const auto& s : set) ptrs.push_back(&s);
  auto cfg = quick(3);
  cfg.loss_stop = INFINITY;
  auto desc = named_descriptor(ModelKind::Rcn, 6, 3, 3, 20);
  CHECK(train_single(ptrs, desc, cfg).log.epoch_loss.size() == 3);
  cfg.loss_stop = 1e9;
  CHECK(train_single(ptrs, desc, cfg).log.epoch_loss.size() == 1);
  CHECK_THROWS_AS(train_single({}, desc, cfg), DataError);
}

TEST_CASE("toy problem is learned") {
  const auto set = toy_set(3, 9, 20, 2);
  std::vector<const data::FlowSample*> ptrs;
  for (const auto& s : set) ptrs.push_back(&s);
  auto cfg = quick(500);
  const auto res = train_single(ptrs, named_descriptor(ModelKind::Rcn, 8, 3, 3, 20), cfg);
  CHECK(res.log.stopped_early);
  CHECK(res.log.epoch_loss.size() < 500);
  CHECK(res.log.epoch_loss.back() < 0.5);
}

TEST_CASE("same seed gives byte-identical checkpoints") {
  const auto set = toy_set(2, 6, 20, 3);
  std::vector<const data::FlowSample*> ptrs;
  for (const auto& s : set) ptrs.push_back(&s);
  auto cfg = quick(4);
  cfg.loss_stop = -1;
  const auto desc = named_descriptor(ModelKind::RcnF, 6, 3, 3, 20);
  CHECK(serialize_checkpoint(train_single(ptrs, desc, cfg).model) ==
        serialize_checkpoint(train_single(ptrs, desc, cfg).model));
}

TEST_CASE("LOSO bookkeeping, reports and parallel folds") {
  const auto set = toy_set(4, 3, 20, 4);
  auto cfg = quick(3);
  cfg.loss_stop = -1;
  const auto desc = named_descriptor(ModelKind::Rcn, 6, 3, 3, 20);
  const auto rep = run_loso(set, desc, cfg, {1, {}});
  CHECK(rep.folds.size() == 4);
  ConfusionMatrix sum(3);
  for (const auto& f : rep.folds) sum += f.cm;
  CHECK(sum == rep.global);
  CHECK(rep.global.total() == set.size());
  CHECK(rep.domains.size() == 2);
  CHECK(rep.folds[2].seed == cfg.seed + 2);

  const auto par = run_loso(set, desc, cfg, {3, {}});
  for (std::size_t i = 0; i < 4; ++i) CHECK(par.folds[i].predicted == rep.folds[i].predicted);
  CHECK(par.global == rep.global);

  const auto dir = fs::temp_directory_path() / "rcn_test_report";
  fs::create_directories(dir);
  write_report(rep, (dir / "r.jsonl").string());
  const auto back = read_report((dir / "r.jsonl").string());
  CHECK(back.global == rep.global);
  CHECK(back.descriptor == desc);
  CHECK(back.train == cfg);
  CHECK(std::abs(compute_uar(back.global, true) - back.uar) <= 1e-12);
  CHECK(std::abs(compute_uf1(back.global) - back.uf1) <= 1e-12);
  CHECK(back.folds.size() == 4);
  CHECK_THROWS_AS(run_loso(toy_set(1, 3, 20, 1), desc, cfg), DataError);
}

TEST_CASE("held-out samples do not reach the fold model") {
  auto set = toy_set(3, 3, 20, 5);
  auto cfg = quick(2);
  cfg.loss_stop = -1;
  const auto desc = named_descriptor(ModelKind::Rcn, 6, 3, 3, 20);
  const auto before = serialize_checkpoint(train_fold(set, desc, cfg, 1).model);
  const auto held = fold_subjects(set)[1];
  for (auto& s : set)
    if (s.subject == held)
      for (auto& v : s.map.values) v = -v * 3 + 1;
  CHECK(serialize_checkpoint(train_fold(set, desc, cfg, 1).model) == before);
}

TEST_CASE("sweep table size") {
  auto cfg = quick(1);
  cfg.loss_stop = -1;
  const auto rows = complexity_sweep([](std::size_t R) { return toy_set(2, 3, R, 6); },
                                     {ModelKind::Model1, ModelKind::Model2}, {20, 24}, {1, 2}, cfg, 4, 3);
  CHECK(rows.size() == 8);
  const auto dir = fs::temp_directory_path() / "rcn_test_sweep";
  fs::create_directories(dir);
  write_sweep_csv(rows, (dir / "s.csv").string());
  CHECK(fs::file_size(dir / "s.csv") > 0);
}

TEST_CASE("class activation maps") {
  RcnModel m(named_descriptor(ModelKind::Rcn, 6, 3, 3, 20), 1);
  for (auto& p : m.parameters())
    for (auto& v : p.tensor.data()) v = Real(p.name == "cls.weight" ? 0.1 : 0);
  data::FlowSample s{"x", "s", "d", 0, {20, 20, std::vector<float>(1200, 0.3f)}};
  flow::Plane cam;
  compute_cam(m, s, 20, 20, cam);
  for (double v : cam.values) CHECK(v == 0.5);

  RcnModel r(named_descriptor(ModelKind::Rcn, 6, 3, 3, 20), 2);
  std::mt19937_64 g(1);
  std::normal_distribution<float> N(0, 1);
  for (auto& v : s.map.values) v = N(g);
  const auto dir = fs::temp_directory_path() / "rcn_test_cam";
  fs::create_directories(dir);
  export_cam(r, s, (dir / "c.pgm").string());
  const auto img = io::read_frame((dir / "c.pgm").string());
  CHECK(img.width == 20);
  CHECK(*std::min_element(img.values.begin(), img.values.end()) == 0.0);
  CHECK(*std::max_element(img.values.begin(), img.values.end()) == 1.0);

  flow::Plane c(10, 10), mask(10, 10);
  for (std::size_t i = 0; i < 100; ++i) c.values[i] = double(i);
  for (std::size_t i = 90; i < 100; ++i) mask.values[i] = 1;
  CHECK(top_decile_hit_rate(c, mask) == 1.0);
}
