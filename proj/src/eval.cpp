#include "rcn/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include <json.hpp>

#include "rcn/error.hpp"
#include "rcn/image_io.hpp"

namespace rcn {

using json = nlohmann::json;

std::vector<std::string> fold_subjects(const std::vector<data::FlowSample>& samples) {
  std::set<std::string> s;
  for (const auto& x : samples) s.insert(x.subject);
  return {s.begin(), s.end()};
}

TrainResult train_fold(const std::vector<data::FlowSample>& samples, const ArchDescriptor& desc,
                       const TrainConfig& cfg, std::size_t fold_index, std::vector<std::string>* warnings) {
  const auto subjects = fold_subjects(samples);
  if (fold_index >= subjects.size()) throw UsageError("fold index out of range");
  const auto& held = subjects[fold_index];
  std::vector<const data::FlowSample*> train;
  std::vector<std::size_t> per_class(desc.num_classes, 0);
  for (const auto& s : samples) {
    if (s.subject == held) continue;
    train.push_back(&s);
    if (std::size_t(s.label) < per_class.size()) ++per_class[std::size_t(s.label)];
  }
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    if (per_class[c] == 0 && warnings) {
      warnings->push_back("fold " + held + ": no training samples of class " + std::to_string(c));
    }
  }
  TrainConfig fold_cfg = cfg;
  fold_cfg.seed = cfg.seed + fold_index;
  return train_single(train, desc, fold_cfg);
}

namespace {

double safe_uar(const ConfusionMatrix& cm) {
  for (std::size_t c = 0; c < cm.classes; ++c)
    if (cm.row_sum(c) > 0) return compute_uar(cm, true);
  return 0;
}

}  // namespace

EvalReport run_loso(const std::vector<data::FlowSample>& samples, const ArchDescriptor& desc,
                    const TrainConfig& cfg, const LosoOptions& options) {
  desc.validate();
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto subjects = fold_subjects(samples);
  if (subjects.size() < 2) throw DataError("LOSO needs at least two subjects");
  for (const auto& s : samples) {
    if (s.label < 0 || std::size_t(s.label) >= desc.num_classes) throw DataError("label out of range: " + s.sample_id);
  }

  EvalReport report;
  report.descriptor = desc;
  report.train = cfg;
  report.folds.resize(subjects.size());
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr error;

  auto work = [&] {
    for (std::size_t f; (f = next++) < subjects.size();) {
      try {
        FoldResult fr;
        fr.subject = subjects[f];
        fr.seed = cfg.seed + f;
        fr.cm = ConfusionMatrix(desc.num_classes);
        TrainResult tr = train_fold(samples, desc, cfg, f, &fr.warnings);
        std::vector<const data::FlowSample*> test;
        for (const auto& s : samples)
          if (s.subject == fr.subject) test.push_back(&s);
        const auto pred = predict(tr.model, test, cfg.batch_size);
        for (std::size_t i = 0; i < test.size(); ++i) {
          fr.sample_ids.push_back(test[i]->sample_id);
          fr.truth.push_back(test[i]->label);
          fr.predicted.push_back(pred[i]);
          fr.cm.add(std::size_t(test[i]->label), std::size_t(pred[i]));
        }
        fr.epochs = tr.log.epoch_loss.size();
        fr.final_loss = tr.log.epoch_loss.empty() ? 0 : tr.log.epoch_loss.back();
        fr.seconds = tr.log.seconds;
        if (options.on_fold) options.on_fold(fr, tr.model);
        report.folds[f] = std::move(fr);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
        next = subjects.size();
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(options.workers, subjects.size()));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);

  std::map<std::string, std::string> domain_of;
  for (const auto& s : samples) domain_of[s.sample_id] = s.domain;
  report.global = ConfusionMatrix(desc.num_classes);
  for (const auto& f : report.folds) {
    report.global += f.cm;
    for (std::size_t i = 0; i < f.sample_ids.size(); ++i) {
      auto& d = report.domains[domain_of[f.sample_ids[i]]];
      if (d.cm.classes == 0) d.cm = ConfusionMatrix(desc.num_classes);
      d.cm.add(std::size_t(f.truth[i]), std::size_t(f.predicted[i]));
    }
  }
  report.uar = compute_uar(report.global, true);
  report.uf1 = compute_uf1(report.global);
  for (auto& [name, d] : report.domains) {
    d.uar = safe_uar(d.cm);
    d.uf1 = compute_uf1(d.cm);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

namespace {

json train_json(const TrainConfig& c) {
  return {{"lr", c.learning_rate},     {"momentum", c.momentum},     {"weight_decay", c.weight_decay},
          {"dropout", c.dropout},      {"max_epochs", c.max_epochs}, {"loss_stop", std::isinf(c.loss_stop) ? json("inf") : json(c.loss_stop)},
          {"batch_size", c.batch_size}, {"seed", c.seed},            {"loss", std::string(to_string(c.loss))}};
}

TrainConfig train_from(const json& j) {
  TrainConfig c;
  for (const auto& [k, v] : j.items()) c.set(k, v.is_string() ? v.get<std::string>() : v.dump());
  return c;
}

json matrix_json(const ConfusionMatrix& cm) {
  json rows = json::array();
  for (std::size_t i = 0; i < cm.classes; ++i) {
    json r = json::array();
    for (std::size_t j = 0; j < cm.classes; ++j) r.push_back(cm.at(i, j));
    rows.push_back(r);
  }
  return rows;
}

ConfusionMatrix matrix_from(const json& j) {
  ConfusionMatrix cm(j.size());
  for (std::size_t i = 0; i < cm.classes; ++i) {
    if (j[i].size() != cm.classes) throw DataError("report: confusion matrix is not square");
    for (std::size_t k = 0; k < cm.classes; ++k) cm.at(i, k) = j[i][k].get<std::size_t>();
  }
  return cm;
}

}  // namespace

void write_report(const EvalReport& r, const std::string& path, bool timings) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write report " + path);
  for (const auto& f : r.folds) {
    json j{{"kind", "fold"},         {"subject", f.subject},    {"seed", f.seed},
           {"confusion", matrix_json(f.cm)}, {"sample_ids", f.sample_ids}, {"truth", f.truth},
           {"predicted", f.predicted}, {"epochs", f.epochs},    {"final_loss", f.final_loss},
           {"seconds", timings ? f.seconds : 0.0}, {"warnings", f.warnings}};
    out << j.dump() << '\n';
  }
  json domains = json::object();
  for (const auto& [name, d] : r.domains)
    domains[name] = {{"confusion", matrix_json(d.cm)}, {"uar", d.uar}, {"uf1", d.uf1}};
  json j{{"kind", "report"},
         {"descriptor", r.descriptor.to_string()},
         {"train", train_json(r.train)},
         {"confusion", matrix_json(r.global)},
         {"uar", r.uar},
         {"uf1", r.uf1},
         {"domains", domains},
         {"seconds", timings ? r.seconds : 0.0}};
  out << j.dump() << '\n';
  if (!out) throw DataError("write failed for " + path);
}

EvalReport read_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open report " + path);
  EvalReport r;
  bool have_summary = false;
  std::string line;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      const auto kind = j.at("kind").get<std::string>();
      if (kind == "fold") {
        FoldResult f;
        f.subject = j.at("subject").get<std::string>();
        f.seed = j.at("seed").get<std::uint64_t>();
        f.cm = matrix_from(j.at("confusion"));
        f.sample_ids = j.at("sample_ids").get<std::vector<std::string>>();
        f.truth = j.at("truth").get<std::vector<int>>();
        f.predicted = j.at("predicted").get<std::vector<int>>();
        f.epochs = j.at("epochs").get<std::size_t>();
        f.final_loss = j.at("final_loss").get<double>();
        f.seconds = j.at("seconds").get<double>();
        f.warnings = j.at("warnings").get<std::vector<std::string>>();
        r.folds.push_back(std::move(f));
      } else if (kind == "report") {
        r.descriptor = ArchDescriptor::parse(j.at("descriptor").get<std::string>());
        r.train = train_from(j.at("train"));
        r.global = matrix_from(j.at("confusion"));
        r.uar = j.at("uar").get<double>();
        r.uf1 = j.at("uf1").get<double>();
        for (const auto& [name, d] : j.at("domains").items())
          r.domains[name] = {matrix_from(d.at("confusion")), d.at("uar").get<double>(), d.at("uf1").get<double>()};
        r.seconds = j.at("seconds").get<double>();
        have_summary = true;
      } else {
        throw DataError("report: unknown record kind '" + kind + "'");
      }
    }
  } catch (const json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  if (!have_summary) throw DataError(path + ": missing report record");
  return r;
}

std::vector<SweepRow> complexity_sweep(const std::function<std::vector<data::FlowSample>(std::size_t)>& load,
                                       const std::vector<ModelKind>& models,
                                       const std::vector<std::size_t>& resolutions,
                                       const std::vector<std::uint64_t>& seeds, const TrainConfig& cfg,
                                       std::size_t feature_maps, std::size_t pool_size, std::size_t workers,
                                       const std::function<void(const SweepRow&)>& progress) {
  std::vector<SweepRow> rows;
  for (auto R : resolutions) {
    const auto samples = load(R);
    for (auto kind : models) {
      const auto desc = named_descriptor(kind, feature_maps, pool_size, 3, R);
      for (auto seed : seeds) {
        TrainConfig c = cfg;
        c.seed = seed;
        const auto rep = run_loso(samples, desc, c, {workers, {}});
        rows.push_back({kind, R, seed, rep.uar, rep.uf1});
        if (progress) progress(rows.back());
      }
    }
  }
  return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.precision(10);
  out << "model,resolution,seed,uar,uf1\n";
  for (const auto& r : rows) out << to_string(r.model) << ',' << r.resolution << ',' << r.seed << ',' << r.uar << ',' << r.uf1 << '\n';
  out << "\nmodel,resolution,seeds,uar_mean,uar_std,uf1_mean,uf1_std\n";
  std::vector<std::pair<ModelKind, std::size_t>> keys;
  for (const auto& r : rows)
    if (std::find(keys.begin(), keys.end(), std::pair{r.model, r.resolution}) == keys.end())
      keys.emplace_back(r.model, r.resolution);
  for (const auto& [m, R] : keys) {
    std::vector<double> u, f;
    for (const auto& r : rows)
      if (r.model == m && r.resolution == R) {
        u.push_back(r.uar);
        f.push_back(r.uf1);
      }
    auto stats = [](const std::vector<double>& v) {
      double mean = 0, var = 0;
      for (double x : v) mean += x;
      mean /= double(v.size());
      for (double x : v) var += (x - mean) * (x - mean);
      return std::pair{mean, v.size() > 1 ? std::sqrt(var / double(v.size() - 1)) : 0.0};
    };
    const auto [um, us] = stats(u);
    const auto [fm, fs] = stats(f);
    out << to_string(m) << ',' << R << ',' << u.size() << ',' << um << ',' << us << ',' << fm << ',' << fs << '\n';
  }
  if (!out) throw DataError("write failed for " + path);
}

int compute_cam(RcnModel& model, const data::FlowSample& sample, std::size_t out_w, std::size_t out_h,
                flow::Plane& cam, CamMode mode) {
  NoGradGuard guard;
  Rng rng(0);
  const auto& d = model.descriptor();
  const auto res = model.forward(model.input_norm().apply(batch_tensor({&sample})), false, rng);
  const auto logits = res.logits.data();
  const int pred = int(std::max_element(logits.begin(), logits.end()) - logits.begin());
  Tensor raw;
  if (mode == CamMode::PredictedClass) {
    const int cls[] = {pred};
    raw = class_activation_map(res.taps.final, model.classifier_weight(), d.pool_size, cls);
  } else {
    for (std::size_t c = 0; c < d.num_classes; ++c) {
      const int cls[] = {int(c)};
      Tensor m = class_activation_map(res.taps.final, model.classifier_weight(), d.pool_size, cls);
      raw = raw.defined() ? add(raw, m) : m;
    }
  }
  const Tensor up = upsample_bilinear(raw, out_h, out_w);
  const auto v = up.data();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  cam = flow::Plane(out_w, out_h);
  const double span = double(*hi) - double(*lo);
  for (std::size_t i = 0; i < v.size(); ++i) cam.values[i] = span > 0 ? (double(v[i]) - *lo) / span : 0.5;
  return pred;
}

int export_cam(RcnModel& model, const data::FlowSample& sample, const std::string& out_path, CamMode mode) {
  flow::Plane cam;
  const std::size_t R = model.descriptor().resolution;
  const int pred = compute_cam(model, sample, R, R, cam, mode);
  io::write_frame(out_path, cam);
  return pred;
}

double top_decile_hit_rate(const flow::Plane& cam, const flow::Plane& mask) {
  if (cam.width != mask.width || cam.height != mask.height) throw ShapeError("CAM and mask sizes differ");
  std::vector<std::size_t> idx(cam.values.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const std::size_t top = std::max<std::size_t>(1, idx.size() / 10);
  std::partial_sort(idx.begin(), idx.begin() + long(top), idx.end(), [&](std::size_t a, std::size_t b) {
    return cam.values[a] != cam.values[b] ? cam.values[a] > cam.values[b] : a < b;
  });
  std::size_t hit = 0;
  for (std::size_t i = 0; i < top; ++i) hit += mask.values[idx[i]] > 0.5;
  return double(hit) / double(top);
}

}  // namespace rcn
