// rcn: command-line front end for the micro-expression pipeline.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rcn/checkpoint.hpp"
#include "rcn/dataset.hpp"
#include "rcn/error.hpp"
#include "rcn/eval.hpp"
#include "rcn/flow_cache.hpp"
#include "rcn/search.hpp"
#include "rcn/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace rcn;

namespace {

// --config <file> holds key=value lines; each key stands for --key. Entries
// are spliced in only when the flag is absent from the command line.
std::vector<std::string> merge_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path);
  std::set<std::string> given;
  for (const auto& a : args)
    if (a.rfind("--", 0) == 0) given.insert(a.substr(2, a.find('=') == std::string::npos ? std::string::npos : a.find('=') - 2));
  std::vector<std::string> extra;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t\r"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
      return s;
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(path + ":" + std::to_string(n) + ": expected key=value");
    std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    std::replace(key.begin(), key.end(), '_', '-');
    if (key == "config" || given.count(key)) continue;
    extra.push_back("--" + key + "=" + value);
  }
  // After the subcommand name so the options bind to it.
  auto pos = std::find_if(args.begin(), args.end(), [](const std::string& a) { return a.rfind("-", 0) != 0; });
  if (pos != args.end()) ++pos;
  args.insert(pos, extra.begin(), extra.end());
  return args;
}

struct ModelFlags {
  std::string model = "rcn";
  std::string arch;
  std::size_t feature_maps = 16;
  std::size_t pool = 5;
  std::size_t resolution = 60;

  void add(CLI::App* app) {
    app->add_option("--model", model, "Named architecture (model1..model4, rcn, rcn-w/s/a/c/f/p)");
    app->add_option("--arch", arch, "Full descriptor string; overrides the other model flags");
    app->add_option("--feature-maps", feature_maps, "Feature maps M");
    app->add_option("--pool", pool, "Adaptive pooling size K");
    app->add_option("--resolution", resolution, "Flow map resolution R");
  }
  ArchDescriptor descriptor() const {
    if (!arch.empty()) return ArchDescriptor::parse(arch);
    return named_descriptor(parse_model_kind(model), feature_maps, pool, 3, resolution);
  }
};

struct SolverFlags {
  flow::FlowSolverConfig cfg;
  void add(CLI::App* app) {
    app->add_option("--levels", cfg.pyramid_levels, "Pyramid levels");
    app->add_option("--pyramid-scale", cfg.pyramid_scale, "Pyramid scale factor");
    app->add_option("--warps", cfg.outer_warps, "Warps per level");
    app->add_option("--irls", cfg.irls_iters, "IRLS iterations per warp");
    app->add_option("--sigma", cfg.lorentzian_sigma, "Lorentzian sigma");
    app->add_option("--lambda", cfg.smoothness_lambda, "Smoothness weight");
    app->add_option("--median", cfg.median_radius, "Median filter radius");
    app->add_option("--jacobi", cfg.jacobi_sweeps, "Jacobi sweeps per IRLS iteration");
  }
};

struct TrainFlags {
  TrainConfig cfg;
  std::string loss = "eq9";
  std::string loss_stop = "0.5";
  void add(CLI::App* app) {
    app->add_option("--lr", cfg.learning_rate, "Learning rate");
    app->add_option("--momentum", cfg.momentum, "SGD momentum");
    app->add_option("--weight-decay", cfg.weight_decay, "Weight decay");
    app->add_option("--dropout", cfg.dropout, "Dropout ratio");
    app->add_option("--epochs", cfg.max_epochs, "Maximum epochs");
    app->add_option("--loss-stop", loss_stop, "Stop once an epoch's mean loss is below this (inf disables)");
    app->add_option("--batch-size", cfg.batch_size, "Minibatch size");
    app->add_option("--loss", loss, "eq9 or softmax_ce");
  }
  TrainConfig get(std::uint64_t seed) const {
    TrainConfig c = cfg;
    c.set("loss_stop", loss_stop);
    c.loss = parse_loss_kind(loss);
    c.seed = seed;
    c.validate();
    return c;
  }
};

std::string default_cache(const std::string& manifest) {
  return (fs::path(manifest).parent_path() / "flow_cache").string();
}

data::FlowCacheIndex flows_for(const data::Manifest& m, const std::string& cache, std::vector<std::size_t> res,
                               const flow::FlowSolverConfig& cfg, std::size_t workers) {
  return data::precompute_flows(m, cfg, res, cache, workers);
}

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    try {
      out.push_back(std::stoul(tok));
    } catch (const std::exception&) {
      throw UsageError("bad list entry '" + tok + "'");
    }
  }
  return out;
}

std::vector<std::uint64_t> seed_list(std::uint64_t base, std::size_t count) {
  std::vector<std::uint64_t> s;
  for (std::size_t i = 0; i < count; ++i) s.push_back(base + 1000 * i);
  return s;
}

int run(int argc, char** argv) {
  CLI::App app{"Micro-expression recognition with recurrent convolutional networks"};
  app.require_subcommand(1);
  std::string config;
  std::uint64_t seed = 1;
  std::string manifest_path, out, cache;
  std::size_t workers = 1;

  auto common = [&](CLI::App* sub, bool needs_manifest) {
    sub->add_option("--config", config, "key=value defaults; explicit flags win");
    sub->add_option("--seed", seed, "Base seed");
    auto* m = sub->add_option("--manifest", manifest_path, "Dataset manifest (JSON-lines)");
    if (needs_manifest) m->required();
    sub->add_option("--out", out, "Output path")->required();
  };

  // gen-synth
  auto* gen = app.add_subcommand("gen-synth", "Write a synthetic composite dataset");
  common(gen, false);
  data::GeneratorConfig gcfg;
  std::size_t n_domains = 3;
  double shift = 1.0;
  bool clean = false;
  std::size_t frame_size = 0;
  gen->add_option("--subjects", gcfg.subjects, "Subjects");
  gen->add_option("--samples-per-subject", gcfg.samples_per_subject, "Samples per subject");
  gen->add_option("--domains", n_domains, "Pseudo-domains (1-3)")->check(CLI::Range(1, 3));
  gen->add_option("--shift", shift, "Domain-shift dial (0 = identical domains, 1 = default)");
  gen->add_option("--min-amplitude", gcfg.min_amplitude, "Smallest class motion, px");
  gen->add_option("--max-amplitude", gcfg.max_amplitude, "Largest class motion, px");
  gen->add_option("--frame-size", frame_size, "Override native frame size of every domain");
  gen->add_flag("--noise-free", clean, "Zero noise and jitter in every domain");

  // extract-flow
  auto* ext = app.add_subcommand("extract-flow", "Precompute flow maps into a cache directory");
  common(ext, true);
  SolverFlags ext_solver;
  ext_solver.add(ext);
  std::string ext_res = "60";
  ext->add_option("--resolutions", ext_res, "Comma-separated resolutions");
  ext->add_option("--workers", workers, "Worker threads");

  // train
  auto* tr = app.add_subcommand("train", "Train one model on every sample of the manifest");
  common(tr, true);
  ModelFlags tr_model;
  TrainFlags tr_flags;
  SolverFlags tr_solver;
  tr_model.add(tr);
  tr_flags.add(tr);
  tr_solver.add(tr);
  tr->add_option("--cache", cache, "Flow cache directory");

  // eval-loso
  auto* ev = app.add_subcommand("eval-loso", "Leave-one-subject-out evaluation");
  common(ev, true);
  ModelFlags ev_model;
  TrainFlags ev_flags;
  SolverFlags ev_solver;
  ev_model.add(ev);
  ev_flags.add(ev);
  ev_solver.add(ev);
  ev->add_option("--cache", cache, "Flow cache directory");
  ev->add_option("--workers", workers, "Parallel folds");

  // sweep
  auto* sw = app.add_subcommand("sweep", "Model x resolution LOSO sweep (CSV)");
  common(sw, true);
  ModelFlags sw_model;
  TrainFlags sw_flags;
  SolverFlags sw_solver;
  sw_model.add(sw);
  sw_flags.add(sw);
  sw_solver.add(sw);
  std::string sw_models = "model1,model2,model3,model4", sw_res = "20,40,60,80,100,150,200,250,300";
  std::size_t sw_seeds = 5;
  sw->add_option("--models", sw_models, "Comma-separated model kinds");
  sw->add_option("--resolutions", sw_res, "Comma-separated resolutions");
  sw->add_option("--seeds", sw_seeds, "Number of seeds");
  sw->add_option("--cache", cache, "Flow cache directory");
  sw->add_option("--workers", workers, "Parallel folds");

  // search
  auto* se = app.add_subcommand("search", "Differentiable search over module combinations");
  common(se, false);
  SearchConfig scfg;
  SolverFlags se_solver;
  se_solver.add(se);
  bool contrived = false;
  std::string se_loss = "eq9";
  se->add_option("--cache", cache, "Flow cache directory");
  se->add_option("--epochs", scfg.epochs, "Search epochs");
  se->add_option("--lr", scfg.weight_lr, "Network weight learning rate");
  se->add_option("--arch-lr", scfg.arch_lr, "Architecture learning rate");
  se->add_option("--val-fraction", scfg.val_fraction, "Share of subjects used for architecture steps");
  se->add_option("--batch-size", scfg.batch_size, "Minibatch size");
  se->add_option("--feature-maps", scfg.feature_maps, "Feature maps M");
  se->add_option("--pool", scfg.pool_size, "Adaptive pooling size K");
  se->add_option("--resolution", scfg.resolution, "Flow map resolution R");
  se->add_option("--loss", se_loss, "eq9 or softmax_ce");
  se->add_flag("--contrived", contrived, "Use the built-in attention-favoring flow set instead of a manifest");

  // cam
  auto* cam = app.add_subcommand("cam", "Export a class activation map as a P5 graymap");
  common(cam, true);
  std::string ckpt, sample_id;
  bool all_classes = false;
  SolverFlags cam_solver;
  cam_solver.add(cam);
  cam->add_option("--checkpoint", ckpt, "Trained model (RCNM)")->required();
  cam->add_option("--sample", sample_id, "Sample id")->required();
  cam->add_option("--cache", cache, "Flow cache directory");
  cam->add_flag("--all-classes", all_classes, "Sum over all classes instead of the predicted one");

  auto args = merge_config(argc, argv);
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (*gen) {
    auto domains = data::default_domains();
    domains.resize(n_domains);
    domains = data::scale_domain_shift(domains, shift);
    for (auto& d : domains) {
      if (clean) d.noise_sigma = d.jitter = 0;
      if (frame_size) d.resolution = frame_size;
    }
    gcfg.domains = domains;
    gcfg.seed = seed;
    const auto m = data::generate_dataset(gcfg, out);
    std::cout << "wrote " << m.records.size() << " samples to " << out << "\n";
    return 0;
  }

  if (*se && contrived) {
    scfg.seed = seed;
    scfg.loss = parse_loss_kind(se_loss);
    const auto samples = attention_favoring_set(10, 9, scfg.resolution, seed);
    SearchSpace space;
    const auto res = search(samples, space, scfg);
    write_search_report(res, space, scfg, out);
    for (std::size_t r = 1; r <= 3 && r <= res.ranking.size(); ++r)
      std::cout << r << ": " << res.ranking[r - 1].descriptor.to_string() << "  " << res.ranking[r - 1].weight << "\n";
    return 0;
  }
  if (manifest_path.empty()) throw UsageError("--manifest is required");
  const auto manifest = data::load_manifest(manifest_path);
  if (cache.empty()) cache = default_cache(manifest_path);

  if (*ext) {
    const auto idx = flows_for(manifest, out, parse_list(ext_res), ext_solver.cfg, workers);
    std::cout << idx.entries.size() << " cached maps, " << idx.recomputed << " recomputed\n";
    return 0;
  }
  if (*tr) {
    const auto desc = tr_model.descriptor();
    const auto cfg = tr_flags.get(seed);
    const auto idx = flows_for(manifest, cache, {desc.resolution}, tr_solver.cfg, 1);
    const auto set = data::load_flow_set(manifest, idx, desc.resolution);
    std::vector<const data::FlowSample*> ptrs;
    for (const auto& s : set) ptrs.push_back(&s);
    const auto res = train_single(ptrs, desc, cfg);
    write_checkpoint(res.model, out);
    std::ofstream log(out + ".log.jsonl");
    for (std::size_t e = 0; e < res.log.epoch_loss.size(); ++e)
      log << json{{"epoch", e + 1}, {"loss", res.log.epoch_loss[e]}}.dump() << '\n';
    std::cout << "trained " << desc.to_string() << " for " << res.log.epoch_loss.size() << " epochs, final loss "
              << (res.log.epoch_loss.empty() ? 0.0 : res.log.epoch_loss.back()) << "\n";
    return 0;
  }
  if (*ev) {
    const auto desc = ev_model.descriptor();
    const auto cfg = ev_flags.get(seed);
    const auto idx = flows_for(manifest, cache, {desc.resolution}, ev_solver.cfg, workers);
    const auto set = data::load_flow_set(manifest, idx, desc.resolution);
    const auto rep = run_loso(set, desc, cfg, {workers, {}});
    write_report(rep, out);
    std::printf("UAR %.4f  UF1 %.4f  (%zu folds, %.1fs)\n", rep.uar, rep.uf1, rep.folds.size(), rep.seconds);
    return 0;
  }
  if (*sw) {
    std::vector<ModelKind> models;
    std::stringstream ss(sw_models);
    for (std::string tok; std::getline(ss, tok, ',');) models.push_back(parse_model_kind(tok));
    const auto res = parse_list(sw_res);
    const auto cfg = sw_flags.get(seed);
    const auto idx = flows_for(manifest, cache, res, sw_solver.cfg, workers);
    const auto rows = complexity_sweep([&](std::size_t R) { return data::load_flow_set(manifest, idx, R); }, models,
                                       res, seed_list(seed, sw_seeds), cfg, sw_model.feature_maps, sw_model.pool,
                                       workers, [](const SweepRow& r) {
                                         std::printf("%s R=%zu seed=%llu UAR %.4f\n", std::string(to_string(r.model)).c_str(),
                                                     r.resolution, static_cast<unsigned long long>(r.seed), r.uar);
                                         std::fflush(stdout);
                                       });
    write_sweep_csv(rows, out);
    return 0;
  }
  if (*se) {
    scfg.seed = seed;
    scfg.loss = parse_loss_kind(se_loss);
    const auto idx = flows_for(manifest, cache, {scfg.resolution}, se_solver.cfg, workers);
    const auto samples = data::load_flow_set(manifest, idx, scfg.resolution);
    SearchSpace space;
    const auto res = search(samples, space, scfg);
    write_search_report(res, space, scfg, out);
    for (std::size_t r = 1; r <= 3 && r <= res.ranking.size(); ++r)
      std::cout << r << ": " << res.ranking[r - 1].descriptor.to_string() << "  " << res.ranking[r - 1].weight << "\n";
    return 0;
  }
  if (*cam) {
    auto model = read_checkpoint(ckpt);
    const std::size_t R = model.descriptor().resolution;
    const auto idx = flows_for(manifest, cache, {R}, cam_solver.cfg, 1);
    const auto it = std::find_if(manifest.records.begin(), manifest.records.end(),
                                 [&](const auto& r) { return r.sample_id == sample_id; });
    if (it == manifest.records.end()) throw DataError("no sample '" + sample_id + "' in manifest");
    const data::FlowSample s{it->sample_id, it->subject, it->domain, int(it->label), idx.load(sample_id, R)};
    const int pred = export_cam(model, s, out, all_classes ? CamMode::AllClasses : CamMode::PredictedClass);
    std::cout << "predicted " << data::to_string(data::Emotion(pred)) << ", map written to " << out << "\n";
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  rcn::tune_allocator();
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
