#include "neurmatch/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "neurmatch/baseline.hpp"
#include "neurmatch/descriptors.hpp"
#include "neurmatch/error.hpp"
#include "neurmatch/evalmetrics.hpp"
#include "neurmatch/fusion_training.hpp"
#include "neurmatch/gccm.hpp"
#include "neurmatch/matcher.hpp"
#include "neurmatch/random.hpp"
#include "neurmatch/run_config.hpp"
#include "neurmatch/suite.hpp"
#include "neurmatch/synthdata.hpp"

namespace neurmatch::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

bool g_quiet = false;

template <typename... Args>
void log(fmt::format_string<Args...> f, Args&&... args) {
  if (!g_quiet) fmt::print(stderr, "neurmatch: {}\n", fmt::format(f, std::forward<Args>(args)...));
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open " + path.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json(const json& j, const fs::path& path, int indent = -1) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f << j.dump(indent) << '\n';
}

void write_text(const std::string& s, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f << s;
}

std::string file_hash(const fs::path& path) {
  const auto bytes = descriptors::read_file_bytes(path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

// Task directories listed by a manifest, or the directory itself when it
// holds a task.json.
std::vector<fs::path> task_dirs(const fs::path& root) {
  if (fs::exists(root / "task.json")) return {root};
  const json m = read_json(root / "manifest.json");
  if (m.value("format", "") != "neurmatch-manifest") {
    throw FormatError((root / "manifest.json").string() + ": not a task manifest");
  }
  std::vector<fs::path> out;
  for (const auto& t : m.at("tasks")) out.push_back(root / t.get<std::string>());
  return out;
}

std::vector<synth::PairTask> load_tasks(const std::vector<std::string>& roots) {
  std::vector<synth::PairTask> tasks;
  for (const auto& r : roots) {
    for (const auto& dir : task_dirs(r)) tasks.push_back(synth::load_task(dir));
  }
  return tasks;
}

void save_tasks(const std::vector<synth::PairTask>& tasks, const fs::path& out,
                const std::string& kind, std::uint64_t seed, bool images) {
  json names = json::array();
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const std::string name = fmt::format("task_{:05d}", t);
    synth::save_task(tasks[t], out / name, images);
    names.push_back(name);
  }
  write_json({{"format", "neurmatch-manifest"},
              {"format_version", 1},
              {"kind", kind},
              {"seed", seed},
              {"count", tasks.size()},
              {"tasks", names}},
             out / "manifest.json", 1);
  log("wrote {} {} tasks to {}", tasks.size(), kind, out.string());
}

descriptors::FusionNet read_fusion(const fs::path& path) {
  return descriptors::fusion_from_json(read_json(path));
}

// Flags that shadow RunConfig keys. Values are kept as text and merged
// after parsing so the file and environment can fill the gaps.
class Settings {
 public:
  void add(CLI::App* app, const std::string& flag, const std::string& key,
           const std::string& help) {
    auto& slot = values_[key + "@" + app->get_name()];
    bound_.push_back({app->add_option(flag, slot, help), key, &slot});
  }

  void apply(RunConfig& cfg) const {
    for (const auto& b : bound_) {
      if (b.option->count() > 0) cfg.set(b.key, *b.value, b.option->get_name());
    }
  }

 private:
  struct Binding {
    CLI::Option* option;
    std::string key;
    std::string* value;
  };
  std::map<std::string, std::string> values_;
  std::vector<Binding> bound_;
};

eval::PipelineConfig pipeline_from(const RunConfig& cfg) {
  eval::PipelineConfig p;
  p.matcher.temperature = cfg.get_double("matcher.temperature");
  p.matcher.min_score = cfg.get_double("matcher.min_score");
  p.matcher.validate();
  p.verify.tau = cfg.get_double("verify.tau");
  p.verify.subsets_per_match = static_cast<int>(cfg.get_int("verify.subsets_per_match"));
  p.verify.n_subsets = static_cast<int>(cfg.get_int("verify.n_subsets"));
  p.verify.min_coverage = static_cast<int>(cfg.get_int("verify.min_coverage"));
  p.verify.seed = static_cast<std::uint64_t>(cfg.get_int("global.seed"));
  p.verify.validate();
  p.ransac.iterations = static_cast<int>(cfg.get_int("ransac.iterations"));
  p.ransac.inlier_threshold = cfg.get_double("ransac.inlier_threshold");
  p.ransac.min_inliers = static_cast<int>(cfg.get_int("ransac.min_inliers"));
  const std::string model = cfg.get("ransac.model");
  if (model == "similarity") {
    p.ransac.model = baseline::RansacModel::kSimilarity;
  } else if (model == "affine") {
    p.ransac.model = baseline::RansacModel::kAffine;
  } else {
    throw ArgumentError("ransac.model must be similarity or affine");
  }
  p.ransac.seed = p.verify.seed;
  p.ransac.validate();
  p.estimator = eval::tre_estimator_from_string(cfg.get("tre.estimator"));
  p.tre_lambda = cfg.get_double("tre.lambda");
  if (!(p.tre_lambda >= 0.0)) throw ArgumentError("tre.lambda must be >= 0");
  return p;
}

void apply_train_overrides(const RunConfig& cfg, nn::TrainConfig& t) {
  if (const auto e = cfg.get_int("train.epochs"); e > 0) t.epochs = static_cast<int>(e);
  if (const auto lr = cfg.get_double("train.learning_rate"); lr > 0) t.learning_rate = lr;
  if (const auto b = cfg.get_int("train.batch_size"); b > 0) t.batch_size = static_cast<int>(b);
  t.validate();
}

json inspect_file(const fs::path& path, bool summary) {
  const auto bytes = descriptors::read_file_bytes(path);
  auto starts = [&](const char* magic) {
    return bytes.size() >= 4 && std::equal(magic, magic + 4, bytes.begin());
  };
  auto matrix = [&](const descriptors::FloatMatrix& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      rows.push_back(std::vector<float>(m.row(r).data(), m.row(r).data() + m.cols()));
    }
    return rows;
  };
  if (starts("NMDS")) {
    const auto ds = descriptors::decode_descriptors(bytes);
    ds.validate();
    json j = {{"format", "NMDS"},
              {"format_version", descriptors::kDescriptorFormatVersion},
              {"n", ds.size()},
              {"d_local", ds.local.cols()},
              {"d_sem", ds.semantic.cols()},
              {"d_fused", ds.fused.cols()},
              {"valid", true}};
    if (!summary) {
      json kps = json::array();
      for (auto p : ds.keypoints) kps.push_back({p.x, p.y});
      j["keypoints"] = kps;
      if (ds.has_local()) j["local"] = matrix(ds.local);
      if (ds.has_semantic()) j["semantic"] = matrix(ds.semantic);
      if (ds.has_fused()) j["fused"] = matrix(ds.fused);
    }
    return j;
  }
  if (starts("NMFM")) {
    const auto fm = descriptors::decode_feature_map(bytes);
    fm.validate();
    json j = {{"format", "NMFM"},
              {"format_version", descriptors::kFeatureMapFormatVersion},
              {"height", fm.height},
              {"width", fm.width},
              {"channels", fm.channels},
              {"stride", fm.stride},
              {"valid", true}};
    if (!summary) j["data"] = fm.data;
    return j;
  }
  if (bytes.size() >= 8 && bytes[0] == 0x89 && bytes[1] == 'P') {
    const Image img = read_png16(path);
    return {{"format", "png16"}, {"width", img.width}, {"height", img.height}, {"valid", true}};
  }
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": unrecognized file (" + e.what() + ")");
  }
  const std::string tag = j.is_object() ? j.value("format", "") : "";
  if (tag == "neurmatch-densenet") {
    nn::net_from_json(j);
  } else if (tag == "neurmatch-fusion") {
    descriptors::fusion_from_json(j);
  } else if (tag == "neurmatch-gccm") {
    gccm::gccm_from_json(j);
  } else if (tag == "neurmatch-task") {
    synth::load_task(path.parent_path());
  } else if (j.is_object() && j.contains("matches") && j.contains("n_a")) {
    matcher::matches_from_json(j);
  } else if (j.is_object() && j.value("type", "") == "tps") {
    geometry::tps_from_json(j);
  } else if (tag.empty() && !j.is_object()) {
    throw FormatError(path.string() + ": unrecognized JSON document");
  }
  if (summary && j.is_object()) {
    for (const char* big : {"net", "rows", "matches", "weights", "control_points"}) {
      j.erase(big);
    }
  }
  return {{"format", tag.empty() ? "json" : tag}, {"valid", true}, {"content", j}};
}

struct Args {
  std::string config;
  bool quiet = false;

  // gen
  int count = 0;
  int pairs = 0;
  int aug = 50;
  int rotations = 0;
  int contrasts = 0;
  double max_rotation = 0.3;
  double sigma = -1.0;
  int image_size = 512;
  int neurons = 50;
  bool geometry_only = false;
  std::string out;

  // train
  std::vector<std::string> tasks;
  std::string stage;
  std::string init;
  std::string metrics;
  int samples_per_task = 0;
  int hidden = 256;
  int d_fused = 128;

  // match / verify
  std::string a, b, map_a, map_b, fusion, matches, model;
  bool local_only = false;
  double extent = 512.0;

  // eval / bench
  std::vector<std::string> methods;
  std::string format = "table";
  std::string suite = "default";

  // inspect
  std::string file;
  bool summary = false;
};

int cmd_gen(const std::string& kind, const Args& args, const RunConfig& cfg) {
  auto sc = suite::default_suite();
  sc.seed = static_cast<std::uint64_t>(cfg.get_int("global.seed"));
  sc.scene.image_size = args.image_size;
  sc.scene.n_neurons = args.neurons;
  sc.scene.validate();
  std::vector<synth::PairTask> tasks;
  if (kind == "pretrain") {
    if (args.count < 1) throw ArgumentError("--count must be >= 1");
    if (args.sigma >= 0.0) sc.pretrain_sigma_max = args.sigma;
    tasks = suite::pretrain_tasks(sc, args.count, !args.geometry_only);
  } else {
    if (args.pairs < 1) throw ArgumentError("--pairs must be >= 1");
    synth::AugConfig aug;
    if (args.rotations > 0 || args.contrasts > 0) {
      aug.rotation_steps = std::max(args.rotations, 1);
      aug.contrast_variants = std::max(args.contrasts, 1);
    } else if (args.aug % 5 == 0) {
      aug.rotation_steps = args.aug / 5;
      aug.contrast_variants = 5;
    } else {
      aug.rotation_steps = args.aug;
      aug.contrast_variants = 1;
    }
    aug.max_rotation = args.max_rotation;
    aug.validate();
    sc.finetune_pairs = args.pairs;
    sc.finetune_aug = aug;
    if (args.sigma >= 0.0) sc.finetune_sigma = args.sigma;
    synth::TaskOptions options;
    options.render = !args.geometry_only;
    for (int p = 0; p < args.pairs; ++p) {
      auto batch = synth::make_crossmodal_task(
          sc.scene, suite::deform_for(sc.finetune_sigma, sc.scene.image_size), aug,
          derive_seed(sc.seed, 3000 + static_cast<std::uint64_t>(p) * 7919), options);
      for (auto& t : batch) tasks.push_back(std::move(t));
    }
  }
  save_tasks(tasks, args.out, kind, sc.seed, !args.geometry_only);
  return 0;
}

int cmd_train(const std::string& what, const Args& args, const RunConfig& cfg) {
  const auto seed = static_cast<std::uint64_t>(cfg.get_int("global.seed"));
  const auto tasks = load_tasks(args.tasks);
  if (tasks.empty()) throw PreconditionError("no training tasks found");
  log("loaded {} tasks", tasks.size());
  json metrics;
  if (what == "fusion") {
    fusion::FusionTrainConfig fc;
    fc.hidden = args.hidden;
    fc.d_fused = args.d_fused;
    fc.train.seed = seed;
    apply_train_overrides(cfg, fc.train);
    std::optional<descriptors::FusionNet> init;
    if (!args.init.empty()) init = read_fusion(args.init);
    const auto r = fusion::train_fusion(tasks, fc, init);
    write_json(descriptors::to_json(r.fusion), args.out);
    metrics = {{"epoch_loss", r.epoch_loss}, {"tasks", tasks.size()}};
  } else {
    if (args.stage != "pretrain" && args.stage != "finetune") {
      throw ArgumentError("--stage must be pretrain or finetune");
    }
    if (args.stage == "finetune" && args.init.empty()) {
      throw ArgumentError("--stage finetune requires --init MODEL");
    }
    auto sc = suite::default_suite();
    nn::TrainConfig tc = args.stage == "pretrain" ? sc.gccm_pretrain : sc.gccm_finetune;
    tc.seed = seed;
    apply_train_overrides(cfg, tc);
    const int per_task = args.samples_per_task > 0
                             ? args.samples_per_task
                             : (args.stage == "pretrain" ? sc.gccm_pos_per_task
                                                         : sc.gccm_finetune_pos_per_task);
    const int n = per_task * static_cast<int>(tasks.size());
    const auto set = gccm::make_gccm_training_set(tasks, n, n, sc.corruption,
                                                  derive_seed(seed, 1));
    std::optional<gccm::GccmModel> init;
    if (!args.init.empty()) init = gccm::read_gccm(args.init);
    auto r = gccm::train_gccm(set, tc, init);
    r.model.training = {{"stage", args.stage},
                        {"tasks", tasks.size()},
                        {"samples", set.size()},
                        {"seed", seed},
                        {"heldout_accuracy", r.heldout_accuracy}};
    if (init) r.model.training["init"] = init->training;
    gccm::write_gccm(r.model, args.out);
    metrics = {{"stage", args.stage},
               {"epoch_loss", r.epoch_loss},
               {"train_accuracy", r.train_accuracy},
               {"heldout_accuracy", r.heldout_accuracy},
               {"n_train", r.n_train},
               {"n_heldout", r.n_heldout}};
    log("held-out accuracy {:.4f}", r.heldout_accuracy);
  }
  metrics["model_hash"] = file_hash(args.out);
  log("wrote {} (hash {})", args.out, metrics["model_hash"].get<std::string>());
  write_json(metrics, args.metrics.empty() ? fs::path(args.out).replace_extension(".metrics.json")
                                           : fs::path(args.metrics),
             1);
  return 0;
}

descriptors::DescriptorSet load_side(const std::string& path, const std::string& map,
                                     const std::optional<descriptors::FusionNet>& fusion) {
  auto ds = descriptors::read_descriptors(path);
  if (!map.empty()) {
    descriptors::attach_semantic(ds, descriptors::read_feature_map(map));
  }
  if (fusion) ds = descriptors::fuse(ds, *fusion);
  return ds;
}

int cmd_match(const Args& args, const RunConfig& cfg) {
  const auto p = pipeline_from(cfg);
  std::optional<descriptors::FusionNet> fusion;
  if (!args.fusion.empty()) fusion = read_fusion(args.fusion);
  const auto a = load_side(args.a, args.map_a, fusion);
  const auto b = load_side(args.b, args.map_b, fusion);
  auto mc = p.matcher;
  mc.local_only = args.local_only;
  const auto m = matcher::match_initial(a, b, mc);
  matcher::write_matches(m, args.out);
  log("{} initial matches", m.size());
  return 0;
}

int cmd_verify(const Args& args, const RunConfig& cfg) {
  auto p = pipeline_from(cfg);
  const auto model = gccm::read_gccm(args.model);
  const auto initial = matcher::read_matches(args.matches);
  const auto a = descriptors::read_descriptors(args.a);
  const auto b = descriptors::read_descriptors(args.b);
  if (initial.n_a != static_cast<int>(a.size()) || initial.n_b != static_cast<int>(b.size())) {
    throw FormatError("match file sizes do not agree with the descriptor files");
  }
  p.verify.image_extent_a = p.verify.image_extent_b = args.extent;
  json out;
  try {
    const auto r = gccm::verify(model, initial, a.keypoints, b.keypoints, p.verify);
    out = gccm::to_json(r, initial);
    out["fallback"] = false;
    log("kept {} of {} matches at tau {}", r.final.size(), initial.size(), r.tau);
  } catch (const InsufficientMatchesError& e) {
    log("warning: {}; returning the initial matches unfiltered", e.what());
    out = {{"tau", p.verify.tau}, {"fallback", true}, {"final", matcher::to_json(initial)}};
  }
  write_json(out, args.out);
  return 0;
}

std::string render(const eval::EvalReport& report, const std::string& format) {
  if (format == "json") return eval::to_json(report).dump(1) + "\n";
  if (format == "csv") return eval::format_csv(report);
  return eval::format_table(report);
}

int cmd_eval(const Args& args, const RunConfig& cfg) {
  const auto p = pipeline_from(cfg);
  auto tasks = load_tasks(args.tasks);
  std::optional<gccm::GccmModel> model;
  if (!args.model.empty()) model = gccm::read_gccm(args.model);
  std::vector<eval::MethodSpec> methods;
  if (args.methods.empty()) {
    for (const auto& m : eval::default_methods()) {
      if ((m.semantic && args.fusion.empty()) || (m.verifier == eval::Verifier::kGccm && !model)) {
        continue;
      }
      methods.push_back(m);
    }
  } else {
    for (const auto& name : args.methods) methods.push_back(eval::method_by_name(name));
  }
  if (!args.fusion.empty()) fusion::fuse_tasks(tasks, read_fusion(args.fusion));
  auto report = eval::benchmark(methods, tasks, p, model ? &*model : nullptr,
                                static_cast<int>(cfg.get_int("global.workers")));
  report.suite = "eval";
  report.seed = static_cast<std::uint64_t>(cfg.get_int("global.seed"));
  const std::string text = render(report, args.format);
  if (args.out.empty()) {
    std::cout << text;
  } else {
    write_text(text, args.out);
  }
  if (report.empty()) {
    log("no tasks to evaluate");
    return static_cast<int>(ExitCode::kData);
  }
  return 0;
}

int cmd_bench(const Args& args, const RunConfig& cfg) {
  auto sc = suite::suite_by_name(args.suite);
  sc.seed = static_cast<std::uint64_t>(cfg.get_int("global.seed"));
  // Pipeline settings given explicitly override the suite's tuned values.
  const auto p = pipeline_from(cfg);
  auto override_if = [&](const char* key, auto& field, auto value) {
    if (cfg.origin(key) != "default") field = value;
  };
  override_if("matcher.temperature", sc.pipeline.matcher.temperature, p.matcher.temperature);
  override_if("matcher.min_score", sc.pipeline.matcher.min_score, p.matcher.min_score);
  override_if("verify.tau", sc.pipeline.verify.tau, p.verify.tau);
  override_if("verify.subsets_per_match", sc.pipeline.verify.subsets_per_match,
              p.verify.subsets_per_match);
  override_if("verify.n_subsets", sc.pipeline.verify.n_subsets, p.verify.n_subsets);
  override_if("verify.min_coverage", sc.pipeline.verify.min_coverage, p.verify.min_coverage);
  override_if("ransac.iterations", sc.pipeline.ransac.iterations, p.ransac.iterations);
  override_if("ransac.inlier_threshold", sc.pipeline.ransac.inlier_threshold,
              p.ransac.inlier_threshold);
  override_if("ransac.min_inliers", sc.pipeline.ransac.min_inliers, p.ransac.min_inliers);
  override_if("ransac.model", sc.pipeline.ransac.model, p.ransac.model);
  override_if("tre.estimator", sc.pipeline.estimator, p.estimator);
  override_if("tre.lambda", sc.pipeline.tre_lambda, p.tre_lambda);
  sc.pipeline.verify.seed = sc.pipeline.ransac.seed = derive_seed(sc.seed, 9000);

  const auto run = suite::run_suite(sc, static_cast<int>(cfg.get_int("global.workers")),
                                    [](const std::string& s) { log("{}", s); });
  if (!args.out.empty()) {
    const fs::path out(args.out);
    fs::create_directories(out);
    write_json(eval::to_json(run.report), out / "report.json", 1);
    write_json(eval::timing_json(run.report), out / "timing.json", 1);
    write_text(eval::format_table(run.report), out / "table.txt");
    write_text(eval::format_csv(run.report), out / "report.csv");
    write_json(descriptors::to_json(run.models.fusion), out / "fusion.json");
    gccm::write_gccm(run.models.gccm_pretrain, out / "gccm_pretrain.json");
    gccm::write_gccm(run.models.gccm, out / "gccm.json");
    write_json(run.models.metrics, out / "training.json", 1);
    log("wrote report to {}", out.string());
  }
  std::cout << render(run.report, args.format);
  return run.report.empty() ? static_cast<int>(ExitCode::kData) : 0;
}

std::string version_text() {
  return fmt::format(
      "neurmatch {}\n"
      "formats: NMDS {}, NMFM {}, task {}, densenet {}, fusion {}, gccm {}, report {}",
      kVersion, descriptors::kDescriptorFormatVersion,
      descriptors::kFeatureMapFormatVersion, synth::kTaskFormatVersion,
      nn::kModelFormatVersion, descriptors::kFusionFormatVersion,
      gccm::kGccmFormatVersion, eval::kReportFormatVersion);
}

}  // namespace

int run(int argc, char** argv, char** envp) {
  CLI::App app{"Cross-modal neuron keypoint matching with learned geometric verification",
               "neurmatch"};
  app.set_version_flag("--version", version_text());
  app.require_subcommand(1);
  // Lets --config and --quiet follow the subcommand too; inherited below.
  app.fallthrough();
  Args args;
  Settings settings;
  app.add_option("--config", args.config, "Settings file ([section] key = value)")
      ->check(CLI::ExistingFile);
  app.add_flag("--quiet,-q", args.quiet, "Suppress progress messages on stderr");

  auto seeded = [&](CLI::App* sub) {
    settings.add(sub, "--seed", "global.seed", "Global seed");
  };
  auto matcher_flags = [&](CLI::App* sub) {
    settings.add(sub, "--temperature", "matcher.temperature", "Dual-softmax temperature");
    settings.add(sub, "--min-score", "matcher.min_score", "Minimum match score");
  };
  auto verify_flags = [&](CLI::App* sub) {
    settings.add(sub, "--tau", "verify.tau", "Pruning threshold on expected confidence");
    settings.add(sub, "--n-subsets", "verify.n_subsets", "Subsets to sample (0: budget)");
    settings.add(sub, "--subsets-per-match", "verify.subsets_per_match",
                 "Budget: subsets per match times |initial| / k");
    settings.add(sub, "--min-coverage", "verify.min_coverage", "Minimum subsets per match");
  };
  auto eval_flags = [&](CLI::App* sub) {
    matcher_flags(sub);
    verify_flags(sub);
    settings.add(sub, "--ransac-iterations", "ransac.iterations", "RANSAC iterations");
    settings.add(sub, "--ransac-threshold", "ransac.inlier_threshold",
                 "RANSAC inlier threshold (px)");
    settings.add(sub, "--ransac-model", "ransac.model", "similarity or affine");
    settings.add(sub, "--estimator", "tre.estimator", "TRE estimator: tps or similarity");
    settings.add(sub, "--tre-lambda", "tre.lambda", "TPS regularization for TRE");
    settings.add(sub, "--workers", "global.workers", "Task-level worker threads");
    sub->add_option("--format", args.format, "Output format")
        ->check(CLI::IsMember({"table", "json", "csv"}));
  };

  auto* gen = app.add_subcommand("gen", "Generate synthetic matching tasks");
  gen->require_subcommand(1);
  auto* gen_pre = gen->add_subcommand("pretrain", "Single-modality pairs under random warps");
  auto* gen_cross = gen->add_subcommand("crossmodal", "Cross-modal pairs with augmentation");
  for (auto* g : {gen_pre, gen_cross}) {
    seeded(g);
    g->add_option("--out", args.out, "Output directory")->required();
    g->add_option("--image-size", args.image_size, "Image side in pixels");
    g->add_option("--neurons", args.neurons, "Neurons per scene");
    g->add_option("--sigma", args.sigma,
                  "Displacement sigma as a fraction of the image size");
    g->add_flag("--geometry-only", args.geometry_only,
                "Skip rendering and descriptors (coordinates and labels only)");
  }
  gen_pre->add_option("--count", args.count, "Number of tasks")->required();
  gen_cross->add_option("--pairs", args.pairs, "Number of scenes")->required();
  gen_cross->add_option("--aug", args.aug, "Augmentations per scene");
  gen_cross->add_option("--rotations", args.rotations, "Rotation steps per scene");
  gen_cross->add_option("--contrasts", args.contrasts, "Contrast variants per rotation");
  gen_cross->add_option("--max-rotation", args.max_rotation, "Largest rotation (rad)");

  auto* train = app.add_subcommand("train", "Train the fusion net or the GCCM");
  train->require_subcommand(1);
  auto* train_fusion = train->add_subcommand("fusion", "Contrastive fusion-net training");
  auto* train_gccm = train->add_subcommand("gccm", "GCCM subset classifier training");
  for (auto* t : {train_fusion, train_gccm}) {
    seeded(t);
    t->add_option("--tasks", args.tasks, "Task directories or manifests")->required();
    t->add_option("--out", args.out, "Model file")->required();
    t->add_option("--init", args.init, "Start from this model");
    t->add_option("--metrics", args.metrics, "Metrics JSON (default: next to the model)");
    settings.add(t, "--epochs", "train.epochs", "Epochs");
    settings.add(t, "--lr", "train.learning_rate", "Learning rate");
    settings.add(t, "--batch", "train.batch_size", "Batch size");
  }
  train_fusion->add_option("--hidden", args.hidden, "Hidden width");
  train_fusion->add_option("--d-fused", args.d_fused, "Fused descriptor width");
  train_gccm->add_option("--stage", args.stage, "pretrain or finetune")->required();
  train_gccm->add_option("--samples-per-task", args.samples_per_task,
                         "Positives (and negatives) per task");

  auto* match = app.add_subcommand("match", "Initial matching of two descriptor files");
  match->add_option("--a", args.a, "A-side descriptors (NMDS)")->required();
  match->add_option("--b", args.b, "B-side descriptors (NMDS)")->required();
  match->add_option("--map-a", args.map_a, "A-side semantic feature map (NMFM)");
  match->add_option("--map-b", args.map_b, "B-side semantic feature map (NMFM)");
  match->add_option("--fusion", args.fusion, "Fusion model; fuses both sides first");
  match->add_flag("--local-only", args.local_only, "Match local descriptors only");
  match->add_option("--out", args.out, "Match file")->required();
  matcher_flags(match);

  auto* verify = app.add_subcommand("verify", "GCCM pruning of a match file");
  verify->add_option("--model", args.model, "GCCM model")->required();
  verify->add_option("--matches", args.matches, "Initial match file")->required();
  verify->add_option("--a", args.a, "A-side descriptors (NMDS)")->required();
  verify->add_option("--b", args.b, "B-side descriptors (NMDS)")->required();
  verify->add_option("--extent", args.extent, "Image side used for the fallback scale");
  verify->add_option("--out", args.out, "Verification result")->required();
  verify_flags(verify);
  seeded(verify);

  auto* evalc = app.add_subcommand("eval", "Evaluate methods on saved tasks");
  evalc->add_option("--tasks", args.tasks, "Task directories or manifests")->required();
  evalc->add_option("--model", args.model, "GCCM model");
  evalc->add_option("--fusion", args.fusion, "Fusion model");
  evalc->add_option("--methods", args.methods, "Methods (default: all runnable)");
  evalc->add_option("--out", args.out, "Write the report here instead of stdout");
  eval_flags(evalc);
  seeded(evalc);

  auto* bench = app.add_subcommand("bench", "Train, generate and evaluate a whole suite");
  bench->add_option("--suite", args.suite, "Suite name")
      ->check(CLI::IsMember({"default", "smoke"}));
  bench->add_option("--out", args.out, "Directory for report, timing and models");
  eval_flags(bench);
  seeded(bench);

  auto* inspect = app.add_subcommand("inspect", "Validate a file and dump it as JSON");
  inspect->add_option("file", args.file, "NMDS, NMFM, PNG or JSON file")->required();
  inspect->add_flag("--summary", args.summary, "Omit bulk arrays");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kUsage);
  }
  g_quiet = args.quiet;

  try {
    RunConfig cfg;
    cfg.load_env(envp);
    if (!args.config.empty()) cfg.load_file(args.config);
    settings.apply(cfg);

    if (gen_pre->parsed()) return cmd_gen("pretrain", args, cfg);
    if (gen_cross->parsed()) return cmd_gen("crossmodal", args, cfg);
    if (train_fusion->parsed()) return cmd_train("fusion", args, cfg);
    if (train_gccm->parsed()) return cmd_train("gccm", args, cfg);
    if (match->parsed()) return cmd_match(args, cfg);
    if (verify->parsed()) return cmd_verify(args, cfg);
    if (evalc->parsed()) return cmd_eval(args, cfg);
    if (bench->parsed()) return cmd_bench(args, cfg);
    if (inspect->parsed()) {
      std::cout << inspect_file(args.file, args.summary).dump(1) << '\n';
      return 0;
    }
  } catch (const Error& e) {
    fmt::print(stderr, "neurmatch: error: {}\n", e.what());
    return static_cast<int>(e.exit_code());
  } catch (const std::filesystem::filesystem_error& e) {
    fmt::print(stderr, "neurmatch: error: {}\n", e.what());
    return static_cast<int>(ExitCode::kData);
  }
  return static_cast<int>(ExitCode::kUsage);
}

int run(const std::vector<std::string>& args, char** envp) {
  std::vector<std::string> storage{"neurmatch"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : storage) argv.push_back(s.data());
  argv.push_back(nullptr);
  return run(static_cast<int>(storage.size()), argv.data(), envp);
}

}  // namespace neurmatch::cli
