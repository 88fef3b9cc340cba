#include "distillscope/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "distillscope/csv.hpp"
#include "distillscope/image_io.hpp"
#include "distillscope/rng.hpp"

namespace distillscope {
namespace fs = std::filesystem;

namespace {

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

void write_metrics(const fs::path& path, const std::vector<std::pair<std::string, std::string>>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  f << "metric,value\n";
  for (const auto& [k, v] : rows) f << k << ',' << v << '\n';
}

std::string fmt(double v) { return format_double(v); }

}  // namespace

std::string safe_file_name(const std::string& id) {
  std::string out = id;
  for (char& c : out)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.' || c == '+')) c = '_';
  return out;
}

LabeledData load_labeled_data(const DataConfig& data) {
  if (!fs::is_directory(data.root)) throw DataError("dataset directory not found: " + data.root.string());
  LabeledData out;
  if (data.format == DataFormat::Idx) {
    out.train = load_idx(data.root / data.train_images, data.root / data.train_labels);
    out.test = load_idx(data.root / data.test_images, data.root / data.test_labels);
  } else {
    FolderDataset ds = load_folder(data.root, true);
    out.train = std::move(ds.train);
    out.test = std::move(ds.test);
  }
  if (data.limit_train && out.train.size() > *data.limit_train) out.train.resize(*data.limit_train);
  if (data.limit_test && out.test.size() > *data.limit_test) out.test.resize(*data.limit_test);
  if (data.resize || data.normalization) {
    SplitSpec spec;
    spec.resize_to = data.resize;
    spec.normalization = data.normalization;
    for (auto* set : {&out.train, &out.test})
      for (auto& s : *set) s = preprocess(s, spec);
  }
  return out;
}

Split make_split(const DataConfig& data, const LabeledData& labeled) {
  if (data.format == DataFormat::Folder) return Split{labeled.train, labeled.test};
  SplitSpec spec;
  spec.mode = SplitMode::OneClass;
  spec.normal_class = data.normal_class;
  return make_one_class_split(labeled.train, labeled.test, spec);
}

std::array<std::size_t, 3> input_shape_of(std::span<const Sample> samples) {
  if (samples.empty()) throw DataError("no samples to infer the input shape from");
  const Shape& s = samples.front().image.shape();
  return {s[0], s[1], s[2]};
}

NetworkSpec configured_source_spec(const RunConfig& config, std::array<std::size_t, 3> input_shape) {
  NetworkSpec spec = default_source_spec(input_shape, config.source.block_widths, config.source.convs_per_block,
                                         config.source.num_classes);
  return select_critical_points(spec, critical_point_count(config.cloner.critical_points));
}

NetworkSpec configured_cloner_spec(const RunConfig& config, const NetworkSpec& source_spec) {
  return make_cloner_spec(source_spec, config.cloner.width_ratio);
}

Network<float> load_source(const RunConfig& config, std::array<std::size_t, 3> input_shape) {
  const fs::path path = config.source_weights();
  if (!fs::exists(path))
    throw Error("source weights not found at " + path.string() + " (run train-source or set source.weights)");
  return load_weights(configured_source_spec(config, input_shape), path);
}

// ---- train-source ----

SourceReport train_source_stage(const RunConfig& config, const LabeledData& labeled, const Logger& log) {
  if (config.data.format != DataFormat::Idx)
    throw DataError("folder datasets carry no class labels; provide pre-trained weights via source.weights");
  const NetworkSpec spec = configured_source_spec(config, input_shape_of(labeled.train));
  TrainConfig tc{config.source.epochs, config.source.learning_rate, config.source.batch_size, config.seed};
  SourceReport report;
  report.result = train_source_classifier(spec, labeled.train, labeled.test, tc, [&](const TrainEpoch& e) {
    say(log, "source epoch " + std::to_string(e.epoch) + ": loss " + fmt(e.loss) + ", train accuracy " +
                 fmt(e.train_accuracy));
  });
  report.weights = config.source_weights();
  fs::create_directories(report.weights.parent_path().empty() ? fs::path(".") : report.weights.parent_path());
  save_weights(report.result.network, report.weights);

  const fs::path dir = config.out / "source";
  write_resolved_config(config, dir / "config.json");
  std::ofstream h(dir / "history.csv", std::ios::binary | std::ios::trunc);
  h << "epoch,loss,train_accuracy\n";
  for (const auto& e : report.result.history) h << e.epoch << ',' << fmt(e.loss) << ',' << fmt(e.train_accuracy) << '\n';
  write_metrics(dir / "metrics.csv", {{"train_accuracy", fmt(report.result.train_accuracy)},
                                      {"test_accuracy", fmt(report.result.test_accuracy)},
                                      {"epochs", std::to_string(config.source.epochs)}});
  say(log, "source test accuracy " + fmt(report.result.test_accuracy) + "; weights at " + report.weights.string());
  return report;
}

SourceReport cmd_train_source(const RunConfig& config, const Logger& log) {
  return train_source_stage(config, load_labeled_data(config.data), log);
}

// ---- distill ----

DistillReport distill_stage(const RunConfig& config, const Network<float>& source, std::span<const Sample> train,
                            bool resume, bool reuse, const Logger& log) {
  DistillReport report;
  report.cloner_spec = configured_cloner_spec(config, source.spec);
  report.checkpoint = config.checkpoint_dir();
  const std::string hash = distill_config_hash(config);
  DistillConfig dc = config.distill_config();
  dc.checkpoint_dir = report.checkpoint;

  const bool have_checkpoint = fs::exists(report.checkpoint / "checkpoint.json");
  bool loaded = false;
  if ((resume || reuse) && have_checkpoint) {
    std::string stored;
    DistillState state = load_checkpoint(report.cloner_spec, report.checkpoint, &stored);
    if (stored != hash) {
      if (resume)
        throw ConfigError("checkpoint in " + report.checkpoint.string() +
                          " was written with a different configuration");
    } else {
      report.state = std::move(state);
      loaded = true;
      if (reuse && !resume && (report.state.converged || report.state.epoch >= dc.max_epochs)) {
        report.objective = dc.objective(report.state.lambda);
        report.reused = true;
        say(log, "reusing finished checkpoint " + report.checkpoint.string());
        return report;
      }
      say(log, "resuming from epoch " + std::to_string(report.state.epoch));
    }
  } else if (resume) {
    throw Error("nothing to resume: no checkpoint in " + report.checkpoint.string());
  }

  if (!loaded) {
    report.state = init_distill(source, report.cloner_spec, train, dc);
    save_checkpoint(report.state, report.checkpoint, hash);
    say(log, "lambda = " + fmt(report.state.lambda));
  }
  write_resolved_config(config, report.checkpoint / "config.json");
  run_distill(source, report.state, train, dc, [&](const DistillState& s) {
    const auto& e = s.history.back();
    say(log, "distill epoch " + std::to_string(e.epoch) + ": val " + fmt(e.value) + ", dir " + fmt(e.direction) +
                 ", total " + fmt(e.total) + (s.converged ? " (converged)" : ""));
  });
  save_checkpoint(report.state, report.checkpoint, hash);
  report.objective = dc.objective(report.state.lambda);
  return report;
}

DistillReport cmd_distill(const RunConfig& config, bool resume, const Logger& log) {
  const LabeledData labeled = load_labeled_data(config.data);
  const Split split = make_split(config.data, labeled);
  const Network<float> source = load_source(config, input_shape_of(split.train));
  return distill_stage(config, source, split.train, resume, false, log);
}

// ---- score / eval ----

void write_eval_report(const fs::path& path, const EvalResult& r) {
  write_metrics(path, {{"auroc", fmt(r.auroc)},
                       {"n_normal", std::to_string(r.n_normal)},
                       {"n_anomalous", std::to_string(r.n_anomalous)},
                       {"score_file", r.score_file.string()}});
}

ScoreReport score_stage(const RunConfig& config, const Network<float>& source, const DistillReport& distilled,
                        std::span<const Sample> test, const fs::path& score_file) {
  ScoreReport report;
  report.scores = score_dataset(source, distilled.state.cloner, distilled.objective, test, config.eval_batch_size);
  report.score_file = score_file;
  if (score_file.has_parent_path()) fs::create_directories(score_file.parent_path());
  write_score_csv(score_file, report.scores);
  bool pos = false, neg = false;
  for (const auto& s : report.scores)
    if (s.anomalous) (*s.anomalous ? pos : neg) = true;
  if (pos && neg) {
    report.eval = evaluate(report.scores);
    report.eval->score_file = score_file;
  }
  return report;
}

ScoreReport cmd_score(const RunConfig& config, const Logger& log) {
  const LabeledData labeled = load_labeled_data(config.data);
  const Split split = make_split(config.data, labeled);
  const Network<float> source = load_source(config, input_shape_of(split.train));
  DistillReport distilled;
  distilled.cloner_spec = configured_cloner_spec(config, source.spec);
  distilled.checkpoint = config.checkpoint_dir();
  std::string stored;
  distilled.state = load_checkpoint(distilled.cloner_spec, distilled.checkpoint, &stored);
  if (stored != distill_config_hash(config))
    throw ConfigError("checkpoint in " + distilled.checkpoint.string() + " was written with a different configuration");
  distilled.objective = config.distill_config().objective(distilled.state.lambda);
  ScoreReport report = score_stage(config, source, distilled, split.test, config.out / "scores.csv");
  write_resolved_config(config, config.out / "score_config.json");
  if (report.eval) {
    write_eval_report(config.out / "scores_eval.csv", *report.eval);
    say(log, "AUROC " + fmt(report.eval->auroc) + " over " + std::to_string(report.scores.size()) + " samples");
  }
  say(log, "scores written to " + report.score_file.string());
  return report;
}

EvalResult cmd_eval(const fs::path& score_file, const std::optional<fs::path>& report) {
  const auto scores = read_score_csv(score_file);
  EvalResult r = evaluate(scores);
  r.score_file = score_file;
  write_eval_report(report ? *report : score_file.parent_path() / (score_file.stem().string() + "_eval.csv"), r);
  return r;
}

// ---- localize ----

std::vector<Sample> localization_samples(const RunConfig& config, const Split& split) {
  std::vector<Sample> out;
  for (const auto& s : split.test)
    if (s.mask) out.push_back(s);
  if (out.empty()) {
    std::vector<Sample> normals;
    for (const auto& s : split.test)
      if (s.anomalous && !*s.anomalous) normals.push_back(s);
    const auto& d = config.localize.defects;
    out = make_square_defects(normals, d.count, d.size, d.value, mix_seed(config.seed, 0xdefec7));
  }
  if (config.localize.limit && out.size() > *config.localize.limit) out.resize(*config.localize.limit);
  return out;
}

LocalizeReport localize_stage(const RunConfig& config, const Network<float>& source, const DistillReport& distilled,
                              std::span<const Sample> samples, const fs::path& directory, const Logger& log) {
  LocalizeReport report;
  report.directory = directory;
  report.maps = localize_dataset(source, distilled.state.cloner, distilled.objective, samples, config.localize.params);
  fs::create_directories(directory / "heatmaps");
  if (config.localize.raw_csv) fs::create_directories(directory / "raw");
  bool pos = false, neg = false;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& m = report.maps[i];
    write_pgm(directory / "heatmaps" / (safe_file_name(m.sample_id) + ".pgm"), m.values);
    if (config.localize.raw_csv) {
      std::ofstream f(directory / "raw" / (safe_file_name(m.sample_id) + ".csv"), std::ios::binary | std::ios::trunc);
      const std::size_t w = m.values.dim(1);
      for (std::size_t p = 0; p < m.values.numel(); ++p) f << fmt(m.values[p]) << ((p + 1) % w ? ',' : '\n');
    }
    if (samples[i].mask) {
      report.masks.push_back(*samples[i].mask);
      for (float v : samples[i].mask->data()) (v > 0.5f ? pos : neg) = true;
    }
  }
  const auto& p = config.localize.params;
  std::vector<std::pair<std::string, std::string>> rows{
      {"method", to_string(p.method)},
      {"sigma", fmt(p.sigma)},
      {"filter", p.filter ? "true" : "false"},
      {"element", std::to_string(p.element.rows) + "x" + std::to_string(p.element.cols) + " ellipse"},
      {"smoothgrad_samples", std::to_string(p.smoothgrad_samples)},
      {"smoothgrad_noise", fmt(p.smoothgrad_noise)},
      {"normalize_per_image", config.localize.normalize_per_image ? "true" : "false"},
      {"n_images", std::to_string(samples.size())}};
  if (report.masks.size() == samples.size() && pos && neg) {
    report.pixel_auroc = pixel_auroc(report.maps, report.masks, config.localize.normalize_per_image);
    rows.emplace_back("pixel_auroc", fmt(*report.pixel_auroc));
    say(log, "pixel AUROC " + fmt(*report.pixel_auroc) + " over " + std::to_string(samples.size()) + " images");
  }
  write_metrics(directory / "report.csv", rows);
  return report;
}

LocalizeReport cmd_localize(const RunConfig& config, const Logger& log) {
  const LabeledData labeled = load_labeled_data(config.data);
  const Split split = make_split(config.data, labeled);
  const Network<float> source = load_source(config, input_shape_of(split.train));
  DistillReport distilled;
  distilled.cloner_spec = configured_cloner_spec(config, source.spec);
  std::string stored;
  distilled.state = load_checkpoint(distilled.cloner_spec, config.checkpoint_dir(), &stored);
  if (stored != distill_config_hash(config))
    throw ConfigError("checkpoint in " + config.checkpoint_dir().string() + " was written with a different configuration");
  distilled.objective = config.distill_config().objective(distilled.state.lambda);
  const fs::path dir = config.out / "localize";
  write_resolved_config(config, dir / "config.json");
  const auto samples = localization_samples(config, split);
  return localize_stage(config, source, distilled, samples, dir, log);
}

// ---- ablate ----

void write_ablation_table(const fs::path& path, AblationStudy study, const std::vector<AblationRow>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  f << "study,variant,metric,mean,per_seed\n";
  for (const auto& r : rows) {
    f << to_string(study) << ',' << r.variant << ',' << r.metric << ',' << fmt(r.mean) << ',';
    for (std::size_t i = 0; i < r.per_seed.size(); ++i) f << (i ? ";" : "") << fmt(r.per_seed[i]);
    f << '\n';
  }
}

AblationReport cmd_ablate(const RunConfig& config, const Logger& log) {
  const LabeledData labeled = load_labeled_data(config.data);
  const Split split = make_split(config.data, labeled);
  const auto shape = input_shape_of(split.train);
  const AblationStudy study = config.ablation.study;
  const fs::path root = config.out / "ablation" / to_string(study);

  struct Variant {
    std::string name;
    std::function<void(RunConfig&)> apply;
  };
  std::vector<Variant> variants;
  switch (study) {
    case AblationStudy::Layers:
      for (auto cps : {CriticalPoints::Last, CriticalPoints::Last2, CriticalPoints::Last4})
        variants.push_back({to_string(cps), [cps](RunConfig& c) { c.cloner.critical_points = cps; }});
      break;
    case AblationStudy::Width:
      for (double r : {1.0, 0.5})
        variants.push_back({"width_" + fmt(r), [r](RunConfig& c) { c.cloner.width_ratio = r; }});
      break;
    case AblationStudy::Loss:
      for (auto [name, kind] : {std::pair{"val", LossKind::Value}, std::pair{"dir", LossKind::Direction},
                                std::pair{"total", LossKind::Total}})
        variants.push_back({name, [kind](RunConfig& c) { c.distill.loss = kind; }});
      break;
    case AblationStudy::Interpretability:
      variants.push_back({"base", [](RunConfig&) {}});
      break;
  }

  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    std::map<std::string, AblationRow> by_metric;  // interpretability yields several rows per variant
    std::vector<std::string> order;
    try {
      for (std::uint64_t seed : config.ablation.seeds) {
        RunConfig rc = config;
        v.apply(rc);
        rc.seed = seed;
        rc.localize.params.seed = seed;
        rc.out = root / v.name / ("seed" + std::to_string(seed));
        rc.source.weights = config.source_weights();
        say(log, "[" + v.name + ", seed " + std::to_string(seed) + "]");
        const Network<float> source = load_source(rc, shape);
        const DistillReport d = distill_stage(rc, source, split.train, false, true, log);
        auto add = [&](const std::string& variant, const std::string& metric, double value) {
          const std::string key = variant + "|" + metric;
          if (!by_metric.count(key)) {
            by_metric[key] = AblationRow{variant, metric, {}, 0.0};
            order.push_back(key);
          }
          by_metric[key].per_seed.push_back(value);
        };
        if (study != AblationStudy::Interpretability) {
          const ScoreReport s = score_stage(rc, source, d, split.test, rc.out / "scores.csv");
          if (!s.eval) throw UndefinedMetricError("test split lacks one of the two labels");
          add(v.name, "auroc", s.eval->auroc);
          say(log, "  AUROC " + fmt(s.eval->auroc));
        } else {
          const auto samples = localization_samples(rc, split);
          for (auto method :
               {AttributionMethod::Gradients, AttributionMethod::SmoothGrad, AttributionMethod::GuidedBackprop}) {
            RunConfig lc = rc;
            lc.localize.params.method = method;
            lc.localize.params.filter = true;
            const LocalizeReport lr =
                localize_stage(lc, source, d, samples, rc.out / ("localize_" + to_string(method)), {});
            if (lr.masks.size() != samples.size()) throw DataError("localization samples lack masks");
            const bool norm = rc.localize.normalize_per_image;
            add(to_string(method) + "_raw", "pixel_auroc", pixel_auroc(lr.maps, lr.masks, norm, true));
            add(to_string(method) + "_filtered", "pixel_auroc", pixel_auroc(lr.maps, lr.masks, norm, false));
          }
        }
      }
    } catch (const std::exception& e) {
      throw Error("ablation variant '" + v.name + "' failed: " + e.what());
    }
    for (const auto& key : order) {
      AblationRow r = by_metric[key];
      r.mean = std::accumulate(r.per_seed.begin(), r.per_seed.end(), 0.0) / static_cast<double>(r.per_seed.size());
      rows.push_back(std::move(r));
    }
  }
  AblationReport report{rows, config.out / "ablation" / (to_string(study) + ".csv")};
  write_ablation_table(report.table, study, rows);
  write_resolved_config(config, config.out / "ablation" / (to_string(study) + "_config.json"));
  return report;
}

}  // namespace distillscope
