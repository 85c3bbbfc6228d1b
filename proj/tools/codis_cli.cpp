#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "codis/data/pipeline.hpp"
#include "codis/data/synthetic.hpp"
#include "codis/eval/experiment.hpp"
#include "codis/model/checkpoint.hpp"
#include "codis/numcore/tensor.hpp"
#include "codis/trainer/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace codis;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> eval_mode;
  std::optional<std::size_t> seeds;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> threads;
  std::optional<std::string> dataset;
  std::optional<std::string> variant;
};

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file " + path);
  return json::parse(in, nullptr, true, true);
}

// "a.b.c=value": value is parsed as JSON when possible, otherwise taken as a string.
void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key.path=value, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw UsageError("empty key in override '" + assignment + "'");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      break;
    }
    if (!node->contains(key) || !(*node)[key].is_object()) (*node)[key] = json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

json raw_config(const CommonOptions& o, const json& fallback = json::object()) {
  json j = o.config_path.empty() ? fallback : read_json_file(o.config_path);
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  for (const auto& s : o.overrides) apply_override(j, s);
  if (o.seed) j["train"]["seed"] = *o.seed;
  if (o.out_dir) j["out_dir"] = *o.out_dir;
  if (o.eval_mode) j["eval"]["mode"] = *o.eval_mode;
  if (o.seeds) j["train"]["seeds"] = *o.seeds;
  if (o.epochs) j["train"]["max_epochs"] = *o.epochs;
  if (o.threads) j["train"]["threads"] = *o.threads;
  if (o.dataset) j["dataset"] = *o.dataset;
  if (o.variant) j["variant"] = *o.variant;
  return j;
}

eval::ExperimentConfig experiment_config(const CommonOptions& o, const json& fallback = json::object()) {
  return eval::experiment_config_from_json(raw_config(o, fallback));
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void write_log_jsonl(const fs::path& path, const data::InteractionLog& log) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& [user, history] : log.histories) {
    for (const auto& x : history) {
      out << json{{"user", x.user}, {"item", x.item}, {"domain", data::domain_name(x.domain)}, {"timestamp", x.timestamp}}
                 .dump()
          << '\n';
    }
  }
}

json log_stats(const data::InteractionLog& log) {
  return {{"users", log.num_users()},
          {"items_A", log.catalog_a.size()},
          {"items_B", log.catalog_b.size()},
          {"interactions_A", log.num_interactions(data::Domain::A)},
          {"interactions_B", log.num_interactions(data::Domain::B)}};
}

json cmd_prep(const CommonOptions& o) {
  const auto config = experiment_config(o);
  if (config.dataset.empty()) throw UsageError("prep needs an input file (--dataset or \"dataset\" in the config)");
  const auto ingested = data::ingest_file(config.dataset);
  const auto log = config.filter ? data::preprocess(ingested.log, config.preprocess) : ingested.log;
  if (log.histories.empty()) throw data::EmptyDatasetError();
  fs::create_directories(config.out_dir);
  write_log_jsonl(fs::path(config.out_dir) / "log.jsonl", log);
  json manifest = {{"format", "codis-log"},
                   {"version", 1},
                   {"source", config.dataset},
                   {"rows_read", ingested.rows_read},
                   {"duplicates", ingested.duplicates},
                   {"bad_rows", ingested.errors.size()},
                   {"raw", log_stats(ingested.log)},
                   {"preprocessed", log_stats(log)},
                   {"config_hash", eval::config_hash(config)}};
  write_json(fs::path(config.out_dir) / "manifest.json", manifest);
  return manifest;
}

json cmd_synth(const CommonOptions& o) {
  auto config = experiment_config(o);
  if (o.seed) config.synthetic.seed = *o.seed;
  const auto dataset = data::synthesize_causal(config.synthetic);
  fs::create_directories(config.out_dir);
  std::ofstream csv(fs::path(config.out_dir) / "synthetic.csv");
  csv << "user,item,domain,timestamp\n";
  for (const auto& [user, history] : dataset.log.histories) {
    for (const auto& x : history) {
      csv << x.user << ',' << x.item << ',' << data::domain_name(x.domain) << ',' << x.timestamp << '\n';
    }
  }
  write_json(fs::path(config.out_dir) / "truth.json", data::to_json(dataset.truth));
  return {{"interactions", dataset.log.num_interactions()}, {"users", dataset.log.num_users()}};
}

json cmd_train(const CommonOptions& o, const std::string& resume_path) {
  const auto config = experiment_config(o);
  const auto data = eval::load_data(config);
  auto m = config.model;
  m.num_items = data.vocab.size();
  auto train = config.train;
  eval::apply_variant(config.variant, m, train.weights);
  m.validate();
  std::optional<model::Checkpoint> resume;
  if (!resume_path.empty()) resume = model::read_checkpoint(resume_path);
  const auto splits = config.overlap_ratio > 0.0
                          ? eval::mask_splits(data.splits, data.vocab, config.overlap_ratio, train.seed)
                          : data.splits;

  fs::create_directories(config.out_dir);
  const std::string suffix = "_seed" + std::to_string(train.seed);
  std::ofstream log(fs::path(config.out_dir) / ("train_log" + suffix + ".jsonl"), resume ? std::ios::app : std::ios::trunc);
  const auto result = trainer::train(m, train, data.vocab, splits, train.seed, &log, resume ? &*resume : nullptr);

  auto ckp = trainer::make_training_checkpoint(result, train.seed, train);
  ckp.meta["config_hash"] = eval::config_hash(config);
  ckp.meta["experiment"] = eval::to_json(config);
  const auto ckp_path = fs::path(config.out_dir) / ("model" + suffix + ".ckpt");
  model::write_checkpoint(ckp_path.string(), ckp);

  eval::EvalOptions options = config.eval;
  options.seed = train.seed;
  const auto report = eval::evaluate(*result.model, splits, data.vocab, options);
  json metrics = {{"config_hash", eval::config_hash(config)},
                  {"seed", train.seed},
                  {"variant", eval::to_string(config.variant)},
                  {"eval_mode", eval::to_string(options.mode)},
                  {"best_epoch", result.best_epoch},
                  {"epochs_run", result.epochs_run},
                  {"best_val_mrr", result.best_val_mrr},
                  {"test", eval::to_json(report)},
                  {"popularity", eval::to_json(eval::evaluate_popularity(splits, data.vocab, options))}};
  write_json(fs::path(config.out_dir) / ("metrics" + suffix + ".json"), metrics);
  metrics["checkpoint"] = ckp_path.string();
  return metrics;
}

struct LoadedRun {
  eval::ExperimentConfig config;
  eval::PreparedData data;
  std::unique_ptr<model::Codis> model;
  std::uint64_t seed = 0;
};

LoadedRun load_run(const CommonOptions& o, const std::string& checkpoint_path) {
  if (checkpoint_path.empty()) throw UsageError("--checkpoint is required");
  const auto ckp = model::read_checkpoint(checkpoint_path);
  LoadedRun run;
  run.config = experiment_config(o, ckp.meta.value("experiment", json::object()));
  run.data = eval::load_data(run.config);
  run.model = model::load_model(ckp);
  run.seed = o.seed ? *o.seed : ckp.meta.value("seed", std::uint64_t{0});
  if (run.model->config().num_items != run.data.vocab.size()) {
    throw std::invalid_argument("checkpoint item table (" + std::to_string(run.model->config().num_items) +
                                ") does not match the dataset vocabulary (" + std::to_string(run.data.vocab.size()) +
                                ")");
  }
  return run;
}

json cmd_eval(const CommonOptions& o, const std::string& checkpoint_path) {
  const auto run = load_run(o, checkpoint_path);
  eval::EvalOptions options = run.config.eval;
  options.seed = run.seed;
  const auto report = eval::evaluate(*run.model, run.data.splits, run.data.vocab, options);
  json metrics = {{"config_hash", eval::config_hash(run.config)},
                  {"seed", run.seed},
                  {"checkpoint", checkpoint_path},
                  {"eval_mode", eval::to_string(options.mode)},
                  {"test", eval::to_json(report)},
                  {"popularity", eval::to_json(eval::evaluate_popularity(run.data.splits, run.data.vocab, options))}};
  fs::create_directories(run.config.out_dir);
  write_json(fs::path(run.config.out_dir) / "eval_metrics.json", metrics);
  return metrics;
}

json cmd_ablate(const CommonOptions& o, const std::string& variants) {
  const auto base = experiment_config(o);
  const auto data = eval::load_data(base);
  std::vector<eval::AblationVariant> list;
  if (variants.empty()) {
    list.assign(std::begin(eval::kAllVariants), std::end(eval::kAllVariants));
  } else {
    for (const auto& v : split_list(variants)) list.push_back(eval::variant_from_string(v));
  }
  json out = json::object();
  fs::create_directories(base.out_dir);
  std::ofstream csv(fs::path(base.out_dir) / "ablation.csv");
  csv << "config_hash,variant,domain,metric,mean,std\n";
  for (auto v : list) {
    auto config = base;
    config.variant = v;
    config.out_dir = (fs::path(base.out_dir) / eval::to_string(v)).string();
    const auto result = eval::run_experiment(config, data, true);
    out[eval::to_string(v)] = result.metrics["summary"];
    for (const auto& [group, metrics] : result.seeds.summary) {
      for (const auto& [name, s] : metrics) {
        csv << eval::config_hash(config) << ',' << eval::to_string(v) << ',' << group << ',' << name << ','
            << s.mean << ',' << s.std << '\n';
      }
    }
  }
  return out;
}

json sweep_rows_json(const std::vector<eval::SweepRow>& rows) {
  json arr = json::array();
  for (const auto& r : rows) {
    arr.push_back({{"key", r.key}, {"seed", r.seed}, {"masked_users", r.masked_users}, {"test", eval::to_json(r.report)}});
  }
  return arr;
}

json cmd_sweep_overlap(const CommonOptions& o, const std::string& ratios) {
  std::vector<double> values;
  for (const auto& s : split_list(ratios)) values.push_back(std::stod(s));
  return sweep_rows_json(eval::run_overlap_sweep(experiment_config(o), values));
}

json cmd_sweep_noise(const CommonOptions& o, const std::string& ks) {
  std::vector<std::size_t> values;
  for (const auto& s : split_list(ks)) values.push_back(std::stoul(s));
  json arr = json::array();
  for (const auto& r : eval::run_noise_sweep(experiment_config(o), values)) {
    arr.push_back({{"k", r.k}, {"test", eval::to_json(r.report)}, {"degradation", r.degradation}});
  }
  return arr;
}

json cmd_sweep_experts(const CommonOptions& o, const std::string& counts) {
  std::vector<std::size_t> values;
  for (const auto& s : split_list(counts)) values.push_back(std::stoul(s));
  return sweep_rows_json(eval::run_expert_sweep(experiment_config(o), values));
}

json cmd_export(const CommonOptions& o, const std::string& checkpoint_path) {
  const auto run = load_run(o, checkpoint_path);
  const auto rows = eval::export_representations(*run.model, run.data.splits, run.config.out_dir);
  return {{"representation_rows", rows}, {"out_dir", run.config.out_dir}};
}

json error_json(const std::string& type, const std::string& message) {
  return {{"status", "error"}, {"error", type}, {"message", message}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CoDiS cross-domain sequential recommender"};
  app.require_subcommand(1);
  CommonOptions common;
  std::string checkpoint, resume, variants, ratios = "0,0.2,0.4,0.6,0.8", ks = "1,2,3", counts = "3,4,5,6,7";

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", common.config_path, "JSON configuration file");
    cmd->add_option("--set", common.overrides, "override a config entry, key.path=value");
    cmd->add_option("--seed", common.seed, "base random seed");
    cmd->add_option("--out-dir", common.out_dir, "output directory");
    cmd->add_option("--eval-mode", common.eval_mode, "full or sampled");
    cmd->add_option("--seeds", common.seeds, "number of seeds");
    cmd->add_option("--epochs", common.epochs, "maximum epochs");
    cmd->add_option("--threads", common.threads, "concurrent seed runs");
    cmd->add_option("--dataset", common.dataset, "interaction file; omit for synthetic data");
    cmd->add_option("--variant", common.variant, "ablation variant");
  };

  auto* prep = app.add_subcommand("prep", "ingest and preprocess an interaction file");
  auto* synth = app.add_subcommand("synth", "write a synthetic causal dataset and its ground truth");
  auto* train = app.add_subcommand("train", "train one seed and write checkpoint, log and metrics");
  auto* evalc = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  auto* ablate = app.add_subcommand("ablate", "train and evaluate ablation variants");
  auto* sweep_overlap = app.add_subcommand("sweep-overlap", "vary the share of users with one domain hidden");
  auto* sweep_noise = app.add_subcommand("sweep-noise", "inject random items into test inputs");
  auto* sweep_experts = app.add_subcommand("sweep-experts", "vary the number of experts");
  auto* export_reprs = app.add_subcommand("export-reprs", "dump representations and router weights");
  for (auto* cmd : {prep, synth, train, evalc, ablate, sweep_overlap, sweep_noise, sweep_experts, export_reprs}) {
    add_common(cmd);
  }
  train->add_option("--resume", resume, "continue from a training checkpoint");
  evalc->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  export_reprs->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  ablate->add_option("--variants", variants, "comma-separated variants (default all)");
  sweep_overlap->add_option("--ratios", ratios, "comma-separated ratios in [0, 0.8]");
  sweep_noise->add_option("--k", ks, "comma-separated noise counts");
  sweep_experts->add_option("--counts", counts, "comma-separated expert counts");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cout << error_json("usage", e.what()).dump() << std::endl;
    return 2;
  }

  try {
    json result;
    const std::string verb = app.get_subcommands().front()->get_name();
    if (verb == "prep") result = cmd_prep(common);
    else if (verb == "synth") result = cmd_synth(common);
    else if (verb == "train") result = cmd_train(common, resume);
    else if (verb == "eval") result = cmd_eval(common, checkpoint);
    else if (verb == "ablate") result = cmd_ablate(common, variants);
    else if (verb == "sweep-overlap") result = cmd_sweep_overlap(common, ratios);
    else if (verb == "sweep-noise") result = cmd_sweep_noise(common, ks);
    else if (verb == "sweep-experts") result = cmd_sweep_experts(common, counts);
    else if (verb == "export-reprs") result = cmd_export(common, checkpoint);
    std::cout << json{{"status", "ok"}, {"verb", verb}, {"result", result}}.dump() << std::endl;
    return 0;
  } catch (const UsageError& e) {
    std::cout << error_json("usage", e.what()).dump() << std::endl;
    return 2;
  } catch (const data::IngestError& e) {
    auto j = error_json("ingest", e.what());
    for (const auto& r : e.errors) j["rows"].push_back({{"line", r.line}, {"message", r.message}});
    std::cout << j.dump() << std::endl;
  } catch (const data::EmptyDatasetError& e) {
    std::cout << error_json("empty_dataset", e.what()).dump() << std::endl;
  } catch (const trainer::DivergenceError& e) {
    std::cout << error_json("divergence", e.what()).dump() << std::endl;
  } catch (const model::CheckpointError& e) {
    std::cout << error_json("checkpoint", e.what()).dump() << std::endl;
  } catch (const DimensionError& e) {
    std::cout << error_json("dimension", e.what()).dump() << std::endl;
  } catch (const json::exception& e) {
    std::cout << error_json("config", e.what()).dump() << std::endl;
  } catch (const std::invalid_argument& e) {
    std::cout << error_json("invalid_argument", e.what()).dump() << std::endl;
  } catch (const std::exception& e) {
    std::cout << error_json("runtime", e.what()).dump() << std::endl;
  }
  return 1;
}
