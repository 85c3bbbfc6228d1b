#include "codis/eval/experiment.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "codis/data/perturb.hpp"
#include "codis/model/checkpoint.hpp"

namespace codis::eval {

namespace fs = std::filesystem;
using data::Domain;
using data::SplitTriple;

PreparedData prepare(const data::InteractionLog& raw, std::size_t max_len, const data::PreprocessOptions& options,
                     bool filter) {
  PreparedData out;
  out.log = filter ? data::preprocess(raw, options) : raw;
  if (out.log.histories.empty()) throw data::EmptyDatasetError();
  out.vocab = data::Vocabulary(out.log);
  out.triples = data::build_aligned_sequences(out.log, out.vocab, max_len);
  for (const auto& [user, history] : out.log.histories) out.users.push_back(user);
  out.splits = data::leave_one_out_split(out.triples, out.users, out.vocab);
  return out;
}

AblationVariant variant_from_string(const std::string& s) {
  for (AblationVariant v : kAllVariants) {
    if (to_string(v) == s) return v;
  }
  throw std::invalid_argument("unknown ablation variant '" + s +
                              "' (expected full, no_AL, no_VD, no_AL_VD, no_CAR, no_EIS or backbone)");
}

std::string to_string(AblationVariant v) {
  switch (v) {
    case AblationVariant::Full: return "full";
    case AblationVariant::NoAL: return "no_AL";
    case AblationVariant::NoVD: return "no_VD";
    case AblationVariant::NoALVD: return "no_AL_VD";
    case AblationVariant::NoCAR: return "no_CAR";
    case AblationVariant::NoEIS: return "no_EIS";
    case AblationVariant::Backbone: return "backbone";
  }
  return "?";
}

void apply_variant(AblationVariant v, model::ModelConfig& m, objectives::LossWeights& w) {
  auto drop_al = [&] {
    m.use_discriminator = false;
    w.lambda3 = 0.0;
  };
  auto drop_vd = [&] {
    m.use_variational = false;
    w.lambda2 = 0.0;
  };
  auto drop_car = [&] {
    m.use_router = false;
    w.lambda1 = 0.0;
  };
  switch (v) {
    case AblationVariant::Full: break;
    case AblationVariant::NoAL: drop_al(); break;
    case AblationVariant::NoVD: drop_vd(); break;
    case AblationVariant::NoALVD:
      drop_al();
      drop_vd();
      break;
    case AblationVariant::NoCAR: drop_car(); break;
    case AblationVariant::NoEIS: m.expert_isolation = false; break;
    case AblationVariant::Backbone:
      drop_al();
      drop_vd();
      drop_car();
      m.expert_isolation = false;
      break;
  }
}

namespace {

QueryPosition query_from_string(const std::string& s) {
  if (s == "last_domain_slot") return QueryPosition::LastDomainSlot;
  if (s == "last_slot") return QueryPosition::LastSlot;
  throw std::invalid_argument("unknown query position '" + s + "'");
}

std::string to_string(QueryPosition q) { return q == QueryPosition::LastDomainSlot ? "last_domain_slot" : "last_slot"; }

}  // namespace

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.dataset = j.value("dataset", c.dataset);
  if (j.contains("synthetic")) c.synthetic = data::synthetic_spec_from_json(j.at("synthetic"));
  if (j.contains("preprocess")) {
    const auto& p = j.at("preprocess");
    c.preprocess.min_item_count = p.value("min_item_count", c.preprocess.min_item_count);
    c.preprocess.max_history = p.value("max_history", c.preprocess.max_history);
  }
  c.filter = j.value("filter", c.filter);
  if (j.contains("model")) {
    auto m = j.at("model");
    if (!m.contains("num_items")) m["num_items"] = 2;  // replaced once the vocabulary is known
    c.model = model::model_config_from_json(m);
  }
  if (j.contains("train")) c.train = trainer::train_config_from_json(j.at("train"));
  c.variant = variant_from_string(j.value("variant", std::string("full")));
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    c.eval.mode = eval_mode_from_string(e.value("mode", std::string("full")));
    c.eval.sampled_negatives = e.value("sampled_negatives", c.eval.sampled_negatives);
    c.eval.filter_history = e.value("filter_history", c.eval.filter_history);
    c.eval.query = query_from_string(e.value("query", std::string("last_domain_slot")));
  }
  c.overlap_ratio = j.value("overlap_ratio", c.overlap_ratio);
  if (c.overlap_ratio < 0.0 || c.overlap_ratio > 0.8 + 1e-12) {
    throw std::invalid_argument("overlap_ratio must lie in [0, 0.8]");
  }
  c.out_dir = j.value("out_dir", c.out_dir);
  return c;
}

nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"dataset", c.dataset},
          {"synthetic", data::to_json(c.synthetic)},
          {"preprocess", {{"min_item_count", c.preprocess.min_item_count}, {"max_history", c.preprocess.max_history}}},
          {"filter", c.filter},
          {"model", model::to_json(c.model)},
          {"train", trainer::to_json(c.train)},
          {"variant", to_string(c.variant)},
          {"eval",
           {{"mode", eval::to_string(c.eval.mode)},
            {"sampled_negatives", c.eval.sampled_negatives},
            {"filter_history", c.eval.filter_history},
            {"query", to_string(c.eval.query)}}},
          {"overlap_ratio", c.overlap_ratio},
          {"out_dir", c.out_dir}};
}

std::string config_hash(const ExperimentConfig& c) {
  auto j = to_json(c);
  j.erase("out_dir");
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

PreparedData load_data(const ExperimentConfig& c) {
  if (c.dataset.empty()) {
    return prepare(data::synthesize_causal(c.synthetic).log, c.model.max_len, c.preprocess, c.filter);
  }
  if (!fs::exists(c.dataset)) throw std::invalid_argument("dataset not found: " + c.dataset);
  return prepare(data::ingest_file(c.dataset).log, c.model.max_len, c.preprocess, c.filter);
}

std::vector<SplitTriple> mask_splits(const std::vector<SplitTriple>& splits, const data::Vocabulary& vocab,
                                     double ratio, std::uint64_t seed, std::size_t* masked) {
  std::vector<data::UserId> users;
  for (const auto& s : splits) users.push_back(s.user);
  Rng rng(seed);
  const auto mask = data::choose_overlap_mask(users, ratio, rng);
  if (masked) *masked = mask.size();
  return data::apply_mask(splits, mask, vocab);
}

namespace {

model::ModelConfig resolved_model(const ExperimentConfig& config, const PreparedData& data,
                                  objectives::LossWeights& weights) {
  model::ModelConfig m = config.model;
  m.num_items = data.vocab.size();
  weights = config.train.weights;
  apply_variant(config.variant, m, weights);
  m.validate();
  return m;
}

const char* kMetricNames[] = {"hr@5", "hr@10", "ndcg@5", "ndcg@10", "mrr"};

std::vector<double> metric_values(const DomainMetrics& m) { return {m.hr5, m.hr10, m.ndcg5, m.ndcg10, m.mrr}; }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string report_csv_header() { return "domain,hr@5,hr@10,ndcg@5,ndcg@10,mrr,users"; }

void append_report_csv(std::ostream& os, const std::string& prefix, const MetricsReport& r) {
  for (Domain d : {Domain::A, Domain::B}) {
    os << prefix << data::domain_name(d);
    if (r.of(d)) {
      for (double v : metric_values(*r.of(d))) os << ',' << v;
      os << ',' << r.of(d)->users;
    } else {
      os << ",,,,,,0";
    }
    os << '\n';
  }
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config, const PreparedData& data, bool write_files) {
  ExperimentResult result;
  trainer::TrainConfig train = config.train;
  const model::ModelConfig m = resolved_model(config, data, train.weights);
  const std::string hash = config_hash(config);

  const auto splits = config.overlap_ratio > 0.0
                          ? mask_splits(data.splits, data.vocab, config.overlap_ratio, train.seed)
                          : data.splits;

  std::vector<std::unique_ptr<std::ofstream>> logs;
  std::function<std::ostream*(std::uint64_t)> log_for_seed;
  if (write_files) {
    fs::create_directories(config.out_dir);
    for (std::size_t i = 0; i < train.seeds; ++i) {
      const auto path = fs::path(config.out_dir) / ("train_log_seed" + std::to_string(train.seed + i) + ".jsonl");
      logs.push_back(std::make_unique<std::ofstream>(path));
    }
    log_for_seed = [&logs, &train](std::uint64_t seed) -> std::ostream* { return logs[seed - train.seed].get(); };
  }
  result.seeds = trainer::run_seeds(m, train, data.vocab, splits, config.eval, train.seeds, log_for_seed);
  EvalOptions pop_options = config.eval;
  pop_options.seed = train.seed;
  result.popularity = evaluate_popularity(splits, data.vocab, pop_options);

  nlohmann::json j;
  j["config_hash"] = hash;
  j["config"] = to_json(config);
  j["variant"] = to_string(config.variant);
  j["eval_mode"] = eval::to_string(config.eval.mode);
  j["seeds"] = nlohmann::json::array();
  for (const auto& run : result.seeds.runs) {
    auto entry = to_json(run.test);
    entry["seed"] = run.seed;
    entry["best_epoch"] = run.best_epoch;
    entry["epochs_run"] = run.epochs_run;
    entry["best_val_mrr"] = run.best_val_mrr;
    j["seeds"].push_back(entry);
  }
  for (const auto& [group, metrics] : result.seeds.summary) {
    for (const auto& [name, s] : metrics) {
      j["summary"][group][name] = {{"mean", s.mean}, {"std", s.std}, {"formatted", trainer::format_summary(s)}};
    }
  }
  j["popularity"] = to_json(result.popularity);
  j["trainable_groups"] = model::Codis(m, 0).parameters().groups();
  result.metrics = j;

  if (write_files) {
    write_text(fs::path(config.out_dir) / "metrics.json", j.dump(2) + "\n");
    std::ostringstream csv;
    csv << std::setprecision(10) << "config_hash,variant,seed," << report_csv_header() << '\n';
    for (const auto& run : result.seeds.runs) {
      append_report_csv(csv, hash + "," + to_string(config.variant) + "," + std::to_string(run.seed) + ",", run.test);
    }
    append_report_csv(csv, hash + ",popularity," + std::to_string(train.seed) + ",", result.popularity);
    write_text(fs::path(config.out_dir) / "metrics.csv", csv.str());
    for (const auto& run : result.seeds.runs) {
      auto ckp = model::make_checkpoint(*run.model, run.seed);
      ckp.meta["config_hash"] = hash;
      ckp.meta["experiment"] = to_json(config);
      model::write_checkpoint((fs::path(config.out_dir) / ("model_seed" + std::to_string(run.seed) + ".ckpt")).string(),
                              ckp);
    }
  }
  return result;
}

ExperimentResult run_experiment(const ExperimentConfig& config, bool write_files) {
  return run_experiment(config, load_data(config), write_files);
}

namespace {

std::string format_key(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

void write_sweep_csv(const ExperimentConfig& config, const std::string& name, const std::string& key_name,
                     const std::vector<SweepRow>& rows, bool with_masked) {
  fs::create_directories(config.out_dir);
  std::ostringstream csv;
  csv << std::setprecision(10) << "config_hash,seed," << key_name << (with_masked ? ",masked_users," : ",")
      << report_csv_header() << '\n';
  const std::string hash = config_hash(config);
  for (const auto& r : rows) {
    std::string prefix = hash + "," + std::to_string(r.seed) + "," + r.key + ",";
    if (with_masked) prefix += std::to_string(r.masked_users) + ",";
    append_report_csv(csv, prefix, r.report);
  }
  write_text(fs::path(config.out_dir) / name, csv.str());
}

}  // namespace

std::vector<SweepRow> run_overlap_sweep(const ExperimentConfig& config, const std::vector<double>& ratios,
                                        bool write_files) {
  const auto data = load_data(config);
  trainer::TrainConfig train = config.train;
  const auto m = resolved_model(config, data, train.weights);
  std::vector<SweepRow> rows;
  for (double ratio : ratios) {
    if (ratio < 0.0 || ratio > 0.8 + 1e-12) throw std::invalid_argument("overlap ratio must lie in [0, 0.8]");
    std::size_t masked = 0;
    const auto splits = mask_splits(data.splits, data.vocab, ratio, train.seed, &masked);
    const auto agg = trainer::run_seeds(m, train, data.vocab, splits, config.eval, train.seeds);
    for (const auto& run : agg.runs) rows.push_back({format_key(ratio), run.seed, run.test, masked});
  }
  if (write_files) write_sweep_csv(config, "sweep_overlap.csv", "ratio", rows, true);
  return rows;
}

std::vector<SplitTriple> noisy_test_inputs(const std::vector<SplitTriple>& splits, const data::Vocabulary& vocab,
                                           std::size_t k, std::uint64_t seed) {
  Rng rng(seed ^ (0x5bd1e995ULL * (k + 1)));
  std::vector<SplitTriple> out = splits;
  for (auto& s : out) s.test_input = data::inject_noise(s.test_input, k, vocab, rng);
  return out;
}

std::vector<NoiseRow> run_noise_sweep(const ExperimentConfig& config, const std::vector<std::size_t>& ks,
                                      bool write_files) {
  const auto data = load_data(config);
  trainer::TrainConfig train = config.train;
  const auto m = resolved_model(config, data, train.weights);
  const auto trained = trainer::train(m, train, data.vocab, data.splits, train.seed);
  EvalOptions options = config.eval;
  options.seed = train.seed;
  std::vector<NoiseRow> rows;
  NoiseRow clean;
  clean.report = evaluate(*trained.model, data.splits, data.vocab, options);
  rows.push_back(clean);
  for (std::size_t k : ks) {
    NoiseRow row;
    row.k = k;
    row.report = evaluate(*trained.model, noisy_test_inputs(data.splits, data.vocab, k, train.seed), data.vocab, options);
    for (Domain d : {Domain::A, Domain::B}) {
      if (!clean.report.of(d) || !row.report.of(d)) continue;
      const auto c = metric_values(*clean.report.of(d));
      const auto n = metric_values(*row.report.of(d));
      for (std::size_t i = 0; i < c.size(); ++i) {
        row.degradation[data::domain_name(d)][kMetricNames[i]] =
            c[i] != 0.0 ? nlohmann::json((c[i] - n[i]) / c[i]) : nlohmann::json(nullptr);
      }
    }
    rows.push_back(row);
  }
  if (write_files) {
    fs::create_directories(config.out_dir);
    std::ostringstream csv;
    csv << std::setprecision(10) << "config_hash,seed,k," << report_csv_header();
    for (const char* name : kMetricNames) csv << ",degradation_" << name;
    csv << '\n';
    const std::string hash = config_hash(config);
    for (const auto& row : rows) {
      for (Domain d : {Domain::A, Domain::B}) {
        csv << hash << ',' << train.seed << ',' << row.k << ',' << data::domain_name(d);
        if (row.report.of(d)) {
          for (double v : metric_values(*row.report.of(d))) csv << ',' << v;
          csv << ',' << row.report.of(d)->users;
        } else {
          csv << ",,,,,,0";
        }
        for (const char* name : kMetricNames) {
          csv << ',';
          const auto key = data::domain_name(d);
          if (row.degradation.contains(key) && !row.degradation[key][name].is_null()) {
            csv << row.degradation[key][name].get<double>();
          }
        }
        csv << '\n';
      }
    }
    write_text(fs::path(config.out_dir) / "sweep_noise.csv", csv.str());
  }
  return rows;
}

std::vector<SweepRow> run_expert_sweep(const ExperimentConfig& config, const std::vector<std::size_t>& counts,
                                       bool write_files) {
  const auto data = load_data(config);
  std::vector<SweepRow> rows;
  for (std::size_t n : counts) {
    if (n < 2) throw std::invalid_argument("expert sweep: N must be at least 2");
    ExperimentConfig point = config;
    point.model.experts = n;
    point.model.shared_experts = std::min(config.model.shared_experts, n - 1);
    point.model.top_k = std::min(config.model.top_k, n - point.model.shared_experts);
    trainer::TrainConfig train = point.train;
    const auto m = resolved_model(point, data, train.weights);
    const auto agg = trainer::run_seeds(m, train, data.vocab, data.splits, point.eval, train.seeds);
    for (const auto& run : agg.runs) rows.push_back({std::to_string(n), run.seed, run.test, 0});
  }
  if (write_files) write_sweep_csv(config, "sweep_experts.csv", "experts", rows, false);
  return rows;
}

std::size_t export_representations(const model::Codis& model, const std::vector<SplitTriple>& splits,
                                   const std::string& out_dir) {
  NoGradGuard no_grad;
  fs::create_directories(out_dir);
  std::ofstream reps(fs::path(out_dir) / "representations.csv");
  std::ofstream router(fs::path(out_dir) / "router.csv");
  if (!reps || !router) throw std::runtime_error("cannot write representation export to " + out_dir);
  const std::size_t h = model.config().hidden, n = model.config().experts;
  reps << std::setprecision(17) << "user,kind";
  for (std::size_t c = 0; c < h; ++c) reps << ",v" << c;
  reps << '\n';
  router << std::setprecision(17) << "user,sequence,t";
  for (std::size_t c = 0; c < n; ++c) router << ",p" << c;
  router << '\n';

  std::size_t rows = 0;
  const std::size_t chunk = 128;
  for (std::size_t begin = 0; begin < splits.size(); begin += chunk) {
    const std::size_t end = std::min(splits.size(), begin + chunk);
    std::vector<const data::AlignedSequenceTriple*> inputs;
    for (std::size_t i = begin; i < end; ++i) inputs.push_back(&splits[i].test_input);
    const auto batch = model::Batch::from(std::span<const data::AlignedSequenceTriple* const>(inputs));
    const auto bundle = model.forward(batch, {});
    for (std::size_t i = begin; i < end; ++i) {
      const auto& input = *inputs[i - begin];
      const std::size_t base = (i - begin) * batch.steps;
      const std::size_t last = base + batch.steps - 1;
      const std::size_t row_a = base + query_row(input, Domain::A, QueryPosition::LastDomainSlot);
      const std::size_t row_b = base + query_row(input, Domain::B, QueryPosition::LastDomainSlot);
      auto emit = [&](const char* kind, const Tensor& t, std::size_t row) {
        reps << splits[i].user << ',' << kind;
        for (std::size_t c = 0; c < h; ++c) reps << ',' << t[row * h + c];
        reps << '\n';
        ++rows;
      };
      emit("F_sha", bundle.f_sha, last);
      emit("F_spec_A", bundle.f_spec_a, row_a);
      emit("F_spec_B", bundle.f_spec_b, row_b);
      emit("E_M", bundle.embeddings[model::index_of(model::SequenceKind::M)], last);
      emit("E_A", bundle.embeddings[model::index_of(model::SequenceKind::A)], row_a);
      emit("E_B", bundle.embeddings[model::index_of(model::SequenceKind::B)], row_b);
      for (model::SequenceKind kind : model::kAllKinds) {
        const auto k = model::index_of(kind);
        const auto& w = bundle.routing[k].weights;
        for (std::size_t t = 0; t < batch.steps; ++t) {
          if (!batch.valid[k][base + t]) continue;
          router << splits[i].user << ',' << model::kind_name(kind) << ',' << t;
          for (std::size_t c = 0; c < n; ++c) router << ',' << w[(base + t) * n + c];
          router << '\n';
        }
      }
    }
  }
  return rows;
}

namespace {

double probe_with_groups(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                         const std::vector<std::size_t>& groups, std::uint64_t seed) {
  if (x.empty() || x.size() != y.size()) throw std::invalid_argument("probe: features and labels differ");
  const std::size_t dim = x.front().size();
  std::size_t n_groups = 0;
  for (std::size_t g : groups) n_groups = std::max(n_groups, g + 1);
  std::vector<std::size_t> order(n_groups);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<bool> in_train(n_groups, false);
  for (std::size_t i = 0; i < n_groups * 7 / 10; ++i) in_train[order[i]] = true;

  std::vector<double> mean(dim, 0.0), scale(dim, 0.0);
  std::size_t n_train = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!in_train[groups[i]]) continue;
    ++n_train;
    for (std::size_t c = 0; c < dim; ++c) mean[c] += x[i][c];
  }
  if (n_train == 0 || n_train == x.size()) throw std::invalid_argument("probe: too few samples to split");
  for (double& v : mean) v /= static_cast<double>(n_train);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!in_train[groups[i]]) continue;
    for (std::size_t c = 0; c < dim; ++c) scale[c] += (x[i][c] - mean[c]) * (x[i][c] - mean[c]);
  }
  for (double& v : scale) v = 1.0 / std::sqrt(v / static_cast<double>(n_train) + 1e-12);
  auto feature = [&](std::size_t i, std::size_t c) { return (x[i][c] - mean[c]) * scale[c]; };

  std::vector<double> w(dim, 0.0), grad(dim);
  double b = 0.0;
  const double lr = 0.5, l2 = 1e-3;
  for (int iter = 0; iter < 500; ++iter) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (!in_train[groups[i]]) continue;
      double z = b;
      for (std::size_t c = 0; c < dim; ++c) z += w[c] * feature(i, c);
      const double err = 1.0 / (1.0 + std::exp(-z)) - y[i];
      for (std::size_t c = 0; c < dim; ++c) grad[c] += err * feature(i, c);
      gb += err;
    }
    for (std::size_t c = 0; c < dim; ++c) w[c] -= lr * (grad[c] / static_cast<double>(n_train) + l2 * w[c]);
    b -= lr * gb / static_cast<double>(n_train);
  }
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (in_train[groups[i]]) continue;
    double z = b;
    for (std::size_t c = 0; c < dim; ++c) z += w[c] * feature(i, c);
    correct += (z > 0.0) == (y[i] == 1) ? 1 : 0;
    ++total;
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace

double probe_accuracy(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                      std::uint64_t seed) {
  std::vector<std::size_t> groups(features.size());
  std::iota(groups.begin(), groups.end(), 0);
  return probe_with_groups(features, labels, groups, seed);
}

ProbeResult domain_probe(const model::Codis& model, const std::vector<SplitTriple>& splits, std::uint64_t seed) {
  NoGradGuard no_grad;
  const std::size_t h = model.config().hidden;
  std::vector<std::vector<double>> spec_x, sha_x;
  std::vector<int> labels;
  std::vector<std::size_t> groups;
  std::size_t user_index = 0;
  for (std::size_t begin = 0; begin < splits.size(); begin += 128) {
    const std::size_t end = std::min(splits.size(), begin + 128);
    std::vector<const data::AlignedSequenceTriple*> inputs;
    for (std::size_t i = begin; i < end; ++i) inputs.push_back(&splits[i].test_input);
    const auto batch = model::Batch::from(std::span<const data::AlignedSequenceTriple* const>(inputs));
    const auto bundle = model.forward(batch, {});
    for (std::size_t i = begin; i < end; ++i) {
      const auto& input = *inputs[i - begin];
      if (input.count(Domain::A) == 0 || input.count(Domain::B) == 0) continue;
      const std::size_t base = (i - begin) * batch.steps;
      for (Domain d : {Domain::A, Domain::B}) {
        const std::size_t row = base + query_row(input, d, QueryPosition::LastDomainSlot);
        const auto& spec = bundle.f_spec(d);
        spec_x.emplace_back(spec.values().begin() + row * h, spec.values().begin() + (row + 1) * h);
        sha_x.emplace_back(bundle.f_sha.values().begin() + row * h, bundle.f_sha.values().begin() + (row + 1) * h);
        labels.push_back(d == Domain::B ? 1 : 0);
        groups.push_back(user_index);
      }
      ++user_index;
    }
  }
  ProbeResult r;
  r.specific_accuracy = probe_with_groups(spec_x, labels, groups, seed);
  r.shared_accuracy = probe_with_groups(sha_x, labels, groups, seed);
  r.train_size = (user_index * 7 / 10) * 2;
  r.test_size = labels.size() - r.train_size;
  return r;
}

}  // namespace codis::eval
