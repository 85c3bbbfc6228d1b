#include "codis/trainer/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "codis/data/pipeline.hpp"

namespace codis::trainer {

using data::SplitTriple;
using model::Codis;
using model::ParameterStore;

void TrainConfig::validate() const {
  if (max_epochs == 0) throw std::invalid_argument("train: max_epochs must be positive");
  if (warmup_epochs >= max_epochs) throw std::invalid_argument("train: warmup_epochs must be below max_epochs");
  if (patience == 0) throw std::invalid_argument("train: patience must be positive");
  if (lr < 0.0 || weight_decay < 0.0) throw std::invalid_argument("train: lr and weight_decay must be nonnegative");
  if (lr_decay_factor <= 0.0 || lr_decay_factor > 1.0) {
    throw std::invalid_argument("train: lr_decay_factor must be in (0, 1]");
  }
  if (decay_window == 0) throw std::invalid_argument("train: decay_window must be positive");
  if (batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  if (grl_ramp < 0.0 || grl_ramp > 1.0) throw std::invalid_argument("train: grl_ramp must be in [0, 1]");
  if (grl_max < 0.0 || grl_max > 1.0) throw std::invalid_argument("train: grl_max must be in [0, 1]");
  if (pseudo_count == 0) throw std::invalid_argument("train: pseudo_count must be positive");
  if (negatives == 0) throw std::invalid_argument("train: negatives must be positive");
  if (clip_norm <= 0.0) throw std::invalid_argument("train: clip_norm must be positive");
  weights.validate();
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"max_epochs", c.max_epochs},
          {"warmup_epochs", c.warmup_epochs},
          {"patience", c.patience},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"lr_decay_factor", c.lr_decay_factor},
          {"decay_window", c.decay_window},
          {"batch_size", c.batch_size},
          {"seeds", c.seeds},
          {"seed", c.seed},
          {"grl_ramp", c.grl_ramp},
          {"grl_max", c.grl_max},
          {"pseudo_count", c.pseudo_count},
          {"negatives", c.negatives},
          {"clip_norm", c.clip_norm},
          {"loss", objectives::to_json(c.weights)},
          {"prior_mode", c.prior_mode == objectives::PriorMode::Pooled ? "pooled" : "per_position"},
          {"threads", c.threads},
          {"validation_mode", eval::to_string(c.validation.mode)}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.patience = j.value("patience", c.patience);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
  c.decay_window = j.value("decay_window", c.decay_window);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seeds = j.value("seeds", c.seeds);
  c.seed = j.value("seed", c.seed);
  c.grl_ramp = j.value("grl_ramp", c.grl_ramp);
  c.grl_max = j.value("grl_max", c.grl_max);
  c.pseudo_count = j.value("pseudo_count", c.pseudo_count);
  c.negatives = j.value("negatives", c.negatives);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  if (j.contains("loss")) c.weights = objectives::loss_weights_from_json(j.at("loss"));
  const std::string prior = j.value("prior_mode", std::string("pooled"));
  if (prior == "pooled") {
    c.prior_mode = objectives::PriorMode::Pooled;
  } else if (prior == "per_position") {
    c.prior_mode = objectives::PriorMode::PerPosition;
  } else {
    throw std::invalid_argument("unknown prior_mode '" + prior + "'");
  }
  c.threads = j.value("threads", c.threads);
  if (j.contains("validation_mode")) {
    c.validation.mode = eval::eval_mode_from_string(j.at("validation_mode").get<std::string>());
  }
  c.validate();
  return c;
}

void OptimizerState::init(const ParameterStore& params) {
  m.clear();
  v.clear();
  for (const auto& e : params.entries()) {
    m.emplace_back(e.tensor.size(), 0.0);
    v.emplace_back(e.tensor.size(), 0.0);
  }
  step = 0;
  consecutive_skips = 0;
}

double grad_norm(const ParameterStore& params) {
  double total = 0.0;
  for (const auto& e : params.entries()) {
    for (double g : e.tensor.grad()) total += g * g;
  }
  return std::sqrt(total);
}

double clip_grad_norm(ParameterStore& params, double max_norm) {
  const double norm = grad_norm(params);
  if (std::isfinite(norm) && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& e : params.entries()) {
      if (!e.tensor.has_grad()) continue;
      for (double& g : e.tensor.mutable_grad()) g *= f;
    }
  }
  return norm;
}

bool optimizer_step(ParameterStore& params, OptimizerState& state, double lr) {
  auto& entries = params.entries();
  if (state.m.size() != entries.size()) state.init(params);
  for (const auto& e : entries) {
    for (double g : e.tensor.grad()) {
      if (!std::isfinite(g)) {
        if (++state.consecutive_skips >= 3) {
          throw DivergenceError("optimizer: non-finite gradient on three consecutive steps (last in " + e.name + ")");
        }
        std::cerr << "warning: non-finite gradient in " << e.name << ", step skipped\n";
        return false;
      }
    }
  }
  state.consecutive_skips = 0;
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - lr * state.weight_decay;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto values = entries[i].tensor.mutable_values();
    const auto grad = entries[i].tensor.grad();
    const bool touched = std::any_of(grad.begin(), grad.end(), [](double g) { return g != 0.0; });
    if (decay != 1.0) {
      for (double& x : values) x *= decay;
    }
    if (!touched) continue;
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grad[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
      values[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + state.eps);
    }
  }
  return true;
}

double LrSchedule::lr(std::size_t epoch) const {
  if (epoch < warmup) return base * static_cast<double>(epoch + 1) / static_cast<double>(warmup);
  return base * factor;
}

void LrSchedule::observe(bool improved) {
  if (improved) {
    stale = 0;
    return;
  }
  ++stale;
  if (stale % window == 0) factor *= decay_factor;
}

double grl_lambda(std::size_t epoch, std::size_t max_epochs, double ramp, double peak) {
  const double span = ramp * static_cast<double>(max_epochs);
  if (span <= 0.0) return peak;
  return peak * std::min(1.0, static_cast<double>(epoch) / span);
}

nlohmann::json to_json(const EpochLog& e) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"epoch", e.epoch},       {"loss", objectives::to_json(e.loss)},
          {"lr", e.lr},             {"grl_lambda", e.grl},
          {"val_mrr_A", opt(e.val_mrr_a)}, {"val_mrr_B", opt(e.val_mrr_b)},
          {"val_mrr", e.val_mrr},   {"improved", e.improved},
          {"skipped_steps", e.skipped_steps}};
}

namespace {

std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(epoch) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void load_moments(const model::Checkpoint& ckp, const ParameterStore& params, OptimizerState& state) {
  state.init(params);
  const auto& entries = params.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto* m = ckp.find("adam.m." + entries[i].name);
    const auto* v = ckp.find("adam.v." + entries[i].name);
    if (!m || !v) return state.init(params);
    state.m[i] = m->values;
    state.v[i] = v->values;
  }
  state.step = ckp.meta.value("train_state", nlohmann::json::object()).value("step", std::uint64_t{0});
}

}  // namespace

TrainResult train(const model::ModelConfig& model_config, const TrainConfig& config, const data::Vocabulary& vocab,
                  const std::vector<SplitTriple>& splits, std::uint64_t seed, std::ostream* log_out,
                  const model::Checkpoint* resume) {
  config.validate();
  if (splits.empty()) throw std::invalid_argument("train: dataset is empty");
  TrainResult result;
  result.model = resume ? model::load_model(*resume) : std::make_unique<Codis>(model_config, seed);
  Codis& model = *result.model;
  auto& params = model.parameters();
  OptimizerState& opt = result.optimizer;
  opt.weight_decay = config.weight_decay;
  opt.init(params);

  LrSchedule schedule{config.lr, config.warmup_epochs, config.lr_decay_factor, config.decay_window};
  std::size_t start_epoch = 0;
  std::size_t since_improvement = 0;
  double best = -1.0;
  if (resume) {
    load_moments(*resume, params, opt);
    const auto st = resume->meta.value("train_state", nlohmann::json::object());
    start_epoch = st.value("epochs_run", std::size_t{0});
    best = st.value("best_val_mrr", -1.0);
    result.best_epoch = st.value("best_epoch", std::size_t{0});
    schedule.factor = st.value("lr_factor", 1.0);
    schedule.stale = st.value("lr_stale", std::size_t{0});
    since_improvement = st.value("since_improvement", std::size_t{0});
  }
  auto best_values = params.snapshot();

  std::vector<data::AlignedSequenceTriple> train_inputs;
  train_inputs.reserve(splits.size());
  for (const auto& s : splits) train_inputs.push_back(s.train);

  eval::EvalOptions val_options = config.validation;
  val_options.validation = true;
  val_options.seed = seed;

  const bool need_prior = model.config().use_router && config.weights.lambda1 > 0.0;
  objectives::BatchLossOptions loss_options;
  loss_options.weights = config.weights;
  loss_options.n_neg = config.negatives;

  std::vector<std::size_t> order(splits.size());
  std::vector<const data::AlignedSequenceTriple*> batch_ptrs;
  for (std::size_t epoch = start_epoch; epoch < config.max_epochs; ++epoch) {
    Rng rng(epoch_seed(seed, epoch));
    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = schedule.lr(epoch);
    entry.grl = grl_lambda(epoch, config.max_epochs, config.grl_ramp, config.grl_max);
    loss_options.grl_lambda = entry.grl;

    std::optional<objectives::ContextPrior> prior;
    if (need_prior) {
      const auto pseudo = data::generate_pseudo_sequences(train_inputs, vocab, config.pseudo_count, rng);
      prior = objectives::estimate_context_prior(model, pseudo, config.prior_mode);
    }

    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      batch_ptrs.clear();
      for (std::size_t i = begin; i < end; ++i) batch_ptrs.push_back(&splits[order[i]].train);
      const auto batch = model::Batch::from(std::span<const data::AlignedSequenceTriple* const>(batch_ptrs));
      params.zero_grad();
      auto loss = objectives::batch_loss(model, batch, vocab, prior ? &*prior : nullptr, loss_options, rng);
      if (!std::isfinite(loss.report.total)) {
        throw DivergenceError("train: total loss is not finite at epoch " + std::to_string(epoch) +
                              " (losses " + objectives::to_json(loss.report).dump() + ")");
      }
      backward(loss.total);
      clip_grad_norm(params, config.clip_norm);
      if (!optimizer_step(params, opt, entry.lr)) ++entry.skipped_steps;
      entry.loss += loss.report;
      ++batches;
    }
    if (batches) entry.loss = entry.loss.scaled(1.0 / static_cast<double>(batches));

    const auto val = eval::evaluate(model, splits, vocab, val_options);
    if (val.of(data::Domain::A)) entry.val_mrr_a = val.of(data::Domain::A)->mrr;
    if (val.of(data::Domain::B)) entry.val_mrr_b = val.of(data::Domain::B)->mrr;
    entry.val_mrr = val.aggregate_mrr();
    entry.improved = entry.val_mrr > best;
    schedule.observe(entry.improved);
    if (entry.improved) {
      best = entry.val_mrr;
      result.best_epoch = epoch;
      best_values = params.snapshot();
      since_improvement = 0;
    } else {
      ++since_improvement;
    }
    if (log_out) *log_out << to_json(entry).dump() << '\n' << std::flush;
    result.log.push_back(entry);
    result.epochs_run = epoch + 1;
    if (since_improvement >= config.patience) break;
  }
  params.restore(best_values);
  result.best_val_mrr = best;
  result.schedule = schedule;
  result.since_improvement = since_improvement;
  return result;
}

model::Checkpoint make_training_checkpoint(const TrainResult& result, std::uint64_t seed, const TrainConfig& config) {
  auto ckp = model::make_checkpoint(*result.model, seed);
  ckp.meta["train"] = to_json(config);
  ckp.meta["train_state"] = {{"epochs_run", result.epochs_run},
                             {"best_epoch", result.best_epoch},
                             {"best_val_mrr", result.best_val_mrr},
                             {"step", result.optimizer.step},
                             {"lr_factor", result.schedule.factor},
                             {"lr_stale", result.schedule.stale},
                             {"since_improvement", result.since_improvement}};
  const auto& entries = result.model->parameters().entries();
  if (result.optimizer.m.size() == entries.size()) {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      ckp.blobs.push_back({"adam.m." + entries[i].name, entries[i].tensor.shape(), result.optimizer.m[i]});
      ckp.blobs.push_back({"adam.v." + entries[i].name, entries[i].tensor.shape(), result.optimizer.v[i]});
    }
  }
  return ckp;
}

MetricSummary summarize(const std::vector<double>& values) {
  MetricSummary s;
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

std::string format_summary(const MetricSummary& s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f±%.4f", s.mean, s.std);
  return buf;
}

std::map<std::string, std::map<std::string, MetricSummary>> aggregate_reports(
    const std::vector<eval::MetricsReport>& reports) {
  std::map<std::string, std::map<std::string, MetricSummary>> out;
  for (data::Domain d : {data::Domain::A, data::Domain::B}) {
    std::map<std::string, std::vector<double>> values;
    for (const auto& r : reports) {
      if (!r.of(d)) continue;
      const auto& m = *r.of(d);
      values["hr@5"].push_back(m.hr5);
      values["hr@10"].push_back(m.hr10);
      values["ndcg@5"].push_back(m.ndcg5);
      values["ndcg@10"].push_back(m.ndcg10);
      values["mrr"].push_back(m.mrr);
    }
    for (const auto& [name, v] : values) out[data::domain_name(d)][name] = summarize(v);
  }
  std::vector<double> agg;
  for (const auto& r : reports) agg.push_back(r.aggregate_mrr());
  out["aggregate"]["mrr"] = summarize(agg);
  return out;
}

SeedAggregate run_seeds(const model::ModelConfig& model_config, const TrainConfig& config,
                        const data::Vocabulary& vocab, const std::vector<SplitTriple>& splits,
                        const eval::EvalOptions& eval_options, std::size_t k,
                        const std::function<std::ostream*(std::uint64_t)>& log_for_seed) {
  if (k == 0) throw std::invalid_argument("run_seeds: need at least one seed");
  SeedAggregate out;
  out.runs.resize(k);
  std::vector<std::exception_ptr> errors(k);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < k; i = next++) {
      try {
        const std::uint64_t seed = config.seed + i;
        std::ostream* log = log_for_seed ? log_for_seed(seed) : nullptr;
        auto result = train(model_config, config, vocab, splits, seed, log);
        auto& run = out.runs[i];
        run.seed = seed;
        eval::EvalOptions test_options = eval_options;
        test_options.validation = false;
        test_options.seed = seed;
        run.test = eval::evaluate(*result.model, splits, vocab, test_options);
        run.best_val_mrr = result.best_val_mrr;
        run.best_epoch = result.best_epoch;
        run.epochs_run = result.epochs_run;
        run.log = std::move(result.log);
        run.model = std::move(result.model);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(config.threads, 1, k);
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::vector<eval::MetricsReport> reports;
  for (const auto& r : out.runs) reports.push_back(r.test);
  out.summary = aggregate_reports(reports);
  return out;
}

}  // namespace codis::trainer
