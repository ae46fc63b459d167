#include "colongpt/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "colongpt/checkpoint.hpp"
#include "colongpt/kernels.hpp"
#include "colongpt/rng.hpp"

namespace colongpt::train {

std::string_view to_string(Stage s) { return s == Stage::kPreAlign ? "pre_align" : "sft"; }

Stage parse_stage(std::string_view s) {
  if (s == "pre_align") return Stage::kPreAlign;
  if (s == "sft") return Stage::kSft;
  throw UsageError("unknown stage '" + std::string(s) + "' (expected pre_align or sft)");
}

TrainPlan TrainPlan::recipe(Stage stage) {
  TrainPlan p;
  p.stage = stage;
  if (stage == Stage::kPreAlign) {
    p.adapter_lr = 2e-4;
    p.lora_lr = 0.0;
  } else {
    p.adapter_lr = 2e-3;
    p.lora_lr = 2e-4;
  }
  return p;
}

std::size_t TrainPlan::total_steps(std::size_t corpus_size) const {
  if (max_steps) return *max_steps;
  return epochs * ((corpus_size + batch - 1) / batch);
}

std::size_t TrainPlan::total_updates(std::size_t corpus_size) const {
  return (total_steps(corpus_size) + grad_accum - 1) / grad_accum;
}

void TrainPlan::validate() const {
  if (batch == 0 || grad_accum == 0) throw UsageError("batch and grad_accum must be positive");
  if (!max_steps && epochs == 0) throw UsageError("epochs must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw UsageError("adam betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw UsageError("adam eps must be positive");
  if (!(adapter_lr >= 0.0) || !(lora_lr >= 0.0) || !(weight_decay >= 0.0)) {
    throw UsageError("learning rates and weight decay must be non-negative");
  }
}

std::string group_of(const std::string& name) { return name.substr(0, name.find('.')); }

std::map<std::string, std::uint64_t> group_hashes(const ag::ParamMap& params) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& [name, t] : params) {
    const std::string g = group_of(name);
    if (!out.count(g)) out[g] = checkpoint::content_hash(params, g + ".");
  }
  return out;
}

std::set<std::string> trainable_names(const lm::Bundle& bundle, Stage stage) {
  std::set<std::string> out;
  for (const auto& [name, t] : bundle.params) {
    const std::string g = group_of(name);
    if (g == "adapter" || (stage == Stage::kSft && g == "lora")) out.insert(name);
  }
  return out;
}

void attach_lora(lm::Bundle& bundle, const lm::LoraConfig& cfg, std::uint64_t seed) {
  bundle.lora = cfg;
  if (bundle.has_lora()) return;
  for (auto& [name, t] : lm::init_lora(bundle.lm, cfg, seed)) bundle.params[name] = std::move(t);
}

double cosine_lr(double base, std::size_t update, std::size_t total) {
  if (total == 0) return base;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(update) / static_cast<double>(total)));
}

std::string log_line(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["stage"] = to_string(r.stage);
  j["loss"] = r.loss;
  nlohmann::ordered_json lr = nlohmann::ordered_json::object();
  for (const auto& [g, v] : r.lr) lr[g] = v;
  j["lr"] = lr;
  return j.dump();
}

void write_log(std::span<const StepRecord> log, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw UsageError("cannot write log '" + path.string() + "'");
  for (const StepRecord& r : log) os << log_line(r) << '\n';
}

ag::Var batch_loss(ag::ParamBinder& binder, std::span<const TrainExample* const> batch, const lm::Bundle& bundle,
                   lm::LoraMode mode) {
  ag::Tape& tape = binder.tape();
  std::vector<ag::Var> rows;
  std::vector<lm::Token> targets;
  for (const TrainExample* ex : batch) {
    ag::Var emb = tape.external(ex->embedding, false);
    const ag::Var visual =
        vision::adapter_graph(binder, emb, bundle.encoder.grid_h(), bundle.encoder.grid_w(), bundle.adapter);
    lm::MultimodalSample shape_only;
    shape_only.visual = Tensor::matrix(visual.value().rows(), 1);
    shape_only.instruction = ex->prompt;
    shape_only.response = ex->response;
    const lm::AssembledSequence seq = lm::assemble(shape_only);
    const std::vector<std::size_t> positions = seq.masked_positions();
    if (positions.empty()) continue;
    const ag::Var x = lm::input_graph(binder, visual, seq, bundle.lm);
    lm::ForwardOptions opt;
    opt.lora = mode;
    opt.lora_scale = bundle.lora_scale();
    opt.positions = positions;
    rows.push_back(lm::lm_graph(binder, x, bundle.lm, opt));
    for (std::size_t t : positions) targets.push_back(seq.targets[t]);
  }
  if (rows.empty()) throw DataError("micro-batch has no supervised positions");
  return ag::cross_entropy(ag::concat_rows(rows), targets);
}

TrainResult train(const TrainPlan& plan, std::span<const TrainExample> corpus, lm::Bundle& bundle,
                  const std::function<void(const StepRecord&)>& on_step) {
  plan.validate();
  bundle.validate();
  if (corpus.empty()) throw DataError("training corpus is empty");
  if (plan.stage == Stage::kSft && !bundle.has_lora()) {
    throw PreconditionError("sft needs LoRA factors on the bundle");
  }
  const std::set<std::string> trainable = trainable_names(bundle, plan.stage);
  const lm::LoraMode mode = bundle.has_lora() ? lm::LoraMode::kEffective : lm::LoraMode::kNone;

  TrainResult result;
  result.hashes_before = group_hashes(bundle.params);

  const std::size_t steps = plan.total_steps(corpus.size());
  const std::size_t updates = plan.total_updates(corpus.size());
  const std::size_t n = corpus.size();

  ag::ParamMap m1, m2, acc;
  for (const std::string& name : trainable) {
    const auto& shape = bundle.params.at(name).shape();
    m1[name] = Tensor(shape, 0.0);
    m2[name] = Tensor(shape, 0.0);
    acc[name] = Tensor(shape, 0.0);
  }
  auto lr_for = [&](const std::string& name, std::size_t update) {
    const double base = group_of(name) == "lora" ? plan.lora_lr : plan.adapter_lr;
    return cosine_lr(base, update, updates);
  };

  std::vector<std::size_t> order(n);
  std::size_t epoch_loaded = static_cast<std::size_t>(-1);
  std::size_t accumulated = 0;
  std::size_t update = 0;

  auto apply_update = [&]() {
    ++update;
    const double c1 = 1.0 - std::pow(plan.beta1, static_cast<double>(update));
    const double c2 = 1.0 - std::pow(plan.beta2, static_cast<double>(update));
    for (const std::string& name : trainable) {
      Tensor& p = bundle.params.at(name);
      Tensor& g = acc.at(name);
      Tensor& a = m1.at(name);
      Tensor& b = m2.at(name);
      const double lr = lr_for(name, update - 1);
      const double inv = 1.0 / static_cast<double>(accumulated);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i] * inv;
        a[i] = plan.beta1 * a[i] + (1.0 - plan.beta1) * gi;
        b[i] = plan.beta2 * b[i] + (1.0 - plan.beta2) * gi * gi;
        const double step = (a[i] / c1) / (std::sqrt(b[i] / c2) + plan.adam_eps) + plan.weight_decay * p[i];
        p[i] -= lr * step;
      }
      g.fill(0.0);
    }
    accumulated = 0;
  };

  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<const TrainExample*> batch;
    batch.reserve(plan.batch);
    for (std::size_t k = 0; k < plan.batch; ++k) {
      const std::size_t stream = s * plan.batch + k;
      const std::size_t epoch = stream / n;
      if (epoch != epoch_loaded) {
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        SplitMix64 rng(keyed_hash(plan.seed, "epoch", std::to_string(epoch)));
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        epoch_loaded = epoch;
      }
      batch.push_back(&corpus[order[stream % n]]);
    }

    ag::Tape tape;
    ag::ParamBinder binder(tape, bundle.params, &trainable);
    const ag::Var loss = batch_loss(binder, batch, bundle, mode);
    const double value = loss.value()[0];
    if (!std::isfinite(value)) {
      throw DivergenceError(s + 1, "loss diverged at step " + std::to_string(s + 1));
    }
    tape.backward(loss);
    for (auto& [name, g] : binder.gradients()) {
      if (!g.all_finite()) throw DivergenceError(s + 1, "gradient diverged at step " + std::to_string(s + 1));
      kernels::axpy(1.0, g.span(), acc.at(name).span());
    }
    ++accumulated;

    StepRecord rec;
    rec.step = s + 1;
    rec.stage = plan.stage;
    rec.loss = value;
    rec.lr["adapter"] = cosine_lr(plan.adapter_lr, update, updates);
    if (plan.stage == Stage::kSft) rec.lr["lora"] = cosine_lr(plan.lora_lr, update, updates);

    if (accumulated == plan.grad_accum || s + 1 == steps) apply_update();
    result.log.push_back(rec);
    if (on_step) on_step(rec);
  }
  result.updates = update;
  result.hashes_after = group_hashes(bundle.params);
  return result;
}

}  // namespace colongpt::train
