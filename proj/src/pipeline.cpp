#include "colongpt/pipeline.hpp"

#include <algorithm>
#include <fstream>

#include "colongpt/checkpoint.hpp"
#include "colongpt/image.hpp"
#include "colongpt/vision.hpp"

namespace colongpt::pipeline {
namespace {

using nlohmann::json;

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key) && !j.at(key).is_null()) out = j.at(key).get<T>();
}

template <typename T>
void read_opt(const json& j, const char* key, std::optional<T>& out) {
  if (j.contains(key) && !j.at(key).is_null()) out = j.at(key).get<T>();
}

void read_stage(const json& j, StageOverrides& s) {
  read_opt(j, "adapter_lr", s.adapter_lr);
  read_opt(j, "lora_lr", s.lora_lr);
  read_opt(j, "max_steps", s.max_steps);
  read_opt(j, "epochs", s.epochs);
}

nlohmann::ordered_json stage_json(const StageOverrides& s) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  if (s.adapter_lr) j["adapter_lr"] = *s.adapter_lr;
  if (s.lora_lr) j["lora_lr"] = *s.lora_lr;
  if (s.max_steps) j["max_steps"] = *s.max_steps;
  if (s.epochs) j["epochs"] = *s.epochs;
  return j;
}

vision::AdapterKind parse_kind(const std::string& s) {
  if (s == "multigranularity") return vision::AdapterKind::kMultigranularity;
  if (s == "mlp") return vision::AdapterKind::kMlp;
  throw UsageError("unknown adapter kind '" + s + "'");
}

vision::Activation parse_activation(const std::string& s) {
  if (s == "gelu") return vision::Activation::kGelu;
  if (s == "identity") return vision::Activation::kIdentity;
  throw UsageError("unknown activation '" + s + "'");
}

}  // namespace

train::TrainPlan TrainConfig::plan(train::Stage stage) const {
  train::TrainPlan p = train::TrainPlan::recipe(stage);
  p.epochs = epochs;
  p.batch = batch;
  p.grad_accum = grad_accum;
  p.seed = seed;
  const StageOverrides& o = stage == train::Stage::kPreAlign ? pre_align : sft;
  if (o.adapter_lr) p.adapter_lr = *o.adapter_lr;
  if (o.lora_lr) p.lora_lr = *o.lora_lr;
  if (o.epochs) p.epochs = *o.epochs;
  p.max_steps = o.max_steps;
  return p;
}

void RunConfig::validate() const {
  model.encoder.validate();
  model.adapter.validate(model.encoder.grid_h(), model.encoder.grid_w());
  model.lm.validate();
  model.lora.validate();
  if (model.adapter.in_dim != model.encoder.dim) throw UsageError("model.adapter.in_dim must equal model.encoder.dim");
  if (model.adapter.out_dim != model.lm.model_dim) {
    throw UsageError("model.adapter.out_dim must equal model.lm.model_dim");
  }
  train.plan(train::Stage::kPreAlign).validate();
  train.plan(train::Stage::kSft).validate();
  if (eval.max_new_tokens == 0) throw UsageError("eval.max_new_tokens must be positive");
}

RunConfig config_from_json(const json& j, const std::filesystem::path& base) {
  RunConfig cfg;
  try {
    if (j.contains("data")) {
      const json& d = j.at("data");
      if (d.contains("taxonomy")) cfg.data.taxonomy = resolve(base, d.at("taxonomy").get<std::string>());
      if (d.contains("manifests")) {
        for (const auto& m : d.at("manifests")) cfg.data.manifests.push_back(resolve(base, m.get<std::string>()));
      }
      if (d.contains("image_root")) cfg.data.image_root = resolve(base, d.at("image_root").get<std::string>());
      if (d.contains("templates") && !d.at("templates").is_null()) {
        cfg.data.templates = resolve(base, d.at("templates").get<std::string>());
      }
      if (d.contains("split_policy") && !d.at("split_policy").is_null()) {
        const std::string p = d.at("split_policy").get<std::string>();
        if (p == "predefined") {
          cfg.data.split_policy = taxonomy::SplitPolicy::kPredefined;
        } else if (p == "proportional") {
          cfg.data.split_policy = taxonomy::SplitPolicy::kProportional;
        } else {
          throw UsageError("data.split_policy must be predefined or proportional");
        }
      }
      read_opt(d, "seed", cfg.data.seed);
    }
    if (j.contains("model")) {
      const json& m = j.at("model");
      read_opt(m, "seed", cfg.model.seed);
      if (m.contains("encoder")) {
        const json& e = m.at("encoder");
        read_opt(e, "height", cfg.model.encoder.height);
        read_opt(e, "width", cfg.model.encoder.width);
        read_opt(e, "patch", cfg.model.encoder.patch);
        read_opt(e, "dim", cfg.model.encoder.dim);
      }
      cfg.model.adapter.in_dim = cfg.model.encoder.dim;
      if (m.contains("adapter")) {
        const json& a = m.at("adapter");
        if (a.contains("kind")) cfg.model.adapter.kind = parse_kind(a.at("kind").get<std::string>());
        read_opt(a, "kernels", cfg.model.adapter.kernels);
        read_opt(a, "include_global", cfg.model.adapter.include_global);
        read_opt(a, "positional_encoding", cfg.model.adapter.positional_encoding);
        read_opt(a, "out_dim", cfg.model.adapter.out_dim);
        if (a.contains("activation")) {
          cfg.model.adapter.activation = parse_activation(a.at("activation").get<std::string>());
        }
      }
      if (m.contains("lm")) {
        const json& l = m.at("lm");
        read_opt(l, "layers", cfg.model.lm.layers);
        read_opt(l, "heads", cfg.model.lm.heads);
        read_opt(l, "model_dim", cfg.model.lm.model_dim);
        read_opt(l, "context_len", cfg.model.lm.context_len);
        read_opt(l, "ffn_mult", cfg.model.lm.ffn_mult);
      }
      if (!m.contains("adapter") || !m.at("adapter").contains("out_dim")) {
        cfg.model.adapter.out_dim = cfg.model.lm.model_dim;
      }
      if (m.contains("lora")) {
        read_opt(m.at("lora"), "rank", cfg.model.lora.rank);
        read_opt(m.at("lora"), "alpha", cfg.model.lora.alpha);
      }
    }
    if (j.contains("train")) {
      const json& t = j.at("train");
      read_opt(t, "epochs", cfg.train.epochs);
      read_opt(t, "batch", cfg.train.batch);
      read_opt(t, "grad_accum", cfg.train.grad_accum);
      read_opt(t, "seed", cfg.train.seed);
      if (t.contains("pre_align")) read_stage(t.at("pre_align"), cfg.train.pre_align);
      if (t.contains("sft")) read_stage(t.at("sft"), cfg.train.sft);
    }
    if (j.contains("eval")) {
      const json& e = j.at("eval");
      if (e.contains("tasks")) {
        cfg.eval.tasks.clear();
        for (const auto& t : e.at("tasks")) cfg.eval.tasks.insert(taxonomy::parse_task(t.get<std::string>()));
      }
      read_opt(e, "max_new_tokens", cfg.eval.max_new_tokens);
      read_opt(e, "label", cfg.eval.label);
    }
  } catch (const json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  return cfg;
}

nlohmann::ordered_json config_to_json(const RunConfig& cfg) {
  nlohmann::ordered_json j;
  auto& d = j["data"];
  d["taxonomy"] = cfg.data.taxonomy.string();
  d["manifests"] = nlohmann::ordered_json::array();
  for (const auto& m : cfg.data.manifests) d["manifests"].push_back(m.string());
  d["image_root"] = cfg.data.image_root.string();
  if (cfg.data.templates) d["templates"] = cfg.data.templates->string();
  if (cfg.data.split_policy) {
    d["split_policy"] = *cfg.data.split_policy == taxonomy::SplitPolicy::kPredefined ? "predefined" : "proportional";
  }
  d["seed"] = cfg.data.seed;
  auto& m = j["model"];
  m["seed"] = cfg.model.seed;
  m["encoder"] = {{"height", cfg.model.encoder.height},
                  {"width", cfg.model.encoder.width},
                  {"patch", cfg.model.encoder.patch},
                  {"dim", cfg.model.encoder.dim}};
  m["adapter"] = {
      {"kind", cfg.model.adapter.kind == vision::AdapterKind::kMlp ? "mlp" : "multigranularity"},
      {"kernels", cfg.model.adapter.kernels},
      {"include_global", cfg.model.adapter.include_global},
      {"positional_encoding", cfg.model.adapter.positional_encoding},
      {"out_dim", cfg.model.adapter.out_dim},
      {"activation", cfg.model.adapter.activation == vision::Activation::kGelu ? "gelu" : "identity"},
  };
  m["lm"] = {{"layers", cfg.model.lm.layers},
             {"heads", cfg.model.lm.heads},
             {"model_dim", cfg.model.lm.model_dim},
             {"context_len", cfg.model.lm.context_len},
             {"ffn_mult", cfg.model.lm.ffn_mult}};
  m["lora"] = {{"rank", cfg.model.lora.rank}, {"alpha", cfg.model.lora.alpha}};
  auto& t = j["train"];
  t["epochs"] = cfg.train.epochs;
  t["batch"] = cfg.train.batch;
  t["grad_accum"] = cfg.train.grad_accum;
  t["seed"] = cfg.train.seed;
  t["pre_align"] = stage_json(cfg.train.pre_align);
  t["sft"] = stage_json(cfg.train.sft);
  auto& e = j["eval"];
  e["tasks"] = nlohmann::ordered_json::array();
  for (taxonomy::Task task : cfg.eval.tasks) e["tasks"].push_back(taxonomy::to_string(task));
  e["max_new_tokens"] = cfg.eval.max_new_tokens;
  e["label"] = cfg.eval.label;
  return j;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw UsageError("config '" + path.string() + "': " + e.what());
  }
  return config_from_json(j, path.parent_path());
}

lm::Bundle init_bundle(const ModelConfig& cfg) {
  lm::Bundle b;
  b.encoder = cfg.encoder;
  b.adapter = cfg.adapter;
  b.lm = cfg.lm;
  b.validate();
  for (auto& [k, v] : vision::init_encoder(cfg.encoder, cfg.seed)) b.params[k] = std::move(v);
  for (auto& [k, v] : vision::init_adapter(cfg.adapter, cfg.seed)) b.params[k] = std::move(v);
  for (auto& [k, v] : lm::init_lm(cfg.lm, cfg.seed)) b.params[k] = std::move(v);
  return b;
}

lm::Bundle load_bundle(const ModelConfig& cfg, const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw UsageError("checkpoint not found: '" + path.string() + "'");
  lm::Bundle b = init_bundle(cfg);
  ag::ParamMap loaded = checkpoint::read(path);
  for (const auto& [name, t] : b.params) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw DataError("checkpoint '" + path.string() + "' lacks tensor '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape_string(it->second.shape()) +
                       ", config expects " + shape_string(t.shape()));
    }
  }
  const bool has_lora = std::any_of(loaded.begin(), loaded.end(),
                                    [](const auto& kv) { return kv.first.rfind("lora.", 0) == 0; });
  if (has_lora) {
    b.lora = cfg.lora;
    for (const auto& [name, t] : lm::init_lora(cfg.lm, cfg.lora, cfg.seed)) {
      auto it = loaded.find(name);
      if (it == loaded.end() || it->second.shape() != t.shape()) {
        throw ShapeError("checkpoint LoRA tensor '" + name + "' missing or not rank " + std::to_string(cfg.lora.rank));
      }
    }
  }
  b.params = std::move(loaded);
  return b;
}

LoadedData load_data(const DataConfig& cfg, std::size_t threads) {
  if (cfg.taxonomy.empty()) throw UsageError("data.taxonomy is not set");
  if (!std::filesystem::exists(cfg.taxonomy)) throw UsageError("taxonomy not found: '" + cfg.taxonomy.string() + "'");
  if (cfg.manifests.empty()) throw UsageError("data.manifests is empty");
  LoadedData out;
  out.taxonomy = taxonomy::read_taxonomy(cfg.taxonomy);
  for (const auto& path : cfg.manifests) {
    if (!std::filesystem::exists(path)) throw UsageError("manifest not found: '" + path.string() + "'");
    for (auto& m : taxonomy::read_manifest(path, out.taxonomy, cfg.split_policy)) {
      out.manifests.push_back(taxonomy::assign_splits(m, cfg.seed, threads));
    }
  }
  return out;
}

void write_split_files(std::span<const instruct::InstructionRecord> records, const std::filesystem::path& dir) {
  for (taxonomy::Split s : taxonomy::kSplits) {
    std::vector<instruct::InstructionRecord> part;
    for (const auto& r : records) {
      if (r.split == s) part.push_back(r);
    }
    instruct::write_records(part, dir / (std::string(taxonomy::to_string(s)) + ".jsonl"));
  }
}

std::vector<instruct::InstructionRecord> read_split_files(const std::filesystem::path& dir) {
  std::vector<instruct::InstructionRecord> out;
  for (taxonomy::Split s : taxonomy::kSplits) {
    const auto path = dir / (std::string(taxonomy::to_string(s)) + ".jsonl");
    if (!std::filesystem::exists(path)) throw UsageError("instruction file not found: '" + path.string() + "'");
    for (auto& r : instruct::read_records(path)) out.push_back(std::move(r));
  }
  return out;
}

std::string image_key(const instruct::ImageRef& ref) { return ref.dataset + "/" + ref.image_id; }

namespace {

Tensor load_embedding(const lm::Bundle& bundle, const std::filesystem::path& image_root,
                      const instruct::ImageRef& ref) {
  const image::Image img = image::read_ppm(image_root / ref.rel_path);
  if (static_cast<std::size_t>(img.width) != bundle.encoder.width ||
      static_cast<std::size_t>(img.height) != bundle.encoder.height) {
    throw ShapeError("image '" + ref.rel_path + "' is " + std::to_string(img.width) + "x" +
                     std::to_string(img.height) + ", encoder expects " + std::to_string(bundle.encoder.width) + "x" +
                     std::to_string(bundle.encoder.height));
  }
  return lm::encode_image(bundle, image::to_tensor(img));
}

}  // namespace

std::vector<train::TrainExample> build_examples(std::span<const instruct::InstructionRecord> records,
                                                const std::filesystem::path& image_root, const lm::Bundle& bundle) {
  std::map<std::string, Tensor> cache;
  std::vector<train::TrainExample> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    const std::string key = image_key(r.image);
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, load_embedding(bundle, image_root, r.image)).first;
    train::TrainExample ex;
    ex.embedding = it->second;
    ex.prompt = lm::prompt_ids(r.instruction);
    ex.response = lm::Tokenizer::tokenize(r.response);
    out.push_back(std::move(ex));
  }
  return out;
}

BundleModel::BundleModel(const lm::Bundle& bundle, std::span<const instruct::InstructionRecord> records,
                         const std::filesystem::path& image_root, std::size_t max_new_tokens)
    : bundle_(bundle), max_new_tokens_(max_new_tokens) {
  for (const auto& r : records) {
    const std::string key = image_key(r.image);
    if (visual_.count(key)) continue;
    try {
      visual_.emplace(key, lm::visual_tokens(bundle, load_embedding(bundle, image_root, r.image)));
    } catch (const DataError&) {
      // Reported per record by generate().
    }
  }
}

std::string BundleModel::generate(const instruct::InstructionRecord& record) const {
  auto it = visual_.find(image_key(record.image));
  if (it == visual_.end()) throw DataError("image unavailable for '" + record.record_id + "'");
  const auto prompt = lm::prompt_ids(record.instruction);
  const lm::DecodeResult out = lm::greedy_decode(bundle_, it->second, prompt, max_new_tokens_);
  return lm::Tokenizer::detokenize(out.tokens);
}

}  // namespace colongpt::pipeline
