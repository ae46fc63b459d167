#include "colongpt/instruct.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "colongpt/parallel.hpp"

namespace colongpt::instruct {

using nlohmann::json;
using taxonomy::normalize_name;

namespace {

constexpr std::size_t task_index(Task t) { return static_cast<std::size_t>(t); }

bool contains(std::string_view s, std::string_view needle) { return s.find(needle) != std::string_view::npos; }

std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
  return s;
}

}  // namespace

TemplateBank::TemplateBank(Templates templates) : templates_(std::move(templates)) {
  for (Task t : taxonomy::kTasks) {
    for (const auto& text : templates_[task_index(t)]) {
      const bool has_coords = contains(text, kCoordinatesSlot);
      const bool has_cat = contains(text, kCategorySlot);
      const std::string where = std::string(taxonomy::to_string(t)) + " template \"" + text + "\"";
      if (text.empty()) throw DataError(where + " is empty");
      if (t == Task::kREG && !has_coords) throw DataError(where + " lacks " + std::string(kCoordinatesSlot));
      if (t == Task::kREC && !has_cat) throw DataError(where + " lacks " + std::string(kCategorySlot));
      if ((t == Task::kCLS || t == Task::kCAP) && (has_coords || has_cat || contains(text, "{"))) {
        throw DataError(where + " must not contain placeholders");
      }
    }
  }
}

TemplateBank TemplateBank::defaults() {
  return TemplateBank(Templates{{
      {"Categorize the object.", "Determine the object's category.", "Identify the category of the object.",
       "Classify the object's category.", "Assign the object to its corresponding category."},
      {"What category does {object coordinates} belong to?", "Can you tell me the category of {object coordinates}?",
       "Could you provide the category for {object coordinates}?",
       "Please specify the category of {object coordinates}.", "What is the category for {object coordinates}?"},
      {"Where is the location of {object category}?", "Could you give the position of {object category}?",
       "Where is {object category} located?", "Could you specify the location of {object category}?",
       "Please specify the coordinates of {object category}."},
      {"Describe what you see in the image.", "Interpret what the image shows.",
       "Detail the visual elements in the image.", "Explain the image's visuals thoroughly.",
       "Offer a thorough explanation of the image."},
  }});
}

TemplateBank TemplateBank::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open template bank '" + path.string() + "'");
  Templates t;
  try {
    const json j = json::parse(in);
    for (Task task : taxonomy::kTasks) {
      const auto& arr = j.at(std::string(taxonomy::to_string(task)));
      if (!arr.is_array() || arr.size() != kTemplatesPerTask) {
        throw DataError(path.string() + ": task " + std::string(taxonomy::to_string(task)) +
                        " needs exactly 5 templates");
      }
      for (std::size_t i = 0; i < kTemplatesPerTask; ++i) t[task_index(task)][i] = arr[i].get<std::string>();
    }
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return TemplateBank(std::move(t));
}

void TemplateBank::write(const std::filesystem::path& path) const {
  json j;
  for (Task task : taxonomy::kTasks) j[std::string(taxonomy::to_string(task))] = templates_[task_index(task)];
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

const std::string& TemplateBank::get(Task task, std::size_t index) const {
  if (index >= kTemplatesPerTask) throw UsageError("template index out of range");
  return templates_[task_index(task)][index];
}

bool TemplateBank::matches_defaults() const { return templates_ == defaults().templates_; }

TemplateChoice select_template(const TemplateBank& bank, Task task, SplitMix64& rng) {
  const auto i = static_cast<std::size_t>(rng.below(kTemplatesPerTask));
  return {i, bank.get(task, i)};
}

std::string build_caption_prompt(const taxonomy::Taxonomy& tax, std::string_view category) {
  const auto* node = tax.find_child_by_name(category);
  if (!node) throw DataError("taxonomy lookup failed for category '" + std::string(category) + "'");
  const std::string& c = node->name;
  return "This colonoscopy image has been labelled as " + c +
         ". Write a concise clinical description of it. Cover the surface pattern of the " + c +
         ", the character of the lesion with respect to " + c +
         ", and the condition of the surrounding mucosa.";
}

std::string StubCaptionProvider::caption(const ImageRef&, std::string_view category, std::string_view) const {
  return "A colonoscopy image showing " + std::string(category) + ".";
}

InstructionRecord render_dialogue(Task task, const taxonomy::ImageRecord& record, std::string_view category,
                                  std::string_view template_text, std::size_t template_index,
                                  const std::optional<std::string>& caption) {
  if (record.polarity != taxonomy::Polarity::kPositive) {
    throw PreconditionError("negative record '" + record.image_id + "' yields no dialogue");
  }
  InstructionRecord out;
  out.image = {record.dataset, record.image_id, record.rel_path};
  out.record_id = record.dataset + "/" + record.image_id + "/" + std::string(taxonomy::to_string(task));
  out.task = task;
  out.split = record.split;
  out.template_index = template_index;
  out.category = std::string(category);
  std::string body(template_text);
  switch (task) {
    case Task::kCLS:
      out.response = out.category;
      break;
    case Task::kREG:
    case Task::kREC: {
      if (!record.bbox) {
        throw PreconditionError(std::string(taxonomy::to_string(task)) + " needs a box; record '" + record.image_id +
                                "' has none");
      }
      out.bbox_text = taxonomy::encode_bbox(*record.bbox, record.width, record.height);
      if (task == Task::kREG) {
        body = replace_all(body, kCoordinatesSlot, *out.bbox_text);
        out.response = out.category;
      } else {
        body = replace_all(body, kCategorySlot, out.category);
        out.response = *out.bbox_text;
      }
      break;
    }
    case Task::kCAP:
      if (!caption) throw PreconditionError("CAP needs a caption; record '" + record.image_id + "' has none");
      out.response = *caption;
      break;
  }
  out.instruction = std::string(kImageToken) + "\n" + body;
  return out;
}

CompileResult compile(std::span<const taxonomy::DatasetManifest> manifests, const taxonomy::Taxonomy& tax,
                      const TemplateBank& bank, const CaptionProvider& provider, const CompileConfig& config) {
  if (config.tasks.empty()) throw UsageError("compile: task subset must be non-empty");
  std::vector<const taxonomy::ImageRecord*> images;
  for (const auto& m : manifests)
    for (const auto& r : m.records) images.push_back(&r);
  std::sort(images.begin(), images.end(), [](const auto* a, const auto* b) {
    return std::tie(a->dataset, a->image_id) < std::tie(b->dataset, b->image_id);
  });

  struct Slot {
    std::vector<InstructionRecord> records;
    std::vector<std::string> errors;
  };
  std::vector<Slot> slots(images.size());
  parallel_for(images.size(), config.threads, [&](std::size_t i) {
    const auto& rec = *images[i];
    if (rec.split == Split::kUnassigned) {
      throw PolicyError("compile: record '" + rec.image_id + "' has no split");
    }
    if (rec.polarity != taxonomy::Polarity::kPositive) return;
    const std::string& category = tax.at(rec.child_category).name;
    for (Task task : taxonomy::kTasks) {
      if (!config.tasks.count(task)) continue;
      if ((task == Task::kREG || task == Task::kREC) && !rec.bbox) continue;
      if (task == Task::kCAP && !config.include_captions) continue;
      SplitMix64 rng(keyed_hash(config.seed, rec.dataset, rec.image_id, taxonomy::to_string(task)));
      const TemplateChoice choice = select_template(bank, task, rng);
      std::optional<std::string> caption;
      if (task == Task::kCAP) {
        try {
          caption = provider.caption({rec.dataset, rec.image_id, rec.rel_path}, category,
                                     build_caption_prompt(tax, category));
        } catch (const ProviderError& e) {
          slots[i].errors.push_back(rec.dataset + "/" + rec.image_id + "/CAP skipped: " + e.what());
          continue;
        }
      }
      slots[i].records.push_back(render_dialogue(task, rec, category, choice.text, choice.index, caption));
    }
  });

  CompileResult result;
  std::array<taxonomy::SplitCounts, 3> counts{};
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto& c = counts[static_cast<std::size_t>(images[i]->split)];
    if (images[i]->polarity == taxonomy::Polarity::kNegative) {
      ++c.negatives;
    } else {
      ++c.positives;
      if (images[i]->bbox) ++c.boxed_positives;
    }
    for (auto& r : slots[i].records) {
      ++result.summary.dialogues[static_cast<std::size_t>(r.split)][task_index(r.task)];
      result.records.push_back(std::move(r));
    }
    for (auto& e : slots[i].errors) result.errors.push_back(std::move(e));
  }
  result.summary.splits = counts;
  return result;
}

namespace {

json to_json(const InstructionRecord& r) {
  json j;
  j["id"] = r.record_id;
  j["image"] = {{"dataset", r.image.dataset}, {"image_id", r.image.image_id}, {"rel_path", r.image.rel_path}};
  j["task"] = taxonomy::to_string(r.task);
  j["instruction"] = r.instruction;
  j["response"] = r.response;
  j["split"] = taxonomy::to_string(r.split);
  j["template_index"] = r.template_index;
  j["category"] = r.category;
  if (r.bbox_text) j["bbox_text"] = *r.bbox_text;
  return j;
}

InstructionRecord from_json(const json& j) {
  InstructionRecord r;
  r.record_id = j.at("id").get<std::string>();
  const auto& img = j.at("image");
  r.image = {img.at("dataset").get<std::string>(), img.at("image_id").get<std::string>(),
             img.at("rel_path").get<std::string>()};
  r.task = taxonomy::parse_task(j.at("task").get<std::string>());
  r.instruction = j.at("instruction").get<std::string>();
  r.response = j.at("response").get<std::string>();
  r.split = taxonomy::parse_split(j.at("split").get<std::string>());
  r.template_index = j.at("template_index").get<std::size_t>();
  if (r.template_index >= kTemplatesPerTask) throw ParseError("template_index out of range");
  r.category = j.at("category").get<std::string>();
  if (j.contains("bbox_text") && !j["bbox_text"].is_null()) r.bbox_text = j["bbox_text"].get<std::string>();
  return r;
}

}  // namespace

void write_records(std::span<const InstructionRecord> records, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write '" + path.string() + "'");
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

std::vector<InstructionRecord> read_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open '" + path.string() + "'");
  std::vector<InstructionRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw ParseError(path.string() + ": line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

namespace {

bool seen_split(Split s) { return s == Split::kTrain || s == Split::kVal; }

}  // namespace

std::vector<InstructionRecord> pre_align_corpus(std::span<const InstructionRecord> records) {
  std::vector<InstructionRecord> out;
  for (const auto& r : records)
    if (r.task == Task::kCAP && seen_split(r.split)) out.push_back(r);
  return out;
}

std::vector<InstructionRecord> sft_corpus(std::span<const InstructionRecord> records) {
  std::vector<InstructionRecord> out;
  for (const auto& r : records)
    if (r.task != Task::kCAP && seen_split(r.split)) out.push_back(r);
  return out;
}

}  // namespace colongpt::instruct
