#include "colongpt/taxonomy.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include <json.hpp>

#include "colongpt/parallel.hpp"
#include "colongpt/rng.hpp"

namespace colongpt::taxonomy {

using nlohmann::json;

std::string_view to_string(Level l) {
  switch (l) {
    case Level::kRoot: return "root";
    case Level::kParent: return "parent";
    case Level::kChild: return "child";
  }
  return "child";
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
    case Split::kUnassigned: return "unassigned";
  }
  return "unassigned";
}

std::string_view to_string(Task t) {
  switch (t) {
    case Task::kCLS: return "CLS";
    case Task::kREG: return "REG";
    case Task::kREC: return "REC";
    case Task::kCAP: return "CAP";
  }
  return "CLS";
}

Level parse_level(std::string_view s) {
  if (s == "root") return Level::kRoot;
  if (s == "parent") return Level::kParent;
  if (s == "child") return Level::kChild;
  throw ParseError("unknown category level '" + std::string(s) + "'");
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  if (s == "unassigned") return Split::kUnassigned;
  throw ParseError("unknown split '" + std::string(s) + "'");
}

Task parse_task(std::string_view s) {
  for (Task t : kTasks)
    if (to_string(t) == s) return t;
  throw ParseError("unknown task '" + std::string(s) + "'");
}

std::string normalize_name(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

ValidationReport validate_taxonomy(std::span<const CategoryNode> nodes) {
  ValidationReport r;
  std::map<std::string, const CategoryNode*> by_id;
  for (const auto& n : nodes) {
    if (!by_id.emplace(n.id, &n).second) r.violations.push_back("duplicate id '" + n.id + "'");
    switch (n.level) {
      case Level::kRoot: ++r.roots; break;
      case Level::kParent: ++r.parents; break;
      case Level::kChild: ++r.children; break;
    }
  }
  std::array<std::set<std::string>, 3> names;
  for (const auto& n : nodes) {
    const std::string norm = normalize_name(n.name);
    if (norm.empty()) r.violations.push_back("node '" + n.id + "' has an empty name");
    if (!names[static_cast<int>(n.level)].insert(norm).second) {
      r.violations.push_back("duplicate " + std::string(to_string(n.level)) + " name '" + norm + "'");
    }
    if (n.level == Level::kRoot) {
      if (n.parent_id) r.violations.push_back("root '" + n.id + "' has a parent");
      continue;
    }
    if (!n.parent_id) {
      r.violations.push_back(std::string(to_string(n.level)) + " '" + n.id + "' has no parent");
      continue;
    }
    auto it = by_id.find(*n.parent_id);
    if (it == by_id.end()) {
      r.violations.push_back("node '" + n.id + "' references unknown parent '" + *n.parent_id + "'");
      continue;
    }
    const Level pl = it->second->level;
    if (n.level == Level::kParent && pl != Level::kRoot) {
      r.violations.push_back("parent '" + n.id + "' attached to " + std::string(to_string(pl)));
    }
    if (n.level == Level::kChild && pl == Level::kRoot) {
      r.violations.push_back("child attached to root: '" + n.id + "'");
    }
    if (n.level == Level::kChild && pl == Level::kChild) {
      r.violations.push_back("child attached to child: '" + n.id + "'");
    }
  }
  return r;
}

Taxonomy::Taxonomy(std::vector<CategoryNode> nodes) : nodes_(std::move(nodes)) {
  const ValidationReport report = validate_taxonomy(nodes_);
  if (!report.ok()) {
    std::string msg = "invalid taxonomy:";
    for (const auto& v : report.violations) msg += "\n  " + v;
    throw DataError(msg);
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    by_id_.emplace(nodes_[i].id, i);
    if (nodes_[i].level == Level::kChild) child_by_name_.emplace(normalize_name(nodes_[i].name), i);
  }
}

const CategoryNode* Taxonomy::find(std::string_view id) const {
  auto it = by_id_.find(id);
  return it == by_id_.end() ? nullptr : &nodes_[it->second];
}

const CategoryNode& Taxonomy::at(std::string_view id) const {
  if (const auto* n = find(id)) return *n;
  throw DataError("unknown category id '" + std::string(id) + "'");
}

const CategoryNode* Taxonomy::find_child_by_name(std::string_view name) const {
  auto it = child_by_name_.find(normalize_name(name));
  return it == child_by_name_.end() ? nullptr : &nodes_[it->second];
}

const CategoryNode& Taxonomy::root_of(std::string_view id) const {
  const CategoryNode* n = &at(id);
  while (n->parent_id) n = &at(*n->parent_id);
  return *n;
}

Polarity Taxonomy::polarity_of(std::string_view child_id) const {
  const CategoryNode& n = at(child_id);
  if (n.level != Level::kChild) {
    throw DataError("category '" + std::string(child_id) + "' is not a child-level category");
  }
  return normalize_name(root_of(child_id).name) == "negative" ? Polarity::kNegative : Polarity::kPositive;
}

std::vector<const CategoryNode*> Taxonomy::children() const {
  std::vector<const CategoryNode*> out;
  for (const auto& n : nodes_)
    if (n.level == Level::kChild) out.push_back(&n);
  return out;
}

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write '" + path.string() + "'");
  out << content;
}

}  // namespace

Taxonomy read_taxonomy(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  if (!j.is_array()) throw ParseError(path.string() + ": taxonomy must be a list of nodes");
  std::vector<CategoryNode> nodes;
  try {
    for (const auto& e : j) {
      CategoryNode n;
      n.id = e.at("id").get<std::string>();
      n.name = e.at("name").get<std::string>();
      n.level = parse_level(e.at("level").get<std::string>());
      if (e.contains("parent_id") && !e["parent_id"].is_null()) n.parent_id = e["parent_id"].get<std::string>();
      nodes.push_back(std::move(n));
    }
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return Taxonomy(std::move(nodes));
}

void write_taxonomy(const Taxonomy& tax, const std::filesystem::path& path) {
  json j = json::array();
  for (const auto& n : tax.nodes()) {
    json e = {{"id", n.id}, {"name", n.name}, {"level", to_string(n.level)}};
    if (n.parent_id) e["parent_id"] = *n.parent_id;
    j.push_back(std::move(e));
  }
  write_file(path, j.dump(1) + "\n");
}

// ---- box codec -----------------------------------------------------------

namespace {

long quantize(double v, int extent) { return std::lround(999.0 * v / static_cast<double>(extent)); }

double dequantize(long q, int extent) { return static_cast<double>(q) * static_cast<double>(extent) / 999.0; }

const std::regex& box_pattern() {
  static const std::regex re(R"(\[(\d+), (\d+), (\d+), (\d+)\])");
  return re;
}

}  // namespace

std::string encode_bbox(const BBox& b, int width, int height) {
  if (width <= 0 || height <= 0 || !b.valid_in(width, height)) {
    throw MalformedBoxError("box outside image frame or misordered");
  }
  const long x1 = quantize(b.x1, width), y1 = quantize(b.y1, height);
  const long x2 = quantize(b.x2, width), y2 = quantize(b.y2, height);
  if (x1 == x2 || y1 == y2) throw DegenerateBoxError("box collapses on the permille grid");
  std::ostringstream os;
  os << '[' << x1 << ", " << y1 << ", " << x2 << ", " << y2 << ']';
  return os.str();
}

std::optional<BBox> try_decode_bbox(std::string_view text, int width, int height) {
  try {
    return decode_bbox(text, width, height);
  } catch (const DataError&) {
    return std::nullopt;
  }
}

BBox decode_bbox(std::string_view text, int width, int height) {
  std::match_results<std::string_view::const_iterator> m;
  if (!std::regex_search(text.begin(), text.end(), m, box_pattern())) {
    throw ParseError("no \"[int, int, int, int]\" box in text");
  }
  long q[4];
  for (int i = 0; i < 4; ++i) {
    const std::string digits = m[i + 1].str();
    if (digits.size() > 6) throw MalformedBoxError("box coordinate out of range");
    q[i] = std::stol(digits);
  }
  BBox b{dequantize(q[0], width), dequantize(q[1], height), dequantize(q[2], width), dequantize(q[3], height)};
  if (!b.valid_in(width, height)) throw MalformedBoxError("decoded box violates ordering or frame bounds");
  return b;
}

// ---- splits ----------------------------------------------------------------

DatasetManifest assign_splits(const DatasetManifest& manifest, std::uint64_t seed, std::size_t threads) {
  if (manifest.split_policy == SplitPolicy::kPredefined) {
    for (const auto& r : manifest.records) {
      if (r.split == Split::kUnassigned) {
        throw PolicyError("predefined manifest '" + manifest.dataset + "' has unassigned record '" + r.image_id + "'");
      }
    }
    return manifest;
  }
  DatasetManifest out = manifest;
  std::sort(out.records.begin(), out.records.end(), [](const ImageRecord& a, const ImageRecord& b) {
    return std::tie(a.dataset, a.image_id) < std::tie(b.dataset, b.image_id);
  });
  for (std::size_t i = 1; i < out.records.size(); ++i) {
    if (out.records[i].dataset == out.records[i - 1].dataset && out.records[i].image_id == out.records[i - 1].image_id) {
      throw DataError("duplicate image_id '" + out.records[i].image_id + "' in dataset '" + out.records[i].dataset + "'");
    }
  }
  std::vector<std::uint64_t> keys(out.records.size());
  parallel_for(out.records.size(), threads, [&](std::size_t i) {
    keys[i] = keyed_hash(seed, out.records[i].dataset, out.records[i].image_id);
  });
  std::map<std::pair<std::string, std::string>, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < out.records.size(); ++i) {
    strata[{out.records[i].dataset, out.records[i].child_category}].push_back(i);
  }
  for (auto& [key, idx] : strata) {
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return std::tie(keys[a], out.records[a].image_id) < std::tie(keys[b], out.records[b].image_id);
    });
    const std::size_t n = idx.size();
    const std::size_t cut_train = n * kTrainTenths / 10;
    const std::size_t cut_val = n * (kTrainTenths + kValTenths) / 10;
    for (std::size_t k = 0; k < n; ++k) {
      out.records[idx[k]].split = k < cut_train ? Split::kTrain : (k < cut_val ? Split::kVal : Split::kTest);
    }
  }
  return out;
}

// ---- counting ----------------------------------------------------------------

namespace {
constexpr std::size_t idx(Split s) { return static_cast<std::size_t>(s); }
constexpr std::size_t idx(Task t) { return static_cast<std::size_t>(t); }
}  // namespace

CountSummary CountSummary::from_split_counts(const std::array<SplitCounts, 3>& splits) {
  CountSummary s;
  s.splits = splits;
  for (std::size_t i = 0; i < 3; ++i) {
    s.dialogues[i][idx(Task::kCLS)] = splits[i].positives;
    s.dialogues[i][idx(Task::kCAP)] = splits[i].positives;
    s.dialogues[i][idx(Task::kREG)] = splits[i].boxed_positives;
    s.dialogues[i][idx(Task::kREC)] = splits[i].boxed_positives;
  }
  return s;
}

std::uint64_t CountSummary::positives() const {
  std::uint64_t n = 0;
  for (const auto& s : splits) n += s.positives;
  return n;
}

std::uint64_t CountSummary::negatives() const {
  std::uint64_t n = 0;
  for (const auto& s : splits) n += s.negatives;
  return n;
}

std::uint64_t CountSummary::boxed_positives() const {
  std::uint64_t n = 0;
  for (const auto& s : splits) n += s.boxed_positives;
  return n;
}

std::uint64_t CountSummary::images_in(Split s) const {
  return splits[idx(s)].positives + splits[idx(s)].negatives;
}

std::uint64_t CountSummary::task_total(Task t) const {
  std::uint64_t n = 0;
  for (const auto& row : dialogues) n += row[idx(t)];
  return n;
}

std::uint64_t CountSummary::dialogue_total() const {
  std::uint64_t n = 0;
  for (Task t : kTasks) n += task_total(t);
  return n;
}

std::uint64_t CountSummary::dialogues_in(Split s) const {
  std::uint64_t n = 0;
  for (auto v : dialogues[idx(s)]) n += v;
  return n;
}

std::uint64_t CountSummary::pre_align_corpus() const {
  return dialogues[idx(Split::kTrain)][idx(Task::kCAP)] + dialogues[idx(Split::kVal)][idx(Task::kCAP)];
}

std::uint64_t CountSummary::sft_corpus() const {
  std::uint64_t n = 0;
  for (Split s : {Split::kTrain, Split::kVal})
    for (Task t : {Task::kCLS, Task::kREG, Task::kREC}) n += dialogues[idx(s)][idx(t)];
  return n;
}

std::vector<std::string> CountSummary::identity_violations() const {
  std::vector<std::string> v;
  if (task_total(Task::kCLS) != positives()) v.push_back("CLS != positives");
  if (task_total(Task::kCAP) != positives()) v.push_back("CAP != positives");
  if (task_total(Task::kREG) != boxed_positives()) v.push_back("REG != boxed positives");
  if (task_total(Task::kREC) != boxed_positives()) v.push_back("REC != boxed positives");
  if (dialogue_total() != 2 * positives() + 2 * boxed_positives()) v.push_back("dialogues != 2*pos + 2*boxed");
  if (images_total() != positives() + negatives()) v.push_back("images != pos + neg");
  return v;
}

CountSummary summarize(std::span<const DatasetManifest> manifests) {
  std::array<SplitCounts, 3> counts{};
  for (const auto& m : manifests) {
    for (const auto& r : m.records) {
      if (r.split == Split::kUnassigned) {
        throw PolicyError("summarize: record '" + r.image_id + "' of '" + r.dataset + "' has no split");
      }
      auto& c = counts[idx(r.split)];
      if (r.polarity == Polarity::kNegative) {
        ++c.negatives;
      } else {
        ++c.positives;
        if (r.bbox) ++c.boxed_positives;
      }
    }
  }
  return CountSummary::from_split_counts(counts);
}

// ---- manifest io ---------------------------------------------------------------

std::vector<DatasetManifest> read_manifest(const std::filesystem::path& path, const Taxonomy& tax,
                                           std::optional<SplitPolicy> policy) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open manifest '" + path.string() + "'");
  std::map<std::string, DatasetManifest> by_dataset;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    ImageRecord r;
    try {
      const json j = json::parse(line);
      r.image_id = j.at("image_id").get<std::string>();
      r.dataset = j.at("dataset").get<std::string>();
      r.rel_path = j.at("rel_path").get<std::string>();
      r.width = j.at("width").get<int>();
      r.height = j.at("height").get<int>();
      r.child_category = j.at("child_category").get<std::string>();
      if (j.contains("bbox") && !j["bbox"].is_null()) {
        const auto& b = j["bbox"];
        r.bbox = BBox{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
      }
      if (j.contains("split") && !j["split"].is_null()) r.split = parse_split(j["split"].get<std::string>());
    } catch (const json::exception& e) {
      throw ParseError(where + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(where + ": " + e.what());
    }
    if (r.width <= 0 || r.height <= 0) throw DataError(where + ": non-positive image dimensions");
    try {
      r.polarity = tax.polarity_of(r.child_category);
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    if (r.polarity == Polarity::kNegative && r.bbox) throw DataError(where + ": negative record carries a box");
    if (r.bbox && !r.bbox->valid_in(r.width, r.height)) throw DataError(where + ": box outside image frame");
    auto& m = by_dataset[r.dataset];
    m.dataset = r.dataset;
    m.records.push_back(std::move(r));
  }
  std::vector<DatasetManifest> out;
  for (auto& [name, m] : by_dataset) {
    if (policy) {
      m.split_policy = *policy;
    } else {
      const bool all_assigned = std::all_of(m.records.begin(), m.records.end(),
                                            [](const ImageRecord& r) { return r.split != Split::kUnassigned; });
      m.split_policy = all_assigned ? SplitPolicy::kPredefined : SplitPolicy::kProportional;
    }
    out.push_back(std::move(m));
  }
  return out;
}

void write_manifest(std::span<const DatasetManifest> manifests, const std::filesystem::path& path) {
  std::ostringstream os;
  for (const auto& m : manifests) {
    for (const auto& r : m.records) {
      json j;
      j["image_id"] = r.image_id;
      j["dataset"] = r.dataset;
      j["rel_path"] = r.rel_path;
      j["width"] = r.width;
      j["height"] = r.height;
      j["child_category"] = r.child_category;
      if (r.bbox) j["bbox"] = {r.bbox->x1, r.bbox->y1, r.bbox->x2, r.bbox->y2};
      if (r.split != Split::kUnassigned) j["split"] = to_string(r.split);
      os << j.dump() << '\n';
    }
  }
  write_file(path, os.str());
}

}  // namespace colongpt::taxonomy
