#include "colongpt/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "colongpt/parallel.hpp"

namespace colongpt::eval {
namespace {

std::size_t task_index(Task t) {
  switch (t) {
    case Task::kCLS:
      return 0;
    case Task::kREG:
      return 1;
    case Task::kREC:
      return 2;
    case Task::kCAP:
      break;
  }
  throw UsageError("task has no benchmark column");
}

std::optional<Column> column_of(Split s) {
  if (s == Split::kVal) return Column::kSeen;
  if (s == Split::kTest) return Column::kUnseen;
  return std::nullopt;
}

}  // namespace

std::string normalize_category(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
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

Prediction parse_prediction(Task task, std::string_view raw, int width, int height) {
  Prediction p;
  p.task = task;
  p.raw = std::string(raw);
  if (task == Task::kREC) {
    try {
      p.box = taxonomy::decode_bbox(raw, width, height);
    } catch (const std::exception& e) {
      p.error = e.what();
    }
    return p;
  }
  std::string norm = normalize_category(raw);
  if (norm.empty()) {
    p.error = "empty prediction";
  } else {
    p.category = std::move(norm);
  }
  return p;
}

double score_accuracy(std::span<const Prediction> predictions, std::span<const GoldLabel> gold) {
  if (predictions.empty()) throw AlignmentError("score_accuracy: no predictions to score");
  if (predictions.size() != gold.size()) {
    throw AlignmentError("score_accuracy: " + std::to_string(predictions.size()) + " predictions vs " +
                         std::to_string(gold.size()) + " gold labels");
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i].record_id != gold[i].record_id) {
      throw AlignmentError("score_accuracy: record '" + predictions[i].record_id + "' aligned with '" +
                           gold[i].record_id + "'");
    }
    const Prediction& p = predictions[i];
    if (!p.failed() && p.category && *p.category == normalize_category(gold[i].category)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

double score_iou(const BBox& a, const BBox& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

const std::optional<TaskMetrics>& BenchmarkReport::get(Task t, Column c) const {
  return metrics[task_index(t)][static_cast<std::size_t>(c)];
}
std::optional<TaskMetrics>& BenchmarkReport::get(Task t, Column c) {
  return metrics[task_index(t)][static_cast<std::size_t>(c)];
}

BenchmarkRun run_benchmark(const Model& model, std::span<const InstructionRecord> records, const std::string& label,
                           const FrameLookup& frame, std::size_t threads) {
  std::vector<const InstructionRecord*> todo;
  for (const InstructionRecord& r : records) {
    if (column_of(r.split)) todo.push_back(&r);
  }
  std::sort(todo.begin(), todo.end(),
            [](const InstructionRecord* a, const InstructionRecord* b) { return a->record_id < b->record_id; });
  for (std::size_t i = 1; i < todo.size(); ++i) {
    if (todo[i]->record_id == todo[i - 1]->record_id) {
      throw AlignmentError("duplicate record id '" + todo[i]->record_id + "'");
    }
  }

  BenchmarkRun run;
  run.report.label = label;
  run.predictions.resize(todo.size());
  std::vector<double> scores(todo.size(), 0.0);
  parallel_for(todo.size(), threads, [&](std::size_t i) {
    const InstructionRecord& r = *todo[i];
    const auto [w, h] = frame ? frame(r) : std::pair<int, int>{999, 999};
    Prediction p;
    try {
      p = parse_prediction(r.task, model.generate(r), w, h);
    } catch (const std::exception& e) {
      p = Prediction{};
      p.task = r.task;
      p.error = std::string("generation failed: ") + e.what();
    }
    p.record_id = r.record_id;
    p.split = r.split;
    if (!p.failed()) {
      switch (r.task) {
        case Task::kCLS:
        case Task::kREG:
          scores[i] = *p.category == normalize_category(r.category) ? 1.0 : 0.0;
          break;
        case Task::kREC:
          scores[i] = score_iou(*p.box, taxonomy::decode_bbox(r.response, w, h));
          break;
        case Task::kCAP:
          scores[i] = p.category->find(normalize_category(r.category)) != std::string::npos ? 1.0 : 0.0;
          break;
      }
    }
    run.predictions[i] = std::move(p);
  });

  for (std::size_t i = 0; i < todo.size(); ++i) {
    const Prediction& p = run.predictions[i];
    const Column col = *column_of(p.split);
    std::optional<TaskMetrics>& slot = p.task == Task::kCAP ? run.report.caption_keyword[static_cast<std::size_t>(col)]
                                                            : run.report.get(p.task, col);
    if (!slot) slot = TaskMetrics{p.task, 0, 0.0, 0};
    slot->samples += 1;
    slot->value += scores[i];
    if (p.failed()) slot->parse_errors += 1;
  }
  auto finish = [](std::optional<TaskMetrics>& m) {
    if (m) m->value /= static_cast<double>(m->samples);
  };
  for (auto& row : run.report.metrics) {
    for (auto& m : row) finish(m);
  }
  for (auto& m : run.report.caption_keyword) finish(m);
  return run;
}

Format parse_format(std::string_view s) {
  if (s == "table") return Format::kTable;
  if (s == "csv") return Format::kCsv;
  throw UsageError("unknown report format '" + std::string(s) + "' (expected table or csv)");
}

std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f%%", fraction * 100.0);
  return buf;
}

std::string emit_report(std::span<const BenchmarkReport> reports, Format format) {
  static const std::array<Task, 3> kCols = {Task::kCLS, Task::kREG, Task::kREC};
  std::vector<std::vector<std::string>> rows;
  for (const BenchmarkReport& r : reports) {
    std::vector<std::string> row = {r.label};
    for (Task t : kCols) {
      for (Column c : {Column::kSeen, Column::kUnseen}) {
        const auto& m = r.get(t, c);
        row.push_back(m ? format_percent(m->value) : "-");
      }
    }
    rows.push_back(std::move(row));
  }

  std::ostringstream os;
  if (format == Format::kCsv) {
    os << "model,CLS_A_seen,CLS_A_unseen,REG_A_seen,REG_A_unseen,REC_IoU_seen,REC_IoU_unseen\n";
    for (const auto& row : rows) {
      for (std::size_t i = 0; i < row.size(); ++i) {
        const bool quote = row[i].find_first_of(",\"\n") != std::string::npos;
        if (i) os << ',';
        if (quote) {
          os << '"';
          for (char ch : row[i]) os << (ch == '"' ? "\"\"" : std::string(1, ch));
          os << '"';
        } else {
          os << row[i];
        }
      }
      os << '\n';
    }
    return os.str();
  }

  const std::vector<std::string> top = {"Model", "CLS (A)", "", "REG (A)", "", "REC (IoU)", ""};
  const std::vector<std::string> sub = {"", "seen", "unseen", "seen", "unseen", "seen", "unseen"};
  std::vector<std::size_t> width(7, 0);
  for (std::size_t i = 0; i < 7; ++i) width[i] = std::max(top[i].size(), sub[i].size());
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < 7; ++i) width[i] = std::max(width[i], row[i].size());
  }
  auto line = [&](const std::vector<std::string>& cells) {
    std::string s;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) s += " | ";
      std::string cell = cells[i];
      cell.resize(width[i], ' ');
      s += cell;
    }
    while (!s.empty() && s.back() == ' ') s.pop_back();
    os << s << '\n';
  };
  line(top);
  line(sub);
  std::string rule;
  for (std::size_t i = 0; i < 7; ++i) {
    if (i) rule += "-+-";
    rule += std::string(width[i], '-');
  }
  os << rule << '\n';
  for (const auto& row : rows) line(row);
  return os.str();
}

namespace {

nlohmann::ordered_json metrics_json(const std::optional<TaskMetrics>& m) {
  if (!m) return nullptr;
  return {{"samples", m->samples}, {"value", m->value}, {"parse_errors", m->parse_errors}};
}

std::optional<TaskMetrics> metrics_from(const nlohmann::json& j, Task t) {
  if (j.is_null()) return std::nullopt;
  return TaskMetrics{t, j.at("samples").get<std::size_t>(), j.at("value").get<double>(),
                     j.at("parse_errors").get<std::size_t>()};
}

}  // namespace

std::string report_to_json(const BenchmarkReport& report) {
  nlohmann::ordered_json j;
  j["label"] = report.label;
  for (Task t : {Task::kCLS, Task::kREG, Task::kREC}) {
    j[std::string(taxonomy::to_string(t))] = {{"seen", metrics_json(report.get(t, Column::kSeen))},
                                              {"unseen", metrics_json(report.get(t, Column::kUnseen))}};
  }
  j["CAP_keyword"] = {{"seen", metrics_json(report.caption_keyword[0])},
                      {"unseen", metrics_json(report.caption_keyword[1])}};
  return j.dump(2);
}

BenchmarkReport report_from_json(std::string_view text) {
  BenchmarkReport r;
  try {
    const auto j = nlohmann::json::parse(text);
    r.label = j.at("label").get<std::string>();
    for (Task t : {Task::kCLS, Task::kREG, Task::kREC}) {
      const auto& e = j.at(std::string(taxonomy::to_string(t)));
      r.get(t, Column::kSeen) = metrics_from(e.at("seen"), t);
      r.get(t, Column::kUnseen) = metrics_from(e.at("unseen"), t);
    }
    if (j.contains("CAP_keyword")) {
      r.caption_keyword[0] = metrics_from(j.at("CAP_keyword").at("seen"), Task::kCAP);
      r.caption_keyword[1] = metrics_from(j.at("CAP_keyword").at("unseen"), Task::kCAP);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("report json: ") + e.what());
  }
  return r;
}

void write_predictions(std::span<const Prediction> predictions, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw UsageError("cannot write predictions '" + path.string() + "'");
  for (const Prediction& p : predictions) {
    nlohmann::ordered_json j;
    j["record_id"] = p.record_id;
    j["task"] = taxonomy::to_string(p.task);
    j["split"] = taxonomy::to_string(p.split);
    j["raw"] = p.raw;
    if (p.category) j["parsed"] = *p.category;
    if (p.box) j["parsed"] = {p.box->x1, p.box->y1, p.box->x2, p.box->y2};
    if (p.error) j["error"] = *p.error;
    os << j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
  }
}

}  // namespace colongpt::eval
