#include "figrot/metrics.hpp"

#include <algorithm>
#include <sstream>

#include "figrot/error.hpp"

namespace figrot {

namespace {

void require_relevant(const RelevantSet& relevant, const char* what) {
  if (relevant.empty()) fail(ErrorKind::kValidation, std::string(what) + ": empty relevant set");
}

void require_k(std::size_t k, const char* what) {
  if (k == 0) fail(ErrorKind::kValidation, std::string(what) + ": K must be at least 1");
}

std::size_t hits_in_top(std::span<const std::string> ranked, const RelevantSet& relevant, std::size_t k) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) hits += relevant.count(ranked[i]);
  return hits;
}

}  // namespace

double average_precision_at_k(std::span<const std::string> ranked, const RelevantSet& relevant, std::size_t k) {
  require_relevant(relevant, "average_precision_at_k");
  require_k(k, "average_precision_at_k");
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) {
    if (relevant.count(ranked[i])) {
      ++hits;
      sum += double(hits) / double(i + 1);
    }
  }
  return sum / double(std::min(k, relevant.size()));
}

double recall_at_k(std::span<const std::string> ranked, const RelevantSet& relevant, std::size_t k) {
  require_relevant(relevant, "recall_at_k");
  require_k(k, "recall_at_k");
  return hits_in_top(ranked, relevant, k) > 0 ? 1.0 : 0.0;
}

double precision_at_k(std::span<const std::string> ranked, const RelevantSet& relevant, std::size_t k) {
  require_relevant(relevant, "precision_at_k");
  require_k(k, "precision_at_k");
  return double(hits_in_top(ranked, relevant, k)) / double(k);
}

double rank1(std::span<const std::string> ranked, const RelevantSet& relevant) {
  if (ranked.empty()) fail(ErrorKind::kValidation, "rank1: empty ranking");
  return relevant.count(ranked.front()) ? 1.0 : 0.0;
}

double TaskMetrics::at(std::string_view metric) const {
  for (std::size_t i = 0; i < kMetricNames.size(); ++i) {
    if (kMetricNames[i] == metric) return values.at(i);
  }
  fail(ErrorKind::kUsage, "unknown metric '" + std::string(metric) + "'");
}

std::vector<double> query_metrics(std::span<const std::string> ranked, const RelevantSet& relevant,
                                  std::size_t gallery_size) {
  if (relevant.empty()) return std::vector<double>(kMetricNames.size(), 0.0);
  const std::size_t all = std::max<std::size_t>(gallery_size, 1);
  return {average_precision_at_k(ranked, relevant, 10),  average_precision_at_k(ranked, relevant, 25),
          average_precision_at_k(ranked, relevant, 50),  average_precision_at_k(ranked, relevant, 100),
          average_precision_at_k(ranked, relevant, 200), average_precision_at_k(ranked, relevant, all),
          recall_at_k(ranked, relevant, 10),             recall_at_k(ranked, relevant, 50),
          precision_at_k(ranked, relevant, 10),          precision_at_k(ranked, relevant, 100),
          precision_at_k(ranked, relevant, 200),         ranked.empty() ? 0.0 : rank1(ranked, relevant)};
}

namespace {

struct Accumulator {
  std::size_t n = 0;
  std::vector<double> sums = std::vector<double>(kMetricNames.size(), 0.0);

  void add(const std::vector<double>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) sums[i] += v[i];
    ++n;
  }

  TaskMetrics finish() const {
    TaskMetrics t;
    t.queries = n;
    for (double s : sums) t.values.push_back(n ? s / double(n) : 0.0);
    return t;
  }
};

}  // namespace

MetricReport evaluate_embeddings(const Tensor<float>& queries, std::span<const TripletRecord> records,
                                 const Gallery& gallery, const EvalConfig& config, std::vector<RankedList>* rankings) {
  if (queries.rows() != records.size()) {
    fail(ErrorKind::kShape, "evaluate: " + std::to_string(queries.rows()) + " query rows for " +
                                std::to_string(records.size()) + " records");
  }
  if (records.empty()) fail(ErrorKind::kValidation, "evaluate: no records");
  std::vector<std::optional<std::string>> exclusions(records.size());
  std::vector<std::string> keys(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    keys[i] = std::to_string(i);
    if (config.self_exclusion) exclusions[i] = records[i].ref_id;
    for (const auto& t : records[i].target_ids) {
      if (!gallery.store().contains(t)) {
        fail(ErrorKind::kValidation, "record " + std::to_string(i) + ": unresolvable target id '" + t + "'");
      }
    }
  }
  auto lists = batch_search(queries, gallery, gallery.size(), exclusions, keys, config.search);

  std::map<Task, Accumulator> by_task;
  Accumulator overall;
  auto flagged = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    RelevantSet relevant(records[i].target_ids.begin(), records[i].target_ids.end());
    if (config.self_exclusion) relevant.erase(records[i].ref_id);
    if (relevant.empty()) flagged.push_back(i);
    std::vector<std::string> ids;
    ids.reserve(lists[i].results.size());
    for (const auto& r : lists[i].results) ids.push_back(r.id);
    const auto m = query_metrics(ids, relevant, gallery.size());
    by_task[records[i].task].add(m);
    overall.add(m);
  }

  MetricReport report;
  double macro = 0.0;
  for (const auto& [task, acc] : by_task) {
    report.per_task[task] = acc.finish();
    macro += report.per_task[task].at("mAP@100");
  }
  report.overall = overall.finish();
  if (!report.per_task.empty()) report.macro_map100 = macro / double(report.per_task.size());

  auto& meta = report.metadata;
  meta["gallery_size"] = gallery.size();
  meta["query_count"] = records.size();
  meta["self_exclusion"] = config.self_exclusion;
  meta["all_targets_excluded"] = flagged;
  meta["checkpoint"] = config.checkpoint_id;
  meta["mode"] = to_string(config.mode);
  meta["ap_definition"] = "truncated, normalizer min(K, R)";
  meta["config"] = config.config_echo;
  if (rankings != nullptr) *rankings = std::move(lists);
  return report;
}

MetricReport evaluate(std::span<const TripletRecord> records, const VagfemModel<float>& model, const DataBundle& data,
                      const EvalConfig& config, std::vector<RankedList>* rankings) {
  validate_records(records, data);
  std::vector<std::size_t> all(records.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  Tensor<float> images, texts;
  gather_queries(records, all, data, images, texts);
  BatchMask mask;
  const auto queries = encode_queries(model, images, texts, config.mode, config.batch_size, &mask);
  auto report = evaluate_embeddings(queries, records, Gallery(data.gallery), config, rankings);
  report.metadata["mask_ratio"] = model.config().mask_ratio;
  report.metadata["mask_size"] = mask.selected.size();
  return report;
}

namespace {

nlohmann::ordered_json task_json(const TaskMetrics& t) {
  nlohmann::ordered_json j;
  j["queries"] = t.queries;
  for (std::size_t i = 0; i < kMetricNames.size(); ++i) j[std::string(kMetricNames[i])] = t.values.at(i);
  return j;
}

}  // namespace

nlohmann::ordered_json to_json(const MetricReport& report) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json tasks = nlohmann::ordered_json::object();
  for (Task t : kAllTasks) {
    auto it = report.per_task.find(t);
    tasks[std::string(to_string(t))] = it == report.per_task.end() ? nlohmann::ordered_json(nullptr) : task_json(it->second);
  }
  j["tasks"] = std::move(tasks);
  j["overall"] = task_json(report.overall);
  j["macro_mAP@100"] = report.macro_map100 ? nlohmann::ordered_json(*report.macro_map100) : nlohmann::ordered_json(nullptr);
  j["metadata"] = report.metadata;
  return j;
}

std::string to_tsv(const MetricReport& report) {
  std::ostringstream out;
  out.precision(17);
  out << "task\tqueries";
  for (auto name : kMetricNames) out << '\t' << name;
  out << '\n';
  auto row = [&](std::string_view label, const TaskMetrics& t) {
    out << label << '\t' << t.queries;
    for (double v : t.values) out << '\t' << v;
    out << '\n';
  };
  for (const auto& [task, metrics] : report.per_task) row(to_string(task), metrics);
  row("all", report.overall);
  out << "macro_mAP@100\t";
  if (report.macro_map100) out << *report.macro_map100;
  out << '\n';
  return out.str();
}

}  // namespace figrot
