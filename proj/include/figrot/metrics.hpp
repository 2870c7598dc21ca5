#pragma once

// Ranking metrics and the per-task report.
//
// AP@K = (1 / min(K, R)) * sum_{k<=K} P@k * rel_k with R relevant items, so
// a perfect ranking scores 1 at any K. mAP@all uses K = gallery size.

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "figrot/dataset.hpp"
#include "figrot/embedstore.hpp"
#include "figrot/retrieval.hpp"
#include "figrot/vagfem.hpp"
#include "json.hpp"

namespace figrot {

using RelevantSet = std::unordered_set<std::string>;

double average_precision_at_k(std::span<const std::string> ranked, const RelevantSet& relevant, std::size_t k);
double recall_at_k(std::span<const std::string> ranked, const RelevantSet& relevant, std::size_t k);
double precision_at_k(std::span<const std::string> ranked, const RelevantSet& relevant, std::size_t k);
double rank1(std::span<const std::string> ranked, const RelevantSet& relevant);

// Report columns, in output order.
inline constexpr std::array<std::string_view, 12> kMetricNames = {
    "mAP@10", "mAP@25", "mAP@50", "mAP@100", "mAP@200", "mAP@all",
    "R@10",   "R@50",   "P@10",   "P@100",   "P@200",   "rank1"};

struct TaskMetrics {
  std::size_t queries = 0;
  std::vector<double> values;  // aligned with kMetricNames

  double at(std::string_view metric) const;
};

struct MetricReport {
  std::map<Task, TaskMetrics> per_task;  // only tasks with queries
  TaskMetrics overall;
  std::optional<double> macro_map100;
  nlohmann::ordered_json metadata;
};

// Per-query metric vector for one ranking. An empty relevant set yields
// zeros.
std::vector<double> query_metrics(std::span<const std::string> ranked, const RelevantSet& relevant,
                                  std::size_t gallery_size);

struct EvalConfig {
  FusionMode mode = FusionMode::kVagfem;
  std::size_t batch_size = 256;
  bool self_exclusion = true;
  SearchOptions search;
  std::string checkpoint_id;
  nlohmann::ordered_json config_echo;  // copied into metadata
};

// Query embeddings are given, one row per record.
MetricReport evaluate_embeddings(const Tensor<float>& queries, std::span<const TripletRecord> records,
                                 const Gallery& gallery, const EvalConfig& config,
                                 std::vector<RankedList>* rankings = nullptr);

MetricReport evaluate(std::span<const TripletRecord> records, const VagfemModel<float>& model, const DataBundle& data,
                      const EvalConfig& config, std::vector<RankedList>* rankings = nullptr);

nlohmann::ordered_json to_json(const MetricReport& report);
std::string to_tsv(const MetricReport& report);

}  // namespace figrot
