#pragma once

// AdamW training of the fusion model over triplet batches.
//
// Checkpoint layout (little-endian):
//   "FGCK" | u32 version=1 | u32 n | n bytes UTF-8 JSON (configs, step, seed)
//   | parameter records | first-moment records | second-moment records
// where a record is u16 name length, name, u8 rank, u32 dims[rank], f32 data.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "figrot/dataset.hpp"
#include "figrot/losses.hpp"
#include "figrot/vagfem.hpp"
#include "json.hpp"

namespace figrot {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t batch_size = 32;
  std::size_t epochs = 2;
  std::uint64_t seed = 0;
  FusionMode mode = FusionMode::kVagfem;
  LossConfig loss;
  FusionConfig fusion;
  std::optional<std::size_t> max_triplets;

  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> first;
  std::vector<Tensor<T>> second;
  std::uint64_t step = 0;

  static AdamState zeros_like(const std::vector<ad::Parameter<T>>& params);
};

// One bias-corrected Adam update with decoupled weight decay
// (p <- p * (1 - lr * wd), applied before the gradient step). Fails before
// touching anything when a gradient is non-finite, naming the parameter.
template <typename T>
void adamw_step(std::vector<ad::Parameter<T>>& params, AdamState<T>& state, const TrainConfig& config);

struct Checkpoint {
  TrainConfig config;
  VagfemModel<float> model;
  AdamState<float> optimizer;

  std::uint64_t step() const { return optimizer.step; }
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// With `expected`, the stored fusion shape must match it.
Checkpoint load_checkpoint(const std::filesystem::path& path, const FusionConfig* expected = nullptr);

struct StepLog {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  std::size_t batch_size = 0;
  LossBreakdown loss;
};

struct TrainLog {
  std::vector<StepLog> steps;
  std::vector<LossBreakdown> epoch_means;  // one per epoch touched by this run
  std::size_t records_used = 0;
  double wall_seconds = 0.0;
  nlohmann::ordered_json config;
};

nlohmann::ordered_json to_json(const StepLog& s);
void write_train_log(const std::filesystem::path& jsonl, const TrainLog& log);
nlohmann::ordered_json summary_json(const TrainLog& log);

struct TrainOptions {
  const Checkpoint* resume = nullptr;
  // Stop once the optimizer has taken this many steps in total.
  std::optional<std::uint64_t> stop_at_step;
  std::function<void(const StepLog&)> on_step;
};

struct TrainResult {
  Checkpoint checkpoint;
  TrainLog log;
};

// Record indices for a data-size cap: uniform without replacement inside
// each task class, class sizes proportional to the full set (largest
// remainder), returned in file order.
std::vector<std::size_t> stratified_subsample(std::span<const TripletRecord> records, std::size_t cap,
                                              std::uint64_t seed);

// Seeded permutation of [0, n) for one epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

TrainResult train(std::span<const TripletRecord> records, const DataBundle& data, const TrainConfig& config,
                  const TrainOptions& options = {});

// Mean combined loss of `model` over the records, in fixed batches and
// without updating anything.
LossBreakdown evaluate_loss(const VagfemModel<float>& model, std::span<const TripletRecord> records,
                            const DataBundle& data, const TrainConfig& config);

}  // namespace figrot
