#pragma once

// Embedding stores, triplet datasets and the dataset-curation helpers.
//
// Store file layout (every multi-byte integer little-endian):
//   "FIGE" | u32 version=1 | u64 count | u32 dim | u8 flags (bit0 normalized)
//   | 3 zero bytes | count*dim binary32 LE, row-major
//   | count x (u16 byte length, UTF-8 id)

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace figrot {

// Text id used for image-only queries.
inline constexpr std::string_view kEmptyTextId = "__EMPTY__";

inline constexpr std::uint32_t kStoreVersion = 1;
inline constexpr float kUnitNormTolerance = 1e-5f;

class EmbeddingStore {
 public:
  EmbeddingStore() = default;
  // Validates ids (unique), values (finite, count*dim long) and, when
  // `normalized` is set, unit row norms.
  EmbeddingStore(std::size_t dim, std::vector<std::string> ids, std::vector<float> values,
                 bool normalized);

  std::size_t dim() const noexcept { return dim_; }
  std::size_t count() const noexcept { return ids_.size(); }
  bool normalized() const noexcept { return normalized_; }
  bool empty() const noexcept { return ids_.empty(); }

  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::string& id(std::size_t row) const { return ids_.at(row); }
  std::span<const float> values() const noexcept { return values_; }
  std::span<const float> row(std::size_t r) const { return {values_.data() + r * dim_, dim_}; }

  std::optional<std::size_t> find(std::string_view id) const;
  bool contains(std::string_view id) const { return find(id).has_value(); }
  // Throws a validation error naming the id when it is absent.
  std::span<const float> lookup(std::string_view id) const;
  std::size_t index_of(std::string_view id) const;

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<float> values_;
  bool normalized_ = false;
  std::unordered_map<std::string, std::size_t> index_;
};

void write_store(const std::filesystem::path& path, const EmbeddingStore& store);
// Builds and validates the store, then writes it.
void write_store(const std::filesystem::path& path, std::size_t dim, std::span<const float> values,
                 std::span<const std::string> ids, bool normalized);
EmbeddingStore read_store(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_store(const EmbeddingStore& store);
EmbeddingStore decode_store(std::span<const std::uint8_t> bytes);

// ---- triplets ------------------------------------------------------------

enum class Task { kCir, kSbir, kCstbir };

inline constexpr Task kAllTasks[] = {Task::kCir, Task::kSbir, Task::kCstbir};

std::string_view to_string(Task task);
std::optional<Task> parse_task(std::string_view name);

struct TripletRecord {
  Task task = Task::kCir;
  std::string ref_id;
  std::optional<std::string> text;
  std::optional<std::string> text_id;
  std::vector<std::string> target_ids;

  bool image_only() const { return !text_id.has_value(); }
  // The text embedding id fed to the fusion model.
  std::string_view effective_text_id() const { return text_id ? std::string_view(*text_id) : kEmptyTextId; }
};

// JSON-lines reader. Blank lines are skipped; errors carry the 1-based line.
std::vector<TripletRecord> load_triplets(const std::filesystem::path& path);
std::vector<TripletRecord> parse_triplets(std::string_view text);
void save_triplets(const std::filesystem::path& path, std::span<const TripletRecord> records);
std::string triplet_to_json_line(const TripletRecord& record);

// ---- curation --------------------------------------------------------------

struct ScoredPair {
  std::string image_id;
  std::string text_id;
  double score = 0.0;
};

// Pairs with score strictly above `threshold`, in input order.
std::vector<ScoredPair> clip_filter(std::span<const ScoredPair> pairs, double threshold);

std::vector<ScoredPair> load_scored_pairs(const std::filesystem::path& path);
void save_scored_pairs(const std::filesystem::path& path, std::span<const ScoredPair> pairs);

struct TaskStats {
  std::size_t count = 0;
  std::size_t with_text = 0;
  std::optional<double> mean_text_length;
};

struct DatasetStats {
  std::map<Task, TaskStats> per_task;  // always holds all three tasks
  TaskStats total;
};

std::size_t word_count(std::string_view text);
DatasetStats dataset_stats(std::span<const TripletRecord> records);

}  // namespace figrot
