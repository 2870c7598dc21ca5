#pragma once

// Exact cosine top-K over a gallery of unit rows. Ranking order is
// (score desc, id asc); every shard count gives the same lists.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "figrot/embedstore.hpp"
#include "figrot/tensor.hpp"
#include "json.hpp"

namespace figrot {

class Gallery {
 public:
  // Rows must be unit norm within 1e-5.
  explicit Gallery(EmbeddingStore store);

  const EmbeddingStore& store() const noexcept { return store_; }
  std::size_t size() const noexcept { return store_.count(); }
  std::size_t dim() const noexcept { return store_.dim(); }
  const std::string& id(std::size_t row) const { return store_.id(row); }
  // Position of row's id in lexicographic id order.
  std::uint32_t id_rank(std::size_t row) const { return id_rank_[row]; }

 private:
  EmbeddingStore store_;
  std::vector<std::uint32_t> id_rank_;
};

struct ScoredId {
  std::string id;
  double score = 0.0;

  friend bool operator==(const ScoredId&, const ScoredId&) = default;
};

struct RankedList {
  std::string query;
  std::size_t k = 0;
  std::vector<ScoredId> results;

  friend bool operator==(const RankedList&, const RankedList&) = default;
};

struct SearchOptions {
  std::size_t shards = 1;
  std::size_t threads = 1;
};

RankedList search_topk(std::span<const float> query, const Gallery& gallery, std::size_t k,
                       std::optional<std::string_view> exclude_id = std::nullopt, std::string query_key = {},
                       std::size_t shards = 1);

// `keys` and `exclusions` may be empty; otherwise one entry per query row.
std::vector<RankedList> batch_search(const Tensor<float>& queries, const Gallery& gallery, std::size_t k,
                                     std::span<const std::optional<std::string>> exclusions = {},
                                     std::span<const std::string> keys = {}, const SearchOptions& options = {});

nlohmann::ordered_json to_json(const RankedList& list);
void write_ranked_lists(const std::filesystem::path& path, std::span<const RankedList> lists);

}  // namespace figrot
