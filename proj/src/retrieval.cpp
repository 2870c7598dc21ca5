#include "figrot/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>

#include "figrot/error.hpp"

namespace figrot {

Gallery::Gallery(EmbeddingStore store) : store_(std::move(store)) {
  for (std::size_t r = 0; r < store_.count(); ++r) {
    double ss = 0;
    for (float v : store_.row(r)) ss += double(v) * double(v);
    if (std::abs(std::sqrt(ss) - 1.0) > kUnitNormTolerance) {
      fail(ErrorKind::kValidation, "gallery row " + std::to_string(r) + " ('" + store_.id(r) + "') is not unit norm");
    }
  }
  std::vector<std::uint32_t> order(store_.count());
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return store_.id(a) < store_.id(b); });
  id_rank_.resize(order.size());
  for (std::uint32_t i = 0; i < order.size(); ++i) id_rank_[order[i]] = i;
}

namespace {

struct Candidate {
  double score;
  std::uint32_t rank;
  std::uint32_t row;
};

bool better(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.rank < b.rank;
}

// Top-k candidates of rows [begin, end).
std::vector<Candidate> scan(std::span<const float> q, const Gallery& g, std::size_t begin, std::size_t end,
                            std::size_t k, std::optional<std::size_t> skip) {
  std::vector<Candidate> c;
  c.reserve(end - begin);
  for (std::size_t r = begin; r < end; ++r) {
    if (skip && *skip == r) continue;
    auto row = g.store().row(r);
    double s = 0;
    for (std::size_t d = 0; d < q.size(); ++d) s += double(q[d]) * double(row[d]);
    c.push_back({s, g.id_rank(r), static_cast<std::uint32_t>(r)});
  }
  const std::size_t keep = std::min(k, c.size());
  std::partial_sort(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(keep), c.end(), better);
  c.resize(keep);
  return c;
}

}  // namespace

RankedList search_topk(std::span<const float> query, const Gallery& gallery, std::size_t k,
                       std::optional<std::string_view> exclude_id, std::string query_key, std::size_t shards) {
  if (k == 0) fail(ErrorKind::kValidation, "search: K must be at least 1");
  if (gallery.size() == 0) fail(ErrorKind::kValidation, "search: empty gallery");
  if (query.size() != gallery.dim()) {
    fail(ErrorKind::kShape, "search: query dim " + std::to_string(query.size()) + " != gallery dim " +
                                std::to_string(gallery.dim()));
  }
  double ss = 0;
  for (float v : query) ss += double(v) * double(v);
  if (!std::isfinite(ss) || std::abs(std::sqrt(ss) - 1.0) > 1e-4) {
    fail(ErrorKind::kValidation, "search: query is not unit norm");
  }
  std::optional<std::size_t> skip;
  if (exclude_id) skip = gallery.store().find(*exclude_id);

  shards = std::clamp<std::size_t>(shards, 1, gallery.size());
  std::vector<Candidate> merged;
  for (std::size_t s = 0; s < shards; ++s) {
    const std::size_t begin = gallery.size() * s / shards;
    const std::size_t end = gallery.size() * (s + 1) / shards;
    auto part = scan(query, gallery, begin, end, k, skip);
    merged.insert(merged.end(), part.begin(), part.end());
  }
  const std::size_t keep = std::min(k, merged.size());
  std::partial_sort(merged.begin(), merged.begin() + static_cast<std::ptrdiff_t>(keep), merged.end(), better);

  RankedList out{std::move(query_key), k, {}};
  out.results.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) out.results.push_back({gallery.id(merged[i].row), merged[i].score});
  return out;
}

std::vector<RankedList> batch_search(const Tensor<float>& queries, const Gallery& gallery, std::size_t k,
                                     std::span<const std::optional<std::string>> exclusions,
                                     std::span<const std::string> keys, const SearchOptions& options) {
  const std::size_t n = queries.rows();
  if (!exclusions.empty() && exclusions.size() != n) {
    fail(ErrorKind::kShape, "batch_search: " + std::to_string(exclusions.size()) + " exclusions for " +
                                std::to_string(n) + " queries");
  }
  if (!keys.empty() && keys.size() != n) {
    fail(ErrorKind::kShape, "batch_search: " + std::to_string(keys.size()) + " keys for " + std::to_string(n) + " queries");
  }
  std::vector<RankedList> out(n);
  std::vector<std::string> errors(n);
  std::vector<ErrorKind> kinds(n, ErrorKind::kValidation);

  auto run = [&](std::size_t i) {
    try {
      std::optional<std::string_view> ex;
      if (!exclusions.empty() && exclusions[i]) ex = *exclusions[i];
      out[i] = search_topk(queries.row(i), gallery, k, ex, keys.empty() ? std::to_string(i) : keys[i], options.shards);
    } catch (const Error& e) {
      errors[i] = e.what();
      kinds[i] = e.kind();
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  };

  const std::size_t threads = std::clamp<std::size_t>(options.threads, 1, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) run(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < n; i += threads) run(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!errors[i].empty()) fail(kinds[i], "query " + std::to_string(i) + ": " + errors[i]);
  }
  return out;
}

nlohmann::ordered_json to_json(const RankedList& list) {
  nlohmann::ordered_json j;
  j["query"] = list.query;
  auto results = nlohmann::ordered_json::array();
  for (const auto& r : list.results) results.push_back({{"id", r.id}, {"score", r.score}});
  j["results"] = std::move(results);
  return j;
}

void write_ranked_lists(const std::filesystem::path& path, std::span<const RankedList> lists) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  for (const auto& l : lists) out << to_json(l).dump() << '\n';
}

}  // namespace figrot
