#include "figrot/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "figrot/error.hpp"
#include "figrot/vagfem.hpp"

namespace figrot {

Histogram cosine_histogram(std::span<const double> cosines, std::size_t bins) {
  if (cosines.empty()) fail(ErrorKind::kValidation, "cosine_histogram: empty input");
  if (bins == 0) fail(ErrorKind::kValidation, "cosine_histogram: bins must be at least 1");
  Histogram h;
  h.edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) h.edges[i] = -1.0 + 2.0 * double(i) / double(bins);
  h.counts.assign(bins, 0);
  double sum = 0.0;
  for (std::size_t i = 0; i < cosines.size(); ++i) {
    double c = cosines[i];
    if (!std::isfinite(c) || c < -1.0 - 1e-6 || c > 1.0 + 1e-6) {
      fail(ErrorKind::kNumeric, "cosine_histogram: value " + std::to_string(c) + " at " + std::to_string(i) +
                                    " outside [-1, 1]");
    }
    c = std::clamp(c, -1.0, 1.0);
    auto bin = static_cast<std::size_t>(std::floor((c + 1.0) / 2.0 * double(bins)));
    h.counts[std::min(bin, bins - 1)] += 1;
    sum += cosines[i];
  }
  h.samples = cosines.size();
  h.mean = sum / double(h.samples);
  double ss = 0.0;
  for (double c : cosines) ss += (c - h.mean) * (c - h.mean);
  h.stddev = std::sqrt(ss / double(h.samples));
  return h;
}

std::vector<double> paired_cosines(const Tensor<float>& a, const Tensor<float>& b) {
  if (!a.same_shape(b)) fail(ErrorKind::kShape, "paired_cosines: " + a.shape_string() + " vs " + b.shape_string());
  std::vector<double> out(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto x = a.row(r);
    auto y = b.row(r);
    double s = 0.0;
    for (std::size_t d = 0; d < x.size(); ++d) s += double(x[d]) * double(y[d]);
    out[r] = s;
  }
  return out;
}

SimilarityDistribution similarity_distribution(const Tensor<float>& queries, const Tensor<float>& targets,
                                               std::span<const std::string> target_ids, std::uint64_t seed,
                                               std::size_t bins) {
  const std::size_t n = queries.rows();
  if (target_ids.size() != n) fail(ErrorKind::kShape, "similarity_distribution: ids do not match rows");
  SimilarityDistribution out;
  out.positive = cosine_histogram(paired_cosines(queries, targets), bins);

  std::vector<std::size_t> other;
  std::mt19937_64 rng(seed);
  Tensor<float> negatives(n, targets.cols());
  for (std::size_t i = 0; i < n; ++i) {
    other.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (target_ids[j] != target_ids[i]) other.push_back(j);
    }
    if (other.empty()) fail(ErrorKind::kValidation, "similarity_distribution: no non-matching target for query " + std::to_string(i));
    const std::size_t pick = other[static_cast<std::size_t>(rng() % other.size())];
    std::copy(targets.row(pick).begin(), targets.row(pick).end(), negatives.row(i).begin());
  }
  out.negative = cosine_histogram(paired_cosines(queries, negatives), bins);
  return out;
}

std::vector<std::pair<std::size_t, double>> variance_profile(const Tensor<float>& embeddings) {
  if (embeddings.rows() == 0) fail(ErrorKind::kValidation, "variance_profile: no rows");
  const auto stats = variance_mask(embeddings, 0);
  std::vector<std::pair<std::size_t, double>> out;
  for (std::size_t d = 0; d < stats.variance.size(); ++d) out.emplace_back(d, stats.variance[d]);
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

std::vector<std::vector<double>> mask_stability(std::span<const Tensor<float>> batches, std::size_t k) {
  if (k == 0) fail(ErrorKind::kValidation, "mask_stability: k must be at least 1");
  if (batches.size() < 2) fail(ErrorKind::kValidation, "mask_stability: need at least two batches");
  std::vector<std::vector<std::uint8_t>> masks;
  for (const auto& b : batches) {
    if (b.cols() != batches.front().cols()) fail(ErrorKind::kShape, "mask_stability: batches differ in width");
    masks.push_back(variance_mask(b, k).mask);
  }
  const std::size_t n = masks.size();
  std::vector<std::vector<double>> jac(n, std::vector<double>(n, 1.0));
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      std::size_t inter = 0, uni = 0;
      for (std::size_t d = 0; d < masks[a].size(); ++d) {
        inter += masks[a][d] & masks[b][d];
        uni += masks[a][d] | masks[b][d];
      }
      jac[a][b] = jac[b][a] = uni ? double(inter) / double(uni) : 1.0;
    }
  }
  return jac;
}

double target_preference(const Tensor<float>& queries, const Tensor<float>& targets, const Tensor<float>& references) {
  const auto pos = paired_cosines(queries, targets);
  const auto ref = paired_cosines(queries, references);
  if (pos.empty()) fail(ErrorKind::kValidation, "target_preference: no rows");
  std::size_t wins = 0;
  for (std::size_t i = 0; i < pos.size(); ++i) wins += pos[i] > ref[i];
  return double(wins) / double(pos.size());
}

nlohmann::ordered_json to_json(const Histogram& h) {
  nlohmann::ordered_json j;
  j["edges"] = h.edges;
  j["counts"] = h.counts;
  j["samples"] = h.samples;
  j["mean"] = h.mean;
  j["stddev"] = h.stddev;
  return j;
}

nlohmann::ordered_json profile_json(const std::vector<std::pair<std::size_t, double>>& profile) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& [dim, var] : profile) arr.push_back({{"dim", dim}, {"variance", var}});
  return arr;
}

namespace {

std::ofstream open_text(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out.precision(17);
  return out;
}

}  // namespace

void write_histogram_dat(const std::filesystem::path& path, const Histogram& h) {
  auto out = open_text(path);
  out << "# bin_centre count\n";
  for (std::size_t i = 0; i < h.counts.size(); ++i) out << 0.5 * (h.edges[i] + h.edges[i + 1]) << ' ' << h.counts[i] << '\n';
}

void write_profile_dat(const std::filesystem::path& path, const std::vector<std::pair<std::size_t, double>>& profile) {
  auto out = open_text(path);
  out << "# dim variance\n";
  for (const auto& [dim, var] : profile) out << dim << ' ' << var << '\n';
}

}  // namespace figrot
