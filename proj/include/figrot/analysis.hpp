#pragma once

// Similarity histograms and mask diagnostics.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "figrot/tensor.hpp"
#include "json.hpp"

namespace figrot {

struct Histogram {
  std::vector<double> edges;  // bins + 1, uniform over [-1, 1]
  std::vector<std::size_t> counts;
  std::size_t samples = 0;
  double mean = 0.0;
  double stddev = 0.0;  // population
};

// Values within 1e-6 of [-1, 1] are clamped; anything further out is an
// error. The last bin includes 1.
Histogram cosine_histogram(std::span<const double> cosines, std::size_t bins = 50);

// Row-wise dot products of two equally shaped matrices of unit rows.
std::vector<double> paired_cosines(const Tensor<float>& a, const Tensor<float>& b);

struct SimilarityDistribution {
  Histogram positive;
  Histogram negative;
};

// Positives pair query i with target i. Each query also gets one seeded
// negative: a target row whose id differs from its own target id.
SimilarityDistribution similarity_distribution(const Tensor<float>& queries, const Tensor<float>& targets,
                                               std::span<const std::string> target_ids, std::uint64_t seed,
                                               std::size_t bins = 50);

// (dim, population variance) sorted by variance desc, then dim asc.
std::vector<std::pair<std::size_t, double>> variance_profile(const Tensor<float>& embeddings);

// Pairwise Jaccard overlap of each batch's top-k variance dimensions.
std::vector<std::vector<double>> mask_stability(std::span<const Tensor<float>> batches, std::size_t k);

// Fraction of rows where q.t > q.r strictly.
double target_preference(const Tensor<float>& queries, const Tensor<float>& targets, const Tensor<float>& references);

nlohmann::ordered_json to_json(const Histogram& h);
nlohmann::ordered_json profile_json(const std::vector<std::pair<std::size_t, double>>& profile);
// Two columns: bin centre, count.
void write_histogram_dat(const std::filesystem::path& path, const Histogram& h);
// Two columns: dimension, variance.
void write_profile_dat(const std::filesystem::path& path, const std::vector<std::pair<std::size_t, double>>& profile);

}  // namespace figrot
