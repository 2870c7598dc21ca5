#pragma once

#include <string_view>

#include "figrot/autodiff.hpp"
#include "figrot/vagfem.hpp"
#include "json.hpp"

namespace figrot {

// Where the triplet negative comes from: the fused (reference, empty text)
// query, or the raw reference embedding.
enum class NegativeSource { kFusedEmptyText, kRawReference };

std::string_view to_string(NegativeSource s);
NegativeSource parse_negative_source(std::string_view name);

struct LossConfig {
  double temperature = 0.01;
  double margin = 0.3;
  double lambda = 0.2;
  bool triplet_enabled = true;
  NegativeSource negative_source = NegativeSource::kFusedEmptyText;

  void validate() const;
  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

nlohmann::ordered_json to_json(const LossConfig& c);
LossConfig loss_config_from_json(const nlohmann::json& j);

struct LossBreakdown {
  double infonce = 0.0;
  double triplet = 0.0;
  double total = 0.0;
};

// -(1/B) sum_i log softmax_j(<x_i, y_j> / tau)[i]. Rows of x and y must be
// unit norm within 1e-4.
template <typename T>
ad::Var<T> infonce(ad::Var<T> x, ad::Var<T> y, double temperature);

// (1/B) sum_i max(0, |q_i - p_i|^2 - |q_i - n_i|^2 + margin)
template <typename T>
ad::Var<T> triplet_loss(ad::Var<T> q, ad::Var<T> p, ad::Var<T> n, double margin);

// One training batch gathered from the stores: reference embeddings, text
// embeddings (the empty-text row for image-only queries), the empty-text
// row repeated, and target gallery embeddings.
template <typename T>
struct TrainingBatch {
  Tensor<T> images;
  Tensor<T> texts;
  Tensor<T> empty_texts;
  Tensor<T> targets;

  std::size_t size() const { return images.rows(); }
};

template <typename T>
struct CombinedLoss {
  ad::Var<T> total;
  ad::Var<T> infonce;
  ad::Var<T> triplet;
  LossBreakdown breakdown;
  BatchMask mask;
};

// Runs the query forward and, when the triplet term is on, a second forward
// on (reference, empty text) that reuses the query batch's mask.
template <typename T>
CombinedLoss<T> combined_loss(const BoundModel<T>& model, const TrainingBatch<T>& batch, FusionMode mode,
                              const LossConfig& config);

}  // namespace figrot
