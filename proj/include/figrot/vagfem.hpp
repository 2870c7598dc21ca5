#pragma once

// Variance-guided feature mask query encoder.
//
//   H_V, H_T = Transformer([proj(V) + pos_0 ; proj(T) + pos_1])
//   w        = logistic(Linear([H_V ; H_T]))                 (B x 1)
//   U        = normalize(w * V + (1 - w) * T)                 (B x D)
//   M        = top-k columns of U by batch variance
//   U'       = logistic(U) * M * U + U
//   out      = normalize(U')
//
// The transformer only produces the scalar blend weight; everything after it
// stays in the D-dimensional embedding space.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "figrot/autodiff.hpp"
#include "figrot/tensor.hpp"
#include "json.hpp"

namespace figrot {

struct FusionConfig {
  std::size_t embed_dim = 256;
  std::size_t model_dim = 512;
  std::size_t layers = 2;
  std::size_t heads = 8;
  std::size_t head_dim = 64;
  std::size_t ffn_mult = 4;
  double mask_ratio = 0.2;
  double epsilon = 1e-12;

  void validate() const;
  // ceil(mask_ratio * embed_dim), 0 when mask_ratio is 0.
  std::size_t mask_k() const;

  friend bool operator==(const FusionConfig&, const FusionConfig&) = default;
};

nlohmann::ordered_json to_json(const FusionConfig& c);
FusionConfig fusion_config_from_json(const nlohmann::json& j);

enum class FusionMode { kVagfem, kBaseline };

std::string_view to_string(FusionMode mode);
FusionMode parse_fusion_mode(std::string_view name);

struct BatchMask {
  std::vector<std::size_t> selected;  // strictly increasing
  std::vector<std::uint8_t> mask;     // 1 on selected dims
  std::vector<double> variance;       // per-dimension population variance

  std::size_t dim() const { return mask.size(); }
};

// Selects the k highest-variance columns, ties resolved toward lower index.
BatchMask select_top_variance(std::span<const double> variance, std::size_t k);

template <typename T>
BatchMask variance_mask(const Tensor<T>& united, std::size_t k);

template <typename T>
class VagfemModel {
 public:
  using Param = ad::Parameter<T>;

  VagfemModel() = default;
  // Fan-in scaled uniform init for projections; the blend head and the slot
  // embeddings start at zero, so an untrained model blends with w = 0.5.
  VagfemModel(const FusionConfig& config, std::uint64_t seed);

  const FusionConfig& config() const noexcept { return config_; }
  // Mask ratio is not a shape parameter and may change between runs.
  void set_mask_ratio(double ratio);

  std::vector<Param>& parameters() noexcept { return params_; }
  const std::vector<Param>& parameters() const noexcept { return params_; }
  Param& parameter(std::string_view name);
  const Param& parameter(std::string_view name) const;
  std::size_t parameter_count() const;

  void zero_grad();

  template <typename U>
  VagfemModel<U> cast() const;

  // Builds a model from named tensors, checking names and shapes against
  // the layout implied by `config`.
  static VagfemModel from_parameters(const FusionConfig& config, std::vector<Param> params);

 private:
  template <typename U>
  friend class VagfemModel;

  FusionConfig config_;
  std::vector<Param> params_;
};

// Parameter nodes of a model registered on one tape.
template <typename T>
struct BoundModel {
  const FusionConfig* config = nullptr;
  std::vector<ad::Var<T>> vars;  // same order as VagfemModel::parameters()

  ad::Var<T> operator[](std::size_t i) const { return vars[i]; }
};

// Trainable binding: gradients flow into the model's Parameter::grad.
template <typename T>
BoundModel<T> bind_trainable(ad::Tape<T>& tape, VagfemModel<T>& model);
// Inference binding: weights are borrowed as constants.
template <typename T>
BoundModel<T> bind_frozen(ad::Tape<T>& tape, const VagfemModel<T>& model);

template <typename T>
struct SlotStates {
  ad::Var<T> image;
  ad::Var<T> text;
};

template <typename T>
SlotStates<T> fuse_tokens(const BoundModel<T>& model, ad::Var<T> images, ad::Var<T> texts);

template <typename T>
ad::Var<T> fusion_weight(const BoundModel<T>& model, const SlotStates<T>& states);

// Fails with a numeric error naming the row when a blended row has norm
// below 1e-8.
template <typename T>
ad::Var<T> unite(ad::Var<T> images, ad::Var<T> texts, ad::Var<T> weight);

template <typename T>
ad::Var<T> gate_residual_normalize(ad::Var<T> united, const BatchMask& mask);

template <typename T>
struct FusionOutput {
  ad::Var<T> query;   // final unit rows
  ad::Var<T> united;  // U
  ad::Var<T> weight;  // w
  BatchMask mask;     // empty selection in baseline mode
};

// Re-normalizes `images` and `texts` on entry. In vagfem mode the mask is
// computed from this batch unless `fixed_mask` is given.
template <typename T>
FusionOutput<T> forward(const BoundModel<T>& model, const Tensor<T>& images, const Tensor<T>& texts,
                        FusionMode mode, const BatchMask* fixed_mask = nullptr);

// Inference over an arbitrary number of queries: U is computed in chunks of
// `batch_size`, the mask from the column variance of all rows together, so
// the result does not depend on `batch_size`.
template <typename T>
Tensor<T> encode_queries(const VagfemModel<T>& model, const Tensor<T>& images, const Tensor<T>& texts,
                         FusionMode mode, std::size_t batch_size = 256, BatchMask* mask_out = nullptr);

}  // namespace figrot
