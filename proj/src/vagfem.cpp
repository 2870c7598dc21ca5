#include "figrot/vagfem.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "figrot/error.hpp"

namespace figrot {

using ad::Var;

// ---- config -------------------------------------------------------------------

void FusionConfig::validate() const {
  if (embed_dim == 0) fail(ErrorKind::kValidation, "embed_dim must be positive");
  if (layers == 0 || heads == 0 || head_dim == 0 || ffn_mult == 0) {
    fail(ErrorKind::kValidation, "layers, heads, head_dim and ffn_mult must be positive");
  }
  if (model_dim != heads * head_dim) {
    fail(ErrorKind::kValidation, "model_dim " + std::to_string(model_dim) + " != heads * head_dim (" +
                                     std::to_string(heads) + " * " + std::to_string(head_dim) + ")");
  }
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) {
    fail(ErrorKind::kValidation, "mask_ratio must lie in [0, 1]");
  }
  if (!(epsilon > 0.0)) fail(ErrorKind::kValidation, "epsilon must be positive");
}

std::size_t FusionConfig::mask_k() const {
  if (mask_ratio <= 0.0) return 0;
  // The small slack keeps products like 0.2 * 35 from rounding up past 7.
  const double raw = std::ceil(mask_ratio * double(embed_dim) - 1e-9);
  return std::min<std::size_t>(embed_dim, static_cast<std::size_t>(std::max(1.0, raw)));
}

nlohmann::ordered_json to_json(const FusionConfig& c) {
  nlohmann::ordered_json j;
  j["embed_dim"] = c.embed_dim;
  j["model_dim"] = c.model_dim;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["head_dim"] = c.head_dim;
  j["ffn_mult"] = c.ffn_mult;
  j["mask_ratio"] = c.mask_ratio;
  j["activation"] = "gelu";
  j["epsilon"] = c.epsilon;
  return j;
}

FusionConfig fusion_config_from_json(const nlohmann::json& j) {
  FusionConfig c;
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.model_dim = j.value("model_dim", c.model_dim);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.head_dim = j.value("head_dim", c.head_dim);
  c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
  c.mask_ratio = j.value("mask_ratio", c.mask_ratio);
  c.epsilon = j.value("epsilon", c.epsilon);
  return c;
}

std::string_view to_string(FusionMode mode) { return mode == FusionMode::kVagfem ? "vagfem" : "baseline"; }

FusionMode parse_fusion_mode(std::string_view name) {
  if (name == "vagfem") return FusionMode::kVagfem;
  if (name == "baseline") return FusionMode::kBaseline;
  fail(ErrorKind::kValidation, "unknown fusion mode '" + std::string(name) + "'");
}

// ---- mask -------------------------------------------------------------------------

BatchMask select_top_variance(std::span<const double> variance, std::size_t k) {
  const std::size_t dim = variance.size();
  if (k > dim) fail(ErrorKind::kValidation, "mask size " + std::to_string(k) + " exceeds dim " + std::to_string(dim));
  std::vector<std::size_t> order(dim);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return variance[a] > variance[b]; });
  BatchMask m;
  m.variance.assign(variance.begin(), variance.end());
  m.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(m.selected.begin(), m.selected.end());
  m.mask.assign(dim, 0);
  for (std::size_t d : m.selected) m.mask[d] = 1;
  return m;
}

namespace {

template <typename T>
BatchMask mask_from_variance_node(Var<T> variance, std::size_t k) {
  const auto& v = variance.value();
  std::vector<double> var(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) var[i] = double(v[i]);
  return select_top_variance(var, k);
}

}  // namespace

template <typename T>
BatchMask variance_mask(const Tensor<T>& united, std::size_t k) {
  if (united.rows() == 0) fail(ErrorKind::kShape, "variance_mask: empty batch");
  ad::Tape<T> tape;
  return mask_from_variance_node(ad::column_variance(tape.constant_ref(united)), k);
}

// ---- model ------------------------------------------------------------------------

namespace {

struct ParamSpec {
  std::string name;
  std::size_t rows;
  std::size_t cols;
  enum class Init { kUniform, kZero, kOne } init;
};

constexpr std::size_t kPerLayer = 16;

std::vector<ParamSpec> layout(const FusionConfig& c) {
  using I = ParamSpec::Init;
  const std::size_t m = c.model_dim, f = c.model_dim * c.ffn_mult;
  std::vector<ParamSpec> specs{
      {"input_proj.weight", c.embed_dim, m, I::kUniform},
      {"input_proj.bias", 1, m, I::kZero},
      {"slot_embed", 2, m, I::kZero},
  };
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    specs.push_back({p + "ln1.gamma", 1, m, I::kOne});
    specs.push_back({p + "ln1.beta", 1, m, I::kZero});
    for (const char* proj : {"q", "k", "v", "o"}) {
      specs.push_back({p + "attn." + proj + ".weight", m, m, I::kUniform});
      specs.push_back({p + "attn." + proj + ".bias", 1, m, I::kZero});
    }
    specs.push_back({p + "ln2.gamma", 1, m, I::kOne});
    specs.push_back({p + "ln2.beta", 1, m, I::kZero});
    specs.push_back({p + "ffn.fc1.weight", m, f, I::kUniform});
    specs.push_back({p + "ffn.fc1.bias", 1, f, I::kZero});
    specs.push_back({p + "ffn.fc2.weight", f, m, I::kUniform});
    specs.push_back({p + "ffn.fc2.bias", 1, m, I::kZero});
  }
  specs.push_back({"final_ln.gamma", 1, m, I::kOne});
  specs.push_back({"final_ln.beta", 1, m, I::kZero});
  specs.push_back({"omega.weight", 2 * m, 1, I::kZero});
  specs.push_back({"omega.bias", 1, 1, I::kZero});
  return specs;
}

// Indices into the parameter vector.
constexpr std::size_t kInputW = 0, kInputB = 1, kSlot = 2, kFirstLayer = 3;
enum LayerSlot : std::size_t {
  kLn1G, kLn1B, kQW, kQB, kKW, kKB, kVW, kVB, kOW, kOB, kLn2G, kLn2B, kFc1W, kFc1B, kFc2W, kFc2B
};

std::size_t layer_param(std::size_t layer, LayerSlot slot) { return kFirstLayer + layer * kPerLayer + slot; }
std::size_t final_ln_gamma(const FusionConfig& c) { return kFirstLayer + c.layers * kPerLayer; }

}  // namespace

template <typename T>
VagfemModel<T>::VagfemModel(const FusionConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  for (const auto& spec : layout(config_)) {
    Tensor<T> value(spec.rows, spec.cols);
    switch (spec.init) {
      case ParamSpec::Init::kZero: break;
      case ParamSpec::Init::kOne: value.fill(T(1)); break;
      case ParamSpec::Init::kUniform: {
        const double bound = 1.0 / std::sqrt(double(spec.rows));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& v : value.data()) v = static_cast<T>(dist(rng));
        break;
      }
    }
    params_.emplace_back(spec.name, std::move(value));
  }
}

template <typename T>
void VagfemModel<T>::set_mask_ratio(double ratio) {
  FusionConfig c = config_;
  c.mask_ratio = ratio;
  c.validate();
  config_ = c;
}

template <typename T>
typename VagfemModel<T>::Param& VagfemModel<T>::parameter(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  fail(ErrorKind::kValidation, "no parameter named " + std::string(name));
}

template <typename T>
const typename VagfemModel<T>::Param& VagfemModel<T>::parameter(std::string_view name) const {
  return const_cast<VagfemModel*>(this)->parameter(name);
}

template <typename T>
std::size_t VagfemModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
void VagfemModel<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
template <typename U>
VagfemModel<U> VagfemModel<T>::cast() const {
  VagfemModel<U> out;
  out.config_ = config_;
  for (const auto& p : params_) out.params_.emplace_back(p.name, p.value.template cast<U>());
  return out;
}

template <typename T>
VagfemModel<T> VagfemModel<T>::from_parameters(const FusionConfig& config, std::vector<Param> params) {
  config.validate();
  const auto specs = layout(config);
  if (params.size() != specs.size()) {
    fail(ErrorKind::kShape, "expected " + std::to_string(specs.size()) + " parameter tensors, got " +
                                std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    const auto& p = params[i];
    if (p.name != s.name) fail(ErrorKind::kShape, "parameter " + std::to_string(i) + " is '" + p.name + "', expected '" + s.name + "'");
    if (p.value.rows() != s.rows || p.value.cols() != s.cols) {
      fail(ErrorKind::kShape, "parameter " + s.name + " has shape " + p.value.shape_string() + ", config implies " +
                                  std::to_string(s.rows) + "x" + std::to_string(s.cols));
    }
  }
  VagfemModel out;
  out.config_ = config;
  out.params_ = std::move(params);
  for (auto& p : out.params_) {
    if (!p.grad.same_shape(p.value)) p.zero_grad();
  }
  return out;
}

template <typename T>
BoundModel<T> bind_trainable(ad::Tape<T>& tape, VagfemModel<T>& model) {
  BoundModel<T> b{&model.config(), {}};
  for (auto& p : model.parameters()) b.vars.push_back(tape.parameter(p));
  return b;
}

template <typename T>
BoundModel<T> bind_frozen(ad::Tape<T>& tape, const VagfemModel<T>& model) {
  BoundModel<T> b{&model.config(), {}};
  for (const auto& p : model.parameters()) b.vars.push_back(tape.constant_ref(p.value));
  return b;
}

// ---- forward pieces ------------------------------------------------------------------

namespace {

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  return ad::add_row(ad::matmul(x, weight), bias);
}

// m x heads indicator: column h sums the features of head h.
template <typename T>
Tensor<T> head_indicator(std::size_t heads, std::size_t head_dim) {
  Tensor<T> ind(heads * head_dim, heads);
  for (std::size_t c = 0; c < heads * head_dim; ++c) ind(c, c / head_dim) = T(1);
  return ind;
}

// Multi-head attention over the two-token sequence (image slot, text slot)
// of every sample. With two keys the softmax over a query's scores reduces to
// a logistic of the score difference.
template <typename T>
Var<T> two_slot_attention(const BoundModel<T>& m, std::size_t layer, Var<T> x, std::size_t batch,
                          Var<T> indicator) {
  const auto& c = *m.config;
  auto q = linear(x, m[layer_param(layer, kQW)], m[layer_param(layer, kQB)]);
  auto k = linear(x, m[layer_param(layer, kKW)], m[layer_param(layer, kKB)]);
  auto v = linear(x, m[layer_param(layer, kVW)], m[layer_param(layer, kVB)]);
  auto qi = ad::slice_rows(q, 0, batch), qt = ad::slice_rows(q, batch, 2 * batch);
  auto ki = ad::slice_rows(k, 0, batch), kt = ad::slice_rows(k, batch, 2 * batch);
  auto vi = ad::slice_rows(v, 0, batch), vt = ad::slice_rows(v, batch, 2 * batch);

  const T inv_scale = T(1) / std::sqrt(T(c.head_dim));
  auto score = [&](Var<T> a, Var<T> b) { return ad::matmul(ad::mul(a, b), indicator); };
  // Per-head probability that each slot attends to itself.
  auto self_img = ad::logistic(ad::scale(ad::sub(score(qi, ki), score(qi, kt)), inv_scale));
  auto self_txt = ad::logistic(ad::scale(ad::sub(score(qt, kt), score(qt, ki)), inv_scale));
  auto expand = [&](Var<T> w) { return ad::matmul_nt(w, indicator); };

  auto diff = ad::sub(vi, vt);
  auto out_img = ad::add(vt, ad::mul(expand(self_img), diff));
  auto out_txt = ad::sub(vi, ad::mul(expand(self_txt), diff));
  const Var<T> parts[] = {out_img, out_txt};
  return linear(ad::concat_rows<T>(parts), m[layer_param(layer, kOW)], m[layer_param(layer, kOB)]);
}

template <typename T>
void check_inputs(const FusionConfig& c, const Tensor<T>& images, const Tensor<T>& texts) {
  if (images.cols() != c.embed_dim || texts.cols() != c.embed_dim) {
    fail(ErrorKind::kShape, "embedding dim mismatch: model expects " + std::to_string(c.embed_dim) + ", got " +
                                images.shape_string() + " and " + texts.shape_string());
  }
  if (!images.same_shape(texts)) {
    fail(ErrorKind::kShape, "image and text batches differ: " + images.shape_string() + " vs " + texts.shape_string());
  }
  if (images.rows() == 0) fail(ErrorKind::kShape, "empty query batch");
}

}  // namespace

template <typename T>
SlotStates<T> fuse_tokens(const BoundModel<T>& m, Var<T> images, Var<T> texts) {
  const auto& c = *m.config;
  if (images.cols() != c.embed_dim || texts.cols() != c.embed_dim) {
    fail(ErrorKind::kShape, "fuse_tokens: embedding dim mismatch with config");
  }
  ad::Tape<T>& tape = *images.tape;
  const std::size_t batch = images.rows();
  auto slot = m[kSlot];
  auto xi = ad::add_row(linear(images, m[kInputW], m[kInputB]), ad::slice_rows(slot, 0, 1));
  auto xt = ad::add_row(linear(texts, m[kInputW], m[kInputB]), ad::slice_rows(slot, 1, 2));
  const Var<T> tokens[] = {xi, xt};
  auto x = ad::concat_rows<T>(tokens);
  auto indicator = tape.constant(head_indicator<T>(c.heads, c.head_dim));

  for (std::size_t l = 0; l < c.layers; ++l) {
    auto h = ad::layer_norm(x, m[layer_param(l, kLn1G)], m[layer_param(l, kLn1B)]);
    x = ad::add(x, two_slot_attention(m, l, h, batch, indicator));
    h = ad::layer_norm(x, m[layer_param(l, kLn2G)], m[layer_param(l, kLn2B)]);
    h = ad::gelu(linear(h, m[layer_param(l, kFc1W)], m[layer_param(l, kFc1B)]));
    x = ad::add(x, linear(h, m[layer_param(l, kFc2W)], m[layer_param(l, kFc2B)]));
  }
  const std::size_t fl = final_ln_gamma(c);
  x = ad::layer_norm(x, m[fl], m[fl + 1]);
  return {ad::slice_rows(x, 0, batch), ad::slice_rows(x, batch, 2 * batch)};
}

template <typename T>
Var<T> fusion_weight(const BoundModel<T>& m, const SlotStates<T>& states) {
  const std::size_t fl = final_ln_gamma(*m.config);
  const Var<T> parts[] = {states.image, states.text};
  return ad::logistic(linear(ad::concat_cols<T>(parts), m[fl + 2], m[fl + 3]));
}

template <typename T>
Var<T> unite(Var<T> images, Var<T> texts, Var<T> weight) {
  if (weight.cols() != 1 || weight.rows() != images.rows()) {
    fail(ErrorKind::kShape, "unite: weight must be " + std::to_string(images.rows()) + "x1");
  }
  auto blend = ad::add(ad::mul_col(images, weight), ad::mul_col(texts, ad::add_scalar(ad::scale(weight, T(-1)), T(1))));
  const auto& b = blend.value();
  for (std::size_t r = 0; r < b.rows(); ++r) {
    double ss = 0;
    for (T v : b.row(r)) ss += double(v) * double(v);
    if (std::sqrt(ss) < 1e-8) {
      fail(ErrorKind::kNumeric, "degenerate fusion: blended row " + std::to_string(r) + " has near-zero norm");
    }
  }
  return ad::l2_normalize_rows(blend);
}

template <typename T>
Var<T> gate_residual_normalize(Var<T> united, const BatchMask& mask) {
  if (mask.dim() != united.cols()) {
    fail(ErrorKind::kShape, "mask over " + std::to_string(mask.dim()) + " dims applied to " +
                                united.value().shape_string());
  }
  // An empty mask leaves U' = U, which is already unit norm.
  if (mask.selected.empty()) return united;
  Tensor<T> m(united.rows(), united.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t d : mask.selected) m(r, d) = T(1);
  }
  auto gate = ad::mul(ad::logistic(united), united.tape->constant(std::move(m)));
  return ad::l2_normalize_rows(ad::add(ad::mul(gate, united), united));
}

template <typename T>
FusionOutput<T> forward(const BoundModel<T>& m, const Tensor<T>& images, const Tensor<T>& texts, FusionMode mode,
                        const BatchMask* fixed_mask) {
  const auto& c = *m.config;
  check_inputs(c, images, texts);
  auto& tape = *m.vars.front().tape;
  auto v = ad::l2_normalize_rows(tape.constant_ref(images), T(c.epsilon));
  auto t = ad::l2_normalize_rows(tape.constant_ref(texts), T(c.epsilon));
  auto states = fuse_tokens(m, v, t);
  auto w = fusion_weight(m, states);
  auto u = unite(v, t, w);
  FusionOutput<T> out{u, u, w, {}};
  if (mode == FusionMode::kBaseline) return out;
  if (fixed_mask != nullptr) {
    out.mask = *fixed_mask;
  } else {
    out.mask = mask_from_variance_node(ad::column_variance(u), c.mask_k());
  }
  out.query = gate_residual_normalize(u, out.mask);
  return out;
}

template <typename T>
Tensor<T> encode_queries(const VagfemModel<T>& model, const Tensor<T>& images, const Tensor<T>& texts,
                         FusionMode mode, std::size_t batch_size, BatchMask* mask_out) {
  const auto& c = model.config();
  check_inputs(c, images, texts);
  if (batch_size == 0) fail(ErrorKind::kValidation, "batch_size must be positive");
  const std::size_t n = images.rows(), dim = c.embed_dim;
  Tensor<T> united(n, dim);
  for (std::size_t begin = 0; begin < n; begin += batch_size) {
    const std::size_t end = std::min(n, begin + batch_size);
    auto chunk = [&](const Tensor<T>& src) {
      std::vector<T> data(src.data().begin() + begin * dim, src.data().begin() + end * dim);
      return Tensor<T>(end - begin, dim, std::move(data));
    };
    const Tensor<T> chunk_images = chunk(images), chunk_texts = chunk(texts);
    ad::Tape<T> tape;
    auto bound = bind_frozen(tape, model);
    auto out = forward(bound, chunk_images, chunk_texts, FusionMode::kBaseline);
    const auto& u = out.united.value();
    std::copy(u.data().begin(), u.data().end(), united.data().begin() + begin * dim);
  }
  if (mode == FusionMode::kBaseline) {
    if (mask_out) *mask_out = select_top_variance(std::vector<double>(dim, 0.0), 0);
    return united;
  }
  BatchMask mask = variance_mask(united, c.mask_k());
  ad::Tape<T> tape;
  Tensor<T> result = gate_residual_normalize(tape.constant_ref(united), mask).value();
  if (mask_out) *mask_out = std::move(mask);
  return result;
}

// ---- instantiations ---------------------------------------------------------------------

#define FIGROT_INSTANTIATE_VAGFEM(T)                                                                   \
  template class VagfemModel<T>;                                                                        \
  template BatchMask variance_mask(const Tensor<T>&, std::size_t);                                      \
  template BoundModel<T> bind_trainable(ad::Tape<T>&, VagfemModel<T>&);                                 \
  template BoundModel<T> bind_frozen(ad::Tape<T>&, const VagfemModel<T>&);                              \
  template SlotStates<T> fuse_tokens(const BoundModel<T>&, Var<T>, Var<T>);                             \
  template Var<T> fusion_weight(const BoundModel<T>&, const SlotStates<T>&);                            \
  template Var<T> unite(Var<T>, Var<T>, Var<T>);                                                        \
  template Var<T> gate_residual_normalize(Var<T>, const BatchMask&);                                    \
  template FusionOutput<T> forward(const BoundModel<T>&, const Tensor<T>&, const Tensor<T>&, FusionMode, \
                                   const BatchMask*);                                                   \
  template Tensor<T> encode_queries(const VagfemModel<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                    FusionMode, std::size_t, BatchMask*);

FIGROT_INSTANTIATE_VAGFEM(float)
FIGROT_INSTANTIATE_VAGFEM(double)

template VagfemModel<double> VagfemModel<float>::cast<double>() const;
template VagfemModel<float> VagfemModel<double>::cast<float>() const;
template VagfemModel<float> VagfemModel<float>::cast<float>() const;
template VagfemModel<double> VagfemModel<double>::cast<double>() const;

#undef FIGROT_INSTANTIATE_VAGFEM

}  // namespace figrot
