#include "figrot/losses.hpp"

#include <cmath>

#include "figrot/error.hpp"

namespace figrot {

using ad::Var;

std::string_view to_string(NegativeSource s) {
  return s == NegativeSource::kFusedEmptyText ? "fused_empty_text" : "raw_reference";
}

NegativeSource parse_negative_source(std::string_view name) {
  if (name == "fused_empty_text") return NegativeSource::kFusedEmptyText;
  if (name == "raw_reference") return NegativeSource::kRawReference;
  fail(ErrorKind::kValidation, "unknown negative source '" + std::string(name) + "'");
}

void LossConfig::validate() const {
  if (!(temperature > 0.0)) fail(ErrorKind::kValidation, "temperature must be positive");
  if (!(margin >= 0.0)) fail(ErrorKind::kValidation, "margin must be non-negative");
  if (!(lambda >= 0.0)) fail(ErrorKind::kValidation, "lambda must be non-negative");
}

nlohmann::ordered_json to_json(const LossConfig& c) {
  nlohmann::ordered_json j;
  j["temperature"] = c.temperature;
  j["margin"] = c.margin;
  j["lambda"] = c.lambda;
  j["triplet_enabled"] = c.triplet_enabled;
  j["negative_source"] = to_string(c.negative_source);
  return j;
}

LossConfig loss_config_from_json(const nlohmann::json& j) {
  LossConfig c;
  c.temperature = j.value("temperature", c.temperature);
  c.margin = j.value("margin", c.margin);
  c.lambda = j.value("lambda", c.lambda);
  c.triplet_enabled = j.value("triplet_enabled", c.triplet_enabled);
  if (j.contains("negative_source")) c.negative_source = parse_negative_source(j["negative_source"].get<std::string>());
  return c;
}

namespace {

template <typename T>
void require_unit_rows(const char* what, const Tensor<T>& x) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double ss = 0;
    for (T v : x.row(r)) ss += double(v) * double(v);
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-4) {
      fail(ErrorKind::kValidation, std::string(what) + ": row " + std::to_string(r) + " is not unit norm (" +
                                       std::to_string(std::sqrt(ss)) + ")");
    }
  }
}

}  // namespace

template <typename T>
Var<T> infonce(Var<T> x, Var<T> y, double temperature) {
  if (!(temperature > 0.0)) fail(ErrorKind::kValidation, "infonce: temperature must be positive");
  if (!x.value().same_shape(y.value())) {
    fail(ErrorKind::kShape, "infonce: " + x.value().shape_string() + " vs " + y.value().shape_string());
  }
  if (x.rows() == 0) fail(ErrorKind::kShape, "infonce: empty batch");
  require_unit_rows("infonce queries", x.value());
  require_unit_rows("infonce targets", y.value());
  const std::size_t b = x.rows();
  auto logits = ad::scale(ad::matmul_nt(x, y), T(1.0 / temperature));
  Tensor<T> eye(b, b);
  for (std::size_t i = 0; i < b; ++i) eye(i, i) = T(1);
  auto picked = ad::sum(ad::mul(ad::log_softmax(logits), x.tape->constant(std::move(eye))));
  return ad::scale(picked, T(-1) / T(b));
}

template <typename T>
Var<T> triplet_loss(Var<T> q, Var<T> p, Var<T> n, double margin) {
  if (!q.value().same_shape(p.value()) || !q.value().same_shape(n.value())) {
    fail(ErrorKind::kShape, "triplet_loss: shapes " + q.value().shape_string() + ", " + p.value().shape_string() +
                                ", " + n.value().shape_string());
  }
  auto dp = ad::sub(q, p);
  auto dn = ad::sub(q, n);
  auto gap = ad::sub(ad::row_sum(ad::mul(dp, dp)), ad::row_sum(ad::mul(dn, dn)));
  return ad::mean(ad::hinge(ad::add_scalar(gap, T(margin))));
}

template <typename T>
CombinedLoss<T> combined_loss(const BoundModel<T>& model, const TrainingBatch<T>& batch, FusionMode mode,
                              const LossConfig& config) {
  config.validate();
  if (batch.size() == 0) fail(ErrorKind::kValidation, "combined_loss: empty batch");
  auto& tape = *model.vars.front().tape;
  auto q = forward(model, batch.images, batch.texts, mode);
  auto targets = ad::l2_normalize_rows(tape.constant_ref(batch.targets));
  auto nce = infonce(q.query, targets, config.temperature);

  CombinedLoss<T> out;
  out.infonce = nce;
  out.mask = q.mask;
  if (config.triplet_enabled) {
    Var<T> negative;
    if (config.negative_source == NegativeSource::kFusedEmptyText) {
      negative = forward(model, batch.images, batch.empty_texts, mode, &q.mask).query;
    } else {
      negative = ad::l2_normalize_rows(tape.constant_ref(batch.images));
    }
    out.triplet = triplet_loss(q.query, targets, negative, config.margin);
  } else {
    out.triplet = tape.constant(Tensor<T>::scalar(T(0)));
  }
  out.total = ad::add(nce, ad::scale(out.triplet, T(config.lambda)));
  // + 0.0 folds a negative zero into +0 for the logs.
  out.breakdown = {double(nce.value().item()) + 0.0, double(out.triplet.value().item()) + 0.0,
                   double(out.total.value().item()) + 0.0};
  return out;
}

#define FIGROT_INSTANTIATE_LOSSES(T)                                                        \
  template Var<T> infonce(Var<T>, Var<T>, double);                                           \
  template Var<T> triplet_loss(Var<T>, Var<T>, Var<T>, double);                              \
  template CombinedLoss<T> combined_loss(const BoundModel<T>&, const TrainingBatch<T>&, FusionMode, \
                                         const LossConfig&);

FIGROT_INSTANTIATE_LOSSES(float)
FIGROT_INSTANTIATE_LOSSES(double)

#undef FIGROT_INSTANTIATE_LOSSES

}  // namespace figrot
