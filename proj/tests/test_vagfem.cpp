#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "figrot/error.hpp"
#include "figrot/vagfem.hpp"
#include "support.hpp"

using namespace figrot;
using ad::Tape;

namespace {

FusionConfig small_config(std::size_t dim = 16) {
  FusionConfig c;
  c.embed_dim = dim;
  c.model_dim = 8;
  c.heads = 2;
  c.head_dim = 4;
  c.layers = 2;
  return c;
}

// Gives the zero-initialized tensors random values so every path carries signal.
template <typename T>
void randomize_zero_inits(VagfemModel<T>& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (const char* name : {"slot_embed", "omega.weight", "omega.bias"}) {
    auto& p = model.parameter(name);
    p.value = testing::random_tensor<T>(p.value.rows(), p.value.cols(), rng, 0.5);
  }
}

template <typename T>
Tensor<T> run_forward(const VagfemModel<T>& model, const Tensor<T>& v, const Tensor<T>& t, FusionMode mode) {
  Tape<T> tape;
  auto bound = bind_frozen(tape, model);
  return forward(bound, v, t, mode).query.value();
}

template <typename T>
Tensor<T> permute_rows(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  Tensor<T> out(x.rows(), x.cols());
  for (std::size_t r = 0; r < perm.size(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(perm[r], c);
  }
  return out;
}

}  // namespace

TEST_CASE("config validation and mask size") {
  FusionConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.model_dim == 512);
  CHECK(c.mask_k() == 52);
  c.model_dim = 500;
  CHECK_THROWS_AS(c.validate(), Error);
  FusionConfig r = small_config(35);
  r.mask_ratio = 0.2;
  CHECK(r.mask_k() == 7);
  r.mask_ratio = 0.0;
  CHECK(r.mask_k() == 0);
  r.mask_ratio = 0.01;
  CHECK(r.mask_k() == 1);
  r.mask_ratio = 1.5;
  CHECK_THROWS_AS(r.validate(), Error);
  CHECK(fusion_config_from_json(to_json(small_config())) == small_config());
}

TEST_CASE("parameters have unique names and consistent shapes") {
  VagfemModel<float> model(small_config(), 1);
  std::set<std::string> names;
  for (const auto& p : model.parameters()) {
    CHECK(names.insert(p.name).second);
    CHECK(p.grad.same_shape(p.value));
  }
  CHECK(model.parameter("input_proj.weight").value.rows() == 16);
  CHECK(model.parameter("input_proj.weight").value.cols() == 8);
  CHECK(model.parameter("omega.weight").value.rows() == 16);
  CHECK(model.parameter("slot_embed").value.rows() == 2);

  auto params = model.parameters();
  params.pop_back();
  CHECK_THROWS_AS(VagfemModel<float>::from_parameters(small_config(), params), Error);
  CHECK_NOTHROW(VagfemModel<float>::from_parameters(small_config(), model.parameters()));
}

TEST_CASE("fusion weight of an untrained model is one half") {
  VagfemModel<double> model(small_config(), 3);
  std::mt19937_64 rng(1);
  for (std::size_t b : {1u, 3u}) {
    auto v = testing::unit_rows<double>(b, 16, rng);
    auto t = testing::unit_rows<double>(b, 16, rng);
    Tape<double> tape;
    auto bound = bind_frozen(tape, model);
    auto states = fuse_tokens(bound, tape.constant(v), tape.constant(t));
    CHECK(states.image.rows() == b);
    CHECK(states.image.cols() == 8);
    CHECK(states.text.value().all_finite());
    auto w = fusion_weight(bound, states).value();
    CHECK(w.rows() == b);
    CHECK(w.cols() == 1);
    for (std::size_t r = 0; r < b; ++r) CHECK(w(r, 0) == 0.5);
  }
}

TEST_CASE("fusion weight stays inside the open interval") {
  VagfemModel<double> model(small_config(), 3);
  model.parameter("omega.bias").value(0, 0) = 30.0;
  std::mt19937_64 rng(1);
  auto v = testing::unit_rows<double>(2, 16, rng);
  auto t = testing::unit_rows<double>(2, 16, rng);
  Tape<double> tape;
  auto bound = bind_frozen(tape, model);
  auto w = fusion_weight(bound, fuse_tokens(bound, tape.constant(v), tape.constant(t))).value();
  CHECK(w(0, 0) > 0.999999);
  CHECK(w(0, 0) < 1.0);
}

TEST_CASE("slot embeddings break image/text symmetry") {
  VagfemModel<double> model(small_config(), 5);
  randomize_zero_inits(model, 6);
  std::mt19937_64 rng(2);
  auto v = testing::unit_rows<double>(2, 16, rng);
  auto t = testing::unit_rows<double>(2, 16, rng);
  Tape<double> tape;
  auto bound = bind_frozen(tape, model);
  auto a = fuse_tokens(bound, tape.constant(v), tape.constant(t));
  auto b = fuse_tokens(bound, tape.constant(t), tape.constant(v));
  CHECK_FALSE(a.image.value() == b.text.value());
  CHECK_FALSE(a.image.value() == b.image.value());
}

TEST_CASE("unite examples") {
  Tape<double> tape;
  auto v = tape.constant(Tensor<double>::from_rows({{1, 0}, {3, 4}}));
  auto t = tape.constant(Tensor<double>::from_rows({{0, 1}, {0, 2}}));
  auto half = unite(v, t, tape.constant(Tensor<double>(2, 1, 0.5))).value();
  CHECK(half(0, 0) == doctest::Approx(0.70710678).epsilon(1e-8));
  CHECK(half(0, 1) == doctest::Approx(0.70710678).epsilon(1e-8));
  auto one = unite(v, t, tape.constant(Tensor<double>(2, 1, 1.0))).value();
  CHECK(one(1, 0) == doctest::Approx(0.6));
  CHECK(one(1, 1) == doctest::Approx(0.8));
  auto zero = unite(v, t, tape.constant(Tensor<double>(2, 1, 0.0))).value();
  CHECK(zero(1, 0) == 0.0);
  CHECK(zero(1, 1) == doctest::Approx(1.0));

  auto opposite = tape.constant(Tensor<double>::from_rows({{-1, 0}, {0, 1}}));
  try {
    unite(v, opposite, tape.constant(Tensor<double>(2, 1, 0.5)));
    FAIL("degenerate blend accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kNumeric);
    CHECK(std::string(e.what()).find("row 0") != std::string::npos);
  }
}

TEST_CASE("variance mask examples") {
  auto m = select_top_variance(std::vector<double>{3, 1, 2}, 1);
  CHECK(m.selected == std::vector<std::size_t>{0});
  CHECK(m.mask == std::vector<std::uint8_t>{1, 0, 0});

  auto single = variance_mask(Tensor<double>::from_rows({{0.1, 0.5, -0.2, 0.7}}), 2);
  CHECK(single.selected == std::vector<std::size_t>{0, 1});

  auto constant_col = variance_mask(Tensor<double>::from_rows({{1, 0.5, 2}, {1, -0.5, 4}, {1, 0.0, 3}}), 2);
  CHECK(constant_col.selected == std::vector<std::size_t>{1, 2});
  CHECK(constant_col.variance[0] == 0.0);
}

TEST_CASE("variance mask structure on random batches") {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = 1 + rng() % 40, b = 1 + rng() % 10, k = rng() % (d + 1);
    auto u = testing::random_tensor<double>(b, d, rng);
    auto m = variance_mask(u, k);
    REQUIRE(m.selected.size() == k);
    for (std::size_t i = 1; i < k; ++i) CHECK(m.selected[i - 1] < m.selected[i]);
    std::size_t ones = 0;
    for (std::size_t j = 0; j < d; ++j) ones += m.mask[j];
    CHECK(ones == k);
    for (std::size_t s : m.selected) {
      CHECK(m.mask[s] == 1);
      for (std::size_t j = 0; j < d; ++j) {
        if (!m.mask[j]) CHECK((m.variance[j] < m.variance[s] || (m.variance[j] == m.variance[s] && j > s)));
      }
    }
  }
}

TEST_CASE("gated residual examples") {
  Tape<double> tape;
  auto u = tape.constant(Tensor<double>::from_rows({{0.6, 0.8, 0.0}}));
  BatchMask none = select_top_variance(std::vector<double>{0, 0, 0}, 0);
  CHECK(gate_residual_normalize(u, none).value() == u.value());

  BatchMask all = select_top_variance(std::vector<double>{1, 1, 1}, 3);
  auto out = gate_residual_normalize(u, all).value();
  CHECK(out(0, 2) == 0.0);

  // Unnormalized U' on a masked unit coordinate.
  auto e = tape.constant(Tensor<double>::from_rows({{1.0}}));
  auto gate = ad::mul(ad::logistic(e), e);
  CHECK(ad::add(gate, e).value().item() == doctest::Approx(1.73105858).epsilon(1e-9));
}

TEST_CASE("unmasked dimensions pass through unchanged before normalization") {
  std::mt19937_64 rng(12);
  auto u = testing::unit_rows<float>(4, 10, rng);
  auto mask = variance_mask(u, 3);
  Tape<float> tape;
  auto uv = tape.constant(u);
  Tensor<float> m(4, 10);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t d : mask.selected) m(r, d) = 1.0f;
  }
  auto pre = ad::add(ad::mul(ad::mul(ad::logistic(uv), tape.constant(m)), uv), uv).value();
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t d = 0; d < 10; ++d) {
      if (!mask.mask[d]) {
        CHECK(pre(r, d) == u(r, d));
      } else {
        CHECK(std::abs(pre(r, d)) >= std::abs(u(r, d)));
        CHECK(pre(r, d) * u(r, d) >= 0.0f);
      }
    }
    CHECK(testing::row_norm(pre.row(r)) >= 1.0 - 1e-6);
  }
}

TEST_CASE("forward output contract") {
  VagfemModel<float> model(small_config(32), 4);
  randomize_zero_inits(model, 9);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto v = testing::random_tensor<float>(4, 32, rng);
    auto t = testing::random_tensor<float>(4, 32, rng);
    auto q = run_forward(model, v, t, FusionMode::kVagfem);
    CHECK(q.rows() == 4);
    CHECK(q.cols() == 32);
    for (std::size_t r = 0; r < 4; ++r) CHECK(std::abs(testing::row_norm(q.row(r)) - 1.0) <= 1e-6);
  }
  CHECK_THROWS_AS(run_forward(model, Tensor<float>(2, 31, 1.0f), Tensor<float>(2, 31, 1.0f), FusionMode::kVagfem),
                  Error);
}

TEST_CASE("zero mask ratio reproduces the baseline exactly") {
  auto c = small_config();
  c.mask_ratio = 0.0;
  VagfemModel<float> model(c, 8);
  randomize_zero_inits(model, 2);
  std::mt19937_64 rng(5);
  auto v = testing::unit_rows<float>(6, 16, rng);
  auto t = testing::unit_rows<float>(6, 16, rng);
  CHECK(run_forward(model, v, t, FusionMode::kVagfem) == run_forward(model, v, t, FusionMode::kBaseline));
  CHECK(encode_queries(model, v, t, FusionMode::kVagfem) == encode_queries(model, v, t, FusionMode::kBaseline));
}

TEST_CASE("batch permutation permutes outputs") {
  VagfemModel<double> model(small_config(), 11);
  randomize_zero_inits(model, 12);
  std::mt19937_64 rng(6);
  auto v = testing::unit_rows<double>(7, 16, rng);
  auto t = testing::unit_rows<double>(7, 16, rng);
  std::vector<std::size_t> perm{3, 0, 6, 1, 5, 2, 4};
  for (auto mode : {FusionMode::kVagfem, FusionMode::kBaseline}) {
    auto base = run_forward(model, v, t, mode);
    auto permuted = run_forward(model, permute_rows(v, perm), permute_rows(t, perm), mode);
    auto expected = permute_rows(base, perm);
    for (std::size_t i = 0; i < expected.size(); ++i) CHECK(std::abs(permuted[i] - expected[i]) <= 1e-12);
  }
}

TEST_CASE("query encoding does not depend on the chunk size") {
  VagfemModel<float> model(small_config(), 13);
  randomize_zero_inits(model, 14);
  std::mt19937_64 rng(7);
  auto v = testing::unit_rows<float>(23, 16, rng);
  auto t = testing::unit_rows<float>(23, 16, rng);
  BatchMask m1, m2;
  auto a = encode_queries(model, v, t, FusionMode::kVagfem, 4, &m1);
  auto b = encode_queries(model, v, t, FusionMode::kVagfem, 100, &m2);
  CHECK(a == b);
  CHECK(m1.selected == m2.selected);
  CHECK(m1.selected.size() == 4);
}

TEST_CASE("model casts preserve values") {
  VagfemModel<float> model(small_config(), 15);
  auto d = model.cast<double>();
  auto back = d.cast<float>();
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    CHECK(back.parameters()[i].value == model.parameters()[i].value);
  }
}

TEST_CASE("end-to-end gradients match finite differences") {
  VagfemModel<double> model(small_config(16), 21);
  randomize_zero_inits(model, 22);
  std::mt19937_64 rng(23);
  auto v = testing::unit_rows<double>(4, 16, rng);
  auto t = testing::unit_rows<double>(4, 16, rng);
  auto w = testing::random_tensor<double>(4, 16, rng);
  std::vector<ad::Parameter<double>*> params;
  for (auto& p : model.parameters()) params.push_back(&p);
  auto result = ad::finite_diff_check(
      [&](Tape<double>& tape) {
        auto bound = bind_trainable(tape, model);
        auto q = forward(bound, v, t, FusionMode::kVagfem).query;
        return ad::sum(ad::mul(q, tape.constant(w)));
      },
      params, 1e-5);
  CHECK(result.max_relative_error <= 1e-4);
  CHECK(result.coordinates == model.parameter_count());
}
