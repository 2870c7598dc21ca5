// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "figrot/analysis.hpp"
#include "figrot/cli.hpp"
#include "figrot/dataset.hpp"
#include "figrot/embedstore.hpp"
#include "figrot/error.hpp"
#include "figrot/losses.hpp"
#include "figrot/metrics.hpp"
#include "figrot/retrieval.hpp"
#include "figrot/synthetic.hpp"
#include "figrot/trainer.hpp"
#include "figrot/vagfem.hpp"
#include "support.hpp"

using namespace figrot;
using ad::Parameter;
using ad::Tape;
using ad::Var;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Collects failed conditions for one criterion.
class Verdict {
 public:
  void require(bool ok, const std::string& what) {
    if (!ok) failures_.push_back(what);
  }
  void note(const std::string& s) { notes_.push_back(s); }
  bool ok() const { return failures_.empty(); }

  std::string detail() const {
    std::ostringstream s;
    for (std::size_t i = 0; i < notes_.size(); ++i) s << (i ? "; " : "") << notes_[i];
    for (const auto& f : failures_) s << (s.tellp() > 0 ? "; " : "") << "failed: " << f;
    return s.str();
  }

 private:
  std::vector<std::string> failures_;
  std::vector<std::string> notes_;
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

template <typename T>
void randomize_zero_inits(VagfemModel<T>& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (const char* name : {"slot_embed", "omega.weight", "omega.bias"}) {
    auto& p = model.parameter(name);
    p.value = testing::random_tensor<T>(p.value.rows(), p.value.cols(), rng, 0.5);
  }
}

template <typename T>
TrainingBatch<T> random_batch(std::size_t b, std::size_t d, std::mt19937_64& rng) {
  TrainingBatch<T> batch;
  batch.images = testing::unit_rows<T>(b, d, rng);
  batch.texts = testing::unit_rows<T>(b, d, rng);
  auto empty = testing::unit_rows<T>(1, d, rng);
  batch.empty_texts = Tensor<T>(b, d);
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t c = 0; c < d; ++c) batch.empty_texts(r, c) = empty(0, c);
  }
  batch.targets = testing::unit_rows<T>(b, d, rng);
  return batch;
}

// ---- gradient fidelity ----------------------------------------------------------

Verdict gradient_fidelity() {
  Verdict v;
  const auto start = Clock::now();
  constexpr double kStep = 1e-5;

  // Per-op checks: each op output is projected onto a fixed random weight.
  std::mt19937_64 rng(1);
  auto make = [&](const char* name, std::size_t r, std::size_t c) {
    return Parameter<double>(name, testing::random_tensor<double>(r, c, rng));
  };
  auto a = make("a", 3, 4), b = make("b", 4, 5), c = make("c", 3, 4), d = make("d", 5, 4);
  auto row = make("row", 1, 4), col = make("col", 3, 1), gamma = make("gamma", 1, 4), beta = make("beta", 1, 4);
  auto kinked = make("kinked", 3, 4);
  for (auto& x : kinked.value.storage()) x = (x >= 0 ? 0.1 : -0.1) + x;

  using Op = std::function<Var<double>(std::vector<Var<double>>&)>;
  struct Case {
    const char* name;
    std::vector<Parameter<double>*> params;
    Op op;
  };
  const std::vector<Case> cases = {
      {"matmul", {&a, &b}, [](auto& x) { return ad::matmul(x[0], x[1]); }},
      {"matmul_nt", {&a, &d}, [](auto& x) { return ad::matmul_nt(x[0], x[1]); }},
      {"add", {&a, &c}, [](auto& x) { return ad::add(x[0], x[1]); }},
      {"sub", {&a, &c}, [](auto& x) { return ad::sub(x[0], x[1]); }},
      {"mul", {&a, &c}, [](auto& x) { return ad::mul(x[0], x[1]); }},
      {"add_row", {&a, &row}, [](auto& x) { return ad::add_row(x[0], x[1]); }},
      {"mul_col", {&a, &col}, [](auto& x) { return ad::mul_col(x[0], x[1]); }},
      {"scale", {&a}, [](auto& x) { return ad::scale(x[0], -2.5); }},
      {"add_scalar", {&a}, [](auto& x) { return ad::add_scalar(x[0], 0.75); }},
      {"concat_cols", {&a, &c}, [](auto& x) { return ad::concat_cols<double>(std::span(x.data(), 2)); }},
      {"concat_rows", {&a, &c}, [](auto& x) { return ad::concat_rows<double>(std::span(x.data(), 2)); }},
      {"slice_cols", {&a}, [](auto& x) { return ad::slice_cols(x[0], 1, 3); }},
      {"slice_rows", {&a}, [](auto& x) { return ad::slice_rows(x[0], 1, 3); }},
      {"logistic", {&a}, [](auto& x) { return ad::logistic(x[0]); }},
      {"gelu", {&a}, [](auto& x) { return ad::gelu(x[0]); }},
      {"hinge", {&kinked}, [](auto& x) { return ad::hinge(x[0]); }},
      {"softmax", {&a}, [](auto& x) { return ad::softmax(x[0]); }},
      {"log_softmax", {&a}, [](auto& x) { return ad::log_softmax(x[0]); }},
      {"layer_norm", {&a, &gamma, &beta}, [](auto& x) { return ad::layer_norm(x[0], x[1], x[2]); }},
      {"column_mean", {&a}, [](auto& x) { return ad::column_mean(x[0]); }},
      {"column_variance", {&a}, [](auto& x) { return ad::column_variance(x[0]); }},
      {"l2_normalize_rows", {&a}, [](auto& x) { return ad::l2_normalize_rows(x[0]); }},
      {"row_sum", {&a}, [](auto& x) { return ad::row_sum(x[0]); }},
      {"sum", {&a}, [](auto& x) { return ad::sum(x[0]); }},
      {"mean", {&a}, [](auto& x) { return ad::mean(x[0]); }},
  };
  double worst_op = 0.0;
  std::string worst_name;
  for (const auto& cs : cases) {
    auto result = ad::finite_diff_check(
        [&](Tape<double>& tape) {
          std::vector<Var<double>> vars;
          for (auto* p : cs.params) vars.push_back(tape.parameter(*p));
          auto y = cs.op(vars);
          std::mt19937_64 wrng(99);
          auto w = testing::random_tensor<double>(y.rows(), y.cols(), wrng);
          return ad::sum(ad::mul(y, tape.constant(std::move(w))));
        },
        cs.params, kStep);
    if (result.max_relative_error > worst_op) {
      worst_op = result.max_relative_error;
      worst_name = cs.name;
    }
    v.require(result.max_relative_error <= 1e-6, std::string(cs.name) + " error " + fmt(result.max_relative_error));
  }
  v.note("per-op max " + fmt(worst_op) + (worst_name.empty() ? "" : " (" + worst_name + ")"));

  // Full model plus combined loss in double precision.
  FusionConfig fc;
  fc.embed_dim = 16;
  fc.model_dim = 32;
  fc.heads = 4;
  fc.head_dim = 8;
  VagfemModel<double> model(fc, 11);
  randomize_zero_inits(model, 12);
  std::mt19937_64 drng(13);
  const auto batch = random_batch<double>(4, 16, drng);
  std::vector<Parameter<double>*> params;
  for (auto& p : model.parameters()) params.push_back(&p);
  auto e2e = ad::finite_diff_check(
      [&](Tape<double>& tape) {
        auto bound = bind_trainable(tape, model);
        return combined_loss(bound, batch, FusionMode::kVagfem, LossConfig{}).total;
      },
      params, kStep);
  v.note("end-to-end max " + fmt(e2e.max_relative_error) + " over " + std::to_string(e2e.coordinates) +
         " coordinates");
  v.require(e2e.max_relative_error <= 1e-4, "end-to-end error " + fmt(e2e.max_relative_error) + " at " +
                                                e2e.worst_parameter + "[" + std::to_string(e2e.worst_index) + "]");
  v.require(e2e.coordinates == model.parameter_count(), "not every coordinate was checked");

  const double secs = seconds_since(start);
  v.note("time " + fmt(secs) + " s");
  v.require(secs < 60.0, "took " + fmt(secs) + " s");
  return v;
}

// ---- structural invariants --------------------------------------------------------

Tensor<float> run_forward(const VagfemModel<float>& model, const Tensor<float>& images, const Tensor<float>& texts,
                          FusionMode mode) {
  Tape<float> tape;
  auto bound = bind_frozen(tape, model);
  return forward(bound, images, texts, mode).query.value();
}

Verdict structural_invariants() {
  Verdict v;
  FusionConfig fc;
  fc.embed_dim = 32;
  fc.model_dim = 16;
  fc.heads = 2;
  fc.head_dim = 8;
  fc.layers = 1;
  VagfemModel<float> model(fc, 21);
  randomize_zero_inits(model, 22);
  std::mt19937_64 rng(23);

  double worst_norm = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t b = 2 + rng() % 14;
    auto images = testing::random_tensor<float>(b, 32, rng);
    auto texts = testing::random_tensor<float>(b, 32, rng);
    for (auto mode : {FusionMode::kVagfem, FusionMode::kBaseline}) {
      auto out = run_forward(model, images, texts, mode);
      for (std::size_t r = 0; r < b; ++r) worst_norm = std::max(worst_norm, std::abs(testing::row_norm(out.row(r)) - 1.0));
    }
  }
  v.note("max |norm - 1| " + fmt(worst_norm));
  v.require(worst_norm <= 1e-6, "output rows not unit norm");

  FusionConfig big = fc;
  big.embed_dim = 256;
  v.require(big.mask_k() == 52, "mask size at D=256 is " + std::to_string(big.mask_k()));
  {
    VagfemModel<float> wide(big, 24);
    auto images = testing::random_tensor<float>(8, 256, rng);
    auto texts = testing::random_tensor<float>(8, 256, rng);
    Tape<float> tape;
    auto out = forward(bind_frozen(tape, wide), images, texts, FusionMode::kVagfem);
    v.require(out.mask.selected.size() == 52, "forward mask at D=256 has " + std::to_string(out.mask.selected.size()));
  }
  for (std::size_t d : {1u, 5u, 16u, 33u, 100u, 255u}) {
    FusionConfig c = fc;
    c.embed_dim = d;
    const std::size_t expected = static_cast<std::size_t>(std::ceil(0.2 * double(d) - 1e-9));
    auto x = testing::random_tensor<float>(6, d, rng);
    v.require(c.mask_k() == expected && variance_mask(x, c.mask_k()).selected.size() == expected,
              "mask size at D=" + std::to_string(d));
  }

  std::size_t passthrough_checked = 0;
  bool passthrough_exact = true;
  for (int trial = 0; trial < 10; ++trial) {
    auto images = testing::random_tensor<float>(8, 32, rng);
    auto texts = testing::random_tensor<float>(8, 32, rng);
    Tape<float> tape;
    auto out = forward(bind_frozen(tape, model), images, texts, FusionMode::kVagfem);
    const auto& united = out.united.value();
    // The output node normalizes the gated residual U'.
    const auto& gated = tape.value(tape.input(out.query.id, 0));
    for (std::size_t r = 0; r < united.rows(); ++r) {
      for (std::size_t d = 0; d < united.cols(); ++d) {
        if (out.mask.mask[d]) continue;
        ++passthrough_checked;
        if (gated(r, d) != united(r, d)) passthrough_exact = false;
      }
    }
  }
  v.require(passthrough_exact && passthrough_checked > 0, "unmasked dimensions changed");

  VagfemModel<float> zero = model;
  zero.set_mask_ratio(0.0);
  bool baseline_equal = true;
  bool permutation_exact = true;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t b = 2 + rng() % 10;
    auto images = testing::random_tensor<float>(b, 32, rng);
    auto texts = testing::random_tensor<float>(b, 32, rng);
    if (!(run_forward(zero, images, texts, FusionMode::kVagfem) == run_forward(model, images, texts, FusionMode::kBaseline))) {
      baseline_equal = false;
    }
    std::vector<std::size_t> perm(b);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor<float> pi(b, 32), pt(b, 32);
    for (std::size_t r = 0; r < b; ++r) {
      std::copy(images.row(perm[r]).begin(), images.row(perm[r]).end(), pi.row(r).begin());
      std::copy(texts.row(perm[r]).begin(), texts.row(perm[r]).end(), pt.row(r).begin());
    }
    auto base = run_forward(model, images, texts, FusionMode::kVagfem);
    auto permuted = run_forward(model, pi, pt, FusionMode::kVagfem);
    for (std::size_t r = 0; r < b; ++r) {
      if (!std::equal(permuted.row(r).begin(), permuted.row(r).end(), base.row(perm[r]).begin())) {
        permutation_exact = false;
      }
    }
  }
  v.require(baseline_equal, "mask_ratio 0 differs from baseline");
  v.require(permutation_exact, "batch permutation changed outputs");
  return v;
}

// ---- loss identities --------------------------------------------------------------

double nce(const Tensor<double>& x, const Tensor<double>& y, double tau) {
  Tape<double> tape;
  return infonce(tape.constant(x), tape.constant(y), tau).value().item();
}

double trip(const Tensor<double>& q, const Tensor<double>& p, const Tensor<double>& n, double margin) {
  Tape<double> tape;
  return triplet_loss(tape.constant(q), tape.constant(p), tape.constant(n), margin).value().item();
}

Verdict loss_identities() {
  Verdict v;
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = testing::unit_rows<double>(1, 8, rng);
    auto y = testing::unit_rows<double>(1, 8, rng);
    v.require(nce(x, y, 0.01) == 0.0, "single-row infonce is not 0");
  }
  const auto e = Tensor<double>::from_rows({{1, 0}, {1, 0}});
  const double uniform = nce(e, e, 0.01);
  v.note("uniform-logit loss " + fmt(uniform));
  v.require(std::abs(uniform - std::log(2.0)) <= 1e-7, "uniform-logit loss " + fmt(uniform));

  // x' = (a x, b cos t_i, b sin t_i), y' = (a y, b, 0) adds b^2 cos t_i to row i.
  std::uniform_real_distribution<double> angle(0.0, 6.283185307179586);
  const double a = 0.8, b = 0.6;
  double worst_shift = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng() % 8, d = 3 + rng() % 12;
    const double tau = trial % 2 ? 0.5 : 0.05;
    auto x = testing::unit_rows<double>(n, d, rng);
    auto y = testing::unit_rows<double>(n, d, rng);
    Tensor<double> xs(n, d + 2), ys(n, d + 2);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < d; ++c) {
        xs(r, c) = a * x(r, c);
        ys(r, c) = a * y(r, c);
      }
      const double t = angle(rng);
      xs(r, d) = b * std::cos(t);
      xs(r, d + 1) = b * std::sin(t);
      ys(r, d) = b;
    }
    worst_shift = std::max(worst_shift, std::abs(nce(xs, ys, tau) - nce(x, y, tau / (a * a))));
  }
  v.note("row-shift max diff " + fmt(worst_shift));
  v.require(worst_shift <= 1e-6, "row-shift difference " + fmt(worst_shift));

  const auto q = Tensor<double>::from_rows({{1, 0}});
  const auto p = Tensor<double>::from_rows({{0, 1}});
  const auto far = Tensor<double>::from_rows({{-1, 0}});
  v.require(std::abs(trip(q, p, q, 0.3) - 2.3) <= 1e-12, "triplet with n = q is not |q-p|^2 + margin");
  v.require(trip(q, q, far, 0.3) == 0.0, "triplet with q = p and far negative is not 0");
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng() % 6;
    auto qq = testing::unit_rows<double>(n, 5, rng);
    auto pp = testing::unit_rows<double>(n, 5, rng);
    auto nn = testing::unit_rows<double>(n, 5, rng);
    const double t = trip(qq, pp, nn, 0.3);
    v.require(t >= 0.0 && t <= 4.3, "triplet outside [0, 4 + margin]");
  }

  FusionConfig fc;
  fc.embed_dim = 12;
  fc.model_dim = 8;
  fc.heads = 2;
  fc.head_dim = 4;
  fc.layers = 1;
  VagfemModel<double> model(fc, 32);
  randomize_zero_inits(model, 33);
  bool exact = true;
  for (double lambda : {0.0, 0.1, 0.2, 0.5, 1.0, 3.0}) {
    auto batch = random_batch<double>(6, 12, rng);
    LossConfig cfg;
    cfg.lambda = lambda;
    Tape<double> tape;
    auto out = combined_loss(bind_frozen(tape, model), batch, FusionMode::kVagfem, cfg);
    const auto& br = out.breakdown;
    if (br.total != br.infonce + lambda * br.triplet) exact = false;
    if (out.total.value().item() != br.total) exact = false;
  }
  v.require(exact, "total differs from infonce + lambda * triplet");
  return v;
}

// ---- metric and search oracle ----------------------------------------------------------

using Ids = std::vector<std::string>;

double ref_precision(const Ids& ranked, const RelevantSet& rel, std::size_t k) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < k && i < ranked.size(); ++i) hits += rel.count(ranked[i]);
  return double(hits) / double(k);
}

double ref_ap(const Ids& ranked, const RelevantSet& rel, std::size_t k) {
  double total = 0;
  for (std::size_t cut = 1; cut <= k && cut <= ranked.size(); ++cut) {
    if (rel.count(ranked[cut - 1])) total += ref_precision(ranked, rel, cut);
  }
  return total / double(std::min(k, rel.size()));
}

std::vector<ScoredId> full_sort(std::span<const float> q, const Gallery& g, std::size_t k,
                                const std::optional<std::string>& exclude) {
  std::vector<ScoredId> all;
  for (std::size_t r = 0; r < g.size(); ++r) {
    if (exclude && g.id(r) == *exclude) continue;
    auto row = g.store().row(r);
    double s = 0;
    for (std::size_t d = 0; d < q.size(); ++d) s += double(q[d]) * double(row[d]);
    all.push_back({g.id(r), s});
  }
  std::sort(all.begin(), all.end(), [](const ScoredId& x, const ScoredId& y) {
    return x.score != y.score ? x.score > y.score : x.id < y.id;
  });
  all.resize(std::min(k, all.size()));
  return all;
}

Verdict metric_oracle() {
  Verdict v;
  std::mt19937_64 rng(41);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 50;
    Ids ranked;
    for (std::size_t i = 0; i < n; ++i) ranked.push_back("g" + std::to_string(i));
    std::shuffle(ranked.begin(), ranked.end(), rng);
    RelevantSet rel;
    const std::size_t r = 1 + rng() % 5;
    while (rel.size() < std::min(r, n)) rel.insert("g" + std::to_string(rng() % n));
    if (trial % 4 == 0) rel.insert("absent");
    const std::size_t k = 1 + rng() % 20;
    const double diffs[] = {
        average_precision_at_k(ranked, rel, k) - ref_ap(ranked, rel, k),
        recall_at_k(ranked, rel, k) - (ref_precision(ranked, rel, k) > 0 ? 1.0 : 0.0),
        precision_at_k(ranked, rel, k) - ref_precision(ranked, rel, k),
        rank1(ranked, rel) - (rel.count(ranked.front()) ? 1.0 : 0.0),
    };
    for (double d : diffs) worst = std::max(worst, std::abs(d));
  }
  v.note("metric max diff " + fmt(worst) + " over 200 instances");
  v.require(worst <= 1e-12, "metrics differ from brute force by " + fmt(worst));

  bool search_exact = true;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 200, d = 1 + rng() % 32;
    // Rows drawn from a small pool so exact score ties are common.
    const std::size_t pool_size = 1 + rng() % 6;
    auto pool = testing::unit_rows<float>(pool_size, d, rng);
    std::vector<float> values;
    Ids gids;
    for (std::size_t i = 0; i < n; ++i) {
      auto row = pool.row(rng() % pool_size);
      values.insert(values.end(), row.begin(), row.end());
      gids.push_back("g" + std::to_string(rng() % 100000) + "_" + std::to_string(i));
    }
    Gallery g(EmbeddingStore(d, std::move(gids), std::move(values), true));
    const std::size_t k = 1 + rng() % (n + 5);
    const std::size_t nq = 1 + rng() % 4;
    auto qs = testing::unit_rows<float>(nq, d, rng);
    if (trial % 3 == 0) {
      auto row = g.store().row(rng() % n);
      std::copy(row.begin(), row.end(), qs.row(0).begin());
    }
    std::vector<std::optional<std::string>> ex(nq);
    for (auto& e : ex) {
      if (rng() % 2) e = g.id(rng() % n);
    }
    for (std::size_t shards : {1u, 2u, 3u, 4u, 7u, 64u}) {
      for (std::size_t threads : {1u, 3u}) {
        auto lists = batch_search(qs, g, k, ex, {}, {shards, threads});
        for (std::size_t i = 0; i < nq; ++i) {
          if (lists[i].results != full_sort(qs.row(i), g, k, ex[i])) search_exact = false;
        }
      }
    }
  }
  v.require(search_exact, "top-K search differs from the full-sort oracle");
  return v;
}

// ---- training on the synthetic fixture ------------------------------------------------

TrainConfig fixture_config(const SyntheticData& data) {
  TrainConfig c;
  c.fusion.embed_dim = data.bundle.dim();
  c.seed = 7;
  return c;
}

Tensor<float> encode_records(const VagfemModel<float>& model, const SyntheticData& data, FusionMode mode) {
  std::vector<std::size_t> all(data.records.size());
  std::iota(all.begin(), all.end(), 0);
  Tensor<float> images, texts;
  gather_queries(data.records, all, data.bundle, images, texts);
  return encode_queries(model, images, texts, mode);
}

Tensor<float> target_rows(const SyntheticData& data) {
  Ids ids;
  for (const auto& r : data.records) ids.push_back(r.target_ids.front());
  return gather_rows(data.bundle.gallery, ids);
}

Verdict learnability(const SyntheticData& data, const TrainResult& run, double secs) {
  Verdict v;
  const auto cfg = fixture_config(data);
  v.require(cfg.lr == 1e-4 && cfg.weight_decay == 1e-2 && cfg.batch_size == 32 && cfg.epochs == 2 &&
                cfg.loss.temperature == 0.01,
            "training schedule differs from lr 1e-4, wd 1e-2, batch 32, 2 epochs, tau 0.01");
  v.require(data.records.size() == 256 && data.bundle.dim() == 32 && data.bundle.gallery.count() == 1024,
            "fixture shape");
  EvalConfig ec;
  const auto report = evaluate(data.records, run.checkpoint.model, data.bundle, ec);
  const double r1 = report.overall.at("rank1");
  std::ostringstream means;
  for (std::size_t i = 0; i < run.log.epoch_means.size(); ++i) {
    means << (i ? " -> " : "") << fmt(run.log.epoch_means[i].total);
  }
  v.note("R@1 " + fmt(r1));
  v.note("epoch means " + means.str());
  v.note("train time " + fmt(secs) + " s");
  v.require(r1 >= 0.95, "R@1 " + fmt(r1));
  bool decreasing = run.log.epoch_means.size() == 2;
  for (std::size_t i = 1; i < run.log.epoch_means.size(); ++i) {
    if (!(run.log.epoch_means[i].total < run.log.epoch_means[i - 1].total)) decreasing = false;
  }
  v.require(decreasing, "epoch-mean loss not strictly decreasing");
  v.require(secs < 120.0, "train took " + fmt(secs) + " s");
  return v;
}

Verdict triplet_effect(const SyntheticData& data, const TrainResult& with_triplet) {
  Verdict v;
  auto cfg = fixture_config(data);
  cfg.loss.lambda = 0.0;
  const auto without = train(data.records, data.bundle, cfg);

  // Gallery plus each query's own reference embedding as an unmodified distractor.
  std::vector<float> values(data.bundle.gallery.values().begin(), data.bundle.gallery.values().end());
  Ids ids = data.bundle.gallery.ids();
  for (const auto& r : data.records) {
    auto row = data.bundle.images.row(data.bundle.images.index_of(r.ref_id));
    values.insert(values.end(), row.begin(), row.end());
    ids.push_back("distractor:" + r.ref_id);
  }
  const Gallery gallery(EmbeddingStore(data.bundle.dim(), ids, std::move(values), true));

  auto beats_reference = [&](const VagfemModel<float>& model) {
    const auto queries = encode_records(model, data, cfg.mode);
    std::size_t wins = 0;
    for (std::size_t i = 0; i < data.records.size(); ++i) {
      const auto list = search_topk(queries.row(i), gallery, gallery.size());
      for (const auto& hit : list.results) {
        if (hit.id == data.records[i].target_ids.front()) {
          ++wins;
          break;
        }
        if (hit.id == "distractor:" + data.records[i].ref_id) break;
      }
    }
    return double(wins) / double(data.records.size());
  };
  const double on = beats_reference(with_triplet.checkpoint.model);
  const double off = beats_reference(without.checkpoint.model);
  v.note("target above reference: lambda=0.2 " + fmt(on) + ", lambda=0 " + fmt(off));
  v.require(on > off, "lambda=0.2 fraction not strictly higher");
  return v;
}

Verdict distribution_shift(const SyntheticData& data, const TrainResult& run) {
  Verdict v;
  const auto cfg = fixture_config(data);
  const auto targets = target_rows(data);
  Ids target_ids;
  for (const auto& r : data.records) target_ids.push_back(r.target_ids.front());
  const VagfemModel<float> untrained(cfg.fusion, cfg.seed);
  const auto before = similarity_distribution(encode_records(untrained, data, cfg.mode), targets, target_ids, 7);
  const auto after = similarity_distribution(encode_records(run.checkpoint.model, data, cfg.mode), targets, target_ids, 7);
  const double gain = after.positive.mean - before.positive.mean;
  v.note("positive mean " + fmt(before.positive.mean) + " -> " + fmt(after.positive.mean) + " (gain " + fmt(gain) +
         ")");
  v.require(gain >= 0.2, "positive-mean gain " + fmt(gain));

  bool conserved = true;
  for (const auto* h : {&before.positive, &before.negative, &after.positive, &after.negative}) {
    const auto total = std::accumulate(h->counts.begin(), h->counts.end(), std::size_t{0});
    if (total != data.records.size() || h->samples != data.records.size()) conserved = false;
  }
  std::mt19937_64 rng(71);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> xs(1 + rng() % 400);
    for (auto& x : xs) x = u(rng);
    xs.front() = -1.0;
    xs.back() = 1.0;
    const auto h = cosine_histogram(xs, 1 + rng() % 100);
    if (std::accumulate(h.counts.begin(), h.counts.end(), std::size_t{0}) != xs.size()) conserved = false;
  }
  v.require(conserved, "histogram counts do not sum to the sample size");
  return v;
}

// ---- determinism and persistence ---------------------------------------------------

Verdict determinism() {
  Verdict v;
  const auto data = gen_synthetic({64, 16, 5, 0.05});
  TrainConfig c;
  c.fusion.embed_dim = 16;
  c.fusion.model_dim = 16;
  c.fusion.heads = 2;
  c.fusion.head_dim = 8;
  c.fusion.layers = 1;
  c.batch_size = 8;
  c.seed = 3;
  const auto a = train(data.records, data.bundle, c);
  const auto b = train(data.records, data.bundle, c);
  const auto bytes = encode_checkpoint(a.checkpoint);
  v.require(bytes == encode_checkpoint(b.checkpoint), "same-seed checkpoints differ");
  EvalConfig ec;
  ec.mode = c.mode;
  const auto ra = to_json(evaluate(data.records, a.checkpoint.model, data.bundle, ec)).dump();
  const auto rb = to_json(evaluate(data.records, b.checkpoint.model, data.bundle, ec)).dump();
  v.require(ra == rb, "same-seed metric reports differ");

  v.require(encode_checkpoint(decode_checkpoint(bytes)) == bytes, "checkpoint does not round-trip");
  testing::TempDir dir;
  save_checkpoint(dir / "a.fgck", a.checkpoint);
  v.require(encode_checkpoint(load_checkpoint(dir / "a.fgck")) == bytes, "checkpoint file does not round-trip");

  const std::uint64_t total = a.checkpoint.step();
  for (std::uint64_t k : {std::uint64_t{1}, total / 2, total - 1}) {
    TrainOptions stop;
    stop.stop_at_step = k;
    const auto first = train(data.records, data.bundle, c, stop);
    const auto reloaded = decode_checkpoint(encode_checkpoint(first.checkpoint));
    TrainOptions resume;
    resume.resume = &reloaded;
    const auto rest = train(data.records, data.bundle, c, resume);
    v.require(encode_checkpoint(rest.checkpoint) == bytes, "resume at step " + std::to_string(k) + " differs");
  }
  v.note("checkpoint " + std::to_string(bytes.size()) + " bytes, " + std::to_string(total) + " steps");

  std::mt19937_64 rng(81);
  bool stores = true;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = rng() % 40, d = 1 + rng() % 64;
    auto rows = testing::unit_rows<float>(n, d, rng);
    Ids ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back("item_" + std::to_string(i) + (i % 3 ? "" : "_\xc3\xa9"));
    EmbeddingStore store(d, ids, rows.storage(), trial % 2 == 0);
    const auto path = dir / ("s" + std::to_string(trial) + ".fige");
    write_store(path, store);
    const auto file = testing::read_bytes(path);
    const auto again = read_store(path);
    write_store(dir / "copy.fige", again);
    if (testing::read_bytes(dir / "copy.fige") != file) stores = false;
    if (encode_store(again) != encode_store(store)) stores = false;
    if (!std::equal(again.values().begin(), again.values().end(), store.values().begin(), store.values().end())) {
      stores = false;
    }
  }
  v.require(stores, "store files do not round-trip");
  return v;
}

// ---- dataset tooling -------------------------------------------------------------

Verdict dataset_tooling() {
  Verdict v;
  const std::vector<ScoredPair> pairs = {{"a", "t1", 0.95}, {"b", "t2", 0.90}, {"c", "t3", 0.9000001},
                                         {"d", "t4", 0.2},  {"e", "t5", 1.0},  {"f", "t6", 0.8999999}};
  const auto kept = clip_filter(pairs, 0.9);
  Ids kept_ids;
  for (const auto& p : kept) kept_ids.push_back(p.image_id);
  v.require(kept_ids == Ids{"a", "c", "e"}, "clip_filter kept the wrong pairs");

  const auto data = gen_synthetic({});
  const auto stats = dataset_stats(data.records);
  // Independent count: whitespace-separated tokens per record.
  std::map<std::string, std::pair<std::size_t, std::size_t>> counts;  // task -> (triplets, with_text)
  std::map<std::string, std::size_t> words;
  std::size_t all_words = 0, all_text = 0;
  for (const auto& r : data.records) {
    auto& c = counts[std::string(to_string(r.task))];
    ++c.first;
    if (r.text) {
      ++c.second;
      std::istringstream s(*r.text);
      std::string w;
      std::size_t nw = 0;
      while (s >> w) ++nw;
      words[std::string(to_string(r.task))] += nw;
      all_words += nw;
      ++all_text;
    }
  }
  v.require(counts["CIR"].first == 86 && counts["SBIR"].first == 85 && counts["CSTBIR"].first == 85,
            "fixture task split is not 86/85/85");
  std::ostringstream table;
  table << "task\ttriplets\twith_text\tavg_text_length\n";
  for (Task t : kAllTasks) {
    const std::string name(to_string(t));
    const auto [n, with_text] = counts[name];
    const auto& ts = stats.per_task.at(t);
    v.require(ts.count == n && ts.with_text == with_text, name + " counts");
    std::ostringstream len;
    len.setf(std::ios::fixed);
    len.precision(2);
    if (with_text) {
      const double mean = double(words[name]) / double(with_text);
      v.require(ts.mean_text_length && *ts.mean_text_length == mean, name + " mean length");
      len << mean;
    } else {
      v.require(!ts.mean_text_length, name + " should have no length");
      len << "--";
    }
    table << name << '\t' << n << '\t' << with_text << '\t' << len.str() << '\n';
  }
  v.require(stats.total.count == 256 && stats.total.with_text == all_text, "total counts");
  v.require(!stats.total.mean_text_length, "total length should be absent when a class has no text");
  table << "total\t256\t" << all_text << "\t--\n";
  (void)all_words;

  testing::TempDir dir;
  write_synthetic(dir / "data", data);
  const std::string arg_data = (dir / "data").string();
  const char* argv[] = {"figrot", "stats", "--data", arg_data.c_str()};
  std::ostringstream out, err;
  const int code = dispatch(4, argv, out, err);
  v.require(code == 0, "stats exited with " + std::to_string(code));
  v.require(out.str() == table.str(), "stats table differs:\n" + out.str());
  v.note("CIR/SBIR/CSTBIR " + std::to_string(counts["CIR"].first) + "/" + std::to_string(counts["SBIR"].first) + "/" +
         std::to_string(counts["CSTBIR"].first));
  return v;
}

struct Outcome {
  bool pass;
  std::string detail;
};

Outcome guarded(const std::function<Verdict()>& fn) {
  try {
    auto v = fn();
    return {v.ok(), v.detail()};
  } catch (const std::exception& e) {
    return {false, std::string("exception: ") + e.what()};
  }
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](const char* name, const Outcome& o) {
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
    if (!o.pass) ++failures;
  };

  report("gradient-fidelity", guarded(gradient_fidelity));
  report("structural-invariants", guarded(structural_invariants));
  report("loss-identities", guarded(loss_identities));
  report("metric-oracle", guarded(metric_oracle));

  // The three fixture criteria share one seeded training run.
  const auto data = gen_synthetic({});
  std::optional<TrainResult> run;
  double train_secs = 0.0;
  std::string train_error;
  try {
    const auto start = Clock::now();
    run = train(data.records, data.bundle, fixture_config(data));
    train_secs = seconds_since(start);
  } catch (const std::exception& e) {
    train_error = e.what();
  }
  auto with_run = [&](const std::function<Verdict()>& fn) -> Outcome {
    if (!run) return {false, "training failed: " + train_error};
    return guarded(fn);
  };
  report("synthetic-learnability", with_run([&] { return learnability(data, *run, train_secs); }));
  report("triplet-effect", with_run([&] { return triplet_effect(data, *run); }));
  report("distribution-shift", with_run([&] { return distribution_shift(data, *run); }));

  report("determinism-persistence", guarded(determinism));
  report("dataset-tooling", guarded(dataset_tooling));

  std::cout << (9 - failures) << "/9 criteria passed" << std::endl;
  return failures == 0 ? 0 : 1;
}
