#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

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

namespace py = pybind11;
using namespace figrot;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

template <typename T, typename A>
Tensor<T> to_tensor(const A& array) {
  if (array.ndim() != 2) throw Error(ErrorKind::kShape, "expected a 2-D array");
  Tensor<T> t(static_cast<std::size_t>(array.shape(0)), static_cast<std::size_t>(array.shape(1)));
  std::copy(array.data(), array.data() + array.size(), t.storage().begin());
  return t;
}

template <typename T>
py::array_t<T> to_array(const Tensor<T>& t) {
  py::array_t<T> out({t.rows(), t.cols()});
  std::copy(t.storage().begin(), t.storage().end(), out.mutable_data());
  return out;
}

py::array_t<float> store_values(const EmbeddingStore& s) {
  py::array_t<float> out({s.count(), s.dim()});
  std::copy(s.values().begin(), s.values().end(), out.mutable_data());
  return out;
}

EmbeddingStore make_store(std::vector<std::string> ids, const FloatArray& values, bool normalized) {
  if (values.ndim() != 2) throw Error(ErrorKind::kShape, "values must be a 2-D array");
  std::vector<float> flat(values.data(), values.data() + values.size());
  return EmbeddingStore(static_cast<std::size_t>(values.shape(1)), std::move(ids), std::move(flat), normalized);
}

RelevantSet relevant_set(const std::vector<std::string>& ids) { return RelevantSet(ids.begin(), ids.end()); }

FusionMode mode_of(const std::string& name) { return parse_fusion_mode(name); }

}  // namespace

PYBIND11_MODULE(_figrot, m) {
  m.doc() = "Variance-gated fusion for image-guided retrieval";

  static py::exception<Error> error(m, "FigrotError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object type = py::reinterpret_borrow<py::object>(error.ptr());
      py::object exc = type(std::string(to_string(e.kind())) + ": " + e.what());
      exc.attr("kind") = std::string(to_string(e.kind()));
      PyErr_SetObject(error.ptr(), exc.ptr());
    }
  });

  m.def(
      "read_store",
      [](const std::filesystem::path& path) {
        auto s = read_store(path);
        return py::make_tuple(s.ids(), store_values(s), s.normalized());
      },
      py::arg("path"), "Read an embedding store: (ids, float32 array, normalized).");
  m.def(
      "write_store",
      [](const std::filesystem::path& path, std::vector<std::string> ids, const FloatArray& values, bool normalized) {
        write_store(path, make_store(std::move(ids), values, normalized));
      },
      py::arg("path"), py::arg("ids"), py::arg("values"), py::arg("normalized") = true);

  m.def(
      "clip_filter",
      [](const std::vector<std::tuple<std::string, std::string, double>>& pairs, double threshold) {
        std::vector<ScoredPair> in;
        for (const auto& [img, txt, s] : pairs) in.push_back({img, txt, s});
        std::vector<std::tuple<std::string, std::string, double>> out;
        for (const auto& p : clip_filter(in, threshold)) out.emplace_back(p.image_id, p.text_id, p.score);
        return out;
      },
      py::arg("pairs"), py::arg("threshold") = 0.9);

  m.def(
      "average_precision_at_k",
      [](const std::vector<std::string>& ranked, const std::vector<std::string>& relevant, std::size_t k) {
        return average_precision_at_k(ranked, relevant_set(relevant), k);
      },
      py::arg("ranked"), py::arg("relevant"), py::arg("k"));
  m.def(
      "recall_at_k",
      [](const std::vector<std::string>& ranked, const std::vector<std::string>& relevant, std::size_t k) {
        return recall_at_k(ranked, relevant_set(relevant), k);
      },
      py::arg("ranked"), py::arg("relevant"), py::arg("k"));
  m.def(
      "precision_at_k",
      [](const std::vector<std::string>& ranked, const std::vector<std::string>& relevant, std::size_t k) {
        return precision_at_k(ranked, relevant_set(relevant), k);
      },
      py::arg("ranked"), py::arg("relevant"), py::arg("k"));
  m.def(
      "rank1",
      [](const std::vector<std::string>& ranked, const std::vector<std::string>& relevant) {
        return rank1(ranked, relevant_set(relevant));
      },
      py::arg("ranked"), py::arg("relevant"));

  m.def(
      "search_topk",
      [](const FloatArray& query, std::vector<std::string> ids, const FloatArray& gallery, std::size_t k,
         std::optional<std::string> exclude, std::size_t shards) {
        if (query.ndim() != 1) throw Error(ErrorKind::kShape, "query must be a 1-D array");
        Gallery g(make_store(std::move(ids), gallery, true));
        std::optional<std::string_view> ex;
        if (exclude) ex = *exclude;
        std::vector<std::pair<std::string, double>> out;
        const auto list = search_topk(std::span<const float>(query.data(), query.size()), g, k, ex, {}, shards);
        for (const auto& r : list.results) out.emplace_back(r.id, r.score);
        return out;
      },
      py::arg("query"), py::arg("ids"), py::arg("gallery"), py::arg("k"), py::arg("exclude") = py::none(),
      py::arg("shards") = 1, "Top-k gallery rows by dot product, ties broken by id.");

  m.def(
      "infonce",
      [](const DoubleArray& x, const DoubleArray& y, double temperature) {
        ad::Tape<double> tape;
        return infonce(tape.constant(to_tensor<double>(x)), tape.constant(to_tensor<double>(y)), temperature)
            .value()
            .item();
      },
      py::arg("x"), py::arg("y"), py::arg("temperature") = 0.01);
  m.def(
      "triplet_loss",
      [](const DoubleArray& q, const DoubleArray& p, const DoubleArray& n, double margin) {
        ad::Tape<double> tape;
        return triplet_loss(tape.constant(to_tensor<double>(q)), tape.constant(to_tensor<double>(p)),
                            tape.constant(to_tensor<double>(n)), margin)
            .value()
            .item();
      },
      py::arg("q"), py::arg("p"), py::arg("n"), py::arg("margin") = 0.3);

  m.def(
      "mask_size",
      [](std::size_t dim, double ratio) {
        FusionConfig c;
        c.embed_dim = dim;
        c.mask_ratio = ratio;
        return c.mask_k();
      },
      py::arg("dim"), py::arg("mask_ratio") = 0.2);

  m.def(
      "encode",
      [](const FloatArray& images, const FloatArray& texts, std::optional<std::filesystem::path> checkpoint,
         std::size_t model_dim, std::size_t layers, std::size_t heads, std::size_t head_dim, double mask_ratio,
         std::uint64_t seed, const std::string& mode) {
        const auto v = to_tensor<float>(images);
        const auto t = to_tensor<float>(texts);
        VagfemModel<float> model;
        if (checkpoint) {
          model = load_checkpoint(*checkpoint).model;
        } else {
          FusionConfig c;
          c.embed_dim = v.cols();
          c.model_dim = model_dim;
          c.layers = layers;
          c.heads = heads;
          c.head_dim = head_dim;
          c.mask_ratio = mask_ratio;
          model = VagfemModel<float>(c, seed);
        }
        return to_array(encode_queries(model, v, t, mode_of(mode)));
      },
      py::arg("images"), py::arg("texts"), py::arg("checkpoint") = py::none(), py::arg("model_dim") = 512,
      py::arg("layers") = 2, py::arg("heads") = 8, py::arg("head_dim") = 64, py::arg("mask_ratio") = 0.2,
      py::arg("seed") = 0, py::arg("mode") = "vagfem",
      "Fused unit-norm query embeddings from a checkpoint or a freshly initialized model.");

  m.def(
      "gen_synthetic",
      [](const std::filesystem::path& out, std::size_t n, std::size_t dim, std::uint64_t seed, double noise) {
        const auto data = gen_synthetic({n, dim, seed, noise});
        write_synthetic(out, data);
        return data.records.size();
      },
      py::arg("out"), py::arg("n") = 256, py::arg("dim") = 32, py::arg("seed") = 7, py::arg("noise") = 0.05);

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> full{"figrot"};
        full.insert(full.end(), args.begin(), args.end());
        std::vector<const char*> argv;
        for (const auto& a : full) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run one figrot subcommand: (exit code, stdout, stderr).");
}
