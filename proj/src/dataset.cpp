#include "figrot/dataset.hpp"

#include <algorithm>

#include "figrot/error.hpp"

namespace figrot {

BundlePaths BundlePaths::in_directory(const std::filesystem::path& dir) {
  return {dir / "images.fige", dir / "texts.fige", dir / "gallery.fige", dir / "triplets.jsonl"};
}

DataBundle load_bundle(const BundlePaths& paths) {
  DataBundle b{read_store(paths.images), read_store(paths.texts), read_store(paths.gallery)};
  if (b.images.dim() != b.gallery.dim() || b.texts.dim() != b.gallery.dim()) {
    fail(ErrorKind::kShape, "store dims disagree: images " + std::to_string(b.images.dim()) + ", texts " +
                                std::to_string(b.texts.dim()) + ", gallery " + std::to_string(b.gallery.dim()));
  }
  return b;
}

void save_bundle(const BundlePaths& paths, const DataBundle& bundle) {
  write_store(paths.images, bundle.images);
  write_store(paths.texts, bundle.texts);
  write_store(paths.gallery, bundle.gallery);
}

void validate_records(std::span<const TripletRecord> records, const DataBundle& data) {
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    auto missing = [&](const std::string& what, std::string_view id) {
      fail(ErrorKind::kValidation, "record " + std::to_string(i) + ": unresolvable " + what + " id '" +
                                       std::string(id) + "'");
    };
    if (!data.images.contains(r.ref_id)) missing("reference", r.ref_id);
    if (!data.texts.contains(r.effective_text_id())) missing("text", r.effective_text_id());
    if (r.target_ids.empty()) fail(ErrorKind::kValidation, "record " + std::to_string(i) + ": empty target_ids");
    for (const auto& t : r.target_ids) {
      if (!data.gallery.contains(t)) missing("target", t);
    }
  }
}

Tensor<float> gather_rows(const EmbeddingStore& store, std::span<const std::string> ids) {
  Tensor<float> out(ids.size(), store.dim());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto src = store.lookup(ids[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

void gather_queries(std::span<const TripletRecord> records, std::span<const std::size_t> indices,
                    const DataBundle& data, Tensor<float>& images, Tensor<float>& texts) {
  const std::size_t dim = data.dim();
  images = Tensor<float>(indices.size(), dim);
  texts = Tensor<float>(indices.size(), dim);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& r = records[indices[i]];
    auto img = data.images.lookup(r.ref_id);
    auto txt = data.texts.lookup(r.effective_text_id());
    std::copy(img.begin(), img.end(), images.row(i).begin());
    std::copy(txt.begin(), txt.end(), texts.row(i).begin());
  }
}

TrainingBatch<float> assemble_batch(std::span<const TripletRecord> records, std::span<const std::size_t> indices,
                                    const DataBundle& data) {
  TrainingBatch<float> batch;
  gather_queries(records, indices, data, batch.images, batch.texts);
  const std::size_t dim = data.dim();
  batch.targets = Tensor<float>(indices.size(), dim);
  // Left empty when the text store has no empty-text row; only the fused
  // triplet negative needs it.
  if (auto e = data.texts.find(kEmptyTextId)) {
    batch.empty_texts = Tensor<float>(indices.size(), dim);
    auto empty = data.texts.row(*e);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      std::copy(empty.begin(), empty.end(), batch.empty_texts.row(i).begin());
    }
  }
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto tgt = data.gallery.lookup(records[indices[i]].target_ids.front());
    std::copy(tgt.begin(), tgt.end(), batch.targets.row(i).begin());
  }
  return batch;
}

}  // namespace figrot
