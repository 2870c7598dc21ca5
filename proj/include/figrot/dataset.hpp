#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "figrot/embedstore.hpp"
#include "figrot/losses.hpp"
#include "figrot/tensor.hpp"

namespace figrot {

// The three stores a run needs: reference images/sketches, texts (holding
// the empty-text row) and the target gallery.
struct DataBundle {
  EmbeddingStore images;
  EmbeddingStore texts;
  EmbeddingStore gallery;

  std::size_t dim() const { return gallery.dim(); }
};

struct BundlePaths {
  std::filesystem::path images;
  std::filesystem::path texts;
  std::filesystem::path gallery;
  std::filesystem::path triplets;

  // Conventional file names inside a data directory.
  static BundlePaths in_directory(const std::filesystem::path& dir);
};

DataBundle load_bundle(const BundlePaths& paths);
void save_bundle(const BundlePaths& paths, const DataBundle& bundle);

// Checks that every id a record needs is present; errors name the record
// index.
void validate_records(std::span<const TripletRecord> records, const DataBundle& data);

// Rows of `store` for `ids`, as a |ids| x dim tensor.
Tensor<float> gather_rows(const EmbeddingStore& store, std::span<const std::string> ids);

// Query inputs (reference, text-or-empty) of the selected records.
void gather_queries(std::span<const TripletRecord> records, std::span<const std::size_t> indices,
                    const DataBundle& data, Tensor<float>& images, Tensor<float>& texts);

// Uses each record's first target id as its positive.
TrainingBatch<float> assemble_batch(std::span<const TripletRecord> records, std::span<const std::size_t> indices,
                                    const DataBundle& data);

}  // namespace figrot
