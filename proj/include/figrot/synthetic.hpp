#pragma once

// Seeded stand-in dataset: target = normalize(v + t + noise).

#include <cstdint>
#include <filesystem>
#include <vector>

#include "figrot/dataset.hpp"

namespace figrot {

struct SyntheticSpec {
  std::size_t triplets = 256;
  std::size_t dim = 32;
  std::uint64_t seed = 7;
  double noise = 0.05;
};

struct SyntheticData {
  DataBundle bundle;
  std::vector<TripletRecord> records;
};

// Tasks cycle CIR, SBIR, CSTBIR. SBIR records carry no text and fuse with
// the empty-text row. Gallery holds every target plus 3n distractors.
SyntheticData gen_synthetic(const SyntheticSpec& spec);

// Writes the bundle and triplets.jsonl under `dir` (created if missing).
void write_synthetic(const std::filesystem::path& dir, const SyntheticData& data);

}  // namespace figrot
