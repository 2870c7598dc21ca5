#include "figrot/synthetic.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <random>

#include "figrot/error.hpp"

namespace figrot {

namespace {

constexpr std::array<const char*, 24> kWords = {
    "red",    "blue",  "striped", "wooden", "small",  "larger", "without", "with",
    "sleeves", "dog",  "chair",   "shirt",  "darker", "bright", "pattern", "floral",
    "round",  "metal", "two",     "instead", "collar", "shorter", "longer", "plain"};

std::string make_id(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%05zu", prefix, i);
  return buf;
}

void normalize(std::span<float> v) {
  double ss = 0;
  for (float x : v) ss += double(x) * double(x);
  const double n = std::sqrt(ss);
  for (float& x : v) x = static_cast<float>(double(x) / n);
}

class Sampler {
 public:
  explicit Sampler(std::uint64_t seed) : rng_(seed) {}

  std::vector<float> unit(std::size_t dim) {
    std::vector<float> v(dim);
    for (float& x : v) x = static_cast<float>(normal_(rng_));
    normalize(v);
    return v;
  }

  double gauss() { return normal_(rng_); }
  std::uint64_t next() { return rng_(); }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_;
};

}  // namespace

SyntheticData gen_synthetic(const SyntheticSpec& spec) {
  if (spec.triplets == 0) fail(ErrorKind::kValidation, "gen_synthetic: need at least one triplet");
  if (spec.dim < 4) fail(ErrorKind::kValidation, "gen_synthetic: dim must be at least 4");
  const std::size_t n = spec.triplets, dim = spec.dim;
  Sampler s(spec.seed);

  const std::vector<float> empty = s.unit(dim);
  std::vector<std::string> image_ids, text_ids{std::string(kEmptyTextId)}, gallery_ids;
  std::vector<float> images, texts(empty.begin(), empty.end()), gallery;
  std::vector<TripletRecord> records;

  for (std::size_t i = 0; i < n; ++i) {
    const Task task = kAllTasks[i % std::size(kAllTasks)];
    const auto v = s.unit(dim);
    image_ids.push_back(make_id("ref", i));
    images.insert(images.end(), v.begin(), v.end());

    TripletRecord r;
    r.task = task;
    r.ref_id = image_ids.back();
    std::vector<float> t = empty;
    if (task != Task::kSbir) {
      t = s.unit(dim);
      const std::size_t words = 3 + static_cast<std::size_t>(s.next() % 10);
      std::string text;
      for (std::size_t w = 0; w < words; ++w) {
        if (w) text += ' ';
        text += kWords[s.next() % kWords.size()];
      }
      r.text = text;
      r.text_id = make_id("txt", i);
      text_ids.push_back(*r.text_id);
      texts.insert(texts.end(), t.begin(), t.end());
    }

    std::vector<float> target(dim);
    for (std::size_t d = 0; d < dim; ++d) target[d] = static_cast<float>(double(v[d]) + double(t[d]) + spec.noise * s.gauss());
    normalize(target);
    r.target_ids = {make_id("tgt", i)};
    gallery_ids.push_back(r.target_ids.front());
    gallery.insert(gallery.end(), target.begin(), target.end());
    records.push_back(std::move(r));
  }
  for (std::size_t i = 0; i < 3 * n; ++i) {
    const auto d = s.unit(dim);
    gallery_ids.push_back(make_id("dst", i));
    gallery.insert(gallery.end(), d.begin(), d.end());
  }

  SyntheticData out{DataBundle{EmbeddingStore(dim, std::move(image_ids), std::move(images), true),
                               EmbeddingStore(dim, std::move(text_ids), std::move(texts), true),
                               EmbeddingStore(dim, std::move(gallery_ids), std::move(gallery), true)},
                    std::move(records)};
  return out;
}

void write_synthetic(const std::filesystem::path& dir, const SyntheticData& data) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::kIo, "cannot create " + dir.string() + ": " + ec.message());
  const auto paths = BundlePaths::in_directory(dir);
  save_bundle(paths, data.bundle);
  save_triplets(paths.triplets, data.records);
}

}  // namespace figrot
