#include "figrot/embedstore.hpp"

#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "figrot/error.hpp"
#include "json.hpp"

namespace figrot {

namespace {

constexpr char kMagic[4] = {'F', 'I', 'G', 'E'};
constexpr std::size_t kHeaderSize = 4 + 4 + 8 + 4 + 1 + 3;

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint64_t uint(std::size_t width, const char* what) {
    need(width, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v |= std::uint64_t(bytes_[pos_ + i]) << (8 * i);
    pos_ += width;
    return v;
  }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n) {
      fail(ErrorKind::kFormat, std::string("truncated store: missing ") + what + " at byte " +
                                   std::to_string(pos_));
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::kIo, "write failed for " + path.string());
}

}  // namespace

// ---- EmbeddingStore ----------------------------------------------------------

EmbeddingStore::EmbeddingStore(std::size_t dim, std::vector<std::string> ids, std::vector<float> values,
                               bool normalized)
    : dim_(dim), ids_(std::move(ids)), values_(std::move(values)), normalized_(normalized) {
  if (dim_ == 0) fail(ErrorKind::kValidation, "embedding store dim must be positive");
  if (values_.size() != ids_.size() * dim_) {
    fail(ErrorKind::kShape, "embedding store has " + std::to_string(values_.size()) + " values for " +
                                std::to_string(ids_.size()) + " ids of dim " + std::to_string(dim_));
  }
  index_.reserve(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (ids_[i].size() > 0xFFFF) fail(ErrorKind::kValidation, "id longer than 65535 bytes at row " + std::to_string(i));
    if (!index_.emplace(ids_[i], i).second) fail(ErrorKind::kValidation, "duplicate id: " + ids_[i]);
  }
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(values_[i])) {
      fail(ErrorKind::kNumeric, "non-finite value in row " + ids_[i / dim_]);
    }
  }
  for (std::size_t r = 0; r < ids_.size(); ++r) {
    double ss = 0;
    for (float v : row(r)) ss += double(v) * double(v);
    if (ss == 0.0) fail(ErrorKind::kValidation, "row " + ids_[r] + " is a zero vector");
    if (normalized_) {
      if (std::abs(std::sqrt(ss) - 1.0) > kUnitNormTolerance) {
        fail(ErrorKind::kValidation, "row " + ids_[r] + " is flagged normalized but has norm " +
                                         std::to_string(std::sqrt(ss)));
      }
    }
  }
}

std::optional<std::size_t> EmbeddingStore::find(std::string_view id) const {
  auto it = index_.find(std::string(id));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t EmbeddingStore::index_of(std::string_view id) const {
  auto idx = find(id);
  if (!idx) fail(ErrorKind::kValidation, "unknown embedding id: " + std::string(id));
  return *idx;
}

std::span<const float> EmbeddingStore::lookup(std::string_view id) const { return row(index_of(id)); }

// ---- binary format -------------------------------------------------------------

std::vector<std::uint8_t> encode_store(const EmbeddingStore& store) {
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderSize + store.values().size() * 4);
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, kStoreVersion);
  put_u64(out, store.count());
  put_u32(out, static_cast<std::uint32_t>(store.dim()));
  out.push_back(store.normalized() ? 1 : 0);
  out.insert(out.end(), 3, 0);
  for (float v : store.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  for (const auto& id : store.ids()) {
    put_u16(out, static_cast<std::uint16_t>(id.size()));
    out.insert(out.end(), id.begin(), id.end());
  }
  return out;
}

EmbeddingStore decode_store(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    fail(ErrorKind::kFormat, "bad magic: not an embedding store");
  }
  ByteReader in(bytes.subspan(4));
  const auto version = in.uint(4, "version");
  if (version != kStoreVersion) {
    fail(ErrorKind::kFormat, "unsupported store version " + std::to_string(version));
  }
  const auto count = in.uint(8, "count");
  const auto dim = in.uint(4, "dim");
  const auto flags = in.uint(1, "flags");
  in.take(3, "reserved bytes");
  if (dim == 0) fail(ErrorKind::kFormat, "store header has dim 0");
  if (count > in.remaining() / (4 * dim)) {
    fail(ErrorKind::kFormat, "truncated store: header declares " + std::to_string(count) + " rows of dim " +
                                 std::to_string(dim) + " but payload is shorter");
  }
  std::vector<float> values(count * dim);
  auto payload = in.take(values.size() * 4, "vector payload");
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= std::uint32_t(payload[i * 4 + b]) << (8 * b);
    values[i] = std::bit_cast<float>(u);
  }
  std::vector<std::string> ids;
  ids.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    if (in.remaining() == 0) {
      fail(ErrorKind::kFormat, "manifest has " + std::to_string(i) + " entries, header declares " +
                                   std::to_string(count));
    }
    const auto len = in.uint(2, "manifest entry length");
    auto raw = in.take(len, "manifest id bytes");
    ids.emplace_back(raw.begin(), raw.end());
  }
  if (in.remaining() != 0) {
    fail(ErrorKind::kFormat, "manifest count mismatch: " + std::to_string(in.remaining()) +
                                 " trailing bytes after " + std::to_string(count) + " entries");
  }
  return EmbeddingStore(dim, std::move(ids), std::move(values), (flags & 1) != 0);
}

void write_store(const std::filesystem::path& path, const EmbeddingStore& store) {
  write_file(path, encode_store(store));
}

void write_store(const std::filesystem::path& path, std::size_t dim, std::span<const float> values,
                 std::span<const std::string> ids, bool normalized) {
  write_store(path, EmbeddingStore(dim, {ids.begin(), ids.end()}, {values.begin(), values.end()}, normalized));
}

EmbeddingStore read_store(const std::filesystem::path& path) { return decode_store(read_file(path)); }

// ---- triplets ----------------------------------------------------------------------

std::string_view to_string(Task task) {
  switch (task) {
    case Task::kCir: return "CIR";
    case Task::kSbir: return "SBIR";
    case Task::kCstbir: return "CSTBIR";
  }
  return "?";
}

std::optional<Task> parse_task(std::string_view name) {
  for (Task t : kAllTasks) {
    if (to_string(t) == name) return t;
  }
  return std::nullopt;
}

namespace {

std::optional<std::string> optional_string(const nlohmann::json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw std::invalid_argument(std::string("field '") + key + "' must be a string or null");
  return it->get<std::string>();
}

TripletRecord parse_record(const nlohmann::json& obj) {
  if (!obj.is_object()) throw std::invalid_argument("record is not a JSON object");
  TripletRecord rec;
  const auto& task = obj.at("task");
  if (!task.is_string()) throw std::invalid_argument("field 'task' must be a string");
  auto parsed = parse_task(task.get<std::string>());
  if (!parsed) {
    fail(ErrorKind::kValidation, "unknown task tag '" + task.get<std::string>() + "'");
  }
  rec.task = *parsed;
  rec.ref_id = obj.at("ref_id").get<std::string>();
  rec.text = optional_string(obj, "text");
  rec.text_id = optional_string(obj, "text_id");
  const auto& targets = obj.at("target_ids");
  if (!targets.is_array()) throw std::invalid_argument("field 'target_ids' must be an array");
  for (const auto& t : targets) rec.target_ids.push_back(t.get<std::string>());
  if (rec.target_ids.empty()) fail(ErrorKind::kValidation, "empty target_ids");
  return rec;
}

}  // namespace

std::vector<TripletRecord> parse_triplets(std::string_view text) {
  std::vector<TripletRecord> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::size_t end = nl == std::string_view::npos ? text.size() : nl;
    std::string_view line = text.substr(pos, end - pos);
    ++line_no;
    pos = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
      if (nl == std::string_view::npos) break;
      continue;
    }
    try {
      out.push_back(parse_record(nlohmann::json::parse(line)));
    } catch (const Error& e) {
      throw Error(e.kind(), "line " + std::to_string(line_no) + ": " + e.what());
    } catch (const std::exception& e) {
      fail(ErrorKind::kFormat, "line " + std::to_string(line_no) + ": malformed record: " + e.what());
    }
    if (nl == std::string_view::npos) break;
  }
  return out;
}

std::vector<TripletRecord> load_triplets(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_triplets(buf.str());
}

std::string triplet_to_json_line(const TripletRecord& record) {
  nlohmann::ordered_json j;
  j["task"] = to_string(record.task);
  j["ref_id"] = record.ref_id;
  j["text"] = record.text ? nlohmann::ordered_json(*record.text) : nlohmann::ordered_json(nullptr);
  j["text_id"] = record.text_id ? nlohmann::ordered_json(*record.text_id) : nlohmann::ordered_json(nullptr);
  j["target_ids"] = record.target_ids;
  return j.dump();
}

void save_triplets(const std::filesystem::path& path, std::span<const TripletRecord> records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  for (const auto& r : records) out << triplet_to_json_line(r) << '\n';
  if (!out) fail(ErrorKind::kIo, "write failed for " + path.string());
}

// ---- curation ---------------------------------------------------------------------

std::vector<ScoredPair> clip_filter(std::span<const ScoredPair> pairs, double threshold) {
  if (!(threshold >= -1.0 && threshold <= 1.0)) {
    fail(ErrorKind::kValidation, "threshold " + std::to_string(threshold) + " outside [-1, 1]");
  }
  std::vector<ScoredPair> kept;
  for (const auto& p : pairs) {
    if (p.score > threshold) kept.push_back(p);
  }
  return kept;
}

std::vector<ScoredPair> load_scored_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::vector<ScoredPair> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      ScoredPair p{j.at("image_id").get<std::string>(), j.at("text_id").get<std::string>(),
                   j.at("score").get<double>()};
      if (!(p.score >= -1.0 - 1e-6 && p.score <= 1.0 + 1e-6)) {
        fail(ErrorKind::kValidation, "score " + std::to_string(p.score) + " outside [-1, 1]");
      }
      out.push_back(std::move(p));
    } catch (const Error& e) {
      throw Error(e.kind(), "line " + std::to_string(line_no) + ": " + e.what());
    } catch (const std::exception& e) {
      fail(ErrorKind::kFormat, "line " + std::to_string(line_no) + ": malformed pair: " + e.what());
    }
  }
  return out;
}

void save_scored_pairs(const std::filesystem::path& path, std::span<const ScoredPair> pairs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  for (const auto& p : pairs) {
    nlohmann::ordered_json j;
    j["image_id"] = p.image_id;
    j["text_id"] = p.text_id;
    j["score"] = p.score;
    out << j.dump() << '\n';
  }
}

std::size_t word_count(std::string_view text) {
  std::size_t words = 0;
  bool in_word = false;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      in_word = false;
    } else if (!in_word) {
      in_word = true;
      ++words;
    }
  }
  return words;
}

DatasetStats dataset_stats(std::span<const TripletRecord> records) {
  DatasetStats stats;
  std::map<Task, std::size_t> words;
  for (Task t : kAllTasks) stats.per_task[t] = {};
  std::size_t total_words = 0;
  for (const auto& r : records) {
    auto& ts = stats.per_task[r.task];
    ++ts.count;
    ++stats.total.count;
    if (r.text) {
      const std::size_t w = word_count(*r.text);
      ++ts.with_text;
      ++stats.total.with_text;
      words[r.task] += w;
      total_words += w;
    }
  }
  bool every_task_has_text = true;
  for (auto& [task, ts] : stats.per_task) {
    if (ts.with_text > 0) {
      ts.mean_text_length = double(words[task]) / double(ts.with_text);
    } else if (ts.count > 0) {
      every_task_has_text = false;
    }
  }
  // The overall length is reported only when every populated class has text.
  if (stats.total.with_text > 0 && every_task_has_text) {
    stats.total.mean_text_length = double(total_words) / double(stats.total.with_text);
  }
  return stats;
}

}  // namespace figrot
