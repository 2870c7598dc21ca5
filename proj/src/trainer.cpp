#include "figrot/trainer.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include "figrot/error.hpp"

namespace figrot {

// ---- config -------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr > 0.0)) fail(ErrorKind::kValidation, "lr must be positive");
  if (!(weight_decay >= 0.0)) fail(ErrorKind::kValidation, "weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    fail(ErrorKind::kValidation, "betas must lie in [0, 1)");
  }
  if (!(adam_epsilon > 0.0)) fail(ErrorKind::kValidation, "adam_epsilon must be positive");
  if (batch_size == 0) fail(ErrorKind::kValidation, "batch_size must be at least 1");
  if (epochs == 0) fail(ErrorKind::kValidation, "epochs must be at least 1");
  if (max_triplets && *max_triplets == 0) fail(ErrorKind::kValidation, "max_triplets must be positive");
  loss.validate();
  fusion.validate();
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["lr"] = c.lr;
  j["weight_decay"] = c.weight_decay;
  j["betas"] = {c.beta1, c.beta2};
  j["adam_epsilon"] = c.adam_epsilon;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["seed"] = c.seed;
  j["mode"] = to_string(c.mode);
  j["max_triplets"] = c.max_triplets ? nlohmann::ordered_json(*c.max_triplets) : nlohmann::ordered_json(nullptr);
  j["loss"] = to_json(c.loss);
  j["fusion"] = to_json(c.fusion);
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  if (j.contains("betas")) {
    c.beta1 = j["betas"].at(0).get<double>();
    c.beta2 = j["betas"].at(1).get<double>();
  }
  c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  if (j.contains("mode")) c.mode = parse_fusion_mode(j["mode"].get<std::string>());
  if (j.contains("max_triplets") && !j["max_triplets"].is_null()) c.max_triplets = j["max_triplets"].get<std::size_t>();
  if (j.contains("loss")) c.loss = loss_config_from_json(j["loss"]);
  if (j.contains("fusion")) c.fusion = fusion_config_from_json(j["fusion"]);
  return c;
}

// ---- AdamW --------------------------------------------------------------------------

template <typename T>
AdamState<T> AdamState<T>::zeros_like(const std::vector<ad::Parameter<T>>& params) {
  AdamState s;
  for (const auto& p : params) {
    s.first.emplace_back(p.value.rows(), p.value.cols());
    s.second.emplace_back(p.value.rows(), p.value.cols());
  }
  return s;
}

template <typename T>
void adamw_step(std::vector<ad::Parameter<T>>& params, AdamState<T>& state, const TrainConfig& config) {
  if (state.first.size() != params.size() || state.second.size() != params.size()) {
    fail(ErrorKind::kShape, "optimizer state does not match parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (!p.grad.same_shape(p.value) || !state.first[i].same_shape(p.value) || !state.second[i].same_shape(p.value)) {
      fail(ErrorKind::kShape, "shape mismatch in optimizer for " + p.name);
    }
    if (!p.grad.all_finite()) fail(ErrorKind::kNumeric, "non-finite gradient in parameter " + p.name);
  }
  state.step += 1;
  const double t = double(state.step);
  const double correction1 = 1.0 - std::pow(config.beta1, t);
  const double correction2 = 1.0 - std::pow(config.beta2, t);
  const T decay = static_cast<T>(1.0 - config.lr * config.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& m = state.first[i];
    auto& v = state.second[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      m[k] = static_cast<T>(config.beta1 * double(m[k]) + (1.0 - config.beta1) * g);
      v[k] = static_cast<T>(config.beta2 * double(v[k]) + (1.0 - config.beta2) * g * g);
      const double m_hat = double(m[k]) / correction1;
      const double v_hat = double(v[k]) / correction2;
      p.value[k] *= decay;
      p.value[k] -= static_cast<T>(config.lr * m_hat / (std::sqrt(v_hat) + config.adam_epsilon));
    }
  }
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adamw_step(std::vector<ad::Parameter<float>>&, AdamState<float>&, const TrainConfig&);
template void adamw_step(std::vector<ad::Parameter<double>>&, AdamState<double>&, const TrainConfig&);

// ---- checkpoints ----------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'F', 'G', 'C', 'K'};

void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int width) {
  for (int i = 0; i < width; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_record(std::vector<std::uint8_t>& out, const std::string& name, const Tensor<float>& t) {
  put_le(out, name.size(), 2);
  out.insert(out.end(), name.begin(), name.end());
  out.push_back(2);
  put_le(out, t.rows(), 4);
  put_le(out, t.cols(), 4);
  for (float v : t.data()) put_le(out, std::bit_cast<std::uint32_t>(v), 4);
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

  std::uint64_t le(int width) {
    need(std::size_t(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= std::uint64_t(bytes_[pos_ + std::size_t(i)]) << (8 * i);
    pos_ += std::size_t(width);
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::pair<std::string, Tensor<float>> record() {
    std::string name = str(le(2));
    const auto rank = le(1);
    if (rank == 0 || rank > 2) fail(ErrorKind::kFormat, "checkpoint record " + name + " has unsupported rank");
    std::size_t rows = 1, cols = le(4);
    if (rank == 2) {
      rows = cols;
      cols = le(4);
    }
    need(rows * cols * 4);
    std::vector<float> data(rows * cols);
    for (auto& v : data) v = std::bit_cast<float>(static_cast<std::uint32_t>(le(4)));
    return {std::move(name), Tensor<float>(rows, cols, std::move(data))};
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) {
    if (bytes_.size() - pos_ < n) fail(ErrorKind::kFormat, "truncated checkpoint at byte " + std::to_string(pos_));
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::ordered_json header;
  header["format_version"] = kCheckpointVersion;
  header["step"] = ckpt.optimizer.step;
  header["seed"] = ckpt.config.seed;
  header["fusion"] = to_json(ckpt.model.config());
  header["train"] = to_json(ckpt.config);
  const std::string json = header.dump();

  std::vector<std::uint8_t> out(kCkptMagic, kCkptMagic + 4);
  put_le(out, kCheckpointVersion, 4);
  put_le(out, json.size(), 4);
  out.insert(out.end(), json.begin(), json.end());
  const auto& params = ckpt.model.parameters();
  for (const auto& p : params) put_record(out, p.name, p.value);
  for (std::size_t i = 0; i < params.size(); ++i) put_record(out, "adam.m/" + params[i].name, ckpt.optimizer.first.at(i));
  for (std::size_t i = 0; i < params.size(); ++i) put_record(out, "adam.v/" + params[i].name, ckpt.optimizer.second.at(i));
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCkptMagic, 4) != 0) {
    fail(ErrorKind::kFormat, "bad magic: not a checkpoint");
  }
  Reader in(bytes.subspan(4));
  const auto version = in.le(4);
  if (version != kCheckpointVersion) fail(ErrorKind::kFormat, "unsupported checkpoint version " + std::to_string(version));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.str(in.le(4)));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  Checkpoint ckpt;
  ckpt.config = train_config_from_json(header.at("train"));
  const FusionConfig fusion = fusion_config_from_json(header.at("fusion"));

  std::vector<ad::Parameter<float>> params;
  const std::size_t count = VagfemModel<float>(fusion, 0).parameters().size();
  for (std::size_t i = 0; i < count; ++i) {
    auto [name, value] = in.record();
    params.emplace_back(std::move(name), std::move(value));
  }
  ckpt.model = VagfemModel<float>::from_parameters(fusion, std::move(params));
  ckpt.config.fusion = fusion;
  const auto& ps = ckpt.model.parameters();
  for (auto* moments : {&ckpt.optimizer.first, &ckpt.optimizer.second}) {
    const std::string prefix = moments == &ckpt.optimizer.first ? "adam.m/" : "adam.v/";
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto [name, value] = in.record();
      if (name != prefix + ps[i].name || !value.same_shape(ps[i].value)) {
        fail(ErrorKind::kShape, "optimizer record '" + name + "' does not match parameter " + ps[i].name);
      }
      moments->push_back(std::move(value));
    }
  }
  ckpt.optimizer.step = header.at("step").get<std::uint64_t>();
  if (in.remaining() != 0) fail(ErrorKind::kFormat, "trailing bytes after checkpoint records");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::kIo, "write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const FusionConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Checkpoint ckpt = decode_checkpoint(bytes);
  if (expected != nullptr) {
    const auto& have = ckpt.model.config();
    if (have.embed_dim != expected->embed_dim || have.model_dim != expected->model_dim ||
        have.layers != expected->layers || have.heads != expected->heads || have.head_dim != expected->head_dim ||
        have.ffn_mult != expected->ffn_mult) {
      fail(ErrorKind::kShape, "checkpoint shape " + to_json(have).dump() + " does not match requested " +
                                  to_json(*expected).dump());
    }
  }
  return ckpt;
}

// ---- logs --------------------------------------------------------------------------------

nlohmann::ordered_json to_json(const StepLog& s) {
  nlohmann::ordered_json j;
  j["step"] = s.step;
  j["epoch"] = s.epoch;
  j["batch_size"] = s.batch_size;
  j["infonce"] = s.loss.infonce;
  j["triplet"] = s.loss.triplet;
  j["total"] = s.loss.total;
  return j;
}

void write_train_log(const std::filesystem::path& jsonl, const TrainLog& log) {
  std::ofstream out(jsonl, std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot open " + jsonl.string() + " for writing");
  for (const auto& s : log.steps) out << to_json(s).dump() << '\n';
}

nlohmann::ordered_json summary_json(const TrainLog& log) {
  nlohmann::ordered_json j;
  j["config"] = log.config;
  j["records_used"] = log.records_used;
  j["steps"] = log.steps.size();
  auto means = nlohmann::ordered_json::array();
  for (const auto& m : log.epoch_means) {
    means.push_back({{"infonce", m.infonce}, {"triplet", m.triplet}, {"total", m.total}});
  }
  j["epoch_means"] = means;
  j["wall_seconds"] = log.wall_seconds;
  return j;
}

// ---- sampling --------------------------------------------------------------------------------

namespace {

std::mt19937_64 seeded(std::uint64_t seed, std::uint64_t stream, std::uint64_t salt) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(stream), std::uint32_t(stream >> 32),
                    std::uint32_t(salt)};
  return std::mt19937_64(seq);
}

void fisher_yates(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

constexpr std::uint64_t kShuffleSalt = 0x5348u;
constexpr std::uint64_t kSubsampleSalt = 0x5355u;

}  // namespace

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto rng = seeded(seed, epoch, kShuffleSalt);
  fisher_yates(order, rng);
  return order;
}

std::vector<std::size_t> stratified_subsample(std::span<const TripletRecord> records, std::size_t cap,
                                              std::uint64_t seed) {
  const std::size_t n = records.size();
  if (cap >= n) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  std::map<Task, std::vector<std::size_t>> by_task;
  for (std::size_t i = 0; i < n; ++i) by_task[records[i].task].push_back(i);

  // Largest-remainder apportionment of `cap` across classes.
  std::vector<std::pair<Task, std::size_t>> quota;
  std::vector<std::pair<double, Task>> remainders;
  std::size_t assigned = 0;
  for (const auto& [task, idx] : by_task) {
    const double exact = double(cap) * double(idx.size()) / double(n);
    const auto base = static_cast<std::size_t>(std::floor(exact));
    quota.emplace_back(task, base);
    remainders.emplace_back(exact - double(base), task);
    assigned += base;
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < cap; ++i, ++assigned) {
    const Task t = remainders[i % remainders.size()].second;
    for (auto& q : quota) {
      if (q.first == t) ++q.second;
    }
  }

  std::vector<std::size_t> chosen;
  for (const auto& [task, take] : quota) {
    auto idx = by_task[task];
    auto rng = seeded(seed, static_cast<std::uint64_t>(task), kSubsampleSalt);
    fisher_yates(idx, rng);
    chosen.insert(chosen.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(take, idx.size())));
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

// ---- training loop --------------------------------------------------------------------------------

TrainResult train(std::span<const TripletRecord> all_records, const DataBundle& data, const TrainConfig& config,
                  const TrainOptions& options) {
  const auto started = std::chrono::steady_clock::now();
  config.validate();
  if (all_records.empty()) fail(ErrorKind::kValidation, "training set is empty");
  if (config.fusion.embed_dim != data.dim()) {
    fail(ErrorKind::kShape, "fusion embed_dim " + std::to_string(config.fusion.embed_dim) + " != data dim " +
                                std::to_string(data.dim()));
  }

  std::vector<std::size_t> used = config.max_triplets ? stratified_subsample(all_records, *config.max_triplets, config.seed)
                                                      : stratified_subsample(all_records, all_records.size(), config.seed);
  std::vector<TripletRecord> records;
  records.reserve(used.size());
  for (std::size_t i : used) records.push_back(all_records[i]);
  validate_records(records, data);
  const bool needs_empty = config.loss.triplet_enabled && config.loss.negative_source == NegativeSource::kFusedEmptyText;
  if (needs_empty && !data.texts.contains(kEmptyTextId)) {
    fail(ErrorKind::kValidation, "text store lacks the empty-text row '" + std::string(kEmptyTextId) + "'");
  }

  TrainResult result;
  Checkpoint& ckpt = result.checkpoint;
  if (options.resume != nullptr) {
    ckpt = *options.resume;
    if (!(ckpt.model.config() == config.fusion)) {
      // Mask ratio may differ; shapes may not.
      FusionConfig a = ckpt.model.config(), b = config.fusion;
      a.mask_ratio = b.mask_ratio;
      if (!(a == b)) fail(ErrorKind::kShape, "resume checkpoint fusion config differs from run config");
      ckpt.model.set_mask_ratio(config.fusion.mask_ratio);
    }
    ckpt.config = config;
  } else {
    ckpt.config = config;
    ckpt.model = VagfemModel<float>(config.fusion, config.seed);
    ckpt.optimizer = AdamState<float>::zeros_like(ckpt.model.parameters());
  }

  const std::size_t n = records.size();
  const std::size_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::uint64_t total_steps = per_epoch * config.epochs;
  const std::uint64_t last = options.stop_at_step ? std::min(total_steps, *options.stop_at_step) : total_steps;

  TrainLog& log = result.log;
  log.config = to_json(config);
  log.records_used = n;

  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<std::size_t> order;
  for (std::uint64_t step = ckpt.optimizer.step; step < last; step = ckpt.optimizer.step) {
    const std::size_t epoch = static_cast<std::size_t>(step / per_epoch);
    const std::size_t slot = static_cast<std::size_t>(step % per_epoch);
    if (epoch != cached_epoch) {
      order = epoch_order(n, config.seed, epoch);
      cached_epoch = epoch;
    }
    const std::size_t begin = slot * config.batch_size;
    const std::size_t end = std::min(n, begin + config.batch_size);
    std::span<const std::size_t> indices(order.data() + begin, end - begin);
    const auto batch = assemble_batch(records, indices, data);

    ckpt.model.zero_grad();
    LossBreakdown breakdown;
    {
      ad::Tape<float> tape;
      auto bound = bind_trainable(tape, ckpt.model);
      auto loss = combined_loss(bound, batch, config.mode, config.loss);
      breakdown = loss.breakdown;
      tape.backward(loss.total);
    }
    adamw_step(ckpt.model.parameters(), ckpt.optimizer, config);

    StepLog entry{step, epoch, end - begin, breakdown};
    log.steps.push_back(entry);
    if (options.on_step) options.on_step(entry);
  }

  // Epoch means over the steps this call ran.
  std::map<std::size_t, std::pair<LossBreakdown, std::size_t>> sums;
  for (const auto& s : log.steps) {
    auto& [acc, count] = sums[s.epoch];
    acc.infonce += s.loss.infonce;
    acc.triplet += s.loss.triplet;
    acc.total += s.loss.total;
    ++count;
  }
  for (const auto& [epoch, entry] : sums) {
    const auto& [acc, count] = entry;
    log.epoch_means.push_back({acc.infonce / double(count), acc.triplet / double(count), acc.total / double(count)});
  }
  log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

LossBreakdown evaluate_loss(const VagfemModel<float>& model, std::span<const TripletRecord> records,
                            const DataBundle& data, const TrainConfig& config) {
  if (records.empty()) fail(ErrorKind::kValidation, "evaluate_loss: no records");
  validate_records(records, data);
  LossBreakdown acc;
  std::size_t batches = 0;
  for (std::size_t begin = 0; begin < records.size(); begin += config.batch_size) {
    const std::size_t end = std::min(records.size(), begin + config.batch_size);
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    const auto batch = assemble_batch(records, idx, data);
    ad::Tape<float> tape;
    auto bound = bind_frozen(tape, model);
    const auto b = combined_loss(bound, batch, config.mode, config.loss).breakdown;
    acc.infonce += b.infonce;
    acc.triplet += b.triplet;
    acc.total += b.total;
    ++batches;
  }
  return {acc.infonce / double(batches), acc.triplet / double(batches), acc.total / double(batches)};
}

}  // namespace figrot
