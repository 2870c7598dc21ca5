#include "figrot/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "figrot/analysis.hpp"
#include "figrot/dataset.hpp"
#include "figrot/embedstore.hpp"
#include "figrot/error.hpp"
#include "figrot/metrics.hpp"
#include "figrot/synthetic.hpp"
#include "figrot/trainer.hpp"
#include "json.hpp"

namespace figrot {

namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

// JSON config files: top-level keys are flag names of the active
// subcommand; an object keyed by a subcommand name scopes its contents.
class JsonConfig : public CLI::Config {
 public:
  explicit JsonConfig(const CLI::App* root) : root_(root) {}

  std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}"; }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(input);
    } catch (const nlohmann::json::exception& e) {
      throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw CLI::ConversionError("config file must hold a JSON object");
    std::string active;
    for (const auto* sub : root_->get_subcommands()) active = sub->get_name();
    std::vector<CLI::ConfigItem> items;
    for (const auto& [key, value] : j.items()) {
      if (value.is_object()) {
        if (key != active) continue;
        for (const auto& [k2, v2] : value.items()) items.push_back(item({active}, k2, v2));
      } else {
        items.push_back(item({active}, key, value));
      }
    }
    return items;
  }

 private:
  static std::string scalar(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }

  static CLI::ConfigItem item(std::vector<std::string> parents, const std::string& name, const nlohmann::json& v) {
    CLI::ConfigItem it;
    it.parents = std::move(parents);
    it.name = name;
    if (v.is_array()) {
      for (const auto& e : v) it.inputs.push_back(scalar(e));
    } else {
      it.inputs.push_back(scalar(v));
    }
    return it;
  }

  const CLI::App* root_;
};

void write_json(const fs::path& path, const ojson& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) fail(ErrorKind::kIo, "write failed for " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out << text;
}

void require_file(const fs::path& p, const char* what) {
  if (!fs::is_regular_file(p)) fail(ErrorKind::kIo, std::string(what) + " not found: " + p.string());
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) fail(ErrorKind::kIo, "cannot create " + p.string() + ": " + ec.message());
}

std::string fingerprint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::uint64_t h = 1469598103934665603ull;
  char c;
  while (in.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "fnv1a64:%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- shared flag groups ---------------------------------------------------------

struct DataFlags {
  std::string dir;
  std::string images, texts, gallery, triplets;

  void add(CLI::App* app) {
    app->add_option("--data", dir, "Directory with images.fige, texts.fige, gallery.fige, triplets.jsonl");
    app->add_option("--images", images, "Reference image store");
    app->add_option("--texts", texts, "Text store (holds __EMPTY__)");
    app->add_option("--gallery", gallery, "Gallery store");
    app->add_option("--triplets", triplets, "Triplet JSONL");
  }

  BundlePaths paths() const {
    BundlePaths p = dir.empty() ? BundlePaths{} : BundlePaths::in_directory(dir);
    if (!images.empty()) p.images = images;
    if (!texts.empty()) p.texts = texts;
    if (!gallery.empty()) p.gallery = gallery;
    if (!triplets.empty()) p.triplets = triplets;
    if (p.images.empty() || p.texts.empty() || p.gallery.empty() || p.triplets.empty()) {
      fail(ErrorKind::kUsage, "give --data or all of --images --texts --gallery --triplets");
    }
    require_file(p.images, "image store");
    require_file(p.texts, "text store");
    require_file(p.gallery, "gallery store");
    require_file(p.triplets, "triplet file");
    return p;
  }
};

struct ModelFlags {
  std::optional<std::size_t> model_dim, layers, heads, head_dim, ffn_mult;
  std::optional<double> mask_ratio;
  std::optional<std::string> mode;

  void add(CLI::App* app) {
    app->add_option("--model-dim", model_dim);
    app->add_option("--layers", layers);
    app->add_option("--heads", heads);
    app->add_option("--head-dim", head_dim);
    app->add_option("--ffn-mult", ffn_mult);
    app->add_option("--mask-ratio", mask_ratio);
    app->add_option("--mode", mode, "vagfem or baseline");
  }

  void apply(FusionConfig& f) const {
    if (model_dim) f.model_dim = *model_dim;
    if (layers) f.layers = *layers;
    if (heads) f.heads = *heads;
    if (head_dim) f.head_dim = *head_dim;
    if (ffn_mult) f.ffn_mult = *ffn_mult;
    if (mask_ratio) f.mask_ratio = *mask_ratio;
  }
};

struct TrainFlags {
  std::optional<double> lr, weight_decay, beta1, beta2, adam_epsilon, temperature, margin, lambda;
  std::optional<std::size_t> batch_size, epochs, max_triplets;
  std::optional<std::uint64_t> seed;
  std::optional<bool> triplet;
  std::optional<std::string> negative_source;

  void add(CLI::App* app) {
    app->add_option("--lr", lr);
    app->add_option("--weight-decay", weight_decay);
    app->add_option("--beta1", beta1);
    app->add_option("--beta2", beta2);
    app->add_option("--adam-epsilon", adam_epsilon);
    app->add_option("--batch-size", batch_size);
    app->add_option("--epochs", epochs);
    app->add_option("--max-triplets", max_triplets, "Stratified cap on training triplets");
    app->add_option("--seed", seed);
    app->add_option("--temperature", temperature);
    app->add_option("--margin", margin);
    app->add_option("--lambda", lambda);
    app->add_option("--triplet", triplet, "on/off");
    app->add_option("--negative-source", negative_source, "fused_empty_text or raw_reference");
  }

  void apply(TrainConfig& c) const {
    if (lr) c.lr = *lr;
    if (weight_decay) c.weight_decay = *weight_decay;
    if (beta1) c.beta1 = *beta1;
    if (beta2) c.beta2 = *beta2;
    if (adam_epsilon) c.adam_epsilon = *adam_epsilon;
    if (batch_size) c.batch_size = *batch_size;
    if (epochs) c.epochs = *epochs;
    if (max_triplets) c.max_triplets = *max_triplets;
    if (seed) c.seed = *seed;
    if (temperature) c.loss.temperature = *temperature;
    if (margin) c.loss.margin = *margin;
    if (lambda) c.loss.lambda = *lambda;
    if (triplet) c.loss.triplet_enabled = *triplet;
    if (negative_source) c.loss.negative_source = parse_negative_source(*negative_source);
  }
};

const std::set<std::string> kPathFlags = {"--data", "--images", "--texts",  "--gallery", "--triplets", "--out",
                                          "--input", "--output", "--checkpoint", "--resume", "--config", "--eval-triplets"};

// Non-path flags the subcommand received, from the command line or a
// config file.
ojson overrides(const CLI::App* sub) {
  ojson j = ojson::object();
  for (const auto* opt : sub->get_options()) {
    const std::string name = opt->get_name();
    if (opt->count() == 0 || kPathFlags.count(name) || name == "--help") continue;
    const auto& res = opt->results();
    j[name.substr(2)] = res.size() == 1 ? ojson(res.front()) : ojson(res);
  }
  return j;
}

struct LoadedModel {
  VagfemModel<float> model;
  std::optional<TrainConfig> trained_with;
  std::string id;
};

LoadedModel load_model(const std::string& checkpoint, const ModelFlags& mf, std::size_t dim, std::uint64_t seed) {
  LoadedModel lm;
  if (!checkpoint.empty()) {
    require_file(checkpoint, "checkpoint");
    auto ckpt = load_checkpoint(checkpoint);
    if (ckpt.model.config().embed_dim != dim) {
      fail(ErrorKind::kShape, "checkpoint embed_dim " + std::to_string(ckpt.model.config().embed_dim) +
                                  " does not match data dim " + std::to_string(dim));
    }
    lm.model = std::move(ckpt.model);
    if (mf.mask_ratio) lm.model.set_mask_ratio(*mf.mask_ratio);
    lm.trained_with = ckpt.config;
    lm.id = fingerprint(checkpoint);
  } else {
    FusionConfig f;
    f.embed_dim = dim;
    mf.apply(f);
    lm.model = VagfemModel<float>(f, seed);
    lm.id = "untrained:seed=" + std::to_string(seed);
  }
  return lm;
}

FusionMode resolve_mode(const ModelFlags& mf, const LoadedModel& lm) {
  if (mf.mode) return parse_fusion_mode(*mf.mode);
  return lm.trained_with ? lm.trained_with->mode : FusionMode::kVagfem;
}

ojson model_echo(const LoadedModel& lm, FusionMode mode, const CLI::App* sub) {
  ojson j;
  j["mode"] = to_string(mode);
  j["fusion"] = to_json(lm.model.config());
  j["train"] = lm.trained_with ? to_json(*lm.trained_with) : ojson(nullptr);
  j["overrides"] = overrides(sub);
  return j;
}

std::string fmt_double(double v, int precision) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

// ---- subcommands --------------------------------------------------------------

int run_filter(const std::string& input, const std::string& output, double threshold, std::ostream& out) {
  require_file(input, "scored pairs");
  const auto pairs = load_scored_pairs(input);
  const auto kept = clip_filter(pairs, threshold);
  save_scored_pairs(output, kept);
  out << ojson{{"input", pairs.size()}, {"kept", kept.size()}, {"threshold", threshold}}.dump() << '\n';
  return 0;
}

int run_stats(const std::string& triplets, const std::string& output, std::ostream& out) {
  require_file(triplets, "triplet file");
  const auto records = load_triplets(triplets);
  const auto stats = dataset_stats(records);
  auto length = [](const TaskStats& t) { return t.mean_text_length ? fmt_double(*t.mean_text_length, 2) : "--"; };
  out << "task\ttriplets\twith_text\tavg_text_length\n";
  ojson j;
  for (const auto& [task, t] : stats.per_task) {
    out << to_string(task) << '\t' << t.count << '\t' << t.with_text << '\t' << length(t) << '\n';
    j[std::string(to_string(task))] = {{"triplets", t.count},
                                       {"with_text", t.with_text},
                                       {"avg_text_length", t.mean_text_length ? ojson(*t.mean_text_length) : ojson(nullptr)}};
  }
  out << "total\t" << stats.total.count << '\t' << stats.total.with_text << '\t' << length(stats.total) << '\n';
  j["total"] = {{"triplets", stats.total.count},
                {"with_text", stats.total.with_text},
                {"avg_text_length", stats.total.mean_text_length ? ojson(*stats.total.mean_text_length) : ojson(nullptr)}};
  if (!output.empty()) write_json(output, j);
  return 0;
}

struct TrainRun {
  Checkpoint checkpoint;
  TrainLog log;
};

TrainRun train_into(const fs::path& out_dir, const DataBundle& data, const std::vector<TripletRecord>& records,
                    const TrainConfig& config, const Checkpoint* resume, std::optional<std::uint64_t> stop,
                    const ojson& echo) {
  ensure_dir(out_dir);
  TrainOptions opts;
  opts.resume = resume;
  opts.stop_at_step = stop;
  auto result = train(records, data, config, opts);
  save_checkpoint(out_dir / "checkpoint.fgck", result.checkpoint);
  write_train_log(out_dir / "train_log.jsonl", result.log);
  auto summary = summary_json(result.log);
  summary["overrides"] = echo;
  summary["final_step"] = result.checkpoint.step();
  write_json(out_dir / "train_summary.json", summary);
  return {std::move(result.checkpoint), std::move(result.log)};
}

MetricReport eval_into(const fs::path& out_dir, const std::vector<TripletRecord>& records, const LoadedModel& lm,
                       const DataBundle& data, const EvalConfig& cfg, bool write_rankings) {
  ensure_dir(out_dir);
  std::vector<RankedList> rankings;
  auto report = evaluate(records, lm.model, data, cfg, write_rankings ? &rankings : nullptr);
  write_json(out_dir / "metrics.json", to_json(report));
  write_text(out_dir / "metrics.tsv", to_tsv(report));
  if (write_rankings) write_ranked_lists(out_dir / "rankings.jsonl", rankings);
  return report;
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"figrot: variance-gated fusion for image-guided retrieval"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  app.set_config("--config", "", "JSON config; command-line flags take precedence");
  app.config_formatter(std::make_shared<JsonConfig>(&app));

  // filter
  auto* filter = app.add_subcommand("filter", "Keep scored pairs strictly above a similarity threshold");
  std::string filter_in, filter_out;
  double threshold = 0.9;
  filter->add_option("--input", filter_in, "Scored pairs JSONL")->required();
  filter->add_option("--output", filter_out, "Filtered JSONL")->required();
  filter->add_option("--threshold", threshold)->capture_default_str();

  // stats
  auto* stats = app.add_subcommand("stats", "Per-task triplet counts and text lengths");
  std::string stats_triplets, stats_out, stats_data;
  stats->add_option("--triplets", stats_triplets);
  stats->add_option("--data", stats_data);
  stats->add_option("--output", stats_out, "Also write JSON here");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train the fusion model");
  DataFlags train_data;
  ModelFlags train_model;
  TrainFlags train_flags;
  std::string train_out, resume;
  std::optional<std::uint64_t> stop_at;
  train_data.add(train_cmd);
  train_model.add(train_cmd);
  train_flags.add(train_cmd);
  train_cmd->add_option("--out", train_out, "Output directory")->required();
  train_cmd->add_option("--resume", resume, "Checkpoint to continue from");
  train_cmd->add_option("--stop-at-step", stop_at, "Stop after this many optimizer steps in total");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Retrieval metrics for a checkpoint (or an untrained model)");
  DataFlags eval_data;
  ModelFlags eval_model;
  std::string eval_ckpt, eval_out;
  std::uint64_t eval_seed = 0;
  bool self_exclusion = true, write_rankings = false;
  std::size_t eval_batch = 256, shards = 1, threads = 1;
  eval_data.add(eval_cmd);
  eval_model.add(eval_cmd);
  eval_cmd->add_option("--checkpoint", eval_ckpt);
  eval_cmd->add_option("--seed", eval_seed, "Init seed when no checkpoint is given");
  eval_cmd->add_option("--out", eval_out, "Output directory")->required();
  eval_cmd->add_option("--self-exclusion", self_exclusion, "on/off")->capture_default_str();
  eval_cmd->add_option("--batch-size", eval_batch)->capture_default_str();
  eval_cmd->add_option("--shards", shards)->capture_default_str();
  eval_cmd->add_option("--threads", threads)->capture_default_str();
  eval_cmd->add_option("--rankings", write_rankings, "Also write rankings.jsonl (on/off)");

  // retrieve
  auto* retrieve = app.add_subcommand("retrieve", "Top-K gallery items for one query");
  DataFlags ret_data;
  ModelFlags ret_model;
  std::string ret_ckpt, ret_query, ret_text;
  std::uint64_t ret_seed = 0;
  std::size_t ret_k = 10;
  bool ret_exclude = true;
  ret_data.add(retrieve);
  ret_model.add(retrieve);
  retrieve->add_option("--checkpoint", ret_ckpt);
  retrieve->add_option("--seed", ret_seed);
  retrieve->add_option("--query", ret_query, "Reference image id")->required();
  retrieve->add_option("--text-id", ret_text, "Text id (default: empty text)");
  retrieve->add_option("--k", ret_k)->capture_default_str();
  retrieve->add_option("--self-exclusion", ret_exclude)->capture_default_str();

  // analyze
  auto* analyze = app.add_subcommand("analyze", "Similarity histograms, variance profile, mask stability");
  DataFlags an_data;
  ModelFlags an_model;
  std::string an_ckpt, an_out;
  std::uint64_t an_seed = 0;
  std::size_t bins = 50, an_batch = 32;
  an_data.add(analyze);
  an_model.add(analyze);
  analyze->add_option("--checkpoint", an_ckpt);
  analyze->add_option("--seed", an_seed, "Init and negative-sampling seed")->capture_default_str();
  analyze->add_option("--out", an_out)->required();
  analyze->add_option("--bins", bins)->capture_default_str();
  analyze->add_option("--batch-size", an_batch, "Batch size for mask stability")->capture_default_str();

  // gen-synthetic
  auto* gen = app.add_subcommand("gen-synthetic", "Write the seeded synthetic fixture");
  SyntheticSpec spec;
  std::string gen_out;
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--n", spec.triplets)->capture_default_str();
  gen->add_option("--dim", spec.dim)->capture_default_str();
  gen->add_option("--seed", spec.seed)->capture_default_str();
  gen->add_option("--noise", spec.noise)->capture_default_str();

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Train and evaluate at several training-set caps");
  DataFlags sw_data;
  ModelFlags sw_model;
  TrainFlags sw_flags;
  std::string sw_out, sw_eval_triplets;
  std::vector<std::string> caps = {"1000", "2000", "5000", "10000", "all"};
  sw_data.add(sweep);
  sw_model.add(sweep);
  sw_flags.add(sweep);
  sweep->add_option("--out", sw_out)->required();
  sweep->add_option("--caps", caps, "Caps, 'all' for no cap")->delimiter(',')->capture_default_str();
  sweep->add_option("--eval-triplets", sw_eval_triplets, "Evaluation triplets (default: training triplets)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return e.get_exit_code() == 0 ? code : 2;
  }

  try {
    if (*filter) return run_filter(filter_in, filter_out, threshold, out);

    if (*stats) {
      if (stats_triplets.empty() && stats_data.empty()) fail(ErrorKind::kUsage, "stats needs --triplets or --data");
      const std::string path = stats_triplets.empty() ? BundlePaths::in_directory(stats_data).triplets.string() : stats_triplets;
      return run_stats(path, stats_out, out);
    }

    if (*gen) {
      const auto data = gen_synthetic(spec);
      write_synthetic(gen_out, data);
      out << ojson{{"out", gen_out}, {"triplets", data.records.size()}, {"gallery", data.bundle.gallery.count()},
                   {"dim", spec.dim}, {"seed", spec.seed}}
                 .dump()
          << '\n';
      return 0;
    }

    if (*train_cmd) {
      const auto paths = train_data.paths();
      std::optional<Checkpoint> ckpt;
      if (!resume.empty()) require_file(resume, "resume checkpoint");
      const auto data = load_bundle(paths);
      const auto records = load_triplets(paths.triplets);
      TrainConfig cfg;
      if (!resume.empty()) {
        ckpt = load_checkpoint(resume);
        cfg = ckpt->config;
      }
      cfg.fusion.embed_dim = data.dim();
      train_model.apply(cfg.fusion);
      if (train_model.mode) cfg.mode = parse_fusion_mode(*train_model.mode);
      train_flags.apply(cfg);
      auto run = train_into(train_out, data, records, cfg, ckpt ? &*ckpt : nullptr, stop_at, overrides(train_cmd));
      ojson line{{"checkpoint", (fs::path(train_out) / "checkpoint.fgck").string()},
                 {"steps", run.checkpoint.step()},
                 {"records_used", run.log.records_used}};
      auto means = ojson::array();
      for (const auto& m : run.log.epoch_means) means.push_back(m.total);
      line["epoch_mean_loss"] = means;
      out << line.dump() << '\n';
      return 0;
    }

    if (*eval_cmd) {
      const auto paths = eval_data.paths();
      const auto data = load_bundle(paths);
      const auto records = load_triplets(paths.triplets);
      const auto lm = load_model(eval_ckpt, eval_model, data.dim(), eval_seed);
      EvalConfig cfg;
      cfg.mode = resolve_mode(eval_model, lm);
      cfg.batch_size = eval_batch;
      cfg.self_exclusion = self_exclusion;
      cfg.search = {shards, threads};
      cfg.checkpoint_id = lm.id;
      cfg.config_echo = model_echo(lm, cfg.mode, eval_cmd);
      const auto report = eval_into(eval_out, records, lm, data, cfg, write_rankings);
      out << to_tsv(report);
      return 0;
    }

    if (*retrieve) {
      const auto paths = ret_data.paths();
      const auto data = load_bundle(paths);
      const auto records = load_triplets(paths.triplets);
      validate_records(records, data);
      const auto lm = load_model(ret_ckpt, ret_model, data.dim(), ret_seed);
      const FusionMode mode = resolve_mode(ret_model, lm);
      // Mask statistics come from the full query set, as in eval.
      std::vector<std::size_t> all(records.size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      Tensor<float> images, texts;
      gather_queries(records, all, data, images, texts);
      BatchMask mask;
      encode_queries(lm.model, images, texts, mode, 256, &mask);

      const std::string text_id = ret_text.empty() ? std::string(kEmptyTextId) : ret_text;
      std::vector<std::string> one_img{ret_query}, one_txt{text_id};
      const auto qi = gather_rows(data.images, one_img);
      const auto qt = gather_rows(data.texts, one_txt);
      ad::Tape<float> tape;
      auto bound = bind_frozen(tape, lm.model);
      const auto fused = forward(bound, qi, qt, mode, mode == FusionMode::kVagfem ? &mask : nullptr).query.value();
      std::optional<std::string_view> ex;
      if (ret_exclude) ex = ret_query;
      auto list = search_topk(fused.row(0), Gallery(data.gallery), ret_k, ex, ret_query + "|" + text_id);
      out << to_json(list).dump() << '\n';
      return 0;
    }

    if (*analyze) {
      const auto paths = an_data.paths();
      const auto data = load_bundle(paths);
      const auto records = load_triplets(paths.triplets);
      validate_records(records, data);
      const auto lm = load_model(an_ckpt, an_model, data.dim(), an_seed);
      const FusionMode mode = resolve_mode(an_model, lm);
      ensure_dir(an_out);
      std::vector<std::size_t> all(records.size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      Tensor<float> images, texts;
      gather_queries(records, all, data, images, texts);
      const auto queries = encode_queries(lm.model, images, texts, mode);
      const auto united = encode_queries(lm.model, images, texts, FusionMode::kBaseline);
      std::vector<std::string> target_ids;
      for (const auto& r : records) target_ids.push_back(r.target_ids.front());
      const auto targets = gather_rows(data.gallery, target_ids);

      const auto dist = similarity_distribution(queries, targets, target_ids, an_seed, bins);
      const auto profile = variance_profile(united);
      std::vector<Tensor<float>> batches;
      for (std::size_t b = 0; b + an_batch <= united.rows(); b += an_batch) {
        Tensor<float> t(an_batch, united.cols());
        for (std::size_t r = 0; r < an_batch; ++r) {
          std::copy(united.row(b + r).begin(), united.row(b + r).end(), t.row(r).begin());
        }
        batches.push_back(std::move(t));
      }
      ojson j;
      j["positive"] = to_json(dist.positive);
      j["negative"] = to_json(dist.negative);
      j["variance_profile"] = profile_json(profile);
      const std::size_t k = lm.model.config().mask_k();
      if (batches.size() >= 2 && k > 0) {
        j["mask_stability"] = {{"batch_size", an_batch}, {"k", k}, {"jaccard", mask_stability(batches, k)}};
      } else {
        j["mask_stability"] = nullptr;
      }
      j["metadata"] = model_echo(lm, mode, analyze);
      j["metadata"]["checkpoint"] = lm.id;
      write_json(fs::path(an_out) / "analysis.json", j);
      write_histogram_dat(fs::path(an_out) / "positive.dat", dist.positive);
      write_histogram_dat(fs::path(an_out) / "negative.dat", dist.negative);
      write_profile_dat(fs::path(an_out) / "variance_profile.dat", profile);
      out << ojson{{"positive_mean", dist.positive.mean}, {"negative_mean", dist.negative.mean}}.dump() << '\n';
      return 0;
    }

    if (*sweep) {
      const auto paths = sw_data.paths();
      if (!sw_eval_triplets.empty()) require_file(sw_eval_triplets, "evaluation triplets");
      const auto data = load_bundle(paths);
      const auto records = load_triplets(paths.triplets);
      const auto eval_records = sw_eval_triplets.empty() ? records : load_triplets(sw_eval_triplets);
      TrainConfig base;
      base.fusion.embed_dim = data.dim();
      sw_model.apply(base.fusion);
      if (sw_model.mode) base.mode = parse_fusion_mode(*sw_model.mode);
      sw_flags.apply(base);
      const ojson echo = overrides(sweep);

      ojson summary;
      summary["config"] = to_json(base);
      summary["overrides"] = echo;
      auto runs = ojson::array();
      for (const auto& cap : caps) {
        TrainConfig cfg = base;
        if (cap == "all") {
          cfg.max_triplets.reset();
        } else {
          try {
            cfg.max_triplets = std::stoull(cap);
          } catch (const std::exception&) {
            fail(ErrorKind::kUsage, "bad cap '" + cap + "'");
          }
        }
        const fs::path dir = fs::path(sw_out) / ("cap_" + cap);
        auto run = train_into(dir, data, records, cfg, nullptr, std::nullopt, echo);
        LoadedModel lm{run.checkpoint.model, cfg, fingerprint(dir / "checkpoint.fgck")};
        EvalConfig ec;
        ec.mode = cfg.mode;
        ec.checkpoint_id = lm.id;
        ec.config_echo = model_echo(lm, cfg.mode, sweep);
        const auto report = eval_into(dir, eval_records, lm, data, ec, false);
        runs.push_back({{"cap", cap},
                        {"records_used", run.log.records_used},
                        {"macro_mAP@100", report.macro_map100 ? ojson(*report.macro_map100) : ojson(nullptr)},
                        {"overall", to_json(report)["overall"]}});
        out << cap << '\t' << run.log.records_used << '\t'
            << (report.macro_map100 ? fmt_double(*report.macro_map100, 6) : "--") << '\n';
      }
      summary["runs"] = runs;
      write_json(fs::path(sw_out) / "sweep.json", summary);
      return 0;
    }
  } catch (const Error& e) {
    err << ojson{{"error", to_string(e.kind())}, {"message", e.what()}}.dump() << '\n';
    return e.kind() == ErrorKind::kUsage ? 2 : 1;
  } catch (const std::exception& e) {
    err << ojson{{"error", "internal"}, {"message", e.what()}}.dump() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace figrot
