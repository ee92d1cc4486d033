#include "deemd/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include "deemd/common.hpp"
#include "deemd/efficacy.hpp"
#include "deemd/infmap.hpp"
#include "deemd/parallel.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace deemd {

// ---------------------------------------------------------------- config

void RunConfig::validate() const {
  auto bad = [](const std::string& why) { fail(ErrorKind::InvalidConfig, why); };
  auto unit_open = [](double v) { return v > 0.0 && v < 1.0; };
  if (!unit_open(train.eta)) bad("eta must lie in (0,1)");
  if (!unit_open(zeta)) bad("zeta must lie in (0,1)");
  if (!unit_open(confidence)) bad("confidence must lie in (0,1)");
  if (!unit_open(alpha)) bad("alpha must lie in (0,1)");
  if (!(sigma >= 0.0)) bad("sigma must be >= 0");
  if (train.k < 1) bad("k must be >= 1");
  if (train.epochs < 0) bad("epochs must be >= 0");
  if (train.batch_size < 1) bad("batch_size must be >= 1");
  if (!(train.peak_lr > 0.0)) bad("learning rate must be positive");
  if (grid.patch_size < 1 || grid.stride < 1 || grid.stride > grid.patch_size)
    bad("grid needs 1 <= stride <= patch_size");
  if (jobs < 1) bad("jobs must be >= 1");
  if (!synth && manifest.empty()) bad("either a manifest path or a synth section is required");
  if (synth) deemd::validate(*synth);
}

json to_json(const SynthConfig& s) {
  json treatments = json::array();
  for (const auto& t : s.treatments)
    treatments.push_back({{"name", t.name}, {"concentrations", t.concentrations}, {"effectiveness", t.effectiveness}});
  return {{"image_size", s.image_size},
          {"channels", s.channels},
          {"moi", s.moi},
          {"min_cells", s.min_cells},
          {"max_cells", s.max_cells},
          {"min_cell_spacing", s.min_cell_spacing},
          {"background", s.background},
          {"noise", s.noise},
          {"nucleus_radius", s.nucleus_radius},
          {"nucleus_intensity", s.nucleus_intensity},
          {"cell_radius", s.cell_radius},
          {"cytoplasm_intensity", s.cytoplasm_intensity},
          {"cpe_radius", s.cpe_radius},
          {"cpe_intensity", s.cpe_intensity},
          {"speckle_probability", s.speckle_probability},
          {"speckle_intensity", s.speckle_intensity},
          {"cell_loss", s.cell_loss},
          {"attenuate_treated_cpe", s.attenuate_treated_cpe},
          {"mock_samples", s.mock_samples},
          {"uv_samples", s.uv_samples},
          {"infected_samples", s.infected_samples},
          {"sites_per_well", s.sites_per_well},
          {"treatments", treatments},
          {"replicates", s.replicates},
          {"planted_threshold", s.planted_threshold},
          {"grid", {{"patch_size", s.grid.patch_size}, {"stride", s.grid.stride}}},
          {"seed", s.seed}};
}

json to_json(const RunConfig& c) {
  json j = {
      {"output_dir", c.output_dir.string()},
      {"manifest", c.manifest.string()},
      {"merge_controls", c.merge_controls},
      {"split", {{"train", c.fractions.train}, {"validation", c.fractions.validation},
                 {"untreated_test", c.fractions.untreated_test}}},
      {"grid", {{"patch_size", c.grid.patch_size}, {"stride", c.grid.stride}}},
      {"model", {{"conv_channels", c.conv_channels}}},
      {"train", {{"k", c.train.k}, {"epochs", c.train.epochs}, {"batch_size", c.train.batch_size},
                 {"lr", c.train.peak_lr}, {"beta1", c.train.beta1}, {"beta2", c.train.beta2},
                 {"warmup_fraction", c.train.warmup_fraction},
                 {"floor_divisor", c.train.floor_divisor}, {"patience", c.train.patience},
                 {"class_weights", c.class_weights}}},
      {"eta", c.train.eta},
      {"zeta", c.zeta},
      {"confidence", c.confidence},
      {"alpha", c.alpha},
      {"sigma", c.sigma},
      {"nuclei", {{"min_area", c.nuclei.min_area}, {"peak_radius", c.nuclei.peak_radius},
                  {"histogram_bins", c.nuclei.histogram_bins}, {"exclude_empty", c.exclude_empty}}},
      {"maps", {{"samples", c.map_samples}}},
      {"candidate_k", c.candidate_k},
      {"seed", c.seed},
      {"jobs", c.jobs},
  };
  if (c.synth) j["synth"] = to_json(*c.synth);
  return j;
}

namespace {

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

fs::path resolve_path(const fs::path& p, const fs::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

}  // namespace

SynthConfig synth_config_from_json(const json& j) {
  SynthConfig s;
  try {
    read(j, "image_size", s.image_size);
    read(j, "channels", s.channels);
    read(j, "moi", s.moi);
    read(j, "min_cells", s.min_cells);
    read(j, "max_cells", s.max_cells);
    read(j, "min_cell_spacing", s.min_cell_spacing);
    read(j, "background", s.background);
    read(j, "noise", s.noise);
    read(j, "nucleus_radius", s.nucleus_radius);
    read(j, "nucleus_intensity", s.nucleus_intensity);
    read(j, "cell_radius", s.cell_radius);
    read(j, "cytoplasm_intensity", s.cytoplasm_intensity);
    read(j, "cpe_radius", s.cpe_radius);
    read(j, "cpe_intensity", s.cpe_intensity);
    read(j, "speckle_probability", s.speckle_probability);
    read(j, "speckle_intensity", s.speckle_intensity);
    read(j, "cell_loss", s.cell_loss);
    read(j, "attenuate_treated_cpe", s.attenuate_treated_cpe);
    read(j, "mock_samples", s.mock_samples);
    read(j, "uv_samples", s.uv_samples);
    read(j, "infected_samples", s.infected_samples);
    read(j, "sites_per_well", s.sites_per_well);
    read(j, "replicates", s.replicates);
    read(j, "planted_threshold", s.planted_threshold);
    read(j, "seed", s.seed);
    if (j.contains("grid")) {
      read(j.at("grid"), "patch_size", s.grid.patch_size);
      read(j.at("grid"), "stride", s.grid.stride);
    }
    if (j.contains("treatments")) {
      for (const auto& t : j.at("treatments")) {
        TreatmentPlan plan;
        plan.name = t.at("name").get<std::string>();
        plan.concentrations = t.at("concentrations").get<std::vector<double>>();
        plan.effectiveness = t.at("effectiveness").get<std::vector<double>>();
        s.treatments.push_back(std::move(plan));
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::InvalidConfig, std::string("synth section: ") + e.what());
  }
  return s;
}

RunConfig run_config_from_json(const json& j, const fs::path& base) {
  RunConfig c;
  try {
    if (j.contains("output_dir")) c.output_dir = resolve_path(j.at("output_dir").get<std::string>(), base);
    if (j.contains("manifest")) c.manifest = resolve_path(j.at("manifest").get<std::string>(), base);
    if (j.contains("cache_dir")) c.cache_dir = resolve_path(j.at("cache_dir").get<std::string>(), base);
    read(j, "merge_controls", c.merge_controls);
    if (j.contains("split")) {
      const auto& s = j.at("split");
      read(s, "train", c.fractions.train);
      read(s, "validation", c.fractions.validation);
      read(s, "untreated_test", c.fractions.untreated_test);
    }
    if (j.contains("grid")) {
      read(j.at("grid"), "patch_size", c.grid.patch_size);
      read(j.at("grid"), "stride", c.grid.stride);
    }
    if (j.contains("model")) read(j.at("model"), "conv_channels", c.conv_channels);
    if (j.contains("train")) {
      const auto& t = j.at("train");
      read(t, "k", c.train.k);
      read(t, "epochs", c.train.epochs);
      read(t, "batch_size", c.train.batch_size);
      read(t, "lr", c.train.peak_lr);
      read(t, "beta1", c.train.beta1);
      read(t, "beta2", c.train.beta2);
      read(t, "warmup_fraction", c.train.warmup_fraction);
      read(t, "floor_divisor", c.train.floor_divisor);
      read(t, "patience", c.train.patience);
      read(t, "class_weights", c.class_weights);
    }
    read(j, "eta", c.train.eta);
    read(j, "zeta", c.zeta);
    read(j, "confidence", c.confidence);
    read(j, "alpha", c.alpha);
    read(j, "sigma", c.sigma);
    if (j.contains("nuclei")) {
      const auto& n = j.at("nuclei");
      read(n, "min_area", c.nuclei.min_area);
      read(n, "peak_radius", c.nuclei.peak_radius);
      read(n, "histogram_bins", c.nuclei.histogram_bins);
      read(n, "exclude_empty", c.exclude_empty);
    }
    if (j.contains("maps")) read(j.at("maps"), "samples", c.map_samples);
    read(j, "candidate_k", c.candidate_k);
    read(j, "seed", c.seed);
    read(j, "jobs", c.jobs);
    if (j.contains("synth")) c.synth = synth_config_from_json(j.at("synth"));
  } catch (const json::exception& e) {
    fail(ErrorKind::InvalidConfig, e.what());
  }
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IoError, "cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail(ErrorKind::InvalidConfig, path.string() + ": " + e.what());
  }
  return run_config_from_json(j, fs::absolute(path).parent_path());
}

// ---------------------------------------------------------------- hashing

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) { EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr); }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::string_view bytes) { EVP_DigestUpdate(ctx_, bytes.data(), bytes.size()); }
  std::string hex() {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, digest, &len);
    std::ostringstream s;
    for (unsigned int i = 0; i < len; ++i) s << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return s.str();
  }

 private:
  EVP_MD_CTX* ctx_;
};

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  Sha256 h;
  h.update(bytes);
  return h.hex();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::IoError, "cannot read " + path.string());
  Sha256 h;
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    h.update(std::string_view(buf.data(), static_cast<std::size_t>(in.gcount())));
  }
  return h.hex();
}

// ---------------------------------------------------------------- stages

std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::Synth: return "synth";
    case Stage::Preprocess: return "preprocess";
    case Stage::Train: return "train";
    case Stage::Eval: return "eval";
    case Stage::Map: return "map";
    case Stage::Score: return "score";
  }
  return "?";
}

int exit_code(Stage stage) {
  switch (stage) {
    case Stage::Synth: return 3;
    case Stage::Preprocess: return 4;
    case Stage::Train: return 5;
    case Stage::Eval: return 6;
    case Stage::Map: return 7;
    case Stage::Score: return 8;
  }
  return 1;
}

std::vector<Bag> build_bags(const Manifest& manifest, std::span<const SampleRecord* const> records,
                            const ChannelStats& stats, int jobs) {
  std::vector<Bag> bags(records.size());
  parallel_for(records.size(), jobs, [&](std::size_t i) {
    const SampleRecord& r = *records[i];
    const auto paths = manifest.resolved_paths(r);
    bags[i].sample_id = r.sample_id;
    bags[i].image = normalize(load_image(paths), stats);
    const auto label = manifest.label(r);
    bags[i].label = label ? static_cast<int>(*label) : 1;
  });
  return bags;
}

void save_channel_stats(const ChannelStats& stats, const fs::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
  out << json{{"mean", stats.mean}, {"std", stats.stddev}}.dump(1) << '\n';
}

ChannelStats load_channel_stats(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IoError, "cannot read " + path.string());
  json j;
  in >> j;
  ChannelStats s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.stddev = j.at("std").get<std::vector<double>>();
  return s;
}

void emit_map_overlays(const Checkpoint& checkpoint, const Manifest& manifest,
                       std::span<const SampleRecord* const> samples, const ChannelStats& stats,
                       const RunConfig& cfg, const fs::path& out_dir) {
  const auto& arch = checkpoint.model.architecture();
  if (arch.in_channels != manifest.channel_count || arch.in_channels != stats.channels())
    fail(ErrorKind::CheckpointMismatch,
         "checkpoint expects " + std::to_string(arch.in_channels) + " channels, data has " +
             std::to_string(manifest.channel_count));
  if (arch.patch_size != cfg.grid.patch_size)
    fail(ErrorKind::CheckpointMismatch, "checkpoint patch size " + std::to_string(arch.patch_size) +
                                            " differs from grid patch size " +
                                            std::to_string(cfg.grid.patch_size));
  fs::create_directories(out_dir);
  parallel_for(samples.size(), cfg.jobs, [&](std::size_t i) {
    const SampleRecord& r = *samples[i];
    const Image raw = load_image(manifest.resolved_paths(r));
    const Bag bag{r.sample_id, normalize(raw, stats), 0};
    const auto scores = score_bag(checkpoint.model, bag, cfg.grid, cfg.train.k);
    const auto map = build_infection_map(scores, cfg.grid, raw.height(), raw.width(), cfg.alpha, cfg.sigma);
    write_map_png(map, out_dir / (r.sample_id + "_map.png"));
    for (int c = 0; c < raw.channels(); ++c)
      write_overlay_png(raw, c, map, out_dir / (r.sample_id + "_ch" + std::to_string(c + 1) + "_overlay.png"));
  });
}

Pipeline::Pipeline(RunConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  if (!cfg_.cache_dir.empty()) {
    cache_dir_ = cfg_.cache_dir;
  } else if (const char* env = std::getenv("DEEMD_CACHE_DIR"); env && *env) {
    cache_dir_ = env;
  } else {
    cache_dir_ = cfg_.output_dir / ".cache";
  }
}

fs::path Pipeline::stage_dir(Stage stage) const {
  if (stage == Stage::Score) return cfg_.output_dir;
  if (stage == Stage::Map) return cfg_.output_dir / "maps";
  return cfg_.output_dir / std::string(to_string(stage));
}

fs::path Pipeline::source_manifest() const {
  return cfg_.synth ? stage_dir(Stage::Synth) / "manifest.csv" : cfg_.manifest;
}

std::string Pipeline::upstream_key(Stage stage) {
  for (auto it = history_.rbegin(); it != history_.rend(); ++it)
    if (it->stage == stage) return it->key;
  fail(ErrorKind::InvalidConfig, "stage " + std::string(to_string(stage)) + " has not run");
}

template <typename Fn>
StageResult Pipeline::run_stage(Stage stage, const json& config_subset,
                                const std::vector<std::string>& upstream, Fn&& body) {
  for (const auto& h : history_)
    if (h.stage == stage) return h;

  std::string material = std::string(to_string(stage)) + "\n" + config_subset.dump() + "\n";
  for (const auto& u : upstream) material += u + "\n";
  StageResult result{stage, false, sha256_hex(material)};

  const fs::path record_path = cache_dir_ / (std::string(to_string(stage)) + ".json");
  if (fs::exists(record_path)) {
    try {
      std::ifstream in(record_path);
      json record;
      in >> record;
      bool valid = record.at("key") == result.key;
      for (const auto& [rel, hash] : record.at("outputs").items()) {
        if (!valid) break;
        const fs::path p = cfg_.output_dir / rel;
        valid = fs::exists(p) && sha256_file(p) == hash.template get<std::string>();
      }
      result.cache_hit = valid;
    } catch (const std::exception&) {
      result.cache_hit = false;
    }
  }
  if (result.cache_hit) {
    spdlog::info("[{}] cache hit ({})", to_string(stage), result.key.substr(0, 12));
    history_.push_back(result);
    return result;
  }

  spdlog::info("[{}] running", to_string(stage));
  std::vector<fs::path> outputs;
  try {
    outputs = body(result.key);
  } catch (const StageFailure&) {
    throw;
  } catch (const std::exception& e) {
    throw StageFailure(stage, e.what());
  }
  json record = {{"key", result.key}, {"outputs", json::object()}};
  for (const auto& p : outputs)
    record["outputs"][fs::relative(p, cfg_.output_dir).generic_string()] = sha256_file(p);
  fs::create_directories(cache_dir_);
  std::ofstream(record_path) << record.dump(1) << '\n';
  history_.push_back(result);
  return result;
}

StageResult Pipeline::synth() {
  if (!cfg_.synth) fail(ErrorKind::InvalidConfig, "no synth section in the configuration");
  return run_stage(Stage::Synth, to_json(*cfg_.synth), {}, [&](const std::string&) {
    const fs::path dir = stage_dir(Stage::Synth);
    if (fs::exists(dir / "images")) fs::remove_all(dir / "images");
    const auto screen = generate_screen(*cfg_.synth, dir, cfg_.jobs);
    std::vector<fs::path> outputs = {dir / "manifest.csv", dir / "ground_truth.csv",
                                     dir / "samples_truth.csv", dir / "planted.csv"};
    for (const auto& r : screen.manifest.records)
      for (const auto& p : r.image_paths) outputs.push_back(dir / p);
    return outputs;
  });
}

StageResult Pipeline::preprocess() {
  std::vector<std::string> upstream;
  if (cfg_.synth) upstream.push_back(synth().key);

  // Input data identity: manifest bytes plus every referenced image.
  const fs::path src = source_manifest();
  std::string data_hash;
  try {
    const Manifest m = load_manifest(src, cfg_.merge_controls);
    std::string material = sha256_file(src);
    for (const auto& r : m.records)
      for (const auto& p : m.resolved_paths(r)) material += sha256_file(p);
    data_hash = sha256_hex(material);
  } catch (const std::exception& e) {
    throw StageFailure(Stage::Preprocess, e.what());
  }
  upstream.push_back(data_hash);

  const json subset = {{"merge_controls", cfg_.merge_controls},
                       {"split", to_json(cfg_)["split"]},
                       {"nuclei", to_json(cfg_)["nuclei"]},
                       {"grid", to_json(cfg_)["grid"]},
                       {"seed", cfg_.seed}};
  return run_stage(Stage::Preprocess, subset, upstream, [&](const std::string&) {
    const fs::path dir = stage_dir(Stage::Preprocess);
    fs::create_directories(dir);
    Manifest m = load_manifest(src, cfg_.merge_controls);

    // Nucleus counts per well: 4-site wells are stitched first.
    std::map<std::string, std::vector<std::size_t>> wells;
    std::vector<std::string> well_order;
    for (std::size_t i = 0; i < m.records.size(); ++i) {
      const std::string key = m.records[i].plate + "|" + m.records[i].well;
      if (!wells.count(key)) well_order.push_back(key);
      wells[key].push_back(i);
    }
    std::vector<NucleusCountResult> per_record(m.records.size());
    std::vector<std::pair<int, int>> dims(m.records.size());
    parallel_for(well_order.size(), cfg_.jobs, [&](std::size_t w) {
      auto idx = wells.at(well_order[w]);
      std::vector<Image> dna;
      for (auto i : idx) {
        const fs::path p = m.resolve(m.records[i].image_paths.at(0));
        dna.push_back(load_image(std::span<const fs::path>(&p, 1)));
        dims[i] = {dna.back().height(), dna.back().width()};
      }
      std::set<int> sites;
      for (auto i : idx) sites.insert(m.records[i].site);
      if (idx.size() == 4 && sites == std::set<int>{1, 2, 3, 4}) {
        std::vector<std::size_t> order(4);
        for (std::size_t q = 0; q < 4; ++q) order[m.records[idx[q]].site - 1] = q;
        std::vector<Image> ordered;
        for (auto q : order) ordered.push_back(dna[q]);
        const auto count = count_nuclei(stitch_sites(ordered), cfg_.nuclei);
        for (auto i : idx) per_record[i] = count;
      } else {
        for (std::size_t q = 0; q < idx.size(); ++q) per_record[idx[q]] = count_nuclei(dna[q], cfg_.nuclei);
      }
    });
    std::map<std::string, NucleusCountResult> counts;
    for (std::size_t i = 0; i < m.records.size(); ++i) {
      cfg_.grid.validate(dims[i].first, dims[i].second);
      counts[m.records[i].sample_id] = per_record[i];
    }
    write_counts_csv(counts, dir / "counts.csv");

    if (cfg_.exclude_empty) m = filter_empty_samples(m, counts);
    Manifest split = split_dataset(m, cfg_.seed, cfg_.fractions);
    for (auto& r : split.records) r.image_paths = split.resolved_paths(r);
    split.root = dir;

    ChannelStatsAccumulator acc;
    for (const auto* r : split.in_split(Split::Train)) acc.add(load_image(r->image_paths));
    save_channel_stats(acc.finish(), dir / "channel_stats.json");
    write_manifest(split, dir / "manifest.csv");
    std::ofstream(dir / "dataset.json") << json{{"dataset_hash", data_hash}}.dump(1) << '\n';
    return std::vector<fs::path>{dir / "manifest.csv", dir / "counts.csv",
                                 dir / "channel_stats.json", dir / "dataset.json"};
  });
}

namespace {

json train_subset(const RunConfig& c) {
  json t = to_json(c)["train"];
  t["seed"] = c.seed;
  t["eta"] = c.train.eta;
  t["grid"] = to_json(c)["grid"];
  t["model"] = to_json(c)["model"];
  return t;
}

}  // namespace

StageResult Pipeline::train() {
  const std::string pre = preprocess().key;
  return run_stage(Stage::Train, train_subset(cfg_), {pre}, [&](const std::string& key) {
    const fs::path dir = stage_dir(Stage::Train);
    fs::create_directories(dir);
    const fs::path pre_dir = stage_dir(Stage::Preprocess);
    const Manifest m = load_manifest(pre_dir / "manifest.csv", cfg_.merge_controls);
    const ChannelStats stats = load_channel_stats(pre_dir / "channel_stats.json");
    const auto train_recs = m.in_split(Split::Train);
    const auto val_recs = m.in_split(Split::Validation);
    const auto train_bags = build_bags(m, train_recs, stats, cfg_.jobs);
    const auto val_bags = build_bags(m, val_recs, stats, cfg_.jobs);

    Architecture arch;
    arch.in_channels = m.channel_count;
    arch.patch_size = cfg_.grid.patch_size;
    arch.conv_channels = cfg_.conv_channels;
    const ScorerModel init(arch, cfg_.seed + 1);

    std::size_t pos = 0;
    for (const auto& b : train_bags) pos += b.label == 1 ? 1 : 0;
    const LossConfig loss = cfg_.class_weights ? class_balanced_weights(pos, train_bags.size() - pos)
                                               : LossConfig{};
    TrainConfig tc = cfg_.train;
    tc.seed = cfg_.seed + 2;
    tc.jobs = cfg_.jobs;
    const auto result = deemd::train(train_bags, val_bags, cfg_.grid, init, tc, loss,
                                     [](const EpochLog& e) {
                                       spdlog::info("[train] epoch {:3d} loss {:.5f} val_ap {:.4f} lr {:.3g}",
                                                    e.epoch, e.train_loss, e.val_ap, e.lr);
                                     });
    save_checkpoint(result.model, dir / "checkpoint.json", key);
    write_training_log(result.log, dir / "training_log.csv");
    std::ofstream(dir / "summary.json")
        << json{{"best_epoch", result.best_epoch},
                {"best_val_ap", std::isnan(result.best_val_ap) ? json(nullptr) : json(result.best_val_ap)},
                {"stopped_early", result.stopped_early},
                {"epochs_run", result.log.size()},
                {"w_plus", loss.w_plus},
                {"w_minus", loss.w_minus}}
               .dump(1)
        << '\n';
    return std::vector<fs::path>{dir / "checkpoint.json", dir / "training_log.csv", dir / "summary.json"};
  });
}

StageResult Pipeline::eval() {
  const std::string pre = preprocess().key;
  const std::string tr = train().key;
  json subset = {{"k", cfg_.train.k}, {"eta", cfg_.train.eta}, {"alpha", cfg_.alpha},
                 {"sigma", cfg_.sigma}, {"candidate_k", cfg_.candidate_k}};
  if (cfg_.synth) subset["moi"] = cfg_.synth->moi;
  return run_stage(Stage::Eval, subset, {pre, tr}, [&](const std::string&) {
    const fs::path dir = stage_dir(Stage::Eval);
    fs::create_directories(dir);
    const fs::path pre_dir = stage_dir(Stage::Preprocess);
    const Manifest m = load_manifest(pre_dir / "manifest.csv", cfg_.merge_controls);
    const ChannelStats stats = load_channel_stats(pre_dir / "channel_stats.json");
    const Checkpoint ckpt = load_checkpoint(stage_dir(Stage::Train) / "checkpoint.json");
    const std::size_t k = cfg_.train.k;

    json metrics;
    auto evaluate_split = [&](Split split, const char* name) -> std::vector<Bag> {
      auto bags = build_bags(m, m.in_split(split), stats, cfg_.jobs);
      if (bags.empty()) return bags;
      const auto sets = score_bags(ckpt.model, bags, cfg_.grid, k, cfg_.jobs);
      std::vector<double> scores;
      std::vector<int> labels;
      std::size_t correct = 0;
      for (std::size_t i = 0; i < bags.size(); ++i) {
        scores.push_back(sets[i].bag_score());
        labels.push_back(bags[i].label);
        correct += predict_bag(sets[i], cfg_.train.eta) == bags[i].label ? 1 : 0;
      }
      json entry = {{"samples", bags.size()},
                    {"accuracy", static_cast<double>(correct) / static_cast<double>(bags.size())}};
      try {
        const auto ap = evaluate_ap(scores, labels);
        entry["average_precision"] = ap.value;
        std::ofstream pr(dir / (std::string("pr_curve_") + name + ".csv"));
        pr << "threshold,precision,recall\n" << std::setprecision(10);
        for (const auto& p : ap.curve) pr << p.threshold << ',' << p.precision << ',' << p.recall << '\n';
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::DegenerateLabels) throw;
        entry["average_precision"] = nullptr;
      }
      if (cfg_.synth) {
        const auto truth = load_ground_truth(stage_dir(Stage::Synth));
        std::vector<double> mus;
        std::vector<int> instance_labels;
        for (std::size_t i = 0; i < bags.size(); ++i) {
          const auto& t = truth.samples.at(bags[i].sample_id);
          for (std::size_t j = 0; j < sets[i].scores.size(); ++j) {
            mus.push_back(sets[i].scores[j]);
            instance_labels.push_back(t.patch_labels.at(j));
          }
        }
        try {
          entry["instance_auc"] = roc_auc(mus, instance_labels);
        } catch (const Error&) {
          entry["instance_auc"] = nullptr;
        }
      }
      metrics[name] = entry;
      return bags;
    };
    const auto val_bags = evaluate_split(Split::Validation, "validation");
    evaluate_split(Split::UntreatedTest, "untreated_test");

    std::vector<fs::path> outputs = {dir / "metrics.json"};
    if (!cfg_.candidate_k.empty()) {
      const Manifest& mm = m;
      const auto train_bags = build_bags(mm, mm.in_split(Split::Train), stats, cfg_.jobs);
      std::size_t pos = 0;
      for (const auto& b : train_bags) pos += b.label == 1 ? 1 : 0;
      const LossConfig loss = cfg_.class_weights ? class_balanced_weights(pos, train_bags.size() - pos)
                                                 : LossConfig{};
      std::vector<ScorerModel> models;
      models.reserve(cfg_.candidate_k.size());
      for (std::size_t ck : cfg_.candidate_k) {
        TrainConfig tc = cfg_.train;
        tc.k = ck;
        tc.seed = cfg_.seed + 2;
        tc.jobs = cfg_.jobs;
        models.push_back(deemd::train(train_bags, val_bags, cfg_.grid,
                                      ScorerModel(ckpt.model.architecture(), cfg_.seed + 1), tc, loss)
                             .model);
      }
      std::vector<KCandidate> cands;
      for (std::size_t i = 0; i < models.size(); ++i) cands.push_back({cfg_.candidate_k[i], &models[i]});
      KReportOptions opts;
      opts.moi = cfg_.synth ? cfg_.synth->moi : 0.4;
      opts.eta = cfg_.train.eta;
      opts.alpha = cfg_.alpha;
      opts.sigma = cfg_.sigma;
      opts.jobs = cfg_.jobs;
      const auto rows = candidate_k_report(cands, val_bags, cfg_.grid, opts);
      std::ofstream out(dir / "k_report.csv");
      out << "k,mean_infected_fraction,average_precision,distance,flagged\n" << std::setprecision(10);
      for (const auto& r : rows)
        out << r.k << ',' << r.mean_infected_fraction << ',' << r.average_precision << ','
            << r.distance << ',' << (r.flagged ? 1 : 0) << '\n';
      outputs.push_back(dir / "k_report.csv");
    }
    std::ofstream(dir / "metrics.json") << metrics.dump(1) << '\n';
    return outputs;
  });
}

StageResult Pipeline::map() {
  const std::string pre = preprocess().key;
  const std::string tr = train().key;
  const json subset = {{"k", cfg_.train.k}, {"alpha", cfg_.alpha}, {"sigma", cfg_.sigma},
                       {"samples", cfg_.map_samples}};
  return run_stage(Stage::Map, subset, {pre, tr}, [&](const std::string&) {
    const fs::path dir = stage_dir(Stage::Map);
    if (fs::exists(dir)) fs::remove_all(dir);
    fs::create_directories(dir);
    const fs::path pre_dir = stage_dir(Stage::Preprocess);
    const Manifest m = load_manifest(pre_dir / "manifest.csv", cfg_.merge_controls);
    const ChannelStats stats = load_channel_stats(pre_dir / "channel_stats.json");
    const Checkpoint ckpt = load_checkpoint(stage_dir(Stage::Train) / "checkpoint.json");
    auto samples = m.in_split(Split::UntreatedTest);
    if (samples.size() > static_cast<std::size_t>(std::max(0, cfg_.map_samples)))
      samples.resize(static_cast<std::size_t>(std::max(0, cfg_.map_samples)));
    emit_map_overlays(ckpt, m, samples, stats, cfg_, dir);
    std::vector<fs::path> outputs;
    for (const auto& entry : fs::directory_iterator(dir)) outputs.push_back(entry.path());
    std::sort(outputs.begin(), outputs.end());
    return outputs;
  });
}

StageResult Pipeline::score() {
  const std::string pre = preprocess().key;
  const std::string tr = train().key;
  const json subset = {{"k", cfg_.train.k}, {"zeta", cfg_.zeta}, {"confidence", cfg_.confidence}};
  return run_stage(Stage::Score, subset, {pre, tr}, [&](const std::string&) {
    const fs::path dir = stage_dir(Stage::Score);
    fs::create_directories(dir / "score");
    const fs::path pre_dir = stage_dir(Stage::Preprocess);
    const Manifest m = load_manifest(pre_dir / "manifest.csv", cfg_.merge_controls);
    const ChannelStats stats = load_channel_stats(pre_dir / "channel_stats.json");
    const Checkpoint ckpt = load_checkpoint(stage_dir(Stage::Train) / "checkpoint.json");
    const auto treated = m.in_split(Split::TreatedTest);
    const auto bags = build_bags(m, treated, stats, cfg_.jobs);
    const auto sets = score_bags(ckpt.model, bags, cfg_.grid, cfg_.train.k, cfg_.jobs);

    std::map<std::pair<std::string, double>, std::vector<double>> groups;
    std::ofstream zs(dir / "score" / "z_scores.csv");
    zs << "sample_id,treatment,concentration,z\n" << std::setprecision(10);
    for (std::size_t i = 0; i < treated.size(); ++i) {
      const double z = sample_infection_probability(sets[i]);
      groups[{*treated[i]->treatment, *treated[i]->concentration}].push_back(z);
      zs << treated[i]->sample_id << ',' << *treated[i]->treatment << ','
         << *treated[i]->concentration << ',' << z << '\n';
    }
    zs.close();

    std::vector<DoseGroup> doses;
    std::map<std::string, std::map<double, double>> per_treatment;
    for (auto& [key, z] : groups) {
      doses.push_back(evaluate_dose_group(key.first, key.second, z, cfg_.confidence));
      per_treatment[key.first][key.second] = doses.back().efficacy;
    }
    write_doses_csv(doses, dir / "doses.csv");

    std::vector<TreatmentScore> scores;
    std::ofstream trends(dir / "score" / "trends.csv");
    trends << "treatment,midpoint_log10_um,slope,rmse\n" << std::setprecision(10);
    for (const auto& [name, dose_scores] : per_treatment) {
      scores.push_back(treatment_efficacy(name, dose_scores, cfg_.zeta));
      std::vector<double> x, y;
      for (const auto& [c, e] : dose_scores) {
        x.push_back(std::log10(c));
        y.push_back(e);
      }
      try {
        const auto fit = fit_logistic(x, y);
        trends << name << ',' << fit.midpoint << ',' << fit.slope << ',' << fit.rmse << '\n';
      } catch (const Error&) {
        trends << name << ",nan,nan,nan\n";
      }
    }
    trends.close();
    const Ranking ranking = rank_treatments(std::move(scores));
    write_treatments_csv(ranking, dir / "treatments.csv");
    return std::vector<fs::path>{dir / "doses.csv", dir / "treatments.csv",
                                 dir / "score" / "z_scores.csv", dir / "score" / "trends.csv"};
  });
}

void Pipeline::write_report() const {
  const fs::path out = cfg_.output_dir;
  json report;
  report["config"] = to_json(cfg_);
  report["thresholds"] = {{"k", cfg_.train.k},         {"eta", cfg_.train.eta},
                          {"zeta", cfg_.zeta},         {"confidence", cfg_.confidence},
                          {"alpha", cfg_.alpha},       {"sigma", cfg_.sigma}};
  json stages = json::array();
  for (const auto& h : history_)
    stages.push_back({{"stage", to_string(h.stage)}, {"cache_hit", h.cache_hit}, {"key", h.key}});
  report["stages"] = stages;
  auto read_json = [](const fs::path& p) -> json {
    std::ifstream in(p);
    if (!in) return nullptr;
    json j;
    in >> j;
    return j;
  };
  const json dataset = read_json(stage_dir(Stage::Preprocess) / "dataset.json");
  report["dataset_hash"] = dataset.is_null() ? json(nullptr) : dataset.at("dataset_hash");
  report["metrics"] = read_json(stage_dir(Stage::Eval) / "metrics.json");
  json effective = json::array();
  if (std::ifstream t(out / "treatments.csv"); t) {
    std::string line;
    std::getline(t, line);
    while (std::getline(t, line)) {
      std::vector<std::string> cells;
      std::istringstream row(line);
      for (std::string cell; std::getline(row, cell, ',');) cells.push_back(cell);
      if (cells.size() == 4 && cells[2] == "1") effective.push_back(cells[0]);
    }
  }
  report["effective_set"] = effective;
  std::ofstream(out / "report.json") << report.dump(1) << '\n';
}

void Pipeline::screen() {
  if (cfg_.synth) synth();
  preprocess();
  train();
  eval();
  map();
  score();
  write_report();
}

}  // namespace deemd
