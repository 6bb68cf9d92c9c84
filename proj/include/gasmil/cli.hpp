/*
 * Copyright 2026 The gasmil Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Command-line front end. dispatch() never exits the process; it returns
//   0 on success, 1 on a domain error (bad config or data), 2 on bad usage.
// Results go to `out`, diagnostics to `err`.

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gasmil/bagio.hpp"
#include "gasmil/checkpoint.hpp"
#include "gasmil/metrics.hpp"
#include "gasmil/preprocess.hpp"
#include "gasmil/training.hpp"
#include "json.hpp"

namespace gasmil::cli {

/// Defaults < --config file < explicit flags.
struct RunConfig {
  ModelSpec model;
  TrainConfig train;
  SplitSpec split;
  /// Instances per bag after sampling/padding; 0 keeps bags as stored.
  std::size_t instances = 200;
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

template <class T>
std::vector<T> parse_numbers(const std::string& s, const char* what) {
  std::vector<T> out;
  for (const auto& item : split_list(s, ',')) {
    try {
      std::size_t used = 0;
      if constexpr (std::is_floating_point_v<T>) out.push_back(static_cast<T>(std::stod(item, &used)));
      else out.push_back(static_cast<T>(std::stoll(item, &used)));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ParameterError(std::string("cannot parse ") + what + " entry '" + item + "'");
    }
  }
  return out;
}

/// FNV-1a, used to give each bag a stable sampling seed.
inline std::uint64_t hash_id(const std::string& id) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : id) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline void apply_config_file(RunConfig& rc, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParameterError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError("malformed config " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw ParameterError("config must be a JSON object");
  auto& m = rc.model.config;
  auto& t = rc.train;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "arch") rc.model.arch = parse_arch_kind(value.get<std::string>());
      else if (key == "gfeb") m.gfeb_kind = parse_gfeb_kind(value.get<std::string>());
      else if (key == "loss") t.loss = m.loss = parse_loss_kind(value.get<std::string>());
      else if (key == "s") m.selection_count = value.get<std::size_t>();
      else if (key == "mlp_hidden") m.mlp_hidden = value.get<std::size_t>();
      else if (key == "attn_feature_dim") m.attn_feature_dim = value.get<std::size_t>();
      else if (key == "attn_dim") m.attn_dim = value.get<std::size_t>();
      else if (key == "head_hidden") m.head_hidden = value.get<std::size_t>();
      else if (key == "head_dropout") m.head_dropout = value.get<double>();
      else if (key == "concat_group") m.concat_group = value.get<bool>();
      else if (key == "attention_hidden") rc.model.attention_hidden = value.get<std::size_t>();
      else if (key == "epochs") t.epochs = value.get<std::size_t>();
      else if (key == "batch_size") t.batch_size = value.get<std::size_t>();
      else if (key == "lr") t.lr = value.get<double>();
      else if (key == "weight_decay") t.weight_decay = value.get<double>();
      else if (key == "noise_std") t.noise_std = value.get<double>();
      else if (key == "patience") t.patience = value.get<std::size_t>();
      else if (key == "seed") t.seed = value.get<std::uint64_t>();
      else if (key == "monitor") t.monitor = parse_monitor_metric(value.get<std::string>());
      else if (key == "resample_per_epoch") t.resample_per_epoch = value.get<bool>();
      else if (key == "instances") rc.instances = value.get<std::size_t>();
      else if (key == "split") {
        const auto f = value.get<std::vector<double>>();
        if (f.size() != 3) throw ParameterError("config 'split' needs three fractions");
        rc.split.train = f[0];
        rc.split.val = f[1];
        rc.split.test = f[2];
      } else if (key == "split_seed") rc.split.seed = value.get<std::uint64_t>();
      else throw ParameterError("unknown config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ParameterError("config key '" + key + "': " + e.what());
    }
  }
}

/// Flags shared by train, eval and sweep, bound to optional holders so that
/// only explicitly given flags override the config file.
struct RunFlags {
  std::string config_path;
  std::optional<std::string> arch, gfeb, loss, monitor;
  std::optional<std::size_t> s, epochs, batch_size, patience, instances;
  std::optional<double> lr, weight_decay, noise_std;
  std::optional<std::uint64_t> seed;
  bool resample = false;

  void add_to(CLI::App& app, bool training) {
    app.add_option("--config", config_path, "JSON run configuration");
    app.add_option("--seed", seed, "Random seed");
    app.add_option("--instances", instances, "Instances per bag after sampling/padding (0 keeps bags as stored)");
    if (!training) return;
    app.add_option("--arch", arch, "gasmil|abmil|chowder")->check(CLI::IsMember({"gasmil", "abmil", "chowder"}));
    app.add_option("--gfeb", gfeb, "mlp|attention")->check(CLI::IsMember({"mlp", "attention"}));
    app.add_option("--loss", loss, "ce|bce-ordinal")->check(CLI::IsMember({"ce", "bce-ordinal"}));
    app.add_option("--monitor", monitor, "balanced_accuracy|qwk|weighted_f1|loss");
    app.add_option("--s", s, "Max-Min selection count");
    app.add_option("--epochs", epochs);
    app.add_option("--batch-size", batch_size);
    app.add_option("--lr", lr);
    app.add_option("--weight-decay", weight_decay);
    app.add_option("--noise-std", noise_std);
    app.add_option("--patience", patience);
    app.add_flag("--resample-per-epoch", resample, "Redraw instance subsets every time a bag is sampled");
  }

  RunConfig resolve() const {
    RunConfig rc;
    if (!config_path.empty()) apply_config_file(rc, config_path);
    auto& m = rc.model.config;
    auto& t = rc.train;
    if (arch) rc.model.arch = parse_arch_kind(*arch);
    if (gfeb) m.gfeb_kind = parse_gfeb_kind(*gfeb);
    if (loss) t.loss = m.loss = parse_loss_kind(*loss);
    if (monitor) t.monitor = parse_monitor_metric(*monitor);
    if (s) m.selection_count = *s;
    if (epochs) t.epochs = *epochs;
    if (batch_size) t.batch_size = *batch_size;
    if (lr) t.lr = *lr;
    if (weight_decay) t.weight_decay = *weight_decay;
    if (noise_std) t.noise_std = *noise_std;
    if (patience) t.patience = *patience;
    if (instances) rc.instances = *instances;
    if (seed) t.seed = rc.split.seed = *seed;
    if (resample) t.resample_per_epoch = true;
    if (t.resample_per_epoch) t.instances = rc.instances;
    m.loss = t.loss;
    return rc;
  }
};

/// Manifest with split tags; an entirely unassigned manifest is split with
/// the run's SplitSpec (deterministic, so train and eval agree).
inline Manifest with_splits(const Manifest& manifest, const SplitSpec& spec, std::ostream& err) {
  const bool unassigned = std::all_of(manifest.entries.begin(), manifest.entries.end(),
                                      [](const ManifestEntry& e) { return e.split == SplitTag::kUnassigned; });
  if (!unassigned) return manifest;
  err << "manifest has no split tags; applying stratified split " << spec.train << "/" << spec.val << "/" << spec.test
      << " (seed " << spec.seed << ")\n";
  return stratified_split(manifest, spec);
}

/// Loads one split, fixing each bag to `instances` rows with a seed derived
/// from its id (0 keeps bags as stored).
inline std::vector<FeatureBag> load_split(const Manifest& manifest, const std::filesystem::path& manifest_path,
                                          SplitTag tag, std::size_t instances, std::uint64_t seed, bool fix) {
  const auto entries = manifest.split(tag);
  if (entries.empty()) throw ConfigError("manifest split '" + to_string(tag) + "' is empty");
  auto bags = load_bags(manifest, entries, manifest_path.parent_path());
  if (fix && instances > 0)
    for (auto& bag : bags) {
      RngStream rng(hash_id(bag.bag_id) ^ seed);
      bag = sample_or_pad(bag, instances, rng);
    }
  return bags;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ParameterError("cannot write " + path.string());
  out << text;
}

struct TrainOutcome {
  AnyModel model;
  TrainLog log;
};

inline TrainOutcome train_model(const ModelSpec& spec, const TrainConfig& train_cfg,
                                std::span<const FeatureBag> train, std::span<const FeatureBag> val) {
  RngStream init(train_cfg.seed);
  AnyModel model = make_model(spec, init);
  TrainLog log = std::visit([&](auto& m) { return fit(m, train, val, train_cfg); }, model);
  return {std::move(model), std::move(log)};
}

inline Evaluation evaluate_any(const AnyModel& model, std::span<const FeatureBag> bags) {
  return std::visit([&](const auto& m) { return evaluate_bags(m, bags); }, model);
}

// ---------------------------------------------------------------------------
// Subcommands

inline int run_synth(const std::string& out_dir, const std::string& groups, const std::string& names, std::size_t classes,
                     std::size_t bags, std::size_t instances, std::uint64_t seed, const std::string& plan_text,
                     double shift, bool ordinal, std::ostream& out) {
  GroupLayout layout;
  layout.dims = parse_numbers<std::size_t>(groups, "--groups");
  if (names.empty()) {
    for (std::size_t k = 0; k < layout.dims.size(); ++k) layout.names.push_back("g" + std::to_string(k + 1));
  } else {
    layout.names = split_list(names, ',');
  }
  layout.validate();
  SignalPlan plan;
  if (plan_text.empty()) {
    plan = ordinal ? SignalPlan(layout.num_groups(), std::vector<int>{}) : round_robin_plan(layout.num_groups(), classes);
    if (ordinal)
      for (auto& g : plan)
        for (std::size_t y = 0; y < classes; ++y) g.push_back(static_cast<int>(y));
  } else {
    for (const auto& group : split_list(plan_text, '/')) plan.push_back(parse_numbers<int>(group, "--plan"));
  }
  SynthOptions opt;
  opt.shift = shift;
  opt.ordinal = ordinal;
  RngStream rng(seed);
  const SynthDataset ds = synth_generate(layout, bags, instances, classes, plan, rng, opt);
  write_dataset(out_dir, ds);
  out << nlohmann::json{{"manifest", (std::filesystem::path(out_dir) / "manifest.json").string()},
                        {"bags", ds.bags.size()},
                        {"layout", layout},
                        {"num_classes", classes}}
             .dump()
      << '\n';
  return 0;
}

inline int run_split(const std::string& manifest_path, const std::string& out_path, const std::string& fractions,
                     std::uint64_t seed, std::ostream& out) {
  const Manifest manifest = load_manifest(manifest_path);
  const auto f = parse_numbers<double>(fractions, "--fractions");
  if (f.size() != 3) throw ParameterError("--fractions needs three values: train,val,test");
  const Manifest split = stratified_split(manifest, SplitSpec{f[0], f[1], f[2], seed});
  const std::filesystem::path target = out_path.empty() ? manifest_path : out_path;
  Manifest written = split;
  if (target.parent_path() != std::filesystem::path(manifest_path).parent_path()) {
    // Keep bag paths valid relative to the new manifest location.
    for (auto& e : written.entries) {
      std::filesystem::path p(e.path);
      if (p.is_relative())
        e.path = std::filesystem::absolute(std::filesystem::path(manifest_path).parent_path() / p).string();
    }
  }
  save_manifest(target, written);
  std::size_t counts[4] = {0, 0, 0, 0};
  for (const auto& e : split.entries) ++counts[static_cast<int>(e.split)];
  out << nlohmann::json{{"manifest", target.string()}, {"train", counts[1]}, {"val", counts[2]}, {"test", counts[3]}}
             .dump()
      << '\n';
  return 0;
}

inline int run_preprocess(const std::string& image_path, const std::string& out_dir, std::size_t tile_size,
                          std::size_t scale, double coverage, std::size_t dilation, const std::string& mode,
                          double fixed, std::ostream& out) {
  const RasterImage full = read_ppm(image_path);
  const RasterImage low = downsample(full, scale);
  TissueMaskOptions opt;
  opt.mode = mode == "fixed" ? ThresholdMode::kFixed : ThresholdMode::kOtsu;
  opt.fixed_threshold = fixed;
  opt.dilation_radius = dilation;
  opt.scale_factor = scale;
  const TissueMask mask = tissue_mask(low, opt);
  const TileGrid grid = tile_coords(mask, tile_size, coverage, std::make_pair(full.width, full.height));
  std::filesystem::create_directories(out_dir);
  nlohmann::json index{{"image", image_path},
                       {"width", full.width},
                       {"height", full.height},
                       {"tile_size", tile_size},
                       {"scale_factor", scale},
                       {"coverage_threshold", coverage},
                       {"mask_pixels", mask.count()},
                       {"tiles", nlohmann::json::array()}};
  for (const auto& [x, y] : grid.coords) {
    const std::string file = "tile_" + std::to_string(x) + "_" + std::to_string(y) + ".ppm";
    write_ppm(std::filesystem::path(out_dir) / file, crop(full, x, y, tile_size, tile_size));
    index["tiles"].push_back({{"x", x}, {"y", y}, {"file", file}});
  }
  write_text(std::filesystem::path(out_dir) / "tiles.json", index.dump(2) + "\n");
  out << nlohmann::json{{"tiles", grid.coords.size()}, {"index", (std::filesystem::path(out_dir) / "tiles.json").string()}}
             .dump()
      << '\n';
  return 0;
}

inline int run_train(const std::string& manifest_path, const std::string& out_dir, const RunFlags& flags,
                     std::ostream& out, std::ostream& err) {
  RunConfig rc = flags.resolve();
  const Manifest manifest = with_splits(load_manifest(manifest_path), rc.split, err);
  rc.model.config.layout = manifest.layout;
  rc.model.config.num_classes = manifest.num_classes;
  const bool fix = !rc.train.resample_per_epoch;
  const auto train = load_split(manifest, manifest_path, SplitTag::kTrain, rc.instances, rc.train.seed, fix);
  const auto val = load_split(manifest, manifest_path, SplitTag::kVal, rc.instances, rc.train.seed, true);
  TrainOutcome result = train_model(rc.model, rc.train, train, val);
  const std::filesystem::path dir(out_dir);
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "checkpoint.gmck", result.model);
  std::ostringstream csv;
  write_train_log_csv(csv, result.log);
  write_text(dir / "trainlog.csv", csv.str());
  const auto& best = result.log.epochs.at(result.log.best_epoch - 1);
  out << nlohmann::json{{"checkpoint", (dir / "checkpoint.gmck").string()},
                        {"epochs_run", result.log.epochs.size()},
                        {"best_epoch", result.log.best_epoch},
                        {"stop_reason", result.log.stop_reason},
                        {"best_val", best.val}}
             .dump()
      << '\n';
  return 0;
}

inline int run_eval(const std::string& manifest_path, const std::string& checkpoint_path, const std::string& split_name,
                    const std::string& out_path, const RunFlags& flags, std::ostream& out, std::ostream& err) {
  const RunConfig rc = flags.resolve();
  const AnyModel model = load_checkpoint(checkpoint_path);
  const ModelSpec spec = spec_of(model);
  const Manifest raw = load_manifest(manifest_path);
  if (!(spec.config.layout == raw.layout))
    throw ConfigError("layout mismatch: checkpoint was trained on " + nlohmann::json(spec.config.layout).dump() +
                      " but the manifest declares " + nlohmann::json(raw.layout).dump());
  if (spec.config.num_classes != raw.num_classes)
    throw ConfigError("class count mismatch: checkpoint has " + std::to_string(spec.config.num_classes) +
                      ", manifest has " + std::to_string(raw.num_classes));
  const Manifest manifest = with_splits(raw, rc.split, err);
  const auto bags = load_split(manifest, manifest_path, parse_split_tag(split_name), rc.instances, rc.train.seed, true);
  const Evaluation ev = evaluate_any(model, bags);
  const std::string text = nlohmann::json(ev.report).dump(2) + "\n";
  if (!out_path.empty()) write_text(out_path, text);
  out << text;
  return 0;
}

inline int run_sweep(const std::string& manifest_path, const std::string& out_path, std::size_t max_k,
                     const RunFlags& flags, std::ostream& out, std::ostream& err) {
  RunConfig rc = flags.resolve();
  const Manifest manifest = with_splits(load_manifest(manifest_path), rc.split, err);
  const bool fix = !rc.train.resample_per_epoch;
  const auto train = load_split(manifest, manifest_path, SplitTag::kTrain, rc.instances, rc.train.seed, fix);
  const auto val = load_split(manifest, manifest_path, SplitTag::kVal, rc.instances, rc.train.seed, true);
  const auto test = load_split(manifest, manifest_path, SplitTag::kTest, rc.instances, rc.train.seed, true);
  const std::size_t groups = manifest.layout.num_groups();
  if (groups > 16) throw ParameterError("sweep: too many groups to enumerate");
  std::vector<std::vector<std::size_t>> combos;
  for (std::uint32_t mask = 1; mask < (1u << groups); ++mask) {
    std::vector<std::size_t> combo;
    for (std::size_t g = 0; g < groups; ++g)
      if (mask & (1u << g)) combo.push_back(g);
    if (max_k == 0 || combo.size() <= max_k) combos.push_back(std::move(combo));
  }
  std::stable_sort(combos.begin(), combos.end(), [](const auto& a, const auto& b) { return a.size() < b.size(); });

  auto project = [&](std::span<const FeatureBag> bags, const std::vector<std::size_t>& combo) {
    std::vector<FeatureBag> out_bags;
    for (const auto& b : bags) out_bags.push_back({b.bag_id, select_groups(b.features, manifest.layout, combo), b.label});
    return out_bags;
  };

  std::ostringstream csv;
  csv.precision(17);
  csv << "k,combo,accuracy,balanced_accuracy,qwk,weighted_f1\n";
  for (const auto& combo : combos) {
    ModelSpec spec = rc.model;
    spec.arch = ArchKind::kGasMil;
    spec.config.layout = manifest.layout.subset(combo);
    spec.config.num_classes = manifest.num_classes;
    const auto tr = project(train, combo), va = project(val, combo), te = project(test, combo);
    const TrainOutcome result = train_model(spec, rc.train, tr, va);
    const MetricsReport r = evaluate_any(result.model, te).report;
    std::string name;
    for (std::size_t g : combo) name += (name.empty() ? "" : "+") + manifest.layout.names[g];
    csv << combo.size() << ',' << name << ',' << r.accuracy << ',' << r.balanced_accuracy << ',';
    if (r.qwk) csv << *r.qwk;
    else csv << "nan";
    csv << ',' << r.weighted_f1 << '\n';
    err << "sweep: " << name << " balanced_accuracy=" << r.balanced_accuracy << '\n';
  }
  if (!out_path.empty()) write_text(out_path, csv.str());
  out << csv.str();
  return 0;
}

inline int run_inspect(const std::string& path, std::ostream& out) {
  const auto bytes = gasmil::detail::read_file_bytes(path);
  const std::string magic(bytes.begin(), bytes.begin() + std::min<std::size_t>(4, bytes.size()));
  nlohmann::json j;
  if (magic == "GMBG") {
    const BagHeader h = read_bag_header(bytes);
    j = {{"type", "bag"}, {"version", h.version}, {"bag_id", h.bag_id}, {"instances", h.rows}, {"features", h.cols},
         {"label", h.label}};
  } else if (magic == "GMCK") {
    const CheckpointHeader h = read_checkpoint_header(bytes);
    j = {{"type", "checkpoint"}, {"version", h.version}, {"config", h.spec}, {"tensors", nlohmann::json::array()}};
    for (const auto& t : h.tensors) j["tensors"].push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
  } else {
    throw FormatError("unrecognized file magic in " + path, 0);
  }
  out << j.dump(2) << '\n';
  return 0;
}

}  // namespace detail

inline int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"gasmil: grouped ensemble multi-instance learning over feature bags", "gasmil"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic multi-group bag dataset");
  std::string synth_out, synth_groups, synth_names, synth_plan;
  std::size_t synth_classes = 2, synth_bags = 100, synth_instances = 50;
  std::uint64_t synth_seed = 0;
  double synth_shift = 2.0;
  bool synth_ordinal = false;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--groups", synth_groups, "Comma-separated group widths, e.g. 16,24")->required();
  synth->add_option("--names", synth_names, "Comma-separated group names");
  synth->add_option("--classes", synth_classes)->check(CLI::PositiveNumber);
  synth->add_option("--bags", synth_bags);
  synth->add_option("--instances", synth_instances, "Instances per bag")->check(CLI::PositiveNumber);
  synth->add_option("--seed", synth_seed);
  synth->add_option("--plan", synth_plan, "Informative classes per group, e.g. 0,1/2");
  synth->add_option("--shift", synth_shift, "Mean shift of signal instances");
  synth->add_flag("--ordinal", synth_ordinal, "Grade-proportional shift in every group");

  // split
  auto* split = app.add_subcommand("split", "Assign stratified train/val/test tags");
  std::string split_manifest, split_out, split_fractions = "0.7,0.15,0.15";
  std::uint64_t split_seed = 0;
  split->add_option("--manifest", split_manifest)->required();
  split->add_option("--out", split_out, "Output manifest (default: overwrite input)");
  split->add_option("--fractions", split_fractions, "train,val,test");
  split->add_option("--seed", split_seed);

  // preprocess
  auto* prep = app.add_subcommand("preprocess", "Detect tissue and cut tiles from a PPM image");
  std::string prep_image, prep_out, prep_mode = "otsu";
  std::size_t prep_tile = 224, prep_scale = 16, prep_dilation = 1;
  double prep_coverage = 0.5, prep_fixed = 0.6;
  prep->add_option("--image", prep_image, "Full-resolution binary PPM")->required();
  prep->add_option("--out", prep_out, "Output directory for tiles and tiles.json")->required();
  prep->add_option("--tile-size", prep_tile)->check(CLI::PositiveNumber);
  prep->add_option("--scale-factor", prep_scale, "Full-resolution pixels per mask pixel")->check(CLI::PositiveNumber);
  prep->add_option("--coverage", prep_coverage, "Minimum tissue fraction per kept tile");
  prep->add_option("--dilation", prep_dilation, "Dilation radius in mask pixels");
  prep->add_option("--threshold-mode", prep_mode)->check(CLI::IsMember({"otsu", "fixed"}));
  prep->add_option("--fixed-threshold", prep_fixed, "Normalized H/S level in fixed mode");

  // train
  auto* train = app.add_subcommand("train", "Train a model on the manifest's train/val splits");
  std::string train_manifest, train_out;
  detail::RunFlags train_flags;
  train->add_option("--manifest", train_manifest)->required();
  train->add_option("--out", train_out, "Output directory for checkpoint.gmck and trainlog.csv")->required();
  train_flags.add_to(*train, true);

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  std::string eval_manifest, eval_checkpoint, eval_split = "test", eval_out;
  detail::RunFlags eval_flags;
  eval->add_option("--manifest", eval_manifest)->required();
  eval->add_option("--checkpoint", eval_checkpoint)->required();
  eval->add_option("--split", eval_split)->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--out", eval_out, "Also write the report to this file");
  eval_flags.add_to(*eval, false);

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Train GAS-MIL on every group subset; CSV of test metrics vs K");
  std::string sweep_manifest, sweep_out;
  std::size_t sweep_max_k = 0;
  detail::RunFlags sweep_flags;
  sweep->add_option("--manifest", sweep_manifest)->required();
  sweep->add_option("--out", sweep_out, "Also write the CSV to this file");
  sweep->add_option("--max-k", sweep_max_k, "Largest subset size (0 = all)");
  sweep_flags.add_to(*sweep, true);

  // inspect
  auto* inspect = app.add_subcommand("inspect", "Dump the header of a bag or checkpoint file");
  std::string inspect_path;
  inspect->add_option("file", inspect_path)->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*synth)
      return detail::run_synth(synth_out, synth_groups, synth_names, synth_classes, synth_bags, synth_instances,
                               synth_seed, synth_plan, synth_shift, synth_ordinal, out);
    if (*split) return detail::run_split(split_manifest, split_out, split_fractions, split_seed, out);
    if (*prep)
      return detail::run_preprocess(prep_image, prep_out, prep_tile, prep_scale, prep_coverage, prep_dilation, prep_mode,
                                    prep_fixed, out);
    if (*train) return detail::run_train(train_manifest, train_out, train_flags, out, err);
    if (*eval) return detail::run_eval(eval_manifest, eval_checkpoint, eval_split, eval_out, eval_flags, out, err);
    if (*sweep) return detail::run_sweep(sweep_manifest, sweep_out, sweep_max_k, sweep_flags, out, err);
    if (*inspect) return detail::run_inspect(inspect_path, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  err << app.help();
  return 2;
}

}  // namespace gasmil::cli
