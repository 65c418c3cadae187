#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "moment2d/bench.hpp"
#include "moment2d/eval.hpp"
#include "moment2d/io.hpp"
#include "moment2d/synth.hpp"
#include "moment2d/training.hpp"

namespace fs = std::filesystem;
using namespace m2d;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int n = 0, k = 0, a = 0, kappa = 0, layers = 0;
  std::string format = "csv";
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "configuration file (key=value lines)");
  cmd->add_option("--out", o.out_dir, "output directory");
  cmd->add_option("--seed", o.seed, "random seed")->each([&](const std::string&) { o.seed_set = true; });
  cmd->add_option("--n", o.n, "window size N");
  cmd->add_option("--k", o.k, "number of scales K");
  cmd->add_option("--a", o.a, "anchors per scale A");
  cmd->add_option("--kappa", o.kappa, "gated convolution kernel size");
  cmd->add_option("--layers", o.layers, "gated convolution layers per scale");
  cmd->add_option("--format", o.format, "output format: csv or json")
      ->check(CLI::IsMember({"csv", "json"}));
}

/// Lattice-only commands skip the model-level constraints (for instance the
/// window divisibility rule does not apply to a dense enumeration).
ModelConfig resolve_config(const CommonOpts& o, bool model_validate = true) {
  ModelConfig cfg;
  if (!o.config_path.empty()) cfg = load_config(o.config_path, cfg);
  if (o.n) cfg.window = o.n;
  if (o.k) cfg.scales = o.k;
  if (o.a) cfg.anchors = o.a;
  if (o.kappa) cfg.kernel = o.kappa;
  if (o.layers) cfg.layers = o.layers;
  if (o.seed_set) cfg.seed = o.seed;
  if (model_validate) cfg.validate();
  return cfg;
}

void emit(const CommonOpts& o, const std::string& filename, const std::string& text) {
  if (o.out_dir.empty()) {
    std::cout << text;
    return;
  }
  fs::create_directories(o.out_dir);
  write_text_file((fs::path(o.out_dir) / filename).string(), text);
  std::cout << "wrote " << (fs::path(o.out_dir) / filename).string() << "\n";
}

MapKind parse_map_kind(const std::string& name) {
  if (name == "dense") return MapKind::DenseSingle;
  if (name == "sparse_single") return MapKind::SparseSingle;
  if (name == "multi_scale") return MapKind::SparseMulti;
  throw std::runtime_error("unknown map kind: " + name);
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  return out;
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
  return out;
}

std::string rank_table_csv(const std::vector<RankCell>& table) {
  std::ostringstream out;
  out << "n,m,percentage\n";
  for (const auto& c : table) out << c.n << "," << c.m << "," << c.percentage << "\n";
  return out.str();
}

nlohmann::json rank_table_json(const std::vector<RankCell>& table) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& c : table) rows.push_back({{"n", c.n}, {"m", c.m}, {"percentage", c.percentage}});
  return rows;
}

Vocabulary vocab_for(const std::string& vocab_path, int fallback_buckets) {
  if (!vocab_path.empty()) return load_vocabulary(vocab_path);
  return Vocabulary::hashed(fallback_buckets);
}

int run_enumerate(const CommonOpts& o, const std::string& map_name) {
  ModelConfig cfg = resolve_config(o, false);
  LatticeGeometry geom{parse_map_kind(map_name), cfg.window, cfg.anchors, cfg.scales};
  const CandidateSet set = enumerate_candidates(geom);
  const CandidateCount counts = candidate_count(geom);
  std::ostringstream csv;
  csv << "scale,start_idx,dur_idx\n";
  for (std::size_t k = 0; k < set.per_scale.size(); ++k)
    for (const auto& c : set.per_scale[k])
      csv << k << "," << c.start_idx << "," << c.dur_idx << "\n";
  if (o.format == "json") {
    nlohmann::json j;
    j["geometry"] = map_name;
    j["N"] = geom.num_clips;
    j["A"] = geom.anchors;
    j["K"] = geom.num_scales;
    j["full_grid"] = counts.full_grid;
    j["valid"] = counts.valid;
    nlohmann::json cands = nlohmann::json::array();
    for (std::size_t k = 0; k < set.per_scale.size(); ++k)
      for (const auto& c : set.per_scale[k])
        cands.push_back({{"scale", k}, {"start_idx", c.start_idx}, {"dur_idx", c.dur_idx}});
    j["candidates"] = std::move(cands);
    emit(o, "candidates.json", j.dump(2) + "\n");
  } else {
    emit(o, "candidates.csv", csv.str());
  }
  std::cerr << "full_grid=" << counts.full_grid << " valid=" << counts.valid << "\n";
  return 0;
}

int run_upper_bound(const CommonOpts& o, const std::string& annotations, const std::string& charades,
                    const std::string& durations, const std::string& map_name, double tau,
                    const std::string& thresholds_text) {
  ModelConfig cfg = resolve_config(o, false);
  const std::vector<double> thresholds = parse_double_list(thresholds_text);
  std::vector<AnnotationRecord> recs;
  if (!charades.empty())
    recs = load_annotations_charades(charades, durations);
  else
    recs = load_annotations(annotations);
  if (recs.empty()) throw std::runtime_error("upper-bound: no annotations");

  // Coverage is a property of (A, K, tau) over each video's own grid; the
  // lattice spans the whole video.
  const MapKind kind = parse_map_kind(map_name);
  std::vector<double> best;
  best.reserve(recs.size());
  std::map<int, CandidateSet> cache;
  for (const auto& rec : recs) {
    const int clips = std::max(1, static_cast<int>(rec.duration_s / tau));
    auto it = cache.find(clips);
    if (it == cache.end())
      it = cache.emplace(clips, enumerate_candidates({kind, clips, cfg.anchors, cfg.scales})).first;
    const ClipGrid grid{clips, tau, 1};
    best.push_back(best_candidate_iou(it->second, grid, {rec.start_s, rec.end_s}));
  }
  std::ostringstream csv;
  csv << "m,percentage\n";
  nlohmann::json j;
  for (double m : thresholds) {
    std::int64_t hits = 0;
    for (double b : best)
      if (b > m) ++hits;
    const double pct = 100.0 * double(hits) / double(best.size());
    csv << m << "," << pct << "\n";
    j[std::to_string(m)] = pct;
  }
  if (o.format == "json")
    emit(o, "upper_bound.json", j.dump(2) + "\n");
  else
    emit(o, "upper_bound.csv", csv.str());
  return 0;
}

int run_synth(const CommonOpts& o, SynthSpec spec, int heldout) {
  if (o.out_dir.empty()) throw std::runtime_error("synth: --out is required");
  ModelConfig cfg = resolve_config(o);
  spec.window = cfg.window;
  spec.anchors = cfg.anchors;
  spec.scales = cfg.scales;
  if (o.seed_set) spec.seed = o.seed;
  const SynthDataset ds = synth_generate(spec);
  save_synth_dataset(o.out_dir, ds, heldout);
  std::cout << "wrote " << ds.annotations.size() << " videos to " << o.out_dir << " (" << heldout
            << " held out)\n";
  return 0;
}

int run_train(const CommonOpts& o, const std::string& data_dir, const std::string& val_file) {
  if (o.out_dir.empty()) throw std::runtime_error("train: --out is required");
  ModelConfig cfg = resolve_config(o);
  const Vocabulary vocab = [&] {
    const fs::path vp = fs::path(data_dir) / "vocab.txt";
    return fs::exists(vp) ? load_vocabulary(vp.string()) : Vocabulary::hashed(cfg.vocab_size);
  }();
  cfg.vocab_size = vocab.table_size();
  const std::string features_dir = (fs::path(data_dir) / "features").string();
  const Dataset train_ds =
      load_dataset((fs::path(data_dir) / "train.jsonl").string(), features_dir, vocab);

  Dataset val_ds;
  TrainOptions opts;
  fs::create_directories(o.out_dir);
  opts.log_path = (fs::path(o.out_dir) / "metrics.jsonl").string();
  if (!val_file.empty()) {
    val_ds = load_dataset(val_file, features_dir, vocab);
    opts.validation = &val_ds;
    opts.val_spec = MetricSpec{{1}, {0.5, 0.7}};
  }

  Rng rng(cfg.seed);
  const TrainResult result = train(train_ds, cfg, rng, opts);
  save_checkpoint((fs::path(o.out_dir) / "model.ckpt").string(), result.checkpoint);
  std::cout << "trained " << cfg.epochs << " epochs on " << train_ds.samples.size()
            << " samples; checkpoint at " << (fs::path(o.out_dir) / "model.ckpt").string() << "\n";
  if (!result.epoch_loss.empty()) std::cout << "final loss " << result.epoch_loss.back() << "\n";
  return 0;
}

int run_eval(const CommonOpts& o, const std::string& checkpoint_path, const std::string& data_dir,
             const std::string& annotations_file, const std::string& n_list, const std::string& m_list) {
  const Checkpoint ck = load_checkpoint(checkpoint_path);
  Model model = model_from_checkpoint(ck);
  const fs::path vp = fs::path(data_dir) / "vocab.txt";
  const Vocabulary vocab =
      fs::exists(vp) ? load_vocabulary(vp.string()) : Vocabulary::hashed(model.cfg.vocab_size);
  if (vocab.table_size() != model.cfg.vocab_size)
    throw std::runtime_error("eval: vocabulary size does not match the checkpoint");
  const std::string ann = annotations_file.empty()
                              ? (fs::path(data_dir) / "heldout.jsonl").string()
                              : annotations_file;
  const Dataset ds = load_dataset(ann, (fs::path(data_dir) / "features").string(), vocab);

  MetricSpec spec{parse_int_list(n_list), parse_double_list(m_list)};
  const auto table = evaluate_rank(model, ds, spec);
  emit(o, "eval.csv", rank_table_csv(table));
  nlohmann::json j;
  j["queries"] = ds.samples.size();
  j["checkpoint"] = checkpoint_path;
  j["ranks"] = rank_table_json(table);
  if (!o.out_dir.empty())
    write_text_file((fs::path(o.out_dir) / "eval.json").string(), j.dump(2) + "\n");
  else
    std::cout << j.dump(2) << "\n";
  return 0;
}

int run_localize(const CommonOpts& o, const std::string& checkpoint_path,
                 const std::string& features_path, const std::string& vocab_path,
                 const std::string& query, int top_n) {
  const Checkpoint ck = load_checkpoint(checkpoint_path);
  Model model = model_from_checkpoint(ck);
  const Vocabulary vocab = vocab_for(vocab_path, model.cfg.vocab_size);
  if (vocab.table_size() != model.cfg.vocab_size)
    throw std::runtime_error("localize: vocabulary size does not match the checkpoint");
  const FeatureStore fs_in = load_features(features_path);
  const auto moments =
      localize(model, fs_in.features, fs_in.grid, tokens_to_ids(query, vocab), top_n);
  nlohmann::json j = nlohmann::json::array();
  for (const auto& sm : moments)
    j.push_back({{"start_s", sm.interval.start_s},
                 {"end_s", sm.interval.end_s},
                 {"score", sm.score},
                 {"scale", sm.scale},
                 {"start_idx", sm.coord.start_idx},
                 {"dur_idx", sm.coord.dur_idx}});
  emit(o, "localize.json", j.dump(2) + "\n");
  return 0;
}

int run_bench(const CommonOpts& o, const std::string& n_list, int repeats, int channels) {
  ModelConfig cfg = resolve_config(o, false);
  BenchConfig bench;
  bench.n_values = parse_int_list(n_list);
  bench.repeats = repeats;
  bench.channels = channels;
  bench.kernel = cfg.kernel;
  bench.layers = cfg.layers;
  bench.anchors = cfg.anchors;
  bench.scales = cfg.scales;
  if (o.seed_set) bench.seed = o.seed;
  const BenchReport report = bench_scaling(bench);
  emit(o, "bench.csv", bench_report_csv(report));
  nlohmann::json j = nlohmann::json::array();
  for (const auto& s : report.summaries) {
    j.push_back({{"geometry", s.geometry},
                 {"count_slope", s.count_slope.slope},
                 {"count_slope_ci95", s.count_slope.ci95},
                 {"wall_slope", s.wall_slope.slope},
                 {"wall_slope_ci95", s.wall_slope.ci95}});
    std::cerr << s.geometry << ": count slope " << s.count_slope.slope << " (ci " << s.count_slope.ci95
              << "), wall slope " << s.wall_slope.slope << " (ci " << s.wall_slope.ci95 << ")\n";
  }
  if (!o.out_dir.empty())
    write_text_file((fs::path(o.out_dir) / "bench_slopes.json").string(), j.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moment2d: multi-scale 2D temporal map moment localization"};
  app.require_subcommand(1);

  CommonOpts common;

  auto* enum_cmd = app.add_subcommand("enumerate", "emit a candidate set as CSV");
  std::string map_name = "dense";
  enum_cmd->add_option("--map", map_name, "dense, sparse_single or multi_scale")
      ->check(CLI::IsMember({"dense", "sparse_single", "multi_scale"}));
  add_common(enum_cmd, common);

  auto* ub_cmd = app.add_subcommand("upper-bound", "coverage ceiling of a candidate geometry");
  std::string ub_annotations, ub_charades, ub_durations, ub_map = "multi_scale";
  double ub_tau = 1.0;
  std::string ub_thresholds = "0.1,0.3,0.5,0.7";
  ub_cmd->add_option("--annotations", ub_annotations, "canonical JSONL annotations");
  ub_cmd->add_option("--charades", ub_charades, "Charades-style annotation text file");
  ub_cmd->add_option("--durations", ub_durations, "sidecar durations file for --charades");
  ub_cmd->add_option("--map", ub_map)->check(CLI::IsMember({"dense", "sparse_single", "multi_scale"}));
  ub_cmd->add_option("--tau", ub_tau, "clip length in seconds");
  ub_cmd->add_option("--m", ub_thresholds, "comma-separated IoU thresholds");
  add_common(ub_cmd, common);

  auto* synth_cmd = app.add_subcommand("synth", "generate a planted-moment dataset");
  SynthSpec synth_spec;
  int synth_heldout = 100;
  synth_cmd->add_option("--videos", synth_spec.videos);
  synth_cmd->add_option("--clips", synth_spec.clips_per_video);
  synth_cmd->add_option("--dim", synth_spec.feature_dim);
  synth_cmd->add_option("--snr", synth_spec.snr);
  synth_cmd->add_option("--vocab", synth_spec.vocab_words);
  synth_cmd->add_option("--query-tokens-min", synth_spec.query_tokens_min);
  synth_cmd->add_option("--query-tokens-max", synth_spec.query_tokens_max);
  synth_cmd->add_option("--dur-min", synth_spec.duration_min_clips, "shortest planted moment, in clips");
  synth_cmd->add_flag("--unaligned-targets",
                      [&](std::int64_t) { synth_spec.lattice_aligned_targets = false; },
                      "draw any clip-aligned coverable target instead of lattice points");
  synth_cmd->add_option("--dur-max", synth_spec.duration_max_clips, "longest planted moment, in clips (0 = whole video)");
  synth_cmd->add_option("--heldout", synth_heldout);
  add_common(synth_cmd, common);

  auto* train_cmd = app.add_subcommand("train", "train a model on a dataset directory");
  std::string train_data, train_val;
  train_cmd->add_option("--data", train_data, "dataset directory (train.jsonl, features/, vocab.txt)")
      ->required();
  train_cmd->add_option("--val", train_val, "validation annotation JSONL");
  add_common(train_cmd, common);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint: Rank n@m table");
  std::string eval_ckpt, eval_data, eval_ann, eval_n = "1,5", eval_m = "0.5,0.7";
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("--data", eval_data, "dataset directory")->required();
  eval_cmd->add_option("--annotations", eval_ann, "annotation JSONL (default: heldout.jsonl)");
  eval_cmd->add_option("--rank-n", eval_n, "comma-separated n values");
  eval_cmd->add_option("--m", eval_m, "comma-separated IoU thresholds");
  add_common(eval_cmd, common);

  auto* loc_cmd = app.add_subcommand("localize", "top-n moments for one query");
  std::string loc_ckpt, loc_features, loc_vocab, loc_query;
  int loc_top = 5;
  loc_cmd->add_option("--checkpoint", loc_ckpt)->required();
  loc_cmd->add_option("--features", loc_features, "MSTF clip feature file")->required();
  loc_cmd->add_option("--vocab", loc_vocab, "vocabulary file");
  loc_cmd->add_option("--query", loc_query)->required();
  loc_cmd->add_option("--top", loc_top);
  add_common(loc_cmd, common);

  auto* bench_cmd = app.add_subcommand("bench", "asymptotic scaling benchmark");
  std::string bench_n = "64,128,256,512,1024";
  int bench_repeats = 5, bench_channels = 8;
  bench_cmd->add_option("--n-values", bench_n, "comma-separated N values");
  bench_cmd->add_option("--repeats", bench_repeats);
  bench_cmd->add_option("--channels", bench_channels);
  add_common(bench_cmd, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*enum_cmd) return run_enumerate(common, map_name);
    if (*ub_cmd)
      return run_upper_bound(common, ub_annotations, ub_charades, ub_durations, ub_map, ub_tau,
                             ub_thresholds);
    if (*synth_cmd) return run_synth(common, synth_spec, synth_heldout);
    if (*train_cmd) return run_train(common, train_data, train_val);
    if (*eval_cmd) return run_eval(common, eval_ckpt, eval_data, eval_ann, eval_n, eval_m);
    if (*loc_cmd) return run_localize(common, loc_ckpt, loc_features, loc_vocab, loc_query, loc_top);
    if (*bench_cmd) return run_bench(common, bench_n, bench_repeats, bench_channels);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
