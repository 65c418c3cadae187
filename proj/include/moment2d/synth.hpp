#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "moment2d/io.hpp"
#include "moment2d/lattice.hpp"
#include "moment2d/rng.hpp"

namespace m2d {

/// Recipe for a planted-moment dataset: every video hides one moment whose
/// clips carry a query-determined signature on top of unit Gaussian noise.
struct SynthSpec {
  int vocab_words = 50;
  int videos = 500;
  int clips_per_video = 64;
  int feature_dim = 16;
  double snr = 3.0;  // signature scale relative to unit noise
  double clip_seconds = 1.0;
  int query_tokens_min = 2;
  int query_tokens_max = 4;
  // Planted moment length range in clips (0 = up to the whole video).
  int duration_min_clips = 2;
  int duration_max_clips = 0;
  // Draw targets from the candidate lattice itself (exactly representable);
  // otherwise any clip-aligned interval with lattice IoU > 0.7 is eligible.
  bool lattice_aligned_targets = true;
  // Lattice the targets must be coverable on (best IoU > 0.7).
  int window = 64;
  int anchors = 8;
  int scales = 3;
  std::uint64_t seed = 1;

  void validate() const {
    if (vocab_words < 1 || videos < 1 || clips_per_video < 1 || feature_dim < 1)
      throw std::invalid_argument("synth: counts must be >= 1");
    if (!(snr > 0.0)) throw std::invalid_argument("synth: snr must be > 0");
    if (query_tokens_min < 1 || query_tokens_max < query_tokens_min)
      throw std::invalid_argument("synth: bad query token range");
    if (duration_min_clips < 1 || duration_min_clips > clips_per_video)
      throw std::invalid_argument("synth: bad duration_min_clips");
    if (duration_max_clips != 0 &&
        (duration_max_clips < duration_min_clips || duration_max_clips > clips_per_video))
      throw std::invalid_argument("synth: bad duration_max_clips");
  }

  int duration_hi() const {
    return duration_max_clips == 0 ? clips_per_video : duration_max_clips;
  }
};

struct SynthDataset {
  std::vector<AnnotationRecord> annotations;  // one per video
  std::vector<FeatureStore> features;         // aligned with annotations
  Vocabulary vocab;
};

namespace detail {

/// Unit-norm signature vector for one token id, derived from (seed, id) only.
inline std::vector<double> token_signature(std::uint64_t seed, int token_id, int dim) {
  Rng rng(seed ^ (0xabcd1234ull + 0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(token_id + 1)));
  std::vector<double> v(static_cast<std::size_t>(dim));
  double norm = 0.0;
  for (auto& x : v) {
    x = rng.gaussian();
    norm += x * x;
  }
  norm = std::sqrt(std::max(norm, 1e-12));
  for (auto& x : v) x /= norm;
  return v;
}

inline std::string synth_word(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "w%03d", i);
  return buf;
}

}  // namespace detail

/// Deterministic function of the spec (and its seed). Targets are clip
/// aligned and re-drawn until the configured lattice covers them with
/// IoU > 0.7; a spec that admits no coverable target is rejected.
inline SynthDataset synth_generate(const SynthSpec& spec) {
  spec.validate();
  SynthDataset ds;
  std::vector<std::string> words;
  for (int i = 0; i < spec.vocab_words; ++i) words.push_back(detail::synth_word(i));
  ds.vocab = Vocabulary::from_words(std::move(words));

  const CandidateSet lattice =
      enumerate_multiscale(std::min(spec.window, spec.clips_per_video), spec.anchors, spec.scales);
  const ClipGrid grid{spec.clips_per_video, spec.clip_seconds, 1};
  const ClipGrid lattice_grid{std::min(spec.window, spec.clips_per_video), spec.clip_seconds, 1};

  const int dur_lo = spec.duration_min_clips;
  const int dur_hi = spec.duration_hi();
  std::vector<MomentCoord> eligible;
  if (spec.lattice_aligned_targets) {
    for (const auto& c : flatten_dedup(lattice))
      if (c.num_clips() >= dur_lo && c.num_clips() <= dur_hi) eligible.push_back(c);
    if (eligible.empty())
      throw std::runtime_error("synth_generate: lattice admits no target in the duration range");
  }

  Rng rng(spec.seed);
  for (int v = 0; v < spec.videos; ++v) {
    // Clip-aligned target with a coverable lattice candidate.
    int start = 0, dur = 0;
    bool found = false;
    for (int attempt = 0; attempt < 1000 && !found; ++attempt) {
      if (spec.lattice_aligned_targets) {
        const MomentCoord c = eligible[rng.below(eligible.size())];
        start = c.start_idx;
        dur = c.num_clips();
      } else {
        dur = dur_lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(dur_hi - dur_lo) + 1));
        start = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.clips_per_video - dur) + 1));
      }
      const TimeInterval cand{start * spec.clip_seconds, (start + dur) * spec.clip_seconds};
      found = best_candidate_iou(lattice, lattice_grid, cand) > 0.7;
    }
    if (!found)
      throw std::runtime_error("synth_generate: lattice cannot cover any target for this spec");

    const int qlen = spec.query_tokens_min +
                     static_cast<int>(rng.below(
                         static_cast<std::uint64_t>(spec.query_tokens_max - spec.query_tokens_min) + 1));
    std::vector<int> token_ids;
    std::string query;
    for (int t = 0; t < qlen; ++t) {
      const int id = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.vocab_words)));
      token_ids.push_back(id);
      if (t) query += ' ';
      query += detail::synth_word(id);
    }

    // Query signature: mean of token signatures, unit normalized.
    std::vector<double> sig(static_cast<std::size_t>(spec.feature_dim), 0.0);
    for (int id : token_ids) {
      const auto tv = detail::token_signature(spec.seed, id, spec.feature_dim);
      for (int i = 0; i < spec.feature_dim; ++i) sig[static_cast<std::size_t>(i)] += tv[static_cast<std::size_t>(i)];
    }
    double norm = 0.0;
    for (double x : sig) norm += x * x;
    norm = std::sqrt(std::max(norm, 1e-12));
    for (auto& x : sig) x /= norm;

    FeatureStore fs;
    fs.grid = grid;
    fs.features = Tensor({spec.clips_per_video, spec.feature_dim});
    for (std::int64_t i = 0; i < fs.features.size(); ++i) fs.features[i] = rng.gaussian();
    for (int c = start; c < start + dur; ++c)
      for (int i = 0; i < spec.feature_dim; ++i)
        fs.features.at2(c, i) += spec.snr * sig[static_cast<std::size_t>(i)];

    char vid[16];
    std::snprintf(vid, sizeof(vid), "v%05d", v);
    AnnotationRecord rec{vid, spec.clips_per_video * spec.clip_seconds, start * spec.clip_seconds,
                         (start + dur) * spec.clip_seconds, query};
    rec.validate("synth");
    ds.annotations.push_back(std::move(rec));
    ds.features.push_back(std::move(fs));
  }
  return ds;
}

/// Writes vocab.txt, features/<id>.mstf and a train/heldout annotation split
/// (the last `heldout` videos form the held-out set).
inline void save_synth_dataset(const std::string& dir, const SynthDataset& ds, int heldout) {
  namespace fs = std::filesystem;
  if (heldout < 0 || heldout >= static_cast<int>(ds.annotations.size()))
    throw std::invalid_argument("save_synth_dataset: bad heldout count");
  fs::create_directories(fs::path(dir) / "features");
  save_vocabulary((fs::path(dir) / "vocab.txt").string(), ds.vocab);
  for (std::size_t v = 0; v < ds.features.size(); ++v)
    save_features((fs::path(dir) / "features" / (ds.annotations[v].video_id + ".mstf")).string(),
                  ds.features[v]);
  const std::size_t split = ds.annotations.size() - static_cast<std::size_t>(heldout);
  std::vector<AnnotationRecord> train(ds.annotations.begin(), ds.annotations.begin() + static_cast<std::ptrdiff_t>(split));
  std::vector<AnnotationRecord> held(ds.annotations.begin() + static_cast<std::ptrdiff_t>(split), ds.annotations.end());
  save_annotations((fs::path(dir) / "train.jsonl").string(), train);
  if (heldout > 0) save_annotations((fs::path(dir) / "heldout.jsonl").string(), held);
}

/// In-memory split into loaded datasets, bypassing the filesystem.
inline std::pair<Dataset, Dataset> synth_to_datasets(const SynthDataset& ds, int heldout) {
  auto build = [&](std::size_t lo, std::size_t hi) {
    Dataset out;
    out.vocab = ds.vocab;
    for (std::size_t v = lo; v < hi; ++v) {
      const auto& rec = ds.annotations[v];
      out.video_index[rec.video_id] = static_cast<int>(out.videos.size());
      out.videos.push_back({rec.video_id, ds.features[v].grid, ds.features[v].features});
      DatasetSample s;
      s.video = static_cast<int>(out.videos.size()) - 1;
      s.target = {rec.start_s, rec.end_s};
      s.query = rec.query;
      s.token_ids = tokens_to_ids(rec.query, out.vocab);
      out.samples.push_back(std::move(s));
    }
    return out;
  };
  const std::size_t split = ds.annotations.size() - static_cast<std::size_t>(heldout);
  return {build(0, split), build(split, ds.annotations.size())};
}

}  // namespace m2d
