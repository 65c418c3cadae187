#pragma once

#include <algorithm>
#include <map>
#include <vector>

#include "moment2d/model.hpp"

namespace m2d {

/// Deterministic ordering used everywhere a score tie must be broken:
/// higher score first, then earlier start, then shorter duration, then
/// original input order.
inline bool scored_before(const ScoredMoment& a, std::size_t ia, const ScoredMoment& b,
                          std::size_t ib) {
  if (a.score != b.score) return a.score > b.score;
  if (a.interval.start_s != b.interval.start_s) return a.interval.start_s < b.interval.start_s;
  if (a.interval.end_s != b.interval.end_s) return a.interval.end_s < b.interval.end_s;
  return ia < ib;
}

/// Greedy non-maximum suppression: walk moments in descending score order and
/// keep one iff its IoU with every previously kept moment is <= threshold.
/// Output is sorted by score (ties per scored_before).
inline std::vector<ScoredMoment> nms(const std::vector<ScoredMoment>& moments,
                                     double threshold = 0.49) {
  std::vector<std::size_t> order(moments.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scored_before(moments[a], a, moments[b], b);
  });
  std::vector<ScoredMoment> kept;
  for (std::size_t idx : order) {
    bool ok = true;
    for (const auto& k : kept)
      if (temporal_iou(moments[idx].interval, k.interval) > threshold) {
        ok = false;
        break;
      }
    if (ok) kept.push_back(moments[idx]);
  }
  return kept;
}

/// Retrieval metric grid: Rank n@m for each n in top_n and m in thresholds.
struct MetricSpec {
  std::vector<int> top_n{1, 5};
  std::vector<double> thresholds{0.5, 0.7};

  void validate() const {
    for (int n : top_n)
      if (n < 1) throw std::invalid_argument("metric: n must be >= 1");
    for (double m : thresholds)
      if (!(m > 0.0 && m < 1.0)) throw std::invalid_argument("metric: m must lie in (0,1)");
  }
};

struct RankCell {
  int n = 0;
  double m = 0.0;
  double percentage = 0.0;
};

/// Percentage of queries whose top-n predictions contain a moment with
/// IoU strictly greater than m.
inline std::vector<RankCell> rank_at(const std::vector<std::vector<ScoredMoment>>& predictions,
                                     const std::vector<TimeInterval>& targets,
                                     const MetricSpec& spec) {
  spec.validate();
  if (predictions.size() != targets.size())
    throw std::invalid_argument("rank_at: one target per query required");
  if (targets.empty()) throw std::invalid_argument("rank_at: no queries");
  std::vector<RankCell> table;
  for (int n : spec.top_n) {
    for (double m : spec.thresholds) {
      std::int64_t hits = 0;
      for (std::size_t q = 0; q < targets.size(); ++q) {
        const auto& preds = predictions[q];
        const std::size_t limit = std::min<std::size_t>(preds.size(), static_cast<std::size_t>(n));
        for (std::size_t i = 0; i < limit; ++i) {
          if (temporal_iou(preds[i].interval, targets[q]) > m) {
            ++hits;
            break;
          }
        }
      }
      table.push_back({n, m, 100.0 * double(hits) / double(targets.size())});
    }
  }
  return table;
}

/// Scores one video against one query and returns the top-n moments after
/// NMS. Videos longer than the model window are scanned with back-to-back
/// windows (plus a final flush window); overlapping candidates keep their
/// best score.
inline std::vector<ScoredMoment> localize(const Model& model, const Tensor& features,
                                          const ClipGrid& grid, const std::vector<int>& token_ids,
                                          int top_n) {
  const int n = model.cfg.window;
  const int clips = static_cast<int>(features.dim(0));
  if (clips != grid.num_clips) throw std::invalid_argument("localize: feature/grid clip mismatch");

  std::vector<int> starts;
  if (clips <= n) {
    starts.push_back(0);
  } else {
    for (int s = 0; s + n <= clips; s += n) starts.push_back(s);
    if (starts.back() + n < clips) starts.push_back(clips - n);
  }

  std::map<std::pair<int, int>, ScoredMoment> best;  // absolute (start, dur) -> best
  for (int ws : starts) {
    const int real = std::min(n, clips - ws);
    Tensor window({n, features.dim(1)});
    std::memcpy(window.data(), features.data() + std::int64_t(ws) * features.dim(1),
                sizeof(double) * static_cast<std::size_t>(real) * static_cast<std::size_t>(features.dim(1)));
    Graph g(false);
    auto out = model.forward(g, window, token_ids, real, false);
    std::vector<Tensor> maps;
    for (const auto& s : out.scores) maps.push_back(s->value);
    ClipGrid wgrid{n, grid.clip_seconds, grid.frames_per_clip};
    for (auto& sm : recover_scores(maps, model.cfg, wgrid, real)) {
      sm.interval.start_s += ws * grid.clip_seconds;
      sm.interval.end_s += ws * grid.clip_seconds;
      sm.coord.start_idx += ws;
      const std::pair<int, int> key{sm.coord.start_idx, sm.coord.dur_idx};
      auto it = best.find(key);
      if (it == best.end() || sm.score > it->second.score) best[key] = sm;
    }
  }

  std::vector<ScoredMoment> all;
  all.reserve(best.size());
  for (auto& [key, sm] : best) all.push_back(sm);
  std::vector<ScoredMoment> kept = nms(all, model.cfg.nms_iou);
  if (static_cast<int>(kept.size()) > top_n) kept.resize(static_cast<std::size_t>(top_n));
  return kept;
}

}  // namespace m2d
