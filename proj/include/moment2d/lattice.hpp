#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace m2d {

/// Half-open interval [start_s, end_s) in seconds.
struct TimeInterval {
  double start_s = 0.0;
  double end_s = 0.0;

  bool well_formed() const { return start_s >= 0.0 && start_s < end_s; }
  double length() const { return end_s - start_s; }
};

/// Temporal IoU of two intervals. Symmetric, in [0, 1], zero when disjoint.
inline double temporal_iou(const TimeInterval& x, const TimeInterval& y) {
  const double inter = std::min(x.end_s, y.end_s) - std::max(x.start_s, y.start_s);
  if (inter <= 0.0) return 0.0;
  const double uni = std::max(x.end_s, y.end_s) - std::min(x.start_s, y.start_s);
  return inter / uni;
}

/// Uniform clip grid over a video: num_clips clips of clip_seconds each.
/// frames_per_clip is carried as metadata only.
struct ClipGrid {
  int num_clips = 1;
  double clip_seconds = 1.0;
  int frames_per_clip = 1;

  bool well_formed() const { return num_clips >= 1 && clip_seconds > 0.0; }
};

/// Candidate moment in lattice coordinates: start clip index a and duration
/// index b (the moment spans clips a .. a+b, i.e. b+1 clips).
struct MomentCoord {
  int start_idx = 0;
  int dur_idx = 0;

  int end_idx() const { return start_idx + dur_idx; }
  int num_clips() const { return dur_idx + 1; }

  /// Validity triangle: the moment must fit inside an N-clip grid.
  bool valid_on(int num_grid_clips) const {
    return start_idx >= 0 && dur_idx >= 0 && start_idx + dur_idx < num_grid_clips;
  }

  friend bool operator==(const MomentCoord&, const MomentCoord&) = default;
  friend auto operator<=>(const MomentCoord&, const MomentCoord&) = default;
};

enum class MapKind { DenseSingle, SparseSingle, SparseMulti };

inline const char* map_kind_name(MapKind k) {
  switch (k) {
    case MapKind::DenseSingle: return "dense";
    case MapKind::SparseSingle: return "sparse_single";
    case MapKind::SparseMulti: return "multi_scale";
  }
  return "?";
}

/// Sampling scheme of a candidate map. DenseSingle ignores anchors/scales,
/// SparseSingle ignores num_scales.
struct LatticeGeometry {
  MapKind kind = MapKind::SparseMulti;
  int num_clips = 64;   // N
  int anchors = 8;      // A, duration bins per scale
  int num_scales = 3;   // K

  void validate() const {
    if (num_clips < 1) throw std::invalid_argument("lattice: num_clips must be >= 1");
    if (kind != MapKind::DenseSingle && anchors < 1)
      throw std::invalid_argument("lattice: anchors must be >= 1");
    if (kind == MapKind::SparseMulti && num_scales < 1)
      throw std::invalid_argument("lattice: num_scales must be >= 1");
  }
};

/// Enumerated candidate moments, one list per scale. For single-scale maps
/// there is exactly one list. Coordinates may repeat across scales (a short
/// moment can be sampled by several maps); `deduplicated` records whether
/// cross-scale duplicates were removed.
struct CandidateSet {
  LatticeGeometry geometry;
  std::vector<std::vector<MomentCoord>> per_scale;
  bool deduplicated = false;

  std::int64_t total() const {
    std::int64_t n = 0;
    for (const auto& s : per_scale) n += static_cast<std::int64_t>(s.size());
    return n;
  }
};

/// Maps a lattice coordinate to seconds: [a*tau, (a+b+1)*tau).
inline TimeInterval coord_to_interval(const MomentCoord& coord, const ClipGrid& grid) {
  if (!coord.valid_on(grid.num_clips))
    throw std::invalid_argument("coord_to_interval: coordinate outside validity triangle (a=" +
                                std::to_string(coord.start_idx) + ", b=" + std::to_string(coord.dur_idx) +
                                ", N=" + std::to_string(grid.num_clips) + ")");
  return {coord.start_idx * grid.clip_seconds,
          (coord.start_idx + coord.dur_idx + 1) * grid.clip_seconds};
}

/// All moments that fit in an N-clip grid: a >= 0, b >= 0, a+b < N.
inline CandidateSet enumerate_dense(int num_clips) {
  if (num_clips < 1) throw std::invalid_argument("enumerate_dense: N must be >= 1");
  CandidateSet set;
  set.geometry = {MapKind::DenseSingle, num_clips, 0, 1};
  set.per_scale.resize(1);
  auto& out = set.per_scale[0];
  out.reserve(static_cast<std::size_t>(num_clips) * (num_clips + 1) / 2);
  for (int a = 0; a < num_clips; ++a)
    for (int b = 0; a + b < num_clips; ++b) out.push_back({a, b});
  return set;
}

/// Sparse sampling rule for a moment spanning clips [start_clip, end_clip]:
/// with len = end-start+1 and s = 2^(k-1) where k = max(1, ceil(log2(len/A)+1)),
/// the moment is kept iff both endpoints are multiples of s.
inline bool sparse_predicate(int start_clip, int end_clip, int anchors) {
  if (anchors < 1) throw std::invalid_argument("sparse_predicate: anchors must be >= 1");
  if (start_clip < 0 || end_clip < start_clip)
    throw std::invalid_argument("sparse_predicate: need 0 <= start <= end");
  const int len = end_clip - start_clip + 1;
  int k = 1;
  // Smallest k >= 1 with len <= A * 2^(k-1), i.e. ceil(log2(len/A) + 1) clamped to >= 1.
  while (static_cast<std::int64_t>(anchors) << (k - 1) < len) ++k;
  const int stride = 1 << (k - 1);
  return start_clip % stride == 0 && end_clip % stride == 0;
}

/// Single-scale sparse map: the dense triangle filtered by sparse_predicate.
/// Collapses to enumerate_dense when N <= A.
inline CandidateSet enumerate_sparse_single(int num_clips, int anchors) {
  if (num_clips < 1) throw std::invalid_argument("enumerate_sparse_single: N must be >= 1");
  if (anchors < 1) throw std::invalid_argument("enumerate_sparse_single: A must be >= 1");
  CandidateSet set;
  set.geometry = {MapKind::SparseSingle, num_clips, anchors, 1};
  set.per_scale.resize(1);
  auto& out = set.per_scale[0];
  for (int a = 0; a < num_clips; ++a)
    for (int b = 0; a + b < num_clips; ++b)
      if (sparse_predicate(a, a + b, anchors)) out.push_back({a, b});
  return set;
}

/// Multi-scale sampling: scale k holds moments starting at multiples of 2^k
/// whose duration is one of {2^k, 2*2^k, ..., A*2^k} clips, clipped by the
/// validity triangle. Scale 0 therefore enumerates every moment of at most A
/// clips, and deeper scales trade granularity for reach.
inline CandidateSet enumerate_multiscale(int num_clips, int anchors, int num_scales) {
  LatticeGeometry geom{MapKind::SparseMulti, num_clips, anchors, num_scales};
  geom.validate();
  CandidateSet set;
  set.geometry = geom;
  set.per_scale.resize(static_cast<std::size_t>(num_scales));
  for (int k = 0; k < num_scales; ++k) {
    const int stride = 1 << k;
    auto& out = set.per_scale[static_cast<std::size_t>(k)];
    for (int a = 0; a < num_clips; a += stride) {
      for (int j = 1; j <= anchors; ++j) {
        const int dur = stride * j;  // clips
        if (a + dur > num_clips) break;
        out.push_back({a, dur - 1});
      }
    }
  }
  return set;
}

/// Unique coordinates across all scales, sorted.
inline std::vector<MomentCoord> flatten_dedup(const CandidateSet& set) {
  std::vector<MomentCoord> all;
  for (const auto& s : set.per_scale) all.insert(all.end(), s.begin(), s.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  return all;
}

struct CandidateCount {
  std::int64_t full_grid = 0;  // published closed-form count, triangle ignored
  std::int64_t valid = 0;      // enumerated candidates inside the triangle
};

/// Closed-form full-grid count of the multi-scale scheme,
/// (2 - 2^(1-K)) * A * N, evaluated exactly via per-scale start counts.
inline std::int64_t multiscale_full_grid_count(int num_clips, int anchors, int num_scales) {
  std::int64_t total = 0;
  for (int k = 0; k < num_scales; ++k) {
    const std::int64_t stride = std::int64_t{1} << k;
    const std::int64_t starts = (num_clips + stride - 1) / stride;
    total += starts * anchors;
  }
  return total;
}

/// Number of scale bands the sparse single-scale rule spans for N clips:
/// 1 while N <= A, then ceil(log2(N/A)) + 1.
inline int sparse_single_band_count(int num_clips, int anchors) {
  int k = 1;
  while (static_cast<std::int64_t>(anchors) << (k - 1) < num_clips) ++k;
  return k;
}

/// Candidate counts for a geometry: `full_grid` is the closed-form number of
/// sampled locations ignoring the validity triangle (the published estimate);
/// `valid` is the exact enumerated count inside the triangle.
inline CandidateCount candidate_count(const LatticeGeometry& geom) {
  geom.validate();
  const std::int64_t n = geom.num_clips;
  CandidateCount out;
  switch (geom.kind) {
    case MapKind::DenseSingle:
      out.full_grid = n * (n + 1) / 2;
      out.valid = out.full_grid;
      break;
    case MapKind::SparseSingle: {
      const int bands = sparse_single_band_count(geom.num_clips, geom.anchors);
      out.full_grid = multiscale_full_grid_count(geom.num_clips, geom.anchors, bands);
      out.valid = enumerate_sparse_single(geom.num_clips, geom.anchors).total();
      break;
    }
    case MapKind::SparseMulti:
      out.full_grid = multiscale_full_grid_count(geom.num_clips, geom.anchors, geom.num_scales);
      out.valid = enumerate_multiscale(geom.num_clips, geom.anchors, geom.num_scales).total();
      break;
  }
  return out;
}

inline CandidateSet enumerate_candidates(const LatticeGeometry& geom) {
  switch (geom.kind) {
    case MapKind::DenseSingle: return enumerate_dense(geom.num_clips);
    case MapKind::SparseSingle: return enumerate_sparse_single(geom.num_clips, geom.anchors);
    case MapKind::SparseMulti:
      return enumerate_multiscale(geom.num_clips, geom.anchors, geom.num_scales);
  }
  throw std::logic_error("enumerate_candidates: bad kind");
}

/// Best IoU an ideal scorer could reach for one target, over every candidate
/// of the geometry on the given grid.
inline double best_candidate_iou(const CandidateSet& set, const ClipGrid& grid,
                                 const TimeInterval& target) {
  double best = 0.0;
  for (const auto& scale : set.per_scale)
    for (const auto& c : scale) best = std::max(best, temporal_iou(coord_to_interval(c, grid), target));
  return best;
}

/// Retrieval ceiling of a candidate geometry: for each IoU threshold m, the
/// percentage of targets whose best-covered candidate exceeds m. Because the
/// ceiling assumes a perfect scorer, the top-1 and top-5 bounds coincide.
inline std::vector<double> coverage_upper_bound(const LatticeGeometry& geom, const ClipGrid& grid,
                                                const std::vector<TimeInterval>& targets,
                                                const std::vector<double>& thresholds) {
  if (targets.empty()) throw std::invalid_argument("coverage_upper_bound: no targets");
  for (double m : thresholds)
    if (!(m > 0.0 && m < 1.0)) throw std::invalid_argument("coverage_upper_bound: thresholds must lie in (0,1)");
  const CandidateSet set = enumerate_candidates(geom);
  std::vector<double> best(targets.size(), 0.0);
  for (std::size_t i = 0; i < targets.size(); ++i) best[i] = best_candidate_iou(set, grid, targets[i]);
  std::vector<double> out;
  out.reserve(thresholds.size());
  for (double m : thresholds) {
    std::int64_t hit = 0;
    for (double b : best)
      if (b > m) ++hit;
    out.push_back(100.0 * static_cast<double>(hit) / static_cast<double>(targets.size()));
  }
  return out;
}

}  // namespace m2d
