#pragma once

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "moment2d/graph.hpp"
#include "moment2d/lattice.hpp"
#include "moment2d/rng.hpp"

namespace m2d {

/// Least-squares line through (log x, log y) points with a 95% slope interval.
struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double ci95 = 0.0;
};

inline SlopeFit fit_loglog(const std::vector<std::pair<double, double>>& points) {
  const std::size_t n = points.size();
  if (n < 2) throw std::invalid_argument("fit_loglog: need at least 2 points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& [x, y] : points) {
    const double lx = std::log(x), ly = std::log(y);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double denom = n * sxx - sx * sx;
  SlopeFit fit;
  fit.slope = (n * sxy - sx * sy) / denom;
  fit.intercept = (sy - fit.slope * sx) / n;
  if (n > 2) {
    double sse = 0.0;
    for (const auto& [x, y] : points) {
      const double r = std::log(y) - (fit.intercept + fit.slope * std::log(x));
      sse += r * r;
    }
    const double se = std::sqrt(sse / double(n - 2) / (sxx - sx * sx / double(n)));
    fit.ci95 = 1.96 * se;
  }
  return fit;
}

struct BenchRow {
  std::string geometry;
  int n = 0;
  std::int64_t full_grid = 0;
  std::int64_t valid = 0;
  std::int64_t macs = 0;  // analytic multiply-accumulate count of the forward
  double wall_ms_med = 0.0;
  std::int64_t workset_values = 0;  // peak live tensor elements during the forward
};

struct BenchGeomSummary {
  std::string geometry;
  SlopeFit count_slope;  // full-grid candidates vs N
  SlopeFit wall_slope;   // median wall-clock vs N
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::vector<BenchGeomSummary> summaries;
};

struct BenchConfig {
  std::vector<MapKind> geometries{MapKind::DenseSingle, MapKind::SparseSingle, MapKind::SparseMulti};
  std::vector<int> n_values{64, 128, 256, 512, 1024};
  int repeats = 5;
  int channels = 8;
  int kernel = 5;
  int layers = 2;
  int anchors = 8;
  int scales = 3;
  std::uint64_t seed = 7;

  void validate() const {
    if (repeats < 5) throw std::invalid_argument("bench: repeats must be >= 5");
    if (n_values.size() < 5) throw std::invalid_argument("bench: need >= 5 distinct N values");
    int lo = n_values.front(), hi = n_values.front();
    for (int n : n_values) {
      lo = std::min(lo, n);
      hi = std::max(hi, n);
    }
    if (hi < 8 * lo) throw std::invalid_argument("bench: N values must span an 8x range");
    if (kernel % 2 == 0) throw std::invalid_argument("bench: kernel must be odd");
  }
};

namespace detail {

/// Map shapes the scoring network runs over, per geometry. Dense and sparse
/// single-scale operate on the reconstructed N x N map; the multi-scale
/// geometry uses its K compact per-scale maps.
inline std::vector<std::pair<int, int>> bench_map_shapes(MapKind kind, int n, int anchors,
                                                         int scales) {
  std::vector<std::pair<int, int>> shapes;
  if (kind == MapKind::SparseMulti) {
    for (int k = 0; k < scales; ++k) shapes.emplace_back(std::max(1, n >> k), anchors);
  } else {
    shapes.emplace_back(n, n);
  }
  return shapes;
}

struct BenchNet {
  std::vector<Var> fw, fb, gw, gb;  // per layer gated conv params
  Var head_w, head_b;
};

inline BenchNet make_bench_net(const BenchConfig& cfg, Rng& rng) {
  BenchNet net;
  const double bound = 1.0 / std::sqrt(double(cfg.kernel * cfg.kernel * cfg.channels));
  for (int l = 0; l < cfg.layers; ++l) {
    net.fw.push_back(make_leaf(uniform_tensor({cfg.kernel, cfg.kernel, cfg.channels, cfg.channels}, bound, rng), false));
    net.fb.push_back(make_leaf(Tensor::zeros({cfg.channels}), false));
    net.gw.push_back(make_leaf(uniform_tensor({cfg.kernel, cfg.kernel, cfg.channels, cfg.channels}, bound, rng), false));
    net.gb.push_back(make_leaf(Tensor::zeros({cfg.channels}), false));
  }
  net.head_w = make_leaf(uniform_tensor({1, cfg.channels}, bound, rng), false);
  net.head_b = make_leaf(Tensor::zeros({1}), false);
  return net;
}

inline Tensor bench_mask(MapKind kind, int n, int rows, int cols) {
  Tensor m({rows, cols});
  if (kind == MapKind::SparseMulti) {
    const int stride = n / rows;
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m.at2(i, j) = (i + j + 1) * stride <= n ? 1.0 : 0.0;
  } else {
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m.at2(i, j) = i + j < n ? 1.0 : 0.0;
  }
  return m;
}

}  // namespace detail

/// Runs the gated-convolution scoring stack over each geometry's maps at each
/// N, with fixed anchors/scales/kernel/layers and a small channel width, and
/// reports exact candidate counts, analytic MAC counts, median wall-clock and
/// the peak tensor working set.
inline BenchReport bench_scaling(const BenchConfig& cfg) {
  cfg.validate();
  BenchReport report;
  for (MapKind kind : cfg.geometries) {
    std::vector<std::pair<double, double>> count_pts, wall_pts;
    for (int n : cfg.n_values) {
      LatticeGeometry geom{kind, n, cfg.anchors, cfg.scales};
      const CandidateCount counts = candidate_count(geom);

      const auto shapes = detail::bench_map_shapes(kind, n, cfg.anchors, cfg.scales);
      Rng rng(cfg.seed);
      detail::BenchNet net = detail::make_bench_net(cfg, rng);
      std::vector<Tensor> inputs, masks;
      std::int64_t macs = 0;
      for (const auto& [rows, cols] : shapes) {
        Tensor x({rows, cols, cfg.channels});
        for (std::int64_t i = 0; i < x.size(); ++i) x[i] = rng.gaussian();
        inputs.push_back(std::move(x));
        masks.push_back(detail::bench_mask(kind, n, rows, cols));
        const std::int64_t positions = std::int64_t(rows) * cols;
        macs += positions * cfg.kernel * cfg.kernel * cfg.channels * cfg.channels * 2 * cfg.layers;
        macs += positions * cfg.channels;  // head
      }

      const std::int64_t pad = (cfg.kernel - 1) / 2;
      auto run_forward = [&]() {
        Graph g(false);
        for (std::size_t m = 0; m < inputs.size(); ++m) {
          Var x = g.constant(inputs[m]);
          for (int l = 0; l < cfg.layers; ++l) {
            x = g.gated_conv2d(x, net.fw[static_cast<std::size_t>(l)], net.fb[static_cast<std::size_t>(l)],
                               net.gw[static_cast<std::size_t>(l)], net.gb[static_cast<std::size_t>(l)], pad, pad);
            x = g.mask_rows(x, masks[m]);
          }
          x = g.mask_rows(g.sigmoid(g.linear(x, net.head_w, net.head_b)), masks[m]);
        }
      };

      std::vector<double> times;
      std::int64_t workset = 0;
      for (int r = 0; r < cfg.repeats; ++r) {
        TensorAllocStats::reset_peak();
        const auto t0 = std::chrono::steady_clock::now();
        run_forward();
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        workset = std::max(workset, TensorAllocStats::peak().load());
      }
      std::sort(times.begin(), times.end());
      const double med = times[times.size() / 2];

      report.rows.push_back({map_kind_name(kind), n, counts.full_grid, counts.valid, macs, med, workset});
      count_pts.emplace_back(double(n), double(counts.full_grid));
      wall_pts.emplace_back(double(n), med);
    }
    report.summaries.push_back({map_kind_name(kind), fit_loglog(count_pts), fit_loglog(wall_pts)});
  }
  return report;
}

inline std::string bench_report_csv(const BenchReport& report) {
  std::string out = "geometry,N,full_grid,valid,macs,wall_ms_med,workset_values\n";
  char buf[256];
  for (const auto& r : report.rows) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%lld,%lld,%lld,%.4f,%lld\n", r.geometry.c_str(), r.n,
                  static_cast<long long>(r.full_grid), static_cast<long long>(r.valid),
                  static_cast<long long>(r.macs), r.wall_ms_med,
                  static_cast<long long>(r.workset_values));
    out += buf;
  }
  return out;
}

}  // namespace m2d
