#include <doctest.h>

#include "moment2d/bench.hpp"

using namespace m2d;

TEST_CASE("loglog fit recovers exact power laws") {
  std::vector<std::pair<double, double>> quad, lin;
  for (double n : {64, 128, 256, 512, 1024, 2048}) {
    quad.emplace_back(n, 3.0 * n * n);
    lin.emplace_back(n, 0.5 * n);
  }
  CHECK(fit_loglog(quad).slope == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(fit_loglog(lin).slope == doctest::Approx(1.0).epsilon(1e-9));
  CHECK_THROWS_AS(fit_loglog({{1, 1}}), std::invalid_argument);
}

TEST_CASE("candidate-count slopes over N in 64..2048") {
  std::vector<std::pair<double, double>> dense, multi, sparse_single;
  for (int n : {64, 128, 256, 512, 1024, 2048}) {
    dense.emplace_back(n, double(candidate_count({MapKind::DenseSingle, n, 0, 1}).full_grid));
    multi.emplace_back(n, double(candidate_count({MapKind::SparseMulti, n, 8, 3}).full_grid));
    sparse_single.emplace_back(n, double(candidate_count({MapKind::SparseSingle, n, 8, 1}).full_grid));
  }
  const double dense_slope = fit_loglog(dense).slope;
  const double multi_slope = fit_loglog(multi).slope;
  const double ss_slope = fit_loglog(sparse_single).slope;
  CHECK(dense_slope == doctest::Approx(2.0).epsilon(0.005));
  CHECK(std::abs(dense_slope - 2.0) < 0.01);
  CHECK(multi_slope == doctest::Approx(1.0).epsilon(1e-6));
  // the sparse single-scale candidate count is also linear-ish in N
  CHECK(ss_slope > 0.85);
  CHECK(ss_slope < 1.15);
}

TEST_CASE("valid (triangle-masked) counts scale the same way") {
  std::vector<std::pair<double, double>> dense, multi;
  for (int n : {64, 128, 256, 512, 1024, 2048}) {
    dense.emplace_back(n, double(candidate_count({MapKind::DenseSingle, n, 0, 1}).valid));
    multi.emplace_back(n, double(candidate_count({MapKind::SparseMulti, n, 8, 3}).valid));
  }
  CHECK(fit_loglog(dense).slope > 1.85);
  CHECK(fit_loglog(dense).slope < 2.15);
  CHECK(fit_loglog(multi).slope > 0.85);
  CHECK(fit_loglog(multi).slope < 1.15);
}

TEST_CASE("bench config validation") {
  BenchConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.repeats = 3;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = BenchConfig{};
  cfg.n_values = {64, 96, 128, 160, 192};  // less than an 8x span
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("bench_scaling on a reduced grid produces coherent rows") {
  BenchConfig cfg;
  cfg.n_values = {16, 32, 64, 96, 128};
  cfg.repeats = 5;
  cfg.channels = 8;
  cfg.kernel = 3;
  cfg.layers = 1;
  cfg.anchors = 4;
  cfg.scales = 2;
  const BenchReport report = bench_scaling(cfg);
  REQUIRE(report.rows.size() == 15);

  for (const auto& row : report.rows) {
    const MapKind kind = row.geometry == "dense"           ? MapKind::DenseSingle
                         : row.geometry == "sparse_single" ? MapKind::SparseSingle
                                                           : MapKind::SparseMulti;
    // Counts must be bit-identical to the lattice module (single source of truth).
    const CandidateCount expect = candidate_count({kind, row.n, cfg.anchors, cfg.scales});
    CHECK(row.full_grid == expect.full_grid);
    CHECK(row.valid == expect.valid);
    CHECK(row.macs > 0);
    CHECK(row.wall_ms_med > 0.0);
    CHECK(row.workset_values > 0);
  }

  // MAC estimates follow the map sizes: quadratic for the N x N maps, linear
  // for the per-scale maps.
  std::vector<std::pair<double, double>> dense_macs, multi_macs;
  for (const auto& row : report.rows) {
    if (row.geometry == "dense") dense_macs.emplace_back(row.n, double(row.macs));
    if (row.geometry == "multi_scale") multi_macs.emplace_back(row.n, double(row.macs));
  }
  CHECK(fit_loglog(dense_macs).slope == doctest::Approx(2.0).epsilon(0.01));
  CHECK(fit_loglog(multi_macs).slope == doctest::Approx(1.0).epsilon(0.05));

  const std::string csv = bench_report_csv(report);
  CHECK(csv.rfind("geometry,N,full_grid,valid,macs,wall_ms_med,workset_values\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 16);
}
