#pragma once

#include <functional>
#include <stdexcept>
#include <vector>

#include "moment2d/graph.hpp"
#include "moment2d/rng.hpp"

namespace m2d {

/// Builds a scalar loss from scratch on the given graph. Called repeatedly by
/// the finite-difference probes, so it must be a pure function of the node
/// values it reads.
using LossBuilder = std::function<Var(Graph&)>;

inline double gradcheck_rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

inline double eval_loss(const LossBuilder& build) {
  Graph g(false);
  Var loss = build(g);
  const double v = loss->value[0];
  if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite loss");
  return v;
}

/// Central-difference check of every scalar in `wrt` against the analytic
/// gradient. Returns the worst relative error. Exhaustive, so only suitable
/// for small parameter counts.
inline double grad_check_exhaustive(const LossBuilder& build, const std::vector<Var>& wrt,
                                    double eps = 1e-5) {
  Graph g(true);
  for (const auto& v : wrt)
    if (!v->grad.empty()) v->grad.fill(0.0);
  Var loss = build(g);
  g.backward(loss);
  std::vector<Tensor> analytic;
  analytic.reserve(wrt.size());
  for (const auto& v : wrt)
    analytic.push_back(v->grad.empty() ? Tensor::zeros(v->value.shape()) : v->grad);

  double worst = 0.0;
  for (std::size_t t = 0; t < wrt.size(); ++t) {
    Tensor& theta = wrt[t]->value;
    for (std::int64_t i = 0; i < theta.size(); ++i) {
      const double keep = theta[i];
      theta[i] = keep + eps;
      const double fp = eval_loss(build);
      theta[i] = keep - eps;
      const double fm = eval_loss(build);
      theta[i] = keep;
      const double numeric = (fp - fm) / (2.0 * eps);
      worst = std::max(worst, gradcheck_rel_err(analytic[t][i], numeric));
    }
  }
  return worst;
}

/// Directional central-difference check: probes each tensor in `wrt` along
/// `dirs` random +-1 directions and compares with the analytic projection.
/// Scales to full models where the exhaustive sweep is intractable.
inline double grad_check_directional(const LossBuilder& build, const std::vector<Var>& wrt,
                                     Rng& rng, int dirs = 2, double eps = 1e-5) {
  Graph g(true);
  for (const auto& v : wrt)
    if (!v->grad.empty()) v->grad.fill(0.0);
  Var loss = build(g);
  g.backward(loss);
  std::vector<Tensor> analytic;
  analytic.reserve(wrt.size());
  for (const auto& v : wrt)
    analytic.push_back(v->grad.empty() ? Tensor::zeros(v->value.shape()) : v->grad);

  double worst = 0.0;
  for (std::size_t t = 0; t < wrt.size(); ++t) {
    Tensor& theta = wrt[t]->value;
    for (int d = 0; d < dirs; ++d) {
      // Unit-norm direction keeps the finite-difference truncation error
      // independent of the tensor size.
      const double lane = 1.0 / std::sqrt(static_cast<double>(theta.size()));
      std::vector<double> dir(static_cast<std::size_t>(theta.size()));
      for (auto& v : dir) v = rng.next_u64() & 1 ? lane : -lane;
      double projected = 0.0;
      for (std::int64_t i = 0; i < theta.size(); ++i) projected += analytic[t][i] * dir[static_cast<std::size_t>(i)];
      const Tensor keep = theta;
      for (std::int64_t i = 0; i < theta.size(); ++i) theta[i] = keep[i] + eps * dir[static_cast<std::size_t>(i)];
      const double fp = eval_loss(build);
      for (std::int64_t i = 0; i < theta.size(); ++i) theta[i] = keep[i] - eps * dir[static_cast<std::size_t>(i)];
      const double fm = eval_loss(build);
      theta = keep;
      const double numeric = (fp - fm) / (2.0 * eps);
      worst = std::max(worst, gradcheck_rel_err(projected, numeric));
    }
  }
  return worst;
}

}  // namespace m2d
