#pragma once

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "moment2d/eval.hpp"
#include "moment2d/io.hpp"
#include "moment2d/model.hpp"

namespace m2d {

/// Supervision scaling: IoU at or below 0.5 gives 0, above it 2*IoU - 1.
/// Continuous at the threshold and maps [0,1] onto [0,1].
inline double scaled_iou_label(double iou) {
  if (!(iou >= 0.0 && iou <= 1.0)) throw std::invalid_argument("scaled_iou_label: IoU outside [0,1]");
  return iou <= 0.5 ? 0.0 : 2.0 * iou - 1.0;
}

/// Per-scale supervision aligned with the score maps: raw IoU and scaled
/// labels, zero outside the validity mask.
struct LabelMap {
  std::vector<Tensor> iou;    // [rows_k, A]
  std::vector<Tensor> label;  // [rows_k, A]
};

inline LabelMap build_label_maps(const ModelConfig& cfg, const ClipGrid& window_grid,
                                 int real_clips, const TimeInterval& target) {
  if (!target.well_formed()) throw std::invalid_argument("build_label_maps: malformed target");
  const std::vector<Tensor> masks = make_scale_masks(cfg, real_clips);
  LabelMap out;
  for (int k = 0; k < cfg.scales; ++k) {
    const int stride = 1 << k;
    const int rows = scale_rows(cfg, k);
    Tensor o({rows, cfg.anchors});
    Tensor y({rows, cfg.anchors});
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < cfg.anchors; ++j) {
        if (masks[static_cast<std::size_t>(k)].at2(i, j) == 0.0) continue;
        const MomentCoord coord{i * stride, (j + 1) * stride - 1};
        const double iou = temporal_iou(coord_to_interval(coord, window_grid), target);
        o.at2(i, j) = iou;
        y.at2(i, j) = scaled_iou_label(iou);
      }
    }
    out.iou.push_back(std::move(o));
    out.label.push_back(std::move(y));
  }
  return out;
}

/// A training view into one video: N consecutive clips starting at `start`,
/// of which the first `real` hold data (the rest is zero padding).
struct TrainWindow {
  int start = 0;
  int real = 0;
};

/// Uniformly random window position; short videos take everything and pad.
inline TrainWindow sample_window(int total_clips, int window, Rng& rng) {
  if (total_clips < 1) throw std::invalid_argument("sample_window: total_clips must be >= 1");
  TrainWindow w;
  w.real = std::min(total_clips, window);
  const int slack = total_clips - window;
  w.start = slack > 0 ? static_cast<int>(rng.below(static_cast<std::uint64_t>(slack) + 1)) : 0;
  return w;
}

/// Adam with bias correction and no weight decay.
struct OptimState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments;  // name -> (m, v)
};

inline void adam_step(ParamSet& params, OptimState& state) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (const auto& [name, var] : params.all()) {
    if (!var->requires_grad) continue;
    Tensor& g = ensure_grad(*var);
    if (!g.all_finite()) throw std::runtime_error("adam_step: non-finite gradient in " + name);
    auto it = state.moments.find(name);
    if (it == state.moments.end())
      it = state.moments.emplace(name, std::make_pair(Tensor::zeros(g.shape()), Tensor::zeros(g.shape()))).first;
    Tensor& m = it->second.first;
    Tensor& v = it->second.second;
    Tensor& theta = var->value;
    for (std::int64_t i = 0; i < g.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      theta[i] -= state.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + state.eps);
    }
  }
}

struct TrainOptions {
  const Dataset* validation = nullptr;
  MetricSpec val_spec{{1}, {0.5, 0.7}};
  int val_every = 1;        // epochs between validation passes
  int val_max_queries = 0;  // 0 = all
  std::string log_path;     // append JSONL metric lines when non-empty
};

struct TrainResult {
  Model model;
  Checkpoint checkpoint;
  std::vector<double> epoch_loss;
  std::vector<std::string> metric_lines;
  std::vector<RankCell> final_ranks;
};

namespace detail {

inline Tensor window_features(const DatasetVideo& video, const TrainWindow& w, int window_clips) {
  Tensor out({window_clips, video.features.dim(1)});
  std::memcpy(out.data(), video.features.data() + std::int64_t(w.start) * video.features.dim(1),
              sizeof(double) * static_cast<std::size_t>(w.real) *
                  static_cast<std::size_t>(video.features.dim(1)));
  return out;
}

/// Target re-expressed relative to the window, clipped to the window's real
/// extent. Returns false when the clipped overlap keeps less than half of the
/// original target (that draw is skipped).
inline bool window_target(const TimeInterval& target, const TrainWindow& w, double clip_seconds,
                          TimeInterval* out) {
  const double w0 = w.start * clip_seconds;
  const double lo = std::max(target.start_s - w0, 0.0);
  const double hi = std::min(target.end_s - w0, w.real * clip_seconds);
  if (hi <= lo) return false;
  if ((hi - lo) / target.length() < 0.5) return false;
  *out = {lo, hi};
  return true;
}

}  // namespace detail

inline std::vector<RankCell> evaluate_rank(const Model& model, const Dataset& ds,
                                           const MetricSpec& spec, int max_queries = 0) {
  std::vector<std::vector<ScoredMoment>> preds;
  std::vector<TimeInterval> targets;
  const int top = *std::max_element(spec.top_n.begin(), spec.top_n.end());
  const std::size_t limit =
      max_queries > 0 ? std::min<std::size_t>(ds.samples.size(), static_cast<std::size_t>(max_queries))
                      : ds.samples.size();
  for (std::size_t i = 0; i < limit; ++i) {
    const auto& s = ds.samples[static_cast<std::size_t>(i)];
    const auto& video = ds.videos[static_cast<std::size_t>(s.video)];
    preds.push_back(localize(model, video.features, video.grid, s.token_ids, top));
    targets.push_back(s.target);
  }
  return rank_at(preds, targets, spec);
}

/// Epochs of shuffled mini-batches over randomly positioned windows, BCE on
/// the scaled-IoU labels, Adam updates. Deterministic given (config, rng).
inline TrainResult train(const Dataset& dataset, const ModelConfig& cfg, Rng& rng,
                         const TrainOptions& opts = {}) {
  cfg.validate();
  if (dataset.samples.empty()) throw std::invalid_argument("train: empty dataset");
  TrainResult result{Model(cfg, dataset.feature_dim(), rng), {}, {}, {}, {}};
  Model& model = result.model;
  OptimState optim;
  optim.lr = cfg.lr;

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(dataset.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);

    double loss_sum = 0.0;
    std::int64_t loss_count = 0;
    std::size_t cursor = 0;
    while (cursor < order.size()) {
      const std::size_t batch_end = std::min(cursor + static_cast<std::size_t>(cfg.batch), order.size());
      model.params.zero_grads();
      int in_batch = 0;
      for (std::size_t s = cursor; s < batch_end; ++s) {
        const DatasetSample& sample = dataset.samples[order[s]];
        const DatasetVideo& video = dataset.videos[static_cast<std::size_t>(sample.video)];
        const TrainWindow w = sample_window(video.grid.num_clips, cfg.window, rng);
        TimeInterval rel_target;
        if (!detail::window_target(sample.target, w, video.grid.clip_seconds, &rel_target)) continue;
        const ClipGrid wgrid{cfg.window, video.grid.clip_seconds, video.grid.frames_per_clip};
        const LabelMap labels = build_label_maps(cfg, wgrid, w.real, rel_target);

        Graph g(true);
        auto fw = model.forward(g, detail::window_features(video, w, cfg.window), sample.token_ids,
                                w.real, true);
        Var loss = g.masked_bce_mean(fw.scores, labels.label, fw.masks);
        const double lv = loss->value[0];
        if (!std::isfinite(lv)) throw std::runtime_error("train: loss diverged (non-finite)");
        loss_sum += lv;
        ++loss_count;
        ++in_batch;
        g.backward(loss);
      }
      if (in_batch > 0) {
        // Average the accumulated per-sample gradients over the batch.
        for (const auto& [name, var] : model.params.all())
          if (var->requires_grad && !var->grad.empty())
            for (std::int64_t i = 0; i < var->grad.size(); ++i) var->grad[i] /= in_batch;
        adam_step(model.params, optim);
      }
      cursor = batch_end;
    }

    const double epoch_loss = loss_count > 0 ? loss_sum / static_cast<double>(loss_count) : 0.0;
    result.epoch_loss.push_back(epoch_loss);

    nlohmann::json line;
    line["epoch"] = epoch;
    line["loss"] = epoch_loss;
    if (opts.validation && (epoch + 1) % std::max(1, opts.val_every) == 0) {
      result.final_ranks = evaluate_rank(model, *opts.validation, opts.val_spec, opts.val_max_queries);
      for (const auto& cell : result.final_ranks) {
        std::ostringstream key;
        key << "rank" << cell.n << "@" << cell.m;
        line[key.str()] = cell.percentage;
      }
    }
    line["wallclock_s"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.metric_lines.push_back(line.dump());
  }

  if (!opts.log_path.empty()) {
    std::ofstream f(opts.log_path, std::ios::app);
    if (!f) throw std::runtime_error(opts.log_path + ": cannot open metrics log");
    for (const auto& l : result.metric_lines) f << l << '\n';
  }
  result.checkpoint = checkpoint_from_model(model);
  return result;
}

}  // namespace m2d
