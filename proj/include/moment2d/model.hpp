#pragma once

#include <optional>
#include <string>
#include <vector>

#include "moment2d/graph.hpp"
#include "moment2d/lattice.hpp"
#include "moment2d/lstm.hpp"

namespace m2d {

enum class ExtractorKind { Pool, Conv };

/// All hyperparameters of the localization model plus run settings.
/// The compact defaults are sized for CPU experiments; the configuration file
/// accepts the full-size settings as well.
struct ModelConfig {
  int hidden = 64;    // H, LSTM hidden size per direction
  int window = 64;    // N, clips per training window
  int scales = 3;     // K
  int anchors = 8;    // A, duration bins per scale
  int kernel = 5;     // kappa, gated convolution kernel (odd)
  int layers = 2;     // L, gated convolution layers per scale
  int d_v = 64;       // clip feature width after encoding
  int d_f = 64;       // fused feature width
  int d_s = 300;      // word embedding width
  int vocab_size = 4096;
  int lstm_layers = 3;
  int head_layers = 1;
  bool use_batch_norm = true;  // stacked-convolution extractor only
  bool fusion_bias = true;
  bool share_scale_params = false;
  ExtractorKind extractor = ExtractorKind::Pool;

  double lr = 1e-4;
  int batch = 32;
  int epochs = 10;
  double nms_iou = 0.49;
  std::uint64_t seed = 1;

  LatticeGeometry geometry() const { return {MapKind::SparseMulti, window, anchors, scales}; }

  void validate() const {
    if (hidden < 1 || d_v < 1 || d_f < 1 || d_s < 1 || vocab_size < 1)
      throw std::invalid_argument("config: widths must be >= 1");
    if (window < 1 || scales < 1 || anchors < 1 || layers < 1 || lstm_layers < 1 || head_layers < 1)
      throw std::invalid_argument("config: counts must be >= 1");
    if (kernel < 1 || kernel % 2 == 0)
      throw std::invalid_argument("config: kernel must be odd for symmetric zero padding");
    if (window % (1 << (scales - 1)) != 0)
      throw std::invalid_argument("config: window must be divisible by 2^(scales-1)");
    if (extractor == ExtractorKind::Conv) {
      if (anchors % 2 != 0) throw std::invalid_argument("config: conv extractor needs even anchors");
      if (window < anchors) throw std::invalid_argument("config: conv extractor needs window >= anchors");
    }
  }
};

inline int scale_rows(const ModelConfig& cfg, int k) { return cfg.window >> k; }

/// Validity masks per scale, shaped [rows, anchors]. A cell is valid when its
/// moment fits the window triangle and starts on a real (non padded) clip.
inline std::vector<Tensor> make_scale_masks(const ModelConfig& cfg, int real_clips) {
  std::vector<Tensor> masks;
  masks.reserve(static_cast<std::size_t>(cfg.scales));
  for (int k = 0; k < cfg.scales; ++k) {
    const int stride = 1 << k;
    const int rows = scale_rows(cfg, k);
    Tensor m({rows, cfg.anchors});
    for (int i = 0; i < rows; ++i) {
      const int a = i * stride;
      for (int j = 0; j < cfg.anchors; ++j) {
        const int dur = (j + 1) * stride;
        m.at2(i, j) = (a + dur <= cfg.window && a < real_clips) ? 1.0 : 0.0;
      }
    }
    masks.push_back(std::move(m));
  }
  return masks;
}

/// One layer of the stacked-convolution extractor with its receptive-field
/// bookkeeping: output column o covers clips [o*spacing, o*spacing + rf_len).
struct ConvLayerSpec {
  int kernel = 1;
  int stride = 1;
  int rf_len = 1;   // covered clips (duration)
  int spacing = 1;  // clip distance between consecutive outputs
  int out_len = 0;  // output columns
};

/// Builds the stacked-convolution schedule: kernel 1 stride 1 first, kernel 3
/// stride 2 at layer indices (i+1)*A/2 for 1 <= i <= K-1, kernel 2 stride 1
/// elsewhere, (K+1)*A/2 layers in total. Layers whose output would be empty
/// are dropped (their durations exceed the window).
inline std::vector<ConvLayerSpec> conv_extractor_schedule(int window, int anchors, int scales) {
  const int total = (scales + 1) * anchors / 2;
  std::vector<ConvLayerSpec> specs;
  int rf = 1, spacing = 1, out = window;
  specs.push_back({1, 1, 1, 1, window});
  for (int j = 1; j < total; ++j) {
    int kernel = 2, stride = 1;
    if (j >= anchors && j % (anchors / 2) == 0) {
      const int band = 2 * j / anchors - 1;
      if (band >= 1 && band <= scales - 1) {
        kernel = 3;
        stride = 2;
      }
    }
    rf = rf + (kernel - 1) * spacing;
    if (out < kernel) break;  // no column fits the window anymore
    out = (out - kernel) / stride + 1;
    spacing *= stride;
    specs.push_back({kernel, stride, rf, spacing, out});
  }
  return specs;
}

/// Lattice coordinates emitted by one schedule layer.
inline std::vector<MomentCoord> conv_layer_coords(const ConvLayerSpec& spec) {
  std::vector<MomentCoord> out;
  out.reserve(static_cast<std::size_t>(spec.out_len));
  for (int o = 0; o < spec.out_len; ++o) out.push_back({o * spec.spacing, spec.rf_len - 1});
  return out;
}

struct ScoredMoment {
  TimeInterval interval;
  double score = 0.0;
  int scale = 0;
  MomentCoord coord;
};

/// The full localization model: query encoder, clip encoder, moment feature
/// extractor, fusion, and the per-scale gated-convolution scoring networks.
class Model {
 public:
  ModelConfig cfg;
  ParamSet params;

  Model() = default;

  Model(const ModelConfig& config, int d_raw, Rng& rng) { init(config, d_raw, rng); }

  void init(const ModelConfig& config, int d_raw, Rng& rng) {
    config.validate();
    cfg = config;
    d_raw_ = d_raw;
    params = ParamSet();

    params.add("embed.w", uniform_tensor({cfg.vocab_size, cfg.d_s}, 0.1, rng));
    lstm_ = make_bilstm_params(params, "lstm", cfg.lstm_layers, cfg.d_s, cfg.hidden, rng);

    // Identity-biased projections keep the raw feature pattern visible to the
    // scoring stack at initialization, which conditions the first epochs well.
    Tensor clip_w = uniform_tensor({cfg.d_v, d_raw}, 0.3 / std::sqrt(double(d_raw)), rng);
    for (int i = 0; i < std::min(cfg.d_v, d_raw); ++i) clip_w.at2(i, i) += 1.0;
    params.add("clip.w", std::move(clip_w));
    params.add("clip.b", Tensor::zeros({cfg.d_v}));

    params.add("fuse.sent.w",
               uniform_tensor({cfg.d_f, 2 * cfg.hidden}, 1.0 / std::sqrt(2.0 * cfg.hidden), rng));
    Tensor fuse_map = uniform_tensor({cfg.d_f, cfg.d_v}, 0.3 / std::sqrt(double(cfg.d_v)), rng);
    for (int i = 0; i < std::min(cfg.d_f, cfg.d_v); ++i) fuse_map.at2(i, i) += 1.0;
    params.add("fuse.map.w", std::move(fuse_map));
    if (cfg.fusion_bias) {
      params.add("fuse.sent.b", Tensor::zeros({cfg.d_f}));
      params.add("fuse.map.b", Tensor::zeros({cfg.d_f}));
    }

    if (cfg.extractor == ExtractorKind::Conv) {
      schedule_ = conv_extractor_schedule(cfg.window, cfg.anchors, cfg.scales);
      verify_schedule();
      for (std::size_t j = 0; j < schedule_.size(); ++j) {
        const auto& s = schedule_[j];
        const std::string base = "xconv.l" + std::to_string(j);
        // Averaging-plus-noise start: the stack begins as a smoothing pyramid
        // over the clip axis, so moment features reflect span coverage
        // immediately and the cascade trains from a well-conditioned point.
        Tensor w = uniform_tensor({s.kernel, cfg.d_v, cfg.d_v},
                                  0.3 / std::sqrt(double(s.kernel * cfg.d_v)), rng);
        for (int t = 0; t < s.kernel; ++t)
          for (int c = 0; c < cfg.d_v; ++c) w[(t * cfg.d_v + c) * cfg.d_v + c] += 1.0 / s.kernel;
        params.add(base + ".w", std::move(w));
        params.add(base + ".b", Tensor::zeros({cfg.d_v}));
        if (cfg.use_batch_norm) {
          params.add(base + ".bn.gamma", Tensor::full({cfg.d_v}, 1.0));
          params.add(base + ".bn.beta", Tensor::zeros({cfg.d_v}));
          params.add(base + ".bn.rmean", Tensor::zeros({cfg.d_v}), false);
          params.add(base + ".bn.rvar", Tensor::full({cfg.d_v}, 1.0), false);
          params.add(base + ".bn.count", Tensor::zeros({1}), false);
        }
      }
    }

    const double conv_bound = 1.0 / std::sqrt(double(cfg.kernel * cfg.kernel * cfg.d_f));
    const int param_scales = cfg.share_scale_params ? 1 : cfg.scales;
    const int center_tap = (cfg.kernel / 2) * cfg.kernel + cfg.kernel / 2;
    for (int k = 0; k < param_scales; ++k) {
      const std::string sk = scale_prefix(k);
      for (int l = 0; l < cfg.layers; ++l) {
        const std::string base = sk + ".l" + std::to_string(l);
        for (const char* side : {".f", ".g"}) {
          Tensor w = uniform_tensor({cfg.kernel, cfg.kernel, cfg.d_f, cfg.d_f}, conv_bound, rng);
          // Feature branch starts near a damped identity so the fused pattern
          // reaches the head before the context kernels are learned.
          if (side[1] == 'f')
            for (int c = 0; c < cfg.d_f; ++c)
              w[(std::int64_t(center_tap) * cfg.d_f + c) * cfg.d_f + c] += 0.5;
          params.add(base + side + ".w", std::move(w));
          // Gates start mostly open.
          params.add(base + side + ".b",
                     side[1] == 'g' ? Tensor::full({cfg.d_f}, 1.0) : Tensor::zeros({cfg.d_f}));
        }
      }
      for (int h = 0; h < cfg.head_layers; ++h) {
        const int dout = h + 1 == cfg.head_layers ? 1 : cfg.d_f;
        Tensor w = uniform_tensor({dout, cfg.d_f}, 0.3 / std::sqrt(double(cfg.d_f)), rng);
        // Final head leans positive: a fused map whose channels agree in sign
        // (the multiplicative-match pattern) scores high from the start.
        if (h + 1 == cfg.head_layers)
          for (int i = 0; i < cfg.d_f; ++i) w[i] += 1.0 / std::sqrt(double(cfg.d_f));
        params.add(sk + ".head" + std::to_string(h) + ".w", std::move(w));
        params.add(sk + ".head" + std::to_string(h) + ".b", Tensor::zeros({dout}));
      }
    }
  }

  int d_raw() const { return d_raw_; }
  const std::vector<ConvLayerSpec>& extractor_schedule() const { return schedule_; }

  /// Token ids -> [1, 2H] sentence feature.
  Var encode_query(Graph& g, const std::vector<int>& token_ids) const {
    if (token_ids.empty()) throw std::invalid_argument("encode_query: empty token list");
    return bilstm_encode(g, g.embedding(params.get("embed.w"), token_ids), lstm_);
  }

  /// Raw clip features [N, d_raw] -> encoded [N, d_v].
  Var encode_clips(Graph& g, const Tensor& raw) const {
    if (raw.rank() != 2 || raw.dim(1) != d_raw_)
      throw std::invalid_argument("encode_clips: expected [N," + std::to_string(d_raw_) +
                                  "], got " + raw.shape_str());
    return g.linear(g.constant(raw), params.get("clip.w"), params.get("clip.b"));
  }

  /// Moment feature maps, one [rows_k, A, d_v] tensor per scale.
  std::vector<Var> extract_moments(Graph& g, const Var& clips, const std::vector<Tensor>& masks,
                                   bool train, bool linear_test_mode = false) const {
    return cfg.extractor == ExtractorKind::Pool ? extract_pool(g, clips, masks)
                                                : extract_conv(g, clips, masks, train, linear_test_mode);
  }

  std::vector<Var> extract_pool(Graph& g, const Var& clips, const std::vector<Tensor>& masks) const {
    std::vector<Var> maps;
    for (int k = 0; k < cfg.scales; ++k)
      maps.push_back(g.span_max_grid(clips, 1 << k, cfg.anchors, scale_rows(cfg, k),
                                     masks[static_cast<std::size_t>(k)]));
    return maps;
  }

  std::vector<Var> extract_conv(Graph& g, const Var& clips, const std::vector<Tensor>& masks,
                                bool train, bool linear_test_mode = false) const {
    if (schedule_.empty()) throw std::logic_error("extract_conv: model built without conv extractor");
    std::vector<Var> layer_outs;
    layer_outs.reserve(schedule_.size());
    if (linear_test_mode) {
      for (const auto& s : schedule_) {
        std::vector<std::pair<std::int32_t, std::int32_t>> spans;
        spans.reserve(static_cast<std::size_t>(s.out_len));
        for (int o = 0; o < s.out_len; ++o) spans.emplace_back(o * s.spacing, s.rf_len);
        layer_outs.push_back(g.span_mean_rows(clips, std::move(spans)));
      }
    } else {
      Var x = clips;
      for (std::size_t j = 0; j < schedule_.size(); ++j) {
        const auto& s = schedule_[j];
        const std::string base = "xconv.l" + std::to_string(j);
        Var y = g.conv1d(x, params.get(base + ".w"), params.get(base + ".b"), s.stride);
        if (cfg.use_batch_norm)
          y = g.batch_norm(y, params.get(base + ".bn.gamma"), params.get(base + ".bn.beta"),
                           params.get(base + ".bn.rmean"), params.get(base + ".bn.rvar"),
                           params.get(base + ".bn.count"), train);
        y = g.tanh(y);
        layer_outs.push_back(y);
        x = y;
      }
    }

    // Route each scale/duration bin to the layer that produced that duration.
    std::vector<Var> maps;
    for (int k = 0; k < cfg.scales; ++k) {
      const int stride = 1 << k;
      const int rows = scale_rows(cfg, k);
      std::vector<std::pair<std::int32_t, std::int32_t>> refs(
          static_cast<std::size_t>(rows * cfg.anchors), {-1, -1});
      for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cfg.anchors; ++j) {
          if (masks[static_cast<std::size_t>(k)].at2(i, j) == 0.0) continue;
          const int dur = (j + 1) * stride;
          const int layer = layer_for_duration(dur);
          const int a = i * stride;
          refs[static_cast<std::size_t>(i * cfg.anchors + j)] = {
              static_cast<std::int32_t>(layer),
              static_cast<std::int32_t>(a / schedule_[static_cast<std::size_t>(layer)].spacing)};
        }
      }
      maps.push_back(g.assemble_map(layer_outs, std::move(refs), rows, cfg.anchors));
    }
    return maps;
  }

  /// Fuses moment maps with the sentence feature: per position,
  /// l2norm(project(sentence) * project(feature)). Invalid cells stay zero.
  std::vector<Var> fuse(Graph& g, const std::vector<Var>& maps, const Var& sentence,
                        const std::vector<Tensor>& masks) const {
    const Var sb = cfg.fusion_bias ? params.get("fuse.sent.b") : nullptr;
    const Var mb = cfg.fusion_bias ? params.get("fuse.map.b") : nullptr;
    Var sent_proj = g.linear(sentence, params.get("fuse.sent.w"), sb);
    std::vector<Var> fused;
    for (std::size_t k = 0; k < maps.size(); ++k) {
      Var m = g.linear(maps[k], params.get("fuse.map.w"), mb);
      m = g.broadcast_row_mul(m, sent_proj);
      m = g.l2norm_rows(m);
      fused.push_back(g.mask_rows(m, masks[k]));
    }
    return fused;
  }

  /// Per-scale gated-convolution stacks plus the scoring head. Scores lie in
  /// (0,1) on valid cells and are exactly zero elsewhere; the mask is
  /// re-applied after every layer. `layer_trace`, when given, receives the
  /// value of every intermediate map (for mask auditing).
  std::vector<Var> tan_forward(Graph& g, const std::vector<Var>& fused,
                               const std::vector<Tensor>& masks,
                               std::vector<std::vector<Tensor>>* layer_trace = nullptr) const {
    const std::int64_t pad = (cfg.kernel - 1) / 2;
    std::vector<Var> scores;
    for (int k = 0; k < cfg.scales; ++k) {
      const std::string sk = scale_prefix(k);
      Var x = fused[static_cast<std::size_t>(k)];
      if (layer_trace) layer_trace->emplace_back();
      for (int l = 0; l < cfg.layers; ++l) {
        const std::string base = sk + ".l" + std::to_string(l);
        x = g.gated_conv2d(x, params.get(base + ".f.w"), params.get(base + ".f.b"),
                           params.get(base + ".g.w"), params.get(base + ".g.b"), pad, pad);
        x = g.mask_rows(x, masks[static_cast<std::size_t>(k)]);
        if (layer_trace) layer_trace->back().push_back(x->value);
      }
      for (int h = 0; h < cfg.head_layers; ++h) {
        x = g.linear(x, params.get(sk + ".head" + std::to_string(h) + ".w"),
                     params.get(sk + ".head" + std::to_string(h) + ".b"));
        if (h + 1 < cfg.head_layers) x = g.tanh(x);
      }
      x = g.mask_rows(g.sigmoid(x), masks[static_cast<std::size_t>(k)]);
      if (layer_trace) layer_trace->back().push_back(x->value);
      scores.push_back(x);
    }
    return scores;
  }

  struct ForwardOut {
    std::vector<Var> scores;  // per scale, [rows_k, A, 1]
    std::vector<Tensor> masks;
  };

  /// End-to-end scoring of one window against one query.
  ForwardOut forward(Graph& g, const Tensor& raw_clips, const std::vector<int>& token_ids,
                     int real_clips, bool train,
                     std::vector<std::vector<Tensor>>* layer_trace = nullptr) const {
    if (raw_clips.dim(0) != cfg.window)
      throw std::invalid_argument("forward: expected " + std::to_string(cfg.window) + " clips, got " +
                                  std::to_string(raw_clips.dim(0)));
    ForwardOut out;
    out.masks = make_scale_masks(cfg, real_clips);
    Var sentence = encode_query(g, token_ids);
    Var clips = encode_clips(g, raw_clips);
    std::vector<Var> maps = extract_moments(g, clips, out.masks, train);
    std::vector<Var> fused = fuse(g, maps, sentence, out.masks);
    out.scores = tan_forward(g, fused, out.masks, layer_trace);
    return out;
  }

 private:
  std::string scale_prefix(int k) const {
    return cfg.share_scale_params ? std::string("tan.sh") : "tan.s" + std::to_string(k);
  }

  int layer_for_duration(int dur) const {
    for (std::size_t j = 0; j < schedule_.size(); ++j)
      if (schedule_[j].rf_len == dur) return static_cast<int>(j);
    throw std::logic_error("extract_conv: no layer produces duration " + std::to_string(dur));
  }

  /// The schedule must land exactly on the multi-scale candidate grid.
  void verify_schedule() const {
    const CandidateSet lattice = enumerate_multiscale(cfg.window, cfg.anchors, cfg.scales);
    std::vector<MomentCoord> expect = flatten_dedup(lattice);
    std::vector<MomentCoord> got;
    for (const auto& s : schedule_) {
      const auto coords = conv_layer_coords(s);
      got.insert(got.end(), coords.begin(), coords.end());
    }
    std::sort(got.begin(), got.end());
    got.erase(std::unique(got.begin(), got.end()), got.end());
    if (got != expect)
      throw std::runtime_error("extract_conv: schedule coordinates do not match the candidate grid");
  }

  int d_raw_ = 0;
  BiLstmParams lstm_;
  std::vector<ConvLayerSpec> schedule_;
};

/// Collapses per-scale score maps to one score per distinct candidate,
/// keeping the maximum where scales overlap. Every valid candidate appears
/// exactly once; ties keep the finest scale.
inline std::vector<ScoredMoment> recover_scores(const std::vector<Tensor>& score_maps,
                                                const ModelConfig& cfg, const ClipGrid& window_grid,
                                                int real_clips) {
  if (static_cast<int>(score_maps.size()) != cfg.scales)
    throw std::invalid_argument("recover_scores: expected one map per scale");
  const std::vector<Tensor> masks = make_scale_masks(cfg, real_clips);
  std::vector<ScoredMoment> out;
  // start index -> anchor duration -> slot in `out`, dense over the window.
  std::vector<std::int32_t> slot(static_cast<std::size_t>(cfg.window) * static_cast<std::size_t>(cfg.window), -1);
  for (int k = 0; k < cfg.scales; ++k) {
    const Tensor& map = score_maps[static_cast<std::size_t>(k)];
    const int rows = scale_rows(cfg, k);
    if (map.dim(0) != rows || map.dim(1) != cfg.anchors)
      throw std::invalid_argument("recover_scores: score map shape mismatch at scale " +
                                  std::to_string(k));
    const int stride = 1 << k;
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < cfg.anchors; ++j) {
        if (masks[static_cast<std::size_t>(k)].at2(i, j) == 0.0) continue;
        const int a = i * stride;
        const int b = (j + 1) * stride - 1;
        const double score = map.at3(i, j, 0);
        auto& s = slot[static_cast<std::size_t>(a) * static_cast<std::size_t>(cfg.window) + static_cast<std::size_t>(b)];
        if (s < 0) {
          s = static_cast<std::int32_t>(out.size());
          MomentCoord coord{a, b};
          out.push_back({coord_to_interval(coord, window_grid), score, k, coord});
        } else if (score > out[static_cast<std::size_t>(s)].score) {
          out[static_cast<std::size_t>(s)].score = score;
          out[static_cast<std::size_t>(s)].scale = k;
        }
      }
    }
  }
  return out;
}

}  // namespace m2d
