#pragma once

#include <string>
#include <vector>

#include "moment2d/graph.hpp"

namespace m2d {

/// One LSTM direction: packed gate weights in (input, forget, cell, output)
/// order, so wx is [4H, d_in], wh is [4H, H] and b is [4H].
struct LstmDirParams {
  Var wx, wh, b;
};

struct LstmLayerParams {
  LstmDirParams fwd, bwd;
};

struct BiLstmParams {
  std::vector<LstmLayerParams> layers;
  int hidden = 0;
};

/// Registers bi-LSTM parameters. Everything is uniform in +-1/sqrt(H) except
/// the forget-gate bias, which starts at exactly 1.
inline BiLstmParams make_bilstm_params(ParamSet& ps, const std::string& prefix, int num_layers,
                                       int d_in, int hidden, Rng& rng) {
  BiLstmParams out;
  out.hidden = hidden;
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (int l = 0; l < num_layers; ++l) {
    const int din = l == 0 ? d_in : 2 * hidden;
    LstmLayerParams layer;
    for (int dir = 0; dir < 2; ++dir) {
      const std::string base = prefix + ".l" + std::to_string(l) + (dir == 0 ? ".f" : ".b");
      Tensor b = uniform_tensor({4 * hidden}, bound, rng);
      for (int i = hidden; i < 2 * hidden; ++i) b[i] = 1.0;
      LstmDirParams p{
          ps.add(base + ".wx", uniform_tensor({4 * hidden, din}, bound, rng)),
          ps.add(base + ".wh", uniform_tensor({4 * hidden, hidden}, bound, rng)),
          ps.add(base + ".bias", std::move(b)),
      };
      if (dir == 0)
        layer.fwd = p;
      else
        layer.bwd = p;
    }
    out.layers.push_back(layer);
  }
  return out;
}

/// Runs one direction over seq [T, d_in], returning the hidden sequence [T, H].
inline Var lstm_direction(Graph& g, const Var& seq, const LstmDirParams& p, int hidden) {
  const std::int64_t steps = seq->value.dim(0);
  Var h = g.constant(Tensor::zeros({1, hidden}));
  Var c = g.constant(Tensor::zeros({1, hidden}));
  std::vector<Var> outputs;
  outputs.reserve(static_cast<std::size_t>(steps));
  for (std::int64_t t = 0; t < steps; ++t) {
    Var xt = g.slice_rows(seq, t, 1);
    Var z = g.add(g.linear(xt, p.wx, p.b), g.linear(h, p.wh, nullptr));
    Var gi = g.sigmoid(g.slice_cols(z, 0, hidden));
    Var gf = g.sigmoid(g.slice_cols(z, hidden, hidden));
    Var gc = g.tanh(g.slice_cols(z, 2 * hidden, hidden));
    Var go = g.sigmoid(g.slice_cols(z, 3 * hidden, hidden));
    c = g.add(g.hadamard(gf, c), g.hadamard(gi, gc));
    h = g.hadamard(go, g.tanh(c));
    outputs.push_back(h);
  }
  return g.stack_rows(outputs);
}

/// Bidirectional encoder: per layer the two direction outputs are
/// concatenated and fed to the next layer; the final layer's output sequence
/// is averaged over time, giving a [1, 2H] sentence feature.
inline Var bilstm_encode(Graph& g, const Var& seq, const BiLstmParams& params) {
  if (seq->value.dim(0) < 1) throw std::invalid_argument("bilstm_encode: empty sequence");
  Var x = seq;
  for (const auto& layer : params.layers) {
    Var f = lstm_direction(g, x, layer.fwd, params.hidden);
    Var b = g.reverse_rows(lstm_direction(g, g.reverse_rows(x), layer.bwd, params.hidden));
    x = g.concat_cols(f, b);
  }
  return g.mean_rows(x);
}

}  // namespace m2d
