#include <doctest.h>

#include "moment2d/gradcheck.hpp"
#include "moment2d/lstm.hpp"

using namespace m2d;

namespace {

Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = scale * rng.gaussian();
  return t;
}

BiLstmParams zero_params(ParamSet& ps, int layers, int d_in, int hidden) {
  Rng rng(1);
  BiLstmParams p = make_bilstm_params(ps, "z", layers, d_in, hidden, rng);
  for (auto& layer : p.layers)
    for (auto* dir : {&layer.fwd, &layer.bwd}) {
      dir->wx->value.fill(0.0);
      dir->wh->value.fill(0.0);
      dir->b->value.fill(0.0);
    }
  return p;
}

}  // namespace

TEST_CASE("bilstm with zero parameters emits a zero sentence feature") {
  ParamSet ps;
  BiLstmParams p = zero_params(ps, 3, 5, 4);
  Graph g(false);
  Rng rng(2);
  Var seq = g.constant(random_tensor({6, 5}, rng));
  Var f = bilstm_encode(g, seq, p);
  REQUIRE(f->value.size() == 8);
  for (std::int64_t i = 0; i < f->value.size(); ++i) CHECK(f->value[i] == 0.0);
}

TEST_CASE("single-token query: the average equals that timestep's output") {
  ParamSet ps;
  Rng rng(3);
  BiLstmParams p = make_bilstm_params(ps, "l", 2, 5, 4, rng);
  Graph g(false);
  Var seq = g.constant(random_tensor({1, 5}, rng));
  Var f = bilstm_encode(g, seq, p);

  // Re-run the stack manually and compare with the only timestep.
  Var x = seq;
  for (const auto& layer : p.layers) {
    Var fw = lstm_direction(g, x, layer.fwd, p.hidden);
    Var bw = g.reverse_rows(lstm_direction(g, g.reverse_rows(x), layer.bwd, p.hidden));
    x = g.concat_cols(fw, bw);
  }
  REQUIRE(x->value.dim(0) == 1);
  for (std::int64_t i = 0; i < f->value.size(); ++i)
    CHECK(f->value[i] == doctest::Approx(x->value[i]));
}

TEST_CASE("token order changes the encoding") {
  ParamSet ps;
  Rng rng(5);
  BiLstmParams p = make_bilstm_params(ps, "l", 3, 4, 6, rng);
  Graph g(false);
  Tensor tok_a = random_tensor({1, 4}, rng);
  Tensor tok_b = random_tensor({1, 4}, rng);
  Tensor ab({2, 4}), ba({2, 4});
  for (int i = 0; i < 4; ++i) {
    ab.at2(0, i) = tok_a[i];
    ab.at2(1, i) = tok_b[i];
    ba.at2(0, i) = tok_b[i];
    ba.at2(1, i) = tok_a[i];
  }
  Var f_ab = bilstm_encode(g, g.constant(ab), p);
  Var f_ba = bilstm_encode(g, g.constant(ba), p);
  double diff = 0;
  for (std::int64_t i = 0; i < f_ab->value.size(); ++i)
    diff = std::max(diff, std::abs(f_ab->value[i] - f_ba->value[i]));
  CHECK(diff > 1e-6);
}

TEST_CASE("forget-gate bias starts at one, everything else within bounds") {
  ParamSet ps;
  Rng rng(8);
  const int hidden = 8;
  BiLstmParams p = make_bilstm_params(ps, "l", 3, 10, hidden, rng);
  const double bound = 1.0 / std::sqrt(double(hidden));
  for (const auto& layer : p.layers)
    for (const auto* dir : {&layer.fwd, &layer.bwd}) {
      for (int i = hidden; i < 2 * hidden; ++i) CHECK(dir->b->value[i] == 1.0);
      for (int i = 0; i < hidden; ++i) CHECK(std::abs(dir->b->value[i]) <= bound);
      for (std::int64_t i = 0; i < dir->wx->value.size(); ++i)
        CHECK(std::abs(dir->wx->value[i]) <= bound);
    }
}

TEST_CASE("bilstm rejects an empty sequence") {
  ParamSet ps;
  Rng rng(6);
  BiLstmParams p = make_bilstm_params(ps, "l", 1, 3, 2, rng);
  Graph g(false);
  Var seq = g.constant(Tensor::zeros({0, 3}));
  CHECK_THROWS_AS(bilstm_encode(g, seq, p), std::invalid_argument);
}

TEST_CASE("bilstm gradients pass the finite-difference oracle") {
  ParamSet ps;
  Rng rng(9);
  BiLstmParams p = make_bilstm_params(ps, "l", 2, 3, 3, rng);
  Var seq = make_leaf(random_tensor({4, 3}, rng, 0.5), true);
  std::vector<Var> wrt{seq};
  for (const auto& [name, v] : ps.all()) wrt.push_back(v);
  const double err = grad_check_exhaustive(
      [&](Graph& g) {
        Rng pr(77);
        Var f = bilstm_encode(g, seq, p);
        Tensor w(f->value.shape());
        for (std::int64_t i = 0; i < w.size(); ++i) w[i] = pr.uniform(-1, 1);
        return g.weighted_sum(f, std::move(w));
      },
      wrt);
  CHECK(err < 1e-4);
}
