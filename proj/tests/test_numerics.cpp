#include <doctest.h>

#include "moment2d/gradcheck.hpp"
#include "moment2d/graph.hpp"
#include "moment2d/kernels.hpp"

using namespace m2d;

namespace {

Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = scale * rng.gaussian();
  return t;
}

}  // namespace

TEST_CASE("linear forward basics") {
  Graph g(false);
  SUBCASE("identity weights pass through") {
    Var x = g.constant(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
    Var w = g.constant(Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
    Var y = g.linear(x, w, nullptr);
    for (std::int64_t i = 0; i < 6; ++i) CHECK(y->value[i] == doctest::Approx(x->value[i]));
  }
  SUBCASE("hand-computed row") {
    Var x = g.constant(Tensor::from({1, 2}, {1, 2}));
    Var w = g.constant(Tensor::from({2, 2}, {1, 1, 0, 1}));
    Var b = g.constant(Tensor::from({2}, {0, 1}));
    Var y = g.linear(x, w, b);
    CHECK(y->value[0] == doctest::Approx(3.0));
    CHECK(y->value[1] == doctest::Approx(3.0));
  }
  SUBCASE("zero input broadcasts the bias") {
    Var x = g.constant(Tensor::zeros({4, 3}));
    Rng rng(5);
    Var w = g.constant(random_tensor({2, 3}, rng));
    Var b = g.constant(Tensor::from({2}, {0.5, -1.5}));
    Var y = g.linear(x, w, b);
    for (std::int64_t r = 0; r < 4; ++r) {
      CHECK(y->value.at2(r, 0) == doctest::Approx(0.5));
      CHECK(y->value.at2(r, 1) == doctest::Approx(-1.5));
    }
  }
  SUBCASE("shape mismatch is rejected") {
    Var x = g.constant(Tensor::zeros({2, 3}));
    Var w = g.constant(Tensor::zeros({2, 4}));
    CHECK_THROWS_AS(g.linear(x, w, nullptr), std::invalid_argument);
  }
}

TEST_CASE("conv forward basics") {
  Graph g(false);
  SUBCASE("1x1 kernel of weight one is the identity") {
    Rng rng(1);
    Var x = g.constant(random_tensor({5, 1}, rng));
    Var w = g.constant(Tensor::from({1, 1, 1}, {1.0}));
    Var y = g.conv1d(x, w, nullptr, 1);
    for (std::int64_t i = 0; i < 5; ++i) CHECK(y->value[i] == doctest::Approx(x->value[i]));
  }
  SUBCASE("sliding sum") {
    Var x = g.constant(Tensor::from({3, 1}, {1, 2, 3}));
    Var w = g.constant(Tensor::from({2, 1, 1}, {1, 1}));
    Var y = g.conv1d(x, w, nullptr, 1);
    REQUIRE(y->value.dim(0) == 2);
    CHECK(y->value[0] == doctest::Approx(3.0));
    CHECK(y->value[1] == doctest::Approx(5.0));
  }
  SUBCASE("zero input maps to the bias, or zero without one") {
    Rng rng(2);
    Var x = g.constant(Tensor::zeros({6, 4, 3}));
    Var w = g.constant(random_tensor({3, 3, 3, 2}, rng));
    Var y = g.conv2d(x, w, nullptr, 1, 1, 1, 1);
    for (std::int64_t i = 0; i < y->value.size(); ++i) CHECK(y->value[i] == 0.0);
    Var b = g.constant(Tensor::from({2}, {0.25, -4.0}));
    Var yb = g.conv2d(x, w, b, 1, 1, 1, 1);
    for (std::int64_t i = 0; i < yb->value.size(); i += 2) {
      CHECK(yb->value[i] == doctest::Approx(0.25));
      CHECK(yb->value[i + 1] == doctest::Approx(-4.0));
    }
  }
  SUBCASE("output extent below one is rejected") {
    Var x = g.constant(Tensor::zeros({2, 1}));
    Var w = g.constant(Tensor::zeros({5, 1, 1}));
    CHECK_THROWS_AS(g.conv1d(x, w, nullptr, 1), std::invalid_argument);
  }
  SUBCASE("output extent formula") {
    CHECK(conv_out_extent(10, 3, 2, 1, 0) == 4);
    CHECK(conv_out_extent(10, 3, 1, 2, 0) == 6);
    CHECK(conv_out_extent(10, 3, 1, 1, 1) == 10);
  }
}

TEST_CASE("gated convolution limits") {
  Rng rng(7);
  Graph g(false);
  Var x = g.constant(random_tensor({6, 5, 4}, rng));
  Var zeros_w = g.constant(Tensor::zeros({3, 3, 4, 4}));
  Var zeros_b = g.constant(Tensor::zeros({4}));

  SUBCASE("all-zero parameters give an all-zero map") {
    Var y = g.gated_conv2d(x, zeros_w, zeros_b, zeros_w, zeros_b, 1, 1);
    for (std::int64_t i = 0; i < y->value.size(); ++i) CHECK(y->value[i] == 0.0);
  }
  SUBCASE("saturated gate passes tanh of the feature branch") {
    Var wf = g.constant(random_tensor({3, 3, 4, 4}, rng, 0.3));
    Var bf = g.constant(random_tensor({4}, rng, 0.1));
    Var gate_hi = g.constant(Tensor::full({4}, 20.0));
    Var y = g.gated_conv2d(x, wf, bf, zeros_w, gate_hi, 1, 1);
    Var f = g.tanh(g.conv2d(x, wf, bf, 1, 1, 1, 1));
    for (std::int64_t i = 0; i < y->value.size(); ++i)
      CHECK(std::abs(y->value[i] - f->value[i]) < 1e-6);
  }
  SUBCASE("a large negative gate shuts the layer off") {
    Var wf = g.constant(random_tensor({3, 3, 4, 4}, rng, 0.3));
    Var bf = g.constant(random_tensor({4}, rng, 0.1));
    Var gate_lo = g.constant(Tensor::full({4}, -20.0));
    Var y = g.gated_conv2d(x, wf, bf, zeros_w, gate_lo, 1, 1);
    for (std::int64_t i = 0; i < y->value.size(); ++i) CHECK(std::abs(y->value[i]) < 1e-4);
  }
}

TEST_CASE("batch_norm forward behavior") {
  Rng rng(11);
  Graph g(false);
  auto mk_bn_state = [&](int c) {
    return std::tuple<Var, Var, Var>{make_leaf(Tensor::zeros({c}), false),
                                     make_leaf(Tensor::full({c}, 1.0), false),
                                     make_leaf(Tensor::zeros({1}), false)};
  };

  SUBCASE("a normalized batch is the fixed point") {
    // Mean zero per channel and biased variance 1 - eps, so the eps term
    // restores exactly unit scaling.
    const int rows = 64, c = 3;
    Tensor x({rows, c});
    for (std::int64_t i = 0; i < x.size(); ++i) x[i] = rng.gaussian();
    for (int ch = 0; ch < c; ++ch) {
      double mean = 0, var = 0;
      for (int r = 0; r < rows; ++r) mean += x.at2(r, ch);
      mean /= rows;
      for (int r = 0; r < rows; ++r) var += (x.at2(r, ch) - mean) * (x.at2(r, ch) - mean);
      var /= rows;
      const double target = std::sqrt((1.0 - 1e-5) / var);
      for (int r = 0; r < rows; ++r) x.at2(r, ch) = (x.at2(r, ch) - mean) * target;
    }
    auto [rm, rv, rc] = mk_bn_state(c);
    Var xv = g.constant(x);
    Var y = g.batch_norm(xv, g.constant(Tensor::full({c}, 1.0)), g.constant(Tensor::zeros({c})), rm,
                         rv, rc, true);
    for (std::int64_t i = 0; i < x.size(); ++i)
      CHECK(std::abs(y->value[i] - x[i]) < 1e-6);
  }
  SUBCASE("gamma zero collapses to beta") {
    auto [rm, rv, rc] = mk_bn_state(2);
    Var x = g.constant(random_tensor({5, 2}, rng));
    Var y = g.batch_norm(x, g.constant(Tensor::zeros({2})), g.constant(Tensor::from({2}, {3, -7})),
                         rm, rv, rc, true);
    for (std::int64_t r = 0; r < 5; ++r) {
      CHECK(y->value.at2(r, 0) == doctest::Approx(3.0));
      CHECK(y->value.at2(r, 1) == doctest::Approx(-7.0));
    }
  }
  SUBCASE("two-point batch normalizes to plus and minus one") {
    auto [rm, rv, rc] = mk_bn_state(1);
    Var x = g.constant(Tensor::from({2, 1}, {0, 2}));
    Var y = g.batch_norm(x, g.constant(Tensor::full({1}, 1.0)), g.constant(Tensor::zeros({1})), rm,
                         rv, rc, true);
    CHECK(y->value[0] == doctest::Approx(-1.0).epsilon(1e-5));
    CHECK(y->value[1] == doctest::Approx(1.0).epsilon(1e-5));
  }
  SUBCASE("train mode output is standardized") {
    auto [rm, rv, rc] = mk_bn_state(4);
    Var x = g.constant(random_tensor({200, 4}, rng, 3.0));
    Var y = g.batch_norm(x, g.constant(Tensor::full({4}, 1.0)), g.constant(Tensor::zeros({4})), rm,
                         rv, rc, true);
    for (int ch = 0; ch < 4; ++ch) {
      double mean = 0, var = 0;
      for (int r = 0; r < 200; ++r) mean += y->value.at2(r, ch);
      mean /= 200;
      for (int r = 0; r < 200; ++r) var += (y->value.at2(r, ch) - mean) * (y->value.at2(r, ch) - mean);
      var /= 200;
      CHECK(std::abs(mean) < 1e-6);
      CHECK(std::abs(var - 1.0) < 1e-4);
    }
  }
  SUBCASE("eval mode requires initialized running statistics") {
    auto [rm, rv, rc] = mk_bn_state(2);
    Var x = g.constant(random_tensor({5, 2}, rng));
    Var gamma = g.constant(Tensor::full({2}, 1.0));
    Var beta = g.constant(Tensor::zeros({2}));
    CHECK_THROWS_AS(g.batch_norm(x, gamma, beta, rm, rv, rc, false), std::runtime_error);
    g.batch_norm(x, gamma, beta, rm, rv, rc, true);
    CHECK_NOTHROW(g.batch_norm(x, gamma, beta, rm, rv, rc, false));
  }
}

TEST_CASE("elementwise basics") {
  Graph g(false);
  Var zero = g.constant(Tensor::zeros({1, 1}));
  CHECK(g.tanh(zero)->value[0] == 0.0);
  CHECK(g.sigmoid(zero)->value[0] == doctest::Approx(0.5));

  Rng rng(3);
  Var x = g.constant(random_tensor({4, 3}, rng));
  Var ones = g.constant(Tensor::full({4, 3}, 1.0));
  Var h = g.hadamard(x, ones);
  for (std::int64_t i = 0; i < h->value.size(); ++i) CHECK(h->value[i] == x->value[i]);

  Var v = g.constant(Tensor::from({1, 2}, {3, 4}));
  Var n = g.l2norm_rows(v);
  CHECK(n->value[0] == doctest::Approx(0.6));
  CHECK(n->value[1] == doctest::Approx(0.8));

  CHECK_THROWS_AS(g.hadamard(x, v), std::invalid_argument);
}

TEST_CASE("l2norm produces unit rows wherever the input is nonzero") {
  Rng rng(17);
  Graph g(false);
  Tensor x = random_tensor({40, 6}, rng, 2.0);
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 6; ++c) x.at2(r, c) = 0.0;  // zero rows stay zero
  Var y = g.l2norm_rows(g.constant(x));
  for (int r = 0; r < 40; ++r) {
    double norm = 0;
    for (int c = 0; c < 6; ++c) norm += y->value.at2(r, c) * y->value.at2(r, c);
    norm = std::sqrt(norm);
    if (r < 5)
      CHECK(norm == 0.0);
    else
      CHECK(norm == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("forward determinism") {
  Rng rng(23);
  Tensor x = random_tensor({6, 4, 8}, rng);
  Tensor w = random_tensor({3, 3, 8, 8}, rng, 0.2);
  Tensor b = random_tensor({8}, rng, 0.1);
  const Tensor y1 = conv2d_forward(x, w, &b, 1, 1, 1, 1);
  const Tensor y2 = conv2d_forward(x, w, &b, 1, 1, 1, 1);
  for (std::int64_t i = 0; i < y1.size(); ++i) CHECK(y1[i] == y2[i]);
}

TEST_CASE("strided and dilated conv2d agrees with the direct formula") {
  Rng rng(31);
  for (int stride : {1, 2}) {
    for (int dil : {1, 2}) {
      Tensor x = random_tensor({9, 7, 3}, rng);
      Tensor w = random_tensor({3, 2, 3, 5}, rng, 0.4);
      const Tensor y = conv2d_forward(x, w, nullptr, stride, dil, 2, 1);
      const std::int64_t ho = conv_out_extent(9, 3, stride, dil, 2);
      const std::int64_t wo = conv_out_extent(7, 2, stride, dil, 1);
      REQUIRE(y.dim(0) == ho);
      REQUIRE(y.dim(1) == wo);
      for (std::int64_t oh = 0; oh < ho; ++oh)
        for (std::int64_t ow = 0; ow < wo; ++ow)
          for (std::int64_t q = 0; q < 5; ++q) {
            double acc = 0;
            for (int th = 0; th < 3; ++th)
              for (int tw = 0; tw < 2; ++tw) {
                const std::int64_t ih = oh * stride - 2 + th * dil;
                const std::int64_t iw = ow * stride - 1 + tw * dil;
                if (ih < 0 || ih >= 9 || iw < 0 || iw >= 7) continue;
                for (int c = 0; c < 3; ++c) acc += x.at3(ih, iw, c) * w[((th * 2 + tw) * 3 + c) * 5 + q];
              }
            CHECK(y.at3(oh, ow, q) == doctest::Approx(acc).epsilon(1e-12));
          }
    }
  }
}

TEST_CASE("gradients match central differences on randomized shapes") {
  // Worst relative error across >= 20 seeds per operation, tolerance 1e-4.
  auto project = [](Graph& g, const Var& y, Rng& rng) {
    Tensor w(y->value.shape());
    for (std::int64_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-1, 1);
    return g.weighted_sum(y, std::move(w));
  };

  SUBCASE("tanh at zero has slope one") {
    Var x = make_leaf(Tensor::zeros({1, 1}), true);
    const double err = grad_check_exhaustive(
        [&](Graph& g) { return g.weighted_sum(g.tanh(x), Tensor::full({1, 1}, 1.0)); }, {x}, 1e-5);
    CHECK(err < 1e-7);
    x->grad.fill(0.0);
    Graph g;
    Var y = g.tanh(x);
    g.backward(g.weighted_sum(y, Tensor::full({1, 1}, 1.0)));
    CHECK(x->grad[0] == doctest::Approx(1.0));
  }

  SUBCASE("elementwise, linear, conv, norm ops") {
    double worst = 0;
    for (int seed = 0; seed < 21; ++seed) {
      Rng rng(100 + seed);
      const int rows = 2 + seed % 3, cin = 2 + seed % 4, cout = 2 + (seed + 1) % 3;
      Var x = make_leaf(random_tensor({rows, cin}, rng), true);
      Var w = make_leaf(random_tensor({cout, cin}, rng), true);
      Var b = make_leaf(random_tensor({cout}, rng), true);
      worst = std::max(worst, grad_check_exhaustive(
                                  [&](Graph& g) {
                                    Rng pr(900 + seed);
                                    Var y = g.linear(g.tanh(x), w, b);
                                    y = g.sigmoid(y);
                                    y = g.l2norm_rows(y);
                                    return project(g, y, pr);
                                  },
                                  {x, w, b}));

      Var xc = make_leaf(random_tensor({4 + seed % 3, 3 + seed % 2, cin}, rng), true);
      Var wc = make_leaf(random_tensor({3, 3, cin, cout}, rng, 0.5), true);
      Var bc = make_leaf(random_tensor({cout}, rng), true);
      worst = std::max(worst, grad_check_exhaustive(
                                  [&](Graph& g) {
                                    Rng pr(7200 + seed);
                                    Var y = g.conv2d(xc, wc, bc, 1, 1, 1, 1);
                                    return project(g, g.tanh(y), pr);
                                  },
                                  {xc, wc, bc}));

      Var x1 = make_leaf(random_tensor({7, cin}, rng), true);
      Var w1 = make_leaf(random_tensor({3, cin, cout}, rng, 0.5), true);
      const int stride = 1 + seed % 2;
      worst = std::max(worst, grad_check_exhaustive(
                                  [&](Graph& g) {
                                    Rng pr(8300 + seed);
                                    return project(g, g.conv1d(x1, w1, nullptr, stride), pr);
                                  },
                                  {x1, w1}));
    }
    CHECK(worst < 1e-4);
  }

  SUBCASE("fast-path conv2d widths") {
    double worst = 0;
    for (int seed = 0; seed < 4; ++seed) {
      Rng rng(300 + seed);
      Var x = make_leaf(random_tensor({5, 4, 8}, rng), true);
      Var w = make_leaf(random_tensor({3, 3, 8, 8}, rng, 0.3), true);
      Var b = make_leaf(random_tensor({8}, rng), true);
      Rng pr(9100 + seed);
      worst = std::max(worst, grad_check_directional(
                                  [&](Graph& g) {
                                    Rng prr(9100 + seed);
                                    Var y = g.conv2d(x, w, b, 1, 1, 1, 1);
                                    Tensor pw(y->value.shape());
                                    for (std::int64_t i = 0; i < pw.size(); ++i) pw[i] = prr.uniform(-1, 1);
                                    return g.weighted_sum(y, std::move(pw));
                                  },
                                  {x, w, b}, pr, 6));
    }
    CHECK(worst < 1e-4);
  }

  SUBCASE("batch norm, both modes") {
    double worst = 0;
    for (int seed = 0; seed < 20; ++seed) {
      Rng rng(500 + seed);
      const int c = 2 + seed % 3;
      Var x = make_leaf(random_tensor({6, c}, rng), true);
      Var gamma = make_leaf(random_tensor({c}, rng, 0.5), true);
      Var beta = make_leaf(random_tensor({c}, rng, 0.5), true);
      Var rm = make_leaf(random_tensor({c}, rng, 0.2), false);
      Var rv = make_leaf(Tensor::full({c}, 1.3), false);
      Var rc = make_leaf(Tensor::full({1}, 1.0), false);
      for (bool train : {true, false}) {
        worst = std::max(worst, grad_check_exhaustive(
                                    [&, train](Graph& g) {
                                      Rng pr(6100 + seed);
                                      Var y = g.batch_norm(x, gamma, beta, rm, rv, rc, train);
                                      return project(g, y, pr);
                                    },
                                    {x, gamma, beta}));
      }
    }
    CHECK(worst < 1e-4);
  }

  SUBCASE("pooling, masking, fusion plumbing") {
    double worst = 0;
    for (int seed = 0; seed < 20; ++seed) {
      Rng rng(700 + seed);
      Var clips = make_leaf(random_tensor({8, 3}, rng), true);
      Tensor mask({4, 2});
      for (std::int64_t i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() < 0.7 ? 1.0 : 0.0;
      worst = std::max(worst, grad_check_exhaustive(
                                  [&](Graph& g) {
                                    Rng pr(7100 + seed);
                                    Var m = g.span_max_grid(clips, 2, 2, 4, mask);
                                    return project(g, m, pr);
                                  },
                                  {clips}));
      worst = std::max(worst, grad_check_exhaustive(
                                  [&](Graph& g) {
                                    Rng pr(7300 + seed);
                                    Var m = g.span_mean_rows(clips, {{0, 3}, {2, 4}, {5, 3}});
                                    return project(g, m, pr);
                                  },
                                  {clips}));

      Var map = make_leaf(random_tensor({3, 2, 4}, rng), true);
      Var vec = make_leaf(random_tensor({1, 4}, rng), true);
      Tensor mask2({6});
      for (std::int64_t i = 0; i < 6; ++i) mask2[i] = i % 3 == 2 ? 0.0 : 1.0;
      worst = std::max(worst, grad_check_exhaustive(
                                  [&](Graph& g) {
                                    Rng pr(7500 + seed);
                                    Var y = g.broadcast_row_mul(map, vec);
                                    y = g.l2norm_rows(y);
                                    y = g.mask_rows(y, mask2);
                                    return project(g, y, pr);
                                  },
                                  {map, vec}));
    }
    CHECK(worst < 1e-4);
  }

  SUBCASE("sequence plumbing and embedding") {
    double worst = 0;
    for (int seed = 0; seed < 20; ++seed) {
      Rng rng(800 + seed);
      Var table = make_leaf(random_tensor({6, 3}, rng), true);
      const std::vector<int> ids{1, 4, 1, 5};
      Var a = make_leaf(random_tensor({4, 3}, rng), true);
      Var b = make_leaf(random_tensor({4, 2}, rng), true);
      worst = std::max(worst, grad_check_exhaustive(
                                  [&](Graph& g) {
                                    Rng pr(8100 + seed);
                                    Var e = g.embedding(table, ids);
                                    Var cat = g.concat_cols(e, b);
                                    Var rev = g.reverse_rows(cat);
                                    Var m = g.mean_rows(g.add(rev, g.concat_cols(a, b)));
                                    return project(g, m, pr);
                                  },
                                  {table, a, b}));
      Var z = make_leaf(random_tensor({2, 8}, rng), true);
      worst = std::max(worst, grad_check_exhaustive(
                                  [&](Graph& g) {
                                    Rng pr(8200 + seed);
                                    Var s1 = g.slice_cols(z, 0, 4);
                                    Var s2 = g.slice_cols(z, 4, 4);
                                    Var h = g.hadamard(g.sigmoid(s1), g.tanh(s2));
                                    Var row = g.slice_rows(h, 1, 1);
                                    return project(g, g.stack_rows({row, row}), pr);
                                  },
                                  {z}));
    }
    CHECK(worst < 1e-4);
  }

  SUBCASE("masked bce") {
    double worst = 0;
    for (int seed = 0; seed < 20; ++seed) {
      Rng rng(950 + seed);
      Var logits = make_leaf(random_tensor({3, 2, 1}, rng), true);
      Tensor labels({3, 2, 1});
      Tensor mask({3, 2, 1});
      for (std::int64_t i = 0; i < labels.size(); ++i) {
        labels[i] = rng.uniform() < 0.4 ? 0.0 : rng.uniform();
        mask[i] = rng.uniform() < 0.8 ? 1.0 : 0.0;
      }
      if (mask[0] == 0.0) mask[0] = 1.0;
      worst = std::max(worst, grad_check_exhaustive(
                                  [&](Graph& g) {
                                    Var p = g.sigmoid(logits);
                                    return g.masked_bce_mean({p}, {labels}, {mask});
                                  },
                                  {logits}));
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("bce value at known points") {
  Graph g(false);
  SUBCASE("perfect confident predictions give near-zero loss") {
    Tensor labels = Tensor::from({2, 1}, {1.0, 0.0});
    Tensor mask = Tensor::full({2, 1}, 1.0);
    Var p = g.constant(Tensor::from({2, 1}, {1.0, 0.0}));
    Var loss = g.masked_bce_mean({p}, {labels}, {mask});
    CHECK(loss->value[0] < 1e-6);
  }
  SUBCASE("uncertain prediction costs ln 2") {
    Tensor labels = Tensor::from({1}, {1.0});
    Tensor mask = Tensor::full({1}, 1.0);
    Var p = g.constant(Tensor::from({1}, {0.5}));
    CHECK(g.masked_bce_mean({p}, {labels}, {mask})->value[0] == doctest::Approx(0.6931).epsilon(1e-4));
    Tensor labels0 = Tensor::from({1}, {0.0});
    CHECK(g.masked_bce_mean({p}, {labels0}, {mask})->value[0] == doctest::Approx(0.6931).epsilon(1e-4));
  }
  SUBCASE("loss is nonnegative and minimized at the labels") {
    Rng rng(4);
    for (int i = 0; i < 50; ++i) {
      const double y = rng.uniform();
      const double p = std::min(std::max(rng.uniform(), 1e-6), 1.0 - 1e-6);
      Var pv = g.constant(Tensor::from({1}, {p}));
      const double l = g.masked_bce_mean({pv}, {Tensor::from({1}, {y})}, {Tensor::full({1}, 1.0)})
                           ->value[0];
      const double self = g.masked_bce_mean({g.constant(Tensor::from({1}, {y}))},
                                            {Tensor::from({1}, {y})}, {Tensor::full({1}, 1.0)})
                              ->value[0];
      CHECK(l >= 0.0);
      CHECK(l >= self - 1e-12);
    }
  }
}

TEST_CASE("allocation tracking balances") {
  const std::int64_t before = TensorAllocStats::live().load();
  {
    Tensor a({100, 7});
    Tensor b = a;
    Tensor c = std::move(a);
    Tensor d;
    d = b;
    CHECK(TensorAllocStats::live().load() >= before + 3 * 700);
  }
  CHECK(TensorAllocStats::live().load() == before);
}
