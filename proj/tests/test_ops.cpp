#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "prompthash/gradcheck.hpp"
#include "prompthash/graph.hpp"
#include "prompthash/ops.hpp"
#include "prompthash/rng.hpp"
#include "prompthash/tensor.hpp"

using namespace prompthash;

namespace {

Tensor<double> randt(std::vector<std::size_t> shape, RngStream& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * scale;
  return t;
}

// Project to a scalar through fixed random weights so transposed or permuted
// gradients cannot cancel out.
Var<double> scalarize(Graph<double>& g, Var<double> v, const Tensor<double>& w) {
  return sum_all(g, mul(g, v, g.constant(w)));
}

void expect_pass(const GradCheckBuilder& build) {
  auto rep = check_gradients(build);
  INFO(rep.to_string());
  CHECK(rep.pass);
}

}  // namespace

TEST_CASE("elementwise arithmetic gradients") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    RngStream rng(seed);
    Tensor<double> a = randt({2, 3}, rng);
    Tensor<double> b = randt({2, 3}, rng);
    Tensor<double> w = randt({2, 3}, rng);
    expect_pass([&](Graph<double>& g) {
      Var<double> va = g.param(a, "a", ParamGroup::Modules);
      Var<double> vb = g.param(b, "b", ParamGroup::Modules);
      Var<double> s = add(g, mul(g, va, vb), sub(g, va, scale(g, vb, 0.7)));
      s = add_scalar(g, s, 0.3);
      return scalarize(g, s, w);
    });
  }
}

TEST_CASE("unary op gradients") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    RngStream rng(100 + seed);
    Tensor<double> a = randt({3, 4}, rng);
    Tensor<double> w = randt({3, 4}, rng);
    using UFn = Var<double> (*)(Graph<double>&, Var<double>);
    const UFn fns[] = {&tanh_op<double>, &sigmoid_op<double>, &softplus_op<double>,
                       &silu_op<double>, &gelu_op<double>, &exp_op<double>, &neg<double>};
    for (auto fn : fns) {
      expect_pass([&](Graph<double>& g) {
        Var<double> va = g.param(a, "a", ParamGroup::Modules);
        return scalarize(g, fn(g, va), w);
      });
    }
  }
}

TEST_CASE("unary op reference values") {
  Graph<double> g;
  Tensor<double> x({3});
  x[0] = 0.0;
  x[1] = 1.0;
  x[2] = -2.0;
  Var<double> v = g.input(x, false);
  CHECK(g.value(sigmoid_op(g, v))[0] == doctest::Approx(0.5));
  CHECK(g.value(softplus_op(g, v))[0] == doctest::Approx(std::log(2.0)));
  CHECK(g.value(gelu_op(g, v))[0] == 0.0);
  CHECK(g.value(gelu_op(g, v))[1] == doctest::Approx(0.8413447460685429));
  CHECK(g.value(silu_op(g, v))[0] == 0.0);
}

TEST_CASE("matmul family gradients") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    RngStream rng(200 + seed);
    Tensor<double> a = randt({3, 4}, rng);
    Tensor<double> b = randt({4, 2}, rng);
    Tensor<double> bt = randt({2, 4}, rng);
    Tensor<double> w = randt({3, 2}, rng);
    expect_pass([&](Graph<double>& g) {
      Var<double> va = g.param(a, "a", ParamGroup::Modules);
      Var<double> vb = g.param(b, "b", ParamGroup::Modules);
      return scalarize(g, matmul(g, va, vb), w);
    });
    expect_pass([&](Graph<double>& g) {
      Var<double> va = g.param(a, "a", ParamGroup::Modules);
      Var<double> vb = g.param(bt, "b", ParamGroup::Modules);
      return scalarize(g, matmul_nt(g, va, vb), w);
    });
  }
}

TEST_CASE("matmul_lastdim and linear gradients") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    RngStream rng(300 + seed);
    Tensor<double> x = randt({2, 3, 4}, rng);
    Tensor<double> wm = randt({4, 5}, rng);
    Tensor<double> wl = randt({5, 4}, rng);
    Tensor<double> bias = randt({5}, rng);
    Tensor<double> w = randt({2, 3, 5}, rng);
    expect_pass([&](Graph<double>& g) {
      Var<double> vx = g.param(x, "x", ParamGroup::Modules);
      Var<double> vw = g.param(wm, "w", ParamGroup::Modules);
      return scalarize(g, matmul_lastdim(g, vx, vw), w);
    });
    expect_pass([&](Graph<double>& g) {
      Var<double> vx = g.param(x, "x", ParamGroup::Modules);
      Var<double> vw = g.param(wl, "w", ParamGroup::Modules);
      Var<double> vb = g.param(bias, "b", ParamGroup::Modules);
      return scalarize(g, linear(g, vx, vw, vb), w);
    });
    expect_pass([&](Graph<double>& g) {
      Var<double> vx = g.param(x, "x", ParamGroup::Modules);
      Var<double> vw = g.param(wl, "w", ParamGroup::Modules);
      return scalarize(g, linear(g, vx, vw, Var<double>{}), w);
    });
  }
}

TEST_CASE("bmm gradients both modes") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    RngStream rng(400 + seed);
    Tensor<double> a = randt({2, 3, 4}, rng);
    Tensor<double> b = randt({2, 4, 5}, rng);
    Tensor<double> bt = randt({2, 5, 4}, rng);
    Tensor<double> w = randt({2, 3, 5}, rng);
    expect_pass([&](Graph<double>& g) {
      Var<double> va = g.param(a, "a", ParamGroup::Modules);
      Var<double> vb = g.param(b, "b", ParamGroup::Modules);
      return scalarize(g, bmm(g, va, vb), w);
    });
    expect_pass([&](Graph<double>& g) {
      Var<double> va = g.param(a, "a", ParamGroup::Modules);
      Var<double> vb = g.param(bt, "b", ParamGroup::Modules);
      return scalarize(g, bmm(g, va, vb, true), w);
    });
  }
}

TEST_CASE("shape op gradients") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    RngStream rng(500 + seed);
    Tensor<double> a = randt({2, 3, 4}, rng);
    Tensor<double> b = randt({2, 2, 4}, rng);
    Tensor<double> wc = randt({2, 5, 4}, rng);
    Tensor<double> ws = randt({2, 2, 4}, rng);
    Tensor<double> wr = randt({6, 4}, rng);
    expect_pass([&](Graph<double>& g) {
      Var<double> va = g.param(a, "a", ParamGroup::Modules);
      Var<double> vb = g.param(b, "b", ParamGroup::Modules);
      return scalarize(g, concat_seq(g, va, vb), wc);
    });
    expect_pass([&](Graph<double>& g) {
      Var<double> va = g.param(a, "a", ParamGroup::Modules);
      return scalarize(g, slice_seq(g, va, 1, 2), ws);
    });
    expect_pass([&](Graph<double>& g) {
      Var<double> va = g.param(a, "a", ParamGroup::Modules);
      return scalarize(g, reshape(g, va, {6, 4}), wr);
    });
    for (auto ax : {FlipAxis::Seq, FlipAxis::Feat, FlipAxis::Both}) {
      Tensor<double> wf = randt({2, 3, 4}, rng);
      expect_pass([&](Graph<double>& g) {
        Var<double> va = g.param(a, "a", ParamGroup::Modules);
        return scalarize(g, flip(g, va, ax), wf);
      });
    }
  }
}

TEST_CASE("flip is an involution and batch order is preserved") {
  RngStream rng(55);
  Tensor<double> a = randt({3, 4, 5}, rng);
  for (auto ax : {FlipAxis::Seq, FlipAxis::Feat, FlipAxis::Both}) {
    Graph<double> g;
    Var<double> v = g.input(a, false);
    Var<double> twice = flip(g, flip(g, v, ax), ax);
    const Tensor<double>& out = g.value(twice);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(out[i] == a[i]);
  }
  Graph<double> g;
  Var<double> v = g.input(a, false);
  const Tensor<double>& f = g.value(flip(g, v, FlipAxis::Seq));
  CHECK(f.at3(1, 0, 2) == a.at3(1, 3, 2));
}

TEST_CASE("split then concat along sequence is exact") {
  RngStream rng(56);
  Tensor<double> a = randt({2, 5, 3}, rng);
  Graph<double> g;
  Var<double> v = g.input(a, false);
  Var<double> left = slice_seq(g, v, 0, 2);
  Var<double> right = slice_seq(g, v, 2, 3);
  const Tensor<double>& back = g.value(concat_seq(g, left, right));
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(back[i] == a[i]);
}

TEST_CASE("head split and merge gradients and round-trip") {
  RngStream rng(600);
  Tensor<double> a = randt({2, 3, 8}, rng);
  Tensor<double> w = randt({4, 3, 4}, rng);
  expect_pass([&](Graph<double>& g) {
    Var<double> va = g.param(a, "a", ParamGroup::Modules);
    return scalarize(g, split_heads(g, va, 2), w);
  });
  Graph<double> g;
  Var<double> v = g.input(a, false);
  const Tensor<double>& rt = g.value(merge_heads(g, split_heads(g, v, 2), 2));
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(rt[i] == a[i]);
}

TEST_CASE("reduction and broadcast gradients") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    RngStream rng(700 + seed);
    Tensor<double> x = randt({2, 3, 4}, rng);
    Tensor<double> ctx = randt({3, 4}, rng);
    Tensor<double> s = randt({2, 4}, rng);
    Tensor<double> chan = randt({4}, rng);
    Tensor<double> one = randt({1}, rng);
    Tensor<double> w3 = randt({2, 3, 4}, rng);
    Tensor<double> w2 = randt({2, 4}, rng);
    expect_pass([&](Graph<double>& g) {
      Var<double> vx = g.param(x, "x", ParamGroup::Modules);
      return scalarize(g, mean_seq(g, vx), w2);
    });
    expect_pass([&](Graph<double>& g) {
      Var<double> vx = g.param(x, "x", ParamGroup::Modules);
      return mean_all(g, vx);
    });
    expect_pass([&](Graph<double>& g) {
      Var<double> vx = g.param(x, "x", ParamGroup::Modules);
      Var<double> vc = g.param(ctx, "c", ParamGroup::Modules);
      return scalarize(g, add_ctx(g, vx, vc), w3);
    });
    expect_pass([&](Graph<double>& g) {
      Var<double> vx = g.param(x, "x", ParamGroup::Modules);
      Var<double> vs = g.param(s, "s", ParamGroup::Modules);
      return scalarize(g, mul_bcast_seq(g, vx, vs), w3);
    });
    expect_pass([&](Graph<double>& g) {
      Var<double> vx = g.param(x, "x", ParamGroup::Modules);
      Var<double> vv = g.param(chan, "v", ParamGroup::Modules);
      return scalarize(g, mul_channels(g, vx, vv), w3);
    });
    expect_pass([&](Graph<double>& g) {
      Var<double> vx = g.param(x, "x", ParamGroup::Modules);
      Var<double> vv = g.param(one, "v", ParamGroup::Modules);
      return scalarize(g, mul_channels(g, vx, vv), w3);
    });
    expect_pass([&](Graph<double>& g) {
      Var<double> vx = g.param(x, "x", ParamGroup::Modules);
      return sum_squares(g, vx);
    });
  }
}

TEST_CASE("softmax layernorm l2norm gradients") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    RngStream rng(800 + seed);
    Tensor<double> x = randt({3, 5}, rng);
    Tensor<double> gamma = randt({5}, rng, 0.5);
    Tensor<double> beta = randt({5}, rng, 0.5);
    Tensor<double> w = randt({3, 5}, rng);
    for (std::size_t i = 0; i < gamma.numel(); ++i) gamma[i] += 1.0;
    expect_pass([&](Graph<double>& g) {
      Var<double> vx = g.param(x, "x", ParamGroup::Modules);
      return scalarize(g, softmax_lastdim(g, vx), w);
    });
    expect_pass([&](Graph<double>& g) {
      Var<double> vx = g.param(x, "x", ParamGroup::Modules);
      Var<double> vg = g.param(gamma, "g", ParamGroup::Modules);
      Var<double> vb = g.param(beta, "b", ParamGroup::Modules);
      return scalarize(g, layer_norm(g, vx, vg, vb), w);
    });
    expect_pass([&](Graph<double>& g) {
      Var<double> vx = g.param(x, "x", ParamGroup::Modules);
      return scalarize(g, l2_normalize_rows(g, vx), w);
    });
  }
}

TEST_CASE("softmax rows sum to one and l2 rows are unit") {
  RngStream rng(81);
  Tensor<double> x = randt({4, 6}, rng, 3.0);
  Graph<double> g;
  Var<double> v = g.input(x, false);
  const Tensor<double>& sm = g.value(softmax_lastdim(g, v));
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < 6; ++k) s += sm.at2(r, k);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  const Tensor<double>& nm = g.value(l2_normalize_rows(g, v));
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < 6; ++k) s += nm.at2(r, k) * nm.at2(r, k);
    CHECK(std::sqrt(s) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("embedding gradient scatters into rows") {
  RngStream rng(900);
  Tensor<double> table = randt({5, 3}, rng);
  std::vector<std::int32_t> ids = {0, 2, 2, 4};
  Tensor<double> w = randt({2, 2, 3}, rng);
  expect_pass([&](Graph<double>& g) {
    Var<double> vt = g.param(table, "t", ParamGroup::Modules);
    return scalarize(g, embedding(g, vt, ids, 2, 2), w);
  });
  Graph<double> g;
  Var<double> vt = g.input(table, false);
  CHECK_THROWS_AS(embedding(g, vt, std::vector<std::int32_t>{9}, 1, 1), ContractError);
}

TEST_CASE("cross entropy diag gradient and value") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    RngStream rng(1000 + seed);
    Tensor<double> logits = randt({4, 4}, rng, 2.0);
    expect_pass([&](Graph<double>& g) {
      Var<double> vl = g.param(logits, "l", ParamGroup::Modules);
      return cross_entropy_diag(g, vl);
    });
  }
  // single sample: only one class, loss is exactly zero
  Graph<double> g;
  Tensor<double> one({1, 1});
  one[0] = 3.7;
  CHECK(g.value(cross_entropy_diag(g, g.input(one, false)))[0] == 0.0);
}

TEST_CASE("affinity log-likelihood matches scalar oracle") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    RngStream rng(1100 + seed);
    Tensor<double> q = randt({3, 4}, rng, 2.0);
    Tensor<double> s({3, 4});
    for (std::size_t i = 0; i < s.numel(); ++i) s[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
    expect_pass([&](Graph<double>& g) {
      Var<double> vq = g.param(q, "q", ParamGroup::Modules);
      return affinity_loglik_sum(g, vq, s);
    });
    Graph<double> g;
    double want = 0.0;
    for (std::size_t i = 0; i < q.numel(); ++i) want += s[i] * q[i] - std::log(1.0 + std::exp(q[i]));
    const double got = g.value(affinity_loglik_sum(g, g.input(q, false), s))[0];
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
  }
}

namespace {

// Negative control: forward y = 2x but the stated gradient of element 0 is
// inflated by 10%. The checker must flag it.
Var<double> corrupted_scale(Graph<double>& g, Var<double> a) {
  Tensor<double> y = g.value(a);
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= 2.0;
  Var<double> out = g.make(std::move(y), g.requires_grad(a), nullptr);
  g.set_backward(out, [out, a](Graph<double>& gr) {
    const Tensor<double>& gy = gr.grad(out);
    Tensor<double>& ga = gr.grad(a);
    for (std::size_t i = 0; i < gy.numel(); ++i) {
      ga[i] += gy[i] * (i == 0 ? 2.2 : 2.0);
    }
  });
  return out;
}

}  // namespace

TEST_CASE("gradient check rejects corrupted backward") {
  RngStream rng(1200);
  Tensor<double> a = randt({2, 3}, rng);
  Tensor<double> w = randt({2, 3}, rng);
  auto rep = check_gradients([&](Graph<double>& g) {
    Var<double> va = g.param(a, "a", ParamGroup::Modules);
    return scalarize(g, corrupted_scale(g, va), w);
  });
  CHECK_FALSE(rep.pass);
  CHECK(rep.worst == "a[0]");
}

TEST_CASE("backward accumulates over reused nodes") {
  Tensor<double> a({2});
  a[0] = 1.0;
  a[1] = 2.0;
  Graph<double> g;
  Var<double> va = g.param(a, "a", ParamGroup::Modules);
  Var<double> y = sum_all(g, mul(g, va, va));
  g.backward(y);
  CHECK(g.grad(va)[0] == doctest::Approx(2.0));
  CHECK(g.grad(va)[1] == doctest::Approx(4.0));
}
