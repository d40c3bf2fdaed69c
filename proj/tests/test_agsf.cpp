#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "prompthash/agsf.hpp"
#include "prompthash/gradcheck.hpp"

using namespace prompthash;

namespace {

Tensor<double> randt(std::vector<std::size_t> shape, RngStream& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * scale;
  return t;
}

AgsfParams<double> small_agsf(RngStream& rng, std::size_t d = 4, bool per_feature = false) {
  return AgsfParams<double>::make(d, 2, 3, rng, per_feature);
}

}  // namespace

TEST_CASE("branch at init is silu of the input") {
  RngStream rng(1);
  AgsfParams<double> p = small_agsf(rng);
  Tensor<double> x = randt({2, 3, 4}, rng);
  Graph<double> g;
  BoundAgsf<double> bp = p.bind(g, "agsf", ParamGroup::Modules);
  const Tensor<double>& y = g.value(agsf_branch(g, g.input(x, false), bp.grn_v, bp.gate_v));
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double s = x[i] / (1.0 + std::exp(-x[i]));
    CHECK(y[i] == doctest::Approx(s).epsilon(1e-14));
  }
}

TEST_CASE("gate_and_fuse concatenates with recorded boundary") {
  RngStream rng(2);
  AgsfParams<double> p = small_agsf(rng);
  Tensor<double> fv = randt({2, 5, 4}, rng);
  Tensor<double> ft = randt({2, 3, 4}, rng);
  Graph<double> g;
  BoundAgsf<double> bp = p.bind(g, "agsf", ParamGroup::Modules);
  FusedSeq<double> f = gate_and_fuse(g, bp, g.input(fv, false), g.input(ft, false));
  CHECK(f.lv == 5);
  CHECK(f.lpt == 3);
  CHECK(g.value(f.seq).dim(1) == 8);

  // at init each segment is silu of its input
  const Tensor<double>& vs = g.value(f.seq);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      for (std::size_t k = 0; k < 4; ++k) {
        const double x = fv.at3(i, j, k);
        CHECK(vs.at3(i, j, k) == doctest::Approx(x / (1.0 + std::exp(-x))).epsilon(1e-14));
      }
    }
  }
}

TEST_CASE("gate_and_fuse rejects mismatched feature dims") {
  RngStream rng(3);
  AgsfParams<double> p = small_agsf(rng);
  Tensor<double> fv = randt({2, 5, 4}, rng);
  Tensor<double> ft = randt({2, 3, 6}, rng);
  Graph<double> g;
  BoundAgsf<double> bp = p.bind(g, "agsf", ParamGroup::Modules);
  CHECK_THROWS_AS(gate_and_fuse(g, bp, g.input(fv, false), g.input(ft, false)), ShapeError);
}

TEST_CASE("split inverts concat on sequence contents") {
  RngStream rng(4);
  Tensor<double> a = randt({3, 4, 5}, rng);
  Tensor<double> b = randt({3, 2, 5}, rng);
  Graph<double> g;
  Var<double> cat = concat_seq(g, g.input(a, false), g.input(b, false));
  const Tensor<double>& ra = g.value(slice_seq(g, cat, 0, 4));
  const Tensor<double>& rb = g.value(slice_seq(g, cat, 4, 2));
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(ra[i] == a[i]);
  for (std::size_t i = 0; i < b.numel(); ++i) CHECK(rb[i] == b[i]);
}

TEST_CASE("multi-axis scan of zero input is zero") {
  RngStream rng(5);
  AgsfParams<double> p = small_agsf(rng);
  Tensor<double> x({2, 4, 4});
  Graph<double> g;
  BoundAgsf<double> bp = p.bind(g, "agsf", ParamGroup::Modules);
  MultiAxisOut<double> out = multi_axis_ssm(g, bp, g.input(x, false));
  for (Var<double> v : {out.seq, out.feat, out.both}) {
    const Tensor<double>& t = g.value(v);
    for (std::size_t i = 0; i < t.numel(); ++i) CHECK(t[i] == 0.0);
  }
}

TEST_CASE("multi-axis branches match primitive composition") {
  RngStream rng(6);
  AgsfParams<double> p = small_agsf(rng);
  Tensor<double> x = randt({2, 4, 4}, rng);
  Graph<double> g;
  BoundAgsf<double> bp = p.bind(g, "agsf", ParamGroup::Modules);
  Var<double> vx = g.input(x, false);
  MultiAxisOut<double> out = multi_axis_ssm(g, bp, vx);

  const FlipAxis axes[] = {FlipAxis::Seq, FlipAxis::Feat, FlipAxis::Both};
  const Var<double> got[] = {out.seq, out.feat, out.both};
  for (int i = 0; i < 3; ++i) {
    Var<double> want = flip(g, selective_ssm_scan(g, flip(g, vx, axes[i]), bp.ssm), axes[i]);
    const Tensor<double>& a = g.value(got[i]);
    const Tensor<double>& b = g.value(want);
    for (std::size_t k = 0; k < a.numel(); ++k) CHECK(a[k] == b[k]);
  }
}

TEST_CASE("palindromic input makes the sequence flip a no-op before the scan") {
  RngStream rng(7);
  AgsfParams<double> p = small_agsf(rng);
  // x[:, t, :] == x[:, L-1-t, :]
  Tensor<double> half = randt({2, 3, 4}, rng);
  Tensor<double> x({2, 6, 4});
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      for (std::size_t k = 0; k < 4; ++k) {
        x.at3(i, j, k) = half.at3(i, j, k);
        x.at3(i, 5 - j, k) = half.at3(i, j, k);
      }
    }
  }
  Graph<double> g;
  BoundAgsf<double> bp = p.bind(g, "agsf", ParamGroup::Modules);
  Var<double> vx = g.input(x, false);

  const Tensor<double>& flipped = g.value(flip(g, vx, FlipAxis::Seq));
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(flipped[i] == x[i]);

  // so the seq branch's scan equals the plain scan, and the branch output is
  // just the flipped plain scan
  const Tensor<double>& plain = g.value(selective_ssm_scan(g, vx, bp.ssm));
  const Tensor<double>& branch_scan =
      g.value(selective_ssm_scan(g, flip(g, vx, FlipAxis::Seq), bp.ssm));
  for (std::size_t i = 0; i < plain.numel(); ++i) CHECK(branch_scan[i] == plain[i]);

  MultiAxisOut<double> out = multi_axis_ssm(g, bp, vx);
  const Tensor<double>& want = g.value(flip(g, selective_ssm_scan(g, vx, bp.ssm), FlipAxis::Seq));
  const Tensor<double>& got = g.value(out.seq);
  for (std::size_t i = 0; i < got.numel(); ++i) CHECK(got[i] == want[i]);
}

TEST_CASE("adaptive combine boundary theta=0 returns the fusion exactly") {
  RngStream rng(8);
  AgsfParams<double> p = small_agsf(rng);
  p.theta_raw[0] = -800.0;  // sigmoid underflows to exactly 0
  Tensor<double> x = randt({2, 4, 4}, rng);
  Graph<double> g;
  BoundAgsf<double> bp = p.bind(g, "agsf", ParamGroup::Modules);
  FusedSeq<double> fusion{g.input(x, false), 2, 2};
  MultiAxisOut<double> flips = multi_axis_ssm(g, bp, fusion.seq);
  FusedSeq<double> fit = adaptive_combine(g, bp, flips, fusion);
  const Tensor<double>& got = g.value(fit.seq);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(got[i] == x[i]);
  CHECK(fit.lv == 2);
  CHECK(fit.lpt == 2);
}

TEST_CASE("adaptive combine boundary theta=1 tau=1 returns the branch sum exactly") {
  RngStream rng(9);
  AgsfParams<double> p = small_agsf(rng);
  p.theta_raw[0] = 800.0;  // sigmoid saturates to exactly 1
  p.tau_raw[0] = init::softplus_inverse(1.0);
  // the raw value must round-trip to exactly 1 for the identity to be exact
  CHECK(softplus_scalar(p.tau_raw[0]) == 1.0);
  Tensor<double> x = randt({2, 4, 4}, rng);
  Graph<double> g;
  BoundAgsf<double> bp = p.bind(g, "agsf", ParamGroup::Modules);
  FusedSeq<double> fusion{g.input(x, false), 2, 2};
  MultiAxisOut<double> flips = multi_axis_ssm(g, bp, fusion.seq);
  FusedSeq<double> fit = adaptive_combine(g, bp, flips, fusion);
  const Tensor<double>& got = g.value(fit.seq);
  const Tensor<double>& s1 = g.value(flips.seq);
  const Tensor<double>& s2 = g.value(flips.feat);
  const Tensor<double>& s3 = g.value(flips.both);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(got[i] == s1[i] + s2[i] + s3[i]);
}

TEST_CASE("adaptive combine hand value 3.5 on all-ones inputs") {
  RngStream rng(10);
  AgsfParams<double> p = small_agsf(rng);
  p.theta_raw[0] = 0.0;  // theta = 0.5
  p.tau_raw[0] = init::softplus_inverse(2.0);
  Graph<double> g;
  BoundAgsf<double> bp = p.bind(g, "agsf", ParamGroup::Modules);
  Tensor<double> ones = init::ones<double>({1, 2, 4});
  FusedSeq<double> fusion{g.input(ones, false), 1, 1};
  MultiAxisOut<double> flips{g.input(ones, false), g.input(ones, false), g.input(ones, false)};
  FusedSeq<double> fit = adaptive_combine(g, bp, flips, fusion);
  const Tensor<double>& got = g.value(fit.seq);
  for (std::size_t i = 0; i < got.numel(); ++i) {
    CHECK(got[i] == doctest::Approx(3.5).epsilon(1e-12));
  }
}

TEST_CASE("per-feature mix applies theta per channel") {
  RngStream rng(11);
  AgsfParams<double> p = small_agsf(rng, 4, true);
  CHECK(p.theta_raw.numel() == 4);
  p.theta_raw[0] = -800.0;
  p.theta_raw[1] = 800.0;
  p.theta_raw[2] = 0.0;
  p.theta_raw[3] = 0.0;
  p.tau_raw[0] = init::softplus_inverse(1.0);
  Graph<double> g;
  BoundAgsf<double> bp = p.bind(g, "agsf", ParamGroup::Modules);
  Tensor<double> f({1, 1, 4}, {1.0, 1.0, 1.0, 1.0});
  Tensor<double> s({1, 1, 4}, {2.0, 2.0, 2.0, 2.0});
  FusedSeq<double> fusion{g.input(f, false), 1, 0};
  MultiAxisOut<double> flips{g.input(s, false), g.input(s, false), g.input(s, false)};
  const Tensor<double>& got = g.value(adaptive_combine(g, bp, flips, fusion).seq);
  CHECK(got[0] == 1.0);                                 // theta 0: keep fusion
  CHECK(got[1] == 6.0);                                 // theta 1: branch sum
  CHECK(got[2] == doctest::Approx(3.5).epsilon(1e-12));  // theta 0.5 blend
  CHECK(got[3] == doctest::Approx(3.5).epsilon(1e-12));
}

TEST_CASE("refine_split outputs unit rows") {
  RngStream rng(12);
  AgsfParams<double> p = small_agsf(rng);
  for (auto* lp : {&p.refine.wo, &p.refine.fc2}) {
    *lp = LinearParams<double>::make_xavier(lp->w.dim(0), lp->w.dim(1), rng);
  }
  Tensor<double> fv = randt({3, 4, 4}, rng);
  Tensor<double> ft = randt({3, 2, 4}, rng);
  Graph<double> g;
  BoundAgsf<double> bp = p.bind(g, "agsf", ParamGroup::Modules);
  AgsfOut<double> out = agsf_forward(g, bp, g.input(fv, false), g.input(ft, false));
  for (Var<double> v : {out.fv, out.fpt}) {
    const Tensor<double>& t = g.value(v);
    CHECK(t.rank() == 2);
    CHECK(t.dim(0) == 3);
    CHECK(t.dim(1) == 4);
    for (std::size_t i = 0; i < t.dim(0); ++i) {
      double n = 0;
      for (std::size_t k = 0; k < t.dim(1); ++k) n += t.at2(i, k) * t.at2(i, k);
      CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("identity refine path pools normalized segment means") {
  RngStream rng(13);
  AgsfParams<double> p = small_agsf(rng);  // refine path is identity at init
  Tensor<double> x = randt({2, 6, 4}, rng);
  Graph<double> g;
  BoundAgsf<double> bp = p.bind(g, "agsf", ParamGroup::Modules);
  FusedSeq<double> fit{g.input(x, false), 4, 2};
  auto [fv, fpt] = refine_split(g, bp, fit);

  for (std::size_t i = 0; i < 2; ++i) {
    double mv[4] = {0, 0, 0, 0}, mt[4] = {0, 0, 0, 0};
    for (std::size_t k = 0; k < 4; ++k) {
      for (std::size_t j = 0; j < 4; ++j) mv[k] += x.at3(i, j, k) / 4.0;
      for (std::size_t j = 4; j < 6; ++j) mt[k] += x.at3(i, j, k) / 2.0;
    }
    double nv = 0, nt = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      nv += mv[k] * mv[k];
      nt += mt[k] * mt[k];
    }
    nv = std::sqrt(nv);
    nt = std::sqrt(nt);
    const Tensor<double>& gv = g.value(fv);
    const Tensor<double>& gt = g.value(fpt);
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(gv.at2(i, k) == doctest::Approx(mv[k] / nv).epsilon(1e-12));
      CHECK(gt.at2(i, k) == doctest::Approx(mt[k] / nt).epsilon(1e-12));
    }
  }
}

TEST_CASE("swapping segments swaps the refined outputs") {
  RngStream rng(14);
  AgsfParams<double> p = small_agsf(rng);
  for (auto* lp : {&p.refine.wo, &p.refine.fc2}) {
    *lp = LinearParams<double>::make_xavier(lp->w.dim(0), lp->w.dim(1), rng);
  }
  Tensor<double> x = randt({2, 7, 4}, rng);
  Graph<double> g;
  BoundAgsf<double> bp = p.bind(g, "agsf", ParamGroup::Modules);
  Var<double> vx = g.input(x, false);
  FusedSeq<double> fit{vx, 4, 3};
  auto [fv, fpt] = refine_split(g, bp, fit);

  Var<double> swapped = concat_seq(g, slice_seq(g, vx, 4, 3), slice_seq(g, vx, 0, 4));
  FusedSeq<double> fit2{swapped, 3, 4};
  auto [sv, st] = refine_split(g, bp, fit2);

  const Tensor<double>& a = g.value(fv);
  const Tensor<double>& b = g.value(st);
  const Tensor<double>& c = g.value(fpt);
  const Tensor<double>& d = g.value(sv);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
    CHECK(c[i] == doctest::Approx(d[i]).epsilon(1e-12));
  }
}

TEST_CASE("refine_split rejects missing boundary metadata") {
  RngStream rng(15);
  AgsfParams<double> p = small_agsf(rng);
  Tensor<double> x = randt({1, 4, 4}, rng);
  Graph<double> g;
  BoundAgsf<double> bp = p.bind(g, "agsf", ParamGroup::Modules);
  FusedSeq<double> none{g.input(x, false), 0, 0};
  CHECK_THROWS_AS(refine_split(g, bp, none), ContractError);
  FusedSeq<double> stale{g.input(x, false), 3, 2};
  CHECK_THROWS_AS(refine_split(g, bp, stale), ContractError);
}

TEST_CASE("outputs stay finite for large inputs") {
  RngStream rng(16);
  AgsfParams<double> p = small_agsf(rng);
  Tensor<double> fv({2, 4, 4});
  Tensor<double> ft({2, 4, 4});
  for (std::size_t i = 0; i < fv.numel(); ++i) fv[i] = (i % 2 == 0) ? 1e3 : -1e3;
  for (std::size_t i = 0; i < ft.numel(); ++i) ft[i] = (i % 3 == 0) ? -1e3 : 1e3;
  Graph<double> g;
  BoundAgsf<double> bp = p.bind(g, "agsf", ParamGroup::Modules);
  AgsfOut<double> out = agsf_forward(g, bp, g.input(fv, false), g.input(ft, false));
  for (Var<double> v : {out.fv, out.fpt}) {
    const Tensor<double>& t = g.value(v);
    for (std::size_t i = 0; i < t.numel(); ++i) CHECK(std::isfinite(t[i]));
  }
}

TEST_CASE("gate_and_fuse gradient check") {
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    RngStream rng(200 + seed);
    AgsfParams<double> p = small_agsf(rng);
    Tensor<double> fv = randt({2, 3, 4}, rng);
    Tensor<double> ft = randt({2, 2, 4}, rng);
    Tensor<double> w = randt({2, 5, 4}, rng);
    auto rep = check_gradients([&](Graph<double>& g) {
      BoundAgsf<double> bp = p.bind(g, "agsf", ParamGroup::Modules);
      Var<double> vfv = g.param(fv, "fv", ParamGroup::Modules);
      Var<double> vft = g.param(ft, "ft", ParamGroup::Modules);
      FusedSeq<double> f = gate_and_fuse(g, bp, vfv, vft);
      return sum_all(g, mul(g, f.seq, g.constant(w)));
    });
    INFO(rep.to_string());
    CHECK(rep.pass);
  }
}

TEST_CASE("full agsf gradient check") {
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    RngStream rng(300 + seed);
    AgsfParams<double> p = small_agsf(rng, 8);
    for (auto* lp : {&p.refine.wo, &p.refine.fc2}) {
      *lp = LinearParams<double>::make_xavier(lp->w.dim(0), lp->w.dim(1), rng);
    }
    Tensor<double> fv = randt({2, 4, 8}, rng);
    Tensor<double> ft = randt({2, 4, 8}, rng);
    Tensor<double> wv = randt({2, 8}, rng);
    Tensor<double> wt = randt({2, 8}, rng);
    auto rep = check_gradients([&](Graph<double>& g) {
      BoundAgsf<double> bp = p.bind(g, "agsf", ParamGroup::Modules);
      Var<double> vfv = g.param(fv, "fv", ParamGroup::Modules);
      Var<double> vft = g.param(ft, "ft", ParamGroup::Modules);
      AgsfOut<double> out = agsf_forward(g, bp, vfv, vft);
      return add(g, sum_all(g, mul(g, out.fv, g.constant(wv))),
                 sum_all(g, mul(g, out.fpt, g.constant(wt))));
    });
    INFO(rep.to_string());
    CHECK(rep.pass);
  }
}
