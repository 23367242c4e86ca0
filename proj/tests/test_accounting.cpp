#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "doctest.h"
#include "latentlab/accounting.hpp"
#include "latentlab/error.hpp"
#include "latentlab/rng.hpp"

using namespace latentlab;

namespace {

BackboneConfig tiny_discrete_cfg() {
  BackboneConfig cfg = BackboneConfig::preset(SizeClass::T, Family::discrete);
  cfg.seq_len = 4;
  return cfg;
}

BackboneConfig tiny_continuous_cfg() {
  BackboneConfig cfg = BackboneConfig::preset(SizeClass::T, Family::continuous);
  cfg.seq_len = 4;
  return cfg;
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

// quadratic scan over every pair; dominance = no worse on both axes,
// strictly better on one (exact duplicates collapse to the lowest index)
std::vector<std::size_t> frontier_oracle(const std::vector<std::pair<double, double>>& pts,
                                         bool lower_is_better) {
  const double sign = lower_is_better ? 1.0 : -1.0;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    bool dominated = false;
    for (std::size_t j = 0; j < pts.size() && !dominated; ++j) {
      if (j == i) continue;
      const double ci = pts[i].first, cj = pts[j].first;
      const double mi = sign * pts[i].second, mj = sign * pts[j].second;
      if (cj <= ci && mj <= mi && (cj < ci || mj < mi)) dominated = true;
      if (cj == ci && mj == mi && j < i) dominated = true;
    }
    if (!dominated) keep.push_back(i);
  }
  std::sort(keep.begin(), keep.end(),
            [&](std::size_t a, std::size_t b) { return pts[a].first < pts[b].first; });
  return keep;
}

}  // namespace

TEST_SUITE("accounting") {

TEST_CASE("discrete tiny forward cost matches a hand count") {
  const BackboneConfig cfg = tiny_discrete_cfg();
  const FlopsReport r = forward_flops(cfg, 4);

  // per block: qkv+out 2*4*4*128^2 = 524,288 ; scores+mix 4*4^2*128 = 8,192
  CHECK(r.attention == 4.0 * (524'288.0 + 8'192.0));
  // swiglu, d_ff 320: 2*3*4*128*320 per block
  CHECK(r.feedforward == 4.0 * 983'040.0);
  // head only: 2*4*128*16384 (token lookup is a gather)
  CHECK(r.embed_head == 16'777'216.0);
  // embedder 2*64*128 ; per block map 2*128*768 + apply 2*4*768 ;
  // final map 2*128*256 + apply 2*4*256
  CHECK(r.conditioning == 16'384.0 + 4.0 * (196'608.0 + 6'144.0) + 65'536.0 + 2'048.0);
  CHECK(r.total == 23'734'272.0);
  CHECK(r.total == r.attention + r.feedforward + r.embed_head + r.conditioning);
  CHECK(r.seq == 4);
  CHECK(r.trunk_seq == 4);
}

TEST_CASE("continuous tiny forward cost matches a hand count") {
  const BackboneConfig cfg = tiny_continuous_cfg();
  const FlopsReport r = forward_flops(cfg, 4);

  CHECK(r.attention == 4.0 * (524'288.0 + 8'192.0));
  // gelu, d_ff 512: 2*2*4*128*512 per block
  CHECK(r.feedforward == 4.0 * 1'048'576.0);
  // in_proj 2*4*4*128 ; time mlp 2*(256*128 + 128^2) ; head 2*4*128*4
  CHECK(r.embed_head == 4'096.0 + 98'304.0 + 4'096.0);
  CHECK(r.conditioning == 894'976.0);
  CHECK(r.total == 7'325'696.0);
  CHECK(r.total == r.attention + r.feedforward + r.embed_head + r.conditioning);
}

TEST_CASE("convention flags halve and trim exactly") {
  const BackboneConfig cfg = tiny_discrete_cfg();
  const FlopsReport full = forward_flops(cfg, 4);

  FlopsConvention half;
  half.mac2 = false;
  CHECK(forward_flops(cfg, 4, half).total * 2.0 == full.total);

  FlopsConvention no_sq;
  no_sq.attention_quadratic = false;
  const FlopsReport trimmed = forward_flops(cfg, 4, no_sq);
  CHECK(full.attention - trimmed.attention == 4.0 * 8'192.0);
  CHECK(trimmed.feedforward == full.feedforward);
  CHECK(trimmed.embed_head == full.embed_head);
  CHECK(trimmed.conditioning == full.conditioning);
}

TEST_CASE("block terms scale linearly in depth and quadratically in width") {
  BackboneConfig cfg = tiny_continuous_cfg();
  FlopsConvention conv;
  conv.attention_quadratic = false;  // the score term is linear in d

  const FlopsReport base = forward_flops(cfg, 16, conv);
  BackboneConfig deep = cfg;
  deep.layers = 8;
  const FlopsReport d2 = forward_flops(deep, 16, conv);
  CHECK(d2.attention == 2.0 * base.attention);
  CHECK(d2.feedforward == 2.0 * base.feedforward);

  BackboneConfig wide = cfg;
  wide.hidden = 256;  // gelu keeps d_ff = 4d, so both terms go as d^2
  const FlopsReport w2 = forward_flops(wide, 16, conv);
  CHECK(w2.attention == 4.0 * base.attention);
  CHECK(w2.feedforward == 4.0 * base.feedforward);
}

TEST_CASE("prepended conditioning row costs exactly one extra position") {
  BackboneConfig ic = tiny_discrete_cfg();
  ic.conditioning = Conditioning::in_context;
  BackboneConfig ada = tiny_discrete_cfg();

  const FlopsReport ric = forward_flops(ic, 4);
  const FlopsReport rbase = forward_flops(ada, 5);
  CHECK(ric.trunk_seq == 5);
  CHECK(ric.attention == rbase.attention);
  CHECK(ric.feedforward == rbase.feedforward);
  CHECK(ric.embed_head == rbase.embed_head);  // head runs over the full trunk
  CHECK(ric.conditioning == 16'384.0);  // embedder only

  BackboneConfig icc = tiny_continuous_cfg();
  icc.conditioning = Conditioning::in_context;
  const FlopsReport rc = forward_flops(icc, 4);
  // in_proj stays on the 4 data rows, head covers all 5
  CHECK(rc.embed_head == 4'096.0 + 98'304.0 + 2.0 * 5.0 * 128.0 * 4.0);
  const FlopsReport rc5 = forward_flops(tiny_continuous_cfg(), 5);
  CHECK(rc.attention == rc5.attention);
  CHECK(rc.feedforward == rc5.feedforward);
}

TEST_CASE("cross-attention conditioning bucket") {
  BackboneConfig cfg = tiny_discrete_cfg();
  cfg.conditioning = Conditioning::cross_attention;
  const FlopsReport r = forward_flops(cfg, 4);
  // embedder + per block two d*d maps and one broadcast add
  CHECK(r.conditioning == 16'384.0 + 4.0 * (2.0 * 2.0 * 128.0 * 128.0 + 4.0 * 128.0));
  CHECK(r.total == r.attention + r.feedforward + r.embed_head + r.conditioning);
}

TEST_CASE("S-size forward costs sit near the published scale") {
  BackboneConfig nt = BackboneConfig::preset(SizeClass::S, Family::discrete);
  nt.seq_len = 1024;
  nt.cond_dim = 1280;
  const FlopsReport rn = forward_flops(nt, 1024);
  CHECK(rn.total == 238'576'336'896.0);
  CHECK(std::abs(rn.total / 0.2261e12 - 1.0) < 0.25);

  BackboneConfig dit = BackboneConfig::preset(SizeClass::S, Family::continuous);
  dit.seq_len = 1024;
  dit.cond_dim = 1280;
  const FlopsReport rd = forward_flops(dit, 1024);
  CHECK(rd.total == 212'820'688'896.0);
  CHECK(std::abs(rd.total / 0.2133e12 - 1.0) < 0.25);

  CHECK(std::abs((rn.total / rd.total) / 1.060 - 1.0) < 0.10);

  CHECK(std::abs(static_cast<double>(param_count(nt).total) / 153.73e6 - 1.0) < 0.15);
  CHECK(std::abs(static_cast<double>(param_count(dit).total) / 131.13e6 - 1.0) < 0.15);
}

TEST_CASE("training cost is three forwards per sample") {
  CHECK(training_flops(0.0, 1e9) == 0.0);
  CHECK(training_flops(7.0, 3.0) == 63.0);
  const double run = training_flops(0.2261e12, 1.28e8);
  CHECK(run == 3.0 * 0.2261e12 * 1.28e8);
  CHECK(std::abs(run / 8.68e19 - 1.0) < 0.005);
}

TEST_CASE("forward_flops input validation") {
  CHECK_THROWS_AS((void)forward_flops(tiny_discrete_cfg(), 0), UsageError);
  BackboneConfig bad = tiny_discrete_cfg();
  bad.layers = 0;
  CHECK_THROWS_AS((void)forward_flops(bad, 4), ConfigError);
}

TEST_CASE("power law recovery on exact data") {
  std::vector<std::pair<double, double>> pts;
  for (int e = 12; e <= 18; ++e) {
    const double comp = std::pow(10.0, e);
    pts.push_back({comp, 5.0 * std::pow(comp, -0.3) + 1.0});
  }
  const ScalingFit fit = fit_power_law(pts);
  CHECK(fit.ok);
  CHECK(std::abs(fit.b / 0.3 - 1.0) < 0.01);
  CHECK(std::abs(fit.a / 5.0 - 1.0) < 0.01);
  CHECK(std::abs(fit.c - 1.0) < 1e-6);
  CHECK(fit.rss < 1e-12);
  CHECK(fit.r2 > 0.999999);
}

TEST_CASE("power law with a zero floor stays on the boundary") {
  std::vector<std::pair<double, double>> pts;
  for (int e = 3; e <= 9; ++e) {
    const double comp = std::pow(10.0, e);
    pts.push_back({comp, 2.0 * std::pow(comp, -0.5)});
  }
  const ScalingFit fit = fit_power_law(pts);
  CHECK(fit.ok);
  CHECK(fit.c == 0.0);
  CHECK(fit.rss < 1e-10);
  CHECK(std::abs(fit.b - 0.5) < 1e-6);
  CHECK(std::abs(fit.a - 2.0) < 1e-6);
}

TEST_CASE("power law exponent survives 1% multiplicative noise") {
  RngStream rng(2026, 77);
  std::vector<double> rel_err;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::pair<double, double>> pts;
    for (int i = 0; i < 8; ++i) {
      const double comp = std::pow(10.0, 6.0 + i);
      const double clean = 5.0 * std::pow(comp, -0.3);
      pts.push_back({comp, clean * (1.0 + 0.01 * rng.normal())});
    }
    const ScalingFit fit = fit_power_law(pts);
    rel_err.push_back(std::abs(fit.b / 0.3 - 1.0));
  }
  CHECK(median_of(rel_err) < 0.05);
}

TEST_CASE("power law fit is scale equivariant") {
  std::vector<std::pair<double, double>> pts, scaled;
  const double k = 7.5;
  for (int e = 10; e <= 16; ++e) {
    const double comp = std::pow(10.0, e);
    const double loss = 3.0 * std::pow(comp, -0.25) + 0.4;
    pts.push_back({comp, loss});
    scaled.push_back({k * comp, loss});
  }
  const ScalingFit f1 = fit_power_law(pts);
  const ScalingFit f2 = fit_power_law(scaled);
  CHECK(std::abs(f2.b - f1.b) < 1e-6);
  CHECK(std::abs(f2.c - f1.c) < 1e-6);
  CHECK(std::abs(f2.a / (f1.a * std::pow(k, f1.b)) - 1.0) < 1e-6);
}

TEST_CASE("power law degenerate inputs") {
  std::vector<std::pair<double, double>> three = {{1.0, 2.0}, {2.0, 1.5}, {3.0, 1.2}};
  CHECK_THROWS_AS((void)fit_power_law(three), UsageError);

  std::vector<std::pair<double, double>> bad_c = {{1.0, 2.0}, {0.0, 1.5}, {3.0, 1.2}, {4.0, 1.1}};
  CHECK_THROWS_AS((void)fit_power_law(bad_c), UsageError);

  std::vector<std::pair<double, double>> bad_l = {{1.0, 2.0}, {2.0, -1.5}, {3.0, 1.2}, {4.0, 1.1}};
  CHECK_THROWS_AS((void)fit_power_law(bad_l), UsageError);

  // rising losses give a negative exponent: reported, flagged not-ok
  std::vector<std::pair<double, double>> rising;
  for (int e = 1; e <= 5; ++e)
    rising.push_back({std::pow(10.0, e), std::pow(10.0, 0.3 * e)});
  const ScalingFit up = fit_power_law(rising);
  CHECK_FALSE(up.ok);
  CHECK(up.b < 0.0);

  // a single repeated compute value cannot pin a slope
  std::vector<std::pair<double, double>> flat = {{5.0, 2.0}, {5.0, 1.5}, {5.0, 1.2}, {5.0, 1.1}};
  const ScalingFit f = fit_power_law(flat);
  CHECK_FALSE(f.ok);
}

TEST_CASE("pareto frontier matches the quadratic scan") {
  RngStream rng(99, 1);
  std::vector<std::pair<double, double>> pts;
  for (int i = 0; i < 200; ++i)
    pts.push_back({rng.uniform() * 100.0, rng.uniform() * 10.0});

  for (bool lower : {true, false}) {
    CAPTURE(lower);
    const auto got = pareto_frontier(pts, lower);
    const auto want = frontier_oracle(pts, lower);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == want[i]);

    // staircase shape: compute strictly rises, metric strictly improves
    const double sign = lower ? 1.0 : -1.0;
    for (std::size_t i = 1; i < got.size(); ++i) {
      CHECK(pts[got[i]].first > pts[got[i - 1]].first);
      CHECK(sign * pts[got[i]].second < sign * pts[got[i - 1]].second);
    }
  }
}

TEST_CASE("pareto frontier edge cases") {
  std::vector<std::pair<double, double>> empty;
  CHECK(pareto_frontier(empty).empty());

  std::vector<std::pair<double, double>> one = {{3.0, 2.0}};
  const auto single = pareto_frontier(one);
  REQUIRE(single.size() == 1);
  CHECK(single[0] == 0);

  // exact duplicates keep only the earliest
  std::vector<std::pair<double, double>> dup = {{1.0, 1.0}, {1.0, 1.0}, {1.0, 1.0}};
  const auto kept = pareto_frontier(dup);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0] == 0);

  // dominated interior point drops out
  std::vector<std::pair<double, double>> tri = {{1.0, 3.0}, {2.0, 4.0}, {3.0, 1.0}};
  const auto f = pareto_frontier(tri);
  REQUIRE(f.size() == 2);
  CHECK(f[0] == 0);
  CHECK(f[1] == 2);

  // higher-is-better flips which points survive
  const auto g = pareto_frontier(tri, false);
  REQUIRE(g.size() == 2);
  CHECK(g[0] == 0);
  CHECK(g[1] == 1);
}

}  // TEST_SUITE
