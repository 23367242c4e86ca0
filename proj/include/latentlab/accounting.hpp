#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "latentlab/backbone.hpp"

namespace latentlab {

// Conventions baked into every report. mac2 counts a multiply-accumulate as
// two FLOPs (the usual convention); turning it off halves every matmul-like
// term. attention_quadratic toggles the s^2*d score/mix term, which some
// comparisons drop at short sequence lengths.
struct FlopsConvention {
  bool mac2 = true;
  bool attention_quadratic = true;
};

// Forward-pass FLOPs for one sample, split by where they are spent.
//   attention    qkv/out projections plus (optionally) the s^2 score term
//   feedforward  the MLP in every block
//   embed_head   input projection, time MLP, and the output head
//   conditioning cond embedder, adaLN maps and applies, cross-attn reads
// The four buckets sum to total exactly. trunk_seq is the number of rows the
// blocks actually process (seq + 1 when the conditioning vector is prepended
// as a context row).
struct FlopsReport {
  double attention = 0.0;
  double feedforward = 0.0;
  double embed_head = 0.0;
  double conditioning = 0.0;
  double total = 0.0;
  std::size_t seq = 0;
  std::size_t trunk_seq = 0;
  FlopsConvention convention;
};

FlopsReport forward_flops(const BackboneConfig& cfg, std::size_t seq,
                          FlopsConvention conv = {});

// Classic 3x rule: one forward plus a ~2x backward, times samples seen.
double training_flops(double forward_flops_per_sample, double samples);

// L(C) = a * C^-b + c fitted on (compute, loss) points. rss and r2 are
// measured in log-excess space, i.e. on log(L - c) against log C, which is
// where the inner regression lives. ok is false when the fit degenerates
// (non-positive slope, fewer than two distinct compute values, ...).
struct ScalingFit {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
  double rss = 0.0;
  double r2 = 0.0;
  bool ok = false;
};

// Needs >= 4 points with positive compute; loss floor c is found by
// golden-section search on [0, min L), slope/intercept by least squares.
ScalingFit fit_power_law(std::span<const std::pair<double, double>> points);

// Indices of non-dominated (compute, metric) points, sorted by compute.
// A point is dominated when another costs no more and scores at least as
// well, strictly better in one of the two.
std::vector<std::size_t> pareto_frontier(std::span<const std::pair<double, double>> points,
                                         bool lower_is_better = true);

}  // namespace latentlab
