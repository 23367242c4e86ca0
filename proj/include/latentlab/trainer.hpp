#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "latentlab/backbone.hpp"
#include "latentlab/codec.hpp"
#include "latentlab/metrics.hpp"
#include "latentlab/objectives.hpp"
#include "latentlab/optim.hpp"

namespace latentlab {

// One training run: an objective + size class over a frozen codec, fed by
// the synthetic stream, with metric/checkpoint cadence and early stopping.
// Everything here lands in the run's config.json, so a finished (or aborted)
// run can be re-executed from its directory alone.
struct TrainConfig {
  Objective objective = Objective::next_token;
  SizeClass size = SizeClass::T;
  Conditioning conditioning = Conditioning::adaln_zero;
  std::string codec_ref;  // saved-codec prefix (bookkeeping; loader is the caller)
  std::string probe_ref;  // saved-probe prefix when image metrics run

  std::uint64_t steps = 10000;
  std::size_t batch_size = 64;
  std::size_t shards = 1;        // micro-batches the batch is split into
  bool parallel_shards = false;  // run the micro-batches on threads

  LrSchedule lr;  // lr.total == 0 means "use steps"
  AdamwConfig adamw;
  bool ema = false;
  double ema_decay = 0.99;
  std::uint64_t ema_interval = 100;
  double cond_dropout = 0.10;

  std::uint64_t dataset_cap = 0;  // 0 = unbounded stream
  std::uint64_t seed = 0;         // model init + objective noise
  std::uint64_t data_seed = 7;    // identity of the synthetic stream

  std::uint64_t eval_interval = 500;
  std::size_t eval_count = 256;
  std::size_t sample_count = 0;  // images per eval for FFD/consistency; 0 = skip
  std::size_t sample_steps = 0;  // iterative sampler steps at eval; 0 = default
  bool save_images = false;      // write eval samples under samples/
  std::uint64_t checkpoint_interval = 0;  // 0 = final checkpoint only
  double early_stop_ratio = 0.0;  // stop once eval <= ratio * first eval; 0 = off

  void validate() const;  // throws ConfigError
  // Per-objective schedule defaults: peak 3e-3 (tokens) / 1e-4 (flow),
  // cosine to 3e-5, warmup 1000.
  static TrainConfig defaults(Objective obj);
};

// JSON round-trip with stable (alphabetical) keys; unknown keys are
// rejected with ConfigError. A zero lr.peak is filled from the objective
// default, so grid cells can share one schedule block across families.
std::string train_config_json_text(const TrainConfig& cfg);
TrainConfig train_config_from_json_text(const std::string& text);

// One row of metrics.csv. Image metrics are NaN on rows where no sampling
// ran; train losses are NaN on the step-0 row.
struct MetricRecord {
  std::uint64_t step = 0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();  // EMA-smoothed
  double train_loss_raw = std::numeric_limits<double>::quiet_NaN();
  double eval_loss = 0.0;
  double ffd = std::numeric_limits<double>::quiet_NaN();
  double cond_consistency = std::numeric_limits<double>::quiet_NaN();
  double flops = 0.0;  // cumulative training FLOPs, closed form
  double wall_seconds = 0.0;
};

std::string metric_csv_header();
std::string metric_csv_row(const MetricRecord& r);
MetricRecord metric_csv_parse(const std::string& line);  // IoError on bad rows

// Shared frozen pieces a run trains against. Token objectives draw from
// token_codec, flow matching from flow_codec; the probe powers FFD and
// conditioning-consistency evals (required only when sample_count > 0).
struct RunContext {
  const Autoencoder* token_codec = nullptr;
  const Autoencoder* flow_codec = nullptr;
  const AttributeProbe* probe = nullptr;

  const Autoencoder& codec_for(Objective obj) const;  // ConfigError when absent
};

struct TrainResult {
  std::vector<MetricRecord> records;
  std::string run_dir;
  std::uint64_t steps_done = 0;
  bool early_stopped = false;
  double latent_std = 1.0;  // flow runs: std of the raw training latents
};

// Runs one training job into run_dir: config.json + runtime.json up front,
// metrics.csv appended (and flushed) per eval, checkpoints/NNNNNN.{raw,ema},
// samples/step_NNNNNN/*.ppm when save_images is on, status.json last.
// Divergence writes status.json and rethrows, preserving the partial log.
TrainResult train_run(const TrainConfig& cfg, const RunContext& ctx,
                      const std::string& run_dir);

// Cartesian experiment grid. Every axis must be non-empty; cells inherit the
// base config, take the axis values, and get seed = base.seed + cell index
// (fixed by enumeration order, independent of scheduling).
struct GridAxes {
  std::vector<Objective> objectives = {Objective::next_token};
  std::vector<SizeClass> sizes = {SizeClass::T};
  std::vector<std::uint64_t> dataset_caps = {0};
  std::vector<LrSchedule::Kind> schedules = {LrSchedule::Kind::cosine};
  std::vector<bool> ema = {false};
  std::vector<Conditioning> conditioning = {Conditioning::adaln_zero};
};

struct GridCell {
  std::string name;  // directory slug, e.g. nt_T_cap0_cos_ema0_adaln
  TrainConfig config;
};

// Cell enumeration (objectives outermost, conditioning innermost), exposed
// so tests can pin seeds and names without running anything.
std::vector<GridCell> grid_cells(const TrainConfig& base, const GridAxes& axes);

struct GridCellResult {
  std::string name;
  std::string dir;
  bool failed = false;
  std::string error;
  std::vector<MetricRecord> records;
};

struct GridResult {
  std::vector<GridCellResult> cells;
  std::size_t failures = 0;
  std::string grid_csv;  // path of the aggregate CSV
};

// Runs every cell into out_dir/<name>, catching per-cell failures so the
// rest of the grid still runs; writes out_dir/grid.csv (one row per eval
// point of every finished cell) and out_dir/grid_status.json. jobs > 1
// dispatches cells to that many threads.
GridResult run_experiment_grid(const TrainConfig& base, const GridAxes& axes,
                               const RunContext& ctx, const std::string& out_dir,
                               std::size_t jobs = 1);

}  // namespace latentlab
