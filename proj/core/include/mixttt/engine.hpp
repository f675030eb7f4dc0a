#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mixttt/aux_tasks.hpp"
#include "mixttt/data.hpp"
#include "mixttt/errors.hpp"
#include "mixttt/mixup.hpp"
#include "mixttt/network.hpp"

namespace mixttt {

// ---- test-time episodes -------------------------------------------------------

enum class EpisodeMode { single_reset, batch_online };

struct EpisodeConfig {
  double alpha{1e-3};  // plain gradient-descent step size
  int steps{10};
  AuxTaskSpec task;
  EpisodeMode mode{EpisodeMode::single_reset};
  bool mix_enabled{true};
  std::uint64_t seed{0};
  std::size_t mix_batch{32};              // rows per update batch
  std::vector<int> feature_checkpoints;   // record eval features after these step counts

  void validate() const;  // steps >= 1; alpha >= 0 (0 gives the no-op baseline)
};

struct StepRecord {
  double aux_loss{0.0};
  double grad_norm_theta{0.0};  // L2 over the full encoder gradient
  int feature_ref{-1};          // index into feature_snapshots, -1 when none
};

struct EpisodeResult {
  std::vector<int> predictions;        // main-task class per test input
  std::vector<StepRecord> trace;       // exactly `steps` entries
  std::vector<Tensor> feature_snapshots;
  std::vector<int> checkpoint_steps;   // aligned with feature_snapshots
};

// Raised when an episode hits a non-finite loss or gradient; carries the step
// index and the trace recorded so far.
class EpisodeError : public NumericalError {
 public:
  EpisodeError(const std::string& msg, int step, std::vector<StepRecord> partial)
      : NumericalError(msg + " at step " + std::to_string(step)),
        step(step),
        partial_trace(std::move(partial)) {}
  int step;
  std::vector<StepRecord> partial_trace;
};

// One test-time adaptation run: per step, build the mixed (or plain) batch,
// apply the task transform, take one gradient step of size alpha on the
// task's parameter subset; then predict. single_reset restores a snapshot
// afterwards. pool is required iff mix_enabled; stats are required for the
// contrastive task.
EpisodeResult ttt_episode(SplitNetworkState& state, const Tensor& test_inputs,
                          const EpisodeConfig& config, const TrainPartnerPool* pool,
                          const TrainFeatureStats* stats = nullptr);

// Argmax over main-head logits in eval mode; ties break toward the lowest
// class index. test_input is a single image [1,C,H,W].
int infer(SplitNetworkState& state, const Tensor& test_input);

std::vector<int> infer_batch(SplitNetworkState& state, const Tensor& inputs);

// Eval-mode features computed in bounded chunks.
Tensor eval_features(SplitNetworkState& state, const Tensor& inputs);

// ---- pretraining ----------------------------------------------------------------

struct PretrainConfig {
  int epochs{8};
  std::size_t batch_size{64};
  double aux_weight{1.0};  // beta
  std::string lr_schedule{"constant:0.05"};  // constant:x | cosine:x | step:x:k:f
  std::uint64_t seed{0};
  int aux_rotations_per_image{1};  // rotated copies appended per main row
  double momentum{0.9};

  void validate() const;
};

struct EpochMetrics {
  int epoch{0};
  double lr{0.0};
  double main_loss{0.0};
  double aux_loss{0.0};
  double train_accuracy{0.0};
};

struct PretrainResult {
  std::vector<EpochMetrics> epochs;
  TrainFeatureStats feature_stats;  // over the training set, final parameters
  double final_train_accuracy{0.0};
};

// Joint multi-task pretraining: minimizes main cross-entropy plus
// aux_weight times rotation cross-entropy with momentum SGD.
PretrainResult pretrain(SplitNetworkState& state, const Dataset& train, const PretrainConfig& config);

TrainFeatureStats compute_feature_stats(SplitNetworkState& state, const Dataset& data);

double parse_schedule_lr(const std::string& schedule, int epoch, int total_epochs);

// ---- corruption suites ------------------------------------------------------------

struct SuiteEntry {
  std::string corruption;
  int severity{5};
  Dataset test;
};

struct SuiteRow {
  std::string corruption;
  int severity{0};
  std::string method;  // baseline | ttt | mixttt
  double error_percent{0.0};
  std::size_t n_samples{0};
  std::uint64_t seed{0};
};

// Per-corruption error table for {baseline, plain TTT, MixTTT}. Episodes for
// the two TTT methods share per-sample seeds (paired comparison); samples run
// in parallel on cloned states and aggregate by index. A final "average" row
// per method carries the mean of its per-corruption error rates.
std::vector<SuiteRow> run_suite(const SplitNetworkState& state, const std::vector<SuiteEntry>& entries,
                                const Dataset& train, const EpisodeConfig& episode_template,
                                const TrainFeatureStats* stats, std::uint64_t seed);

}  // namespace mixttt
