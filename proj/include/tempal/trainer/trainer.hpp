#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tempal/envworld/vec_env.hpp"
#include "tempal/trainer/checkpoint.hpp"
#include "tempal/trainer/config.hpp"

namespace tempal {

enum class Stage { kPretrain, kCollect, kAlign, kOptimize };
std::string to_string(Stage stage);

/// One executed stage with parameter checksums taken before and after it.
struct StageEvent {
  int iteration = 0;  // 0 for pretraining
  Stage stage = Stage::kCollect;
  std::uint64_t encoder_before = 0, encoder_after = 0;
  std::uint64_t agent_before = 0, agent_after = 0;
};

/// One row of the metrics CSV. NaN marks a value that does not apply
/// (no finished episode, no encoder).
struct IterationMetrics {
  int iteration = 0;
  std::int64_t steps = 0;
  double mean_return = 0, align_loss = 0, align_score = 0;
  double policy_loss = 0, value_loss = 0, entropy = 0;
};

/// FNV-1a over the bits of every tensor, in order.
std::uint64_t parameter_checksum(std::span<const Tensorf> params);

/// Runs `episodes` episodes of the agent on fresh environments built from
/// `env` and returns the undiscounted return of each. Episode i uses its own
/// environment and sampling streams derived from `seed`, so the result does
/// not depend on how episodes are batched. `encoder` may be null when the
/// agent has no history branch.
std::vector<double> run_episodes(const AgentParams<float>& agent, const EncoderParams<float>* encoder,
                                 const EnvConfig& env, int episodes, bool greedy, std::uint64_t seed);

/// Owns the whole training state: environments, observation store, encoder,
/// agent, optimizers and random streams.
class Trainer {
 public:
  explicit Trainer(TrainConfig cfg);
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  /// Random-agent steps into the store, then n_pretrain_epochs encoder epochs.
  /// Does nothing in instant_only mode. Returns the mean loss of each epoch.
  std::vector<double> pretrain();
  bool pretrained() const { return pretrained_; }

  /// Collect one rollout, align the encoder, re-embed the rollout and
  /// recompute its estimates, then optimize the policy.
  IterationMetrics train_iteration();
  bool finished() const { return iteration_ >= cfg_.n_iterations(); }

  /// Evaluation with actions sampled from the policy (argmax when `greedy`), on
  /// a seed derived from the master seed and `tag`.
  std::vector<double> evaluate(int episodes, std::uint64_t tag, bool greedy = false) const;

  const TrainConfig& config() const { return cfg_; }
  int iteration() const { return iteration_; }
  std::int64_t env_steps() const { return env_steps_; }
  const AgentParams<float>& agent() const { return agent_; }
  /// Null in instant_only mode.
  const EncoderParams<float>* encoder() const { return has_encoder() ? &encoder_ : nullptr; }
  const ObservationStore& store() const { return store_; }
  const std::vector<StageEvent>& events() const { return events_; }
  /// The fixed random-walk trajectory the alignment score is measured on.
  const std::vector<Observation>& probe_trajectory() const { return probe_; }
  bool has_encoder() const { return cfg_.agent.mode != AgentMode::kInstantOnly; }

  Checkpoint checkpoint() const;
  /// Rebuilds a trainer from checkpoint(); continuing it is equivalent to
  /// never having stopped. ConfigError if the stored config is invalid.
  static std::unique_ptr<Trainer> restore(const Checkpoint& ckpt);

 private:
  struct EnvSlot {
    FrameRows tail;              // current episode, oldest first, ending with the current frame
    Eigen::MatrixXf tail_emb;    // embeddings of `tail` (history modes)
    std::uint64_t trajectory = 0;
    std::int32_t step = 0;
    double episode_return = 0;
  };

  void start_episode(EnvSlot& slot, const Observation& first);
  void append_frame(EnvSlot& slot, const Observation& frame);
  std::uint64_t encoder_checksum() const;
  std::uint64_t agent_checksum() const;
  StageEvent open_event(Stage stage) const;
  void close_event(StageEvent event);
  double probe_score() const;

  TrainConfig cfg_;
  AgentConfig agent_cfg_;
  VecEnv envs_;
  std::vector<EnvSlot> slots_;
  ObservationStore store_;
  EncoderParams<float> encoder_;
  AgentParams<float> agent_;
  AdamState<float> encoder_opt_, agent_opt_;
  Rng align_rng_, action_rng_, ppo_rng_;
  std::vector<Observation> probe_;
  std::uint64_t next_trajectory_ = 0;
  std::int64_t env_steps_ = 0;
  int iteration_ = 0;
  bool pretrained_ = false;
  std::vector<StageEvent> events_;
};

/// The networks of a checkpoint, without optimizer or environment state.
struct PolicySnapshot {
  TrainConfig config;
  AgentParams<float> agent;
  std::optional<EncoderParams<float>> encoder;  // empty in instant_only mode
  int iteration = 0;
  std::int64_t env_steps = 0;
};

PolicySnapshot load_policy(const Checkpoint& ckpt);

struct TrainOptions {
  std::filesystem::path out_dir;  // metrics.csv, eval.csv, checkpoint.tmpl
  bool resume = false;            // continue from out_dir/checkpoint.tmpl when present
  int stop_after = -1;            // stop (and checkpoint) once this many iterations are done
  std::function<void(const IterationMetrics&)> on_iteration;
  std::function<void(const std::string&)> log;
};

struct TrainResult {
  int iterations = 0;
  std::int64_t env_steps = 0;
  bool finished = false;
  std::vector<double> final_returns;  // final evaluation, empty if not finished
};

inline constexpr const char* kMetricsHeader = "iter,steps,mean_return,align_loss,align_score,policy_loss,value_loss,entropy";
inline constexpr const char* kEvalHeader = "iter,steps,episodes,mean_return,std_return";

/// Pretraining, iterations until the budget is spent with periodic
/// evaluation and checkpoints, then the final evaluation. Files are written
/// under options.out_dir; I/O failures raise IoError naming the path.
TrainResult train(const TrainConfig& cfg, const TrainOptions& options);

/// Formats a value with 8 significant digits ("nan" for NaN).
std::string format_number(double v);

}  // namespace tempal
