#pragma once

#include <span>
#include <vector>

#include "tempal/agent/agent.hpp"
#include "tempal/alignment/alignment.hpp"
#include "tempal/numcore/adam.hpp"

namespace tempal {

struct PpoConfig {
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip_eps = 0.1;
  double value_coef = 0.5;
  double entropy_coef = 0.01;
  int n_policy_epochs = 3;
  int n_minibatches = 4;
  double learning_rate = 2.5e-4;
  double max_grad_norm = 0.5;

  void validate() const;
  friend bool operator==(const PpoConfig&, const PpoConfig&) = default;
};

template <typename S>
using MatrixT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using VectorT = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
struct GaeResult {
  MatrixT<S> advantages;  // [T×E]
  MatrixT<S> returns;     // advantages + values
};

/// Generalized advantage estimation over [T×E] rollouts. dones(t, e) != 0 means
/// the episode ended at step t, so nothing after it is bootstrapped. Throws
/// ContractError on mismatched sizes.
template <typename S>
GaeResult<S> compute_gae(const MatrixT<S>& rewards, const MatrixT<S>& values, const MatrixT<S>& dones,
                         const VectorT<S>& bootstrap, S gamma, S lambda);

/// (x - mean) / (std + 1e-8) over all entries, population std.
template <typename S>
MatrixT<S> normalize_advantages(const MatrixT<S>& advantages);

/// Constant per-sample inputs of the clipped objective.
template <typename S>
struct PpoTargets {
  VectorT<S> old_log_probs, advantages, returns;
};

template <typename S>
struct PpoLosses {
  Tensor<S> policy_loss, value_loss, entropy, total;
};

/// Mean entropy of the rows of a policy output.
template <typename S>
Tensor<S> policy_entropy(GradTape<S>& tape, const PolicyOutput<S>& out);

/// policy = -mean(min(r A, clip(r, 1 - eps, 1 + eps) A)), r = exp(new - old);
/// value = mean((v - R)^2); total = policy + value_coef value - entropy_coef entropy.
template <typename S>
PpoLosses<S> ppo_losses(GradTape<S>& tape, const PpoTargets<S>& targets, const Tensor<S>& new_log_probs,
                        const Tensor<S>& new_values, const Tensor<S>& entropy, const PpoConfig& cfg);

/// One rollout of T steps from E environments. Per environment the buffer keeps
/// a frame sequence: the tail of the episode in progress when the rollout began
/// (context), then the observation at every step and the final observation used
/// for bootstrapping. Embeddings of the same sequence back the history inputs.
/// Sample ids are step-major, id = t * E + e with t in [0, T]; t = T is the
/// bootstrap state.
class RolloutBuffer {
 public:
  RolloutBuffer(int rollout_len, int n_envs, int height, int width, int stack, int history_len, int embedding_dim);

  int rollout_len() const { return rollout_len_; }
  int n_envs() const { return n_envs_; }
  int n_samples() const { return rollout_len_ * n_envs_; }
  bool with_history() const { return embedding_dim_ > 0; }
  /// Frames of context kept from an earlier rollout: max(stack, history_len) - 1.
  int context_len() const { return context_; }

  /// Starts env e's part of a new rollout. `tail` holds the current episode's most
  /// recent frames, oldest first, ending with the current observation; extra
  /// leading rows beyond the context are ignored. `tail_embeddings` matches it
  /// row for row (ignored without history).
  void begin(int env, const FrameRows& tail, const Eigen::MatrixXf& tail_embeddings);
  void record_action(int t, int env, int action, float log_prob, float value);
  /// Outcome of step t; `next` is the following observation (the reset frame if done).
  void record_outcome(int t, int env, float reward, bool done, const float* next,
                      const Eigen::VectorXf& next_embedding);
  void set_bootstrap(int env, float value) { bootstrap_(env) = value; }
  /// True once every step's outcome has been recorded.
  bool full() const;

  /// Builds stacks [n×stack×h×w] and histories [n×N×d] for sample ids; a null
  /// target is skipped. Histories require an embedding_dim > 0.
  void fill_inputs(std::span<const Index> ids, Tensorf* stacks, Tensorf* histories) const;
  /// Inputs of every env at step t (t = T gives the bootstrap states).
  void step_inputs(int t, Tensorf* stacks, Tensorf* histories) const;

  /// Re-encodes every stored frame with the given encoder.
  void reembed(const EncoderParams<float>& encoder);

  /// Tail of env e's current episode at the end of the rollout (for the next begin()).
  FrameRows episode_tail(int env) const;
  Eigen::MatrixXf episode_tail_embeddings(int env) const;

  /// Observation at step t of env e (t = T: bootstrap observation).
  Eigen::Map<const Eigen::RowVectorXf> frame(int t, int env) const;
  /// Whether step t of env e is the first step of an episode.
  bool episode_start(int t, int env) const;

  Eigen::MatrixXi actions;
  Eigen::MatrixXf rewards, dones, log_probs, values;  // [T×E]
  Eigen::VectorXf bootstrap_values() const { return bootstrap_; }

 private:
  Index seq_row(int t, int env) const { return Index(ctx_len_[std::size_t(env)]) + t; }
  void check(int t, int env, int t_max) const;

  int rollout_len_, n_envs_, height_, width_, stack_, history_len_, embedding_dim_, context_;
  std::vector<FrameRows> seq_;
  std::vector<Eigen::MatrixXf> emb_;
  std::vector<int> ctx_len_;
  std::vector<std::vector<Index>> start_;  // per env, per step: sequence row where the episode began
  Eigen::MatrixXi recorded_;
  Eigen::VectorXf bootstrap_;
};

/// Recomputes log_probs, values and bootstrap values of the buffer under the
/// current parameters and embeddings.
void recompute_estimates(const AgentParams<float>& params, RolloutBuffer& buffer);

struct PpoStats {
  double policy_loss = 0, value_loss = 0, entropy = 0, approx_kl = 0, clip_fraction = 0;
  int n_updates = 0;
};

/// GAE on the buffer, per-update advantage normalization, then n_policy_epochs
/// passes of shuffled minibatches with gradient clipping and Adam. Only the
/// mode's trainable parameters change. ContractError when the buffer is not full.
PpoStats update_policy(AgentParams<float>& params, const RolloutBuffer& buffer, const PpoConfig& cfg,
                       AdamState<float>& opt, Rng& rng);

}  // namespace tempal
