#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tempal/alignment/encoder.hpp"

namespace tempal {

enum class AgentMode { kEnsemble, kInstantOnly, kHistoryOnly };

/// Throws ConfigError for anything but ensemble | instant_only | history_only.
AgentMode parse_agent_mode(const std::string& name);
std::string to_string(AgentMode mode);

struct AgentConfig {
  AgentMode mode = AgentMode::kEnsemble;
  int n_actions = 3;
  int height = 16, width = 16;
  int stack = 4;             // frames in I(t)
  int history_len = 16;      // N
  int embedding_dim = 32;    // d
  int history_channels = 4;  // 1-D conv output channels
  int history_fc = -1;       // < 0: 128, or 512 in history_only mode
  int instant_conv1 = 16, instant_conv2 = 32;
  int instant_fc = 128;

  void validate() const;
  bool uses_instant() const { return mode != AgentMode::kHistoryOnly; }
  bool uses_history() const { return mode != AgentMode::kInstantOnly; }
  constexpr int resolved_history_fc() const {
    return history_fc >= 0 ? history_fc : (mode == AgentMode::kHistoryOnly ? 512 : 128);
  }
  friend bool operator==(const AgentConfig&, const AgentConfig&) = default;
};

template <typename S>
struct InstantBranch {
  ConvStack<S> convs;
  Tensor<S> fc_w, fc_b, pi_w, pi_b, v_w, v_b;
  std::vector<Tensor<S>> parameters() const { return {convs.conv1_w, convs.conv1_b, convs.conv2_w, convs.conv2_b,
                                                      fc_w, fc_b, pi_w, pi_b, v_w, v_b}; }
};

/// One history sub-network: kernel-1 conv over the N time channels, flatten,
/// FC + ReLU, linear output head.
template <typename S>
struct HistorySubnet {
  Tensor<S> conv_w, conv_b, fc_w, fc_b, out_w, out_b;
  std::vector<Tensor<S>> parameters() const { return {conv_w, conv_b, fc_w, fc_b, out_w, out_b}; }
  Index conv_parameter_count() const { return conv_w.size() + conv_b.size(); }
};

template <typename S>
struct AgentParams {
  AgentConfig config;
  InstantBranch<S> instant;
  HistorySubnet<S> history_policy, history_value;

  /// Orthogonal init: gain sqrt 2 for hidden layers, 0.01 for policy heads, 1 for value heads; zero biases.
  static AgentParams init(const AgentConfig& config, Rng rng);

  std::vector<Tensor<S>> instant_parameters() const { return instant.parameters(); }
  std::vector<Tensor<S>> history_parameters() const;
  /// Every tensor, in checkpoint order.
  std::vector<Tensor<S>> all_parameters() const;
  static std::vector<std::string> parameter_names();
  /// Parameters the configured mode trains.
  std::vector<Tensor<S>> trainable_parameters() const;

  template <typename To>
  AgentParams<To> cast() const;
};

/// Per-sample branch (or ensemble) output.
template <typename S>
struct PolicyOutput {
  Tensor<S> probs;      // [n×A]
  Tensor<S> log_probs;  // [n×A]
  Tensor<S> value;      // [n]
};

/// Counts branch evaluations; lets callers verify which branches a mode touches.
struct BranchProbe {
  std::int64_t instant_calls = 0;
  std::int64_t history_calls = 0;
};

/// stacks [n×stack×h×w] -> policy/value from the instantaneous branch.
template <typename S>
PolicyOutput<S> instant_forward(GradTape<S>& tape, const AgentParams<S>& params, const Tensor<S>& stacks,
                                BranchProbe* probe = nullptr);

/// histories [n×N×d] -> policy from the policy sub-network, value from the value sub-network.
template <typename S>
PolicyOutput<S> history_forward(GradTape<S>& tape, const AgentParams<S>& params, const Tensor<S>& histories,
                                BranchProbe* probe = nullptr);

/// probs = renormalized (a.probs + b.probs) / 2, value = (a.value + b.value) / 2.
/// ContractError when the action counts differ.
template <typename S>
PolicyOutput<S> ensemble(GradTape<S>& tape, const PolicyOutput<S>& a, const PolicyOutput<S>& b);

/// Output of the configured mode. Inputs the mode does not use may be empty tensors.
template <typename S>
PolicyOutput<S> policy_forward(GradTape<S>& tape, const AgentParams<S>& params, const Tensor<S>& stacks,
                               const Tensor<S>& histories, BranchProbe* probe = nullptr);

struct ActResult {
  std::vector<int> actions;
  std::vector<float> log_probs;
  std::vector<float> values;
};

/// Samples (or, if greedy, takes the argmax of) the mode's distribution per row.
ActResult act(const AgentParams<float>& params, const Tensorf& stacks, const Tensorf& histories, Rng& rng,
              bool greedy = false, BranchProbe* probe = nullptr);

/// Index into an episode buffer for the i-th newest entry at position t:
/// max(t - i, episode_start), i.e. repeat the first entry at episode start.
inline Index padded_index(Index t, Index episode_start, Index i) { return std::max(t - i, episode_start); }

struct AgentInputs {
  Tensorf stack;    // [stack×h×w], channel 0 newest
  Tensorf history;  // [N×d], row 0 newest
};

/// Builds I(t) and H(t) for the newest entry of the buffers. Entries before
/// episode_start belong to earlier episodes and are never used.
AgentInputs assemble_inputs(std::span<const Observation> frames, const Eigen::MatrixXf& embeddings,
                            Index episode_start, int stack, int history_len);

/// Trainable parameters of both history sub-networks, from layer shapes.
constexpr Index history_branch_parameter_count(const AgentConfig& c) {
  const Index fc_units = c.resolved_history_fc();
  const Index conv = Index(c.history_len) * c.history_channels + c.history_channels;
  const Index fc = Index(c.history_channels) * c.embedding_dim * fc_units + fc_units;
  const Index pi = fc_units * c.n_actions + c.n_actions;
  const Index v = fc_units + 1;
  return 2 * (conv + fc) + pi + v;
}

template <typename S>
template <typename To>
AgentParams<To> AgentParams<S>::cast() const {
  AgentParams<To> out;
  out.config = config;
  out.instant.convs.shape = instant.convs.shape;
  auto src = all_parameters();
  auto make = [&](std::size_t i) {
    auto t = tensor_cast<To>(src[i]);
    t.set_requires_grad(true);
    return t;
  };
  out.instant.convs.conv1_w = make(0);
  out.instant.convs.conv1_b = make(1);
  out.instant.convs.conv2_w = make(2);
  out.instant.convs.conv2_b = make(3);
  out.instant.fc_w = make(4);
  out.instant.fc_b = make(5);
  out.instant.pi_w = make(6);
  out.instant.pi_b = make(7);
  out.instant.v_w = make(8);
  out.instant.v_b = make(9);
  HistorySubnet<To>* subs[2] = {&out.history_policy, &out.history_value};
  for (std::size_t s = 0; s < 2; ++s) {
    const std::size_t o = 10 + 6 * s;
    subs[s]->conv_w = make(o);
    subs[s]->conv_b = make(o + 1);
    subs[s]->fc_w = make(o + 2);
    subs[s]->fc_b = make(o + 3);
    subs[s]->out_w = make(o + 4);
    subs[s]->out_b = make(o + 5);
  }
  return out;
}

}  // namespace tempal
