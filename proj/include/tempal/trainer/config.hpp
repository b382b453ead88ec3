#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "tempal/agent/agent.hpp"
#include "tempal/alignment/alignment.hpp"
#include "tempal/envworld/env.hpp"
#include "tempal/ppo/ppo.hpp"

namespace tempal {

struct TrainConfig {
  std::int64_t total_steps = 500'000;
  int n_envs = 8;
  int rollout_len = 128;
  double pretrain_fraction = 0.01;
  std::uint64_t seed = 0;
  int eval_interval = 25;  // iterations; 0 disables periodic evaluation
  int eval_episodes = 20;
  int final_eval_episodes = 100;
  int checkpoint_interval = 25;  // iterations; the final state is always saved

  EnvConfig env;
  AlignmentConfig align;
  PpoConfig ppo;
  AgentConfig agent;

  /// Throws ConfigError naming the offending key.
  void validate() const;

  /// round(pretrain_fraction * total_steps), or 0 when the mode has no encoder.
  std::int64_t pretrain_steps() const;
  int steps_per_iteration() const { return n_envs * rollout_len; }
  /// floor((total_steps - consumed pretrain steps) / steps_per_iteration).
  int n_iterations() const;
  /// Agent layout implied by the environment, alignment and agent fields.
  AgentConfig resolved_agent() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Parses `key = value` lines; `#` starts a comment. Keys are namespaced
/// (env., align., ppo., agent., train.); unknown keys, duplicates and bad
/// values raise ConfigError with the line number. The result is validated.
TrainConfig parse_config(std::string_view text);
/// parse_config on a file; IoError if it cannot be read.
TrainConfig load_config(const std::filesystem::path& path);
/// Every key with its value, one per line, in a fixed order. parse_config
/// of the result gives back an equal config.
std::string to_config_text(const TrainConfig& cfg);
/// Every recognized key, in to_config_text order.
std::vector<std::string> config_keys();
/// FNV-1a hash of to_config_text.
std::uint64_t config_fingerprint(const TrainConfig& cfg);

}  // namespace tempal
