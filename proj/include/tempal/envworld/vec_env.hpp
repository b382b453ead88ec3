#pragma once

#include <memory>
#include <vector>

#include "tempal/envworld/env.hpp"

namespace tempal {

/// Fixed set of independently stepped environments with auto-reset.
class VecEnv {
 public:
  /// n copies of `config`, slot i seeded from a split of config.seed.
  VecEnv(const EnvConfig& config, int n_envs);
  /// One environment per config, seeds taken as given.
  explicit VecEnv(const std::vector<EnvConfig>& configs);

  int size() const { return static_cast<int>(envs_.size()); }
  int n_actions() const { return envs_.front()->n_actions(); }
  Env& env(int i) { return *envs_.at(static_cast<std::size_t>(i)); }
  const Env& env(int i) const { return *envs_.at(static_cast<std::size_t>(i)); }

  std::vector<Observation> reset();

  /// Steps every slot. A slot whose episode ended reports done=true and the
  /// first frame of its fresh episode in `obs`.
  std::vector<StepResult> step(std::span<const int> actions);

 private:
  std::vector<std::unique_ptr<Env>> envs_;
};

}  // namespace tempal
