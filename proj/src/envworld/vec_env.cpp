#include "tempal/envworld/vec_env.hpp"

namespace tempal {

VecEnv::VecEnv(const EnvConfig& config, int n_envs) {
  if (n_envs < 1) throw ConfigError("n_envs must be >= 1");
  const Rng root(config.seed);
  for (int i = 0; i < n_envs; ++i) {
    EnvConfig c = config;
    c.seed = root.split("env", static_cast<std::uint64_t>(i)).key();
    envs_.push_back(make_env(c));
  }
}

VecEnv::VecEnv(const std::vector<EnvConfig>& configs) {
  if (configs.empty()) throw ConfigError("VecEnv needs at least one config");
  for (const auto& c : configs) envs_.push_back(make_env(c));
  for (const auto& e : envs_) {
    if (e->n_actions() != envs_.front()->n_actions()) throw ConfigError("VecEnv: action counts differ");
  }
}

std::vector<Observation> VecEnv::reset() {
  std::vector<Observation> out;
  out.reserve(envs_.size());
  for (auto& e : envs_) out.push_back(e->reset());
  return out;
}

std::vector<StepResult> VecEnv::step(std::span<const int> actions) {
  if (actions.size() != envs_.size()) {
    throw ContractError("vec_step: " + std::to_string(actions.size()) + " actions for " +
                        std::to_string(envs_.size()) + " environments");
  }
  std::vector<StepResult> out;
  out.reserve(envs_.size());
  for (std::size_t i = 0; i < envs_.size(); ++i) {
    StepResult r = envs_[i]->step(actions[i]);
    if (r.done) r.obs = envs_[i]->reset();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace tempal
