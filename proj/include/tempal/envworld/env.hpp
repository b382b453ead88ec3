#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tempal/errors.hpp"
#include "tempal/numcore/rng.hpp"

namespace tempal {

/// Grayscale frame, values in [0, 1], row-major so it flattens like a tensor.
using Observation = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct StepResult {
  Observation obs;
  float reward = 0.0f;
  bool done = false;
  std::map<std::string, double> info;
};

struct EnvConfig {
  std::string name = "tmaze";  // tmaze | bounce_ball | bandit
  int width = 16;
  int height = 16;
  int corridor_length = 8;      // tmaze
  int texture_bits = 8;         // tmaze: per-episode wall pattern, 0 disables
  int paddle_width = 3;         // bounce_ball
  double obscure_prob = 0.0;    // flicker wrapper when > 0
  int max_episode_steps = 100;
  std::uint64_t seed = 0;

  /// Throws ConfigError on out-of-range fields or an unknown name.
  void validate() const;
  friend bool operator==(const EnvConfig&, const EnvConfig&) = default;
};

/// Episodic environment with a discrete action set.
///
/// Lifecycle: reset() -> step()* until done -> reset(). Stepping a finished
/// (or never reset) episode throws ContractError.
class Env {
 public:
  virtual ~Env() = default;

  virtual Observation reset() = 0;
  virtual StepResult step(int action) = 0;

  virtual int n_actions() const = 0;
  virtual int height() const = 0;
  virtual int width() const = 0;
  virtual std::string name() const = 0;
  virtual bool active() const = 0;

  /// Complete hidden state (including RNG) as integer words; load_state restores it exactly.
  virtual std::vector<std::uint64_t> save_state() const = 0;
  virtual void load_state(std::span<const std::uint64_t> words) = 0;

 protected:
  void check_action(int action) const;
};

std::unique_ptr<Env> make_env(const EnvConfig& config);

/// Default shift for alignment augmentation: ceil(h/21), i.e. 4 at 84px, 1 at 16px.
inline int default_max_shift(int height) { return (height + 20) / 21; }

}  // namespace tempal
