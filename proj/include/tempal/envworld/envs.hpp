#pragma once

#include "tempal/envworld/env.hpp"

namespace tempal {

/// Corridor ending in a T junction. A cue on the first frame only says which
/// arm is rewarded.
///
/// Actions: 0 forward, 1 left, 2 right. Inside the corridor every action
/// advances one cell, so the agent cannot stash information in its own
/// trajectory. At the junction left/right ends the episode (+1 if it matches
/// the cue, else 0) and forward waits. Running out of max_episode_steps ends
/// the episode with 0.
///
/// Each episode also draws a wall pattern of texture_bits random bits that is
/// drawn on every frame. It carries no information about the cue.
class TMaze final : public Env {
 public:
  enum class Cue : int { kLeft = 0, kRight = 1 };
  static constexpr int kForward = 0, kLeft = 1, kRight = 2;

  explicit TMaze(const EnvConfig& config);

  Observation reset() override;
  /// Reset with a chosen cue and wall pattern (oracles and tests).
  Observation reset_with_cue(Cue cue, std::uint32_t texture = 0);
  StepResult step(int action) override;

  int n_actions() const override { return 3; }
  int height() const override { return height_; }
  int width() const override { return width_; }
  std::string name() const override { return "tmaze"; }
  bool active() const override { return active_; }
  std::vector<std::uint64_t> save_state() const override;
  void load_state(std::span<const std::uint64_t> words) override;

  int position() const { return position_; }
  Cue cue() const { return cue_; }
  int corridor_length() const { return corridor_length_; }
  std::uint32_t texture() const { return texture_; }

 private:
  Observation render(bool show_cue) const;

  int width_, height_, corridor_length_, texture_bits_, max_steps_;
  Rng rng_;
  std::uint32_t texture_ = 0;
  int position_ = 0;
  int t_ = 0;
  Cue cue_ = Cue::kLeft;
  bool active_ = false;
};

/// Ball falling diagonally onto a paddle on the bottom row; one catch per episode.
///
/// Actions: 0 left, 1 stay, 2 right. Each step the paddle moves (at most one
/// cell), then the ball moves one diagonal cell reflecting off the side and
/// top walls. When the ball enters the bottom row the episode ends with +1 if
/// its column is under the paddle, else 0. A single frame shows position but
/// not velocity.
class BounceBall final : public Env {
 public:
  struct State {
    int ball_x = 0, ball_y = 0, vel_x = 1, vel_y = 1, paddle_x = 0;
    friend bool operator==(const State&, const State&) = default;
  };

  explicit BounceBall(const EnvConfig& config);

  Observation reset() override;
  Observation reset_to(const State& s);
  StepResult step(int action) override;

  int n_actions() const override { return 3; }
  int height() const override { return height_; }
  int width() const override { return width_; }
  std::string name() const override { return "bounce_ball"; }
  bool active() const override { return active_; }
  std::vector<std::uint64_t> save_state() const override;
  void load_state(std::span<const std::uint64_t> words) override;

  const State& state() const { return state_; }
  int paddle_width() const { return paddle_width_; }

  /// Pure transition: (next state, landed, caught).
  struct Transition {
    State next;
    bool landed;
    bool caught;
  };
  Transition transition(const State& s, int action) const;
  Observation render(const State& s) const;

  /// Initial states are uniform over this set.
  std::vector<State> initial_states() const;

 private:
  int width_, height_, paddle_width_, max_steps_;
  Rng rng_;
  State state_;
  int t_ = 0;
  bool active_ = false;
};

/// One-step two-armed bandit with a constant observation; arm 1 pays 1, arm 0 pays 0.
class Bandit final : public Env {
 public:
  explicit Bandit(const EnvConfig& config);

  Observation reset() override;
  StepResult step(int action) override;

  int n_actions() const override { return 2; }
  int height() const override { return height_; }
  int width() const override { return width_; }
  std::string name() const override { return "bandit"; }
  bool active() const override { return active_; }
  std::vector<std::uint64_t> save_state() const override;
  void load_state(std::span<const std::uint64_t> words) override;

 private:
  int width_, height_;
  bool active_ = false;
};

/// Blanks the wrapped environment's frames with probability obscure_prob.
/// Rewards and dynamics pass through unchanged.
class FlickerEnv final : public Env {
 public:
  FlickerEnv(std::unique_ptr<Env> inner, double obscure_prob, std::uint64_t seed);

  Observation reset() override;
  StepResult step(int action) override;

  int n_actions() const override { return inner_->n_actions(); }
  int height() const override { return inner_->height(); }
  int width() const override { return inner_->width(); }
  std::string name() const override { return inner_->name(); }
  bool active() const override { return inner_->active(); }
  std::vector<std::uint64_t> save_state() const override;
  void load_state(std::span<const std::uint64_t> words) override;

  const Env& inner() const { return *inner_; }
  double obscure_prob() const { return obscure_prob_; }

 private:
  Observation maybe_blank(Observation obs);

  std::unique_ptr<Env> inner_;
  double obscure_prob_;
  Rng rng_;
};

std::unique_ptr<Env> flicker_wrap(std::unique_ptr<Env> env, double obscure_prob, std::uint64_t seed);

/// Exact optimal expected (undiscounted) return of a policy that sees the full
/// hidden state, averaged over the initial-state distribution. Flicker does
/// not change this optimum, but hidden-state DP is only defined on the bare
/// environments, so a config with obscure_prob > 0 is rejected.
double optimal_return(const EnvConfig& config);

}  // namespace tempal
