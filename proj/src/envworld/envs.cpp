#include "tempal/envworld/envs.hpp"

#include <algorithm>
#include <functional>

namespace tempal {
namespace {

void expect_words(std::span<const std::uint64_t> words, std::size_t n, const char* env) {
  if (words.size() != n) {
    throw FormatError(std::string(env) + ": expected " + std::to_string(n) + " state words, got " +
                      std::to_string(words.size()));
  }
}

}  // namespace

void EnvConfig::validate() const {
  if (name != "tmaze" && name != "bounce_ball" && name != "bandit") {
    throw ConfigError("unknown environment name '" + name + "'");
  }
  if (width < 8 || height < 8) throw ConfigError("width and height must be >= 8");
  if (corridor_length < 1) throw ConfigError("corridor_length must be >= 1");
  const int max_bits = std::min(24, 2 * ((width - 4) / 2));
  if (texture_bits < 0 || texture_bits > max_bits) {
    throw ConfigError("texture_bits must be in [0, " + std::to_string(max_bits) + "]");
  }
  if (paddle_width < 1 || paddle_width > width) throw ConfigError("paddle_width must be in [1, width]");
  if (!(obscure_prob >= 0.0 && obscure_prob <= 1.0)) throw ConfigError("obscure_prob must be in [0, 1]");
  if (max_episode_steps < 1) throw ConfigError("max_episode_steps must be >= 1");
}

void Env::check_action(int action) const {
  if (!active()) throw ContractError(name() + ": step() called without an active episode; call reset()");
  if (action < 0 || action >= n_actions()) {
    throw ContractError(name() + ": action " + std::to_string(action) + " outside [0, " +
                        std::to_string(n_actions()) + ")");
  }
}

// ---------------------------------------------------------------- TMaze

TMaze::TMaze(const EnvConfig& config)
    : width_(config.width),
      height_(config.height),
      corridor_length_(config.corridor_length),
      texture_bits_(config.texture_bits),
      max_steps_(config.max_episode_steps),
      rng_(config.seed) {}

Observation TMaze::reset() {
  const auto cue = static_cast<Cue>(rng_.uniform_int(0, 1));
  const auto texture = static_cast<std::uint32_t>(rng_.uniform_int(0, (std::int64_t{1} << texture_bits_) - 1));
  return reset_with_cue(cue, texture);
}

Observation TMaze::reset_with_cue(Cue cue, std::uint32_t texture) {
  cue_ = cue;
  texture_ = texture & ((std::uint32_t{1} << texture_bits_) - 1);
  position_ = 0;
  t_ = 0;
  active_ = true;
  return render(true);
}

StepResult TMaze::step(int action) {
  check_action(action);
  StepResult r;
  ++t_;
  if (position_ < corridor_length_) {
    ++position_;
  } else if (action != kForward) {
    r.done = true;
    const bool correct = (action == kLeft) == (cue_ == Cue::kLeft);
    r.reward = correct ? 1.0f : 0.0f;
    r.info["correct"] = correct ? 1.0 : 0.0;
  }
  if (!r.done && t_ >= max_steps_) {
    r.done = true;
    r.info["timeout"] = 1.0;
  }
  active_ = !r.done;
  r.obs = render(false);
  return r;
}

Observation TMaze::render(bool show_cue) const {
  Observation o = Observation::Zero(height_, width_);
  const int mid = height_ / 2;
  o.block(mid - 1, 1, 2, width_ - 3).setConstant(0.2f);            // corridor floor
  o.block(2, width_ - 2, height_ - 4, 2).setConstant(0.4f);       // junction arms
  const int col = 1 + position_ * (width_ - 5) / corridor_length_;  // 1 .. w-4
  o.block(mid - 1, col, 2, 2).setConstant(0.8f);
  // Wall pattern: bits alternate between an upper and a lower wall row.
  for (int j = 0; j < texture_bits_; ++j) {
    if ((texture_ >> j) & 1u) o(j % 2 == 0 ? 3 : height_ - 4, 2 + 2 * (j / 2)) = 0.3f;
  }
  if (show_cue) {
    const int row = cue_ == Cue::kLeft ? 0 : height_ - 2;
    o.block(row, 0, 2, 2).setConstant(1.0f);
  }
  return o;
}

std::vector<std::uint64_t> TMaze::save_state() const {
  return {rng_.key(),        rng_.counter(),         std::uint64_t(position_), std::uint64_t(t_),
          std::uint64_t(cue_), std::uint64_t(active_), std::uint64_t(texture_)};
}

void TMaze::load_state(std::span<const std::uint64_t> w) {
  expect_words(w, 7, "tmaze");
  rng_ = Rng(w[0], w[1]);
  position_ = int(w[2]);
  t_ = int(w[3]);
  cue_ = static_cast<Cue>(w[4]);
  active_ = w[5] != 0;
  texture_ = static_cast<std::uint32_t>(w[6]);
}

// ---------------------------------------------------------------- BounceBall

BounceBall::BounceBall(const EnvConfig& config)
    : width_(config.width),
      height_(config.height),
      paddle_width_(config.paddle_width),
      max_steps_(config.max_episode_steps),
      rng_(config.seed) {}

std::vector<BounceBall::State> BounceBall::initial_states() const {
  std::vector<State> out;
  for (int y = 0; y < height_ / 2; ++y)
    for (int x = 0; x < width_; ++x)
      for (int vx : {-1, 1})
        for (int vy : {-1, 1})
          for (int p = 0; p <= width_ - paddle_width_; ++p) out.push_back({x, y, vx, vy, p});
  return out;
}

Observation BounceBall::reset() {
  State s;
  s.ball_y = int(rng_.uniform_int(0, height_ / 2 - 1));
  s.ball_x = int(rng_.uniform_int(0, width_ - 1));
  s.vel_x = rng_.bernoulli(0.5) ? 1 : -1;
  s.vel_y = rng_.bernoulli(0.5) ? 1 : -1;
  s.paddle_x = int(rng_.uniform_int(0, width_ - paddle_width_));
  return reset_to(s);
}

Observation BounceBall::reset_to(const State& s) {
  state_ = s;
  t_ = 0;
  active_ = true;
  return render(state_);
}

BounceBall::Transition BounceBall::transition(const State& s, int action) const {
  State n = s;
  n.paddle_x = std::clamp(s.paddle_x + (action - 1), 0, width_ - paddle_width_);
  int x = s.ball_x + s.vel_x;
  if (x < 0 || x >= width_) {
    n.vel_x = -s.vel_x;
    x = s.ball_x + n.vel_x;
  }
  int y = s.ball_y + s.vel_y;
  if (y < 0) {
    n.vel_y = -s.vel_y;
    y = s.ball_y + n.vel_y;
  }
  n.ball_x = x;
  n.ball_y = y;
  const bool landed = y >= height_ - 1;
  const bool caught = landed && x >= n.paddle_x && x < n.paddle_x + paddle_width_;
  return {n, landed, caught};
}

StepResult BounceBall::step(int action) {
  check_action(action);
  const Transition tr = transition(state_, action);
  state_ = tr.next;
  ++t_;
  StepResult r;
  if (tr.landed) {
    r.done = true;
    r.reward = tr.caught ? 1.0f : 0.0f;
    r.info["caught"] = tr.caught ? 1.0 : 0.0;
  } else if (t_ >= max_steps_) {
    r.done = true;
    r.info["timeout"] = 1.0;
  }
  active_ = !r.done;
  r.obs = render(state_);
  return r;
}

Observation BounceBall::render(const State& s) const {
  Observation o = Observation::Zero(height_, width_);
  o.block(height_ - 1, s.paddle_x, 1, paddle_width_).setConstant(0.5f);
  o(s.ball_y, s.ball_x) = 1.0f;
  return o;
}

std::vector<std::uint64_t> BounceBall::save_state() const {
  auto u = [](int v) { return static_cast<std::uint64_t>(static_cast<std::int64_t>(v)); };
  return {rng_.key(),        rng_.counter(),        u(state_.ball_x), u(state_.ball_y), u(state_.vel_x),
          u(state_.vel_y),   u(state_.paddle_x),    u(t_),            u(active_)};
}

void BounceBall::load_state(std::span<const std::uint64_t> w) {
  expect_words(w, 9, "bounce_ball");
  auto i = [](std::uint64_t v) { return static_cast<int>(static_cast<std::int64_t>(v)); };
  rng_ = Rng(w[0], w[1]);
  state_ = {i(w[2]), i(w[3]), i(w[4]), i(w[5]), i(w[6])};
  t_ = i(w[7]);
  active_ = w[8] != 0;
}

// ---------------------------------------------------------------- Bandit

Bandit::Bandit(const EnvConfig& config) : width_(config.width), height_(config.height) {}

Observation Bandit::reset() {
  active_ = true;
  return Observation::Constant(height_, width_, 0.5f);
}

StepResult Bandit::step(int action) {
  check_action(action);
  active_ = false;
  StepResult r;
  r.obs = Observation::Constant(height_, width_, 0.5f);
  r.reward = action == 1 ? 1.0f : 0.0f;
  r.done = true;
  return r;
}

std::vector<std::uint64_t> Bandit::save_state() const { return {std::uint64_t(active_)}; }

void Bandit::load_state(std::span<const std::uint64_t> w) {
  expect_words(w, 1, "bandit");
  active_ = w[0] != 0;
}

// ---------------------------------------------------------------- Flicker

FlickerEnv::FlickerEnv(std::unique_ptr<Env> inner, double obscure_prob, std::uint64_t seed)
    : inner_(std::move(inner)), obscure_prob_(obscure_prob), rng_(seed) {
  if (!(obscure_prob >= 0.0 && obscure_prob <= 1.0)) throw ConfigError("obscure_prob must be in [0, 1]");
}

Observation FlickerEnv::maybe_blank(Observation obs) {
  if (rng_.uniform<double>() < obscure_prob_) obs.setZero();
  return obs;
}

Observation FlickerEnv::reset() { return maybe_blank(inner_->reset()); }

StepResult FlickerEnv::step(int action) {
  StepResult r = inner_->step(action);
  r.obs = maybe_blank(std::move(r.obs));
  return r;
}

std::vector<std::uint64_t> FlickerEnv::save_state() const {
  std::vector<std::uint64_t> w = inner_->save_state();
  w.push_back(rng_.key());
  w.push_back(rng_.counter());
  return w;
}

void FlickerEnv::load_state(std::span<const std::uint64_t> w) {
  if (w.size() < 2) throw FormatError("flicker: state too short");
  inner_->load_state(w.first(w.size() - 2));
  rng_ = Rng(w[w.size() - 2], w[w.size() - 1]);
}

std::unique_ptr<Env> flicker_wrap(std::unique_ptr<Env> env, double obscure_prob, std::uint64_t seed) {
  return std::make_unique<FlickerEnv>(std::move(env), obscure_prob, seed);
}

std::unique_ptr<Env> make_env(const EnvConfig& config) {
  config.validate();
  std::unique_ptr<Env> env;
  if (config.name == "tmaze") {
    env = std::make_unique<TMaze>(config);
  } else if (config.name == "bounce_ball") {
    env = std::make_unique<BounceBall>(config);
  } else {
    env = std::make_unique<Bandit>(config);
  }
  if (config.obscure_prob > 0.0) {
    env = flicker_wrap(std::move(env), config.obscure_prob, Rng(config.seed).split("flicker").key());
  }
  return env;
}

// ---------------------------------------------------------------- optimal_return

namespace {

constexpr std::size_t kMaxDpStates = 1'000'000;

double bounce_ball_optimum(const EnvConfig& config) {
  BounceBall env(config);
  const std::size_t n_states = std::size_t(config.width) * config.height * 4 *
                               std::size_t(config.width - config.paddle_width + 1);
  if (n_states > kMaxDpStates) {
    throw CapacityError("optimal_return: " + std::to_string(n_states) + " hidden states exceed the DP limit");
  }
  // Ball motion ignores actions and always reaches the bottom row, so the
  // state graph is acyclic and memoised recursion terminates.
  const int w = config.width, np = config.width - config.paddle_width + 1;
  auto index = [&](const BounceBall::State& s) {
    return ((((std::size_t(s.ball_y) * w + s.ball_x) * 2 + (s.vel_x > 0)) * 2 + (s.vel_y > 0)) * np) + s.paddle_x;
  };
  std::vector<signed char> value(n_states, -1);
  std::function<int(const BounceBall::State&)> solve = [&](const BounceBall::State& s) -> int {
    signed char& v = value[index(s)];
    if (v >= 0) return v;
    int best = 0;
    for (int a = 0; a < 3 && best < 1; ++a) {
      auto tr = env.transition(s, a);
      best = std::max(best, tr.landed ? int(tr.caught) : solve(tr.next));
    }
    v = static_cast<signed char>(best);
    return best;
  };
  auto landing_time = [&](BounceBall::State s) {
    int t = 0;
    while (true) {
      auto tr = env.transition(s, 1);
      ++t;
      if (tr.landed) return t;
      s = tr.next;
    }
  };
  double total = 0.0;
  const auto starts = env.initial_states();
  for (const auto& s : starts) {
    if (landing_time(s) > config.max_episode_steps) continue;  // times out before landing
    total += solve(s);
  }
  return total / double(starts.size());
}

}  // namespace

double optimal_return(const EnvConfig& config) {
  config.validate();
  if (config.obscure_prob > 0.0) {
    throw ContractError(
        "optimal_return: defined on the hidden state of bare environments; flicker leaves the full-state "
        "optimum unchanged, evaluate the unwrapped config instead");
  }
  if (config.name == "tmaze") {
    // Full state includes the cue: walk the corridor, turn toward the cue.
    return config.corridor_length + 1 <= config.max_episode_steps ? 1.0 : 0.0;
  }
  if (config.name == "bandit") return 1.0;
  return bounce_ball_optimum(config);
}

}  // namespace tempal
