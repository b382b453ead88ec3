#include <doctest.h>

#include <cmath>

#include "tempal/envworld/envs.hpp"
#include "tempal/envworld/vec_env.hpp"
#include "tempal/numcore/gradcheck.hpp"
#include "tempal/ppo/ppo.hpp"
#include "test_util.hpp"

using namespace tempal;
using tempal::test::random_tensor;

namespace {

// Advantages as explicit discounted sums of TD errors, truncated at episode ends.
Eigen::MatrixXd brute_force_gae(const Eigen::MatrixXd& r, const Eigen::MatrixXd& v, const Eigen::MatrixXd& d,
                                const Eigen::VectorXd& boot, double gamma, double lambda) {
  const Index t_len = r.rows();
  auto value_after = [&](Index t, Index e) { return t + 1 < t_len ? v(t + 1, e) : boot(e); };
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(t_len, r.cols());
  for (Index e = 0; e < r.cols(); ++e) {
    for (Index t = 0; t < t_len; ++t) {
      double weight = 1.0;
      for (Index k = t; k < t_len; ++k) {
        const bool ended = d(k, e) != 0.0;
        const double delta = r(k, e) + (ended ? 0.0 : gamma * value_after(k, e)) - v(k, e);
        a(t, e) += weight * delta;
        if (ended) break;
        weight *= gamma * lambda;
      }
    }
  }
  return a;
}

Eigen::MatrixXd random_matrix(Index rows, Index cols, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m(i) = 2.0 * rng.uniform<double>() - 1.0;
  return m;
}

PpoTargets<double> random_targets(Index n, Rng& rng) {
  PpoTargets<double> t;
  t.old_log_probs = (random_matrix(n, 1, rng).array() - 1.0).matrix();
  t.advantages = random_matrix(n, 1, rng);
  t.returns = random_matrix(n, 1, rng);
  return t;
}

AgentConfig tiny_agent(AgentMode mode, int n_actions) {
  AgentConfig c;
  c.mode = mode;
  c.n_actions = n_actions;
  c.height = c.width = 10;
  c.stack = 2;
  c.history_len = 3;
  c.embedding_dim = 4;
  c.history_channels = 2;
  c.history_fc = 5;
  c.instant_conv1 = 2;
  c.instant_conv2 = 3;
  c.instant_fc = 6;
  return c;
}

// Buffer of T x E frames where frame value encodes (t, e); episodes end where `done` says.
RolloutBuffer scripted_buffer(int t_len, int n_envs, const std::vector<std::pair<int, int>>& ends, int stack,
                              int history, int dim) {
  RolloutBuffer b(t_len, n_envs, 2, 2, stack, history, dim);
  auto code = [](int t, int e) { return float(100 * e + t); };
  for (int e = 0; e < n_envs; ++e) {
    FrameRows tail(1, 4);
    tail.setConstant(code(0, e));
    b.begin(e, tail, Eigen::MatrixXf::Constant(1, dim, code(0, e)));
  }
  for (int t = 0; t < t_len; ++t)
    for (int e = 0; e < n_envs; ++e) {
      b.record_action(t, e, 0, 0.0f, 0.0f);
      bool done = false;
      for (auto [dt, de] : ends) done = done || (dt == t && de == e);
      const Eigen::RowVector4f next = Eigen::RowVector4f::Constant(code(t + 1, e));
      b.record_outcome(t, e, 0.0f, done, next.data(), Eigen::VectorXf::Constant(dim, code(t + 1, e)));
    }
  return b;
}

}  // namespace

TEST_CASE("GAE examples") {
  using M = MatrixT<double>;
  using V = VectorT<double>;
  SUBCASE("single terminal step") {
    auto g = compute_gae<double>(M::Constant(1, 1, 1.0), M::Constant(1, 1, 0.5), M::Constant(1, 1, 1.0),
                                 V::Constant(1, 7.0), 0.99, 0.95);
    CHECK(g.advantages(0, 0) == doctest::Approx(0.5));
    CHECK(g.returns(0, 0) == doctest::Approx(1.0));
  }
  SUBCASE("two steps, gamma = lambda = 1") {
    M r(2, 1), v(2, 1);
    r << 1, 0;
    v << 0.5, 0.4;
    auto g = compute_gae<double>(r, v, M::Zero(2, 1), V::Zero(1), 1.0, 1.0);
    CHECK(g.advantages(0, 0) == doctest::Approx(0.5));
    CHECK(g.advantages(1, 0) == doctest::Approx(-0.4));
  }
  SUBCASE("myopic") {
    Rng rng(1);
    M r = random_matrix(6, 3, rng), v = random_matrix(6, 3, rng);
    auto g = compute_gae<double>(r, v, M::Zero(6, 3), V::Ones(3), 0.0, 0.95);
    CHECK((g.advantages - (r - v)).cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK_THROWS_AS(compute_gae<double>(M::Zero(3, 2), M::Zero(3, 2), M::Zero(3, 2), V::Zero(3), 0.9, 0.9),
                  ContractError);
  CHECK_THROWS_AS(compute_gae<double>(M::Zero(3, 2), M::Zero(2, 2), M::Zero(3, 2), V::Zero(2), 0.9, 0.9),
                  ContractError);
}

TEST_CASE("GAE matches the brute-force sum on random rollouts") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Index t_len = 1 + rng.uniform_int(0, 40), n = 1 + rng.uniform_int(0, 5);
    Eigen::MatrixXd r = random_matrix(t_len, n, rng), v = random_matrix(t_len, n, rng);
    Eigen::MatrixXd d(t_len, n);
    for (Index i = 0; i < d.size(); ++i) d(i) = rng.bernoulli(0.15) ? 1.0 : 0.0;
    Eigen::VectorXd boot = random_matrix(n, 1, rng);
    const double gamma = 0.9 + 0.1 * rng.uniform<double>(), lambda = rng.uniform<double>();
    auto g = compute_gae<double>(r, v, d, boot, gamma, lambda);
    CHECK((g.advantages - brute_force_gae(r, v, d, boot, gamma, lambda)).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((g.returns - g.advantages - v).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("advantage normalization") {
  Rng rng(3);
  Eigen::MatrixXf a = (random_matrix(128, 8, rng) * 5.0).array().cast<float>() + 3.0f;
  Eigen::MatrixXf n = normalize_advantages<float>(a);
  const double mean = n.cast<double>().mean();
  const double sd = std::sqrt((n.cast<double>().array() - mean).square().mean());
  CHECK(std::abs(mean) < 1e-6);
  CHECK(std::abs(sd - 1.0) < 1e-4);
}

TEST_CASE("clipped surrogate examples") {
  PpoConfig cfg;
  GradTape<double> t(false);
  SUBCASE("unchanged policy with normalized advantages") {
    Rng rng(4);
    Eigen::MatrixXd adv = normalize_advantages<double>(random_matrix(16, 1, rng));
    PpoTargets<double> tg{Eigen::VectorXd::Constant(16, -0.7), adv, Eigen::VectorXd::Zero(16)};
    auto l = ppo_losses(t, tg, Tensord({16}, tg.old_log_probs), Tensord({16}), Tensord::scalar(0.0), cfg);
    CHECK(std::abs(l.policy_loss.item()) < 1e-12);
  }
  SUBCASE("clip active above 1 + eps") {
    PpoTargets<double> tg{Eigen::VectorXd::Zero(1), Eigen::VectorXd::Ones(1), Eigen::VectorXd::Zero(1)};
    auto l = ppo_losses(t, tg, Tensord({1}, {std::log(1.5)}), Tensord({1}), Tensord::scalar(0.0), cfg);
    CHECK(l.policy_loss.item() == doctest::Approx(-1.1));
  }
  SUBCASE("negative advantage is bounded as the ratio vanishes") {
    PpoTargets<double> tg{Eigen::VectorXd::Zero(1), -Eigen::VectorXd::Ones(1), Eigen::VectorXd::Zero(1)};
    for (double ratio : {0.5, 1e-3, 1e-9}) {
      GradTape<double> tape;
      Tensord lp({1}, {std::log(ratio)}, true);
      auto l = ppo_losses(tape, tg, lp, Tensord({1}), Tensord::scalar(0.0), cfg);
      CHECK(l.policy_loss.item() == doctest::Approx(0.9));
      tape.backward(l.policy_loss);
      CHECK(lp.grad()(0) == 0.0);
    }
  }
  SUBCASE("value and total") {
    PpoTargets<double> tg{Eigen::VectorXd::Zero(2), Eigen::VectorXd::Zero(2), Eigen::Vector2d(1.0, -1.0)};
    auto l = ppo_losses(t, tg, Tensord({2}), Tensord({2}, {0.0, 1.0}), Tensord::scalar(0.8), cfg);
    CHECK(l.value_loss.item() == doctest::Approx(2.5));
    CHECK(l.total.item() == doctest::Approx(0.5 * 2.5 - 0.01 * 0.8));
  }
}

TEST_CASE("PPO loss gradients pass the finite-difference check") {
  PpoConfig cfg;
  cfg.clip_eps = 0.2;
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const Index n = 12;
    auto tg = random_targets(n, rng);
    // New log-probs near the old ones so both clipped and unclipped terms occur,
    // but never within 1e-3 of a clip boundary.
    Tensord lp({n});
    for (Index i = 0; i < n; ++i) {
      double r;
      do {
        r = 0.6 + 0.8 * rng.uniform<double>();
      } while (std::abs(r - 0.8) < 1e-3 || std::abs(r - 1.2) < 1e-3);
      lp[i] = tg.old_log_probs(i) + std::log(r);
    }
    Tensord v = random_tensor<double>({n}, rng);
    Tensord ent = Tensord::scalar(0.3 + rng.uniform<double>());
    auto total = [&](GradTape<double>& t, const Tensord&) { return ppo_losses(t, tg, lp, v, ent, cfg).total; };
    CHECK(finite_diff_check<double>(total, lp, 1e-6) < 1e-4);
    CHECK(finite_diff_check<double>(total, v, 1e-6) < 1e-4);
    CHECK(finite_diff_check<double>(total, ent, 1e-6) < 1e-4);
  }
}

TEST_CASE("PPO total loss through the agent passes the finite-difference check") {
  PpoConfig cfg;
  Rng rng(6);
  for (auto mode : {AgentMode::kEnsemble, AgentMode::kInstantOnly, AgentMode::kHistoryOnly}) {
    auto c = tiny_agent(mode, 3);
    auto p = AgentParams<double>::init(c, Rng(7));
    p.instant.pi_w.data() *= 30.0;
    p.history_policy.out_w.data() *= 30.0;
    // Nonzero biases keep every ReLU pre-activation off the kink even when a
    // layer's whole input is zero.
    const auto names0 = AgentParams<double>::parameter_names();
    auto all0 = p.all_parameters();
    for (std::size_t i = 0; i < all0.size(); ++i) {
      if (names0[i].ends_with(".b")) all0[i].data() = tempal::test::random_away_from_zero<double>(all0[i].shape(), rng).data() * 0.3;
    }
    const Index n = 4;
    Tensord stacks = random_tensor<double>({n, c.stack, c.height, c.width}, rng, 0.0, 1.0);
    Tensord hist = random_tensor<double>({n, c.history_len, c.embedding_dim}, rng);
    const std::vector<int> acts = {0, 1, 2, 1};
    auto tg = random_targets(n, rng);
    // Old log-probs equal to the current ones keep every ratio at 1, away from the clip kinks.
    {
      GradTape<double> t(false);
      auto out = policy_forward(t, p, stacks, hist);
      for (Index i = 0; i < n; ++i) tg.old_log_probs(i) = out.log_probs.matrix()(i, acts[std::size_t(i)]);
    }
    ScalarFn<double> f = [&](GradTape<double>& t, const Tensord&) {
      auto out = policy_forward(t, p, stacks, hist);
      auto lp = gather_cols(t, out.log_probs, std::span<const int>(acts));
      return ppo_losses(t, tg, lp, out.value, policy_entropy(t, out), cfg).total;
    };
    const auto names = AgentParams<double>::parameter_names();
    const auto all = p.all_parameters();
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (i < 10 ? !c.uses_instant() : !c.uses_history()) continue;
      CAPTURE(names[i]);
      CAPTURE(to_string(mode));
      CHECK(finite_diff_check<double>(f, all[i], 1e-5) < 1e-4);
    }
  }
}

TEST_CASE("rollout buffer builds inputs within episodes") {
  // Env 0 ends its episode at step 2; env 1 never ends.
  auto b = scripted_buffer(5, 2, {{2, 0}}, 3, 4, 2);
  CHECK(b.full());
  CHECK(b.context_len() == 3);
  Tensorf stacks, hist;
  const std::vector<Index> ids = {1 * 2 + 0, 4 * 2 + 0, 3 * 2 + 1, 5 * 2 + 0};
  b.fill_inputs(ids, &stacks, &hist);
  CHECK(stacks.shape() == Shape{4, 3, 2, 2});
  CHECK(hist.shape() == Shape{4, 4, 2});
  auto stack_at = [&](Index k, Index ch) { return stacks[(k * 3 + ch) * 4]; };
  auto hist_at = [&](Index k, Index row) { return hist[(k * 4 + row) * 2]; };
  // (t=1, e=0): frames 1, 0, 0
  CHECK(stack_at(0, 0) == 1.0f);
  CHECK(stack_at(0, 1) == 0.0f);
  CHECK(stack_at(0, 2) == 0.0f);
  // (t=4, e=0): new episode began at t=3, so 4, 3, 3 and never 2.
  CHECK(stack_at(1, 0) == 4.0f);
  CHECK(stack_at(1, 1) == 3.0f);
  CHECK(stack_at(1, 2) == 3.0f);
  for (int i = 0; i < 4; ++i) CHECK(hist_at(1, i) == (i == 0 ? 4.0f : 3.0f));
  // (t=3, e=1): 103, 102, 101 and history 103..100
  CHECK(stack_at(2, 0) == 103.0f);
  CHECK(stack_at(2, 2) == 101.0f);
  CHECK(hist_at(2, 3) == 100.0f);
  // Bootstrap state of env 0 (t=5).
  CHECK(stack_at(3, 0) == 5.0f);
  CHECK(stack_at(3, 2) == 3.0f);
  CHECK(b.episode_start(3, 0));
  CHECK_FALSE(b.episode_start(4, 0));
  CHECK(b.episode_start(0, 1));

  // Tails carry the current episode into the next rollout.
  auto tail0 = b.episode_tail(0);
  CHECK(tail0.rows() == 3);  // frames 3, 4, 5
  CHECK(tail0(0, 0) == 3.0f);
  auto tail1 = b.episode_tail(1);
  CHECK(tail1.rows() == 4);  // context 3 + current
  CHECK(tail1(0, 0) == 102.0f);
  CHECK(b.episode_tail_embeddings(1)(3, 0) == 105.0f);

  RolloutBuffer next(2, 2, 2, 2, 3, 4, 2);
  next.begin(0, tail0, b.episode_tail_embeddings(0));
  next.begin(1, tail1, b.episode_tail_embeddings(1));
  next.step_inputs(0, &stacks, &hist);
  CHECK(stacks[0] == 5.0f);
  CHECK(stacks[4] == 4.0f);
  CHECK(stacks[8] == 3.0f);
  CHECK(hist[(0 * 4 + 3) * 2] == 3.0f);
  CHECK(hist[(1 * 4 + 3) * 2] == 102.0f);
  CHECK_FALSE(next.full());
  CHECK_THROWS_AS(next.step_inputs(1, &stacks, &hist), ContractError);
}

TEST_CASE("rollout buffer contracts") {
  RolloutBuffer b(3, 1, 2, 2, 2, 3, 0);
  CHECK_FALSE(b.with_history());
  FrameRows tail = FrameRows::Zero(1, 4);
  b.begin(0, tail, {});
  const Eigen::RowVector4f f = Eigen::RowVector4f::Zero();
  CHECK_THROWS_AS(b.record_outcome(1, 0, 0.0f, false, f.data(), {}), ContractError);
  CHECK_THROWS_AS(b.record_action(3, 0, 0, 0.0f, 0.0f), ContractError);
  Tensorf s, h;
  CHECK_THROWS_AS(b.step_inputs(0, &s, &h), ContractError);
  b.step_inputs(0, &s, nullptr);
  CHECK(s.shape() == Shape{1, 2, 2, 2});

  auto params = AgentParams<float>::init(tiny_agent(AgentMode::kInstantOnly, 2), Rng(1));
  AdamState<float> opt(AdamConfig{}, params.trainable_parameters());
  Rng rng(2);
  CHECK_THROWS_AS(update_policy(params, b, PpoConfig{}, opt, rng), ContractError);
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
  auto c = tiny_agent(AgentMode::kEnsemble, 3);
  c.height = c.width = 2;
  auto params = AgentParams<float>::init(tiny_agent(AgentMode::kEnsemble, 3), Rng(8));
  auto b = scripted_buffer(8, 2, {{3, 1}}, 2, 3, 4);
  // Frames are 2x2 here; use an agent sized to match.
  AgentConfig small = tiny_agent(AgentMode::kEnsemble, 3);
  small.height = small.width = 10;
  RolloutBuffer buf(8, 2, 10, 10, small.stack, small.history_len, small.embedding_dim);
  Rng rng(9);
  for (int e = 0; e < 2; ++e) {
    FrameRows tail = random_tensor<float>({1, 100}, rng, 0, 1).matrix();
    buf.begin(e, tail, random_tensor<float>({1, 4}, rng).matrix());
  }
  for (int t = 0; t < 8; ++t)
    for (int e = 0; e < 2; ++e) {
      buf.record_action(t, e, int(rng.uniform_int(0, 2)), 0.0f, 0.0f);
      Eigen::VectorXf next = random_tensor<float>({100}, rng, 0, 1).data();
      buf.record_outcome(t, e, float(rng.uniform<double>()), rng.bernoulli(0.2), next.data(),
                         random_tensor<float>({4}, rng).data());
    }
  auto p = AgentParams<float>::init(small, Rng(10));
  recompute_estimates(p, buf);
  std::vector<Eigen::VectorXf> before;
  for (const auto& q : p.all_parameters()) before.push_back(q.data());
  PpoConfig cfg;
  cfg.learning_rate = 0.0;
  AdamState<float> opt(AdamConfig{}, p.trainable_parameters());
  auto stats = update_policy(p, buf, cfg, opt, rng);
  CHECK(stats.n_updates == 3 * 4);
  CHECK(std::isfinite(stats.policy_loss));
  CHECK(std::isfinite(stats.value_loss));
  CHECK(stats.entropy == doctest::Approx(std::log(3.0)).epsilon(1e-2));
  // With ratio 1 at the recomputed estimates the clip never triggers.
  CHECK(stats.clip_fraction == 0.0);
  const auto after = p.all_parameters();
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(after[i].data() == before[i]);

  // A positive learning rate moves only the trainable parameters of the mode.
  p.config.mode = AgentMode::kInstantOnly;
  AdamState<float> opt2(AdamConfig{}, p.trainable_parameters());
  recompute_estimates(p, buf);
  update_policy(p, buf, PpoConfig{}, opt2, rng);
  const auto moved = p.all_parameters();
  CHECK(moved[0].data() != before[0]);
  for (std::size_t i = 10; i < moved.size(); ++i) CHECK(moved[i].data() == before[i]);
}

TEST_CASE("recompute_estimates matches direct evaluation") {
  AgentConfig c = tiny_agent(AgentMode::kEnsemble, 3);
  RolloutBuffer buf(4, 3, 10, 10, c.stack, c.history_len, c.embedding_dim);
  Rng rng(11);
  for (int e = 0; e < 3; ++e) {
    FrameRows tail = random_tensor<float>({2, 100}, rng, 0, 1).matrix();
    buf.begin(e, tail, random_tensor<float>({2, 4}, rng).matrix());
  }
  for (int t = 0; t < 4; ++t)
    for (int e = 0; e < 3; ++e) {
      buf.record_action(t, e, int(rng.uniform_int(0, 2)), 0.0f, 0.0f);
      Eigen::VectorXf next = random_tensor<float>({100}, rng, 0, 1).data();
      buf.record_outcome(t, e, 1.0f, false, next.data(), random_tensor<float>({4}, rng).data());
    }
  auto p = AgentParams<float>::init(c, Rng(12));
  recompute_estimates(p, buf);
  Tensorf s, h;
  buf.step_inputs(2, &s, &h);
  GradTape<float> t(false);
  auto out = policy_forward(t, p, s, h);
  for (int e = 0; e < 3; ++e) {
    // Batch composition changes GEMM blocking, so allow float rounding.
    CHECK(buf.values(2, e) == doctest::Approx(out.value[e]).epsilon(1e-5));
    CHECK(buf.log_probs(2, e) == doctest::Approx(out.log_probs.matrix()(e, buf.actions(2, e))).epsilon(1e-5));
  }
  buf.step_inputs(4, &s, &h);
  auto boot = policy_forward(t, p, s, h);
  for (int e = 0; e < 3; ++e) CHECK(buf.bootstrap_values()(e) == doctest::Approx(boot.value[e]).epsilon(1e-5));
}

TEST_CASE("PPO solves a two-armed bandit within 20k steps") {
  EnvConfig env_cfg;
  env_cfg.name = "bandit";
  env_cfg.seed = 3;
  VecEnv envs(env_cfg, 8);
  AgentConfig ac;
  ac.mode = AgentMode::kInstantOnly;
  ac.n_actions = envs.n_actions();
  auto params = AgentParams<float>::init(ac, Rng(13));
  PpoConfig cfg;
  AdamState<float> opt(AdamConfig{}, params.trainable_parameters());
  Rng act_rng(14), mb_rng(15);
  const int t_len = 128, n_envs = 8, hw = 16 * 16;
  RolloutBuffer buf(t_len, n_envs, 16, 16, ac.stack, ac.history_len, 0);
  auto obs = envs.reset();
  std::vector<FrameRows> tails(n_envs);
  for (int e = 0; e < n_envs; ++e) tails[e] = Eigen::Map<const FrameRows>(obs[e].data(), 1, hw);
  double last_mean = 0.0;
  int steps = 0;
  while (steps + t_len * n_envs <= 20000) {
    for (int e = 0; e < n_envs; ++e) buf.begin(e, tails[e], {});
    double reward = 0.0;
    for (int t = 0; t < t_len; ++t) {
      Tensorf stacks;
      buf.step_inputs(t, &stacks, nullptr);
      auto a = act(params, stacks, Tensorf(), act_rng);
      auto results = envs.step(a.actions);
      for (int e = 0; e < n_envs; ++e) {
        buf.record_action(t, e, a.actions[e], a.log_probs[e], a.values[e]);
        buf.record_outcome(t, e, results[e].reward, results[e].done, results[e].obs.data(), {});
        reward += results[e].reward;
      }
    }
    Tensorf stacks;
    buf.step_inputs(t_len, &stacks, nullptr);
    auto boot = act(params, stacks, Tensorf(), act_rng);
    for (int e = 0; e < n_envs; ++e) buf.set_bootstrap(e, boot.values[e]);
    update_policy(params, buf, cfg, opt, mb_rng);
    for (int e = 0; e < n_envs; ++e) tails[e] = buf.episode_tail(e);
    steps += t_len * n_envs;
    last_mean = reward / (t_len * n_envs);  // one-step episodes: mean return per episode
  }
  MESSAGE("bandit mean return in the last rollout: " << last_mean);
  CHECK(last_mean >= 0.95);
}
