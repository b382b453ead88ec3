#include <doctest.h>

#include <cmath>

#include "tempal/agent/agent.hpp"
#include "tempal/numcore/gradcheck.hpp"
#include "test_util.hpp"

using namespace tempal;
using tempal::test::random_tensor;

namespace {

AgentConfig small_config(AgentMode mode) {
  AgentConfig c;
  c.mode = mode;
  c.n_actions = 3;
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

template <typename S>
struct Inputs {
  Tensor<S> stacks, histories;
};

template <typename S>
Inputs<S> random_inputs(const AgentConfig& c, Index n, Rng& rng) {
  return {random_tensor<S>({n, c.stack, c.height, c.width}, rng, 0.0, 1.0),
          random_tensor<S>({n, c.history_len, c.embedding_dim}, rng)};
}

// Plain-loop reference for one history sub-network on one sample.
Eigen::VectorXd subnet_reference(const HistorySubnet<double>& s, const Eigen::MatrixXd& h) {
  const Index ch = s.conv_w.dim(0), n = s.conv_w.dim(1), d = h.cols();
  Eigen::VectorXd flat(ch * d);
  for (Index o = 0; o < ch; ++o)
    for (Index j = 0; j < d; ++j) {
      double v = s.conv_b[o];
      for (Index i = 0; i < n; ++i) v += s.conv_w.matrix()(o, i) * h(i, j);
      flat(o * d + j) = std::max(v, 0.0);
    }
  Eigen::VectorXd hidden = (s.fc_w.matrix() * flat + s.fc_b.data()).cwiseMax(0.0);
  return s.out_w.matrix() * hidden + s.out_b.data();
}

}  // namespace

TEST_CASE("agent mode names round trip") {
  for (auto m : {AgentMode::kEnsemble, AgentMode::kInstantOnly, AgentMode::kHistoryOnly}) {
    CHECK(parse_agent_mode(to_string(m)) == m);
  }
  CHECK_THROWS_AS(parse_agent_mode("both"), ConfigError);
}

TEST_CASE("history branch parameter counts follow the layer shapes") {
  AgentConfig c;  // N = 16, d = 32, 4 channels, FC 128
  c.n_actions = 3;
  auto p = AgentParams<float>::init(c, Rng(1));
  CHECK(p.history_policy.conv_parameter_count() == 16 * 4 + 4);
  CHECK(p.history_value.conv_parameter_count() == 68);
  CHECK(p.history_policy.fc_w.dim(1) == 4 * 32);
  Index total = 0;
  for (const auto& t : p.history_parameters()) total += t.size();
  // policy: 68 + 128*128+128 + 128*3+3; value: 68 + 128*128+128 + 128+1
  CHECK(total == 16967 + 16709);
  CHECK(history_branch_parameter_count(c) == total);

  c.history_fc = 512;
  auto wide = AgentParams<float>::init(c, Rng(1));
  CHECK(wide.history_policy.fc_w.dim(0) == 512);
  Index wide_total = 0;
  for (const auto& t : wide.history_parameters()) wide_total += t.size();
  CHECK(wide_total == history_branch_parameter_count(c));
  CHECK(wide_total == 2 * (68 + 128 * 512 + 512) + 512 * 3 + 3 + 512 + 1);

  CHECK(AgentParams<float>::parameter_names().size() == p.all_parameters().size());
}

TEST_CASE("trainable parameters depend on the mode") {
  auto c = small_config(AgentMode::kEnsemble);
  auto p = AgentParams<float>::init(c, Rng(2));
  CHECK(p.trainable_parameters().size() == 22);
  p.config.mode = AgentMode::kInstantOnly;
  CHECK(p.trainable_parameters().size() == 10);
  p.config.mode = AgentMode::kHistoryOnly;
  CHECK(p.trainable_parameters().size() == 12);
}

TEST_CASE("initial policy is close to uniform") {
  AgentConfig c;
  auto p = AgentParams<float>::init(c, Rng(3));
  Rng rng(4);
  auto in = random_inputs<float>(c, 8, rng);
  GradTape<float> t(false);
  auto out = policy_forward(t, p, in.stacks, in.histories);
  CHECK(out.probs.dim(0) == 8);
  CHECK(out.probs.dim(1) == 3);
  CHECK(out.value.rank() == 1);
  const auto probs = out.probs.matrix();
  for (Index i = 0; i < 8; ++i) {
    CHECK(probs.row(i).sum() == doctest::Approx(1.0).epsilon(1e-5));
    CHECK((probs.row(i).array() - 1.0f / 3.0f).abs().maxCoeff() < 0.05f);
  }
}

TEST_CASE("history branch matches a plain-loop reference") {
  auto c = small_config(AgentMode::kHistoryOnly);
  auto p = AgentParams<double>::init(c, Rng(5));
  Rng rng(6);
  auto in = random_inputs<double>(c, 4, rng);
  GradTape<double> t(false);
  auto out = history_forward(t, p, in.histories);
  for (Index s = 0; s < 4; ++s) {
    Eigen::MatrixXd h(c.history_len, c.embedding_dim);
    for (Index i = 0; i < h.rows(); ++i)
      for (Index j = 0; j < h.cols(); ++j) h(i, j) = in.histories[(s * h.rows() + i) * h.cols() + j];
    Eigen::VectorXd logits = subnet_reference(p.history_policy, h);
    Eigen::VectorXd expected = (logits.array() - logits.maxCoeff()).exp();
    expected /= expected.sum();
    for (Index a = 0; a < 3; ++a) CHECK(out.probs.matrix()(s, a) == doctest::Approx(expected(a)).epsilon(1e-12));
    CHECK(out.value[s] == doctest::Approx(subnet_reference(p.history_value, h)(0)).epsilon(1e-12));
  }
}

TEST_CASE("ensemble averages branch probabilities and values") {
  auto c = small_config(AgentMode::kEnsemble);
  auto p = AgentParams<double>::init(c, Rng(7));
  // Sharper heads so the branches disagree noticeably.
  p.instant.pi_w.data() *= 300.0;
  p.history_policy.out_w.data() *= 300.0;
  Rng rng(8);
  auto in = random_inputs<double>(c, 5, rng);
  GradTape<double> t(false);
  auto a = instant_forward(t, p, in.stacks);
  auto b = history_forward(t, p, in.histories);
  auto e = policy_forward(t, p, in.stacks, in.histories);
  Eigen::MatrixXd avg = (a.probs.matrix() + b.probs.matrix()) / 2.0;
  for (Index i = 0; i < avg.rows(); ++i) avg.row(i) /= avg.row(i).sum();
  CHECK((e.probs.matrix() - avg).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((e.log_probs.matrix().array() - avg.array().log()).abs().maxCoeff() < 1e-10);
  CHECK((e.value.data() - (a.value.data() + b.value.data()) / 2.0).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((a.probs.matrix() - b.probs.matrix()).cwiseAbs().maxCoeff() > 0.05);
}

TEST_CASE("single-branch modes never evaluate the other branch") {
  Rng rng(9);
  for (auto mode : {AgentMode::kInstantOnly, AgentMode::kHistoryOnly, AgentMode::kEnsemble}) {
    auto c = small_config(mode);
    auto p = AgentParams<float>::init(c, Rng(10));
    auto in = random_inputs<float>(c, 3, rng);
    BranchProbe probe;
    Rng act_rng(11);
    const Tensorf empty;
    const auto& stacks = mode == AgentMode::kHistoryOnly ? empty : in.stacks;
    const auto& hist = mode == AgentMode::kInstantOnly ? empty : in.histories;
    auto r = act(p, stacks, hist, act_rng, false, &probe);
    CHECK(r.actions.size() == 3);
    CHECK(probe.instant_calls == (mode == AgentMode::kHistoryOnly ? 0 : 1));
    CHECK(probe.history_calls == (mode == AgentMode::kInstantOnly ? 0 : 1));
  }
}

TEST_CASE("branch outputs ignore the other branch's input") {
  auto c = small_config(AgentMode::kEnsemble);
  auto p = AgentParams<float>::init(c, Rng(12));
  Rng rng(13);
  auto in1 = random_inputs<float>(c, 4, rng);
  auto in2 = random_inputs<float>(c, 4, rng);
  GradTape<float> t(false);
  auto i1 = instant_forward(t, p, in1.stacks);
  auto h1 = history_forward(t, p, in1.histories);
  // Changing histories changes the ensemble but not the instant branch, and vice versa.
  auto e_a = policy_forward(t, p, in1.stacks, in1.histories);
  auto e_b = policy_forward(t, p, in1.stacks, in2.histories);
  CHECK(e_a.value.data() != e_b.value.data());
  CHECK(instant_forward(t, p, in1.stacks).probs.data() == i1.probs.data());
  CHECK(history_forward(t, p, in1.histories).probs.data() == h1.probs.data());

  // Gradients of an instant-only objective never reach history parameters.
  GradTape<float> tape;
  auto out = instant_forward(tape, p, in1.stacks);
  for (auto& q : p.all_parameters()) q.zero_grad();
  tape.backward(sum(tape, out.value));
  for (const auto& q : p.history_parameters()) CHECK(q.grad().cwiseAbs().maxCoeff() == 0.0f);
  float instant_grad = 0.0f;
  for (const auto& q : p.instant_parameters()) instant_grad += q.grad().cwiseAbs().sum();
  CHECK(instant_grad > 0.0f);
}

TEST_CASE("ensemble gradients pass the finite-difference check") {
  auto c = small_config(AgentMode::kEnsemble);
  auto p = AgentParams<double>::init(c, Rng(14));
  p.instant.pi_w.data() *= 50.0;
  p.history_policy.out_w.data() *= 50.0;
  Rng rng(15);
  auto all = p.all_parameters();
  const auto bias_names = AgentParams<double>::parameter_names();
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (bias_names[i].ends_with(".b")) all[i].data() = tempal::test::random_away_from_zero<double>(all[i].shape(), rng).data() * 0.3;
  }
  auto in = random_inputs<double>(c, 3, rng);
  const std::vector<int> actions = {0, 2, 1};
  ScalarFn<double> f = [&](GradTape<double>& t, const Tensord&) {
    auto out = policy_forward(t, p, in.stacks, in.histories);
    auto lp = gather_cols(t, out.log_probs, std::span<const int>(actions));
    auto ent = sum(t, mul(t, out.probs, out.log_probs));
    return add(t, add(t, sum(t, lp), ent), scale(t, sum(t, mul(t, out.value, out.value)), 0.1));
  };
  const auto names = AgentParams<double>::parameter_names();
  const auto params = p.all_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    CAPTURE(names[i]);
    CHECK(finite_diff_check<double>(f, params[i], 1e-5) < 1e-4);
  }
}

TEST_CASE("act samples from the policy and greedy takes the argmax") {
  auto c = small_config(AgentMode::kInstantOnly);
  auto p = AgentParams<float>::init(c, Rng(16));
  p.instant.pi_b.data() << 0.0f, 1.0f, -1.0f;  // softmax ~ (0.245, 0.665, 0.090)
  p.instant.pi_w.data().setZero();
  Rng rng(17);
  auto in = random_inputs<float>(c, 1, rng);
  const Tensorf empty;
  Rng act_rng(18);
  auto g = act(p, in.stacks, empty, act_rng, true);
  CHECK(g.actions[0] == 1);
  CHECK(g.log_probs[0] == doctest::Approx(std::log(std::exp(1.0) / (1.0 + std::exp(1.0) + std::exp(-1.0)))));

  const double z = 1.0 + std::exp(1.0) + std::exp(-1.0);
  const double expected[3] = {1.0 / z, std::exp(1.0) / z, std::exp(-1.0) / z};
  int counts[3] = {0, 0, 0};
  const int n = 20000;
  for (int i = 0; i < n; ++i) ++counts[act(p, in.stacks, empty, act_rng).actions[0]];
  for (int a = 0; a < 3; ++a) {
    const double sd = std::sqrt(expected[a] * (1 - expected[a]) / n);
    CHECK(std::abs(counts[a] / double(n) - expected[a]) < 4 * sd);
  }

  Rng r1(19), r2(19);
  auto batch = random_inputs<float>(c, 16, rng);
  CHECK(act(p, batch.stacks, empty, r1).actions == act(p, batch.stacks, empty, r2).actions);
}

TEST_CASE("assemble_inputs stacks newest first and pads at episode start") {
  // Frame t is filled with value t; embedding row t is constant t.
  const int n_frames = 10;
  std::vector<Observation> frames;
  Eigen::MatrixXf emb(n_frames, 3);
  for (int t = 0; t < n_frames; ++t) {
    frames.push_back(Observation::Constant(4, 5, float(t)));
    emb.row(t).setConstant(float(t));
  }
  SUBCASE("deep into an episode") {
    auto in = assemble_inputs(frames, emb, 2, 4, 5);
    CHECK(in.stack.shape() == Shape{4, 4, 5});
    CHECK(in.history.shape() == Shape{5, 3});
    for (int i = 0; i < 4; ++i) CHECK(in.stack[i * 20 + 7] == float(9 - i));
    for (int i = 0; i < 5; ++i) CHECK(in.history[i * 3] == float(9 - i));
  }
  SUBCASE("short episode repeats its first entry") {
    auto in = assemble_inputs(frames, emb, 8, 4, 5);
    const float expect_stack[4] = {9, 8, 8, 8};
    for (int i = 0; i < 4; ++i) CHECK(in.stack[i * 20] == expect_stack[i]);
    const float expect_hist[5] = {9, 8, 8, 8, 8};
    for (int i = 0; i < 5; ++i) CHECK(in.history[i * 3 + 1] == expect_hist[i]);
    CHECK(in.history.data().minCoeff() >= 8.0f);
  }
  SUBCASE("first step of an episode") {
    auto in = assemble_inputs(frames, emb, 9, 4, 16);
    CHECK(in.stack.data().minCoeff() == 9.0f);
    CHECK(in.history.data().minCoeff() == 9.0f);
  }
  CHECK_THROWS_AS(assemble_inputs(frames, emb, 10, 4, 5), ContractError);
  CHECK_THROWS_AS(assemble_inputs({}, Eigen::MatrixXf(0, 3), 0, 4, 5), ContractError);
  CHECK_THROWS_AS(assemble_inputs(frames, Eigen::MatrixXf(3, 3), 0, 4, 5), ContractError);
  CHECK(padded_index(5, 3, 4) == 3);
  CHECK(padded_index(5, 0, 4) == 1);
}

TEST_CASE("history input shape is validated") {
  auto c = small_config(AgentMode::kHistoryOnly);
  auto p = AgentParams<float>::init(c, Rng(20));
  GradTape<float> t(false);
  CHECK_THROWS_AS(history_forward(t, p, Tensorf({2, c.history_len + 1, c.embedding_dim})), DimensionError);
  CHECK_THROWS_AS(instant_forward(t, p, Tensorf({2, c.stack + 1, c.height, c.width})), DimensionError);
  AgentConfig bad = c;
  bad.n_actions = 0;
  CHECK_THROWS_AS(AgentParams<float>::init(bad, Rng(1)), ConfigError);
}

TEST_CASE("cast round trips parameters") {
  auto p = AgentParams<float>::init(small_config(AgentMode::kEnsemble), Rng(21));
  auto d = p.cast<double>();
  auto back = d.cast<float>();
  const auto a = p.all_parameters(), b = back.all_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].data() == b[i].data());
  CHECK(d.config == p.config);
}

TEST_CASE("history-only mode defaults to the wide FC layer") {
  AgentConfig c;
  CHECK(c.resolved_history_fc() == 128);
  c.mode = AgentMode::kHistoryOnly;
  CHECK(c.resolved_history_fc() == 512);
  CHECK(AgentParams<float>::init(c, Rng(1)).history_value.fc_w.dim(0) == 512);
  c.history_fc = 64;
  CHECK(c.resolved_history_fc() == 64);
}

TEST_CASE("zeroed policy head gives a uniform policy") {
  auto c = small_config(AgentMode::kInstantOnly);
  auto p = AgentParams<double>::init(c, Rng(22));
  p.instant.pi_w.data().setZero();
  p.instant.pi_b.data().setZero();
  Rng rng(23);
  auto in = random_inputs<double>(c, 4, rng);
  GradTape<double> t(false);
  auto out = instant_forward(t, p, in.stacks);
  CHECK((out.probs.data().array() - 1.0 / 3.0).abs().maxCoeff() < 1e-15);

  // 30k draws from the uniform policy.
  auto pf = p.cast<float>();
  const Tensorf empty;
  auto one = random_inputs<float>(c, 1, rng);
  Rng act_rng(24);
  int counts[3] = {0, 0, 0};
  for (int i = 0; i < 30000; ++i) ++counts[act(pf, one.stacks, empty, act_rng).actions[0]];
  for (int a = 0; a < 3; ++a) {
    CHECK(counts[a] / 30000.0 >= 0.32);
    CHECK(counts[a] / 30000.0 <= 0.35);
  }
}

TEST_CASE("history branch is symmetric under a consistent permutation of embedding dims") {
  // The pointwise conv mixes time channels only, so permuting the 32 positions
  // and the matching FC input columns leaves the output unchanged.
  auto c = small_config(AgentMode::kHistoryOnly);
  auto p = AgentParams<double>::init(c, Rng(25));
  Rng rng(26);
  auto in = random_inputs<double>(c, 3, rng);
  const std::vector<int> perm = {2, 0, 3, 1};
  auto q = p.cast<double>();
  auto permuted = in.histories.clone();
  for (Index s = 0; s < 3; ++s)
    for (Index i = 0; i < c.history_len; ++i)
      for (Index j = 0; j < c.embedding_dim; ++j)
        permuted[(s * c.history_len + i) * c.embedding_dim + j] =
            in.histories[(s * c.history_len + i) * c.embedding_dim + perm[std::size_t(j)]];
  for (auto* sub : {&q.history_policy, &q.history_value}) {
    auto src = sub->fc_w.clone();
    for (Index u = 0; u < src.dim(0); ++u)
      for (Index o = 0; o < c.history_channels; ++o)
        for (Index j = 0; j < c.embedding_dim; ++j)
          sub->fc_w.matrix()(u, o * c.embedding_dim + j) = src.matrix()(u, o * c.embedding_dim + perm[std::size_t(j)]);
  }
  GradTape<double> t(false);
  auto a = history_forward(t, p, in.histories);
  auto b = history_forward(t, q, permuted);
  CHECK((a.probs.data() - b.probs.data()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((a.value.data() - b.value.data()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("ensemble arithmetic and contracts") {
  GradTape<double> t(false);
  PolicyOutput<double> a{Tensord({1, 2}, {1.0, 0.0}), Tensord({1, 2}), Tensord({1}, {2.0})};
  PolicyOutput<double> b{Tensord({1, 2}, {0.0, 1.0}), Tensord({1, 2}), Tensord({1}, {4.0})};
  auto e = ensemble(t, a, b);
  CHECK(e.probs[0] == 0.5);
  CHECK(e.probs[1] == 0.5);
  CHECK(e.value[0] == 3.0);
  auto same = ensemble(t, a, a);
  CHECK(same.probs.data() == a.probs.data());
  PolicyOutput<double> c3{Tensord({1, 3}, {0.2, 0.3, 0.5}), Tensord({1, 3}), Tensord({1}, {0.0})};
  CHECK_THROWS_AS(ensemble(t, a, c3), ContractError);
}

TEST_CASE("ensemble keeps a shared argmax and always yields distributions") {
  auto c = small_config(AgentMode::kEnsemble);
  auto p = AgentParams<double>::init(c, Rng(27));
  Rng rng(28);
  int shared = 0;
  for (int draw = 0; draw < 10000; ++draw) {
    for (auto& q : p.all_parameters()) q.data() = random_tensor<double>(q.shape(), rng, -2.0, 2.0).data();
    auto in = random_inputs<double>(c, 1, rng);
    GradTape<double> t(false);
    auto a = instant_forward(t, p, in.stacks);
    auto b = history_forward(t, p, in.histories);
    auto e = ensemble(t, a, b);
    const auto pr = e.probs.matrix();
    REQUIRE(pr.minCoeff() >= 0.0);
    REQUIRE(std::abs(pr.sum() - 1.0) < 1e-9);
    Index ia, ib, ie;
    a.probs.matrix().row(0).maxCoeff(&ia);
    b.probs.matrix().row(0).maxCoeff(&ib);
    pr.row(0).maxCoeff(&ie);
    if (ia == ib) {
      ++shared;
      REQUIRE(ie == ia);
    }
  }
  CHECK(shared > 1000);
}

TEST_CASE("history-only loss leaves instant gradients zero") {
  auto c = small_config(AgentMode::kEnsemble);
  auto p = AgentParams<float>::init(c, Rng(29));
  Rng rng(30);
  auto in = random_inputs<float>(c, 4, rng);
  GradTape<float> tape;
  auto out = history_forward(tape, p, in.histories);
  for (auto& q : p.all_parameters()) q.zero_grad();
  tape.backward(add(tape, sum(tape, out.value), sum(tape, gather_cols(tape, out.log_probs, std::vector<int>{0, 1, 2, 0}))));
  for (const auto& q : p.instant_parameters()) CHECK(q.grad().cwiseAbs().maxCoeff() == 0.0f);
  float g = 0.0f;
  for (const auto& q : p.history_parameters()) g += q.grad().cwiseAbs().sum();
  CHECK(g > 0.0f);
}

TEST_CASE("history at episode step 20 holds z_20..z_5") {
  std::vector<Observation> frames;
  Eigen::MatrixXf emb(30, 32);
  for (int t = 0; t < 30; ++t) {
    frames.push_back(Observation::Constant(16, 16, float(t)));
    emb.row(t).setConstant(float(t));
  }
  // Episode starts at buffer index 5; step 20 of it is buffer index 25.
  auto in = assemble_inputs(std::span<const Observation>(frames).first(26), emb.topRows(26), 5, 4, 16);
  CHECK(in.history.shape() == Shape{16, 32});
  for (int i = 0; i < 16; ++i) CHECK(in.history[i * 32] == float(25 - i));
}
