#include "tempal/agent/agent.hpp"

#include <cmath>
#include <numbers>

#include "tempal/numcore/init.hpp"

namespace tempal {

AgentMode parse_agent_mode(const std::string& name) {
  if (name == "ensemble") return AgentMode::kEnsemble;
  if (name == "instant_only") return AgentMode::kInstantOnly;
  if (name == "history_only") return AgentMode::kHistoryOnly;
  throw ConfigError("unknown agent mode '" + name + "' (expected ensemble, instant_only or history_only)");
}

std::string to_string(AgentMode mode) {
  switch (mode) {
    case AgentMode::kEnsemble: return "ensemble";
    case AgentMode::kInstantOnly: return "instant_only";
    case AgentMode::kHistoryOnly: return "history_only";
  }
  return "?";
}

void AgentConfig::validate() const {
  if (n_actions < 1) throw ConfigError("agent.n_actions must be >= 1");
  if (stack < 1) throw ConfigError("agent.stack must be >= 1");
  if (history_len < 1) throw ConfigError("agent.history_len must be >= 1");
  if (embedding_dim < 1) throw ConfigError("agent.embedding_dim must be >= 1");
  if (history_channels < 1 || history_fc == 0) throw ConfigError("agent history layer sizes must be >= 1 (history_fc < 0 selects the default)");
  if (instant_conv1 < 1 || instant_conv2 < 1 || instant_fc < 1) {
    throw ConfigError("agent instant layer sizes must be >= 1");
  }
}

namespace {

ConvStackShape instant_shape(const AgentConfig& c) {
  ConvStackShape s;
  s.in_channels = c.stack;
  s.height = c.height;
  s.width = c.width;
  s.conv1_filters = c.instant_conv1;
  s.conv2_filters = c.instant_conv2;
  return s;
}

template <typename S>
Tensor<S> weight(Index rows, Index cols, double gain, Rng rng) {
  auto t = orthogonal_init<S>(rows, cols, S(gain), rng.key());
  t.set_requires_grad(true);
  return t;
}

template <typename S>
Tensor<S> zeros(Index n) {
  return Tensor<S>({n}, true);
}

template <typename S>
HistorySubnet<S> init_subnet(const AgentConfig& c, Index outputs, double head_gain, Rng rng) {
  const double g = std::numbers::sqrt2;
  HistorySubnet<S> s;
  s.conv_w = weight<S>(c.history_channels, c.history_len, g, rng.split("conv"));
  s.conv_b = zeros<S>(c.history_channels);
  const Index units = c.resolved_history_fc();
  s.fc_w = weight<S>(units, Index(c.history_channels) * c.embedding_dim, g, rng.split("fc"));
  s.fc_b = zeros<S>(units);
  s.out_w = weight<S>(outputs, units, head_gain, rng.split("out"));
  s.out_b = zeros<S>(outputs);
  return s;
}

template <typename S>
Tensor<S> subnet_forward(GradTape<S>& tape, const HistorySubnet<S>& s, const Tensor<S>& h) {
  auto x = relu(tape, pointwise_conv1d(tape, h, s.conv_w, s.conv_b));
  x = reshape(tape, x, Shape{h.dim(0), x.dim(1) * x.dim(2)});
  x = relu(tape, linear(tape, x, s.fc_w, s.fc_b));
  return linear(tape, x, s.out_w, s.out_b);
}

template <typename S>
PolicyOutput<S> from_logits(GradTape<S>& tape, const Tensor<S>& logits, const Tensor<S>& value) {
  PolicyOutput<S> out;
  out.log_probs = log_softmax(tape, logits);
  out.probs = softmax(tape, logits);
  out.value = reshape(tape, value, Shape{value.dim(0)});
  return out;
}

}  // namespace

template <typename S>
AgentParams<S> AgentParams<S>::init(const AgentConfig& config, Rng rng) {
  config.validate();
  const double g = std::numbers::sqrt2;
  AgentParams<S> p;
  p.config = config;
  const auto shape = instant_shape(config);
  p.instant.convs = ConvStack<S>::init(shape, rng.split("instant.convs"));
  p.instant.fc_w = weight<S>(config.instant_fc, shape.flat_size(), g, rng.split("instant.fc"));
  p.instant.fc_b = zeros<S>(config.instant_fc);
  p.instant.pi_w = weight<S>(config.n_actions, config.instant_fc, 0.01, rng.split("instant.pi"));
  p.instant.pi_b = zeros<S>(config.n_actions);
  p.instant.v_w = weight<S>(1, config.instant_fc, 1.0, rng.split("instant.v"));
  p.instant.v_b = zeros<S>(1);
  p.history_policy = init_subnet<S>(config, config.n_actions, 0.01, rng.split("history.policy"));
  p.history_value = init_subnet<S>(config, 1, 1.0, rng.split("history.value"));
  return p;
}

template <typename S>
std::vector<Tensor<S>> AgentParams<S>::history_parameters() const {
  auto out = history_policy.parameters();
  for (const auto& t : history_value.parameters()) out.push_back(t);
  return out;
}

template <typename S>
std::vector<Tensor<S>> AgentParams<S>::all_parameters() const {
  auto out = instant_parameters();
  for (const auto& t : history_parameters()) out.push_back(t);
  return out;
}

template <typename S>
std::vector<std::string> AgentParams<S>::parameter_names() {
  std::vector<std::string> names = {"instant.conv1.w", "instant.conv1.b", "instant.conv2.w", "instant.conv2.b",
                                    "instant.fc.w",    "instant.fc.b",    "instant.pi.w",    "instant.pi.b",
                                    "instant.v.w",     "instant.v.b"};
  for (const char* sub : {"history.policy.", "history.value."}) {
    for (const char* layer : {"conv.w", "conv.b", "fc.w", "fc.b", "out.w", "out.b"}) {
      names.push_back(std::string(sub) + layer);
    }
  }
  return names;
}

template <typename S>
std::vector<Tensor<S>> AgentParams<S>::trainable_parameters() const {
  std::vector<Tensor<S>> out;
  if (config.uses_instant()) out = instant_parameters();
  if (config.uses_history()) {
    for (const auto& t : history_parameters()) out.push_back(t);
  }
  return out;
}

template <typename S>
PolicyOutput<S> instant_forward(GradTape<S>& tape, const AgentParams<S>& params, const Tensor<S>& stacks,
                                BranchProbe* probe) {
  if (probe) ++probe->instant_calls;
  const auto& b = params.instant;
  auto x = b.convs.forward(tape, stacks);
  x = relu(tape, linear(tape, x, b.fc_w, b.fc_b));
  return from_logits(tape, linear(tape, x, b.pi_w, b.pi_b), linear(tape, x, b.v_w, b.v_b));
}

template <typename S>
PolicyOutput<S> history_forward(GradTape<S>& tape, const AgentParams<S>& params, const Tensor<S>& histories,
                                BranchProbe* probe) {
  const auto& c = params.config;
  if (histories.rank() != 3 || histories.dim(1) != c.history_len || histories.dim(2) != c.embedding_dim) {
    throw DimensionError("history branch expects [n x " + std::to_string(c.history_len) + " x " +
                         std::to_string(c.embedding_dim) + "], got " + shape_str(histories.shape()));
  }
  if (probe) ++probe->history_calls;
  return from_logits(tape, subnet_forward(tape, params.history_policy, histories),
                     subnet_forward(tape, params.history_value, histories));
}

template <typename S>
PolicyOutput<S> ensemble(GradTape<S>& tape, const PolicyOutput<S>& a, const PolicyOutput<S>& b) {
  if (a.probs.shape() != b.probs.shape()) {
    throw ContractError("ensemble: branch outputs " + shape_str(a.probs.shape()) + " and " +
                        shape_str(b.probs.shape()) + " differ");
  }
  PolicyOutput<S> out;
  out.probs = normalize_rows_sum(tape, scale(tape, add(tape, a.probs, b.probs), S(0.5)));
  out.log_probs = log(tape, clamp(tape, out.probs, S(1e-12), S(1)));
  out.value = scale(tape, add(tape, a.value, b.value), S(0.5));
  return out;
}

template <typename S>
PolicyOutput<S> policy_forward(GradTape<S>& tape, const AgentParams<S>& params, const Tensor<S>& stacks,
                               const Tensor<S>& histories, BranchProbe* probe) {
  switch (params.config.mode) {
    case AgentMode::kInstantOnly: return instant_forward(tape, params, stacks, probe);
    case AgentMode::kHistoryOnly: return history_forward(tape, params, histories, probe);
    case AgentMode::kEnsemble: break;
  }
  const auto a = instant_forward(tape, params, stacks, probe);
  const auto b = history_forward(tape, params, histories, probe);
  return ensemble(tape, a, b);
}

ActResult act(const AgentParams<float>& params, const Tensorf& stacks, const Tensorf& histories, Rng& rng,
              bool greedy, BranchProbe* probe) {
  GradTape<float> tape(false);
  const auto out = policy_forward(tape, params, stacks, histories, probe);
  const auto probs = out.probs.matrix();
  const auto logp = out.log_probs.matrix();
  const Index n = probs.rows();
  ActResult r;
  r.actions.resize(std::size_t(n));
  r.log_probs.resize(std::size_t(n));
  r.values.resize(std::size_t(n));
  for (Index i = 0; i < n; ++i) {
    Index a = 0;
    if (greedy) {
      probs.row(i).maxCoeff(&a);
    } else {
      const float u = rng.uniform<float>();
      float acc = 0.0f;
      a = probs.cols() - 1;
      for (Index j = 0; j < probs.cols(); ++j) {
        acc += probs(i, j);
        if (u < acc) {
          a = j;
          break;
        }
      }
    }
    r.actions[std::size_t(i)] = int(a);
    r.log_probs[std::size_t(i)] = logp(i, a);
    r.values[std::size_t(i)] = out.value.data()(i);
  }
  return r;
}

AgentInputs assemble_inputs(std::span<const Observation> frames, const Eigen::MatrixXf& embeddings,
                            Index episode_start, int stack, int history_len) {
  if (frames.empty()) throw ContractError("assemble_inputs: frame buffer is empty");
  const Index t = Index(frames.size()) - 1;
  if (embeddings.rows() != Index(frames.size())) {
    throw ContractError("assemble_inputs: " + std::to_string(frames.size()) + " frames but " +
                        std::to_string(embeddings.rows()) + " embeddings");
  }
  if (episode_start < 0 || episode_start > t) {
    throw ContractError("assemble_inputs: episode start " + std::to_string(episode_start) +
                        " outside the buffer [0, " + std::to_string(t) + "]");
  }
  if (stack < 1 || history_len < 1) throw ContractError("assemble_inputs: stack and history_len must be >= 1");
  const Index h = frames[0].rows(), w = frames[0].cols(), d = embeddings.cols();
  AgentInputs in{Tensorf({stack, h, w}), Tensorf({history_len, d})};
  for (int i = 0; i < stack; ++i) {
    const auto& f = frames[std::size_t(padded_index(t, episode_start, i))];
    if (f.rows() != h || f.cols() != w) throw DimensionError("assemble_inputs: frames differ in size");
    in.stack.data().segment(i * h * w, h * w) = Eigen::Map<const Eigen::VectorXf>(f.data(), h * w);
  }
  for (int i = 0; i < history_len; ++i) {
    in.history.data().segment(i * d, d) = embeddings.row(padded_index(t, episode_start, i)).transpose();
  }
  return in;
}

static_assert(history_branch_parameter_count(AgentConfig{}) == 2 * (68 + 128 * 128 + 128) + 128 * 3 + 3 + 128 + 1);
static_assert(pointwise_conv1d_parameter_count(16, 4) == 68);

#define TEMPAL_AGENT_INSTANTIATE(S)                                                                              \
  template struct AgentParams<S>;                                                                              \
  template PolicyOutput<S> instant_forward(GradTape<S>&, const AgentParams<S>&, const Tensor<S>&, BranchProbe*); \
  template PolicyOutput<S> history_forward(GradTape<S>&, const AgentParams<S>&, const Tensor<S>&, BranchProbe*); \
  template PolicyOutput<S> ensemble(GradTape<S>&, const PolicyOutput<S>&, const PolicyOutput<S>&);              \
  template PolicyOutput<S> policy_forward(GradTape<S>&, const AgentParams<S>&, const Tensor<S>&, const Tensor<S>&, \
                                          BranchProbe*);

TEMPAL_AGENT_INSTANTIATE(float)
TEMPAL_AGENT_INSTANTIATE(double)

}  // namespace tempal
