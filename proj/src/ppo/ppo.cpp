#include "tempal/ppo/ppo.hpp"

#include <cmath>
#include <numeric>

namespace tempal {

void PpoConfig::validate() const {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("ppo.gamma must be in [0, 1)");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw ConfigError("ppo.gae_lambda must be in [0, 1]");
  if (!(clip_eps > 0.0)) throw ConfigError("ppo.clip_eps must be > 0");
  if (value_coef < 0.0 || entropy_coef < 0.0) throw ConfigError("ppo loss coefficients must be >= 0");
  if (n_policy_epochs < 1) throw ConfigError("ppo.n_policy_epochs must be >= 1");
  if (n_minibatches < 1) throw ConfigError("ppo.n_minibatches must be >= 1");
  if (learning_rate < 0.0) throw ConfigError("ppo.learning_rate must be >= 0");
  if (!(max_grad_norm > 0.0)) throw ConfigError("ppo.max_grad_norm must be > 0");
}

// ---------------------------------------------------------------- estimators

template <typename S>
GaeResult<S> compute_gae(const MatrixT<S>& rewards, const MatrixT<S>& values, const MatrixT<S>& dones,
                         const VectorT<S>& bootstrap, S gamma, S lambda) {
  const Index t_len = rewards.rows(), n = rewards.cols();
  if (values.rows() != t_len || values.cols() != n || dones.rows() != t_len || dones.cols() != n ||
      bootstrap.size() != n) {
    throw ContractError("compute_gae: rewards " + std::to_string(t_len) + "x" + std::to_string(n) + ", values " +
                        std::to_string(values.rows()) + "x" + std::to_string(values.cols()) + ", dones " +
                        std::to_string(dones.rows()) + "x" + std::to_string(dones.cols()) + ", bootstrap " +
                        std::to_string(bootstrap.size()) + " do not align");
  }
  GaeResult<S> r;
  r.advantages.resize(t_len, n);
  for (Index e = 0; e < n; ++e) {
    S next_adv = 0;
    for (Index t = t_len - 1; t >= 0; --t) {
      const S next_value = t + 1 < t_len ? values(t + 1, e) : bootstrap(e);
      const S live = dones(t, e) != S(0) ? S(0) : S(1);
      const S delta = rewards(t, e) + gamma * next_value * live - values(t, e);
      next_adv = delta + gamma * lambda * live * next_adv;
      r.advantages(t, e) = next_adv;
    }
  }
  r.returns = r.advantages + values;
  return r;
}

template <typename S>
MatrixT<S> normalize_advantages(const MatrixT<S>& a) {
  if (a.size() == 0) return a;
  const S mean = a.mean();
  const S var = (a.array() - mean).square().mean();
  return (a.array() - mean) / (std::sqrt(var) + S(1e-8));
}

template <typename S>
Tensor<S> policy_entropy(GradTape<S>& tape, const PolicyOutput<S>& out) {
  return scale(tape, mean(tape, sum_rows(tape, mul(tape, out.probs, out.log_probs))), S(-1));
}

template <typename S>
PpoLosses<S> ppo_losses(GradTape<S>& tape, const PpoTargets<S>& targets, const Tensor<S>& new_log_probs,
                        const Tensor<S>& new_values, const Tensor<S>& entropy, const PpoConfig& cfg) {
  const Index n = new_log_probs.size();
  if (targets.old_log_probs.size() != n || targets.advantages.size() != n || targets.returns.size() != n ||
      new_values.size() != n) {
    throw ContractError("ppo_losses: minibatch fields disagree in length");
  }
  const Tensor<S> old_lp({n}, targets.old_log_probs);
  const Tensor<S> adv({n}, targets.advantages);
  const Tensor<S> ret({n}, targets.returns);
  const auto lp = reshape(tape, new_log_probs, Shape{n});
  const auto v = reshape(tape, new_values, Shape{n});
  const S eps = S(cfg.clip_eps);

  const auto ratio = exp(tape, sub(tape, lp, old_lp));
  const auto surr = mul(tape, ratio, adv);
  const auto clipped = mul(tape, clamp(tape, ratio, S(1) - eps, S(1) + eps), adv);
  PpoLosses<S> l;
  l.policy_loss = scale(tape, mean(tape, minimum(tape, surr, clipped)), S(-1));
  const auto diff = sub(tape, v, ret);
  l.value_loss = mean(tape, mul(tape, diff, diff));
  l.entropy = entropy;
  l.total = add(tape, add(tape, l.policy_loss, scale(tape, l.value_loss, S(cfg.value_coef))),
                scale(tape, entropy, S(-cfg.entropy_coef)));
  return l;
}

// ---------------------------------------------------------------- buffer

RolloutBuffer::RolloutBuffer(int rollout_len, int n_envs, int height, int width, int stack, int history_len,
                             int embedding_dim)
    : rollout_len_(rollout_len),
      n_envs_(n_envs),
      height_(height),
      width_(width),
      stack_(stack),
      history_len_(history_len),
      embedding_dim_(embedding_dim),
      context_(std::max(stack, embedding_dim > 0 ? history_len : 1) - 1) {
  if (rollout_len < 1 || n_envs < 1) throw ConfigError("rollout buffer: rollout_len and n_envs must be >= 1");
  if (stack < 1 || history_len < 1 || embedding_dim < 0) throw ConfigError("rollout buffer: bad input sizes");
  actions = Eigen::MatrixXi::Zero(rollout_len, n_envs);
  rewards = dones = log_probs = values = Eigen::MatrixXf::Zero(rollout_len, n_envs);
  recorded_ = Eigen::MatrixXi::Zero(rollout_len, n_envs);
  bootstrap_ = Eigen::VectorXf::Zero(n_envs);
  seq_.resize(std::size_t(n_envs));
  emb_.resize(std::size_t(n_envs));
  ctx_len_.assign(std::size_t(n_envs), 0);
  start_.assign(std::size_t(n_envs), std::vector<Index>(std::size_t(rollout_len) + 1, 0));
}

void RolloutBuffer::check(int t, int env, int t_max) const {
  if (env < 0 || env >= n_envs_ || t < 0 || t > t_max) {
    throw ContractError("rollout buffer: (step " + std::to_string(t) + ", env " + std::to_string(env) +
                        ") out of range");
  }
}

void RolloutBuffer::begin(int env, const FrameRows& tail, const Eigen::MatrixXf& tail_embeddings) {
  check(0, env, 0);
  const Index hw = Index(height_) * width_;
  if (tail.rows() < 1 || tail.cols() != hw) throw ContractError("rollout buffer: begin needs at least one frame");
  if (with_history() && (tail_embeddings.rows() != tail.rows() || tail_embeddings.cols() != embedding_dim_)) {
    throw ContractError("rollout buffer: tail embeddings do not match the tail frames");
  }
  const Index kept = std::min<Index>(tail.rows(), context_ + 1);
  const auto e = std::size_t(env);
  ctx_len_[e] = int(kept - 1);
  seq_[e].resize(kept + rollout_len_, hw);
  seq_[e].topRows(kept) = tail.bottomRows(kept);
  if (with_history()) {
    emb_[e].resize(kept + rollout_len_, embedding_dim_);
    emb_[e].topRows(kept) = tail_embeddings.bottomRows(kept);
  }
  std::fill(start_[e].begin(), start_[e].end(), 0);
  recorded_.col(env).setZero();
}

void RolloutBuffer::record_action(int t, int env, int action, float log_prob, float value) {
  check(t, env, rollout_len_ - 1);
  actions(t, env) = action;
  log_probs(t, env) = log_prob;
  values(t, env) = value;
}

void RolloutBuffer::record_outcome(int t, int env, float reward, bool done, const float* next,
                                   const Eigen::VectorXf& next_embedding) {
  check(t, env, rollout_len_ - 1);
  if (t > 0 && !recorded_(t - 1, env)) throw ContractError("rollout buffer: outcomes must be recorded in order");
  const auto e = std::size_t(env);
  const Index row = seq_row(t, env) + 1;
  seq_[e].row(row) = Eigen::Map<const Eigen::RowVectorXf>(next, seq_[e].cols());
  if (with_history()) {
    if (next_embedding.size() != embedding_dim_) throw ContractError("rollout buffer: embedding size mismatch");
    emb_[e].row(row) = next_embedding.transpose();
  }
  rewards(t, env) = reward;
  dones(t, env) = done ? 1.0f : 0.0f;
  start_[e][std::size_t(t) + 1] = done ? row : start_[e][std::size_t(t)];
  recorded_(t, env) = 1;
}

bool RolloutBuffer::full() const { return recorded_.minCoeff() == 1; }

void RolloutBuffer::fill_inputs(std::span<const Index> ids, Tensorf* stacks, Tensorf* histories) const {
  const Index n = Index(ids.size()), hw = Index(height_) * width_;
  if (histories && !with_history()) throw ContractError("rollout buffer: no embeddings stored");
  if (stacks) *stacks = Tensorf({n, stack_, height_, width_});
  if (histories) *histories = Tensorf({n, history_len_, embedding_dim_});
  for (Index k = 0; k < n; ++k) {
    const int t = int(ids[std::size_t(k)] / n_envs_), env = int(ids[std::size_t(k)] % n_envs_);
    check(t, env, rollout_len_);
    if (t > 0 && !recorded_(t - 1, env)) throw ContractError("rollout buffer: step not recorded yet");
    const auto e = std::size_t(env);
    const Index row = seq_row(t, env), start = start_[e][std::size_t(t)];
    if (stacks) {
      for (int i = 0; i < stack_; ++i) {
        stacks->data().segment((k * stack_ + i) * hw, hw) = seq_[e].row(padded_index(row, start, i)).transpose();
      }
    }
    if (histories) {
      for (int i = 0; i < history_len_; ++i) {
        histories->data().segment((k * history_len_ + i) * embedding_dim_, embedding_dim_) =
            emb_[e].row(padded_index(row, start, i)).transpose();
      }
    }
  }
}

void RolloutBuffer::step_inputs(int t, Tensorf* stacks, Tensorf* histories) const {
  std::vector<Index> ids(static_cast<std::size_t>(n_envs_));
  std::iota(ids.begin(), ids.end(), Index(t) * n_envs_);
  fill_inputs(ids, stacks, histories);
}

void RolloutBuffer::reembed(const EncoderParams<float>& encoder) {
  if (!with_history()) return;
  for (std::size_t e = 0; e < seq_.size(); ++e) emb_[e] = encode_rows(encoder, seq_[e]);
}

FrameRows RolloutBuffer::episode_tail(int env) const {
  check(rollout_len_, env, rollout_len_);
  const auto e = std::size_t(env);
  const Index last = seq_row(rollout_len_, env);
  const Index first = std::max(start_[e].back(), last - context_);
  return seq_[e].middleRows(first, last - first + 1);
}

Eigen::MatrixXf RolloutBuffer::episode_tail_embeddings(int env) const {
  if (!with_history()) return {};
  const auto e = std::size_t(env);
  const Index last = seq_row(rollout_len_, env);
  const Index first = std::max(start_[e].back(), last - context_);
  return emb_[e].middleRows(first, last - first + 1);
}

Eigen::Map<const Eigen::RowVectorXf> RolloutBuffer::frame(int t, int env) const {
  check(t, env, rollout_len_);
  const auto& s = seq_[std::size_t(env)];
  return Eigen::Map<const Eigen::RowVectorXf>(s.data() + seq_row(t, env) * s.cols(), s.cols());
}

bool RolloutBuffer::episode_start(int t, int env) const {
  check(t, env, rollout_len_);
  return start_[std::size_t(env)][std::size_t(t)] == seq_row(t, env);
}

// ---------------------------------------------------------------- update

namespace {

constexpr Index kEvalChunk = 1024;

void forward_inputs(const AgentParams<float>& params, const RolloutBuffer& buffer, std::span<const Index> ids,
                    Tensorf& stacks, Tensorf& histories) {
  buffer.fill_inputs(ids, params.config.uses_instant() ? &stacks : nullptr,
                     params.config.uses_history() ? &histories : nullptr);
}

}  // namespace

void recompute_estimates(const AgentParams<float>& params, RolloutBuffer& buffer) {
  const int n_envs = buffer.n_envs();
  const Index total = Index(buffer.n_samples()) + n_envs;
  std::vector<Index> ids;
  Tensorf stacks, histories;
  for (Index first = 0; first < total; first += kEvalChunk) {
    const Index n = std::min(kEvalChunk, total - first);
    ids.resize(std::size_t(n));
    std::iota(ids.begin(), ids.end(), first);
    forward_inputs(params, buffer, ids, stacks, histories);
    GradTape<float> tape(false);
    const auto out = policy_forward(tape, params, stacks, histories);
    const auto logp = out.log_probs.matrix();
    for (Index k = 0; k < n; ++k) {
      const int t = int((first + k) / n_envs), e = int((first + k) % n_envs);
      if (t == buffer.rollout_len()) {
        buffer.set_bootstrap(e, out.value[k]);
      } else {
        buffer.log_probs(t, e) = logp(k, buffer.actions(t, e));
        buffer.values(t, e) = out.value[k];
      }
    }
  }
}

PpoStats update_policy(AgentParams<float>& params, const RolloutBuffer& buffer, const PpoConfig& cfg,
                       AdamState<float>& opt, Rng& rng) {
  cfg.validate();
  if (!buffer.full()) throw ContractError("update_policy: rollout buffer is not full");
  const int n_envs = buffer.n_envs();
  const auto gae = compute_gae<double>(buffer.rewards.cast<double>(), buffer.values.cast<double>(),
                                       buffer.dones.cast<double>(), buffer.bootstrap_values().cast<double>(),
                                       cfg.gamma, cfg.gae_lambda);
  const Eigen::MatrixXd adv = normalize_advantages<double>(gae.advantages);
  // Step-major flattening to match sample ids.
  const Index n = buffer.n_samples();
  Eigen::VectorXf flat_adv(n), flat_ret(n), flat_old(n);
  std::vector<int> flat_act(static_cast<std::size_t>(n));
  for (Index id = 0; id < n; ++id) {
    const Index t = id / n_envs, e = id % n_envs;
    flat_adv(id) = float(adv(t, e));
    flat_ret(id) = float(gae.returns(t, e));
    flat_old(id) = buffer.log_probs(t, e);
    flat_act[std::size_t(id)] = buffer.actions(t, e);
  }

  opt.config.lr = cfg.learning_rate;
  auto parameters = params.trainable_parameters();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  const Index mb_size = (n + cfg.n_minibatches - 1) / cfg.n_minibatches;
  PpoStats stats;
  Tensorf stacks, histories;
  for (int epoch = 0; epoch < cfg.n_policy_epochs; ++epoch) {
    for (Index i = n - 1; i > 0; --i) std::swap(order[std::size_t(i)], order[std::size_t(rng.uniform_int(0, i))]);
    for (Index first = 0; first < n; first += mb_size) {
      const Index m = std::min(mb_size, n - first);
      const std::span<const Index> ids(order.data() + first, std::size_t(m));
      PpoTargets<float> targets;
      targets.old_log_probs.resize(m);
      targets.advantages.resize(m);
      targets.returns.resize(m);
      std::vector<int> acts(static_cast<std::size_t>(m));
      for (Index k = 0; k < m; ++k) {
        const Index id = ids[std::size_t(k)];
        targets.old_log_probs(k) = flat_old(id);
        targets.advantages(k) = flat_adv(id);
        targets.returns(k) = flat_ret(id);
        acts[std::size_t(k)] = flat_act[std::size_t(id)];
      }
      forward_inputs(params, buffer, ids, stacks, histories);
      GradTape<float> tape;
      const auto out = policy_forward(tape, params, stacks, histories);
      const auto new_lp = gather_cols(tape, out.log_probs, std::span<const int>(acts));
      const auto losses = ppo_losses(tape, targets, new_lp, out.value, policy_entropy(tape, out), cfg);
      for (auto& p : parameters) p.zero_grad();
      tape.backward(losses.total);
      clip_grad_norm(std::span<Tensorf>(parameters), float(cfg.max_grad_norm));
      adam_step(std::span<Tensorf>(parameters), opt);

      const Eigen::ArrayXf log_ratio = new_lp.data().array() - targets.old_log_probs.array();
      stats.policy_loss += losses.policy_loss.item();
      stats.value_loss += losses.value_loss.item();
      stats.entropy += losses.entropy.item();
      stats.approx_kl += double((log_ratio.exp() - 1.0f - log_ratio).mean());
      stats.clip_fraction += double(((log_ratio.exp() - 1.0f).abs() > float(cfg.clip_eps)).cast<float>().mean());
      ++stats.n_updates;
    }
  }
  for (auto& p : parameters) p.zero_grad();
  if (stats.n_updates > 0) {
    const double k = stats.n_updates;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    stats.approx_kl /= k;
    stats.clip_fraction /= k;
  }
  return stats;
}

template GaeResult<float> compute_gae(const MatrixT<float>&, const MatrixT<float>&, const MatrixT<float>&,
                                      const VectorT<float>&, float, float);
template GaeResult<double> compute_gae(const MatrixT<double>&, const MatrixT<double>&, const MatrixT<double>&,
                                       const VectorT<double>&, double, double);
template MatrixT<float> normalize_advantages(const MatrixT<float>&);
template MatrixT<double> normalize_advantages(const MatrixT<double>&);
template Tensor<float> policy_entropy(GradTape<float>&, const PolicyOutput<float>&);
template Tensor<double> policy_entropy(GradTape<double>&, const PolicyOutput<double>&);
template PpoLosses<float> ppo_losses(GradTape<float>&, const PpoTargets<float>&, const Tensor<float>&,
                                     const Tensor<float>&, const Tensor<float>&, const PpoConfig&);
template PpoLosses<double> ppo_losses(GradTape<double>&, const PpoTargets<double>&, const Tensor<double>&,
                                      const Tensor<double>&, const Tensor<double>&, const PpoConfig&);

}  // namespace tempal
