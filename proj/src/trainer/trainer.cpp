#include "tempal/trainer/trainer.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace tempal {
namespace {

constexpr int kProbeFrames = 1000;
constexpr std::uint64_t kFinalEvalTag = std::uint64_t(1) << 40;

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) h = (h ^ p[i]) * 0x100000001b3ULL;
  return h;
}

Eigen::Map<const Eigen::RowVectorXf> flat(const Observation& obs) {
  return Eigen::Map<const Eigen::RowVectorXf>(obs.data(), obs.size());
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nan("");
  double s = 0;
  for (double x : v) s += x;
  return s / double(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.empty()) return std::nan("");
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / double(v.size()));
}

std::string env_slot_name(int e, const char* field) { return "env." + std::to_string(e) + "." + field; }

void append_line(const std::filesystem::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot append to " + path.string());
  out << line << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << content;
  if (!out) throw IoError("failed writing " + path.string());
}

// Keeps the header and the rows whose leading iteration is <= last.
void truncate_rows(const std::filesystem::path& path, const std::string& header, int last) {
  std::string kept = header + "\n";
  std::ifstream in(path, std::ios::binary);
  if (in) {
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
      if (first) {
        first = false;
        continue;
      }
      if (line.empty()) continue;
      if (std::stoll(line.substr(0, line.find(','))) <= last) kept += line + "\n";
    }
  }
  write_file(path, kept);
}

}  // namespace

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::kPretrain: return "pretrain";
    case Stage::kCollect: return "collect";
    case Stage::kAlign: return "align";
    case Stage::kOptimize: return "optimize";
  }
  return "?";
}

std::uint64_t parameter_checksum(std::span<const Tensorf> params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params) h = fnv1a(h, p.raw(), std::size_t(p.size()) * sizeof(float));
  return h;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.8g", v);
  return buf;
}

// ---------------------------------------------------------------- episodes

std::vector<double> run_episodes(const AgentParams<float>& agent, const EncoderParams<float>* encoder,
                                 const EnvConfig& env, int episodes, bool greedy, std::uint64_t seed) {
  if (episodes < 1) throw ContractError("run_episodes: episodes must be >= 1");
  const AgentConfig& ac = agent.config;
  const bool history = ac.uses_history();
  if (history && !encoder) throw ContractError("run_episodes: the agent needs an encoder");
  constexpr int kBatch = 32;
  const Rng root(seed);
  const Index hw = Index(ac.height) * ac.width;
  std::vector<double> returns(static_cast<std::size_t>(episodes), 0.0);

  struct Run {
    std::unique_ptr<Env> env;
    std::vector<Observation> frames;
    Eigen::MatrixXf emb;
    Rng rng;
    bool done = false;
  };
  for (int first = 0; first < episodes; first += kBatch) {
    const int n = std::min(kBatch, episodes - first);
    std::vector<Run> runs(static_cast<std::size_t>(n));
    FrameRows fresh(n, hw);
    for (int i = 0; i < n; ++i) {
      auto& r = runs[std::size_t(i)];
      EnvConfig c = env;
      c.seed = root.split("env", std::uint64_t(first + i)).key();
      r.env = make_env(c);
      if (r.env->height() != ac.height || r.env->width() != ac.width || r.env->n_actions() != ac.n_actions) {
        throw ConfigError("run_episodes: environment does not match the agent's input or action sizes");
      }
      r.rng = root.split("act", std::uint64_t(first + i));
      r.frames.push_back(r.env->reset());
      fresh.row(i) = flat(r.frames.back());
    }
    if (history) {
      const Eigen::MatrixXf z = encode_rows(*encoder, fresh);
      for (int i = 0; i < n; ++i) runs[std::size_t(i)].emb = z.row(i);
    }

    std::vector<int> active(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) active[std::size_t(i)] = i;
    while (!active.empty()) {
      const Index m = Index(active.size());
      Tensorf stacks, histories;
      if (ac.uses_instant()) stacks = Tensorf({m, ac.stack, ac.height, ac.width});
      if (history) histories = Tensorf({m, ac.history_len, ac.embedding_dim});
      for (Index k = 0; k < m; ++k) {
        auto& r = runs[std::size_t(active[std::size_t(k)])];
        if (!history) r.emb = Eigen::MatrixXf::Zero(Index(r.frames.size()), 1);
        const auto in = assemble_inputs(r.frames, r.emb, 0, ac.stack, ac.history_len);
        if (ac.uses_instant()) stacks.data().segment(k * in.stack.size(), in.stack.size()) = in.stack.data();
        if (history) histories.data().segment(k * in.history.size(), in.history.size()) = in.history.data();
      }
      GradTape<float> tape(false);
      const auto out = policy_forward(tape, agent, stacks, histories);
      const auto probs = out.probs.matrix();

      std::vector<int> still;
      FrameRows next(m, hw);
      std::vector<int> next_owner;
      for (Index k = 0; k < m; ++k) {
        const int i = active[std::size_t(k)];
        auto& r = runs[std::size_t(i)];
        int a = 0;
        if (greedy) {
          probs.row(k).maxCoeff(&a);
        } else {
          const float u = r.rng.uniform<float>();
          float cdf = 0;
          a = ac.n_actions - 1;
          for (int j = 0; j < ac.n_actions; ++j) {
            cdf += probs(k, j);
            if (u < cdf) {
              a = j;
              break;
            }
          }
        }
        auto step = r.env->step(a);
        returns[std::size_t(first + i)] += step.reward;
        if (step.done) continue;
        next.row(Index(next_owner.size())) = flat(step.obs);
        next_owner.push_back(i);
        r.frames.push_back(std::move(step.obs));
        still.push_back(i);
      }
      if (history && !next_owner.empty()) {
        const Eigen::MatrixXf z = encode_rows(*encoder, FrameRows(next.topRows(Index(next_owner.size()))));
        for (std::size_t j = 0; j < next_owner.size(); ++j) {
          auto& emb = runs[std::size_t(next_owner[j])].emb;
          emb.conservativeResize(emb.rows() + 1, Eigen::NoChange);
          emb.row(emb.rows() - 1) = z.row(Index(j));
        }
      }
      active = std::move(still);
    }
  }
  return returns;
}

// ---------------------------------------------------------------- trainer

Trainer::Trainer(TrainConfig cfg)
    : cfg_((cfg.validate(), std::move(cfg))),
      agent_cfg_(cfg_.resolved_agent()),
      envs_(
          [&] {
            EnvConfig c = cfg_.env;
            c.seed = Rng(cfg_.seed).split("env").key();
            return c;
          }(),
          cfg_.n_envs),
      store_(cfg_.align.store_capacity, cfg_.env.height, cfg_.env.width) {
  const Rng master(cfg_.seed);
  if (has_encoder()) {
    encoder_ = EncoderParams<float>::init(cfg_.env.height, cfg_.env.width, cfg_.align.embedding_dim,
                                          master.split("encoder"));
    encoder_opt_ = AdamState<float>(AdamConfig{cfg_.align.learning_rate}, encoder_.parameters());
  }
  agent_ = AgentParams<float>::init(agent_cfg_, master.split("agent"));
  agent_opt_ = AdamState<float>(AdamConfig{cfg_.ppo.learning_rate}, agent_.trainable_parameters());
  align_rng_ = master.split("align");
  action_rng_ = master.split("action");
  ppo_rng_ = master.split("ppo");

  if (has_encoder()) {
    EnvConfig pc = cfg_.env;
    pc.seed = master.split("probe").key();
    auto env = make_env(pc);
    Rng walk = master.split("probe-walk");
    probe_.push_back(env->reset());
    while (int(probe_.size()) < kProbeFrames) {
      auto r = env->step(int(walk.uniform_int(0, env->n_actions() - 1)));
      probe_.push_back(r.done ? env->reset() : std::move(r.obs));
    }
  }

  const auto first = envs_.reset();
  slots_.resize(first.size());
  for (std::size_t e = 0; e < first.size(); ++e) {
    start_episode(slots_[e], first[e]);
    if (has_encoder()) store_.push(first[e], {slots_[e].trajectory, 0});
  }
}

void Trainer::start_episode(EnvSlot& slot, const Observation& first) {
  slot.tail = FrameRows(1, first.size());
  slot.tail.row(0) = flat(first);
  slot.trajectory = next_trajectory_++;
  slot.step = 0;
  slot.episode_return = 0.0;
}

void Trainer::append_frame(EnvSlot& slot, const Observation& frame) {
  const Index keep = std::max(agent_cfg_.stack, agent_cfg_.uses_history() ? agent_cfg_.history_len : 1);
  const Index rows = std::min<Index>(slot.tail.rows() + 1, keep);
  FrameRows next(rows, slot.tail.cols());
  next.topRows(rows - 1) = slot.tail.bottomRows(rows - 1);
  next.row(rows - 1) = flat(frame);
  slot.tail = std::move(next);
  ++slot.step;
}

std::uint64_t Trainer::encoder_checksum() const {
  return has_encoder() ? parameter_checksum(encoder_.parameters()) : 0;
}

std::uint64_t Trainer::agent_checksum() const { return parameter_checksum(agent_.all_parameters()); }

StageEvent Trainer::open_event(Stage stage) const {
  StageEvent ev;
  ev.iteration = iteration_;
  ev.stage = stage;
  ev.encoder_before = encoder_checksum();
  ev.agent_before = agent_checksum();
  return ev;
}

void Trainer::close_event(StageEvent ev) {
  ev.encoder_after = encoder_checksum();
  ev.agent_after = agent_checksum();
  events_.push_back(ev);
}

double Trainer::probe_score() const {
  Rng rng = Rng(cfg_.seed).split("score");
  return alignment_score(encoder_, probe_, cfg_.align.temporal_window, rng);
}

std::vector<double> Trainer::pretrain() {
  if (pretrained_) throw ContractError("pretrain: already done");
  pretrained_ = true;
  std::vector<double> losses;
  if (!has_encoder()) return losses;
  auto ev = open_event(Stage::kPretrain);
  Rng rng = Rng(cfg_.seed).split("pretrain");
  const int n_envs = envs_.size();
  const std::int64_t vec_steps = (cfg_.pretrain_steps() + n_envs - 1) / n_envs;
  std::vector<int> actions(static_cast<std::size_t>(n_envs));
  for (std::int64_t s = 0; s < vec_steps; ++s) {
    for (auto& a : actions) a = int(rng.uniform_int(0, envs_.n_actions() - 1));
    const auto results = envs_.step(actions);
    for (int e = 0; e < n_envs; ++e) {
      auto& slot = slots_[std::size_t(e)];
      const auto& r = results[std::size_t(e)];
      if (r.done) {
        start_episode(slot, r.obs);
      } else {
        append_frame(slot, r.obs);
      }
      store_.push(r.obs, {slot.trajectory, slot.step});
    }
  }
  env_steps_ += vec_steps * n_envs;
  if (vec_steps > 0) {
    for (int epoch = 0; epoch < cfg_.align.n_pretrain_epochs; ++epoch) {
      losses.push_back(update_encoder(encoder_, store_, cfg_.align, encoder_opt_, 1, align_rng_));
    }
  }
  close_event(ev);
  return losses;
}

IterationMetrics Trainer::train_iteration() {
  if (!pretrained_) throw ContractError("train_iteration: pretrain() has not run");
  if (finished()) throw ContractError("train_iteration: the step budget is spent");
  ++iteration_;
  const int n_envs = envs_.size(), len = cfg_.rollout_len;
  const bool history = agent_cfg_.uses_history(), instant = agent_cfg_.uses_instant();
  const Index hw = Index(cfg_.env.height) * cfg_.env.width;
  IterationMetrics m;
  m.iteration = iteration_;
  m.align_loss = m.align_score = std::nan("");

  // Stage 1: experience collection.
  auto ev = open_event(Stage::kCollect);
  RolloutBuffer buffer(len, n_envs, cfg_.env.height, cfg_.env.width, agent_cfg_.stack, agent_cfg_.history_len,
                       history ? agent_cfg_.embedding_dim : 0);
  for (int e = 0; e < n_envs; ++e) {
    const auto& tail = slots_[std::size_t(e)].tail;
    buffer.begin(e, tail, history ? encode_rows(encoder_, tail) : Eigen::MatrixXf());
  }
  std::vector<double> finished_returns;
  Tensorf stacks, histories;
  FrameRows next(n_envs, hw);
  for (int t = 0; t < len; ++t) {
    buffer.step_inputs(t, instant ? &stacks : nullptr, history ? &histories : nullptr);
    const auto acted = act(agent_, stacks, histories, action_rng_);
    for (int e = 0; e < n_envs; ++e) {
      buffer.record_action(t, e, acted.actions[std::size_t(e)], acted.log_probs[std::size_t(e)],
                           acted.values[std::size_t(e)]);
    }
    const auto results = envs_.step(acted.actions);
    for (int e = 0; e < n_envs; ++e) next.row(e) = flat(results[std::size_t(e)].obs);
    const Eigen::MatrixXf z = history ? encode_rows(encoder_, next) : Eigen::MatrixXf();
    for (int e = 0; e < n_envs; ++e) {
      auto& slot = slots_[std::size_t(e)];
      const auto& r = results[std::size_t(e)];
      buffer.record_outcome(t, e, r.reward, r.done, next.row(e).data(),
                            history ? Eigen::VectorXf(z.row(e).transpose()) : Eigen::VectorXf());
      slot.episode_return += r.reward;
      if (r.done) {
        finished_returns.push_back(slot.episode_return);
        start_episode(slot, r.obs);
      } else {
        append_frame(slot, r.obs);
      }
      if (has_encoder()) store_.push(r.obs, {slot.trajectory, slot.step});
    }
  }
  env_steps_ += std::int64_t(n_envs) * len;
  m.steps = env_steps_;
  m.mean_return = mean_of(finished_returns);
  close_event(ev);

  // Stage 2: temporal alignment, then fresh embeddings for the rollout.
  if (has_encoder()) {
    ev = open_event(Stage::kAlign);
    m.align_loss = update_encoder(encoder_, store_, cfg_.align, encoder_opt_, cfg_.align.n_encoder_epochs, align_rng_);
    buffer.reembed(encoder_);
    close_event(ev);
    m.align_score = probe_score();
  }

  // Stage 3: policy optimization against the re-evaluated rollout.
  ev = open_event(Stage::kOptimize);
  recompute_estimates(agent_, buffer);
  const auto stats = update_policy(agent_, buffer, cfg_.ppo, agent_opt_, ppo_rng_);
  close_event(ev);
  m.policy_loss = stats.policy_loss;
  m.value_loss = stats.value_loss;
  m.entropy = stats.entropy;
  return m;
}

std::vector<double> Trainer::evaluate(int episodes, std::uint64_t tag, bool greedy) const {
  EnvConfig c = cfg_.env;
  c.seed = 0;
  return run_episodes(agent_, encoder(), c, episodes, greedy, Rng(cfg_.seed).split("eval", tag).key());
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.add_text("meta.config", to_config_text(cfg_));
  const std::uint64_t state[4] = {std::uint64_t(iteration_), std::uint64_t(env_steps_), next_trajectory_,
                                  pretrained_ ? 1u : 0u};
  c.add_u64("meta.state", state);
  c.add_rng("rng.align", align_rng_);
  c.add_rng("rng.action", action_rng_);
  c.add_rng("rng.ppo", ppo_rng_);
  if (has_encoder()) {
    const auto names = EncoderParams<float>::parameter_names();
    const auto params = encoder_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) c.add_tensor("encoder." + names[i], params[i]);
    c.add_adam("encoder.adam", encoder_opt_);
  }
  const auto names = AgentParams<float>::parameter_names();
  const auto params = agent_.all_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) c.add_tensor("agent." + names[i], params[i]);
  c.add_adam("agent.adam", agent_opt_);
  if (has_encoder()) {
    const auto& rows = store_.frame_rows();
    c.add_floats("store.frames", std::span<const float>(rows.data(), std::size_t(rows.size())));
    std::vector<std::uint64_t> tags;
    for (const auto& t : store_.tags()) {
      tags.push_back(t.trajectory);
      tags.push_back(std::uint64_t(std::uint32_t(t.step)));
    }
    c.add_u64("store.tags", tags);
    const std::uint64_t ring[2] = {std::uint64_t(store_.head()), std::uint64_t(store_.size())};
    c.add_u64("store.ring", ring);
  }
  for (int e = 0; e < envs_.size(); ++e) {
    const auto& slot = slots_[std::size_t(e)];
    c.add_u64(env_slot_name(e, "state"), envs_.env(e).save_state());
    c.add_floats(env_slot_name(e, "tail"), std::span<const float>(slot.tail.data(), std::size_t(slot.tail.size())));
    const std::uint64_t episode[3] = {slot.trajectory, std::uint64_t(std::uint32_t(slot.step)),
                                      std::bit_cast<std::uint64_t>(slot.episode_return)};
    c.add_u64(env_slot_name(e, "episode"), episode);
  }
  return c;
}

PolicySnapshot load_policy(const Checkpoint& c) {
  PolicySnapshot p{parse_config(c.text("meta.config")), {}, std::nullopt};
  const AgentConfig ac = p.config.resolved_agent();
  p.agent = AgentParams<float>::init(ac, Rng(0));
  const auto agent_names = AgentParams<float>::parameter_names();
  auto agent_params = p.agent.all_parameters();
  for (std::size_t i = 0; i < agent_params.size(); ++i) c.read_tensor("agent." + agent_names[i], agent_params[i]);
  if (ac.uses_history()) {
    p.encoder = EncoderParams<float>::init(ac.height, ac.width, ac.embedding_dim, Rng(0));
    const auto names = EncoderParams<float>::parameter_names();
    auto params = p.encoder->parameters();
    for (std::size_t i = 0; i < params.size(); ++i) c.read_tensor("encoder." + names[i], params[i]);
  }
  const auto state = c.u64("meta.state");
  if (state.size() != 4) throw FormatError("checkpoint 'meta.state' has the wrong size");
  p.iteration = int(state[0]);
  p.env_steps = std::int64_t(state[1]);
  return p;
}

std::unique_ptr<Trainer> Trainer::restore(const Checkpoint& c) {
  auto tr = std::make_unique<Trainer>(parse_config(c.text("meta.config")));
  const auto state = c.u64("meta.state");
  if (state.size() != 4) throw FormatError("checkpoint 'meta.state' has the wrong size");
  tr->iteration_ = int(state[0]);
  tr->env_steps_ = std::int64_t(state[1]);
  tr->next_trajectory_ = state[2];
  tr->pretrained_ = state[3] != 0;
  tr->align_rng_ = c.rng("rng.align");
  tr->action_rng_ = c.rng("rng.action");
  tr->ppo_rng_ = c.rng("rng.ppo");
  if (tr->has_encoder()) {
    const auto names = EncoderParams<float>::parameter_names();
    auto params = tr->encoder_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) c.read_tensor("encoder." + names[i], params[i]);
    tr->encoder_opt_ = c.adam("encoder.adam", params);
    tr->encoder_opt_.config.lr = tr->cfg_.align.learning_rate;
  }
  {
    const auto names = AgentParams<float>::parameter_names();
    auto params = tr->agent_.all_parameters();
    for (std::size_t i = 0; i < params.size(); ++i) c.read_tensor("agent." + names[i], params[i]);
    tr->agent_opt_ = c.adam("agent.adam", tr->agent_.trainable_parameters());
    tr->agent_opt_.config.lr = tr->cfg_.ppo.learning_rate;
  }
  if (tr->has_encoder()) {
    const auto frames = c.floats("store.frames");
    const Index hw = Index(tr->cfg_.env.height) * tr->cfg_.env.width;
    if (Index(frames.size()) % hw != 0) throw FormatError("checkpoint 'store.frames' has the wrong size");
    FrameRows rows = Eigen::Map<const FrameRows>(frames.data(), Index(frames.size()) / hw, hw);
    const auto raw = c.u64("store.tags");
    std::vector<FrameTag> tags;
    for (std::size_t i = 0; i + 1 < raw.size(); i += 2) tags.push_back({raw[i], std::int32_t(std::uint32_t(raw[i + 1]))});
    const auto ring = c.u64("store.ring");
    if (ring.size() != 2) throw FormatError("checkpoint 'store.ring' has the wrong size");
    tr->store_.restore(std::move(rows), std::move(tags), int(ring[0]), int(ring[1]));
  }
  const Index hw = Index(tr->cfg_.env.height) * tr->cfg_.env.width;
  for (int e = 0; e < tr->envs_.size(); ++e) {
    auto& slot = tr->slots_[std::size_t(e)];
    tr->envs_.env(e).load_state(c.u64(env_slot_name(e, "state")));
    const auto tail = c.floats(env_slot_name(e, "tail"));
    if (tail.empty() || Index(tail.size()) % hw != 0) throw FormatError("checkpoint env tail has the wrong size");
    slot.tail = Eigen::Map<const FrameRows>(tail.data(), Index(tail.size()) / hw, hw);
    const auto episode = c.u64(env_slot_name(e, "episode"));
    if (episode.size() != 3) throw FormatError("checkpoint env episode record has the wrong size");
    slot.trajectory = episode[0];
    slot.step = std::int32_t(std::uint32_t(episode[1]));
    slot.episode_return = std::bit_cast<double>(episode[2]);
  }
  return tr;
}

// ---------------------------------------------------------------- driver

TrainResult train(const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  namespace fs = std::filesystem;
  const fs::path& dir = options.out_dir;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  const fs::path metrics_path = dir / "metrics.csv", eval_path = dir / "eval.csv", ckpt_path = dir / "checkpoint.tmpl";
  auto log = [&](const std::string& msg) {
    if (options.log) options.log(msg);
  };

  std::unique_ptr<Trainer> tr;
  if (options.resume && fs::exists(ckpt_path)) {
    tr = Trainer::restore(load_checkpoint(ckpt_path));
    if (config_fingerprint(tr->config()) != config_fingerprint(cfg)) {
      throw ConfigError("checkpoint " + ckpt_path.string() + " was written with a different config");
    }
    log("resumed at iteration " + std::to_string(tr->iteration()));
    if (tr->finished()) {
      TrainResult done{tr->iteration(), tr->env_steps(), true, {}};
      done.final_returns = tr->evaluate(cfg.final_eval_episodes, kFinalEvalTag);
      return done;
    }
    truncate_rows(metrics_path, kMetricsHeader, tr->iteration());
    truncate_rows(eval_path, kEvalHeader, tr->iteration());
  } else {
    tr = std::make_unique<Trainer>(cfg);
    write_file(metrics_path, std::string(kMetricsHeader) + "\n");
    write_file(eval_path, std::string(kEvalHeader) + "\n");
    if (cfg.pretrain_steps() > 0) {
      log("pretraining: " + std::to_string(cfg.pretrain_steps()) + " random steps, " +
          std::to_string(cfg.align.n_pretrain_epochs) + " encoder epochs");
    }
    const auto losses = tr->pretrain();
    if (!losses.empty()) {
      log("pretraining loss " + format_number(losses.front()) + " -> " + format_number(losses.back()));
    }
  }

  auto eval_row = [&](int iteration, const std::vector<double>& r) {
    append_line(eval_path, std::to_string(iteration) + "," + std::to_string(tr->env_steps()) + "," +
                               std::to_string(r.size()) + "," + format_number(mean_of(r)) + "," +
                               format_number(std_of(r)));
  };
  while (!tr->finished()) {
    if (options.stop_after >= 0 && tr->iteration() >= options.stop_after) {
      save_checkpoint(tr->checkpoint(), ckpt_path);
      log("stopped at iteration " + std::to_string(tr->iteration()));
      return {tr->iteration(), tr->env_steps(), false, {}};
    }
    const auto m = tr->train_iteration();
    append_line(metrics_path, std::to_string(m.iteration) + "," + std::to_string(m.steps) + "," +
                                  format_number(m.mean_return) + "," + format_number(m.align_loss) + "," +
                                  format_number(m.align_score) + "," + format_number(m.policy_loss) + "," +
                                  format_number(m.value_loss) + "," + format_number(m.entropy));
    if (options.on_iteration) options.on_iteration(m);
    if (cfg.eval_interval > 0 && m.iteration % cfg.eval_interval == 0) {
      const auto r = tr->evaluate(cfg.eval_episodes, std::uint64_t(m.iteration));
      eval_row(m.iteration, r);
      log("iter " + std::to_string(m.iteration) + " steps " + std::to_string(m.steps) + " eval return " +
          format_number(mean_of(r)));
    }
    if (cfg.checkpoint_interval > 0 && m.iteration % cfg.checkpoint_interval == 0) {
      save_checkpoint(tr->checkpoint(), ckpt_path);
    }
  }
  TrainResult result{tr->iteration(), tr->env_steps(), true, {}};
  result.final_returns = tr->evaluate(cfg.final_eval_episodes, kFinalEvalTag);
  eval_row(tr->iteration(), result.final_returns);
  save_checkpoint(tr->checkpoint(), ckpt_path);
  log("final eval over " + std::to_string(result.final_returns.size()) + " episodes: " +
      format_number(mean_of(result.final_returns)));
  return result;
}

}  // namespace tempal
