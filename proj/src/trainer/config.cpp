#include "tempal/trainer/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "tempal/envworld/envs.hpp"

namespace tempal {
namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

template <typename T>
T parse_value(const std::string& text) {
  if constexpr (std::is_same_v<T, std::string>) {
    return text;
  } else {
    T value{};
    const char* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc() || ptr != end) throw ConfigError("'" + text + "' is not a valid number");
    if constexpr (std::is_floating_point_v<T>) {
      if (!std::isfinite(value)) throw ConfigError("'" + text + "' is not finite");
    }
    return value;
  }
}

template <typename T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_floating_point_v<T>) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  } else {
    return std::to_string(v);
  }
}

struct Field {
  std::string key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <typename Access>
Field field(std::string key, Access access) {
  using T = std::remove_cvref_t<decltype(access(std::declval<TrainConfig&>()))>;
  return {std::move(key), [access](TrainConfig& c, const std::string& v) { access(c) = parse_value<T>(v); },
          [access](const TrainConfig& c) { return format_value(access(c)); }};
}

#define TEMPAL_FIELD(key, member) field(key, [](auto& c) -> auto& { return c.member; })

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      TEMPAL_FIELD("train.total_steps", total_steps),
      TEMPAL_FIELD("train.n_envs", n_envs),
      TEMPAL_FIELD("train.rollout_len", rollout_len),
      TEMPAL_FIELD("train.pretrain_fraction", pretrain_fraction),
      TEMPAL_FIELD("train.seed", seed),
      TEMPAL_FIELD("train.eval_interval", eval_interval),
      TEMPAL_FIELD("train.eval_episodes", eval_episodes),
      TEMPAL_FIELD("train.final_eval_episodes", final_eval_episodes),
      TEMPAL_FIELD("train.checkpoint_interval", checkpoint_interval),
      TEMPAL_FIELD("env.name", env.name),
      TEMPAL_FIELD("env.width", env.width),
      TEMPAL_FIELD("env.height", env.height),
      TEMPAL_FIELD("env.corridor_length", env.corridor_length),
      TEMPAL_FIELD("env.texture_bits", env.texture_bits),
      TEMPAL_FIELD("env.paddle_width", env.paddle_width),
      TEMPAL_FIELD("env.obscure_prob", env.obscure_prob),
      TEMPAL_FIELD("env.max_episode_steps", env.max_episode_steps),
      TEMPAL_FIELD("align.temporal_window", align.temporal_window),
      TEMPAL_FIELD("align.temperature", align.temperature),
      TEMPAL_FIELD("align.batch_size", align.batch_size),
      TEMPAL_FIELD("align.learning_rate", align.learning_rate),
      TEMPAL_FIELD("align.max_shift", align.max_shift),
      TEMPAL_FIELD("align.embedding_dim", align.embedding_dim),
      TEMPAL_FIELD("align.store_capacity", align.store_capacity),
      TEMPAL_FIELD("align.n_encoder_epochs", align.n_encoder_epochs),
      TEMPAL_FIELD("align.n_pretrain_epochs", align.n_pretrain_epochs),
      TEMPAL_FIELD("ppo.gamma", ppo.gamma),
      TEMPAL_FIELD("ppo.gae_lambda", ppo.gae_lambda),
      TEMPAL_FIELD("ppo.clip_eps", ppo.clip_eps),
      TEMPAL_FIELD("ppo.value_coef", ppo.value_coef),
      TEMPAL_FIELD("ppo.entropy_coef", ppo.entropy_coef),
      TEMPAL_FIELD("ppo.n_policy_epochs", ppo.n_policy_epochs),
      TEMPAL_FIELD("ppo.n_minibatches", ppo.n_minibatches),
      TEMPAL_FIELD("ppo.learning_rate", ppo.learning_rate),
      TEMPAL_FIELD("ppo.max_grad_norm", ppo.max_grad_norm),
      Field{"agent.mode", [](TrainConfig& c, const std::string& v) { c.agent.mode = parse_agent_mode(v); },
            [](const TrainConfig& c) { return to_string(c.agent.mode); }},
      TEMPAL_FIELD("agent.stack", agent.stack),
      TEMPAL_FIELD("agent.history_len", agent.history_len),
      TEMPAL_FIELD("agent.history_channels", agent.history_channels),
      TEMPAL_FIELD("agent.history_fc", agent.history_fc),
      TEMPAL_FIELD("agent.instant_conv1", agent.instant_conv1),
      TEMPAL_FIELD("agent.instant_conv2", agent.instant_conv2),
      TEMPAL_FIELD("agent.instant_fc", agent.instant_fc),
  };
  return table;
}

#undef TEMPAL_FIELD

}  // namespace

void TrainConfig::validate() const {
  if (n_envs < 1) throw ConfigError("train.n_envs must be >= 1");
  if (rollout_len < 1) throw ConfigError("train.rollout_len must be >= 1");
  if (total_steps < std::int64_t(n_envs) * rollout_len) {
    throw ConfigError("train.total_steps must be at least train.n_envs * train.rollout_len");
  }
  if (!(pretrain_fraction >= 0.0 && pretrain_fraction < 1.0)) {
    throw ConfigError("train.pretrain_fraction must be in [0, 1)");
  }
  if (eval_interval < 0) throw ConfigError("train.eval_interval must be >= 0");
  if (eval_interval > 0 && eval_episodes < 1) throw ConfigError("train.eval_episodes must be >= 1");
  if (final_eval_episodes < 1) throw ConfigError("train.final_eval_episodes must be >= 1");
  if (checkpoint_interval < 0) throw ConfigError("train.checkpoint_interval must be >= 0");
  env.validate();
  align.validate();
  ppo.validate();
  resolved_agent().validate();
  if (n_iterations() < 1) throw ConfigError("train.total_steps leaves no budget for a training iteration");
}

std::int64_t TrainConfig::pretrain_steps() const {
  if (agent.mode == AgentMode::kInstantOnly) return 0;
  return std::llround(pretrain_fraction * double(total_steps));
}

int TrainConfig::n_iterations() const {
  const std::int64_t vec_steps = (pretrain_steps() + n_envs - 1) / n_envs;
  const std::int64_t left = total_steps - vec_steps * n_envs;
  return left < 0 ? 0 : int(left / steps_per_iteration());
}

AgentConfig TrainConfig::resolved_agent() const {
  AgentConfig a = agent;
  a.height = env.height;
  a.width = env.width;
  a.embedding_dim = align.embedding_dim;
  a.n_actions = make_env(env)->n_actions();
  return a;
}

TrainConfig parse_config(std::string_view text) {
  TrainConfig cfg;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string where = "line " + std::to_string(number) + ": ";
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string content = trim(line);
    if (content.empty()) continue;
    const auto eq = content.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = trim(std::string_view(content).substr(0, eq));
    const std::string value = trim(std::string_view(content).substr(eq + 1));
    if (key.empty() || value.empty()) throw ConfigError(where + "expected 'key = value'");
    const auto& table = fields();
    const auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key == key; });
    if (it == table.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      it->set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + key + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("config file not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config file: " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  try {
    return parse_config(text.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string to_config_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

std::uint64_t config_fingerprint(const TrainConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_config_text(cfg)) h = (h ^ ch) * 0x100000001b3ULL;
  return h;
}

}  // namespace tempal
