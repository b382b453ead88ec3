#include "tempal/evalcli/evalcli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "tempal/envworld/envs.hpp"

namespace tempal {
namespace {

using nlohmann::json;

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  out.flush();
  if (!out) throw IoError("failed writing " + path.string());
}

EnvConfig checked_env(const TrainConfig& cfg, const std::optional<EnvConfig>& env) {
  if (!env) return cfg.env;
  EnvConfig a = *env, b = cfg.env;
  a.seed = b.seed = 0;
  if (!(a == b)) {
    throw ConfigError("environment '" + env->name + "' does not match the checkpoint's environment '" + cfg.env.name +
                      "'");
  }
  return *env;
}

std::optional<double> optional_number(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

double parse_double(std::string_view s, const std::filesystem::path& path, std::size_t line) {
  double v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    if (s == "nan") return std::nan("");
    throw FormatError(path.string() + ": line " + std::to_string(line) + ": bad number '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace

EvalReport EvalReport::from_returns(std::string env, std::string mode, std::vector<double> returns) {
  if (returns.empty()) throw ContractError("EvalReport: at least one episode is required");
  EvalReport r;
  r.env = std::move(env);
  r.mode = std::move(mode);
  r.episodes = int(returns.size());
  const Eigen::Map<const Eigen::VectorXd> v(returns.data(), Index(returns.size()));
  r.mean_return = v.mean();
  r.std_return = std::sqrt((v.array() - r.mean_return).square().mean());
  r.returns = std::move(returns);
  return r;
}

std::string report_to_json(const EvalReport& r) {
  json j = {{"env", r.env},
            {"mode", r.mode},
            {"episodes", r.episodes},
            {"mean_return", r.mean_return},
            {"std_return", r.std_return},
            {"returns", r.returns}};
  j["r_random"] = r.r_random ? json(*r.r_random) : json(nullptr);
  j["r_instant"] = r.r_instant ? json(*r.r_instant) : json(nullptr);
  j["r_tempal"] = r.r_tempal ? json(*r.r_tempal) : json(nullptr);
  return j.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& text) {
  EvalReport r;
  try {
    const json j = json::parse(text);
    r = EvalReport::from_returns(j.at("env").get<std::string>(), j.at("mode").get<std::string>(),
                                 j.at("returns").get<std::vector<double>>());
    if (j.at("episodes").get<int>() != r.episodes) throw FormatError("report: episodes does not match returns");
    const double mean = j.at("mean_return").get<double>();
    if (std::abs(mean - r.mean_return) > 1e-9 * std::max(1.0, std::abs(mean))) {
      throw FormatError("report: mean_return is not the mean of returns");
    }
    r.r_random = optional_number(j, "r_random");
    r.r_instant = optional_number(j, "r_instant");
    r.r_tempal = optional_number(j, "r_tempal");
  } catch (const json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  } catch (const ContractError& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
  return r;
}

void save_report(const EvalReport& report, const std::filesystem::path& path) {
  write_text(path, report_to_json(report));
}

EvalReport load_report(const std::filesystem::path& path) {
  try {
    return report_from_json(read_text(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

EvalReport evaluate(const Checkpoint& ckpt, const std::optional<EnvConfig>& env, int episodes, bool greedy,
                    std::uint64_t seed) {
  if (episodes < 1) throw ContractError("evaluate: episodes must be >= 1");
  const PolicySnapshot p = load_policy(ckpt);
  const EnvConfig e = checked_env(p.config, env);
  auto returns = run_episodes(p.agent, p.encoder ? &*p.encoder : nullptr, e, episodes, greedy, seed);
  return EvalReport::from_returns(e.name, to_string(p.config.agent.mode), std::move(returns));
}

EvalReport evaluate_random(const EnvConfig& env, int episodes, std::uint64_t seed) {
  if (episodes < 1) throw ContractError("evaluate_random: episodes must be >= 1");
  env.validate();
  const Rng root(seed);
  std::vector<double> returns;
  for (int i = 0; i < episodes; ++i) {
    EnvConfig c = env;
    c.seed = root.split("env", std::uint64_t(i)).key();
    auto e = make_env(c);
    Rng rng = root.split("act", std::uint64_t(i));
    e->reset();
    double total = 0;
    for (bool done = false; !done;) {
      const auto s = e->step(int(rng.uniform_int(0, e->n_actions() - 1)));
      total += s.reward;
      done = s.done;
    }
    returns.push_back(total);
  }
  return EvalReport::from_returns(env.name, "random", std::move(returns));
}

double relative_improvement(double r_tempal, double r_random, double r_instant) {
  if (r_instant == r_random) {
    if (r_tempal > r_random) return 100.0;
    if (r_tempal < r_random) return -100.0;
    return 0.0;
  }
  return ((r_tempal - r_random) / (r_instant - r_random) - 1.0) * 100.0;
}

EvalReport compare(const EvalReport& random, const EvalReport& instant, const EvalReport& tempal) {
  if (random.env != tempal.env || instant.env != tempal.env) {
    throw ConfigError("compare: reports come from different environments (" + random.env + ", " + instant.env +
                      ", " + tempal.env + ")");
  }
  EvalReport out = tempal;
  out.r_random = random.mean_return;
  out.r_instant = instant.mean_return;
  out.r_tempal = tempal.mean_return;
  return out;
}

std::string format_comparison(const EvalReport& r) {
  if (!r.r_random || !r.r_instant || !r.r_tempal) throw ContractError("format_comparison: report was not compared");
  char line[256];
  std::string out;
  std::snprintf(line, sizeof line, "%-16s %-10s %12s %12s %12s %12s\n", "env", "mode", "R_random", "R_instant",
                "R_TempAl", "improvement");
  out += line;
  std::snprintf(line, sizeof line, "%-16s %-10s %12.6g %12.6g %12.6g %+11.2f%%\n", r.env.c_str(), r.mode.c_str(),
                *r.r_random, *r.r_instant, *r.r_tempal, relative_improvement(*r.r_tempal, *r.r_random, *r.r_instant));
  out += line;
  return out;
}

EmbeddingDump collect_embeddings(const Checkpoint& ckpt, const std::optional<EnvConfig>& env, int steps, bool greedy,
                                 std::uint64_t seed) {
  if (steps < 1) throw ContractError("collect_embeddings: steps must be >= 1");
  const PolicySnapshot p = load_policy(ckpt);
  if (!p.encoder) throw ContractError("collect_embeddings: checkpoint has no encoder (instant_only)");
  EnvConfig c = checked_env(p.config, env);
  const Rng root(seed);
  c.seed = root.split("env", 0).key();
  Rng rng = root.split("act", 0);
  const AgentConfig& ac = p.agent.config;
  auto e = make_env(c);

  EmbeddingDump dump;
  dump.z.resize(steps, ac.embedding_dim);
  std::vector<Observation> frames;
  Eigen::MatrixXf emb;
  std::int64_t episode = 0;
  auto observe = [&](Observation obs) {
    const FrameRows row = Eigen::Map<const Eigen::RowVectorXf>(obs.data(), obs.size());
    const Eigen::MatrixXf z = encode_rows(*p.encoder, row);
    emb.conservativeResize(emb.rows() + 1, z.cols());
    emb.row(emb.rows() - 1) = z.row(0);
    frames.push_back(std::move(obs));
  };
  observe(e->reset());
  for (int t = 0; t < steps; ++t) {
    dump.rows.push_back({t, episode, std::int32_t(frames.size() - 1)});
    dump.z.row(t) = emb.row(emb.rows() - 1);
    const auto in = assemble_inputs(frames, emb, 0, ac.stack, ac.history_len);
    Tensorf stacks, histories;
    if (ac.uses_instant()) stacks = Tensorf({1, ac.stack, ac.height, ac.width}, in.stack.data());
    histories = Tensorf({1, ac.history_len, ac.embedding_dim}, in.history.data());
    GradTape<float> tape(false);
    const auto probs = policy_forward(tape, p.agent, stacks, histories).probs.matrix();
    int a = 0;
    if (greedy) {
      probs.row(0).maxCoeff(&a);
    } else {
      const float u = rng.uniform<float>();
      float cdf = 0;
      a = ac.n_actions - 1;
      for (int j = 0; j < ac.n_actions; ++j) {
        cdf += probs(0, j);
        if (u < cdf) {
          a = j;
          break;
        }
      }
    }
    auto s = e->step(a);
    if (s.done) {
      ++episode;
      frames.clear();
      emb.resize(0, 0);
      observe(e->reset());
    } else {
      observe(std::move(s.obs));
    }
  }
  return dump;
}

void write_embedding_csv(const EmbeddingDump& dump, const std::filesystem::path& path) {
  const Index d = dump.z.cols();
  if (Index(dump.rows.size()) != dump.z.rows()) throw ContractError("write_embedding_csv: row count mismatch");
  if (dump.pca && dump.pca->rows() != dump.z.rows()) throw ContractError("write_embedding_csv: projection size mismatch");
  std::string out = "step,episode,ep_step";
  for (Index k = 0; k < d; ++k) out += ",z" + std::to_string(k);
  if (dump.pca) out += ",p0,p1";
  out += "\n";
  char buf[32];
  for (std::size_t i = 0; i < dump.rows.size(); ++i) {
    const auto& r = dump.rows[i];
    out += std::to_string(r.step) + "," + std::to_string(r.episode) + "," + std::to_string(r.ep_step);
    for (Index k = 0; k < d; ++k) {
      std::snprintf(buf, sizeof buf, ",%.8g", double(dump.z(Index(i), k)));
      out += buf;
    }
    if (dump.pca) {
      for (Index k = 0; k < 2; ++k) {
        std::snprintf(buf, sizeof buf, ",%.8g", (*dump.pca)(Index(i), k));
        out += buf;
      }
    }
    out += "\n";
  }
  write_text(path, out);
}

EmbeddingDump read_embedding_csv(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(s);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!s.empty() && s.back() == ',') cells.emplace_back();
    return cells;
  };
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty embedding file");
  const auto header = split(line);
  if (header.size() < 4 || header[0] != "step" || header[1] != "episode" || header[2] != "ep_step") {
    throw FormatError(path.string() + ": bad embedding header");
  }
  const bool has_pca = header.size() >= 6 && header[header.size() - 2] == "p0" && header.back() == "p1";
  const Index d = Index(header.size()) - 3 - (has_pca ? 2 : 0);
  for (Index k = 0; k < d; ++k) {
    if (header[std::size_t(3 + k)] != "z" + std::to_string(k)) throw FormatError(path.string() + ": bad embedding header");
  }
  EmbeddingDump dump;
  std::vector<float> z;
  std::vector<double> pca;
  std::size_t number = 1;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) {
      throw FormatError(path.string() + ": line " + std::to_string(number) + ": expected " +
                        std::to_string(header.size()) + " fields");
    }
    dump.rows.push_back({std::int64_t(parse_double(cells[0], path, number)),
                         std::int64_t(parse_double(cells[1], path, number)),
                         std::int32_t(parse_double(cells[2], path, number))});
    for (Index k = 0; k < d; ++k) z.push_back(float(parse_double(cells[std::size_t(3 + k)], path, number)));
    if (has_pca) {
      pca.push_back(parse_double(cells[cells.size() - 2], path, number));
      pca.push_back(parse_double(cells.back(), path, number));
    }
  }
  const Index t = Index(dump.rows.size());
  dump.z = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(z.data(), t, d);
  if (has_pca) dump.pca = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>>(pca.data(), t, 2);
  return dump;
}

EmbeddingDump export_embeddings(const Checkpoint& ckpt, const std::optional<EnvConfig>& env, int steps,
                                const std::filesystem::path& out_path, bool with_pca, std::uint64_t seed) {
  EmbeddingDump dump = collect_embeddings(ckpt, env, steps, false, seed);
  if (with_pca) dump.pca = pca_project<double>(dump.z.cast<double>()).coords;
  write_embedding_csv(dump, out_path);
  return dump;
}

template <typename S>
PcaResult<S> pca_project(const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& z) {
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
  constexpr int kMaxIter = 1000;
  const S tol = S(1e-9);
  if (z.rows() < 3) throw ContractError("pca_project: need at least 3 rows, got " + std::to_string(z.rows()));
  if (!z.allFinite()) throw DegenerateInputError("pca_project: input has non-finite values");
  const Index d = z.cols();
  if (d < 2) throw DimensionError("pca_project: need at least 2 columns");

  PcaResult<S> r;
  r.mean = z.colwise().mean();
  const Mat centered = z.rowwise() - r.mean;
  Mat cov = (centered.transpose() * centered) / S(z.rows());
  r.directions.resize(d, 2);

  Rng rng(0x9e3779b97f4a7c15ULL);
  for (int k = 0; k < 2; ++k) {
    auto orthogonalize = [&](Vec& v) {
      for (int j = 0; j < k; ++j) v -= r.directions.col(j).dot(v) * r.directions.col(j);
    };
    Vec v(d);
    for (Index i = 0; i < d; ++i) v(i) = S(rng.normal());
    orthogonalize(v);
    v.normalize();
    for (int it = 0; it < kMaxIter; ++it) {
      Vec next = cov * v;
      orthogonalize(next);
      const S norm = next.norm();
      if (!(norm > S(0))) break;  // deflated to zero: any orthogonal direction is exact
      next /= norm;
      const S change = (next - v).norm();
      v = next;
      if (change < tol) break;
    }
    Index big = 0;
    v.cwiseAbs().maxCoeff(&big);
    if (v(big) < S(0)) v = -v;
    r.directions.col(k) = v;
    r.variances(k) = std::max(S(0), S(v.dot(cov * v)));
    cov -= r.variances(k) * v * v.transpose();
  }
  r.coords = centered * r.directions;
  return r;
}

template PcaResult<float> pca_project(const Eigen::MatrixXf&);
template PcaResult<double> pca_project(const Eigen::MatrixXd&);

}  // namespace tempal
