#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tempal/trainer/trainer.hpp"

namespace tempal {

/// Outcome of an evaluation run. The comparison slots are filled by compare().
struct EvalReport {
  std::string env;
  std::string mode;  // agent mode, or "random"
  int episodes = 0;
  double mean_return = 0, std_return = 0;
  std::vector<double> returns;
  std::optional<double> r_random, r_instant, r_tempal;

  /// Builds a report from per-episode returns. ContractError when empty.
  static EvalReport from_returns(std::string env, std::string mode, std::vector<double> returns);
};

std::string report_to_json(const EvalReport& report);
/// FormatError on malformed input or violated invariants.
EvalReport report_from_json(const std::string& text);
void save_report(const EvalReport& report, const std::filesystem::path& path);
EvalReport load_report(const std::filesystem::path& path);

/// Runs the checkpoint's policy, sampling actions unless `greedy`. `env` defaults to the checkpoint's
/// environment; any other environment (ignoring its seed) is a ConfigError.
EvalReport evaluate(const Checkpoint& ckpt, const std::optional<EnvConfig>& env = std::nullopt, int episodes = 100,
                    bool greedy = false, std::uint64_t seed = 0);

/// Uniformly random actions; the R_random baseline.
EvalReport evaluate_random(const EnvConfig& env, int episodes = 100, std::uint64_t seed = 0);

/// (r_tempal - r_random) / (r_instant - r_random) - 1, in percent. With
/// r_instant == r_random the result is +100, 0 or -100 by the sign of
/// r_tempal - r_random.
double relative_improvement(double r_tempal, double r_random, double r_instant);

/// The TempAl report with its comparison slots filled. ConfigError if the
/// reports come from different environments.
EvalReport compare(const EvalReport& random, const EvalReport& instant, const EvalReport& tempal);
std::string format_comparison(const EvalReport& compared);

struct EmbeddingRow {
  std::int64_t step = 0;
  std::int64_t episode = 0;
  std::int32_t ep_step = 0;
};

struct EmbeddingDump {
  std::vector<EmbeddingRow> rows;
  Eigen::MatrixXf z;                    // [T×d], unit-norm rows
  std::optional<Eigen::MatrixXd> pca;   // [T×2]
};

/// Runs the checkpoint's policy for `steps` environment steps and stores the
/// embedding of every observation acted on. ContractError without an encoder
/// or with steps < 1.
EmbeddingDump collect_embeddings(const Checkpoint& ckpt, const std::optional<EnvConfig>& env, int steps,
                                 bool greedy = false, std::uint64_t seed = 0);

void write_embedding_csv(const EmbeddingDump& dump, const std::filesystem::path& path);
EmbeddingDump read_embedding_csv(const std::filesystem::path& path);

/// collect_embeddings, optional projection, then write_embedding_csv.
EmbeddingDump export_embeddings(const Checkpoint& ckpt, const std::optional<EnvConfig>& env, int steps,
                                const std::filesystem::path& out_path, bool with_pca = false, std::uint64_t seed = 0);

template <typename S>
struct PcaResult {
  Eigen::Matrix<S, Eigen::Dynamic, 2> coords;      // [T×2]
  Eigen::Matrix<S, Eigen::Dynamic, 2> directions;  // [d×2], orthonormal columns
  Eigen::Matrix<S, 2, 1> variances;                // eigenvalues of the covariance (1/T)
  Eigen::Matrix<S, 1, Eigen::Dynamic> mean;
};

/// Mean-centred projection onto the top two principal directions, by power
/// iteration with deflation. Each direction's largest-magnitude entry is made
/// positive. ContractError when Z has fewer than 3 rows.
template <typename S>
PcaResult<S> pca_project(const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& z);

}  // namespace tempal
