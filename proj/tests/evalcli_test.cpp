#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include "tempal/evalcli/evalcli.hpp"
#include "test_util.hpp"

using namespace tempal;
using tempal::test::ScratchDir;

namespace {

TrainConfig tiny_config(AgentMode mode = AgentMode::kEnsemble) {
  TrainConfig c;
  c.total_steps = 800;
  c.n_envs = 2;
  c.rollout_len = 32;
  c.pretrain_fraction = 0.1;
  c.seed = 11;
  c.align.batch_size = 64;
  c.align.n_pretrain_epochs = 2;
  c.align.store_capacity = 256;
  c.agent.mode = mode;
  c.agent.instant_fc = 32;
  c.agent.history_fc = 32;
  c.validate();
  return c;
}

Checkpoint trained_checkpoint(AgentMode mode = AgentMode::kEnsemble) {
  Trainer tr(tiny_config(mode));
  tr.pretrain();
  tr.train_iteration();
  tr.train_iteration();
  return tr.checkpoint();
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Sign of the projection axes is arbitrary; align b to a column by column.
Eigen::MatrixXd sign_aligned(const Eigen::MatrixXd& a, Eigen::MatrixXd b) {
  for (Index k = 0; k < b.cols(); ++k)
    if (a.col(k).dot(b.col(k)) < 0) b.col(k) = -b.col(k);
  return b;
}

}  // namespace

TEST_CASE("relative improvement") {
  CHECK(std::abs(relative_improvement(1890.9, 237.6, 1840.9) - 3.12) < 0.01);
  CHECK(relative_improvement(35, 0, 0) == 100.0);
  CHECK(relative_improvement(0, 0, 0) == 0.0);
  CHECK(relative_improvement(-3, 0, 0) == -100.0);
  CHECK(relative_improvement(7.5, 2.0, 7.5) == 0.0);

  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const double rr = rng.uniform<double>() * 10 - 5;
    const double ri = rr + 0.1 + rng.uniform<double>() * 10;
    const double rt = rng.uniform<double>() * 30 - 10;
    const double v = relative_improvement(rt, rr, ri);
    CHECK(std::isfinite(v));
    CHECK((v > 0) == (rt > ri));
    CHECK(relative_improvement(ri, rr, ri) == 0.0);
    // Independent form: (rt - ri) / (ri - rr)
    CHECK(v == doctest::Approx(100.0 * (rt - ri) / (ri - rr)).epsilon(1e-9));
  }
}

TEST_CASE("reports round trip through json and compare") {
  const auto r = EvalReport::from_returns("MsPacman", "ensemble", {1880.9, 1900.9});
  CHECK(r.episodes == 2);
  CHECK(r.mean_return == doctest::Approx(1890.9).epsilon(1e-12));
  CHECK(r.std_return == doctest::Approx(10.0).epsilon(1e-9));
  const auto back = report_from_json(report_to_json(r));
  CHECK(back.returns == r.returns);
  CHECK(back.mean_return == r.mean_return);
  CHECK(back.env == "MsPacman");
  CHECK(!back.r_random);
  CHECK_THROWS_AS(EvalReport::from_returns("x", "random", {}), ContractError);
  CHECK_THROWS_AS(report_from_json("{"), FormatError);
  CHECK_THROWS_AS(report_from_json(R"({"env":"a","mode":"b","episodes":1,"mean_return":2,"std_return":0,"returns":[1]})"),
                  FormatError);
  CHECK_THROWS_AS(report_from_json(R"({"env":"a","mode":"b","episodes":3,"mean_return":1,"std_return":0,"returns":[1]})"),
                  FormatError);

  const auto random = EvalReport::from_returns("MsPacman", "random", {237.6});
  const auto instant = EvalReport::from_returns("MsPacman", "instant_only", {1840.9});
  const auto tempal = EvalReport::from_returns("MsPacman", "ensemble", {1890.9});
  const auto c = compare(random, instant, tempal);
  REQUIRE(c.r_random);
  CHECK(*c.r_instant == 1840.9);
  const std::string table = format_comparison(c);
  CHECK(table.find("+3.12%") != std::string::npos);
  const auto c2 = report_from_json(report_to_json(c));
  CHECK(*c2.r_tempal == 1890.9);
  CHECK_THROWS_AS(format_comparison(tempal), ContractError);
  CHECK_THROWS_AS(compare(EvalReport::from_returns("Venture", "random", {0.0}), instant, tempal), ConfigError);

  const auto venture = compare(EvalReport::from_returns("Venture", "random", {0.0}),
                               EvalReport::from_returns("Venture", "instant_only", {0.0}),
                               EvalReport::from_returns("Venture", "ensemble", {35.0}));
  CHECK(format_comparison(venture).find("+100.00%") != std::string::npos);

  ScratchDir dir("report");
  save_report(c, dir.path() / "r.json");
  CHECK(load_report(dir.path() / "r.json").r_instant == c.r_instant);
  CHECK_THROWS_AS(load_report(dir.path() / "missing.json"), IoError);
}

TEST_CASE("random policy on the T-maze scores about one half") {
  EnvConfig env;
  const auto a = evaluate_random(env, 100, 1);
  CHECK(a.episodes == 100);
  CHECK(a.mean_return >= 0.4);
  CHECK(a.mean_return <= 0.6);
  CHECK(a.mode == "random");
  CHECK(evaluate_random(env, 100, 1).returns == a.returns);
  CHECK_THROWS_AS(evaluate_random(env, 0, 1), ContractError);
}

TEST_CASE("evaluate a checkpoint") {
  const Checkpoint ckpt = trained_checkpoint();
  const auto a = evaluate(ckpt, std::nullopt, 20, true, 3);
  const auto b = evaluate(ckpt, std::nullopt, 20, true, 3);
  CHECK(a.returns == b.returns);
  CHECK(a.episodes == 20);
  CHECK(a.mode == "ensemble");
  CHECK(a.env == "tmaze");
  CHECK(evaluate(ckpt, std::nullopt, 20, false, 3).returns == evaluate(ckpt, std::nullopt, 20, false, 3).returns);
  CHECK_THROWS_AS(evaluate(ckpt, std::nullopt, 0), ContractError);

  EnvConfig env = tiny_config().env;
  env.seed = 99;
  CHECK(evaluate(ckpt, env, 5, true, 3).returns == evaluate(ckpt, std::nullopt, 5, true, 3).returns);
  env.corridor_length = 6;
  CHECK_THROWS_AS(evaluate(ckpt, env, 5), ConfigError);
  env = tiny_config().env;
  env.name = "bounce_ball";
  CHECK_THROWS_AS(evaluate(ckpt, env, 5), ConfigError);

  const auto inst = evaluate(trained_checkpoint(AgentMode::kInstantOnly), std::nullopt, 5);
  CHECK(inst.mode == "instant_only");
}

TEST_CASE("embedding export") {
  const Checkpoint ckpt = trained_checkpoint();
  ScratchDir dir("emb");
  const auto path = dir.path() / "emb.csv";
  const auto dump = export_embeddings(ckpt, std::nullopt, 1000, path);
  CHECK(dump.rows.size() == 1000);
  CHECK(!dump.pca);

  const std::string text = slurp(path);
  std::istringstream in(text);
  std::string header;
  std::getline(in, header);
  std::string expected = "step,episode,ep_step";
  for (int k = 0; k < 32; ++k) expected += ",z" + std::to_string(k);
  CHECK(header == expected);
  int data_rows = 0;
  for (std::string l; std::getline(in, l);) data_rows += !l.empty();
  CHECK(data_rows == 1000);

  const auto back = read_embedding_csv(path);
  REQUIRE(back.z.rows() == 1000);
  REQUIRE(back.z.cols() == 32);
  CHECK((back.z - dump.z).cwiseAbs().maxCoeff() < 1e-6f);
  for (Index t = 0; t < back.z.rows(); ++t) CHECK(std::abs(back.z.row(t).norm() - 1.0f) < 1e-5f);

  // Rows are consecutive steps; episode counters restart together.
  for (std::size_t t = 0; t < back.rows.size(); ++t) {
    CHECK(back.rows[t].step == std::int64_t(t));
    if (t == 0) continue;
    const auto& p = back.rows[t - 1];
    const auto& r = back.rows[t];
    if (r.episode == p.episode) {
      CHECK(r.ep_step == p.ep_step + 1);
    } else {
      CHECK(r.episode == p.episode + 1);
      CHECK(r.ep_step == 0);
    }
  }
  CHECK(back.rows.back().episode > 0);

  const auto with_pca = export_embeddings(ckpt, std::nullopt, 50, dir.path() / "pca.csv", true);
  const auto pca_back = read_embedding_csv(dir.path() / "pca.csv");
  REQUIRE(pca_back.pca);
  CHECK((*pca_back.pca - *with_pca.pca).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(slurp(dir.path() / "pca.csv").substr(0, 200).find(",z31,p0,p1\n") != std::string::npos);

  CHECK_THROWS_AS(export_embeddings(ckpt, std::nullopt, 0, path), ContractError);
  CHECK_THROWS_AS(export_embeddings(trained_checkpoint(AgentMode::kInstantOnly), std::nullopt, 5, path), ContractError);
  CHECK_THROWS_AS(export_embeddings(ckpt, std::nullopt, 5, dir.path() / "no" / "such" / "dir.csv"), IoError);
  CHECK_THROWS_AS(read_embedding_csv(dir.path() / "absent.csv"), IoError);
  {
    std::ofstream bad(dir.path() / "bad.csv");
    bad << "step,episode,ep_step,z0,z1\n0,0,0,0.5\n";
  }
  CHECK_THROWS_AS(read_embedding_csv(dir.path() / "bad.csv"), FormatError);
}

TEST_CASE("pca on exact low-rank data") {
  Rng rng(8);
  const Index t = 60, d = 32;
  Eigen::MatrixXd basis(2, d), coef(t, 2);
  for (Index i = 0; i < basis.size(); ++i) basis(i) = rng.normal();
  for (Index i = 0; i < coef.size(); ++i) coef(i) = 3 * rng.normal();
  Eigen::RowVectorXd offset(d);
  for (Index i = 0; i < d; ++i) offset(i) = rng.normal();
  const Eigen::MatrixXd z = (coef * basis).rowwise() + offset;

  const auto p = pca_project<double>(z);
  const Eigen::MatrixXd recon = (p.coords * p.directions.transpose()).rowwise() + p.mean;
  CHECK((recon - z).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((p.directions.transpose() * p.directions - Eigen::Matrix2d::Identity()).cwiseAbs().maxCoeff() < 1e-6);

  Eigen::MatrixXd line(t, d);
  for (Index i = 0; i < t; ++i) line.row(i) = (2.0 * rng.normal()) * basis.row(0) + offset;
  const auto q = pca_project<double>(line);
  CHECK(q.coords.col(1).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((q.directions.transpose() * q.directions - Eigen::Matrix2d::Identity()).cwiseAbs().maxCoeff() < 1e-6);

  CHECK_THROWS_AS(pca_project<double>(Eigen::MatrixXd::Zero(2, 4)), ContractError);
  CHECK_NOTHROW(pca_project<double>(Eigen::MatrixXd::Ones(3, 4)));
}

TEST_CASE("pca variance matches a dense eigensolver") {
  Rng rng(21);
  for (int trial = 0; trial < 3; ++trial) {
    Eigen::MatrixXd z(200, 32);
    for (Index i = 0; i < z.size(); ++i) z(i) = rng.normal();
    for (Index j = 0; j < 32; ++j) z.col(j) *= 1.0 + 0.05 * double(j);

    const auto p = pca_project<double>(z);
    const Eigen::MatrixXd c = z.rowwise() - z.colwise().mean();
    const Eigen::MatrixXd cov = c.transpose() * c / double(z.rows());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    const auto& ev = eig.eigenvalues();  // ascending
    const double top2 = ev(31) + ev(30);
    const double projected = p.coords.squaredNorm() / double(z.rows());
    CHECK(projected == doctest::Approx(top2).epsilon(1e-8));
    CHECK(p.variances(0) == doctest::Approx(ev(31)).epsilon(1e-6));
    CHECK(p.variances(1) == doctest::Approx(ev(30)).epsilon(1e-6));
    CHECK((p.directions.transpose() * p.directions - Eigen::Matrix2d::Identity()).cwiseAbs().maxCoeff() < 1e-6);

    Eigen::MatrixXd g(32, 32);
    for (Index i = 0; i < g.size(); ++i) g(i) = rng.normal();
    const Eigen::MatrixXd rot = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
    const auto r = pca_project<double>(z * rot);
    CHECK((sign_aligned(p.coords, r.coords) - p.coords).cwiseAbs().maxCoeff() < 1e-6);
  }

  Eigen::MatrixXf zf(50, 8);
  for (Index i = 0; i < zf.size(); ++i) zf(i) = float(rng.normal());
  const auto pf = pca_project<float>(zf);
  const auto pd = pca_project<double>(zf.cast<double>());
  CHECK((pf.coords.cast<double>() - sign_aligned(pf.coords.cast<double>(), pd.coords)).cwiseAbs().maxCoeff() < 1e-3);
}
