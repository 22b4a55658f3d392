#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "ere_cli.hpp"
#include "test_support.hpp"

namespace ere::cli {
namespace {

using ere::testing::random_gaussian;
using ere::testing::random_orthonormal;
using ere::testing::temp_path;

struct Result {
  int code;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "ere");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run(int(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct Files {
  std::string base, finetuned;
};

/// Planted pair on disk: 2-D residuals of rank 3 plus a bias vector.
Files planted_files(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  TensorMap base, ft;
  for (auto [n, m] : {std::pair{40, 24}, std::pair{24, 24}, std::pair{16, 48}}) {
    const Eigen::MatrixXd w = random_gaussian(n, m, rng);
    const Eigen::MatrixXd delta = random_orthonormal(n, 3, rng) * Eigen::Vector3d(2.0, 1.0, 0.5).asDiagonal() *
                                  random_orthonormal(m, 3, rng).transpose();
    const std::string name = "w" + std::to_string(n) + "x" + std::to_string(m);
    base.insert(name, from_matrix(w));
    ft.insert(name, from_matrix(Eigen::MatrixXd(w + delta)));
  }
  base.insert("bias", Tensor(DType::f32, {3}, {1, 2, 3}));
  ft.insert("bias", Tensor(DType::f32, {3}, {1, 2.5, 3}));
  Files f{temp_path("base.tsa").string(), temp_path("ft.tsa").string()};
  archive::write_archive(base, f.base);
  archive::write_archive(ft, f.finetuned);
  return f;
}

TEST(Cli, EncodeDecodeIdenticalPairReturnsBase) {
  const auto f = planted_files(61);
  const auto ere = temp_path("same.ere").string(), out = temp_path("same.tsa").string();
  auto r = invoke({"encode", "--base", f.base, "--finetuned", f.base, "--rank", "4", "--out", ere});
  ASSERT_EQ(r.code, 0) << r.err;
  r = invoke({"decode", "--base", f.base, "--ere", ere, "--out", out});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(archive::read_archive(out), archive::read_archive(f.base));
}

TEST(Cli, StatsTotalMatchesFileSize) {
  const auto f = planted_files(62);
  const auto ere = temp_path("stats.ere").string(), csv = temp_path("stats.csv").string();
  ASSERT_EQ(invoke({"encode", "--base", f.base, "--finetuned", f.finetuned, "--rank", "4", "--out", ere}).code, 0);
  const auto r = invoke({"stats", "--ere", ere, "--csv", csv});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto size = std::filesystem::file_size(ere);
  EXPECT_NE(r.out.find("total bytes: " + std::to_string(size) + "\n"), std::string::npos) << r.out;
  EXPECT_NE(slurp(csv).find("__total__,,,,,,,,,,," + std::to_string(size) + ","), std::string::npos);
}

TEST(Cli, VerifyPlantedInstancePasses) {
  const auto f = planted_files(63);
  const auto ere = temp_path("verify.ere").string(), report = temp_path("verify.csv").string();
  ASSERT_EQ(invoke({"encode", "--base", f.base, "--finetuned", f.finetuned, "--rank", "4", "--bits", "8", "--out", ere}).code, 0);
  const auto r = invoke({"verify", "--base", f.base, "--finetuned", f.finetuned, "--ere", ere, "--tol", "1e-2", "--report", report});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
  EXPECT_EQ(slurp(report).substr(0, 6), "layer,");
}

TEST(Cli, VerifyFailsOnTamperedArchive) {
  const auto f = planted_files(64);
  const auto ere = temp_path("tamper.ere").string();
  ASSERT_EQ(invoke({"encode", "--base", f.base, "--finetuned", f.finetuned, "--rank", "4", "--out", ere}).code, 0);
  auto bytes = slurp(ere);
  bytes.back() ^= 0x10;
  archive::detail::write_file(ere, bytes);
  const auto r = invoke({"verify", "--base", f.base, "--finetuned", f.finetuned, "--ere", ere});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("checksum FAILED"), std::string::npos);
}

TEST(Cli, IdenticalInvocationsIdenticalOutputs) {
  const auto f = planted_files(65);
  const auto a = temp_path("a.ere").string(), b = temp_path("b.ere").string();
  ASSERT_EQ(invoke({"encode", "--base", f.base, "--finetuned", f.finetuned, "--rank", "3", "--threads", "1", "--out", a}).code, 0);
  ASSERT_EQ(invoke({"encode", "--base", f.base, "--finetuned", f.finetuned, "--rank", "3", "--threads", "8", "--out", b}).code, 0);
  EXPECT_EQ(slurp(a), slurp(b));
}

TEST(Cli, AllocateAndSpectraWriteCsv) {
  const auto f = planted_files(66);
  const auto plan = temp_path("plan.csv").string();
  auto r = invoke({"allocate", "--base", f.base, "--finetuned", f.finetuned, "--rank", "3", "--out", plan});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = slurp(plan);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer,n,m,continuous_rank,rank,param_cost,tail_energy_at_rank");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);

  const auto dir = temp_path("spectra");
  r = invoke({"spectra", "--base", f.base, "--finetuned", f.finetuned, "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(std::filesystem::exists(dir / "spectra.csv"));
  const auto er = slurp(dir / "erank.csv");
  EXPECT_EQ(std::count(er.begin(), er.end(), '\n'), 4);
}

TEST(Cli, AlphaSweepOnCheckpoints) {
  analysis::TrainConfig cfg;
  cfg.widths = {10, 16, 16, 4};
  cfg.samples = 64;
  cfg.pretrain_steps = 50;
  cfg.finetune_steps = 30;
  const auto pair = analysis::train_toy_pair(1, cfg);
  const auto base = temp_path("toy_base.tsa").string(), ft = temp_path("toy_ft.tsa").string();
  archive::write_archive(pair.theta, base);
  archive::write_archive(pair.theta_prime, ft);
  const auto out = temp_path("alpha.csv").string();
  const auto r = invoke({"alpha-sweep", "--base", base, "--finetuned", ft, "--rank", "2", "--alphas", "0,1", "--out", out});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(out).substr(0, 22), "alpha,feature_cosine\n0");

  const auto pout = temp_path("perturb.csv").string();
  const auto p = invoke({"perturb", "--base", base, "--finetuned", ft, "--sigmas", "0.1", "--out", pout});
  ASSERT_EQ(p.code, 0) << p.err;
  const auto csv = slurp(pout);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
}

TEST(Cli, UsageErrorsExitTwo) {
  const auto f = planted_files(67);
  const auto ere = temp_path("usage.ere").string();
  EXPECT_EQ(invoke({}).code, 2);
  EXPECT_EQ(invoke({"bogus"}).code, 2);
  EXPECT_EQ(invoke({"encode", "--base", f.base, "--finetuned", f.finetuned, "--rank", "4", "--alpha", "1.5", "--out", ere}).code, 2);
  EXPECT_EQ(invoke({"encode", "--base", f.base, "--finetuned", f.finetuned, "--rank", "4", "--bits", "3", "--out", ere}).code, 2);
  EXPECT_EQ(invoke({"encode", "--base", f.base, "--finetuned", f.finetuned, "--out", ere}).code, 2);
  EXPECT_EQ(invoke({"encode", "--base", "/nonexistent.tsa", "--finetuned", f.finetuned, "--rank", "4", "--out", ere}).code, 2);
  EXPECT_EQ(invoke({"alpha-sweep", "--rank", "2", "--alphas", "0,x", "--out", ere}).code, 2);
  EXPECT_EQ(invoke({"alpha-sweep", "--rank", "2", "--alphas", "0,2", "--out", ere}).code, 2);
}

TEST(Cli, CorruptInputExitsOne) {
  const auto bad = temp_path("bad.tsa").string();
  archive::detail::write_file(bad, "not a tensor archive");
  const auto r = invoke({"encode", "--base", bad, "--finetuned", bad, "--rank", "4", "--out", temp_path("x.ere").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
}

class HelpGolden : public ::testing::TestWithParam<std::string> {};

TEST_P(HelpGolden, MatchesGoldenFile) {
  const std::string sub = GetParam();
  const auto r = sub == "ere" ? invoke({"--help"}) : invoke({sub, "--help"});
  EXPECT_EQ(r.code, 0);
  const auto golden = std::filesystem::path(ERE_GOLDEN_DIR) / (sub + ".txt");
  ASSERT_TRUE(std::filesystem::exists(golden)) << golden;
  EXPECT_EQ(r.out, slurp(golden));
}

TEST_P(HelpGolden, DocumentsEveryFlag) {
  const std::string sub = GetParam();
  if (sub == "ere") return;
  CLI::App app;
  Options o;
  build_app(app, o);
  const auto help = invoke({sub, "--help"}).out;
  for (const auto* opt : app.get_subcommand(sub)->get_options())
    for (const auto& name : opt->get_lnames()) EXPECT_NE(help.find("--" + name), std::string::npos) << name;
}

INSTANTIATE_TEST_SUITE_P(Subcommands, HelpGolden,
                         ::testing::Values("ere", "encode", "decode", "stats", "allocate", "spectra", "verify",
                                           "perturb", "alpha-sweep"),
                         [](const auto& info) {
                           std::string n = info.param;
                           std::replace(n.begin(), n.end(), '-', '_');
                           return n;
                         });

}  // namespace
}  // namespace ere::cli
