#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "basinproj/cli.hpp"
#include "testing.hpp"

using namespace basinproj;
namespace fs = std::filesystem;

namespace {

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("basinproj_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  int run(const std::string& cmd, std::vector<std::string> args) {
    out_.str("");
    err_.str("");
    std::vector<const char*> argv{"basinproj", cmd.c_str()};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data(), out_, err_);
  }

  static std::string slurp(const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  }

  static std::vector<std::string> tiny_sets() {
    std::vector<std::string> out;
    for (const char* kv : {"n_transform_iters=2", "m_inner_grad=3", "p_latent_iters=2", "q_inner_grad=3",
                           "final_grad_steps=4", "adam_steps=5", "cma_iters=3", "cma_adam_cma_iters=2",
                           "cma_adam_grad_steps=4", "population=4", "stats_samples=100"}) {
      out.push_back("--set");
      out.push_back(kv);
    }
    return out;
  }

  fs::path dir_;
  std::ostringstream out_, err_;
};

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(ExperimentConfig, DefaultsAndProvenance) {
  const ExperimentConfig cfg;
  EXPECT_EQ(cfg.real("lr_z"), 0.05);
  EXPECT_EQ(cfg.integer("population"), 18);
  EXPECT_EQ(cfg.entry("lr_z").provenance, "paper");
  EXPECT_EQ(cfg.entry("success_threshold").provenance, "artifact");
  const auto echo = cfg.echo();
  EXPECT_NE(echo.find("lr_z = 0.05  # default, paper"), std::string::npos);
  EXPECT_NE(echo.find("seed = 0"), std::string::npos);
  const auto p = cfg.projection();
  EXPECT_EQ(p.p_latent_iters, 30);
  EXPECT_EQ(p.final_grad_steps, 300);
  EXPECT_FALSE(p.class_index.has_value());
}

TEST(ExperimentConfig, ParseOverridesAndComments) {
  const auto cfg = ExperimentConfig::parse("# comment\nseed = 42\n\n  population=6   # inline\nvariants = adam, basincma+transform\n");
  EXPECT_EQ(cfg.integer("seed"), 42);
  EXPECT_EQ(cfg.integer("population"), 6);
  const auto v = cfg.variants();
  ASSERT_EQ(v.size(), 2u);
  EXPECT_TRUE(v[1].with_transform);
  EXPECT_NE(cfg.echo().find("population = 6  # set, paper, default 18"), std::string::npos);
}

TEST(ExperimentConfig, RejectsUnknownKeysAndBadLines) {
  try {
    ExperimentConfig::parse("seed = 1\nbogus_key = 3\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 9u);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_THROW(ExperimentConfig::parse("no equals sign\n"), ParseError);
  ExperimentConfig cfg;
  EXPECT_THROW(cfg.set_assignment("population"), DomainError);
  cfg.set("population", "many");
  EXPECT_THROW(cfg.integer("population"), DomainError);
  EXPECT_THROW(cfg.projection(), DomainError);
}

TEST_F(CliTest, UnknownCommandIsUsageError) {
  EXPECT_EQ(run("frobnicate", {}), kExitUsage);
  EXPECT_EQ(run("--help", {}), kExitOk);
}

TEST_F(CliTest, ProjectRequiresImage) {
  EXPECT_EQ(run("project", {"--out", path("o")}), kExitUsage);
  EXPECT_NE(err_.str().find("--image"), std::string::npos);
}

TEST_F(CliTest, BogusVariantIsUsageError) {
  ASSERT_EQ(run("gen-target", {"--out", path("t"), "--seed", "3"}), kExitOk);
  EXPECT_EQ(run("project", {"--image", path("t/target.png"), "--variant", "bogus", "--out", path("o")}), kExitUsage);
  EXPECT_EQ(run("project", {"--image", path("t/target.png"), "--set", "nope=1", "--out", path("o")}), kExitUsage);
}

TEST_F(CliTest, MissingImageFileIsUsageError) {
  EXPECT_EQ(run("project", {"--image", path("absent.png"), "--out", path("o")}), kExitUsage);
}

TEST_F(CliTest, ProjectIsDeterministic) {
  ASSERT_EQ(run("gen-target", {"--out", path("t"), "--seed", "5"}), kExitOk);
  std::vector<std::string> args{"--image", path("t/target.png"), "--mask", path("t/mask.png"),
                                "--variant", "basincma+transform", "--seed", "9"};
  for (const auto& s : tiny_sets()) args.push_back(s);
  auto a = args, b = args;
  a.insert(a.end(), {"--out", path("a")});
  b.insert(b.end(), {"--out", path("b")});
  ASSERT_EQ(run("project", a), kExitOk) << err_.str();
  ASSERT_EQ(run("project", b), kExitOk) << err_.str();
  for (const char* f : {"summary.csv", "traces.csv", "config.txt"}) {
    const auto x = slurp(path(std::string("a/") + f));
    EXPECT_FALSE(x.empty()) << f;
    EXPECT_EQ(x, slurp(path(std::string("b/") + f))) << f;
  }
  EXPECT_EQ(slurp(path("a/projection.png")), slurp(path("b/projection.png")));
  EXPECT_TRUE(fs::exists(path("a/result.json")));
  EXPECT_NE(slurp(path("a/config.txt")).find("population = 4"), std::string::npos);
}

TEST_F(CliTest, ProjectWithBlendAndFinetune) {
  ASSERT_EQ(run("gen-target", {"--out", path("t"), "--seed", "6"}), kExitOk);
  std::vector<std::string> args{"--image", path("t/target.png"), "--box", "8,8,16,16", "--variant", "adam",
                                "--class", "2", "--blend", "--finetune", "--out", path("o")};
  for (const auto& s : tiny_sets()) args.push_back(s);
  ASSERT_EQ(run("project", args), kExitOk) << err_.str();
  for (const char* f : {"projection.png", "blended.png", "finetuned.png", "finetune.csv", "result.json"})
    EXPECT_TRUE(fs::exists(path(std::string("o/") + f))) << f;
  const auto j = nlohmann::json::parse(slurp(path("o/result.json")));
  EXPECT_EQ(j.at("class_index"), 2);
  EXPECT_TRUE(j.contains("blend"));
  EXPECT_TRUE(j.contains("finetune"));
}

TEST_F(CliTest, BlendSizeMismatchIsUsageError) {
  write_image(basinproj::testing::random_image(16, 16, 1), path("s.png"));
  write_image(basinproj::testing::random_image(16, 20, 2), path("t.png"));
  write_mask(make_box_mask(16, 16, Box{4, 4, 8, 8}), path("m.png"));
  EXPECT_EQ(run("blend", {"--source", path("s.png"), "--target", path("t.png"), "--mask", path("m.png"), "--out",
                          path("o")}),
            kExitUsage);
}

TEST_F(CliTest, BlendFixpoint) {
  const auto img = basinproj::testing::random_image(16, 16, 3);
  write_image(img, path("s.png"));
  write_mask(make_box_mask(16, 16, Box{4, 4, 8, 8}), path("m.png"));
  ASSERT_EQ(run("blend", {"--source", path("s.png"), "--target", path("s.png"), "--mask", path("m.png"), "--out",
                          path("o")}),
            kExitOk);
  const auto out = read_image(path("o/blended.png"));
  const auto in = read_image(path("s.png"));
  for (std::size_t i = 0; i < in.size(); ++i) EXPECT_EQ(out.data()[i], in.data()[i]);
  EXPECT_NE(out_.str().find("residual"), std::string::npos);
}

TEST_F(CliTest, BenchmarkRowsAndEqualBudget) {
  std::vector<std::string> args{"--out", path("o"), "--set", "trials=2", "--set", "variants=adam,cma,cma_adam,basincma",
                                "--set", "equal_budget=true", "--set", "class=1"};
  for (const auto& s : tiny_sets()) args.push_back(s);
  args.insert(args.end(), {"--set", "final_grad_steps=100"});
  ASSERT_EQ(run("benchmark", args), kExitOk) << err_.str();
  const auto rows = slurp(path("o/benchmark.csv"));
  EXPECT_EQ(line_count(rows), 1u + 2 * 4);
  const auto summary = slurp(path("o/benchmark_summary.csv"));
  EXPECT_EQ(line_count(summary), 1u + 4);
  // Column 6 is forward_calls.
  std::istringstream in(rows);
  std::string line;
  std::getline(in, line);
  std::vector<double> calls;
  while (std::getline(in, line)) {
    std::stringstream ls(line);
    std::string cell;
    for (int k = 0; k < 7; ++k) std::getline(ls, cell, ',');
    calls.push_back(std::stod(cell));
  }
  const auto [lo, hi] = std::minmax_element(calls.begin(), calls.end());
  EXPECT_LE((*hi - *lo) / *hi, 0.01);
  EXPECT_TRUE(fs::exists(path("o/config.txt")));
}

TEST_F(CliTest, RecoverTransformColumns) {
  std::vector<std::string> args{"--out", path("o"), "--set", "trials=1", "--set", "shift_grid=0,4"};
  for (const auto& s : tiny_sets()) args.push_back(s);
  ASSERT_EQ(run("recover-transform", args), kExitOk) << err_.str();
  const auto csv = slurp(path("o/recover_transform.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "trial,applied_sx,applied_sy,applied_tx,applied_ty,applied_gamma,recovered_sx,recovered_sy,recovered_tx,"
            "recovered_ty,recovered_gamma,abs_err_sx,abs_err_sy,abs_err_tx,abs_err_ty,abs_err_gamma,shift_error_px");
  EXPECT_EQ(line_count(csv), 3u);
}

TEST_F(CliTest, StatsAndInitModel) {
  ASSERT_EQ(run("stats", {"--out", path("o"), "--set", "stats_samples=100"}), kExitOk) << err_.str();
  EXPECT_TRUE(fs::exists(path("o/stats.csv")));
  ASSERT_EQ(run("init-model", {"--out", path("m")}), kExitOk);
  const auto g = load_generator(path("m/model.bin"));
  EXPECT_EQ(g.theta, make_generator(7).theta);
  ASSERT_EQ(run("project", {"--image", path("absent.png"), "--set", "model=" + path("m/model.bin"), "--out",
                            path("p")}),
            kExitUsage);
}
