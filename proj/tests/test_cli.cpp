#include <nlohmann/json.hpp>

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

struct CliRun : ::testing::Test {
    fs::path dir = fs::temp_directory_path() / "cbev_cli_test";

    void SetUp() override {
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    void TearDown() override { fs::remove_all(dir); }

    int run(const std::string& args) {
        const std::string cmd = std::string(CBEV_CLI_PATH) + " " + args + " >" + (dir / "out.txt").string() + " 2>&1";
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    }
    std::string p(const char* name) const { return (dir / name).string(); }
    std::string output() const {
        std::ifstream in(dir / "out.txt");
        return {std::istreambuf_iterator<char>(in), {}};
    }
};

constexpr const char* kTinyGeometry =
    " --worlds 6 --world-size 16 --c-in 2 --search-extent 8 --n-t 8 --n-theta 8 --l-b 5 --pano-rows 4 --pano-cols 16";

TEST_F(CliRun, FullPipeline) {
    ASSERT_EQ(run("synth --out " + p("data") + kTinyGeometry), 0) << output();
    ASSERT_TRUE(fs::exists(dir / "data" / "manifest.json"));
    ASSERT_EQ(run("train --data " + p("data") + " --out " + p("m1") + " --epochs 2 --batch-size 3 --c 4"), 0)
        << output();
    ASSERT_EQ(run("train --data " + p("data") + " --stage two --stage-one " + p("m1") + " --out " + p("m2") +
                  " --epochs 1 --batch-size 3 --c 4"),
              0)
        << output();
    ASSERT_EQ(run("index --data " + p("data") + " --stage-one " + p("m1") + " --out " + p("idx")), 0) << output();
    ASSERT_EQ(run("eval --data " + p("data") + " --stage-one " + p("m1") + " --stage-two " + p("m2") + " --index " +
                  p("idx") + " --results " + p("results.jsonl") + " --metrics " + p("metrics.json") +
                  " --no-prior --backend bruteforce"),
              0)
        << output();
    EXPECT_NE(output().find("clamping"), std::string::npos);
    std::ifstream m(dir / "metrics.json");
    const auto metrics = nlohmann::json::parse(m);
    EXPECT_EQ(metrics.at("prior_enabled"), false);
    EXPECT_TRUE(metrics.contains("median_t_err_m"));
    std::ifstream log(dir / "m1" / "train_log.jsonl");
    std::string line;
    std::size_t epochs = 0;
    while (std::getline(log, line)) {
        EXPECT_TRUE(nlohmann::json::parse(line).contains("in_batch_accuracy"));
        ++epochs;
    }
    EXPECT_EQ(epochs, 2u);
}

TEST_F(CliRun, ExitCodes) {
    EXPECT_EQ(run(""), 1);
    EXPECT_EQ(run("train --data " + p("missing") + " --out " + p("m")), 2);
    ASSERT_EQ(run("synth --out " + p("data") + kTinyGeometry), 0);
    EXPECT_EQ(run("train --data " + p("data") + " --stage two --out " + p("m")), 2);
    EXPECT_NE(output().find("stage-one"), std::string::npos);
    EXPECT_EQ(run("synth --out " + p("bad") + " --n-t 13 --world-size 16 --l-b 5 --search-extent 13"), 2);
    EXPECT_NE(output().find("n_t"), std::string::npos) << output();
}

TEST_F(CliRun, ConfigFileIsOverriddenByFlags) {
    {
        std::ofstream cfg(dir / "cfg.json");
        cfg << R"({"synth": {"n_worlds": 4, "samples_per_world": 3}})";
    }
    ASSERT_EQ(run("--config " + p("cfg.json") + " synth --out " + p("data") + kTinyGeometry), 0) << output();
    std::ifstream in(dir / "data" / "manifest.json");
    const auto manifest = nlohmann::json::parse(in);
    EXPECT_EQ(manifest.at("worlds").size(), 6u);
    EXPECT_EQ(manifest.at("samples").size(), 18u);
}

} // namespace
