#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include "test_paths.hpp"

using testing_support::TempDir;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
    const std::string cmd = std::string(DMDD_CLI) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST(Cli, UsageErrors) {
    EXPECT_EQ(run(""), 1);
    EXPECT_EQ(run("bogus"), 1);
    EXPECT_EQ(run("train --no-such-flag"), 1);
    EXPECT_EQ(run("--help"), 0);
}

TEST(Cli, EndToEndExitCodes) {
    TempDir dir("cli");
    const fs::path data = dir / "data", runs = dir / "runs";
    ASSERT_EQ(run("make-toy-dataset --root " + q(data) + " --train 4 --test-normal 2 --test-defect 2"), 0);
    const std::string common = " --data-root " + q(data) + " --category toy_shapes --output-dir " + q(runs) +
                               " --set backbone=toy --set input_size=64 --set batch_size=2";

    EXPECT_EQ(run("train" + common + " --set no_such_key=1"), 1);
    EXPECT_EQ(run("train --data-root " + q(dir / "missing") + " --category toy_shapes --set backbone=toy"), 2);
    EXPECT_FALSE(fs::exists(runs));

    ASSERT_EQ(run("train" + common + " --epochs 1"), 0);
    const fs::path ckpt = runs / "toy_shapes" / "checkpoint_last.dmdd";
    ASSERT_TRUE(fs::exists(ckpt));

    EXPECT_EQ(run("eval --checkpoint " + q(ckpt)), 0);
    EXPECT_TRUE(fs::exists(runs / "toy_shapes" / "eval_test.json"));
    EXPECT_EQ(run("eval --checkpoint " + q(ckpt) + " --split train"), 2);
    EXPECT_EQ(run("eval --checkpoint " + q(ckpt) + " --set lr=0.01"), 1);
    EXPECT_EQ(run("eval --checkpoint " + q(ckpt) + " --set lr=0.01 --force"), 0);

    const fs::path maps = dir / "maps";
    EXPECT_EQ(run("infer --checkpoint " + q(ckpt) + " -o " + q(maps) + " " + q(data / "toy_shapes" / "test")), 0);
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(maps)) n += e.path().extension() == ".map";
    EXPECT_EQ(n, 4u);
    std::ofstream(dir / "broken.png") << "x";
    EXPECT_EQ(run("infer --checkpoint " + q(ckpt) + " -o " + q(dir / "m2") + " " + q(dir / "broken.png")), 2);

    EXPECT_EQ(run("synth -n 0 -o " + q(dir / "synth") + common), 0);
    EXPECT_EQ(run("synth -n 2 -o " + q(dir / "synth") + common), 0);
    EXPECT_TRUE(fs::exists(dir / "synth" / "synth_0001.png"));
}
