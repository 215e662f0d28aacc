// Runs the command-line tool as a subprocess and checks exit codes and
// written files.

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#ifndef HSTREAM_CLI_PATH
#error "HSTREAM_CLI_PATH must point at the hstream_cli binary"
#endif

namespace {

const std::filesystem::path kRoot = std::filesystem::temp_directory_path() / "hstream_cli_test";

int run_cli(const std::string& args) {
    const std::string cmd = std::string("\"") + HSTREAM_CLI_PATH + "\" " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::string out_arg(const std::string& name) { return "--out " + (kRoot / name).string(); }

class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite() { std::filesystem::remove_all(kRoot); }
    static void TearDownTestSuite() { std::filesystem::remove_all(kRoot); }
};

}  // namespace

TEST_F(Cli, RunWritesOutputs) {
    EXPECT_EQ(run_cli("run --length 300 --seed 3 " + out_arg("run")), 0);
    for (const char* f : {"records.csv", "summary.json", "states.bin", "targets.csv", "spectrum.csv"})
        EXPECT_TRUE(std::filesystem::exists(kRoot / "run" / f)) << f;
    const std::string records = slurp(kRoot / "run" / "records.csv");
    EXPECT_EQ(std::count(records.begin(), records.end(), '\n'), 301);
}

TEST_F(Cli, RunIsDeterministic) {
    ASSERT_EQ(run_cli("run --length 200 --seed 9 " + out_arg("det_a")), 0);
    ASSERT_EQ(run_cli("run --length 200 --seed 9 " + out_arg("det_b")), 0);
    EXPECT_EQ(slurp(kRoot / "det_a" / "records.csv"), slurp(kRoot / "det_b" / "records.csv"));
}

TEST_F(Cli, ProbeAfterRun) {
    ASSERT_EQ(run_cli("run --length 400 " + out_arg("probe")), 0);
    EXPECT_EQ(run_cli("probe --lambda 0.01 " + out_arg("probe")), 0);
    EXPECT_TRUE(std::filesystem::exists(kRoot / "probe" / "probe.json"));
    EXPECT_EQ(run_cli("probe " + out_arg("nothing_here")), 1);
}

TEST_F(Cli, KernelsPass) {
    EXPECT_EQ(run_cli("kernels --length 300 " + out_arg("kernels")), 0);
    EXPECT_TRUE(std::filesystem::exists(kRoot / "kernels" / "kernels.csv"));
    EXPECT_TRUE(std::filesystem::exists(kRoot / "kernels" / "kernels_summary.json"));
}

TEST_F(Cli, VerifyPassesAndOverrideFails) {
    EXPECT_EQ(run_cli("verify " + out_arg("verify")), 0);
    EXPECT_TRUE(std::filesystem::exists(kRoot / "verify" / "manifest.json"));
    EXPECT_EQ(run_cli("verify --debug-gamma-override 1.01 " + out_arg("verify_bad")), 1);
}

TEST_F(Cli, UsageErrors) {
    EXPECT_EQ(run_cli(""), 2);
    EXPECT_EQ(run_cli("run --precision f16"), 2);
    EXPECT_EQ(run_cli("run --w-geo 0 " + out_arg("bad")), 2);
    EXPECT_EQ(run_cli("run --chunk 4 --window 10 " + out_arg("bad")), 2);
    EXPECT_EQ(run_cli("frobnicate"), 2);
    EXPECT_EQ(run_cli("run --length notanumber"), 2);
    EXPECT_EQ(run_cli("--help"), 0);
}

TEST_F(Cli, ConfigFile) {
    std::filesystem::create_directories(kRoot);
    const auto cfg = kRoot / "scenario.ini";
    std::ofstream(cfg) << "length = 150\nseed = 4\nout = \"" << (kRoot / "from_config").string() << "\"\n";
    ASSERT_EQ(run_cli("run --config " + cfg.string()), 0);
    const std::string records = slurp(kRoot / "from_config" / "records.csv");
    EXPECT_EQ(std::count(records.begin(), records.end(), '\n'), 151);
}
