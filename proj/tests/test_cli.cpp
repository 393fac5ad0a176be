// SPDX-License-Identifier: Apache-2.0
//
// End-to-end checks of the `tec` executable on tiny configurations.
#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "helpers.hpp"

using namespace tec;
namespace fs = std::filesystem;

namespace {

const std::string kTiny = " --image-size 16 --patch-size 4 --depth 2 --heads 2 --dim 16";
const std::string kTinyData = " --n-images 16 --batch-size 8";

int run(const std::string& args, std::string* out = nullptr) {
    static int counter = 0;
    const fs::path log = fs::temp_directory_path() / ("tec_cli_" + std::to_string(::getpid()) + "_" +
                                                      std::to_string(counter++) + ".log");
    const std::string cmd = std::string(TEC_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    if (out) {
        std::ifstream in(log);
        std::stringstream ss;
        ss << in.rdbuf();
        *out = ss.str();
    }
    fs::remove(log);
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> lines(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> out;
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

class Cli : public ::testing::Test {
protected:
    static inline fs::path dir;
    static inline fs::path base;

    static void SetUpTestSuite() {
        dir = fs::temp_directory_path() / ("tec_cli_" + std::to_string(::getpid()));
        fs::remove_all(dir);
        fs::create_directories(dir);
        base = dir / "base.ckpt";
        ASSERT_EQ(run("pretrain-base --out " + base.string() + kTiny + kTinyData +
                      " --epochs 2 --warmup-epochs 1 --decoder-dim 16 --seed 1"),
                  0);
    }

    static void TearDownTestSuite() { fs::remove_all(dir); }

    static std::string tec_args(const fs::path& out) {
        return " --base " + base.string() + " --out " + out.string() + kTinyData +
               " --max-steps 2 --decoder-dim 8 --decoder-heads 2 --group-size 1 --seed 4";
    }
};

} // namespace

TEST_F(Cli, HelpExitsZero) {
    std::string out;
    EXPECT_EQ(run("--help", &out), 0);
    EXPECT_NE(out.find("pretrain-base"), std::string::npos);
    EXPECT_EQ(run("pretrain --help"), 0);
}

TEST_F(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(run(""), 2);
    EXPECT_EQ(run("pretrain-base --out x.ckpt --no-such-flag"), 2);
    EXPECT_EQ(run("pretrain-base --epochs 3"), 2); // missing --out
    EXPECT_EQ(run("frobnicate"), 2);
    EXPECT_EQ(run("pretrain-base --out " + (dir / "w.ckpt").string() + " --warmup-epochs 5 --epochs 5"), 2);
}

TEST_F(Cli, GradcheckPassesAndReports) {
    std::string out;
    EXPECT_EQ(run("gradcheck --seed 2", &out), 0);
    EXPECT_NE(out.find("max_rel_error"), std::string::npos);
}

TEST_F(Cli, PretrainBaseWritesArtifactsDeterministically) {
    ASSERT_TRUE(fs::exists(base));
    ASSERT_TRUE(fs::exists(dir / "base.metrics.csv"));
    ASSERT_TRUE(fs::exists(dir / "base.manifest.json"));
    auto csv = lines(dir / "base.metrics.csv");
    EXPECT_EQ(csv.front(), "step,loss,lr");
    EXPECT_EQ(csv.size(), 1u + 4u); // 2 epochs x 2 batches
    auto manifest = nlohmann::json::parse(slurp(dir / "base.manifest.json"));
    EXPECT_EQ(manifest.at("status"), "ok");
    EXPECT_EQ(manifest.at("command"), "pretrain-base");
    EXPECT_EQ(manifest.at("run_id").get<std::string>().size(), 16u);
    EXPECT_FALSE(manifest.at("finished_at").is_null());

    const fs::path again = dir / "again.ckpt";
    ASSERT_EQ(run("pretrain-base --out " + again.string() + kTiny + kTinyData +
                  " --epochs 2 --warmup-epochs 1 --decoder-dim 16 --seed 1"),
              0);
    EXPECT_EQ(slurp(again), slurp(base));
    auto m2 = nlohmann::json::parse(slurp(dir / "again.manifest.json"));
    EXPECT_EQ(m2.at("run_id"), manifest.at("run_id"));
}

TEST_F(Cli, PretrainWritesEncoderAndState) {
    const fs::path out = dir / "run_full";
    ASSERT_EQ(run("pretrain" + tec_args(out)), 0);
    EXPECT_TRUE(fs::exists(out / "encoder.ckpt"));
    EXPECT_TRUE(fs::exists(out / "state.ckpt"));
    EXPECT_TRUE(fs::exists(out / "manifest.json"));
    auto csv = lines(out / "metrics.csv");
    EXPECT_EQ(csv.front(), "step,l_fea,l_att,total,lr");
    EXPECT_EQ(csv.size(), 3u);

    auto manifest = nlohmann::json::parse(slurp(out / "manifest.json"));
    const auto& targets = manifest.at("config").at("tec").at("targets");
    EXPECT_DOUBLE_EQ(targets.at("tau").get<double>(), 1.8);
    EXPECT_EQ(targets.at("k"), 15); // min(15, L - 1) with L = 16

    // export reproduces the stripped encoder byte for byte.
    const fs::path exported = dir / "exported.ckpt";
    ASSERT_EQ(run("export --state " + (out / "state.ckpt").string() + " --out " + exported.string()), 0);
    EXPECT_EQ(slurp(exported), slurp(out / "encoder.ckpt"));

    std::string diag;
    ASSERT_EQ(run("diag adapters --run " + out.string() + " --n 8 --n-images 8", &diag), 0);
    std::istringstream is(diag);
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "group,proportion");
    double total = 0.0;
    std::size_t rows = 0;
    while (std::getline(is, line)) {
        total += std::stod(line.substr(line.find(',') + 1));
        ++rows;
    }
    EXPECT_EQ(rows, 2u); // depth 2, one block per group
    EXPECT_NEAR(total, 1.0, 1e-6);
}

TEST_F(Cli, StripOmitsAdapterArrays) {
    const fs::path out = dir / "run_strip";
    ASSERT_EQ(run("pretrain --strip" + tec_args(out)), 0);
    EXPECT_FALSE(fs::exists(out / "state.ckpt"));
    Checkpoint ck = Checkpoint::load(out / "encoder.ckpt");
    EXPECT_EQ(ck.kind, "vit_encoder");
    for (const auto& a : ck.arrays) {
        EXPECT_EQ(a.name.find("adapter"), std::string::npos) << a.name;
        EXPECT_EQ(a.name.find("decoder"), std::string::npos) << a.name;
    }
    EXPECT_EQ(run("diag adapters --run " + out.string()), 2);
}

TEST_F(Cli, TooLargeKExitsTwo) { EXPECT_EQ(run("pretrain --k 16" + tec_args(dir / "run_k")), 2); }

TEST_F(Cli, ChainRunsRoundsOnPreviousOutput) {
    const fs::path out = dir / "run_chain";
    ASSERT_EQ(run("pretrain --chain 2 --strip" + tec_args(out)), 0);
    ASSERT_TRUE(fs::exists(out / "round1" / "encoder.ckpt"));
    ASSERT_TRUE(fs::exists(out / "round2" / "encoder.ckpt"));
    EXPECT_NE(slurp(out / "round1" / "encoder.ckpt"), slurp(out / "round2" / "encoder.ckpt"));

    // Round 2 of a chain equals a single run whose base is round 1's output,
    // apart from the round-specific initialisation stream.
    const fs::path chain2 = dir / "run_chain_cmd";
    ASSERT_EQ(run("chain --rounds 2 --strip" + tec_args(chain2)), 0);
    EXPECT_EQ(slurp(chain2 / "round2" / "encoder.ckpt"), slurp(out / "round2" / "encoder.ckpt"));
}

TEST_F(Cli, DiagSimEmitsThreeHistograms) {
    const fs::path csv = dir / "sim.csv";
    ASSERT_EQ(run("diag sim --base " + base.string() + " --n 8 --out " + csv.string()), 0);
    auto rows = lines(csv);
    ASSERT_EQ(rows.size(), 151u);
    EXPECT_EQ(rows.front(), "mode,bin_left,bin_right,count");
    std::size_t counts[3] = {0, 0, 0};
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const std::size_t mode = (i - 1) / 50;
        counts[mode] += std::stoul(rows[i].substr(rows[i].rfind(',') + 1));
    }
    for (auto c : counts) EXPECT_EQ(c, 8u * 120u); // 16 choose 2 pairs per image
}

TEST_F(Cli, MissingCheckpointExitsTwo) {
    EXPECT_EQ(run("diag sim --base " + (dir / "nope.ckpt").string()), 2);
    EXPECT_EQ(run("pretrain --base " + (dir / "nope.ckpt").string() + " --out " + (dir / "x").string()), 2);
    EXPECT_EQ(run("export --state " + (dir / "nope.ckpt").string() + " --out " + (dir / "y.ckpt").string()), 2);
}

TEST_F(Cli, ConfigFileWithFlagPrecedence) {
    const fs::path cfg = dir / "run.cfg";
    {
        std::ofstream f(cfg);
        f << "# tiny run\n"
          << "image_size = 16\npatch-size = 4\ndepth = 2\nheads = 2\ndim = 16\n"
          << "n_images = 16\nbatch_size = 8\nepochs = 2\nwarmup_epochs = 1\ndecoder_dim = 16\n"
          << "seed = 5\n";
    }
    const fs::path a = dir / "cfg_a.ckpt", b = dir / "cfg_b.ckpt";
    ASSERT_EQ(run("pretrain-base --config " + cfg.string() + " --out " + a.string() + " --seed 1"), 0);
    auto manifest = nlohmann::json::parse(slurp(dir / "cfg_a.manifest.json"));
    EXPECT_EQ(manifest.at("config").at("train").at("seed"), 1);
    EXPECT_EQ(manifest.at("config").at("vit").at("depth"), 2);
    EXPECT_EQ(slurp(a), slurp(base)); // same settings as the suite's base

    ASSERT_EQ(run("pretrain-base --config " + cfg.string() + " --out " + b.string()), 0);
    EXPECT_EQ(nlohmann::json::parse(slurp(dir / "cfg_b.manifest.json")).at("config").at("train").at("seed"), 5);

    {
        std::ofstream f(dir / "bad.cfg");
        f << "this line has no equals sign\n";
    }
    EXPECT_EQ(run("pretrain-base --config " + (dir / "bad.cfg").string() + " --out " + b.string()), 2);
}

TEST_F(Cli, GenDataFeedsTraining) {
    const fs::path data = dir / "corpus";
    ASSERT_EQ(run("gen-data --out " + data.string() + " --n-images 16 --image-size 16 --seed 2"), 0);
    EXPECT_TRUE(fs::exists(data / "img000000.teci"));
    EXPECT_TRUE(fs::exists(data / "img000015.teci"));
    const fs::path out = dir / "run_data";
    EXPECT_EQ(run("pretrain --strip --data " + data.string() + tec_args(out)), 0);

    // Images of the wrong size are a configuration error.
    const fs::path wrong = dir / "corpus32";
    ASSERT_EQ(run("gen-data --out " + wrong.string() + " --n-images 4"), 0);
    EXPECT_EQ(run("pretrain --strip --data " + wrong.string() + tec_args(dir / "run_wrong")), 2);
}

TEST_F(Cli, DivergentRunExitsThree) {
    std::string out;
    EXPECT_EQ(run("pretrain --lr 1e300 --strip" + tec_args(dir / "run_nan"), &out), 3) << out;
}
