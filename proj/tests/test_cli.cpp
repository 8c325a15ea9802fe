#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "fastinst/data/dataset_io.hpp"
#include "fastinst/train/checkpoint.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunResult {
    int code;
    std::string output;
};

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("fastinst_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

RunResult run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(FASTINST_CLI) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

std::string data_flags(const fs::path& dir) {
    return "--data.dir " + dir.string() + " --data.num_images 4 --data.height 64 --data.width 64";
}

}  // namespace

TEST(Cli, GenDataIsDeterministicPerSeed) {
    auto root = scratch("gen");
    auto snapshot = [&](const std::string& seed) {
        fs::remove_all(root / "d");
        auto r = run_cli("--seed " + seed + " " + data_flags(root / "d") + " gen-data", root / "log.txt");
        EXPECT_EQ(r.code, 0) << r.output;
        std::map<std::string, std::string> files;
        for (const auto& entry : fs::recursive_directory_iterator(root / "d"))
            if (entry.is_regular_file()) files[fs::relative(entry.path(), root / "d").string()] = slurp(entry.path());
        return files;
    };
    const auto first = snapshot("7");
    EXPECT_GE(first.size(), 5u);
    EXPECT_TRUE(first.count("manifest.json"));
    EXPECT_EQ(first, snapshot("7"));
    EXPECT_NE(first.at("manifest.json"), snapshot("8").at("manifest.json"));
    fs::remove_all(root);
}

TEST(Cli, UnknownKeysExitWithConfigError) {
    auto root = scratch("unknown");
    EXPECT_EQ(run_cli("--no.such.key 1 gen-data", root / "log.txt").code, 2);
    std::ofstream(root / "bad.json") << R"({"decoder": {"layers": 3}})";
    auto r = run_cli("--config " + (root / "bad.json").string() + " gen-data", root / "log.txt");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("decoder.layers"), std::string::npos) << r.output;
    EXPECT_EQ(run_cli("--train.augment maybe train", root / "log.txt").code, 2);
    fs::remove_all(root);
}

TEST(Cli, MissingCheckpointExitsThree) {
    auto root = scratch("missing");
    const auto flags = data_flags(root / "data") + " --io.checkpoint " + (root / "nope.ckpt").string() + " --io.out " + (root / "out").string();
    EXPECT_EQ(run_cli(flags + " eval", root / "log.txt").code, 3);
    EXPECT_EQ(run_cli(flags + " predict", root / "log.txt").code, 3);
    EXPECT_EQ(run_cli(data_flags(root / "data") + " --io.out " + (root / "out").string() + " eval", root / "log.txt").code, 3);
    fs::remove_all(root);
}

TEST(Cli, GroundTruthAsDetectionsScoresPerfectly) {
    auto root = scratch("gt_eval");
    const auto flags = data_flags(root / "data") + " --seed 2";
    ASSERT_EQ(run_cli(flags + " gen-data", root / "log.txt").code, 0);
    const auto dataset = fastinst::read_dataset(root / "data");
    json doc = {{"images", json::array()}};
    for (const auto& s : dataset.samples) {
        json list = json::array();
        for (const auto& inst : s.instances) list.push_back({{"class_id", inst.class_id}, {"score", 1.0}, {"rle", fastinst::rle_to_json(inst.mask)}});
        doc["images"].push_back({{"image_id", s.image_id}, {"detections", list}});
    }
    std::ofstream(root / "dets.json") << doc.dump();
    auto r = run_cli(flags + " --io.detections " + (root / "dets.json").string() + " --io.out " + (root / "out").string() + " eval",
                     root / "log.txt");
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_NE(r.output.find("1.000    1.000    1.000"), std::string::npos) << r.output;
    const auto metrics = json::parse(slurp(root / "out" / "eval.json"))["metrics"];
    EXPECT_DOUBLE_EQ(metrics["AP"].get<double>(), 1.0);
    EXPECT_DOUBLE_EQ(metrics["AR100"].get<double>(), 1.0);
    fs::remove_all(root);
}

TEST(Cli, TrainEvalPredictRoundTrip) {
    auto root = scratch("train");
    const auto flags = data_flags(root / "data") + " --seed 1 --pixel.dim 16 --query.na 8 --query.nb 2 --train.batch_size 1" +
                       " --train.total_iters 3 --train.augment false --io.out " + (root / "run").string();
    auto r = run_cli(flags + " train", root / "log.txt");
    ASSERT_EQ(r.code, 0) << r.output;
    for (const char* f : {"metrics.jsonl", "final.ckpt", "config.json", "eval.json"}) EXPECT_TRUE(fs::exists(root / "run" / f)) << f;
    const auto stored = fastinst::load_checkpoint(root / "run" / "final.ckpt").config();
    EXPECT_EQ(stored["pixel"]["dim"], 16);

    // Architecture keys come from the checkpoint, so eval needs no model flags.
    const auto ckpt = (root / "run" / "final.ckpt").string();
    r = run_cli(data_flags(root / "data") + " --seed 1 --io.checkpoint " + ckpt + " --io.out " + (root / "ev").string() + " eval",
                root / "log.txt");
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_NE(r.output.find("AR@100"), std::string::npos);
    r = run_cli(data_flags(root / "data") + " --seed 1 --io.checkpoint " + ckpt + " --io.out " + (root / "pred").string() + " predict",
                root / "log.txt");
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_TRUE(fs::exists(root / "pred" / "detections.json"));
    r = run_cli(data_flags(root / "data") + " --seed 1 --io.checkpoint " + ckpt + " --io.out " + (root / "viz").string() + " viz-queries",
                root / "log.txt");
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(json::parse(slurp(root / "viz" / "queries.json"))["images"][0]["queries"].size(), 8u);
    fs::remove_all(root);
}

TEST(Cli, BenchWritesReport) {
    auto root = scratch("bench");
    auto r = run_cli("--pixel.dim 16 --query.na 8 --bench.height 64 --bench.width 96 --bench.warmup 0 --bench.iters 2 --io.out " +
                         root.string() + " bench",
                     root / "log.txt");
    ASSERT_EQ(r.code, 0) << r.output;
    const auto j = json::parse(slurp(root / "bench.json"));
    EXPECT_EQ(j["input_w"], 96);
    EXPECT_EQ(j["iters"], 2);
    EXPECT_TRUE(j.contains("config_hash"));
    fs::remove_all(root);
}
