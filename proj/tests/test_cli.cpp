// Runs the matlift binary end to end on the smoke config.

#include "support.hpp"

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace matlift {
namespace {

namespace fs = std::filesystem;

struct RunResult {
    int code = -1;
    std::string err;
};

RunResult run(const std::string &args, const fs::path &log) {
    const std::string cmd = std::string("MATLIFT_LOG=warn '") + MATLIFT_BINARY + "' " + args + " > /dev/null 2> '" + log.string() + "'";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    r.err = ss.str();
    return r;
}

std::string read_text(const fs::path &p) {
    const auto bytes = detail::read_bytes(p);
    return {bytes.begin(), bytes.end()};
}

nlohmann::json read_json(const fs::path &p) { return nlohmann::json::parse(read_text(p)); }

const std::string kSmoke = std::string(MATLIFT_CONFIG_DIR) + "/smoke.json";

class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        tmp_ = new test::TempDir("cli");
        scene_ = tmp_->path / "scene";
        const auto log = tmp_->path / "setup.log";
        auto r = run("synth --out '" + scene_.string() + "' --config '" + kSmoke + "' --seed 1", log);
        ASSERT_EQ(r.code, 0) << r.err;
        r = run("lift '" + scene_.string() + "'", log);
        ASSERT_EQ(r.code, 0) << r.err;
    }
    static void TearDownTestSuite() {
        delete tmp_;
        tmp_ = nullptr;
    }

    /// Fresh copy of the lifted scene, so tests that write into it stay independent.
    static fs::path copy_scene(const std::string &name) {
        const fs::path dst = tmp_->path / name;
        fs::remove_all(dst);
        fs::copy(scene_, dst, fs::copy_options::recursive);
        return dst;
    }
    static fs::path log(const std::string &name) { return tmp_->path / (name + ".log"); }

    static inline test::TempDir *tmp_ = nullptr;
    static inline fs::path scene_;
};

TEST_F(Cli, SynthIsDeterministic) {
    const fs::path other = tmp_->path / "again";
    const auto r = run("synth --out '" + other.string() + "' --config '" + kSmoke + "' --seed 1", log("again"));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto a = read_json(scene_ / "manifests" / "synth.json"), b = read_json(other / "manifests" / "synth.json");
    EXPECT_EQ(a["outputs"], b["outputs"]);
    EXPECT_GT(a["outputs"].size(), 10u);
    EXPECT_EQ(a["seed"], 1);
    EXPECT_EQ(read_text(scene_ / "gaussians.bin"), read_text(other / "gaussians.bin"));
}

TEST_F(Cli, ManifestsRecordInputsAndOutputs) {
    const auto lift = read_json(scene_ / "manifests" / "lift.json");
    EXPECT_EQ(lift["format"], "matlift-run");
    EXPECT_TRUE(lift["inputs"].contains("gaussians.bin"));
    EXPECT_TRUE(lift["outputs"].contains("lifted.bin"));
    EXPECT_EQ(lift["outputs"]["lifted.bin"].get<std::string>().size(), 64u);
    EXPECT_TRUE(lift["timings_seconds"].contains("lift"));
    const auto summary = read_json(scene_ / "lift.json");
    EXPECT_EQ(summary["kept"].get<std::size_t>() + summary["culled"].get<std::size_t>(),
              summary["input_gaussians"].get<std::size_t>());
}

TEST_F(Cli, BadConfigFieldExitsWithTwo) {
    const fs::path cfg = tmp_->path / "bad.json";
    std::ofstream(cfg) << R"({"refine": {"iterationz": 3}})";
    const auto r = run("synth --out '" + (tmp_->path / "bad").string() + "' --config '" + cfg.string() + "'", log("bad"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("refine.iterationz"), std::string::npos) << r.err;

    std::ofstream(cfg) << "{ \"refine\": ";
    const auto p = run("synth --out '" + (tmp_->path / "bad").string() + "' --config '" + cfg.string() + "'", log("bad2"));
    EXPECT_EQ(p.code, 2);
    EXPECT_EQ(run("frobnicate", log("bad3")).code, 2);
}

TEST_F(Cli, LiftListsMissingMaps) {
    const auto dir = copy_scene("missing_maps");
    fs::remove(dir / "maps" / "view_0001_metallic.png");
    fs::remove(dir / "maps" / "view_0002_basecolor.png");
    const auto r = run("lift '" + dir.string() + "'", log("missing_maps"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("view_0001_metallic.png"), std::string::npos) << r.err;
    EXPECT_NE(r.err.find("view_0002_basecolor.png"), std::string::npos) << r.err;
}

TEST_F(Cli, RefineResumeMatchesStraightRun) {
    const auto straight = copy_scene("straight"), split = copy_scene("split");
    auto r = run("refine '" + straight.string() + "'", log("straight"));
    ASSERT_EQ(r.code, 0) << r.err;
    r = run("refine '" + split.string() + "' --stop-after 7", log("split1"));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_FALSE(fs::exists(split / "refine" / "full" / "merged.bin"));
    r = run("refine '" + split.string() + "' --resume", log("split2"));
    ASSERT_EQ(r.code, 0) << r.err;
    for (const char *f : {"merged.bin", "environment.pfm", "checkpoint.bin", "loss.csv"})
        EXPECT_EQ(read_text(straight / "refine" / "full" / f), read_text(split / "refine" / "full" / f)) << f;
    EXPECT_TRUE(fs::exists(split / "manifests" / "refine_full.json"));
}

TEST_F(Cli, TamperedUpstreamFileIsRejected) {
    const auto dir = copy_scene("tampered");
    auto bytes = detail::read_bytes(dir / "lifted.bin");
    bytes.back() ^= 1;
    std::ofstream(dir / "lifted.bin", std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    const auto r = run("refine '" + dir.string() + "' --iterations 2", log("tampered"));
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("lifted.bin"), std::string::npos) << r.err;
}

TEST_F(Cli, RelightReferenceMatchesLibraryRender) {
    const fs::path out = tmp_->path / "relit";
    const fs::path env = scene_ / "heldout" / "env_sunset.pfm";
    const auto r = run("relight '" + scene_.string() + "' --env '" + env.string() + "' --materials reference --out '" + out.string() + "'",
                       log("relight"));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto held = load_held_out(scene_ / "heldout");
    const auto config = load_config(scene_ / "config.json");
    for (std::size_t v = 0; v < held.views.size(); ++v) {
        const Image expected = render_pbr(held.views[v], held.ground_truth, reference_materials(held.ground_truth),
                                          EnvironmentMap::from_image(read_pfm(env)), config.refine.composite);
        const Image got = read_pfm(out / (detail::view_stem(v) + ".pfm"));
        const double p = psnr(got, expected);
        EXPECT_TRUE(is_infinite_psnr(p) || p > 40.0) << p;
        EXPECT_TRUE(fs::exists(out / (detail::view_stem(v) + ".png")));
    }
}

TEST_F(Cli, RelightNeedsAnEnvironment) {
    auto r = run("relight '" + scene_.string() + "' --env '" + (tmp_->path / "nope.pfm").string() + "' --materials reference",
                 log("noenv"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("nope.pfm"), std::string::npos) << r.err;
    r = run("relight '" + scene_.string() + "' --materials reference", log("noenv2"));
    EXPECT_EQ(r.code, 2);
}

TEST_F(Cli, EvalWritesMetricTables) {
    const auto dir = copy_scene("eval");
    ASSERT_EQ(run("refine '" + dir.string() + "' --variant proj_average", log("eval_refine")).code, 0);
    const auto r = run("eval '" + dir.string() + "' --variant proj_average", log("eval"));
    ASSERT_EQ(r.code, 0) << r.err;
    const std::string csv = read_text(dir / "eval" / "proj_average" / "metrics.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "task,psnr,ssim,count,excluded");
    for (const char *task : kTaskRows) EXPECT_NE(csv.find(std::string("\n") + task + ","), std::string::npos) << task;
    const std::string entries = read_text(dir / "eval" / "proj_average" / "entries.csv");
    EXPECT_EQ(entries.substr(0, entries.find('\n')), "task,env,view,psnr,ssim");
    EXPECT_NE(entries.find("Relighting,sunset,0,"), std::string::npos);

    const auto missing = run("eval '" + dir.string() + "' --variant full", log("eval_missing"));
    EXPECT_EQ(missing.code, 2);
    EXPECT_NE(missing.err.find("merged.bin"), std::string::npos);
}

TEST_F(Cli, AblateReportsAllVariants) {
    const auto dir = copy_scene("ablate");
    const auto r = run("ablate '" + dir.string() + "' --iterations 5", log("ablate"));
    ASSERT_EQ(r.code, 0) << r.err;
    const std::string csv = read_text(dir / "ablation" / "table.csv");
    for (auto v : kVariants) {
        EXPECT_NE(csv.find(std::string("\n") + variant_name(v) + ",Relighting,"), std::string::npos) << variant_name(v);
        EXPECT_TRUE(fs::exists(dir / "ablation" / (std::string("loss_") + variant_name(v) + ".csv")));
    }
    EXPECT_TRUE(fs::exists(dir / "manifests" / "ablate.json"));
}

TEST_F(Cli, ManifestReplaysConfig) {
    const fs::path other = tmp_->path / "replay";
    const auto r = run("synth --out '" + other.string() + "' --config '" + (scene_ / "manifests" / "synth.json").string() + "'",
                       log("replay"));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(read_text(scene_ / "gaussians.bin"), read_text(other / "gaussians.bin"));
}

} // namespace
} // namespace matlift
