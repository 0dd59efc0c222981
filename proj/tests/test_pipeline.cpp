#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "mcrm/cloudsim.hpp"
#include "mcrm/config.hpp"
#include "mcrm/pipeline.hpp"

using namespace mcrm;
using namespace mcrm::cli;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// A small procedurally textured RGB-NIR scene pair on disk.
void write_scene(const fs::path& dir, uint64_t seed, int side = 96) {
    cloudsim::NoiseParams terrain{seed, 4, 3.0, 0.6, 2.0};
    const auto base = cloudsim::fbm_grid(terrain, side, side);
    raster::BandImage rgb(side, side, 3, 8);
    raster::BandImage nir(side, side, 1, 8);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            const double t = base[static_cast<size_t>(y) * side + x];
            rgb.at(0, y, x) = static_cast<float>(std::clamp(120 + 90 * t, 0.0, 255.0));
            rgb.at(1, y, x) = static_cast<float>(std::clamp(110 - 70 * t, 0.0, 255.0));
            rgb.at(2, y, x) = static_cast<float>(std::clamp(90 + 40 * t * t, 0.0, 255.0));
            nir.at(0, y, x) = static_cast<float>(std::clamp(140 + 100 * t, 0.0, 255.0));
        }
    raster::save_image(rgb, dir / "scene_rgb.png");
    raster::save_image(nir, dir / "scene_nir.png");
}

PipelineConfig tiny_config(const fs::path& work) {
    json j;
    j["paths"]["scenes"] = json::array(
        {{{"id", "s0"},
          {"rgb", (work / "scene_rgb.png").string()},
          {"nir", (work / "scene_nir.png").string()}}});
    j["paths"]["dataset_root"] = (work / "dataset").string();
    j["paths"]["sample_dir"] = (work / "sample").string();
    j["paths"]["checkpoint_dir"] = (work / "ckpt").string();
    j["paths"]["report_dir"] = (work / "report").string();
    j["raster"] = {{"tile_side", 32}, {"stride", 32}};
    j["cloudsim"] = {{"seed", 5}, {"group_count", 12}};
    j["embed"] = {{"extractor", "histogram"}, {"iterations", 60},
                  {"exaggeration_duration", 20}, {"grid_size", 3}, {"sample_count", 9},
                  {"seed", 6}};
    j["train"] = {{"batch_size", 4},     {"epochs", 2},
                  {"seed", 7},           {"model_preset", "scaled"},
                  {"model_levels", 4},   {"model_base_width", 8},
                  {"model_max_width", 32}, {"checkpoint_interval", 1},
                  {"learning_rate", 1e-3}};
    return PipelineConfig::from_json(j);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(MCRM_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

} // namespace

TEST_CASE("pipeline config defaults carry the published protocol constants") {
    const PipelineConfig config;
    CHECK(config.raster.tile_side == 256);
    CHECK(config.raster.stride == 256);
    CHECK(config.train.batch_size == 16);
    CHECK(config.train.epochs == 500);
    CHECK(config.train.channel_weights == std::vector<double>(4, 1.0));
    CHECK(config.embed.sample_count == 2000);
    CHECK(config.cloudsim.noise.octaves == 5);
    CHECK(config.cloudsim.threshold_high == doctest::Approx(0.6));
}

TEST_CASE("config json round trip is stable") {
    const fs::path work = fresh_dir("mcrm_cfg_rt");
    write_scene(work, 1);
    const PipelineConfig config = tiny_config(work);
    const PipelineConfig back = PipelineConfig::from_json(config.to_json());
    CHECK(back.to_json().dump() == config.to_json().dump());
}

TEST_CASE("config validation rejects bad sections before any work") {
    const fs::path work = fresh_dir("mcrm_cfg_bad");
    write_scene(work, 1);
    PipelineConfig config = tiny_config(work);
    config.cloudsim.threshold_low = 0.9;
    config.cloudsim.threshold_high = 0.1;
    CHECK_THROWS_AS(config.validate(), ConfigError);

    config = tiny_config(work);
    config.embed.extractor = "resnet";
    CHECK_THROWS_AS(config.validate(), ConfigError);

    config = tiny_config(work);
    config.raster.tile_side = 0;
    CHECK_THROWS_AS(config.validate(), ConfigError);

    config = tiny_config(work);
    config.train.batch_size = 0;
    CHECK_THROWS_AS(config.validate(), ConfigError);
}

TEST_CASE("environment variable overrides the dataset root") {
    const fs::path work = fresh_dir("mcrm_cfg_env");
    write_scene(work, 1);
    PipelineConfig config = tiny_config(work);
    setenv("MCRM_DATA_ROOT", "/tmp/elsewhere", 1);
    config.apply_env();
    unsetenv("MCRM_DATA_ROOT");
    CHECK(config.paths.dataset_root == "/tmp/elsewhere");
}

TEST_CASE("full pipeline end to end at toy scale") {
    const fs::path work = fresh_dir("mcrm_e2e");
    write_scene(work, 2);
    const PipelineConfig config = tiny_config(work);

    cmd_synth(config);
    const auto records = cloudsim::read_manifest(work / "dataset" / "manifest.jsonl");
    CHECK(records.size() == 12);
    CHECK(fs::exists(work / "dataset" / "config.resolved.json"));
    CHECK(fs::exists(work / "dataset" / "g000003" / "cloudy_rgb.png"));

    cmd_sample(config);
    CHECK(fs::exists(work / "sample" / "heatmap.png"));
    CHECK(fs::exists(work / "sample" / "features.bin"));
    const json sample = json::parse(slurp(work / "sample" / "sample_manifest.json"));
    CHECK(sample["selected"].size() == 9);
    CHECK(sample["meta"]["grid_size"] == 3);

    const TrainResult train = cmd_train(config);
    CHECK(fs::exists(train.last_checkpoint));
    CHECK(fs::exists(train.metrics_path));
    CHECK(fs::exists(work / "ckpt" / "ckpt-epoch00001.mcck"));
    size_t metric_lines = 0;
    {
        std::ifstream in(train.metrics_path);
        std::string line;
        while (std::getline(in, line)) ++metric_lines;
    }
    CHECK(metric_lines == 6); // 12 groups / batch 4 = 3 steps x 2 epochs

    EvalArgs eval_args;
    eval_args.checkpoint = train.last_checkpoint.string();
    eval_args.panels = 2;
    cmd_eval(config, eval_args);
    CHECK(fs::exists(work / "report" / "report.jsonl"));
    CHECK(fs::exists(work / "report" / "panel-g000000.png"));
    std::ifstream report(work / "report" / "report.jsonl");
    std::string line;
    size_t lines = 0;
    while (std::getline(report, line)) ++lines;
    CHECK(lines == 13); // 12 groups + summary

    InferArgs infer_args;
    infer_args.checkpoint = train.last_checkpoint.string();
    infer_args.rgb = (work / "dataset" / "g000000" / "cloudy_rgb.png").string();
    infer_args.nir = (work / "dataset" / "g000000" / "nir.png").string();
    infer_args.out_dir = (work / "infer").string();
    cmd_infer(config, infer_args);
    CHECK(fs::exists(work / "infer" / "cloudfree_rgb.png"));
    CHECK(fs::exists(work / "infer" / "cloud_mask.png"));
    CHECK(fs::exists(work / "infer" / "panel.png"));
    const auto out = raster::load_image(work / "infer" / "cloudfree_rgb.png");
    CHECK(out.width == 32);
    CHECK(out.bands == 3);
}

TEST_CASE("training on the sampled subset uses only selected groups") {
    const fs::path work = fresh_dir("mcrm_subset");
    write_scene(work, 3);
    PipelineConfig config = tiny_config(work);
    cmd_synth(config);
    cmd_sample(config);
    config.train_on_sample_manifest = true;
    config.train.epochs = 1;
    const TrainResult result = cmd_train(config);
    std::ifstream in(result.metrics_path);
    std::string line;
    size_t steps = 0;
    while (std::getline(in, line)) ++steps;
    CHECK(steps == 3); // 9 sampled groups / batch 4, partial batch kept
}

TEST_CASE("resumed training replays the uninterrupted metrics") {
    const fs::path work = fresh_dir("mcrm_resume");
    write_scene(work, 4);

    PipelineConfig full = tiny_config(work);
    cmd_synth(full);
    full.paths.checkpoint_dir = (work / "ckpt_full").string();
    cmd_train(full);

    PipelineConfig half = tiny_config(work);
    half.paths.checkpoint_dir = (work / "ckpt_half").string();
    half.train.epochs = 1;
    const TrainResult first = cmd_train(half);
    PipelineConfig resumed = tiny_config(work);
    resumed.paths.checkpoint_dir = (work / "ckpt_half").string();
    resumed.train.epochs = 2;
    cmd_train(resumed, first.last_checkpoint.string());

    auto read_metrics = [](const fs::path& p) {
        std::vector<json> out;
        std::ifstream in(p);
        std::string line;
        while (std::getline(in, line)) out.push_back(json::parse(line));
        return out;
    };
    const auto a = read_metrics(work / "ckpt_full" / "metrics.jsonl");
    const auto b = read_metrics(work / "ckpt_half" / "metrics.jsonl");
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i]["g_total"] == b[i]["g_total"]);
        CHECK(a[i]["d_loss"] == b[i]["d_loss"]);
    }
}

TEST_CASE("synth is deterministic through the cli binary") {
    const fs::path work = fresh_dir("mcrm_cli_det");
    write_scene(work, 5);
    const PipelineConfig config = tiny_config(work);
    const fs::path config_path = work / "config.json";
    std::ofstream(config_path) << config.to_json().dump(2);

    CHECK(run_cli("synth --config " + config_path.string() + " --out " +
                  (work / "ds_a").string()) == 0);
    CHECK(run_cli("synth --config " + config_path.string() + " --out " +
                  (work / "ds_b").string()) == 0);
    CHECK(slurp(work / "ds_a" / "manifest.jsonl") == slurp(work / "ds_b" / "manifest.jsonl"));
}

TEST_CASE("cli exit codes distinguish error classes") {
    const fs::path work = fresh_dir("mcrm_cli_err");
    write_scene(work, 6);
    const PipelineConfig config = tiny_config(work);
    const fs::path config_path = work / "config.json";
    std::ofstream(config_path) << config.to_json().dump(2);

    // Invalid thresholds: config validation fails before any output exists.
    CHECK(run_cli("synth --config " + config_path.string() +
                  " --set cloudsim.threshold_low=0.9 --set cloudsim.threshold_high=0.1") == 2);
    CHECK_FALSE(fs::exists(work / "dataset"));

    // Missing manifest surfaces as an I/O error.
    CHECK(run_cli("sample --config " + config_path.string()) == 3);

    // Unknown subcommand is a usage error.
    CHECK(run_cli("transmogrify --config " + config_path.string()) == 2);

    // Missing config file.
    CHECK(run_cli("synth --config /nonexistent/config.json") == 3);
}

TEST_CASE("cli --set overrides reach the resolved config echo") {
    const fs::path work = fresh_dir("mcrm_cli_set");
    write_scene(work, 7);
    const PipelineConfig config = tiny_config(work);
    const fs::path config_path = work / "config.json";
    std::ofstream(config_path) << config.to_json().dump(2);

    CHECK(run_cli("synth --config " + config_path.string() +
                  " --set cloudsim.group_count=4 --seed 99") == 0);
    const json echoed = json::parse(slurp(work / "dataset" / "config.resolved.json"));
    CHECK(echoed["cloudsim"]["group_count"] == 4);
    CHECK(echoed["cloudsim"]["seed"] == 99);
    CHECK(echoed["train"]["seed"] == 99);
    const auto records = cloudsim::read_manifest(work / "dataset" / "manifest.jsonl");
    CHECK(records.size() == 4);
}

TEST_CASE("synth handles 16-bit scenes with depth-matched cloud color") {
    const fs::path work = fresh_dir("mcrm_16bit");
    raster::BandImage rgb(64, 64, 3, 16), nir(64, 64, 1, 16);
    std::mt19937_64 rng(21);
    for (auto& v : rgb.data) v = static_cast<float>(rng() % 40000);
    for (auto& v : nir.data) v = static_cast<float>(rng() % 40000);
    raster::save_image(rgb, work / "scene_rgb.png");
    raster::save_image(nir, work / "scene_nir.png");

    PipelineConfig config = tiny_config(work);
    config.cloudsim.group_count = 2;
    cmd_synth(config);
    const auto records = cloudsim::read_manifest(work / "dataset" / "manifest.jsonl");
    REQUIRE(records.size() == 2);
    const auto group = cloudsim::load_group(work / "dataset", records[0]);
    CHECK(group.cloudy_rgb.image.value_depth == 16);
    CHECK(group.mask.value_depth == 16);
    // Opaque-cloud pixels saturate at the 16-bit white point.
    float peak = 0.0f;
    for (float v : group.cloudy_rgb.image.data) peak = std::max(peak, v);
    CHECK(peak > 255.0f);
}

TEST_CASE("make_batch lays out the rgbn condition and rgb+mask target") {
    const fs::path work = fresh_dir("mcrm_batch");
    write_scene(work, 8);
    const PipelineConfig config = tiny_config(work);
    cmd_synth(config);
    const auto records = cloudsim::read_manifest(work / "dataset" / "manifest.jsonl");
    std::vector<cloudsim::TileGroup> groups;
    for (int i = 0; i < 2; ++i)
        groups.push_back(cloudsim::load_group(work / "dataset", records[i]));

    const mcgan::Batch batch = make_batch(groups, mcgan::InputMode::RGBN, 4);
    CHECK(batch.x.n == 2);
    CHECK(batch.x.c == 4);
    CHECK(batch.y.c == 4);
    CHECK(batch.x.h == 32);
    for (float v : batch.x.data) {
        CHECK(v >= -1.0f);
        CHECK(v <= 1.0f);
    }
    // Condition channel 0 is the normalized cloudy red plane.
    CHECK(batch.x.at(0, 0, 3, 5) ==
          doctest::Approx(2.0f * groups[0].cloudy_rgb.image.at(0, 3, 5) / 255.0f - 1.0f));
    // Target channel 3 is the normalized alpha mask.
    CHECK(batch.y.at(1, 3, 2, 2) ==
          doctest::Approx(2.0f * groups[1].mask.at(0, 2, 2) / 255.0f - 1.0f));

    const mcgan::Batch nir_batch = make_batch(groups, mcgan::InputMode::NIR, 3);
    CHECK(nir_batch.x.c == 1);
    CHECK(nir_batch.y.c == 3);
}

TEST_CASE("predict_group validates bands against the checkpoint mode") {
    const fs::path work = fresh_dir("mcrm_predict");
    write_scene(work, 9);
    PipelineConfig config = tiny_config(work);
    config.train.epochs = 0; // init-only checkpoint is enough for shape checks
    cmd_synth(config);
    const TrainResult result = cmd_train(config);
    mcgan::Trainer trainer(mcgan::load_checkpoint(result.last_checkpoint));

    const auto records = cloudsim::read_manifest(work / "dataset" / "manifest.jsonl");
    const auto group = cloudsim::load_group(work / "dataset", records[0]);
    const Prediction pred = predict_group(trainer, group.cloudy_rgb.image, &group.nir.image);
    CHECK(pred.rgb.width == 32);
    CHECK(pred.rgb.bands == 3);
    CHECK(pred.mask.bands == 1);
    for (float v : pred.rgb.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 255.0f);
    }
    for (float v : pred.mask.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 255.0f);
    }

    CHECK_THROWS_AS(predict_group(trainer, group.cloudy_rgb.image, nullptr), DataError);
    CHECK_THROWS_AS(predict_group(trainer, group.nir.image, &group.nir.image), DataError);
}
