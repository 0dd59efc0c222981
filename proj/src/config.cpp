#include "mcrm/config.hpp"

#include <cstdlib>
#include <fstream>

#include "mcrm/errors.hpp"

using nlohmann::json;

namespace mcrm::cli {

PipelineConfig PipelineConfig::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config: " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config parse error in " + path.string() + ": " + e.what());
    }
    return from_json(j);
}

PipelineConfig PipelineConfig::from_json(const json& j) {
    PipelineConfig c;
    try {
        if (j.contains("paths")) {
            const auto& p = j["paths"];
            if (p.contains("scenes"))
                for (const auto& s : p["scenes"]) {
                    SceneEntry e;
                    e.id = s.value("id", "scene" + std::to_string(c.paths.scenes.size()));
                    e.rgb = s.value("rgb", "");
                    e.nir = s.value("nir", "");
                    e.rgbn = s.value("rgbn", "");
                    c.paths.scenes.push_back(std::move(e));
                }
            c.paths.dataset_root = p.value("dataset_root", c.paths.dataset_root);
            c.paths.sample_dir = p.value("sample_dir", c.paths.sample_dir);
            c.paths.checkpoint_dir = p.value("checkpoint_dir", c.paths.checkpoint_dir);
            c.paths.report_dir = p.value("report_dir", c.paths.report_dir);
        }
        if (j.contains("raster")) {
            c.raster.tile_side = j["raster"].value("tile_side", c.raster.tile_side);
            c.raster.stride = j["raster"].value("stride", c.raster.stride);
        }
        if (j.contains("cloudsim")) {
            const auto& s = j["cloudsim"];
            c.cloudsim.seed = s.value("seed", c.cloudsim.seed);
            c.cloudsim.noise.octaves = s.value("octaves", c.cloudsim.noise.octaves);
            c.cloudsim.noise.base_frequency =
                s.value("base_frequency", c.cloudsim.noise.base_frequency);
            c.cloudsim.noise.persistence = s.value("persistence", c.cloudsim.noise.persistence);
            c.cloudsim.noise.lacunarity = s.value("lacunarity", c.cloudsim.noise.lacunarity);
            c.cloudsim.threshold_low = s.value("threshold_low", c.cloudsim.threshold_low);
            c.cloudsim.threshold_high = s.value("threshold_high", c.cloudsim.threshold_high);
            if (s.contains("cloud_color")) {
                const auto col = s["cloud_color"].get<std::vector<float>>();
                if (col.size() != 3) throw ConfigError("cloud_color needs 3 components");
                c.cloudsim.cloud_color = {col[0], col[1], col[2]};
            }
            if (s.contains("clip_percentiles")) {
                const auto clip = s["clip_percentiles"].get<std::vector<double>>();
                if (clip.size() != 2) throw ConfigError("clip_percentiles needs 2 components");
                c.cloudsim.clip_percentiles = {clip[0], clip[1]};
            }
            c.cloudsim.reference_scene = s.value("reference_scene", c.cloudsim.reference_scene);
            c.cloudsim.group_count = s.value("group_count", c.cloudsim.group_count);
        }
        if (j.contains("embed")) {
            const auto& e = j["embed"];
            c.embed.extractor = e.value("extractor", c.embed.extractor);
            c.embed.cnn_weights = e.value("cnn_weights", c.embed.cnn_weights);
            c.embed.tsne.perplexity = e.value("perplexity", c.embed.tsne.perplexity);
            c.embed.tsne.iterations = e.value("iterations", c.embed.tsne.iterations);
            c.embed.tsne.learning_rate = e.value("learning_rate", c.embed.tsne.learning_rate);
            c.embed.tsne.exaggeration_factor =
                e.value("exaggeration_factor", c.embed.tsne.exaggeration_factor);
            c.embed.tsne.exaggeration_duration =
                e.value("exaggeration_duration", c.embed.tsne.exaggeration_duration);
            c.embed.tsne.momentum_initial =
                e.value("momentum_initial", c.embed.tsne.momentum_initial);
            c.embed.tsne.momentum_final = e.value("momentum_final", c.embed.tsne.momentum_final);
            c.embed.tsne.momentum_switch =
                e.value("momentum_switch", c.embed.tsne.momentum_switch);
            c.embed.seed = e.value("seed", c.embed.seed);
            c.embed.tsne.seed = c.embed.seed;
            c.embed.grid_size = e.value("grid_size", c.embed.grid_size);
            c.embed.sample_count = e.value("sample_count", c.embed.sample_count);
        }
        if (j.contains("train")) {
            const auto& t = j["train"];
            auto& tc = c.train;
            tc.batch_size = t.value("batch_size", tc.batch_size);
            tc.epochs = t.value("epochs", tc.epochs);
            tc.l1_weight = t.value("l1_weight", tc.l1_weight);
            if (t.contains("channel_weights"))
                tc.channel_weights = t["channel_weights"].get<std::vector<double>>();
            tc.learning_rate = t.value("learning_rate", tc.learning_rate);
            tc.beta1 = t.value("beta1", tc.beta1);
            tc.beta2 = t.value("beta2", tc.beta2);
            tc.seed = t.value("seed", tc.seed);
            tc.input_mode = mcgan::input_mode_from_string(t.value("input_mode", "rgbn"));
            tc.discriminator_sees_mask =
                t.value("discriminator_sees_mask", tc.discriminator_sees_mask);
            tc.checkpoint_interval = t.value("checkpoint_interval", tc.checkpoint_interval);
            tc.holdout_count = t.value("holdout_count", tc.holdout_count);
            tc.max_steps = t.value("max_steps", tc.max_steps);
            tc.model_preset = t.value("model_preset", tc.model_preset);
            tc.model_levels = t.value("model_levels", tc.model_levels);
            tc.model_base_width = t.value("model_base_width", tc.model_base_width);
            tc.model_max_width = t.value("model_max_width", tc.model_max_width);
            c.train_on_sample_manifest = t.value("use_sample_manifest", c.train_on_sample_manifest);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config field error: ") + e.what());
    }
    return c;
}

json PipelineConfig::to_json() const {
    json j;
    json scenes = json::array();
    for (const auto& s : paths.scenes) {
        json e;
        e["id"] = s.id;
        if (!s.rgb.empty()) e["rgb"] = s.rgb;
        if (!s.nir.empty()) e["nir"] = s.nir;
        if (!s.rgbn.empty()) e["rgbn"] = s.rgbn;
        scenes.push_back(std::move(e));
    }
    j["paths"] = {{"scenes", std::move(scenes)},
                  {"dataset_root", paths.dataset_root},
                  {"sample_dir", paths.sample_dir},
                  {"checkpoint_dir", paths.checkpoint_dir},
                  {"report_dir", paths.report_dir}};
    j["raster"] = {{"tile_side", raster.tile_side}, {"stride", raster.stride}};
    j["cloudsim"] = {{"seed", cloudsim.seed},
                     {"octaves", cloudsim.noise.octaves},
                     {"base_frequency", cloudsim.noise.base_frequency},
                     {"persistence", cloudsim.noise.persistence},
                     {"lacunarity", cloudsim.noise.lacunarity},
                     {"threshold_low", cloudsim.threshold_low},
                     {"threshold_high", cloudsim.threshold_high},
                     {"clip_percentiles", std::vector<double>(cloudsim.clip_percentiles.begin(),
                                                              cloudsim.clip_percentiles.end())},
                     {"reference_scene", cloudsim.reference_scene},
                     {"group_count", cloudsim.group_count}};
    if (cloudsim.cloud_color)
        j["cloudsim"]["cloud_color"] = std::vector<float>(cloudsim.cloud_color->begin(),
                                                          cloudsim.cloud_color->end());
    j["embed"] = {{"extractor", embed.extractor},
                  {"cnn_weights", embed.cnn_weights},
                  {"perplexity", embed.tsne.perplexity},
                  {"iterations", embed.tsne.iterations},
                  {"learning_rate", embed.tsne.learning_rate},
                  {"exaggeration_factor", embed.tsne.exaggeration_factor},
                  {"exaggeration_duration", embed.tsne.exaggeration_duration},
                  {"momentum_initial", embed.tsne.momentum_initial},
                  {"momentum_final", embed.tsne.momentum_final},
                  {"momentum_switch", embed.tsne.momentum_switch},
                  {"grid_size", embed.grid_size},
                  {"sample_count", embed.sample_count},
                  {"seed", embed.seed}};
    j["train"] = {{"batch_size", train.batch_size},
                  {"epochs", train.epochs},
                  {"l1_weight", train.l1_weight},
                  {"channel_weights", train.channel_weights},
                  {"learning_rate", train.learning_rate},
                  {"beta1", train.beta1},
                  {"beta2", train.beta2},
                  {"seed", train.seed},
                  {"input_mode", mcgan::to_string(train.input_mode)},
                  {"discriminator_sees_mask", train.discriminator_sees_mask},
                  {"checkpoint_interval", train.checkpoint_interval},
                  {"holdout_count", train.holdout_count},
                  {"max_steps", train.max_steps},
                  {"model_preset", train.model_preset},
                  {"model_levels", train.model_levels},
                  {"model_base_width", train.model_base_width},
                  {"model_max_width", train.model_max_width},
                  {"use_sample_manifest", train_on_sample_manifest}};
    return j;
}

void PipelineConfig::validate() const {
    if (raster.tile_side < 1 || raster.stride < 1)
        throw ConfigError("tile side and stride must be positive");
    cloudsim.noise.validate();
    if (!(cloudsim.threshold_low < cloudsim.threshold_high))
        throw ConfigError("cloudsim thresholds must satisfy t0 < t1");
    if (!(cloudsim.clip_percentiles[0] < cloudsim.clip_percentiles[1]))
        throw ConfigError("clip percentiles must satisfy low < high");
    if (embed.extractor != "histogram" && embed.extractor != "cnn")
        throw ConfigError("embed.extractor must be 'histogram' or 'cnn'");
    if (embed.extractor == "cnn" && embed.cnn_weights.empty())
        throw ConfigError("embed.extractor 'cnn' requires embed.cnn_weights");
    if (embed.grid_size < 1) throw ConfigError("embed.grid_size must be >= 1");
    // t-SNE point-count checks happen once the population is known.
    if (!(embed.tsne.perplexity > 1.0)) throw ConfigError("perplexity must be > 1");
    if (embed.tsne.iterations < 1) throw ConfigError("tsne iterations must be >= 1");
    if (embed.tsne.exaggeration_duration >= embed.tsne.iterations)
        throw ConfigError("exaggeration duration must be < iterations");
    train.validate();
}

void PipelineConfig::apply_env() {
    if (const char* root = std::getenv("MCRM_DATA_ROOT"); root && *root)
        paths.dataset_root = root;
}

void write_resolved_config(const PipelineConfig& config, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::ofstream out(out_dir / "config.resolved.json");
    if (!out) throw IoError("cannot write resolved config");
    out << config.to_json().dump(2) << "\n";
}

} // namespace mcrm::cli
