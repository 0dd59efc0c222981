#include "mcrm/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "mcrm/errors.hpp"
#include "mcrm/evalsuite.hpp"
#include "mcrm/features.hpp"
#include "mcrm/gridsample.hpp"
#include "mcrm/tsne.hpp"

using nlohmann::json;

namespace mcrm::cli {

namespace fs = std::filesystem;

ScenePair load_scene(const SceneEntry& entry) {
    ScenePair scene;
    scene.id = entry.id;
    if (!entry.rgbn.empty()) {
        const raster::BandImage rgbn = raster::load_image(entry.rgbn);
        if (rgbn.bands != 4)
            throw DataError("scene " + entry.id + ": rgbn raster must have 4 bands");
        scene.rgb = raster::BandImage(rgbn.width, rgbn.height, 3, rgbn.value_depth);
        scene.nir = raster::BandImage(rgbn.width, rgbn.height, 1, rgbn.value_depth);
        for (int c = 0; c < 3; ++c)
            std::copy(rgbn.band_ptr(c), rgbn.band_ptr(c) + rgbn.pixel_count(),
                      scene.rgb.band_ptr(c));
        std::copy(rgbn.band_ptr(3), rgbn.band_ptr(3) + rgbn.pixel_count(), scene.nir.band_ptr(0));
        return scene;
    }
    if (entry.rgb.empty() || entry.nir.empty())
        throw ConfigError("scene " + entry.id + " needs either rgbn or rgb+nir paths");
    scene.rgb = raster::load_image(entry.rgb);
    scene.nir = raster::load_image(entry.nir);
    if (scene.rgb.bands != 3) throw DataError("scene " + entry.id + ": rgb must have 3 bands");
    if (scene.nir.bands != 1) throw DataError("scene " + entry.id + ": nir must have 1 band");
    if (scene.rgb.width != scene.nir.width || scene.rgb.height != scene.nir.height)
        throw DataError("scene " + entry.id + ": rgb and nir are not co-registered");
    return scene;
}

void cmd_synth(const PipelineConfig& config) {
    config.validate();
    if (config.paths.scenes.empty()) throw ConfigError("no scenes configured");

    std::vector<std::pair<raster::Tile, raster::Tile>> pairs;
    std::optional<std::vector<cloudsim::ChannelStats>> reference;
    int scene_depth = 8;
    for (const auto& entry : config.paths.scenes) {
        ScenePair scene = load_scene(entry);
        scene_depth = scene.rgb.value_depth;
        if (!reference &&
            (config.cloudsim.reference_scene.empty() ||
             config.cloudsim.reference_scene == entry.id))
            reference = cloudsim::winsorized_stats(scene.rgb, config.cloudsim.clip_percentiles[0],
                                                   config.cloudsim.clip_percentiles[1]);
        auto rgb_tiles =
            raster::extract_tiles(scene.rgb, config.raster.tile_side, config.raster.stride,
                                  nullptr, scene.id);
        auto nir_tiles =
            raster::extract_tiles(scene.nir, config.raster.tile_side, config.raster.stride,
                                  nullptr, scene.id);
        for (size_t i = 0; i < rgb_tiles.size(); ++i)
            pairs.emplace_back(std::move(rgb_tiles[i]), std::move(nir_tiles[i]));
    }
    if (!reference) {
        if (!config.cloudsim.reference_scene.empty())
            throw ConfigError("reference scene not found: " + config.cloudsim.reference_scene);
        throw ConfigError("no scene available for reference statistics");
    }

    cloudsim::DatasetConfig dc;
    dc.master_seed = config.cloudsim.seed;
    dc.group_count = config.cloudsim.group_count;
    dc.synth.noise = config.cloudsim.noise;
    dc.synth.threshold_low = config.cloudsim.threshold_low;
    dc.synth.threshold_high = config.cloudsim.threshold_high;
    if (config.cloudsim.cloud_color) {
        dc.synth.cloud_color = *config.cloudsim.cloud_color;
    } else {
        const float white = static_cast<float>((1u << scene_depth) - 1u);
        dc.synth.cloud_color = {white, white, white};
    }
    dc.synth.reference = *reference;
    dc.synth.clip_low_pct = config.cloudsim.clip_percentiles[0];
    dc.synth.clip_high_pct = config.cloudsim.clip_percentiles[1];

    const fs::path root = config.paths.dataset_root;
    write_resolved_config(config, root);
    const auto records = cloudsim::build_dataset(pairs, dc, root);
    std::cout << "synth: wrote " << records.size() << " groups to " << root.string() << "\n";
}

void cmd_sample(const PipelineConfig& config) {
    config.validate();
    const fs::path root = config.paths.dataset_root;
    const auto records = cloudsim::read_manifest(root / "manifest.jsonl");
    const fs::path out_dir = config.paths.sample_dir;
    write_resolved_config(config, out_dir);

    std::unique_ptr<embed::FeatureExtractor> extractor;
    if (config.embed.extractor == "cnn")
        extractor = std::make_unique<embed::CnnFeatureExtractor>(config.embed.cnn_weights);
    else
        extractor = std::make_unique<embed::HistogramExtractor>();

    std::vector<embed::FeatureVector> features;
    features.reserve(records.size());
    for (const auto& rec : records) {
        const raster::BandImage tile = raster::load_image(root / rec.target_rgb_path);
        features.push_back({rec.group_id, extractor->extract(tile)});
    }
    write_feature_cache(out_dir, extractor->id(), extractor->dim(), features);

    if (features.size() < 2) throw DataError("need at least 2 groups to embed");
    std::vector<std::vector<double>> x(features.size());
    for (size_t i = 0; i < features.size(); ++i)
        x[i].assign(features[i].values.begin(), features[i].values.end());

    embed::TsneConfig tsne_config = config.embed.tsne;
    // Cap perplexity for tiny datasets so smoke configs stay valid.
    tsne_config.perplexity =
        std::min(tsne_config.perplexity, static_cast<double>(features.size()) / 3.0 + 1.0);
    if (!(tsne_config.perplexity > 1.0)) tsne_config.perplexity = 1.5;
    const auto affinities = embed::pairwise_affinities(x, tsne_config.perplexity);
    const auto embedding = embed::tsne_embed(affinities.p, affinities.n, tsne_config);

    std::vector<embed::EmbeddingPoint> points(features.size());
    for (size_t i = 0; i < features.size(); ++i)
        points[i] = {features[i].tile_id, embedding.y[i]};
    const auto hist = embed::grid_histogram(points, config.embed.grid_size);
    embed::render_heatmap(hist, out_dir / "heatmap.png");

    const size_t k = std::min(config.embed.sample_count, features.size());
    const auto selected = embed::uniform_sample(hist, k, config.embed.seed);

    json manifest;
    manifest["meta"] = {{"sample_count", k},
                        {"grid_size", config.embed.grid_size},
                        {"seed", config.embed.seed},
                        {"extractor", extractor->id()},
                        {"population", features.size()}};
    json sel = json::array();
    for (const auto& s : selected)
        sel.push_back({{"tile_id", s.tile_id}, {"cell", {s.cell_row, s.cell_col}}});
    manifest["selected"] = std::move(sel);
    std::ofstream out(out_dir / "sample_manifest.json");
    if (!out) throw IoError("cannot write sample manifest");
    out << manifest.dump(2) << "\n";

    json kl = json::array();
    for (double v : embedding.kl_per_iter) kl.push_back(v);
    std::ofstream klout(out_dir / "tsne_kl.json");
    klout << kl.dump() << "\n";
    std::cout << "sample: selected " << k << " of " << features.size() << " groups\n";
}

mcgan::Batch make_batch(const std::vector<cloudsim::TileGroup>& groups,
                        mcgan::InputMode input_mode, int output_channels) {
    if (groups.empty()) throw DataError("empty batch");
    const int h = groups[0].target_rgb.image.height;
    const int w = groups[0].target_rgb.image.width;
    const int in_ch = mcgan::ModelSpec::default_input_channels(input_mode);

    mcgan::Batch batch;
    batch.x = nn::Tensor<float>(static_cast<int>(groups.size()), in_ch, h, w);
    batch.y = nn::Tensor<float>(static_cast<int>(groups.size()), output_channels, h, w);
    for (size_t b = 0; b < groups.size(); ++b) {
        const auto& g = groups[b];
        if (g.target_rgb.image.height != h || g.target_rgb.image.width != w)
            throw DataError("batch tiles disagree on dimensions");
        auto copy_norm = [&](nn::Tensor<float>& dst, int dst_c, const raster::BandImage& src,
                             int src_c) {
            const float maxv = src.max_value();
            const float* plane = src.band_ptr(src_c);
            float* out = dst.image(static_cast<int>(b)) +
                         static_cast<size_t>(dst_c) * h * w;
            for (size_t i = 0; i < src.pixel_count(); ++i)
                out[i] = 2.0f * plane[i] / maxv - 1.0f;
        };
        switch (input_mode) {
        case mcgan::InputMode::RGBN:
            for (int c = 0; c < 3; ++c) copy_norm(batch.x, c, g.cloudy_rgb.image, c);
            copy_norm(batch.x, 3, g.nir.image, 0);
            break;
        case mcgan::InputMode::NIR:
            copy_norm(batch.x, 0, g.nir.image, 0);
            break;
        case mcgan::InputMode::RGB:
            for (int c = 0; c < 3; ++c) copy_norm(batch.x, c, g.cloudy_rgb.image, c);
            break;
        }
        for (int c = 0; c < 3; ++c) copy_norm(batch.y, c, g.target_rgb.image, c);
        if (output_channels == 4) copy_norm(batch.y, 3, g.mask, 0);
    }
    return batch;
}

Prediction predict_group(mcgan::Trainer& trainer, const raster::BandImage& cloudy_rgb,
                         const raster::BandImage* nir) {
    const auto mode = trainer.config().input_mode;
    if ((mode == mcgan::InputMode::RGBN || mode == mcgan::InputMode::NIR) && !nir)
        throw DataError("input mode requires an NIR band");
    if (mode != mcgan::InputMode::NIR && cloudy_rgb.bands != 3)
        throw DataError("cloudy input must be a 3-band RGB raster");
    if (nir && nir->bands != 1) throw DataError("NIR input must be single-band");
    const raster::BandImage& shape_src = mode == mcgan::InputMode::NIR ? *nir : cloudy_rgb;
    const int h = shape_src.height, w = shape_src.width;
    if (nir && (nir->height != h || nir->width != w))
        throw DataError("RGB and NIR inputs are not co-registered");

    const int in_ch = trainer.spec().input_channels;
    nn::Tensor<float> x(1, in_ch, h, w);
    auto copy_norm = [&](int dst_c, const raster::BandImage& src, int src_c) {
        const float maxv = src.max_value();
        const float* plane = src.band_ptr(src_c);
        float* out = x.image(0) + static_cast<size_t>(dst_c) * h * w;
        for (size_t i = 0; i < src.pixel_count(); ++i) out[i] = 2.0f * plane[i] / maxv - 1.0f;
    };
    switch (mode) {
    case mcgan::InputMode::RGBN:
        for (int c = 0; c < 3; ++c) copy_norm(c, cloudy_rgb, c);
        copy_norm(3, *nir, 0);
        break;
    case mcgan::InputMode::NIR:
        copy_norm(0, *nir, 0);
        break;
    case mcgan::InputMode::RGB:
        for (int c = 0; c < 3; ++c) copy_norm(c, cloudy_rgb, c);
        break;
    }

    const nn::Tensor<float> out = trainer.predict(x);
    const int depth = shape_src.value_depth;
    Prediction pred;
    pred.rgb = raster::BandImage(w, h, 3, depth);
    for (int c = 0; c < 3; ++c) {
        const float* plane = out.image(0) + static_cast<size_t>(c) * h * w;
        for (size_t i = 0; i < pred.rgb.pixel_count(); ++i)
            pred.rgb.band_ptr(c)[i] = raster::denormalize_sample(plane[i], depth);
    }
    pred.mask = raster::BandImage(w, h, 1, depth);
    if (trainer.spec().output_channels == 4) {
        const float* plane = out.image(0) + static_cast<size_t>(3) * h * w;
        const float maxv = pred.mask.max_value();
        for (size_t i = 0; i < pred.mask.pixel_count(); ++i) {
            const float alpha = std::clamp((plane[i] + 1.0f) * 0.5f, 0.0f, 1.0f);
            pred.mask.band_ptr(0)[i] = std::round(alpha * maxv);
        }
    }
    return pred;
}

std::mt19937_64 epoch_rng(uint64_t seed, long epoch) {
    uint64_t z = seed ^ (0xA0761D6478BD642FULL * (static_cast<uint64_t>(epoch) + 1));
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return std::mt19937_64(z ^ (z >> 31));
}

namespace {

std::vector<cloudsim::GroupRecord> training_records(const PipelineConfig& config,
                                                    const fs::path& root) {
    auto records = cloudsim::read_manifest(root / "manifest.jsonl");
    if (config.train_on_sample_manifest) {
        const fs::path sample_path = fs::path(config.paths.sample_dir) / "sample_manifest.json";
        std::ifstream in(sample_path);
        if (!in) throw IoError("cannot read sample manifest: " + sample_path.string());
        const json manifest = json::parse(in);
        std::set<std::string> keep;
        for (const auto& s : manifest.at("selected"))
            keep.insert(s.at("tile_id").get<std::string>());
        std::erase_if(records, [&](const auto& r) { return !keep.contains(r.group_id); });
    }
    return records;
}

json losses_to_json(const mcgan::StepLosses& l) {
    json j;
    j["step"] = l.step;
    j["epoch"] = l.epoch;
    j["d_loss"] = l.d_loss;
    j["d_real"] = l.d_real;
    j["d_fake"] = l.d_fake;
    j["g_adv"] = l.g_adv;
    j["g_l1"] = l.g_l1;
    j["g_total"] = l.g_total;
    return j;
}

class GroupLoader {
public:
    GroupLoader(fs::path root, std::vector<cloudsim::GroupRecord> records, size_t cache_limit)
        : root_(std::move(root)), records_(std::move(records)) {
        if (records_.size() <= cache_limit) {
            cache_.reserve(records_.size());
            for (const auto& rec : records_) cache_.push_back(cloudsim::load_group(root_, rec));
        }
    }

    size_t size() const { return records_.size(); }
    const cloudsim::GroupRecord& record(size_t i) const { return records_[i]; }

    cloudsim::TileGroup get(size_t i) const {
        if (!cache_.empty()) return cache_[i];
        return cloudsim::load_group(root_, records_[i]);
    }

private:
    fs::path root_;
    std::vector<cloudsim::GroupRecord> records_;
    std::vector<cloudsim::TileGroup> cache_;
};

} // namespace

TrainResult cmd_train(const PipelineConfig& config, const std::string& resume_checkpoint) {
    config.validate();
    const fs::path root = config.paths.dataset_root;
    const fs::path out_dir = config.paths.checkpoint_dir;
    auto records = training_records(config, root);

    std::unique_ptr<mcgan::Trainer> trainer;
    if (!resume_checkpoint.empty()) {
        trainer = std::make_unique<mcgan::Trainer>(mcgan::load_checkpoint(resume_checkpoint));
    } else {
        const mcgan::ModelSpec spec = config.train.make_model_spec();
        trainer = std::make_unique<mcgan::Trainer>(spec, config.train);
    }
    // On resume the optimization state comes from the checkpoint; only the
    // run extent may be changed, everything that affects determinism stays.
    mcgan::TrainConfig tc = trainer->config();
    if (!resume_checkpoint.empty()) {
        if (config.train.seed != tc.seed || config.train.batch_size != tc.batch_size)
            throw ConfigError("resume requires the checkpointed seed and batch size");
        tc.epochs = config.train.epochs;
        tc.max_steps = config.train.max_steps;
        tc.checkpoint_interval = config.train.checkpoint_interval;
    }

    if (tc.holdout_count > 0) {
        if (static_cast<size_t>(tc.holdout_count) >= records.size())
            throw DataError("holdout_count leaves no training groups");
        records.resize(records.size() - tc.holdout_count);
    }

    write_resolved_config(config, out_dir);
    GroupLoader loader(root, records, 2000);
    if (loader.size() == 0 && tc.epochs > 0) throw DataError("no training groups available");

    fs::create_directories(out_dir);
    const fs::path metrics_path = out_dir / "metrics.jsonl";
    std::ofstream metrics(metrics_path, std::ios::app);
    if (!metrics) throw IoError("cannot write metrics: " + metrics_path.string());

    auto checkpoint_path = [&](long epoch) {
        char buf[48];
        std::snprintf(buf, sizeof(buf), "ckpt-epoch%05ld.mcck", epoch);
        return out_dir / buf;
    };
    const fs::path last_path = out_dir / "ckpt-last.mcck";

    if (tc.epochs == 0 || loader.size() == 0) {
        mcgan::save_checkpoint(trainer->to_checkpoint(), last_path);
        return {last_path, metrics_path};
    }

    bool stop = false;
    for (long epoch = trainer->epoch; epoch < tc.epochs && !stop; ++epoch) {
        trainer->epoch = epoch;
        std::mt19937_64 rng = epoch_rng(tc.seed, epoch);
        std::vector<size_t> order(loader.size());
        std::iota(order.begin(), order.end(), 0);
        // Explicit Fisher-Yates for cross-platform reproducibility.
        for (size_t i = order.size() - 1; i > 0; --i)
            std::swap(order[i], order[rng() % (i + 1)]);

        for (size_t start = 0; start < order.size(); start += tc.batch_size) {
            const size_t end = std::min(order.size(), start + tc.batch_size);
            std::vector<cloudsim::TileGroup> groups;
            groups.reserve(end - start);
            for (size_t i = start; i < end; ++i) groups.push_back(loader.get(order[i]));
            const mcgan::Batch batch =
                make_batch(groups, tc.input_mode, trainer->spec().output_channels);
            const mcgan::StepLosses losses = trainer->train_step(batch, rng);
            metrics << losses_to_json(losses).dump() << "\n";
            if (tc.max_steps > 0 && trainer->g_steps >= tc.max_steps) {
                stop = true;
                break;
            }
        }
        trainer->epoch = epoch + 1;
        if ((epoch + 1) % tc.checkpoint_interval == 0)
            mcgan::save_checkpoint(trainer->to_checkpoint(), checkpoint_path(epoch + 1));
        metrics.flush();
    }
    mcgan::save_checkpoint(trainer->to_checkpoint(), last_path);
    return {last_path, metrics_path};
}

void cmd_infer(const PipelineConfig& config, const InferArgs& args) {
    config.validate();
    if (args.checkpoint.empty()) throw ConfigError("infer requires a checkpoint");
    mcgan::Trainer trainer(mcgan::load_checkpoint(args.checkpoint));

    raster::BandImage rgb;
    std::optional<raster::BandImage> nir;
    if (!args.rgbn.empty()) {
        SceneEntry entry;
        entry.id = "input";
        entry.rgbn = args.rgbn;
        ScenePair scene = load_scene(entry);
        rgb = std::move(scene.rgb);
        nir = std::move(scene.nir);
    } else {
        if (!args.rgb.empty()) rgb = raster::load_image(args.rgb);
        if (!args.nir.empty()) nir = raster::load_image(args.nir);
    }
    const fs::path out_dir = args.out_dir.empty() ? fs::path(config.paths.report_dir) / "infer"
                                                  : fs::path(args.out_dir);
    write_resolved_config(config, out_dir);

    Prediction pred = predict_group(trainer, rgb, nir ? &*nir : nullptr);
    raster::save_image(pred.rgb, out_dir / "cloudfree_rgb.png");
    if (trainer.spec().output_channels == 4)
        raster::save_image(pred.mask, out_dir / "cloud_mask.png");

    if (rgb.bands == 3 && nir) {
        std::vector<evalsuite::PanelColumn> cols = {{"RGB", rgb}, {"NIR", *nir},
                                                    {"Cloud-free RGB", pred.rgb}};
        if (!args.baseline_checkpoint.empty()) {
            mcgan::Trainer baseline(mcgan::load_checkpoint(args.baseline_checkpoint));
            Prediction base = predict_group(baseline, rgb, nir ? &*nir : nullptr);
            cols.push_back({"NIR2RGB", base.rgb});
        }
        cols.push_back({"Cloud mask", pred.mask});
        raster::save_image(evalsuite::render_panel(cols), out_dir / "panel.png");
    }
    std::cout << "infer: outputs in " << out_dir.string() << "\n";
}

void cmd_eval(const PipelineConfig& config, const EvalArgs& args) {
    config.validate();
    if (args.checkpoint.empty()) throw ConfigError("eval requires a checkpoint");
    mcgan::Trainer trainer(mcgan::load_checkpoint(args.checkpoint));

    const fs::path root = config.paths.dataset_root;
    auto records = cloudsim::read_manifest(root / "manifest.jsonl");
    const int holdout = trainer.config().holdout_count;
    if (args.split == "holdout") {
        if (holdout <= 0 || static_cast<size_t>(holdout) > records.size())
            throw DataError("no holdout split recorded in the checkpoint");
        records.erase(records.begin(), records.end() - holdout);
    } else if (args.split == "train") {
        if (static_cast<size_t>(holdout) >= records.size())
            throw DataError("holdout leaves no training groups");
        records.resize(records.size() - holdout);
    } else if (args.split != "all") {
        throw ConfigError("unknown split: " + args.split);
    }

    const fs::path out_dir = config.paths.report_dir;
    write_resolved_config(config, out_dir);
    if (records.empty())
        std::cerr << "eval: warning: empty dataset, writing empty report\n";

    std::vector<evalsuite::EvalRecord> results;
    int panels_written = 0;
    for (const auto& rec : records) {
        const cloudsim::TileGroup group = cloudsim::load_group(root, rec);
        Prediction pred = predict_group(trainer, group.cloudy_rgb.image, &group.nir.image);
        results.push_back(evalsuite::evaluate_group(group, pred.rgb, pred.mask));
        if (panels_written < args.panels) {
            raster::save_image(evalsuite::synth_panel(group, pred.rgb, pred.mask),
                               out_dir / ("panel-" + rec.group_id + ".png"));
            ++panels_written;
        }
    }
    evalsuite::write_report(results, out_dir / "report.jsonl");
    std::cout << "eval: " << results.size() << " groups -> "
              << (out_dir / "report.jsonl").string() << "\n";
}

} // namespace mcrm::cli
