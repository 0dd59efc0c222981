#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mcrm/errors.hpp"
#include "mcrm/pipeline.hpp"

namespace {

// Exit codes: 0 success, 1 internal, 2 usage/config, 3 I/O, 4 data, 5 numeric.
enum ExitCode {
    kOk = 0,
    kInternal = 1,
    kConfig = 2,
    kIo = 3,
    kData = 4,
    kNumeric = 5,
};

struct CommonArgs {
    std::string config_path;
    std::string out;
    long long seed = -1;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "pipeline config file (JSON)")->required();
    cmd->add_option("--out", args.out, "output directory override for this subcommand");
    cmd->add_option("--seed", args.seed, "seed override for every pipeline stage");
    cmd->add_option("--set", args.overrides,
                    "dotted config override, e.g. --set train.epochs=3");
}

void apply_override(nlohmann::json& j, const std::string& expr) {
    const auto eq = expr.find('=');
    if (eq == std::string::npos)
        throw mcrm::ConfigError("--set expects key=value, got: " + expr);
    const std::string path = expr.substr(0, eq);
    const std::string value = expr.substr(eq + 1);
    nlohmann::json* node = &j;
    size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot - start);
        if (dot == std::string::npos) {
            nlohmann::json parsed;
            try {
                parsed = nlohmann::json::parse(value);
            } catch (const nlohmann::json::exception&) {
                parsed = value; // plain string
            }
            (*node)[key] = parsed;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

mcrm::cli::PipelineConfig resolve_config(const CommonArgs& args, const std::string& subcommand) {
    std::ifstream in(args.config_path);
    if (!in) throw mcrm::IoError("cannot read config: " + args.config_path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw mcrm::ConfigError(std::string("config parse error: ") + e.what());
    }
    for (const auto& expr : args.overrides) apply_override(j, expr);

    mcrm::cli::PipelineConfig config = mcrm::cli::PipelineConfig::from_json(j);
    config.apply_env();
    if (args.seed >= 0) {
        config.cloudsim.seed = static_cast<uint64_t>(args.seed);
        config.embed.seed = static_cast<uint64_t>(args.seed);
        config.embed.tsne.seed = static_cast<uint64_t>(args.seed);
        config.train.seed = static_cast<uint64_t>(args.seed);
    }
    if (!args.out.empty()) {
        if (subcommand == "synth") config.paths.dataset_root = args.out;
        else if (subcommand == "sample") config.paths.sample_dir = args.out;
        else if (subcommand == "train") config.paths.checkpoint_dir = args.out;
        else if (subcommand == "eval") config.paths.report_dir = args.out;
    }
    config.validate();
    return config;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"multispectral cloud removal pipeline"};
    app.require_subcommand(1);

    CommonArgs synth_args, sample_args, train_args, infer_args_common, eval_args_common;
    std::string resume;
    mcrm::cli::InferArgs infer_args;
    mcrm::cli::EvalArgs eval_args;

    CLI::App* synth = app.add_subcommand("synth", "synthesize the cloudy/clean dataset");
    add_common(synth, synth_args);

    CLI::App* sample = app.add_subcommand("sample", "t-SNE embedding + uniform grid sampling");
    add_common(sample, sample_args);

    CLI::App* train = app.add_subcommand("train", "train the cloud-removal network");
    add_common(train, train_args);
    train->add_option("--resume", resume, "checkpoint to resume from");

    CLI::App* infer = app.add_subcommand("infer", "run cloud removal on a tile");
    add_common(infer, infer_args_common);
    infer->add_option("--checkpoint", infer_args.checkpoint, "trained checkpoint")->required();
    infer->add_option("--rgb", infer_args.rgb, "cloudy RGB input");
    infer->add_option("--nir", infer_args.nir, "co-registered NIR input");
    infer->add_option("--rgbn", infer_args.rgbn, "single 4-band RGBN input");
    infer->add_option("--baseline-checkpoint", infer_args.baseline_checkpoint,
                      "NIR-only model for the comparison panel");

    CLI::App* eval = app.add_subcommand("eval", "metrics + panels over a dataset");
    add_common(eval, eval_args_common);
    eval->add_option("--checkpoint", eval_args.checkpoint, "trained checkpoint")->required();
    eval->add_option("--split", eval_args.split, "all | holdout | train");
    eval->add_option("--panels", eval_args.panels, "number of comparison panels to render");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        if (synth->parsed()) {
            mcrm::cli::cmd_synth(resolve_config(synth_args, "synth"));
        } else if (sample->parsed()) {
            mcrm::cli::cmd_sample(resolve_config(sample_args, "sample"));
        } else if (train->parsed()) {
            mcrm::cli::cmd_train(resolve_config(train_args, "train"), resume);
        } else if (infer->parsed()) {
            infer_args.out_dir = infer_args_common.out;
            mcrm::cli::cmd_infer(resolve_config(infer_args_common, "infer"), infer_args);
        } else if (eval->parsed()) {
            mcrm::cli::cmd_eval(resolve_config(eval_args_common, "eval"), eval_args);
        }
    } catch (const mcrm::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const mcrm::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kIo;
    } catch (const mcrm::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const mcrm::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kInternal;
    }
    return kOk;
}
