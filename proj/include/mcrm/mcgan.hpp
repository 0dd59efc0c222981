#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcrm/errors.hpp"
#include "mcrm/nn/adam.hpp"
#include "mcrm/nn/layers.hpp"
#include "mcrm/nn/tensor.hpp"

namespace mcrm::mcgan {

enum class LayerKind { Conv, TransposedConv };
enum class InputMode { RGBN, NIR, RGB };

std::string to_string(InputMode mode);
InputMode input_mode_from_string(const std::string& s);

struct LayerSpec {
    LayerKind kind = LayerKind::Conv;
    int filters = 0;
    int kernel = 0;
    int stride = 0;
    bool batch_norm = false;
    nn::Act activation = nn::Act::None;
    double dropout = 0.0;
};

// Layer-by-layer network description. The default construction reproduces
// the 8-level encoder/decoder and the 4+1-layer patch discriminator; scaled
// variants shrink depth and width for small tiles while keeping the same
// block structure.
struct ModelSpec {
    int input_channels = 4;
    int output_channels = 4;
    double leaky_slope = 0.2;
    std::vector<LayerSpec> encoder;
    std::vector<LayerSpec> decoder;
    std::vector<LayerSpec> discriminator;

    static ModelSpec table1(InputMode mode);
    static ModelSpec scaled(int levels, int base_width, int max_width, int input_channels,
                            int output_channels);
    static int default_input_channels(InputMode mode);
    static int default_output_channels(InputMode mode);

    void validate() const;
    // Input sides must be divisible by this for the decoder to mirror the
    // encoder exactly (2^(#stride-2 encoder layers)).
    int side_divisor() const;
    // Mirror skip pairing: decoder stage i consumes encoder stage
    // (levels-1-i) for i >= 1; the bottleneck feeds stage 0 directly.
    std::vector<int> skip_sources() const;
};

struct StageShape {
    int side = 0;
    int channels = 0;
};

// Pure stride arithmetic over the spec; no network is built.
std::vector<StageShape> encoder_shapes(const ModelSpec& spec, int side);
std::vector<StageShape> decoder_shapes(const ModelSpec& spec, int side);
std::vector<StageShape> discriminator_shapes(const ModelSpec& spec, int side);

namespace detail {

template <typename T>
struct Stage {
    std::unique_ptr<nn::Conv2d<T>> conv;
    std::unique_ptr<nn::TransposedConv2d<T>> tconv;
    std::optional<nn::BatchNorm2d<T>> bn;
    std::optional<nn::Activation<T>> act;
    std::optional<nn::Dropout<T>> drop;

    nn::Tensor<T> forward(const nn::Tensor<T>& x, nn::RunCtx& ctx) {
        nn::Tensor<T> cur = conv ? conv->forward(x, ctx) : tconv->forward(x, ctx);
        if (bn) cur = bn->forward(cur, ctx);
        if (act) cur = act->forward(cur, ctx);
        if (drop) cur = drop->forward(cur, ctx);
        return cur;
    }
    nn::Tensor<T> backward(const nn::Tensor<T>& gy) {
        nn::Tensor<T> g = gy;
        if (drop) g = drop->backward(g);
        if (act) g = act->backward(g);
        if (bn) g = bn->backward(g);
        return conv ? conv->backward(g) : tconv->backward(g);
    }
    void params(std::vector<nn::ParamRef<T>>& out) {
        if (conv) conv->params(out);
        if (tconv) tconv->params(out);
        if (bn) bn->params(out);
    }
    void buffers(std::vector<nn::ParamRef<T>>& out) {
        if (bn) bn->buffers(out);
    }
};

template <typename T>
Stage<T> build_stage(const std::string& name, const LayerSpec& spec, int in_channels,
                     double leaky_slope) {
    Stage<T> stage;
    const int pad = spec.kernel == spec.stride ? 0 : (spec.kernel - spec.stride + 1) / 2;
    if (spec.kind == LayerKind::Conv)
        stage.conv = std::make_unique<nn::Conv2d<T>>(name + ".conv", in_channels, spec.filters,
                                                     spec.kernel, spec.stride, pad);
    else
        stage.tconv = std::make_unique<nn::TransposedConv2d<T>>(
            name + ".tconv", in_channels, spec.filters, spec.kernel, spec.stride, pad);
    if (spec.batch_norm) stage.bn.emplace(name + ".bn", spec.filters);
    if (spec.activation != nn::Act::None)
        stage.act.emplace(spec.activation, static_cast<T>(leaky_slope));
    if (spec.dropout > 0.0) stage.drop.emplace(static_cast<T>(spec.dropout));
    return stage;
}

} // namespace detail

// Encoder-decoder generator with mirror skip concatenation and a tanh head.
template <typename T>
class Generator {
public:
    Generator(const ModelSpec& spec, uint64_t init_seed);

    nn::Tensor<T> forward(const nn::Tensor<T>& x, nn::RunCtx& ctx);
    // Returns the gradient with respect to the input.
    nn::Tensor<T> backward(const nn::Tensor<T>& gout);

    std::vector<nn::ParamRef<T>> params();
    std::vector<nn::ParamRef<T>> buffers();
    const ModelSpec& spec() const { return spec_; }

    // Shapes recorded by the last forward, one entry per stage.
    const std::vector<StageShape>& last_encoder_shapes() const { return enc_shapes_; }
    const std::vector<StageShape>& last_decoder_shapes() const { return dec_shapes_; }

private:
    ModelSpec spec_;
    std::vector<detail::Stage<T>> enc_, dec_;
    std::vector<nn::Tensor<T>> skips_;
    std::vector<StageShape> enc_shapes_, dec_shapes_;
};

// Patch discriminator over channel-concatenated (condition, candidate)
// pairs; emits a logit map.
template <typename T>
class Discriminator {
public:
    Discriminator(const ModelSpec& spec, int in_channels, uint64_t init_seed);

    nn::Tensor<T> forward(const nn::Tensor<T>& x, nn::RunCtx& ctx);
    nn::Tensor<T> backward(const nn::Tensor<T>& gout);

    std::vector<nn::ParamRef<T>> params();
    std::vector<nn::ParamRef<T>> buffers();
    int in_channels() const { return in_channels_; }

private:
    ModelSpec spec_;
    int in_channels_;
    std::vector<detail::Stage<T>> stages_;
};

// ---- Objectives ----

// Channel-weighted mean absolute error with the channel-count divisor:
// (1 / (B*C*H*W)) * sum_c lambda_c * sum_pix |target - pred|.
template <typename T>
T l1_loss(const nn::Tensor<T>& target, const nn::Tensor<T>& pred,
          std::span<const double> channel_weights);

// d(l1_loss)/d(pred).
template <typename T>
nn::Tensor<T> l1_loss_grad(const nn::Tensor<T>& target, const nn::Tensor<T>& pred,
                           std::span<const double> channel_weights);

struct GanLossValues {
    double cgan_value = 0.0; // E[log D(x,y)] + E[log(1 - D(x,G(x)))]
    double d_loss = 0.0;     // what the discriminator minimizes
    double d_real = 0.0;
    double d_fake = 0.0;
    double g_adv = 0.0; // non-saturating generator term, -E[log D(x,G(x))]
};

// Scalar evaluation on probability patch maps, clamped to [1e-7, 1 - 1e-7].
GanLossValues cgan_losses(const nn::Tensor<float>& p_real, const nn::Tensor<float>& p_fake);
GanLossValues cgan_losses(const nn::Tensor<double>& p_real, const nn::Tensor<double>& p_fake);

// Numerically stable binary cross entropy on logits against a constant
// target; mean over all patches. Gradient w.r.t. logits written if non-null.
template <typename T>
T bce_with_logits(const nn::Tensor<T>& logits, T target, nn::Tensor<T>* grad);

template <typename T>
nn::Tensor<T> sigmoid(const nn::Tensor<T>& logits);

// ---- Training ----

struct TrainConfig {
    int batch_size = 16;
    int epochs = 500;
    double l1_weight = 100.0;
    std::vector<double> channel_weights = {1.0, 1.0, 1.0, 1.0};
    double learning_rate = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    uint64_t seed = 0;
    InputMode input_mode = InputMode::RGBN;
    bool discriminator_sees_mask = true;
    int checkpoint_interval = 25;
    int holdout_count = 0;
    long max_steps = 0; // stop after this many generator steps (0 = all epochs)
    std::string model_preset = "table1"; // "table1" or "scaled"
    int model_levels = 8;
    int model_base_width = 64;
    int model_max_width = 512;

    void validate() const;
    ModelSpec make_model_spec() const;
};

struct StepLosses {
    long step = 0;
    long epoch = 0;
    double d_loss = 0.0;
    double d_real = 0.0;
    double d_fake = 0.0;
    double g_adv = 0.0;
    double g_l1 = 0.0;
    double g_total = 0.0;
};

struct Batch {
    nn::Tensor<float> x; // condition, normalized
    nn::Tensor<float> y; // target, normalized
};

struct Checkpoint {
    ModelSpec spec;
    TrainConfig config;
    long epoch = 0;
    long g_steps = 0;
    long adam_g_steps = 0;
    long adam_d_steps = 0;
    std::map<std::string, nn::Tensor<float>> blobs;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

class Trainer {
public:
    Trainer(const ModelSpec& spec, const TrainConfig& config);
    explicit Trainer(const Checkpoint& ckpt);

    // One discriminator update on (real, detached fake), then one generator
    // update on the adversarial term plus weighted L1.
    StepLosses train_step(const Batch& batch, std::mt19937_64& rng);

    nn::Tensor<float> predict(const nn::Tensor<float>& x); // eval mode
    nn::Tensor<float> forward_train(const nn::Tensor<float>& x, std::mt19937_64& rng);

    Checkpoint to_checkpoint() const;
    const ModelSpec& spec() const { return spec_; }
    const TrainConfig& config() const { return config_; }
    long epoch = 0;
    long g_steps = 0;

    Generator<float>& generator() { return *gen_; }
    Discriminator<float>& discriminator() { return *disc_; }

private:
    int disc_y_channels() const;
    ModelSpec spec_;
    TrainConfig config_;
    std::unique_ptr<Generator<float>> gen_;
    std::unique_ptr<Discriminator<float>> disc_;
    nn::Adam<float> adam_g_, adam_d_;
};

} // namespace mcrm::mcgan
