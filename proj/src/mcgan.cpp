#include "mcrm/mcgan.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

using nlohmann::json;

namespace mcrm::mcgan {

std::string to_string(InputMode mode) {
    switch (mode) {
    case InputMode::RGBN: return "rgbn";
    case InputMode::NIR: return "nir";
    case InputMode::RGB: return "rgb";
    }
    return "rgbn";
}

InputMode input_mode_from_string(const std::string& s) {
    if (s == "rgbn") return InputMode::RGBN;
    if (s == "nir") return InputMode::NIR;
    if (s == "rgb") return InputMode::RGB;
    throw ConfigError("unknown input mode: " + s);
}

int ModelSpec::default_input_channels(InputMode mode) {
    switch (mode) {
    case InputMode::RGBN: return 4;
    case InputMode::NIR: return 1;
    case InputMode::RGB: return 3;
    }
    return 4;
}

int ModelSpec::default_output_channels(InputMode mode) {
    // RGB + mask for the multispectral net; the baselines emit plain RGB.
    return mode == InputMode::RGBN ? 4 : 3;
}

ModelSpec ModelSpec::scaled(int levels, int base_width, int max_width, int input_channels,
                            int output_channels) {
    if (levels < 2) throw ConfigError("model needs at least 2 levels");
    ModelSpec spec;
    spec.input_channels = input_channels;
    spec.output_channels = output_channels;

    auto width = [&](int i) { return std::min(base_width << i, max_width); };

    spec.encoder.push_back({LayerKind::Conv, width(0), 3, 1, false, nn::Act::LeakyRelu, 0.0});
    for (int i = 1; i < levels; ++i)
        spec.encoder.push_back({LayerKind::Conv, width(i), 4, 2, true, nn::Act::LeakyRelu, 0.0});

    const int dropout_stages = std::min(3, levels - 2);
    for (int i = 0; i + 1 < levels; ++i) {
        const double drop = i < dropout_stages ? 0.5 : 0.0;
        spec.decoder.push_back({LayerKind::TransposedConv, spec.encoder[levels - 2 - i].filters,
                                4, 2, true, nn::Act::Relu, drop});
    }
    spec.decoder.push_back({LayerKind::Conv, output_channels, 3, 1, false, nn::Act::Tanh, 0.0});

    const int disc_levels = std::min(4, levels - 1);
    for (int i = 0; i < disc_levels; ++i)
        spec.discriminator.push_back(
            {LayerKind::Conv, width(i), 4, 2, true, nn::Act::LeakyRelu, 0.0});
    spec.discriminator.push_back({LayerKind::Conv, 1, 3, 1, false, nn::Act::None, 0.0});
    return spec;
}

ModelSpec ModelSpec::table1(InputMode mode) {
    return scaled(8, 64, 512, default_input_channels(mode), default_output_channels(mode));
}

void ModelSpec::validate() const {
    if (input_channels != 1 && input_channels != 3 && input_channels != 4)
        throw ConfigError("input_channels must be 1, 3 or 4");
    if (output_channels != 3 && output_channels != 4)
        throw ConfigError("output_channels must be 3 or 4");
    if (encoder.size() < 2 || encoder.size() != decoder.size())
        throw ConfigError("encoder and decoder must have the same stage count (>= 2)");
    if (discriminator.size() < 2) throw ConfigError("discriminator needs at least 2 stages");
    auto check = [](const LayerSpec& l, const char* where) {
        if (l.filters <= 0 || l.kernel <= 0 || l.stride <= 0)
            throw ConfigError(std::string("non-positive layer geometry in ") + where);
        if (l.dropout < 0.0 || l.dropout >= 1.0)
            throw ConfigError(std::string("dropout must be in [0, 1) in ") + where);
    };
    for (const auto& l : encoder) {
        check(l, "encoder");
        if (l.kind != LayerKind::Conv) throw ConfigError("encoder stages must be convolutions");
    }
    for (const auto& l : discriminator) {
        check(l, "discriminator");
        if (l.kind != LayerKind::Conv)
            throw ConfigError("discriminator stages must be convolutions");
    }
    for (size_t i = 0; i < decoder.size(); ++i) {
        check(decoder[i], "decoder");
        const bool last = i + 1 == decoder.size();
        if (!last && decoder[i].kind != LayerKind::TransposedConv)
            throw ConfigError("decoder upsampling stages must be transposed convolutions");
        if (last && decoder[i].kind != LayerKind::Conv)
            throw ConfigError("decoder head must be a stride-1 convolution");
    }
    if (decoder.back().filters != output_channels)
        throw ConfigError("decoder head filters must equal output_channels");
}

int ModelSpec::side_divisor() const {
    int halvings = 0;
    for (const auto& l : encoder)
        if (l.stride == 2) ++halvings;
    return 1 << halvings;
}

std::vector<int> ModelSpec::skip_sources() const {
    const int levels = static_cast<int>(encoder.size());
    std::vector<int> sources(levels, -1);
    for (int i = 1; i < levels; ++i) sources[i] = levels - 1 - i;
    return sources;
}

std::vector<StageShape> encoder_shapes(const ModelSpec& spec, int side) {
    std::vector<StageShape> shapes;
    int s = side;
    for (const auto& l : spec.encoder) {
        const int pad = (l.kernel - l.stride + 1) / 2;
        s = nn::conv_out_side(s, l.kernel, l.stride, pad);
        shapes.push_back({s, l.filters});
    }
    return shapes;
}

std::vector<StageShape> decoder_shapes(const ModelSpec& spec, int side) {
    const auto enc = encoder_shapes(spec, side);
    std::vector<StageShape> shapes;
    int s = enc.back().side;
    for (const auto& l : spec.decoder) {
        const int pad = (l.kernel - l.stride + 1) / 2;
        s = l.kind == LayerKind::TransposedConv ? nn::tconv_out_side(s, l.kernel, l.stride, pad)
                                                : nn::conv_out_side(s, l.kernel, l.stride, pad);
        shapes.push_back({s, l.filters});
    }
    return shapes;
}

std::vector<StageShape> discriminator_shapes(const ModelSpec& spec, int side) {
    std::vector<StageShape> shapes;
    int s = side;
    for (const auto& l : spec.discriminator) {
        const int pad = (l.kernel - l.stride + 1) / 2;
        s = nn::conv_out_side(s, l.kernel, l.stride, pad);
        shapes.push_back({s, l.filters});
    }
    return shapes;
}

namespace {

template <typename T, typename Rng>
void init_stage(detail::Stage<T>& stage, Rng& rng) {
    if (stage.conv) stage.conv->init(rng);
    if (stage.tconv) stage.tconv->init(rng);
    if (stage.bn) stage.bn->init(rng);
}

template <typename T>
void add_into(nn::Tensor<T>& dst, const nn::Tensor<T>& src) {
    if (dst.size() == 0) {
        dst = src;
        return;
    }
    for (size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

} // namespace

template <typename T>
Generator<T>::Generator(const ModelSpec& spec, uint64_t init_seed) : spec_(spec) {
    spec_.validate();
    std::mt19937_64 rng(init_seed);
    const int levels = static_cast<int>(spec.encoder.size());
    int in_ch = spec.input_channels;
    for (int i = 0; i < levels; ++i) {
        enc_.push_back(detail::build_stage<T>("gen.enc" + std::to_string(i), spec.encoder[i],
                                              in_ch, spec.leaky_slope));
        init_stage(enc_.back(), rng);
        in_ch = spec.encoder[i].filters;
    }
    int prev = spec.encoder.back().filters;
    for (int i = 0; i < levels; ++i) {
        const int dec_in = i == 0 ? prev : spec.decoder[i - 1].filters +
                                               spec.encoder[levels - 1 - i].filters;
        dec_.push_back(detail::build_stage<T>("gen.dec" + std::to_string(i), spec.decoder[i],
                                              dec_in, spec.leaky_slope));
        init_stage(dec_.back(), rng);
    }
}

template <typename T>
nn::Tensor<T> Generator<T>::forward(const nn::Tensor<T>& x, nn::RunCtx& ctx) {
    if (x.c != spec_.input_channels)
        throw DataError("generator input has " + std::to_string(x.c) + " channels, expected " +
                        std::to_string(spec_.input_channels));
    if (x.h % spec_.side_divisor() != 0 || x.w % spec_.side_divisor() != 0)
        throw DataError("input sides must be divisible by " +
                        std::to_string(spec_.side_divisor()));
    const int levels = static_cast<int>(enc_.size());
    skips_.clear();
    enc_shapes_.clear();
    dec_shapes_.clear();
    nn::Tensor<T> cur = x;
    for (int i = 0; i < levels; ++i) {
        cur = enc_[i].forward(cur, ctx);
        enc_shapes_.push_back({cur.h, cur.c});
        skips_.push_back(cur);
    }
    cur = skips_.back();
    for (int i = 0; i < levels; ++i) {
        nn::Tensor<T> in =
            i == 0 ? cur : nn::concat_channels(cur, skips_[levels - 1 - i]);
        cur = dec_[i].forward(in, ctx);
        dec_shapes_.push_back({cur.h, cur.c});
    }
    return cur;
}

template <typename T>
nn::Tensor<T> Generator<T>::backward(const nn::Tensor<T>& gout) {
    const int levels = static_cast<int>(enc_.size());
    std::vector<nn::Tensor<T>> skip_grads(levels);
    nn::Tensor<T> g = gout;
    for (int i = levels - 1; i >= 0; --i) {
        g = dec_[i].backward(g);
        if (i > 0) {
            const int prev_ch = spec_.decoder[i - 1].filters;
            // g is the gradient of concat(prev_decoder_out, mirror_skip).
            nn::Tensor<T> gskip = nn::slice_channels(g, prev_ch, g.c);
            add_into(skip_grads[levels - 1 - i], gskip);
            g = nn::slice_channels(g, 0, prev_ch);
        } else {
            add_into(skip_grads[levels - 1], g);
        }
    }
    nn::Tensor<T> gin;
    for (int j = levels - 1; j >= 0; --j) {
        gin = enc_[j].backward(skip_grads[j]);
        if (j > 0) add_into(skip_grads[j - 1], gin);
    }
    return gin;
}

template <typename T>
std::vector<nn::ParamRef<T>> Generator<T>::params() {
    std::vector<nn::ParamRef<T>> out;
    for (auto& s : enc_) s.params(out);
    for (auto& s : dec_) s.params(out);
    return out;
}

template <typename T>
std::vector<nn::ParamRef<T>> Generator<T>::buffers() {
    std::vector<nn::ParamRef<T>> out;
    for (auto& s : enc_) s.buffers(out);
    for (auto& s : dec_) s.buffers(out);
    return out;
}

template <typename T>
Discriminator<T>::Discriminator(const ModelSpec& spec, int in_channels, uint64_t init_seed)
    : spec_(spec), in_channels_(in_channels) {
    std::mt19937_64 rng(init_seed);
    int in_ch = in_channels;
    for (size_t i = 0; i < spec.discriminator.size(); ++i) {
        stages_.push_back(detail::build_stage<T>("disc.s" + std::to_string(i),
                                                 spec.discriminator[i], in_ch,
                                                 spec.leaky_slope));
        init_stage(stages_.back(), rng);
        in_ch = spec.discriminator[i].filters;
    }
}

template <typename T>
nn::Tensor<T> Discriminator<T>::forward(const nn::Tensor<T>& x, nn::RunCtx& ctx) {
    if (x.c != in_channels_)
        throw DataError("discriminator input has " + std::to_string(x.c) +
                        " channels, expected " + std::to_string(in_channels_));
    nn::Tensor<T> cur = x;
    for (auto& s : stages_) cur = s.forward(cur, ctx);
    return cur;
}

template <typename T>
nn::Tensor<T> Discriminator<T>::backward(const nn::Tensor<T>& gout) {
    nn::Tensor<T> g = gout;
    for (auto it = stages_.rbegin(); it != stages_.rend(); ++it) g = it->backward(g);
    return g;
}

template <typename T>
std::vector<nn::ParamRef<T>> Discriminator<T>::params() {
    std::vector<nn::ParamRef<T>> out;
    for (auto& s : stages_) s.params(out);
    return out;
}

template <typename T>
std::vector<nn::ParamRef<T>> Discriminator<T>::buffers() {
    std::vector<nn::ParamRef<T>> out;
    for (auto& s : stages_) s.buffers(out);
    return out;
}

template class Generator<float>;
template class Generator<double>;
template class Discriminator<float>;
template class Discriminator<double>;

// ---- Objectives ----

template <typename T>
T l1_loss(const nn::Tensor<T>& target, const nn::Tensor<T>& pred,
          std::span<const double> channel_weights) {
    if (!target.same_shape(pred)) throw DataError("l1_loss shape mismatch");
    if (static_cast<int>(channel_weights.size()) != target.c)
        throw DataError("channel weight count must equal channel count");
    const size_t plane = static_cast<size_t>(target.h) * target.w;
    double sum = 0.0;
    for (int b = 0; b < target.n; ++b)
        for (int c = 0; c < target.c; ++c) {
            const T* t = target.image(b) + c * plane;
            const T* p = pred.image(b) + c * plane;
            double s = 0.0;
            for (size_t i = 0; i < plane; ++i) s += std::abs(static_cast<double>(t[i] - p[i]));
            sum += channel_weights[c] * s;
        }
    return static_cast<T>(sum / (static_cast<double>(target.size())));
}

template <typename T>
nn::Tensor<T> l1_loss_grad(const nn::Tensor<T>& target, const nn::Tensor<T>& pred,
                           std::span<const double> channel_weights) {
    if (!target.same_shape(pred)) throw DataError("l1_loss shape mismatch");
    nn::Tensor<T> grad(pred.n, pred.c, pred.h, pred.w);
    const size_t plane = static_cast<size_t>(target.h) * target.w;
    const double inv = 1.0 / static_cast<double>(target.size());
    for (int b = 0; b < target.n; ++b)
        for (int c = 0; c < target.c; ++c) {
            const T* t = target.image(b) + c * plane;
            const T* p = pred.image(b) + c * plane;
            T* g = grad.image(b) + c * plane;
            const double w = channel_weights[c] * inv;
            for (size_t i = 0; i < plane; ++i) {
                const T d = p[i] - t[i];
                g[i] = d > T(0) ? static_cast<T>(w) : (d < T(0) ? static_cast<T>(-w) : T(0));
            }
        }
    return grad;
}

template float l1_loss<float>(const nn::Tensor<float>&, const nn::Tensor<float>&,
                              std::span<const double>);
template double l1_loss<double>(const nn::Tensor<double>&, const nn::Tensor<double>&,
                                std::span<const double>);
template nn::Tensor<float> l1_loss_grad<float>(const nn::Tensor<float>&,
                                               const nn::Tensor<float>&,
                                               std::span<const double>);
template nn::Tensor<double> l1_loss_grad<double>(const nn::Tensor<double>&,
                                                 const nn::Tensor<double>&,
                                                 std::span<const double>);

namespace {

constexpr double kProbEps = 1e-7;

template <typename T>
GanLossValues cgan_losses_impl(const nn::Tensor<T>& p_real, const nn::Tensor<T>& p_fake) {
    auto mean_log = [](const nn::Tensor<T>& p, bool complement) {
        double sum = 0.0;
        for (const T v : p.data) {
            double x = std::clamp(static_cast<double>(v), kProbEps, 1.0 - kProbEps);
            if (complement) x = 1.0 - x;
            sum += std::log(x);
        }
        return sum / static_cast<double>(p.size());
    };
    GanLossValues out;
    const double log_real = mean_log(p_real, false);
    const double log_one_minus_fake = mean_log(p_fake, true);
    out.cgan_value = log_real + log_one_minus_fake;
    out.d_real = -log_real;
    out.d_fake = -log_one_minus_fake;
    out.d_loss = out.d_real + out.d_fake;
    out.g_adv = -mean_log(p_fake, false);
    return out;
}

} // namespace

GanLossValues cgan_losses(const nn::Tensor<float>& p_real, const nn::Tensor<float>& p_fake) {
    return cgan_losses_impl(p_real, p_fake);
}
GanLossValues cgan_losses(const nn::Tensor<double>& p_real, const nn::Tensor<double>& p_fake) {
    return cgan_losses_impl(p_real, p_fake);
}

template <typename T>
T bce_with_logits(const nn::Tensor<T>& logits, T target, nn::Tensor<T>* grad) {
    // softplus(x) = max(x, 0) + log1p(exp(-|x|))
    double sum = 0.0;
    const double t = static_cast<double>(target);
    if (grad && !grad->same_shape(logits)) *grad = nn::Tensor<T>(logits.n, logits.c, logits.h, logits.w);
    const double inv = 1.0 / static_cast<double>(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) {
        const double z = static_cast<double>(logits.data[i]);
        const double sp = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
        const double sp_neg = sp - z; // softplus(-z)
        sum += t * sp_neg + (1.0 - t) * sp;
        if (grad) {
            const double sig = 1.0 / (1.0 + std::exp(-z));
            grad->data[i] = static_cast<T>((sig - t) * inv);
        }
    }
    return static_cast<T>(sum * inv);
}

template float bce_with_logits<float>(const nn::Tensor<float>&, float, nn::Tensor<float>*);
template double bce_with_logits<double>(const nn::Tensor<double>&, double,
                                        nn::Tensor<double>*);

template <typename T>
nn::Tensor<T> sigmoid(const nn::Tensor<T>& logits) {
    nn::Tensor<T> out = logits;
    for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
    return out;
}

template nn::Tensor<float> sigmoid<float>(const nn::Tensor<float>&);
template nn::Tensor<double> sigmoid<double>(const nn::Tensor<double>&);

// ---- Training ----

void TrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (l1_weight < 0.0) throw ConfigError("l1_weight must be >= 0");
    for (double w : channel_weights)
        if (w < 0.0) throw ConfigError("channel weights must be >= 0");
    if (learning_rate < 0.0) throw ConfigError("learning_rate must be >= 0");
    if (checkpoint_interval < 1) throw ConfigError("checkpoint_interval must be >= 1");
    if (holdout_count < 0) throw ConfigError("holdout_count must be >= 0");
    if (model_preset != "table1" && model_preset != "scaled")
        throw ConfigError("model_preset must be 'table1' or 'scaled'");
    if (model_preset == "scaled" && (model_levels < 2 || model_base_width < 1))
        throw ConfigError("scaled model needs levels >= 2 and base width >= 1");
}

ModelSpec TrainConfig::make_model_spec() const {
    if (model_preset == "table1") return ModelSpec::table1(input_mode);
    return ModelSpec::scaled(model_levels, model_base_width, model_max_width,
                             ModelSpec::default_input_channels(input_mode),
                             ModelSpec::default_output_channels(input_mode));
}

namespace {

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
    uint64_t z = seed ^ (salt * 0x9E3779B97F4A7C15ULL + 0xD1B54A32D192ED03ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

json layer_to_json(const LayerSpec& l) {
    json j;
    j["kind"] = l.kind == LayerKind::Conv ? "conv" : "tconv";
    j["filters"] = l.filters;
    j["kernel"] = l.kernel;
    j["stride"] = l.stride;
    j["batch_norm"] = l.batch_norm;
    switch (l.activation) {
    case nn::Act::None: j["activation"] = "none"; break;
    case nn::Act::Relu: j["activation"] = "relu"; break;
    case nn::Act::LeakyRelu: j["activation"] = "leaky_relu"; break;
    case nn::Act::Tanh: j["activation"] = "tanh"; break;
    }
    j["dropout"] = l.dropout;
    return j;
}

LayerSpec layer_from_json(const json& j) {
    LayerSpec l;
    l.kind = j.at("kind") == "conv" ? LayerKind::Conv : LayerKind::TransposedConv;
    l.filters = j.at("filters");
    l.kernel = j.at("kernel");
    l.stride = j.at("stride");
    l.batch_norm = j.at("batch_norm");
    const std::string act = j.at("activation");
    if (act == "none") l.activation = nn::Act::None;
    else if (act == "relu") l.activation = nn::Act::Relu;
    else if (act == "leaky_relu") l.activation = nn::Act::LeakyRelu;
    else if (act == "tanh") l.activation = nn::Act::Tanh;
    else throw ConfigError("unknown activation: " + act);
    l.dropout = j.at("dropout");
    return l;
}

json spec_to_json(const ModelSpec& spec) {
    json j;
    j["input_channels"] = spec.input_channels;
    j["output_channels"] = spec.output_channels;
    j["leaky_slope"] = spec.leaky_slope;
    for (const auto& l : spec.encoder) j["encoder"].push_back(layer_to_json(l));
    for (const auto& l : spec.decoder) j["decoder"].push_back(layer_to_json(l));
    for (const auto& l : spec.discriminator) j["discriminator"].push_back(layer_to_json(l));
    return j;
}

ModelSpec spec_from_json(const json& j) {
    ModelSpec spec;
    spec.input_channels = j.at("input_channels");
    spec.output_channels = j.at("output_channels");
    spec.leaky_slope = j.at("leaky_slope");
    for (const auto& l : j.at("encoder")) spec.encoder.push_back(layer_from_json(l));
    for (const auto& l : j.at("decoder")) spec.decoder.push_back(layer_from_json(l));
    for (const auto& l : j.at("discriminator")) spec.discriminator.push_back(layer_from_json(l));
    return spec;
}

json train_config_to_json(const TrainConfig& c) {
    json j;
    j["batch_size"] = c.batch_size;
    j["epochs"] = c.epochs;
    j["l1_weight"] = c.l1_weight;
    j["channel_weights"] = c.channel_weights;
    j["learning_rate"] = c.learning_rate;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["seed"] = c.seed;
    j["input_mode"] = to_string(c.input_mode);
    j["discriminator_sees_mask"] = c.discriminator_sees_mask;
    j["checkpoint_interval"] = c.checkpoint_interval;
    j["holdout_count"] = c.holdout_count;
    j["max_steps"] = c.max_steps;
    j["model_preset"] = c.model_preset;
    j["model_levels"] = c.model_levels;
    j["model_base_width"] = c.model_base_width;
    j["model_max_width"] = c.model_max_width;
    return j;
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.l1_weight = j.value("l1_weight", c.l1_weight);
    if (j.contains("channel_weights"))
        c.channel_weights = j["channel_weights"].get<std::vector<double>>();
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.seed = j.value("seed", c.seed);
    c.input_mode = input_mode_from_string(j.value("input_mode", "rgbn"));
    c.discriminator_sees_mask = j.value("discriminator_sees_mask", c.discriminator_sees_mask);
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    c.holdout_count = j.value("holdout_count", c.holdout_count);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.model_preset = j.value("model_preset", c.model_preset);
    c.model_levels = j.value("model_levels", c.model_levels);
    c.model_base_width = j.value("model_base_width", c.model_base_width);
    c.model_max_width = j.value("model_max_width", c.model_max_width);
    return c;
}

} // namespace

Trainer::Trainer(const ModelSpec& spec, const TrainConfig& config)
    : spec_(spec), config_(config),
      adam_g_(static_cast<float>(config.learning_rate), static_cast<float>(config.beta1),
              static_cast<float>(config.beta2)),
      adam_d_(static_cast<float>(config.learning_rate), static_cast<float>(config.beta1),
              static_cast<float>(config.beta2)) {
    config_.validate();
    spec_.validate();
    if (static_cast<int>(config_.channel_weights.size()) != spec_.output_channels)
        config_.channel_weights.assign(spec_.output_channels, 1.0);
    gen_ = std::make_unique<Generator<float>>(spec_, mix_seed(config.seed, 101));
    disc_ = std::make_unique<Discriminator<float>>(
        spec_, spec_.input_channels + disc_y_channels(), mix_seed(config.seed, 202));
}

Trainer::Trainer(const Checkpoint& ckpt) : Trainer(ckpt.spec, ckpt.config) {
    epoch = ckpt.epoch;
    g_steps = ckpt.g_steps;
    adam_g_.set_step_count(ckpt.adam_g_steps);
    adam_d_.set_step_count(ckpt.adam_d_steps);
    auto restore = [&](std::vector<nn::ParamRef<float>> refs, const std::string& prefix) {
        for (auto& ref : refs) {
            const auto it = ckpt.blobs.find(prefix + ref.name);
            if (it == ckpt.blobs.end())
                throw DataError("checkpoint is missing blob: " + prefix + ref.name);
            if (!it->second.same_shape(*ref.value))
                throw DataError("checkpoint blob shape mismatch: " + prefix + ref.name);
            *ref.value = it->second;
        }
    };
    restore(gen_->params(), "");
    restore(gen_->buffers(), "");
    restore(disc_->params(), "");
    restore(disc_->buffers(), "");
    for (const auto& [name, blob] : ckpt.blobs) {
        if (name.rfind("adam.m.", 0) == 0) {
            const std::string pname = name.substr(7);
            auto& store = pname.rfind("gen.", 0) == 0 ? adam_g_ : adam_d_;
            store.first_moments()[pname] = blob;
        } else if (name.rfind("adam.v.", 0) == 0) {
            const std::string pname = name.substr(7);
            auto& store = pname.rfind("gen.", 0) == 0 ? adam_g_ : adam_d_;
            store.second_moments()[pname] = blob;
        }
    }
}

int Trainer::disc_y_channels() const {
    return config_.discriminator_sees_mask ? spec_.output_channels
                                           : std::min(3, spec_.output_channels);
}

StepLosses Trainer::train_step(const Batch& batch, std::mt19937_64& rng) {
    nn::RunCtx ctx{true, &rng};
    const int ydc = disc_y_channels();
    auto y_view = [&](const nn::Tensor<float>& t) {
        return ydc == t.c ? t : nn::slice_channels(t, 0, ydc);
    };

    nn::Tensor<float> fake = gen_->forward(batch.x, ctx);

    // Discriminator update; the generator output enters as a constant.
    auto d_params = disc_->params();
    nn::Adam<float>::zero_grads(d_params);
    nn::Tensor<float> grad;
    nn::Tensor<float> real_logits =
        disc_->forward(nn::concat_channels(batch.x, y_view(batch.y)), ctx);
    const float d_real = bce_with_logits(real_logits, 1.0f, &grad);
    disc_->backward(grad);
    nn::Tensor<float> fake_logits =
        disc_->forward(nn::concat_channels(batch.x, y_view(fake)), ctx);
    const float d_fake = bce_with_logits(fake_logits, 0.0f, &grad);
    disc_->backward(grad);
    adam_d_.step(d_params);

    // Generator update on the refreshed discriminator.
    auto g_params = gen_->params();
    nn::Adam<float>::zero_grads(g_params);
    nn::Tensor<float> fake_logits2 =
        disc_->forward(nn::concat_channels(batch.x, y_view(fake)), ctx);
    const float g_adv = bce_with_logits(fake_logits2, 1.0f, &grad);
    nn::Tensor<float> gin = disc_->backward(grad);
    nn::Tensor<float> g_fake = nn::slice_channels(gin, batch.x.c, batch.x.c + ydc);
    if (ydc < spec_.output_channels) {
        // Adversarial gradient does not reach channels hidden from D.
        nn::Tensor<float> padded(g_fake.n, spec_.output_channels, g_fake.h, g_fake.w);
        const size_t plane = static_cast<size_t>(g_fake.h) * g_fake.w;
        for (int b = 0; b < g_fake.n; ++b)
            std::copy(g_fake.image(b), g_fake.image(b) + ydc * plane, padded.image(b));
        g_fake = std::move(padded);
    }
    const float l1 = l1_loss(batch.y, fake, config_.channel_weights);
    nn::Tensor<float> g_l1 = l1_loss_grad(batch.y, fake, config_.channel_weights);
    for (size_t i = 0; i < g_fake.size(); ++i)
        g_fake.data[i] += static_cast<float>(config_.l1_weight) * g_l1.data[i];
    gen_->backward(g_fake);
    adam_g_.step(g_params);

    ++g_steps;
    StepLosses losses;
    losses.step = g_steps;
    losses.epoch = epoch;
    losses.d_real = d_real;
    losses.d_fake = d_fake;
    losses.d_loss = d_real + d_fake;
    losses.g_adv = g_adv;
    losses.g_l1 = l1;
    losses.g_total = g_adv + config_.l1_weight * l1;
    if (!std::isfinite(losses.d_loss) || !std::isfinite(losses.g_total))
        throw NumericError("non-finite loss at step " + std::to_string(g_steps) +
                           " (d=" + std::to_string(losses.d_loss) +
                           ", g_adv=" + std::to_string(losses.g_adv) +
                           ", g_l1=" + std::to_string(losses.g_l1) + ")");
    return losses;
}

nn::Tensor<float> Trainer::predict(const nn::Tensor<float>& x) {
    nn::RunCtx ctx{false, nullptr};
    return gen_->forward(x, ctx);
}

nn::Tensor<float> Trainer::forward_train(const nn::Tensor<float>& x, std::mt19937_64& rng) {
    nn::RunCtx ctx{true, &rng};
    return gen_->forward(x, ctx);
}

Checkpoint Trainer::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.spec = spec_;
    ckpt.config = config_;
    ckpt.epoch = epoch;
    ckpt.g_steps = g_steps;
    ckpt.adam_g_steps = adam_g_.step_count();
    ckpt.adam_d_steps = adam_d_.step_count();
    auto snap = [&](std::vector<nn::ParamRef<float>> refs) {
        for (auto& ref : refs) ckpt.blobs[ref.name] = *ref.value;
    };
    snap(gen_->params());
    snap(gen_->buffers());
    snap(disc_->params());
    snap(disc_->buffers());
    auto snap_moments = [&](const std::map<std::string, nn::Tensor<float>>& m,
                            const std::string& prefix) {
        for (const auto& [name, blob] : m) ckpt.blobs[prefix + name] = blob;
    };
    snap_moments(adam_g_.first_moments(), "adam.m.");
    snap_moments(adam_g_.second_moments(), "adam.v.");
    snap_moments(adam_d_.first_moments(), "adam.m.");
    snap_moments(adam_d_.second_moments(), "adam.v.");
    return ckpt;
}

// ---- Checkpoint container ----
// Layout: "MCCK" | u32 version | u64 json_len | json | u32 blob_count |
// per blob: u16 name_len | name | u32 dims[4] | f32 data (little endian).

namespace {

template <typename V>
void write_pod(std::ostream& out, V v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& in) {
    V v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(V));
    return v;
}

} // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path.string());
    json meta;
    meta["spec"] = spec_to_json(ckpt.spec);
    meta["config"] = train_config_to_json(ckpt.config);
    meta["epoch"] = ckpt.epoch;
    meta["g_steps"] = ckpt.g_steps;
    meta["adam_g_steps"] = ckpt.adam_g_steps;
    meta["adam_d_steps"] = ckpt.adam_d_steps;
    meta["rng"] = {{"scheme", "per-epoch-derived"}, {"seed", ckpt.config.seed}};
    const std::string meta_str = meta.dump();

    out.write("MCCK", 4);
    write_pod<uint32_t>(out, 1);
    write_pod<uint64_t>(out, meta_str.size());
    out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    write_pod<uint32_t>(out, static_cast<uint32_t>(ckpt.blobs.size()));
    for (const auto& [name, blob] : ckpt.blobs) {
        write_pod<uint16_t>(out, static_cast<uint16_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<uint32_t>(out, static_cast<uint32_t>(blob.n));
        write_pod<uint32_t>(out, static_cast<uint32_t>(blob.c));
        write_pod<uint32_t>(out, static_cast<uint32_t>(blob.h));
        write_pod<uint32_t>(out, static_cast<uint32_t>(blob.w));
        out.write(reinterpret_cast<const char*>(blob.data.data()),
                  static_cast<std::streamsize>(blob.size() * sizeof(float)));
    }
    if (!out) throw IoError("checkpoint write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "MCCK", 4) != 0)
        throw DataError("not a checkpoint file: " + path.string());
    const auto version = read_pod<uint32_t>(in);
    if (version != 1) throw DataError("unsupported checkpoint version");
    const auto meta_len = read_pod<uint64_t>(in);
    std::string meta_str(meta_len, '\0');
    in.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
    json meta = json::parse(meta_str);

    Checkpoint ckpt;
    ckpt.spec = spec_from_json(meta.at("spec"));
    ckpt.config = train_config_from_json(meta.at("config"));
    ckpt.epoch = meta.at("epoch");
    ckpt.g_steps = meta.at("g_steps");
    ckpt.adam_g_steps = meta.at("adam_g_steps");
    ckpt.adam_d_steps = meta.at("adam_d_steps");

    const auto count = read_pod<uint32_t>(in);
    for (uint32_t i = 0; i < count; ++i) {
        const auto name_len = read_pod<uint16_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const int n = static_cast<int>(read_pod<uint32_t>(in));
        const int c = static_cast<int>(read_pod<uint32_t>(in));
        const int h = static_cast<int>(read_pod<uint32_t>(in));
        const int w = static_cast<int>(read_pod<uint32_t>(in));
        nn::Tensor<float> blob(n, c, h, w);
        in.read(reinterpret_cast<char*>(blob.data.data()),
                static_cast<std::streamsize>(blob.size() * sizeof(float)));
        ckpt.blobs.emplace(std::move(name), std::move(blob));
    }
    if (!in) throw DataError("truncated checkpoint: " + path.string());
    return ckpt;
}

} // namespace mcrm::mcgan
