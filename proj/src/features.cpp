#include "mcrm/features.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <random>
#include <variant>

#include "mcrm/errors.hpp"
#include "mcrm/nn/layers.hpp"

using nlohmann::json;

namespace mcrm::embed {

std::vector<float> HistogramExtractor::extract(const raster::BandImage& tile) const {
    if (tile.bands < 3) throw DataError("feature extraction needs at least 3 bands");
    std::vector<float> out(dim(), 0.0f);
    const float maxv = tile.max_value();
    const float npix = static_cast<float>(tile.pixel_count());
    for (int c = 0; c < 3; ++c) {
        const float* plane = tile.band_ptr(c);
        for (size_t i = 0; i < tile.pixel_count(); ++i) {
            int bin = static_cast<int>(plane[i] / (maxv + 1.0f) * kBinsPerChannel);
            bin = std::clamp(bin, 0, kBinsPerChannel - 1);
            out[c * kBinsPerChannel + bin] += 1.0f / npix;
        }
    }
    // Sobel gradient-orientation histogram over the RGB mean, magnitude
    // weighted.
    const int w = tile.width, h = tile.height;
    auto gray = [&](int y, int x) {
        return (tile.at(0, y, x) + tile.at(1, y, x) + tile.at(2, y, x)) / 3.0f;
    };
    float total = 0.0f;
    std::vector<float> orient(kOrientationBins, 0.0f);
    for (int y = 1; y + 1 < h; ++y) {
        for (int x = 1; x + 1 < w; ++x) {
            const float gx = gray(y - 1, x + 1) + 2 * gray(y, x + 1) + gray(y + 1, x + 1) -
                             gray(y - 1, x - 1) - 2 * gray(y, x - 1) - gray(y + 1, x - 1);
            const float gy = gray(y + 1, x - 1) + 2 * gray(y + 1, x) + gray(y + 1, x + 1) -
                             gray(y - 1, x - 1) - 2 * gray(y - 1, x) - gray(y - 1, x + 1);
            const float mag = std::hypot(gx, gy);
            if (mag <= 0.0f) continue;
            const float theta = std::atan2(gy, gx); // [-pi, pi]
            int bin = static_cast<int>((theta + static_cast<float>(M_PI)) /
                                       (2.0f * static_cast<float>(M_PI)) * kOrientationBins);
            bin = std::clamp(bin, 0, kOrientationBins - 1);
            orient[bin] += mag;
            total += mag;
        }
    }
    if (total > 0.0f)
        for (int i = 0; i < kOrientationBins; ++i)
            out[3 * kBinsPerChannel + i] = orient[i] / total;
    return out;
}

// ---- CNN extractor ----

namespace {

struct FeatureNet {
    json spec;
    int input_side = 0;
    int input_channels = 3;
    int feature_dim = 0;
    std::string name;
    std::vector<std::variant<nn::Conv2d<float>, nn::MaxPool2d<float>, nn::Dense<float>,
                             nn::Activation<float>>>
        layers;
};

struct ShapeState {
    int c = 0, h = 0, w = 0;
    int flat() const { return c * h * w; }
};

void walk_net_spec(const json& net_spec,
                   const std::function<void(const json&, const ShapeState&, ShapeState&)>& visit,
                   ShapeState& shape) {
    shape = {net_spec.value("input_channels", 3), net_spec.at("input_side").get<int>(),
             net_spec.at("input_side").get<int>()};
    for (const auto& layer : net_spec.at("layers")) {
        ShapeState next = shape;
        const std::string op = layer.at("op");
        if (op == "conv") {
            const int k = layer.at("kernel"), s = layer.value("stride", 1),
                      p = layer.value("pad", 0);
            next.c = layer.at("filters");
            next.h = nn::conv_out_side(shape.h, k, s, p);
            next.w = nn::conv_out_side(shape.w, k, s, p);
        } else if (op == "maxpool") {
            const int k = layer.at("kernel"), s = layer.value("stride", 2);
            next.h = (shape.h - k) / s + 1;
            next.w = (shape.w - k) / s + 1;
        } else if (op == "dense") {
            next.c = layer.at("units");
            next.h = next.w = 1;
        } else if (op == "relu") {
            // shape preserved
        } else {
            throw ConfigError("unknown feature net op: " + op);
        }
        if (next.h <= 0 || next.w <= 0) throw ConfigError("feature net collapses below 1x1");
        visit(layer, shape, next);
        shape = next;
    }
}

FeatureNet build_feature_net(const json& net_spec) {
    FeatureNet net;
    net.spec = net_spec;
    net.input_side = net_spec.at("input_side");
    net.input_channels = net_spec.value("input_channels", 3);
    net.name = net_spec.value("name", "feature-net");
    ShapeState shape;
    int index = 0;
    walk_net_spec(
        net_spec,
        [&](const json& layer, const ShapeState& in, const ShapeState&) {
            const std::string op = layer.at("op");
            const std::string lname = "f" + std::to_string(index++);
            if (op == "conv")
                net.layers.emplace_back(std::in_place_type<nn::Conv2d<float>>, lname, in.c,
                                        layer.at("filters").get<int>(),
                                        layer.at("kernel").get<int>(), layer.value("stride", 1),
                                        layer.value("pad", 0));
            else if (op == "maxpool")
                net.layers.emplace_back(std::in_place_type<nn::MaxPool2d<float>>,
                                        layer.at("kernel").get<int>(), layer.value("stride", 2));
            else if (op == "dense")
                net.layers.emplace_back(std::in_place_type<nn::Dense<float>>, lname, in.flat(),
                                        layer.at("units").get<int>());
            else if (op == "relu")
                net.layers.emplace_back(std::in_place_type<nn::Activation<float>>, nn::Act::Relu,
                                        0.0f);
        },
        shape);
    net.feature_dim = shape.flat();
    return net;
}

std::vector<nn::ParamRef<float>> net_params(FeatureNet& net) {
    std::vector<nn::ParamRef<float>> refs;
    for (auto& layer : net.layers)
        std::visit(
            [&](auto& l) {
                using L = std::decay_t<decltype(l)>;
                if constexpr (std::is_same_v<L, nn::Conv2d<float>> ||
                              std::is_same_v<L, nn::Dense<float>>)
                    l.params(refs);
            },
            layer);
    return refs;
}

constexpr char kFeatureMagic[4] = {'M', 'C', 'F', 'N'};

} // namespace

int feature_net_output_dim(const json& net_spec) {
    ShapeState shape;
    walk_net_spec(net_spec, [](const json&, const ShapeState&, ShapeState&) {}, shape);
    return shape.flat();
}

json alexnet_fc7_spec() {
    json spec;
    spec["name"] = "alexnet-fc7";
    spec["input_side"] = 227;
    spec["input_channels"] = 3;
    spec["layers"] = json::array({
        json{{"op", "conv"}, {"filters", 96}, {"kernel", 11}, {"stride", 4}, {"pad", 0}},
        json{{"op", "relu"}},
        json{{"op", "maxpool"}, {"kernel", 3}, {"stride", 2}},
        json{{"op", "conv"}, {"filters", 256}, {"kernel", 5}, {"stride", 1}, {"pad", 2}},
        json{{"op", "relu"}},
        json{{"op", "maxpool"}, {"kernel", 3}, {"stride", 2}},
        json{{"op", "conv"}, {"filters", 384}, {"kernel", 3}, {"stride", 1}, {"pad", 1}},
        json{{"op", "relu"}},
        json{{"op", "conv"}, {"filters", 384}, {"kernel", 3}, {"stride", 1}, {"pad", 1}},
        json{{"op", "relu"}},
        json{{"op", "conv"}, {"filters", 256}, {"kernel", 3}, {"stride", 1}, {"pad", 1}},
        json{{"op", "relu"}},
        json{{"op", "maxpool"}, {"kernel", 3}, {"stride", 2}},
        json{{"op", "dense"}, {"units", 4096}},
        json{{"op", "relu"}},
        json{{"op", "dense"}, {"units", 4096}},
        json{{"op", "relu"}},
    });
    return spec;
}

struct CnnFeatureExtractor::Impl {
    FeatureNet net;
};

CnnFeatureExtractor::CnnFeatureExtractor(const std::filesystem::path& weights_path)
    : impl_(std::make_unique<Impl>()) {
    std::ifstream in(weights_path, std::ios::binary);
    if (!in) throw IoError("cannot read feature weights: " + weights_path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kFeatureMagic, 4) != 0)
        throw DataError("not a feature weights file: " + weights_path.string());
    uint64_t json_len = 0;
    in.read(reinterpret_cast<char*>(&json_len), sizeof(json_len));
    std::string meta(json_len, '\0');
    in.read(meta.data(), static_cast<std::streamsize>(json_len));
    impl_->net = build_feature_net(json::parse(meta));
    for (auto& ref : net_params(impl_->net)) {
        uint32_t dims[4];
        in.read(reinterpret_cast<char*>(dims), sizeof(dims));
        nn::Tensor<float> blob(static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                               static_cast<int>(dims[2]), static_cast<int>(dims[3]));
        if (!blob.same_shape(*ref.value))
            throw DataError("feature weights shape mismatch at " + ref.name);
        in.read(reinterpret_cast<char*>(blob.data.data()),
                static_cast<std::streamsize>(blob.size() * sizeof(float)));
        *ref.value = std::move(blob);
    }
    if (!in) throw DataError("truncated feature weights: " + weights_path.string());
}

CnnFeatureExtractor::~CnnFeatureExtractor() = default;

int CnnFeatureExtractor::dim() const { return impl_->net.feature_dim; }
std::string CnnFeatureExtractor::id() const { return impl_->net.name; }

std::vector<float> CnnFeatureExtractor::extract(const raster::BandImage& tile) const {
    if (tile.bands < 3) throw DataError("feature extraction needs at least 3 bands");
    raster::BandImage rgb(tile.width, tile.height, 3, tile.value_depth);
    for (int c = 0; c < 3; ++c)
        std::copy(tile.band_ptr(c), tile.band_ptr(c) + tile.pixel_count(), rgb.band_ptr(c));
    const raster::BandImage resized =
        (tile.width == impl_->net.input_side && tile.height == impl_->net.input_side)
            ? rgb
            : raster::resize_bilinear(rgb, impl_->net.input_side, impl_->net.input_side);

    nn::Tensor<float> x(1, 3, resized.height, resized.width);
    const float maxv = resized.max_value();
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < resized.height; ++y)
            for (int xx = 0; xx < resized.width; ++xx)
                x.at(0, c, y, xx) = 2.0f * resized.at(c, y, xx) / maxv - 1.0f;

    nn::RunCtx ctx{false, nullptr};
    for (auto& layer : impl_->net.layers)
        std::visit([&](auto& l) { x = l.forward(x, ctx); }, layer);
    return x.data;
}

void CnnFeatureExtractor::save_random(const json& net_spec,
                                      const std::filesystem::path& weights_path, uint64_t seed) {
    FeatureNet net = build_feature_net(net_spec);
    std::mt19937_64 rng(seed);
    auto refs = net_params(net);
    for (auto& ref : refs) ref.value->fill_normal(rng, 0.0f, 0.05f);

    if (weights_path.has_parent_path())
        std::filesystem::create_directories(weights_path.parent_path());
    std::ofstream out(weights_path, std::ios::binary);
    if (!out) throw IoError("cannot write feature weights: " + weights_path.string());
    out.write(kFeatureMagic, 4);
    const std::string meta = net_spec.dump();
    const uint64_t json_len = meta.size();
    out.write(reinterpret_cast<const char*>(&json_len), sizeof(json_len));
    out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    for (auto& ref : refs) {
        const uint32_t dims[4] = {
            static_cast<uint32_t>(ref.value->n), static_cast<uint32_t>(ref.value->c),
            static_cast<uint32_t>(ref.value->h), static_cast<uint32_t>(ref.value->w)};
        out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
        out.write(reinterpret_cast<const char*>(ref.value->data.data()),
                  static_cast<std::streamsize>(ref.value->size() * sizeof(float)));
    }
    if (!out) throw IoError("feature weights write failed");
}

// ---- feature cache ----

void write_feature_cache(const std::filesystem::path& dir, const std::string& extractor_id,
                         int dim, const std::vector<FeatureVector>& features) {
    std::filesystem::create_directories(dir);
    std::ofstream bin(dir / "features.bin", std::ios::binary);
    if (!bin) throw IoError("cannot write feature cache");
    json index;
    index["extractor"] = extractor_id;
    index["dim"] = dim;
    index["count"] = features.size();
    json ids = json::array();
    for (const auto& f : features) {
        if (static_cast<int>(f.values.size()) != dim)
            throw DataError("feature vector dimension mismatch for " + f.tile_id);
        for (float v : f.values)
            if (!std::isfinite(v)) throw DataError("non-finite feature value in " + f.tile_id);
        bin.write(reinterpret_cast<const char*>(f.values.data()),
                  static_cast<std::streamsize>(f.values.size() * sizeof(float)));
        ids.push_back(f.tile_id);
    }
    index["tile_ids"] = std::move(ids);
    std::ofstream idx(dir / "features.json");
    idx << index.dump(2) << "\n";
    if (!bin || !idx) throw IoError("feature cache write failed");
}

FeatureCache read_feature_cache(const std::filesystem::path& dir) {
    std::ifstream idx(dir / "features.json");
    if (!idx) throw IoError("cannot read feature cache index");
    json index = json::parse(idx);
    FeatureCache cache;
    cache.extractor_id = index.at("extractor");
    cache.dim = index.at("dim");
    cache.tile_ids = index.at("tile_ids").get<std::vector<std::string>>();

    std::ifstream bin(dir / "features.bin", std::ios::binary);
    if (!bin) throw IoError("cannot read feature cache data");
    cache.data.resize(cache.tile_ids.size() * static_cast<size_t>(cache.dim));
    bin.read(reinterpret_cast<char*>(cache.data.data()),
             static_cast<std::streamsize>(cache.data.size() * sizeof(float)));
    if (!bin) throw DataError("feature cache truncated");
    return cache;
}

} // namespace mcrm::embed
