#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcrm/nn/tensor.hpp"
#include "mcrm/raster.hpp"

namespace mcrm::embed {

struct FeatureVector {
    std::string tile_id;
    std::vector<float> values;
};

class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual int dim() const = 0;
    virtual std::string id() const = 0;
    // Uses the first three bands of the tile.
    virtual std::vector<float> extract(const raster::BandImage& tile) const = 0;
};

// Weight-free fallback: per-channel intensity histograms concatenated with a
// gradient-orientation histogram.
class HistogramExtractor : public FeatureExtractor {
public:
    static constexpr int kBinsPerChannel = 64;
    static constexpr int kOrientationBins = 36;

    int dim() const override { return 3 * kBinsPerChannel + kOrientationBins; }
    std::string id() const override { return "histogram-v1"; }
    std::vector<float> extract(const raster::BandImage& tile) const override;
};

// Feed-forward feature network loaded from a serialized weights file. The
// file carries its own layer description; tiles are resized to the declared
// input side and the final layer activations become the feature vector.
class CnnFeatureExtractor : public FeatureExtractor {
public:
    explicit CnnFeatureExtractor(const std::filesystem::path& weights_path);
    ~CnnFeatureExtractor() override;

    int dim() const override;
    std::string id() const override;
    std::vector<float> extract(const raster::BandImage& tile) const override;

    // Writes a weights file with randomly initialized parameters for the
    // given net description; the production path loads converted pretrained
    // weights through the same container.
    static void save_random(const nlohmann::json& net_spec,
                            const std::filesystem::path& weights_path, uint64_t seed);

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// Canned description of the classic 8-layer ImageNet classifier up to its
// penultimate fully connected layer (4096 activations).
nlohmann::json alexnet_fc7_spec();

// Output dimension by pure shape propagation; no weights are allocated.
int feature_net_output_dim(const nlohmann::json& net_spec);

// Flat binary feature cache: features.bin holds row-major float32 vectors,
// features.json carries extractor id, dimension and tile id order.
void write_feature_cache(const std::filesystem::path& dir, const std::string& extractor_id,
                         int dim, const std::vector<FeatureVector>& features);

struct FeatureCache {
    std::string extractor_id;
    int dim = 0;
    std::vector<std::string> tile_ids;
    std::vector<float> data; // tile_ids.size() x dim
};

FeatureCache read_feature_cache(const std::filesystem::path& dir);

} // namespace mcrm::embed
