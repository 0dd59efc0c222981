#include "mcrm/evalsuite.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "mcrm/errors.hpp"

using nlohmann::json;

namespace mcrm::evalsuite {

double mae(const raster::BandImage& reference, const raster::BandImage& candidate) {
    if (!reference.same_shape(candidate)) throw DataError("mae shape mismatch");
    double sum = 0.0;
    for (size_t i = 0; i < reference.data.size(); ++i)
        sum += std::abs(static_cast<double>(reference.data[i]) - candidate.data[i]);
    return sum / static_cast<double>(reference.data.size());
}

PsnrResult psnr(const raster::BandImage& reference, const raster::BandImage& candidate) {
    if (!reference.same_shape(candidate)) throw DataError("psnr shape mismatch");
    if (reference.value_depth != candidate.value_depth)
        throw DataError("psnr value depth mismatch");
    double mse = 0.0;
    for (size_t i = 0; i < reference.data.size(); ++i) {
        const double d = static_cast<double>(reference.data[i]) - candidate.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(reference.data.size());
    if (mse == 0.0) return {0.0, true};
    const double maxv = reference.max_value();
    return {10.0 * std::log10(maxv * maxv / mse), false};
}

MaskMetrics mask_metrics(std::span<const float> true_alpha, std::span<const float> predicted) {
    if (true_alpha.size() != predicted.size()) throw DataError("mask_metrics shape mismatch");
    const size_t n = true_alpha.size();
    if (n == 0) throw DataError("mask_metrics on empty input");

    double mean_t = 0.0, mean_p = 0.0;
    for (size_t i = 0; i < n; ++i) {
        mean_t += true_alpha[i];
        mean_p += predicted[i];
    }
    mean_t /= static_cast<double>(n);
    mean_p /= static_cast<double>(n);
    double cov = 0.0, var_t = 0.0, var_p = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double dt = true_alpha[i] - mean_t;
        const double dp = predicted[i] - mean_p;
        cov += dt * dp;
        var_t += dt * dt;
        var_p += dp * dp;
    }

    MaskMetrics out;
    if (var_t > 0.0 && var_p > 0.0) {
        out.corr = cov / std::sqrt(var_t * var_p);
        out.corr_defined = true;
    }
    size_t inter = 0, uni = 0;
    for (size_t i = 0; i < n; ++i) {
        const bool a = true_alpha[i] >= 0.5f;
        const bool b = predicted[i] >= 0.5f;
        inter += a && b;
        uni += a || b;
    }
    out.iou = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    return out;
}

EvalRecord evaluate_group(const cloudsim::TileGroup& group, const raster::BandImage& pred_rgb,
                          const raster::BandImage& pred_mask) {
    EvalRecord rec;
    rec.group_id = group.group_id;
    rec.mae_rgb = mae(group.target_rgb.image, pred_rgb);
    const PsnrResult p = psnr(group.target_rgb.image, pred_rgb);
    rec.psnr = p.db;
    rec.psnr_infinite = p.infinite;

    std::vector<float> truth(group.mask.pixel_count()), pred(pred_mask.pixel_count());
    const float tmax = group.mask.max_value();
    const float pmax = pred_mask.max_value();
    for (size_t i = 0; i < truth.size(); ++i) truth[i] = group.mask.data[i] / tmax;
    for (size_t i = 0; i < pred.size(); ++i) pred[i] = pred_mask.data[i] / pmax;
    const MaskMetrics m = mask_metrics(truth, pred);
    rec.mask_corr = m.corr;
    rec.mask_corr_defined = m.corr_defined;
    rec.mask_iou = m.iou;
    return rec;
}

void write_report(const std::vector<EvalRecord>& records, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report: " + path.string());
    double sum_mae = 0.0, sum_psnr = 0.0, sum_corr = 0.0, sum_iou = 0.0;
    size_t psnr_count = 0, corr_count = 0;
    for (const auto& rec : records) {
        json j;
        j["group_id"] = rec.group_id;
        j["mae_rgb"] = rec.mae_rgb;
        if (rec.psnr_infinite)
            j["psnr"] = nullptr;
        else {
            j["psnr"] = rec.psnr;
            sum_psnr += rec.psnr;
            ++psnr_count;
        }
        if (rec.mask_corr_defined) {
            j["mask_corr"] = rec.mask_corr;
            sum_corr += rec.mask_corr;
            ++corr_count;
        } else {
            j["mask_corr"] = nullptr;
        }
        j["mask_iou"] = rec.mask_iou;
        sum_mae += rec.mae_rgb;
        sum_iou += rec.mask_iou;
        out << j.dump() << "\n";
    }
    json summary;
    summary["summary"] = true;
    summary["count"] = records.size();
    if (!records.empty()) {
        summary["mean_mae_rgb"] = sum_mae / static_cast<double>(records.size());
        summary["mean_psnr"] = psnr_count ? json(sum_psnr / static_cast<double>(psnr_count))
                                          : json(nullptr);
        summary["mean_mask_corr"] = corr_count ? json(sum_corr / static_cast<double>(corr_count))
                                               : json(nullptr);
        summary["mean_mask_iou"] = sum_iou / static_cast<double>(records.size());
    }
    out << summary.dump() << "\n";
}

// ---- panels ----

namespace {

// 5x7 glyphs, one bit per pixel, rows top to bottom.
const std::map<char, std::array<uint8_t, 7>>& glyphs() {
    static const std::map<char, std::array<uint8_t, 7>> table = {
        {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
        {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
        {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
        {'D', {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E}},
        {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
        {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
        {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}},
        {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
        {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
        {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
        {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
        {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
        {'N', {0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11}},
        {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
        {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
        {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
        {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
        {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
        {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
        {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
        {' ', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00}},
    };
    return table;
}

void draw_text(raster::BandImage& img, int row, int col, const std::string& text) {
    const auto& table = glyphs();
    int x = col;
    for (char ch : text) {
        const auto it = table.find(ch);
        if (it != table.end()) {
            for (int gy = 0; gy < 7; ++gy)
                for (int gx = 0; gx < 5; ++gx)
                    if (it->second[gy] & (1 << (4 - gx))) {
                        const int yy = row + gy, xx = x + gx;
                        if (yy >= 0 && yy < img.height && xx >= 0 && xx < img.width)
                            for (int c = 0; c < img.bands; ++c) img.at(c, yy, xx) = 255.0f;
                    }
        }
        x += 6;
    }
}

raster::BandImage to_rgb8(const raster::BandImage& img) {
    raster::BandImage out(img.width, img.height, 3, 8);
    const float scale = 255.0f / img.max_value();
    for (int c = 0; c < 3; ++c) {
        const int src = img.bands >= 3 ? c : 0;
        for (size_t i = 0; i < img.pixel_count(); ++i)
            out.band_ptr(c)[i] = std::round(img.band_ptr(src)[i] * scale);
    }
    return out;
}

constexpr int kLabelBar = 12;

} // namespace

raster::BandImage render_panel(const std::vector<PanelColumn>& columns, int margin) {
    if (columns.empty()) throw DataError("panel needs at least one column");
    const int side_h = columns[0].image.height;
    int width = margin * (static_cast<int>(columns.size()) - 1);
    for (const auto& col : columns) {
        if (col.image.height != side_h || col.image.width != columns[0].image.width)
            throw DataError("panel columns must share dimensions");
        width += col.image.width;
    }
    raster::BandImage panel(width, side_h + kLabelBar, 3, 8);
    int x0 = 0;
    for (const auto& col : columns) {
        std::string label;
        for (char ch : col.label)
            label.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
        draw_text(panel, 2, x0 + 2, label);
        const raster::BandImage rgb = to_rgb8(col.image);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < side_h; ++y)
                std::memcpy(&panel.at(c, y + kLabelBar, x0),
                            rgb.band_ptr(c) + static_cast<size_t>(y) * rgb.width,
                            sizeof(float) * static_cast<size_t>(rgb.width));
        x0 += col.image.width + margin;
    }
    return panel;
}

raster::BandImage synth_panel(const cloudsim::TileGroup& group,
                              const raster::BandImage& pred_rgb,
                              const raster::BandImage& pred_mask, int margin) {
    return render_panel({{"RGB", group.cloudy_rgb.image},
                         {"NIR", group.nir.image},
                         {"Cloud-free RGB", pred_rgb},
                         {"Ground truth", group.target_rgb.image},
                         {"Cloud mask", pred_mask}},
                        margin);
}

raster::BandImage real_panel(const raster::BandImage& cloudy_rgb, const raster::BandImage& nir,
                             const raster::BandImage& pred_rgb,
                             const raster::BandImage& nir2rgb,
                             const raster::BandImage& pred_mask, int margin) {
    return render_panel({{"RGB", cloudy_rgb},
                         {"NIR", nir},
                         {"Cloud-free RGB", pred_rgb},
                         {"NIR2RGB", nir2rgb},
                         {"Cloud mask", pred_mask}},
                        margin);
}

} // namespace mcrm::evalsuite
