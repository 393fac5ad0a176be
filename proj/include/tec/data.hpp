// SPDX-License-Identifier: Apache-2.0
//
// Synthetic corpus generation, the TECIMG1 raw image format, epoch batching
// and the crop-and-resize augmentation.
//
// TECIMG1 layout: 7-byte magic "TECIMG1", u32 LE channels, height, width,
// then channels*height*width f32 LE pixels in planar (channel-major) order.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "tec/checkpoint.hpp"
#include "tec/rng.hpp"
#include "tec/tensor.hpp"

namespace tec {

struct CorpusConfig {
    std::size_t n_images = 2048;
    std::size_t image_size = 32;
    std::size_t channels = 3;
    std::size_t n_classes = 8;
    std::uint64_t seed = 0;
};

struct ImageRecord {
    std::string id;
    Tensor pixels; // channels x H x W, values in [0, 1]
    int label = -1; // latent class, diagnostics only
};

using Corpus = std::vector<ImageRecord>;

namespace detail {

inline double class_color(std::size_t cls, std::size_t n_classes, std::size_t ch, double phase) {
    const double t = static_cast<double>(cls) / static_cast<double>(n_classes);
    return 0.5 + 0.45 * std::sin(2.0 * std::numbers::pi * (t + static_cast<double>(ch) / 3.0) + phase);
}

/// Clamped to [0, 1] and rounded to f32 so TECIMG1 round trips are exact.
inline double clamp_pixel(double v) { return static_cast<double>(static_cast<float>(std::clamp(v, 0.0, 1.0))); }

} // namespace detail

/// Image `index` of the synthetic corpus: a class-oriented grating with soft
/// blobs as background, one localized foreground object in a class colour
/// and shape, plus pixel noise.
inline ImageRecord synth_image(const CorpusConfig& cfg, std::size_t index) {
    Rng rng(derive_seed(cfg.seed, index));
    const std::size_t s = cfg.image_size, nc = cfg.channels;
    const std::size_t cls = static_cast<std::size_t>(rng.below(cfg.n_classes));
    const double sd = static_cast<double>(s);

    const double theta = std::numbers::pi * static_cast<double>(cls) / static_cast<double>(cfg.n_classes);
    const double freq = 2.0 * std::numbers::pi * (0.75 + 0.5 * static_cast<double>(cls % 3)) / sd;
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

    struct Blob {
        double x, y, sigma, amp;
    };
    std::vector<Blob> blobs(2 + rng.below(2));
    for (auto& b : blobs) b = {rng.uniform(0, sd), rng.uniform(0, sd), rng.uniform(4.0, 8.0), rng.uniform(-0.2, 0.2)};

    const double radius = rng.uniform(0.16, 0.24) * sd;
    const double cx = rng.uniform(radius, sd - radius), cy = rng.uniform(radius, sd - radius);
    const bool disc = cls % 2 == 0;
    const double stripe = 2.0 * std::numbers::pi / (3.0 + static_cast<double>(cls % 4));

    std::vector<double> px(nc * s * s);
    for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
            const double xf = static_cast<double>(x) + 0.5, yf = static_cast<double>(y) + 0.5;
            const double g = std::sin(freq * (xf * std::cos(theta) + yf * std::sin(theta)) + phase);
            double blob = 0.0;
            for (const auto& b : blobs)
                blob += b.amp * std::exp(-((xf - b.x) * (xf - b.x) + (yf - b.y) * (yf - b.y)) / (2 * b.sigma * b.sigma));
            const double dx = xf - cx, dy = yf - cy;
            const bool inside = disc ? dx * dx + dy * dy <= radius * radius
                                     : std::abs(dx) <= radius * 0.9 && std::abs(dy) <= radius * 0.9;
            for (std::size_t ch = 0; ch < nc; ++ch) {
                double v = 0.45 + 0.25 * g * detail::class_color(cls, cfg.n_classes, ch, 0.0) + blob;
                if (inside) {
                    const double pattern = 0.5 + 0.5 * std::sin(stripe * (dx + dy));
                    v = 0.25 + 0.7 * detail::class_color(cls, cfg.n_classes, ch, 1.0) * (0.6 + 0.4 * pattern);
                }
                v += rng.normal(0.0, 0.01);
                px[ch * s * s + y * s + x] = detail::clamp_pixel(v);
            }
        }
    ImageRecord rec;
    // Zero-padded so lexicographic file order matches generation order.
    std::string num = std::to_string(index);
    rec.id = "img" + std::string(num.size() < 6 ? 6 - num.size() : 0, '0') + num;
    rec.pixels = Tensor({nc, s, s}, std::move(px));
    rec.label = static_cast<int>(cls);
    return rec;
}

inline Corpus gen_synthetic(const CorpusConfig& cfg) {
    Corpus c;
    c.reserve(cfg.n_images);
    for (std::size_t i = 0; i < cfg.n_images; ++i) c.push_back(synth_image(cfg, i));
    return c;
}

/// Uniform noise image with no structure (used as a low-saliency control).
inline Tensor noise_image(std::size_t size, std::size_t channels, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> px(channels * size * size);
    for (auto& v : px) v = static_cast<double>(static_cast<float>(rng.uniform()));
    return Tensor({channels, size, size}, std::move(px));
}

// -------------------------------------------------------------- TECIMG1 files

inline constexpr char kImageMagic[7] = {'T', 'E', 'C', 'I', 'M', 'G', '1'};

inline std::string encode_image(const Tensor& pixels) {
    if (pixels.dim() != 3) throw DimensionError("images are channels x H x W");
    std::string out(kImageMagic, 7);
    for (std::size_t d = 0; d < 3; ++d) detail::put_u32(out, static_cast<std::uint32_t>(pixels.size(static_cast<int>(d))));
    for (double v : pixels.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    return out;
}

inline Tensor decode_image(const std::string& bytes, const std::string& origin) {
    if (bytes.size() < 19 || std::memcmp(bytes.data(), kImageMagic, 7) != 0)
        throw IngestionError(origin + ": bad magic (expected TECIMG1)");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::size_t c = detail::get_u32(p + 7), h = detail::get_u32(p + 11), w = detail::get_u32(p + 15);
    if (c == 0 || h == 0 || w == 0) throw IngestionError(origin + ": zero image extent");
    const std::size_t n = c * h * w;
    if (bytes.size() != 19 + 4 * n) throw IngestionError(origin + ": truncated or oversized pixel payload");
    std::vector<double> px(n);
    for (std::size_t i = 0; i < n; ++i) px[i] = static_cast<double>(std::bit_cast<float>(detail::get_u32(p + 19 + 4 * i)));
    return Tensor({c, h, w}, std::move(px));
}

inline void write_image(const std::filesystem::path& path, const Tensor& pixels) {
    detail::write_file(path, encode_image(pixels));
}

inline Tensor read_image(const std::filesystem::path& path) {
    return decode_image(detail::read_file(path), path.string());
}

/// Writes `dir/<id>.teci` for every record.
inline void write_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
    std::filesystem::create_directories(dir);
    for (const auto& r : corpus) write_image(dir / (r.id + ".teci"), r.pixels);
}

/// Lazily read directory of .teci files, in lexicographic filename order.
class ImageDirectory {
public:
    explicit ImageDirectory(const std::filesystem::path& dir) : dir_(dir) {
        std::error_code ec;
        if (!std::filesystem::is_directory(dir, ec)) throw IngestionError(dir.string() + ": not a directory");
        for (const auto& e : std::filesystem::directory_iterator(dir))
            if (e.is_regular_file() && e.path().extension() == ".teci") files_.push_back(e.path());
        if (files_.empty()) throw IngestionError(dir.string() + ": no .teci images found");
        std::sort(files_.begin(), files_.end());
    }

    std::size_t size() const { return files_.size(); }
    const std::filesystem::path& path(std::size_t i) const { return files_.at(i); }

    ImageRecord read(std::size_t i) const {
        ImageRecord r;
        r.id = files_.at(i).stem().string();
        r.pixels = read_image(files_[i]);
        return r;
    }

    /// Seeded permutation of [0, size) for `epoch`.
    std::vector<std::size_t> epoch_order(std::size_t epoch, std::uint64_t seed) const {
        std::vector<std::size_t> order(size());
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(seed, epoch));
        rng.shuffle(order);
        return order;
    }

private:
    std::filesystem::path dir_;
    std::vector<std::filesystem::path> files_;
};

inline Corpus load_dir(const std::filesystem::path& dir) {
    ImageDirectory d(dir);
    Corpus c;
    c.reserve(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) c.push_back(d.read(i));
    return c;
}

/// Partition of a seeded permutation of [0, n) into consecutive batches; the
/// final batch may be short.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::size_t epoch,
                                                           std::uint64_t seed) {
    if (batch == 0) throw ConfigError("batch size must be positive");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, epoch));
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < n; i += batch)
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch)));
    return out;
}

/// Random crop covering `scale` of the area with aspect ratio in [3/4, 4/3],
/// resized back to the input size with bilinear sampling.
inline Tensor random_resized_crop(const Tensor& image, Rng& rng, double min_scale = 0.6, double max_scale = 1.0) {
    const std::size_t c = image.size(0), h = image.size(1), w = image.size(2);
    const double area = static_cast<double>(h * w);
    double cw = static_cast<double>(w), ch = static_cast<double>(h);
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * rng.uniform(min_scale, max_scale);
        const double ratio = std::exp(rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0)));
        const double tw = std::sqrt(target * ratio), th = std::sqrt(target / ratio);
        if (tw <= static_cast<double>(w) && th <= static_cast<double>(h)) {
            cw = tw;
            ch = th;
            break;
        }
    }
    const double x0 = rng.uniform(0.0, static_cast<double>(w) - cw);
    const double y0 = rng.uniform(0.0, static_cast<double>(h) - ch);
    std::vector<double> out(c * h * w);
    const auto& in = image.values();
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double sx = std::clamp(x0 + (static_cast<double>(x) + 0.5) * cw / static_cast<double>(w) - 0.5, 0.0,
                                         static_cast<double>(w - 1));
            const double sy = std::clamp(y0 + (static_cast<double>(y) + 0.5) * ch / static_cast<double>(h) - 0.5, 0.0,
                                         static_cast<double>(h - 1));
            const auto ix = static_cast<std::size_t>(sx), iy = static_cast<std::size_t>(sy);
            const std::size_t ix1 = std::min(ix + 1, w - 1), iy1 = std::min(iy + 1, h - 1);
            const double fx = sx - static_cast<double>(ix), fy = sy - static_cast<double>(iy);
            for (std::size_t k = 0; k < c; ++k) {
                const double* p = in.data() + k * h * w;
                const double top = p[iy * w + ix] * (1 - fx) + p[iy * w + ix1] * fx;
                const double bot = p[iy1 * w + ix] * (1 - fx) + p[iy1 * w + ix1] * fx;
                out[k * h * w + y * w + x] = top * (1 - fy) + bot * fy;
            }
        }
    return Tensor({c, h, w}, std::move(out));
}

} // namespace tec
