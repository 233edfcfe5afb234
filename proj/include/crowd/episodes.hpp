#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "crowd/density.hpp"
#include "crowd/errors.hpp"
#include "crowd/image.hpp"
#include "crowd/rng.hpp"

namespace crowd {

struct Scene {
    std::string scene_id;
    std::vector<std::pair<Image, PointAnnotation>> images;
    std::optional<RoiMask> roi;
};

struct Episode {
    std::string scene_id;
    Image support_image;
    PointAnnotation support_ann;
    std::vector<std::pair<Image, PointAnnotation>> queries;
};

inline Episode sample_episode(const Scene& scene, Rng& rng) {
    if (scene.images.size() < 2)
        throw SceneTooSmall("scene '" + scene.scene_id + "' has " +
                            std::to_string(scene.images.size()) +
                            " images; episodes need at least 2");
    const std::size_t support = rng.uniform_index(scene.images.size());
    Episode ep;
    ep.scene_id = scene.scene_id;
    ep.support_image = scene.images[support].first;
    ep.support_ann = scene.images[support].second;
    for (std::size_t i = 0; i < scene.images.size(); ++i)
        if (i != support) ep.queries.push_back(scene.images[i]);
    return ep;
}

// ---------------------------------------------------------------------------
// augmentation: mirror, Gaussian blur (image only), random crop

struct AugmentConfig {
    std::size_t crop_h = 48;
    std::size_t crop_w = 48;
    double mirror_prob = 0.5;
    double blur_prob = 0.3;
    double blur_sigma_lo = 0.5;
    double blur_sigma_hi = 1.5;
};

namespace detail {

inline void mirror_horizontal(Image& img, PointAnnotation& ann) {
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t y = 0; y < img.height; ++y)
            for (std::size_t x = 0; x < img.width / 2; ++x)
                std::swap(img.at(c, y, x), img.at(c, y, img.width - 1 - x));
    const double wm1 = static_cast<double>(img.width - 1);
    for (auto& p : ann.points) p.x = wm1 - p.x;
}

inline void gaussian_blur(Image& img, double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(2 * radius + 1);
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        total += kernel[i + radius];
    }
    for (auto& k : kernel) k /= total;

    const int h = static_cast<int>(img.height), w = static_cast<int>(img.width);
    std::vector<double> tmp(img.data.size());
    for (std::size_t c = 0; c < img.channels; ++c) {
        const std::size_t base = c * h * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const int xx = std::clamp(x + i, 0, w - 1);
                    acc += kernel[i + radius] * img.data[base + y * w + xx];
                }
                tmp[base + y * w + x] = acc;
            }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const int yy = std::clamp(y + i, 0, h - 1);
                    acc += kernel[i + radius] * tmp[base + yy * w + x];
                }
                img.data[base + y * w + x] = acc;
            }
    }
}

} // namespace detail

inline std::pair<Image, PointAnnotation> augment(const Image& image, const PointAnnotation& ann,
                                                 Rng& rng, const AugmentConfig& cfg) {
    if (cfg.crop_h > image.height || cfg.crop_w > image.width)
        throw CropTooLarge("augment: crop " + std::to_string(cfg.crop_w) + "x" +
                           std::to_string(cfg.crop_h) + " exceeds image " +
                           std::to_string(image.width) + "x" + std::to_string(image.height));
    Image img = image;
    PointAnnotation out = ann;

    if (rng.bernoulli(cfg.mirror_prob)) detail::mirror_horizontal(img, out);
    if (rng.bernoulli(cfg.blur_prob))
        detail::gaussian_blur(img, rng.uniform(cfg.blur_sigma_lo, cfg.blur_sigma_hi));

    const std::size_t y0 = rng.uniform_index(image.height - cfg.crop_h + 1);
    const std::size_t x0 = rng.uniform_index(image.width - cfg.crop_w + 1);
    Image cropped;
    cropped.channels = img.channels;
    cropped.height = cfg.crop_h;
    cropped.width = cfg.crop_w;
    cropped.data.resize(img.channels * cfg.crop_h * cfg.crop_w);
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t y = 0; y < cfg.crop_h; ++y)
            for (std::size_t x = 0; x < cfg.crop_w; ++x)
                cropped.at(c, y, x) = img.at(c, y0 + y, x0 + x);

    PointAnnotation cropped_ann;
    cropped_ann.height = cfg.crop_h;
    cropped_ann.width = cfg.crop_w;
    for (const auto& p : out.points) {
        const double nx = p.x - static_cast<double>(x0);
        const double ny = p.y - static_cast<double>(y0);
        if (nx >= 0.0 && nx < static_cast<double>(cfg.crop_w) && ny >= 0.0 &&
            ny < static_cast<double>(cfg.crop_h))
            cropped_ann.points.push_back({nx, ny});
    }
    return {std::move(cropped), std::move(cropped_ann)};
}

// ---------------------------------------------------------------------------
// synthetic surveillance scenes: a fixed region layout per scene (fixed
// camera), Poisson-realized head positions per image, heads rendered as
// small Gaussian bumps over a low-frequency value-noise background.

struct DensityRegion {
    std::size_t x = 0, y = 0, w = 0, h = 0; // pixels
    double intensity = 0.0;                 // expected heads per pixel cell
    double jitter = 1.0;                    // positional noise, px
};

struct SyntheticSceneSpec {
    std::string scene_id;
    std::size_t height = 64;
    std::size_t width = 64;
    std::vector<DensityRegion> regions;
    std::uint64_t texture_seed = 0;
    double stamp_sigma = 1.2;        // head blob width, px
    double stamp_gain = 0.6;         // head blob brightness
    double background_base = 0.2;
    double background_contrast = 0.25;
    double pixel_noise = 0.02;

    void validate() const {
        for (const auto& r : regions) {
            if (r.x + r.w > width || r.y + r.h > height || r.w == 0 || r.h == 0)
                throw InvalidHyperparameter("synthetic region outside image in scene '" +
                                            scene_id + "'");
            if (r.intensity < 0.0)
                throw InvalidHyperparameter("negative region intensity in scene '" + scene_id +
                                            "'");
        }
    }
};

namespace detail {

// bilinear upsample of a coarse random grid
inline std::vector<double> value_noise(std::size_t h, std::size_t w, Rng& rng) {
    const std::size_t cell = 8;
    const std::size_t gh = h / cell + 2, gw = w / cell + 2;
    std::vector<double> grid(gh * gw);
    for (auto& g : grid) g = rng.uniform();
    std::vector<double> out(h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double fy = static_cast<double>(y) / cell, fx = static_cast<double>(x) / cell;
            const std::size_t iy = static_cast<std::size_t>(fy), ix = static_cast<std::size_t>(fx);
            const double ty = fy - iy, tx = fx - ix;
            const double v00 = grid[iy * gw + ix], v01 = grid[iy * gw + ix + 1];
            const double v10 = grid[(iy + 1) * gw + ix], v11 = grid[(iy + 1) * gw + ix + 1];
            out[y * w + x] = (v00 * (1 - tx) + v01 * tx) * (1 - ty) +
                             (v10 * (1 - tx) + v11 * tx) * ty;
        }
    return out;
}

inline void stamp_head(Image& img, double px, double py, double sigma, double gain) {
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    const int h = static_cast<int>(img.height), w = static_cast<int>(img.width);
    const int y0 = std::max(0, static_cast<int>(py) - radius);
    const int y1 = std::min(h - 1, static_cast<int>(py) + radius);
    const int x0 = std::max(0, static_cast<int>(px) - radius);
    const int x1 = std::min(w - 1, static_cast<int>(px) + radius);
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double dx = x - px, dy = y - py;
            img.at(0, y, x) += gain * std::exp(-(dx * dx + dy * dy) * inv2s2);
        }
}

} // namespace detail

inline Scene generate_synthetic_scene(const SyntheticSceneSpec& spec, std::size_t n_images,
                                      Rng& rng) {
    if (n_images < 2)
        throw SceneTooSmall("generate_synthetic_scene: need at least 2 images per scene");
    spec.validate();

    // layout and background are fixed per scene
    Rng texture_rng(spec.texture_seed);
    std::vector<double> background = detail::value_noise(spec.height, spec.width, texture_rng);

    Scene scene;
    scene.scene_id = spec.scene_id;
    for (std::size_t n = 0; n < n_images; ++n) {
        Image img;
        img.channels = 1;
        img.height = spec.height;
        img.width = spec.width;
        img.data.resize(spec.height * spec.width);
        for (std::size_t i = 0; i < img.data.size(); ++i)
            img.data[i] = spec.background_base + spec.background_contrast * background[i];

        PointAnnotation ann;
        ann.height = spec.height;
        ann.width = spec.width;
        for (const auto& region : spec.regions) {
            const double lambda = region.intensity * static_cast<double>(region.w * region.h);
            const long count = rng.poisson(lambda);
            for (long k = 0; k < count; ++k) {
                double px = static_cast<double>(region.x) + rng.uniform() * region.w;
                double py = static_cast<double>(region.y) + rng.uniform() * region.h;
                px += rng.normal(0.0, region.jitter);
                py += rng.normal(0.0, region.jitter);
                px = std::clamp(px, 0.0, static_cast<double>(spec.width) - 1e-6);
                py = std::clamp(py, 0.0, static_cast<double>(spec.height) - 1e-6);
                ann.points.push_back({px, py});
                detail::stamp_head(img, px, py, spec.stamp_sigma, spec.stamp_gain);
            }
        }
        for (auto& v : img.data) {
            v += rng.normal(0.0, spec.pixel_noise);
            v = std::clamp(v, 0.0, 1.0);
        }
        scene.images.emplace_back(std::move(img), std::move(ann));
    }
    return scene;
}

// Default desk-scale benchmark: scenes with three disjoint density bands
// (high / medium / low in shuffled vertical order) and scene-specific
// appearance, so count calibration genuinely depends on the support image.
struct BenchmarkLayout {
    std::size_t train_scenes = 8;
    std::size_t train_images = 12;
    std::size_t test_scenes = 3;
    std::size_t test_images = 8;
    std::size_t height = 64;
    std::size_t width = 64;
};

inline SyntheticSceneSpec make_scene_spec(const std::string& scene_id, std::size_t height,
                                          std::size_t width, Rng& rng) {
    SyntheticSceneSpec spec;
    spec.scene_id = scene_id;
    spec.height = height;
    spec.width = width;
    spec.texture_seed = rng.next_u64();
    spec.stamp_sigma = rng.uniform(1.0, 1.5);
    spec.stamp_gain = rng.uniform(0.35, 0.85);
    spec.background_base = rng.uniform(0.1, 0.3);
    spec.background_contrast = rng.uniform(0.15, 0.35);

    // three stacked bands with shuffled intensity roles
    double levels[3] = {rng.uniform(0.030, 0.060), rng.uniform(0.012, 0.022),
                        rng.uniform(0.002, 0.008)};
    for (int i = 2; i > 0; --i) std::swap(levels[i], levels[rng.uniform_index(i + 1)]);
    const std::size_t band = height / 3;
    for (int i = 0; i < 3; ++i) {
        DensityRegion r;
        r.y = static_cast<std::size_t>(i) * band + 1;
        r.h = band - 2;
        r.x = 1 + rng.uniform_index(6);
        r.w = width - r.x - 1 - rng.uniform_index(6);
        r.intensity = levels[i];
        r.jitter = rng.uniform(0.5, 1.5);
        spec.regions.push_back(r);
    }
    return spec;
}

struct SyntheticBenchmark {
    std::vector<Scene> train;
    std::vector<Scene> test;
};

inline SyntheticBenchmark make_synthetic_benchmark(const BenchmarkLayout& layout, Rng rng) {
    SyntheticBenchmark bench;
    for (std::size_t s = 0; s < layout.train_scenes; ++s) {
        Rng scene_rng = rng.fork(100 + s);
        SyntheticSceneSpec spec = make_scene_spec("train" + std::to_string(s), layout.height,
                                                  layout.width, scene_rng);
        bench.train.push_back(generate_synthetic_scene(spec, layout.train_images, scene_rng));
    }
    for (std::size_t s = 0; s < layout.test_scenes; ++s) {
        Rng scene_rng = rng.fork(900 + s);
        SyntheticSceneSpec spec = make_scene_spec("test" + std::to_string(s), layout.height,
                                                  layout.width, scene_rng);
        bench.test.push_back(generate_synthetic_scene(spec, layout.test_images, scene_rng));
    }
    return bench;
}

// ---------------------------------------------------------------------------
// manifest: one line per image,
//   scene_id <TAB> image_path <TAB> annotation_path [<TAB> roi_path]
// paths relative to the manifest location.

inline std::vector<Scene> read_manifest(const std::string& manifest_path) {
    std::ifstream is(manifest_path);
    if (!is) throw IoError("cannot open manifest " + manifest_path);
    const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();

    std::vector<Scene> scenes;
    auto scene_of = [&](const std::string& id) -> Scene& {
        for (auto& s : scenes)
            if (s.scene_id == id) return s;
        scenes.push_back(Scene{id, {}, std::nullopt});
        return scenes.back();
    };

    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cols;
        std::size_t start = 0;
        while (true) {
            const std::size_t tab = line.find('\t', start);
            cols.push_back(line.substr(start, tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (cols.size() < 3 || cols.size() > 4)
            throw IoError("manifest line " + std::to_string(lineno) + ": expected 3 or 4 columns");
        Scene& scene = scene_of(cols[0]);
        Image img = read_pnm((base / cols[1]).string());
        AnnotationRecord rec = read_annotation((base / cols[2]).string());
        PointAnnotation ann;
        ann.height = img.height;
        ann.width = img.width;
        ann.points = rec.points;
        ann.validate();
        scene.images.emplace_back(std::move(img), std::move(ann));
        if (cols.size() == 4 && !scene.roi) scene.roi = read_roi_pgm((base / cols[3]).string());
    }
    return scenes;
}

// Materializes scenes as PGM images + annotation files + a manifest so
// synthetic and real data share one ingestion path.
inline void write_scene_set(const std::string& dir, const std::string& manifest_name,
                            const std::vector<Scene>& scenes) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "ann");
    std::ofstream manifest(fs::path(dir) / manifest_name);
    if (!manifest) throw IoError("cannot write manifest in " + dir);
    for (const auto& scene : scenes) {
        for (std::size_t i = 0; i < scene.images.size(); ++i) {
            const std::string stem = scene.scene_id + "_" + std::to_string(i);
            const std::string img_rel = "images/" + stem + ".pgm";
            const std::string ann_rel = "ann/" + stem + ".txt";
            write_pgm((fs::path(dir) / img_rel).string(), scene.images[i].first);
            AnnotationRecord rec;
            rec.image_path = img_rel;
            rec.points = scene.images[i].second.points;
            write_annotation((fs::path(dir) / ann_rel).string(), rec);
            manifest << scene.scene_id << '\t' << img_rel << '\t' << ann_rel << '\n';
        }
    }
    if (!manifest) throw IoError("manifest write failed in " + dir);
}

} // namespace crowd
