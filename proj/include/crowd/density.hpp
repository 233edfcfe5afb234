#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "crowd/errors.hpp"
#include "crowd/tensor.hpp"

namespace crowd {

struct Point2 {
    double x = 0.0; // column, pixels
    double y = 0.0; // row, pixels
};

struct PointAnnotation {
    std::vector<Point2> points;
    std::size_t height = 0;
    std::size_t width = 0;

    std::size_t count() const { return points.size(); }

    void validate() const {
        for (const auto& p : points)
            if (!(p.x >= 0.0 && p.x < static_cast<double>(width) && p.y >= 0.0 &&
                  p.y < static_cast<double>(height)))
                throw PointOutOfBounds("point (" + std::to_string(p.x) + "," + std::to_string(p.y) +
                                       ") outside " + std::to_string(width) + "x" +
                                       std::to_string(height));
    }
};

struct DensityMap {
    Tensor grid;        // (1,H,W), nonnegative
    double sigma = 0.0; // kernel width used at encoding time, pixels

    std::size_t height() const { return grid.dim(1); }
    std::size_t width() const { return grid.dim(2); }
};

struct RoiMask {
    Tensor mask; // (1,H,W) of {0,1}
};

// Each head is stamped as a truncated Gaussian (radius 4*sigma) renormalized
// over the cells it actually covers, so the map integral equals the head
// count exactly regardless of border truncation.
inline DensityMap encode_density(const PointAnnotation& ann, double sigma,
                                 std::size_t out_h, std::size_t out_w) {
    if (!(sigma > 0.0)) throw NonPositiveSigma("encode_density: sigma must be positive");
    for (const auto& p : ann.points)
        if (!(p.x >= 0.0 && p.x < static_cast<double>(out_w) && p.y >= 0.0 &&
              p.y < static_cast<double>(out_h)))
            throw PointOutOfBounds("encode_density: point (" + std::to_string(p.x) + "," +
                                   std::to_string(p.y) + ") outside " + std::to_string(out_w) +
                                   "x" + std::to_string(out_h));

    DensityMap dm;
    dm.sigma = sigma;
    dm.grid = Tensor::zeros(Shape{1, out_h, out_w});
    double* g = dm.grid.data();
    const double radius = 4.0 * sigma;
    const double r2 = radius * radius;
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    const long h = static_cast<long>(out_h), w = static_cast<long>(out_w);

    std::vector<double> weights;
    std::vector<std::size_t> cells;
    for (const auto& p : ann.points) {
        weights.clear();
        cells.clear();
        const long y0 = std::max(0L, static_cast<long>(std::ceil(p.y - radius)));
        const long y1 = std::min(h - 1, static_cast<long>(std::floor(p.y + radius)));
        const long x0 = std::max(0L, static_cast<long>(std::ceil(p.x - radius)));
        const long x1 = std::min(w - 1, static_cast<long>(std::floor(p.x + radius)));
        double total = 0.0;
        for (long iy = y0; iy <= y1; ++iy)
            for (long ix = x0; ix <= x1; ++ix) {
                const double dx = static_cast<double>(ix) - p.x;
                const double dy = static_cast<double>(iy) - p.y;
                const double d2 = dx * dx + dy * dy;
                if (d2 > r2) continue;
                const double wgt = std::exp(-d2 * inv2s2);
                weights.push_back(wgt);
                cells.push_back(static_cast<std::size_t>(iy) * out_w + static_cast<std::size_t>(ix));
                total += wgt;
            }
        if (total <= 0.0) {
            // kernel narrower than the grid: drop the full mass on the nearest cell
            const long iy = std::min(h - 1, std::max(0L, static_cast<long>(std::lround(p.y))));
            const long ix = std::min(w - 1, std::max(0L, static_cast<long>(std::lround(p.x))));
            g[static_cast<std::size_t>(iy) * out_w + static_cast<std::size_t>(ix)] += 1.0;
            continue;
        }
        const double inv_total = 1.0 / total;
        for (std::size_t i = 0; i < cells.size(); ++i) g[cells[i]] += weights[i] * inv_total;
    }
    return dm;
}

inline DensityMap apply_mask(const DensityMap& dm, const RoiMask& roi) {
    if (dm.grid.shape() != roi.mask.shape())
        throw ShapeMismatch("apply_mask: " + shape_str(dm.grid.shape()) + " vs " +
                            shape_str(roi.mask.shape()));
    DensityMap out;
    out.sigma = dm.sigma;
    out.grid = Tensor(dm.grid.shape());
    for (std::size_t i = 0; i < dm.grid.size(); ++i)
        out.grid.data()[i] = dm.grid.data()[i] * roi.mask.data()[i];
    return out;
}

// Non-overlapping factor x factor sum pooling; the integral is preserved
// exactly, which is what makes feature-resolution supervision consistent
// with image-resolution counts.
inline DensityMap downsample_preserving_count(const DensityMap& dm, std::size_t factor) {
    if (factor == 0) throw InvalidHyperparameter("downsample: factor must be >= 1");
    const std::size_t h = dm.height(), w = dm.width();
    if (h % factor || w % factor)
        throw IndivisibleShape("downsample: " + std::to_string(h) + "x" + std::to_string(w) +
                               " not divisible by " + std::to_string(factor));
    const std::size_t ho = h / factor, wo = w / factor;
    DensityMap out;
    out.sigma = dm.sigma;
    out.grid = Tensor::zeros(Shape{1, ho, wo});
    const double* src = dm.grid.data();
    double* dst = out.grid.data();
    for (std::size_t y = 0; y < h; ++y) {
        const std::size_t oy = y / factor;
        for (std::size_t x = 0; x < w; ++x) dst[oy * wo + x / factor] += src[y * w + x];
    }
    return out;
}

inline double integrate_count(const DensityMap& dm) {
    double acc = 0.0;
    for (std::size_t i = 0; i < dm.grid.size(); ++i) acc += dm.grid.data()[i];
    return acc;
}

// ---------------------------------------------------------------------------
// raw density-map format: 16-byte header (magic "DMAP", u32 H, u32 W,
// u32 reserved), then H*W little-endian float64, row-major.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("unexpected end of stream reading u32");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f64(std::ostream& os, double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw IoError("unexpected end of stream reading f64");
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &u, 8);
    return v;
}

} // namespace detail

inline void write_dmap(const std::string& path, const DensityMap& dm) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write("DMAP", 4);
    detail::put_u32(os, static_cast<std::uint32_t>(dm.height()));
    detail::put_u32(os, static_cast<std::uint32_t>(dm.width()));
    detail::put_u32(os, 0);
    for (std::size_t i = 0; i < dm.grid.size(); ++i) detail::put_f64(os, dm.grid.data()[i]);
    if (!os) throw IoError("write failed: " + path);
}

inline DensityMap read_dmap(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DMAP", 4) != 0) throw IoError("bad magic in " + path);
    const std::uint32_t h = detail::get_u32(is);
    const std::uint32_t w = detail::get_u32(is);
    detail::get_u32(is); // reserved
    DensityMap dm;
    dm.grid = Tensor(Shape{1, h, w});
    for (std::size_t i = 0; i < dm.grid.size(); ++i) dm.grid.data()[i] = detail::get_f64(is);
    return dm;
}

// ---------------------------------------------------------------------------
// annotation text format: image path on the first line, one "x y" pair per
// line after it.

struct AnnotationRecord {
    std::string image_path;
    std::vector<Point2> points;
};

inline AnnotationRecord read_annotation(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open annotation " + path);
    AnnotationRecord rec;
    if (!std::getline(is, rec.image_path)) throw IoError("empty annotation file " + path);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        Point2 p;
        if (!(ls >> p.x >> p.y)) throw IoError("malformed point line in " + path + ": " + line);
        rec.points.push_back(p);
    }
    return rec;
}

inline void write_annotation(const std::string& path, const AnnotationRecord& rec) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << rec.image_path << "\n";
    char buf[64];
    for (const auto& p : rec.points) {
        std::snprintf(buf, sizeof(buf), "%.17g %.17g", p.x, p.y);
        os << buf << "\n";
    }
    if (!os) throw IoError("write failed: " + path);
}

} // namespace crowd
