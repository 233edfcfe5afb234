#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "crowd/density.hpp"
#include "crowd/errors.hpp"
#include "crowd/tensor.hpp"

namespace crowd {

// 8-bit image decoded to [0,1] doubles, planar C x H x W.
struct Image {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> data;

    double at(std::size_t c, std::size_t y, std::size_t x) const {
        return data[(c * height + y) * width + x];
    }
    double& at(std::size_t c, std::size_t y, std::size_t x) {
        return data[(c * height + y) * width + x];
    }

    // backbone input: always 3 channels, grayscale replicated
    Tensor to_tensor() const {
        Tensor t(Shape{3, height, width});
        const std::size_t hw = height * width;
        for (std::size_t c = 0; c < 3; ++c) {
            const std::size_t src = channels == 3 ? c : 0;
            std::copy(data.begin() + src * hw, data.begin() + (src + 1) * hw,
                      t.data() + c * hw);
        }
        return t;
    }
};

namespace detail {

inline int pnm_token(std::istream& is) {
    // skips whitespace and '#' comments, returns next integer
    int c = is.get();
    while (is) {
        if (c == '#') {
            while (is && c != '\n') c = is.get();
        } else if (!std::isspace(c)) {
            break;
        }
        c = is.get();
    }
    if (!is) throw IoError("truncated PNM header");
    int value = 0;
    while (is && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        c = is.get();
    }
    return value;
}

} // namespace detail

inline Image read_pnm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open image " + path);
    char m0 = static_cast<char>(is.get());
    char m1 = static_cast<char>(is.get());
    std::size_t channels;
    if (m0 == 'P' && m1 == '5') channels = 1;
    else if (m0 == 'P' && m1 == '6') channels = 3;
    else throw IoError("unsupported image format in " + path + " (need binary PGM/PPM)");
    const int w = detail::pnm_token(is);
    const int h = detail::pnm_token(is);
    const int maxval = detail::pnm_token(is);
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
        throw IoError("unsupported PNM dimensions/maxval in " + path);
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * channels);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!is) throw IoError("truncated pixel data in " + path);
    Image img;
    img.channels = channels;
    img.height = static_cast<std::size_t>(h);
    img.width = static_cast<std::size_t>(w);
    img.data.resize(raw.size());
    const double inv = 1.0 / maxval;
    // interleaved -> planar
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < channels; ++c)
                img.at(c, y, x) = raw[(y * img.width + x) * channels + c] * inv;
    return img;
}

inline void write_pgm(const std::string& path, const Image& img) {
    if (img.channels != 1) throw IoError("write_pgm: expected single channel");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "P5\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> raw(img.height * img.width);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        double v = img.data[i];
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        raw[i] = static_cast<unsigned char>(v * 255.0 + 0.5);
    }
    os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!os) throw IoError("write failed: " + path);
}

// ROI convention: nonzero pixel means inside.
inline RoiMask read_roi_pgm(const std::string& path) {
    Image img = read_pnm(path);
    if (img.channels != 1) throw IoError("ROI mask must be grayscale PGM: " + path);
    RoiMask roi;
    roi.mask = Tensor(Shape{1, img.height, img.width});
    for (std::size_t i = 0; i < img.data.size(); ++i)
        roi.mask.data()[i] = img.data[i] > 0.0 ? 1.0 : 0.0;
    return roi;
}

// ---------------------------------------------------------------------------
// minimal 8-bit grayscale PNG writer (zlib-deflated, filter 0 on every row)

namespace detail {

inline void png_chunk(std::ostream& os, const char type[4], const unsigned char* data,
                      std::uint32_t len) {
    unsigned char hdr[4] = {static_cast<unsigned char>(len >> 24),
                            static_cast<unsigned char>(len >> 16),
                            static_cast<unsigned char>(len >> 8), static_cast<unsigned char>(len)};
    os.write(reinterpret_cast<const char*>(hdr), 4);
    os.write(type, 4);
    if (len) os.write(reinterpret_cast<const char*>(data), len);
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(type), 4);
    if (len) crc = crc32(crc, data, len);
    unsigned char tail[4] = {static_cast<unsigned char>(crc >> 24),
                             static_cast<unsigned char>(crc >> 16),
                             static_cast<unsigned char>(crc >> 8), static_cast<unsigned char>(crc)};
    os.write(reinterpret_cast<const char*>(tail), 4);
}

} // namespace detail

inline void write_png_gray8(const std::string& path, const std::vector<unsigned char>& pixels,
                            std::size_t height, std::size_t width) {
    if (pixels.size() != height * width) throw IoError("write_png_gray8: size mismatch");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    os.write(reinterpret_cast<const char*>(sig), 8);

    unsigned char ihdr[13];
    const std::uint32_t w = static_cast<std::uint32_t>(width);
    const std::uint32_t h = static_cast<std::uint32_t>(height);
    ihdr[0] = static_cast<unsigned char>(w >> 24);
    ihdr[1] = static_cast<unsigned char>(w >> 16);
    ihdr[2] = static_cast<unsigned char>(w >> 8);
    ihdr[3] = static_cast<unsigned char>(w);
    ihdr[4] = static_cast<unsigned char>(h >> 24);
    ihdr[5] = static_cast<unsigned char>(h >> 16);
    ihdr[6] = static_cast<unsigned char>(h >> 8);
    ihdr[7] = static_cast<unsigned char>(h);
    ihdr[8] = 8;  // bit depth
    ihdr[9] = 0;  // grayscale
    ihdr[10] = ihdr[11] = ihdr[12] = 0;
    detail::png_chunk(os, "IHDR", ihdr, 13);

    std::vector<unsigned char> scan((width + 1) * height);
    for (std::size_t y = 0; y < height; ++y) {
        scan[y * (width + 1)] = 0; // filter: none
        std::memcpy(&scan[y * (width + 1) + 1], &pixels[y * width], width);
    }
    uLongf bound = compressBound(static_cast<uLong>(scan.size()));
    std::vector<unsigned char> compressed(bound);
    if (compress2(compressed.data(), &bound, scan.data(), static_cast<uLong>(scan.size()), 6) != Z_OK)
        throw IoError("deflate failed for " + path);
    detail::png_chunk(os, "IDAT", compressed.data(), static_cast<std::uint32_t>(bound));
    detail::png_chunk(os, "IEND", nullptr, 0);
    if (!os) throw IoError("write failed: " + path);
}

// preview normalized to the map maximum (all-zero map stays black)
inline void write_density_preview_png(const std::string& path, const DensityMap& dm) {
    const std::size_t h = dm.height(), w = dm.width();
    double mx = 0.0;
    for (std::size_t i = 0; i < dm.grid.size(); ++i) mx = std::max(mx, dm.grid.data()[i]);
    std::vector<unsigned char> px(h * w, 0);
    if (mx > 0.0) {
        const double s = 255.0 / mx;
        for (std::size_t i = 0; i < px.size(); ++i) {
            double v = dm.grid.data()[i] * s;
            px[i] = static_cast<unsigned char>(v < 0.0 ? 0.0 : (v > 255.0 ? 255.0 : v + 0.5));
        }
    }
    write_png_gray8(path, px, h, w);
}

} // namespace crowd
