#pragma once

// Float raster type plus the two on-disk formats the pipeline uses:
// 8-bit PNG for material maps and little-endian PFM for linear HDR data.

#include "matlift/core.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace matlift {

/// Interleaved float image, row-major with row 0 at the top.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<float> data;

    Image() = default;
    Image(int w, int h, int c, float fill = 0.0f)
        : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
    std::size_t index(int x, int y, int c = 0) const {
        return (static_cast<std::size_t>(y) * width + x) * channels + c;
    }
    float &at(int x, int y, int c = 0) { return data[index(x, y, c)]; }
    float at(int x, int y, int c = 0) const { return data[index(x, y, c)]; }

    bool same_shape(const Image &o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }
    bool empty() const { return data.empty(); }

    friend bool operator==(const Image &, const Image &) = default;
};

inline double srgb_to_linear(double c) {
    return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

inline double linear_to_srgb(double c) {
    c = clamp01(c);
    return c <= 0.0031308 ? 12.92 * c : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055;
}

/// Rounds every value to the nearest level representable in an 8-bit map with the given encoding.
inline Image quantize_8bit(const Image &img, bool srgb) {
    Image out = img;
    for (auto &v : out.data) {
        const double enc = srgb ? linear_to_srgb(v) : clamp01(v);
        const double level = std::round(enc * 255.0) / 255.0;
        v = static_cast<float>(srgb ? srgb_to_linear(level) : level);
    }
    return out;
}

namespace detail {

struct FileCloser {
    void operator()(std::FILE *f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path &path, const char *mode) {
    FilePtr f(std::fopen(path.string().c_str(), mode));
    if (!f) throw Error("cannot open '" + path.string() + "'");
    return f;
}

[[noreturn]] inline void png_error_fn(png_structp, png_const_charp msg) { throw Error(std::string("png: ") + msg); }
inline void png_warning_fn(png_structp, png_const_charp) {}

} // namespace detail

/// Writes a 1- or 3-channel image as 8-bit PNG. With `srgb` the values are
/// encoded with the sRGB transfer curve and the file carries an sRGB chunk.
inline void write_png(const std::filesystem::path &path, const Image &img, bool srgb) {
    if (img.channels != 1 && img.channels != 3) throw InvalidParameter("write_png: 1 or 3 channels required");
    auto file = detail::open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_fn,
                                              detail::png_warning_fn);
    png_infop info = png_create_info_struct(png);
    struct Guard {
        png_structp *p;
        png_infop *i;
        ~Guard() { png_destroy_write_struct(p, i); }
    } guard{&png, &info};

    std::vector<png_byte> row(static_cast<std::size_t>(img.width) * img.channels);
    png_init_io(png, file.get());
    png_set_IHDR(png, info, img.width, img.height, 8, img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    if (srgb) png_set_sRGB(png, info, PNG_sRGB_INTENT_PERCEPTUAL);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                const double v = img.at(x, y, c);
                const double enc = srgb ? linear_to_srgb(v) : clamp01(v);
                row[static_cast<std::size_t>(x) * img.channels + c] = static_cast<png_byte>(std::lround(enc * 255.0));
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
}

/// Reads an 8-bit gray or RGB PNG. With `srgb` values are linearized on load.
inline Image read_png(const std::filesystem::path &path, bool srgb) {
    auto file = detail::open_file(path, "rb");
    png_byte sig[8];
    if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw ParseError("not a PNG file: '" + path.string() + "'", 0);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_fn,
                                             detail::png_warning_fn);
    png_infop info = png_create_info_struct(png);
    struct Guard {
        png_structp *p;
        png_infop *i;
        ~Guard() { png_destroy_read_struct(p, i, nullptr); }
    } guard{&png, &info};

    png_init_io(png, file.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const int width = static_cast<int>(png_get_image_width(png, info));
    const int height = static_cast<int>(png_get_image_height(png, info));
    const int depth = png_get_bit_depth(png, info);
    const int type = png_get_color_type(png, info);
    if (depth != 8) throw ParseError("unsupported PNG bit depth in '" + path.string() + "'", 24);
    if (type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    png_read_update_info(png, info);
    const int channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3) throw ParseError("unsupported PNG channel layout in '" + path.string() + "'", 25);

    Image img(width, height, channels);
    std::vector<png_byte> row(png_get_rowbytes(png, info));
    for (int y = 0; y < height; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < channels; ++c) {
                const double v = row[static_cast<std::size_t>(x) * channels + c] / 255.0;
                img.at(x, y, c) = static_cast<float>(srgb ? srgb_to_linear(v) : v);
            }
    }
    return img;
}

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Writes a 1- or 3-channel float image as PFM (little endian, bottom-up rows).
inline void write_pfm(const std::filesystem::path &path, const Image &img) {
    if (img.channels != 1 && img.channels != 3) throw InvalidParameter("write_pfm: 1 or 3 channels required");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    out << (img.channels == 3 ? "PF" : "Pf") << '\n' << img.width << ' ' << img.height << '\n' << "-1.0\n";
    const std::size_t row = static_cast<std::size_t>(img.width) * img.channels;
    for (int y = img.height - 1; y >= 0; --y)
        out.write(reinterpret_cast<const char *>(img.data.data() + row * y), static_cast<std::streamsize>(row * sizeof(float)));
    if (!out) throw Error("write failed for '" + path.string() + "'");
}

inline Image read_pfm(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path.string() + "'");
    std::string magic;
    int w = 0, h = 0;
    double scale = 0;
    in >> magic;
    if (magic != "PF" && magic != "Pf") throw ParseError("bad PFM magic in '" + path.string() + "'", 0);
    if (!(in >> w >> h >> scale) || w <= 0 || h <= 0)
        throw ParseError("bad PFM header in '" + path.string() + "'", static_cast<std::uint64_t>(std::max<std::streamoff>(in.tellg(), 0)));
    if (scale >= 0) throw ParseError("big-endian PFM not supported: '" + path.string() + "'", 0);
    in.get();
    Image img(w, h, magic == "PF" ? 3 : 1);
    const std::size_t row = static_cast<std::size_t>(w) * img.channels;
    const auto header = static_cast<std::uint64_t>(in.tellg());
    for (int y = h - 1; y >= 0; --y) {
        in.read(reinterpret_cast<char *>(img.data.data() + row * y), static_cast<std::streamsize>(row * sizeof(float)));
        if (!in) {
            const std::uint64_t done = header + static_cast<std::uint64_t>(h - 1 - y) * row * sizeof(float);
            throw ParseError("truncated PFM '" + path.string() + "'", done + static_cast<std::uint64_t>(in.gcount()));
        }
    }
    return img;
}

} // namespace matlift
