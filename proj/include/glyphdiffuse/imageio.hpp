#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "glyphdiffuse/checkpoint.hpp"
#include "glyphdiffuse/errors.hpp"
#include "glyphdiffuse/tensor.hpp"

// 8-bit grayscale image files: binary PGM (P5) written bit-exactly, PNG read
// and written through libpng. Pixels map to tensors in [-1, 1] with white
// background at +1 and ink at -1; the reverse mapping rounds half up so
// golden files are stable.

namespace gdf {

struct GrayImage {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels;  // row-major, height * width
};

inline Tensor image_to_tensor(const GrayImage& im) {
    if (im.height <= 0 || im.width <= 0 ||
        im.pixels.size() != size_t(im.height) * size_t(im.width))
        throw validation_error("image_to_tensor: bad image geometry " +
                               std::to_string(im.height) + "x" + std::to_string(im.width));
    Tensor t({1, im.height, im.width});
    float* d = t.mutable_data();
    for (size_t i = 0; i < im.pixels.size(); ++i) d[i] = float(im.pixels[i]) / 255.0f * 2.0f - 1.0f;
    return t;
}

// round(255 * (x+1) / 2), half up, clamped to [0, 255]
inline std::uint8_t pixel_byte(float x) {
    const double v = std::floor(255.0 * (double(x) + 1.0) / 2.0 + 0.5);
    return std::uint8_t(std::min(255.0, std::max(0.0, v)));
}

inline GrayImage tensor_to_image(const Tensor& t) {
    if (t.ndim() != 3 || t.dim(0) != 1)
        throw shape_error("tensor_to_image: need [1,H,W], got " + shape_str(t.shape));
    GrayImage im;
    im.height = t.dim(1);
    im.width = t.dim(2);
    im.pixels.resize(size_t(im.height) * size_t(im.width));
    for (size_t i = 0; i < im.pixels.size(); ++i) im.pixels[i] = pixel_byte(t.data()[i]);
    return im;
}

// ------------------------------------------------------------------- PGM ---

inline void write_pgm(const GrayImage& im, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw io_error("cannot open " + path + " for writing");
    const std::string header = "P5\n" + std::to_string(im.width) + " " +
                               std::to_string(im.height) + "\n255\n";
    bool ok = std::fwrite(header.data(), 1, header.size(), f) == header.size();
    ok = ok && std::fwrite(im.pixels.data(), 1, im.pixels.size(), f) == im.pixels.size();
    std::fclose(f);
    if (!ok) throw io_error("short write to " + path);
}

inline void write_pgm(const Tensor& t, const std::string& path) {
    write_pgm(tensor_to_image(t), path);
}

namespace detail {

// next whitespace-delimited token, skipping '#' comment lines
inline std::string pgm_token(const std::string& bytes, size_t& at, const std::string& path) {
    while (at < bytes.size()) {
        if (std::isspace(static_cast<unsigned char>(bytes[at]))) {
            ++at;
        } else if (bytes[at] == '#') {
            while (at < bytes.size() && bytes[at] != '\n') ++at;
        } else {
            break;
        }
    }
    size_t start = at;
    while (at < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[at]))) ++at;
    if (start == at) throw io_error(path + ": truncated PGM header");
    return bytes.substr(start, at - start);
}

inline int pgm_int(const std::string& bytes, size_t& at, const std::string& path) {
    const std::string tok = pgm_token(bytes, at, path);
    try {
        size_t used = 0;
        const int v = std::stoi(tok, &used);
        if (used != tok.size() || v <= 0) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw io_error(path + ": bad PGM header field '" + tok + "'");
    }
}

}  // namespace detail

inline GrayImage read_pgm(const std::string& path) {
    const std::string bytes = detail::read_file_bytes(path);
    size_t at = 0;
    if (detail::pgm_token(bytes, at, path) != "P5")
        throw io_error(path + ": not a binary PGM (P5) file");
    GrayImage im;
    im.width = detail::pgm_int(bytes, at, path);
    im.height = detail::pgm_int(bytes, at, path);
    const int maxval = detail::pgm_int(bytes, at, path);
    if (maxval != 255) throw io_error(path + ": unsupported PGM maxval " + std::to_string(maxval));
    if (at >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[at])))
        throw io_error(path + ": malformed PGM header");
    ++at;  // single whitespace byte before the raster
    const size_t need = size_t(im.width) * size_t(im.height);
    if (bytes.size() - at < need) throw io_error(path + ": truncated PGM raster");
    im.pixels.assign(bytes.begin() + std::ptrdiff_t(at), bytes.begin() + std::ptrdiff_t(at + need));
    return im;
}

// ------------------------------------------------------------------- PNG ---

inline void write_png(const GrayImage& im, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw io_error("cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(f);
        throw io_error("libpng: out of memory");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(f);
        throw io_error(path + ": PNG write failed");
    }
    png_init_io(png, f);
    png_set_IHDR(png, info, png_uint_32(im.width), png_uint_32(im.height), 8,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int r = 0; r < im.height; ++r)
        png_write_row(png, const_cast<png_bytep>(im.pixels.data() + size_t(r) * im.width));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
}

inline GrayImage read_png(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw io_error("cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(f);
        throw io_error("libpng: out of memory");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(f);
        throw io_error(path + ": PNG read failed");
    }
    png_init_io(png, f);
    png_read_info(png, info);

    // normalize anything to 8-bit grayscale in a single transform pass
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_PALETTE || (color & PNG_COLOR_MASK_COLOR))
        png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    GrayImage im;
    im.width = int(png_get_image_width(png, info));
    im.height = int(png_get_image_height(png, info));
    im.pixels.resize(size_t(im.width) * size_t(im.height));
    std::vector<png_bytep> rows(size_t(im.height));
    for (int r = 0; r < im.height; ++r) rows[size_t(r)] = im.pixels.data() + size_t(r) * im.width;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(f);
    return im;
}

// Dispatch on file extension (.pgm or .png).
inline GrayImage read_gray_image(const std::string& path) {
    auto ends_with = [&](const char* suf) {
        const size_t n = std::strlen(suf);
        return path.size() >= n &&
               std::equal(path.end() - std::ptrdiff_t(n), path.end(), suf,
                          [](char a, char b) { return std::tolower(unsigned(a)) == b; });
    };
    if (ends_with(".pgm")) return read_pgm(path);
    if (ends_with(".png")) return read_png(path);
    throw io_error(path + ": unsupported image format (need .pgm or .png)");
}

inline void write_gray_image(const GrayImage& im, const std::string& path) {
    auto ends_with = [&](const char* suf) {
        const size_t n = std::strlen(suf);
        return path.size() >= n &&
               std::equal(path.end() - std::ptrdiff_t(n), path.end(), suf,
                          [](char a, char b) { return std::tolower(unsigned(a)) == b; });
    };
    if (ends_with(".pgm")) return write_pgm(im, path);
    if (ends_with(".png")) return write_png(im, path);
    throw io_error(path + ": unsupported image format (need .pgm or .png)");
}

}  // namespace gdf
