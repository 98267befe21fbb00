#ifndef SWIPE_RASTER_HPP
#define SWIPE_RASTER_HPP

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "common.hpp"

namespace swipe {

/// Dense 2D raster, row-major.
template <typename T>
struct Raster {
    int height = 0;
    int width = 0;
    std::vector<T> values;

    Raster() = default;
    Raster(int h, int w, T fill = T{}) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

    T& operator()(int row, int col) { return values[static_cast<std::size_t>(row) * width + col]; }
    const T& operator()(int row, int col) const { return values[static_cast<std::size_t>(row) * width + col]; }

    std::size_t size() const { return values.size(); }
    bool empty() const { return values.empty(); }
    bool in_bounds(int row, int col) const { return row >= 0 && row < height && col >= 0 && col < width; }

    friend bool operator==(const Raster&, const Raster&) = default;
};

using LabelMask = Raster<std::uint8_t>;
using GrayImage = Raster<float>;

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const
    {
        if (f) {
            std::fclose(f);
        }
    }
};

} // namespace detail

/// Writes an 8-bit single-channel PNG.
inline void write_png_gray8(const std::filesystem::path& path, const Raster<std::uint8_t>& raster)
{
    std::unique_ptr<std::FILE, detail::FileCloser> file(std::fopen(path.string().c_str(), "wb"));
    if (!file) {
        throw Error("cannot open " + path.string() + " for writing");
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw Error("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("libpng failed while writing " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(raster.width), static_cast<png_uint_32>(raster.height), 8,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int r = 0; r < raster.height; ++r) {
        png_write_row(png, const_cast<png_bytep>(&raster.values[static_cast<std::size_t>(r) * raster.width]));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

/// Reads a PNG as 8-bit single channel; color input is converted to gray.
inline Raster<std::uint8_t> read_png_gray8(const std::filesystem::path& path)
{
    std::unique_ptr<std::FILE, detail::FileCloser> file(std::fopen(path.string().c_str(), "rb"));
    if (!file) {
        throw Error("cannot open " + path.string());
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error("libpng initialization failed");
    }
    Raster<std::uint8_t> out;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ParseError("malformed PNG: " + path.string());
    }
    png_init_io(png, file.get());
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    const auto depth = png_get_bit_depth(png, info);
    if (depth == 16) {
        png_set_strip_16(png);
    }
    if (color == PNG_COLOR_TYPE_PALETTE) {
        png_set_palette_to_rgb(png);
    }
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) {
        png_set_expand_gray_1_2_4_to_8(png);
    }
    if (color & PNG_COLOR_MASK_ALPHA) {
        png_set_strip_alpha(png);
    }
    if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE) {
        png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    }
    png_read_update_info(png, info);
    out = Raster<std::uint8_t>(static_cast<int>(png_get_image_height(png, info)),
                               static_cast<int>(png_get_image_width(png, info)));
    for (int r = 0; r < out.height; ++r) {
        png_read_row(png, &out.values[static_cast<std::size_t>(r) * out.width], nullptr);
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

inline GrayImage to_unit_float(const Raster<std::uint8_t>& raster)
{
    GrayImage out(raster.height, raster.width);
    for (std::size_t i = 0; i < raster.size(); ++i) {
        out.values[i] = static_cast<float>(raster.values[i]) / 255.0f;
    }
    return out;
}

inline Raster<std::uint8_t> to_gray8(const GrayImage& image)
{
    Raster<std::uint8_t> out(image.height, image.width);
    for (std::size_t i = 0; i < image.size(); ++i) {
        const float v = std::min(1.0f, std::max(0.0f, image.values[i]));
        out.values[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
    return out;
}

} // namespace swipe

#endif
