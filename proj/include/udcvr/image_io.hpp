#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <regex>
#include <string>
#include <vector>

#include "udcvr/degradation.hpp"
#include "udcvr/tensor.hpp"

namespace udcvr::io {

/// Reads an 8-bit PNG into a 3×H×W tensor with values k/255.
inline Tensor read_png(const std::filesystem::path& path) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw DataError("cannot read PNG " + path.string() + ": " + image.message);
    image.format = PNG_FORMAT_RGB;
    std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
        png_image_free(&image);
        throw DataError("cannot decode PNG " + path.string() + ": " + image.message);
    }
    const std::size_t H = image.height, W = image.width;
    Tensor t({3, H, W});
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t c = 0; c < 3; ++c) t.at(c, y, x) = buffer[(y * W + x) * 3 + c] / 255.0;
    return t;
}

inline std::uint8_t quantize(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Writes a 3×H×W tensor (values clamped to [0,1]) as an 8-bit RGB PNG.
inline void write_png(const std::filesystem::path& path, const Tensor& t) {
    if (t.ndim() != 3 || t.dim(0) != 3) throw ShapeError("write_png: expected 3×H×W, got " + to_string(t.shape()));
    const std::size_t H = t.dim(1), W = t.dim(2);
    std::vector<png_byte> buffer(3 * H * W);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t c = 0; c < 3; ++c) buffer[(y * W + x) * 3 + c] = quantize(t.at(c, y, x));
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(W);
    image.height = static_cast<png_uint_32>(H);
    image.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr))
        throw DataError("cannot write PNG " + path.string() + ": " + image.message);
}

/// Rounds every value to the nearest representable 8-bit level.
inline Tensor quantize_8bit(Tensor t) {
    for (auto& v : t.vec()) v = quantize(v) / 255.0;
    return t;
}

inline std::string frame_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%04zu.png", index);
    return buf;
}

/// Numbered PNG files in `dir`, ordered by their numeric suffix.
inline std::vector<std::filesystem::path> list_frames(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw DataError("not a directory: " + dir.string());
    static const std::regex numbered(R"(.*?(\d+)\.png)", std::regex::icase);
    std::vector<std::pair<unsigned long, std::filesystem::path>> found;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::smatch m;
        const std::string name = entry.path().filename().string();
        if (std::regex_match(name, m, numbered)) found.emplace_back(std::stoul(m[1].str()), entry.path());
    }
    std::sort(found.begin(), found.end());
    std::vector<std::filesystem::path> out;
    for (auto& f : found) out.push_back(std::move(f.second));
    return out;
}

inline FrameSequence read_sequence(const std::filesystem::path& dir) {
    FrameSequence frames;
    for (const auto& p : list_frames(dir)) frames.push_back(read_png(p));
    if (frames.empty()) throw DataError("no numbered PNG frames in " + dir.string());
    for (const auto& f : frames)
        if (f.shape() != frames.front().shape()) throw DataError("frames in " + dir.string() + " differ in size");
    return frames;
}

inline void write_sequence(const std::filesystem::path& dir, const FrameSequence& frames) {
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < frames.size(); ++i) write_png(dir / frame_name(i), frames[i]);
}

}  // namespace udcvr::io
