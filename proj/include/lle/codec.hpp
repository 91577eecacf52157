#pragma once

// PNG (8-bit, via libpng) and binary PPM (P6, maxval 255) codecs.

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lle/error.hpp"
#include "lle/image.hpp"

namespace lle {

namespace detail {

inline std::string lower_extension(const std::filesystem::path& path) {
    std::string ext = path.extension().string();
    for (char& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return ext;
}

inline Image image_from_bytes(std::size_t height, std::size_t width, const std::uint8_t* bytes, std::size_t stride,
                              std::size_t bytes_per_pixel) {
    Image img(height, width);
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                img.at(y, x, c) = bytes[y * stride + x * bytes_per_pixel + c] / 255.0;
    return img;
}

/// Export rule: clamp to [0, 1], scale by 255, round half away from zero.
inline std::vector<std::uint8_t> image_to_bytes(const Image& img) {
    std::vector<std::uint8_t> bytes(img.size());
    const auto src = img.data();
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (!std::isfinite(src[i])) throw DomainError("cannot export non-finite sample");
        bytes[i] = static_cast<std::uint8_t>(std::round(std::clamp(src[i], 0.0, 1.0) * 255.0));
    }
    return bytes;
}

inline Image load_png(const std::filesystem::path& path) {
    png_image info{};
    info.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&info, path.c_str()))
        throw DecodeError(path.string() + ": " + info.message);
    if (info.format & PNG_FORMAT_FLAG_LINEAR) {
        png_image_free(&info);
        throw DecodeError(path.string() + ": unsupported bit depth 16 (expected 8-bit PNG)");
    }
    // Decode as RGBA so alpha is dropped rather than composited.
    info.format = PNG_FORMAT_RGBA;
    std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(info));
    if (!png_image_finish_read(&info, nullptr, buffer.data(), 0, nullptr)) {
        const std::string msg = info.message;
        png_image_free(&info);
        throw DecodeError(path.string() + ": " + msg);
    }
    return image_from_bytes(info.height, info.width, buffer.data(), std::size_t{info.width} * 4, 4);
}

inline void save_png(const Image& img, const std::filesystem::path& path) {
    const auto bytes = image_to_bytes(img);
    png_image info{};
    info.version = PNG_IMAGE_VERSION;
    info.width = static_cast<png_uint_32>(img.width());
    info.height = static_cast<png_uint_32>(img.height());
    info.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&info, path.c_str(), 0, bytes.data(), 0, nullptr))
        throw IoError(path.string() + ": " + info.message);
}

inline void skip_ppm_whitespace(std::istream& in) {
    while (true) {
        const int ch = in.peek();
        if (ch == '#') {
            std::string comment;
            std::getline(in, comment);
        } else if (ch != EOF && std::isspace(ch)) {
            in.get();
        } else {
            return;
        }
    }
}

inline std::size_t read_ppm_field(std::istream& in, const std::string& name, const std::filesystem::path& path) {
    skip_ppm_whitespace(in);
    long long value = -1;
    if (!(in >> value) || value <= 0) throw DecodeError(path.string() + ": invalid PPM " + name);
    return static_cast<std::size_t>(value);
}

inline Image load_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DecodeError(path.string() + ": cannot open file");
    char magic[2]{};
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || magic[1] != '6')
        throw DecodeError(path.string() + ": unsupported PPM magic (expected P6)");
    const std::size_t width = read_ppm_field(in, "width", path);
    const std::size_t height = read_ppm_field(in, "height", path);
    const std::size_t maxval = read_ppm_field(in, "maxval", path);
    if (maxval != 255) throw DecodeError(path.string() + ": unsupported PPM maxval " + std::to_string(maxval) + " (expected 255)");
    in.get();  // single whitespace before the raster
    std::vector<std::uint8_t> bytes(width * height * 3);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw DecodeError(path.string() + ": truncated PPM raster");
    return image_from_bytes(height, width, bytes.data(), width * 3, 3);
}

inline void save_ppm(const Image& img, const std::filesystem::path& path) {
    const auto bytes = image_to_bytes(img);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(path.string() + ": cannot open for writing");
    out << "P6\n" << img.width() << ' ' << img.height() << "\n255\n";
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(path.string() + ": write failed");
}

}  // namespace detail

/// Decodes an 8-bit PNG (gray, gray+alpha, RGB, RGBA, palette) or a P6 PPM
/// into [0, 1] samples. The format is sniffed from the file signature.
inline Image load_image(const std::filesystem::path& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw DecodeError(path.string() + ": cannot open file");
    unsigned char sig[8]{};
    probe.read(reinterpret_cast<char*>(sig), 8);
    const auto got = probe.gcount();
    probe.close();
    if (got == 8 && png_sig_cmp(sig, 0, 8) == 0) return detail::load_png(path);
    if (got >= 2 && sig[0] == 'P' && sig[1] == '6') return detail::load_ppm(path);
    throw DecodeError(path.string() + ": unsupported format (expected PNG or P6 PPM)");
}

/// Writes PNG or P6 PPM chosen by extension (.png / .ppm).
inline void save_image(const Image& img, const std::filesystem::path& path) {
    const std::string ext = detail::lower_extension(path);
    if (ext == ".png") return detail::save_png(img, path);
    if (ext == ".ppm") return detail::save_ppm(img, path);
    throw IoError(path.string() + ": unsupported output extension '" + ext + "'");
}

}  // namespace lle
