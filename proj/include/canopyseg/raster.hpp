#pragma once

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <png.h>

#include "canopyseg/errors.hpp"

namespace canopyseg {

inline constexpr int kPatchSize = 64;
inline constexpr int kPatchPixels = kPatchSize * kPatchSize;

struct Rgba {
    std::uint8_t r = 0, g = 0, b = 0, a = 255;
    bool operator==(const Rgba&) const = default;
};

// Orthomosaic imagery: row-major RGBA, 8 bits per sample. Blank spots in a
// stitched mosaic are encoded as alpha-0 pixels.
struct RgbRaster {
    int width = 0;
    int height = 0;
    std::vector<Rgba> pixels;
    std::optional<double> resolution_cm_per_px;

    Rgba& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    const Rgba& at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }

    static RgbRaster filled(int w, int h, Rgba color) {
        RgbRaster r;
        r.width = w;
        r.height = h;
        r.pixels.assign(static_cast<std::size_t>(w) * h, color);
        return r;
    }
};

// Per-pixel species map: 1 marks the target species, 0 everything else.
struct MaskRaster {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> values;

    std::uint8_t& at(int x, int y) { return values[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }

    static MaskRaster zeros(int w, int h) {
        MaskRaster m;
        m.width = w;
        m.height = h;
        m.values.assign(static_cast<std::size_t>(w) * h, 0);
        return m;
    }
};

struct PatchOrigin {
    int x = 0;
    int y = 0;
    bool operator==(const PatchOrigin&) const = default;
};

// A pixel-aligned crop of an orthomosaic and its species map.
struct Patch {
    PatchOrigin origin;
    RgbRaster image;   // kPatchSize x kPatchSize, alpha retained for blank detection
    MaskRaster target; // kPatchSize x kPatchSize, values in {0,1}
};

namespace detail {

struct FileHandle {
    std::FILE* f = nullptr;
    explicit FileHandle(const std::string& path, const char* mode) : f(std::fopen(path.c_str(), mode)) {}
    ~FileHandle() {
        if (f) std::fclose(f);
    }
    FileHandle(const FileHandle&) = delete;
    FileHandle& operator=(const FileHandle&) = delete;
};

// libpng reports errors through longjmp; the jump target sets `failed` and
// control leaves through the normal cleanup path, so no destructor is skipped.
struct PngRead {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngRead() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    }
};

struct PngWrite {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngWrite() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    }
};

inline void png_quiet_warning(png_structp, png_const_charp) {}

inline void png_quiet_error(png_structp png, png_const_charp) { png_longjmp(png, 1); }

} // namespace detail

// Decodes an 8-bit RGB or RGBA PNG. RGB input gains an opaque alpha channel.
inline RgbRaster load_rgb(const std::string& path) {
    detail::FileHandle file(path, "rb");
    if (!file.f) throw IoError("cannot open for reading: " + path);

    unsigned char sig[8];
    if (std::fread(sig, 1, 8, file.f) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw FormatError("not a PNG file: " + path);

    detail::PngRead ctx;
    ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_quiet_error, detail::png_quiet_warning);
    if (!ctx.png) throw Error("png_create_read_struct failed");
    ctx.info = png_create_info_struct(ctx.png);
    if (!ctx.info) throw Error("png_create_info_struct failed");

    RgbRaster out;
    std::vector<png_bytep> rows;
    bool failed = false;
    if (setjmp(png_jmpbuf(ctx.png))) {
        failed = true;
    } else {
        png_init_io(ctx.png, file.f);
        png_set_sig_bytes(ctx.png, 8);
        png_read_info(ctx.png, ctx.info);

        const png_uint_32 w = png_get_image_width(ctx.png, ctx.info);
        const png_uint_32 h = png_get_image_height(ctx.png, ctx.info);
        const int bit_depth = png_get_bit_depth(ctx.png, ctx.info);
        const int color_type = png_get_color_type(ctx.png, ctx.info);
        if (bit_depth != 8) throw FormatError("unsupported bit depth " + std::to_string(bit_depth) + ": " + path);
        if (color_type != PNG_COLOR_TYPE_RGB && color_type != PNG_COLOR_TYPE_RGB_ALPHA)
            throw FormatError("expected 8-bit RGB or RGBA PNG: " + path);
        if (color_type == PNG_COLOR_TYPE_RGB) png_set_filler(ctx.png, 0xFF, PNG_FILLER_AFTER);

        out.width = static_cast<int>(w);
        out.height = static_cast<int>(h);
        out.pixels.resize(static_cast<std::size_t>(w) * h);
        rows.resize(h);
        for (png_uint_32 y = 0; y < h; ++y)
            rows[y] = reinterpret_cast<png_bytep>(out.pixels.data() + static_cast<std::size_t>(y) * w);
        png_read_image(ctx.png, rows.data());
    }
    if (failed) throw FormatError("corrupt or truncated PNG: " + path);
    return out;
}

inline void save_rgb(const std::string& path, const RgbRaster& raster) {
    detail::FileHandle file(path, "wb");
    if (!file.f) throw IoError("cannot open for writing: " + path);

    detail::PngWrite ctx;
    ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_quiet_error, detail::png_quiet_warning);
    if (!ctx.png) throw Error("png_create_write_struct failed");
    ctx.info = png_create_info_struct(ctx.png);
    if (!ctx.info) throw Error("png_create_info_struct failed");

    std::vector<png_bytep> rows(raster.height);
    bool failed = false;
    if (setjmp(png_jmpbuf(ctx.png))) {
        failed = true;
    } else {
        png_init_io(ctx.png, file.f);
        png_set_IHDR(ctx.png, ctx.info, raster.width, raster.height, 8, PNG_COLOR_TYPE_RGB_ALPHA,
                     PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(ctx.png, ctx.info);
        for (int y = 0; y < raster.height; ++y)
            rows[y] = reinterpret_cast<png_bytep>(
                const_cast<Rgba*>(raster.pixels.data() + static_cast<std::size_t>(y) * raster.width));
        png_write_image(ctx.png, rows.data());
        png_write_end(ctx.png, nullptr);
    }
    if (failed) throw IoError("PNG write failed: " + path);
}

// Binarizes an 8-bit grayscale or RGB(A) PNG: 1 where luma >= 128, else 0.
// RGB luma is the rounded mean of R, G and B.
inline MaskRaster load_mask(const std::string& path) {
    detail::FileHandle file(path, "rb");
    if (!file.f) throw IoError("cannot open for reading: " + path);

    unsigned char sig[8];
    if (std::fread(sig, 1, 8, file.f) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw FormatError("not a PNG file: " + path);

    detail::PngRead ctx;
    ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_quiet_error, detail::png_quiet_warning);
    if (!ctx.png) throw Error("png_create_read_struct failed");
    ctx.info = png_create_info_struct(ctx.png);
    if (!ctx.info) throw Error("png_create_info_struct failed");

    MaskRaster out;
    std::vector<std::uint8_t> buffer;
    std::vector<png_bytep> rows;
    int channels = 0;
    bool failed = false;
    if (setjmp(png_jmpbuf(ctx.png))) {
        failed = true;
    } else {
        png_init_io(ctx.png, file.f);
        png_set_sig_bytes(ctx.png, 8);
        png_read_info(ctx.png, ctx.info);

        const png_uint_32 w = png_get_image_width(ctx.png, ctx.info);
        const png_uint_32 h = png_get_image_height(ctx.png, ctx.info);
        const int bit_depth = png_get_bit_depth(ctx.png, ctx.info);
        const int color_type = png_get_color_type(ctx.png, ctx.info);
        if (bit_depth != 8) throw FormatError("unsupported bit depth " + std::to_string(bit_depth) + ": " + path);
        switch (color_type) {
        case PNG_COLOR_TYPE_GRAY: channels = 1; break;
        case PNG_COLOR_TYPE_GRAY_ALPHA: channels = 2; break;
        case PNG_COLOR_TYPE_RGB: channels = 3; break;
        case PNG_COLOR_TYPE_RGB_ALPHA: channels = 4; break;
        default: throw FormatError("expected grayscale or RGB PNG: " + path);
        }

        out.width = static_cast<int>(w);
        out.height = static_cast<int>(h);
        buffer.resize(static_cast<std::size_t>(w) * h * channels);
        rows.resize(h);
        for (png_uint_32 y = 0; y < h; ++y)
            rows[y] = buffer.data() + static_cast<std::size_t>(y) * w * channels;
        png_read_image(ctx.png, rows.data());

        out.values.resize(static_cast<std::size_t>(w) * h);
        for (std::size_t i = 0; i < out.values.size(); ++i) {
            const std::uint8_t* px = buffer.data() + i * channels;
            long luma;
            if (channels <= 2) {
                luma = px[0];
            } else {
                luma = std::lround((static_cast<double>(px[0]) + px[1] + px[2]) / 3.0);
            }
            out.values[i] = luma >= 128 ? 1 : 0;
        }
    }
    if (failed) throw FormatError("corrupt or truncated PNG: " + path);
    return out;
}

// Writes a mask as an 8-bit grayscale PNG with values 0/255, the inverse of
// load_mask's binarization.
inline void save_mask(const std::string& path, const MaskRaster& mask) {
    detail::FileHandle file(path, "wb");
    if (!file.f) throw IoError("cannot open for writing: " + path);

    detail::PngWrite ctx;
    ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_quiet_error, detail::png_quiet_warning);
    if (!ctx.png) throw Error("png_create_write_struct failed");
    ctx.info = png_create_info_struct(ctx.png);
    if (!ctx.info) throw Error("png_create_info_struct failed");

    std::vector<std::uint8_t> buffer(mask.values.size());
    for (std::size_t i = 0; i < buffer.size(); ++i) buffer[i] = mask.values[i] ? 255 : 0;

    std::vector<png_bytep> rows(mask.height);
    bool failed = false;
    if (setjmp(png_jmpbuf(ctx.png))) {
        failed = true;
    } else {
        png_init_io(ctx.png, file.f);
        png_set_IHDR(ctx.png, ctx.info, mask.width, mask.height, 8, PNG_COLOR_TYPE_GRAY,
                     PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(ctx.png, ctx.info);
        for (int y = 0; y < mask.height; ++y)
            rows[y] = buffer.data() + static_cast<std::size_t>(y) * mask.width;
        png_write_image(ctx.png, rows.data());
        png_write_end(ctx.png, nullptr);
    }
    if (failed) throw IoError("PNG write failed: " + path);
}

// Enumerates the regular grid x = 0, stride, 2*stride, ... while
// x + patch <= width (same for y). Incomplete border windows are dropped,
// never padded, so every target crop stays exact.
inline std::vector<Patch> partition(const RgbRaster& image, const MaskRaster& mask,
                                    int patch = kPatchSize, int stride = kPatchSize) {
    if (image.width != mask.width || image.height != mask.height)
        throw DimensionError("image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                             " vs mask " + std::to_string(mask.width) + "x" + std::to_string(mask.height));
    if (patch <= 0 || stride <= 0) throw ArgumentError("patch and stride must be positive");

    std::vector<Patch> out;
    for (int y = 0; y + patch <= image.height; y += stride) {
        for (int x = 0; x + patch <= image.width; x += stride) {
            Patch p;
            p.origin = {x, y};
            p.image.width = patch;
            p.image.height = patch;
            p.image.resolution_cm_per_px = image.resolution_cm_per_px;
            p.image.pixels.resize(static_cast<std::size_t>(patch) * patch);
            p.target.width = patch;
            p.target.height = patch;
            p.target.values.resize(static_cast<std::size_t>(patch) * patch);
            for (int py = 0; py < patch; ++py) {
                for (int px = 0; px < patch; ++px) {
                    p.image.at(px, py) = image.at(x + px, y + py);
                    p.target.at(px, py) = mask.at(x + px, y + py);
                }
            }
            out.push_back(std::move(p));
        }
    }
    return out;
}

// Arithmetic mean over all R, G and B samples of a patch; alpha is excluded.
inline double mean_brightness(const RgbRaster& patch) {
    if (patch.pixels.empty()) return 0.0;
    std::uint64_t sum = 0;
    for (const Rgba& px : patch.pixels) sum += static_cast<std::uint64_t>(px.r) + px.g + px.b;
    return static_cast<double>(sum) / (3.0 * static_cast<double>(patch.pixels.size()));
}

// Fraction of alpha-0 pixels, the blank-spot indicator of a stitched mosaic.
inline double blank_fraction(const RgbRaster& patch) {
    if (patch.pixels.empty()) return 0.0;
    std::size_t blank = 0;
    for (const Rgba& px : patch.pixels)
        if (px.a == 0) ++blank;
    return static_cast<double>(blank) / static_cast<double>(patch.pixels.size());
}

enum class RejectReason { Brightness, Blank };

inline const char* reject_reason_name(RejectReason r) {
    return r == RejectReason::Brightness ? "brightness" : "blank";
}

struct Rejection {
    PatchOrigin origin;
    RejectReason reason;
};

struct FilterResult {
    std::vector<Patch> kept;
    std::vector<Rejection> rejected;
};

// Drops patches that depict mostly bright ground (mean brightness above the
// threshold) or that fall on blank mosaic spots (alpha-0 fraction above the
// blank threshold). Order of the kept subset is preserved.
inline FilterResult filter_patches(const std::vector<Patch>& patches, double brightness_threshold = 160.0,
                                   double blank_threshold = 0.25) {
    if (brightness_threshold < 0.0 || brightness_threshold > 255.0)
        throw ArgumentError("brightness_threshold must be in [0, 255]");
    if (blank_threshold < 0.0 || blank_threshold > 1.0)
        throw ArgumentError("blank_threshold must be in [0, 1]");

    FilterResult result;
    for (const Patch& p : patches) {
        if (mean_brightness(p.image) > brightness_threshold) {
            result.rejected.push_back({p.origin, RejectReason::Brightness});
        } else if (blank_fraction(p.image) > blank_threshold) {
            result.rejected.push_back({p.origin, RejectReason::Blank});
        } else {
            result.kept.push_back(p);
        }
    }
    return result;
}

// One `origin_x,origin_y,reason` line per rejection.
inline std::string rejection_log(const std::vector<Rejection>& rejected) {
    std::string log;
    for (const Rejection& r : rejected) {
        log += std::to_string(r.origin.x) + "," + std::to_string(r.origin.y) + "," + reject_reason_name(r.reason) + "\n";
    }
    return log;
}

} // namespace canopyseg
