#include "spda/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

#include "spda/errors.hpp"

namespace spda {

namespace {
struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

uint16_t clamp_u16(double v, double scale) {
    double x = v * scale;
    if (x < 0) x = 0;
    if (x > scale) x = scale;
    return static_cast<uint16_t>(std::lround(x));
}
}  // namespace

ImageU16 read_png(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IngestError("cannot open image: " + path);
    png_byte header[8];
    if (std::fread(header, 1, 8, f.get()) != 8 || png_sig_cmp(header, 0, 8))
        throw IngestError("not a PNG file: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IngestError("failed to decode PNG: " + path);
    }
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    int bit_depth = png_get_bit_depth(png, info);
    int color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    if (bit_depth == 16) png_set_swap(png);  // host is little-endian
    png_read_update_info(png, info);

    ImageU16 img;
    img.h = static_cast<int>(png_get_image_height(png, info));
    img.w = static_cast<int>(png_get_image_width(png, info));
    img.bit_depth = bit_depth == 16 ? 16 : 8;
    int channels = static_cast<int>(png_get_channels(png, info));
    img.channels = channels >= 3 ? 3 : 1;

    size_t rowbytes = png_get_rowbytes(png, info);
    std::vector<png_byte> row(rowbytes);
    img.data.resize(static_cast<size_t>(img.h) * img.w * img.channels);
    for (int y = 0; y < img.h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < img.w; ++x) {
            for (int c = 0; c < img.channels; ++c) {
                size_t si = static_cast<size_t>(x) * channels + c;
                uint16_t v;
                if (bit_depth == 16)
                    std::memcpy(&v, row.data() + si * 2, 2);
                else
                    v = row[si];
                img.data[(static_cast<size_t>(y) * img.w + x) * img.channels + c] = v;
            }
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

namespace {
void write_png_impl(const std::string& path, int h, int w, int channels, int bit_depth,
                    const std::vector<uint16_t>& data) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IngestError("cannot open image for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IngestError("failed to encode PNG: " + path);
    }
    png_init_io(png, f.get());
    int color = channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), bit_depth,
                 color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    if (bit_depth == 16) png_set_swap(png);

    std::vector<png_byte> row(static_cast<size_t>(w) * channels * (bit_depth / 8));
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w * channels; ++x) {
            uint16_t v = data[static_cast<size_t>(y) * w * channels + x];
            if (bit_depth == 16)
                std::memcpy(row.data() + static_cast<size_t>(x) * 2, &v, 2);
            else
                row[static_cast<size_t>(x)] = static_cast<png_byte>(v);
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}
}  // namespace

void write_png_rgb(const std::string& path, const Tensor& rgb_chw) {
    if (rgb_chw.rank() != 3 || rgb_chw.dim(0) != 3)
        throw ShapeError("write_png_rgb expects (3,H,W), got " + shape_str(rgb_chw.shape));
    int h = rgb_chw.dim(1), w = rgb_chw.dim(2);
    std::vector<uint16_t> data(static_cast<size_t>(h) * w * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                data[(static_cast<size_t>(y) * w + x) * 3 + c] =
                    clamp_u16(rgb_chw.at3(c, y, x), 255.0);
    write_png_impl(path, h, w, 3, 8, data);
}

void write_png_gray(const std::string& path, const Tensor& gray_hw, int bit_depth) {
    if (gray_hw.rank() != 2)
        throw ShapeError("write_png_gray expects (H,W), got " + shape_str(gray_hw.shape));
    if (bit_depth != 8 && bit_depth != 16) throw ConfigError("png bit depth must be 8 or 16");
    int h = gray_hw.dim(0), w = gray_hw.dim(1);
    double scale = bit_depth == 16 ? 65535.0 : 255.0;
    std::vector<uint16_t> data(static_cast<size_t>(h) * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            data[static_cast<size_t>(y) * w + x] = clamp_u16(gray_hw.at2(y, x), scale);
    write_png_impl(path, h, w, 1, bit_depth, data);
}

Tensor read_f32_grid(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IngestError("cannot open raw grid: " + path);
    char magic[7];
    if (std::fread(magic, 1, 7, f.get()) != 7 || std::memcmp(magic, "SPDAF32", 7) != 0)
        throw IngestError("not a raw float32 grid (bad magic): " + path);
    uint32_t w = 0, h = 0;
    if (std::fread(&w, 4, 1, f.get()) != 1 || std::fread(&h, 4, 1, f.get()) != 1)
        throw IngestError("truncated raw grid header: " + path);
    if (w == 0 || h == 0 || w > 1u << 20 || h > 1u << 20)
        throw IngestError("implausible raw grid size in " + path);
    std::vector<float> buf(static_cast<size_t>(w) * h);
    if (std::fread(buf.data(), 4, buf.size(), f.get()) != buf.size())
        throw IngestError("raw grid data shorter than header promises: " + path);
    Tensor out({static_cast<int>(h), static_cast<int>(w)});
    for (size_t i = 0; i < buf.size(); ++i) out[static_cast<int64_t>(i)] = buf[i];
    return out;
}

void write_f32_grid(const std::string& path, const Tensor& gray_hw) {
    if (gray_hw.rank() != 2)
        throw ShapeError("write_f32_grid expects (H,W), got " + shape_str(gray_hw.shape));
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IngestError("cannot open raw grid for writing: " + path);
    std::fwrite("SPDAF32", 1, 7, f.get());
    uint32_t w = static_cast<uint32_t>(gray_hw.dim(1)), h = static_cast<uint32_t>(gray_hw.dim(0));
    std::fwrite(&w, 4, 1, f.get());
    std::fwrite(&h, 4, 1, f.get());
    std::vector<float> buf(gray_hw.data.begin(), gray_hw.data.end());
    if (std::fwrite(buf.data(), 4, buf.size(), f.get()) != buf.size())
        throw IngestError("failed writing raw grid: " + path);
}

Tensor image_to_gray_tensor(const ImageU16& img) {
    double scale = img.bit_depth == 16 ? 65535.0 : 255.0;
    Tensor out({img.h, img.w});
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            if (img.channels == 1) {
                out.at2(y, x) = img.data[(static_cast<size_t>(y) * img.w + x)] / scale;
            } else {
                size_t i = (static_cast<size_t>(y) * img.w + x) * 3;
                out.at2(y, x) =
                    (img.data[i] * 0.299 + img.data[i + 1] * 0.587 + img.data[i + 2] * 0.114) /
                    scale;
            }
        }
    return out;
}

Tensor image_to_rgb_tensor(const ImageU16& img) {
    double scale = img.bit_depth == 16 ? 65535.0 : 255.0;
    Tensor out({3, img.h, img.w});
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) {
                size_t i = (static_cast<size_t>(y) * img.w + x) * img.channels;
                out.at3(c, y, x) = img.data[i + (img.channels == 3 ? c : 0)] / scale;
            }
    return out;
}

}  // namespace spda
