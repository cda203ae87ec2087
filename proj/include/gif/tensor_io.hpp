#ifndef GIF_TENSOR_IO_HPP
#define GIF_TENSOR_IO_HPP

// .gift tensor files and 8-bit image export.
//
// Record layout (little-endian):
//   "GIFT" | u16 version | u8 dtype | u8 rank | u32 shape[rank] | payload
// dtype 0 is f32, dtype 1 is f64. A file may hold several records back to
// back; checkpoints use that to store an ordered list of tensors.

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "gif/error.hpp"
#include "gif/tensor.hpp"

namespace gif {

static_assert(std::endian::native == std::endian::little, "gif file formats assume a little-endian host");

inline constexpr std::array<char, 4> kTensorMagic{'G', 'I', 'F', 'T'};
inline constexpr std::uint16_t kTensorFormatVersion = 1;

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool get(std::istream& is, T& v) {
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return static_cast<std::size_t>(is.gcount()) == sizeof(T);
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t, Dtype dtype = Dtype::f32) {
    if (!t.all_finite()) throw NumericError("refusing to serialize a tensor with non-finite values");
    if (t.rank() == 0 || t.rank() > 255) throw ShapeError("tensor rank must be in [1, 255]");
    os.write(kTensorMagic.data(), 4);
    detail::put<std::uint16_t>(os, kTensorFormatVersion);
    detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
    detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) {
        if (d > std::numeric_limits<std::uint32_t>::max()) throw ShapeError("dimension exceeds u32");
        detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    }
    if (dtype == Dtype::f32) {
        std::vector<float> buf(t.size());
        for (std::size_t i = 0; i < t.size(); ++i) buf[i] = static_cast<float>(t[i]);
        os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    } else {
        os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!os) throw DataError("tensor write failed");
}

/// Reads one record. Bad magic, version mismatch and truncation raise distinct errors.
inline Tensor read_tensor(std::istream& is) {
    std::array<char, 4> magic{};
    is.read(magic.data(), 4);
    if (is.gcount() != 4) throw TruncatedError("truncated tensor header");
    if (magic != kTensorMagic) throw BadMagicError("not a .gift tensor (bad magic)");
    std::uint16_t version = 0;
    std::uint8_t dtype = 0, rank = 0;
    if (!detail::get(is, version) || !detail::get(is, dtype) || !detail::get(is, rank))
        throw TruncatedError("truncated tensor header");
    if (version != kTensorFormatVersion)
        throw VersionMismatchError("unsupported .gift version " + std::to_string(version));
    if (dtype > 1) throw FormatError("unknown .gift dtype code " + std::to_string(dtype));
    if (rank == 0) throw FormatError("rank-0 tensor record");
    Shape shape(rank);
    for (auto& d : shape) {
        std::uint32_t v = 0;
        if (!detail::get(is, v)) throw TruncatedError("truncated tensor shape");
        if (v == 0) throw FormatError("zero-sized dimension in tensor record");
        d = v;
    }
    const std::size_t n = shape_size(shape);
    std::vector<double> data(n);
    if (dtype == 0) {
        std::vector<float> buf(n);
        is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
        if (static_cast<std::size_t>(is.gcount()) != n * sizeof(float)) throw TruncatedError("truncated tensor payload");
        for (std::size_t i = 0; i < n; ++i) data[i] = buf[i];
    } else {
        is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
        if (static_cast<std::size_t>(is.gcount()) != n * sizeof(double)) throw TruncatedError("truncated tensor payload");
    }
    return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t, Dtype dtype = Dtype::f32) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    write_tensor(os, t, dtype);
}

inline Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path.string());
    return read_tensor(is);
}

inline void save_tensors(const std::filesystem::path& path, const std::vector<Tensor>& ts, Dtype dtype) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    for (const auto& t : ts) write_tensor(os, t, dtype);
}

inline std::vector<Tensor> load_tensors(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path.string());
    std::vector<Tensor> out;
    while (is.peek() != std::char_traits<char>::eof()) out.push_back(read_tensor(is));
    return out;
}

/// Write then read back; the result carries f32 quantization.
inline Tensor tensor_io_roundtrip(const Tensor& t, const std::filesystem::path& path) {
    save_tensor(path, t);
    return load_tensor(path);
}

// ---------------------------------------------------------------- images

struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 1;  // 1 = gray, 3 = RGB
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
        : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

    std::uint8_t& px(std::size_t x, std::size_t y, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
};

inline std::uint8_t to_byte(double v01) {
    const double c = std::clamp(v01, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

/// Min-max scaled grayscale view of a 2-D map; constant maps render black.
inline Image map_to_image(const Tensor& map) {
    if (map.rank() != 2) throw ShapeError("map_to_image needs an [H,W] tensor");
    const std::size_t h = map.dim(0), w = map.dim(1);
    const double lo = map.min(), hi = map.max();
    const double span = hi - lo;
    Image img(w, h, 1);
    for (std::size_t i = 0; i < map.size(); ++i) img.pixels[i] = to_byte(span > 0 ? (map[i] - lo) / span : 0.0);
    return img;
}

inline Image to_gray(const Image& img) {
    if (img.channels == 1) return img;
    Image g(img.width, img.height, 1);
    for (std::size_t i = 0; i < img.width * img.height; ++i) {
        const double y = 0.299 * img.pixels[3 * i] + 0.587 * img.pixels[3 * i + 1] + 0.114 * img.pixels[3 * i + 2];
        g.pixels[i] = static_cast<std::uint8_t>(std::lround(std::min(255.0, y)));
    }
    return g;
}

/// Binary PGM (P5); RGB input is converted to luminance.
inline void write_pgm(const std::filesystem::path& path, const Image& img) {
    const Image g = to_gray(img);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    os << "P5\n" << g.width << ' ' << g.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(g.pixels.data()), static_cast<std::streamsize>(g.pixels.size()));
}

namespace detail {

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

inline void png_chunk(std::vector<std::uint8_t>& out, const char* type, const std::vector<std::uint8_t>& body) {
    put_be32(out, static_cast<std::uint32_t>(body.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), body.begin(), body.end());
    const uLong crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
    put_be32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace detail

/// 8-bit gray or RGB PNG, filter type 0 on every row.
inline void write_png(const std::filesystem::path& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3) throw DataError("PNG export supports 1 or 3 channels");
    const std::size_t stride = img.width * img.channels;
    std::vector<std::uint8_t> raw;
    raw.reserve((stride + 1) * img.height);
    for (std::size_t y = 0; y < img.height; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), img.pixels.begin() + static_cast<std::ptrdiff_t>(y * stride),
                   img.pixels.begin() + static_cast<std::ptrdiff_t>((y + 1) * stride));
    }
    uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> z(zlen);
    if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
        throw DataError("zlib compression failed");
    z.resize(zlen);

    std::vector<std::uint8_t> out{0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
    std::vector<std::uint8_t> ihdr;
    detail::put_be32(ihdr, static_cast<std::uint32_t>(img.width));
    detail::put_be32(ihdr, static_cast<std::uint32_t>(img.height));
    ihdr.push_back(8);                                        // bit depth
    ihdr.push_back(img.channels == 1 ? 0 : 2);                // color type
    ihdr.insert(ihdr.end(), {0, 0, 0});                       // compression, filter, interlace
    detail::png_chunk(out, "IHDR", ihdr);
    detail::png_chunk(out, "IDAT", z);
    detail::png_chunk(out, "IEND", {});

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

}  // namespace gif

#endif  // GIF_TENSOR_IO_HPP
