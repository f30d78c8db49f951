#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "udcvr/tensor.hpp"

namespace udcvr::io {

// Tensor binary layout, all little-endian:
//   "UDCT" | u32 version | u32 ndim | u32 dims[ndim] | f64 payload (row-major)
inline constexpr std::array<char, 4> kTensorMagic{'U', 'D', 'C', 'T'};
inline constexpr std::uint32_t kTensorVersion = 1;

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline void put_f64(std::vector<unsigned char>& out, double d) {
    const auto bits = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

class Reader {
public:
    explicit Reader(const std::vector<unsigned char>& buf) : buf_(buf) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(buf_[pos_ + std::size_t(i)]) << (8 * i);
        pos_ += 4;
        return v;
    }

    double f64() {
        need(8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= std::uint64_t(buf_[pos_ + std::size_t(i)]) << (8 * i);
        pos_ += 8;
        return std::bit_cast<double>(bits);
    }

    void need(std::size_t n) const {
        if (pos_ + n > buf_.size()) throw DataError("UDCT: truncated tensor data");
    }

    std::size_t position() const { return pos_; }
    void skip(std::size_t n) {
        need(n);
        pos_ += n;
    }

private:
    const std::vector<unsigned char>& buf_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_tensor(const Tensor& t) {
    std::vector<unsigned char> out(kTensorMagic.begin(), kTensorMagic.end());
    out.reserve(12 + 4 * t.ndim() + 8 * t.size());
    detail::put_u32(out, kTensorVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(t.ndim()));
    for (auto d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) detail::put_f64(out, v);
    return out;
}

inline Tensor decode_tensor(const std::vector<unsigned char>& buf) {
    if (buf.size() < 4 || std::memcmp(buf.data(), kTensorMagic.data(), 4) != 0)
        throw DataError("UDCT: bad magic bytes");
    detail::Reader r(buf);
    r.skip(4);
    const auto version = r.u32();
    if (version != kTensorVersion) throw DataError("UDCT: unsupported version " + std::to_string(version));
    const auto ndim = r.u32();
    if (ndim == 0) throw DataError("UDCT: zero-rank tensor");
    Shape shape(ndim);
    for (auto& d : shape) d = r.u32();
    std::vector<double> data(numel(shape));
    r.need(8 * data.size());
    for (auto& v : data) v = r.f64();
    if (r.position() != buf.size()) throw DataError("UDCT: trailing bytes after payload");
    return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    const auto bytes = encode_tensor(t);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!f) throw DataError("failed writing " + path.string());
}

inline Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_tensor(bytes);
}

}  // namespace udcvr::io
