#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "ssdfs/errors.hpp"

namespace ssdfs {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

// Little-endian append-only encoder for on-volume structures.
class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) { le(v, 2); }
    void u32(std::uint32_t v) { le(v, 4); }
    void u64(std::uint64_t v) { le(v, 8); }

    void bytes(ByteView b) { buf_.insert(buf_.end(), b.begin(), b.end()); }

    void fixed_string(const std::string& s, std::size_t n) {
        std::size_t k = s.size() < n ? s.size() : n;
        buf_.insert(buf_.end(), s.begin(), s.begin() + static_cast<std::ptrdiff_t>(k));
        buf_.insert(buf_.end(), n - k, 0);
    }

    void patch_u32(std::size_t pos, std::uint32_t v) {
        for (int i = 0; i < 4; i++) buf_[pos + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v >> (8 * i));
    }

    std::size_t size() const { return buf_.size(); }
    Bytes take() { return std::move(buf_); }
    const Bytes& data() const { return buf_; }

private:
    void le(std::uint64_t v, int n) {
        for (int i = 0; i < n; i++) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    Bytes buf_;
};

// Bounds-checked little-endian decoder.
class ByteReader {
public:
    explicit ByteReader(ByteView b) : buf_(b) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
    std::uint64_t u64() { return le(8); }

    Bytes bytes(std::size_t n) {
        need(n);
        Bytes out(buf_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return out;
    }

    std::string fixed_string(std::size_t n) {
        Bytes raw = bytes(n);
        std::size_t len = 0;
        while (len < n && raw[len] != 0) len++;
        return std::string(raw.begin(), raw.begin() + static_cast<std::ptrdiff_t>(len));
    }

    void skip(std::size_t n) {
        need(n);
        pos_ += n;
    }

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return buf_.size() - pos_; }

private:
    void need(std::size_t n) {
        if (pos_ + n > buf_.size()) fail(Errc::malformed, "truncated structure");
    }
    std::uint64_t le(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; i++) v |= static_cast<std::uint64_t>(buf_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }
    ByteView buf_;
    std::size_t pos_ = 0;
};

// CRC-32 with the Castagnoli polynomial, used by all on-volume checksums.
std::uint32_t crc32c(ByteView data);

// 64-bit FNV-1a, used for file and attribute name hashing.
std::uint64_t fnv1a64(ByteView data);
inline std::uint64_t fnv1a64(const std::string& s) {
    return fnv1a64(ByteView(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

} // namespace ssdfs
