#pragma once

#include <cstdint>

#include "ssdfs/bytes.hpp"

namespace ssdfs {

// Payload fragment codecs. Id 0 is identity, id 1 is deflate (zlib).
// Every codec must satisfy decode(encode(x), x.size()) == x.
enum : std::uint8_t {
    kCodecNone = 0,
    kCodecZlib = 1,
};

Bytes codec_encode(std::uint8_t codec_id, ByteView data);
Bytes codec_decode(std::uint8_t codec_id, ByteView data, std::size_t decoded_size);

bool codec_known(std::uint8_t codec_id);

} // namespace ssdfs
