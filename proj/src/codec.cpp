#include "ssdfs/codec.hpp"

#include <zlib.h>

namespace ssdfs {

bool codec_known(std::uint8_t codec_id) { return codec_id == kCodecNone || codec_id == kCodecZlib; }

Bytes codec_encode(std::uint8_t codec_id, ByteView data) {
    switch (codec_id) {
        case kCodecNone:
            return Bytes(data.begin(), data.end());
        case kCodecZlib: {
            uLongf bound = compressBound(static_cast<uLong>(data.size()));
            Bytes out(bound);
            int rc = compress2(out.data(), &bound, data.data(), static_cast<uLong>(data.size()), 6);
            if (rc != Z_OK) fail(Errc::io_error, "deflate failed");
            out.resize(bound);
            return out;
        }
        default:
            fail(Errc::malformed, "unknown codec id");
    }
}

Bytes codec_decode(std::uint8_t codec_id, ByteView data, std::size_t decoded_size) {
    switch (codec_id) {
        case kCodecNone: {
            if (data.size() != decoded_size) fail(Errc::malformed, "identity codec size mismatch");
            return Bytes(data.begin(), data.end());
        }
        case kCodecZlib: {
            Bytes out(decoded_size);
            uLongf n = static_cast<uLongf>(decoded_size);
            int rc = uncompress(out.data(), &n, data.data(), static_cast<uLong>(data.size()));
            if (rc != Z_OK || n != decoded_size) fail(Errc::malformed, "inflate failed");
            return out;
        }
        default:
            fail(Errc::malformed, "unknown codec id");
    }
}

} // namespace ssdfs
