#include "ssdfs/bytes.hpp"

#include <array>

namespace ssdfs {

const char* errc_name(Errc c) {
    switch (c) {
        case Errc::rewrite_without_erase: return "RewriteWithoutErase";
        case Errc::bad_block: return "BadBlock";
        case Errc::out_of_range: return "OutOfRange";
        case Errc::unwritten_page: return "UnwrittenPage";
        case Errc::corrupt_image: return "CorruptImage";
        case Errc::crash_injected: return "CrashInjected";
        case Errc::bad_magic: return "BadMagic";
        case Errc::bad_checksum: return "BadChecksum";
        case Errc::malformed: return "MalformedDescriptor";
        case Errc::log_full: return "LogFull";
        case Errc::invalid_length: return "InvalidLength";
        case Errc::delta_out_of_range: return "DeltaOutOfRange";
        case Errc::lost_base: return "LostBase";
        case Errc::device_full: return "DeviceFull";
        case Errc::no_clean_peb: return "NoCleanPeb";
        case Errc::already_migrating: return "AlreadyMigrating";
        case Errc::source_still_live: return "SourceStillLive";
        case Errc::illegal_transition: return "IllegalTransition";
        case Errc::no_space: return "NoSpace";
        case Errc::duplicate_key: return "DuplicateKey";
        case Errc::key_not_found: return "KeyNotFound";
        case Errc::storage_full: return "StorageFull";
        case Errc::exists: return "Exists";
        case Errc::not_found: return "NotFound";
        case Errc::overlap: return "Overlap";
        case Errc::value_too_large: return "ValueTooLarge";
        case Errc::io_error: return "IOError";
    }
    return "UnknownError";
}

namespace {

std::array<std::uint32_t, 256> make_crc32c_table() {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; i++) {
        std::uint32_t c = i;
        for (int k = 0; k < 8; k++) c = (c & 1) ? 0x82F63B78u ^ (c >> 1) : c >> 1;
        t[i] = c;
    }
    return t;
}

} // namespace

std::uint32_t crc32c(ByteView data) {
    static const auto table = make_crc32c_table();
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::uint8_t b : data) c = table[(c ^ b) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

std::uint64_t fnv1a64(ByteView data) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::uint8_t b : data) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

} // namespace ssdfs
