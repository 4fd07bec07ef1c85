#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ssdfs/bytes.hpp"
#include "ssdfs/nand.hpp"

namespace ssdfs {

// On-volume layout. All integers little-endian, fixed width. Every top-level
// structure is framed as [magic][total_len][crc32c][fields...] with the
// checksum computed over the whole frame with the checksum field zeroed.

constexpr std::uint32_t kMagicSegmentHeader = 0x46445353; // "SSDF"
constexpr std::uint32_t kMagicPartialHeader = 0x44484C50; // "PLHD"
constexpr std::uint32_t kMagicLogFooter = 0x54465353;     // "SSFT"

constexpr std::uint64_t kNoSegment = ~0ull;

enum class AreaType : std::uint8_t {
    block_bitmap = 0,
    blk_table = 1,
    blk_desc_table = 2,
    main = 3,
    diff = 4,
    journal = 5,
    footer = 6,
};

const char* area_type_name(AreaType t);

struct AreaDescriptor {
    AreaType area_type = AreaType::main;
    std::uint8_t codec_id = 0;
    std::uint64_t offset = 0; // bytes from log start
    std::uint64_t size = 0;   // bytes

    bool operator==(const AreaDescriptor&) const = default;
};

// Log kind flags carried in header structures.
enum : std::uint8_t {
    kLogFull = 1u << 0,          // header starts a full log (footer present)
    kLogPartialFirst = 1u << 1,  // header precedes the first partial log of a PEB
    kLogHasFooter = 1u << 2,     // a partial log closing its chain with a footer
};

struct StaticVolumeParams {
    std::uint32_t page_size = 0;
    std::uint32_t pages_per_peb = 0;
    std::uint32_t pebs_per_segment = 0;
    std::uint64_t segment_size = 0;
    std::uint64_t creation_timestamp = 0;
    std::uint32_t inode_size = 0;

    bool operator==(const StaticVolumeParams&) const = default;
};

struct SuperblockChain {
    // prev/cur/next superblock segment ids, two replicated copies each.
    std::array<std::uint64_t, 2> prev{kNoSegment, kNoSegment};
    std::array<std::uint64_t, 2> cur{kNoSegment, kNoSegment};
    std::array<std::uint64_t, 2> next{kNoSegment, kNoSegment};

    bool operator==(const SuperblockChain&) const = default;
};

struct ReservedSegments {
    std::vector<std::uint64_t> mapping_table_segs;
    std::vector<std::uint64_t> segment_bitmap_segs;

    bool operator==(const ReservedSegments&) const = default;
};

struct SegmentHeader {
    StaticVolumeParams params;
    SuperblockChain sb_chain;
    ReservedSegments reserved;
    std::uint64_t checkpoint_id = 0;
    std::uint64_t seg_id = 0;
    std::uint16_t leb_index = 0;
    std::uint8_t seg_type = 0;
    std::uint8_t flags = 0;
    std::uint32_t log_pages = 0; // committed extent of this log, in pages
    std::vector<AreaDescriptor> areas;

    bool operator==(const SegmentHeader&) const = default;
};

struct PartialLogHeader {
    std::uint64_t checkpoint_id = 0;
    std::uint32_t page_size = 0;
    std::uint32_t pages_per_peb = 0;
    std::uint64_t free_blocks = 0;
    std::uint64_t files_count = 0;
    std::uint64_t seg_id = 0;
    std::uint16_t leb_index = 0;
    std::uint8_t seg_type = 0;
    std::uint8_t flags = 0;
    std::uint32_t log_pages = 0;
    std::vector<AreaDescriptor> areas;

    bool operator==(const PartialLogHeader&) const = default;
};

// Serialized embedded b-tree root: two record slots, each an index record or
// an inline data record, plus the inline payload region for data records.
enum class RootSlotKind : std::uint8_t { empty = 0, index = 1, data = 2 };

struct RootSlot {
    RootSlotKind kind = RootSlotKind::empty;
    std::uint64_t key = 0;
    std::uint64_t child_seg = kNoSegment;
    std::uint32_t child_block = 0;
    std::uint32_t child_len = 0;
    std::uint8_t child_kind = 0;
    std::uint8_t preallocated = 0;

    bool operator==(const RootSlot&) const = default;
};

struct RootNodeImage {
    std::uint8_t height = 0;
    std::uint8_t flags = 0;
    std::uint32_t item_size = 0;
    std::uint16_t item_count = 0;
    std::array<RootSlot, 2> slots{};
    Bytes inline_payload; // 2 * item_size bytes

    bool operator==(const RootNodeImage&) const = default;
};

struct DynamicVolumeState {
    std::uint64_t free_blocks = 0;
    std::uint64_t files_count = 0;
    std::array<std::uint8_t, 16> uuid{};
    std::string label; // up to 32 bytes
    std::uint64_t mount_generation = 0;

    bool operator==(const DynamicVolumeState&) const = default;
};

struct LogFooter {
    DynamicVolumeState state;
    std::vector<AreaDescriptor> areas; // replicated from the header
    RootNodeImage inodes_btree_root;

    bool operator==(const LogFooter&) const = default;
};

struct SnapshotTableRecord {
    std::uint64_t snapshot_id = 0;
    std::uint64_t snapshot_segment_id = 0;

    bool operator==(const SnapshotTableRecord&) const = default;
};

Bytes encode_header(const SegmentHeader& h);
SegmentHeader parse_header(ByteView b);

Bytes encode_partial_header(const PartialLogHeader& h);
PartialLogHeader parse_partial_header(ByteView b);

Bytes encode_footer(const LogFooter& f);
LogFooter parse_footer(ByteView b);

Bytes encode_snapshot_table(const std::vector<SnapshotTableRecord>& recs);
std::vector<SnapshotTableRecord> parse_snapshot_table(ByteView b);

// ---------------------------------------------------------------------------
// PEB scanning

enum class LogKind : std::uint8_t { full, partial };

struct ScannedLog {
    LogKind kind = LogKind::partial;
    std::uint64_t checkpoint_id = 0;
    std::uint32_t start_page = 0;
    std::uint32_t log_pages = 0;
    std::vector<AreaDescriptor> areas;
    std::optional<SegmentHeader> segment_header;
    std::optional<PartialLogHeader> partial_header;
    std::optional<LogFooter> footer;
};

struct ScanResult {
    std::vector<ScannedLog> logs;
    std::vector<std::string> diagnostics;
};

// Walks every parseable log of a PEB in offset order. Stops at the erased
// frontier; a corrupted trailing log produces a diagnostic and the valid
// prefix of logs is still returned.
ScanResult scan_peb(NandDevice& device, std::uint32_t peb_id);

// Reads the byte range [desc.offset, desc.offset+desc.size) of a scanned log.
Bytes read_area(NandDevice& device, std::uint32_t peb_id, std::uint32_t log_start_page,
                const AreaDescriptor& desc);

} // namespace ssdfs
