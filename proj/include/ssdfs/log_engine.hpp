#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "ssdfs/bytes.hpp"
#include "ssdfs/codec.hpp"
#include "ssdfs/layout.hpp"
#include "ssdfs/nand.hpp"

namespace ssdfs {

// --- per-PEB block bitmap -------------------------------------------------

enum class BlockState : std::uint8_t {
    free = 0,
    used = 1,
    pre_allocated = 2,
    invalid = 3,
};

class BlockBitmap {
public:
    explicit BlockBitmap(std::uint32_t block_count = 0);

    std::uint32_t block_count() const { return count_; }
    BlockState get(std::uint32_t idx) const;
    void set(std::uint32_t idx, BlockState next);
    void reset_all();

    std::uint32_t count_in(BlockState s) const;
    std::uint32_t live_count() const {
        return count_in(BlockState::used) + count_in(BlockState::pre_allocated);
    }
    std::optional<std::uint32_t> first_free() const;

    Bytes encode() const;
    static BlockBitmap decode(ByteView b);

private:
    std::uint32_t count_ = 0;
    std::vector<std::uint8_t> bits_; // 2 bits per block
};

// --- offsets translation table records -------------------------------------

enum class FragmentKind : std::uint8_t {
    full_block = 0,
    compressed = 1,
    delta = 2,
};

struct StateDescriptor {
    AreaType area = AreaType::main;
    std::uint32_t byte_offset = 0;  // inside the area
    std::uint32_t length = 0;       // stored bytes
    std::uint8_t codec_id = kCodecNone;
    FragmentKind kind = FragmentKind::full_block;
    std::uint32_t decoded_length = 0;

    bool operator==(const StateDescriptor&) const = default;
};

struct BlockDescriptor {
    std::uint64_t inode_id = 0;
    std::uint32_t logical_offset = 0; // block index from the file's start
    std::vector<StateDescriptor> states;
};

struct BlockTableEntry {
    std::uint16_t block_slot = 0;     // index into the block bitmap
    std::uint32_t logical_offset = 0; // block index from the file's start
    AreaType area = AreaType::main;   // payload area or blk_desc_table
    std::uint32_t byte_offset = 0;
    std::uint16_t desc_index = 0xFFFF; // 0xFFFF = direct payload reference
};

struct DeltaRange {
    std::uint32_t offset = 0;
    Bytes payload;
};

// One stored state of a logical block, either committed on NAND or still
// staged in memory.
struct FragmentRef {
    std::uint64_t checkpoint_id = 0;
    std::uint32_t log_start_page = 0;
    StateDescriptor desc;
    bool staged = false;
    Bytes staged_bytes; // pre-codec payload while staged
    std::uint64_t inode_id = 0;
    std::uint32_t logical_offset = 0;
};

Bytes encode_block_table(const std::vector<BlockTableEntry>& entries);
std::vector<BlockTableEntry> parse_block_table(ByteView b);
Bytes encode_desc_table(const std::vector<BlockDescriptor>& descs,
                        std::vector<std::uint32_t>* record_offsets = nullptr);
std::vector<BlockDescriptor> parse_desc_table(ByteView b);

Bytes encode_delta(const std::vector<DeltaRange>& ranges);
std::vector<DeltaRange> parse_delta(ByteView b);
void apply_delta(Bytes& block, const std::vector<DeltaRange>& ranges);

// Longest-common-prefix/suffix trim of old vs new content; empty result means
// the contents are identical.
std::vector<DeltaRange> diff_blocks(ByteView before, ByteView after);

// --- log engine -------------------------------------------------------------

enum class CommitMode : std::uint8_t { full, partial };

struct CommitInfo {
    std::uint64_t checkpoint_id = 0;
    std::uint32_t start_page = 0;
    std::uint32_t log_pages = 0;
    std::uint32_t metadata_pages = 0;
    std::uint32_t payload_pages = 0;
    bool has_footer = false;
};

// Everything the engine needs from the volume to stamp headers and footers.
struct LogContext {
    std::uint64_t seg_id = 0;
    std::uint16_t leb_index = 0;
    std::uint8_t seg_type = 0;
    std::function<std::uint64_t()> next_checkpoint;     // monotonic volume counter
    std::function<SegmentHeader()> header_template;      // params/chain/reserved filled
    std::function<LogFooter()> footer_template;          // dynamic state + inodes root
};

struct EngineConfig {
    std::uint32_t full_log_pages = 0; // 0 = whole PEB
    std::uint8_t data_codec = kCodecNone;
    // Delta bytes for one block that force its next full-block rewrite.
    std::uint32_t graduation_fraction_pct = 50;
};

struct Placement {
    std::uint32_t block_slot = 0;
    StateDescriptor staged; // area/kind for inspection; offsets final after commit
};

// Builds and reads the chain of logs inside one PEB. Single-writer.
class LogEngine {
public:
    LogEngine(NandDevice& device, std::uint32_t peb_id, LogContext ctx, EngineConfig cfg = {});

    std::uint32_t peb_id() const { return peb_id_; }
    const BlockBitmap& bitmap() const { return bitmap_; }

    // Hooks this engine up as a migration destination: the source bitmap is
    // replicated into every committed log.
    void set_source_bitmap_provider(std::function<Bytes()> provider) {
        source_bitmap_ = std::move(provider);
    }

    std::uint32_t alloc_block();
    bool has_free_block() const { return bitmap_.first_free().has_value(); }

    // First write of a logical block: full plain blocks go to the main area;
    // sub-page content and compressible blocks become pre-allocated fragments
    // in the journal/diff areas.
    Placement append_block(std::uint64_t inode_id, std::uint32_t logical_offset,
                           std::uint32_t block_slot, ByteView data);

    // Later updates: delta fragments routed to an open same-inode diff page,
    // else to the journal.
    Placement append_update(std::uint32_t block_slot, std::uint64_t inode_id,
                            std::uint32_t logical_offset, const std::vector<DeltaRange>& delta);
    Placement append_full_update(std::uint32_t block_slot, std::uint64_t inode_id,
                                 std::uint32_t logical_offset, ByteView data);

    struct SmallItem {
        std::uint64_t inode_id = 0;
        std::uint32_t logical_offset = 0;
        Bytes bytes;
    };
    std::vector<Placement> compact_small(const std::vector<SmallItem>& items);

    Bytes reconstruct_block(std::uint32_t block_slot);
    std::uint32_t stored_length(std::uint32_t block_slot);
    bool block_has_state(std::uint32_t block_slot) const;
    std::uint64_t inode_of_block(std::uint32_t block_slot) const;
    std::uint32_t logical_offset_of_block(std::uint32_t block_slot) const;
    std::uint32_t accumulated_delta_bytes(std::uint32_t block_slot) const;

    // Rewrites a block whose accumulated deltas crossed the graduation
    // threshold as a single main-area block; returns true if relocated.
    bool merge_graduation(std::uint32_t block_slot);
    bool wants_graduation(std::uint32_t block_slot) const;

    void invalidate_block(std::uint32_t block_slot);

    bool has_staged() const;
    std::uint32_t staged_page_estimate() const;
    std::uint32_t free_pages() const;
    std::uint32_t frontier_page() const { return frontier_; }
    // True when a payload of extra_pages more pages still fits in this PEB
    // together with the commit overhead.
    bool fits(std::uint32_t extra_payload_pages) const;

    CommitInfo commit(CommitMode mode, bool with_footer = false);

    // Mount path: rebuilds bitmap, frontier and fragment chains from the
    // on-volume logs.
    void rebuild_from_device();

    // Independent resolution path: answers the latest committed state of a
    // block by scanning the PEB's logs, without the in-memory chains.
    std::optional<BlockTableEntry> resolve_via_scan(std::uint32_t block_slot);

    const std::vector<FragmentRef>& chain(std::uint32_t block_slot) const;
    std::uint64_t last_checkpoint() const { return last_checkpoint_; }

    // Accounting for write-amplification decomposition.
    std::uint64_t metadata_pages_written() const { return metadata_pages_written_; }
    std::uint64_t payload_pages_written() const { return payload_pages_written_; }

private:
    struct PageBuf {
        AreaType area = AreaType::journal;
        std::uint64_t inode_id = 0; // diff pages: single owner
        std::uint32_t fill = 0;
        std::vector<std::size_t> fragment_ids; // staged fragment indices
    };

    struct StagedFragment {
        std::uint32_t block_slot = 0;
        std::uint64_t inode_id = 0;
        std::uint32_t logical_offset = 0;
        FragmentKind kind = FragmentKind::full_block;
        std::uint8_t codec_id = kCodecNone;
        Bytes encoded;          // bytes as they will land in the area
        std::uint32_t decoded_length = 0;
        AreaType area = AreaType::main;
        std::uint32_t page_index = 0;    // within its area's staged pages
        std::uint32_t offset_in_page = 0;
        bool dead = false; // invalidated before commit
    };

    Placement stage_fragment(std::uint32_t block_slot, std::uint64_t inode_id,
                             std::uint32_t logical_offset, FragmentKind kind,
                             std::uint8_t codec_id, Bytes encoded, std::uint32_t decoded_length,
                             bool prefer_diff);
    std::uint32_t page_size() const { return device_.geometry().page_size; }
    std::uint32_t block_size() const { return page_size(); }
    void ensure_fits_after_staging();
    std::uint32_t metadata_bytes_estimate() const;
    Bytes fragment_bytes(const FragmentRef& ref);
    void check_slot(std::uint32_t slot) const;

    NandDevice& device_;
    std::uint32_t peb_id_;
    LogContext ctx_;
    EngineConfig cfg_;
    BlockBitmap bitmap_;
    std::function<Bytes()> source_bitmap_;

    std::uint32_t frontier_ = 0; // first erased page of the PEB
    std::uint64_t last_checkpoint_ = 0;
    bool wrote_segment_header_ = false;

    std::vector<StagedFragment> staged_;
    std::vector<PageBuf> main_pages_;
    std::vector<PageBuf> diff_pages_;
    std::vector<PageBuf> journal_pages_;

    std::vector<std::vector<FragmentRef>> chains_;
    std::vector<std::uint64_t> chain_inode_;
    std::vector<std::uint32_t> chain_logical_;
    std::map<std::uint32_t, std::vector<AreaDescriptor>> committed_areas_;

    std::uint64_t metadata_pages_written_ = 0;
    std::uint64_t payload_pages_written_ = 0;
};

} // namespace ssdfs
