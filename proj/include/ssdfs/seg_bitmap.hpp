#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "ssdfs/bytes.hpp"
#include "ssdfs/peb_map.hpp"

namespace ssdfs {

enum class SegState : std::uint8_t {
    clean = 0,
    in_use = 1,
    used = 2,
    pre_dirty = 3,
    dirty = 4,
    reserved = 5,
    bad = 6,
};

const char* seg_state_name(SegState s);

// Volume-wide segment state tracking: 4 bits per segment, fragmented for
// storage in the reserved segment-bitmap segments.
class SegmentBitmap {
public:
    SegmentBitmap(std::uint64_t segment_count, std::uint32_t fragment_payload_bytes);

    std::uint64_t segment_count() const { return segment_count_; }

    SegState get_state(std::uint64_t seg_id) const;
    void set_state(std::uint64_t seg_id, SegState state);

    // Type affinity is advisory; it tracks which data type a segment was
    // last selected for.
    void set_affinity(std::uint64_t seg_id, PebType type) { affinity_[seg_id] = type; }
    void clear_affinity(std::uint64_t seg_id) { affinity_.erase(seg_id); }
    std::optional<PebType> affinity(std::uint64_t seg_id) const;

    // Lowest-id using segment of matching type that still has free blocks,
    // else lowest-id clean segment.
    std::uint64_t find_candidate(PebType type,
                                 const std::function<bool(std::uint64_t)>& has_free_blocks) const;

    // Dirty segments first (ascending id), then pre-dirty ordered by most
    // invalid blocks (ties by lowest id), truncated to max_n.
    std::vector<std::uint64_t> gc_select_victims(
        std::size_t max_n, const std::function<std::uint64_t(std::uint64_t)>& invalid_blocks) const;

    std::uint32_t fragment_count() const;
    Bytes encode_fragment(std::uint32_t fragment_idx) const;
    void load_fragment(std::uint32_t fragment_idx, ByteView b);
    std::set<std::uint32_t> take_dirty_fragments();
    bool has_dirty_fragments() const { return !dirty_fragments_.empty(); }

    Bytes encode_affinity() const;
    void load_affinity(ByteView b);

private:
    std::uint64_t segments_per_fragment() const { return fragment_payload_bytes_ * 2; }
    void check_transition(std::uint64_t seg_id, SegState from, SegState to) const;

    std::uint64_t segment_count_;
    std::uint32_t fragment_payload_bytes_;
    std::vector<std::uint8_t> nibbles_;
    std::map<std::uint64_t, PebType> affinity_;
    std::set<std::uint32_t> dirty_fragments_;
};

} // namespace ssdfs
