#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "ssdfs/btree.hpp"
#include "ssdfs/bytes.hpp"
#include "ssdfs/metadata.hpp"

namespace ssdfs {

constexpr std::uint32_t kDedupChunkBytes = 8192; // also the file-size threshold

struct Fingerprint {
    std::uint8_t algo_id = 1; // SHA-256
    std::array<std::uint8_t, 32> digest{};

    std::uint64_t prefix64() const {
        std::uint64_t k = 0;
        for (int i = 0; i < 8; i++) k |= static_cast<std::uint64_t>(digest[static_cast<std::size_t>(i)]) << (8 * i);
        return k;
    }
    bool operator==(const Fingerprint&) const = default;
};

Fingerprint fingerprint_chunk(ByteView chunk);

struct DedupExtentRecord {
    Fingerprint fingerprint;
    RawExtentRec extent;
    std::uint32_t refcount = 1;

    bool operator==(const DedupExtentRecord&) const = default;
};

struct FingerprintRecord {
    std::uint64_t segment_id = 0;
    std::uint32_t logical_block = 0;
    Fingerprint fingerprint;

    bool operator==(const FingerprintRecord&) const = default;
};

struct DedupInvalidationRecord {
    RawExtentRec extent;
    std::uint64_t enqueued_at = 0;
};

struct StorePlacement {
    RawExtentRec extent;
    bool deduped = false;
};

enum class DeleteAction : std::uint8_t { refcount_decremented, physically_invalidated };

// Fingerprint-indexed deduplicated extents with reference counts, reverse
// records for delete-time lookup, and delayed physical invalidation.
class SharedExtents {
public:
    explicit SharedExtents(NodeStorage& nodes, std::uint32_t chunk_bytes = kDedupChunkBytes);

    // Receives the extents whose blocks must be physically invalidated.
    void set_physical_invalidation_hook(std::function<void(const RawExtentRec&)> hook) {
        invalidate_hook_ = std::move(hook);
    }

    using ChunkSink = std::function<RawExtentRec(ByteView chunk)>;

    // Stores a file's content chunk-wise: below the size threshold nothing
    // is fingerprinted; a first-chunk hit switches the rest of the file to
    // per-chunk deduplication.
    std::vector<StorePlacement> on_store(ByteView file_bytes, const ChunkSink& sink);

    DeleteAction on_delete_extent(const RawExtentRec& extent);

    std::size_t process_invalidations(std::uint32_t max_n);
    std::size_t invalidation_backlog() const { return queue_.size(); }

    // Registration is exposed so racing stores can be simulated.
    void register_extent(const Fingerprint& fp, const RawExtentRec& extent);
    std::optional<DedupExtentRecord> find_by_fingerprint(const Fingerprint& fp) const;
    std::optional<FingerprintRecord> find_by_extent(std::uint64_t segment_id,
                                                    std::uint32_t logical_block) const;

    std::uint64_t fingerprints_computed() const { return fingerprints_computed_; }
    std::uint64_t chunks_deduped() const { return chunks_deduped_; }
    std::uint64_t record_count() const;

    // 1:1 correspondence between forward and reverse records.
    bool bijection_holds() const;

    Bytes flush();
    static std::unique_ptr<SharedExtents> load(NodeStorage& nodes, ByteView blob,
                                               std::uint32_t chunk_bytes = kDedupChunkBytes);

private:
    std::uint64_t reverse_key(std::uint64_t segment_id, std::uint32_t logical_block) const {
        return (segment_id << 24) | logical_block;
    }
    void remove_records(const Fingerprint& fp, const RawExtentRec& extent);
    void enqueue_physical(const RawExtentRec& extent);

    NodeStorage& nodes_;
    std::uint32_t chunk_bytes_;
    std::unique_ptr<BTree> by_fingerprint_; // DedupExtentRecord items
    std::unique_ptr<BTree> by_extent_;      // FingerprintRecord items
    std::deque<DedupInvalidationRecord> queue_;
    std::uint64_t queue_clock_ = 0;
    std::uint64_t fingerprints_computed_ = 0;
    std::uint64_t chunks_deduped_ = 0;
    std::function<void(const RawExtentRec&)> invalidate_hook_;
};

} // namespace ssdfs
