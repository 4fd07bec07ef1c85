#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "ssdfs/bytes.hpp"
#include "ssdfs/nand.hpp"

namespace ssdfs {

constexpr std::uint32_t kNoPeb = 0xFFFFFFFFu;

enum class PebType : std::uint8_t {
    user_data = 0,
    leaf_node = 1,
    hybrid_node = 2,
    index_node = 3,
    snapshot = 4,
    superblock = 5,
    segbmap = 6,
    mapping_table = 7,
};

enum class PebState : std::uint8_t {
    clean = 0,
    in_use = 1,
    used = 2,
    pre_dirty = 3,
    dirty = 4,
    migrating = 5,
    pre_erase = 6,
    recovering = 7,
    bad = 8,
};

const char* peb_state_name(PebState s);
const char* peb_type_name(PebType t);

struct LebRecord {
    std::uint32_t physical = kNoPeb;
    std::uint32_t relation = kNoPeb;
};

struct PebRecord {
    std::uint32_t erase_cycles = 0;
    PebType type = PebType::user_data;
    PebState state = PebState::clean;
};

enum class CacheConsistency : std::uint8_t { consistent = 0, inconsistent = 1 };

struct MappingCacheEntry {
    std::uint64_t leb_id = 0;
    std::uint32_t peb_id = kNoPeb;
    PebState peb_state = PebState::clean;
    CacheConsistency consistency = CacheConsistency::consistent;
    std::uint8_t flags = 0;
};

// LEB -> PEB association table with the PEB lifecycle state machine, the
// migration relation, the consistency cache and the delayed-erase queue.
class PebMap {
public:
    PebMap(NandDevice& device, std::uint64_t leb_count,
           std::uint32_t lebs_per_fragment = 512, std::uint32_t recovering_ticks = 100);

    std::uint64_t leb_count() const { return static_cast<std::uint64_t>(lebs_.size()); }
    std::uint32_t peb_count() const { return static_cast<std::uint32_t>(pebs_.size()); }

    const LebRecord& leb(std::uint64_t leb_id) const;
    const PebRecord& peb(std::uint32_t peb_id) const;

    // Resolves a LEB, optionally allocating a clean PEB of the given type.
    // Allocation picks the clean PEB with the fewest erase cycles (ties by
    // lowest id) and moves it clean -> in_use.
    std::optional<std::uint32_t> map_leb(std::uint64_t leb_id, bool allocate, PebType type);

    // Format-time fixed assignment (reserved metadata areas).
    void assign(std::uint64_t leb_id, std::uint32_t peb_id, PebType type);
    // Clears an association whose PEB was garbage-collected away.
    void unmap_leb(std::uint64_t leb_id);

    std::optional<std::uint32_t> relation_of(std::uint64_t leb_id) const;

    std::uint32_t start_migration(std::uint64_t leb_id);
    // pre: the caller verified the source holds no live blocks.
    std::uint32_t finish_migration(std::uint64_t leb_id);

    void set_peb_state(std::uint32_t peb_id, PebState next);
    void mark_bad(std::uint32_t peb_id);

    // Moves a fully invalidated PEB into the delayed-erase queue.
    void schedule_erase(std::uint32_t peb_id);
    const std::deque<std::uint32_t>& erase_queue() const { return erase_queue_; }

    // Erases up to max_erases queued PEBs through the device. A device
    // BadBlock marks the PEB bad; the recovering hook (tests) may divert a
    // PEB into the recovering state for recovering_ticks ticks.
    std::vector<std::uint32_t> process_erase_queue(std::uint64_t tick, std::uint32_t max_erases);
    void advance_recovering(std::uint64_t tick);

    void set_recovering_hook(std::function<bool(std::uint32_t)> hook) { recovering_hook_ = std::move(hook); }

    std::uint32_t clean_pool_size() const;

    // --- consistency cache ---
    void cache_upsert(std::uint64_t leb_id, std::uint32_t peb_id, CacheConsistency c);
    std::optional<MappingCacheEntry> cache_lookup(std::uint64_t leb_id) const;
    const std::map<std::uint64_t, MappingCacheEntry>& cache() const { return cache_; }
    Bytes encode_cache() const;
    void load_cache(ByteView b);
    // Writes every inconsistent cache entry back into its table fragment and
    // flushes those fragments through the writer. Returns the entry count.
    std::size_t cache_reconcile(const std::function<void(std::uint32_t, ByteView)>& write_fragment);

    // --- on-volume fragments (self-hosted in reserved mapping segments) ---
    std::uint32_t fragment_count() const;
    std::uint32_t fragment_of_leb(std::uint64_t leb_id) const {
        return static_cast<std::uint32_t>(leb_id / lebs_per_fragment_);
    }
    Bytes encode_fragment(std::uint32_t fragment_idx) const;
    void load_fragment(ByteView b);
    std::set<std::uint32_t> take_dirty_fragments();
    bool has_dirty_fragments() const { return !dirty_fragments_.empty(); }

    // Serializes all dirty fragments through the writer. State mutations the
    // writer itself causes on already-written fragments end up as
    // inconsistent cache entries, to be reconciled at next mount.
    void flush_dirty(const std::function<void(std::uint32_t, ByteView)>& write_fragment);

private:
    void mark_fragment_dirty(std::uint64_t leb_id, std::uint32_t peb_id);
    void check_transition(std::uint32_t peb_id, PebState from, PebState to) const;

    NandDevice& device_;
    std::vector<LebRecord> lebs_;
    std::vector<PebRecord> pebs_;
    std::uint32_t lebs_per_fragment_;
    std::uint32_t recovering_ticks_;
    std::deque<std::uint32_t> erase_queue_;
    std::map<std::uint32_t, std::uint64_t> recovering_since_;
    std::map<std::uint64_t, MappingCacheEntry> cache_;
    std::set<std::uint32_t> dirty_fragments_;
    std::function<bool(std::uint32_t)> recovering_hook_;

    bool flushing_ = false;
    std::set<std::uint32_t> flushed_this_round_;
};

} // namespace ssdfs
