#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "ssdfs/log_engine.hpp"
#include "ssdfs/peb_map.hpp"

namespace ssdfs {

struct MigrationContext {
    std::uint64_t leb_id = 0;
    std::uint32_t source_peb = kNoPeb;
    std::uint32_t destination_peb = kNoPeb;
    // per-block update counters since the last relocation; the coldness
    // metric for GC stimulation
    std::vector<std::uint32_t> update_counts;
};

// Update-driven PEB migration with GC stimulation under an I/O budget.
class MigrationManager {
public:
    using EngineProvider = std::function<LogEngine*(std::uint32_t peb_id)>;
    using EngineCommitter = std::function<void(LogEngine&)>;

    MigrationManager(PebMap& map, EngineProvider engines, EngineCommitter commit)
        : map_(map), engines_(std::move(engines)), commit_(std::move(commit)) {}

    bool migrating(std::uint64_t leb_id) const { return contexts_.count(leb_id) != 0; }
    const MigrationContext* context(std::uint64_t leb_id) const;

    // Associates the exhausted source with a fresh clean PEB; the destination
    // starts replicating the source's block bitmap into its logs.
    MigrationContext& start(std::uint64_t leb_id);

    // The engine a write for this LEB must target.
    LogEngine* route(std::uint64_t leb_id);

    void note_update(std::uint64_t leb_id, std::uint32_t block_slot);

    // The update path moved a block's current state into the destination;
    // the stale source copy dies.
    void on_block_migrated(std::uint64_t leb_id, std::uint32_t block_slot);

    std::uint32_t valid_blocks_remaining(std::uint64_t leb_id) const;

    // Copies up to budget_pages of the coldest still-valid blocks into the
    // destination, applying all accumulated diffs on the way.
    std::uint32_t gc_tick(std::uint64_t leb_id, std::uint32_t budget_pages);

    // Finishes the migration once the source holds no live blocks: the
    // destination takes over the LEB slot and the source queues for erase.
    bool maybe_finalize(std::uint64_t leb_id);

    std::vector<std::uint64_t> active_lebs() const;

    std::uint64_t gc_page_copies() const { return gc_page_copies_; }

private:
    PebMap& map_;
    EngineProvider engines_;
    EngineCommitter commit_;
    std::map<std::uint64_t, MigrationContext> contexts_;
    std::uint64_t gc_page_copies_ = 0;
};

} // namespace ssdfs
