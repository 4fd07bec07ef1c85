#include "ssdfs/migration.hpp"

#include <algorithm>

namespace ssdfs {

const MigrationContext* MigrationManager::context(std::uint64_t leb_id) const {
    auto it = contexts_.find(leb_id);
    return it == contexts_.end() ? nullptr : &it->second;
}

MigrationContext& MigrationManager::start(std::uint64_t leb_id) {
    auto it = contexts_.find(leb_id);
    if (it != contexts_.end()) fail(Errc::already_migrating, "leb " + std::to_string(leb_id));
    std::uint32_t source = *map_.map_leb(leb_id, false, PebType::user_data);
    std::uint32_t destination = map_.start_migration(leb_id);

    MigrationContext ctx;
    ctx.leb_id = leb_id;
    ctx.source_peb = source;
    ctx.destination_peb = destination;
    LogEngine* src = engines_(source);
    ctx.update_counts.assign(src->bitmap().block_count(), 0);

    LogEngine* dst = engines_(destination);
    dst->set_source_bitmap_provider([this, source]() { return engines_(source)->bitmap().encode(); });

    auto [pos, inserted] = contexts_.emplace(leb_id, std::move(ctx));
    (void)inserted;
    return pos->second;
}

LogEngine* MigrationManager::route(std::uint64_t leb_id) {
    auto it = contexts_.find(leb_id);
    if (it != contexts_.end()) return engines_(it->second.destination_peb);
    auto peb = map_.map_leb(leb_id, false, PebType::user_data);
    if (!peb) return nullptr;
    return engines_(*peb);
}

void MigrationManager::note_update(std::uint64_t leb_id, std::uint32_t block_slot) {
    auto it = contexts_.find(leb_id);
    if (it == contexts_.end()) return;
    if (block_slot < it->second.update_counts.size()) it->second.update_counts[block_slot]++;
}

void MigrationManager::on_block_migrated(std::uint64_t leb_id, std::uint32_t block_slot) {
    auto it = contexts_.find(leb_id);
    if (it == contexts_.end()) return;
    LogEngine* src = engines_(it->second.source_peb);
    BlockState s = src->bitmap().get(block_slot);
    if (s == BlockState::used || s == BlockState::pre_allocated) src->invalidate_block(block_slot);
}

std::uint32_t MigrationManager::valid_blocks_remaining(std::uint64_t leb_id) const {
    auto it = contexts_.find(leb_id);
    if (it == contexts_.end()) return 0;
    return engines_(it->second.source_peb)->bitmap().live_count();
}

std::uint32_t MigrationManager::gc_tick(std::uint64_t leb_id, std::uint32_t budget_pages) {
    auto it = contexts_.find(leb_id);
    if (it == contexts_.end()) return 0;
    MigrationContext& ctx = it->second;
    LogEngine* src = engines_(ctx.source_peb);
    LogEngine* dst = engines_(ctx.destination_peb);

    // coldest first: lowest update count, ties by lowest block index
    std::vector<std::uint32_t> candidates;
    for (std::uint32_t slot = 0; slot < src->bitmap().block_count(); slot++) {
        BlockState s = src->bitmap().get(slot);
        if (s == BlockState::used || s == BlockState::pre_allocated) candidates.push_back(slot);
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [&](std::uint32_t a, std::uint32_t b) {
                         return ctx.update_counts[a] < ctx.update_counts[b];
                     });

    std::uint32_t copied = 0;
    for (std::uint32_t slot : candidates) {
        if (copied >= budget_pages) break;
        Bytes content = src->reconstruct_block(slot);
        std::uint64_t inode = src->inode_of_block(slot);
        std::uint32_t logical = src->logical_offset_of_block(slot);
        try {
            dst->append_block(inode, logical, slot, content);
        } catch (const Error& e) {
            if (e.code() != Errc::log_full) throw;
            commit_(*dst);
            dst->append_block(inode, logical, slot, content);
        }
        src->invalidate_block(slot);
        ctx.update_counts[slot] = 0;
        copied++;
        gc_page_copies_++;
    }
    return copied;
}

bool MigrationManager::maybe_finalize(std::uint64_t leb_id) {
    auto it = contexts_.find(leb_id);
    if (it == contexts_.end()) return false;
    MigrationContext& ctx = it->second;
    LogEngine* src = engines_(ctx.source_peb);
    if (src->bitmap().live_count() != 0) return false;
    LogEngine* dst = engines_(ctx.destination_peb);
    // the destination stops replicating the source bitmap
    if (dst->has_staged()) commit_(*dst);
    dst->set_source_bitmap_provider(nullptr);
    map_.finish_migration(leb_id);
    contexts_.erase(it);
    return true;
}

std::vector<std::uint64_t> MigrationManager::active_lebs() const {
    std::vector<std::uint64_t> out;
    for (const auto& [leb, ctx] : contexts_) out.push_back(leb);
    return out;
}

} // namespace ssdfs
