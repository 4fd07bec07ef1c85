#include "ssdfs/peb_map.hpp"

#include <algorithm>

namespace ssdfs {

namespace {
constexpr std::uint16_t kLebTableMagic = 0x424C; // "LB"
constexpr std::uint16_t kPebTableMagic = 0x4250; // "PB"
constexpr std::uint16_t kCacheMagic = 0x4343;    // "CC"
} // namespace

const char* peb_state_name(PebState s) {
    switch (s) {
        case PebState::clean: return "clean";
        case PebState::in_use: return "using";
        case PebState::used: return "used";
        case PebState::pre_dirty: return "pre_dirty";
        case PebState::dirty: return "dirty";
        case PebState::migrating: return "migrating";
        case PebState::pre_erase: return "pre_erase";
        case PebState::recovering: return "recovering";
        case PebState::bad: return "bad";
    }
    return "?";
}

const char* peb_type_name(PebType t) {
    switch (t) {
        case PebType::user_data: return "user_data";
        case PebType::leaf_node: return "leaf_node";
        case PebType::hybrid_node: return "hybrid_node";
        case PebType::index_node: return "index_node";
        case PebType::snapshot: return "snapshot";
        case PebType::superblock: return "superblock";
        case PebType::segbmap: return "segbmap";
        case PebType::mapping_table: return "mapping_table";
    }
    return "?";
}

PebMap::PebMap(NandDevice& device, std::uint64_t leb_count, std::uint32_t lebs_per_fragment,
               std::uint32_t recovering_ticks)
    : device_(device),
      lebs_(leb_count),
      pebs_(device.geometry().peb_count),
      lebs_per_fragment_(lebs_per_fragment),
      recovering_ticks_(recovering_ticks) {
    if (leb_count > device.geometry().peb_count)
        fail(Errc::out_of_range, "more LEBs than PEBs");
}

const LebRecord& PebMap::leb(std::uint64_t leb_id) const {
    if (leb_id >= lebs_.size()) fail(Errc::out_of_range, "leb " + std::to_string(leb_id));
    return lebs_[leb_id];
}

const PebRecord& PebMap::peb(std::uint32_t peb_id) const {
    if (peb_id >= pebs_.size()) fail(Errc::out_of_range, "peb " + std::to_string(peb_id));
    return pebs_[peb_id];
}

void PebMap::check_transition(std::uint32_t peb_id, PebState from, PebState to) const {
    if (to == PebState::bad) return; // any -> bad
    bool ok = false;
    switch (from) {
        case PebState::clean: ok = to == PebState::in_use; break;
        case PebState::in_use:
            ok = to == PebState::used || to == PebState::pre_dirty || to == PebState::migrating ||
                 to == PebState::dirty;
            break;
        case PebState::used: ok = to == PebState::pre_dirty || to == PebState::migrating; break;
        case PebState::pre_dirty: ok = to == PebState::dirty || to == PebState::migrating; break;
        case PebState::dirty: ok = to == PebState::pre_erase; break;
        case PebState::migrating: ok = to == PebState::pre_erase; break;
        case PebState::pre_erase:
            ok = to == PebState::clean || to == PebState::recovering;
            break;
        case PebState::recovering: ok = to == PebState::clean; break;
        case PebState::bad: ok = false; break;
    }
    if (!ok) {
        fail(Errc::illegal_transition, "peb " + std::to_string(peb_id) + ": " +
                                           peb_state_name(from) + " -> " + peb_state_name(to));
    }
}

void PebMap::set_peb_state(std::uint32_t peb_id, PebState next) {
    PebRecord& rec = pebs_.at(peb_id);
    if (rec.state == next) return;
    check_transition(peb_id, rec.state, next);
    rec.state = next;
    // A PEB state change dirties the fragment holding its record.
    std::uint32_t frag = peb_id / lebs_per_fragment_;
    if (flushing_ && flushed_this_round_.count(frag)) {
        // Mutated behind an already-flushed fragment: remember the actual
        // state in the cache and resolve at next mount.
        for (std::uint64_t l = 0; l < lebs_.size(); l++) {
            if (lebs_[l].physical == peb_id || lebs_[l].relation == peb_id) {
                cache_upsert(l, peb_id, CacheConsistency::inconsistent);
                break;
            }
        }
    }
    dirty_fragments_.insert(frag);
}

void PebMap::mark_bad(std::uint32_t peb_id) {
    pebs_.at(peb_id).state = PebState::bad;
    device_.mark_bad(peb_id);
    dirty_fragments_.insert(peb_id / lebs_per_fragment_);
}

void PebMap::mark_fragment_dirty(std::uint64_t leb_id, std::uint32_t peb_id) {
    std::uint32_t frag = fragment_of_leb(leb_id);
    if (flushing_ && flushed_this_round_.count(frag)) {
        cache_upsert(leb_id, peb_id, CacheConsistency::inconsistent);
    }
    dirty_fragments_.insert(frag);
}

std::optional<std::uint32_t> PebMap::map_leb(std::uint64_t leb_id, bool allocate, PebType type) {
    if (leb_id >= lebs_.size()) fail(Errc::out_of_range, "leb " + std::to_string(leb_id));
    LebRecord& rec = lebs_[leb_id];
    if (rec.physical != kNoPeb) return rec.physical;
    if (!allocate) return std::nullopt;

    std::uint32_t best = kNoPeb;
    for (std::uint32_t p = 0; p < pebs_.size(); p++) {
        if (pebs_[p].state != PebState::clean) continue;
        if (best == kNoPeb || pebs_[p].erase_cycles < pebs_[best].erase_cycles) best = p;
    }
    if (best == kNoPeb) fail(Errc::no_clean_peb, "no clean peb for leb " + std::to_string(leb_id));
    pebs_[best].type = type;
    set_peb_state(best, PebState::in_use);
    rec.physical = best;
    mark_fragment_dirty(leb_id, best);
    return best;
}

void PebMap::assign(std::uint64_t leb_id, std::uint32_t peb_id, PebType type) {
    if (leb_id >= lebs_.size()) fail(Errc::out_of_range, "leb " + std::to_string(leb_id));
    if (peb_id >= pebs_.size()) fail(Errc::out_of_range, "peb " + std::to_string(peb_id));
    pebs_[peb_id].type = type;
    if (pebs_[peb_id].state == PebState::clean) set_peb_state(peb_id, PebState::in_use);
    lebs_[leb_id].physical = peb_id;
    mark_fragment_dirty(leb_id, peb_id);
}

void PebMap::unmap_leb(std::uint64_t leb_id) {
    if (leb_id >= lebs_.size()) fail(Errc::out_of_range, "leb " + std::to_string(leb_id));
    LebRecord& rec = lebs_[leb_id];
    rec.physical = kNoPeb;
    rec.relation = kNoPeb;
    mark_fragment_dirty(leb_id, kNoPeb);
}

std::optional<std::uint32_t> PebMap::relation_of(std::uint64_t leb_id) const {
    const LebRecord& rec = leb(leb_id);
    if (rec.relation == kNoPeb) return std::nullopt;
    return rec.relation;
}

std::uint32_t PebMap::start_migration(std::uint64_t leb_id) {
    if (leb_id >= lebs_.size()) fail(Errc::out_of_range, "leb " + std::to_string(leb_id));
    LebRecord& rec = lebs_[leb_id];
    if (rec.physical == kNoPeb) fail(Errc::out_of_range, "migrating an unmapped leb");
    if (rec.relation != kNoPeb) fail(Errc::already_migrating, "leb " + std::to_string(leb_id));

    std::uint32_t best = kNoPeb;
    for (std::uint32_t p = 0; p < pebs_.size(); p++) {
        if (pebs_[p].state != PebState::clean) continue;
        if (best == kNoPeb || pebs_[p].erase_cycles < pebs_[best].erase_cycles) best = p;
    }
    if (best == kNoPeb) fail(Errc::no_clean_peb, "no destination for leb " + std::to_string(leb_id));
    // Destination inherits the content type of the source.
    pebs_[best].type = pebs_[rec.physical].type;
    set_peb_state(best, PebState::in_use);
    set_peb_state(rec.physical, PebState::migrating);
    rec.relation = best;
    mark_fragment_dirty(leb_id, best);
    return best;
}

std::uint32_t PebMap::finish_migration(std::uint64_t leb_id) {
    if (leb_id >= lebs_.size()) fail(Errc::out_of_range, "leb " + std::to_string(leb_id));
    LebRecord& rec = lebs_[leb_id];
    if (rec.relation == kNoPeb) fail(Errc::out_of_range, "leb not migrating");
    std::uint32_t source = rec.physical;
    rec.physical = rec.relation;
    rec.relation = kNoPeb;
    set_peb_state(source, PebState::pre_erase);
    schedule_erase(source);
    mark_fragment_dirty(leb_id, rec.physical);
    return source;
}

void PebMap::schedule_erase(std::uint32_t peb_id) {
    if (pebs_.at(peb_id).state != PebState::pre_erase) set_peb_state(peb_id, PebState::pre_erase);
    if (std::find(erase_queue_.begin(), erase_queue_.end(), peb_id) == erase_queue_.end())
        erase_queue_.push_back(peb_id);
}

std::vector<std::uint32_t> PebMap::process_erase_queue(std::uint64_t tick, std::uint32_t max_erases) {
    std::vector<std::uint32_t> erased;
    while (!erase_queue_.empty() && erased.size() < max_erases) {
        std::uint32_t peb_id = erase_queue_.front();
        erase_queue_.pop_front();
        try {
            device_.erase_peb(peb_id);
        } catch (const Error& e) {
            if (e.code() == Errc::bad_block) {
                pebs_[peb_id].state = PebState::bad;
                dirty_fragments_.insert(peb_id / lebs_per_fragment_);
                continue;
            }
            throw;
        }
        pebs_[peb_id].erase_cycles++;
        if (recovering_hook_ && recovering_hook_(peb_id)) {
            set_peb_state(peb_id, PebState::recovering);
            recovering_since_[peb_id] = tick;
        } else {
            set_peb_state(peb_id, PebState::clean);
        }
        erased.push_back(peb_id);
    }
    advance_recovering(tick);
    return erased;
}

void PebMap::advance_recovering(std::uint64_t tick) {
    for (auto it = recovering_since_.begin(); it != recovering_since_.end();) {
        if (tick >= it->second + recovering_ticks_) {
            set_peb_state(it->first, PebState::clean);
            it = recovering_since_.erase(it);
        } else {
            ++it;
        }
    }
}

std::uint32_t PebMap::clean_pool_size() const {
    std::uint32_t n = 0;
    for (const PebRecord& p : pebs_)
        if (p.state == PebState::clean) n++;
    return n;
}

// --- cache ---

void PebMap::cache_upsert(std::uint64_t leb_id, std::uint32_t peb_id, CacheConsistency c) {
    MappingCacheEntry e;
    e.leb_id = leb_id;
    e.peb_id = peb_id;
    e.peb_state = peb_id != kNoPeb ? pebs_.at(peb_id).state : PebState::clean;
    e.consistency = c;
    cache_[leb_id] = e;
}

std::optional<MappingCacheEntry> PebMap::cache_lookup(std::uint64_t leb_id) const {
    auto it = cache_.find(leb_id);
    if (it == cache_.end()) return std::nullopt;
    return it->second;
}

Bytes PebMap::encode_cache() const {
    ByteWriter w;
    w.u16(kCacheMagic);
    w.u32(static_cast<std::uint32_t>(cache_.size()));
    for (const auto& [leb_id, e] : cache_) {
        w.u64(e.leb_id);
        w.u32(e.peb_id);
        w.u8(static_cast<std::uint8_t>(e.peb_state));
        w.u8(static_cast<std::uint8_t>(e.consistency));
        w.u8(e.flags);
    }
    return w.take();
}

void PebMap::load_cache(ByteView b) {
    ByteReader r(b);
    if (r.u16() != kCacheMagic) fail(Errc::bad_magic, "mapping cache");
    std::uint32_t n = r.u32();
    cache_.clear();
    for (std::uint32_t i = 0; i < n; i++) {
        MappingCacheEntry e;
        e.leb_id = r.u64();
        e.peb_id = r.u32();
        e.peb_state = static_cast<PebState>(r.u8());
        e.consistency = static_cast<CacheConsistency>(r.u8());
        e.flags = r.u8();
        cache_[e.leb_id] = e;
    }
}

std::size_t PebMap::cache_reconcile(const std::function<void(std::uint32_t, ByteView)>& write_fragment) {
    std::set<std::uint32_t> fragments;
    std::size_t reconciled = 0;
    for (auto& [leb_id, e] : cache_) {
        if (e.consistency != CacheConsistency::inconsistent) continue;
        // The cache carries the actual state; push it into the table.
        if (leb_id < lebs_.size() && e.peb_id != kNoPeb) {
            pebs_.at(e.peb_id).state = e.peb_state;
        }
        fragments.insert(fragment_of_leb(leb_id));
        e.consistency = CacheConsistency::consistent;
        reconciled++;
    }
    for (std::uint32_t f : fragments) {
        Bytes frag = encode_fragment(f);
        write_fragment(f, frag);
        dirty_fragments_.erase(f);
    }
    return reconciled;
}

// --- fragments ---

std::uint32_t PebMap::fragment_count() const {
    std::uint64_t n = std::max<std::uint64_t>(lebs_.size(), pebs_.size());
    return static_cast<std::uint32_t>((n + lebs_per_fragment_ - 1) / lebs_per_fragment_);
}

Bytes PebMap::encode_fragment(std::uint32_t fragment_idx) const {
    std::uint64_t leb_begin = static_cast<std::uint64_t>(fragment_idx) * lebs_per_fragment_;
    std::uint64_t leb_end = std::min<std::uint64_t>(leb_begin + lebs_per_fragment_, lebs_.size());
    std::uint64_t peb_begin = leb_begin;
    std::uint64_t peb_end = std::min<std::uint64_t>(peb_begin + lebs_per_fragment_, pebs_.size());

    ByteWriter w;
    w.u16(kLebTableMagic);
    w.u32(fragment_idx);
    w.u64(leb_begin);
    w.u32(static_cast<std::uint32_t>(leb_end > leb_begin ? leb_end - leb_begin : 0));
    for (std::uint64_t l = leb_begin; l < leb_end; l++) {
        w.u32(lebs_[l].physical);
        w.u32(lebs_[l].relation);
    }
    w.u16(kPebTableMagic);
    w.u64(peb_begin);
    w.u32(static_cast<std::uint32_t>(peb_end > peb_begin ? peb_end - peb_begin : 0));
    for (std::uint64_t p = peb_begin; p < peb_end; p++) {
        w.u32(pebs_[p].erase_cycles);
        w.u8(static_cast<std::uint8_t>(pebs_[p].type));
        w.u8(static_cast<std::uint8_t>(pebs_[p].state));
    }
    return w.take();
}

void PebMap::load_fragment(ByteView b) {
    ByteReader r(b);
    if (r.u16() != kLebTableMagic) fail(Errc::bad_magic, "leb table");
    r.u32(); // fragment index
    std::uint64_t leb_begin = r.u64();
    std::uint32_t leb_n = r.u32();
    for (std::uint32_t i = 0; i < leb_n; i++) {
        LebRecord rec;
        rec.physical = r.u32();
        rec.relation = r.u32();
        lebs_.at(leb_begin + i) = rec;
    }
    if (r.u16() != kPebTableMagic) fail(Errc::bad_magic, "peb table");
    std::uint64_t peb_begin = r.u64();
    std::uint32_t peb_n = r.u32();
    for (std::uint32_t i = 0; i < peb_n; i++) {
        PebRecord rec;
        rec.erase_cycles = r.u32();
        rec.type = static_cast<PebType>(r.u8());
        rec.state = static_cast<PebState>(r.u8());
        pebs_.at(peb_begin + i) = rec;
    }
}

std::set<std::uint32_t> PebMap::take_dirty_fragments() {
    std::set<std::uint32_t> out;
    out.swap(dirty_fragments_);
    return out;
}

void PebMap::flush_dirty(const std::function<void(std::uint32_t, ByteView)>& write_fragment) {
    flushing_ = true;
    flushed_this_round_.clear();
    std::set<std::uint32_t> todo = take_dirty_fragments();
    while (!todo.empty()) {
        std::uint32_t f = *todo.begin();
        todo.erase(todo.begin());
        Bytes frag = encode_fragment(f);
        // The serialized bytes are fixed from here on; mutations the write
        // causes count as behind-the-flush.
        flushed_this_round_.insert(f);
        write_fragment(f, frag);
        // The write itself may have dirtied fragments not yet flushed in
        // this round; pick those up. Re-dirtied flushed fragments stay in
        // the cache as inconsistent entries instead.
        for (std::uint32_t g : take_dirty_fragments()) {
            if (!flushed_this_round_.count(g)) todo.insert(g);
        }
    }
    flushing_ = false;
    flushed_this_round_.clear();
}

} // namespace ssdfs
