#include "ssdfs/seg_bitmap.hpp"

#include <algorithm>

namespace ssdfs {

const char* seg_state_name(SegState s) {
    switch (s) {
        case SegState::clean: return "clean";
        case SegState::in_use: return "using";
        case SegState::used: return "used";
        case SegState::pre_dirty: return "pre_dirty";
        case SegState::dirty: return "dirty";
        case SegState::reserved: return "reserved";
        case SegState::bad: return "bad";
    }
    return "?";
}

SegmentBitmap::SegmentBitmap(std::uint64_t segment_count, std::uint32_t fragment_payload_bytes)
    : segment_count_(segment_count), fragment_payload_bytes_(fragment_payload_bytes) {
    nibbles_.assign((segment_count + 1) / 2, 0);
}

SegState SegmentBitmap::get_state(std::uint64_t seg_id) const {
    if (seg_id >= segment_count_) fail(Errc::out_of_range, "segment " + std::to_string(seg_id));
    std::uint8_t byte = nibbles_[seg_id / 2];
    return static_cast<SegState>(seg_id % 2 ? byte >> 4 : byte & 0x0F);
}

void SegmentBitmap::check_transition(std::uint64_t seg_id, SegState from, SegState to) const {
    if (from == to) return;
    if (to == SegState::bad) return;
    bool ok = false;
    switch (from) {
        case SegState::clean: ok = to == SegState::in_use || to == SegState::reserved; break;
        case SegState::in_use:
            ok = to == SegState::used || to == SegState::pre_dirty || to == SegState::dirty;
            break;
        case SegState::used: ok = to == SegState::pre_dirty || to == SegState::dirty; break;
        case SegState::pre_dirty: ok = to == SegState::dirty || to == SegState::in_use; break;
        case SegState::dirty: ok = to == SegState::clean; break;
        case SegState::reserved: ok = false; break;
        case SegState::bad: ok = false; break;
    }
    if (!ok) {
        fail(Errc::illegal_transition, "segment " + std::to_string(seg_id) + ": " +
                                           seg_state_name(from) + " -> " + seg_state_name(to));
    }
}

void SegmentBitmap::set_state(std::uint64_t seg_id, SegState state) {
    SegState cur = get_state(seg_id);
    check_transition(seg_id, cur, state);
    std::uint8_t& byte = nibbles_[seg_id / 2];
    if (seg_id % 2) {
        byte = static_cast<std::uint8_t>((byte & 0x0F) | (static_cast<std::uint8_t>(state) << 4));
    } else {
        byte = static_cast<std::uint8_t>((byte & 0xF0) | static_cast<std::uint8_t>(state));
    }
    if (state == SegState::clean) affinity_.erase(seg_id);
    dirty_fragments_.insert(static_cast<std::uint32_t>(seg_id / segments_per_fragment()));
}

std::optional<PebType> SegmentBitmap::affinity(std::uint64_t seg_id) const {
    auto it = affinity_.find(seg_id);
    if (it == affinity_.end()) return std::nullopt;
    return it->second;
}

std::uint64_t SegmentBitmap::find_candidate(
    PebType type, const std::function<bool(std::uint64_t)>& has_free_blocks) const {
    for (std::uint64_t s = 0; s < segment_count_; s++) {
        if (get_state(s) != SegState::in_use) continue;
        auto aff = affinity(s);
        if (aff && *aff == type && has_free_blocks(s)) return s;
    }
    for (std::uint64_t s = 0; s < segment_count_; s++) {
        if (get_state(s) == SegState::clean) return s;
    }
    fail(Errc::no_space, "no using/clean segment available");
}

std::vector<std::uint64_t> SegmentBitmap::gc_select_victims(
    std::size_t max_n, const std::function<std::uint64_t(std::uint64_t)>& invalid_blocks) const {
    std::vector<std::uint64_t> victims;
    for (std::uint64_t s = 0; s < segment_count_ && victims.size() < max_n; s++) {
        if (get_state(s) == SegState::dirty) victims.push_back(s);
    }
    std::vector<std::pair<std::uint64_t, std::uint64_t>> pre; // (invalid count, id)
    for (std::uint64_t s = 0; s < segment_count_; s++) {
        if (get_state(s) == SegState::pre_dirty) pre.emplace_back(invalid_blocks(s), s);
    }
    std::sort(pre.begin(), pre.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (const auto& [inv, s] : pre) {
        if (victims.size() >= max_n) break;
        victims.push_back(s);
    }
    return victims;
}

std::uint32_t SegmentBitmap::fragment_count() const {
    std::uint64_t per = segments_per_fragment();
    return static_cast<std::uint32_t>((segment_count_ + per - 1) / per);
}

Bytes SegmentBitmap::encode_fragment(std::uint32_t fragment_idx) const {
    std::uint64_t per = segments_per_fragment();
    std::uint64_t begin = fragment_idx * per;
    std::uint64_t end = std::min(begin + per, segment_count_);
    if (begin >= segment_count_) fail(Errc::out_of_range, "fragment " + std::to_string(fragment_idx));
    ByteWriter w;
    w.u32(fragment_idx);
    w.u64(begin);
    w.u32(static_cast<std::uint32_t>(end - begin));
    for (std::uint64_t s = begin; s < end; s += 2) {
        std::uint8_t byte = static_cast<std::uint8_t>(get_state(s));
        if (s + 1 < end) byte |= static_cast<std::uint8_t>(static_cast<std::uint8_t>(get_state(s + 1)) << 4);
        w.u8(byte);
    }
    return w.take();
}

void SegmentBitmap::load_fragment(std::uint32_t fragment_idx, ByteView b) {
    ByteReader r(b);
    std::uint32_t idx = r.u32();
    if (idx != fragment_idx) fail(Errc::malformed, "fragment index mismatch");
    std::uint64_t begin = r.u64();
    std::uint32_t n = r.u32();
    for (std::uint64_t s = begin; s < begin + n; s += 2) {
        std::uint8_t byte = r.u8();
        auto put = [&](std::uint64_t seg, std::uint8_t nib) {
            std::uint8_t& dst = nibbles_[seg / 2];
            if (seg % 2) {
                dst = static_cast<std::uint8_t>((dst & 0x0F) | (nib << 4));
            } else {
                dst = static_cast<std::uint8_t>((dst & 0xF0) | nib);
            }
        };
        put(s, byte & 0x0F);
        if (s + 1 < begin + n) put(s + 1, byte >> 4);
    }
}

std::set<std::uint32_t> SegmentBitmap::take_dirty_fragments() {
    std::set<std::uint32_t> out;
    out.swap(dirty_fragments_);
    return out;
}

Bytes SegmentBitmap::encode_affinity() const {
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(affinity_.size()));
    for (const auto& [seg, type] : affinity_) {
        w.u64(seg);
        w.u8(static_cast<std::uint8_t>(type));
    }
    return w.take();
}

void SegmentBitmap::load_affinity(ByteView b) {
    ByteReader r(b);
    std::uint32_t n = r.u32();
    affinity_.clear();
    for (std::uint32_t i = 0; i < n; i++) {
        std::uint64_t seg = r.u64();
        affinity_[seg] = static_cast<PebType>(r.u8());
    }
}

} // namespace ssdfs
