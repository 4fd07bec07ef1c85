#include "ssdfs/log_engine.hpp"

#include <algorithm>
#include <cstring>
#include <map>

namespace ssdfs {

// --- BlockBitmap -------------------------------------------------------------

BlockBitmap::BlockBitmap(std::uint32_t block_count) : count_(block_count) {
    bits_.assign((count_ + 3) / 4, 0);
}

BlockState BlockBitmap::get(std::uint32_t idx) const {
    if (idx >= count_) fail(Errc::out_of_range, "block " + std::to_string(idx));
    return static_cast<BlockState>((bits_[idx / 4] >> ((idx % 4) * 2)) & 0x3);
}

void BlockBitmap::set(std::uint32_t idx, BlockState next) {
    BlockState cur = get(idx);
    if (cur == next) return;
    bool ok = false;
    switch (cur) {
        case BlockState::free:
            ok = next == BlockState::used || next == BlockState::pre_allocated;
            break;
        case BlockState::used:
            ok = next == BlockState::pre_allocated || next == BlockState::invalid;
            break;
        case BlockState::pre_allocated:
            ok = next == BlockState::used || next == BlockState::invalid;
            break;
        case BlockState::invalid:
            ok = false; // only a PEB erase frees invalid blocks
            break;
    }
    if (!ok) {
        fail(Errc::illegal_transition,
             "block " + std::to_string(idx) + " state " + std::to_string(static_cast<int>(cur)) +
                 " -> " + std::to_string(static_cast<int>(next)));
    }
    std::uint8_t& byte = bits_[idx / 4];
    int shift = (idx % 4) * 2;
    byte = static_cast<std::uint8_t>((byte & ~(0x3 << shift)) |
                                     (static_cast<std::uint8_t>(next) << shift));
}

void BlockBitmap::reset_all() { std::fill(bits_.begin(), bits_.end(), 0); }

std::uint32_t BlockBitmap::count_in(BlockState s) const {
    std::uint32_t n = 0;
    for (std::uint32_t i = 0; i < count_; i++)
        if (get(i) == s) n++;
    return n;
}

std::optional<std::uint32_t> BlockBitmap::first_free() const {
    for (std::uint32_t i = 0; i < count_; i++)
        if (get(i) == BlockState::free) return i;
    return std::nullopt;
}

Bytes BlockBitmap::encode() const {
    ByteWriter w;
    w.u32(count_);
    w.bytes(bits_);
    return w.take();
}

BlockBitmap BlockBitmap::decode(ByteView b) {
    ByteReader r(b);
    BlockBitmap bm(r.u32());
    Bytes bits = r.bytes(bm.bits_.size());
    bm.bits_ = std::move(bits);
    return bm;
}

// --- table codecs ------------------------------------------------------------

Bytes encode_block_table(const std::vector<BlockTableEntry>& entries) {
    ByteWriter w;
    w.u16(static_cast<std::uint16_t>(entries.size()));
    for (const BlockTableEntry& e : entries) {
        w.u16(e.block_slot);
        w.u32(e.logical_offset);
        w.u8(static_cast<std::uint8_t>(e.area));
        w.u32(e.byte_offset);
        w.u16(e.desc_index);
    }
    return w.take();
}

std::vector<BlockTableEntry> parse_block_table(ByteView b) {
    ByteReader r(b);
    std::uint16_t n = r.u16();
    std::vector<BlockTableEntry> out(n);
    for (std::uint16_t i = 0; i < n; i++) {
        out[i].block_slot = r.u16();
        out[i].logical_offset = r.u32();
        out[i].area = static_cast<AreaType>(r.u8());
        out[i].byte_offset = r.u32();
        out[i].desc_index = r.u16();
    }
    return out;
}

Bytes encode_desc_table(const std::vector<BlockDescriptor>& descs,
                        std::vector<std::uint32_t>* record_offsets) {
    ByteWriter w;
    w.u16(static_cast<std::uint16_t>(descs.size()));
    for (const BlockDescriptor& d : descs) {
        if (record_offsets) record_offsets->push_back(static_cast<std::uint32_t>(w.size()));
        w.u64(d.inode_id);
        w.u32(d.logical_offset);
        w.u16(static_cast<std::uint16_t>(d.states.size()));
        for (const StateDescriptor& s : d.states) {
            w.u8(static_cast<std::uint8_t>(s.area));
            w.u32(s.byte_offset);
            w.u32(s.length);
            w.u8(s.codec_id);
            w.u8(static_cast<std::uint8_t>(s.kind));
            w.u32(s.decoded_length);
        }
    }
    return w.take();
}

std::vector<BlockDescriptor> parse_desc_table(ByteView b) {
    ByteReader r(b);
    std::uint16_t n = r.u16();
    std::vector<BlockDescriptor> out(n);
    for (std::uint16_t i = 0; i < n; i++) {
        out[i].inode_id = r.u64();
        out[i].logical_offset = r.u32();
        std::uint16_t k = r.u16();
        out[i].states.resize(k);
        for (std::uint16_t j = 0; j < k; j++) {
            StateDescriptor& s = out[i].states[j];
            s.area = static_cast<AreaType>(r.u8());
            s.byte_offset = r.u32();
            s.length = r.u32();
            s.codec_id = r.u8();
            s.kind = static_cast<FragmentKind>(r.u8());
            s.decoded_length = r.u32();
        }
    }
    return out;
}

Bytes encode_delta(const std::vector<DeltaRange>& ranges) {
    ByteWriter w;
    w.u16(static_cast<std::uint16_t>(ranges.size()));
    for (const DeltaRange& r : ranges) {
        w.u32(r.offset);
        w.u32(static_cast<std::uint32_t>(r.payload.size()));
    }
    for (const DeltaRange& r : ranges) w.bytes(r.payload);
    return w.take();
}

std::vector<DeltaRange> parse_delta(ByteView b) {
    ByteReader r(b);
    std::uint16_t n = r.u16();
    std::vector<DeltaRange> out(n);
    std::vector<std::uint32_t> lens(n);
    for (std::uint16_t i = 0; i < n; i++) {
        out[i].offset = r.u32();
        lens[i] = r.u32();
    }
    for (std::uint16_t i = 0; i < n; i++) out[i].payload = r.bytes(lens[i]);
    return out;
}

void apply_delta(Bytes& block, const std::vector<DeltaRange>& ranges) {
    for (const DeltaRange& r : ranges) {
        std::size_t end = r.offset + r.payload.size();
        if (end > block.size()) block.resize(end, 0);
        std::copy(r.payload.begin(), r.payload.end(),
                  block.begin() + static_cast<std::ptrdiff_t>(r.offset));
    }
}

std::vector<DeltaRange> diff_blocks(ByteView before, ByteView after) {
    std::size_t n = std::min(before.size(), after.size());
    std::size_t prefix = 0;
    while (prefix < n && before[prefix] == after[prefix]) prefix++;
    if (prefix == after.size() && after.size() == before.size()) return {};
    std::size_t suffix = 0;
    if (before.size() == after.size()) {
        while (suffix < n - prefix &&
               before[before.size() - 1 - suffix] == after[after.size() - 1 - suffix])
            suffix++;
    }
    DeltaRange range;
    range.offset = static_cast<std::uint32_t>(prefix);
    range.payload.assign(after.begin() + static_cast<std::ptrdiff_t>(prefix),
                         after.end() - static_cast<std::ptrdiff_t>(suffix));
    if (range.payload.empty()) return {};
    return {std::move(range)};
}

// --- LogEngine ---------------------------------------------------------------

namespace {
constexpr std::uint16_t kDirectEntry = 0xFFFF;

std::uint32_t pages_for(std::uint64_t bytes, std::uint32_t page_size) {
    return static_cast<std::uint32_t>((bytes + page_size - 1) / page_size);
}
} // namespace

LogEngine::LogEngine(NandDevice& device, std::uint32_t peb_id, LogContext ctx, EngineConfig cfg)
    : device_(device),
      peb_id_(peb_id),
      ctx_(std::move(ctx)),
      cfg_(cfg),
      bitmap_(device.geometry().pages_per_peb),
      chains_(device.geometry().pages_per_peb),
      chain_inode_(device.geometry().pages_per_peb, 0),
      chain_logical_(device.geometry().pages_per_peb, 0) {}

void LogEngine::check_slot(std::uint32_t slot) const {
    if (slot >= bitmap_.block_count()) fail(Errc::out_of_range, "block slot " + std::to_string(slot));
}

std::uint32_t LogEngine::alloc_block() {
    auto slot = bitmap_.first_free();
    if (!slot) fail(Errc::log_full, "no free logical block in peb " + std::to_string(peb_id_));
    return *slot;
}

Placement LogEngine::stage_fragment(std::uint32_t block_slot, std::uint64_t inode_id,
                                    std::uint32_t logical_offset, FragmentKind kind,
                                    std::uint8_t codec_id, Bytes encoded,
                                    std::uint32_t decoded_length, bool prefer_diff) {
    check_slot(block_slot);
    if (encoded.size() > page_size()) fail(Errc::invalid_length, "fragment exceeds one page");

    // Plan the placement without mutating anything, so a LogFull rejection
    // leaves the staging area untouched.
    bool is_main = kind == FragmentKind::full_block && codec_id == kCodecNone &&
                   decoded_length == block_size() && encoded.size() == block_size();
    AreaType area = AreaType::journal;
    int target_page = -1; // index into the chosen area's page list; -1 = new page
    bool new_page = false;

    if (is_main) {
        area = AreaType::main;
        new_page = true;
    } else {
        std::uint32_t need = static_cast<std::uint32_t>(encoded.size());
        if (prefer_diff) {
            for (std::size_t i = 0; i < diff_pages_.size(); i++) {
                if (diff_pages_[i].inode_id == inode_id && diff_pages_[i].fill + need <= page_size()) {
                    area = AreaType::diff;
                    target_page = static_cast<int>(i);
                    break;
                }
            }
            if (target_page < 0) {
                bool same_inode_staged = false;
                for (const StagedFragment& f : staged_) {
                    if (f.inode_id == inode_id && f.area == AreaType::journal) {
                        same_inode_staged = true;
                        break;
                    }
                }
                if (same_inode_staged) {
                    area = AreaType::diff;
                    new_page = true;
                }
            }
        }
        if (target_page < 0 && !new_page) {
            area = AreaType::journal;
            for (std::size_t i = 0; i < journal_pages_.size(); i++) {
                if (journal_pages_[i].fill + need <= page_size()) {
                    target_page = static_cast<int>(i);
                    break;
                }
            }
            if (target_page < 0) new_page = true;
        }
    }

    std::uint32_t extra_pages = new_page ? 1 : 0;
    if (staged_page_estimate() + extra_pages + 1 > free_pages()) {
        // +1 keeps one page of slack for metadata growth of this fragment.
        fail(Errc::log_full, "peb " + std::to_string(peb_id_) + " exhausted");
    }

    std::vector<PageBuf>* pages = nullptr;
    switch (area) {
        case AreaType::main: pages = &main_pages_; break;
        case AreaType::diff: pages = &diff_pages_; break;
        default: pages = &journal_pages_; break;
    }
    if (new_page) {
        PageBuf page;
        page.area = area;
        page.inode_id = inode_id;
        pages->push_back(page);
        target_page = static_cast<int>(pages->size() - 1);
    }
    PageBuf& page = (*pages)[static_cast<std::size_t>(target_page)];

    StagedFragment frag;
    frag.block_slot = block_slot;
    frag.inode_id = inode_id;
    frag.logical_offset = logical_offset;
    frag.kind = kind;
    frag.codec_id = codec_id;
    frag.decoded_length = decoded_length;
    frag.area = area;
    frag.page_index = static_cast<std::uint32_t>(target_page);
    frag.offset_in_page = is_main ? 0 : page.fill;
    frag.encoded = std::move(encoded);
    page.fill = is_main ? page_size() : page.fill + static_cast<std::uint32_t>(frag.encoded.size());
    page.fragment_ids.push_back(staged_.size());

    Placement placement;
    placement.block_slot = block_slot;
    placement.staged.area = frag.area;
    placement.staged.kind = frag.kind;
    placement.staged.codec_id = frag.codec_id;
    placement.staged.length = static_cast<std::uint32_t>(frag.encoded.size());
    placement.staged.decoded_length = frag.decoded_length;

    chain_inode_[block_slot] = inode_id;
    chain_logical_[block_slot] = logical_offset;

    FragmentRef ref;
    ref.staged = true;
    ref.staged_bytes = frag.encoded;
    ref.desc = placement.staged;
    ref.inode_id = inode_id;
    ref.logical_offset = logical_offset;
    if (kind != FragmentKind::delta) chains_[block_slot].clear();
    chains_[block_slot].push_back(std::move(ref));

    staged_.push_back(std::move(frag));
    return placement;
}

std::uint32_t LogEngine::metadata_bytes_estimate() const {
    std::uint32_t bitmap_bytes = 1 + 2 * (4 + 4 + (bitmap_.block_count() + 3) / 4);
    std::uint32_t table_bytes = 2 + static_cast<std::uint32_t>(staged_.size()) * 13;
    std::uint32_t desc_bytes = 2 + static_cast<std::uint32_t>(staged_.size()) * (14 + 15);
    return bitmap_bytes + table_bytes + desc_bytes;
}

std::uint32_t LogEngine::staged_page_estimate() const {
    std::uint32_t payload = static_cast<std::uint32_t>(main_pages_.size() + diff_pages_.size() +
                                                       journal_pages_.size());
    std::uint32_t header_pages = wrote_segment_header_ ? 1 : 2;
    std::uint32_t md = pages_for(metadata_bytes_estimate(), page_size());
    return header_pages + md + payload + 1; // +1 footer reserve
}

std::uint32_t LogEngine::free_pages() const {
    return device_.geometry().pages_per_peb - frontier_;
}

bool LogEngine::fits(std::uint32_t extra_payload_pages) const {
    return staged_page_estimate() + extra_payload_pages <= free_pages();
}

bool LogEngine::has_staged() const { return !staged_.empty(); }

Placement LogEngine::append_block(std::uint64_t inode_id, std::uint32_t logical_offset,
                                  std::uint32_t block_slot, ByteView data) {
    check_slot(block_slot);
    if (data.empty() || data.size() > block_size()) fail(Errc::invalid_length, "block payload size");
    if (bitmap_.get(block_slot) != BlockState::free)
        fail(Errc::illegal_transition, "append to non-free block slot");

    if (data.size() == block_size()) {
        if (cfg_.data_codec != kCodecNone) {
            Bytes packed = codec_encode(cfg_.data_codec, data);
            if (packed.size() < page_size()) {
                Placement p = stage_fragment(block_slot, inode_id, logical_offset,
                                             FragmentKind::compressed, cfg_.data_codec,
                                             std::move(packed),
                                             static_cast<std::uint32_t>(data.size()),
                                             /*prefer_diff=*/true);
                bitmap_.set(block_slot, BlockState::pre_allocated);
                return p;
            }
        }
        Placement p = stage_fragment(block_slot, inode_id, logical_offset, FragmentKind::full_block,
                                     kCodecNone, Bytes(data.begin(), data.end()),
                                     static_cast<std::uint32_t>(data.size()), false);
        bitmap_.set(block_slot, BlockState::used);
        return p;
    }

    // Sub-page content: a pre-allocated fragment in the journal.
    Bytes payload(data.begin(), data.end());
    std::uint8_t codec = kCodecNone;
    if (cfg_.data_codec != kCodecNone) {
        Bytes packed = codec_encode(cfg_.data_codec, data);
        if (packed.size() < payload.size()) {
            payload = std::move(packed);
            codec = cfg_.data_codec;
        }
    }
    FragmentKind kind = codec == kCodecNone ? FragmentKind::full_block : FragmentKind::compressed;
    Placement p = stage_fragment(block_slot, inode_id, logical_offset, kind, codec,
                                 std::move(payload), static_cast<std::uint32_t>(data.size()), false);
    bitmap_.set(block_slot, BlockState::pre_allocated);
    return p;
}

Placement LogEngine::append_update(std::uint32_t block_slot, std::uint64_t inode_id,
                                   std::uint32_t logical_offset,
                                   const std::vector<DeltaRange>& delta) {
    check_slot(block_slot);
    if (chains_[block_slot].empty()) fail(Errc::lost_base, "update of a block with no stored state");
    for (const DeltaRange& r : delta) {
        if (r.offset + r.payload.size() > block_size())
            fail(Errc::delta_out_of_range, "range beyond block size");
        if (r.payload.empty()) fail(Errc::delta_out_of_range, "empty delta range");
    }
    Bytes blob = encode_delta(delta);
    std::uint32_t blob_len = static_cast<std::uint32_t>(blob.size());
    if (blob.size() >= block_size()) {
        Bytes content = reconstruct_block(block_slot);
        apply_delta(content, delta);
        return append_full_update(block_slot, inode_id, logical_offset, content);
    }
    std::uint8_t codec = kCodecNone;
    if (cfg_.data_codec != kCodecNone) {
        Bytes packed = codec_encode(cfg_.data_codec, blob);
        if (packed.size() < blob.size()) {
            blob = std::move(packed);
            codec = cfg_.data_codec;
        }
    }
    return stage_fragment(block_slot, inode_id, logical_offset, FragmentKind::delta, codec,
                          std::move(blob), blob_len, /*prefer_diff=*/true);
}

Placement LogEngine::append_full_update(std::uint32_t block_slot, std::uint64_t inode_id,
                                        std::uint32_t logical_offset, ByteView data) {
    check_slot(block_slot);
    if (data.empty() || data.size() > block_size()) fail(Errc::invalid_length, "block payload size");
    BlockState cur = bitmap_.get(block_slot);
    if (cur != BlockState::used && cur != BlockState::pre_allocated)
        fail(Errc::illegal_transition, "full update of a dead block");

    if (data.size() == block_size()) {
        Placement p = stage_fragment(block_slot, inode_id, logical_offset, FragmentKind::full_block,
                                     kCodecNone, Bytes(data.begin(), data.end()),
                                     static_cast<std::uint32_t>(data.size()), false);
        bitmap_.set(block_slot, BlockState::used);
        return p;
    }
    Placement p = stage_fragment(block_slot, inode_id, logical_offset, FragmentKind::full_block,
                                 kCodecNone, Bytes(data.begin(), data.end()),
                                 static_cast<std::uint32_t>(data.size()), true);
    bitmap_.set(block_slot, BlockState::pre_allocated);
    return p;
}

std::vector<Placement> LogEngine::compact_small(const std::vector<SmallItem>& items) {
    std::vector<Placement> out;
    out.reserve(items.size());
    for (const SmallItem& item : items) {
        if (item.bytes.empty() || item.bytes.size() >= page_size())
            fail(Errc::invalid_length, "compaction item must be smaller than a page");
        std::uint32_t slot = alloc_block();
        out.push_back(append_block(item.inode_id, item.logical_offset, slot, item.bytes));
    }
    return out;
}

Bytes LogEngine::fragment_bytes(const FragmentRef& ref) {
    if (ref.staged) return ref.staged_bytes;
    auto it = committed_areas_.find(ref.log_start_page);
    if (it == committed_areas_.end()) fail(Errc::lost_base, "unknown log for fragment");
    for (const AreaDescriptor& a : it->second) {
        if (a.area_type != ref.desc.area) continue;
        AreaDescriptor slice = a;
        slice.offset = a.offset + ref.desc.byte_offset;
        slice.size = ref.desc.length;
        return read_area(device_, peb_id_, ref.log_start_page, slice);
    }
    fail(Errc::lost_base, "fragment area not found in peb " + std::to_string(peb_id_));
}

Bytes LogEngine::reconstruct_block(std::uint32_t block_slot) {
    check_slot(block_slot);
    const std::vector<FragmentRef>& chain = chains_[block_slot];
    if (chain.empty()) fail(Errc::lost_base, "block has no stored state");

    std::size_t base_idx = chain.size();
    for (std::size_t i = chain.size(); i-- > 0;) {
        if (chain[i].desc.kind != FragmentKind::delta) {
            base_idx = i;
            break;
        }
    }
    if (base_idx == chain.size()) fail(Errc::lost_base, "no full-block base found");

    Bytes content;
    {
        const FragmentRef& base = chain[base_idx];
        Bytes raw = fragment_bytes(base);
        if (base.desc.codec_id == kCodecNone && base.desc.kind == FragmentKind::full_block &&
            raw.size() > base.desc.decoded_length) {
            raw.resize(base.desc.decoded_length);
        }
        content = codec_decode(base.desc.codec_id, raw, base.desc.decoded_length);
    }
    for (std::size_t i = base_idx + 1; i < chain.size(); i++) {
        const FragmentRef& ref = chain[i];
        Bytes raw = fragment_bytes(ref);
        Bytes blob = codec_decode(ref.desc.codec_id, raw, ref.desc.decoded_length);
        std::vector<DeltaRange> ranges = parse_delta(blob);
        apply_delta(content, ranges);
    }
    return content;
}

std::uint32_t LogEngine::stored_length(std::uint32_t block_slot) {
    return static_cast<std::uint32_t>(reconstruct_block(block_slot).size());
}

bool LogEngine::block_has_state(std::uint32_t block_slot) const {
    check_slot(block_slot);
    return !chains_[block_slot].empty();
}

std::uint64_t LogEngine::inode_of_block(std::uint32_t block_slot) const {
    check_slot(block_slot);
    return chain_inode_[block_slot];
}

std::uint32_t LogEngine::logical_offset_of_block(std::uint32_t block_slot) const {
    check_slot(block_slot);
    return chain_logical_[block_slot];
}

std::uint32_t LogEngine::accumulated_delta_bytes(std::uint32_t block_slot) const {
    check_slot(block_slot);
    const std::vector<FragmentRef>& chain = chains_[block_slot];
    std::uint32_t acc = 0;
    for (std::size_t i = chain.size(); i-- > 0;) {
        if (chain[i].desc.kind != FragmentKind::delta) break;
        acc += chain[i].desc.decoded_length;
    }
    return acc;
}

bool LogEngine::wants_graduation(std::uint32_t block_slot) const {
    std::uint32_t acc = accumulated_delta_bytes(block_slot);
    if (acc == 0) return false;
    return acc >= block_size() * cfg_.graduation_fraction_pct / 100 || acc >= page_size();
}

bool LogEngine::merge_graduation(std::uint32_t block_slot) {
    if (!wants_graduation(block_slot)) return false;
    Bytes content = reconstruct_block(block_slot);
    std::uint64_t inode_id = chain_inode_[block_slot];
    std::uint32_t logical = chain_logical_[block_slot];
    if (content.size() == block_size()) {
        append_full_update(block_slot, inode_id, logical, content);
    } else {
        stage_fragment(block_slot, inode_id, logical, FragmentKind::full_block, kCodecNone, content,
                       static_cast<std::uint32_t>(content.size()), true);
    }
    return true;
}

void LogEngine::invalidate_block(std::uint32_t block_slot) {
    check_slot(block_slot);
    bitmap_.set(block_slot, BlockState::invalid);
    chains_[block_slot].clear();
    // Drop any staged fragments of the block; they are dead before commit.
    for (StagedFragment& f : staged_) {
        if (f.block_slot == block_slot) f.dead = true;
    }
}

CommitInfo LogEngine::commit(CommitMode mode, bool with_footer) {
    const std::uint32_t psz = page_size();
    if (mode == CommitMode::full) with_footer = true;

    std::uint64_t checkpoint = ctx_.next_checkpoint ? ctx_.next_checkpoint() : last_checkpoint_ + 1;

    // Live staged states per slot: from the newest staged base onward (older
    // staged states are superseded; bytes stay in the page images but no
    // table record points at them).
    std::map<std::uint32_t, std::vector<std::size_t>> live_by_slot;
    for (std::size_t i = 0; i < staged_.size(); i++) {
        const StagedFragment& f = staged_[i];
        if (f.dead) continue;
        std::vector<std::size_t>& ids = live_by_slot[f.block_slot];
        if (f.kind != FragmentKind::delta) ids.clear();
        ids.push_back(i);
    }

    auto area_bytes = [&](const std::vector<PageBuf>& pages) {
        Bytes out(static_cast<std::size_t>(pages.size()) * psz, 0);
        for (std::size_t p = 0; p < pages.size(); p++) {
            for (std::size_t fid : pages[p].fragment_ids) {
                const StagedFragment& f = staged_[fid];
                std::copy(f.encoded.begin(), f.encoded.end(),
                          out.begin() + static_cast<std::ptrdiff_t>(p * psz + f.offset_in_page));
            }
        }
        return out;
    };
    Bytes main_area = area_bytes(main_pages_);
    Bytes diff_area = area_bytes(diff_pages_);
    Bytes journal_area = area_bytes(journal_pages_);

    std::vector<BlockDescriptor> descs;
    std::vector<BlockTableEntry> table;
    std::map<std::uint32_t, std::uint16_t> desc_of_slot;
    for (auto& [slot, ids] : live_by_slot) {
        if (ids.empty()) continue;
        BlockDescriptor d;
        d.inode_id = staged_[ids.front()].inode_id;
        d.logical_offset = staged_[ids.front()].logical_offset;
        for (std::size_t fid : ids) {
            const StagedFragment& f = staged_[fid];
            StateDescriptor s;
            s.area = f.area;
            s.byte_offset = f.page_index * psz + f.offset_in_page;
            s.length = static_cast<std::uint32_t>(f.encoded.size());
            s.codec_id = f.codec_id;
            s.kind = f.kind;
            s.decoded_length = f.decoded_length;
            d.states.push_back(s);
        }
        desc_of_slot[slot] = static_cast<std::uint16_t>(descs.size());
        descs.push_back(std::move(d));
    }
    std::vector<std::uint32_t> desc_offsets;
    Bytes desc_table = encode_desc_table(descs, &desc_offsets);
    for (auto& [slot, ids] : live_by_slot) {
        if (ids.empty()) continue;
        BlockTableEntry e;
        e.block_slot = static_cast<std::uint16_t>(slot);
        e.logical_offset = staged_[ids.front()].logical_offset;
        const StagedFragment& last = staged_[ids.back()];
        if (ids.size() == 1 && last.kind == FragmentKind::full_block &&
            last.codec_id == kCodecNone && last.area == AreaType::main) {
            e.area = AreaType::main;
            e.byte_offset = last.page_index * psz + last.offset_in_page;
            e.desc_index = kDirectEntry;
        } else {
            e.area = AreaType::blk_desc_table;
            e.desc_index = desc_of_slot[slot];
            e.byte_offset = desc_offsets[e.desc_index];
        }
        table.push_back(e);
    }
    Bytes block_table = encode_block_table(table);

    Bytes bitmap_blob;
    {
        ByteWriter w;
        Bytes self = bitmap_.encode();
        Bytes src = source_bitmap_ ? source_bitmap_() : Bytes{};
        w.u8(src.empty() ? 1 : 2);
        w.u32(static_cast<std::uint32_t>(self.size()));
        w.bytes(self);
        if (!src.empty()) {
            w.u32(static_cast<std::uint32_t>(src.size()));
            w.bytes(src);
        }
        bitmap_blob = w.take();
    }

    bool first_log_of_peb = frontier_ == 0;
    bool full = mode == CommitMode::full;
    std::uint32_t header_pages = full ? 1 : (first_log_of_peb ? 2 : 1);

    std::uint64_t md_offset = static_cast<std::uint64_t>(header_pages) * psz;
    std::vector<AreaDescriptor> areas;
    auto push_area = [&](AreaType t, std::uint64_t off, std::uint64_t size) {
        if (size == 0) return;
        AreaDescriptor a;
        a.area_type = t;
        a.offset = off;
        a.size = size;
        areas.push_back(a);
    };
    std::uint64_t cursor = md_offset;
    push_area(AreaType::block_bitmap, cursor, bitmap_blob.size());
    cursor += bitmap_blob.size();
    push_area(AreaType::blk_table, cursor, block_table.size());
    cursor += block_table.size();
    push_area(AreaType::blk_desc_table, cursor, desc_table.size());
    cursor += desc_table.size();
    std::uint32_t md_pages = pages_for(cursor - md_offset, psz);
    cursor = md_offset + static_cast<std::uint64_t>(md_pages) * psz;
    std::uint64_t main_off = cursor;
    push_area(AreaType::main, cursor, main_area.size());
    cursor += main_area.size();
    std::uint64_t diff_off = cursor;
    push_area(AreaType::diff, cursor, diff_area.size());
    cursor += diff_area.size();
    std::uint64_t journal_off = cursor;
    push_area(AreaType::journal, cursor, journal_area.size());
    cursor += journal_area.size();

    std::uint32_t natural_pages = pages_for(cursor, psz);
    std::uint32_t log_pages;
    std::uint32_t footer_page = 0;
    if (full) {
        std::uint32_t quota =
            cfg_.full_log_pages == 0 ? device_.geometry().pages_per_peb : cfg_.full_log_pages;
        if (natural_pages + 1 > quota) fail(Errc::log_full, "staged data exceeds full-log quota");
        if (quota > free_pages()) fail(Errc::log_full, "full-log quota exceeds erased pages");
        log_pages = quota;
        footer_page = quota - 1;
    } else {
        log_pages = natural_pages + (with_footer ? 1 : 0);
        if (log_pages > free_pages()) fail(Errc::log_full, "log does not fit erased pages");
        if (with_footer) footer_page = log_pages - 1;
    }

    Bytes footer_bytes;
    if (with_footer) {
        LogFooter footer = ctx_.footer_template ? ctx_.footer_template() : LogFooter{};
        footer.areas = areas;
        footer_bytes = encode_footer(footer);
        push_area(AreaType::footer, static_cast<std::uint64_t>(footer_page) * psz,
                  footer_bytes.size());
    }

    std::uint8_t flags = 0;
    if (full) flags |= kLogFull;
    if (!full && first_log_of_peb) flags |= kLogPartialFirst;
    if (!full && with_footer) flags |= kLogHasFooter;

    SegmentHeader hdr = ctx_.header_template ? ctx_.header_template() : SegmentHeader{};
    hdr.checkpoint_id = checkpoint;
    hdr.seg_id = ctx_.seg_id;
    hdr.leb_index = ctx_.leb_index;
    hdr.seg_type = ctx_.seg_type;
    hdr.flags = flags;
    hdr.log_pages = log_pages;
    hdr.areas = areas;

    PartialLogHeader ph;
    ph.checkpoint_id = checkpoint;
    ph.page_size = psz;
    ph.pages_per_peb = device_.geometry().pages_per_peb;
    if (ctx_.footer_template) {
        LogFooter f = ctx_.footer_template();
        ph.free_blocks = f.state.free_blocks;
        ph.files_count = f.state.files_count;
    }
    ph.seg_id = ctx_.seg_id;
    ph.leb_index = ctx_.leb_index;
    ph.seg_type = ctx_.seg_type;
    ph.flags = flags;
    ph.log_pages = log_pages;
    ph.areas = areas;

    std::uint32_t base = frontier_;
    std::uint32_t md_written = 0;
    std::uint32_t payload_written = 0;
    auto program_one = [&](std::uint32_t rel_page, ByteView bytes, bool metadata) {
        Bytes page(psz, 0);
        std::copy(bytes.begin(), bytes.end(), page.begin());
        device_.program_page(peb_id_, base + rel_page, page);
        if (metadata) {
            metadata_pages_written_++;
            md_written++;
        } else {
            payload_pages_written_++;
            payload_written++;
        }
    };

    if (full || first_log_of_peb) {
        program_one(0, encode_header(hdr), true);
        if (!full) program_one(1, encode_partial_header(ph), true);
    } else {
        program_one(0, encode_partial_header(ph), true);
    }

    {
        Bytes md;
        md.insert(md.end(), bitmap_blob.begin(), bitmap_blob.end());
        md.insert(md.end(), block_table.begin(), block_table.end());
        md.insert(md.end(), desc_table.begin(), desc_table.end());
        for (std::uint32_t p = 0; p < md_pages; p++) {
            std::size_t lo = static_cast<std::size_t>(p) * psz;
            std::size_t hi = std::min<std::size_t>(lo + psz, md.size());
            if (lo >= md.size()) break;
            program_one(header_pages + p, ByteView(md.data() + lo, hi - lo), true);
        }
    }

    auto program_payload = [&](std::uint64_t off, const Bytes& bytes) {
        for (std::uint32_t p = 0; p < bytes.size() / psz; p++) {
            program_one(static_cast<std::uint32_t>(off / psz) + p,
                        ByteView(bytes.data() + static_cast<std::size_t>(p) * psz, psz), false);
        }
    };
    program_payload(main_off, main_area);
    program_payload(diff_off, diff_area);
    program_payload(journal_off, journal_area);

    if (with_footer) program_one(footer_page, footer_bytes, true);

    // Staged chain refs become located refs.
    for (auto& chain : chains_) {
        chain.erase(std::remove_if(chain.begin(), chain.end(),
                                   [](const FragmentRef& r) { return r.staged; }),
                    chain.end());
    }
    for (auto& [slot, ids] : live_by_slot) {
        std::vector<FragmentRef>& chain = chains_[slot];
        for (std::size_t fid : ids) {
            const StagedFragment& f = staged_[fid];
            FragmentRef ref;
            ref.checkpoint_id = checkpoint;
            ref.log_start_page = base;
            ref.staged = false;
            ref.inode_id = f.inode_id;
            ref.logical_offset = f.logical_offset;
            ref.desc.area = f.area;
            ref.desc.byte_offset = f.page_index * psz + f.offset_in_page;
            ref.desc.length = static_cast<std::uint32_t>(f.encoded.size());
            ref.desc.codec_id = f.codec_id;
            ref.desc.kind = f.kind;
            ref.desc.decoded_length = f.decoded_length;
            if (ref.desc.kind != FragmentKind::delta) chain.clear();
            chain.push_back(std::move(ref));
        }
    }

    committed_areas_[base] = areas;
    staged_.clear();
    main_pages_.clear();
    diff_pages_.clear();
    journal_pages_.clear();
    frontier_ = base + log_pages;
    last_checkpoint_ = checkpoint;
    wrote_segment_header_ = true;

    CommitInfo info;
    info.checkpoint_id = checkpoint;
    info.start_page = base;
    info.log_pages = log_pages;
    info.metadata_pages = md_written;
    info.payload_pages = payload_written;
    info.has_footer = with_footer;
    return info;
}

void LogEngine::rebuild_from_device() {
    staged_.clear();
    main_pages_.clear();
    diff_pages_.clear();
    journal_pages_.clear();
    committed_areas_.clear();
    for (auto& c : chains_) c.clear();
    bitmap_ = BlockBitmap(device_.geometry().pages_per_peb);
    frontier_ = 0;
    wrote_segment_header_ = false;

    ScanResult scan = scan_peb(device_, peb_id_);
    for (const ScannedLog& log : scan.logs) {
        const AreaDescriptor* bm = nullptr;
        const AreaDescriptor* bt = nullptr;
        const AreaDescriptor* dt = nullptr;
        for (const AreaDescriptor& a : log.areas) {
            if (a.area_type == AreaType::block_bitmap) bm = &a;
            if (a.area_type == AreaType::blk_table) bt = &a;
            if (a.area_type == AreaType::blk_desc_table) dt = &a;
        }
        if (bm) {
            Bytes blob = read_area(device_, peb_id_, log.start_page, *bm);
            ByteReader r(blob);
            r.u8(); // bitmap count
            std::uint32_t len = r.u32();
            Bytes self = r.bytes(len);
            bitmap_ = BlockBitmap::decode(self);
        }
        std::vector<BlockDescriptor> descs;
        if (dt) descs = parse_desc_table(read_area(device_, peb_id_, log.start_page, *dt));
        if (bt) {
            std::vector<BlockTableEntry> table =
                parse_block_table(read_area(device_, peb_id_, log.start_page, *bt));
            for (const BlockTableEntry& e : table) {
                std::vector<FragmentRef>& chain = chains_[e.block_slot];
                if (e.desc_index == kDirectEntry) {
                    FragmentRef ref;
                    ref.checkpoint_id = log.checkpoint_id;
                    ref.log_start_page = log.start_page;
                    ref.staged = false;
                    ref.logical_offset = e.logical_offset;
                    ref.desc.area = e.area;
                    ref.desc.byte_offset = e.byte_offset;
                    ref.desc.length = block_size();
                    ref.desc.codec_id = kCodecNone;
                    ref.desc.kind = FragmentKind::full_block;
                    ref.desc.decoded_length = block_size();
                    chain.clear();
                    chain.push_back(std::move(ref));
                    chain_logical_[e.block_slot] = e.logical_offset;
                } else {
                    const BlockDescriptor& d = descs.at(e.desc_index);
                    for (const StateDescriptor& s : d.states) {
                        if (s.kind != FragmentKind::delta) chain.clear();
                        FragmentRef ref;
                        ref.checkpoint_id = log.checkpoint_id;
                        ref.log_start_page = log.start_page;
                        ref.staged = false;
                        ref.inode_id = d.inode_id;
                        ref.logical_offset = d.logical_offset;
                        ref.desc = s;
                        chain.push_back(std::move(ref));
                    }
                    chain_inode_[e.block_slot] = d.inode_id;
                    chain_logical_[e.block_slot] = d.logical_offset;
                }
            }
        }
        committed_areas_[log.start_page] = log.areas;
        frontier_ = log.start_page + log.log_pages;
        last_checkpoint_ = log.checkpoint_id;
        wrote_segment_header_ = true;
    }
    for (std::uint32_t i = 0; i < bitmap_.block_count(); i++) {
        if (bitmap_.get(i) == BlockState::invalid || bitmap_.get(i) == BlockState::free)
            chains_[i].clear();
    }
}

std::optional<BlockTableEntry> LogEngine::resolve_via_scan(std::uint32_t block_slot) {
    ScanResult scan = scan_peb(device_, peb_id_);
    for (std::size_t i = scan.logs.size(); i-- > 0;) {
        const ScannedLog& log = scan.logs[i];
        const AreaDescriptor* bt = nullptr;
        for (const AreaDescriptor& a : log.areas)
            if (a.area_type == AreaType::blk_table) bt = &a;
        if (!bt) continue;
        std::vector<BlockTableEntry> table =
            parse_block_table(read_area(device_, peb_id_, log.start_page, *bt));
        for (const BlockTableEntry& e : table) {
            if (e.block_slot == block_slot) return e;
        }
    }
    return std::nullopt;
}

const std::vector<FragmentRef>& LogEngine::chain(std::uint32_t block_slot) const {
    check_slot(block_slot);
    return chains_[block_slot];
}

} // namespace ssdfs
