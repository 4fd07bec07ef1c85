#include "ssdfs/layout.hpp"

#include <algorithm>

namespace ssdfs {

namespace {

// Frame prefix: magic u32, total_len u32, checksum u32.
constexpr std::size_t kFrameBytes = 12;
constexpr std::size_t kChecksumPos = 8;

void begin_frame(ByteWriter& w, std::uint32_t magic) {
    w.u32(magic);
    w.u32(0); // total_len, patched
    w.u32(0); // checksum, patched
}

Bytes end_frame(ByteWriter&& w) {
    Bytes out = w.take();
    std::uint32_t len = static_cast<std::uint32_t>(out.size());
    for (int i = 0; i < 4; i++) out[4 + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(len >> (8 * i));
    std::uint32_t crc = crc32c(out);
    for (int i = 0; i < 4; i++) out[kChecksumPos + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(crc >> (8 * i));
    return out;
}

// Validates magic, length, and checksum; returns a reader positioned after
// the frame prefix and the frame length.
ByteReader open_frame(ByteView b, std::uint32_t magic, const char* what) {
    if (b.size() < kFrameBytes) fail(Errc::malformed, std::string(what) + " shorter than frame");
    std::uint32_t got_magic = 0;
    for (int i = 0; i < 4; i++) got_magic |= static_cast<std::uint32_t>(b[static_cast<std::size_t>(i)]) << (8 * i);
    if (got_magic != magic) fail(Errc::bad_magic, what);
    std::uint32_t len = 0;
    for (int i = 0; i < 4; i++) len |= static_cast<std::uint32_t>(b[4 + static_cast<std::size_t>(i)]) << (8 * i);
    if (len < kFrameBytes || len > b.size()) fail(Errc::malformed, std::string(what) + " length out of range");
    Bytes copy(b.begin(), b.begin() + len);
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; i++) stored |= static_cast<std::uint32_t>(copy[kChecksumPos + static_cast<std::size_t>(i)]) << (8 * i);
    for (int i = 0; i < 4; i++) copy[kChecksumPos + static_cast<std::size_t>(i)] = 0;
    if (crc32c(copy) != stored) fail(Errc::bad_checksum, what);
    ByteReader r(b.subspan(0, len));
    r.skip(kFrameBytes);
    return r;
}

void write_areas(ByteWriter& w, const std::vector<AreaDescriptor>& areas) {
    w.u16(static_cast<std::uint16_t>(areas.size()));
    for (const AreaDescriptor& a : areas) {
        w.u8(static_cast<std::uint8_t>(a.area_type));
        w.u8(a.codec_id);
        w.u64(a.offset);
        w.u64(a.size);
    }
}

std::vector<AreaDescriptor> read_areas(ByteReader& r) {
    std::uint16_t n = r.u16();
    std::vector<AreaDescriptor> areas;
    areas.reserve(n);
    std::uint64_t prev_offset = 0;
    bool first = true;
    for (std::uint16_t i = 0; i < n; i++) {
        AreaDescriptor a;
        std::uint8_t t = r.u8();
        if (t > static_cast<std::uint8_t>(AreaType::footer)) fail(Errc::malformed, "unknown area type");
        a.area_type = static_cast<AreaType>(t);
        a.codec_id = r.u8();
        a.offset = r.u64();
        a.size = r.u64();
        if (a.size == 0) fail(Errc::malformed, "empty area descriptor");
        if (!first && a.offset < prev_offset) fail(Errc::malformed, "area offsets not ascending");
        prev_offset = a.offset + a.size;
        first = false;
        areas.push_back(a);
    }
    return areas;
}

void write_id_list(ByteWriter& w, const std::vector<std::uint64_t>& ids) {
    w.u16(static_cast<std::uint16_t>(ids.size()));
    for (std::uint64_t id : ids) w.u64(id);
}

std::vector<std::uint64_t> read_id_list(ByteReader& r) {
    std::uint16_t n = r.u16();
    std::vector<std::uint64_t> ids(n);
    for (std::uint16_t i = 0; i < n; i++) ids[i] = r.u64();
    return ids;
}

void write_root(ByteWriter& w, const RootNodeImage& root) {
    w.u8(root.height);
    w.u8(root.flags);
    w.u32(root.item_size);
    w.u16(root.item_count);
    for (const RootSlot& s : root.slots) {
        w.u8(static_cast<std::uint8_t>(s.kind));
        w.u64(s.key);
        w.u64(s.child_seg);
        w.u32(s.child_block);
        w.u32(s.child_len);
        w.u8(s.child_kind);
        w.u8(s.preallocated);
    }
    w.bytes(root.inline_payload);
}

RootNodeImage read_root(ByteReader& r) {
    RootNodeImage root;
    root.height = r.u8();
    root.flags = r.u8();
    root.item_size = r.u32();
    root.item_count = r.u16();
    for (RootSlot& s : root.slots) {
        std::uint8_t k = r.u8();
        if (k > 2) fail(Errc::malformed, "bad root slot kind");
        s.kind = static_cast<RootSlotKind>(k);
        s.key = r.u64();
        s.child_seg = r.u64();
        s.child_block = r.u32();
        s.child_len = r.u32();
        s.child_kind = r.u8();
        s.preallocated = r.u8();
    }
    root.inline_payload = r.bytes(static_cast<std::size_t>(root.item_size) * 2);
    return root;
}

} // namespace

const char* area_type_name(AreaType t) {
    switch (t) {
        case AreaType::block_bitmap: return "block_bitmap";
        case AreaType::blk_table: return "blk_table";
        case AreaType::blk_desc_table: return "blk_desc_table";
        case AreaType::main: return "main";
        case AreaType::diff: return "diff";
        case AreaType::journal: return "journal";
        case AreaType::footer: return "footer";
    }
    return "?";
}

Bytes encode_header(const SegmentHeader& h) {
    ByteWriter w;
    begin_frame(w, kMagicSegmentHeader);
    w.u32(h.params.page_size);
    w.u32(h.params.pages_per_peb);
    w.u32(h.params.pebs_per_segment);
    w.u64(h.params.segment_size);
    w.u64(h.params.creation_timestamp);
    w.u32(h.params.inode_size);
    for (auto id : h.sb_chain.prev) w.u64(id);
    for (auto id : h.sb_chain.cur) w.u64(id);
    for (auto id : h.sb_chain.next) w.u64(id);
    write_id_list(w, h.reserved.mapping_table_segs);
    write_id_list(w, h.reserved.segment_bitmap_segs);
    w.u64(h.checkpoint_id);
    w.u64(h.seg_id);
    w.u16(h.leb_index);
    w.u8(h.seg_type);
    w.u8(h.flags);
    w.u32(h.log_pages);
    write_areas(w, h.areas);
    return end_frame(std::move(w));
}

SegmentHeader parse_header(ByteView b) {
    ByteReader r = open_frame(b, kMagicSegmentHeader, "segment header");
    SegmentHeader h;
    h.params.page_size = r.u32();
    h.params.pages_per_peb = r.u32();
    h.params.pebs_per_segment = r.u32();
    h.params.segment_size = r.u64();
    h.params.creation_timestamp = r.u64();
    h.params.inode_size = r.u32();
    for (auto& id : h.sb_chain.prev) id = r.u64();
    for (auto& id : h.sb_chain.cur) id = r.u64();
    for (auto& id : h.sb_chain.next) id = r.u64();
    h.reserved.mapping_table_segs = read_id_list(r);
    h.reserved.segment_bitmap_segs = read_id_list(r);
    h.checkpoint_id = r.u64();
    h.seg_id = r.u64();
    h.leb_index = r.u16();
    h.seg_type = r.u8();
    h.flags = r.u8();
    h.log_pages = r.u32();
    h.areas = read_areas(r);
    return h;
}

Bytes encode_partial_header(const PartialLogHeader& h) {
    ByteWriter w;
    begin_frame(w, kMagicPartialHeader);
    w.u64(h.checkpoint_id);
    w.u32(h.page_size);
    w.u32(h.pages_per_peb);
    w.u64(h.free_blocks);
    w.u64(h.files_count);
    w.u64(h.seg_id);
    w.u16(h.leb_index);
    w.u8(h.seg_type);
    w.u8(h.flags);
    w.u32(h.log_pages);
    write_areas(w, h.areas);
    return end_frame(std::move(w));
}

PartialLogHeader parse_partial_header(ByteView b) {
    ByteReader r = open_frame(b, kMagicPartialHeader, "partial log header");
    PartialLogHeader h;
    h.checkpoint_id = r.u64();
    h.page_size = r.u32();
    h.pages_per_peb = r.u32();
    h.free_blocks = r.u64();
    h.files_count = r.u64();
    h.seg_id = r.u64();
    h.leb_index = r.u16();
    h.seg_type = r.u8();
    h.flags = r.u8();
    h.log_pages = r.u32();
    h.areas = read_areas(r);
    return h;
}

Bytes encode_footer(const LogFooter& f) {
    ByteWriter w;
    begin_frame(w, kMagicLogFooter);
    w.u64(f.state.free_blocks);
    w.u64(f.state.files_count);
    w.bytes(ByteView(f.state.uuid.data(), f.state.uuid.size()));
    w.fixed_string(f.state.label, 32);
    w.u64(f.state.mount_generation);
    write_areas(w, f.areas);
    write_root(w, f.inodes_btree_root);
    return end_frame(std::move(w));
}

LogFooter parse_footer(ByteView b) {
    ByteReader r = open_frame(b, kMagicLogFooter, "log footer");
    LogFooter f;
    f.state.free_blocks = r.u64();
    f.state.files_count = r.u64();
    Bytes uuid = r.bytes(16);
    std::copy(uuid.begin(), uuid.end(), f.state.uuid.begin());
    f.state.label = r.fixed_string(32);
    f.state.mount_generation = r.u64();
    f.areas = read_areas(r);
    f.inodes_btree_root = read_root(r);
    return f;
}

Bytes encode_snapshot_table(const std::vector<SnapshotTableRecord>& recs) {
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(recs.size()));
    for (const SnapshotTableRecord& rec : recs) {
        w.u64(rec.snapshot_id);
        w.u64(rec.snapshot_segment_id);
    }
    return w.take();
}

std::vector<SnapshotTableRecord> parse_snapshot_table(ByteView b) {
    ByteReader r(b);
    std::uint32_t n = r.u32();
    std::vector<SnapshotTableRecord> recs(n);
    for (std::uint32_t i = 0; i < n; i++) {
        recs[i].snapshot_id = r.u64();
        recs[i].snapshot_segment_id = r.u64();
    }
    return recs;
}

Bytes read_area(NandDevice& device, std::uint32_t peb_id, std::uint32_t log_start_page,
                const AreaDescriptor& desc) {
    std::uint32_t page_size = device.geometry().page_size;
    Bytes out;
    out.reserve(desc.size);
    std::uint64_t pos = desc.offset;
    std::uint64_t end = desc.offset + desc.size;
    while (pos < end) {
        std::uint32_t page = log_start_page + static_cast<std::uint32_t>(pos / page_size);
        std::uint32_t in_page = static_cast<std::uint32_t>(pos % page_size);
        std::uint32_t take = static_cast<std::uint32_t>(std::min<std::uint64_t>(page_size - in_page, end - pos));
        Bytes pg = device.read_page(peb_id, page);
        out.insert(out.end(), pg.begin() + in_page, pg.begin() + in_page + take);
        pos += take;
    }
    return out;
}

namespace {

// Checks that every byte range referenced by the descriptors lies inside the
// committed log extent and that the backing pages are programmed.
bool areas_backed(NandDevice& dev, std::uint32_t peb, std::uint32_t start_page,
                  std::uint32_t log_pages, const std::vector<AreaDescriptor>& areas,
                  std::string* why) {
    std::uint32_t page_size = dev.geometry().page_size;
    std::uint64_t extent_bytes = static_cast<std::uint64_t>(log_pages) * page_size;
    for (const AreaDescriptor& a : areas) {
        if (a.offset + a.size > extent_bytes) {
            *why = std::string(area_type_name(a.area_type)) + " area beyond log extent";
            return false;
        }
        std::uint32_t first = static_cast<std::uint32_t>(a.offset / page_size);
        std::uint32_t last = static_cast<std::uint32_t>((a.offset + a.size - 1) / page_size);
        for (std::uint32_t p = first; p <= last; p++) {
            if (!dev.is_programmed(peb, start_page + p)) {
                *why = std::string(area_type_name(a.area_type)) + " area page unprogrammed";
                return false;
            }
        }
    }
    return true;
}

const AreaDescriptor* find_area(const std::vector<AreaDescriptor>& areas, AreaType t) {
    for (const AreaDescriptor& a : areas)
        if (a.area_type == t) return &a;
    return nullptr;
}

} // namespace

ScanResult scan_peb(NandDevice& device, std::uint32_t peb_id) {
    ScanResult result;
    const DeviceGeometry& geo = device.geometry();
    std::uint32_t page = 0;
    std::uint64_t prev_checkpoint = 0;
    bool have_prev = false;
    bool seen_segment_header = false;

    while (page < geo.pages_per_peb && device.is_programmed(peb_id, page)) {
        Bytes first = device.read_page(peb_id, page);
        ScannedLog log;
        log.start_page = page;
        try {
            SegmentHeader hdr = parse_header(first);
            log.segment_header = hdr;
            log.checkpoint_id = hdr.checkpoint_id;
            log.log_pages = hdr.log_pages;
            log.areas = hdr.areas;
            seen_segment_header = true;
            if (hdr.flags & kLogFull) {
                log.kind = LogKind::full;
            } else {
                // First partial log: its own header sits on the next page.
                log.kind = LogKind::partial;
                if (page + 1 >= geo.pages_per_peb || !device.is_programmed(peb_id, page + 1)) {
                    result.diagnostics.push_back("log @" + std::to_string(page) +
                                                 ": missing partial header after segment header");
                    break;
                }
                Bytes second = device.read_page(peb_id, page + 1);
                PartialLogHeader ph = parse_partial_header(second);
                log.partial_header = ph;
                log.checkpoint_id = ph.checkpoint_id;
                log.log_pages = ph.log_pages;
                log.areas = ph.areas;
            }
        } catch (const Error& e) {
            // Not a segment header; a continuation partial header is legal
            // only after a segment header earlier in this PEB.
            try {
                PartialLogHeader ph = parse_partial_header(first);
                if (!seen_segment_header) {
                    result.diagnostics.push_back("log @" + std::to_string(page) +
                                                 ": partial log without preceding segment header");
                    break;
                }
                log.kind = LogKind::partial;
                log.partial_header = ph;
                log.checkpoint_id = ph.checkpoint_id;
                log.log_pages = ph.log_pages;
                log.areas = ph.areas;
            } catch (const Error& e2) {
                result.diagnostics.push_back("log @" + std::to_string(page) + ": " + e2.what());
                break;
            }
        }

        if (log.log_pages == 0 || page + log.log_pages > geo.pages_per_peb) {
            result.diagnostics.push_back("log @" + std::to_string(page) + ": extent out of range");
            break;
        }
        std::string why;
        if (!areas_backed(device, peb_id, page, log.log_pages, log.areas, &why)) {
            result.diagnostics.push_back("log @" + std::to_string(page) + ": torn log: " + why);
            break;
        }
        if (const AreaDescriptor* fd = find_area(log.areas, AreaType::footer)) {
            try {
                Bytes raw = read_area(device, peb_id, page, *fd);
                log.footer = parse_footer(raw);
            } catch (const Error& e) {
                result.diagnostics.push_back("log @" + std::to_string(page) + ": bad footer: " + e.what());
                break;
            }
        }
        if (have_prev && log.checkpoint_id <= prev_checkpoint) {
            result.diagnostics.push_back("log @" + std::to_string(page) +
                                         ": checkpoint id not increasing");
        }
        prev_checkpoint = log.checkpoint_id;
        have_prev = true;
        page += log.log_pages;
        result.logs.push_back(std::move(log));
    }
    return result;
}

} // namespace ssdfs
