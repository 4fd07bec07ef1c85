#include "ssdfs/dedup.hpp"

#include <openssl/evp.h>

namespace ssdfs {

namespace {

constexpr std::uint32_t kDedupItemSize = 64;
constexpr std::uint32_t kReverseItemSize = 56;
constexpr std::uint32_t kProbeWindow = 4;

std::uint64_t leading_key(ByteView item) {
    std::uint64_t k = 0;
    for (int i = 0; i < 8; i++) k |= static_cast<std::uint64_t>(item[static_cast<std::size_t>(i)]) << (8 * i);
    return k;
}

Bytes encode_dedup_item(std::uint64_t key, const DedupExtentRecord& rec) {
    ByteWriter w;
    w.u64(key);
    w.bytes(ByteView(rec.fingerprint.digest.data(), rec.fingerprint.digest.size()));
    w.u8(rec.fingerprint.algo_id);
    w.u8(0);
    w.u16(0);
    w.bytes(encode_raw_extent(rec.extent));
    w.u32(rec.refcount);
    Bytes out = w.take();
    if (out.size() != kDedupItemSize) fail(Errc::malformed, "dedup record size drift");
    return out;
}

DedupExtentRecord parse_dedup_item(ByteView b) {
    ByteReader r(b);
    r.u64();
    DedupExtentRecord rec;
    Bytes digest = r.bytes(32);
    std::copy(digest.begin(), digest.end(), rec.fingerprint.digest.begin());
    rec.fingerprint.algo_id = r.u8();
    r.u8();
    r.u16();
    Bytes ext = r.bytes(kRawExtentSize);
    rec.extent = parse_raw_extent(ext);
    rec.refcount = r.u32();
    return rec;
}

Bytes encode_reverse_item(std::uint64_t key, const FingerprintRecord& rec) {
    ByteWriter w;
    w.u64(key);
    w.u64(rec.segment_id);
    w.u32(rec.logical_block);
    w.u8(rec.fingerprint.algo_id);
    w.u8(0);
    w.u16(0);
    w.bytes(ByteView(rec.fingerprint.digest.data(), rec.fingerprint.digest.size()));
    Bytes out = w.take();
    if (out.size() != kReverseItemSize) fail(Errc::malformed, "reverse record size drift");
    return out;
}

FingerprintRecord parse_reverse_item(ByteView b) {
    ByteReader r(b);
    r.u64();
    FingerprintRecord rec;
    rec.segment_id = r.u64();
    rec.logical_block = r.u32();
    rec.fingerprint.algo_id = r.u8();
    r.u8();
    r.u16();
    Bytes digest = r.bytes(32);
    std::copy(digest.begin(), digest.end(), rec.fingerprint.digest.begin());
    return rec;
}

} // namespace

Fingerprint fingerprint_chunk(ByteView chunk) {
    Fingerprint fp;
    unsigned int len = 0;
    EVP_Digest(chunk.data(), chunk.size(), fp.digest.data(), &len, EVP_sha256(), nullptr);
    return fp;
}

SharedExtents::SharedExtents(NodeStorage& nodes, std::uint32_t chunk_bytes)
    : nodes_(nodes), chunk_bytes_(chunk_bytes) {
    TreeConfig fwd;
    fwd.item_size = kDedupItemSize;
    fwd.node_size = 4096;
    fwd.tree_kind = 5;
    by_fingerprint_ = std::make_unique<BTree>(fwd, nodes_, leading_key);
    TreeConfig rev;
    rev.item_size = kReverseItemSize;
    rev.node_size = 4096;
    rev.tree_kind = 6;
    by_extent_ = std::make_unique<BTree>(rev, nodes_, leading_key);
}

void SharedExtents::register_extent(const Fingerprint& fp, const RawExtentRec& extent) {
    DedupExtentRecord rec;
    rec.fingerprint = fp;
    rec.extent = extent;
    rec.refcount = 1;
    std::uint64_t key = fp.prefix64();
    std::uint32_t probes = 0;
    while (by_fingerprint_->lookup(key)) {
        key++;
        if (++probes > kProbeWindow) fail(Errc::storage_full, "fingerprint probe overflow");
    }
    by_fingerprint_->insert(key, encode_dedup_item(key, rec));

    FingerprintRecord rrec;
    rrec.segment_id = extent.segment_id;
    rrec.logical_block = extent.logical_block;
    rrec.fingerprint = fp;
    std::uint64_t rkey = reverse_key(extent.segment_id, extent.logical_block);
    by_extent_->insert(rkey, encode_reverse_item(rkey, rrec));
}

std::optional<DedupExtentRecord> SharedExtents::find_by_fingerprint(const Fingerprint& fp) const {
    std::uint64_t key = fp.prefix64();
    for (std::uint32_t probe = 0; probe <= kProbeWindow; probe++) {
        auto item = by_fingerprint_->lookup(key + probe);
        if (!item) continue;
        DedupExtentRecord rec = parse_dedup_item(*item);
        if (rec.fingerprint == fp) return rec;
    }
    return std::nullopt;
}

std::optional<FingerprintRecord> SharedExtents::find_by_extent(std::uint64_t segment_id,
                                                               std::uint32_t logical_block) const {
    auto item = by_extent_->lookup(reverse_key(segment_id, logical_block));
    if (!item) return std::nullopt;
    return parse_reverse_item(*item);
}

std::vector<StorePlacement> SharedExtents::on_store(ByteView file_bytes, const ChunkSink& sink) {
    std::vector<StorePlacement> placements;
    if (file_bytes.empty()) return placements;

    // below the threshold the content is not a deduplication target
    if (file_bytes.size() < chunk_bytes_) {
        StorePlacement p;
        p.extent = sink(file_bytes);
        placements.push_back(p);
        return placements;
    }

    std::vector<ByteView> chunks;
    for (std::size_t off = 0; off < file_bytes.size(); off += chunk_bytes_) {
        chunks.push_back(file_bytes.subspan(off, std::min<std::size_t>(chunk_bytes_,
                                                                       file_bytes.size() - off)));
    }

    Fingerprint fp0 = fingerprint_chunk(chunks[0]);
    fingerprints_computed_++;
    auto hit0 = find_by_fingerprint(fp0);
    if (!hit0) {
        // first sighting: register the first chunk's fingerprint only and
        // store everything plainly
        StorePlacement p0;
        p0.extent = sink(chunks[0]);
        register_extent(fp0, p0.extent);
        placements.push_back(p0);
        for (std::size_t i = 1; i < chunks.size(); i++) {
            StorePlacement p;
            p.extent = sink(chunks[i]);
            placements.push_back(p);
        }
        return placements;
    }

    // the first chunk is known: bump its count and chase the rest
    {
        std::uint64_t key = fp0.prefix64();
        for (std::uint32_t probe = 0; probe <= kProbeWindow; probe++) {
            auto item = by_fingerprint_->lookup(key + probe);
            if (!item) continue;
            DedupExtentRecord rec = parse_dedup_item(*item);
            if (!(rec.fingerprint == fp0)) continue;
            rec.refcount++;
            by_fingerprint_->update(key + probe, encode_dedup_item(key + probe, rec));
            break;
        }
        StorePlacement p;
        p.extent = hit0->extent;
        p.deduped = true;
        chunks_deduped_++;
        placements.push_back(p);
    }
    for (std::size_t i = 1; i < chunks.size(); i++) {
        if (chunks[i].size() < chunk_bytes_) {
            // short tails are never deduplicated
            StorePlacement p;
            p.extent = sink(chunks[i]);
            placements.push_back(p);
            continue;
        }
        Fingerprint fp = fingerprint_chunk(chunks[i]);
        fingerprints_computed_++;
        auto hit = find_by_fingerprint(fp);
        if (hit) {
            std::uint64_t key = fp.prefix64();
            for (std::uint32_t probe = 0; probe <= kProbeWindow; probe++) {
                auto item = by_fingerprint_->lookup(key + probe);
                if (!item) continue;
                DedupExtentRecord rec = parse_dedup_item(*item);
                if (!(rec.fingerprint == fp)) continue;
                rec.refcount++;
                by_fingerprint_->update(key + probe, encode_dedup_item(key + probe, rec));
                break;
            }
            StorePlacement p;
            p.extent = hit->extent;
            p.deduped = true;
            chunks_deduped_++;
            placements.push_back(p);
        } else {
            StorePlacement p;
            p.extent = sink(chunks[i]);
            register_extent(fp, p.extent);
            placements.push_back(p);
        }
    }
    return placements;
}

void SharedExtents::remove_records(const Fingerprint& fp, const RawExtentRec& extent) {
    std::uint64_t key = fp.prefix64();
    for (std::uint32_t probe = 0; probe <= kProbeWindow; probe++) {
        auto item = by_fingerprint_->lookup(key + probe);
        if (!item) continue;
        DedupExtentRecord rec = parse_dedup_item(*item);
        if (rec.fingerprint == fp) {
            by_fingerprint_->remove(key + probe);
            break;
        }
    }
    by_extent_->remove(reverse_key(extent.segment_id, extent.logical_block));
}

void SharedExtents::enqueue_physical(const RawExtentRec& extent) {
    DedupInvalidationRecord rec;
    rec.extent = extent;
    rec.enqueued_at = queue_clock_++;
    queue_.push_back(rec);
}

DeleteAction SharedExtents::on_delete_extent(const RawExtentRec& extent) {
    auto reverse = find_by_extent(extent.segment_id, extent.logical_block);
    if (!reverse) {
        enqueue_physical(extent);
        return DeleteAction::physically_invalidated;
    }
    std::uint64_t key = reverse->fingerprint.prefix64();
    for (std::uint32_t probe = 0; probe <= kProbeWindow; probe++) {
        auto item = by_fingerprint_->lookup(key + probe);
        if (!item) continue;
        DedupExtentRecord rec = parse_dedup_item(*item);
        if (!(rec.fingerprint == reverse->fingerprint)) continue;
        if (rec.refcount > 1) {
            rec.refcount--;
            by_fingerprint_->update(key + probe, encode_dedup_item(key + probe, rec));
            return DeleteAction::refcount_decremented;
        }
        remove_records(rec.fingerprint, rec.extent);
        enqueue_physical(rec.extent);
        return DeleteAction::physically_invalidated;
    }
    // dangling reverse record; treat as never-deduplicated
    by_extent_->remove(reverse_key(extent.segment_id, extent.logical_block));
    enqueue_physical(extent);
    return DeleteAction::physically_invalidated;
}

std::size_t SharedExtents::process_invalidations(std::uint32_t max_n) {
    std::size_t done = 0;
    while (!queue_.empty() && done < max_n) {
        DedupInvalidationRecord rec = queue_.front();
        queue_.pop_front();
        done++;
        // a racing store may have revived the extent's record
        auto reverse = find_by_extent(rec.extent.segment_id, rec.extent.logical_block);
        if (reverse) {
            std::uint64_t key = reverse->fingerprint.prefix64();
            bool handled = false;
            for (std::uint32_t probe = 0; probe <= kProbeWindow && !handled; probe++) {
                auto item = by_fingerprint_->lookup(key + probe);
                if (!item) continue;
                DedupExtentRecord drec = parse_dedup_item(*item);
                if (!(drec.fingerprint == reverse->fingerprint)) continue;
                if (drec.refcount > 1) {
                    drec.refcount--;
                    by_fingerprint_->update(key + probe, encode_dedup_item(key + probe, drec));
                } else {
                    remove_records(drec.fingerprint, drec.extent);
                    if (invalidate_hook_) invalidate_hook_(rec.extent);
                }
                handled = true;
            }
            if (handled) continue;
        }
        if (invalidate_hook_) invalidate_hook_(rec.extent);
    }
    return done;
}

std::uint64_t SharedExtents::record_count() const { return by_fingerprint_->size(); }

bool SharedExtents::bijection_holds() const {
    if (by_fingerprint_->size() != by_extent_->size()) return false;
    bool ok = true;
    by_fingerprint_->for_each([&](std::uint64_t, ByteView item) {
        DedupExtentRecord rec = parse_dedup_item(item);
        auto reverse = find_by_extent(rec.extent.segment_id, rec.extent.logical_block);
        if (!reverse || !(reverse->fingerprint == rec.fingerprint)) ok = false;
    });
    by_extent_->for_each([&](std::uint64_t, ByteView item) {
        FingerprintRecord rec = parse_reverse_item(item);
        auto fwd = find_by_fingerprint(rec.fingerprint);
        if (!fwd || fwd->extent.segment_id != rec.segment_id ||
            fwd->extent.logical_block != rec.logical_block)
            ok = false;
    });
    return ok;
}

Bytes SharedExtents::flush() {
    RootNodeImage fwd = by_fingerprint_->flush();
    RootNodeImage rev = by_extent_->flush();
    ByteWriter w;
    auto write_root = [&](const RootNodeImage& img) {
        w.u8(img.height);
        w.u8(img.flags);
        w.u16(img.item_count);
        w.u32(img.item_size);
        for (const RootSlot& s : img.slots) {
            w.u8(static_cast<std::uint8_t>(s.kind));
            w.u64(s.key);
            w.u64(s.child_seg);
            w.u32(s.child_block);
            w.u32(s.child_len);
            w.u8(s.child_kind);
            w.u8(s.preallocated);
        }
        w.u32(static_cast<std::uint32_t>(img.inline_payload.size()));
        w.bytes(img.inline_payload);
    };
    write_root(fwd);
    write_root(rev);
    w.u32(static_cast<std::uint32_t>(queue_.size()));
    for (const DedupInvalidationRecord& rec : queue_) {
        w.bytes(encode_raw_extent(rec.extent));
        w.u64(rec.enqueued_at);
    }
    w.u64(queue_clock_);
    return w.take();
}

std::unique_ptr<SharedExtents> SharedExtents::load(NodeStorage& nodes, ByteView blob,
                                                   std::uint32_t chunk_bytes) {
    auto out = std::make_unique<SharedExtents>(nodes, chunk_bytes);
    ByteReader r(blob);
    auto read_root = [&]() {
        RootNodeImage img;
        img.height = r.u8();
        img.flags = r.u8();
        img.item_count = r.u16();
        img.item_size = r.u32();
        for (RootSlot& s : img.slots) {
            s.kind = static_cast<RootSlotKind>(r.u8());
            s.key = r.u64();
            s.child_seg = r.u64();
            s.child_block = r.u32();
            s.child_len = r.u32();
            s.child_kind = r.u8();
            s.preallocated = r.u8();
        }
        std::uint32_t n = r.u32();
        img.inline_payload = r.bytes(n);
        return img;
    };
    RootNodeImage fwd = read_root();
    RootNodeImage rev = read_root();
    TreeConfig fcfg;
    fcfg.item_size = kDedupItemSize;
    fcfg.node_size = 4096;
    fcfg.tree_kind = 5;
    out->by_fingerprint_ = BTree::load(fcfg, nodes, leading_key, fwd);
    TreeConfig rcfg;
    rcfg.item_size = kReverseItemSize;
    rcfg.node_size = 4096;
    rcfg.tree_kind = 6;
    out->by_extent_ = BTree::load(rcfg, nodes, leading_key, rev);
    std::uint32_t qn = r.u32();
    for (std::uint32_t i = 0; i < qn; i++) {
        DedupInvalidationRecord rec;
        Bytes ext = r.bytes(kRawExtentSize);
        rec.extent = parse_raw_extent(ext);
        rec.enqueued_at = r.u64();
        out->queue_.push_back(rec);
    }
    out->queue_clock_ = r.u64();
    return out;
}

} // namespace ssdfs
