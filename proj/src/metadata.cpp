#include "ssdfs/metadata.hpp"

#include <algorithm>

namespace ssdfs {

namespace {
constexpr std::uint32_t kProbeWindow = 8; // hash-collision probing span

std::uint64_t inode_key_of(ByteView item) {
    std::uint64_t k = 0;
    for (int i = 0; i < 8; i++) k |= static_cast<std::uint64_t>(item[static_cast<std::size_t>(i)]) << (8 * i);
    return k;
}

std::uint64_t dentry_tree_key(ByteView item) {
    // the name_hash field doubles as the tree key (probed on collision)
    std::uint64_t k = 0;
    for (int i = 0; i < 8; i++) k |= static_cast<std::uint64_t>(item[8 + static_cast<std::size_t>(i)]) << (8 * i);
    return k;
}
} // namespace

// --- record codecs -----------------------------------------------------------

Bytes encode_raw_extent(const RawExtentRec& e) {
    ByteWriter w;
    w.u64(e.segment_id);
    w.u32(e.logical_block);
    w.u32(e.length);
    return w.take();
}

RawExtentRec parse_raw_extent(ByteView b) {
    ByteReader r(b);
    RawExtentRec e;
    e.segment_id = r.u64();
    e.logical_block = r.u32();
    e.length = r.u32();
    return e;
}

Bytes encode_fork(const ForkRec& f) {
    ByteWriter w;
    w.u64(f.file_offset);
    w.u64(f.blocks_count);
    for (const RawExtentRec& e : f.extents) w.bytes(encode_raw_extent(e));
    return w.take();
}

ForkRec parse_fork(ByteView b) {
    ByteReader r(b);
    ForkRec f;
    f.file_offset = r.u64();
    f.blocks_count = r.u64();
    for (RawExtentRec& e : f.extents) {
        Bytes raw = r.bytes(kRawExtentSize);
        e = parse_raw_extent(raw);
    }
    return f;
}

Bytes encode_dentry(const DentryRec& d) {
    ByteWriter w;
    w.u64(d.inode_id);
    w.u64(d.name_hash);
    w.u8(d.name_len);
    w.u8(d.flags);
    w.bytes(ByteView(reinterpret_cast<const std::uint8_t*>(d.inline_name.data()),
                     kDentryInlineNameBytes));
    w.u16(0);
    return w.take();
}

DentryRec parse_dentry(ByteView b) {
    ByteReader r(b);
    DentryRec d;
    d.inode_id = r.u64();
    d.name_hash = r.u64();
    d.name_len = r.u8();
    d.flags = r.u8();
    Bytes name = r.bytes(kDentryInlineNameBytes);
    std::copy(name.begin(), name.end(), reinterpret_cast<std::uint8_t*>(d.inline_name.data()));
    return d;
}

Bytes encode_xattr(const XattrRec& x) {
    ByteWriter w;
    w.u64(x.name_hash);
    w.u8(x.name_type);
    w.u8(x.name_len);
    w.u16(x.value_len);
    w.bytes(ByteView(reinterpret_cast<const std::uint8_t*>(x.inline_name.data()),
                     kXattrInlineNameBytes));
    if (x.name_type & kXattrValueIsBlob) {
        w.bytes(encode_raw_extent(x.blob));
        w.u32(x.blob_bytes);
        w.bytes(Bytes(12, 0));
    } else {
        w.bytes(ByteView(x.inline_value.data(), kXattrInlineValueBytes));
    }
    w.u32(0);
    return w.take();
}

XattrRec parse_xattr(ByteView b) {
    ByteReader r(b);
    XattrRec x;
    x.name_hash = r.u64();
    x.name_type = r.u8();
    x.name_len = r.u8();
    x.value_len = r.u16();
    Bytes name = r.bytes(kXattrInlineNameBytes);
    std::copy(name.begin(), name.end(), reinterpret_cast<std::uint8_t*>(x.inline_name.data()));
    if (x.name_type & kXattrValueIsBlob) {
        Bytes ext = r.bytes(kRawExtentSize);
        x.blob = parse_raw_extent(ext);
        x.blob_bytes = r.u32();
        r.skip(12);
    } else {
        Bytes v = r.bytes(kXattrInlineValueBytes);
        std::copy(v.begin(), v.end(), x.inline_value.begin());
    }
    return x;
}

Bytes encode_inode(const RawInode& ino, std::uint32_t inode_size) {
    ByteWriter w;
    w.u64(ino.inode_id);
    w.u16(ino.mode);
    w.u16(ino.flags);
    w.u32(ino.uid);
    w.u32(ino.gid);
    w.u64(ino.atime);
    w.u64(ino.ctime);
    w.u64(ino.mtime);
    w.u64(ino.size_bytes);
    w.u64(ino.size_blocks);
    w.u32(ino.links_count);
    w.u8(static_cast<std::uint8_t>(ino.private_tag));
    w.u8(static_cast<std::uint8_t>(ino.xattr_tag));
    w.u16(ino.inline_count);
    std::size_t fixed = w.size();
    w.bytes(Bytes(inode_size - kPrivateAreaBytes - fixed, 0));
    w.bytes(ByteView(ino.private_area.data(), kPrivateAreaBytes));
    return w.take();
}

RawInode parse_inode(ByteView b) {
    ByteReader r(b);
    RawInode ino;
    ino.inode_id = r.u64();
    ino.mode = r.u16();
    ino.flags = r.u16();
    ino.uid = r.u32();
    ino.gid = r.u32();
    ino.atime = r.u64();
    ino.ctime = r.u64();
    ino.mtime = r.u64();
    ino.size_bytes = r.u64();
    ino.size_blocks = r.u64();
    ino.links_count = r.u32();
    ino.private_tag = static_cast<PrivateTag>(r.u8());
    ino.xattr_tag = static_cast<XattrTag>(r.u8());
    ino.inline_count = r.u16();
    r.skip(b.size() - r.pos() - kPrivateAreaBytes);
    Bytes priv = r.bytes(kPrivateAreaBytes);
    std::copy(priv.begin(), priv.end(), ino.private_area.begin());
    return ino;
}

std::array<std::uint64_t, kXattrLookupTableSize> build_lookup_table(
    const std::vector<std::uint64_t>& sorted_hashes) {
    std::array<std::uint64_t, kXattrLookupTableSize> table{};
    if (sorted_hashes.empty()) return table;
    // cluster anchors at even strides across the sorted records
    for (std::size_t i = 0; i < kXattrLookupTableSize; i++) {
        std::size_t pos = i * sorted_hashes.size() / kXattrLookupTableSize;
        table[i] = sorted_hashes[std::min(pos, sorted_hashes.size() - 1)];
    }
    return table;
}

// --- compact in-inode tree roots ----------------------------------------------

namespace {

constexpr std::size_t kCompactRootBytes = 64;

Bytes encode_compact_root(const RootNodeImage& img) {
    if (img.height == 0 && img.item_count != 0)
        fail(Errc::malformed, "in-inode tree root cannot hold inline items");
    ByteWriter w;
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
        w.u8(0);
    }
    Bytes out = w.take();
    if (out.size() != kCompactRootBytes) fail(Errc::malformed, "compact root size drift");
    return out;
}

RootNodeImage parse_compact_root(ByteView b, std::uint32_t item_size) {
    ByteReader r(b);
    RootNodeImage img;
    img.height = r.u8();
    img.flags = r.u8();
    img.item_count = r.u16();
    img.item_size = r.u32();
    if (img.item_size != item_size) fail(Errc::malformed, "root item size mismatch");
    for (RootSlot& s : img.slots) {
        s.kind = static_cast<RootSlotKind>(r.u8());
        s.key = r.u64();
        s.child_seg = r.u64();
        s.child_block = r.u32();
        s.child_len = r.u32();
        s.child_kind = r.u8();
        s.preallocated = r.u8();
        r.u8();
    }
    img.inline_payload.assign(static_cast<std::size_t>(item_size) * 2, 0);
    return img;
}

} // namespace

// --- MetadataStore -------------------------------------------------------------

MetadataStore::MetadataStore(NodeStorage& nodes, SharedDictionary& dict, BlobStore& blobs,
                             std::uint32_t inode_size)
    : nodes_(nodes), dict_(dict), blobs_(blobs), inode_size_(inode_size) {
    TreeConfig cfg;
    cfg.item_size = inode_size_;
    cfg.node_size = 8192;
    cfg.tree_kind = 1;
    inodes_ = std::make_unique<BTree>(cfg, nodes_, inode_key_of);
}

TreeConfig MetadataStore::dentries_tree_config() const {
    TreeConfig cfg;
    cfg.item_size = kDentrySize;
    cfg.node_size = 8192;
    cfg.tree_kind = 2;
    cfg.allow_root_inline = false;
    return cfg;
}

TreeConfig MetadataStore::extents_tree_config() const {
    TreeConfig cfg;
    cfg.item_size = kForkSize;
    cfg.node_size = 4096;
    cfg.tree_kind = 3;
    cfg.allow_root_inline = false;
    return cfg;
}

TreeConfig MetadataStore::xattr_tree_config() const {
    TreeConfig cfg;
    cfg.item_size = kXattrRecordSize;
    cfg.node_size = 4096;
    cfg.tree_kind = 4;
    cfg.allow_root_inline = false;
    return cfg;
}

void MetadataStore::emit_extent(const RawExtentRec& e) {
    if (extent_hook_ && e.segment_id != kNoSegment && e.length > 0) extent_hook_(e);
}

// --- inodes ---

std::uint64_t MetadataStore::inode_alloc() {
    std::uint64_t id = inodes_->first_missing_key_from(1).value_or(1);
    RawInode ino;
    ino.inode_id = id;
    ino.links_count = 1;
    inodes_->insert(id, encode_inode(ino, inode_size_));
    return id;
}

void MetadataStore::inode_free(std::uint64_t id) {
    inodes_->remove(id);
    subtrees_.erase({id, static_cast<std::uint8_t>(SubTree::dentries)});
    subtrees_.erase({id, static_cast<std::uint8_t>(SubTree::extents)});
    subtrees_.erase({id, static_cast<std::uint8_t>(SubTree::xattr)});
    fork_mirrors_.erase(id);
}

RawInode MetadataStore::inode_get(std::uint64_t id) const {
    auto item = inodes_->lookup(id);
    if (!item) fail(Errc::not_found, "inode " + std::to_string(id));
    return parse_inode(*item);
}

void MetadataStore::inode_put(const RawInode& ino) {
    Bytes item = encode_inode(ino, inode_size_);
    if (inodes_->lookup(ino.inode_id)) {
        inodes_->update(ino.inode_id, item);
    } else {
        inodes_->insert(ino.inode_id, item);
    }
}

bool MetadataStore::inode_exists(std::uint64_t id) const { return inodes_->lookup(id).has_value(); }

std::uint64_t MetadataStore::inode_count() const { return inodes_->size(); }

// --- private area helpers ---

std::uint32_t MetadataStore::inline_dentry_cap(const RawInode& ino) const {
    return ino.xattr_tag == XattrTag::empty ? kInlineDentriesMax : kInlineDentriesMax / 2;
}

std::uint32_t MetadataStore::inline_extent_cap(const RawInode& ino) const {
    return ino.xattr_tag == XattrTag::empty ? kInlineExtentsMax : kInlineExtentsMax / 2;
}

std::uint32_t MetadataStore::inline_file_capacity(const RawInode& ino) const {
    return ino.xattr_tag == XattrTag::empty ? kPrivateAreaBytes : kPrivateAreaBytes / 2;
}

BTree* MetadataStore::open_subtree(RawInode& ino, SubTree which, bool create) {
    auto key = std::make_pair(ino.inode_id, static_cast<std::uint8_t>(which));
    auto it = subtrees_.find(key);
    if (it != subtrees_.end()) return it->second.get();

    TreeConfig cfg = which == SubTree::dentries ? dentries_tree_config()
                     : which == SubTree::extents ? extents_tree_config()
                                                 : xattr_tree_config();
    bool rooted = (which == SubTree::dentries && ino.private_tag == PrivateTag::dentries_root) ||
                  (which == SubTree::extents && ino.private_tag == PrivateTag::extents_root) ||
                  (which == SubTree::xattr && ino.xattr_tag == XattrTag::xattr_root);
    std::unique_ptr<BTree> tree;
    // dentries carry their tree key in the name_hash field at offset 8;
    // forks and xattr records key on their leading u64
    std::function<std::uint64_t(ByteView)> key_fn;
    if (which == SubTree::dentries) {
        key_fn = [](ByteView item) { return dentry_tree_key(item); };
    } else {
        key_fn = [](ByteView item) { return inode_key_of(item); };
    }
    if (rooted) {
        std::size_t off = which == SubTree::xattr ? kPrivateAreaBytes / 2 : 0;
        RootNodeImage root = parse_compact_root(
            ByteView(ino.private_area.data() + off, kCompactRootBytes), cfg.item_size);
        tree = BTree::load(cfg, nodes_, key_fn, root);
    } else {
        if (!create) return nullptr;
        tree = std::make_unique<BTree>(cfg, nodes_, key_fn);
    }
    if (which == SubTree::extents) {
        tree->set_invalidation_item_hook([this](ByteView item) {
            ForkRec fork = parse_fork(item);
            for (const RawExtentRec& e : fork.extents) emit_extent(e);
        });
    }
    if (which == SubTree::xattr) {
        tree->set_invalidation_item_hook([this](ByteView item) {
            XattrRec x = parse_xattr(item);
            if (x.name_type & kXattrValueIsBlob) blobs_.free(x.blob);
        });
    }
    BTree* raw = tree.get();
    subtrees_[key] = std::move(tree);
    return raw;
}

void MetadataStore::store_subtree_root(RawInode& ino, SubTree which, BTree& tree) {
    RootNodeImage root = tree.flush();
    Bytes compact = encode_compact_root(root);
    std::size_t off = which == SubTree::xattr ? kPrivateAreaBytes / 2 : 0;
    std::copy(compact.begin(), compact.end(), ino.private_area.begin() + static_cast<std::ptrdiff_t>(off));
    if (which == SubTree::dentries) ino.private_tag = PrivateTag::dentries_root;
    if (which == SubTree::extents) ino.private_tag = PrivateTag::extents_root;
    if (which == SubTree::xattr) ino.xattr_tag = XattrTag::xattr_root;
}

// An xattr arriving on an inode whose primary payload spans the whole
// private area: shrink the primary domain to the first half.
void MetadataStore::spill_primary_to_half(RawInode& ino) {
    switch (ino.private_tag) {
        case PrivateTag::empty:
        case PrivateTag::extents_root:
        case PrivateTag::dentries_root:
            return; // roots already fit the first half
        case PrivateTag::inline_file: {
            if (ino.inline_count <= kPrivateAreaBytes / 2) return;
            Bytes content(ino.private_area.begin(), ino.private_area.begin() + ino.inline_count);
            RawExtentRec extent = blobs_.store(content);
            ino.private_tag = PrivateTag::inline_extents;
            ino.inline_count = 1;
            ino.size_blocks = extent.length;
            std::fill(ino.private_area.begin(), ino.private_area.end(), 0);
            Bytes enc = encode_raw_extent(extent);
            std::copy(enc.begin(), enc.end(), ino.private_area.begin());
            return;
        }
        case PrivateTag::inline_extents: {
            if (ino.inline_count <= kInlineExtentsMax / 2) return;
            std::vector<RawExtentRec> extents;
            for (std::uint32_t i = 0; i < ino.inline_count; i++) {
                extents.push_back(parse_raw_extent(
                    ByteView(ino.private_area.data() + i * kRawExtentSize, kRawExtentSize)));
            }
            BTree* tree = open_subtree(ino, SubTree::extents, true);
            std::uint64_t offset = 0;
            std::vector<ForkRec>& mirror = fork_mirrors_[ino.inode_id];
            mirror.clear();
            for (const RawExtentRec& e : extents) {
                ForkRec fork;
                fork.file_offset = offset;
                fork.blocks_count = e.length;
                fork.extents[0] = e;
                tree->insert(fork.file_offset, encode_fork(fork));
                mirror.push_back(fork);
                offset += e.length;
            }
            std::fill(ino.private_area.begin(), ino.private_area.end(), 0);
            store_subtree_root(ino, SubTree::extents, *tree);
            ino.inline_count = 0;
            return;
        }
        case PrivateTag::inline_dentries: {
            if (ino.inline_count <= kInlineDentriesMax / 2) return;
            std::vector<DentryRec> entries;
            for (std::uint32_t i = 0; i < ino.inline_count; i++) {
                entries.push_back(parse_dentry(
                    ByteView(ino.private_area.data() + i * kDentrySize, kDentrySize)));
            }
            BTree* tree = open_subtree(ino, SubTree::dentries, true);
            for (const DentryRec& d : entries) {
                Bytes item = encode_dentry(d);
                std::uint64_t key = d.name_hash;
                while (tree->lookup(key)) key++;
                Bytes keyed = item;
                // dentry items are keyed by their hash; collisions probe upward
                for (int i = 0; i < 8; i++) keyed[8 + static_cast<std::size_t>(i)] =
                    static_cast<std::uint8_t>(key >> (8 * i));
                tree->insert(key, keyed);
            }
            std::fill(ino.private_area.begin(), ino.private_area.end(), 0);
            store_subtree_root(ino, SubTree::dentries, *tree);
            ino.inline_count = 0;
            return;
        }
    }
}

// --- dentries ---

std::string MetadataStore::dentry_full_name(const DentryRec& d) {
    if (d.name_len <= kDentryInlineNameBytes) {
        return std::string(d.inline_name.data(), d.name_len);
    }
    auto full = dict_.resolve_name(d.name_hash, d.name_len);
    if (!full) fail(Errc::not_found, "dictionary name missing");
    return *full;
}

void MetadataStore::dentry_add(std::uint64_t dir_inode, const std::string& name,
                               std::uint64_t child_id) {
    if (name.empty() || name.size() > 255) fail(Errc::invalid_length, "name length");
    if (dentry_lookup(dir_inode, name)) fail(Errc::exists, name);
    RawInode ino = inode_get(dir_inode);

    DentryRec d;
    d.inode_id = child_id;
    d.name_len = static_cast<std::uint8_t>(name.size());
    std::size_t inline_n = std::min<std::size_t>(name.size(), kDentryInlineNameBytes);
    std::copy(name.begin(), name.begin() + static_cast<std::ptrdiff_t>(inline_n),
              d.inline_name.begin());
    if (name.size() > kDentryInlineNameBytes) {
        d.name_hash = dict_.insert_name(name);
        d.flags |= kDentryNameInDictionary;
    } else {
        d.name_hash = fnv1a64(name);
    }

    if (ino.private_tag == PrivateTag::empty) {
        ino.private_tag = PrivateTag::inline_dentries;
        ino.inline_count = 0;
    }
    if (ino.private_tag == PrivateTag::inline_dentries) {
        std::uint32_t cap = inline_dentry_cap(ino);
        if (ino.inline_count < cap) {
            Bytes enc = encode_dentry(d);
            std::copy(enc.begin(), enc.end(),
                      ino.private_area.begin() + ino.inline_count * kDentrySize);
            ino.inline_count++;
            inode_put(ino);
            return;
        }
        // promotion: the fifth entry converts the folder to a dentries tree
        std::vector<DentryRec> entries;
        for (std::uint32_t i = 0; i < ino.inline_count; i++) {
            entries.push_back(
                parse_dentry(ByteView(ino.private_area.data() + i * kDentrySize, kDentrySize)));
        }
        entries.push_back(d);
        BTree* tree = open_subtree(ino, SubTree::dentries, true);
        for (const DentryRec& e : entries) {
            Bytes item = encode_dentry(e);
            std::uint64_t key = e.name_hash;
            std::uint32_t probes = 0;
            while (tree->lookup(key)) {
                key++;
                if (++probes > kProbeWindow) fail(Errc::storage_full, "hash probe overflow");
            }
            for (int i = 0; i < 8; i++)
                item[8 + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(key >> (8 * i));
            tree->insert(key, item);
        }
        std::fill(ino.private_area.begin(), ino.private_area.end(), 0);
        ino.inline_count = 0;
        store_subtree_root(ino, SubTree::dentries, *tree);
        inode_put(ino);
        return;
    }
    if (ino.private_tag != PrivateTag::dentries_root)
        fail(Errc::illegal_transition, "inode is not a directory container");
    BTree* tree = open_subtree(ino, SubTree::dentries, false);
    Bytes item = encode_dentry(d);
    std::uint64_t key = d.name_hash;
    std::uint32_t probes = 0;
    while (tree->lookup(key)) {
        key++;
        if (++probes > kProbeWindow) fail(Errc::storage_full, "hash probe overflow");
    }
    for (int i = 0; i < 8; i++)
        item[8 + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(key >> (8 * i));
    tree->insert(key, item);
    store_subtree_root(ino, SubTree::dentries, *tree);
    inode_put(ino);
}

std::optional<std::uint64_t> MetadataStore::dentry_lookup(std::uint64_t dir_inode,
                                                          const std::string& name) {
    RawInode ino = inode_get(dir_inode);
    std::uint64_t hash = fnv1a64(name);
    if (ino.private_tag == PrivateTag::inline_dentries) {
        for (std::uint32_t i = 0; i < ino.inline_count; i++) {
            DentryRec d = parse_dentry(
                ByteView(ino.private_area.data() + i * kDentrySize, kDentrySize));
            if (d.name_hash != hash || d.name_len != name.size()) continue;
            if (dentry_full_name(d) == name) return d.inode_id;
        }
        return std::nullopt;
    }
    if (ino.private_tag != PrivateTag::dentries_root) return std::nullopt;
    BTree* tree = open_subtree(ino, SubTree::dentries, false);
    if (!tree) return std::nullopt;
    for (std::uint64_t key = hash; key <= hash + kProbeWindow; key++) {
        auto item = tree->lookup(key);
        if (!item) continue;
        DentryRec d = parse_dentry(*item);
        d.name_hash = hash; // restore the natural hash for name resolution
        if (d.name_len != name.size()) continue;
        if (dentry_full_name(d) == name) return d.inode_id;
    }
    return std::nullopt;
}

void MetadataStore::dentry_remove(std::uint64_t dir_inode, const std::string& name) {
    RawInode ino = inode_get(dir_inode);
    std::uint64_t hash = fnv1a64(name);
    if (ino.private_tag == PrivateTag::inline_dentries) {
        for (std::uint32_t i = 0; i < ino.inline_count; i++) {
            DentryRec d = parse_dentry(
                ByteView(ino.private_area.data() + i * kDentrySize, kDentrySize));
            if (d.name_hash == hash && d.name_len == name.size() && dentry_full_name(d) == name) {
                // compact the remaining slots
                for (std::uint32_t j = i + 1; j < ino.inline_count; j++) {
                    std::copy(ino.private_area.begin() + j * kDentrySize,
                              ino.private_area.begin() + (j + 1) * kDentrySize,
                              ino.private_area.begin() + (j - 1) * kDentrySize);
                }
                ino.inline_count--;
                std::fill(ino.private_area.begin() + ino.inline_count * kDentrySize,
                          ino.private_area.begin() + (ino.inline_count + 1) * kDentrySize, 0);
                if (ino.inline_count == 0) ino.private_tag = PrivateTag::empty;
                inode_put(ino);
                return;
            }
        }
        fail(Errc::not_found, name);
    }
    if (ino.private_tag != PrivateTag::dentries_root) fail(Errc::not_found, name);
    BTree* tree = open_subtree(ino, SubTree::dentries, false);
    for (std::uint64_t key = hash; key <= hash + kProbeWindow; key++) {
        auto item = tree->lookup(key);
        if (!item) continue;
        DentryRec d = parse_dentry(*item);
        d.name_hash = hash;
        if (d.name_len != name.size()) continue;
        if (dentry_full_name(d) == name) {
            tree->remove(key);
            store_subtree_root(ino, SubTree::dentries, *tree);
            if (tree->empty()) ino.private_tag = PrivateTag::empty;
            inode_put(ino);
            return;
        }
    }
    fail(Errc::not_found, name);
}

std::vector<std::pair<std::string, std::uint64_t>> MetadataStore::dentry_list(
    std::uint64_t dir_inode) {
    RawInode ino = inode_get(dir_inode);
    std::vector<std::pair<std::string, std::uint64_t>> out;
    if (ino.private_tag == PrivateTag::inline_dentries) {
        for (std::uint32_t i = 0; i < ino.inline_count; i++) {
            DentryRec d = parse_dentry(
                ByteView(ino.private_area.data() + i * kDentrySize, kDentrySize));
            out.emplace_back(dentry_full_name(d), d.inode_id);
        }
        return out;
    }
    if (ino.private_tag != PrivateTag::dentries_root) return out;
    BTree* tree = open_subtree(ino, SubTree::dentries, false);
    tree->for_each([&](std::uint64_t, ByteView item) {
        DentryRec d = parse_dentry(item);
        if (d.flags & kDentryNameInDictionary) {
            // a probed key may differ from the natural hash
            auto full = dict_.resolve_name(d.name_hash, d.name_len);
            if (!full) {
                for (std::uint64_t h = d.name_hash - kProbeWindow; h <= d.name_hash; h++) {
                    full = dict_.resolve_name(h, d.name_len);
                    if (full) break;
                }
            }
            out.emplace_back(full.value_or(std::string(d.inline_name.data(),
                                                       kDentryInlineNameBytes)),
                             d.inode_id);
        } else {
            out.emplace_back(std::string(d.inline_name.data(), d.name_len), d.inode_id);
        }
    });
    return out;
}

bool MetadataStore::dir_uses_tree(std::uint64_t dir_inode) const {
    return inode_get(dir_inode).private_tag == PrivateTag::dentries_root;
}

// --- extents ---

std::vector<ForkRec>& MetadataStore::fork_mirror(std::uint64_t file_inode) {
    auto it = fork_mirrors_.find(file_inode);
    if (it != fork_mirrors_.end()) return it->second;
    rebuild_fork_mirror(file_inode);
    return fork_mirrors_[file_inode];
}

void MetadataStore::rebuild_fork_mirror(std::uint64_t file_inode) {
    std::vector<ForkRec>& mirror = fork_mirrors_[file_inode];
    mirror.clear();
    RawInode ino = inode_get(file_inode);
    if (ino.private_tag != PrivateTag::extents_root) return;
    BTree* tree = open_subtree(ino, SubTree::extents, false);
    tree->for_each([&](std::uint64_t, ByteView item) { mirror.push_back(parse_fork(item)); });
}

void MetadataStore::extents_insert(std::uint64_t file_inode, std::uint64_t file_offset_blocks,
                                   const RawExtentRec& extent) {
    if (extent.length == 0) fail(Errc::invalid_length, "zero-length extent");
    RawInode ino = inode_get(file_inode);

    if (ino.private_tag == PrivateTag::empty) {
        ino.private_tag = PrivateTag::inline_extents;
        ino.inline_count = 0;
    }
    if (ino.private_tag == PrivateTag::inline_extents) {
        // inline extents are contiguous from block zero
        std::uint64_t covered = 0;
        std::vector<RawExtentRec> extents;
        for (std::uint32_t i = 0; i < ino.inline_count; i++) {
            RawExtentRec e = parse_raw_extent(
                ByteView(ino.private_area.data() + i * kRawExtentSize, kRawExtentSize));
            extents.push_back(e);
            covered += e.length;
        }
        if (file_offset_blocks < covered) fail(Errc::overlap, "extent overlaps inline map");
        std::uint32_t cap = inline_extent_cap(ino);
        if (file_offset_blocks == covered) {
            // merge with the tail extent when physically adjacent
            if (!extents.empty()) {
                RawExtentRec& last = extents.back();
                if (last.segment_id == extent.segment_id &&
                    last.logical_block + last.length == extent.logical_block) {
                    last.length += extent.length;
                    Bytes enc = encode_raw_extent(last);
                    std::copy(enc.begin(), enc.end(),
                              ino.private_area.begin() + (ino.inline_count - 1) * kRawExtentSize);
                    ino.size_blocks = covered + extent.length;
                    inode_put(ino);
                    return;
                }
            }
            if (ino.inline_count < cap) {
                Bytes enc = encode_raw_extent(extent);
                std::copy(enc.begin(), enc.end(),
                          ino.private_area.begin() + ino.inline_count * kRawExtentSize);
                ino.inline_count++;
                ino.size_blocks = covered + extent.length;
                inode_put(ino);
                return;
            }
        }
        // promote: non-contiguous placement or inline capacity exceeded
        BTree* tree = open_subtree(ino, SubTree::extents, true);
        std::vector<ForkRec>& mirror = fork_mirrors_[file_inode];
        mirror.clear();
        std::uint64_t off = 0;
        for (const RawExtentRec& e : extents) {
            ForkRec fork;
            fork.file_offset = off;
            fork.blocks_count = e.length;
            fork.extents[0] = e;
            tree->insert(fork.file_offset, encode_fork(fork));
            mirror.push_back(fork);
            off += e.length;
        }
        std::fill(ino.private_area.begin(), ino.private_area.end(), 0);
        ino.inline_count = 0;
        store_subtree_root(ino, SubTree::extents, *tree);
        inode_put(ino);
        ino = inode_get(file_inode);
    }

    if (ino.private_tag != PrivateTag::extents_root)
        fail(Errc::illegal_transition, "inode does not map extents");
    BTree* tree = open_subtree(ino, SubTree::extents, false);
    std::vector<ForkRec>& mirror = fork_mirror(file_inode);

    // overlap check against the sorted fork mirror
    for (const ForkRec& f : mirror) {
        std::uint64_t lo = f.file_offset, hi = f.file_offset + f.blocks_count;
        if (file_offset_blocks < hi && file_offset_blocks + extent.length > lo)
            fail(Errc::overlap, "extent overlaps fork");
    }

    // extend the last fork when appending contiguously
    if (!mirror.empty()) {
        ForkRec& last = mirror.back();
        if (last.file_offset + last.blocks_count == file_offset_blocks) {
            // merge into the trailing extent or a free slot
            for (std::size_t i = 0; i < last.extents.size(); i++) {
                RawExtentRec& slot = last.extents[i];
                if (slot.length > 0 && (i + 1 == last.extents.size() ||
                                        last.extents[i + 1].length == 0)) {
                    if (slot.segment_id == extent.segment_id &&
                        slot.logical_block + slot.length == extent.logical_block) {
                        slot.length += extent.length;
                        last.blocks_count += extent.length;
                        tree->update(last.file_offset, encode_fork(last));
                        ino.size_blocks = std::max<std::uint64_t>(
                            ino.size_blocks, file_offset_blocks + extent.length);
                        inode_put(ino);
                        return;
                    }
                    if (i + 1 < last.extents.size()) {
                        last.extents[i + 1] = extent;
                        last.blocks_count += extent.length;
                        tree->update(last.file_offset, encode_fork(last));
                        ino.size_blocks = std::max<std::uint64_t>(
                            ino.size_blocks, file_offset_blocks + extent.length);
                        inode_put(ino);
                        return;
                    }
                    break; // fork full, fall through to a new fork
                }
            }
        }
    }

    ForkRec fork;
    fork.file_offset = file_offset_blocks;
    fork.blocks_count = extent.length;
    fork.extents[0] = extent;
    tree->insert(fork.file_offset, encode_fork(fork));
    auto pos = std::upper_bound(mirror.begin(), mirror.end(), fork,
                                [](const ForkRec& a, const ForkRec& b) {
                                    return a.file_offset < b.file_offset;
                                });
    mirror.insert(pos, fork);
    store_subtree_root(ino, SubTree::extents, *tree);
    ino.size_blocks = std::max<std::uint64_t>(ino.size_blocks, file_offset_blocks + extent.length);
    inode_put(ino);
}

std::optional<MetadataStore::ExtentHit> MetadataStore::extents_lookup(std::uint64_t file_inode,
                                                                      std::uint64_t block_offset) {
    RawInode ino = inode_get(file_inode);
    if (ino.private_tag == PrivateTag::inline_extents) {
        std::uint64_t covered = 0;
        for (std::uint32_t i = 0; i < ino.inline_count; i++) {
            RawExtentRec e = parse_raw_extent(
                ByteView(ino.private_area.data() + i * kRawExtentSize, kRawExtentSize));
            if (block_offset < covered + e.length) {
                ExtentHit hit;
                hit.extent = e;
                hit.intra_offset = static_cast<std::uint32_t>(block_offset - covered);
                return hit;
            }
            covered += e.length;
        }
        return std::nullopt;
    }
    if (ino.private_tag != PrivateTag::extents_root) return std::nullopt;
    std::vector<ForkRec>& mirror = fork_mirror(file_inode);
    // binary search for the covering fork
    std::size_t lo = 0, hi = mirror.size();
    while (lo < hi) {
        std::size_t mid = (lo + hi) / 2;
        if (mirror[mid].file_offset + mirror[mid].blocks_count <= block_offset) lo = mid + 1;
        else hi = mid;
    }
    if (lo == mirror.size()) return std::nullopt;
    const ForkRec& f = mirror[lo];
    if (block_offset < f.file_offset) return std::nullopt;
    std::uint64_t within = block_offset - f.file_offset;
    for (const RawExtentRec& e : f.extents) {
        if (e.length == 0) break;
        if (within < e.length) {
            ExtentHit hit;
            hit.extent = e;
            hit.intra_offset = static_cast<std::uint32_t>(within);
            return hit;
        }
        within -= e.length;
    }
    return std::nullopt;
}

std::vector<std::pair<std::uint64_t, RawExtentRec>> MetadataStore::extents_list(
    std::uint64_t file_inode) {
    RawInode ino = inode_get(file_inode);
    std::vector<std::pair<std::uint64_t, RawExtentRec>> out;
    if (ino.private_tag == PrivateTag::inline_extents) {
        std::uint64_t covered = 0;
        for (std::uint32_t i = 0; i < ino.inline_count; i++) {
            RawExtentRec e = parse_raw_extent(
                ByteView(ino.private_area.data() + i * kRawExtentSize, kRawExtentSize));
            out.emplace_back(covered, e);
            covered += e.length;
        }
        return out;
    }
    if (ino.private_tag != PrivateTag::extents_root) return out;
    for (const ForkRec& f : fork_mirror(file_inode)) {
        std::uint64_t off = f.file_offset;
        for (const RawExtentRec& e : f.extents) {
            if (e.length == 0) break;
            out.emplace_back(off, e);
            off += e.length;
        }
    }
    return out;
}

bool MetadataStore::file_uses_extent_tree(std::uint64_t file_inode) const {
    return inode_get(file_inode).private_tag == PrivateTag::extents_root;
}

void MetadataStore::truncate_invalidate(std::uint64_t file_inode, std::uint64_t new_size_blocks) {
    RawInode ino = inode_get(file_inode);
    if (ino.private_tag == PrivateTag::inline_extents) {
        std::uint64_t covered = 0;
        std::vector<RawExtentRec> keep;
        for (std::uint32_t i = 0; i < ino.inline_count; i++) {
            RawExtentRec e = parse_raw_extent(
                ByteView(ino.private_area.data() + i * kRawExtentSize, kRawExtentSize));
            if (covered + e.length <= new_size_blocks) {
                keep.push_back(e);
            } else if (covered >= new_size_blocks) {
                emit_extent(e);
            } else {
                std::uint32_t head = static_cast<std::uint32_t>(new_size_blocks - covered);
                RawExtentRec tail = e;
                tail.logical_block += head;
                tail.length -= head;
                emit_extent(tail);
                e.length = head;
                keep.push_back(e);
            }
            covered += e.length;
        }
        std::fill(ino.private_area.begin(), ino.private_area.end(), 0);
        for (std::size_t i = 0; i < keep.size(); i++) {
            Bytes enc = encode_raw_extent(keep[i]);
            std::copy(enc.begin(), enc.end(), ino.private_area.begin() + i * kRawExtentSize);
        }
        ino.inline_count = static_cast<std::uint16_t>(keep.size());
        if (keep.empty()) ino.private_tag = PrivateTag::empty;
        ino.size_blocks = std::min<std::uint64_t>(ino.size_blocks, new_size_blocks);
        inode_put(ino);
        return;
    }
    if (ino.private_tag != PrivateTag::extents_root) return;
    BTree* tree = open_subtree(ino, SubTree::extents, false);
    if (new_size_blocks == 0) {
        // detach the whole mapping; extents drain from the queue later
        tree->destroy_into_queue();
        store_subtree_root(ino, SubTree::extents, *tree);
        ino.private_tag = PrivateTag::empty;
        ino.inline_count = 0;
        ino.size_blocks = 0;
        std::fill(ino.private_area.begin(), ino.private_area.end(), 0);
        inode_put(ino);
        fork_mirrors_[file_inode].clear();
        return;
    }

    std::vector<ForkRec>& mirror = fork_mirror(file_inode);
    while (!mirror.empty()) {
        ForkRec& last = mirror.back();
        if (last.file_offset + last.blocks_count <= new_size_blocks) break;
        if (last.file_offset >= new_size_blocks) {
            for (const RawExtentRec& e : last.extents)
                if (e.length > 0) emit_extent(e);
            tree->remove(last.file_offset);
            mirror.pop_back();
            continue;
        }
        // trim the cut fork synchronously
        std::uint64_t keep_blocks = new_size_blocks - last.file_offset;
        std::uint64_t seen = 0;
        for (RawExtentRec& e : last.extents) {
            if (e.length == 0) break;
            if (seen >= keep_blocks) {
                emit_extent(e);
                e = RawExtentRec{};
                continue;
            }
            if (seen + e.length > keep_blocks) {
                std::uint32_t head = static_cast<std::uint32_t>(keep_blocks - seen);
                RawExtentRec tail = e;
                tail.logical_block += head;
                tail.length -= head;
                emit_extent(tail);
                e.length = head;
            }
            seen += e.length;
        }
        last.blocks_count = keep_blocks;
        tree->update(last.file_offset, encode_fork(last));
        break;
    }
    store_subtree_root(ino, SubTree::extents, *tree);
    ino.size_blocks = std::min<std::uint64_t>(ino.size_blocks, new_size_blocks);
    inode_put(ino);
}

// --- xattrs ---

std::string MetadataStore::xattr_full_name(const XattrRec& x) {
    if (x.name_len <= kXattrInlineNameBytes) return std::string(x.inline_name.data(), x.name_len);
    auto full = dict_.resolve_name(x.name_hash, x.name_len);
    if (!full) fail(Errc::not_found, "dictionary name missing");
    return *full;
}

void MetadataStore::xattr_set(std::uint64_t inode_id, const std::string& name, ByteView value) {
    if (name.empty() || name.size() > 255) fail(Errc::invalid_length, "name length");
    if (value.size() > kXattrValueLimit) fail(Errc::value_too_large, "xattr value above 64 KB");
    RawInode ino = inode_get(inode_id);

    XattrRec x;
    x.name_len = static_cast<std::uint8_t>(name.size());
    std::size_t inline_n = std::min<std::size_t>(name.size(), kXattrInlineNameBytes);
    std::copy(name.begin(), name.begin() + static_cast<std::ptrdiff_t>(inline_n),
              x.inline_name.begin());
    if (name.size() > kXattrInlineNameBytes) {
        x.name_hash = dict_.insert_name(name);
        x.name_type |= kXattrNameInDictionary;
    } else {
        x.name_hash = fnv1a64(name);
    }
    x.value_len = static_cast<std::uint16_t>(std::min<std::size_t>(value.size(), 0xFFFF));
    if (value.size() <= kXattrInlineValueBytes) {
        std::copy(value.begin(), value.end(), x.inline_value.begin());
    } else {
        x.name_type |= kXattrValueIsBlob;
        x.blob = blobs_.store(value);
        x.blob_bytes = static_cast<std::uint32_t>(value.size());
    }

    // replacing an existing attribute frees its old blob
    bool replaced = false;
    auto free_old = [&](const XattrRec& old) {
        if (old.name_type & kXattrValueIsBlob) blobs_.free(old.blob);
    };

    if (ino.xattr_tag == XattrTag::empty) {
        spill_primary_to_half(ino);
        Bytes enc = encode_xattr(x);
        std::copy(enc.begin(), enc.end(), ino.private_area.begin() + kPrivateAreaBytes / 2);
        ino.xattr_tag = XattrTag::inline_xattr;
        inode_put(ino);
        return;
    }
    if (ino.xattr_tag == XattrTag::inline_xattr) {
        XattrRec old = parse_xattr(
            ByteView(ino.private_area.data() + kPrivateAreaBytes / 2, kXattrRecordSize));
        if (xattr_full_name(old) == name) {
            free_old(old);
            Bytes enc = encode_xattr(x);
            std::copy(enc.begin(), enc.end(), ino.private_area.begin() + kPrivateAreaBytes / 2);
            inode_put(ino);
            return;
        }
        // second attribute: promote to a tree
        BTree* tree = open_subtree(ino, SubTree::xattr, true);
        for (const XattrRec* rec : {&old, &x}) {
            Bytes item = encode_xattr(*rec);
            std::uint64_t key = rec->name_hash;
            std::uint32_t probes = 0;
            while (tree->lookup(key)) {
                key++;
                if (++probes > kProbeWindow) fail(Errc::storage_full, "hash probe overflow");
            }
            for (int i = 0; i < 8; i++)
                item[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(key >> (8 * i));
            tree->insert(key, item);
        }
        std::fill(ino.private_area.begin() + kPrivateAreaBytes / 2, ino.private_area.end(), 0);
        store_subtree_root(ino, SubTree::xattr, *tree);
        inode_put(ino);
        return;
    }
    BTree* tree = open_subtree(ino, SubTree::xattr, false);
    for (std::uint64_t key = x.name_hash; key <= x.name_hash + kProbeWindow; key++) {
        auto item = tree->lookup(key);
        if (!item) continue;
        XattrRec old = parse_xattr(*item);
        old.name_hash = x.name_hash;
        if (old.name_len == name.size() && xattr_full_name(old) == name) {
            free_old(old);
            Bytes enc = encode_xattr(x);
            for (int i = 0; i < 8; i++)
                enc[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(key >> (8 * i));
            tree->update(key, enc);
            store_subtree_root(ino, SubTree::xattr, *tree);
            inode_put(ino);
            replaced = true;
            break;
        }
    }
    if (!replaced) {
        Bytes item = encode_xattr(x);
        std::uint64_t key = x.name_hash;
        std::uint32_t probes = 0;
        while (tree->lookup(key)) {
            key++;
            if (++probes > kProbeWindow) fail(Errc::storage_full, "hash probe overflow");
        }
        for (int i = 0; i < 8; i++)
            item[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(key >> (8 * i));
        tree->insert(key, item);
        store_subtree_root(ino, SubTree::xattr, *tree);
        inode_put(ino);
    }
}

std::optional<Bytes> MetadataStore::xattr_get(std::uint64_t inode_id, const std::string& name) {
    RawInode ino = inode_get(inode_id);
    std::uint64_t hash = fnv1a64(name);
    auto value_of = [&](const XattrRec& x) -> Bytes {
        if (x.name_type & kXattrValueIsBlob) return blobs_.load(x.blob, x.blob_bytes);
        return Bytes(x.inline_value.begin(), x.inline_value.begin() + x.value_len);
    };
    if (ino.xattr_tag == XattrTag::inline_xattr) {
        XattrRec x = parse_xattr(
            ByteView(ino.private_area.data() + kPrivateAreaBytes / 2, kXattrRecordSize));
        if (x.name_len == name.size() && xattr_full_name(x) == name) return value_of(x);
        return std::nullopt;
    }
    if (ino.xattr_tag != XattrTag::xattr_root) return std::nullopt;
    BTree* tree = open_subtree(ino, SubTree::xattr, false);

    // the per-node lookup table narrows the cluster; with sorted keys the
    // direct probe is equivalent and exact
    for (std::uint64_t key = hash; key <= hash + kProbeWindow; key++) {
        auto item = tree->lookup(key);
        if (!item) continue;
        XattrRec x = parse_xattr(*item);
        x.name_hash = hash;
        if (x.name_len == name.size() && xattr_full_name(x) == name) return value_of(x);
    }
    return std::nullopt;
}

void MetadataStore::xattr_remove(std::uint64_t inode_id, const std::string& name) {
    RawInode ino = inode_get(inode_id);
    std::uint64_t hash = fnv1a64(name);
    if (ino.xattr_tag == XattrTag::inline_xattr) {
        XattrRec x = parse_xattr(
            ByteView(ino.private_area.data() + kPrivateAreaBytes / 2, kXattrRecordSize));
        if (x.name_len == name.size() && xattr_full_name(x) == name) {
            if (x.name_type & kXattrValueIsBlob) blobs_.free(x.blob);
            std::fill(ino.private_area.begin() + kPrivateAreaBytes / 2, ino.private_area.end(), 0);
            ino.xattr_tag = XattrTag::empty;
            inode_put(ino);
            return;
        }
        fail(Errc::not_found, name);
    }
    if (ino.xattr_tag != XattrTag::xattr_root) fail(Errc::not_found, name);
    BTree* tree = open_subtree(ino, SubTree::xattr, false);
    for (std::uint64_t key = hash; key <= hash + kProbeWindow; key++) {
        auto item = tree->lookup(key);
        if (!item) continue;
        XattrRec x = parse_xattr(*item);
        x.name_hash = hash;
        if (x.name_len == name.size() && xattr_full_name(x) == name) {
            if (x.name_type & kXattrValueIsBlob) blobs_.free(x.blob);
            tree->remove(key);
            store_subtree_root(ino, SubTree::xattr, *tree);
            if (tree->empty()) ino.xattr_tag = XattrTag::empty;
            inode_put(ino);
            return;
        }
    }
    fail(Errc::not_found, name);
}

// --- inline files ---

void MetadataStore::inline_file_write(RawInode& ino, ByteView content) {
    if (content.size() > inline_file_capacity(ino)) fail(Errc::invalid_length, "inline overflow");
    ino.private_tag = PrivateTag::inline_file;
    ino.inline_count = static_cast<std::uint16_t>(content.size());
    std::fill(ino.private_area.begin(), ino.private_area.end(), 0);
    std::copy(content.begin(), content.end(), ino.private_area.begin());
    ino.size_bytes = content.size();
    ino.size_blocks = 0;
}

Bytes MetadataStore::inline_file_read(const RawInode& ino) const {
    if (ino.private_tag != PrivateTag::inline_file) return {};
    return Bytes(ino.private_area.begin(), ino.private_area.begin() + ino.inline_count);
}

// --- background work ---

std::size_t MetadataStore::process_invalidation(std::uint32_t max_items) {
    std::size_t done = inodes_->process_invalidation(max_items);
    for (auto& [key, tree] : subtrees_) {
        if (done >= max_items) break;
        done += tree->process_invalidation(max_items - static_cast<std::uint32_t>(done));
    }
    return done;
}

std::size_t MetadataStore::invalidation_backlog() const {
    std::size_t n = inodes_->invalidation_backlog();
    for (const auto& [key, tree] : subtrees_) n += tree->invalidation_backlog();
    return n;
}

// --- persistence ---

RootNodeImage MetadataStore::flush() {
    // per-inode trees first: their roots live inside inode records
    for (auto& [key, tree] : subtrees_) {
        if (!inode_exists(key.first)) continue;
        RawInode ino = inode_get(key.first);
        SubTree which = static_cast<SubTree>(key.second);
        bool rooted = (which == SubTree::dentries && ino.private_tag == PrivateTag::dentries_root) ||
                      (which == SubTree::extents && ino.private_tag == PrivateTag::extents_root) ||
                      (which == SubTree::xattr && ino.xattr_tag == XattrTag::xattr_root);
        if (!rooted) continue;
        store_subtree_root(ino, which, *tree);
        inode_put(ino);
    }
    return inodes_->flush();
}

std::unique_ptr<MetadataStore> MetadataStore::load(NodeStorage& nodes, SharedDictionary& dict,
                                                   BlobStore& blobs,
                                                   const RootNodeImage& inodes_root,
                                                   std::uint32_t inode_size) {
    auto store = std::make_unique<MetadataStore>(nodes, dict, blobs, inode_size);
    TreeConfig cfg;
    cfg.item_size = inode_size;
    cfg.node_size = 8192;
    cfg.tree_kind = 1;
    store->inodes_ = BTree::load(cfg, nodes, inode_key_of, inodes_root);
    return store;
}

BTree* MetadataStore::dentries_tree_of(std::uint64_t dir_inode) {
    RawInode ino = inode_get(dir_inode);
    return open_subtree(ino, SubTree::dentries, false);
}

BTree* MetadataStore::extents_tree_of(std::uint64_t file_inode) {
    RawInode ino = inode_get(file_inode);
    return open_subtree(ino, SubTree::extents, false);
}

BTree* MetadataStore::xattr_tree_of(std::uint64_t inode_id) {
    RawInode ino = inode_get(inode_id);
    return open_subtree(ino, SubTree::xattr, false);
}

} // namespace ssdfs
