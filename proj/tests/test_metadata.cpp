#include <doctest.h>

#include <map>
#include <random>
#include <set>

#include "ssdfs/metadata.hpp"

using namespace ssdfs;

namespace {

class MemStore : public NodeStorage {
public:
    LogicalExtent allocate(NodeKind, std::uint32_t bytes) override {
        LogicalExtent e;
        e.seg = 3;
        e.block = next_++;
        e.len = (bytes + 4095) / 4096;
        return e;
    }
    void write(const LogicalExtent& e, ByteView image, bool) override {
        blobs_[e.block] = Bytes(image.begin(), image.end());
    }
    Bytes read(const LogicalExtent& e) override { return blobs_.at(e.block); }
    void invalidate(const LogicalExtent& e) override { invalidated_.push_back(e); }
    void release(const LogicalExtent&) override {}
    std::uint32_t next_ = 0;
    std::map<std::uint32_t, Bytes> blobs_;
    std::vector<LogicalExtent> invalidated_;
};

class MemBlobs : public BlobStore {
public:
    RawExtentRec store(ByteView bytes) override {
        RawExtentRec e;
        e.segment_id = 77;
        e.logical_block = next_;
        e.length = static_cast<std::uint32_t>((bytes.size() + 4095) / 4096);
        if (e.length == 0) e.length = 1;
        next_ += e.length;
        data_[e.logical_block] = Bytes(bytes.begin(), bytes.end());
        return e;
    }
    Bytes load(const RawExtentRec& e, std::uint32_t bytes) override {
        Bytes out = data_.at(e.logical_block);
        out.resize(bytes);
        return out;
    }
    void free(const RawExtentRec& e) override {
        freed_++;
        data_.erase(e.logical_block);
    }
    std::uint32_t next_ = 0;
    int freed_ = 0;
    std::map<std::uint32_t, Bytes> data_;
};

struct Fixture {
    MemStore store;
    SharedDictionary dict;
    MemBlobs blobs;
    MetadataStore md;
    std::vector<RawExtentRec> detached;

    Fixture() : md(store, dict, blobs) {
        md.set_extent_invalidation_hook(
            [this](const RawExtentRec& e) { detached.push_back(e); });
    }
};

} // namespace

TEST_CASE("record encodings have exactly their stated sizes") {
    CHECK(encode_raw_extent(RawExtentRec{}).size() == 16);
    CHECK(encode_fork(ForkRec{}).size() == 64);
    CHECK(encode_dentry(DentryRec{}).size() == 32);
    CHECK(encode_xattr(XattrRec{}).size() == 64);
    RawInode ino;
    CHECK(encode_inode(ino, 256).size() == 256);

    // round trips
    RawExtentRec e{42, 7, 3};
    CHECK(parse_raw_extent(encode_raw_extent(e)) == e);
    ForkRec f;
    f.file_offset = 100;
    f.blocks_count = 5;
    f.extents[0] = e;
    f.extents[1] = RawExtentRec{43, 0, 2};
    CHECK(parse_fork(encode_fork(f)) == f);
    DentryRec d;
    d.inode_id = 12;
    d.name_hash = 0xABCD;
    d.name_len = 5;
    std::copy_n("hello", 5, d.inline_name.begin());
    CHECK(parse_dentry(encode_dentry(d)) == d);
    XattrRec x;
    x.name_hash = 99;
    x.name_len = 4;
    x.value_len = 3;
    std::copy_n("user", 4, x.inline_name.begin());
    x.inline_value[0] = 1;
    CHECK(parse_xattr(encode_xattr(x)) == x);

    RawInode ino2;
    ino2.inode_id = 5;
    ino2.mode = 0x8000 | 0644;
    ino2.size_bytes = 1234;
    ino2.private_tag = PrivateTag::inline_file;
    ino2.inline_count = 10;
    for (int i = 0; i < 10; i++) ino2.private_area[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(i);
    RawInode back = parse_inode(encode_inode(ino2, 256));
    CHECK(back.inode_id == 5);
    CHECK(back.size_bytes == 1234);
    CHECK(back.private_tag == PrivateTag::inline_file);
    CHECK(back.inline_count == 10);
    CHECK(back.private_area == ino2.private_area);
}

TEST_CASE("capacity constants match the record arithmetic") {
    Fixture fx;
    // 8 KB node with 256 B inodes -> 32 slots
    CHECK(fx.md.inodes_tree().leaf_item_capacity() == 32);
    CHECK(kInlineDentriesMax == 4);
    CHECK(kInlineExtentsMax == 8);
    CHECK(kXattrLookupTableSize == 22);
}

TEST_CASE("inode allocation reuses freed ids, lowest first") {
    Fixture fx;
    std::uint64_t a = fx.md.inode_alloc();
    std::uint64_t b = fx.md.inode_alloc();
    std::uint64_t c = fx.md.inode_alloc();
    CHECK(a == 1);
    CHECK(b == 2);
    CHECK(c == 3);
    fx.md.inode_free(b);
    CHECK(fx.md.inode_alloc() == b);
    // bitmap-scan oracle over a random churn
    std::mt19937_64 rng(5);
    std::set<std::uint64_t> live = {a, b, c};
    for (int i = 0; i < 300; i++) {
        if (rng() % 2 == 0 || live.empty()) {
            std::uint64_t expect = 1;
            while (live.count(expect)) expect++;
            std::uint64_t got = fx.md.inode_alloc();
            CHECK(got == expect);
            live.insert(got);
        } else {
            auto it = live.begin();
            std::advance(it, static_cast<long>(rng() % live.size()));
            fx.md.inode_free(*it);
            live.erase(it);
        }
    }
}

TEST_CASE("alloc on empty tree uses the root-inline region without node allocation") {
    Fixture fx;
    fx.md.inode_alloc();
    CHECK(fx.md.inodes_tree().height() == 0);
    CHECK(fx.md.inodes_tree().root_inline_count() == 1);
    CHECK(fx.store.blobs_.empty());
}

TEST_CASE("four dentries stay inline; the fifth creates a tree") {
    Fixture fx;
    std::uint64_t dir = fx.md.inode_alloc();
    for (int i = 0; i < 4; i++) {
        fx.md.dentry_add(dir, "file" + std::to_string(i), 100 + static_cast<std::uint64_t>(i));
        CHECK_FALSE(fx.md.dir_uses_tree(dir));
    }
    fx.md.dentry_add(dir, "file4", 104);
    CHECK(fx.md.dir_uses_tree(dir));
    for (int i = 0; i < 5; i++) {
        auto hit = fx.md.dentry_lookup(dir, "file" + std::to_string(i));
        REQUIRE(hit.has_value());
        CHECK(*hit == 100 + static_cast<std::uint64_t>(i));
    }
    CHECK_FALSE(fx.md.dentry_lookup(dir, "missing").has_value());
    // duplicate rejected
    CHECK_THROWS_AS(fx.md.dentry_add(dir, "file0", 999), Error);
}

TEST_CASE("dentries tree node capacity is 256 with 8 KB nodes") {
    Fixture fx;
    std::uint64_t dir = fx.md.inode_alloc();
    for (int i = 0; i < 5; i++)
        fx.md.dentry_add(dir, "seed" + std::to_string(i), static_cast<std::uint64_t>(i + 1));
    BTree* tree = fx.md.dentries_tree_of(dir);
    REQUIRE(tree != nullptr);
    CHECK(tree->leaf_item_capacity() == 256);
}

TEST_CASE("long names round-trip through the shared dictionary") {
    Fixture fx;
    std::uint64_t dir = fx.md.inode_alloc();
    std::string long_name = "a_rather_long_file_name_beyond_inline";
    fx.md.dentry_add(dir, long_name, 42);
    auto hit = fx.md.dentry_lookup(dir, long_name);
    REQUIRE(hit.has_value());
    CHECK(*hit == 42);
    // the listing reconstructs the exact name
    auto list = fx.md.dentry_list(dir);
    REQUIRE(list.size() == 1);
    CHECK(list[0].first == long_name);
    CHECK(fx.dict.name_count() == 1);

    // deleting and recreating the same name adds no new dictionary bytes
    std::uint64_t bytes = fx.dict.stored_string_bytes();
    fx.md.dentry_remove(dir, long_name);
    fx.md.dentry_add(dir, long_name, 43);
    CHECK(fx.dict.stored_string_bytes() == bytes);
}

TEST_CASE("eight extents stay inline; the ninth grows a tree") {
    Fixture fx;
    std::uint64_t file = fx.md.inode_alloc();
    std::uint64_t off = 0;
    for (int i = 0; i < 8; i++) {
        // distinct segments so no two merge
        RawExtentRec e{static_cast<std::uint64_t>(i), 0, 2};
        fx.md.extents_insert(file, off, e);
        off += 2;
        CHECK_FALSE(fx.md.file_uses_extent_tree(file));
    }
    fx.md.extents_insert(file, off, RawExtentRec{99, 0, 2});
    CHECK(fx.md.file_uses_extent_tree(file));
    // lookups resolve across the promotion
    auto hit = fx.md.extents_lookup(file, 5);
    REQUIRE(hit.has_value());
    CHECK(hit->extent.segment_id == 2);
    CHECK(hit->intra_offset == 1);
    auto hit2 = fx.md.extents_lookup(file, 16);
    REQUIRE(hit2.has_value());
    CHECK(hit2->extent.segment_id == 99);
}

TEST_CASE("extents lookup equals a linear scan oracle") {
    Fixture fx;
    std::uint64_t file = fx.md.inode_alloc();
    std::mt19937_64 rng(9);
    // build a fragmented map: every extent its own segment, some gaps
    std::vector<std::pair<std::uint64_t, RawExtentRec>> truth;
    std::uint64_t off = 0;
    for (int i = 0; i < 50; i++) {
        RawExtentRec e{static_cast<std::uint64_t>(1000 + i), static_cast<std::uint32_t>(rng() % 100),
                       static_cast<std::uint32_t>(1 + rng() % 4)};
        fx.md.extents_insert(file, off, e);
        truth.emplace_back(off, e);
        off += e.length;
        if (rng() % 4 == 0) off += 1 + rng() % 3; // hole
    }
    for (std::uint64_t block = 0; block < off + 2; block++) {
        // oracle: linear scan
        std::optional<MetadataStore::ExtentHit> expect;
        for (auto& [o, e] : truth) {
            if (block >= o && block < o + e.length) {
                expect = MetadataStore::ExtentHit{e, static_cast<std::uint32_t>(block - o)};
            }
        }
        auto got = fx.md.extents_lookup(file, block);
        CHECK(got.has_value() == expect.has_value());
        if (got && expect) {
            CHECK(got->extent == expect->extent);
            CHECK(got->intra_offset == expect->intra_offset);
        }
    }
    // overlap rejected
    CHECK_THROWS_AS(fx.md.extents_insert(file, 0, RawExtentRec{5, 5, 1}), Error);
}

TEST_CASE("extents tree capacity arithmetic: 64 forks, 192 extents per 4 KB node") {
    Fixture fx;
    TreeConfig cfg = fx.md.extents_tree_config();
    CHECK(cfg.node_size / cfg.item_size == 64);
    CHECK(3 * (cfg.node_size / cfg.item_size) == 192);
    // two nodes at 8 MB per extent describe a 3 GB file
    std::uint64_t bytes_per_extent = 8ull * 1024 * 1024;
    std::uint64_t total = 2ull * 192 * bytes_per_extent;
    CHECK(total == 3ull * 1024 * 1024 * 1024);
}

TEST_CASE("truncate to zero detaches the mapping in one step and drains over ticks") {
    Fixture fx;
    std::uint64_t file = fx.md.inode_alloc();
    std::uint64_t off = 0;
    for (int i = 0; i < 40; i++) {
        fx.md.extents_insert(file, off, RawExtentRec{static_cast<std::uint64_t>(i), 0, 1});
        off += 1;
    }
    REQUIRE(fx.md.file_uses_extent_tree(file));
    fx.md.flush();
    fx.md.truncate_invalidate(file, 0);
    CHECK(fx.md.extents_lookup(file, 0) == std::nullopt);
    // extents drain from the invalidation queue, not synchronously
    std::size_t before = fx.detached.size();
    CHECK(fx.md.invalidation_backlog() > 0);
    while (fx.md.invalidation_backlog() > 0) fx.md.process_invalidation(2);
    // all 40 blocks eventually detached
    std::uint64_t blocks = 0;
    for (auto it = fx.detached.begin() + static_cast<std::ptrdiff_t>(before); it != fx.detached.end(); ++it)
        blocks += it->length;
    CHECK(blocks + before == 40);
}

TEST_CASE("partial truncate trims the cut fork synchronously") {
    Fixture fx;
    std::uint64_t file = fx.md.inode_alloc();
    // one fat extent per fork; 10 blocks each
    std::uint64_t off = 0;
    for (int i = 0; i < 12; i++) {
        fx.md.extents_insert(file, off, RawExtentRec{static_cast<std::uint64_t>(i), 0, 10});
        off += 10;
    }
    fx.md.truncate_invalidate(file, 25);
    // blocks 0..24 remain; 25..119 detached
    CHECK(fx.md.extents_lookup(file, 24).has_value());
    CHECK_FALSE(fx.md.extents_lookup(file, 25).has_value());
    std::uint64_t detached_blocks = 0;
    for (const RawExtentRec& e : fx.detached) detached_blocks += e.length;
    while (fx.md.invalidation_backlog() > 0) fx.md.process_invalidation(4);
    detached_blocks = 0;
    for (const RawExtentRec& e : fx.detached) detached_blocks += e.length;
    CHECK(detached_blocks == 120 - 25);
    // truncate to the same size is a no-op
    std::size_t n = fx.detached.size();
    fx.md.truncate_invalidate(file, 25);
    CHECK(fx.detached.size() == n);
}

TEST_CASE("single small xattr lives inline; values over 32 bytes become blobs") {
    Fixture fx;
    std::uint64_t ino = fx.md.inode_alloc();
    Bytes small = {1, 2, 3};
    fx.md.xattr_set(ino, "user.tag", small);
    CHECK(fx.md.inode_get(ino).xattr_tag == XattrTag::inline_xattr);
    auto got = fx.md.xattr_get(ino, "user.tag");
    REQUIRE(got.has_value());
    CHECK(*got == small);

    Bytes big(4096, 0xBE);
    fx.md.xattr_set(ino, "user.blob", big);
    auto got2 = fx.md.xattr_get(ino, "user.blob");
    REQUIRE(got2.has_value());
    CHECK(*got2 == big);
    CHECK(fx.md.inode_get(ino).xattr_tag == XattrTag::xattr_root);

    // oversized value rejected
    Bytes huge(kXattrValueLimit + 1, 1);
    CHECK_THROWS_AS(fx.md.xattr_set(ino, "user.huge", huge), Error);
    CHECK_FALSE(fx.md.xattr_get(ino, "user.none").has_value());
}

TEST_CASE("xattr value replacement frees the old blob") {
    Fixture fx;
    std::uint64_t ino = fx.md.inode_alloc();
    fx.md.xattr_set(ino, "user.data", Bytes(1000, 1));
    fx.md.xattr_set(ino, "user.other", Bytes(4, 4));
    int freed = fx.blobs.freed_;
    fx.md.xattr_set(ino, "user.data", Bytes(2000, 2));
    CHECK(fx.blobs.freed_ == freed + 1);
    auto got = fx.md.xattr_get(ino, "user.data");
    REQUIRE(got.has_value());
    CHECK(got->size() == 2000);
    fx.md.xattr_remove(ino, "user.data");
    CHECK(fx.blobs.freed_ == freed + 2);
    CHECK_FALSE(fx.md.xattr_get(ino, "user.data").has_value());
}

TEST_CASE("xattr lookup table clusters 22 anchors") {
    std::vector<std::uint64_t> hashes;
    for (int i = 0; i < 100; i++) hashes.push_back(static_cast<std::uint64_t>(i) * 97);
    auto table = build_lookup_table(hashes);
    CHECK(table.size() == kXattrLookupTableSize);
    // anchors ascend and all live in the input set
    for (std::size_t i = 1; i < table.size(); i++) CHECK(table[i - 1] <= table[i]);
    for (std::uint64_t anchor : table)
        CHECK(std::find(hashes.begin(), hashes.end(), anchor) != hashes.end());
}

TEST_CASE("inline file content migrates when an xattr claims the second half") {
    Fixture fx;
    std::uint64_t ino_id = fx.md.inode_alloc();
    RawInode ino = fx.md.inode_get(ino_id);
    Bytes content(100, 0x5A);
    fx.md.inline_file_write(ino, content);
    fx.md.inode_put(ino);
    CHECK(fx.md.inline_file_read(fx.md.inode_get(ino_id)) == content);

    // an xattr shrinks the primary domain; 100 B no longer fit inline
    fx.md.xattr_set(ino_id, "user.x", Bytes{1});
    RawInode after = fx.md.inode_get(ino_id);
    CHECK(after.private_tag == PrivateTag::inline_extents);
    CHECK(after.xattr_tag == XattrTag::inline_xattr);
    // content now lives behind an extent
    auto hit = fx.md.extents_lookup(ino_id, 0);
    REQUIRE(hit.has_value());
    Bytes stored = fx.blobs.load(hit->extent, 100);
    CHECK(stored == content);
}

TEST_CASE("inline capacity constants honor the xattr half split") {
    Fixture fx;
    std::uint64_t ino_id = fx.md.inode_alloc();
    RawInode ino = fx.md.inode_get(ino_id);
    CHECK(fx.md.inline_file_capacity(ino) == 128);
    ino.xattr_tag = XattrTag::inline_xattr;
    CHECK(fx.md.inline_file_capacity(ino) == 64);
}

TEST_CASE("promotion preserves every pre-promotion entry") {
    Fixture fx;
    std::uint64_t dir = fx.md.inode_alloc();
    std::map<std::string, std::uint64_t> truth;
    for (int i = 0; i < 40; i++) {
        std::string name = "entry_number_" + std::to_string(i);
        fx.md.dentry_add(dir, name, static_cast<std::uint64_t>(1000 + i));
        truth[name] = static_cast<std::uint64_t>(1000 + i);
        // every entry remains reachable at every step
        for (auto& [n, id] : truth) {
            auto hit = fx.md.dentry_lookup(dir, n);
            REQUIRE(hit.has_value());
            CHECK(*hit == id);
        }
    }
}

TEST_CASE("metadata persists through flush and load") {
    MemStore store;
    SharedDictionary dict;
    MemBlobs blobs;
    RootNodeImage root;
    {
        MetadataStore md(store, dict, blobs);
        std::uint64_t dir = md.inode_alloc();
        for (int i = 0; i < 10; i++)
            md.dentry_add(dir, "file" + std::to_string(i), static_cast<std::uint64_t>(50 + i));
        std::uint64_t file = md.inode_alloc();
        for (int i = 0; i < 12; i++)
            md.extents_insert(file, static_cast<std::uint64_t>(i),
                              RawExtentRec{static_cast<std::uint64_t>(i), 0, 1});
        md.xattr_set(file, "user.k", Bytes{9, 9});
        root = md.flush();
    }
    auto md2 = MetadataStore::load(store, dict, blobs, root);
    std::uint64_t dir = 1, file = 2;
    for (int i = 0; i < 10; i++) {
        auto hit = md2->dentry_lookup(dir, "file" + std::to_string(i));
        REQUIRE(hit.has_value());
        CHECK(*hit == static_cast<std::uint64_t>(50 + i));
    }
    auto ext = md2->extents_lookup(file, 7);
    REQUIRE(ext.has_value());
    CHECK(ext->extent.segment_id == 7);
    auto val = md2->xattr_get(file, "user.k");
    REQUIRE(val.has_value());
    CHECK(*val == Bytes{9, 9});
}
