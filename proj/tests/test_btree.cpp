#include <doctest.h>

#include <map>
#include <random>

#include "ssdfs/btree.hpp"

using namespace ssdfs;

namespace {

// In-memory node store for engine-independent tree tests.
class FakeStorage : public NodeStorage {
public:
    LogicalExtent allocate(NodeKind, std::uint32_t bytes) override {
        LogicalExtent e;
        e.seg = 1;
        e.block = next_block_;
        e.len = (bytes + 4095) / 4096;
        next_block_ += e.len;
        allocs_++;
        return e;
    }
    void write(const LogicalExtent& e, ByteView image, bool first) override {
        blobs_[e.block] = Bytes(image.begin(), image.end());
        if (first) first_writes_++;
        else updates_++;
    }
    Bytes read(const LogicalExtent& e) override {
        auto it = blobs_.find(e.block);
        if (it == blobs_.end()) fail(Errc::not_found, "no blob");
        reads_++;
        return it->second;
    }
    void invalidate(const LogicalExtent& e) override {
        invalidated_++;
        blobs_.erase(e.block);
    }
    void release(const LogicalExtent& e) override {
        released_++;
        blobs_.erase(e.block);
    }

    std::uint32_t next_block_ = 0;
    std::map<std::uint32_t, Bytes> blobs_;
    int allocs_ = 0, first_writes_ = 0, updates_ = 0, reads_ = 0;
    int invalidated_ = 0, released_ = 0;
};

Bytes make_item(std::uint64_t key, std::uint32_t item_size) {
    Bytes b(item_size, 0);
    for (int i = 0; i < 8; i++) b[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(key >> (8 * i));
    for (std::size_t i = 8; i < b.size(); i++) b[i] = static_cast<std::uint8_t>(key * 31 + i);
    return b;
}

std::uint64_t key_of_item(ByteView b) {
    std::uint64_t k = 0;
    for (int i = 0; i < 8; i++) k |= static_cast<std::uint64_t>(b[static_cast<std::size_t>(i)]) << (8 * i);
    return k;
}

TreeConfig small_cfg() {
    TreeConfig cfg;
    cfg.item_size = 16;
    cfg.node_size = 1024;
    return cfg;
}

} // namespace

TEST_CASE("two inserts stay inline in the root") {
    FakeStorage storage;
    BTree t(small_cfg(), storage, key_of_item);
    t.insert(10, make_item(10, 16));
    t.insert(5, make_item(5, 16));
    CHECK(t.height() == 0);
    CHECK(t.node_count() == 0);
    CHECK(t.root_inline_count() == 2);
    CHECK(t.lookup(10).has_value());
    CHECK(t.lookup(5).has_value());
    CHECK_FALSE(t.lookup(7).has_value());
    CHECK(t.size() == 2);
}

TEST_CASE("third insert creates the first hybrid node") {
    FakeStorage storage;
    BTree t(small_cfg(), storage, key_of_item);
    for (std::uint64_t k = 0; k < 3; k++) t.insert(k, make_item(k, 16));
    CHECK(t.height() == 1);
    auto nodes = t.nodes_in_key_order();
    REQUIRE(nodes.size() == 1);
    CHECK(nodes[0].kind == NodeKind::hybrid);
    CHECK(nodes[0].item_count == 3);
    CHECK(nodes[0].index_count == 0);
    t.audit();
}

TEST_CASE("duplicate keys rejected") {
    FakeStorage storage;
    BTree t(small_cfg(), storage, key_of_item);
    t.insert(1, make_item(1, 16));
    CHECK_THROWS_AS(t.insert(1, make_item(1, 16)), Error);
    for (std::uint64_t k = 2; k < 100; k++) t.insert(k, make_item(k, 16));
    try {
        t.insert(50, make_item(50, 16));
        CHECK(false);
    } catch (const Error& e) {
        CHECK(e.code() == Errc::duplicate_key);
    }
}

TEST_CASE("key found while staged in a hybrid buffer, not yet in any leaf") {
    FakeStorage storage;
    BTree t(small_cfg(), storage, key_of_item);
    // 85 ascending keys: a leaf exists and the newest keys sit in staging
    for (std::uint64_t k = 0; k < 85; k++) t.insert(k, make_item(k, 16));
    auto nodes = t.nodes_in_key_order();
    bool any_hybrid_with_items = false;
    bool any_leaf = false;
    for (const NodeInfo& n : nodes) {
        if (n.kind == NodeKind::hybrid && n.item_count > 0) any_hybrid_with_items = true;
        if (n.kind == NodeKind::leaf) any_leaf = true;
    }
    CHECK(any_hybrid_with_items);
    CHECK(any_leaf);
    CHECK(t.lookup(84).has_value());
}

TEST_CASE("evolution milestones under an ascending workload") {
    // capacities from the pinned layout arithmetic
    TreeConfig cfg = small_cfg();
    FakeStorage storage;
    BTree t(cfg, storage, key_of_item);
    const std::uint32_t leaf_cap = cfg.node_size / cfg.item_size;          // 64
    const std::uint32_t idx_cap0 = cfg.initial_hybrid_index_capacity;     // 16
    const std::uint32_t hybrid_cap0 =
        (cfg.node_size - idx_cap0 * kIndexRecordSize) / cfg.item_size;    // 36
    const std::uint32_t idx_node_cap = cfg.node_size / kIndexRecordSize;  // 36

    // independently derived milestone counts
    const std::uint64_t n_first_node = 3;
    const std::uint64_t n_case_b = hybrid_cap0 + 1;       // second hybrid appears
    const std::uint64_t n_case_c = 2 * hybrid_cap0 + 1;   // transformation

    // the milestone model walks the same capacity arithmetic for D, E, G
    std::uint64_t n_case_d = 0, n_case_e = 0, n_case_g = 0;
    {
        auto data_cap = [&](std::uint32_t ic) {
            return (cfg.node_size - ic * kIndexRecordSize) / cfg.item_size;
        };
        // state after case C
        std::uint64_t n = n_case_c;
        std::uint32_t staged =
            hybrid_cap0 - std::min<std::uint32_t>(hybrid_cap0 / 2, leaf_cap - hybrid_cap0) + 1;
        std::uint32_t idx_count = 1, idx_cap = idx_cap0;
        std::uint32_t leaf_fill = 0;
        bool leaf_open = false, is_index = false;
        auto branch_step = [&]() {
            n++;
            if (leaf_open && leaf_fill < leaf_cap) {
                leaf_fill++;
                return;
            }
            leaf_open = false;
            if (!is_index && staged < data_cap(idx_cap)) {
                staged++;
                return;
            }
            if (!is_index) {
                // flush staging into a fresh leaf; the pending item follows it
                idx_count++;
                while (idx_count > idx_cap) {
                    std::uint32_t doubled = idx_cap * 2;
                    if (doubled * kIndexRecordSize >= cfg.node_size) {
                        is_index = true;
                        idx_cap = idx_node_cap;
                        if (n_case_d == 0) n_case_d = n;
                        break;
                    }
                    idx_cap = doubled;
                }
                leaf_fill = staged + 1;
                staged = 0;
                leaf_open = true;
                return;
            }
            // index node: new leaf per right-edge overflow
            if (idx_count < idx_node_cap) {
                idx_count++;
                leaf_fill = 1;
                leaf_open = true;
                return;
            }
            // branch full
            leaf_open = true;
            leaf_fill = leaf_cap; // stays saturated
        };
        // branch 1: until the index node fills and overflows -> case E
        while (true) {
            branch_step();
            if (is_index && idx_count == idx_node_cap && leaf_fill == leaf_cap && leaf_open) {
                // the NEXT insert overflows to the root
                n_case_e = n + 1;
                break;
            }
        }
        // branch 2 (right of root): starts as pure staging with the E item
        n = n_case_e;
        staged = 1;
        idx_count = 0;
        idx_cap = idx_cap0;
        leaf_fill = 0;
        leaf_open = false;
        is_index = false;
        std::uint64_t d2 = 0;
        auto branch2_step = [&]() {
            n++;
            if (leaf_open && leaf_fill < leaf_cap) {
                leaf_fill++;
                return;
            }
            leaf_open = false;
            if (!is_index && staged < data_cap(idx_cap)) {
                staged++;
                return;
            }
            if (!is_index) {
                idx_count++;
                while (idx_count > idx_cap) {
                    std::uint32_t doubled = idx_cap * 2;
                    if (doubled * kIndexRecordSize >= cfg.node_size) {
                        is_index = true;
                        idx_cap = idx_node_cap;
                        if (d2 == 0) d2 = n;
                        break;
                    }
                    idx_cap = doubled;
                }
                leaf_fill = staged + 1;
                staged = 0;
                leaf_open = true;
                return;
            }
            if (idx_count < idx_node_cap) {
                idx_count++;
                leaf_fill = 1;
                leaf_open = true;
                return;
            }
            leaf_open = true;
            leaf_fill = leaf_cap;
        };
        while (true) {
            branch2_step();
            if (is_index && idx_count == idx_node_cap && leaf_fill == leaf_cap && leaf_open) {
                n_case_g = n + 1;
                break;
            }
        }
    }

    REQUIRE(n_case_d > n_case_c);
    REQUIRE(n_case_e > n_case_d);
    REQUIRE(n_case_g > n_case_e);

    // drive the real tree and check each milestone
    std::uint64_t n = 0;
    auto insert_upto = [&](std::uint64_t target) {
        while (n < target) {
            t.insert(n, make_item(n, 16));
            n++;
        }
    };

    // case A: inline root only
    insert_upto(n_first_node - 1);
    CHECK(t.height() == 0);
    CHECK(t.node_count() == 0);
    insert_upto(n_first_node);
    CHECK(t.height() == 1);
    CHECK(t.node_count() == 1);
    CHECK(t.nodes_in_key_order()[0].kind == NodeKind::hybrid);

    // case B: two pure hybrids under the root
    insert_upto(n_case_b - 1);
    CHECK(t.root_record_count() == 1);
    insert_upto(n_case_b);
    CHECK(t.root_record_count() == 2);
    {
        auto nodes = t.nodes_in_key_order();
        REQUIRE(nodes.size() == 2);
        CHECK(nodes[0].kind == NodeKind::hybrid);
        CHECK(nodes[1].kind == NodeKind::hybrid);
        CHECK(nodes[0].index_count == 0);
        CHECK(nodes[1].index_count == 0);
    }

    // case C: left hybrid becomes a leaf under the right hybrid
    insert_upto(n_case_c);
    CHECK(t.root_record_count() == 1);
    {
        auto nodes = t.nodes_in_key_order();
        REQUIRE(nodes.size() == 2);
        CHECK(nodes[0].kind == NodeKind::leaf);
        CHECK(nodes[1].kind == NodeKind::hybrid);
        CHECK(nodes[1].index_count == 1);
        CHECK(nodes[1].item_count > 0);
    }

    // case D: the hybrid's index area has swallowed the node
    insert_upto(n_case_d - 1);
    {
        auto nodes = t.nodes_in_key_order();
        CHECK(nodes.back().kind == NodeKind::hybrid);
    }
    insert_upto(n_case_d);
    {
        auto nodes = t.nodes_in_key_order();
        CHECK(nodes.back().kind == NodeKind::index);
        CHECK(t.root_record_count() == 1);
    }

    // case E: a fresh right hybrid joins at the same level
    insert_upto(n_case_e - 1);
    CHECK(t.root_record_count() == 1);
    insert_upto(n_case_e);
    CHECK(t.root_record_count() == 2);
    {
        auto nodes = t.nodes_in_key_order();
        bool saw_index = false, saw_right_hybrid = false;
        for (std::size_t i = 0; i < nodes.size(); i++) {
            if (nodes[i].kind == NodeKind::index) saw_index = true;
        }
        CHECK(nodes.back().kind == NodeKind::hybrid);
        saw_right_hybrid = nodes.back().item_count == 1;
        CHECK(saw_index);
        CHECK(saw_right_hybrid);
    }

    // case G: a hybrid parent over the two exhausted index nodes
    insert_upto(n_case_g - 1);
    CHECK(t.height() == 1);
    insert_upto(n_case_g);
    CHECK(t.height() == 2);
    CHECK(t.root_record_count() == 1);
    {
        auto nodes = t.nodes_in_key_order();
        // the top node is the new hybrid holding two index records
        const NodeInfo& top = nodes.back();
        CHECK(top.kind == NodeKind::hybrid);
        CHECK(top.height == 2);
        CHECK(top.index_count == 2);
        int index_nodes = 0;
        for (const NodeInfo& info : nodes)
            if (info.kind == NodeKind::index) index_nodes++;
        CHECK(index_nodes == 2);
    }

    t.audit();
    // every key is still reachable
    for (std::uint64_t k = 0; k < n; k += 97) CHECK(t.lookup(k).has_value());
    CHECK(t.size() == n);
}

TEST_CASE("oracle: 10k random inserts traverse in sorted order") {
    FakeStorage storage;
    BTree t(small_cfg(), storage, key_of_item);
    std::map<std::uint64_t, Bytes> oracle;
    std::mt19937_64 rng(123);
    while (oracle.size() < 10000) {
        std::uint64_t k = rng() % 1000000;
        if (oracle.count(k)) continue;
        Bytes item = make_item(k, 16);
        oracle[k] = item;
        t.insert(k, item);
    }
    std::vector<std::uint64_t> seen;
    t.for_each([&](std::uint64_t k, ByteView item) {
        seen.push_back(k);
        CHECK(Bytes(item.begin(), item.end()) == oracle[k]);
    });
    REQUIRE(seen.size() == oracle.size());
    std::uint64_t prev = 0;
    bool first = true;
    for (std::uint64_t k : seen) {
        if (!first) CHECK(prev < k);
        prev = k;
        first = false;
    }
    t.audit();
}

TEST_CASE("oracle: mixed insert/lookup/delete fuzz equals std::map") {
    FakeStorage storage;
    BTree t(small_cfg(), storage, key_of_item);
    std::map<std::uint64_t, Bytes> oracle;
    std::mt19937_64 rng(321);
    for (int op = 0; op < 10000; op++) {
        std::uint64_t k = rng() % 2000;
        int kind = static_cast<int>(rng() % 10);
        if (kind < 5) {
            Bytes item = make_item(k, 16);
            if (oracle.count(k)) {
                CHECK_THROWS_AS(t.insert(k, item), Error);
            } else {
                t.insert(k, item);
                oracle[k] = item;
            }
        } else if (kind < 8) {
            auto got = t.lookup(k);
            if (oracle.count(k)) {
                REQUIRE(got.has_value());
                CHECK(*got == oracle[k]);
            } else {
                CHECK_FALSE(got.has_value());
            }
        } else {
            if (oracle.count(k)) {
                Bytes removed = t.remove(k);
                CHECK(removed == oracle[k]);
                oracle.erase(k);
            } else {
                CHECK_THROWS_AS(t.remove(k), Error);
            }
        }
        if (op % 1000 == 999) t.audit();
    }
    CHECK(t.size() == oracle.size());
    std::size_t count = 0;
    t.for_each([&](std::uint64_t k, ByteView item) {
        count++;
        REQUIRE(oracle.count(k));
        CHECK(Bytes(item.begin(), item.end()) == oracle[k]);
    });
    CHECK(count == oracle.size());
}

TEST_CASE("deleting every item of a leaf pre-allocates it, index records stay") {
    FakeStorage storage;
    BTree t(small_cfg(), storage, key_of_item);
    for (std::uint64_t k = 0; k < 200; k++) t.insert(k, make_item(k, 16));
    t.flush();
    auto nodes_before = t.nodes_in_key_order();
    std::size_t leaves_before = 0;
    for (const NodeInfo& n : nodes_before)
        if (n.kind == NodeKind::leaf && !n.preallocated) leaves_before++;
    REQUIRE(leaves_before >= 2);

    // the first leaf holds the lowest keys; remove them all
    std::uint32_t first_leaf_items = 0;
    for (const NodeInfo& n : nodes_before) {
        if (n.kind == NodeKind::leaf) {
            first_leaf_items = n.item_count;
            break;
        }
    }
    int released_before = storage.released_;
    for (std::uint64_t k = 0; k < first_leaf_items; k++) t.remove(k);
    CHECK(storage.released_ == released_before + 1);
    auto nodes_after = t.nodes_in_key_order();
    bool saw_preallocated = false;
    for (const NodeInfo& n : nodes_after)
        if (n.preallocated) saw_preallocated = true;
    CHECK(saw_preallocated);
    // lookups through the pre-allocated record return nothing without reads
    int reads_before = storage.reads_;
    CHECK_FALSE(t.lookup(0).has_value());
    CHECK(storage.reads_ == reads_before);
    // keys outside the emptied leaf still resolve
    CHECK(t.lookup(first_leaf_items).has_value());
    t.audit();
}

TEST_CASE("deleting the last item collapses the tree to root-only") {
    FakeStorage storage;
    BTree t(small_cfg(), storage, key_of_item);
    for (std::uint64_t k = 0; k < 50; k++) t.insert(k, make_item(k, 16));
    for (std::uint64_t k = 0; k < 50; k++) t.remove(k);
    CHECK(t.size() == 0);
    CHECK(t.height() == 0);
    CHECK(t.node_count() == 0);
    // tree usable again
    t.insert(7, make_item(7, 16));
    CHECK(t.lookup(7).has_value());
}

TEST_CASE("flush and load round-trip the tree through storage") {
    FakeStorage storage;
    TreeConfig cfg = small_cfg();
    RootNodeImage root;
    std::map<std::uint64_t, Bytes> oracle;
    {
        BTree t(cfg, storage, key_of_item);
        std::mt19937_64 rng(55);
        for (int i = 0; i < 500; i++) {
            std::uint64_t k = rng() % 100000;
            if (oracle.count(k)) continue;
            Bytes item = make_item(k, 16);
            oracle[k] = item;
            t.insert(k, item);
        }
        root = t.flush();
    }
    auto t2 = BTree::load(cfg, storage, key_of_item, root);
    CHECK(t2->size() == oracle.size());
    for (auto& [k, item] : oracle) {
        auto got = t2->lookup(k);
        REQUIRE(got.has_value());
        CHECK(*got == item);
    }
    t2->audit();
}

TEST_CASE("root-only tree round-trips through its image") {
    FakeStorage storage;
    TreeConfig cfg = small_cfg();
    BTree t(cfg, storage, key_of_item);
    t.insert(42, make_item(42, 16));
    t.insert(17, make_item(17, 16));
    RootNodeImage img = t.flush();
    CHECK(img.height == 0);
    CHECK(img.item_count == 2);
    auto t2 = BTree::load(cfg, storage, key_of_item, img);
    CHECK(t2->lookup(42).has_value());
    CHECK(t2->lookup(17).has_value());
    CHECK(t2->size() == 2);
}

TEST_CASE("delayed invalidation drains a detached subtree over ticks") {
    FakeStorage storage;
    TreeConfig cfg = small_cfg();
    BTree t(cfg, storage, key_of_item);
    for (std::uint64_t k = 0; k < 600; k++) t.insert(k, make_item(k, 16));
    t.flush();
    std::size_t stored_nodes = storage.blobs_.size();
    REQUIRE(stored_nodes >= 3);

    t.destroy_into_queue();
    // nothing physically invalidated yet
    CHECK(storage.invalidated_ == 0);
    CHECK(t.invalidation_backlog() > 0);

    std::size_t total = 0;
    int ticks = 0;
    while (t.invalidation_backlog() > 0) {
        total += t.process_invalidation(2);
        ticks++;
        REQUIRE(ticks < 10000);
    }
    // every stored node's extent got invalidated exactly once
    CHECK(total == stored_nodes);
    CHECK(storage.invalidated_ == static_cast<int>(stored_nodes));
    CHECK(ticks >= static_cast<int>((stored_nodes + 1) / 2));

    // empty queue tick is a no-op
    CHECK(t.process_invalidation(8) == 0);
}

TEST_CASE("update marks only the touched slot dirty and flush rewrites it") {
    FakeStorage storage;
    BTree t(small_cfg(), storage, key_of_item);
    for (std::uint64_t k = 0; k < 300; k++) t.insert(k, make_item(k, 16));
    t.flush();
    int first_writes = storage.first_writes_;
    int updates = storage.updates_;
    Bytes changed = make_item(10, 16);
    changed[12] ^= 0xFF;
    t.update(10, changed);
    t.flush();
    CHECK(storage.first_writes_ == first_writes);
    CHECK(storage.updates_ > updates);
    auto got = t.lookup(10);
    REQUIRE(got.has_value());
    CHECK(*got == changed);
}

TEST_CASE("slot locks: distinct slots lock independently, same slot conflicts") {
    FakeStorage storage;
    BTree t(small_cfg(), storage, key_of_item);
    for (std::uint64_t k = 0; k < 300; k++) t.insert(k, make_item(k, 16));
    CHECK(t.try_lock_slot(5));
    CHECK(t.try_lock_slot(6));
    CHECK_FALSE(t.try_lock_slot(5));
    t.unlock_slot(5);
    CHECK(t.try_lock_slot(5));
    t.unlock_slot(5);
    t.unlock_slot(6);
}

TEST_CASE("lowest missing key scan (inode id reuse groundwork)") {
    FakeStorage storage;
    BTree t(small_cfg(), storage, key_of_item);
    for (std::uint64_t k = 1; k <= 40; k++) t.insert(k, make_item(k, 16));
    CHECK(t.first_missing_key_from(1) == 41);
    t.remove(17);
    CHECK(t.first_missing_key_from(1) == 17);
    t.insert(17, make_item(17, 16));
    CHECK(t.first_missing_key_from(1) == 41);
}
