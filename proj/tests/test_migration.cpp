#include <doctest.h>

#include <map>
#include <memory>
#include <random>

#include "ssdfs/migration.hpp"

using namespace ssdfs;

namespace {

DeviceGeometry geo() {
    DeviceGeometry g;
    g.page_size = 4096;
    g.pages_per_peb = 32;
    g.peb_count = 16;
    g.die_count = 4;
    g.channel_count = 1;
    return g;
}

struct Fixture {
    NandDevice dev{geo()};
    PebMap map{dev, 8};
    std::uint64_t checkpoint = 0;
    std::map<std::uint32_t, std::unique_ptr<LogEngine>> engines;
    std::unique_ptr<MigrationManager> mgr;

    Fixture() {
        mgr = std::make_unique<MigrationManager>(
            map, [this](std::uint32_t peb) { return engine(peb); },
            [](LogEngine& e) { e.commit(CommitMode::partial); });
    }

    LogEngine* engine(std::uint32_t peb) {
        auto it = engines.find(peb);
        if (it != engines.end()) return it->second.get();
        LogContext ctx;
        ctx.seg_id = 0;
        ctx.leb_index = 0;
        ctx.next_checkpoint = [this]() { return ++checkpoint; };
        ctx.header_template = [g = geo()]() {
            SegmentHeader h;
            h.params.page_size = g.page_size;
            h.params.pages_per_peb = g.pages_per_peb;
            h.params.pebs_per_segment = 1;
            h.params.segment_size = static_cast<std::uint64_t>(g.pages_per_peb) * g.page_size;
            h.params.inode_size = 256;
            return h;
        };
        ctx.footer_template = []() { return LogFooter{}; };
        auto eng = std::make_unique<LogEngine>(dev, peb, ctx, EngineConfig{});
        LogEngine* raw = eng.get();
        engines[peb] = std::move(eng);
        return raw;
    }

    // erased PEBs start a fresh engine lifetime
    void recycle(std::uint32_t peb) { engines.erase(peb); }
};

Bytes rand_block(std::mt19937_64& rng) {
    Bytes b(4096);
    for (auto& x : b) x = static_cast<std::uint8_t>(rng());
    return b;
}

} // namespace

TEST_CASE("no context: writes land in the source") {
    Fixture fx;
    fx.map.map_leb(0, true, PebType::user_data);
    LogEngine* target = fx.mgr->route(0);
    REQUIRE(target != nullptr);
    CHECK(target->peb_id() == *fx.map.map_leb(0, false, PebType::user_data));
    CHECK_FALSE(fx.mgr->migrating(0));
}

TEST_CASE("updates during migration drain the source without GC copies") {
    Fixture fx;
    std::mt19937_64 rng(1);
    fx.map.map_leb(0, true, PebType::user_data);
    LogEngine* src = fx.mgr->route(0);

    // fill a few blocks and commit
    std::map<std::uint32_t, Bytes> shadow;
    for (int i = 0; i < 6; i++) {
        std::uint32_t slot = src->alloc_block();
        Bytes content = rand_block(rng);
        src->append_block(7, static_cast<std::uint32_t>(i), slot, content);
        shadow[slot] = content;
    }
    src->commit(CommitMode::partial);

    fx.mgr->start(0);
    CHECK(fx.mgr->migrating(0));
    CHECK(fx.mgr->valid_blocks_remaining(0) == 6);
    LogEngine* dst = fx.mgr->route(0);
    CHECK(dst->peb_id() != src->peb_id());

    // hot workload: every block gets updated once -> complete self-migration
    for (auto& [slot, content] : shadow) {
        Bytes updated = content;
        updated[100] ^= 0xFF;
        dst->append_block(7, src->logical_offset_of_block(slot), slot, updated);
        fx.mgr->note_update(0, slot);
        fx.mgr->on_block_migrated(0, slot);
        shadow[slot] = updated;
    }
    CHECK(fx.mgr->valid_blocks_remaining(0) == 0);
    CHECK(fx.mgr->gc_page_copies() == 0);

    CHECK(fx.mgr->maybe_finalize(0));
    CHECK_FALSE(fx.mgr->migrating(0));
    // the LEB now resolves to the old destination
    CHECK(*fx.map.map_leb(0, false, PebType::user_data) == dst->peb_id());
    // and the content reads back through it
    for (auto& [slot, content] : shadow) {
        CHECK(dst->reconstruct_block(slot) == content);
    }
    // source queued for erase exactly once
    CHECK(fx.map.erase_queue().size() == 1);
}

TEST_CASE("gc_tick copies the coldest blocks within the budget") {
    Fixture fx;
    std::mt19937_64 rng(2);
    fx.map.map_leb(0, true, PebType::user_data);
    LogEngine* src = fx.mgr->route(0);
    std::map<std::uint32_t, Bytes> shadow;
    for (int i = 0; i < 10; i++) {
        std::uint32_t slot = src->alloc_block();
        Bytes content = rand_block(rng);
        src->append_block(7, static_cast<std::uint32_t>(i), slot, content);
        shadow[slot] = content;
    }
    src->commit(CommitMode::partial);
    fx.mgr->start(0);

    // blocks 0 and 1 are hot; the rest is cold
    fx.mgr->note_update(0, 0);
    fx.mgr->note_update(0, 1);

    std::uint32_t copied = fx.mgr->gc_tick(0, 8);
    CHECK(copied == 8);
    CHECK(fx.mgr->gc_page_copies() == 8);
    CHECK(fx.mgr->valid_blocks_remaining(0) == 2);
    // the hot blocks are the survivors in the source
    CHECK(src->bitmap().get(0) != BlockState::invalid);
    CHECK(src->bitmap().get(1) != BlockState::invalid);
    CHECK_FALSE(fx.mgr->maybe_finalize(0));

    std::uint32_t copied2 = fx.mgr->gc_tick(0, 8);
    CHECK(copied2 == 2);
    CHECK(fx.mgr->maybe_finalize(0));

    // drained content identical via the destination
    LogEngine* now = fx.mgr->route(0);
    for (auto& [slot, content] : shadow) {
        CHECK(now->reconstruct_block(slot) == content);
    }
}

TEST_CASE("ticks to drain equals ceil(valid/budget) over random configurations") {
    std::mt19937_64 rng(3);
    for (int round = 0; round < 20; round++) {
        Fixture fx;
        fx.map.map_leb(0, true, PebType::user_data);
        LogEngine* src = fx.mgr->route(0);
        std::uint32_t valid = 1 + static_cast<std::uint32_t>(rng() % 20);
        for (std::uint32_t i = 0; i < valid; i++) {
            std::uint32_t slot = src->alloc_block();
            src->append_block(1, i, slot, Bytes(128, static_cast<std::uint8_t>(i)));
        }
        src->commit(CommitMode::partial);
        fx.mgr->start(0);
        std::uint32_t budget = 1 + static_cast<std::uint32_t>(rng() % 6);
        std::uint32_t ticks = 0;
        while (fx.mgr->valid_blocks_remaining(0) > 0) {
            fx.mgr->gc_tick(0, budget);
            ticks++;
            REQUIRE(ticks < 1000);
        }
        CHECK(ticks == (valid + budget - 1) / budget);
    }
}

TEST_CASE("reconstruction during GC applies accumulated diffs") {
    Fixture fx;
    std::mt19937_64 rng(4);
    fx.map.map_leb(0, true, PebType::user_data);
    LogEngine* src = fx.mgr->route(0);
    std::uint32_t slot = src->alloc_block();
    Bytes content = rand_block(rng);
    src->append_block(7, 0, slot, content);
    std::vector<DeltaRange> d = {{10, Bytes(32, 0xAB)}};
    apply_delta(content, d);
    src->append_update(slot, 7, 0, d);
    src->commit(CommitMode::partial);

    fx.mgr->start(0);
    fx.mgr->gc_tick(0, 4);
    fx.mgr->maybe_finalize(0);
    LogEngine* dst = fx.mgr->route(0);
    CHECK(dst->reconstruct_block(slot) == content);
}

TEST_CASE("destination logs carry the source bitmap during migration") {
    Fixture fx;
    fx.map.map_leb(0, true, PebType::user_data);
    LogEngine* src = fx.mgr->route(0);
    std::uint32_t slot = src->alloc_block();
    src->append_block(1, 0, slot, Bytes(4096, 0x1));
    src->commit(CommitMode::partial);
    fx.mgr->start(0);
    LogEngine* dst = fx.mgr->route(0);
    dst->append_block(1, 0, slot, Bytes(4096, 0x2));
    fx.mgr->on_block_migrated(0, slot);
    dst->commit(CommitMode::partial);

    // scan the destination's log: its bitmap area holds two bitmaps
    ScanResult scan = scan_peb(fx.dev, dst->peb_id());
    REQUIRE(scan.logs.size() == 1);
    const AreaDescriptor* bm = nullptr;
    for (const AreaDescriptor& a : scan.logs[0].areas)
        if (a.area_type == AreaType::block_bitmap) bm = &a;
    REQUIRE(bm != nullptr);
    Bytes blob = read_area(fx.dev, dst->peb_id(), scan.logs[0].start_page, *bm);
    CHECK(blob[0] == 2);
}

TEST_CASE("start twice fails; finalize requires a drained source") {
    Fixture fx;
    fx.map.map_leb(0, true, PebType::user_data);
    LogEngine* src = fx.mgr->route(0);
    std::uint32_t slot = src->alloc_block();
    src->append_block(1, 0, slot, Bytes(4096, 0x1));
    src->commit(CommitMode::partial);
    fx.mgr->start(0);
    CHECK_THROWS_AS(fx.mgr->start(0), Error);
    CHECK_FALSE(fx.mgr->maybe_finalize(0)); // one valid block remains
}
