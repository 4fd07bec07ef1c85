#include <doctest.h>

#include <map>
#include <random>

#include "ssdfs/dedup.hpp"

using namespace ssdfs;

namespace {

class MemStore : public NodeStorage {
public:
    LogicalExtent allocate(NodeKind, std::uint32_t bytes) override {
        LogicalExtent e;
        e.seg = 5;
        e.block = next_++;
        e.len = (bytes + 4095) / 4096;
        return e;
    }
    void write(const LogicalExtent& e, ByteView image, bool) override {
        blobs_[e.block] = Bytes(image.begin(), image.end());
    }
    Bytes read(const LogicalExtent& e) override { return blobs_.at(e.block); }
    void invalidate(const LogicalExtent&) override {}
    void release(const LogicalExtent&) override {}
    std::uint32_t next_ = 0;
    std::map<std::uint32_t, Bytes> blobs_;
};

// chunk sink emulating plain user-data placement; 2 blocks per 8 KB chunk
struct SinkState {
    std::uint32_t next_block = 0;
    std::uint64_t chunks_stored = 0;
    SharedExtents::ChunkSink sink() {
        return [this](ByteView chunk) {
            RawExtentRec e;
            e.segment_id = 40;
            e.logical_block = next_block;
            e.length = static_cast<std::uint32_t>((chunk.size() + 4095) / 4096);
            next_block += e.length;
            chunks_stored++;
            return e;
        };
    }
};

Bytes file_of(std::mt19937_64& rng, std::size_t n) {
    Bytes b(n);
    for (auto& x : b) x = static_cast<std::uint8_t>(rng());
    return b;
}

} // namespace

TEST_CASE("fingerprints are deterministic and content-sensitive") {
    Bytes a(100, 1), b(100, 1), c(100, 2);
    CHECK(fingerprint_chunk(a) == fingerprint_chunk(b));
    CHECK_FALSE(fingerprint_chunk(a) == fingerprint_chunk(c));
}

TEST_CASE("small files are never fingerprinted") {
    MemStore store;
    SharedExtents dedup(store);
    SinkState sink;
    std::mt19937_64 rng(1);
    Bytes small = file_of(rng, 4096);
    auto placements = dedup.on_store(small, sink.sink());
    CHECK(placements.size() == 1);
    CHECK(dedup.fingerprints_computed() == 0);
    CHECK(dedup.record_count() == 0);
}

TEST_CASE("staged policy: copy two dedups one chunk, copy three dedups all") {
    MemStore store;
    SharedExtents dedup(store);
    SinkState sink;
    std::mt19937_64 rng(2);
    Bytes content = file_of(rng, 64 * 1024); // 8 chunks

    auto first = dedup.on_store(content, sink.sink());
    CHECK(first.size() == 8);
    for (const StorePlacement& p : first) CHECK_FALSE(p.deduped);
    // only the first chunk got fingerprinted and registered
    CHECK(dedup.fingerprints_computed() == 1);
    CHECK(dedup.record_count() == 1);
    std::uint64_t stored_after_first = sink.chunks_stored;
    CHECK(stored_after_first == 8);

    auto second = dedup.on_store(content, sink.sink());
    CHECK(second.size() == 8);
    int deduped2 = 0;
    for (const StorePlacement& p : second)
        if (p.deduped) deduped2++;
    CHECK(deduped2 == 1); // only chunk 0
    CHECK(second[0].extent == first[0].extent);
    CHECK(sink.chunks_stored == stored_after_first + 7);
    // the rest now carries fingerprints
    CHECK(dedup.record_count() == 8);

    auto third = dedup.on_store(content, sink.sink());
    int deduped3 = 0;
    for (const StorePlacement& p : third)
        if (p.deduped) deduped3++;
    CHECK(deduped3 == 8);
    // zero new chunks stored for the third copy
    CHECK(sink.chunks_stored == stored_after_first + 7);
    CHECK(dedup.bijection_holds());
}

TEST_CASE("two copies of identical data occupy two physical copies of the tail chunks") {
    MemStore store;
    SharedExtents dedup(store);
    SinkState sink;
    std::mt19937_64 rng(3);
    Bytes content = file_of(rng, 32 * 1024); // 4 chunks
    auto a = dedup.on_store(content, sink.sink());
    auto b = dedup.on_store(content, sink.sink());
    // chunk 0 shared; chunks 1..3 physically duplicated
    CHECK(a[0].extent == b[0].extent);
    for (int i = 1; i < 4; i++) {
        CHECK_FALSE(a[static_cast<std::size_t>(i)].extent ==
                    b[static_cast<std::size_t>(i)].extent);
    }
}

TEST_CASE("short tail chunks are not deduplication targets") {
    MemStore store;
    SharedExtents dedup(store);
    SinkState sink;
    std::mt19937_64 rng(4);
    Bytes content = file_of(rng, 8192 + 1000); // one full chunk + tail
    dedup.on_store(content, sink.sink());
    dedup.on_store(content, sink.sink());
    auto third = dedup.on_store(content, sink.sink());
    CHECK(third[0].deduped);
    CHECK_FALSE(third[1].deduped);
    // the tail was never fingerprinted: records exist for chunk 0 only
    CHECK(dedup.record_count() == 1);
}

TEST_CASE("deleting one of several copies decrements the refcount only") {
    MemStore store;
    SharedExtents dedup(store);
    SinkState sink;
    std::mt19937_64 rng(5);
    Bytes content = file_of(rng, 16 * 1024);
    dedup.on_store(content, sink.sink());
    dedup.on_store(content, sink.sink());
    dedup.on_store(content, sink.sink());
    auto rec = dedup.find_by_fingerprint(
        fingerprint_chunk(ByteView(content.data(), kDedupChunkBytes)));
    REQUIRE(rec.has_value());
    CHECK(rec->refcount == 3);

    DeleteAction act = dedup.on_delete_extent(rec->extent);
    CHECK(act == DeleteAction::refcount_decremented);
    CHECK(dedup.invalidation_backlog() == 0);
    rec = dedup.find_by_fingerprint(rec->fingerprint);
    REQUIRE(rec.has_value());
    CHECK(rec->refcount == 2);

    dedup.on_delete_extent(rec->extent);
    DeleteAction last = dedup.on_delete_extent(rec->extent);
    CHECK(last == DeleteAction::physically_invalidated);
    CHECK(dedup.invalidation_backlog() == 1);
    // both records gone
    CHECK_FALSE(dedup.find_by_fingerprint(rec->fingerprint).has_value());
    CHECK_FALSE(dedup.find_by_extent(rec->extent.segment_id, rec->extent.logical_block)
                    .has_value());
    CHECK(dedup.bijection_holds());
}

TEST_CASE("deleting a never-deduplicated extent invalidates directly") {
    MemStore store;
    SharedExtents dedup(store);
    RawExtentRec plain{99, 10, 2};
    CHECK(dedup.on_delete_extent(plain) == DeleteAction::physically_invalidated);
    CHECK(dedup.invalidation_backlog() == 1);
    std::vector<RawExtentRec> invalidated;
    dedup.set_physical_invalidation_hook(
        [&](const RawExtentRec& e) { invalidated.push_back(e); });
    CHECK(dedup.process_invalidations(8) == 1);
    REQUIRE(invalidated.size() == 1);
    CHECK(invalidated[0] == plain);
    // empty queue tick: no work
    CHECK(dedup.process_invalidations(8) == 0);
}

TEST_CASE("a record revived before the tick is decremented instead of invalidated") {
    MemStore store;
    SharedExtents dedup(store);
    SinkState sink;
    std::mt19937_64 rng(6);
    Bytes content = file_of(rng, 8192); // exactly one chunk
    Fingerprint fp = fingerprint_chunk(content);
    RawExtentRec extent{41, 0, 2};
    dedup.register_extent(fp, extent);

    // last reference dropped: records removed, physical invalidation queued
    CHECK(dedup.on_delete_extent(extent) == DeleteAction::physically_invalidated);
    CHECK(dedup.invalidation_backlog() == 1);

    // a racing store revives the extent and a second copy references it
    dedup.register_extent(fp, extent);
    auto replay = dedup.on_store(content, sink.sink());
    REQUIRE(replay.size() == 1);
    CHECK(replay[0].deduped);
    CHECK(dedup.find_by_fingerprint(fp)->refcount == 2);

    std::vector<RawExtentRec> invalidated;
    dedup.set_physical_invalidation_hook(
        [&](const RawExtentRec& e) { invalidated.push_back(e); });
    dedup.process_invalidations(4);
    // the queued entry decremented the revived record instead of nuking it
    CHECK(invalidated.empty());
    auto rec = dedup.find_by_fingerprint(fp);
    REQUIRE(rec.has_value());
    CHECK(rec->refcount == 1);
    CHECK(dedup.bijection_holds());
}

TEST_CASE("drained queue leaves no dangling reverse records") {
    MemStore store;
    SharedExtents dedup(store);
    SinkState sink;
    std::mt19937_64 rng(7);
    std::vector<Bytes> files;
    for (int i = 0; i < 10; i++) files.push_back(file_of(rng, 8192 * (1 + rng() % 4)));
    for (const Bytes& f : files) dedup.on_store(f, sink.sink());
    for (const Bytes& f : files) dedup.on_store(f, sink.sink());
    CHECK(dedup.bijection_holds());
    // delete every first-chunk extent twice
    for (const Bytes& f : files) {
        Fingerprint fp = fingerprint_chunk(ByteView(f.data(), kDedupChunkBytes));
        auto rec = dedup.find_by_fingerprint(fp);
        REQUIRE(rec.has_value());
        dedup.on_delete_extent(rec->extent);
        dedup.on_delete_extent(rec->extent);
    }
    while (dedup.invalidation_backlog() > 0) dedup.process_invalidations(3);
    CHECK(dedup.bijection_holds());
}

TEST_CASE("records persist through flush and load") {
    MemStore store;
    Bytes blob;
    Fingerprint fp;
    RawExtentRec extent{40, 4, 2};
    {
        SharedExtents dedup(store);
        SinkState sink;
        std::mt19937_64 rng(8);
        Bytes content = file_of(rng, 24 * 1024);
        dedup.on_store(content, sink.sink());
        dedup.on_store(content, sink.sink());
        fp = fingerprint_chunk(ByteView(content.data(), kDedupChunkBytes));
        dedup.on_delete_extent(RawExtentRec{99, 0, 1}); // leaves a queue entry
        blob = dedup.flush();
    }
    auto loaded = SharedExtents::load(store, blob);
    auto rec = loaded->find_by_fingerprint(fp);
    REQUIRE(rec.has_value());
    CHECK(rec->refcount == 2);
    CHECK(loaded->invalidation_backlog() == 1);
    CHECK(loaded->bijection_holds());
}
