#include <doctest.h>

#include <map>
#include <random>

#include "ssdfs/shared_dict.hpp"

using namespace ssdfs;

namespace {

class MemStore : public NodeStorage {
public:
    LogicalExtent allocate(NodeKind, std::uint32_t bytes) override {
        LogicalExtent e;
        e.seg = 9;
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

std::string random_name(std::mt19937_64& rng, std::size_t len) {
    static const char alphabet[] = "abcdefghijklmnopqrstuvwxyz_0123456789";
    std::string s;
    for (std::size_t i = 0; i < len; i++) s += alphabet[rng() % (sizeof(alphabet) - 1)];
    return s;
}

} // namespace

TEST_CASE("inserting the same name twice stores one copy") {
    SharedDictionary dict;
    std::uint64_t h1 = dict.insert_name("quarterly_report_2024_final");
    std::uint64_t bytes_after_first = dict.stored_string_bytes();
    std::uint64_t h2 = dict.insert_name("quarterly_report_2024_final");
    CHECK(h1 == h2);
    CHECK(dict.stored_string_bytes() == bytes_after_first);
    CHECK(dict.name_count() == 1);
}

TEST_CASE("shared prefixes are stored once") {
    SharedDictionary dict;
    std::string a = "project_report_2020_final_version";
    std::string b = "project_report_2021_draft_version";
    dict.insert_name(a);
    dict.insert_name(b);
    CHECK(dict.stored_string_bytes() < a.size() + b.size());
    CHECK(dict.resolve_name(fnv1a64(a)) == a);
    CHECK(dict.resolve_name(fnv1a64(b)) == b);
}

TEST_CASE("first long name seeds a full-name group") {
    SharedDictionary dict;
    dict.insert_name("completely_unique_name");
    auto view = dict.node_view(0);
    REQUIRE(view.table2.size() == 1);
    CHECK(view.table2[0].dedup_names_count == 1);
    REQUIRE(view.hash_table.size() == 1);
    CHECK(view.hash_table[0].name_type == DictNameType::full_name);
}

TEST_CASE("unknown hash resolves to nothing") {
    SharedDictionary dict;
    dict.insert_name("some_long_file_name_here");
    CHECK_FALSE(dict.resolve_name(0xDEADBEEF).has_value());
}

TEST_CASE("round-trip fuzz: 1000 random names 13..255 bytes") {
    SharedDictionary dict;
    std::mt19937_64 rng(77);
    std::vector<std::string> names;
    for (int i = 0; i < 1000; i++) {
        std::string name = random_name(rng, 13 + rng() % 243);
        names.push_back(name);
        dict.insert_name(name);
    }
    for (const std::string& name : names) {
        auto got = dict.resolve_name(fnv1a64(name), name.size());
        REQUIRE(got.has_value());
        CHECK(*got == name);
    }
}

TEST_CASE("idempotent insert keeps the strings area size invariant") {
    SharedDictionary dict;
    std::mt19937_64 rng(78);
    std::vector<std::string> names;
    for (int i = 0; i < 200; i++) {
        names.push_back(random_name(rng, 13 + rng() % 50));
        dict.insert_name(names.back());
    }
    std::uint64_t bytes = dict.stored_string_bytes();
    std::uint64_t count = dict.name_count();
    for (const std::string& name : names) dict.insert_name(name);
    CHECK(dict.stored_string_bytes() == bytes);
    CHECK(dict.name_count() == count);
}

TEST_CASE("lookup table1 never exceeds 20 items and groups partition table2") {
    SharedDictionary dict;
    std::mt19937_64 rng(79);
    for (int i = 0; i < 500; i++) dict.insert_name(random_name(rng, 14 + rng() % 40));
    for (std::size_t n = 0; n < dict.node_count(); n++) {
        auto view = dict.node_view(n);
        CHECK(view.table1.size() <= kDictLookupTable1Items);
        std::size_t covered = 0;
        for (const LookupTable1Item& t1 : view.table1) {
            CHECK(t1.start_index == covered);
            covered += t1.group_count;
        }
        CHECK(covered == view.table2.size());
        std::size_t members = 0;
        for (const LookupTable2Item& t2 : view.table2) {
            CHECK(t2.hash_table_index == members);
            members += t2.dedup_names_count;
        }
        CHECK(members == view.hash_table.size());
    }
}

TEST_CASE("monotone growth: operations never shrink strings or tables") {
    SharedDictionary dict;
    std::mt19937_64 rng(80);
    std::uint64_t prev_bytes = 0;
    std::uint64_t prev_names = 0;
    for (int i = 0; i < 300; i++) {
        if (rng() % 3 == 0 && prev_names > 0) {
            dict.insert_name("fixed_replay_name_number_" + std::to_string(rng() % 20));
        } else {
            dict.insert_name(random_name(rng, 13 + rng() % 30));
        }
        CHECK(dict.stored_string_bytes() >= prev_bytes);
        CHECK(dict.name_count() >= prev_names);
        prev_bytes = dict.stored_string_bytes();
        prev_names = dict.name_count();
    }
}

TEST_CASE("dictionary persists through node storage and reloads") {
    MemStore store;
    Bytes root;
    std::vector<std::string> names;
    {
        SharedDictionary dict;
        std::mt19937_64 rng(81);
        for (int i = 0; i < 300; i++) {
            names.push_back(random_name(rng, 13 + rng() % 60));
            dict.insert_name(names.back());
        }
        root = dict.flush(store);
    }
    SharedDictionary loaded = SharedDictionary::load(store, root);
    for (const std::string& name : names) {
        auto got = loaded.resolve_name(fnv1a64(name), name.size());
        REQUIRE(got.has_value());
        CHECK(*got == name);
    }
    std::uint64_t bytes = loaded.stored_string_bytes();
    loaded.insert_name(names.front());
    CHECK(loaded.stored_string_bytes() == bytes);
}

TEST_CASE("node encode is parse-stable") {
    SharedDictionary dict;
    dict.insert_name("some_prefix_shared_alpha");
    dict.insert_name("some_prefix_shared_beta");
    dict.insert_name("wholly_different_name");
    MemStore store;
    Bytes root = dict.flush(store);
    SharedDictionary loaded = SharedDictionary::load(store, root);
    REQUIRE(loaded.node_count() == dict.node_count());
    CHECK(loaded.encode_node(0) == dict.encode_node(0));
}
