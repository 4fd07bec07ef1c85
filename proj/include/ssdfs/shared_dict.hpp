#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ssdfs/btree.hpp"
#include "ssdfs/bytes.hpp"

namespace ssdfs {

constexpr std::uint32_t kDictLookupTable1Items = 20;
constexpr std::uint32_t kDictPrefixThreshold = 8; // min shared prefix bytes
constexpr std::uint32_t kDictNodeSize = 4096;

enum class DictNameType : std::uint8_t { full_name = 0, suffix = 1 };

struct LookupTable1Item {
    std::uint64_t hash = 0;     // seed hash of the first group in the cluster
    std::uint16_t start_index = 0; // into lookup table2
    std::uint16_t group_count = 0;
};

struct LookupTable2Item {
    std::uint64_t hash = 0;      // group seed hash
    std::uint16_t prefix_len = 0;
    std::uint16_t dedup_names_count = 0;
    std::uint16_t hash_table_index = 0;
};

struct HashTableItem {
    std::uint64_t hash = 0;
    std::uint32_t name_offset = 0; // into the strings area
    std::uint16_t name_len = 0;
    DictNameType name_type = DictNameType::full_name;
};

// Long-name store with prefix deduplication. Names are never deleted; a
// re-insert of an existing name is free.
class SharedDictionary {
public:
    SharedDictionary() = default;

    std::uint64_t insert_name(const std::string& name);
    std::optional<std::string> resolve_name(std::uint64_t name_hash,
                                            std::optional<std::size_t> expected_len = {}) const;

    std::uint64_t stored_string_bytes() const;
    std::uint64_t name_count() const;
    std::size_t node_count() const { return nodes_.size(); }

    struct NodeView {
        std::vector<LookupTable1Item> table1;
        std::vector<LookupTable2Item> table2;
        std::vector<HashTableItem> hash_table;
        std::uint32_t strings_bytes = 0;
    };
    NodeView node_view(std::size_t node_idx) const;

    Bytes encode_node(std::size_t node_idx) const;
    // Serializes every node through the storage and returns the compact
    // root blob (node extents) for the volume state.
    Bytes flush(NodeStorage& storage);
    static SharedDictionary load(NodeStorage& storage, ByteView root_blob);

private:
    struct Member {
        std::uint64_t hash = 0;
        std::uint32_t name_offset = 0; // suffix or full name
        std::uint16_t name_len = 0;
        DictNameType type = DictNameType::full_name;
    };
    struct Group {
        std::uint64_t seed_hash = 0;
        std::uint16_t prefix_len = 0; // 0 until a second member joins
        std::vector<Member> members;  // members[0] is the full-name seed
    };
    struct Node {
        std::vector<Group> groups;
        Bytes strings;
        LogicalExtent extent;
        bool dirty = true;
    };

    std::string member_name(const Node& node, const Group& g, const Member& m) const;
    std::uint32_t node_bytes(const Node& node) const;
    void decode_node(ByteView image);
    void reindex();

    std::vector<Node> nodes_;
    // hash -> (node, group, member) candidates
    std::multimap<std::uint64_t, std::array<std::uint32_t, 3>> index_;
};

} // namespace ssdfs
