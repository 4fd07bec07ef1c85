#include "ssdfs/shared_dict.hpp"

#include <algorithm>

namespace ssdfs {

namespace {
constexpr std::uint32_t kDictNodeMagic = 0x54434944; // "DICT"

std::size_t common_prefix(const std::string& a, const std::string& b) {
    std::size_t n = std::min(a.size(), b.size());
    std::size_t i = 0;
    while (i < n && a[i] == b[i]) i++;
    return i;
}
} // namespace

std::string SharedDictionary::member_name(const Node& node, const Group& g, const Member& m) const {
    std::string suffix(node.strings.begin() + m.name_offset,
                       node.strings.begin() + m.name_offset + m.name_len);
    if (m.type == DictNameType::full_name) return suffix;
    // prefix bytes live once, at the head of the seed's full name
    const Member& seed = g.members.front();
    std::string prefix(node.strings.begin() + seed.name_offset,
                       node.strings.begin() + seed.name_offset + g.prefix_len);
    return prefix + suffix;
}

std::uint32_t SharedDictionary::node_bytes(const Node& node) const {
    std::uint32_t groups = 0, members = 0;
    for (const Group& g : node.groups) {
        groups++;
        members += static_cast<std::uint32_t>(g.members.size());
    }
    // header/table1 + table2 + hash table + strings
    return 16 + kDictLookupTable1Items * 12 + groups * 14 + members * 15 +
           static_cast<std::uint32_t>(node.strings.size());
}

std::uint64_t SharedDictionary::insert_name(const std::string& name) {
    std::uint64_t hash = fnv1a64(name);

    // idempotent: an existing byte-identical name wins
    auto [lo, hi] = index_.equal_range(hash);
    for (auto it = lo; it != hi; ++it) {
        const auto& ref = it->second;
        const Node& node = nodes_[ref[0]];
        const Group& group = node.groups[ref[1]];
        if (member_name(node, group, group.members[ref[2]]) == name) return hash;
    }

    // join a prefix group: full prefix match, threshold respected
    for (std::size_t n = 0; n < nodes_.size(); n++) {
        Node& node = nodes_[n];
        if (node_bytes(node) + name.size() + 15 > kDictNodeSize) continue;
        for (std::size_t g = 0; g < node.groups.size(); g++) {
            Group& group = node.groups[g];
            const Member& seed = group.members.front();
            std::string seed_name = member_name(node, group, seed);
            std::uint16_t prefix_len = group.prefix_len;
            if (prefix_len > 0) {
                if (common_prefix(seed_name.substr(0, prefix_len), name) != prefix_len) continue;
            } else {
                std::size_t lcp = common_prefix(seed_name, name);
                if (lcp < kDictPrefixThreshold) continue;
                prefix_len = static_cast<std::uint16_t>(lcp);
            }
            group.prefix_len = prefix_len;
            Member m;
            m.hash = hash;
            m.type = DictNameType::suffix;
            m.name_offset = static_cast<std::uint32_t>(node.strings.size());
            m.name_len = static_cast<std::uint16_t>(name.size() - prefix_len);
            node.strings.insert(node.strings.end(), name.begin() + prefix_len, name.end());
            group.members.push_back(m);
            node.dirty = true;
            index_.insert({hash,
                           {static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(g),
                            static_cast<std::uint32_t>(group.members.size() - 1)}});
            return hash;
        }
    }

    // seed a new group in the first node with room
    std::size_t target = nodes_.size();
    for (std::size_t n = 0; n < nodes_.size(); n++) {
        if (node_bytes(nodes_[n]) + name.size() + 15 + 14 <= kDictNodeSize) {
            target = n;
            break;
        }
    }
    if (target == nodes_.size()) nodes_.emplace_back();
    Node& node = nodes_[target];
    Group group;
    group.seed_hash = hash;
    group.prefix_len = 0;
    Member m;
    m.hash = hash;
    m.type = DictNameType::full_name;
    m.name_offset = static_cast<std::uint32_t>(node.strings.size());
    m.name_len = static_cast<std::uint16_t>(name.size());
    node.strings.insert(node.strings.end(), name.begin(), name.end());
    group.members.push_back(m);
    node.groups.push_back(std::move(group));
    node.dirty = true;
    index_.insert({hash,
                   {static_cast<std::uint32_t>(target),
                    static_cast<std::uint32_t>(node.groups.size() - 1), 0}});
    return hash;
}

std::optional<std::string> SharedDictionary::resolve_name(
    std::uint64_t name_hash, std::optional<std::size_t> expected_len) const {
    auto [lo, hi] = index_.equal_range(name_hash);
    for (auto it = lo; it != hi; ++it) {
        const auto& ref = it->second;
        const Node& node = nodes_[ref[0]];
        const Group& group = node.groups[ref[1]];
        std::string name = member_name(node, group, group.members[ref[2]]);
        if (!expected_len || name.size() == *expected_len) return name;
    }
    return std::nullopt;
}

std::uint64_t SharedDictionary::stored_string_bytes() const {
    std::uint64_t total = 0;
    for (const Node& n : nodes_) total += n.strings.size();
    return total;
}

std::uint64_t SharedDictionary::name_count() const { return index_.size(); }

SharedDictionary::NodeView SharedDictionary::node_view(std::size_t node_idx) const {
    const Node& node = nodes_.at(node_idx);
    NodeView view;
    view.strings_bytes = static_cast<std::uint32_t>(node.strings.size());
    std::uint16_t ht_index = 0;
    for (const Group& g : node.groups) {
        LookupTable2Item t2;
        t2.hash = g.seed_hash;
        t2.prefix_len = g.prefix_len;
        t2.dedup_names_count = static_cast<std::uint16_t>(g.members.size());
        t2.hash_table_index = ht_index;
        view.table2.push_back(t2);
        for (const Member& m : g.members) {
            HashTableItem item;
            item.hash = m.hash;
            item.name_offset = m.name_offset;
            item.name_len = m.name_len;
            item.name_type = m.type;
            view.hash_table.push_back(item);
            ht_index++;
        }
    }
    // table1 clusters the table2 groups, at most kDictLookupTable1Items rows
    std::size_t groups = view.table2.size();
    if (groups > 0) {
        std::size_t clusters = std::min<std::size_t>(groups, kDictLookupTable1Items);
        std::size_t per = (groups + clusters - 1) / clusters;
        for (std::size_t start = 0; start < groups; start += per) {
            LookupTable1Item t1;
            t1.hash = view.table2[start].hash;
            t1.start_index = static_cast<std::uint16_t>(start);
            t1.group_count = static_cast<std::uint16_t>(std::min(per, groups - start));
            view.table1.push_back(t1);
        }
    }
    return view;
}

Bytes SharedDictionary::encode_node(std::size_t node_idx) const {
    const Node& node = nodes_.at(node_idx);
    NodeView view = node_view(node_idx);
    // layout order: header + table1 on top, strings area between, the hash
    // table above lookup table2 at the bottom
    ByteWriter w;
    w.u32(kDictNodeMagic);
    w.u16(static_cast<std::uint16_t>(view.table1.size()));
    w.u16(static_cast<std::uint16_t>(view.table2.size()));
    w.u16(static_cast<std::uint16_t>(view.hash_table.size()));
    w.u32(static_cast<std::uint32_t>(node.strings.size()));
    w.u16(0);
    for (const LookupTable1Item& t1 : view.table1) {
        w.u64(t1.hash);
        w.u16(t1.start_index);
        w.u16(t1.group_count);
    }
    w.bytes(node.strings);
    for (const HashTableItem& h : view.hash_table) {
        w.u64(h.hash);
        w.u32(h.name_offset);
        w.u16(h.name_len);
        w.u8(static_cast<std::uint8_t>(h.name_type));
    }
    for (const LookupTable2Item& t2 : view.table2) {
        w.u64(t2.hash);
        w.u16(t2.prefix_len);
        w.u16(t2.dedup_names_count);
        w.u16(t2.hash_table_index);
    }
    return w.take();
}

void SharedDictionary::decode_node(ByteView image) {
    ByteReader r(image);
    if (r.u32() != kDictNodeMagic) fail(Errc::bad_magic, "dictionary node");
    std::uint16_t t1_count = r.u16();
    std::uint16_t t2_count = r.u16();
    std::uint16_t ht_count = r.u16();
    std::uint32_t strings_len = r.u32();
    r.u16();
    for (std::uint16_t i = 0; i < t1_count; i++) {
        r.u64();
        r.u16();
        r.u16();
    }
    Node node;
    node.strings = r.bytes(strings_len);
    std::vector<HashTableItem> ht(ht_count);
    for (auto& h : ht) {
        h.hash = r.u64();
        h.name_offset = r.u32();
        h.name_len = r.u16();
        h.name_type = static_cast<DictNameType>(r.u8());
    }
    for (std::uint16_t i = 0; i < t2_count; i++) {
        Group g;
        g.seed_hash = r.u64();
        g.prefix_len = r.u16();
        std::uint16_t members = r.u16();
        std::uint16_t start = r.u16();
        for (std::uint16_t m = 0; m < members; m++) {
            const HashTableItem& h = ht.at(start + m);
            Member mem;
            mem.hash = h.hash;
            mem.name_offset = h.name_offset;
            mem.name_len = h.name_len;
            mem.type = h.name_type;
            g.members.push_back(mem);
        }
        node.groups.push_back(std::move(g));
    }
    node.dirty = false;
    nodes_.push_back(std::move(node));
}

void SharedDictionary::reindex() {
    index_.clear();
    for (std::uint32_t n = 0; n < nodes_.size(); n++) {
        for (std::uint32_t g = 0; g < nodes_[n].groups.size(); g++) {
            const Group& group = nodes_[n].groups[g];
            for (std::uint32_t m = 0; m < group.members.size(); m++) {
                index_.insert({group.members[m].hash, {n, g, m}});
            }
        }
    }
}

Bytes SharedDictionary::flush(NodeStorage& storage) {
    for (std::size_t i = 0; i < nodes_.size(); i++) {
        Node& node = nodes_[i];
        if (!node.dirty && node.extent.valid()) continue;
        Bytes image = encode_node(i);
        if (!node.extent.valid()) {
            node.extent = storage.allocate(NodeKind::leaf, static_cast<std::uint32_t>(image.size()));
            storage.write(node.extent, image, true);
        } else {
            storage.write(node.extent, image, false);
        }
        node.dirty = false;
    }
    ByteWriter w;
    w.u16(static_cast<std::uint16_t>(nodes_.size()));
    for (const Node& node : nodes_) {
        w.u64(node.extent.seg);
        w.u32(node.extent.block);
        w.u32(node.extent.len);
    }
    return w.take();
}

SharedDictionary SharedDictionary::load(NodeStorage& storage, ByteView root_blob) {
    SharedDictionary dict;
    ByteReader r(root_blob);
    std::uint16_t count = r.u16();
    for (std::uint16_t i = 0; i < count; i++) {
        LogicalExtent e;
        e.seg = r.u64();
        e.block = r.u32();
        e.len = r.u32();
        Bytes image = storage.read(e);
        dict.decode_node(image);
        dict.nodes_.back().extent = e;
    }
    dict.reindex();
    return dict;
}

} // namespace ssdfs
