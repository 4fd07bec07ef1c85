#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "ssdfs/bytes.hpp"
#include "ssdfs/layout.hpp"

namespace ssdfs {

enum class NodeKind : std::uint8_t { index = 0, hybrid = 1, leaf = 2 };

const char* node_kind_name(NodeKind k);

struct LogicalExtent {
    std::uint64_t seg = kNoSegment;
    std::uint32_t block = 0;
    std::uint32_t len = 0; // blocks

    bool valid() const { return seg != kNoSegment; }
    bool operator==(const LogicalExtent&) const = default;
};

// Where b-tree nodes live. The volume routes this through the current
// segments of the matching node type; tests may supply an in-memory store.
class NodeStorage {
public:
    virtual ~NodeStorage() = default;
    virtual LogicalExtent allocate(NodeKind kind, std::uint32_t bytes) = 0;
    virtual void write(const LogicalExtent& extent, ByteView image, bool first_write) = 0;
    virtual Bytes read(const LogicalExtent& extent) = 0;
    // Physically invalidates the extent's blocks (delayed, via the queue).
    virtual void invalidate(const LogicalExtent& extent) = 0;
    // Releases a pre-allocated node's blocks while the extent reservation
    // stays with the tree.
    virtual void release(const LogicalExtent& extent) = 0;
};

struct TreeConfig {
    std::uint32_t item_size = 0;
    std::uint32_t node_size = 8192;
    std::uint16_t initial_hybrid_index_capacity = 16;
    std::uint8_t tree_kind = 0; // stamped into node images
    // Trees whose embedded root lives in a 64-byte inode slot cannot hold
    // inline data records; their first item goes straight to a hybrid node.
    bool allow_root_inline = true;
};

constexpr std::uint32_t kIndexRecordSize = 28;

struct NodeInfo {
    NodeKind kind = NodeKind::leaf;
    std::uint32_t height = 0;
    std::uint16_t index_count = 0;
    std::uint16_t index_capacity = 0;
    std::uint32_t item_count = 0;
    bool preallocated = false;
};

struct InvalidationEntry {
    LogicalExtent extent;
    NodeKind kind = NodeKind::leaf; // leaf entries do not recurse
    bool emit_items = false;        // feed stored items to the item hook
    std::uint64_t enqueued_at = 0;
};

// Hybrid b-tree: leaf nodes hold items, index nodes hold child records, and
// hybrid nodes hold both, the data area acting as a staging buffer for new
// items until a leaf's worth accumulates. The embedded root carries two
// records, either two child records or two inline items.
class BTree {
public:
    BTree(TreeConfig cfg, NodeStorage& storage,
          std::function<std::uint64_t(ByteView)> key_of);

    // Rebuilds a tree from its embedded root image: child nodes load from
    // storage on materialization; pre-allocated children stay unmaterialized.
    static std::unique_ptr<BTree> load(TreeConfig cfg, NodeStorage& storage,
                                       std::function<std::uint64_t(ByteView)> key_of,
                                       const RootNodeImage& root);

    void insert(std::uint64_t key, ByteView item);
    std::optional<Bytes> lookup(std::uint64_t key) const;
    Bytes remove(std::uint64_t key);
    void update(std::uint64_t key, ByteView item);

    std::uint64_t size() const { return total_items_; }
    bool empty() const { return total_items_ == 0; }

    void for_each(const std::function<void(std::uint64_t, ByteView)>& fn) const;
    std::optional<std::uint64_t> min_key() const;
    std::optional<std::uint64_t> first_missing_key_from(std::uint64_t start) const;

    // Flushes dirty nodes bottom-up and returns the embedded root image.
    RootNodeImage flush();
    RootNodeImage root_image() const;

    // Delayed invalidation of detached nodes/subtrees.
    void enqueue_invalidation(const LogicalExtent& extent, NodeKind kind, bool emit_items = false);
    std::size_t process_invalidation(std::uint32_t max_items);
    std::size_t invalidation_backlog() const { return invalidation_queue_.size(); }

    // Called once per stored item of every node drained from the
    // invalidation queue (extent records of a detached file, for example).
    void set_invalidation_item_hook(std::function<void(ByteView)> hook) {
        item_hook_ = std::move(hook);
    }

    // Tears the whole tree down into the invalidation queue (file delete).
    void destroy_into_queue();

    // Per-slot lock bitmap of the node currently holding the key.
    bool try_lock_slot(std::uint64_t key);
    void unlock_slot(std::uint64_t key);

    // Consistency audit: kind constraints, key ordering, child intervals,
    // capacity accounting. Throws on violation.
    void audit() const;

    // Introspection for structural tests.
    std::vector<NodeInfo> nodes_in_key_order() const;
    std::uint32_t root_record_count() const;
    std::uint32_t root_inline_count() const;
    std::uint32_t height() const;
    std::uint32_t node_count() const;

    const TreeConfig& config() const { return cfg_; }

    std::uint32_t leaf_item_capacity() const { return cfg_.node_size / cfg_.item_size; }
    std::uint32_t index_node_capacity() const { return cfg_.node_size / kIndexRecordSize; }
    std::uint32_t hybrid_data_capacity(std::uint16_t index_capacity) const {
        std::uint64_t used = static_cast<std::uint64_t>(index_capacity) * kIndexRecordSize;
        if (used >= cfg_.node_size) return 0;
        return static_cast<std::uint32_t>((cfg_.node_size - used) / cfg_.item_size);
    }

private:
    struct IndexRec {
        std::uint64_t key = 0;
        std::uint32_t child = 0; // node id; ~0u when only an extent is known
        LogicalExtent extent;
        NodeKind child_kind = NodeKind::leaf;
        bool preallocated = false;
    };

    struct Node {
        NodeKind kind = NodeKind::hybrid;
        std::uint32_t height = 0; // leaves at 0
        std::uint16_t index_capacity = 0;
        std::vector<IndexRec> index;
        std::vector<Bytes> items; // sorted by key
        std::vector<bool> dirty_slots;
        std::vector<bool> lock_slots;
        LogicalExtent extent;
        bool preallocated = false;
        bool dirty = true;
        bool materialized = true;
    };

    enum class OverflowKind { none, split, append };
    struct InsertOutcome {
        OverflowKind overflow = OverflowKind::none;
        std::uint32_t new_node = 0;
        std::uint64_t new_key = 0;
    };

    std::uint32_t new_node(NodeKind kind, std::uint32_t height) const;
    Node& node(std::uint32_t id) const { return *nodes_[id]; }
    void materialize(IndexRec& rec) const;

    std::uint64_t key_at(const Node& n, std::size_t i) const { return key_of_(n.items[i]); }
    std::size_t lower_bound_item(const Node& n, std::uint64_t key) const;
    std::size_t child_for(const Node& n, std::uint64_t key) const;

    InsertOutcome insert_into(std::uint32_t id, std::uint64_t key, ByteView item, bool right_edge);
    InsertOutcome stage_into_hybrid(std::uint32_t id, std::uint64_t key, ByteView item,
                                    bool right_edge);
    void insert_item_sorted(Node& n, std::uint64_t key, ByteView item);
    std::uint32_t data_capacity(const Node& n) const;
    void flush_staging_to_leaf(std::uint32_t id);
    void add_index_record(std::uint32_t id, IndexRec rec);
    void maybe_convert_to_index(std::uint32_t id);
    InsertOutcome split_node(std::uint32_t id);

    std::size_t child_for_root(std::uint64_t key) const;
    void grow_root_level();
    void handle_root_overflow(std::uint64_t key, ByteView item, InsertOutcome outcome);
    void transform_case_c(std::uint64_t key, ByteView item);

    void maybe_demote_index(std::uint32_t id);
    void collapse_if_empty();

    Node* find_holder(std::uint64_t key, std::size_t* slot) const;

    void flush_node(std::uint32_t id);
    Bytes serialize_node(const Node& n) const;
    std::uint32_t load_node_from(ByteView image) const;

    void audit_node(std::uint32_t id, std::uint64_t lo, bool has_lo, std::uint64_t hi,
                    bool has_hi) const;
    void collect_nodes(std::uint32_t id, std::vector<NodeInfo>& out) const;
    void for_each_node(std::uint32_t id,
                       const std::function<void(std::uint64_t, ByteView)>& fn) const;

    TreeConfig cfg_;
    NodeStorage& storage_;
    std::function<std::uint64_t(ByteView)> key_of_;

    mutable std::vector<std::unique_ptr<Node>> nodes_;
    // Root state: either inline items (root-only) or 1-2 child records.
    std::vector<Bytes> root_items_;
    std::vector<IndexRec> root_records_;
    std::uint32_t tree_height_ = 0; // 0 = root-only
    std::uint64_t total_items_ = 0;

    std::deque<InvalidationEntry> invalidation_queue_;
    std::uint64_t invalidation_clock_ = 0;
    std::function<void(ByteView)> item_hook_;
};

} // namespace ssdfs
