#include "ssdfs/btree.hpp"

#include <algorithm>
#include <bit>

namespace ssdfs {

namespace {
constexpr std::uint32_t kNodeMagic = 0x444E5442; // "BTND"
constexpr std::uint32_t kNoNode = ~0u;
} // namespace

const char* node_kind_name(NodeKind k) {
    switch (k) {
        case NodeKind::index: return "index";
        case NodeKind::hybrid: return "hybrid";
        case NodeKind::leaf: return "leaf";
    }
    return "?";
}

BTree::BTree(TreeConfig cfg, NodeStorage& storage, std::function<std::uint64_t(ByteView)> key_of)
    : cfg_(cfg), storage_(storage), key_of_(std::move(key_of)) {
    if (cfg_.item_size == 0 || cfg_.item_size > cfg_.node_size)
        fail(Errc::out_of_range, "bad tree item size");
}

std::uint32_t BTree::new_node(NodeKind kind, std::uint32_t height) const {
    auto n = std::make_unique<Node>();
    n->kind = kind;
    n->height = height;
    switch (kind) {
        case NodeKind::leaf: n->index_capacity = 0; break;
        case NodeKind::index:
            n->index_capacity = static_cast<std::uint16_t>(cfg_.node_size / kIndexRecordSize);
            break;
        case NodeKind::hybrid: n->index_capacity = cfg_.initial_hybrid_index_capacity; break;
    }
    nodes_.push_back(std::move(n));
    return static_cast<std::uint32_t>(nodes_.size() - 1);
}

std::uint32_t BTree::data_capacity(const Node& n) const {
    switch (n.kind) {
        case NodeKind::leaf: return leaf_item_capacity();
        case NodeKind::index: return 0;
        case NodeKind::hybrid: return hybrid_data_capacity(n.index_capacity);
    }
    return 0;
}

std::size_t BTree::lower_bound_item(const Node& n, std::uint64_t key) const {
    std::size_t lo = 0, hi = n.items.size();
    while (lo < hi) {
        std::size_t mid = (lo + hi) / 2;
        if (key_at(n, mid) < key) lo = mid + 1;
        else hi = mid;
    }
    return lo;
}

std::size_t BTree::child_for(const Node& n, std::uint64_t key) const {
    std::size_t pick = 0;
    for (std::size_t i = 0; i < n.index.size(); i++) {
        if (n.index[i].key <= key) pick = i;
        else break;
    }
    return pick;
}

void BTree::insert_item_sorted(Node& n, std::uint64_t key, ByteView item) {
    std::size_t pos = lower_bound_item(n, key);
    n.items.insert(n.items.begin() + static_cast<std::ptrdiff_t>(pos),
                   Bytes(item.begin(), item.end()));
    n.dirty = true;
    n.preallocated = false;
}

void BTree::materialize(IndexRec& rec) const {
    if (rec.child != kNoNode) return;
    if (rec.preallocated) {
        std::uint32_t id = new_node(rec.child_kind, 0);
        Node& n = node(id);
        n.preallocated = true;
        n.extent = rec.extent;
        n.dirty = false;
        rec.child = id;
        return;
    }
    Bytes image = storage_.read(rec.extent);
    std::uint32_t id = load_node_from(image);
    node(id).extent = rec.extent;
    node(id).dirty = false;
    rec.child = id;
}

// --- insertion ---------------------------------------------------------------

void BTree::insert(std::uint64_t key, ByteView item) {
    if (item.size() != cfg_.item_size) fail(Errc::invalid_length, "item size mismatch");
    if (lookup(key)) fail(Errc::duplicate_key, "key " + std::to_string(key));

    if (tree_height_ == 0) {
        if (cfg_.allow_root_inline && root_items_.size() < 2) {
            Bytes rec(item.begin(), item.end());
            auto pos = root_items_.begin();
            while (pos != root_items_.end() && key_of_(*pos) < key) ++pos;
            root_items_.insert(pos, std::move(rec));
            total_items_++;
            return;
        }
        // first on-volume node: a hybrid staging the inline items (if any)
        std::uint32_t h = new_node(NodeKind::hybrid, 1);
        for (Bytes& it : root_items_) insert_item_sorted(node(h), key_of_(it), it);
        root_items_.clear();
        insert_item_sorted(node(h), key, item);
        IndexRec rec;
        rec.key = key_at(node(h), 0);
        rec.child = h;
        rec.child_kind = NodeKind::hybrid;
        root_records_.push_back(rec);
        tree_height_ = 1;
        total_items_++;
        return;
    }

    std::size_t target = child_for_root(key);
    bool right_edge = target + 1 == root_records_.size();
    InsertOutcome out = insert_into(root_records_[target].child, key, item, right_edge);
    if (out.overflow == OverflowKind::none) {
        if (key < root_records_[target].key) root_records_[target].key = key;
        total_items_++;
        return;
    }
    handle_root_overflow(key, item, out);
    total_items_++;
}

std::size_t BTree::child_for_root(std::uint64_t key) const {
    std::size_t pick = 0;
    for (std::size_t i = 0; i < root_records_.size(); i++) {
        if (root_records_[i].key <= key) pick = i;
        else break;
    }
    materialize(const_cast<IndexRec&>(root_records_[pick]));
    return pick;
}

BTree::InsertOutcome BTree::insert_into(std::uint32_t id, std::uint64_t key, ByteView item,
                                        bool right_edge) {
    InsertOutcome ok;

    if (node(id).kind == NodeKind::leaf) {
        Node& n = node(id);
        if (n.items.size() < data_capacity(n)) {
            insert_item_sorted(n, key, item);
            return ok;
        }
        if (right_edge && key > key_at(n, n.items.size() - 1)) {
            // append beyond a full leaf on the tree's right edge: an
            // ancestor's staging buffer takes it
            InsertOutcome o;
            o.overflow = OverflowKind::append;
            o.new_key = key;
            return o;
        }
        InsertOutcome split = split_node(id);
        if (key >= split.new_key) insert_item_sorted(node(split.new_node), key, item);
        else insert_item_sorted(node(id), key, item);
        return split;
    }

    if (node(id).kind == NodeKind::hybrid) {
        Node& n = node(id);
        bool in_staging_range =
            !n.items.empty() ? key >= key_at(n, 0)
                             : (n.index.empty() || key > n.index.back().key);
        if (n.index.empty()) return stage_into_hybrid(id, key, item, right_edge);
        if (in_staging_range) {
            if (!n.items.empty()) return stage_into_hybrid(id, key, item, right_edge);
            // empty staging, key beyond children: try the rightmost child
            std::size_t last = n.index.size() - 1;
            materialize(n.index[last]);
            std::uint32_t child = n.index[last].child;
            InsertOutcome sub = insert_into(child, key, item, right_edge);
            Node& self = node(id);
            if (sub.overflow == OverflowKind::none) {
                self.dirty = true;
                return ok;
            }
            if (sub.overflow == OverflowKind::split) {
                IndexRec nr;
                nr.key = sub.new_key;
                nr.child = sub.new_node;
                nr.child_kind = node(sub.new_node).kind;
                add_index_record(id, nr);
                return ok;
            }
            return stage_into_hybrid(id, key, item, right_edge);
        }
        // descend into the covering child; the right edge stops above a
        // non-rightmost child or a non-empty staging buffer
        std::size_t c = child_for(n, key);
        bool child_edge = right_edge && c + 1 == n.index.size() && n.items.empty();
        materialize(n.index[c]);
        std::uint32_t child = n.index[c].child;
        if (key < n.index[c].key) n.index[c].key = key;
        InsertOutcome sub = insert_into(child, key, item, child_edge);
        Node& self = node(id);
        if (sub.overflow == OverflowKind::none) {
            self.dirty = true;
            return ok;
        }
        if (sub.overflow == OverflowKind::split) {
            IndexRec nr;
            nr.key = sub.new_key;
            nr.child = sub.new_node;
            nr.child_kind = node(sub.new_node).kind;
            add_index_record(id, nr);
            return ok;
        }
        return stage_into_hybrid(id, key, item, right_edge);
    }

    // index node
    {
        Node& n = node(id);
        if (n.index.empty()) fail(Errc::lost_base, "index node without children");
        std::size_t c = child_for(n, key);
        bool rightmost = c + 1 == n.index.size();
        materialize(n.index[c]);
        std::uint32_t child = n.index[c].child;
        if (key < n.index[c].key) n.index[c].key = key;
        InsertOutcome sub = insert_into(child, key, item, right_edge && rightmost);
        Node& self = node(id);
        if (sub.overflow == OverflowKind::none) {
            self.dirty = true;
            return ok;
        }
        if (sub.overflow == OverflowKind::append) {
            if (self.index.size() < index_node_capacity()) {
                // a fresh leaf continues the right edge of this branch
                std::uint32_t leaf = new_node(NodeKind::leaf, 0);
                insert_item_sorted(node(leaf), key, item);
                IndexRec nr;
                nr.key = key;
                nr.child = leaf;
                nr.child_kind = NodeKind::leaf;
                add_index_record(id, nr);
                return ok;
            }
            InsertOutcome o;
            o.overflow = OverflowKind::append;
            o.new_key = key;
            return o;
        }
        // split from a child
        if (self.index.size() < index_node_capacity()) {
            IndexRec nr;
            nr.key = sub.new_key;
            nr.child = sub.new_node;
            nr.child_kind = node(sub.new_node).kind;
            add_index_record(id, nr);
            return ok;
        }
        InsertOutcome split = split_node(id);
        std::uint32_t target = sub.new_key >= split.new_key ? split.new_node : id;
        IndexRec nr;
        nr.key = sub.new_key;
        nr.child = sub.new_node;
        nr.child_kind = node(sub.new_node).kind;
        add_index_record(target, nr);
        return split;
    }
}

BTree::InsertOutcome BTree::stage_into_hybrid(std::uint32_t id, std::uint64_t key, ByteView item,
                                              bool right_edge) {
    InsertOutcome ok;
    if (node(id).items.size() < data_capacity(node(id))) {
        insert_item_sorted(node(id), key, item);
        return ok;
    }
    if (node(id).index.empty()) {
        // pure staging hybrid exhausted
        Node& n = node(id);
        if (right_edge && key > key_at(n, n.items.size() - 1)) {
            // the parent decides: add a sibling or transform the level
            InsertOutcome o;
            o.overflow = OverflowKind::append;
            o.new_key = key;
            return o;
        }
        InsertOutcome split = split_node(id);
        if (key >= split.new_key) insert_item_sorted(node(split.new_node), key, item);
        else insert_item_sorted(node(id), key, item);
        return split;
    }
    // staging exhausted: move the buffered run out, then continue in the
    // freshly created rightmost child
    if (node(id).height <= 1) {
        flush_staging_to_leaf(id);
    } else {
        std::uint32_t h = new_node(NodeKind::hybrid, node(id).height - 1);
        for (Bytes& it : node(id).items) insert_item_sorted(node(h), key_of_(it), it);
        node(id).items.clear();
        node(id).dirty_slots.clear();
        IndexRec nr;
        nr.key = key_at(node(h), 0);
        nr.child = h;
        nr.child_kind = NodeKind::hybrid;
        add_index_record(id, nr);
    }
    Node& after = node(id);
    if (after.index.empty()) fail(Errc::lost_base, "staging flush produced no child");
    materialize(after.index.back());
    InsertOutcome sub = insert_into(after.index.back().child, key, item, right_edge);
    if (sub.overflow == OverflowKind::none) return ok;
    if (sub.overflow == OverflowKind::split) {
        IndexRec nr;
        nr.key = sub.new_key;
        nr.child = sub.new_node;
        nr.child_kind = node(sub.new_node).kind;
        add_index_record(id, nr);
        return ok;
    }
    InsertOutcome o;
    o.overflow = OverflowKind::append;
    o.new_key = key;
    return o;
}

void BTree::flush_staging_to_leaf(std::uint32_t id) {
    std::uint32_t leaf = new_node(NodeKind::leaf, 0);
    Node& l = node(leaf);
    l.items = std::move(node(id).items);
    node(id).items.clear();
    node(id).dirty_slots.clear();
    l.dirty = true;
    IndexRec rec;
    rec.key = key_at(l, 0);
    rec.child = leaf;
    rec.child_kind = NodeKind::leaf;
    add_index_record(id, rec);
}

void BTree::add_index_record(std::uint32_t id, IndexRec rec) {
    Node& n = node(id);
    auto pos = n.index.begin();
    while (pos != n.index.end() && pos->key < rec.key) ++pos;
    n.index.insert(pos, rec);
    n.dirty = true;
    if (n.kind == NodeKind::hybrid && n.index.size() > n.index_capacity) {
        while (n.index.size() > n.index_capacity) {
            std::uint32_t doubled = static_cast<std::uint32_t>(n.index_capacity) * 2;
            if (doubled * kIndexRecordSize >= cfg_.node_size) {
                maybe_convert_to_index(id);
                return;
            }
            n.index_capacity = static_cast<std::uint16_t>(doubled);
        }
        // index growth shrank the data area; evict staged items that no
        // longer fit
        if (node(id).items.size() > data_capacity(node(id)) && !node(id).items.empty()) {
            if (node(id).height <= 1) {
                flush_staging_to_leaf(id);
            } else {
                std::uint32_t h = new_node(NodeKind::hybrid, node(id).height - 1);
                for (Bytes& it : node(id).items) insert_item_sorted(node(h), key_of_(it), it);
                node(id).items.clear();
                IndexRec nr;
                nr.key = key_at(node(h), 0);
                nr.child = h;
                nr.child_kind = NodeKind::hybrid;
                add_index_record(id, nr);
            }
        }
    }
    if (node(id).kind == NodeKind::index && node(id).index.size() > index_node_capacity()) {
        fail(Errc::lost_base, "index node overfilled");
    }
}

void BTree::maybe_convert_to_index(std::uint32_t id) {
    if (node(id).kind != NodeKind::hybrid) return;
    if (!node(id).items.empty()) {
        if (node(id).height <= 1) {
            flush_staging_to_leaf(id);
        } else {
            std::uint32_t h = new_node(NodeKind::hybrid, node(id).height - 1);
            for (Bytes& it : node(id).items) insert_item_sorted(node(h), key_of_(it), it);
            node(id).items.clear();
            IndexRec nr;
            nr.key = key_at(node(h), 0);
            nr.child = h;
            nr.child_kind = NodeKind::hybrid;
            Node& n = node(id);
            auto pos = n.index.begin();
            while (pos != n.index.end() && pos->key < nr.key) ++pos;
            n.index.insert(pos, nr);
        }
    }
    Node& n = node(id);
    n.kind = NodeKind::index;
    n.index_capacity = static_cast<std::uint16_t>(index_node_capacity());
    n.dirty = true;
}

BTree::InsertOutcome BTree::split_node(std::uint32_t id) {
    InsertOutcome out;
    out.overflow = OverflowKind::split;
    if (node(id).kind == NodeKind::leaf ||
        (node(id).kind == NodeKind::hybrid && node(id).index.empty())) {
        // item split; a pure staging hybrid splits like a leaf
        NodeKind kind = node(id).kind;
        std::uint32_t right = new_node(kind, node(id).height);
        Node& n = node(id);
        Node& r = node(right);
        std::size_t half = n.items.size() / 2;
        r.items.assign(n.items.begin() + static_cast<std::ptrdiff_t>(half), n.items.end());
        n.items.resize(half);
        n.dirty = r.dirty = true;
        out.new_node = right;
        out.new_key = key_at(r, 0);
        return out;
    }
    // splitting a full index node yields two hybrids
    std::uint32_t right = new_node(NodeKind::hybrid, node(id).height);
    Node& n = node(id);
    Node& r = node(right);
    std::size_t half = n.index.size() / 2;
    r.index.assign(n.index.begin() + static_cast<std::ptrdiff_t>(half), n.index.end());
    n.index.resize(half);
    std::uint16_t rcap = cfg_.initial_hybrid_index_capacity;
    while (rcap < r.index.size()) rcap = static_cast<std::uint16_t>(rcap * 2);
    r.index_capacity = rcap;
    if (n.kind == NodeKind::index) {
        n.kind = NodeKind::hybrid;
        std::uint16_t lcap = cfg_.initial_hybrid_index_capacity;
        while (lcap < n.index.size()) lcap = static_cast<std::uint16_t>(lcap * 2);
        n.index_capacity = lcap;
    }
    n.dirty = r.dirty = true;
    out.new_node = right;
    out.new_key = r.index.front().key;
    return out;
}

void BTree::grow_root_level() {
    std::uint32_t top = 0;
    for (const IndexRec& rec : root_records_)
        top = std::max(top, rec.child != kNoNode ? node(rec.child).height : 0u);
    std::uint32_t parent = new_node(NodeKind::hybrid, top + 1);
    Node& p = node(parent);
    p.index = root_records_;
    p.dirty = true;
    root_records_.clear();
    IndexRec rec;
    rec.key = p.index.front().key;
    rec.child = parent;
    rec.child_kind = NodeKind::hybrid;
    root_records_.push_back(rec);
    tree_height_++;
}

void BTree::handle_root_overflow(std::uint64_t key, ByteView item, InsertOutcome outcome) {
    if (outcome.overflow == OverflowKind::split) {
        if (root_records_.size() < 2) {
            IndexRec rec;
            rec.key = outcome.new_key;
            rec.child = outcome.new_node;
            rec.child_kind = node(outcome.new_node).kind;
            auto pos = root_records_.begin();
            while (pos != root_records_.end() && pos->key < rec.key) ++pos;
            root_records_.insert(pos, rec);
            return;
        }
        grow_root_level();
        IndexRec nr;
        nr.key = outcome.new_key;
        nr.child = outcome.new_node;
        nr.child_kind = node(outcome.new_node).kind;
        add_index_record(root_records_[0].child, nr);
        return;
    }

    // append overflow from the root child level
    if (root_records_.size() == 2) {
        materialize(root_records_[0]);
        materialize(root_records_[1]);
        Node& left = node(root_records_[0].child);
        Node& right = node(root_records_[1].child);
        bool pure_staging_pair = left.kind == NodeKind::hybrid && right.kind == NodeKind::hybrid &&
                                 left.index.empty() && right.index.empty();
        if (pure_staging_pair) {
            transform_case_c(key, item);
            return;
        }
        if (right.kind == NodeKind::hybrid && right.index.empty() && !right.items.empty()) {
            // the right branch starts growing leaves of its own
            std::uint32_t right_id = root_records_[1].child;
            flush_staging_to_leaf(right_id);
            InsertOutcome retry = insert_into(right_id, key, item, true);
            if (retry.overflow != OverflowKind::none)
                fail(Errc::storage_full, "right branch cannot grow");
            return;
        }
        grow_root_level();
        InsertOutcome retry = insert_into(root_records_[0].child, key, item, true);
        if (retry.overflow != OverflowKind::none) fail(Errc::storage_full, "tree cannot grow");
        return;
    }

    // one root child: add a right hybrid on the same level
    std::uint32_t child = root_records_[0].child;
    std::uint32_t h =
        new_node(NodeKind::hybrid, std::max<std::uint32_t>(1, node(child).height));
    insert_item_sorted(node(h), key, item);
    IndexRec rec;
    rec.key = key;
    rec.child = h;
    rec.child_kind = NodeKind::hybrid;
    root_records_.push_back(rec);
}

void BTree::transform_case_c(std::uint64_t key, ByteView item) {
    // The left hybrid turns into a leaf and takes a portion of the right
    // hybrid's records; the right hybrid gains the index record that used to
    // live in the root.
    std::uint32_t left_id = root_records_[0].child;
    std::uint32_t right_id = root_records_[1].child;
    Node& left = node(left_id);
    Node& right = node(right_id);

    left.kind = NodeKind::leaf;
    left.height = 0;
    left.index_capacity = 0;
    std::size_t room = leaf_item_capacity() - left.items.size();
    std::size_t take = std::min(right.items.size() / 2, room);
    for (std::size_t i = 0; i < take; i++) left.items.push_back(std::move(right.items[i]));
    right.items.erase(right.items.begin(), right.items.begin() + static_cast<std::ptrdiff_t>(take));
    left.dirty = right.dirty = true;

    IndexRec leaf_rec;
    leaf_rec.key = key_at(left, 0);
    leaf_rec.child = left_id;
    leaf_rec.child_kind = NodeKind::leaf;
    right.index.insert(right.index.begin(), leaf_rec);

    IndexRec root_rec;
    root_rec.key = leaf_rec.key;
    root_rec.child = right_id;
    root_rec.child_kind = NodeKind::hybrid;
    root_records_.clear();
    root_records_.push_back(root_rec);

    InsertOutcome out = insert_into(right_id, key, item, true);
    if (out.overflow != OverflowKind::none) fail(Errc::storage_full, "post-transform insert failed");
}

// --- lookup -------------------------------------------------------------------

std::optional<Bytes> BTree::lookup(std::uint64_t key) const {
    if (tree_height_ == 0) {
        for (const Bytes& it : root_items_) {
            if (key_of_(it) == key) return it;
        }
        return std::nullopt;
    }
    std::size_t slot = 0;
    Node* holder = find_holder(key, &slot);
    if (holder == nullptr || slot == static_cast<std::size_t>(-1)) return std::nullopt;
    return holder->items[slot];
}

BTree::Node* BTree::find_holder(std::uint64_t key, std::size_t* slot) const {
    *slot = static_cast<std::size_t>(-1);
    if (tree_height_ == 0 || root_records_.empty()) return nullptr;
    std::size_t pick = 0;
    for (std::size_t i = 0; i < root_records_.size(); i++) {
        if (root_records_[i].key <= key) pick = i;
    }
    const IndexRec* rec = &root_records_[pick];
    while (true) {
        if (rec->preallocated && rec->child == kNoNode) return nullptr;
        materialize(const_cast<IndexRec&>(*rec));
        Node& n = node(rec->child);
        if (n.kind == NodeKind::leaf || n.preallocated) {
            std::size_t pos = lower_bound_item(n, key);
            if (pos < n.items.size() && key_at(n, pos) == key) *slot = pos;
            return &n;
        }
        if (n.kind == NodeKind::hybrid && !n.items.empty() && key >= key_at(n, 0)) {
            std::size_t pos = lower_bound_item(n, key);
            if (pos < n.items.size() && key_at(n, pos) == key) *slot = pos;
            return &n;
        }
        if (n.index.empty()) return &n;
        rec = &n.index[child_for(n, key)];
    }
}

// --- removal ------------------------------------------------------------------

Bytes BTree::remove(std::uint64_t key) {
    if (tree_height_ == 0) {
        for (auto it = root_items_.begin(); it != root_items_.end(); ++it) {
            if (key_of_(*it) == key) {
                Bytes out = std::move(*it);
                root_items_.erase(it);
                total_items_--;
                return out;
            }
        }
        fail(Errc::key_not_found, "key " + std::to_string(key));
    }
    std::size_t slot = 0;
    Node* holder = find_holder(key, &slot);
    if (holder == nullptr || slot == static_cast<std::size_t>(-1))
        fail(Errc::key_not_found, "key " + std::to_string(key));
    Bytes out = std::move(holder->items[slot]);
    holder->items.erase(holder->items.begin() + static_cast<std::ptrdiff_t>(slot));
    holder->dirty = true;
    total_items_--;

    if (holder->items.empty() && holder->kind == NodeKind::leaf) {
        // conversion to the pre-allocated state: storage released, parent
        // index records untouched
        if (holder->extent.valid()) storage_.release(holder->extent);
        holder->preallocated = true;
        for (auto& np : nodes_) {
            for (IndexRec& rec : np->index) {
                if (rec.child != kNoNode && &node(rec.child) == holder) rec.preallocated = true;
            }
        }
        for (IndexRec& rec : root_records_) {
            if (rec.child != kNoNode && &node(rec.child) == holder) rec.preallocated = true;
        }
    }
    for (std::uint32_t id = 0; id < nodes_.size(); id++) maybe_demote_index(id);
    collapse_if_empty();
    return out;
}

void BTree::update(std::uint64_t key, ByteView item) {
    if (item.size() != cfg_.item_size) fail(Errc::invalid_length, "item size mismatch");
    if (tree_height_ == 0) {
        for (Bytes& it : root_items_) {
            if (key_of_(it) == key) {
                it.assign(item.begin(), item.end());
                return;
            }
        }
        fail(Errc::key_not_found, "key " + std::to_string(key));
    }
    std::size_t slot = 0;
    Node* holder = find_holder(key, &slot);
    if (holder == nullptr || slot == static_cast<std::size_t>(-1))
        fail(Errc::key_not_found, "key " + std::to_string(key));
    holder->items[slot].assign(item.begin(), item.end());
    holder->dirty = true;
    if (holder->dirty_slots.size() < holder->items.size())
        holder->dirty_slots.resize(holder->items.size(), false);
    holder->dirty_slots[slot] = true;
}

void BTree::maybe_demote_index(std::uint32_t id) {
    Node& n = node(id);
    if (n.kind != NodeKind::index) return;
    std::size_t live = 0;
    for (const IndexRec& rec : n.index)
        if (!rec.preallocated) live++;
    if (live * 4 >= index_node_capacity()) return;
    std::uint16_t cap = cfg_.initial_hybrid_index_capacity;
    bool fits = true;
    while (cap < n.index.size()) {
        std::uint32_t doubled = static_cast<std::uint32_t>(cap) * 2;
        if (doubled * kIndexRecordSize >= cfg_.node_size) {
            fits = false;
            break;
        }
        cap = static_cast<std::uint16_t>(doubled);
    }
    if (!fits) return;
    n.kind = NodeKind::hybrid;
    n.index_capacity = cap;
    n.dirty = true;
}

void BTree::collapse_if_empty() {
    if (total_items_ != 0 || tree_height_ == 0) return;
    std::function<void(std::uint32_t)> walk = [&](std::uint32_t id) {
        Node& n = node(id);
        for (IndexRec& rec : n.index) {
            if (rec.child != kNoNode) walk(rec.child);
            else if (rec.extent.valid() && !rec.preallocated)
                enqueue_invalidation(rec.extent, rec.child_kind);
        }
        if (n.extent.valid()) {
            if (n.preallocated) storage_.release(n.extent);
            else enqueue_invalidation(n.extent, n.kind);
        }
    };
    for (IndexRec& rec : root_records_) {
        if (rec.child != kNoNode) walk(rec.child);
        else if (rec.extent.valid() && !rec.preallocated)
            enqueue_invalidation(rec.extent, rec.child_kind);
    }
    nodes_.clear();
    root_records_.clear();
    root_items_.clear();
    tree_height_ = 0;
}

// --- traversal ----------------------------------------------------------------

void BTree::for_each_node(std::uint32_t id,
                          const std::function<void(std::uint64_t, ByteView)>& fn) const {
    const Node& n = node(id);
    for (const IndexRec& rec : n.index) {
        if (rec.preallocated && rec.child == kNoNode) continue;
        materialize(const_cast<IndexRec&>(rec));
        if (node(rec.child).preallocated) continue;
        for_each_node(rec.child, fn);
    }
    for (const Bytes& it : n.items) fn(key_of_(it), it);
}

void BTree::for_each(const std::function<void(std::uint64_t, ByteView)>& fn) const {
    for (const Bytes& it : root_items_) fn(key_of_(it), it);
    for (const IndexRec& rec : root_records_) {
        if (rec.preallocated && rec.child == kNoNode) continue;
        materialize(const_cast<IndexRec&>(rec));
        if (node(rec.child).preallocated) continue;
        for_each_node(rec.child, fn);
    }
}

std::optional<std::uint64_t> BTree::min_key() const {
    std::optional<std::uint64_t> best;
    for_each([&](std::uint64_t k, ByteView) {
        if (!best || k < *best) best = k;
    });
    return best;
}

std::optional<std::uint64_t> BTree::first_missing_key_from(std::uint64_t start) const {
    std::uint64_t expect = start;
    bool done = false;
    for_each([&](std::uint64_t k, ByteView) {
        if (done || k < start) return;
        if (k == expect) expect++;
        else done = true;
    });
    return expect;
}

// --- serialization --------------------------------------------------------------

Bytes BTree::serialize_node(const Node& n) const {
    ByteWriter w;
    w.u32(kNodeMagic);
    w.u8(static_cast<std::uint8_t>(n.kind));
    w.u8(static_cast<std::uint8_t>(n.height));
    w.u8(n.preallocated ? 1 : 0);
    w.u8(cfg_.tree_kind);
    w.u32(cfg_.item_size);
    w.u32(cfg_.node_size);
    w.u16(n.index_capacity);
    w.u16(static_cast<std::uint16_t>(n.index.size()));
    w.u16(static_cast<std::uint16_t>(n.items.size()));
    w.u16(0);
    std::uint32_t max_items = cfg_.node_size / cfg_.item_size;
    Bytes alloc((max_items + 7) / 8, 0);
    Bytes dirty((max_items + 7) / 8, 0);
    for (std::size_t i = 0; i < n.items.size(); i++)
        alloc[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    for (std::size_t i = 0; i < n.dirty_slots.size() && i < max_items; i++)
        if (n.dirty_slots[i]) dirty[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    w.bytes(alloc);
    w.bytes(dirty);
    for (const IndexRec& rec : n.index) {
        w.u64(rec.key);
        w.u64(rec.extent.seg);
        w.u32(rec.extent.block);
        w.u32(rec.extent.len);
        w.u8(static_cast<std::uint8_t>(rec.child_kind));
        w.u8(rec.preallocated ? 1 : 0);
        w.u16(0);
    }
    for (const Bytes& it : n.items) w.bytes(it);
    return w.take();
}

std::uint32_t BTree::load_node_from(ByteView image) const {
    ByteReader r(image);
    if (r.u32() != kNodeMagic) fail(Errc::bad_magic, "tree node");
    NodeKind kind = static_cast<NodeKind>(r.u8());
    std::uint8_t height = r.u8();
    bool preallocated = r.u8() != 0;
    r.u8();
    std::uint32_t item_size = r.u32();
    std::uint32_t node_size = r.u32();
    if (item_size != cfg_.item_size || node_size != cfg_.node_size)
        fail(Errc::malformed, "node geometry mismatch");
    std::uint16_t index_capacity = r.u16();
    std::uint16_t index_count = r.u16();
    std::uint16_t item_count = r.u16();
    r.u16();
    std::uint32_t max_items = cfg_.node_size / cfg_.item_size;
    r.bytes((max_items + 7) / 8);
    r.bytes((max_items + 7) / 8);

    std::uint32_t id = new_node(kind, height);
    Node& n = node(id);
    n.index_capacity = index_capacity;
    n.preallocated = preallocated;
    for (std::uint16_t i = 0; i < index_count; i++) {
        IndexRec rec;
        rec.key = r.u64();
        rec.extent.seg = r.u64();
        rec.extent.block = r.u32();
        rec.extent.len = r.u32();
        rec.child_kind = static_cast<NodeKind>(r.u8());
        rec.preallocated = r.u8() != 0;
        r.u16();
        rec.child = kNoNode;
        n.index.push_back(rec);
    }
    for (std::uint16_t i = 0; i < item_count; i++) n.items.push_back(r.bytes(cfg_.item_size));
    return id;
}

void BTree::flush_node(std::uint32_t id) {
    Node& n = node(id);
    for (IndexRec& rec : n.index) {
        if (rec.child == kNoNode) continue;
        Node& child = node(rec.child);
        if (!child.preallocated) flush_node(rec.child);
        if (child.extent.valid() && !(rec.extent == child.extent)) {
            rec.extent = child.extent;
            n.dirty = true;
        }
        if (rec.preallocated != child.preallocated || rec.child_kind != child.kind) {
            rec.preallocated = child.preallocated;
            rec.child_kind = child.kind;
            n.dirty = true;
        }
    }
    if (!n.dirty || n.preallocated) return;
    Bytes image = serialize_node(n);
    if (!n.extent.valid()) {
        n.extent = storage_.allocate(n.kind, static_cast<std::uint32_t>(image.size()));
        storage_.write(n.extent, image, true);
    } else {
        storage_.write(n.extent, image, false);
    }
    n.dirty = false;
    n.dirty_slots.assign(n.dirty_slots.size(), false);
}

RootNodeImage BTree::flush() {
    for (IndexRec& rec : root_records_) {
        if (rec.child == kNoNode) continue;
        Node& child = node(rec.child);
        if (!child.preallocated) flush_node(rec.child);
        if (child.extent.valid()) rec.extent = child.extent;
        rec.preallocated = child.preallocated;
        rec.child_kind = child.kind;
    }
    return root_image();
}

RootNodeImage BTree::root_image() const {
    RootNodeImage img;
    img.height = static_cast<std::uint8_t>(tree_height_);
    img.item_size = cfg_.item_size;
    img.inline_payload.assign(static_cast<std::size_t>(cfg_.item_size) * 2, 0);
    if (tree_height_ == 0) {
        img.item_count = static_cast<std::uint16_t>(root_items_.size());
        for (std::size_t i = 0; i < root_items_.size(); i++) {
            img.slots[i].kind = RootSlotKind::data;
            img.slots[i].key = key_of_(root_items_[i]);
            std::copy(root_items_[i].begin(), root_items_[i].end(),
                      img.inline_payload.begin() + static_cast<std::ptrdiff_t>(i * cfg_.item_size));
        }
        return img;
    }
    for (std::size_t i = 0; i < root_records_.size() && i < 2; i++) {
        const IndexRec& rec = root_records_[i];
        img.slots[i].kind = RootSlotKind::index;
        img.slots[i].key = rec.key;
        img.slots[i].child_seg = rec.extent.seg;
        img.slots[i].child_block = rec.extent.block;
        img.slots[i].child_len = rec.extent.len;
        img.slots[i].child_kind = static_cast<std::uint8_t>(rec.child_kind);
        img.slots[i].preallocated = rec.preallocated ? 1 : 0;
    }
    return img;
}

std::unique_ptr<BTree> BTree::load(TreeConfig cfg, NodeStorage& storage,
                                   std::function<std::uint64_t(ByteView)> key_of,
                                   const RootNodeImage& root) {
    auto tree = std::make_unique<BTree>(cfg, storage, std::move(key_of));
    tree->tree_height_ = root.height;
    if (root.height == 0) {
        for (std::size_t i = 0; i < root.item_count && i < 2; i++) {
            Bytes item(root.inline_payload.begin() + static_cast<std::ptrdiff_t>(i * cfg.item_size),
                       root.inline_payload.begin() +
                           static_cast<std::ptrdiff_t>((i + 1) * cfg.item_size));
            tree->root_items_.push_back(std::move(item));
        }
        tree->total_items_ = tree->root_items_.size();
        return tree;
    }
    for (const RootSlot& slot : root.slots) {
        if (slot.kind != RootSlotKind::index) continue;
        IndexRec rec;
        rec.key = slot.key;
        rec.child = kNoNode;
        rec.extent.seg = slot.child_seg;
        rec.extent.block = slot.child_block;
        rec.extent.len = slot.child_len;
        rec.child_kind = static_cast<NodeKind>(slot.child_kind);
        rec.preallocated = slot.preallocated != 0;
        tree->root_records_.push_back(rec);
    }
    std::uint64_t n = 0;
    tree->for_each([&](std::uint64_t, ByteView) { n++; });
    tree->total_items_ = n;
    return tree;
}

// --- invalidation ----------------------------------------------------------------

void BTree::enqueue_invalidation(const LogicalExtent& extent, NodeKind kind, bool emit_items) {
    if (!extent.valid()) return;
    InvalidationEntry e;
    e.extent = extent;
    e.kind = kind;
    e.emit_items = emit_items;
    e.enqueued_at = invalidation_clock_++;
    invalidation_queue_.push_back(e);
}

std::size_t BTree::process_invalidation(std::uint32_t max_items) {
    std::size_t done = 0;
    while (!invalidation_queue_.empty() && done < max_items) {
        InvalidationEntry e = invalidation_queue_.front();
        invalidation_queue_.pop_front();
        if (e.kind != NodeKind::leaf || (e.emit_items && item_hook_)) {
            Bytes image = storage_.read(e.extent);
            std::uint32_t id = load_node_from(image);
            if (e.emit_items && item_hook_) {
                for (const Bytes& it : node(id).items) item_hook_(it);
            }
            if (node(id).kind != NodeKind::leaf) {
                for (const IndexRec& rec : node(id).index) {
                    if (rec.preallocated) continue;
                    enqueue_invalidation(rec.extent, rec.child_kind, e.emit_items);
                }
            }
            nodes_.pop_back(); // transient
        }
        storage_.invalidate(e.extent);
        done++;
    }
    return done;
}

void BTree::destroy_into_queue() {
    // Unflushed state is emitted through the item hook right away; clean
    // on-volume nodes drain item-by-item from the queue later.
    std::function<void(std::uint32_t)> walk = [&](std::uint32_t id) {
        Node& n = node(id);
        for (IndexRec& rec : n.index) {
            if (rec.child != kNoNode) {
                walk(rec.child);
            } else if (rec.extent.valid()) {
                if (rec.preallocated) storage_.release(rec.extent);
                else enqueue_invalidation(rec.extent, rec.child_kind, true);
            }
        }
        if (n.extent.valid()) {
            bool clean = !n.dirty;
            if (n.preallocated) {
                storage_.release(n.extent);
            } else {
                if (!clean && item_hook_) {
                    for (const Bytes& it : n.items) item_hook_(it);
                }
                enqueue_invalidation(n.extent, NodeKind::leaf, clean);
            }
        } else if (item_hook_) {
            for (const Bytes& it : n.items) item_hook_(it);
        }
    };
    for (IndexRec& rec : root_records_) {
        if (rec.child != kNoNode) walk(rec.child);
        else if (rec.extent.valid() && !rec.preallocated)
            enqueue_invalidation(rec.extent, rec.child_kind, true);
    }
    if (item_hook_) {
        for (const Bytes& it : root_items_) item_hook_(it);
    }
    nodes_.clear();
    root_records_.clear();
    root_items_.clear();
    tree_height_ = 0;
    total_items_ = 0;
}

// --- locks ---------------------------------------------------------------------

bool BTree::try_lock_slot(std::uint64_t key) {
    std::size_t slot = 0;
    Node* holder = find_holder(key, &slot);
    if (holder == nullptr || slot == static_cast<std::size_t>(-1)) return false;
    if (holder->lock_slots.size() < holder->items.size())
        holder->lock_slots.resize(holder->items.size(), false);
    if (holder->lock_slots[slot]) return false;
    holder->lock_slots[slot] = true;
    return true;
}

void BTree::unlock_slot(std::uint64_t key) {
    std::size_t slot = 0;
    Node* holder = find_holder(key, &slot);
    if (holder == nullptr || slot == static_cast<std::size_t>(-1)) return;
    if (slot < holder->lock_slots.size()) holder->lock_slots[slot] = false;
}

// --- audit ----------------------------------------------------------------------

void BTree::audit_node(std::uint32_t id, std::uint64_t lo, bool has_lo, std::uint64_t hi,
                       bool has_hi) const {
    const Node& n = node(id);
    if (n.preallocated) return;
    switch (n.kind) {
        case NodeKind::index:
            if (!n.items.empty()) fail(Errc::malformed, "index node holds data records");
            break;
        case NodeKind::leaf:
            if (!n.index.empty()) fail(Errc::malformed, "leaf node holds index records");
            break;
        case NodeKind::hybrid:
            break;
    }
    std::uint64_t used = static_cast<std::uint64_t>(n.index.size()) * kIndexRecordSize +
                         static_cast<std::uint64_t>(n.items.size()) * cfg_.item_size;
    if (used > cfg_.node_size) fail(Errc::malformed, "node over capacity");
    if (n.items.size() > data_capacity(n)) fail(Errc::malformed, "data area over capacity");
    if (n.kind != NodeKind::leaf && n.index.size() > n.index_capacity)
        fail(Errc::malformed, "index area over capacity");

    for (std::size_t i = 0; i + 1 < n.items.size(); i++) {
        if (key_at(n, i) >= key_at(n, i + 1)) fail(Errc::malformed, "items out of order");
    }
    for (std::size_t i = 0; i + 1 < n.index.size(); i++) {
        if (n.index[i].key >= n.index[i + 1].key) fail(Errc::malformed, "index out of order");
    }
    for (const Bytes& it : n.items) {
        std::uint64_t k = key_of_(it);
        if (has_lo && k < lo) fail(Errc::malformed, "item below subtree interval");
        if (has_hi && k >= hi) fail(Errc::malformed, "item above subtree interval");
    }
    if (n.kind == NodeKind::hybrid && !n.items.empty() && !n.index.empty()) {
        std::uint64_t staged_min = key_at(n, 0);
        for (const IndexRec& rec : n.index) {
            if (rec.key >= staged_min) fail(Errc::malformed, "staging overlaps children");
        }
    }
    for (std::size_t i = 0; i < n.index.size(); i++) {
        const IndexRec& rec = n.index[i];
        if (rec.preallocated || rec.child == kNoNode) continue;
        std::uint64_t child_hi = 0;
        bool child_has_hi = false;
        if (i + 1 < n.index.size()) {
            child_hi = n.index[i + 1].key;
            child_has_hi = true;
        } else if (n.kind == NodeKind::hybrid && !n.items.empty()) {
            child_hi = key_at(n, 0);
            child_has_hi = true;
        } else if (has_hi) {
            child_hi = hi;
            child_has_hi = true;
        }
        audit_node(rec.child, rec.key, true, child_hi, child_has_hi);
    }
    (void)has_lo;
    (void)lo;
}

void BTree::audit() const {
    for (std::size_t i = 0; i + 1 < root_records_.size(); i++) {
        if (root_records_[i].key >= root_records_[i + 1].key)
            fail(Errc::malformed, "root records out of order");
    }
    for (std::size_t i = 0; i < root_records_.size(); i++) {
        const IndexRec& rec = root_records_[i];
        if (rec.child == kNoNode) continue;
        bool has_hi = i + 1 < root_records_.size();
        std::uint64_t hi = has_hi ? root_records_[i + 1].key : 0;
        audit_node(rec.child, rec.key, true, hi, has_hi);
    }
    std::uint64_t n = 0;
    for_each([&](std::uint64_t, ByteView) { n++; });
    if (n != total_items_) fail(Errc::malformed, "item count mismatch");
}

void BTree::collect_nodes(std::uint32_t id, std::vector<NodeInfo>& out) const {
    const Node& n = node(id);
    for (const IndexRec& rec : n.index) {
        if (rec.child == kNoNode) {
            if (!rec.preallocated) continue;
            NodeInfo info;
            info.kind = rec.child_kind;
            info.preallocated = true;
            out.push_back(info);
            continue;
        }
        collect_nodes(rec.child, out);
    }
    NodeInfo info;
    info.kind = n.kind;
    info.height = n.height;
    info.index_count = static_cast<std::uint16_t>(n.index.size());
    info.index_capacity = n.index_capacity;
    info.item_count = static_cast<std::uint32_t>(n.items.size());
    info.preallocated = n.preallocated;
    out.push_back(info);
}

std::vector<NodeInfo> BTree::nodes_in_key_order() const {
    std::vector<NodeInfo> out;
    for (const IndexRec& rec : root_records_) {
        if (rec.child == kNoNode) {
            if (!rec.preallocated) continue;
            NodeInfo info;
            info.kind = rec.child_kind;
            info.preallocated = true;
            out.push_back(info);
            continue;
        }
        collect_nodes(rec.child, out);
    }
    return out;
}

std::uint32_t BTree::root_record_count() const {
    return static_cast<std::uint32_t>(root_records_.size());
}

std::uint32_t BTree::root_inline_count() const {
    return static_cast<std::uint32_t>(root_items_.size());
}

std::uint32_t BTree::height() const { return tree_height_; }

std::uint32_t BTree::node_count() const {
    return static_cast<std::uint32_t>(nodes_in_key_order().size());
}

} // namespace ssdfs
