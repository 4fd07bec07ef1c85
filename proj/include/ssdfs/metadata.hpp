#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ssdfs/btree.hpp"
#include "ssdfs/bytes.hpp"
#include "ssdfs/shared_dict.hpp"

namespace ssdfs {

constexpr std::uint32_t kDefaultInodeSize = 256;
constexpr std::uint32_t kPrivateAreaBytes = 128;
constexpr std::uint32_t kDentrySize = 32;
constexpr std::uint32_t kRawExtentSize = 16;
constexpr std::uint32_t kForkSize = 64;
constexpr std::uint32_t kXattrRecordSize = 64;
constexpr std::uint32_t kDentryInlineNameBytes = 12;
constexpr std::uint32_t kXattrInlineNameBytes = 16;
constexpr std::uint32_t kXattrInlineValueBytes = 32;
constexpr std::uint32_t kXattrValueLimit = 64 * 1024;
constexpr std::uint32_t kXattrLookupTableSize = 22;

// capacity constants of the 128-byte private area
constexpr std::uint32_t kInlineDentriesMax = kPrivateAreaBytes / kDentrySize;   // 4
constexpr std::uint32_t kInlineExtentsMax = kPrivateAreaBytes / kRawExtentSize; // 8

enum class PrivateTag : std::uint8_t {
    empty = 0,
    inline_file = 1,
    inline_extents = 2,
    inline_dentries = 3,
    extents_root = 4,
    dentries_root = 5,
};

enum class XattrTag : std::uint8_t {
    empty = 0,
    inline_xattr = 1,
    xattr_root = 2,
};

struct RawExtentRec {
    std::uint64_t segment_id = kNoSegment;
    std::uint32_t logical_block = 0;
    std::uint32_t length = 0; // blocks, >= 1

    bool operator==(const RawExtentRec&) const = default;
};

Bytes encode_raw_extent(const RawExtentRec& e);
RawExtentRec parse_raw_extent(ByteView b);

struct ForkRec {
    std::uint64_t file_offset = 0;  // blocks from file start
    std::uint64_t blocks_count = 0; // sum of extent lengths
    std::array<RawExtentRec, 3> extents{};

    bool operator==(const ForkRec&) const = default;
};

Bytes encode_fork(const ForkRec& f);
ForkRec parse_fork(ByteView b);

enum : std::uint8_t { kDentryNameInDictionary = 1u << 0 };

struct DentryRec {
    std::uint64_t inode_id = 0;
    std::uint64_t name_hash = 0;
    std::uint8_t name_len = 0;
    std::uint8_t flags = 0;
    std::array<char, kDentryInlineNameBytes> inline_name{};

    bool operator==(const DentryRec&) const = default;
};

Bytes encode_dentry(const DentryRec& d);
DentryRec parse_dentry(ByteView b);

enum : std::uint8_t {
    kXattrNameInDictionary = 1u << 4,
    kXattrValueIsBlob = 1u << 5,
    kXattrNamespaceMask = 0x03,
};

struct XattrRec {
    std::uint64_t name_hash = 0;
    std::uint8_t name_type = 0; // namespace class bits + flags
    std::uint8_t name_len = 0;
    std::uint16_t value_len = 0;
    std::array<char, kXattrInlineNameBytes> inline_name{};
    std::array<std::uint8_t, kXattrInlineValueBytes> inline_value{};
    RawExtentRec blob; // when kXattrValueIsBlob
    std::uint32_t blob_bytes = 0;

    bool operator==(const XattrRec&) const = default;
};

Bytes encode_xattr(const XattrRec& x);
XattrRec parse_xattr(ByteView b);

struct RawInode {
    std::uint64_t inode_id = 0;
    std::uint16_t mode = 0;
    std::uint16_t flags = 0;
    std::uint32_t uid = 0;
    std::uint32_t gid = 0;
    std::uint64_t atime = 0;
    std::uint64_t ctime = 0;
    std::uint64_t mtime = 0;
    std::uint64_t size_bytes = 0;
    std::uint64_t size_blocks = 0;
    std::uint32_t links_count = 0;
    PrivateTag private_tag = PrivateTag::empty;
    XattrTag xattr_tag = XattrTag::empty;
    std::uint16_t inline_count = 0; // inline entries or inline file length
    std::array<std::uint8_t, kPrivateAreaBytes> private_area{};

    bool is_dir() const { return (mode & 0xF000) == 0x4000; }
};

Bytes encode_inode(const RawInode& ino, std::uint32_t inode_size);
RawInode parse_inode(ByteView b);

// Per-node lookup table clustering sorted records by hash; fixed capacity.
std::array<std::uint64_t, kXattrLookupTableSize> build_lookup_table(
    const std::vector<std::uint64_t>& sorted_hashes);

// Off-tree storage for oversized xattr values; the volume backs this with
// user-data blocks.
class BlobStore {
public:
    virtual ~BlobStore() = default;
    virtual RawExtentRec store(ByteView bytes) = 0;
    virtual Bytes load(const RawExtentRec& extent, std::uint32_t bytes) = 0;
    virtual void free(const RawExtentRec& extent) = 0;
};

// The four metadata trees plus the inline-in-inode promotion rules.
class MetadataStore {
public:
    MetadataStore(NodeStorage& nodes, SharedDictionary& dict, BlobStore& blobs,
                  std::uint32_t inode_size = kDefaultInodeSize);

    // Detached extents (truncate/delete) flow through this hook, one extent
    // at a time, so the volume can route them to deduplication-aware
    // invalidation.
    void set_extent_invalidation_hook(std::function<void(const RawExtentRec&)> hook) {
        extent_hook_ = std::move(hook);
    }

    // --- inodes ---
    std::uint64_t inode_alloc();
    void inode_free(std::uint64_t id);
    RawInode inode_get(std::uint64_t id) const;
    void inode_put(const RawInode& ino);
    bool inode_exists(std::uint64_t id) const;
    std::uint64_t inode_count() const;

    // --- dentries ---
    void dentry_add(std::uint64_t dir_inode, const std::string& name, std::uint64_t child_id);
    std::optional<std::uint64_t> dentry_lookup(std::uint64_t dir_inode, const std::string& name);
    void dentry_remove(std::uint64_t dir_inode, const std::string& name);
    std::vector<std::pair<std::string, std::uint64_t>> dentry_list(std::uint64_t dir_inode);
    bool dir_uses_tree(std::uint64_t dir_inode) const;

    // --- extents ---
    void extents_insert(std::uint64_t file_inode, std::uint64_t file_offset_blocks,
                        const RawExtentRec& extent);
    struct ExtentHit {
        RawExtentRec extent;
        std::uint32_t intra_offset = 0; // blocks into the extent
    };
    std::optional<ExtentHit> extents_lookup(std::uint64_t file_inode, std::uint64_t block_offset);
    std::vector<std::pair<std::uint64_t, RawExtentRec>> extents_list(std::uint64_t file_inode);
    bool file_uses_extent_tree(std::uint64_t file_inode) const;
    // Drops every extent mapping at or beyond the block boundary. Whole
    // trailing forks detach into the invalidation queue; a cut fork is
    // trimmed synchronously.
    void truncate_invalidate(std::uint64_t file_inode, std::uint64_t new_size_blocks);

    // --- xattrs ---
    void xattr_set(std::uint64_t inode_id, const std::string& name, ByteView value);
    std::optional<Bytes> xattr_get(std::uint64_t inode_id, const std::string& name);
    void xattr_remove(std::uint64_t inode_id, const std::string& name);

    // --- inline file content ---
    std::uint32_t inline_file_capacity(const RawInode& ino) const;
    void inline_file_write(RawInode& ino, ByteView content);
    Bytes inline_file_read(const RawInode& ino) const;

    // --- background work ---
    std::size_t process_invalidation(std::uint32_t max_items);
    std::size_t invalidation_backlog() const;

    // --- persistence ---
    RootNodeImage flush();
    static std::unique_ptr<MetadataStore> load(NodeStorage& nodes, SharedDictionary& dict,
                                               BlobStore& blobs, const RootNodeImage& inodes_root,
                                               std::uint32_t inode_size = kDefaultInodeSize);

    BTree& inodes_tree() { return *inodes_; }
    BTree* dentries_tree_of(std::uint64_t dir_inode);
    BTree* extents_tree_of(std::uint64_t file_inode);
    BTree* xattr_tree_of(std::uint64_t inode_id);

    TreeConfig dentries_tree_config() const;
    TreeConfig extents_tree_config() const;
    TreeConfig xattr_tree_config() const;

private:
    enum class SubTree : std::uint8_t { dentries, extents, xattr };

    std::uint32_t inline_dentry_cap(const RawInode& ino) const;
    std::uint32_t inline_extent_cap(const RawInode& ino) const;
    BTree* open_subtree(RawInode& ino, SubTree which, bool create);
    void store_subtree_root(RawInode& ino, SubTree which, BTree& tree);
    void spill_primary_to_half(RawInode& ino);
    std::string dentry_full_name(const DentryRec& d);
    std::string xattr_full_name(const XattrRec& x);
    void rebuild_fork_mirror(std::uint64_t file_inode);
    std::vector<ForkRec>& fork_mirror(std::uint64_t file_inode);
    void emit_extent(const RawExtentRec& e);

    NodeStorage& nodes_;
    SharedDictionary& dict_;
    BlobStore& blobs_;
    std::uint32_t inode_size_;

    std::unique_ptr<BTree> inodes_;
    std::map<std::pair<std::uint64_t, std::uint8_t>, std::unique_ptr<BTree>> subtrees_;
    std::map<std::uint64_t, std::vector<ForkRec>> fork_mirrors_;
    std::function<void(const RawExtentRec&)> extent_hook_;
};

} // namespace ssdfs
