#include "ssdfs/nand.hpp"

#include <cstdio>
#include <memory>

namespace ssdfs {

namespace {
constexpr char kImageMagic[8] = {'S', 'S', 'D', 'F', 'S', 'I', 'M', 'G'};
constexpr std::uint32_t kImageVersion = 1;

bool is_pow2(std::uint32_t v) { return v != 0 && (v & (v - 1)) == 0; }
} // namespace

void DeviceGeometry::validate() const {
    if (page_size < 512 || !is_pow2(page_size)) fail(Errc::out_of_range, "page_size must be a power of two >= 512");
    if (pages_per_peb < 8) fail(Errc::out_of_range, "pages_per_peb must be >= 8");
    if (peb_count == 0 || die_count == 0 || channel_count == 0) fail(Errc::out_of_range, "counts must be > 0");
    if (peb_count % die_count != 0) fail(Errc::out_of_range, "peb_count must be divisible by die_count");
}

NandDevice::NandDevice(DeviceGeometry geo, CostModel costs) : geo_(geo), costs_(costs) {
    geo_.validate();
    health_.resize(geo_.peb_count);
    present_.assign(geo_.total_pages(), 0);
    pages_.assign(geo_.total_pages() * geo_.page_size, 0);
    programs_per_die_.assign(geo_.die_count, 0);
    reads_per_die_.assign(geo_.die_count, 0);
}

void NandDevice::check_peb(std::uint32_t peb_id) const {
    if (peb_id >= geo_.peb_count) fail(Errc::out_of_range, "peb " + std::to_string(peb_id));
}

std::uint64_t NandDevice::page_index(std::uint32_t peb_id, std::uint32_t page_idx) const {
    check_peb(peb_id);
    if (page_idx >= geo_.pages_per_peb) fail(Errc::out_of_range, "page " + std::to_string(page_idx));
    return static_cast<std::uint64_t>(peb_id) * geo_.pages_per_peb + page_idx;
}

const PebHealth& NandDevice::health(std::uint32_t peb_id) const {
    check_peb(peb_id);
    return health_[peb_id];
}

void NandDevice::program_page(std::uint32_t peb_id, std::uint32_t page_idx, ByteView data) {
    std::uint64_t idx = page_index(peb_id, page_idx);
    if (health_[peb_id].is_bad) fail(Errc::bad_block, "program on bad peb " + std::to_string(peb_id));
    if (data.size() != geo_.page_size) fail(Errc::invalid_length, "program payload must be one page");
    if (present_[idx]) {
        fail(Errc::rewrite_without_erase,
             "peb " + std::to_string(peb_id) + " page " + std::to_string(page_idx));
    }
    if (crash_after_) {
        if (*crash_after_ == 0) fail(Errc::crash_injected, "power cut");
        --*crash_after_;
    }
    std::copy(data.begin(), data.end(), pages_.begin() + static_cast<std::ptrdiff_t>(idx * geo_.page_size));
    present_[idx] = 1;
    counters_.pages_programmed++;
    counters_.simulated_time_us += costs_.write_us;
    programs_per_die_[die_of(peb_id)]++;
    lifetime_programs_++;
}

Bytes NandDevice::read_page(std::uint32_t peb_id, std::uint32_t page_idx) {
    std::uint64_t idx = page_index(peb_id, page_idx);
    if (!present_[idx]) {
        fail(Errc::unwritten_page,
             "peb " + std::to_string(peb_id) + " page " + std::to_string(page_idx));
    }
    counters_.pages_read++;
    counters_.simulated_time_us += costs_.read_us;
    health_[peb_id].read_count++;
    reads_per_die_[die_of(peb_id)]++;
    auto begin = pages_.begin() + static_cast<std::ptrdiff_t>(idx * geo_.page_size);
    return Bytes(begin, begin + geo_.page_size);
}

void NandDevice::erase_peb(std::uint32_t peb_id) {
    check_peb(peb_id);
    if (health_[peb_id].is_bad) fail(Errc::bad_block, "erase on bad peb " + std::to_string(peb_id));
    std::uint64_t base = static_cast<std::uint64_t>(peb_id) * geo_.pages_per_peb;
    for (std::uint32_t p = 0; p < geo_.pages_per_peb; p++) present_[base + p] = 0;
    health_[peb_id].erase_count++;
    counters_.pebs_erased++;
    counters_.simulated_time_us += costs_.erase_us;
}

bool NandDevice::is_programmed(std::uint32_t peb_id, std::uint32_t page_idx) const {
    std::uint64_t idx = page_index(peb_id, page_idx);
    return present_[idx] != 0;
}

std::uint32_t NandDevice::die_of(std::uint32_t peb_id) const {
    check_peb(peb_id);
    return peb_id % geo_.die_count;
}

void NandDevice::mark_bad(std::uint32_t peb_id) {
    check_peb(peb_id);
    health_[peb_id].is_bad = true;
}

void NandDevice::persist_image(const std::string& path) const {
    ByteWriter w;
    w.bytes(ByteView(reinterpret_cast<const std::uint8_t*>(kImageMagic), 8));
    w.u32(kImageVersion);
    w.u32(geo_.page_size);
    w.u32(geo_.pages_per_peb);
    w.u32(geo_.peb_count);
    w.u32(geo_.die_count);
    w.u32(geo_.channel_count);
    w.u64(costs_.read_us);
    w.u64(costs_.write_us);
    w.u64(costs_.erase_us);
    w.u64(counters_.pages_read);
    w.u64(counters_.pages_programmed);
    w.u64(counters_.pebs_erased);
    w.u64(counters_.simulated_time_us);
    for (std::uint32_t d = 0; d < geo_.die_count; d++) {
        w.u64(programs_per_die_[d]);
        w.u64(reads_per_die_[d]);
    }
    for (const PebHealth& h : health_) {
        w.u32(h.erase_count);
        w.u64(h.read_count);
        w.u8(h.is_bad ? 1 : 0);
    }
    // presence bitmap, one bit per page, page-major
    std::uint64_t total = geo_.total_pages();
    Bytes bitmap((total + 7) / 8, 0);
    std::uint64_t programmed = 0;
    for (std::uint64_t i = 0; i < total; i++) {
        if (present_[i]) {
            bitmap[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
            programmed++;
        }
    }
    w.bytes(bitmap);
    Bytes header = w.take();

    std::unique_ptr<std::FILE, int (*)(std::FILE*)> f(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!f) fail(Errc::io_error, "cannot open " + path);
    auto put = [&](ByteView b) {
        if (std::fwrite(b.data(), 1, b.size(), f.get()) != b.size()) fail(Errc::io_error, "short write to " + path);
    };
    put(header);
    for (std::uint64_t i = 0; i < total; i++) {
        if (!present_[i]) continue;
        put(ByteView(pages_.data() + i * geo_.page_size, geo_.page_size));
    }
    (void)programmed;
}

NandDevice NandDevice::load_image(const std::string& path) {
    std::unique_ptr<std::FILE, int (*)(std::FILE*)> f(std::fopen(path.c_str(), "rb"), &std::fclose);
    if (!f) fail(Errc::io_error, "cannot open " + path);
    std::fseek(f.get(), 0, SEEK_END);
    long sz = std::ftell(f.get());
    std::fseek(f.get(), 0, SEEK_SET);
    if (sz < 8) fail(Errc::corrupt_image, "file too small");
    Bytes raw(static_cast<std::size_t>(sz));
    if (std::fread(raw.data(), 1, raw.size(), f.get()) != raw.size()) fail(Errc::io_error, "short read from " + path);

    try {
        ByteReader r(raw);
        Bytes magic = r.bytes(8);
        if (std::memcmp(magic.data(), kImageMagic, 8) != 0) fail(Errc::corrupt_image, "bad magic");
        std::uint32_t version = r.u32();
        if (version != kImageVersion) fail(Errc::corrupt_image, "unsupported version");
        DeviceGeometry geo;
        geo.page_size = r.u32();
        geo.pages_per_peb = r.u32();
        geo.peb_count = r.u32();
        geo.die_count = r.u32();
        geo.channel_count = r.u32();
        CostModel costs;
        costs.read_us = r.u64();
        costs.write_us = r.u64();
        costs.erase_us = r.u64();
        NandDevice dev(geo, costs);
        dev.counters_.pages_read = r.u64();
        dev.counters_.pages_programmed = r.u64();
        dev.counters_.pebs_erased = r.u64();
        dev.counters_.simulated_time_us = r.u64();
        for (std::uint32_t d = 0; d < geo.die_count; d++) {
            dev.programs_per_die_[d] = r.u64();
            dev.reads_per_die_[d] = r.u64();
        }
        for (std::uint32_t p = 0; p < geo.peb_count; p++) {
            dev.health_[p].erase_count = r.u32();
            dev.health_[p].read_count = r.u64();
            dev.health_[p].is_bad = r.u8() != 0;
        }
        std::uint64_t total = geo.total_pages();
        Bytes bitmap = r.bytes((total + 7) / 8);
        for (std::uint64_t i = 0; i < total; i++) {
            if (bitmap[i / 8] & (1u << (i % 8))) {
                Bytes page = r.bytes(geo.page_size);
                std::copy(page.begin(), page.end(),
                          dev.pages_.begin() + static_cast<std::ptrdiff_t>(i * geo.page_size));
                dev.present_[i] = 1;
            }
        }
        return dev;
    } catch (const Error& e) {
        if (e.code() == Errc::malformed) fail(Errc::corrupt_image, "truncated image");
        throw;
    }
}

} // namespace ssdfs
