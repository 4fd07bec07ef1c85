#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ssdfs/bytes.hpp"

namespace ssdfs {

struct DeviceGeometry {
    std::uint32_t page_size = 4096;
    std::uint32_t pages_per_peb = 128;
    std::uint32_t peb_count = 1024;
    std::uint32_t die_count = 4;
    std::uint32_t channel_count = 2;

    void validate() const;
    std::uint64_t total_pages() const {
        return static_cast<std::uint64_t>(peb_count) * pages_per_peb;
    }
};

struct CostModel {
    std::uint64_t read_us = 20;
    std::uint64_t write_us = 200;
    std::uint64_t erase_us = 2000;
};

struct PebHealth {
    std::uint32_t erase_count = 0;
    bool is_bad = false;
    std::uint64_t read_count = 0;
};

struct OpCounters {
    std::uint64_t pages_read = 0;
    std::uint64_t pages_programmed = 0;
    std::uint64_t pebs_erased = 0;
    std::uint64_t simulated_time_us = 0;
};

// Multi-die NAND device with program-once pages and block-erase semantics.
// All mutating calls are serialized by the caller.
class NandDevice {
public:
    NandDevice(DeviceGeometry geo, CostModel costs = {});

    const DeviceGeometry& geometry() const { return geo_; }
    const CostModel& costs() const { return costs_; }
    const OpCounters& counters() const { return counters_; }
    const PebHealth& health(std::uint32_t peb_id) const;

    void program_page(std::uint32_t peb_id, std::uint32_t page_idx, ByteView data);
    Bytes read_page(std::uint32_t peb_id, std::uint32_t page_idx);
    void erase_peb(std::uint32_t peb_id);

    // Cost-free probe; lets scanners stop at the erased frontier without
    // tripping UnwrittenPage.
    bool is_programmed(std::uint32_t peb_id, std::uint32_t page_idx) const;

    std::uint32_t die_of(std::uint32_t peb_id) const;

    // Per-die accounting of programs and reads, for placement-spread checks.
    const std::vector<std::uint64_t>& programs_per_die() const { return programs_per_die_; }
    const std::vector<std::uint64_t>& reads_per_die() const { return reads_per_die_; }

    void mark_bad(std::uint32_t peb_id);

    void persist_image(const std::string& path) const;
    static NandDevice load_image(const std::string& path);

    // Test hook: when set, the device injects a failure before the Nth
    // subsequent page program (0 = next program fails).
    void set_crash_after_programs(std::optional<std::uint64_t> remaining) {
        crash_after_ = remaining;
    }
    std::uint64_t lifetime_programs() const { return lifetime_programs_; }

private:
    std::uint64_t page_index(std::uint32_t peb_id, std::uint32_t page_idx) const;
    void check_peb(std::uint32_t peb_id) const;

    DeviceGeometry geo_;
    CostModel costs_;
    OpCounters counters_;
    std::vector<PebHealth> health_;
    std::vector<std::uint8_t> present_;   // 1 byte per page: programmed flag
    std::vector<std::uint8_t> pages_;     // page payloads, dense
    std::vector<std::uint64_t> programs_per_die_;
    std::vector<std::uint64_t> reads_per_die_;
    std::optional<std::uint64_t> crash_after_;
    std::uint64_t lifetime_programs_ = 0;
};

} // namespace ssdfs
