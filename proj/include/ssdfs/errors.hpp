#pragma once

#include <stdexcept>
#include <string>

namespace ssdfs {

enum class Errc {
    // device
    rewrite_without_erase,
    bad_block,
    out_of_range,
    unwritten_page,
    corrupt_image,
    crash_injected,
    // layout
    bad_magic,
    bad_checksum,
    malformed,
    // log engine
    log_full,
    invalid_length,
    delta_out_of_range,
    lost_base,
    device_full,
    // peb map / segments
    no_clean_peb,
    already_migrating,
    source_still_live,
    illegal_transition,
    no_space,
    // b-trees / metadata
    duplicate_key,
    key_not_found,
    storage_full,
    exists,
    not_found,
    overlap,
    value_too_large,
    // misc
    io_error,
};

const char* errc_name(Errc c);

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

    Errc code() const { return code_; }

private:
    Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

} // namespace ssdfs
