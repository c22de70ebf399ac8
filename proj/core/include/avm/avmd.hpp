#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "avm/tensor.hpp"

namespace avm {

// Self-describing container: <path>/manifest.json lists named 64-bit float
// blobs (shape, byte offset, length, CRC32) plus free-form metadata;
// <path>/data.bin is their little-endian row-major concatenation.
inline constexpr int kAvmdVersion = 1;

struct AvmdError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct AvmdVersionError : AvmdError {
    using AvmdError::AvmdError;
};
struct AvmdTruncationError : AvmdError {
    using AvmdError::AvmdError;
};
struct AvmdChecksumError : AvmdError {
    using AvmdError::AvmdError;
};
struct AvmdFormatError : AvmdError {
    using AvmdError::AvmdError;
};

std::uint32_t crc32_ieee(const void* data, std::size_t len);

class AvmdWriter {
public:
    void add(const std::string& name, Shape shape, std::span<const double> data);
    // metadata must be a JSON object serialized as text
    void set_meta(const std::string& json_text);
    void write(const std::string& dir) const;

private:
    struct Blob {
        std::string name;
        Shape shape;
        std::vector<double> data;
    };
    std::vector<Blob> blobs_;
    std::string meta_ = "{}";
};

class AvmdReader {
public:
    // parses and fully validates the manifest before any blob access
    explicit AvmdReader(const std::string& dir);

    const std::string& meta_json() const { return meta_; }
    std::vector<std::string> names() const;
    bool has(const std::string& name) const;
    Shape shape(const std::string& name) const;
    // verifies length and checksum on every read
    std::vector<double> read(const std::string& name) const;

private:
    struct Entry {
        Shape shape;
        std::uint64_t offset = 0;
        std::uint64_t nbytes = 0;
        std::uint32_t crc = 0;
    };
    const Entry& entry(const std::string& name) const;

    std::string dir_;
    std::vector<std::pair<std::string, Entry>> entries_;
    std::string meta_;
    std::uint64_t data_size_ = 0;
};

}  // namespace avm
