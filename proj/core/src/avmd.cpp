#include "avm/avmd.hpp"

#include <array>
#include <bit>
#include <filesystem>
#include <fstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "AVMD blobs are written by memcpy and require a little-endian host");

namespace avm {

using nlohmann::json;
namespace fs = std::filesystem;

std::uint32_t crc32_ieee(const void* data, std::size_t len) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t crc = 0xffffffffu;
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ p[i]) & 0xffu] ^ (crc >> 8);
    return crc ^ 0xffffffffu;
}

void AvmdWriter::add(const std::string& name, Shape shape, std::span<const double> data) {
    if (data.size() != shape_numel(shape))
        throw AvmdFormatError("avmd: blob '" + name + "' has " + std::to_string(data.size()) +
                              " values for shape " + shape_str(shape));
    for (const auto& b : blobs_)
        if (b.name == name) throw AvmdFormatError("avmd: duplicate blob '" + name + "'");
    blobs_.push_back({name, std::move(shape), {data.begin(), data.end()}});
}

void AvmdWriter::set_meta(const std::string& json_text) {
    json parsed = json::parse(json_text);  // throws on malformed input
    if (!parsed.is_object()) throw AvmdFormatError("avmd: meta must be a JSON object");
    meta_ = parsed.dump();
}

void AvmdWriter::write(const std::string& dir) const {
    std::error_code ec;
    fs::create_directories(dir, ec);

    json manifest;
    manifest["format"] = "AVMD";
    manifest["version"] = kAvmdVersion;
    manifest["byte_order"] = "little";
    manifest["layout"] = "row-major";
    manifest["meta"] = json::parse(meta_);
    json blob_list = json::array();

    std::ofstream bin(fs::path(dir) / "data.bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw AvmdError("avmd: cannot write data.bin under " + dir);
    std::uint64_t offset = 0;
    for (const auto& b : blobs_) {
        const std::uint64_t nbytes = b.data.size() * sizeof(double);
        bin.write(reinterpret_cast<const char*>(b.data.data()),
                  static_cast<std::streamsize>(nbytes));
        json e;
        e["name"] = b.name;
        e["shape"] = b.shape;
        e["dtype"] = "f8";
        e["offset"] = offset;
        e["nbytes"] = nbytes;
        e["crc32"] = crc32_ieee(b.data.data(), nbytes);
        blob_list.push_back(std::move(e));
        offset += nbytes;
    }
    bin.close();
    if (!bin) throw AvmdError("avmd: short write to data.bin under " + dir);
    manifest["blobs"] = std::move(blob_list);

    std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::trunc);
    if (!mf) throw AvmdError("avmd: cannot write manifest.json under " + dir);
    mf << manifest.dump(2) << '\n';
}

AvmdReader::AvmdReader(const std::string& dir) : dir_(dir) {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw AvmdError("avmd: cannot open " + dir + "/manifest.json");
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw AvmdFormatError("avmd: malformed manifest in " + dir + ": " + e.what());
    }
    if (!manifest.is_object() || manifest.value("format", "") != "AVMD")
        throw AvmdFormatError("avmd: " + dir + " is not an AVMD container");
    const int version = manifest.value("version", -1);
    if (version != kAvmdVersion)
        throw AvmdVersionError("avmd: manifest version " + std::to_string(version) +
                               " but reader supports version " + std::to_string(kAvmdVersion));
    if (manifest.value("byte_order", "") != "little" ||
        manifest.value("layout", "") != "row-major")
        throw AvmdFormatError("avmd: unsupported byte order or layout in " + dir);

    meta_ = manifest.value("meta", json::object()).dump();

    std::error_code ec;
    data_size_ = fs::file_size(fs::path(dir) / "data.bin", ec);
    if (ec) throw AvmdError("avmd: cannot stat " + dir + "/data.bin");

    if (!manifest.contains("blobs") || !manifest["blobs"].is_array())
        throw AvmdFormatError("avmd: manifest has no blob list");
    for (const auto& e : manifest["blobs"]) {
        Entry entry;
        const std::string name = e.at("name");
        if (e.at("dtype") != "f8")
            throw AvmdFormatError("avmd: blob '" + name + "' has unsupported dtype");
        entry.shape = e.at("shape").get<Shape>();
        entry.offset = e.at("offset");
        entry.nbytes = e.at("nbytes");
        entry.crc = e.at("crc32");
        if (entry.nbytes != shape_numel(entry.shape) * sizeof(double))
            throw AvmdFormatError("avmd: blob '" + name + "' length disagrees with its shape");
        if (entry.offset + entry.nbytes > data_size_)
            throw AvmdTruncationError("avmd: blob '" + name + "' extends to byte " +
                                      std::to_string(entry.offset + entry.nbytes) +
                                      " but data.bin has " + std::to_string(data_size_));
        entries_.emplace_back(name, std::move(entry));
    }
}

std::vector<std::string> AvmdReader::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, e] : entries_) out.push_back(name);
    return out;
}

bool AvmdReader::has(const std::string& name) const {
    for (const auto& [n, e] : entries_)
        if (n == name) return true;
    return false;
}

const AvmdReader::Entry& AvmdReader::entry(const std::string& name) const {
    for (const auto& [n, e] : entries_)
        if (n == name) return e;
    throw AvmdError("avmd: no blob named '" + name + "' in " + dir_);
}

Shape AvmdReader::shape(const std::string& name) const { return entry(name).shape; }

std::vector<double> AvmdReader::read(const std::string& name) const {
    const Entry& e = entry(name);
    std::ifstream bin(fs::path(dir_) / "data.bin", std::ios::binary);
    if (!bin) throw AvmdError("avmd: cannot open " + dir_ + "/data.bin");
    bin.seekg(static_cast<std::streamoff>(e.offset));
    std::vector<double> out(e.nbytes / sizeof(double));
    bin.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(e.nbytes));
    if (static_cast<std::uint64_t>(bin.gcount()) != e.nbytes)
        throw AvmdTruncationError("avmd: blob '" + name + "' truncated on read");
    const std::uint32_t crc = crc32_ieee(out.data(), e.nbytes);
    if (crc != e.crc)
        throw AvmdChecksumError("avmd: blob '" + name + "' checksum mismatch (stored " +
                                std::to_string(e.crc) + ", computed " + std::to_string(crc) + ")");
    return out;
}

}  // namespace avm
