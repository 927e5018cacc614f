#pragma once

// Shared binary container for datasets and checkpoints:
//   [8-byte magic][uint64 LE header length][JSON header][payload]
// Payload layout is dictated by the header; all floats are 64-bit little
// endian, labels are int32 little endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "caw/errors.hpp"
#include "json.hpp"

namespace caw::container {

inline constexpr int kFormatVersion = 1;

inline void append_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

inline void append_f64(std::string& out, double v) {
    append_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline void append_i32(std::string& out, std::int32_t v) {
    const auto u = static_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
    }
}

class Reader {
public:
    Reader(std::string bytes, std::size_t offset) : bytes_(std::move(bytes)), pos_(offset) {}

    std::uint64_t read_u64() {
        require(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i]))
                 << (8 * i);
        }
        pos_ += 8;
        return v;
    }

    double read_f64() { return std::bit_cast<double>(read_u64()); }

    std::int32_t read_i32() {
        require(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i]))
                 << (8 * i);
        }
        pos_ += 4;
        return static_cast<std::int32_t>(v);
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    void require(std::size_t n) {
        if (bytes_.size() - pos_ < n) {
            throw TruncatedPayloadError("payload ends after " +
                                        std::to_string(bytes_.size() - pos_) +
                                        " bytes where " + std::to_string(n) + " were needed");
        }
    }

    std::string bytes_;
    std::size_t pos_;
};

inline void write_file(const std::string& path, const std::string& magic,
                       const nlohmann::json& header, const std::string& payload) {
    if (magic.size() != 8) {
        throw ContractError("container magic must be 8 bytes");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path + "' for writing");
    }
    std::string bytes = magic;
    const std::string header_json = header.dump();
    append_u64(bytes, header_json.size());
    bytes += header_json;
    bytes += payload;
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("failed writing '" + path + "'");
    }
}

struct Loaded {
    nlohmann::json header;
    Reader payload;
};

inline Loaded read_file(const std::string& path, const std::string& magic) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path + "' for reading");
    }
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 16) {
        throw FormatError("'" + path + "' is too short to be a valid container");
    }
    if (bytes.compare(0, 8, magic) != 0) {
        throw FormatError("'" + path + "' has the wrong magic for this file kind");
    }
    std::uint64_t header_len = 0;
    for (int i = 0; i < 8; ++i) {
        header_len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i]))
                      << (8 * i);
    }
    if (16 + header_len > bytes.size()) {
        throw TruncatedPayloadError("'" + path + "' header is truncated");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(16, header_len));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("'" + path + "' header is not valid JSON: " + e.what());
    }
    const int version = header.value("format_version", -1);
    if (version != kFormatVersion) {
        throw VersionMismatchError("'" + path + "' uses format_version " +
                                   std::to_string(version) + ", expected " +
                                   std::to_string(kFormatVersion));
    }
    return Loaded{std::move(header), Reader(std::move(bytes), 16 + header_len)};
}

/// Call after consuming the full expected payload.
inline void expect_consumed(Reader& reader, const std::string& path) {
    if (reader.remaining() != 0) {
        throw PayloadSizeError("'" + path + "' has " + std::to_string(reader.remaining()) +
                               " trailing payload bytes beyond the header-declared content");
    }
}

} // namespace caw::container
