#pragma once

// Byte-level helpers shared by dataset shards and checkpoints.

#include "odeinf/errors.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <type_traits>

namespace odeinf::io {

inline constexpr std::uint32_t kEndianTag = 0x01020304u;

inline std::uint32_t crc32(std::string_view bytes) {
    uLong c = ::crc32(0L, Z_NULL, 0);
    std::size_t off = 0;
    while (off < bytes.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
        c = ::crc32(c, reinterpret_cast<const Bytef*>(bytes.data() + off), chunk);
        off += chunk;
    }
    return static_cast<std::uint32_t>(c);
}

class ByteWriter {
public:
    template <typename T>
    void put(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        const auto* p = reinterpret_cast<const char*>(&v);
        buf_.append(p, sizeof(T));
    }

    template <typename T>
    void put_array(const T* data, std::size_t n) {
        static_assert(std::is_trivially_copyable_v<T>);
        buf_.append(reinterpret_cast<const char*>(data), n * sizeof(T));
    }

    void put_bytes(std::string_view s) { buf_.append(s); }

    std::size_t size() const { return buf_.size(); }
    const std::string& bytes() const { return buf_; }
    std::string take() { return std::move(buf_); }

private:
    std::string buf_;
};

class ByteReader {
public:
    ByteReader(std::string_view bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

    template <typename T>
    T get() {
        static_assert(std::is_trivially_copyable_v<T>);
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    template <typename T>
    void get_array(T* out, std::size_t n) {
        need(n * sizeof(T));
        std::memcpy(out, bytes_.data() + pos_, n * sizeof(T));
        pos_ += n * sizeof(T);
    }

    std::string_view get_bytes(std::size_t n) {
        need(n);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t position() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    bool done() const { return pos_ == bytes_.size(); }
    const std::string& path() const { return path_; }

private:
    void need(std::size_t n) const {
        if (n > bytes_.size() - pos_)
            throw FormatError(FormatErrorKind::Malformed, path_,
                              "read of " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) +
                                  " runs past the end");
    }

    std::string_view bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path.string(), "cannot open for reading");
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError(path.string(), "read failed");
    return data;
}

/// Writes via a temporary sibling and rename so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view data) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError(path.parent_path().string(), "cannot create directory: " + ec.message());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError(tmp.string(), "cannot open for writing");
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
        out.flush();
        if (!out) throw IoError(tmp.string(), "write failed");
    }
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError(path.string(), "rename failed: " + ec.message());
}

/// Fixed header shared by binary containers: magic, version, endianness tag,
/// item count, payload size and payload checksum.
struct ContainerHeader {
    std::uint32_t version = 0;
    std::uint64_t count = 0;
    std::uint64_t payload_size = 0;
    std::uint32_t checksum = 0;

    static constexpr std::size_t kSize = 8 + 4 + 4 + 8 + 8 + 4;
};

inline std::string make_container(std::string_view magic, std::uint32_t version, std::uint64_t count, std::string_view payload) {
    ODEINF_REQUIRE(magic.size() == 8, "container magic must be 8 bytes");
    ByteWriter w;
    w.put_bytes(magic);
    w.put(version);
    w.put(kEndianTag);
    w.put(count);
    w.put(static_cast<std::uint64_t>(payload.size()));
    w.put(crc32(payload));
    w.put_bytes(payload);
    return w.take();
}

/// Validates the header and returns the payload view; every failure is a typed FormatError.
inline std::string_view open_container(std::string_view data, std::string_view magic, std::uint32_t version,
                                       const std::string& path, ContainerHeader* header = nullptr) {
    if (data.size() < magic.size() || data.substr(0, magic.size()) != magic) {
        if (data.size() < magic.size() && magic.substr(0, data.size()) == data)
            throw FormatError(FormatErrorKind::Truncated, path, "file shorter than the header");
        throw FormatError(FormatErrorKind::BadMagic, path, "");
    }
    if (data.size() < ContainerHeader::kSize) throw FormatError(FormatErrorKind::Truncated, path, "file shorter than the header");
    ByteReader r(data.substr(magic.size(), ContainerHeader::kSize - magic.size()), path);
    ContainerHeader h;
    h.version = r.get<std::uint32_t>();
    const auto tag = r.get<std::uint32_t>();
    h.count = r.get<std::uint64_t>();
    h.payload_size = r.get<std::uint64_t>();
    h.checksum = r.get<std::uint32_t>();
    if (tag != kEndianTag) {
        if (tag == 0x04030201u)
            throw FormatError(FormatErrorKind::EndiannessMismatch, path, "written on a machine with the other byte order");
        throw FormatError(FormatErrorKind::Malformed, path, "unknown endianness tag");
    }
    if (h.version != version)
        throw FormatError(FormatErrorKind::VersionMismatch, path,
                          "found " + std::to_string(h.version) + ", expected " + std::to_string(version));
    const auto payload = data.substr(ContainerHeader::kSize);
    if (payload.size() < h.payload_size)
        throw FormatError(FormatErrorKind::Truncated, path,
                          "payload has " + std::to_string(payload.size()) + " bytes, header declares " +
                              std::to_string(h.payload_size));
    if (payload.size() > h.payload_size)
        throw FormatError(FormatErrorKind::Malformed, path,
                          "payload has " + std::to_string(payload.size()) + " bytes, header declares " +
                              std::to_string(h.payload_size));
    if (crc32(payload) != h.checksum) throw FormatError(FormatErrorKind::ChecksumMismatch, path, "crc32 differs");
    if (header) *header = h;
    return payload;
}

} // namespace odeinf::io
