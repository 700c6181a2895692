#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "xflow/numcore/array.hpp"

namespace xflow::io {

enum class ErrorKind { io, version_mismatch, truncated, malformed };

inline std::string_view kind_name(ErrorKind k) {
    switch (k) {
        case ErrorKind::io: return "io";
        case ErrorKind::version_mismatch: return "version_mismatch";
        case ErrorKind::truncated: return "truncated";
        case ErrorKind::malformed: return "malformed";
    }
    return "unknown";
}

/// File-format failure with a machine-checkable kind.
class FormatError : public std::runtime_error {
public:
    FormatError(ErrorKind kind, const std::string& msg)
        : std::runtime_error(std::string(kind_name(kind)) + ": " + msg), kind_(kind) {}
    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

// Containers framed as: magic[4] | u16 version | u32 header length | JSON header | payload.

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }

    template <class U>
    void scalar(U v) {
        static_assert(std::is_trivially_copyable_v<U>);
        unsigned char raw[sizeof(U)];
        std::memcpy(raw, &v, sizeof(U));
        if constexpr (std::endian::native == std::endian::big) {
            std::reverse(raw, raw + sizeof(U));
        }
        bytes(raw, sizeof(U));
    }

    void floats(std::span<const float> values) {
        if constexpr (std::endian::native == std::endian::little) {
            bytes(values.data(), values.size() * sizeof(float));
        } else {
            for (float v : values) scalar(v);
        }
    }

    void frame(std::string_view magic, std::uint16_t version, const nlohmann::json& header) {
        bytes(magic.data(), 4);
        scalar(version);
        const std::string h = header.dump();
        scalar(static_cast<std::uint32_t>(h.size()));
        bytes(h.data(), h.size());
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw FormatError(ErrorKind::io, "cannot open '" + path + "' for writing");
        }
        out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
        if (!out) {
            throw FormatError(ErrorKind::io, "write to '" + path + "' failed");
        }
    }

    [[nodiscard]] const std::vector<unsigned char>& buffer() const { return buf_; }

private:
    std::vector<unsigned char> buf_;
};

class Reader {
public:
    explicit Reader(std::vector<unsigned char> data) : buf_(std::move(data)) {}

    static Reader load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) {
            throw FormatError(ErrorKind::io, "cannot open '" + path + "'");
        }
        std::vector<unsigned char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (in.bad()) {
            throw FormatError(ErrorKind::io, "read of '" + path + "' failed");
        }
        return Reader(std::move(data));
    }

    void bytes(void* p, std::size_t n) {
        need(n);
        std::memcpy(p, buf_.data() + pos_, n);
        pos_ += n;
    }

    template <class U>
    U scalar() {
        unsigned char raw[sizeof(U)];
        bytes(raw, sizeof(U));
        if constexpr (std::endian::native == std::endian::big) {
            std::reverse(raw, raw + sizeof(U));
        }
        U v;
        std::memcpy(&v, raw, sizeof(U));
        return v;
    }

    void floats(std::span<float> out) {
        if constexpr (std::endian::native == std::endian::little) {
            bytes(out.data(), out.size() * sizeof(float));
        } else {
            for (float& v : out) v = scalar<float>();
        }
    }

    /// Checks magic and version, returns the parsed JSON header.
    nlohmann::json frame(std::string_view magic, std::uint16_t version) {
        char m[4];
        if (remaining() < 4) {
            throw FormatError(ErrorKind::truncated, "file shorter than its magic bytes");
        }
        bytes(m, 4);
        if (std::string_view(m, 4) != magic) {
            throw FormatError(ErrorKind::version_mismatch,
                              "bad magic bytes, expected '" + std::string(magic) + "'");
        }
        const auto v = scalar<std::uint16_t>();
        if (v != version) {
            throw FormatError(ErrorKind::version_mismatch,
                              "version " + std::to_string(v) + ", reader supports " + std::to_string(version));
        }
        const auto len = scalar<std::uint32_t>();
        std::string h(len, '\0');
        bytes(h.data(), len);
        try {
            return nlohmann::json::parse(h);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(ErrorKind::malformed, std::string("header: ") + e.what());
        }
    }

    [[nodiscard]] std::size_t remaining() const { return buf_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (remaining() < n) {
            throw FormatError(ErrorKind::truncated, "payload ends " + std::to_string(n - remaining()) +
                                                        " bytes early at offset " + std::to_string(pos_));
        }
    }

    std::vector<unsigned char> buf_;
    std::size_t pos_ = 0;
};

/// Header field access that reports a malformed header instead of a json exception.
template <class U>
U field(const nlohmann::json& j, const char* key) {
    try {
        return j.at(key).get<U>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(ErrorKind::malformed, std::string("header field '") + key + "': " + e.what());
    }
}

}  // namespace xflow::io
