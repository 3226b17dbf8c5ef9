#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "vlrr/tensor.hpp"

namespace vlrr::detail {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
    }
}

inline void put_f64(std::vector<std::uint8_t>& out, double value) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &value, sizeof bits);
    put_le<std::uint64_t>(out, bits);
}

class ByteReader {
public:
    ByteReader(std::span<const std::uint8_t> bytes, std::string format) : bytes_(bytes), format_(std::move(format)) {}

    template <typename T>
    T get(const char* what) {
        need(sizeof(T), what);
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        }
        pos_ += sizeof(T);
        return static_cast<T>(v);
    }

    double get_f64(const char* what) {
        const auto bits = get<std::uint64_t>(what);
        double v = 0.0;
        std::memcpy(&v, &bits, sizeof v);
        return v;
    }

    std::span<const std::uint8_t> take(std::size_t n, const char* what) {
        need(n, what);
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) {
            throw FormatError(format_ + " file truncated while reading " + what);
        }
    }

    std::span<const std::uint8_t> bytes_;
    std::string format_;
    std::size_t pos_ = 0;
};

} // namespace vlrr::detail
