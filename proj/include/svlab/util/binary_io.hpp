#pragma once

// Little-endian byte buffers with a trailing FNV-1a checksum, shared by the
// checkpoint and state-vector file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "svlab/util/rng.hpp"

namespace svlab {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ChecksumError : public FormatError {
public:
    using FormatError::FormatError;
};

class ByteWriter {
public:
    void bytes(std::string_view s) { buf_.append(s); }

    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }

    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }

    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        buf_.append(s);
    }

    // Appends the FNV-1a hash of everything written so far and returns it.
    std::uint64_t seal() {
        const auto h = fnv1a64(buf_);
        u64(h);
        return h;
    }

    const std::string& buffer() const noexcept { return buf_; }

private:
    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::string_view data, std::string what = "file") : data_(data), what_(std::move(what)) {}

    // Verifies the trailing checksum and restricts reading to the payload.
    // Returns the stored hash.
    std::uint64_t verify_seal() {
        if (data_.size() < 8) throw FormatError(what_ + ": truncated (no checksum)");
        const auto body = data_.substr(0, data_.size() - 8);
        ByteReader tail(data_.substr(data_.size() - 8), what_);
        const auto stored = tail.u64();
        if (fnv1a64(body) != stored) throw ChecksumError(what_ + ": checksum mismatch");
        data_ = body;
        return stored;
    }

    std::string_view bytes(std::size_t n) {
        need(n);
        auto s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }

    std::string str() {
        const auto n = u32();
        return std::string(bytes(n));
    }

    bool at_end() const noexcept { return pos_ == data_.size(); }

    void expect_end() const {
        if (!at_end()) throw FormatError(what_ + ": trailing bytes after payload");
    }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) throw FormatError(what_ + ": truncated");
    }

    std::string_view data_;
    std::size_t pos_ = 0;
    std::string what_;
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::string_view data) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw std::runtime_error("short write to " + path.string());
}

}  // namespace svlab
