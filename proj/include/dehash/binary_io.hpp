#pragma once

// Little-endian readers/writers shared by every on-disk format.

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dehash/common.hpp"

namespace dehash::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

class ByteWriter {
public:
    void magic(std::string_view m) { raw(m.data(), m.size()); }
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v) { raw(&v, sizeof v); }
    void f32(float v) { raw(&v, sizeof v); }
    void f64(double v) { raw(&v, sizeof v); }
    void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }

    template <typename Derived>
    void f32s(const Eigen::DenseBase<Derived>& m) {
        // Column-major traversal, matching Eigen's default storage.
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            for (Eigen::Index r = 0; r < m.rows(); ++r) f32(static_cast<float>(m(r, c)));
    }

    const std::vector<std::uint8_t>& data() const { return buf_; }
    std::vector<std::uint8_t> take() { return std::move(buf_); }

private:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    ByteReader(std::span<const std::uint8_t> data, std::string source)
        : data_(data), source_(std::move(source)) {}

    void expect_magic(std::string_view m) {
        need(m.size(), "magic");
        if (std::memcmp(data_.data() + pos_, m.data(), m.size()) != 0)
            fail("bad magic, expected " + std::string(m));
        pos_ += m.size();
    }
    std::uint8_t u8() { return pod<std::uint8_t>("u8"); }
    std::uint32_t u32() { return pod<std::uint32_t>("u32"); }
    float f32() { return pod<float>("f32"); }
    double f64() { return pod<double>("f64"); }

    std::span<const std::uint8_t> bytes(std::size_t n) {
        need(n, "byte block");
        auto s = data_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

    Matrix f32_matrix(std::size_t rows, std::size_t cols) {
        need(rows * cols * sizeof(float), "float32 block");
        Matrix m(rows, cols);
        for (std::size_t c = 0; c < cols; ++c)
            for (std::size_t r = 0; r < rows; ++r) m(r, c) = f32();
        return m;
    }

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }
    bool at_end() const { return pos_ == data_.size(); }

    [[noreturn]] void fail(const std::string& what) const {
        throw FormatError(source_, pos_, what);
    }

private:
    void need(std::size_t n, const char* what) const {
        if (remaining() < n) fail(std::string("truncated ") + what);
    }
    template <typename T>
    T pod(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::span<const std::uint8_t> data_;
    std::string source_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace dehash::io
