#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace dehash {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Column-major descriptor set: one descriptor per column.
using DescriptorSet = Eigen::MatrixXd;

using ImageId = std::uint32_t;
using LeafId = std::uint32_t;
using CenterId = std::uint32_t;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed on-disk artifact. Carries the file and byte offset of the failure.
class FormatError : public Error {
public:
    FormatError(std::string file, std::uint64_t offset, const std::string& what)
        : Error(file + " @" + std::to_string(offset) + ": " + what),
          file_(std::move(file)), offset_(offset) {}

    const std::string& file() const noexcept { return file_; }
    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::string file_;
    std::uint64_t offset_;
};

inline void require(bool cond, const char* what) {
    if (!cond) throw Error(what);
}

/// Rounds every entry to the nearest float32. Applied to trained parameters so
/// that an in-memory model and its serialized copy are identical.
template <typename Derived>
void round_to_float(Eigen::MatrixBase<Derived>& m) {
    m = m.template cast<float>().template cast<double>();
}

}  // namespace dehash
