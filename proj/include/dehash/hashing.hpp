#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dehash/aggregate.hpp"
#include "dehash/context.hpp"

namespace dehash {

/// Projection layouts. RandomProjection is a benchmarking baseline only: it
/// has no reversal path.
enum class HashVariant : std::uint8_t {
    Joint = 0,
    Independent = 1,
    Shared = 2,
    SignBaseline = 3,
    RandomProjection = 4,
};

const char* to_string(HashVariant v);
HashVariant parse_hash_variant(const std::string& s);

/// Packed K-bit code; bit k lives in byte k/8 at position k%8.
class BinaryCode {
public:
    BinaryCode() = default;
    explicit BinaryCode(std::uint32_t bits) : bits_(bits), words_((bits + 63) / 64, 0) {}

    std::uint32_t size() const { return bits_; }
    bool bit(std::uint32_t k) const { return (words_[k / 64] >> (k % 64)) & 1u; }
    void set(std::uint32_t k, bool value);

    std::uint32_t hamming(const BinaryCode& other) const;

    std::vector<std::uint8_t> to_bytes() const;  ///< ceil(K/8) bytes
    static BinaryCode from_bytes(std::uint32_t bits, std::span<const std::uint8_t> bytes);

    std::vector<std::uint8_t> serialize() const;  ///< code file
    static BinaryCode deserialize(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>");

    bool operator==(const BinaryCode&) const = default;

private:
    std::uint32_t bits_ = 0;
    std::vector<std::uint64_t> words_;
};

struct HashOptions {
    HashVariant variant = HashVariant::Shared;
    std::uint32_t bits = 0;
    std::uint64_t seed = 0;
    bool random_rotation = false;  ///< joint only
};

class HashingModel {
public:
    HashingModel(HashVariant variant, std::size_t dim, std::size_t centers, std::uint32_t bits, Vector mean,
                 std::vector<Matrix> projections, std::optional<Matrix> rotation, Vector reversal_scales);

    HashVariant variant() const { return variant_; }
    std::size_t dim() const { return dim_; }
    std::size_t centers() const { return centers_; }
    std::uint32_t bits() const { return bits_; }
    /// Bits per sub-vector for the split layouts.
    std::uint32_t bits_per_block() const { return bits_ / static_cast<std::uint32_t>(centers_); }

    const Vector& mean() const { return mean_; }
    const std::vector<Matrix>& projections() const { return projections_; }
    const std::optional<Matrix>& rotation() const { return rotation_; }
    const Vector& reversal_scales() const { return scales_; }

    /// Real-valued projections before binarization (length K).
    Vector project(const VladVector& v) const;
    /// Bit k = 1 iff projection k >= 0.
    BinaryCode encode(const VladVector& v) const;
    /// mean + W R' diag(scales) (2b - 1), in raw residual space.
    VladVector approximate_vlad(const BinaryCode& c) const;
    /// Maps real projections straight back: mean + W R' z.
    VladVector reconstruct_projection(const Vector& z) const;

    std::uint64_t projection_bytes() const;

    std::vector<std::uint8_t> serialize() const;
    static HashingModel deserialize(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>");
    void save(const std::string& path) const;
    static HashingModel load(const std::string& path);

    /// Exact parameter equality.
    bool operator==(const HashingModel& o) const;

private:
    Vector centered(const VladVector& v) const;
    Vector back_project(const Vector& z) const;

    HashVariant variant_;
    std::size_t dim_;
    std::size_t centers_;
    std::uint32_t bits_;
    Vector mean_;
    std::vector<Matrix> projections_;
    std::optional<Matrix> rotation_;
    Vector scales_;
};

/// Principal directions of the columns of `samples` (already centered), largest
/// first, each sign-normalized so its largest-magnitude entry is positive.
struct PcaBasis {
    Matrix directions;  ///< dim x k, orthonormal columns
    Vector variances;   ///< k eigenvalues of the sample covariance, descending
};
PcaBasis principal_directions(const Matrix& centered_samples, std::size_t k);

/// Haar-distributed orthogonal matrix from the QR of a seeded Gaussian matrix.
Matrix random_rotation(std::size_t k, std::uint64_t seed);

HashingModel train_hashing(std::span<const VladVector> training, const HashOptions& opts);

/// Bytes of projection matrix a device must hold: joint D*N*K*4, independent
/// D*K*4, shared D*(K/N)*4, sign baseline 0, random projection D*N*K*4.
std::uint64_t projection_bytes(HashVariant variant, std::uint64_t dim, std::uint64_t centers, std::uint64_t bits);
/// Bytes of the tree levels a device needs to compute VLAD: every node from
/// level 1 down to the VLAD level, D float32s each.
std::uint64_t device_tree_bytes(std::uint64_t dim, std::uint64_t branch, std::uint32_t vlad_level);
std::uint64_t mobile_memory_bytes(HashVariant variant, std::uint64_t dim, std::uint64_t centers, std::uint64_t bits,
                                  std::uint64_t branch, std::uint32_t vlad_level);

/// Payload bytes for a code plus its context: ceil(K/8) + 16 for GPS + 4 for a
/// category label. Wire framing is not counted.
std::uint64_t transmission_size(std::uint32_t bits, const ContextTag& context);
inline std::uint64_t transmission_size(const BinaryCode& c, const ContextTag& context) {
    return transmission_size(c.size(), context);
}

}  // namespace dehash
