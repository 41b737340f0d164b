#include "dehash/hashing.hpp"

#include <bit>
#include <cmath>
#include <random>

#include "dehash/binary_io.hpp"

namespace dehash {

namespace {

constexpr std::string_view kModelMagic = "DHHASH01";
constexpr std::string_view kCodeMagic = "DHCODE01";

// Keeps every reversal scale strictly positive even for directions with no
// training variance.
constexpr double kMinScale = 1e-20;

bool same(const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
}

void normalize_sign(Eigen::Ref<Vector> col) {
    Eigen::Index arg = 0;
    col.cwiseAbs().maxCoeff(&arg);
    if (col[arg] < 0.0) col = -col;
}

}  // namespace

const char* to_string(HashVariant v) {
    switch (v) {
        case HashVariant::Joint: return "joint";
        case HashVariant::Independent: return "independent";
        case HashVariant::Shared: return "shared";
        case HashVariant::SignBaseline: return "sign";
        case HashVariant::RandomProjection: return "rp";
    }
    return "?";
}

HashVariant parse_hash_variant(const std::string& s) {
    if (s == "joint") return HashVariant::Joint;
    if (s == "independent" || s == "ind") return HashVariant::Independent;
    if (s == "shared") return HashVariant::Shared;
    if (s == "sign") return HashVariant::SignBaseline;
    if (s == "rp") return HashVariant::RandomProjection;
    throw Error("unknown hashing variant '" + s + "'");
}

// ---------------------------------------------------------------------------
// BinaryCode

void BinaryCode::set(std::uint32_t k, bool value) {
    require(k < bits_, "code: bit index out of range");
    const std::uint64_t mask = std::uint64_t{1} << (k % 64);
    if (value)
        words_[k / 64] |= mask;
    else
        words_[k / 64] &= ~mask;
}

std::uint32_t BinaryCode::hamming(const BinaryCode& other) const {
    require(bits_ == other.bits_, "code: length mismatch");
    std::uint32_t d = 0;
    for (std::size_t w = 0; w < words_.size(); ++w) d += static_cast<std::uint32_t>(std::popcount(words_[w] ^ other.words_[w]));
    return d;
}

std::vector<std::uint8_t> BinaryCode::to_bytes() const {
    std::vector<std::uint8_t> out((bits_ + 7) / 8);
    for (std::size_t b = 0; b < out.size(); ++b) out[b] = static_cast<std::uint8_t>(words_[b / 8] >> (8 * (b % 8)));
    return out;
}

BinaryCode BinaryCode::from_bytes(std::uint32_t bits, std::span<const std::uint8_t> bytes) {
    require(bytes.size() == (bits + 7) / 8, "code: byte count does not match bit length");
    BinaryCode c(bits);
    for (std::size_t b = 0; b < bytes.size(); ++b) c.words_[b / 8] |= std::uint64_t{bytes[b]} << (8 * (b % 8));
    if (bits % 8 != 0 && (bytes.back() >> (bits % 8)) != 0) throw Error("code: padding bits set");
    return c;
}

std::vector<std::uint8_t> BinaryCode::serialize() const {
    io::ByteWriter w;
    w.magic(kCodeMagic);
    w.u32(bits_);
    w.bytes(to_bytes());
    return w.take();
}

BinaryCode BinaryCode::deserialize(std::span<const std::uint8_t> bytes, const std::string& source) {
    io::ByteReader r(bytes, source);
    r.expect_magic(kCodeMagic);
    const auto bits = r.u32();
    const auto packed = r.bytes((static_cast<std::size_t>(bits) + 7) / 8);
    if (!r.at_end()) r.fail("trailing bytes");
    try {
        return from_bytes(bits, packed);
    } catch (const Error& e) {
        r.fail(e.what());
    }
}

// ---------------------------------------------------------------------------
// HashingModel

HashingModel::HashingModel(HashVariant variant, std::size_t dim, std::size_t centers, std::uint32_t bits, Vector mean,
                           std::vector<Matrix> projections, std::optional<Matrix> rotation, Vector reversal_scales)
    : variant_(variant), dim_(dim), centers_(centers), bits_(bits), mean_(std::move(mean)),
      projections_(std::move(projections)), rotation_(std::move(rotation)), scales_(std::move(reversal_scales)) {
    require(dim_ > 0 && centers_ > 0 && bits_ > 0, "hash model: empty shape");
    const auto full = static_cast<Eigen::Index>(dim_ * centers_);
    require(mean_.size() == full, "hash model: mean has wrong length");
    require(scales_.size() == static_cast<Eigen::Index>(bits_), "hash model: reversal scales have wrong length");
    require((scales_.array() > 0.0).all(), "hash model: reversal scales must be positive");
    const auto block = static_cast<Eigen::Index>(bits_ / centers_);
    switch (variant_) {
        case HashVariant::Joint:
        case HashVariant::RandomProjection:
            require(projections_.size() == 1 && projections_[0].rows() == full &&
                        projections_[0].cols() == static_cast<Eigen::Index>(bits_),
                    "hash model: joint projection must be (D*N) x K");
            break;
        case HashVariant::Independent:
            require(bits_ % centers_ == 0, "hash model: K must be divisible by N");
            require(projections_.size() == centers_, "hash model: independent layout needs N projections");
            for (const auto& p : projections_)
                require(p.rows() == static_cast<Eigen::Index>(dim_) && p.cols() == block,
                        "hash model: independent projection must be D x K/N");
            break;
        case HashVariant::Shared:
            require(bits_ % centers_ == 0, "hash model: K must be divisible by N");
            require(projections_.size() == 1 && projections_[0].rows() == static_cast<Eigen::Index>(dim_) &&
                        projections_[0].cols() == block,
                    "hash model: shared projection must be D x K/N");
            break;
        case HashVariant::SignBaseline:
            require(projections_.empty(), "hash model: sign baseline has no projection");
            require(static_cast<Eigen::Index>(bits_) == full, "hash model: sign baseline needs K = D*N");
            break;
        default:
            throw Error("hash model: unknown variant");
    }
    if (rotation_) {
        require(variant_ == HashVariant::Joint, "hash model: rotation is only defined for the joint layout");
        require(rotation_->rows() == static_cast<Eigen::Index>(bits_) && rotation_->cols() == static_cast<Eigen::Index>(bits_),
                "hash model: rotation must be K x K");
    }
}

bool HashingModel::operator==(const HashingModel& o) const {
    if (variant_ != o.variant_ || dim_ != o.dim_ || centers_ != o.centers_ || bits_ != o.bits_) return false;
    if (!same(mean_, o.mean_) || !same(scales_, o.scales_)) return false;
    if (projections_.size() != o.projections_.size()) return false;
    for (std::size_t i = 0; i < projections_.size(); ++i)
        if (!same(projections_[i], o.projections_[i])) return false;
    if (rotation_.has_value() != o.rotation_.has_value()) return false;
    return !rotation_ || same(*rotation_, *o.rotation_);
}

Vector HashingModel::centered(const VladVector& v) const {
    require(v.dim == dim_ && v.centers == centers_, "hash model: VLAD shape does not match model");
    return v.values - mean_;
}

Vector HashingModel::project(const VladVector& v) const {
    const Vector x = centered(v);
    const auto d = static_cast<Eigen::Index>(dim_);
    const auto block = static_cast<Eigen::Index>(bits_per_block());
    Vector z(bits_);
    switch (variant_) {
        case HashVariant::Joint:
        case HashVariant::RandomProjection:
            z.noalias() = projections_[0].transpose() * x;
            if (rotation_) z = (*rotation_ * z).eval();
            break;
        case HashVariant::Independent:
            for (std::size_t i = 0; i < centers_; ++i)
                z.segment(static_cast<Eigen::Index>(i) * block, block).noalias() =
                    projections_[i].transpose() * x.segment(static_cast<Eigen::Index>(i) * d, d);
            break;
        case HashVariant::Shared:
            for (std::size_t i = 0; i < centers_; ++i)
                z.segment(static_cast<Eigen::Index>(i) * block, block).noalias() =
                    projections_[0].transpose() * x.segment(static_cast<Eigen::Index>(i) * d, d);
            break;
        case HashVariant::SignBaseline:
            z = x;
            break;
    }
    return z;
}

BinaryCode HashingModel::encode(const VladVector& v) const {
    const Vector z = project(v);
    BinaryCode c(bits_);
    for (std::uint32_t k = 0; k < bits_; ++k)
        if (z[k] >= 0.0) c.set(k, true);  // sgn(0) counts as positive
    return c;
}

Vector HashingModel::back_project(const Vector& z) const {
    require(z.size() == static_cast<Eigen::Index>(bits_), "hash model: projection length mismatch");
    const auto d = static_cast<Eigen::Index>(dim_);
    const auto block = static_cast<Eigen::Index>(bits_per_block());
    Vector x(mean_.size());
    switch (variant_) {
        case HashVariant::Joint:
            x.noalias() = projections_[0] * (rotation_ ? Vector(rotation_->transpose() * z) : z);
            break;
        case HashVariant::Independent:
            for (std::size_t i = 0; i < centers_; ++i)
                x.segment(static_cast<Eigen::Index>(i) * d, d).noalias() =
                    projections_[i] * z.segment(static_cast<Eigen::Index>(i) * block, block);
            break;
        case HashVariant::Shared:
            for (std::size_t i = 0; i < centers_; ++i)
                x.segment(static_cast<Eigen::Index>(i) * d, d).noalias() =
                    projections_[0] * z.segment(static_cast<Eigen::Index>(i) * block, block);
            break;
        case HashVariant::SignBaseline:
            x = z;
            break;
        case HashVariant::RandomProjection:
            throw Error("random projection codes cannot be reversed");
    }
    return x + mean_;
}

VladVector HashingModel::reconstruct_projection(const Vector& z) const {
    VladVector out(dim_, centers_);
    out.values = back_project(z);
    return out;
}

VladVector HashingModel::approximate_vlad(const BinaryCode& c) const {
    require(c.size() == bits_, "hash model: code length does not match model");
    Vector z(bits_);
    for (std::uint32_t k = 0; k < bits_; ++k) z[k] = c.bit(k) ? scales_[k] : -scales_[k];
    return reconstruct_projection(z);
}

std::uint64_t HashingModel::projection_bytes() const {
    return dehash::projection_bytes(variant_, dim_, centers_, bits_);
}

// Layout: "DHHASH01", u8 variant, u32 D, u32 N, u32 K, D*N f32 mean,
// projection f32s (joint/rp: one (D*N) x K; independent: N blocks of D x K/N;
// shared: one D x K/N; sign: none), u8 rotation flag, K*K f32 rotation when
// flagged, K f32 reversal scales. Matrices are column-major.
std::vector<std::uint8_t> HashingModel::serialize() const {
    io::ByteWriter w;
    w.magic(kModelMagic);
    w.u8(static_cast<std::uint8_t>(variant_));
    w.u32(static_cast<std::uint32_t>(dim_));
    w.u32(static_cast<std::uint32_t>(centers_));
    w.u32(bits_);
    w.f32s(mean_);
    for (const auto& p : projections_) w.f32s(p);
    w.u8(rotation_ ? 1 : 0);
    if (rotation_) w.f32s(*rotation_);
    w.f32s(scales_);
    return w.take();
}

HashingModel HashingModel::deserialize(std::span<const std::uint8_t> bytes, const std::string& source) {
    io::ByteReader r(bytes, source);
    r.expect_magic(kModelMagic);
    const auto variant_byte = r.u8();
    if (variant_byte > static_cast<std::uint8_t>(HashVariant::RandomProjection)) r.fail("unknown hashing variant");
    const auto variant = static_cast<HashVariant>(variant_byte);
    const std::size_t dim = r.u32();
    const std::size_t centers = r.u32();
    const std::uint32_t bits = r.u32();
    if (dim == 0 || centers == 0 || bits == 0) r.fail("empty model shape");
    const std::size_t full = dim * centers;
    Vector mean = r.f32_matrix(full, 1);

    std::vector<Matrix> projections;
    switch (variant) {
        case HashVariant::Joint:
        case HashVariant::RandomProjection:
            projections.push_back(r.f32_matrix(full, bits));
            break;
        case HashVariant::Independent:
            if (bits % centers != 0) r.fail("K not divisible by N");
            for (std::size_t i = 0; i < centers; ++i) projections.push_back(r.f32_matrix(dim, bits / centers));
            break;
        case HashVariant::Shared:
            if (bits % centers != 0) r.fail("K not divisible by N");
            projections.push_back(r.f32_matrix(dim, bits / centers));
            break;
        case HashVariant::SignBaseline:
            break;
    }
    std::optional<Matrix> rotation;
    const auto flag = r.u8();
    if (flag > 1) r.fail("bad rotation flag");
    if (flag == 1) rotation = r.f32_matrix(bits, bits);
    Vector scales = r.f32_matrix(bits, 1);
    if (!r.at_end()) r.fail("trailing bytes");
    try {
        return HashingModel(variant, dim, centers, bits, std::move(mean), std::move(projections), std::move(rotation),
                            std::move(scales));
    } catch (const FormatError&) {
        throw;
    } catch (const Error& e) {
        r.fail(e.what());
    }
}

void HashingModel::save(const std::string& path) const { io::write_file(path, serialize()); }

HashingModel HashingModel::load(const std::string& path) {
    const auto bytes = io::read_file(path);
    return deserialize(bytes, path);
}

// ---------------------------------------------------------------------------
// Training

PcaBasis principal_directions(const Matrix& samples, std::size_t k) {
    const Eigen::Index dim = samples.rows();
    const Eigen::Index n = samples.cols();
    require(n >= 2, "pca: need at least two samples");
    require(k >= 1 && static_cast<Eigen::Index>(k) <= dim, "pca: requested more directions than dimensions");
    const auto kk = static_cast<Eigen::Index>(k);
    const double denom = static_cast<double>(n);

    PcaBasis basis;
    basis.directions.resize(dim, kk);
    basis.variances.resize(kk);
    if (dim <= n) {
        const Matrix cov = (samples * samples.transpose()) / denom;
        const Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
        require(eig.info() == Eigen::Success, "pca: eigen-decomposition failed");
        for (Eigen::Index j = 0; j < kk; ++j) {
            basis.directions.col(j) = eig.eigenvectors().col(dim - 1 - j);
            basis.variances[j] = std::max(0.0, eig.eigenvalues()[dim - 1 - j]);
        }
    } else {
        // fewer samples than dimensions: eigen-decompose the n x n Gram matrix
        require(kk <= n - 1, "pca: requested more directions than the sample rank");
        const Matrix gram = samples.transpose() * samples;
        const Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
        require(eig.info() == Eigen::Success, "pca: eigen-decomposition failed");
        for (Eigen::Index j = 0; j < kk; ++j) {
            const double lambda = eig.eigenvalues()[n - 1 - j];
            require(lambda > 0.0, "pca: rank-deficient training data");
            basis.directions.col(j) = samples * eig.eigenvectors().col(n - 1 - j) / std::sqrt(lambda);
            basis.variances[j] = lambda / denom;
        }
    }
    for (Eigen::Index j = 0; j < kk; ++j) normalize_sign(basis.directions.col(j));
    return basis;
}

Matrix random_rotation(std::size_t k, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const auto kk = static_cast<Eigen::Index>(k);
    Matrix g(kk, kk);
    for (Eigen::Index c = 0; c < kk; ++c)
        for (Eigen::Index r = 0; r < kk; ++r) g(r, c) = gauss(rng);
    const Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ();
    const Matrix rr = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Eigen::Index j = 0; j < kk; ++j)
        if (rr(j, j) < 0.0) q.col(j) = -q.col(j);
    return q;
}

HashingModel train_hashing(std::span<const VladVector> training, const HashOptions& opts) {
    require(!training.empty(), "train_hashing: empty training set");
    const std::size_t dim = training[0].dim;
    const std::size_t centers = training[0].centers;
    const std::size_t full = dim * centers;
    const std::size_t n = training.size();
    const std::uint32_t bits = opts.bits;
    require(dim > 0 && centers > 0, "train_hashing: empty VLAD shape");
    for (const auto& v : training)
        require(v.dim == dim && v.centers == centers && v.values.allFinite(), "train_hashing: inconsistent training VLADs");
    require(bits > 0, "train_hashing: K must be positive");
    require(!opts.random_rotation || opts.variant == HashVariant::Joint, "train_hashing: rotation applies to joint only");

    Matrix x(static_cast<Eigen::Index>(full), static_cast<Eigen::Index>(n));
    for (std::size_t j = 0; j < n; ++j) x.col(static_cast<Eigen::Index>(j)) = training[j].values;

    const auto d = static_cast<Eigen::Index>(dim);
    Vector mean = Vector::Zero(static_cast<Eigen::Index>(full));
    std::vector<Matrix> projections;
    std::optional<Matrix> rotation;

    switch (opts.variant) {
        case HashVariant::Joint: {
            require(bits <= full && bits + 1 <= n, "train_hashing: K exceeds the PCA rank bound min(D*N, n-1)");
            mean = x.rowwise().mean();
            projections.push_back(principal_directions(x.colwise() - mean, bits).directions);
            if (opts.random_rotation) rotation = random_rotation(bits, opts.seed);
            break;
        }
        case HashVariant::Independent: {
            require(bits % centers == 0, "train_hashing: K must be divisible by N");
            require(bits / centers <= dim, "train_hashing: K/N exceeds D");
            mean = x.rowwise().mean();
            for (std::size_t i = 0; i < centers; ++i) {
                const auto rows = x.middleRows(static_cast<Eigen::Index>(i) * d, d);
                const Vector block_mean = mean.segment(static_cast<Eigen::Index>(i) * d, d);
                projections.push_back(principal_directions(rows.colwise() - block_mean, bits / centers).directions);
            }
            break;
        }
        case HashVariant::Shared: {
            require(bits % centers == 0, "train_hashing: K must be divisible by N");
            require(bits / centers <= dim, "train_hashing: K/N exceeds D");
            // every sub-vector of every training VLAD is one D-dimensional sample
            Matrix pooled(d, static_cast<Eigen::Index>(n * centers));
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t i = 0; i < centers; ++i)
                    pooled.col(static_cast<Eigen::Index>(j * centers + i)) =
                        x.col(static_cast<Eigen::Index>(j)).segment(static_cast<Eigen::Index>(i) * d, d);
            const Vector pooled_mean = pooled.rowwise().mean();
            projections.push_back(principal_directions(pooled.colwise() - pooled_mean, bits / centers).directions);
            mean = pooled_mean.replicate(static_cast<Eigen::Index>(centers), 1);
            break;
        }
        case HashVariant::SignBaseline:
            require(bits == full, "train_hashing: sign baseline produces exactly D*N bits");
            break;
        case HashVariant::RandomProjection: {
            mean = x.rowwise().mean();
            std::mt19937_64 rng(opts.seed);
            std::normal_distribution<double> gauss(0.0, 1.0);
            Matrix w(static_cast<Eigen::Index>(full), static_cast<Eigen::Index>(bits));
            for (Eigen::Index c = 0; c < w.cols(); ++c)
                for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = gauss(rng);
            projections.push_back(w / std::sqrt(static_cast<double>(full)));
            break;
        }
    }

    round_to_float(mean);
    for (auto& p : projections) round_to_float(p);
    if (rotation) round_to_float(*rotation);

    // reversal scales: mean |projection| per bit over the training set
    HashingModel provisional(opts.variant, dim, centers, bits, mean, projections, rotation,
                             Vector::Ones(static_cast<Eigen::Index>(bits)));
    Vector scales = Vector::Zero(static_cast<Eigen::Index>(bits));
    for (const auto& v : training) scales += provisional.project(v).cwiseAbs();
    scales /= static_cast<double>(n);
    scales = scales.cwiseMax(kMinScale);
    round_to_float(scales);
    scales = scales.cwiseMax(kMinScale);

    return HashingModel(opts.variant, dim, centers, bits, std::move(mean), std::move(projections), std::move(rotation),
                        std::move(scales));
}

// ---------------------------------------------------------------------------
// Accounting

std::uint64_t projection_bytes(HashVariant variant, std::uint64_t dim, std::uint64_t centers, std::uint64_t bits) {
    switch (variant) {
        case HashVariant::Joint:
        case HashVariant::RandomProjection: return dim * centers * bits * 4;
        case HashVariant::Independent: return dim * bits * 4;
        case HashVariant::Shared: return dim * (bits / centers) * 4;
        case HashVariant::SignBaseline: return 0;
    }
    return 0;
}

std::uint64_t device_tree_bytes(std::uint64_t dim, std::uint64_t branch, std::uint32_t vlad_level) {
    std::uint64_t nodes = 0;
    std::uint64_t level_nodes = 1;
    for (std::uint32_t l = 1; l <= vlad_level; ++l) {
        level_nodes *= branch;
        nodes += level_nodes;
    }
    return dim * nodes * 4;
}

std::uint64_t mobile_memory_bytes(HashVariant variant, std::uint64_t dim, std::uint64_t centers, std::uint64_t bits,
                                  std::uint64_t branch, std::uint32_t vlad_level) {
    return projection_bytes(variant, dim, centers, bits) + device_tree_bytes(dim, branch, vlad_level);
}

std::uint64_t transmission_size(std::uint32_t bits, const ContextTag& context) {
    std::uint64_t bytes = (static_cast<std::uint64_t>(bits) + 7) / 8;
    if (context.gps) bytes += 16;
    if (context.category) bytes += 4;
    return bytes;
}

}  // namespace dehash
