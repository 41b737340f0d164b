#include "dehash/sparse.hpp"

#include <algorithm>
#include <cmath>

namespace dehash {

std::vector<std::size_t> Dictionary::zero_columns() const {
    std::vector<std::size_t> out;
    for (Eigen::Index t = 0; t < columns.cols(); ++t)
        if (columns.col(t).squaredNorm() == 0.0) out.push_back(static_cast<std::size_t>(t));
    return out;
}

Dictionary Dictionary::restrict_to(std::span<const LeafId> ids) const {
    Dictionary out;
    out.vlad_id = vlad_id;
    std::vector<Eigen::Index> keep;
    for (std::size_t t = 0; t < column_ids.size(); ++t)
        if (std::binary_search(ids.begin(), ids.end(), column_ids[t])) keep.push_back(static_cast<Eigen::Index>(t));
    out.columns.resize(columns.rows(), static_cast<Eigen::Index>(keep.size()));
    out.column_ids.reserve(keep.size());
    for (std::size_t j = 0; j < keep.size(); ++j) {
        out.columns.col(static_cast<Eigen::Index>(j)) = columns.col(keep[j]);
        out.column_ids.push_back(column_ids[static_cast<std::size_t>(keep[j])]);
    }
    return out;
}

double lasso_objective(const Matrix& dict, const Vector& v, const Vector& h, double lambda) {
    return (v - dict * h).squaredNorm() + lambda * h.lpNorm<1>();
}

double lasso_kkt_violation(const Matrix& dict, const Vector& v, const Vector& h, double lambda) {
    const Vector grad = -2.0 * dict.transpose() * (v - dict * h) + Vector::Constant(h.size(), lambda);
    double worst = 0.0;
    for (Eigen::Index t = 0; t < h.size(); ++t) {
        if (dict.col(t).squaredNorm() == 0.0) continue;
        worst = std::max(worst, h[t] > 0.0 ? std::abs(grad[t]) : std::max(0.0, -grad[t]));
    }
    return worst;
}

namespace {

struct CdState {
    const Matrix& dict;
    const Vector& v;
    const Vector& col_sq;
    Vector h;
    Vector r;
};

// One cyclic pass; `active_only` skips coordinates currently at zero.
// Returns the objective after the pass.
double sweep(CdState& s, double lambda, bool active_only) {
    for (Eigen::Index t = 0; t < s.h.size(); ++t) {
        if (s.col_sq[t] == 0.0 || (active_only && s.h[t] == 0.0)) continue;
        const double old = s.h[t];
        const double rho = s.dict.col(t).dot(s.r) + s.col_sq[t] * old;
        const double next = std::max(0.0, (rho - 0.5 * lambda) / s.col_sq[t]);
        if (next != old) {
            s.r.noalias() -= (next - old) * s.dict.col(t);
            s.h[t] = next;
        }
    }
    s.r = s.v - s.dict * s.h;  // refresh to keep round-off from accumulating
    return s.r.squaredNorm() + lambda * s.h.sum();
}

// Active-set refinement on the current support. Each step heads for the
// minimizer of the objective over span(support); if the support columns are
// dependent and the l1 term slopes along their null space, it moves along that
// direction instead. Either move stops where a coordinate reaches zero, which
// drops it from the support. Every move lowers the convex objective, and the
// result is kept only if it is not worse than `current`.
void polish(CdState& s, double lambda, double current) {
    Vector h = s.h;
    for (Eigen::Index iter = 0; iter <= h.size(); ++iter) {
        std::vector<Eigen::Index> support;
        for (Eigen::Index t = 0; t < h.size(); ++t)
            if (h[t] > 0.0) support.push_back(t);
        const auto k = static_cast<Eigen::Index>(support.size());
        if (k == 0) break;
        Matrix ds(s.dict.rows(), k);
        Vector hs(k);
        for (Eigen::Index j = 0; j < k; ++j) {
            ds.col(j) = s.dict.col(support[static_cast<std::size_t>(j)]);
            hs[j] = h[support[static_cast<std::size_t>(j)]];
        }
        const Eigen::SelfAdjointEigenSolver<Matrix> eig(ds.transpose() * ds);
        if (eig.info() != Eigen::Success) return;
        const Vector& mu = eig.eigenvalues();
        const Matrix& u = eig.eigenvectors();
        const double cut = 1e-10 * std::max(1.0, mu.maxCoeff()) * static_cast<double>(k);
        const Vector b = ds.transpose() * s.v - Vector::Constant(k, 0.5 * lambda);
        Vector slope = Vector::Zero(k);  // l1 descent direction inside the null space
        Vector target = Vector::Zero(k);  // min-norm stationary point on the span
        for (Eigen::Index i = 0; i < k; ++i) {
            if (mu[i] <= cut)
                slope -= u.col(i) * u.col(i).sum();
            else
                target += u.col(i) * (u.col(i).dot(b) / mu[i]);
        }
        const bool along_null = slope.sum() < -1e-12 * static_cast<double>(k);
        const Vector dir = along_null ? slope : Vector(target - hs);
        double step = 1.0;
        Eigen::Index hit = -1;
        for (Eigen::Index j = 0; j < k; ++j)
            if (dir[j] < 0.0 && hs[j] + step * dir[j] <= 0.0) {
                step = hs[j] / -dir[j];
                hit = j;
            }
        if (along_null && hit < 0) return;  // cannot happen for a descent direction with negative sum
        for (Eigen::Index j = 0; j < k; ++j)
            h[support[static_cast<std::size_t>(j)]] = j == hit ? 0.0 : std::max(0.0, hs[j] + step * dir[j]);
        if (hit < 0) break;  // reached the interior stationary point
    }
    const Vector r = s.v - s.dict * h;
    if (r.squaredNorm() + lambda * h.sum() <= current) {
        s.h = std::move(h);
        s.r = r;
    }
}

// Runs sweeps at `lambda` until a full sweep meets the tolerance. Active-set
// passes between full sweeps are bounded so a cap always ends the stage.
constexpr int kActivePasses = 20;
constexpr int kPathSweeps = 100;

template <typename OnSweep>
bool solve_stage(CdState& s, double lambda, double tol, int max_sweeps, OnSweep&& on_sweep) {
    double prev = s.r.squaredNorm() + lambda * s.h.sum();
    int sweeps = 0;
    while (sweeps < max_sweeps) {
        // settle the current support first; cheap when it is small
        for (int pass = 0; pass < kActivePasses && sweeps < max_sweeps; ++pass) {
            const double obj = sweep(s, lambda, true);
            on_sweep(obj);
            ++sweeps;
            const double decrease = prev - obj;
            prev = obj;
            if (decrease <= 0.1 * tol) break;
        }
        if (sweeps >= max_sweeps) break;
        polish(s, lambda, prev);
        prev = s.r.squaredNorm() + lambda * s.h.sum();
        const double obj = sweep(s, lambda, false);
        on_sweep(obj);
        ++sweeps;
        const double decrease = prev - obj;
        prev = obj;
        if (decrease <= tol && lasso_kkt_violation(s.dict, s.v, s.h, lambda) <= tol) return true;
    }
    return false;
}

}  // namespace

LassoResult solve_nn_lasso(const Matrix& dict, const Vector& v, double lambda, const LassoOptions& opts) {
    require(dict.rows() == v.size(), "solve_nn_lasso: dictionary/vector dimension mismatch");
    require(lambda >= 0.0 && std::isfinite(lambda), "solve_nn_lasso: lambda must be finite and >= 0");
    require(dict.allFinite() && v.allFinite(), "solve_nn_lasso: non-finite input");

    const Eigen::Index T = dict.cols();
    const Vector col_sq = dict.colwise().squaredNorm().transpose();
    CdState s{dict, v, col_sq, Vector::Zero(T), v};

    // Above this every coefficient is zero at the optimum.
    const double lambda_max = T > 0 ? 2.0 * std::max(0.0, (dict.transpose() * v).maxCoeff()) : 0.0;
    if (opts.path_steps > 0 && lambda < lambda_max) {
        const double floor = std::max(lambda, lambda_max * 1e-6);
        const double ratio = std::pow(floor / lambda_max, 1.0 / opts.path_steps);
        double stage = lambda_max;
        for (int k = 0; k < opts.path_steps; ++k) {
            stage *= ratio;
            if (stage <= lambda) break;
            // warm starts only need to be close; the target stage does the real work
            solve_stage(s, stage, opts.tol, std::min(opts.max_iter, kPathSweeps), [](double) {});
        }
    }

    LassoResult res;
    if (opts.record_trace) res.trace.push_back(s.r.squaredNorm() + lambda * s.h.sum());
    res.converged = solve_stage(s, lambda, opts.tol, opts.max_iter, [&](double obj) {
        ++res.iterations;
        if (opts.record_trace) res.trace.push_back(obj);
    });
    res.coefficients = std::move(s.h);
    res.objective = lasso_objective(dict, v, res.coefficients, lambda);
    res.kkt_violation = lasso_kkt_violation(dict, v, res.coefficients, lambda);
    return res;
}

Vector solve_tikhonov(const Matrix& dict, const Vector& v, const Vector& h0, double alpha,
                      std::optional<TikhonovNormalizers> norms) {
    require(dict.rows() == v.size(), "solve_tikhonov: dictionary/vector dimension mismatch");
    require(dict.cols() == h0.size(), "solve_tikhonov: prior length does not match dictionary");
    require(alpha > 0.0 && alpha < 1.0, "solve_tikhonov: alpha must lie in (0, 1)");
    require(dict.allFinite() && v.allFinite() && h0.allFinite(), "solve_tikhonov: non-finite input");

    const TikhonovNormalizers n = norms.value_or(TikhonovNormalizers{v.squaredNorm(), h0.squaredNorm()});
    require(n.data > 0.0 && n.prior > 0.0, "solve_tikhonov: zero normalizer");

    const double a1 = alpha / n.data;
    const double a2 = (1.0 - alpha) / n.prior;
    Matrix system = a1 * dict * dict.transpose();
    system.diagonal().array() += a2;
    const Eigen::LLT<Matrix> llt(system);
    require(llt.info() == Eigen::Success, "solve_tikhonov: system not positive definite");
    const Vector y = llt.solve(v - dict * h0);
    return a1 * (dict.transpose() * y) + h0;
}

}  // namespace dehash
