#pragma once

#include <optional>
#include <span>
#include <vector>

#include "dehash/common.hpp"

namespace dehash {

/// Reconstruction dictionary of one VLAD center: column t is
/// leaf_center(column_ids[t]) - vlad_center(vlad_id).
struct Dictionary {
    CenterId vlad_id = 0;
    Matrix columns;                 ///< D x T
    std::vector<LeafId> column_ids; ///< ascending, aligned with columns

    std::size_t size() const { return column_ids.size(); }
    /// Positions of all-zero columns (a leaf sitting on its VLAD center).
    std::vector<std::size_t> zero_columns() const;
    /// Keeps only columns whose id is in `ids` (sorted ascending).
    Dictionary restrict_to(std::span<const LeafId> ids) const;
};

struct LassoOptions {
    double tol = 1e-6;      ///< bound on the per-sweep objective decrease and on the KKT violation
    int max_iter = 1000;    ///< coordinate sweeps at the target lambda
    /// Warm-start stages on a geometric lambda path from the smallest lambda
    /// that zeroes every coefficient down to the target, each capped at 100
    /// sweeps. 0 solves cold.
    int path_steps = 40;
    bool record_trace = false;
};

struct LassoResult {
    Vector coefficients;    ///< length T, all >= 0
    double objective = 0.0;
    double kkt_violation = 0.0;
    int iterations = 0;     ///< sweeps at the target lambda
    bool converged = false;
    std::vector<double> trace;  ///< objective after each target-lambda sweep, when requested
};

/// Objective ||v - D h||^2 + lambda * ||h||_1 (no 1/2 on the quadratic term).
double lasso_objective(const Matrix& dict, const Vector& v, const Vector& h, double lambda);

/// Largest KKT violation of `h` for the non-negative problem: |g_t| on the
/// support and max(0, -g_t) off it, with g the objective gradient.
double lasso_kkt_violation(const Matrix& dict, const Vector& v, const Vector& h, double lambda);

/// min_h ||v - D h||^2 + lambda ||h||_1 subject to h >= 0, by cyclic
/// coordinate descent. Each coordinate step is the exact minimizer
/// max(0, (d_t' r_t - lambda/2) / ||d_t||^2). All-zero columns stay at zero.
/// Sweeps alternate between the active coordinates and the full set. Before
/// each full sweep an active-set refinement moves toward the minimizer over
/// the current support, kept only if it does not raise the objective. A full
/// sweep that lowers the objective by at most tol with a KKT violation of at
/// most tol ends the solve. On hitting max_iter the last iterate is returned
/// with converged = false.
LassoResult solve_nn_lasso(const Matrix& dict, const Vector& v, double lambda,
                           const LassoOptions& opts = {});

inline LassoResult solve_nn_lasso(const Dictionary& dict, const Vector& v, double lambda,
                                  const LassoOptions& opts = {}) {
    return solve_nn_lasso(dict.columns, v, lambda, opts);
}

/// Overrides for the data and prior normalizers; defaults are ||v||^2 and ||h0||^2.
struct TikhonovNormalizers {
    double data = 1.0;
    double prior = 1.0;
};

/// Closed-form minimizer of
///   alpha ||v - D h||^2 / N1 + (1 - alpha) ||h - h0||^2 / N2
/// evaluated as a1 D' (a1 D D' + a2 I)^-1 (v - D h0) + h0 with a1 = alpha/N1,
/// a2 = (1-alpha)/N2. Only a D x D system is factored, whatever T is.
Vector solve_tikhonov(const Matrix& dict, const Vector& v, const Vector& h0, double alpha,
                      std::optional<TikhonovNormalizers> norms = std::nullopt);

inline Vector solve_tikhonov(const Dictionary& dict, const Vector& v, const Vector& h0, double alpha,
                             std::optional<TikhonovNormalizers> norms = std::nullopt) {
    return solve_tikhonov(dict.columns, v, h0, alpha, norms);
}

}  // namespace dehash
