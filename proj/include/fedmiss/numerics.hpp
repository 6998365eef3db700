#pragma once

// Small dense linear algebra used everywhere else. Matrices are row-major
// doubles (row-major because every wire format ships matrices as row-major
// flat arrays). Solvers are guarded: near-singular systems throw instead of
// silently inverting noise.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "fedmiss/errors.hpp"

namespace fedmiss {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline std::vector<double> to_std(const Vector& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

inline Vector from_std(const std::vector<double>& v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = v[static_cast<std::size_t>(i)];
  return out;
}

// Logistic function, stable in both tails (no overflow for |x| up to ~700).
inline double expit(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// log(1 + exp(x)) without overflow.
inline double log1pexp(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

namespace detail {

inline void require_finite(const Matrix& a, const char* who) {
  if (!a.allFinite()) throw Error(std::string(who) + ": non-finite entries");
}
inline void require_finite(const Vector& v, const char* who) {
  if (!v.allFinite()) throw Error(std::string(who) + ": non-finite entries");
}

}  // namespace detail

// Solves A x = b for symmetric positive (semi)definite A via pivoted LDLT.
// A pivot at or below 1e-12 * max(diag A) is treated as singular. One step of
// iterative refinement keeps the residual at ||Ax - b||_inf <= 1e-8 (1 + ||b||_inf)
// for any system the pivot guard accepts.
inline Vector solve_spd(const Matrix& a, const Vector& b) {
  if (a.rows() != a.cols()) throw DimensionMismatch("solve_spd: matrix not square");
  if (a.rows() != b.size()) throw DimensionMismatch("solve_spd: rhs length != matrix order");
  detail::require_finite(a, "solve_spd");
  detail::require_finite(b, "solve_spd");
  const double scale = a.cwiseAbs().maxCoeff();
  if (a.rows() > 1) {
    const double asym = (a - Matrix(a.transpose())).cwiseAbs().maxCoeff();
    if (asym > 1e-9 * std::max(scale, 1e-300))
      throw Error("solve_spd: input not symmetric within 1e-9 relative");
  }
  const double maxdiag = a.diagonal().maxCoeff();
  const Eigen::LDLT<Eigen::MatrixXd> ldlt{Eigen::MatrixXd(a)};
  const Eigen::VectorXd d = ldlt.vectorD();
  const double threshold = 1e-12 * std::max(maxdiag, 0.0);
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    if (!(d[i] > threshold)) throw SingularMatrix("solve_spd: pivot below threshold");
  }
  Vector x = ldlt.solve(b);
  x += ldlt.solve(b - a * x);  // one refinement step
  return x;
}

// General solve via partial-pivot LU (for nonsymmetric systems, e.g. the
// block-triangular bread matrix of a stacked sandwich). Same singularity
// policy, with pivots compared against 1e-12 * max|A|.
inline Vector solve_lu(const Matrix& a, const Vector& b) {
  if (a.rows() != a.cols()) throw DimensionMismatch("solve_lu: matrix not square");
  if (a.rows() != b.size()) throw DimensionMismatch("solve_lu: rhs length != matrix order");
  detail::require_finite(a, "solve_lu");
  detail::require_finite(b, "solve_lu");
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu{Eigen::MatrixXd(a)};
  const double scale = a.cwiseAbs().maxCoeff();
  const Eigen::VectorXd piv = lu.matrixLU().diagonal();
  for (Eigen::Index i = 0; i < piv.size(); ++i) {
    if (std::abs(piv[i]) <= 1e-12 * std::max(scale, 1e-300))
      throw SingularMatrix("solve_lu: pivot below threshold");
  }
  Vector x = lu.solve(b);
  x += lu.solve(b - a * x);
  return x;
}

// Matrix right-hand-side variant of solve_lu (shares the pivot policy).
inline Matrix solve_lu(const Matrix& a, const Matrix& b) {
  if (a.rows() != a.cols()) throw DimensionMismatch("solve_lu: matrix not square");
  if (a.rows() != b.rows()) throw DimensionMismatch("solve_lu: rhs rows != matrix order");
  detail::require_finite(a, "solve_lu");
  detail::require_finite(b, "solve_lu");
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu{Eigen::MatrixXd(a)};
  const double scale = a.cwiseAbs().maxCoeff();
  const Eigen::VectorXd piv = lu.matrixLU().diagonal();
  for (Eigen::Index i = 0; i < piv.size(); ++i) {
    if (std::abs(piv[i]) <= 1e-12 * std::max(scale, 1e-300))
      throw SingularMatrix("solve_lu: pivot below threshold");
  }
  Matrix x = lu.solve(Eigen::MatrixXd(b));
  x += lu.solve(Eigen::MatrixXd(b - a * x));
  return x;
}

// Weighted least squares: argmin sum_i w_i (y_i - x_i' beta)^2, computed as
// solve_spd(X'WX, X'Wy). Weights must be >= 0; at least p rows need w > 0.
inline Vector wls(const Matrix& x, const Vector& y, const Vector& w) {
  const Eigen::Index n = x.rows(), p = x.cols();
  if (y.size() != n || w.size() != n) throw DimensionMismatch("wls: rows(X), len(y), len(w) differ");
  detail::require_finite(x, "wls");
  detail::require_finite(y, "wls");
  detail::require_finite(w, "wls");
  Eigen::Index active = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (w[i] < 0.0) throw Error("wls: negative weight");
    if (w[i] > 0.0) ++active;
  }
  if (active < p) throw SingularMatrix("wls: fewer positively weighted rows than parameters");
  Matrix xtwx = Matrix::Zero(p, p);
  Vector xtwy = Vector::Zero(p);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (w[i] == 0.0) continue;
    const auto xi = x.row(i);
    xtwx.noalias() += w[i] * xi.transpose() * xi;
    xtwy.noalias() += w[i] * y[i] * xi.transpose();
  }
  return solve_spd(xtwx, xtwy);
}

struct IrlsResult {
  Vector theta;
  bool converged = false;
  bool boundary = false;  // stopped at a likelihood boundary (tolerant policy)
  int iterations = 0;
  double score_norm = std::numeric_limits<double>::infinity();
};

// What to do when the likelihood has no finite maximizer (separation).
//   forbid:   throw Separation — a fit whose coefficients are the answer
//             must not silently return a divergent iterate.
//   tolerate: return the last iterate with boundary = true. Step-halving
//             keeps the likelihood monotone, so pinned rows sit at their
//             achievable rates and fitted probabilities remain usable even
//             though the coefficients themselves are off to infinity.
enum class IrlsBoundary { forbid, tolerate };

// Weighted logistic maximum likelihood by Newton iteration with step-halving.
// y must be exactly 0/1 on rows with w > 0; w >= 0. Declares convergence when
// the Newton step satisfies ||step||_inf <= tol * (1 + ||theta||_inf), which
// (Newton being quadratic near the root) leaves theta at the root to far
// better than tol. Perfect separation is diagnosed (fitted probabilities
// pinned at the data with no finite maximizer) and handled per the boundary
// policy; an exhausted iteration budget returns converged = false with the
// last iterate.
inline IrlsResult irls_logistic(const Matrix& x, const Vector& y, const Vector& w,
                                const Vector& init = Vector(), double tol = 1e-8,
                                int max_iter = 50,
                                IrlsBoundary boundary = IrlsBoundary::forbid) {
  const Eigen::Index n = x.rows(), p = x.cols();
  if (y.size() != n || w.size() != n)
    throw DimensionMismatch("irls_logistic: rows(X), len(y), len(w) differ");
  detail::require_finite(x, "irls_logistic");
  detail::require_finite(y, "irls_logistic");
  detail::require_finite(w, "irls_logistic");
  bool saw0 = false, saw1 = false;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (w[i] < 0.0) throw Error("irls_logistic: negative weight");
    if (w[i] == 0.0) continue;
    if (y[i] == 0.0) saw0 = true;
    else if (y[i] == 1.0) saw1 = true;
    else throw Error("irls_logistic: response must be 0/1 on weighted rows");
  }
  if (!saw0 || !saw1)
    throw AllCompleteOrAllMissing("irls_logistic: one response class absent among weighted rows");

  Vector theta = init.size() == p ? init : Vector(Vector::Zero(p));
  if (init.size() != 0 && init.size() != p)
    throw DimensionMismatch("irls_logistic: init length != parameter count");

  const auto loglik = [&](const Vector& th) {
    double ll = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (w[i] == 0.0) continue;
      const double eta = x.row(i).dot(th);
      ll += w[i] * (y[i] * eta - log1pexp(eta));
    }
    return ll;
  };

  IrlsResult out;
  double ll = loglik(theta);
  for (int iter = 1; iter <= max_iter; ++iter) {
    Matrix h = Matrix::Zero(p, p);
    Vector score = Vector::Zero(p);
    bool all_pinned = true;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (w[i] == 0.0) continue;
      const double eta = x.row(i).dot(theta);
      const double mu = expit(eta);
      const auto xi = x.row(i);
      score.noalias() += w[i] * (y[i] - mu) * xi.transpose();
      h.noalias() += w[i] * mu * (1.0 - mu) * xi.transpose() * xi;
      const bool pinned =
          (y[i] == 1.0 && eta > 15.0 && mu > 1.0 - 1e-6) || (y[i] == 0.0 && eta < -15.0 && mu < 1e-6);
      if (!pinned) all_pinned = false;
    }
    out.score_norm = score.cwiseAbs().maxCoeff();
    if (all_pinned || theta.cwiseAbs().maxCoeff() > 1e6) {
      if (boundary == IrlsBoundary::tolerate) {
        out.boundary = true;
        out.theta = theta;
        return out;
      }
      throw Separation(to_std(theta));
    }

    Vector step;
    try {
      step = solve_spd(h, score);
    } catch (const SingularMatrix&) {
      if (boundary == IrlsBoundary::tolerate) {
        out.boundary = true;
        out.theta = theta;
        return out;
      }
      // A collapsed Hessian with probabilities drifting to the boundary is
      // separation in disguise; otherwise surface the singularity.
      double max_eta = 0.0;
      for (Eigen::Index i = 0; i < n; ++i)
        if (w[i] > 0.0) max_eta = std::max(max_eta, std::abs(x.row(i).dot(theta)));
      if (max_eta > 15.0) throw Separation(to_std(theta));
      throw;
    }

    // Step-halving: retreat (up to 10 times) if the likelihood got worse.
    double scale = 1.0;
    Vector cand = theta + step;
    double ll_new = loglik(cand);
    int halvings = 0;
    while (ll_new < ll - 1e-12 * (1.0 + std::abs(ll)) && halvings < 10) {
      scale *= 0.5;
      cand = theta + scale * step;
      ll_new = loglik(cand);
      ++halvings;
    }
    theta = cand;
    ll = ll_new;
    out.iterations = iter;
    if ((scale * step).cwiseAbs().maxCoeff() <= tol * (1.0 + theta.cwiseAbs().maxCoeff())) {
      out.converged = true;
      break;
    }
  }
  // Out of budget. Under the tolerant policy an unconverged iterate is still
  // the best monotone point reached — boundary drift slows Newton far below
  // its interior rate, so budget exhaustion there is the common exit.
  if (!out.converged && boundary == IrlsBoundary::tolerate) out.boundary = true;
  out.theta = theta;
  return out;
}

}  // namespace fedmiss
