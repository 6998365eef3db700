#pragma once

// Variance estimation that accounts for estimated selection weights. The
// outcome parameters and every candidate selection model's parameters are
// stacked into one M-estimation system xi = (theta, alpha_1, ..., alpha_J);
// each site transmits Jacobian (A) and outer-product (B) blocks of its summed
// estimating functions, raw sums, and the coordinator assembles
//
//   cov(xi-hat) = A^-1 B A^-T
//
// with the single global normalization cancelling (raw-sum A and B each carry
// one factor of n). For the linear family theta includes a trailing slot for
// sigma, whose estimating function is the normal-likelihood sigma-score.
//
// Placement rules by regime:
//   cc            — theta-theta blocks only (no selection model), so the
//                   robust and naive answers coincide.
//   site_specific — each site weights by its own model, so its (theta,alpha)
//                   and (alpha,alpha) blocks touch only its own candidate's
//                   slot; the coordinator places them at that candidate's
//                   offset.
//   calibrated    — each site's weights depend on EVERY candidate, so each
//                   site emits full stacked-size matrices and assembly is a
//                   direct entrywise sum.
// In all regimes the (alpha, theta) bread blocks are exactly zero: selection
// models never depend on the outcome parameters.

#include <cmath>
#include <string>
#include <vector>

#include "fedmiss/datamodel.hpp"
#include "fedmiss/errors.hpp"
#include "fedmiss/estimators.hpp"
#include "fedmiss/numerics.hpp"
#include "fedmiss/weights.hpp"

namespace fedmiss {

enum class VarianceRegime { cc, site_specific, calibrated };

inline std::string to_string(VarianceRegime r) {
  switch (r) {
    case VarianceRegime::cc: return "cc";
    case VarianceRegime::site_specific: return "site_specific";
    default: return "calibrated";
  }
}
inline VarianceRegime regime_from_string(const std::string& s) {
  if (s == "cc") return VarianceRegime::cc;
  if (s == "site_specific") return VarianceRegime::site_specific;
  if (s == "calibrated") return VarianceRegime::calibrated;
  throw ParseError("unknown variance regime '" + s + "'");
}

// Stacked theta dimension: design length, plus the sigma slot for linear.
inline std::size_t stacked_theta_dim(const ModelSpec& model) {
  return model.theta_dim() + (model.family == Family::linear ? 1 : 0);
}

namespace detail {

// Outcome score s(o; theta) for one complete row. Linear: (e x / sigma^2,
// (e^2 - sigma^2)/sigma^3) with e = y - x'beta. Logistic: (y - mu) x.
inline Vector outcome_score(const ModelSpec& model, const Observation& o, const Vector& beta,
                            double sigma) {
  const Vector xi = model.design_row(o);
  if (model.family == Family::logistic) {
    const double mu = expit(xi.dot(beta));
    return (o.y - mu) * xi;
  }
  const double e = o.y - xi.dot(beta);
  const double s2 = sigma * sigma;
  Vector s(xi.size() + 1);
  s.head(xi.size()) = (e / s2) * xi;
  s[xi.size()] = (e * e - s2) / (s2 * sigma);
  return s;
}

// d s / d theta' for one complete row (symmetric for both families).
inline Matrix outcome_score_jac(const ModelSpec& model, const Observation& o, const Vector& beta,
                                double sigma) {
  const Vector xi = model.design_row(o);
  if (model.family == Family::logistic) {
    const double mu = expit(xi.dot(beta));
    return Matrix(-mu * (1.0 - mu) * xi * xi.transpose());
  }
  const double e = o.y - xi.dot(beta);
  const double s2 = sigma * sigma;
  const Eigen::Index p = xi.size();
  Matrix j = Matrix::Zero(p + 1, p + 1);
  j.topLeftCorner(p, p) = -(1.0 / s2) * xi * xi.transpose();
  j.topRightCorner(p, 1) = (-2.0 * e / (s2 * sigma)) * xi;
  j.bottomLeftCorner(1, p) = (-2.0 * e / (s2 * sigma)) * xi.transpose();
  j(p, p) = 1.0 / s2 - 3.0 * e * e / (s2 * s2);
  return j;
}

inline void require_sigma(const ModelSpec& model, double sigma) {
  if (model.family == Family::linear && !(sigma > 0.0))
    throw Error("variance blocks need a positive sigma for the linear family");
}

}  // namespace detail

// What a site needs in hand to emit its blocks. `candidates` is the full
// network candidate list in its fixed order; `own` indexes the candidates
// this site's data estimated (exactly one under site_specific, any subset
// under calibrated, none under cc).
struct SiteVarianceInputs {
  ModelSpec model;
  MissingnessTarget target = MissingnessTarget::X;
  Vector beta;
  double sigma = std::numeric_limits<double>::quiet_NaN();
  Vector pi;  // per-row probability actually used for weighting (ones under cc)
  VarianceRegime regime = VarianceRegime::cc;
  CandidateSet candidates;
  std::vector<std::size_t> own;
  Vector tau;  // calibrated combination coefficients (plug-in, held fixed)
};

struct VarianceBlocks {
  std::string site_id;
  VarianceRegime regime = VarianceRegime::cc;
  std::size_t theta_dim = 0;
  std::vector<std::size_t> alpha_dims;

  Matrix a_tt, b_tt;  // all regimes

  // site_specific: blocks for this site's own candidate only.
  int own_index = -1;
  Matrix a_ta_own, a_aa_own, b_ta_own, b_aa_own;

  // calibrated: full stacked-size matrices (zeros where this site has nothing).
  Matrix a_full, b_full;
};

inline VarianceBlocks site_variance_blocks(const SiteDataset& data,
                                           const SiteVarianceInputs& in) {
  detail::require_sigma(in.model, in.sigma);
  if (in.pi.size() != static_cast<Eigen::Index>(data.n()))
    throw DimensionMismatch("site_variance_blocks: len(pi) != n");

  VarianceBlocks out;
  out.site_id = data.site_id;
  out.regime = in.regime;
  out.theta_dim = stacked_theta_dim(in.model);
  for (const auto& c : in.candidates) out.alpha_dims.push_back(c.formula.alpha_dim());
  const Eigen::Index td = static_cast<Eigen::Index>(out.theta_dim);
  out.a_tt = Matrix::Zero(td, td);
  out.b_tt = Matrix::Zero(td, td);

  // theta-theta blocks are shared by every regime.
  for (std::size_t i = 0; i < data.n(); ++i) {
    const auto& o = data.rows[i];
    if (!o.complete(in.target)) continue;
    const double p = in.pi[static_cast<Eigen::Index>(i)];
    if (!(p > kWeightFloor))
      throw NonPositiveWeight(data.site_id + ": probability <= floor on a complete row");
    const double w = 1.0 / p;
    const Vector s = detail::outcome_score(in.model, o, in.beta, in.sigma);
    out.a_tt.noalias() += w * detail::outcome_score_jac(in.model, o, in.beta, in.sigma);
    out.b_tt.noalias() += (w * w) * s * s.transpose();
  }

  if (in.regime == VarianceRegime::cc) return out;
  if (in.candidates.empty()) throw DimensionMismatch("selection regimes need candidates");
  const std::size_t j_total = in.candidates.size();

  // Candidate predictions and nuisance designs on local rows (selection
  // models are evaluable on every row by construction).
  std::vector<Vector> gamma(j_total);
  for (std::size_t c = 0; c < j_total; ++c) gamma[c] = predict_pi(data, in.candidates[c]);

  if (in.regime == VarianceRegime::site_specific) {
    if (in.own.size() != 1)
      throw DimensionMismatch("site_specific regime: exactly one own candidate");
    const std::size_t k = in.own[0];
    out.own_index = static_cast<int>(k);
    const auto& cand = in.candidates[k];
    const Eigen::Index ad = static_cast<Eigen::Index>(cand.formula.alpha_dim());
    out.a_ta_own = Matrix::Zero(td, ad);
    out.a_aa_own = Matrix::Zero(ad, ad);
    out.b_ta_own = Matrix::Zero(td, ad);
    out.b_aa_own = Matrix::Zero(ad, ad);
    for (std::size_t i = 0; i < data.n(); ++i) {
      const auto& o = data.rows[i];
      const Vector g = cand.formula.design_row(o);
      const double gpi = gamma[k][static_cast<Eigen::Index>(i)];
      const double r = o.complete(in.target) ? 1.0 : 0.0;
      const Vector psi = (r - gpi) * g;  // selection-model score, all rows
      out.a_aa_own.noalias() += -gpi * (1.0 - gpi) * g * g.transpose();
      out.b_aa_own.noalias() += psi * psi.transpose();
      if (r == 1.0) {
        const double p = in.pi[static_cast<Eigen::Index>(i)];
        const Vector s = detail::outcome_score(in.model, o, in.beta, in.sigma);
        // d(r/pi)/d alpha' = -(r/pi)(1 - pi) g'   (pi = expit(g'alpha))
        out.a_ta_own.noalias() += (-(1.0 / p) * (1.0 - p)) * s * g.transpose();
        out.b_ta_own.noalias() += (1.0 / p) * s * psi.transpose();
      }
    }
    return out;
  }

  // Calibrated: full stacked matrices. pi = sum_j tau_j gamma_j, tau plug-in.
  if (in.tau.size() != static_cast<Eigen::Index>(j_total))
    throw DimensionMismatch("calibrated regime: len(tau) != candidate count");
  std::vector<Eigen::Index> offset(j_total);
  Eigen::Index dim = td;
  for (std::size_t c = 0; c < j_total; ++c) {
    offset[c] = dim;
    dim += static_cast<Eigen::Index>(out.alpha_dims[c]);
  }
  out.a_full = Matrix::Zero(dim, dim);
  out.b_full = Matrix::Zero(dim, dim);
  out.a_full.topLeftCorner(td, td) = out.a_tt;
  out.b_full.topLeftCorner(td, td) = out.b_tt;

  std::vector<bool> own_mask(j_total, false);
  for (std::size_t k : in.own) own_mask[k] = true;

  for (std::size_t i = 0; i < data.n(); ++i) {
    const auto& o = data.rows[i];
    const double r = o.complete(in.target) ? 1.0 : 0.0;

    // Per-row stacked score (theta part + own candidates' selection scores)
    // accumulates B; the bread picks up the weight's dependence on every
    // candidate via d(1/pi)/d alpha_j = -(tau_j gamma_j(1-gamma_j)/pi^2) g_j.
    Vector phi = Vector::Zero(dim);
    if (r == 1.0) {
      const double p = in.pi[static_cast<Eigen::Index>(i)];
      const Vector s = detail::outcome_score(in.model, o, in.beta, in.sigma);
      phi.head(td) = (1.0 / p) * s;
      for (std::size_t c = 0; c < j_total; ++c) {
        const Vector g = in.candidates[c].formula.design_row(o);
        const double gc = gamma[c][static_cast<Eigen::Index>(i)];
        const double dpi = in.tau[static_cast<Eigen::Index>(c)] * gc * (1.0 - gc);
        out.a_full.block(0, offset[c], td, g.size()).noalias() +=
            (-dpi / (p * p)) * s * g.transpose();
      }
    }
    for (std::size_t c = 0; c < j_total; ++c) {
      if (!own_mask[c]) continue;
      const Vector g = in.candidates[c].formula.design_row(o);
      const double gc = gamma[c][static_cast<Eigen::Index>(i)];
      const Eigen::Index ad = g.size();
      out.a_full.block(offset[c], offset[c], ad, ad).noalias() +=
          -gc * (1.0 - gc) * g * g.transpose();
      phi.segment(offset[c], ad) = (r - gc) * g;
    }
    out.b_full.noalias() += phi * phi.transpose();
  }
  // b_tt inside b_full was rebuilt by the outer products; keep them equal.
  out.b_full.topLeftCorner(td, td) = out.b_tt;
  return out;
}

struct StackedVariance {
  VarianceRegime regime = VarianceRegime::cc;
  std::size_t theta_dim = 0;
  std::vector<std::size_t> alpha_dims;
  Matrix a, b;       // assembled stacked bread / meat (raw sums)
  Matrix cov_xi;     // A^-1 B A^-T
  Matrix cov_theta;  // leading theta block of cov_xi
};

// A^-1 B A^-T for symmetric B (general A). A selection fit stopped at a
// likelihood boundary zeroes both bread and meat along its pinned nuisance
// directions, so those directions carry no information and their correction
// vanishes in the limit; when they push a pivot under the LU threshold, the
// solve falls back to a rank-revealing decomposition that drops exactly the
// null directions and leaves the identified block untouched.
inline Matrix sandwich(const Matrix& a, const Matrix& b) {
  try {
    const Matrix t = solve_lu(a, b);                    // A^-1 B
    return solve_lu(a, Matrix(t.transpose()));          // A^-1 (A^-1 B)' = A^-1 B A^-T
  } catch (const SingularMatrix&) {
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod{Eigen::MatrixXd(a)};
    cod.setThreshold(1e-9);
    const Matrix t = cod.solve(Eigen::MatrixXd(b));
    return cod.solve(Eigen::MatrixXd(t.transpose()));
  }
}

inline StackedVariance assemble_stacked(const std::vector<VarianceBlocks>& blocks) {
  if (blocks.empty()) throw DimensionMismatch("assemble_stacked: no blocks");
  StackedVariance out;
  out.regime = blocks.front().regime;
  out.theta_dim = blocks.front().theta_dim;
  out.alpha_dims = blocks.front().alpha_dims;
  const Eigen::Index td = static_cast<Eigen::Index>(out.theta_dim);
  std::vector<Eigen::Index> offset(out.alpha_dims.size());
  Eigen::Index dim = td;
  for (std::size_t c = 0; c < out.alpha_dims.size(); ++c) {
    offset[c] = dim;
    dim += static_cast<Eigen::Index>(out.alpha_dims[c]);
  }
  out.a = Matrix::Zero(dim, dim);
  out.b = Matrix::Zero(dim, dim);

  for (const auto& blk : blocks) {
    if (blk.regime != out.regime || blk.theta_dim != out.theta_dim ||
        blk.alpha_dims != out.alpha_dims)
      throw DimensionMismatch("assemble_stacked: sites disagree on the dims ledger");
    switch (blk.regime) {
      case VarianceRegime::cc:
        out.a.topLeftCorner(td, td) += blk.a_tt;
        out.b.topLeftCorner(td, td) += blk.b_tt;
        break;
      case VarianceRegime::site_specific: {
        out.a.topLeftCorner(td, td) += blk.a_tt;
        out.b.topLeftCorner(td, td) += blk.b_tt;
        const std::size_t k = static_cast<std::size_t>(blk.own_index);
        if (blk.own_index < 0 || k >= out.alpha_dims.size())
          throw DimensionMismatch("assemble_stacked: own candidate index out of range");
        const Eigen::Index off = offset[k];
        const Eigen::Index ad = static_cast<Eigen::Index>(out.alpha_dims[k]);
        out.a.block(0, off, td, ad) += blk.a_ta_own;
        out.a.block(off, off, ad, ad) += blk.a_aa_own;
        out.b.block(0, off, td, ad) += blk.b_ta_own;
        out.b.block(off, 0, ad, td) += blk.b_ta_own.transpose();
        out.b.block(off, off, ad, ad) += blk.b_aa_own;
        break;
      }
      case VarianceRegime::calibrated:
        if (blk.a_full.rows() != dim)
          throw DimensionMismatch("assemble_stacked: full matrix has wrong stacked dim");
        out.a += blk.a_full;
        out.b += blk.b_full;
        break;
    }
  }
  out.cov_xi = sandwich(out.a, out.b);
  out.cov_theta = out.cov_xi.topLeftCorner(td, td);
  return out;
}

// Weights-treated-as-known covariance: theta-theta blocks only, summed in
// site order. Equals the stacked answer when there are no alpha blocks.
inline Matrix naive_variance(const std::vector<VarianceBlocks>& blocks) {
  if (blocks.empty()) throw DimensionMismatch("naive_variance: no blocks");
  const Eigen::Index td = static_cast<Eigen::Index>(blocks.front().theta_dim);
  Matrix a = Matrix::Zero(td, td), b = Matrix::Zero(td, td);
  for (const auto& blk : blocks) {
    a += blk.a_tt;
    b += blk.b_tt;
  }
  return sandwich(a, b);
}

// Independent representation of the weight-estimation correction for a single
// selection model on one body of data: replace each weighted outcome score by
// its projection residual
//   phi_i - C D^-1 psi_i,  C = sum d phi / d alpha',  D = sum d psi / d alpha',
// take B from those residuals' outer products, and sandwich with the
// theta-theta bread alone. Algebraically identical to the theta block of the
// stacked answer when J = 1; kept as an oracle for tests.
inline Matrix alt_variance_check(const SiteDataset& data, const ModelSpec& model,
                                 MissingnessTarget target, const WeightingFormula& formula,
                                 const Vector& beta, double sigma, const Vector& alpha) {
  detail::require_sigma(model, sigma);
  const Eigen::Index td = static_cast<Eigen::Index>(stacked_theta_dim(model));
  const Eigen::Index ad = static_cast<Eigen::Index>(formula.alpha_dim());
  Matrix a_tt = Matrix::Zero(td, td), c = Matrix::Zero(td, ad), d = Matrix::Zero(ad, ad);
  std::vector<Vector> phis(data.n()), psis(data.n());
  for (std::size_t i = 0; i < data.n(); ++i) {
    const auto& o = data.rows[i];
    const Vector g = formula.design_row(o);
    const double p = expit(g.dot(alpha));
    const double r = o.complete(target) ? 1.0 : 0.0;
    psis[i] = (r - p) * g;
    d.noalias() += -p * (1.0 - p) * g * g.transpose();
    if (r == 1.0) {
      if (!(p > kWeightFloor)) throw NonPositiveWeight("probability <= floor on a complete row");
      const Vector s = detail::outcome_score(model, o, beta, sigma);
      phis[i] = (1.0 / p) * s;
      a_tt.noalias() += (1.0 / p) * detail::outcome_score_jac(model, o, beta, sigma);
      c.noalias() += (-(1.0 / p) * (1.0 - p)) * s * g.transpose();
    } else {
      phis[i] = Vector::Zero(td);
    }
  }
  const Matrix cdinv = solve_lu(Matrix(d.transpose()), Matrix(c.transpose())).transpose();
  Matrix b = Matrix::Zero(td, td);
  for (std::size_t i = 0; i < data.n(); ++i) {
    const Vector adj = phis[i] - cdinv * psis[i];
    b.noalias() += adj * adj.transpose();
  }
  return sandwich(a_tt, b);
}

}  // namespace fedmiss
