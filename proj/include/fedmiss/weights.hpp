#pragma once

// Everything about Pr(row is complete): fitting a site's selection model,
// evaluating foreign sites' models, combining several candidate models into a
// calibrated probability, and turning probabilities into inverse weights.

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "fedmiss/datamodel.hpp"
#include "fedmiss/errors.hpp"
#include "fedmiss/numerics.hpp"
#include "fedmiss/rng.hpp"

namespace fedmiss {

// Probabilities this small on a complete row make 1/pi meaningless.
inline constexpr double kWeightFloor = 1e-6;

struct CandidateModel {
  std::string origin_site;
  WeightingFormula formula;
  Vector alpha;
};

using CandidateSet = std::vector<CandidateModel>;

// Per-row selection probabilities for one site, plus how they were obtained.
struct WeightVector {
  std::string source;  // "fitted" | "calibrated" | "oracle" | "uniform" | "unit"
  Vector pi;
};

// Fits the site's logistic selection model r ~ formula over ALL rows (the
// completeness indicator is observed everywhere — that is the whole point).
inline Vector fit_nuisance(const SiteDataset& data, const WeightingFormula& formula,
                           MissingnessTarget target) {
  formula.check_against_target(target);
  const std::size_t n = data.n();
  const std::size_t p = formula.alpha_dim();
  Matrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  Vector r(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    x.row(static_cast<Eigen::Index>(i)) = formula.design_row(data.rows[i]).transpose();
    r[static_cast<Eigen::Index>(i)] = data.rows[i].complete(target) ? 1.0 : 0.0;
  }
  const double mean_r = n == 0 ? 0.0 : r.sum() / static_cast<double>(n);
  if (n == 0 || mean_r == 0.0 || mean_r == 1.0)
    throw AllCompleteOrAllMissing(data.site_id + ": completeness indicator has one level");
  // Boundary-tolerant: a small site whose completeness pattern separates
  // still yields usable probabilities (pinned rows land at their achievable
  // rates), which is all the weighting needs from this model.
  auto fit = irls_logistic(x, r, Vector::Ones(static_cast<Eigen::Index>(n)), Vector(), 1e-8, 50,
                           IrlsBoundary::tolerate);
  return fit.theta;
}

// Evaluates a candidate model's probabilities on (possibly another site's)
// data. Only needs the formula's fields, which by legality are observed on
// every row.
inline Vector predict_pi(const SiteDataset& data, const CandidateModel& model) {
  if (model.alpha.size() != static_cast<Eigen::Index>(model.formula.alpha_dim()))
    throw DimensionMismatch("candidate '" + model.origin_site + "': alpha length != formula dim");
  Vector out(static_cast<Eigen::Index>(data.n()));
  for (std::size_t i = 0; i < data.n(); ++i)
    out[static_cast<Eigen::Index>(i)] = expit(model.formula.design_row(data.rows[i]).dot(model.alpha));
  return out;
}

enum class CalibrationVariant { projection, supplement_normalized };

inline std::string to_string(CalibrationVariant v) {
  return v == CalibrationVariant::projection ? "projection" : "supplement_normalized";
}
inline CalibrationVariant calibration_from_string(const std::string& s) {
  if (s == "projection") return CalibrationVariant::projection;
  if (s == "supplement_normalized") return CalibrationVariant::supplement_normalized;
  throw ParseError("unknown calibration variant '" + s + "'");
}

struct CalibrationResult {
  Vector tau;              // length J; zero at columns the variant dropped
  std::vector<bool> kept;  // which candidate columns entered the solve
  Vector pi;               // per-row combined probability
  std::size_t n_above_one = 0;  // combined probabilities exceeding 1 (flagged, not clipped)
};

namespace detail {

inline void check_calibrated_floor(const CalibrationResult& res, const Vector& r) {
  for (Eigen::Index i = 0; i < r.size(); ++i)
    if (r[i] == 1.0 && res.pi[i] <= kWeightFloor)
      throw NonPositiveWeight("calibrated probability <= floor on a complete row");
}

}  // namespace detail

// Core of calibration: gamma is n x J (column j = candidate j's probability
// on every local row), r the completeness indicator. Both variants solve the
// least-squares projection of r onto the candidate columns over ALL rows.
//
//   projection:            tau = (gamma' gamma)^-1 gamma' r, used as-is.
//   supplement_normalized: duplicate columns (equal after rounding to 5
//     decimals) are dropped, the Gram diagonal gets an absolute 1e-5 ridge,
//     and tau is replaced by tau_j^2 / sum(tau^2) — nonnegative, summing to 1.
inline CalibrationResult calibrate_gamma(const Matrix& gamma, const Vector& r,
                                         CalibrationVariant variant) {
  const Eigen::Index n = gamma.rows(), j = gamma.cols();
  if (r.size() != n) throw DimensionMismatch("calibrate: len(r) != rows(gamma)");
  if (j == 0) throw DimensionMismatch("calibrate: no candidate columns");
  CalibrationResult res;
  res.kept.assign(static_cast<std::size_t>(j), true);

  if (variant == CalibrationVariant::supplement_normalized) {
    // Column-duplicate detection on 5-decimal-rounded values, keeping the
    // first occurrence.
    std::vector<std::vector<double>> rounded(static_cast<std::size_t>(j));
    for (Eigen::Index c = 0; c < j; ++c) {
      auto& col = rounded[static_cast<std::size_t>(c)];
      col.resize(static_cast<std::size_t>(n));
      for (Eigen::Index i = 0; i < n; ++i)
        col[static_cast<std::size_t>(i)] = std::round(gamma(i, c) * 1e5) / 1e5;
    }
    for (Eigen::Index c = 1; c < j; ++c)
      for (Eigen::Index b = 0; b < c; ++b)
        if (res.kept[static_cast<std::size_t>(b)] &&
            rounded[static_cast<std::size_t>(c)] == rounded[static_cast<std::size_t>(b)]) {
          res.kept[static_cast<std::size_t>(c)] = false;
          break;
        }
  }

  std::vector<Eigen::Index> cols;
  for (Eigen::Index c = 0; c < j; ++c)
    if (res.kept[static_cast<std::size_t>(c)]) cols.push_back(c);
  const Eigen::Index m = static_cast<Eigen::Index>(cols.size());

  Matrix g = Matrix::Zero(m, m);
  Vector h = Vector::Zero(m);
  for (Eigen::Index a = 0; a < m; ++a) {
    for (Eigen::Index b = 0; b < m; ++b) g(a, b) = gamma.col(cols[a]).dot(gamma.col(cols[b]));
    h[a] = gamma.col(cols[a]).dot(r);
  }
  if (variant == CalibrationVariant::supplement_normalized)
    g.diagonal().array() += 1e-5;
  Vector tau_kept = solve_spd(g, h);

  if (variant == CalibrationVariant::supplement_normalized) {
    const double ss = tau_kept.squaredNorm();
    if (ss > 0.0)
      tau_kept = (tau_kept.array().square() / ss).matrix();
    else
      tau_kept.setZero();
  }

  res.tau = Vector::Zero(j);
  for (Eigen::Index a = 0; a < m; ++a) res.tau[cols[a]] = tau_kept[a];
  res.pi = gamma * res.tau;
  for (Eigen::Index i = 0; i < n; ++i)
    if (r[i] == 1.0 && res.pi[i] > 1.0) ++res.n_above_one;
  detail::check_calibrated_floor(res, r);
  return res;
}

// Convenience wrapper building gamma from candidate models on local data.
inline CalibrationResult calibrate(const SiteDataset& data, const CandidateSet& candidates,
                                   MissingnessTarget target, CalibrationVariant variant) {
  if (candidates.empty()) throw DimensionMismatch("calibrate: empty candidate set");
  const Eigen::Index n = static_cast<Eigen::Index>(data.n());
  Matrix gamma(n, static_cast<Eigen::Index>(candidates.size()));
  for (std::size_t c = 0; c < candidates.size(); ++c)
    gamma.col(static_cast<Eigen::Index>(c)) = predict_pi(data, candidates[c]);
  Vector r(n);
  for (Eigen::Index i = 0; i < n; ++i)
    r[i] = data.rows[static_cast<std::size_t>(i)].complete(target) ? 1.0 : 0.0;
  return calibrate_gamma(gamma, r, variant);
}

// Haphazard-weights control arm: probabilities drawn Uniform(0.1, 0.9),
// independent of the data.
inline WeightVector uniform_random_weights(std::size_t n, RngStream& rng) {
  Vector pi(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < pi.size(); ++i) pi[i] = rng.uniform(0.1, 0.9);
  return {"uniform", std::move(pi)};
}

// Benchmark arm: the simulation's stored true probabilities.
inline WeightVector oracle_weights(const SiteDataset& data) {
  Vector pi(static_cast<Eigen::Index>(data.n()));
  for (std::size_t i = 0; i < data.n(); ++i) {
    const double p = data.rows[i].oracle_pi;
    if (!std::isfinite(p)) throw DriverUnavailable(data.site_id + ": no stored oracle probability");
    pi[static_cast<Eigen::Index>(i)] = p;
  }
  return {"oracle", std::move(pi)};
}

// r_i / pi_i on complete rows, 0 elsewhere. The floor guards the division.
inline Vector ipw_row_weights(const SiteDataset& data, MissingnessTarget target,
                              const Vector& pi) {
  if (pi.size() != static_cast<Eigen::Index>(data.n()))
    throw DimensionMismatch("ipw_row_weights: len(pi) != n");
  Vector w = Vector::Zero(pi.size());
  for (std::size_t i = 0; i < data.n(); ++i) {
    if (!data.rows[i].complete(target)) continue;
    const double p = pi[static_cast<Eigen::Index>(i)];
    if (!(p > kWeightFloor))
      throw NonPositiveWeight(data.site_id + ": probability <= floor on a complete row");
    w[static_cast<Eigen::Index>(i)] = 1.0 / p;
  }
  return w;
}

}  // namespace fedmiss
