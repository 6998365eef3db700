#pragma once

// Site-level summaries and the coordinator-side combine steps. Two transports
// exist: sufficient statistics (linear family) and aggregated counts of
// distinct value combinations (logistic family). Nothing in this header ever
// needs a foreign site's rows — that is the design constraint everything else
// hangs off.

#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "fedmiss/datamodel.hpp"
#include "fedmiss/errors.hpp"
#include "fedmiss/numerics.hpp"
#include "fedmiss/weights.hpp"

namespace fedmiss {

// --------------------------------------------------------------------------
// Sufficient-statistics transport (linear family).

struct SuffStats {
  std::string site_id;
  std::size_t p = 0;
  Matrix xtwx;  // X' W X over complete rows, W = per-row weight
  Vector xtwy;  // X' W y
  std::size_t n_complete = 0;
  double sum_w = 0.0;
};

// Per-row weights w are r_i (complete-case) or r_i / pi_i (inverse
// weighting); rows with w == 0 contribute nothing and their fields are never
// touched, so missing x never enters a design row.
inline SuffStats site_suffstats(const SiteDataset& data, const ModelSpec& model,
                                MissingnessTarget target, const Vector& w) {
  if (w.size() != static_cast<Eigen::Index>(data.n()))
    throw DimensionMismatch("site_suffstats: len(w) != n");
  SuffStats s;
  s.site_id = data.site_id;
  s.p = model.theta_dim();
  const Eigen::Index p = static_cast<Eigen::Index>(s.p);
  s.xtwx = Matrix::Zero(p, p);
  s.xtwy = Vector::Zero(p);
  for (std::size_t i = 0; i < data.n(); ++i) {
    const double wi = w[static_cast<Eigen::Index>(i)];
    if (wi == 0.0) continue;
    const auto& o = data.rows[i];
    if (!o.complete(target)) throw Error("site_suffstats: nonzero weight on incomplete row");
    const Vector xi = model.design_row(o);
    s.xtwx.noalias() += wi * xi * xi.transpose();
    s.xtwy.noalias() += wi * o.y * xi;
    s.sum_w += wi;
    ++s.n_complete;
  }
  return s;
}

// Sums the sites' statistics in the order given (site order is the network's
// fixed aggregation order — bit reproducibility depends on it) and solves the
// normal equations once, centrally.
inline Vector combine_linear(const std::vector<SuffStats>& stats) {
  if (stats.empty()) throw DimensionMismatch("combine_linear: no sites");
  const Eigen::Index p = static_cast<Eigen::Index>(stats.front().p);
  Matrix xtwx = Matrix::Zero(p, p);
  Vector xtwy = Vector::Zero(p);
  for (const auto& s : stats) {
    if (static_cast<Eigen::Index>(s.p) != p)
      throw DimensionMismatch("combine_linear: sites disagree on design dimension");
    xtwx += s.xtwx;
    xtwy += s.xtwy;
  }
  return solve_spd(xtwx, xtwy);
}

struct RssReport {
  std::string site_id;
  double rss = 0.0;  // weighted residual sum of squares
  std::size_t n_complete = 0;
};

inline RssReport site_rss(const SiteDataset& data, const ModelSpec& model,
                          MissingnessTarget target, const Vector& w, const Vector& beta) {
  if (w.size() != static_cast<Eigen::Index>(data.n()))
    throw DimensionMismatch("site_rss: len(w) != n");
  RssReport r;
  r.site_id = data.site_id;
  for (std::size_t i = 0; i < data.n(); ++i) {
    const double wi = w[static_cast<Eigen::Index>(i)];
    if (wi == 0.0) continue;
    const auto& o = data.rows[i];
    const double e = o.y - model.design_row(o).dot(beta);
    r.rss += wi * e * e;
    ++r.n_complete;
  }
  return r;
}

// sigma-hat = sqrt( sum_k RSS_k / (sum_k n_complete_k - p) ), exactly the
// degrees-of-freedom form of the algorithm (the RSS is weighted, the divisor
// counts complete rows).
inline double sigma_round(const std::vector<RssReport>& reports, std::size_t p) {
  double rss = 0.0;
  std::size_t n_complete = 0;
  for (const auto& r : reports) {
    rss += r.rss;
    n_complete += r.n_complete;
  }
  if (n_complete <= p)
    throw DegreesOfFreedom("sigma_round: complete-case count does not exceed parameter count");
  return std::sqrt(rss / static_cast<double>(n_complete - p));
}

// --------------------------------------------------------------------------
// Count-aggregation transport (logistic family).

enum class SuppressionAction { drop, refuse };

inline std::string to_string(SuppressionAction a) {
  return a == SuppressionAction::drop ? "drop" : "refuse";
}
inline SuppressionAction suppression_from_string(const std::string& s) {
  if (s == "drop") return SuppressionAction::drop;
  if (s == "refuse") return SuppressionAction::refuse;
  throw ParseError("unknown suppression action '" + s + "'");
}

// One distinct combination of modeled values: u = (y, x, z1..z_use), the
// summed weight of its rows, and the raw row count (governance looks at
// n_raw; estimation looks at w).
struct CountRow {
  std::vector<double> u;
  double w = 0.0;
  long n_raw = 0;
};

struct CountReport {
  std::string site_id;
  std::vector<CountRow> rows;         // sorted by canonical key
  std::size_t suppressed_cells = 0;   // cells dropped by the threshold
  long suppressed_n_raw = 0;          // total raw rows inside dropped cells
};

namespace detail {

// Canonical 12-significant-digit rendering; combination keys are compared as
// strings so grouping is identical on every site.
inline std::string canonical_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

inline std::string canonical_key(const std::vector<double>& u) {
  std::string key;
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (i) key.push_back(',');
    key += canonical_value(u[i]);
  }
  return key;
}

}  // namespace detail

inline std::vector<std::string> count_field_names(const ModelSpec& model) {
  std::vector<std::string> names{"y", "x"};
  for (std::size_t j = 1; j <= model.z_use; ++j) names.push_back("z" + std::to_string(j));
  return names;
}

// Groups the site's complete rows into value combinations. A field whose
// distinct-value count among complete rows exceeds max(25, n_complete/2) is
// deemed continuous and the transport refuses (every combination would be a
// cell of one). Cells with n_raw below the threshold T are dropped (or the
// whole transmission refused, per the policy action); T = 1 suppresses
// nothing and makes the transport lossless.
inline CountReport site_counts(const SiteDataset& data, const ModelSpec& model,
                               MissingnessTarget target, const Vector& w, long T,
                               SuppressionAction action = SuppressionAction::drop) {
  if (model.family != Family::logistic)
    throw NonDiscreteData("count transport serves the logistic family; the linear family "
                          "travels as sufficient statistics");
  if (w.size() != static_cast<Eigen::Index>(data.n()))
    throw DimensionMismatch("site_counts: len(w) != n");
  if (T < 1) throw Error("site_counts: threshold must be >= 1");

  const std::size_t nfields = 2 + model.z_use;
  std::vector<std::set<std::string>> distinct(nfields);
  std::map<std::string, CountRow> cells;
  std::size_t n_complete = 0;
  for (std::size_t i = 0; i < data.n(); ++i) {
    const double wi = w[static_cast<Eigen::Index>(i)];
    if (wi == 0.0) continue;
    const auto& o = data.rows[i];
    if (!o.complete(target)) throw Error("site_counts: nonzero weight on incomplete row");
    std::vector<double> u(nfields);
    u[0] = o.y;
    u[1] = o.x;
    for (std::size_t j = 0; j < model.z_use; ++j) u[2 + j] = o.z[j];
    for (std::size_t f = 0; f < nfields; ++f) distinct[f].insert(detail::canonical_value(u[f]));
    auto& cell = cells[detail::canonical_key(u)];
    if (cell.n_raw == 0) cell.u = std::move(u);
    cell.w += wi;
    cell.n_raw += 1;
    ++n_complete;
  }
  const std::size_t cap = std::max<std::size_t>(25, n_complete / 2);
  const auto names = count_field_names(model);
  for (std::size_t f = 0; f < nfields; ++f)
    if (distinct[f].size() > cap)
      throw NonDiscreteData(data.site_id + ": field " + names[f] + " has " +
                            std::to_string(distinct[f].size()) +
                            " distinct values among complete rows — not a finite combination space");

  CountReport report;
  report.site_id = data.site_id;
  for (auto& [key, cell] : cells) {
    if (cell.n_raw < T) {
      if (action == SuppressionAction::refuse)
        throw ProtocolViolation(data.site_id + ": cell below threshold under refuse policy");
      ++report.suppressed_cells;
      report.suppressed_n_raw += cell.n_raw;
      continue;
    }
    report.rows.push_back(std::move(cell));
  }
  return report;
}

// Pools count rows across sites (re-grouping by canonical key, so identical
// combinations merge) and fits the logistic model by weighted IRLS.
inline Vector combine_glm(const std::vector<CountReport>& reports, const ModelSpec& model) {
  if (model.family != Family::logistic) throw Error("combine_glm: logistic family only");
  std::map<std::string, CountRow> merged;
  for (const auto& rep : reports) {
    for (const auto& row : rep.rows) {
      auto& cell = merged[detail::canonical_key(row.u)];
      if (cell.n_raw == 0) cell.u = row.u;
      cell.w += row.w;
      cell.n_raw += row.n_raw;
    }
  }
  if (merged.empty()) throw DimensionMismatch("combine_glm: no count rows");
  const Eigen::Index p = static_cast<Eigen::Index>(model.theta_dim());
  const Eigen::Index q = static_cast<Eigen::Index>(merged.size());
  Matrix x(q, p);
  Vector y(q), w(q);
  Eigen::Index i = 0;
  for (const auto& [key, cell] : merged) {
    Observation o;
    o.y = cell.u[0];
    o.x = cell.u[1];
    o.z.assign(cell.u.begin() + 2, cell.u.end());
    x.row(i) = model.design_row(o).transpose();
    y[i] = cell.u[0];
    w[i] = cell.w;
    ++i;
  }
  auto fit = irls_logistic(x, y, w);
  if (!fit.converged)
    throw NotConverged("combine_glm: IRLS hit its iteration budget", to_std(fit.theta));
  return fit.theta;
}

// Bread and meat of the complete-case sandwich, assembled from counts alone.
// Valid because with unit per-row weights every row of a combination carries
// the same score, so the grouped outer-product sum equals the raw one.
struct CountsBreadMeat {
  Matrix a;  // sum over cells of w * d(score)/d(theta')
  Matrix b;  // sum over cells of w * score score'
};

inline CountsBreadMeat glm_counts_bread_meat(const std::vector<CountReport>& reports,
                                             const ModelSpec& model, const Vector& theta) {
  std::map<std::string, CountRow> merged;
  for (const auto& rep : reports)
    for (const auto& row : rep.rows) {
      auto& cell = merged[detail::canonical_key(row.u)];
      if (cell.n_raw == 0) cell.u = row.u;
      cell.w += row.w;
      cell.n_raw += row.n_raw;
    }
  const Eigen::Index p = static_cast<Eigen::Index>(model.theta_dim());
  CountsBreadMeat out;
  out.a = Matrix::Zero(p, p);
  out.b = Matrix::Zero(p, p);
  for (const auto& [key, cell] : merged) {
    Observation o;
    o.y = cell.u[0];
    o.x = cell.u[1];
    o.z.assign(cell.u.begin() + 2, cell.u.end());
    const Vector xi = model.design_row(o);
    const double mu = expit(xi.dot(theta));
    const Vector s = (cell.u[0] - mu) * xi;
    out.a.noalias() += -cell.w * mu * (1.0 - mu) * xi * xi.transpose();
    out.b.noalias() += cell.w * s * s.transpose();
  }
  return out;
}

// --------------------------------------------------------------------------

// End result of one federated (or pooled benchmark) fit.
struct FitResult {
  Family family = Family::linear;
  Estimator estimator = Estimator::cc;
  Transport transport = Transport::sufficient_info;
  Vector theta;                                            // outcome coefficients
  double sigma = std::numeric_limits<double>::quiet_NaN(); // linear family only
  Matrix cov_robust;  // stacked-corrected covariance of theta (+ sigma slot, linear)
  Matrix cov_naive;   // weights-treated-as-known covariance
  std::size_t rounds_used = 0;
  std::size_t n_total = 0;
  std::size_t n_complete = 0;
  std::size_t suppressed_cells = 0;
  long suppressed_n_raw = 0;

  // Standard errors for theta (beta block only; any sigma slot is excluded).
  Vector se_robust() const { return se_from(cov_robust); }
  Vector se_naive() const { return se_from(cov_naive); }

 private:
  Vector se_from(const Matrix& cov) const {
    Vector se(theta.size());
    for (Eigen::Index i = 0; i < theta.size(); ++i) se[i] = std::sqrt(cov(i, i));
    return se;
  }
};

}  // namespace fedmiss
