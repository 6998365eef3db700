#pragma once

// Test-local oracles, deliberately independent of the library's numerics:
// a Gaussian-elimination solver, a pooled weighted-least-squares fit, a plain
// Newton IRLS, a brute-force likelihood grid refiner, and finite differences.

#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

#include <fedmiss/fedmiss.hpp>

namespace oracle {

using fedmiss::Matrix;
using fedmiss::Vector;

// Gaussian elimination with partial pivoting; no Eigen decompositions.
inline Vector gauss_solve(Matrix a, Vector b) {
  const int n = static_cast<int>(a.rows());
  if (a.cols() != n || b.size() != n) throw std::runtime_error("gauss_solve: shape");
  for (int col = 0; col < n; ++col) {
    int pivot = col;
    for (int r = col + 1; r < n; ++r)
      if (std::abs(a(r, col)) > std::abs(a(pivot, col))) pivot = r;
    if (std::abs(a(pivot, col)) < 1e-14) throw std::runtime_error("gauss_solve: singular");
    if (pivot != col) {
      a.row(pivot).swap(a.row(col));
      std::swap(b[pivot], b[col]);
    }
    for (int r = col + 1; r < n; ++r) {
      const double f = a(r, col) / a(col, col);
      a.row(r).tail(n - col) -= f * a.row(col).tail(n - col);
      b[r] -= f * b[col];
    }
  }
  Vector x(n);
  for (int r = n - 1; r >= 0; --r) {
    double s = b[r];
    for (int c = r + 1; c < n; ++c) s -= a(r, c) * x[c];
    x[r] = s / a(r, r);
  }
  return x;
}

inline Matrix gauss_solve(Matrix a, const Matrix& b) {
  Matrix x(b.rows(), b.cols());
  for (Eigen::Index j = 0; j < b.cols(); ++j) x.col(j) = gauss_solve(a, Vector(b.col(j)));
  return x;
}

inline Matrix gauss_inverse(const Matrix& a) {
  return gauss_solve(a, Matrix(Matrix::Identity(a.rows(), a.cols())));
}

// Pooled weighted least squares by explicit normal equations.
inline Vector pooled_wls(const Matrix& x, const Vector& y, const Vector& w) {
  const auto p = x.cols();
  Matrix xtwx = Matrix::Zero(p, p);
  Vector xtwy = Vector::Zero(p);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    xtwx += w[i] * x.row(i).transpose() * x.row(i);
    xtwy += w[i] * x.row(i).transpose() * y[i];
  }
  return gauss_solve(xtwx, xtwy);
}

inline double sigmoid(double t) { return 1.0 / (1.0 + std::exp(-t)); }

// Plain Newton for the weighted logistic likelihood; dies if it cannot reach
// a tiny gradient, so oracle comparisons never silently use a bad root.
inline Vector pooled_logistic(const Matrix& x, const Vector& y, const Vector& w,
                              int max_iter = 200) {
  const auto p = x.cols();
  Vector theta = Vector::Zero(p);
  for (int it = 0; it < max_iter; ++it) {
    Vector grad = Vector::Zero(p);
    Matrix hess = Matrix::Zero(p, p);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      if (w[i] == 0.0) continue;
      const double mu = sigmoid(x.row(i).dot(theta));
      grad += w[i] * (y[i] - mu) * x.row(i).transpose();
      hess += w[i] * mu * (1 - mu) * x.row(i).transpose() * x.row(i);
    }
    const Vector step = gauss_solve(hess, grad);
    theta += step;
    if (step.cwiseAbs().maxCoeff() < 1e-13) return theta;
  }
  Vector grad = Vector::Zero(p);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = sigmoid(x.row(i).dot(theta));
    grad += w[i] * (y[i] - mu) * x.row(i).transpose();
  }
  if (grad.cwiseAbs().maxCoeff() > 1e-6) throw std::runtime_error("pooled_logistic: no root");
  return theta;
}

// Weighted logistic log-likelihood, for the grid maximizer.
inline double logistic_ll(const Matrix& x, const Vector& y, const Vector& w, const Vector& theta) {
  double ll = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double eta = x.row(i).dot(theta);
    ll += w[i] * (y[i] * eta - std::log1p(std::exp(-std::abs(eta))) -
                  std::max(eta, 0.0));
  }
  return ll;
}

// Coordinate grid search with iterative refinement — slow, assumption-free
// maximizer for very small parameter counts.
inline Vector grid_maximize_logistic(const Matrix& x, const Vector& y, const Vector& w,
                                     double lo = -6, double hi = 6) {
  const auto p = x.cols();
  Vector best = Vector::Zero(p);
  double width = hi - lo;
  for (int stage = 0; stage < 24; ++stage) {
    const int steps = 12;
    Vector stage_best = best;
    double stage_ll = logistic_ll(x, y, w, best);
    for (Eigen::Index j = 0; j < p; ++j) {
      Vector cand = stage_best;
      for (int s = 0; s <= steps; ++s) {
        cand[j] = best[j] - width / 2 + width * s / steps;
        const double ll = logistic_ll(x, y, w, cand);
        if (ll > stage_ll) {
          stage_ll = ll;
          stage_best = cand;
        }
      }
      cand[j] = stage_best[j];
    }
    best = stage_best;
    width *= 0.55;
  }
  return best;
}

// Central finite difference of a vector-valued function.
inline Matrix fd_jacobian(const std::function<Vector(const Vector&)>& f, const Vector& at,
                          double step = 1e-5) {
  const Vector f0 = f(at);
  Matrix jac(f0.size(), at.size());
  for (Eigen::Index j = 0; j < at.size(); ++j) {
    Vector hi = at, lo = at;
    hi[j] += step;
    lo[j] -= step;
    jac.col(j) = (f(hi) - f(lo)) / (2 * step);
  }
  return jac;
}

inline double rel_diff(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

inline double max_rel_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return 1e300;
  const double scale = std::max(1.0, std::max(a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff()));
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

inline double max_rel_diff(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) return 1e300;
  const double scale = std::max(1.0, std::max(a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff()));
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

// Design/response extraction so oracles run on plain matrices.
struct Pooled {
  Matrix x;
  Vector y;
  Vector w;  // zero on incomplete rows
};

inline Pooled pool_complete(const std::vector<fedmiss::SiteDataset>& sites,
                            const fedmiss::ModelSpec& model, fedmiss::MissingnessTarget target,
                            const std::function<double(const fedmiss::Observation&)>& weight) {
  std::vector<Vector> rows;
  std::vector<double> ys, ws;
  for (const auto& site : sites)
    for (const auto& o : site.rows) {
      if (!o.complete(target)) continue;
      rows.push_back(model.design_row(o));
      ys.push_back(o.y);
      ws.push_back(weight(o));
    }
  Pooled p;
  p.x.resize(static_cast<Eigen::Index>(rows.size()), model.theta_dim());
  p.y.resize(static_cast<Eigen::Index>(rows.size()));
  p.w.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    p.x.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    p.y[static_cast<Eigen::Index>(i)] = ys[i];
    p.w[static_cast<Eigen::Index>(i)] = ws[i];
  }
  return p;
}

// Deterministic synthetic sites for property tests (independent of the
// library's RngStream so generator bugs cannot hide).
inline fedmiss::SiteDataset random_site(std::mt19937& gen, std::size_t n, std::size_t z_dim,
                                        fedmiss::Family family, double missing_rate,
                                        const std::string& id,
                                        fedmiss::MissingnessTarget target) {
  std::normal_distribution<double> normal(0, 1);
  std::uniform_real_distribution<double> unif(0, 1);
  fedmiss::SiteDataset site;
  site.site_id = id;
  site.z_dim = z_dim;
  for (std::size_t i = 0; i < n; ++i) {
    fedmiss::Observation o;
    o.z.resize(z_dim);
    for (auto& z : o.z) z = unif(gen) < 0.5 ? 0.0 : 1.0;
    o.x = unif(gen) < 0.5 ? 0.0 : 1.0;
    double eta = 0.3 + 0.8 * o.x;
    for (std::size_t j = 0; j < z_dim; ++j) eta += 0.4 * o.z[j] / (1.0 + j);
    if (family == fedmiss::Family::linear)
      o.y = eta + normal(gen);
    else
      o.y = unif(gen) < sigmoid(eta) ? 1.0 : 0.0;
    const bool miss = unif(gen) < missing_rate;
    if (miss) {
      if (target == fedmiss::MissingnessTarget::X) o.has_x = false;
      if (target == fedmiss::MissingnessTarget::Y) o.has_y = false;
      if (target == fedmiss::MissingnessTarget::YX) {
        if (unif(gen) < 0.5)
          o.has_x = false;
        else
          o.has_y = false;
      }
    }
    o.oracle_pi = 1.0 - missing_rate;
    site.rows.push_back(std::move(o));
  }
  return site;
}

}  // namespace oracle
