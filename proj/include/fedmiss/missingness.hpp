#pragma once

// Synthetic data generators and missingness mechanisms. A mechanism is a
// logistic selection model Pr(complete | row) = expit(eta(row)), evaluated on
// the pre-blanking row; the realized indicator and the true probability are
// both recorded (the latter as Observation::oracle_pi, for benchmark arms).

#include <cmath>
#include <string>
#include <vector>

#include "fedmiss/datamodel.hpp"
#include "fedmiss/errors.hpp"
#include "fedmiss/numerics.hpp"
#include "fedmiss/rng.hpp"

namespace fedmiss {

struct MechanismSpec {
  std::string label;  // descriptive only
  MissingnessTarget target = MissingnessTarget::X;
  double intercept = 0.0;
  double coef_y = 0.0;
  double coef_x = 0.0;
  std::vector<double> coef_z;
  double coef_yz1 = 0.0;

  double eta(const Observation& o) const {
    if (coef_y != 0.0 && !o.has_y) throw DriverUnavailable("mechanism drives on y, row lacks y");
    if (coef_x != 0.0 && !o.has_x) throw DriverUnavailable("mechanism drives on x, row lacks x");
    if (coef_z.size() > o.z.size()) throw DriverUnavailable("mechanism drives on absent z");
    double e = intercept;
    if (coef_y != 0.0) e += coef_y * o.y;
    if (coef_x != 0.0) e += coef_x * o.x;
    for (std::size_t j = 0; j < coef_z.size(); ++j) e += coef_z[j] * o.z[j];
    if (coef_yz1 != 0.0) {
      if (!o.has_y) throw DriverUnavailable("mechanism drives on y*z1, row lacks y");
      if (o.z.empty()) throw DriverUnavailable("mechanism drives on y*z1, row lacks z1");
      e += coef_yz1 * o.y * o.z[0];
    }
    return e;
  }
  double pi(const Observation& o) const { return expit(eta(o)); }
};

// The benchmark mechanisms drop the target more often as their drivers grow:
// completion odds fall by the stated logits, leaving roughly 40% of rows
// complete in the continuous-outcome study.

// Selection on (Y, Z): ignorable given observed data when X is the target.
inline MechanismSpec mechanism_mar_linear() {
  return {"mar", MissingnessTarget::X, 0.1, -0.1, 0.0, {-0.2, -0.2}, 0.0};
}
// Selection on (X, Z): depends on the value that goes missing.
inline MechanismSpec mechanism_mnar_linear() {
  return {"mnar", MissingnessTarget::X, 0.1, 0.0, -0.2, {-0.2, -0.2}, 0.0};
}
// Binary-outcome selection on (Y, Z). Completion mildly favors events: the
// log probability-ratio log[pi(y=1,z)/pi(y=0,z)] is about +0.12, which is what
// shifts the unweighted intercept by ~+12% in the benchmark; about 59% of
// rows go missing.
inline MechanismSpec mechanism_mar_logistic() {
  return {"mar_logistic", MissingnessTarget::X, -0.35, 0.22, 0.0, {-0.2, -0.2}, 0.0};
}

// Heterogeneous-mechanism scenario: even-indexed sites select on main effects
// only, odd-indexed sites add a y*z1 interaction.
inline MechanismSpec scenario2_mechanism(std::size_t site_index) {
  if (site_index % 2 == 0)
    return {"s2_main", MissingnessTarget::X, 0.2, -0.1, 0.0, {-0.1, -0.1}, 0.0};
  return {"s2_interaction", MissingnessTarget::X, 0.2, -0.1, 0.0, {-0.05, -0.05}, -0.1};
}

// True outcome coefficients shared by both families: (intercept, x, z1, z2).
inline Vector linear_truth() { return from_std({1.0, 1.0, 1.0, 1.0}); }
inline double linear_truth_sigma() { return 5.0; }
inline Vector logistic_truth() { return from_std({1.0, 1.0, 1.0, 1.0}); }

// Continuous-outcome site: Z1 ~ Bern(0.5), Z2 ~ N(Z1, 1), X ~ N(Z1*Z2, 1),
// Y = 1 + X + Z1 + Z2 + eps with eps ~ N(0, 25).
inline SiteDataset generate_linear_site(std::size_t n, RngStream& rng,
                                        const std::string& site_id) {
  SiteDataset out;
  out.site_id = site_id;
  out.z_dim = 2;
  out.rows.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Observation o;
    const double z1 = rng.bernoulli(0.5) ? 1.0 : 0.0;
    const double z2 = rng.normal(z1, 1.0);
    o.z = {z1, z2};
    o.x = rng.normal(z1 * z2, 1.0);
    o.y = 1.0 + o.x + z1 + z2 + rng.normal(0.0, 5.0);
    out.rows.push_back(std::move(o));
  }
  return out;
}

// Binary-outcome site: X, Z1, Z2 iid Bern(0.5); logit Pr(Y=1) = 1+X+Z1+Z2.
// The combination space (y, x, z1, z2) has 2^4 = 16 cells.
inline SiteDataset generate_logistic_site(std::size_t n, RngStream& rng,
                                          const std::string& site_id) {
  SiteDataset out;
  out.site_id = site_id;
  out.z_dim = 2;
  out.rows.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Observation o;
    const double z1 = rng.bernoulli(0.5) ? 1.0 : 0.0;
    const double z2 = rng.bernoulli(0.5) ? 1.0 : 0.0;
    o.z = {z1, z2};
    o.x = rng.bernoulli(0.5) ? 1.0 : 0.0;
    o.y = rng.bernoulli(expit(1.0 + o.x + z1 + z2)) ? 1.0 : 0.0;
    out.rows.push_back(std::move(o));
  }
  return out;
}

// Draws the completeness indicator row by row, blanks the target fields on
// selected-out rows, and stores the true probability. The mechanism is
// evaluated on the intact row, so a mechanism may legitimately drive on the
// value it is about to remove.
inline SiteDataset apply_missingness(const SiteDataset& data, const MechanismSpec& mech,
                                     RngStream& rng) {
  SiteDataset out = data;
  for (auto& o : out.rows) {
    const double p = mech.pi(o);
    o.oracle_pi = p;
    const bool complete = rng.bernoulli(p);
    if (!complete) {
      if (mech.target == MissingnessTarget::X || mech.target == MissingnessTarget::YX)
        o.has_x = false;
      if (mech.target == MissingnessTarget::Y || mech.target == MissingnessTarget::YX)
        o.has_y = false;
    }
  }
  return out;
}

}  // namespace fedmiss
