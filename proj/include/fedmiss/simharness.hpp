#pragma once

// Monte Carlo harness. Each replication draws a fresh K-site network, applies
// the scenario's missingness, and runs every requested arm on the same data,
// so arm contrasts are paired. Replications are independent by construction
// (per-(rep, site, purpose) RNG substreams), which makes the parallel fold
// identical to the serial one.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedmiss/datamodel.hpp"
#include "fedmiss/errors.hpp"
#include "fedmiss/fedproto.hpp"
#include "fedmiss/missingness.hpp"
#include "fedmiss/rng.hpp"
#include "fedmiss/weights.hpp"

namespace fedmiss {

enum class Arm { oracle_full, cc, ipw_oracle, ipw_pooled, ipw_site, ipw_calibrated, ipw_uniform };

inline std::string to_string(Arm a) {
  switch (a) {
    case Arm::oracle_full: return "oracle_full";
    case Arm::cc: return "cc";
    case Arm::ipw_oracle: return "ipw_oracle";
    case Arm::ipw_pooled: return "ipw_pooled";
    case Arm::ipw_site: return "ipw_site";
    case Arm::ipw_calibrated: return "ipw_calibrated";
    default: return "ipw_uniform";
  }
}

inline Arm arm_from_string(const std::string& s) {
  if (s == "oracle_full") return Arm::oracle_full;
  if (s == "cc") return Arm::cc;
  if (s == "ipw_oracle") return Arm::ipw_oracle;
  if (s == "ipw_pooled") return Arm::ipw_pooled;
  if (s == "ipw_site") return Arm::ipw_site;
  if (s == "ipw_calibrated") return Arm::ipw_calibrated;
  if (s == "ipw_uniform") return Arm::ipw_uniform;
  throw ParseError("unknown arm '" + s + "'");
}

// ---------------------------------------------------------------------------
// Scenarios.

struct ScenarioSpec {
  std::string name;
  Family family = Family::linear;
  std::size_t z_use = 2;
  MissingnessTarget target = MissingnessTarget::X;
  Vector truth;  // outcome coefficients (intercept, x, z...)
  std::function<SiteDataset(std::size_t, RngStream&, const std::string&)> generate;
  std::function<MechanismSpec(std::size_t)> mechanism;  // by site index
  WeightingFormula working;  // selection model for fitted-weight arms
  CandidateRule rule;        // candidate sharing for the calibrated arm
};

inline ScenarioSpec scenario_by_name(const std::string& name) {
  ScenarioSpec s;
  s.name = name;
  WeightingFormula main_y;  // Pr(R=1 | y, z1, z2), main effects
  main_y.name = FormulaName::main_effects;
  main_y.includes_y = true;
  main_y.includes_x = false;
  main_y.z_use = 2;
  s.working = main_y;
  s.rule.kind = CandidateRule::Kind::largest;
  if (name == "s1_mar_linear" || name == "s1_mnar_linear") {
    s.family = Family::linear;
    s.truth = linear_truth();
    s.generate = [](std::size_t n, RngStream& rng, const std::string& id) {
      return generate_linear_site(n, rng, id);
    };
    const bool mnar = name == "s1_mnar_linear";
    s.mechanism = [mnar](std::size_t) {
      return mnar ? mechanism_mnar_linear() : mechanism_mar_linear();
    };
  } else if (name == "s2_hetero_linear") {
    s.family = Family::linear;
    s.truth = linear_truth();
    s.generate = [](std::size_t n, RngStream& rng, const std::string& id) {
      return generate_linear_site(n, rng, id);
    };
    s.mechanism = [](std::size_t k) { return scenario2_mechanism(k); };
    s.rule.kind = CandidateRule::Kind::two_largest_one_per_mechanism;
    s.rule.even_formula = main_y;
    WeightingFormula inter = main_y;
    inter.name = FormulaName::yz1_interaction;
    s.rule.odd_formula = inter;
  } else if (name == "s1_mar_logistic") {
    s.family = Family::logistic;
    s.truth = logistic_truth();
    s.generate = [](std::size_t n, RngStream& rng, const std::string& id) {
      return generate_logistic_site(n, rng, id);
    };
    s.mechanism = [](std::size_t) { return mechanism_mar_logistic(); };
  } else {
    throw ParseError("unknown scenario '" + name + "'");
  }
  return s;
}

// ---------------------------------------------------------------------------
// Configuration.

struct SimConfig {
  std::string scenario = "s1_mar_linear";
  std::size_t k_sites = 10;
  std::size_t reps = 500;
  std::uint64_t seed = 1;
  std::vector<std::size_t> site_size_pool = {30, 100, 1000};
  std::vector<Arm> arms = {Arm::cc, Arm::ipw_site};
  CalibrationVariant variant = CalibrationVariant::projection;
  long T = 1;
  SuppressionAction action = SuppressionAction::drop;
  int threads = 0;  // 0: FEDMISS_THREADS env var, else hardware concurrency
};

inline SimConfig config_from_json(const json& j) {
  SimConfig c;
  c.scenario = j.value("scenario", c.scenario);
  c.k_sites = j.value("k_sites", c.k_sites);
  c.reps = j.value("reps", c.reps);
  c.seed = j.value("seed", c.seed);
  if (j.contains("site_size_pool"))
    c.site_size_pool = j.at("site_size_pool").get<std::vector<std::size_t>>();
  if (c.site_size_pool.empty()) throw ParseError("site_size_pool must be non-empty");
  if (j.contains("arms")) {
    c.arms.clear();
    for (const auto& a : j.at("arms")) c.arms.push_back(arm_from_string(a.get<std::string>()));
  }
  if (c.arms.empty()) throw ParseError("arms must be non-empty");
  if (j.contains("calibration_variant"))
    c.variant = calibration_from_string(j.at("calibration_variant").get<std::string>());
  c.T = j.value("T", c.T);
  if (j.contains("suppression"))
    c.action = suppression_from_string(j.at("suppression").get<std::string>());
  c.threads = j.value("threads", c.threads);
  return c;
}

inline json config_to_json(const SimConfig& c) {
  json arms = json::array();
  for (const auto a : c.arms) arms.push_back(to_string(a));
  return json{{"scenario", c.scenario},
              {"k_sites", c.k_sites},
              {"reps", c.reps},
              {"seed", c.seed},
              {"site_size_pool", c.site_size_pool},
              {"arms", std::move(arms)},
              {"calibration_variant", to_string(c.variant)},
              {"T", c.T},
              {"suppression", to_string(c.action)},
              {"threads", c.threads}};
}

inline SimConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError("config '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Results.

struct RepArmOutcome {
  bool ok = false;
  std::string error;
  Vector theta;
  Vector se_robust;
  Vector se_naive;
  double sigma = std::numeric_limits<double>::quiet_NaN();
};

struct ArmSummary {
  Arm arm = Arm::cc;
  std::size_t reps_ok = 0;
  std::size_t reps_failed = 0;
  std::vector<std::string> coef_names;
  Vector truth;
  Vector mean_est;
  Vector percent_bias;     // 100 * (mean - truth) / truth
  Vector sd;               // empirical SD of estimates (ddof 1)
  Vector mean_se_robust;
  Vector mean_se_naive;
  Vector coverage_robust;  // percent of reps with |est - truth| <= 1.96 se
  Vector coverage_naive;
  std::vector<std::string> failure_notes;  // first few distinct error strings
};

struct SimResult {
  SimConfig config;
  std::string scenario;
  std::vector<std::string> coef_names;
  std::vector<ArmSummary> arms;
  std::vector<std::vector<RepArmOutcome>> raw;  // [rep][arm]
  double seconds = 0.0;
};

// ---------------------------------------------------------------------------
// One replication: shared data, every arm.

namespace detail {

inline std::string site_label(std::size_t k) {
  std::ostringstream s;
  s << "site" << std::setw(2) << std::setfill('0') << (k + 1);
  return s.str();
}

inline RepArmOutcome run_arm(Arm arm, const ScenarioSpec& scn, const SimConfig& cfg,
                             const std::vector<SiteDataset>& full,
                             const std::vector<SiteDataset>& obs,
                             const std::vector<Vector>& uniform_pi) {
  RepArmOutcome out;
  ProtocolSpec spec;
  spec.model.family = scn.family;
  spec.model.z_use = scn.z_use;
  spec.target = scn.target;
  spec.choice.transport =
      scn.family == Family::linear ? Transport::sufficient_info : Transport::count_aggregation;
  spec.policy.T = cfg.T;
  spec.policy.action = cfg.action;
  spec.variant = cfg.variant;

  const std::vector<SiteDataset>* data = &obs;
  std::vector<SiteDataset> pooled_holder;
  switch (arm) {
    case Arm::oracle_full:
      spec.choice.estimator = Estimator::cc;
      data = &full;
      break;
    case Arm::cc:
      spec.choice.estimator = Estimator::cc;
      break;
    case Arm::ipw_oracle: {
      spec.choice.estimator = Estimator::ipw_site;
      std::vector<Vector> pis;
      for (const auto& s : obs) pis.push_back(oracle_weights(s).pi);
      spec.weight_override = std::move(pis);
      spec.weight_override_label = "oracle";
      break;
    }
    case Arm::ipw_uniform:
      spec.choice.estimator = Estimator::ipw_site;
      spec.weight_override = uniform_pi;
      spec.weight_override_label = "uniform";
      break;
    case Arm::ipw_pooled:
      // Benchmark outside the federated setting: all rows in one place.
      spec.choice.estimator = Estimator::ipw_site;
      spec.formulas = {scn.working};
      pooled_holder.push_back(concat(obs));
      data = &pooled_holder;
      break;
    case Arm::ipw_site:
      spec.choice.estimator = Estimator::ipw_site;
      spec.formulas = {scn.working};
      break;
    case Arm::ipw_calibrated:
      spec.choice.estimator = Estimator::ipw_calibrated;
      spec.formulas = {scn.working};
      spec.rule = scn.rule;
      break;
  }

  try {
    const auto res = run_protocol(*data, spec);
    out.ok = true;
    out.theta = res.fit.theta;
    out.se_robust = res.fit.se_robust();
    out.se_naive = res.fit.se_naive();
    out.sigma = res.fit.sigma;
  } catch (const Error& e) {
    out.ok = false;
    out.error = e.what();
  }
  return out;
}

}  // namespace detail

inline std::vector<RepArmOutcome> simulate_rep(const SimConfig& cfg, const ScenarioSpec& scn,
                                               std::size_t rep) {
  RngStream root(cfg.seed);
  RngStream rep_stream = root.substream(rep);
  std::vector<SiteDataset> full, obs;
  std::vector<Vector> uniform_pi;
  for (std::size_t k = 0; k < cfg.k_sites; ++k) {
    RngStream site_stream = rep_stream.substream(k);
    RngStream size_stream = site_stream.substream("size");
    const std::size_t n = cfg.site_size_pool[size_stream.pick(cfg.site_size_pool.size())];
    RngStream data_stream = site_stream.substream("data");
    full.push_back(scn.generate(n, data_stream, detail::site_label(k)));
    RngStream miss_stream = site_stream.substream("miss");
    obs.push_back(apply_missingness(full.back(), scn.mechanism(k), miss_stream));
    RngStream unif_stream = site_stream.substream("uniform-weights");
    uniform_pi.push_back(uniform_random_weights(n, unif_stream).pi);
  }
  std::vector<RepArmOutcome> out;
  out.reserve(cfg.arms.size());
  for (const auto arm : cfg.arms)
    out.push_back(detail::run_arm(arm, scn, cfg, full, obs, uniform_pi));
  return out;
}

// ---------------------------------------------------------------------------
// The full study.

inline int resolve_threads(int requested, std::size_t reps) {
  int t = requested;
  if (t <= 0) {
    if (const char* env = std::getenv("FEDMISS_THREADS")) t = std::atoi(env);
    if (t <= 0) t = static_cast<int>(std::thread::hardware_concurrency());
    if (t <= 0) t = 1;
  }
  if (static_cast<std::size_t>(t) > reps) t = static_cast<int>(reps == 0 ? 1 : reps);
  return t;
}

inline SimResult run_simulation(const SimConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const ScenarioSpec scn = scenario_by_name(cfg.scenario);
  ModelSpec model;
  model.family = scn.family;
  model.z_use = scn.z_use;

  SimResult result;
  result.config = cfg;
  result.scenario = scn.name;
  result.coef_names = model.coef_names();
  result.raw.assign(cfg.reps, {});

  const int threads = resolve_threads(cfg.threads, cfg.reps);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t rep = next.fetch_add(1);
      if (rep >= cfg.reps) return;
      result.raw[rep] = simulate_rep(cfg, scn, rep);
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  // Deterministic fold in replication order.
  const Eigen::Index p = static_cast<Eigen::Index>(model.theta_dim());
  for (std::size_t a = 0; a < cfg.arms.size(); ++a) {
    ArmSummary s;
    s.arm = cfg.arms[a];
    s.coef_names = result.coef_names;
    s.truth = scn.truth;
    Vector sum = Vector::Zero(p), sumsq = Vector::Zero(p);
    Vector se_r = Vector::Zero(p), se_n = Vector::Zero(p);
    Vector cov_r = Vector::Zero(p), cov_n = Vector::Zero(p);
    for (std::size_t rep = 0; rep < cfg.reps; ++rep) {
      const auto& o = result.raw[rep][a];
      if (!o.ok) {
        ++s.reps_failed;
        if (s.failure_notes.size() < 5 &&
            std::find(s.failure_notes.begin(), s.failure_notes.end(), o.error) ==
                s.failure_notes.end())
          s.failure_notes.push_back(o.error);
        continue;
      }
      ++s.reps_ok;
      sum += o.theta;
      sumsq += o.theta.cwiseProduct(o.theta);
      se_r += o.se_robust;
      se_n += o.se_naive;
      for (Eigen::Index j = 0; j < p; ++j) {
        if (std::abs(o.theta[j] - scn.truth[j]) <= 1.959963984540054 * o.se_robust[j])
          cov_r[j] += 1.0;
        if (std::abs(o.theta[j] - scn.truth[j]) <= 1.959963984540054 * o.se_naive[j])
          cov_n[j] += 1.0;
      }
    }
    const double m = static_cast<double>(s.reps_ok);
    const auto nan_vec = Vector::Constant(p, std::numeric_limits<double>::quiet_NaN());
    if (s.reps_ok == 0) {
      s.mean_est = s.percent_bias = s.sd = s.mean_se_robust = s.mean_se_naive =
          s.coverage_robust = s.coverage_naive = nan_vec;
    } else {
      s.mean_est = sum / m;
      s.percent_bias = Vector(p);
      for (Eigen::Index j = 0; j < p; ++j)
        s.percent_bias[j] = std::abs(scn.truth[j]) > 1e-12
                                ? 100.0 * (s.mean_est[j] - scn.truth[j]) / scn.truth[j]
                                : std::numeric_limits<double>::quiet_NaN();
      s.sd = Vector(p);
      for (Eigen::Index j = 0; j < p; ++j)
        s.sd[j] = s.reps_ok > 1
                      ? std::sqrt(std::max(0.0, (sumsq[j] - m * s.mean_est[j] * s.mean_est[j]) /
                                                    (m - 1.0)))
                      : std::numeric_limits<double>::quiet_NaN();
      s.mean_se_robust = se_r / m;
      s.mean_se_naive = se_n / m;
      s.coverage_robust = cov_r * (100.0 / m);
      s.coverage_naive = cov_n * (100.0 / m);
    }
    result.arms.push_back(std::move(s));
  }
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

// ---------------------------------------------------------------------------
// Reporting.

inline void write_summary_csv(const SimResult& r, std::ostream& out) {
  out << "scenario,arm,coef,truth,mean_est,percent_bias,sd,mean_se_naive,mean_se_robust,"
         "coverage_naive,coverage_robust,reps_ok,reps_failed\n";
  char buf[64];
  auto fmt = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return std::string(buf);
  };
  for (const auto& a : r.arms) {
    for (std::size_t j = 0; j < a.coef_names.size(); ++j) {
      const auto i = static_cast<Eigen::Index>(j);
      out << r.scenario << ',' << to_string(a.arm) << ',' << a.coef_names[j] << ','
          << fmt(a.truth[i]) << ',' << fmt(a.reps_ok ? a.mean_est[i] : std::nan("")) << ','
          << fmt(a.reps_ok ? a.percent_bias[i] : std::nan("")) << ','
          << fmt(a.reps_ok ? a.sd[i] : std::nan("")) << ','
          << fmt(a.reps_ok ? a.mean_se_naive[i] : std::nan("")) << ','
          << fmt(a.reps_ok ? a.mean_se_robust[i] : std::nan("")) << ','
          << fmt(a.reps_ok ? a.coverage_naive[i] : std::nan("")) << ','
          << fmt(a.reps_ok ? a.coverage_robust[i] : std::nan("")) << ',' << a.reps_ok << ','
          << a.reps_failed << '\n';
    }
  }
}

inline void write_replicates_csv(const SimResult& r, std::ostream& out) {
  out << "rep,arm,ok,error";
  for (const auto& c : r.coef_names) out << ",est_" << c << ",se_robust_" << c << ",se_naive_" << c;
  out << "\n";
  char buf[64];
  auto fmt = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return std::string(buf);
  };
  for (std::size_t rep = 0; rep < r.raw.size(); ++rep) {
    for (std::size_t a = 0; a < r.arms.size(); ++a) {
      const auto& o = r.raw[rep][a];
      std::string err = o.error;
      for (auto& ch : err)
        if (ch == ',' || ch == '\n') ch = ';';
      out << rep << ',' << to_string(r.arms[a].arm) << ',' << (o.ok ? 1 : 0) << ',' << err;
      for (std::size_t j = 0; j < r.coef_names.size(); ++j) {
        const auto i = static_cast<Eigen::Index>(j);
        if (o.ok)
          out << ',' << fmt(o.theta[i]) << ',' << fmt(o.se_robust[i]) << ',' << fmt(o.se_naive[i]);
        else
          out << ",,,";
      }
      out << '\n';
    }
  }
}

inline const ArmSummary& find_arm(const SimResult& r, Arm arm) {
  for (const auto& a : r.arms)
    if (a.arm == arm) return a;
  throw Error("arm " + to_string(arm) + " not present in simulation result");
}

}  // namespace fedmiss
