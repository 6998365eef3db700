// fedmiss: fit federated regressions from per-site CSVs, run Monte Carlo
// studies, and inspect protocol transcripts.
//
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include <fedmiss/fedmiss.hpp>

namespace {

using fedmiss::json;

std::vector<std::string> split_paths(const std::string& joined) {
  std::vector<std::string> out;
  std::stringstream ss(joined);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

json named(const std::vector<std::string>& names, const fedmiss::Vector& v) {
  json j = json::object();
  for (std::size_t i = 0; i < names.size() && static_cast<Eigen::Index>(i) < v.size(); ++i)
    j[names[i]] = v[static_cast<Eigen::Index>(i)];
  return j;
}

struct FitOptions {
  std::string sites;
  std::string model = "linear";
  std::string estimator = "cc";
  std::string transport;  // default chosen by family
  std::string target = "x";
  std::size_t z_use = 0;  // 0: every z column in the data
  std::string weighting = "main_effects";
  bool weighting_y = true;
  bool weighting_x = false;
  std::size_t weighting_z_use = 0;  // 0: same as z_use
  std::string rule = "largest";
  std::string candidate_sites;  // comma list, rule=explicit
  std::string variant = "projection";
  long T = 1;
  std::string suppression = "drop";
  std::string out;
  std::string transcript_path = "fedmiss_transcript.ndjson";
};

int run_fit(const FitOptions& opt) {
  // Load every site; z width must agree.
  std::vector<fedmiss::SiteDataset> sites;
  for (const auto& path : split_paths(opt.sites)) sites.push_back(fedmiss::load_site_csv(path));
  if (sites.empty()) throw fedmiss::ParseError("no site files given");
  for (const auto& s : sites)
    if (s.z_dim != sites.front().z_dim)
      throw fedmiss::SchemaError("site '" + s.site_id + "' has a different z width");

  fedmiss::ProtocolSpec spec;
  spec.model.family = fedmiss::family_from_string(opt.model);
  spec.model.z_use = opt.z_use == 0 ? sites.front().z_dim : opt.z_use;
  spec.target = fedmiss::target_from_string(opt.target);
  spec.choice.estimator = fedmiss::estimator_from_string(opt.estimator);
  spec.choice.transport =
      opt.transport.empty()
          ? (spec.model.family == fedmiss::Family::linear ? fedmiss::Transport::sufficient_info
                                                          : fedmiss::Transport::count_aggregation)
          : fedmiss::transport_from_string(opt.transport);
  spec.policy.T = opt.T;
  spec.policy.action = fedmiss::suppression_from_string(opt.suppression);
  spec.variant = fedmiss::calibration_from_string(opt.variant);

  if (spec.choice.estimator != fedmiss::Estimator::cc) {
    fedmiss::WeightingFormula f;
    f.name = fedmiss::formula_from_string(opt.weighting);
    f.includes_y = opt.weighting_y;
    f.includes_x = opt.weighting_x;
    f.z_use = opt.weighting_z_use == 0 ? spec.model.z_use : opt.weighting_z_use;
    spec.formulas = {f};
    if (opt.rule == "largest") {
      spec.rule.kind = fedmiss::CandidateRule::Kind::largest;
    } else if (opt.rule == "all") {
      spec.rule.kind = fedmiss::CandidateRule::Kind::all;
    } else if (opt.rule == "explicit") {
      spec.rule.kind = fedmiss::CandidateRule::Kind::explicit_list;
      for (const auto& id : split_paths(opt.candidate_sites)) {
        bool found = false;
        for (std::size_t k = 0; k < sites.size(); ++k)
          if (sites[k].site_id == id) {
            spec.rule.explicit_list.push_back({k, f});
            found = true;
          }
        if (!found) throw fedmiss::ParseError("candidate site '" + id + "' not among the inputs");
      }
    } else {
      throw fedmiss::ParseError("unknown candidate rule '" + opt.rule + "'");
    }
  }

  const auto res = fedmiss::run_protocol(sites, spec);
  res.transcript.dump(opt.transcript_path);

  const auto names = spec.model.coef_names();
  const auto se_r = res.fit.se_robust();
  const auto se_n = res.fit.se_naive();
  json report{{"family", to_string(spec.model.family)},
              {"estimator", to_string(spec.choice.estimator)},
              {"transport", to_string(spec.choice.transport)},
              {"target", to_string(spec.target)},
              {"n_total", res.fit.n_total},
              {"n_complete", res.fit.n_complete},
              {"rounds_used", res.fit.rounds_used},
              {"theta", named(names, res.fit.theta)},
              {"se_robust", named(names, se_r)},
              {"se_naive", named(names, se_n)},
              {"transcript", opt.transcript_path}};
  if (spec.model.family == fedmiss::Family::linear) report["sigma"] = res.fit.sigma;
  json ci = json::object();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto j = static_cast<Eigen::Index>(i);
    ci[names[i]] =
        json::array({res.fit.theta[j] - 1.96 * se_r[j], res.fit.theta[j] + 1.96 * se_r[j]});
  }
  report["ci95"] = std::move(ci);
  if (spec.model.family == fedmiss::Family::logistic) {
    json ors = json::object();
    for (std::size_t i = 0; i < names.size(); ++i) {
      const auto j = static_cast<Eigen::Index>(i);
      ors[names[i]] = json{{"odds_ratio", std::exp(res.fit.theta[j])},
                           {"ci95", json::array({std::exp(res.fit.theta[j] - 1.96 * se_r[j]),
                                                 std::exp(res.fit.theta[j] + 1.96 * se_r[j])})}};
    }
    report["odds_ratios"] = std::move(ors);
  }
  if (spec.choice.transport == fedmiss::Transport::count_aggregation)
    report["suppression"] = json{{"threshold", spec.policy.T},
                                 {"action", to_string(spec.policy.action)},
                                 {"cells_suppressed", res.fit.suppressed_cells},
                                 {"rows_suppressed", res.fit.suppressed_n_raw}};

  const std::string text = report.dump(2);
  if (opt.out.empty()) {
    std::cout << text << "\n";
  } else {
    std::ofstream f(opt.out);
    if (!f) throw fedmiss::ParseError("cannot open '" + opt.out + "' for writing");
    f << text << "\n";
    std::cout << "report written to " << opt.out << "\n";
  }
  return 0;
}

int run_simulate(const std::string& config_path, const std::string& out_path,
                 const std::string& per_rep_path, int threads) {
  auto cfg = fedmiss::load_config(config_path);
  if (threads > 0) cfg.threads = threads;
  const auto result = fedmiss::run_simulation(cfg);
  {
    std::ofstream f(out_path);
    if (!f) throw fedmiss::ParseError("cannot open '" + out_path + "' for writing");
    fedmiss::write_summary_csv(result, f);
  }
  if (!per_rep_path.empty()) {
    std::ofstream f(per_rep_path);
    if (!f) throw fedmiss::ParseError("cannot open '" + per_rep_path + "' for writing");
    fedmiss::write_replicates_csv(result, f);
  }
  std::cout << "scenario " << result.scenario << ": " << cfg.reps << " replications, "
            << cfg.k_sites << " sites, " << std::fixed << std::setprecision(1) << result.seconds
            << "s\n";
  std::printf("%-16s %12s %10s %10s %10s  ok/fail\n", "arm", "pct_bias[0]", "sd[0]", "cov_rob",
              "cov_naive");
  for (const auto& a : result.arms) {
    if (a.reps_ok == 0) {
      std::printf("%-16s %12s %10s %10s %10s  %zu/%zu\n", to_string(a.arm).c_str(), "-", "-", "-",
                  "-", a.reps_ok, a.reps_failed);
      continue;
    }
    std::printf("%-16s %12.2f %10.4f %10.2f %10.2f  %zu/%zu\n", to_string(a.arm).c_str(),
                a.percent_bias[0], a.sd[0], a.coverage_robust[0], a.coverage_naive[0], a.reps_ok,
                a.reps_failed);
  }
  std::cout << "summary written to " << out_path << "\n";
  return 0;
}

int run_transcript(const std::string& action, const std::string& path, long audit_T) {
  const auto t = fedmiss::parse_transcript(path);
  if (action == "show") {
    std::cout << t.parsed_header().dump(2) << "\n";
    std::printf("%5s  %-14s %-8s %-8s %-16s %8s\n", "round", "direction", "from", "to", "type",
                "bytes");
    for (const auto& m : t.messages)
      std::printf("%5d  %-14s %-8s %-8s %-16s %8zu\n", m.round,
                  m.site_to_coord ? "site_to_coord" : "coord_to_site", m.from.c_str(),
                  m.to.c_str(), to_string(m.type).c_str(), m.bytes());
    std::cout << "total rounds: " << t.total_rounds << "\n";
    return 0;
  }
  if (action == "replay") {
    const auto r = fedmiss::replay(t);
    json out{{"theta", fedmiss::wire::encode(r.theta)},
             {"rounds", t.total_rounds},
             {"cov_theta_dim", r.stacked.cov_theta.rows()}};
    if (std::isfinite(r.sigma)) out["sigma"] = r.sigma;
    fedmiss::Vector se(r.theta.size());
    for (Eigen::Index i = 0; i < r.theta.size(); ++i)
      se[i] = std::sqrt(r.stacked.cov_theta(i, i));
    out["se_robust"] = fedmiss::wire::encode(se);
    std::cout << out.dump(2) << "\n";
    return 0;
  }
  if (action == "audit") {
    const auto report = fedmiss::privacy_audit(t, audit_T);
    json rounds = json::array();
    for (const auto& r : report.rounds)
      rounds.push_back(json{{"round", r.round},
                            {"payload_types", r.payload_types},
                            {"min_n_raw", r.min_n_raw}});
    json out{{"pass", report.pass},
             {"threshold", report.threshold},
             {"violations", report.violations},
             {"rounds", std::move(rounds)}};
    std::cout << out.dump(2) << "\n";
    return 0;
  }
  throw fedmiss::ParseError("unknown transcript action '" + action + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"federated regression with missing data: complete-case and "
               "inverse-probability-weighted estimators over site summaries"};
  app.name("fedmiss");  // stable help text regardless of the invocation path
  app.require_subcommand(1);

  // simulate
  std::string sim_config, sim_out, sim_per_rep;
  int sim_threads = 0;
  auto* sim = app.add_subcommand("simulate", "run a Monte Carlo study from a JSON config");
  sim->add_option("--config", sim_config, "JSON config path")->required();
  sim->add_option("--out", sim_out, "summary CSV output path")->required();
  sim->add_option("--per-rep", sim_per_rep, "optional per-replication CSV output path");
  sim->add_option("--threads", sim_threads, "worker threads (0: FEDMISS_THREADS or hardware)");

  // fit
  FitOptions fo;
  auto* fit = app.add_subcommand("fit", "fit a federated model from per-site CSV files");
  fit->add_option("--sites", fo.sites, "comma-separated per-site CSV paths")->required();
  fit->add_option("--model", fo.model, "outcome family: linear|logistic")
      ->check(CLI::IsMember({"linear", "logistic"}));
  fit->add_option("--estimator", fo.estimator, "cc|ipw_site|ipw_calibrated")
      ->check(CLI::IsMember({"cc", "ipw_site", "ipw_calibrated"}));
  fit->add_option("--transport", fo.transport,
                  "suffstats|counts (default: suffstats for linear, counts for logistic)")
      ->check(CLI::IsMember({"suffstats", "counts", "sufficient_info", "count_aggregation"}));
  fit->add_option("--target", fo.target, "which fields can be missing: x|y|yx")
      ->check(CLI::IsMember({"x", "y", "yx"}));
  fit->add_option("--z-use", fo.z_use, "number of z columns in the outcome model (0: all)");
  fit->add_option("--weighting", fo.weighting,
                  "selection-model formula: main_effects|pairwise_interactions|yz1_interaction")
      ->check(CLI::IsMember({"main_effects", "pairwise_interactions", "yz1_interaction"}));
  fit->add_flag("--weighting-y,!--no-weighting-y", fo.weighting_y,
                "include y as a selection-model driver (default on)");
  fit->add_flag("--weighting-x", fo.weighting_x, "include x as a selection-model driver");
  fit->add_option("--weighting-z-use", fo.weighting_z_use,
                  "z columns in the selection model (0: same as --z-use)");
  fit->add_option("--rule", fo.rule, "calibration candidate rule: largest|all|explicit")
      ->check(CLI::IsMember({"largest", "all", "explicit"}));
  fit->add_option("--candidate-sites", fo.candidate_sites,
                  "comma-separated site ids (rule=explicit)");
  fit->add_option("--calibration-variant", fo.variant, "projection|supplement_normalized")
      ->check(CLI::IsMember({"projection", "supplement_normalized"}));
  fit->add_option("--T", fo.T, "cell suppression threshold (counts transport)")
      ->check(CLI::PositiveNumber);
  fit->add_option("--suppression", fo.suppression, "below-threshold cells: drop|refuse")
      ->check(CLI::IsMember({"drop", "refuse"}));
  fit->add_option("--out", fo.out, "write the JSON report here (default: stdout)");
  fit->add_option("--transcript", fo.transcript_path, "protocol transcript output path");

  // transcript
  std::string tr_action, tr_path;
  long tr_T = -1;
  auto* tr = app.add_subcommand("transcript", "inspect a protocol transcript");
  tr->add_option("action", tr_action, "show|replay|audit")
      ->required()
      ->check(CLI::IsMember({"show", "replay", "audit"}));
  tr->add_option("path", tr_path, "transcript NDJSON path")->required();
  tr->add_option("--T", tr_T, "audit threshold override (default: recorded policy)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // help text, exit 0
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n\n" << app.help() << "\n";
    return 1;
  }

  try {
    if (sim->parsed()) return run_simulate(sim_config, sim_out, sim_per_rep, sim_threads);
    if (fit->parsed()) return run_fit(fo);
    return run_transcript(tr_action, tr_path, tr_T);
  } catch (const fedmiss::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
