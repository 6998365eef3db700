#pragma once

// Federated orchestration. Sites and coordinator exchange JSON payloads; the
// transcript records every message that crossed a site boundary, in order,
// and the coordinator computes exclusively from parsed payload bytes — which
// is what makes a transcript replayable bit-for-bit.
//
// Round structure (communication phases, numbered from 1):
//   sufficient_info (linear family)
//     cc / ipw_site:   1 statistics up | 2 beta down, RSS up | 3 theta down, blocks up
//     ipw_calibrated:  1 candidates up | 2 candidates down, statistics up
//                      | 3 beta down, RSS up | 4 theta down, blocks up
//   count_aggregation (logistic family)
//     cc:              1 counts up (theta and variance both from that round)
//     ipw_site:        1 counts up | 2 theta down | 3 blocks up
//     ipw_calibrated:  1 candidates up | 2 candidates down, counts up
//                      | 3 theta down | 4 blocks up
// Totals: 3 / 3 / 4 under sufficient statistics, 1 / 3 / 4 under counts.
//
// Privacy posture: no payload type can carry an individual row. Sites see
// foreign selection models only as (formula, coefficients); the coordinator
// sees aggregates. Count cells below the suppression threshold are dropped
// (with the dropped mass reported) or the transmission is refused outright.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedmiss/datamodel.hpp"
#include "fedmiss/errors.hpp"
#include "fedmiss/estimators.hpp"
#include "fedmiss/numerics.hpp"
#include "fedmiss/variance.hpp"
#include "fedmiss/weights.hpp"

namespace fedmiss {

using json = nlohmann::json;

// --------------------------------------------------------------------------
// Wire encoding. Matrices travel as row-major flat arrays with explicit dims.

namespace wire {

inline json encode(const Matrix& m) {
  json v = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) v.push_back(m(i, j));
  return json{{"r", m.rows()}, {"c", m.cols()}, {"v", std::move(v)}};
}

inline Matrix decode_matrix(const json& j) {
  const Eigen::Index r = j.at("r").get<Eigen::Index>();
  const Eigen::Index c = j.at("c").get<Eigen::Index>();
  const auto& v = j.at("v");
  if (static_cast<Eigen::Index>(v.size()) != r * c)
    throw CorruptTranscript("matrix payload: dims disagree with data length");
  Matrix m(r, c);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index jj = 0; jj < c; ++jj) m(i, jj) = v[static_cast<std::size_t>(k++)].get<double>();
  return m;
}

inline json encode(const Vector& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline Vector decode_vector(const json& j) {
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  return v;
}

inline json encode(const SuffStats& s, std::size_t n_total) {
  return json{{"site", s.site_id}, {"p", s.p},     {"n_complete", s.n_complete},
              {"n_total", n_total}, {"sum_w", s.sum_w}, {"xtwx", encode(s.xtwx)},
              {"xtwy", encode(s.xtwy)}};
}

inline SuffStats decode_suffstats(const json& j, std::size_t* n_total = nullptr) {
  SuffStats s;
  s.site_id = j.at("site").get<std::string>();
  s.p = j.at("p").get<std::size_t>();
  s.n_complete = j.at("n_complete").get<std::size_t>();
  s.sum_w = j.at("sum_w").get<double>();
  s.xtwx = decode_matrix(j.at("xtwx"));
  s.xtwy = decode_vector(j.at("xtwy"));
  if (n_total) *n_total = j.at("n_total").get<std::size_t>();
  return s;
}

inline json encode(const RssReport& r) {
  return json{{"site", r.site_id}, {"rss", r.rss}, {"n_complete", r.n_complete}};
}

inline RssReport decode_rss(const json& j) {
  RssReport r;
  r.site_id = j.at("site").get<std::string>();
  r.rss = j.at("rss").get<double>();
  r.n_complete = j.at("n_complete").get<std::size_t>();
  return r;
}

inline json encode(const CountReport& c, const std::vector<std::string>& fields,
                   std::size_t n_total) {
  json rows = json::array();
  for (const auto& row : c.rows) {
    json u = json::object();
    for (std::size_t f = 0; f < fields.size(); ++f) u[fields[f]] = row.u[f];
    rows.push_back(json{{"u", std::move(u)}, {"w", row.w}, {"n_raw", row.n_raw}});
  }
  return json{{"site", c.site_id},
              {"fields", fields},
              {"rows", std::move(rows)},
              {"suppressed_cells", c.suppressed_cells},
              {"suppressed_n_raw", c.suppressed_n_raw},
              {"n_total", n_total}};
}

inline CountReport decode_counts(const json& j, std::size_t* n_total = nullptr) {
  CountReport c;
  c.site_id = j.at("site").get<std::string>();
  const auto fields = j.at("fields").get<std::vector<std::string>>();
  for (const auto& row : j.at("rows")) {
    CountRow cr;
    cr.u.resize(fields.size());
    for (std::size_t f = 0; f < fields.size(); ++f) cr.u[f] = row.at("u").at(fields[f]).get<double>();
    cr.w = row.at("w").get<double>();
    cr.n_raw = row.at("n_raw").get<long>();
    c.rows.push_back(std::move(cr));
  }
  c.suppressed_cells = j.at("suppressed_cells").get<std::size_t>();
  c.suppressed_n_raw = j.at("suppressed_n_raw").get<long>();
  if (n_total) *n_total = j.at("n_total").get<std::size_t>();
  return c;
}

inline json encode(const WeightingFormula& f) {
  return json{{"formula_name", to_string(f.name)},
              {"includes_y", f.includes_y},
              {"includes_x", f.includes_x},
              {"z_use", f.z_use}};
}

inline WeightingFormula decode_formula(const json& j) {
  WeightingFormula f;
  f.name = formula_from_string(j.at("formula_name").get<std::string>());
  f.includes_y = j.at("includes_y").get<bool>();
  f.includes_x = j.at("includes_x").get<bool>();
  f.z_use = j.at("z_use").get<std::size_t>();
  return f;
}

inline json encode(const CandidateSet& models) {
  json arr = json::array();
  for (const auto& m : models) {
    json o = encode(m.formula);
    o["origin_site"] = m.origin_site;
    o["alpha"] = encode(m.alpha);
    arr.push_back(std::move(o));
  }
  return json{{"models", std::move(arr)}};
}

inline CandidateSet decode_candidates(const json& j) {
  CandidateSet out;
  for (const auto& o : j.at("models")) {
    CandidateModel m;
    m.origin_site = o.at("origin_site").get<std::string>();
    m.formula = decode_formula(o);
    m.alpha = decode_vector(o.at("alpha"));
    out.push_back(std::move(m));
  }
  return out;
}

inline json encode_theta(const Vector& beta, double sigma) {
  json j{{"beta", encode(beta)}};
  if (std::isfinite(sigma)) j["sigma"] = sigma;
  return j;
}

inline json encode(const VarianceBlocks& b) {
  json j{{"site", b.site_id},
         {"regime", to_string(b.regime)},
         {"theta_dim", b.theta_dim},
         {"alpha_dims", b.alpha_dims},
         {"a_tt", encode(b.a_tt)},
         {"b_tt", encode(b.b_tt)}};
  if (b.regime == VarianceRegime::site_specific) {
    j["own_index"] = b.own_index;
    j["a_ta_own"] = encode(b.a_ta_own);
    j["a_aa_own"] = encode(b.a_aa_own);
    j["b_ta_own"] = encode(b.b_ta_own);
    j["b_aa_own"] = encode(b.b_aa_own);
  } else if (b.regime == VarianceRegime::calibrated) {
    j["a_full"] = encode(b.a_full);
    j["b_full"] = encode(b.b_full);
  }
  return j;
}

inline VarianceBlocks decode_blocks(const json& j) {
  VarianceBlocks b;
  b.site_id = j.at("site").get<std::string>();
  b.regime = regime_from_string(j.at("regime").get<std::string>());
  b.theta_dim = j.at("theta_dim").get<std::size_t>();
  b.alpha_dims = j.at("alpha_dims").get<std::vector<std::size_t>>();
  b.a_tt = decode_matrix(j.at("a_tt"));
  b.b_tt = decode_matrix(j.at("b_tt"));
  if (b.regime == VarianceRegime::site_specific) {
    b.own_index = j.at("own_index").get<int>();
    b.a_ta_own = decode_matrix(j.at("a_ta_own"));
    b.a_aa_own = decode_matrix(j.at("a_aa_own"));
    b.b_ta_own = decode_matrix(j.at("b_ta_own"));
    b.b_aa_own = decode_matrix(j.at("b_aa_own"));
  } else if (b.regime == VarianceRegime::calibrated) {
    b.a_full = decode_matrix(j.at("a_full"));
    b.b_full = decode_matrix(j.at("b_full"));
  }
  return b;
}

}  // namespace wire

// --------------------------------------------------------------------------
// Transcript.

enum class PayloadType {
  suff_stats,
  rss_report,
  count_rows,
  candidate_model,
  theta_broadcast,
  variance_blocks
};

inline std::string to_string(PayloadType t) {
  switch (t) {
    case PayloadType::suff_stats: return "suff_stats";
    case PayloadType::rss_report: return "rss_report";
    case PayloadType::count_rows: return "count_rows";
    case PayloadType::candidate_model: return "candidate_model";
    case PayloadType::theta_broadcast: return "theta_broadcast";
    default: return "variance_blocks";
  }
}
inline PayloadType payload_from_string(const std::string& s) {
  if (s == "suff_stats") return PayloadType::suff_stats;
  if (s == "rss_report") return PayloadType::rss_report;
  if (s == "count_rows") return PayloadType::count_rows;
  if (s == "candidate_model") return PayloadType::candidate_model;
  if (s == "theta_broadcast") return PayloadType::theta_broadcast;
  if (s == "variance_blocks") return PayloadType::variance_blocks;
  throw CorruptTranscript("unknown payload type '" + s + "'");
}

// The schema cannot express an individual observation: every payload struct
// aggregates. (Checked here so a refactor cannot quietly add one.)
static_assert(!std::is_same_v<SuffStats, Observation> && !std::is_same_v<RssReport, Observation> &&
                  !std::is_same_v<CountReport, Observation> &&
                  !std::is_same_v<CandidateModel, Observation> &&
                  !std::is_same_v<VarianceBlocks, Observation>,
              "payload types must be aggregates, never rows");

struct RoundMessage {
  int round = 0;
  bool site_to_coord = true;
  std::string from;
  std::string to;
  PayloadType type = PayloadType::suff_stats;
  std::string payload;  // serialized JSON object — the bytes of record

  json parsed() const { return json::parse(payload); }
  std::size_t bytes() const { return payload.size(); }
};

struct SuppressionPolicy {
  long T = 1;
  SuppressionAction action = SuppressionAction::drop;
};

struct Transcript {
  std::string header;  // serialized JSON object — first NDJSON line
  std::vector<RoundMessage> messages;
  int total_rounds = 0;

  json parsed_header() const { return json::parse(header); }

  void dump(std::ostream& out) const {
    out << header << "\n";
    for (const auto& m : messages) {
      json j{{"round", m.round},
             {"dir", m.site_to_coord ? "site_to_coord" : "coord_to_site"},
             {"from", m.from},
             {"to", m.to},
             {"type", to_string(m.type)},
             {"payload", json::parse(m.payload)}};
      out << j.dump() << "\n";
    }
  }
  void dump(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot open '" + path + "' for writing");
    dump(out);
  }
};

inline Transcript parse_transcript(std::istream& in) {
  Transcript t;
  std::string line;
  if (!std::getline(in, line)) throw CorruptTranscript("empty transcript");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw CorruptTranscript(std::string("header line: ") + e.what());
  }
  if (!header.contains("protocol_version") || header["protocol_version"].get<int>() != 1)
    throw CorruptTranscript("missing or unsupported protocol_version");
  t.header = header.dump();
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) {
      if (in.eof()) break;
      throw CorruptTranscript("blank line " + std::to_string(lineno));
    }
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw CorruptTranscript("line " + std::to_string(lineno) + ": " + e.what());
    }
    try {
      RoundMessage m;
      m.round = j.at("round").get<int>();
      const auto dir = j.at("dir").get<std::string>();
      if (dir != "site_to_coord" && dir != "coord_to_site")
        throw CorruptTranscript("line " + std::to_string(lineno) + ": bad direction");
      m.site_to_coord = dir == "site_to_coord";
      m.from = j.at("from").get<std::string>();
      m.to = j.at("to").get<std::string>();
      m.type = payload_from_string(j.at("type").get<std::string>());
      m.payload = j.at("payload").dump();
      t.total_rounds = std::max(t.total_rounds, m.round);
      t.messages.push_back(std::move(m));
    } catch (const json::exception& e) {
      throw CorruptTranscript("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return t;
}

inline Transcript parse_transcript(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CorruptTranscript("cannot open '" + path + "'");
  return parse_transcript(in);
}

// --------------------------------------------------------------------------
// Candidate selection rules.

struct CandidateSpec {
  std::size_t site_index = 0;
  WeightingFormula formula;
};

struct CandidateRule {
  enum class Kind { largest, all, explicit_list, two_largest_one_per_mechanism };
  Kind kind = Kind::largest;
  std::vector<CandidateSpec> explicit_list;
  // two_largest_one_per_mechanism: formula per site-index parity class.
  WeightingFormula even_formula;
  WeightingFormula odd_formula;
};

// --------------------------------------------------------------------------
// Protocol specification and result.

struct ProtocolSpec {
  ModelSpec model;
  MissingnessTarget target = MissingnessTarget::X;
  EstimatorChoice choice;
  // Selection-model formulas: empty (cc / weight_override), one shared
  // formula, or one per site.
  std::vector<WeightingFormula> formulas;
  CandidateRule rule;  // ipw_calibrated only
  CalibrationVariant variant = CalibrationVariant::projection;
  SuppressionPolicy policy;
  // Known-probability arms (oracle / uniform): per-site per-row pi.
  std::optional<std::vector<Vector>> weight_override;
  std::string weight_override_label = "supplied";
};

struct ProtocolResult {
  FitResult fit;
  StackedVariance stacked;
  Matrix cov_naive;
  CandidateSet candidates;  // as used on the wire (empty unless calibrated)
  Transcript transcript;
};

namespace detail {

inline WeightingFormula formula_for_site(const ProtocolSpec& spec, std::size_t k) {
  if (spec.formulas.size() == 1) return spec.formulas.front();
  if (k < spec.formulas.size()) return spec.formulas[k];
  throw DimensionMismatch("protocol: formula list must have length 1 or K");
}

inline std::vector<CandidateSpec> resolve_candidates(const std::vector<SiteDataset>& sites,
                                                     const ProtocolSpec& spec) {
  using Kind = CandidateRule::Kind;
  std::vector<CandidateSpec> out;
  auto largest_with = [&](auto&& keep) {
    std::size_t best = sites.size();
    for (std::size_t k = 0; k < sites.size(); ++k) {
      if (!keep(k)) continue;
      if (best == sites.size() || sites[k].n() > sites[best].n()) best = k;
    }
    return best;
  };
  switch (spec.rule.kind) {
    case Kind::largest: {
      const std::size_t k = largest_with([](std::size_t) { return true; });
      out.push_back({k, formula_for_site(spec, k)});
      break;
    }
    case Kind::all:
      for (std::size_t k = 0; k < sites.size(); ++k) out.push_back({k, formula_for_site(spec, k)});
      break;
    case Kind::explicit_list:
      out = spec.rule.explicit_list;
      for (const auto& c : out)
        if (c.site_index >= sites.size())
          throw DimensionMismatch("candidate rule: site index out of range");
      break;
    case Kind::two_largest_one_per_mechanism: {
      const std::size_t even = largest_with([](std::size_t k) { return k % 2 == 0; });
      const std::size_t odd = largest_with([](std::size_t k) { return k % 2 == 1; });
      if (even == sites.size() || odd == sites.size())
        throw DimensionMismatch("candidate rule: need at least one site of each parity");
      out.push_back({even, spec.rule.even_formula});
      out.push_back({odd, spec.rule.odd_formula});
      break;
    }
  }
  return out;
}

// The running transcript plus helpers that serialize-then-record; the
// coordinator only ever consumes what these recorded.
struct Mailbox {
  Transcript transcript;

  void send_up(int round, const std::string& site, PayloadType type, const json& payload) {
    transcript.messages.push_back({round, true, site, "coord", type, payload.dump()});
    transcript.total_rounds = std::max(transcript.total_rounds, round);
  }
  void send_down(int round, const std::string& site, PayloadType type, const json& payload) {
    transcript.messages.push_back({round, false, "coord", site, type, payload.dump()});
    transcript.total_rounds = std::max(transcript.total_rounds, round);
  }
  // Parsed site->coord payloads of one round+type, in recorded (site) order.
  std::vector<json> uplinks(int round, PayloadType type) const {
    std::vector<json> out;
    for (const auto& m : transcript.messages)
      if (m.round == round && m.site_to_coord && m.type == type) out.push_back(m.parsed());
    return out;
  }
};

}  // namespace detail

// --------------------------------------------------------------------------
// The protocol itself.

inline ProtocolResult run_protocol(const std::vector<SiteDataset>& sites,
                                   const ProtocolSpec& spec) {
  if (sites.empty()) throw DimensionMismatch("run_protocol: no sites");
  for (const auto& s : sites) s.validate();
  const std::size_t K = sites.size();
  const auto& model = spec.model;
  const bool suff = spec.choice.transport == Transport::sufficient_info;
  if (suff && model.family != Family::linear)
    throw Error("sufficient-statistics transport fits the linear family");
  if (!suff && model.family != Family::logistic)
    throw NonDiscreteData("count transport serves the logistic family; the linear family "
                          "travels as sufficient statistics");
  const bool overridden = spec.weight_override.has_value();
  if (overridden && spec.choice.estimator == Estimator::ipw_calibrated)
    throw Error("weight override applies to cc/ipw_site only");
  if (overridden && spec.weight_override->size() != K)
    throw DimensionMismatch("weight override must cover every site");

  // ---- Site-local weight preparation (no communication).
  std::vector<WeightVector> pis(K);
  std::vector<Vector> row_w(K);
  CandidateSet candidates;                       // network candidate order
  std::vector<std::vector<std::size_t>> own(K);  // candidate indices per site
  std::vector<Vector> taus(K);
  VarianceRegime regime = VarianceRegime::cc;

  detail::Mailbox mail;
  int round = 0;

  switch (spec.choice.estimator) {
    case Estimator::cc: {
      for (std::size_t k = 0; k < K; ++k)
        pis[k] = {"unit", Vector::Ones(static_cast<Eigen::Index>(sites[k].n()))};
      regime = VarianceRegime::cc;
      break;
    }
    case Estimator::ipw_site: {
      if (overridden) {
        for (std::size_t k = 0; k < K; ++k)
          pis[k] = {spec.weight_override_label, (*spec.weight_override)[k]};
        regime = VarianceRegime::cc;  // no estimated selection model to stack
      } else {
        if (spec.formulas.empty())
          throw DimensionMismatch("ipw_site needs a weighting formula (or an override)");
        for (std::size_t k = 0; k < K; ++k) {
          const auto formula = detail::formula_for_site(spec, k);
          formula.check_against_target(spec.target);
          const Vector alpha = fit_nuisance(sites[k], formula, spec.target);
          candidates.push_back({sites[k].site_id, formula, alpha});
          own[k] = {k};
        }
        for (std::size_t k = 0; k < K; ++k)
          pis[k] = {"fitted", predict_pi(sites[k], candidates[k])};
        // Foreign coefficients are never shared under site_specific: blocks
        // reference foreign candidates only through the public dims ledger.
        regime = VarianceRegime::site_specific;
      }
      break;
    }
    case Estimator::ipw_calibrated: {
      if (spec.formulas.empty() && spec.rule.kind != CandidateRule::Kind::explicit_list &&
          spec.rule.kind != CandidateRule::Kind::two_largest_one_per_mechanism)
        throw DimensionMismatch("ipw_calibrated needs weighting formulas");
      const auto selected = detail::resolve_candidates(sites, spec);
      // Round 1: contributing sites fit and transmit their models.
      round = 1;
      for (const auto& cs : selected) {
        cs.formula.check_against_target(spec.target);
        const Vector alpha = fit_nuisance(sites[cs.site_index], cs.formula, spec.target);
        CandidateModel m{sites[cs.site_index].site_id, cs.formula, alpha};
        mail.send_up(1, m.origin_site, PayloadType::candidate_model,
                     wire::encode(CandidateSet{m}));
      }
      // The network candidate set, in wire order, reconstructed from bytes.
      for (const auto& j : mail.uplinks(1, PayloadType::candidate_model))
        for (auto& m : wire::decode_candidates(j)) candidates.push_back(std::move(m));
      // Round 2 (downlink half): broadcast the full set to every site. The
      // statistics uplink shares this round, so the "completed rounds" cursor
      // stays at 1.
      round = 1;
      const json bcast = wire::encode(candidates);
      for (std::size_t k = 0; k < K; ++k)
        mail.send_down(2, sites[k].site_id, PayloadType::candidate_model, bcast);
      for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t c = 0; c < candidates.size(); ++c)
          if (candidates[c].origin_site == sites[k].site_id) own[k].push_back(c);
        auto cal = calibrate(sites[k], candidates, spec.target, spec.variant);
        taus[k] = cal.tau;
        pis[k] = {"calibrated", std::move(cal.pi)};
      }
      regime = VarianceRegime::calibrated;
      break;
    }
  }
  for (std::size_t k = 0; k < K; ++k)
    row_w[k] = ipw_row_weights(sites[k], spec.target, pis[k].pi);

  FitResult fit;
  fit.family = model.family;
  fit.estimator = spec.choice.estimator;
  fit.transport = spec.choice.transport;
  for (const auto& s : sites) fit.n_total += s.n();

  Vector beta;
  double sigma = std::numeric_limits<double>::quiet_NaN();
  StackedVariance stacked;
  Matrix cov_naive;

  if (suff) {
    // ---- Statistics round.
    const int stats_round = round + 1;
    for (std::size_t k = 0; k < K; ++k) {
      const auto s = site_suffstats(sites[k], model, spec.target, row_w[k]);
      mail.send_up(stats_round, sites[k].site_id, PayloadType::suff_stats,
                   wire::encode(s, sites[k].n()));
    }
    std::vector<SuffStats> stats;
    for (const auto& j : mail.uplinks(stats_round, PayloadType::suff_stats))
      stats.push_back(wire::decode_suffstats(j));
    beta = combine_linear(stats);
    for (const auto& s : stats) fit.n_complete += s.n_complete;

    // ---- Sigma round: beta down, weighted RSS up.
    const int sigma_rnd = stats_round + 1;
    const json beta_msg = wire::encode_theta(beta, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t k = 0; k < K; ++k) {
      mail.send_down(sigma_rnd, sites[k].site_id, PayloadType::theta_broadcast, beta_msg);
      // Site recomputes from the broadcast bytes, not from shared memory.
      const Vector beta_k = wire::decode_vector(json::parse(beta_msg.dump()).at("beta"));
      const auto r = site_rss(sites[k], model, spec.target, row_w[k], beta_k);
      mail.send_up(sigma_rnd, sites[k].site_id, PayloadType::rss_report, wire::encode(r));
    }
    std::vector<RssReport> reports;
    for (const auto& j : mail.uplinks(sigma_rnd, PayloadType::rss_report))
      reports.push_back(wire::decode_rss(j));
    sigma = sigma_round(reports, model.theta_dim());

    // ---- Variance round: full theta down, blocks up.
    const int var_round = sigma_rnd + 1;
    const json theta_msg = wire::encode_theta(beta, sigma);
    std::vector<VarianceBlocks> blocks;
    for (std::size_t k = 0; k < K; ++k) {
      mail.send_down(var_round, sites[k].site_id, PayloadType::theta_broadcast, theta_msg);
      const json parsed = json::parse(theta_msg.dump());
      SiteVarianceInputs in;
      in.model = model;
      in.target = spec.target;
      in.beta = wire::decode_vector(parsed.at("beta"));
      in.sigma = parsed.at("sigma").get<double>();
      in.pi = pis[k].pi;
      in.regime = regime;
      in.candidates = candidates;
      if (regime == VarianceRegime::site_specific) {
        // Only the site's own model travels with real coefficients.
        CandidateSet masked = candidates;
        for (std::size_t c = 0; c < masked.size(); ++c)
          if (c != k) masked[c].alpha.setZero();
        in.candidates = std::move(masked);
      }
      in.own = own[k];
      in.tau = taus[k];
      mail.send_up(var_round, sites[k].site_id, PayloadType::variance_blocks,
                   wire::encode(site_variance_blocks(sites[k], in)));
    }
    for (const auto& j : mail.uplinks(var_round, PayloadType::variance_blocks))
      blocks.push_back(wire::decode_blocks(j));
    stacked = assemble_stacked(blocks);
    cov_naive = naive_variance(blocks);
  } else {
    // ---- Counts round.
    const int counts_round = round + 1;
    for (std::size_t k = 0; k < K; ++k) {
      const auto c = site_counts(sites[k], model, spec.target, row_w[k], spec.policy.T,
                                 spec.policy.action);
      mail.send_up(counts_round, sites[k].site_id, PayloadType::count_rows,
                   wire::encode(c, count_field_names(model), sites[k].n()));
    }
    std::vector<CountReport> reports;
    for (const auto& j : mail.uplinks(counts_round, PayloadType::count_rows))
      reports.push_back(wire::decode_counts(j));
    beta = combine_glm(reports, model);
    for (const auto& rep : reports) {
      fit.suppressed_cells += rep.suppressed_cells;
      fit.suppressed_n_raw += rep.suppressed_n_raw;
      for (const auto& row : rep.rows) fit.n_complete += static_cast<std::size_t>(row.n_raw);
      fit.n_complete += static_cast<std::size_t>(rep.suppressed_n_raw);
    }

    if (spec.choice.estimator == Estimator::cc) {
      // One-shot: theta and variance both live in the counts round.
      const auto bm = glm_counts_bread_meat(reports, model, beta);
      stacked.regime = VarianceRegime::cc;
      stacked.theta_dim = model.theta_dim();
      stacked.a = bm.a;
      stacked.b = bm.b;
      stacked.cov_xi = sandwich(bm.a, bm.b);
      stacked.cov_theta = stacked.cov_xi;
      cov_naive = stacked.cov_theta;
    } else {
      // ---- Theta broadcast round (downlink only), then blocks.
      const int theta_rnd = counts_round + 1;
      const json theta_msg = wire::encode_theta(beta, std::numeric_limits<double>::quiet_NaN());
      for (std::size_t k = 0; k < K; ++k)
        mail.send_down(theta_rnd, sites[k].site_id, PayloadType::theta_broadcast, theta_msg);

      const int var_round = theta_rnd + 1;
      std::vector<VarianceBlocks> blocks;
      for (std::size_t k = 0; k < K; ++k) {
        SiteVarianceInputs in;
        in.model = model;
        in.target = spec.target;
        in.beta = wire::decode_vector(json::parse(theta_msg.dump()).at("beta"));
        in.pi = pis[k].pi;
        in.regime = regime;
        in.candidates = candidates;
        if (regime == VarianceRegime::site_specific) {
          CandidateSet masked = candidates;
          for (std::size_t c = 0; c < masked.size(); ++c)
            if (c != k) masked[c].alpha.setZero();
          in.candidates = std::move(masked);
        }
        in.own = own[k];
        in.tau = taus[k];
        mail.send_up(var_round, sites[k].site_id, PayloadType::variance_blocks,
                     wire::encode(site_variance_blocks(sites[k], in)));
      }
      for (const auto& j : mail.uplinks(var_round, PayloadType::variance_blocks))
        blocks.push_back(wire::decode_blocks(j));
      stacked = assemble_stacked(blocks);
      cov_naive = naive_variance(blocks);
    }
  }

  // ---- Header and result.
  std::string weight_source = "unit";
  if (spec.choice.estimator == Estimator::ipw_site)
    weight_source = overridden ? spec.weight_override_label : "fitted";
  else if (spec.choice.estimator == Estimator::ipw_calibrated)
    weight_source = "calibrated";
  json header{{"protocol_version", 1},
              {"estimator", to_string(spec.choice.estimator)},
              {"transport", to_string(spec.choice.transport)},
              {"model", json{{"family", to_string(model.family)}, {"z_use", model.z_use}}},
              {"target", to_string(spec.target)},
              {"policy", json{{"T", spec.policy.T}, {"action", to_string(spec.policy.action)}}},
              {"calibration_variant", to_string(spec.variant)},
              {"weight_source", weight_source},
              {"sites", [&] {
                 json a = json::array();
                 for (const auto& s : sites) a.push_back(s.site_id);
                 return a;
               }()}};
  mail.transcript.header = header.dump();

  fit.theta = beta;
  fit.sigma = sigma;
  fit.cov_robust = stacked.cov_theta;
  fit.cov_naive = cov_naive;
  fit.rounds_used = static_cast<std::size_t>(mail.transcript.total_rounds);

  ProtocolResult out;
  out.fit = std::move(fit);
  out.stacked = std::move(stacked);
  out.cov_naive = std::move(cov_naive);
  out.candidates = std::move(candidates);
  out.transcript = std::move(mail.transcript);
  return out;
}

// --------------------------------------------------------------------------
// Replay: recompute the coordinator's outputs from transcript bytes alone.

struct ReplayOutcome {
  Vector theta;
  double sigma = std::numeric_limits<double>::quiet_NaN();
  StackedVariance stacked;
  Matrix cov_naive;
};

inline ReplayOutcome replay(const Transcript& t) {
  const json header = [&] {
    try {
      return t.parsed_header();
    } catch (const json::exception& e) {
      throw CorruptTranscript(std::string("header: ") + e.what());
    }
  }();
  ReplayOutcome out;
  try {
    const auto estimator = estimator_from_string(header.at("estimator").get<std::string>());
    const auto transport = transport_from_string(header.at("transport").get<std::string>());
    ModelSpec model;
    model.family = family_from_string(header.at("model").at("family").get<std::string>());
    model.z_use = header.at("model").at("z_use").get<std::size_t>();

    auto uplinks = [&](PayloadType type) {
      std::vector<json> v;
      for (const auto& m : t.messages)
        if (m.site_to_coord && m.type == type) v.push_back(m.parsed());
      return v;
    };

    if (transport == Transport::sufficient_info) {
      std::vector<SuffStats> stats;
      for (const auto& j : uplinks(PayloadType::suff_stats))
        stats.push_back(wire::decode_suffstats(j));
      if (stats.empty()) throw CorruptTranscript("no sufficient-statistics payloads");
      out.theta = combine_linear(stats);
      std::vector<RssReport> reports;
      for (const auto& j : uplinks(PayloadType::rss_report)) reports.push_back(wire::decode_rss(j));
      if (reports.empty()) throw CorruptTranscript("no RSS payloads");
      out.sigma = sigma_round(reports, model.theta_dim());
      std::vector<VarianceBlocks> blocks;
      for (const auto& j : uplinks(PayloadType::variance_blocks))
        blocks.push_back(wire::decode_blocks(j));
      if (blocks.empty()) throw CorruptTranscript("no variance payloads");
      out.stacked = assemble_stacked(blocks);
      out.cov_naive = naive_variance(blocks);
    } else {
      std::vector<CountReport> reports;
      for (const auto& j : uplinks(PayloadType::count_rows))
        reports.push_back(wire::decode_counts(j));
      if (reports.empty()) throw CorruptTranscript("no count payloads");
      out.theta = combine_glm(reports, model);
      if (estimator == Estimator::cc) {
        const auto bm = glm_counts_bread_meat(reports, model, out.theta);
        out.stacked.regime = VarianceRegime::cc;
        out.stacked.theta_dim = model.theta_dim();
        out.stacked.a = bm.a;
        out.stacked.b = bm.b;
        out.stacked.cov_xi = sandwich(bm.a, bm.b);
        out.stacked.cov_theta = out.stacked.cov_xi;
        out.cov_naive = out.stacked.cov_theta;
      } else {
        std::vector<VarianceBlocks> blocks;
        for (const auto& j : uplinks(PayloadType::variance_blocks))
          blocks.push_back(wire::decode_blocks(j));
        if (blocks.empty()) throw CorruptTranscript("no variance payloads");
        out.stacked = assemble_stacked(blocks);
        out.cov_naive = naive_variance(blocks);
      }
    }
  } catch (const json::exception& e) {
    throw CorruptTranscript(e.what());
  }
  return out;
}

// --------------------------------------------------------------------------
// Privacy audit.

struct RoundSummary {
  int round = 0;
  std::vector<std::string> payload_types;  // distinct, in first-seen order
  long min_n_raw = -1;                     // finest count granularity (-1: no counts)
};

struct AuditReport {
  bool pass = true;
  long threshold = 1;
  std::vector<std::string> violations;
  std::vector<RoundSummary> rounds;
};

namespace detail {

inline const std::set<std::string>& allowed_keys(PayloadType t) {
  static const std::set<std::string> suff{"site", "p", "n_complete", "n_total", "sum_w",
                                          "xtwx", "xtwy"};
  static const std::set<std::string> rss{"site", "rss", "n_complete"};
  static const std::set<std::string> counts{"site",            "fields",
                                            "rows",            "suppressed_cells",
                                            "suppressed_n_raw", "n_total"};
  static const std::set<std::string> cand{"models"};
  static const std::set<std::string> theta{"beta", "sigma"};
  static const std::set<std::string> blocks{"site",     "regime",   "theta_dim", "alpha_dims",
                                            "a_tt",     "b_tt",     "own_index", "a_ta_own",
                                            "a_aa_own", "b_ta_own", "b_aa_own",  "a_full",
                                            "b_full"};
  switch (t) {
    case PayloadType::suff_stats: return suff;
    case PayloadType::rss_report: return rss;
    case PayloadType::count_rows: return counts;
    case PayloadType::candidate_model: return cand;
    case PayloadType::theta_broadcast: return theta;
    default: return blocks;
  }
}

}  // namespace detail

// Walks a transcript and checks the governance rules: every payload sticks to
// its schema (aggregates only — an unknown field is flagged), and every
// transmitted count cell meets the raw-size threshold. T defaults to the
// policy the transcript was recorded under.
inline AuditReport privacy_audit(const Transcript& t, long T = -1) {
  AuditReport report;
  if (T < 0) {
    try {
      T = t.parsed_header().at("policy").at("T").get<long>();
    } catch (...) {
      T = 1;
    }
  }
  report.threshold = T;
  std::map<int, RoundSummary> rounds;
  for (std::size_t i = 0; i < t.messages.size(); ++i) {
    const auto& m = t.messages[i];
    auto& summary = rounds[m.round];
    summary.round = m.round;
    const std::string type_name = to_string(m.type);
    if (std::find(summary.payload_types.begin(), summary.payload_types.end(), type_name) ==
        summary.payload_types.end())
      summary.payload_types.push_back(type_name);
    json payload;
    try {
      payload = m.parsed();
    } catch (const json::exception& e) {
      report.violations.push_back("message " + std::to_string(i) + ": unparseable payload (" +
                                  e.what() + ")");
      continue;
    }
    const auto& allowed = detail::allowed_keys(m.type);
    for (const auto& [key, value] : payload.items())
      if (!allowed.count(key))
        report.violations.push_back("message " + std::to_string(i) + " (" + type_name +
                                    "): unexpected field '" + key + "'");
    if (m.type == PayloadType::count_rows && payload.contains("rows")) {
      for (const auto& row : payload["rows"]) {
        const long n_raw = row.value("n_raw", 0L);
        if (summary.min_n_raw < 0 || n_raw < summary.min_n_raw) summary.min_n_raw = n_raw;
        if (n_raw < T)
          report.violations.push_back("message " + std::to_string(i) + " (" +
                                      payload.value("site", std::string("?")) + "): count cell with n_raw=" +
                                      std::to_string(n_raw) + " below threshold " + std::to_string(T));
      }
    }
  }
  for (auto& [idx, summary] : rounds) report.rounds.push_back(std::move(summary));
  report.pass = report.violations.empty();
  return report;
}

}  // namespace fedmiss
