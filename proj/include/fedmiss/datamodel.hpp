#pragma once

// Data layout and model declarations. A site's rows are (y, x, z1..zp) with
// y and/or x possibly missing; z is never missing. Which fields make a row
// "complete" is decided by the missingness target, never stored.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fedmiss/errors.hpp"
#include "fedmiss/numerics.hpp"

namespace fedmiss {

enum class MissingnessTarget { X, Y, YX };

inline std::string to_string(MissingnessTarget t) {
  switch (t) {
    case MissingnessTarget::X: return "x";
    case MissingnessTarget::Y: return "y";
    default: return "yx";
  }
}

inline MissingnessTarget target_from_string(const std::string& s) {
  if (s == "x") return MissingnessTarget::X;
  if (s == "y") return MissingnessTarget::Y;
  if (s == "yx") return MissingnessTarget::YX;
  throw ParseError("unknown missingness target '" + s + "'");
}

struct Observation {
  double y = 0.0;
  double x = 0.0;
  bool has_y = true;
  bool has_x = true;
  std::vector<double> z;
  // True selection probability, known only to a simulation (NaN otherwise).
  double oracle_pi = std::numeric_limits<double>::quiet_NaN();

  bool complete(MissingnessTarget t) const {
    switch (t) {
      case MissingnessTarget::X: return has_x;
      case MissingnessTarget::Y: return has_y;
      default: return has_x && has_y;
    }
  }
};

struct SiteDataset {
  std::string site_id;
  std::size_t z_dim = 0;
  std::vector<Observation> rows;

  std::size_t n() const { return rows.size(); }
  std::size_t complete_count(MissingnessTarget t) const {
    std::size_t c = 0;
    for (const auto& o : rows) c += o.complete(t) ? 1 : 0;
    return c;
  }
  void validate() const {
    for (const auto& o : rows)
      if (o.z.size() != z_dim) throw SchemaError(site_id + ": row with z length != z_dim");
  }
};

inline SiteDataset concat(const std::vector<SiteDataset>& sites, const std::string& id = "pooled") {
  SiteDataset out;
  out.site_id = id;
  out.z_dim = sites.empty() ? 0 : sites.front().z_dim;
  for (const auto& s : sites) {
    if (s.z_dim != out.z_dim) throw DimensionMismatch("concat: sites disagree on z_dim");
    out.rows.insert(out.rows.end(), s.rows.begin(), s.rows.end());
  }
  return out;
}

enum class Family { linear, logistic };

inline std::string to_string(Family f) { return f == Family::linear ? "linear" : "logistic"; }
inline Family family_from_string(const std::string& s) {
  if (s == "linear") return Family::linear;
  if (s == "logistic") return Family::logistic;
  throw ParseError("unknown family '" + s + "'");
}

// Outcome model: y ~ intercept + x + z1..z_use, named "main_effects". The
// design row length is theta_dim (sigma, when the family is linear, rides as
// an extra stacked slot at variance time, never here).
struct ModelSpec {
  Family family = Family::linear;
  std::size_t z_use = 0;

  std::size_t theta_dim() const { return 2 + z_use; }

  Vector design_row(const Observation& o) const {
    if (!o.has_x) throw DriverUnavailable("outcome design needs x on an incomplete row");
    if (o.z.size() < z_use) throw DriverUnavailable("outcome design needs more z than the row has");
    Vector v(static_cast<Eigen::Index>(theta_dim()));
    v[0] = 1.0;
    v[1] = o.x;
    for (std::size_t j = 0; j < z_use; ++j) v[2 + static_cast<Eigen::Index>(j)] = o.z[j];
    return v;
  }

  std::vector<std::string> coef_names() const {
    std::vector<std::string> names{"intercept", "x"};
    for (std::size_t j = 1; j <= z_use; ++j) names.push_back("z" + std::to_string(j));
    return names;
  }
};

enum class FormulaName { main_effects, pairwise_interactions, yz1_interaction };

inline std::string to_string(FormulaName f) {
  switch (f) {
    case FormulaName::main_effects: return "main_effects";
    case FormulaName::pairwise_interactions: return "pairwise_interactions";
    default: return "yz1_interaction";
  }
}

inline FormulaName formula_from_string(const std::string& s) {
  if (s == "main_effects") return FormulaName::main_effects;
  if (s == "pairwise_interactions") return FormulaName::pairwise_interactions;
  if (s == "yz1_interaction") return FormulaName::yz1_interaction;
  throw ParseError("unknown weighting formula '" + s + "'");
}

// Design for the probability-of-completeness model. Declared by name plus
// structural fields so it can be rebuilt at any site from the wire format.
// Legality: a field that can itself be missing may not drive the weights,
// because the model must be evaluable on every row.
struct WeightingFormula {
  FormulaName name = FormulaName::main_effects;
  bool includes_y = false;
  bool includes_x = false;
  std::size_t z_use = 0;

  void check_against_target(MissingnessTarget t) const {
    if (includes_x && (t == MissingnessTarget::X || t == MissingnessTarget::YX))
      throw SchemaError("weighting formula uses x but x can be missing");
    if (includes_y && (t == MissingnessTarget::Y || t == MissingnessTarget::YX))
      throw SchemaError("weighting formula uses y but y can be missing");
    if (name == FormulaName::yz1_interaction && (!includes_y || z_use < 1))
      throw SchemaError("yz1_interaction formula needs y and at least z1");
  }

  std::size_t alpha_dim() const {
    const std::size_t m = (includes_y ? 1 : 0) + (includes_x ? 1 : 0) + z_use;
    switch (name) {
      case FormulaName::main_effects: return 1 + m;
      case FormulaName::pairwise_interactions: return 1 + m + m * (m - 1) / 2;
      default: return 1 + m + 1;  // mains + y*z1
    }
  }

  Vector design_row(const Observation& o) const {
    if (includes_y && !o.has_y) throw DriverUnavailable("weighting formula needs y on a row without it");
    if (includes_x && !o.has_x) throw DriverUnavailable("weighting formula needs x on a row without it");
    if (o.z.size() < z_use) throw DriverUnavailable("weighting formula needs more z than the row has");
    std::vector<double> mains;
    if (includes_y) mains.push_back(o.y);
    if (includes_x) mains.push_back(o.x);
    for (std::size_t j = 0; j < z_use; ++j) mains.push_back(o.z[j]);
    std::vector<double> feats{1.0};
    feats.insert(feats.end(), mains.begin(), mains.end());
    if (name == FormulaName::pairwise_interactions) {
      for (std::size_t a = 0; a < mains.size(); ++a)
        for (std::size_t b = a + 1; b < mains.size(); ++b) feats.push_back(mains[a] * mains[b]);
    } else if (name == FormulaName::yz1_interaction) {
      if (!includes_y || z_use < 1)
        throw SchemaError("yz1_interaction formula needs y and at least z1");
      feats.push_back(o.y * o.z[0]);
    }
    return from_std(feats);
  }
};

enum class Estimator { cc, ipw_site, ipw_calibrated };
enum class Transport { sufficient_info, count_aggregation };

inline std::string to_string(Estimator e) {
  switch (e) {
    case Estimator::cc: return "cc";
    case Estimator::ipw_site: return "ipw_site";
    default: return "ipw_calibrated";
  }
}
inline Estimator estimator_from_string(const std::string& s) {
  if (s == "cc") return Estimator::cc;
  if (s == "ipw_site") return Estimator::ipw_site;
  if (s == "ipw_calibrated") return Estimator::ipw_calibrated;
  throw ParseError("unknown estimator '" + s + "'");
}
inline std::string to_string(Transport t) {
  return t == Transport::sufficient_info ? "sufficient_info" : "count_aggregation";
}
inline Transport transport_from_string(const std::string& s) {
  if (s == "sufficient_info" || s == "suffstats") return Transport::sufficient_info;
  if (s == "count_aggregation" || s == "counts") return Transport::count_aggregation;
  throw ParseError("unknown transport '" + s + "'");
}

struct EstimatorChoice {
  Estimator estimator = Estimator::cc;
  Transport transport = Transport::sufficient_info;
};

// ---------------------------------------------------------------------------
// CSV: header "y,x,z1,...,zp"; UTF-8; '.' decimal point; an empty cell means
// missing (allowed for y and x only).

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_cell(const std::string& tok, std::size_t lineno, const std::string& col) {
  const char* begin = tok.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || end != begin + tok.size() || !std::isfinite(v))
    throw ParseError("line " + std::to_string(lineno) + ", column " + col +
                     ": cannot parse '" + tok + "' as a number");
  return v;
}

inline std::string format_cell(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline SiteDataset load_site_csv(std::istream& in, const std::string& site_id) {
  std::string line;
  if (!std::getline(in, line)) throw SchemaError(site_id + ": empty file");
  auto header = detail::split_csv_line(line);
  if (header.size() < 2 || header[0] != "y" || header[1] != "x")
    throw SchemaError(site_id + ": header must start with y,x");
  for (std::size_t j = 2; j < header.size(); ++j) {
    if (header[j] != "z" + std::to_string(j - 1))
      throw SchemaError(site_id + ": header column " + std::to_string(j + 1) + " must be z" +
                        std::to_string(j - 1));
  }
  SiteDataset out;
  out.site_id = site_id;
  out.z_dim = header.size() - 2;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() && in.eof()) break;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw SchemaError(site_id + ": line " + std::to_string(lineno) + " has " +
                        std::to_string(cells.size()) + " cells, expected " +
                        std::to_string(header.size()));
    Observation o;
    if (cells[0].empty()) {
      o.has_y = false;
    } else {
      o.y = detail::parse_cell(cells[0], lineno, "y");
    }
    if (cells[1].empty()) {
      o.has_x = false;
    } else {
      o.x = detail::parse_cell(cells[1], lineno, "x");
    }
    o.z.resize(out.z_dim);
    for (std::size_t j = 0; j < out.z_dim; ++j) {
      if (cells[2 + j].empty())
        throw SchemaError(site_id + ": line " + std::to_string(lineno) + ": z" +
                          std::to_string(j + 1) + " may never be missing");
      o.z[j] = detail::parse_cell(cells[2 + j], lineno, "z" + std::to_string(j + 1));
    }
    out.rows.push_back(std::move(o));
  }
  return out;
}

inline SiteDataset load_site_csv(const std::string& path, const std::string& site_id = "") {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  std::string id = site_id;
  if (id.empty()) {
    const auto slash = path.find_last_of("/\\");
    id = slash == std::string::npos ? path : path.substr(slash + 1);
    const auto dot = id.find_last_of('.');
    if (dot != std::string::npos) id = id.substr(0, dot);
  }
  return load_site_csv(in, id);
}

inline void write_site_csv(std::ostream& out, const SiteDataset& data) {
  out << "y,x";
  for (std::size_t j = 1; j <= data.z_dim; ++j) out << ",z" << j;
  out << "\n";
  for (const auto& o : data.rows) {
    if (o.has_y) out << detail::format_cell(o.y);
    out << ",";
    if (o.has_x) out << detail::format_cell(o.x);
    for (std::size_t j = 0; j < data.z_dim; ++j) out << "," << detail::format_cell(o.z[j]);
    out << "\n";
  }
}

inline void write_site_csv(const std::string& path, const SiteDataset& data) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open '" + path + "' for writing");
  write_site_csv(out, data);
}

}  // namespace fedmiss
