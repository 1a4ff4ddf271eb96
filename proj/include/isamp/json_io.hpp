#pragma once

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <string>

#include <json.hpp>

#include "isamp/errors.hpp"
#include "isamp/weight_model.hpp"

namespace isamp {

/// Decimal string with 17 significant digits: round-trips any finite double.
inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse17(const std::string& s) { return std::strtod(s.c_str(), nullptr); }

namespace detail {

inline nlohmann::ordered_json vec17(const Eigen::VectorXd& v) {
  nlohmann::ordered_json a = nlohmann::ordered_json::array();
  for (long i = 0; i < v.size(); ++i) a.push_back(fmt17(v[i]));
  return a;
}

inline Eigen::VectorXd vec_from(const nlohmann::json& a) {
  Eigen::VectorXd v(a.size());
  for (size_t i = 0; i < a.size(); ++i) v[i] = parse17(a[i].get<std::string>());
  return v;
}

inline nlohmann::ordered_json diag_json(const FitDiagnostics& d) {
  nlohmann::ordered_json j;
  j["iterations"] = d.iterations;
  j["converged"] = d.converged;
  j["gradient_norm"] = fmt17(d.gradient_norm);
  j["boundary_hit"] = d.boundary_hit;
  j["restarts"] = d.restarts;
  nlohmann::ordered_json tr = nlohmann::ordered_json::array();
  for (double v : d.loglik_trace) tr.push_back(fmt17(v));
  j["loglik_trace"] = tr;
  return j;
}

}  // namespace detail

inline nlohmann::ordered_json weight_model_to_json(const BetaWeightModel& m,
                                                   const FitDiagnostics* diag = nullptr) {
  nlohmann::ordered_json j;
  j["version"] = 1;
  j["type"] = "single";
  j["use_x"] = m.use_x;
  j["use_y"] = m.use_y;
  j["beta"] = detail::vec17(m.beta);
  j["phi"] = fmt17(m.phi);
  if (diag) j["diagnostics"] = detail::diag_json(*diag);
  return j;
}

inline nlohmann::ordered_json weight_model_to_json(const MixtureWeightModel& m,
                                                   const FitDiagnostics* diag = nullptr) {
  nlohmann::ordered_json j;
  j["version"] = 1;
  j["type"] = "mixture";
  j["H"] = m.H;
  j["mix_use_x"] = m.mix_use_x;
  j["mix_use_y"] = m.mix_use_y;
  nlohmann::ordered_json alpha = nlohmann::ordered_json::array();
  for (int g = 0; g < m.H; ++g)
    alpha.push_back(detail::vec17(m.alpha.row(g).transpose()));
  j["alpha"] = alpha;
  nlohmann::ordered_json comps = nlohmann::ordered_json::array();
  for (const BetaWeightModel& c : m.components) {
    nlohmann::ordered_json cj;
    cj["use_x"] = c.use_x;
    cj["use_y"] = c.use_y;
    cj["beta"] = detail::vec17(c.beta);
    cj["phi"] = fmt17(c.phi);
    if (!c.use_x && !c.use_y) cj["m"] = fmt17(logistic(c.beta[0]));
    comps.push_back(cj);
  }
  j["components"] = comps;
  if (diag) j["diagnostics"] = detail::diag_json(*diag);
  return j;
}

/// Parses either weight-model document back into a polymorphic law.
inline std::unique_ptr<WeightLaw> weight_model_from_json(const nlohmann::json& j) {
  if (!j.contains("version") || j["version"].get<int>() != 1)
    throw Error("weight model document: unsupported version");
  const std::string type = j["type"].get<std::string>();
  if (type == "single") {
    auto m = std::make_unique<BetaWeightModel>();
    m->use_x = j["use_x"].get<bool>();
    m->use_y = j["use_y"].get<bool>();
    m->beta = detail::vec_from(j["beta"]);
    m->phi = parse17(j["phi"].get<std::string>());
    return m;
  }
  if (type == "mixture") {
    auto m = std::make_unique<MixtureWeightModel>();
    m->H = j["H"].get<int>();
    m->mix_use_x = j["mix_use_x"].get<bool>();
    m->mix_use_y = j["mix_use_y"].get<bool>();
    const auto& alpha = j["alpha"];
    for (int g = 0; g < m->H; ++g) {
      const Eigen::VectorXd row = detail::vec_from(alpha[g]);
      if (g == 0) m->alpha.setZero(m->H, row.size());
      m->alpha.row(g) = row.transpose();
    }
    for (const auto& cj : j["components"]) {
      BetaWeightModel c;
      c.use_x = cj["use_x"].get<bool>();
      c.use_y = cj["use_y"].get<bool>();
      c.beta = detail::vec_from(cj["beta"]);
      c.phi = parse17(cj["phi"].get<std::string>());
      m->components.push_back(std::move(c));
    }
    return m;
  }
  throw Error("weight model document: unknown type '" + type + "'");
}

inline void write_json_file(const std::string& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << j.dump(2) << "\n";
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path);
  return nlohmann::json::parse(in);
}

}  // namespace isamp
