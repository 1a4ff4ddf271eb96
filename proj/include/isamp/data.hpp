#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "isamp/errors.hpp"

namespace isamp {

/// One population or sample unit. Fields that the design does not observe
/// are left unset; `delta` marks sampled units.
struct UnitRecord {
  Eigen::VectorXd x;  // covariates; meaningful only when has_x
  bool has_x = false;
  std::optional<double> y;
  std::optional<double> w;  // design weight, w = 1/inclusion probability
  bool delta = false;
  std::optional<int> stratum;  // 1-based label when observed
};

enum class Setting { One, Two };
enum class Mechanism { Poisson, Stratified };

enum class TargetKind { EstimatingEquation, RegressionMean, OutcomeDensity };

struct StudyDesign {
  Setting setting = Setting::Two;
  bool n_known = false;
  std::optional<long> N;
  TargetKind target = TargetKind::OutcomeDensity;
  Mechanism mechanism = Mechanism::Poisson;
  int strata = 1;  // H for Stratified
  bool informative = true;
};

/// Column-oriented validated dataset. Missing y/w entries are NaN; rows
/// without covariates have has_x = 0.
class Dataset {
 public:
  long n_records = 0;
  long n_sampled = 0;
  int xdim = 0;
  Eigen::MatrixXd X;  // n_records x xdim
  std::vector<std::uint8_t> has_x;
  Eigen::VectorXd y;
  Eigen::VectorXd w;
  std::vector<std::uint8_t> delta;
  std::vector<int> stratum;  // -1 when absent

  double sum_dw = 0.0;  // sum of delta*w

  bool sampled(long i) const { return delta[i] != 0; }
};

namespace detail {

inline void append_violation(std::vector<Violation>* out, Violation::Code c,
                             long rec, std::string msg) {
  out->push_back(Violation{c, rec, std::move(msg)});
}

}  // namespace detail

/// Non-throwing validity scan; returns every violation found.
inline std::vector<Violation> check_dataset(const std::vector<UnitRecord>& records,
                                            const StudyDesign& design) {
  std::vector<Violation> v;
  if (records.empty()) {
    detail::append_violation(&v, Violation::Code::EmptyDataset, -1, "no records");
    return v;
  }
  if (design.setting == Setting::One && !design.n_known)
    detail::append_violation(&v, Violation::Code::BadDesign, -1,
                             "Setting 1 requires a known N");
  if (design.mechanism == Mechanism::Stratified && design.strata < 1)
    detail::append_violation(&v, Violation::Code::BadDesign, -1,
                             "stratified design needs H >= 1");

  long n = 0;
  int xdim = -1;
  for (long i = 0; i < static_cast<long>(records.size()); ++i) {
    const UnitRecord& r = records[i];
    if (r.has_x) {
      if (xdim < 0)
        xdim = static_cast<int>(r.x.size());
      else if (static_cast<int>(r.x.size()) != xdim)
        detail::append_violation(&v, Violation::Code::SettingMismatch, i,
                                 "inconsistent covariate dimension");
    }
    if (r.delta) {
      ++n;
      if (!r.y)
        detail::append_violation(&v, Violation::Code::MissingField, i,
                                 "sampled unit lacks y");
      if (!r.w)
        detail::append_violation(&v, Violation::Code::MissingField, i,
                                 "sampled unit lacks w");
      if (!r.has_x)
        detail::append_violation(&v, Violation::Code::SettingMismatch, i,
                                 "sampled unit lacks x");
    }
    if (r.w && !(*r.w > 1.0))
      detail::append_violation(&v, Violation::Code::WeightOutOfRange, i,
                               "w must exceed 1 (got " + std::to_string(*r.w) + ")");
    if (design.setting == Setting::One && !r.delta && !r.has_x)
      detail::append_violation(&v, Violation::Code::SettingMismatch, i,
                               "Setting 1 requires x on every unit");
    if (r.stratum && (*r.stratum < 1 || (design.mechanism == Mechanism::Stratified &&
                                         *r.stratum > design.strata)))
      detail::append_violation(&v, Violation::Code::BadStratum, i,
                               "stratum label outside 1..H");
  }
  if (design.n_known) {
    if (!design.N)
      detail::append_violation(&v, Violation::Code::BadDesign, -1,
                               "n_known set but N missing");
    else {
      if (*design.N < n)
        detail::append_violation(&v, Violation::Code::BadDesign, -1,
                                 "N smaller than the number of sampled units");
      if (*design.N < static_cast<long>(records.size()))
        detail::append_violation(&v, Violation::Code::BadDesign, -1,
                                 "N smaller than the record count");
      if (design.setting == Setting::One &&
          *design.N != static_cast<long>(records.size()))
        detail::append_violation(&v, Violation::Code::SettingMismatch, -1,
                                 "Setting 1 expects one record per population unit");
    }
  }
  return v;
}

/// Validates and repacks records into column form. Throws ValidationError
/// listing every violation. Validation is idempotent: a dataset rebuilt from
/// the returned columns passes unchanged.
inline Dataset validate_dataset(const std::vector<UnitRecord>& records,
                                const StudyDesign& design) {
  std::vector<Violation> v = check_dataset(records, design);
  if (!v.empty()) throw ValidationError(std::move(v));

  Dataset d;
  d.n_records = static_cast<long>(records.size());
  int xdim = 0;
  for (const UnitRecord& r : records)
    if (r.has_x) {
      xdim = static_cast<int>(r.x.size());
      break;
    }
  d.xdim = xdim;
  d.X.setZero(d.n_records, xdim);
  d.has_x.assign(d.n_records, 0);
  d.y.setConstant(d.n_records, std::numeric_limits<double>::quiet_NaN());
  d.w.setConstant(d.n_records, std::numeric_limits<double>::quiet_NaN());
  d.delta.assign(d.n_records, 0);
  d.stratum.assign(d.n_records, -1);
  for (long i = 0; i < d.n_records; ++i) {
    const UnitRecord& r = records[i];
    if (r.has_x) {
      d.X.row(i) = r.x.transpose();
      d.has_x[i] = 1;
    }
    if (r.y) d.y[i] = *r.y;
    if (r.w) d.w[i] = *r.w;
    if (r.delta) {
      d.delta[i] = 1;
      ++d.n_sampled;
      d.sum_dw += *r.w;
    }
    if (r.stratum) d.stratum[i] = *r.stratum;
  }
  return d;
}

/// Normalizing total for weighted means: N when the design knows it,
/// otherwise the estimated total sum(delta*w).
inline double effective_total(const Dataset& d, const StudyDesign& design,
                              bool use_known_N) {
  if (use_known_N) {
    if (!design.n_known || !design.N)
      throw DomainError("effective_total: N requested but unknown");
    return static_cast<double>(*design.N);
  }
  return d.sum_dw;
}

/// Horvitz-Thompson moment (1/D) sum_i delta_i w_i h(x_i, y_i) with D = N
/// (use_known_N) or D = sum delta w. `h` may return double or a vector.
template <typename H>
auto ht_moment(const H& h, const Dataset& d, const StudyDesign& design,
               bool use_known_N) {
  if (d.n_sampled == 0) throw EmptySample("ht_moment: no sampled units");
  const double D = effective_total(d, design, use_known_N);
  using R = decltype(h(d.X.row(0).transpose().eval(), 0.0));
  bool first = true;
  R acc{};
  for (long i = 0; i < d.n_records; ++i) {
    if (!d.delta[i]) continue;
    const Eigen::VectorXd xi = d.X.row(i).transpose();
    R term = h(xi, d.y[i]);
    if constexpr (std::is_same_v<R, double>) {
      acc += d.w[i] * term;
    } else {
      if (first) acc = (d.w[i] * term).eval();
      else acc += d.w[i] * term;
    }
    first = false;
  }
  if constexpr (std::is_same_v<R, double>) return acc / D;
  else return (acc / D).eval();
}

}  // namespace isamp
