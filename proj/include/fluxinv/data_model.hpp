#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fluxinv/decomposition.hpp"
#include "fluxinv/sif_link.hpp"
#include "fluxinv/transport.hpp"
#include "fluxinv/util.hpp"

namespace fluxinv {

/// Group ids recognised by the pipeline, in canonical (sorted) order.
inline const std::vector<std::string>& known_groups() {
  static const std::vector<std::string> g{"aircraft", "oco2-sif", "oco2-xco2", "shipboard", "surface", "tower"};
  return g;
}
/// Satellite groups carry a free correlated share; the in-situ groups have rho = 1.
inline bool is_satellite_group(const std::string& group) { return group.rfind("oco2", 0) == 0; }

struct ErrorParams {
  double gamma = 1.0;   ///< budget scaling, > 0
  double rho = 1.0;     ///< correlated share in [0, 1]
  double length = 0.0;  ///< e-folding time in days, >= 0
  bool rho_fixed = false;

  void validate() const;
};
/// In-situ groups: rho = 1 fixed. Satellite groups: rho free.
ErrorParams default_error_params(const std::string& group, double length);

/// b = A pi; an empty design means zero bias.
struct BiasModel {
  Eigen::MatrixXd design;  ///< N x P
  Eigen::VectorXd coefficients;
  double prior_variance = 1.0;

  bool enabled() const { return design.cols() > 0; }
  Eigen::VectorXd bias(Eigen::Index n) const;
};

/// Observations of one group with their baselines, budgets and response rows.
struct ObservationGroup {
  std::string id;
  Eigen::VectorXd values;
  Eigen::VectorXd baseline;  ///< Z^0
  Eigen::VectorXd budgets;   ///< V > 0
  std::vector<std::string> series;
  std::vector<double> times;
  std::vector<std::string> obs_ids;
  std::vector<std::size_t> cells;
  BiasModel bias;
  Eigen::MatrixXd response;  ///< N x full alpha

  std::size_t size() const { return static_cast<std::size_t>(values.size()); }
  /// Throws DomainError on inconsistent lengths or non-positive budgets.
  void validate() const;
};

/// Split records by group (sorted by group id, input order within a group).
/// Rows of `response` and `baseline` align with `records`.
std::vector<ObservationGroup> build_groups(std::span<const ObservationRecord> records,
                                           const Eigen::MatrixXd& response, const Eigen::VectorXd& baseline);

/// Rows for SIF observations: the sensitivity vector in the gpp block and the
/// bottom-up prediction as baseline. Invalid cell-months give zero rows and a
/// zero baseline with valid[i] = false.
struct SifResponse {
  Eigen::MatrixXd rows;
  Eigen::VectorXd baseline;
  std::vector<bool> valid;
};
SifResponse sif_response(const SifLinkModel& model, const FluxBasisSet& basis,
                         std::span<const ObservationRecord> records);

/// SIF budget recorded as its two parts.
struct SifErrorBudget {
  double observation = 0.0;
  double model_error = 0.0;
  double total() const { return observation + model_error; }
};

/// Block-diagonal error covariance of one group. Within a series,
/// Cov(i, j) = rho / gamma * sqrt(V_i V_j) exp(-|t_i - t_j| / l) + [i = j] (1 - rho) / gamma * V_i.
/// Series are split further wherever the correlation underflows to zero.
class ErrorCovariance {
 public:
  /// Throws NumericalError naming the series when a block is not positive definite.
  ErrorCovariance(const ObservationGroup& group, const ErrorParams& params);

  std::size_t size() const { return n_; }
  double gamma() const { return gamma_; }
  Eigen::MatrixXd dense() const;
  /// Sigma^-1 v.
  Eigen::VectorXd solve(const Eigen::VectorXd& v) const;
  /// r' C^-1 r with C = gamma * Sigma (the gamma-free form).
  double unscaled_quadratic(const Eigen::VectorXd& r) const;
  /// M' C^-1 M and M' C^-1 r for response assembly (gamma-free).
  Eigen::MatrixXd unscaled_gram(const Eigen::MatrixXd& m) const;
  Eigen::VectorXd unscaled_cross(const Eigen::MatrixXd& m, const Eigen::VectorXd& r) const;
  double log_det() const;
  /// log N(r; 0, Sigma) without the 2 pi constant.
  double log_likelihood(const Eigen::VectorXd& r) const;
  /// One draw from N(0, Sigma).
  Eigen::VectorXd sample(Rng& rng) const;
  std::size_t block_count() const { return blocks_.size(); }

 private:
  struct Block {
    std::vector<Eigen::Index> rows;
    Eigen::MatrixXd c;                 // gamma-free block C
    Eigen::LLT<Eigen::MatrixXd> chol;  // of C
  };
  std::size_t n_ = 0;
  double gamma_ = 1.0;
  std::vector<Block> blocks_;
};

/// Z = truth + xi + eps, one draw from the group's error covariance.
Eigen::VectorXd simulate_observations(const ObservationGroup& group, const Eigen::VectorXd& truth,
                                      const ErrorParams& params, Rng& rng);

/// r = Z - Z^0 - Psi alpha - A pi; alpha is the full vector.
Eigen::VectorXd group_residual(const ObservationGroup& group, const Eigen::VectorXd& alpha,
                               const Eigen::VectorXd& pi);

}  // namespace fluxinv
