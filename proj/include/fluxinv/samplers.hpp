#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <functional>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "fluxinv/data_model.hpp"
#include "fluxinv/prior.hpp"
#include "fluxinv/util.hpp"

namespace fluxinv {

// ---------------------------------------------------------------- truncated Gaussian

/// N(mean, precision^-1) restricted to d + Phi x >= 0.
/// Rows with Phi_i = 0 and d_i >= 0 are dropped; Phi_i = 0 with d_i < 0 is a DomainError.
class TruncatedGaussian {
 public:
  TruncatedGaussian(Eigen::VectorXd mean, Eigen::MatrixXd precision, Eigen::VectorXd d, Eigen::MatrixXd phi);
  /// Throws NumericalError when the precision is not positive definite.
  static TruncatedGaussian from_precision(const Eigen::MatrixXd& precision, const Eigen::VectorXd& linear,
                                          Eigen::VectorXd d, Eigen::MatrixXd phi);
  static TruncatedGaussian from_covariance(Eigen::VectorXd mean, const Eigen::MatrixXd& covariance,
                                           Eigen::VectorXd d, Eigen::MatrixXd phi);

  std::size_t dimension() const { return static_cast<std::size_t>(mean_.size()); }
  const Eigen::VectorXd& mean() const { return mean_; }
  const Eigen::MatrixXd& precision() const { return precision_; }
  const Eigen::LLT<Eigen::MatrixXd>& cholesky() const { return chol_; }
  const Eigen::VectorXd& d() const { return d_; }
  const Eigen::MatrixXd& phi() const { return phi_; }
  Eigen::VectorXd slack(const Eigen::VectorXd& x) const { return d_ + phi_ * x; }
  bool feasible(const Eigen::VectorXd& x, double tolerance = 0.0) const;

 private:
  void prune();
  Eigen::VectorXd mean_;
  Eigen::MatrixXd precision_;
  Eigen::LLT<Eigen::MatrixXd> chol_;
  Eigen::VectorXd d_;
  Eigen::MatrixXd phi_;
};

struct HmcConfig {
  double travel_time = std::numbers::pi / 2.0;
  int max_reflections = 1000;
};

struct HmcDiagnostics {
  int reflections = 0;
  bool aborted = false;
};

/// One exact HMC step with mass matrix equal to the precision, so that
/// x(t) = mu + (x0 - mu) cos t + v sin t with v ~ N(0, precision^-1). Wall hits
/// are solved in closed form and the velocity is reflected in the
/// precision-inverse metric. Exceeding the reflection cap returns x0 and sets
/// `aborted`. Throws DomainError when x0 is infeasible.
Eigen::VectorXd exact_hmc_step(const TruncatedGaussian& target, const Eigen::VectorXd& x0, Rng& rng,
                               const HmcConfig& config = {}, HmcDiagnostics* diagnostics = nullptr);

/// Strictly feasible point near `start` (Euclidean projection by Hildreth's
/// dual coordinate ascent onto d + Phi x >= margin). Returns `start` when it is
/// already strictly feasible. Throws ConfigError when no feasible point is found.
Eigen::VectorXd feasible_point(const Eigen::VectorXd& d, const Eigen::MatrixXd& phi, const Eigen::VectorXd& start,
                               double margin = 1e-6, int max_sweeps = 20000);

// ---------------------------------------------------------------- slice sampling

/// Stepping-out and shrinkage (univariate). Throws DomainError when the log
/// density is not finite at x0.
double slice_sample_step(const std::function<double(double)>& log_density, double x0, double width, Rng& rng,
                         int max_steps_out = 32);

/// Slice step on u = log x for a positive variable; the Jacobian is included.
double slice_sample_log_step(const std::function<double(double)>& log_density, double x0, double width, Rng& rng);

// ---------------------------------------------------------------- conjugate updates

/// Gamma(shape + n / 2, rate + q / 2) draw for a precision scaling.
/// Throws DomainError when q is not finite or negative.
double gamma_conditional_step(const GammaPrior& prior, std::size_t n, double quadratic, Rng& rng);

/// Per-group sufficient statistics under fixed (rho, l), restricted to the free
/// alpha columns. All quantities are gamma-free: the likelihood precision is gamma * C^-1.
struct GroupLikelihood {
  std::string id;
  ErrorCovariance covariance;
  Eigen::MatrixXd psi;       ///< N x free
  Eigen::VectorXd offset;    ///< Z - Z^0
  Eigen::MatrixXd gram;      ///< psi' C^-1 psi
  Eigen::VectorXd cross;     ///< psi' C^-1 offset
  Eigen::MatrixXd bias;      ///< A (N x P), empty when disabled
  Eigen::MatrixXd psi_c_bias;  ///< psi' C^-1 A
  Eigen::MatrixXd bias_gram;   ///< A' C^-1 A
  Eigen::VectorXd bias_cross;  ///< A' C^-1 offset

  std::size_t size() const { return static_cast<std::size_t>(offset.size()); }
  /// Residual offset - psi alpha - A pi.
  Eigen::VectorXd residual(const Eigen::VectorXd& alpha_free, const Eigen::VectorXd& pi) const;
};
GroupLikelihood make_group_likelihood(const ObservationGroup& group, const ErrorParams& params,
                                      std::span<const std::size_t> free);

/// Conditional of the free alpha given everything else:
/// Lambda = prior precision + sum_g gamma_g G_g, mean = Lambda^-1 sum_g gamma_g (c_g - B_g pi_g).
/// Groups are summed in the given order; pass them sorted by id for reproducibility.
TruncatedGaussian alpha_conditional(const Eigen::MatrixXd& prior_precision, std::span<const GroupLikelihood> groups,
                                    std::span<const double> gamma, std::span<const Eigen::VectorXd> pi,
                                    const Eigen::VectorXd& d, const Eigen::MatrixXd& phi);

/// Exact Gaussian draw of the bias coefficients given alpha and gamma.
Eigen::VectorXd bias_conditional_step(const GroupLikelihood& group, const Eigen::VectorXd& alpha_free, double gamma,
                                      double prior_variance, Rng& rng);

// ---------------------------------------------------------------- diagnostics

/// Effective sample size from Geyer's initial monotone sequence estimator.
double effective_sample_size(std::span<const double> chain);

// ---------------------------------------------------------------- Gibbs

/// Everything the Gibbs sampler conditions on.
struct InferenceModel {
  const AlphaPrior* prior = nullptr;
  Hyperpriors hyper;
  std::vector<ObservationGroup> groups;         ///< any order; processed sorted by id
  std::map<std::string, ErrorParams> errors;    ///< rho and l per group; gamma is the starting value
  ConstraintSet constraints;                    ///< full layout
};

struct GibbsConfig {
  int iterations = 1000;  ///< total, including warmup
  int warmup = 200;
  int thin = 1;
  std::uint64_t seed = 1;
  HmcConfig hmc;
  double slice_width_log = 1.0;   ///< precisions, on log scale
  double slice_width_unit = 0.5;  ///< correlations and decay factors
  bool sample_hyper = true;
  bool sample_gamma = true;
  AlphaCovarianceParams initial;
};

struct PosteriorSamples {
  std::vector<std::size_t> free_indices;
  std::size_t full_size = 0;
  std::vector<int> iterations;      ///< iteration index of each stored draw
  Eigen::MatrixXd alpha;            ///< draws x free
  std::vector<HyperParam> hyper_names;
  Eigen::MatrixXd hyper;            ///< draws x hyper_names
  std::vector<std::string> group_ids;
  Eigen::MatrixXd gamma;            ///< draws x groups
  std::vector<Eigen::MatrixXd> pi;  ///< per group, draws x P
  int hmc_aborts = 0;
  double mean_reflections = 0.0;
  double min_constraint_slack = 0.0;

  std::size_t draws() const { return static_cast<std::size_t>(alpha.rows()); }
  Eigen::VectorXd alpha_full(std::size_t draw) const;
  /// ESS per scalar parameter (hyperparameters, gamma) and the minimum over alpha.
  std::vector<std::pair<std::string, double>> ess() const;
};

/// Cycle: alpha by exact HMC; tau, rho, kappa by slice steps; gamma conjugate;
/// pi conjugate when a bias design is present. Throws ConfigError for
/// infeasible initialisation. Deterministic under the seed.
PosteriorSamples run_gibbs(const InferenceModel& model, const GibbsConfig& config);

/// Default budget with the given lengths.
inline GibbsConfig gibbs_budget(int iterations, int warmup) {
  GibbsConfig c;
  c.iterations = iterations;
  c.warmup = warmup;
  return c;
}

struct StageOneConfig {
  GibbsConfig gibbs = gibbs_budget(300, 100);
  BetaPrior rho_prior{};
  double length_rate_in_situ = 1.0;       ///< exponential prior rate on l, per day
  double length_rate_satellite = 1440.0;  ///< per day
  double slice_width_length = 1.0;        ///< log scale
  std::vector<std::string> groups;        ///< groups whose (rho, l) are estimated; empty = none
};

/// Short Gibbs run that also slice-samples rho (unless fixed) and l for the
/// listed groups; returns posterior means. Unlisted groups pass through.
std::map<std::string, ErrorParams> stage_one_estimate(const InferenceModel& model, const StageOneConfig& config);

/// Wide tables: iteration, then alpha_<full index> per free element, or one column per parameter.
std::string format_alpha_samples(const PosteriorSamples& s);
std::string format_parameter_samples(const PosteriorSamples& s);
/// Columns parameter,ess.
std::string format_diagnostics(const PosteriorSamples& s);

}  // namespace fluxinv
