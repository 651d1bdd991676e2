#pragma once

#include <Eigen/Core>
#include <array>
#include <span>
#include <string>
#include <vector>

#include "fluxinv/decomposition.hpp"
#include "fluxinv/util.hpp"

namespace fluxinv {

// ---------------------------------------------------------------- fixed terms

/// Which alpha elements are pinned to zero.
/// Always fixed: ocean linear and seasonal terms, bio terms in ocean regions,
/// ocean terms in land regions.
struct FixedTermPolicy {
  std::vector<int> small_land_regions;  ///< bio linear and seasonal fixed
  std::vector<int> rlt_fixed_regions;   ///< respiration linear terms always fixed
  bool infer_rlt = true;                ///< false fixes respiration linear terms everywhere
};
std::vector<bool> fixed_mask(const AlphaLayout& layout, const RegionPartition& regions, const FixedTermPolicy& policy);

// ---------------------------------------------------------------- reparameterization

/// alpha_0 = a * alpha*_0 + b * alpha*_1, alpha_1 = alpha*_1 on one linear pair.
struct PivotBlock {
  Component component;
  RegionId region;
  std::size_t intercept_index;  ///< full-layout index
  std::size_t trend_index;
  double a = 1.0;
  double b = 0.0;
};

/// alpha = P alpha*; identity outside the listed blocks.
class Reparameterization {
 public:
  Reparameterization() = default;
  Reparameterization(std::size_t dimension, double pivot, std::vector<PivotBlock> blocks);

  std::size_t dimension() const { return dimension_; }
  double pivot() const { return pivot_; }
  const std::vector<PivotBlock>& blocks() const { return blocks_; }
  Eigen::VectorXd apply(const Eigen::VectorXd& alpha_star) const;
  Eigen::VectorXd inverse(const Eigen::VectorXd& alpha) const;
  Eigen::MatrixXd matrix() const;
  /// log |det P|
  double log_abs_det() const;

 private:
  std::size_t dimension_ = 0;
  double pivot_ = 0.0;
  std::vector<PivotBlock> blocks_;
};

/// Pivot blocks for free bio linear pairs in land regions.
/// B^0 = 0 with B^1 != 0 is a DomainError naming the region; |B^0| below
/// 1e-12 |B^1 t_m| (or a vanishing pivot value) disables the block with a warning;
/// B^1 = 0 yields the identity.
Reparameterization build_reparameterization(const LinearAggregates& aggregates, double pivot,
                                            const AlphaLayout& layout, const RegionPartition& regions);

// ---------------------------------------------------------------- covariance

enum class HyperParam {
  TauBetaGpp,
  TauBetaResp,
  TauBetaOcean,
  TauEpsGpp,
  TauEpsResp,
  TauEpsOcean,
  RhoBeta,
  RhoEps,
  KappaBio,
  KappaOcean,
};
inline constexpr std::array<HyperParam, 10> kHyperParams{
    HyperParam::TauBetaGpp, HyperParam::TauBetaResp, HyperParam::TauBetaOcean, HyperParam::TauEpsGpp,
    HyperParam::TauEpsResp, HyperParam::TauEpsOcean, HyperParam::RhoBeta,      HyperParam::RhoEps,
    HyperParam::KappaBio,   HyperParam::KappaOcean};
std::string hyper_name(HyperParam p);
inline bool is_precision(HyperParam p) { return static_cast<int>(p) <= static_cast<int>(HyperParam::TauEpsOcean); }

/// Precisions are > 0; the gpp-resp correlations and decay factors lie in [0, 1].
/// Land-ocean correlations are structurally zero and have no field.
struct AlphaCovarianceParams {
  std::array<double, kComponentCount> tau_beta{1.0, 1.0, 1.0};
  std::array<double, kComponentCount> tau_eps{1.0, 1.0, 1.0};
  double rho_beta = 0.0;
  double rho_eps = 0.0;
  double kappa_bio = 0.0;
  double kappa_ocean = 0.0;

  double get(HyperParam p) const;
  void set(HyperParam p, double v);
  /// Throws DomainError when any value leaves its domain.
  void validate() const;
};

struct GammaPrior {
  double shape;
  double rate;
};
struct BetaPrior {
  double a = 1.0;
  double b = 1.0;
};

struct Hyperpriors {
  GammaPrior tau_beta{0.35428, 0.01534};
  GammaPrior tau_eps{0.35428, 0.01534};
  BetaPrior rho{};
  BetaPrior kappa{};
  GammaPrior gamma{1.62702, 2.17124};
  double sigma_pi2 = 1.0;

  void validate() const;
  /// Log prior density of one hyperparameter (up to a constant); -inf outside its domain.
  double log_density(HyperParam p, double v) const;
};

/// Independent draws for the listed parameters; the others keep their values in `base`.
AlphaCovarianceParams sample_hyperparameters_prior(const Hyperpriors& hyper, Rng& rng,
                                                   const AlphaCovarianceParams& base,
                                                   std::span<const HyperParam> which);

struct PriorSettings {
  double linear_variance = 1.0;
  double trend_variance = 10000.0;  ///< target-space variance of free bio trends in land regions
  double ocean_inflation = 10.0;    ///< multiplies the ocean residual block
  double jitter = 1e-10;            ///< relative diagonal jitter for borderline assemblies
};

/// Gaussian prior on the free alpha elements, with the block structure kept
/// so hyperparameter densities cost O(dimension).
class AlphaPrior {
 public:
  AlphaPrior(const AlphaLayout& layout, Reparameterization reparam, PriorSettings settings = {});

  const std::vector<std::size_t>& free_indices() const { return free_; }
  std::size_t free_size() const { return free_.size(); }
  const Reparameterization& reparameterization() const { return reparam_; }
  const PriorSettings& settings() const { return settings_; }

  /// Target-space covariance over the full layout (fixed rows included).
  Eigen::MatrixXd sigma_star(const AlphaCovarianceParams& p) const;
  /// P Sigma* P' over the full layout. Throws NumericalError when the minimum
  /// eigenvalue falls below -1e-8 * max diagonal.
  Eigen::MatrixXd sigma_alpha(const AlphaCovarianceParams& p) const;
  Eigen::MatrixXd sigma_alpha_free(const AlphaCovarianceParams& p) const;
  /// Inverse of sigma_alpha_free assembled from the block inverses.
  Eigen::MatrixXd precision_free(const AlphaCovarianceParams& p) const;
  /// log N(alpha_free; 0, Sigma_alpha) without the 2 pi constant.
  double log_density(const Eigen::VectorXd& alpha_free, const AlphaCovarianceParams& p) const;
  /// Hyperparameters that touch at least one free element.
  std::vector<HyperParam> active_parameters() const;

  Eigen::VectorXd expand(const Eigen::VectorXd& alpha_free) const;
  Eigen::VectorXd restrict(const Eigen::VectorXd& alpha_full) const;

  /// Independent covariance blocks tiling the layout.
  enum class BlockKind { Linear, Pivot, SeasonalPair, SeasonalSingle, ResidualBio, ResidualSingle };
  struct Block {
    BlockKind kind;
    std::vector<std::size_t> full;         ///< full-layout indices
    Component component = Component::Gpp;  ///< single-component blocks
    double a = 1.0, b = 0.0;              ///< pivot coefficients
    double v0 = 1.0, v1 = 1.0;            ///< target-space linear variances
  };
  const std::vector<Block>& blocks() const { return blocks_; }

  /// Sum over the blocks that depend on `which` only; differences in `which`
  /// match differences of the full log density.
  double log_density(const Eigen::VectorXd& alpha_free, const AlphaCovarianceParams& p, HyperParam which) const;

 private:
  Eigen::MatrixXd block_covariance(const Block& b, const AlphaCovarianceParams& p) const;  // alpha space
  bool touches(const Block& b, HyperParam which) const;
  double block_log_density(const Block& b, const Eigen::VectorXd& alpha_free, const AlphaCovarianceParams& p) const;

  std::size_t dimension_;
  std::vector<std::size_t> free_;
  std::vector<long long> free_of_;
  Reparameterization reparam_;
  PriorSettings settings_;
  std::vector<Block> blocks_;
};

// ---------------------------------------------------------------- constraints

enum class ConstraintKind { SignGpp, SignResp, DiurnalGpp, DiurnalResp };
std::string constraint_kind_name(ConstraintKind k);

struct ConstraintLabel {
  ConstraintKind kind;
  RegionId region;
  PeriodId period;
};

/// d + Phi alpha >= 0 over the full layout. Each row is divided by its
/// largest coefficient magnitude so slack tolerances are unit-free;
/// row_scale holds the divisor (original row = stored row * row_scale).
struct ConstraintSet {
  Eigen::VectorXd d;
  Eigen::MatrixXd phi;
  Eigen::VectorXd row_scale;
  std::vector<ConstraintLabel> labels;
  bool infeasible_mode = false;  ///< some d < 0: alpha = 0 violates a constraint

  std::size_t size() const { return static_cast<std::size_t>(d.size()); }
  /// Columns restricted to the free elements.
  Eigen::MatrixXd phi_free(std::span<const std::size_t> free) const;
  Eigen::VectorXd slack(const Eigen::VectorXd& alpha_full) const { return d + phi * alpha_full; }
};

struct ConstraintPolicy {
  bool sign = true;
  bool diurnal = true;
  double diurnal_floor = -1.0;
};

/// Rows ordered sign-gpp, sign-resp, diurnal-gpp, diurnal-resp; each block R*Q
/// region-major. A bottom-up sign violation logs a warning and sets infeasible_mode.
ConstraintSet build_constraints(const FluxBasisSet& basis, const AggregationMatrices& aggregation,
                                const ConstraintPolicy& policy = {});

/// Columns row,kind,region,period,offset,terms with terms "index:value;...".
std::string format_constraints(const ConstraintSet& set);

}  // namespace fluxinv
