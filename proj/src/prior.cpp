#include "fluxinv/prior.hpp"

#include <spdlog/spdlog.h>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>

namespace fluxinv {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

bool is_linear(Term t) { return t == Term::Intercept || t == Term::Trend; }

/// y' K^{-1} z for the AR(1) correlation K_ij = kappa^|i-j| (tridiagonal inverse).
double ar1_inner(const Eigen::VectorXd& y, const Eigen::VectorXd& z, double kappa) {
  const auto n = y.size();
  if (n == 0) return 0.0;
  const double k2 = kappa * kappa;
  double diag = 0.0, off = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double d = (i == 0 || i == n - 1) ? 1.0 : 1.0 + k2;
    diag += d * y(i) * z(i);
    if (i + 1 < n) off += y(i) * z(i + 1) + y(i + 1) * z(i);
  }
  if (n == 1) diag = y(0) * z(0);
  return (diag - kappa * off) / (1.0 - k2);
}

Eigen::MatrixXd ar1_matrix(int n, double kappa) {
  Eigen::MatrixXd k(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) k(i, j) = std::pow(kappa, std::abs(i - j));
  return k;
}

double gamma_log(const GammaPrior& g, double v) {
  if (!(v > 0.0) || !std::isfinite(v)) return kNegInf;
  return (g.shape - 1.0) * std::log(v) - g.rate * v;
}

double beta_log(const BetaPrior& b, double v) {
  if (!(v >= 0.0 && v <= 1.0)) return kNegInf;
  double out = 0.0;
  if (b.a != 1.0) out += (b.a - 1.0) * std::log(v);
  if (b.b != 1.0) out += (b.b - 1.0) * std::log1p(-v);
  return out;
}

double draw_gamma(const GammaPrior& g, Rng& rng) { return std::gamma_distribution<double>(g.shape, 1.0 / g.rate)(rng); }

double draw_beta(const BetaPrior& b, Rng& rng) {
  const double x = std::gamma_distribution<double>(b.a, 1.0)(rng);
  const double y = std::gamma_distribution<double>(b.b, 1.0)(rng);
  return x / (x + y);
}
}  // namespace

// ---------------------------------------------------------------- fixed terms

std::vector<bool> fixed_mask(const AlphaLayout& layout, const RegionPartition& regions, const FixedTermPolicy& policy) {
  std::vector<bool> mask(layout.size(), false);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto el = layout.element(i);
    const bool land = regions.is_land(el.region);
    const bool residual = el.term == Term::Residual;
    if (el.component == Component::Ocean) {
      mask[i] = land || !residual;
    } else if (!land) {
      mask[i] = true;
    } else if (!residual && contains(policy.small_land_regions, el.region.value)) {
      mask[i] = true;
    } else if (el.component == Component::Resp && is_linear(el.term) &&
               (!policy.infer_rlt || contains(policy.rlt_fixed_regions, el.region.value))) {
      mask[i] = true;
    }
  }
  return mask;
}

// ---------------------------------------------------------------- reparameterization

Reparameterization::Reparameterization(std::size_t dimension, double pivot, std::vector<PivotBlock> blocks)
    : dimension_(dimension), pivot_(pivot), blocks_(std::move(blocks)) {
  for (const auto& b : blocks_) {
    if (b.intercept_index >= dimension_ || b.trend_index >= dimension_)
      throw DomainError("pivot block index outside the layout");
    if (b.a == 0.0) throw DomainError("singular pivot block");
  }
}

Eigen::VectorXd Reparameterization::apply(const Eigen::VectorXd& alpha_star) const {
  Eigen::VectorXd out = alpha_star;
  for (const auto& b : blocks_)
    out(static_cast<Eigen::Index>(b.intercept_index)) =
        b.a * alpha_star(static_cast<Eigen::Index>(b.intercept_index)) +
        b.b * alpha_star(static_cast<Eigen::Index>(b.trend_index));
  return out;
}

Eigen::VectorXd Reparameterization::inverse(const Eigen::VectorXd& alpha) const {
  Eigen::VectorXd out = alpha;
  for (const auto& b : blocks_)
    out(static_cast<Eigen::Index>(b.intercept_index)) =
        (alpha(static_cast<Eigen::Index>(b.intercept_index)) - b.b * alpha(static_cast<Eigen::Index>(b.trend_index))) /
        b.a;
  return out;
}

Eigen::MatrixXd Reparameterization::matrix() const {
  Eigen::MatrixXd p = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(dimension_), static_cast<Eigen::Index>(dimension_));
  for (const auto& b : blocks_) {
    const auto i = static_cast<Eigen::Index>(b.intercept_index);
    p(i, i) = b.a;
    p(i, static_cast<Eigen::Index>(b.trend_index)) = b.b;
  }
  return p;
}

double Reparameterization::log_abs_det() const {
  double s = 0.0;
  for (const auto& b : blocks_) s += std::log(std::abs(b.a));
  return s;
}

Reparameterization build_reparameterization(const LinearAggregates& aggregates, double pivot,
                                            const AlphaLayout& layout, const RegionPartition& regions) {
  std::vector<PivotBlock> blocks;
  const auto& fixed = layout.fixed();
  for (auto c : {Component::Gpp, Component::Resp}) {
    for (int r = 1; r <= layout.regions(); ++r) {
      const RegionId region{r};
      if (!regions.is_land(region)) continue;
      const auto i0 = layout.index(c, Term::Intercept, 0, region);
      const auto i1 = layout.index(c, Term::Trend, 0, region);
      if (fixed[i0] != fixed[i1])
        throw ConfigError("linear pair of " + std::string(component_name(c)) + " in region " +
                          regions.info(region).code + " must be both free or both fixed");
      if (fixed[i0]) continue;
      const double b0 = aggregates.intercept[index_of(c)][static_cast<std::size_t>(r - 1)];
      const double b1 = aggregates.trend[index_of(c)][static_cast<std::size_t>(r - 1)];
      if (b1 == 0.0) continue;
      if (b0 == 0.0)
        throw DomainError("zero intercept aggregate for " + std::string(component_name(c)) + " in region " +
                          regions.info(region).code);
      if (std::abs(b0) < 1e-12 * std::abs(b1 * pivot)) {
        spdlog::warn("intercept aggregate of {} in region {} is negligible; pivot disabled",
                     component_name(c), regions.info(region).code);
        continue;
      }
      const double a = 1.0 + b1 * pivot / b0;
      if (std::abs(a) < 1e-12) {
        spdlog::warn("linear term of {} in region {} vanishes at the pivot; pivot disabled", component_name(c),
                     regions.info(region).code);
        continue;
      }
      blocks.push_back({c, region, i0, i1, a, -b1 * pivot / b0});
    }
  }
  return Reparameterization(layout.size(), pivot, std::move(blocks));
}

// ---------------------------------------------------------------- hyperparameters

std::string hyper_name(HyperParam p) {
  switch (p) {
    case HyperParam::TauBetaGpp: return "tau_beta_gpp";
    case HyperParam::TauBetaResp: return "tau_beta_resp";
    case HyperParam::TauBetaOcean: return "tau_beta_ocean";
    case HyperParam::TauEpsGpp: return "tau_eps_gpp";
    case HyperParam::TauEpsResp: return "tau_eps_resp";
    case HyperParam::TauEpsOcean: return "tau_eps_ocean";
    case HyperParam::RhoBeta: return "rho_beta";
    case HyperParam::RhoEps: return "rho_eps";
    case HyperParam::KappaBio: return "kappa_bio";
    case HyperParam::KappaOcean: return "kappa_ocean";
  }
  return "?";
}

double AlphaCovarianceParams::get(HyperParam p) const {
  switch (p) {
    case HyperParam::TauBetaGpp: return tau_beta[0];
    case HyperParam::TauBetaResp: return tau_beta[1];
    case HyperParam::TauBetaOcean: return tau_beta[2];
    case HyperParam::TauEpsGpp: return tau_eps[0];
    case HyperParam::TauEpsResp: return tau_eps[1];
    case HyperParam::TauEpsOcean: return tau_eps[2];
    case HyperParam::RhoBeta: return rho_beta;
    case HyperParam::RhoEps: return rho_eps;
    case HyperParam::KappaBio: return kappa_bio;
    case HyperParam::KappaOcean: return kappa_ocean;
  }
  return 0.0;
}

void AlphaCovarianceParams::set(HyperParam p, double v) {
  switch (p) {
    case HyperParam::TauBetaGpp: tau_beta[0] = v; break;
    case HyperParam::TauBetaResp: tau_beta[1] = v; break;
    case HyperParam::TauBetaOcean: tau_beta[2] = v; break;
    case HyperParam::TauEpsGpp: tau_eps[0] = v; break;
    case HyperParam::TauEpsResp: tau_eps[1] = v; break;
    case HyperParam::TauEpsOcean: tau_eps[2] = v; break;
    case HyperParam::RhoBeta: rho_beta = v; break;
    case HyperParam::RhoEps: rho_eps = v; break;
    case HyperParam::KappaBio: kappa_bio = v; break;
    case HyperParam::KappaOcean: kappa_ocean = v; break;
  }
}

void AlphaCovarianceParams::validate() const {
  for (auto p : kHyperParams) {
    const double v = get(p);
    const bool ok = is_precision(p) ? (v > 0.0 && std::isfinite(v)) : (v >= 0.0 && v <= 1.0);
    if (!ok) throw DomainError(hyper_name(p) + " = " + format_double(v) + " is outside its domain");
  }
}

void Hyperpriors::validate() const {
  for (const auto* g : {&tau_beta, &tau_eps, &gamma})
    if (!(g->shape > 0.0 && g->rate > 0.0)) throw ConfigError("Gamma hyperprior parameters must be positive");
  for (const auto* b : {&rho, &kappa})
    if (!(b->a > 0.0 && b->b > 0.0)) throw ConfigError("Beta hyperprior parameters must be positive");
  if (!(sigma_pi2 > 0.0)) throw ConfigError("bias prior variance must be positive");
}

double Hyperpriors::log_density(HyperParam p, double v) const {
  switch (p) {
    case HyperParam::TauBetaGpp:
    case HyperParam::TauBetaResp:
    case HyperParam::TauBetaOcean: return gamma_log(tau_beta, v);
    case HyperParam::TauEpsGpp:
    case HyperParam::TauEpsResp:
    case HyperParam::TauEpsOcean: return gamma_log(tau_eps, v);
    case HyperParam::RhoBeta:
    case HyperParam::RhoEps: return beta_log(rho, v);
    case HyperParam::KappaBio:
    case HyperParam::KappaOcean: return beta_log(kappa, v);
  }
  return kNegInf;
}

AlphaCovarianceParams sample_hyperparameters_prior(const Hyperpriors& hyper, Rng& rng,
                                                   const AlphaCovarianceParams& base,
                                                   std::span<const HyperParam> which) {
  hyper.validate();
  AlphaCovarianceParams out = base;
  for (auto p : which) {
    switch (p) {
      case HyperParam::TauBetaGpp:
      case HyperParam::TauBetaResp:
      case HyperParam::TauBetaOcean: out.set(p, draw_gamma(hyper.tau_beta, rng)); break;
      case HyperParam::TauEpsGpp:
      case HyperParam::TauEpsResp:
      case HyperParam::TauEpsOcean: out.set(p, draw_gamma(hyper.tau_eps, rng)); break;
      case HyperParam::RhoBeta:
      case HyperParam::RhoEps: out.set(p, draw_beta(hyper.rho, rng)); break;
      case HyperParam::KappaBio:
      case HyperParam::KappaOcean: out.set(p, draw_beta(hyper.kappa, rng)); break;
    }
  }
  return out;
}

// ---------------------------------------------------------------- prior

AlphaPrior::AlphaPrior(const AlphaLayout& layout, Reparameterization reparam, PriorSettings settings)
    : dimension_(layout.size()), free_(layout.free_indices()), reparam_(std::move(reparam)), settings_(settings) {
  if (reparam_.dimension() == 0) reparam_ = Reparameterization(dimension_, 0.0, {});
  if (reparam_.dimension() != dimension_) throw ConfigError("reparameterization dimension does not match the layout");
  free_of_.assign(dimension_, -1);
  for (std::size_t k = 0; k < free_.size(); ++k) free_of_[free_[k]] = static_cast<long long>(k);

  std::vector<bool> covered(dimension_, false);
  auto claim = [&](Block b) {
    for (auto i : b.full) {
      if (covered[i]) throw ConfigError("alpha element " + layout.label(i) + " assigned to two prior blocks");
      covered[i] = true;
    }
    blocks_.push_back(std::move(b));
  };
  for (const auto& pb : reparam_.blocks()) {
    Block b{BlockKind::Pivot, {pb.intercept_index, pb.trend_index}, pb.component, pb.a, pb.b,
            settings_.linear_variance, settings_.trend_variance};
    claim(std::move(b));
  }
  const int R = layout.regions(), Q = layout.periods();
  for (auto c : kComponents) {
    for (int r = 1; r <= R; ++r) {
      const RegionId region{r};
      for (auto t : {Term::Intercept, Term::Trend}) {
        const auto i = layout.index(c, t, 0, region);
        if (covered[i]) continue;
        Block b{BlockKind::Linear, {i}, c};
        b.v0 = settings_.linear_variance;
        claim(std::move(b));
      }
    }
  }
  // Seasonal: gpp and resp share a (term, k, region) pair; ocean stands alone.
  for (int r = 1; r <= R; ++r) {
    const RegionId region{r};
    for (auto t : {Term::CosConst, Term::CosTrend, Term::SinConst, Term::SinTrend}) {
      const int kmax = std::max({layout.harmonics(Component::Gpp), layout.harmonics(Component::Resp),
                                 layout.harmonics(Component::Ocean)});
      for (int k = 1; k <= kmax; ++k) {
        const bool g = k <= layout.harmonics(Component::Gpp), q = k <= layout.harmonics(Component::Resp);
        if (g && q) {
          claim({BlockKind::SeasonalPair,
                 {layout.index(Component::Gpp, t, k, region), layout.index(Component::Resp, t, k, region)}});
        } else {
          if (g) claim({BlockKind::SeasonalSingle, {layout.index(Component::Gpp, t, k, region)}, Component::Gpp});
          if (q) claim({BlockKind::SeasonalSingle, {layout.index(Component::Resp, t, k, region)}, Component::Resp});
        }
        if (k <= layout.harmonics(Component::Ocean))
          claim({BlockKind::SeasonalSingle, {layout.index(Component::Ocean, t, k, region)}, Component::Ocean});
      }
    }
    Block bio{BlockKind::ResidualBio, {}};
    for (auto c : {Component::Gpp, Component::Resp})
      for (int q = 1; q <= Q; ++q) bio.full.push_back(layout.index(c, Term::Residual, 0, region, PeriodId{q}));
    claim(std::move(bio));
    Block ocean{BlockKind::ResidualSingle, {}, Component::Ocean};
    for (int q = 1; q <= Q; ++q) ocean.full.push_back(layout.index(Component::Ocean, Term::Residual, 0, region, PeriodId{q}));
    claim(std::move(ocean));
  }
  for (std::size_t i = 0; i < dimension_; ++i)
    if (!covered[i]) throw ConfigError("alpha element " + layout.label(i) + " has no prior block");
}

Eigen::MatrixXd AlphaPrior::block_covariance(const Block& b, const AlphaCovarianceParams& p) const {
  const auto n = static_cast<Eigen::Index>(b.full.size());
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(n, n);
  switch (b.kind) {
    case BlockKind::Linear: cov(0, 0) = b.v0; break;
    case BlockKind::Pivot: {
      // P_b diag(v0, v1) P_b' with P_b = [[a, b], [0, 1]].
      cov(0, 0) = b.a * b.a * b.v0 + b.b * b.b * b.v1;
      cov(0, 1) = cov(1, 0) = b.b * b.v1;
      cov(1, 1) = b.v1;
      break;
    }
    case BlockKind::SeasonalPair: {
      const double sg = 1.0 / std::sqrt(p.tau_beta[0]), sr = 1.0 / std::sqrt(p.tau_beta[1]);
      cov(0, 0) = sg * sg;
      cov(1, 1) = sr * sr;
      cov(0, 1) = cov(1, 0) = p.rho_beta * sg * sr;
      break;
    }
    case BlockKind::SeasonalSingle: cov(0, 0) = 1.0 / p.tau_beta[index_of(b.component)]; break;
    case BlockKind::ResidualBio: {
      const int Q = static_cast<int>(n / 2);
      const Eigen::MatrixXd k = ar1_matrix(Q, p.kappa_bio);
      const double sg = 1.0 / std::sqrt(p.tau_eps[0]), sr = 1.0 / std::sqrt(p.tau_eps[1]);
      cov.topLeftCorner(Q, Q) = sg * sg * k;
      cov.bottomRightCorner(Q, Q) = sr * sr * k;
      cov.topRightCorner(Q, Q) = p.rho_eps * sg * sr * k;
      cov.bottomLeftCorner(Q, Q) = p.rho_eps * sg * sr * k;
      break;
    }
    case BlockKind::ResidualSingle: {
      const bool ocean = b.component == Component::Ocean;
      const double scale = (ocean ? settings_.ocean_inflation : 1.0) / p.tau_eps[index_of(b.component)];
      cov = scale * ar1_matrix(static_cast<int>(n), ocean ? p.kappa_ocean : p.kappa_bio);
      break;
    }
  }
  return cov;
}

bool AlphaPrior::touches(const Block& b, HyperParam which) const {
  switch (b.kind) {
    case BlockKind::Linear:
    case BlockKind::Pivot: return false;
    case BlockKind::SeasonalPair:
      return which == HyperParam::TauBetaGpp || which == HyperParam::TauBetaResp || which == HyperParam::RhoBeta;
    case BlockKind::SeasonalSingle:
      return which == static_cast<HyperParam>(static_cast<int>(HyperParam::TauBetaGpp) +
                                              static_cast<int>(index_of(b.component)));
    case BlockKind::ResidualBio:
      return which == HyperParam::TauEpsGpp || which == HyperParam::TauEpsResp || which == HyperParam::RhoEps ||
             which == HyperParam::KappaBio;
    case BlockKind::ResidualSingle:
      if (b.component == Component::Ocean) return which == HyperParam::TauEpsOcean || which == HyperParam::KappaOcean;
      return which == HyperParam::KappaBio ||
             which == (b.component == Component::Gpp ? HyperParam::TauEpsGpp : HyperParam::TauEpsResp);
  }
  return false;
}

double AlphaPrior::block_log_density(const Block& b, const Eigen::VectorXd& x, const AlphaCovarianceParams& p) const {
  std::vector<Eigen::Index> local, global;
  for (std::size_t k = 0; k < b.full.size(); ++k)
    if (free_of_[b.full[k]] >= 0) {
      local.push_back(static_cast<Eigen::Index>(k));
      global.push_back(static_cast<Eigen::Index>(free_of_[b.full[k]]));
    }
  if (local.empty()) return 0.0;
  const auto n = static_cast<Eigen::Index>(local.size());
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y(i) = x(global[static_cast<std::size_t>(i)]);

  // Closed forms for fully free residual blocks keep slice updates cheap.
  if (b.kind == BlockKind::ResidualBio && n == static_cast<Eigen::Index>(b.full.size())) {
    const Eigen::Index Q = n / 2;
    const double rho = p.rho_eps, kappa = p.kappa_bio;
    if (!(rho < 1.0 && kappa < 1.0)) return kNegInf;
    const Eigen::VectorXd g = y.head(Q) * std::sqrt(p.tau_eps[0]);
    const Eigen::VectorXd r = y.tail(Q) * std::sqrt(p.tau_eps[1]);
    const double quad = (ar1_inner(g, g, kappa) - 2.0 * rho * ar1_inner(g, r, kappa) + ar1_inner(r, r, kappa)) /
                        (1.0 - rho * rho);
    const double logdet = static_cast<double>(Q) * std::log1p(-rho * rho) +
                          2.0 * static_cast<double>(Q - 1) * std::log1p(-kappa * kappa) -
                          static_cast<double>(Q) * (std::log(p.tau_eps[0]) + std::log(p.tau_eps[1]));
    return -0.5 * (quad + logdet);
  }
  if (b.kind == BlockKind::ResidualSingle && n == static_cast<Eigen::Index>(b.full.size())) {
    const bool ocean = b.component == Component::Ocean;
    const double kappa = ocean ? p.kappa_ocean : p.kappa_bio;
    if (!(kappa < 1.0)) return kNegInf;
    const double var = (ocean ? settings_.ocean_inflation : 1.0) / p.tau_eps[index_of(b.component)];
    const double quad = ar1_inner(y, y, kappa) / var;
    const double logdet = static_cast<double>(n) * std::log(var) + static_cast<double>(n - 1) * std::log1p(-kappa * kappa);
    return -0.5 * (quad + logdet);
  }
  const Eigen::MatrixXd full = block_covariance(b, p);
  Eigen::MatrixXd cov(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) cov(i, j) = full(local[static_cast<std::size_t>(i)], local[static_cast<std::size_t>(j)]);
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) return kNegInf;
  const Eigen::VectorXd w = llt.matrixL().solve(y);
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) logdet += 2.0 * std::log(llt.matrixLLT()(i, i));
  return -0.5 * (w.squaredNorm() + logdet);
}

double AlphaPrior::log_density(const Eigen::VectorXd& alpha_free, const AlphaCovarianceParams& p) const {
  if (static_cast<std::size_t>(alpha_free.size()) != free_.size()) throw DomainError("alpha_free has the wrong length");
  double s = 0.0;
  for (const auto& b : blocks_) s += block_log_density(b, alpha_free, p);
  return s;
}

double AlphaPrior::log_density(const Eigen::VectorXd& alpha_free, const AlphaCovarianceParams& p,
                               HyperParam which) const {
  if (static_cast<std::size_t>(alpha_free.size()) != free_.size()) throw DomainError("alpha_free has the wrong length");
  double s = 0.0;
  for (const auto& b : blocks_)
    if (touches(b, which)) s += block_log_density(b, alpha_free, p);
  return s;
}

std::vector<HyperParam> AlphaPrior::active_parameters() const {
  std::vector<HyperParam> out;
  for (auto h : kHyperParams) {
    bool active = false;
    for (const auto& b : blocks_) {
      if (!touches(b, h)) continue;
      std::size_t nfree = 0;
      for (auto i : b.full) nfree += free_of_[i] >= 0;
      // A correlation only matters when both of its components are free.
      if (h == HyperParam::RhoBeta || h == HyperParam::RhoEps) {
        const auto half = b.full.size() / 2;
        bool first = false, second = false;
        for (std::size_t k = 0; k < b.full.size(); ++k) (k < half ? first : second) |= free_of_[b.full[k]] >= 0;
        active |= first && second;
      } else if (h == HyperParam::KappaBio || h == HyperParam::KappaOcean) {
        active |= nfree > 1;
      } else if (b.kind == BlockKind::SeasonalPair || b.kind == BlockKind::ResidualBio) {
        const auto half = b.full.size() / 2;
        const bool gpp_side = h == HyperParam::TauBetaGpp || h == HyperParam::TauEpsGpp;
        for (std::size_t k = 0; k < b.full.size(); ++k)
          if ((k < half) == gpp_side) active |= free_of_[b.full[k]] >= 0;
      } else {
        active |= nfree > 0;
      }
    }
    if (active) out.push_back(h);
  }
  return out;
}

Eigen::MatrixXd AlphaPrior::sigma_star(const AlphaCovarianceParams& p) const {
  p.validate();
  const auto n = static_cast<Eigen::Index>(dimension_);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
  for (const auto& b : blocks_) {
    Eigen::MatrixXd cov;
    if (b.kind == BlockKind::Pivot) {
      cov = Eigen::MatrixXd::Zero(2, 2);
      cov(0, 0) = b.v0;
      cov(1, 1) = b.v1;
    } else {
      cov = block_covariance(b, p);
    }
    for (std::size_t i = 0; i < b.full.size(); ++i)
      for (std::size_t j = 0; j < b.full.size(); ++j)
        out(static_cast<Eigen::Index>(b.full[i]), static_cast<Eigen::Index>(b.full[j])) =
            cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  return out;
}

Eigen::MatrixXd AlphaPrior::sigma_alpha(const AlphaCovarianceParams& p) const {
  p.validate();
  const auto n = static_cast<Eigen::Index>(dimension_);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
  for (const auto& b : blocks_) {
    const auto cov = block_covariance(b, p);
    for (std::size_t i = 0; i < b.full.size(); ++i)
      for (std::size_t j = 0; j < b.full.size(); ++j)
        out(static_cast<Eigen::Index>(b.full[i]), static_cast<Eigen::Index>(b.full[j])) =
            cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  const double scale = std::max(out.diagonal().maxCoeff(), 1e-300);
  const double min_eig = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(out, Eigen::EigenvaluesOnly).eigenvalues()(0);
  if (min_eig < -1e-8 * scale)
    throw NumericalError("prior covariance is indefinite: minimum eigenvalue " + format_double(min_eig));
  if (min_eig < 0.0) out.diagonal().array() += settings_.jitter * scale;
  return out;
}

Eigen::MatrixXd AlphaPrior::sigma_alpha_free(const AlphaCovarianceParams& p) const {
  const auto full = sigma_alpha(p);
  const auto n = static_cast<Eigen::Index>(free_.size());
  Eigen::MatrixXd out(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      out(i, j) = full(static_cast<Eigen::Index>(free_[static_cast<std::size_t>(i)]),
                       static_cast<Eigen::Index>(free_[static_cast<std::size_t>(j)]));
  return out;
}

Eigen::MatrixXd AlphaPrior::precision_free(const AlphaCovarianceParams& p) const {
  p.validate();
  const auto n = static_cast<Eigen::Index>(free_.size());
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
  for (const auto& b : blocks_) {
    std::vector<Eigen::Index> local, global;
    for (std::size_t k = 0; k < b.full.size(); ++k)
      if (free_of_[b.full[k]] >= 0) {
        local.push_back(static_cast<Eigen::Index>(k));
        global.push_back(static_cast<Eigen::Index>(free_of_[b.full[k]]));
      }
    if (local.empty()) continue;
    const auto full = block_covariance(b, p);
    const auto m = static_cast<Eigen::Index>(local.size());
    Eigen::MatrixXd cov(m, m);
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < m; ++j)
        cov(i, j) = full(local[static_cast<std::size_t>(i)], local[static_cast<std::size_t>(j)]);
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) {
      cov.diagonal().array() += settings_.jitter * cov.diagonal().maxCoeff();
      llt.compute(cov);
      if (llt.info() != Eigen::Success) throw NumericalError("prior block is not positive definite");
    }
    const Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(m, m));
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < m; ++j)
        out(global[static_cast<std::size_t>(i)], global[static_cast<std::size_t>(j)]) = inv(i, j);
  }
  return out;
}

Eigen::VectorXd AlphaPrior::expand(const Eigen::VectorXd& alpha_free) const {
  if (static_cast<std::size_t>(alpha_free.size()) != free_.size()) throw DomainError("alpha_free has the wrong length");
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dimension_));
  for (std::size_t k = 0; k < free_.size(); ++k)
    out(static_cast<Eigen::Index>(free_[k])) = alpha_free(static_cast<Eigen::Index>(k));
  return out;
}

Eigen::VectorXd AlphaPrior::restrict(const Eigen::VectorXd& alpha_full) const {
  if (static_cast<std::size_t>(alpha_full.size()) != dimension_) throw DomainError("alpha has the wrong length");
  Eigen::VectorXd out(static_cast<Eigen::Index>(free_.size()));
  for (std::size_t k = 0; k < free_.size(); ++k) out(static_cast<Eigen::Index>(k)) = alpha_full(static_cast<Eigen::Index>(free_[k]));
  return out;
}

// ---------------------------------------------------------------- constraints

std::string constraint_kind_name(ConstraintKind k) {
  switch (k) {
    case ConstraintKind::SignGpp: return "sign-gpp";
    case ConstraintKind::SignResp: return "sign-resp";
    case ConstraintKind::DiurnalGpp: return "diurnal-gpp";
    case ConstraintKind::DiurnalResp: return "diurnal-resp";
  }
  return "?";
}

Eigen::MatrixXd ConstraintSet::phi_free(std::span<const std::size_t> free) const {
  Eigen::MatrixXd out(phi.rows(), static_cast<Eigen::Index>(free.size()));
  for (std::size_t k = 0; k < free.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = phi.col(static_cast<Eigen::Index>(free[k]));
  return out;
}

ConstraintSet build_constraints(const FluxBasisSet& basis, const AggregationMatrices& aggregation,
                                const ConstraintPolicy& policy) {
  const auto& layout = basis.layout();
  const int R = layout.regions(), Q = layout.periods();
  const auto rq = static_cast<Eigen::Index>(R) * Q;
  const Eigen::Index blocks = (policy.sign ? 2 : 0) + (policy.diurnal ? 2 : 0);
  ConstraintSet set;
  set.d = Eigen::VectorXd::Zero(blocks * rq);
  set.phi = Eigen::MatrixXd::Zero(blocks * rq, static_cast<Eigen::Index>(layout.size()));
  Eigen::Index row = 0;
  if (policy.sign) {
    for (auto c : {Component::Gpp, Component::Resp}) {
      const double sign = c == Component::Gpp ? -1.0 : 1.0;
      const auto& x0 = aggregation.bottom_up[index_of(c)];
      const auto& phi = aggregation.phi[index_of(c)];
      if (x0.size() != rq || phi.rows() != rq ||
          phi.cols() != static_cast<Eigen::Index>(layout.component_size(c)))
        throw ConfigError("aggregation matrices do not match the layout");
      for (Eigen::Index k = 0; k < rq; ++k, ++row) {
        set.d(row) = sign * x0(k);
        set.phi.row(row).segment(static_cast<Eigen::Index>(layout.offset(c)), phi.cols()) = sign * phi.row(k);
        set.labels.push_back({c == Component::Gpp ? ConstraintKind::SignGpp : ConstraintKind::SignResp,
                              RegionId{static_cast<int>(k / Q) + 1}, PeriodId{static_cast<int>(k % Q) + 1}});
      }
    }
  }
  if (policy.diurnal) {
    for (auto c : {Component::Gpp, Component::Resp}) {
      for (int r = 1; r <= R; ++r)
        for (int q = 1; q <= Q; ++q, ++row) {
          set.d(row) = -policy.diurnal_floor;
          set.phi(row, static_cast<Eigen::Index>(layout.index(c, Term::Residual, 0, RegionId{r}, PeriodId{q}))) = 1.0;
          set.labels.push_back({c == Component::Gpp ? ConstraintKind::DiurnalGpp : ConstraintKind::DiurnalResp,
                                RegionId{r}, PeriodId{q}});
        }
    }
  }
  set.row_scale = Eigen::VectorXd::Ones(set.d.size());
  for (Eigen::Index i = 0; i < set.d.size(); ++i) {
    const double m = set.phi.row(i).cwiseAbs().maxCoeff();
    if (m > 0.0) {
      set.row_scale(i) = m;
      set.phi.row(i) /= m;
      set.d(i) /= m;
    }
  }
  for (Eigen::Index i = 0; i < set.d.size(); ++i)
    if (set.d(i) < -1e-12 * std::max(1.0, std::abs(set.d(i)))) {
      set.infeasible_mode = true;
      const auto& l = set.labels[static_cast<std::size_t>(i)];
      spdlog::warn("bottom-up field violates {} in region {} period {}; prior mode is infeasible",
                   constraint_kind_name(l.kind), l.region.value, l.period.value);
    }
  return set;
}

std::string format_constraints(const ConstraintSet& set) {
  std::string out = "row,kind,region,period,offset,terms\n";
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& l = set.labels[i];
    out += std::to_string(i) + "," + constraint_kind_name(l.kind) + "," + std::to_string(l.region.value) + "," +
           std::to_string(l.period.value) + "," + format_double(set.d(static_cast<Eigen::Index>(i))) + ",";
    bool first = true;
    for (Eigen::Index j = 0; j < set.phi.cols(); ++j) {
      const double v = set.phi(static_cast<Eigen::Index>(i), j);
      if (v == 0.0) continue;
      out += (first ? "" : ";") + std::to_string(j) + ":" + format_double(v);
      first = false;
    }
    out += "\n";
  }
  return out;
}

}  // namespace fluxinv
