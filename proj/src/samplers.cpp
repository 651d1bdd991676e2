#include "fluxinv/samplers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace fluxinv {

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Eigen::VectorXd standard_normal(Eigen::Index n, Rng& rng) {
  std::normal_distribution<double> z;
  Eigen::VectorXd out(n);
  for (Eigen::Index i = 0; i < n; ++i) out(i) = z(rng);
  return out;
}

double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

Eigen::LLT<Eigen::MatrixXd> checked_cholesky(const Eigen::MatrixXd& m, const char* what) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) {
    const auto diag = m.diagonal();
    throw NumericalError(std::string(what) + " is not positive definite (diagonal range " +
                         format_double(diag.minCoeff()) + " .. " + format_double(diag.maxCoeff()) + ")");
  }
  return llt;
}
}  // namespace

// ---------------------------------------------------------------- truncated Gaussian

TruncatedGaussian::TruncatedGaussian(Eigen::VectorXd mean, Eigen::MatrixXd precision, Eigen::VectorXd d,
                                     Eigen::MatrixXd phi)
    : mean_(std::move(mean)), precision_(std::move(precision)), d_(std::move(d)), phi_(std::move(phi)) {
  const auto n = mean_.size();
  if (precision_.rows() != n || precision_.cols() != n) throw DomainError("precision does not match the mean");
  if (phi_.rows() != d_.size() || (phi_.rows() > 0 && phi_.cols() != n))
    throw DomainError("constraint matrix does not match the target");
  if (phi_.rows() == 0) phi_.resize(0, n);
  chol_ = checked_cholesky(precision_, "target precision");
  prune();
}

void TruncatedGaussian::prune() {
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < d_.size(); ++i) {
    if (phi_.row(i).cwiseAbs().maxCoeff() > 0.0) keep.push_back(i);
    else if (d_(i) < 0.0) throw DomainError("constraint row " + std::to_string(i) + " cannot be satisfied");
  }
  if (keep.size() == static_cast<std::size_t>(d_.size())) return;
  Eigen::VectorXd d(static_cast<Eigen::Index>(keep.size()));
  Eigen::MatrixXd phi(static_cast<Eigen::Index>(keep.size()), mean_.size());
  for (std::size_t k = 0; k < keep.size(); ++k) {
    d(static_cast<Eigen::Index>(k)) = d_(keep[k]);
    phi.row(static_cast<Eigen::Index>(k)) = phi_.row(keep[k]);
  }
  d_ = std::move(d);
  phi_ = std::move(phi);
}

TruncatedGaussian TruncatedGaussian::from_precision(const Eigen::MatrixXd& precision, const Eigen::VectorXd& linear,
                                                    Eigen::VectorXd d, Eigen::MatrixXd phi) {
  const auto llt = checked_cholesky(precision, "conditional precision");
  return TruncatedGaussian(llt.solve(linear), precision, std::move(d), std::move(phi));
}

TruncatedGaussian TruncatedGaussian::from_covariance(Eigen::VectorXd mean, const Eigen::MatrixXd& covariance,
                                                     Eigen::VectorXd d, Eigen::MatrixXd phi) {
  const auto llt = checked_cholesky(covariance, "target covariance");
  Eigen::MatrixXd prec = llt.solve(Eigen::MatrixXd::Identity(covariance.rows(), covariance.cols()));
  prec = 0.5 * (prec + prec.transpose()).eval();
  return TruncatedGaussian(std::move(mean), std::move(prec), std::move(d), std::move(phi));
}

bool TruncatedGaussian::feasible(const Eigen::VectorXd& x, double tolerance) const {
  return d_.size() == 0 || slack(x).minCoeff() >= -tolerance;
}

Eigen::VectorXd exact_hmc_step(const TruncatedGaussian& target, const Eigen::VectorXd& x0, Rng& rng,
                               const HmcConfig& config, HmcDiagnostics* diagnostics) {
  HmcDiagnostics local;
  HmcDiagnostics& diag = diagnostics ? *diagnostics : local;
  diag = {};
  if (x0.size() != static_cast<Eigen::Index>(target.dimension())) throw DomainError("start point has the wrong length");
  if (!target.feasible(x0, 1e-9)) throw DomainError("exact HMC start point is infeasible");
  const auto& mu = target.mean();
  const auto& phi = target.phi();
  const Eigen::Index m = phi.rows();

  // Position relative to the mean; v ~ N(0, precision^-1).
  Eigen::VectorXd x = x0 - mu;
  Eigen::VectorXd v = target.cholesky().matrixU().solve(standard_normal(x.size(), rng));
  const Eigen::VectorXd c = target.d() + phi * mu;
  Eigen::VectorXd a = phi * x, b = phi * v;

  double remaining = config.travel_time;
  Eigen::Index last = -1;
  while (true) {
    double t_hit = std::numeric_limits<double>::infinity();
    Eigen::Index hit = -1;
    for (Eigen::Index i = 0; i < m; ++i) {
      const double g0 = c(i) + a(i);
      double t;
      if (g0 <= 0.0 && b(i) < 0.0 && i != last) {
        t = 0.0;  // on or past the wall, moving out
      } else {
        const double u = std::hypot(a(i), b(i));
        if (u <= c(i)) continue;
        t = std::atan2(b(i), a(i)) + std::acos(std::clamp(-c(i) / u, -1.0, 1.0));
        t = std::fmod(t, kTwoPi);
        if (t < 0.0) t += kTwoPi;
        if (t < 1e-10) {
          if (i == last) continue;
          t = 0.0;
        }
      }
      if (t < t_hit) {
        t_hit = t;
        hit = i;
      }
    }
    const double step = std::min(t_hit, remaining);
    const double cs = std::cos(step), sn = std::sin(step);
    const Eigen::VectorXd x_new = x * cs + v * sn;
    v = v * cs - x * sn;
    x = x_new;
    if (t_hit >= remaining) break;
    remaining -= t_hit;
    if (++diag.reflections > config.max_reflections) {
      diag.aborted = true;
      return x0;
    }
    // Reflect in the precision-inverse metric: w = precision^-1 phi_i'.
    const Eigen::VectorXd w = target.cholesky().solve(phi.row(hit).transpose());
    const double fw = phi.row(hit).dot(w);
    v -= (2.0 * phi.row(hit).dot(v) / fw) * w;
    a = phi * x;
    b = phi * v;
    last = hit;
  }
  Eigen::VectorXd out = mu + x;
  if (!target.feasible(out, 1e-9)) {
    diag.aborted = true;
    return x0;
  }
  return out;
}

Eigen::VectorXd feasible_point(const Eigen::VectorXd& d, const Eigen::MatrixXd& phi, const Eigen::VectorXd& start,
                               double margin, int max_sweeps) {
  const Eigen::Index m = d.size();
  if (phi.rows() != m || phi.cols() != start.size()) throw DomainError("constraint matrix does not match the start");
  Eigen::VectorXd norms(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    norms(i) = phi.row(i).squaredNorm();
    if (norms(i) == 0.0 && d(i) < 0.0) throw ConfigError("constraint row " + std::to_string(i) + " cannot be satisfied");
  }
  auto strictly = [&](const Eigen::VectorXd& x) {
    const Eigen::VectorXd s = d + phi * x;
    for (Eigen::Index i = 0; i < m; ++i)
      if (norms(i) > 0.0 && !(s(i) > 0.0)) return false;
    return true;
  };
  if (strictly(start)) return start;
  Eigen::VectorXd x = start, lambda = Eigen::VectorXd::Zero(m);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
      if (norms(i) == 0.0) continue;
      const double gap = margin - d(i) - phi.row(i).dot(x);
      worst = std::max(worst, gap);
      const double delta = std::max(-lambda(i), gap / norms(i));
      if (delta == 0.0) continue;
      lambda(i) += delta;
      x += delta * phi.row(i).transpose();
    }
    if (worst <= 0.5 * margin && strictly(x)) return x;
  }
  if (strictly(x)) return x;
  throw ConfigError("no strictly feasible starting point found for the constraints");
}

// ---------------------------------------------------------------- slice sampling

double slice_sample_step(const std::function<double(double)>& log_density, double x0, double width, Rng& rng,
                         int max_steps_out) {
  const double f0 = log_density(x0);
  if (!std::isfinite(f0)) throw DomainError("slice sampler started where the log density is not finite");
  if (!(width > 0.0)) throw DomainError("slice width must be positive");
  const double level = f0 - std::exponential_distribution<double>(1.0)(rng);
  double lo = x0 - width * uniform01(rng);
  double hi = lo + width;
  int j = static_cast<int>(std::floor(max_steps_out * uniform01(rng)));
  int k = max_steps_out - 1 - j;
  while (j-- > 0 && log_density(lo) > level) lo -= width;
  while (k-- > 0 && log_density(hi) > level) hi += width;
  while (true) {
    const double x1 = lo + (hi - lo) * uniform01(rng);
    if (log_density(x1) > level) return x1;
    if (x1 < x0) lo = x1;
    else hi = x1;
    if (hi - lo < 1e-14 * (1.0 + std::abs(x0))) return x0;
  }
}

double slice_sample_log_step(const std::function<double(double)>& log_density, double x0, double width, Rng& rng) {
  if (!(x0 > 0.0)) throw DomainError("log-scale slice step needs a positive start");
  auto g = [&](double u) {
    const double v = std::exp(u);
    if (!(v > 0.0) || !std::isfinite(v)) return kNegInf;
    return log_density(v) + u;
  };
  return std::exp(slice_sample_step(g, std::log(x0), width, rng));
}

// ---------------------------------------------------------------- conjugate updates

double gamma_conditional_step(const GammaPrior& prior, std::size_t n, double quadratic, Rng& rng) {
  if (!std::isfinite(quadratic) || quadratic < 0.0) throw DomainError("quadratic form is not finite and non-negative");
  const double shape = prior.shape + 0.5 * static_cast<double>(n);
  const double rate = prior.rate + 0.5 * quadratic;
  std::gamma_distribution<double> g(shape, 1.0 / rate);
  for (int k = 0; k < 64; ++k)
    if (const double v = g(rng); v > 0.0) return v;
  return std::numeric_limits<double>::min();
}

Eigen::VectorXd GroupLikelihood::residual(const Eigen::VectorXd& alpha_free, const Eigen::VectorXd& pi) const {
  Eigen::VectorXd r = offset - psi * alpha_free;
  if (bias.cols() > 0) r -= bias * pi;
  return r;
}

GroupLikelihood make_group_likelihood(const ObservationGroup& group, const ErrorParams& params,
                                      std::span<const std::size_t> free) {
  group.validate();
  ErrorParams unit = params;
  unit.gamma = 1.0;
  GroupLikelihood g{group.id, ErrorCovariance(group, unit), {}, group.values - group.baseline, {}, {}, {}, {}, {}, {}};
  g.psi.resize(group.response.rows(), static_cast<Eigen::Index>(free.size()));
  for (std::size_t k = 0; k < free.size(); ++k)
    g.psi.col(static_cast<Eigen::Index>(k)) = group.response.col(static_cast<Eigen::Index>(free[k]));
  g.gram = g.covariance.unscaled_gram(g.psi);
  g.cross = g.covariance.unscaled_cross(g.psi, g.offset);
  if (group.bias.enabled()) {
    g.bias = group.bias.design;
    Eigen::MatrixXd c_bias(g.bias.rows(), g.bias.cols());
    for (Eigen::Index j = 0; j < g.bias.cols(); ++j) c_bias.col(j) = g.covariance.solve(g.bias.col(j));
    g.psi_c_bias = g.psi.transpose() * c_bias;
    g.bias_gram = g.bias.transpose() * c_bias;
    g.bias_gram = 0.5 * (g.bias_gram + g.bias_gram.transpose()).eval();
    g.bias_cross = c_bias.transpose() * g.offset;
  }
  return g;
}

TruncatedGaussian alpha_conditional(const Eigen::MatrixXd& prior_precision, std::span<const GroupLikelihood> groups,
                                    std::span<const double> gamma, std::span<const Eigen::VectorXd> pi,
                                    const Eigen::VectorXd& d, const Eigen::MatrixXd& phi) {
  if (gamma.size() != groups.size()) throw DomainError("one gamma per group is required");
  Eigen::MatrixXd lambda = prior_precision;
  Eigen::VectorXd linear = Eigen::VectorXd::Zero(prior_precision.rows());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& grp = groups[g];
    if (grp.gram.rows() != lambda.rows()) throw DomainError("group '" + grp.id + "' does not match the prior");
    lambda += gamma[g] * grp.gram;
    linear += gamma[g] * grp.cross;
    if (grp.bias.cols() > 0) {
      if (pi.size() != groups.size()) throw DomainError("bias coefficients missing for group '" + grp.id + "'");
      linear -= gamma[g] * (grp.psi_c_bias * pi[g]);
    }
  }
  return TruncatedGaussian::from_precision(lambda, linear, d, phi);
}

Eigen::VectorXd bias_conditional_step(const GroupLikelihood& group, const Eigen::VectorXd& alpha_free, double gamma,
                                      double prior_variance, Rng& rng) {
  const auto p = group.bias.cols();
  if (p == 0) return {};
  Eigen::MatrixXd prec = gamma * group.bias_gram;
  prec.diagonal().array() += 1.0 / prior_variance;
  const Eigen::VectorXd linear = gamma * (group.bias_cross - group.psi_c_bias.transpose() * alpha_free);
  const auto llt = checked_cholesky(prec, "bias precision");
  return llt.solve(linear) + llt.matrixU().solve(standard_normal(p, rng));
}

// ---------------------------------------------------------------- diagnostics

double effective_sample_size(std::span<const double> chain) {
  const auto n = chain.size();
  if (n < 4) return static_cast<double>(n);
  double mean = 0.0;
  for (double v : chain) mean += v;
  mean /= static_cast<double>(n);
  auto autocov = [&](std::size_t lag) {
    double s = 0.0;
    for (std::size_t i = 0; i + lag < n; ++i) s += (chain[i] - mean) * (chain[i + lag] - mean);
    return s / static_cast<double>(n);
  };
  const double c0 = autocov(0);
  if (!(c0 > 0.0)) return static_cast<double>(n);
  // Initial monotone sequence: pair sums Gamma_m = rho_2m + rho_2m+1 while positive, made non-increasing.
  double tau = -1.0, prev = std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; 2 * m + 1 < n; ++m) {
    double pair = (autocov(2 * m) + autocov(2 * m + 1)) / c0;
    if (pair <= 0.0) break;
    pair = std::min(pair, prev);
    prev = pair;
    tau += 2.0 * pair;
  }
  return static_cast<double>(n) / std::max(tau, 1.0 / static_cast<double>(n));
}

Eigen::VectorXd PosteriorSamples::alpha_full(std::size_t draw) const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(full_size));
  for (std::size_t k = 0; k < free_indices.size(); ++k)
    out(static_cast<Eigen::Index>(free_indices[k])) =
        alpha(static_cast<Eigen::Index>(draw), static_cast<Eigen::Index>(k));
  return out;
}

namespace {
double column_ess(const Eigen::MatrixXd& m, Eigen::Index j) {
  std::vector<double> v(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) v[static_cast<std::size_t>(i)] = m(i, j);
  return effective_sample_size(v);
}
}  // namespace

std::vector<std::pair<std::string, double>> PosteriorSamples::ess() const {
  std::vector<std::pair<std::string, double>> out;
  for (std::size_t k = 0; k < hyper_names.size(); ++k)
    out.emplace_back(hyper_name(hyper_names[k]), column_ess(hyper, static_cast<Eigen::Index>(k)));
  for (std::size_t g = 0; g < group_ids.size(); ++g)
    out.emplace_back("gamma:" + group_ids[g], column_ess(gamma, static_cast<Eigen::Index>(g)));
  if (alpha.cols() > 0) {
    double lo = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < alpha.cols(); ++j) lo = std::min(lo, column_ess(alpha, j));
    out.emplace_back("alpha_min", lo);
  }
  return out;
}

// ---------------------------------------------------------------- Gibbs

namespace {

struct ErrorTrace {
  std::vector<double> rho, length;
};

PosteriorSamples gibbs_core(const InferenceModel& model, const GibbsConfig& config, const StageOneConfig* stage_one,
                            std::map<std::string, ErrorTrace>* traces) {
  if (!model.prior) throw ConfigError("inference model has no prior");
  if (config.iterations <= config.warmup || config.warmup < 0 || config.thin < 1)
    throw ConfigError("iterations must exceed warmup and thin must be positive");
  const AlphaPrior& prior = *model.prior;
  model.hyper.validate();
  const auto& free = prior.free_indices();

  std::vector<const ObservationGroup*> groups;
  for (const auto& g : model.groups) groups.push_back(&g);
  std::sort(groups.begin(), groups.end(), [](auto* a, auto* b) { return a->id < b->id; });
  std::vector<ErrorParams> errors;
  std::vector<GroupLikelihood> likes;
  for (auto* g : groups) {
    const auto it = model.errors.find(g->id);
    if (it == model.errors.end()) throw ConfigError("no error parameters for group '" + g->id + "'");
    it->second.validate();
    errors.push_back(it->second);
    likes.push_back(make_group_likelihood(*g, it->second, free));
  }
  std::vector<double> gamma;
  std::vector<Eigen::VectorXd> pi;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    gamma.push_back(errors[g].gamma);
    pi.push_back(Eigen::VectorXd::Zero(groups[g]->bias.design.cols()));
  }
  std::vector<bool> estimate(groups.size(), false);
  if (stage_one)
    for (std::size_t g = 0; g < groups.size(); ++g)
      estimate[g] = std::find(stage_one->groups.begin(), stage_one->groups.end(), groups[g]->id) !=
                    stage_one->groups.end();

  const Eigen::VectorXd d = model.constraints.d;
  const Eigen::MatrixXd phi = model.constraints.size() ? model.constraints.phi_free(free)
                                                      : Eigen::MatrixXd(0, static_cast<Eigen::Index>(free.size()));
  Eigen::VectorXd alpha = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(free.size()));
  if (d.size() > 0) alpha = feasible_point(d, phi, alpha);

  AlphaCovarianceParams p = config.initial;
  p.validate();
  const auto active = prior.active_parameters();
  Rng rng = make_rng(config.seed, "gibbs");

  PosteriorSamples out;
  out.free_indices = free;
  out.full_size = prior.reparameterization().dimension();
  out.hyper_names = active;
  for (auto* g : groups) out.group_ids.push_back(g->id);
  const int stored = (config.iterations - config.warmup + config.thin - 1) / config.thin;
  out.alpha.resize(stored, static_cast<Eigen::Index>(free.size()));
  out.hyper.resize(stored, static_cast<Eigen::Index>(active.size()));
  out.gamma.resize(stored, static_cast<Eigen::Index>(groups.size()));
  for (auto* g : groups) out.pi.emplace_back(stored, g->bias.design.cols());
  out.min_constraint_slack = std::numeric_limits<double>::infinity();
  long long reflections = 0;
  int row = 0;

  for (int it = 0; it < config.iterations; ++it) {
    const auto target = alpha_conditional(prior.precision_free(p), likes, gamma, pi, d, phi);
    HmcDiagnostics diag;
    alpha = exact_hmc_step(target, alpha, rng, config.hmc, &diag);
    reflections += diag.reflections;
    out.hmc_aborts += diag.aborted;

    if (config.sample_hyper) {
      for (auto h : active) {
        auto logf = [&](double v) {
          auto q = p;
          q.set(h, v);
          return prior.log_density(alpha, q, h) + model.hyper.log_density(h, v);
        };
        const double v = is_precision(h) ? slice_sample_log_step(logf, p.get(h), config.slice_width_log, rng)
                                         : slice_sample_step(logf, p.get(h), config.slice_width_unit, rng);
        p.set(h, v);
      }
    }
    for (std::size_t g = 0; g < groups.size(); ++g) {
      if (stage_one && estimate[g]) {
        const Eigen::VectorXd r = likes[g].residual(alpha, pi[g]);
        auto loglik = [&](const ErrorParams& e) {
          try {
            return ErrorCovariance(*groups[g], e).log_likelihood(r);
          } catch (const NumericalError&) {
            return kNegInf;
          }
        };
        ErrorParams e = errors[g];
        e.gamma = gamma[g];
        if (!e.rho_fixed) {
          auto logf = [&](double v) {
            if (!(v >= 0.0 && v <= 1.0)) return kNegInf;
            auto q = e;
            q.rho = v;
            double lp = 0.0;
            if (stage_one->rho_prior.a != 1.0) lp += (stage_one->rho_prior.a - 1.0) * std::log(v);
            if (stage_one->rho_prior.b != 1.0) lp += (stage_one->rho_prior.b - 1.0) * std::log1p(-v);
            return loglik(q) + lp;
          };
          e.rho = slice_sample_step(logf, e.rho, config.slice_width_unit, rng);
        }
        const double rate =
            is_satellite_group(groups[g]->id) ? stage_one->length_rate_satellite : stage_one->length_rate_in_situ;
        if (e.length > 0.0) {
          auto logf = [&](double v) {
            auto q = e;
            q.length = v;
            return loglik(q) - rate * v;
          };
          e.length = slice_sample_log_step(logf, e.length, stage_one->slice_width_length, rng);
        }
        errors[g].rho = e.rho;
        errors[g].length = e.length;
        likes[g] = make_group_likelihood(*groups[g], errors[g], free);
        if (traces && it >= config.warmup) {
          (*traces)[groups[g]->id].rho.push_back(e.rho);
          (*traces)[groups[g]->id].length.push_back(e.length);
        }
      }
      if (config.sample_gamma) {
        const double q = likes[g].covariance.unscaled_quadratic(likes[g].residual(alpha, pi[g]));
        gamma[g] = gamma_conditional_step(model.hyper.gamma, likes[g].size(), q, rng);
      }
      if (likes[g].bias.cols() > 0)
        pi[g] = bias_conditional_step(likes[g], alpha, gamma[g], model.hyper.sigma_pi2, rng);
    }

    if (it >= config.warmup && (it - config.warmup) % config.thin == 0) {
      out.iterations.push_back(it);
      out.alpha.row(row) = alpha.transpose();
      for (std::size_t k = 0; k < active.size(); ++k) out.hyper(row, static_cast<Eigen::Index>(k)) = p.get(active[k]);
      for (std::size_t g = 0; g < groups.size(); ++g) {
        out.gamma(row, static_cast<Eigen::Index>(g)) = gamma[g];
        if (pi[g].size() > 0) out.pi[g].row(row) = pi[g].transpose();
      }
      if (d.size() > 0) out.min_constraint_slack = std::min(out.min_constraint_slack, (d + phi * alpha).minCoeff());
      ++row;
    }
  }
  out.mean_reflections = static_cast<double>(reflections) / config.iterations;
  return out;
}

}  // namespace

PosteriorSamples run_gibbs(const InferenceModel& model, const GibbsConfig& config) {
  return gibbs_core(model, config, nullptr, nullptr);
}

std::map<std::string, ErrorParams> stage_one_estimate(const InferenceModel& model, const StageOneConfig& config) {
  std::map<std::string, ErrorParams> out = model.errors;
  if (config.groups.empty()) return out;
  for (const auto& id : config.groups)
    if (!out.count(id)) throw ConfigError("stage one lists unknown group '" + id + "'");
  std::map<std::string, ErrorTrace> traces;
  gibbs_core(model, config.gibbs, &config, &traces);
  for (const auto& [id, tr] : traces) {
    auto& e = out[id];
    double rho = 0.0, len = 0.0;
    for (double v : tr.rho) rho += v;
    for (double v : tr.length) len += v;
    if (!e.rho_fixed && !tr.rho.empty()) e.rho = rho / static_cast<double>(tr.rho.size());
    if (!tr.length.empty()) e.length = len / static_cast<double>(tr.length.size());
  }
  return out;
}

// ---------------------------------------------------------------- output

std::string format_alpha_samples(const PosteriorSamples& s) {
  std::string out = "iteration";
  for (auto i : s.free_indices) out += ",alpha_" + std::to_string(i);
  out += "\n";
  for (std::size_t r = 0; r < s.draws(); ++r) {
    out += std::to_string(s.iterations[r]);
    for (Eigen::Index j = 0; j < s.alpha.cols(); ++j) out += "," + format_double(s.alpha(static_cast<Eigen::Index>(r), j));
    out += "\n";
  }
  return out;
}

std::string format_parameter_samples(const PosteriorSamples& s) {
  std::string out = "iteration";
  for (auto h : s.hyper_names) out += "," + hyper_name(h);
  for (const auto& g : s.group_ids) out += ",gamma:" + g;
  out += "\n";
  for (std::size_t r = 0; r < s.draws(); ++r) {
    const auto rr = static_cast<Eigen::Index>(r);
    out += std::to_string(s.iterations[r]);
    for (Eigen::Index j = 0; j < s.hyper.cols(); ++j) out += "," + format_double(s.hyper(rr, j));
    for (Eigen::Index j = 0; j < s.gamma.cols(); ++j) out += "," + format_double(s.gamma(rr, j));
    out += "\n";
  }
  return out;
}

std::string format_diagnostics(const PosteriorSamples& s) {
  std::string out = "parameter,ess\n";
  for (const auto& [name, ess] : s.ess()) out += name + "," + format_double(ess) + "\n";
  out += "hmc_aborts," + std::to_string(s.hmc_aborts) + "\n";
  out += "mean_reflections," + format_double(s.mean_reflections) + "\n";
  return out;
}

}  // namespace fluxinv
