#include "fluxinv/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace fluxinv {

void ErrorParams::validate() const {
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw DomainError("error scaling gamma must be positive");
  if (!(rho >= 0.0 && rho <= 1.0)) throw DomainError("correlated share rho must lie in [0, 1]");
  if (!(length >= 0.0) || !std::isfinite(length)) throw DomainError("e-folding length must be non-negative");
}

ErrorParams default_error_params(const std::string& group, double length) {
  ErrorParams p;
  p.length = length;
  if (is_satellite_group(group)) {
    p.rho = 0.5;
    p.rho_fixed = false;
  } else {
    p.rho = 1.0;
    p.rho_fixed = true;
  }
  return p;
}

Eigen::VectorXd BiasModel::bias(Eigen::Index n) const {
  if (!enabled()) return Eigen::VectorXd::Zero(n);
  if (design.rows() != n || coefficients.size() != design.cols())
    throw DomainError("bias design does not match the group");
  return design * coefficients;
}

void ObservationGroup::validate() const {
  const auto n = values.size();
  if (baseline.size() != n || budgets.size() != n || static_cast<Eigen::Index>(series.size()) != n ||
      static_cast<Eigen::Index>(times.size()) != n || response.rows() != n)
    throw DomainError("observation group '" + id + "' has inconsistent lengths");
  if (!obs_ids.empty() && static_cast<Eigen::Index>(obs_ids.size()) != n)
    throw DomainError("observation group '" + id + "' has inconsistent id list");
  for (Eigen::Index i = 0; i < n; ++i)
    if (!(budgets(i) > 0.0)) throw DomainError("observation group '" + id + "' has a non-positive error budget");
  if (bias.enabled() && bias.design.rows() != n) throw DomainError("bias design of '" + id + "' has wrong rows");
}

std::vector<ObservationGroup> build_groups(std::span<const ObservationRecord> records,
                                           const Eigen::MatrixXd& response, const Eigen::VectorXd& baseline) {
  const auto n = static_cast<Eigen::Index>(records.size());
  if (response.rows() != n || baseline.size() != n) throw DomainError("response rows do not match the records");
  std::map<std::string, std::vector<Eigen::Index>> rows;
  for (Eigen::Index i = 0; i < n; ++i) rows[records[static_cast<std::size_t>(i)].group].push_back(i);
  std::vector<ObservationGroup> out;
  for (const auto& [id, idx] : rows) {
    ObservationGroup g;
    g.id = id;
    const auto m = static_cast<Eigen::Index>(idx.size());
    g.values.resize(m);
    g.baseline.resize(m);
    g.budgets.resize(m);
    g.response.resize(m, response.cols());
    for (Eigen::Index k = 0; k < m; ++k) {
      const auto& rec = records[static_cast<std::size_t>(idx[static_cast<std::size_t>(k)])];
      g.values(k) = rec.value;
      g.baseline(k) = baseline(idx[static_cast<std::size_t>(k)]);
      g.budgets(k) = rec.error_budget;
      g.series.push_back(rec.series_id);
      g.times.push_back(rec.time);
      g.obs_ids.push_back(rec.obs_id);
      g.cells.push_back(rec.cell);
      g.response.row(k) = response.row(idx[static_cast<std::size_t>(k)]);
    }
    g.validate();
    out.push_back(std::move(g));
  }
  return out;
}

SifResponse sif_response(const SifLinkModel& model, const FluxBasisSet& basis,
                         std::span<const ObservationRecord> records) {
  const auto& layout = basis.layout();
  const auto n = static_cast<Eigen::Index>(records.size());
  SifResponse out;
  out.rows = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(layout.size()));
  out.baseline = Eigen::VectorXd::Zero(n);
  out.valid.assign(records.size(), false);
  const auto off = static_cast<Eigen::Index>(layout.offset(Component::Gpp));
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(layout.component_size(Component::Gpp)));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& rec = records[static_cast<std::size_t>(i)];
    const auto pred = predict_sif(model, basis, zero, CellId{rec.cell}, rec.time);
    if (!pred) continue;
    out.valid[static_cast<std::size_t>(i)] = true;
    out.baseline(i) = *pred;
    for (const auto& e : sensitivity_vector(model, basis, CellId{rec.cell}, rec.time).entries)
      out.rows(i, off + static_cast<Eigen::Index>(e.index)) += e.value;
  }
  return out;
}

// ---------------------------------------------------------------- covariance

ErrorCovariance::ErrorCovariance(const ObservationGroup& group, const ErrorParams& params)
    : n_(group.size()), gamma_(params.gamma) {
  params.validate();
  if (group.budgets.size() != static_cast<Eigen::Index>(n_) || group.times.size() != n_ || group.series.size() != n_)
    throw DomainError("observation group '" + group.id + "' has inconsistent lengths");
  std::map<std::string, std::vector<Eigen::Index>> by_series;
  for (std::size_t i = 0; i < n_; ++i) by_series[group.series[i]].push_back(static_cast<Eigen::Index>(i));

  const bool correlated = params.rho > 0.0 && params.length > 0.0;
  for (auto& [sid, rows] : by_series) {
    std::stable_sort(rows.begin(), rows.end(), [&](Eigen::Index a, Eigen::Index b) {
      return group.times[static_cast<std::size_t>(a)] < group.times[static_cast<std::size_t>(b)];
    });
    // Exponential correlation is a product along sorted times, so a single
    // underflowed link separates the series exactly.
    std::vector<std::vector<Eigen::Index>> pieces{{rows.front()}};
    for (std::size_t k = 1; k < rows.size(); ++k) {
      const double gap = group.times[static_cast<std::size_t>(rows[k])] - group.times[static_cast<std::size_t>(rows[k - 1])];
      const bool linked = correlated && std::exp(-gap / params.length) > 0.0;
      if (linked) pieces.back().push_back(rows[k]);
      else pieces.push_back({rows[k]});
    }
    for (auto& piece : pieces) {
      const auto m = static_cast<Eigen::Index>(piece.size());
      Eigen::MatrixXd c(m, m);
      for (Eigen::Index i = 0; i < m; ++i) {
        const auto ii = piece[static_cast<std::size_t>(i)];
        const double vi = group.budgets(ii);
        for (Eigen::Index j = 0; j <= i; ++j) {
          const auto jj = piece[static_cast<std::size_t>(j)];
          double v = 0.0;
          if (correlated) {
            const double lag = std::abs(group.times[static_cast<std::size_t>(ii)] - group.times[static_cast<std::size_t>(jj)]);
            v = params.rho * std::sqrt(vi * group.budgets(jj)) * std::exp(-lag / params.length);
          } else if (i == j) {
            v = params.rho * vi;
          }
          if (i == j) v += (1.0 - params.rho) * vi;
          c(i, j) = c(j, i) = v;
        }
      }
      Block b{std::move(piece), c, Eigen::LLT<Eigen::MatrixXd>(c)};
      if (b.chol.info() != Eigen::Success)
        throw NumericalError("error covariance of series '" + sid + "' in group '" + group.id +
                             "' is not positive definite");
      blocks_.push_back(std::move(b));
    }
  }
}

Eigen::MatrixXd ErrorCovariance::dense() const {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(n_));
  for (const auto& b : blocks_) {
    for (std::size_t i = 0; i < b.rows.size(); ++i)
      for (std::size_t j = 0; j < b.rows.size(); ++j)
        out(b.rows[i], b.rows[j]) = b.c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) / gamma_;
  }
  return out;
}

namespace {
Eigen::VectorXd gather(const Eigen::VectorXd& v, const std::vector<Eigen::Index>& rows) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) out(static_cast<Eigen::Index>(i)) = v(rows[i]);
  return out;
}
Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& m, const std::vector<Eigen::Index>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}
}  // namespace

Eigen::VectorXd ErrorCovariance::solve(const Eigen::VectorXd& v) const {
  if (v.size() != static_cast<Eigen::Index>(n_)) throw DomainError("vector length does not match the covariance");
  Eigen::VectorXd out(v.size());
  for (const auto& b : blocks_) {
    const Eigen::VectorXd x = b.chol.solve(gather(v, b.rows)) * gamma_;
    for (std::size_t i = 0; i < b.rows.size(); ++i) out(b.rows[i]) = x(static_cast<Eigen::Index>(i));
  }
  return out;
}

double ErrorCovariance::unscaled_quadratic(const Eigen::VectorXd& r) const {
  if (r.size() != static_cast<Eigen::Index>(n_)) throw DomainError("residual length does not match the covariance");
  double q = 0.0;
  for (const auto& b : blocks_) q += b.chol.matrixL().solve(gather(r, b.rows)).squaredNorm();
  return q;
}

Eigen::MatrixXd ErrorCovariance::unscaled_gram(const Eigen::MatrixXd& m) const {
  if (m.rows() != static_cast<Eigen::Index>(n_)) throw DomainError("matrix rows do not match the covariance");
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(m.cols(), m.cols());
  for (const auto& b : blocks_) {
    const Eigen::MatrixXd w = b.chol.matrixL().solve(gather_rows(m, b.rows));
    out.selfadjointView<Eigen::Lower>().rankUpdate(w.transpose());
  }
  return out.selfadjointView<Eigen::Lower>();
}

Eigen::VectorXd ErrorCovariance::unscaled_cross(const Eigen::MatrixXd& m, const Eigen::VectorXd& r) const {
  if (m.rows() != static_cast<Eigen::Index>(n_) || r.size() != static_cast<Eigen::Index>(n_))
    throw DomainError("inputs do not match the covariance");
  Eigen::VectorXd out = Eigen::VectorXd::Zero(m.cols());
  for (const auto& b : blocks_) out += gather_rows(m, b.rows).transpose() * b.chol.solve(gather(r, b.rows));
  return out;
}

double ErrorCovariance::log_det() const {
  double s = -static_cast<double>(n_) * std::log(gamma_);
  for (const auto& b : blocks_) s += 2.0 * b.chol.matrixLLT().diagonal().array().log().sum();
  return s;
}

double ErrorCovariance::log_likelihood(const Eigen::VectorXd& r) const {
  return -0.5 * (gamma_ * unscaled_quadratic(r) + log_det());
}

Eigen::VectorXd ErrorCovariance::sample(Rng& rng) const {
  std::normal_distribution<double> z;
  Eigen::VectorXd out(static_cast<Eigen::Index>(n_));
  const double scale = 1.0 / std::sqrt(gamma_);
  for (const auto& b : blocks_) {
    Eigen::VectorXd e(static_cast<Eigen::Index>(b.rows.size()));
    for (Eigen::Index i = 0; i < e.size(); ++i) e(i) = z(rng);
    const Eigen::VectorXd x = b.chol.matrixL() * e;
    for (std::size_t i = 0; i < b.rows.size(); ++i) out(b.rows[i]) = scale * x(static_cast<Eigen::Index>(i));
  }
  return out;
}

Eigen::VectorXd simulate_observations(const ObservationGroup& group, const Eigen::VectorXd& truth,
                                      const ErrorParams& params, Rng& rng) {
  if (truth.size() != static_cast<Eigen::Index>(group.size())) throw DomainError("truth length does not match the group");
  return truth + ErrorCovariance(group, params).sample(rng);
}

Eigen::VectorXd group_residual(const ObservationGroup& group, const Eigen::VectorXd& alpha, const Eigen::VectorXd& pi) {
  if (alpha.size() != group.response.cols()) throw DomainError("alpha length does not match the response matrix");
  Eigen::VectorXd r = group.values - group.baseline - group.response * alpha;
  if (group.bias.enabled()) {
    if (pi.size() != group.bias.design.cols()) throw DomainError("bias coefficients do not match the design");
    r -= group.bias.design * pi;
  }
  return r;
}

}  // namespace fluxinv
