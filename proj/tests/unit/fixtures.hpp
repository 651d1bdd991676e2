#pragma once

// Small synthetic worlds shared by unit tests.

#include <cmath>
#include <memory>
#include <numbers>
#include <random>

#include "fluxinv/decomposition.hpp"
#include "fluxinv/grid.hpp"

namespace fluxinv::testing {

struct ToyWorld {
  std::shared_ptr<const SpatialGrid> grid;
  std::shared_ptr<const RegionPartition> regions;
  std::shared_ptr<const TimePartition> periods;
  BottomUpFields fields;
  std::shared_ptr<FluxBasisSet> basis;
};

/// n_lat x n_lon grid split into `region_count` regions by longitude column,
/// `period_count` periods of `period_days` days, daily samples over a fit span of
/// three years. Gpp is negative, resp positive, both with annual cycles.
inline ToyWorld make_toy_world(int n_lat = 2, int n_lon = 3, int region_count = 2, int period_count = 3,
                               double period_days = 10.0, unsigned seed = 7,
                               std::array<int, 3> harmonics = {3, 3, 2}) {
  ToyWorld w;
  auto grid = SpatialGrid::regular(n_lat, n_lon, -60.0, 60.0, -180.0, 180.0);
  std::vector<int> ids(grid.size());
  for (std::size_t s = 0; s < grid.size(); ++s)
    ids[s] = static_cast<int>((s % static_cast<std::size_t>(n_lon)) * region_count / n_lon) + 1;
  std::vector<RegionInfo> info;
  for (int r = 1; r <= region_count; ++r) info.push_back({"R" + std::to_string(r), "", RegionType::Land});
  for (std::size_t s = 0; s < grid.size(); ++s) grid.set_land_fraction(CellId{s}, 1.0);
  w.grid = std::make_shared<SpatialGrid>(std::move(grid));
  w.regions = std::make_shared<RegionPartition>(ids, info);
  std::vector<double> b;
  for (int q = 0; q <= period_count; ++q) b.push_back(q * period_days);
  w.periods = std::make_shared<TimePartition>(b);

  const std::size_t n = 3 * 365;
  w.fields.axis = TimeAxis{0.5, 1.0, n};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.1);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  const auto cells = static_cast<Eigen::Index>(w.grid->size());
  for (const char* name : {"gpp", "resp", "ocean", "other"}) w.fields.fields[name] = Eigen::MatrixXd(cells, n);
  for (Eigen::Index s = 0; s < cells; ++s) {
    const double amp = u(rng), base = u(rng), phase = u(rng);
    for (std::size_t i = 0; i < n; ++i) {
      const double t = w.fields.axis.time(i);
      const double season = std::cos(2 * std::numbers::pi * t / 365.25 + phase);
      const auto ii = static_cast<Eigen::Index>(i);
      w.fields.fields["gpp"](s, ii) = -base * (3.0 + 2.0 * season) * (1 + 1e-4 * t) + noise(rng);
      w.fields.fields["resp"](s, ii) = base * (2.5 + 1.0 * season) + noise(rng);
      w.fields.fields["ocean"](s, ii) = -0.2 * amp + 0.1 * season + 0.5 * noise(rng);
      w.fields.fields["other"](s, ii) = 0.05 * amp;
    }
  }
  std::array<DecompositionCoefficients, 3> comps{
      fit_decomposition(w.fields.axis, w.fields.at("gpp"), harmonics[0]),
      fit_decomposition(w.fields.axis, w.fields.at("resp"), harmonics[1]),
      fit_decomposition(w.fields.axis, w.fields.at("ocean"), harmonics[2])};
  w.basis = std::make_shared<FluxBasisSet>(build_basis(w.grid, w.regions, w.periods, std::move(comps),
                                                       SampledField{w.fields.axis, w.fields.at("other")}));
  return w;
}

}  // namespace fluxinv::testing
