#include "fluxinv/cli.hpp"

#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <algorithm>
#include <iostream>
#include <json.hpp>
#include <set>

#include "fluxinv/data_model.hpp"
#include "fluxinv/decomposition.hpp"
#include "fluxinv/evaluation.hpp"
#include "fluxinv/util.hpp"

#ifndef FLUXINV_VERSION_STRING
#define FLUXINV_VERSION_STRING "unknown"
#endif

namespace fluxinv::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------- json reading

/// Object view that records which keys were read, so leftovers can be rejected.
class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  T get(const std::string& key, T fallback) {
    if (!j_.contains(key)) return fallback;
    return as<T>(key);
  }
  template <class T>
  T require(const std::string& key) {
    if (!j_.contains(key)) throw ConfigError(where_ + ": missing required key '" + key + "'");
    return as<T>(key);
  }
  std::optional<Section> child(const std::string& key) {
    if (!j_.contains(key)) return std::nullopt;
    used_.insert(key);
    return Section(j_.at(key), where_ + "." + key);
  }
  std::string where(const std::string& key) const { return where_ + "." + key; }

  /// Throws ConfigError naming the first key that was never read.
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!used_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
  }

 private:
  template <class T>
  T as(const std::string& key) {
    used_.insert(key);
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where_ + "." + key + ": wrong type");
    }
  }

  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

GammaPrior read_gamma(Section s, GammaPrior fallback) {
  GammaPrior g{s.get("shape", fallback.shape), s.get("rate", fallback.rate)};
  s.finish();
  if (!(g.shape > 0.0) || !(g.rate > 0.0)) throw ConfigError(s.where("shape") + ": gamma prior needs shape, rate > 0");
  return g;
}

BetaPrior read_beta(Section s, BetaPrior fallback) {
  BetaPrior b{s.get("a", fallback.a), s.get("b", fallback.b)};
  s.finish();
  if (!(b.a > 0.0) || !(b.b > 0.0)) throw ConfigError(s.where("a") + ": beta prior needs a, b > 0");
  return b;
}

void read_hyperpriors(Section& parent, Hyperpriors& h) {
  auto s = parent.child("hyperpriors");
  if (!s) return;
  if (auto c = s->child("tau_beta")) h.tau_beta = read_gamma(*c, h.tau_beta);
  if (auto c = s->child("tau_eps")) h.tau_eps = read_gamma(*c, h.tau_eps);
  if (auto c = s->child("gamma")) h.gamma = read_gamma(*c, h.gamma);
  if (auto c = s->child("rho")) h.rho = read_beta(*c, h.rho);
  if (auto c = s->child("kappa")) h.kappa = read_beta(*c, h.kappa);
  h.sigma_pi2 = s->get("sigma_pi2", h.sigma_pi2);
  s->finish();
}

void read_prior(Section& parent, PriorSettings& p) {
  auto s = parent.child("prior");
  if (!s) return;
  p.linear_variance = s->get("linear_variance", p.linear_variance);
  p.trend_variance = s->get("trend_variance", p.trend_variance);
  p.ocean_inflation = s->get("ocean_inflation", p.ocean_inflation);
  s->finish();
}

void read_transport(Section& parent, ToyTransportConfig& t) {
  auto s = parent.child("transport");
  if (!s) return;
  t.dt = s->get("dt", t.dt);
  t.zonal_wind = s->get("zonal_wind", t.zonal_wind);
  t.diffusivity = s->get("diffusivity", t.diffusivity);
  t.atmosphere_mass = s->get("atmosphere_mass", t.atmosphere_mass);
  t.initial_value = s->get("initial_value", t.initial_value);
  t.point_window = s->get("point_window", t.point_window);
  s->finish();
}

void read_budget(Section& s, GibbsConfig& g) {
  g.iterations = s.get("iterations", g.iterations);
  g.warmup = s.get("warmup", g.warmup);
  g.thin = s.get("thin", g.thin);
  if (g.iterations <= g.warmup || g.warmup < 0 || g.thin < 1)
    throw ConfigError(s.where("iterations") + ": need iterations > warmup >= 0 and thin >= 1");
}

std::array<int, kComponentCount> read_harmonics(Section& s, std::array<int, kComponentCount> fallback) {
  if (!s.has("harmonics")) return fallback;
  const auto v = s.require<std::vector<int>>("harmonics");
  if (v.size() != kComponentCount) throw ConfigError(s.where("harmonics") + ": expected gpp, resp, ocean counts");
  for (int k : v)
    if (k < 0) throw ConfigError(s.where("harmonics") + ": counts must be >= 0");
  return {v[0], v[1], v[2]};
}

void check_schema(Section& s) {
  const int v = s.require<int>("schema_version");
  if (v != kSchemaVersion)
    throw ConfigError(s.where("schema_version") + ": unsupported version " + std::to_string(v) + " (expected " +
                      std::to_string(kSchemaVersion) + ")");
}

json parse_json(const std::string& text, const std::string& where) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(where + ": invalid JSON: " + e.what());
  }
}

std::uint64_t canonical_hash(const json& j) { return Hasher().str(j.dump()).value(); }

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

fs::path stage_dir(const RunConfig& c, const char* stage) { return c.output / stage; }

const fs::path& need(const std::optional<fs::path>& p, const char* name) {
  if (!p) throw ConfigError(std::string("config has no input '") + name + "'");
  return *p;
}

std::uint64_t basis_input_hash(const RunConfig& c) {
  Hasher h;
  h.str("basis-cache/1").str(read_file(need(c.grid, "grid"))).str(read_file(need(c.bottom_up, "bottom_up")));
  for (int k : c.harmonics) h.u64(static_cast<std::uint64_t>(k));
  h.u64(static_cast<std::uint64_t>(c.start_year)).u64(c.start_month).u64(static_cast<std::uint64_t>(c.months));
  return h.value();
}

struct Loaded {
  std::shared_ptr<const SpatialGrid> grid;
  std::shared_ptr<const RegionPartition> regions;
  std::shared_ptr<const TimePartition> periods;
};

Loaded load_geometry(const RunConfig& c) {
  auto gf = read_grid_file(need(c.grid, "grid"));
  return {std::make_shared<SpatialGrid>(std::move(gf.grid)), std::make_shared<RegionPartition>(std::move(gf.regions)),
          std::make_shared<TimePartition>(c.periods())};
}

bool is_sif_group(const std::string& g) { return g == "oco2-sif"; }

PosteriorSamples thinned(const PosteriorSamples& s, int every) {
  PosteriorSamples out;
  out.free_indices = s.free_indices;
  out.full_size = s.full_size;
  std::vector<Eigen::Index> keep;
  for (std::size_t r = 0; r < s.draws(); r += static_cast<std::size_t>(std::max(every, 1)))
    keep.push_back(static_cast<Eigen::Index>(r));
  out.alpha.resize(static_cast<Eigen::Index>(keep.size()), s.alpha.cols());
  for (std::size_t k = 0; k < keep.size(); ++k) {
    out.alpha.row(static_cast<Eigen::Index>(k)) = s.alpha.row(keep[k]);
    out.iterations.push_back(s.iterations[static_cast<std::size_t>(keep[k])]);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------- config

RunConfig parse_run_config(const std::string& json_text, const fs::path& base_dir) {
  const json doc = parse_json(json_text, "config");
  Section s(doc, "config");
  check_schema(s);
  RunConfig c;
  c.seed = s.require<std::uint64_t>("seed");
  c.output = resolve(base_dir, s.require<std::string>("output"));
  c.jobs = s.get("jobs", c.jobs);
  if (c.jobs < 1) throw ConfigError("config.jobs: must be >= 1");

  auto input = [&](Section& sec, const char* key, std::optional<fs::path>& dst) {
    if (!sec.has(key)) return;
    const fs::path p = resolve(base_dir, sec.require<std::string>(key));
    if (!fs::exists(p)) throw ConfigError(sec.where(key) + ": file not found: " + p.string());
    dst = p;
  };
  if (auto in = s.child("inputs")) {
    input(*in, "grid", c.grid);
    input(*in, "bottom_up", c.bottom_up);
    input(*in, "sif_pairs", c.sif_pairs);
    input(*in, "observations", c.observations);
    input(*in, "truth", c.truth);
    in->finish();
  }
  if (auto o = s.child("osse")) {
    input(*o, "manifest", c.osse_manifest);
    o->finish();
  }
  if (auto cal = s.child("calendar")) {
    c.start_year = cal->get("start_year", c.start_year);
    c.start_month = cal->get("start_month", c.start_month);
    c.months = cal->get("months", c.months);
    cal->finish();
    if (c.start_month < 1 || c.start_month > 12 || c.months < 1)
      throw ConfigError("config.calendar: start_month in 1..12 and months >= 1 required");
  }
  c.harmonics = read_harmonics(s, c.harmonics);
  if (auto f = s.child("fixed_terms")) {
    c.fixed.infer_rlt = f->get("infer_rlt", c.fixed.infer_rlt);
    c.fixed.rlt_fixed_regions = f->get("rlt_fixed_regions", c.fixed.rlt_fixed_regions);
    c.fixed.small_land_regions = f->get("small_land_regions", c.fixed.small_land_regions);
    f->finish();
  }
  if (auto v = s.child("sif_validity")) {
    auto& cfg = c.validity;
    cfg.sif_threshold = v->get("sif_threshold", cfg.sif_threshold);
    cfg.min_count = v->get("min_count", cfg.min_count);
    cfg.anova_level = v->get("anova_level", cfg.anova_level);
    cfg.min_correlation = v->get("min_correlation", cfg.min_correlation);
    cfg.min_intercept = v->get("min_intercept", cfg.min_intercept);
    cfg.orientation = v->get("orientation", cfg.orientation);
    v->finish();
  }
  read_transport(s, c.transport);
  read_prior(s, c.prior);
  read_hyperpriors(s, c.hyper);
  if (auto g = s.child("gibbs")) {
    read_budget(*g, c.gibbs);
    g->finish();
  }
  if (auto g = s.child("stage_one")) {
    read_budget(*g, c.stage_one.gibbs);
    c.stage_one.groups = g->get("groups", c.stage_one.groups);
    g->finish();
  }
  c.ess_floor = s.get("ess_floor", c.ess_floor);
  if (auto e = s.child("error_lengths")) {
    c.length_in_situ = e->get("in_situ", c.length_in_situ);
    c.length_satellite = e->get("satellite", c.length_satellite);
    e->finish();
  }
  if (s.has("window")) {
    const auto w = s.require<std::vector<int>>("window");
    if (w.size() != 2) throw ConfigError("config.window: expected [first_period, last_period]");
    c.window = EvaluationWindow{w[0], w[1]};
  }
  s.finish();
  c.hash = canonical_hash(doc);
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  auto c = parse_run_config(read_file(path), path.parent_path());
  c.source = path;
  return c;
}

OsseManifest parse_osse_manifest(const std::string& json_text) {
  const json doc = parse_json(json_text, "manifest");
  Section s(doc, "manifest");
  check_schema(s);
  OsseManifest m;
  if (auto d = s.child("desk")) {
    auto& k = m.desk;
    k.months = d->get("months", k.months);
    k.start_year = d->get("start_year", k.start_year);
    k.harmonics = read_harmonics(*d, k.harmonics);
    k.seed = d->get("seed", k.seed);
    k.station_interval_days = d->get("station_interval_days", k.station_interval_days);
    k.xco2_tracks_per_month = d->get("xco2_tracks_per_month", k.xco2_tracks_per_month);
    k.sif_tracks_per_month = d->get("sif_tracks_per_month", k.sif_tracks_per_month);
    k.sif_bands_per_track = d->get("sif_bands_per_track", k.sif_bands_per_track);
    k.sif_band_variance = d->get("sif_band_variance", k.sif_band_variance);
    k.mole_fraction_budget_scale = d->get("mole_fraction_budget_scale", k.mole_fraction_budget_scale);
    k.resp_ratio_spread = d->get("resp_ratio_spread", k.resp_ratio_spread);
    read_transport(*d, k.transport);
    d->finish();
  }
  if (auto e = s.child("experiments")) {
    auto& o = m.osse;
    read_budget(*e, o.gibbs);
    o.delta = e->get("delta", o.delta);
    o.standin_seed = e->get("standin_seed", o.standin_seed);
    if (e->has("cases")) {
      o.cases.clear();
      for (const auto& name : e->require<std::vector<std::string>>("cases")) o.cases.push_back(parse_case(name));
    }
    e->finish();
  }
  read_prior(s, m.osse.prior);
  read_hyperpriors(s, m.osse.hyper);
  if (auto o = s.child("output")) {
    m.sample_output_thin = o->get("sample_thin", m.sample_output_thin);
    m.export_inputs = o->get("export_inputs", m.export_inputs);
    o->finish();
    if (m.sample_output_thin < 1) throw ConfigError("manifest.output.sample_thin: must be >= 1");
  }
  s.finish();
  m.hash = canonical_hash(doc);
  return m;
}

OsseManifest load_osse_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("manifest file not found: " + path.string());
  return parse_osse_manifest(read_file(path));
}

std::string version_string() { return FLUXINV_VERSION_STRING; }

void write_run_manifest(const fs::path& dir, const std::string& command, std::uint64_t config_hash,
                        std::uint64_t seed) {
  json m;
  m["command"] = command;
  m["config_hash"] = hex64(config_hash);
  m["schema_version"] = kSchemaVersion;
  m["seed"] = seed;
  m["version"] = version_string();
  write_file(dir / "manifest.json", m.dump(2) + "\n");
}

// ---------------------------------------------------------------- formats

std::string format_alpha_vector(const Eigen::VectorXd& alpha) {
  std::string out = "index,value\n";
  for (Eigen::Index i = 0; i < alpha.size(); ++i) out += std::to_string(i) + "," + format_double(alpha(i)) + "\n";
  return out;
}

Eigen::VectorXd read_alpha_vector(const fs::path& path, std::size_t size) {
  const auto t = read_table(path);
  const auto ci = t.column("index"), cv = t.column("value");
  Eigen::VectorXd a = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(size));
  std::vector<bool> seen(size, false);
  for (const auto& row : t.rows) {
    const auto i = parse_int(row[ci], "alpha index");
    if (i < 0 || static_cast<std::size_t>(i) >= size || seen[static_cast<std::size_t>(i)])
      throw ConfigError(path.string() + ": alpha index " + row[ci] + " out of range or repeated");
    seen[static_cast<std::size_t>(i)] = true;
    a(static_cast<Eigen::Index>(i)) = parse_double(row[cv], "alpha value");
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end())
    throw ConfigError(path.string() + ": alpha vector does not cover the layout");
  return a;
}

PosteriorSamples read_alpha_samples(const fs::path& path, std::size_t full_size) {
  const auto t = read_table(path);
  if (t.header.empty() || t.header[0] != "iteration") throw ConfigError(path.string() + ": first column must be iteration");
  PosteriorSamples s;
  s.full_size = full_size;
  for (std::size_t k = 1; k < t.header.size(); ++k) {
    const auto& h = t.header[k];
    if (h.rfind("alpha_", 0) != 0) throw ConfigError(path.string() + ": unexpected column " + h);
    const auto i = parse_int(h.substr(6), "alpha column");
    if (i < 0 || static_cast<std::size_t>(i) >= full_size) throw ConfigError(path.string() + ": column " + h + " out of range");
    s.free_indices.push_back(static_cast<std::size_t>(i));
  }
  s.alpha.resize(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(s.free_indices.size()));
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    s.iterations.push_back(static_cast<int>(parse_int(t.rows[r][0], "iteration")));
    for (std::size_t k = 0; k < s.free_indices.size(); ++k)
      s.alpha(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = parse_double(t.rows[r][k + 1], "alpha");
  }
  return s;
}

std::string format_error_params(const std::map<std::string, ErrorParams>& errors) {
  std::string out = "group,gamma,rho,length,rho_fixed\n";
  for (const auto& [g, e] : errors)
    out += g + "," + format_double(e.gamma) + "," + format_double(e.rho) + "," + format_double(e.length) + "," +
           (e.rho_fixed ? "1" : "0") + "\n";
  return out;
}

// ---------------------------------------------------------------- stages

DecomposeResult cmd_decompose(const RunConfig& config) {
  DecomposeResult res;
  res.cache = stage_dir(config, "basis") / "basis.bin";
  const auto hash = basis_input_hash(config);
  if (const auto stored = peek_basis_cache_hash(res.cache); stored && *stored == hash) {
    (void)read_basis_cache(res.cache);  // checksum
    res.cache_hit = true;
    res.dimension = load_basis(config).layout().size();
    spdlog::info("basis cache hit: {}", res.cache.string());
    return res;
  }
  const auto geo = load_geometry(config);
  const auto fields = read_bottom_up(need(config.bottom_up, "bottom_up"), geo.grid->size());
  BasisCacheContents contents;
  contents.content_hash = hash;
  const std::array<const char*, kComponentCount> names{"gpp", "resp", "ocean"};
  for (std::size_t c = 0; c < names.size(); ++c)
    contents.components[c] = fit_decomposition(fields.axis, fields.at(names[c]), config.harmonics[c]);
  contents.other = SampledField{fields.axis, fields.at("other")};
  write_basis_cache(res.cache, contents);
  write_run_manifest(stage_dir(config, "basis"), "decompose", config.hash, config.seed);
  res.dimension = load_basis(config).layout().size();
  return res;
}

FluxBasisSet load_basis(const RunConfig& config) {
  const auto path = stage_dir(config, "basis") / "basis.bin";
  if (!fs::exists(path)) throw ConfigError("basis cache not found at " + path.string() + "; run decompose first");
  auto contents = read_basis_cache(path);
  if (contents.content_hash != basis_input_hash(config))
    throw ConfigError("basis cache at " + path.string() + " is stale; rerun decompose");
  const auto geo = load_geometry(config);
  return build_basis(geo.grid, geo.regions, geo.periods, std::move(contents.components), std::move(contents.other));
}

SifLinkModel cmd_link(const RunConfig& config) {
  const auto pairs = read_sif_pairs(need(config.sif_pairs, "sif_pairs"));
  auto model = build_sif_link(pairs, config.calendar(), config.validity);
  const auto dir = stage_dir(config, "link");
  write_file(dir / "sif_link.csv", format_sif_link_report(model));
  write_run_manifest(dir, "link", config.hash, config.seed);
  return model;
}

RespondResult cmd_respond(const RunConfig& config) {
  const auto basis = load_basis(config);
  const auto records = read_observations(need(config.observations, "observations"));
  std::vector<ObservationRecord> mf, sif;
  for (const auto& r : records) (is_sif_group(r.group) ? sif : mf).push_back(r);

  RespondResult res;
  const auto dir = stage_dir(config, "respond");
  const auto cols = static_cast<Eigen::Index>(basis.layout().size());
  Eigen::MatrixXd mf_rows(0, cols), sif_rows(0, cols);
  Eigen::VectorXd mf_base(0), sif_base(0);
  if (!mf.empty()) {
    const ToyTransport op(basis.grid_ptr(), config.transport);
    mf_rows = cached_response_matrix(op, basis, mf, dir / "transport_cache.bin", config.jobs);
    mf_base = op.baseline(basis, mf);
  }
  std::vector<ObservationRecord> kept = mf;
  if (!sif.empty()) {
    const auto link_path = stage_dir(config, "link") / "sif_link.csv";
    if (!fs::exists(link_path)) throw ConfigError("SIF link not found at " + link_path.string() + "; run link first");
    auto link = read_sif_link_report(link_path, config.calendar());
    const auto fields = read_bottom_up(need(config.bottom_up, "bottom_up"), basis.grid().size());
    if (!fields.fields.count("sif")) throw ConfigError("bottom-up input has no sif component for the SIF baseline");
    link.set_bottom_up(SampledField{fields.axis, fields.at("sif")});
    const auto sr = sif_response(link, basis, sif);
    std::vector<Eigen::Index> valid;
    for (std::size_t i = 0; i < sif.size(); ++i)
      if (sr.valid[i]) {
        valid.push_back(static_cast<Eigen::Index>(i));
        kept.push_back(sif[i]);
      }
    res.dropped_sif = sif.size() - valid.size();
    sif_rows = sr.rows(valid, Eigen::all);
    sif_base = sr.baseline(valid);
  }
  JacobianFile file;
  file.layout_hash = basis.layout().hash();
  file.matrix.resize(mf_rows.rows() + sif_rows.rows(), cols);
  file.matrix << mf_rows, sif_rows;
  Eigen::VectorXd base(mf_base.size() + sif_base.size());
  base << mf_base, sif_base;
  file.baseline = base;
  write_jacobian(dir / "response.bin", file);
  write_file(dir / "observations.csv", format_observations(kept));
  write_run_manifest(dir, "respond", config.hash, config.seed);
  res.rows = kept.size();
  return res;
}

InvertResult cmd_invert(const RunConfig& config) {
  const auto basis = load_basis(config);
  const auto rdir = stage_dir(config, "respond");
  if (!fs::exists(rdir / "response.bin")) throw ConfigError("response matrix not found; run respond first");
  const auto records = read_observations(rdir / "observations.csv");
  const auto jac = read_jacobian(rdir / "response.bin");
  if (jac.layout_hash != basis.layout().hash() || !jac.baseline ||
      jac.matrix.rows() != static_cast<Eigen::Index>(records.size()))
    throw ConfigError("response matrix does not match the basis or observations; rerun respond");

  const auto aggregation = build_aggregation(basis);
  const auto linear = linear_aggregates(basis);
  AlphaLayout layout = basis.layout();
  layout.set_fixed(fixed_mask(layout, basis.regions(), config.fixed));
  auto reparam = build_reparameterization(linear, basis.periods().midpoint(), layout, basis.regions());
  const AlphaPrior prior(layout, std::move(reparam), config.prior);

  InferenceModel model;
  model.prior = &prior;
  model.hyper = config.hyper;
  model.groups = build_groups(records, jac.matrix, *jac.baseline);
  model.constraints = build_constraints(basis, aggregation);
  for (const auto& g : model.groups)
    model.errors[g.id] = default_error_params(g.id, is_satellite_group(g.id) ? config.length_satellite
                                                                             : config.length_in_situ);

  StageOneConfig s1 = config.stage_one;
  s1.gibbs.seed = substream_seed(config.seed, "stage-one");
  if (s1.groups.empty())
    for (const auto& g : model.groups) s1.groups.push_back(g.id);
  InvertResult res;
  res.errors = stage_one_estimate(model, s1);
  model.errors = res.errors;

  GibbsConfig gibbs = config.gibbs;
  gibbs.seed = substream_seed(config.seed, "invert");
  res.samples = run_gibbs(model, gibbs);
  res.min_ess = std::numeric_limits<double>::infinity();
  for (const auto& [name, ess] : res.samples.ess()) res.min_ess = std::min(res.min_ess, ess);
  res.ess_ok = res.min_ess >= config.ess_floor;

  const auto dir = stage_dir(config, "invert");
  write_file(dir / "alpha_samples.csv", format_alpha_samples(res.samples));
  write_file(dir / "parameter_samples.csv", format_parameter_samples(res.samples));
  write_file(dir / "diagnostics.csv", format_diagnostics(res.samples));
  write_file(dir / "error_params.csv", format_error_params(res.errors));
  write_run_manifest(dir, "invert", config.hash, config.seed);
  return res;
}

std::vector<ScoreRow> cmd_score(const RunConfig& config) {
  const auto basis = load_basis(config);
  const auto& layout = basis.layout();
  const auto path = stage_dir(config, "invert") / "alpha_samples.csv";
  if (!fs::exists(path)) throw ConfigError("posterior samples not found at " + path.string() + "; run invert first");
  const auto samples = read_alpha_samples(path, layout.size());
  const auto truth = read_alpha_vector(need(config.truth, "truth"), layout.size());
  const auto window = config.window.value_or(EvaluationWindow{2, layout.periods() - 1});
  const auto rows =
      score_experiment("invert", samples, truth, build_aggregation(basis), layout, basis.regions(), window);
  const auto dir = stage_dir(config, "score");
  write_file(dir / "scores.csv", format_score_table(rows));
  write_run_manifest(dir, "score", config.hash, config.seed);
  return rows;
}

std::string cmd_osse(const RunConfig& config, const OsseManifest& manifest) {
  DeskScenarioConfig desk = manifest.desk;
  desk.jobs = config.jobs;
  const auto scenario = build_desk_scenario(desk);
  OsseConfig oc = manifest.osse;
  oc.seed = config.seed;
  oc.jobs = config.jobs;
  const auto grid = run_experiment_grid(scenario, oc);
  const auto report = format_osse_report(grid);

  const auto dir = stage_dir(config, "osse");
  const std::size_t setups = grid.experiments.size() / std::max<std::size_t>(grid.truths.size(), 1);
  for (std::size_t k = 0; k < grid.experiments.size(); ++k) {
    const auto& e = grid.experiments[k];
    const auto edir = dir / e.id;
    write_file(edir / "observations.csv", format_observations(grid.data[k / setups]));
    write_file(edir / "samples.csv", format_alpha_samples(thinned(e.samples, manifest.sample_output_thin)));
    write_file(edir / "scores.csv", format_score_table(e.scores));
  }
  write_file(dir / "report.txt", report);
  write_run_manifest(dir, "osse", Hasher().u64(config.hash).u64(manifest.hash).value(), config.seed);
  if (manifest.export_inputs) export_desk_inputs(scenario, grid, oc, config.seed, dir / "inputs");
  return report;
}

void export_desk_inputs(const DeskScenario& sc, const ExperimentGrid& grid, const OsseConfig& osse,
                        std::uint64_t seed, const fs::path& dir) {
  write_file(dir / "grid.csv", format_grid_file(*sc.grid, *sc.regions));
  write_file(dir / "bottom_up.csv", format_bottom_up(sc.fields));
  write_file(dir / "sif_pairs.csv", format_sif_pairs(sc.sif_pairs));
  for (const auto& t : grid.truths) {
    const auto name = case_name(t.tag);
    const auto c = static_cast<std::size_t>(&t - grid.truths.data());
    write_file(dir / ("observations_" + name + ".csv"), format_observations(grid.data[c]));
    write_file(dir / ("truth_" + name + ".csv"), format_alpha_vector(t.alpha));
  }
  const auto first = grid.truths.empty() ? std::string("bottom-up") : case_name(grid.truths.front().tag);
  const auto& k = sc.config;
  json cfg;
  cfg["schema_version"] = kSchemaVersion;
  cfg["seed"] = seed;
  cfg["output"] = "pipeline";
  cfg["inputs"] = {{"grid", "grid.csv"},
                   {"bottom_up", "bottom_up.csv"},
                   {"sif_pairs", "sif_pairs.csv"},
                   {"observations", "observations_" + first + ".csv"},
                   {"truth", "truth_" + first + ".csv"}};
  cfg["calendar"] = {{"start_year", k.start_year}, {"start_month", 1}, {"months", k.months}};
  cfg["harmonics"] = std::vector<int>(k.harmonics.begin(), k.harmonics.end());
  cfg["fixed_terms"] = {{"infer_rlt", true}, {"rlt_fixed_regions", std::vector<int>{sc.rlt_fixed_region}}};
  cfg["sif_validity"] = {{"orientation", -1.0}};
  cfg["transport"] = {{"dt", k.transport.dt},
                      {"zonal_wind", k.transport.zonal_wind},
                      {"diffusivity", k.transport.diffusivity},
                      {"atmosphere_mass", k.transport.atmosphere_mass},
                      {"initial_value", k.transport.initial_value},
                      {"point_window", k.transport.point_window}};
  cfg["prior"] = {{"linear_variance", osse.prior.linear_variance},
                  {"trend_variance", osse.prior.trend_variance},
                  {"ocean_inflation", osse.prior.ocean_inflation}};
  cfg["gibbs"] = {{"iterations", osse.gibbs.iterations}, {"warmup", osse.gibbs.warmup}, {"thin", osse.gibbs.thin}};
  cfg["window"] = {sc.window.first_period, sc.window.last_period};
  write_file(dir / "config.json", cfg.dump(2) + "\n");
}

// ---------------------------------------------------------------- entry point

int run(int argc, char** argv) {
  CLI::App app{"Flux inversion pipeline with SIF-informed GPP and respiration separation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_string());

  std::string config_path, manifest_path, output;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Log progress to stderr");

  auto common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("-c,--config", config_path, "Run configuration (JSON, schema_version 1)");
    if (config_required) opt->required();
    sub->add_option("--seed", seed, "Override the master seed");
    sub->add_option("-j,--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_option("-o,--output", output, "Override the output root");
  };
  auto* decompose = app.add_subcommand("decompose", "Fit bottom-up decompositions and write the basis cache");
  auto* link = app.add_subcommand("link", "Fit per cell-month GPP-SIF links and screen them");
  auto* respond = app.add_subcommand("respond", "Build response matrices for the observations");
  auto* invert = app.add_subcommand("invert", "Two-stage MCMC inversion");
  auto* osse = app.add_subcommand("osse", "Run the observing-system simulation experiment grid");
  auto* score = app.add_subcommand("score", "Score posterior samples against a true alpha");
  for (auto* s : {decompose, link, respond, invert, score}) common(s, true);
  common(osse, false);
  osse->add_option("-m,--manifest", manifest_path, "OSSE manifest (JSON, schema_version 1)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }
  spdlog::set_level(verbose ? spdlog::level::info : spdlog::level::warn);
  const auto* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();

  RunConfig config;
  OsseManifest manifest;
  try {
    if (!config_path.empty()) config = load_run_config(config_path);
    if (seed) config.seed = *seed;
    if (jobs) config.jobs = *jobs;
    if (!output.empty()) config.output = output;
    if (name == "osse") {
      if (manifest_path.empty() && !config.osse_manifest) {
        std::cerr << "fluxinv osse: no manifest given (use --manifest or osse.manifest in the config)\n";
        return kExitUsage;
      }
      manifest = load_osse_manifest(manifest_path.empty() ? *config.osse_manifest : fs::path(manifest_path));
      if (config_path.empty() && !seed) {
        std::cerr << "fluxinv osse: a seed is required (--seed or a config file)\n";
        return kExitUsage;
      }
      if (config.output.empty()) config.output = ".";
    }
  } catch (const ConfigError& e) {
    std::cerr << "fluxinv " << name << ": " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (name == "decompose") {
      const auto r = cmd_decompose(config);
      std::cout << "basis " << (r.cache_hit ? "cache hit" : "written") << ": " << r.cache.string()
                << " (dimension " << r.dimension << ")\n";
    } else if (name == "link") {
      const auto m = cmd_link(config);
      std::size_t valid = 0;
      for (const auto& [key, l] : m.entries()) valid += l.valid;
      std::cout << "sif link: " << valid << " of " << m.entries().size() << " cell-months valid\n";
    } else if (name == "respond") {
      const auto r = cmd_respond(config);
      std::cout << "response: " << r.rows << " rows, " << r.dropped_sif << " SIF observations dropped\n";
    } else if (name == "invert") {
      const auto r = cmd_invert(config);
      std::cout << "invert: " << r.samples.draws() << " draws, min ESS " << format_double(r.min_ess) << "\n";
      if (!r.ess_ok) {
        std::cerr << "fluxinv invert: minimum ESS " << format_double(r.min_ess) << " is below the floor "
                  << format_double(config.ess_floor) << "\n";
        return kExitEssFloor;
      }
    } else if (name == "score") {
      std::cout << format_score_table(cmd_score(config));
    } else if (name == "osse") {
      const auto report = cmd_osse(config, manifest);
      std::cout << "osse: report written to " << (config.output / "osse" / "report.txt").string() << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "fluxinv " << name << ": " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "fluxinv " << name << ": " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace fluxinv::cli
