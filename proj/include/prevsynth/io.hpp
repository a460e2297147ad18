#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "prevsynth/diagnostics.hpp"
#include "prevsynth/inference.hpp"
#include "prevsynth/observation.hpp"
#include "prevsynth/synthgen.hpp"

namespace prevsynth {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Small CSV utilities (the schemas here never need quoting)
// ---------------------------------------------------------------------------

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(trim(field));
  if (!line.empty() && line.back() == ',') fields.push_back("");
  return fields;
}

inline std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) {
      rows.push_back({});  // keep line numbering aligned
      continue;
    }
    rows.push_back(split_csv_line(line));
  }
  return rows;
}

inline std::optional<long> parse_long(const std::string& s) {
  try {
    std::size_t pos = 0;
    const long v = std::stol(s, &pos);
    if (pos != s.size()) return std::nullopt;
    return v;
  } catch (...) {
    return std::nullopt;
  }
}

inline std::optional<double> parse_double(const std::string& s) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) return std::nullopt;
    return v;
  } catch (...) {
    return std::nullopt;
  }
}

// ---------------------------------------------------------------------------
// Census
// ---------------------------------------------------------------------------

/// CSV schema: age_group_lower, age_group_upper, population. Exactly the four
/// study bands must be present.
inline CensusTable load_census(const fs::path& path) {
  const auto rows = read_csv(path);
  if (rows.empty()) throw ValidationError("census " + path.string() + ": empty file");
  CensusTable census;
  std::array<bool, kNumAgeGroups> seen{};
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].empty()) continue;
    if (rows[r].size() != 3)
      throw ValidationError("census line " + std::to_string(r + 1) + ": expected 3 columns");
    const auto lo = parse_long(rows[r][0]);
    const auto hi = parse_long(rows[r][1]);
    const auto pop = parse_double(rows[r][2]);
    if (!lo || !hi || !pop)
      throw ValidationError("census line " + std::to_string(r + 1) + ": bad number");
    int idx = -1;
    for (const auto& g : age_groups())
      if (g.lower_bound == *lo && g.upper_bound == *hi) idx = g.index;
    if (idx < 0)
      throw ValidationError("census line " + std::to_string(r + 1) + ": unknown age band " +
                            std::to_string(*lo) + "-" + std::to_string(*hi));
    census.population[idx] = *pop;
    seen[idx] = true;
  }
  for (int a = 0; a < kNumAgeGroups; ++a)
    if (!seen[a])
      throw ValidationError("census: missing age band " + age_groups()[a].label());
  census.validate();
  return census;
}

inline void write_census_csv(const fs::path& path, const CensusTable& census) {
  std::ofstream out(path);
  out << "age_group_lower,age_group_upper,population\n";
  for (const auto& g : age_groups())
    out << g.lower_bound << "," << g.upper_bound << "," << census.population[g.index] << "\n";
}

// ---------------------------------------------------------------------------
// Source metadata
// ---------------------------------------------------------------------------

inline GeographicLevel parse_level(const std::string& s) {
  if (s == "city") return GeographicLevel::city;
  if (s == "metro") return GeographicLevel::metro;
  if (s == "national") return GeographicLevel::national;
  throw ValidationError("unknown geographic level '" + s + "'");
}

inline std::map<std::string, DataSourceMeta> sources_from_json(const json& j) {
  std::map<std::string, DataSourceMeta> out;
  for (const auto& src : j.at("sources")) {
    DataSourceMeta meta;
    meta.id = src.at("id").get<std::string>();
    meta.description = src.value("description", "");
    meta.level = parse_level(src.value("geographic_level", "city"));
    if (src.contains("group_multipliers"))
      for (const auto& [k, v] : src.at("group_multipliers").items())
        meta.group_multipliers[k] = v.get<double>();
    if (src.contains("age_multipliers"))
      for (const auto& [k, v] : src.at("age_multipliers").items())
        meta.age_multipliers[k] = v.get<double>();
    if (out.count(meta.id)) throw ValidationError("duplicate source id " + meta.id);
    out[meta.id] = std::move(meta);
  }
  return out;
}

inline std::map<std::string, DataSourceMeta> load_sources(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  json j;
  in >> j;
  return sources_from_json(j);
}

inline json sources_to_json(const std::map<std::string, DataSourceMeta>& sources) {
  json arr = json::array();
  for (const auto& [id, meta] : sources) {
    json s;
    s["id"] = meta.id;
    if (!meta.description.empty()) s["description"] = meta.description;
    s["geographic_level"] = to_string(meta.level);
    if (!meta.group_multipliers.empty()) s["group_multipliers"] = meta.group_multipliers;
    if (!meta.age_multipliers.empty()) s["age_multipliers"] = meta.age_multipliers;
    arr.push_back(std::move(s));
  }
  return json{{"sources", arr}};
}

// ---------------------------------------------------------------------------
// Observations
// ---------------------------------------------------------------------------

inline std::optional<TargetKind> parse_target_kind(const std::string& s) {
  static const std::map<std::string, TargetKind> table = {
      {"rho_ever", TargetKind::rho_ever}, {"rho_cur", TargetKind::rho_cur},
      {"rho_ex", TargetKind::rho_ex},     {"pi_non", TargetKind::pi_non},
      {"pi_cur", TargetKind::pi_cur},     {"pi_ex", TargetKind::pi_ex},
      {"pi_ever_cell", TargetKind::pi_ever_cell},
      {"pi_cur_tss", TargetKind::pi_cur_tss}};
  auto it = table.find(s);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

inline std::optional<MultinomialTarget> parse_multinomial_target(const std::string& s) {
  static const std::map<std::string, MultinomialTarget> table = {
      {"f_d_ever", MultinomialTarget::f_d_ever},
      {"f_tss_ever", MultinomialTarget::f_tss_ever},
      {"f_aafu_ever", MultinomialTarget::f_aafu_ever},
      {"f_d_ex", MultinomialTarget::f_d_ex},
      {"f_tss_cur", MultinomialTarget::f_tss_cur},
      {"f_tss_ex", MultinomialTarget::f_tss_ex},
      {"f_aafu_cur", MultinomialTarget::f_aafu_cur},
      {"f_aafu_ex", MultinomialTarget::f_aafu_ex}};
  auto it = table.find(s);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

/// Parses "20-29" (one band) or a contiguous span like "30-49" into age-group
/// indices [lo, hi].
inline std::optional<std::pair<int, int>> parse_age_span(const std::string& s) {
  const auto dash = s.find('-');
  if (dash == std::string::npos) return std::nullopt;
  const auto lo = parse_long(s.substr(0, dash));
  const auto hi = parse_long(s.substr(dash + 1));
  if (!lo || !hi) return std::nullopt;
  int lo_idx = -1, hi_idx = -1;
  for (const auto& g : age_groups()) {
    if (g.lower_bound == *lo) lo_idx = g.index;
    if (g.upper_bound == *hi) hi_idx = g.index;
  }
  if (lo_idx < 0 || hi_idx < 0 || lo_idx > hi_idx) return std::nullopt;
  return std::make_pair(lo_idx, hi_idx);
}

struct LoadedObservations {
  ObservationSet set;
  std::vector<std::string> parse_errors;
};

inline const std::vector<std::string>& observation_csv_header() {
  static const std::vector<std::string> header = {
      "source_id", "kind", "age_group", "duration_cat", "tss_cat", "bias_flag",
      "y", "n", "z_1", "z_2", "z_3", "z_4", "z_5", "z_6", "z_7", "z_8", "z_9", "z_10"};
  return header;
}

/// CSV schema: source_id, kind, age_group, duration_cat, tss_cat, bias_flag,
/// y, n, z_1..z_10. Binomial rows fill y/n; multinomial rows fill z_1..z_k.
inline LoadedObservations load_observations(const fs::path& path,
                                            std::map<std::string, DataSourceMeta> sources) {
  LoadedObservations out;
  out.set.sources = std::move(sources);
  const auto rows = read_csv(path);
  if (rows.empty()) throw ValidationError("observations " + path.string() + ": empty file");
  if (rows[0] != observation_csv_header())
    throw ValidationError("observations " + path.string() + ": unexpected header");
  auto err = [&](std::size_t r, const std::string& msg) {
    out.parse_errors.push_back("line " + std::to_string(r + 1) + ": " + msg);
  };
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& f = rows[r];
    if (f.empty()) continue;
    if (f.size() != observation_csv_header().size()) {
      err(r, "expected " + std::to_string(observation_csv_header().size()) + " columns");
      continue;
    }
    const int line = static_cast<int>(r + 1);
    const std::string& kind = f[1];
    if (auto mt = parse_multinomial_target(kind)) {
      MultinomialObservation o;
      o.source_id = f[0];
      o.target = *mt;
      o.csv_line = line;
      if (f[5] != "unbiased") {
        err(r, "multinomial observations must be flagged unbiased");
        continue;
      }
      bool bad = false;
      for (std::size_t k = 0; k < category_count(*mt); ++k) {
        const auto z = parse_long(f[8 + k]);
        if (!z) {
          err(r, "bad count in z_" + std::to_string(k + 1));
          bad = true;
          break;
        }
        o.counts.push_back(*z);
      }
      if (o.target == MultinomialTarget::f_tss_ex && !o.counts.empty() && o.counts[0] > 0) {
        err(r, "f_tss_ex: category <1 count must be 0 (an ex-IDU needs at least one year "
               "since starting)");
        continue;
      }
      if (!bad) out.set.multinomial.push_back(std::move(o));
      continue;
    }
    const auto tk = parse_target_kind(kind);
    if (!tk) {
      err(r, "unknown kind '" + kind + "'");
      continue;
    }
    BinomialObservation o;
    o.source_id = f[0];
    o.csv_line = line;
    o.target.kind = *tk;
    const auto span = parse_age_span(f[2]);
    if (!span) {
      err(r, "bad age_group '" + f[2] + "'");
      continue;
    }
    o.target.age_lo = span->first;
    o.target.age_hi = span->second;
    if (*tk == TargetKind::pi_ever_cell) {
      o.target.d_cat = duration_scheme().parse_label(f[3]);
      if (o.target.d_cat < 0) {
        err(r, "bad duration_cat '" + f[3] + "'");
        continue;
      }
    }
    if (*tk == TargetKind::pi_ever_cell || *tk == TargetKind::pi_cur_tss) {
      o.target.tss_cat = tss_scheme().parse_label(f[4]);
      if (o.target.tss_cat < 0) {
        err(r, "bad tss_cat '" + f[4] + "'");
        continue;
      }
    }
    if (f[5] == "unbiased") {
      o.bias_flag = BiasFlag::unbiased;
    } else if (f[5] == "biased") {
      o.bias_flag = BiasFlag::biased;
    } else {
      err(r, "bad bias_flag '" + f[5] + "'");
      continue;
    }
    const auto y = parse_long(f[6]);
    const auto n = parse_long(f[7]);
    if (!y || !n) {
      err(r, "bad y/n");
      continue;
    }
    o.y = *y;
    o.n = *n;
    out.set.binomial.push_back(std::move(o));
  }
  return out;
}

inline void write_observations_csv(const fs::path& path, const ObservationSet& set) {
  std::ofstream out(path);
  const auto& header = observation_csv_header();
  for (std::size_t i = 0; i < header.size(); ++i)
    out << header[i] << (i + 1 < header.size() ? "," : "\n");
  for (const auto& o : set.binomial) {
    out << o.source_id << "," << to_string(o.target.kind) << "," << o.target.age_span_label()
        << ",";
    if (o.target.d_cat >= 0) out << duration_scheme().categories[o.target.d_cat].label;
    out << ",";
    if (o.target.tss_cat >= 0) out << tss_scheme().categories[o.target.tss_cat].label;
    out << "," << (o.bias_flag == BiasFlag::biased ? "biased" : "unbiased") << "," << o.y << ","
        << o.n;
    for (int k = 0; k < 10; ++k) out << ",";
    out << "\n";
  }
  for (const auto& o : set.multinomial) {
    out << o.source_id << "," << to_string(o.target) << ",,,,unbiased,,";
    for (std::size_t k = 0; k < 10; ++k)
      out << "," << (k < o.counts.size() ? std::to_string(o.counts[k]) : "");
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

/// Everything a fit/sweep/cv run needs: input paths, sampler settings, bias
/// structure, seed, output directory. Relative paths resolve against the
/// manifest's own directory.
struct RunManifest {
  fs::path census_csv;
  fs::path observations_csv;
  fs::path sources_json;
  SamplerConfig sampler;
  BiasStructure structure = BiasStructure::b5;
  fs::path output_dir = "out";
  LikelihoodOptions options;
  std::vector<std::string> reference_sources;  // empty = derive from bias flags
};

inline RunManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest " + path.string());
  json j;
  in >> j;
  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    fs::path fp(p);
    return fp.is_absolute() ? fp : base / fp;
  };
  RunManifest m;
  m.census_csv = resolve(j.at("census_csv").get<std::string>());
  m.observations_csv = resolve(j.at("observations_csv").get<std::string>());
  m.sources_json = resolve(j.at("sources_json").get<std::string>());
  if (j.contains("sampler")) {
    const auto& s = j.at("sampler");
    m.sampler.chains = s.value("chains", m.sampler.chains);
    m.sampler.iterations = s.value("iterations", m.sampler.iterations);
    m.sampler.burn_in = s.value("burn_in", m.sampler.burn_in);
    m.sampler.adapt_batch = s.value("adapt_batch", m.sampler.adapt_batch);
    m.sampler.init_jitter_sd = s.value("init_jitter_sd", m.sampler.init_jitter_sd);
    m.sampler.initial_scale = s.value("initial_scale", m.sampler.initial_scale);
  }
  m.sampler.seed = j.value("seed", static_cast<std::uint64_t>(1));
  const std::string bs = j.value("bias_structure", "b5");
  const auto structure = parse_bias_structure(bs);
  if (!structure) throw ValidationError("manifest: unknown bias_structure '" + bs + "'");
  m.structure = *structure;
  m.output_dir = resolve(j.value("output_dir", "out"));
  m.options.mix_then_bias = j.value("mix_then_bias", true);
  if (j.contains("deviance_reference_sources"))
    for (const auto& s : j.at("deviance_reference_sources"))
      m.reference_sources.push_back(s.get<std::string>());
  return m;
}

inline void write_manifest_json(const fs::path& path, const std::string& census,
                                const std::string& observations, const std::string& sources,
                                BiasStructure structure, std::uint64_t seed,
                                const SamplerConfig& sampler) {
  json j;
  j["census_csv"] = census;
  j["observations_csv"] = observations;
  j["sources_json"] = sources;
  j["bias_structure"] = to_string(structure);
  j["seed"] = seed;
  j["output_dir"] = "out";
  j["sampler"] = {{"chains", sampler.chains},
                  {"iterations", sampler.iterations},
                  {"burn_in", sampler.burn_in}};
  std::ofstream out(path);
  out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Scenario files
// ---------------------------------------------------------------------------

inline TrueScenario scenario_from_json(const json& j) {
  TrueScenario sc;
  const auto& reg = j.at("regression");
  sc.regression.alpha0 = reg.at("alpha0").get<double>();
  sc.regression.gamma0 = reg.at("gamma0").get<double>();
  sc.regression.delta0 = reg.at("delta0").get<double>();
  for (int i = 0; i < 3; ++i) {
    sc.regression.alpha1[i] = reg.at("alpha1").at(i).get<double>();
    sc.regression.gamma1[i] = reg.at("gamma1").at(i).get<double>();
    sc.regression.delta1[i] = reg.at("delta1").at(i).get<double>();
  }
  for (int i = 0; i < 6; ++i) {
    sc.regression.delta2[i] = reg.at("delta2").at(i).get<double>();
    sc.regression.delta3[i] = reg.at("delta3").at(i).get<double>();
  }
  const auto& hist = j.at("history");
  sc.f_d_ever = hist.at("f_d_ever").get<std::vector<double>>();
  sc.f_tss_ever = hist.at("f_tss_ever").get<std::vector<double>>();
  sc.f_aafu_ever = hist.at("f_aafu_ever").get<std::vector<double>>();
  for (const auto& row : j.at("census")) {
    const int lo = row.at("lower").get<int>();
    const int hi = row.at("upper").get<int>();
    bool found = false;
    for (const auto& g : age_groups())
      if (g.lower_bound == lo && g.upper_bound == hi) {
        sc.census.population[g.index] = row.at("population").get<double>();
        found = true;
      }
    if (!found)
      throw ValidationError("scenario census: unknown band " + std::to_string(lo) + "-" +
                            std::to_string(hi));
  }
  const auto structure = parse_bias_structure(j.value("bias_structure", "b5"));
  if (!structure) throw ValidationError("scenario: unknown bias_structure");
  sc.structure = *structure;
  if (j.contains("biases"))
    for (const auto& b : j.at("biases"))
      sc.biases.beta[BiasKey{b.at("source").get<std::string>(),
                             b.at("group").get<std::string>()}] = b.at("beta").get<double>();
  sc.sources = sources_from_json(j);
  for (const auto& d : j.at("design").at("binomial")) {
    BinomialDesign bd;
    bd.source_id = d.at("source").get<std::string>();
    const auto kind = parse_target_kind(d.at("kind").get<std::string>());
    if (!kind) throw ValidationError("scenario design: unknown kind");
    bd.target.kind = *kind;
    const auto span = parse_age_span(d.at("age_group").get<std::string>());
    if (!span) throw ValidationError("scenario design: bad age_group");
    bd.target.age_lo = span->first;
    bd.target.age_hi = span->second;
    if (d.contains("duration_cat")) {
      bd.target.d_cat = duration_scheme().parse_label(d.at("duration_cat").get<std::string>());
      if (bd.target.d_cat < 0) throw ValidationError("scenario design: bad duration_cat");
    }
    if (d.contains("tss_cat")) {
      bd.target.tss_cat = tss_scheme().parse_label(d.at("tss_cat").get<std::string>());
      if (bd.target.tss_cat < 0) throw ValidationError("scenario design: bad tss_cat");
    }
    bd.bias_flag = d.value("bias_flag", "unbiased") == "biased" ? BiasFlag::biased
                                                                : BiasFlag::unbiased;
    bd.n = d.at("n").get<long>();
    sc.binomial_design.push_back(std::move(bd));
  }
  if (j.at("design").contains("multinomial"))
    for (const auto& d : j.at("design").at("multinomial")) {
      MultinomialDesign md;
      md.source_id = d.at("source").get<std::string>();
      const auto target = parse_multinomial_target(d.at("kind").get<std::string>());
      if (!target) throw ValidationError("scenario design: unknown multinomial kind");
      md.target = *target;
      md.n = d.at("n").get<long>();
      sc.multinomial_design.push_back(std::move(md));
    }
  return sc;
}

inline TrueScenario load_scenario(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open scenario " + path.string());
  json j;
  in >> j;
  return scenario_from_json(j);
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

inline std::string format_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

/// "mean (p2.5 - p97.5)" with an asterisk when convergence failed, mirroring
/// the table convention for flagging unreliable entries.
inline std::string format_interval(const QuantitySummary& q, double scale, int decimals) {
  std::string s = format_fixed(q.mean * scale, decimals) + " (" +
                  format_fixed(q.p2_5 * scale, decimals) + " - " +
                  format_fixed(q.p97_5 * scale, decimals) + ")";
  if (!q.converged) s += "*";
  return s;
}

inline json summary_to_json(const PosteriorSummary& s, const DevianceReport& deviance) {
  json j;
  j["outcome"] = s.outcome == RunOutcome::ok ? "ok" : "impossible_data";
  if (!s.impossible_observations.empty()) j["impossible_observations"] = s.impossible_observations;
  j["chains"] = s.chains;
  j["retained_per_chain"] = s.retained_per_chain;
  j["converged"] = s.all_converged;
  json quantities = json::object();
  for (const auto& q : s.quantities) {
    quantities[q.name] = {{"mean", q.mean},     {"sd", q.sd},
                          {"p2_5", q.p2_5},     {"p97_5", q.p97_5},
                          {"mc_se", q.mc_se},   {"psrf", q.psrf_indeterminate ? -1.0 : q.psrf},
                          {"converged", q.converged}};
  }
  j["quantities"] = quantities;
  j["deviance"] = {{"per_source", deviance.per_source},
                   {"model", deviance.model},
                   {"ub", deviance.ub},
                   {"b_to_ub", deviance.b_to_ub},
                   {"reference_sources", deviance.reference_sources}};
  j["block_acceptance"] = s.block_acceptance;
  return j;
}

inline void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << content;
}

inline void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

namespace detail {
inline std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s + " " : s + std::string(width - s.size(), ' ');
}
}  // namespace detail

/// Human-readable tables: injecting drug use by age, HCV counts by risk group
/// and age, and HCV by age. Counts in thousands with one decimal, percentages
/// with two decimals.
inline std::string fit_tables_text(const PosteriorSummary& s, const CensusTable& census) {
  using detail::pad;
  std::ostringstream out;
  auto n_label = [&](const std::string& name, double pop) {
    const auto& q = s.at(name);
    QuantitySummary scaled = q;
    scaled.mean *= pop / 1000.0;
    scaled.p2_5 *= pop / 1000.0;
    scaled.p97_5 *= pop / 1000.0;
    return format_interval(scaled, 1.0, 1);
  };
  auto pct = [&](const std::string& name) { return format_interval(s.at(name), 100.0, 2); };
  const double total_pop = census.total();

  out << "Current and ex-IDUs by age group\n";
  out << pad("Age group", 12) << pad("Pop (1000s)", 12) << pad("Current N (1000s)", 26)
      << pad("Current %", 24) << pad("Ex N (1000s)", 26) << pad("Ex %", 24)
      << pad("Ever N (1000s)", 26) << pad("Ever %", 24) << "\n";
  for (const auto& g : age_groups()) {
    const std::string b = "[" + g.label() + "]";
    out << pad(g.label(), 12) << pad(format_fixed(census.population[g.index] / 1000.0, 3), 12)
        << pad(n_label("rho_cur" + b, census.population[g.index]), 26)
        << pad(pct("rho_cur" + b), 24)
        << pad(n_label("rho_ex" + b, census.population[g.index]), 26)
        << pad(pct("rho_ex" + b), 24)
        << pad(n_label("rho_ever" + b, census.population[g.index]), 26)
        << pad(pct("rho_ever" + b), 24) << "\n";
  }
  out << pad("Total 20-59", 12) << pad(format_fixed(total_pop / 1000.0, 3), 12)
      << pad(n_label("rho_cur", total_pop), 26) << pad(pct("rho_cur"), 24)
      << pad(n_label("rho_ex", total_pop), 26) << pad(pct("rho_ex"), 24);
  {
    // ever aggregate = current + ex; report the sum of the two aggregates
    const auto& qc = s.at("rho_cur");
    const auto& qe = s.at("rho_ex");
    out << pad(format_fixed((qc.mean + qe.mean) * total_pop / 1000.0, 1), 26)
        << pad(format_fixed((qc.mean + qe.mean) * 100.0, 2), 24);
  }
  out << "\n\n";

  out << "HCV infected by IDU risk group and age group\n";
  out << pad("Age group", 12) << pad("Pop (1000s)", 12) << pad("Current N (1000s)", 26)
      << pad("Current %", 24) << pad("Ex N (1000s)", 26) << pad("Ex %", 24)
      << pad("Non N (1000s)", 26) << pad("Non %", 24) << "\n";
  for (const auto& g : age_groups()) {
    const std::string b = "[" + g.label() + "]";
    out << pad(g.label(), 12) << pad(format_fixed(census.population[g.index] / 1000.0, 3), 12)
        << pad(n_label("hcv_cur" + b, census.population[g.index]), 26)
        << pad(pct("hcv_cur" + b), 24)
        << pad(n_label("hcv_ex" + b, census.population[g.index]), 26)
        << pad(pct("hcv_ex" + b), 24)
        << pad(n_label("hcv_non" + b, census.population[g.index]), 26)
        << pad(pct("hcv_non" + b), 24) << "\n";
  }
  out << pad("Total 20-59", 12) << pad(format_fixed(total_pop / 1000.0, 3), 12)
      << pad(n_label("hcv_cur", total_pop), 26) << pad(pct("hcv_cur"), 24)
      << pad(n_label("hcv_ex", total_pop), 26) << pad(pct("hcv_ex"), 24)
      << pad(n_label("hcv_non", total_pop), 26) << pad(pct("hcv_non"), 24) << "\n\n";

  out << "HCV infected by age group\n";
  out << pad("Age group", 12) << pad("Pop (1000s)", 12) << pad("N (1000s)", 26)
      << pad("%", 24) << "\n";
  for (const auto& g : age_groups()) {
    const std::string b = "[" + g.label() + "]";
    out << pad(g.label(), 12) << pad(format_fixed(census.population[g.index] / 1000.0, 3), 12)
        << pad(n_label("pi_age" + b, census.population[g.index]), 26)
        << pad(pct("pi_age" + b), 24) << "\n";
  }
  out << pad("Total 20-59", 12) << pad(format_fixed(total_pop / 1000.0, 3), 12)
      << pad(n_label("pi", total_pop), 26) << pad(pct("pi"), 24) << "\n";
  return out.str();
}

inline std::string sweep_tables_text(const std::vector<SweepEntry>& entries) {
  using detail::pad;
  std::ostringstream out;
  out << "Goodness-of-fit by bias formulation\n";
  out << pad("Model", 7) << pad("Description", 50) << pad("D_model", 14) << pad("D_ub", 14)
      << pad("D_b->ub", 14) << "\n";
  for (const auto& e : entries) {
    out << pad(to_string(e.variant), 7) << pad(describe(e.variant), 50)
        << pad(format_fixed(e.deviance.model, 1), 14) << pad(format_fixed(e.deviance.ub, 1), 14)
        << pad(format_fixed(e.deviance.b_to_ub, 1), 14);
    if (!e.all_converged) out << "*";
    out << "\n";
  }
  out << "\nQuantities by bias formulation (percent)\n";
  out << pad("Model", 7);
  for (const auto& name : key_quantity_names()) out << pad(name, 24);
  out << "\n";
  for (const auto& e : entries) {
    out << pad(to_string(e.variant), 7);
    for (const auto& name : key_quantity_names())
      out << pad(format_interval(e.key_quantities.at(name), 100.0, 2), 24);
    out << "\n";
  }
  return out.str();
}

inline json sweep_to_json(const std::vector<SweepEntry>& entries) {
  json arr = json::array();
  for (const auto& e : entries) {
    json row;
    row["model"] = to_string(e.variant);
    row["description"] = describe(e.variant);
    row["deviance"] = {{"model", e.deviance.model},
                       {"ub", e.deviance.ub},
                       {"b_to_ub", e.deviance.b_to_ub},
                       {"per_source", e.deviance.per_source},
                       {"mc_se", e.model_deviance_mc_se}};
    row["converged"] = e.all_converged;
    if (!e.guard_violations.empty()) row["guard_violations"] = e.guard_violations;
    json q = json::object();
    for (const auto& [name, summary] : e.key_quantities)
      q[name] = {{"mean", summary.mean}, {"p2_5", summary.p2_5}, {"p97_5", summary.p97_5},
                 {"converged", summary.converged}};
    row["quantities"] = q;
    arr.push_back(std::move(row));
  }
  return json{{"bias_sweep", arr}};
}

inline std::string cv_tables_text(const CvReport& report, const std::vector<std::string>& ids) {
  using detail::pad;
  std::ostringstream out;
  out << "Deviance by remaining source under leave-one-data-source-out CV\n";
  out << pad("Removed", 12);
  for (const auto& id : ids) out << pad(id, 12);
  out << "\n";
  for (const auto& row : report.rows) {
    out << pad(row.removed, 12);
    for (const auto& id : ids) {
      auto it = row.deviance_by_source.find(id);
      out << pad(it == row.deviance_by_source.end() ? "-" : format_fixed(it->second, 1), 12);
    }
    if (!row.all_converged) out << "*";
    out << "\n";
  }
  out << "\nQuantities under leave-one-data-source-out CV (percent)\n";
  out << pad("Removed", 12);
  for (const auto& name : key_quantity_names()) out << pad(name, 24);
  out << "\n";
  for (const auto& row : report.rows) {
    out << pad(row.removed, 12);
    for (const auto& name : key_quantity_names())
      out << pad(format_interval(row.key_quantities.at(name), 100.0, 2), 24);
    out << "\n";
  }
  if (!report.conflicts.empty()) {
    out << "\nPotential conflicts (source deviance dropped when another source was removed)\n";
    for (const auto& [j, k] : report.conflicts)
      out << "  " << j << " improved when " << k << " was removed\n";
  }
  return out.str();
}

inline json cv_to_json(const CvReport& report) {
  json rows = json::array();
  for (const auto& row : report.rows) {
    json r;
    r["removed"] = row.removed;
    r["deviance_by_source"] = row.deviance_by_source;
    r["converged"] = row.all_converged;
    if (!row.nonconverged.empty()) r["nonconverged"] = row.nonconverged;
    if (!row.guard_violations.empty()) r["guard_violations"] = row.guard_violations;
    json q = json::object();
    for (const auto& [name, summary] : row.key_quantities)
      q[name] = {{"mean", summary.mean}, {"p2_5", summary.p2_5}, {"p97_5", summary.p97_5},
                 {"converged", summary.converged}};
    r["quantities"] = q;
    rows.push_back(std::move(r));
  }
  json conflicts = json::array();
  for (const auto& [j, k] : report.conflicts)
    conflicts.push_back({{"source", j}, {"removed", k}});
  return json{{"lodo_cv", rows}, {"conflicts", conflicts}};
}

inline void write_traces_csv(const fs::path& dir, const RunResult& result) {
  for (std::size_t c = 0; c < result.traces.size(); ++c) {
    std::ofstream out(dir / ("trace_chain" + std::to_string(c) + ".csv"));
    for (std::size_t i = 0; i < result.tracked_names.size(); ++i)
      out << result.tracked_names[i] << (i + 1 < result.tracked_names.size() ? "," : "\n");
    for (const auto& row : result.traces[c]) {
      for (std::size_t i = 0; i < row.size(); ++i)
        out << row[i] << (i + 1 < row.size() ? "," : "\n");
    }
  }
}

}  // namespace prevsynth
