#include "gmmcv/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include <json.hpp>

#include "gmmcv/conduct_lab.hpp"
#include "gmmcv/errors.hpp"
#include "gmmcv/iv_lab.hpp"
#include "gmmcv/mpec.hpp"
#include "gmmcv/null_lab.hpp"

namespace gmmcv {

namespace {

using json = nlohmann::ordered_json;

constexpr int kSchemaVersion = 1;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// ---------------------------------------------------------------------------
// Key schema

enum class Kind { Int, UInt, Double, Bool, Text, IntList, DoubleList, TextList, Partitions };

struct KeySpec {
  const char* key;
  Kind kind;
  const char* fallback;  // default; nullptr means required or experiment-dependent
  double min = -std::numeric_limits<double>::infinity();
  double max = std::numeric_limits<double>::infinity();
  bool positive = false;  // strict lower bound at 0
  int length = 0;         // exact list length when > 0
};

constexpr double kNoMin = -std::numeric_limits<double>::infinity();
constexpr double kNoMax = std::numeric_limits<double>::infinity();

const std::vector<KeySpec>& schema() {
  static const std::vector<KeySpec> s = {
      {"experiment", Kind::Text, nullptr},
      {"seed", Kind::UInt, "1"},
      {"parallelism", Kind::Int, "1", 1, 256},
      {"output", Kind::Text, nullptr},
      {"optimizer.starts", Kind::Int, nullptr, 1, 10000},
      {"optimizer.simplex", Kind::Bool, nullptr},
      {"optimizer.polish", Kind::Bool, "true"},
      {"optimizer.max_evaluations", Kind::Int, nullptr, 1, 1e9},
      {"optimizer.param_tol", Kind::Double, "1e-08", kNoMin, kNoMax, true},
      {"optimizer.objective_tol", Kind::Double, "1e-12", kNoMin, kNoMax, true},
      {"optimizer.seed", Kind::UInt, "0"},

      {"iv.T", Kind::IntList, "100,200,400,800,1600", 4, 1e8},
      {"iv.p1", Kind::Int, "3", 1, 1000},
      {"iv.p2", Kind::IntList, "9", 1, 1000},
      {"iv.c1", Kind::Int, "10", 1, 1000},
      {"iv.c2", Kind::Int, "10", 1, 1000},
      {"iv.alpha", Kind::DoubleList, "12", 0, kNoMax},
      {"iv.reps", Kind::Int, "500", 1, 1e8},
      {"iv.r", Kind::Int, "2", 2, 100},
      {"iv.k", Kind::Int, "1", 1, 99},
      {"iv.criteria", Kind::TextList, "cv,gmm,gmm_aic,gmm_bic"},
      {"iv.delta_scaling", Kind::Text, "per_regressor"},
      {"iv.delta_offdiag", Kind::Double, "0.5"},
      {"iv.beta1", Kind::Double, "1"},
      {"iv.beta2", Kind::Double, "1"},
      {"iv.noise_sd", Kind::Double, "1", 0, kNoMax},
      {"iv.param_bound", Kind::Double, "100", kNoMin, kNoMax, true},

      {"conduct.J", Kind::Int, "3", 1, 8},
      {"conduct.T", Kind::IntList, "25,50,75,100", 4, 1e7},
      {"conduct.alpha", Kind::DoubleList, "-0.1,-0.3"},
      {"conduct.truths", Kind::Partitions, "{1,2,3},{1,2}{3},{1}{2}{3}"},
      {"conduct.reps", Kind::Int, "100", 1, 1e7},
      {"conduct.r", Kind::Int, "2", 2, 100},
      {"conduct.k", Kind::Int, "1", 1, 99},
      {"conduct.beta", Kind::DoubleList, "2,1", kNoMin, kNoMax, false, 2},
      {"conduct.gamma", Kind::DoubleList, "3,0,1", kNoMin, kNoMax, false, 3},
      {"conduct.char_sd", Kind::Double, "0.1", kNoMin, kNoMax, true},
      {"conduct.shock_sd", Kind::Double, "1", kNoMin, kNoMax, true},
      {"conduct.market_size", Kind::Double, "1", kNoMin, kNoMax, true},
      {"conduct.instruments", Kind::Text, "demand_cost"},
      {"conduct.alpha_bounds", Kind::DoubleList, "-3,-0.01", kNoMin, kNoMax, false, 2},
      {"conduct.linear_bound", Kind::Double, "1000", kNoMin, kNoMax, true},

      {"null.T", Kind::Int, "2000", 4, 1e8},
      {"null.r", Kind::Int, "2", 2, 100},
      {"null.k", Kind::Int, "1", 1, 99},
      {"null.gap1", Kind::Double, "1"},
      {"null.gap2", Kind::Double, "1"},
      {"null.reps", Kind::Int, "1000", 1, 1e8},
      {"null.variance", Kind::Text, "general"},
      {"null.normalization", Kind::Text, "sigma"},
      {"null.level", Kind::Double, "0.05", kNoMin, kNoMax, true},

      {"consistency.T", Kind::IntList, "100,400,1600", 4, 1e8},
      {"consistency.gap", Kind::Double, "0.5"},
      {"consistency.reps", Kind::Int, "500", 1, 1e8},
      {"consistency.r", Kind::Int, "2", 2, 100},
      {"consistency.k", Kind::Int, "1", 1, 99},
      {"consistency.mpec", Kind::Bool, "false"},

      {"mpec.instances", Kind::Int, "50", 1, 1e7},
      {"mpec.T", Kind::Int, "200", 4, 1e8},
      {"mpec.r", Kind::Int, "2", 2, 100},
      {"mpec.k", Kind::Int, "1", 1, 99},
      {"mpec.max_p", Kind::Int, "3", 1, 50},
      {"mpec.max_extra_instruments", Kind::Int, "3", 0, 50},
      {"mpec.initial_penalty", Kind::Double, "1", kNoMin, kNoMax, true},
      {"mpec.penalty_growth", Kind::Double, "10", 1, kNoMax},
      {"mpec.max_outer", Kind::Int, "20", 1, 1e6},
      {"mpec.max_inner", Kind::Int, "500", 1, 1e7},
      {"mpec.feasibility_tol", Kind::Double, "1e-08", kNoMin, kNoMax, true},
      {"mpec.kkt_tol", Kind::Double, "1e-06", kNoMin, kNoMax, true},
  };
  return s;
}

struct ExperimentInfo {
  const char* name;
  const char* section;
  const char* description;
};

const std::vector<ExperimentInfo>& experiments() {
  static const std::vector<ExperimentInfo> e = {
      {"iv_study", "iv", "linear IV overfitting study: selection accuracy over T per criterion"},
      {"conduct_study", "conduct", "conduct selection: CV scores and choice frequencies per cell"},
      {"null_test_study", "null", "R_CV statistic under equally misspecified models"},
      {"consistency_study", "consistency",
       "CV accuracy for a correct vs globally misspecified pair over T"},
      {"mpec_check", "mpec", "equivalence of the MPEC and eliminated linear IV paths"},
  };
  return e;
}

const ExperimentInfo& experiment_info(const std::string& name) {
  for (const auto& e : experiments())
    if (name == e.name) return e;
  std::string known;
  for (const auto& e : experiments()) known += (known.empty() ? "" : ", ") + std::string(e.name);
  throw ConfigurationError("unknown experiment '" + name + "' (expected one of " + known + ")");
}

std::string section_of(const std::string& key) {
  const auto dot = key.find('.');
  return dot == std::string::npos ? std::string() : key.substr(0, dot);
}

bool applies(const KeySpec& k, const ExperimentInfo& e) {
  const std::string sec = section_of(k.key);
  return sec.empty() || sec == "optimizer" || sec == e.section;
}

std::string experiment_default(const std::string& key, const std::string& exp) {
  if (key == "output") return exp;
  OptimizerConfig o;
  if (exp == "iv_study") o = iv_default_optimizer();
  else if (exp == "conduct_study") o = conduct_default_optimizer();
  else {
    o.starts = 1;
    o.simplex = false;
  }
  if (key == "optimizer.starts") return std::to_string(o.starts);
  if (key == "optimizer.simplex") return o.simplex ? "true" : "false";
  if (key == "optimizer.max_evaluations") return std::to_string(o.max_evaluations);
  throw ConfigurationError("missing required key '" + key + "'");
}

// ---------------------------------------------------------------------------
// Value normalization

long parse_long(const std::string& key, const std::string& s) {
  long v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw ConfigurationError(key + ": expected an integer, got '" + s + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw ConfigurationError(key + ": expected a nonnegative integer, got '" + s + "'");
  return v;
}

double parse_dbl(const std::string& key, const std::string& s) {
  double v = 0;
  const char* b = s.data();
  if (!s.empty() && s[0] == '+') ++b;
  const auto r = std::from_chars(b, s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v))
    throw ConfigurationError(key + ": expected a finite number, got '" + s + "'");
  return v;
}

void check_range(const KeySpec& k, double v) {
  const std::string key = k.key;
  if (k.positive && !(v > 0)) throw ConfigurationError(key + " must be positive");
  if (v < k.min && k.max >= 1e6)
    throw ConfigurationError(key + " must be at least " + format_double(k.min));
  if (v < k.min || v > k.max) {
    std::ostringstream os;
    os << key << " must lie in [" << format_double(k.min) << ", " << format_double(k.max) << "]";
    throw ConfigurationError(os.str());
  }
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

std::string normalize_text(const std::string& key, const std::string& v) {
  if (key == "experiment") return experiment_info(v).name;
  if (key == "iv.criteria") return to_string(parse_criterion(v));
  if (key == "iv.delta_scaling") return to_string(parse_delta_scaling(v));
  if (key == "conduct.instruments") return to_string(parse_instrument_source(v));
  if (key == "null.variance") return to_string(parse_variance_mode(v));
  if (key == "null.normalization") return to_string(parse_normalization(v));
  if (key == "output") {
    if (v.find("..") != std::string::npos || v.front() == '/')
      throw ConfigurationError("output must be a relative directory name without '..'");
  }
  return v;
}

std::string normalize(const KeySpec& k, const std::string& raw,
                      const std::map<std::string, std::string>& resolved) {
  const std::string key = k.key;
  if (raw.empty()) throw ConfigurationError(key + ": empty value");
  try {
    switch (k.kind) {
      case Kind::Int: {
        const long v = parse_long(key, raw);
        check_range(k, static_cast<double>(v));
        return std::to_string(v);
      }
      case Kind::UInt: return std::to_string(parse_u64(key, raw));
      case Kind::Double: {
        const double v = parse_dbl(key, raw);
        check_range(k, v);
        return format_double(v);
      }
      case Kind::Bool: {
        if (raw == "true" || raw == "1" || raw == "yes") return "true";
        if (raw == "false" || raw == "0" || raw == "no") return "false";
        throw ConfigurationError(key + ": expected true or false, got '" + raw + "'");
      }
      case Kind::Text: return normalize_text(key, raw);
      case Kind::IntList:
      case Kind::DoubleList:
      case Kind::TextList:
      case Kind::Partitions: {
        const auto items = split_list(raw);
        if (items.empty()) throw ConfigurationError(key + ": empty list");
        if (k.length > 0 && static_cast<int>(items.size()) != k.length)
          throw ConfigurationError(key + ": expected " + std::to_string(k.length) + " values");
        std::vector<std::string> out;
        for (const auto& it : items) {
          if (it.empty()) throw ConfigurationError(key + ": empty list item");
          if (k.kind == Kind::IntList) {
            const long v = parse_long(key, it);
            check_range(k, static_cast<double>(v));
            out.push_back(std::to_string(v));
          } else if (k.kind == Kind::DoubleList) {
            const double v = parse_dbl(key, it);
            check_range(k, v);
            out.push_back(format_double(v));
          } else if (k.kind == Kind::TextList) {
            out.push_back(normalize_text(key, it));
          } else {
            const int J = static_cast<int>(parse_long("conduct.J", resolved.at("conduct.J")));
            out.push_back(Partition::parse(it, J).label());
          }
        }
        return join(out);
      }
    }
  } catch (const ConfigurationError& e) {
    const std::string msg = e.what();
    if (msg.rfind(key, 0) == 0) throw;
    throw ConfigurationError(key + ": " + msg);
  }
  return raw;
}

const KeySpec* find_spec(const std::string& key) {
  for (const auto& k : schema())
    if (key == k.key) return &k;
  return nullptr;
}

}  // namespace

// ---------------------------------------------------------------------------
// Parsing

std::vector<ConfigEntry> parse_config_text(const std::string& text) {
  std::vector<ConfigEntry> out;
  std::map<std::string, int> seen;
  std::istringstream in(text);
  std::string line;
  int no = 0;
  while (std::getline(in, line)) {
    ++no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigurationError("line " + std::to_string(no) + ": expected 'key = value'");
    ConfigEntry e{trim(line.substr(0, eq)), trim(line.substr(eq + 1)), no};
    if (e.key.empty()) throw ConfigurationError("line " + std::to_string(no) + ": missing key");
    if (const auto it = seen.find(e.key); it != seen.end())
      throw ConfigurationError("line " + std::to_string(no) + ": duplicate key '" + e.key +
                               "' (first set on line " + std::to_string(it->second) + ")");
    seen[e.key] = no;
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  if (trim(value).empty()) return out;
  int depth = 0;
  std::string cur;
  for (char ch : value) {
    if (ch == '{') ++depth;
    if (ch == '}') --depth;
    if (ch == ',' && depth == 0) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(trim(cur));
  return out;
}

std::vector<std::string> experiment_names() {
  std::vector<std::string> out;
  for (const auto& e : experiments()) out.emplace_back(e.name);
  return out;
}

std::string experiment_description(const std::string& name) {
  return experiment_info(name).description;
}

// ---------------------------------------------------------------------------
// ExperimentConfig

ExperimentConfig ExperimentConfig::resolve(const std::vector<ConfigEntry>& entries) {
  std::map<std::string, std::string> given;
  for (const auto& e : entries) {
    if (!find_spec(e.key))
      throw ConfigurationError("line " + std::to_string(e.line) + ": unknown key '" + e.key + "'");
    given[e.key] = e.value;
  }
  const auto exp_it = given.find("experiment");
  if (exp_it == given.end()) throw ConfigurationError("missing required key 'experiment'");
  const ExperimentInfo& info = experiment_info(trim(exp_it->second));

  for (const auto& e : entries) {
    const KeySpec& k = *find_spec(e.key);
    if (!applies(k, info))
      throw ConfigurationError("line " + std::to_string(e.line) + ": key '" + e.key +
                               "' does not apply to experiment " + info.name);
  }

  ExperimentConfig cfg;
  cfg.experiment_ = info.name;
  std::map<std::string, std::string> resolved;
  for (const auto& k : schema()) {
    if (!applies(k, info)) continue;
    const auto it = given.find(k.key);
    const std::string raw = it != given.end()
                                ? it->second
                                : (k.fallback ? std::string(k.fallback)
                                              : experiment_default(k.key, info.name));
    const std::string v = normalize(k, raw, resolved);
    resolved[k.key] = v;
    cfg.values_.emplace_back(k.key, v);
  }

  // Cross-field checks of the designs, before any computation.
  const auto check = [&](const std::string& r, const std::string& kk) {
    if (cfg.get_int(kk) >= cfg.get_int(r))
      throw ConfigurationError(kk + " must be smaller than " + r);
  };
  const std::string sec = info.section;
  check(sec + ".r", sec + ".k");
  OptimizerConfig o;
  o.param_tol = cfg.get_double("optimizer.param_tol");
  o.objective_tol = cfg.get_double("optimizer.objective_tol");
  validate_optimizer_config(o);
  if (sec == "iv") {
    IvDesign d;
    d.p1 = static_cast<int>(cfg.get_int("iv.p1"));
    d.c1 = static_cast<int>(cfg.get_int("iv.c1"));
    d.c2 = static_cast<int>(cfg.get_int("iv.c2"));
    for (long p2 : cfg.get_ints("iv.p2")) {
      d.p2 = static_cast<int>(p2);
      validate_iv_design(d);
    }
  } else if (sec == "conduct") {
    const auto b = cfg.get_doubles("conduct.alpha_bounds");
    if (!(b[0] < b[1]) || !(b[1] < 0))
      throw ConfigurationError("conduct.alpha_bounds must be increasing and negative");
    for (double a : cfg.get_doubles("conduct.alpha"))
      if (!(a < 0)) throw ConfigurationError("conduct.alpha values must be negative");
  } else if (sec == "null") {
    const double level = cfg.get_double("null.level");
    if (!(level < 1)) throw ConfigurationError("null.level must lie in (0,1)");
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::from_text(const std::string& text) {
  return resolve(parse_config_text(text));
}

ExperimentConfig ExperimentConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigurationError("cannot read config file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

ExperimentConfig ExperimentConfig::with(const std::string& key, const std::string& value) const {
  std::vector<ConfigEntry> entries;
  bool replaced = false;
  int line = 0;
  for (const auto& [k, v] : values_) {
    entries.push_back({k, k == key ? value : v, ++line});
    replaced |= k == key;
  }
  if (!replaced) entries.push_back({key, value, ++line});
  return resolve(entries);
}

bool ExperimentConfig::has(const std::string& key) const {
  return std::any_of(values_.begin(), values_.end(), [&](const auto& kv) { return kv.first == key; });
}

const std::string& ExperimentConfig::get(const std::string& key) const {
  for (const auto& kv : values_)
    if (kv.first == key) return kv.second;
  throw ConfigurationError("config has no key '" + key + "'");
}

long ExperimentConfig::get_int(const std::string& key) const { return parse_long(key, get(key)); }
std::uint64_t ExperimentConfig::get_u64(const std::string& key) const {
  return parse_u64(key, get(key));
}
double ExperimentConfig::get_double(const std::string& key) const {
  return parse_dbl(key, get(key));
}
bool ExperimentConfig::get_bool(const std::string& key) const { return get(key) == "true"; }

std::vector<long> ExperimentConfig::get_ints(const std::string& key) const {
  std::vector<long> out;
  for (const auto& s : split_list(get(key))) out.push_back(parse_long(key, s));
  return out;
}

std::vector<double> ExperimentConfig::get_doubles(const std::string& key) const {
  std::vector<double> out;
  for (const auto& s : split_list(get(key))) out.push_back(parse_dbl(key, s));
  return out;
}

std::vector<std::string> ExperimentConfig::get_list(const std::string& key) const {
  return split_list(get(key));
}

std::string ExperimentConfig::text() const {
  std::string out;
  std::string section = "-";
  for (const auto& [k, v] : values_) {
    const std::string s = section_of(k);
    if (s != section && !out.empty()) out += "\n";
    section = s;
    out += k + " = " + v + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Formatting helpers

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  if (x == 0) return "0";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

class CsvWriter {
 public:
  explicit CsvWriter(const std::vector<std::string>& header) { row(header); }
  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) out_ += (i ? "," : "") + csv_field(fields[i]);
    out_ += "\n";
  }
  std::string str() const { return out_; }

 private:
  std::string out_;
};

std::string fd(double x) { return format_double(x); }
template <class T>
std::string fi(T x) {
  return std::to_string(x);
}

json jnum(double x) {
  if (std::isfinite(x)) return x;
  return nullptr;
}

OptimizerConfig optimizer_from(const ExperimentConfig& c) {
  OptimizerConfig o;
  o.starts = static_cast<int>(c.get_int("optimizer.starts"));
  o.simplex = c.get_bool("optimizer.simplex");
  o.polish = c.get_bool("optimizer.polish");
  o.max_evaluations = static_cast<int>(c.get_int("optimizer.max_evaluations"));
  o.param_tol = c.get_double("optimizer.param_tol");
  o.objective_tol = c.get_double("optimizer.objective_tol");
  o.seed = c.get_u64("optimizer.seed");
  validate_optimizer_config(o);
  return o;
}

json summary_header(const ExperimentConfig& c) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["experiment"] = c.experiment();
  j["seed"] = c.get_u64("seed");
  return j;
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Experiments

void run_iv(const ExperimentConfig& c, ResultBundle& b) {
  IvDesign base;
  base.p1 = static_cast<int>(c.get_int("iv.p1"));
  base.c1 = static_cast<int>(c.get_int("iv.c1"));
  base.c2 = static_cast<int>(c.get_int("iv.c2"));
  base.reps = static_cast<int>(c.get_int("iv.reps"));
  base.r = static_cast<int>(c.get_int("iv.r"));
  base.k = static_cast<int>(c.get_int("iv.k"));
  base.seed = c.get_u64("seed");
  base.delta_scaling = parse_delta_scaling(c.get("iv.delta_scaling"));
  base.delta_offdiag = c.get_double("iv.delta_offdiag");
  base.beta1 = c.get_double("iv.beta1");
  base.beta2 = c.get_double("iv.beta2");
  base.noise_sd = c.get_double("iv.noise_sd");
  base.param_bound = c.get_double("iv.param_bound");
  std::vector<Criterion> criteria;
  for (const auto& s : c.get_list("iv.criteria")) criteria.push_back(parse_criterion(s));
  const OptimizerConfig opt = optimizer_from(c);

  CsvWriter csv({"criterion", "T", "p1", "p2", "alpha", "accuracy", "stderr", "reps", "failures"});
  std::string log;
  json summary = summary_header(c);
  json cells = json::array();
  for (double alpha : c.get_doubles("iv.alpha")) {
    for (long p2 : c.get_ints("iv.p2")) {
      for (long T : c.get_ints("iv.T")) {
        IvDesign d = base;
        d.alpha = alpha;
        d.p2 = static_cast<int>(p2);
        d.T = T;
        validate_iv_design(d);
        const IvStudyResult res = run_iv_study(d, criteria, opt, c.parallelism());
        json cell;
        cell["T"] = T;
        cell["p1"] = d.p1;
        cell["p2"] = d.p2;
        cell["alpha"] = alpha;
        json acc;
        for (const auto& row : res.rows) {
          csv.row({to_string(row.criterion), fi(row.T), fi(row.p1), fi(row.p2), fd(row.alpha),
                   fd(row.accuracy), fd(row.stderr_), fi(row.reps), fi(row.failures)});
          acc[to_string(row.criterion)] = {{"accuracy", jnum(row.accuracy)},
                                           {"stderr", jnum(row.stderr_)},
                                           {"failures", row.failures}};
        }
        cell["criteria"] = acc;
        cells.push_back(cell);
        for (std::size_t rep = 0; rep < res.outcomes.size(); ++rep) {
          const auto& o = res.outcomes[rep];
          for (std::size_t ci = 0; ci < criteria.size() && ci < o.chose_first.size(); ++ci)
            if (o.chose_first[ci] < 0)
              log += "alpha=" + fd(alpha) + " p2=" + fi(p2) + " T=" + fi(T) +
                     " rep=" + fi(rep) + " criterion=" + to_string(criteria[ci]) +
                     ": replication failed\n";
        }
      }
    }
  }
  summary["cells"] = cells;
  b.files.push_back({"iv_accuracy.csv", csv.str()});
  b.files.push_back({"summary.json", dump(summary)});
  b.files.push_back({"failures.log", log});
}

void run_conduct(const ExperimentConfig& c, ResultBundle& b) {
  ConductStudyDesign d;
  d.J = static_cast<int>(c.get_int("conduct.J"));
  d.T.clear();
  for (long t : c.get_ints("conduct.T")) d.T.push_back(t);
  d.alpha = c.get_doubles("conduct.alpha");
  d.truths.clear();
  for (const auto& s : c.get_list("conduct.truths")) d.truths.push_back(Partition::parse(s, d.J));
  d.reps = static_cast<int>(c.get_int("conduct.reps"));
  d.seed = c.get_u64("seed");
  const auto beta = c.get_doubles("conduct.beta");
  const auto gamma = c.get_doubles("conduct.gamma");
  d.beta = Eigen::Vector2d(beta[0], beta[1]);
  d.gamma = Eigen::Vector3d(gamma[0], gamma[1], gamma[2]);
  d.char_sd = c.get_double("conduct.char_sd");
  d.shock_sd = c.get_double("conduct.shock_sd");
  d.market_size = c.get_double("conduct.market_size");
  d.r = static_cast<int>(c.get_int("conduct.r"));
  d.k = static_cast<int>(c.get_int("conduct.k"));
  d.instruments = parse_instrument_source(c.get("conduct.instruments"));
  const auto bounds = c.get_doubles("conduct.alpha_bounds");
  d.bounds.alpha_lower = bounds[0];
  d.bounds.alpha_upper = bounds[1];
  d.bounds.linear = c.get_double("conduct.linear_bound");
  validate_conduct_design(d);

  const ConductStudyResult res = run_conduct_study(d, optimizer_from(c), c.parallelism());
  CsvWriter scores({"alpha", "T", "truth", "candidate", "score_mean", "score_sd", "reps",
                    "failures"});
  CsvWriter choice({"alpha", "T", "truth", "candidate", "cv_frequency", "gmm_frequency", "reps",
                    "failures"});
  std::string log;
  json summary = summary_header(c);
  json cells = json::array();
  for (const auto& cell : res.cells) {
    json jc;
    jc["alpha"] = cell.alpha;
    jc["T"] = cell.T;
    jc["truth"] = cell.truth.label();
    jc["reps"] = cell.reps;
    jc["failures"] = cell.failures;
    json mean, cv, gmm;
    for (std::size_t i = 0; i < res.candidates.size(); ++i) {
      const std::string cand = res.candidates[i].label();
      scores.row({fd(cell.alpha), fi(cell.T), cell.truth.label(), cand, fd(cell.score_mean[i]),
                  fd(cell.score_sd[i]), fi(cell.reps), fi(cell.failures)});
      choice.row({fd(cell.alpha), fi(cell.T), cell.truth.label(), cand, fd(cell.cv_frequency[i]),
                  fd(cell.gmm_frequency[i]), fi(cell.reps), fi(cell.failures)});
      mean[cand] = jnum(cell.score_mean[i]);
      cv[cand] = jnum(cell.cv_frequency[i]);
      gmm[cand] = jnum(cell.gmm_frequency[i]);
    }
    jc["cv_score_mean"] = mean;
    jc["cv_frequency"] = cv;
    jc["gmm_frequency"] = gmm;
    cells.push_back(jc);
    if (cell.failures > 0)
      log += "alpha=" + fd(cell.alpha) + " T=" + fi(cell.T) + " truth=" + cell.truth.label() +
             ": " + fi(cell.failures) + " of " + fi(cell.reps) + " replications failed\n";
  }
  summary["cells"] = cells;
  b.files.push_back({"conduct_scores.csv", scores.str()});
  b.files.push_back({"conduct_choice.csv", choice.str()});
  b.files.push_back({"summary.json", dump(summary)});
  b.files.push_back({"failures.log", log});
}

NullDesign null_design(const ExperimentConfig& c, const std::string& sec) {
  NullDesign d;
  d.r = static_cast<int>(c.get_int(sec + ".r"));
  d.k = static_cast<int>(c.get_int(sec + ".k"));
  d.reps = static_cast<int>(c.get_int(sec + ".reps"));
  d.seed = c.get_u64("seed");
  return d;
}

void run_null(const ExperimentConfig& c, ResultBundle& b) {
  NullDesign d = null_design(c, "null");
  d.T = c.get_int("null.T");
  d.gap1 = c.get_double("null.gap1");
  d.gap2 = c.get_double("null.gap2");
  d.variance = parse_variance_mode(c.get("null.variance"));
  d.normalization = parse_normalization(c.get("null.normalization"));
  d.level = c.get_double("null.level");
  validate_null_design(d);
  const NullStudyResult res = run_null_study(d, optimizer_from(c), c.parallelism());
  const KsResult ks = ks_test_normal(res.statistics);

  CsvWriter stats({"rep", "r_cv", "p_value"});
  std::string log;
  for (std::size_t i = 0; i < res.statistics.size(); ++i) {
    stats.row({fi(i), fd(res.statistics[i]), fd(res.p_values[i])});
    if (!std::isfinite(res.statistics[i])) log += "rep=" + fi(i) + ": replication failed\n";
  }
  CsvWriter sum({"T", "reps", "failures", "level", "rejection_rate", "mean", "variance",
                 "ks_statistic", "ks_p_value", "normalization", "variance_mode"});
  sum.row({fi(d.T), fi(d.reps), fi(res.failures), fd(d.level), fd(res.rejection_rate),
           fd(res.mean), fd(res.variance), fd(ks.statistic), fd(ks.p_value),
           to_string(d.normalization), to_string(d.variance)});
  json summary = summary_header(c);
  summary["T"] = d.T;
  summary["reps"] = d.reps;
  summary["failures"] = res.failures;
  summary["rejection_rate"] = jnum(res.rejection_rate);
  summary["mean"] = jnum(res.mean);
  summary["variance"] = jnum(res.variance);
  summary["ks_statistic"] = jnum(ks.statistic);
  summary["ks_p_value"] = jnum(ks.p_value);
  b.files.push_back({"null_statistics.csv", stats.str()});
  b.files.push_back({"null_summary.csv", sum.str()});
  b.files.push_back({"summary.json", dump(summary)});
  b.files.push_back({"failures.log", log});
}

void run_consistency(const ExperimentConfig& c, ResultBundle& b) {
  NullDesign d = null_design(c, "consistency");
  d.gap1 = 0.0;
  d.gap2 = c.get_double("consistency.gap");
  std::vector<Index> sizes;
  for (long t : c.get_ints("consistency.T")) sizes.push_back(t);
  const OptimizerConfig opt = optimizer_from(c);
  std::vector<std::string> paths{"plain"};
  if (c.get_bool("consistency.mpec")) paths.push_back("mpec");

  CsvWriter csv({"path", "T", "accuracy", "stderr", "reps", "failures"});
  std::string log;
  json summary = summary_header(c);
  summary["gap"] = d.gap2;
  json jp;
  for (const auto& path : paths) {
    const auto rows = run_consistency_study(d, sizes, opt, path == "mpec", c.parallelism());
    json arr = json::array();
    for (const auto& r : rows) {
      csv.row({path, fi(r.T), fd(r.accuracy), fd(r.stderr_), fi(r.reps), fi(r.failures)});
      arr.push_back({{"T", r.T}, {"accuracy", jnum(r.accuracy)}, {"stderr", jnum(r.stderr_)},
                     {"failures", r.failures}});
      if (r.failures > 0)
        log += "path=" + path + " T=" + fi(r.T) + ": " + fi(r.failures) + " of " + fi(r.reps) +
               " replications failed\n";
    }
    jp[path] = arr;
  }
  summary["accuracy"] = jp;
  b.files.push_back({"consistency.csv", csv.str()});
  b.files.push_back({"summary.json", dump(summary)});
  b.files.push_back({"failures.log", log});
}

void run_mpec(const ExperimentConfig& c, ResultBundle& b) {
  MpecCheckDesign d;
  d.instances = static_cast<int>(c.get_int("mpec.instances"));
  d.T = c.get_int("mpec.T");
  d.r = static_cast<int>(c.get_int("mpec.r"));
  d.k = static_cast<int>(c.get_int("mpec.k"));
  d.max_p = static_cast<int>(c.get_int("mpec.max_p"));
  d.max_extra = static_cast<int>(c.get_int("mpec.max_extra_instruments"));
  d.seed = c.get_u64("seed");
  const OptimizerConfig opt = optimizer_from(c);
  d.options.initial_penalty = c.get_double("mpec.initial_penalty");
  d.options.penalty_growth = c.get_double("mpec.penalty_growth");
  d.options.max_outer = static_cast<int>(c.get_int("mpec.max_outer"));
  d.options.max_inner = static_cast<int>(c.get_int("mpec.max_inner"));
  d.options.feasibility_tol = c.get_double("mpec.feasibility_tol");
  d.options.kkt_tol = c.get_double("mpec.kkt_tol");
  d.options.optimizer = opt;
  validate_mpec_check(d);
  const auto rows = run_mpec_check(d, opt, c.parallelism());

  CsvWriter csv({"instance", "p", "c", "theta_gap", "profile_gap", "score_gap", "selected_mpec",
                 "selected_gmm", "error"});
  std::string log;
  double theta = 0, profile = 0, score = 0;
  int agree = 0, failed = 0;
  for (const auto& r : rows) {
    csv.row({fi(r.instance), fi(r.p), fi(r.c), fd(r.theta_gap), fd(r.profile_gap),
             fd(r.score_gap), fi(r.selected_mpec), fi(r.selected_gmm), r.error});
    if (!r.error.empty()) {
      ++failed;
      log += "instance=" + fi(r.instance) + ": " + r.error + "\n";
      continue;
    }
    theta = std::max(theta, r.theta_gap);
    profile = std::max(profile, r.profile_gap);
    score = std::max(score, r.score_gap);
    agree += r.selected_mpec == r.selected_gmm;
  }
  json summary = summary_header(c);
  summary["instances"] = d.instances;
  summary["failures"] = failed;
  summary["max_theta_gap"] = jnum(theta);
  summary["max_profile_gap"] = jnum(profile);
  summary["max_score_gap"] = jnum(score);
  summary["selections_agree"] = agree;
  b.files.push_back({"mpec_equivalence.csv", csv.str()});
  b.files.push_back({"summary.json", dump(summary)});
  b.files.push_back({"failures.log", log});
}

}  // namespace

// ---------------------------------------------------------------------------
// Bundles

const std::string* ResultBundle::find(const std::string& name) const {
  for (const auto& f : files)
    if (f.name == name) return &f.content;
  return nullptr;
}

ResultBundle run_experiment(const ExperimentConfig& config) {
  ResultBundle b;
  b.experiment = config.experiment();
  b.files.push_back({"resolved.cfg", config.text()});
  const std::string& e = config.experiment();
  if (e == "iv_study") run_iv(config, b);
  else if (e == "conduct_study") run_conduct(config, b);
  else if (e == "null_test_study") run_null(config, b);
  else if (e == "consistency_study") run_consistency(config, b);
  else if (e == "mpec_check") run_mpec(config, b);
  else throw ConfigurationError("unknown experiment '" + e + "'");
  return b;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw std::runtime_error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

void write_bundle(const ResultBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& f : bundle.files) write_file_atomic(dir / f.name, f.content);
}

std::filesystem::path output_root() {
  const char* env = std::getenv("GMMCV_OUTPUT_ROOT");
  return (env && *env) ? std::filesystem::path(env) : std::filesystem::path("results");
}

std::filesystem::path bundle_directory(const ExperimentConfig& config) {
  return output_root() / config.get("output");
}

ResultBundle read_bundle(const std::filesystem::path& dir) {
  const auto read = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  if (!std::filesystem::exists(dir / "resolved.cfg"))
    throw ConfigurationError("'" + dir.string() + "' is not a bundle (no resolved.cfg)");
  ResultBundle b;
  const std::string cfg = read(dir / "resolved.cfg");
  b.experiment = ExperimentConfig::from_text(cfg).experiment();
  b.files.push_back({"resolved.cfg", cfg});
  for (const char* name : {"iv_accuracy.csv", "conduct_scores.csv", "conduct_choice.csv",
                           "null_statistics.csv", "null_summary.csv", "consistency.csv",
                           "mpec_equivalence.csv", "summary.json", "failures.log"}) {
    if (std::filesystem::exists(dir / name)) b.files.push_back({name, read(dir / name)});
  }
  return b;
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += ch;
      }
      continue;
    }
    any = true;
    if (ch == '"') quoted = true;
    else if (ch == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (ch == '\n') {
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else if (ch != '\r') {
      field += ch;
    }
  }
  if (quoted) throw ConfigurationError("unterminated quoted CSV field");
  if (any) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t col(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ConfigurationError("CSV is missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
};

Table load_table(const ResultBundle& b, const std::string& name) {
  const std::string* s = b.find(name);
  if (!s) throw ConfigurationError("bundle has no " + name);
  auto rows = parse_csv(*s);
  if (rows.empty()) throw ConfigurationError(name + " is empty");
  Table t;
  t.header = std::move(rows.front());
  t.rows.assign(rows.begin() + 1, rows.end());
  return t;
}

double number(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  return parse_dbl("csv", s);
}

}  // namespace

std::string plot_data(const ResultBundle& b) {
  CsvWriter out({"series", "x", "y", "stderr"});
  const auto binomial_se = [](double p, double n) {
    return n > 0 ? std::sqrt(p * (1 - p) / n) : 0.0;
  };
  if (b.experiment == "iv_study") {
    const Table t = load_table(b, "iv_accuracy.csv");
    const auto cr = t.col("criterion"), cT = t.col("T"), cp1 = t.col("p1"), cp2 = t.col("p2"),
               ca = t.col("alpha"), cy = t.col("accuracy"), cs = t.col("stderr");
    // Rows are grouped by (alpha, p2, T); emit each series contiguously.
    std::vector<std::string> keys;
    std::map<std::string, std::vector<std::vector<std::string>>> series;
    for (const auto& r : t.rows) {
      const std::string key =
          r[cr] + " p1=" + r[cp1] + " p2=" + r[cp2] + " alpha=" + r[ca];
      if (!series.count(key)) keys.push_back(key);
      series[key].push_back({key, r[cT], r[cy], r[cs]});
    }
    for (const auto& k : keys)
      for (const auto& row : series[k]) out.row(row);
  } else if (b.experiment == "conduct_study") {
    const Table t = load_table(b, "conduct_choice.csv");
    const auto ca = t.col("alpha"), cT = t.col("T"), ct = t.col("truth"), cc = t.col("candidate"),
               cv = t.col("cv_frequency"), cg = t.col("gmm_frequency"), cn = t.col("reps"),
               cf = t.col("failures");
    std::vector<std::string> keys;
    std::map<std::string, std::vector<std::vector<std::string>>> series;
    for (const auto& r : t.rows) {
      if (r[ct] != r[cc]) continue;
      const double n = number(r[cn]) - number(r[cf]);
      for (const auto& [label, col] : {std::pair<std::string, std::size_t>{"cv", cv}, {"gmm", cg}}) {
        const std::string key = label + " alpha=" + r[ca] + " truth=" + r[ct];
        if (!series.count(key)) keys.push_back(key);
        series[key].push_back({key, r[cT], r[col], fd(binomial_se(number(r[col]), n))});
      }
    }
    for (const auto& k : keys)
      for (const auto& row : series[k]) out.row(row);
  } else if (b.experiment == "null_test_study") {
    const Table t = load_table(b, "null_statistics.csv");
    std::vector<double> x;
    for (const auto& r : t.rows) {
      const double v = number(r[t.col("r_cv")]);
      if (std::isfinite(v)) x.push_back(v);
    }
    std::sort(x.begin(), x.end());
    const double n = static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double F = (static_cast<double>(i) + 1) / n;
      out.row({"ecdf r_cv", fd(x[i]), fd(F), fd(binomial_se(F, n))});
    }
    for (std::size_t i = 0; i < x.size(); ++i)
      out.row({"normal cdf", fd(x[i]), fd(0.5 * std::erfc(-x[i] / std::sqrt(2.0))), "0"});
  } else if (b.experiment == "consistency_study") {
    const Table t = load_table(b, "consistency.csv");
    for (const auto& r : t.rows)
      out.row({"cv " + r[t.col("path")], r[t.col("T")], r[t.col("accuracy")], r[t.col("stderr")]});
  } else if (b.experiment == "mpec_check") {
    const Table t = load_table(b, "mpec_equivalence.csv");
    for (const char* name : {"theta_gap", "profile_gap", "score_gap"})
      for (const auto& r : t.rows) out.row({name, r[t.col("instance")], r[t.col(name)], "0"});
  } else {
    throw ConfigurationError("unknown experiment '" + b.experiment + "' in bundle");
  }
  return out.str();
}

}  // namespace gmmcv
