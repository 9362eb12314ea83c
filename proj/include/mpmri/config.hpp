// Run configuration: a strict TOML subset (sections, typed scalars,
// homogeneous arrays, comments). Unknown keys are rejected so typos fail
// loudly, and relative paths resolve against the config file's directory.
#pragma once

#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <variant>

#include "mpmri/phantom.hpp"
#include "mpmri/preprocess.hpp"
#include "mpmri/search.hpp"

namespace mpmri {
namespace toml {

struct Value;
using Array = std::vector<Value>;

struct Value {
  std::variant<std::string, long long, double, bool, Array> v;

  const std::string& as_string(const std::string& key) const {
    require(std::holds_alternative<std::string>(v), Err::InvalidConfig, "'" + key + "' must be a string");
    return std::get<std::string>(v);
  }
  long long as_int(const std::string& key) const {
    require(std::holds_alternative<long long>(v), Err::InvalidConfig, "'" + key + "' must be an integer");
    return std::get<long long>(v);
  }
  double as_float(const std::string& key) const {
    if (std::holds_alternative<long long>(v)) return static_cast<double>(std::get<long long>(v));
    require(std::holds_alternative<double>(v), Err::InvalidConfig, "'" + key + "' must be a number");
    return std::get<double>(v);
  }
  bool as_bool(const std::string& key) const {
    require(std::holds_alternative<bool>(v), Err::InvalidConfig, "'" + key + "' must be a boolean");
    return std::get<bool>(v);
  }
  const Array& as_array(const std::string& key) const {
    require(std::holds_alternative<Array>(v), Err::InvalidConfig, "'" + key + "' must be an array");
    return std::get<Array>(v);
  }
};

namespace detail {

inline void skip_ws(const std::string& s, std::size_t& i) {
  while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
}

inline Value parse_value(const std::string& s, std::size_t& i);

inline Value parse_scalar(const std::string& s, std::size_t& i) {
  if (s[i] == '"') {
    std::string out;
    ++i;
    while (i < s.size() && s[i] != '"') {
      if (s[i] == '\\') {
        ++i;
        require(i < s.size(), Err::InvalidConfig, "unterminated escape in string");
        switch (s[i]) {
          case '"': out.push_back('"'); break;
          case '\\': out.push_back('\\'); break;
          case 'n': out.push_back('\n'); break;
          case 't': out.push_back('\t'); break;
          default: fail(Err::InvalidConfig, std::string("unsupported escape '\\") + s[i] + "'");
        }
      } else {
        out.push_back(s[i]);
      }
      ++i;
    }
    require(i < s.size(), Err::InvalidConfig, "unterminated string");
    ++i;
    return Value{out};
  }
  if (s.compare(i, 4, "true") == 0 && (i + 4 == s.size() || !std::isalnum(static_cast<unsigned char>(s[i + 4])))) {
    i += 4;
    return Value{true};
  }
  if (s.compare(i, 5, "false") == 0 && (i + 5 == s.size() || !std::isalnum(static_cast<unsigned char>(s[i + 5])))) {
    i += 5;
    return Value{false};
  }
  std::size_t j = i;
  while (j < s.size() && (std::isalnum(static_cast<unsigned char>(s[j])) || s[j] == '.' || s[j] == '+' ||
                          s[j] == '-' || s[j] == '_'))
    ++j;
  std::string tok = s.substr(i, j - i);
  require(!tok.empty(), Err::InvalidConfig, "expected a value");
  tok.erase(std::remove(tok.begin(), tok.end(), '_'), tok.end());
  i = j;
  const bool is_float = tok.find_first_of(".eE") != std::string::npos &&
                        tok.find_first_not_of("+-0123456789") != std::string::npos;
  try {
    std::size_t used = 0;
    if (is_float) {
      const double d = std::stod(tok, &used);
      require(used == tok.size(), Err::InvalidConfig, "malformed number '" + tok + "'");
      return Value{d};
    }
    const long long n = std::stoll(tok, &used);
    require(used == tok.size(), Err::InvalidConfig, "malformed number '" + tok + "'");
    return Value{n};
  } catch (const std::logic_error&) {
    fail(Err::InvalidConfig, "malformed value '" + tok + "'");
  }
}

inline Value parse_value(const std::string& s, std::size_t& i) {
  skip_ws(s, i);
  require(i < s.size(), Err::InvalidConfig, "missing value");
  if (s[i] != '[') return parse_scalar(s, i);

  Array items;
  ++i;
  skip_ws(s, i);
  while (i < s.size() && s[i] != ']') {
    items.push_back(parse_value(s, i));
    skip_ws(s, i);
    if (i < s.size() && s[i] == ',') {
      ++i;
      skip_ws(s, i);
    } else {
      break;
    }
  }
  require(i < s.size() && s[i] == ']', Err::InvalidConfig, "unterminated array");
  ++i;
  for (std::size_t k = 1; k < items.size(); ++k)
    require(items[k].v.index() == items[0].v.index() ||
                (std::holds_alternative<double>(items[k].v) && std::holds_alternative<long long>(items[0].v)) ||
                (std::holds_alternative<long long>(items[k].v) && std::holds_alternative<double>(items[0].v)),
            Err::InvalidConfig, "arrays must be homogeneous");
  return Value{items};
}

// Strips a trailing comment, respecting quoted strings.
inline std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_string = !in_string;
    if (line[i] == '#' && !in_string) return line.substr(0, i);
  }
  return line;
}

inline bool valid_name(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') return false;
  return true;
}

}  // namespace detail

// Parses the subset into a flat map keyed "section.key" (top-level keys stay
// bare). Duplicate keys and anything outside the subset are errors.
inline std::map<std::string, Value> parse(const std::string& text) {
  std::map<std::string, Value> out;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto at = [&](const std::string& msg) { return msg + " at line " + std::to_string(lineno); };
    line = detail::strip_comment(line);
    std::size_t i = 0;
    detail::skip_ws(line, i);
    if (i == line.size() || line[i] == '\r') continue;

    if (line[i] == '[') {
      const auto close = line.find(']', i);
      require(close != std::string::npos, Err::InvalidConfig, at("unterminated section header"));
      section = line.substr(i + 1, close - i - 1);
      require(detail::valid_name(section), Err::InvalidConfig, at("bad section name"));
      i = close + 1;
      detail::skip_ws(line, i);
      require(i == line.size() || line[i] == '\r', Err::InvalidConfig, at("trailing characters after section"));
      continue;
    }

    std::size_t j = i;
    while (j < line.size() && line[j] != '=' && line[j] != ' ' && line[j] != '\t') ++j;
    const std::string key = line.substr(i, j - i);
    require(detail::valid_name(key), Err::InvalidConfig, at("bad key name"));
    i = j;
    detail::skip_ws(line, i);
    require(i < line.size() && line[i] == '=', Err::InvalidConfig, at("expected '=' after key"));
    ++i;
    const Value v = detail::parse_value(line, i);
    detail::skip_ws(line, i);
    require(i == line.size() || line[i] == '\r', Err::InvalidConfig, at("trailing characters after value"));

    const std::string full = section.empty() ? key : section + "." + key;
    require(!out.count(full), Err::InvalidConfig, at("duplicate key '" + full + "'"));
    out.emplace(full, v);
  }
  return out;
}

}  // namespace toml

struct DatasetConfig {
  double val_fraction = 1.0 / 3.0;
  int patch_size = 64;
  int crop_margin_px = 5;
  PairMode pair_mode = PairMode::Mixed;

  void validate() const {
    require(val_fraction >= 0.0 && val_fraction <= 1.0, Err::InvalidConfig, "val_fraction must be in [0,1]");
    require(patch_size >= 8, Err::InvalidConfig, "patch_size must be >= 8");
    require(crop_margin_px >= 0, Err::InvalidConfig, "crop_margin_px must be >= 0");
  }
};

struct TrainSection {
  int max_epochs = 100;
  int patience = 10;
  int batch_size = 32;
  double learning_rate = 1e-3;

  void validate() const {
    require(max_epochs >= 1 && patience >= 1 && batch_size >= 1, Err::InvalidConfig,
            "train parameters must be >= 1");
    require(learning_rate > 0.0, Err::InvalidConfig, "learning_rate must be positive");
  }
};

struct TriageSection {
  double threshold = 0.5;
  int top_k = 3;

  void validate() const {
    require(threshold > 0.0 && threshold < 1.0, Err::InvalidConfig, "threshold must be in (0,1)");
    require(top_k >= 1, Err::InvalidConfig, "top_k must be >= 1");
  }
};

struct SearchSection {
  int budget = 20;
  int trial_max_epochs = 30;
  int final_max_epochs = 100;
  SearchSpace space;
};

struct RunConfig {
  std::uint64_t seed = 0;
  int jobs = 1;
  std::filesystem::path data_dir = "data";
  std::filesystem::path work_dir = "work";
  PhantomSpec phantom;
  PreprocessConfig preprocess;
  DatasetConfig dataset;
  SearchSection search;
  TrainSection train;
  TriageSection triage;

  void validate() const {
    require(jobs >= 1, Err::InvalidConfig, "jobs must be >= 1");
    phantom.validate();
    preprocess.validate();
    dataset.validate();
    search.space.validate();
    require(search.budget >= 1 && search.trial_max_epochs >= 1 && search.final_max_epochs >= 1,
            Err::InvalidConfig, "search parameters must be >= 1");
    train.validate();
    triage.validate();
  }
};

namespace detail {

// Wraps the parsed table and records which keys were consumed, so leftovers
// can be reported as unknown.
class ConfigReader {
 public:
  explicit ConfigReader(std::map<std::string, toml::Value> table) : table_(std::move(table)) {}

  template <class F>
  void take(const std::string& key, F&& apply) {
    const auto it = table_.find(key);
    if (it == table_.end()) return;
    apply(it->second);
    used_.insert(key);
  }

  void finish() const {
    for (const auto& [key, value] : table_)
      require(used_.count(key) != 0, Err::InvalidConfig, "unknown config key '" + key + "'");
  }

 private:
  std::map<std::string, toml::Value> table_;
  std::set<std::string> used_;
};

inline int to_int(const toml::Value& v, const std::string& key) {
  const long long n = v.as_int(key);
  require(n >= std::numeric_limits<int>::min() && n <= std::numeric_limits<int>::max(), Err::InvalidConfig,
          "'" + key + "' out of range");
  return static_cast<int>(n);
}

template <class T, std::size_t N>
std::array<T, N> to_array(const toml::Value& v, const std::string& key) {
  const auto& items = v.as_array(key);
  require(items.size() == N, Err::InvalidConfig, "'" + key + "' must have " + std::to_string(N) + " elements");
  std::array<T, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = static_cast<T>(items[i].as_float(key));
  return out;
}

inline std::vector<int> to_int_list(const toml::Value& v, const std::string& key) {
  std::vector<int> out;
  for (const auto& item : v.as_array(key)) out.push_back(to_int(item, key));
  return out;
}

inline std::vector<double> to_float_list(const toml::Value& v, const std::string& key) {
  std::vector<double> out;
  for (const auto& item : v.as_array(key)) out.push_back(item.as_float(key));
  return out;
}

inline std::vector<std::string> to_string_list(const toml::Value& v, const std::string& key) {
  std::vector<std::string> out;
  for (const auto& item : v.as_array(key)) out.push_back(item.as_string(key));
  return out;
}

}  // namespace detail

// Applies "section.key=value" overrides (CLI --set flags) on top of the file
// table; the value text uses the same grammar as the file.
inline std::map<std::string, toml::Value> parse_config_text(const std::string& text,
                                                            const std::vector<std::string>& overrides) {
  auto table = toml::parse(text);
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    require(eq != std::string::npos && eq > 0, Err::InvalidConfig, "override must look like key=value");
    const std::string key = ov.substr(0, eq);
    std::size_t i = 0;
    const std::string rest = ov.substr(eq + 1);
    const toml::Value v = toml::detail::parse_value(rest, i);
    toml::detail::skip_ws(rest, i);
    require(i == rest.size(), Err::InvalidConfig, "trailing characters in override '" + ov + "'");
    table[key] = v;
  }
  return table;
}

inline RunConfig config_from_table(std::map<std::string, toml::Value> table,
                                   const std::filesystem::path& base_dir) {
  detail::ConfigReader r(std::move(table));
  RunConfig cfg;

  r.take("seed", [&](const toml::Value& v) {
    const long long n = v.as_int("seed");
    require(n >= 0, Err::InvalidConfig, "seed must be >= 0");
    cfg.seed = static_cast<std::uint64_t>(n);
  });
  r.take("jobs", [&](const toml::Value& v) { cfg.jobs = detail::to_int(v, "jobs"); });

  const auto path_of = [&](const toml::Value& v, const std::string& key) {
    std::filesystem::path p = v.as_string(key);
    return p.is_absolute() ? p : base_dir / p;
  };
  r.take("paths.data_dir", [&](const toml::Value& v) { cfg.data_dir = path_of(v, "paths.data_dir"); });
  r.take("paths.work_dir", [&](const toml::Value& v) { cfg.work_dir = path_of(v, "paths.work_dir"); });

  auto& ph = cfg.phantom;
  r.take("phantom.n_patients", [&](const toml::Value& v) { ph.n_patients = detail::to_int(v, "phantom.n_patients"); });
  r.take("phantom.lesion_prevalence",
         [&](const toml::Value& v) { ph.lesion_prevalence = v.as_float("phantom.lesion_prevalence"); });
  r.take("phantom.slice_min", [&](const toml::Value& v) { ph.slice_count_range[0] = detail::to_int(v, "phantom.slice_min"); });
  r.take("phantom.slice_max", [&](const toml::Value& v) { ph.slice_count_range[1] = detail::to_int(v, "phantom.slice_max"); });
  r.take("phantom.noise_sigma", [&](const toml::Value& v) { ph.noise_sigma = v.as_float("phantom.noise_sigma"); });
  r.take("phantom.bias_amplitude",
         [&](const toml::Value& v) { ph.bias_amplitude = v.as_float("phantom.bias_amplitude"); });
  r.take("phantom.spacing",
         [&](const toml::Value& v) { ph.spacing = detail::to_array<double, 3>(v, "phantom.spacing"); });
  r.take("phantom.fov_mm", [&](const toml::Value& v) { ph.fov_mm = v.as_float("phantom.fov_mm"); });
  r.take("phantom.lesion_span", [&](const toml::Value& v) { ph.lesion_span = v.as_float("phantom.lesion_span"); });
  r.take("phantom.gain_jitter", [&](const toml::Value& v) { ph.gain_jitter = v.as_float("phantom.gain_jitter"); });

  auto& pp = cfg.preprocess;
  r.take("preprocess.target_spacing",
         [&](const toml::Value& v) { pp.target_spacing = detail::to_array<double, 3>(v, "preprocess.target_spacing"); });
  r.take("preprocess.n4_iterations",
         [&](const toml::Value& v) { pp.n4_iterations = detail::to_int(v, "preprocess.n4_iterations"); });
  r.take("preprocess.n4_convergence_tol",
         [&](const toml::Value& v) { pp.n4_convergence_tol = v.as_float("preprocess.n4_convergence_tol"); });
  r.take("preprocess.n4_control_spacing_mm",
         [&](const toml::Value& v) { pp.n4_control_spacing_mm = v.as_float("preprocess.n4_control_spacing_mm"); });
  r.take("preprocess.blur_sigma_px",
         [&](const toml::Value& v) { pp.blur_sigma_px = v.as_float("preprocess.blur_sigma_px"); });
  r.take("preprocess.normalize", [&](const toml::Value& v) {
    const auto& s = v.as_string("preprocess.normalize");
    if (s == "zscore")
      pp.normalize = PreprocessConfig::Normalize::ZScore;
    else if (s == "none")
      pp.normalize = PreprocessConfig::Normalize::None;
    else
      fail(Err::InvalidConfig, "preprocess.normalize must be 'zscore' or 'none'");
  });
  r.take("preprocess.n4_histogram_bins",
         [&](const toml::Value& v) { pp.n4_histogram_bins = detail::to_int(v, "preprocess.n4_histogram_bins"); });
  r.take("preprocess.n4_wiener_noise",
         [&](const toml::Value& v) { pp.n4_wiener_noise = v.as_float("preprocess.n4_wiener_noise"); });
  r.take("preprocess.n4_fwhm", [&](const toml::Value& v) { pp.n4_fwhm = v.as_float("preprocess.n4_fwhm"); });

  auto& ds = cfg.dataset;
  r.take("dataset.val_fraction", [&](const toml::Value& v) { ds.val_fraction = v.as_float("dataset.val_fraction"); });
  r.take("dataset.patch_size", [&](const toml::Value& v) { ds.patch_size = detail::to_int(v, "dataset.patch_size"); });
  r.take("dataset.crop_margin_px",
         [&](const toml::Value& v) { ds.crop_margin_px = detail::to_int(v, "dataset.crop_margin_px"); });
  r.take("dataset.pair_mode",
         [&](const toml::Value& v) { ds.pair_mode = pair_mode_from_string(v.as_string("dataset.pair_mode")); });

  auto& se = cfg.search;
  r.take("search.budget", [&](const toml::Value& v) { se.budget = detail::to_int(v, "search.budget"); });
  r.take("search.trial_max_epochs",
         [&](const toml::Value& v) { se.trial_max_epochs = detail::to_int(v, "search.trial_max_epochs"); });
  r.take("search.final_max_epochs",
         [&](const toml::Value& v) { se.final_max_epochs = detail::to_int(v, "search.final_max_epochs"); });
  r.take("search.blocks", [&](const toml::Value& v) { se.space.blocks = detail::to_int_list(v, "search.blocks"); });
  r.take("search.filters", [&](const toml::Value& v) { se.space.filters = detail::to_int_list(v, "search.filters"); });
  r.take("search.kernels", [&](const toml::Value& v) { se.space.kernels = detail::to_int_list(v, "search.kernels"); });
  r.take("search.dropouts",
         [&](const toml::Value& v) { se.space.dropouts = detail::to_float_list(v, "search.dropouts"); });
  r.take("search.dense_units",
         [&](const toml::Value& v) { se.space.dense_units = detail::to_int_list(v, "search.dense_units"); });
  r.take("search.normalizations",
         [&](const toml::Value& v) { se.space.normalizations = detail::to_string_list(v, "search.normalizations"); });
  r.take("search.flips", [&](const toml::Value& v) { se.space.flips = detail::to_int_list(v, "search.flips"); });
  r.take("search.translates",
         [&](const toml::Value& v) { se.space.translates = detail::to_float_list(v, "search.translates"); });
  r.take("search.contrasts",
         [&](const toml::Value& v) { se.space.contrasts = detail::to_float_list(v, "search.contrasts"); });
  r.take("search.modes", [&](const toml::Value& v) { se.space.modes = detail::to_string_list(v, "search.modes"); });

  auto& tr = cfg.train;
  r.take("train.max_epochs", [&](const toml::Value& v) { tr.max_epochs = detail::to_int(v, "train.max_epochs"); });
  r.take("train.patience", [&](const toml::Value& v) { tr.patience = detail::to_int(v, "train.patience"); });
  r.take("train.batch_size", [&](const toml::Value& v) { tr.batch_size = detail::to_int(v, "train.batch_size"); });
  r.take("train.learning_rate",
         [&](const toml::Value& v) { tr.learning_rate = v.as_float("train.learning_rate"); });

  auto& tg = cfg.triage;
  r.take("triage.threshold", [&](const toml::Value& v) { tg.threshold = v.as_float("triage.threshold"); });
  r.take("triage.top_k", [&](const toml::Value& v) { tg.top_k = detail::to_int(v, "triage.top_k"); });

  r.finish();

  if (const char* env = std::getenv("MPMRI_SEED")) {
    try {
      std::size_t used = 0;
      const unsigned long long n = std::stoull(env, &used);
      require(used == std::string(env).size(), Err::InvalidConfig, "MPMRI_SEED must be an integer");
      cfg.seed = n;
    } catch (const std::logic_error&) {
      fail(Err::InvalidConfig, "MPMRI_SEED must be an integer");
    }
  }

  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path);
  require(in.good(), Err::MissingFile, "cannot open config '" + path.string() + "'");
  std::ostringstream text;
  text << in.rdbuf();
  auto base = path.parent_path();
  if (base.empty()) base = ".";
  return config_from_table(parse_config_text(text.str(), overrides), base);
}

}  // namespace mpmri
