#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace gmmcv {

/// One `key = value` line of a config file.
struct ConfigEntry {
  std::string key;
  std::string value;
  int line = 0;
};

/// Parses the flat config grammar: one `key = value` per line, `#` starts a
/// comment, blank lines ignored. Duplicate keys and lines without `=` are
/// ConfigurationErrors naming the line.
std::vector<ConfigEntry> parse_config_text(const std::string& text);

/// Splits a list value on commas that are not inside braces and trims each
/// item, so "{1,2},{3}" yields two items.
std::vector<std::string> split_list(const std::string& value);

/// Experiment names accepted by the `experiment` key.
std::vector<std::string> experiment_names();
/// One-line description of an experiment.
std::string experiment_description(const std::string& name);

/// Fully resolved experiment configuration: every applicable key is present,
/// either as given or defaulted, in canonical text form.
class ExperimentConfig {
 public:
  static ExperimentConfig resolve(const std::vector<ConfigEntry>& entries);
  static ExperimentConfig from_text(const std::string& text);
  static ExperimentConfig from_file(const std::filesystem::path& path);

  /// Copy with one key replaced, re-resolved and re-validated.
  ExperimentConfig with(const std::string& key, const std::string& value) const;

  const std::string& experiment() const noexcept { return experiment_; }
  const std::vector<std::pair<std::string, std::string>>& values() const noexcept {
    return values_;
  }
  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;

  long get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<long> get_ints(const std::string& key) const;
  std::vector<double> get_doubles(const std::string& key) const;
  std::vector<std::string> get_list(const std::string& key) const;

  int parallelism() const { return static_cast<int>(get_int("parallelism")); }

  /// The resolved config in the input grammar; parsing it back gives an
  /// identical config.
  std::string text() const;

 private:
  std::string experiment_;
  std::vector<std::pair<std::string, std::string>> values_;
};

struct BundleFile {
  std::string name;
  std::string content;
};

/// The files of one experiment run, in a fixed order.
struct ResultBundle {
  std::string experiment;
  std::vector<BundleFile> files;

  /// nullptr when absent.
  const std::string* find(const std::string& name) const;
};

/// Runs the configured experiment. Every byte of the result is determined by
/// the config minus `parallelism` and `output`.
ResultBundle run_experiment(const ExperimentConfig& config);

/// Writes each file through a temporary name and a rename.
void write_bundle(const ResultBundle& bundle, const std::filesystem::path& dir);
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

/// Directory for a config's bundle: `root/<output>`. The root comes from
/// GMMCV_OUTPUT_ROOT, falling back to `results`.
std::filesystem::path output_root();
std::filesystem::path bundle_directory(const ExperimentConfig& config);

/// Long-format plot series (series, x, y, stderr) from a bundle.
std::string plot_data(const ResultBundle& bundle);
/// Loads resolved.cfg and the CSV tables of a bundle directory.
ResultBundle read_bundle(const std::filesystem::path& dir);

/// Minimal CSV reader for the tables written here: comma separated, double
/// quotes around fields containing commas or quotes, "" as an escaped quote.
std::vector<std::vector<std::string>> parse_csv(const std::string& text);

/// Shortest round-trip decimal text of a double; "nan", "inf", "-inf".
std::string format_double(double x);

}  // namespace gmmcv
