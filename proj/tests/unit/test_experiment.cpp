#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <limits>

#include "gmmcv/errors.hpp"
#include "gmmcv/experiment.hpp"

using namespace gmmcv;

namespace {

std::string error_of(const std::string& text) {
  try {
    ExperimentConfig::from_text(text);
  } catch (const ConfigurationError& e) {
    return e.what();
  }
  return {};
}

bool contains(const std::string& s, const std::string& part) {
  return s.find(part) != std::string::npos;
}

const char* kSmallIv =
    "experiment = iv_study\n"
    "iv.T = 60,120\n"
    "iv.reps = 12\n"
    "iv.criteria = cv,gmm,gmm_bic\n";

}  // namespace

TEST_CASE("config text parsing handles comments, blanks and whitespace") {
  const auto e = parse_config_text("# header\n\n  seed =  7  # trailing\nexperiment=iv_study\n");
  REQUIRE(e.size() == 2);
  CHECK(e[0].key == "seed");
  CHECK(e[0].value == "7");
  CHECK(e[0].line == 3);
  CHECK(e[1].key == "experiment");
  CHECK(e[1].value == "iv_study");
}

TEST_CASE("config text errors name the line and key") {
  CHECK_THROWS_WITH_AS(parse_config_text("a = 1\nb = 2\na = 3\n"),
                       "line 3: duplicate key 'a' (first set on line 1)", ConfigurationError);
  CHECK_THROWS_WITH_AS(parse_config_text("a = 1\njunk\n"), "line 2: expected 'key = value'",
                       ConfigurationError);
  CHECK_THROWS_AS(parse_config_text("= 4\n"), ConfigurationError);
}

TEST_CASE("list values split outside braces") {
  const auto items = split_list("{1,2,3}, {1,2}{3} ,{1}{2}{3}");
  REQUIRE(items.size() == 3);
  CHECK(items[0] == "{1,2,3}");
  CHECK(items[1] == "{1,2}{3}");
  CHECK(items[2] == "{1}{2}{3}");
  CHECK(split_list("100, 200").size() == 2);
  CHECK(split_list("").empty());
}

TEST_CASE("resolution fills defaults and canonicalizes values") {
  const auto cfg = ExperimentConfig::from_text(
      "experiment = conduct_study\nconduct.alpha = -0.30\nconduct.truths = {3,2,1}, {3}{1,2}\n");
  CHECK(cfg.experiment() == "conduct_study");
  CHECK(cfg.get("conduct.alpha") == "-0.3");
  CHECK(cfg.get("conduct.truths") == "{1,2,3},{1,2}{3}");
  CHECK(cfg.get("output") == "conduct_study");
  CHECK(cfg.get("optimizer.starts") == "12");
  CHECK(cfg.get_int("conduct.reps") == 100);
  CHECK_FALSE(cfg.has("iv.T"));

  const auto iv = ExperimentConfig::from_text("experiment = iv_study\n");
  CHECK(iv.get("iv.T") == "100,200,400,800,1600");
  CHECK(iv.get("optimizer.starts") == "1");
  CHECK(iv.get("optimizer.simplex") == "false");
  CHECK(iv.get_doubles("iv.alpha") == std::vector<double>{12.0});
}

TEST_CASE("resolved config text parses back to itself") {
  for (const auto& name : experiment_names()) {
    const auto a = ExperimentConfig::from_text("experiment = " + name + "\nseed = 99\n");
    const auto b = ExperimentConfig::from_text(a.text());
    CHECK(a.text() == b.text());
    CHECK(a.values() == b.values());
  }
}

TEST_CASE("invalid configs are rejected before any computation") {
  CHECK(contains(error_of("experiment = iv_study\niv.rep = 5\n"), "unknown key 'iv.rep'"));
  CHECK(contains(error_of("experiment = iv_study\niv.reps = 0\n"), "iv.reps"));
  CHECK(contains(error_of("experiment = iv_study\niv.reps =\n"), "iv.reps: empty value"));
  CHECK(contains(error_of("experiment = iv_study\niv.p1 = 11\n"), "iv.p1"));
  CHECK(contains(error_of("experiment = iv_study\niv.k = 2\n"), "iv.k"));
  CHECK(contains(error_of("experiment = iv_study\niv.criteria = cv,aic\n"), "iv.criteria"));
  CHECK(contains(error_of("experiment = iv_study\niv.T = 100,abc\n"), "iv.T"));
  CHECK(contains(error_of("experiment = iv_study\nconduct.J = 3\n"), "does not apply"));
  CHECK(contains(error_of("experiment = nope\n"), "unknown experiment 'nope'"));
  CHECK(contains(error_of("seed = 1\n"), "missing required key 'experiment'"));
  CHECK(contains(error_of("experiment = conduct_study\nconduct.alpha = 0.2\n"), "conduct.alpha"));
  CHECK(contains(error_of("experiment = conduct_study\nconduct.beta = 1,2,3\n"), "conduct.beta"));
  CHECK(contains(error_of("experiment = null_test_study\nnull.level = 1.5\n"), "null.level"));
  CHECK(contains(error_of("experiment = mpec_check\nmpec.kkt_tol = 0\n"), "mpec.kkt_tol"));
  CHECK(contains(error_of("experiment = iv_study\noutput = ../x\n"), "output"));
  CHECK(contains(error_of("experiment = iv_study\nparallelism = 0\n"), "parallelism"));
}

TEST_CASE("with() replaces one key and re-validates") {
  const auto cfg = ExperimentConfig::from_text(kSmallIv);
  const auto p4 = cfg.with("parallelism", "4");
  CHECK(p4.parallelism() == 4);
  CHECK(p4.get("iv.T") == "60,120");
  CHECK_THROWS_AS(cfg.with("iv.reps", "0"), ConfigurationError);
}

TEST_CASE("doubles format to the shortest round-trip text") {
  for (double x : {0.1, 1.0 / 3.0, -2.5e-300, 12.0, 123456789.125, 1e-8}) {
    const std::string s = format_double(x);
    CHECK(std::stod(s) == x);
  }
  CHECK(format_double(12.0) == "12");
  CHECK(format_double(0.0) == "0");
  CHECK(format_double(std::numeric_limits<double>::quiet_NaN()) == "nan");
  CHECK(format_double(-std::numeric_limits<double>::infinity()) == "-inf");
}

TEST_CASE("CSV reader handles quoted fields") {
  const auto rows = parse_csv("a,b,c\n\"{1,2}{3}\",\"say \"\"hi\"\"\",\n1,2,3");
  REQUIRE(rows.size() == 3);
  CHECK(rows[1][0] == "{1,2}{3}");
  CHECK(rows[1][1] == "say \"hi\"");
  CHECK(rows[1][2].empty());
  CHECK(rows[2][2] == "3");
  CHECK_THROWS_AS(parse_csv("\"open\n"), ConfigurationError);
}

TEST_CASE("iv bundle is byte-identical across runs and parallelism") {
  const auto cfg = ExperimentConfig::from_text(kSmallIv);
  const ResultBundle a = run_experiment(cfg);
  const ResultBundle b = run_experiment(cfg.with("parallelism", "3"));
  REQUIRE(a.files.size() == b.files.size());
  for (std::size_t i = 0; i < a.files.size(); ++i) {
    CHECK(a.files[i].name == b.files[i].name);
    if (a.files[i].name != "resolved.cfg") CHECK(a.files[i].content == b.files[i].content);
  }
  const std::string* csv = a.find("iv_accuracy.csv");
  REQUIRE(csv);
  const auto rows = parse_csv(*csv);
  CHECK(rows.size() == 1 + 2 * 3);
  CHECK(rows[0][0] == "criterion");

  const std::string plot = plot_data(a);
  CHECK(plot == plot_data(b));
  const auto series = parse_csv(plot);
  CHECK(series.size() == 1 + 6);
  CHECK(series[1][0] == series[2][0]);
  CHECK(series[1][1] == "60");
  CHECK(series[2][1] == "120");
}

TEST_CASE("echoed config reproduces the bundle") {
  const ResultBundle a = run_experiment(ExperimentConfig::from_text(kSmallIv));
  const ResultBundle b = run_experiment(ExperimentConfig::from_text(*a.find("resolved.cfg")));
  REQUIRE(a.files.size() == b.files.size());
  for (std::size_t i = 0; i < a.files.size(); ++i) CHECK(a.files[i].content == b.files[i].content);
}

TEST_CASE("conduct bundle quotes partition labels and plots the true candidate") {
  const auto cfg = ExperimentConfig::from_text(
      "experiment = conduct_study\nconduct.T = 25\nconduct.alpha = -0.3\n"
      "conduct.truths = {1,2}{3}\nconduct.reps = 3\noptimizer.starts = 4\n");
  const ResultBundle b = run_experiment(cfg);
  const std::string* choice = b.find("conduct_choice.csv");
  REQUIRE(choice);
  CHECK(contains(*choice, "\"{1,2}{3}\""));
  const auto rows = parse_csv(*choice);
  CHECK(rows.size() == 1 + 5);
  double total = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) total += std::stod(rows[i][4]);
  CHECK(total == doctest::Approx(1.0));
  const auto series = parse_csv(plot_data(b));
  REQUIRE(series.size() == 3);
  CHECK(series[1][0] == "cv alpha=-0.3 truth={1,2}{3}");
  CHECK(series[2][0] == "gmm alpha=-0.3 truth={1,2}{3}");
}

TEST_CASE("bundles round-trip through disk") {
  const auto dir = std::filesystem::temp_directory_path() / "gmmcv_bundle_test";
  std::filesystem::remove_all(dir);
  const auto cfg = ExperimentConfig::from_text(
      "experiment = mpec_check\nmpec.instances = 2\nmpec.T = 40\n");
  const ResultBundle a = run_experiment(cfg);
  write_bundle(a, dir);
  for (const auto& f : a.files) CHECK_FALSE(std::filesystem::exists(dir / (f.name + ".tmp")));
  const ResultBundle b = read_bundle(dir);
  CHECK(b.experiment == "mpec_check");
  for (const auto& f : a.files) {
    const std::string* s = b.find(f.name);
    REQUIRE(s);
    CHECK(*s == f.content);
  }
  CHECK(plot_data(a) == plot_data(b));
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(read_bundle(dir), ConfigurationError);
}

TEST_CASE("output root follows the environment") {
  const auto cfg = ExperimentConfig::from_text("experiment = iv_study\noutput = figure\n");
  ::setenv("GMMCV_OUTPUT_ROOT", "/tmp/somewhere", 1);
  CHECK(bundle_directory(cfg) == std::filesystem::path("/tmp/somewhere/figure"));
  ::unsetenv("GMMCV_OUTPUT_ROOT");
  CHECK(bundle_directory(cfg) == std::filesystem::path("results/figure"));
}

TEST_CASE("every experiment is listed with a description") {
  const auto names = experiment_names();
  CHECK(names.size() == 5);
  for (const auto& n : names) CHECK_FALSE(experiment_description(n).empty());
  CHECK_THROWS_AS(experiment_description("missing"), ConfigurationError);
}
