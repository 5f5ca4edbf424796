#pragma once

#include "plcmac/des_sim.hpp"
#include "plcmac/mac_domain.hpp"
#include "plcmac/solver.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace plcmac {

enum class Engine { Analysis, Sim, Both };

Engine parse_engine(std::string_view text);
std::string to_string(Engine e);

struct ExperimentConfig {
    std::string name = "experiment";
    std::vector<unsigned> n_values;
    std::vector<Category> categories{Category::CA32};
    std::vector<Variant> variants{Variant::Standard};
    std::vector<ArrivalRate> lambdas;
    std::uint32_t queue_cap = 1000;
    std::uint32_t preload = 0;

    Engine engine = Engine::Analysis;

    std::vector<double> init_idle{0.0, kLowLoadInitIdle};
    KernelMode kernel_mode = KernelMode::Exact;
    double tolerance = 1e-9;
    std::filesystem::path table_cache;  // empty: tables are not cached on disk
    std::vector<KernelMode> bench_kernels;  // empty: just kernel_mode

    double duration_s = 2000.0;
    double warmup_s = 0.0;
    std::vector<std::uint64_t> seeds{1};
    bool dump_intervals = false;

    std::filesystem::path out_dir;  // empty: see resolve_out_dir
    unsigned jobs = 1;
};

/// Throws ConfigError when a list is empty, seeds repeat, or a value is out
/// of range.
void validate(const ExperimentConfig& config);

/// Parses the sectioned key = value format. Errors carry `origin:line` and
/// the offending key. With `complete` unset the result is not validated, so
/// the command line can still supply missing sweeps.
ExperimentConfig parse_config(std::istream& in, const std::string& origin = "<config>",
                              bool complete = true);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Setters shared by the config parser and the command line, so both accept
/// the same spellings. `key` is the bare key ("n", "lambda", "seeds", ...).
void set_config_value(ExperimentConfig& config, std::string_view key, std::string_view value);

/// "1:5:0.5" expands inclusively; a plain number is a one-element sweep.
std::vector<double> parse_sweep(std::string_view text);
std::vector<ArrivalRate> parse_lambda_list(std::string_view text);

/// Output directory: the config's unless it is empty, then PLCMAC_OUT_DIR,
/// then "results".
std::filesystem::path resolve_out_dir(const std::filesystem::path& requested);

struct ResultRow {
    unsigned n = 0;
    ArrivalRate lambda;
    Category category = Category::CA32;
    Variant variant = Variant::Standard;
    Engine engine = Engine::Analysis;  // Analysis or Sim
    std::string branch;                // analysis-I0, analysis-sat, sim-seed-3, ...
    double throughput = 0.0;           // aggregate, Mbps
    double service_time = 0.0;         // us
    double p = 0.0;
    std::optional<double> rho;
    double mu_sat = 0.0;               // packets/s
    std::optional<Stability> stability;  // unset for saturated scenarios
    std::optional<bool> converged;       // analysis rows only
    std::uint64_t dropped = 0;
    double wall_time_s = 0.0;
    std::string error;
};

/// Total order on coordinates, then engine and branch.
bool row_less(const ResultRow& a, const ResultRow& b);

std::string branch_label_analysis(double init_idle);
std::string branch_label_sim(std::uint64_t seed);
std::string lambda_label(const ArrivalRate& lambda);

struct ComparisonRow {
    unsigned n = 0;
    ArrivalRate lambda;
    Category category = Category::CA32;
    Variant variant = Variant::Standard;
    std::string sim_branch;
    std::string analysis_branch;
    double s_sim = 0.0;
    double s_analysis = 0.0;
    double x_sim = 0.0;
    double x_analysis = 0.0;

    double s_rel_error() const;
    double x_rel_error() const;
};

struct ExperimentResult {
    std::vector<ResultRow> rows;
    std::vector<ComparisonRow> comparisons;  // only for Engine::Both
    std::vector<std::filesystem::path> files;
};

/// Executes the sweep cross product. Per-point solver failures land in the
/// row's error column. Writes files only when `write_files` is set.
ExperimentResult run_experiment(const ExperimentConfig& config, bool write_files = true);

void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows,
                       const std::vector<std::string>& metadata);
void write_comparison_csv(std::ostream& out, const std::vector<ComparisonRow>& rows,
                          const std::vector<std::string>& metadata);
void write_intervals(std::ostream& out, const std::vector<IntervalSample>& intervals);

/// Reads what write_results_csv wrote; '#' lines are skipped.
std::vector<ResultRow> read_results_csv(std::istream& in);
std::vector<IntervalSample> read_intervals(std::istream& in);

std::string coordinate_stem(unsigned n, Category c, Variant v, const ArrivalRate& lambda);

struct TimingRow {
    unsigned n = 0;
    ArrivalRate lambda;
    Category category = Category::CA32;
    Variant variant = Variant::Standard;
    std::string method;        // analysis-exact, analysis-exp, analysis-table, sim
    unsigned repeats = 0;
    double wall_time_s = 0.0;  // per run
    std::string error;
};

/// Wall clock per engine per point. Analysis solves are repeated until the
/// total exceeds `min_total_s` so that short solves are still resolved.
std::vector<TimingRow> benchmark_runtimes(const ExperimentConfig& config, double min_total_s = 0.2);
void write_timing_csv(std::ostream& out, const std::vector<TimingRow>& rows,
                      const std::vector<std::string>& metadata);

struct ProbeRow {
    unsigned n = 0;
    ArrivalRate lambda;
    Category category = Category::CA32;
    Variant variant = Variant::Standard;
    std::uint64_t seed = 0;
    double mu_sat = 0.0;
    std::optional<std::size_t> transition_index;
    std::optional<double> transition_time_s;
    double mean_before = 0.0;  // interval throughput, Mbps
    double mean_after = 0.0;
    std::optional<double> first_full_s;  // first interval with a queue at cap
    std::vector<IntervalSample> intervals;
};

/// Empty-start transitory probes over the sweep, one per seed.
std::vector<ProbeRow> run_probes(const ExperimentConfig& config, bool write_files = true);

enum class PlotKind { S_vs_lambda, X_vs_lambda, S_vs_n, X_vs_p, mu_sat_vs_n, timeseries };

PlotKind parse_plot_kind(std::string_view text);
std::string to_string(PlotKind kind);

class PlotDataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct PlotSeries {
    std::string label;   // file-name friendly
    std::string header;  // e.g. "lambda S"
    std::vector<std::vector<double>> points;
};

/// Groups rows into series for the requested kind; throws PlotDataError naming
/// the available axes when the rows cannot provide it.
std::vector<PlotSeries> plot_series(const std::vector<ResultRow>& rows, PlotKind kind);
PlotSeries timeseries(const std::vector<IntervalSample>& intervals, std::string label);

void write_plot_series(std::ostream& out, const PlotSeries& series);
/// One file per series in `dir`; returns the paths.
std::vector<std::filesystem::path> emit_plot_data(const std::vector<ResultRow>& rows, PlotKind kind,
                                                  const std::filesystem::path& dir);

/// "# key: value" lines stamped on every CSV written by run_experiment.
std::vector<std::string> metadata_lines(const ExperimentConfig& config, std::string_view what);

/// Rows with the comment lines and the wall_time_s column removed: the part
/// of a results file that must be identical across re-runs.
std::string reproducible_view(std::istream& csv);

} // namespace plcmac
