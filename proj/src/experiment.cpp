#include "plcmac/experiment.hpp"

#include "plcmac/errors.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <set>
#include <thread>
#include <tuple>

namespace plcmac {

namespace {

std::string_view trim(std::string_view s)
{
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos)
        return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::string lower(std::string_view s)
{
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::vector<std::string_view> split(std::string_view s, char sep)
{
    std::vector<std::string_view> parts;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        parts.push_back(trim(s.substr(start, pos == std::string_view::npos ? pos : pos - start)));
        if (pos == std::string_view::npos)
            break;
        start = pos + 1;
    }
    return parts;
}

double parse_number(std::string_view text)
{
    text = trim(text);
    double value = 0.0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (text.empty() || ec != std::errc() || ptr != text.data() + text.size() || !std::isfinite(value))
        throw ConfigError(fmt::format("'{}' is not a number", text));
    return value;
}

std::uint64_t parse_count(std::string_view text)
{
    text = trim(text);
    std::uint64_t value = 0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (text.empty() || ec != std::errc() || ptr != text.data() + text.size())
        throw ConfigError(fmt::format("'{}' is not a non-negative integer", text));
    return value;
}

bool parse_bool(std::string_view text)
{
    const std::string t = lower(trim(text));
    if (t == "true" || t == "yes" || t == "on" || t == "1")
        return true;
    if (t == "false" || t == "no" || t == "off" || t == "0")
        return false;
    throw ConfigError(fmt::format("'{}' is not a boolean", text));
}

template <typename T, typename Parse>
std::vector<T> parse_list(std::string_view text, Parse parse)
{
    std::vector<T> out;
    if (trim(text).empty())
        throw ConfigError("empty list");
    for (auto item : split(text, ',')) {
        if (item.empty())
            throw ConfigError("empty list item");
        parse(item, out);
    }
    return out;
}

std::vector<std::uint64_t> parse_integer_sweep(std::string_view text)
{
    return parse_list<std::uint64_t>(text, [](std::string_view item, std::vector<std::uint64_t>& out) {
        for (double v : parse_sweep(item)) {
            if (v < 0.0 || v != std::floor(v))
                throw ConfigError(fmt::format("'{}' does not expand to integers", item));
            out.push_back(static_cast<std::uint64_t>(v));
        }
    });
}

std::string format_number(double v)
{
    return fmt::format("{:.10g}", v);
}

std::string csv_field(std::string_view s)
{
    if (s.find_first_of(",\"\n") == std::string_view::npos)
        return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"')
            out += '"';
        out += c == '\n' ? ' ' : c;
    }
    return out + '"';
}

std::vector<std::string> csv_split(const std::string& line)
{
    std::vector<std::string> fields(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                fields.back() += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                fields.back() += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.emplace_back();
        } else if (c != '\r') {
            fields.back() += c;
        }
    }
    return fields;
}

void write_metadata(std::ostream& out, const std::vector<std::string>& metadata)
{
    for (const auto& line : metadata)
        out << "# " << line << '\n';
}

// Runs fn(0..count-1) on up to `jobs` threads.
template <typename Fn>
void parallel_for(std::size_t count, unsigned jobs, Fn fn)
{
    const auto workers = static_cast<std::size_t>(std::max(1u, jobs));
    if (workers == 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i)
            fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, count); ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < count; i = next++)
                fn(i);
        });
    }
    for (auto& t : pool)
        t.join();
}

double seconds_since(std::chrono::steady_clock::time_point start)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

double lambda_sort_key(const ArrivalRate& lambda)
{
    return lambda.is_saturated() ? std::numeric_limits<double>::infinity() : *lambda.packets_per_s;
}

// Branch labels end in a number (init_I or seed) that must sort numerically.
std::pair<std::string, double> branch_key(const std::string& branch)
{
    const auto pos = branch.find_last_not_of("0123456789.e+");
    if (pos == std::string::npos || pos + 1 == branch.size())
        return {branch, 0.0};
    try {
        return {branch.substr(0, pos + 1), std::stod(branch.substr(pos + 1))};
    } catch (const std::exception&) {
        return {branch, 0.0};
    }
}

struct Point {
    Category category;
    Variant variant;
    unsigned n;
    ArrivalRate lambda;
};

std::vector<Point> sweep_points(const ExperimentConfig& config)
{
    std::vector<Point> points;
    for (auto c : config.categories)
        for (auto v : config.variants)
            for (auto n : config.n_values)
                for (const auto& l : config.lambdas)
                    points.push_back({c, v, n, l});
    return points;
}

Scenario scenario_for(const ExperimentConfig& config, const Point& pt)
{
    Scenario sc = make_scenario(pt.n, pt.category, pt.variant, pt.lambda);
    sc.queue_cap = config.queue_cap;
    sc.preload = config.preload;
    validate(sc);
    return sc;
}

using TableMap = std::map<std::pair<Category, Variant>, std::shared_ptr<const KernelTable>>;

TableMap prepare_tables(const ExperimentConfig& config, bool always = false)
{
    TableMap tables;
    if (config.kernel_mode != KernelMode::Table && !always)
        return tables;
    for (auto c : config.categories) {
        for (auto v : config.variants) {
            const StageSchedule schedule = apply_variant(preset_schedule(c), v);
            const double step = SolverSettings{}.table_step;
            tables[{c, v}] = std::make_shared<const KernelTable>(
                config.table_cache.empty() ? build_table(schedule, step)
                                           : load_or_build_table(schedule, step, config.table_cache));
        }
    }
    return tables;
}

SolverSettings settings_for(const ExperimentConfig& config, const TableMap& tables, const Point& pt,
                            KernelMode mode)
{
    SolverSettings s;
    s.tolerance = config.tolerance;
    s.kernel_mode = mode;
    if (mode == KernelMode::Table) {
        const auto it = tables.find({pt.category, pt.variant});
        if (it != tables.end())
            s.table = it->second;
    }
    return s;
}

ResultRow base_row(const Point& pt, Engine engine, std::string branch)
{
    ResultRow row;
    row.n = pt.n;
    row.lambda = pt.lambda;
    row.category = pt.category;
    row.variant = pt.variant;
    row.engine = engine;
    row.branch = std::move(branch);
    return row;
}

void fill_from_solution(ResultRow& row, const SolutionPoint& s)
{
    row.throughput = aggregate_throughput(s, row.n);
    row.service_time = s.service_time;
    row.p = s.p;
    row.rho = s.rho;
    row.converged = s.converged;
}

std::optional<Stability> stability_for(const ArrivalRate& lambda, double mu)
{
    if (lambda.is_saturated() || !(mu > 0.0))
        return std::nullopt;
    return *lambda.packets_per_s < mu ? Stability::Stable : Stability::Unstable;
}

std::vector<ResultRow> analysis_rows(const ExperimentConfig& config, const TableMap& tables,
                                     const Point& pt)
{
    const Scenario sc = scenario_for(config, pt);
    SolverSettings settings = settings_for(config, tables, pt, config.kernel_mode);
    double mu = 0.0;
    std::string mu_error;
    try {
        mu = mu_sat(sc, settings);
    } catch (const std::exception& e) {
        mu_error = e.what();
    }

    auto solve_one = [&](std::string label, auto&& solve) {
        ResultRow row = base_row(pt, Engine::Analysis, std::move(label));
        row.mu_sat = mu;
        row.stability = stability_for(pt.lambda, mu);
        const auto start = std::chrono::steady_clock::now();
        try {
            fill_from_solution(row, solve());
        } catch (const ConvergenceError& e) {
            fill_from_solution(row, e.last_iterate());
            row.error = e.what();
        } catch (const std::exception& e) {
            row.converged = false;
            row.error = e.what();
        }
        row.wall_time_s = seconds_since(start);
        if (row.error.empty() && !mu_error.empty())
            row.error = "mu_sat: " + mu_error;
        return row;
    };

    std::vector<ResultRow> rows;
    if (pt.lambda.is_saturated()) {
        rows.push_back(solve_one("analysis-sat", [&] { return solve_saturated(sc, settings); }));
        return rows;
    }
    for (double init : config.init_idle) {
        settings.init_idle = init;
        rows.push_back(solve_one(branch_label_analysis(init),
                                 [&] { return solve_unsaturated(sc, settings); }));
    }
    return rows;
}

ResultRow sim_row(const ExperimentConfig& config, const TableMap& tables, const Point& pt,
                  std::uint64_t seed, const std::filesystem::path* dump_dir)
{
    ResultRow row = base_row(pt, Engine::Sim, branch_label_sim(seed));
    const Scenario sc = scenario_for(config, pt);
    try {
        row.mu_sat = mu_sat(sc, settings_for(config, tables, pt, config.kernel_mode));
        row.stability = stability_for(pt.lambda, row.mu_sat);
    } catch (const std::exception&) {
    }
    const auto start = std::chrono::steady_clock::now();
    try {
        const SimStats stats = run_sim(sc, config.duration_s, config.warmup_s, seed);
        row.throughput = stats.long_run_throughput;
        row.service_time = stats.mean_service_time;
        row.p = stats.collision_fraction();
        row.dropped = stats.dropped;
        if (dump_dir) {
            std::ofstream out(*dump_dir / fmt::format("intervals_{}_seed{}.csv",
                                                      coordinate_stem(pt.n, pt.category, pt.variant,
                                                                      pt.lambda),
                                                      seed));
            write_intervals(out, stats.intervals);
        }
    } catch (const std::exception& e) {
        row.error = e.what();
    }
    row.wall_time_s = seconds_since(start);
    return row;
}

bool same_coordinate(const ResultRow& a, const ResultRow& b)
{
    return a.n == b.n && a.category == b.category && a.variant == b.variant &&
           a.lambda.packets_per_s == b.lambda.packets_per_s;
}

std::ofstream open_output(const std::filesystem::path& path)
{
    std::ofstream out(path);
    if (!out)
        throw ConfigError(fmt::format("cannot write '{}'", path.string()));
    return out;
}

} // namespace

Engine parse_engine(std::string_view text)
{
    const std::string t = lower(trim(text));
    if (t == "analysis")
        return Engine::Analysis;
    if (t == "sim" || t == "simulation")
        return Engine::Sim;
    if (t == "both")
        return Engine::Both;
    throw ConfigError(fmt::format("unknown engine '{}' (analysis, sim, both)", text));
}

std::string to_string(Engine e)
{
    switch (e) {
    case Engine::Analysis: return "analysis";
    case Engine::Sim: return "sim";
    case Engine::Both: return "both";
    }
    return "?";
}

std::vector<double> parse_sweep(std::string_view text)
{
    const auto parts = split(text, ':');
    if (parts.size() == 1)
        return {parse_number(parts[0])};
    if (parts.size() > 3)
        throw ConfigError(fmt::format("'{}' is not start:stop[:step]", text));
    const double start = parse_number(parts[0]);
    const double stop = parse_number(parts[1]);
    const double step = parts.size() == 3 ? parse_number(parts[2]) : 1.0;
    if (!(step > 0.0))
        throw ConfigError(fmt::format("sweep '{}' needs a positive step", text));
    if (stop < start)
        throw ConfigError(fmt::format("sweep '{}' runs backwards", text));
    const auto count = static_cast<std::size_t>(std::floor((stop - start) / step + 1e-9)) + 1;
    if (count > 1000000)
        throw ConfigError(fmt::format("sweep '{}' has too many points", text));
    std::vector<double> values;
    values.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
        values.push_back(start + static_cast<double>(i) * step);
    return values;
}

std::vector<ArrivalRate> parse_lambda_list(std::string_view text)
{
    return parse_list<ArrivalRate>(text, [](std::string_view item, std::vector<ArrivalRate>& out) {
        const std::string t = lower(item);
        if (t == "saturated" || t == "sat") {
            out.push_back(ArrivalRate::saturated());
            return;
        }
        for (double v : parse_sweep(item)) {
            if (v < 0.0)
                throw ConfigError(fmt::format("arrival rate {} is negative", v));
            out.push_back(ArrivalRate::poisson(v));
        }
    });
}

void set_config_value(ExperimentConfig& c, std::string_view key, std::string_view value)
{
    const std::string k = lower(trim(key));
    value = trim(value);
    try {
        if (k == "name") {
            if (value.empty() || value.find_first_of("/\\") != std::string_view::npos)
                throw ConfigError("name must be a plain file stem");
            c.name = std::string(value);
        } else if (k == "n") {
            std::vector<unsigned> ns;
            for (auto v : parse_integer_sweep(value)) {
                if (v < 1 || v > 100000)
                    throw ConfigError(fmt::format("node count {} out of range", v));
                ns.push_back(static_cast<unsigned>(v));
            }
            c.n_values = ns;
        } else if (k == "category") {
            c.categories = parse_list<Category>(value, [](std::string_view item, auto& out) {
                out.push_back(parse_category(item));
            });
        } else if (k == "variant") {
            c.variants = parse_list<Variant>(value, [](std::string_view item, auto& out) {
                out.push_back(parse_variant(item));
            });
        } else if (k == "lambda") {
            c.lambdas = parse_lambda_list(value);
        } else if (k == "queue_cap") {
            c.queue_cap = static_cast<std::uint32_t>(std::min<std::uint64_t>(parse_count(value), UINT32_MAX));
        } else if (k == "preload") {
            c.preload = static_cast<std::uint32_t>(std::min<std::uint64_t>(parse_count(value), UINT32_MAX));
        } else if (k == "engine" || k == "mode") {
            c.engine = parse_engine(value);
        } else if (k == "init_i") {
            c.init_idle = parse_list<double>(value, [](std::string_view item, auto& out) {
                for (double v : parse_sweep(item))
                    out.push_back(v);
            });
        } else if (k == "kernel") {
            c.kernel_mode = parse_kernel_mode(value);
        } else if (k == "bench_kernels") {
            c.bench_kernels = parse_list<KernelMode>(value, [](std::string_view item, auto& out) {
                out.push_back(parse_kernel_mode(item));
            });
        } else if (k == "tolerance") {
            c.tolerance = parse_number(value);
        } else if (k == "table_cache") {
            c.table_cache = std::string(value);
        } else if (k == "duration_s") {
            c.duration_s = parse_number(value);
        } else if (k == "warmup_s") {
            c.warmup_s = parse_number(value);
        } else if (k == "seeds" || k == "seed") {
            c.seeds = parse_integer_sweep(value);
        } else if (k == "dump_intervals") {
            c.dump_intervals = parse_bool(value);
        } else if (k == "out" || k == "dir") {
            c.out_dir = std::string(value);
        } else if (k == "jobs") {
            c.jobs = static_cast<unsigned>(std::max<std::uint64_t>(1, parse_count(value)));
        } else {
            throw ConfigError("unknown key");
        }
    } catch (const std::exception& e) {
        throw ConfigError(fmt::format("field '{}': {}", k, e.what()));
    }
}

void validate(const ExperimentConfig& c)
{
    auto fail = [](std::string_view field, std::string_view msg) {
        throw ConfigError(fmt::format("field '{}': {}", field, msg));
    };
    if (c.n_values.empty())
        fail("n", "empty sweep list");
    if (c.categories.empty())
        fail("category", "empty list");
    if (c.variants.empty())
        fail("variant", "empty list");
    if (c.lambdas.empty())
        fail("lambda", "empty sweep list");
    if (c.init_idle.empty())
        fail("init_I", "empty list");
    for (double i : c.init_idle) {
        if (!(i >= 0.0))
            fail("init_I", "values must be >= 0");
    }
    if (c.seeds.empty())
        fail("seeds", "empty list");
    if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size())
        fail("seeds", "seeds must be distinct");
    if (!(c.tolerance > 0.0))
        fail("tolerance", "must be positive");
    if (!(c.warmup_s >= 0.0))
        fail("warmup_s", "must be >= 0");
    if (!(c.duration_s > c.warmup_s))
        fail("duration_s", "must exceed warmup_s");
    if (c.queue_cap == 0)
        fail("queue_cap", "must be >= 1");
    if (c.preload > c.queue_cap)
        fail("preload", "exceeds queue_cap");
}

ExperimentConfig parse_config(std::istream& in, const std::string& origin, bool complete)
{
    static const std::map<std::string, std::set<std::string>> sections = {
        {"scenario", {"n", "category", "variant", "lambda", "queue_cap", "preload"}},
        {"engine", {"engine", "mode"}},
        {"solver", {"init_i", "kernel", "bench_kernels", "tolerance", "table_cache"}},
        {"sim", {"duration_s", "warmup_s", "seeds", "seed", "dump_intervals"}},
        {"output", {"dir", "out", "name", "jobs"}},
    };
    ExperimentConfig config;
    std::string section;
    std::string raw;
    std::size_t line_no = 0;
    auto fail = [&](const std::string& msg) {
        throw ConfigError(fmt::format("{}:{}: {}", origin, line_no, msg));
    };
    while (std::getline(in, raw)) {
        ++line_no;
        std::string_view line = raw;
        if (const auto hash = line.find('#'); hash != std::string_view::npos)
            line = line.substr(0, hash);
        line = trim(line);
        if (line.empty())
            continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                fail("unterminated section header");
            section = lower(trim(line.substr(1, line.size() - 2)));
            if (!sections.count(section))
                fail(fmt::format("unknown section [{}]", section));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos)
            fail(fmt::format("expected key = value, got '{}'", line));
        const std::string key = lower(trim(line.substr(0, eq)));
        if (section.empty())
            fail(fmt::format("field '{}': outside any section", key));
        if (!sections.at(section).count(key))
            fail(fmt::format("field '{}': not a key of [{}]", key, section));
        try {
            set_config_value(config, key, line.substr(eq + 1));
        } catch (const ConfigError& e) {
            fail(e.what());
        }
    }
    if (!complete)
        return config;
    try {
        validate(config);
    } catch (const ConfigError& e) {
        throw ConfigError(fmt::format("{}: {}", origin, e.what()));
    }
    return config;
}

ExperimentConfig load_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError(fmt::format("cannot open config '{}'", path.string()));
    return parse_config(in, path.string());
}

std::filesystem::path resolve_out_dir(const std::filesystem::path& requested)
{
    if (!requested.empty())
        return requested;
    if (const char* env = std::getenv("PLCMAC_OUT_DIR"); env && *env)
        return env;
    return "results";
}

std::string branch_label_analysis(double init_idle)
{
    return fmt::format("analysis-I{:g}", init_idle);
}

std::string branch_label_sim(std::uint64_t seed)
{
    return fmt::format("sim-seed-{}", seed);
}

std::string lambda_label(const ArrivalRate& lambda)
{
    return lambda.is_saturated() ? "saturated" : format_number(*lambda.packets_per_s);
}

std::string coordinate_stem(unsigned n, Category c, Variant v, const ArrivalRate& lambda)
{
    return fmt::format("n{}_{}_{}_lambda-{}", n, to_string(c), to_string(v),
                       lambda.is_saturated() ? "sat" : format_number(*lambda.packets_per_s));
}

bool row_less(const ResultRow& a, const ResultRow& b)
{
    auto key = [](const ResultRow& r) {
        return std::make_tuple(static_cast<int>(r.category), static_cast<int>(r.variant), r.n,
                               lambda_sort_key(r.lambda), static_cast<int>(r.engine),
                               branch_key(r.branch));
    };
    return key(a) < key(b);
}

double ComparisonRow::s_rel_error() const
{
    return std::abs(s_sim - s_analysis) / s_analysis;
}

double ComparisonRow::x_rel_error() const
{
    return std::abs(x_sim - x_analysis) / x_analysis;
}

std::vector<std::string> metadata_lines(const ExperimentConfig& config, std::string_view what)
{
    char stamp[32] = "";
    const std::time_t now = std::time(nullptr);
    std::tm utc{};
    gmtime_r(&now, &utc);
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", &utc);

    std::vector<std::string> seeds;
    for (auto s : config.seeds)
        seeds.push_back(std::to_string(s));
    return {
        fmt::format("plcmac {}", what),
        fmt::format("generated: {}", stamp),
        fmt::format("name: {}", config.name),
        fmt::format("engine: {}", to_string(config.engine)),
        fmt::format("kernel: {} tolerance: {}", to_string(config.kernel_mode), format_number(config.tolerance)),
        fmt::format("sim: duration_s={} warmup_s={} seeds={} queue_cap={} preload={}",
                    format_number(config.duration_s), format_number(config.warmup_s),
                    fmt::join(seeds, " "), config.queue_cap, config.preload),
    };
}

void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows,
                       const std::vector<std::string>& metadata)
{
    write_metadata(out, metadata);
    out << "n,lambda,category,variant,engine,branch,S_mbps,X_us,p,rho,mu_sat,stability,converged,"
           "dropped,wall_time_s,error\n";
    for (const auto& r : rows) {
        out << fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n", r.n,
                           lambda_label(r.lambda), to_string(r.category), to_string(r.variant),
                           to_string(r.engine), r.branch, format_number(r.throughput),
                           format_number(r.service_time), format_number(r.p),
                           r.rho ? format_number(*r.rho) : "",
                           format_number(r.mu_sat), r.stability ? to_string(*r.stability) : "",
                           r.converged ? (*r.converged ? "1" : "0") : "", r.dropped,
                           fmt::format("{:.6f}", r.wall_time_s), csv_field(r.error));
    }
}

std::vector<ResultRow> read_results_csv(std::istream& in)
{
    std::vector<ResultRow> rows;
    std::string line;
    std::vector<std::string> header;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#')
            continue;
        if (header.empty()) {
            header = csv_split(line);
            continue;
        }
        const auto fields = csv_split(line);
        if (fields.size() != header.size())
            throw ConfigError(fmt::format("results line {}: expected {} fields, got {}", line_no,
                                          header.size(), fields.size()));
        std::map<std::string, std::string> f;
        for (std::size_t i = 0; i < header.size(); ++i)
            f[header[i]] = fields[i];
        auto get = [&](const char* name) -> const std::string& {
            const auto it = f.find(name);
            if (it == f.end())
                throw ConfigError(fmt::format("results file lacks column '{}'", name));
            return it->second;
        };
        try {
            ResultRow r;
            r.n = static_cast<unsigned>(parse_count(get("n")));
            r.lambda = get("lambda") == "saturated" ? ArrivalRate::saturated()
                                                    : ArrivalRate::poisson(parse_number(get("lambda")));
            r.category = parse_category(get("category"));
            r.variant = parse_variant(get("variant"));
            r.engine = parse_engine(get("engine"));
            r.branch = get("branch");
            r.throughput = parse_number(get("S_mbps"));
            r.service_time = parse_number(get("X_us"));
            r.p = parse_number(get("p"));
            if (!get("rho").empty())
                r.rho = parse_number(get("rho"));
            r.mu_sat = parse_number(get("mu_sat"));
            if (get("stability") == "STABLE")
                r.stability = Stability::Stable;
            else if (get("stability") == "UNSTABLE")
                r.stability = Stability::Unstable;
            if (!get("converged").empty())
                r.converged = get("converged") == "1";
            r.dropped = parse_count(get("dropped"));
            r.wall_time_s = parse_number(get("wall_time_s"));
            r.error = get("error");
            rows.push_back(std::move(r));
        } catch (const ConfigError& e) {
            throw ConfigError(fmt::format("results line {}: {}", line_no, e.what()));
        } catch (const std::exception& e) {
            throw ConfigError(fmt::format("results line {}: {}", line_no, e.what()));
        }
    }
    return rows;
}

void write_comparison_csv(std::ostream& out, const std::vector<ComparisonRow>& rows,
                          const std::vector<std::string>& metadata)
{
    write_metadata(out, metadata);
    out << "n,lambda,category,variant,sim_branch,analysis_branch,S_sim,S_analysis,rel_err_S,X_sim,"
           "X_analysis,rel_err_X\n";
    for (const auto& r : rows) {
        out << fmt::format("{},{},{},{},{},{},{},{},{},{},{},{}\n", r.n, lambda_label(r.lambda),
                           to_string(r.category), to_string(r.variant), r.sim_branch,
                           r.analysis_branch, format_number(r.s_sim), format_number(r.s_analysis),
                           format_number(r.s_rel_error()), format_number(r.x_sim),
                           format_number(r.x_analysis), format_number(r.x_rel_error()));
    }
}

void write_intervals(std::ostream& out, const std::vector<IntervalSample>& intervals)
{
    out << "time_s,throughput_mbps,qmin,qavg,qmax\n";
    for (const auto& s : intervals) {
        out << fmt::format("{},{},{},{},{}\n", format_number(s.start_s), format_number(s.throughput_mbps),
                           s.qmin, format_number(s.qavg), s.qmax);
    }
}

std::vector<IntervalSample> read_intervals(std::istream& in)
{
    std::vector<IntervalSample> out;
    std::string line;
    bool header = true;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#')
            continue;
        if (header) {
            header = false;
            continue;
        }
        const auto f = csv_split(line);
        if (f.size() != 5)
            throw ConfigError(fmt::format("intervals line {}: expected 5 fields", line_no));
        IntervalSample s;
        s.start_s = parse_number(f[0]);
        s.throughput_mbps = parse_number(f[1]);
        s.qmin = static_cast<std::uint32_t>(parse_count(f[2]));
        s.qavg = parse_number(f[3]);
        s.qmax = static_cast<std::uint32_t>(parse_count(f[4]));
        if (!out.empty())
            out.back().width_s = s.start_s - out.back().start_s;
        out.push_back(s);
    }
    if (!out.empty() && out.size() > 1)
        out.back().width_s = out[out.size() - 2].width_s;
    return out;
}

std::string reproducible_view(std::istream& csv)
{
    std::string out;
    std::string line;
    std::optional<std::size_t> wall_column;
    bool header = true;
    while (std::getline(csv, line)) {
        if (!line.empty() && line[0] == '#')
            continue;
        auto fields = csv_split(line);
        if (header) {
            header = false;
            for (std::size_t i = 0; i < fields.size(); ++i) {
                if (fields[i] == "wall_time_s")
                    wall_column = i;
            }
        }
        if (wall_column && *wall_column < fields.size())
            fields.erase(fields.begin() + static_cast<std::ptrdiff_t>(*wall_column));
        for (std::size_t i = 0; i < fields.size(); ++i)
            out += (i ? "," : "") + csv_field(fields[i]);
        out += '\n';
    }
    return out;
}

ExperimentResult run_experiment(const ExperimentConfig& config, bool write_files)
{
    validate(config);
    const TableMap tables = prepare_tables(config);
    const auto points = sweep_points(config);
    const bool analysis = config.engine != Engine::Sim;
    const bool sim = config.engine != Engine::Analysis;

    std::filesystem::path out_dir;
    if (write_files) {
        out_dir = resolve_out_dir(config.out_dir);
        std::filesystem::create_directories(out_dir);
    }
    const std::filesystem::path* dump_dir = write_files && config.dump_intervals ? &out_dir : nullptr;

    struct Job {
        std::size_t point;
        std::optional<std::uint64_t> seed;  // unset: analysis
    };
    std::vector<Job> jobs;
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (analysis)
            jobs.push_back({i, std::nullopt});
        if (sim) {
            for (auto seed : config.seeds)
                jobs.push_back({i, seed});
        }
    }

    std::vector<std::vector<ResultRow>> produced(jobs.size());
    parallel_for(jobs.size(), config.jobs, [&](std::size_t j) {
        const Point& pt = points[jobs[j].point];
        if (jobs[j].seed)
            produced[j].push_back(sim_row(config, tables, pt, *jobs[j].seed, dump_dir));
        else
            produced[j] = analysis_rows(config, tables, pt);
    });

    ExperimentResult result;
    for (auto& rows : produced)
        std::move(rows.begin(), rows.end(), std::back_inserter(result.rows));
    std::sort(result.rows.begin(), result.rows.end(), row_less);

    if (config.engine == Engine::Both) {
        for (const auto& s : result.rows) {
            if (s.engine != Engine::Sim || !s.error.empty())
                continue;
            for (const auto& a : result.rows) {
                if (a.engine != Engine::Analysis || !a.error.empty() || !same_coordinate(a, s))
                    continue;
                ComparisonRow c;
                c.n = s.n;
                c.lambda = s.lambda;
                c.category = s.category;
                c.variant = s.variant;
                c.sim_branch = s.branch;
                c.analysis_branch = a.branch;
                c.s_sim = s.throughput;
                c.s_analysis = a.throughput;
                c.x_sim = s.service_time;
                c.x_analysis = a.service_time;
                result.comparisons.push_back(c);
            }
        }
    }

    if (write_files) {
        const auto results_path = out_dir / (config.name + "_results.csv");
        auto out = open_output(results_path);
        write_results_csv(out, result.rows, metadata_lines(config, "results"));
        result.files.push_back(results_path);
        if (config.engine == Engine::Both) {
            const auto cmp_path = out_dir / (config.name + "_comparison.csv");
            auto cmp = open_output(cmp_path);
            write_comparison_csv(cmp, result.comparisons, metadata_lines(config, "comparison"));
            result.files.push_back(cmp_path);
        }
    }
    return result;
}

std::vector<TimingRow> benchmark_runtimes(const ExperimentConfig& config, double min_total_s)
{
    validate(config);
    const bool analysis = config.engine != Engine::Sim;
    const bool sim = config.engine != Engine::Analysis;
    const bool wants_table =
        config.kernel_mode == KernelMode::Table ||
        std::count(config.bench_kernels.begin(), config.bench_kernels.end(), KernelMode::Table) > 0;
    // Table construction is a one-off cost and stays out of the timings.
    const TableMap tables = analysis && wants_table ? prepare_tables(config, true) : TableMap{};

    std::vector<TimingRow> rows;
    for (const auto& pt : sweep_points(config)) {
        const Scenario sc = scenario_for(config, pt);
        auto row_for = [&](std::string method) {
            TimingRow r;
            r.n = pt.n;
            r.lambda = pt.lambda;
            r.category = pt.category;
            r.variant = pt.variant;
            r.method = std::move(method);
            return r;
        };
        if (analysis) {
            const std::vector<KernelMode> modes =
                config.bench_kernels.empty() ? std::vector<KernelMode>{config.kernel_mode}
                                             : config.bench_kernels;
            for (const KernelMode mode : modes) {
                TimingRow r = row_for("analysis-" + to_string(mode));
                SolverSettings settings = settings_for(config, tables, pt, mode);
                settings.init_idle = config.init_idle.front();
                const auto start = std::chrono::steady_clock::now();
                double total = 0.0;
                do {
                    try {
                        if (sc.lambda.is_saturated())
                            solve_saturated(sc, settings);
                        else
                            solve_unsaturated(sc, settings);
                    } catch (const std::exception& e) {
                        r.error = e.what();
                    }
                    ++r.repeats;
                    total = seconds_since(start);
                } while (total < min_total_s && r.repeats < 100000);
                r.wall_time_s = total / r.repeats;
                rows.push_back(r);
            }
        }
        if (sim) {
            TimingRow r = row_for("sim");
            const auto start = std::chrono::steady_clock::now();
            try {
                run_sim(sc, config.duration_s, config.warmup_s, config.seeds.front());
            } catch (const std::exception& e) {
                r.error = e.what();
            }
            r.repeats = 1;
            r.wall_time_s = seconds_since(start);
            rows.push_back(r);
        }
    }
    return rows;
}

void write_timing_csv(std::ostream& out, const std::vector<TimingRow>& rows,
                      const std::vector<std::string>& metadata)
{
    write_metadata(out, metadata);
    out << "n,lambda,category,variant,method,repeats,wall_time_s,error\n";
    for (const auto& r : rows) {
        out << fmt::format("{},{},{},{},{},{},{:.9f},{}\n", r.n, lambda_label(r.lambda),
                           to_string(r.category), to_string(r.variant), r.method, r.repeats,
                           r.wall_time_s, csv_field(r.error));
    }
}

std::vector<ProbeRow> run_probes(const ExperimentConfig& config, bool write_files)
{
    validate(config);
    std::vector<Point> points;
    for (const auto& pt : sweep_points(config)) {
        if (pt.lambda.is_saturated())
            throw ConfigError("field 'lambda': transitory probes need finite arrival rates");
        points.push_back(pt);
    }
    const TableMap tables = prepare_tables(config);

    std::vector<ProbeRow> rows(points.size() * config.seeds.size());
    parallel_for(rows.size(), config.jobs, [&](std::size_t j) {
        const Point& pt = points[j / config.seeds.size()];
        ProbeRow& row = rows[j];
        row.n = pt.n;
        row.lambda = pt.lambda;
        row.category = pt.category;
        row.variant = pt.variant;
        row.seed = config.seeds[j % config.seeds.size()];
        const Scenario sc = scenario_for(config, pt);
        try {
            row.mu_sat = mu_sat(sc, settings_for(config, tables, pt, config.kernel_mode));
        } catch (const std::exception&) {
        }
        TransitoryProbe probe = run_transitory_probe(sc, config.duration_s, row.seed);
        row.transition_index = probe.transition_index;
        row.transition_time_s = probe.transition_time_s;
        row.intervals = std::move(probe.stats.intervals);
        const std::size_t split = row.transition_index.value_or(row.intervals.size());
        double before = 0.0;
        double after = 0.0;
        for (std::size_t i = 0; i < row.intervals.size(); ++i)
            (i < split ? before : after) += row.intervals[i].throughput_mbps;
        row.mean_before = split ? before / static_cast<double>(split) : 0.0;
        row.mean_after = split < row.intervals.size()
                             ? after / static_cast<double>(row.intervals.size() - split)
                             : 0.0;
        for (const auto& s : row.intervals) {
            if (s.qmax >= sc.queue_cap) {
                row.first_full_s = s.start_s;
                break;
            }
        }
    });

    if (write_files) {
        const auto out_dir = resolve_out_dir(config.out_dir);
        std::filesystem::create_directories(out_dir);
        auto summary = open_output(out_dir / (config.name + "_probes.csv"));
        write_metadata(summary, metadata_lines(config, "transitory probes"));
        summary << "n,lambda,category,variant,seed,mu_sat,transition_index,transition_time_s,"
                   "mean_before_mbps,mean_after_mbps,first_full_s,final_qmin,final_qavg,final_qmax\n";
        for (const auto& r : rows) {
            const IntervalSample last = r.intervals.empty() ? IntervalSample{} : r.intervals.back();
            summary << fmt::format(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n", r.n, lambda_label(r.lambda),
                to_string(r.category), to_string(r.variant), r.seed, format_number(r.mu_sat),
                r.transition_index ? std::to_string(*r.transition_index) : "NONE",
                r.transition_time_s ? format_number(*r.transition_time_s) : "NONE",
                format_number(r.mean_before), format_number(r.mean_after),
                r.first_full_s ? format_number(*r.first_full_s) : "NONE", last.qmin,
                format_number(last.qavg), last.qmax);
            auto series = open_output(out_dir / fmt::format("timeseries_{}_seed{}.csv",
                                                            coordinate_stem(r.n, r.category, r.variant,
                                                                            r.lambda),
                                                            r.seed));
            write_intervals(series, r.intervals);
        }
    }
    return rows;
}

PlotKind parse_plot_kind(std::string_view text)
{
    static const std::pair<const char*, PlotKind> kinds[] = {
        {"S_vs_lambda", PlotKind::S_vs_lambda}, {"X_vs_lambda", PlotKind::X_vs_lambda},
        {"S_vs_n", PlotKind::S_vs_n},           {"X_vs_p", PlotKind::X_vs_p},
        {"mu_sat_vs_n", PlotKind::mu_sat_vs_n}, {"timeseries", PlotKind::timeseries},
    };
    for (const auto& [name, kind] : kinds) {
        if (lower(name) == lower(trim(text)))
            return kind;
    }
    throw ConfigError(fmt::format(
        "unknown plot kind '{}' (S_vs_lambda, X_vs_lambda, S_vs_n, X_vs_p, mu_sat_vs_n, timeseries)",
        text));
}

std::string to_string(PlotKind kind)
{
    switch (kind) {
    case PlotKind::S_vs_lambda: return "S_vs_lambda";
    case PlotKind::X_vs_lambda: return "X_vs_lambda";
    case PlotKind::S_vs_n: return "S_vs_n";
    case PlotKind::X_vs_p: return "X_vs_p";
    case PlotKind::mu_sat_vs_n: return "mu_sat_vs_n";
    case PlotKind::timeseries: return "timeseries";
    }
    return "?";
}

std::vector<PlotSeries> plot_series(const std::vector<ResultRow>& rows, PlotKind kind)
{
    std::vector<const ResultRow*> usable;
    for (const auto& r : rows) {
        if (r.error.empty())
            usable.push_back(&r);
    }

    std::set<std::string> available;
    for (const auto* r : usable) {
        available.insert({"n", "S", "X", "p"});
        if (!r->lambda.is_saturated())
            available.insert("lambda");
        if (r->mu_sat > 0.0)
            available.insert("mu_sat");
    }
    auto require = [&](std::initializer_list<const char*> axes) {
        std::vector<std::string> missing;
        for (const char* a : axes) {
            if (!available.count(a))
                missing.emplace_back(a);
        }
        if (missing.empty())
            return;
        throw PlotDataError(fmt::format("{} needs axes {} which the results lack; available axes: {}",
                                        to_string(kind), fmt::join(missing, ", "),
                                        available.empty() ? std::string("none")
                                                          : fmt::format("{}", fmt::join(available, ", "))));
    };

    // Series are keyed by their label; std::map keeps the output order stable.
    std::map<std::string, PlotSeries> groups;
    auto add = [&](const std::string& label, const char* header, std::vector<double> point) {
        auto& s = groups[label];
        s.label = label;
        s.header = header;
        s.points.push_back(std::move(point));
    };
    auto prefix = [&](const ResultRow& r) {
        return fmt::format("{}_{}_{}", to_string(kind), to_string(r.category), to_string(r.variant));
    };

    switch (kind) {
    case PlotKind::S_vs_lambda:
    case PlotKind::X_vs_lambda:
        require({"lambda", kind == PlotKind::S_vs_lambda ? "S" : "X"});
        for (const auto* r : usable) {
            if (r->lambda.is_saturated())
                continue;
            add(fmt::format("{}_n{}_{}", prefix(*r), r->n, r->branch),
                kind == PlotKind::S_vs_lambda ? "lambda S" : "lambda X",
                {*r->lambda.packets_per_s, kind == PlotKind::S_vs_lambda ? r->throughput : r->service_time});
        }
        break;
    case PlotKind::S_vs_n:
        require({"n", "S"});
        for (const auto* r : usable) {
            add(fmt::format("{}_lambda-{}_{}", prefix(*r), lambda_label(r->lambda), r->branch), "n S",
                {static_cast<double>(r->n), r->throughput});
        }
        break;
    case PlotKind::X_vs_p:
        require({"p", "X"});
        for (const auto* r : usable) {
            add(fmt::format("{}_lambda-{}_{}", prefix(*r), lambda_label(r->lambda), r->branch), "p X",
                {r->p, r->service_time});
        }
        break;
    case PlotKind::mu_sat_vs_n: {
        require({"n", "mu_sat"});
        std::set<std::tuple<int, int, unsigned>> seen;
        for (const auto* r : usable) {
            if (!(r->mu_sat > 0.0) ||
                !seen.insert({static_cast<int>(r->category), static_cast<int>(r->variant), r->n}).second)
                continue;
            add(prefix(*r), "n mu_sat", {static_cast<double>(r->n), r->mu_sat});
        }
        break;
    }
    case PlotKind::timeseries:
        available.erase("lambda");
        throw PlotDataError(fmt::format(
            "timeseries needs axes time_s, throughput, qmin, qavg, qmax from an interval dump; "
            "available axes: {}",
            available.empty() ? std::string("none") : fmt::format("{}", fmt::join(available, ", "))));
    }

    std::vector<PlotSeries> out;
    for (auto& [label, s] : groups) {
        std::sort(s.points.begin(), s.points.end());
        out.push_back(std::move(s));
    }
    if (out.empty())
        throw PlotDataError(fmt::format("{}: no usable rows", to_string(kind)));
    return out;
}

PlotSeries timeseries(const std::vector<IntervalSample>& intervals, std::string label)
{
    if (intervals.empty())
        throw PlotDataError("timeseries: the interval dump is empty");
    PlotSeries s;
    s.label = std::move(label);
    s.header = "time_s throughput qmin qavg qmax";
    for (const auto& i : intervals)
        s.points.push_back({i.start_s, i.throughput_mbps, static_cast<double>(i.qmin), i.qavg,
                            static_cast<double>(i.qmax)});
    return s;
}

void write_plot_series(std::ostream& out, const PlotSeries& series)
{
    out << series.header << '\n';
    for (const auto& p : series.points) {
        for (std::size_t i = 0; i < p.size(); ++i)
            out << (i ? " " : "") << format_number(p[i]);
        out << '\n';
    }
}

std::vector<std::filesystem::path> emit_plot_data(const std::vector<ResultRow>& rows, PlotKind kind,
                                                  const std::filesystem::path& dir)
{
    const auto series = plot_series(rows, kind);
    std::filesystem::create_directories(dir);
    std::vector<std::filesystem::path> files;
    for (const auto& s : series) {
        const auto path = dir / (s.label + ".dat");
        auto out = open_output(path);
        write_plot_series(out, s);
        files.push_back(path);
    }
    return files;
}

} // namespace plcmac
