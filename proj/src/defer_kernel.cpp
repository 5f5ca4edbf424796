#include "plcmac/defer_kernel.hpp"

#include "plcmac/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

namespace plcmac {

namespace {

void check_probability(double pb)
{
    if (!(pb >= 0.0 && pb <= 1.0))
        throw DomainError("busy-slot probability must lie in [0, 1]");
}

// x^e in log space with 0^0 = 1: a zero exponent contributes nothing even
// when log_base is -inf.
double log_power(double log_base, unsigned exponent)
{
    return exponent == 0 ? 0.0 : static_cast<double>(exponent) * log_base;
}

// Binomial coefficients in log space for one (W, M) pair. C(M+k, k+l) with
// W = 63, M = 15 reaches ~1e18 before being multiplied by tiny probability
// powers, so terms are assembled as exp(log C + a log(1-pb) + b log pb).
class StageTerms {
public:
    StageTerms(unsigned window, unsigned deferral) : window_(window), deferral_(deferral)
    {
        if (deferral > window)
            throw DomainError("deferral initializer exceeds contention window");
        const unsigned top = window + deferral + 1;
        log_factorial_.resize(top + 1, 0.0);
        for (unsigned i = 2; i <= top; ++i)
            log_factorial_[i] = log_factorial_[i - 1] + std::log(static_cast<double>(i));
    }

    double p_defer(double pb) const
    {
        const double lp = std::log(pb);
        const double lq = std::log1p(-pb);
        const unsigned m = deferral_;
        double sum = 0.0;
        for (unsigned k = 1; k <= window_ - m; ++k) {
            for (unsigned l = 0; l < k; ++l)
                sum += std::exp(log_choose(m + l, l) + log_power(lq, l) + log_power(lp, m + 1));
        }
        return std::clamp(sum / (window_ + 1.0), 0.0, 1.0);
    }

    double slots(double pb) const
    {
        const double lp = std::log(pb);
        const double lq = std::log1p(-pb);
        const unsigned m = deferral_;
        // Backoff draws 0..M always expire before M+1 busy slots can occur.
        double sum = 0.5 * (static_cast<double>(m) * m + m);
        for (unsigned k = 1; k <= window_ - m; ++k) {
            // defer after l idle and M+1 busy slots
            for (unsigned l = 0; l < k; ++l) {
                sum += std::exp(log_choose(m + l, l) + log_power(lq, l) + log_power(lp, m + 1)) *
                       static_cast<double>(l + m + 1);
            }
            // backoff k+M expires with at most M busy slots seen
            for (unsigned l = 0; l <= m; ++l) {
                sum += std::exp(log_choose(m + k, k + l) + log_power(lq, k + l) +
                                log_power(lp, m - l)) *
                       static_cast<double>(k + m);
            }
        }
        return std::clamp(sum / (window_ + 1.0), 0.0, static_cast<double>(window_));
    }

private:
    double log_choose(unsigned n, unsigned k) const
    {
        return log_factorial_[n] - log_factorial_[k] - log_factorial_[n - k];
    }

    unsigned window_;
    unsigned deferral_;
    std::vector<double> log_factorial_;
};

} // namespace

double p_defer_exact(unsigned window, unsigned deferral, double pb)
{
    check_probability(pb);
    return StageTerms(window, deferral).p_defer(pb);
}

double expected_slots_exact(unsigned window, unsigned deferral, double pb)
{
    check_probability(pb);
    return StageTerms(window, deferral).slots(pb);
}

double p_defer_exp_approx(unsigned window, unsigned deferral, double pb)
{
    check_probability(pb);
    if (window == 0)
        throw DomainError("exponential approximation needs a positive contention window");
    if (pb == 0.0)
        return 0.0;
    const double backoff_rate = 2.0 / window;
    const double deferral_rate = pb / (deferral + 1.0);
    return deferral_rate / (backoff_rate + deferral_rate);
}

KernelValues stage_kernel_exact(unsigned window, Deferral deferral, double pb)
{
    check_probability(pb);
    if (deferral.is_infinite())
        return {0.0, (window + 1.0) / 2.0};
    StageTerms terms(window, deferral.value());
    return {terms.p_defer(pb), terms.slots(pb)};
}

OracleResult mc_oracle(unsigned window, unsigned deferral, double pb, std::uint64_t trials,
                       std::uint64_t seed)
{
    check_probability(pb);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<unsigned> draw(0, window);
    std::bernoulli_distribution busy(pb);

    std::uint64_t defers = 0;
    double slot_sum = 0.0;
    double slot_sq = 0.0;
    for (std::uint64_t t = 0; t < trials; ++t) {
        unsigned bc = draw(rng);
        unsigned dc = deferral;
        std::uint64_t elapsed = 0;
        bool deferred = false;
        while (bc > 0) {
            ++elapsed;
            if (busy(rng)) {
                if (dc == 0) {
                    deferred = true;
                    break;
                }
                --dc;
            }
            --bc;
        }
        defers += deferred ? 1 : 0;
        const auto e = static_cast<double>(elapsed);
        slot_sum += e;
        slot_sq += e * e;
    }

    OracleResult r;
    r.trials = trials;
    if (trials == 0)
        return r;
    const auto nt = static_cast<double>(trials);
    r.defer_frequency = static_cast<double>(defers) / nt;
    r.mean_slots = slot_sum / nt;
    r.defer_stderr = std::sqrt(r.defer_frequency * (1.0 - r.defer_frequency) / nt);
    const double var = std::max(0.0, slot_sq / nt - r.mean_slots * r.mean_slots);
    r.slots_stderr = std::sqrt(var / nt);
    return r;
}

std::size_t grid_points(double step)
{
    if (!(step > 0.0) || !std::isfinite(step))
        throw DomainError("table step must be positive");
    const double cells = std::ceil(1.0 / step - 1e-9);
    return static_cast<std::size_t>(cells) + 1;
}

KernelTable::KernelTable(double step, std::vector<Column> columns)
    : step_(step), points_(grid_points(step)), columns_(std::move(columns))
{
    for (const auto& c : columns_) {
        if (!c.deferral.is_infinite() &&
            (c.defer_values.size() != points_ || c.slot_values.size() != points_))
            throw DomainError("kernel table column has the wrong number of grid points");
    }
}

double KernelTable::grid(std::size_t j) const
{
    return std::min(static_cast<double>(j) * step_, 1.0);
}

KernelValues KernelTable::lookup(std::size_t stage_index, double pb) const
{
    check_probability(pb);
    const Column& c = columns_.at(stage_index);
    if (c.deferral.is_infinite())
        return {0.0, (c.window + 1.0) / 2.0};

    auto j = static_cast<std::size_t>(std::floor(pb / step_));
    j = std::min(j, points_ - 2);
    const double x0 = grid(j);
    const double x1 = grid(j + 1);
    const double t = std::clamp((pb - x0) / (x1 - x0), 0.0, 1.0);
    if (t == 0.0)
        return {c.defer_values[j], c.slot_values[j]};
    return {c.defer_values[j] + t * (c.defer_values[j + 1] - c.defer_values[j]),
            c.slot_values[j] + t * (c.slot_values[j + 1] - c.slot_values[j])};
}

bool KernelTable::matches(const StageSchedule& schedule, double step) const
{
    if (step != step_ || schedule.stages() != columns_.size())
        return false;
    for (std::size_t i = 0; i < columns_.size(); ++i) {
        if (columns_[i].window != schedule.window[i] || columns_[i].deferral != schedule.deferral[i])
            return false;
    }
    return true;
}

KernelTable build_table(const StageSchedule& schedule, double step)
{
    validate(schedule);
    const std::size_t points = grid_points(step);
    std::vector<KernelTable::Column> columns;
    columns.reserve(schedule.stages());
    for (std::size_t i = 0; i < schedule.stages(); ++i) {
        KernelTable::Column col;
        col.window = schedule.window[i];
        col.deferral = schedule.deferral[i];
        if (!col.deferral.is_infinite()) {
            // Reuse an earlier stage with the same pair.
            const auto same = std::find_if(columns.begin(), columns.end(), [&](const auto& other) {
                return other.window == col.window && other.deferral == col.deferral;
            });
            if (same != columns.end()) {
                col.defer_values = same->defer_values;
                col.slot_values = same->slot_values;
            } else {
                StageTerms terms(col.window, col.deferral.value());
                col.defer_values.resize(points);
                col.slot_values.resize(points);
                for (std::size_t j = 0; j < points; ++j) {
                    const double pb = std::min(static_cast<double>(j) * step, 1.0);
                    col.defer_values[j] = terms.p_defer(pb);
                    col.slot_values[j] = terms.slots(pb);
                }
            }
        }
        columns.push_back(std::move(col));
    }
    return KernelTable(step, std::move(columns));
}

namespace {

constexpr char kMagic[8] = {'P', 'L', 'C', 'K', 'T', 'B', 'L', '\0'};

template <typename T>
void put(std::ostream& out, const T& value)
{
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in)
{
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in)
        throw ConfigError("kernel table file is truncated");
    return value;
}

} // namespace

void save_table(const KernelTable& table, const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw ConfigError("cannot write kernel table " + path.string());
    out.write(kMagic, sizeof(kMagic));
    put(out, kKernelTableVersion);
    put(out, table.step());
    put(out, static_cast<std::uint64_t>(table.points()));
    put(out, static_cast<std::uint32_t>(table.stages()));
    for (std::size_t i = 0; i < table.stages(); ++i) {
        const auto& c = table.column(i);
        put(out, static_cast<std::uint32_t>(c.window));
        put(out, static_cast<std::uint8_t>(c.deferral.is_infinite() ? 1 : 0));
        put(out, static_cast<std::uint32_t>(c.deferral.is_infinite() ? 0 : c.deferral.value()));
    }
    for (std::size_t i = 0; i < table.stages(); ++i) {
        const auto& c = table.column(i);
        if (c.deferral.is_infinite())
            continue;
        out.write(reinterpret_cast<const char*>(c.defer_values.data()),
                  static_cast<std::streamsize>(c.defer_values.size() * sizeof(double)));
        out.write(reinterpret_cast<const char*>(c.slot_values.data()),
                  static_cast<std::streamsize>(c.slot_values.size() * sizeof(double)));
    }
    if (!out)
        throw ConfigError("failed writing kernel table " + path.string());
}

KernelTable load_table(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw ConfigError("cannot open kernel table " + path.string());
    char magic[sizeof(kMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw ConfigError(path.string() + " is not a kernel table file");
    const auto version = get<std::uint32_t>(in);
    if (version != kKernelTableVersion)
        throw ConfigError("unsupported kernel table version " + std::to_string(version));
    const auto step = get<double>(in);
    const auto points = get<std::uint64_t>(in);
    const auto stages = get<std::uint32_t>(in);
    if (points != grid_points(step))
        throw ConfigError("kernel table header is inconsistent");

    std::vector<KernelTable::Column> columns(stages);
    for (auto& c : columns) {
        c.window = get<std::uint32_t>(in);
        const auto infinite = get<std::uint8_t>(in);
        const auto deferral = get<std::uint32_t>(in);
        c.deferral = infinite ? Deferral::infinite() : Deferral::finite(deferral);
    }
    for (auto& c : columns) {
        if (c.deferral.is_infinite())
            continue;
        c.defer_values.resize(points);
        c.slot_values.resize(points);
        in.read(reinterpret_cast<char*>(c.defer_values.data()),
                static_cast<std::streamsize>(points * sizeof(double)));
        in.read(reinterpret_cast<char*>(c.slot_values.data()),
                static_cast<std::streamsize>(points * sizeof(double)));
        if (!in)
            throw ConfigError("kernel table file is truncated");
    }
    return KernelTable(step, std::move(columns));
}

std::string table_cache_name(const StageSchedule& schedule, double step)
{
    std::ostringstream name;
    name << "kernel_W";
    for (std::size_t i = 0; i < schedule.stages(); ++i)
        name << (i ? "-" : "") << schedule.window[i];
    name << "_M";
    for (std::size_t i = 0; i < schedule.stages(); ++i)
        name << (i ? "-" : "") << to_string(schedule.deferral[i]);
    name.precision(6);
    name << std::scientific << "_step" << step << ".bin";
    return name.str();
}

KernelTable load_or_build_table(const StageSchedule& schedule, double step,
                                const std::filesystem::path& cache_dir)
{
    if (cache_dir.empty())
        return build_table(schedule, step);
    const auto path = cache_dir / table_cache_name(schedule, step);
    if (std::filesystem::exists(path)) {
        try {
            auto table = load_table(path);
            if (table.matches(schedule, step))
                return table;
        } catch (const ConfigError&) {
            // stale or corrupt cache; rebuild below
        }
    }
    auto table = build_table(schedule, step);
    std::filesystem::create_directories(cache_dir);
    save_table(table, path);
    return table;
}

} // namespace plcmac
