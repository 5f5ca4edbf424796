#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace plcmac {

/// Initial value of the deferral counter at one backoff stage.
///
/// A stage is either finite (the node tolerates that many overheard busy slots
/// before deferring) or infinite (the node never defers, DCF-like behaviour).
class Deferral {
public:
    static constexpr Deferral finite(unsigned count) { return Deferral(count); }
    static constexpr Deferral infinite() { return Deferral(); }

    constexpr bool is_infinite() const { return !count_.has_value(); }
    /// Throws std::bad_optional_access on an infinite deferral.
    constexpr unsigned value() const { return count_.value(); }

    friend constexpr bool operator==(const Deferral&, const Deferral&) = default;

private:
    constexpr Deferral() = default;
    constexpr explicit Deferral(unsigned count) : count_(count) {}

    std::optional<unsigned> count_;
};

std::string to_string(Deferral d);

/// Contention windows and deferral initializers, one entry per backoff stage.
/// Stage i in [1, m] lives at vector index i-1.
struct StageSchedule {
    std::vector<unsigned> window;     // W_i, backoff drawn uniformly on {0..W_i}
    std::vector<Deferral> deferral;   // M_i

    std::size_t stages() const { return window.size(); }

    friend bool operator==(const StageSchedule&, const StageSchedule&) = default;
};

/// Throws ConfigError when the per-stage vectors disagree in length or are empty.
void validate(const StageSchedule& schedule);

enum class Category { CA32, CA10 };
enum class Variant { Standard, NoDeferral, AlwaysDefer };

Category parse_category(std::string_view text);
Variant parse_variant(std::string_view text);
std::string to_string(Category c);
std::string to_string(Variant v);

StageSchedule preset_schedule(Category category);
/// Name-based lookup ("ca32", "CA3/2", "ca10", "CA1/0").
StageSchedule preset_schedule(std::string_view category);

StageSchedule apply_variant(StageSchedule schedule, Variant variant);

/// Durations in microseconds; payload in bits; data rate in bits/us.
struct PhyTimings {
    double sigma = 0.0;
    double prs0 = 0.0;
    double prs1 = 0.0;
    double t_fra = 0.0;
    double t_res = 0.0;
    double rifs = 0.0;
    double cifs = 0.0;
    double payload_bits = 0.0;
    double data_rate = 0.0;
};

PhyTimings homeplug10_timings();

struct FrameDurations {
    double success = 0.0;    // T_s
    double collision = 0.0;  // T_c
};

/// Airtime of a successful transmission and of a collision; the two are equal.
FrameDurations frame_durations(const PhyTimings& timings);

/// Arrival rate per node. std::nullopt means saturated (always backlogged).
struct ArrivalRate {
    std::optional<double> packets_per_s;

    static ArrivalRate saturated() { return {}; }
    static ArrivalRate poisson(double rate) { return {rate}; }
    bool is_saturated() const { return !packets_per_s.has_value(); }
};

struct Scenario {
    unsigned n = 1;
    StageSchedule schedule;
    PhyTimings timings;
    ArrivalRate lambda;
    std::uint32_t queue_cap = 1000;
    std::uint32_t preload = 0;
};

void validate(const Scenario& scenario);

/// Homeplug 1.0 timings with the given preset and variant.
Scenario make_scenario(unsigned n, Category category, Variant variant, ArrivalRate lambda);

constexpr double kMicrosPerSecond = 1e6;

} // namespace plcmac
