#include "plcmac/mac_domain.hpp"

#include "plcmac/errors.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

namespace plcmac {

namespace {

std::string lower(std::string_view text)
{
    std::string out(text);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

} // namespace

std::string to_string(Deferral d)
{
    return d.is_infinite() ? std::string("inf") : std::to_string(d.value());
}

void validate(const StageSchedule& schedule)
{
    if (schedule.window.empty())
        throw ConfigError("stage schedule has no stages");
    if (schedule.window.size() != schedule.deferral.size())
        throw ConfigError("stage schedule: window and deferral lists differ in length");
}

Category parse_category(std::string_view text)
{
    const auto key = lower(text);
    if (key == "ca32" || key == "ca3/2" || key == "ca3" || key == "ca2")
        return Category::CA32;
    if (key == "ca10" || key == "ca1/0" || key == "ca1" || key == "ca0")
        return Category::CA10;
    throw ConfigError("unknown access category '" + std::string(text) + "' (expected ca32 or ca10)");
}

Variant parse_variant(std::string_view text)
{
    const auto key = lower(text);
    if (key == "standard")
        return Variant::Standard;
    if (key == "no-defer" || key == "no-deferral" || key == "nodefer")
        return Variant::NoDeferral;
    if (key == "always-defer" || key == "alwaysdefer")
        return Variant::AlwaysDefer;
    throw ConfigError("unknown variant '" + std::string(text) +
                      "' (expected standard, no-defer or always-defer)");
}

std::string to_string(Category c)
{
    return c == Category::CA32 ? "ca32" : "ca10";
}

std::string to_string(Variant v)
{
    switch (v) {
    case Variant::Standard: return "standard";
    case Variant::NoDeferral: return "no-defer";
    case Variant::AlwaysDefer: return "always-defer";
    }
    return "?";
}

StageSchedule preset_schedule(Category category)
{
    // Deferral initializers are common to every access category.
    std::vector<Deferral> deferral{Deferral::finite(0), Deferral::finite(1), Deferral::finite(3),
                                   Deferral::finite(15)};
    if (category == Category::CA32)
        return {{7, 15, 15, 31}, std::move(deferral)};
    return {{7, 15, 31, 63}, std::move(deferral)};
}

StageSchedule preset_schedule(std::string_view category)
{
    return preset_schedule(parse_category(category));
}

StageSchedule apply_variant(StageSchedule schedule, Variant variant)
{
    switch (variant) {
    case Variant::Standard:
        break;
    case Variant::NoDeferral:
        std::fill(schedule.deferral.begin(), schedule.deferral.end(), Deferral::infinite());
        break;
    case Variant::AlwaysDefer:
        std::fill(schedule.deferral.begin(), schedule.deferral.end(), Deferral::finite(0));
        break;
    }
    return schedule;
}

PhyTimings homeplug10_timings()
{
    PhyTimings t;
    t.sigma = 35.84;
    t.prs0 = 35.84;
    t.prs1 = 35.84;
    t.t_fra = 1153.5;
    t.t_res = 72.0;
    t.rifs = 26.0;
    t.cifs = 35.84;
    t.payload_bits = 1500.0 * 8.0;
    t.data_rate = 14.0;
    return t;
}

FrameDurations frame_durations(const PhyTimings& t)
{
    const double ts = t.prs0 + t.prs1 + t.t_fra + t.rifs + t.t_res + t.cifs;
    return {ts, ts};
}

void validate(const Scenario& s)
{
    validate(s.schedule);
    if (s.n < 1)
        throw ConfigError("scenario: n must be at least 1");
    if (s.lambda.packets_per_s) {
        const double rate = *s.lambda.packets_per_s;
        if (!std::isfinite(rate) || rate < 0.0)
            throw ConfigError("scenario: lambda must be finite and non-negative");
    }
    if (s.preload > s.queue_cap)
        throw ConfigError("scenario: preload exceeds queue_cap");
    if (!(s.timings.payload_bits > 0.0))
        throw ConfigError("scenario: payload_bits must be positive");
}

Scenario make_scenario(unsigned n, Category category, Variant variant, ArrivalRate lambda)
{
    Scenario s;
    s.n = n;
    s.schedule = apply_variant(preset_schedule(category), variant);
    s.timings = homeplug10_timings();
    s.lambda = lambda;
    return s;
}

} // namespace plcmac
