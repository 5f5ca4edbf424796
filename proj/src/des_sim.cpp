#include "plcmac/des_sim.hpp"

#include "plcmac/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace plcmac {

SlotOutcome classify_slot(unsigned transmitters, const PhyTimings& timings)
{
    const FrameDurations frames = frame_durations(timings);
    if (transmitters == 0)
        return {SlotKind::Idle, timings.sigma, 0};
    if (transmitters == 1)
        return {SlotKind::Success, frames.success, 1};
    return {SlotKind::Collision, frames.collision, transmitters};
}

BackoffRules::BackoffRules(const StageSchedule& schedule) : schedule_(schedule)
{
    validate(schedule_);
}

void BackoffRules::enter_stage(NodeState& node, unsigned stage, Rng& rng) const
{
    node.stage = stage;
    std::uniform_int_distribution<unsigned> draw(0, schedule_.window[stage - 1]);
    node.bc = draw(rng);
    node.dc = schedule_.deferral[stage - 1];
}

void BackoffRules::fail(NodeState& node, Rng& rng) const
{
    const auto m = static_cast<unsigned>(schedule_.stages());
    enter_stage(node, std::min(node.stage + 1, m), rng);
}

BackoffRules::Reaction BackoffRules::observe(NodeState& node, bool busy, Rng& rng) const
{
    if (busy && !node.dc.is_infinite()) {
        if (node.dc.value() == 0) {
            fail(node, rng);
            return Reaction::Deferred;
        }
        node.dc = Deferral::finite(node.dc.value() - 1);
    }
    --node.bc;
    return Reaction::CountedDown;
}

namespace {

Rng stream(std::uint64_t seed, std::uint64_t node, std::uint64_t kind)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(node), static_cast<std::uint32_t>(kind)};
    return Rng(seq);
}

// Largest j with now + j*step strictly below target.
double slots_before(double now, double step, double target)
{
    if (!(target > now))
        return 0.0;
    if (std::isinf(target))
        return target;
    double j = std::ceil((target - now) / step) - 1.0;
    while (j > 0.0 && now + j * step >= target)
        j -= 1.0;
    return std::max(j, 0.0);
}

constexpr std::uint64_t kBackoffStream = 1;
constexpr std::uint64_t kArrivalStream = 2;

struct Node {
    NodeState state;
    Rng backoff_rng;
    Rng arrival_rng;
    double next_arrival = std::numeric_limits<double>::infinity();
    bool transmitting = false;
};

} // namespace

SimStats run_sim(const Scenario& scenario, double duration_s, double warmup_s, std::uint64_t seed)
{
    validate(scenario);
    if (!(warmup_s >= 0.0) || !(duration_s > warmup_s))
        throw ConfigError("simulation needs duration > warmup >= 0");

    const BackoffRules rules(scenario.schedule);
    const PhyTimings& timings = scenario.timings;
    const bool saturated = scenario.lambda.is_saturated();
    const double lambda_per_us = saturated ? 0.0 : *scenario.lambda.packets_per_s / kMicrosPerSecond;
    const double end_us = duration_s * kMicrosPerSecond;
    const double warmup_us = warmup_s * kMicrosPerSecond;
    const std::uint32_t cap = scenario.queue_cap;

    SimStats stats;
    stats.sim_duration_s = duration_s;
    stats.measured_s = duration_s - warmup_s;
    stats.nodes.resize(scenario.n);

    std::exponential_distribution<double> interarrival(lambda_per_us > 0.0 ? lambda_per_us : 1.0);

    std::vector<Node> nodes;
    nodes.reserve(scenario.n);
    for (unsigned i = 0; i < scenario.n; ++i) {
        Node node{NodeState{}, stream(seed, i, kBackoffStream), stream(seed, i, kArrivalStream)};
        node.state.queue_len = saturated ? cap : scenario.preload;
        stats.nodes[i].preload = saturated ? 0 : scenario.preload;
        if (lambda_per_us > 0.0)
            node.next_arrival = interarrival(node.arrival_rng);
        if (node.state.queue_len > 0)
            rules.enter_stage(node.state, 1, node.backoff_rng);
        nodes.push_back(std::move(node));
    }

    double service_sum = 0.0;
    std::uint64_t service_count = 0;
    double bits_total = 0.0;

    double interval_start = warmup_us;
    double next_boundary = (std::floor(warmup_s) + 1.0) * kMicrosPerSecond;
    double interval_bits = 0.0;
    auto close_interval = [&](double until) {
        IntervalSample s;
        s.start_s = interval_start / kMicrosPerSecond;
        s.width_s = (until - interval_start) / kMicrosPerSecond;
        s.throughput_mbps = interval_bits / (until - interval_start);
        s.qmin = std::numeric_limits<std::uint32_t>::max();
        double qsum = 0.0;
        for (const auto& node : nodes) {
            s.qmin = std::min(s.qmin, node.state.queue_len);
            s.qmax = std::max(s.qmax, node.state.queue_len);
            qsum += node.state.queue_len;
        }
        s.qavg = qsum / static_cast<double>(nodes.size());
        stats.intervals.push_back(s);
        interval_start = until;
        interval_bits = 0.0;
    };

    double now = 0.0;
    while (now < end_us) {
        // 1. transmitters
        unsigned transmitters = 0;
        std::size_t sender = 0;
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            Node& node = nodes[i];
            node.transmitting = node.state.queue_len > 0 && node.state.bc == 0;
            if (node.transmitting) {
                ++transmitters;
                sender = i;
            }
        }

        // Runs of idle slots change nothing but counters and the clock, so
        // jump to just before the next event.
        if (transmitters == 0) {
            double run = std::numeric_limits<double>::infinity();
            double first_arrival = std::numeric_limits<double>::infinity();
            for (const Node& node : nodes) {
                if (node.state.queue_len > 0)
                    run = std::min(run, static_cast<double>(node.state.bc));
                first_arrival = std::min(first_arrival, node.next_arrival);
            }
            run = std::min(run, slots_before(now, timings.sigma, first_arrival));
            run = std::min(run, slots_before(now, timings.sigma, end_us));
            if (now < warmup_us)
                run = std::min(run, slots_before(now, timings.sigma, warmup_us));
            else
                run = std::min(run, slots_before(now, timings.sigma, next_boundary));
            if (run >= 1.0) {
                const auto k = static_cast<std::uint32_t>(run);
                for (Node& node : nodes) {
                    if (node.state.queue_len > 0)
                        node.state.bc -= k;
                }
                if (now >= warmup_us)
                    stats.idle_slots += k;
                now += k * timings.sigma;
                continue;
            }
        }

        const SlotOutcome outcome = classify_slot(transmitters, timings);
        const double slot_end = now + outcome.duration;
        const bool measured = slot_end > warmup_us && slot_end <= end_us;
        const bool busy = outcome.kind != SlotKind::Idle;

        // 2. everyone else in backoff watches the slot
        for (Node& node : nodes) {
            if (node.state.queue_len == 0 || node.transmitting)
                continue;
            if (rules.observe(node.state, busy, node.backoff_rng) == BackoffRules::Reaction::Deferred &&
                measured)
                ++stats.defer_events;
        }

        // 3. transmitters learn the outcome
        double slot_bits = 0.0;
        if (outcome.kind == SlotKind::Success) {
            Node& node = nodes[sender];
            auto& counters = stats.nodes[sender];
            ++counters.delivered;
            if (measured) {
                ++counters.delivered_measured;
                service_sum += slot_end - node.state.service_start;
                ++service_count;
                slot_bits = timings.payload_bits;
            }
            if (!saturated)
                --node.state.queue_len;
            if (node.state.queue_len > 0) {
                rules.enter_stage(node.state, 1, node.backoff_rng);
                node.state.service_start = slot_end;
            }
        } else if (outcome.kind == SlotKind::Collision) {
            for (Node& node : nodes) {
                if (node.transmitting)
                    rules.fail(node.state, node.backoff_rng);
            }
        }

        // 4. arrivals during the slot join at its end
        if (lambda_per_us > 0.0) {
            for (std::size_t i = 0; i < nodes.size(); ++i) {
                Node& node = nodes[i];
                if (node.next_arrival > slot_end)
                    continue;
                const bool was_empty = node.state.queue_len == 0;
                auto& counters = stats.nodes[i];
                while (node.next_arrival <= slot_end) {
                    ++counters.arrived;
                    if (node.state.queue_len < cap)
                        ++node.state.queue_len;
                    else
                        ++counters.dropped;
                    node.next_arrival += interarrival(node.arrival_rng);
                }
                if (was_empty && node.state.queue_len > 0) {
                    rules.enter_stage(node.state, 1, node.backoff_rng);
                    node.state.service_start = slot_end;
                }
            }
        }

        // 5. bookkeeping
        if (measured) {
            switch (outcome.kind) {
            case SlotKind::Idle: ++stats.idle_slots; break;
            case SlotKind::Success: ++stats.success_slots; break;
            case SlotKind::Collision:
                ++stats.collisions;
                stats.collided_attempts += transmitters;
                break;
            }
            stats.attempts += transmitters;
            while (slot_end > next_boundary) {
                close_interval(next_boundary);
                next_boundary += kMicrosPerSecond;
            }
            interval_bits += slot_bits;
            bits_total += slot_bits;
        }
        now = slot_end;
    }
    if (end_us > interval_start)
        close_interval(end_us);

    std::uint64_t dropped = 0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        stats.nodes[i].queued_at_end = saturated ? 0 : nodes[i].state.queue_len;
        dropped += stats.nodes[i].dropped;
    }
    stats.dropped = dropped;
    stats.long_run_throughput = bits_total / (end_us - warmup_us);
    stats.mean_service_time = service_count ? service_sum / static_cast<double>(service_count) : 0.0;
    return stats;
}

std::optional<std::size_t> detect_transition(const std::vector<double>& series,
                                             const ChangePointOptions& options)
{
    const std::size_t n = series.size();
    const std::size_t min_seg = std::max<std::size_t>(options.min_segment, 1);
    if (n < 2 * min_seg || n < 3)
        return std::nullopt;

    // Prefix sums of the mean-centred series keep the variance arithmetic
    // free of cancellation.
    const double centre = std::accumulate(series.begin(), series.end(), 0.0) / static_cast<double>(n);
    std::vector<double> sum(n + 1, 0.0);
    std::vector<double> sq(n + 1, 0.0);
    double scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = series[i] - centre;
        sum[i + 1] = sum[i] + x;
        sq[i + 1] = sq[i] + x * x;
        scale = std::max(scale, std::abs(series[i]));
    }
    const double negligible = 1e-12 * std::max(1.0, scale);

    double best = 0.0;
    std::optional<std::size_t> best_split;
    for (std::size_t split = min_seg; split + min_seg <= n; ++split) {
        const auto n1 = static_cast<double>(split);
        const auto n2 = static_cast<double>(n - split);
        const double m1 = sum[split] / n1;
        const double m2 = (sum[n] - sum[split]) / n2;
        const double diff = std::abs(m1 - m2);
        if (diff <= negligible)
            continue;
        const double ss1 = std::max(0.0, sq[split] - n1 * m1 * m1);
        const double ss2 = std::max(0.0, (sq[n] - sq[split]) - n2 * m2 * m2);
        const double pooled = std::sqrt((ss1 + ss2) / static_cast<double>(n - 2));
        const double score = pooled <= negligible ? std::numeric_limits<double>::infinity()
                                                  : diff / pooled;
        if (score > best) {
            best = score;
            best_split = split;
        }
    }
    if (best_split && best > options.threshold)
        return best_split;
    return std::nullopt;
}

TransitoryProbe run_transitory_probe(const Scenario& scenario, double duration_s, std::uint64_t seed,
                                     const ChangePointOptions& options)
{
    TransitoryProbe probe;
    probe.stats = run_sim(scenario, duration_s, 0.0, seed);
    std::vector<double> series;
    series.reserve(probe.stats.intervals.size());
    for (const auto& s : probe.stats.intervals)
        series.push_back(s.throughput_mbps);
    probe.transition_index = detect_transition(series, options);
    if (probe.transition_index)
        probe.transition_time_s = probe.stats.intervals[*probe.transition_index].start_s;
    return probe;
}

} // namespace plcmac
