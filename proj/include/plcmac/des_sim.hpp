#pragma once

#include "plcmac/mac_domain.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

namespace plcmac {

/// Per-node MAC state. `stage` is one-based.
struct NodeState {
    std::uint32_t queue_len = 0;
    unsigned stage = 1;
    unsigned bc = 0;
    Deferral dc = Deferral::finite(0);
    double service_start = 0.0;  // us
};

enum class SlotKind { Idle, Success, Collision };

struct SlotOutcome {
    SlotKind kind = SlotKind::Idle;
    double duration = 0.0;  // us
    unsigned transmitter_count = 0;
};

/// Classifies a slot by the number of simultaneous transmitters.
SlotOutcome classify_slot(unsigned transmitters, const PhyTimings& timings);

using Rng = std::mt19937_64;

/// Backoff and deferral-counter rules shared by every node.
class BackoffRules {
public:
    explicit BackoffRules(const StageSchedule& schedule);

    /// Enter `stage` (one-based) with a fresh backoff draw and deferral counter.
    void enter_stage(NodeState& node, unsigned stage, Rng& rng) const;
    /// Collision or deferral: move to min(stage + 1, m).
    void fail(NodeState& node, Rng& rng) const;

    enum class Reaction { CountedDown, Deferred };

    /// A backlogged node with bc > 0 watches one slot. On a busy slot with an
    /// exhausted deferral counter the node defers (and does not count down);
    /// otherwise the backoff counts down on busy and idle slots alike.
    Reaction observe(NodeState& node, bool busy, Rng& rng) const;

    std::size_t stages() const { return schedule_.stages(); }

private:
    StageSchedule schedule_;
};

struct IntervalSample {
    double start_s = 0.0;
    double width_s = 0.0;
    double throughput_mbps = 0.0;
    std::uint32_t qmin = 0;
    double qavg = 0.0;
    std::uint32_t qmax = 0;
};

struct NodeCounters {
    std::uint64_t arrived = 0;    // includes dropped arrivals
    std::uint64_t delivered = 0;
    std::uint64_t dropped = 0;
    std::uint64_t preload = 0;
    std::uint64_t queued_at_end = 0;
    std::uint64_t delivered_measured = 0;  // after warmup
};

struct SimStats {
    double sim_duration_s = 0.0;
    double measured_s = 0.0;
    double long_run_throughput = 0.0;  // Mbps, aggregate
    double mean_service_time = 0.0;    // us, over packets delivered after warmup
    std::vector<IntervalSample> intervals;
    std::vector<NodeCounters> nodes;
    std::uint64_t defer_events = 0;
    std::uint64_t collisions = 0;      // collision slots
    std::uint64_t idle_slots = 0;
    std::uint64_t success_slots = 0;
    std::uint64_t dropped = 0;
    std::uint64_t attempts = 0;            // transmissions, one per transmitter
    std::uint64_t collided_attempts = 0;

    /// Empirical conditional collision probability.
    double collision_fraction() const
    {
        return attempts ? static_cast<double>(collided_attempts) / static_cast<double>(attempts) : 0.0;
    }
    std::uint64_t total_slots() const { return idle_slots + success_slots + collisions; }
};

/// Slot-synchronous simulation of `scenario.n` nodes for `duration_s`
/// simulated seconds; statistics cover (warmup_s, duration_s]. A saturated
/// scenario keeps every queue at queue_cap and never counts arrivals.
SimStats run_sim(const Scenario& scenario, double duration_s, double warmup_s, std::uint64_t seed);

struct ChangePointOptions {
    double threshold = 3.0;        // in pooled standard deviations
    std::size_t min_segment = 1;   // samples on each side of the split
};

/// Split index (first sample of the second segment) that maximises the
/// difference of segment means over the pooled standard deviation, or nullopt
/// when that maximum does not exceed the threshold.
std::optional<std::size_t> detect_transition(const std::vector<double>& series,
                                             const ChangePointOptions& options = {});

struct TransitoryProbe {
    SimStats stats;
    std::optional<std::size_t> transition_index;
    std::optional<double> transition_time_s;
};

TransitoryProbe run_transitory_probe(const Scenario& scenario, double duration_s, std::uint64_t seed,
                                     const ChangePointOptions& options = {});

} // namespace plcmac
