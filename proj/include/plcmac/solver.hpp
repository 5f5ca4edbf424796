#pragma once

#include "plcmac/defer_kernel.hpp"
#include "plcmac/mac_domain.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace plcmac {

/// Converged (or last) iterate of the renewal-reward model, per node.
struct SolutionPoint {
    double tau = 0.0;           // attempt probability per slot
    double p = 0.0;             // conditional collision probability
    double p_b = 0.0;           // probability of overhearing a busy slot
    double rho = 0.0;           // queue occupancy
    double idle = 0.0;          // I, mean idle slots per renewal cycle
    double mean_backoff = 0.0;  // E[w], slots
    double attempts = 0.0;      // n_t
    double mean_slot = 0.0;     // alpha, us
    double service_time = 0.0;  // X, us
    double throughput = 0.0;    // S, bits/us == Mbps
    bool converged = false;
    unsigned iterations = 0;
    double residual = 0.0;      // |F(tau) - tau| at the returned tau
};

/// n * S, the aggregate network throughput in Mbps.
inline double aggregate_throughput(const SolutionPoint& s, unsigned n)
{
    return n * s.throughput;
}

enum class KernelMode { Exact, Table, ExpApprox };

KernelMode parse_kernel_mode(std::string_view text);
std::string to_string(KernelMode mode);

struct SolverSettings {
    double init_idle = 0.0;
    double tolerance = 1e-9;
    unsigned max_iterations = 100000;
    double damping = 0.5;
    KernelMode kernel_mode = KernelMode::Exact;
    /// Used by KernelMode::Table. Built on demand (step `table_step`) when null.
    std::shared_ptr<const KernelTable> table;
    double table_step = 1e-4;
};

/// Source of per-stage (p_defer, E[w_i]) values.
class StageKernel {
public:
    using Fn = std::function<KernelValues(unsigned window, Deferral deferral, double pb,
                                          std::size_t stage_index)>;

    static StageKernel exact();
    static StageKernel exp_approx();
    static StageKernel table(std::shared_ptr<const KernelTable> table);
    static StageKernel custom(Fn fn);
    /// Kernel for the given settings; builds a table if TABLE mode lacks one.
    static StageKernel from_settings(const SolverSettings& settings, const StageSchedule& schedule);

    KernelValues operator()(const StageSchedule& schedule, std::size_t stage_index,
                            double pb) const;

private:
    explicit StageKernel(Fn fn) : fn_(std::move(fn)) {}
    Fn fn_;
};

struct SlotProbabilities {
    double success = 0.0;    // p_s
    double empty = 0.0;      // p_e
    double collision = 0.0;  // p_c
};

SlotProbabilities slot_probabilities(double tau, unsigned n);
double collision_prob(double tau, unsigned n);

struct StageBackoff {
    double slots = 0.0;    // E[w_i]
    double p_fail = 0.0;   // p_f^(i)
    double p_defer = 0.0;  // p_defer^(i)
};

struct BackoffSummary {
    double mean_slots = 0.0;  // E[w]
    std::vector<StageBackoff> stages;
};

/// Combines per-stage kernel values over the retry chain. Throws
/// DivergenceError when the last stage fails with probability ~1.
BackoffSummary mean_backoff_slots(const StageSchedule& schedule, double p, double pb,
                                  const StageKernel& kernel);

double service_time(double mean_backoff, double mean_slot, double attempts, double t_success,
                    double t_collision);

class ConvergenceError : public std::runtime_error {
public:
    ConvergenceError(const std::string& what, SolutionPoint last)
        : std::runtime_error(what), last_(last)
    {
    }
    const SolutionPoint& last_iterate() const { return last_; }

private:
    SolutionPoint last_;
};

SolutionPoint solve_saturated(const Scenario& scenario, const SolverSettings& settings = {});
SolutionPoint solve_unsaturated(const Scenario& scenario, const SolverSettings& settings = {});

/// Saturated service rate 1/X_sat in packets per second.
double mu_sat(const Scenario& scenario, const SolverSettings& settings = {});

enum class Stability { Stable, Unstable };
std::string to_string(Stability s);

struct SolverBranch {
    double init_idle = 0.0;
    std::optional<SolutionPoint> solution;
    std::string error;  // set when the branch failed
};

struct DualSolutions {
    std::vector<SolverBranch> branches;      // init_I = 0, then init_I = 1000
    std::vector<SolutionPoint> distinct;     // converged, de-duplicated
    Stability stability = Stability::Stable;
    double mu_sat = 0.0;                     // packets/s
    /// Index into `distinct` of the solution describing long-term behaviour:
    /// the lowest-throughput one when unstable.
    std::optional<std::size_t> long_term;
};

/// Tolerance-relative agreement of every numeric field.
bool same_solution(const SolutionPoint& a, const SolutionPoint& b, double tolerance);

inline constexpr double kLowLoadInitIdle = 1000.0;

DualSolutions find_solutions(const Scenario& scenario, const SolverSettings& settings = {});

} // namespace plcmac
