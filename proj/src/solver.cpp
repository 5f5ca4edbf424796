#include "plcmac/solver.hpp"

#include "plcmac/errors.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

namespace plcmac {

KernelMode parse_kernel_mode(std::string_view text)
{
    std::string key(text);
    std::transform(key.begin(), key.end(), key.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (key == "exact")
        return KernelMode::Exact;
    if (key == "table")
        return KernelMode::Table;
    if (key == "exp" || key == "exp-approx" || key == "exp_approx")
        return KernelMode::ExpApprox;
    throw ConfigError("unknown kernel mode '" + std::string(text) + "' (expected exact, table or exp)");
}

std::string to_string(KernelMode mode)
{
    switch (mode) {
    case KernelMode::Exact: return "exact";
    case KernelMode::Table: return "table";
    case KernelMode::ExpApprox: return "exp";
    }
    return "?";
}

std::string to_string(Stability s)
{
    return s == Stability::Stable ? "STABLE" : "UNSTABLE";
}

StageKernel StageKernel::exact()
{
    return StageKernel([](unsigned w, Deferral m, double pb, std::size_t) {
        return stage_kernel_exact(w, m, pb);
    });
}

StageKernel StageKernel::exp_approx()
{
    return StageKernel([](unsigned w, Deferral m, double pb, std::size_t) -> KernelValues {
        if (m.is_infinite())
            return {0.0, (w + 1.0) / 2.0};
        return {p_defer_exp_approx(w, m.value(), pb), expected_slots_exact(w, m.value(), pb)};
    });
}

StageKernel StageKernel::table(std::shared_ptr<const KernelTable> table)
{
    if (!table)
        throw ConfigError("table kernel needs a kernel table");
    return StageKernel([table](unsigned, Deferral, double pb, std::size_t stage) {
        return table->lookup(stage, pb);
    });
}

StageKernel StageKernel::custom(Fn fn)
{
    return StageKernel(std::move(fn));
}

StageKernel StageKernel::from_settings(const SolverSettings& settings,
                                       const StageSchedule& schedule)
{
    switch (settings.kernel_mode) {
    case KernelMode::Exact:
        return exact();
    case KernelMode::ExpApprox:
        return exp_approx();
    case KernelMode::Table:
        if (settings.table) {
            if (!settings.table->matches(schedule, settings.table->step()))
                throw ConfigError("kernel table does not match the stage schedule");
            return table(settings.table);
        }
        return table(std::make_shared<const KernelTable>(build_table(schedule, settings.table_step)));
    }
    return exact();
}

KernelValues StageKernel::operator()(const StageSchedule& schedule, std::size_t stage_index,
                                     double pb) const
{
    return fn_(schedule.window.at(stage_index), schedule.deferral.at(stage_index), pb, stage_index);
}

SlotProbabilities slot_probabilities(double tau, unsigned n)
{
    if (n <= 1)
        return {0.0, 1.0, 0.0};
    const double others = static_cast<double>(n - 1);
    const double success = others * tau * std::pow(1.0 - tau, others - 1.0);
    const double empty = std::pow(1.0 - tau, others);
    const double collision = std::clamp(1.0 - success - empty, 0.0, 1.0);
    return {success, empty, collision};
}

double collision_prob(double tau, unsigned n)
{
    if (n <= 1)
        return 0.0;
    return 1.0 - std::pow(1.0 - tau, static_cast<double>(n - 1));
}

BackoffSummary mean_backoff_slots(const StageSchedule& schedule, double p, double pb,
                                  const StageKernel& kernel)
{
    validate(schedule);
    const std::size_t m = schedule.stages();
    BackoffSummary out;
    out.stages.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        const KernelValues k = kernel(schedule, i, pb);
        auto& st = out.stages[i];
        st.slots = k.slots;
        st.p_defer = k.p_defer;
        st.p_fail = p * (1.0 - k.p_defer) + k.p_defer;
    }

    const double last_fail = out.stages[m - 1].p_fail;
    if (last_fail >= 1.0 - 1e-12)
        throw DivergenceError("last backoff stage fails with probability 1; E[w] diverges");

    // Probability of reaching stage i is the product of earlier failures; the
    // last stage is revisited after every failure.
    double reach = 1.0;
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < m; ++i) {
        total += out.stages[i].slots * reach;
        reach *= out.stages[i].p_fail;
    }
    total += out.stages[m - 1].slots * reach / (1.0 - last_fail);
    out.mean_slots = total;
    return out;
}

double service_time(double mean_backoff, double mean_slot, double attempts, double t_success,
                    double t_collision)
{
    return mean_backoff * mean_slot + (attempts - 1.0) * t_collision + t_success;
}

namespace {

struct Evaluation {
    SolutionPoint point;
    double next_tau = 0.0;
};

// One pass of the model at attempt rate tau; `lambda_per_us` is empty in
// saturated mode.
Evaluation evaluate(const Scenario& sc, const StageKernel& kernel, double tau,
                    std::optional<double> lambda_per_us)
{
    const FrameDurations frames = frame_durations(sc.timings);
    Evaluation ev;
    SolutionPoint& s = ev.point;
    s.tau = tau;
    s.p = collision_prob(tau, sc.n);
    s.p_b = s.p;
    const BackoffSummary backoff = mean_backoff_slots(sc.schedule, s.p, s.p_b, kernel);
    s.mean_backoff = backoff.mean_slots;
    if (s.p >= 1.0)
        throw DivergenceError("collision probability reached 1");
    s.attempts = 1.0 / (1.0 - s.p);
    const SlotProbabilities slot = slot_probabilities(tau, sc.n);
    s.mean_slot = slot.success * frames.success + slot.collision * frames.collision +
                  slot.empty * sc.timings.sigma;
    s.service_time = service_time(s.mean_backoff, s.mean_slot, s.attempts, frames.success,
                                  frames.collision);
    if (lambda_per_us) {
        const double lam = *lambda_per_us;
        s.rho = std::min(lam * s.service_time, 1.0);
        // 1 - exp(-x) without cancellation at small x
        const double arrival_prob = -std::expm1(-lam * s.mean_slot);
        s.idle = std::max((1.0 - s.rho) / arrival_prob, 0.0);
    } else {
        s.rho = 1.0;
        s.idle = 0.0;
    }
    s.throughput = s.rho * sc.timings.payload_bits / s.service_time;
    ev.next_tau = s.attempts / (s.mean_backoff + s.attempts + s.idle);
    return ev;
}

SolutionPoint iterate(const Scenario& sc, const SolverSettings& settings,
                      std::optional<double> lambda_per_us, double init_idle)
{
    validate(sc);
    if (!(settings.tolerance > 0.0))
        throw ConfigError("solver tolerance must be positive");
    if (!(settings.damping > 0.0 && settings.damping <= 1.0))
        throw ConfigError("solver damping must lie in (0, 1]");
    if (!(init_idle >= 0.0))
        throw ConfigError("initial idle-slot guess must be non-negative");

    const StageKernel kernel = StageKernel::from_settings(settings, sc.schedule);

    // Starting point: no collisions, stage-1 backoff only, `init_idle` idle slots.
    const double first_backoff = mean_backoff_slots(sc.schedule, 0.0, 0.0, kernel).mean_slots;
    double tau = 1.0 / (first_backoff + 1.0 + init_idle);

    Evaluation ev;
    double previous_step = 0.0;
    for (unsigned it = 1; it <= settings.max_iterations; ++it) {
        ev = evaluate(sc, kernel, tau, lambda_per_us);
        const double residual = std::abs(ev.next_tau - tau);
        const double step = settings.damping * residual;
        ev.point.iterations = it;
        ev.point.residual = residual;
        // Bounds are relative to tau: the low-load branch sits at tau ~ 1e-5,
        // where an absolute bound alone leaves the other fields loose. Near a
        // fold the map contracts slowly, so the remaining geometric tail
        // step * r / (1 - r) must be small too.
        const double bound = settings.tolerance * tau;
        if (residual <= bound) {
            const double ratio = previous_step > 0.0 ? step / previous_step : 0.0;
            if (residual == 0.0 || (ratio < 1.0 && step * ratio / (1.0 - ratio) <= bound)) {
                ev.point.converged = true;
                return ev.point;
            }
        }
        previous_step = step;
        tau = settings.damping * ev.next_tau + (1.0 - settings.damping) * tau;
    }
    ev.point.converged = false;
    throw ConvergenceError("fixed point did not converge after " +
                               std::to_string(settings.max_iterations) + " iterations",
                           ev.point);
}

} // namespace

SolutionPoint solve_saturated(const Scenario& scenario, const SolverSettings& settings)
{
    return iterate(scenario, settings, std::nullopt, 0.0);
}

SolutionPoint solve_unsaturated(const Scenario& scenario, const SolverSettings& settings)
{
    validate(scenario);
    if (scenario.lambda.is_saturated())
        throw ConfigError("solve_unsaturated needs a finite arrival rate");
    const double lambda = *scenario.lambda.packets_per_s;
    if (lambda == 0.0) {
        // No traffic: nobody ever contends.
        const StageKernel kernel = StageKernel::from_settings(settings, scenario.schedule);
        const FrameDurations frames = frame_durations(scenario.timings);
        SolutionPoint s;
        s.mean_backoff = mean_backoff_slots(scenario.schedule, 0.0, 0.0, kernel).mean_slots;
        s.attempts = 1.0;
        s.mean_slot = scenario.timings.sigma;
        s.service_time = service_time(s.mean_backoff, s.mean_slot, 1.0, frames.success,
                                      frames.collision);
        s.idle = std::numeric_limits<double>::infinity();
        s.converged = true;
        return s;
    }
    return iterate(scenario, settings, lambda / kMicrosPerSecond, settings.init_idle);
}

double mu_sat(const Scenario& scenario, const SolverSettings& settings)
{
    return kMicrosPerSecond / solve_saturated(scenario, settings).service_time;
}

bool same_solution(const SolutionPoint& a, const SolutionPoint& b, double tolerance)
{
    const double bound = 10.0 * tolerance;
    auto close = [bound](double x, double y) {
        if (x == y)
            return true;  // covers matching infinities
        return std::abs(x - y) <= bound * std::max({1.0, std::abs(x), std::abs(y)});
    };
    return close(a.tau, b.tau) && close(a.p, b.p) && close(a.p_b, b.p_b) && close(a.rho, b.rho) &&
           close(a.idle, b.idle) && close(a.mean_backoff, b.mean_backoff) &&
           close(a.attempts, b.attempts) && close(a.mean_slot, b.mean_slot) &&
           close(a.service_time, b.service_time) && close(a.throughput, b.throughput);
}

DualSolutions find_solutions(const Scenario& scenario, const SolverSettings& settings)
{
    validate(scenario);
    if (scenario.lambda.is_saturated())
        throw ConfigError("find_solutions needs a finite arrival rate");

    DualSolutions out;
    out.mu_sat = mu_sat(scenario, settings);
    out.stability = *scenario.lambda.packets_per_s < out.mu_sat ? Stability::Stable
                                                                 : Stability::Unstable;

    for (const double init : {0.0, kLowLoadInitIdle}) {
        SolverBranch branch;
        branch.init_idle = init;
        SolverSettings s = settings;
        s.init_idle = init;
        try {
            branch.solution = solve_unsaturated(scenario, s);
        } catch (const ConvergenceError& e) {
            branch.error = e.what();
        } catch (const DivergenceError& e) {
            branch.error = e.what();
        }
        out.branches.push_back(std::move(branch));
    }

    for (const auto& b : out.branches) {
        if (!b.solution)
            continue;
        const bool seen = std::any_of(out.distinct.begin(), out.distinct.end(), [&](const auto& d) {
            return same_solution(d, *b.solution, settings.tolerance);
        });
        if (!seen)
            out.distinct.push_back(*b.solution);
    }

    if (!out.distinct.empty()) {
        const auto by_throughput = [](const SolutionPoint& a, const SolutionPoint& b) {
            return a.throughput < b.throughput;
        };
        const auto pick = out.stability == Stability::Unstable
                              ? std::min_element(out.distinct.begin(), out.distinct.end(), by_throughput)
                              : std::max_element(out.distinct.begin(), out.distinct.end(), by_throughput);
        out.long_term = static_cast<std::size_t>(pick - out.distinct.begin());
    }
    return out;
}

} // namespace plcmac
