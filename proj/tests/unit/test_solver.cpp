#include "oracles.hpp"

#include "plcmac/errors.hpp"
#include "plcmac/solver.hpp"

#include <doctest.h>

#include <cmath>

using namespace plcmac;

namespace {

struct Recomputed {
    double next_tau;
    double service_time;
    double throughput;
};

// The fixed-point map written out from the model equations, using the
// retry-chain oracle for E[w].
Recomputed remap(const Scenario& sc, double tau)
{
    const unsigned n = sc.n;
    const double p = n > 1 ? 1.0 - std::pow(1.0 - tau, n - 1) : 0.0;
    const double ps = n > 1 ? (n - 1) * tau * std::pow(1.0 - tau, n - 2) : 0.0;
    const double pe = n > 1 ? std::pow(1.0 - tau, n - 1) : 1.0;
    const double pc = 1.0 - ps - pe;
    const auto fd = frame_durations(sc.timings);
    const double alpha = ps * fd.success + pc * fd.collision + pe * sc.timings.sigma;

    std::vector<double> slots, fail;
    for (std::size_t i = 0; i < sc.schedule.stages(); ++i) {
        const auto k = stage_kernel_exact(sc.schedule.window[i], sc.schedule.deferral[i], p);
        slots.push_back(k.slots);
        fail.push_back(p * (1.0 - k.p_defer) + k.p_defer);
    }
    const double ew = oracle::chain_mean(slots, fail);
    const double nt = 1.0 / (1.0 - p);
    const double x = ew * alpha + (nt - 1.0) * fd.collision + fd.success;
    double rho = 1.0;
    double idle = 0.0;
    if (!sc.lambda.is_saturated()) {
        const double lam = *sc.lambda.packets_per_s / 1e6;
        rho = std::min(lam * x, 1.0);
        idle = std::max((1.0 - rho) / (1.0 - std::exp(-lam * alpha)), 0.0);
    }
    return {nt / (ew + nt + idle), x, rho * sc.timings.payload_bits / x};
}

void check_fixed_point(const Scenario& sc, const SolutionPoint& s, double tol)
{
    REQUIRE(s.converged);
    const auto r = remap(sc, s.tau);
    CHECK(std::abs(r.next_tau - s.tau) <= 10 * tol * s.tau);
    CHECK(s.service_time == doctest::Approx(r.service_time).epsilon(1e-7));
    CHECK(s.throughput == doctest::Approx(r.throughput).epsilon(1e-7));
}

}  // namespace

TEST_SUITE("fixed-point-solver") {

TEST_CASE("slot probabilities")
{
    for (unsigned n : {1u, 2u, 10u, 50u}) {
        for (double tau : {0.0, 0.01, 0.2, 0.9}) {
            const auto sp = slot_probabilities(tau, n);
            CHECK(sp.success + sp.empty + sp.collision == doctest::Approx(1.0).epsilon(1e-14));
            CHECK(sp.collision >= -1e-15);
        }
    }
    CHECK(slot_probabilities(0.3, 1).empty == 1.0);
    CHECK(collision_prob(0.1, 3) == doctest::Approx(1 - 0.81));
    CHECK(collision_prob(0.5, 1) == 0.0);
}

TEST_CASE("retry chain matches its recursion and a random walk")
{
    const auto sched = preset_schedule(Category::CA32);
    for (double p : {0.0, 0.2, 0.6, 0.9}) {
        const auto sum = mean_backoff_slots(sched, p, p, StageKernel::exact());
        std::vector<double> slots, fail;
        for (const auto& st : sum.stages) {
            slots.push_back(st.slots);
            fail.push_back(st.p_fail);
        }
        CHECK(sum.mean_slots == doctest::Approx(oracle::chain_mean(slots, fail)).epsilon(1e-12));
        const double mc = oracle::chain_monte_carlo(slots, fail, 200000, 3);
        CHECK(std::abs(mc - sum.mean_slots) / sum.mean_slots < 0.03);
    }
}

TEST_CASE("no-deferral chain uses half-open window means")
{
    const auto sched = apply_variant(preset_schedule(Category::CA32), Variant::NoDeferral);
    const double p = 0.4;
    const auto sum = mean_backoff_slots(sched, p, p, StageKernel::exact());
    const double expect = 4.0 + p * 8.0 + p * p * 8.0 + p * p * p * 16.0 / (1.0 - p);
    CHECK(sum.mean_slots == doctest::Approx(expect).epsilon(1e-12));
    for (const auto& st : sum.stages)
        CHECK(st.p_fail == doctest::Approx(p));
}

TEST_CASE("divergent last stage throws")
{
    const auto sched = apply_variant(preset_schedule(Category::CA32), Variant::NoDeferral);
    CHECK_THROWS_AS(mean_backoff_slots(sched, 1.0, 1.0, StageKernel::exact()), DivergenceError);
}

TEST_CASE("single node closed form")
{
    const auto sc = make_scenario(1, Category::CA32, Variant::Standard, ArrivalRate::saturated());
    const auto s = solve_saturated(sc);
    const double x = 3.5 * 35.84 + 1359.02;
    CHECK(s.service_time == doctest::Approx(x).epsilon(1e-12));
    CHECK(s.service_time == doctest::Approx(1484.46).epsilon(1e-6));
    CHECK(s.throughput == doctest::Approx(8.0837).epsilon(1e-5));
    CHECK(s.throughput == doctest::Approx(12000.0 / x).epsilon(1e-12));
    CHECK(mu_sat(sc) == doctest::Approx(1e6 / x).epsilon(1e-12));
    CHECK(s.p == 0.0);
}

TEST_CASE("converged points satisfy the model equations")
{
    for (auto cat : {Category::CA32, Category::CA10}) {
        for (auto var : {Variant::Standard, Variant::NoDeferral, Variant::AlwaysDefer}) {
            for (unsigned n : {2u, 10u, 50u}) {
                CAPTURE(n);
                auto sc = make_scenario(n, cat, var, ArrivalRate::saturated());
                check_fixed_point(sc, solve_saturated(sc), 1e-9);
                const double mu = mu_sat(sc);
                for (double f : {0.3, 1.2, 2.5}) {
                    sc.lambda = ArrivalRate::poisson(f * mu);
                    for (double init : {0.0, 1000.0}) {
                        SolverSettings st;
                        st.init_idle = init;
                        check_fixed_point(sc, solve_unsaturated(sc, st), 1e-9);
                    }
                }
            }
        }
    }
}

TEST_CASE("throughput falls and delay grows with n when saturated")
{
    for (auto cat : {Category::CA32, Category::CA10}) {
        double prev_s = 1e9;
        double prev_x = 0.0;
        for (unsigned n = 1; n <= 60; n += 3) {
            const auto s = solve_saturated(make_scenario(n, cat, Variant::Standard, ArrivalRate::saturated()));
            CHECK(aggregate_throughput(s, n) < prev_s + 1e-12);
            CHECK(s.service_time > prev_x);
            prev_s = aggregate_throughput(s, n);
            prev_x = s.service_time;
        }
    }
}

TEST_CASE("light load is not saturated and carries the offered load")
{
    const auto sc = make_scenario(10, Category::CA32, Variant::Standard, ArrivalRate::poisson(5));
    const auto s = solve_unsaturated(sc);
    CHECK(s.rho < 1.0);
    CHECK(aggregate_throughput(s, 10) == doctest::Approx(10 * 5 * 12000 / 1e6).epsilon(1e-9));
}

TEST_CASE("zero arrival rate is the idle solution")
{
    const auto s = solve_unsaturated(make_scenario(5, Category::CA10, Variant::Standard, ArrivalRate::poisson(0)));
    CHECK(s.converged);
    CHECK(s.tau == 0.0);
    CHECK(s.throughput == 0.0);
}

TEST_CASE("dual solutions around the stability limit")
{
    auto sc = make_scenario(50, Category::CA32, Variant::Standard, ArrivalRate::saturated());
    const double mu = mu_sat(sc);

    sc.lambda = ArrivalRate::poisson(0.5 * mu);
    auto d = find_solutions(sc);
    CHECK(d.stability == Stability::Stable);
    CHECK(d.distinct.size() == 1);
    REQUIRE(d.long_term);

    sc.lambda = ArrivalRate::poisson(mu + 0.5);
    d = find_solutions(sc);
    CHECK(d.stability == Stability::Unstable);
    REQUIRE(d.branches.size() == 2);
    REQUIRE(d.branches[0].solution);
    REQUIRE(d.branches[1].solution);
    CHECK(d.branches[0].init_idle == 0.0);
    CHECK(d.branches[1].init_idle == kLowLoadInitIdle);
    CHECK(d.branches[0].solution->throughput < d.branches[1].solution->throughput);
    CHECK(d.distinct.size() == 2);
    REQUIRE(d.long_term);
    CHECK(d.distinct[*d.long_term].throughput == doctest::Approx(d.branches[0].solution->throughput));

    sc.lambda = ArrivalRate::poisson(3 * mu);
    d = find_solutions(sc);
    CHECK(d.distinct.size() == 1);
    const auto sat = solve_saturated(make_scenario(50, Category::CA32, Variant::Standard, ArrivalRate::saturated()));
    for (const auto& b : d.branches)
        CHECK(b.solution->throughput == doctest::Approx(sat.throughput).epsilon(1e-6));
}

TEST_CASE("same_solution is tolerance-relative")
{
    SolutionPoint a;
    a.tau = 1e-5;
    a.throughput = 0.1;
    SolutionPoint b = a;
    CHECK(same_solution(a, b, 1e-9));
    b.tau = 1e-5 * (1 + 1e-7);
    CHECK(same_solution(a, b, 1e-9));
    b.throughput = 0.2;
    CHECK_FALSE(same_solution(a, b, 1e-9));
}

TEST_CASE("kernel modes")
{
    const auto sc = make_scenario(20, Category::CA10, Variant::Standard, ArrivalRate::saturated());
    const auto exact = solve_saturated(sc);

    SolverSettings table;
    table.kernel_mode = KernelMode::Table;
    table.table_step = 1e-4;
    const auto t = solve_saturated(sc, table);
    CHECK(t.throughput == doctest::Approx(exact.throughput).epsilon(1e-6));

    SolverSettings mismatched = table;
    mismatched.table = std::make_shared<const KernelTable>(build_table(preset_schedule(Category::CA32), 0.1));
    CHECK_THROWS_AS(solve_saturated(sc, mismatched), ConfigError);

    // The approximation replaces p_defer only; E[w_i] stays exact.
    const auto ex = StageKernel::exp_approx();
    const auto v = ex(sc.schedule, 2, 0.3);
    CHECK(v.p_defer == doctest::Approx(p_defer_exp_approx(31, 3, 0.3)));
    CHECK(v.slots == doctest::Approx(expected_slots_exact(31, 3, 0.3)));

    CHECK(parse_kernel_mode("exp") == KernelMode::ExpApprox);
    CHECK(to_string(KernelMode::Table) == "table");
    CHECK_THROWS_AS(parse_kernel_mode("fast"), ConfigError);
}

TEST_CASE("custom kernels are injected per stage")
{
    auto sc = make_scenario(10, Category::CA32, Variant::Standard, ArrivalRate::saturated());
    // A kernel that never defers and always waits W/2 is plain binary backoff.
    const auto k = StageKernel::custom([](unsigned w, Deferral, double, std::size_t) {
        return KernelValues{0.0, w / 2.0};
    });
    const auto sum = mean_backoff_slots(sc.schedule, 0.5, 0.5, k);
    CHECK(sum.mean_slots == doctest::Approx(3.5 + 0.5 * 7.5 + 0.25 * 7.5 + 0.125 * 15.5 / 0.5));
}

TEST_CASE("iteration limit reports the last iterate")
{
    const auto sc = make_scenario(30, Category::CA32, Variant::Standard, ArrivalRate::saturated());
    SolverSettings st;
    st.max_iterations = 2;
    try {
        solve_saturated(sc, st);
        FAIL("expected ConvergenceError");
    } catch (const ConvergenceError& e) {
        CHECK_FALSE(e.last_iterate().converged);
        CHECK(e.last_iterate().iterations == 2);
        CHECK(e.last_iterate().tau > 0.0);
    }
    st.max_iterations = 100000;
    st.tolerance = -1;
    CHECK_THROWS_AS(solve_saturated(sc, st), ConfigError);
}

}
