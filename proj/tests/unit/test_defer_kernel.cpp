#include "oracles.hpp"

#include "plcmac/defer_kernel.hpp"
#include "plcmac/errors.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace plcmac;

namespace {

struct Case {
    unsigned w;
    unsigned m;
};

// Every (W, M) pair of both presets plus a few edge shapes.
const Case kCases[] = {{7, 0}, {15, 1}, {15, 3}, {31, 3}, {31, 15}, {63, 15},
                       {1, 0},  {1, 1},  {4, 2},  {7, 7},  {20, 19}};

}  // namespace

TEST_SUITE("defer-kernel") {

TEST_CASE("frozen values")
{
    CHECK(p_defer_exact(7, 0, 0.5) == doctest::Approx(0.7509765625).epsilon(1e-12));
    CHECK(expected_slots_exact(7, 0, 1.0) == doctest::Approx(0.875).epsilon(1e-12));
    CHECK(p_defer_exact(7, 0, 1.0) == doctest::Approx(0.875).epsilon(1e-12));
    CHECK(p_defer_exp_approx(7, 0, 0.5) == doctest::Approx(7.0 / 11.0).epsilon(1e-12));
    CHECK(p_defer_exp_approx(15, 3, 0.5) == doctest::Approx(15.0 / 31.0).epsilon(1e-12));
    CHECK(p_defer_exp_approx(15, 3, 0.0) == 0.0);
}

TEST_CASE("exact kernel agrees with the state recursion")
{
    for (const auto& c : kCases) {
        for (double pb : {0.0, 1e-6, 0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.999, 1.0}) {
            CAPTURE(c.w);
            CAPTURE(c.m);
            CAPTURE(pb);
            const auto ref = oracle::kernel_dp(c.w, c.m, pb);
            CHECK(p_defer_exact(c.w, c.m, pb) == doctest::Approx(ref.p_defer).epsilon(1e-11));
            CHECK(expected_slots_exact(c.w, c.m, pb) == doctest::Approx(ref.slots).epsilon(1e-11));
        }
    }
}

TEST_CASE("state recursion agrees with exhaustive enumeration")
{
    for (const Case c : {Case{7, 0}, Case{7, 3}, Case{5, 1}, Case{9, 9}}) {
        for (double pb : {0.2, 0.5, 0.85}) {
            const auto dp = oracle::kernel_dp(c.w, c.m, pb);
            const auto bf = oracle::kernel_brute_force(c.w, c.m, pb);
            CHECK(dp.p_defer == doctest::Approx(bf.p_defer).epsilon(1e-12));
            CHECK(dp.slots == doctest::Approx(bf.slots).epsilon(1e-12));
        }
    }
}

TEST_CASE("monte carlo oracle brackets the exact values")
{
    for (const Case c : {Case{7, 0}, Case{15, 3}, Case{63, 15}}) {
        for (double pb : {0.1, 0.5, 0.9}) {
            const auto mc = mc_oracle(c.w, c.m, pb, 200000, 17 + c.w);
            CHECK(mc.trials == 200000);
            CHECK(std::abs(mc.defer_frequency - p_defer_exact(c.w, c.m, pb)) <= 4 * mc.defer_stderr + 1e-12);
            CHECK(std::abs(mc.mean_slots - expected_slots_exact(c.w, c.m, pb)) <= 4 * mc.slots_stderr + 1e-12);
        }
    }
    const auto a = mc_oracle(15, 1, 0.3, 1000, 5);
    const auto b = mc_oracle(15, 1, 0.3, 1000, 5);
    CHECK(a.defer_frequency == b.defer_frequency);
    CHECK(a.mean_slots == b.mean_slots);
}

TEST_CASE("kernel properties")
{
    for (const auto& c : kCases) {
        CAPTURE(c.w);
        CAPTURE(c.m);
        CHECK(p_defer_exact(c.w, c.m, 0.0) == 0.0);
        CHECK(expected_slots_exact(c.w, c.m, 0.0) == doctest::Approx(c.w / 2.0).epsilon(1e-12));
        double prev = -1.0;
        for (int j = 0; j <= 100; ++j) {
            const double pb = j / 100.0;
            const double d = p_defer_exact(c.w, c.m, pb);
            const double s = expected_slots_exact(c.w, c.m, pb);
            CHECK(d >= 0.0);
            CHECK(d <= 1.0);
            CHECK(d >= prev - 1e-12);
            CHECK(s >= 0.0);
            CHECK(s <= c.w / 2.0 + 1e-9);
            prev = d;
        }
    }
    // Counters at least as large as the window can never run out first.
    CHECK(p_defer_exact(7, 7, 0.8) == 0.0);
    CHECK(expected_slots_exact(7, 7, 0.8) == doctest::Approx(3.5));
}

TEST_CASE("domain errors")
{
    CHECK_THROWS_AS(p_defer_exact(7, 0, -0.1), DomainError);
    CHECK_THROWS_AS(p_defer_exact(7, 0, 1.1), DomainError);
    CHECK_THROWS_AS(expected_slots_exact(7, 8, 0.5), DomainError);
    CHECK_THROWS_AS(p_defer_exp_approx(0, 0, 0.5), DomainError);
}

TEST_CASE("large windows stay finite")
{
    const double d = p_defer_exact(1023, 15, 0.37);
    const double s = expected_slots_exact(1023, 15, 0.37);
    CHECK(std::isfinite(d));
    CHECK(std::isfinite(s));
    const auto ref = oracle::kernel_dp(1023, 15, 0.37);
    CHECK(d == doctest::Approx(ref.p_defer).epsilon(1e-9));
    CHECK(s == doctest::Approx(ref.slots).epsilon(1e-9));
}

TEST_CASE("infinite stages bypass the kernel")
{
    const auto v = stage_kernel_exact(15, Deferral::infinite(), 0.7);
    CHECK(v.p_defer == 0.0);
    CHECK(v.slots == 8.0);
    const auto f = stage_kernel_exact(15, Deferral::finite(3), 0.7);
    CHECK(f.p_defer == p_defer_exact(15, 3, 0.7));
}

TEST_CASE("table reproduces grid points and interpolates linearly")
{
    const auto schedule = preset_schedule(Category::CA32);
    const double step = 0.01;
    const auto table = build_table(schedule, step);
    CHECK(table.points() == 101);
    CHECK(grid_points(1e-4) == 10001);
    CHECK(table.matches(schedule, step));
    CHECK_FALSE(table.matches(schedule, 0.02));
    CHECK_FALSE(table.matches(preset_schedule(Category::CA10), step));

    for (std::size_t i = 0; i < schedule.stages(); ++i) {
        const unsigned w = schedule.window[i];
        const unsigned m = schedule.deferral[i].value();
        for (std::size_t j = 0; j < table.points(); j += 7) {
            const double pb = table.grid(j);
            const auto v = table.lookup(i, pb);
            CHECK(v.p_defer == doctest::Approx(p_defer_exact(w, m, pb)).epsilon(1e-13));
            CHECK(v.slots == doctest::Approx(expected_slots_exact(w, m, pb)).epsilon(1e-13));
        }
        const double lo = 0.42;
        const double hi = 0.43;
        const auto mid = lookup(table, i, 0.4225);
        const double expect = 0.75 * p_defer_exact(w, m, lo) + 0.25 * p_defer_exact(w, m, hi);
        CHECK(mid.p_defer == doctest::Approx(expect).epsilon(1e-9));
    }
    CHECK(table.lookup(0, 1.0).p_defer == doctest::Approx(p_defer_exact(7, 0, 1.0)));
    CHECK_THROWS_AS(table.lookup(0, 1.5), DomainError);
}

TEST_CASE("fine table error is far below solver tolerances")
{
    const auto schedule = preset_schedule(Category::CA10);
    const auto table = build_table(schedule, 1e-4);
    double worst = 0.0;
    for (std::size_t i = 0; i < schedule.stages(); ++i) {
        for (int j = 0; j < 997; ++j) {
            const double pb = (j + 0.5) / 997.0;
            const auto v = table.lookup(i, pb);
            const auto e = stage_kernel_exact(schedule.window[i], schedule.deferral[i], pb);
            worst = std::max(worst, std::abs(v.p_defer - e.p_defer));
            worst = std::max(worst, std::abs(v.slots - e.slots) / std::max(1.0, e.slots));
        }
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("table cache round trip")
{
    const auto dir = std::filesystem::temp_directory_path() / "plcmac_table_test";
    std::filesystem::remove_all(dir);
    const auto schedule = apply_variant(preset_schedule(Category::CA10), Variant::AlwaysDefer);
    const auto built = load_or_build_table(schedule, 0.05, dir);
    const auto path = dir / table_cache_name(schedule, 0.05);
    REQUIRE(std::filesystem::exists(path));
    const auto loaded = load_table(path);
    CHECK(loaded.matches(schedule, 0.05));
    for (std::size_t i = 0; i < schedule.stages(); ++i) {
        CHECK(loaded.column(i).defer_values == built.column(i).defer_values);
        CHECK(loaded.column(i).slot_values == built.column(i).slot_values);
    }
    const auto again = load_or_build_table(schedule, 0.05, dir);
    CHECK(again.column(3).slot_values == built.column(3).slot_values);

    {
        std::ofstream bad(dir / "bad.bin", std::ios::binary);
        bad << "not a table";
    }
    CHECK_THROWS_AS(load_table(dir / "bad.bin"), ConfigError);
    std::filesystem::remove_all(dir);
}

}
