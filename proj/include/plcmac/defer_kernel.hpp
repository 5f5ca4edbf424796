#pragma once

#include "plcmac/mac_domain.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace plcmac {

// Per-stage kernel: probability that the deferral counter expires before the
// backoff counter (p_defer) and the mean number of slots spent at the stage
// (E[w_i]), both as functions of the busy-slot probability p_b.

/// Probability of deferring at a stage with window `window` and deferral
/// initializer `deferral`, given busy probability `pb`. Uses 0^0 = 1.
/// Throws DomainError if pb is outside [0, 1] or deferral > window.
double p_defer_exact(unsigned window, unsigned deferral, double pb);

/// Mean slots spent at the stage before either transmitting or deferring.
double expected_slots_exact(unsigned window, unsigned deferral, double pb);

/// Exponential-race approximation of p_defer: backoff rate 2/W against
/// deferral rate pb/(M+1). Throws DomainError for window == 0.
double p_defer_exp_approx(unsigned window, unsigned deferral, double pb);

struct KernelValues {
    double p_defer = 0.0;
    double slots = 0.0;
};

/// Exact kernel for a stage that may have an infinite deferral counter. An
/// infinite stage never defers and waits (W+1)/2 slots on average.
KernelValues stage_kernel_exact(unsigned window, Deferral deferral, double pb);

struct OracleResult {
    std::uint64_t trials = 0;
    double defer_frequency = 0.0;
    double mean_slots = 0.0;
    double defer_stderr = 0.0;
    double slots_stderr = 0.0;
};

/// Monte-Carlo race between a uniform backoff draw and the deferral counter
/// against i.i.d. busy slots of probability pb.
OracleResult mc_oracle(unsigned window, unsigned deferral, double pb, std::uint64_t trials,
                       std::uint64_t seed);

/// Tabulated kernel values on a uniform p_b grid covering [0, 1].
class KernelTable {
public:
    struct Column {
        unsigned window = 0;
        Deferral deferral = Deferral::finite(0);
        std::vector<double> defer_values;  // empty for infinite stages
        std::vector<double> slot_values;
    };

    KernelTable() = default;
    KernelTable(double step, std::vector<Column> columns);

    double step() const { return step_; }
    std::size_t points() const { return points_; }
    std::size_t stages() const { return columns_.size(); }
    const Column& column(std::size_t stage_index) const { return columns_.at(stage_index); }
    double grid(std::size_t j) const;

    /// Linear interpolation between the bracketing grid points.
    /// `stage_index` is zero-based. Throws DomainError for pb outside [0, 1].
    KernelValues lookup(std::size_t stage_index, double pb) const;

    bool matches(const StageSchedule& schedule, double step) const;

private:
    double step_ = 0.0;
    std::size_t points_ = 0;
    std::vector<Column> columns_;
};

std::size_t grid_points(double step);

KernelTable build_table(const StageSchedule& schedule, double step = 1e-4);

inline KernelValues lookup(const KernelTable& table, std::size_t stage_index, double pb)
{
    return table.lookup(stage_index, pb);
}

// Binary cache format, little-endian host layout:
//   char[8] magic "PLCKTBL\0", u32 version, f64 step, u64 points, u32 stages,
//   per stage: u32 window, u8 infinite, u32 deferral;
//   then per finite stage: f64[points] defer_values, f64[points] slot_values.
inline constexpr std::uint32_t kKernelTableVersion = 1;

void save_table(const KernelTable& table, const std::filesystem::path& path);
KernelTable load_table(const std::filesystem::path& path);

/// File name that identifies a table by its (W, M) pairs and step.
std::string table_cache_name(const StageSchedule& schedule, double step);

/// Loads the table from `cache_dir` when present and matching, otherwise
/// builds it and writes it there. An empty `cache_dir` disables caching.
KernelTable load_or_build_table(const StageSchedule& schedule, double step,
                                const std::filesystem::path& cache_dir);

} // namespace plcmac
