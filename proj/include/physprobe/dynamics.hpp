#pragma once

#include "physprobe/core.hpp"
#include "physprobe/errors.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace physprobe::dynamics {

enum class SystemKind : std::uint32_t { two_body = 0, oscillator = 1 };

std::string to_string(SystemKind k);
SystemKind system_kind_from_string(const std::string& s);

/// Generative parameters of one simulated system.
///
/// `dt` is the observation interval (the record spacing and the Delta-t swept
/// by the bound experiments). The symplectic integrator advances at
/// dt / substeps internally so the energy contract holds at coarse dt.
struct SystemSpec {
    SystemKind system_kind = SystemKind::two_body;
    double G = 1.0;
    double m1 = 1.0;
    double m2 = 1.0;
    double k = 1.0; // spring constant, oscillator only
    double dt = 0.1;
    std::size_t steps = 96;
    double r_min_guard = 0.3;
    std::size_t substeps = 500;

    void validate() const;
};

/// Time series of one simulated system plus derived target series.
struct Trajectory {
    SystemSpec spec;
    Matrix observations;              // steps x obs_dim (positions only)
    Matrix positions;                 // steps x dim
    Matrix velocities;                // steps x dim
    std::map<std::string, Matrix> targets; // name -> steps x target_dim
    std::map<std::string, double> gen_params; // sampled generative parameters
    double energy_drift = 0.0;        // max |E - E0| / |E0| over the run

    std::size_t steps() const { return static_cast<std::size_t>(observations.rows()); }
    Eigen::Index obs_dim() const { return observations.cols(); }
};

enum class SplitRole : std::uint32_t { ssl_train = 0, probe_train = 1, ft_task = 2, ood_test = 3 };

std::string to_string(SplitRole r);
SplitRole split_role_from_string(const std::string& s);

using ParamRanges = std::map<std::string, std::pair<double, double>>;

struct DatasetSplit {
    SplitRole role = SplitRole::ssl_train;
    std::vector<Trajectory> trajectories;
    ParamRanges generator_ranges;

    bool empty() const { return trajectories.empty(); }
};

/// Simulate the reduced two-body problem (star fixed at the origin,
/// test-particle planet) with velocity Verlet.
///
/// Throws TrajectoryTruncatedError when the separation falls below
/// spec.r_min_guard, carrying the failing observation step.
Trajectory simulate_two_body(const SystemSpec& spec, const Vec2& init_position,
                             const Vec2& init_velocity);

/// Simulate the 1-D harmonic oscillator (x'' = -(k/m1) x) with velocity Verlet.
Trajectory simulate_oscillator(const SystemSpec& spec, double init_position,
                               double init_velocity);

/// Recognized sampling-range keys: m2, G, r0, speed_mult (two_body);
/// k, x0, v0 (oscillator). Keys absent from `ranges` take point defaults.
struct SampleOptions {
    SystemKind system_kind = SystemKind::two_body;
    double dt = 0.1;
    std::size_t steps = 96;
    double r_min_guard = 0.3;
    std::size_t substeps = 500;
    double m1 = 1.0;
    /// Scale initial radius by (m2 / m2_ref)^(1/3), preserving orbital
    /// periods across mass shifts (used by the scaled OOD suite).
    std::optional<double> kepler_scale_ref;
    /// Validation context: ssl_train ranges when sampling probe_train/ood_test.
    std::optional<ParamRanges> reference_ranges;
};

/// Draw trajectories with generative parameters uniform over `ranges`.
/// Deterministic per seed. Draws whose analytic perihelion would violate the
/// guard are resampled (uniform conditioned on validity).
DatasetSplit sample_dataset(const ParamRanges& ranges, std::size_t n_trajectories,
                            SplitRole role, std::uint64_t seed, const SampleOptions& opts);

/// Role invariants: probe_train ranges must be contained in the ssl ranges,
/// ood_test must have at least one disjoint interval.
void check_role_invariants(SplitRole role, const ParamRanges& ranges,
                           const ParamRanges& ssl_ranges);

/// Analytic target value at one state. Scalar targets return 1-vectors.
Vector target_value(const SystemSpec& spec, const Vector& position,
                    const Vector& velocity, const std::string& target);

/// Dimension of a target series for the given system.
Eigen::Index target_dim(SystemKind kind, const std::string& target);

bool target_supported(SystemKind kind, const std::string& target);

/// Names accepted by compute_targets for `kind`.
std::vector<std::string> supported_targets(SystemKind kind);

/// Populate traj.targets for each requested name, computed analytically from
/// full states. Unknown names throw UnsupportedTargetError.
void compute_targets(Trajectory& traj, const std::set<std::string>& target_names);
void compute_targets(DatasetSplit& split, const std::set<std::string>& target_names);

struct StatsReport {
    std::string variable;
    std::vector<std::size_t> counts;
    std::vector<double> bin_edges; // counts.size() + 1
    double mean = 0.0;
    double variance = 0.0;
    std::size_t sample_count = 0;
};

/// Histogram + moments of a generator parameter (one sample per trajectory)
/// or a scalar target series (pooled over steps).
StatsReport dataset_stats(const DatasetSplit& split, const std::string& variable, int bins);

// ---- file formats ----------------------------------------------------------

/// Versioned little-endian trajectory file ("PHYTRJ" magic), one record per
/// observation step.
void save_trajectory(const Trajectory& traj, const std::filesystem::path& path);
Trajectory load_trajectory(const std::filesystem::path& path);

/// CSV export for inspection: step, t, obs..., pos..., vel..., targets...
void export_trajectory_csv(const Trajectory& traj, const std::filesystem::path& path);

/// Split = manifest.json + one .traj file per trajectory in `dir`.
void save_split(const DatasetSplit& split, const std::filesystem::path& dir);
DatasetSplit load_split(const std::filesystem::path& dir);

} // namespace physprobe::dynamics
