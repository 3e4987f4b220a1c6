#include "physprobe/dynamics.hpp"

#include "physprobe/io.hpp"
#include "physprobe/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace physprobe::dynamics {

namespace {

constexpr char kTrajMagic[8] = {'P', 'H', 'Y', 'T', 'R', 'J', '0', '1'};
constexpr std::uint32_t kTrajVersion = 1;

double two_body_energy(const SystemSpec& s, const Vec2& p, const Vec2& v) {
    return 0.5 * s.m1 * v.squaredNorm() - s.G * s.m1 * s.m2 / p.norm();
}

double oscillator_energy(const SystemSpec& s, double x, double v) {
    return 0.5 * (s.k * x * x + s.m1 * v * v);
}

} // namespace

std::string to_string(SystemKind k) {
    return k == SystemKind::two_body ? "two_body" : "oscillator";
}

SystemKind system_kind_from_string(const std::string& s) {
    if (s == "two_body") return SystemKind::two_body;
    if (s == "oscillator") return SystemKind::oscillator;
    throw InvalidSpecError("unknown system_kind: " + s);
}

std::string to_string(SplitRole r) {
    switch (r) {
        case SplitRole::ssl_train: return "ssl_train";
        case SplitRole::probe_train: return "probe_train";
        case SplitRole::ft_task: return "ft_task";
        case SplitRole::ood_test: return "ood_test";
    }
    return "?";
}

SplitRole split_role_from_string(const std::string& s) {
    if (s == "ssl_train") return SplitRole::ssl_train;
    if (s == "probe_train") return SplitRole::probe_train;
    if (s == "ft_task") return SplitRole::ft_task;
    if (s == "ood_test") return SplitRole::ood_test;
    throw InvalidSpecError("unknown split role: " + s);
}

void SystemSpec::validate() const {
    if (!(G > 0) || !(m1 > 0) || !(m2 > 0) || !(k > 0) || !(dt > 0))
        throw InvalidSpecError("G, m1, m2, k, dt must be strictly positive");
    if (steps < 2) throw InvalidSpecError("steps must be >= 2");
    if (substeps < 1) throw InvalidSpecError("substeps must be >= 1");
    if (system_kind == SystemKind::two_body && !(r_min_guard > 0))
        throw InvalidSpecError("r_min_guard must be > 0 for two_body");
}

Trajectory simulate_two_body(const SystemSpec& spec, const Vec2& init_position,
                             const Vec2& init_velocity) {
    if (spec.system_kind != SystemKind::two_body)
        throw InvalidSpecError("simulate_two_body requires system_kind = two_body");
    spec.validate();
    if (init_position.norm() < spec.r_min_guard)
        throw TrajectoryTruncatedError("initial separation below r_min_guard", 0);

    const double gm = spec.G * spec.m2; // test particle: acceleration independent of m1
    const double h = spec.dt / static_cast<double>(spec.substeps);
    const double guard2 = spec.r_min_guard * spec.r_min_guard;

    Trajectory traj;
    traj.spec = spec;
    traj.observations.resize(static_cast<Eigen::Index>(spec.steps), 2);
    traj.positions.resize(static_cast<Eigen::Index>(spec.steps), 2);
    traj.velocities.resize(static_cast<Eigen::Index>(spec.steps), 2);

    Vec2 pos = init_position, vel = init_velocity;
    auto accel = [gm](const Vec2& p) -> Vec2 {
        const double r2 = p.squaredNorm();
        return -gm / (r2 * std::sqrt(r2)) * p;
    };
    Vec2 a = accel(pos);
    const double e0 = two_body_energy(spec, pos, vel);
    double max_drift = 0.0;

    for (std::size_t i = 0; i < spec.steps; ++i) {
        if (pos.squaredNorm() < guard2)
            throw TrajectoryTruncatedError("separation below r_min_guard", i);
        traj.observations.row(static_cast<Eigen::Index>(i)) = pos.transpose();
        traj.positions.row(static_cast<Eigen::Index>(i)) = pos.transpose();
        traj.velocities.row(static_cast<Eigen::Index>(i)) = vel.transpose();
        max_drift = std::max(max_drift, std::abs((two_body_energy(spec, pos, vel) - e0) / e0));
        if (i + 1 == spec.steps) break;
        for (std::size_t s = 0; s < spec.substeps; ++s) {
            pos += h * vel + 0.5 * h * h * a;
            const Vec2 a_new = accel(pos);
            vel += 0.5 * h * (a + a_new);
            a = a_new;
            if (pos.squaredNorm() < guard2)
                throw TrajectoryTruncatedError("separation below r_min_guard", i + 1);
        }
    }
    traj.energy_drift = max_drift;
    return traj;
}

Trajectory simulate_oscillator(const SystemSpec& spec, double init_position,
                               double init_velocity) {
    if (spec.system_kind != SystemKind::oscillator)
        throw InvalidSpecError("simulate_oscillator requires system_kind = oscillator");
    spec.validate();

    const double w2 = spec.k / spec.m1;
    const double h = spec.dt / static_cast<double>(spec.substeps);

    Trajectory traj;
    traj.spec = spec;
    traj.observations.resize(static_cast<Eigen::Index>(spec.steps), 1);
    traj.positions.resize(static_cast<Eigen::Index>(spec.steps), 1);
    traj.velocities.resize(static_cast<Eigen::Index>(spec.steps), 1);

    double x = init_position, v = init_velocity;
    double a = -w2 * x;
    const double e0 = oscillator_energy(spec, x, v);
    double max_drift = 0.0;

    for (std::size_t i = 0; i < spec.steps; ++i) {
        traj.observations(static_cast<Eigen::Index>(i), 0) = x;
        traj.positions(static_cast<Eigen::Index>(i), 0) = x;
        traj.velocities(static_cast<Eigen::Index>(i), 0) = v;
        if (e0 != 0.0)
            max_drift = std::max(max_drift, std::abs((oscillator_energy(spec, x, v) - e0) / e0));
        if (i + 1 == spec.steps) break;
        for (std::size_t s = 0; s < spec.substeps; ++s) {
            x += h * v + 0.5 * h * h * a;
            const double a_new = -w2 * x;
            v += 0.5 * h * (a + a_new);
            a = a_new;
        }
    }
    traj.energy_drift = max_drift;
    return traj;
}

void check_role_invariants(SplitRole role, const ParamRanges& ranges,
                           const ParamRanges& ssl_ranges) {
    if (role == SplitRole::probe_train) {
        for (const auto& [name, iv] : ranges) {
            const auto it = ssl_ranges.find(name);
            if (it == ssl_ranges.end())
                throw InvalidSplitError("probe_train range '" + name + "' not declared in ssl_train");
            if (iv.first < it->second.first || iv.second > it->second.second)
                throw InvalidSplitError("probe_train range '" + name + "' not contained in ssl_train range");
        }
    } else if (role == SplitRole::ood_test) {
        bool any_disjoint = false;
        for (const auto& [name, iv] : ranges) {
            const auto it = ssl_ranges.find(name);
            if (it == ssl_ranges.end()) continue;
            if (iv.second < it->second.first || iv.first > it->second.second) {
                any_disjoint = true;
                break;
            }
        }
        if (!any_disjoint)
            throw InvalidSplitError("ood_test requires at least one parameter interval disjoint from ssl_train");
    }
}

namespace {

double draw(Rng& rng, const ParamRanges& ranges, const std::string& name, double fallback) {
    const auto it = ranges.find(name);
    if (it == ranges.end()) return fallback;
    if (it->second.second < it->second.first)
        throw InvalidSpecError("empty interval for '" + name + "'");
    if (it->second.second == it->second.first) return it->second.first;
    return rng.uniform(it->second.first, it->second.second);
}

} // namespace

DatasetSplit sample_dataset(const ParamRanges& ranges, std::size_t n_trajectories,
                            SplitRole role, std::uint64_t seed, const SampleOptions& opts) {
    if (opts.reference_ranges) check_role_invariants(role, ranges, *opts.reference_ranges);

    DatasetSplit split;
    split.role = role;
    split.generator_ranges = ranges;
    split.trajectories.reserve(n_trajectories);

    for (std::size_t i = 0; i < n_trajectories; ++i) {
        Rng rng(derive_seed(seed, i));
        SystemSpec spec;
        spec.system_kind = opts.system_kind;
        spec.dt = opts.dt;
        spec.steps = opts.steps;
        spec.r_min_guard = opts.r_min_guard;
        spec.substeps = opts.substeps;
        spec.m1 = opts.m1;

        if (opts.system_kind == SystemKind::two_body) {
            double m2 = 1.0, g = 1.0, r0 = 1.0, mult = 1.0;
            for (int attempt = 0;; ++attempt) {
                m2 = draw(rng, ranges, "m2", 1.0);
                g = draw(rng, ranges, "G", 1.0);
                r0 = draw(rng, ranges, "r0", 1.0);
                mult = draw(rng, ranges, "speed_mult", 1.0);
                if (opts.kepler_scale_ref)
                    r0 *= std::cbrt(m2 / *opts.kepler_scale_ref);
                // analytic apsis distances for a tangential launch: the other
                // apsis is r0 * mult^2 / (2 - mult^2)
                const double denom = 2.0 - mult * mult;
                if (denom <= 0) continue; // unbound, resample
                const double perihelion = std::min(r0, r0 * mult * mult / denom);
                if (perihelion > spec.r_min_guard * 1.02) break;
                if (attempt > 10000)
                    throw InvalidSpecError("sampling ranges incompatible with r_min_guard");
            }
            spec.G = g;
            spec.m2 = m2;
            const double v_circ = std::sqrt(g * m2 / r0);
            Trajectory traj = simulate_two_body(spec, Vec2(r0, 0.0), Vec2(0.0, mult * v_circ));
            traj.gen_params = {{"m2", m2}, {"G", g}, {"r0", r0}, {"speed_mult", mult}};
            split.trajectories.push_back(std::move(traj));
        } else {
            const double k = draw(rng, ranges, "k", 1.0);
            const double x0 = draw(rng, ranges, "x0", 1.0);
            const double v0 = draw(rng, ranges, "v0", 0.0);
            spec.k = k;
            Trajectory traj = simulate_oscillator(spec, x0, v0);
            traj.gen_params = {{"k", k}, {"x0", x0}, {"v0", v0}};
            split.trajectories.push_back(std::move(traj));
        }
    }
    return split;
}

Eigen::Index target_dim(SystemKind kind, const std::string& target) {
    const Eigen::Index state_dim = kind == SystemKind::two_body ? 2 : 1;
    if (target == "force" || target == "momentum") return state_dim;
    if (target == "force_magnitude" || target == "speed" || target == "radius" ||
        target == "energy" || target == "mass")
        return 1;
    throw UnsupportedTargetError("unsupported target: " + target);
}

bool target_supported(SystemKind kind, const std::string& target) {
    (void)kind;
    for (const char* t : {"force", "force_magnitude", "speed", "radius", "momentum", "energy", "mass"})
        if (target == t) return true;
    return false;
}

std::vector<std::string> supported_targets(SystemKind kind) {
    (void)kind;
    return {"force", "force_magnitude", "speed", "radius", "momentum", "energy", "mass"};
}

Vector target_value(const SystemSpec& spec, const Vector& position,
                    const Vector& velocity, const std::string& target) {
    if (spec.system_kind == SystemKind::two_body) {
        const double r = position.norm();
        if (target == "force") return -spec.G * spec.m1 * spec.m2 / (r * r * r) * position;
        if (target == "force_magnitude") return Vector::Constant(1, spec.G * spec.m1 * spec.m2 / (r * r));
        if (target == "speed") return Vector::Constant(1, velocity.norm());
        if (target == "radius") return Vector::Constant(1, r);
        if (target == "momentum") return spec.m1 * velocity;
        if (target == "energy")
            return Vector::Constant(1, 0.5 * spec.m1 * velocity.squaredNorm() -
                                           spec.G * spec.m1 * spec.m2 / r);
        if (target == "mass") return Vector::Constant(1, spec.m2);
    } else {
        const double x = position(0), v = velocity(0);
        if (target == "force") return Vector::Constant(1, -spec.k * x);
        if (target == "force_magnitude") return Vector::Constant(1, std::abs(spec.k * x));
        if (target == "speed") return Vector::Constant(1, std::abs(v));
        if (target == "radius") return Vector::Constant(1, std::abs(x));
        if (target == "momentum") return Vector::Constant(1, spec.m1 * v);
        if (target == "energy") return Vector::Constant(1, 0.5 * (spec.k * x * x + spec.m1 * v * v));
        if (target == "mass") return Vector::Constant(1, spec.m1);
    }
    throw UnsupportedTargetError("unsupported target: " + target);
}

void compute_targets(Trajectory& traj, const std::set<std::string>& target_names) {
    if (traj.positions.rows() == 0) throw InvalidSpecError("full_states not populated");
    for (const auto& name : target_names) {
        if (!target_supported(traj.spec.system_kind, name))
            throw UnsupportedTargetError("unsupported target: " + name);
        const auto n = traj.positions.rows();
        Matrix series(n, target_dim(traj.spec.system_kind, name));
        for (Eigen::Index i = 0; i < n; ++i) {
            series.row(i) = target_value(traj.spec, traj.positions.row(i).transpose(),
                                         traj.velocities.row(i).transpose(), name)
                                .transpose();
        }
        traj.targets[name] = std::move(series);
    }
}

void compute_targets(DatasetSplit& split, const std::set<std::string>& target_names) {
    for (auto& t : split.trajectories) compute_targets(t, target_names);
}

StatsReport dataset_stats(const DatasetSplit& split, const std::string& variable, int bins) {
    if (bins < 1) throw InvalidSpecError("bins must be >= 1");

    std::vector<double> values;
    bool per_trajectory = false;
    if (!split.trajectories.empty()) {
        const auto& t0 = split.trajectories.front();
        per_trajectory = t0.gen_params.count(variable) > 0 || variable == "m2" ||
                         variable == "G" || variable == "k";
    }
    for (const auto& t : split.trajectories) {
        if (per_trajectory) {
            const auto it = t.gen_params.find(variable);
            if (it != t.gen_params.end()) {
                values.push_back(it->second);
            } else if (variable == "m2") {
                values.push_back(t.spec.m2);
            } else if (variable == "G") {
                values.push_back(t.spec.G);
            } else if (variable == "k") {
                values.push_back(t.spec.k);
            }
        } else {
            const auto it = t.targets.find(variable);
            if (it == t.targets.end())
                throw UnsupportedTargetError("variable not found in split: " + variable);
            if (it->second.cols() != 1)
                throw UnsupportedTargetError("dataset_stats needs a scalar series: " + variable);
            for (Eigen::Index i = 0; i < it->second.rows(); ++i)
                values.push_back(it->second(i, 0));
        }
    }
    if (values.empty()) throw UnsupportedTargetError("variable not found in split: " + variable);

    StatsReport rep;
    rep.variable = variable;
    rep.sample_count = values.size();
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    var /= static_cast<double>(values.size());
    rep.mean = mean;
    rep.variance = var;

    const auto [mn_it, mx_it] = std::minmax_element(values.begin(), values.end());
    double lo = *mn_it, hi = *mx_it;
    rep.counts.assign(static_cast<std::size_t>(bins), 0);
    rep.bin_edges.resize(static_cast<std::size_t>(bins) + 1);
    if (lo == hi) {
        // constant variable: single occupied bin around the value
        for (int i = 0; i <= bins; ++i)
            rep.bin_edges[static_cast<std::size_t>(i)] = lo - 0.5 + static_cast<double>(i) / bins;
        rep.counts[0] = values.size();
        rep.bin_edges[0] = lo;
        rep.bin_edges[1] = lo;
        return rep;
    }
    for (int i = 0; i <= bins; ++i)
        rep.bin_edges[static_cast<std::size_t>(i)] =
            lo + (hi - lo) * static_cast<double>(i) / bins;
    for (double v : values) {
        auto b = static_cast<std::size_t>((v - lo) / (hi - lo) * bins);
        if (b >= static_cast<std::size_t>(bins)) b = static_cast<std::size_t>(bins) - 1;
        rep.counts[b]++;
    }
    return rep;
}

// ---- file formats -----------------------------------------------------------

void save_trajectory(const Trajectory& traj, const std::filesystem::path& path) {
    io::AtomicFileWriter w(path);
    auto& os = w.stream();
    os.write(kTrajMagic, 8);
    io::write_pod<std::uint32_t>(os, kTrajVersion);
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(traj.spec.system_kind));
    io::write_pod<double>(os, traj.spec.G);
    io::write_pod<double>(os, traj.spec.m1);
    io::write_pod<double>(os, traj.spec.m2);
    io::write_pod<double>(os, traj.spec.k);
    io::write_pod<double>(os, traj.spec.dt);
    io::write_pod<std::uint64_t>(os, traj.spec.steps);
    io::write_pod<double>(os, traj.spec.r_min_guard);
    io::write_pod<std::uint64_t>(os, traj.spec.substeps);
    io::write_pod<double>(os, traj.energy_drift);

    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(traj.gen_params.size()));
    for (const auto& [k, v] : traj.gen_params) {
        io::write_string(os, k);
        io::write_pod<double>(os, v);
    }

    // field list: names + per-step dims, then one record per step
    const auto obs_dim = static_cast<std::uint32_t>(traj.observations.cols());
    const auto state_dim = static_cast<std::uint32_t>(traj.positions.cols());
    io::write_pod<std::uint32_t>(os, obs_dim);
    io::write_pod<std::uint32_t>(os, state_dim);
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(traj.targets.size()));
    for (const auto& [name, series] : traj.targets) {
        io::write_string(os, name);
        io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(series.cols()));
    }
    const auto steps = static_cast<Eigen::Index>(traj.spec.steps);
    for (Eigen::Index i = 0; i < steps; ++i) {
        for (Eigen::Index c = 0; c < traj.observations.cols(); ++c)
            io::write_pod<double>(os, traj.observations(i, c));
        for (Eigen::Index c = 0; c < traj.positions.cols(); ++c)
            io::write_pod<double>(os, traj.positions(i, c));
        for (Eigen::Index c = 0; c < traj.velocities.cols(); ++c)
            io::write_pod<double>(os, traj.velocities(i, c));
        for (const auto& [name, series] : traj.targets)
            for (Eigen::Index c = 0; c < series.cols(); ++c)
                io::write_pod<double>(os, series(i, c));
    }
    w.commit();
}

Trajectory load_trajectory(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kTrajMagic, 8) != 0)
        throw IoError("bad trajectory magic in " + path.string());
    const auto version = io::read_pod<std::uint32_t>(is);
    if (version != kTrajVersion) throw IoError("unsupported trajectory version");

    Trajectory traj;
    traj.spec.system_kind = static_cast<SystemKind>(io::read_pod<std::uint32_t>(is));
    traj.spec.G = io::read_pod<double>(is);
    traj.spec.m1 = io::read_pod<double>(is);
    traj.spec.m2 = io::read_pod<double>(is);
    traj.spec.k = io::read_pod<double>(is);
    traj.spec.dt = io::read_pod<double>(is);
    traj.spec.steps = io::read_pod<std::uint64_t>(is);
    traj.spec.r_min_guard = io::read_pod<double>(is);
    traj.spec.substeps = io::read_pod<std::uint64_t>(is);
    traj.energy_drift = io::read_pod<double>(is);

    const auto n_params = io::read_pod<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n_params; ++i) {
        const std::string k = io::read_string(is);
        traj.gen_params[k] = io::read_pod<double>(is);
    }

    const auto obs_dim = io::read_pod<std::uint32_t>(is);
    const auto state_dim = io::read_pod<std::uint32_t>(is);
    const auto n_targets = io::read_pod<std::uint32_t>(is);
    std::vector<std::pair<std::string, std::uint32_t>> target_fields;
    for (std::uint32_t i = 0; i < n_targets; ++i) {
        std::string name = io::read_string(is);
        const auto dim = io::read_pod<std::uint32_t>(is);
        target_fields.emplace_back(std::move(name), dim);
    }
    const auto steps = static_cast<Eigen::Index>(traj.spec.steps);
    traj.observations.resize(steps, obs_dim);
    traj.positions.resize(steps, state_dim);
    traj.velocities.resize(steps, state_dim);
    for (const auto& [name, dim] : target_fields) traj.targets[name] = Matrix(steps, dim);
    for (Eigen::Index i = 0; i < steps; ++i) {
        for (std::uint32_t c = 0; c < obs_dim; ++c) traj.observations(i, c) = io::read_pod<double>(is);
        for (std::uint32_t c = 0; c < state_dim; ++c) traj.positions(i, c) = io::read_pod<double>(is);
        for (std::uint32_t c = 0; c < state_dim; ++c) traj.velocities(i, c) = io::read_pod<double>(is);
        for (const auto& [name, dim] : target_fields)
            for (std::uint32_t c = 0; c < dim; ++c) traj.targets[name](i, c) = io::read_pod<double>(is);
    }
    return traj;
}

void export_trajectory_csv(const Trajectory& traj, const std::filesystem::path& path) {
    io::AtomicFileWriter w(path);
    auto& os = w.stream();
    os << "step,t";
    for (Eigen::Index c = 0; c < traj.observations.cols(); ++c) os << ",obs" << c;
    for (Eigen::Index c = 0; c < traj.positions.cols(); ++c) os << ",pos" << c;
    for (Eigen::Index c = 0; c < traj.velocities.cols(); ++c) os << ",vel" << c;
    for (const auto& [name, series] : traj.targets) {
        if (series.cols() == 1) {
            os << "," << name;
        } else {
            for (Eigen::Index c = 0; c < series.cols(); ++c) os << "," << name << c;
        }
    }
    os << "\n";
    os.precision(17);
    for (Eigen::Index i = 0; i < traj.observations.rows(); ++i) {
        os << i << "," << static_cast<double>(i) * traj.spec.dt;
        for (Eigen::Index c = 0; c < traj.observations.cols(); ++c) os << "," << traj.observations(i, c);
        for (Eigen::Index c = 0; c < traj.positions.cols(); ++c) os << "," << traj.positions(i, c);
        for (Eigen::Index c = 0; c < traj.velocities.cols(); ++c) os << "," << traj.velocities(i, c);
        for (const auto& [name, series] : traj.targets)
            for (Eigen::Index c = 0; c < series.cols(); ++c) os << "," << series(i, c);
        os << "\n";
    }
    w.commit();
}

void save_split(const DatasetSplit& split, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json manifest;
    manifest["role"] = to_string(split.role);
    nlohmann::ordered_json ranges = nlohmann::ordered_json::object();
    for (const auto& [name, iv] : split.generator_ranges) ranges[name] = {iv.first, iv.second};
    manifest["generator_ranges"] = ranges;
    nlohmann::ordered_json files = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < split.trajectories.size(); ++i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%06zu.traj", i);
        save_trajectory(split.trajectories[i], dir / buf);
        files.push_back(buf);
    }
    manifest["files"] = files;
    io::AtomicFileWriter w(dir / "manifest.json");
    w.stream() << manifest.dump(2) << "\n";
    w.commit();
}

DatasetSplit load_split(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw IoError("cannot open manifest in " + dir.string());
    nlohmann::json manifest = nlohmann::json::parse(is);
    DatasetSplit split;
    split.role = split_role_from_string(manifest.at("role").get<std::string>());
    for (const auto& [name, iv] : manifest.at("generator_ranges").items())
        split.generator_ranges[name] = {iv.at(0).get<double>(), iv.at(1).get<double>()};
    for (const auto& f : manifest.at("files"))
        split.trajectories.push_back(load_trajectory(dir / f.get<std::string>()));
    return split;
}

} // namespace physprobe::dynamics
