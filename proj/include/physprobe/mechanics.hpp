#pragma once

#include "physprobe/core.hpp"
#include "physprobe/dynamics.hpp"
#include "physprobe/probes.hpp"
#include "physprobe/worldmodel.hpp"

#include <map>
#include <set>
#include <string>
#include <vector>

namespace physprobe::mechanics {

/// Linear CKA between two activation matrices (rows = paired samples):
/// ||Yc' Xc||_F^2 / (||Xc' Xc||_F ||Yc' Yc||_F) on column-centered data.
/// Symmetric, in [0, 1], invariant to orthogonal maps and isotropic scaling.
double cka_linear(const Matrix& x, const Matrix& y);

struct DriftReport {
    std::vector<std::string> layers; // ordered by depth
    std::vector<double> delta;       // relative Frobenius change per layer
};

/// delta^(l) = ||theta'_l - theta_l||_F / ||theta_l||_F per named layer.
DriftReport param_drift(const model::ModelParams& before, const model::ModelParams& after);

struct CKAReport {
    std::vector<std::string> blocks;
    std::vector<double> similarity;
    std::size_t sample_count = 0;
};

/// Per-block CKA between before/after activations on one shared ID batch.
CKAReport cka_report(const model::ModelParams& before, const model::ModelParams& after,
                     const dynamics::DatasetSplit& data, std::size_t max_samples = 2000,
                     int stride = 4, std::uint64_t seed = 0);

struct ErasureLayer {
    std::string block;
    std::vector<int> selected_neurons; // top fraction by projection-row change
    std::map<std::string, double> max_corr_before;
    std::map<std::string, double> max_corr_after;
    std::map<std::string, double> delta_rho;
    std::vector<int> skipped_neurons; // zero-variance activations
};

struct ErasureReport {
    std::vector<ErasureLayer> layers;
    double selection_fraction = 0.2;
};

/// Core of the erasure metric, exposed for direct testing: select columns of
/// the activation histories by per-neuron weight change, report the shift in
/// max |corr| against each concept series.
ErasureLayer erasure_core(const Matrix& acts_before, const Matrix& acts_after,
                          const Vector& neuron_change,
                          const std::map<std::string, Vector>& concepts,
                          double selection_fraction);

/// Per-block erasure analysis: neurons ranked by the change of their row in
/// the block's MLP projection matrix, activations = projection-layer outputs.
ErasureReport erasure_shift(const model::ModelParams& before, const model::ModelParams& after,
                            const dynamics::DatasetSplit& data,
                            const std::set<std::string>& concepts,
                            double selection_fraction = 0.2, int stride = 4);

struct ScanEntry {
    std::string block;
    double linear_rho = 0.0, linear_mape = 0.0;
    double mlp_rho = 0.0, mlp_mape = 0.0;
};

struct LayerScan {
    std::vector<ScanEntry> entries;
    std::string best_block; // argmax linear rho
};

struct ScanOptions {
    double alpha = 1.0;
    std::size_t probe_samples = 1250;
    probes::MlpHyper mlp;
    model::ExtractionPlan plan;
    probes::EvalOptions eval;
};

/// Fit linear + MLP probes at every block on ID data, evaluate on the OOD
/// suite. Each entry equals a standalone fit with the same options.
LayerScan layer_probe_scan(const model::ModelParams& params,
                           const dynamics::DatasetSplit& id_data,
                           const std::vector<dynamics::DatasetSplit>& ood_suite,
                           const std::string& target, const ScanOptions& opts);

struct Projection2D {
    Matrix coords;             // N x 2
    double explained_var1 = 0.0;
    double explained_var2 = 0.0;
    bool degenerate = false;   // rank < 2, second coordinate zeroed
};

/// Principal-component projection of activation rows onto the top-2
/// directions, deterministic sign convention.
Projection2D project_2d(const model::ActivationRecord& record);
Projection2D project_2d_data(const Matrix& data);

} // namespace physprobe::mechanics
