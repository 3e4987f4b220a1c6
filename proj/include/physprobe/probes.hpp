#pragma once

#include "physprobe/core.hpp"
#include "physprobe/dynamics.hpp"
#include "physprobe/worldmodel.hpp"

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace physprobe::probes {

/// Time-invariant affine readout s_hat = W h + b, the exact minimizer of
/// sum_i ||s_i - (W h_i + b)||^2 + alpha ||W||_F^2.
struct LinearProbe {
    Matrix w;   // k x d
    Vector b;   // k
    double alpha = 1.0;
    std::string block_name;
    std::string target_name;

    Matrix predict(const Matrix& latents) const; // N x k
};

/// Closed-form centered ridge fit. alpha = 0 on a rank-deficient design
/// throws DegenerateDesignError advising alpha > 0.
LinearProbe fit_linear_probe(const model::ActivationRecord& record, double alpha = 1.0);
LinearProbe fit_linear_probe_data(const Matrix& latents, const Matrix& targets,
                                  double alpha = 1.0);

/// Regularized objective value at (w, b); the optimality property tests use it.
double ridge_objective(const Matrix& latents, const Matrix& targets, const Matrix& w,
                       const Vector& b, double alpha);

/// Plain gradient descent on the same objective (step 1/L via power
/// iteration). Converges to the closed form; exposed for the
/// closed-vs-iterative property.
LinearProbe fit_linear_probe_gd(const Matrix& latents, const Matrix& targets, double alpha,
                                int iterations);

enum class ProbeMethod { phyip, raw_input, time_dependent, mlp, last_layer_ft, full_ft };
std::string to_string(ProbeMethod m);

struct SetMetrics {
    double mape = 0.0;
    double rho = 0.0;
    std::vector<double> component_rho;
    bool zero_variance = false;
    bool undefined_mape = false;
};

struct ProbeReport {
    ProbeMethod method = ProbeMethod::phyip;
    std::string target_name;
    std::vector<SetMetrics> per_set;
    double mape_mean = 0.0, mape_std = 0.0;
    double rho_mean = 0.0, rho_std = 0.0;
};

std::string probe_report_json(const ProbeReport& report);

/// Zero-shot predictor over evaluation batches. Implementations hold frozen
/// state only; predict is const.
struct EvalBatch {
    Matrix raw_windows;      // N x (window*obs_dim)
    std::vector<int> steps;  // window end index t per row
};

class TargetPredictor {
public:
    virtual ~TargetPredictor() = default;
    virtual Matrix predict(const EvalBatch& batch) const = 0;
    virtual ProbeMethod method() const = 0;
};

class PhyipPredictor : public TargetPredictor {
public:
    PhyipPredictor(const model::ModelParams& frozen, LinearProbe probe)
        : model_(&frozen), probe_(std::move(probe)) {}
    Matrix predict(const EvalBatch& batch) const override;
    ProbeMethod method() const override { return ProbeMethod::phyip; }
    const LinearProbe& probe() const { return probe_; }

private:
    const model::ModelParams* model_;
    LinearProbe probe_;
};

class RawInputPredictor : public TargetPredictor {
public:
    explicit RawInputPredictor(LinearProbe probe) : probe_(std::move(probe)) {}
    Matrix predict(const EvalBatch& batch) const override;
    ProbeMethod method() const override { return ProbeMethod::raw_input; }

private:
    LinearProbe probe_;
};

/// One probe per window-end step index; unseen indices use the nearest
/// fitted step.
class TimeDependentPredictor : public TargetPredictor {
public:
    TimeDependentPredictor(const model::ModelParams& frozen, std::string block,
                           std::map<int, LinearProbe> per_step)
        : model_(&frozen), block_(std::move(block)), per_step_(std::move(per_step)) {}
    Matrix predict(const EvalBatch& batch) const override;
    ProbeMethod method() const override { return ProbeMethod::time_dependent; }
    const std::map<int, LinearProbe>& probes() const { return per_step_; }

private:
    const model::ModelParams* model_;
    std::string block_;
    std::map<int, LinearProbe> per_step_;
};

/// Two-hidden-layer ReLU readout (d -> h1 -> h2 -> k).
struct MlpProbeParams {
    Matrix w1, w2, w3;
    Matrix b1, b2, b3; // column vectors
    Matrix predict(const Matrix& latents) const;
};

struct MlpHyper {
    int hidden1 = 254;
    int hidden2 = 32;
    int epochs = 200;
    double lr = 1e-3;
    int batch = 64;
    double weight_decay = 1e-4;
    std::uint64_t seed = 0;
};

MlpProbeParams train_mlp_probe(const Matrix& latents, const Matrix& targets,
                               const MlpHyper& hyper);

class MlpPredictor : public TargetPredictor {
public:
    MlpPredictor(const model::ModelParams& frozen, std::string block, MlpProbeParams mlp)
        : model_(&frozen), block_(std::move(block)), mlp_(std::move(mlp)) {}
    Matrix predict(const EvalBatch& batch) const override;
    ProbeMethod method() const override { return ProbeMethod::mlp; }

private:
    const model::ModelParams* model_;
    std::string block_;
    MlpProbeParams mlp_;
};

/// Adapted model with task head; predictions run through its own backbone.
class FinetunedPredictor : public TargetPredictor {
public:
    FinetunedPredictor(model::ModelParams adapted, ProbeMethod method)
        : model_(std::move(adapted)), method_(method) {}
    Matrix predict(const EvalBatch& batch) const override;
    ProbeMethod method() const override { return method_; }
    const model::ModelParams& adapted() const { return model_; }

private:
    model::ModelParams model_;
    ProbeMethod method_;
};

enum class BaselineKind { raw_input, time_dependent, mlp };

struct BaselineHyper {
    double alpha = 1.0;
    /// Per-step ridge is scaled to alpha * N_step / N_pool so per-sample
    /// regularization matches the pooled probe; a single-step grouping then
    /// coincides with the time-invariant fit.
    bool scale_alpha_per_step = true;
    std::size_t pool_samples = 1250;
    MlpHyper mlp;
    model::ExtractionPlan plan;
};

/// Fit one of the control baselines on ID data at the given block.
std::unique_ptr<TargetPredictor> fit_baseline_probe(BaselineKind kind,
                                                    const model::ModelParams& frozen,
                                                    const dynamics::DatasetSplit& data,
                                                    const std::string& block,
                                                    const std::string& target,
                                                    const BaselineHyper& hyper);

enum class FinetuneMode { last_layer, full };

struct FinetuneHyper {
    double lr = 1e-3;
    int batch = 64;
    int epochs = 30;
    std::uint64_t seed = 0;
    double weight_decay = 1e-4;
    double head_init_scale = 1.0;
    std::string target = "force";
    int stride = 2; // task windows per trajectory step stride
};

struct FinetuneResult {
    model::ModelParams params; // adapted model with task head attached
    model::TrainLog log;
};

/// Attach a fresh random task head and adapt. `full` updates the whole
/// backbone; `last_layer` leaves every backbone tensor byte-identical.
FinetuneResult finetune(const model::ModelParams& params,
                        const dynamics::DatasetSplit& task_data, FinetuneMode mode,
                        const FinetuneHyper& hyper);

struct EvalOptions {
    int window = 8; // context length the predictors were built for
    int stride = 4;
    double magnitude_floor = 1e-8;
};

/// Zero-shot evaluation over an OOD suite: per-set MAPE and Pearson rho on
/// magnitudes (per-component rho also recorded for vector targets).
ProbeReport evaluate_predictor(const TargetPredictor& predictor,
                               const std::vector<dynamics::DatasetSplit>& ood_suite,
                               const std::string& target, const EvalOptions& opts = {});

} // namespace physprobe::probes
