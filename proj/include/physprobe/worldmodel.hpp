#pragma once

#include "physprobe/core.hpp"
#include "physprobe/dynamics.hpp"
#include "physprobe/errors.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace physprobe::model {

struct ModelConfig {
    int window = 8;     // context length in observation steps
    int width = 96;     // latent dimension d
    int n_blocks = 6;
    int obs_dim = 2;
    std::uint64_t seed = 0;

    void validate() const;
    int input_dim() const { return window * obs_dim; }
};

/// One residual block: s <- LN(s + w2 * tanh(w1 * s + b1) + b2).
struct Block {
    // biases and LN parameters are stored as n x 1 matrices so every tensor
    // shares one named-access path (checkpoints, drift, optimizer slots)
    Matrix w1, w2;          // width x width, applied as row-vector * W
    Matrix b1, b2;          // width x 1
    Matrix ln_gamma, ln_beta;
};

struct TaskHead {
    Matrix w; // width x k
    Matrix b; // k x 1
};

/// All weights of the predictor; encoder -> embedding LN -> blocks -> linear
/// head g. The head is zero at init so g(0) = 0 and the initial model is the
/// identity map on the last observation.
struct ModelParams {
    ModelConfig config;
    Matrix enc_w;              // input_dim x width
    Matrix enc_b;              // width x 1
    Matrix emb_gamma, emb_beta;
    std::vector<Block> blocks;
    Matrix head_w;             // width x obs_dim
    Matrix head_b;             // obs_dim x 1
    std::optional<TaskHead> task_head;

    /// Named tensors in fixed depth order (checkpoints, drift, checksums).
    std::vector<std::pair<std::string, const Matrix*>> named_matrices() const;
    std::vector<std::pair<std::string, Matrix*>> named_matrices();

    /// Depth-ordered layer grouping: encoder, block0..block{n-1}, head
    /// (+ task_head when attached).
    std::vector<std::pair<std::string, std::vector<std::string>>> layer_groups() const;

    std::size_t parameter_count() const;
    std::uint64_t checksum() const;
    /// Checksum of everything except the task head (the frozen backbone).
    std::uint64_t backbone_checksum() const;

    /// Latent names: "block0".."block{n-1}" (inputs to blocks) and "head"
    /// (input to the decoder head).
    std::vector<std::string> latent_names() const;
    int latent_index(const std::string& block_name) const;
};

ModelParams init_model(const ModelConfig& config);

struct ForwardResult {
    std::vector<Vector> latents; // n_blocks + 1 entries, per latent_names()
    Vector prediction;           // x_hat(t+1)
};

/// Pure per-sample forward pass. `window` is (config.window x obs_dim),
/// oldest row first.
ForwardResult forward(const ModelParams& params, const Matrix& window);

/// Batched evaluation as a loop over forward(); rows of `windows` are
/// flattened contexts. Bit-identical to calling forward() per sample.
std::vector<ForwardResult> forward_batch(const ModelParams& params,
                                         const std::vector<Matrix>& windows);

/// Flattened window layout used by the batch kernels: row-major in time,
/// (x_{t-w+1}..x_t), each observation contiguous.
struct WindowSet {
    Matrix inputs;   // N x (window*obs_dim)
    Matrix next_obs; // N x obs_dim
    std::vector<std::pair<int, int>> provenance; // (trajectory, step t)
};

/// Every valid window at the given step stride.
WindowSet strided_windows(const dynamics::DatasetSplit& split, int window, int stride);
/// `per_traj` windows per trajectory at seeded random positions.
WindowSet sampled_windows(const dynamics::DatasetSplit& split, int window, int per_traj,
                          std::uint64_t seed);

/// GEMM-based batch forward. Matches the per-sample path to floating-point
/// reassociation (~1e-12); the per-sample path is the reference semantics.
struct BatchActivations {
    std::vector<Matrix> latents; // n_blocks + 1 matrices, N x width
    Matrix predictions;          // N x obs_dim
};
BatchActivations batch_forward(const ModelParams& params, const Matrix& inputs);

/// SSL loss on a batch: mean_i ||pred_i - next_i||^2, plus gradients for
/// every tensor (reverse-mode, hand accumulated). Used by training and the
/// finite-difference gradient checks.
struct Gradients {
    std::map<std::string, Matrix> by_name;
};
double ssl_loss_and_gradients(const ModelParams& params, const Matrix& inputs,
                              const Matrix& next_obs, Gradients* grads);

/// Task loss mean_i ||task_head(s_n) - target_i||^2 with gradients for the
/// task head and the full backbone (the frozen SSL head is not on the task
/// path and receives none). Requires params.task_head.
double task_loss_and_gradients(const ModelParams& params, const Matrix& inputs,
                               const Matrix& targets, Gradients* grads);

struct SslHyper {
    double lr = 1e-3;
    int batch = 64;
    int epochs = 10;
    std::uint64_t seed = 0;
    double weight_decay = 1e-4;
    bool cosine_decay = true;
    int windows_per_traj = 20;
    std::vector<int> checkpoint_epochs; // epoch numbers to snapshot (0 = init)
};

struct TrainLog {
    std::vector<double> epoch_losses;
    SslHyper hyper;
    double wall_time_sec = 0.0;
};

struct TrainResult {
    ModelParams params;
    TrainLog log;
    std::vector<std::pair<int, ModelParams>> checkpoints;
};

/// AdamW on the mean-squared next-observation error. Deterministic per seed.
/// Throws DivergenceError on non-finite loss (checkpoints taken so far are in
/// the exception's partial result via the last argument when provided).
TrainResult train_ssl(const ModelParams& params, const dynamics::DatasetSplit& data,
                      const SslHyper& hyper);

/// Mean squared next-observation error over all valid windows (stride 1).
double evaluate_ssl(const ModelParams& params, const dynamics::DatasetSplit& data);

enum class TargetMode { next_state, increment };

struct ActivationRecord {
    std::string block_name;
    std::string target_name;
    TargetMode mode = TargetMode::next_state;
    Matrix latents;  // N x width
    Matrix targets;  // N x k  (s(t+1), or s(t+1) - s(t) in increment mode)
    std::vector<std::pair<int, int>> provenance;
};

struct ExtractionPlan {
    int stride = 4;
    std::size_t max_samples = 0; // 0 = keep all
    std::uint64_t subsample_seed = 0;
};

/// Frozen-activation extraction paired with next-step targets. Never mutates
/// `params`; targets must have been computed on the split.
ActivationRecord extract_activations(const ModelParams& params,
                                     const dynamics::DatasetSplit& data,
                                     const std::string& block_name,
                                     const std::string& target,
                                     TargetMode mode = TargetMode::next_state,
                                     const ExtractionPlan& plan = {});

/// Central finite-difference Jacobian of the decoder head g at h = 0,
/// shape obs_dim x width.
Matrix decoder_jacobian(const ModelParams& params, double fd_step = 1e-6);

/// Versioned binary checkpoint (magic, config, named tensors, f64 LE).
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

// ---- shared optimizer (also used by probe/fine-tune training) --------------

class AdamW {
public:
    AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

    /// One update; `key` identifies the tensor's moment slot.
    void step(const std::string& key, Matrix& param, const Matrix& grad, double lr_scale = 1.0);
    void bump() { ++t_; } // advance shared timestep (call once per batch)

private:
    double lr_, wd_, b1_, b2_, eps_;
    long t_ = 1;
    std::map<std::string, Matrix> m_, v_;
};

} // namespace physprobe::model
