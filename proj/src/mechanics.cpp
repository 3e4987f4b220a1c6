#include "physprobe/mechanics.hpp"

#include "physprobe/errors.hpp"
#include "physprobe/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace physprobe::mechanics {

namespace {

// tanh(w1...) * w2 + b2 per block, i.e. the projection-layer output before
// the residual addition
std::vector<Matrix> block_mlp_outputs(const model::ModelParams& p, const Matrix& inputs) {
    std::vector<Matrix> outs;
    auto act = model::batch_forward(p, inputs);
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        const auto& b = p.blocks[i];
        const Matrix& s_in = act.latents[i]; // input to block i
        Matrix a = (((s_in * b.w1).rowwise() + b.b1.col(0).transpose()).array().tanh()).matrix();
        outs.push_back(((a * b.w2).rowwise() + b.b2.col(0).transpose()).matrix());
    }
    return outs;
}

Matrix subsampled_inputs(const dynamics::DatasetSplit& data, int window, int stride,
                         std::size_t max_samples, std::uint64_t seed,
                         std::vector<std::pair<int, int>>* provenance = nullptr) {
    model::WindowSet ws = model::strided_windows(data, window, stride);
    const auto n = ws.inputs.rows();
    std::vector<Eigen::Index> keep(static_cast<std::size_t>(n));
    std::iota(keep.begin(), keep.end(), 0);
    if (max_samples > 0 && keep.size() > max_samples) {
        Rng rng(derive_seed(seed, 0xcca));
        rng.shuffle(keep);
        keep.resize(max_samples);
        std::sort(keep.begin(), keep.end());
    }
    Matrix out(static_cast<Eigen::Index>(keep.size()), ws.inputs.cols());
    if (provenance) provenance->clear();
    for (std::size_t r = 0; r < keep.size(); ++r) {
        out.row(static_cast<Eigen::Index>(r)) = ws.inputs.row(keep[r]);
        if (provenance) provenance->push_back(ws.provenance[static_cast<std::size_t>(keep[r])]);
    }
    return out;
}

} // namespace

double cka_linear(const Matrix& x, const Matrix& y) {
    if (x.rows() != y.rows()) throw ShapeError("cka_linear needs equal row counts");
    if (x.rows() < 2) throw ShapeError("cka_linear needs at least 2 rows");
    Matrix xc = x.rowwise() - x.colwise().mean();
    Matrix yc = y.rowwise() - y.colwise().mean();
    const double xx = (xc.transpose() * xc).norm();
    const double yy = (yc.transpose() * yc).norm();
    if (xx == 0.0 || yy == 0.0)
        throw ZeroVarianceError("cka_linear undefined for zero-variance input");
    const double xy = (yc.transpose() * xc).squaredNorm();
    return xy / (xx * yy);
}

DriftReport param_drift(const model::ModelParams& before, const model::ModelParams& after) {
    const auto before_named = before.named_matrices();
    const auto after_named = after.named_matrices();
    std::map<std::string, const Matrix*> after_map;
    for (const auto& [n, m] : after_named) after_map[n] = m;

    // architectures must agree on the shared (non-task-head) tensors
    for (const auto& [n, m] : before_named) {
        if (n.rfind("task_head.", 0) == 0) continue;
        const auto it = after_map.find(n);
        if (it == after_map.end() || it->second->rows() != m->rows() ||
            it->second->cols() != m->cols())
            throw ShapeError("param_drift: architecture mismatch at " + n);
    }

    DriftReport rep;
    for (const auto& [layer, tensor_names] : before.layer_groups()) {
        double num = 0.0, den = 0.0;
        for (const auto& tn : tensor_names) {
            const Matrix* mb = nullptr;
            for (const auto& [n, m] : before_named)
                if (n == tn) mb = m;
            const auto ia = after_map.find(tn);
            if (!mb || ia == after_map.end()) continue;
            num += (*ia->second - *mb).squaredNorm();
            den += mb->squaredNorm();
        }
        rep.layers.push_back(layer);
        rep.delta.push_back(den > 0.0 ? std::sqrt(num) / std::sqrt(den)
                                      : (num > 0.0 ? std::numeric_limits<double>::infinity() : 0.0));
    }
    return rep;
}

CKAReport cka_report(const model::ModelParams& before, const model::ModelParams& after,
                     const dynamics::DatasetSplit& data, std::size_t max_samples, int stride,
                     std::uint64_t seed) {
    const Matrix inputs =
        subsampled_inputs(data, before.config.window, stride, max_samples, seed);
    auto act_before = model::batch_forward(before, inputs);
    auto act_after = model::batch_forward(after, inputs);
    CKAReport rep;
    rep.sample_count = static_cast<std::size_t>(inputs.rows());
    const auto names = before.latent_names();
    for (std::size_t i = 0; i < names.size(); ++i) {
        rep.blocks.push_back(names[i]);
        rep.similarity.push_back(cka_linear(act_before.latents[i], act_after.latents[i]));
    }
    return rep;
}

ErasureLayer erasure_core(const Matrix& acts_before, const Matrix& acts_after,
                          const Vector& neuron_change,
                          const std::map<std::string, Vector>& concepts,
                          double selection_fraction) {
    const auto width = acts_before.cols();
    if (acts_after.cols() != width || neuron_change.size() != width)
        throw ShapeError("erasure_core shape mismatch");
    const auto n_select =
        static_cast<std::size_t>(std::ceil(selection_fraction * static_cast<double>(width)));
    std::vector<int> order(static_cast<std::size_t>(width));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return neuron_change[a] > neuron_change[b]; });
    order.resize(n_select);

    ErasureLayer layer;
    layer.selected_neurons = order;
    for (const auto& [name, phi] : concepts) {
        double best_before = 0.0, best_after = 0.0;
        for (int j : order) {
            bool zv = false;
            const double cb = std::abs(pearson(acts_before.col(j), phi, &zv));
            if (zv) {
                layer.skipped_neurons.push_back(j);
            } else {
                best_before = std::max(best_before, cb);
            }
            bool zva = false;
            const double ca = std::abs(pearson(acts_after.col(j), phi, &zva));
            if (!zva) best_after = std::max(best_after, ca);
        }
        layer.max_corr_before[name] = best_before;
        layer.max_corr_after[name] = best_after;
        layer.delta_rho[name] = best_after - best_before;
    }
    // dedupe skip list (recorded once per neuron)
    std::sort(layer.skipped_neurons.begin(), layer.skipped_neurons.end());
    layer.skipped_neurons.erase(
        std::unique(layer.skipped_neurons.begin(), layer.skipped_neurons.end()),
        layer.skipped_neurons.end());
    return layer;
}

ErasureReport erasure_shift(const model::ModelParams& before, const model::ModelParams& after,
                            const dynamics::DatasetSplit& data,
                            const std::set<std::string>& concepts, double selection_fraction,
                            int stride) {
    if (data.empty()) throw InvalidSpecError("erasure_shift on empty split");
    std::vector<std::pair<int, int>> prov;
    const Matrix inputs =
        subsampled_inputs(data, before.config.window, stride, 0, 0, &prov);

    std::map<std::string, Vector> concept_series;
    for (const auto& name : concepts) {
        Vector phi(inputs.rows());
        for (Eigen::Index i = 0; i < inputs.rows(); ++i) {
            const auto [ti, t] = prov[static_cast<std::size_t>(i)];
            const auto& traj = data.trajectories[static_cast<std::size_t>(ti)];
            const auto it = traj.targets.find(name);
            if (it == traj.targets.end())
                throw UnsupportedTargetError("concept not computed on split: " + name);
            phi[i] = it->second(t + 1, 0);
        }
        concept_series[name] = std::move(phi);
    }

    const auto outs_before = block_mlp_outputs(before, inputs);
    const auto outs_after = block_mlp_outputs(after, inputs);

    ErasureReport rep;
    rep.selection_fraction = selection_fraction;
    for (std::size_t bi = 0; bi < before.blocks.size(); ++bi) {
        // per-neuron projection-row change: output unit j owns column j of w2
        Vector change(before.config.width);
        for (Eigen::Index j = 0; j < before.config.width; ++j)
            change[j] = (after.blocks[bi].w2.col(j) - before.blocks[bi].w2.col(j)).norm();
        ErasureLayer layer =
            erasure_core(outs_before[bi], outs_after[bi], change, concept_series,
                         selection_fraction);
        layer.block = "block" + std::to_string(bi);
        rep.layers.push_back(std::move(layer));
    }
    return rep;
}

LayerScan layer_probe_scan(const model::ModelParams& params,
                           const dynamics::DatasetSplit& id_data,
                           const std::vector<dynamics::DatasetSplit>& ood_suite,
                           const std::string& target, const ScanOptions& opts) {
    LayerScan scan;
    double best_rho = -2.0;
    for (const auto& block : params.latent_names()) {
        model::ExtractionPlan plan = opts.plan;
        plan.max_samples = opts.probe_samples;
        const auto rec = model::extract_activations(params, id_data, block, target,
                                                    model::TargetMode::next_state, plan);
        ScanEntry entry;
        entry.block = block;

        probes::LinearProbe lin = probes::fit_linear_probe(rec, opts.alpha);
        probes::PhyipPredictor lin_pred(params, lin);
        const auto lin_rep = probes::evaluate_predictor(lin_pred, ood_suite, target, opts.eval);
        entry.linear_rho = lin_rep.rho_mean;
        entry.linear_mape = lin_rep.mape_mean;

        probes::MlpPredictor mlp_pred(params, block,
                                      probes::train_mlp_probe(rec.latents, rec.targets, opts.mlp));
        const auto mlp_rep = probes::evaluate_predictor(mlp_pred, ood_suite, target, opts.eval);
        entry.mlp_rho = mlp_rep.rho_mean;
        entry.mlp_mape = mlp_rep.mape_mean;

        if (entry.linear_rho > best_rho) {
            best_rho = entry.linear_rho;
            scan.best_block = block;
        }
        scan.entries.push_back(std::move(entry));
    }
    return scan;
}

Projection2D project_2d_data(const Matrix& data) {
    if (data.rows() < 3) throw InvalidSpecError("project_2d needs at least 3 samples");
    Matrix centered = data.rowwise() - data.colwise().mean();
    const Matrix cov =
        centered.transpose() * centered / static_cast<double>(data.rows() - 1);
    Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
    const auto& evals = es.eigenvalues(); // ascending
    const auto d = cov.rows();

    Vector v1 = es.eigenvectors().col(d - 1);
    Vector v2 = d >= 2 ? es.eigenvectors().col(d - 2) : Vector::Zero(d);
    auto fix_sign = [](Vector& v) {
        Eigen::Index imax = 0;
        v.cwiseAbs().maxCoeff(&imax);
        if (v[imax] < 0) v = -v;
    };
    fix_sign(v1);

    const double total = std::max(evals.sum(), 0.0);
    const double lam1 = std::max(evals[d - 1], 0.0);
    const double lam2 = d >= 2 ? std::max(evals[d - 2], 0.0) : 0.0;

    Projection2D out;
    out.coords.resize(data.rows(), 2);
    out.coords.col(0) = centered * v1;
    const double rank2_tol = 1e-12 * std::max(lam1, 1.0);
    if (lam2 <= rank2_tol) {
        out.degenerate = true;
        out.coords.col(1).setZero();
    } else {
        fix_sign(v2);
        out.coords.col(1) = centered * v2;
    }
    out.explained_var1 = total > 0 ? lam1 / total : 0.0;
    out.explained_var2 = total > 0 ? lam2 / total : 0.0;
    return out;
}

Projection2D project_2d(const model::ActivationRecord& record) {
    return project_2d_data(record.latents);
}

} // namespace physprobe::mechanics
