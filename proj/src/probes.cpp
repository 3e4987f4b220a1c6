#include "physprobe/probes.hpp"

#include "physprobe/errors.hpp"
#include "physprobe/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace physprobe::probes {

namespace {

Matrix latents_at(const model::ModelParams& m, const Matrix& raw, const std::string& block) {
    auto act = model::batch_forward(m, raw);
    return std::move(act.latents[static_cast<std::size_t>(m.latent_index(block))]);
}

Vector magnitudes(const Matrix& values) {
    if (values.cols() == 1) return values.col(0);
    return values.rowwise().norm();
}

} // namespace

Matrix LinearProbe::predict(const Matrix& latents) const {
    return (latents * w.transpose()).rowwise() + b.transpose();
}

LinearProbe fit_linear_probe_data(const Matrix& latents, const Matrix& targets, double alpha) {
    if (latents.rows() != targets.rows()) throw ShapeError("latents/targets row mismatch");
    const auto n = latents.rows();
    const auto d = latents.cols();
    if (n == 0) throw InvalidSpecError("empty probe-training set");
    if (alpha < 0) throw InvalidSpecError("alpha must be >= 0");
    if (n <= d)
        std::fprintf(stderr, "physprobe: warning: probe fit with N=%ld <= d=%ld samples\n",
                     static_cast<long>(n), static_cast<long>(d));

    const Eigen::RowVectorXd h_mean = latents.colwise().mean();
    const Eigen::RowVectorXd s_mean = targets.colwise().mean();
    Matrix hc = latents.rowwise() - h_mean;
    Matrix sc = targets.rowwise() - s_mean;
    Matrix gram = hc.transpose() * hc;
    gram.diagonal().array() += alpha;
    if (alpha == 0.0) {
        Eigen::FullPivLU<Matrix> lu(gram);
        if (lu.rank() < d)
            throw DegenerateDesignError(
                "singular ridge system at alpha = 0; use alpha > 0");
    }
    const Matrix wt = gram.ldlt().solve(hc.transpose() * sc); // d x k
    LinearProbe probe;
    probe.alpha = alpha;
    probe.w = wt.transpose();
    probe.b = s_mean.transpose() - probe.w * h_mean.transpose();
    return probe;
}

LinearProbe fit_linear_probe(const model::ActivationRecord& record, double alpha) {
    LinearProbe probe = fit_linear_probe_data(record.latents, record.targets, alpha);
    probe.block_name = record.block_name;
    probe.target_name = record.target_name;
    return probe;
}

double ridge_objective(const Matrix& latents, const Matrix& targets, const Matrix& w,
                       const Vector& b, double alpha) {
    Matrix pred = (latents * w.transpose()).rowwise() + b.transpose();
    return (pred - targets).squaredNorm() + alpha * w.squaredNorm();
}

LinearProbe fit_linear_probe_gd(const Matrix& latents, const Matrix& targets, double alpha,
                                int iterations) {
    const auto d = latents.cols();
    const auto k = targets.cols();
    const Eigen::RowVectorXd h_mean = latents.colwise().mean();
    const Eigen::RowVectorXd s_mean = targets.colwise().mean();
    Matrix hc = latents.rowwise() - h_mean;
    Matrix sc = targets.rowwise() - s_mean;
    Matrix gram = hc.transpose() * hc;
    gram.diagonal().array() += alpha;

    // Lipschitz constant of the centered quadratic via power iteration
    Vector v = Vector::Ones(d).normalized();
    double lam = 1.0;
    for (int i = 0; i < 100; ++i) {
        Vector nv = gram * v;
        lam = nv.norm();
        if (lam == 0) break;
        v = nv / lam;
    }
    const double step = 0.5 / std::max(lam, 1e-12);

    Matrix wt = Matrix::Zero(d, k);
    const Matrix rhs = hc.transpose() * sc;
    for (int it = 0; it < iterations; ++it) {
        Matrix grad = gram * wt - rhs; // d J/d wt for centered objective (x2 absorbed in step)
        wt -= step * grad;
    }
    LinearProbe probe;
    probe.alpha = alpha;
    probe.w = wt.transpose();
    probe.b = s_mean.transpose() - probe.w * h_mean.transpose();
    return probe;
}

std::string to_string(ProbeMethod m) {
    switch (m) {
        case ProbeMethod::phyip: return "phyip";
        case ProbeMethod::raw_input: return "raw_input";
        case ProbeMethod::time_dependent: return "time_dependent";
        case ProbeMethod::mlp: return "mlp";
        case ProbeMethod::last_layer_ft: return "last_layer_ft";
        case ProbeMethod::full_ft: return "full_ft";
    }
    return "?";
}

std::string probe_report_json(const ProbeReport& report) {
    nlohmann::ordered_json j;
    j["method"] = to_string(report.method);
    j["target"] = report.target_name;
    j["mape_mean"] = report.mape_mean;
    j["mape_std"] = report.mape_std;
    j["rho_mean"] = report.rho_mean;
    j["rho_std"] = report.rho_std;
    nlohmann::ordered_json sets = nlohmann::ordered_json::array();
    for (const auto& s : report.per_set) {
        nlohmann::ordered_json e;
        e["mape"] = s.mape;
        e["rho"] = s.rho;
        e["component_rho"] = s.component_rho;
        e["zero_variance"] = s.zero_variance;
        e["undefined_mape"] = s.undefined_mape;
        sets.push_back(e);
    }
    j["per_set"] = sets;
    return j.dump(2);
}

Matrix PhyipPredictor::predict(const EvalBatch& batch) const {
    return probe_.predict(latents_at(*model_, batch.raw_windows, probe_.block_name));
}

Matrix RawInputPredictor::predict(const EvalBatch& batch) const {
    return probe_.predict(batch.raw_windows);
}

Matrix TimeDependentPredictor::predict(const EvalBatch& batch) const {
    Matrix lat = latents_at(*model_, batch.raw_windows, block_);
    const auto n = lat.rows();
    const auto k = per_step_.begin()->second.w.rows();
    Matrix out(n, k);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int t = batch.steps[static_cast<std::size_t>(i)];
        auto it = per_step_.lower_bound(t);
        if (it == per_step_.end()) {
            --it;
        } else if (it != per_step_.begin() && it->first != t) {
            auto prev = std::prev(it);
            if (t - prev->first <= it->first - t) it = prev;
        }
        out.row(i) = (it->second.w * lat.row(i).transpose() + it->second.b).transpose();
    }
    return out;
}

Matrix MlpProbeParams::predict(const Matrix& latents) const {
    Matrix a1 = (((latents * w1).rowwise() + b1.col(0).transpose()).array().max(0.0)).matrix();
    Matrix a2 = (((a1 * w2).rowwise() + b2.col(0).transpose()).array().max(0.0)).matrix();
    return (a2 * w3).rowwise() + b3.col(0).transpose();
}

MlpProbeParams train_mlp_probe(const Matrix& latents, const Matrix& targets,
                               const MlpHyper& hyper) {
    const auto d = latents.cols();
    const auto k = targets.cols();
    Rng rng(derive_seed(hyper.seed, 0x3317));
    auto glorot = [&rng](Eigen::Index r, Eigen::Index c) {
        const double lim = std::sqrt(6.0 / static_cast<double>(r + c));
        Matrix m(r, c);
        for (Eigen::Index j = 0; j < c; ++j)
            for (Eigen::Index i = 0; i < r; ++i) m(i, j) = rng.uniform(-lim, lim);
        return m;
    };
    MlpProbeParams p;
    p.w1 = glorot(d, hyper.hidden1);
    p.b1 = Matrix::Zero(hyper.hidden1, 1);
    p.w2 = glorot(hyper.hidden1, hyper.hidden2);
    p.b2 = Matrix::Zero(hyper.hidden2, 1);
    p.w3 = glorot(hyper.hidden2, k);
    p.b3 = Matrix::Zero(k, 1);

    model::AdamW opt(hyper.lr, hyper.weight_decay);
    const auto n = latents.rows();
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    Rng order_rng(derive_seed(hyper.seed, 0x4418));

    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        order_rng.shuffle(idx);
        for (Eigen::Index start = 0; start < n; start += hyper.batch) {
            const auto bsz = std::min<Eigen::Index>(hyper.batch, n - start);
            Matrix bx(bsz, d), by(bsz, k);
            for (Eigen::Index r = 0; r < bsz; ++r) {
                bx.row(r) = latents.row(idx[static_cast<std::size_t>(start + r)]);
                by.row(r) = targets.row(idx[static_cast<std::size_t>(start + r)]);
            }
            Matrix z1 = (bx * p.w1).rowwise() + p.b1.col(0).transpose();
            Matrix a1 = z1.array().max(0.0).matrix();
            Matrix z2 = (a1 * p.w2).rowwise() + p.b2.col(0).transpose();
            Matrix a2 = z2.array().max(0.0).matrix();
            Matrix out = (a2 * p.w3).rowwise() + p.b3.col(0).transpose();
            Matrix dout = (2.0 / static_cast<double>(bsz)) * (out - by);

            Matrix gw3 = a2.transpose() * dout;
            Matrix gb3 = dout.colwise().sum().transpose();
            Matrix da2 = (dout * p.w3.transpose()).array() * (z2.array() > 0.0).cast<double>();
            Matrix gw2 = a1.transpose() * da2;
            Matrix gb2 = da2.colwise().sum().transpose();
            Matrix da1 = (da2 * p.w2.transpose()).array() * (z1.array() > 0.0).cast<double>();
            Matrix gw1 = bx.transpose() * da1;
            Matrix gb1 = da1.colwise().sum().transpose();

            opt.step("w1", p.w1, gw1);
            opt.step("b1", p.b1, gb1);
            opt.step("w2", p.w2, gw2);
            opt.step("b2", p.b2, gb2);
            opt.step("w3", p.w3, gw3);
            opt.step("b3", p.b3, gb3);
            opt.bump();
        }
    }
    return p;
}

Matrix MlpPredictor::predict(const EvalBatch& batch) const {
    return mlp_.predict(latents_at(*model_, batch.raw_windows, block_));
}

Matrix FinetunedPredictor::predict(const EvalBatch& batch) const {
    auto act = model::batch_forward(model_, batch.raw_windows);
    const auto& sn = act.latents.back();
    return (sn * model_.task_head->w).rowwise() + model_.task_head->b.col(0).transpose();
}

std::unique_ptr<TargetPredictor> fit_baseline_probe(BaselineKind kind,
                                                    const model::ModelParams& frozen,
                                                    const dynamics::DatasetSplit& data,
                                                    const std::string& block,
                                                    const std::string& target,
                                                    const BaselineHyper& hyper) {
    if (kind == BaselineKind::raw_input) {
        model::WindowSet ws = model::strided_windows(data, frozen.config.window, hyper.plan.stride);
        // pair raw windows with next-step targets via provenance
        const auto& t0 = data.trajectories.front().targets.at(target);
        Matrix targets(ws.inputs.rows(), t0.cols());
        for (Eigen::Index i = 0; i < ws.inputs.rows(); ++i) {
            const auto [ti, t] = ws.provenance[static_cast<std::size_t>(i)];
            targets.row(i) =
                data.trajectories[static_cast<std::size_t>(ti)].targets.at(target).row(t + 1);
        }
        std::vector<Eigen::Index> keep(static_cast<std::size_t>(ws.inputs.rows()));
        std::iota(keep.begin(), keep.end(), 0);
        if (hyper.pool_samples > 0 && keep.size() > hyper.pool_samples) {
            Rng rng(derive_seed(hyper.plan.subsample_seed, 0x7a11));
            rng.shuffle(keep);
            keep.resize(hyper.pool_samples);
        }
        Matrix hsub(static_cast<Eigen::Index>(keep.size()), ws.inputs.cols());
        Matrix ssub(static_cast<Eigen::Index>(keep.size()), targets.cols());
        for (std::size_t r = 0; r < keep.size(); ++r) {
            hsub.row(static_cast<Eigen::Index>(r)) = ws.inputs.row(keep[r]);
            ssub.row(static_cast<Eigen::Index>(r)) = targets.row(keep[r]);
        }
        LinearProbe probe = fit_linear_probe_data(hsub, ssub, hyper.alpha);
        probe.block_name = "raw";
        probe.target_name = target;
        return std::make_unique<RawInputPredictor>(std::move(probe));
    }

    model::ExtractionPlan full_plan = hyper.plan;
    full_plan.max_samples = 0; // per-step grouping uses the whole grid
    model::ActivationRecord rec =
        model::extract_activations(frozen, data, block, target, model::TargetMode::next_state,
                                   kind == BaselineKind::time_dependent ? full_plan : hyper.plan);

    if (kind == BaselineKind::time_dependent) {
        std::map<int, std::vector<Eigen::Index>> by_step;
        for (Eigen::Index i = 0; i < rec.latents.rows(); ++i)
            by_step[rec.provenance[static_cast<std::size_t>(i)].second].push_back(i);
        const double n_pool = static_cast<double>(
            hyper.pool_samples > 0
                ? std::min<std::size_t>(hyper.pool_samples,
                                        static_cast<std::size_t>(rec.latents.rows()))
                : static_cast<std::size_t>(rec.latents.rows()));
        std::map<int, LinearProbe> per_step;
        for (const auto& [t, rows] : by_step) {
            if (rows.size() < 2)
                throw UnderdeterminedError("time step " + std::to_string(t) +
                                           " has fewer than 2 samples");
            Matrix h(static_cast<Eigen::Index>(rows.size()), rec.latents.cols());
            Matrix s(static_cast<Eigen::Index>(rows.size()), rec.targets.cols());
            for (std::size_t r = 0; r < rows.size(); ++r) {
                h.row(static_cast<Eigen::Index>(r)) = rec.latents.row(rows[r]);
                s.row(static_cast<Eigen::Index>(r)) = rec.targets.row(rows[r]);
            }
            double alpha_t = hyper.alpha;
            if (hyper.scale_alpha_per_step)
                alpha_t = hyper.alpha * static_cast<double>(rows.size()) / n_pool;
            LinearProbe p = fit_linear_probe_data(h, s, alpha_t);
            p.block_name = block;
            p.target_name = target;
            per_step.emplace(t, std::move(p));
        }
        return std::make_unique<TimeDependentPredictor>(frozen, block, std::move(per_step));
    }

    // mlp
    MlpHyper mh = hyper.mlp;
    return std::make_unique<MlpPredictor>(frozen, block,
                                          train_mlp_probe(rec.latents, rec.targets, mh));
}

FinetuneResult finetune(const model::ModelParams& params,
                        const dynamics::DatasetSplit& task_data, FinetuneMode mode,
                        const FinetuneHyper& hyper) {
    if (task_data.role != dynamics::SplitRole::ft_task)
        throw InvalidSplitError("finetune requires a ft_task split");
    const auto t_start = std::chrono::steady_clock::now();

    FinetuneResult result;
    result.params = params;
    // fresh random task head
    const auto k = dynamics::target_dim(task_data.trajectories.front().spec.system_kind,
                                        hyper.target);
    Rng rng(derive_seed(hyper.seed, 0xf7));
    const double lim =
        std::sqrt(6.0 / static_cast<double>(params.config.width + k)) * hyper.head_init_scale;
    model::TaskHead head;
    head.w = Matrix(params.config.width, k);
    for (Eigen::Index c = 0; c < k; ++c)
        for (Eigen::Index r = 0; r < params.config.width; ++r) head.w(r, c) = rng.uniform(-lim, lim);
    head.b = Matrix::Zero(k, 1);
    result.params.task_head = std::move(head);

    model::WindowSet ws =
        model::strided_windows(task_data, params.config.window, hyper.stride);
    Matrix targets(ws.inputs.rows(), k);
    for (Eigen::Index i = 0; i < ws.inputs.rows(); ++i) {
        const auto [ti, t] = ws.provenance[static_cast<std::size_t>(i)];
        targets.row(i) = task_data.trajectories[static_cast<std::size_t>(ti)]
                             .targets.at(hyper.target)
                             .row(t + 1);
    }

    model::AdamW opt(hyper.lr, hyper.weight_decay);
    Rng order_rng(derive_seed(hyper.seed, 0xf8));
    const auto n = ws.inputs.rows();
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);

    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        order_rng.shuffle(idx);
        double loss_sum = 0.0;
        long n_batches = 0;
        for (Eigen::Index start = 0; start < n; start += hyper.batch) {
            const auto bsz = std::min<Eigen::Index>(hyper.batch, n - start);
            Matrix bx(bsz, ws.inputs.cols());
            Matrix by(bsz, k);
            for (Eigen::Index r = 0; r < bsz; ++r) {
                bx.row(r) = ws.inputs.row(idx[static_cast<std::size_t>(start + r)]);
                by.row(r) = targets.row(idx[static_cast<std::size_t>(start + r)]);
            }
            model::Gradients grads;
            const double loss = model::task_loss_and_gradients(result.params, bx, by, &grads);
            if (!std::isfinite(loss))
                throw DivergenceError("non-finite task loss at epoch " + std::to_string(epoch));
            loss_sum += loss;
            ++n_batches;
            for (auto& [name, mat] : result.params.named_matrices()) {
                if (mode == FinetuneMode::last_layer && name.rfind("task_head.", 0) != 0)
                    continue;
                const auto gi = grads.by_name.find(name);
                if (gi != grads.by_name.end()) opt.step(name, *mat, gi->second);
            }
            opt.bump();
        }
        result.log.epoch_losses.push_back(loss_sum / static_cast<double>(std::max(1L, n_batches)));
    }
    result.log.hyper.lr = hyper.lr;
    result.log.hyper.batch = hyper.batch;
    result.log.hyper.epochs = hyper.epochs;
    result.log.hyper.seed = hyper.seed;
    result.log.hyper.weight_decay = hyper.weight_decay;
    result.log.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return result;
}

ProbeReport evaluate_predictor(const TargetPredictor& predictor,
                               const std::vector<dynamics::DatasetSplit>& ood_suite,
                               const std::string& target, const EvalOptions& opts) {
    if (ood_suite.empty()) throw InvalidSpecError("empty OOD suite");
    ProbeReport report;
    report.method = predictor.method();
    report.target_name = target;

    for (const auto& set : ood_suite) {
        model::WindowSet ws = model::strided_windows(set, opts.window, opts.stride);
        EvalBatch batch;
        batch.raw_windows = std::move(ws.inputs);
        batch.steps.reserve(ws.provenance.size());
        for (const auto& [ti, t] : ws.provenance) batch.steps.push_back(t);

        const auto& t0 = set.trajectories.front().targets.at(target);
        Matrix truth(batch.raw_windows.rows(), t0.cols());
        for (Eigen::Index i = 0; i < truth.rows(); ++i) {
            const auto [ti, t] = ws.provenance[static_cast<std::size_t>(i)];
            truth.row(i) =
                set.trajectories[static_cast<std::size_t>(ti)].targets.at(target).row(t + 1);
        }

        const Matrix pred = predictor.predict(batch);
        if (pred.rows() != truth.rows() || pred.cols() != truth.cols())
            throw ShapeError("predictor output shape mismatch");

        SetMetrics m;
        const Vector pm = magnitudes(pred);
        const Vector tm = magnitudes(truth);
        double mape_sum = 0.0;
        long mape_n = 0;
        for (Eigen::Index i = 0; i < tm.size(); ++i) {
            if (std::abs(tm[i]) > opts.magnitude_floor) {
                mape_sum += std::abs(pm[i] - tm[i]) / std::abs(tm[i]);
                ++mape_n;
            }
        }
        if (mape_n == 0) {
            m.undefined_mape = true;
            m.mape = 0.0;
        } else {
            m.mape = 100.0 * mape_sum / static_cast<double>(mape_n);
        }
        bool zero_var = false;
        m.rho = pearson(pm, tm, &zero_var);
        m.zero_variance = zero_var;
        for (Eigen::Index c = 0; c < truth.cols(); ++c)
            m.component_rho.push_back(pearson(pred.col(c), truth.col(c)));
        report.per_set.push_back(std::move(m));
    }

    const auto n = static_cast<double>(report.per_set.size());
    for (const auto& s : report.per_set) {
        report.mape_mean += s.mape;
        report.rho_mean += s.rho;
    }
    report.mape_mean /= n;
    report.rho_mean /= n;
    for (const auto& s : report.per_set) {
        report.mape_std += (s.mape - report.mape_mean) * (s.mape - report.mape_mean);
        report.rho_std += (s.rho - report.rho_mean) * (s.rho - report.rho_mean);
    }
    report.mape_std = std::sqrt(report.mape_std / n);
    report.rho_std = std::sqrt(report.rho_std / n);
    return report;
}

} // namespace physprobe::probes
