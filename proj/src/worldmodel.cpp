#include "physprobe/worldmodel.hpp"

#include "physprobe/io.hpp"
#include "physprobe/rng.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace physprobe::model {

namespace {

constexpr char kCkptMagic[8] = {'P', 'H', 'Y', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kCkptVersion = 1;
constexpr double kLnEps = 1e-5;

Matrix glorot(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
    const double lim = std::sqrt(6.0 / static_cast<double>(rows + cols));
    Matrix m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c)
        for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.uniform(-lim, lim);
    return m;
}

// row-wise layer norm: y = gamma .* (x - mu) / sqrt(var + eps) + beta
struct LnCache {
    Matrix xhat; // N x d
    Vector inv;  // N
};

Matrix ln_forward(const Matrix& x, const Matrix& gamma, const Matrix& beta, LnCache* cache) {
    const Vector mu = x.rowwise().mean();
    Matrix xc = x.colwise() - mu;
    const Vector var = xc.array().square().rowwise().mean();
    const Vector inv = (var.array() + kLnEps).rsqrt();
    Matrix xhat = xc.array().colwise() * inv.array();
    Matrix y = (xhat.array().rowwise() * gamma.col(0).transpose().array()).rowwise() +
               beta.col(0).transpose().array();
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv = inv;
        return y;
    }
    return y;
}

// backward through ln_forward; accumulates parameter grads, returns dx
Matrix ln_backward(const Matrix& dy, const LnCache& cache, const Matrix& gamma,
                   Matrix& dgamma, Matrix& dbeta) {
    dgamma = (dy.array() * cache.xhat.array()).colwise().sum().transpose();
    dbeta = dy.colwise().sum().transpose();
    Matrix dxhat = dy.array().rowwise() * gamma.col(0).transpose().array();
    const Vector m1 = dxhat.rowwise().mean();
    const Vector m2 = (dxhat.array() * cache.xhat.array()).rowwise().mean();
    Matrix dx = ((dxhat.colwise() - m1).array() - cache.xhat.array().colwise() * m2.array())
                    .colwise() *
                cache.inv.array();
    return dx;
}

// per-sample layer norm on a vector
Vector ln_forward_vec(const Vector& x, const Matrix& gamma, const Matrix& beta) {
    const double mu = x.mean();
    Vector xc = x.array() - mu;
    const double var = xc.squaredNorm() / static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    return (xc.array() * inv * gamma.col(0).array()) + beta.col(0).array();
}

struct BatchCache {
    Matrix inputs;                 // N x input_dim
    LnCache emb;
    std::vector<Matrix> block_in;  // inputs to each block (N x width)
    std::vector<Matrix> act;       // tanh activations per block
    std::vector<LnCache> block_ln;
    Matrix final_latent;           // N x width
    Matrix predictions;            // N x obs_dim
};

void batch_forward_impl(const ModelParams& p, const Matrix& inputs, BatchCache* cache,
                        std::vector<Matrix>* latents, Matrix* predictions) {
    const int obs = p.config.obs_dim;
    Matrix e = (inputs * p.enc_w).rowwise() + p.enc_b.col(0).transpose();
    LnCache emb_cache;
    Matrix s = ln_forward(e, p.emb_gamma, p.emb_beta, cache ? &emb_cache : nullptr);
    if (cache) {
        cache->inputs = inputs;
        cache->emb = std::move(emb_cache);
    }
    if (latents) latents->push_back(s);
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        const Block& b = p.blocks[i];
        if (cache) cache->block_in.push_back(s);
        Matrix z = (s * b.w1).rowwise() + b.b1.col(0).transpose();
        Matrix a = z.array().tanh();
        Matrix pre = s + ((a * b.w2).rowwise() + b.b2.col(0).transpose());
        LnCache lnc;
        s = ln_forward(pre, b.ln_gamma, b.ln_beta, cache ? &lnc : nullptr);
        if (cache) {
            cache->act.push_back(std::move(a));
            cache->block_ln.push_back(std::move(lnc));
        }
        if (latents) latents->push_back(s);
    }
    Matrix pred = inputs.rightCols(obs) +
                  ((s * p.head_w).rowwise() + p.head_b.col(0).transpose());
    if (cache) {
        cache->final_latent = s;
        cache->predictions = pred;
    }
    if (predictions) *predictions = std::move(pred);
}

} // namespace

void ModelConfig::validate() const {
    if (window < 2) throw InvalidSpecError("window must be >= 2");
    if (width < 8) throw InvalidSpecError("width must be >= 8");
    if (n_blocks < 2) throw InvalidSpecError("n_blocks must be >= 2");
    if (obs_dim < 1) throw InvalidSpecError("obs_dim must be >= 1");
}

std::vector<std::pair<std::string, Matrix*>> ModelParams::named_matrices() {
    std::vector<std::pair<std::string, Matrix*>> out;
    out.emplace_back("encoder.w", &enc_w);
    out.emplace_back("encoder.b", &enc_b);
    out.emplace_back("encoder.ln_gamma", &emb_gamma);
    out.emplace_back("encoder.ln_beta", &emb_beta);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string prefix = "block" + std::to_string(i) + ".";
        out.emplace_back(prefix + "w1", &blocks[i].w1);
        out.emplace_back(prefix + "b1", &blocks[i].b1);
        out.emplace_back(prefix + "w2", &blocks[i].w2);
        out.emplace_back(prefix + "b2", &blocks[i].b2);
        out.emplace_back(prefix + "ln_gamma", &blocks[i].ln_gamma);
        out.emplace_back(prefix + "ln_beta", &blocks[i].ln_beta);
    }
    out.emplace_back("head.w", &head_w);
    out.emplace_back("head.b", &head_b);
    if (task_head) {
        out.emplace_back("task_head.w", &task_head->w);
        out.emplace_back("task_head.b", &task_head->b);
    }
    return out;
}

std::vector<std::pair<std::string, const Matrix*>> ModelParams::named_matrices() const {
    auto mut = const_cast<ModelParams*>(this)->named_matrices();
    std::vector<std::pair<std::string, const Matrix*>> out;
    out.reserve(mut.size());
    for (auto& [n, m] : mut) out.emplace_back(n, m);
    return out;
}

std::vector<std::pair<std::string, std::vector<std::string>>> ModelParams::layer_groups() const {
    std::vector<std::pair<std::string, std::vector<std::string>>> groups;
    groups.push_back({"encoder", {"encoder.w", "encoder.b", "encoder.ln_gamma", "encoder.ln_beta"}});
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string name = "block" + std::to_string(i);
        groups.push_back({name, {name + ".w1", name + ".b1", name + ".w2", name + ".b2",
                                 name + ".ln_gamma", name + ".ln_beta"}});
    }
    groups.push_back({"head", {"head.w", "head.b"}});
    if (task_head) groups.push_back({"task_head", {"task_head.w", "task_head.b"}});
    return groups;
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : named_matrices()) n += static_cast<std::size_t>(m->size());
    return n;
}

std::uint64_t ModelParams::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, m] : named_matrices()) {
        h = fnv1a(name, h);
        h = fnv1a(*m, h);
    }
    return h;
}

std::uint64_t ModelParams::backbone_checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, m] : named_matrices()) {
        if (name.rfind("task_head.", 0) == 0) continue;
        h = fnv1a(name, h);
        h = fnv1a(*m, h);
    }
    return h;
}

std::vector<std::string> ModelParams::latent_names() const {
    std::vector<std::string> names;
    for (int i = 0; i < config.n_blocks; ++i) names.push_back("block" + std::to_string(i));
    names.push_back("head");
    return names;
}

int ModelParams::latent_index(const std::string& block_name) const {
    if (block_name == "head") return config.n_blocks;
    if (block_name.rfind("block", 0) == 0) {
        const int i = std::atoi(block_name.c_str() + 5);
        if (i >= 0 && i < config.n_blocks &&
            block_name == "block" + std::to_string(i))
            return i;
    }
    throw UnknownBlockError("unknown block: " + block_name);
}

ModelParams init_model(const ModelConfig& config) {
    config.validate();
    Rng rng(derive_seed(config.seed, 0xabcd));
    ModelParams p;
    p.config = config;
    const int d = config.width;
    p.enc_w = glorot(rng, config.input_dim(), d);
    p.enc_b = Matrix::Zero(d, 1);
    p.emb_gamma = Matrix::Ones(d, 1);
    p.emb_beta = Matrix::Zero(d, 1);
    p.blocks.resize(static_cast<std::size_t>(config.n_blocks));
    for (auto& b : p.blocks) {
        b.w1 = glorot(rng, d, d);
        b.b1 = Matrix::Zero(d, 1);
        b.w2 = glorot(rng, d, d);
        b.b2 = Matrix::Zero(d, 1);
        b.ln_gamma = Matrix::Ones(d, 1);
        b.ln_beta = Matrix::Zero(d, 1);
    }
    p.head_w = Matrix::Zero(d, config.obs_dim); // origin-preserving decoder
    p.head_b = Matrix::Zero(config.obs_dim, 1);
    return p;
}

ForwardResult forward(const ModelParams& p, const Matrix& window) {
    if (window.rows() != p.config.window || window.cols() != p.config.obs_dim)
        throw ShapeError("window must be (config.window x obs_dim)");
    Vector z(p.config.input_dim());
    for (Eigen::Index t = 0; t < window.rows(); ++t)
        for (Eigen::Index c = 0; c < window.cols(); ++c)
            z[t * window.cols() + c] = window(t, c);

    ForwardResult out;
    Vector e = p.enc_w.transpose() * z + p.enc_b.col(0);
    Vector s = ln_forward_vec(e, p.emb_gamma, p.emb_beta);
    out.latents.push_back(s);
    for (const Block& b : p.blocks) {
        Vector a = (b.w1.transpose() * s + b.b1.col(0)).array().tanh();
        Vector pre = s + b.w2.transpose() * a + b.b2.col(0);
        s = ln_forward_vec(pre, b.ln_gamma, b.ln_beta);
        out.latents.push_back(s);
    }
    out.prediction = window.row(window.rows() - 1).transpose() +
                     p.head_w.transpose() * s + p.head_b.col(0);
    return out;
}

std::vector<ForwardResult> forward_batch(const ModelParams& p,
                                         const std::vector<Matrix>& windows) {
    std::vector<ForwardResult> out;
    out.reserve(windows.size());
    for (const auto& w : windows) out.push_back(forward(p, w));
    return out;
}

WindowSet strided_windows(const dynamics::DatasetSplit& split, int window, int stride) {
    if (stride < 1) throw InvalidSpecError("stride must be >= 1");
    std::vector<std::pair<int, int>> prov;
    for (std::size_t ti = 0; ti < split.trajectories.size(); ++ti) {
        const auto steps = static_cast<int>(split.trajectories[ti].steps());
        for (int t = window - 1; t + 1 < steps; t += stride)
            prov.emplace_back(static_cast<int>(ti), t);
    }
    WindowSet ws;
    if (split.trajectories.empty()) return ws;
    const auto obs_dim = split.trajectories.front().obs_dim();
    ws.inputs.resize(static_cast<Eigen::Index>(prov.size()), window * obs_dim);
    ws.next_obs.resize(static_cast<Eigen::Index>(prov.size()), obs_dim);
    for (std::size_t i = 0; i < prov.size(); ++i) {
        const auto& traj = split.trajectories[static_cast<std::size_t>(prov[i].first)];
        const int t = prov[i].second;
        for (int u = 0; u < window; ++u)
            for (Eigen::Index c = 0; c < obs_dim; ++c)
                ws.inputs(static_cast<Eigen::Index>(i), u * obs_dim + c) =
                    traj.observations(t - window + 1 + u, c);
        ws.next_obs.row(static_cast<Eigen::Index>(i)) = traj.observations.row(t + 1);
    }
    ws.provenance = std::move(prov);
    return ws;
}

WindowSet sampled_windows(const dynamics::DatasetSplit& split, int window, int per_traj,
                          std::uint64_t seed) {
    std::vector<std::pair<int, int>> prov;
    for (std::size_t ti = 0; ti < split.trajectories.size(); ++ti) {
        const auto steps = static_cast<int>(split.trajectories[ti].steps());
        std::vector<int> ts;
        for (int t = window - 1; t + 1 < steps; ++t) ts.push_back(t);
        Rng rng(derive_seed(seed, ti, 0x77));
        rng.shuffle(ts);
        const int take = std::min<int>(per_traj, static_cast<int>(ts.size()));
        std::vector<int> chosen(ts.begin(), ts.begin() + take);
        std::sort(chosen.begin(), chosen.end());
        for (int t : chosen) prov.emplace_back(static_cast<int>(ti), t);
    }
    WindowSet ws;
    if (prov.empty()) return ws;
    const auto obs_dim = split.trajectories.front().obs_dim();
    ws.inputs.resize(static_cast<Eigen::Index>(prov.size()), window * obs_dim);
    ws.next_obs.resize(static_cast<Eigen::Index>(prov.size()), obs_dim);
    for (std::size_t i = 0; i < prov.size(); ++i) {
        const auto& traj = split.trajectories[static_cast<std::size_t>(prov[i].first)];
        const int t = prov[i].second;
        for (int u = 0; u < window; ++u)
            for (Eigen::Index c = 0; c < obs_dim; ++c)
                ws.inputs(static_cast<Eigen::Index>(i), u * obs_dim + c) =
                    traj.observations(t - window + 1 + u, c);
        ws.next_obs.row(static_cast<Eigen::Index>(i)) = traj.observations.row(t + 1);
    }
    ws.provenance = std::move(prov);
    return ws;
}

BatchActivations batch_forward(const ModelParams& p, const Matrix& inputs) {
    if (inputs.cols() != p.config.input_dim())
        throw ShapeError("batch inputs must have window*obs_dim columns");
    BatchActivations out;
    batch_forward_impl(p, inputs, nullptr, &out.latents, &out.predictions);
    return out;
}

double ssl_loss_and_gradients(const ModelParams& p, const Matrix& inputs,
                              const Matrix& next_obs, Gradients* grads) {
    BatchCache cache;
    batch_forward_impl(p, inputs, &cache, nullptr, nullptr);
    const auto n = inputs.rows();
    Matrix diff = cache.predictions - next_obs;
    const double loss = diff.array().square().rowwise().sum().mean();
    if (!grads) return loss;

    Matrix dpred = (2.0 / static_cast<double>(n)) * diff;
    auto& g = grads->by_name;
    g["head.w"] = cache.final_latent.transpose() * dpred;
    g["head.b"] = dpred.colwise().sum().transpose();
    Matrix ds = dpred * p.head_w.transpose();
    for (int i = p.config.n_blocks - 1; i >= 0; --i) {
        const Block& b = p.blocks[static_cast<std::size_t>(i)];
        const std::string prefix = "block" + std::to_string(i) + ".";
        Matrix dgamma, dbeta;
        Matrix dpre = ln_backward(ds, cache.block_ln[static_cast<std::size_t>(i)], b.ln_gamma,
                                  dgamma, dbeta);
        g[prefix + "ln_gamma"] = std::move(dgamma);
        g[prefix + "ln_beta"] = std::move(dbeta);
        const Matrix& a = cache.act[static_cast<std::size_t>(i)];
        g[prefix + "w2"] = a.transpose() * dpre;
        g[prefix + "b2"] = dpre.colwise().sum().transpose();
        Matrix da = dpre * b.w2.transpose();
        Matrix dz = da.array() * (1.0 - a.array().square());
        g[prefix + "w1"] = cache.block_in[static_cast<std::size_t>(i)].transpose() * dz;
        g[prefix + "b1"] = dz.colwise().sum().transpose();
        ds = dpre + dz * b.w1.transpose();
    }
    Matrix dgamma, dbeta;
    Matrix de = ln_backward(ds, cache.emb, p.emb_gamma, dgamma, dbeta);
    g["encoder.ln_gamma"] = std::move(dgamma);
    g["encoder.ln_beta"] = std::move(dbeta);
    g["encoder.w"] = cache.inputs.transpose() * de;
    g["encoder.b"] = de.colwise().sum().transpose();
    return loss;
}

double task_loss_and_gradients(const ModelParams& p, const Matrix& inputs,
                               const Matrix& targets, Gradients* grads) {
    if (!p.task_head) throw InvalidSpecError("task_loss requires an attached task head");
    BatchCache cache;
    batch_forward_impl(p, inputs, &cache, nullptr, nullptr);
    const auto n = inputs.rows();
    Matrix out = (cache.final_latent * p.task_head->w).rowwise() +
                 p.task_head->b.col(0).transpose();
    Matrix diff = out - targets;
    const double loss = diff.array().square().rowwise().sum().mean();
    if (!grads) return loss;

    Matrix dout = (2.0 / static_cast<double>(n)) * diff;
    auto& g = grads->by_name;
    g["task_head.w"] = cache.final_latent.transpose() * dout;
    g["task_head.b"] = dout.colwise().sum().transpose();
    Matrix ds = dout * p.task_head->w.transpose();
    for (int i = p.config.n_blocks - 1; i >= 0; --i) {
        const Block& b = p.blocks[static_cast<std::size_t>(i)];
        const std::string prefix = "block" + std::to_string(i) + ".";
        Matrix dgamma, dbeta;
        Matrix dpre = ln_backward(ds, cache.block_ln[static_cast<std::size_t>(i)], b.ln_gamma,
                                  dgamma, dbeta);
        g[prefix + "ln_gamma"] = std::move(dgamma);
        g[prefix + "ln_beta"] = std::move(dbeta);
        const Matrix& a = cache.act[static_cast<std::size_t>(i)];
        g[prefix + "w2"] = a.transpose() * dpre;
        g[prefix + "b2"] = dpre.colwise().sum().transpose();
        Matrix da = dpre * b.w2.transpose();
        Matrix dz = (da.array() * (1.0 - a.array().square())).matrix();
        g[prefix + "w1"] = cache.block_in[static_cast<std::size_t>(i)].transpose() * dz;
        g[prefix + "b1"] = dz.colwise().sum().transpose();
        ds = dpre + dz * b.w1.transpose();
    }
    Matrix dgamma, dbeta;
    Matrix de = ln_backward(ds, cache.emb, p.emb_gamma, dgamma, dbeta);
    g["encoder.ln_gamma"] = std::move(dgamma);
    g["encoder.ln_beta"] = std::move(dbeta);
    g["encoder.w"] = cache.inputs.transpose() * de;
    g["encoder.b"] = de.colwise().sum().transpose();
    return loss;
}

void AdamW::step(const std::string& key, Matrix& param, const Matrix& grad, double lr_scale) {
    auto mi = m_.find(key);
    if (mi == m_.end()) {
        m_[key] = Matrix::Zero(param.rows(), param.cols());
        v_[key] = Matrix::Zero(param.rows(), param.cols());
        mi = m_.find(key);
    }
    Matrix& m = mi->second;
    Matrix& v = v_[key];
    m = b1_ * m + (1.0 - b1_) * grad;
    v = b2_ * v + (1.0 - b2_) * grad.array().square().matrix();
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    const double lr = lr_ * lr_scale;
    param.array() -= lr * ((m.array() / bc1) / ((v.array() / bc2).sqrt() + eps_) +
                           wd_ * param.array());
}

TrainResult train_ssl(const ModelParams& params, const dynamics::DatasetSplit& data,
                      const SslHyper& hyper) {
    const auto t_start = std::chrono::steady_clock::now();
    TrainResult result;
    result.params = params;
    result.log.hyper = hyper;

    auto want_checkpoint = [&](int epoch) {
        return std::find(hyper.checkpoint_epochs.begin(), hyper.checkpoint_epochs.end(), epoch) !=
               hyper.checkpoint_epochs.end();
    };
    if (want_checkpoint(0)) result.checkpoints.emplace_back(0, result.params);
    if (hyper.epochs == 0) return result;

    WindowSet ws = sampled_windows(data, params.config.window, hyper.windows_per_traj,
                                   derive_seed(hyper.seed, 0x5151));
    if (ws.inputs.rows() == 0) throw InvalidSpecError("no training windows");

    AdamW opt(hyper.lr, hyper.weight_decay);
    Rng order_rng(derive_seed(hyper.seed, 0xbeef));
    const auto n = ws.inputs.rows();
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    const long total_steps =
        static_cast<long>(hyper.epochs) *
        static_cast<long>((n + hyper.batch - 1) / hyper.batch);
    long step_no = 0;

    for (int epoch = 1; epoch <= hyper.epochs; ++epoch) {
        order_rng.shuffle(idx);
        double loss_sum = 0.0;
        long n_batches = 0;
        for (Eigen::Index start = 0; start < n; start += hyper.batch) {
            const auto bsz = std::min<Eigen::Index>(hyper.batch, n - start);
            Matrix bx(bsz, ws.inputs.cols());
            Matrix by(bsz, ws.next_obs.cols());
            for (Eigen::Index r = 0; r < bsz; ++r) {
                bx.row(r) = ws.inputs.row(idx[static_cast<std::size_t>(start + r)]);
                by.row(r) = ws.next_obs.row(idx[static_cast<std::size_t>(start + r)]);
            }
            Gradients grads;
            const double loss = ssl_loss_and_gradients(result.params, bx, by, &grads);
            if (!std::isfinite(loss))
                throw DivergenceError("non-finite SSL loss at epoch " + std::to_string(epoch));
            loss_sum += loss;
            ++n_batches;
            ++step_no;
            const double lr_scale =
                hyper.cosine_decay
                    ? 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step_no) /
                                            static_cast<double>(total_steps)))
                    : 1.0;
            for (auto& [name, mat] : result.params.named_matrices()) {
                const auto gi = grads.by_name.find(name);
                if (gi != grads.by_name.end()) opt.step(name, *mat, gi->second, lr_scale);
            }
            opt.bump();
        }
        result.log.epoch_losses.push_back(loss_sum / static_cast<double>(n_batches));
        if (want_checkpoint(epoch)) result.checkpoints.emplace_back(epoch, result.params);
    }
    result.log.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return result;
}

double evaluate_ssl(const ModelParams& params, const dynamics::DatasetSplit& data) {
    if (data.empty()) throw InvalidSpecError("evaluate_ssl on empty split");
    WindowSet ws = strided_windows(data, params.config.window, 1);
    if (ws.inputs.rows() == 0) throw InvalidSpecError("no valid windows");
    BatchActivations act = batch_forward(params, ws.inputs);
    return (act.predictions - ws.next_obs).array().square().rowwise().sum().mean();
}

ActivationRecord extract_activations(const ModelParams& params,
                                     const dynamics::DatasetSplit& data,
                                     const std::string& block_name, const std::string& target,
                                     TargetMode mode, const ExtractionPlan& plan) {
    const int li = params.latent_index(block_name);
    WindowSet ws = strided_windows(data, params.config.window, plan.stride);
    const auto n_all = ws.inputs.rows();
    if (n_all == 0) throw InvalidSpecError("no extraction windows");

    std::vector<Eigen::Index> keep(static_cast<std::size_t>(n_all));
    std::iota(keep.begin(), keep.end(), 0);
    if (plan.max_samples > 0 && static_cast<std::size_t>(n_all) > plan.max_samples) {
        Rng rng(derive_seed(plan.subsample_seed, 0x5e1ec7));
        rng.shuffle(keep);
        keep.resize(plan.max_samples);
        std::sort(keep.begin(), keep.end());
    }

    // targets first so an unsupported name fails before the forward pass
    const auto& t0 = data.trajectories.front();
    const auto ti = t0.targets.find(target);
    if (ti == t0.targets.end())
        throw UnsupportedTargetError("target not computed on split: " + target);
    const auto k = ti->second.cols();

    Matrix kept_inputs(static_cast<Eigen::Index>(keep.size()), ws.inputs.cols());
    Matrix targets(static_cast<Eigen::Index>(keep.size()), k);
    std::vector<std::pair<int, int>> prov;
    prov.reserve(keep.size());
    for (std::size_t r = 0; r < keep.size(); ++r) {
        const auto src = keep[r];
        kept_inputs.row(static_cast<Eigen::Index>(r)) = ws.inputs.row(src);
        const auto [traj_i, t] = ws.provenance[static_cast<std::size_t>(src)];
        const auto& series = data.trajectories[static_cast<std::size_t>(traj_i)].targets.at(target);
        if (mode == TargetMode::next_state)
            targets.row(static_cast<Eigen::Index>(r)) = series.row(t + 1);
        else
            targets.row(static_cast<Eigen::Index>(r)) = series.row(t + 1) - series.row(t);
        prov.emplace_back(traj_i, t);
    }

    BatchActivations act = batch_forward(params, kept_inputs);
    ActivationRecord rec;
    rec.block_name = block_name;
    rec.target_name = target;
    rec.mode = mode;
    rec.latents = std::move(act.latents[static_cast<std::size_t>(li)]);
    rec.targets = std::move(targets);
    rec.provenance = std::move(prov);
    return rec;
}

Matrix decoder_jacobian(const ModelParams& params, double fd_step) {
    const int d = params.config.width;
    const int obs = params.config.obs_dim;
    auto head = [&](const Vector& h) -> Vector {
        return params.head_w.transpose() * h + params.head_b.col(0);
    };
    Matrix jac(obs, d);
    Vector h = Vector::Zero(d);
    for (int j = 0; j < d; ++j) {
        h[j] = fd_step;
        const Vector up = head(h);
        h[j] = -fd_step;
        const Vector dn = head(h);
        h[j] = 0.0;
        jac.col(j) = (up - dn) / (2.0 * fd_step);
    }
    return jac;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
    io::AtomicFileWriter w(path);
    auto& os = w.stream();
    os.write(kCkptMagic, 8);
    io::write_pod<std::uint32_t>(os, kCkptVersion);
    io::write_pod<std::int32_t>(os, params.config.window);
    io::write_pod<std::int32_t>(os, params.config.width);
    io::write_pod<std::int32_t>(os, params.config.n_blocks);
    io::write_pod<std::int32_t>(os, params.config.obs_dim);
    io::write_pod<std::uint64_t>(os, params.config.seed);
    const auto named = params.named_matrices();
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(named.size()));
    for (const auto& [name, m] : named) {
        io::write_string(os, name);
        io::write_matrix(os, *m);
    }
    w.commit();
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw IoError("bad checkpoint magic in " + path.string());
    if (io::read_pod<std::uint32_t>(is) != kCkptVersion)
        throw IoError("unsupported checkpoint version");
    ModelConfig cfg;
    cfg.window = io::read_pod<std::int32_t>(is);
    cfg.width = io::read_pod<std::int32_t>(is);
    cfg.n_blocks = io::read_pod<std::int32_t>(is);
    cfg.obs_dim = io::read_pod<std::int32_t>(is);
    cfg.seed = io::read_pod<std::uint64_t>(is);
    ModelParams p = init_model(cfg);
    const auto n = io::read_pod<std::uint32_t>(is);
    bool saw_task_head = false;
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::string name = io::read_string(is);
        Matrix m = io::read_matrix(is);
        if (name.rfind("task_head.", 0) == 0 && !saw_task_head) {
            p.task_head = TaskHead{};
            saw_task_head = true;
        }
        bool found = false;
        for (auto& [pn, pm] : p.named_matrices()) {
            if (pn == name) {
                *pm = std::move(m);
                found = true;
                break;
            }
        }
        if (!found) throw IoError("unknown tensor in checkpoint: " + name);
    }
    return p;
}

} // namespace physprobe::model
