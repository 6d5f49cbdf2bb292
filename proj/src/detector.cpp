#include "stssad/detector.hpp"

#include <cmath>

#include "stssad/io.hpp"

namespace stssad::detector {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

[[noreturn]] void fail(const std::string& msg) { throw Error(msg); }

void check_config(const EncoderConfig& c) {
    if (c.in_dim <= 0) fail("encoder: in_dim must be positive");
    if (c.embed_dim <= 0) fail("encoder: embed_dim must be positive");
    for (int64_t hdim : c.hidden)
        if (hdim <= 0) fail("encoder: hidden widths must be positive");
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
    Tensor y = matmul(x, w);
    return add(y, broadcast(b, y.shape()));
}

// Lower-triangular Cholesky factor of a row-major symmetric matrix.
bool cholesky(int64_t h, const std::vector<double>& m, std::vector<double>& lower) {
    lower.assign(size_t(h * h), 0.0);
    for (int64_t i = 0; i < h; ++i) {
        for (int64_t j = 0; j <= i; ++j) {
            double s = m[size_t(i * h + j)];
            for (int64_t k = 0; k < j; ++k) s -= lower[size_t(i * h + k)] * lower[size_t(j * h + k)];
            if (i == j) {
                if (s <= 0.0) return false;
                lower[size_t(i * h + i)] = std::sqrt(s);
            } else {
                lower[size_t(i * h + j)] = s / lower[size_t(j * h + j)];
            }
        }
    }
    return true;
}

// Solves (L L^T) x = e_col to build one column of the inverse.
void inverse_column(int64_t h, const std::vector<double>& lower, int64_t col,
                    std::vector<double>& x) {
    x.assign(size_t(h), 0.0);
    x[size_t(col)] = 1.0;
    for (int64_t i = 0; i < h; ++i) {  // forward: L y = e
        double s = x[size_t(i)];
        for (int64_t k = 0; k < i; ++k) s -= lower[size_t(i * h + k)] * x[size_t(k)];
        x[size_t(i)] = s / lower[size_t(i * h + i)];
    }
    for (int64_t i = h - 1; i >= 0; --i) {  // backward: L^T x = y
        double s = x[size_t(i)];
        for (int64_t k = i + 1; k < h; ++k) s -= lower[size_t(k * h + i)] * x[size_t(k)];
        x[size_t(i)] = s / lower[size_t(i * h + i)];
    }
}

}  // namespace

std::vector<int64_t> EncoderConfig::dims() const {
    std::vector<int64_t> d;
    d.push_back(in_dim);
    for (int64_t hdim : hidden) d.push_back(hdim);
    d.push_back(embed_dim);
    return d;
}

std::vector<Tensor> EncoderParams::all() const {
    std::vector<Tensor> ts;
    for (size_t l = 0; l < weights.size(); ++l) {
        ts.push_back(weights[l]);
        ts.push_back(biases[l]);
    }
    ts.push_back(head_w);
    ts.push_back(head_b);
    return ts;
}

EncoderParams EncoderParams::with_tensors(const std::vector<Tensor>& ts) const {
    if (ts.size() != 2 * weights.size() + 2)
        fail("encoder: expected " + std::to_string(2 * weights.size() + 2) + " tensors, got " +
             std::to_string(ts.size()));
    EncoderParams out;
    out.config = config;
    for (size_t l = 0; l < weights.size(); ++l) {
        out.weights.push_back(ts[2 * l]);
        out.biases.push_back(ts[2 * l + 1]);
    }
    out.head_w = ts[ts.size() - 2];
    out.head_b = ts[ts.size() - 1];
    return out;
}

EncoderParams init_encoder(const EncoderConfig& config, RandomStream& rng) {
    check_config(config);
    EncoderParams p;
    p.config = config;
    const std::vector<int64_t> d = config.dims();
    for (size_t l = 0; l + 1 < d.size(); ++l) {
        const int64_t fan_in = d[l], fan_out = d[l + 1];
        const double bound = std::sqrt(6.0 / double(fan_in + fan_out));
        std::vector<double> w(static_cast<size_t>(fan_in * fan_out));
        for (auto& v : w) v = rng.uniform(-bound, bound);
        p.weights.push_back(Tensor::from({fan_in, fan_out}, std::move(w), true));
        p.biases.push_back(Tensor::from({fan_out}, std::vector<double>(size_t(fan_out), 0.0), true));
    }
    const double hb = std::sqrt(6.0 / double(config.embed_dim + 1));
    std::vector<double> hw(static_cast<size_t>(config.embed_dim));
    for (auto& v : hw) v = rng.uniform(-hb, hb);
    p.head_w = Tensor::from({config.embed_dim, 1}, std::move(hw), true);
    p.head_b = Tensor::from({1}, {0.0}, true);
    return p;
}

Tensor encode(const EncoderParams& params, const Tensor& x) {
    if (x.rank() != 2 || x.shape()[1] != params.config.in_dim)
        fail("encode: batch shape " + shape_str(x.shape()) + " does not match input width " +
             std::to_string(params.config.in_dim));
    Tensor h = x;
    for (size_t l = 0; l < params.weights.size(); ++l) {
        h = affine(h, params.weights[l], params.biases[l]);
        if (l + 1 < params.weights.size()) h = relu(h);
    }
    return h;
}

Tensor head_logits(const EncoderParams& params, const Tensor& z) {
    return affine(z, params.head_w, params.head_b);
}

Tensor bce_train_loss(const EncoderParams& params, const Tensor& inliers,
                      const Tensor& augmented) {
    if (inliers.shape()[0] < 1 || augmented.shape()[0] < 1)
        fail("bce_train_loss: both batches must be non-empty");
    // -log(1-sigmoid(l)) = softplus(l) on inliers, -log(sigmoid(l)) = softplus(-l)
    // on augmented samples; joint mean over every sample.
    Tensor li = head_logits(params, encode(params, inliers));
    Tensor la = head_logits(params, encode(params, augmented));
    Tensor total = add(sum(softplus(li)), sum(softplus(neg(la))));
    return scale(total, 1.0 / double(inliers.shape()[0] + augmented.shape()[0]));
}

std::vector<Tensor> sgd_step(const Tensor& loss, const std::vector<Tensor>& params, double alpha,
                             bool create_graph) {
    if (alpha < 0.0) fail("sgd_step: step size must be nonnegative");
    std::vector<Tensor> g = grad(loss, params, create_graph);
    for (size_t i = 0; i < g.size(); ++i)
        for (double v : g[i].data())
            if (!std::isfinite(v))
                fail("sgd_step: non-finite gradient for parameter " + std::to_string(i) +
                     " with shape " + shape_str(params[i].shape()));
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (size_t i = 0; i < params.size(); ++i) out.push_back(sub(params[i], scale(g[i], alpha)));
    return out;
}

TrainStepResult train_step(const EncoderParams& params, const Tensor& inliers,
                           const Tensor& augmented, double alpha, bool create_graph) {
    auto run = [&](std::vector<Tensor>& stepped) {
        Tensor loss = bce_train_loss(params, inliers, augmented);
        stepped = sgd_step(loss, params.all(), alpha, create_graph);
        return loss.value();
    };
    TrainStepResult res;
    std::vector<Tensor> stepped;
    if (create_graph) {
        res.loss = run(stepped);
        res.params = params.with_tensors(stepped);
        return res;
    }
    // Plain step: private tape, results detached into fresh trainable leaves.
    Tape tape;
    {
        TapeScope scope(tape);
        res.loss = run(stepped);
    }
    for (auto& t : stepped) {
        t = t.detach();
        t.set_requires_grad(true);
    }
    res.params = params.with_tensors(stepped);
    return res;
}

GdeModel fit_gde(const Tensor& z_rows) {
    if (z_rows.rank() != 2) fail("fit_gde: embeddings must be a 2-d batch");
    const int64_t n = z_rows.shape()[0], h = z_rows.shape()[1];
    if (n < 2) fail("fit_gde: need at least 2 rows, got " + std::to_string(n));
    const auto& z = z_rows.data();

    GdeModel gde;
    gde.h = h;
    gde.mean.assign(size_t(h), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < h; ++j) gde.mean[size_t(j)] += z[size_t(i * h + j)];
    for (auto& m : gde.mean) m /= double(n);

    std::vector<double> cov(size_t(h * h), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t a = 0; a < h; ++a) {
            const double da = z[size_t(i * h + a)] - gde.mean[size_t(a)];
            for (int64_t b = a; b < h; ++b)
                cov[size_t(a * h + b)] += da * (z[size_t(i * h + b)] - gde.mean[size_t(b)]);
        }
    double trace = 0.0;
    for (int64_t a = 0; a < h; ++a) {
        for (int64_t b = a; b < h; ++b) {
            cov[size_t(a * h + b)] /= double(n - 1);
            cov[size_t(b * h + a)] = cov[size_t(a * h + b)];
        }
        trace += cov[size_t(a * h + a)];
    }
    // Shrink toward the isotropic matrix with the same trace, then floor the
    // spectrum so the estimator never goes singular.
    const double iso = kGdeShrinkage * trace / double(h);
    for (int64_t a = 0; a < h; ++a)
        for (int64_t b = 0; b < h; ++b) {
            cov[size_t(a * h + b)] *= 1.0 - kGdeShrinkage;
            if (a == b) cov[size_t(a * h + b)] += iso + kGdeEigenFloor;
        }
    gde.covariance = cov;

    std::vector<double> lower;
    if (!cholesky(h, cov, lower)) fail("fit_gde: covariance is not positive definite");
    gde.log_det = 0.0;
    for (int64_t i = 0; i < h; ++i) gde.log_det += 2.0 * std::log(lower[size_t(i * h + i)]);
    gde.inverse.assign(size_t(h * h), 0.0);
    std::vector<double> col;
    for (int64_t j = 0; j < h; ++j) {
        inverse_column(h, lower, j, col);
        for (int64_t i = 0; i < h; ++i) gde.inverse[size_t(i * h + j)] = col[size_t(i)];
    }
    return gde;
}

double anomaly_score(const std::vector<double>& z, const GdeModel& gde) {
    if (int64_t(z.size()) != gde.h)
        fail("anomaly_score: embedding has " + std::to_string(z.size()) + " dims, model expects " +
             std::to_string(gde.h));
    const int64_t h = gde.h;
    double quad = 0.0;
    for (int64_t i = 0; i < h; ++i) {
        const double di = z[size_t(i)] - gde.mean[size_t(i)];
        for (int64_t j = 0; j < h; ++j)
            quad += di * gde.inverse[size_t(i * h + j)] * (z[size_t(j)] - gde.mean[size_t(j)]);
    }
    return 0.5 * quad + 0.5 * gde.log_det + 0.5 * double(h) * kLog2Pi;
}

std::vector<double> anomaly_scores(const Tensor& z_rows, const GdeModel& gde) {
    const int64_t n = z_rows.shape()[0], h = z_rows.shape()[1];
    if (h != gde.h) fail("anomaly_scores: embedding width does not match the model");
    std::vector<double> out(static_cast<size_t>(n));
    std::vector<double> z(static_cast<size_t>(h));
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < h; ++j) z[size_t(j)] = z_rows.data()[size_t(i * h + j)];
        out[size_t(i)] = anomaly_score(z, gde);
    }
    return out;
}

double score_variance(const std::vector<double>& scores) {
    const size_t n = scores.size();
    if (n < 2) fail("score_variance: need at least 2 scores, got " + std::to_string(n));
    double mean = 0.0;
    for (double s : scores) mean += s;
    mean /= double(n);
    double ss = 0.0;
    for (double s : scores) ss += (s - mean) * (s - mean);
    return ss / double(n - 1);
}

void save_checkpoint(const std::string& path, const EncoderParams& params) {
    io::Writer w(path);
    io::write_header(w, io::kKindCheckpoint);
    const std::vector<int64_t> d = params.config.dims();
    w.u32(uint32_t(d.size()));
    for (int64_t e : d) w.u64(uint64_t(e));
    for (size_t l = 0; l < params.weights.size(); ++l) {
        w.f64s(params.weights[l].data().data(), params.weights[l].data().size());
        w.f64s(params.biases[l].data().data(), params.biases[l].data().size());
    }
    w.f64s(params.head_w.data().data(), params.head_w.data().size());
    w.f64s(params.head_b.data().data(), params.head_b.data().size());
    w.close();
}

EncoderParams load_checkpoint(const std::string& path) {
    io::Reader r(path);
    io::read_header(r, io::kKindCheckpoint);
    const uint32_t nd = r.u32();
    if (nd < 2 || nd > 64) fail(path + ": implausible layer count");
    std::vector<int64_t> d(nd);
    for (auto& e : d) {
        e = int64_t(r.u64());
        if (e <= 0 || e > (int64_t(1) << 24)) fail(path + ": implausible layer width");
    }
    EncoderParams p;
    p.config.in_dim = d.front();
    p.config.embed_dim = d.back();
    p.config.hidden.assign(d.begin() + 1, d.end() - 1);
    for (size_t l = 0; l + 1 < d.size(); ++l) {
        std::vector<double> w(static_cast<size_t>(d[l] * d[l + 1]));
        r.f64s(w.data(), w.size());
        p.weights.push_back(Tensor::from({d[l], d[l + 1]}, std::move(w), true));
        std::vector<double> b(static_cast<size_t>(d[l + 1]));
        r.f64s(b.data(), b.size());
        p.biases.push_back(Tensor::from({d[l + 1]}, std::move(b), true));
    }
    std::vector<double> hw(static_cast<size_t>(p.config.embed_dim));
    r.f64s(hw.data(), hw.size());
    p.head_w = Tensor::from({p.config.embed_dim, 1}, std::move(hw), true);
    p.head_b = Tensor::from({1}, {r.f64()}, true);
    if (!r.at_eof()) fail(path + ": trailing bytes after checkpoint payload");
    return p;
}

}  // namespace stssad::detector
