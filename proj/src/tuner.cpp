#include "stssad/tuner.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace stssad::tuner {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error(msg); }

void validate(const TunerConfig& cfg, const datagen::UnlabeledData& data) {
    if (!(cfg.alpha > 0.0) || !(cfg.beta > 0.0)) fail("tuner: step sizes must be positive");
    if (cfg.max_iters < 1) fail("tuner: need at least one iteration");
    if (!(cfg.aug_ratio > 0.0)) fail("tuner: augmentation ratio must be positive");
    if (cfg.init_list.empty()) fail("tuner: init_list must not be empty");
    if (cfg.patience < 1) fail("tuner: patience must be at least 1");
    if (cfg.theta_updates_per_iter < 1)
        fail("tuner: theta updates per iteration must be at least 1");
    if (cfg.warm_epochs < 0) fail("tuner: negative warm-start epochs");
    if (!data.train.defined() || data.train.rank() != 2 || !data.test.defined() ||
        data.test.rank() != 2)
        fail("tuner: dataset view must hold 2-d train and test batches");
    const int64_t width = data.m * data.m * data.c;
    if (data.train.shape()[1] != width || data.test.shape()[1] != width)
        fail("tuner: dataset geometry (m, c) does not match the pixel rows");
    if (cfg.encoder.in_dim != 0 && cfg.encoder.in_dim != width)
        fail("tuner: encoder input width " + std::to_string(cfg.encoder.in_dim) +
             " does not match the dataset width " + std::to_string(width));
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::string_view mode_name(Mode m) {
    switch (m) {
        case Mode::SecondOrder: return "second_order";
        case Mode::FirstOrder: return "first_order";
        case Mode::RandomStatic: return "random_static";
        case Mode::RandomDynamic: return "random_dynamic";
    }
    return "?";
}

Mode mode_from_name(std::string_view name) {
    if (name == "second_order") return Mode::SecondOrder;
    if (name == "first_order") return Mode::FirstOrder;
    if (name == "random_static") return Mode::RandomStatic;
    if (name == "random_dynamic") return Mode::RandomDynamic;
    fail("unknown tuner mode: " + std::string(name));
}

Tensor augmented_batch(const augment::AugParams& a, const Tensor& train, int64_t m, int64_t c,
                       double aug_ratio, RandomStream& mu_rng) {
    if (!train.defined() || train.rank() != 2)
        fail("augmented_batch: train must be a 2-d image batch");
    const int64_t n = train.shape()[0];
    const int64_t n_aug = std::max<int64_t>(1, llround(aug_ratio * double(n)));
    std::vector<Tensor> parts;
    int64_t left = n_aug;
    while (left > 0) {
        const int64_t take = std::min(left, n);
        Tensor src = take == n ? train : slice_rows(train, 0, take);
        parts.push_back(augment::apply(a, src, m, c, mu_rng));
        left -= take;
    }
    return parts.size() == 1 ? parts[0] : concat_rows(parts);
}

detector::EncoderParams warm_start(detector::EncoderParams theta, const augment::AugParams& a,
                                   int64_t epochs, const datagen::UnlabeledData& data,
                                   double alpha, double aug_ratio, RandomStream& mu_rng) {
    if (epochs < 0) fail("warm_start: negative epoch count");
    for (int64_t e = 0; e < epochs; ++e) {
        Tensor x_aug = augmented_batch(a, data.train, data.m, data.c, aug_ratio, mu_rng);
        theta = detector::train_step(theta, data.train, x_aug, alpha).params;
    }
    return theta;
}

IterationResult tuner_iteration(Mode mode, const TunerConfig& cfg,
                                const datagen::UnlabeledData& data,
                                const detector::EncoderParams& theta,
                                const augment::AugParams& a, RandomStream mu_rng) {
    IterationResult out;

    // Preliminary plain inner steps (truncated unrolling keeps only the last
    // step differentiable).
    detector::EncoderParams cur = theta;
    for (int64_t u = 0; u + 1 < cfg.theta_updates_per_iter; ++u) {
        Tensor x_aug = augmented_batch(a, data.train, data.m, data.c, cfg.aug_ratio, mu_rng);
        cur = detector::train_step(cur, data.train, x_aug, cfg.alpha).params;
    }

    if (mode == Mode::SecondOrder || mode == Mode::FirstOrder) {
        Tape tape;
        TapeScope scope(tape);
        Tensor av = a.a.detach();
        av.set_requires_grad(true);
        augment::AugParams arec;
        arec.kind = a.kind;
        arec.a = av;
        arec.domain = a.domain;

        Tensor x_aug = augmented_batch(arec, data.train, data.m, data.c, cfg.aug_ratio, mu_rng);
        Tensor l_trn = detector::bce_train_loss(cur, data.train, x_aug);
        std::vector<Tensor> stepped =
            detector::sgd_step(l_trn, cur.all(), cfg.alpha, mode == Mode::SecondOrder);
        if (mode == Mode::FirstOrder)
            for (auto& t : stepped) t = t.detach();  // theta' frozen: no second-order path
        detector::EncoderParams theta_prime = cur.with_tensors(stepped);

        valloss::EmbeddingBatch batch;
        batch.trn = detector::encode(theta_prime, data.train);
        batch.aug = detector::encode(theta_prime, x_aug);
        batch.test = detector::encode(theta_prime, data.test);
        Tensor l_val = valloss::evaluate(cfg.val_loss_kind, batch);

        std::vector<Tensor> g = grad(l_val, {av});
        out.l_trn = l_trn.value();
        out.l_val = l_val.value();
        out.grad_a.assign(g[0].data().begin(), g[0].data().end());
        for (double v : out.grad_a)
            if (!std::isfinite(v))
                fail("tuner: non-finite hypergradient (l_trn=" + fmt(out.l_trn) +
                     ", l_val=" + fmt(out.l_val) + ")");

        std::vector<Tensor> next;
        for (const Tensor& t : stepped) {
            Tensor leaf = t.detach();
            leaf.set_requires_grad(true);
            next.push_back(leaf);
        }
        out.theta_next = cur.with_tensors(next);
        return out;
    }

    // Random-search modes: a plain step, then the validation loss at theta'.
    Tensor x_aug;
    {
        NoGradGuard ng;
        x_aug = augmented_batch(a, data.train, data.m, data.c, cfg.aug_ratio, mu_rng);
    }
    detector::TrainStepResult step = detector::train_step(cur, data.train, x_aug, cfg.alpha);
    out.l_trn = step.loss;
    out.theta_next = step.params;

    NoGradGuard ng;
    valloss::EmbeddingBatch batch;
    batch.trn = detector::encode(out.theta_next, data.train);
    batch.aug = detector::encode(out.theta_next, x_aug);
    batch.test = detector::encode(out.theta_next, data.test);
    out.l_val = valloss::evaluate(cfg.val_loss_kind, batch).value();
    return out;
}

std::vector<double> hypergradient(const TunerConfig& cfg, const datagen::UnlabeledData& data,
                                  const detector::EncoderParams& theta,
                                  const augment::AugParams& a, RandomStream mu_rng) {
    return tuner_iteration(Mode::SecondOrder, cfg, data, theta, a, std::move(mu_rng)).grad_a;
}

std::vector<double> first_order_step(const TunerConfig& cfg, const datagen::UnlabeledData& data,
                                     const detector::EncoderParams& theta,
                                     const augment::AugParams& a, RandomStream mu_rng) {
    return tuner_iteration(Mode::FirstOrder, cfg, data, theta, a, std::move(mu_rng)).grad_a;
}

bool stopping_check(const std::vector<double>& summed_history, int64_t patience) {
    if (summed_history.empty()) fail("stopping_check: empty history");
    double best = summed_history[0];
    int64_t stall = 0;
    for (size_t i = 1; i < summed_history.size(); ++i) {
        const double s = summed_history[i];
        const double rel = (best - s) / std::max(std::fabs(best), 1e-12);
        if (rel >= 1e-5) {
            best = s;
            stall = 0;
        } else {
            ++stall;
        }
    }
    return stall >= patience;
}

TunerRun tune_one(const TunerConfig& cfg, const datagen::UnlabeledData& data,
                  int64_t init_index) {
    validate(cfg, data);
    if (init_index < 0 || init_index >= int64_t(cfg.init_list.size()))
        fail("tune_one: init index out of range");

    TunerConfig c = cfg;
    if (c.encoder.in_dim == 0) c.encoder.in_dim = data.m * data.m * data.c;

    RandomStream w_rng(c.seed, rng_tag::kWeights, uint64_t(init_index));
    detector::EncoderParams theta = detector::init_encoder(c.encoder, w_rng);

    augment::AugParams a = c.init_list[size_t(init_index)];
    a.a = a.a.detach();
    augment::project(a);

    RandomStream warm_rng(c.seed, rng_tag::kWarmStart, uint64_t(init_index));
    theta = warm_start(std::move(theta), a, c.warm_epochs, data, c.alpha, c.aug_ratio,
                       warm_rng);

    RandomStream rs_rng(c.seed, rng_tag::kRandomSearch, uint64_t(init_index));

    TunerRun run;
    run.init_index = init_index;
    std::vector<double> summed;
    for (int64_t t = 0; t < c.max_iters; ++t) {
        if (c.mode == Mode::RandomDynamic) {
            a.a = augment::sample_random(a.kind, rs_rng);
            augment::project(a);
        }
        // Patch centers are a fresh deterministic substream per (run, iter) so
        // an iteration can be replayed in isolation.
        RandomStream it_rng(c.seed, rng_tag::kPatchCenters,
                            (uint64_t(init_index) << 32) | uint64_t(t));
        IterationResult it;
        try {
            it = tuner_iteration(c.mode, c, data, theta, a, std::move(it_rng));
        } catch (const Error& e) {
            run.aborted = true;
            run.abort_reason = e.what();
            break;
        }

        TrajectoryPoint pt;
        pt.t = t;
        pt.a = a.a.data();
        pt.l_trn = it.l_trn;
        pt.l_val = it.l_val;
        run.trajectory.push_back(pt);
        summed.push_back(pt.summed());

        theta = it.theta_next;
        if (!it.grad_a.empty()) {
            std::vector<double> raw = a.a.data();
            for (size_t j = 0; j < raw.size(); ++j) raw[j] -= c.beta * it.grad_a[j];
            a.a = Tensor::from(a.a.shape(), std::move(raw));
            augment::project(a);
        }
        if (stopping_check(summed, c.patience)) break;
    }

    run.final_a = a;
    run.final_theta = theta;
    return run;
}

std::vector<TunerRun> tune_all(const TunerConfig& cfg, const datagen::UnlabeledData& data) {
    validate(cfg, data);
    std::vector<TunerRun> runs;
    for (int64_t i = 0; i < int64_t(cfg.init_list.size()); ++i)
        runs.push_back(tune_one(cfg, data, i));
    return runs;
}

double selection_score(const detector::EncoderParams& theta,
                       const datagen::UnlabeledData& data) {
    NoGradGuard ng;
    Tensor z_trn = detector::encode(theta, data.train);
    detector::GdeModel gde = detector::fit_gde(z_trn);
    Tensor z_test = detector::encode(theta, data.test);
    return detector::score_variance(detector::anomaly_scores(z_test, gde));
}

int64_t select_init(std::vector<TunerRun>& runs, const datagen::UnlabeledData& data) {
    if (runs.empty()) fail("select_init: empty run list");
    int64_t best = -1;
    double best_score = 0.0, best_sum = 0.0;
    for (size_t i = 0; i < runs.size(); ++i) {
        runs[i].selected = false;
        if (runs[i].aborted) continue;
        runs[i].score = selection_score(runs[i].final_theta, data);
        const double sum = runs[i].trajectory.empty()
                               ? std::numeric_limits<double>::infinity()
                               : runs[i].trajectory.back().summed();
        const bool better =
            best < 0 || runs[i].score > best_score ||
            (runs[i].score == best_score && sum < best_sum);
        if (better) {
            best = int64_t(i);
            best_score = runs[i].score;
            best_sum = sum;
        }
    }
    if (best < 0) fail("select_init: no completed runs to select from");
    runs[size_t(best)].selected = true;
    return best;
}

TunerRun tune(const TunerConfig& cfg, const datagen::UnlabeledData& data) {
    std::vector<TunerRun> runs = tune_all(cfg, data);
    const int64_t winner = select_init(runs, data);
    return runs[size_t(winner)];
}

void write_trajectory_csv(const TunerRun& run, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("write_trajectory_csv: cannot open " + path);
    out << "t,a0,a1,a2,l_trn,l_val,l_sum\n";
    for (const TrajectoryPoint& p : run.trajectory) {
        out << p.t;
        for (size_t j = 0; j < 3; ++j)
            out << "," << (j < p.a.size() ? fmt(p.a[j]) : "");
        out << "," << fmt(p.l_trn) << "," << fmt(p.l_val) << "," << fmt(p.summed()) << "\n";
    }
    if (run.aborted) out << "# ABORTED: " << run.abort_reason << "\n";
    if (!out) fail("write_trajectory_csv: write failure on " + path);
}

}  // namespace stssad::tuner
