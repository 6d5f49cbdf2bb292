#include "stssad/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "stssad/augment.hpp"
#include "stssad/datagen.hpp"
#include "stssad/detector.hpp"
#include "stssad/tensor.hpp"
#include "stssad/tuner.hpp"
#include "stssad/valloss.hpp"

namespace stssad::gradcheck {
namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error(msg); }

Tensor rand_in(Shape shape, RandomStream& rng, double lo, double hi) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    std::vector<double> v(static_cast<size_t>(n));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from(std::move(shape), std::move(v));
}

// Magnitudes in [lo, hi] with random signs: keeps relu/abs-style kinks at a
// safe distance from every sample.
Tensor rand_signed(Shape shape, RandomStream& rng, double lo, double hi) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    std::vector<double> v(static_cast<size_t>(n));
    for (double& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
    return Tensor::from(std::move(shape), std::move(v));
}

struct Suite {
    SuiteResult result;

    explicit Suite(std::string name) { result.name = std::move(name); }

    void push(const std::string& label, double err, double tol, bool ok) {
        result.checks.push_back({label, err, tol, ok});
        if (!ok) result.ok = false;
        if (err > result.worst_err || result.worst_label.empty()) {
            result.worst_err = err;
            result.worst_label = label;
        }
    }

    void fd(const std::string& label, const std::function<Tensor(const Tensor&)>& f,
            const Tensor& x, double tol, double step = 1e-5) {
        FdReport rep = finite_diff_check(f, x, step, tol);
        double err = rep.max_rel_err;
        bool ok = rep.ok;
        if (rep.nonfinite) {
            ok = false;
            err = std::numeric_limits<double>::infinity();
        }
        push(label, err, tol, ok);
    }

    void pinned(const std::string& label, double got, double want, double tol) {
        const double err = std::fabs(got - want);
        push(label, err, tol, err <= tol);
    }
};

SuiteResult suite_primitives() {
    Suite s("primitives");
    RandomStream rng(101);
    const double tol = 1e-4;

    Tensor x34 = rand_in({3, 4}, rng, -2.0, 2.0);
    Tensor c34 = rand_in({3, 4}, rng, 0.5, 1.5);
    Tensor pos = rand_in({3, 4}, rng, 0.5, 2.0);

    s.fd("add", [&](const Tensor& x) { return sum(add(x, c34)); }, x34, tol);
    s.fd("sub", [&](const Tensor& x) { return sum(sub(c34, x)); }, x34, tol);
    s.fd("mul", [&](const Tensor& x) { return sum(mul(x, c34)); }, x34, tol);
    s.fd("div", [&](const Tensor& x) { return sum(div(c34, x)); }, pos, tol);
    s.fd("neg", [&](const Tensor& x) { return sum(neg(x)); }, x34, tol);
    {
        Tensor rhs = rand_in({4, 2}, rng, -1.0, 1.0);
        s.fd("matmul", [&](const Tensor& x) { return sum(matmul(x, rhs)); }, x34, tol);
    }
    s.fd("exp", [&](const Tensor& x) { return sum(exp(x)); },
         rand_in({3, 4}, rng, -1.0, 1.0), tol);
    s.fd("log", [&](const Tensor& x) { return sum(log(x)); }, pos, tol);
    s.fd("sqrt", [&](const Tensor& x) { return sum(sqrt(x)); }, pos, tol);
    s.fd("square", [&](const Tensor& x) { return sum(square(x)); }, x34, tol);
    s.fd("sum", [&](const Tensor& x) { return sum(x); }, x34, tol);
    s.fd("mean", [&](const Tensor& x) { return mean(x); }, x34, tol);
    s.fd("relu", [&](const Tensor& x) { return sum(relu(x)); },
         rand_signed({3, 4}, rng, 0.2, 1.2), tol);
    s.fd("sigmoid", [&](const Tensor& x) { return sum(sigmoid(x)); }, x34, tol);
    {
        // Strictly inside (0,1) and strictly outside: no sample within 0.1 of
        // a clamp kink.
        std::vector<double> v;
        for (int i = 0; i < 6; ++i) v.push_back(rng.uniform(0.1, 0.9));
        for (int i = 0; i < 3; ++i) v.push_back(rng.uniform(1.1, 1.9));
        for (int i = 0; i < 3; ++i) v.push_back(rng.uniform(-0.9, -0.1));
        s.fd("clamp01", [&](const Tensor& x) { return sum(clamp01(x)); },
             Tensor::from({12}, std::move(v)), tol);
    }
    s.fd("l2norm_rows", [&](const Tensor& x) { return sum(l2norm_rows(x)); },
         rand_in({4, 3}, rng, 0.5, 1.5), tol);
    s.fd("broadcast",
         [&](const Tensor& x) { return sum(mul(broadcast(x, {3, 4}), c34)); },
         rand_in({1}, rng, -1.0, 1.0), tol);
    s.fd("broadcast_rows",
         [&](const Tensor& x) { return sum(mul(broadcast(x, {3, 4}), c34)); },
         rand_in({4}, rng, -1.0, 1.0), tol);
    s.fd("broadcast_cols",
         [&](const Tensor& x) { return sum(mul(broadcast_cols(x, {3, 4}), c34)); },
         rand_in({3}, rng, -1.0, 1.0), tol);
    {
        Tensor w = rand_in({6, 2}, rng, 0.5, 1.5);
        s.fd("reshape", [&](const Tensor& x) { return sum(mul(reshape(x, {6, 2}), w)); },
             x34, tol);
    }
    {
        Tensor tail = rand_in({2, 3}, rng, -1.0, 1.0);
        Tensor w = rand_in({5, 3}, rng, 0.5, 1.5);
        s.fd("concat_rows",
             [&](const Tensor& x) { return sum(mul(concat_rows({x, tail}), w)); },
             rand_in({3, 3}, rng, -1.0, 1.0), tol);
    }
    {
        Tensor w = rand_in({3, 3}, rng, 0.5, 1.5);
        s.fd("slice_rows",
             [&](const Tensor& x) { return sum(mul(slice_rows(x, 1, 4), w)); },
             rand_in({5, 3}, rng, -1.0, 1.0), tol);
    }
    s.fd("sin", [&](const Tensor& x) { return sum(sin(x)); }, x34, tol);
    s.fd("cos", [&](const Tensor& x) { return sum(cos(x)); }, x34, tol);
    s.fd("softplus", [&](const Tensor& x) { return sum(softplus(x)); }, x34, tol);
    {
        Tensor w = rand_in({4, 3}, rng, 0.5, 1.5);
        s.fd("transpose", [&](const Tensor& x) { return sum(mul(transpose(x), w)); }, x34,
             tol);
    }
    s.fd("scale", [&](const Tensor& x) { return sum(scale(x, 0.7)); }, x34, tol);
    {
        auto map = std::make_shared<const std::vector<int64_t>>(
            std::vector<int64_t>{4, -1, 0, 2, 2});
        Tensor w = rand_in({3, 5}, rng, 0.5, 1.5);
        s.fd("gather_cols",
             [&](const Tensor& x) { return sum(mul(gather_cols(x, map), w)); },
             rand_in({3, 5}, rng, -1.0, 1.0), tol);
    }
    {
        auto map = std::make_shared<const std::vector<int64_t>>(
            std::vector<int64_t>{3, 0, -1, 5});
        Tensor w = rand_in({2, 6}, rng, 0.5, 1.5);
        s.fd("scatter_cols_add",
             [&](const Tensor& x) { return sum(mul(scatter_cols_add(x, map, 6), w)); },
             rand_in({2, 4}, rng, -1.0, 1.0), tol);
    }
    return s.result;
}

SuiteResult suite_augment() {
    Suite s("augment");
    RandomStream rng(102);
    const double tol = 1e-3;

    {
        const int64_t m = 6, n = 2;
        std::vector<std::array<double, 2>> mu = {{0.53, 0.48}, {0.31, 0.62}};
        Tensor w = rand_in({n, m * m}, rng, 0.5, 1.5);
        Tensor img = Tensor::full({n, m * m}, 1.0);
        Tensor a0 = Tensor::from({3}, {0.4, 0.1, 0.5});
        s.fd("cutdiff_image",
             [&](const Tensor& a) { return sum(mul(augment::cutdiff(img, m, 1, a, mu), w)); },
             a0, tol);
        s.fd("cutdiff_patch",
             [&](const Tensor& a) {
                 return sum(mul(augment::cutdiff_patch(m, n, a, mu), w));
             },
             a0, tol);
    }
    {
        const int64_t m = 4;
        Tensor img = rand_in({2, 16}, rng, 0.0, 1.0);
        Tensor w = rand_in({2, 16}, rng, -1.0, 1.0);
        s.fd("rotate_angle",
             [&](const Tensor& a) { return sum(mul(augment::rotate(img, m, 1, a), w)); },
             Tensor::from({1}, {0.3}), tol);
    }
    {
        // Through the dispatching entry point, patch centers replayed per call.
        const int64_t m = 8;
        Tensor img = rand_in({2, 64}, rng, 0.2, 0.8);
        Tensor w = rand_in({2, 64}, rng, 0.5, 1.5);
        augment::AugParams base = augment::make_params(augment::Kind::CutDiff, {0.3, 0.1, 0.4});
        s.fd("apply_cutdiff",
             [&](const Tensor& a) {
                 augment::AugParams p = base;
                 p.a = a;
                 RandomStream mu(71);
                 return sum(mul(augment::apply(p, img, m, 1, mu), w));
             },
             base.a, tol);
    }
    return s.result;
}

SuiteResult suite_valloss() {
    Suite s("valloss");
    RandomStream rng(103);
    const double tol = 1e-3;

    valloss::EmbeddingBatch base;
    base.trn = rand_in({4, 3}, rng, -2.0, 2.0);
    base.aug = rand_in({3, 3}, rng, -2.0, 2.0);
    base.test = rand_in({5, 3}, rng, -2.0, 2.0);

    s.fd("mean_distance_trn",
         [&](const Tensor& x) {
             valloss::EmbeddingBatch b = base;
             b.trn = x;
             return valloss::evaluate(valloss::Kind::MeanDistance, b);
         },
         base.trn, tol);
    s.fd("mean_distance_aug",
         [&](const Tensor& x) {
             valloss::EmbeddingBatch b = base;
             b.aug = x;
             return valloss::evaluate(valloss::Kind::MeanDistance, b);
         },
         base.aug, tol);
    s.fd("mean_distance_test",
         [&](const Tensor& x) {
             valloss::EmbeddingBatch b = base;
             b.test = x;
             return valloss::evaluate(valloss::Kind::MeanDistance, b);
         },
         base.test, tol);

    {
        // Agreement with the 4-point closed form, sampled away from the |u|
        // kinks.
        double worst = 0.0;
        for (int rep = 0; rep < 25; ++rep) {
            const double u1 = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.05, 0.95);
            const double u2 = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.05, 0.95);
            valloss::EmbeddingBatch b;
            b.trn = Tensor::from({1, 1}, {0.0});
            b.aug = Tensor::from({1, 1}, {2.0});
            b.test = Tensor::from({2, 1}, {u1, u2 + 2.0});
            const double got = valloss::evaluate(valloss::Kind::MeanDistance, b).value();
            const double want = valloss::four_point_oracle(u1, u2);
            worst = std::max(worst, std::fabs(got - want) / std::fabs(want));
        }
        s.push("four_point_oracle", worst, 1e-8, worst <= 1e-8);
    }
    {
        // The kernel bandwidth is a constant of the tape, so finite
        // differences across it are not meaningful; assert the recorded
        // gradient exists, is finite, and is not identically zero.
        Tape tape;
        TapeScope scope(tape);
        Tensor za = rand_in({3, 2}, rng, -1.0, 1.0);
        za.set_requires_grad(true);
        Tensor zb = rand_in({4, 2}, rng, -1.0, 1.0);
        Tensor loss = valloss::mmd(za, zb);
        Tensor g = grad(loss, {za})[0];
        bool finite = true;
        double norm = 0.0;
        for (double v : g.data()) {
            if (!std::isfinite(v)) finite = false;
            norm += std::fabs(v);
        }
        const bool ok = finite && norm > 0.0;
        s.push("mmd_gradient_finite", ok ? 0.0 : std::numeric_limits<double>::infinity(),
               tol, ok);
    }
    return s.result;
}

SuiteResult suite_hypergradient() {
    Suite s("hypergradient");

    {
        // Scalar toy: L_trn = (theta - a)^2, L_val = (theta')^2, closed-form
        // hypergradient 4 * alpha * theta' = 0.32; first-order variant 0.
        Tape tape;
        TapeScope scope(tape);
        Tensor th = Tensor::from({1}, {1.0}, true);
        Tensor a = Tensor::from({1}, {0.0}, true);
        Tensor g0 = grad(square(sub(th, a)), {th}, true)[0];
        Tensor th_prime = sub(th, scale(g0, 0.1));
        s.pinned("scalar_toy_second_order", grad(square(th_prime), {a})[0].value(), 0.32,
                 1e-10);
        Tensor frozen = th_prime.detach();
        s.pinned("scalar_toy_first_order", grad(square(frozen), {a})[0].value(), 0.0, 1e-15);
    }

    // Full pipeline on a micro-dataset: central differences of the composite
    // map a -> L_val(a, theta - alpha dL_trn/dtheta), identical patch centers.
    datagen::SynthSpec spec;
    spec.seed = 501;
    spec.m = 16;
    spec.smoothness = 4;
    spec.n_train = 8;
    spec.n_test_normal = 3;
    spec.n_test_anomaly = 1;
    spec.s_star = 0.12;
    datagen::UnlabeledData data = datagen::view(datagen::build_testbed(spec));

    tuner::TunerConfig cfg;
    cfg.seed = 77;
    cfg.encoder = detector::EncoderConfig{256, {12}, 6};
    augment::AugParams a = augment::make_params(augment::Kind::CutDiff, {0.15, 0.05, 0.2});

    RandomStream w_rng(cfg.seed, rng_tag::kWeights, 0);
    detector::EncoderParams theta = detector::init_encoder(cfg.encoder, w_rng);
    {
        RandomStream warm_rng(cfg.seed, rng_tag::kWarmStart, 0);
        theta = tuner::warm_start(std::move(theta), a, 3, data, cfg.alpha, cfg.aug_ratio,
                                  warm_rng);
    }
    RandomStream mu(cfg.seed, rng_tag::kPatchCenters, 9);

    for (tuner::Mode mode : {tuner::Mode::SecondOrder, tuner::Mode::FirstOrder}) {
        const bool second = mode == tuner::Mode::SecondOrder;
        tuner::IterationResult it = tuner::tuner_iteration(mode, cfg, data, theta, a, mu);
        const std::vector<double>& g = it.grad_a;

        const double h = 1e-4;
        std::vector<double> fd(g.size());
        for (size_t j = 0; j < g.size(); ++j) {
            auto value_at = [&](double delta) {
                std::vector<double> raw = a.a.data();
                raw[j] += delta;
                augment::AugParams am = augment::make_params(a.kind, raw);
                if (second)
                    return tuner::tuner_iteration(mode, cfg, data, theta, am, mu).l_val;
                // First-order: theta' frozen at the base step's outcome.
                NoGradGuard ng;
                RandomStream mu_copy = mu;
                Tensor x_aug = tuner::augmented_batch(am, data.train, data.m, data.c,
                                                      cfg.aug_ratio, mu_copy);
                valloss::EmbeddingBatch b;
                b.trn = detector::encode(it.theta_next, data.train);
                b.aug = detector::encode(it.theta_next, x_aug);
                b.test = detector::encode(it.theta_next, data.test);
                return valloss::evaluate(cfg.val_loss_kind, b).value();
            };
            fd[j] = (value_at(h) - value_at(-h)) / (2.0 * h);
        }
        double denom = 1e-6, err = 0.0;
        for (size_t j = 0; j < g.size(); ++j)
            denom = std::max({denom, std::fabs(g[j]), std::fabs(fd[j])});
        for (size_t j = 0; j < g.size(); ++j)
            err = std::max(err, std::fabs(g[j] - fd[j]) / denom);
        s.push(second ? "pipeline_hypergradient" : "pipeline_first_order", err, 1e-2,
               err <= 1e-2);
    }
    return s.result;
}

}  // namespace

std::vector<std::string> SuiteResult::failing() const {
    std::vector<std::string> out;
    for (const CheckResult& c : checks)
        if (!c.ok) out.push_back(c.label);
    return out;
}

const std::vector<std::string>& suite_names() {
    static const std::vector<std::string> names = {"primitives", "augment", "valloss",
                                                   "hypergradient"};
    return names;
}

SuiteResult run_suite(const std::string& name) {
    if (name == "primitives") return suite_primitives();
    if (name == "augment") return suite_augment();
    if (name == "valloss") return suite_valloss();
    if (name == "hypergradient") return suite_hypergradient();
    fail("gradcheck: unknown suite: " + name);
}

std::vector<SuiteResult> run_suites(const std::vector<std::string>& names) {
    const std::vector<std::string>& picked = names.empty() ? suite_names() : names;
    std::vector<SuiteResult> out;
    for (const std::string& n : picked) out.push_back(run_suite(n));
    return out;
}

SuiteResult run_suite_mutated(const std::string& suite, const std::string& op) {
    debug_mutate_backward(op_from_name(op));
    try {
        SuiteResult res = run_suite(suite);
        debug_mutate_backward(std::nullopt);
        return res;
    } catch (...) {
        debug_mutate_backward(std::nullopt);
        throw;
    }
}

}  // namespace stssad::gradcheck
