#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "stssad/detector.hpp"
#include "stssad/io.hpp"
#include "test_util.hpp"

using namespace stssad;
using namespace stssad::detector;
using testutil::max_abs_diff;
using testutil::rand_tensor;
using testutil::throws_with;

namespace {

constexpr double kPi = 3.14159265358979323846;

// Identity encoder: one layer, unit weights, zero bias, head weight 1.
EncoderParams scalar_identity_encoder() {
    EncoderConfig cfg{1, {}, 1};
    RandomStream rng(1);
    EncoderParams p = init_encoder(cfg, rng);
    return p.with_tensors({Tensor::from({1, 1}, {1.0}), Tensor::from({1}, {0.0}),
                           Tensor::from({1, 1}, {1.0}), Tensor::from({1}, {0.0})});
}

EncoderParams zeroed(const EncoderParams& p) {
    std::vector<Tensor> ts;
    for (const Tensor& t : p.all()) ts.push_back(Tensor::zeros(t.shape()));
    return p.with_tensors(ts);
}

}  // namespace

TEST_CASE("encode: zero weights, identity weights, determinism") {
    RandomStream rng(21);
    EncoderConfig cfg{3, {2}, 2};
    EncoderParams zero = zeroed(init_encoder(cfg, rng));
    Tensor x = rand_tensor({4, 3}, rng, 0.0, 1.0);
    Tensor ez = encode(zero, x);
    for (double v : ez.data()) CHECK(v == 0.0);

    EncoderConfig idc{4, {}, 4};
    RandomStream rng2(22);
    EncoderParams idp = init_encoder(idc, rng2);
    std::vector<double> eye(16, 0.0);
    for (int i = 0; i < 4; ++i) eye[size_t(5 * i)] = 1.0;
    idp = idp.with_tensors({Tensor::from({4, 4}, eye), Tensor::zeros({4}), idp.head_w,
                            idp.head_b});
    Tensor xi = rand_tensor({3, 4}, rng2, -1.0, 1.0);
    CHECK(max_abs_diff(encode(idp, xi).data(), xi.data()) == 0.0);

    // Same seed, same batch: bitwise-identical embeddings and stepped weights.
    EncoderConfig dc{5, {4}, 3};
    RandomStream ra(77), rb(77);
    EncoderParams pa = init_encoder(dc, ra), pb = init_encoder(dc, rb);
    RandomStream rx(78);
    Tensor xin = rand_tensor({4, 5}, rx, 0.0, 1.0);
    Tensor xau = rand_tensor({4, 5}, rx, 0.0, 1.0);
    CHECK(max_abs_diff(encode(pa, xin).data(), encode(pb, xin).data()) == 0.0);
    TrainStepResult sa = train_step(pa, xin, xau, 1e-2);
    TrainStepResult sb = train_step(pb, xin, xau, 1e-2);
    CHECK(sa.loss == sb.loss);
    for (size_t i = 0; i < sa.params.all().size(); ++i)
        CHECK(max_abs_diff(sa.params.all()[i].data(), sb.params.all()[i].data()) == 0.0);
}

TEST_CASE("binary cross entropy hits its hand-computed values") {
    // All-zero parameters classify everything as p = 0.5: loss is ln 2.
    RandomStream rng(23);
    EncoderParams zero = zeroed(init_encoder(EncoderConfig{3, {2}, 2}, rng));
    Tensor xin = rand_tensor({5, 3}, rng, 0.0, 1.0);
    Tensor xau = rand_tensor({7, 3}, rng, 0.0, 1.0);
    CHECK(bce_train_loss(zero, xin, xau).value() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // Identity encoder turns inputs into logits: p=0.25 inlier, p=0.75 augmented.
    EncoderParams id = scalar_identity_encoder();
    Tensor one_in = Tensor::from({1, 1}, {-std::log(3.0)});
    Tensor one_au = Tensor::from({1, 1}, {std::log(3.0)});
    CHECK(bce_train_loss(id, one_in, one_au).value() ==
          doctest::Approx(std::log(4.0 / 3.0)).epsilon(1e-12));
    CHECK(bce_train_loss(id, one_in, one_au).value() == doctest::Approx(0.2877).epsilon(1e-3));

    // Saturated classifier stays finite and heads to zero loss.
    Tensor far_in = Tensor::from({1, 1}, {-1000.0});
    Tensor far_au = Tensor::from({1, 1}, {1000.0});
    const double sep = bce_train_loss(id, far_in, far_au).value();
    CHECK(std::isfinite(sep));
    CHECK(sep < 1e-10);
    const double flipped = bce_train_loss(id, far_au, far_in).value();
    CHECK(std::isfinite(flipped));
    CHECK(flipped > 100.0);
}

TEST_CASE("gradient step: closed forms, descent, and failure diagnostics") {
    // Quadratic surrogate: theta' = theta - 2*alpha*(theta - a).
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor theta = Tensor::from({1}, {1.0}, true);
        Tensor a = Tensor::from({1}, {0.6}, true);
        Tensor loss = square(sub(theta, a));
        std::vector<Tensor> stepped = sgd_step(loss, {theta}, 0.1, false);
        CHECK(stepped[0].value() == doctest::Approx(1.0 - 2.0 * 0.1 * 0.4).epsilon(1e-12));
    }

    // alpha = 0 returns the parameters bit for bit.
    RandomStream rng(24);
    EncoderParams p = init_encoder(EncoderConfig{4, {3}, 2}, rng);
    Tensor xin = rand_tensor({3, 4}, rng, 0.0, 1.0);
    Tensor xau = rand_tensor({3, 4}, rng, 0.0, 1.0);
    TrainStepResult frozen = train_step(p, xin, xau, 0.0);
    for (size_t i = 0; i < p.all().size(); ++i)
        CHECK(max_abs_diff(frozen.params.all()[i].data(), p.all()[i].data()) == 0.0);

    // One small step decreases the loss for every seed.
    for (uint64_t seed = 1; seed <= 50; ++seed) {
        RandomStream r(seed);
        EncoderParams q = init_encoder(EncoderConfig{8, {6}, 4}, r);
        Tensor bi = rand_tensor({4, 8}, r, 0.0, 1.0);
        Tensor ba = rand_tensor({4, 8}, r, 0.0, 1.0);
        TrainStepResult res = train_step(q, bi, ba, 1e-3);
        NoGradGuard ng;
        const double after = bce_train_loss(res.params, bi, ba).value();
        CHECK(after < res.loss);
    }

    // A poisoned weight overflows and is reported by parameter index.
    EncoderParams bad = p;
    bad.weights[0] = Tensor::from(p.weights[0].shape(),
                                  std::vector<double>(size_t(p.weights[0].size()), 1e308), true);
    CHECK(throws_with([&] { train_step(bad, xin, xau, 1e-2); }, "non-finite gradient"));
    CHECK(throws_with([&] { encode(p, Tensor::full({2, 5}, 0.0)); }, "input width"));
}

TEST_CASE("training loss gradients match finite differences layer by layer") {
    RandomStream rng(25);
    EncoderParams p = init_encoder(EncoderConfig{6, {5, 4}, 3}, rng);
    Tensor xin = rand_tensor({4, 6}, rng, 0.0, 1.0);
    Tensor xau = rand_tensor({4, 6}, rng, 0.0, 1.0);
    const std::vector<Tensor> base = p.all();
    for (size_t i = 0; i < base.size(); ++i) {
        auto f = [&, i](const Tensor& t) {
            std::vector<Tensor> ts = base;
            ts[i] = t;
            return bce_train_loss(p.with_tensors(ts), xin, xau);
        };
        FdReport rep = finite_diff_check(f, base[i].detach(), 1e-5, 1e-3);
        INFO("parameter " << i << " max rel err " << rep.max_rel_err << " at " << rep.worst_index);
        CHECK(rep.ok);
    }
}

TEST_CASE("gaussian density estimator: moments, shrinkage, and scores") {
    Tensor z4 = Tensor::from({4, 2}, {0, 0, 1, 0, 0, 1, 1, 1});
    GdeModel g = fit_gde(z4);
    CHECK(g.mean == std::vector<double>{0.5, 0.5});
    // Sample covariance is diag(1/3, 1/3); isotropic shrinkage keeps it, the
    // spectrum floor nudges the diagonal by 1e-6.
    CHECK(g.covariance[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-5));
    CHECK(g.covariance[3] == doctest::Approx(1.0 / 3.0).epsilon(1e-5));
    CHECK(g.covariance[1] == 0.0);
    CHECK(g.covariance[2] == 0.0);
    const double at_mean = anomaly_score({0.5, 0.5}, g);
    CHECK(at_mean == doctest::Approx(std::log(2.0 * kPi) - std::log(3.0)).epsilon(1e-4));
    CHECK(at_mean == doctest::Approx(0.7393).epsilon(1e-3));

    Tensor z2 = Tensor::from({2, 1}, {0.0, 2.0});
    GdeModel g1 = fit_gde(z2);
    CHECK(g1.mean[0] == 1.0);
    CHECK(g1.covariance[0] == doctest::Approx(2.0).epsilon(1e-5));

    // Hand-built standard normal in two dimensions.
    GdeModel std2;
    std2.h = 2;
    std2.mean = {0.0, 0.0};
    std2.covariance = {1, 0, 0, 1};
    std2.inverse = {1, 0, 0, 1};
    std2.log_det = 0.0;
    CHECK(anomaly_score({0.0, 0.0}, std2) == doctest::Approx(1.8379).epsilon(1e-4));
    CHECK(anomaly_score({0.0, 0.0}, std2) ==
          doctest::Approx(std::log(2.0 * kPi)).epsilon(1e-12));

    // Collapsed embeddings: the spectrum floor keeps the fit usable.
    GdeModel gc = fit_gde(Tensor::from({3, 2}, {0.7, -0.2, 0.7, -0.2, 0.7, -0.2}));
    CHECK(std::isfinite(gc.log_det));
    CHECK(gc.covariance[0] == doctest::Approx(1e-6).epsilon(1e-9));
    CHECK(anomaly_score({0.7, -0.2}, gc) < anomaly_score({0.71, -0.2}, gc));

    CHECK(throws_with([&] { fit_gde(Tensor::from({1, 2}, {0.0, 0.0})); }, "at least 2 rows"));
}

TEST_CASE("covariance is symmetric and the score is minimized at the mean") {
    RandomStream rng(26);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor z = rand_tensor({10, 5}, rng, -2.0, 2.0);
        GdeModel g = fit_gde(z);
        for (int64_t i = 0; i < 5; ++i)
            for (int64_t j = 0; j < 5; ++j) {
                CHECK(g.covariance[size_t(i * 5 + j)] == g.covariance[size_t(j * 5 + i)]);
                CHECK(std::fabs(g.inverse[size_t(i * 5 + j)] - g.inverse[size_t(j * 5 + i)]) <
                      1e-8);
            }
        const double at_mean = anomaly_score(g.mean, g);
        CHECK(std::isfinite(at_mean));
        for (int probe = 0; probe < 100; ++probe) {
            std::vector<double> z0 = g.mean;
            for (auto& v : z0) v += rng.uniform(-1.0, 1.0);
            if (max_abs_diff(z0, g.mean) == 0.0) continue;
            CHECK(anomaly_score(z0, g) > at_mean);
        }
    }

    // Scoring a batch equals scoring row by row.
    Tensor z = rand_tensor({6, 3}, rng, -1.0, 1.0);
    GdeModel g = fit_gde(z);
    std::vector<double> batch = anomaly_scores(z, g);
    for (int64_t i = 0; i < 6; ++i) {
        std::vector<double> row(z.data().begin() + i * 3, z.data().begin() + (i + 1) * 3);
        CHECK(batch[size_t(i)] == anomaly_score(row, g));
    }
}

TEST_CASE("score variance follows the sample formula") {
    CHECK(score_variance({1.0, 2.0, 3.0}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(score_variance({0.0, 2.0}) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(score_variance({0.4, 0.4, 0.4, 0.4}) == 0.0);

    RandomStream rng(27);
    std::vector<double> s(9), shifted(9);
    for (size_t i = 0; i < s.size(); ++i) {
        s[i] = rng.uniform(-3.0, 3.0);
        shifted[i] = s[i] + 123.456;
    }
    CHECK(std::fabs(score_variance(s) - score_variance(shifted)) < 1e-10);
    CHECK(throws_with([&] { score_variance({1.0}); }, "at least 2 scores"));
}

TEST_CASE("checkpoints round-trip bitwise and reject corruption") {
    RandomStream rng(28);
    EncoderParams p = init_encoder(EncoderConfig{7, {5, 3}, 4}, rng);
    const std::string path = "ckpt_test.bin";
    save_checkpoint(path, p);
    EncoderParams q = load_checkpoint(path);
    CHECK(q.config.in_dim == 7);
    CHECK(q.config.hidden == std::vector<int64_t>{5, 3});
    CHECK(q.config.embed_dim == 4);
    const auto pa = p.all(), qa = q.all();
    REQUIRE(pa.size() == qa.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].shape() == qa[i].shape());
        CHECK(max_abs_diff(pa[i].data(), qa[i].data()) == 0.0);
        CHECK(qa[i].requires_grad());
    }

    io::save_tensor("tensor_as_ckpt.bin", {2}, {1.0, 2.0});
    CHECK(throws_with([] { load_checkpoint("tensor_as_ckpt.bin"); }, "wrong record kind"));

    {
        std::ofstream bad("bad_magic.bin", std::ios::binary);
        bad << "NOTMAGIC garbage";
    }
    CHECK(throws_with([] { load_checkpoint("bad_magic.bin"); }, "magic"));

    {
        std::ifstream in(path, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
        std::ofstream cut("truncated_ckpt.bin", std::ios::binary);
        cut.write(bytes.data(), std::streamsize(bytes.size() / 2));
    }
    CHECK(throws_with([] { load_checkpoint("truncated_ckpt.bin"); }, "truncated"));
    std::remove(path.c_str());
    std::remove("tensor_as_ckpt.bin");
    std::remove("bad_magic.bin");
    std::remove("truncated_ckpt.bin");
}

TEST_CASE("a recorded train step stays differentiable in the augmentation knob") {
    Tape tape;
    TapeScope scope(tape);
    RandomStream rng(29);
    EncoderParams p = init_encoder(EncoderConfig{3, {2}, 2}, rng);
    Tensor xin = rand_tensor({2, 3}, rng, 0.0, 1.0);
    Tensor base = rand_tensor({2, 3}, rng, 0.0, 1.0);
    Tensor a = Tensor::from({1}, {0.7}, true);
    Tensor xau = mul(base, broadcast(a, base.shape()));
    TrainStepResult res = train_step(p, xin, xau, 1e-2, true);
    Tensor probe = sum(res.params.weights[0]);
    Tensor da = grad(probe, {a})[0];
    CHECK(std::fabs(da.value()) > 0.0);
    CHECK(std::isfinite(da.value()));
}
