#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "stssad/tensor.hpp"
#include "test_util.hpp"

using namespace stssad;
using testutil::rand_away_from;
using testutil::rand_tensor;
using testutil::throws_with;

namespace {

Tensor rg(const Tensor& t) {
    Tensor out = t.detach();
    out.set_requires_grad(true);
    return out;
}

}  // namespace

TEST_CASE("elementwise forward values") {
    Tensor a = Tensor::from({1}, {3.0});
    Tensor b = Tensor::from({1}, {2.0});
    CHECK(primitive("mul", {a, b}).value() == 6.0);
    CHECK(add(a, b).value() == 5.0);
    CHECK(sub(a, b).value() == 1.0);
    CHECK(div(a, b).value() == 1.5);
    CHECK(neg(a).value() == -3.0);
    CHECK(clamp01(Tensor::scalar(1.7)).value() == 1.0);
    CHECK(clamp01(Tensor::scalar(-0.2)).value() == 0.0);
    CHECK(clamp01(Tensor::scalar(0.25)).value() == 0.25);
    CHECK(relu(Tensor::scalar(-1.0)).value() == 0.0);
    CHECK(sigmoid(Tensor::scalar(0.0)).value() == 0.5);
    CHECK(square(Tensor::scalar(-3.0)).value() == 9.0);
    CHECK(sum(Tensor::from({3}, {1.0, 2.0, 3.0})).value() == 6.0);
    CHECK(mean(Tensor::from({4}, {1.0, 2.0, 3.0, 6.0})).value() == 3.0);
}

TEST_CASE("matmul against identity and a hand-computed product") {
    Tensor eye = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
    Tensor a = Tensor::from({2, 2}, {1.0, 2.0, 3.0, 4.0});
    CHECK(matmul(eye, a).data() == a.data());
    // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
    Tensor b = Tensor::from({2, 2}, {5.0, 6.0, 7.0, 8.0});
    const std::vector<double> want = {19.0, 22.0, 43.0, 50.0};
    CHECK(matmul(a, b).data() == want);
}

TEST_CASE("l2norm_rows on a 3-4-5 triangle row") {
    Tensor a = Tensor::from({2, 2}, {3.0, 4.0, 0.0, 0.0});
    Tensor n = l2norm_rows(a);
    CHECK(n.shape() == Shape{2});
    CHECK(n.data()[0] == doctest::Approx(5.0).epsilon(1e-9));
    // Zero row stays finite thanks to the smoothing term.
    CHECK(n.data()[1] == doctest::Approx(1e-6).epsilon(1e-3));
}

TEST_CASE("shape and layout ops") {
    Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor t = transpose(a);
    CHECK(t.shape() == Shape{3, 2});
    CHECK(t.data() == std::vector<double>{1, 4, 2, 5, 3, 6});

    Tensor r = reshape(a, {3, 2});
    CHECK(r.data() == a.data());

    Tensor c = concat_rows({a, a});
    CHECK(c.shape() == Shape{4, 3});
    Tensor s = slice_rows(c, 1, 3);
    CHECK(s.shape() == Shape{2, 3});
    CHECK(s.data() == std::vector<double>{4, 5, 6, 1, 2, 3});

    Tensor br = broadcast(Tensor::from({3}, {1, 2, 3}), {2, 3});
    CHECK(br.data() == std::vector<double>{1, 2, 3, 1, 2, 3});
    Tensor bc = broadcast_cols(Tensor::from({2}, {5, 7}), {2, 3});
    CHECK(bc.data() == std::vector<double>{5, 5, 5, 7, 7, 7});
    Tensor bs = broadcast(Tensor::scalar(4.0), {2, 2});
    CHECK(bs.data() == std::vector<double>{4, 4, 4, 4});
}

TEST_CASE("gather and scatter with a shared column map") {
    auto map = std::make_shared<const std::vector<int64_t>>(std::vector<int64_t>{2, 0, -1, 3});
    Tensor a = Tensor::from({2, 4}, {10, 11, 12, 13, 20, 21, 22, 23});
    Tensor g = gather_cols(a, map);
    CHECK(g.data() == std::vector<double>{12, 10, 0, 13, 22, 20, 0, 23});

    auto smap = std::make_shared<const std::vector<int64_t>>(std::vector<int64_t>{0, 2, 2, 4});
    Tensor x = Tensor::from({1, 4}, {1, 2, 3, 4});
    Tensor sc = scatter_cols_add(x, smap, 5);
    CHECK(sc.data() == std::vector<double>{1, 0, 5, 0, 4});
}

TEST_CASE("grad of sum(x*y) with respect to x is y") {
    Tape tape;
    TapeScope scope(tape);
    Tensor x = rg(Tensor::from({3}, {1.0, 2.0, 3.0}));
    Tensor y = Tensor::from({3}, {4.0, 5.0, 6.0});
    auto g = grad(sum(mul(x, y)), {x});
    CHECK(g[0].data() == y.data());
}

TEST_CASE("double backward of a cubic") {
    // y = sum(x^3): dy/dx = 3x^2, d(sum(dy/dx))/dx = 6x.
    Tape tape;
    TapeScope scope(tape);
    Tensor x = rg(Tensor::from({2}, {2.0, 3.0}));
    Tensor y = sum(mul(mul(x, x), x));
    CHECK(y.value() == doctest::Approx(35.0).epsilon(1e-12));
    auto g = grad(y, {x}, /*create_graph=*/true);
    CHECK(g[0].data()[0] == doctest::Approx(12.0).epsilon(1e-12));
    CHECK(g[0].data()[1] == doctest::Approx(27.0).epsilon(1e-12));
    auto h = grad(sum(g[0]), {x});
    CHECK(h[0].data()[0] == doctest::Approx(12.0).epsilon(1e-10));
    CHECK(h[0].data()[1] == doctest::Approx(18.0).epsilon(1e-10));
}

TEST_CASE("quadratic form gradient matches (M + M^T) x") {
    Tape tape;
    TapeScope scope(tape);
    Tensor m = Tensor::from({2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor x = rg(Tensor::from({2, 1}, {1.0, 2.0}));
    Tensor y = matmul(transpose(x), matmul(m, x));
    CHECK(y.value() == doctest::Approx(27.0).epsilon(1e-12));
    auto g = grad(y, {x});
    CHECK(g[0].data()[0] == doctest::Approx(12.0).epsilon(1e-12));
    CHECK(g[0].data()[1] == doctest::Approx(21.0).epsilon(1e-12));
}

TEST_CASE("disconnected wrt entries get zero gradients") {
    Tape tape;
    TapeScope scope(tape);
    Tensor x = rg(Tensor::from({2}, {1.0, 2.0}));
    Tensor z = rg(Tensor::from({3}, {1.0, 1.0, 1.0}));
    auto g = grad(sum(square(x)), {x, z});
    CHECK(g[1].shape() == Shape{3});
    CHECK(g[1].data() == std::vector<double>{0.0, 0.0, 0.0});
}

TEST_CASE("gradients accumulate across multiple uses") {
    Tape tape;
    TapeScope scope(tape);
    Tensor x = rg(Tensor::from({2}, {1.0, 2.0}));
    auto g1 = grad(sum(add(x, x)), {x});
    CHECK(g1[0].data() == std::vector<double>{2.0, 2.0});
    auto g2 = grad(sum(concat_rows({x, x, x})), {x});
    CHECK(g2[0].data() == std::vector<double>{3.0, 3.0});
}

TEST_CASE("tape purity: identical expressions give bitwise-identical values") {
    RandomStream rng(7);
    Tensor a = rand_tensor({4, 4}, rng);
    Tensor b = rand_tensor({4, 4}, rng);
    auto run = [&]() {
        return sigmoid(matmul(exp(scale(a, 0.1)), add(b, square(a)))).data();
    };
    CHECK(run() == run());
    // Inputs must never be written through.
    std::vector<double> before = a.data();
    (void)relu(a);
    (void)clamp01(a);
    CHECK(a.data() == before);
}

TEST_CASE("finite differences agree with recorded gradients for every primitive") {
    RandomStream rng(11);
    auto check = [&](const char* name, const std::function<Tensor(const Tensor&)>& f,
                     const Tensor& x) {
        FdReport rep = finite_diff_check(f, x, 1e-5, 1e-4);
        INFO(name << " max rel err " << rep.max_rel_err << " at " << rep.worst_index);
        CHECK(rep.ok);
    };

    Tensor c = rand_tensor({2, 3}, rng);
    Tensor denom = rand_away_from({2, 3}, rng, {0.0}, 0.3, 0.5, 2.0);
    Tensor bmat = rand_tensor({3, 2}, rng);

    check("add", [&](const Tensor& t) { return sum(add(t, c)); }, rand_tensor({2, 3}, rng));
    check("sub", [&](const Tensor& t) { return sum(sub(c, t)); }, rand_tensor({2, 3}, rng));
    check("mul", [&](const Tensor& t) { return sum(mul(t, c)); }, rand_tensor({2, 3}, rng));
    check("div num", [&](const Tensor& t) { return sum(div(t, denom)); }, rand_tensor({2, 3}, rng));
    check("div den", [&](const Tensor& t) { return sum(div(c, t)); }, denom);
    check("neg", [&](const Tensor& t) { return sum(neg(t)); }, rand_tensor({2, 3}, rng));
    Tensor lmat = rand_tensor({4, 2}, rng);
    check("matmul lhs", [&](const Tensor& t) { return sum(matmul(t, bmat)); },
          rand_tensor({2, 3}, rng));
    check("matmul rhs", [&](const Tensor& t) { return sum(matmul(lmat, t)); },
          rand_tensor({2, 3}, rng));
    check("exp", [&](const Tensor& t) { return sum(exp(t)); }, rand_tensor({2, 3}, rng, -1, 1));
    check("log", [&](const Tensor& t) { return sum(log(t)); },
          rand_tensor({2, 3}, rng, 0.5, 3.0));
    check("sqrt", [&](const Tensor& t) { return sum(sqrt(t)); },
          rand_tensor({2, 3}, rng, 0.5, 3.0));
    check("square", [&](const Tensor& t) { return sum(square(t)); }, rand_tensor({2, 3}, rng));
    check("sum", [&](const Tensor& t) { return sum(t); }, rand_tensor({2, 3}, rng));
    check("mean", [&](const Tensor& t) { return mean(t); }, rand_tensor({2, 3}, rng));
    check("relu", [&](const Tensor& t) { return sum(relu(t)); },
          rand_away_from({2, 3}, rng, {0.0}, 0.1, -2, 2));
    check("sigmoid", [&](const Tensor& t) { return sum(sigmoid(t)); }, rand_tensor({2, 3}, rng));
    check("clamp01", [&](const Tensor& t) { return sum(clamp01(t)); },
          rand_away_from({2, 3}, rng, {0.0, 1.0}, 0.1, -1, 2));
    check("l2norm_rows", [&](const Tensor& t) { return sum(l2norm_rows(t)); },
          rand_away_from({3, 4}, rng, {0.0}, 0.2, -2, 2));

    Tensor weights34 = rand_tensor({3, 4}, rng);
    check("broadcast scalar",
          [&](const Tensor& t) { return sum(mul(broadcast(t, {3, 4}), weights34)); },
          Tensor::scalar(0.7));
    check("broadcast row",
          [&](const Tensor& t) { return sum(mul(broadcast(t, {3, 4}), weights34)); },
          rand_tensor({4}, rng));
    check("broadcast col",
          [&](const Tensor& t) { return sum(mul(broadcast_cols(t, {3, 4}), weights34)); },
          rand_tensor({3}, rng));
    check("sin", [&](const Tensor& t) { return sum(sin(t)); }, rand_tensor({2, 3}, rng));
    check("cos", [&](const Tensor& t) { return sum(cos(t)); }, rand_tensor({2, 3}, rng));
    check("softplus", [&](const Tensor& t) { return sum(softplus(t)); },
          rand_tensor({2, 3}, rng));
    check("transpose", [&](const Tensor& t) { return sum(mul(transpose(t), bmat)); },
          rand_tensor({2, 3}, rng));
    check("scale", [&](const Tensor& t) { return sum(scale(t, -1.7)); },
          rand_tensor({2, 3}, rng));
    check("reshape", [&](const Tensor& t) { return sum(mul(reshape(t, {3, 2}), bmat)); },
          rand_tensor({2, 3}, rng));
    check("slice_rows", [&](const Tensor& t) { return sum(slice_rows(t, 1, 3)); },
          rand_tensor({4, 2}, rng));
    check("concat_rows", [&](const Tensor& t) { return sum(square(concat_rows({t, c}))); },
          rand_tensor({2, 3}, rng));

    auto map = std::make_shared<const std::vector<int64_t>>(std::vector<int64_t>{2, 0, -1, 1, 2});
    check("gather_cols", [&](const Tensor& t) { return sum(square(gather_cols(t, map))); },
          rand_tensor({2, 3}, rng));
    check("scatter_cols_add",
          [&](const Tensor& t) { return sum(square(scatter_cols_add(t, map, 3))); },
          rand_tensor({2, 5}, rng));
}

TEST_CASE("finite differences pass on a deep composite") {
    RandomStream rng(13);
    Tensor w1 = rand_tensor({3, 4}, rng, -0.5, 0.5);
    Tensor w2 = rand_tensor({4, 1}, rng, -0.5, 0.5);
    auto f = [&](const Tensor& t) {
        Tensor h = relu(matmul(t, w1));
        return mean(softplus(matmul(h, w2)));
    };
    FdReport rep = finite_diff_check(f, rand_tensor({2, 3}, rng), 1e-5, 1e-4);
    INFO("max rel err " << rep.max_rel_err);
    CHECK(rep.ok);
}

TEST_CASE("backward-rule mutation is caught by the finite-difference check") {
    debug_mutate_backward(Op::Exp);
    FdReport rep = finite_diff_check([](const Tensor& t) { return sum(exp(t)); },
                                     Tensor::from({2}, {0.3, -0.4}), 1e-5, 1e-4);
    debug_mutate_backward(std::nullopt);
    CHECK_FALSE(rep.ok);
    CHECK(rep.max_rel_err > 0.1);
    // And the restored rule passes again.
    FdReport ok = finite_diff_check([](const Tensor& t) { return sum(exp(t)); },
                                    Tensor::from({2}, {0.3, -0.4}), 1e-5, 1e-4);
    CHECK(ok.ok);
}

TEST_CASE("error paths name the op and reject misuse") {
    Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from({3}, {1, 2, 3});
    CHECK(throws_with([&] { (void)add(a, b); }, "add"));
    CHECK(throws_with([&] { (void)matmul(a, a); }, "matmul"));
    CHECK(throws_with([&] { (void)log(Tensor::scalar(-1.0)); }, "log"));
    CHECK(throws_with([&] { (void)sqrt(Tensor::scalar(-1.0)); }, "sqrt"));

    {
        Tape tape;
        TapeScope scope(tape);
        Tensor x = rg(Tensor::from({2}, {1.0, 2.0}));
        CHECK(throws_with([&] { (void)grad(square(x), {x}); }, "scalar"));
    }
    // grad with no active tape
    {
        Tensor x = rg(Tensor::from({1}, {1.0}));
        CHECK(throws_with([&] { (void)grad(x, {x}); }, "tape"));
    }
    // op results from a dead tape must be detached before reuse
    Tensor stale;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor x = rg(Tensor::from({2}, {1.0, 2.0}));
        stale = square(x);
    }
    {
        Tape tape2;
        TapeScope scope(tape2);
        CHECK(throws_with([&] { (void)sum(stale); }, "detach"));
        Tensor fine = stale.detach();
        CHECK(sum(fine).value() == 5.0);
    }
}

TEST_CASE("nested tape scopes restore the outer tape") {
    Tape outer;
    TapeScope so(outer);
    Tensor x = rg(Tensor::from({1}, {2.0}));
    Tensor y = square(x);
    {
        Tape inner;
        TapeScope si(inner);
        Tensor z = rg(Tensor::from({1}, {5.0}));
        auto gi = grad(mul(z, z), {z});
        CHECK(gi[0].value() == doctest::Approx(10.0));
    }
    auto g = grad(y, {x});
    CHECK(g[0].value() == doctest::Approx(4.0));
}
