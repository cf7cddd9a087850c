#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "soap/gradcheck.hpp"
#include "soap/ops.hpp"
#include "soap/prototype.hpp"

using namespace soap;

namespace {

Tensor random_feat(std::size_t f, std::size_t d, Rng& rng) {
    Tensor t(Shape{f, d});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
    return t;
}

}  // namespace

TEST_CASE("identical shots reproduce the one-shot prototype") {
    HeadConfig cfg{6, 7};
    Rng rng(51);
    HeadParams p = make_head_params(10, cfg, rng);
    Tensor q = random_feat(4, 10, rng);
    Tensor s = random_feat(4, 10, rng);

    Prototype one = build_prototype(q, {s}, p);
    Prototype two = build_prototype(q, {s, s}, p);
    Prototype four = build_prototype(q, {s, s, s, s}, p);
    CHECK(max_abs_diff(one.value, two.value) == 0.0);   // division by powers of two is exact
    CHECK(max_abs_diff(one.value, four.value) == 0.0);
    Prototype three = build_prototype(q, {s, s, s}, p);
    CHECK(max_abs_diff(one.value, three.value) <= 1e-15);
}

TEST_CASE("single-frame prototypes reduce to the mean of projected supports") {
    HeadConfig cfg{3, 5};
    Rng rng(52);
    HeadParams p = make_head_params(6, cfg, rng);
    Tensor q = random_feat(1, 6, rng);
    std::vector<Tensor> supports{random_feat(1, 6, rng), random_feat(1, 6, rng)};
    Prototype proto = build_prototype(q, supports, p);

    Tensor want = scale(add(linear(supports[0], p.lambda_w),
                            linear(supports[1], p.lambda_w)), 0.5);
    CHECK(max_abs_diff(proto.value, want) <= 1e-15);
}

TEST_CASE("paper-scale prototype shape") {
    HeadConfig cfg{1152, 1152};
    Rng rng(53);
    HeadParams p = make_head_params(2048, cfg, rng);
    Tensor q = random_feat(8, 2048, rng);
    Tensor s = random_feat(8, 2048, rng);
    CHECK(build_prototype(q, {s}, p).value.shape() == Shape{8, 1152});
}

TEST_CASE("prototype is insensitive to support ordering") {
    HeadConfig cfg{4, 4};
    Rng rng(54);
    HeadParams p = make_head_params(8, cfg, rng);
    Tensor q = random_feat(3, 8, rng);
    std::vector<Tensor> sup{random_feat(3, 8, rng), random_feat(3, 8, rng), random_feat(3, 8, rng)};
    std::vector<Tensor> rev{sup[2], sup[0], sup[1]};
    CHECK(max_abs_diff(build_prototype(q, sup, p).value, build_prototype(q, rev, p).value) <= 1e-12);
}

TEST_CASE("attention rows sum to one") {
    HeadConfig cfg{5, 5};
    Rng rng(55);
    HeadParams p = make_head_params(9, cfg, rng);
    Tensor q = random_feat(6, 9, rng);
    Tensor s = random_feat(6, 9, rng);
    // same chain build_prototype uses
    Tensor lnq = layer_norm(linear(q, p.psi_w), 1);
    Tensor lns = layer_norm(linear(s, p.gamma_w), 1);
    Tensor weights = softmax(matmul(lnq, transpose(lns, {1, 0})), 1);
    for (std::size_t r = 0; r < 6; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < 6; ++c) sum += weights.at({r, c});
        CHECK(std::fabs(sum - 1.0) <= 1e-9);
    }
}

TEST_CASE("distance examples") {
    HeadConfig cfg{3, 2};
    Rng rng(56);
    HeadParams p = make_head_params(4, cfg, rng);
    Tensor q = random_feat(2, 4, rng);

    Prototype equal;
    equal.value = linear(q, p.lambda_w);
    CHECK(distance(equal, q, p).item() == 0.0);

    Prototype offset;
    offset.value = add(linear(q, p.lambda_w), Tensor::ones({2, 2}));
    CHECK(distance(offset, q, p).item() == doctest::Approx(2.0).epsilon(1e-12));  // sqrt(4)

    // triangle inequality on the underlying norm
    for (int trial = 0; trial < 50; ++trial) {
        Tensor a = random_feat(3, 5, rng), b = random_feat(3, 5, rng), c = random_feat(3, 5, rng);
        const double ab = frobenius_norm(sub(a, b)).item();
        const double bc = frobenius_norm(sub(b, c)).item();
        const double ac = frobenius_norm(sub(a, c)).item();
        CHECK(ac <= ab + bc + 1e-9);
    }
}

TEST_CASE("classification rules") {
    CHECK(classify({3.0, 1.0, 2.0}) == 1);
    CHECK(classify({2.0, 2.0, 2.0}) == 0);
    CHECK(classify({0.5}) == 0);
    CHECK_THROWS_AS(classify({}), std::invalid_argument);
}

TEST_CASE("uniform distances give log N loss") {
    std::vector<Tensor> d(5, Tensor::scalar(1.7));
    CHECK(loss_ce(d, 2).item() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
    CHECK_THROWS_AS(loss_ce(d, 5), std::invalid_argument);
    CHECK_THROWS_AS(loss_ce({}, 0), std::invalid_argument);
}

TEST_CASE("a fifty-unit margin drives the loss to zero") {
    std::vector<Tensor> d{Tensor::scalar(0.0), Tensor::scalar(50.0), Tensor::scalar(50.0)};
    CHECK(loss_ce(d, 0).item() < 1e-20);
}

TEST_CASE("loss and classification are shift invariant") {
    Rng rng(57);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<Tensor> d;
        std::vector<Tensor> shifted;
        std::vector<double> dv;
        const double c = rng.uniform(-10.0, 10.0);
        for (int i = 0; i < 5; ++i) {
            const double v = rng.uniform(0.0, 20.0);
            d.push_back(Tensor::scalar(v));
            shifted.push_back(Tensor::scalar(v + c));
            dv.push_back(v);
        }
        const std::size_t cls = rng.below(5);
        CHECK(std::fabs(loss_ce(d, cls).item() - loss_ce(shifted, cls).item()) <= 1e-12);

        std::vector<double> dv_shift = dv;
        for (double& v : dv_shift) v += c;
        CHECK(classify(dv) == classify(dv_shift));
    }
}

TEST_CASE("classify agrees with the argmax of the softmax head") {
    Rng rng(58);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> dv;
        std::vector<Tensor> d;
        for (int i = 0; i < 5; ++i) {
            const double v = rng.uniform(0.0, 10.0);
            dv.push_back(v);
            d.push_back(Tensor::scalar(-v));  // logits = -distance
        }
        Tensor probs = softmax(concat(d, 0), 0);
        std::size_t argmax = 0;
        for (std::size_t i = 1; i < probs.size(); ++i) {
            if (probs[i] > probs[argmax]) argmax = i;
        }
        CHECK(classify(dv) == argmax);
    }
}

TEST_CASE("head gradients pass the finite-difference check") {
    HeadConfig cfg{4, 4};
    Rng rng(59);
    HeadParams p = make_head_params(6, cfg, rng);
    Tensor q = random_feat(3, 6, rng);
    std::vector<Tensor> s0{random_feat(3, 6, rng)};
    std::vector<Tensor> s1{random_feat(3, 6, rng)};

    ParamRegistry reg;
    reg.add("psi.w", p.psi_w);
    reg.add("gamma.w", p.gamma_w);
    reg.add("lambda.w", p.lambda_w);
    auto report = finite_diff_check(reg, [&]() {
        std::vector<Tensor> d{distance(build_prototype(q, s0, p), q, p),
                              distance(build_prototype(q, s1, p), q, p)};
        return loss_ce(d, 0);
    });
    CHECK(report.pass);
}
