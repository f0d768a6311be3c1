#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fap/losses.hpp"
#include "oracles.hpp"

using namespace fap;

namespace {

Tensor logits2(double a, double b) { return Tensor::from_data({1, 2}, {a, b}); }

}  // namespace

TEST_CASE("cross entropy closed forms") {
    CHECK(ce_over_logits(logits2(0, 0), {0}).value() == Catch::Approx(std::log(2.0)).margin(1e-12));
    CHECK(ce_over_logits(logits2(100, -100), {0}).value() < 1e-80);
    Rng rng(11);
    Tensor l = Tensor::randn({5, 4}, rng, 2.0);
    std::vector<std::size_t> y = {1, 3, 0, 2, 2};
    double expect = 0.0;
    for (std::size_t r = 0; r < 5; ++r) {
        std::vector<double> row(l.values().begin() + r * 4, l.values().begin() + (r + 1) * 4);
        expect += oracles::ce_logsumexp(row, y[r]);
    }
    CHECK(ce_over_logits(l, y).value() == Catch::Approx(expect / 5.0).margin(1e-12));
    CHECK_THROWS(ce_over_logits(Tensor::zeros({0, 3}), {}));
    CHECK_THROWS(ce_over_logits(Tensor::zeros({2, 3}), {0}));
}

TEST_CASE("divergence closed forms and bounds") {
    CHECK(kl_consistency(logits2(0.7, -0.3), logits2(0.7, -0.3)).value() == Catch::Approx(0.0).margin(1e-14));
    double e = std::exp(1.0);
    CHECK(kl_consistency(logits2(1, 0), logits2(0, 1)).value() ==
          Catch::Approx((e - 1.0) / (e + 1.0)).margin(1e-9));
    Rng rng(12);
    for (int t = 0; t < 100; ++t) {
        Tensor a = Tensor::randn({2, 5}, rng, 3.0);
        Tensor b = Tensor::randn({2, 5}, rng, 3.0);
        CHECK(kl_consistency(a, b).value() >= -1e-12);
        double js = js_consistency(a, b).value();
        CHECK(js >= -1e-12);
        CHECK(js <= std::log(2.0) + 1e-12);
    }
    CHECK(js_consistency(logits2(2, -1), logits2(2, -1)).value() == Catch::Approx(0.0).margin(1e-14));
}

TEST_CASE("logit shift invariance") {
    Rng rng(13);
    Tensor a = Tensor::randn({3, 4}, rng);
    Tensor b = Tensor::randn({3, 4}, rng);
    std::vector<std::size_t> y = {0, 1, 2};
    double ce0 = ce_over_logits(a, y).value();
    double kl0 = kl_consistency(a, b).value();
    Tensor as = scalar_add(a, 37.5), bs = scalar_add(b, -12.25);
    CHECK(ce_over_logits(as, y).value() == Catch::Approx(ce0).margin(1e-10));
    CHECK(kl_consistency(as, bs).value() == Catch::Approx(kl0).margin(1e-10));
}

TEST_CASE("feature separation terms") {
    Tensor z = Tensor::from_data({1, 2}, {1.0, 0.0});
    CHECK(cos_diversity(z, z).value() == Catch::Approx(2.0).margin(1e-14));
    CHECK(cos_diversity(z, Tensor::from_data({1, 2}, {0.0, 1.0})).value() == Catch::Approx(1.0).margin(1e-14));
    CHECK(cos_diversity(z, Tensor::from_data({1, 2}, {-1.0, 0.0})).value() == Catch::Approx(0.0).margin(1e-14));
    CHECK_THROWS(cos_diversity(z, Tensor::zeros({1, 2})));
    Tensor a = Tensor::from_data({1, 3}, {1.0, -2.0, 0.5});
    Tensor b = Tensor::from_data({1, 3}, {0.0, 1.0, 0.5});
    CHECK(mse_diversity(a, b).value() == Catch::Approx((1.0 + 9.0 + 0.0) / 3.0).margin(1e-14));
    CHECK(mae_diversity(a, b).value() == Catch::Approx((1.0 + 3.0 + 0.0) / 3.0).margin(1e-14));
}

TEST_CASE("combined objective reductions") {
    Rng rng(14);
    Tensor nat_l = Tensor::randn({4, 3}, rng);
    Tensor adv_l = Tensor::randn({4, 3}, rng);
    Tensor nat_f = l2_normalize_lastdim(Tensor::randn({4, 6}, rng)).detach();
    Tensor adv_f = l2_normalize_lastdim(Tensor::randn({4, 6}, rng)).detach();
    std::vector<std::size_t> y = {0, 1, 2, 0};

    SECTION("lambda = 0 reduces to natural cross entropy exactly") {
        LossConfig cfg;
        cfg.lambda = 0.0;
        auto lb = final_loss(nat_l, adv_l, nat_f, adv_f, y, cfg);
        CHECK(lb.total.value() == ce_over_logits(nat_l, y).value());
    }
    SECTION("identical adversarial branch collapses the consistency term") {
        LossConfig cfg;
        auto lb = final_loss(nat_l, nat_l, nat_f, nat_f, y, cfg);
        CHECK(lb.consistency_value == Catch::Approx(0.0).margin(1e-14));
        CHECK(lb.total.value() == Catch::Approx(ce_over_logits(nat_l, y).value()).margin(1e-12));
    }
    SECTION("multiplicative composition of the closed-form pieces") {
        double ce = ce_over_logits(logits2(0, 0), {0}).value();
        double kl = kl_consistency(logits2(1, 0), logits2(0, 1)).value();
        Tensor z = Tensor::from_data({1, 2}, {1.0, 0.0});
        double cv = cos_diversity(z, Tensor::from_data({1, 2}, {0.0, 1.0})).value();
        CHECK(ce + 1.5 * cv * kl == Catch::Approx(1.386323).margin(1e-5));
        // and final_loss reproduces the same arithmetic on arbitrary inputs
        LossConfig cfg;
        auto lb = final_loss(nat_l, adv_l, nat_f, adv_f, y, cfg);
        CHECK(lb.total.value() ==
              Catch::Approx(lb.natural_ce + cfg.lambda * lb.diversity_value * lb.consistency_value)
                  .margin(1e-12));
    }
    SECTION("additive composition is the weighted sum") {
        LossConfig cfg;
        cfg.combination = Combination::Additive;
        cfg.diversity = Diversity::MSE;
        cfg.lambda2 = 0.25;
        auto lb = final_loss(nat_l, adv_l, nat_f, adv_f, y, cfg);
        CHECK(lb.total.value() ==
              Catch::Approx(lb.natural_ce + cfg.lambda * lb.consistency_value + 0.25 * lb.diversity_value)
                  .margin(1e-12));
    }
    SECTION("attack-target mode scores only the adversarial branch") {
        LossConfig cfg;
        cfg.consistency = Consistency::TeCoA;
        cfg.natural_term = false;
        cfg.lambda = 1.0;
        auto lb = final_loss(nat_l, adv_l, nat_f, adv_f, y, cfg);
        CHECK(lb.total.value() == Catch::Approx(ce_over_logits(adv_l, y).value()).margin(1e-12));
        CHECK(lb.diversity_value == 0.0);
    }
    SECTION("invalid multiplicative pairing is rejected") {
        LossConfig cfg;
        cfg.diversity = Diversity::MSE;
        CHECK_THROWS(final_loss(nat_l, adv_l, nat_f, adv_f, y, cfg));
    }
    SECTION("lower feature alignment lowers the multiplicative objective") {
        LossConfig cfg;
        auto aligned = final_loss(nat_l, adv_l, nat_f, nat_f, y, cfg);
        Tensor flipped = scalar_mul(nat_f, -1.0).detach();
        auto opposed = final_loss(nat_l, adv_l, nat_f, flipped, y, cfg);
        CHECK(opposed.total.value() < aligned.total.value());
    }
}

TEST_CASE("gradients of every objective configuration") {
    Rng rng(15);
    Tensor nat_l = Tensor::randn({3, 4}, rng);
    Tensor adv_l = Tensor::randn({3, 4}, rng);
    Tensor nat_f = Tensor::randn({3, 5}, rng);
    Tensor adv_f = Tensor::randn({3, 5}, rng);
    std::vector<std::size_t> y = {2, 0, 3};
    std::vector<Tensor> leaves = {nat_l, adv_l, nat_f, adv_f};
    for (auto& l : leaves) l.set_leaf();

    struct Row {
        Consistency c;
        Diversity d;
        Combination m;
    };
    std::vector<Row> rows = {
        {Consistency::TeCoA, Diversity::None, Combination::Multiplicative},
        {Consistency::KL, Diversity::None, Combination::Multiplicative},
        {Consistency::KL, Diversity::Cos, Combination::Multiplicative},
        {Consistency::KL, Diversity::Cos, Combination::Additive},
        {Consistency::KL, Diversity::MSE, Combination::Additive},
        {Consistency::KL, Diversity::MAE, Combination::Additive},
        {Consistency::JS, Diversity::Cos, Combination::Multiplicative},
        {Consistency::JS, Diversity::MSE, Combination::Additive},
    };
    for (const auto& row : rows) {
        LossConfig cfg;
        cfg.consistency = row.c;
        cfg.diversity = row.d;
        cfg.combination = row.m;
        INFO(consistency_name(row.c) << "/" << diversity_name(row.d));
        auto build = [&]() { return final_loss(nat_l, adv_l, nat_f, adv_f, y, cfg).total; };
        CHECK(oracles::check_gradients(leaves, build, rng, 4));
    }
}
