#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fap/attacks.hpp"
#include "fap/backbone.hpp"
#include "fap/dataio.hpp"
#include "oracles.hpp"

using namespace fap;

namespace {

// linear two-class model: logits = x W, features = unit rows
ModelFn linear_model(const std::vector<double>& w, std::size_t d, std::size_t k) {
    Tensor W = Tensor::from_data({d, k}, w);
    return [W, d](const Tensor& px) {
        Tensor flat = reshape(px, {px.dim(0), d});
        ModelOutput out;
        out.logits = matmul(flat, W);
        out.feats = l2_normalize_lastdim(scalar_add(flat, 3.0));
        return out;
    };
}

bool feasible(const Tensor& adv, const Tensor& x, double eps) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        double d = std::abs(adv.values()[i] - x.values()[i]);
        if (d > eps + 1e-12) return false;
        if (adv.values()[i] < 0.0 || adv.values()[i] > 1.0) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("projection clamps into both constraint sets") {
    double eps = 0.1;
    Tensor x = Tensor::from_data({1, 4}, {0.5, 0.5, 0.05, 0.95});
    Tensor far = Tensor::from_data({1, 4}, {0.5 + 10 * eps, 0.5, 0.05, 0.95 + 10 * eps});
    Tensor pr = project(far, x, eps);
    CHECK(pr.values()[0] == Catch::Approx(0.6).margin(1e-15));   // x + eps
    CHECK(pr.values()[3] == Catch::Approx(1.0).margin(1e-15));   // pixel ceiling binds first
    Tensor inside = Tensor::from_data({1, 4}, {0.55, 0.45, 0.05, 0.95});
    CHECK(project(inside, x, eps).values() == inside.values());
    Rng rng(21);
    for (int t = 0; t < 200; ++t) {
        Tensor xr = Tensor::zeros({1, 6});
        Tensor pert = Tensor::zeros({1, 6});
        for (std::size_t i = 0; i < 6; ++i) {
            xr.values()[i] = rng.u01();
            pert.values()[i] = xr.values()[i] + rng.uniform(-0.5, 0.5);
        }
        double e = rng.uniform(0.0, 0.2);
        CHECK(feasible(project(pert, xr, e), xr, e));
    }
}

TEST_CASE("degenerate attacks return the input bit-exactly") {
    ModelFn model = linear_model({1, -1, 2, -2, 0.5, 1.5, -0.5, 0.3}, 4, 2);
    Tensor x = Tensor::from_data({1, 2, 1, 2}, {0.2, 0.8, 0.5, 0.4});
    AttackConfig cfg;
    cfg.objective = AttackObjective::CE;
    cfg.eps = 0.0;
    CHECK(pgd(x, {0}, model, cfg).values() == x.values());
    cfg.eps = 0.1;
    cfg.steps = 0;
    CHECK(pgd(x, {0}, model, cfg).values() == x.values());
    cfg.steps = 1;
    cfg.alpha = 0.0;
    CHECK_THROWS(pgd(x, {0}, model, cfg));
    Tensor bad = Tensor::from_data({1, 2, 1, 2}, {0.2, 1.3, 0.5, 0.4});
    cfg.alpha = 0.1;
    CHECK_THROWS(pgd(bad, {0}, model, cfg));
}

TEST_CASE("one-step CE attack follows the hand-derived sign pattern") {
    // two-class linear logits; grad of CE w.r.t. x is p1 (w2 - w1), so the
    // ascent direction is the sign of (w2 - w1) coordinatewise
    std::vector<double> w = {// column 0 = w1, column 1 = w2, rows are pixels
                             0.0, 1.0,    // w2-w1 = +1
                             0.5, -0.5,   // -1
                             -1.0, 0.0,   // +1
                             2.0, 1.0};   // -1
    ModelFn model = linear_model(w, 4, 2);
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {0.5, 0.5, 0.5, 0.5});
    AttackConfig cfg;
    cfg.objective = AttackObjective::CE;
    cfg.eps = 0.1;
    cfg.alpha = 0.1;
    cfg.steps = 1;
    Tensor adv = pgd(x, {0}, model, cfg);
    CHECK(adv.values()[0] == Catch::Approx(0.6).margin(1e-12));
    CHECK(adv.values()[1] == Catch::Approx(0.4).margin(1e-12));
    CHECK(adv.values()[2] == Catch::Approx(0.6).margin(1e-12));
    CHECK(adv.values()[3] == Catch::Approx(0.4).margin(1e-12));
}

TEST_CASE("feasibility holds across randomized invocations and objectives") {
    Rng rng(23);
    for (AttackObjective obj : {AttackObjective::CE, AttackObjective::KL, AttackObjective::CosKL}) {
        for (int t = 0; t < 30; ++t) {
            std::vector<double> w(4 * 3);
            for (auto& v : w) v = rng.normal(0, 1);
            ModelFn model = linear_model(w, 4, 3);
            Tensor x = Tensor::zeros({1, 1, 2, 2});
            for (auto& v : x.values()) v = rng.u01();
            AttackConfig cfg;
            cfg.objective = obj;
            cfg.eps = rng.uniform(0.0, 0.3);
            cfg.alpha = rng.uniform(0.01, 0.3);
            cfg.steps = 1 + rng.below(4);
            cfg.random_start = t % 2 == 0;
            cfg.seed = t;
            Tensor adv = pgd(x, {rng.below(3)}, model, cfg);
            REQUIRE(feasible(adv, x, cfg.eps));
        }
    }
}

TEST_CASE("attack objectives differentiate w.r.t. pixels") {
    Rng rng(24);
    std::vector<double> w(4 * 3);
    for (auto& v : w) v = rng.normal(0, 1);
    ModelFn model = linear_model(w, 4, 3);
    Tensor nat = Tensor::from_data({1, 1, 2, 2}, {0.4, 0.6, 0.3, 0.7});
    ModelOutput nat_out = model(nat);
    Tensor nat_logits = nat_out.logits.detach();
    Tensor nat_feats = nat_out.feats.detach();
    Tensor px = Tensor::from_data({1, 1, 2, 2}, {0.42, 0.58, 0.33, 0.69});
    px.set_leaf();
    std::vector<Tensor> leaves = {px};
    std::vector<std::size_t> y = {1};
    auto build_ce = [&]() { return ce_over_logits(model(px).logits, y); };
    auto build_kl = [&]() { return kl_consistency(nat_logits, model(px).logits); };
    auto build_coskl = [&]() {
        ModelOutput o = model(px);
        return mul(cos_diversity(nat_feats, o.feats), kl_consistency(nat_logits, o.logits));
    };
    CHECK(oracles::check_gradients(leaves, build_ce, rng, 4));
    CHECK(oracles::check_gradients(leaves, build_kl, rng, 4));
    CHECK(oracles::check_gradients(leaves, build_coskl, rng, 4));
}

TEST_CASE("non-finite attack gradients abort with diagnostics") {
    ModelFn model = [](const Tensor& px) {
        Tensor flat = reshape(px, {px.dim(0), 2});
        ModelOutput out;
        out.logits = log_(flat);  // infinite gradient at 0
        out.feats = l2_normalize_lastdim(scalar_add(flat, 1.0));
        return out;
    };
    Tensor x = Tensor::from_data({1, 1, 1, 2}, {0.0, 0.5});
    AttackConfig cfg;
    cfg.objective = AttackObjective::CE;
    cfg.eps = 0.1;
    cfg.steps = 1;
    CHECK_THROWS_WITH(pgd(x, {0}, model, cfg), Catch::Matchers::ContainsSubstring("non-finite"));
}

TEST_CASE("corner oracle basics") {
    ModelFn model = linear_model({1.0, -1.0}, 1, 2);
    Tensor x = Tensor::from_data({1, 1, 1, 1}, {0.5});
    auto res = exhaustive_corner_attack(x, {0}, model, 0.2);
    // label 0 prefers large x, so the attack moves down
    CHECK(res.adversarial.values()[0] == Catch::Approx(0.3).margin(1e-12));
    // a model ignoring its input succeeds exactly when the clean prediction is wrong
    ModelFn constant = [](const Tensor& px) {
        ModelOutput out;
        out.logits = Tensor::from_data({1, 2}, {1.0, 0.0});
        out.feats = Tensor::from_data({1, 2}, {1.0, 0.0});
        (void)px;
        return out;
    };
    CHECK_FALSE(exhaustive_corner_attack(x, {0}, constant, 0.2).success);
    CHECK(exhaustive_corner_attack(x, {1}, constant, 0.2).success);
    CHECK_THROWS(exhaustive_corner_attack(Tensor::zeros({1, 1, 4, 4}), {0}, constant, 0.1));
}

TEST_CASE("single-step sign attack never beats exhaustive corner search") {
    Rng rng(25);
    std::size_t fgsm_succ = 0, corner_succ = 0;
    for (int t = 0; t < 50; ++t) {
        std::vector<double> w(4 * 3);
        for (auto& v : w) v = rng.normal(0, 2);
        ModelFn model = linear_model(w, 4, 3);
        Tensor x = Tensor::zeros({1, 1, 2, 2});
        for (auto& v : x.values()) v = rng.uniform(0.2, 0.8);
        std::size_t label = rng.below(3);
        double eps = 0.15;
        AttackConfig fgsm;
        fgsm.objective = AttackObjective::CE;
        fgsm.eps = eps;
        fgsm.alpha = eps;
        fgsm.steps = 1;
        Tensor adv = pgd(x, {label}, model, fgsm);
        ModelOutput out = model(adv);
        std::size_t arg = 0;
        for (std::size_t k = 1; k < 3; ++k)
            if (out.logits.values()[k] > out.logits.values()[arg]) arg = k;
        bool fg = arg != label;
        bool ex = exhaustive_corner_attack(x, {label}, model, eps).success;
        if (fg) ++fgsm_succ;
        if (ex) ++corner_succ;
        REQUIRE((!fg || ex));  // single-step success implies oracle success
    }
    CHECK(corner_succ >= fgsm_succ);
    CHECK(corner_succ > 0);  // the comparison is not vacuous
}

TEST_CASE("iterative attack raises the scoring loss on a real encoder") {
    BackboneConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.image_layers = 2;
    cfg.text_layers = 2;
    cfg.heads = 2;
    cfg.d_v = 16;
    cfg.d_t = 16;
    cfg.d_joint = 16;
    cfg.context_length = 12;
    cfg.vocab_size = Tokenizer::shapes_vocab().vocab_size();
    Rng rng(26);
    Backbone bb = Backbone::init(cfg, rng);
    bb.set_trainable(false);

    SyntheticSpec spec;
    spec.num_classes = 4;
    spec.image_size = 8;
    spec.scale_min = 2.0;
    spec.scale_max = 3.5;
    spec.train_per_class = 4;
    spec.test_per_class = 4;
    spec.seed = 5;
    Dataset ds = generate(spec);
    Tensor text = encode_text(bb, ds.captions).detach();
    ModelFn model = [&](const Tensor& px) {
        ModelOutput out;
        out.feats = encode_image(bb, px);
        out.logits = similarity_logits(out.feats, text, bb.config.temperature);
        return out;
    };
    std::vector<std::size_t> idx(16);
    for (std::size_t i = 0; i < 16; ++i) idx[i] = i;
    Tensor images = batch_images(ds.test.images, idx, 8);
    std::vector<std::size_t> labels(ds.test.labels.begin(), ds.test.labels.begin() + 16);
    double nat_ce = ce_over_logits(model(images).logits.detach(), labels).value();
    AttackConfig atk;
    atk.objective = AttackObjective::CE;
    atk.eps = 4.0 / 255.0;
    atk.alpha = 4.0 / 255.0;
    atk.steps = 2;
    Tensor adv = pgd(images, labels, model, atk);
    double adv_ce = ce_over_logits(model(adv).logits.detach(), labels).value();
    CHECK(adv_ce > nat_ce);
    CHECK(feasible(adv, images, atk.eps));
}
