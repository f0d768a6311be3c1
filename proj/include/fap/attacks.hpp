#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fap/losses.hpp"
#include "fap/rng.hpp"
#include "fap/tensor.hpp"

// Inner maximization: iterative sign-gradient ascent on an attack objective,
// projected back into the l-infinity ball around x intersected with [0,1].

namespace fap {

enum class AttackObjective { KL, CE, CosKL };

inline std::string objective_name(AttackObjective o) {
    switch (o) {
        case AttackObjective::KL: return "KL";
        case AttackObjective::CE: return "CE";
        default: return "CosKL";
    }
}

inline AttackObjective objective_from_name(const std::string& s) {
    if (s == "KL") return AttackObjective::KL;
    if (s == "CE") return AttackObjective::CE;
    if (s == "CosKL") return AttackObjective::CosKL;
    throw std::invalid_argument("unknown attack objective: " + s);
}

struct AttackConfig {
    double eps = 1.0 / 255.0;
    double alpha = 1.0 / 255.0;
    std::size_t steps = 2;
    AttackObjective objective = AttackObjective::KL;
    bool random_start = false;
    std::uint64_t seed = 0;  // used only when random_start is on

    void validate() const {
        if (eps < 0) throw std::invalid_argument("attack config: eps must be >= 0");
        if (steps > 0 && alpha <= 0) throw std::invalid_argument("attack config: alpha must be > 0");
    }

    // step count fixed by the protocol; step size derived from the radius
    static AttackConfig test_time(double eps, std::size_t steps = 20) {
        AttackConfig c;
        c.eps = eps;
        c.alpha = std::max(eps / 4.0, 1.0 / 255.0);
        c.steps = steps;
        c.objective = AttackObjective::CE;
        return c;
    }
};

inline void to_json(nlohmann::json& j, const AttackConfig& c) {
    j = {{"eps", c.eps},           {"alpha", c.alpha}, {"steps", c.steps},
         {"objective", objective_name(c.objective)},   {"random_start", c.random_start},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, AttackConfig& c) {
    j.at("eps").get_to(c.eps);
    j.at("alpha").get_to(c.alpha);
    j.at("steps").get_to(c.steps);
    c.objective = objective_from_name(j.at("objective"));
    j.at("random_start").get_to(c.random_start);
    j.at("seed").get_to(c.seed);
}

// Forward pass of the adapted model on a pixel tensor: class logits plus the
// unit image features used by the feature-separation attack objective.
struct ModelOutput {
    Tensor logits;
    Tensor feats;
};
using ModelFn = std::function<ModelOutput(const Tensor& pixels)>;

// elementwise clamp into [x - eps, x + eps], then into [0,1]; value-level
inline void project_values(std::vector<double>& xt, const std::vector<double>& x, double eps) {
    for (std::size_t i = 0; i < xt.size(); ++i)
        xt[i] = std::clamp(std::clamp(xt[i], x[i] - eps, x[i] + eps), 0.0, 1.0);
}

inline Tensor project(const Tensor& xt, const Tensor& x, double eps) {
    if (xt.shape() != x.shape()) throw std::invalid_argument("project: shape mismatch");
    Tensor out = Tensor::from_data(xt.shape(), xt.values());
    project_values(out.values(), x.values(), eps);
    return out;
}

// PGD: x~ <- project(x~ + alpha * sign(grad L), x, eps). Natural logits and
// features for the KL-family objectives come from x once and stay fixed
// across steps. Returns a constant tensor (no trace attached).
inline Tensor pgd(const Tensor& x, const std::vector<std::size_t>& labels, const ModelFn& model,
                  const AttackConfig& cfg) {
    cfg.validate();
    for (double v : x.values())
        if (v < 0.0 || v > 1.0) throw std::invalid_argument("pgd: pixels must lie in [0,1]");

    Tensor nat_logits, nat_feats;
    if (cfg.objective != AttackObjective::CE) {
        ModelOutput nat = model(Tensor::from_data(x.shape(), x.values()));
        nat_logits = nat.logits.detach();
        nat_feats = nat.feats.detach();
    }

    if (cfg.eps == 0.0 || cfg.steps == 0) return Tensor::from_data(x.shape(), x.values());

    Tensor xt = Tensor::from_data(x.shape(), x.values());
    if (cfg.random_start) {
        Rng rng(cfg.seed ^ 0xadf0ULL);
        for (auto& v : xt.values()) v += rng.uniform(-cfg.eps, cfg.eps);
        project_values(xt.values(), x.values(), cfg.eps);
    }

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Tensor leaf = Tensor::from_data(x.shape(), xt.values());
        leaf.set_leaf();
        ModelOutput out = model(leaf);
        Tensor loss;
        switch (cfg.objective) {
            case AttackObjective::CE: loss = ce_over_logits(out.logits, labels); break;
            case AttackObjective::KL: loss = kl_consistency(nat_logits, out.logits); break;
            default: loss = mul(cos_diversity(nat_feats, out.feats), kl_consistency(nat_logits, out.logits));
        }
        backward(loss);
        std::vector<double> g = leaf.grad();
        for (double v : g)
            if (!std::isfinite(v))
                throw std::runtime_error("pgd: non-finite gradient at step " + std::to_string(step) +
                                         " (objective " + objective_name(cfg.objective) + ")");
        for (std::size_t i = 0; i < g.size(); ++i) {
            double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
            xt.values()[i] += cfg.alpha * s;
        }
        project_values(xt.values(), x.values(), cfg.eps);
    }
    return xt;
}

struct CornerAttackResult {
    Tensor adversarial;    // the corner maximizing CE
    bool success = false;  // some corner causes a misclassification
    double best_ce = 0.0;
};

// Evaluates all 2^d sign corners x + eps*s clamped to [0,1]; returns the one
// maximizing CE and whether any corner flips a prediction. Verification
// oracle for tiny inputs only.
inline CornerAttackResult exhaustive_corner_attack(const Tensor& x, const std::vector<std::size_t>& labels,
                                                   const ModelFn& model, double eps) {
    std::size_t d = x.size();
    if (d > 12) throw std::invalid_argument("exhaustive_corner_attack: more than 12 pixels");
    CornerAttackResult best;
    best.best_ce = -1.0;
    for (std::uint64_t mask = 0; mask < (1ULL << d); ++mask) {
        Tensor cand = Tensor::from_data(x.shape(), x.values());
        for (std::size_t i = 0; i < d; ++i)
            cand.values()[i] = std::clamp(cand.values()[i] + ((mask >> i) & 1 ? eps : -eps), 0.0, 1.0);
        ModelOutput out = model(cand);
        double ce = ce_over_logits(out.logits, labels).value();
        if (ce > best.best_ce) {
            best.best_ce = ce;
            best.adversarial = cand;
        }
        std::size_t K = out.logits.dim(1), B = out.logits.dim(0);
        for (std::size_t b = 0; b < B && !best.success; ++b) {
            std::size_t arg = 0;
            for (std::size_t k = 1; k < K; ++k)
                if (out.logits.values()[b * K + k] > out.logits.values()[b * K + arg]) arg = k;
            best.success = arg != labels[b];
        }
    }
    return best;
}

}  // namespace fap
