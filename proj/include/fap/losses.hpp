#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fap/tensor.hpp"

// Training objectives: natural cross-entropy, the KL/JS consistency terms,
// the cosine adversarial-aware factor, and their multiplicative/additive
// combinations plus the TeCoA and MSE/MAE ablation variants.

namespace fap {

enum class Consistency { TeCoA, KL, JS };
enum class Diversity { None, Cos, MSE, MAE };
enum class Combination { Multiplicative, Additive };

struct LossConfig {
    bool natural_term = true;
    Consistency consistency = Consistency::KL;
    Diversity diversity = Diversity::Cos;
    Combination combination = Combination::Multiplicative;
    double lambda = 1.5;
    double lambda2 = 1.5;           // additive mode weight for the diversity term
    bool kl_adv_first = false;      // sensitivity override: KL(adv || nat) instead of KL(nat || adv)

    void validate() const {
        if (lambda < 0) throw std::invalid_argument("loss config: lambda must be >= 0");
        if (combination == Combination::Multiplicative && diversity != Diversity::None &&
            diversity != Diversity::Cos)
            throw std::invalid_argument("loss config: multiplicative mode requires diversity in {none, cos}");
    }
};

inline std::string consistency_name(Consistency c) {
    switch (c) {
        case Consistency::TeCoA: return "TeCoA";
        case Consistency::KL: return "KL";
        default: return "JS";
    }
}

inline std::string diversity_name(Diversity d) {
    switch (d) {
        case Diversity::None: return "none";
        case Diversity::Cos: return "Cos";
        case Diversity::MSE: return "MSE";
        default: return "MAE";
    }
}

inline void to_json(nlohmann::json& j, const LossConfig& c) {
    j = {{"natural_term", c.natural_term},
         {"consistency", consistency_name(c.consistency)},
         {"diversity", diversity_name(c.diversity)},
         {"combination", c.combination == Combination::Multiplicative ? "multiplicative" : "additive"},
         {"lambda", c.lambda},
         {"lambda2", c.lambda2},
         {"kl_adv_first", c.kl_adv_first}};
}

inline void from_json(const nlohmann::json& j, LossConfig& c) {
    j.at("natural_term").get_to(c.natural_term);
    std::string s = j.at("consistency");
    c.consistency = s == "TeCoA" ? Consistency::TeCoA : (s == "KL" ? Consistency::KL : Consistency::JS);
    std::string d = j.at("diversity");
    c.diversity = d == "none" ? Diversity::None
                              : (d == "Cos" ? Diversity::Cos : (d == "MSE" ? Diversity::MSE : Diversity::MAE));
    c.combination = j.at("combination") == "multiplicative" ? Combination::Multiplicative : Combination::Additive;
    j.at("lambda").get_to(c.lambda);
    j.at("lambda2").get_to(c.lambda2);
    j.at("kl_adv_first").get_to(c.kl_adv_first);
}

// mean over batch of -log softmax(logits)[label]
inline Tensor ce_over_logits(const Tensor& logits, const std::vector<std::size_t>& labels) {
    if (logits.ndim() != 2 || logits.dim(0) == 0) throw std::invalid_argument("ce_over_logits: empty batch");
    if (labels.size() != logits.dim(0)) throw std::invalid_argument("ce_over_logits: label count mismatch");
    return neg(mean_all(take_per_row(log_softmax_lastdim(logits), labels)));
}

// mean over batch of KL(softmax(nat) || softmax(adv)); no stop-gradient
inline Tensor kl_consistency(const Tensor& nat_logits, const Tensor& adv_logits) {
    if (nat_logits.shape() != adv_logits.shape()) throw std::invalid_argument("kl_consistency: shape mismatch");
    std::size_t B = nat_logits.dim(0);
    Tensor p = softmax_lastdim(nat_logits);
    Tensor diff = sub(log_softmax_lastdim(nat_logits), log_softmax_lastdim(adv_logits));
    return scalar_mul(sum_all(mul(p, diff)), 1.0 / static_cast<double>(B));
}

// Jensen-Shannon: 0.5 KL(P||M) + 0.5 KL(Q||M), M the mixture
inline Tensor js_consistency(const Tensor& nat_logits, const Tensor& adv_logits) {
    if (nat_logits.shape() != adv_logits.shape()) throw std::invalid_argument("js_consistency: shape mismatch");
    std::size_t B = nat_logits.dim(0);
    Tensor p = softmax_lastdim(nat_logits);
    Tensor q = softmax_lastdim(adv_logits);
    Tensor m = scalar_mul(add(p, q), 0.5);
    Tensor log_m = log_(m);
    Tensor kl_pm = sum_all(mul(p, sub(log_softmax_lastdim(nat_logits), log_m)));
    Tensor kl_qm = sum_all(mul(q, sub(log_softmax_lastdim(adv_logits), log_m)));
    return scalar_mul(add(kl_pm, kl_qm), 0.5 / static_cast<double>(B));
}

// mean over batch of cos(z, z~) + 1 on unit-normalized features; range [0,2]
inline Tensor cos_diversity(const Tensor& nat_feats, const Tensor& adv_feats) {
    if (nat_feats.shape() != adv_feats.shape()) throw std::invalid_argument("cos_diversity: shape mismatch");
    std::size_t d = nat_feats.dim(nat_feats.ndim() - 1);
    for (std::size_t r = 0; r < nat_feats.size() / d; ++r) {
        double n1 = 0, n2 = 0;
        for (std::size_t j = 0; j < d; ++j) {
            n1 += nat_feats.values()[r * d + j] * nat_feats.values()[r * d + j];
            n2 += adv_feats.values()[r * d + j] * adv_feats.values()[r * d + j];
        }
        if (n1 < 1e-12 || n2 < 1e-12) throw std::invalid_argument("cos_diversity: zero-norm input row");
    }
    return scalar_add(mean_all(sum_lastdim(mul(nat_feats, adv_feats))), 1.0);
}

// mean squared / absolute feature difference
inline Tensor mse_diversity(const Tensor& nat_feats, const Tensor& adv_feats) {
    Tensor d = sub(nat_feats, adv_feats);
    return mean_all(mul(d, d));
}

inline Tensor mae_diversity(const Tensor& nat_feats, const Tensor& adv_feats) {
    Tensor d = sub(nat_feats, adv_feats);
    return mean_all(mul(sign(d), d));  // |d| with subgradient 0 at 0
}

struct LossBreakdown {
    Tensor total;
    double natural_ce = 0.0;
    double consistency_value = 0.0;
    double diversity_value = 0.0;
};

inline Tensor final_loss_consistency(const LossConfig& cfg, const Tensor& nat_logits, const Tensor& adv_logits,
                                     const std::vector<std::size_t>& labels) {
    switch (cfg.consistency) {
        case Consistency::TeCoA: return ce_over_logits(adv_logits, labels);
        case Consistency::KL:
            return cfg.kl_adv_first ? kl_consistency(adv_logits, nat_logits)
                                    : kl_consistency(nat_logits, adv_logits);
        default: return js_consistency(nat_logits, adv_logits);
    }
}

inline LossBreakdown final_loss(const Tensor& nat_logits, const Tensor& adv_logits, const Tensor& nat_feats,
                                const Tensor& adv_feats, const std::vector<std::size_t>& labels,
                                const LossConfig& cfg) {
    cfg.validate();
    LossBreakdown out;
    Tensor total = Tensor::scalar(0.0);
    if (cfg.natural_term) {
        Tensor nat = ce_over_logits(nat_logits, labels);
        out.natural_ce = nat.value();
        total = nat;
    }
    Tensor cons = final_loss_consistency(cfg, nat_logits, adv_logits, labels);
    out.consistency_value = cons.value();
    // TeCoA ignores the diversity term in every mode
    Diversity div = (cfg.consistency == Consistency::TeCoA) ? Diversity::None : cfg.diversity;
    if (cfg.combination == Combination::Multiplicative) {
        Tensor adv_term = cons;
        if (div == Diversity::Cos) {
            Tensor cos = cos_diversity(nat_feats, adv_feats);
            out.diversity_value = cos.value();
            adv_term = mul(cos, cons);
        }
        total = add(total, scalar_mul(adv_term, cfg.lambda));
    } else {
        total = add(total, scalar_mul(cons, cfg.lambda));
        if (div != Diversity::None) {
            Tensor d;
            if (div == Diversity::Cos) d = cos_diversity(nat_feats, adv_feats);
            else if (div == Diversity::MSE) d = mse_diversity(nat_feats, adv_feats);
            else d = mae_diversity(nat_feats, adv_feats);
            out.diversity_value = d.value();
            total = add(total, scalar_mul(d, cfg.lambda2));
        }
    }
    out.total = total;
    return out;
}

}  // namespace fap
