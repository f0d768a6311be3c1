#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fap/backbone.hpp"
#include "fap/checkpoint.hpp"
#include "fap/rng.hpp"
#include "fap/tensor.hpp"

// Learnable adaptation state for the five prompt architectures. Depending on
// the variant, one modality's tokens are stored and the other is derived
// through per-layer affine projections, both are independent, or one branch
// is absent entirely.

namespace fap {

enum class PromptVariant { AdvVP, AdvTP, AdvVLP, AdvMaPLe, FAP };

inline std::string variant_name(PromptVariant v) {
    switch (v) {
        case PromptVariant::AdvVP: return "AdvVP";
        case PromptVariant::AdvTP: return "AdvTP";
        case PromptVariant::AdvVLP: return "AdvVLP";
        case PromptVariant::AdvMaPLe: return "AdvMaPLe";
        default: return "FAP";
    }
}

inline PromptVariant variant_from_name(const std::string& s) {
    if (s == "AdvVP") return PromptVariant::AdvVP;
    if (s == "AdvTP") return PromptVariant::AdvTP;
    if (s == "AdvVLP") return PromptVariant::AdvVLP;
    if (s == "AdvMaPLe") return PromptVariant::AdvMaPLe;
    if (s == "FAP") return PromptVariant::FAP;
    throw std::invalid_argument("unknown prompt variant: " + s);
}

struct PromptConfig {
    std::size_t n_v = 2;
    std::size_t n_t = 2;
    std::size_t depth = 0;  // 0 -> variant default (round(0.75 * layers) for deep variants)
    std::uint64_t seed = 0;
    double init_std = 0.02;

    static std::size_t default_depth(std::size_t layers) {
        return static_cast<std::size_t>(std::llround(0.75 * static_cast<double>(layers)));
    }
};

struct PromptSet {
    PromptVariant variant = PromptVariant::FAP;
    std::size_t depth = 0, n_v = 0, n_t = 0, d_v = 0, d_t = 0;
    std::size_t image_size = 0, pad_width = 0;
    bool replace_template = false;  // AdvTP: context tokens stand in for the template words

    std::vector<Tensor> visual_tokens;  // stored source/independent visual tokens, per layer
    std::vector<Tensor> text_tokens;    // stored source/independent text tokens, per layer
    std::vector<Tensor> proj_w, proj_b; // per-layer affine maps between modalities
    Tensor pad;                         // AdvVP border values, flat

    bool has_visual() const { return variant != PromptVariant::AdvTP; }
    bool has_text() const { return variant != PromptVariant::AdvVP; }
    bool visual_is_derived() const { return variant == PromptVariant::AdvMaPLe; }
    bool text_is_derived() const { return variant == PromptVariant::FAP; }

    std::vector<Tensor> trainable() const {
        std::vector<Tensor> out;
        for (const auto& t : visual_tokens) out.push_back(t);
        for (const auto& t : text_tokens) out.push_back(t);
        for (const auto& t : proj_w) out.push_back(t);
        for (const auto& t : proj_b) out.push_back(t);
        if (pad.defined()) out.push_back(pad);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& t : trainable()) n += t.size();
        return n;
    }

    NamedTensors named_tensors() const {
        NamedTensors out;
        for (std::size_t l = 0; l < visual_tokens.size(); ++l)
            out.emplace_back("visual." + std::to_string(l), visual_tokens[l]);
        for (std::size_t l = 0; l < text_tokens.size(); ++l)
            out.emplace_back("text." + std::to_string(l), text_tokens[l]);
        for (std::size_t l = 0; l < proj_w.size(); ++l) {
            out.emplace_back("proj_w." + std::to_string(l), proj_w[l]);
            out.emplace_back("proj_b." + std::to_string(l), proj_b[l]);
        }
        if (pad.defined()) out.emplace_back("pad", pad);
        return out;
    }

    void save(const std::string& path, const nlohmann::json& extra_meta = {}) const {
        nlohmann::json meta = extra_meta;
        meta["variant"] = variant_name(variant);
        meta["depth"] = depth;
        meta["n_v"] = n_v;
        meta["n_t"] = n_t;
        meta["d_v"] = d_v;
        meta["d_t"] = d_t;
        meta["image_size"] = image_size;
        meta["pad_width"] = pad_width;
        save_checkpoint(path, "prompts", meta, named_tensors());
    }
};

inline std::size_t border_param_count(std::size_t image_size, std::size_t pad_width) {
    std::size_t inner = image_size - 2 * pad_width;
    return 3 * (image_size * image_size - inner * inner);
}

inline PromptSet init_prompts(PromptVariant variant, const Backbone& bb, PromptConfig cfg = {}) {
    PromptSet ps;
    ps.variant = variant;
    ps.d_v = bb.config.d_v;
    ps.d_t = bb.config.d_t;
    ps.image_size = bb.config.image_size;
    Rng rng(cfg.seed ^ 0x9a0b7ULL);
    const double s = cfg.init_std;

    std::size_t deep = cfg.depth ? cfg.depth : PromptConfig::default_depth(bb.config.image_layers);
    switch (variant) {
        case PromptVariant::AdvVP:
            ps.n_v = 5;
            ps.depth = 1;
            // 30-pixel pad at 224 scaled to this image size
            ps.pad_width = static_cast<std::size_t>(std::llround(30.0 / 224.0 * static_cast<double>(ps.image_size)));
            break;
        case PromptVariant::AdvTP:
            ps.n_t = 16;
            ps.depth = 1;
            ps.replace_template = true;
            break;
        default:
            ps.n_v = cfg.n_v;
            ps.n_t = cfg.n_t;
            ps.depth = deep;
            break;
    }
    if (ps.depth > bb.config.image_layers || ps.depth > bb.config.text_layers)
        throw std::invalid_argument("init_prompts: depth exceeds encoder layers");

    bool store_visual = ps.has_visual() && !ps.visual_is_derived();
    bool store_text = ps.has_text() && !ps.text_is_derived();
    for (std::size_t l = 0; l < ps.depth; ++l) {
        if (store_visual) ps.visual_tokens.push_back(Tensor::randn({ps.n_v, ps.d_v}, rng, s));
        if (store_text) ps.text_tokens.push_back(Tensor::randn({ps.n_t, ps.d_t}, rng, s));
    }
    if (ps.text_is_derived()) {
        ps.n_t = ps.n_v;
        for (std::size_t l = 0; l < ps.depth; ++l) {
            ps.proj_w.push_back(Tensor::zeros({ps.d_v, ps.d_t}));
            ps.proj_b.push_back(Tensor::zeros({ps.d_t}));
        }
    } else if (ps.visual_is_derived()) {
        ps.n_v = ps.n_t;
        for (std::size_t l = 0; l < ps.depth; ++l) {
            ps.proj_w.push_back(Tensor::zeros({ps.d_t, ps.d_v}));
            ps.proj_b.push_back(Tensor::zeros({ps.d_v}));
        }
    }
    if (variant == PromptVariant::AdvVP) {
        if (2 * ps.pad_width >= ps.image_size) throw std::invalid_argument("pad width too large");
        ps.pad = Tensor::zeros({border_param_count(ps.image_size, ps.pad_width)});
    }
    for (auto& t : ps.trainable()) {
        Tensor tt = t;
        tt.set_leaf(true);
    }
    return ps;
}

inline PromptSet load_prompts(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.manifest.at("kind") != "prompts") throw std::runtime_error("not a prompt checkpoint: " + path);
    const auto& meta = ck.manifest.at("meta");
    PromptSet ps;
    ps.variant = variant_from_name(meta.at("variant"));
    ps.depth = meta.at("depth");
    ps.n_v = meta.at("n_v");
    ps.n_t = meta.at("n_t");
    ps.d_v = meta.at("d_v");
    ps.d_t = meta.at("d_t");
    ps.image_size = meta.at("image_size");
    ps.pad_width = meta.at("pad_width");
    ps.replace_template = (ps.variant == PromptVariant::AdvTP);
    bool store_visual = ps.has_visual() && !ps.visual_is_derived();
    bool store_text = ps.has_text() && !ps.text_is_derived();
    for (std::size_t l = 0; l < ps.depth; ++l) {
        if (store_visual) ps.visual_tokens.push_back(ck.at("visual." + std::to_string(l)).detach());
        if (store_text) ps.text_tokens.push_back(ck.at("text." + std::to_string(l)).detach());
    }
    if (ps.text_is_derived() || ps.visual_is_derived()) {
        for (std::size_t l = 0; l < ps.depth; ++l) {
            ps.proj_w.push_back(ck.at("proj_w." + std::to_string(l)).detach());
            ps.proj_b.push_back(ck.at("proj_b." + std::to_string(l)).detach());
        }
    }
    if (ps.variant == PromptVariant::AdvVP) ps.pad = ck.at("pad").detach();
    for (auto& t : ps.trainable()) {
        Tensor tt = t;
        tt.set_leaf(true);
    }
    return ps;
}

struct MaterializedPrompts {
    PromptStack visual, text;
};

// Derived branches are recomputed through the projections on every call so
// gradients reach both the source tokens and the maps.
inline MaterializedPrompts materialize(const PromptSet& ps) {
    MaterializedPrompts out;
    for (std::size_t l = 0; l < ps.depth; ++l) {
        if (ps.has_visual()) {
            if (ps.visual_is_derived())
                out.visual.push_back(add_bias(matmul(ps.text_tokens[l], ps.proj_w[l]), ps.proj_b[l]));
            else
                out.visual.push_back(ps.visual_tokens[l]);
        }
        if (ps.has_text()) {
            if (ps.text_is_derived())
                out.text.push_back(add_bias(matmul(ps.visual_tokens[l], ps.proj_w[l]), ps.proj_b[l]));
            else
                out.text.push_back(ps.text_tokens[l]);
        }
    }
    return out;
}

// Border pixels replaced by clamp(pad, 0, 1); interior untouched. Gradients
// reach only the border parameters (clamp subgradient 0 outside (0,1)).
inline Tensor apply_pad_prompt(const Tensor& pixels, const Tensor& pad, std::size_t pad_width) {
    if (pixels.ndim() != 4 || pixels.dim(1) != 3) throw std::invalid_argument("apply_pad_prompt: need (B,3,S,S)");
    std::size_t B = pixels.dim(0), S = pixels.dim(2);
    if (2 * pad_width >= S) throw std::invalid_argument("apply_pad_prompt: pad width >= image_size/2");
    if (pad.size() != border_param_count(S, pad_width))
        throw std::invalid_argument("apply_pad_prompt: pad parameter count mismatch");
    // border offsets in fixed (c,y,x) order
    std::vector<std::size_t> border;
    border.reserve(pad.size());
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < S; ++y)
            for (std::size_t x = 0; x < S; ++x)
                if (y < pad_width || y >= S - pad_width || x < pad_width || x >= S - pad_width)
                    border.push_back(c * S * S + y * S + x);
    auto r = detail::make_result(pixels.shape(), {pixels.node(), pad.node()});
    std::size_t px = 3 * S * S;
    r->v = pixels.values();
    const auto& pv = pad.values();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < border.size(); ++k)
            r->v[b * px + border[k]] = std::clamp(pv[k], 0.0, 1.0);
    if (r->needs_grad) {
        auto pxn = pixels.node(), padn = pad.node();
        r->backfn = [pxn, padn, border, B, px](Node& self) {
            if (padn->needs_grad) {
                double* g = padn->grad_data();
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t k = 0; k < border.size(); ++k)
                        if (padn->v[k] > 0.0 && padn->v[k] < 1.0) g[k] += self.g[b * px + border[k]];
            }
            if (pxn->needs_grad) {
                std::vector<bool> is_border(px, false);
                for (std::size_t o : border) is_border[o] = true;
                double* g = pxn->grad_data();
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t o = 0; o < px; ++o)
                        if (!is_border[o]) g[b * px + o] += self.g[b * px + o];
            }
        };
    }
    return Tensor(r);
}

}  // namespace fap
