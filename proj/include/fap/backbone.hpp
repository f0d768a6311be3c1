#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "fap/checkpoint.hpp"
#include "fap/dataio.hpp"
#include "fap/rng.hpp"
#include "fap/tensor.hpp"
#include "fap/tokenizer.hpp"

// Miniature frozen dual encoder: a patch-based image transformer and a
// token-based text transformer projected into a shared joint space and
// compared by cosine similarity at a fixed temperature.

namespace fap {

struct BackboneConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t image_layers = 6;
    std::size_t text_layers = 6;
    std::size_t heads = 4;
    std::size_t d_v = 64;
    std::size_t d_t = 64;
    std::size_t d_joint = 64;
    std::size_t context_length = 24;
    std::size_t vocab_size = 0;  // filled from the tokenizer
    double temperature = 0.07;   // frozen

    void validate() const {
        if (image_size % patch_size != 0) throw std::invalid_argument("image_size must be divisible by patch_size");
        if (d_v % heads != 0 || d_t % heads != 0) throw std::invalid_argument("d_v/d_t must be divisible by heads");
        if (vocab_size == 0) throw std::invalid_argument("vocab_size unset");
    }

    std::size_t patches() const { return (image_size / patch_size) * (image_size / patch_size); }
};

inline void to_json(nlohmann::json& j, const BackboneConfig& c) {
    j = {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"image_layers", c.image_layers},
         {"text_layers", c.text_layers}, {"heads", c.heads}, {"d_v", c.d_v}, {"d_t", c.d_t},
         {"d_joint", c.d_joint}, {"context_length", c.context_length}, {"vocab_size", c.vocab_size},
         {"temperature", c.temperature}};
}

inline void from_json(const nlohmann::json& j, BackboneConfig& c) {
    j.at("image_size").get_to(c.image_size);
    j.at("patch_size").get_to(c.patch_size);
    j.at("image_layers").get_to(c.image_layers);
    j.at("text_layers").get_to(c.text_layers);
    j.at("heads").get_to(c.heads);
    j.at("d_v").get_to(c.d_v);
    j.at("d_t").get_to(c.d_t);
    j.at("d_joint").get_to(c.d_joint);
    j.at("context_length").get_to(c.context_length);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("temperature").get_to(c.temperature);
}

struct BlockParams {
    Tensor ln1_g, ln1_b, w_qkv, b_qkv, w_out, b_out;
    Tensor ln2_g, ln2_b, w_fc1, b_fc1, w_fc2, b_fc2;
};

struct Backbone {
    BackboneConfig config;
    Tensor patch_w, patch_b;       // (3*P*P, d_v), (d_v)
    Tensor cls_token;              // (1, d_v)
    Tensor pos_image;              // (1+M, d_v), cls + patches; prompts carry no position
    Tensor pos_text;               // (context_length, d_t)
    Tensor token_table;            // (V, d_t)
    std::vector<BlockParams> image_blocks, text_blocks;
    Tensor ln_pre_img_g, ln_pre_img_b;  // token norm after patch embedding
    Tensor ln_final_img_g, ln_final_img_b, ln_final_txt_g, ln_final_txt_b;
    Tensor proj_image;             // (d_v, d_joint)
    Tensor proj_text;              // (d_t, d_joint)
    std::string freeze_hash;       // set after pretraining

    static Backbone init(const BackboneConfig& cfg, Rng& rng) {
        cfg.validate();
        Backbone b;
        b.config = cfg;
        std::size_t pd = 3 * cfg.patch_size * cfg.patch_size;
        const double s = 0.02;
        b.patch_w = Tensor::randn({pd, cfg.d_v}, rng, s);
        b.patch_b = Tensor::zeros({cfg.d_v});
        b.cls_token = Tensor::randn({1, cfg.d_v}, rng, s);
        b.pos_image = Tensor::randn({1 + cfg.patches(), cfg.d_v}, rng, s);
        b.pos_text = Tensor::randn({cfg.context_length, cfg.d_t}, rng, s);
        b.token_table = Tensor::randn({cfg.vocab_size, cfg.d_t}, rng, s);
        auto make_block = [&](std::size_t d) {
            BlockParams p;
            p.ln1_g = Tensor::full({d}, 1.0);
            p.ln1_b = Tensor::zeros({d});
            p.w_qkv = Tensor::randn({d, 3 * d}, rng, s);
            p.b_qkv = Tensor::zeros({3 * d});
            p.w_out = Tensor::randn({d, d}, rng, s);
            p.b_out = Tensor::zeros({d});
            p.ln2_g = Tensor::full({d}, 1.0);
            p.ln2_b = Tensor::zeros({d});
            p.w_fc1 = Tensor::randn({d, 4 * d}, rng, s);
            p.b_fc1 = Tensor::zeros({4 * d});
            p.w_fc2 = Tensor::randn({4 * d, d}, rng, s);
            p.b_fc2 = Tensor::zeros({d});
            return p;
        };
        for (std::size_t l = 0; l < cfg.image_layers; ++l) b.image_blocks.push_back(make_block(cfg.d_v));
        for (std::size_t l = 0; l < cfg.text_layers; ++l) b.text_blocks.push_back(make_block(cfg.d_t));
        b.ln_pre_img_g = Tensor::full({cfg.d_v}, 1.0);
        b.ln_pre_img_b = Tensor::zeros({cfg.d_v});
        b.ln_final_img_g = Tensor::full({cfg.d_v}, 1.0);
        b.ln_final_img_b = Tensor::zeros({cfg.d_v});
        b.ln_final_txt_g = Tensor::full({cfg.d_t}, 1.0);
        b.ln_final_txt_b = Tensor::zeros({cfg.d_t});
        b.proj_image = Tensor::randn({cfg.d_v, cfg.d_joint}, rng, 1.0 / std::sqrt(static_cast<double>(cfg.d_v)));
        b.proj_text = Tensor::randn({cfg.d_t, cfg.d_joint}, rng, 1.0 / std::sqrt(static_cast<double>(cfg.d_t)));
        return b;
    }

    NamedTensors named_tensors() const {
        NamedTensors n;
        n.emplace_back("patch_w", patch_w);
        n.emplace_back("patch_b", patch_b);
        n.emplace_back("cls_token", cls_token);
        n.emplace_back("pos_image", pos_image);
        n.emplace_back("pos_text", pos_text);
        n.emplace_back("token_table", token_table);
        auto add_blocks = [&n](const std::vector<BlockParams>& blocks, const std::string& prefix) {
            for (std::size_t l = 0; l < blocks.size(); ++l) {
                const auto& p = blocks[l];
                std::string b = prefix + std::to_string(l) + ".";
                n.emplace_back(b + "ln1_g", p.ln1_g);
                n.emplace_back(b + "ln1_b", p.ln1_b);
                n.emplace_back(b + "w_qkv", p.w_qkv);
                n.emplace_back(b + "b_qkv", p.b_qkv);
                n.emplace_back(b + "w_out", p.w_out);
                n.emplace_back(b + "b_out", p.b_out);
                n.emplace_back(b + "ln2_g", p.ln2_g);
                n.emplace_back(b + "ln2_b", p.ln2_b);
                n.emplace_back(b + "w_fc1", p.w_fc1);
                n.emplace_back(b + "b_fc1", p.b_fc1);
                n.emplace_back(b + "w_fc2", p.w_fc2);
                n.emplace_back(b + "b_fc2", p.b_fc2);
            }
        };
        add_blocks(image_blocks, "img.");
        add_blocks(text_blocks, "txt.");
        n.emplace_back("ln_pre_img_g", ln_pre_img_g);
        n.emplace_back("ln_pre_img_b", ln_pre_img_b);
        n.emplace_back("ln_final_img_g", ln_final_img_g);
        n.emplace_back("ln_final_img_b", ln_final_img_b);
        n.emplace_back("ln_final_txt_g", ln_final_txt_g);
        n.emplace_back("ln_final_txt_b", ln_final_txt_b);
        n.emplace_back("proj_image", proj_image);
        n.emplace_back("proj_text", proj_text);
        return n;
    }

    void set_trainable(bool on) {
        for (auto& [name, t] : named_tensors()) {
            Tensor tt = t;
            tt.set_leaf(on);
            tt.zero_grad();
        }
    }

    bool frozen() const {
        for (const auto& [name, t] : named_tensors())
            if (t.needs_grad()) return false;
        return true;
    }

    std::string hash() const { return tensors_hash(named_tensors()); }

    void save(const std::string& path) const {
        nlohmann::json meta;
        meta["config"] = config;
        save_checkpoint(path, "backbone", meta, named_tensors());
    }

    static Backbone load(const std::string& path) {
        Checkpoint ck = load_checkpoint(path);
        if (ck.manifest.at("kind") != "backbone") throw std::runtime_error("not a backbone checkpoint: " + path);
        BackboneConfig cfg = ck.manifest.at("meta").at("config").get<BackboneConfig>();
        Rng dummy(0);
        Backbone b = init(cfg, dummy);
        for (auto& [name, t] : b.named_tensors()) {
            const Tensor& src = ck.at(name);
            if (src.shape() != t.shape()) throw std::runtime_error("shape mismatch for tensor " + name);
            Tensor dst = t;
            dst.values() = src.values();
        }
        b.freeze_hash = ck.manifest.at("hash");
        return b;
    }
};

namespace detail {

inline Tensor block_forward(const Tensor& x, const BlockParams& p, std::size_t heads) {
    std::size_t B = x.dim(0), T = x.dim(1), d = x.dim(2), dh = d / heads;
    // pre-LN attention
    Tensor h = layer_norm(x, p.ln1_g, p.ln1_b);
    Tensor qkv = add_bias(matmul(reshape(h, {B * T, d}), p.w_qkv), p.b_qkv);  // (B*T, 3d)
    Tensor qkv5 = reshape(qkv, {B, T, 3, heads, dh});
    auto head_view = [&](std::size_t which) {
        Tensor part = slice(qkv5, 2, which, 1);                   // (B,T,1,H,dh)
        Tensor perm = permute(reshape(part, {B, T, heads, dh}), {0, 2, 1, 3});  // (B,H,T,dh)
        return reshape(perm, {B * heads, T, dh});
    };
    Tensor q = head_view(0), k = head_view(1), v = head_view(2);
    Tensor scores = scalar_mul(bmm(q, permute(k, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor attn = softmax_lastdim(scores);
    Tensor ctx = bmm(attn, v);                                     // (B*H,T,dh)
    Tensor merged = reshape(permute(reshape(ctx, {B, heads, T, dh}), {0, 2, 1, 3}), {B * T, d});
    Tensor attn_out = add_bias(matmul(merged, p.w_out), p.b_out);
    Tensor x1 = add(x, reshape(attn_out, {B, T, d}));
    // pre-LN MLP
    Tensor h2 = layer_norm(x1, p.ln2_g, p.ln2_b);
    Tensor m = add_bias(matmul(reshape(h2, {B * T, d}), p.w_fc1), p.b_fc1);
    m = add_bias(matmul(gelu(m), p.w_fc2), p.b_fc2);
    return add(x1, reshape(m, {B, T, d}));
}

// overwrite prompt token slots [1, 1+n) with this layer's prompts
inline Tensor overwrite_prompt_slots(const Tensor& x, const Tensor& prompts) {
    std::size_t B = x.dim(0), T = x.dim(1), n = prompts.dim(0);
    return concat({slice(x, 1, 0, 1), tile0(prompts, B), slice(x, 1, 1 + n, T - 1 - n)}, 1);
}

}  // namespace detail

// Prompt stacks: one (n, d) tensor per prompted layer; depth J = stack size.
using PromptStack = std::vector<Tensor>;

// pixels (B,3,S,S) in [0,1] -> unit-normalized joint features (B, d_joint)
inline Tensor encode_image(const Backbone& bb, const Tensor& pixels, const PromptStack& prompts = {}) {
    const auto& cfg = bb.config;
    std::size_t S = cfg.image_size, P = cfg.patch_size, G = S / P, M = cfg.patches();
    if (pixels.ndim() != 4 || pixels.dim(1) != 3 || pixels.dim(2) != S || pixels.dim(3) != S)
        throw std::invalid_argument("encode_image: pixels must be (B,3," + std::to_string(S) + "," + std::to_string(S) + ")");
    if (prompts.size() > cfg.image_layers)
        throw std::invalid_argument("encode_image: prompt stack deeper than encoder");
    for (double v : pixels.values())
        if (v < 0.0 || v > 1.0) throw std::invalid_argument("encode_image: pixel values outside [0,1]");
    std::size_t B = pixels.dim(0);
    // patchify: (B,3,G,P,G,P) -> (B,G,G,3,P,P) -> (B,M,3*P*P)
    Tensor patches = reshape(permute(reshape(pixels, {B, 3, G, P, G, P}), {0, 2, 4, 1, 3, 5}), {B * M, 3 * P * P});
    Tensor tokens = reshape(add_bias(matmul(patches, bb.patch_w), bb.patch_b), {B, M, cfg.d_v});
    Tensor seq = concat({tile0(bb.cls_token, B), tokens}, 1);            // (B, 1+M, d_v)
    seq = add(seq, tile0(bb.pos_image, B));
    seq = layer_norm(seq, bb.ln_pre_img_g, bb.ln_pre_img_b);
    if (!prompts.empty()) seq = concat({slice(seq, 1, 0, 1), tile0(prompts[0], B), slice(seq, 1, 1, M)}, 1);
    for (std::size_t l = 0; l < cfg.image_layers; ++l) {
        if (l > 0 && l < prompts.size()) seq = detail::overwrite_prompt_slots(seq, prompts[l]);
        seq = detail::block_forward(seq, bb.image_blocks[l], cfg.heads);
    }
    Tensor cls = take_token(seq, std::vector<std::size_t>(B, 0));
    cls = layer_norm(cls, bb.ln_final_img_g, bb.ln_final_img_b);
    return l2_normalize_lastdim(matmul(cls, bb.proj_image));
}

// token-id rows (uniform length, start..end) -> unit features (rows, d_joint)
inline Tensor encode_text(const Backbone& bb, const std::vector<std::vector<std::size_t>>& rows,
                          const PromptStack& prompts = {}) {
    const auto& cfg = bb.config;
    if (rows.empty()) throw std::invalid_argument("encode_text: no rows");
    std::size_t K = rows.size(), N = rows[0].size();
    std::vector<std::size_t> flat;
    flat.reserve(K * N);
    for (const auto& r : rows) {
        if (r.size() != N) throw std::invalid_argument("encode_text: ragged rows");
        flat.insert(flat.end(), r.begin(), r.end());
    }
    if (prompts.size() > cfg.text_layers)
        throw std::invalid_argument("encode_text: prompt stack deeper than encoder");
    std::size_t n_t = prompts.empty() ? 0 : prompts[0].dim(0);
    std::size_t T = N + n_t;
    if (T > cfg.context_length)
        throw std::invalid_argument("encode_text: sequence length " + std::to_string(T) +
                                    " overflows context_length " + std::to_string(cfg.context_length));
    Tensor emb = embedding_rows(bb.token_table, flat, K, N);  // (K,N,d_t)
    Tensor seq = emb;
    if (!prompts.empty())
        seq = concat({slice(emb, 1, 0, 1), tile0(prompts[0], K), slice(emb, 1, 1, N - 1)}, 1);
    seq = add(seq, tile0(slice(bb.pos_text, 0, 0, T), K));
    for (std::size_t l = 0; l < cfg.text_layers; ++l) {
        if (l > 0 && l < prompts.size()) seq = detail::overwrite_prompt_slots(seq, prompts[l]);
        seq = detail::block_forward(seq, bb.text_blocks[l], cfg.heads);
    }
    // feature read at the end token (last position; rows are uniform, no pads)
    Tensor end = take_token(seq, std::vector<std::size_t>(K, T - 1));
    end = layer_norm(end, bb.ln_final_txt_g, bb.ln_final_txt_b);
    return l2_normalize_lastdim(matmul(end, bb.proj_text));
}

// logits[b,k] = cos(z_b, t_k) / tau for unit-normalized inputs
inline Tensor similarity_logits(const Tensor& image_feats, const Tensor& text_feats, double tau) {
    if (image_feats.dim(1) != text_feats.dim(1))
        throw std::invalid_argument("similarity_logits: joint dimension mismatch");
    return scalar_mul(matmul(image_feats, transpose(text_feats)), 1.0 / tau);
}

// ------------------------------------------------------------- pretraining

// Batches hold one image per class so every caption in the batch similarity
// matrix is distinct; duplicate captions make the diagonal target ambiguous
// and at this scale drive training into the uniform collapse. A linear
// warmup over the first epoch keeps the momentum buffer from slingshotting
// into the same collapse at useful learning rates.
struct PretrainConfig {
    std::size_t epochs = 25;
    double lr = 0.001;
    double momentum = 0.9;  // SGD path only (adam = false)
    std::uint64_t seed = 0;
    bool class_balanced = true;  // off: plain shuffled batches of `batch`
    std::size_t batch = 64;      // only used when class_balanced is off
    std::size_t warmup_epochs = 1;
    // Softer temperature for pretraining only; argmax ranking is scale
    // invariant so the zero-shot gate is unaffected, while the flatter
    // softmax keeps early updates out of the uniform-collapse basin. The
    // frozen model keeps the backbone temperature for everything downstream.
    double tau = 0.2;
    // Adam moments; the reference dual-encoder was pretrained with an
    // adaptive optimizer, and plain SGD is far too slow to separate the
    // shape factor within the time budget. Prompt tuning still uses SGD.
    bool adam = true;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
};

// symmetric cross-entropy over the batch similarity matrix
inline Tensor contrastive_loss(const Tensor& image_feats, const Tensor& text_feats, double tau) {
    std::size_t B = image_feats.dim(0);
    Tensor logits = similarity_logits(image_feats, text_feats, tau);
    std::vector<std::size_t> diag(B);
    for (std::size_t i = 0; i < B; ++i) diag[i] = i;
    Tensor i2t = neg(mean_all(take_per_row(log_softmax_lastdim(logits), diag)));
    Tensor t2i = neg(mean_all(take_per_row(log_softmax_lastdim(transpose(logits)), diag)));
    return scalar_mul(add(i2t, t2i), 0.5);
}

inline Tensor batch_images(const std::vector<double>& flat_images, const std::vector<std::size_t>& idx,
                           std::size_t image_size) {
    std::size_t px = 3 * image_size * image_size;
    std::vector<double> data;
    data.reserve(idx.size() * px);
    for (std::size_t i : idx)
        data.insert(data.end(), flat_images.begin() + i * px, flat_images.begin() + (i + 1) * px);
    return Tensor::from_data({idx.size(), 3, image_size, image_size}, std::move(data));
}

// Trains all backbone parameters in place, then freezes and records the hash.
// Returns the per-epoch mean loss trace.
inline std::vector<double> pretrain(Backbone& bb, const Dataset& ds, const PretrainConfig& cfg) {
    if (cfg.class_balanced) {
        if (ds.spec.train_per_class == 0 || ds.spec.num_classes < 2)
            throw std::invalid_argument("pretrain: class-balanced batches need >= 2 classes with data");
    } else if (ds.train.count < cfg.batch) {
        throw std::invalid_argument("pretrain: fewer pairs than one batch");
    }
    auto named = bb.named_tensors();
    for (auto& [name, t] : named) {
        Tensor tt = t;
        tt.set_leaf(true);
    }
    std::vector<std::vector<double>> velocity(named.size()), second(named.size());
    for (std::size_t i = 0; i < named.size(); ++i) {
        velocity[i].assign(named[i].second.size(), 0.0);
        if (cfg.adam) second[i].assign(named[i].second.size(), 0.0);
    }

    std::size_t n = ds.train.count;
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    // per-class index pools for balanced batches
    std::vector<std::vector<std::size_t>> pools(ds.spec.num_classes);
    for (std::size_t i = 0; i < n; ++i) pools[ds.train.labels[i]].push_back(i);
    Rng rng(cfg.seed ^ 0x9c0ffeeULL);
    std::size_t steps_per_epoch = cfg.class_balanced ? ds.spec.train_per_class : n / cfg.batch;
    std::size_t total_steps = cfg.epochs * steps_per_epoch;
    std::size_t warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    std::vector<double> epoch_losses;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (cfg.class_balanced) {
            for (auto& pool : pools)
                for (std::size_t i = pool.size(); i-- > 1;) std::swap(pool[i], pool[rng.below(i + 1)]);
        } else {
            for (std::size_t i = n; i-- > 1;) std::swap(order[i], order[rng.below(i + 1)]);
        }
        double loss_sum = 0.0;
        for (std::size_t bi = 0; bi < steps_per_epoch; ++bi, ++step) {
            std::vector<std::size_t> idx;
            if (cfg.class_balanced)
                for (const auto& pool : pools) idx.push_back(pool[bi]);
            else
                idx.assign(order.begin() + bi * cfg.batch, order.begin() + (bi + 1) * cfg.batch);
            Tensor images = batch_images(ds.train.images, idx, ds.spec.image_size);
            std::vector<std::vector<std::size_t>> caption_rows;
            for (std::size_t i : idx) caption_rows.push_back(ds.captions[ds.train.labels[i]]);
            Tensor zi = encode_image(bb, images);
            Tensor zt = encode_text(bb, caption_rows);
            Tensor loss = contrastive_loss(zi, zt, cfg.tau > 0 ? cfg.tau : bb.config.temperature);
            if (!std::isfinite(loss.value()))
                throw std::runtime_error("pretrain: non-finite loss at step " + std::to_string(step));
            loss_sum += loss.value();
            for (auto& [name, t] : named) {
                Tensor tt = t;
                tt.zero_grad();
            }
            backward(loss);
            double lr;
            if (step < warmup_steps)
                lr = cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
            else
                lr = cfg.lr * 0.5 *
                     (1.0 + std::cos(M_PI * static_cast<double>(step - warmup_steps) /
                                     static_cast<double>(total_steps - warmup_steps)));
            for (std::size_t pi = 0; pi < named.size(); ++pi) {
                auto g = named[pi].second.grad();
                auto& vel = velocity[pi];
                auto& vals = named[pi].second.values();
                if (cfg.adam) {
                    auto& sec = second[pi];
                    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step + 1));
                    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step + 1));
                    for (std::size_t j = 0; j < vals.size(); ++j) {
                        vel[j] = cfg.beta1 * vel[j] + (1.0 - cfg.beta1) * g[j];
                        sec[j] = cfg.beta2 * sec[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                        vals[j] -= lr * (vel[j] / bc1) / (std::sqrt(sec[j] / bc2) + cfg.adam_eps);
                    }
                } else {
                    for (std::size_t j = 0; j < vals.size(); ++j) {
                        vel[j] = cfg.momentum * vel[j] + g[j];
                        vals[j] -= lr * vel[j];
                    }
                }
            }
        }
        epoch_losses.push_back(loss_sum / static_cast<double>(steps_per_epoch));
    }
    for (auto& [name, t] : named) {
        Tensor tt = t;
        tt.set_leaf(false);
        tt.zero_grad();
    }
    bb.freeze_hash = bb.hash();
    return epoch_losses;
}

}  // namespace fap
