#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fap/attacks.hpp"
#include "fap/backbone.hpp"
#include "fap/dataio.hpp"
#include "fap/losses.hpp"
#include "fap/prompts.hpp"

// Outer minimization loop, schedule, evaluation protocol, sweep harness, and
// the degenerate-solution monitor.

namespace fap {

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch = 32;
    double lr = 0.0035;
    double momentum = 0.9;
    double grad_clip = 1.0;  // global L2 norm cap over all prompt grads; <= 0 disables
    std::uint64_t seed = 0;
    PromptVariant variant = PromptVariant::FAP;
    PromptConfig prompt;
    LossConfig loss;
    AttackConfig attack;  // training-time inner maximization (KL, 2 steps)

    void validate() const {
        loss.validate();
        attack.validate();
        if (batch == 0) throw std::invalid_argument("train config: batch must be > 0");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"epochs", c.epochs},   {"batch", c.batch},
         {"lr", c.lr},           {"momentum", c.momentum},
         {"grad_clip", c.grad_clip},
         {"seed", c.seed},       {"variant", variant_name(c.variant)},
         {"prompt",
          {{"n_v", c.prompt.n_v},
           {"n_t", c.prompt.n_t},
           {"depth", c.prompt.depth},
           {"seed", c.prompt.seed},
           {"init_std", c.prompt.init_std}}},
         {"loss", c.loss},       {"attack", c.attack}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    j.at("epochs").get_to(c.epochs);
    j.at("batch").get_to(c.batch);
    j.at("lr").get_to(c.lr);
    j.at("momentum").get_to(c.momentum);
    j.at("grad_clip").get_to(c.grad_clip);
    j.at("seed").get_to(c.seed);
    c.variant = variant_from_name(j.at("variant"));
    const auto& p = j.at("prompt");
    p.at("n_v").get_to(c.prompt.n_v);
    p.at("n_t").get_to(c.prompt.n_t);
    p.at("depth").get_to(c.prompt.depth);
    p.at("seed").get_to(c.prompt.seed);
    p.at("init_std").get_to(c.prompt.init_std);
    j.at("loss").get_to(c.loss);
    j.at("attack").get_to(c.attack);
}

struct RunRecord {
    std::string run_id;
    std::string variant;
    std::size_t shots = 0;
    double lambda = 0.0;
    double eps = 0.0;
    std::size_t steps = 0;
    std::uint64_t seed = 0;
    std::size_t epoch = 0;
    double nat_acc = 0.0;
    double adv_acc = 0.0;
    double ce_mean = 0.0;
    double consistency_mean = 0.0;
    double diversity_mean = 0.0;
    double wallclock_s = 0.0;  // reported in a sidecar; the CSV column stays 0 for byte-stable reruns
};

inline std::string csv_header() {
    return "run_id,variant,shots,lambda,eps,steps,seed,epoch,nat_acc,adv_acc,ce_mean,"
           "consistency_mean,diversity_mean,wallclock_s";
}

inline std::string fmt_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

inline std::string csv_row(const RunRecord& r) {
    return r.run_id + "," + r.variant + "," + std::to_string(r.shots) + "," + fmt_num(r.lambda) + "," +
           fmt_num(r.eps) + "," + std::to_string(r.steps) + "," + std::to_string(r.seed) + "," +
           std::to_string(r.epoch) + "," + fmt_num(r.nat_acc) + "," + fmt_num(r.adv_acc) + "," +
           fmt_num(r.ce_mean) + "," + fmt_num(r.consistency_mean) + "," + fmt_num(r.diversity_mean) +
           ",0.0";
}

// ------------------------------------------------------------------ schedule

// Linear warmup over the first-epoch steps, then cosine decay; the very last
// step lands at exactly zero.
inline double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr) {
    if (step >= total_steps) throw std::invalid_argument("lr_at: step beyond horizon");
    if (step < warmup_steps)
        return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    std::size_t rest = total_steps - warmup_steps;
    if (rest <= 1) return 0.0;
    double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(rest - 1);
    return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// --------------------------------------------------------------- model glue

// Caption token rows for the given classes; the 16-context variant drops the
// fixed template words so its learned context stands in for them.
inline std::vector<std::vector<std::size_t>> caption_rows(const Dataset& ds,
                                                          const std::vector<std::size_t>& class_ids,
                                                          bool replace_template,
                                                          const Tokenizer& tok = Tokenizer::shapes_vocab()) {
    std::vector<std::vector<std::size_t>> rows;
    for (std::size_t cls : class_ids) {
        if (!replace_template) {
            rows.push_back(ds.captions.at(cls));
            continue;
        }
        std::vector<std::size_t> ids;
        ids.push_back(tok.start_id());
        for (std::size_t id : tok.encode(ds.spec.class_name(cls))) ids.push_back(id);
        ids.push_back(tok.end_id());
        rows.push_back(std::move(ids));
    }
    return rows;
}

struct MaterializedPromptsDetached {
    PromptStack visual, text;
    Tensor pad;
};

inline MaterializedPromptsDetached materialize_detached(const PromptSet& ps) {
    MaterializedPromptsDetached out;
    auto mat = materialize(ps);
    for (const auto& t : mat.visual) out.visual.push_back(t.detach());
    for (const auto& t : mat.text) out.text.push_back(t.detach());
    if (ps.pad.defined()) out.pad = ps.pad.detach();
    return out;
}

// Attack-time forward pass: prompts and text features frozen at their current
// values, gradients flow only into the pixels.
inline ModelFn attack_model(const Backbone& bb, const PromptSet& ps,
                            const std::vector<std::vector<std::size_t>>& rows) {
    auto mat = std::make_shared<MaterializedPromptsDetached>(materialize_detached(ps));
    Tensor zt = ps.has_text() ? encode_text(bb, rows, mat->text).detach()
                              : encode_text(bb, rows).detach();
    std::size_t pad_width = ps.pad_width;
    bool padded = ps.pad.defined();
    const Backbone* bbp = &bb;
    return [bbp, mat, zt, pad_width, padded](const Tensor& pixels) {
        Tensor px = padded ? apply_pad_prompt(pixels, mat->pad, pad_width) : pixels;
        ModelOutput out;
        out.feats = encode_image(*bbp, px, mat->visual);
        out.logits = similarity_logits(out.feats, zt, bbp->config.temperature);
        return out;
    };
}

struct ForwardOutput {
    Tensor nat_logits, adv_logits, nat_feats, adv_feats;
};

// Grad-enabled forward on the natural and adversarial batch with the prompt
// leaves shared across both branches.
inline ForwardOutput adapted_forward(const Backbone& bb, const PromptSet& ps,
                                     const std::vector<std::vector<std::size_t>>& rows,
                                     const Tensor& nat_pixels, const Tensor& adv_pixels) {
    auto mat = materialize(ps);
    Tensor zt = ps.has_text() ? encode_text(bb, rows, mat.text) : encode_text(bb, rows);
    auto image_branch = [&](const Tensor& pixels) {
        Tensor px = ps.pad.defined() ? apply_pad_prompt(pixels, ps.pad, ps.pad_width) : pixels;
        return encode_image(bb, px, mat.visual);
    };
    ForwardOutput out;
    out.nat_feats = image_branch(nat_pixels);
    out.adv_feats = image_branch(adv_pixels);
    out.nat_logits = similarity_logits(out.nat_feats, zt, bb.config.temperature);
    out.adv_logits = similarity_logits(out.adv_feats, zt, bb.config.temperature);
    return out;
}

// ---------------------------------------------------------------- optimizer

struct SgdMomentum {
    double momentum;
    std::vector<std::vector<double>> velocity;

    explicit SgdMomentum(const std::vector<Tensor>& params, double mu) : momentum(mu) {
        for (const auto& p : params) velocity.emplace_back(p.size(), 0.0);
    }

    // grad_clip <= 0 disables the global-norm cap
    void step(std::vector<Tensor>& params, double lr, double grad_clip = 0.0) {
        double scale = 1.0;
        if (grad_clip > 0.0) {
            double sq = 0.0;
            for (const auto& p : params)
                for (double g : p.grad()) sq += g * g;
            double norm = std::sqrt(sq);
            if (norm > grad_clip) scale = grad_clip / norm;
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            std::vector<double> g = params[i].grad();
            for (std::size_t j = 0; j < g.size(); ++j) {
                velocity[i][j] = momentum * velocity[i][j] + scale * g[j];
                params[i].values()[j] -= lr * velocity[i][j];
            }
        }
    }
};

// ----------------------------------------------------------------- training

struct StepLog {
    std::size_t epoch = 0, step = 0;
    double lr = 0.0, total = 0.0, ce = 0.0, consistency = 0.0, diversity = 0.0;
};

struct TrainResult {
    PromptSet prompts;
    std::vector<StepLog> log;
    std::vector<std::string> warnings;
    double wallclock_s = 0.0;
};

// Per-epoch means of the logged pieces; flags epochs where the consistency
// term has collapsed to zero while natural CE sits above its first-epoch
// level — the signature of a degenerate solution that ignores the attack.
inline std::vector<std::string> monitor_trivial_solution(const std::vector<StepLog>& log,
                                                         bool consistency_active = true) {
    std::vector<std::string> warnings;
    if (log.empty() || !consistency_active) return warnings;
    std::size_t epochs = log.back().epoch + 1;
    std::vector<double> ce_mean(epochs, 0.0), cons_mean(epochs, 0.0);
    std::vector<std::size_t> counts(epochs, 0);
    for (const auto& s : log) {
        ce_mean[s.epoch] += s.ce;
        cons_mean[s.epoch] += s.consistency;
        ++counts[s.epoch];
    }
    for (std::size_t e = 0; e < epochs; ++e) {
        if (counts[e] == 0) continue;
        ce_mean[e] /= static_cast<double>(counts[e]);
        cons_mean[e] /= static_cast<double>(counts[e]);
    }
    for (std::size_t e = 0; e < epochs; ++e) {
        if (counts[e] == 0) continue;
        if (cons_mean[e] < 1e-6 && ce_mean[e] > ce_mean[0])
            warnings.push_back("epoch " + std::to_string(e) +
                               ": consistency collapsed to zero while natural CE exceeds its first-epoch mean (" +
                               fmt_num(ce_mean[e]) + " > " + fmt_num(ce_mean[0]) + ")");
    }
    return warnings;
}

inline TrainResult train(const Backbone& bb, PromptSet prompts, const Dataset& ds,
                         const FewShotDataset& fs, const TrainConfig& cfg,
                         const std::string& checkpoint_dir = "") {
    cfg.validate();
    if (!bb.frozen()) throw std::invalid_argument("train: backbone must be frozen");
    if (fs.labels.empty()) throw std::invalid_argument("train: empty training set");
    if (cfg.batch > fs.labels.size())
        throw std::invalid_argument("train: batch size exceeds dataset size");
    std::string hash_before = bb.hash();

    TrainResult res;
    res.prompts = prompts;
    if (cfg.epochs == 0) return res;

    auto t0 = std::chrono::steady_clock::now();
    auto rows = caption_rows(ds, fs.class_ids, prompts.replace_template);
    std::vector<Tensor> params = prompts.trainable();
    SgdMomentum opt(params, cfg.momentum);

    std::size_t N = fs.labels.size();
    std::size_t batches_per_epoch = (N + cfg.batch - 1) / cfg.batch;
    std::size_t total_steps = cfg.epochs * batches_per_epoch;
    std::size_t warmup_steps = batches_per_epoch;  // linear warmup over the first epoch
    std::size_t S = ds.spec.image_size;

    Rng run_rng(cfg.seed ^ 0x7a19ULL);
    std::size_t global_step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        // fixed shuffle per epoch from the run seed
        std::vector<std::size_t> order(N);
        std::iota(order.begin(), order.end(), 0);
        Rng erng = run_rng.child(epoch + 1);
        for (std::size_t i = N; i > 1; --i) std::swap(order[i - 1], order[erng.below(i)]);

        for (std::size_t b = 0; b < batches_per_epoch; ++b, ++global_step) {
            std::size_t lo = b * cfg.batch, hi = std::min(N, lo + cfg.batch);
            std::vector<std::size_t> idx(order.begin() + lo, order.begin() + hi);
            Tensor images = batch_images(fs.images, idx, S);
            std::vector<std::size_t> labels;
            for (std::size_t i : idx) labels.push_back(fs.labels[i]);

            // inner maximization against the current (frozen-copy) prompts
            ModelFn atk = attack_model(bb, prompts, rows);
            Tensor adv = pgd(images, labels, atk, cfg.attack);

            // outer step
            for (auto& p : params) p.zero_grad();
            ForwardOutput fw = adapted_forward(bb, prompts, rows, images, adv);
            LossBreakdown lb = final_loss(fw.nat_logits, fw.adv_logits, fw.nat_feats, fw.adv_feats,
                                          labels, cfg.loss);
            double total = lb.total.value();
            if (!std::isfinite(total))
                throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                         " step " + std::to_string(b));
            backward(lb.total);
            double lr = lr_at(global_step, total_steps, warmup_steps, cfg.lr);
            opt.step(params, lr, cfg.grad_clip);

            StepLog sl;
            sl.epoch = epoch;
            sl.step = b;
            sl.lr = lr;
            sl.total = total;
            sl.ce = lb.natural_ce;
            sl.consistency = lb.consistency_value;
            sl.diversity = lb.diversity_value;
            res.log.push_back(sl);
        }
        if (!checkpoint_dir.empty())
            prompts.save(checkpoint_dir + "/prompts_epoch_" + std::to_string(epoch) + ".ckpt");
    }
    if (bb.hash() != hash_before) throw std::runtime_error("train: frozen backbone was modified");
    res.warnings = monitor_trivial_solution(res.log, cfg.loss.lambda > 0.0 && cfg.attack.eps > 0.0);
    res.prompts = prompts;
    res.wallclock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

// --------------------------------------------------------------- evaluation

inline double accuracy(const Tensor& logits, const std::vector<std::size_t>& labels) {
    std::size_t B = logits.dim(0), K = logits.dim(1), hits = 0;
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t arg = 0;
        for (std::size_t k = 1; k < K; ++k)
            if (logits.values()[b * K + k] > logits.values()[b * K + arg]) arg = k;
        if (arg == labels[b]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(B);
}

// Natural accuracy on clean images and adversarial accuracy on CE-maximizing
// examples generated against the adapted model itself.
inline RunRecord evaluate(const Backbone& bb, const PromptSet& ps, const Dataset& ds,
                          const FewShotDataset& test, const AttackConfig& atk,
                          std::size_t eval_batch = 64) {
    if (test.labels.empty()) throw std::invalid_argument("evaluate: empty test set");
    atk.validate();
    auto rows = caption_rows(ds, test.class_ids, ps.replace_template);
    ModelFn model = attack_model(bb, ps, rows);
    std::size_t N = test.labels.size(), S = ds.spec.image_size;
    double nat_hits = 0, adv_hits = 0;
    for (std::size_t lo = 0; lo < N; lo += eval_batch) {
        std::size_t hi = std::min(N, lo + eval_batch);
        std::vector<std::size_t> idx(hi - lo);
        std::iota(idx.begin(), idx.end(), lo);
        Tensor images = batch_images(test.images, idx, S);
        std::vector<std::size_t> labels(test.labels.begin() + lo, test.labels.begin() + hi);
        Tensor nat_logits = model(images).logits.detach();
        nat_hits += accuracy(nat_logits, labels) * static_cast<double>(hi - lo);
        Tensor adv = pgd(images, labels, model, atk);
        Tensor adv_logits = model(adv).logits.detach();
        adv_hits += accuracy(adv_logits, labels) * static_cast<double>(hi - lo);
    }
    RunRecord r;
    r.variant = variant_name(ps.variant);
    r.shots = test.shots;
    r.eps = atk.eps;
    r.steps = atk.steps;
    r.nat_acc = nat_hits / static_cast<double>(N);
    r.adv_acc = adv_hits / static_cast<double>(N);
    return r;
}

// --------------------------------------------------------------- run driver

struct RunSpec {
    std::string run_id;
    TrainConfig train_cfg;
    AttackConfig eval_attack = AttackConfig::test_time(1.0 / 255.0);
    std::size_t shots = 16;
    std::uint64_t data_sample_seed = 0;  // few-shot draw
    std::vector<std::size_t> train_classes;  // empty -> all
    std::vector<std::size_t> eval_classes;   // empty -> train_classes (or all)
};

struct RunOutput {
    RunRecord record;
    TrainResult result;
    PromptSet prompts;
};

// Train on an m-shot draw of the given classes, evaluate on the test subset.
inline RunOutput run_experiment(const Backbone& bb, const Dataset& ds, const RunSpec& spec,
                                const std::string& checkpoint_dir = "") {
    std::vector<std::size_t> train_classes = spec.train_classes;
    if (train_classes.empty()) {
        train_classes.resize(ds.spec.num_classes);
        std::iota(train_classes.begin(), train_classes.end(), 0);
    }
    std::vector<std::size_t> eval_classes =
        spec.eval_classes.empty() ? train_classes : spec.eval_classes;

    FewShotDataset fs = sample_few_shot(ds, spec.shots, spec.data_sample_seed, train_classes);
    PromptConfig pc = spec.train_cfg.prompt;
    pc.seed = pc.seed ? pc.seed : spec.train_cfg.seed;
    PromptSet ps = init_prompts(spec.train_cfg.variant, bb, pc);
    TrainResult tr = train(bb, ps, ds, fs, spec.train_cfg, checkpoint_dir);

    FewShotDataset test = test_subset(ds, eval_classes, "test");
    test.shots = spec.shots;
    RunRecord rec = evaluate(bb, tr.prompts, ds, test, spec.eval_attack);
    rec.run_id = spec.run_id;
    rec.shots = spec.shots;
    rec.lambda = spec.train_cfg.loss.lambda;
    rec.seed = spec.train_cfg.seed;
    rec.epoch = spec.train_cfg.epochs;
    rec.wallclock_s = tr.wallclock_s;
    double n = static_cast<double>(tr.log.size());
    for (const auto& s : tr.log) {
        rec.ce_mean += s.ce / n;
        rec.consistency_mean += s.consistency / n;
        rec.diversity_mean += s.diversity / n;
    }
    return {rec, tr, tr.prompts};
}

// ------------------------------------------------------------------- sweeps

enum class SweepAxis { Lambda, PromptDepth, PromptLength, Shots, LossVariant, ProjectionDirection };

inline SweepAxis sweep_axis_from_name(const std::string& s) {
    if (s == "lambda") return SweepAxis::Lambda;
    if (s == "prompt_depth") return SweepAxis::PromptDepth;
    if (s == "prompt_length") return SweepAxis::PromptLength;
    if (s == "shots") return SweepAxis::Shots;
    if (s == "loss_variant") return SweepAxis::LossVariant;
    if (s == "projection_direction") return SweepAxis::ProjectionDirection;
    throw std::invalid_argument("unknown sweep axis: " + s);
}

// loss_variant values look like "KL:Cos:mult"; projection_direction values
// are prompt variant names; everything else is numeric.
inline RunSpec apply_sweep_value(RunSpec spec, SweepAxis axis, const std::string& value) {
    switch (axis) {
        case SweepAxis::Lambda: spec.train_cfg.loss.lambda = std::stod(value); break;
        case SweepAxis::PromptDepth: spec.train_cfg.prompt.depth = std::stoul(value); break;
        case SweepAxis::PromptLength:
            spec.train_cfg.prompt.n_v = std::stoul(value);
            spec.train_cfg.prompt.n_t = std::stoul(value);
            break;
        case SweepAxis::Shots: spec.shots = std::stoul(value); break;
        case SweepAxis::LossVariant: {
            auto c1 = value.find(':');
            auto c2 = value.rfind(':');
            if (c1 == std::string::npos || c2 == c1)
                throw std::invalid_argument("loss_variant value must be consistency:diversity:combination");
            std::string cons = value.substr(0, c1);
            std::string div = value.substr(c1 + 1, c2 - c1 - 1);
            std::string comb = value.substr(c2 + 1);
            LossConfig& lc = spec.train_cfg.loss;
            lc.consistency = cons == "TeCoA" ? Consistency::TeCoA
                                             : (cons == "KL" ? Consistency::KL : Consistency::JS);
            lc.diversity = div == "none" ? Diversity::None
                          : div == "Cos" ? Diversity::Cos
                          : div == "MSE" ? Diversity::MSE
                                         : Diversity::MAE;
            lc.combination = comb == "mult" ? Combination::Multiplicative : Combination::Additive;
            break;
        }
        case SweepAxis::ProjectionDirection: spec.train_cfg.variant = variant_from_name(value); break;
    }
    return spec;
}

// One run per (value, seed) with shared few-shot draws across values.
inline std::vector<RunRecord> sweep(const Backbone& bb, const Dataset& ds, const RunSpec& base,
                                    SweepAxis axis, const std::vector<std::string>& values,
                                    const std::vector<std::uint64_t>& seeds) {
    std::vector<RunRecord> rows;
    for (const auto& value : values) {
        for (std::uint64_t seed : seeds) {
            RunSpec spec = apply_sweep_value(base, axis, value);
            spec.train_cfg.seed = seed;
            spec.data_sample_seed = seed;
            spec.run_id = base.run_id + "-" + value + "-s" + std::to_string(seed);
            rows.push_back(run_experiment(bb, ds, spec).record);
        }
    }
    return rows;
}

// ------------------------------------------------------------ run directory

inline void write_loss_log(const std::string& path, const std::vector<StepLog>& log) {
    std::ofstream f(path, std::ios::trunc);
    f << "epoch,step,lr,total,ce,consistency,diversity\n";
    for (const auto& s : log)
        f << s.epoch << "," << s.step << "," << fmt_num(s.lr) << "," << fmt_num(s.total) << ","
          << fmt_num(s.ce) << "," << fmt_num(s.consistency) << "," << fmt_num(s.diversity) << "\n";
}

inline void write_metrics(const std::string& path, const std::vector<RunRecord>& records) {
    std::ofstream f(path, std::ios::trunc);
    f << csv_header() << "\n";
    for (const auto& r : records) f << csv_row(r) << "\n";
}

// Unit feature export for offline similarity plots: one row per item with a
// kind tag (natural / adversarial image, text).
inline void export_embeddings(const std::string& path, const Backbone& bb, const PromptSet& ps,
                              const Dataset& ds, const FewShotDataset& data,
                              const AttackConfig& atk, std::size_t limit = 64) {
    auto rows = caption_rows(ds, data.class_ids, ps.replace_template);
    ModelFn model = attack_model(bb, ps, rows);
    std::size_t N = std::min(limit, data.labels.size()), S = ds.spec.image_size;
    std::vector<std::size_t> idx(N);
    std::iota(idx.begin(), idx.end(), 0);
    Tensor images = batch_images(data.images, idx, S);
    std::vector<std::size_t> labels(data.labels.begin(), data.labels.begin() + N);
    ModelOutput nat = model(images);
    Tensor adv = pgd(images, labels, model, atk);
    ModelOutput advo = model(adv);
    auto mat = materialize_detached(ps);
    Tensor zt = ps.has_text() ? encode_text(bb, rows, mat.text).detach() : encode_text(bb, rows).detach();
    std::ofstream f(path, std::ios::trunc);
    std::size_t d = zt.dim(1);
    f << "kind,index,label";
    for (std::size_t j = 0; j < d; ++j) f << ",f" << j;
    f << "\n";
    auto dump = [&](const std::string& kind, const Tensor& feats, const std::vector<std::size_t>& lab) {
        Tensor v = feats.detach();
        for (std::size_t i = 0; i < v.dim(0); ++i) {
            f << kind << "," << i << "," << lab[i];
            for (std::size_t j = 0; j < d; ++j) f << "," << fmt_num(v.values()[i * d + j]);
            f << "\n";
        }
    };
    dump("natural", nat.feats, labels);
    dump("adversarial", advo.feats, labels);
    std::vector<std::size_t> text_labels(rows.size());
    std::iota(text_labels.begin(), text_labels.end(), 0);
    dump("text", zt, text_labels);
}

struct RunArtifacts {
    std::string dir;
};

// config.json + metrics.csv + loss_log.csv + warnings.log + checkpoints;
// measured time goes to a sidecar so the CSV stays byte-stable across reruns.
inline RunArtifacts write_run_dir(const std::string& dir, const TrainConfig& cfg,
                                  const RunRecord& rec, const TrainResult& tr, bool force = false) {
    namespace fs = std::filesystem;
    if (fs::exists(fs::path(dir) / "metrics.csv") && !force)
        throw std::runtime_error("run directory already complete (use force to overwrite): " + dir);
    fs::create_directories(dir);
    {
        std::ofstream f(dir + "/config.json", std::ios::trunc);
        nlohmann::json j = cfg;
        j["schema_version"] = 1;
        f << j.dump(2) << "\n";
    }
    write_loss_log(dir + "/loss_log.csv", tr.log);
    {
        std::ofstream f(dir + "/warnings.log", std::ios::trunc);
        for (const auto& w : tr.warnings) f << w << "\n";
    }
    tr.prompts.save(dir + "/prompts_final.ckpt");
    write_metrics(dir + "/metrics.csv", {rec});
    {
        std::ofstream f(dir + "/timings.txt", std::ios::trunc);
        f << "train_wallclock_s " << tr.wallclock_s << "\n";
    }
    return {dir};
}

}  // namespace fap
