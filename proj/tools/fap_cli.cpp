// Operator surface: data generation, backbone pretraining, prompt training,
// evaluation, sweeps, and report rendering. Configs are JSON with a versioned
// schema; command-line overrides use flat dotted keys and reject unknown
// names instead of silently ignoring them.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "fap/pipeline.hpp"
#include "fap/report.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// "3/255" style exact rationals, plain numbers otherwise
double parse_number(const std::string& s) {
    auto slash = s.find('/');
    if (slash != std::string::npos) {
        double num = std::stod(s.substr(0, slash));
        double den = std::stod(s.substr(slash + 1));
        if (den == 0) throw std::invalid_argument("zero denominator in " + s);
        return num / den;
    }
    return std::stod(s);
}

json parse_value(const std::string& s) {
    if (s.find('/') != std::string::npos) {
        try {
            return parse_number(s);
        } catch (...) {
        }
    }
    try {
        return json::parse(s);
    } catch (...) {
        return s;  // bare string
    }
}

// merge `patch` into `base`, rejecting keys absent from the schema
void merge_known(json& base, const json& patch, const std::string& prefix) {
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!base.contains(it.key())) throw std::invalid_argument("unknown config key: " + path);
        if (base[it.key()].is_object() && it.value().is_object())
            merge_known(base[it.key()], it.value(), path);
        else
            base[it.key()] = it.value();
    }
}

void set_dotted(json& base, const std::string& key, const json& value) {
    json* cur = &base;
    std::stringstream ss(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!cur->contains(parts[i]) || !(*cur)[parts[i]].is_object())
            throw std::invalid_argument("unknown config key: " + key);
        cur = &(*cur)[parts[i]];
    }
    if (!cur->contains(parts.back())) throw std::invalid_argument("unknown config key: " + key);
    (*cur)[parts.back()] = value;
}

json load_config(const std::string& config_path, const std::vector<std::string>& sets, json defaults) {
    if (!config_path.empty()) {
        std::ifstream f(config_path);
        if (!f) throw std::runtime_error("cannot open config: " + config_path);
        merge_known(defaults, json::parse(f), "");
    }
    for (const auto& kv : sets) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("override must be key=value: " + kv);
        set_dotted(defaults, kv.substr(0, eq), parse_value(kv.substr(eq + 1)));
    }
    return defaults;
}

void require_writable(const std::string& path, bool force) {
    if (fs::exists(path) && !force)
        throw std::runtime_error(path + " exists (use --force to overwrite)");
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) out.push_back(part);
    return out;
}

json run_config_defaults() {
    json j;
    j["schema_version"] = 1;
    j["dataset"] = "dataset.bin";
    j["backbone"] = "backbone.ckpt";
    j["out_dir"] = "runs";
    j["run_id"] = "run";
    j["shots"] = 16;
    j["data_sample_seed"] = 0;
    j["train_classes"] = json::array();
    j["eval_classes"] = json::array();
    j["train"] = fap::TrainConfig{};
    j["eval_attack"] = fap::AttackConfig::test_time(1.0 / 255.0, 20);
    return j;
}

fap::RunSpec spec_from_config(const json& cfg) {
    fap::RunSpec spec;
    spec.run_id = cfg.at("run_id");
    spec.train_cfg = cfg.at("train").get<fap::TrainConfig>();
    spec.eval_attack = cfg.at("eval_attack").get<fap::AttackConfig>();
    spec.shots = cfg.at("shots");
    spec.data_sample_seed = cfg.at("data_sample_seed");
    cfg.at("train_classes").get_to(spec.train_classes);
    cfg.at("eval_classes").get_to(spec.eval_classes);
    return spec;
}

void append_metrics(const std::string& path, const fap::RunRecord& rec) {
    bool fresh = !fs::exists(path);
    std::ofstream f(path, std::ios::app);
    if (fresh) f << fap::csv_header() << "\n";
    f << fap::csv_row(rec) << "\n";
}

int cmd_gen_data(const std::string& config, const std::vector<std::string>& sets,
                 const std::string& out, bool force) {
    require_writable(out, force);
    json j = json(fap::SyntheticSpec{});
    j = load_config(config, sets, j);
    fap::SyntheticSpec spec = j.get<fap::SyntheticSpec>();
    fap::Dataset ds = fap::generate(spec);
    fap::save_dataset(out, ds);
    std::cout << "wrote " << out << " (" << ds.train.count << " train / " << ds.test.count
              << " test images, " << spec.num_classes << " classes)\n";
    return 0;
}

int cmd_pretrain(const std::string& data, const std::string& config,
                 const std::vector<std::string>& sets, const std::string& out, bool force) {
    require_writable(out, force);
    fap::Dataset ds = fap::load_dataset(data);
    json defaults;
    fap::BackboneConfig bc;
    bc.vocab_size = fap::Tokenizer::shapes_vocab().vocab_size();
    defaults["backbone"] = bc;
    defaults["pretrain"] = {{"epochs", 25},   {"lr", 0.001},          {"momentum", 0.9},
                            {"seed", 0},      {"class_balanced", true}, {"batch", 64},
                            {"warmup_epochs", 1}, {"tau", 0.2},       {"adam", true}};
    json j = load_config(config, sets, defaults);
    fap::BackboneConfig cfg = j.at("backbone").get<fap::BackboneConfig>();
    fap::PretrainConfig pc;
    const json& p = j.at("pretrain");
    pc.epochs = p.at("epochs");
    pc.lr = p.at("lr");
    pc.momentum = p.at("momentum");
    pc.seed = p.at("seed");
    pc.class_balanced = p.at("class_balanced");
    pc.batch = p.at("batch");
    pc.warmup_epochs = p.at("warmup_epochs");
    pc.tau = p.at("tau");
    pc.adam = p.at("adam");
    fap::Rng rng(pc.seed ^ 0xb4cbULL);
    fap::Backbone bb = fap::Backbone::init(cfg, rng);
    auto losses = fap::pretrain(bb, ds, pc);
    bb.save(out);
    fap::PromptSet zero;
    std::vector<std::size_t> all(ds.spec.num_classes);
    std::iota(all.begin(), all.end(), 0);
    fap::FewShotDataset test = fap::test_subset(ds, all, "test");
    fap::RunRecord r = fap::evaluate(bb, zero, ds, test, fap::AttackConfig::test_time(0.0, 0));
    std::cout << "wrote " << out << " hash " << bb.freeze_hash << "\n";
    std::cout << "final pretrain loss " << fap::fmt_num(losses.back()) << ", zero-shot accuracy "
              << fap::fmt_num(r.nat_acc) << "\n";
    return 0;
}

int cmd_train(const std::string& config, const std::vector<std::string>& sets, bool force) {
    json j = load_config(config, sets, run_config_defaults());
    fap::Dataset ds = fap::load_dataset(j.at("dataset"));
    fap::Backbone bb = fap::Backbone::load(j.at("backbone"));
    if (bb.hash() != bb.freeze_hash) throw std::runtime_error("backbone hash mismatch");
    fap::RunSpec spec = spec_from_config(j);
    std::string dir = std::string(j.at("out_dir")) + "/" + spec.run_id;
    if (fs::exists(dir + "/metrics.csv") && !force)
        throw std::runtime_error("run " + dir + " already complete (use --force to rerun)");
    fs::create_directories(dir);
    fap::RunOutput out = fap::run_experiment(bb, ds, spec, dir);
    fap::write_run_dir(dir, spec.train_cfg, out.record, out.result, true);
    std::cout << "run " << spec.run_id << ": nat " << fap::fmt_num(out.record.nat_acc) << " adv "
              << fap::fmt_num(out.record.adv_acc) << " (" << fap::fmt_num(out.result.wallclock_s)
              << "s)\n";
    for (const auto& w : out.result.warnings) std::cout << "warning: " << w << "\n";
    return 0;
}

int cmd_eval(const std::string& backbone, const std::string& data, const std::string& prompts,
             const std::string& metrics, const std::string& run_id, const std::string& eps,
             std::size_t steps, const std::string& classes) {
    fap::Dataset ds = fap::load_dataset(data);
    fap::Backbone bb = fap::Backbone::load(backbone);
    if (bb.hash() != bb.freeze_hash) throw std::runtime_error("backbone hash mismatch");
    fap::PromptSet ps;  // zero-shot when no prompt checkpoint given
    if (!prompts.empty()) ps = fap::load_prompts(prompts);
    std::vector<std::size_t> cls;
    if (!classes.empty())
        for (const auto& c : split_csv(classes)) cls.push_back(std::stoul(c));
    else {
        cls.resize(ds.spec.num_classes);
        std::iota(cls.begin(), cls.end(), 0);
    }
    fap::FewShotDataset test = fap::test_subset(ds, cls, "test");
    fap::AttackConfig atk = fap::AttackConfig::test_time(parse_number(eps), steps);
    fap::RunRecord rec = fap::evaluate(bb, ps, ds, test, atk);
    rec.run_id = run_id;
    append_metrics(metrics, rec);
    std::cout << run_id << ": nat " << fap::fmt_num(rec.nat_acc) << " adv "
              << fap::fmt_num(rec.adv_acc) << "\n";
    return 0;
}

int cmd_sweep(const std::string& config, const std::vector<std::string>& sets,
              const std::string& axis, const std::string& values, const std::string& seeds,
              const std::string& out, bool force) {
    require_writable(out, force);
    json j = load_config(config, sets, run_config_defaults());
    fap::Dataset ds = fap::load_dataset(j.at("dataset"));
    fap::Backbone bb = fap::Backbone::load(j.at("backbone"));
    if (bb.hash() != bb.freeze_hash) throw std::runtime_error("backbone hash mismatch");
    fap::RunSpec base = spec_from_config(j);
    std::vector<std::uint64_t> seed_list;
    for (const auto& s : split_csv(seeds)) seed_list.push_back(std::stoull(s));
    auto rows = fap::sweep(bb, ds, base, fap::sweep_axis_from_name(axis), split_csv(values), seed_list);
    fap::write_metrics(out, rows);
    std::cout << "wrote " << out << " (" << rows.size() << " rows)\n";
    return 0;
}

int cmd_report(const std::string& metrics, const std::string& out, const std::string& figure_axis,
               const std::string& figure_out, bool force) {
    require_writable(out, force);
    std::vector<fap::RunRecord> records;
    for (const auto& path : split_csv(metrics))
        for (auto& r : fap::parse_metrics(path)) records.push_back(std::move(r));
    std::ofstream f(out, std::ios::trunc);
    f << fap::render_report(records);
    std::cout << "wrote " << out << "\n";
    if (!figure_out.empty()) {
        require_writable(figure_out, force);
        std::ofstream g(figure_out, std::ios::trunc);
        g << fap::render_figure_csv(records, figure_axis);
        std::cout << "wrote " << figure_out << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"few-shot adversarial prompt tuning workbench"};
    app.require_subcommand(1);
    std::string config, out, data, backbone, prompts, metrics, run_id = "eval", eps = "1/255";
    std::string axis, values, seeds = "1,2,3", classes, figure_axis = "lambda", figure_out;
    std::vector<std::string> sets;
    std::size_t steps = 20;
    bool force = false;
    auto add_force = [&](CLI::App* sub) { sub->add_flag("--force", force, "overwrite existing artifacts"); };

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset file");
    gen->add_option("--config", config);
    gen->add_option("--set", sets, "dotted-key override, key=value");
    gen->add_option("--out", out)->required();

    auto* pre = app.add_subcommand("pretrain", "pretrain and freeze the backbone");
    pre->add_option("--data", data)->required();
    pre->add_option("--config", config);
    pre->add_option("--set", sets);
    pre->add_option("--out", out)->required();

    auto* tr = app.add_subcommand("train", "train prompts, write a run directory");
    tr->add_option("--config", config)->required();
    tr->add_option("--set", sets);

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint, append a metrics row");
    ev->add_option("--backbone", backbone)->required();
    ev->add_option("--data", data)->required();
    ev->add_option("--prompts", prompts, "prompt checkpoint; omit for zero-shot");
    ev->add_option("--metrics", metrics)->required();
    ev->add_option("--run-id", run_id);
    ev->add_option("--eps", eps, "radius, rationals like 1/255 accepted");
    ev->add_option("--steps", steps);
    ev->add_option("--classes", classes, "comma-separated class ids");

    auto* sw = app.add_subcommand("sweep", "train/evaluate one run per axis value and seed");
    sw->add_option("--config", config)->required();
    sw->add_option("--set", sets);
    sw->add_option("--axis", axis)->required();
    sw->add_option("--values", values)->required();
    sw->add_option("--seeds", seeds);
    sw->add_option("--out", out)->required();

    auto* rp = app.add_subcommand("report", "render metrics files to Markdown and figure CSVs");
    rp->add_option("--metrics", metrics)->required();
    rp->add_option("--out", out)->required();
    rp->add_option("--figure-axis", figure_axis);
    rp->add_option("--figure-out", figure_out);
    for (CLI::App* sub : {gen, pre, tr, sw, rp}) add_force(sub);

    CLI11_PARSE(app, argc, argv);
    try {
        if (gen->parsed()) return cmd_gen_data(config, sets, out, force);
        if (pre->parsed()) return cmd_pretrain(data, config, sets, out, force);
        if (tr->parsed()) return cmd_train(config, sets, force);
        if (ev->parsed()) return cmd_eval(backbone, data, prompts, metrics, run_id, eps, steps, classes);
        if (sw->parsed()) return cmd_sweep(config, sets, axis, values, seeds, out, force);
        if (rp->parsed()) return cmd_report(metrics, out, figure_axis, figure_out, force);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
