#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fap/pipeline.hpp"

// Pure rendering of metrics files into a Markdown summary plus flat CSVs for
// external plotting. Same inputs, byte-identical output.

namespace fap {

inline std::vector<RunRecord> parse_metrics(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open metrics file: " + path);
    std::string line;
    if (!std::getline(f, line) || line != csv_header())
        throw std::runtime_error("unexpected metrics header in " + path);
    std::vector<RunRecord> out;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 14) throw std::runtime_error("malformed metrics row in " + path + ": " + line);
        RunRecord r;
        r.run_id = cells[0];
        r.variant = cells[1];
        r.shots = std::stoul(cells[2]);
        r.lambda = std::stod(cells[3]);
        r.eps = std::stod(cells[4]);
        r.steps = std::stoul(cells[5]);
        r.seed = std::stoull(cells[6]);
        r.epoch = std::stoul(cells[7]);
        r.nat_acc = std::stod(cells[8]);
        r.adv_acc = std::stod(cells[9]);
        r.ce_mean = std::stod(cells[10]);
        r.consistency_mean = std::stod(cells[11]);
        r.diversity_mean = std::stod(cells[12]);
        r.wallclock_s = std::stod(cells[13]);
        out.push_back(std::move(r));
    }
    return out;
}

namespace detail {

// strips a trailing "-s<seed>" sweep suffix so seed replicates group together
inline std::string group_key(const std::string& run_id) {
    auto pos = run_id.rfind("-s");
    if (pos == std::string::npos) return run_id;
    for (std::size_t i = pos + 2; i < run_id.size(); ++i)
        if (!std::isdigit(static_cast<unsigned char>(run_id[i]))) return run_id;
    return pos + 2 < run_id.size() ? run_id.substr(0, pos) : run_id;
}

inline std::string pct(double v) { return fmt_num(100.0 * v); }

}  // namespace detail

// Markdown: the raw rows, per-group seed averages, and a base-to-new block
// for groups that come in "<name>-base" / "<name>-new" pairs.
inline std::string render_report(const std::vector<RunRecord>& records) {
    std::ostringstream md;
    md << "# Run summary\n\n";
    md << "## All runs\n\n";
    md << "| run_id | variant | shots | lambda | eps | steps | seed | Nat Acc (%) | Adv Acc (%) |\n";
    md << "|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : records)
        md << "| " << r.run_id << " | " << r.variant << " | " << r.shots << " | " << fmt_num(r.lambda)
           << " | " << fmt_num(r.eps) << " | " << r.steps << " | " << r.seed << " | "
           << detail::pct(r.nat_acc) << " | " << detail::pct(r.adv_acc) << " |\n";

    // seed averages, insertion-ordered
    std::vector<std::string> order;
    std::map<std::string, std::vector<const RunRecord*>> groups;
    for (const auto& r : records) {
        std::string key = detail::group_key(r.run_id);
        if (!groups.count(key)) order.push_back(key);
        groups[key].push_back(&r);
    }
    md << "\n## Seed averages\n\n";
    md << "| group | runs | Nat Acc (%) | Adv Acc (%) |\n|---|---|---|---|\n";
    for (const auto& key : order) {
        const auto& g = groups[key];
        double nat = 0, adv = 0;
        for (const auto* r : g) {
            nat += r->nat_acc;
            adv += r->adv_acc;
        }
        nat /= static_cast<double>(g.size());
        adv /= static_cast<double>(g.size());
        md << "| " << key << " | " << g.size() << " | " << detail::pct(nat) << " | "
           << detail::pct(adv) << " |\n";
    }

    // base-to-new pairs
    std::vector<std::string> pair_names;
    for (const auto& key : order) {
        if (key.size() > 5 && key.compare(key.size() - 5, 5, "-base") == 0) {
            std::string stem = key.substr(0, key.size() - 5);
            if (groups.count(stem + "-new")) pair_names.push_back(stem);
        }
    }
    if (!pair_names.empty()) {
        md << "\n## Base-to-new generalization\n\n";
        md << "| group | Base Nat Acc (%) | Base Adv Acc (%) | New Nat Acc (%) | New Adv Acc (%) |\n";
        md << "|---|---|---|---|---|\n";
        for (const auto& stem : pair_names) {
            auto mean = [&](const std::string& key, bool adv) {
                const auto& g = groups[key];
                double acc = 0;
                for (const auto* r : g) acc += adv ? r->adv_acc : r->nat_acc;
                return acc / static_cast<double>(g.size());
            };
            md << "| " << stem << " | " << detail::pct(mean(stem + "-base", false)) << " | "
               << detail::pct(mean(stem + "-base", true)) << " | "
               << detail::pct(mean(stem + "-new", false)) << " | "
               << detail::pct(mean(stem + "-new", true)) << " |\n";
        }
    }
    return md.str();
}

// Flat CSV keyed by a chosen axis column for external plotting.
inline std::string render_figure_csv(const std::vector<RunRecord>& records, const std::string& axis) {
    std::ostringstream csv;
    csv << axis << ",seed,nat_acc,adv_acc\n";
    for (const auto& r : records) {
        std::string v;
        if (axis == "lambda") v = fmt_num(r.lambda);
        else if (axis == "shots") v = std::to_string(r.shots);
        else if (axis == "eps") v = fmt_num(r.eps);
        else if (axis == "steps") v = std::to_string(r.steps);
        else if (axis == "variant") v = r.variant;
        else throw std::invalid_argument("figure axis must be one of lambda/shots/eps/steps/variant");
        csv << v << "," << r.seed << "," << fmt_num(r.nat_acc) << "," << fmt_num(r.adv_acc) << "\n";
    }
    return csv.str();
}

}  // namespace fap
