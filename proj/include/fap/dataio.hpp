#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fap/rng.hpp"
#include "fap/tokenizer.hpp"

// Synthetic shape/color corpus: each class is a (shape, color) pair rendered
// at a seeded random position and scale over a dark noisy background, with
// captions "a photo of a {color} {shape}". Everything is byte-deterministic
// under the spec seed.

namespace fap {

inline const std::vector<std::string>& shape_names() {
    static const std::vector<std::string> v = {"circle", "square", "triangle", "cross"};
    return v;
}

inline const std::vector<std::string>& color_names() {
    static const std::vector<std::string> v = {"red", "green", "blue", "yellow"};
    return v;
}

struct SyntheticSpec {
    // class id = 4 * shape_index + color_index, so the first half of the ids
    // covers two shapes in all four colors (base/new splits stay compositional)
    std::size_t num_classes = 16;
    std::size_t image_size = 32;
    double noise_sigma = 0.05;
    double background = 0.10;
    double scale_min = 5.0;
    double scale_max = 11.0;
    std::size_t train_per_class = 192;
    std::size_t test_per_class = 64;
    std::uint64_t seed = 0;

    std::string class_name(std::size_t cls) const {
        if (cls >= num_classes) throw std::invalid_argument("class id out of range");
        return color_names()[cls % 4] + " " + shape_names()[cls / 4];
    }

    std::string caption(std::size_t cls) const { return "a photo of a " + class_name(cls); }
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
    j = {{"num_classes", s.num_classes}, {"image_size", s.image_size}, {"noise_sigma", s.noise_sigma},
         {"background", s.background},   {"scale_min", s.scale_min},   {"scale_max", s.scale_max},
         {"train_per_class", s.train_per_class}, {"test_per_class", s.test_per_class}, {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
    j.at("num_classes").get_to(s.num_classes);
    j.at("image_size").get_to(s.image_size);
    j.at("noise_sigma").get_to(s.noise_sigma);
    j.at("background").get_to(s.background);
    j.at("scale_min").get_to(s.scale_min);
    j.at("scale_max").get_to(s.scale_max);
    j.at("train_per_class").get_to(s.train_per_class);
    j.at("test_per_class").get_to(s.test_per_class);
    j.at("seed").get_to(s.seed);
}

struct DataSplit {
    std::vector<double> images;  // N x 3 x S x S, row-major, values in [0,1]
    std::vector<std::size_t> labels;
    std::size_t count = 0;

    const double* image(std::size_t i, std::size_t image_size) const {
        return images.data() + i * 3 * image_size * image_size;
    }
};

struct Dataset {
    SyntheticSpec spec;
    std::vector<std::string> class_names;
    std::vector<std::vector<std::size_t>> captions;  // token ids incl. start/end, per class
    DataSplit train, test;
};

// m examples per class, drawn from a train split
struct FewShotDataset {
    std::vector<double> images;
    std::vector<std::size_t> labels;
    std::vector<std::size_t> class_ids;  // dataset-level class ids covered, in order
    std::size_t shots = 0;
    std::string role;  // "train-shot" / "test" / "base" / "new"
};

namespace detail {

inline std::array<double, 3> color_rgb(std::size_t color_idx) {
    switch (color_idx) {
        case 0: return {0.90, 0.18, 0.18};  // red
        case 1: return {0.18, 0.88, 0.20};  // green
        case 2: return {0.20, 0.30, 0.92};  // blue
        default: return {0.92, 0.90, 0.18}; // yellow
    }
}

inline bool inside_shape(std::size_t shape_idx, double dx, double dy, double r) {
    switch (shape_idx) {
        case 0:  // circle
            return dx * dx + dy * dy <= r * r;
        case 1:  // square
            return std::max(std::abs(dx), std::abs(dy)) <= 0.85 * r;
        case 2: {  // upward triangle
            if (dy < -r || dy > 0.8 * r) return false;
            double half = (dy + r) / 1.8 / r * r;  // width grows linearly from apex
            return std::abs(dx) <= half;
        }
        default:  // cross
            return (std::abs(dx) <= 0.32 * r || std::abs(dy) <= 0.32 * r) &&
                   std::abs(dx) <= r && std::abs(dy) <= r;
    }
}

inline void render_image(const SyntheticSpec& spec, std::size_t cls, Rng& rng, double* out) {
    std::size_t S = spec.image_size;
    std::size_t shape_idx = cls / 4, color_idx = cls % 4;
    auto rgb = color_rgb(color_idx);
    double r = rng.uniform(spec.scale_min, spec.scale_max);
    double cx = rng.uniform(0.32 * S, 0.68 * S);
    double cy = rng.uniform(0.32 * S, 0.68 * S);
    for (std::size_t y = 0; y < S; ++y) {
        for (std::size_t x = 0; x < S; ++x) {
            bool hit = inside_shape(shape_idx, static_cast<double>(x) + 0.5 - cx,
                                    static_cast<double>(y) + 0.5 - cy, r);
            for (std::size_t c = 0; c < 3; ++c) {
                double base = hit ? rgb[c] : spec.background;
                double v = base + rng.normal(0.0, spec.noise_sigma);
                out[c * S * S + y * S + x] = std::clamp(v, 0.0, 1.0);
            }
        }
    }
}

inline void fill_split(const SyntheticSpec& spec, std::size_t per_class, std::uint64_t role_tag,
                       DataSplit& split) {
    std::size_t S = spec.image_size, px = 3 * S * S;
    split.count = spec.num_classes * per_class;
    split.images.assign(split.count * px, 0.0);
    split.labels.resize(split.count);
    Rng root(spec.seed);
    std::size_t i = 0;
    for (std::size_t cls = 0; cls < spec.num_classes; ++cls) {
        Rng class_rng = root.child(role_tag * 1000 + cls);
        for (std::size_t k = 0; k < per_class; ++k, ++i) {
            render_image(spec, cls, class_rng, split.images.data() + i * px);
            split.labels[i] = cls;
        }
    }
}

}  // namespace detail

inline Dataset generate(const SyntheticSpec& spec, const Tokenizer& tok = Tokenizer::shapes_vocab()) {
    if (spec.num_classes == 0 || spec.num_classes > 16)
        throw std::invalid_argument("generate: num_classes must be in [1,16]");
    Dataset ds;
    ds.spec = spec;
    for (std::size_t cls = 0; cls < spec.num_classes; ++cls) {
        ds.class_names.push_back(spec.class_name(cls));
        std::vector<std::size_t> ids;
        ids.push_back(tok.start_id());
        for (std::size_t id : tok.encode(spec.caption(cls))) ids.push_back(id);
        ids.push_back(tok.end_id());
        ds.captions.push_back(std::move(ids));
    }
    detail::fill_split(spec, spec.train_per_class, 1, ds.train);
    detail::fill_split(spec, spec.test_per_class, 2, ds.test);
    return ds;
}

// exactly m per class, deterministic under seed, drawn from the train split
inline FewShotDataset sample_few_shot(const Dataset& ds, std::size_t m, std::uint64_t seed,
                                      const std::vector<std::size_t>& class_ids_in = {}) {
    std::vector<std::size_t> class_ids = class_ids_in;
    if (class_ids.empty()) {
        class_ids.resize(ds.spec.num_classes);
        std::iota(class_ids.begin(), class_ids.end(), 0);
    }
    std::size_t px = 3 * ds.spec.image_size * ds.spec.image_size;
    FewShotDataset out;
    out.shots = m;
    out.role = "train-shot";
    out.class_ids = class_ids;
    Rng rng(seed ^ 0x5e1ec7ULL);
    for (std::size_t local = 0; local < class_ids.size(); ++local) {
        std::size_t cls = class_ids[local];
        std::vector<std::size_t> pool;
        for (std::size_t i = 0; i < ds.train.count; ++i)
            if (ds.train.labels[i] == cls) pool.push_back(i);
        if (pool.size() < m) throw std::invalid_argument("sample_few_shot: insufficient examples for class " +
                                                         std::to_string(cls));
        // Fisher-Yates prefix
        for (std::size_t i = 0; i < m; ++i) {
            std::size_t j = i + rng.below(pool.size() - i);
            std::swap(pool[i], pool[j]);
        }
        for (std::size_t i = 0; i < m; ++i) {
            const double* img = ds.train.images.data() + pool[i] * px;
            out.images.insert(out.images.end(), img, img + px);
            out.labels.push_back(local);
        }
    }
    return out;
}

// first half of the class ids -> base, second half -> new
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> base_new_split(std::size_t num_classes) {
    if (num_classes % 2 != 0)
        throw std::invalid_argument("base_new_split: odd class count needs an explicit split list");
    std::vector<std::size_t> base, nw;
    for (std::size_t i = 0; i < num_classes / 2; ++i) base.push_back(i);
    for (std::size_t i = num_classes / 2; i < num_classes; ++i) nw.push_back(i);
    return {base, nw};
}

// test subset restricted to the given classes, labels remapped to positions
inline FewShotDataset test_subset(const Dataset& ds, const std::vector<std::size_t>& class_ids,
                                  const std::string& role) {
    std::size_t px = 3 * ds.spec.image_size * ds.spec.image_size;
    FewShotDataset out;
    out.role = role;
    out.class_ids = class_ids;
    for (std::size_t i = 0; i < ds.test.count; ++i) {
        auto it = std::find(class_ids.begin(), class_ids.end(), ds.test.labels[i]);
        if (it == class_ids.end()) continue;
        const double* img = ds.test.images.data() + i * px;
        out.images.insert(out.images.end(), img, img + px);
        out.labels.push_back(static_cast<std::size_t>(it - class_ids.begin()));
    }
    return out;
}

// ------------------------------------------------------------------- file IO

inline void save_dataset(const std::string& path, const Dataset& ds) {
    nlohmann::json header;
    header["version"] = 1;
    header["spec"] = ds.spec;
    header["class_names"] = ds.class_names;
    header["captions"] = ds.captions;
    header["train_labels"] = ds.train.labels;
    header["test_labels"] = ds.test.labels;
    header["train_count"] = ds.train.count;
    header["test_count"] = ds.test.count;
    std::string hjson = header.dump();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    std::uint64_t hlen = hjson.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hjson.data(), static_cast<std::streamsize>(hjson.size()));
    f.write(reinterpret_cast<const char*>(ds.train.images.data()),
            static_cast<std::streamsize>(ds.train.images.size() * sizeof(double)));
    f.write(reinterpret_cast<const char*>(ds.test.images.data()),
            static_cast<std::streamsize>(ds.test.images.size() * sizeof(double)));
    if (!f) throw std::runtime_error("write failed: " + path);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hjson(hlen, '\0');
    f.read(hjson.data(), static_cast<std::streamsize>(hlen));
    nlohmann::json header = nlohmann::json::parse(hjson);
    Dataset ds;
    ds.spec = header.at("spec").get<SyntheticSpec>();
    header.at("class_names").get_to(ds.class_names);
    header.at("captions").get_to(ds.captions);
    header.at("train_labels").get_to(ds.train.labels);
    header.at("test_labels").get_to(ds.test.labels);
    ds.train.count = header.at("train_count");
    ds.test.count = header.at("test_count");
    std::size_t px = 3 * ds.spec.image_size * ds.spec.image_size;
    ds.train.images.resize(ds.train.count * px);
    ds.test.images.resize(ds.test.count * px);
    f.read(reinterpret_cast<char*>(ds.train.images.data()),
           static_cast<std::streamsize>(ds.train.images.size() * sizeof(double)));
    f.read(reinterpret_cast<char*>(ds.test.images.data()),
           static_cast<std::streamsize>(ds.test.images.size() * sizeof(double)));
    if (!f) throw std::runtime_error("truncated dataset file: " + path);
    return ds;
}

}  // namespace fap
