#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <set>

#include "fap/dataio.hpp"

using namespace fap;

namespace {

SyntheticSpec small_spec() {
    SyntheticSpec s;
    s.train_per_class = 8;
    s.test_per_class = 8;
    s.seed = 7;
    return s;
}

// fraction of pixels in channel `c` above `thresh`
double channel_coverage(const double* img, std::size_t S, std::size_t c, double thresh) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < S * S; ++i)
        if (img[c * S * S + i] > thresh) ++hits;
    return static_cast<double>(hits) / static_cast<double>(S * S);
}

}  // namespace

TEST_CASE("class naming and captions") {
    SyntheticSpec s;
    CHECK(s.class_name(0) == "red circle");
    CHECK(s.class_name(5) == "green square");
    CHECK(s.class_name(15) == "yellow cross");
    CHECK(s.caption(10) == "a photo of a blue triangle");
    CHECK_THROWS(s.class_name(16));
    Dataset ds = generate(small_spec());
    Tokenizer tok = Tokenizer::shapes_vocab();
    // every caption token sequence round-trips through the tokenizer
    for (std::size_t cls = 0; cls < 16; ++cls) {
        const auto& ids = ds.captions[cls];
        CHECK(ids.front() == tok.start_id());
        CHECK(ids.back() == tok.end_id());
        std::vector<std::size_t> body(ids.begin() + 1, ids.end() - 1);
        CHECK(tok.decode(body) == ds.spec.caption(cls));
    }
}

TEST_CASE("generation determinism and pixel range") {
    Dataset a = generate(small_spec());
    Dataset b = generate(small_spec());
    CHECK(a.train.images == b.train.images);
    CHECK(a.test.images == b.test.images);
    SyntheticSpec other = small_spec();
    other.seed = 8;
    Dataset c = generate(other);
    CHECK(a.train.images != c.train.images);
    // train and test splits are disjoint draws
    CHECK(a.train.images != a.test.images);
    for (double v : a.train.images) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    CHECK(a.train.count == 16 * 8);
    CHECK(a.test.count == 16 * 8);
}

TEST_CASE("rendered shapes have sane color and coverage") {
    SyntheticSpec s = small_spec();
    Dataset ds = generate(s);
    std::size_t S = s.image_size;
    std::size_t px = 3 * S * S;
    for (std::size_t i = 0; i < ds.train.count; ++i) {
        std::size_t cls = ds.train.labels[i];
        const double* img = ds.train.images.data() + i * px;
        // the dominant channel of the class color must light up part of the image
        std::size_t color = cls % 4;
        std::size_t dom = color == 3 ? 0 : color;  // yellow peaks in red and green
        double cov = channel_coverage(img, S, dom, 0.5);
        CHECK(cov > 0.01);   // shape present
        CHECK(cov < 0.60);   // background dominates
    }
    // shape classes differ in footprint: a cross covers less than a square at equal scale,
    // checked statistically over the per-class mean coverage of the bright region
    auto mean_cov = [&](std::size_t cls) {
        double acc = 0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < ds.train.count; ++i) {
            if (ds.train.labels[i] != cls) continue;
            const double* img = ds.train.images.data() + i * px;
            double c = 0;
            for (std::size_t j = 0; j < S * S; ++j) {
                double mx = std::max({img[j], img[S * S + j], img[2 * S * S + j]});
                if (mx > 0.5) c += 1;
            }
            acc += c / (S * S);
            ++n;
        }
        return acc / static_cast<double>(n);
    };
    CHECK(mean_cov(4) > mean_cov(12));  // red square vs red cross
}

TEST_CASE("few-shot sampling") {
    Dataset ds = generate(small_spec());
    FewShotDataset fs = sample_few_shot(ds, 4, 3);
    CHECK(fs.labels.size() == 16 * 4);
    CHECK(fs.shots == 4);
    // labels are local positions, 4 of each
    std::vector<std::size_t> counts(16, 0);
    for (std::size_t l : fs.labels) {
        REQUIRE(l < 16);
        ++counts[l];
    }
    for (std::size_t c : counts) CHECK(c == 4);
    // deterministic under seed, different across seeds
    FewShotDataset fs2 = sample_few_shot(ds, 4, 3);
    CHECK(fs.images == fs2.images);
    FewShotDataset fs3 = sample_few_shot(ds, 4, 4);
    CHECK(fs.images != fs3.images);
    // no duplicate images within a class
    std::size_t px = 3 * 32 * 32;
    for (std::size_t c = 0; c < 16; ++c) {
        std::set<std::vector<double>> seen;
        for (std::size_t i = 0; i < fs.labels.size(); ++i) {
            if (fs.labels[i] != c) continue;
            std::vector<double> img(fs.images.begin() + i * px, fs.images.begin() + (i + 1) * px);
            CHECK(seen.insert(std::move(img)).second);
        }
    }
    CHECK_THROWS(sample_few_shot(ds, 9, 0));  // only 8 per class available
}

TEST_CASE("base/new split is compositional") {
    auto [base, nw] = base_new_split(16);
    REQUIRE(base.size() == 8);
    REQUIRE(nw.size() == 8);
    // base covers shapes {circle, square} in all colors; new covers {triangle, cross}
    std::set<std::size_t> base_shapes, new_shapes, base_colors, new_colors;
    for (std::size_t c : base) {
        base_shapes.insert(c / 4);
        base_colors.insert(c % 4);
    }
    for (std::size_t c : nw) {
        new_shapes.insert(c / 4);
        new_colors.insert(c % 4);
    }
    CHECK(base_shapes == std::set<std::size_t>{0, 1});
    CHECK(new_shapes == std::set<std::size_t>{2, 3});
    CHECK(base_colors.size() == 4);  // every color seen during base training
    CHECK(new_colors.size() == 4);
    CHECK_THROWS(base_new_split(15));
}

TEST_CASE("test subset restriction and label remapping") {
    Dataset ds = generate(small_spec());
    auto [base, nw] = base_new_split(16);
    FewShotDataset sub = test_subset(ds, nw, "new");
    CHECK(sub.labels.size() == 8 * 8);
    CHECK(sub.role == "new");
    for (std::size_t l : sub.labels) CHECK(l < 8);
    // remapped label 0 must correspond to class id nw[0]
    std::size_t px = 3 * 32 * 32;
    std::size_t first_global = 0;
    while (ds.test.labels[first_global] != nw[0]) ++first_global;
    std::size_t first_local = 0;
    while (sub.labels[first_local] != 0) ++first_local;
    std::vector<double> g(ds.test.images.begin() + first_global * px,
                          ds.test.images.begin() + (first_global + 1) * px);
    std::vector<double> l(sub.images.begin() + first_local * px,
                          sub.images.begin() + (first_local + 1) * px);
    CHECK(g == l);
}

TEST_CASE("dataset file round-trip") {
    Dataset ds = generate(small_spec());
    save_dataset("dataio_test.bin", ds);
    Dataset re = load_dataset("dataio_test.bin");
    CHECK(re.train.images == ds.train.images);
    CHECK(re.test.images == ds.test.images);
    CHECK(re.train.labels == ds.train.labels);
    CHECK(re.class_names == ds.class_names);
    CHECK(re.captions == ds.captions);
    CHECK(re.spec.seed == ds.spec.seed);
    std::remove("dataio_test.bin");
    CHECK_THROWS(load_dataset("dataio_test.bin"));
}
