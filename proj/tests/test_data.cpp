#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "dcml/data.hpp"
#include "oracles.hpp"

using namespace dcml;

namespace {

double latent_distance(const FaceSample& a, const FaceSample& b) {
    double sq = 0;
    for (size_t i = 0; i < a.latent.size(); ++i) {
        double d = a.latent[i] - b.latent[i];
        sq += d * d;
    }
    return std::sqrt(sq);
}

}  // namespace

TEST_CASE("generation is a pure function of the seed") {
    DataConfig cfg;
    cfg.num_families = 4;
    cfg.members_per_family = 3;
    cfg.image_size = 16;
    auto a = generate_family_dataset(cfg);
    auto b = generate_family_dataset(cfg);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].image.values() == b[i].image.values());
        REQUIRE(a[i].latent == b[i].latent);
        REQUIRE(a[i].age == b[i].age);
    }
    cfg.seed = 8;
    auto c = generate_family_dataset(cfg);
    REQUIRE(a[0].image.values() != c[0].image.values());
}

TEST_CASE("family and member counts are exact") {
    DataConfig cfg;
    cfg.num_families = 2;
    cfg.members_per_family = 2;
    cfg.image_size = 8;
    auto samples = generate_family_dataset(cfg);
    REQUIRE(samples.size() == 4);
    std::set<int> families;
    for (const auto& s : samples) families.insert(s.family_id);
    REQUIRE(families.size() == 2);
    // members of a family share its race and the first two members parent the rest
    REQUIRE(samples[0].race == samples[1].race);
    REQUIRE(samples[0].is_parent);
    REQUIRE(samples[1].is_parent);
    REQUIRE(samples[0].gender != samples[1].gender);
    for (const auto& s : samples) {
        for (float v : s.image.values()) {
            REQUIRE(v >= 0.0f);
            REQUIRE(v <= 1.0f);
        }
        if (s.is_parent) REQUIRE(s.age >= 0.5);
        else REQUIRE(s.age <= 0.5);
    }
}

TEST_CASE("within-family latent distances sit well below between-family ones") {
    DataConfig cfg;
    cfg.num_families = 1000;
    cfg.members_per_family = 2;
    cfg.image_size = 8;  // latents are what this measures; keep rendering cheap
    auto samples = generate_family_dataset(cfg);

    std::vector<double> within, between;
    Rng rng(13);
    for (int f = 0; f < cfg.num_families; ++f) {
        const auto& a = samples[size_t(2 * f)];
        const auto& b = samples[size_t(2 * f) + 1];
        within.push_back(latent_distance(a, b));
        int g = int(rng.below(uint64_t(cfg.num_families)));
        if (g == f) g = (f + 1) % cfg.num_families;
        between.push_back(latent_distance(a, samples[size_t(2 * g) + 1]));
    }
    auto mean_var = [](const std::vector<double>& v) {
        double m = 0;
        for (double x : v) m += x;
        m /= double(v.size());
        double var = 0;
        for (double x : v) var += (x - m) * (x - m);
        return std::pair{m, var / double(v.size())};
    };
    auto [mw, vw] = mean_var(within);
    auto [mb, vb] = mean_var(between);
    double sigma = std::sqrt(vw / double(within.size()) + vb / double(between.size()));
    REQUIRE(mb - mw > 3.0 * sigma);
}

TEST_CASE("a linear probe on ground-truth latents separates kin pairs with AUC over 0.9") {
    DataConfig cfg;  // default desk sizes and noise
    cfg.image_size = 8;
    auto samples = generate_family_dataset(cfg);
    auto proto = make_protocol(samples, cfg.seed);
    const auto& fold = proto.folds[0];

    int dim = cfg.latent_dim;
    auto feature = [&](const PairRef& p) {
        std::vector<double> f(static_cast<size_t>(dim));
        for (int j = 0; j < dim; ++j)
            f[size_t(j)] = std::abs(samples[size_t(p.parent)].latent[size_t(j)] -
                                    samples[size_t(p.child)].latent[size_t(j)]);
        return f;
    };

    // logistic regression on |delta latent|, trained on the train split
    std::vector<std::pair<std::vector<double>, int>> train;
    for (const auto& p : fold.train_positives) train.push_back({feature(p), 1});
    for (const auto& p : fold.negatives) train.push_back({feature(p), 0});
    std::vector<double> w(size_t(dim), 0.0);
    double b = 0.0;
    for (int it = 0; it < 300; ++it) {
        std::vector<double> gw(size_t(dim), 0.0);
        double gb = 0;
        for (const auto& [f, y] : train) {
            double z = b;
            for (int j = 0; j < dim; ++j) z += w[size_t(j)] * f[size_t(j)];
            double p = 1.0 / (1.0 + std::exp(-z));
            double d = p - y;
            for (int j = 0; j < dim; ++j) gw[size_t(j)] += d * f[size_t(j)];
            gb += d;
        }
        for (int j = 0; j < dim; ++j) w[size_t(j)] -= 0.1 * gw[size_t(j)] / double(train.size());
        b -= 0.1 * gb / double(train.size());
    }

    // score held-out positives against non-kin pairs from the test split
    std::vector<double> pos_scores, neg_scores;
    auto score = [&](const PairRef& p) {
        double z = b;
        auto f = feature(p);
        for (int j = 0; j < dim; ++j) z += w[size_t(j)] * f[size_t(j)];
        return z;
    };
    for (const auto& p : fold.test_positives) pos_scores.push_back(score(p));
    for (const auto& p : fold.test_positives)
        for (const auto& q : fold.test_positives)
            if (samples[size_t(p.parent)].family_id != samples[size_t(q.child)].family_id)
                neg_scores.push_back(score({p.parent, q.child}));
    REQUIRE(oracle::auc(pos_scores, neg_scores) > 0.9);
}

TEST_CASE("protocol folds partition families with an 80/20 split") {
    DataConfig cfg;
    cfg.num_families = 10;
    cfg.members_per_family = 4;
    cfg.image_size = 8;
    auto samples = generate_family_dataset(cfg);
    auto proto = make_protocol(samples, 99);
    REQUIRE(proto.folds.size() == 5);

    std::set<int> seen;
    for (const auto& fold : proto.folds) {
        REQUIRE(fold.test_families.size() == 2);  // 10 families over 5 folds
        for (int f : fold.test_families) {
            REQUIRE_FALSE(seen.count(f));  // no family straddles folds
            seen.insert(f);
        }
        REQUIRE(fold.test_samples.size() == 8);    // 20%
        REQUIRE(fold.train_samples.size() == 32);  // 80%
    }
    REQUIRE(seen.size() == 10);

    SECTION("positive pairs stay within families, negatives never do") {
        for (const auto& fold : proto.folds) {
            for (const auto& p : fold.train_positives) {
                REQUIRE(samples[size_t(p.parent)].family_id == samples[size_t(p.child)].family_id);
                REQUIRE(samples[size_t(p.parent)].is_parent);
                REQUIRE_FALSE(samples[size_t(p.child)].is_parent);
            }
            std::set<int> used_parents, used_children;
            for (const auto& n : fold.negatives) {
                REQUIRE(samples[size_t(n.parent)].family_id != samples[size_t(n.child)].family_id);
                REQUIRE_FALSE(used_parents.count(n.parent));  // each parent once
                REQUIRE_FALSE(used_children.count(n.child));  // each child at most once
                used_parents.insert(n.parent);
                used_children.insert(n.child);
            }
        }
    }

    SECTION("too few families is an error") {
        DataConfig small;
        small.num_families = 4;
        small.image_size = 8;
        auto s = generate_family_dataset(small);
        REQUIRE_THROWS_AS(make_protocol(s, 1), ConfigError);
    }
}

TEST_CASE("dataset directory round-trips meta.json and TNS1 images") {
    namespace fs = std::filesystem;
    DataConfig cfg;
    cfg.num_families = 3;
    cfg.members_per_family = 2;
    cfg.image_size = 12;
    auto samples = generate_family_dataset(cfg);
    auto dir = fs::temp_directory_path() / "dcml_test_dataset";
    fs::remove_all(dir);
    save_dataset(dir, samples, cfg);

    REQUIRE(fs::exists(dir / "meta.json"));
    REQUIRE(fs::exists(dir / "img_0000.tns"));

    auto loaded = load_dataset(dir);
    REQUIRE(loaded.samples.size() == samples.size());
    REQUIRE(loaded.config.num_families == 3);
    for (size_t i = 0; i < samples.size(); ++i) {
        REQUIRE(loaded.samples[i].image.values() == samples[i].image.values());
        REQUIRE(loaded.samples[i].family_id == samples[i].family_id);
        REQUIRE(loaded.samples[i].race == samples[i].race);
    }
    fs::remove_all(dir);
}
