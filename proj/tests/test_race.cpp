#include <catch2/catch_amalgamated.hpp>

#include "dcml/race.hpp"
#include "oracles.hpp"

using namespace dcml;

namespace {

Tensor<double> random_image(int size, Rng& rng) {
    std::vector<double> v(size_t(size) * size * 3);
    for (auto& x : v) x = rng.uniform(0.0, 1.0);
    return Tensor<double>::from_data({size, size, 3}, std::move(v));
}

RaceConfig tiny_config() {
    RaceConfig cfg;
    cfg.backbone.stem_channels = 4;
    cfg.backbone.stage_blocks = {1, 1, 1};
    cfg.backbone.stage_bottleneck = {2, 2, 2};
    cfg.backbone.stage_channels = {4, 6, 8};
    cfg.backbone.feature_dim = 10;
    return cfg;
}

}  // namespace

TEST_CASE("race loss identities") {
    SECTION("uniform logits over three classes cost ln 3") {
        auto logits = Tensor<double>::zeros({2, 3});
        auto loss = race_loss(logits, {0, 2});
        REQUIRE(loss.item() == Catch::Approx(std::log(3.0)).margin(1e-12));
    }

    SECTION("a 20-unit margin saturates the softmax") {
        auto logits = Tensor<double>::from_data({1, 3}, {20.0, 0.0, 0.0});
        REQUIRE(race_loss(logits, {0}).item() < 1e-8);
        REQUIRE(race_loss(logits, {0}).item() >= 0.0);
    }

    SECTION("single-row example against the scalar computation") {
        auto logits = Tensor<double>::from_data({1, 3}, {1.0, 0.0, 0.0});
        double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
        REQUIRE(race_loss(logits, {0}).item() == Catch::Approx(expected).margin(1e-12));
    }

    SECTION("labels outside {0,1,2} are rejected") {
        auto logits = Tensor<double>::zeros({1, 3});
        REQUIRE_THROWS_AS(race_loss(logits, {3}), ValueError);
        REQUIRE_THROWS_AS(race_loss(logits, {-1}), ValueError);
        auto wide = Tensor<double>::zeros({1, 4});
        REQUIRE_THROWS_AS(race_loss(wide, {0}), ShapeError);
    }

    SECTION("loss is non-negative on random logits") {
        Rng rng(71);
        for (int trial = 0; trial < 30; ++trial) {
            std::vector<double> v(9);
            for (auto& x : v) x = rng.uniform(-8.0, 8.0);
            auto logits = Tensor<double>::from_data({3, 3}, std::move(v));
            std::vector<int> labels = {int(rng.below(3)), int(rng.below(3)), int(rng.below(3))};
            REQUIRE(race_loss(logits, labels).item() >= 0.0);
        }
    }

    SECTION("gradient check") {
        Rng rng(72);
        std::vector<double> v(12);
        for (auto& x : v) x = rng.uniform(-2.0, 2.0);
        auto logits = Tensor<double>::from_data({4, 3}, std::move(v));
        auto fd = oracle::max_fd_rel_error({logits}, [&]() { return race_loss(logits, {0, 1, 2, 1}); });
        REQUIRE(fd < 1e-4);
    }
}

TEST_CASE("race encoder is deterministic and freezable") {
    Rng rng(73);
    auto enc = RaceEncoder<double>::build(tiny_config(), rng);
    auto img = random_image(16, rng);

    auto f1 = enc.encode(img);
    auto f2 = enc.encode(img);
    REQUIRE(f1.values() == f2.values());
    REQUIRE(f1.shape() == Shape{10});
    REQUIRE(enc.logits(img).shape() == Shape{3});

    SECTION("frozen parameters take no gradient and keep their checksum") {
        enc.freeze();
        REQUIRE(enc.frozen());
        uint64_t before = enc.params().checksum();

        GradTape<double> tape;
        GradTape<double>::Scope scope(tape);
        auto loss = race_loss(reshape(enc.logits(img), {1, 3}), {1});
        // nothing upstream requires grad, so the loss is a leaf-only graph
        REQUIRE(tape.size() == 0);
        (void)loss;
        for (const auto& [name, t] : enc.params().entries()) REQUIRE_FALSE(t.has_grad());
        REQUIRE(enc.params().checksum() == before);
    }

    SECTION("shape errors for wrong input sizes") {
        auto bad = Tensor<double>::zeros({16, 16});
        REQUIRE_THROWS_AS(enc.encode(bad), ShapeError);
    }
}

TEST_CASE("race encoder matches a layer-by-layer oracle") {
    // stem conv + pool recomputed with the direct convolution oracle
    Rng rng(74);
    auto cfg = tiny_config();
    auto enc = RaceEncoder<double>::build(cfg, rng);
    auto img = random_image(12, rng);

    auto stem_w = enc.params().select("race.G.stem.w")[0];
    auto stem_b = enc.params().select("race.G.stem.b")[0];
    auto ref = oracle::conv2d_direct(img.values(), 12, 12, 3, stem_w.values(), 7, 7,
                                     cfg.backbone.stem_channels, stem_b.values(), 1, 3);
    auto got = conv2d(img, stem_w, stem_b, 1, 3);
    REQUIRE(got.values().size() == ref.size());
    for (size_t i = 0; i < ref.size(); ++i)
        REQUIRE(got.values()[i] == Catch::Approx(ref[i]).margin(1e-9));
}
