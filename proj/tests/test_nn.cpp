#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "dcml/nn.hpp"
#include "net_oracle.hpp"
#include "oracles.hpp"

using namespace dcml;

namespace {

Tensor<double> random_image(int h, int w, int c, Rng& rng) {
    std::vector<double> v(size_t(h) * w * c);
    for (auto& x : v) x = rng.uniform(0.0, 1.0);
    return Tensor<double>::from_data({h, w, c}, std::move(v));
}

BackboneConfig tiny_config() {
    BackboneConfig cfg;
    cfg.stem_channels = 4;
    cfg.stage_blocks = {1, 2, 1};
    cfg.stage_bottleneck = {2, 3, 4};
    cfg.stage_channels = {6, 8, 10};
    cfg.feature_dim = 12;
    return cfg;
}

// Closed-form parameter count from the declared layer dimensions.
int64_t expected_param_count(const BackboneConfig& cfg) {
    auto conv = [](int k, int ci, int co) { return int64_t(k) * k * ci * co + co; };
    int64_t total = conv(7, cfg.in_channels, cfg.stem_channels);
    int in_ch = cfg.stem_channels;
    for (int s = 0; s < 3; ++s)
        for (int b = 0; b < cfg.stage_blocks[size_t(s)]; ++b) {
            int stride = (s > 0 && b == 0) ? 2 : 1;
            int bn = cfg.stage_bottleneck[size_t(s)];
            int out = cfg.stage_channels[size_t(s)];
            total += conv(1, in_ch, bn) + conv(3, bn, bn) + conv(1, bn, out);
            if (in_ch != out || stride != 1) total += conv(1, in_ch, out);
            in_ch = out;
        }
    total += int64_t(in_ch) * cfg.feature_dim + cfg.feature_dim;
    return total;
}

}  // namespace

TEST_CASE("extract_patches copies sub-windows verbatim") {
    Rng rng(101);
    auto img = random_image(64, 64, 3, rng);
    PatchGeometry geom;
    auto patches = extract_patches(img, geom);
    REQUIRE(patches[0].shape() == Shape{48, 48, 3});
    // patch 0 pixel (0,0) is image pixel (0,0)
    for (int c = 0; c < 3; ++c)
        REQUIRE(patches[0].values()[size_t(c)] == img.values()[size_t(c)]);
    // patch 3 at offset (16,16)
    for (int c = 0; c < 3; ++c)
        REQUIRE(patches[3].values()[size_t(c)] == img.values()[(size_t(16) * 64 + 16) * 3 + size_t(c)]);

    SECTION("degenerate full-overlap geometry duplicates the image") {
        PatchGeometry tiny;
        tiny.image_h = tiny.image_w = 2;
        tiny.patch_h = tiny.patch_w = 2;
        tiny.offsets = {{{0, 0}, {0, 0}, {0, 0}, {0, 0}}};
        auto small = random_image(2, 2, 3, rng);
        auto four = extract_patches(small, tiny);
        for (const auto& p : four) REQUIRE(p.values() == small.values());
    }

    SECTION("constant images give constant patches") {
        auto flat = Tensor<double>::full({64, 64, 3}, 0.5);
        auto four = extract_patches(flat, geom);
        for (const auto& p : four)
            for (double v : p.values()) REQUIRE(v == 0.5);
    }

    SECTION("out-of-bounds geometry is rejected") {
        PatchGeometry bad;
        bad.offsets = {{{0, 0}, {0, 20}, {16, 0}, {16, 16}}};
        REQUIRE_THROWS_AS(extract_patches(img, bad), ConfigError);
    }

    SECTION("disjoint patches are rejected") {
        PatchGeometry bad;
        bad.image_h = bad.image_w = 64;
        bad.patch_h = bad.patch_w = 16;
        bad.offsets = {{{0, 0}, {0, 48}, {48, 0}, {48, 48}}};
        REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    }
}

TEST_CASE("desk backbone maps a 48x48 patch to the configured feature width") {
    Rng rng(102);
    ParamSet<double> ps;
    auto net = Backbone<double>::build(BackboneConfig::desk_scale(), rng, ps, "bb");
    auto out = net.forward(random_image(48, 48, 3, rng));
    REQUIRE(out.shape() == Shape{64});
}

TEST_CASE("paper-scale backbone reproduces the published shape schedule") {
    Rng rng(103);
    ParamSet<float> ps;
    auto net = Backbone<float>::build(BackboneConfig::paper_scale(), rng, ps, "bb");
    std::vector<float> v(48 * 48 * 3, 0.25f);
    auto img = Tensor<float>::from_data({48, 48, 3}, std::move(v));
    auto schedule = net.spatial_schedule(img);
    REQUIRE(schedule == std::vector<int>{24, 24, 12, 6});
    auto feature = net.forward(img);
    REQUIRE(feature.shape() == Shape{256});
}

TEST_CASE("backbone parameter count matches the closed form") {
    Rng rng(104);
    for (auto cfg : {tiny_config(), BackboneConfig::desk_scale()}) {
        ParamSet<double> ps;
        (void)Backbone<double>::build(cfg, rng, ps, "bb");
        REQUIRE(ps.count_elements() == expected_param_count(cfg));
    }
}

TEST_CASE("encoding shares weights across patches") {
    Rng rng(105);
    ParamSet<double> ps;
    auto cfg = tiny_config();
    auto net = Backbone<double>::build(cfg, rng, ps, "bb");
    PatchGeometry geom;
    geom.image_h = geom.image_w = 20;
    geom.patch_h = geom.patch_w = 16;
    geom.offsets = {{{0, 0}, {0, 4}, {4, 0}, {4, 4}}};
    auto img = random_image(20, 20, 3, rng);
    auto patches = extract_patches(img, geom);

    std::vector<std::vector<double>> features;
    for (const auto& p : patches) features.push_back(net.forward(p).values());

    SECTION("identical patches give identical features") {
        auto again = net.forward(patches[2]);
        REQUIRE(again.values() == features[2]);
    }

    SECTION("permuting the patches permutes the features") {
        std::array<int, 4> perm = {2, 0, 3, 1};
        for (int n = 0; n < 4; ++n)
            REQUIRE(net.forward(patches[size_t(perm[size_t(n)])]).values() ==
                    features[size_t(perm[size_t(n)])]);
    }
}

TEST_CASE("zero input with zero biases stays zero through the network") {
    Rng rng(106);
    ParamSet<double> ps;
    auto net = Backbone<double>::build(tiny_config(), rng, ps, "bb");
    auto zero = Tensor<double>::zeros({16, 16, 3});
    auto out = net.forward(zero);
    for (double v : out.values()) REQUIRE(v == 0.0);
}

TEST_CASE("backbone forward matches the independent layer-by-layer oracle") {
    Rng rng(107);
    ParamSet<double> ps;
    auto cfg = tiny_config();
    auto net = Backbone<double>::build(cfg, rng, ps, "bb");
    auto img = random_image(14, 14, 3, rng);
    auto got = net.forward(img);

    oracle::Map m;
    m.h = m.w = 14;
    m.c = 3;
    m.v = img.values();
    auto ref = oracle::backbone_forward(cfg, ps, "bb", m);
    REQUIRE(got.numel() == int64_t(ref.size()));
    for (size_t i = 0; i < ref.size(); ++i)
        REQUIRE(got.values()[i] == Catch::Approx(ref[i]).margin(1e-9));
}

TEST_CASE("sgd momentum follows the recurrence") {
    SECTION("plain gradient step") {
        auto p = Tensor<double>::scalar(0.0);
        p.set_requires_grad(true);
        p.grad()[0] = 2.0;
        SgdMomentum<double> opt({p}, LrSchedule{{{0, 1.0}}}, 0.0);
        opt.step(0);
        REQUIRE(p.values()[0] == Catch::Approx(-2.0));
    }

    SECTION("two momentum steps accumulate velocity") {
        auto p = Tensor<double>::scalar(0.0);
        p.set_requires_grad(true);
        SgdMomentum<double> opt({p}, LrSchedule{{{0, 1.0}}}, 0.9);
        p.grad()[0] = 1.0;
        opt.step(0);
        p.zero_grad();
        p.grad()[0] = 1.0;
        opt.step(0);
        REQUIRE(p.values()[0] == Catch::Approx(-2.9));
    }

    SECTION("nan gradients abort the step") {
        auto p = Tensor<double>::scalar(0.0);
        p.set_requires_grad(true);
        p.grad()[0] = std::nan("");
        SgdMomentum<double> opt({p}, LrSchedule{{{0, 1.0}}}, 0.9);
        REQUIRE_THROWS_AS(opt.step(0), TrainError);
    }
}

TEST_CASE("adam matches an independent scalar recurrence") {
    auto p = Tensor<double>::scalar(1.0);
    p.set_requires_grad(true);
    Adam<double> opt({p}, LrSchedule{{{0, 0.01}}});

    double ref = 1.0, m = 0.0, v = 0.0;
    std::vector<double> grads = {0.5, -0.25, 0.8, 0.1};
    for (size_t t = 1; t <= grads.size(); ++t) {
        double g = grads[t - 1];
        p.zero_grad();
        p.grad()[0] = g;
        opt.step(0);

        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        double mh = m / (1.0 - std::pow(0.9, double(t)));
        double vh = v / (1.0 - std::pow(0.999, double(t)));
        ref -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
        REQUIRE(p.values()[0] == Catch::Approx(ref).margin(1e-12));
    }
}

TEST_CASE("learning-rate schedule picks the last boundary at or before the epoch") {
    LrSchedule sched{{{0, 5e-4}, {2, 1e-3}}};
    REQUIRE(sched.rate_at(0) == 5e-4);
    REQUIRE(sched.rate_at(1) == 5e-4);
    REQUIRE(sched.rate_at(2) == 1e-3);
    REQUIRE(sched.rate_at(10) == 1e-3);
}

TEST_CASE("optimizer updates are deterministic") {
    auto run = [&]() {
        Rng rng(108);
        ParamSet<double> ps;
        auto net = Backbone<double>::build(tiny_config(), rng, ps, "bb");
        auto img = random_image(14, 14, 3, rng);
        SgdMomentum<double> opt(ps.tensors(), LrSchedule{{{0, 0.01}}}, 0.9);
        for (int step = 0; step < 2; ++step) {
            GradTape<double> tape;
            GradTape<double>::Scope scope(tape);
            auto loss = mean(net.forward(img));
            tape.backward(loss);
            tape.clear();
            opt.step(0);
            ps.zero_grad();
        }
        return ps.checksum();
    };
    REQUIRE(run() == run());
}

TEST_CASE("DCK1 checkpoints round-trip the registry") {
    namespace fs = std::filesystem;
    Rng rng(109);
    ParamSet<double> ps;
    (void)Backbone<double>::build(tiny_config(), rng, ps, "bb");
    auto path = fs::temp_directory_path() / "dcml_test_ckpt.dck1";
    ps.save(path);

    Rng rng2(999);
    ParamSet<double> ps2;
    (void)Backbone<double>::build(tiny_config(), rng2, ps2, "bb");
    REQUIRE(ps2.checksum() != ps.checksum());
    ps2.load(path);
    REQUIRE(ps2.checksum() == ps.checksum());

    SECTION("bad magic is rejected") {
        auto bad = fs::temp_directory_path() / "dcml_bad.dck1";
        std::ofstream os(bad, std::ios::binary);
        os << "NOPE";
        os.close();
        REQUIRE_THROWS_AS(ps2.load(bad), IoError);
        fs::remove(bad);
    }
    fs::remove(path);
}

TEST_CASE("backbone config validation") {
    BackboneConfig cfg = tiny_config();
    cfg.stem_channels = 0;
    Rng rng(110);
    ParamSet<double> ps;
    REQUIRE_THROWS_AS(Backbone<double>::build(cfg, rng, ps, "bb"), ConfigError);
}
