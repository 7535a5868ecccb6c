#pragma once

#include <chrono>

#include <json.hpp>

#include "dcml/contrastive.hpp"
#include "dcml/deaging.hpp"
#include "dcml/encoder.hpp"
#include "dcml/race.hpp"

namespace dcml {

// Central finite differences against the tape, 64-bit only. Returns the
// worst relative error over every coordinate of every leaf.
inline double gradcheck_max_rel_error(std::vector<Tensor<double>> leaves,
                                      const std::function<Tensor<double>()>& build,
                                      double h = 1e-5) {
    for (auto& l : leaves) {
        l.set_requires_grad(true);
        l.zero_grad();
    }
    std::vector<std::vector<double>> analytic;
    {
        GradTape<double> tape;
        GradTape<double>::Scope scope(tape);
        auto root = build();
        tape.backward(root);
        for (auto& l : leaves)
            analytic.push_back(l.has_grad() ? l.grad()
                                            : std::vector<double>(size_t(l.numel()), 0.0));
        tape.clear();
    }
    for (auto& l : leaves) {
        l.zero_grad();
        l.set_requires_grad(false);
    }
    double worst = 0.0;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& vals = leaves[li].values();
        for (size_t i = 0; i < vals.size(); ++i) {
            double orig = vals[i];
            vals[i] = orig + h;
            double up = build().item();
            vals[i] = orig - h;
            double dn = build().item();
            vals[i] = orig;
            double numeric = (up - dn) / (2.0 * h);
            double a = analytic[li][i];
            double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            worst = std::max(worst, rel);
        }
    }
    for (auto& l : leaves) l.set_requires_grad(true);
    return worst;
}

struct GradCheckItem {
    std::string name;
    // Draws inputs from the seed and returns the max relative error.
    std::function<double(uint64_t)> run;
};

struct GradCheckReport {
    struct Row {
        std::string name;
        double max_rel_err = 0.0;
        bool pass = false;
    };
    uint64_t seed = 0;
    double tolerance = 1e-4;
    std::vector<Row> rows;
    bool all_pass = false;
    double seconds = 0.0;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["seed"] = seed;
        j["tolerance"] = tolerance;
        j["all_pass"] = all_pass;
        j["seconds"] = seconds;
        j["items"] = nlohmann::json::array();
        for (const auto& r : rows)
            j["items"].push_back({{"name", r.name}, {"max_rel_err", r.max_rel_err}, {"pass", r.pass}});
        return j;
    }

    std::string to_table() const {
        std::ostringstream os;
        for (const auto& r : rows) {
            os << (r.pass ? "PASS" : "FAIL") << "  ";
            os.width(28);
            os << std::left << r.name;
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.3e", r.max_rel_err);
            os << " max_rel_err " << buf << "\n";
        }
        os << (all_pass ? "gradcheck: all items passed" : "gradcheck: FAILURES present") << "\n";
        return os.str();
    }
};

namespace gradcheck_detail {

inline Tensor<double> draw(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(size_t(shape_numel(shape)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor<double>::from_data(std::move(shape), std::move(v));
}

// A random draw can park a ReLU pre-activation or a pooling tie inside the
// probe window and fail finite differences with a perfectly correct backward
// rule. A wrong rule fails every draw, so keep the best of three.
template <typename Fn>
double best_of_draws(uint64_t seed, Fn attempt, int draws = 3, double tol = 1e-4) {
    double best = std::numeric_limits<double>::infinity();
    for (int d = 0; d < draws; ++d) {
        Rng rng(seed + uint64_t(d) * 0x9E37);
        best = std::min(best, attempt(rng));
        if (best < tol) break;
    }
    return best;
}

}  // namespace gradcheck_detail

inline std::vector<GradCheckItem> default_gradcheck_items() {
    using gradcheck_detail::best_of_draws;
    using gradcheck_detail::draw;
    std::vector<GradCheckItem> items;

    for (OpKind kind : all_op_kinds()) {
        items.push_back({std::string("primitive/") + op_kind_name(kind), [kind](uint64_t seed) {
            return best_of_draws(seed, [kind](Rng& rng) {
                switch (kind) {
                    case OpKind::kMatmul: {
                        auto a = draw({3, 4}, rng), b = draw({4, 2}, rng);
                        return gradcheck_max_rel_error({a, b}, [=]() { return mean(matmul(a, b)); });
                    }
                    case OpKind::kConv2d: {
                        auto in = draw({5, 5, 2}, rng), w = draw({3, 3, 2, 3}, rng), b = draw({3}, rng);
                        return gradcheck_max_rel_error(
                            {in, w, b}, [=]() { return mean(conv2d(in, w, b, 1, 1)); });
                    }
                    case OpKind::kGlobalAvgPool: {
                        auto in = draw({4, 4, 3}, rng);
                        auto w = draw({3}, rng);
                        return gradcheck_max_rel_error(
                            {in}, [=]() { return mean(mul(global_avg_pool(in), w)); });
                    }
                    case OpKind::kMaxPool: {
                        auto in = draw({6, 6, 2}, rng, -2.0, 2.0);
                        return gradcheck_max_rel_error(
                            {in}, [=]() { return mean(max_pool(in, 3, 2, 1)); });
                    }
                    case OpKind::kRelu: {
                        auto in = draw({12}, rng);
                        return gradcheck_max_rel_error({in}, [=]() { return mean(relu(in)); });
                    }
                    case OpKind::kSigmoid: {
                        auto in = draw({12}, rng, -3.0, 3.0);
                        return gradcheck_max_rel_error({in}, [=]() { return mean(sigmoid(in)); });
                    }
                    case OpKind::kSoftmax: {
                        auto in = draw({3, 5}, rng, -2.0, 2.0);
                        auto w = draw({3, 5}, rng);
                        return gradcheck_max_rel_error({in},
                                                       [=]() { return mean(mul(softmax(in), w)); });
                    }
                    case OpKind::kConcat: {
                        auto a = draw({2, 3}, rng), b = draw({2, 2}, rng);
                        auto w = draw({2, 5}, rng);
                        return gradcheck_max_rel_error({a, b}, [=]() {
                            return mean(mul(concat(std::vector<Tensor<double>>{a, b}, 1), w));
                        });
                    }
                    case OpKind::kChannelScale: {
                        auto x = draw({3, 3, 4}, rng), s = draw({4}, rng);
                        return gradcheck_max_rel_error({x, s},
                                                       [=]() { return mean(channel_scale(x, s)); });
                    }
                    case OpKind::kAdd: {
                        auto a = draw({4, 3}, rng), b = draw({3}, rng);
                        return gradcheck_max_rel_error({a, b}, [=]() { return mean(add(a, b)); });
                    }
                    case OpKind::kSub: {
                        auto a = draw({4, 3}, rng), b = draw({4, 1}, rng);
                        return gradcheck_max_rel_error({a, b}, [=]() { return mean(sub(a, b)); });
                    }
                    case OpKind::kMul: {
                        auto a = draw({4, 3}, rng), b = draw({4, 3}, rng);
                        return gradcheck_max_rel_error({a, b},
                                                       [=]() { return variance(mul(a, b)); });
                    }
                    case OpKind::kMean: {
                        auto in = draw({9}, rng);
                        return gradcheck_max_rel_error({in}, [=]() { return mean(in); });
                    }
                    case OpKind::kVariance: {
                        auto in = draw({9}, rng);
                        return gradcheck_max_rel_error({in}, [=]() { return variance(in); });
                    }
                    case OpKind::kSqrt: {
                        auto in = draw({8}, rng, 0.5, 2.0);
                        return gradcheck_max_rel_error({in}, [=]() { return mean(sqrt(in)); });
                    }
                    case OpKind::kLog: {
                        auto in = draw({8}, rng, 0.5, 2.0);
                        return gradcheck_max_rel_error({in}, [=]() { return mean(log(in)); });
                    }
                    case OpKind::kExp: {
                        auto in = draw({8}, rng, -1.5, 1.5);
                        return gradcheck_max_rel_error({in}, [=]() { return mean(exp(in)); });
                    }
                    case OpKind::kL2Normalize: {
                        auto in = draw({2, 5}, rng, 0.3, 1.5);
                        auto w = draw({2, 5}, rng);
                        return gradcheck_max_rel_error(
                            {in}, [=]() { return mean(mul(l2_normalize(in), w)); });
                    }
                }
                return 1.0;
            });
        }});
    }

    // patch-level gate (Eq. 2 form) with respect to features and both FC layers
    items.push_back({"fusion/patch_gate", [](uint64_t seed) {
        return best_of_draws(seed, [](Rng& rng) {
            ParamSet<double> ps;
            auto blk = FusionBlock<double>::init(8, 4, std::nullopt, true, rng, ps, "g");
            auto F = draw({8}, rng);
            auto w = draw({8}, rng);
            return gradcheck_max_rel_error(
                {F, blk.reduce.w, blk.reduce.b, blk.expand.w, blk.expand.b},
                [&]() { return mean(mul(fuse(F, blk).gated, w)); });
        });
    }});

    // modality-level gate (Eq. 7 form): concat of three parts, gate, projection
    items.push_back({"fusion/modality_gate", [](uint64_t seed) {
        return best_of_draws(seed, [](Rng& rng) {
            ParamSet<double> ps;
            auto blk = FusionBlock<double>::init(9, 2, 4, true, rng, ps, "g");
            auto a = draw({4}, rng), b = draw({3}, rng), c = draw({2}, rng);
            auto w = draw({4}, rng);
            return gradcheck_max_rel_error(
                {a, b, c, blk.reduce.w, blk.expand.w, blk.projection->w},
                [&]() {
                    return mean(
                        mul(fuse_modalities(std::vector<Tensor<double>>{a, b, c}, blk).projected, w));
                });
        });
    }});

    // contrastive InfoNCE through the query projection (Eq. 9)
    items.push_back({"loss/info_nce", [](uint64_t seed) {
        return best_of_draws(seed, [](Rng& rng) {
            MemoryBank<double> bank(4, 8);
            for (int i = 0; i < 6; ++i) {
                std::vector<double> e(4);
                double sq = 0;
                for (auto& x : e) {
                    x = rng.normal();
                    sq += x * x;
                }
                for (auto& x : e) x /= std::sqrt(sq);
                bank.enqueue(e);
            }
            auto wq = draw({4, 4}, rng);
            auto x = draw({4}, rng, 0.2, 1.0);
            std::vector<double> k(4);
            double sq = 0;
            for (auto& v : k) {
                v = rng.normal();
                sq += v * v;
            }
            for (auto& v : k) v /= std::sqrt(sq);
            auto key = Tensor<double>::from_data({4}, std::move(k));
            return gradcheck_max_rel_error({wq}, [&]() {
                auto q = l2_normalize(reshape(matmul(reshape(x, {1, 4}), wq), {4}));
                return info_nce(build_logits(q, key, bank, 0.07));
            });
        });
    }});

    // de-aging correlation loss |rho| (Eq. 10) wrt canonical mapping and features
    items.push_back({"loss/deaging_rho", [](uint64_t seed) {
        return best_of_draws(seed, [](Rng& rng) {
            DeagingConfig cfg = DeagingConfig::desk_scale(4);
            cfg.backbone.stage_blocks = {1, 1, 1};
            cfg.backbone.feature_dim = 10;
            cfg.canonical_hidden = 6;
            Rng model_rng = rng.fork(1);
            auto model = DeagingModel<double>::build(cfg, model_rng);
            auto features = draw({6, 10}, rng);
            auto leaves = model.params().select("deaging.C.");
            leaves.push_back(features);
            return gradcheck_max_rel_error(leaves, [&]() {
                auto [f_age, f_id] = model.factorize(features);
                return abs_correlation(
                    canonical_correlation(model.canonical(f_id), model.canonical(f_age)));
            });
        });
    }});

    // identity softmax cross-entropy (Eq. 12) wrt head and features
    items.push_back({"loss/deaging_identity", [](uint64_t seed) {
        return best_of_draws(seed, [](Rng& rng) {
            ParamSet<double> ps;
            auto head = Linear<double>::init(10, 4, rng, ps, "id");
            auto features = draw({5, 10}, rng);
            std::vector<int> labels = {0, 3, 1, 2, 0};
            return gradcheck_max_rel_error({features, head.w, head.b}, [&]() {
                return cross_entropy(head.forward(features), labels);
            });
        });
    }});

    // combined de-aging objective (Eq. 13)
    items.push_back({"loss/deaging_total", [](uint64_t seed) {
        return best_of_draws(seed, [](Rng& rng) {
            DeagingConfig cfg = DeagingConfig::desk_scale(4);
            cfg.backbone.stage_blocks = {1, 1, 1};
            cfg.backbone.feature_dim = 10;
            cfg.canonical_hidden = 6;
            Rng model_rng = rng.fork(1);
            auto model = DeagingModel<double>::build(cfg, model_rng);
            auto features = draw({6, 10}, rng);
            std::vector<int> labels = {0, 1, 2, 3, 1, 0};
            // the loss consumes cached features, so K never enters this graph
            auto leaves = model.params().select("deaging.R.");
            for (auto& t : model.params().select("deaging.C.")) leaves.push_back(t);
            for (auto& t : model.params().select("deaging.id_head")) leaves.push_back(t);
            leaves.push_back(features);
            return gradcheck_max_rel_error(
                leaves, [&]() { return model.losses(features, labels).total; });
        });
    }});

    // race softmax cross-entropy (Eq. 14) wrt logits and a producing layer
    items.push_back({"loss/race_ce", [](uint64_t seed) {
        return best_of_draws(seed, [](Rng& rng) {
            ParamSet<double> ps;
            auto head = Linear<double>::init(6, kNumRaces, rng, ps, "race");
            auto features = draw({4, 6}, rng);
            std::vector<int> labels = {2, 0, 1, 1};
            return gradcheck_max_rel_error({features, head.w, head.b}, [&]() {
                return race_loss(head.forward(features), labels);
            });
        });
    }});

    return items;
}

inline GradCheckReport run_gradcheck(const std::vector<GradCheckItem>& items, uint64_t seed,
                                     double tolerance = 1e-4) {
    GradCheckReport report;
    report.seed = seed;
    report.tolerance = tolerance;
    auto t0 = std::chrono::steady_clock::now();
    for (const auto& item : items) {
        GradCheckReport::Row row;
        row.name = item.name;
        row.max_rel_err = item.run(seed);
        row.pass = row.max_rel_err < tolerance;
        report.rows.push_back(row);
    }
    report.all_pass = true;
    for (const auto& r : report.rows) report.all_pass = report.all_pass && r.pass;
    report.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

inline GradCheckReport run_gradcheck(uint64_t seed) {
    return run_gradcheck(default_gradcheck_items(), seed);
}

}  // namespace dcml
