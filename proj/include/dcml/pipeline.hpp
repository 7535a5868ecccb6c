#pragma once

#include "dcml/config.hpp"
#include "dcml/encoder.hpp"
#include "dcml/eval.hpp"
#include "dcml/gradcheck.hpp"

namespace dcml {

struct PipelinePaths {
    std::filesystem::path out_dir, checkpoints, logs, reports;

    static PipelinePaths at(const std::string& out_dir) {
        namespace fs = std::filesystem;
        PipelinePaths p;
        p.out_dir = out_dir;
        p.checkpoints = p.out_dir / "checkpoints";
        p.logs = p.out_dir / "logs";
        p.reports = p.out_dir / "reports";
        fs::create_directories(p.checkpoints);
        fs::create_directories(p.logs);
        fs::create_directories(p.reports);
        return p;
    }

    std::filesystem::path race_ckpt() const { return checkpoints / "race.dck1"; }
    std::filesystem::path deaging_ckpt() const { return checkpoints / "deaging.dck1"; }
    std::filesystem::path dcml_ckpt(const std::string& suffix = "") const {
        return checkpoints / ("dcml" + suffix + ".dck1");
    }
};

// Buffered line-JSON log, flushed atomically at the end of a stage.
class JsonlLog {
public:
    explicit JsonlLog(std::filesystem::path path) : path_(std::move(path)) {}
    void add(const nlohmann::json& j) { lines_.push_back(j.dump()); }
    const std::filesystem::path& path() const { return path_; }
    void write() const {
        detail::atomic_write(path_, [&](std::ostream& os) {
            for (const auto& l : lines_) os << l << "\n";
        });
    }

private:
    std::filesystem::path path_;
    std::vector<std::string> lines_;
};

inline uint64_t dck1_checksum(const std::filesystem::path& path) {
    auto entries = read_dck1<float>(path);
    uint64_t h = 0xCBF29CE484222325ULL;
    auto mix = [&h](const void* p, size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001B3ULL;
        }
    };
    for (const auto& [name, t] : entries) {
        mix(name.data(), name.size());
        for (float v : t.values()) mix(&v, sizeof v);
    }
    return h;
}

struct PipelineContext {
    RunConfig cfg;
    LoadedDataset data;
    Protocol protocol;
    PipelinePaths paths;

    static PipelineContext open(const RunConfig& cfg) {
        PipelineContext ctx;
        ctx.cfg = cfg;
        ctx.cfg.validate();
        ctx.data = load_dataset(cfg.data_dir);
        ctx.protocol = make_protocol(ctx.data.samples, ctx.data.config.seed);
        ctx.paths = PipelinePaths::at(cfg.out_dir);
        return ctx;
    }

    const Fold& fold(int idx) const {
        if (idx < 0 || idx >= int(protocol.folds.size()))
            throw ConfigError("fold index " + std::to_string(idx) + " out of range");
        return protocol.folds[size_t(idx)];
    }

    const Fold& active_fold() const { return fold(cfg.eval.fold < 0 ? 0 : cfg.eval.fold); }
};

inline std::filesystem::path run_synth(const RunConfig& cfg, const std::string& out_dir) {
    auto samples = generate_family_dataset(cfg.data);
    save_dataset(out_dir, samples, cfg.data);
    return out_dir;
}

// ---- stage 1: race ------------------------------------------------------------

inline std::filesystem::path train_race(const PipelineContext& ctx) {
    const auto& cfg = ctx.cfg;
    const auto& fold = ctx.active_fold();
    Rng rng(cfg.seed ^ 0x9ACEULL);
    auto enc = RaceEncoder<float>::build(cfg.race, rng);
    Adam<float> opt(enc.params().tensors(), cfg.race_train.lr);
    JsonlLog log(ctx.paths.logs / "race.jsonl");

    detail::BatchSampler sampler(fold.train_samples.size(), rng.fork(0x5A));
    int steps_per_epoch =
        std::max<int>(1, int(fold.train_samples.size()) / cfg.race_train.batch);
    int global_step = 0;
    for (int epoch = 0; epoch < cfg.race_train.epochs; ++epoch) {
        for (int s = 0; s < steps_per_epoch; ++s, ++global_step) {
            auto idx = sampler.next(cfg.race_train.batch);
            GradTape<float> tape;
            GradTape<float>::Scope scope(tape);
            std::vector<Tensor<float>> rows;
            std::vector<int> labels;
            for (int i : idx) {
                int sample = fold.train_samples[size_t(i)];
                rows.push_back(reshape(enc.logits(ctx.data.samples[size_t(sample)].image), {1, 3}));
                labels.push_back(ctx.data.samples[size_t(sample)].race);
            }
            auto loss = race_loss(concat(rows, 0), labels);
            if (!std::isfinite(double(loss.item())))
                throw TrainError("race stage epoch " + std::to_string(epoch) + " step " +
                                 std::to_string(s) + ": non-finite loss");
            tape.backward(loss);
            tape.clear();
            opt.step(epoch);
            enc.params().zero_grad();
            log.add({{"stage", "race"}, {"epoch", epoch}, {"step", global_step},
                     {"loss", double(loss.item())}});
        }
    }
    // training accuracy, for the log only
    int correct = 0;
    for (int i : fold.train_samples) {
        auto logits = enc.logits(ctx.data.samples[size_t(i)].image);
        int best = 0;
        for (int c = 1; c < 3; ++c)
            if (logits.values()[size_t(c)] > logits.values()[size_t(best)]) best = c;
        correct += best == ctx.data.samples[size_t(i)].race;
    }
    log.add({{"stage", "race"}, {"train_accuracy",
             double(correct) / double(fold.train_samples.size())}});
    log.write();
    enc.params().save(ctx.paths.race_ckpt());
    return ctx.paths.race_ckpt();
}

// ---- stage 2: de-aging ----------------------------------------------------------

struct DeagingStageResult {
    std::filesystem::path checkpoint;
    std::filesystem::path log;
    std::vector<DeagingLogRecord> records;
    int num_identities = 0;
    double identity_accuracy = 0.0;  // train top-1 of the identity head
};

inline DeagingStageResult train_deaging(const PipelineContext& ctx) {
    const auto& cfg = ctx.cfg;
    const auto& fold = ctx.active_fold();
    Rng rng(cfg.seed ^ 0xDA61ULL);

    std::vector<Tensor<float>> images;
    std::vector<int> labels;
    for (size_t pos = 0; pos < fold.train_samples.size(); ++pos) {
        images.push_back(ctx.data.samples[size_t(fold.train_samples[pos])].image);
        labels.push_back(int(pos));  // one identity per training person
    }
    DeagingConfig dcfg = cfg.deaging;
    dcfg.num_identities = int(images.size());
    auto model = DeagingModel<float>::build(dcfg, rng);

    auto records = adversarial_train(model, images, labels, cfg.deaging_train, rng.fork(2));

    JsonlLog log(ctx.paths.logs / "deaging.jsonl");
    for (const auto& r : records)
        log.add({{"phase", r.phase}, {"step", r.step}, {"rho", r.rho}, {"L_id", r.l_id}});

    // identity top-1 on the training set
    int correct = 0;
    for (size_t i = 0; i < images.size(); ++i) {
        auto [f_age, f_id] = model.factorize(model.encode(images[i]));
        auto logits = model.identity_logits(f_id);
        int best = 0;
        for (int c = 1; c < int(images.size()); ++c)
            if (logits.values()[size_t(c)] > logits.values()[size_t(best)]) best = c;
        correct += best == int(i);
    }
    DeagingStageResult out;
    out.identity_accuracy = double(correct) / double(images.size());
    log.add({{"phase", "final"}, {"identity_top1", out.identity_accuracy}});
    log.write();

    model.params().save(ctx.paths.deaging_ckpt());
    out.checkpoint = ctx.paths.deaging_ckpt();
    out.log = log.path();
    out.records = std::move(records);
    out.num_identities = dcfg.num_identities;
    return out;
}

// ---- frozen modality features ----------------------------------------------------

struct ModalityCache {
    // per sample id; empty tensors when the modality is off
    std::vector<Tensor<float>> f_id;
    std::vector<Tensor<float>> f_race;
};

inline ModalityCache compute_modality_cache(const PipelineContext& ctx, ModalitySet mods) {
    ModalityCache cache;
    size_t n = ctx.data.samples.size();
    cache.f_id.resize(n);
    cache.f_race.resize(n);
    if (mods.deaging) {
        if (!std::filesystem::exists(ctx.paths.deaging_ckpt()))
            throw TrainError("missing prior-stage checkpoint " + ctx.paths.deaging_ckpt().string() +
                             "; run `dcml train --stage deaging` first");
        Rng rng(1);
        DeagingConfig dcfg = ctx.cfg.deaging;
        dcfg.num_identities = int(ctx.active_fold().train_samples.size());
        auto model = DeagingModel<float>::build(dcfg, rng);
        model.params().load(ctx.paths.deaging_ckpt());
        model.params().set_requires_grad(false);
        for (size_t i = 0; i < n; ++i) {
            auto [f_age, f_id] = model.factorize(model.encode(ctx.data.samples[i].image));
            cache.f_id[i] = f_id;
        }
    }
    if (mods.race) {
        if (!std::filesystem::exists(ctx.paths.race_ckpt()))
            throw TrainError("missing prior-stage checkpoint " + ctx.paths.race_ckpt().string() +
                             "; run `dcml train --stage race` first");
        Rng rng(2);
        auto enc = RaceEncoder<float>::build(ctx.cfg.race, rng);
        enc.params().load(ctx.paths.race_ckpt());
        enc.freeze();
        for (size_t i = 0; i < n; ++i) cache.f_race[i] = enc.encode(ctx.data.samples[i].image);
    }
    return cache;
}

// ---- stage 3: contrastive DCML ----------------------------------------------------

struct DcmlStageResult {
    std::filesystem::path checkpoint;
    std::filesystem::path log;
    std::vector<double> epoch_mean_loss;
};

inline DcmlStageResult train_dcml(const PipelineContext& ctx, ModalitySet mods, uint64_t seed,
                                  const std::string& suffix = "") {
    const auto& cfg = ctx.cfg;
    const auto& fold = ctx.active_fold();
    auto cache = compute_modality_cache(ctx, mods);

    auto enc_cfg = EncoderConfig::from_run(cfg, mods);
    Rng rng(seed ^ 0xDC31ULL);
    auto q_enc = DcmlEncoder<float>::build(enc_cfg, rng, "dcml");
    Rng rng_t(seed ^ 0x7E57ULL);
    auto t_enc = DcmlEncoder<float>::build(enc_cfg, rng_t, "dcml");
    t_enc.params().copy_values_from(q_enc.params());
    t_enc.params().set_requires_grad(false);

    auto embed_with = [&](const DcmlEncoder<float>& enc, int sample_id) {
        const auto& s = ctx.data.samples[size_t(sample_id)];
        return enc.embed(s.image, mods.deaging ? &cache.f_id[size_t(sample_id)] : nullptr,
                         mods.race ? &cache.f_race[size_t(sample_id)] : nullptr);
    };

    MemoryBank<float> bank(enc_cfg.embed_dim, size_t(cfg.contrastive.bank_capacity));
    // warm-up: pre-fill with key embeddings so the first loss step never sees
    // an empty bank
    for (int id : fold.train_samples)
        if (!ctx.data.samples[size_t(id)].is_parent)
            bank.enqueue(embed_with(t_enc, id).values());

    SgdMomentum<float> opt(q_enc.params().tensors(), cfg.contrastive.lr,
                           cfg.contrastive.sgd_momentum);
    JsonlLog log(ctx.paths.logs / ("dcml" + suffix + ".jsonl"));

    auto pairs = fold.train_positives;
    Rng shuffle_rng = rng.fork(0x0E);
    DcmlStageResult result;
    int global_step = 0;
    int d = enc_cfg.embed_dim;
    for (int epoch = 0; epoch < cfg.contrastive.epochs; ++epoch) {
        shuffle_rng.shuffle(pairs.begin(), pairs.end());
        double epoch_loss = 0;
        int epoch_steps = 0;
        for (size_t start = 0; start < pairs.size(); start += size_t(cfg.contrastive.batch)) {
            size_t stop = std::min(pairs.size(), start + size_t(cfg.contrastive.batch));
            int B = int(stop - start);

            // key side, outside the tape: embeddings detach before enqueueing
            std::vector<float> key_rows;
            key_rows.reserve(size_t(B) * size_t(d));
            for (size_t i = start; i < stop; ++i) {
                auto k = embed_with(t_enc, pairs[i].child);
                key_rows.insert(key_rows.end(), k.values().begin(), k.values().end());
            }
            auto keys = Tensor<float>::from_data({B, d}, key_rows);

            GradTape<float> tape;
            GradTape<float>::Scope scope(tape);
            std::vector<Tensor<float>> q_rows;
            for (size_t i = start; i < stop; ++i)
                q_rows.push_back(reshape(embed_with(q_enc, pairs[i].parent), {1, d}));
            auto q = concat(q_rows, 0);
            auto pos = row_sums(mul(q, keys));                     // B x 1
            auto negs = matmul(q, bank.as_matrix_transposed());    // B x fill
            auto logits = scale(concat(std::vector<Tensor<float>>{pos, negs}, 1),
                                float(1.0 / cfg.contrastive.tau));
            auto loss = info_nce(logits);
            if (!std::isfinite(double(loss.item())))
                throw TrainError("dcml stage epoch " + std::to_string(epoch) + " step " +
                                 std::to_string(global_step) + ": non-finite loss");
            tape.backward(loss);
            tape.clear();
            opt.step(epoch);
            q_enc.params().zero_grad();

            momentum_update(t_enc.params(), q_enc.params(), cfg.contrastive.momentum_m);
            bank.enqueue_batch(keys);

            log.add({{"stage", "dcml"}, {"modalities", mods.str()}, {"epoch", epoch},
                     {"step", global_step}, {"loss", double(loss.item())}});
            epoch_loss += double(loss.item());
            ++epoch_steps;
            ++global_step;
        }
        result.epoch_mean_loss.push_back(epoch_loss / std::max(1, epoch_steps));
    }
    log.write();

    auto ckpt = ctx.paths.dcml_ckpt(suffix);
    q_enc.params().save(ckpt);
    nlohmann::json sidecar = {{"modalities", mods.str()},
                              {"r1", enc_cfg.r1},
                              {"r2", enc_cfg.r2},
                              {"embed_dim", enc_cfg.embed_dim},
                              {"seed", seed}};
    detail::atomic_write(ckpt.string() + ".json",
                         [&](std::ostream& os) { os << sidecar.dump(2) << "\n"; });
    result.checkpoint = ckpt;
    result.log = log.path();
    return result;
}

// ---- evaluation -------------------------------------------------------------------

inline EvalReport evaluate_checkpoint(const PipelineContext& ctx,
                                      const std::filesystem::path& ckpt, int fold_sel,
                                      std::vector<int> ks) {
    if (!std::filesystem::exists(ckpt))
        throw TrainError("checkpoint " + ckpt.string() + " not found; run `dcml train` first");

    RunConfig cfg = ctx.cfg;
    ModalitySet mods = ModalitySet::parse(cfg.contrastive.modalities);
    uint64_t seed = cfg.seed;
    {
        std::ifstream is(ckpt.string() + ".json");
        if (is) {
            auto sidecar = nlohmann::json::parse(is);
            mods = ModalitySet::parse(sidecar.value("modalities", mods.str()));
            cfg.fusion.r1 = sidecar.value("r1", cfg.fusion.r1);
            cfg.fusion.r2 = sidecar.value("r2", cfg.fusion.r2);
            cfg.fusion.embed_dim = sidecar.value("embed_dim", cfg.fusion.embed_dim);
            seed = sidecar.value("seed", seed);
        }
    }
    PipelineContext local = ctx;
    local.cfg = cfg;
    auto cache = compute_modality_cache(local, mods);
    auto enc_cfg = EncoderConfig::from_run(cfg, mods);
    Rng rng(1);
    auto enc = DcmlEncoder<float>::build(enc_cfg, rng, "dcml");
    enc.params().load(ckpt);
    enc.params().set_requires_grad(false);

    auto embed = [&](int sample_id) {
        const auto& s = ctx.data.samples[size_t(sample_id)];
        return enc.embed(s.image, mods.deaging ? &cache.f_id[size_t(sample_id)] : nullptr,
                         mods.race ? &cache.f_race[size_t(sample_id)] : nullptr);
    };

    EvalReport report;
    report.ks = ks;
    report.metadata = {{"checkpoint", ckpt.string()},
                       {"modalities", mods.str()},
                       {"seed", seed},
                       {"fold", fold_sel}};
    std::vector<int> fold_ids;
    if (fold_sel < 0)
        for (int f = 0; f < int(ctx.protocol.folds.size()); ++f) fold_ids.push_back(f);
    else fold_ids.push_back(fold_sel);

    for (int f : fold_ids) {
        const auto& fold = ctx.fold(f);
        std::vector<int> gallery_ids;
        for (int id : fold.test_samples)
            if (!ctx.data.samples[size_t(id)].is_parent) gallery_ids.push_back(id);
        std::vector<std::vector<float>> gallery;
        for (int id : gallery_ids) gallery.push_back(embed(id).values());

        std::vector<RetrievalCase<float>> cases;
        for (const auto& pr : fold.test_positives) {
            RetrievalCase<float> c;
            c.query = embed(pr.parent).values();
            // every child of the query's family counts as a true match
            for (size_t gi = 0; gi < gallery_ids.size(); ++gi)
                if (ctx.data.samples[size_t(gallery_ids[gi])].family_id ==
                    ctx.data.samples[size_t(pr.parent)].family_id)
                    c.targets.push_back(int(gi));
            c.relation = relation_label(ctx.data.samples[size_t(pr.parent)].gender,
                                        ctx.data.samples[size_t(pr.child)].gender);
            cases.push_back(std::move(c));
        }
        report.folds.push_back(evaluate_topk_fold(cases, gallery, ks, f));
    }
    finalize_report(report);
    return report;
}

// ---- full pipeline + ablation -------------------------------------------------------

// Stage order: race trains and freezes first, de-aging second, then the
// contrastive pathway consumes both. `all` skips extractors the configured
// modality set leaves out.
inline void train_pipeline(const PipelineContext& ctx, const std::string& stage) {
    if (stage != "race" && stage != "deaging" && stage != "dcml" && stage != "all")
        throw ConfigError("unknown stage '" + stage + "' (race|deaging|dcml|all)");
    ModalitySet mods = ModalitySet::parse(ctx.cfg.contrastive.modalities);
    if (stage == "race" || (stage == "all" && mods.race)) train_race(ctx);
    if (stage == "deaging" || (stage == "all" && mods.deaging)) train_deaging(ctx);
    if (stage == "dcml" || stage == "all") train_dcml(ctx, mods, ctx.cfg.seed);
}

struct AblationResult {
    std::string modalities;
    int r1 = 0, r2 = 0;
    uint64_t seed = 0;
    EvalReport report;
};

inline std::vector<AblationResult> run_ablation(PipelineContext ctx,
                                                const std::vector<std::string>& modality_sets,
                                                const std::vector<int>& r1_grid,
                                                const std::vector<int>& r2_grid,
                                                const std::vector<uint64_t>& seeds) {
    std::vector<AblationResult> results;
    for (const auto& mod_str : modality_sets) {
        ModalitySet mods = ModalitySet::parse(mod_str);
        for (int r1 : r1_grid)
            for (int r2 : r2_grid)
                for (uint64_t seed : seeds) {
                    ctx.cfg.fusion.r1 = r1;
                    ctx.cfg.fusion.r2 = r2;
                    std::string suffix = "_" + mods.str() + "_r" + std::to_string(r1) + "x" +
                                         std::to_string(r2) + "_s" + std::to_string(seed);
                    auto trained = train_dcml(ctx, mods, seed, suffix);
                    auto report = evaluate_checkpoint(ctx, trained.checkpoint,
                                                      ctx.cfg.eval.fold, ctx.cfg.eval.topk);
                    detail::atomic_write(ctx.paths.reports / ("eval" + suffix + ".json"),
                                         [&](std::ostream& os) {
                                             os << report.to_json().dump(2) << "\n";
                                         });
                    results.push_back({mods.str(), r1, r2, seed, std::move(report)});
                }
    }
    return results;
}

}  // namespace dcml
