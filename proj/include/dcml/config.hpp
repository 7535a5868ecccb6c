#pragma once

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "dcml/data.hpp"
#include "dcml/deaging.hpp"
#include "dcml/race.hpp"

namespace dcml {

struct ModalitySet {
    bool race = true;
    bool deaging = true;

    static ModalitySet parse(const std::string& text) {
        ModalitySet m{false, false};
        size_t pos = 0;
        bool face = false;
        while (pos <= text.size()) {
            size_t next = text.find('+', pos);
            std::string part = text.substr(pos, next == std::string::npos ? next : next - pos);
            if (part == "face") face = true;
            else if (part == "race") m.race = true;
            else if (part == "deaging") m.deaging = true;
            else throw ConfigError("unknown modality '" + part + "' in '" + text + "'");
            if (next == std::string::npos) break;
            pos = next + 1;
        }
        if (!face) throw ConfigError("modality set must include 'face': " + text);
        return m;
    }

    std::string str() const {
        std::string s = "face";
        if (race) s += "+race";
        if (deaging) s += "+deaging";
        return s;
    }
};

struct FusionSettings {
    int r1 = 4;
    int r2 = 2;
    bool relu_inner = true;
    int embed_dim = 128;  // final projection width d
};

struct RaceTrainSettings {
    int epochs = 6;
    int batch = 32;
    LrSchedule lr{{{0, 1e-3}, {2, 1e-4}}};
};

struct ContrastiveSettings {
    double tau = 0.07;
    // Desk runs take ~80 optimizer steps, so the key-encoder horizon is kept
    // at ~10 steps; the paper preset restores 0.999.
    double momentum_m = 0.9;
    int bank_capacity = 512;
    int batch = 32;
    int epochs = 20;
    LrSchedule lr{{{0, 0.05}}};
    double sgd_momentum = 0.9;
    std::string modalities = "face+race+deaging";
};

struct EvalSettings {
    std::vector<int> topk{1, 5};
    int fold = 0;  // -1 evaluates every fold
};

struct RunConfig {
    uint64_t seed = 7;
    std::string preset = "desk";
    std::string data_dir = "out/dataset";
    std::string out_dir = "out";

    DataConfig data;
    PatchGeometry patches;
    BackboneConfig patch_backbone = BackboneConfig::desk_scale();
    DeagingConfig deaging = DeagingConfig::desk_scale(0);  // identities filled at train time
    RaceConfig race = RaceConfig::desk_scale();
    AdversarialSchedule deaging_train;
    RaceTrainSettings race_train;
    FusionSettings fusion;
    ContrastiveSettings contrastive;
    EvalSettings eval;

    static RunConfig desk() { return RunConfig{}; }

    // Hyperparameters as published: batch sizes 64/64/128, SGD momentum 0.9,
    // m = 0.999, tau = 0.07, bank 65536, r1 = 4, r2 = 2, rates 5e-4 and 1e-4
    // moving to 1e-3 after the second epoch, Adam for the race stage with a
    // 10x cut after the second epoch. Not sized for a desk CPU.
    static RunConfig paper() {
        RunConfig cfg;
        cfg.preset = "paper";
        cfg.patch_backbone = BackboneConfig::paper_scale();
        cfg.deaging.backbone = BackboneConfig::paper_scale();
        cfg.deaging.backbone.feature_dim = 512;
        cfg.deaging.canonical_hidden = 64;
        cfg.race.backbone = BackboneConfig::paper_scale();
        cfg.race.backbone.feature_dim = 2048;
        cfg.deaging_train.batch = 64;
        cfg.deaging_train.kr_lr = LrSchedule{{{0, 5e-4}, {2, 1e-3}}};
        cfg.deaging_train.head_lr = LrSchedule{{{0, 5e-4}, {2, 1e-3}}};
        cfg.deaging_train.c_lr = LrSchedule{{{0, 5e-4}, {2, 1e-3}}};
        cfg.deaging_train.momentum = 0.9;
        cfg.race_train.batch = 64;
        cfg.race_train.lr = LrSchedule{{{0, 1e-4}, {2, 1e-5}}};
        cfg.contrastive.batch = 128;
        cfg.contrastive.bank_capacity = 65536;
        cfg.contrastive.lr = LrSchedule{{{0, 1e-4}, {2, 1e-3}}};
        cfg.contrastive.momentum_m = 0.999;
        cfg.fusion.embed_dim = 128;
        return cfg;
    }

    static RunConfig preset_named(const std::string& name) {
        if (name == "desk") return desk();
        if (name == "paper") return paper();
        throw ConfigError("unknown preset '" + name + "' (expected desk or paper)");
    }

    void validate() const {
        data.validate();
        patches.validate();
        patch_backbone.validate();
        if (fusion.r1 < 1 || fusion.r2 < 1) throw ConfigError("reduction ratios must be >= 1");
        if (contrastive.tau <= 0) throw ConfigError("temperature must be positive");
        if (contrastive.momentum_m < 0 || contrastive.momentum_m > 1)
            throw ConfigError("momentum coefficient m must lie in [0,1]");
        if (contrastive.bank_capacity < 1) throw ConfigError("bank capacity must be >= 1");
        (void)ModalitySet::parse(contrastive.modalities);
    }
};

// ---- JSON binding -------------------------------------------------------------

namespace cfgjson {

using nlohmann::json;

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline void maybe_sched(const json& j, const char* key, LrSchedule& out) {
    if (!j.contains(key)) return;
    out.boundaries.clear();
    for (const auto& pair : j.at(key))
        out.boundaries.emplace_back(pair.at(0).get<int>(), pair.at(1).get<double>());
}

inline json sched_json(const LrSchedule& s) {
    json arr = json::array();
    for (const auto& [b, r] : s.boundaries) arr.push_back({b, r});
    return arr;
}

inline void backbone_from_json(const json& j, BackboneConfig& b) {
    maybe(j, "in_channels", b.in_channels);
    maybe(j, "stem_channels", b.stem_channels);
    maybe(j, "stage_blocks", b.stage_blocks);
    maybe(j, "stage_bottleneck", b.stage_bottleneck);
    maybe(j, "stage_channels", b.stage_channels);
    maybe(j, "feature_dim", b.feature_dim);
}

inline json backbone_json(const BackboneConfig& b) {
    return {{"in_channels", b.in_channels},     {"stem_channels", b.stem_channels},
            {"stage_blocks", b.stage_blocks},   {"stage_bottleneck", b.stage_bottleneck},
            {"stage_channels", b.stage_channels}, {"feature_dim", b.feature_dim}};
}

}  // namespace cfgjson

inline nlohmann::json to_json(const RunConfig& cfg) {
    using cfgjson::backbone_json;
    using cfgjson::sched_json;
    nlohmann::json j;
    j["preset"] = cfg.preset;
    j["seed"] = cfg.seed;
    j["data_dir"] = cfg.data_dir;
    j["out_dir"] = cfg.out_dir;
    j["data"] = {{"seed", cfg.data.seed},
                 {"num_families", cfg.data.num_families},
                 {"members_per_family", cfg.data.members_per_family},
                 {"image_size", cfg.data.image_size},
                 {"latent_dim", cfg.data.latent_dim},
                 {"age_basis_dim", cfg.data.age_basis_dim},
                 {"race_embed_dim", cfg.data.race_embed_dim},
                 {"family_scale", cfg.data.family_scale},
                 {"individual_scale", cfg.data.individual_scale},
                 {"age_gain", cfg.data.age_gain},
                 {"race_gain", cfg.data.race_gain},
                 {"noise_level", cfg.data.noise_level}};
    j["patches"] = {{"image", cfg.patches.image_h},
                    {"patch", cfg.patches.patch_h},
                    {"offsets", nlohmann::json::array()}};
    for (auto [oy, ox] : cfg.patches.offsets) j["patches"]["offsets"].push_back({oy, ox});
    j["patch_backbone"] = backbone_json(cfg.patch_backbone);
    j["deaging"] = {{"backbone", backbone_json(cfg.deaging.backbone)},
                    {"canonical_hidden", cfg.deaging.canonical_hidden},
                    {"train",
                     {{"warmup_steps", cfg.deaging_train.warmup_steps},
                      {"max_steps", cfg.deaging_train.max_steps},
                      {"min_steps", cfg.deaging_train.min_steps},
                      {"loops", cfg.deaging_train.loops},
                      {"batch", cfg.deaging_train.batch},
                      {"momentum", cfg.deaging_train.momentum},
                      {"c_lr", sched_json(cfg.deaging_train.c_lr)},
                      {"kr_lr", sched_json(cfg.deaging_train.kr_lr)},
                      {"head_lr", sched_json(cfg.deaging_train.head_lr)}}}};
    j["race"] = {{"backbone", backbone_json(cfg.race.backbone)},
                 {"train",
                  {{"epochs", cfg.race_train.epochs},
                   {"batch", cfg.race_train.batch},
                   {"lr", sched_json(cfg.race_train.lr)}}}};
    j["fusion"] = {{"r1", cfg.fusion.r1},
                   {"r2", cfg.fusion.r2},
                   {"relu_inner", cfg.fusion.relu_inner},
                   {"embed_dim", cfg.fusion.embed_dim}};
    j["contrastive"] = {{"tau", cfg.contrastive.tau},
                        {"m", cfg.contrastive.momentum_m},
                        {"bank_capacity", cfg.contrastive.bank_capacity},
                        {"batch", cfg.contrastive.batch},
                        {"epochs", cfg.contrastive.epochs},
                        {"lr", sched_json(cfg.contrastive.lr)},
                        {"sgd_momentum", cfg.contrastive.sgd_momentum},
                        {"modalities", cfg.contrastive.modalities}};
    j["eval"] = {{"topk", cfg.eval.topk}, {"fold", cfg.eval.fold}};
    return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
    using cfgjson::backbone_from_json;
    using cfgjson::maybe;
    using cfgjson::maybe_sched;
    RunConfig cfg = RunConfig::preset_named(j.value("preset", "desk"));
    maybe(j, "seed", cfg.seed);
    maybe(j, "data_dir", cfg.data_dir);
    maybe(j, "out_dir", cfg.out_dir);
    if (j.contains("data")) {
        const auto& d = j.at("data");
        maybe(d, "seed", cfg.data.seed);
        maybe(d, "num_families", cfg.data.num_families);
        maybe(d, "members_per_family", cfg.data.members_per_family);
        maybe(d, "image_size", cfg.data.image_size);
        maybe(d, "latent_dim", cfg.data.latent_dim);
        maybe(d, "age_basis_dim", cfg.data.age_basis_dim);
        maybe(d, "race_embed_dim", cfg.data.race_embed_dim);
        maybe(d, "family_scale", cfg.data.family_scale);
        maybe(d, "individual_scale", cfg.data.individual_scale);
        maybe(d, "age_gain", cfg.data.age_gain);
        maybe(d, "race_gain", cfg.data.race_gain);
        maybe(d, "noise_level", cfg.data.noise_level);
    }
    if (j.contains("patches")) {
        const auto& p = j.at("patches");
        int img = cfg.patches.image_h, patch = cfg.patches.patch_h;
        maybe(p, "image", img);
        maybe(p, "patch", patch);
        cfg.patches.image_h = cfg.patches.image_w = img;
        cfg.patches.patch_h = cfg.patches.patch_w = patch;
        if (p.contains("offsets")) {
            const auto& offs = p.at("offsets");
            if (offs.size() != 4) throw ConfigError("patches.offsets must list 4 pairs");
            for (size_t i = 0; i < 4; ++i)
                cfg.patches.offsets[i] = {offs[i][0].get<int>(), offs[i][1].get<int>()};
        }
    }
    if (j.contains("patch_backbone")) backbone_from_json(j.at("patch_backbone"), cfg.patch_backbone);
    if (j.contains("deaging")) {
        const auto& d = j.at("deaging");
        if (d.contains("backbone")) backbone_from_json(d.at("backbone"), cfg.deaging.backbone);
        maybe(d, "canonical_hidden", cfg.deaging.canonical_hidden);
        if (d.contains("train")) {
            const auto& t = d.at("train");
            maybe(t, "warmup_steps", cfg.deaging_train.warmup_steps);
            maybe(t, "max_steps", cfg.deaging_train.max_steps);
            maybe(t, "min_steps", cfg.deaging_train.min_steps);
            maybe(t, "loops", cfg.deaging_train.loops);
            maybe(t, "batch", cfg.deaging_train.batch);
            maybe(t, "momentum", cfg.deaging_train.momentum);
            maybe_sched(t, "c_lr", cfg.deaging_train.c_lr);
            maybe_sched(t, "kr_lr", cfg.deaging_train.kr_lr);
            maybe_sched(t, "head_lr", cfg.deaging_train.head_lr);
        }
    }
    if (j.contains("race")) {
        const auto& r = j.at("race");
        if (r.contains("backbone")) backbone_from_json(r.at("backbone"), cfg.race.backbone);
        if (r.contains("train")) {
            const auto& t = r.at("train");
            maybe(t, "epochs", cfg.race_train.epochs);
            maybe(t, "batch", cfg.race_train.batch);
            maybe_sched(t, "lr", cfg.race_train.lr);
        }
    }
    if (j.contains("fusion")) {
        const auto& f = j.at("fusion");
        maybe(f, "r1", cfg.fusion.r1);
        maybe(f, "r2", cfg.fusion.r2);
        maybe(f, "relu_inner", cfg.fusion.relu_inner);
        maybe(f, "embed_dim", cfg.fusion.embed_dim);
    }
    if (j.contains("contrastive")) {
        const auto& c = j.at("contrastive");
        maybe(c, "tau", cfg.contrastive.tau);
        maybe(c, "m", cfg.contrastive.momentum_m);
        maybe(c, "bank_capacity", cfg.contrastive.bank_capacity);
        maybe(c, "batch", cfg.contrastive.batch);
        maybe(c, "epochs", cfg.contrastive.epochs);
        maybe_sched(c, "lr", cfg.contrastive.lr);
        maybe(c, "sgd_momentum", cfg.contrastive.sgd_momentum);
        maybe(c, "modalities", cfg.contrastive.modalities);
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        maybe(e, "topk", cfg.eval.topk);
        maybe(e, "fold", cfg.eval.fold);
    }
    cfg.validate();
    return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config parse error in " + path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

inline void save_config(const std::filesystem::path& path, const RunConfig& cfg) {
    detail::atomic_write(path, [&](std::ostream& os) { os << to_json(cfg).dump(2) << "\n"; });
}

}  // namespace dcml
