#pragma once

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "dcml/io.hpp"
#include "dcml/tensor.hpp"

namespace dcml {

struct DataConfig {
    uint64_t seed = 7;
    int num_families = 32;
    int members_per_family = 4;  // two parents plus children
    int image_size = 64;
    int latent_dim = 16;
    int age_basis_dim = 4;
    int race_embed_dim = 6;
    double family_scale = 1.0;      // shared family latent
    double individual_scale = 0.3;  // per-member deviation
    double age_gain = 0.8;
    double race_gain = 0.8;
    double noise_level = 0.02;  // pixel noise sigma

    void validate() const {
        if (num_families < 2 || members_per_family < 2)
            throw ConfigError("dataset needs at least 2 families with 2 members each");
        if (image_size < 8) throw ConfigError("image_size must be at least 8");
        if (latent_dim < 1 || age_basis_dim < 1 || race_embed_dim < 3)
            throw ConfigError("latent dims invalid (race embedding needs >= 3)");
        if (noise_level < 0) throw ConfigError("noise_level must be non-negative");
    }
};

struct FaceSample {
    int person_id = 0;
    int family_id = 0;
    bool is_parent = false;
    int gender = 0;  // 0 male, 1 female
    double age = 0;  // in [0,1]
    int race = 0;    // {0,1,2}
    std::vector<double> latent;  // ground-truth member latent, for probes
    Tensor<float> image;         // HxWx3 in [0,1]
};

namespace detail {

// Smooth random basis image per extended-latent dimension: a mixture of the
// lowest 4x4 separable cosine modes, identical across runs for a given seed.
struct RenderBasis {
    int size = 0, dims = 0;
    static constexpr int kModes = 4;
    std::vector<double> coeff;  // dims x 3 x kModes x kModes

    RenderBasis(int image_size, int total_dims, Rng rng) : size(image_size), dims(total_dims) {
        coeff.resize(size_t(dims) * 3 * kModes * kModes);
        for (auto& c : coeff) c = rng.normal() / double(kModes);
    }

    // accumulate gain * z_l * basis_l into the image buffer
    void splat(std::vector<double>& img, int dim, double z, double gain) const {
        const double* a = coeff.data() + size_t(dim) * 3 * kModes * kModes;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                double cy[kModes], cx[kModes];
                for (int u = 0; u < kModes; ++u) {
                    cy[u] = std::cos(M_PI * u * (y + 0.5) / size);
                    cx[u] = std::cos(M_PI * u * (x + 0.5) / size);
                }
                for (int c = 0; c < 3; ++c) {
                    double acc = 0;
                    const double* ac = a + size_t(c) * kModes * kModes;
                    for (int u = 0; u < kModes; ++u)
                        for (int v = 0; v < kModes; ++v) acc += ac[u * kModes + v] * cy[u] * cx[v];
                    img[(size_t(y) * size + size_t(x)) * 3 + size_t(c)] += gain * z * acc;
                }
            }
    }
};

inline std::vector<std::vector<double>> orthonormal_rows(int n, int dim, Rng rng) {
    std::vector<std::vector<double>> rows;
    for (int i = 0; i < n; ++i) {
        std::vector<double> v(static_cast<size_t>(dim));
        for (auto& x : v) x = rng.normal();
        for (const auto& prev : rows) {
            double dot = 0;
            for (int j = 0; j < dim; ++j) dot += v[size_t(j)] * prev[size_t(j)];
            for (int j = 0; j < dim; ++j) v[size_t(j)] -= dot * prev[size_t(j)];
        }
        double norm = 0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        for (auto& x : v) x /= norm;
        rows.push_back(std::move(v));
    }
    return rows;
}

}  // namespace detail

inline constexpr double kRenderGain = 0.10;

// Seeded synthetic families: a shared latent per family, per-member
// deviations, and age/race factors that are causally present in the pixels
// through a fixed smooth linear map.
inline std::vector<FaceSample> generate_family_dataset(const DataConfig& cfg) {
    cfg.validate();
    Rng master(cfg.seed);
    int total_dims = cfg.latent_dim + cfg.age_basis_dim + cfg.race_embed_dim;
    detail::RenderBasis basis(cfg.image_size, total_dims, master.fork(0xB0));
    Rng dir_rng = master.fork(0xA6E);
    std::vector<double> age_dir(size_t(cfg.age_basis_dim));
    {
        double norm = 0;
        for (auto& x : age_dir) {
            x = dir_rng.normal();
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (auto& x : age_dir) x /= norm;
    }
    auto race_embeds = detail::orthonormal_rows(3, cfg.race_embed_dim, master.fork(0x9ACE));

    std::vector<FaceSample> samples;
    samples.reserve(size_t(cfg.num_families) * size_t(cfg.members_per_family));
    for (int f = 0; f < cfg.num_families; ++f) {
        Rng rf = master.fork(0xF000 + uint64_t(f));
        std::vector<double> family_latent(size_t(cfg.latent_dim));
        for (auto& x : family_latent) x = cfg.family_scale * rf.normal();
        int race = int(rf.below(3));

        for (int m = 0; m < cfg.members_per_family; ++m) {
            Rng rm = rf.fork(uint64_t(m) + 1);
            FaceSample s;
            s.person_id = int(samples.size());
            s.family_id = f;
            s.race = race;
            s.is_parent = m < 2;
            s.gender = m < 2 ? m : int(rm.below(2));
            s.age = s.is_parent ? rm.uniform(0.55, 0.95) : rm.uniform(0.05, 0.45);

            s.latent.resize(size_t(cfg.latent_dim));
            for (int j = 0; j < cfg.latent_dim; ++j)
                s.latent[size_t(j)] = family_latent[size_t(j)] + cfg.individual_scale * rm.normal();

            std::vector<double> img(size_t(cfg.image_size) * cfg.image_size * 3, 0.5);
            for (int j = 0; j < cfg.latent_dim; ++j)
                basis.splat(img, j, s.latent[size_t(j)], kRenderGain);
            for (int j = 0; j < cfg.age_basis_dim; ++j)
                basis.splat(img, cfg.latent_dim + j, cfg.age_gain * (s.age - 0.5) * age_dir[size_t(j)],
                            kRenderGain);
            for (int j = 0; j < cfg.race_embed_dim; ++j)
                basis.splat(img, cfg.latent_dim + cfg.age_basis_dim + j,
                            cfg.race_gain * race_embeds[size_t(race)][size_t(j)], kRenderGain);

            std::vector<float> px(img.size());
            for (size_t i = 0; i < img.size(); ++i) {
                double v = img[i] + cfg.noise_level * rm.normal();
                px[i] = float(std::clamp(v, 0.0, 1.0));
            }
            s.image = Tensor<float>::from_data({cfg.image_size, cfg.image_size, 3}, std::move(px));
            samples.push_back(std::move(s));
        }
    }
    return samples;
}

// ---- protocol ---------------------------------------------------------------

struct PairRef {
    int parent = 0;  // sample index
    int child = 0;
};

struct Fold {
    std::vector<int> test_families;
    std::vector<int> train_samples, test_samples;
    std::vector<PairRef> train_positives, test_positives;
    // deterministic non-kin matching: every train parent once, every child at
    // most once, never within a family
    std::vector<PairRef> negatives;
};

struct Protocol {
    uint64_t seed = 0;
    std::vector<Fold> folds;
};

inline Protocol make_protocol(const std::vector<FaceSample>& samples, uint64_t seed) {
    constexpr int kFolds = 5;
    std::vector<int> families;
    for (const auto& s : samples)
        if (families.empty() || families.back() != s.family_id) families.push_back(s.family_id);
    if (int(families.size()) < kFolds)
        throw ConfigError("protocol needs at least 5 families, got " +
                          std::to_string(families.size()));

    Rng rng(seed);
    rng.shuffle(families.begin(), families.end());

    Protocol proto;
    proto.seed = seed;
    proto.folds.resize(kFolds);
    for (size_t i = 0; i < families.size(); ++i)
        proto.folds[i % kFolds].test_families.push_back(families[i]);

    for (auto& fold : proto.folds) {
        auto is_test = [&](int family) {
            return std::find(fold.test_families.begin(), fold.test_families.end(), family) !=
                   fold.test_families.end();
        };
        for (const auto& s : samples)
            (is_test(s.family_id) ? fold.test_samples : fold.train_samples).push_back(s.person_id);

        auto collect_pairs = [&](bool test_side) {
            std::vector<PairRef> pairs;
            for (const auto& p : samples) {
                if (!p.is_parent || is_test(p.family_id) != test_side) continue;
                for (const auto& c : samples)
                    if (!c.is_parent && c.family_id == p.family_id)
                        pairs.push_back({p.person_id, c.person_id});
            }
            return pairs;
        };
        fold.train_positives = collect_pairs(false);
        fold.test_positives = collect_pairs(true);

        // non-kin matching over the train split
        std::vector<int> parents, children;
        for (int i : fold.train_samples) {
            if (samples[size_t(i)].is_parent) parents.push_back(i);
            else children.push_back(i);
        }
        Rng neg_rng = rng.fork(0x7E6 + uint64_t(fold.test_families.front()));
        neg_rng.shuffle(children.begin(), children.end());
        std::vector<bool> used(children.size(), false);
        for (int p : parents) {
            for (size_t j = 0; j < children.size(); ++j) {
                if (used[j]) continue;
                if (samples[size_t(children[j])].family_id == samples[size_t(p)].family_id) continue;
                fold.negatives.push_back({p, children[j]});
                used[j] = true;
                break;
            }
        }
    }
    return proto;
}

// ---- dataset directory -------------------------------------------------------

inline void save_dataset(const std::filesystem::path& dir, const std::vector<FaceSample>& samples,
                         const DataConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json meta;
    meta["format"] = "dcml-dataset-v1";
    meta["seed"] = cfg.seed;
    meta["num_families"] = cfg.num_families;
    meta["members_per_family"] = cfg.members_per_family;
    meta["image_size"] = cfg.image_size;
    meta["latent_dim"] = cfg.latent_dim;
    meta["age_basis_dim"] = cfg.age_basis_dim;
    meta["race_embed_dim"] = cfg.race_embed_dim;
    meta["family_scale"] = cfg.family_scale;
    meta["individual_scale"] = cfg.individual_scale;
    meta["age_gain"] = cfg.age_gain;
    meta["race_gain"] = cfg.race_gain;
    meta["noise_level"] = cfg.noise_level;
    auto& arr = meta["samples"] = nlohmann::json::array();
    for (const auto& s : samples) {
        char name[32];
        std::snprintf(name, sizeof name, "img_%04d.tns", s.person_id);
        write_tns1(dir / name, s.image);
        arr.push_back({{"id", s.person_id},
                       {"family", s.family_id},
                       {"parent", s.is_parent},
                       {"gender", s.gender},
                       {"age", s.age},
                       {"race", s.race},
                       {"latent", s.latent},
                       {"image", name}});
    }
    detail::atomic_write(dir / "meta.json", [&](std::ostream& os) { os << meta.dump(2) << "\n"; });
}

struct LoadedDataset {
    DataConfig config;
    std::vector<FaceSample> samples;
};

inline LoadedDataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream is(dir / "meta.json");
    if (!is) throw IoError("cannot open " + (dir / "meta.json").string());
    nlohmann::json meta = nlohmann::json::parse(is, nullptr, true);
    if (meta.value("format", "") != "dcml-dataset-v1")
        throw IoError("unrecognized dataset format in " + (dir / "meta.json").string());
    LoadedDataset out;
    out.config.seed = meta["seed"].get<uint64_t>();
    out.config.num_families = meta["num_families"].get<int>();
    out.config.members_per_family = meta["members_per_family"].get<int>();
    out.config.image_size = meta["image_size"].get<int>();
    out.config.latent_dim = meta["latent_dim"].get<int>();
    out.config.age_basis_dim = meta["age_basis_dim"].get<int>();
    out.config.race_embed_dim = meta["race_embed_dim"].get<int>();
    out.config.family_scale = meta["family_scale"].get<double>();
    out.config.individual_scale = meta["individual_scale"].get<double>();
    out.config.age_gain = meta["age_gain"].get<double>();
    out.config.race_gain = meta["race_gain"].get<double>();
    out.config.noise_level = meta["noise_level"].get<double>();
    for (const auto& e : meta["samples"]) {
        FaceSample s;
        s.person_id = e["id"].get<int>();
        s.family_id = e["family"].get<int>();
        s.is_parent = e["parent"].get<bool>();
        s.gender = e["gender"].get<int>();
        s.age = e["age"].get<double>();
        s.race = e["race"].get<int>();
        s.latent = e["latent"].get<std::vector<double>>();
        s.image = read_tns1<float>(dir / e["image"].get<std::string>());
        out.samples.push_back(std::move(s));
    }
    return out;
}

}  // namespace dcml
