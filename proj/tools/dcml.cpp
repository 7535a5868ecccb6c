// Command-line entry points for the synthetic-kinship pipeline: dataset
// synthesis, staged training, retrieval evaluation, the gradient-check
// suite, and the modality/ratio ablations.

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>

#include "dcml/pipeline.hpp"

namespace {

dcml::RunConfig load_or_default(const std::string& config_path) {
    if (config_path.empty()) return dcml::RunConfig::desk();
    return dcml::load_config(config_path);
}

std::vector<int> parse_int_list(const std::string& text) {
    std::vector<int> out;
    size_t pos = 0;
    while (pos <= text.size()) {
        size_t next = text.find(',', pos);
        out.push_back(std::stoi(text.substr(pos, next == std::string::npos ? next : next - pos)));
        if (next == std::string::npos) break;
        pos = next + 1;
    }
    return out;
}

std::vector<std::string> parse_str_list(const std::string& text) {
    std::vector<std::string> out;
    size_t pos = 0;
    while (pos <= text.size()) {
        size_t next = text.find(',', pos);
        out.push_back(text.substr(pos, next == std::string::npos ? next : next - pos));
        if (next == std::string::npos) break;
        pos = next + 1;
    }
    return out;
}

void print_warnings() {
    for (const auto& w : dcml::drain_warnings()) std::cerr << "warning: " << w << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DCML synthetic kinship pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "JSON config file (defaults to the desk preset)");

    // synth
    auto* synth = app.add_subcommand("synth", "generate the synthetic family dataset");
    std::string synth_out;
    synth->add_option("--out", synth_out, "output dataset directory");

    // train
    auto* train = app.add_subcommand("train", "run training stages");
    std::string stage = "all";
    train->add_option("--stage", stage, "race|deaging|dcml|all");

    // eval
    auto* eval = app.add_subcommand("eval", "retrieval evaluation of a checkpoint");
    std::string ckpt;
    int fold = std::numeric_limits<int>::min();
    std::string topk = "";
    eval->add_option("--ckpt", ckpt, "dcml checkpoint file");
    eval->add_option("--fold", fold, "fold index, -1 for all folds");
    eval->add_option("--topk", topk, "comma-separated k list, e.g. 1,5");

    // gradcheck
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference validation suite");
    uint64_t gc_seed = 7;
    gradcheck->add_option("--seed", gc_seed, "seed for the check inputs");
    bool gc_json = false;
    gradcheck->add_flag("--json", gc_json, "emit the report as JSON on stdout");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "modality and reduction-ratio studies");
    std::string modalities = "face,face+race+deaging";
    std::string grid;
    std::string seeds;
    ablate->add_option("--modalities", modalities, "comma list of modality sets");
    ablate->add_option("--grid", grid, "comma list of ratios applied to both r1 and r2");
    ablate->add_option("--seeds", seeds, "comma list of training seeds");

    CLI11_PARSE(app, argc, argv);

    try {
        auto cfg = load_or_default(config_path);

        if (*synth) {
            std::string out = synth_out.empty() ? cfg.data_dir : synth_out;
            dcml::run_synth(cfg, out);
            std::cout << "dataset written to " << out << "\n";
        } else if (*train) {
            auto ctx = dcml::PipelineContext::open(cfg);
            dcml::train_pipeline(ctx, stage);
            std::cout << "training stage '" << stage << "' complete; artifacts under "
                      << cfg.out_dir << "\n";
        } else if (*eval) {
            auto ctx = dcml::PipelineContext::open(cfg);
            auto path = ckpt.empty() ? ctx.paths.dcml_ckpt() : std::filesystem::path(ckpt);
            int fold_sel = fold == std::numeric_limits<int>::min() ? cfg.eval.fold : fold;
            auto ks = topk.empty() ? cfg.eval.topk : parse_int_list(topk);
            auto report = dcml::evaluate_checkpoint(ctx, path, fold_sel, ks);
            std::cout << report.to_table();
            auto json_path = ctx.paths.reports /
                             ("eval_fold" + std::to_string(fold_sel) + ".json");
            dcml::detail::atomic_write(json_path, [&](std::ostream& os) {
                os << report.to_json().dump(2) << "\n";
            });
            std::cout << "report written to " << json_path.string() << "\n";
        } else if (*gradcheck) {
            auto report = dcml::run_gradcheck(gc_seed);
            if (gc_json) std::cout << report.to_json().dump(2) << "\n";
            else std::cout << report.to_table();
            if (!report.all_pass) {
                nlohmann::json err = {{"error", "gradcheck_failed"},
                                      {"message", "one or more gradient checks failed"}};
                std::cerr << err.dump() << "\n";
                return 1;
            }
        } else if (*ablate) {
            auto ctx = dcml::PipelineContext::open(cfg);
            auto mods = parse_str_list(modalities);
            std::vector<int> r1_grid{cfg.fusion.r1}, r2_grid{cfg.fusion.r2};
            if (!grid.empty()) r1_grid = r2_grid = parse_int_list(grid);
            std::vector<uint64_t> seed_list{cfg.seed};
            if (!seeds.empty()) {
                seed_list.clear();
                for (int s : parse_int_list(seeds)) seed_list.push_back(uint64_t(s));
            }
            auto results = dcml::run_ablation(ctx, mods, r1_grid, r2_grid, seed_list);
            std::cout << std::left;
            for (const auto& r : results) {
                std::cout << "modalities=" << r.modalities << " r1=" << r.r1 << " r2=" << r.r2
                          << " seed=" << r.seed;
                for (int k : r.report.ks)
                    std::cout << "  top" << k << "=" << r.report.mean_accuracy.at("Avg").at(k)
                              << "%";
                std::cout << "\n";
            }
            std::cout << "per-run reports under " << ctx.paths.reports.string() << "\n";
        }
        print_warnings();
    } catch (const dcml::Error& e) {
        nlohmann::json err = {{"error", e.code()}, {"message", e.what()}};
        std::cerr << err.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        nlohmann::json err = {{"error", "internal"}, {"message", e.what()}};
        std::cerr << err.dump() << "\n";
        return 2;
    }
    return 0;
}
