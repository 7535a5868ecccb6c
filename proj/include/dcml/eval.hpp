#pragma once

#include <iomanip>
#include <map>

#include <json.hpp>

#include "dcml/contrastive.hpp"

namespace dcml {

// Mean verification accuracy; with no negative class (TN = N = 0) this is
// exactly TP/P * 100.
inline double accuracy_eq15(int tp, int tn, int p, int n) {
    if (p + n <= 0) throw ValueError("accuracy: P + N must be positive");
    return double(tp + tn) / double(p + n) * 100.0;
}

inline const std::array<std::string, 4> kRelations = {"F-S", "F-D", "M-S", "M-D"};

inline std::string relation_label(int parent_gender, int child_gender) {
    return std::string(parent_gender == 0 ? "F" : "M") + "-" + (child_gender == 0 ? "S" : "D");
}

// One retrieval query: a parent embedding, the gallery indices of the
// parent's true children, and the relation label of the pair this query
// instance came from. A query scores a hit when any true child makes the
// cut.
template <typename T>
struct RetrievalCase {
    std::vector<T> query;
    std::vector<int> targets;
    std::string relation;
};

struct FoldReport {
    int fold = 0;
    int gallery_size = 0;
    int num_queries = 0;
    // relation -> k -> accuracy %; "Avg" holds the mean over relations present
    std::map<std::string, std::map<int, double>> accuracy;

    double avg(int k) const { return accuracy.at("Avg").at(k); }
};

struct EvalReport {
    std::vector<int> ks;
    std::vector<FoldReport> folds;
    std::map<std::string, std::map<int, double>> mean_accuracy;  // over folds
    nlohmann::json metadata;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["topk"] = ks;
        j["metadata"] = metadata;
        j["folds"] = nlohmann::json::array();
        for (const auto& f : folds) {
            nlohmann::json jf;
            jf["fold"] = f.fold;
            jf["gallery_size"] = f.gallery_size;
            jf["num_queries"] = f.num_queries;
            for (const auto& [rel, per_k] : f.accuracy)
                for (const auto& [k, acc] : per_k) jf["accuracy"][rel]["top" + std::to_string(k)] = acc;
            j["folds"].push_back(jf);
        }
        for (const auto& [rel, per_k] : mean_accuracy)
            for (const auto& [k, acc] : per_k) j["mean"][rel]["top" + std::to_string(k)] = acc;
        return j;
    }

    // Aligned text table, one block per k, columns F-S F-D M-S M-D Avg.
    std::string to_table() const {
        std::ostringstream os;
        os << std::fixed << std::setprecision(1);
        for (int k : ks) {
            os << "TOP-" << k << "\n";
            os << std::setw(8) << "fold";
            for (const auto& rel : kRelations) os << std::setw(8) << rel;
            os << std::setw(8) << "Avg" << "\n";
            for (const auto& f : folds) {
                os << std::setw(8) << f.fold;
                for (const auto& rel : kRelations) {
                    auto it = f.accuracy.find(rel);
                    if (it == f.accuracy.end() || !it->second.count(k)) os << std::setw(8) << "-";
                    else os << std::setw(8) << it->second.at(k);
                }
                os << std::setw(8) << f.avg(k) << "\n";
            }
            if (folds.size() > 1) {
                os << std::setw(8) << "mean";
                for (const auto& rel : kRelations) {
                    auto it = mean_accuracy.find(rel);
                    if (it == mean_accuracy.end() || !it->second.count(k)) os << std::setw(8) << "-";
                    else os << std::setw(8) << it->second.at(k);
                }
                os << std::setw(8) << mean_accuracy.at("Avg").at(k) << "\n";
            }
        }
        return os.str();
    }
};

// Rank the gallery by cosine similarity for each query and score top-k hits
// per relation. Ties break on gallery order, which is fixed, so reports are
// deterministic.
template <typename T>
FoldReport evaluate_topk_fold(const std::vector<RetrievalCase<T>>& cases,
                              const std::vector<std::vector<T>>& gallery, std::vector<int> ks,
                              int fold) {
    if (cases.empty() || gallery.empty())
        throw ValueError("evaluate_topk: empty query set or gallery");
    FoldReport report;
    report.fold = fold;
    report.gallery_size = int(gallery.size());
    report.num_queries = int(cases.size());

    // k larger than the gallery clamps for scoring but stays the report key
    std::map<int, int> effective;
    for (int k : ks) {
        if (k > int(gallery.size()))
            push_warning("top-" + std::to_string(k) + " clamped to gallery size " +
                         std::to_string(gallery.size()));
        effective[k] = std::min(k, int(gallery.size()));
    }

    std::map<std::string, std::map<int, int>> hits;  // relation -> k -> count
    std::map<std::string, int> totals;
    for (const auto& c : cases) {
        if (c.targets.empty()) throw ValueError("evaluate_topk: query without targets");
        auto dot = [&](const std::vector<T>& g) {
            T acc = 0;
            for (size_t i = 0; i < g.size(); ++i) acc += g[i] * c.query[i];
            return acc;
        };
        // best target rank = gallery entries scoring strictly higher than the
        // best-scoring true child, earlier-indexed ties counting as higher
        int rank = std::numeric_limits<int>::max();
        for (int target : c.targets) {
            T target_score = dot(gallery[size_t(target)]);
            int r = 0;
            for (size_t gi = 0; gi < gallery.size(); ++gi) {
                if (int(gi) == target) continue;
                T s = dot(gallery[gi]);
                if (s > target_score || (s == target_score && int(gi) < target)) ++r;
            }
            rank = std::min(rank, r);
        }
        totals[c.relation]++;
        for (int k : ks)
            if (rank < effective[k]) hits[c.relation][k]++;
    }

    for (const auto& [rel, total] : totals)
        for (int k : ks)
            report.accuracy[rel][k] = accuracy_eq15(hits[rel][k], 0, total, 0);
    for (int k : ks) {
        double sum = 0;
        for (const auto& [rel, per_k] : report.accuracy)
            if (rel != "Avg") sum += per_k.at(k);
        report.accuracy["Avg"][k] = sum / double(totals.size());
    }
    return report;
}

inline void finalize_report(EvalReport& report) {
    for (int k : report.ks) {
        std::map<std::string, std::pair<double, int>> acc;
        for (const auto& f : report.folds)
            for (const auto& [rel, per_k] : f.accuracy)
                if (per_k.count(k)) {
                    acc[rel].first += per_k.at(k);
                    acc[rel].second += 1;
                }
        for (const auto& [rel, sum_count] : acc)
            report.mean_accuracy[rel][k] = sum_count.first / double(sum_count.second);
    }
}

}  // namespace dcml
