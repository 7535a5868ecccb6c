#pragma once

#include <deque>

#include "dcml/nn.hpp"

namespace dcml {

// Plain-value cosine similarity for evaluation and logits rows; epsilon
// keeps a zero vector from producing NaN, with a warning flag.
template <typename T>
T cosine_similarity(const Tensor<T>& u, const Tensor<T>& v) {
    if (u.rank() != 1 || v.rank() != 1 || u.shape() != v.shape())
        throw ShapeError("cosine_similarity expects two equal-length vectors");
    T dot = 0, nu = 0, nv = 0;
    const auto& uv = u.values();
    const auto& vv = v.values();
    for (size_t i = 0; i < uv.size(); ++i) {
        dot += uv[i] * vv[i];
        nu += uv[i] * uv[i];
        nv += vv[i] * vv[i];
    }
    T denom = std::sqrt(nu) * std::sqrt(nv);
    if (denom == T(0)) {
        push_warning("cosine_similarity: zero vector, epsilon-stabilized");
        denom = T(1e-12);
    }
    return dot / denom;
}

// Exponential moving average of the query parameters into the key mirror:
// theta_t <- m * theta_t + (1 - m) * theta_q. The query side is untouched.
template <typename T>
void momentum_update(std::vector<Tensor<T>>& theta_t, const std::vector<Tensor<T>>& theta_q,
                     double m) {
    if (theta_t.size() != theta_q.size())
        throw ShapeError("momentum_update: parameter lists differ in length");
    T mm = T(m);
    for (size_t i = 0; i < theta_t.size(); ++i) {
        if (theta_t[i].shape() != theta_q[i].shape())
            throw ShapeError("momentum_update: shape mismatch at parameter " + std::to_string(i));
        auto& tv = theta_t[i].values();
        const auto& qv = theta_q[i].values();
        for (size_t j = 0; j < tv.size(); ++j) tv[j] = mm * tv[j] + (T(1) - mm) * qv[j];
    }
}

template <typename T>
void momentum_update(ParamSet<T>& theta_t, const ParamSet<T>& theta_q, double m) {
    auto t = theta_t.tensors();
    momentum_update(t, theta_q.tensors(), m);
}

// FIFO queue of unit-norm key embeddings with strict oldest-first eviction.
// Entry 0 of a snapshot is the oldest; the newest entry (the head) carries
// the largest timestamp.
template <typename T>
class MemoryBank {
public:
    MemoryBank(int dim, size_t capacity) : dim_(dim), capacity_(capacity) {
        if (dim < 1 || capacity < 1) throw ConfigError("memory bank needs dim and capacity >= 1");
    }

    int dim() const { return dim_; }
    size_t capacity() const { return capacity_; }
    size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    void enqueue(const std::vector<T>& embedding) {
        if (int(embedding.size()) != dim_)
            throw ShapeError("bank: embedding dim " + std::to_string(embedding.size()) +
                             " != " + std::to_string(dim_));
        T sq = 0;
        for (T v : embedding) sq += v * v;
        if (std::abs(double(std::sqrt(sq)) - 1.0) > 1e-5)
            throw ValueError("bank: embedding is not unit-norm");
        entries_.push_back(embedding);
        stamps_.push_back(counter_++);
        while (entries_.size() > capacity_) {
            entries_.pop_front();
            stamps_.pop_front();
        }
    }

    // Append a batch of rows (B x dim).
    void enqueue_batch(const Tensor<T>& rows) {
        if (rows.rank() != 2 || rows.shape()[1] != dim_)
            throw ShapeError("bank: expected (batch x dim) rows");
        for (int r = 0; r < rows.shape()[0]; ++r) {
            const T* p = rows.values().data() + size_t(r) * dim_;
            enqueue(std::vector<T>(p, p + dim_));
        }
    }

    // Oldest-first copy of the contents.
    std::vector<std::vector<T>> snapshot() const { return {entries_.begin(), entries_.end()}; }
    std::vector<int64_t> timestamps() const { return {stamps_.begin(), stamps_.end()}; }

    // Bank as a (dim x size) matrix, columns oldest-first, for batched logits.
    Tensor<T> as_matrix_transposed() const {
        if (empty()) throw TrainError("bank: empty during loss computation; warm-up required");
        std::vector<T> v(size_t(dim_) * entries_.size());
        for (size_t e = 0; e < entries_.size(); ++e)
            for (int d = 0; d < dim_; ++d)
                v[size_t(d) * entries_.size() + e] = entries_[e][size_t(d)];
        return Tensor<T>::from_data({dim_, int(entries_.size())}, std::move(v));
    }

private:
    int dim_;
    size_t capacity_;
    std::deque<std::vector<T>> entries_;
    std::deque<int64_t> stamps_;
    int64_t counter_ = 0;
};

// One logits row on the graph: [cos(q, k+), cos(q, n_1), ...] / tau with the
// positive pinned to column 0. Inputs are unit-norm so cosine is the dot
// product. Returns the row; the label is always 0.
template <typename T>
Tensor<T> build_logits(const Tensor<T>& q_emb, const Tensor<T>& positive_key,
                       const MemoryBank<T>& bank, double tau) {
    if (q_emb.rank() != 1 || positive_key.rank() != 1 || q_emb.shape() != positive_key.shape())
        throw ShapeError("build_logits expects two equal-length embedding vectors");
    if (bank.empty()) throw TrainError("build_logits: empty bank; warm-up required");
    if (q_emb.shape()[0] != bank.dim()) throw ShapeError("build_logits: embedding dim != bank dim");
    auto q_row = reshape(q_emb, {1, q_emb.shape()[0]});
    auto pos = matmul(q_row, reshape(positive_key, {positive_key.shape()[0], 1}));  // 1x1
    auto negs = matmul(q_row, bank.as_matrix_transposed());                         // 1xK
    auto row = concat(std::vector<Tensor<T>>{pos, negs}, 1);
    return scale(reshape(row, {row.shape()[1]}), T(1.0 / tau));
}

inline constexpr int build_logits_label = 0;

// Mean over rows of -log softmax at the row's positive column, computed with
// max subtraction. Rows may be a single vector or a (batch x columns) matrix.
template <typename T>
Tensor<T> info_nce(const Tensor<T>& logit_rows, const std::vector<int>& labels) {
    Tensor<T> rows = logit_rows.rank() == 1
                         ? reshape(logit_rows, {1, logit_rows.shape()[0]})
                         : logit_rows;
    return cross_entropy(rows, labels);
}

template <typename T>
Tensor<T> info_nce(const Tensor<T>& logit_rows) {
    int n = logit_rows.rank() == 1 ? 1 : logit_rows.shape()[0];
    return info_nce(logit_rows, std::vector<int>(size_t(n), 0));
}

}  // namespace dcml
