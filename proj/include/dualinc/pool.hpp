#pragma once

// Learnable pool of (proxy key, low-rank increment) pairs, instruction-driven
// top-M selection, intrinsic and contextual increment composition, and the
// proxy/surrogate alignment loss.

#include "dualinc/autodiff.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace dualinc::pool {

using ad::Tensor;

struct PoolDims {
    std::size_t pool_size = 32;  // N
    std::size_t dim = 64;        // D
    std::size_t rank = 8;        // R
    std::size_t key_dim = 64;    // E

    bool operator==(const PoolDims&) const = default;
};

struct ProxyIncrementPair {
    Tensor key;       // 1 x E
    Tensor factor_a;  // D x R, zero at init
    Tensor factor_b;  // R x D
    Tensor full;      // D x D, only when the pool is not low-rank
};

class LowRankPool {
public:
    // A_n = 0, B_n ~ N(0, 0.02), keys ~ N(0, 1) normalized. With low_rank
    // disabled each increment is a dense zero-initialized D x D matrix.
    static LowRankPool init(const PoolDims& dims, std::uint64_t seed, bool low_rank = true);

    const PoolDims& dims() const noexcept { return dims_; }
    bool low_rank() const noexcept { return low_rank_; }
    std::uint64_t seed() const noexcept { return seed_; }
    std::size_t size() const noexcept { return pairs_.size(); }

    const ProxyIncrementPair& pair(std::size_t n) const { return pairs_.at(n); }
    ProxyIncrementPair& pair(std::size_t n) { return pairs_.at(n); }

    // Graph-connected increment P_n.
    Tensor increment(std::size_t n) const;
    // Current value of P_n with no graph attached.
    Tensor increment_value(std::size_t n) const;

    // N * (2 D R + E) for low-rank pools, N * (D^2 + E) otherwise.
    std::size_t parameter_count() const;

    void register_keys(ad::ParamRegistry& registry, const std::string& prefix) const;
    void register_increments(ad::ParamRegistry& registry, const std::string& prefix) const;

    // Used by checkpoint loading; dims and layout must already agree.
    static LowRankPool from_parts(const PoolDims& dims, std::uint64_t seed, bool low_rank,
                                  std::vector<ProxyIncrementPair> pairs);

private:
    PoolDims dims_;
    bool low_rank_ = true;
    std::uint64_t seed_ = 0;
    std::vector<ProxyIncrementPair> pairs_;
};

// Per-step memo of graph-connected increments so each P_n = A_n B_n is
// formed once per optimizer step no matter how many instances select it.
class IncrementCache {
public:
    explicit IncrementCache(const LowRankPool& pool) : pool_(&pool), cache_(pool.size()) {}
    const Tensor& get(std::size_t n);

private:
    const LowRankPool* pool_;
    std::vector<Tensor> cache_;
};

std::vector<double> similarities(std::span<const double> q, const LowRankPool& pool);

// Indices of the M most similar keys, most similar first; ties go to the
// lower index.
std::vector<std::size_t> select_top_m(std::span<const double> q, const LowRankPool& pool,
                                      std::size_t m);

enum class IntrinsicWeighting { normalized_cosine, softmax };

struct IntrinsicOptions {
    IntrinsicWeighting weighting = IntrinsicWeighting::normalized_cosine;
    // Treat the similarity weights as constants so the task loss cannot reach
    // the keys.
    bool detach_similarity = false;
};

// sum_m cos(q, k_m) P_m / sum_m cos(q, k_m) (or softmax weights).
Tensor intrinsic_increment(const Tensor& q, const LowRankPool& pool,
                           std::span<const std::size_t> indices,
                           const IntrinsicOptions& options = {}, IncrementCache* cache = nullptr);

inline constexpr double kSelectionEpsilon = 1e-12;

enum class TraceWeighting { uniform, frequency };

struct TaskTrace {
    int task_id = 0;
    // Selected pool indices with how often each was chosen.
    std::map<std::size_t, std::size_t> selections;
    Tensor running_avg;   // D x D
    Tensor snapshot_avg;  // D x D, set at freeze
    bool frozen = false;
    TraceWeighting weighting = TraceWeighting::uniform;

    static TaskTrace begin(int task_id, std::size_t dim,
                           TraceWeighting weighting = TraceWeighting::uniform);
    std::vector<std::size_t> selected_indices() const;
    // Snapshot once frozen, live running average before.
    const Tensor& average() const { return frozen ? snapshot_avg : running_avg; }
};

void update_trace(TaskTrace& trace, std::span<const std::size_t> indices, const LowRankPool& pool);
// Same, using precomputed increment values indexed by pool position.
void update_trace(TaskTrace& trace, std::span<const std::size_t> indices,
                  std::span<const Tensor> increment_values);
// Recomputes the running average from the pool as it is now.
void refresh_trace(TaskTrace& trace, std::span<const Tensor> increment_values);
void freeze_trace(TaskTrace& trace, const LowRankPool& pool);

struct ContextWeights {
    Tensor raw;  // 1 x t, weights are sigmoid(raw)

    static ContextWeights fresh(std::size_t tasks);
    std::size_t size() const { return raw.defined() ? raw.cols() : 0; }
    // Grows to `tasks` entries; new raws start at 0. Existing values are kept
    // when carry is set, otherwise every entry restarts at 0.
    void resize(std::size_t tasks, bool carry);
    std::vector<double> weights() const;
};

// sum_l w_l sg(Zbar_l) over the given traces, zero for a single task.
// Every trace but the last must be frozen.
Tensor contextual_increment(const ContextWeights& weights, std::span<const TaskTrace> traces,
                            bool include_current = true);

// -sum_m cos(q, k_m); q is treated as a constant.
Tensor alignment_loss(std::span<const double> q, const LowRankPool& pool,
                      std::span<const std::size_t> indices);

std::string to_string(IntrinsicWeighting w);
IntrinsicWeighting intrinsic_weighting_from_string(const std::string& s);
std::string to_string(TraceWeighting w);
TraceWeighting trace_weighting_from_string(const std::string& s);

}  // namespace dualinc::pool
