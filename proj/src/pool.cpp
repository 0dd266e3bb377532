#include "dualinc/pool.hpp"

#include "dualinc/errors.hpp"
#include "dualinc/log.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace dualinc::pool {

LowRankPool LowRankPool::init(const PoolDims& dims, std::uint64_t seed, bool low_rank) {
    if (dims.pool_size == 0 || dims.dim == 0 || dims.rank == 0 || dims.key_dim == 0) {
        throw ConfigError("pool: every dimension must be positive");
    }
    if (dims.rank > dims.dim) {
        throw ConfigError("pool: rank " + std::to_string(dims.rank) + " exceeds dim " +
                          std::to_string(dims.dim));
    }
    LowRankPool pool;
    pool.dims_ = dims;
    pool.low_rank_ = low_rank;
    pool.seed_ = seed;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> key_dist(0.0, 1.0);
    std::normal_distribution<double> factor_dist(0.0, 0.02);
    const std::size_t d = dims.dim, r = dims.rank;
    for (std::size_t n = 0; n < dims.pool_size; ++n) {
        ProxyIncrementPair p;
        std::vector<double> key(dims.key_dim);
        double norm = 0.0;
        for (double& x : key) {
            x = key_dist(rng);
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (double& x : key) x /= norm;
        p.key = Tensor::row(std::move(key));
        if (low_rank) {
            p.factor_a = Tensor::zeros({d, r});
            std::vector<double> b(r * d);
            for (double& x : b) x = factor_dist(rng);
            p.factor_b = Tensor::from({r, d}, std::move(b));
        } else {
            p.full = Tensor::zeros({d, d});
        }
        pool.pairs_.push_back(std::move(p));
    }
    return pool;
}

LowRankPool LowRankPool::from_parts(const PoolDims& dims, std::uint64_t seed, bool low_rank,
                                    std::vector<ProxyIncrementPair> pairs) {
    if (pairs.size() != dims.pool_size) throw ContractError("pool: pair count does not match dims");
    for (const auto& p : pairs) {
        const bool ok = p.key.shape() == ad::Shape{1, dims.key_dim} &&
                        (low_rank ? (p.factor_a.shape() == ad::Shape{dims.dim, dims.rank} &&
                                     p.factor_b.shape() == ad::Shape{dims.rank, dims.dim})
                                  : p.full.shape() == ad::Shape{dims.dim, dims.dim});
        if (!ok) throw ContractError("pool: pair shapes do not match dims");
    }
    LowRankPool pool;
    pool.dims_ = dims;
    pool.seed_ = seed;
    pool.low_rank_ = low_rank;
    pool.pairs_ = std::move(pairs);
    return pool;
}

Tensor LowRankPool::increment(std::size_t n) const {
    const auto& p = pair(n);
    return low_rank_ ? ad::matmul(p.factor_a, p.factor_b) : p.full;
}

Tensor LowRankPool::increment_value(std::size_t n) const {
    const auto& p = pair(n);
    if (!low_rank_) return p.full.clone();
    return ad::matmul(p.factor_a.clone(), p.factor_b.clone());
}

std::size_t LowRankPool::parameter_count() const {
    const auto& d = dims_;
    const std::size_t per = low_rank_ ? 2 * d.dim * d.rank : d.dim * d.dim;
    return d.pool_size * (per + d.key_dim);
}

void LowRankPool::register_keys(ad::ParamRegistry& registry, const std::string& prefix) const {
    for (std::size_t n = 0; n < pairs_.size(); ++n) {
        registry.add_trainable(prefix + ".key" + std::to_string(n), pairs_[n].key);
    }
}

void LowRankPool::register_increments(ad::ParamRegistry& registry,
                                      const std::string& prefix) const {
    for (std::size_t n = 0; n < pairs_.size(); ++n) {
        const auto& p = pairs_[n];
        const std::string base = prefix + ".pair" + std::to_string(n);
        if (low_rank_) {
            registry.add_trainable(base + ".a", p.factor_a);
            registry.add_trainable(base + ".b", p.factor_b);
        } else {
            registry.add_trainable(base + ".full", p.full);
        }
    }
}

const Tensor& IncrementCache::get(std::size_t n) {
    if (n >= cache_.size()) throw IndexError("increment cache: index out of range");
    if (!cache_[n].defined()) cache_[n] = pool_->increment(n);
    return cache_[n];
}

std::vector<double> similarities(std::span<const double> q, const LowRankPool& pool) {
    if (q.size() != pool.dims().key_dim) {
        throw DimensionError("similarities: query length " + std::to_string(q.size()) +
                             " vs key dim " + std::to_string(pool.dims().key_dim));
    }
    double qn = 0.0;
    for (double x : q) qn += x * x;
    qn = std::sqrt(qn);
    if (qn <= ad::kNormEpsilon) throw DegenerateInputError("similarities: zero-norm query");
    std::vector<double> out(pool.size());
    for (std::size_t n = 0; n < pool.size(); ++n) {
        const auto k = pool.pair(n).key.data();
        double dot = 0.0, kn = 0.0;
        for (std::size_t i = 0; i < q.size(); ++i) {
            dot += k[i] * q[i];
            kn += k[i] * k[i];
        }
        kn = std::sqrt(kn);
        if (kn <= ad::kNormEpsilon) {
            throw DegenerateInputError("similarities: key " + std::to_string(n) + " has zero norm");
        }
        out[n] = dot / (kn * qn);
    }
    return out;
}

std::vector<std::size_t> select_top_m(std::span<const double> q, const LowRankPool& pool,
                                      std::size_t m) {
    if (m > pool.size()) {
        throw ConfigError("select_top_m: M=" + std::to_string(m) + " exceeds pool size " +
                          std::to_string(pool.size()));
    }
    const auto sims = similarities(q, pool);
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (sims[a] != sims[b]) return sims[a] > sims[b];
                          return a < b;
                      });
    idx.resize(m);
    return idx;
}

Tensor intrinsic_increment(const Tensor& q, const LowRankPool& pool,
                           std::span<const std::size_t> indices, const IntrinsicOptions& options,
                           IncrementCache* cache) {
    if (indices.empty()) throw ContractError("intrinsic_increment: no selected indices");
    std::vector<Tensor> weights;
    weights.reserve(indices.size());
    for (std::size_t n : indices) {
        const Tensor& key = pool.pair(n).key;
        Tensor c = ad::cosine_sim(q, options.detach_similarity ? ad::stop_gradient(key) : key);
        weights.push_back(options.detach_similarity ? ad::stop_gradient(c) : c);
    }
    if (options.weighting == IntrinsicWeighting::softmax) {
        for (auto& w : weights) w = ad::exp(w);
    }
    Tensor denom = ad::add_n(weights);
    if (std::abs(denom.item()) <= kSelectionEpsilon) {
        std::ostringstream msg;
        msg << "intrinsic_increment: similarity sum " << denom.item() << " is degenerate (cosines:";
        for (const auto& w : weights) msg << ' ' << w.item();
        msg << ')';
        throw DegenerateSelectionError(msg.str());
    }
    std::vector<Tensor> terms;
    terms.reserve(indices.size());
    for (std::size_t m = 0; m < indices.size(); ++m) {
        const Tensor p = cache ? cache->get(indices[m]) : pool.increment(indices[m]);
        terms.push_back(ad::scale_by(p, weights[m]));
    }
    return ad::div_by(ad::add_n(terms), denom);
}

TaskTrace TaskTrace::begin(int task_id, std::size_t dim, TraceWeighting weighting) {
    TaskTrace t;
    t.task_id = task_id;
    t.running_avg = Tensor::zeros({dim, dim});
    t.weighting = weighting;
    return t;
}

std::vector<std::size_t> TaskTrace::selected_indices() const {
    std::vector<std::size_t> out;
    out.reserve(selections.size());
    for (const auto& [n, count] : selections) out.push_back(n);
    return out;
}

void refresh_trace(TaskTrace& trace, std::span<const Tensor> increment_values) {
    if (trace.frozen) throw ContractError("trace: task " + std::to_string(trace.task_id) + " is frozen");
    const std::size_t size = trace.running_avg.size();
    std::vector<double> acc(size, 0.0);
    double total = 0.0;
    for (const auto& [n, count] : trace.selections) {
        if (n >= increment_values.size()) throw IndexError("trace: pool index out of range");
        const double w =
            trace.weighting == TraceWeighting::frequency ? static_cast<double>(count) : 1.0;
        const auto v = increment_values[n].data();
        for (std::size_t i = 0; i < size; ++i) acc[i] += w * v[i];
        total += w;
    }
    if (total > 0.0) {
        for (double& x : acc) x /= total;
    }
    trace.running_avg = Tensor::from(trace.running_avg.shape(), std::move(acc));
}

void update_trace(TaskTrace& trace, std::span<const std::size_t> indices,
                  std::span<const Tensor> increment_values) {
    if (trace.frozen) {
        throw ContractError("update_trace: task " + std::to_string(trace.task_id) + " is frozen");
    }
    for (std::size_t n : indices) {
        if (n >= increment_values.size()) throw IndexError("update_trace: pool index out of range");
        ++trace.selections[n];
    }
    refresh_trace(trace, increment_values);
}

namespace {
std::vector<Tensor> all_increment_values(const LowRankPool& pool) {
    std::vector<Tensor> v;
    v.reserve(pool.size());
    for (std::size_t n = 0; n < pool.size(); ++n) v.push_back(pool.increment_value(n));
    return v;
}
}  // namespace

void update_trace(TaskTrace& trace, std::span<const std::size_t> indices, const LowRankPool& pool) {
    update_trace(trace, indices, all_increment_values(pool));
}

void freeze_trace(TaskTrace& trace, const LowRankPool& pool) {
    if (trace.frozen) {
        throw ContractError("freeze_trace: task " + std::to_string(trace.task_id) +
                            " is already frozen");
    }
    if (trace.selections.empty()) {
        log_warning("freeze_trace: task " + std::to_string(trace.task_id) +
                    " selected no increments; snapshot is zero");
    }
    refresh_trace(trace, all_increment_values(pool));
    trace.snapshot_avg = trace.running_avg.clone();
    trace.frozen = true;
}

ContextWeights ContextWeights::fresh(std::size_t tasks) {
    return ContextWeights{Tensor::zeros({1, tasks}, true)};
}

void ContextWeights::resize(std::size_t tasks, bool carry) {
    std::vector<double> v(tasks, 0.0);
    if (carry && raw.defined()) {
        const auto old = raw.data();
        std::copy_n(old.begin(), std::min(old.size(), tasks), v.begin());
    }
    raw = Tensor::from({1, tasks}, std::move(v), true);
}

std::vector<double> ContextWeights::weights() const {
    std::vector<double> out;
    if (!raw.defined()) return out;
    for (double r : raw.data()) out.push_back(1.0 / (1.0 + std::exp(-r)));
    return out;
}

Tensor contextual_increment(const ContextWeights& weights, std::span<const TaskTrace> traces,
                            bool include_current) {
    if (traces.empty()) throw ContractError("contextual_increment: no task traces");
    const ad::Shape shape = traces.front().average().shape();
    for (std::size_t l = 0; l + 1 < traces.size(); ++l) {
        if (!traces[l].frozen) {
            throw ContractError("contextual_increment: historical trace for task " +
                                std::to_string(traces[l].task_id) + " is not frozen");
        }
    }
    if (traces.size() == 1) return Tensor::zeros(shape);
    if (weights.size() != traces.size()) {
        throw DimensionError("contextual_increment: " + std::to_string(weights.size()) +
                             " weights for " + std::to_string(traces.size()) + " tasks");
    }
    const std::size_t used = include_current ? traces.size() : traces.size() - 1;
    const Tensor w = ad::sigmoid(weights.raw);
    std::vector<Tensor> terms;
    terms.reserve(used);
    for (std::size_t l = 0; l < used; ++l) {
        terms.push_back(ad::scale_by(ad::stop_gradient(traces[l].average()), ad::element(w, l)));
    }
    return ad::add_n(terms);
}

Tensor alignment_loss(std::span<const double> q, const LowRankPool& pool,
                      std::span<const std::size_t> indices) {
    if (indices.empty()) throw ContractError("alignment_loss: no selected indices");
    const Tensor qc = Tensor::row(std::vector<double>(q.begin(), q.end()));
    std::vector<Tensor> cos;
    cos.reserve(indices.size());
    for (std::size_t n : indices) cos.push_back(ad::cosine_sim(qc, pool.pair(n).key));
    return ad::scale(ad::add_n(cos), -1.0);
}

std::string to_string(IntrinsicWeighting w) {
    return w == IntrinsicWeighting::softmax ? "softmax" : "normalized";
}

IntrinsicWeighting intrinsic_weighting_from_string(const std::string& s) {
    if (s == "normalized") return IntrinsicWeighting::normalized_cosine;
    if (s == "softmax") return IntrinsicWeighting::softmax;
    throw ConfigError("unknown intrinsic_weighting '" + s + "'");
}

std::string to_string(TraceWeighting w) {
    return w == TraceWeighting::frequency ? "frequency" : "uniform";
}

TraceWeighting trace_weighting_from_string(const std::string& s) {
    if (s == "uniform") return TraceWeighting::uniform;
    if (s == "frequency") return TraceWeighting::frequency;
    throw ConfigError("unknown trace_weighting '" + s + "'");
}

}  // namespace dualinc::pool
