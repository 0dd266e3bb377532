#include "dualinc/engine.hpp"

#include "dualinc/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace dualinc::engine {

using ad::Tensor;
using model::EncodedInstance;
using model::Vocabulary;
using stream::InstructionInstance;
using stream::StreamTask;

namespace {

constexpr std::uint64_t kShuffleStream = 1000;
constexpr std::uint64_t kReservoirStream = 2000;
constexpr std::uint64_t kPoolStream = 3000;
constexpr std::string_view kNoFeature = "<no-feature>";

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

EncodedInstance encode(const InstructionInstance& inst) {
    return model::encode_instance(Vocabulary::standard(), inst.features, inst.instruction,
                                  inst.response);
}

std::size_t pool_count(const RunConfig& c, const model::ToyModel& m) {
    return c.pool_sharing == PoolSharing::global ? 1 : m.config.layers;
}

void release(ad::ParamRegistry& registry) {
    for (const auto& e : registry.trainable()) {
        Tensor t = e.tensor;
        t.drop_grad();
        t.set_requires_grad(false);
    }
}

std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    // Fisher-Yates with an explicit draw so the sequence does not depend on the
    // standard library's shuffle implementation.
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = rng() % i;
        std::swap(order[i - 1], order[j]);
    }
    return order;
}

double sum_cos(std::span<const double> sims, std::span<const std::size_t> idx) {
    double s = 0.0;
    for (std::size_t n : idx) s += sims[n];
    return s;
}

// Full fine-tuning of every model weight over a list of instances, optionally
// mixing rehearsal instances into each batch.
void train_full(TrainedState& state, const std::vector<InstructionInstance>& data,
                std::size_t ordinal, const std::string& name, bool replay, const StepSink& sink) {
    const RunConfig& c = state.config;
    if (data.empty()) throw DataError("task '" + name + "' has no training instances");
    std::vector<EncodedInstance> encoded;
    encoded.reserve(data.size());
    for (const auto& inst : data) encoded.push_back(encode(inst));
    std::vector<EncodedInstance> buffer;
    if (replay) {
        for (const auto& inst : state.buffer.items) buffer.push_back(encode(inst));
    }
    const std::size_t n_replay = buffer.empty() ? 0 : std::min(c.rehearsal_per_batch, c.batch_size - 1);
    const std::size_t fresh = c.batch_size - n_replay;

    ad::ParamRegistry registry;
    for (const auto& [wname, w] : state.model.named_weights()) registry.add_trainable(wname, w);
    state.trainable_count = registry.trainable_count();

    const std::size_t per_epoch = ceil_div(encoded.size(), fresh);
    ad::LrSchedule schedule{c.base_lr, c.warmup_ratio, per_epoch * c.epochs};
    ad::Optimizer opt(c.optimizer);
    std::mt19937_64 rng(derive_seed(c.seed, kShuffleStream + ordinal));

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
        const auto order = shuffled(encoded.size(), rng);
        for (std::size_t start = 0; start < order.size(); start += fresh, ++step) {
            const std::size_t end = std::min(order.size(), start + fresh);
            registry.zero_grad();
            std::vector<Tensor> losses;
            for (std::size_t i = start; i < end; ++i) {
                losses.push_back(model::ar_loss(state.model, encoded[order[i]]));
            }
            for (std::size_t r = 0; r < n_replay; ++r) {
                losses.push_back(model::ar_loss(state.model, buffer[rng() % buffer.size()]));
            }
            const Tensor loss = ad::scale(ad::add_n(losses), 1.0 / static_cast<double>(losses.size()));
            ad::backward(loss);
            const double lr = schedule.lr(step);
            opt.step(registry, lr);
            if (sink) {
                StepRecord rec;
                rec.task = ordinal;
                rec.task_name = name;
                rec.epoch = epoch;
                rec.step = step;
                rec.l_ar = loss.item();
                rec.lr = lr;
                sink(rec);
            }
        }
    }
    release(registry);
}

struct PreparedInstance {
    EncodedInstance encoded;
    std::vector<double> q;
};

void train_ours(TrainedState& state, const StreamTask& task, std::size_t ordinal,
                const StepSink& sink) {
    const RunConfig& c = state.config;
    const AblationFlags& ab = c.ablation;
    const std::size_t n_pools = state.pools.size();
    if (task.train.empty()) throw DataError("task '" + task.name + "' has no training instances");

    std::vector<PreparedInstance> data;
    data.reserve(task.train.size());
    for (const auto& inst : task.train) data.push_back({encode(inst), surrogate_query(state, inst)});

    for (std::size_t p = 0; p < n_pools; ++p) {
        state.traces[p].push_back(
            pool::TaskTrace::begin(static_cast<int>(ordinal), state.model.config.dim, c.trace_weighting));
    }
    if (ordinal > 1) state.context.resize(ordinal, c.carry_context_weights);

    ad::ParamRegistry registry;
    for (std::size_t p = 0; p < n_pools; ++p) {
        const std::string prefix = "pool" + std::to_string(p);
        if (!ab.drop_align_loss) {
            state.pools[p].register_keys(registry, prefix);
        }
        if (!ab.drop_intrinsic) state.pools[p].register_increments(registry, prefix);
    }
    if (ordinal > 1 && !ab.drop_contextual) registry.add_trainable("context", state.context.raw);
    state.trainable_count = registry.trainable_count();

    const std::size_t per_epoch = ceil_div(data.size(), c.batch_size);
    ad::LrSchedule schedule{c.base_lr * c.pool_lr_scale, c.warmup_ratio, per_epoch * c.epochs};
    ad::Optimizer opt(c.optimizer);
    std::mt19937_64 rng(derive_seed(c.seed, kShuffleStream + ordinal));
    const pool::IntrinsicOptions iopts{c.intrinsic_weighting, true};
    const bool use_context = !ab.drop_contextual && ordinal > 1;

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
        const auto order = shuffled(data.size(), rng);
        for (std::size_t start = 0; start < order.size(); start += c.batch_size, ++step) {
            const std::size_t end = std::min(order.size(), start + c.batch_size);
            registry.zero_grad();

            std::vector<pool::IncrementCache> caches;
            std::vector<std::vector<Tensor>> values(n_pools);
            for (std::size_t p = 0; p < n_pools; ++p) {
                caches.emplace_back(state.pools[p]);
                for (std::size_t n = 0; n < state.pools[p].size(); ++n) {
                    values[p].push_back(caches[p].get(n));
                }
                pool::refresh_trace(state.traces[p].back(), values[p]);
            }

            std::vector<Tensor> ar_terms;
            std::vector<Tensor> align_terms;
            double align_value = 0.0;
            double cos_sum = 0.0;
            std::size_t cos_count = 0;
            std::set<std::size_t> batch_selected;
            for (std::size_t i = start; i < end; ++i) {
                const PreparedInstance& inst = data[order[i]];
                try {
                    model::AdaptedForwardSpec spec;
                    spec.position = ab.adapt_position;
                    const Tensor q = Tensor::row(inst.q);
                    for (std::size_t p = 0; p < n_pools; ++p) {
                        const auto& pl = state.pools[p];
                        const auto idx = pool::select_top_m(inst.q, pl, c.top_m);
                        const auto sims = pool::similarities(inst.q, pl);
                        const double s = sum_cos(sims, idx);
                        align_value -= s;
                        cos_sum += s;
                        cos_count += idx.size();
                        if (p == 0) batch_selected.insert(idx.begin(), idx.end());

                        auto& trace = state.traces[p].back();
                        bool changed = trace.weighting == pool::TraceWeighting::frequency;
                        for (std::size_t n : idx) changed = changed || !trace.selections.contains(n);
                        if (changed) {
                            pool::update_trace(trace, idx, values[p]);
                        } else {
                            for (std::size_t n : idx) ++trace.selections[n];
                        }

                        model::LayerDelta delta;
                        if (!ab.drop_intrinsic) {
                            delta.delta_theta = pool::intrinsic_increment(q, pl, idx, iopts, &caches[p]);
                        }
                        if (use_context) {
                            delta.delta_delta = pool::contextual_increment(
                                state.context, state.traces[p], c.context_include_current);
                        }
                        spec.deltas.push_back(std::move(delta));
                        if (!ab.drop_align_loss) align_terms.push_back(pool::alignment_loss(inst.q, pl, idx));
                    }
                    ar_terms.push_back(model::ar_loss(state.model, inst.encoded, spec));
                } catch (const DegenerateSelectionError& e) {
                    throw DegenerateSelectionError("task '" + task.name + "' instance " +
                                                   std::to_string(order[i]) + ": " + e.what());
                }
            }
            const double inv = 1.0 / static_cast<double>(end - start);
            const Tensor l_ar = ad::scale(ad::add_n(ar_terms), inv);
            if (l_ar.requires_grad()) ad::backward(l_ar);
            if (!align_terms.empty()) ad::backward(ad::scale(ad::add_n(align_terms), inv));

            const double lr = schedule.lr(step);
            if (registry.trainable_count() > 0) opt.step(registry, lr);
            if (sink) {
                StepRecord rec;
                rec.task = ordinal;
                rec.task_name = task.name;
                rec.epoch = epoch;
                rec.step = step;
                rec.l_align = align_value * inv;
                rec.l_ar = l_ar.item();
                rec.lr = lr;
                rec.selected_indices.assign(batch_selected.begin(), batch_selected.end());
                rec.key_query_cos = cos_count ? cos_sum / static_cast<double>(cos_count) : 0.0;
                sink(rec);
            }
        }
    }
    release(registry);
    for (std::size_t p = 0; p < n_pools; ++p) pool::freeze_trace(state.traces[p].back(), state.pools[p]);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finalizer over the pair.
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

void RunConfig::validate() const {
    if (pool_size == 0) throw ConfigError("pool_size must be positive");
    if (top_m == 0) throw ConfigError("top_m must be positive");
    if (top_m > pool_size) {
        throw ConfigError("top_m (" + std::to_string(top_m) + ") exceeds pool_size (" +
                          std::to_string(pool_size) + ")");
    }
    if (rank == 0) throw ConfigError("rank must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("base_lr must be positive");
    if (!(pool_lr_scale > 0.0) || !std::isfinite(pool_lr_scale)) {
        throw ConfigError("pool_lr_scale must be positive");
    }
    ad::LrSchedule{base_lr, warmup_ratio, 1}.validate();
    if (!(rehearsal_fraction > 0.0 && rehearsal_fraction <= 1.0)) {
        throw ConfigError("rehearsal_fraction must lie in (0, 1]");
    }
    if (method == Method::rehearsal && rehearsal_per_batch >= batch_size) {
        throw ConfigError("rehearsal_per_batch must be smaller than batch_size");
    }
    std::vector<int> sorted = task_order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        if (sorted[i] != static_cast<int>(i) + 1) {
            throw ConfigError("task_order must be a permutation of 1.." + std::to_string(sorted.size()));
        }
    }
}

void RehearsalBuffer::absorb(const std::vector<InstructionInstance>& instances,
                             std::size_t new_capacity, std::mt19937_64& rng) {
    capacity = new_capacity;
    while (items.size() > capacity) {
        items.erase(items.begin() + static_cast<std::ptrdiff_t>(rng() % items.size()));
    }
    for (const auto& inst : instances) {
        ++seen;
        if (items.size() < capacity) {
            items.push_back(inst);
        } else if (capacity > 0) {
            const std::uint64_t j = rng() % seen;
            if (j < capacity) items[j] = inst;
        }
    }
}

TrainedState init_state(const model::ToyModel& base, const RunConfig& config) {
    config.validate();
    TrainedState s;
    s.config = config;
    const std::size_t dim = base.config.dim;
    s.encoder = std::make_shared<const SurrogateEncoder>(dim, config.encoder_seed,
                                                         base.config.feature_dim);
    if (config.method == Method::ours) {
        s.model = base;
        const std::size_t pools = pool_count(config, base);
        const pool::PoolDims dims{config.pool_size, dim, config.rank, dim};
        for (std::size_t p = 0; p < pools; ++p) {
            s.pools.push_back(pool::LowRankPool::init(dims, derive_seed(config.seed, kPoolStream + p),
                                                      !config.ablation.no_low_rank));
        }
        s.traces.resize(pools);
    } else {
        s.model = base.clone();
    }
    return s;
}

void train_task(TrainedState& state, const StreamTask& task, const StepSink& sink) {
    const std::size_t ordinal = state.task_names.size() + 1;
    switch (state.config.method) {
        case Method::ours:
            train_ours(state, task, ordinal, sink);
            break;
        case Method::sequential:
            train_full(state, task.train, ordinal, task.name, false, sink);
            break;
        case Method::rehearsal: {
            train_full(state, task.train, ordinal, task.name, true, sink);
            std::mt19937_64 rng(derive_seed(state.config.seed, kReservoirStream + ordinal));
            const auto cap = static_cast<std::size_t>(
                std::ceil(state.config.rehearsal_fraction * static_cast<double>(task.train.size())));
            state.buffer.absorb(task.train, cap, rng);
            break;
        }
        case Method::joint:
            throw ConfigError("joint training covers the whole stream; use train_joint");
    }
    state.task_names.push_back(task.name);
}

void train_joint(TrainedState& state, const std::vector<StreamTask>& tasks, const StepSink& sink) {
    if (state.config.method != Method::joint) throw ConfigError("train_joint: method is not joint");
    std::vector<InstructionInstance> all;
    for (const auto& t : tasks) all.insert(all.end(), t.train.begin(), t.train.end());
    train_full(state, all, 1, "joint", false, sink);
    for (const auto& t : tasks) state.task_names.push_back(t.name);
}

TrainedState train_continual(const std::vector<StreamTask>& tasks, const model::ToyModel& base,
                             const RunConfig& config, const StepSink& sink) {
    const auto ordered = ordered_tasks(tasks, config.task_order);
    TrainedState state = init_state(base, config);
    if (config.method == Method::joint) {
        train_joint(state, ordered, sink);
    } else {
        for (const auto& t : ordered) train_task(state, t, sink);
    }
    return state;
}

TrainedState run_baseline(const std::vector<StreamTask>& tasks, const model::ToyModel& base,
                          const RunConfig& config, const StepSink& sink) {
    if (config.method == Method::ours) throw ConfigError("run_baseline: method 'ours' is not a baseline");
    return train_continual(tasks, base, config, sink);
}

std::vector<double> surrogate_query(const TrainedState& state, const InstructionInstance& instance) {
    if (state.config.ablation.similarity_source == SimilaritySource::feature) {
        if (instance.features.empty()) return state.encoder->encode(kNoFeature);
        return state.encoder->encode_features(instance.features);
    }
    return state.encoder->encode(instance.instruction);
}

std::vector<std::vector<std::size_t>> select_for(const TrainedState& state,
                                                 const InstructionInstance& instance) {
    std::vector<std::vector<std::size_t>> out;
    const auto q = surrogate_query(state, instance);
    for (const auto& p : state.pools) out.push_back(pool::select_top_m(q, p, state.config.top_m));
    return out;
}

namespace {

std::string decode_greedy(const TrainedState& state, const InstructionInstance& instance,
                          std::span<const int> hint) {
    const RunConfig& c = state.config;
    const auto& vocab = Vocabulary::standard();
    const EncodedInstance enc =
        model::encode_instance(vocab, instance.features, instance.instruction, "");
    model::AdaptedForwardSpec spec;
    spec.position = c.ablation.adapt_position;
    if (c.method == Method::ours && !state.task_names.empty()) {
        const auto q = surrogate_query(state, instance);
        const Tensor qt = Tensor::row(q);
        for (std::size_t p = 0; p < state.pools.size(); ++p) {
            model::LayerDelta delta;
            if (!c.ablation.drop_intrinsic) {
                const auto idx = pool::select_top_m(q, state.pools[p], c.top_m);
                delta.delta_theta = pool::intrinsic_increment(qt, state.pools[p], idx,
                                                              {c.intrinsic_weighting, true});
            }
            if (!c.ablation.drop_contextual && state.traces[p].size() > 1) {
                delta.delta_delta = pool::contextual_increment(state.context, state.traces[p],
                                                               c.context_include_current);
            }
            spec.deltas.push_back(std::move(delta));
        }
    }
    const std::size_t prefix = instance.features.empty() ? 0 : 1;
    const std::size_t room = state.model.config.max_seq_len - std::min(state.model.config.max_seq_len,
                                                                      prefix + enc.prompt.size());
    const auto out = model::generate_hinted(state.model, instance.features, enc.prompt, spec,
                                            std::min(c.max_new_tokens, room), hint);
    // The model's output layer is wider than the symbol set; spare ids decode
    // as <unk> and can never match a reference.
    std::string text;
    for (int t : out) {
        if (!text.empty()) text.push_back(' ');
        text += static_cast<std::size_t>(t) < vocab.size() ? vocab.symbol(t) : std::string("<unk>");
    }
    return text;
}

}  // namespace

std::string infer(const TrainedState& state, const InstructionInstance& instance) {
    return decode_greedy(state, instance, {});
}

double evaluate(const TrainedState& state, const std::vector<InstructionInstance>& eval) {
    if (eval.empty()) throw DataError("evaluate: empty eval set");
    std::size_t correct = 0;
    const auto& vocab = Vocabulary::standard();
    for (const auto& inst : eval) {
        const auto hint = model::encode_instance(vocab, {}, "", inst.response).response;
        if (stream::canonicalize_response(decode_greedy(state, inst, hint)) ==
            stream::canonicalize_response(inst.response)) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(eval.size());
}

std::vector<double> accuracy_row(const TrainedState& state, const std::vector<StreamTask>& ordered,
                                 std::size_t k) {
    if (k == 0 || k > ordered.size()) throw IndexError("accuracy_row: k outside 1..T");
    std::vector<double> row;
    for (std::size_t j = 0; j < k; ++j) row.push_back(evaluate(state, ordered[j].eval));
    return row;
}

metrics::AccuracyMatrix accuracy_matrix(const std::vector<StreamTask>& ordered,
                                        const std::vector<const TrainedState*>& checkpoints) {
    metrics::AccuracyMatrix m(ordered.size());
    if (checkpoints.size() != ordered.size()) {
        throw ContractError("accuracy_matrix: " + std::to_string(checkpoints.size()) +
                            " checkpoints for " + std::to_string(ordered.size()) + " tasks");
    }
    for (std::size_t k = 1; k <= ordered.size(); ++k) {
        if (!checkpoints[k - 1]) throw ContractError("accuracy_matrix: missing checkpoint " + std::to_string(k));
        m.set_row(k, accuracy_row(*checkpoints[k - 1], ordered, k));
    }
    return m;
}

std::vector<StreamTask> ordered_tasks(const std::vector<StreamTask>& tasks, const std::vector<int>& order) {
    if (order.empty()) return tasks;
    if (order.size() != tasks.size()) {
        throw ConfigError("task_order has " + std::to_string(order.size()) + " entries for " +
                          std::to_string(tasks.size()) + " tasks");
    }
    std::vector<StreamTask> out;
    std::vector<bool> used(tasks.size(), false);
    for (int id : order) {
        if (id < 1 || static_cast<std::size_t>(id) > tasks.size() || used[id - 1]) {
            throw ConfigError("task_order is not a permutation of 1.." + std::to_string(tasks.size()));
        }
        used[id - 1] = true;
        out.push_back(tasks[id - 1]);
    }
    return out;
}

std::string to_string(Method m) {
    switch (m) {
        case Method::ours: return "ours";
        case Method::sequential: return "sequential";
        case Method::rehearsal: return "rehearsal";
        case Method::joint: return "joint";
    }
    return "?";
}

Method method_from_string(const std::string& s) {
    if (s == "ours") return Method::ours;
    if (s == "sequential") return Method::sequential;
    if (s == "rehearsal") return Method::rehearsal;
    if (s == "joint") return Method::joint;
    throw ConfigError("unknown method '" + s + "'");
}

std::string to_string(SimilaritySource s) { return s == SimilaritySource::feature ? "feature" : "text"; }

SimilaritySource similarity_source_from_string(const std::string& s) {
    if (s == "text") return SimilaritySource::text;
    if (s == "feature") return SimilaritySource::feature;
    throw ConfigError("unknown similarity_source '" + s + "'");
}

std::string to_string(PoolSharing p) { return p == PoolSharing::global ? "global" : "per_layer"; }

PoolSharing pool_sharing_from_string(const std::string& s) {
    if (s == "per_layer") return PoolSharing::per_layer;
    if (s == "global") return PoolSharing::global;
    throw ConfigError("unknown pool_sharing '" + s + "'");
}

}  // namespace dualinc::engine
