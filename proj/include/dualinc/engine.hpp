#pragma once

// Continual instruction tuning over a stream of tasks: the pool-based method,
// the sequential / rehearsal / joint baselines, evaluation and the accuracy
// matrix.

#include "dualinc/autodiff.hpp"
#include "dualinc/encoder.hpp"
#include "dualinc/metrics.hpp"
#include "dualinc/model.hpp"
#include "dualinc/pool.hpp"
#include "dualinc/stream.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace dualinc::engine {

enum class Method { ours, sequential, rehearsal, joint };
enum class SimilaritySource { text, feature };
enum class PoolSharing { per_layer, global };

struct AblationFlags {
    bool drop_intrinsic = false;
    bool drop_contextual = false;
    bool drop_align_loss = false;
    model::AdaptPosition adapt_position = model::AdaptPosition::all;
    SimilaritySource similarity_source = SimilaritySource::text;
    bool no_low_rank = false;

    bool operator==(const AblationFlags&) const = default;
};

struct RunConfig {
    Method method = Method::ours;
    // 1-based positions into the loaded stream; empty means stream order.
    std::vector<int> task_order;
    std::size_t pool_size = 32;  // N
    std::size_t top_m = 4;       // M
    std::size_t rank = 8;        // R
    std::size_t batch_size = 32;
    std::size_t epochs = 2;
    double base_lr = 1e-2;
    // The pool method steps at base_lr * pool_lr_scale: low-rank factors start
    // near zero and need much larger plain-SGD steps than full fine-tuning.
    double pool_lr_scale = 30.0;
    double warmup_ratio = 0.03;
    ad::OptimizerConfig optimizer;
    std::uint64_t seed = 0;
    std::uint64_t encoder_seed = 7;
    AblationFlags ablation;
    pool::IntrinsicWeighting intrinsic_weighting = pool::IntrinsicWeighting::normalized_cosine;
    pool::TraceWeighting trace_weighting = pool::TraceWeighting::uniform;
    bool context_include_current = true;
    bool carry_context_weights = false;
    PoolSharing pool_sharing = PoolSharing::per_layer;
    // Rehearsal: buffer capacity as a fraction of the task just left, and
    // buffer instances per batch.
    double rehearsal_fraction = 0.01;
    std::size_t rehearsal_per_batch = 4;
    std::size_t max_new_tokens = 8;

    void validate() const;
    bool operator==(const RunConfig&) const = default;
};

// Reservoir over every training instance seen at past task boundaries.
struct RehearsalBuffer {
    std::size_t capacity = 0;
    std::uint64_t seen = 0;
    std::vector<stream::InstructionInstance> items;

    void absorb(const std::vector<stream::InstructionInstance>& instances, std::size_t new_capacity,
                std::mt19937_64& rng);
};

struct TrainedState {
    RunConfig config;
    std::shared_ptr<const SurrogateEncoder> encoder;
    // Frozen base for ours, fine-tuned copy for the baselines.
    model::ToyModel model;
    std::vector<pool::LowRankPool> pools;
    // traces[p][t]: trace of completed task t in pool p.
    std::vector<std::vector<pool::TaskTrace>> traces;
    pool::ContextWeights context;
    RehearsalBuffer buffer;
    std::vector<std::string> task_names;  // completed, in training order
    std::size_t trainable_count = 0;      // registry size during the last task
};

struct StepRecord {
    std::size_t task = 0;  // 1-based position in the run
    std::string task_name;
    std::size_t epoch = 0;
    std::size_t step = 0;  // within the task
    double l_align = 0.0;
    double l_ar = 0.0;
    double lr = 0.0;
    std::vector<std::size_t> selected_indices;  // union over the batch, pool 0
    double key_query_cos = 0.0;                 // mean over selected pairs
};

using StepSink = std::function<void(const StepRecord&)>;

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// Fresh state over a frozen base. Pools are allocated only for ours.
TrainedState init_state(const model::ToyModel& base, const RunConfig& config);

// Trains one more task in place (ours, sequential or rehearsal).
void train_task(TrainedState& state, const stream::StreamTask& task, const StepSink& sink = {});

// Joint training over the union of all tasks.
void train_joint(TrainedState& state, const std::vector<stream::StreamTask>& tasks,
                 const StepSink& sink = {});

// Whole stream, in the given order.
TrainedState train_continual(const std::vector<stream::StreamTask>& tasks,
                             const model::ToyModel& base, const RunConfig& config,
                             const StepSink& sink = {});
TrainedState run_baseline(const std::vector<stream::StreamTask>& tasks,
                          const model::ToyModel& base, const RunConfig& config,
                          const StepSink& sink = {});

// Surrogate query for one instance under the configured similarity source.
std::vector<double> surrogate_query(const TrainedState& state,
                                    const stream::InstructionInstance& instance);
// Pool indices chosen for an instance, per pool.
std::vector<std::vector<std::size_t>> select_for(const TrainedState& state,
                                                 const stream::InstructionInstance& instance);

// Task-identity-free inference.
std::string infer(const TrainedState& state, const stream::InstructionInstance& instance);

double evaluate(const TrainedState& state, const std::vector<stream::InstructionInstance>& eval);

// Row k of the accuracy matrix from the state after task k.
std::vector<double> accuracy_row(const TrainedState& state,
                                 const std::vector<stream::StreamTask>& ordered, std::size_t k);

// a[k][j] from one state per completed task.
metrics::AccuracyMatrix accuracy_matrix(const std::vector<stream::StreamTask>& ordered,
                                        const std::vector<const TrainedState*>& checkpoints);

// Tasks rearranged per config.task_order.
std::vector<stream::StreamTask> ordered_tasks(const std::vector<stream::StreamTask>& tasks,
                                              const std::vector<int>& order);

std::string to_string(Method m);
Method method_from_string(const std::string& s);
std::string to_string(SimilaritySource s);
SimilaritySource similarity_source_from_string(const std::string& s);
std::string to_string(PoolSharing p);
PoolSharing pool_sharing_from_string(const std::string& s);

}  // namespace dualinc::engine
