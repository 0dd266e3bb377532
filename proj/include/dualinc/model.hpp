#pragma once

// Tiny causal attention model with a one-slot feature prefix. Every layer's
// attention projections can be re-parameterized as W0 + dtheta + ddelta.

#include "dualinc/autodiff.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace dualinc::model {

using ad::Tensor;

// Fixed symbol vocabulary shared by the data generator and the model.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kSep = 3;

    static const Vocabulary& standard();

    explicit Vocabulary(std::vector<std::string> symbols);

    std::size_t size() const noexcept { return symbols_.size(); }
    bool contains(std::string_view word) const;
    int id(std::string_view word) const;
    const std::string& symbol(int id) const;
    std::vector<int> encode(std::string_view text) const;
    std::string decode(std::span<const int> ids) const;

private:
    std::vector<std::string> symbols_;
    std::unordered_map<std::string, int> index_;
};

struct ToyModelConfig {
    std::size_t vocab_size = 64;
    std::size_t dim = 64;
    std::size_t layers = 1;
    std::size_t heads = 2;
    std::size_t max_seq_len = 48;
    std::size_t feature_dim = 8;

    void validate() const;
    bool operator==(const ToyModelConfig&) const = default;
};

struct LayerWeights {
    Tensor wq, wk, wv, wo;  // D x D
    Tensor w1, b1;          // D x 4D, 1 x 4D
    Tensor w2, b2;          // 4D x D, 1 x D
};

struct ToyModel {
    ToyModelConfig config;
    std::uint64_t seed = 0;
    Tensor tok_emb;    // V x D
    Tensor pos_emb;    // max_seq_len x D
    Tensor feat_proj;  // F x D
    Tensor feat_bias;  // 1 x D
    Tensor head;       // D x V
    std::vector<LayerWeights> layers;

    static ToyModel init(const ToyModelConfig& config, std::uint64_t seed);

    // Stable (name, tensor) listing used for registries and checkpoints.
    std::vector<std::pair<std::string, Tensor>> named_weights() const;
    std::size_t parameter_count() const;
    // Independent copy with its own storage.
    ToyModel clone() const;
};

enum class AdaptPosition { query, key, value, output, all };

struct LayerDelta {
    Tensor delta_theta;  // D x D, undefined means zero
    Tensor delta_delta;  // D x D, undefined means zero
};

struct AdaptedForwardSpec {
    AdaptPosition position = AdaptPosition::output;
    // Empty: no adaptation. One entry: shared by all layers. Otherwise one per
    // layer.
    std::vector<LayerDelta> deltas;
};

// Tokenized (features, prompt, response) triple ready for the model.
struct EncodedInstance {
    std::vector<double> features;   // empty when absent
    std::vector<int> prompt;        // <bos> instruction <sep>
    std::vector<int> response;      // response tokens followed by <eos>
};

EncodedInstance encode_instance(const Vocabulary& vocab, std::span<const double> features,
                                std::string_view instruction, std::string_view response);

Tensor forward(const ToyModel& model, std::span<const double> features,
               std::span<const int> tokens, const AdaptedForwardSpec& spec = {});

// Cross-entropy over response positions (including the closing <eos>).
Tensor ar_loss(const ToyModel& model, const EncodedInstance& instance,
               const AdaptedForwardSpec& spec = {});

// Next-token loss over every position after <bos>; used for pretraining.
Tensor lm_loss(const ToyModel& model, const EncodedInstance& instance);

// Greedy decoding; the returned tokens exclude the terminating <eos>.
std::vector<int> generate(const ToyModel& model, std::span<const double> features,
                          std::span<const int> prompt, const AdaptedForwardSpec& spec,
                          std::size_t max_new);

// Same output as generate. One forward over prompt + hint accepts the longest
// hint prefix greedy decoding would reproduce; decoding resumes from there.
std::vector<int> generate_hinted(const ToyModel& model, std::span<const double> features,
                                 std::span<const int> prompt, const AdaptedForwardSpec& spec,
                                 std::size_t max_new, std::span<const int> hint);

struct PretrainOptions {
    std::size_t steps = 2000;
    std::size_t batch_size = 16;
    double lr = 3e-3;
    double warmup_ratio = 0.03;
};

// Trains every weight with Adam on next-token loss, then returns the model.
ToyModel pretrain_base(const ToyModelConfig& config, std::span<const EncodedInstance> corpus,
                       const PretrainOptions& options, std::uint64_t seed);

double mean_lm_loss(const ToyModel& model, std::span<const EncodedInstance> corpus);

std::string to_string(AdaptPosition p);
AdaptPosition adapt_position_from_string(const std::string& s);

}  // namespace dualinc::model
