#include "dualinc/model.hpp"

#include "dualinc/encoder.hpp"
#include "dualinc/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace dualinc::model {

// ---------------------------------------------------------------------------
// Vocabulary

namespace {
std::vector<std::string> standard_symbols() {
    std::vector<std::string> s = {"<pad>", "<bos>", "<eos>", "<sep>"};
    for (int d = 0; d <= 9; ++d) s.push_back(std::to_string(d));
    const char* words[] = {
        ":",
        // shared filler
        "the",
        // modular_add
        "add", "numbers", "modulo", "sum", "mod", "total",
        // reverse
        "reverse", "sequence", "backwards", "order", "flip",
        // sort_tokens
        "sort", "ascending", "smallest", "first", "rank",
        // parity
        "parity", "of", "odd", "or", "even", "bit",
        // copy_masked
        "copy", "except", "mask", "echo", "without", "dropping",
        // feature_classify
        "classify", "image", "what", "is", "shown", "label", "picture",
        // generic corpus words
        "task", "input", "output", "do", "this", "please", "now", "then", "and", "answer",
    };
    for (const char* w : words) s.emplace_back(w);
    return s;
}
}  // namespace

const Vocabulary& Vocabulary::standard() {
    static const Vocabulary v(standard_symbols());
    return v;
}

Vocabulary::Vocabulary(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
        if (!index_.emplace(symbols_[i], static_cast<int>(i)).second) {
            throw ConfigError("vocabulary: duplicate symbol '" + symbols_[i] + "'");
        }
    }
}

bool Vocabulary::contains(std::string_view word) const {
    return index_.find(std::string(word)) != index_.end();
}

int Vocabulary::id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) throw DataError("vocabulary: unknown symbol '" + std::string(word) + "'");
    return it->second;
}

const std::string& Vocabulary::symbol(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= symbols_.size()) {
        throw IndexError("vocabulary: id " + std::to_string(id) + " out of range");
    }
    return symbols_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
    std::vector<int> out;
    for (const auto& w : tokenize_words(text)) out.push_back(id(w));
    return out;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
    std::string out;
    for (int i : ids) {
        if (!out.empty()) out.push_back(' ');
        out += symbol(i);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Config and init

void ToyModelConfig::validate() const {
    if (vocab_size == 0 || dim == 0 || layers == 0 || heads == 0 || max_seq_len == 0) {
        throw ConfigError("model: vocab_size, dim, layers, heads, max_seq_len must be positive");
    }
    if (dim % heads != 0) {
        throw ConfigError("model: dim " + std::to_string(dim) + " not divisible by heads " +
                          std::to_string(heads));
    }
    if (vocab_size < Vocabulary::standard().size()) {
        throw ConfigError("model: vocab_size " + std::to_string(vocab_size) +
                          " smaller than the symbol vocabulary (" +
                          std::to_string(Vocabulary::standard().size()) + ")");
    }
}

namespace {
Tensor normal_tensor(std::mt19937_64& rng, ad::Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(shape.size());
    for (double& x : v) x = dist(rng);
    return Tensor::from(shape, std::move(v));
}
}  // namespace

ToyModel ToyModel::init(const ToyModelConfig& config, std::uint64_t seed) {
    config.validate();
    ToyModel m;
    m.config = config;
    m.seed = seed;
    std::mt19937_64 rng(seed);
    const std::size_t d = config.dim, v = config.vocab_size, f = config.feature_dim;
    const double proj = 1.0 / std::sqrt(static_cast<double>(d));
    m.tok_emb = normal_tensor(rng, {v, d}, 0.3);
    m.pos_emb = normal_tensor(rng, {config.max_seq_len, d}, 0.3);
    m.feat_proj = normal_tensor(rng, {f, d}, f > 0 ? 1.0 / std::sqrt(static_cast<double>(f)) : 1.0);
    m.feat_bias = Tensor::zeros({1, d});
    for (std::size_t l = 0; l < config.layers; ++l) {
        LayerWeights lw;
        lw.wq = normal_tensor(rng, {d, d}, proj);
        lw.wk = normal_tensor(rng, {d, d}, proj);
        lw.wv = normal_tensor(rng, {d, d}, proj);
        lw.wo = normal_tensor(rng, {d, d}, proj);
        lw.w1 = normal_tensor(rng, {d, 4 * d}, proj);
        lw.b1 = Tensor::zeros({1, 4 * d});
        lw.w2 = normal_tensor(rng, {4 * d, d}, 0.5 * proj);
        lw.b2 = Tensor::zeros({1, d});
        m.layers.push_back(std::move(lw));
    }
    m.head = normal_tensor(rng, {d, v}, proj);
    return m;
}

std::vector<std::pair<std::string, Tensor>> ToyModel::named_weights() const {
    std::vector<std::pair<std::string, Tensor>> out = {
        {"tok_emb", tok_emb}, {"pos_emb", pos_emb}, {"feat_proj", feat_proj}, {"feat_bias", feat_bias}};
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        const auto& lw = layers[l];
        out.emplace_back(p + "wq", lw.wq);
        out.emplace_back(p + "wk", lw.wk);
        out.emplace_back(p + "wv", lw.wv);
        out.emplace_back(p + "wo", lw.wo);
        out.emplace_back(p + "w1", lw.w1);
        out.emplace_back(p + "b1", lw.b1);
        out.emplace_back(p + "w2", lw.w2);
        out.emplace_back(p + "b2", lw.b2);
    }
    out.emplace_back("head", head);
    return out;
}

std::size_t ToyModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_weights()) n += t.size();
    return n;
}

ToyModel ToyModel::clone() const {
    ToyModel m;
    m.config = config;
    m.seed = seed;
    m.tok_emb = tok_emb.clone();
    m.pos_emb = pos_emb.clone();
    m.feat_proj = feat_proj.clone();
    m.feat_bias = feat_bias.clone();
    m.head = head.clone();
    for (const auto& lw : layers) {
        m.layers.push_back({lw.wq.clone(), lw.wk.clone(), lw.wv.clone(), lw.wo.clone(),
                            lw.w1.clone(), lw.b1.clone(), lw.w2.clone(), lw.b2.clone()});
    }
    return m;
}

// ---------------------------------------------------------------------------
// Forward

EncodedInstance encode_instance(const Vocabulary& vocab, std::span<const double> features,
                                std::string_view instruction, std::string_view response) {
    EncodedInstance e;
    e.features.assign(features.begin(), features.end());
    e.prompt.push_back(Vocabulary::kBos);
    for (int t : vocab.encode(instruction)) e.prompt.push_back(t);
    e.prompt.push_back(Vocabulary::kSep);
    e.response = vocab.encode(response);
    e.response.push_back(Vocabulary::kEos);
    return e;
}

namespace {

Tensor adapted(const Tensor& base, const LayerDelta* delta) {
    if (!delta) return base;
    std::vector<Tensor> terms{base};
    if (delta->delta_theta.defined()) terms.push_back(delta->delta_theta);
    if (delta->delta_delta.defined()) terms.push_back(delta->delta_delta);
    if (terms.size() == 1) return base;
    return ad::add_n(terms);
}

const LayerDelta* delta_for(const AdaptedForwardSpec& spec, std::size_t layer, std::size_t layers) {
    if (spec.deltas.empty()) return nullptr;
    if (spec.deltas.size() == 1) return &spec.deltas.front();
    if (spec.deltas.size() != layers) {
        throw DimensionError("forward: " + std::to_string(spec.deltas.size()) +
                             " layer deltas for " + std::to_string(layers) + " layers");
    }
    return &spec.deltas[layer];
}

bool adapts(AdaptPosition configured, AdaptPosition slot) {
    return configured == AdaptPosition::all || configured == slot;
}

std::size_t prefix_rows(const ToyModel& model, std::span<const double> features) {
    if (features.empty()) return 0;
    if (model.config.feature_dim == 0 || features.size() != model.config.feature_dim) {
        throw DimensionError("forward: expected " + std::to_string(model.config.feature_dim) +
                             " features, got " + std::to_string(features.size()));
    }
    return 1;
}

}  // namespace

Tensor forward(const ToyModel& model, std::span<const double> features,
               std::span<const int> tokens, const AdaptedForwardSpec& spec) {
    const auto& cfg = model.config;
    const std::size_t offset = prefix_rows(model, features);
    const std::size_t n = tokens.size() + offset;
    if (tokens.empty()) throw LengthError("forward: empty token sequence");
    if (n > cfg.max_seq_len) {
        throw LengthError("forward: sequence of " + std::to_string(n) + " exceeds max_seq_len " +
                          std::to_string(cfg.max_seq_len));
    }
    for (int t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
            throw IndexError("forward: token " + std::to_string(t) + " outside vocabulary");
        }
    }
    Tensor h = ad::gather_rows(model.tok_emb, tokens);
    if (offset) {
        const Tensor f = Tensor::row(std::vector<double>(features.begin(), features.end()));
        h = ad::concat_rows(ad::add_row_bias(ad::matmul(f, model.feat_proj), model.feat_bias), h);
    }
    std::vector<int> positions(n);
    std::iota(positions.begin(), positions.end(), 0);
    h = ad::add(h, ad::gather_rows(model.pos_emb, positions));

    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const auto& lw = model.layers[l];
        const LayerDelta* delta = delta_for(spec, l, model.layers.size());
        auto proj = [&](const Tensor& w, AdaptPosition slot) {
            return adapted(w, adapts(spec.position, slot) ? delta : nullptr);
        };
        const Tensor x = ad::rms_norm(h);
        const Tensor q = ad::matmul(x, proj(lw.wq, AdaptPosition::query));
        const Tensor k = ad::matmul(x, proj(lw.wk, AdaptPosition::key));
        const Tensor v = ad::matmul(x, proj(lw.wv, AdaptPosition::value));
        const Tensor att = ad::causal_attention(q, k, v, cfg.heads);
        h = ad::add(h, ad::matmul(att, proj(lw.wo, AdaptPosition::output)));
        const Tensor x2 = ad::rms_norm(h);
        const Tensor mid = ad::gelu(ad::add_row_bias(ad::matmul(x2, lw.w1), lw.b1));
        h = ad::add(h, ad::add_row_bias(ad::matmul(mid, lw.w2), lw.b2));
    }
    return ad::matmul(ad::rms_norm(h), model.head);
}

Tensor ar_loss(const ToyModel& model, const EncodedInstance& instance,
               const AdaptedForwardSpec& spec) {
    if (instance.response.empty() ||
        (instance.response.size() == 1 && instance.response.front() == Vocabulary::kEos)) {
        throw DataError("ar_loss: empty response");
    }
    std::vector<int> tokens = instance.prompt;
    tokens.insert(tokens.end(), instance.response.begin(), instance.response.end());
    tokens.pop_back();
    const Tensor logits = forward(model, instance.features, tokens, spec);
    const std::size_t offset = logits.rows() - tokens.size();
    std::vector<int> targets(logits.rows(), ad::kIgnoreTarget);
    // Row (offset + i) predicts token i + 1; only response tokens are targets.
    for (std::size_t i = instance.prompt.size() - 1; i < tokens.size(); ++i) {
        targets[offset + i] = i + 1 < tokens.size() ? tokens[i + 1] : instance.response.back();
    }
    return ad::softmax_cross_entropy(logits, targets);
}

Tensor lm_loss(const ToyModel& model, const EncodedInstance& instance) {
    std::vector<int> tokens = instance.prompt;
    tokens.insert(tokens.end(), instance.response.begin(), instance.response.end());
    tokens.pop_back();
    const Tensor logits = forward(model, instance.features, tokens, {});
    const std::size_t offset = logits.rows() - tokens.size();
    std::vector<int> targets(logits.rows(), ad::kIgnoreTarget);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        targets[offset + i] = i + 1 < tokens.size() ? tokens[i + 1] : instance.response.back();
    }
    return ad::softmax_cross_entropy(logits, targets);
}

std::vector<int> generate(const ToyModel& model, std::span<const double> features,
                          std::span<const int> prompt, const AdaptedForwardSpec& spec,
                          std::size_t max_new) {
    return generate_hinted(model, features, prompt, spec, max_new, {});
}

std::vector<int> generate_hinted(const ToyModel& model, std::span<const double> features,
                                 std::span<const int> prompt, const AdaptedForwardSpec& spec,
                                 std::size_t max_new, std::span<const int> hint) {
    const std::size_t offset = prefix_rows(model, features);
    if (offset + prompt.size() + max_new > model.config.max_seq_len) {
        throw LengthError("generate: prompt of " + std::to_string(prompt.size()) +
                          " tokens plus " + std::to_string(max_new) +
                          " new tokens exceeds max_seq_len " +
                          std::to_string(model.config.max_seq_len));
    }
    std::vector<int> tokens(prompt.begin(), prompt.end());
    std::vector<int> out;
    if (!hint.empty() && max_new > 0) {
        const std::size_t n = std::min(hint.size(), max_new);
        // Last hint token is never fed: its own prediction is all we need.
        tokens.insert(tokens.end(), hint.begin(), hint.begin() + static_cast<std::ptrdiff_t>(n - 1));
        const Tensor logits = forward(model, features, tokens, spec);
        const auto data = logits.data();
        const std::size_t v = logits.cols();
        const std::size_t first = logits.rows() - tokens.size() + prompt.size() - 1;
        tokens.resize(prompt.size());
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = data.data() + (first + i) * v;
            const int next = static_cast<int>(std::max_element(row, row + v) - row);
            if (next == Vocabulary::kEos) return out;
            out.push_back(next);
            tokens.push_back(next);
            if (next != hint[i]) break;
        }
    }
    for (std::size_t step = out.size(); step < max_new; ++step) {
        const Tensor logits = forward(model, features, tokens, spec);
        const auto data = logits.data();
        const std::size_t v = logits.cols();
        const double* last = data.data() + (logits.rows() - 1) * v;
        const int next = static_cast<int>(std::max_element(last, last + v) - last);
        if (next == Vocabulary::kEos) break;
        out.push_back(next);
        tokens.push_back(next);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pretraining

double mean_lm_loss(const ToyModel& model, std::span<const EncodedInstance> corpus) {
    if (corpus.empty()) throw DataError("mean_lm_loss: empty corpus");
    double total = 0.0;
    for (const auto& inst : corpus) total += lm_loss(model, inst).item();
    return total / static_cast<double>(corpus.size());
}

ToyModel pretrain_base(const ToyModelConfig& config, std::span<const EncodedInstance> corpus,
                       const PretrainOptions& options, std::uint64_t seed) {
    if (corpus.empty()) throw DataError("pretrain_base: empty corpus");
    if (options.batch_size == 0) throw ConfigError("pretrain_base: batch_size must be positive");
    ToyModel model = ToyModel::init(config, seed);
    ad::ParamRegistry registry;
    for (auto& [name, t] : model.named_weights()) registry.add_trainable(name, t);
    ad::LrSchedule schedule{options.lr, options.warmup_ratio, std::max<std::size_t>(options.steps, 1)};
    schedule.validate();
    ad::Optimizer opt({ad::OptimizerKind::adam});
    std::mt19937_64 rng(seed ^ 0x5eedULL);
    std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
    registry.zero_grad();
    for (std::size_t step = 0; step < options.steps; ++step) {
        std::vector<Tensor> losses;
        losses.reserve(options.batch_size);
        for (std::size_t b = 0; b < options.batch_size; ++b) {
            losses.push_back(lm_loss(model, corpus[pick(rng)]));
        }
        const Tensor loss = ad::scale(ad::add_n(losses), 1.0 / static_cast<double>(losses.size()));
        ad::backward(loss);
        opt.step(registry, schedule.lr(step));
    }
    for (auto& e : registry.trainable()) {
        Tensor t = e.tensor;
        t.set_requires_grad(false);
        t.drop_grad();
    }
    return model;
}

std::string to_string(AdaptPosition p) {
    switch (p) {
        case AdaptPosition::query: return "query";
        case AdaptPosition::key: return "key";
        case AdaptPosition::value: return "value";
        case AdaptPosition::output: return "output";
        case AdaptPosition::all: return "all";
    }
    return "output";
}

AdaptPosition adapt_position_from_string(const std::string& s) {
    if (s == "query") return AdaptPosition::query;
    if (s == "key") return AdaptPosition::key;
    if (s == "value") return AdaptPosition::value;
    if (s == "output") return AdaptPosition::output;
    if (s == "all") return AdaptPosition::all;
    throw ConfigError("unknown adapt_position '" + s + "'");
}

}  // namespace dualinc::model
