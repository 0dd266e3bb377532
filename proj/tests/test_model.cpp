#include "support.hpp"

#include "dualinc/engine.hpp"
#include "dualinc/errors.hpp"
#include "dualinc/model.hpp"
#include "dualinc/stream.hpp"

#include <doctest.h>

using namespace dualinc;
using namespace dualinc::model;
using stream::Family;
using testing::Gen;

namespace {

const std::vector<stream::StreamTask>& tasks() {
    static const auto t = testing::small_stream({Family::reverse, Family::feature_classify}, 20, 5);
    return t;
}

EncodedInstance encoded(const stream::InstructionInstance& inst) {
    return encode_instance(Vocabulary::standard(), inst.features, inst.instruction, inst.response);
}

std::vector<int> joined(const EncodedInstance& e) {
    std::vector<int> t = e.prompt;
    t.insert(t.end(), e.response.begin(), e.response.end() - 1);
    return t;
}

AdaptedForwardSpec spec_with(AdaptPosition pos, Tensor theta, Tensor delta = {}) {
    AdaptedForwardSpec s;
    s.position = pos;
    s.deltas.push_back({std::move(theta), std::move(delta)});
    return s;
}

const std::vector<AdaptPosition> kPositions = {AdaptPosition::query, AdaptPosition::key,
                                               AdaptPosition::value, AdaptPosition::output,
                                               AdaptPosition::all};

double log_softmax_at(std::span<const double> row, int target) {
    double mx = row[0];
    for (double x : row) mx = std::max(mx, x);
    double s = 0.0;
    for (double x : row) s += std::exp(x - mx);
    return row[static_cast<std::size_t>(target)] - mx - std::log(s);
}

}  // namespace

TEST_CASE("encode_instance framing") {
    const auto& v = Vocabulary::standard();
    const auto e = encode_instance(v, {}, "reverse the sequence", "3 2 1");
    CHECK(e.prompt.front() == Vocabulary::kBos);
    CHECK(e.prompt.back() == Vocabulary::kSep);
    CHECK(e.prompt.size() == 5);
    CHECK(e.response.size() == 4);
    CHECK(e.response.back() == Vocabulary::kEos);
    CHECK(v.decode(std::span(e.response).first(3)) == "3 2 1");
    CHECK_THROWS_AS(v.encode("reverse qqqq"), DataError);
    CHECK(v.size() <= ToyModelConfig{}.vocab_size);
}

TEST_CASE("zero increments reproduce the base bitwise") {
    const auto m = ToyModel::init(testing::small_model_config(), 1);
    const std::size_t d = m.config.dim;
    for (const auto& task : tasks()) {
        const auto e = encoded(task.train[0]);
        const auto toks = joined(e);
        const Tensor base = forward(m, e.features, toks);
        for (auto pos : kPositions) {
            const Tensor z = forward(m, e.features, toks, spec_with(pos, Tensor::zeros({d, d}), Tensor::zeros({d, d})));
            CHECK(testing::bitwise_equal(z, base));
        }
    }
}

TEST_CASE("increments are additive") {
    Gen g(3);
    const auto m = ToyModel::init(testing::small_model_config(), 2);
    const std::size_t d = m.config.dim;
    for (int trial = 0; trial < 20; ++trial) {
        const auto e = encoded(tasks()[trial % 2].train[trial]);
        const auto toks = joined(e);
        const Tensor a = g.tensor(d, d, false, -0.1, 0.1), b = g.tensor(d, d, false, -0.1, 0.1);
        const auto pos = kPositions[trial % kPositions.size()];
        const Tensor split = forward(m, e.features, toks, spec_with(pos, a, b));
        const Tensor merged = forward(m, e.features, toks, spec_with(pos, ad::add(a, b)));
        CHECK(testing::rel_err(split.data(), merged.data()) < 1e-12);
        const Tensor base = forward(m, e.features, toks);
        CHECK_FALSE(testing::bitwise_equal(split, base));
    }
}

TEST_CASE("forward is causal") {
    Gen g(4);
    const auto m = ToyModel::init(testing::small_model_config(), 3);
    const std::size_t d = m.config.dim;
    const auto spec = spec_with(AdaptPosition::all, g.tensor(d, d, false, -0.1, 0.1));
    for (int trial = 0; trial < 20; ++trial) {
        const auto e = encoded(tasks()[trial % 2].train[trial]);
        auto toks = joined(e);
        const Tensor before = forward(m, e.features, toks, spec);
        const std::size_t j = g.index(toks.size());
        toks[j] = static_cast<int>(4 + g.index(40));
        const Tensor after = forward(m, e.features, toks, spec);
        const std::size_t offset = before.rows() - toks.size();
        const std::size_t v = before.cols();
        for (std::size_t r = 0; r < offset + j; ++r) {
            for (std::size_t c = 0; c < v; ++c) CHECK(before.data()[r * v + c] == after.data()[r * v + c]);
        }
    }
}

TEST_CASE("ar_loss scores only response positions") {
    const auto m = ToyModel::init(testing::small_model_config(), 4);
    for (const auto& task : tasks()) {
        for (int i = 0; i < 5; ++i) {
            const auto e = encoded(task.train[i]);
            const auto toks = joined(e);
            const Tensor logits = forward(m, e.features, toks);
            const std::size_t offset = logits.rows() - toks.size(), v = logits.cols();
            double total = 0.0;
            for (std::size_t r = 0; r < e.response.size(); ++r) {
                const std::size_t row = offset + e.prompt.size() - 1 + r;
                total -= log_softmax_at(logits.data().subspan(row * v, v), e.response[r]);
            }
            CHECK(ar_loss(m, e).item() == doctest::Approx(total / double(e.response.size())).epsilon(1e-12));
        }
    }
}

TEST_CASE("ar_loss: uniform logits and errors") {
    auto m = ToyModel::init(testing::small_model_config(), 5);
    for (double& x : m.head.mutable_data()) x = 0.0;
    const auto e = encode_instance(Vocabulary::standard(), {}, "reverse the sequence", "7");
    CHECK(ar_loss(m, e).item() == doctest::Approx(std::log(double(m.config.vocab_size))).epsilon(1e-12));

    EncodedInstance empty = e;
    empty.response = {Vocabulary::kEos};
    CHECK_THROWS_AS(ar_loss(m, empty), DataError);
    empty.response.clear();
    CHECK_THROWS_AS(ar_loss(m, empty), DataError);

    const std::vector<int> long_seq(m.config.max_seq_len + 1, 4);
    CHECK_THROWS_AS(forward(m, {}, long_seq), LengthError);
    CHECK_THROWS_AS(generate(m, {}, long_seq, {}, 3), LengthError);
    const std::vector<int> bad = {1, 9999};
    CHECK_THROWS_AS(forward(m, {}, bad), IndexError);
}

TEST_CASE("finite differences through the adapted forward") {
    Gen g(6);
    auto cfg = testing::small_model_config();
    cfg.dim = 8;
    const auto m = ToyModel::init(cfg, 6);
    for (int trial = 0; trial < 10; ++trial) {
        const auto e = encoded(tasks()[trial % 2].train[trial]);
        const auto pos = kPositions[trial % kPositions.size()];
        const Tensor fixed = g.tensor(8, 8, false, -0.05, 0.05);
        const double err = testing::grad_check(
            [&](const Tensor& theta) { return ar_loss(m, e, spec_with(pos, theta, fixed)); },
            g.tensor(8, 8, false, -0.05, 0.05));
        CHECK(err < 1e-6);

        const Tensor w = g.tensor(e.prompt.size() + e.response.size() - 1 + (e.features.empty() ? 0 : 1),
                                  cfg.vocab_size);
        const double err_logits = testing::grad_check(
            [&](const Tensor& theta) {
                return ad::sum(ad::mul(forward(m, e.features, joined(e), spec_with(pos, theta)), w));
            },
            g.tensor(8, 8, false, -0.05, 0.05));
        CHECK(err_logits < 1e-6);
    }
}

TEST_CASE("generate: boundaries and hinted decoding") {
    Gen g(7);
    const auto m = ToyModel::init(testing::small_model_config(), 7);
    const auto e = encoded(tasks()[0].train[0]);
    CHECK(generate(m, e.features, e.prompt, {}, 0).empty());

    for (int trial = 0; trial < 60; ++trial) {
        const auto inst = encoded(tasks()[trial % 2].train[trial % 20]);
        const std::size_t max_new = g.between(0, 8);
        const auto plain = generate(m, inst.features, inst.prompt, {}, max_new);
        std::vector<std::vector<int>> hints = {inst.response, {}, plain};
        std::vector<int> noisy = plain;
        noisy.push_back(Vocabulary::kEos);
        if (!noisy.empty()) noisy[g.index(noisy.size())] = static_cast<int>(4 + g.index(40));
        hints.push_back(noisy);
        std::vector<int> junk(g.between(1, 20));
        for (int& t : junk) t = static_cast<int>(g.index(m.config.vocab_size));
        hints.push_back(junk);
        for (const auto& h : hints) CHECK(generate_hinted(m, inst.features, inst.prompt, {}, max_new, h) == plain);
    }
}

TEST_CASE("a single pair can be memorized") {
    auto m = ToyModel::init(testing::small_model_config(), 8);
    const auto e = encoded(tasks()[0].train[3]);
    ad::ParamRegistry reg;
    for (auto& [name, t] : m.named_weights()) {
        // No features on this instance, so the feature projection sees no gradient.
        if (name.rfind("feat", 0) == 0) continue;
        t.set_requires_grad(true);
        reg.add_trainable(name, t);
    }
    ad::Optimizer opt({ad::OptimizerKind::adam});
    for (int step = 0; step < 150; ++step) {
        ad::backward(ar_loss(m, e));
        opt.step(reg, 1e-2);
    }
    auto want = e.response;
    want.pop_back();
    CHECK(generate(m, e.features, e.prompt, {}, 12) == want);
}

TEST_CASE("pretraining lowers the loss and is deterministic") {
    const auto corpus_raw = stream::generate_pretraining_corpus(400, 1);
    std::vector<EncodedInstance> corpus;
    for (const auto& i : corpus_raw) corpus.push_back(encoded(i));
    const auto cfg = testing::small_model_config();
    const std::span<const EncodedInstance> held(corpus.data() + 300, 100);
    const std::span<const EncodedInstance> train(corpus.data(), 300);

    const double before = mean_lm_loss(ToyModel::init(cfg, 9), held);
    const auto m = pretrain_base(cfg, train, {300, 16, 3e-3, 0.03}, 9);
    const double after = mean_lm_loss(m, held);
    MESSAGE("held-out loss " << before << " -> " << after);
    CHECK(after < before);
    CHECK(after < std::log(double(cfg.vocab_size)));
    for (const auto& [name, t] : m.named_weights()) CHECK_FALSE(t.requires_grad());

    const auto a = pretrain_base(cfg, train, {15, 4, 3e-3, 0.03}, 10);
    const auto b = pretrain_base(cfg, train, {15, 4, 3e-3, 0.03}, 10);
    const auto wa = a.named_weights(), wb = b.named_weights();
    for (std::size_t i = 0; i < wa.size(); ++i) CHECK(testing::bitwise_equal(wa[i].second, wb[i].second));

    CHECK_THROWS_AS(pretrain_base(cfg, std::span<const EncodedInstance>{}, {}, 1), DataError);
}

TEST_CASE("clone owns its storage") {
    const auto m = ToyModel::init(testing::small_model_config(), 11);
    auto c = m.clone();
    c.head.mutable_data()[0] += 1.0;
    CHECK(m.head.data()[0] != c.head.data()[0]);
    CHECK(m.parameter_count() == c.parameter_count());
}

TEST_CASE("untrained models almost never answer correctly") {
    // Responses are several tokens from a 64-way vocabulary; exact match by
    // chance is far below 10%.
    const auto t = testing::small_stream({Family::reverse, Family::sort_tokens}, 10, 100, 5);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto base = ToyModel::init(testing::small_model_config(), seed);
        const auto state = engine::init_state(base, testing::fast_config(engine::Method::sequential));
        for (const auto& task : t) CHECK(engine::evaluate(state, task.eval) <= 0.10);
    }
}

TEST_CASE("adapt position names round trip") {
    for (auto p : kPositions) CHECK(adapt_position_from_string(to_string(p)) == p);
    CHECK_THROWS_AS(adapt_position_from_string("ffn"), ConfigError);
}
