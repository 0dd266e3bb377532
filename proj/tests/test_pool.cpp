#include "support.hpp"

#include "dualinc/errors.hpp"
#include "dualinc/log.hpp"
#include "dualinc/pool.hpp"

#include <doctest.h>

#include <numeric>

using namespace dualinc;
using namespace dualinc::pool;
using testing::Gen;

namespace {

// Dense pool with explicit keys and increments.
LowRankPool dense_pool(const std::vector<std::vector<double>>& keys,
                       const std::vector<std::vector<double>>& increments, std::size_t d) {
    PoolDims dims{keys.size(), d, 1, keys.front().size()};
    std::vector<ProxyIncrementPair> pairs;
    for (std::size_t n = 0; n < keys.size(); ++n) {
        ProxyIncrementPair p;
        p.key = Tensor::row(keys[n]);
        p.full = n < increments.size() ? Tensor::from({d, d}, increments[n]) : Tensor::zeros({d, d});
        pairs.push_back(std::move(p));
    }
    return LowRankPool::from_parts(dims, 0, false, std::move(pairs));
}

// Low-rank pool with random nonzero factors.
LowRankPool random_pool(Gen& g, const PoolDims& dims) {
    auto pool = LowRankPool::init(dims, g.engine()());
    for (std::size_t n = 0; n < pool.size(); ++n) {
        for (double& x : pool.pair(n).factor_a.mutable_data()) x = g.normal(0.5);
        for (double& x : pool.pair(n).factor_b.mutable_data()) x = g.normal(0.5);
    }
    return pool;
}

double cos_of(std::span<const double> a, std::span<const double> b) {
    double d = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return d / std::sqrt(na * nb);
}

void check_matrix(const Tensor& t, const std::vector<double>& expected, double tol = 1e-12) {
    REQUIRE(t.size() == expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) {
        if (tol == 0) CHECK(t.data()[i] == expected[i]);
        else CHECK(t.data()[i] == doctest::Approx(expected[i]).epsilon(tol));
    }
}

// Weighted contraction so every entry of a matrix-valued output reaches the loss.
Tensor contract(const Tensor& m, const Tensor& weights) { return ad::sum(ad::mul(m, weights)); }

}  // namespace

TEST_CASE("init: zero increments, unit keys, seeded") {
    const PoolDims dims{6, 8, 3, 5};
    const auto a = LowRankPool::init(dims, 42);
    const auto b = LowRankPool::init(dims, 42);
    const auto c = LowRankPool::init(dims, 43);
    for (std::size_t n = 0; n < a.size(); ++n) {
        CHECK(testing::all_zero(a.increment_value(n).data()));
        CHECK(testing::all_zero(a.pair(n).factor_a.data()));
        double s = 0.0;
        for (double x : a.pair(n).key.data()) s += x * x;
        CHECK(std::abs(s - 1.0) < 1e-12);
        CHECK(testing::bitwise_equal(a.pair(n).key, b.pair(n).key));
        CHECK(testing::bitwise_equal(a.pair(n).factor_b, b.pair(n).factor_b));
    }
    CHECK_FALSE(testing::bitwise_equal(a.pair(0).key, c.pair(0).key));
    CHECK_THROWS_AS(LowRankPool::init({4, 2, 3, 4}, 1), ConfigError);
    CHECK_THROWS_AS(LowRankPool::init({0, 2, 1, 4}, 1), ConfigError);
}

TEST_CASE("parameter count matches registered tensors") {
    for (bool low_rank : {true, false}) {
        const PoolDims dims{5, 6, 2, 7};
        const auto pool = LowRankPool::init(dims, 1, low_rank);
        ad::ParamRegistry reg;
        pool.register_keys(reg, "p");
        pool.register_increments(reg, "p");
        std::size_t total = 0;
        for (const auto& e : reg.trainable()) total += e.tensor.size();
        CHECK(total == pool.parameter_count());
        CHECK(pool.parameter_count() == (low_rank ? 5 * (2 * 6 * 2 + 7) : 5 * (36 + 7)));
    }
}

TEST_CASE("select_top_m: hand example") {
    const auto pool = dense_pool({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}, {}, 2);
    const double s5 = std::sqrt(5.0);
    const std::vector<double> q = {2 / s5, 1 / s5, 0};
    CHECK(select_top_m(q, pool, 2) == std::vector<std::size_t>{0, 1});
    const auto sims = similarities(q, pool);
    CHECK(sims[0] == doctest::Approx(0.894427).epsilon(1e-6));
    CHECK(sims[1] == doctest::Approx(0.447214).epsilon(1e-6));
    CHECK(sims[2] == 0.0);

    auto all = select_top_m(q, pool, 3);
    std::sort(all.begin(), all.end());
    CHECK(all == std::vector<std::size_t>{0, 1, 2});
    CHECK_THROWS_AS(select_top_m(q, pool, 4), ConfigError);
    const std::vector<double> zero = {0, 0, 0};
    CHECK_THROWS_AS(select_top_m(zero, pool, 1), DegenerateInputError);
    const std::vector<double> wrong = {1, 0};
    CHECK_THROWS_AS(select_top_m(wrong, pool, 1), DimensionError);
}

TEST_CASE("select_top_m agrees with brute force, ties to the lower index") {
    Gen g(11);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = g.between(1, 12), e = g.between(2, 6);
        std::vector<std::vector<double>> keys;
        for (std::size_t i = 0; i < n; ++i) {
            // Every third key may duplicate an earlier one to force ties.
            if (i > 0 && g.index(3) == 0) keys.push_back(keys[g.index(i)]);
            else keys.push_back(g.unit(e));
        }
        const auto pool = dense_pool(keys, {}, 1);
        const auto q = g.unit(e);
        const std::size_t m = g.between(1, n);

        std::vector<double> cos(n);
        for (std::size_t i = 0; i < n; ++i) cos[i] = cos_of(q, keys[i]);
        const auto sims = similarities(q, pool);
        std::vector<std::size_t> expect(n);
        std::iota(expect.begin(), expect.end(), std::size_t{0});
        std::stable_sort(expect.begin(), expect.end(),
                         [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
        expect.resize(m);
        const auto got = select_top_m(q, pool, m);
        CHECK(got == expect);
        for (std::size_t i = 0; i < n; ++i) CHECK(sims[i] == doctest::Approx(cos[i]).epsilon(1e-12));

        std::vector<double> scaled = q;
        for (double& x : scaled) x *= 4.0;
        CHECK(select_top_m(scaled, pool, m) == got);
    }
}

TEST_CASE("intrinsic_increment: hand examples") {
    // Keys chosen so that cos(q, k1) = 0.8, cos(q, k2) = 0.2.
    const std::vector<double> q = {1, 0};
    const auto pool = dense_pool({{0.8, 0.6}, {0.2, std::sqrt(1 - 0.04)}}, {{1, 0, 0, 1}, {0, 1, 1, 0}}, 2);
    const std::vector<std::size_t> idx = {0, 1};
    const Tensor qt = Tensor::row(q);
    check_matrix(intrinsic_increment(qt, pool, idx), {0.8, 0.2, 0.2, 0.8});

    const double w1 = std::exp(0.8) / (std::exp(0.8) + std::exp(0.2));
    check_matrix(intrinsic_increment(qt, pool, idx, {IntrinsicWeighting::softmax, false}),
                 {w1, 1 - w1, 1 - w1, w1});

    const std::vector<std::size_t> one = {1};
    const Tensor single = intrinsic_increment(qt, pool, one);
    check_matrix(single, {0, 1, 1, 0}, 0);

    CHECK_THROWS_AS(intrinsic_increment(qt, pool, std::vector<std::size_t>{}), ContractError);
}

TEST_CASE("intrinsic_increment: equal cosines give the plain mean") {
    Gen g(5);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t d = 3, m = g.between(1, 4);
        const auto q = g.unit(4);
        std::vector<std::vector<double>> keys(m, q), incs;
        for (std::size_t i = 0; i < m; ++i) incs.push_back(g.vec(d * d));
        const auto pool = dense_pool(keys, incs, d);
        std::vector<std::size_t> idx(m);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::vector<double> mean(d * d, 0.0);
        for (const auto& p : incs)
            for (std::size_t i = 0; i < d * d; ++i) mean[i] += p[i] / double(m);
        const Tensor got = intrinsic_increment(Tensor::row(q), pool, idx);
        for (std::size_t i = 0; i < d * d; ++i) CHECK(got.data()[i] == doctest::Approx(mean[i]).epsilon(1e-12));
    }
}

TEST_CASE("intrinsic_increment: positive cosines stay in the convex hull") {
    Gen g(6);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = 2, m = g.between(1, 5), e = 3;
        std::vector<std::vector<double>> keys, incs;
        for (std::size_t i = 0; i < m; ++i) {
            keys.push_back(g.vec(e, 0.05, 1.0));
            incs.push_back(g.vec(d * d, -3, 3));
        }
        const auto pool = dense_pool(keys, incs, d);
        std::vector<std::size_t> idx(m);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        const Tensor got = intrinsic_increment(Tensor::row(g.vec(e, 0.05, 1.0)), pool, idx);
        for (std::size_t i = 0; i < d * d; ++i) {
            double lo = incs[0][i], hi = incs[0][i];
            for (const auto& p : incs) {
                lo = std::min(lo, p[i]);
                hi = std::max(hi, p[i]);
            }
            CHECK(got.data()[i] >= lo - 1e-12);
            CHECK(got.data()[i] <= hi + 1e-12);
        }
    }
}

TEST_CASE("intrinsic_increment: cancelling cosines are degenerate") {
    const double r = 1 / std::sqrt(2.0);
    const auto pool = dense_pool({{r, r}, {-r, r}}, {}, 2);
    const std::vector<std::size_t> idx = {0, 1};
    CHECK_THROWS_AS(intrinsic_increment(Tensor::row({1, 0}), pool, idx), DegenerateSelectionError);
    try {
        intrinsic_increment(Tensor::row({1, 0}), pool, idx);
    } catch (const DegenerateSelectionError& e) {
        CHECK(std::string(e.what()).find("0.707") != std::string::npos);
    }
}

TEST_CASE("trace: running average, freeze contract") {
    auto pool = dense_pool({{1, 0}, {0, 1}}, {{2, 0, 0, 2}, {-2, 0, 0, -2}}, 2);
    auto t = TaskTrace::begin(1, 2);
    const std::vector<std::size_t> zero = {0}, both = {0, 1};
    update_trace(t, zero, pool);
    check_matrix(t.running_avg, {2, 0, 0, 2}, 0);
    update_trace(t, both, pool);
    CHECK(testing::all_zero(t.running_avg.data()));
    CHECK(t.selections.at(0) == 2);
    CHECK(t.selected_indices() == std::vector<std::size_t>{0, 1});

    auto f = TaskTrace::begin(2, 2, TraceWeighting::frequency);
    update_trace(f, zero, pool);
    update_trace(f, both, pool);
    // Frequency weighting: (2 P0 + P1) / 3.
    check_matrix(f.running_avg, {2.0 / 3, 0, 0, 2.0 / 3});

    auto s = TaskTrace::begin(3, 2);
    update_trace(s, zero, pool);
    freeze_trace(s, pool);
    const Tensor before = s.snapshot_avg.clone();
    pool.pair(0).full.mutable_data()[0] = 100.0;
    CHECK(testing::bitwise_equal(s.snapshot_avg, before));
    CHECK(testing::bitwise_equal(s.average(), before));
    CHECK_THROWS_AS(update_trace(s, zero, pool), ContractError);
    CHECK_THROWS_AS(freeze_trace(s, pool), ContractError);
}

TEST_CASE("trace: freezing an empty trace warns and snapshots zero") {
    const auto pool = dense_pool({{1, 0}}, {{1, 2, 3, 4}}, 2);
    std::vector<std::string> warnings;
    auto previous = set_warning_sink([&](const std::string& m) { warnings.push_back(m); });
    auto t = TaskTrace::begin(4, 2);
    freeze_trace(t, pool);
    set_warning_sink(previous);
    CHECK(t.frozen);
    CHECK(testing::all_zero(t.snapshot_avg.data()));
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("task 4") != std::string::npos);
}

TEST_CASE("contextual_increment: hand examples") {
    auto t1 = TaskTrace::begin(1, 2), t2 = TaskTrace::begin(2, 2);
    t1.running_avg = Tensor::from({2, 2}, {2, 0, 0, 2});
    t1.snapshot_avg = t1.running_avg.clone();
    t1.frozen = true;
    t2.running_avg = Tensor::from({2, 2}, {0, 4, 4, 0});
    std::vector<TaskTrace> traces = {t1, t2};

    // sigmoid(0) = 0.5, sigmoid(-ln 3) = 0.25
    ContextWeights w{Tensor::row({0.0, -std::log(3.0)}, true)};
    check_matrix(contextual_increment(w, traces), {1, 1, 1, 1});
    check_matrix(contextual_increment(w, traces, false), {1, 0, 0, 1});

    ContextWeights low{Tensor::row({-40.0, -40.0}, true)};
    for (double x : contextual_increment(low, traces).data()) CHECK(std::abs(x) < 1e-16);

    const std::vector<TaskTrace> first = {t2};
    CHECK(testing::all_zero(contextual_increment(ContextWeights::fresh(1), first).data()));

    std::vector<TaskTrace> unfrozen = {t2, t2};
    CHECK_THROWS_AS(contextual_increment(w, unfrozen), ContractError);
    CHECK_THROWS_AS(contextual_increment(ContextWeights::fresh(3), traces), DimensionError);
}

TEST_CASE("context weights resize") {
    auto w = ContextWeights::fresh(2);
    w.raw.mutable_data()[0] = 1.5;
    w.resize(3, true);
    CHECK(w.size() == 3);
    CHECK(w.raw.data()[0] == 1.5);
    CHECK(w.raw.data()[2] == 0.0);
    w.resize(4, false);
    CHECK(testing::all_zero(w.raw.data()));
    CHECK(w.weights() == std::vector<double>(4, 0.5));
}

TEST_CASE("alignment_loss: hand examples") {
    const std::vector<double> q = {1, 0};
    const double r = 1 / std::sqrt(2.0);
    const auto pool = dense_pool({{1, 0}, {1, 0}, {0, 1}, {r, r}}, {}, 1);
    CHECK(alignment_loss(q, pool, std::vector<std::size_t>{0, 1}).item() == doctest::Approx(-2.0));
    CHECK(alignment_loss(q, pool, std::vector<std::size_t>{2}).item() == 0.0);
    CHECK(std::abs(alignment_loss(q, pool, std::vector<std::size_t>{3}).item() + 0.707107) < 1e-6);

    const auto zero_key = dense_pool({{0, 0}}, {}, 1);
    CHECK_THROWS_AS(alignment_loss(q, zero_key, std::vector<std::size_t>{0}), DegenerateInputError);
}

TEST_CASE("alignment step pulls the key toward the query") {
    Gen g(8);
    for (int trial = 0; trial < 50; ++trial) {
        auto pool = random_pool(g, {3, 4, 2, 6});
        const auto q = g.unit(6);
        const std::vector<std::size_t> idx = {trial % 3ul};
        ad::ParamRegistry reg;
        reg.add_trainable("key", pool.pair(idx[0]).key);
        const double before = cos_of(q, pool.pair(idx[0]).key.data());
        if (before > 0.999) continue;
        ad::backward(alignment_loss(q, pool, idx));
        ad::sgd_step(reg, ad::LrSchedule{0.05, 0.0, 1}, 0);
        CHECK(cos_of(q, pool.pair(idx[0]).key.data()) > before);
    }
}

TEST_CASE("gradient partition between task and alignment losses") {
    Gen g(9);
    auto pool = random_pool(g, {4, 3, 2, 5});
    ad::ParamRegistry keys, factors;
    pool.register_keys(keys, "p");
    pool.register_increments(factors, "p");
    const Tensor q = Tensor::row(g.unit(5));
    const std::vector<std::size_t> idx = select_top_m(q.data(), pool, 2);
    const Tensor c = g.tensor(3, 3);

    ad::backward(contract(intrinsic_increment(q, pool, idx, {IntrinsicWeighting::normalized_cosine, true}), c));
    for (const auto& e : keys.trainable()) CHECK(testing::grad_is_zero(e.tensor));
    bool reached = false;
    for (const auto& e : factors.trainable()) reached = reached || !testing::grad_is_zero(e.tensor);
    CHECK(reached);

    keys.zero_grad();
    factors.zero_grad();
    ad::backward(alignment_loss(q.data(), pool, idx));
    for (const auto& e : factors.trainable()) CHECK(testing::grad_is_zero(e.tensor));
    bool keyed = false;
    for (const auto& e : keys.trainable()) keyed = keyed || !testing::grad_is_zero(e.tensor);
    CHECK(keyed);
}

TEST_CASE("finite differences: intrinsic increment") {
    Gen g(21);
    for (int trial = 0; trial < 50; ++trial) {
        const PoolDims dims{4, 3, 2, 4};
        auto pool = random_pool(g, dims);
        const auto qv = g.unit(4);
        const std::size_t m = g.between(1, 3);
        auto idx = select_top_m(qv, pool, m);
        // Keep the denominator well away from zero.
        double denom = 0.0;
        for (auto n : idx) denom += cos_of(qv, pool.pair(n).key.data());
        if (std::abs(denom) < 0.2) continue;
        const Tensor c = g.tensor(3, 3);
        const bool softmax = trial % 2 == 1;
        const IntrinsicOptions opt{softmax ? IntrinsicWeighting::softmax : IntrinsicWeighting::normalized_cosine,
                                   false};
        const std::size_t target = idx[0];
        // With M = 1 the weight cancels; only the factors carry a gradient.
        const double key_tol = m == 1 ? 0.0 : 1e-6;

        auto& a = pool.pair(target).factor_a;
        const Tensor a0 = a.clone();
        const double err_a = testing::grad_check(
            [&](const Tensor& x) {
                a = x;
                return contract(intrinsic_increment(Tensor::row(qv), pool, idx, opt), c);
            },
            a0);
        a = a0;
        CHECK(err_a < 1e-6);

        auto& key = pool.pair(target).key;
        const Tensor k0 = key.clone();
        const double err_k = testing::grad_check(
            [&](const Tensor& x) {
                key = x;
                return contract(intrinsic_increment(Tensor::row(qv), pool, idx, opt), c);
            },
            k0);
        key = k0;
        if (m == 1) {
            const auto gk = testing::backward_grad(
                [&](const Tensor& x) {
                    key = x;
                    return contract(intrinsic_increment(Tensor::row(qv), pool, idx, opt), c);
                },
                k0);
            for (double x : gk) CHECK(std::abs(x) < 1e-12);
        }
        else CHECK(err_k < key_tol);
        key = k0;

        const double err_q = testing::grad_check(
            [&](const Tensor& x) { return contract(intrinsic_increment(x, pool, idx, opt), c); },
            Tensor::row(qv));
        if (m > 1) CHECK(err_q < key_tol);
    }
}

TEST_CASE("finite differences: contextual increment and alignment") {
    Gen g(22);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t t = g.between(2, 4);
        std::vector<TaskTrace> traces;
        for (std::size_t l = 0; l < t; ++l) {
            auto tr = TaskTrace::begin(int(l) + 1, 3);
            tr.running_avg = g.tensor(3, 3);
            if (l + 1 < t) {
                tr.snapshot_avg = tr.running_avg.clone();
                tr.frozen = true;
            }
            traces.push_back(tr);
        }
        const Tensor c = g.tensor(3, 3);
        const double err = testing::grad_check(
            [&](const Tensor& raw) { return contract(contextual_increment(ContextWeights{raw}, traces), c); },
            g.tensor(1, t, false, -2, 2));
        CHECK(err < 1e-6);

        auto pool = random_pool(g, {3, 2, 1, 4});
        const auto q = g.unit(4);
        const std::vector<std::size_t> idx = {trial % 3ul};
        auto& key = pool.pair(idx[0]).key;
        const Tensor k0 = key.clone();
        const double err_k = testing::grad_check(
            [&](const Tensor& x) {
                key = x;
                return alignment_loss(q, pool, idx);
            },
            k0);
        key = k0;
        CHECK(err_k < 1e-6);
    }
}

TEST_CASE("weighting names round trip") {
    for (auto w : {IntrinsicWeighting::normalized_cosine, IntrinsicWeighting::softmax})
        CHECK(intrinsic_weighting_from_string(to_string(w)) == w);
    for (auto w : {TraceWeighting::uniform, TraceWeighting::frequency})
        CHECK(trace_weighting_from_string(to_string(w)) == w);
    CHECK_THROWS_AS(intrinsic_weighting_from_string("eq3"), ConfigError);
}
