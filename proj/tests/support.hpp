#pragma once

// Seeded generators and small fixtures shared by the test binaries.

#include "dualinc/autodiff.hpp"
#include "dualinc/engine.hpp"
#include "dualinc/model.hpp"
#include "dualinc/stream.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace testing {

using dualinc::ad::Shape;
using dualinc::ad::Tensor;

class Gen {
public:
    explicit Gen(std::uint64_t seed) : rng_(seed) {}

    double uniform(double lo = -1.0, double hi = 1.0) {
        return std::uniform_real_distribution<double>(lo, hi)(rng_);
    }
    double normal(double sd = 1.0) { return std::normal_distribution<double>(0.0, sd)(rng_); }
    std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }
    std::size_t between(std::size_t lo, std::size_t hi) {
        return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
    }

    std::vector<double> vec(std::size_t n, double lo = -1.0, double hi = 1.0) {
        std::vector<double> v(n);
        for (auto& x : v) x = uniform(lo, hi);
        return v;
    }
    std::vector<double> unit(std::size_t n) {
        std::vector<double> v(n);
        double s = 0.0;
        for (auto& x : v) {
            x = normal();
            s += x * x;
        }
        for (auto& x : v) x /= std::sqrt(s);
        return v;
    }
    Tensor tensor(std::size_t r, std::size_t c, bool grad = false, double lo = -1.0, double hi = 1.0) {
        return Tensor::from({r, c}, vec(r * c, lo, hi), grad);
    }
    std::mt19937_64& engine() { return rng_; }

private:
    std::mt19937_64 rng_;
};

inline std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

inline bool all_zero(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}

// Zero when the tensor never received a gradient, or received exact zeros.
inline bool grad_is_zero(const Tensor& t) { return !t.has_grad() || all_zero(t.grad()); }

// max |a - b| / max(max |a|, max |b|, floor)
inline double rel_err(std::span<const double> a, std::span<const double> b, double floor = 1e-6) {
    double diff = 0.0, scale = floor;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff = std::max(diff, std::abs(a[i] - b[i]));
        scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
    }
    return diff / scale;
}

// Gradient of f at t via backward, on a fresh leaf copy.
inline std::vector<double> backward_grad(const std::function<Tensor(const Tensor&)>& f, const Tensor& t) {
    Tensor leaf = t.clone(true);
    Tensor loss = f(leaf);
    dualinc::ad::backward(loss);
    if (!leaf.has_grad()) return std::vector<double>(t.size(), 0.0);
    return {leaf.grad().begin(), leaf.grad().end()};
}

// Relative error between backward and central differences.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& t, double h = 1e-5) {
    const auto g = backward_grad(f, t);
    const Tensor fd = dualinc::ad::finite_diff_grad([&](const Tensor& x) { return f(x).item(); }, t, h);
    return rel_err(g, fd.data());
}

inline dualinc::model::ToyModelConfig small_model_config() {
    dualinc::model::ToyModelConfig c;
    c.dim = 16;
    c.heads = 2;
    c.max_seq_len = 40;
    return c;
}

inline std::vector<dualinc::stream::StreamTask> small_stream(
    std::vector<dualinc::stream::Family> families, std::size_t n_train, std::size_t n_eval,
    std::uint64_t seed = 3) {
    std::vector<dualinc::stream::TaskFamilySpec> specs;
    for (auto f : families) {
        dualinc::stream::TaskFamilySpec s;
        s.family = f;
        s.name = dualinc::stream::to_string(f);
        s.n_train = n_train;
        s.n_eval = n_eval;
        specs.push_back(s);
    }
    return dualinc::stream::generate_tasks(specs, seed);
}

inline dualinc::engine::RunConfig fast_config(dualinc::engine::Method m) {
    dualinc::engine::RunConfig c;
    c.method = m;
    c.pool_size = 8;
    c.top_m = 2;
    c.rank = 2;
    c.batch_size = 8;
    c.epochs = 1;
    return c;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("dualinc_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace testing
