#include "support.hpp"

#include "dualinc/encoder.hpp"
#include "dualinc/errors.hpp"
#include "dualinc/stream.hpp"

#include <doctest.h>

using namespace dualinc;
using testing::Gen;

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

std::string random_sentence(Gen& g) {
    static const std::vector<std::string> words = {"reverse", "the", "Sequence", "add", "numbers", "zz",
                                                   "x1",      "Q",   "modulo",   "7",   "copy",    "mask"};
    std::string s;
    const std::size_t n = g.between(1, 9);
    for (std::size_t i = 0; i < n; ++i) s += (i ? " " : "") + words[g.index(words.size())];
    return s;
}

}  // namespace

TEST_CASE("encode is deterministic and unit norm") {
    const SurrogateEncoder e(64, 7);
    const auto a = e.encode("reverse the sequence");
    const auto b = e.encode("reverse the sequence");
    CHECK(a == b);
    Gen g(1);
    for (int i = 0; i < 1000; ++i) CHECK(std::abs(norm(e.encode(random_sentence(g))) - 1.0) < 1e-12);
}

TEST_CASE("encode is case-folded and permutation invariant") {
    const SurrogateEncoder e(32, 7);
    CHECK(e.encode("Reverse THE sequence") == e.encode("reverse the sequence"));
    CHECK(e.encode("sequence reverse the") == e.encode("the sequence reverse"));
    Gen g(2);
    for (int i = 0; i < 200; ++i) {
        auto words = tokenize_words(random_sentence(g));
        std::string a, b;
        for (const auto& w : words) a += w + " ";
        std::shuffle(words.begin(), words.end(), g.engine());
        for (const auto& w : words) b += "  " + w;
        CHECK(e.encode(a) == e.encode(b));
    }
}

TEST_CASE("empty instruction is degenerate") {
    const SurrogateEncoder e(16, 7);
    CHECK_THROWS_AS(e.encode(""), DegenerateInputError);
    CHECK_THROWS_AS(e.encode("   \t "), DegenerateInputError);
}

TEST_CASE("bucket hashing uses FNV-1a 64") {
    // Reference vectors for FNV-1a 64.
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);

    // A one-word instruction embeds as its bucket vector, normalized.
    const SurrogateEncoder e(8, 3);
    const auto bucket = e.bucket(fnv1a64("reverse") % SurrogateEncoder::kBuckets);
    std::vector<double> expected(bucket.begin(), bucket.end());
    const double n = norm(expected);
    for (auto& x : expected) x /= n;
    const auto got = e.encode("reverse");
    for (std::size_t i = 0; i < 8; ++i) CHECK(got[i] == doctest::Approx(expected[i]).epsilon(1e-14));
}

TEST_CASE("distinct seeds give distinct tables") {
    const SurrogateEncoder a(16, 1), b(16, 2), c(16, 1);
    CHECK(a.table_digest() != b.table_digest());
    CHECK(a.table_digest() == c.table_digest());
    bool differs = false;
    for (std::size_t i = 0; i < 16 && !differs; ++i) {
        const auto x = a.bucket(i), y = b.bucket(i);
        differs = !std::equal(x.begin(), x.end(), y.begin());
    }
    CHECK(differs);
}

TEST_CASE("template instructions are separable") {
    const SurrogateEncoder e(64, 7, 8);
    const double pair = dot(e.encode("reverse the sequence"), e.encode("add the numbers modulo p"));
    CHECK(pair < 0.9);
    CHECK(pair == doctest::Approx(0.3054).epsilon(1e-3));

    std::vector<stream::TaskFamilySpec> specs;
    for (auto f : stream::all_families()) {
        stream::TaskFamilySpec s;
        s.family = f;
        s.name = stream::to_string(f);
        s.n_train = 200;
        s.n_eval = 10;
        specs.push_back(s);
    }
    const auto tasks = stream::generate_tasks(specs, 3);
    double within = 0.0, cross = 0.0;
    std::size_t nw = 0, nc = 0;
    for (std::size_t a = 0; a < tasks.size(); ++a) {
        for (std::size_t b = 0; b < tasks.size(); ++b) {
            for (std::size_t i = 0; i < 100; ++i) {
                const double c = dot(e.encode(tasks[a].train[i].instruction),
                                     e.encode(tasks[b].train[i + 100].instruction));
                (a == b ? within : cross) += c;
                ++(a == b ? nw : nc);
            }
        }
    }
    const double margin = within / double(nw) - cross / double(nc);
    MESSAGE("within-family minus cross-family cosine: " << margin);
    CHECK(margin >= 0.1);
    // Measured 0.747 under the default seed.
    CHECK(margin > 0.7);
}

TEST_CASE("feature encoding") {
    const SurrogateEncoder e(16, 7, 4);
    const std::vector<double> f = {0.1, -2.0, 0.5, 1.0};
    CHECK(std::abs(norm(e.encode_features(f)) - 1.0) < 1e-12);
    CHECK(e.encode_features(f) == e.encode_features(f));
    const std::vector<double> short_f = {1.0};
    CHECK_THROWS_AS(e.encode_features(short_f), DimensionError);
    const std::vector<double> zero(4, 0.0);
    CHECK_THROWS_AS(e.encode_features(zero), DegenerateInputError);
}
