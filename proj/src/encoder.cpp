#include "dualinc/encoder.hpp"

#include "dualinc/errors.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <random>

namespace dualinc {

namespace {
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;
// Decorrelates the feature projection stream from the bucket table stream.
constexpr std::uint64_t kFeatureStream = 0x9e3779b97f4a7c15ULL;

void normalize(std::vector<double>& v, const char* what) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n <= 1e-12) throw DegenerateInputError(std::string(what) + ": zero-norm embedding");
    for (double& x : v) x /= n;
}
}  // namespace

std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t state) {
    for (unsigned char b : bytes) {
        state ^= b;
        state *= kFnvPrime;
    }
    return state;
}

std::uint64_t fnv1a64(std::string_view bytes) {
    return fnv1a64(std::span(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()),
                   kFnvOffset);
}

std::vector<std::string> tokenize_words(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

SurrogateEncoder::SurrogateEncoder(std::size_t embed_dim, std::uint64_t seed,
                                   std::size_t feature_dim)
    : embed_dim_(embed_dim), feature_dim_(feature_dim), seed_(seed) {
    if (embed_dim == 0) throw ConfigError("encoder: embed_dim must be positive");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    table_.resize(kBuckets * embed_dim);
    for (double& x : table_) x = normal(rng);
    std::mt19937_64 frng(seed ^ kFeatureStream);
    projection_.resize(feature_dim * embed_dim);
    for (double& x : projection_) x = normal(frng);
}

std::vector<double> SurrogateEncoder::encode(std::string_view instruction) const {
    auto words = tokenize_words(instruction);
    if (words.empty()) throw DegenerateInputError("encode: empty instruction");
    std::vector<std::size_t> buckets;
    buckets.reserve(words.size());
    for (auto& w : words) {
        std::transform(w.begin(), w.end(), w.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        buckets.push_back(fnv1a64(w) % kBuckets);
    }
    // Summation order is canonical so token permutations give identical bits.
    std::sort(buckets.begin(), buckets.end());
    std::vector<double> out(embed_dim_, 0.0);
    for (std::size_t b : buckets) {
        const double* row = table_.data() + b * embed_dim_;
        for (std::size_t i = 0; i < embed_dim_; ++i) out[i] += row[i];
    }
    const double inv = 1.0 / static_cast<double>(buckets.size());
    for (double& x : out) x *= inv;
    normalize(out, "encode");
    return out;
}

std::vector<double> SurrogateEncoder::encode_features(std::span<const double> features) const {
    if (features.size() != feature_dim_ || feature_dim_ == 0) {
        throw DimensionError("encode_features: expected " + std::to_string(feature_dim_) +
                             " features, got " + std::to_string(features.size()));
    }
    std::vector<double> out(embed_dim_, 0.0);
    for (std::size_t f = 0; f < feature_dim_; ++f) {
        const double* row = projection_.data() + f * embed_dim_;
        for (std::size_t i = 0; i < embed_dim_; ++i) out[i] += features[f] * row[i];
    }
    normalize(out, "encode_features");
    return out;
}

std::span<const double> SurrogateEncoder::bucket(std::size_t index) const {
    if (index >= kBuckets) throw IndexError("encoder: bucket out of range");
    return std::span(table_).subspan(index * embed_dim_, embed_dim_);
}

std::uint64_t SurrogateEncoder::table_digest() const {
    std::uint64_t h = kFnvOffset;
    h = fnv1a64(std::span(reinterpret_cast<const unsigned char*>(table_.data()),
                          table_.size() * sizeof(double)),
                h);
    return fnv1a64(std::span(reinterpret_cast<const unsigned char*>(projection_.data()),
                             projection_.size() * sizeof(double)),
                   h);
}

}  // namespace dualinc
