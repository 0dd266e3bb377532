#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dualinc {

// Frozen hashed bag-of-tokens random projection used as the instruction
// encoder. Tokens are lowercased whitespace-separated words hashed with
// FNV-1a 64 into kBuckets buckets; each bucket owns a fixed Gaussian vector.
class SurrogateEncoder {
public:
    static constexpr std::size_t kBuckets = 4096;

    SurrogateEncoder(std::size_t embed_dim, std::uint64_t seed, std::size_t feature_dim = 0);

    std::size_t embed_dim() const noexcept { return embed_dim_; }
    std::size_t feature_dim() const noexcept { return feature_dim_; }
    std::uint64_t seed() const noexcept { return seed_; }

    // Unit-norm embedding; throws DegenerateInputError on an empty instruction.
    std::vector<double> encode(std::string_view instruction) const;

    // Unit-norm embedding of a feature vector through a fixed projection.
    std::vector<double> encode_features(std::span<const double> features) const;

    std::span<const double> bucket(std::size_t index) const;
    // FNV-1a over the raw table bytes; recorded in checkpoints.
    std::uint64_t table_digest() const;

private:
    std::size_t embed_dim_;
    std::size_t feature_dim_;
    std::uint64_t seed_;
    std::vector<double> table_;       // kBuckets x embed_dim
    std::vector<double> projection_;  // feature_dim x embed_dim
};

std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t state);
inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

std::vector<std::string> tokenize_words(std::string_view text);

}  // namespace dualinc
