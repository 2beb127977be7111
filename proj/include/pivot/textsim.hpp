#pragma once

// Similarity kernels and a deterministic stand-in for a sentence encoder.

#include "pivot/common.hpp"

#include <cstdint>
#include <filesystem>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace pivot {

enum class Metric { cosine, dot };

struct ScoredLabel {
    int step_id = 0;
    double score = 0.0;

    friend bool operator==(const ScoredLabel&, const ScoredLabel&) = default;
};

// Norm bounds of embed_text outputs.
inline constexpr double kEmbedNormMin = 0.8;
inline constexpr double kEmbedNormMax = 1.6;

/// Pure function of (text, dim, seed). The output direction is Gaussian and
/// the norm is uniform in [kEmbedNormMin, kEmbedNormMax].
Embedding embed_text(std::string_view text, std::size_t dim, std::uint64_t seed);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
/// Throws if either vector is zero.
double cosine(std::span<const double> a, std::span<const double> b);
double similarity(std::span<const double> a, std::span<const double> b, Metric m);

/// The min(k, |candidates|) best candidates, score descending, ties to the
/// lower index.
std::vector<ScoredLabel> top_k(std::span<const double> query, std::span<const Embedding> candidates,
                               std::size_t k, Metric metric);

/// Memoizes embed_text keyed by (text, dim, seed). Thread-safe.
class EmbeddingCache {
public:
    const Embedding& get(std::string_view text, std::size_t dim, std::uint64_t seed);
    std::size_t size() const;

private:
    mutable std::mutex mu_;
    std::unordered_map<std::string, Embedding> table_;
};

/// Table of precomputed embeddings: "PEMB" magic, u32 version, u32 rows,
/// u32 dim, then rows*dim little-endian float32 values, row-major.
struct EmbeddingTable {
    std::uint32_t rows = 0;
    std::uint32_t dim = 0;
    std::vector<float> values;

    Embedding row(std::size_t r) const;
};

inline constexpr std::uint32_t kEmbeddingTableVersion = 1;

EmbeddingTable read_embedding_table(const std::filesystem::path& path);
void write_embedding_table(const std::filesystem::path& path, const EmbeddingTable& table);
EmbeddingTable make_embedding_table(std::span<const Embedding> rows);

} // namespace pivot
