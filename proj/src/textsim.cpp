#include "pivot/textsim.hpp"

#include "pivot/binio.hpp"
#include "pivot/fileio.hpp"
#include "pivot/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pivot {

Embedding embed_text(std::string_view text, std::size_t dim, std::uint64_t seed) {
    if (dim == 0) throw ValidationError("embed_text: dim must be positive");
    Rng rng(derive_seed(seed, fnv1a(text), dim));
    std::normal_distribution<double> gauss(0.0, 1.0);
    Embedding v(dim);
    double n2 = 0.0;
    do {
        n2 = 0.0;
        for (auto& x : v) {
            x = gauss(rng);
            n2 += x * x;
        }
    } while (n2 == 0.0);
    const double target = kEmbedNormMin + (kEmbedNormMax - kEmbedNormMin) * uniform01(rng);
    const double scale = target / std::sqrt(n2);
    for (auto& x : v) x *= scale;
    return v;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ValidationError("dot: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                              std::to_string(b.size()) + ")");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double cosine(std::span<const double> a, std::span<const double> b) {
    const double d = dot(a, b);
    const double na = norm(a);
    const double nb = norm(b);
    if (na == 0.0 || nb == 0.0) throw ValidationError("cosine: undefined for a zero vector");
    return d / (na * nb);
}

double similarity(std::span<const double> a, std::span<const double> b, Metric m) {
    return m == Metric::cosine ? cosine(a, b) : dot(a, b);
}

std::vector<ScoredLabel> top_k(std::span<const double> query, std::span<const Embedding> candidates,
                               std::size_t k, Metric metric) {
    if (candidates.empty()) throw ValidationError("top_k: empty candidate list");
    if (k == 0) throw ValidationError("top_k: k must be at least 1");
    std::vector<ScoredLabel> scored(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        scored[i] = {static_cast<int>(i), similarity(query, candidates[i], metric)};
    }
    const auto better = [](const ScoredLabel& x, const ScoredLabel& y) {
        return x.score > y.score || (x.score == y.score && x.step_id < y.step_id);
    };
    const std::size_t keep = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(), better);
    scored.resize(keep);
    return scored;
}

const Embedding& EmbeddingCache::get(std::string_view text, std::size_t dim, std::uint64_t seed) {
    std::string key = std::to_string(dim) + ":" + std::to_string(seed) + ":";
    key.append(text);
    std::lock_guard lock(mu_);
    auto it = table_.find(key);
    if (it == table_.end()) it = table_.emplace(std::move(key), embed_text(text, dim, seed)).first;
    return it->second;
}

std::size_t EmbeddingCache::size() const {
    std::lock_guard lock(mu_);
    return table_.size();
}

Embedding EmbeddingTable::row(std::size_t r) const {
    if (r >= rows) throw ValidationError("embedding table: row " + std::to_string(r) + " out of range");
    Embedding e(dim);
    for (std::size_t j = 0; j < dim; ++j) e[j] = values[r * dim + j];
    return e;
}

EmbeddingTable make_embedding_table(std::span<const Embedding> rows) {
    EmbeddingTable t;
    t.rows = static_cast<std::uint32_t>(rows.size());
    t.dim = rows.empty() ? 0 : static_cast<std::uint32_t>(rows.front().size());
    t.values.reserve(static_cast<std::size_t>(t.rows) * t.dim);
    for (const auto& r : rows) {
        if (r.size() != t.dim) throw ValidationError("embedding table: ragged rows");
        for (double x : r) t.values.push_back(static_cast<float>(x));
    }
    return t;
}

EmbeddingTable read_embedding_table(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    binio::Reader in(bytes, path.string());
    if (in.get_bytes(4) != "PEMB") throw FormatError(path.string() + ": bad magic, expected PEMB");
    const auto version = in.get<std::uint32_t>();
    if (version != kEmbeddingTableVersion) {
        throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
    }
    EmbeddingTable t;
    t.rows = in.get<std::uint32_t>();
    t.dim = in.get<std::uint32_t>();
    if (t.dim == 0) throw FormatError(path.string() + ": zero dimension");
    const std::size_t n = static_cast<std::size_t>(t.rows) * t.dim;
    if (in.remaining() != n * 4) {
        throw FormatError(path.string() + ": payload size " + std::to_string(in.remaining()) +
                          " does not match " + std::to_string(t.rows) + "x" + std::to_string(t.dim));
    }
    t.values.resize(n);
    for (auto& v : t.values) {
        v = in.get_f32();
        if (!std::isfinite(v)) throw FormatError(path.string() + ": non-finite value");
    }
    return t;
}

void write_embedding_table(const std::filesystem::path& path, const EmbeddingTable& table) {
    if (table.values.size() != static_cast<std::size_t>(table.rows) * table.dim) {
        throw ValidationError("embedding table: value count does not match shape");
    }
    binio::Writer out;
    out.put_bytes("PEMB");
    out.put(kEmbeddingTableVersion);
    out.put(table.rows);
    out.put(table.dim);
    for (float v : table.values) out.put_f32(v);
    write_file_atomic(path, out.bytes());
}

} // namespace pivot
