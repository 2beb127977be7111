#pragma once

// Training labels: per-clip step pseudo-labels from caption/step similarity,
// the video's root-to-leaf hierarchy path, and the topic match used by the
// in-task filter.

#include "pivot/corpus.hpp"
#include "pivot/textsim.hpp"

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace pivot {

struct PseudoLabelSet {
    // One list per clip, each sorted by score descending.
    std::vector<std::vector<ScoredLabel>> per_clip;

    friend bool operator==(const PseudoLabelSet&, const PseudoLabelSet&) = default;
};

struct TopicMatch {
    int task_id = 0;
    double score = 0.0;

    friend bool operator==(const TopicMatch&, const TopicMatch&) = default;
};

using TextEmbedder = std::function<Embedding(std::string_view)>;

/// Top-k steps by cosine between each caption embedding and every step embedding.
PseudoLabelSet mine_pseudo_labels(const VideoRecord& video, std::span<const Embedding> step_embeddings, std::size_t k);

HierarchyPath resolve_path(int leaf, std::span<const HierarchyNode> hierarchy);

/// Task whose name embedding is closest (cosine) to the leaf name embedding;
/// ties go to the lower task_id.
TopicMatch match_topic(std::string_view leaf_name, std::span<const TaskSpec> tasks, const TextEmbedder& embedder);

/// Step embeddings for a catalog under the corpus' text embedder.
std::vector<Embedding> step_embeddings(const CorpusBundle& corpus, EmbeddingCache* cache = nullptr);

/// Everything mined for one video.
struct VideoLabels {
    std::string video_id;
    HierarchyPath path;
    TopicMatch topic;
    PseudoLabelSet labels;

    friend bool operator==(const VideoLabels&, const VideoLabels&) = default;
};

struct MiningOptions {
    std::size_t k = 1;
    bool parallel = true;
};

/// Labels for every video in corpus order. Videos are processed in parallel
/// when OpenMP is available; the result does not depend on the schedule.
std::vector<VideoLabels> mine_corpus(const CorpusBundle& corpus, std::span<const Embedding> step_embeddings,
                                     const MiningOptions& options = {});

/// One JSON object per video: video_id, path, topic, clips as [[step_id, score], ...].
void save_labels(const std::vector<VideoLabels>& labels, const std::filesystem::path& path);
std::vector<VideoLabels> load_labels(const std::filesystem::path& path);

/// Checks that labels line up with the corpus (same videos, same clip counts).
void check_labels_match(const CorpusBundle& corpus, std::span<const VideoLabels> labels);

} // namespace pivot
