#pragma once

// Data model for tasks, steps, the category hierarchy and videos; a seeded
// synthetic corpus generator; directory-based persistence.

#include "pivot/common.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace pivot {

struct Step {
    int step_id = 0;
    std::string text;

    friend bool operator==(const Step&, const Step&) = default;
};

/// A how-to procedure. step_ids are in execution order.
struct TaskSpec {
    int task_id = 0;
    std::string name;
    std::vector<int> step_ids;

    friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

struct HierarchyNode {
    int node_id = 0;
    std::string name;
    int level = 1;
    std::optional<int> parent;

    friend bool operator==(const HierarchyNode&, const HierarchyNode&) = default;
};

/// Root first, leaf last.
struct HierarchyPath {
    std::vector<int> node_ids;

    friend bool operator==(const HierarchyPath&, const HierarchyPath&) = default;
};

struct VideoRecord {
    std::string video_id;
    int leaf_node = 0;
    std::vector<Embedding> clip_embeddings;
    std::vector<Embedding> caption_embeddings;
    std::vector<std::string> caption_texts; // empty or parallel to the clips

    // Optional ground truth. Synthetic corpora always carry it; downstream
    // evaluation requires it. task_id < 0 means unknown; step_labels is empty
    // or one entry per clip with -1 marking background/filler clips.
    int task_id = -1;
    std::vector<int> step_labels;

    std::size_t size() const { return clip_embeddings.size(); }

    friend bool operator==(const VideoRecord&, const VideoRecord&) = default;
};

struct CorpusBundle {
    std::vector<Step> steps;
    std::vector<TaskSpec> tasks;
    std::vector<HierarchyNode> hierarchy;
    std::vector<VideoRecord> videos;
    std::size_t dim = 0;
    std::uint64_t text_seed = 0; // seed of the text embedder the captions were built with

    int levels() const;
    /// Nodes at the given level in id order.
    std::vector<int> nodes_at_level(int level) const;
    const HierarchyNode& node(int node_id) const;

    friend bool operator==(const CorpusBundle&, const CorpusBundle&) = default;
};

struct CorpusConfig {
    // branching[0] roots, each node at level l has branching[l] children.
    std::vector<int> branching{3, 3, 3};
    int tasks_per_leaf = 2;
    int steps_per_task = 6;
    int shared_steps = 4;          // steps a secondary task borrows from the leaf's primary task
    int videos_per_leaf = 8;
    int clips_per_video = 12;
    std::size_t dim = 64;

    double clip_noise = 0.3;       // expected norm of the isotropic clip noise
    double caption_noise = 0.2;    // expected norm of the caption noise before rescaling
    double filler_prob = 0.15;     // clips unrelated to any step
    double offtask_prob = 0.10;    // clips showing a step of an unrelated task
    double swap_prob = 0.2;        // adjacent disorder applied to the planted step order
    double scene_scale = 1.0;      // per-video background offset shared by all its clips
    int scene_rank = 8;

    std::string vocabulary = "";   // prefix for every generated name
    std::uint64_t text_seed = 1;   // text embedder seed
    std::uint64_t world_seed = 0x5eedULL; // shared across corpora: scene subspace

    void validate() const;
    std::vector<int> level_sizes() const;
    int leaves() const;

    static CorpusConfig desk();
    static CorpusConfig large();
    /// Disjoint vocabulary, smaller label space; used as the downstream corpus.
    static CorpusConfig transfer();
    /// Clean single-task leaves with no filler, for recover-the-planted-label checks.
    static CorpusConfig plant_and_recover();
};

/// Coordinate-wise mean of segment features (three segments per clip upstream).
Embedding pool_segments(std::span<const Embedding> segments);

/// Pure function of (config, seed).
CorpusBundle generate_corpus(const CorpusConfig& config, std::uint64_t seed);

/// Throws ValidationError naming the first violated invariant.
void validate_corpus(const CorpusBundle& bundle);

inline constexpr int kCorpusFormatVersion = 1;

void save_corpus(const CorpusBundle& bundle, const std::filesystem::path& dir);
CorpusBundle load_corpus(const std::filesystem::path& dir);

} // namespace pivot
