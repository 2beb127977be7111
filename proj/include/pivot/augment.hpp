#pragma once

// Clip selection and reordering applied to a mined video before training:
// threshold -> in-task -> sort -> unique -> swap, each stage optional.

#include "pivot/corpus.hpp"
#include "pivot/mining.hpp"
#include "pivot/rng.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace pivot {

struct AugmentConfig {
    bool threshold_enabled = false;
    double threshold_value = 1.0;
    bool in_task = false;
    bool sort = false;
    bool unique = false;
    bool swap = false;
    double swap_prob = 0.15;

    void validate() const;
    /// Threshold + in-task + sort.
    static AugmentConfig selected();
    friend bool operator==(const AugmentConfig&, const AugmentConfig&) = default;
};

/// Working state threaded through the stages. `order` holds original clip
/// indices; `labels` is indexed by original clip index and may be narrowed
/// by the in-task filter.
struct Selection {
    std::vector<std::size_t> order;
    std::vector<std::vector<ScoredLabel>> labels;

    friend bool operator==(const Selection&, const Selection&) = default;
};

struct AugmentedSequence {
    std::vector<std::size_t> clip_indices;
    std::vector<std::vector<int>> target_steps; // label step ids per kept clip
    /// Multi-hot row per kept clip over the global step catalog.
    std::vector<std::vector<double>> targets(std::size_t num_steps) const;

    friend bool operator==(const AugmentedSequence&, const AugmentedSequence&) = default;
};

/// Dot product of each caption with the embedding of its top-1 step.
std::vector<double> top1_dots(const VideoRecord& video, const PseudoLabelSet& labels,
                              std::span<const Embedding> step_embeddings);

Selection initial_selection(const PseudoLabelSet& labels);

/// Keeps indices whose score is strictly above tau.
Selection filter_threshold(const Selection& in, std::span<const double> dots, double tau);
/// Keeps clips with a label in the topic's steps and narrows their labels to it.
Selection filter_in_task(const Selection& in, const TaskSpec& topic);
/// Stable sort by the task position of each clip's best in-task label.
Selection sort_by_steps(const Selection& in, const TaskSpec& topic);
/// One uniformly chosen survivor per run of equal best labels.
Selection dedupe_steps(const Selection& in, Rng& rng);
/// One left-to-right pass; each adjacent pair swapped with probability p.
std::vector<std::size_t> swap_neighbors(std::vector<std::size_t> order, double p, Rng& rng);

/// Deterministic part of the pipeline (threshold, in-task, sort) plus the
/// empty-result fallback: the clip with the highest top-1 dot survives.
Selection select_clips(const PseudoLabelSet& labels, std::span<const double> dots, const TaskSpec& topic,
                       const AugmentConfig& config);
/// Stochastic tail (unique, swap).
AugmentedSequence finish_sequence(const Selection& selected, const AugmentConfig& config, Rng& rng);

AugmentedSequence apply_pipeline(const VideoRecord& video, const PseudoLabelSet& labels, const TaskSpec& topic,
                                 std::span<const Embedding> step_embeddings, const AugmentConfig& config, Rng& rng);

/// Per-(epoch, video) stream so results do not depend on processing order.
Rng augment_rng(std::uint64_t seed, std::uint64_t epoch, std::string_view video_id);

} // namespace pivot
