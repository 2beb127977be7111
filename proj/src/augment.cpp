#include "pivot/augment.hpp"

#include "pivot/textsim.hpp"

#include <algorithm>
#include <limits>

namespace pivot {

void AugmentConfig::validate() const {
    if (!(swap_prob >= 0.0 && swap_prob <= 1.0)) throw ValidationError("augment: swap_prob must be in [0, 1]");
    if (sort && !in_task) throw ValidationError("augment: sort requires in_task (step order comes from the matched task)");
    if (unique && !sort) throw ValidationError("augment: unique requires sort");
    if (swap && !sort) throw ValidationError("augment: swap requires sort");
}

AugmentConfig AugmentConfig::selected() {
    AugmentConfig c;
    c.threshold_enabled = true;
    c.in_task = true;
    c.sort = true;
    return c;
}

std::vector<std::vector<double>> AugmentedSequence::targets(std::size_t num_steps) const {
    std::vector<std::vector<double>> out(target_steps.size(), std::vector<double>(num_steps, 0.0));
    for (std::size_t i = 0; i < target_steps.size(); ++i) {
        for (int s : target_steps[i]) {
            if (s < 0 || static_cast<std::size_t>(s) >= num_steps) {
                throw ValidationError("augment: target step " + std::to_string(s) + " outside the catalog");
            }
            out[i][static_cast<std::size_t>(s)] = 1.0;
        }
    }
    return out;
}

std::vector<double> top1_dots(const VideoRecord& video, const PseudoLabelSet& labels,
                              std::span<const Embedding> step_embeddings) {
    if (labels.per_clip.size() != video.caption_embeddings.size()) {
        throw ValidationError("augment: labels do not cover video " + video.video_id);
    }
    std::vector<double> dots(labels.per_clip.size());
    for (std::size_t i = 0; i < dots.size(); ++i) {
        if (labels.per_clip[i].empty()) throw ValidationError("augment: clip without labels in " + video.video_id);
        const auto s = static_cast<std::size_t>(labels.per_clip[i].front().step_id);
        dots[i] = dot(video.caption_embeddings[i], step_embeddings[s]);
    }
    return dots;
}

Selection initial_selection(const PseudoLabelSet& labels) {
    Selection s;
    s.order.resize(labels.per_clip.size());
    for (std::size_t i = 0; i < s.order.size(); ++i) s.order[i] = i;
    s.labels = labels.per_clip;
    return s;
}

Selection filter_threshold(const Selection& in, std::span<const double> dots, double tau) {
    Selection out;
    out.labels = in.labels;
    for (auto i : in.order)
        if (dots[i] > tau) out.order.push_back(i);
    return out;
}

namespace {

bool in_steps(const TaskSpec& t, int step) {
    return std::find(t.step_ids.begin(), t.step_ids.end(), step) != t.step_ids.end();
}

std::ptrdiff_t task_position(const TaskSpec& t, int step) {
    auto it = std::find(t.step_ids.begin(), t.step_ids.end(), step);
    return it == t.step_ids.end() ? -1 : it - t.step_ids.begin();
}

// Highest-scoring label that belongs to the task (labels are score-sorted).
int best_in_task(const std::vector<ScoredLabel>& labels, const TaskSpec& t) {
    for (const auto& l : labels)
        if (in_steps(t, l.step_id)) return l.step_id;
    return -1;
}

} // namespace

Selection filter_in_task(const Selection& in, const TaskSpec& topic) {
    Selection out;
    out.labels = in.labels;
    for (auto i : in.order) {
        std::vector<ScoredLabel> kept;
        for (const auto& l : in.labels[i])
            if (in_steps(topic, l.step_id)) kept.push_back(l);
        if (kept.empty()) continue;
        out.labels[i] = std::move(kept);
        out.order.push_back(i);
    }
    return out;
}

Selection sort_by_steps(const Selection& in, const TaskSpec& topic) {
    std::vector<std::pair<std::ptrdiff_t, std::size_t>> keyed;
    keyed.reserve(in.order.size());
    for (auto i : in.order) {
        const int best = best_in_task(in.labels[i], topic);
        if (best < 0) {
            throw ValidationError("sort_by_steps: clip " + std::to_string(i) + " has no label in task " +
                                  std::to_string(topic.task_id));
        }
        keyed.emplace_back(task_position(topic, best), i);
    }
    std::stable_sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    Selection out;
    out.labels = in.labels;
    for (const auto& [pos, i] : keyed) out.order.push_back(i);
    return out;
}

Selection dedupe_steps(const Selection& in, Rng& rng) {
    Selection out;
    out.labels = in.labels;
    std::size_t start = 0;
    while (start < in.order.size()) {
        const int label = in.labels[in.order[start]].front().step_id;
        std::size_t end = start + 1;
        while (end < in.order.size() && in.labels[in.order[end]].front().step_id == label) ++end;
        const auto pick = std::uniform_int_distribution<std::size_t>(start, end - 1)(rng);
        out.order.push_back(in.order[pick]);
        start = end;
    }
    return out;
}

std::vector<std::size_t> swap_neighbors(std::vector<std::size_t> order, double p, Rng& rng) {
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("swap_neighbors: p must be in [0, 1]");
    for (std::size_t i = 0; i + 1 < order.size(); ++i) {
        if (uniform01(rng) < p) std::swap(order[i], order[i + 1]);
    }
    return order;
}

Selection select_clips(const PseudoLabelSet& labels, std::span<const double> dots, const TaskSpec& topic,
                       const AugmentConfig& config) {
    config.validate();
    if (dots.size() != labels.per_clip.size()) throw ValidationError("select_clips: dot scores do not cover all clips");
    Selection s = initial_selection(labels);
    if (config.threshold_enabled) s = filter_threshold(s, dots, config.threshold_value);
    if (config.in_task) s = filter_in_task(s, topic);
    if (s.order.empty()) {
        // Keep the single most confident clip rather than dropping the video.
        std::size_t best = 0;
        for (std::size_t i = 1; i < dots.size(); ++i)
            if (dots[i] > dots[best]) best = i;
        s.labels = labels.per_clip;
        s.order = {best};
        return s;
    }
    if (config.sort) s = sort_by_steps(s, topic);
    return s;
}

AugmentedSequence finish_sequence(const Selection& selected, const AugmentConfig& config, Rng& rng) {
    Selection s = selected;
    if (config.unique) s = dedupe_steps(s, rng);
    if (config.swap) s.order = swap_neighbors(std::move(s.order), config.swap_prob, rng);
    AugmentedSequence out;
    out.clip_indices = s.order;
    for (auto i : s.order) {
        std::vector<int> steps;
        for (const auto& l : s.labels[i]) steps.push_back(l.step_id);
        out.target_steps.push_back(std::move(steps));
    }
    return out;
}

AugmentedSequence apply_pipeline(const VideoRecord& video, const PseudoLabelSet& labels, const TaskSpec& topic,
                                 std::span<const Embedding> step_embeddings, const AugmentConfig& config, Rng& rng) {
    const auto dots = top1_dots(video, labels, step_embeddings);
    return finish_sequence(select_clips(labels, dots, topic, config), config, rng);
}

Rng augment_rng(std::uint64_t seed, std::uint64_t epoch, std::string_view video_id) {
    return Rng(derive_seed(seed, std::uint64_t{0xA11}, epoch, fnv1a(video_id)));
}

} // namespace pivot
