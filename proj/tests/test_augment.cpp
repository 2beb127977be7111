#include <doctest.h>

#include "augment_fixture.hpp"
#include "pivot/augment.hpp"

#include <algorithm>
#include <set>

using namespace pivot;

namespace {

std::set<std::size_t> as_set(const std::vector<std::size_t>& v) { return {v.begin(), v.end()}; }

} // namespace

TEST_CASE("threshold is strict") {
    PseudoLabelSet l;
    l.per_clip = {{{0, 1.0}}, {{1, 1.0}}, {{2, 1.0}}};
    const std::vector<double> dots{1.2, 1.0, 0.5};
    CHECK(filter_threshold(initial_selection(l), dots, 1.0).order == std::vector<std::size_t>{0});
    CHECK(filter_threshold(initial_selection(l), dots, -INFINITY).order.size() == 3);
}

TEST_CASE("threshold keep set equals a recomputation of caption-step dots") {
    const auto bundle = generate_corpus(CorpusConfig::desk(), 5);
    const auto steps = step_embeddings(bundle);
    for (std::size_t v = 0; v < 20; ++v) {
        const auto& video = bundle.videos[v];
        const auto labels = mine_pseudo_labels(video, steps, 3);
        const auto dots = top1_dots(video, labels, steps);
        const auto kept = filter_threshold(initial_selection(labels), dots, 1.0).order;
        std::vector<std::size_t> want;
        for (std::size_t i = 0; i < video.size(); ++i) {
            const auto& s = steps[static_cast<std::size_t>(labels.per_clip[i][0].step_id)];
            double d = 0;
            for (std::size_t j = 0; j < s.size(); ++j) d += video.caption_embeddings[i][j] * s[j];
            if (d > 1.0) want.push_back(i);
        }
        CHECK(kept == want);
    }
}

TEST_CASE("in-task filter") {
    const TaskSpec t{0, "t", {1, 2}};
    PseudoLabelSet inside;
    inside.per_clip = {{{1, .9}}, {{2, .8}}};
    const auto a = filter_in_task(initial_selection(inside), t);
    CHECK(a.order == std::vector<std::size_t>{0, 1});
    CHECK(a.labels == inside.per_clip);

    PseudoLabelSet outside;
    outside.per_clip = {{{5, .9}}, {{6, .8}}};
    CHECK(filter_in_task(initial_selection(outside), t).order.empty());

    PseudoLabelSet mixed;
    mixed.per_clip = {{{5, .9}, {2, .7}}};
    const auto m = filter_in_task(initial_selection(mixed), t);
    CHECK(m.order == std::vector<std::size_t>{0});
    REQUIRE(m.labels[0].size() == 1);
    CHECK(m.labels[0][0].step_id == 2);
}

TEST_CASE("sort by task step order") {
    const TaskSpec t{0, "t", {1, 2, 3}};
    PseudoLabelSet l;
    l.per_clip = {{{3, .9}}, {{1, .9}}, {{2, .9}}};
    CHECK(sort_by_steps(initial_selection(l), t).order == std::vector<std::size_t>{1, 2, 0});

    PseudoLabelSet ordered;
    ordered.per_clip = {{{1, .9}}, {{2, .9}}, {{3, .9}}};
    CHECK(sort_by_steps(initial_selection(ordered), t).order == std::vector<std::size_t>{0, 1, 2});

    // Equal keys keep their temporal order.
    PseudoLabelSet ties;
    ties.per_clip.assign(9, {{2, .5}});
    ties.per_clip[4] = {{1, .9}};
    ties.per_clip[7] = {{1, .9}};
    const auto order = sort_by_steps(initial_selection(ties), t).order;
    CHECK(order[0] == 4);
    CHECK(order[1] == 7);
    // The remaining clips are a permutation oracle's stable order: ascending.
    CHECK(std::is_sorted(order.begin() + 2, order.end()));

    auto six = filter_in_task(initial_selection(fixture::six_clip_labels()), fixture::six_clip_task());
    CHECK(sort_by_steps(six, fixture::six_clip_task()).order == fixture::six_clip_sorted());
}

TEST_CASE("dedupe") {
    Rng rng(1);
    PseudoLabelSet distinct;
    distinct.per_clip = {{{1, .9}}, {{2, .9}}, {{3, .9}}};
    CHECK(dedupe_steps(initial_selection(distinct), rng).order == std::vector<std::size_t>{0, 1, 2});

    PseudoLabelSet dup;
    dup.per_clip = {{{1, .9}}, {{1, .8}}, {{2, .9}}};
    Rng r1(77), r2(77);
    const auto a = dedupe_steps(initial_selection(dup), r1).order;
    CHECK(a == dedupe_steps(initial_selection(dup), r2).order);
    REQUIRE(a.size() == 2);
    CHECK((a[0] == 0 || a[0] == 1));
    CHECK(a[1] == 2);

    int first = 0;
    Rng r3(5);
    for (int i = 0; i < 10000; ++i)
        if (dedupe_steps(initial_selection(dup), r3).order[0] == 0) ++first;
    CHECK(first >= 4850);
    CHECK(first <= 5150);
}

TEST_CASE("swap neighbors") {
    Rng rng(3);
    CHECK(swap_neighbors({0, 1, 2, 3}, 0.0, rng) == std::vector<std::size_t>{0, 1, 2, 3});
    CHECK(swap_neighbors({0, 1, 2}, 1.0, rng) == std::vector<std::size_t>{1, 2, 0});
    CHECK_THROWS_AS(swap_neighbors({0, 1}, 1.5, rng), ValidationError);

    int swapped = 0;
    Rng r(11);
    for (int i = 0; i < 10000; ++i)
        if (swap_neighbors({0, 1, 2, 3, 4}, 0.15, r)[0] == 1) ++swapped;
    CHECK(swapped / 10000.0 == doctest::Approx(0.15).epsilon(0.01 / 0.15));
}

TEST_CASE("pipeline properties on the six-clip fixture") {
    const auto labels = fixture::six_clip_labels();
    const auto dots = fixture::six_clip_dots();
    const auto topic = fixture::six_clip_task();

    AugmentConfig thresh;
    thresh.threshold_enabled = true;
    AugmentConfig thresh_task = thresh;
    thresh_task.in_task = true;
    const auto a = as_set(select_clips(labels, dots, topic, thresh).order);
    const auto b = as_set(select_clips(labels, dots, topic, thresh_task).order);
    CHECK(std::includes(a.begin(), a.end(), b.begin(), b.end()));
    CHECK(a.count(4) == 0);

    CHECK(select_clips(labels, dots, topic, AugmentConfig::selected()).order ==
          fixture::six_clip_thresh_in_task_sorted());

    // Raising tau never adds clips.
    std::size_t prev = 7;
    for (double tau : {0.0, 0.95, 1.0, 1.15, 1.25, 1.4, 2.0}) {
        const auto n = filter_threshold(initial_selection(labels), dots, tau).order.size();
        CHECK(n <= prev);
        prev = n;
    }

    // Everything filtered: the most confident clip survives.
    AugmentConfig strict = thresh;
    strict.threshold_value = 10.0;
    CHECK(select_clips(labels, dots, topic, strict).order == std::vector<std::size_t>{5});
}

TEST_CASE("no-op pipeline and determinism on generated videos") {
    CorpusConfig cc = CorpusConfig::plant_and_recover();
    cc.clip_noise = 0.0;
    cc.caption_noise = 0.0;
    cc.swap_prob = 0.5;
    const auto bundle = generate_corpus(cc, 2);
    const auto steps = step_embeddings(bundle);
    const auto mined = mine_corpus(bundle, steps, {3, false});
    for (std::size_t v = 0; v < bundle.videos.size(); ++v) {
        const auto& video = bundle.videos[v];
        const auto& topic = bundle.tasks[static_cast<std::size_t>(mined[v].topic.task_id)];
        Rng rng(1);
        const auto plain = apply_pipeline(video, mined[v].labels, topic, steps, AugmentConfig{}, rng);
        REQUIRE(plain.clip_indices.size() == video.size());
        for (std::size_t i = 0; i < video.size(); ++i) {
            CHECK(plain.clip_indices[i] == i);
            CHECK(plain.target_steps[i].size() == 3);
            CHECK(plain.target_steps[i][0] == mined[v].labels.per_clip[i][0].step_id);
        }

        // Planted order recovered: targets follow the task's step order.
        const auto sel = apply_pipeline(video, mined[v].labels, topic, steps, AugmentConfig::selected(), rng);
        CHECK(sel.clip_indices.size() <= video.size());
        std::vector<std::ptrdiff_t> pos;
        for (const auto& t : sel.target_steps)
            pos.push_back(std::find(topic.step_ids.begin(), topic.step_ids.end(), t[0]) - topic.step_ids.begin());
        CHECK(std::is_sorted(pos.begin(), pos.end()));

        AugmentConfig full = AugmentConfig::selected();
        full.unique = true;
        full.swap = true;
        Rng x = augment_rng(9, 3, video.video_id), y = augment_rng(9, 3, video.video_id);
        CHECK(apply_pipeline(video, mined[v].labels, topic, steps, full, x) ==
              apply_pipeline(video, mined[v].labels, topic, steps, full, y));
    }
}
