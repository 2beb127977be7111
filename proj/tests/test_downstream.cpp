#include <doctest.h>

#include "pivot/downstream.hpp"
#include "pivot/rng.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace pivot;

namespace {

ModelConfig small_arch(std::size_t dim) {
    ModelConfig c;
    c.dim = dim;
    c.heads = 2;
    c.ff_dim = 2 * dim;
    c.head_hidden = dim;
    c.dropout = 0.0;
    return c;
}

Embedding unit(std::size_t dim, std::size_t axis, double scale = 1.0) {
    Embedding e(dim, 0.0);
    e[axis] = scale;
    return e;
}

// Hand-built corpus: step s is the axis s, task t owns steps listed in `tasks`.
CorpusBundle bundle(std::size_t dim, int steps, const std::vector<std::vector<int>>& tasks) {
    CorpusBundle b;
    b.dim = dim;
    for (int s = 0; s < steps; ++s) b.steps.push_back({s, "step " + std::to_string(s)});
    for (std::size_t t = 0; t < tasks.size(); ++t)
        b.tasks.push_back({static_cast<int>(t), "task " + std::to_string(t), tasks[t]});
    return b;
}

VideoRecord video(const std::string& id, int task, const std::vector<int>& steps, std::size_t dim, double noise,
                  std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, noise);
    VideoRecord v;
    v.video_id = id;
    v.task_id = task;
    for (int s : steps) {
        auto e = unit(dim, static_cast<std::size_t>(s), 2.0);
        if (noise > 0)
            for (auto& x : e) x += g(rng);
        v.clip_embeddings.push_back(e);
        v.step_labels.push_back(s);
    }
    return v;
}

std::vector<std::size_t> all(const CorpusBundle& b) {
    std::vector<std::size_t> v(b.videos.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
    return v;
}

} // namespace

TEST_CASE("forecast inputs") {
    std::mt19937_64 rng(1);
    const auto v = video("v", 0, {0, 1, 2, 3, 4}, 8, 0.0, rng);

    SUBCASE("minimal history") {
        const auto f = build_forecast_input(v, 2);
        REQUIRE(f.clips.size() == 2);
        CHECK(f.clips[0] == v.clip_embeddings[0]);
        CHECK(f.clips[1] == Embedding(8, 0.0));
        CHECK(f.masked == std::vector<std::uint8_t>{0, 1});
        CHECK(f.target_step == 1);
    }
    SUBCASE("full history") {
        const auto f = build_forecast_input(v, 5);
        REQUIRE(f.clips.size() == 5);
        for (std::size_t c = 0; c < 4; ++c) CHECK(f.clips[c] == v.clip_embeddings[c]);
        CHECK(f.masked.back() == 1);
        CHECK(f.target_step == 4);
    }
    SUBCASE("no history is rejected") {
        CHECK_THROWS_AS(build_forecast_input(v, 1), ValidationError);
        CHECK_THROWS_AS(build_forecast_input(v, 6), ValidationError);
    }
    SUBCASE("the target clip never leaks") {
        for (std::size_t i = 2; i <= 5; ++i) {
            for (bool bi : {false, true}) {
                const auto f = build_forecast_input(v, i, bi);
                CHECK(f.clips.size() == (bi ? 5u : i));
                for (const auto& c : f.clips) CHECK(c != v.clip_embeddings[i - 1]);
            }
        }
    }
}

TEST_CASE("zero epochs leave the model untouched") {
    std::mt19937_64 rng(2);
    auto b = bundle(8, 4, {{0, 1}, {2, 3}});
    for (int i = 0; i < 10; ++i) b.videos.push_back(video("v" + std::to_string(i), i % 2, {2 * (i % 2), 2 * (i % 2) + 1}, 8, 0.3, rng));
    auto m = make_downstream_model(nullptr, small_arch(8), b, DownstreamTask::task_recognition, 5);
    const auto before = evaluate(m, b, all(b));
    const auto params = m.params;
    FinetuneConfig fc;
    fc.epochs = 0;
    finetune(m, b, all(b), fc);
    CHECK(m.params == params);
    CHECK(to_json(evaluate(m, b, all(b))).dump() == to_json(before).dump());
}

TEST_CASE("fine-tuning is deterministic per seed") {
    std::mt19937_64 rng(3);
    auto b = bundle(8, 4, {{0, 1, 2, 3}});
    for (int i = 0; i < 8; ++i) b.videos.push_back(video("v" + std::to_string(i), 0, {0, 1, 2, 3}, 8, 0.5, rng));
    for (auto task : {DownstreamTask::step_recognition, DownstreamTask::step_forecasting}) {
        FinetuneConfig fc;
        fc.task = task;
        fc.epochs = 3;
        fc.batch_size = 4;
        fc.seed = 7;
        fc.forecast_positions = 1;
        auto a = make_downstream_model(nullptr, small_arch(8), b, task, 1);
        auto c = make_downstream_model(nullptr, small_arch(8), b, task, 1);
        finetune(a, b, all(b), fc);
        finetune(c, b, all(b), fc);
        CHECK(a.params == c.params);
        CHECK(to_json(evaluate(a, b, all(b))).dump() == to_json(evaluate(c, b, all(b))).dump());
    }
}

TEST_CASE("task recognition accuracy") {
    std::mt19937_64 rng(4);

    SUBCASE("a single class is always right") {
        auto b = bundle(8, 2, {{0, 1}});
        for (int i = 0; i < 5; ++i) b.videos.push_back(video("v" + std::to_string(i), 0, {0, 1}, 8, 1.0, rng));
        const auto m = make_downstream_model(nullptr, small_arch(8), b, DownstreamTask::task_recognition, 9);
        CHECK(evaluate(m, b, all(b)).accuracy == 100.0);
    }
    SUBCASE("hand-counted three videos") {
        auto b = bundle(8, 3, {{0}, {1}, {2}});
        b.videos.push_back(video("a", 1, {0}, 8, 0.0, rng));
        b.videos.push_back(video("b", 1, {1}, 8, 0.0, rng));
        b.videos.push_back(video("c", 2, {2}, 8, 0.0, rng));
        auto m = make_downstream_model(nullptr, small_arch(8), b, DownstreamTask::task_recognition, 9);
        auto& head = m.params.path_heads[0];
        head.w2.zero();
        head.b2.data = {0.0, 1.0, 0.5}; // every video predicts task 1
        const auto r = evaluate(m, b, all(b));
        CHECK(r.n == 3);
        CHECK(r.correct == 2);
        CHECK(r.accuracy == doctest::Approx(200.0 / 3.0));
        CHECK(r.per_class.at(1).correct == 2);
        CHECK(r.per_class.at(2).correct == 0);
    }
    SUBCASE("a random head on balanced classes sits at chance") {
        auto b = bundle(8, 4, {{0}, {1}, {2}, {3}});
        std::normal_distribution<double> g(0.0, 1.0);
        for (int i = 0; i < 4000; ++i) {
            VideoRecord v;
            v.video_id = "r" + std::to_string(i);
            v.task_id = i % 4;
            Embedding e(8);
            for (auto& x : e) x = g(rng);
            v.clip_embeddings = {e};
            v.step_labels = {0};
            b.videos.push_back(v);
        }
        const auto m = make_downstream_model(nullptr, small_arch(8), b, DownstreamTask::task_recognition, 11);
        CHECK(std::abs(evaluate(m, b, all(b)).accuracy - 25.0) < 3.0);
    }
}

TEST_CASE("step recognition") {
    std::mt19937_64 rng(5);
    auto b = bundle(8, 6, {{0, 1, 2}, {3, 4, 5}});
    for (int i = 0; i < 24; ++i) {
        const int t = i % 2;
        b.videos.push_back(video("v" + std::to_string(i), t, {3 * t, 3 * t + 1, 3 * t + 2, 3 * t + 1}, 8, 0.2, rng));
    }

    SUBCASE("overfits planted labels") {
        auto m = make_downstream_model(nullptr, small_arch(8), b, DownstreamTask::step_recognition, 1);
        FinetuneConfig fc;
        fc.task = DownstreamTask::step_recognition;
        fc.epochs = 60;
        fc.batch_size = 4;
        fc.adam.lr = 3e-3;
        finetune(m, b, all(b), fc);
        CHECK(evaluate(m, b, all(b)).accuracy >= 95.0);
    }
    SUBCASE("video order does not matter") {
        const auto m = make_downstream_model(nullptr, small_arch(8), b, DownstreamTask::step_recognition, 2);
        auto idx = all(b);
        const auto r1 = evaluate(m, b, idx);
        std::reverse(idx.begin(), idx.end());
        std::shuffle(idx.begin(), idx.end(), std::mt19937_64(8));
        const auto r2 = evaluate(m, b, idx);
        CHECK(r1.accuracy == r2.accuracy);
        CHECK(r1.correct == r2.correct);
    }
    SUBCASE("background clips are not scored") {
        b.videos[0].step_labels[1] = -1;
        const auto m = make_downstream_model(nullptr, small_arch(8), b, DownstreamTask::step_recognition, 2);
        CHECK(evaluate(m, b, all(b)).n == 24 * 4 - 1);
    }
}

TEST_CASE("step forecasting") {
    std::mt19937_64 rng(6);

    SUBCASE("copying the previous step scores zero when steps always change") {
        auto b = bundle(8, 6, {{0, 1, 2, 3, 4, 5}});
        for (int i = 0; i < 10; ++i) {
            std::vector<int> s;
            for (int k = 0; k < 6; ++k) s.push_back((i + k) % 6);
            b.videos.push_back(video("v" + std::to_string(i), 0, s, 8, 0.1, rng));
        }
        std::size_t n = 0;
        std::size_t hit = 0;
        for (const auto& v : b.videos) {
            for (std::size_t i = 2; i <= v.size(); ++i) {
                const auto f = build_forecast_input(v, i);
                const auto& prev = f.clips[i - 2];
                const int guess = static_cast<int>(std::max_element(prev.begin(), prev.end()) - prev.begin());
                ++n;
                if (guess == f.target_step) ++hit;
            }
        }
        CHECK(n == 50);
        CHECK(hit == 0);
    }
    SUBCASE("a planted Markov chain is learnable") {
        auto b = bundle(8, 6, {{0, 1, 2, 3, 4, 5}});
        std::uniform_int_distribution<int> start(0, 5);
        for (int i = 0; i < 60; ++i) {
            const int s0 = start(rng);
            b.videos.push_back(video("v" + std::to_string(i), 0, {s0, (s0 + 1) % 6, (s0 + 2) % 6}, 8, 0.2, rng));
        }
        const auto split = split_videos(b.videos.size(), 0.3, 1);
        auto m = make_downstream_model(nullptr, small_arch(8), b, DownstreamTask::step_forecasting, 1);
        FinetuneConfig fc;
        fc.task = DownstreamTask::step_forecasting;
        fc.epochs = 60;
        fc.batch_size = 8;
        fc.adam.lr = 3e-3;
        fc.forecast_positions = 0;
        finetune(m, b, split.train, fc);
        const double chance = 100.0 / 6.0;
        CHECK(evaluate(m, b, split.test).accuracy > chance + 20.0);
    }
}

TEST_CASE("downstream errors") {
    std::mt19937_64 rng(7);
    auto b = bundle(8, 2, {{0, 1}});
    b.videos.push_back(video("v", 0, {0, 1}, 8, 0.0, rng));

    CHECK_THROWS_WITH_AS(make_downstream_model(nullptr, small_arch(16), b, DownstreamTask::task_recognition, 1),
                         doctest::Contains("dimension"), ValidationError);
    auto m = make_downstream_model(nullptr, small_arch(8), b, DownstreamTask::task_recognition, 1);
    FinetuneConfig fc;
    fc.task = DownstreamTask::step_recognition;
    CHECK_THROWS_AS(finetune(m, b, all(b), fc), ValidationError);
    CHECK_THROWS_AS(eval_step_forecasting(m, b, all(b)), ValidationError);
    CHECK_THROWS_AS(parse_task("xx"), ValidationError);

    b.videos[0].task_id = -1;
    CHECK_THROWS_WITH_AS(evaluate(m, b, all(b)), doctest::Contains("video v"), ValidationError);
}

TEST_CASE("fine-tuning never touches the pre-trained checkpoint") {
    std::mt19937_64 rng(8);
    auto b = bundle(8, 4, {{0, 1}, {2, 3}});
    for (int i = 0; i < 6; ++i) b.videos.push_back(video("v" + std::to_string(i), i % 2, {2 * (i % 2), 2 * (i % 2) + 1}, 8, 0.3, rng));

    auto arch = small_arch(8);
    arch.num_steps = 4;
    arch.path_sizes = {2};
    auto p = init_params(arch, 3);
    p.round_to_float32();
    const auto path = std::filesystem::temp_directory_path() / "pivot_downstream_ckpt.pivt";
    save_checkpoint(path, Checkpoint{arch, p, std::nullopt});
    const auto read = [&] {
        std::ifstream in(path, std::ios::binary);
        std::ostringstream s;
        s << in.rdbuf();
        return s.str();
    };
    const std::string before = read();

    const auto ck = load_checkpoint(path);
    auto m = make_downstream_model(&ck, ck.config, b, DownstreamTask::task_recognition, 1);
    CHECK(m.params.layer1 == ck.params.layer1);
    FinetuneConfig fc;
    fc.epochs = 2;
    finetune(m, b, all(b), fc);
    CHECK(m.params.layer1 != ck.params.layer1);
    CHECK(read() == before);
    CHECK(load_checkpoint(path).params == p);
}

TEST_CASE("video split") {
    const auto s = split_videos(20, 0.3, 4);
    CHECK(s.test.size() == 6);
    CHECK(s.train.size() == 14);
    std::vector<std::size_t> both = s.train;
    both.insert(both.end(), s.test.begin(), s.test.end());
    std::sort(both.begin(), both.end());
    for (std::size_t i = 0; i < 20; ++i) CHECK(both[i] == i);
    CHECK(split_videos(20, 0.3, 4).test == s.test);
    CHECK(split_videos(2, 0.01, 4).test.size() == 1);
}
