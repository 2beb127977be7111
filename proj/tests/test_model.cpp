#include <doctest.h>

#include "pivot/model.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace pivot;

namespace {

ModelConfig small_config(Pooling pooling) {
    ModelConfig c;
    c.dim = 16;
    c.heads = 4;
    c.ff_dim = 32;
    c.head_hidden = 8;
    c.num_steps = 5;
    c.path_sizes = {3, 4};
    c.pooling = pooling;
    c.dropout = 0.0;
    return c;
}

std::vector<Embedding> random_clips(std::size_t n, std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> g(0.0, 0.25);
    std::vector<Embedding> out(n, Embedding(d));
    for (auto& e : out)
        for (auto& x : e) x = g(rng);
    return out;
}

SequenceExample example(std::vector<Embedding>&&, std::vector<int> = {}) = delete;  // spans would dangle

SequenceExample example(const std::vector<Embedding>& clips, std::vector<int> path = {0, 1}) {
    SequenceExample e;
    for (const auto& c : clips) {
        e.clips.emplace_back(c);
        e.step_labels.push_back({0});
    }
    e.path_targets = std::move(path);
    return e;
}

std::vector<double> row_of(const Matrix& m, std::size_t r) {
    return {m.row(r).begin(), m.row(r).end()};
}

} // namespace

TEST_CASE("encoder output shape for a single clip") {
    const auto c = small_config(Pooling::mean);
    const auto p = init_params(c, 1);
    const auto clips = random_clips(1, 16, 2);
    const std::vector<SequenceExample> ex{example(clips)};
    const Matrix h = encoder_forward(p, c, make_batch(ex, c));
    CHECK(h.rows == 1);
    CHECK(h.cols == 16);
    for (double x : h.data) CHECK(std::isfinite(x));
}

TEST_CASE("attention is permutation equivariant without positional encodings") {
    auto c = small_config(Pooling::mean);
    c.positional_encoding = false;
    const auto p = init_params(c, 3);
    auto clips = random_clips(3, 16, 4);
    const std::vector<SequenceExample> a{example(clips)};
    const Matrix ha = encoder_forward(p, c, make_batch(a, c));
    std::swap(clips[0], clips[2]);
    const std::vector<SequenceExample> b{example(clips)};
    const Matrix hb = encoder_forward(p, c, make_batch(b, c));
    for (std::size_t j = 0; j < 16; ++j) {
        CHECK(ha(0, j) == doctest::Approx(hb(2, j)).epsilon(1e-12));
        CHECK(ha(1, j) == doctest::Approx(hb(1, j)).epsilon(1e-12));
        CHECK(ha(2, j) == doctest::Approx(hb(0, j)).epsilon(1e-12));
    }
}

TEST_CASE("padding does not change valid outputs") {
    for (auto pooling : {Pooling::mean, Pooling::tfenc}) {
        const auto c = small_config(pooling);
        const auto p = init_params(c, 5);
        const auto short_clips = random_clips(2, 16, 6);
        const auto long_clips = random_clips(7, 16, 7);
        const std::vector<SequenceExample> alone{example(short_clips)};
        const std::vector<SequenceExample> padded{example(short_clips), example(long_clips)};
        const Batch b1 = make_batch(alone, c);
        const Batch b2 = make_batch(padded, c);
        CHECK(b2.max_len == 7);
        const Matrix h1 = encoder_forward(p, c, b1);
        const Matrix h2 = encoder_forward(p, c, b2);
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 16; ++j) CHECK(std::abs(h1(i, j) - h2(i, j)) < 1e-6);
        for (std::size_t i = 2; i < 7; ++i)
            for (std::size_t j = 0; j < 16; ++j) CHECK(h2(i, j) == 0.0);
        const Matrix v1 = pool_video(p, c, b1);
        const Matrix v2 = pool_video(p, c, b2);
        for (std::size_t j = 0; j < 16; ++j) CHECK(std::abs(v1(0, j) - v2(0, j)) < 1e-6);
    }
}

TEST_CASE("mean pooling") {
    auto c = small_config(Pooling::mean);
    c.positional_encoding = false;
    const auto p = init_params(c, 8);

    SUBCASE("constant positions pool to that value") {
        const auto u = random_clips(1, 16, 9)[0];
        const std::vector<Embedding> clips{u, u, u, u};
        const std::vector<SequenceExample> ex{example(clips)};
        const Batch b = make_batch(ex, c);
        const Matrix h = encoder_forward(p, c, b);
        const Matrix v = pool_video(p, c, b);
        for (std::size_t j = 0; j < 16; ++j) CHECK(v(0, j) == doctest::Approx(h(0, j)).epsilon(1e-12));
    }
    SUBCASE("two valid and two padded positions") {
        c.positional_encoding = true;
        const auto c2 = random_clips(2, 16, 10);
        const auto c4 = random_clips(4, 16, 11);
        const std::vector<SequenceExample> ex{example(c2), example(c4)};
        const Batch b = make_batch(ex, c);
        const Matrix h = encoder_forward(p, c, b);
        const Matrix v = pool_video(p, c, b);
        for (std::size_t j = 0; j < 16; ++j) CHECK(v(0, j) == doctest::Approx((h(0, j) + h(1, j)) / 2).epsilon(1e-12));
    }
}

TEST_CASE("tfenc pooling reads the first position only") {
    const auto c = small_config(Pooling::tfenc);
    const auto p = init_params(c, 12);
    auto clips = random_clips(3, 16, 13);
    const std::vector<SequenceExample> ex{example(clips)};
    const Batch b = make_batch(ex, c);
    const auto f = forward(p, c, b);
    CHECK(f.pooled.rows == 1);
    CHECK(row_of(f.pooled, 0) == row_of(pool_video(p, c, b), 0));
    // The second layer attends over the whole video, so later clips still matter.
    clips[2][0] += 1.0;
    const std::vector<SequenceExample> ex2{example(clips)};
    CHECK(row_of(pool_video(p, c, make_batch(ex2, c)), 0) != row_of(f.pooled, 0));
}

TEST_CASE("loss identities") {
    auto c = small_config(Pooling::mean);
    c.path_sizes = {17, 4};
    const auto p = init_params(c, 14);
    const auto clips = random_clips(1, 16, 15);
    const std::vector<SequenceExample> ex{example(clips, {3, 2})};
    const Batch b = make_batch(ex, c);
    auto f = forward(p, c, b);

    SUBCASE("uniform 17-way root") {
        f.path_logits[0].zero();
        f.path_logits[1].zero();
        f.step_logits = Matrix();
        const auto L = pretrain_losses(f, b);
        CHECK(L.path == doctest::Approx(std::log(17.0) + std::log(4.0)).epsilon(1e-14));
        auto g = f;
        g.path_logits.pop_back();
        CHECK(pretrain_losses(g, b).path == doctest::Approx(2.8332133440562162).epsilon(1e-12));
    }
    SUBCASE("saturated path logits") {
        for (auto& m : f.path_logits) m.zero();
        f.path_logits[0](0, 3) = 30.0;
        f.path_logits[1](0, 2) = 30.0;
        f.step_logits = Matrix();
        CHECK(pretrain_losses(f, b).path < 2e-9);
    }
    SUBCASE("zero step logits") {
        f.step_logits.zero();
        f.path_logits.clear();
        CHECK(pretrain_losses(f, b).step == doctest::Approx(5 * std::log(2.0)).epsilon(1e-14));
    }
    SUBCASE("joint is the exact sum") {
        const auto L = pretrain_losses(f, b);
        CHECK(L.joint == L.step + L.path);
    }
}

TEST_CASE("a level with no targets gets exactly zero gradient") {
    const auto c = small_config(Pooling::tfenc);
    const auto p = init_params(c, 16);
    const auto c3 = random_clips(3, 16, 17);
    const auto c2 = random_clips(2, 16, 18);
    const std::vector<SequenceExample> ex{example(c3, {1, -1}), example(c2, {2, -1})};
    const auto out = pretrain_loss_and_grad(p, c, make_batch(ex, c));
    for (const Matrix* m : {&out.grads.path_heads[1].w1, &out.grads.path_heads[1].b1, &out.grads.path_heads[1].w2,
                            &out.grads.path_heads[1].b2})
        for (double x : m->data) CHECK(x == 0.0);
    double any = 0;
    for (double x : out.grads.path_heads[0].w2.data) any += std::abs(x);
    CHECK(any > 0);
}

TEST_CASE("adam") {
    SUBCASE("zero gradient and zero decay is a fixed point") {
        const auto c = small_config(Pooling::mean);
        auto p = init_params(c, 19);
        const auto before = p;
        auto state = AdamState::for_params(p);
        AdamConfig cfg;
        cfg.weight_decay = 0.0;
        adam_step(p, p.zeros_like(), state, cfg);
        CHECK(p == before);
    }
    SUBCASE("scalar trace matches the closed form") {
        ModelParams p;
        p.layer1.ln1_g = Matrix(1, 1, 0.5);
        ModelParams g;
        g.layer1.ln1_g = Matrix(1, 1, 1.0);
        auto state = AdamState::for_params(p);
        AdamConfig cfg;
        cfg.weight_decay = 0.0;
        adam_step(p, g, state, cfg);
        CHECK(std::abs(0.5 - p.layer1.ln1_g(0, 0)) == doctest::Approx(1e-4).epsilon(1e-6));

        // Several steps with varying gradients and coupled decay against a scalar recurrence.
        ModelParams q;
        q.layer1.ln1_g = Matrix(1, 1, 0.3);
        auto st = AdamState::for_params(q);
        AdamConfig dc;
        double x = 0.3, m = 0, v = 0;
        for (int t = 1; t <= 5; ++t) {
            const double grad = std::sin(t) + 0.1 * t;
            ModelParams gq;
            gq.layer1.ln1_g = Matrix(1, 1, grad);
            adam_step(q, gq, st, dc);
            const double gd = grad + dc.weight_decay * x;
            m = dc.beta1 * m + (1 - dc.beta1) * gd;
            v = dc.beta2 * v + (1 - dc.beta2) * gd * gd;
            const double mh = m / (1 - std::pow(dc.beta1, t));
            const double vh = v / (1 - std::pow(dc.beta2, t));
            x -= dc.lr * mh / (std::sqrt(vh) + dc.eps);
            CHECK(q.layer1.ln1_g(0, 0) == doctest::Approx(x).epsilon(1e-12));
        }
    }
    SUBCASE("non-finite gradients are reported by block") {
        const auto c = small_config(Pooling::mean);
        auto p = init_params(c, 20);
        auto g = p.zeros_like();
        g.layer1.wq(0, 0) = NAN;
        auto state = AdamState::for_params(p);
        CHECK_THROWS_WITH_AS(adam_step(p, g, state, {}), doctest::Contains("layer1.wq"), NumericError);
    }
}

TEST_CASE("gradient check") {
    for (auto pooling : {Pooling::mean, Pooling::tfenc}) {
        CAPTURE(to_string(pooling));
        const auto r = grad_check(tiny_model_config(pooling), 1);
        CHECK(r.max_rel_error < 1e-4);
        CHECK(r.checked > 1000);
        CHECK(r.skipped_kinks * 20 < r.checked);
    }
}

TEST_CASE("gradient check across seeds at a finer step") {
    GradCheckOptions o;
    o.epsilon = 1e-4;
    for (auto pooling : {Pooling::mean, Pooling::tfenc})
        for (std::uint64_t seed = 1; seed <= 10; ++seed) {
            CAPTURE(seed);
            CHECK(grad_check(tiny_model_config(pooling), seed, o).max_rel_error < 1e-5);
        }
    auto cls = tiny_model_config(Pooling::tfenc);
    cls.cls_token = true;
    CHECK(grad_check(cls, 1, o).max_rel_error < 1e-4);
}

TEST_CASE("a corrupted gradient is caught") {
    GradCheckOptions o;
    o.tamper = [](ModelParams& g) { g.layer1.wv(0, 0) += 0.05; };
    const auto r = grad_check(tiny_model_config(Pooling::mean), 1, o);
    CHECK(r.max_rel_error > 1e-2);
    CHECK(r.worst_block == "layer1.wv");
}

TEST_CASE("config and batch validation") {
    auto c = small_config(Pooling::mean);
    c.cls_token = true;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = small_config(Pooling::mean);
    c.heads = 3;
    CHECK_THROWS_AS(c.validate(), ValidationError);

    c = small_config(Pooling::mean);
    c.max_seq_len = 2;
    const auto clips = random_clips(3, 16, 21);
    const std::vector<SequenceExample> ex{example(clips)};
    CHECK_THROWS_WITH_AS(make_batch(ex, c), doctest::Contains("trunc"), ValidationError);

    const auto back = model_config_from_json(to_json(small_config(Pooling::tfenc)));
    CHECK(back == small_config(Pooling::tfenc));
}

TEST_CASE("checkpoint round trip") {
    auto c = small_config(Pooling::tfenc);
    c.cls_token = true;
    auto p = init_params(c, 22);
    p.round_to_float32();
    auto state = AdamState::for_params(p);
    const auto train_clips = random_clips(3, 16, 23);
    const auto out = pretrain_loss_and_grad(p, c, make_batch(std::vector<SequenceExample>{example(train_clips)}, c));
    adam_step(p, out.grads, state, {});
    p.round_to_float32();
    state.m.round_to_float32();
    state.v.round_to_float32();

    const auto path = std::filesystem::temp_directory_path() / "pivot_ckpt_test.pivt";
    save_checkpoint(path, Checkpoint{c, p, state});
    const auto back = load_checkpoint(path);
    CHECK(back.config == c);
    CHECK(back.params == p);
    REQUIRE(back.adam.has_value());
    CHECK(back.adam->step == 1);
    CHECK(back.adam->m == state.m);

    const auto eval_clips = random_clips(4, 16, 24);
    const Batch b = make_batch(std::vector<SequenceExample>{example(eval_clips)}, c);
    CHECK(forward(back.params, c, b).path_logits[0] == forward(p, c, b).path_logits[0]);

    std::string bytes;
    {
        std::ifstream in(path, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    bytes[bytes.size() / 2] ^= 0x10;
    {
        std::ofstream o(path, std::ios::binary | std::ios::trunc);
        o.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    std::filesystem::remove(path);
    CHECK_THROWS(load_checkpoint(path));
}
