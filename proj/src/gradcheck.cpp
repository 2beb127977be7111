#include "pivot/model.hpp"

#include <algorithm>
#include <cmath>

namespace pivot {

ModelConfig tiny_model_config(Pooling pooling) {
    ModelConfig c;
    c.dim = 8;
    c.heads = 2;
    c.ff_dim = 32;
    c.head_hidden = 8;
    c.pooling = pooling;
    c.num_steps = 5;
    c.path_sizes = {2, 3};
    c.max_seq_len = 3;
    c.dropout = 0.0;
    c.cls_token = false;
    c.mask_token = true;
    c.purpose = "gradcheck";
    return c;
}

namespace {

struct TinyData {
    std::vector<Embedding> clips;
    std::vector<SequenceExample> examples;
};

// Two videos of lengths 3 and 2; one masked position so the mask token is exercised.
TinyData tiny_data(const ModelConfig& c, std::uint64_t seed) {
    Rng rng(derive_seed(seed, std::string_view("gradcheck-data")));
    // Unit expected norm, the scale of corpus embeddings.
    std::normal_distribution<double> g(0.0, 1.0 / std::sqrt(static_cast<double>(c.dim)));
    TinyData t;
    const std::size_t lengths[] = {std::min<std::size_t>(3, c.max_seq_len), 2};
    for (auto len : lengths)
        for (std::size_t i = 0; i < len; ++i) {
            Embedding e(c.dim);
            for (auto& x : e) x = g(rng);
            t.clips.push_back(std::move(e));
        }
    std::size_t next = 0;
    for (std::size_t v = 0; v < 2; ++v) {
        SequenceExample ex;
        for (std::size_t i = 0; i < lengths[v]; ++i) {
            ex.clips.emplace_back(t.clips[next++]);
            ex.masked.push_back(v == 1 && i == 1 ? 1 : 0);
            std::vector<int> labels{static_cast<int>(rng() % c.num_steps)};
            if (rng() % 2) labels.push_back(static_cast<int>((labels[0] + 1) % c.num_steps));
            ex.step_labels.push_back(labels);
        }
        for (auto s : c.path_sizes) ex.path_targets.push_back(static_cast<int>(rng() % s));
        t.examples.push_back(std::move(ex));
    }
    return t;
}

// Perturbs a copy of the params and returns (joint loss, relu signature).
std::pair<double, std::vector<std::uint8_t>> probe(const ModelParams& base, const ModelConfig& c, const Batch& b,
                                                   std::size_t block, std::size_t index, double delta) {
    ModelParams p = base;
    p.blocks()[block].second->data[index] += delta;
    const auto f = forward(p, c, b);
    return {pretrain_losses(f, b).joint, f.relu_signature()};
}

} // namespace

GradCheckReport grad_check(const ModelConfig& config, std::uint64_t seed, const GradCheckOptions& options) {
    ModelConfig c = config;
    c.dropout = 0.0;
    c.validate();
    const ModelParams params = [&] {
        ModelParams p = init_params(c, seed);
        // Nonzero mask/cls/bias values so no block sits at a symmetric point.
        Rng rng(derive_seed(seed, std::string_view("gradcheck-jitter")));
        std::normal_distribution<double> g(0.0, 0.1);
        for (auto& [name, m] : p.blocks())
            for (auto& x : m->data) x += g(rng);
        return p;
    }();
    const TinyData data = tiny_data(c, seed);
    const Batch batch = make_batch(data.examples, c);

    const auto f0 = forward(params, c, batch);
    LossGradients dl;
    pretrain_losses(f0, batch, {}, &dl);
    ModelParams analytic = backward(params, c, batch, f0, dl);
    if (options.tamper) options.tamper(analytic);
    const auto sig0 = f0.relu_signature();

    GradCheckReport report;
    const auto names = params.blocks();
    const auto grads = analytic.blocks();
    for (std::size_t bi = 0; bi < names.size(); ++bi) {
        for (std::size_t k = 0; k < names[bi].second->size(); ++k) {
            const auto [lp, sp] = probe(params, c, batch, bi, k, options.epsilon);
            const auto [lm, sm] = probe(params, c, batch, bi, k, -options.epsilon);
            if (sp != sig0 || sm != sig0) {
                ++report.skipped_kinks;
                continue;
            }
            const double numeric = (lp - lm) / (2.0 * options.epsilon);
            const double a = grads[bi].second->data[k];
            const double denom = std::max({std::abs(a), std::abs(numeric), options.denominator_floor});
            const double err = std::abs(a - numeric) / denom;
            ++report.checked;
            if (err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst_block = names[bi].first;
            }
        }
    }
    return report;
}

} // namespace pivot
