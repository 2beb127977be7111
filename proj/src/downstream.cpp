#include "pivot/downstream.hpp"

#include "pivot/fileio.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pivot {

using nlohmann::json;

std::string to_string(DownstreamTask t) {
    switch (t) {
    case DownstreamTask::task_recognition: return "tr";
    case DownstreamTask::step_recognition: return "sr";
    case DownstreamTask::step_forecasting: return "sf";
    }
    return "?";
}

DownstreamTask parse_task(std::string_view s) {
    if (s == "tr") return DownstreamTask::task_recognition;
    if (s == "sr") return DownstreamTask::step_recognition;
    if (s == "sf") return DownstreamTask::step_forecasting;
    throw ValidationError("unknown downstream task '" + std::string(s) + "' (expected tr, sr or sf)");
}

void FinetuneConfig::validate() const {
    if (batch_size < 1) throw ValidationError("finetune config: batch_size must be at least 1");
    if (epochs < 0) throw ValidationError("finetune config: epochs must be non-negative");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ValidationError("finetune config: test_fraction must be in (0, 1)");
}

json to_json(const FinetuneConfig& c) {
    return {{"task", to_string(c.task)},     {"batch_size", c.batch_size}, {"epochs", c.epochs},
            {"lr", c.adam.lr},               {"weight_decay", c.adam.weight_decay},
            {"seed", c.seed},                {"test_fraction", c.test_fraction},
            {"bidirectional_forecast", c.bidirectional_forecast},
            {"forecast_positions", c.forecast_positions}};
}

VideoSplit split_videos(std::size_t videos, double test_fraction, std::uint64_t seed) {
    std::vector<std::size_t> idx(videos);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(seed, std::string_view("downstream-split")));
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(videos)));
    if (videos >= 2) n_test = std::clamp<std::size_t>(n_test, 1, videos - 1);
    VideoSplit s;
    s.test.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(n_test, videos)));
    s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(std::min(n_test, videos)), idx.end());
    std::sort(s.test.begin(), s.test.end());
    std::sort(s.train.begin(), s.train.end());
    return s;
}

int task_class(const CorpusBundle& corpus, int task_id) {
    for (std::size_t i = 0; i < corpus.tasks.size(); ++i)
        if (corpus.tasks[i].task_id == task_id) return static_cast<int>(i);
    throw ValidationError("task " + std::to_string(task_id) + " not in the corpus catalog");
}

int step_class(const CorpusBundle& corpus, int step_id) {
    for (std::size_t i = 0; i < corpus.steps.size(); ++i)
        if (corpus.steps[i].step_id == step_id) return static_cast<int>(i);
    throw ValidationError("step " + std::to_string(step_id) + " not in the corpus catalog");
}

TunedModel make_downstream_model(const Checkpoint* pretrained, const ModelConfig& arch, const CorpusBundle& corpus,
                                 DownstreamTask task, std::uint64_t seed) {
    TunedModel m;
    m.task = task;
    m.config = pretrained ? pretrained->config : arch;
    if (m.config.dim != corpus.dim) {
        throw ValidationError("model dimension " + std::to_string(m.config.dim) + " does not match corpus dimension " +
                              std::to_string(corpus.dim));
    }
    m.config.purpose = to_string(task);
    m.config.num_steps = 0;
    m.config.path_sizes.clear();
    m.config.mask_token = false;
    switch (task) {
    case DownstreamTask::task_recognition:
        if (corpus.tasks.empty()) throw ValidationError("task recognition needs a non-empty task catalog");
        m.config.path_sizes = {corpus.tasks.size()};
        break;
    case DownstreamTask::step_forecasting:
        m.config.mask_token = true;
        [[fallthrough]];
    case DownstreamTask::step_recognition:
        if (corpus.steps.empty()) throw ValidationError("step tasks need a non-empty step catalog");
        m.config.num_steps = corpus.steps.size();
        break;
    }
    m.config.validate();

    m.params = init_params(m.config, derive_seed(seed, std::string_view("downstream-init")));
    if (pretrained) {
        m.params.layer1 = pretrained->params.layer1;
        if (m.config.pooling == Pooling::tfenc) m.params.layer2 = pretrained->params.layer2;
        if (pretrained->params.cls) m.params.cls = pretrained->params.cls;
    }
    m.params.round_to_float32();
    return m;
}

ForecastInput build_forecast_input(const VideoRecord& video, std::size_t i, bool bidirectional) {
    if (i < 2) throw ValidationError("forecast position must be at least 2 (1-indexed); position 1 has no history");
    if (i > video.size()) {
        throw ValidationError("forecast position " + std::to_string(i) + " beyond video " + video.video_id +
                              " of length " + std::to_string(video.size()));
    }
    ForecastInput f;
    const std::size_t end = bidirectional ? video.size() : i;
    for (std::size_t c = 0; c < end; ++c) {
        if (c + 1 == i) {
            f.clips.emplace_back(video.clip_embeddings[c].size(), 0.0);
            f.masked.push_back(1);
        } else {
            f.clips.push_back(video.clip_embeddings[c]);
            f.masked.push_back(0);
        }
    }
    f.target_step = video.step_labels.empty() ? -1 : video.step_labels[i - 1];
    return f;
}

namespace {

std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

void require_gold(const CorpusBundle& corpus, std::size_t v, DownstreamTask task) {
    const auto& video = corpus.videos[v];
    if (task == DownstreamTask::task_recognition) {
        if (video.task_id < 0) throw ValidationError("video " + video.video_id + " has no gold task label");
    } else if (video.step_labels.size() != video.size()) {
        throw ValidationError("video " + video.video_id + " has no gold step labels");
    }
}

// Owns the sequences a batch of examples points into.
struct ExampleSet {
    std::vector<ForecastInput> forecast;
    std::vector<SequenceExample> examples;
    std::vector<int> gold; // per video for TR, per masked/valid position otherwise
};

SequenceExample video_example(const VideoRecord& video, std::size_t max_len) {
    SequenceExample e;
    const std::size_t len = std::min(video.size(), max_len);
    for (std::size_t c = 0; c < len; ++c) e.clips.emplace_back(video.clip_embeddings[c]);
    return e;
}

void add_tr(ExampleSet& s, const TunedModel& m, const CorpusBundle& corpus, std::size_t v) {
    require_gold(corpus, v, m.task);
    auto e = video_example(corpus.videos[v], m.config.max_seq_len);
    e.path_targets = {task_class(corpus, corpus.videos[v].task_id)};
    s.examples.push_back(std::move(e));
}

void add_sr(ExampleSet& s, const TunedModel& m, const CorpusBundle& corpus, std::size_t v) {
    require_gold(corpus, v, m.task);
    const auto& video = corpus.videos[v];
    auto e = video_example(video, m.config.max_seq_len);
    for (std::size_t c = 0; c < e.clips.size(); ++c)
        e.step_class.push_back(video.step_labels[c] < 0 ? -1 : step_class(corpus, video.step_labels[c]));
    s.examples.push_back(std::move(e));
}

// Forecast inputs are stored first; spans are taken once the vector is final.
void finish_forecast(ExampleSet& s, const CorpusBundle& corpus, std::size_t max_len) {
    for (const auto& f : s.forecast) {
        SequenceExample e;
        const std::size_t len = std::min(f.clips.size(), max_len);
        for (std::size_t c = 0; c < len; ++c) {
            e.clips.emplace_back(f.clips[c]);
            e.masked.push_back(f.masked[c]);
            e.step_class.push_back(f.masked[c] ? step_class(corpus, f.target_step) : -1);
        }
        s.examples.push_back(std::move(e));
    }
}

template <typename F>
void for_batches(const ExampleSet& s, std::size_t batch, F&& f) {
    for (std::size_t start = 0; start < s.examples.size(); start += batch) {
        const std::size_t end = std::min(s.examples.size(), start + batch);
        f(std::span<const SequenceExample>(s.examples.data() + start, end - start));
    }
}

} // namespace

void finetune(TunedModel& model, const CorpusBundle& corpus, std::span<const std::size_t> train_videos,
              const FinetuneConfig& config, const std::function<void(int, const TunedModel&)>& on_epoch) {
    config.validate();
    if (config.task != model.task) throw ValidationError("finetune: config task does not match the model heads");
    if (train_videos.empty()) throw ValidationError("finetune: no training videos");
    AdamState adam = AdamState::for_params(model.params);
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto ep = static_cast<std::uint64_t>(epoch);
        std::vector<std::size_t> order(train_videos.begin(), train_videos.end());
        Rng rng(derive_seed(config.seed, std::uint64_t{0xF7}, ep));
        std::shuffle(order.begin(), order.end(), rng);

        ExampleSet set;
        for (auto v : order) {
            switch (model.task) {
            case DownstreamTask::task_recognition: add_tr(set, model, corpus, v); break;
            case DownstreamTask::step_recognition: add_sr(set, model, corpus, v); break;
            case DownstreamTask::step_forecasting: {
                require_gold(corpus, v, model.task);
                const auto& video = corpus.videos[v];
                std::vector<std::size_t> candidates;
                for (std::size_t i = 2; i <= std::min(video.size(), model.config.max_seq_len); ++i)
                    if (video.step_labels[i - 1] >= 0) candidates.push_back(i);
                if (candidates.empty()) break;
                std::shuffle(candidates.begin(), candidates.end(), rng);
                if (config.forecast_positions > 0 && candidates.size() > config.forecast_positions)
                    candidates.resize(config.forecast_positions);
                for (auto i : candidates)
                    set.forecast.push_back(build_forecast_input(video, i, config.bidirectional_forecast));
                break;
            }
            }
        }
        if (model.task == DownstreamTask::step_forecasting) finish_forecast(set, corpus, model.config.max_seq_len);

        std::uint64_t batch_index = 0;
        for_batches(set, config.batch_size, [&](std::span<const SequenceExample> ex) {
            const Batch b = make_batch(ex, model.config);
            Rng drop(derive_seed(config.seed, std::uint64_t{0xD1}, ep, batch_index++));
            const auto f = forward(model.params, model.config, b, &drop);
            LossGradients dl;
            const auto L = classification_losses(f, b, &dl);
            if (!std::isfinite(L.joint)) {
                throw NumericError("finetune: non-finite loss at epoch " + std::to_string(epoch));
            }
            const auto g = backward(model.params, model.config, b, f, dl);
            adam_step(model.params, g, adam, config.adam);
            model.params.round_to_float32();
        });
        if (on_epoch) on_epoch(epoch, model);
    }
}

namespace {

void tally(EvalReport& r, int label, bool hit) {
    auto& c = r.per_class[label];
    ++c.n;
    ++r.n;
    if (hit) {
        ++c.correct;
        ++r.correct;
    }
}

void finalize(EvalReport& r) {
    if (r.n == 0) throw ValidationError("evaluation: no labelled samples");
    r.accuracy = 100.0 * static_cast<double>(r.correct) / static_cast<double>(r.n);
}

constexpr std::size_t kEvalBatch = 64;

} // namespace

EvalReport eval_task_recognition(const TunedModel& model, const CorpusBundle& corpus, std::span<const std::size_t> videos) {
    if (model.task != DownstreamTask::task_recognition) throw ValidationError("model was not built for task recognition");
    EvalReport r;
    r.task = model.task;
    ExampleSet set;
    for (auto v : videos) add_tr(set, model, corpus, v);
    std::size_t k = 0;
    for_batches(set, kEvalBatch, [&](std::span<const SequenceExample> ex) {
        const auto f = forward(model.params, model.config, make_batch(ex, model.config));
        for (std::size_t b = 0; b < ex.size(); ++b, ++k) {
            const int gold = corpus.videos[videos[k]].task_id;
            const int pred = corpus.tasks[argmax(f.path_logits[0].row(b))].task_id;
            tally(r, gold, pred == gold);
        }
    });
    finalize(r);
    return r;
}

EvalReport eval_step_recognition(const TunedModel& model, const CorpusBundle& corpus, std::span<const std::size_t> videos) {
    if (model.task == DownstreamTask::task_recognition) throw ValidationError("model has no step head");
    EvalReport r;
    r.task = DownstreamTask::step_recognition;
    ExampleSet set;
    for (auto v : videos) add_sr(set, model, corpus, v);
    for_batches(set, kEvalBatch, [&](std::span<const SequenceExample> ex) {
        const Batch b = make_batch(ex, model.config);
        const auto f = forward(model.params, model.config, b);
        for (std::size_t v = 0; v < ex.size(); ++v) {
            for (std::size_t c = 0; c < b.lengths[v]; ++c) {
                const int gold = b.step_class[v * b.max_len + c];
                if (gold < 0) continue;
                const auto pred = argmax(f.step_logits.row(f.packed_row[v * b.max_len + c]));
                tally(r, corpus.steps[static_cast<std::size_t>(gold)].step_id, static_cast<int>(pred) == gold);
            }
        }
    });
    finalize(r);
    return r;
}

EvalReport eval_step_forecasting(const TunedModel& model, const CorpusBundle& corpus, std::span<const std::size_t> videos,
                                 bool bidirectional) {
    if (model.task != DownstreamTask::step_forecasting) throw ValidationError("model was not built for step forecasting");
    EvalReport r;
    r.task = model.task;
    ExampleSet set;
    for (auto v : videos) {
        require_gold(corpus, v, model.task);
        const auto& video = corpus.videos[v];
        for (std::size_t i = 2; i <= std::min(video.size(), model.config.max_seq_len); ++i)
            if (video.step_labels[i - 1] >= 0) set.forecast.push_back(build_forecast_input(video, i, bidirectional));
    }
    finish_forecast(set, corpus, model.config.max_seq_len);
    for_batches(set, kEvalBatch, [&](std::span<const SequenceExample> ex) {
        const Batch b = make_batch(ex, model.config);
        const auto f = forward(model.params, model.config, b);
        for (std::size_t v = 0; v < ex.size(); ++v) {
            for (std::size_t c = 0; c < b.lengths[v]; ++c) {
                const int gold = b.step_class[v * b.max_len + c];
                if (gold < 0) continue;
                const auto pred = argmax(f.step_logits.row(f.packed_row[v * b.max_len + c]));
                tally(r, corpus.steps[static_cast<std::size_t>(gold)].step_id, static_cast<int>(pred) == gold);
            }
        }
    });
    finalize(r);
    return r;
}

EvalReport evaluate(const TunedModel& model, const CorpusBundle& corpus, std::span<const std::size_t> videos,
                    bool bidirectional) {
    switch (model.task) {
    case DownstreamTask::task_recognition: return eval_task_recognition(model, corpus, videos);
    case DownstreamTask::step_recognition: return eval_step_recognition(model, corpus, videos);
    case DownstreamTask::step_forecasting: return eval_step_forecasting(model, corpus, videos, bidirectional);
    }
    throw ValidationError("unknown task");
}

json to_json(const EvalReport& r) {
    json per = json::array();
    for (const auto& [label, c] : r.per_class) per.push_back({{"label", label}, {"n", c.n}, {"correct", c.correct}});
    return {{"task", to_string(r.task)}, {"accuracy", r.accuracy}, {"n", r.n}, {"correct", r.correct}, {"per_class", per}};
}

void save_report(const std::filesystem::path& path, const EvalReport& r) {
    write_file_atomic(path, to_json(r).dump(2) + "\n");
}

} // namespace pivot
