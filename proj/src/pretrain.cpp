#include "pivot/pretrain.hpp"

#include "pivot/fileio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

namespace pivot {

using nlohmann::json;

void TrainConfig::validate() const {
    if (epochs < 1) throw ValidationError("train config: epochs must be at least 1");
    if (batch_size < 1) throw ValidationError("train config: batch_size must be at least 1");
    if (checkpoint_interval < 1) throw ValidationError("train config: checkpoint_interval must be at least 1");
    if (patience < 1) throw ValidationError("train config: patience must be at least 1");
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
        throw ValidationError("train config: holdout_fraction must be in (0, 1)");
    }
    if (!(adam.lr > 0.0)) throw ValidationError("train config: lr must be positive");
    augment.validate();
}

json to_json(const AugmentConfig& c) {
    return {{"threshold", c.threshold_enabled}, {"threshold_value", c.threshold_value}, {"in_task", c.in_task},
            {"sort", c.sort}, {"unique", c.unique}, {"swap", c.swap}, {"swap_prob", c.swap_prob}};
}

json to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"lr", c.adam.lr},
            {"weight_decay", c.adam.weight_decay},
            {"decoupled_decay", c.adam.decoupled},
            {"checkpoint_interval", c.checkpoint_interval},
            {"seed", c.seed},
            {"augment", to_json(c.augment)},
            {"model", to_json(c.model)},
            {"poly_degree", c.poly_degree},
            {"patience", c.patience},
            {"holdout_fraction", c.holdout_fraction},
            {"lambda_path", c.loss_weights.path}};
}

namespace {

template <typename T>
void take(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
    try {
        take(j, "epochs", c.epochs);
        take(j, "batch_size", c.batch_size);
        take(j, "lr", c.adam.lr);
        take(j, "weight_decay", c.adam.weight_decay);
        take(j, "decoupled_decay", c.adam.decoupled);
        take(j, "checkpoint_interval", c.checkpoint_interval);
        take(j, "seed", c.seed);
        take(j, "poly_degree", c.poly_degree);
        take(j, "patience", c.patience);
        take(j, "holdout_fraction", c.holdout_fraction);
        take(j, "lambda_path", c.loss_weights.path);
        if (j.contains("augment")) {
            const auto& a = j.at("augment");
            take(a, "threshold", c.augment.threshold_enabled);
            take(a, "threshold_value", c.augment.threshold_value);
            take(a, "in_task", c.augment.in_task);
            take(a, "sort", c.augment.sort);
            take(a, "unique", c.augment.unique);
            take(a, "swap", c.augment.swap);
            take(a, "swap_prob", c.augment.swap_prob);
        }
        if (j.contains("model")) {
            const auto& m = j.at("model");
            take(m, "dim", c.model.dim);
            take(m, "heads", c.model.heads);
            take(m, "ff_dim", c.model.ff_dim);
            take(m, "head_hidden", c.model.head_hidden);
            if (m.contains("pooling")) c.model.pooling = parse_pooling(m.at("pooling").get<std::string>());
            take(m, "max_seq_len", c.model.max_seq_len);
            take(m, "dropout", c.model.dropout);
            take(m, "positional_encoding", c.model.positional_encoding);
            take(m, "cls_token", c.model.cls_token);
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("train config: ") + e.what());
    }
    return c;
}

std::vector<double> MetricSeries::step_acc() const {
    std::vector<double> out;
    for (const auto& r : records) out.push_back(r.step_acc);
    return out;
}

std::string MetricSeries::to_csv() const {
    std::string out = "epoch,step_acc,loss_step,loss_path,loss_joint\n";
    char line[256];
    for (const auto& r : records) {
        std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.step_acc, r.loss_step, r.loss_path,
                      r.loss_joint);
        out += line;
    }
    return out;
}

MetricSeries read_metrics_csv(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    std::string line;
    if (!std::getline(in, line) || line != "epoch,step_acc,loss_step,loss_path,loss_joint") {
        throw FormatError(path.string() + ": missing or unexpected header");
    }
    MetricSeries s;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        EpochRecord r;
        if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf", &r.epoch, &r.step_acc, &r.loss_step, &r.loss_path,
                        &r.loss_joint) != 5) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected five comma-separated numbers");
        }
        if (r.epoch != static_cast<int>(s.records.size()) + 1) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": epochs must be contiguous from 1");
        }
        s.records.push_back(r);
    }
    if (s.records.empty()) throw FormatError(path.string() + ": no metric rows");
    return s;
}

std::vector<int> path_targets(const CorpusBundle& corpus, const HierarchyPath& path) {
    std::vector<int> out;
    for (std::size_t l = 0; l < path.node_ids.size(); ++l) {
        const auto nodes = corpus.nodes_at_level(static_cast<int>(l + 1));
        const auto it = std::find(nodes.begin(), nodes.end(), path.node_ids[l]);
        if (it == nodes.end()) throw ValidationError("path node " + std::to_string(path.node_ids[l]) + " not at level " + std::to_string(l + 1));
        out.push_back(static_cast<int>(it - nodes.begin()));
    }
    return out;
}

ModelConfig model_config_for(const CorpusBundle& corpus, ModelConfig base) {
    base.dim = corpus.dim;
    base.num_steps = corpus.steps.size();
    base.path_sizes.clear();
    for (int l = 1; l <= corpus.levels(); ++l) base.path_sizes.push_back(corpus.nodes_at_level(l).size());
    base.validate();
    return base;
}

std::vector<std::size_t> holdout_indices(std::size_t videos, double fraction, std::uint64_t seed) {
    std::vector<std::size_t> idx(videos);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(seed, std::string_view("holdout")));
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(fraction * static_cast<double>(videos))));
    idx.resize(std::min(n, videos > 1 ? videos - 1 : std::size_t{0}));
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::string checkpoint_name(int epoch) { return "ckpt_" + std::to_string(epoch) + ".pivt"; }

namespace {

std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// One training sequence after augmentation, ready for batching.
struct Prepared {
    std::size_t video;
    std::vector<std::size_t> clips;
    std::vector<std::vector<int>> targets;
};

} // namespace

HeldoutScore score_heldout(const ModelParams& params, const ModelConfig& config, const CorpusBundle& corpus,
                           std::span<const VideoLabels> labels, std::span<const std::size_t> videos) {
    HeldoutScore s;
    s.path_acc.assign(config.path_sizes.size(), 0.0);
    if (videos.empty()) return s;
    std::size_t clips = 0, clip_hits = 0;
    std::vector<std::size_t> path_hits(config.path_sizes.size(), 0);
    constexpr std::size_t chunk = 64;
    for (std::size_t start = 0; start < videos.size(); start += chunk) {
        const std::size_t end = std::min(videos.size(), start + chunk);
        std::vector<SequenceExample> ex;
        for (std::size_t i = start; i < end; ++i) {
            const auto& v = corpus.videos[videos[i]];
            SequenceExample e;
            const std::size_t len = std::min(v.size(), config.max_seq_len);
            for (std::size_t c = 0; c < len; ++c) e.clips.emplace_back(v.clip_embeddings[c]);
            ex.push_back(std::move(e));
        }
        const Batch b = make_batch(ex, config);
        const auto f = forward(params, config, b);
        for (std::size_t k = 0; k < ex.size(); ++k) {
            const auto& lab = labels[videos[start + k]];
            for (std::size_t c = 0; c < b.lengths[k]; ++c) {
                const std::size_t row = f.packed_row[k * b.max_len + c];
                ++clips;
                if (static_cast<int>(argmax(f.step_logits.row(row))) == lab.labels.per_clip[c].front().step_id) ++clip_hits;
            }
            const auto targets = path_targets(corpus, lab.path);
            for (std::size_t l = 0; l < f.path_logits.size() && l < targets.size(); ++l)
                if (static_cast<int>(argmax(f.path_logits[l].row(k))) == targets[l]) ++path_hits[l];
        }
    }
    s.step_acc = static_cast<double>(clip_hits) / static_cast<double>(clips);
    for (std::size_t l = 0; l < path_hits.size(); ++l)
        s.path_acc[l] = static_cast<double>(path_hits[l]) / static_cast<double>(videos.size());
    return s;
}

PretrainResult pretrain(const CorpusBundle& corpus, std::span<const VideoLabels> labels, const TrainConfig& config,
                        const PretrainOptions& options) {
    config.validate();
    check_labels_match(corpus, labels);
    PretrainResult res;
    res.config = model_config_for(corpus, config.model);
    const ModelConfig& mc = res.config;

    const auto steps = step_embeddings(corpus);
    std::map<int, const TaskSpec*> tasks;
    for (const auto& t : corpus.tasks) tasks[t.task_id] = &t;

    res.holdout = holdout_indices(corpus.videos.size(), config.holdout_fraction, config.seed);
    std::vector<std::size_t> train;
    for (std::size_t i = 0; i < corpus.videos.size(); ++i)
        if (!std::binary_search(res.holdout.begin(), res.holdout.end(), i)) train.push_back(i);

    // Threshold, in-task and sort do not change between epochs.
    std::vector<Selection> cached(corpus.videos.size());
    for (auto v : train) {
        const auto& lab = labels[v];
        const auto it = tasks.find(lab.topic.task_id);
        if (it == tasks.end()) throw ValidationError("pretrain: topic task " + std::to_string(lab.topic.task_id) + " not in corpus");
        const auto dots = top1_dots(corpus.videos[v], lab.labels, steps);
        cached[v] = select_clips(lab.labels, dots, *it->second, config.augment);
    }

    res.params = init_params(mc, derive_seed(config.seed, std::string_view("model")));
    res.params.round_to_float32();
    res.adam = AdamState::for_params(res.params);
    std::vector<std::vector<int>> targets_of(corpus.videos.size());
    for (auto v : train) targets_of[v] = path_targets(corpus, labels[v].path);

    if (options.out_dir) std::filesystem::create_directories(*options.out_dir);
    bool warned = false;

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto ep = static_cast<std::uint64_t>(epoch);
        std::vector<std::size_t> order = train;
        Rng shuffle_rng(derive_seed(config.seed, std::uint64_t{0x5F}, ep));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        std::vector<Prepared> prepared;
        prepared.reserve(order.size());
        std::size_t truncated = 0;
        for (auto v : order) {
            Rng arng = augment_rng(config.seed, ep, corpus.videos[v].video_id);
            auto seq = finish_sequence(cached[v], config.augment, arng);
            if (seq.clip_indices.size() > mc.max_seq_len) {
                seq.clip_indices.resize(mc.max_seq_len);
                seq.target_steps.resize(mc.max_seq_len);
                ++truncated;
            }
            prepared.push_back({v, std::move(seq.clip_indices), std::move(seq.target_steps)});
        }
        if (truncated && !warned) {
            std::cerr << "warning: " << truncated << " sequences longer than max_seq_len " << mc.max_seq_len
                      << " were truncated\n";
            warned = true;
        }
        res.truncated_videos = std::max(res.truncated_videos, truncated);

        EpochRecord rec;
        rec.epoch = epoch;
        double sum_step = 0.0, sum_path = 0.0;
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < prepared.size(); start += config.batch_size, ++batch_index) {
            const std::size_t end = std::min(prepared.size(), start + config.batch_size);
            std::vector<SequenceExample> ex;
            for (std::size_t i = start; i < end; ++i) {
                const auto& p = prepared[i];
                SequenceExample e;
                for (auto c : p.clips) e.clips.emplace_back(corpus.videos[p.video].clip_embeddings[c]);
                e.step_labels = p.targets;
                e.path_targets = targets_of[p.video];
                rec.clip_positions += p.clips.size();
                ex.push_back(std::move(e));
            }
            const Batch b = make_batch(ex, mc);
            Rng drop(derive_seed(config.seed, std::uint64_t{0xD0}, ep, static_cast<std::uint64_t>(batch_index)));
            auto lg = pretrain_loss_and_grad(res.params, mc, b, config.loss_weights, &drop);
            if (!std::isfinite(lg.losses.joint)) {
                throw NumericError("pretrain: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(batch_index));
            }
            if (lg.losses.joint != lg.losses.step + lg.losses.path) rec.joint_identity = false;
            adam_step(res.params, lg.grads, res.adam, config.adam);
            res.params.round_to_float32();
            const double n = static_cast<double>(end - start);
            sum_step += lg.losses.step * n;
            sum_path += lg.losses.path * n;
        }
        const double total = static_cast<double>(prepared.size());
        rec.loss_step = sum_step / total;
        rec.loss_path = sum_path / total;
        rec.loss_joint = rec.loss_step + rec.loss_path;

        const auto score = score_heldout(res.params, mc, corpus, labels, res.holdout);
        rec.step_acc = score.step_acc;
        rec.path_acc = score.path_acc;
        res.metrics.records.push_back(rec);
        if (options.on_epoch) options.on_epoch(rec);

        if (epoch % config.checkpoint_interval == 0 || epoch == config.epochs) {
            res.saved_epochs.push_back(epoch);
            if (options.out_dir) {
                save_checkpoint(*options.out_dir / checkpoint_name(epoch), {mc, res.params, res.adam});
                write_file_atomic(*options.out_dir / "metrics.csv", res.metrics.to_csv());
            }
        }
    }
    return res;
}

} // namespace pivot
