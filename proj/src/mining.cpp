#include "pivot/mining.hpp"

#include "pivot/fileio.hpp"

#include <json.hpp>

#include <algorithm>
#include <map>
#include <sstream>

namespace pivot {

using nlohmann::json;

PseudoLabelSet mine_pseudo_labels(const VideoRecord& video, std::span<const Embedding> step_embeddings, std::size_t k) {
    if (step_embeddings.empty()) throw ValidationError("mine_pseudo_labels: empty step catalog");
    PseudoLabelSet out;
    out.per_clip.reserve(video.caption_embeddings.size());
    for (const auto& caption : video.caption_embeddings) {
        out.per_clip.push_back(top_k(caption, step_embeddings, k, Metric::cosine));
    }
    return out;
}

HierarchyPath resolve_path(int leaf, std::span<const HierarchyNode> hierarchy) {
    std::map<int, const HierarchyNode*> by_id;
    for (const auto& n : hierarchy) by_id[n.node_id] = &n;
    HierarchyPath path;
    auto it = by_id.find(leaf);
    if (it == by_id.end()) throw ValidationError("resolve_path: unknown node " + std::to_string(leaf));
    const HierarchyNode* cur = it->second;
    const int depth = cur->level;
    while (true) {
        path.node_ids.push_back(cur->node_id);
        if (!cur->parent) break;
        if (static_cast<int>(path.node_ids.size()) >= depth) {
            throw ValidationError("resolve_path: ancestry of node " + std::to_string(leaf) + " is longer than its level");
        }
        auto p = by_id.find(*cur->parent);
        if (p == by_id.end()) throw ValidationError("resolve_path: unknown parent " + std::to_string(*cur->parent));
        cur = p->second;
    }
    std::reverse(path.node_ids.begin(), path.node_ids.end());
    if (static_cast<int>(path.node_ids.size()) != depth) {
        throw ValidationError("resolve_path: node " + std::to_string(leaf) + " at level " + std::to_string(depth) +
                              " has a path of length " + std::to_string(path.node_ids.size()));
    }
    return path;
}

TopicMatch match_topic(std::string_view leaf_name, std::span<const TaskSpec> tasks, const TextEmbedder& embedder) {
    if (tasks.empty()) throw ValidationError("match_topic: empty task catalog");
    const Embedding leaf = embedder(leaf_name);
    TopicMatch best{tasks.front().task_id, cosine(leaf, embedder(tasks.front().name))};
    for (std::size_t i = 1; i < tasks.size(); ++i) {
        const double s = cosine(leaf, embedder(tasks[i].name));
        if (s > best.score || (s == best.score && tasks[i].task_id < best.task_id)) best = {tasks[i].task_id, s};
    }
    return best;
}

std::vector<Embedding> step_embeddings(const CorpusBundle& corpus, EmbeddingCache* cache) {
    std::vector<Embedding> out;
    out.reserve(corpus.steps.size());
    for (const auto& s : corpus.steps) {
        out.push_back(cache ? cache->get(s.text, corpus.dim, corpus.text_seed)
                            : embed_text(s.text, corpus.dim, corpus.text_seed));
    }
    return out;
}

std::vector<VideoLabels> mine_corpus(const CorpusBundle& corpus, std::span<const Embedding> steps,
                                     const MiningOptions& options) {
    if (steps.empty()) throw ValidationError("mine_corpus: empty step catalog");
    EmbeddingCache cache;
    const TextEmbedder embedder = [&](std::string_view text) { return cache.get(text, corpus.dim, corpus.text_seed); };

    // Topic per leaf, computed once.
    std::map<int, TopicMatch> topics;
    for (const auto& v : corpus.videos) {
        if (!topics.count(v.leaf_node)) topics[v.leaf_node] = match_topic(corpus.node(v.leaf_node).name, corpus.tasks, embedder);
    }

    std::vector<VideoLabels> out(corpus.videos.size());
    const auto n = static_cast<std::ptrdiff_t>(corpus.videos.size());
    [[maybe_unused]] const bool par = options.parallel;
    // Each iteration writes only its own slot.
#pragma omp parallel for schedule(dynamic) if (par)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const auto& v = corpus.videos[static_cast<std::size_t>(i)];
        auto& slot = out[static_cast<std::size_t>(i)];
        slot.video_id = v.video_id;
        slot.path = resolve_path(v.leaf_node, corpus.hierarchy);
        slot.topic = topics.at(v.leaf_node);
        slot.labels = mine_pseudo_labels(v, steps, options.k);
    }
    return out;
}

void save_labels(const std::vector<VideoLabels>& labels, const std::filesystem::path& path) {
    std::string text;
    for (const auto& v : labels) {
        json clips = json::array();
        for (const auto& clip : v.labels.per_clip) {
            json c = json::array();
            for (const auto& l : clip) c.push_back(json::array({l.step_id, l.score}));
            clips.push_back(std::move(c));
        }
        json j{{"video_id", v.video_id},
               {"path", v.path.node_ids},
               {"topic", {{"task_id", v.topic.task_id}, {"score", v.topic.score}}},
               {"clips", std::move(clips)}};
        text += j.dump();
        text += '\n';
    }
    write_file_atomic(path, text);
}

std::vector<VideoLabels> load_labels(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    std::vector<VideoLabels> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.string() + " line " + std::to_string(lineno);
        try {
            const json j = json::parse(line);
            VideoLabels v;
            v.video_id = j.at("video_id").get<std::string>();
            v.path.node_ids = j.at("path").get<std::vector<int>>();
            v.topic.task_id = j.at("topic").at("task_id").get<int>();
            v.topic.score = j.at("topic").at("score").get<double>();
            for (const auto& clip : j.at("clips")) {
                std::vector<ScoredLabel> ls;
                for (const auto& pair : clip) ls.push_back({pair.at(0).get<int>(), pair.at(1).get<double>()});
                for (std::size_t i = 1; i < ls.size(); ++i) {
                    if (ls[i].score > ls[i - 1].score) throw FormatError(where + ": clip labels not sorted by score");
                }
                v.labels.per_clip.push_back(std::move(ls));
            }
            out.push_back(std::move(v));
        } catch (const json::exception& e) {
            throw FormatError(where + ": " + e.what());
        }
    }
    return out;
}

void check_labels_match(const CorpusBundle& corpus, std::span<const VideoLabels> labels) {
    if (labels.size() != corpus.videos.size()) {
        throw ValidationError("labels cover " + std::to_string(labels.size()) + " videos, corpus has " +
                              std::to_string(corpus.videos.size()));
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto& v = corpus.videos[i];
        const auto& l = labels[i];
        if (l.video_id != v.video_id) {
            throw ValidationError("labels out of corpus order at index " + std::to_string(i) + ": " + l.video_id +
                                  " vs " + v.video_id);
        }
        if (l.labels.per_clip.size() != v.size()) {
            throw ValidationError("labels for " + v.video_id + " cover " + std::to_string(l.labels.per_clip.size()) +
                                  " clips, video has " + std::to_string(v.size()));
        }
        for (const auto& clip : l.labels.per_clip) {
            if (clip.empty()) throw ValidationError("labels for " + v.video_id + ": clip without labels");
            for (const auto& s : clip) {
                if (s.step_id < 0 || static_cast<std::size_t>(s.step_id) >= corpus.steps.size()) {
                    throw ValidationError("labels for " + v.video_id + ": unknown step " + std::to_string(s.step_id));
                }
            }
        }
        if (l.path.node_ids.empty() || l.path.node_ids.back() != v.leaf_node) {
            throw ValidationError("labels for " + v.video_id + ": path does not end at the video's leaf");
        }
    }
}

} // namespace pivot
