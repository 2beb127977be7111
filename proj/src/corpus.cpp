#include "pivot/corpus.hpp"

#include "pivot/fileio.hpp"
#include "pivot/rng.hpp"
#include "pivot/textsim.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace pivot {

using nlohmann::json;

int CorpusBundle::levels() const {
    int l = 0;
    for (const auto& n : hierarchy) l = std::max(l, n.level);
    return l;
}

std::vector<int> CorpusBundle::nodes_at_level(int level) const {
    std::vector<int> ids;
    for (const auto& n : hierarchy)
        if (n.level == level) ids.push_back(n.node_id);
    std::sort(ids.begin(), ids.end());
    return ids;
}

const HierarchyNode& CorpusBundle::node(int node_id) const {
    // Generated and loaded hierarchies are stored in id order.
    if (node_id >= 0 && static_cast<std::size_t>(node_id) < hierarchy.size() &&
        hierarchy[static_cast<std::size_t>(node_id)].node_id == node_id) {
        return hierarchy[static_cast<std::size_t>(node_id)];
    }
    for (const auto& n : hierarchy)
        if (n.node_id == node_id) return n;
    throw ValidationError("unknown hierarchy node " + std::to_string(node_id));
}

// ---------------------------------------------------------------- config

void CorpusConfig::validate() const {
    if (branching.empty()) throw ValidationError("corpus config: hierarchy needs at least one level");
    for (std::size_t l = 0; l < branching.size(); ++l) {
        if (branching[l] <= 0) {
            throw ValidationError("corpus config: zero node count at level " + std::to_string(l + 1));
        }
    }
    if (tasks_per_leaf <= 0) throw ValidationError("corpus config: tasks_per_leaf must be positive");
    if (steps_per_task <= 0) throw ValidationError("corpus config: steps_per_task must be positive");
    if (videos_per_leaf <= 0) throw ValidationError("corpus config: videos_per_leaf must be positive");
    if (clips_per_video <= 0) throw ValidationError("corpus config: clips_per_video must be positive");
    if (dim == 0) throw ValidationError("corpus config: dim must be positive");
    if (shared_steps < 0 || shared_steps > steps_per_task) {
        throw ValidationError("corpus config: shared_steps must be in [0, steps_per_task]");
    }
    for (double p : {filler_prob, offtask_prob, swap_prob}) {
        if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("corpus config: probabilities must be in [0, 1]");
    }
    if (filler_prob + offtask_prob > 1.0) {
        throw ValidationError("corpus config: filler_prob + offtask_prob exceeds 1");
    }
    if (clip_noise < 0 || caption_noise < 0 || scene_scale < 0 || scene_rank < 0) {
        throw ValidationError("corpus config: noise scales must be non-negative");
    }
}

std::vector<int> CorpusConfig::level_sizes() const {
    std::vector<int> sizes;
    int n = 1;
    for (int b : branching) {
        n *= b;
        sizes.push_back(n);
    }
    return sizes;
}

int CorpusConfig::leaves() const { return level_sizes().back(); }

CorpusConfig CorpusConfig::desk() { return {}; }

CorpusConfig CorpusConfig::large() {
    CorpusConfig c;
    c.branching = {4, 4, 4};
    c.videos_per_leaf = 12;
    c.clips_per_video = 16;
    return c;
}

CorpusConfig CorpusConfig::transfer() {
    CorpusConfig c;
    c.branching = {2, 3, 2};
    c.tasks_per_leaf = 1;
    c.steps_per_task = 6;
    c.videos_per_leaf = 10;
    c.clips_per_video = 12;
    c.filler_prob = 0.1;
    c.offtask_prob = 0.0;
    c.vocabulary = "xfer ";
    return c;
}

CorpusConfig CorpusConfig::plant_and_recover() {
    CorpusConfig c;
    c.branching = {2, 5, 1};
    c.tasks_per_leaf = 1;
    c.videos_per_leaf = 5;
    c.filler_prob = 0.0;
    c.offtask_prob = 0.0;
    c.scene_scale = 0.0;
    return c;
}

// ---------------------------------------------------------------- pooling

Embedding pool_segments(std::span<const Embedding> segments) {
    if (segments.empty()) throw ValidationError("pool_segments: no segments");
    const std::size_t d = segments.front().size();
    if (d == 0) throw ValidationError("pool_segments: zero-dimensional segment");
    Embedding out(d, 0.0);
    for (std::size_t s = 0; s < segments.size(); ++s) {
        if (segments[s].size() != d) {
            throw ValidationError("pool_segments: segment " + std::to_string(s) + " has dimension " +
                                  std::to_string(segments[s].size()) + ", expected " + std::to_string(d));
        }
        for (std::size_t j = 0; j < d; ++j) out[j] += segments[s][j];
    }
    const double inv = 1.0 / static_cast<double>(segments.size());
    for (auto& x : out) x *= inv;
    return out;
}

// ---------------------------------------------------------------- generation

namespace {

Embedding gaussian(Rng& rng, std::size_t d, double expected_norm) {
    std::normal_distribution<double> g(0.0, expected_norm / std::sqrt(static_cast<double>(d)));
    Embedding v(d);
    for (auto& x : v) x = g(rng);
    return v;
}

void add_into(Embedding& a, const Embedding& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

Embedding rescaled(Embedding v, double target) {
    const double n = norm(v);
    if (n == 0.0) return v;
    for (auto& x : v) x *= target / n;
    return v;
}

struct LeafTasks {
    std::vector<int> task_ids;
};

} // namespace

CorpusBundle generate_corpus(const CorpusConfig& config, std::uint64_t seed) {
    config.validate();
    CorpusBundle b;
    b.dim = config.dim;
    b.text_seed = config.text_seed;
    const std::string& vocab = config.vocabulary;

    // Hierarchy, breadth first so ids are grouped by level.
    std::vector<int> frontier;
    for (int r = 0; r < config.branching[0]; ++r) {
        const int id = static_cast<int>(b.hierarchy.size());
        b.hierarchy.push_back({id, vocab + "category " + std::to_string(r + 1), 1, std::nullopt});
        frontier.push_back(id);
    }
    for (std::size_t l = 1; l < config.branching.size(); ++l) {
        std::vector<int> next;
        for (int parent : frontier) {
            const std::string pname = b.hierarchy[static_cast<std::size_t>(parent)].name;
            for (int c = 0; c < config.branching[l]; ++c) {
                const int id = static_cast<int>(b.hierarchy.size());
                b.hierarchy.push_back({id, pname + "." + std::to_string(c + 1), static_cast<int>(l + 1), parent});
                next.push_back(id);
            }
        }
        frontier = std::move(next);
    }
    const std::vector<int> leaves = frontier;

    // Tasks and steps. A leaf's primary task carries the leaf's own name; the
    // hash embedder has no notion of paraphrase, so this is what lets topic
    // matching find it. Secondary tasks borrow some of the primary's steps.
    std::vector<LeafTasks> leaf_tasks(leaves.size());
    auto new_step = [&](const std::string& leaf_name, int k) {
        const int id = static_cast<int>(b.steps.size());
        b.steps.push_back({id, leaf_name + " step " + std::to_string(k)});
        return id;
    };
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Rng rng(derive_seed(seed, std::uint64_t{1}, li));
        const std::string& lname = b.hierarchy[static_cast<std::size_t>(leaves[li])].name;
        int step_counter = 1;
        TaskSpec primary{static_cast<int>(b.tasks.size()), lname, {}};
        for (int s = 0; s < config.steps_per_task; ++s) primary.step_ids.push_back(new_step(lname, step_counter++));
        leaf_tasks[li].task_ids.push_back(primary.task_id);
        b.tasks.push_back(primary);
        for (int t = 1; t < config.tasks_per_leaf; ++t) {
            std::vector<int> shared = primary.step_ids;
            std::shuffle(shared.begin(), shared.end(), rng);
            shared.resize(static_cast<std::size_t>(config.shared_steps));
            // keep borrowed steps in the primary's order
            std::sort(shared.begin(), shared.end());
            std::vector<int> steps = shared;
            for (int s = config.shared_steps; s < config.steps_per_task; ++s) {
                const auto pos = std::uniform_int_distribution<std::size_t>(0, steps.size())(rng);
                steps.insert(steps.begin() + static_cast<std::ptrdiff_t>(pos), new_step(lname, step_counter++));
            }
            TaskSpec variant{static_cast<int>(b.tasks.size()), lname + " variant " + std::to_string(t), steps};
            leaf_tasks[li].task_ids.push_back(variant.task_id);
            b.tasks.push_back(std::move(variant));
        }
    }

    std::vector<Embedding> step_emb;
    step_emb.reserve(b.steps.size());
    for (const auto& s : b.steps) step_emb.push_back(embed_text(s.text, config.dim, config.text_seed));

    // Background subspace shared by every corpus built with the same world seed.
    std::vector<Embedding> scene_basis;
    {
        Rng wrng(derive_seed(config.world_seed, fnv1a("scene"), config.dim));
        for (int r = 0; r < config.scene_rank; ++r) scene_basis.push_back(rescaled(gaussian(wrng, config.dim, 1.0), 1.0));
    }

    const std::size_t d = config.dim;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        const int leaf = leaves[li];
        std::vector<char> own_step(b.steps.size(), 0);
        for (int t : leaf_tasks[li].task_ids)
            for (int s : b.tasks[static_cast<std::size_t>(t)].step_ids) own_step[static_cast<std::size_t>(s)] = 1;
        std::vector<int> foreign;
        for (std::size_t s = 0; s < b.steps.size(); ++s)
            if (!own_step[s]) foreign.push_back(static_cast<int>(s));

        for (int v = 0; v < config.videos_per_leaf; ++v) {
            Rng rng(derive_seed(seed, std::uint64_t{2}, li, static_cast<std::uint64_t>(v)));
            VideoRecord rec;
            rec.video_id = "video_" + std::to_string(leaf) + "_" + std::to_string(v);
            rec.leaf_node = leaf;
            const auto& tids = leaf_tasks[li].task_ids;
            rec.task_id = tids[std::uniform_int_distribution<std::size_t>(0, tids.size() - 1)(rng)];
            const auto& task_steps = b.tasks[static_cast<std::size_t>(rec.task_id)].step_ids;

            const auto n = static_cast<std::size_t>(config.clips_per_video);
            enum Kind { on, off, filler };
            std::vector<Kind> kinds(n);
            for (auto& k : kinds) {
                const double u = uniform01(rng);
                k = u < config.filler_prob ? filler
                    : (u < config.filler_prob + config.offtask_prob && !foreign.empty()) ? off
                                                                                        : on;
            }
            const auto n_on = static_cast<std::size_t>(std::count(kinds.begin(), kinds.end(), on));
            // Monotone walk through the task with repeats, then local disorder.
            std::vector<int> order(n_on);
            std::uniform_int_distribution<std::size_t> pick_step(0, task_steps.size() - 1);
            for (auto& o : order) o = static_cast<int>(pick_step(rng));
            std::sort(order.begin(), order.end());
            for (std::size_t i = 0; i + 1 < order.size(); ++i)
                if (uniform01(rng) < config.swap_prob) std::swap(order[i], order[i + 1]);

            Embedding scene(d, 0.0);
            if (config.scene_scale > 0) {
                std::normal_distribution<double> g(0.0, config.scene_scale / std::sqrt(std::max(1, config.scene_rank)));
                for (const auto& basis : scene_basis) {
                    const double c = g(rng);
                    for (std::size_t j = 0; j < d; ++j) scene[j] += c * basis[j];
                }
            }

            std::size_t next_on = 0;
            for (std::size_t i = 0; i < n; ++i) {
                int step = -1;
                std::string text;
                if (kinds[i] == on) {
                    step = task_steps[static_cast<std::size_t>(order[next_on++])];
                } else if (kinds[i] == off) {
                    step = foreign[std::uniform_int_distribution<std::size_t>(0, foreign.size() - 1)(rng)];
                }
                Embedding clip;
                Embedding caption;
                if (step >= 0) {
                    text = b.steps[static_cast<std::size_t>(step)].text;
                    clip = step_emb[static_cast<std::size_t>(step)];
                    caption = step_emb[static_cast<std::size_t>(step)];
                    if (config.caption_noise > 0) add_into(caption, gaussian(rng, d, config.caption_noise));
                    const double r = kEmbedNormMin + (kEmbedNormMax - kEmbedNormMin) * uniform01(rng);
                    caption = rescaled(std::move(caption), r);
                } else {
                    text = vocab + "filler chatter " + rec.video_id + " " + std::to_string(i);
                    clip = rescaled(gaussian(rng, d, 1.0), kEmbedNormMin + (kEmbedNormMax - kEmbedNormMin) * uniform01(rng));
                    caption = embed_text(text, d, config.text_seed);
                }
                add_into(clip, scene);
                if (config.clip_noise > 0) add_into(clip, gaussian(rng, d, config.clip_noise));
                rec.clip_embeddings.push_back(std::move(clip));
                rec.caption_embeddings.push_back(std::move(caption));
                rec.caption_texts.push_back(std::move(text));
                rec.step_labels.push_back(kinds[i] == on ? step : (kinds[i] == off ? step : -1));
            }
            b.videos.push_back(std::move(rec));
        }
    }
    validate_corpus(b);
    return b;
}

// ---------------------------------------------------------------- validation

void validate_corpus(const CorpusBundle& b) {
    if (b.dim == 0) throw ValidationError("corpus: embedding dimension must be positive");
    for (std::size_t i = 0; i < b.steps.size(); ++i) {
        if (b.steps[i].step_id != static_cast<int>(i)) {
            throw ValidationError("corpus: step ids must be contiguous from 0 (record " + std::to_string(i) +
                                  " has id " + std::to_string(b.steps[i].step_id) + ")");
        }
        if (b.steps[i].text.empty()) throw ValidationError("corpus: step " + std::to_string(i) + " has empty text");
    }
    std::set<int> task_ids;
    for (const auto& t : b.tasks) {
        if (!task_ids.insert(t.task_id).second) throw ValidationError("corpus: duplicate task id " + std::to_string(t.task_id));
        if (t.step_ids.empty()) throw ValidationError("corpus: task " + std::to_string(t.task_id) + " has no steps");
        for (int s : t.step_ids) {
            if (s < 0 || static_cast<std::size_t>(s) >= b.steps.size()) {
                throw ValidationError("corpus: task " + std::to_string(t.task_id) + " references unknown step " +
                                      std::to_string(s));
            }
        }
    }

    std::map<int, const HierarchyNode*> nodes;
    for (const auto& n : b.hierarchy) {
        if (!nodes.emplace(n.node_id, &n).second) {
            throw ValidationError("hierarchy: duplicate node id " + std::to_string(n.node_id));
        }
    }
    int max_level = 0;
    for (const auto& n : b.hierarchy) {
        const std::string where = "hierarchy: node " + std::to_string(n.node_id);
        if (n.level < 1) throw ValidationError(where + " has level " + std::to_string(n.level) + " < 1");
        max_level = std::max(max_level, n.level);
        if (n.level == 1) {
            if (n.parent) throw ValidationError(where + " is at level 1 but has a parent");
            continue;
        }
        if (!n.parent) throw ValidationError(where + " at level " + std::to_string(n.level) + " has no parent");
        auto it = nodes.find(*n.parent);
        if (it == nodes.end()) throw ValidationError(where + " references unknown parent " + std::to_string(*n.parent));
        if (it->second->level != n.level - 1) {
            throw ValidationError(where + " at level " + std::to_string(n.level) + " has parent " +
                                  std::to_string(*n.parent) + " at level " + std::to_string(it->second->level) +
                                  " (expected " + std::to_string(n.level - 1) + ")");
        }
    }
    for (int l = 1; l <= max_level; ++l) {
        const bool any = std::any_of(b.hierarchy.begin(), b.hierarchy.end(), [l](const auto& n) { return n.level == l; });
        if (!any) throw ValidationError("hierarchy: no node at level " + std::to_string(l));
    }

    std::set<std::string> ids;
    for (const auto& v : b.videos) {
        const std::string where = "video " + v.video_id;
        if (v.video_id.empty()) throw ValidationError("corpus: video with empty id");
        if (!ids.insert(v.video_id).second) throw ValidationError(where + ": duplicate video id");
        if (!nodes.count(v.leaf_node)) throw ValidationError(where + ": unknown leaf node " + std::to_string(v.leaf_node));
        if (v.clip_embeddings.empty()) throw ValidationError(where + ": no clips");
        if (v.clip_embeddings.size() != v.caption_embeddings.size()) {
            throw ValidationError(where + ": " + std::to_string(v.clip_embeddings.size()) + " clips but " +
                                  std::to_string(v.caption_embeddings.size()) + " captions");
        }
        if (!v.caption_texts.empty() && v.caption_texts.size() != v.clip_embeddings.size()) {
            throw ValidationError(where + ": caption_texts length does not match clips");
        }
        if (!v.step_labels.empty() && v.step_labels.size() != v.clip_embeddings.size()) {
            throw ValidationError(where + ": step_labels length does not match clips");
        }
        for (int s : v.step_labels) {
            if (s < -1 || s >= static_cast<int>(b.steps.size())) {
                throw ValidationError(where + ": step label " + std::to_string(s) + " out of range");
            }
        }
        if (v.task_id >= 0 && !task_ids.count(v.task_id)) {
            throw ValidationError(where + ": unknown task " + std::to_string(v.task_id));
        }
        for (const auto* seq : {&v.clip_embeddings, &v.caption_embeddings}) {
            for (const auto& e : *seq) {
                if (e.size() != b.dim) {
                    throw ValidationError(where + ": embedding of dimension " + std::to_string(e.size()) +
                                          ", corpus dimension is " + std::to_string(b.dim));
                }
                for (double x : e)
                    if (!std::isfinite(x)) throw ValidationError(where + ": non-finite embedding value");
            }
        }
    }
}

// ---------------------------------------------------------------- persistence

namespace {

json node_to_json(const HierarchyNode& n) {
    return {{"node_id", n.node_id}, {"name", n.name}, {"level", n.level},
            {"parent", n.parent ? json(*n.parent) : json(nullptr)}};
}

json video_to_json(const VideoRecord& v) {
    json j{{"video_id", v.video_id}, {"leaf_node", v.leaf_node}, {"clips", v.clip_embeddings},
           {"captions", v.caption_embeddings}};
    if (!v.caption_texts.empty()) j["caption_texts"] = v.caption_texts;
    if (v.task_id >= 0) j["task_id"] = v.task_id;
    if (!v.step_labels.empty()) j["step_labels"] = v.step_labels;
    return j;
}

template <typename T>
T field(const json& j, const char* key, const std::string& where) {
    if (!j.contains(key)) throw FormatError(where + ": missing field '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw FormatError(where + ": field '" + key + "': " + e.what());
    }
}

json parse_json(const std::string& text, const std::string& where) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(where + ": " + e.what());
    }
}

} // namespace

void save_corpus(const CorpusBundle& b, const std::filesystem::path& dir) {
    validate_corpus(b);
    std::filesystem::create_directories(dir);
    json manifest{{"format_version", kCorpusFormatVersion}, {"dim", b.dim}, {"text_seed", b.text_seed},
                  {"steps", b.steps.size()}, {"tasks", b.tasks.size()}, {"nodes", b.hierarchy.size()},
                  {"videos", b.videos.size()}};
    json steps = json::array();
    for (const auto& s : b.steps) steps.push_back({{"step_id", s.step_id}, {"text", s.text}});
    json tasks = json::array();
    for (const auto& t : b.tasks) tasks.push_back({{"task_id", t.task_id}, {"name", t.name}, {"step_ids", t.step_ids}});
    json nodes = json::array();
    for (const auto& n : b.hierarchy) nodes.push_back(node_to_json(n));
    std::string videos;
    for (const auto& v : b.videos) {
        videos += video_to_json(v).dump();
        videos += '\n';
    }
    write_file_atomic(dir / "steps.json", steps.dump(1) + "\n");
    write_file_atomic(dir / "tasks.json", tasks.dump(1) + "\n");
    write_file_atomic(dir / "hierarchy.json", nodes.dump(1) + "\n");
    write_file_atomic(dir / "videos.jsonl", videos);
    write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

CorpusBundle load_corpus(const std::filesystem::path& dir) {
    CorpusBundle b;
    const auto mpath = (dir / "manifest.json").string();
    const json manifest = parse_json(read_file(dir / "manifest.json"), mpath);
    const int version = field<int>(manifest, "format_version", mpath);
    if (version != kCorpusFormatVersion) {
        throw FormatError(mpath + ": unsupported format_version " + std::to_string(version));
    }
    b.dim = field<std::size_t>(manifest, "dim", mpath);
    b.text_seed = manifest.value("text_seed", std::uint64_t{0});

    auto load_array = [&](const char* name) {
        const auto p = (dir / name).string();
        json arr = parse_json(read_file(dir / name), p);
        if (!arr.is_array()) throw FormatError(p + ": expected a JSON array");
        return std::pair{arr, p};
    };
    {
        auto [arr, p] = load_array("steps.json");
        for (std::size_t i = 0; i < arr.size(); ++i) {
            const std::string where = p + " record " + std::to_string(i);
            b.steps.push_back({field<int>(arr[i], "step_id", where), field<std::string>(arr[i], "text", where)});
        }
    }
    {
        auto [arr, p] = load_array("tasks.json");
        for (std::size_t i = 0; i < arr.size(); ++i) {
            const std::string where = p + " record " + std::to_string(i);
            b.tasks.push_back({field<int>(arr[i], "task_id", where), field<std::string>(arr[i], "name", where),
                               field<std::vector<int>>(arr[i], "step_ids", where)});
        }
    }
    {
        auto [arr, p] = load_array("hierarchy.json");
        for (std::size_t i = 0; i < arr.size(); ++i) {
            const std::string where = p + " record " + std::to_string(i);
            HierarchyNode n{field<int>(arr[i], "node_id", where), field<std::string>(arr[i], "name", where),
                            field<int>(arr[i], "level", where), std::nullopt};
            if (arr[i].contains("parent") && !arr[i]["parent"].is_null()) n.parent = field<int>(arr[i], "parent", where);
            b.hierarchy.push_back(std::move(n));
        }
        std::sort(b.hierarchy.begin(), b.hierarchy.end(), [](const auto& x, const auto& y) { return x.node_id < y.node_id; });
    }
    {
        const auto p = (dir / "videos.jsonl").string();
        std::istringstream in(read_file(dir / "videos.jsonl"));
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            std::string where = p + " line " + std::to_string(lineno);
            const json j = parse_json(line, where);
            VideoRecord v;
            v.video_id = field<std::string>(j, "video_id", where);
            where += " (video_id " + v.video_id + ")";
            v.leaf_node = field<int>(j, "leaf_node", where);
            v.clip_embeddings = field<std::vector<Embedding>>(j, "clips", where);
            v.caption_embeddings = field<std::vector<Embedding>>(j, "captions", where);
            if (j.contains("caption_texts")) v.caption_texts = field<std::vector<std::string>>(j, "caption_texts", where);
            if (j.contains("task_id")) v.task_id = field<int>(j, "task_id", where);
            if (j.contains("step_labels")) v.step_labels = field<std::vector<int>>(j, "step_labels", where);
            b.videos.push_back(std::move(v));
        }
    }
    validate_corpus(b);
    return b;
}

} // namespace pivot
