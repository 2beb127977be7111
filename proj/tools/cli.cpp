#include "cli.hpp"
#include "manifest.hpp"

#include "pivot/corpus.hpp"
#include "pivot/downstream.hpp"
#include "pivot/earlystop.hpp"
#include "pivot/fileio.hpp"
#include "pivot/mining.hpp"
#include "pivot/pretrain.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <iomanip>
#include <optional>
#include <regex>
#include <set>
#include <sstream>

namespace pivot::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------- config resolution

// defaults < PIVOT_SEED (seed only) < config file < flags
class Resolver {
public:
    Resolver(const std::string& config_path, std::set<std::string> known) : known_(std::move(known)) {
        if (config_path.empty()) return;
        try {
            file_ = json::parse(read_file(config_path));
        } catch (const json::parse_error& e) {
            throw FormatError(config_path + ": " + e.what());
        }
        if (!file_.is_object()) throw ValidationError(config_path + ": config must be a JSON object");
        for (const auto& [key, value] : file_.items())
            if (!known_.count(key)) throw ValidationError(config_path + ": unknown config key '" + key + "'");
    }

    template <typename T>
    T get(const std::string& key, const CLI::Option* flag, const T& flag_value, const T& fallback) const {
        if (flag && flag->count() > 0) return flag_value;
        if (file_.contains(key)) {
            try {
                return file_.at(key).get<T>();
            } catch (const json::exception& e) {
                throw ValidationError("config key '" + key + "': " + e.what());
            }
        }
        return fallback;
    }

    std::uint64_t seed(const CLI::Option* flag, std::uint64_t flag_value) const {
        std::uint64_t fallback = 0;
        if (const char* env = std::getenv("PIVOT_SEED"); env && *env) {
            char* end = nullptr;
            fallback = std::strtoull(env, &end, 10);
            if (*end != '\0') throw ValidationError("PIVOT_SEED must be a non-negative integer, got '" + std::string(env) + "'");
        }
        return get<std::uint64_t>("seed", flag, flag_value, fallback);
    }

    const json& file() const { return file_; }

private:
    json file_ = json::object();
    std::set<std::string> known_;
};

void require_dir(const fs::path& p, const std::string& what) {
    if (!fs::is_directory(p)) throw ValidationError(what + " " + p.string() + " is not a directory");
}

void require_file(const fs::path& p, const std::string& what) {
    if (!fs::is_regular_file(p)) throw ValidationError(what + " " + p.string() + " does not exist");
}

RunManifest start_manifest(const std::string& command, const std::vector<std::string>& args) {
    RunManifest m;
    m.command = command;
    m.argv = args;
    return m;
}

CorpusConfig preset(const std::string& name) {
    if (name == "desk") return CorpusConfig::desk();
    if (name == "large") return CorpusConfig::large();
    if (name == "transfer") return CorpusConfig::transfer();
    if (name == "plant") return CorpusConfig::plant_and_recover();
    throw ValidationError("unknown preset '" + name + "' (expected desk, large, transfer or plant)");
}

std::string ablation_name(const AugmentConfig& a) {
    std::vector<std::string> stages;
    if (a.threshold_enabled) stages.push_back("thresh");
    if (a.in_task) stages.push_back("in_task");
    if (a.sort) stages.push_back("sort");
    if (a.unique) stages.push_back("unique");
    if (a.swap) stages.push_back("swap");
    if (stages.empty()) return "lwds";
    std::string s = stages.front();
    for (std::size_t i = 1; i < stages.size(); ++i) s += "+" + stages[i];
    return s;
}

// ---------------------------------------------------------------- gen-corpus

struct GenCorpusArgs {
    std::string out, preset = "desk", config;
    std::uint64_t seed = 0;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* preset_opt = nullptr;
};

int gen_corpus(const GenCorpusArgs& a, const std::vector<std::string>& args, std::ostream& out) {
    const Resolver r(a.config, {"seed", "preset"});
    const std::uint64_t seed = r.seed(a.seed_opt, a.seed);
    const std::string name = r.get<std::string>("preset", a.preset_opt, a.preset, "desk");
    const CorpusBundle bundle = generate_corpus(preset(name), seed);

    StagedDir dir(a.out);
    save_corpus(bundle, dir.path());
    if (!(load_corpus(dir.path()) == bundle)) throw Error("corpus did not survive a save/load round trip");
    auto m = start_manifest("gen-corpus", args);
    m.seed = seed;
    m.config = {{"preset", name}, {"seed", seed}};
    m.outputs = {{"corpus", a.out}};
    m.extra = {{"videos", bundle.videos.size()}, {"steps", bundle.steps.size()}, {"tasks", bundle.tasks.size()}};
    dir.commit(m);
    out << "wrote " << bundle.videos.size() << " videos to " << a.out << "\n";
    return 0;
}

// ---------------------------------------------------------------- mine

struct MineArgs {
    std::string corpus, out, config;
    std::size_t k = 1;
    CLI::Option* k_opt = nullptr;
};

int mine(const MineArgs& a, const std::vector<std::string>& args, std::ostream& out) {
    const Resolver r(a.config, {"k"});
    require_dir(a.corpus, "corpus");
    const std::size_t k = r.get<std::size_t>("k", a.k_opt, a.k, 1);
    if (k == 0) throw ValidationError("--k must be at least 1");
    const CorpusBundle corpus = load_corpus(a.corpus);
    MiningOptions opt;
    opt.k = k;
    const auto labels = mine_corpus(corpus, step_embeddings(corpus), opt);

    // Serialize through a temporary so the artifact and manifest land together.
    const fs::path tmp = fs::path(a.out).string() + ".mining";
    save_labels(labels, tmp);
    std::string bytes = read_file(tmp);
    fs::remove(tmp);
    auto m = start_manifest("mine", args);
    m.config = {{"k", k}};
    m.inputs = {{"corpus", a.corpus}};
    m.outputs = {{"labels", a.out}};
    m.extra = {{"corpus_digest", tree_digest(checksum_tree(a.corpus))}, {"videos", labels.size()}};
    write_file_with_manifest(a.out, bytes, m);
    check_labels_match(corpus, load_labels(a.out));
    out << "mined " << labels.size() << " videos into " << a.out << "\n";
    return 0;
}

// ---------------------------------------------------------------- pretrain

struct PretrainArgs {
    std::string corpus, labels, out, config, pool = "mean";
    bool thresh = false, in_task = false, sort = false, unique = false, swap = false, cls = false, decoupled = false;
    double tau = 1.0, swap_prob = 0.15, lr = 1e-4, decay = 1e-3;
    int epochs = 2000, interval = 50;
    std::size_t batch = 256;
    std::uint64_t seed = 0;
    CLI::Option *thresh_opt{}, *in_task_opt{}, *sort_opt{}, *unique_opt{}, *swap_opt{}, *cls_opt{}, *decoupled_opt{},
        *tau_opt{}, *swap_prob_opt{}, *lr_opt{}, *decay_opt{}, *epochs_opt{}, *interval_opt{}, *batch_opt{},
        *seed_opt{}, *pool_opt{};
};

TrainConfig resolve_train_config(const PretrainArgs& a, const Resolver& r) {
    TrainConfig c = train_config_from_json(r.file());
    c.seed = r.seed(a.seed_opt, a.seed);
    auto& g = c.augment;
    if (a.thresh_opt->count()) g.threshold_enabled = true;
    if (a.in_task_opt->count()) g.in_task = true;
    if (a.sort_opt->count()) g.sort = true;
    if (a.unique_opt->count()) g.unique = true;
    if (a.swap_opt->count()) g.swap = true;
    if (a.tau_opt->count()) g.threshold_value = a.tau;
    if (a.swap_prob_opt->count()) g.swap_prob = a.swap_prob;
    if (a.epochs_opt->count()) c.epochs = a.epochs;
    if (a.interval_opt->count()) c.checkpoint_interval = a.interval;
    if (a.batch_opt->count()) c.batch_size = a.batch;
    if (a.lr_opt->count()) c.adam.lr = a.lr;
    if (a.decay_opt->count()) c.adam.weight_decay = a.decay;
    if (a.decoupled_opt->count()) c.adam.decoupled = true;
    if (a.pool_opt->count()) c.model.pooling = parse_pooling(a.pool);
    if (a.cls_opt->count()) c.model.cls_token = true;
    c.validate();
    return c;
}

const std::set<std::string> kTrainKeys = {"epochs", "batch_size", "lr", "weight_decay", "decoupled_decay",
                                          "checkpoint_interval", "seed", "augment", "model", "poly_degree",
                                          "patience", "holdout_fraction", "lambda_path"};

int pretrain_cmd(const PretrainArgs& a, const std::vector<std::string>& args, std::ostream& out) {
    const Resolver r(a.config, kTrainKeys);
    require_dir(a.corpus, "corpus");
    require_file(a.labels, "labels file");
    const TrainConfig config = resolve_train_config(a, r);
    const CorpusBundle corpus = load_corpus(a.corpus);
    const auto labels = load_labels(a.labels);
    check_labels_match(corpus, labels);

    StagedDir dir(a.out);
    PretrainOptions opt;
    opt.out_dir = dir.path();
    opt.on_epoch = [&](const EpochRecord& e) {
        if (e.epoch == 1 || e.epoch % 10 == 0 || e.epoch == config.epochs) {
            out << "epoch " << e.epoch << " step_acc " << e.step_acc << " loss_joint " << e.loss_joint << "\n";
        }
    };
    const PretrainResult res = pretrain(corpus, labels, config, opt);

    for (int e : res.saved_epochs) load_checkpoint(dir.path() / checkpoint_name(e));
    if (read_metrics_csv(dir.path() / "metrics.csv").records.size() != res.metrics.records.size())
        throw Error("metrics.csv does not hold every epoch");

    json clips = json::array();
    std::size_t total = 0;
    for (const auto& rec : res.metrics.records) {
        clips.push_back(rec.clip_positions);
        total += rec.clip_positions;
    }
    auto m = start_manifest("pretrain", args);
    m.seed = config.seed;
    m.config = to_json(config);
    m.config["model"] = to_json(res.config);
    m.inputs = {{"corpus", a.corpus}, {"labels", a.labels}};
    m.outputs = {{"run", a.out}, {"metrics", "metrics.csv"}};
    m.extra = {{"ablation", ablation_name(config.augment)},
               {"clip_positions_per_epoch", clips},
               {"clip_positions_total", total},
               {"saved_epochs", res.saved_epochs},
               {"holdout_videos", res.holdout},
               {"truncated_videos", res.truncated_videos},
               {"corpus_digest", tree_digest(checksum_tree(a.corpus))},
               {"labels_checksum", file_checksum(a.labels)}};
    dir.commit(m);
    out << "saved " << res.saved_epochs.size() << " checkpoints to " << a.out << "\n";
    return 0;
}

// ---------------------------------------------------------------- analyze-stop

struct AnalyzeArgs {
    std::string metrics, out, config;
    std::size_t degree = 10;
    int patience = 50;
    CLI::Option *degree_opt{}, *patience_opt{};
};

std::vector<int> saved_epochs_near(const fs::path& metrics_file, int last) {
    std::vector<int> saved;
    const std::regex name(R"(ckpt_([0-9]+)\.pivt)");
    const fs::path dir = metrics_file.has_parent_path() ? metrics_file.parent_path() : fs::path(".");
    for (const auto& e : fs::directory_iterator(dir)) {
        std::smatch mt;
        const std::string f = e.path().filename().string();
        if (std::regex_match(f, mt, name)) saved.push_back(std::stoi(mt[1]));
    }
    if (saved.empty()) {
        // No checkpoints beside the metrics: assume the default schedule.
        for (int e = 50; e < last; e += 50) saved.push_back(e);
        saved.push_back(last);
    }
    std::sort(saved.begin(), saved.end());
    return saved;
}

int analyze_stop_cmd(const AnalyzeArgs& a, const std::vector<std::string>& args, std::ostream& out) {
    const Resolver r(a.config, {"degree", "patience"});
    require_file(a.metrics, "metrics file");
    const std::size_t degree = r.get<std::size_t>("degree", a.degree_opt, a.degree, 10);
    const int patience = r.get<int>("patience", a.patience_opt, a.patience, 50);
    if (patience < 1) throw ValidationError("--patience must be at least 1");
    const auto series = read_metrics_csv(a.metrics);
    const auto acc = series.step_acc();
    const auto saved = saved_epochs_near(a.metrics, static_cast<int>(acc.size()));
    const StopAnalysis s = analyze_stop(acc, degree, patience, saved);

    const fs::path target = a.out.empty() ? fs::path(a.metrics).parent_path() / "stop_analysis.json" : fs::path(a.out);
    auto m = start_manifest("analyze-stop", args);
    m.config = {{"degree", degree}, {"patience", patience}};
    m.inputs = {{"metrics", a.metrics}};
    m.outputs = {{"stop_analysis", target.string()}};
    m.extra = {{"saved_epochs", saved}, {"metrics_checksum", file_checksum(a.metrics)}};
    write_file_with_manifest(target, to_json(s).dump(2) + "\n", m);
    out << "e_star " << s.e_star << " saturation " << s.saturation << " checkpoint " << s.selected_checkpoint
        << "\n";
    return 0;
}

// ---------------------------------------------------------------- finetune / eval

struct FinetuneArgs {
    std::string ckpt, corpus, task, out, config;
    int epochs = 100;
    std::size_t batch = 16, forecast_positions = 0;
    double test_fraction = 0.3, lr = 1e-4, decay = 1e-3;
    bool bidirectional = false, random_init = false;
    std::uint64_t seed = 0;
    CLI::Option *epochs_opt{}, *batch_opt{}, *fp_opt{}, *tf_opt{}, *lr_opt{}, *decay_opt{}, *bidir_opt{},
        *random_opt{}, *seed_opt{};
};

const std::set<std::string> kFinetuneKeys = {"epochs", "batch_size", "forecast_positions", "test_fraction", "lr",
                                             "weight_decay", "bidirectional_forecast", "random_init", "seed"};

FinetuneConfig resolve_finetune(const FinetuneArgs& a, const Resolver& r, DownstreamTask task) {
    FinetuneConfig c;
    c.task = task;
    c.epochs = r.get("epochs", a.epochs_opt, a.epochs, c.epochs);
    c.batch_size = r.get("batch_size", a.batch_opt, a.batch, c.batch_size);
    c.forecast_positions = r.get<std::size_t>("forecast_positions", a.fp_opt, a.forecast_positions, 0);
    c.test_fraction = r.get("test_fraction", a.tf_opt, a.test_fraction, c.test_fraction);
    c.adam.lr = r.get("lr", a.lr_opt, a.lr, c.adam.lr);
    c.adam.weight_decay = r.get("weight_decay", a.decay_opt, a.decay, c.adam.weight_decay);
    c.bidirectional_forecast = r.get("bidirectional_forecast", a.bidir_opt, a.bidirectional, false);
    c.seed = r.seed(a.seed_opt, a.seed);
    c.validate();
    return c;
}

std::string format_pct(double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << v;
    return s.str();
}

int finetune_cmd(const FinetuneArgs& a, const std::vector<std::string>& args, std::ostream& out) {
    const Resolver r(a.config, kFinetuneKeys);
    require_file(a.ckpt, "checkpoint");
    require_dir(a.corpus, "corpus");
    const DownstreamTask task = parse_task(a.task);
    const FinetuneConfig config = resolve_finetune(a, r, task);
    const bool random_init = r.get("random_init", a.random_opt, a.random_init, false);
    const Checkpoint ckpt = load_checkpoint(a.ckpt);
    const CorpusBundle corpus = load_corpus(a.corpus);
    const VideoSplit split = split_videos(corpus.videos.size(), config.test_fraction, config.seed);

    TunedModel model = make_downstream_model(random_init ? nullptr : &ckpt, ckpt.config, corpus, task, config.seed);
    finetune(model, corpus, split.train, config);
    const EvalReport report = evaluate(model, corpus, split.test, config.bidirectional_forecast);

    StagedDir dir(a.out);
    save_checkpoint(dir.path() / "model.pivt", Checkpoint{model.config, model.params, std::nullopt});
    save_report(dir.path() / "report.json", report);
    if (!(load_checkpoint(dir.path() / "model.pivt").params == model.params)) throw Error("tuned model round trip failed");
    auto m = start_manifest("finetune", args);
    m.seed = config.seed;
    m.config = to_json(config);
    m.config["random_init"] = random_init;
    m.config["model"] = to_json(model.config);
    m.inputs = {{"checkpoint", a.ckpt}, {"corpus", a.corpus}};
    m.outputs = {{"model", "model.pivt"}, {"report", "report.json"}};
    m.extra = {{"train_videos", split.train},
               {"test_videos", split.test},
               {"checkpoint_checksum", file_checksum(a.ckpt)},
               {"corpus_digest", tree_digest(checksum_tree(a.corpus))}};
    dir.commit(m);
    out << to_string(task) << " accuracy " << format_pct(report.accuracy) << " on " << report.n << " samples\n";
    return 0;
}

struct EvalArgs {
    std::string model, corpus, task, out = "report.json", split = "test", config;
    double test_fraction = 0.3;
    bool bidirectional = false;
    std::uint64_t seed = 0;
    CLI::Option *tf_opt{}, *seed_opt{}, *bidir_opt{}, *split_opt{};
};

int eval_cmd(const EvalArgs& a, const std::vector<std::string>& args, std::ostream& out) {
    const Resolver r(a.config, {"test_fraction", "seed", "bidirectional_forecast", "split"});
    require_file(a.model, "model");
    require_dir(a.corpus, "corpus");
    const DownstreamTask task = parse_task(a.task);
    const std::uint64_t seed = r.seed(a.seed_opt, a.seed);
    const double test_fraction = r.get("test_fraction", a.tf_opt, a.test_fraction, 0.3);
    const bool bidirectional = r.get("bidirectional_forecast", a.bidir_opt, a.bidirectional, false);
    const std::string split_name = r.get<std::string>("split", a.split_opt, a.split, "test");
    if (split_name != "test" && split_name != "all") throw ValidationError("--split must be test or all");

    const Checkpoint ckpt = load_checkpoint(a.model);
    if (ckpt.config.purpose != to_string(task)) {
        throw ValidationError(a.model + " holds a '" + ckpt.config.purpose + "' model, not a " + to_string(task) +
                              " model");
    }
    const CorpusBundle corpus = load_corpus(a.corpus);
    std::vector<std::size_t> videos;
    if (split_name == "all") {
        videos.resize(corpus.videos.size());
        for (std::size_t i = 0; i < videos.size(); ++i) videos[i] = i;
    } else {
        videos = split_videos(corpus.videos.size(), test_fraction, seed).test;
    }
    const TunedModel model{task, ckpt.config, ckpt.params};
    const EvalReport report = evaluate(model, corpus, videos, bidirectional);

    auto m = start_manifest("eval", args);
    m.seed = seed;
    m.config = {{"task", to_string(task)}, {"split", split_name}, {"test_fraction", test_fraction},
                {"bidirectional_forecast", bidirectional}};
    m.inputs = {{"model", a.model}, {"corpus", a.corpus}};
    m.outputs = {{"report", a.out}};
    m.extra = {{"model_checksum", file_checksum(a.model)}, {"videos", videos}};
    write_file_with_manifest(a.out, to_json(report).dump(2) + "\n", m);
    out << to_string(task) << " accuracy " << format_pct(report.accuracy) << " on " << report.n << " samples\n";
    return 0;
}

// ---------------------------------------------------------------- report

struct ReportArgs {
    std::vector<std::string> runs;
    std::string out;
};

struct RunRow {
    std::string run;
    std::map<std::string, double> accuracy; // task -> percent
};

RunRow collect_run(const fs::path& dir) {
    require_dir(dir, "run");
    RunRow row{dir.string(), {}};
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file() && e.path().filename() == "report.json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        json j;
        try {
            j = json::parse(read_file(f));
        } catch (const json::parse_error& e) {
            throw FormatError(f.string() + ": " + e.what());
        }
        const auto task = j.at("task").get<std::string>();
        if (row.accuracy.count(task)) throw ValidationError(dir.string() + " holds more than one " + task + " report");
        row.accuracy[task] = j.at("accuracy").get<double>();
    }
    if (row.accuracy.empty()) throw ValidationError(dir.string() + " contains no report.json");
    return row;
}

int report_cmd(const ReportArgs& a, const std::vector<std::string>& args, std::ostream& out) {
    std::vector<RunRow> rows;
    for (const auto& r : a.runs) rows.push_back(collect_run(r));
    const char* cols[] = {"sf", "sr", "tr"};
    auto cell = [](const RunRow& r, const char* t) {
        const auto it = r.accuracy.find(t);
        return it == r.accuracy.end() ? std::string("-") : format_pct(it->second);
    };

    std::string csv = "run,SF,SR,TR\n";
    for (const auto& r : rows) csv += r.run + "," + cell(r, "sf") + "," + cell(r, "sr") + "," + cell(r, "tr") + "\n";

    std::size_t w = 3;
    for (const auto& r : rows) w = std::max(w, r.run.size());
    std::ostringstream text;
    text << std::left << std::setw(static_cast<int>(w)) << "run" << std::right;
    for (const char* c : {"SF", "SR", "TR"}) text << std::setw(9) << c;
    text << "\n";
    for (const auto& r : rows) {
        text << std::left << std::setw(static_cast<int>(w)) << r.run << std::right;
        for (const char* c : cols) text << std::setw(9) << cell(r, c);
        text << "\n";
    }
    out << text.str();

    if (!a.out.empty()) {
        auto m = start_manifest("report", args);
        m.inputs["runs"] = json(a.runs).dump();
        m.outputs = {{"csv", a.out + ".csv"}, {"text", a.out + ".txt"}};
        write_file_with_manifest(a.out + ".csv", csv, m);
        write_file_with_manifest(a.out + ".txt", text.str(), m);
    }
    return 0;
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Procedure-aware pre-training of clip encoders at desk scale"};
    app.require_subcommand(1);

    GenCorpusArgs gc;
    auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic corpus");
    gen->add_option("--out", gc.out, "Output directory")->required();
    gc.seed_opt = gen->add_option("--seed", gc.seed, "Generator seed (falls back to PIVOT_SEED)");
    gc.preset_opt = gen->add_option("--preset", gc.preset, "desk, large, transfer or plant");
    gen->add_option("--config", gc.config, "JSON config file");

    MineArgs mn;
    auto* mine_app = app.add_subcommand("mine", "Mine step pseudo-labels, hierarchy paths and topics");
    mine_app->add_option("--corpus", mn.corpus, "Corpus directory")->required();
    mn.k_opt = mine_app->add_option("--k", mn.k, "Labels kept per clip");
    mine_app->add_option("--out", mn.out, "Output JSONL file")->required();
    mine_app->add_option("--config", mn.config, "JSON config file");

    PretrainArgs pt;
    auto* pre = app.add_subcommand("pretrain", "Joint step and hierarchy pre-training");
    pre->add_option("--corpus", pt.corpus, "Corpus directory")->required();
    pre->add_option("--labels", pt.labels, "Mined labels (JSONL)")->required();
    pre->add_option("--out", pt.out, "Run directory")->required();
    pt.thresh_opt = pre->add_flag("--thresh", pt.thresh, "Drop clips whose top-1 dot is not above --tau");
    pt.tau_opt = pre->add_option("--tau", pt.tau, "Threshold value");
    pt.in_task_opt = pre->add_flag("--in-task", pt.in_task, "Keep clips labelled with the topic's steps");
    pt.sort_opt = pre->add_flag("--sort", pt.sort, "Reorder clips by task step order");
    pt.unique_opt = pre->add_flag("--unique", pt.unique, "One clip per run of equal labels");
    pt.swap_opt = pre->add_flag("--swap", pt.swap, "Random adjacent swaps");
    pt.swap_prob_opt = pre->add_option("--swap-prob", pt.swap_prob, "Swap probability");
    pt.pool_opt = pre->add_option("--pool", pt.pool, "mean or tfenc");
    pt.cls_opt = pre->add_flag("--cls-token", pt.cls, "Prepend a learned token to the second layer");
    pt.epochs_opt = pre->add_option("--epochs", pt.epochs, "Training epochs");
    pt.batch_opt = pre->add_option("--batch", pt.batch, "Videos per batch");
    pt.interval_opt = pre->add_option("--interval", pt.interval, "Checkpoint interval in epochs");
    pt.lr_opt = pre->add_option("--lr", pt.lr, "Adam learning rate");
    pt.decay_opt = pre->add_option("--decay", pt.decay, "Weight decay");
    pt.decoupled_opt = pre->add_flag("--decoupled", pt.decoupled, "Decoupled weight decay");
    pt.seed_opt = pre->add_option("--seed", pt.seed, "Training seed (falls back to PIVOT_SEED)");
    pre->add_option("--config", pt.config, "JSON config file");

    AnalyzeArgs an;
    auto* ana = app.add_subcommand("analyze-stop", "Pick a checkpoint from the accuracy curve");
    ana->add_option("--metrics", an.metrics, "metrics.csv")->required();
    an.degree_opt = ana->add_option("--degree", an.degree, "Polynomial degree");
    an.patience_opt = ana->add_option("--patience", an.patience, "Saturation window in epochs");
    ana->add_option("--out", an.out, "Output file (default: stop_analysis.json beside the metrics)");
    ana->add_option("--config", an.config, "JSON config file");

    FinetuneArgs ft;
    auto* fin = app.add_subcommand("finetune", "Fine-tune on a downstream task and evaluate on held-out videos");
    fin->add_option("--ckpt", ft.ckpt, "Pre-trained checkpoint")->required();
    fin->add_option("--corpus", ft.corpus, "Downstream corpus directory")->required();
    fin->add_option("--task", ft.task, "tr, sr or sf")->required();
    fin->add_option("--out", ft.out, "Output directory")->required();
    ft.epochs_opt = fin->add_option("--epochs", ft.epochs, "Fine-tuning epochs");
    ft.batch_opt = fin->add_option("--batch", ft.batch, "Videos per batch");
    ft.fp_opt = fin->add_option("--forecast-positions", ft.forecast_positions,
                                "Forecast positions per video per epoch (0 = all)");
    ft.tf_opt = fin->add_option("--test-fraction", ft.test_fraction, "Held-out share of videos");
    ft.lr_opt = fin->add_option("--lr", ft.lr, "Adam learning rate");
    ft.decay_opt = fin->add_option("--decay", ft.decay, "Weight decay");
    ft.bidir_opt = fin->add_flag("--bidirectional", ft.bidirectional, "Forecast with clips after the mask too");
    ft.random_opt = fin->add_flag("--random-init", ft.random_init, "Ignore the checkpoint weights");
    ft.seed_opt = fin->add_option("--seed", ft.seed, "Seed (falls back to PIVOT_SEED)");
    fin->add_option("--config", ft.config, "JSON config file");

    EvalArgs ev;
    auto* eva = app.add_subcommand("eval", "Evaluate a fine-tuned model");
    eva->add_option("--model", ev.model, "Fine-tuned model")->required();
    eva->add_option("--corpus", ev.corpus, "Downstream corpus directory")->required();
    eva->add_option("--task", ev.task, "tr, sr or sf")->required();
    eva->add_option("--out", ev.out, "Report file");
    ev.split_opt = eva->add_option("--split", ev.split, "test or all");
    ev.tf_opt = eva->add_option("--test-fraction", ev.test_fraction, "Held-out share of videos");
    ev.bidir_opt = eva->add_flag("--bidirectional", ev.bidirectional, "Forecast with clips after the mask too");
    ev.seed_opt = eva->add_option("--seed", ev.seed, "Split seed (falls back to PIVOT_SEED)");
    eva->add_option("--config", ev.config, "JSON config file");

    ReportArgs rp;
    auto* rep = app.add_subcommand("report", "Tabulate SF/SR/TR accuracy across runs");
    rep->add_option("--runs", rp.runs, "Run directories holding report.json files")->required();
    rep->add_option("--out", rp.out, "Prefix for .csv and .txt outputs");

    std::vector<const char*> argv;
    for (const auto& s : args) argv.push_back(s.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (*gen) return gen_corpus(gc, args, out);
        if (*mine_app) return mine(mn, args, out);
        if (*pre) return pretrain_cmd(pt, args, out);
        if (*ana) return analyze_stop_cmd(an, args, out);
        if (*fin) return finetune_cmd(ft, args, out);
        if (*eva) return eval_cmd(ev, args, out);
        if (*rep) return report_cmd(rp, args, out);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

} // namespace pivot::cli
