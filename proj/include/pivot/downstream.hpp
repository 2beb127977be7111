#pragma once

// Fine-tuning and evaluation on a transfer corpus: task recognition from the
// pooled video embedding, step recognition from layer-1 outputs, and step
// forecasting from a masked prefix.

#include "pivot/corpus.hpp"
#include "pivot/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace pivot {

enum class DownstreamTask { task_recognition, step_recognition, step_forecasting };

/// "tr", "sr", "sf".
std::string to_string(DownstreamTask t);
DownstreamTask parse_task(std::string_view s);

struct FinetuneConfig {
    DownstreamTask task = DownstreamTask::task_recognition;
    std::size_t batch_size = 16;
    int epochs = 100;
    AdamConfig adam;
    std::uint64_t seed = 0;
    double test_fraction = 0.3;
    bool bidirectional_forecast = false; // also show clips after the masked one
    std::size_t forecast_positions = 0;  // sampled per video per epoch; 0 = every labelled position

    void validate() const;
};

nlohmann::json to_json(const FinetuneConfig& c);

struct VideoSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

/// Seeded split of video indices; both sides non-empty when there are two or more videos.
VideoSplit split_videos(std::size_t videos, double test_fraction, std::uint64_t seed);

struct TunedModel {
    DownstreamTask task = DownstreamTask::task_recognition;
    ModelConfig config;
    ModelParams params;
};

/// Encoder from `pretrained` (or freshly initialized from `arch` when null),
/// new heads sized to the corpus label space, a zero mask vector for forecasting.
TunedModel make_downstream_model(const Checkpoint* pretrained, const ModelConfig& arch, const CorpusBundle& corpus,
                                 DownstreamTask task, std::uint64_t seed);

/// Trains every parameter with softmax cross-entropy on the task labels.
void finetune(TunedModel& model, const CorpusBundle& corpus, std::span<const std::size_t> train_videos,
              const FinetuneConfig& config, const std::function<void(int, const TunedModel&)>& on_epoch = {});

struct ClassCount {
    std::size_t n = 0;
    std::size_t correct = 0;
};

struct EvalReport {
    DownstreamTask task = DownstreamTask::task_recognition;
    double accuracy = 0.0; // percent
    std::size_t n = 0;
    std::size_t correct = 0;
    std::map<int, ClassCount> per_class; // keyed by task_id or step_id
};

nlohmann::json to_json(const EvalReport& r);
void save_report(const std::filesystem::path& path, const EvalReport& r);

EvalReport eval_task_recognition(const TunedModel& model, const CorpusBundle& corpus,
                                 std::span<const std::size_t> videos);
EvalReport eval_step_recognition(const TunedModel& model, const CorpusBundle& corpus,
                                 std::span<const std::size_t> videos);
EvalReport eval_step_forecasting(const TunedModel& model, const CorpusBundle& corpus,
                                 std::span<const std::size_t> videos, bool bidirectional = false);
EvalReport evaluate(const TunedModel& model, const CorpusBundle& corpus, std::span<const std::size_t> videos,
                    bool bidirectional = false);

/// Clips 1..i with clip i replaced by the mask (i is 1-indexed, i >= 2).
/// The masked slot holds zeros, never the real embedding.
struct ForecastInput {
    std::vector<Embedding> clips;
    std::vector<std::uint8_t> masked;
    int target_step = -1; // gold step of clip i
};

ForecastInput build_forecast_input(const VideoRecord& video, std::size_t i, bool bidirectional = false);

/// Class index used by the heads: position of the task/step in the corpus catalog.
int task_class(const CorpusBundle& corpus, int task_id);
int step_class(const CorpusBundle& corpus, int step_id);

} // namespace pivot
