#pragma once

// Joint step/path pre-training with per-epoch metrics and periodic checkpoints.

#include "pivot/augment.hpp"
#include "pivot/corpus.hpp"
#include "pivot/earlystop.hpp"
#include "pivot/mining.hpp"
#include "pivot/model.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace pivot {

struct TrainConfig {
    int epochs = 2000;
    std::size_t batch_size = 256;
    AdamConfig adam;
    int checkpoint_interval = 50;
    std::uint64_t seed = 0;
    AugmentConfig augment;
    ModelConfig model;          // num_steps and path_sizes are filled in from the corpus
    std::size_t poly_degree = 10;
    int patience = 50;
    double holdout_fraction = 0.1;
    LossWeights loss_weights;

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Fields missing from `j` keep the values in `base`.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
nlohmann::json to_json(const AugmentConfig& c);

struct EpochRecord {
    int epoch = 0;
    double step_acc = 0.0;           // held-out clip-step top-1 accuracy
    double loss_step = 0.0;
    double loss_path = 0.0;
    double loss_joint = 0.0;
    std::vector<double> path_acc;    // held-out accuracy per hierarchy level
    std::size_t clip_positions = 0;  // clips fed to the model this epoch
    bool joint_identity = true;      // every batch had joint == step + path bitwise
};

struct MetricSeries {
    std::vector<EpochRecord> records;

    std::vector<double> step_acc() const;
    /// epoch,step_acc,loss_step,loss_path,loss_joint
    std::string to_csv() const;
};

MetricSeries read_metrics_csv(const std::filesystem::path& path);

/// Node index of each path entry within its level.
std::vector<int> path_targets(const CorpusBundle& corpus, const HierarchyPath& path);

/// Model config sized to the corpus step catalog and hierarchy.
ModelConfig model_config_for(const CorpusBundle& corpus, ModelConfig base);

/// Deterministic held-out video indices.
std::vector<std::size_t> holdout_indices(std::size_t videos, double fraction, std::uint64_t seed);

struct PretrainResult {
    ModelConfig config;
    ModelParams params;
    AdamState adam;
    MetricSeries metrics;
    std::vector<int> saved_epochs;
    std::vector<std::size_t> holdout;
    std::size_t truncated_videos = 0;
};

struct PretrainOptions {
    std::optional<std::filesystem::path> out_dir; // checkpoints and metrics.csv; nothing written if unset
    std::function<void(const EpochRecord&)> on_epoch;
};

PretrainResult pretrain(const CorpusBundle& corpus, std::span<const VideoLabels> labels, const TrainConfig& config,
                        const PretrainOptions& options = {});

/// Held-out step and per-level path accuracy of a model on raw (unaugmented) videos.
struct HeldoutScore {
    double step_acc = 0.0;
    std::vector<double> path_acc;
};
HeldoutScore score_heldout(const ModelParams& params, const ModelConfig& config, const CorpusBundle& corpus,
                           std::span<const VideoLabels> labels, std::span<const std::size_t> videos);

std::string checkpoint_name(int epoch);

} // namespace pivot
