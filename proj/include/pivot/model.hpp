#pragma once

// Transformer encoder with step and hierarchy-path heads, hand-derived
// gradients, Adam, and the binary checkpoint format.

#include "pivot/common.hpp"
#include "pivot/kernels.hpp"
#include "pivot/rng.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace pivot {

enum class Pooling { mean, tfenc };

std::string to_string(Pooling p);
Pooling parse_pooling(std::string_view s);

struct ModelConfig {
    std::size_t dim = 64;
    std::size_t heads = 4;
    std::size_t ff_dim = 256;
    std::size_t head_hidden = 64;       // hidden width of every MLP head
    Pooling pooling = Pooling::mean;
    std::size_t num_steps = 0;          // step head width, 0 = no step head
    std::vector<std::size_t> path_sizes; // one video-level head per entry
    std::size_t max_seq_len = 128;
    double dropout = 0.1;
    bool positional_encoding = true;
    bool cls_token = false;             // learned token prepended to the second layer's input
    bool mask_token = false;            // learned replacement for masked input positions
    std::string purpose = "pretrain";

    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct EncoderLayerParams {
    Matrix ln1_g, ln1_b;
    Matrix wq, bq, wk, bk, wv, bv, wo, bo;
    Matrix ln2_g, ln2_b;
    Matrix w1, b1, w2, b2;

    friend bool operator==(const EncoderLayerParams&, const EncoderLayerParams&) = default;
};

/// Two affine maps with a ReLU between them.
struct MlpHeadParams {
    Matrix w1, b1, w2, b2;

    friend bool operator==(const MlpHeadParams&, const MlpHeadParams&) = default;
};

struct ModelParams {
    EncoderLayerParams layer1;
    std::optional<EncoderLayerParams> layer2; // tfenc pooling only
    std::optional<Matrix> cls;
    std::optional<Matrix> mask;
    std::optional<MlpHeadParams> step_head;
    std::vector<MlpHeadParams> path_heads;

    /// Every parameter block in the fixed serialization order.
    std::vector<std::pair<std::string, Matrix*>> blocks();
    std::vector<std::pair<std::string, const Matrix*>> blocks() const;
    std::size_t parameter_count() const;

    /// Same structure, all zeros.
    ModelParams zeros_like() const;
    /// Rounds every value to the nearest float32 (the checkpoint precision).
    void round_to_float32();

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

EncoderLayerParams init_encoder_layer(const ModelConfig& config, Rng& rng);
MlpHeadParams init_head(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng);

/// Padded batch. Valid positions of each video form a prefix of its row.
struct Batch {
    std::size_t dim = 0;
    std::size_t max_len = 0;
    std::vector<std::size_t> lengths;     // valid positions per video
    Matrix clips;                         // [B * max_len] x dim, zero where padded
    std::vector<std::uint8_t> masked;     // [B * max_len], 1 = input replaced by the mask token
    Matrix step_targets;                  // [B * max_len] x num_steps multi-hot, or empty
    std::vector<int> step_class;          // [B * max_len] single class, -1 = no target; or empty
    std::vector<std::vector<int>> path_targets; // [B][levels], -1 = no target

    std::size_t batch_size() const { return lengths.size(); }
    std::size_t positions() const;
    bool valid(std::size_t b, std::size_t i) const { return i < lengths[b]; }
    void validate(const ModelConfig& config) const;
};

/// One sequence to pack into a batch.
struct SequenceExample {
    std::vector<std::span<const double>> clips;
    std::vector<std::uint8_t> masked;            // empty = nothing masked
    std::vector<std::vector<int>> step_labels;   // multi-hot ids per position (may be empty)
    std::vector<int> step_class;                 // per position, -1 = none (may be empty)
    std::vector<int> path_targets;
};

Batch make_batch(std::span<const SequenceExample> examples, const ModelConfig& config);

struct LayerCache;

/// Everything the backward pass needs from a forward pass.
struct ForwardState {
    struct Segment {
        std::size_t offset;
        std::size_t length;
    };
    std::vector<Segment> segments;       // packed layer-1 rows per video
    std::vector<std::size_t> packed_row; // padded index -> packed row (or npos)
    Matrix x0;                           // packed layer-1 input
    std::shared_ptr<LayerCache> layer1;
    std::shared_ptr<LayerCache> layer2;
    std::vector<Segment> segments2;
    Matrix h1;                           // packed layer-1 output
    Matrix pooled;                       // [B x d]
    Matrix step_hidden_pre, step_hidden; // step head internals
    Matrix step_logits;                  // [P x num_steps]
    std::vector<Matrix> path_hidden_pre, path_hidden;
    std::vector<Matrix> path_logits;     // per level [B x size]

    std::vector<std::uint8_t> relu_signature() const;
};

/// Forward pass. Dropout is applied only when `dropout_rng` is non-null.
ForwardState forward(const ModelParams& params, const ModelConfig& config, const Batch& batch,
                     Rng* dropout_rng = nullptr);

/// Layer-1 outputs as a padded [B * max_len] x d matrix; padding rows are zero.
Matrix encoder_forward(const ModelParams& params, const ModelConfig& config, const Batch& batch);

/// Pooled video embeddings [B x d].
Matrix pool_video(const ModelParams& params, const ModelConfig& config, const Batch& batch);

struct LossWeights {
    double step = 1.0;
    double path = 1.0;
};

struct Losses {
    double step = 0.0;  // batch mean of per-video sums
    double path = 0.0;
    double joint = 0.0; // step + path
};

struct LossGradients {
    Matrix d_step_logits;              // [P x num_steps] or empty
    std::vector<Matrix> d_path_logits; // per level or empty
};

/// Sigmoid cross-entropy against multi-hot step targets plus softmax
/// cross-entropy per hierarchy level.
Losses pretrain_losses(const ForwardState& fwd, const Batch& batch, const LossWeights& weights = {},
                       LossGradients* grads = nullptr);

/// Softmax cross-entropy for single-class step targets and/or a single
/// video-level head (downstream tasks).
Losses classification_losses(const ForwardState& fwd, const Batch& batch, LossGradients* grads = nullptr);

/// Gradients of the loss whose logit gradients are given.
ModelParams backward(const ModelParams& params, const ModelConfig& config, const Batch& batch,
                     const ForwardState& fwd, const LossGradients& dlogits);

/// Convenience: forward + pretrain loss + backward.
struct LossAndGrad {
    Losses losses;
    ModelParams grads;
};
LossAndGrad pretrain_loss_and_grad(const ModelParams& params, const ModelConfig& config, const Batch& batch,
                                   const LossWeights& weights = {}, Rng* dropout_rng = nullptr);

// ------------------------------------------------------------------ Adam

struct AdamConfig {
    double lr = 1e-4;
    double weight_decay = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    bool decoupled = false; // false: decay added to the gradient (L2)
};

struct AdamState {
    ModelParams m;
    ModelParams v;
    std::uint64_t step = 0;

    static AdamState for_params(const ModelParams& p);
};

/// Throws NumericError naming the block if any gradient is non-finite.
void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, const AdamConfig& config);

// ------------------------------------------------------------------ gradient check

struct GradCheckOptions {
    double epsilon = 1e-3;
    double denominator_floor = 1e-3;
    std::function<void(ModelParams&)> tamper; // applied to analytic gradients (negative controls)
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_block;
    std::size_t checked = 0;
    std::size_t skipped_kinks = 0;
};

/// Tiny model used by the gradient checks: d=8, h=2, N<=3, B=2.
ModelConfig tiny_model_config(Pooling pooling);

/// Analytic vs central-difference gradients of the joint loss over every parameter.
GradCheckReport grad_check(const ModelConfig& config, std::uint64_t seed, const GradCheckOptions& options = {});

// ------------------------------------------------------------------ checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig config;
    ModelParams params;
    std::optional<AdamState> adam;
};

/// "PIVT", u32 version, config JSON (u32 length + bytes), u32 block count,
/// per block: name, u32 rows, u32 cols, rows*cols f32. Then u8 has_adam and,
/// if set, u64 step plus first and second moments in block order. Trailing
/// u64 FNV-1a checksum of everything before it. All little-endian.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace pivot
