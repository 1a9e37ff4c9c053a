#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "xfdreid/common.hpp"
#include "xfdreid/datamodel.hpp"
#include "xfdreid/pooling.hpp"

namespace xfdreid {

struct LossWeights {
  double lambda_id = 0.25;
  double lambda_tri = 1.0;
  double lambda_i2t = 1.0;
  double lambda_t2i = 1.0;
};

struct TripletConfig {
  bool soft_margin = true;  // softplus(d_p - d_n); hinge max(0, m + d_p - d_n) otherwise
  double margin = 0.3;
};

struct TrainableParams {
  AttentionPoolParams attention;
  Mat classifier_weight;  // num_ids x C
  Vec classifier_bias;    // num_ids
  Mat identity_memory;    // num_ids x C, per-identity proxy embeddings
  NeckParams neck;
  double log_temperature = 0.0;  // tau = exp(log_temperature)

  int num_ids() const { return static_cast<int>(classifier_weight.rows()); }
  int feature_dim() const { return static_cast<int>(classifier_weight.cols()); }
};

// w starts at zero so the attention head begins exactly at the mean-pooling
// baseline; classifier and memory are seeded Gaussian, tau = 0.07.
TrainableParams init_trainable_params(int num_ids, int feature_dim, bool neck_enabled,
                                      std::uint64_t seed);

// -------------------------------------------------------------------- schedule

enum class Stage { stage1, stage2 };

Stage stage_from_int(int v);
int stage_to_int(Stage s);

struct ScheduleConfig {
  double base_lr = 2e-4;
  double min_lr = 2e-6;
  int warmup_epochs = 0;
  double warmup_start_factor = 0.1;  // in (0, 1]
  int max_epochs = 50;
  Stage stage = Stage::stage1;
};

void validate_schedule(const ScheduleConfig& cfg);

// Linear warmup for epoch < warmup_epochs, then cosine annealing from base_lr
// down to min_lr at the final epoch.
double lr_at(int epoch, const ScheduleConfig& cfg);

struct ParamGroup {
  std::string name;
  bool trainable = true;
  double lr_multiplier = 1.0;
  double weight_decay = 0.0;
};

struct ParamGroupPlan {
  std::vector<ParamGroup> groups;
  const ParamGroup& find(const std::string& name) const;
};

double effective_lr(const ParamGroup& group, int epoch, const ScheduleConfig& cfg);

// -------------------------------------------------------------------- losses

struct IdLossResult {
  double loss = 0.0;
  Mat grad_z;       // B x C
  Mat grad_weight;  // num_ids x C
  Vec grad_bias;
};

// Mean cross-entropy of classifier logits with label smoothing.
IdLossResult id_loss(const Mat& z, const std::vector<int>& labels, const Mat& weight,
                     const Vec& bias, double label_smoothing);

struct TripletLossResult {
  double loss = 0.0;
  Mat grad_z;
  int num_anchors = 0;
};

// Batch-hard triplet over Euclidean distances of l2-normalized embeddings.
TripletLossResult triplet_loss(const Mat& z, const std::vector<int>& labels,
                               const TripletConfig& cfg = {});

struct CrossModalResult {
  double loss_i2t = 0.0;
  double loss_t2i = 0.0;
  Mat grad_z_i2t, grad_z_t2i;
  Mat grad_memory_i2t, grad_memory_t2i;
  double grad_log_temperature_i2t = 0.0;
  double grad_log_temperature_t2i = 0.0;
};

// Symmetric temperature-scaled InfoNCE between batch embeddings and the
// per-identity memory table; both sides l2-normalized on the fly. t2i handles
// multiple positives per identity by summing their target probabilities.
CrossModalResult cross_modal_losses(const Mat& z, const std::vector<int>& labels,
                                    const Mat& identity_memory, double log_temperature);

struct TotalLossResult {
  double total = 0.0, id = 0.0, tri = 0.0, i2t = 0.0, t2i = 0.0;
  Mat grad_z;  // B x C, wrt the embeddings fed to the losses
  Mat grad_classifier_weight;
  Vec grad_classifier_bias;
  Mat grad_identity_memory;
  double grad_log_temperature = 0.0;
};

TotalLossResult total_loss(const Mat& z, const std::vector<int>& labels,
                           const TrainableParams& params, const LossWeights& weights,
                           const TripletConfig& tri_cfg, double label_smoothing);

// Full forward/backward over a batch of sequences: pool -> neck -> losses.
struct BatchGradients {
  TotalLossResult losses;
  Vec grad_attention_w;
  Vec grad_neck_scale, grad_neck_shift;
};

BatchGradients compute_batch_gradients(const std::vector<const FrameFeatureSequence*>& batch,
                                       const std::vector<int>& labels,
                                       const TrainableParams& params, const LossWeights& weights,
                                       const TripletConfig& tri_cfg, double label_smoothing,
                                       PoolingMode mode);

// -------------------------------------------------------------------- sampler

// P identities x K samples per batch. Identities are re-permuted every epoch;
// identities with fewer than K tracklets are sampled with replacement.
class PxKSampler {
 public:
  PxKSampler(const std::vector<TrackletRecord>& train_records, int ids_per_batch,
             int samples_per_id, std::uint64_t seed);

  // Batches of indices into the record vector given at construction.
  std::vector<std::vector<std::size_t>> epoch_batches(int epoch) const;

  int num_identities() const { return static_cast<int>(ids_.size()); }
  int batch_size() const { return ids_per_batch_ * samples_per_id_; }

 private:
  std::vector<int> ids_;                              // sorted distinct person ids
  std::vector<std::vector<std::size_t>> id_records_;  // per id, record indices
  int ids_per_batch_;
  int samples_per_id_;
  std::uint64_t seed_;
};

// ------------------------------------------------------------------- optimizer

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adaptive-moment update with bias correction. Weight decay is folded into the
// gradient as lambda_wd * theta. One step counter shared by all tensors,
// incremented once per step() call.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(AdamConfig cfg = {}) : cfg_(cfg) {}

  struct Update {
    std::string tensor;
    double* param = nullptr;
    const double* grad = nullptr;
    std::size_t size = 0;
    double lr = 0.0;
    double weight_decay = 0.0;
  };

  void step(const std::vector<Update>& updates);
  int step_count() const { return step_count_; }

 private:
  AdamConfig cfg_;
  int step_count_ = 0;
  std::map<std::string, std::pair<Vec, Vec>> moments_;  // first, second
};

// ------------------------------------------------------------------ train loop

struct TrainConfig {
  Stage stage = Stage::stage1;
  std::string preset = "ours";  // "ours" | "baseline"
  ScheduleConfig schedule;
  int ids_per_batch = 12;  // P
  int samples_per_id = 4;  // K
  double weight_decay = 1e-4;
  double weight_decay_bias = 1e-4;
  LossWeights loss_weights;
  TripletConfig triplet;
  double label_smoothing = 0.1;
  bool neck_enabled = true;
  PoolingMode mode = PoolingMode::attn;
  AdamConfig adam;
  std::uint64_t seed = 0;
  std::vector<ParamGroup> param_groups;  // resolved plan

  int batch_size() const { return ids_per_batch * samples_per_id; }
};

TrainConfig default_train_config(Stage stage, const std::string& preset = "ours");

// Layered resolution: stage/preset defaults, then config-file JSON, then
// override JSON (CLI flags). Either JSON text may be empty.
TrainConfig resolve_train_config(Stage stage, const std::string& preset,
                                 const std::string& config_json_text,
                                 const std::string& override_json_text);

std::string train_config_to_json_text(const TrainConfig& cfg);

// Sorted distinct person ids of the train split; label = index in this list.
std::vector<int> distinct_train_ids(const std::vector<TrackletRecord>& records);

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double total = 0.0, id = 0.0, tri = 0.0, i2t = 0.0, t2i = 0.0;
};

struct TrainResult {
  TrainableParams params;
  std::vector<EpochStats> history;
};

TrainResult train(const Dataset& dataset, const TrainConfig& config);
TrainResult train(const Dataset& dataset, const TrainConfig& config,
                  const TrainableParams& initial);

// ---------------------------------------------------------------- head on disk

struct HeadFile {
  TrainableParams params;
  PoolingMode mode = PoolingMode::attn;
  std::string meta_json;  // provenance: resolved config, seed, input hashes
};

void save_head(const std::string& path, const HeadFile& head);
HeadFile load_head(const std::string& path);

}  // namespace xfdreid
