#include "xfdreid/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

namespace xfdreid {

namespace {

using ordered_json = nlohmann::ordered_json;

Vec softmax_row_stable(const Vec& logits) {
  const double m = logits.maxCoeff();
  Vec e(logits.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i) e(i) = std::exp(logits(i) - m);
  const double s = e.sum();
  return e / s;
}

double softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Mat normalize_rows(const Mat& m) {
  Mat out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (!(n > 0)) fail(Errc::zero_vector, "row " + std::to_string(i) + " has zero norm");
    out.row(i) = m.row(i) / n;
  }
  return out;
}

// Backward of row-wise l2 normalization: given grad wrt normalized rows.
Mat normalize_rows_backward(const Mat& raw, const Mat& normalized, const Mat& grad_norm) {
  Mat out(raw.rows(), raw.cols());
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    const double n = raw.row(i).norm();
    const double proj = normalized.row(i).dot(grad_norm.row(i));
    out.row(i) = (grad_norm.row(i) - proj * normalized.row(i)) / n;
  }
  return out;
}

void check_labels(const std::vector<int>& labels, int num_ids) {
  for (int l : labels)
    if (l < 0 || l >= num_ids)
      fail(Errc::label_out_of_range,
           "label " + std::to_string(l) + " outside [0, " + std::to_string(num_ids) + ")");
}

}  // namespace

// ===================================================================== params

TrainableParams init_trainable_params(int num_ids, int feature_dim, bool neck_enabled,
                                      std::uint64_t seed) {
  if (num_ids < 1 || feature_dim < 1) fail(Errc::bad_config, "num_ids and feature_dim must be >= 1");
  TrainableParams p;
  p.attention.w = Vec::Zero(feature_dim);
  p.attention.trainable = true;

  std::mt19937_64 rng(mix_seed(seed, 0x11));
  std::normal_distribution<double> gauss(0.0, 1.0);

  p.classifier_weight.resize(num_ids, feature_dim);
  for (Eigen::Index i = 0; i < p.classifier_weight.rows(); ++i)
    for (Eigen::Index j = 0; j < p.classifier_weight.cols(); ++j)
      p.classifier_weight(i, j) = 0.01 * gauss(rng);
  p.classifier_bias = Vec::Zero(num_ids);

  p.identity_memory.resize(num_ids, feature_dim);
  for (Eigen::Index i = 0; i < p.identity_memory.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.identity_memory.cols(); ++j)
      p.identity_memory(i, j) = gauss(rng);
    p.identity_memory.row(i) /= p.identity_memory.row(i).norm();
  }

  p.neck.enabled = neck_enabled;
  p.neck.epsilon = 1e-5;
  if (neck_enabled) {
    p.neck.scale = Vec::Ones(feature_dim);
    p.neck.shift = Vec::Zero(feature_dim);
  }
  p.log_temperature = std::log(0.07);
  return p;
}

// =================================================================== schedule

Stage stage_from_int(int v) {
  if (v == 1) return Stage::stage1;
  if (v == 2) return Stage::stage2;
  fail(Errc::bad_config, "stage must be 1 or 2");
}

int stage_to_int(Stage s) { return s == Stage::stage1 ? 1 : 2; }

void validate_schedule(const ScheduleConfig& cfg) {
  if (!(cfg.min_lr > 0) || !(cfg.min_lr <= cfg.base_lr))
    fail(Errc::bad_config, "require 0 < min_lr <= base_lr");
  if (cfg.max_epochs < 1) fail(Errc::bad_config, "max_epochs must be >= 1");
  if (cfg.warmup_epochs < 0 || cfg.warmup_epochs >= cfg.max_epochs)
    fail(Errc::bad_config, "require 0 <= warmup_epochs < max_epochs");
  if (!(cfg.warmup_start_factor > 0) || cfg.warmup_start_factor > 1)
    fail(Errc::bad_config, "warmup_start_factor must lie in (0, 1]");
}

double lr_at(int epoch, const ScheduleConfig& cfg) {
  validate_schedule(cfg);
  if (epoch < 0 || epoch >= cfg.max_epochs)
    fail(Errc::epoch_out_of_range,
         "epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.max_epochs) + ")");
  const int warm = cfg.warmup_epochs;
  if (epoch < warm) {
    const double f = cfg.warmup_start_factor;
    return cfg.base_lr * (f + (1.0 - f) * static_cast<double>(epoch) / warm);
  }
  const int span = cfg.max_epochs - 1 - warm;
  if (span <= 0) return cfg.base_lr;
  const double frac = static_cast<double>(epoch - warm) / static_cast<double>(span);
  return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + std::cos(M_PI * frac));
}

const ParamGroup& ParamGroupPlan::find(const std::string& name) const {
  for (const auto& g : groups)
    if (g.name == name) return g;
  fail(Errc::bad_config, "unknown parameter group '" + name + "'");
}

double effective_lr(const ParamGroup& group, int epoch, const ScheduleConfig& cfg) {
  if (!group.trainable)
    fail(Errc::frozen_group, "group '" + group.name + "' is frozen and has no learning rate");
  return lr_at(epoch, cfg) * group.lr_multiplier;
}

// ===================================================================== losses

IdLossResult id_loss(const Mat& z, const std::vector<int>& labels, const Mat& weight,
                     const Vec& bias, double label_smoothing) {
  const Eigen::Index batch = z.rows();
  const Eigen::Index num_ids = weight.rows();
  if (batch == 0) fail(Errc::empty_batch, "id loss needs a non-empty batch");
  if (static_cast<Eigen::Index>(labels.size()) != batch)
    fail(Errc::dim_mismatch, "labels size != batch size");
  if (weight.cols() != z.cols() || bias.size() != num_ids)
    fail(Errc::dim_mismatch, "classifier shape does not match embeddings");
  check_labels(labels, static_cast<int>(num_ids));

  Mat logits = z * weight.transpose();
  logits.rowwise() += bias.transpose();

  IdLossResult out;
  Mat grad_logits(batch, num_ids);
  const double eps = label_smoothing;
  const double off = eps / static_cast<double>(num_ids);
  for (Eigen::Index i = 0; i < batch; ++i) {
    const Vec p = softmax_row_stable(logits.row(i).transpose());
    double loss_i = 0.0;
    for (Eigen::Index k = 0; k < num_ids; ++k) {
      const double q = off + (k == labels[i] ? 1.0 - eps : 0.0);
      if (q > 0) loss_i -= q * std::log(std::max(p(k), 1e-300));
      grad_logits(i, k) = (p(k) - q) / static_cast<double>(batch);
    }
    out.loss += loss_i / static_cast<double>(batch);
  }
  out.grad_weight = grad_logits.transpose() * z;
  out.grad_bias = grad_logits.colwise().sum().transpose();
  out.grad_z = grad_logits * weight;
  return out;
}

TripletLossResult triplet_loss(const Mat& z, const std::vector<int>& labels,
                               const TripletConfig& cfg) {
  const Eigen::Index batch = z.rows();
  if (batch < 2) fail(Errc::degenerate_batch, "triplet loss needs at least 2 samples");
  if (static_cast<Eigen::Index>(labels.size()) != batch)
    fail(Errc::dim_mismatch, "labels size != batch size");

  const Mat zn = normalize_rows(z);
  Mat dist(batch, batch);
  for (Eigen::Index a = 0; a < batch; ++a) {
    dist(a, a) = 0.0;
    for (Eigen::Index b = a + 1; b < batch; ++b) {
      const double d = (zn.row(a) - zn.row(b)).norm();
      dist(a, b) = d;
      dist(b, a) = d;
    }
  }

  struct Anchor {
    Eigen::Index a, pos, neg;
    double x;  // d_p - d_n (+ margin for hinge)
  };
  std::vector<Anchor> anchors;
  for (Eigen::Index a = 0; a < batch; ++a) {
    Eigen::Index hardest_pos = -1, hardest_neg = -1;
    double dp = -1.0, dn = std::numeric_limits<double>::infinity();
    for (Eigen::Index b = 0; b < batch; ++b) {
      if (b == a) continue;
      if (labels[b] == labels[a]) {
        if (dist(a, b) > dp) {
          dp = dist(a, b);
          hardest_pos = b;
        }
      } else if (dist(a, b) < dn) {
        dn = dist(a, b);
        hardest_neg = b;
      }
    }
    if (hardest_pos < 0 || hardest_neg < 0) continue;
    anchors.push_back({a, hardest_pos, hardest_neg,
                       cfg.soft_margin ? dp - dn : cfg.margin + dp - dn});
  }
  if (anchors.empty())
    fail(Errc::degenerate_batch, "no anchor has both a positive and a negative");

  TripletLossResult out;
  out.num_anchors = static_cast<int>(anchors.size());
  const double inv_a = 1.0 / static_cast<double>(anchors.size());
  Mat grad_zn = Mat::Zero(batch, z.cols());
  for (const auto& an : anchors) {
    double coef;
    if (cfg.soft_margin) {
      out.loss += softplus(an.x) * inv_a;
      coef = sigmoid(an.x) * inv_a;
    } else {
      const double h = std::max(0.0, an.x);
      out.loss += h * inv_a;
      coef = (an.x > 0) ? inv_a : 0.0;
    }
    const double dp = dist(an.a, an.pos);
    const double dn = dist(an.a, an.neg);
    if (dp > 0) {
      const Eigen::RowVectorXd dir = (zn.row(an.a) - zn.row(an.pos)) / dp;
      grad_zn.row(an.a) += coef * dir;
      grad_zn.row(an.pos) -= coef * dir;
    }
    if (dn > 0) {
      const Eigen::RowVectorXd dir = (zn.row(an.a) - zn.row(an.neg)) / dn;
      grad_zn.row(an.a) -= coef * dir;
      grad_zn.row(an.neg) += coef * dir;
    }
  }
  out.grad_z = normalize_rows_backward(z, zn, grad_zn);
  return out;
}

CrossModalResult cross_modal_losses(const Mat& z, const std::vector<int>& labels,
                                    const Mat& identity_memory, double log_temperature) {
  const Eigen::Index batch = z.rows();
  const Eigen::Index num_ids = identity_memory.rows();
  if (batch == 0) fail(Errc::empty_batch, "cross-modal loss needs a non-empty batch");
  if (static_cast<Eigen::Index>(labels.size()) != batch)
    fail(Errc::dim_mismatch, "labels size != batch size");
  if (identity_memory.cols() != z.cols())
    fail(Errc::dim_mismatch, "memory width does not match embeddings");
  check_labels(labels, static_cast<int>(num_ids));

  const Mat zn = normalize_rows(z);
  const Mat mn = normalize_rows(identity_memory);
  const double tau = std::exp(log_temperature);
  const Mat logits = (zn * mn.transpose()) / tau;  // batch x num_ids

  CrossModalResult out;

  // image -> identity memory: plain CE against the sample's own identity row
  Mat g_i2t = Mat::Zero(batch, num_ids);
  for (Eigen::Index i = 0; i < batch; ++i) {
    const Vec p = softmax_row_stable(logits.row(i).transpose());
    out.loss_i2t -= std::log(std::max(p(labels[i]), 1e-300)) / static_cast<double>(batch);
    for (Eigen::Index k = 0; k < num_ids; ++k)
      g_i2t(i, k) = (p(k) - (k == labels[i] ? 1.0 : 0.0)) / static_cast<double>(batch);
  }

  // identity memory -> batch: per distinct identity, multi-positive CE over the batch
  std::set<int> distinct(labels.begin(), labels.end());
  Mat g_t2i = Mat::Zero(batch, num_ids);
  const double inv_j = 1.0 / static_cast<double>(distinct.size());
  for (int j : distinct) {
    const Vec q = softmax_row_stable(logits.col(j));
    double pos_mass = 0.0;
    for (Eigen::Index b = 0; b < batch; ++b)
      if (labels[b] == j) pos_mass += q(b);
    out.loss_t2i -= std::log(std::max(pos_mass, 1e-300)) * inv_j;
    for (Eigen::Index b = 0; b < batch; ++b) {
      const double member = (labels[b] == j) ? 1.0 : 0.0;
      g_t2i(b, j) += inv_j * (q(b) - q(b) * member / pos_mass);
    }
  }

  auto backprop = [&](const Mat& g, Mat& grad_z_out, Mat& grad_mem_out, double& grad_tau_out) {
    grad_tau_out = -(g.array() * logits.array()).sum();
    const Mat grad_zn = (g / tau) * mn;
    const Mat grad_mn = (g.transpose() / tau) * zn;
    grad_z_out = normalize_rows_backward(z, zn, grad_zn);
    grad_mem_out = normalize_rows_backward(identity_memory, mn, grad_mn);
  };
  backprop(g_i2t, out.grad_z_i2t, out.grad_memory_i2t, out.grad_log_temperature_i2t);
  backprop(g_t2i, out.grad_z_t2i, out.grad_memory_t2i, out.grad_log_temperature_t2i);
  return out;
}

TotalLossResult total_loss(const Mat& z, const std::vector<int>& labels,
                           const TrainableParams& params, const LossWeights& weights,
                           const TripletConfig& tri_cfg, double label_smoothing) {
  if (weights.lambda_id < 0 || weights.lambda_tri < 0 || weights.lambda_i2t < 0 ||
      weights.lambda_t2i < 0)
    fail(Errc::bad_config, "loss weights must be non-negative");

  TotalLossResult out;
  out.grad_z = Mat::Zero(z.rows(), z.cols());
  out.grad_classifier_weight = Mat::Zero(params.classifier_weight.rows(), params.classifier_weight.cols());
  out.grad_classifier_bias = Vec::Zero(params.classifier_bias.size());
  out.grad_identity_memory = Mat::Zero(params.identity_memory.rows(), params.identity_memory.cols());

  if (weights.lambda_id > 0) {
    IdLossResult id = id_loss(z, labels, params.classifier_weight, params.classifier_bias,
                              label_smoothing);
    out.id = id.loss;
    out.grad_z += weights.lambda_id * id.grad_z;
    out.grad_classifier_weight += weights.lambda_id * id.grad_weight;
    out.grad_classifier_bias += weights.lambda_id * id.grad_bias;
  }
  if (weights.lambda_tri > 0) {
    TripletLossResult tri = triplet_loss(z, labels, tri_cfg);
    out.tri = tri.loss;
    out.grad_z += weights.lambda_tri * tri.grad_z;
  }
  if (weights.lambda_i2t > 0 || weights.lambda_t2i > 0) {
    CrossModalResult cm =
        cross_modal_losses(z, labels, params.identity_memory, params.log_temperature);
    out.i2t = cm.loss_i2t;
    out.t2i = cm.loss_t2i;
    if (weights.lambda_i2t > 0) {
      out.grad_z += weights.lambda_i2t * cm.grad_z_i2t;
      out.grad_identity_memory += weights.lambda_i2t * cm.grad_memory_i2t;
      out.grad_log_temperature += weights.lambda_i2t * cm.grad_log_temperature_i2t;
    }
    if (weights.lambda_t2i > 0) {
      out.grad_z += weights.lambda_t2i * cm.grad_z_t2i;
      out.grad_identity_memory += weights.lambda_t2i * cm.grad_memory_t2i;
      out.grad_log_temperature += weights.lambda_t2i * cm.grad_log_temperature_t2i;
    }
  }
  out.total = weights.lambda_id * out.id + weights.lambda_tri * out.tri +
              weights.lambda_i2t * out.i2t + weights.lambda_t2i * out.t2i;
  return out;
}

BatchGradients compute_batch_gradients(const std::vector<const FrameFeatureSequence*>& batch,
                                       const std::vector<int>& labels,
                                       const TrainableParams& params, const LossWeights& weights,
                                       const TripletConfig& tri_cfg, double label_smoothing,
                                       PoolingMode mode) {
  const std::size_t n = batch.size();
  if (n == 0) fail(Errc::empty_batch, "empty training batch");
  const Eigen::Index dim = batch[0]->dim();

  std::vector<AttentionPoolCache> attn_caches(n);
  std::vector<InstanceNormCache> neck_caches(n);
  Mat embeddings(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    PooledEmbedding pooled = (mode == PoolingMode::attn)
                                 ? attention_pool(*batch[i], params.attention, attn_caches[i])
                                 : mean_pool(*batch[i]);
    embeddings.row(i) = instance_norm_neck(pooled.z, params.neck, neck_caches[i]).transpose();
  }

  BatchGradients out;
  out.losses = total_loss(embeddings, labels, params, weights, tri_cfg, label_smoothing);
  out.grad_attention_w = Vec::Zero(params.attention.w.size());
  if (params.neck.has_affine()) {
    out.grad_neck_scale = Vec::Zero(dim);
    out.grad_neck_shift = Vec::Zero(dim);
  }

  for (std::size_t i = 0; i < n; ++i) {
    const Vec grad_e = out.losses.grad_z.row(i).transpose();
    InstanceNormGrads ng = instance_norm_backward(params.neck, grad_e, neck_caches[i]);
    if (params.neck.has_affine()) {
      out.grad_neck_scale += ng.grad_scale;
      out.grad_neck_shift += ng.grad_shift;
    }
    if (mode == PoolingMode::attn) {
      AttentionPoolGrads ag =
          attention_pool_backward(*batch[i], params.attention, ng.grad_z, attn_caches[i]);
      out.grad_attention_w += ag.grad_w;
    }
  }
  return out;
}

// ==================================================================== sampler

PxKSampler::PxKSampler(const std::vector<TrackletRecord>& train_records, int ids_per_batch,
                       int samples_per_id, std::uint64_t seed)
    : ids_per_batch_(ids_per_batch), samples_per_id_(samples_per_id), seed_(seed) {
  if (ids_per_batch < 1 || samples_per_id < 1)
    fail(Errc::bad_config, "P and K must be >= 1");
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < train_records.size(); ++i)
    by_id[train_records[i].person_id].push_back(i);
  for (auto& [id, recs] : by_id) {
    ids_.push_back(id);
    id_records_.push_back(std::move(recs));
  }
  if (static_cast<int>(ids_.size()) < ids_per_batch)
    fail(Errc::too_few_identities, "need at least " + std::to_string(ids_per_batch) +
                                       " identities, have " + std::to_string(ids_.size()));
}

std::vector<std::vector<std::size_t>> PxKSampler::epoch_batches(int epoch) const {
  std::mt19937_64 rng(mix_seed(seed_, static_cast<std::uint64_t>(epoch)));

  std::vector<std::size_t> order(ids_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);

  const std::size_t num_batches = order.size() / static_cast<std::size_t>(ids_per_batch_);
  std::vector<std::vector<std::size_t>> batches;
  batches.reserve(num_batches);
  for (std::size_t b = 0; b < num_batches; ++b) {
    std::vector<std::size_t> batch;
    batch.reserve(static_cast<std::size_t>(batch_size()));
    for (int p = 0; p < ids_per_batch_; ++p) {
      const auto& recs = id_records_[order[b * ids_per_batch_ + p]];
      if (recs.size() >= static_cast<std::size_t>(samples_per_id_)) {
        std::vector<std::size_t> pick = recs;
        std::shuffle(pick.begin(), pick.end(), rng);
        batch.insert(batch.end(), pick.begin(), pick.begin() + samples_per_id_);
      } else {
        std::uniform_int_distribution<std::size_t> draw(0, recs.size() - 1);
        for (int k = 0; k < samples_per_id_; ++k) batch.push_back(recs[draw(rng)]);
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

// ================================================================== optimizer

void AdamOptimizer::step(const std::vector<Update>& updates) {
  ++step_count_;
  const double t = static_cast<double>(step_count_);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  for (const auto& u : updates) {
    if (!u.param || !u.grad) fail(Errc::shape_mismatch, "null tensor in optimizer update");
    auto& [m, v] = moments_[u.tensor];
    if (m.size() == 0) {
      m = Vec::Zero(static_cast<Eigen::Index>(u.size));
      v = Vec::Zero(static_cast<Eigen::Index>(u.size));
    } else if (m.size() != static_cast<Eigen::Index>(u.size)) {
      fail(Errc::shape_mismatch, "tensor '" + u.tensor + "' changed size between steps");
    }
    for (std::size_t i = 0; i < u.size; ++i) {
      const double g = u.grad[i] + u.weight_decay * u.param[i];
      m(static_cast<Eigen::Index>(i)) =
          cfg_.beta1 * m(static_cast<Eigen::Index>(i)) + (1.0 - cfg_.beta1) * g;
      v(static_cast<Eigen::Index>(i)) =
          cfg_.beta2 * v(static_cast<Eigen::Index>(i)) + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m(static_cast<Eigen::Index>(i)) / bc1;
      const double vhat = v(static_cast<Eigen::Index>(i)) / bc2;
      u.param[i] -= u.lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
    }
  }
}

// ===================================================================== config

namespace {

std::vector<ParamGroup> default_param_groups(double weight_decay, double weight_decay_bias) {
  return {
      {"attention_w", true, 1.0, weight_decay},
      {"classifier_weight", true, 1.0, weight_decay},
      {"classifier_bias", true, 1.0, weight_decay_bias},
      {"identity_memory", true, 1.0, weight_decay},
      {"neck_affine", true, 1.0, 0.0},
      {"log_temperature", true, 1.0, 0.0},
  };
}

void apply_config_json(TrainConfig& cfg, const ordered_json& j,
                       std::map<std::string, ordered_json>& group_overrides) {
  for (const auto& [key, value] : j.items()) {
    if (key == "preset") {
      // handled by the caller before defaults were chosen
    } else if (key == "base_lr") {
      cfg.schedule.base_lr = value.get<double>();
    } else if (key == "min_lr") {
      cfg.schedule.min_lr = value.get<double>();
    } else if (key == "warmup_epochs") {
      cfg.schedule.warmup_epochs = value.get<int>();
    } else if (key == "warmup_start_factor") {
      cfg.schedule.warmup_start_factor = value.get<double>();
    } else if (key == "max_epochs") {
      cfg.schedule.max_epochs = value.get<int>();
    } else if (key == "ids_per_batch") {
      cfg.ids_per_batch = value.get<int>();
    } else if (key == "samples_per_id") {
      cfg.samples_per_id = value.get<int>();
    } else if (key == "batch_size") {
      // P x K split fixes K = 4 (48 -> 12x4, 24 -> 6x4)
      const int b = value.get<int>();
      if (b < 4 || b % 4 != 0) fail(Errc::bad_config, "batch_size must be a positive multiple of 4");
      cfg.samples_per_id = 4;
      cfg.ids_per_batch = b / 4;
    } else if (key == "weight_decay") {
      cfg.weight_decay = value.get<double>();
    } else if (key == "weight_decay_bias") {
      cfg.weight_decay_bias = value.get<double>();
    } else if (key == "lambda_id") {
      cfg.loss_weights.lambda_id = value.get<double>();
    } else if (key == "lambda_tri") {
      cfg.loss_weights.lambda_tri = value.get<double>();
    } else if (key == "lambda_i2t") {
      cfg.loss_weights.lambda_i2t = value.get<double>();
    } else if (key == "lambda_t2i") {
      cfg.loss_weights.lambda_t2i = value.get<double>();
    } else if (key == "soft_margin") {
      cfg.triplet.soft_margin = value.get<bool>();
    } else if (key == "margin") {
      cfg.triplet.margin = value.get<double>();
    } else if (key == "label_smoothing") {
      cfg.label_smoothing = value.get<double>();
    } else if (key == "instance_norm") {
      cfg.neck_enabled = value.get<bool>();
    } else if (key == "mode") {
      cfg.mode = pooling_mode_from_string(value.get<std::string>());
    } else if (key == "beta1") {
      cfg.adam.beta1 = value.get<double>();
    } else if (key == "beta2") {
      cfg.adam.beta2 = value.get<double>();
    } else if (key == "epsilon") {
      cfg.adam.epsilon = value.get<double>();
    } else if (key == "seed") {
      cfg.seed = value.get<std::uint64_t>();
    } else if (key == "param_groups") {
      for (const auto& [gname, gval] : value.items()) group_overrides[gname] = gval;
    } else {
      fail(Errc::bad_config, "unknown training config key '" + key + "'");
    }
  }
}

ordered_json parse_json_text(const std::string& text, const char* what) {
  try {
    return ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::bad_config, std::string(what) + ": " + e.what());
  }
}

}  // namespace

TrainConfig default_train_config(Stage stage, const std::string& preset) {
  TrainConfig cfg;
  cfg.stage = stage;
  cfg.preset = preset;
  if (preset == "ours") {
    if (stage == Stage::stage1) {
      cfg.schedule.base_lr = 2e-4;
      cfg.schedule.max_epochs = 50;
      cfg.ids_per_batch = 12;  // batch 48
      cfg.weight_decay = 1e-4;
    } else {
      cfg.schedule.base_lr = 1e-4;
      cfg.schedule.max_epochs = 40;
      cfg.ids_per_batch = 6;  // batch 24
      cfg.weight_decay = 2.5e-4;
    }
  } else if (preset == "baseline") {
    if (stage == Stage::stage1) {
      cfg.schedule.base_lr = 3.5e-4;
      cfg.schedule.max_epochs = 120;
      cfg.ids_per_batch = 4;  // batch 16
      cfg.weight_decay = 1e-4;
    } else {
      cfg.schedule.base_lr = 1e-4;
      cfg.schedule.max_epochs = 120;
      cfg.ids_per_batch = 4;
      cfg.weight_decay = 2.5e-4;
    }
  } else {
    fail(Errc::bad_config, "preset must be 'ours' or 'baseline', got '" + preset + "'");
  }
  cfg.samples_per_id = 4;
  cfg.weight_decay_bias = 1e-4;
  cfg.schedule.stage = stage;
  cfg.schedule.min_lr = 0.01 * cfg.schedule.base_lr;
  cfg.schedule.warmup_epochs = cfg.schedule.max_epochs / 10;
  cfg.schedule.warmup_start_factor = 0.1;
  cfg.param_groups = default_param_groups(cfg.weight_decay, cfg.weight_decay_bias);
  return cfg;
}

TrainConfig resolve_train_config(Stage stage, const std::string& preset,
                                 const std::string& config_json_text,
                                 const std::string& override_json_text) {
  std::string chosen_preset = preset;
  ordered_json file_json, override_json;
  if (!config_json_text.empty()) {
    file_json = parse_json_text(config_json_text, "config file");
    if (file_json.contains("preset")) chosen_preset = file_json["preset"].get<std::string>();
  }
  if (!override_json_text.empty()) {
    override_json = parse_json_text(override_json_text, "config overrides");
    if (override_json.contains("preset")) chosen_preset = override_json["preset"].get<std::string>();
  }

  TrainConfig cfg = default_train_config(stage, chosen_preset);
  std::map<std::string, ordered_json> group_overrides;
  if (!file_json.is_null()) apply_config_json(cfg, file_json, group_overrides);
  if (!override_json.is_null()) apply_config_json(cfg, override_json, group_overrides);

  cfg.param_groups = default_param_groups(cfg.weight_decay, cfg.weight_decay_bias);
  for (auto& [gname, gval] : group_overrides) {
    bool found = false;
    for (auto& g : cfg.param_groups) {
      if (g.name != gname) continue;
      found = true;
      if (gval.contains("trainable")) g.trainable = gval["trainable"].get<bool>();
      if (gval.contains("lr_multiplier")) g.lr_multiplier = gval["lr_multiplier"].get<double>();
      if (gval.contains("weight_decay")) g.weight_decay = gval["weight_decay"].get<double>();
    }
    if (!found) fail(Errc::bad_config, "unknown parameter group '" + gname + "'");
  }
  validate_schedule(cfg.schedule);
  return cfg;
}

std::string train_config_to_json_text(const TrainConfig& cfg) {
  ordered_json j;
  j["stage"] = stage_to_int(cfg.stage);
  j["preset"] = cfg.preset;
  j["base_lr"] = cfg.schedule.base_lr;
  j["min_lr"] = cfg.schedule.min_lr;
  j["lr_schedule"] = "cosine_annealing";
  j["warmup_epochs"] = cfg.schedule.warmup_epochs;
  j["warmup_start_factor"] = cfg.schedule.warmup_start_factor;
  j["max_epochs"] = cfg.schedule.max_epochs;
  j["batch_size"] = cfg.batch_size();
  j["ids_per_batch"] = cfg.ids_per_batch;
  j["samples_per_id"] = cfg.samples_per_id;
  j["weight_decay"] = cfg.weight_decay;
  j["weight_decay_bias"] = cfg.weight_decay_bias;
  j["lambda_id"] = cfg.loss_weights.lambda_id;
  j["lambda_tri"] = cfg.loss_weights.lambda_tri;
  j["lambda_i2t"] = cfg.loss_weights.lambda_i2t;
  j["lambda_t2i"] = cfg.loss_weights.lambda_t2i;
  j["soft_margin"] = cfg.triplet.soft_margin;
  j["margin"] = cfg.triplet.margin;
  j["label_smoothing"] = cfg.label_smoothing;
  j["instance_norm"] = cfg.neck_enabled;
  j["mode"] = pooling_mode_name(cfg.mode);
  j["beta1"] = cfg.adam.beta1;
  j["beta2"] = cfg.adam.beta2;
  j["epsilon"] = cfg.adam.epsilon;
  j["seed"] = cfg.seed;
  ordered_json groups;
  for (const auto& g : cfg.param_groups) {
    groups[g.name] = {{"trainable", g.trainable},
                      {"lr_multiplier", g.lr_multiplier},
                      {"weight_decay", g.weight_decay}};
  }
  j["param_groups"] = groups;
  return j.dump(2);
}

std::vector<int> distinct_train_ids(const std::vector<TrackletRecord>& records) {
  std::set<int> ids;
  for (const auto& r : records)
    if (r.split == Split::train) ids.insert(r.person_id);
  return {ids.begin(), ids.end()};
}

// ================================================================= train loop

TrainResult train(const Dataset& dataset, const TrainConfig& config) {
  const std::vector<int> ids = distinct_train_ids(dataset.records);
  if (ids.empty()) fail(Errc::bad_config, "train split is empty");
  TrainableParams init = init_trainable_params(static_cast<int>(ids.size()), dataset.feature_dim,
                                               config.neck_enabled, config.seed);

  // Warm-start the identity memory at the per-identity mean of the initial
  // (mean-pooled, necked) embeddings. Random rows under a 0.07 temperature
  // produce near-one-hot similarities in arbitrary directions, which can steer
  // the attention head away from the baseline before the other heads settle.
  std::map<int, int> row_of;
  for (std::size_t i = 0; i < ids.size(); ++i) row_of[ids[i]] = static_cast<int>(i);
  Mat sums = Mat::Zero(init.identity_memory.rows(), init.identity_memory.cols());
  std::vector<int> counts(ids.size(), 0);
  for (const auto& rec : dataset.records) {
    if (rec.split != Split::train) continue;
    const int row = row_of.at(rec.person_id);
    const Vec pooled = mean_pool(dataset.features_of(rec)).z;
    sums.row(row) += instance_norm_neck(pooled, init.neck).transpose();
    ++counts[static_cast<std::size_t>(row)];
  }
  for (Eigen::Index r = 0; r < sums.rows(); ++r) {
    sums.row(r) /= counts[static_cast<std::size_t>(r)];
    const double norm = sums.row(r).norm();
    if (norm > 0) init.identity_memory.row(r) = sums.row(r) / norm;
  }
  return train(dataset, config, init);
}

TrainResult train(const Dataset& dataset, const TrainConfig& config,
                  const TrainableParams& initial) {
  validate_schedule(config.schedule);

  std::vector<TrackletRecord> train_records;
  for (const auto& r : dataset.records)
    if (r.split == Split::train) train_records.push_back(r);
  if (train_records.empty()) fail(Errc::bad_config, "train split is empty");

  const std::vector<int> ids = distinct_train_ids(dataset.records);
  if (static_cast<int>(ids.size()) != initial.num_ids())
    fail(Errc::shape_mismatch, "initial parameters were built for a different identity count");
  if (dataset.feature_dim != initial.feature_dim())
    fail(Errc::shape_mismatch, "initial parameters were built for a different feature dim");
  std::map<int, int> label_of;
  for (std::size_t i = 0; i < ids.size(); ++i) label_of[ids[i]] = static_cast<int>(i);

  ParamGroupPlan plan{config.param_groups};
  auto group = [&](const char* name) -> const ParamGroup& { return plan.find(name); };

  TrainResult result;
  result.params = initial;
  TrainableParams& params = result.params;

  PxKSampler sampler(train_records, config.ids_per_batch, config.samples_per_id,
                     mix_seed(config.seed, 0x5a));
  AdamOptimizer optimizer(config.adam);

  for (int epoch = 0; epoch < config.schedule.max_epochs; ++epoch) {
    const double base = lr_at(epoch, config.schedule);
    EpochStats stats;
    stats.epoch = epoch;
    stats.lr = base;
    int batches_done = 0;

    for (const auto& batch_idx : sampler.epoch_batches(epoch)) {
      std::vector<const FrameFeatureSequence*> seqs;
      std::vector<int> labels;
      seqs.reserve(batch_idx.size());
      labels.reserve(batch_idx.size());
      for (std::size_t idx : batch_idx) {
        const TrackletRecord& rec = train_records[idx];
        seqs.push_back(&dataset.features_of(rec));
        labels.push_back(label_of.at(rec.person_id));
      }

      BatchGradients bg =
          compute_batch_gradients(seqs, labels, params, config.loss_weights, config.triplet,
                                  config.label_smoothing, config.mode);

      std::vector<AdamOptimizer::Update> updates;
      auto push = [&](const char* gname, const char* tensor, double* data, const double* grad,
                      std::size_t size) {
        const ParamGroup& g = group(gname);
        if (!g.trainable || size == 0) return;
        updates.push_back({tensor, data, grad, size, base * g.lr_multiplier, g.weight_decay});
      };
      if (config.mode == PoolingMode::attn)
        push("attention_w", "attention_w", params.attention.w.data(),
             bg.grad_attention_w.data(), static_cast<std::size_t>(params.attention.w.size()));
      push("classifier_weight", "classifier_weight", params.classifier_weight.data(),
           bg.losses.grad_classifier_weight.data(),
           static_cast<std::size_t>(params.classifier_weight.size()));
      push("classifier_bias", "classifier_bias", params.classifier_bias.data(),
           bg.losses.grad_classifier_bias.data(),
           static_cast<std::size_t>(params.classifier_bias.size()));
      push("identity_memory", "identity_memory", params.identity_memory.data(),
           bg.losses.grad_identity_memory.data(),
           static_cast<std::size_t>(params.identity_memory.size()));
      if (params.neck.has_affine()) {
        push("neck_affine", "neck_scale", params.neck.scale.data(), bg.grad_neck_scale.data(),
             static_cast<std::size_t>(params.neck.scale.size()));
        push("neck_affine", "neck_shift", params.neck.shift.data(), bg.grad_neck_shift.data(),
             static_cast<std::size_t>(params.neck.shift.size()));
      }
      push("log_temperature", "log_temperature", &params.log_temperature,
           &bg.losses.grad_log_temperature, 1);

      optimizer.step(updates);

      stats.total += bg.losses.total;
      stats.id += bg.losses.id;
      stats.tri += bg.losses.tri;
      stats.i2t += bg.losses.i2t;
      stats.t2i += bg.losses.t2i;
      ++batches_done;
    }

    if (batches_done > 0) {
      stats.total /= batches_done;
      stats.id /= batches_done;
      stats.tri /= batches_done;
      stats.i2t /= batches_done;
      stats.t2i /= batches_done;
    }
    result.history.push_back(stats);
  }
  return result;
}

// =============================================================== head on disk

namespace {

ordered_json vec_to_json(const Vec& v) {
  ordered_json a = ordered_json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

ordered_json mat_to_json(const Mat& m) {
  ordered_json rows = ordered_json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(vec_to_json(m.row(i).transpose()));
  return rows;
}

Vec vec_from_json(const ordered_json& a) {
  Vec v(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<Eigen::Index>(i)) = a[i].get<double>();
  return v;
}

Mat mat_from_json(const ordered_json& rows) {
  if (rows.empty()) return {};
  Mat m(rows.size(), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size())
      fail(Errc::shape_mismatch, "ragged matrix in head file");
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j].get<double>();
  }
  return m;
}

}  // namespace

void save_head(const std::string& path, const HeadFile& head) {
  ordered_json j;
  j["format"] = "xfdreid-head";
  j["version"] = 1;
  j["mode"] = pooling_mode_name(head.mode);
  j["num_ids"] = head.params.num_ids();
  j["feature_dim"] = head.params.feature_dim();
  j["attention_w"] = vec_to_json(head.params.attention.w);
  j["classifier_weight"] = mat_to_json(head.params.classifier_weight);
  j["classifier_bias"] = vec_to_json(head.params.classifier_bias);
  j["identity_memory"] = mat_to_json(head.params.identity_memory);
  ordered_json neck;
  neck["enabled"] = head.params.neck.enabled;
  neck["epsilon"] = head.params.neck.epsilon;
  neck["scale"] = vec_to_json(head.params.neck.scale);
  neck["shift"] = vec_to_json(head.params.neck.shift);
  j["neck"] = neck;
  j["log_temperature"] = head.params.log_temperature;
  if (!head.meta_json.empty()) j["meta"] = parse_json_text(head.meta_json, "head meta");

  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(Errc::io_error, "cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
}

HeadFile load_head(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::io_error, "cannot open head file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  ordered_json j = parse_json_text(buf.str(), "head file");
  if (!j.contains("format") || j["format"].get<std::string>() != "xfdreid-head")
    fail(Errc::bad_config, "'" + path + "' is not a head file");
  if (j["version"].get<int>() != 1)
    fail(Errc::bad_config, "unsupported head file version");

  HeadFile head;
  head.mode = pooling_mode_from_string(j["mode"].get<std::string>());
  head.params.attention.w = vec_from_json(j["attention_w"]);
  head.params.classifier_weight = mat_from_json(j["classifier_weight"]);
  head.params.classifier_bias = vec_from_json(j["classifier_bias"]);
  head.params.identity_memory = mat_from_json(j["identity_memory"]);
  const auto& neck = j["neck"];
  head.params.neck.enabled = neck["enabled"].get<bool>();
  head.params.neck.epsilon = neck["epsilon"].get<double>();
  head.params.neck.scale = vec_from_json(neck["scale"]);
  head.params.neck.shift = vec_from_json(neck["shift"]);
  head.params.log_temperature = j["log_temperature"].get<double>();
  if (j.contains("meta")) head.meta_json = j["meta"].dump(2);

  const int declared_ids = j["num_ids"].get<int>();
  const int declared_dim = j["feature_dim"].get<int>();
  if (head.params.num_ids() != declared_ids || head.params.feature_dim() != declared_dim)
    fail(Errc::shape_mismatch, "head file arrays do not match declared shape");
  if (head.params.attention.w.size() != declared_dim)
    fail(Errc::shape_mismatch, "attention vector length != feature_dim");
  return head;
}

}  // namespace xfdreid
