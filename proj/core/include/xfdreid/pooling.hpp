#pragma once

#include <cstdint>

#include "xfdreid/common.hpp"
#include "xfdreid/datamodel.hpp"

namespace xfdreid {

enum class PoolingMode { mean, attn };

PoolingMode pooling_mode_from_string(const std::string& s);
const char* pooling_mode_name(PoolingMode m);

struct AttentionPoolParams {
  Vec w;  // length C
  bool trainable = true;
};

struct PooledEmbedding {
  Vec z;       // length C
  Vec alphas;  // length T, non-negative, sums to 1
  std::int64_t tracklet_index = -1;
};

struct NeckParams {
  bool enabled = false;
  double epsilon = 1e-5;
  Vec scale;  // per-channel affine; empty = no affine
  Vec shift;

  bool has_affine() const { return scale.size() > 0; }
};

PooledEmbedding mean_pool(const FrameFeatureSequence& seq);

// s_t = dot(w, f_t)
Vec attention_scores(const FrameFeatureSequence& seq, const AttentionPoolParams& params);

// Softmax over the temporal axis, stabilized by max-subtraction.
Vec attention_weights(const Vec& scores);

struct AttentionPoolCache {
  Vec scores;
  Vec alphas;
  bool valid = false;
};

PooledEmbedding attention_pool(const FrameFeatureSequence& seq, const AttentionPoolParams& params);
PooledEmbedding attention_pool(const FrameFeatureSequence& seq, const AttentionPoolParams& params,
                               AttentionPoolCache& cache);

struct AttentionPoolGrads {
  Vec grad_w;      // length C
  Mat grad_frames; // T x C
};

// Chain rule through z = sum_t alpha_t f_t with alpha = softmax(w^T f).
AttentionPoolGrads attention_pool_backward(const FrameFeatureSequence& seq,
                                           const AttentionPoolParams& params, const Vec& grad_z,
                                           const AttentionPoolCache& cache);

struct InstanceNormCache {
  Vec xhat;
  double inv_std = 0.0;
  bool valid = false;
};

// Standardizes one embedding across its channels, then applies the optional affine.
Vec instance_norm_neck(const Vec& z, const NeckParams& neck);
Vec instance_norm_neck(const Vec& z, const NeckParams& neck, InstanceNormCache& cache);

struct InstanceNormGrads {
  Vec grad_z;
  Vec grad_scale;  // empty when no affine
  Vec grad_shift;
};

InstanceNormGrads instance_norm_backward(const NeckParams& neck, const Vec& grad_out,
                                         const InstanceNormCache& cache);

Vec l2_normalize(const Vec& z);
// Gradient of L wrt z given grad wrt y = z/|z|.
Vec l2_normalize_backward(const Vec& z, const Vec& grad_y);

Vec flip_average(const Vec& z_orig, const Vec& z_flip);

// Fixed inference pipeline: pool -> instance norm -> flip average -> l2 normalize.
// flip_seq may be null. In f32 mode the arithmetic runs in float end to end.
Vec embed_tracklet(const FrameFeatureSequence& seq, const FrameFeatureSequence* flip_seq,
                   PoolingMode mode, const AttentionPoolParams* attn, const NeckParams& neck,
                   Precision precision = Precision::f64);

}  // namespace xfdreid
