#include "xfdreid/pooling.hpp"

#include <cmath>

namespace xfdreid {

namespace {

template <typename S>
using MatT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using VecT = Eigen::Matrix<S, Eigen::Dynamic, 1>;

// Single weighted-sum kernel shared by mean and attention pooling so that
// uniform attention weights reproduce mean pooling bit for bit.
template <typename S>
VecT<S> weighted_sum(const MatT<S>& frames, const VecT<S>& alphas) {
  VecT<S> z = VecT<S>::Zero(frames.cols());
  for (Eigen::Index t = 0; t < frames.rows(); ++t)
    z += alphas(t) * frames.row(t).transpose();
  return z;
}

template <typename S>
VecT<S> softmax_stable(const VecT<S>& scores) {
  const S m = scores.maxCoeff();
  VecT<S> e(scores.size());
  for (Eigen::Index t = 0; t < scores.size(); ++t) e(t) = std::exp(scores(t) - m);
  const S sum = e.sum();
  for (Eigen::Index t = 0; t < e.size(); ++t) e(t) /= sum;
  return e;
}

template <typename S>
VecT<S> instance_norm_t(const VecT<S>& z, S epsilon, const VecT<S>& scale, const VecT<S>& shift) {
  const Eigen::Index c = z.size();
  const S mu = z.mean();
  const S var = (z.array() - mu).square().sum() / S(c);
  const S inv_std = S(1) / std::sqrt(var + epsilon);
  VecT<S> out = (z.array() - mu) * inv_std;
  if (scale.size() > 0) out = (out.array() * scale.array()) + shift.array();
  return out;
}

template <typename S>
VecT<S> l2_normalize_t(const VecT<S>& z) {
  const S n = z.norm();
  if (!(n > S(0))) fail(Errc::zero_vector, "cannot l2-normalize a zero vector");
  return z / n;
}

template <typename S>
VecT<S> embed_pipeline(const MatT<S>& frames, const MatT<S>* flip_frames, PoolingMode mode,
                       const VecT<S>* w, bool neck_enabled, S neck_eps, const VecT<S>& neck_scale,
                       const VecT<S>& neck_shift) {
  auto pool_one = [&](const MatT<S>& f) {
    VecT<S> alphas;
    if (mode == PoolingMode::mean) {
      alphas = VecT<S>::Constant(f.rows(), S(1) / S(f.rows()));
    } else {
      VecT<S> scores = f * (*w);
      alphas = softmax_stable<S>(scores);
    }
    VecT<S> z = weighted_sum<S>(f, alphas);
    if (neck_enabled) z = instance_norm_t<S>(z, neck_eps, neck_scale, neck_shift);
    return z;
  };

  VecT<S> z = pool_one(frames);
  if (flip_frames) {
    VecT<S> zf = pool_one(*flip_frames);
    z = ((z + zf) / S(2)).eval();
  }
  return l2_normalize_t<S>(z);
}

void require_dim(const FrameFeatureSequence& seq, const AttentionPoolParams& params) {
  if (params.w.size() != seq.dim())
    fail(Errc::dim_mismatch, "attention vector has length " + std::to_string(params.w.size()) +
                                 " but frames have " + std::to_string(seq.dim()) + " channels");
}

}  // namespace

PoolingMode pooling_mode_from_string(const std::string& s) {
  if (s == "mean") return PoolingMode::mean;
  if (s == "attn") return PoolingMode::attn;
  fail(Errc::bad_config, "pooling mode must be mean or attn, got '" + s + "'");
}

const char* pooling_mode_name(PoolingMode m) { return m == PoolingMode::mean ? "mean" : "attn"; }

PooledEmbedding mean_pool(const FrameFeatureSequence& seq) {
  PooledEmbedding out;
  out.tracklet_index = seq.tracklet_index;
  out.alphas = Vec::Constant(seq.seq_len(), 1.0 / static_cast<double>(seq.seq_len()));
  out.z = weighted_sum<double>(seq.frames, out.alphas);
  return out;
}

Vec attention_scores(const FrameFeatureSequence& seq, const AttentionPoolParams& params) {
  require_dim(seq, params);
  return seq.frames * params.w;
}

Vec attention_weights(const Vec& scores) { return softmax_stable<double>(scores); }

PooledEmbedding attention_pool(const FrameFeatureSequence& seq, const AttentionPoolParams& params) {
  AttentionPoolCache cache;
  return attention_pool(seq, params, cache);
}

PooledEmbedding attention_pool(const FrameFeatureSequence& seq, const AttentionPoolParams& params,
                               AttentionPoolCache& cache) {
  require_dim(seq, params);
  cache.scores = attention_scores(seq, params);
  cache.alphas = attention_weights(cache.scores);
  cache.valid = true;

  PooledEmbedding out;
  out.tracklet_index = seq.tracklet_index;
  out.alphas = cache.alphas;
  out.z = weighted_sum<double>(seq.frames, cache.alphas);
  return out;
}

AttentionPoolGrads attention_pool_backward(const FrameFeatureSequence& seq,
                                           const AttentionPoolParams& params, const Vec& grad_z,
                                           const AttentionPoolCache& cache) {
  if (!cache.valid) fail(Errc::stale_cache, "attention backward called without a cached forward");
  require_dim(seq, params);
  if (grad_z.size() != seq.dim()) fail(Errc::dim_mismatch, "grad_z length != feature dim");
  if (cache.alphas.size() != seq.seq_len())
    fail(Errc::stale_cache, "cached forward does not match this sequence");

  const Eigen::Index t_len = seq.seq_len();
  const Vec& alphas = cache.alphas;

  // g_t = dL/dalpha_t; softmax backward gives dL/ds_t = alpha_t (g_t - sum_k alpha_k g_k).
  Vec g = seq.frames * grad_z;
  const double g_mean = alphas.dot(g);
  Vec grad_s(t_len);
  for (Eigen::Index t = 0; t < t_len; ++t) grad_s(t) = alphas(t) * (g(t) - g_mean);

  AttentionPoolGrads out;
  out.grad_w = seq.frames.transpose() * grad_s;
  out.grad_frames.resize(t_len, seq.dim());
  for (Eigen::Index t = 0; t < t_len; ++t)
    out.grad_frames.row(t) = alphas(t) * grad_z.transpose() + grad_s(t) * params.w.transpose();
  return out;
}

Vec instance_norm_neck(const Vec& z, const NeckParams& neck) {
  InstanceNormCache cache;
  return instance_norm_neck(z, neck, cache);
}

Vec instance_norm_neck(const Vec& z, const NeckParams& neck, InstanceNormCache& cache) {
  if (!neck.enabled) {
    cache.valid = true;
    cache.xhat.resize(0);
    return z;
  }
  if (z.size() < 2)
    fail(Errc::too_few_channels, "instance norm needs at least 2 channels");
  if (!(neck.epsilon > 0)) fail(Errc::bad_config, "instance norm epsilon must be > 0");
  if (neck.has_affine() && (neck.scale.size() != z.size() || neck.shift.size() != z.size()))
    fail(Errc::dim_mismatch, "affine vectors must have length C");

  const double mu = z.mean();
  const double var = (z.array() - mu).square().sum() / static_cast<double>(z.size());
  cache.inv_std = 1.0 / std::sqrt(var + neck.epsilon);
  cache.xhat = (z.array() - mu) * cache.inv_std;
  cache.valid = true;

  if (neck.has_affine()) return (cache.xhat.array() * neck.scale.array()) + neck.shift.array();
  return cache.xhat;
}

InstanceNormGrads instance_norm_backward(const NeckParams& neck, const Vec& grad_out,
                                         const InstanceNormCache& cache) {
  if (!cache.valid) fail(Errc::stale_cache, "instance norm backward without a cached forward");
  InstanceNormGrads out;
  if (!neck.enabled) {
    out.grad_z = grad_out;
    return out;
  }
  if (cache.xhat.size() != grad_out.size())
    fail(Errc::stale_cache, "cached forward does not match grad_out");

  const Eigen::Index c = grad_out.size();
  Vec gxhat = grad_out;
  if (neck.has_affine()) {
    out.grad_scale = grad_out.array() * cache.xhat.array();
    out.grad_shift = grad_out;
    gxhat = grad_out.array() * neck.scale.array();
  }
  const double mean_g = gxhat.mean();
  const double mean_gx = gxhat.dot(cache.xhat) / static_cast<double>(c);
  out.grad_z =
      cache.inv_std * (gxhat.array() - mean_g - cache.xhat.array() * mean_gx);
  return out;
}

Vec l2_normalize(const Vec& z) { return l2_normalize_t<double>(z); }

Vec l2_normalize_backward(const Vec& z, const Vec& grad_y) {
  const double n = z.norm();
  if (!(n > 0)) fail(Errc::zero_vector, "cannot backpropagate through a zero vector norm");
  const Vec y = z / n;
  return (grad_y - y * y.dot(grad_y)) / n;
}

Vec flip_average(const Vec& z_orig, const Vec& z_flip) {
  if (z_orig.size() != z_flip.size())
    fail(Errc::dim_mismatch, "flip average requires equal lengths");
  return (z_orig + z_flip) / 2.0;
}

Vec embed_tracklet(const FrameFeatureSequence& seq, const FrameFeatureSequence* flip_seq,
                   PoolingMode mode, const AttentionPoolParams* attn, const NeckParams& neck,
                   Precision precision) {
  if (mode == PoolingMode::attn) {
    if (!attn) fail(Errc::bad_config, "attention pooling requires attention parameters");
    require_dim(seq, *attn);
  }
  if (flip_seq && (flip_seq->seq_len() != seq.seq_len() || flip_seq->dim() != seq.dim()))
    fail(Errc::dim_mismatch, "flipped sequence shape differs from the original");
  if (neck.enabled) {
    if (seq.dim() < 2) fail(Errc::too_few_channels, "instance norm needs at least 2 channels");
    if (neck.has_affine() && (neck.scale.size() != seq.dim() || neck.shift.size() != seq.dim()))
      fail(Errc::dim_mismatch, "affine vectors must have length C");
  }

  if (precision == Precision::f32) {
    const MatT<float> frames = seq.frames.cast<float>();
    MatT<float> flip_frames;
    if (flip_seq) flip_frames = flip_seq->frames.cast<float>();
    VecT<float> w;
    if (attn) w = attn->w.cast<float>();
    VecT<float> scale, shift;
    if (neck.has_affine()) {
      scale = neck.scale.cast<float>();
      shift = neck.shift.cast<float>();
    }
    VecT<float> z = embed_pipeline<float>(frames, flip_seq ? &flip_frames : nullptr, mode,
                                          attn ? &w : nullptr, neck.enabled,
                                          static_cast<float>(neck.epsilon), scale, shift);
    return z.cast<double>();
  }

  Vec scale, shift;
  if (neck.has_affine()) {
    scale = neck.scale;
    shift = neck.shift;
  }
  return embed_pipeline<double>(seq.frames, flip_seq ? &flip_seq->frames : nullptr, mode,
                                attn ? &attn->w : nullptr, neck.enabled, neck.epsilon, scale,
                                shift);
}

}  // namespace xfdreid
