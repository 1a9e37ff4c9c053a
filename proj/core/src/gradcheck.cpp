#include "xfdreid/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include "xfdreid/pooling.hpp"
#include "xfdreid/training.hpp"

namespace xfdreid {

double gradient_rel_err(const Vec& analytic, const Vec& numeric) {
  const double na = analytic.norm();
  const double nn = numeric.norm();
  const double denom = std::max({na, nn, 1e-8});
  return (analytic - numeric).norm() / denom;
}

double GradCheckResult::worst() const {
  double w = 0.0;
  for (const auto& e : entries) w = std::max(w, e.max_rel_err);
  return w;
}

bool GradCheckResult::all_below(double tolerance) const {
  for (const auto& e : entries)
    if (!(e.max_rel_err < tolerance)) return false;
  return !entries.empty();
}

namespace {

struct Trial {
  std::vector<FrameFeatureSequence> seqs;
  std::vector<const FrameFeatureSequence*> seq_ptrs;
  std::vector<int> labels;
  TrainableParams params;
  LossWeights weights;
  TripletConfig triplet;
  double label_smoothing = 0.1;
};

Trial make_trial(std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int t_choices[] = {1, 2, 8, 16};
  const int c_choices[] = {4, 8, 16};
  const int t_len = t_choices[rng() % 4];
  const int dim = c_choices[rng() % 3];
  const int num_ids = 2 + static_cast<int>(rng() % 4);  // 2..5
  const int batch = 4 + static_cast<int>(rng() % 5);    // 4..8

  Trial trial;
  trial.labels.resize(batch);
  // guarantee >= 2 identities and one identity with >= 2 samples
  trial.labels[0] = 0;
  trial.labels[1] = 0;
  trial.labels[2] = 1;
  for (int i = 3; i < batch; ++i) trial.labels[i] = static_cast<int>(rng() % num_ids);

  trial.seqs.resize(batch);
  for (int i = 0; i < batch; ++i) {
    trial.seqs[static_cast<std::size_t>(i)].tracklet_index = i;
    trial.seqs[static_cast<std::size_t>(i)].frames.resize(t_len, dim);
    for (int t = 0; t < t_len; ++t)
      for (int c = 0; c < dim; ++c)
        trial.seqs[static_cast<std::size_t>(i)].frames(t, c) = gauss(rng);
  }
  for (auto& s : trial.seqs) trial.seq_ptrs.push_back(&s);

  const bool neck_on = dim >= 2 && (rng() % 2 == 0);
  trial.params = init_trainable_params(num_ids, dim, neck_on, rng());
  for (Eigen::Index i = 0; i < trial.params.attention.w.size(); ++i)
    trial.params.attention.w(i) = 0.5 * gauss(rng);
  for (Eigen::Index i = 0; i < trial.params.classifier_weight.size(); ++i)
    trial.params.classifier_weight.data()[i] = 0.3 * gauss(rng);
  for (Eigen::Index i = 0; i < trial.params.classifier_bias.size(); ++i)
    trial.params.classifier_bias(i) = 0.1 * gauss(rng);
  for (Eigen::Index i = 0; i < trial.params.identity_memory.size(); ++i)
    trial.params.identity_memory.data()[i] = gauss(rng);
  if (neck_on) {
    for (Eigen::Index i = 0; i < trial.params.neck.scale.size(); ++i) {
      trial.params.neck.scale(i) = 1.0 + 0.2 * gauss(rng);
      trial.params.neck.shift(i) = 0.2 * gauss(rng);
    }
  }
  trial.params.log_temperature = std::log(0.07) + 0.3 * gauss(rng);
  return trial;
}

double trial_loss(const Trial& trial, const TrainableParams& params) {
  return compute_batch_gradients(trial.seq_ptrs, trial.labels, params, trial.weights,
                                 trial.triplet, trial.label_smoothing, PoolingMode::attn)
      .losses.total;
}

Vec numeric_gradient(const Trial& trial, TrainableParams& params, double* data, std::size_t size,
                     double h) {
  Vec grad(static_cast<Eigen::Index>(size));
  for (std::size_t i = 0; i < size; ++i) {
    const double saved = data[i];
    data[i] = saved + h;
    const double up = trial_loss(trial, params);
    data[i] = saved - h;
    const double down = trial_loss(trial, params);
    data[i] = saved;
    grad(static_cast<Eigen::Index>(i)) = (up - down) / (2.0 * h);
  }
  return grad;
}

Vec flat(const Mat& m) {
  return Eigen::Map<const Vec>(m.data(), m.size());
}

}  // namespace

GradCheckResult run_gradcheck(const GradCheckConfig& config) {
  std::map<std::string, double> worst;
  std::mt19937_64 rng(mix_seed(config.seed, 0xfd));
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double h = config.fd_step;

  for (int trial_idx = 0; trial_idx < config.trials; ++trial_idx) {
    Trial trial = make_trial(rng);
    TrainableParams& p = trial.params;
    const BatchGradients bg =
        compute_batch_gradients(trial.seq_ptrs, trial.labels, p, trial.weights, trial.triplet,
                                trial.label_smoothing, PoolingMode::attn);

    auto check = [&](const char* name, const Vec& analytic, double* data, std::size_t size) {
      const Vec numeric = numeric_gradient(trial, p, data, size, h);
      const double err = gradient_rel_err(analytic, numeric);
      worst[name] = std::max(worst[name], err);
    };

    check("total_loss/attention_w", bg.grad_attention_w, p.attention.w.data(),
          static_cast<std::size_t>(p.attention.w.size()));
    check("total_loss/classifier_weight", flat(bg.losses.grad_classifier_weight),
          p.classifier_weight.data(), static_cast<std::size_t>(p.classifier_weight.size()));
    check("total_loss/classifier_bias", bg.losses.grad_classifier_bias, p.classifier_bias.data(),
          static_cast<std::size_t>(p.classifier_bias.size()));
    check("total_loss/identity_memory", flat(bg.losses.grad_identity_memory),
          p.identity_memory.data(), static_cast<std::size_t>(p.identity_memory.size()));
    if (p.neck.has_affine()) {
      check("total_loss/neck_scale", bg.grad_neck_scale, p.neck.scale.data(),
            static_cast<std::size_t>(p.neck.scale.size()));
      check("total_loss/neck_shift", bg.grad_neck_shift, p.neck.shift.data(),
            static_cast<std::size_t>(p.neck.shift.size()));
    }
    check("total_loss/log_temperature", Vec::Constant(1, bg.losses.grad_log_temperature),
          &p.log_temperature, 1);

    // attention pooling on its own, scalar probe loss dot(grad_z, z)
    {
      const FrameFeatureSequence& seq = trial.seqs[0];
      Vec probe(seq.dim());
      for (Eigen::Index i = 0; i < probe.size(); ++i) probe(i) = gauss(rng);

      AttentionPoolCache cache;
      attention_pool(seq, p.attention, cache);
      const AttentionPoolGrads ag = attention_pool_backward(seq, p.attention, probe, cache);

      auto pool_loss = [&](const FrameFeatureSequence& s) {
        return probe.dot(attention_pool(s, p.attention).z);
      };
      Vec numeric_w(p.attention.w.size());
      for (Eigen::Index i = 0; i < p.attention.w.size(); ++i) {
        const double saved = p.attention.w(i);
        p.attention.w(i) = saved + h;
        const double up = pool_loss(seq);
        p.attention.w(i) = saved - h;
        const double down = pool_loss(seq);
        p.attention.w(i) = saved;
        numeric_w(i) = (up - down) / (2.0 * h);
      }
      worst["attention_pool/w"] =
          std::max(worst["attention_pool/w"], gradient_rel_err(ag.grad_w, numeric_w));

      FrameFeatureSequence mutable_seq = seq;
      Vec numeric_f(mutable_seq.frames.size());
      for (Eigen::Index i = 0; i < mutable_seq.frames.size(); ++i) {
        const double saved = mutable_seq.frames.data()[i];
        mutable_seq.frames.data()[i] = saved + h;
        const double up = pool_loss(mutable_seq);
        mutable_seq.frames.data()[i] = saved - h;
        const double down = pool_loss(mutable_seq);
        mutable_seq.frames.data()[i] = saved;
        numeric_f(i) = (up - down) / (2.0 * h);
      }
      worst["attention_pool/frames"] = std::max(
          worst["attention_pool/frames"], gradient_rel_err(flat(ag.grad_frames), numeric_f));
    }
  }

  GradCheckResult result;
  result.trials = config.trials;
  for (const auto& [name, err] : worst) result.entries.push_back({name, err});
  return result;
}

std::string format_gradcheck(const GradCheckResult& result) {
  std::ostringstream out;
  out << "gradient check over " << result.trials << " random configurations\n";
  char line[128];
  for (const auto& e : result.entries) {
    std::snprintf(line, sizeof(line), "  %-28s max rel err %.3e\n", e.tensor.c_str(),
                  e.max_rel_err);
    out << line;
  }
  return out.str();
}

}  // namespace xfdreid
