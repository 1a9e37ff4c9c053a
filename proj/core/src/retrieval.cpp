#include "xfdreid/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace xfdreid {

namespace {

double cosine_distance(const Mat& a, Eigen::Index i, const Mat& b, Eigen::Index j) {
  const double d = 1.0 - a.row(i).dot(b.row(j));
  return std::clamp(d, 0.0, 2.0);
}

using SparseVec = std::vector<std::pair<int, double>>;  // sorted by index

SparseVec l1_normalized(SparseVec v) {
  double sum = 0.0;
  for (const auto& [idx, val] : v) sum += val;
  for (auto& [idx, val] : v) val /= sum;
  return v;
}

}  // namespace

EmbeddingSet make_embedding_set(Mat embeddings, std::vector<TrackletRecord> records,
                                bool renormalize) {
  if (!records.empty() && static_cast<Eigen::Index>(records.size()) != embeddings.rows())
    fail(Errc::dim_mismatch, "record list does not match embedding rows");
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
    const double n = embeddings.row(i).norm();
    if (!(n > 0)) fail(Errc::zero_vector, "embedding row " + std::to_string(i) + " is zero");
    if (renormalize)
      embeddings.row(i) /= n;
    else if (std::abs(n - 1.0) > 1e-6)
      fail(Errc::value_out_of_range,
           "embedding row " + std::to_string(i) + " is not unit-norm (|.|=" + std::to_string(n) + ")");
  }
  EmbeddingSet set;
  set.embeddings = std::move(embeddings);
  set.records = std::move(records);
  return set;
}

DistanceMatrix cosine_distance_matrix(const EmbeddingSet& queries, const EmbeddingSet& gallery,
                                      int threads) {
  if (queries.dim() != gallery.dim())
    fail(Errc::dim_mismatch, "query and gallery embedding dims differ");
  DistanceMatrix out;
  out.stage = DistanceStage::raw_cosine;
  out.d.resize(queries.size(), gallery.size());
  parallel_for(static_cast<std::size_t>(queries.size()), threads, [&](std::size_t i) {
    for (Eigen::Index j = 0; j < gallery.size(); ++j)
      out.d(static_cast<Eigen::Index>(i), j) =
          cosine_distance(queries.embeddings, static_cast<Eigen::Index>(i), gallery.embeddings, j);
  });
  return out;
}

DistanceMatrix k_reciprocal_rerank(const EmbeddingSet& queries, const EmbeddingSet& gallery,
                                   const RerankParams& params, int threads,
                                   const RerankOptions& options) {
  if (queries.dim() != gallery.dim())
    fail(Errc::dim_mismatch, "query and gallery embedding dims differ");
  if (params.k2 < 1 || params.k1 < params.k2)
    fail(Errc::degenerate_k, "require k1 >= k2 >= 1");

  const int nq = static_cast<int>(queries.size());
  const int ng = static_cast<int>(gallery.size());
  const int n = nq + ng;
  if (n <= params.k1)
    fail(Errc::too_few_elements, "combined set size " + std::to_string(n) +
                                     " must exceed k1=" + std::to_string(params.k1));

  Mat all(n, queries.dim());
  all.topRows(nq) = queries.embeddings;
  all.bottomRows(ng) = gallery.embeddings;

  // full pairwise cosine distance over the combined set
  Mat dist(n, n);
  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
    const auto ii = static_cast<Eigen::Index>(i);
    dist(ii, ii) = 0.0;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != ii) dist(ii, j) = cosine_distance(all, ii, all, j);
  });

  // kNN lists exclude the probe itself; ties break by ascending index
  const int half_k = (params.k1 + 1) / 2;
  std::vector<std::vector<int>> nn_order(n);  // first k1 neighbors, rank order
  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t p) {
    const auto pi = static_cast<Eigen::Index>(p);
    std::vector<int> cand;
    cand.reserve(n - 1);
    for (int j = 0; j < n; ++j) {
      if (j == static_cast<int>(p)) continue;
      if (options.gallery_only_neighborhoods && j < nq) continue;
      cand.push_back(j);
    }
    if (static_cast<int>(cand.size()) < params.k1)
      fail(Errc::too_few_elements, "fewer than k1 neighbor candidates");
    std::partial_sort(cand.begin(), cand.begin() + params.k1, cand.end(),
                      [&](int a, int b) {
                        if (dist(pi, a) != dist(pi, b)) return dist(pi, a) < dist(pi, b);
                        return a < b;
                      });
    cand.resize(params.k1);
    nn_order[p] = std::move(cand);
  });

  auto knn_sorted = [&](int p, int k) {
    std::vector<int> v(nn_order[p].begin(), nn_order[p].begin() + k);
    std::sort(v.begin(), v.end());
    return v;
  };
  std::vector<std::vector<int>> knn_k1(n), knn_half(n);
  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t p) {
    knn_k1[p] = knn_sorted(static_cast<int>(p), params.k1);
    knn_half[p] = knn_sorted(static_cast<int>(p), half_k);
  });

  auto contains = [](const std::vector<int>& sorted, int x) {
    return std::binary_search(sorted.begin(), sorted.end(), x);
  };

  // reciprocal sets at k1 and ceil(k1/2)
  std::vector<std::vector<int>> recip_k1(n), recip_half(n);
  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t p) {
    for (int x : knn_k1[p])
      if (contains(knn_k1[x], static_cast<int>(p))) recip_k1[p].push_back(x);
    for (int x : knn_half[p])
      if (contains(knn_half[x], static_cast<int>(p))) recip_half[p].push_back(x);
  });

  // 2/3-overlap expansion
  std::vector<std::vector<int>> expanded(n);
  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t p) {
    std::vector<int> star = recip_k1[p];
    for (int q : recip_k1[p]) {
      const auto& half = recip_half[q];
      std::size_t overlap = 0;
      for (int x : half)
        if (contains(recip_k1[p], x)) ++overlap;
      if (3 * overlap >= 2 * half.size())
        star.insert(star.end(), half.begin(), half.end());
    }
    std::sort(star.begin(), star.end());
    star.erase(std::unique(star.begin(), star.end()), star.end());
    expanded[p] = std::move(star);
  });

  // Gaussian-kernel encodings over the expanded sets, self weight from d(p,p)=0
  std::vector<SparseVec> enc(n);
  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t p) {
    const auto pi = static_cast<Eigen::Index>(p);
    SparseVec v;
    v.reserve(expanded[p].size() + 1);
    bool self_inserted = false;
    for (int x : expanded[p]) {
      if (!self_inserted && x > static_cast<int>(p)) {
        v.emplace_back(static_cast<int>(p), 1.0);
        self_inserted = true;
      }
      if (x == static_cast<int>(p)) {
        v.emplace_back(x, 1.0);
        self_inserted = true;
        continue;
      }
      v.emplace_back(x, std::exp(-dist(pi, x)));
    }
    if (!self_inserted) v.emplace_back(static_cast<int>(p), 1.0);
    enc[p] = l1_normalized(std::move(v));
  });

  // local query expansion: mean encoding over the k2 nearest probes
  std::vector<SparseVec> qe(n);
  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t p) {
    std::vector<std::pair<int, double>> merged;
    const double w = 1.0 / params.k2;
    for (int r = 0; r < params.k2; ++r) {
      for (const auto& [idx, val] : enc[nn_order[p][r]]) merged.emplace_back(idx, val * w);
    }
    std::sort(merged.begin(), merged.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    SparseVec v;
    for (const auto& [idx, val] : merged) {
      if (!v.empty() && v.back().first == idx)
        v.back().second += val;
      else
        v.emplace_back(idx, val);
    }
    qe[p] = std::move(v);
  });

  DistanceMatrix out;
  out.stage = DistanceStage::reranked;
  out.rerank = params;
  out.d.resize(nq, ng);
  parallel_for(static_cast<std::size_t>(nq), threads, [&](std::size_t qi) {
    const auto row = static_cast<Eigen::Index>(qi);
    const SparseVec& vq = qe[qi];
    for (int gj = 0; gj < ng; ++gj) {
      const SparseVec& vg = qe[nq + gj];
      double min_sum = 0.0, max_sum = 0.0;
      std::size_t a = 0, b = 0;
      while (a < vq.size() || b < vg.size()) {
        if (b >= vg.size() || (a < vq.size() && vq[a].first < vg[b].first)) {
          max_sum += vq[a].second;
          ++a;
        } else if (a >= vq.size() || vg[b].first < vq[a].first) {
          max_sum += vg[b].second;
          ++b;
        } else {
          min_sum += std::min(vq[a].second, vg[b].second);
          max_sum += std::max(vq[a].second, vg[b].second);
          ++a;
          ++b;
        }
      }
      const double jaccard = 1.0 - min_sum / max_sum;
      out.d(row, gj) = params.lambda * dist(row, nq + gj) + (1.0 - params.lambda) * jaccard;
    }
  });
  return out;
}

std::vector<std::vector<int>> rank_lists(const DistanceMatrix& d) {
  std::vector<std::vector<int>> out(d.num_queries());
  for (Eigen::Index i = 0; i < d.num_queries(); ++i) {
    if (!d.d.row(i).allFinite()) fail(Errc::non_finite, "distance row contains NaN/Inf");
    std::vector<int> order(d.num_gallery());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (d.d(i, a) != d.d(i, b)) return d.d(i, a) < d.d(i, b);
      return a < b;
    });
    out[i] = std::move(order);
  }
  return out;
}

namespace {

constexpr char kDistMagic[4] = {'X', 'F', 'D', 'D'};

void write_u32le(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32le(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
         std::uint32_t(b[3]) << 24;
}

void write_f32le(std::ostream& out, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  write_u32le(out, u);
}

float read_f32le(std::istream& in) {
  const std::uint32_t u = read_u32le(in);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

}  // namespace

void write_distance_file(const std::string& path, const DistanceMatrix& d) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io_error, "cannot open '" + path + "' for writing");
  out.write(kDistMagic, 4);
  write_u32le(out, static_cast<std::uint32_t>(d.num_queries()));
  write_u32le(out, static_cast<std::uint32_t>(d.num_gallery()));
  const unsigned char stage = d.stage == DistanceStage::reranked ? 1 : 0;
  out.write(reinterpret_cast<const char*>(&stage), 1);
  const RerankParams params = d.rerank.value_or(RerankParams{0, 0, 0.0});
  write_f32le(out, static_cast<float>(params.k1));
  write_f32le(out, static_cast<float>(params.k2));
  write_f32le(out, static_cast<float>(params.lambda));
  for (Eigen::Index i = 0; i < d.num_queries(); ++i)
    for (Eigen::Index j = 0; j < d.num_gallery(); ++j)
      write_f32le(out, static_cast<float>(d.d(i, j)));
  if (!out) fail(Errc::io_error, "write to '" + path + "' failed");
}

DistanceMatrix read_distance_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io_error, "cannot open distance file '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kDistMagic, 4) != 0)
    fail(Errc::bad_magic, "'" + path + "' is not a distance file");
  const std::uint32_t q = read_u32le(in);
  const std::uint32_t g = read_u32le(in);
  unsigned char stage = 0;
  in.read(reinterpret_cast<char*>(&stage), 1);
  const float k1 = read_f32le(in);
  const float k2 = read_f32le(in);
  const float lambda = read_f32le(in);

  DistanceMatrix out;
  out.stage = stage == 1 ? DistanceStage::reranked : DistanceStage::raw_cosine;
  if (stage == 1)
    out.rerank = RerankParams{static_cast<int>(k1), static_cast<int>(k2), lambda};
  out.d.resize(q, g);
  for (std::uint32_t i = 0; i < q; ++i)
    for (std::uint32_t j = 0; j < g; ++j) {
      const float v = read_f32le(in);
      if (!std::isfinite(v)) fail(Errc::non_finite, "distance file contains NaN/Inf");
      out.d(i, j) = static_cast<double>(v);
    }
  if (!in) fail(Errc::shape_mismatch, "distance file shorter than its header declares");
  return out;
}

}  // namespace xfdreid
