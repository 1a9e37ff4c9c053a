#pragma once

#include <optional>
#include <string>
#include <vector>

#include "xfdreid/common.hpp"
#include "xfdreid/datamodel.hpp"

namespace xfdreid {

struct EmbeddingSet {
  Mat embeddings;  // N x C, unit-norm rows
  std::vector<TrackletRecord> records;  // parallel; may be empty for anonymous sets

  Eigen::Index size() const { return embeddings.rows(); }
  Eigen::Index dim() const { return embeddings.cols(); }
};

// Validates the unit-norm invariant (1e-6); renormalize repairs float32
// round-off from embedding files.
EmbeddingSet make_embedding_set(Mat embeddings, std::vector<TrackletRecord> records = {},
                                bool renormalize = false);

enum class DistanceStage { raw_cosine, reranked };

struct RerankParams {
  int k1 = 28;
  int k2 = 6;
  double lambda = 0.28;
};

struct RerankOptions {
  // When set, neighborhoods are built from gallery elements only instead of
  // the combined query+gallery probe set.
  bool gallery_only_neighborhoods = false;
};

struct DistanceMatrix {
  Mat d;  // Q x G
  DistanceStage stage = DistanceStage::raw_cosine;
  std::optional<RerankParams> rerank;

  Eigen::Index num_queries() const { return d.rows(); }
  Eigen::Index num_gallery() const { return d.cols(); }
};

// D[i][j] = 1 - dot(q_i, g_j), clamped to [0, 2].
DistanceMatrix cosine_distance_matrix(const EmbeddingSet& queries, const EmbeddingSet& gallery,
                                      int threads = 1);

// k-reciprocal refinement over the combined probe set: reciprocal neighbor
// sets with 2/3-overlap expansion, Gaussian-kernel encodings, k2 local query
// expansion, and a lambda blend of cosine and Jaccard distances.
DistanceMatrix k_reciprocal_rerank(const EmbeddingSet& queries, const EmbeddingSet& gallery,
                                   const RerankParams& params, int threads = 1,
                                   const RerankOptions& options = {});

// Ascending distance, ties broken by ascending gallery index.
std::vector<std::vector<int>> rank_lists(const DistanceMatrix& d);

// Binary container: magic "XFDD", u32 Q, u32 G, stage byte, k1/k2/lambda as
// three float32 values, payload float32 row-major.
void write_distance_file(const std::string& path, const DistanceMatrix& d);
DistanceMatrix read_distance_file(const std::string& path);

}  // namespace xfdreid
