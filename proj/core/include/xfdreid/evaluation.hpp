#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xfdreid/common.hpp"
#include "xfdreid/datamodel.hpp"
#include "xfdreid/pooling.hpp"
#include "xfdreid/retrieval.hpp"
#include "xfdreid/training.hpp"

namespace xfdreid {

enum class Protocol { A2A, A2G, G2A };

const char* protocol_name(Protocol p);
Domain protocol_query_domain(Protocol p);
Domain protocol_gallery_domain(Protocol p);
inline constexpr std::array<Protocol, 3> kAllProtocols{Protocol::A2A, Protocol::A2G, Protocol::G2A};

struct ProtocolResult {
  Protocol protocol = Protocol::A2A;
  int num_queries = 0;   // scored queries (= per_query_ap size)
  int num_excluded = 0;  // queries with no valid match, dropped from denominators
  double map = 0.0;      // percent
  double rank1 = 0.0, rank5 = 0.0, rank10 = 0.0;
  std::vector<double> per_query_ap;
};

struct EvalConfigFingerprint {
  PoolingMode mode = PoolingMode::mean;
  bool rerank = false;
  RerankParams rerank_params;
  std::uint64_t seed = 0;
  Precision precision = Precision::f64;
};

struct EvalReport {
  std::vector<ProtocolResult> protocols;  // A2A, A2G, G2A order
  double overall_map = 0.0;
  EvalConfigFingerprint config;
};

// Pooled, necked, flip-averaged, l2-normalized embedding per record (rows
// aligned with dataset.records). head == nullptr means mean pooling with the
// neck disabled.
Mat embed_dataset(const Dataset& dataset, PoolingMode mode, const TrainableParams* head,
                  Precision precision = Precision::f64);

// Filters split/domain per protocol; embeddings rows must align with records.
std::pair<EmbeddingSet, EmbeddingSet> build_protocol_sets(const Dataset& dataset,
                                                          const Mat& embeddings,
                                                          Protocol protocol);

// AP over a ranked gallery list. relevant marks same-identity items, junk
// marks entries excluded from the ranking (same identity + same camera).
double average_precision(const std::vector<int>& ranked, const std::vector<bool>& relevant,
                         const std::vector<bool>& junk);

// Rank-1/5/10 percentages over queries; queries with no valid match are
// skipped, mirroring the mAP denominator.
std::array<double, 3> cmc(const std::vector<std::vector<int>>& ranked_lists,
                          const std::vector<std::vector<bool>>& relevant,
                          const std::vector<std::vector<bool>>& junk);

// Query-count-weighted mean of protocol mAPs; empty protocols carry no weight.
double overall_map(const std::vector<ProtocolResult>& results);

struct EvalOptions {
  std::optional<RerankParams> rerank;
  int threads = 1;
  PoolingMode mode = PoolingMode::mean;
  Precision precision = Precision::f64;
  std::uint64_t seed = 0;
};

EvalReport evaluate(const Dataset& dataset, const Mat& embeddings, const EvalOptions& options);

// Report JSON: {protocols: [{name, num_queries, ...}], overall_map, config}.
// config_json_text, when non-empty, is merged into the config object.
std::string report_to_json_text(const EvalReport& report, const std::string& config_json_text = "");
std::string format_report_table(const EvalReport& report);

struct AblationCell {
  std::string label;
  PoolingMode mode = PoolingMode::mean;
  bool rerank = false;
  RerankParams rerank_params;
};

struct AblationRow {
  AblationCell cell;
  EvalReport report;
  double delta_overall = 0.0;  // vs the first cell
};

std::vector<AblationRow> ablation_run(const Dataset& dataset,
                                      const std::map<PoolingMode, Mat>& embeddings_by_mode,
                                      const std::vector<AblationCell>& grid, int threads = 1,
                                      std::uint64_t seed = 0,
                                      Precision precision = Precision::f64);

std::string format_ablation_table(const std::vector<AblationRow>& rows);
std::string ablation_to_json_text(const std::vector<AblationRow>& rows,
                                  const std::string& config_json_text = "");

}  // namespace xfdreid
