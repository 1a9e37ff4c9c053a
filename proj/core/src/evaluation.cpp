#include "xfdreid/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>

#include "json.hpp"

namespace xfdreid {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr int kCmcRanks[3] = {1, 5, 10};

}  // namespace

const char* protocol_name(Protocol p) {
  switch (p) {
    case Protocol::A2A: return "A2A";
    case Protocol::A2G: return "A2G";
    case Protocol::G2A: return "G2A";
  }
  return "?";
}

Domain protocol_query_domain(Protocol p) {
  return p == Protocol::G2A ? Domain::ground : Domain::aerial;
}

Domain protocol_gallery_domain(Protocol p) {
  return p == Protocol::A2G ? Domain::ground : Domain::aerial;
}

Mat embed_dataset(const Dataset& dataset, PoolingMode mode, const TrainableParams* head,
                  Precision precision) {
  NeckParams neck;  // disabled without a head
  const AttentionPoolParams* attn = nullptr;
  if (head) {
    neck = head->neck;
    attn = &head->attention;
  }
  if (mode == PoolingMode::attn && !head)
    fail(Errc::bad_config, "attention pooling requires a trained head");

  Mat out(dataset.records.size(), dataset.feature_dim);
  for (std::size_t i = 0; i < dataset.records.size(); ++i) {
    const TrackletRecord& rec = dataset.records[i];
    const FrameFeatureSequence& seq = dataset.features_of(rec);
    const FrameFeatureSequence* flip =
        (dataset.has_flipped() && rec.has_flip) ? &dataset.flipped_of(rec) : nullptr;
    out.row(i) = embed_tracklet(seq, flip, mode, attn, neck, precision).transpose();
  }
  return out;
}

std::pair<EmbeddingSet, EmbeddingSet> build_protocol_sets(const Dataset& dataset,
                                                          const Mat& embeddings,
                                                          Protocol protocol) {
  if (embeddings.rows() != static_cast<Eigen::Index>(dataset.records.size()))
    fail(Errc::dim_mismatch, "embedding rows do not align with dataset records");

  const Domain qd = protocol_query_domain(protocol);
  const Domain gd = protocol_gallery_domain(protocol);
  std::vector<Eigen::Index> q_rows, g_rows;
  for (std::size_t i = 0; i < dataset.records.size(); ++i) {
    const TrackletRecord& r = dataset.records[i];
    if (r.split == Split::query && r.domain == qd) q_rows.push_back(static_cast<Eigen::Index>(i));
    if (r.split == Split::gallery && r.domain == gd) g_rows.push_back(static_cast<Eigen::Index>(i));
  }
  if (q_rows.empty() || g_rows.empty())
    fail(Errc::empty_protocol, std::string("protocol ") + protocol_name(protocol) +
                                   " has no queries or no gallery after filtering");

  auto gather = [&](const std::vector<Eigen::Index>& rows) {
    Mat m(rows.size(), embeddings.cols());
    std::vector<TrackletRecord> recs;
    recs.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      m.row(static_cast<Eigen::Index>(i)) = embeddings.row(rows[i]);
      recs.push_back(dataset.records[static_cast<std::size_t>(rows[i])]);
    }
    return make_embedding_set(std::move(m), std::move(recs));
  };
  return {gather(q_rows), gather(g_rows)};
}

double average_precision(const std::vector<int>& ranked, const std::vector<bool>& relevant,
                         const std::vector<bool>& junk) {
  int total_relevant = 0;
  for (std::size_t g = 0; g < relevant.size(); ++g)
    if (relevant[g] && !junk[g]) ++total_relevant;
  if (total_relevant == 0) fail(Errc::no_relevant, "query has no valid match in the gallery");

  int position = 0;  // 1-based among non-junk entries
  int hits = 0;
  double sum = 0.0;
  for (int g : ranked) {
    if (junk[static_cast<std::size_t>(g)]) continue;
    ++position;
    if (relevant[static_cast<std::size_t>(g)]) {
      ++hits;
      sum += static_cast<double>(hits) / position;
    }
  }
  return sum / total_relevant;
}

namespace {

// First-match position among non-junk entries; -1 when the query has no valid match.
int first_match_position(const std::vector<int>& ranked, const std::vector<bool>& relevant,
                         const std::vector<bool>& junk) {
  int position = 0;
  for (int g : ranked) {
    if (junk[static_cast<std::size_t>(g)]) continue;
    ++position;
    if (relevant[static_cast<std::size_t>(g)]) return position;
  }
  return -1;
}

}  // namespace

std::array<double, 3> cmc(const std::vector<std::vector<int>>& ranked_lists,
                          const std::vector<std::vector<bool>>& relevant,
                          const std::vector<std::vector<bool>>& junk) {
  if (ranked_lists.size() != relevant.size() || ranked_lists.size() != junk.size())
    fail(Errc::dim_mismatch, "cmc inputs must have one mask pair per ranked list");
  int scored = 0;
  std::array<int, 3> counts{0, 0, 0};
  for (std::size_t q = 0; q < ranked_lists.size(); ++q) {
    const int pos = first_match_position(ranked_lists[q], relevant[q], junk[q]);
    if (pos < 0) continue;
    ++scored;
    for (int k = 0; k < 3; ++k)
      if (pos <= kCmcRanks[k]) ++counts[static_cast<std::size_t>(k)];
  }
  if (scored == 0) fail(Errc::no_relevant, "no query has a valid match");
  std::array<double, 3> out{};
  for (int k = 0; k < 3; ++k)
    out[static_cast<std::size_t>(k)] = 100.0 * counts[static_cast<std::size_t>(k)] / scored;
  return out;
}

double overall_map(const std::vector<ProtocolResult>& results) {
  double weighted = 0.0;
  long long total = 0;
  for (const auto& r : results) {
    if (r.num_queries < 0) fail(Errc::value_out_of_range, "negative query count");
    weighted += static_cast<double>(r.num_queries) * r.map;
    total += r.num_queries;
  }
  if (total == 0) fail(Errc::all_empty, "no protocol has any scored query");
  return weighted / static_cast<double>(total);
}

EvalReport evaluate(const Dataset& dataset, const Mat& embeddings, const EvalOptions& options) {
  EvalReport report;
  report.config.mode = options.mode;
  report.config.rerank = options.rerank.has_value();
  if (options.rerank) report.config.rerank_params = *options.rerank;
  report.config.seed = options.seed;
  report.config.precision = options.precision;

  for (Protocol protocol : kAllProtocols) {
    ProtocolResult res;
    res.protocol = protocol;
    std::pair<EmbeddingSet, EmbeddingSet> sets;
    try {
      sets = build_protocol_sets(dataset, embeddings, protocol);
    } catch (const Error& e) {
      if (e.code() == Errc::empty_protocol) {
        report.protocols.push_back(res);  // zero queries, zero weight
        continue;
      }
      throw;
    }
    const EmbeddingSet& queries = sets.first;
    const EmbeddingSet& gallery = sets.second;

    DistanceMatrix dist =
        options.rerank
            ? k_reciprocal_rerank(queries, gallery, *options.rerank, options.threads)
            : cosine_distance_matrix(queries, gallery, options.threads);
    const auto ranked = rank_lists(dist);

    std::vector<std::vector<int>> scored_lists;
    std::vector<std::vector<bool>> scored_relevant, scored_junk;
    for (Eigen::Index qi = 0; qi < queries.size(); ++qi) {
      const TrackletRecord& q = queries.records[static_cast<std::size_t>(qi)];
      std::vector<bool> relevant(gallery.size()), junk(gallery.size());
      int valid = 0;
      for (Eigen::Index gj = 0; gj < gallery.size(); ++gj) {
        const TrackletRecord& g = gallery.records[static_cast<std::size_t>(gj)];
        const bool same_id = g.person_id == q.person_id;
        relevant[static_cast<std::size_t>(gj)] = same_id;
        junk[static_cast<std::size_t>(gj)] = same_id && g.camera_id == q.camera_id;
        if (same_id && !junk[static_cast<std::size_t>(gj)]) ++valid;
      }
      if (valid == 0) {
        ++res.num_excluded;
        continue;
      }
      res.per_query_ap.push_back(
          average_precision(ranked[static_cast<std::size_t>(qi)], relevant, junk));
      scored_lists.push_back(ranked[static_cast<std::size_t>(qi)]);
      scored_relevant.push_back(std::move(relevant));
      scored_junk.push_back(std::move(junk));
    }
    if (res.num_excluded > 0)
      std::cerr << "warning: " << protocol_name(protocol) << ": " << res.num_excluded
                << " query(ies) with no valid match excluded\n";

    res.num_queries = static_cast<int>(res.per_query_ap.size());
    if (res.num_queries > 0) {
      double sum = 0.0;
      for (double ap : res.per_query_ap) sum += ap;
      res.map = 100.0 * sum / res.num_queries;
      const auto ranks = cmc(scored_lists, scored_relevant, scored_junk);
      res.rank1 = ranks[0];
      res.rank5 = ranks[1];
      res.rank10 = ranks[2];
    }
    report.protocols.push_back(std::move(res));
  }

  report.overall_map = overall_map(report.protocols);
  return report;
}

namespace {

ordered_json fingerprint_json(const EvalConfigFingerprint& fp) {
  ordered_json j;
  j["mode"] = pooling_mode_name(fp.mode);
  j["rerank"] = fp.rerank;
  if (fp.rerank) {
    j["k1"] = fp.rerank_params.k1;
    j["k2"] = fp.rerank_params.k2;
    j["lambda"] = fp.rerank_params.lambda;
  }
  j["seed"] = fp.seed;
  j["precision"] = precision_name(fp.precision);
  return j;
}

ordered_json report_json(const EvalReport& report, const std::string& config_json_text) {
  ordered_json j;
  ordered_json protocols = ordered_json::array();
  for (const auto& r : report.protocols) {
    ordered_json p;
    p["name"] = protocol_name(r.protocol);
    p["num_queries"] = r.num_queries;
    p["num_excluded"] = r.num_excluded;
    p["map"] = r.map;
    p["r1"] = r.rank1;
    p["r5"] = r.rank5;
    p["r10"] = r.rank10;
    protocols.push_back(p);
  }
  j["protocols"] = protocols;
  j["overall_map"] = report.overall_map;
  ordered_json config = fingerprint_json(report.config);
  if (!config_json_text.empty()) {
    ordered_json extra = ordered_json::parse(config_json_text);
    for (auto& [k, v] : extra.items()) config[k] = v;
  }
  j["config"] = config;
  return j;
}

}  // namespace

std::string report_to_json_text(const EvalReport& report, const std::string& config_json_text) {
  return report_json(report, config_json_text).dump(2) + "\n";
}

std::string format_report_table(const EvalReport& report) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-9s %9s %9s %8s %8s %8s %8s\n", "protocol", "queries",
                "excluded", "mAP", "R1", "R5", "R10");
  out << line;
  for (const auto& r : report.protocols) {
    std::snprintf(line, sizeof(line), "%-9s %9d %9d %8.2f %8.2f %8.2f %8.2f\n",
                  protocol_name(r.protocol), r.num_queries, r.num_excluded, r.map, r.rank1, r.rank5,
                  r.rank10);
    out << line;
  }
  std::snprintf(line, sizeof(line), "%-9s %38.2f\n", "overall", report.overall_map);
  out << line;
  return out.str();
}

std::vector<AblationRow> ablation_run(const Dataset& dataset,
                                      const std::map<PoolingMode, Mat>& embeddings_by_mode,
                                      const std::vector<AblationCell>& grid, int threads,
                                      std::uint64_t seed, Precision precision) {
  if (grid.empty()) fail(Errc::bad_config, "ablation grid is empty");
  std::vector<AblationRow> rows;
  rows.reserve(grid.size());
  for (const auto& cell : grid) {
    auto it = embeddings_by_mode.find(cell.mode);
    if (it == embeddings_by_mode.end())
      fail(Errc::bad_config,
           std::string("no embeddings for pooling mode ") + pooling_mode_name(cell.mode));
    EvalOptions opts;
    opts.mode = cell.mode;
    if (cell.rerank) opts.rerank = cell.rerank_params;
    opts.threads = threads;
    opts.seed = seed;
    opts.precision = precision;
    AblationRow row;
    row.cell = cell;
    row.report = evaluate(dataset, it->second, opts);
    rows.push_back(std::move(row));
  }
  for (auto& row : rows) row.delta_overall = row.report.overall_map - rows[0].report.overall_map;
  return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-32s %10s %8s\n", "variant", "mAP", "delta");
  out << line;
  for (const auto& row : rows) {
    std::snprintf(line, sizeof(line), "%-32s %10.2f %+8.2f\n", row.cell.label.c_str(),
                  row.report.overall_map, row.delta_overall);
    out << line;
  }
  return out.str();
}

std::string ablation_to_json_text(const std::vector<AblationRow>& rows,
                                  const std::string& config_json_text) {
  ordered_json j;
  ordered_json cells = ordered_json::array();
  for (const auto& row : rows) {
    ordered_json c;
    c["label"] = row.cell.label;
    c["mode"] = pooling_mode_name(row.cell.mode);
    c["rerank"] = row.cell.rerank;
    if (row.cell.rerank) {
      c["k1"] = row.cell.rerank_params.k1;
      c["k2"] = row.cell.rerank_params.k2;
      c["lambda"] = row.cell.rerank_params.lambda;
    }
    c["report"] = report_json(row.report, "");
    c["delta_overall"] = row.delta_overall;
    cells.push_back(c);
  }
  j["cells"] = cells;
  if (!config_json_text.empty()) j["config"] = ordered_json::parse(config_json_text);
  return j.dump(2) + "\n";
}

}  // namespace xfdreid
