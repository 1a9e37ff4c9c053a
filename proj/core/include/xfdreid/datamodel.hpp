#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xfdreid/common.hpp"

namespace xfdreid {

enum class Domain { aerial, ground };
enum class Split { train, query, gallery };

Domain domain_from_string(const std::string& s);
Split split_from_string(const std::string& s);
const char* domain_name(Domain d);
const char* split_name(Split s);

struct TrackletRecord {
  std::int64_t tracklet_index = 0;
  int person_id = 0;
  int camera_id = 0;
  Domain domain = Domain::aerial;
  Split split = Split::train;
  double altitude_m = 0.0;
  double distance_m = 0.0;
  double angle_deg = 0.0;
  bool has_flip = false;
};

// One tracklet's per-frame embeddings, row t = frame t.
struct FrameFeatureSequence {
  Mat frames;  // T x C, finite entries
  std::int64_t tracklet_index = 0;

  Eigen::Index seq_len() const { return frames.rows(); }
  Eigen::Index dim() const { return frames.cols(); }
};

struct MetadataBins {
  int altitude_bin = 0;  // [0, 18)
  int distance_bin = 0;  // [0, 18)
  int angle_bin = 0;     // [0, 3)
};

struct BinRange {
  double min = 0.0;
  double max = 1.0;
  int bins = 1;
};

struct BinConfig {
  BinRange altitude{5.0, 120.0, 18};
  BinRange distance{10.0, 120.0, 18};
  BinRange angle{0.0, 90.0, 3};
};

// Uniform-width binning; values clamp to [min,max] and max maps to the last bin.
int uniform_bin(double value, const BinRange& range);
MetadataBins discretize_metadata(const TrackletRecord& record, const BinConfig& config = {});

struct FeatureFile {
  int feature_dim = 0;  // C
  int seq_len = 0;      // T
  std::vector<FrameFeatureSequence> sequences;
};

// Binary container: magic "XFDF", version u32=1, N u32, T u32, C u32,
// then N*T*C float32 little-endian values, tracklet-major then row-major.
FeatureFile read_feature_file(const std::string& path);
void write_feature_file(const std::string& path, const FeatureFile& file);

// CSV with required header:
// tracklet_index,person_id,camera_id,domain,altitude_m,distance_m,angle_deg,split,has_flip
std::vector<TrackletRecord> parse_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<TrackletRecord>& records);

struct Dataset {
  std::vector<TrackletRecord> records;
  std::vector<FrameFeatureSequence> features;  // file order, index = tracklet_index
  std::vector<FrameFeatureSequence> flipped;   // optional, same shapes as features
  int feature_dim = 0;
  int seq_len = 0;

  bool has_flipped() const { return !flipped.empty(); }
  const FrameFeatureSequence& features_of(const TrackletRecord& r) const;
  const FrameFeatureSequence& flipped_of(const TrackletRecord& r) const;
};

// Joins a feature file with a manifest (and an optional flipped-feature file
// aligned by tracklet_index). Warns on stderr if a query identity is missing
// from the gallery split.
Dataset load_dataset(const std::string& feature_path, const std::string& manifest_path,
                     const std::string& flip_feature_path = "");

Dataset make_dataset(FeatureFile features, std::vector<TrackletRecord> records,
                     FeatureFile flipped = {});

}  // namespace xfdreid
