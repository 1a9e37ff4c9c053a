#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xfdreid/common.hpp"
#include "xfdreid/datamodel.hpp"

namespace xfdreid {

struct FixtureConfig {
  int num_ids = 16;
  int tracklets_per_id = 6;
  int seq_len = 16;     // T
  int feature_dim = 64; // C
  double cluster_spread = 0.15;  // angular noise around the identity centroid
  double domain_offset = 0.3;    // rotation angle applied to ground-domain tracklets
  double corrupt_frac = 0.0;     // fraction of frames replaced by isotropic noise
  std::uint64_t seed = 1;
  bool emit_flip = false;
};

FixtureConfig fixture_config_from_json_text(const std::string& json_text);
std::string fixture_config_to_json_text(const FixtureConfig& config);

struct Fixture {
  Dataset dataset;
  std::vector<std::vector<bool>> corrupt_mask;  // [tracklet][frame]
};

// Identity clusters on the unit sphere with aerial/ground rotation offsets and
// per-frame corruption. Fully deterministic in the seed.
Fixture generate(const FixtureConfig& config);

struct FixturePaths {
  std::string features;
  std::string manifest;
  std::string corruption;
  std::string flip_features;  // empty unless emit_flip
};

// Writes features.xfdf, manifest.csv, corruption.csv (and flip.xfdf when
// enabled) under dir, creating it if needed.
FixturePaths write_fixture(const std::string& dir, const Fixture& fixture, bool emit_flip);

std::vector<std::vector<bool>> read_corruption_sidecar(const std::string& path, int num_tracklets,
                                                       int seq_len);

}  // namespace xfdreid
