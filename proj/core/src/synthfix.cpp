#include "xfdreid/synthfix.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"

namespace xfdreid {

namespace {

using ordered_json = nlohmann::ordered_json;

void validate(const FixtureConfig& c) {
  if (c.num_ids < 1 || c.tracklets_per_id < 1 || c.seq_len < 1 || c.feature_dim < 1)
    fail(Errc::bad_config, "fixture counts must be >= 1");
  if (c.corrupt_frac < 0.0 || c.corrupt_frac > 1.0)
    fail(Errc::bad_config, "corrupt_frac must lie in [0, 1]");
  if (c.cluster_spread < 0.0 || c.domain_offset < 0.0)
    fail(Errc::bad_config, "cluster_spread and domain_offset must be >= 0");
}

Vec gaussian_vec(std::mt19937_64& rng, int dim) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vec v(dim);
  for (int i = 0; i < dim; ++i) v(i) = gauss(rng);
  return v;
}

Vec unit_vec(std::mt19937_64& rng, int dim) {
  Vec v = gaussian_vec(rng, dim);
  return v / v.norm();
}

// Rotation by `angle` in the coordinate planes (0,1), (2,3), ...; preserves
// norms, so cross-domain protocols become strictly harder than same-domain.
void rotate_in_place(Vec& v, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  for (int i = 0; i + 1 < v.size(); i += 2) {
    const double a = v(i), b = v(i + 1);
    v(i) = c * a - s * b;
    v(i + 1) = s * a + c * b;
  }
}

// Tracklet ordinal -> (split, domain); covers every protocol once per 6.
struct SlotAssign {
  Split split;
  Domain domain;
};
constexpr SlotAssign kSlots[6] = {
    {Split::train, Domain::aerial},   {Split::train, Domain::ground},
    {Split::query, Domain::aerial},   {Split::gallery, Domain::aerial},
    {Split::query, Domain::ground},   {Split::gallery, Domain::ground},
};

}  // namespace

FixtureConfig fixture_config_from_json_text(const std::string& json_text) {
  ordered_json j;
  try {
    j = ordered_json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::bad_config, std::string("fixture config: ") + e.what());
  }
  FixtureConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "num_ids") c.num_ids = value.get<int>();
    else if (key == "tracklets_per_id") c.tracklets_per_id = value.get<int>();
    else if (key == "seq_len") c.seq_len = value.get<int>();
    else if (key == "feature_dim") c.feature_dim = value.get<int>();
    else if (key == "cluster_spread") c.cluster_spread = value.get<double>();
    else if (key == "domain_offset") c.domain_offset = value.get<double>();
    else if (key == "corrupt_frac") c.corrupt_frac = value.get<double>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "emit_flip") c.emit_flip = value.get<bool>();
    else fail(Errc::bad_config, "unknown fixture config key '" + key + "'");
  }
  validate(c);
  return c;
}

std::string fixture_config_to_json_text(const FixtureConfig& c) {
  ordered_json j;
  j["num_ids"] = c.num_ids;
  j["tracklets_per_id"] = c.tracklets_per_id;
  j["seq_len"] = c.seq_len;
  j["feature_dim"] = c.feature_dim;
  j["cluster_spread"] = c.cluster_spread;
  j["domain_offset"] = c.domain_offset;
  j["corrupt_frac"] = c.corrupt_frac;
  j["seed"] = c.seed;
  j["emit_flip"] = c.emit_flip;
  return j.dump(2);
}

Fixture generate(const FixtureConfig& config) {
  validate(config);
  const int dim = config.feature_dim;
  const int t_len = config.seq_len;

  std::mt19937_64 rng(mix_seed(config.seed, 1));
  std::mt19937_64 flip_rng(mix_seed(config.seed, 2));

  // Identity centroids live in a cone around a shared direction, so frame
  // quality (cluster member vs isotropic noise) is linearly separable.
  const Vec common = unit_vec(rng, dim);
  const double cone_bias = std::sqrt(static_cast<double>(dim));
  std::vector<Vec> centroids;
  centroids.reserve(config.num_ids);
  for (int i = 0; i < config.num_ids; ++i) {
    Vec c = cone_bias * common + gaussian_vec(rng, dim);
    centroids.push_back(c / c.norm());
  }

  const int n_corrupt =
      std::clamp(static_cast<int>(std::llround(config.corrupt_frac * t_len)), 0, t_len);
  const double noise_scale = config.cluster_spread / std::sqrt(static_cast<double>(dim));

  auto clean_frame = [&](std::mt19937_64& r, const Vec& centroid) {
    Vec f = centroid + noise_scale * gaussian_vec(r, dim);
    return (f / f.norm()).eval();
  };

  Fixture fx;
  FeatureFile features, flipped;
  features.feature_dim = flipped.feature_dim = dim;
  features.seq_len = flipped.seq_len = t_len;

  std::int64_t next_index = 0;
  for (int id = 0; id < config.num_ids; ++id) {
    for (int j = 0; j < config.tracklets_per_id; ++j) {
      const SlotAssign slot = kSlots[j % 6];

      std::vector<int> frame_order(t_len);
      for (int f = 0; f < t_len; ++f) frame_order[f] = f;
      std::shuffle(frame_order.begin(), frame_order.end(), rng);
      std::vector<bool> corrupt(t_len, false);
      for (int f = 0; f < n_corrupt; ++f) corrupt[static_cast<std::size_t>(frame_order[f])] = true;

      FrameFeatureSequence seq, flip_seq;
      seq.tracklet_index = flip_seq.tracklet_index = next_index;
      seq.frames.resize(t_len, dim);
      if (config.emit_flip) flip_seq.frames.resize(t_len, dim);
      for (int f = 0; f < t_len; ++f) {
        Vec frame = corrupt[static_cast<std::size_t>(f)] ? unit_vec(rng, dim)
                                                         : clean_frame(rng, centroids[id]);
        if (slot.domain == Domain::ground) rotate_in_place(frame, config.domain_offset);
        seq.frames.row(f) = frame.transpose();
        if (config.emit_flip) {
          Vec ff = corrupt[static_cast<std::size_t>(f)] ? unit_vec(flip_rng, dim)
                                                        : clean_frame(flip_rng, centroids[id]);
          if (slot.domain == Domain::ground) rotate_in_place(ff, config.domain_offset);
          flip_seq.frames.row(f) = ff.transpose();
        }
      }

      TrackletRecord rec;
      rec.tracklet_index = next_index;
      rec.person_id = id;
      rec.camera_id = j % 6;
      rec.domain = slot.domain;
      rec.split = slot.split;
      std::uniform_real_distribution<double> dist_m(10.0, 120.0);
      if (slot.domain == Domain::aerial) {
        rec.altitude_m = std::uniform_real_distribution<double>(20.0, 120.0)(rng);
        rec.angle_deg = std::uniform_real_distribution<double>(30.0, 90.0)(rng);
      } else {
        rec.altitude_m = std::uniform_real_distribution<double>(5.0, 15.0)(rng);
        rec.angle_deg = std::uniform_real_distribution<double>(0.0, 30.0)(rng);
      }
      rec.distance_m = dist_m(rng);
      rec.has_flip = config.emit_flip;

      features.sequences.push_back(std::move(seq));
      if (config.emit_flip) flipped.sequences.push_back(std::move(flip_seq));
      fx.corrupt_mask.push_back(std::move(corrupt));
      fx.dataset.records.push_back(rec);
      ++next_index;
    }
  }

  std::vector<TrackletRecord> records = std::move(fx.dataset.records);
  fx.dataset = make_dataset(std::move(features), std::move(records),
                            config.emit_flip ? std::move(flipped) : FeatureFile{});
  return fx;
}

FixturePaths write_fixture(const std::string& dir, const Fixture& fixture, bool emit_flip) {
  std::filesystem::create_directories(dir);
  FixturePaths paths;
  paths.features = dir + "/features.xfdf";
  paths.manifest = dir + "/manifest.csv";
  paths.corruption = dir + "/corruption.csv";

  FeatureFile features;
  features.feature_dim = fixture.dataset.feature_dim;
  features.seq_len = fixture.dataset.seq_len;
  features.sequences = fixture.dataset.features;
  write_feature_file(paths.features, features);
  write_manifest(paths.manifest, fixture.dataset.records);

  std::ofstream side(paths.corruption, std::ios::trunc);
  if (!side) fail(Errc::io_error, "cannot open '" + paths.corruption + "' for writing");
  side << "tracklet_index,frame_index,is_corrupt\n";
  for (std::size_t i = 0; i < fixture.corrupt_mask.size(); ++i)
    for (std::size_t f = 0; f < fixture.corrupt_mask[i].size(); ++f)
      side << i << "," << f << "," << (fixture.corrupt_mask[i][f] ? 1 : 0) << "\n";

  if (emit_flip) {
    if (!fixture.dataset.has_flipped())
      fail(Errc::bad_config, "fixture has no flipped features to write");
    paths.flip_features = dir + "/flip.xfdf";
    FeatureFile flip;
    flip.feature_dim = fixture.dataset.feature_dim;
    flip.seq_len = fixture.dataset.seq_len;
    flip.sequences = fixture.dataset.flipped;
    write_feature_file(paths.flip_features, flip);
  }
  return paths;
}

std::vector<std::vector<bool>> read_corruption_sidecar(const std::string& path, int num_tracklets,
                                                       int seq_len) {
  std::ifstream in(path);
  if (!in) fail(Errc::io_error, "cannot open corruption sidecar '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line.rfind("tracklet_index,frame_index,is_corrupt", 0) != 0)
    fail(Errc::missing_column, "corruption sidecar lacks its header");
  std::vector<std::vector<bool>> mask(static_cast<std::size_t>(num_tracklets),
                                      std::vector<bool>(static_cast<std::size_t>(seq_len), false));
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string a, b, c;
    if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') || !std::getline(ss, c))
      fail(Errc::value_out_of_range, "malformed corruption sidecar row");
    const int ti = std::stoi(a), fi = std::stoi(b);
    if (ti < 0 || ti >= num_tracklets || fi < 0 || fi >= seq_len)
      fail(Errc::value_out_of_range, "corruption sidecar indexes outside the dataset");
    mask[static_cast<std::size_t>(ti)][static_cast<std::size_t>(fi)] = c == "1" || c == "true";
  }
  return mask;
}

}  // namespace xfdreid
