#include "xfdreid/datamodel.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

namespace xfdreid {

namespace {

constexpr char kMagic[4] = {'X', 'F', 'D', 'F'};
constexpr std::uint32_t kVersion = 1;

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
         std::uint32_t(b[3]) << 24;
}

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

float le_to_float(const unsigned char* b) {
  std::uint32_t u = std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
                    std::uint32_t(b[3]) << 24;
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

void float_to_le(float f, unsigned char* b) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  b[0] = static_cast<unsigned char>(u & 0xff);
  b[1] = static_cast<unsigned char>((u >> 8) & 0xff);
  b[2] = static_cast<unsigned char>((u >> 16) & 0xff);
  b[3] = static_cast<unsigned char>((u >> 24) & 0xff);
}

}  // namespace

Domain domain_from_string(const std::string& s) {
  const std::string t = lower(s);
  if (t == "aerial") return Domain::aerial;
  if (t == "ground") return Domain::ground;
  fail(Errc::unknown_domain, "'" + s + "' is not a domain (aerial|ground)");
}

Split split_from_string(const std::string& s) {
  const std::string t = lower(s);
  if (t == "train") return Split::train;
  if (t == "query") return Split::query;
  if (t == "gallery") return Split::gallery;
  fail(Errc::unknown_split, "'" + s + "' is not a split (train|query|gallery)");
}

const char* domain_name(Domain d) { return d == Domain::aerial ? "aerial" : "ground"; }

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::query: return "query";
    case Split::gallery: return "gallery";
  }
  return "?";
}

int uniform_bin(double value, const BinRange& range) {
  if (!(range.min < range.max))
    fail(Errc::degenerate_range, "bin range [" + std::to_string(range.min) + ", " +
                                     std::to_string(range.max) + "] has min >= max");
  if (range.bins < 1) fail(Errc::degenerate_range, "bin count must be >= 1");
  const double v = std::clamp(value, range.min, range.max);
  const double width = (range.max - range.min) / range.bins;
  const int bin = static_cast<int>(std::floor((v - range.min) / width));
  return std::min(bin, range.bins - 1);
}

MetadataBins discretize_metadata(const TrackletRecord& record, const BinConfig& config) {
  MetadataBins out;
  out.altitude_bin = uniform_bin(record.altitude_m, config.altitude);
  out.distance_bin = uniform_bin(record.distance_m, config.distance);
  out.angle_bin = uniform_bin(record.angle_deg, config.angle);
  return out;
}

FeatureFile read_feature_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io_error, "cannot open feature file '" + path + "'");

  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    fail(Errc::bad_magic, "'" + path + "' is not a feature file");
  const std::uint32_t version = read_u32(in);
  if (version != kVersion)
    fail(Errc::bad_magic, "unsupported feature file version " + std::to_string(version));

  const std::uint32_t n = read_u32(in);
  const std::uint32_t t = read_u32(in);
  const std::uint32_t c = read_u32(in);
  if (!in) fail(Errc::shape_mismatch, "truncated header in '" + path + "'");
  if (t == 0 || c == 0) fail(Errc::shape_mismatch, "feature file declares T=0 or C=0");

  const std::size_t want = std::size_t(n) * t * c * 4;
  std::vector<unsigned char> payload(want);
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(want));
  if (static_cast<std::size_t>(in.gcount()) != want)
    fail(Errc::shape_mismatch, "payload of '" + path + "' shorter than " + std::to_string(n) +
                                   "*" + std::to_string(t) + "*" + std::to_string(c) +
                                   " float32 values");
  in.peek();
  if (!in.eof())
    fail(Errc::shape_mismatch, "payload of '" + path + "' longer than header declares");

  FeatureFile file;
  file.feature_dim = static_cast<int>(c);
  file.seq_len = static_cast<int>(t);
  file.sequences.reserve(n);
  const unsigned char* p = payload.data();
  for (std::uint32_t i = 0; i < n; ++i) {
    FrameFeatureSequence seq;
    seq.tracklet_index = i;
    seq.frames.resize(t, c);
    for (std::uint32_t r = 0; r < t; ++r) {
      for (std::uint32_t k = 0; k < c; ++k) {
        const float v = le_to_float(p);
        p += 4;
        if (!std::isfinite(v))
          fail(Errc::non_finite, "non-finite entry at tracklet " + std::to_string(i) + " frame " +
                                     std::to_string(r) + " channel " + std::to_string(k));
        seq.frames(r, k) = static_cast<double>(v);
      }
    }
    file.sequences.push_back(std::move(seq));
  }
  return file;
}

void write_feature_file(const std::string& path, const FeatureFile& file) {
  const int t = file.seq_len;
  const int c = file.feature_dim;
  if (t < 1 || c < 1) fail(Errc::shape_mismatch, "feature file needs T >= 1 and C >= 1");
  for (const auto& seq : file.sequences) {
    if (seq.frames.rows() != t || seq.frames.cols() != c)
      fail(Errc::shape_mismatch, "sequence " + std::to_string(seq.tracklet_index) +
                                     " does not match declared T x C");
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io_error, "cannot open '" + path + "' for writing");
  out.write(kMagic, 4);
  write_u32(out, kVersion);
  write_u32(out, static_cast<std::uint32_t>(file.sequences.size()));
  write_u32(out, static_cast<std::uint32_t>(t));
  write_u32(out, static_cast<std::uint32_t>(c));

  std::vector<unsigned char> row(static_cast<std::size_t>(c) * 4);
  for (const auto& seq : file.sequences) {
    for (int r = 0; r < t; ++r) {
      for (int k = 0; k < c; ++k) {
        const float v = static_cast<float>(seq.frames(r, k));
        if (!std::isfinite(v))
          fail(Errc::non_finite, "value at tracklet " + std::to_string(seq.tracklet_index) +
                                     " is not representable as a finite float32");
        float_to_le(v, &row[static_cast<std::size_t>(k) * 4]);
      }
      out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
  }
  if (!out) fail(Errc::io_error, "write to '" + path + "' failed");
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::vector<TrackletRecord> parse_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::io_error, "cannot open manifest '" + path + "'");

  std::string header;
  if (!std::getline(in, header)) fail(Errc::missing_column, "manifest '" + path + "' is empty");

  const char* required[] = {"tracklet_index", "person_id", "camera_id",  "domain", "altitude_m",
                            "distance_m",     "angle_deg", "split",      "has_flip"};
  std::map<std::string, int> col;
  {
    auto names = split_csv_line(header);
    for (std::size_t i = 0; i < names.size(); ++i) col[lower(trim(names[i]))] = static_cast<int>(i);
    for (const char* name : required)
      if (!col.count(name)) fail(Errc::missing_column, std::string("manifest lacks column '") + name + "'");
  }

  std::vector<TrackletRecord> records;
  std::set<std::int64_t> seen;
  std::string line;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto fields = split_csv_line(line);
    auto get = [&](const char* name) -> std::string {
      const int idx = col.at(name);
      if (idx >= static_cast<int>(fields.size()))
        fail(Errc::missing_column, "line " + std::to_string(line_no) + " lacks column '" +
                                       std::string(name) + "'");
      return trim(fields[idx]);
    };

    TrackletRecord r;
    try {
      r.tracklet_index = std::stoll(get("tracklet_index"));
      r.person_id = std::stoi(get("person_id"));
      r.camera_id = std::stoi(get("camera_id"));
      r.altitude_m = std::stod(get("altitude_m"));
      r.distance_m = std::stod(get("distance_m"));
      r.angle_deg = std::stod(get("angle_deg"));
    } catch (const std::logic_error&) {
      fail(Errc::value_out_of_range, "unparsable numeric field on line " + std::to_string(line_no));
    }
    r.domain = domain_from_string(get("domain"));
    r.split = split_from_string(get("split"));
    const std::string flip = lower(get("has_flip"));
    if (flip == "1" || flip == "true")
      r.has_flip = true;
    else if (flip == "0" || flip == "false")
      r.has_flip = false;
    else
      fail(Errc::value_out_of_range, "has_flip must be 0/1 on line " + std::to_string(line_no));

    if (r.tracklet_index < 0 || r.person_id < 0 || r.camera_id < 0)
      fail(Errc::value_out_of_range, "negative index/id on line " + std::to_string(line_no));
    if (r.altitude_m < 0 || r.distance_m < 0)
      fail(Errc::value_out_of_range, "negative altitude/distance on line " + std::to_string(line_no));
    if (r.angle_deg < 0 || r.angle_deg > 90)
      fail(Errc::value_out_of_range, "angle_deg outside [0,90] on line " + std::to_string(line_no));
    if (!seen.insert(r.tracklet_index).second)
      fail(Errc::duplicate_index,
           "tracklet_index " + std::to_string(r.tracklet_index) + " appears twice");
    records.push_back(r);
  }
  return records;
}

void write_manifest(const std::string& path, const std::vector<TrackletRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(Errc::io_error, "cannot open '" + path + "' for writing");
  out << "tracklet_index,person_id,camera_id,domain,altitude_m,distance_m,angle_deg,split,has_flip\n";
  char buf[256];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof(buf), "%lld,%d,%d,%s,%.6f,%.6f,%.6f,%s,%d\n",
                  static_cast<long long>(r.tracklet_index), r.person_id, r.camera_id,
                  domain_name(r.domain), r.altitude_m, r.distance_m, r.angle_deg,
                  split_name(r.split), r.has_flip ? 1 : 0);
    out << buf;
  }
}

const FrameFeatureSequence& Dataset::features_of(const TrackletRecord& r) const {
  const auto idx = static_cast<std::size_t>(r.tracklet_index);
  if (idx >= features.size())
    fail(Errc::value_out_of_range,
         "tracklet_index " + std::to_string(r.tracklet_index) + " not present in feature file");
  return features[idx];
}

const FrameFeatureSequence& Dataset::flipped_of(const TrackletRecord& r) const {
  const auto idx = static_cast<std::size_t>(r.tracklet_index);
  if (idx >= flipped.size())
    fail(Errc::value_out_of_range,
         "tracklet_index " + std::to_string(r.tracklet_index) + " not present in flipped features");
  return flipped[idx];
}

Dataset make_dataset(FeatureFile features, std::vector<TrackletRecord> records, FeatureFile flipped) {
  Dataset ds;
  ds.feature_dim = features.feature_dim;
  ds.seq_len = features.seq_len;
  ds.features = std::move(features.sequences);
  ds.records = std::move(records);

  if (!flipped.sequences.empty()) {
    if (flipped.feature_dim != ds.feature_dim || flipped.seq_len != ds.seq_len ||
        flipped.sequences.size() != ds.features.size())
      fail(Errc::shape_mismatch, "flipped feature file shape differs from the original");
    ds.flipped = std::move(flipped.sequences);
  }

  std::set<int> gallery_ids;
  for (const auto& r : ds.records) {
    if (r.tracklet_index >= static_cast<std::int64_t>(ds.features.size()))
      fail(Errc::value_out_of_range, "manifest tracklet_index " + std::to_string(r.tracklet_index) +
                                         " exceeds feature file size");
    if (r.split == Split::gallery) gallery_ids.insert(r.person_id);
  }
  for (const auto& r : ds.records) {
    if (r.split == Split::query && !gallery_ids.count(r.person_id))
      std::cerr << "warning: query person_id " << r.person_id << " has no gallery tracklet\n";
  }
  return ds;
}

Dataset load_dataset(const std::string& feature_path, const std::string& manifest_path,
                     const std::string& flip_feature_path) {
  FeatureFile features = read_feature_file(feature_path);
  std::vector<TrackletRecord> records = parse_manifest(manifest_path);
  FeatureFile flipped;
  if (!flip_feature_path.empty()) flipped = read_feature_file(flip_feature_path);
  return make_dataset(std::move(features), std::move(records), std::move(flipped));
}

}  // namespace xfdreid
