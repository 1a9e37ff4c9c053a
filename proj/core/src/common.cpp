#include "xfdreid/common.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <thread>
#include <vector>

namespace xfdreid {

const char* errc_name(Errc c) {
  switch (c) {
    case Errc::bad_magic: return "BadMagic";
    case Errc::shape_mismatch: return "ShapeMismatch";
    case Errc::non_finite: return "NonFinite";
    case Errc::unknown_domain: return "UnknownDomain";
    case Errc::unknown_split: return "UnknownSplit";
    case Errc::duplicate_index: return "DuplicateIndex";
    case Errc::missing_column: return "MissingColumn";
    case Errc::value_out_of_range: return "ValueOutOfRange";
    case Errc::degenerate_range: return "DegenerateRange";
    case Errc::dim_mismatch: return "DimMismatch";
    case Errc::zero_vector: return "ZeroVector";
    case Errc::stale_cache: return "StaleCache";
    case Errc::too_few_channels: return "TooFewChannels";
    case Errc::label_out_of_range: return "LabelOutOfRange";
    case Errc::degenerate_batch: return "DegenerateBatch";
    case Errc::empty_batch: return "EmptyBatch";
    case Errc::too_few_identities: return "TooFewIdentities";
    case Errc::epoch_out_of_range: return "EpochOutOfRange";
    case Errc::frozen_group: return "FrozenGroup";
    case Errc::too_few_elements: return "TooFewElements";
    case Errc::degenerate_k: return "DegenerateK";
    case Errc::empty_protocol: return "EmptyProtocol";
    case Errc::no_relevant: return "NoRelevant";
    case Errc::all_empty: return "AllEmpty";
    case Errc::bad_config: return "BadConfig";
    case Errc::io_error: return "IoError";
    case Errc::usage_error: return "UsageError";
  }
  return "UnknownError";
}

Precision precision_from_string(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  fail(Errc::bad_config, "precision must be f32 or f64, got '" + s + "'");
}

const char* precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  const std::size_t workers =
      std::min<std::size_t>(std::max(threads, 1), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = w * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a64(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io_error, "cannot open '" + path + "' for hashing");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    const std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace xfdreid
