#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace xfdreid {

using Vec = Eigen::VectorXd;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Precision { f32, f64 };

Precision precision_from_string(const std::string& s);
const char* precision_name(Precision p);

// Typed domain errors. The CLI maps any Error to exit code 1, usage_error to 2.
enum class Errc {
  bad_magic,
  shape_mismatch,
  non_finite,
  unknown_domain,
  unknown_split,
  duplicate_index,
  missing_column,
  value_out_of_range,
  degenerate_range,
  dim_mismatch,
  zero_vector,
  stale_cache,
  too_few_channels,
  label_out_of_range,
  degenerate_batch,
  empty_batch,
  too_few_identities,
  epoch_out_of_range,
  frozen_group,
  too_few_elements,
  degenerate_k,
  empty_protocol,
  no_relevant,
  all_empty,
  bad_config,
  io_error,
  usage_error,
};

const char* errc_name(Errc c);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& msg)
      : std::runtime_error(std::string(errc_name(code)) + ": " + msg), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) { throw Error(code, msg); }

// Static row partition; fn(i) must not touch shared mutable state. Results are
// independent of the thread count by construction.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

// splitmix64, used to derive per-epoch / per-stream seeds from one master seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

std::uint64_t fnv1a64(const void* data, std::size_t len);
std::uint64_t hash_file(const std::string& path);
std::string hex64(std::uint64_t v);

}  // namespace xfdreid
