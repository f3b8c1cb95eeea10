#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "telldrive/tensor/tensor.hpp"

namespace telldrive::tensor {

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

struct AdamOptions {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Named trainable tensors in insertion order, each with its Adam moments.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    AdamState adam;
  };

  /// Registers a parameter; throws UsageError on a duplicate name.
  Tensor& add(const std::string& name, Tensor value);
  /// Weight [fan_in, fan_out] drawn from U(-sqrt(1/fan_in), +sqrt(1/fan_in)).
  Tensor& add_weight(const std::string& name, std::size_t fan_in, std::size_t fan_out,
                     std::mt19937_64& rng);
  Tensor& add_bias(const std::string& name, std::size_t size);

  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  /// One bias-corrected Adam update from the accumulated gradients.
  void adam_step(const AdamOptions& options);

  /// Deep copy: fresh tensors, same values and optimizer state.
  ParamStore clone() const;
  /// Overwrites values (not optimizer state) from a store with the same layout.
  void copy_values_from(const ParamStore& other);

 private:
  std::vector<Entry> entries_;
};

/// Binary checkpoint layout (little-endian):
///   magic "TDCK" | u32 schema_version | u64 arch_hash | u32 record_count
///   per record: u32 name_len | name | u32 rank | u64 dims... | f64 data...
///   u32 CRC32 over every preceding byte.
/// Records hold each parameter and, after them, its Adam moments under the
/// names "<param>@adam.m", "<param>@adam.v", "<param>@adam.step".
inline constexpr std::uint32_t kCheckpointSchemaVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params,
                     std::uint64_t arch_hash);
/// Loads into an existing store with identical layout. Throws CheckpointError
/// on bad magic, CRC mismatch, architecture-hash mismatch or layout mismatch.
void load_checkpoint(const std::filesystem::path& path, ParamStore& params,
                     std::uint64_t expected_arch_hash);
/// Reads only the header's architecture hash (after CRC verification).
std::uint64_t read_checkpoint_arch_hash(const std::filesystem::path& path);

}  // namespace telldrive::tensor
