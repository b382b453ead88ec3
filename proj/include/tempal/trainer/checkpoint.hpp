#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tempal/numcore/adam.hpp"
#include "tempal/numcore/rng.hpp"
#include "tempal/numcore/tensor.hpp"

namespace tempal {

inline constexpr char kCheckpointMagic[4] = {'T', 'M', 'P', 'L'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// One named record. `words` holds the raw 32-bit payload: float bits for
/// tensors, bit-packed integers and text for the rest.
struct CheckpointRecord {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint32_t> words;
  friend bool operator==(const CheckpointRecord&, const CheckpointRecord&) = default;
};

/// Ordered list of records. Getters throw FormatError on a missing name or a
/// payload of the wrong size.
class Checkpoint {
 public:
  const std::vector<CheckpointRecord>& records() const { return records_; }
  bool contains(const std::string& name) const;
  const CheckpointRecord& record(const std::string& name) const;

  void add(CheckpointRecord record);
  void add_tensor(const std::string& name, const Tensorf& t);
  void add_floats(const std::string& name, std::span<const float> values);
  void add_u64(const std::string& name, std::span<const std::uint64_t> values);
  void add_text(const std::string& name, const std::string& text);
  void add_rng(const std::string& name, const Rng& rng);
  void add_adam(const std::string& prefix, const AdamState<float>& state);

  /// Copies the stored tensor into `t`, which must already have the same shape.
  void read_tensor(const std::string& name, Tensorf& t) const;
  Tensorf tensor(const std::string& name) const;
  std::vector<float> floats(const std::string& name) const;
  std::vector<std::uint64_t> u64(const std::string& name) const;
  std::uint64_t u64_scalar(const std::string& name) const;
  std::string text(const std::string& name) const;
  Rng rng(const std::string& name) const;
  AdamState<float> adam(const std::string& prefix, std::span<const Tensorf> params) const;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;

 private:
  std::vector<CheckpointRecord> records_;
};

/// Little-endian bytes: magic, version, then per record name length, name,
/// rank, dims, data, up to the end of the file.
std::vector<char> serialize_checkpoint(const Checkpoint& ckpt);
/// FormatError on a bad magic or truncated/trailing data;
/// UnsupportedVersionError on another version.
Checkpoint deserialize_checkpoint(std::span<const char> bytes);

/// Writes to a temporary file next to `path`, then renames it. IoError on failure.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace tempal
