#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "nptt/tensor.hpp"

NPTT_NAMESPACE_BEGIN

// On-disk layout: "NPTT", u32 version, then records until end of stream.
// Each record: u32 name length, UTF-8 name, u32 rank, u64 extents[rank],
// f32 payload[product(extents)]. All integers and floats are little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

struct CheckpointRecord {
  std::string name;
  std::vector<std::uint64_t> extents;
  std::vector<float> payload;
};

class Checkpoint {
 public:
  void put(std::string name, const Tensor& tensor);
  void put(std::string name, std::vector<std::uint64_t> extents, std::vector<float> payload);
  void put_scalar(std::string name, double value);

  bool contains(const std::string& name) const;
  const CheckpointRecord& get(const std::string& name) const;
  Tensor tensor(const std::string& name, bool requires_grad = false) const;
  double scalar(const std::string& name) const;
  std::optional<double> maybe_scalar(const std::string& name) const;

  const std::vector<CheckpointRecord>& records() const { return records_; }

  void write(std::ostream& out) const;
  static Checkpoint read(std::istream& in);

  std::string to_bytes() const;
  static Checkpoint from_bytes(const std::string& bytes);

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

 private:
  std::vector<CheckpointRecord> records_;
};

NPTT_NAMESPACE_END
