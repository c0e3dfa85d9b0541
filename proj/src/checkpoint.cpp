#include "nptt/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

NPTT_NAMESPACE_BEGIN

namespace {

constexpr std::array<char, 4> kMagic{'N', 'P', 'T', 'T'};

template <typename U>
void write_le(std::ostream& out, U value) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFFu);
  out.write(bytes.data(), bytes.size());
}

template <typename U>
U read_le(std::istream& in, const char* what) {
  std::array<unsigned char, sizeof(U)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw CheckpointError(std::string("truncated checkpoint while reading ") + what);
  }
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

}  // namespace

void Checkpoint::put(std::string name, const Tensor& tensor) {
  std::vector<std::uint64_t> extents(tensor.shape().begin(), tensor.shape().end());
  std::vector<float> payload(tensor.values().begin(), tensor.values().end());
  put(std::move(name), std::move(extents), std::move(payload));
}

void Checkpoint::put(std::string name, std::vector<std::uint64_t> extents, std::vector<float> payload) {
  std::uint64_t count = 1;
  for (auto e : extents) count *= e;
  if (count != payload.size()) throw CheckpointError("record '" + name + "' payload does not match its extents");
  auto it = std::find_if(records_.begin(), records_.end(), [&](const auto& r) { return r.name == name; });
  CheckpointRecord record{std::move(name), std::move(extents), std::move(payload)};
  if (it != records_.end()) {
    *it = std::move(record);
  } else {
    records_.push_back(std::move(record));
  }
}

void Checkpoint::put_scalar(std::string name, double value) {
  put(std::move(name), {}, {static_cast<float>(value)});
}

bool Checkpoint::contains(const std::string& name) const {
  return std::any_of(records_.begin(), records_.end(), [&](const auto& r) { return r.name == name; });
}

const CheckpointRecord& Checkpoint::get(const std::string& name) const {
  auto it = std::find_if(records_.begin(), records_.end(), [&](const auto& r) { return r.name == name; });
  if (it == records_.end()) throw CheckpointError("checkpoint has no record '" + name + "'");
  return *it;
}

Tensor Checkpoint::tensor(const std::string& name, bool requires_grad) const {
  const auto& r = get(name);
  Shape shape(r.extents.begin(), r.extents.end());
  return Tensor::from(std::move(shape), std::vector<Real>(r.payload.begin(), r.payload.end()), requires_grad);
}

double Checkpoint::scalar(const std::string& name) const {
  const auto& r = get(name);
  if (r.payload.size() != 1) throw CheckpointError("record '" + name + "' is not a scalar");
  return r.payload[0];
}

std::optional<double> Checkpoint::maybe_scalar(const std::string& name) const {
  if (!contains(name)) return std::nullopt;
  return scalar(name);
}

void Checkpoint::write(std::ostream& out) const {
  out.write(kMagic.data(), kMagic.size());
  write_le<std::uint32_t>(out, kCheckpointVersion);
  for (const auto& r : records_) {
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.extents.size()));
    for (auto e : r.extents) write_le<std::uint64_t>(out, e);
    for (float v : r.payload) write_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  if (!out) throw CheckpointError("failed to write checkpoint");
}

Checkpoint Checkpoint::read(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != 4 || magic != kMagic) throw CheckpointError("not an NPTT checkpoint (bad magic)");
  const auto version = read_le<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ckpt;
  while (in.peek() != std::char_traits<char>::eof()) {
    CheckpointRecord r;
    const auto name_len = read_le<std::uint32_t>(in, "name length");
    r.name.resize(name_len);
    in.read(r.name.data(), name_len);
    if (in.gcount() != static_cast<std::streamsize>(name_len)) throw CheckpointError("truncated record name");
    const auto rank = read_le<std::uint32_t>(in, "rank");
    if (rank > 16) throw CheckpointError("record '" + r.name + "' has implausible rank " + std::to_string(rank));
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      r.extents.push_back(read_le<std::uint64_t>(in, "extent"));
      count *= r.extents.back();
    }
    if (count > (std::uint64_t{1} << 32)) throw CheckpointError("record '" + r.name + "' is implausibly large");
    r.payload.resize(count);
    for (auto& v : r.payload) v = std::bit_cast<float>(read_le<std::uint32_t>(in, "payload"));
    ckpt.records_.push_back(std::move(r));
  }
  return ckpt;
}

std::string Checkpoint::to_bytes() const {
  std::ostringstream out(std::ios::binary);
  write(out);
  return std::move(out).str();
}

Checkpoint Checkpoint::from_bytes(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  return read(in);
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open '" + path + "' for writing");
  write(out);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path + "'");
  return read(in);
}

NPTT_NAMESPACE_END
