#include "dpad/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "dpad/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace dpad {

namespace {
constexpr char kMagic[8] = {'D', 'P', 'A', 'D', 'S', 'N', 'A', 'P'};

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw FormatError("'" + path + "': truncated checkpoint");
  return v;
}
}  // namespace

void write_checkpoint(const std::string& path,
                      const std::vector<CheckpointEntry>& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(kMagic, sizeof(kMagic));
  put<uint32_t>(out, kCheckpointVersion);
  put<uint64_t>(out, entries.size());
  for (const CheckpointEntry& e : entries) {
    if (e.name.empty() || e.name.size() > 65535)
      throw ContractError("checkpoint entry name length out of range");
    if (static_cast<int64_t>(e.data.size()) != shape_numel(e.shape))
      throw DimensionError("entry '" + e.name + "' has " +
                           std::to_string(e.data.size()) +
                           " values for shape " + shape_str(e.shape));
    put<uint16_t>(out, static_cast<uint16_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<uint8_t>(out, static_cast<uint8_t>(e.shape.size()));
    for (int64_t d : e.shape) put<int64_t>(out, d);
  }
  for (const CheckpointEntry& e : entries)
    out.write(reinterpret_cast<const char*>(e.data.data()),
              static_cast<std::streamsize>(e.data.size() * sizeof(double)));
  if (!out) throw IoError("failed writing '" + path + "'");
}

std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, 8) != 0)
    throw FormatError("'" + path + "': not a checkpoint file");
  const uint32_t version = get<uint32_t>(in, path);
  if (version != kCheckpointVersion)
    throw FormatError("'" + path + "': unsupported checkpoint version " +
                      std::to_string(version));
  const uint64_t count = get<uint64_t>(in, path);
  if (count > 1000000)
    throw FormatError("'" + path + "': implausible entry count");
  std::vector<CheckpointEntry> entries(count);
  for (CheckpointEntry& e : entries) {
    const uint16_t nlen = get<uint16_t>(in, path);
    e.name.resize(nlen);
    if (!in.read(e.name.data(), nlen))
      throw FormatError("'" + path + "': truncated checkpoint");
    const uint8_t rank = get<uint8_t>(in, path);
    e.shape.resize(rank);
    for (uint8_t i = 0; i < rank; ++i) {
      e.shape[i] = get<int64_t>(in, path);
      if (e.shape[i] < 0 || e.shape[i] > (int64_t{1} << 32))
        throw FormatError("'" + path + "': implausible dimension");
    }
  }
  for (CheckpointEntry& e : entries) {
    e.data.resize(static_cast<size_t>(shape_numel(e.shape)));
    if (!in.read(reinterpret_cast<char*>(e.data.data()),
                 static_cast<std::streamsize>(e.data.size() * sizeof(double))))
      throw FormatError("'" + path + "': truncated checkpoint payload");
  }
  return entries;
}

const CheckpointEntry& find_entry(const std::vector<CheckpointEntry>& entries,
                                  const std::string& name) {
  for (const CheckpointEntry& e : entries)
    if (e.name == name) return e;
  throw ContractError("checkpoint is missing entry '" + name + "'");
}

bool has_entry(const std::vector<CheckpointEntry>& entries,
               const std::string& name) {
  for (const CheckpointEntry& e : entries)
    if (e.name == name) return true;
  return false;
}

}  // namespace dpad
