#pragma once

#include <string>
#include <vector>

#include "dpad/tensor.hpp"

// Binary parameter container: named arrays with shapes, values stored as
// 64-bit little-endian floats regardless of the in-memory compute precision.
//
// Layout: magic "DPADSNAP" | u32 version | u64 entry count |
//         per entry: u16 name length, name bytes, u8 rank, i64 dims... |
//         all entry payloads in order as f64 little-endian.

namespace dpad {

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

inline constexpr uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::string& path,
                      const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::string& path);

// Convenience lookup; throws ContractError when absent.
const CheckpointEntry& find_entry(const std::vector<CheckpointEntry>& entries,
                                  const std::string& name);
bool has_entry(const std::vector<CheckpointEntry>& entries,
               const std::string& name);

}  // namespace dpad
