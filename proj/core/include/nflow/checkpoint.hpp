#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "nflow/flow_model.hpp"

namespace nflow {

inline constexpr char kCheckpointMagic[4] = {'N', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public Error {
 public:
  CheckpointError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

struct CheckpointInfo {
  FlowConfig config;
  bool actnorm_initialized = false;
  std::size_t train_step = 0;
  std::size_t parameter_count = 0;
};

template <typename T>
struct LoadedCheckpoint {
  FlowModel<T> model;
  CheckpointInfo info;
};

/// Layout: "NFCK", u32 version, u32 JSON length, JSON header, then one record
/// per parameter sorted by name. All integers little-endian.
template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const FlowModel<T>& model, std::size_t train_step = 0);

/// Records may be stored as f32 or f64; values are converted to T.
template <typename T>
LoadedCheckpoint<T> deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

template <typename T>
void save_checkpoint(const FlowModel<T>& model, const std::string& path, std::size_t train_step = 0);

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path);

/// Header only, without building a model.
CheckpointInfo read_checkpoint_info(const std::string& path);

std::string config_to_json(const FlowConfig& config);
FlowConfig config_from_json(const std::string& json);

}  // namespace nflow
