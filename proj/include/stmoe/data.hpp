#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stmoe/config.hpp"
#include "stmoe/random.hpp"
#include "stmoe/tensor.hpp"

namespace stmoe {

struct MotionSequence {
  std::size_t persons = 0;
  std::size_t frames = 0;
  std::size_t joints = 0;
  float fps = 25.0F;
  std::vector<float> positions;  // (persons, frames, joints, 3), millimeters

  float at(std::size_t person, std::size_t frame, std::size_t joint, std::size_t coord) const {
    return positions[((person * frames + frame) * joints + joint) * 3 + coord];
  }
};

// MMP1 layout, little-endian:
//   0  char[4] "MMP1"     4  u32 version      8  u32 S
//  12  u32 M             16  u32 T_total     20  u32 J
//  24  f32 fps           28  u32 reserved (0)
//  32  f32 payload, (sequence, person, frame, joint, coord) order
struct DatasetHeader {
  std::uint32_t version = 1;
  std::uint32_t sequences = 0;
  std::uint32_t persons = 0;
  std::uint32_t frames = 0;
  std::uint32_t joints = 0;
  float fps = 0.0F;
};

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 32;

void write_dataset(const std::vector<MotionSequence>& sequences, const std::string& path);
std::vector<MotionSequence> read_dataset(const std::string& path);
DatasetHeader read_dataset_header(const std::string& path);

enum class MotionKind { kWalk, kTurn, kStopAndGo };

struct SynthSpec {
  std::size_t sequences = 32;
  std::size_t persons = 2;
  std::size_t frames = 75;
  std::size_t joints = 15;
  double fps = 25.0;
  std::uint64_t seed = 0;
  double walk = 1.0;         // relative mix weights
  double turn = 1.0;
  double stop_and_go = 1.0;
  double reach = 900.0;      // max joint-to-root distance, mm
  double min_speed = 400.0;  // mm/s
  double max_speed = 1400.0;
  double lane_margin = 300.0;  // gap between neighbouring lanes, mm

  void validate() const;
};

SynthSpec synth_spec_from_json(const Json& j);
Json to_json(const SynthSpec& s);

struct SynthLabel {
  MotionKind kind = MotionKind::kWalk;
  std::size_t stop_frame = 0;  // first frame with zero root velocity (stop-and-go only)
};

/// Deterministic toy multi-person motion. Labels, when requested, are
/// per (sequence, person).
std::vector<MotionSequence> synth_generate(const SynthSpec& spec, std::vector<SynthLabel>* labels = nullptr);

struct Batch {
  Tensor history;  // (B * M, D, t)
  Tensor target;   // (B * M, D, T)
  std::vector<std::size_t> sequence_ids;
  std::size_t persons = 0;
};

/// Windows of the first T frames, persons flattened into the batch axis,
/// pose axis joint-major (j * 3 + c).
class BatchIterator {
 public:
  BatchIterator(const std::vector<MotionSequence>& sequences, std::size_t batch_size, std::size_t t, std::size_t total,
                std::optional<std::uint64_t> shuffle_seed);

  std::optional<Batch> next();
  std::size_t batch_count() const;
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const std::vector<MotionSequence>& seqs_;
  std::size_t batch_size_, t_, total_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// (B * M, D, frames) -> (B, M, J, 3, frames).
Tensor unflatten_batch(const Tensor& x, std::size_t persons);
/// (N, D, frames) -> (N, J, 3, frames), the loss layout.
Tensor to_joint_layout(const Tensor& x);

}  // namespace stmoe
