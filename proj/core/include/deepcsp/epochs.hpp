#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deepcsp/error.hpp"
#include "deepcsp/tensor.hpp"

namespace deepcsp::data {

using Position = std::array<double, 2>;

/// Labeled two-class collection of equally shaped EEG trials.
struct EpochSet {
  Tensor trials;                 // (N, D, T)
  std::vector<int> labels;       // N values in {0, 1}
  double fs = 0.0;               // Hz
  std::vector<std::string> channel_names;
  std::optional<std::vector<Position>> channel_positions;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return trials.rank() == 3 ? trials.dim(1) : 0; }
  std::size_t samples() const { return trials.rank() == 3 ? trials.dim(2) : 0; }
  /// Copy of trial i as a (D, T) matrix.
  Tensor trial(std::size_t i) const { return trials.slice0(i); }
  std::vector<Tensor> trial_list() const;
  std::size_t count(int label) const;

  /// Throws InvalidArgument if the invariants (shape, labels, fs, names) fail.
  void validate() const;

  /// Subset in the given index order.
  EpochSet subset(std::span<const std::size_t> indices) const;
};

enum class FormatErrorKind {
  io,
  bad_magic,
  version_mismatch,
  truncated_payload,
  inconsistent,
};

const char* to_string(FormatErrorKind kind);

/// Typed failure while reading an epoch file.
class FormatError : public Error {
 public:
  FormatError(FormatErrorKind kind, const std::string& message)
      : Error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}
  FormatErrorKind kind() const { return kind_; }

 private:
  FormatErrorKind kind_;
};

inline constexpr std::array<char, 4> kEpochMagic{'E', 'E', 'G', 'E'};
inline constexpr std::uint16_t kEpochVersion = 1;
inline constexpr std::uint16_t kFlagHasPositions = 0x1;

/// Serializes to the EEGE layout (little-endian):
///   magic "EEGE" | version u16 | flags u16 | N u32 | D u16 | T u32 | fs f32 |
///   labels N×u8 | D × (u16 length + UTF-8 name) | [D × (x f32, y f32)] |
///   samples f32, trial-major, then channel, then time.
std::vector<std::uint8_t> encode_epochs(const EpochSet& epochs);
EpochSet decode_epochs(std::span<const std::uint8_t> bytes);

void write_epochs(const std::filesystem::path& path, const EpochSet& epochs);
EpochSet read_epochs(const std::filesystem::path& path);

/// Channel positions sidecar: {"C3": [x, y], ...} or
/// {"channels": [{"name": "C3", "x": .., "y": ..}, ...]}. Returns positions in
/// the order of `channel_names`; throws InvalidArgument naming a missing channel.
std::vector<Position> read_positions_json(const std::filesystem::path& path,
                                          std::span<const std::string> channel_names);

}  // namespace deepcsp::data
