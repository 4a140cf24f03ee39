#include "deepcsp/epochs.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include <nlohmann/json.hpp>

namespace deepcsp::data {
namespace {

static_assert(std::endian::native == std::endian::little,
              "epoch files are little-endian; big-endian hosts need byte swapping");

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    T v;
    need(sizeof(T), what);
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(FormatErrorKind::truncated_payload,
                        std::string("file ends inside ") + what);
    }
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const char* to_string(FormatErrorKind kind) {
  switch (kind) {
    case FormatErrorKind::io: return "i/o error";
    case FormatErrorKind::bad_magic: return "bad magic";
    case FormatErrorKind::version_mismatch: return "version mismatch";
    case FormatErrorKind::truncated_payload: return "truncated payload";
    case FormatErrorKind::inconsistent: return "shape/label inconsistency";
  }
  return "unknown";
}

std::vector<Tensor> EpochSet::trial_list() const {
  std::vector<Tensor> out;
  out.reserve(size());
  for (std::size_t i = 0; i < size(); ++i) out.push_back(trial(i));
  return out;
}

std::size_t EpochSet::count(int label) const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), label));
}

void EpochSet::validate() const {
  if (trials.rank() != 3) throw InvalidArgument("epochs: trials must be (N, D, T)");
  if (trials.dim(0) != labels.size()) throw InvalidArgument("epochs: one label per trial required");
  for (int l : labels) {
    if (l != 0 && l != 1) throw InvalidArgument("epochs: labels must be 0 or 1");
  }
  if (!(fs > 0.0) || !std::isfinite(fs)) throw InvalidArgument("epochs: sampling rate must be positive");
  if (channel_names.size() != channels()) throw InvalidArgument("epochs: one name per channel required");
  if (channel_positions && channel_positions->size() != channels()) {
    throw InvalidArgument("epochs: one position per channel required");
  }
}

EpochSet EpochSet::subset(std::span<const std::size_t> indices) const {
  EpochSet out;
  out.fs = fs;
  out.channel_names = channel_names;
  out.channel_positions = channel_positions;
  std::vector<Tensor> parts;
  parts.reserve(indices.size());
  for (auto i : indices) {
    parts.push_back(trial(i));
    out.labels.push_back(labels.at(i));
  }
  out.trials = parts.empty() ? Tensor(Shape{0, channels(), samples()}) : stack(parts);
  return out;
}

std::vector<std::uint8_t> encode_epochs(const EpochSet& epochs) {
  epochs.validate();
  const std::size_t n = epochs.size(), d = epochs.channels(), t = epochs.samples();
  if (n > UINT32_MAX || d > UINT16_MAX || t > UINT32_MAX) {
    throw InvalidArgument("epochs: dimensions exceed the file format limits");
  }
  Writer w;
  w.put_bytes(kEpochMagic.data(), kEpochMagic.size());
  w.put<std::uint16_t>(kEpochVersion);
  w.put<std::uint16_t>(epochs.channel_positions ? kFlagHasPositions : 0);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(n));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(d));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t));
  w.put<float>(static_cast<float>(epochs.fs));
  for (int l : epochs.labels) w.put<std::uint8_t>(static_cast<std::uint8_t>(l));
  for (const auto& name : epochs.channel_names) {
    if (name.size() > UINT16_MAX) throw InvalidArgument("epochs: channel name too long");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name.data(), name.size());
  }
  if (epochs.channel_positions) {
    for (const auto& p : *epochs.channel_positions) {
      w.put<float>(static_cast<float>(p[0]));
      w.put<float>(static_cast<float>(p[1]));
    }
  }
  w.bytes.reserve(w.bytes.size() + 4 * epochs.trials.size());
  for (double v : epochs.trials.data()) w.put<float>(static_cast<float>(v));
  return std::move(w.bytes);
}

EpochSet decode_epochs(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (bytes.size() < kEpochMagic.size()) {
    throw FormatError(FormatErrorKind::truncated_payload, "file shorter than the magic");
  }
  const auto magic = r.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kEpochMagic.begin())) {
    throw FormatError(FormatErrorKind::bad_magic, "expected \"EEGE\"");
  }
  const auto version = r.get<std::uint16_t>("version");
  if (version != kEpochVersion) {
    throw FormatError(FormatErrorKind::version_mismatch,
                      "file version " + std::to_string(version) + ", reader supports " +
                          std::to_string(kEpochVersion));
  }
  const auto flags = r.get<std::uint16_t>("flags");
  const auto n = r.get<std::uint32_t>("trial count");
  const auto d = r.get<std::uint16_t>("channel count");
  const auto t = r.get<std::uint32_t>("sample count");
  const auto fs = r.get<float>("sampling rate");
  if ((flags & ~kFlagHasPositions) != 0) {
    throw FormatError(FormatErrorKind::inconsistent, "unknown flag bits set");
  }
  if (d == 0 || t == 0) throw FormatError(FormatErrorKind::inconsistent, "zero channels or samples");
  if (!std::isfinite(fs) || !(fs > 0.0f)) {
    throw FormatError(FormatErrorKind::inconsistent, "sampling rate must be positive");
  }

  EpochSet out;
  out.fs = fs;
  const auto label_bytes = r.take(n, "labels");
  out.labels.reserve(n);
  for (auto b : label_bytes) {
    if (b > 1) throw FormatError(FormatErrorKind::inconsistent, "label outside {0, 1}");
    out.labels.push_back(b);
  }
  for (std::size_t c = 0; c < d; ++c) {
    const auto len = r.get<std::uint16_t>("channel name length");
    const auto name = r.take(len, "channel name");
    out.channel_names.emplace_back(name.begin(), name.end());
  }
  if (flags & kFlagHasPositions) {
    std::vector<Position> pos(d);
    for (auto& p : pos) {
      p[0] = r.get<float>("channel position");
      p[1] = r.get<float>("channel position");
    }
    out.channel_positions = std::move(pos);
  }
  const std::uint64_t count = std::uint64_t{n} * d * t;
  if (r.remaining() < count * 4) {
    throw FormatError(FormatErrorKind::truncated_payload,
                      "expected " + std::to_string(count * 4) + " sample bytes, found " +
                          std::to_string(r.remaining()));
  }
  if (r.remaining() > count * 4) {
    throw FormatError(FormatErrorKind::inconsistent,
                      std::to_string(r.remaining() - count * 4) + " trailing bytes after samples");
  }
  const auto raw = r.take(static_cast<std::size_t>(count * 4), "samples");
  std::vector<double> values(static_cast<std::size_t>(count));
  for (std::size_t i = 0; i < values.size(); ++i) {
    float f;
    std::memcpy(&f, raw.data() + 4 * i, 4);
    values[i] = f;
  }
  out.trials = Tensor(Shape{n, d, t}, std::move(values), DType::f32);
  return out;
}

void write_epochs(const std::filesystem::path& path, const EpochSet& epochs) {
  const auto bytes = encode_epochs(epochs);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(FormatErrorKind::io, "cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw FormatError(FormatErrorKind::io, "failed writing " + path.string());
}

EpochSet read_epochs(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatErrorKind::io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_epochs(bytes);
}

std::vector<Position> read_positions_json(const std::filesystem::path& path,
                                          std::span<const std::string> channel_names) {
  std::ifstream is(path);
  if (!is) throw InvalidArgument("cannot open positions file " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument("positions file " + path.string() + ": " + e.what());
  }
  std::map<std::string, Position> table;
  if (j.contains("channels")) {
    for (const auto& c : j.at("channels")) {
      table[c.at("name").get<std::string>()] = {c.at("x").get<double>(), c.at("y").get<double>()};
    }
  } else {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto xy = it.value().get<std::vector<double>>();
      if (xy.size() != 2) throw InvalidArgument("positions file: expected [x, y] for " + it.key());
      table[it.key()] = {xy[0], xy[1]};
    }
  }
  std::vector<Position> out;
  for (const auto& name : channel_names) {
    auto it = table.find(name);
    if (it == table.end()) throw InvalidArgument("missing position for channel " + name);
    out.push_back(it->second);
  }
  return out;
}

}  // namespace deepcsp::data
