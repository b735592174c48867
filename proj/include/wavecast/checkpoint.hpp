#pragma once

// WCN1 container: magic, u64 manifest length, manifest text, float32 payloads.
//
// Manifest lines are either `meta <key> <value...>` or
// `tensor <name> <rank> <dims...>`; payloads follow in tensor order.

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "wavecast/errors.hpp"
#include "wavecast/io.hpp"
#include "wavecast/tensor.hpp"

namespace wavecast {

inline constexpr char kCheckpointMagic[4] = {'W', 'C', 'N', '1'};

struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  void set(const std::string& key, const std::string& value) {
    if (key.find_first_of(" \t\n") != std::string::npos || value.find('\n') != std::string::npos) {
      throw UsageError("checkpoint meta must be single-line with a blank-free key");
    }
    for (auto& [k, v] : meta) {
      if (k == key) {
        v = value;
        return;
      }
    }
    meta.emplace_back(key, value);
  }

  bool has(const std::string& key) const {
    for (const auto& kv : meta)
      if (kv.first == key) return true;
    return false;
  }

  const std::string& get(const std::string& key) const {
    for (const auto& [k, v] : meta)
      if (k == key) return v;
    throw FormatError("checkpoint is missing meta key '" + key + "'");
  }

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t) {
    if (name.find_first_of(" \t\n") != std::string::npos) throw UsageError("bad tensor name");
    tensors.emplace_back(name, t.template cast<float>());
  }

  bool has_tensor(const std::string& name) const {
    for (const auto& kv : tensors)
      if (kv.first == name) return true;
    return false;
  }

  const Tensor<float>& tensor(const std::string& name) const {
    for (const auto& [k, t] : tensors)
      if (k == name) return t;
    throw FormatError("checkpoint is missing tensor '" + name + "'");
  }
};

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::ostringstream m;
  for (const auto& [k, v] : ck.meta) m << "meta " << k << ' ' << v << '\n';
  for (const auto& [name, t] : ck.tensors) {
    m << "tensor " << name << ' ' << t.rank();
    for (auto d : t.shape()) m << ' ' << d;
    m << '\n';
  }
  const std::string manifest = m.str();
  std::string out(kCheckpointMagic, 4);
  io::put_le<std::uint64_t>(out, manifest.size());
  out += manifest;
  for (const auto& kv : ck.tensors)
    for (float v : kv.second.values()) io::put_le<float>(out, v);
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& data, const std::string& what) {
  io::Reader in(data, what);
  if (in.bytes(4) != std::string(kCheckpointMagic, 4)) throw FormatError(what + ": bad magic");
  const auto len = in.get<std::uint64_t>();
  if (len > in.remaining()) throw IntegrityError(what + ": manifest is truncated");
  std::istringstream m(in.bytes(static_cast<std::size_t>(len)));
  Checkpoint ck;
  std::string line;
  while (std::getline(m, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind, key;
    ls >> kind >> key;
    if (kind == "meta") {
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value[0] == ' ') value.erase(0, 1);
      ck.meta.emplace_back(key, value);
    } else if (kind == "tensor") {
      std::size_t rank = 0;
      if (!(ls >> rank) || rank > 8) throw FormatError(what + ": bad tensor line: " + line);
      Shape s(rank);
      for (auto& d : s) {
        if (!(ls >> d)) throw FormatError(what + ": bad tensor line: " + line);
      }
      ck.tensors.emplace_back(key, Tensor<float>(s));
    } else {
      throw FormatError(what + ": unknown manifest line: " + line);
    }
  }
  for (auto& kv : ck.tensors) in.floats(kv.second.data(), kv.second.size());
  if (in.remaining() != 0) throw FormatError(what + ": trailing bytes after payload");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  io::write_file(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return parse_checkpoint(io::read_file(path), path);
}

}  // namespace wavecast
