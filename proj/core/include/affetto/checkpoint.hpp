#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "affetto/tensor.hpp"

namespace affetto {

// Named-tensor container: fixed magic, a JSON header carrying the format
// version, the conditioning variant tag, an arbitrary config object and the
// name -> (shape, offset) table, followed by a little-endian float32 payload.
struct Checkpoint {
  int version = 1;
  std::string variant;     // conditioning variant tag, mandatory
  std::string config_json; // serialized config object
  std::map<std::string, Tensor> tensors;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

}  // namespace affetto
