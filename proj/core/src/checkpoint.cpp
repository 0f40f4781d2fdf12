#include "affetto/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace affetto {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian; big-endian hosts need swapping");

namespace {
constexpr char kMagic[4] = {'A', 'F', 'C', 'K'};
}

void Checkpoint::save(const std::filesystem::path& path) const {
  if (variant.empty()) throw std::invalid_argument("checkpoint: variant tag is mandatory");

  nlohmann::json header;
  header["version"] = version;
  header["variant"] = variant;
  header["config"] = config_json.empty() ? nlohmann::json::object()
                                         : nlohmann::json::parse(config_json);
  nlohmann::json table = nlohmann::json::object();
  uint64_t offset = 0;
  for (const auto& [name, tensor] : tensors) {
    table[name] = {{"shape", tensor.shape}, {"offset", offset}};
    offset += static_cast<uint64_t>(tensor.numel()) * sizeof(float);
  }
  header["tensors"] = table;
  std::string hs = header.dump();

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open " + tmp.string());
    out.write(kMagic, 4);
    uint32_t ver = static_cast<uint32_t>(version);
    uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, tensor] : tensors)
      out.write(reinterpret_cast<const char*>(tensor.v.data()),
                static_cast<std::streamsize>(tensor.v.size() * sizeof(float)));
    if (!out) throw std::runtime_error("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  uint32_t ver = 0;
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("checkpoint: truncated header in " + path.string());

  nlohmann::json header = nlohmann::json::parse(hs);
  Checkpoint ck;
  ck.version = static_cast<int>(ver);
  ck.variant = header.at("variant").get<std::string>();
  ck.config_json = header.at("config").dump();

  std::vector<std::pair<uint64_t, std::string>> by_offset;
  for (const auto& [name, entry] : header.at("tensors").items())
    by_offset.emplace_back(entry.at("offset").get<uint64_t>(), name);
  std::sort(by_offset.begin(), by_offset.end());

  for (const auto& [offset, name] : by_offset) {
    auto shape = header["tensors"][name]["shape"].get<std::vector<int64_t>>();
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.v.data()),
            static_cast<std::streamsize>(t.v.size() * sizeof(float)));
    if (!in) throw std::runtime_error("checkpoint: truncated payload at '" + name + "'");
    ck.tensors.emplace(name, std::move(t));
  }
  return ck;
}

}  // namespace affetto
