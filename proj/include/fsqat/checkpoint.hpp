#pragma once

// Checkpoint container (little-endian):
//   "QATC" | u32 version | u64 header length | JSON header | raw float64 blocks
// The header records tau, the transformer shape, the block table and the
// resolved configuration the model was trained with.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsqat/io.hpp"
#include "fsqat/qat.hpp"

namespace fsqat {

struct Checkpoint {
  QATParams params;
  double tau = 10.0;
  std::string config;  // key = value echo

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline constexpr std::array<char, 4> kCheckpointMagic{'Q', 'A', 'T', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  ck.params.validate();
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& [name, m] : ck.params.blocks()) blocks.push_back({{"name", name}, {"rows", m->rows}, {"cols", m->cols}});
  const nlohmann::json header{{"tau", ck.tau},
                              {"embed_dim", ck.params.embed_dim()},
                              {"latent_dim", ck.params.latent_dim()},
                              {"heads", ck.params.num_heads()},
                              {"dropout", ck.params.dropout},
                              {"blocks", blocks},
                              {"config", ck.config}};
  const std::string h = header.dump();
  std::ostringstream os(std::ios::binary);
  os.write(kCheckpointMagic.data(), 4);
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t hlen = h.size();
  os.write(reinterpret_cast<const char*>(&version), sizeof version);
  os.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& [_, m] : ck.params.blocks())
    os.write(reinterpret_cast<const char*>(m->data.data()), static_cast<std::streamsize>(m->size() * sizeof(double)));
  return os.str();
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& where = "checkpoint") {
  auto fail = [&](const std::string& why) { return FormatError(where + ": " + why); };
  if (bytes.size() < 16) throw fail("truncated header");
  if (!std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) throw fail("bad magic (expected QATC)");
  std::uint32_t version = 0;
  std::uint64_t hlen = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&hlen, bytes.data() + 8, 8);
  if (version != kCheckpointVersion) throw fail("unsupported version " + std::to_string(version));
  if (hlen > bytes.size() - 16) throw fail("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw fail(e.what());
  }
  Checkpoint ck;
  try {
    ck.tau = header.at("tau").get<double>();
    ck.config = header.at("config").get<std::string>();
    ck.params = zero_qat_params(header.at("embed_dim").get<std::size_t>(), header.at("latent_dim").get<std::size_t>(),
                                header.at("heads").get<std::size_t>(), header.at("dropout").get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw fail(e.what());
  } catch (const ShapeError& e) {
    throw fail(e.what());
  }
  std::size_t off = 16 + hlen;
  auto blocks = ck.params.blocks();
  const auto& table = header.at("blocks");
  if (table.size() != blocks.size()) throw fail("block table does not match the transformer shape");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    auto& [name, m] = blocks[i];
    if (table[i].at("name") != name || table[i].at("rows") != m->rows || table[i].at("cols") != m->cols)
      throw fail("block " + std::to_string(i) + " is not " + name + " " + m->shape());
    const std::size_t n = m->size() * sizeof(double);
    if (bytes.size() - off < n) throw fail("truncated payload in block " + name);
    std::memcpy(m->data.data(), bytes.data() + off, n);
    off += n;
  }
  if (off != bytes.size()) throw fail("trailing bytes after payload");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError(path.string() + ": cannot open for writing");
  const std::string b = serialize_checkpoint(ck);
  os.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!os) throw FormatError(path.string() + ": write failed");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(path.string() + ": cannot open");
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize_checkpoint(ss.str(), path.string());
}

}  // namespace fsqat
