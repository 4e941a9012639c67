// SPDX-License-Identifier: Apache-2.0
#include "xllm/checkpoint.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <memory>

#include "xllm/error.hpp"

namespace xllm {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

constexpr std::array<char, 8> kMagic{'X', 'L', 'L', 'M', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw CheckpointError("truncated checkpoint " + path.string());
  }
  return v;
}

std::string get_string(std::istream& is, std::size_t n, const std::filesystem::path& path) {
  if (n > (std::size_t{1} << 30)) throw CheckpointError("implausible field length in " + path.string());
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) {
    throw CheckpointError("truncated checkpoint " + path.string());
  }
  return s;
}

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
      throw Error("hash error", "cannot initialise SHA-256", ExitCode::kFailure);
    }
  }
  void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_.get(), data, n); }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), md, &len);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
      out += kHex[md[i] >> 4];
      out += kHex[md[i] & 15];
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config,
                     const ParamList& params) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write " + tmp.string());
    os.write(kMagic.data(), kMagic.size());
    put<std::uint32_t>(os, kCheckpointVersion);
    const std::string cfg = config.dump();
    put<std::uint64_t>(os, cfg.size());
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    put<std::uint64_t>(os, params.size());
    for (const auto& [name, t] : params) {
      put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
      for (auto e : t.shape()) put<std::uint64_t>(os, e);
    }
    for (const auto& [name, t] : params) {
      os.write(reinterpret_cast<const char*>(t.data().data()),
               static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!os) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) {
    throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
  }
  const auto version = get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw CheckpointError(path.string() + " has unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  const auto cfg_len = get<std::uint64_t>(is, path);
  try {
    ck.config = nlohmann::json::parse(get_string(is, cfg_len, path));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt config block in " + path.string() + ": " + e.what());
  }
  const auto count = get<std::uint64_t>(is, path);
  if (count > (1u << 20)) throw CheckpointError("implausible tensor count in " + path.string());
  std::vector<std::pair<std::string, Shape>> index;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(is, path);
    std::string name = get_string(is, name_len, path);
    const auto rank = get<std::uint32_t>(is, path);
    if (rank == 0 || rank > 8) throw CheckpointError("bad tensor rank in " + path.string());
    Shape shape(rank);
    for (auto& e : shape) e = get<std::uint64_t>(is, path);
    index.emplace_back(std::move(name), std::move(shape));
  }
  for (auto& [name, shape] : index) {
    std::vector<double> values(shape_size(shape));
    if (!is.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(values.size() * sizeof(double)))) {
      throw CheckpointError("truncated payload in " + path.string());
    }
    ck.params.emplace_back(name, Tensor(shape, std::move(values)));
  }
  return ck;
}

void load_checkpoint_into(const std::filesystem::path& path, const nlohmann::json& expected_config,
                          const ParamList& params) {
  Checkpoint ck = read_checkpoint(path);
  if (ck.config != expected_config) {
    throw ConfigError("checkpoint " + path.string() + " was written for config " + ck.config.dump() +
                      ", expected " + expected_config.dump());
  }
  if (ck.params.size() != params.size()) throw CheckpointError("tensor count mismatch in " + path.string());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (ck.params[i].first != params[i].first || ck.params[i].second.shape() != params[i].second.shape()) {
      throw CheckpointError("tensor '" + ck.params[i].first + "' in " + path.string() +
                            " does not match '" + params[i].first + "'");
    }
  }
  copy_params(ck.params, params);
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string sha256_hex(const std::string& text) {
  Sha256 h;
  h.update(text.data(), text.size());
  return h.hex();
}

std::string params_hash(const ParamList& params) {
  Sha256 h;
  for (const auto& [name, t] : params) {
    h.update(name.data(), name.size());
    for (auto e : t.shape()) {
      const std::uint64_t v = e;
      h.update(&v, sizeof v);
    }
    h.update(t.data().data(), t.size() * sizeof(double));
  }
  return h.hex();
}

}  // namespace xllm
