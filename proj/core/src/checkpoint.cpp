#include "fsod/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace fsod {

namespace {

constexpr char kMagic[8] = {'F', 'S', 'O', 'D', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t x) { os.write(reinterpret_cast<const char*>(&x), 4); }
void put_u8(std::ostream& os, uint8_t x) { os.write(reinterpret_cast<const char*>(&x), 1); }

uint32_t get_u32(std::istream& is, const std::string& path) {
  uint32_t x = 0;
  if (!is.read(reinterpret_cast<char*>(&x), 4)) {
    throw std::runtime_error("checkpoint: truncated file " + path);
  }
  return x;
}

uint8_t get_u8(std::istream& is, const std::string& path) {
  uint8_t x = 0;
  if (!is.read(reinterpret_cast<char*>(&x), 1)) {
    throw std::runtime_error("checkpoint: truncated file " + path);
  }
  return x;
}

std::string get_str(std::istream& is, uint32_t len, const std::string& path) {
  std::string s(len, '\0');
  if (len && !is.read(s.data(), len)) {
    throw std::runtime_error("checkpoint: truncated file " + path);
  }
  return s;
}

std::ifstream open_and_check(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  uint32_t ver = get_u32(is, path);
  if (ver != kVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(ver) + " in " +
                             path);
  }
  return is;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& params,
                     const std::string& manifest) {
  std::filesystem::path parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path);
  os.write(kMagic, 8);
  put_u32(os, kVersion);
  put_u32(os, static_cast<uint32_t>(manifest.size()));
  os.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  auto all = params.all();
  put_u32(os, static_cast<uint32_t>(all.size()));
  for (const Param* p : all) {
    put_u32(os, static_cast<uint32_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put_u8(os, static_cast<uint8_t>(p->group));
    put_u8(os, p->trainable ? 1 : 0);
    put_u32(os, static_cast<uint32_t>(p->t.shape.size()));
    for (int d : p->t.shape) put_u32(os, static_cast<uint32_t>(d));
    os.write(reinterpret_cast<const char*>(p->t.v.data()),
             static_cast<std::streamsize>(p->t.v.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

std::string load_checkpoint(const std::string& path, ParamStore& params) {
  std::ifstream is = open_and_check(path);
  uint32_t mlen = get_u32(is, path);
  std::string manifest = get_str(is, mlen, path);
  uint32_t count = get_u32(is, path);
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t nlen = get_u32(is, path);
    std::string name = get_str(is, nlen, path);
    auto group = static_cast<ParamGroup>(get_u8(is, path));
    bool trainable = get_u8(is, path) != 0;
    uint32_t rank = get_u32(is, path);
    Shape shape(rank);
    for (uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(get_u32(is, path));
    Tensor t(shape);
    if (!is.read(reinterpret_cast<char*>(t.v.data()),
                 static_cast<std::streamsize>(t.v.size() * sizeof(double)))) {
      throw std::runtime_error("checkpoint: truncated file " + path);
    }
    if (params.contains(name)) {
      Param& p = params.get(name);
      if (p.group != group) {
        throw std::runtime_error("checkpoint: group tag of '" + name + "' in " + path +
                                 " does not match the model");
      }
      params.reassign(name, std::move(t));
      p.trainable = trainable;
    } else {
      Param& p = params.create(name, std::move(t), group);
      p.trainable = trainable;
    }
  }
  return manifest;
}

std::string read_checkpoint_manifest(const std::string& path) {
  std::ifstream is = open_and_check(path);
  uint32_t mlen = get_u32(is, path);
  return get_str(is, mlen, path);
}

}  // namespace fsod
