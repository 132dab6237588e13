#include "ialgca/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <set>

namespace ialgca {

namespace {

constexpr char kMagic[8] = {'I', 'A', 'L', 'G', 'C', 'A', '0', '1'};

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw IoError(cat("truncated checkpoint '", path, "'"));
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamSet<float>& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(cat("cannot open '", path, "' for writing"));
  os.write(kMagic, 8);
  put_u32(os, static_cast<uint32_t>(params.size()));
  for (int i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    put_u32(os, static_cast<uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put_u32(os, static_cast<uint32_t>(p.value.rank()));
    for (int d = 0; d < p.value.rank(); ++d)
      put_u32(os, static_cast<uint32_t>(p.value.dim(d)));
    os.write(reinterpret_cast<const char*>(p.value.data.data()),
             static_cast<std::streamsize>(p.value.numel() * 4));
  }
  if (!os) throw IoError(cat("write failed for '", path, "'"));
}

std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(cat("cannot open checkpoint '", path, "'"));
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw IoError(cat("bad magic in checkpoint '", path, "'"));
  uint32_t count = get_u32(is, path);
  std::vector<CheckpointEntry> entries;
  entries.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    uint32_t name_len = get_u32(is, path);
    e.name.resize(name_len);
    if (!is.read(e.name.data(), name_len))
      throw IoError(cat("truncated checkpoint '", path, "'"));
    uint32_t rank = get_u32(is, path);
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      int dim = static_cast<int>(get_u32(is, path));
      e.shape.push_back(dim);
      numel *= dim;
    }
    e.values.resize(static_cast<size_t>(numel));
    if (!is.read(reinterpret_cast<char*>(e.values.data()), numel * 4))
      throw IoError(cat("truncated checkpoint '", path, "'"));
    entries.push_back(std::move(e));
  }
  return entries;
}

void load_checkpoint_into(const std::string& path, ParamSet<float>& params) {
  auto entries = read_checkpoint(path);
  std::set<std::string> seen;
  for (const auto& e : entries) {
    Parameter<float>* p = params.find(e.name);
    if (!p)
      throw IoError(cat("checkpoint '", path, "' has parameter '", e.name,
                        "' unknown to the current config"));
    if (p->value.shape != e.shape)
      throw IoError(cat("checkpoint '", path, "' parameter '", e.name, "' has dims ",
                        shape_str(e.shape), " but the current config expects ",
                        shape_str(p->value.shape)));
    for (size_t i = 0; i < e.values.size(); ++i)
      p->value.data[static_cast<int64_t>(i)] = e.values[i];
    seen.insert(e.name);
  }
  for (int i = 0; i < params.size(); ++i)
    if (!seen.count(params[i].name))
      throw IoError(cat("checkpoint '", path, "' is missing parameter '", params[i].name, "'"));
}

}  // namespace ialgca
