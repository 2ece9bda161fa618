#include "bowda/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace bowda {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'B', 'W', 'D', 'A', 'C', 'K', 'P', 'T'};

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }
void put_string(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

  void bytes(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (!in_) throw std::runtime_error("checkpoint " + path_ + ": truncated file");
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, 8);
    return v;
  }
  std::string string(std::uint64_t limit = std::uint64_t{1} << 32) {
    const std::uint64_t n = u64();
    if (n > limit) throw std::runtime_error("checkpoint " + path_ + ": implausible string length");
    std::string s(n, '\0');
    if (n) bytes(s.data(), n);
    return s;
  }

 private:
  std::istream& in_;
  std::string path_;
};

}  // namespace

const CheckpointBlob* Checkpoint::find(const std::string& name) const {
  for (const auto& b : blobs) {
    if (b.name == name) return &b;
  }
  return nullptr;
}

bool Checkpoint::has_prefix(const std::string& prefix) const {
  for (const auto& b : blobs) {
    if (b.name.rfind(prefix, 0) == 0) return true;
  }
  return false;
}

void Checkpoint::add_store(const std::string& prefix, const ParamStore<float>& store) {
  for (const Parameter<float>* p : store.all()) {
    blobs.push_back({prefix + p->name, p->value.shape(), p->value.values()});
  }
}

void Checkpoint::load_store(const std::string& prefix, ParamStore<float>& store) const {
  for (Parameter<float>* p : store.all()) {
    const CheckpointBlob* b = find(prefix + p->name);
    if (!b) throw std::runtime_error("checkpoint: missing tensor '" + prefix + p->name + "'");
    if (!(b->shape == p->value.shape())) {
      throw std::runtime_error("checkpoint: tensor '" + prefix + p->name + "' has shape " + to_string(b->shape) +
                               ", expected " + to_string(p->value.shape()));
    }
    p->value.values() = b->data;
  }
}

void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    put_u32(out, Checkpoint::kVersion);
    put_string(out, ck.digest);
    put_u64(out, ck.blobs.size());
    for (const auto& b : ck.blobs) {
      if (b.data.size() != b.shape.count()) {
        throw std::invalid_argument("checkpoint: blob '" + b.name + "' size does not match its shape");
      }
      put_string(out, b.name);
      for (int e : {b.shape.n, b.shape.c, b.shape.d, b.shape.h, b.shape.w}) put_u32(out, static_cast<std::uint32_t>(e));
      out.write(reinterpret_cast<const char*>(b.data.data()), static_cast<std::streamsize>(b.data.size() * 4));
    }
    put_string(out, ck.metadata.dump());
    if (!out) throw std::runtime_error("error writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  Reader r(in, path.string());
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw std::runtime_error(path.string() + " is not a checkpoint");
  const std::uint32_t version = r.u32();
  if (version != Checkpoint::kVersion) {
    throw std::runtime_error("checkpoint " + path.string() + ": unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.digest = r.string(1024);
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointBlob b;
    b.name = r.string(4096);
    int e[5];
    for (int& v : e) v = static_cast<int>(r.u32());
    b.shape = Shape{e[0], e[1], e[2], e[3], e[4]};
    b.data.resize(b.shape.count());
    r.bytes(b.data.data(), b.data.size() * 4);
    ck.blobs.push_back(std::move(b));
  }
  ck.metadata = Json::parse(r.string());
  return ck;
}

}  // namespace bowda
