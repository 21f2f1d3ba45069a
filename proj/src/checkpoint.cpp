#include "groundseg/model/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "groundseg/core.hpp"
#include "groundseg/error.hpp"

namespace groundseg::model {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'G', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void read_floats(float* dst, std::size_t n) {
    need(n * sizeof(float));
    std::memcpy(dst, bytes_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }

  [[nodiscard]] bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IoError("checkpoint archive is truncated");
  }

  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const TensorRecord* Archive::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void write_archive(const Archive& archive, const std::filesystem::path& path) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kArchiveSchemaVersion);
  const std::string meta = archive.metadata.dump();
  put<std::uint64_t>(out, meta.size());
  out += meta;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(archive.tensors.size()));
  for (const auto& t : archive.tensors) {
    std::uint64_t n = 1;
    for (const auto d : t.dims) n *= d;
    if (n != t.data.size()) throw Error("tensor " + t.name + " data does not match its dims");
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
    for (const auto d : t.dims) put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
  }
  write_file_atomic(path, out);
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  Reader r(ss.str());
  if (r.take(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    throw IoError(path.string() + " is not a checkpoint archive");
  }
  const auto schema = r.get<std::uint32_t>();
  if (schema > kArchiveSchemaVersion) {
    throw IoError("checkpoint schema " + std::to_string(schema) + " is newer than supported (" +
                  std::to_string(kArchiveSchemaVersion) + ")");
  }
  Archive a;
  const auto meta_len = r.get<std::uint64_t>();
  a.metadata = nlohmann::ordered_json::parse(r.take(meta_len));
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord t;
    t.name = r.take(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.dims.push_back(r.get<std::uint64_t>());
      n *= t.dims.back();
    }
    t.data.resize(n);
    r.read_floats(t.data.data(), n);
    a.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) throw IoError("trailing bytes in checkpoint " + path.string());
  return a;
}

}  // namespace groundseg::model
