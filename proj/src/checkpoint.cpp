#include "viscop/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "viscop/errors.hpp"

namespace viscop {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'V', 'C', 'P', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    T value;
    take(&value, sizeof(T));
    return value;
  }
  std::string get_string(std::size_t n) {
    std::string s(n, '\0');
    take(s.data(), n);
    return s;
  }
  void take(void* dst, std::size_t n) {
    if (n > bytes_.size() - pos_) throw ConfigError("checkpoint: truncated data");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  [[nodiscard]] bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> Checkpoint::serialize() const {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put<std::uint32_t>(out, version);
  put<std::uint64_t>(out, config_json.size());
  out.insert(out.end(), config_json.begin(), config_json.end());
  put<std::uint64_t>(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put<std::uint64_t>(out, e);
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data().data());
    out.insert(out.end(), p, p + t.numel() * sizeof(double));
  }
  return out;
}

Checkpoint Checkpoint::deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[8];
  r.take(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw ConfigError("checkpoint: bad magic");
  const auto ver = r.get<std::uint32_t>();
  if (ver != version) throw ConfigError("checkpoint: unsupported version " + std::to_string(ver));
  Checkpoint ck;
  ck.config_json = r.get_string(r.get<std::uint64_t>());
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.get_string(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& e : shape) e = r.get<std::uint64_t>();
    std::vector<double> data(shape_numel(shape));
    r.take(data.data(), data.size() * sizeof(double));
    ck.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw ConfigError("checkpoint: trailing bytes");
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const { write_file_bytes(path, serialize()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) { return deserialize(read_file_bytes(path)); }

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[value & 0xf];
    value >>= 4;
  }
  return s;
}

std::string content_hash(const std::vector<std::uint8_t>& bytes) { return hex64(fnv1a64(bytes.data(), bytes.size())); }

std::string content_hash(const std::string& text) { return hex64(fnv1a64(text.data(), text.size())); }

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

}  // namespace viscop
