#include "cgnc/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <unistd.h>

#include "cgnc/error.hpp"
#include "cgnc/rng.hpp"

namespace cgnc {
namespace {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

constexpr char kMagic[8] = {'C', 'G', 'N', 'C', 'A', 'R', 'C', 'H'};

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::size_t end, std::string origin)
      : bytes_(b), end_(end), origin_(std::move(origin)) {}

  template <class T>
  T get(const std::string& field) {
    need(sizeof(T), field);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string str(std::size_t n, const std::string& field) {
    need(n, field);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void doubles(double* dst, std::size_t n, const std::string& field) {
    need(n * sizeof(double), field);
    std::memcpy(dst, bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const std::string& field) {
    if (pos_ + n > end_ || pos_ + n < pos_) throw LoadError(origin_ + ": truncated while reading " + field);
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
  std::string origin_;
};

std::uint64_t digest_bytes(const std::uint8_t* p, std::size_t n) {
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(p), n));
}

}  // namespace

const Tensor& Archive::array(const std::string& name) const {
  for (const auto& [n, t] : arrays) {
    if (n == name) return t;
  }
  throw LoadError("archive is missing array '" + name + "'");
}

std::vector<std::uint8_t> serialize_archive(const Archive& a) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put<std::uint32_t>(out, a.version);
  put<std::uint32_t>(out, 0);
  const std::string meta = a.meta.dump();
  put<std::uint64_t>(out, meta.size());
  out.insert(out.end(), meta.begin(), meta.end());
  put<std::uint64_t>(out, a.arrays.size());
  for (const auto& [name, t] : a.arrays) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::int64_t>(out, d);
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data());
    out.insert(out.end(), p, p + t.size() * sizeof(double));
  }
  put<std::uint64_t>(out, digest_bytes(out.data(), out.size()));
  return out;
}

Archive parse_archive(const std::vector<std::uint8_t>& bytes, std::uint32_t max_version, const std::string& origin) {
  if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw LoadError(origin + ": not a cgnc archive (bad magic)");
  }
  Reader header(bytes, bytes.size(), origin);
  header.str(sizeof(kMagic), "magic");
  Archive a;
  a.version = header.get<std::uint32_t>("format version");
  if (a.version > max_version) {
    throw LoadError(origin + ": unsupported format version " + std::to_string(a.version) + " (this build reads <= " +
                    std::to_string(max_version) + ")");
  }
  if (bytes.size() < 8 + sizeof(kMagic) + 8) throw LoadError(origin + ": truncated archive");
  const std::size_t body_end = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body_end, sizeof(stored));
  Reader r(bytes, body_end, origin);
  r.str(sizeof(kMagic) + 8, "header");
  const auto meta_len = r.get<std::uint64_t>("metadata length");
  const std::string meta = r.str(meta_len, "metadata");
  const auto count = r.get<std::uint64_t>("array count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>("array name length");
    std::string name = r.str(name_len, "array name");
    const auto rank = r.get<std::uint32_t>("rank of '" + name + "'");
    if (rank > 8) throw LoadError(origin + ": implausible rank for array '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) {
      d = r.get<std::int64_t>("shape of '" + name + "'");
      if (d < 0 || d > (std::int64_t{1} << 32)) throw LoadError(origin + ": bad dimension in array '" + name + "'");
    }
    Tensor t(shape);
    r.doubles(t.data(), t.size(), "data of '" + name + "'");
    a.arrays.emplace_back(std::move(name), std::move(t));
  }
  if (r.pos() != body_end) throw LoadError(origin + ": trailing bytes after arrays");
  if (digest_bytes(bytes.data(), body_end) != stored) throw LoadError(origin + ": checksum mismatch (corrupt archive)");
  try {
    a.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(origin + ": metadata is not valid JSON: " + e.what());
  }
  return a;
}

void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move " + tmp.string() + " to " + path.string());
  }
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void save_archive(const std::filesystem::path& path, const Archive& a) { write_file_atomic(path, serialize_archive(a)); }

Archive load_archive(const std::filesystem::path& path, std::uint32_t max_version) {
  return parse_archive(read_file_bytes(path), max_version, path.string());
}

std::string file_digest(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << digest_bytes(bytes.data(), bytes.size());
  return os.str();
}

}  // namespace cgnc
