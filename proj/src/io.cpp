#include "satmark/io/io.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "satmark/errors.hpp"

namespace satmark::io {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

Digest sha256(const void* data, std::size_t size) {
  Digest out{};
  unsigned int len = 0;
  if (EVP_Digest(data, size, out.data(), &len, EVP_sha256(), nullptr) != 1 || len != out.size())
    throw std::runtime_error("sha256 failed");
  return out;
}

std::string hex(const Digest& d) {
  static const char* kDigits = "0123456789abcdef";
  std::string s;
  for (auto b : d) {
    s += kDigits[b >> 4];
    s += kDigits[b & 15];
  }
  return s;
}

namespace {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& b) : bytes_(b) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n)
      throw ParseError(std::string("truncated checkpoint while reading ") + what, static_cast<long long>(pos_));
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

void put_tensor(std::string& out, const std::string& name, const TensorF& t) {
  if (name.size() > 0xffff) throw ContractError("tensor name too long: " + name.substr(0, 32) + "...");
  if (t.rank() > 255) throw ContractError("tensor rank too large");
  put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  out += name;
  put<std::uint8_t>(out, 0);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  for (int e : t.shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
  out.append(reinterpret_cast<const char*>(t.data.data()), static_cast<std::size_t>(t.data.size()) * sizeof(float));
}

}  // namespace

Digest tensors_digest(const NamedTensors& tensors) {
  std::string buf;
  for (const auto& [name, t] : tensors) put_tensor(buf, name, t);
  return sha256(buf);
}

const TensorF& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw ParseError("checkpoint has no tensor named '" + name + "'");
}

std::string encode_checkpoint(const Checkpoint& c) {
  std::string out = "SATW";
  put<std::uint32_t>(out, kCheckpointVersion);
  out.append(reinterpret_cast<const char*>(c.config_hash.data()), c.config_hash.size());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) put_tensor(out, name, t);
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.take(4, "magic") != "SATW") throw ParseError("not a checkpoint (bad magic)", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(version), 4);
  Checkpoint c;
  const std::string h = r.take(32, "config hash");
  std::memcpy(c.config_hash.data(), h.data(), 32);
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = r.get<std::uint16_t>("name length");
    std::string name = r.take(len, "name");
    const std::size_t at = r.pos();
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype != 0) throw ParseError("tensor '" + name + "' has unsupported dtype " + std::to_string(dtype), static_cast<long long>(at));
    const auto rank = r.get<std::uint8_t>("rank");
    ndiff::Shape shape;
    std::uint64_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      const auto e = r.get<std::uint32_t>("extent");
      if (e == 0 || e > 0x7fffffffu) throw ParseError("tensor extent out of range", static_cast<long long>(r.pos() - 4));
      shape.push_back(static_cast<int>(e));
      numel *= e;
      if (numel > (std::uint64_t{1} << 32)) throw ParseError("tensor too large", static_cast<long long>(r.pos()));
    }
    const std::string payload = r.take(static_cast<std::size_t>(numel) * sizeof(float), "payload");
    TensorF t(shape);
    std::memcpy(t.data.data(), payload.data(), payload.size());
    c.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw ParseError("trailing bytes after checkpoint", static_cast<long long>(r.pos()));
  return c;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ParseError("cannot write '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ParseError("short write to '" + path + "'");
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::string& path, const Checkpoint& c) { write_file(path, encode_checkpoint(c)); }

Checkpoint load_checkpoint(const std::string& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

std::string encode_ppm(const TensorF& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("ppm: expected a [3, H, W] image");
  const int H = image.dim(1), W = image.dim(2);
  std::string out = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  out.reserve(out.size() + static_cast<std::size_t>(3) * H * W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = image.data[(c * H + y) * W + x];
        if (!(v >= 0.0f && v <= 1.0f)) throw ContractError("ppm: pixel values must lie in [0, 1]");
        out += static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
      }
  return out;
}

TensorF decode_ppm(const std::string& bytes) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) { throw ParseError("ppm: " + what, static_cast<long long>(pos)); };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) fail(std::string("expected ") + what);
    long v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > 1 << 20) fail(std::string(what) + " too large");
    }
    return static_cast<int>(v);
  };
  if (bytes.compare(0, 2, "P6") != 0) fail("missing P6 magic");
  pos = 2;
  const int W = number("width"), H = number("height");
  skip_space();
  const std::size_t maxval_at = pos;
  const int maxval = number("maxval");
  if (maxval != 255) {
    pos = maxval_at;
    fail("maxval " + std::to_string(maxval) + " unsupported (only 255)");
  }
  if (W < 1 || H < 1) fail("empty image");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) fail("missing separator after header");
  ++pos;
  const std::size_t need = static_cast<std::size_t>(3) * W * H;
  if (bytes.size() - pos < need) {
    pos = bytes.size();
    fail("truncated pixel data");
  }
  TensorF img({3, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c)
        img.data[(c * H + y) * W + x] = static_cast<float>(static_cast<unsigned char>(bytes[pos++])) / 255.0f;
  if (pos != bytes.size()) fail("trailing bytes after pixel data");
  return img;
}

void write_ppm(const std::string& path, const TensorF& image) { write_file(path, encode_ppm(image)); }

TensorF read_ppm(const std::string& path) {
  try {
    return decode_ppm(read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

}  // namespace satmark::io
