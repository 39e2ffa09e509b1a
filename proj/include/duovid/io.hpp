#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "duovid/error.hpp"
#include "duovid/tensor.hpp"

// Binary formats, all little-endian:
//
//   raw tensor file   "DVTN" u32 version=1, u32 rank, u64 dims[rank], f32 payload
//   tensor archive    "DVAR" u32 version=1, u32 count, then per entry:
//                     u32 name_len, name bytes, u8 dtype (0=f32, 1=f64),
//                     u32 rank, u64 dims[rank], payload

namespace duovid::io {

namespace fs = std::filesystem;

namespace detail {

template <class U>
void put(std::string& out, U value) {
  static_assert(std::is_trivially_copyable_v<U>);
  char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  out.append(bytes, sizeof(U));
}

class Reader {
 public:
  Reader(std::string data, std::string origin) : data_(std::move(data)), origin_(std::move(origin)) {}

  template <class U>
  U get() {
    need(sizeof(U));
    char bytes[sizeof(U)];
    std::memcpy(bytes, data_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    pos_ += sizeof(U);
    U value;
    std::memcpy(&value, bytes, sizeof(U));
    return value;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const noexcept { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    require(pos_ + n <= data_.size(), ErrorKind::io_error, origin_ + ": truncated file");
  }
  std::string data_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io_error, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Write to a sibling temporary, then rename over the target.
inline void atomic_write(const fs::path& path, const std::string& contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::io_error, "cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    require(static_cast<bool>(out), ErrorKind::io_error, "short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

template <class T>
std::string encode_raw_tensor(const Tensor<T>& t) {
  std::string out = "DVTN";
  detail::put<std::uint32_t>(out, 1);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) detail::put<std::uint64_t>(out, d);
  for (T v : t.data()) detail::put<float>(out, static_cast<float>(v));
  return out;
}

inline Tensor<float> decode_raw_tensor(std::string bytes, const std::string& origin = "raw tensor") {
  detail::Reader r(std::move(bytes), origin);
  require(r.bytes(4) == "DVTN", ErrorKind::io_error, origin + ": bad magic");
  require(r.get<std::uint32_t>() == 1, ErrorKind::io_error, origin + ": unsupported version");
  const auto rank = r.get<std::uint32_t>();
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
  Tensor<float> t(shape);
  for (auto& v : t.data()) v = r.get<float>();
  require(r.done(), ErrorKind::io_error, origin + ": trailing bytes");
  return t;
}

template <class T>
void write_raw_tensor(const fs::path& path, const Tensor<T>& t) {
  atomic_write(path, encode_raw_tensor(t));
}

inline Tensor<float> read_raw_tensor(const fs::path& path) { return decode_raw_tensor(read_file(path), path.string()); }

template <class T>
std::string encode_archive(const std::map<std::string, Tensor<T>>& arrays) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  std::string out = "DVAR";
  detail::put<std::uint32_t>(out, 1);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, t] : arrays) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put<std::uint8_t>(out, std::is_same_v<T, float> ? 0 : 1);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put<std::uint64_t>(out, d);
    for (T v : t.data()) detail::put<T>(out, v);
  }
  return out;
}

template <class T>
std::map<std::string, Tensor<T>> decode_archive(std::string bytes, const std::string& origin = "archive") {
  detail::Reader r(std::move(bytes), origin);
  require(r.bytes(4) == "DVAR", ErrorKind::io_error, origin + ": bad magic");
  require(r.get<std::uint32_t>() == 1, ErrorKind::io_error, origin + ": unsupported version");
  const auto count = r.get<std::uint32_t>();
  std::map<std::string, Tensor<T>> out;
  for (std::uint32_t e = 0; e < count; ++e) {
    std::string name = r.bytes(r.get<std::uint32_t>());
    const auto dtype = r.get<std::uint8_t>();
    require(dtype <= 1, ErrorKind::io_error, origin + ": unknown dtype for " + name);
    Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    Tensor<T> t(shape);
    for (auto& v : t.data()) v = dtype == 0 ? static_cast<T>(r.get<float>()) : static_cast<T>(r.get<double>());
    out.emplace(std::move(name), std::move(t));
  }
  require(r.done(), ErrorKind::io_error, origin + ": trailing bytes");
  return out;
}

template <class T>
void write_archive(const fs::path& path, const std::map<std::string, Tensor<T>>& arrays) {
  atomic_write(path, encode_archive(arrays));
}

template <class T>
std::map<std::string, Tensor<T>> read_archive(const fs::path& path) {
  return decode_archive<T>(read_file(path), path.string());
}

// Binary PGM (P5) or PPM (P6) with maxval 255, returned as [H, W, C] in [0,1].
inline Tensor<float> read_pnm(const fs::path& path) {
  const std::string bytes = read_file(path);
  std::istringstream in(bytes);
  std::string magic;
  in >> magic;
  require(magic == "P5" || magic == "P6", ErrorKind::io_error, path.string() + ": expected binary PGM/PPM");
  auto next_int = [&]() {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
      in >> std::ws;
    }
    int v = 0;
    in >> v;
    require(static_cast<bool>(in), ErrorKind::io_error, path.string() + ": bad header");
    return v;
  };
  const int width = next_int(), height = next_int(), maxval = next_int();
  require(width > 0 && height > 0 && maxval == 255, ErrorKind::io_error, path.string() + ": unsupported dimensions or maxval");
  in.get();
  const std::size_t channels = magic == "P6" ? 3 : 1;
  const std::size_t count = static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * channels;
  const auto start = static_cast<std::size_t>(in.tellg());
  require(start + count <= bytes.size(), ErrorKind::io_error, path.string() + ": truncated pixels");
  Tensor<float> t({static_cast<std::size_t>(height), static_cast<std::size_t>(width), channels});
  for (std::size_t i = 0; i < count; ++i) t[i] = static_cast<unsigned char>(bytes[start + i]) / 255.0f;
  return t;
}

inline void write_pnm(const fs::path& path, const Tensor<float>& image) {
  require(image.rank() == 3 && (image.dim(2) == 1 || image.dim(2) == 3), ErrorKind::shape_mismatch,
          "write_pnm expects [H,W,1|3]");
  std::string out = (image.dim(2) == 3 ? "P6\n" : "P5\n") + std::to_string(image.dim(1)) + " " +
                    std::to_string(image.dim(0)) + "\n255\n";
  for (float v : image.data()) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0f))));
  }
  atomic_write(path, out);
}

inline std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::io_error, "cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t hash = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

inline std::string hex64(std::uint64_t value) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, value >>= 4) out[static_cast<std::size_t>(i)] = digits[value & 0xf];
  return out;
}

inline void append_line(const fs::path& path, const std::string& line) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::app);
  require(static_cast<bool>(out), ErrorKind::io_error, "cannot append to " + path.string());
  out << line << '\n';
}

namespace detail {

inline std::uint32_t crc32(std::string_view bytes) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t n = 0; n < 256; ++n) {
      std::uint32_t c = n;
      for (int k = 0; k < 8; ++k) c = c & 1 ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[n] = c;
    }
    return t;
  }();
  std::uint32_t c = 0xffffffffu;
  for (unsigned char b : bytes) c = table[(c ^ b) & 0xff] ^ (c >> 8);
  return c ^ 0xffffffffu;
}

inline void put_be32(std::string& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<char>((v >> shift) & 0xff));
}

inline void png_chunk(std::string& out, const char* type, const std::string& data) {
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  const std::string body = std::string(type, 4) + data;
  out += body;
  put_be32(out, crc32(body));
}

}  // namespace detail

// 8-bit PNG from an [H,W,1|3] image in [0,1]. The zlib stream uses stored
// blocks only, so no compression library is needed.
inline std::string encode_png(const Tensor<float>& image) {
  require(image.rank() == 3 && (image.dim(2) == 1 || image.dim(2) == 3), ErrorKind::shape_mismatch,
          "encode_png expects [H,W,1|3]");
  const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  std::string raw;
  raw.reserve(H * (W * C + 1));
  for (std::size_t y = 0; y < H; ++y) {
    raw.push_back('\0');
    for (std::size_t i = 0; i < W * C; ++i) {
      const float v = std::clamp(image[y * W * C + i], 0.0f, 1.0f);
      raw.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
    }
  }
  std::string z{'\x78', '\x01'};
  for (std::size_t pos = 0; pos < raw.size() || pos == 0; pos += 65535) {
    const std::size_t n = std::min<std::size_t>(65535, raw.size() - pos);
    z.push_back(pos + n >= raw.size() ? '\x01' : '\x00');
    const auto len = static_cast<std::uint16_t>(n);
    z.push_back(static_cast<char>(len & 0xff));
    z.push_back(static_cast<char>(len >> 8));
    z.push_back(static_cast<char>(~len & 0xff));
    z.push_back(static_cast<char>((~len >> 8) & 0xff));
    z.append(raw, pos, n);
    if (raw.empty()) break;
  }
  std::uint32_t a = 1, b = 0;
  for (unsigned char c : raw) {
    a = (a + c) % 65521;
    b = (b + a) % 65521;
  }
  detail::put_be32(z, (b << 16) | a);

  std::string header;
  detail::put_be32(header, static_cast<std::uint32_t>(W));
  detail::put_be32(header, static_cast<std::uint32_t>(H));
  header += {'\x08', C == 3 ? '\x02' : '\x00', '\0', '\0', '\0'};
  std::string out("\x89PNG\r\n\x1a\n", 8);
  detail::png_chunk(out, "IHDR", header);
  detail::png_chunk(out, "IDAT", z);
  detail::png_chunk(out, "IEND", {});
  return out;
}

}  // namespace duovid::io
