#ifndef ICE_NPY_HPP
#define ICE_NPY_HPP

// Reader/writer for the NumPy .npy array format (little-endian float32/float64).

#include "ice/tensor.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ice {

static_assert(std::endian::native == std::endian::little, "npy codec assumes a little-endian host");

/// A tensor file that cannot be decoded.
class TensorFormatError : public IoError {
 public:
  enum class Kind { malformed_header, unsupported_dtype, truncated_payload, non_finite_value };

  TensorFormatError(Kind kind, const std::string& detail)
      : IoError(std::string(label(kind)) + (detail.empty() ? "" : ": " + detail)), kind_(kind) {}

  Kind kind() const { return kind_; }

  static const char* label(Kind k) {
    switch (k) {
      case Kind::malformed_header: return "malformed header";
      case Kind::unsupported_dtype: return "unsupported dtype";
      case Kind::truncated_payload: return "truncated payload";
      case Kind::non_finite_value: return "non-finite value";
    }
    return "tensor format error";
  }

 private:
  Kind kind_;
};

namespace npy_detail {

inline constexpr std::string_view kMagic = "\x93NUMPY";

struct Header {
  std::string descr;
  bool fortran_order = false;
  std::vector<std::size_t> shape;
};

[[noreturn]] inline void malformed(const std::string& what) {
  throw TensorFormatError(TensorFormatError::Kind::malformed_header, what);
}

// Minimal parser for the Python-literal dict numpy writes, e.g.
// {'descr': '<f8', 'fortran_order': False, 'shape': (2, 3), }
class HeaderParser {
 public:
  explicit HeaderParser(std::string_view text) : s_(text) {}

  Header parse() {
    Header h;
    bool have_descr = false, have_order = false, have_shape = false;
    expect('{');
    while (true) {
      skip_ws();
      if (peek() == '}') break;
      std::string key = parse_string();
      expect(':');
      skip_ws();
      if (key == "descr") {
        h.descr = parse_string();
        have_descr = true;
      } else if (key == "fortran_order") {
        h.fortran_order = parse_bool();
        have_order = true;
      } else if (key == "shape") {
        h.shape = parse_shape();
        have_shape = true;
      } else {
        malformed("unexpected key '" + key + "'");
      }
      skip_ws();
      if (peek() == ',') {
        ++pos_;
        continue;
      }
      skip_ws();
      if (peek() != '}') malformed("expected ',' or '}'");
    }
    if (!have_descr || !have_order || !have_shape) malformed("missing descr, fortran_order or shape");
    return h;
  }

 private:
  char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }

  void skip_ws() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
  }

  void expect(char c) {
    skip_ws();
    if (peek() != c) malformed(std::string("expected '") + c + "'");
    ++pos_;
  }

  std::string parse_string() {
    skip_ws();
    char quote = peek();
    if (quote != '\'' && quote != '"') malformed("expected a quoted string");
    ++pos_;
    auto end = s_.find(quote, pos_);
    if (end == std::string_view::npos) malformed("unterminated string");
    std::string out(s_.substr(pos_, end - pos_));
    pos_ = end + 1;
    return out;
  }

  bool parse_bool() {
    if (s_.substr(pos_, 4) == "True") {
      pos_ += 4;
      return true;
    }
    if (s_.substr(pos_, 5) == "False") {
      pos_ += 5;
      return false;
    }
    malformed("expected True or False");
  }

  std::vector<std::size_t> parse_shape() {
    std::vector<std::size_t> shape;
    expect('(');
    while (true) {
      skip_ws();
      if (peek() == ')') {
        ++pos_;
        break;
      }
      if (peek() < '0' || peek() > '9') malformed("bad shape entry");
      std::size_t v = 0;
      while (peek() >= '0' && peek() <= '9') {
        v = v * 10 + static_cast<std::size_t>(peek() - '0');
        ++pos_;
      }
      shape.push_back(v);
      skip_ws();
      if (peek() == ',') ++pos_;
    }
    return shape;
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

inline std::uint32_t read_le(const unsigned char* p, std::size_t bytes) {
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < bytes; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

inline std::string header_text(const Tensor& t) {
  std::string shape = "(";
  for (std::size_t i = 0; i < t.rank(); ++i) {
    shape += std::to_string(t.shape()[i]);
    if (t.rank() == 1 || i + 1 < t.rank()) shape += (t.rank() == 1 ? "," : ", ");
  }
  shape += ")";
  std::string dict = std::string("{'descr': '") + (t.dtype() == DType::f32 ? "<f4" : "<f8") +
                     "', 'fortran_order': False, 'shape': " + shape + ", }";
  // magic(6) + version(2) + length(2) + dict + padding + '\n' is a multiple of 64
  std::size_t total = 10 + dict.size() + 1;
  std::size_t padded = (total + 63) / 64 * 64;
  dict.append(padded - total, ' ');
  dict.push_back('\n');
  return dict;
}

}  // namespace npy_detail

/// Serialize a tensor as a version 1.0 .npy byte stream.
inline std::vector<unsigned char> encode_npy(const Tensor& t) {
  const std::string header = npy_detail::header_text(t);
  const std::size_t width = t.dtype() == DType::f32 ? 4 : 8;
  std::vector<unsigned char> out;
  out.reserve(10 + header.size() + t.size() * width);
  out.insert(out.end(), npy_detail::kMagic.begin(), npy_detail::kMagic.end());
  out.push_back(1);
  out.push_back(0);
  out.push_back(static_cast<unsigned char>(header.size() & 0xff));
  out.push_back(static_cast<unsigned char>(header.size() >> 8));
  out.insert(out.end(), header.begin(), header.end());
  const std::size_t payload_at = out.size();
  out.resize(payload_at + t.size() * width);
  unsigned char* dst = out.data() + payload_at;
  if (width == 8) {
    std::memcpy(dst, t.data().data(), t.size() * 8);
  } else {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const float f = static_cast<float>(t.data()[i]);
      std::memcpy(dst + i * 4, &f, 4);
    }
  }
  return out;
}

/// Decode a .npy byte stream. float32 payloads are widened to double.
inline Tensor decode_npy(std::span<const unsigned char> bytes) {
  using Kind = TensorFormatError::Kind;
  if (bytes.size() < 10 ||
      std::memcmp(bytes.data(), npy_detail::kMagic.data(), npy_detail::kMagic.size()) != 0) {
    npy_detail::malformed("bad magic bytes");
  }
  const unsigned major = bytes[6];
  std::size_t len_bytes = 0;
  if (major == 1) {
    len_bytes = 2;
  } else if (major == 2 || major == 3) {
    len_bytes = 4;
  } else {
    npy_detail::malformed("unsupported format version " + std::to_string(major));
  }
  if (bytes.size() < 8 + len_bytes) npy_detail::malformed("header length field cut short");
  const std::size_t header_len = npy_detail::read_le(bytes.data() + 8, len_bytes);
  const std::size_t payload_at = 8 + len_bytes + header_len;
  if (bytes.size() < payload_at) npy_detail::malformed("header cut short");
  std::string_view text(reinterpret_cast<const char*>(bytes.data() + 8 + len_bytes), header_len);
  const npy_detail::Header h = npy_detail::HeaderParser(text).parse();

  std::size_t width = 0;
  DType dtype{};
  if (h.descr == "<f8") {
    width = 8;
    dtype = DType::f64;
  } else if (h.descr == "<f4") {
    width = 4;
    dtype = DType::f32;
  } else {
    throw TensorFormatError(Kind::unsupported_dtype, "'" + h.descr + "'");
  }

  const std::size_t count = Tensor::element_count(h.shape);
  if (bytes.size() - payload_at < count * width) {
    throw TensorFormatError(Kind::truncated_payload, "expected " + std::to_string(count * width) +
                                                         " bytes, found " +
                                                         std::to_string(bytes.size() - payload_at));
  }
  std::vector<double> data(count);
  const unsigned char* src = bytes.data() + payload_at;
  for (std::size_t i = 0; i < count; ++i) {
    if (width == 8) {
      std::memcpy(&data[i], src + i * 8, 8);
    } else {
      float f;
      std::memcpy(&f, src + i * 4, 4);
      data[i] = f;
    }
    if (!std::isfinite(data[i])) {
      throw TensorFormatError(Kind::non_finite_value, "element " + std::to_string(i));
    }
  }
  if (h.fortran_order && h.shape.size() > 1) {
    // column-major payload: reorder into row-major
    std::vector<double> row_major(count);
    const std::size_t r = h.shape.size();
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t f = 0; f < count; ++f) {
      std::size_t c_off = 0;
      for (std::size_t a = 0; a < r; ++a) c_off = c_off * h.shape[a] + idx[a];
      row_major[c_off] = data[f];
      for (std::size_t a = 0; a < r; ++a) {
        if (++idx[a] < h.shape[a]) break;
        idx[a] = 0;
      }
    }
    data.swap(row_major);
  }
  return Tensor(h.shape, std::move(data), dtype);
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Write via a temporary sibling and rename, so readers never observe a partial file.
inline void write_file_bytes(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write to '" + path.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move '" + tmp.string() + "' into place: " + ec.message());
}

inline Tensor read_tensor(const std::filesystem::path& path) { return decode_npy(read_file_bytes(path)); }

inline void write_tensor(const Tensor& t, const std::filesystem::path& path) {
  write_file_bytes(path, encode_npy(t));
}

}  // namespace ice

#endif  // ICE_NPY_HPP
