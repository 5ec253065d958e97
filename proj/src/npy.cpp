#include "miml/npy.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>

static_assert(std::endian::native == std::endian::little, "NPY reader assumes a little-endian host");

namespace miml {
namespace {

constexpr std::uint8_t kMagic[] = {0x93, 'N', 'U', 'M', 'P', 'Y'};

[[noreturn]] void fail(NpyError::Kind kind, const std::string& msg) { throw NpyError(kind, "npy: " + msg); }

// Minimal reader for the header dict, e.g.
//   {'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }
class HeaderReader {
 public:
  explicit HeaderReader(std::string_view text) : text_(text) {}

  void parse(std::string& descr, bool& fortran, Shape& shape) {
    bool have_descr = false, have_order = false, have_shape = false;
    expect('{');
    while (true) {
      skip_ws();
      if (peek() == '}') break;
      const std::string key = quoted();
      expect(':');
      skip_ws();
      if (key == "descr") {
        descr = quoted();
        have_descr = true;
      } else if (key == "fortran_order") {
        fortran = boolean();
        have_order = true;
      } else if (key == "shape") {
        shape = tuple();
        have_shape = true;
      } else {
        fail(NpyError::Kind::bad_header, "unexpected header key '" + key + "'");
      }
      skip_ws();
      if (peek() == ',') ++pos_;
    }
    if (!have_descr || !have_order || !have_shape) {
      fail(NpyError::Kind::bad_header, "header lacks descr, fortran_order or shape");
    }
  }

 private:
  char peek() const { return pos_ < text_.size() ? text_[pos_] : '\0'; }
  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }
  void expect(char c) {
    skip_ws();
    if (peek() != c) fail(NpyError::Kind::bad_header, std::string("expected '") + c + "' in header");
    ++pos_;
  }
  std::string quoted() {
    skip_ws();
    const char q = peek();
    if (q != '\'' && q != '"') fail(NpyError::Kind::bad_header, "expected quoted string in header");
    const auto end = text_.find(q, pos_ + 1);
    if (end == std::string_view::npos) fail(NpyError::Kind::bad_header, "unterminated string in header");
    std::string s(text_.substr(pos_ + 1, end - pos_ - 1));
    pos_ = end + 1;
    return s;
  }
  bool boolean() {
    if (text_.substr(pos_, 4) == "True") {
      pos_ += 4;
      return true;
    }
    if (text_.substr(pos_, 5) == "False") {
      pos_ += 5;
      return false;
    }
    fail(NpyError::Kind::bad_header, "fortran_order must be True or False");
  }
  Shape tuple() {
    expect('(');
    Shape shape;
    while (true) {
      skip_ws();
      if (peek() == ')') {
        ++pos_;
        return shape;
      }
      if (!std::isdigit(static_cast<unsigned char>(peek()))) fail(NpyError::Kind::bad_header, "bad shape tuple");
      std::size_t v = 0;
      while (std::isdigit(static_cast<unsigned char>(peek()))) v = v * 10 + static_cast<std::size_t>(text_[pos_++] - '0');
      shape.push_back(v);
      skip_ws();
      if (peek() == ',') ++pos_;
    }
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

struct DtypeInfo {
  DType dtype;
  std::size_t item_size;
};

std::optional<DtypeInfo> decode_descr(const std::string& d) {
  if (d == "|u1" || d == "<u1") return DtypeInfo{DType::u8, 1};
  if (d == "|b1") return DtypeInfo{DType::b1, 1};
  if (d == "<f4") return DtypeInfo{DType::f4, 4};
  if (d == "<f8") return DtypeInfo{DType::f8, 8};
  if (d == "<i8") return DtypeInfo{DType::i8, 8};
  if (d.size() > 2 && (d.rfind("<U", 0) == 0 || d.rfind("|S", 0) == 0)) {
    std::size_t n = 0;
    for (std::size_t i = 2; i < d.size(); ++i) {
      if (!std::isdigit(static_cast<unsigned char>(d[i]))) return std::nullopt;
      n = n * 10 + static_cast<std::size_t>(d[i] - '0');
    }
    if (d[0] == '<') return DtypeInfo{DType::unicode, 4 * n};
    return DtypeInfo{DType::bytes, n};
  }
  return std::nullopt;
}

void append_utf8(std::string& out, std::uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

std::vector<std::uint32_t> utf8_codepoints(const std::string& s) {
  std::vector<std::uint32_t> cps;
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    int extra = 0;
    std::uint32_t cp = c;
    if (c >= 0xF0) {
      extra = 3;
      cp = c & 0x07;
    } else if (c >= 0xE0) {
      extra = 2;
      cp = c & 0x0F;
    } else if (c >= 0xC0) {
      extra = 1;
      cp = c & 0x1F;
    }
    ++i;
    for (int k = 0; k < extra && i < s.size(); ++k, ++i) cp = (cp << 6) | (static_cast<unsigned char>(s[i]) & 0x3F);
    cps.push_back(cp);
  }
  return cps;
}

template <typename T>
T load_le(const std::uint8_t* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

}  // namespace

std::string dtype_descr(DType dtype, std::size_t item_size) {
  switch (dtype) {
    case DType::u8: return "|u1";
    case DType::b1: return "|b1";
    case DType::f4: return "<f4";
    case DType::f8: return "<f8";
    case DType::i8: return "<i8";
    case DType::unicode: return "<U" + std::to_string(item_size / 4);
    case DType::bytes: return "|S" + std::to_string(item_size);
  }
  return "?";
}

NpyArray parse_npy(std::span<const std::uint8_t> bytes) {
  const std::size_t probe = std::min(bytes.size(), sizeof(kMagic));
  if (probe == 0 || std::memcmp(bytes.data(), kMagic, probe) != 0) {
    fail(NpyError::Kind::bad_magic, "missing \\x93NUMPY magic");
  }
  if (bytes.size() < 10) fail(NpyError::Kind::truncated, "stream ends inside the preamble");
  if (bytes[6] != 1 || bytes[7] != 0) {
    fail(NpyError::Kind::unsupported_version, "only format version 1.0 is supported, got " +
                                                  std::to_string(bytes[6]) + "." + std::to_string(bytes[7]));
  }
  const std::size_t header_len = bytes[8] | (static_cast<std::size_t>(bytes[9]) << 8);
  if (bytes.size() < 10 + header_len) fail(NpyError::Kind::truncated, "header runs past end of data");
  const std::string_view header(reinterpret_cast<const char*>(bytes.data() + 10), header_len);

  std::string descr;
  bool fortran = false;
  NpyArray out;
  HeaderReader(header).parse(descr, fortran, out.shape);
  if (fortran) fail(NpyError::Kind::fortran_order, "fortran_order=True arrays are not supported");
  const auto info = decode_descr(descr);
  if (!info) fail(NpyError::Kind::unsupported_dtype, "unsupported dtype '" + descr + "'");
  out.dtype = info->dtype;
  out.item_size = info->item_size;

  const std::size_t n = out.count();
  const std::uint8_t* p = bytes.data() + 10 + header_len;
  const std::size_t available = bytes.size() - 10 - header_len;
  if (available < n * out.item_size) {
    fail(NpyError::Kind::truncated, "payload has " + std::to_string(available) + " bytes, shape " +
                                        shape_str(out.shape) + " needs " + std::to_string(n * out.item_size));
  }

  if (out.is_string()) {
    out.strings.reserve(n);
    for (std::size_t i = 0; i < n; ++i, p += out.item_size) {
      std::string s;
      if (out.dtype == DType::unicode) {
        for (std::size_t k = 0; k < out.item_size / 4; ++k) {
          const auto cp = load_le<std::uint32_t>(p + 4 * k);
          if (cp == 0) break;
          append_utf8(s, cp);
        }
      } else {
        for (std::size_t k = 0; k < out.item_size && p[k] != 0; ++k) s.push_back(static_cast<char>(p[k]));
      }
      out.strings.push_back(std::move(s));
    }
    return out;
  }

  std::vector<double> values(n);
  switch (out.dtype) {
    case DType::u8:
    case DType::b1:
      for (std::size_t i = 0; i < n; ++i) values[i] = p[i];
      break;
    case DType::f4:
      for (std::size_t i = 0; i < n; ++i) values[i] = load_le<float>(p + 4 * i);
      break;
    case DType::f8:
      for (std::size_t i = 0; i < n; ++i) values[i] = load_le<double>(p + 8 * i);
      break;
    case DType::i8:
      for (std::size_t i = 0; i < n; ++i) values[i] = static_cast<double>(load_le<std::int64_t>(p + 8 * i));
      break;
    default:
      break;
  }
  out.values = Tensor(out.shape, std::move(values));
  return out;
}

std::vector<std::uint8_t> write_npy(const NpyArray& array) {
  std::ostringstream dict;
  dict << "{'descr': '" << dtype_descr(array.dtype, array.item_size) << "', 'fortran_order': False, 'shape': (";
  for (std::size_t i = 0; i < array.shape.size(); ++i) dict << (i ? ", " : "") << array.shape[i];
  if (array.shape.size() == 1) dict << ',';
  dict << "), }";
  std::string header = dict.str();
  // Pad with spaces so magic + version + length + header is a multiple of 64,
  // newline-terminated, as numpy writes it.
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');

  const std::size_t n = array.count();
  std::vector<std::uint8_t> out;
  out.reserve(10 + header.size() + n * array.item_size);
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  out.push_back(1);
  out.push_back(0);
  out.push_back(static_cast<std::uint8_t>(header.size() & 0xFF));
  out.push_back(static_cast<std::uint8_t>(header.size() >> 8));
  out.insert(out.end(), header.begin(), header.end());

  auto put = [&out](const auto& v) {
    const auto* b = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), b, b + sizeof(v));
  };

  if (array.is_string()) {
    if (array.strings.size() != n) throw ContractError("write_npy: string count does not match shape");
    for (const auto& s : array.strings) {
      if (array.dtype == DType::unicode) {
        auto cps = utf8_codepoints(s);
        if (cps.size() * 4 > array.item_size) throw ContractError("write_npy: string wider than dtype");
        cps.resize(array.item_size / 4, 0);
        for (auto cp : cps) put(cp);
      } else {
        if (s.size() > array.item_size) throw ContractError("write_npy: string wider than dtype");
        out.insert(out.end(), s.begin(), s.end());
        out.insert(out.end(), array.item_size - s.size(), 0);
      }
    }
    return out;
  }

  if (array.values.size() != n) throw ContractError("write_npy: value count does not match shape");
  for (double v : array.values.values()) {
    switch (array.dtype) {
      case DType::u8: out.push_back(static_cast<std::uint8_t>(v)); break;
      case DType::b1: out.push_back(v != 0.0 ? 1 : 0); break;
      case DType::f4: put(static_cast<float>(v)); break;
      case DType::f8: put(v); break;
      case DType::i8: put(static_cast<std::int64_t>(v)); break;
      default: break;
    }
  }
  return out;
}

NpyArray make_f4_array(const Tensor& values) {
  return NpyArray{.dtype = DType::f4, .item_size = 4, .shape = values.shape(), .values = values, .strings = {}};
}

NpyArray make_f4_array(Shape shape, std::span<const float> values) {
  std::vector<double> data(values.begin(), values.end());
  Tensor t(shape, std::move(data));
  return NpyArray{.dtype = DType::f4, .item_size = 4, .shape = std::move(shape), .values = std::move(t), .strings = {}};
}

NpyArray make_string_array(const std::vector<std::string>& strings) {
  std::size_t width = 1;
  for (const auto& s : strings) width = std::max(width, utf8_codepoints(s).size());
  return NpyArray{.dtype = DType::unicode, .item_size = 4 * width, .shape = {strings.size()}, .values = {}, .strings = strings};
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path);
}

}  // namespace miml
