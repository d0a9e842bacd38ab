#include "repscope/npy.hpp"

#include <bit>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "repscope/error.hpp"

static_assert(std::endian::native == std::endian::little, "NPY I/O assumes a little-endian host");

namespace repscope {

namespace {

constexpr char kMagic[] = "\x93NUMPY";
constexpr std::size_t kMagicLen = 6;
constexpr std::size_t kAlign = 64;

std::string_view descr_of(NpyDtype d) { return d == NpyDtype::f32 ? "<f4" : "<f8"; }
std::size_t item_size(NpyDtype d) { return d == NpyDtype::f32 ? 4 : 8; }

void skip_ws(std::string_view s, std::size_t& i) {
  while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
}

// Locates `'key':` in the header dict and returns the index just after the colon.
std::size_t find_key(std::string_view dict, std::string_view key) {
  for (char quote : {'\'', '"'}) {
    std::string needle;
    needle += quote;
    needle += key;
    needle += quote;
    auto pos = dict.find(needle);
    if (pos == std::string_view::npos) continue;
    std::size_t i = pos + needle.size();
    skip_ws(dict, i);
    if (i < dict.size() && dict[i] == ':') return i + 1;
  }
  throw DataError("npy header: missing key '" + std::string(key) + "'");
}

}  // namespace

std::string npy_header(const Shape& shape, NpyDtype dtype) {
  std::ostringstream dict;
  dict << "{'descr': '" << descr_of(dtype) << "', 'fortran_order': False, 'shape': (";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) dict << ", ";
    dict << shape[i];
  }
  if (shape.size() == 1) dict << ',';
  dict << "), }";
  std::string body = dict.str();
  const std::size_t preamble = kMagicLen + 2 + 2;
  const std::size_t unpadded = preamble + body.size() + 1;
  const std::size_t total = (unpadded + kAlign - 1) / kAlign * kAlign;
  body.append(total - unpadded, ' ');
  body.push_back('\n');
  if (body.size() > 0xFFFF) throw InvalidArgument("npy header too long for format 1.0");

  std::string out(kMagic, kMagicLen);
  out.push_back('\x01');
  out.push_back('\x00');
  const auto len = static_cast<std::uint16_t>(body.size());
  out.push_back(static_cast<char>(len & 0xFF));
  out.push_back(static_cast<char>(len >> 8));
  out += body;
  return out;
}

NpyHeader parse_npy_header(std::string_view bytes) {
  if (bytes.size() < kMagicLen + 4 || bytes.substr(0, kMagicLen) != std::string_view(kMagic, kMagicLen)) {
    throw DataError("npy: bad magic bytes");
  }
  const auto major = static_cast<unsigned char>(bytes[6]);
  std::size_t header_len = 0;
  std::size_t preamble = 0;
  if (major == 1) {
    header_len = static_cast<unsigned char>(bytes[8]) | (static_cast<std::size_t>(static_cast<unsigned char>(bytes[9])) << 8);
    preamble = 10;
  } else if (major == 2 || major == 3) {
    if (bytes.size() < 12) throw DataError("npy: truncated header");
    for (int b = 0; b < 4; ++b) {
      header_len |= static_cast<std::size_t>(static_cast<unsigned char>(bytes[8 + b])) << (8 * b);
    }
    preamble = 12;
  } else {
    throw DataError("npy: unsupported format version " + std::to_string(major));
  }
  if (bytes.size() < preamble + header_len) throw DataError("npy: truncated header");
  const std::string_view dict = bytes.substr(preamble, header_len);

  NpyHeader h;
  h.data_offset = preamble + header_len;

  {
    std::size_t i = find_key(dict, "descr");
    skip_ws(dict, i);
    if (i >= dict.size() || (dict[i] != '\'' && dict[i] != '"')) throw DataError("npy header: malformed descr");
    const char q = dict[i];
    const auto end = dict.find(q, i + 1);
    if (end == std::string_view::npos) throw DataError("npy header: malformed descr");
    const std::string_view descr = dict.substr(i + 1, end - i - 1);
    if (descr == "<f4") {
      h.dtype = NpyDtype::f32;
    } else if (descr == "<f8") {
      h.dtype = NpyDtype::f64;
    } else {
      throw DataError("npy: unsupported dtype '" + std::string(descr) +
                      "' (only little-endian float32/float64 are accepted)");
    }
  }
  {
    std::size_t i = find_key(dict, "fortran_order");
    skip_ws(dict, i);
    if (dict.substr(i, 5) == "False") {
    } else if (dict.substr(i, 4) == "True") {
      throw DataError("npy: fortran_order arrays are not supported");
    } else {
      throw DataError("npy header: malformed fortran_order");
    }
  }
  {
    std::size_t i = find_key(dict, "shape");
    skip_ws(dict, i);
    if (i >= dict.size() || dict[i] != '(') throw DataError("npy header: malformed shape");
    ++i;
    for (;;) {
      skip_ws(dict, i);
      if (i >= dict.size()) throw DataError("npy header: unterminated shape");
      if (dict[i] == ')') break;
      std::size_t v = 0;
      bool any = false;
      while (i < dict.size() && std::isdigit(static_cast<unsigned char>(dict[i]))) {
        v = v * 10 + static_cast<std::size_t>(dict[i] - '0');
        ++i;
        any = true;
      }
      if (!any) throw DataError("npy header: malformed shape");
      h.shape.push_back(v);
      skip_ws(dict, i);
      if (i < dict.size() && dict[i] == ',') ++i;
    }
  }
  if (h.shape.empty()) throw DataError("npy: scalar arrays are not supported");
  for (auto d : h.shape) {
    if (d == 0) throw DataError("npy: zero-sized dimension in shape " + shape_to_string(h.shape));
  }
  return h;
}

std::string encode_npy(const Tensor& t, NpyDtype dtype) {
  std::string out = npy_header(t.shape(), dtype);
  const std::size_t header = out.size();
  out.resize(header + t.size() * item_size(dtype));
  char* dst = out.data() + header;
  if (dtype == NpyDtype::f32) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const float f = static_cast<float>(t[i]);
      std::memcpy(dst + 4 * i, &f, 4);
    }
  } else {
    std::memcpy(dst, t.data().data(), t.size() * 8);
  }
  return out;
}

Tensor decode_npy(std::string_view bytes) {
  const NpyHeader h = parse_npy_header(bytes);
  const std::size_t n = shape_volume(h.shape);
  const std::size_t need = h.data_offset + n * item_size(h.dtype);
  if (bytes.size() != need) {
    throw DataError("npy: payload size " + std::to_string(bytes.size() - std::min(bytes.size(), h.data_offset)) +
                    " bytes does not match shape " + shape_to_string(h.shape));
  }
  std::vector<double> data(n);
  const char* src = bytes.data() + h.data_offset;
  if (h.dtype == NpyDtype::f32) {
    for (std::size_t i = 0; i < n; ++i) {
      float f;
      std::memcpy(&f, src + 4 * i, 4);
      data[i] = f;
    }
  } else {
    std::memcpy(data.data(), src, n * 8);
  }
  return Tensor(h.shape, std::move(data));
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failure on '" + path.string() + "'");
  return ss.str();
}

void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failure on '" + path.string() + "'");
}

void write_npy(const std::filesystem::path& path, const Tensor& t, NpyDtype dtype) {
  write_file_bytes(path, encode_npy(t, dtype));
}

Tensor read_npy(const std::filesystem::path& path) {
  try {
    return decode_npy(read_file_bytes(path));
  } catch (const IoError&) {
    throw;
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace repscope
