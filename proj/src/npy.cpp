#include "ndcrf/npy.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

namespace ndcrf {

namespace {

constexpr char kMagic[6] = {'\x93', 'N', 'U', 'M', 'P', 'Y'};

struct NpyArray {
  std::string descr;
  std::vector<std::int64_t> shape;
  std::vector<char> payload;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

// Pulls the value following 'key': out of a literal python dict header.
std::string dict_value(const std::string& header, const std::string& key) {
  const std::string quoted = "'" + key + "'";
  auto pos = header.find(quoted);
  if (pos == std::string::npos)
    throw NpyHeaderError("npy header missing key '" + key + "'");
  pos = header.find(':', pos + quoted.size());
  if (pos == std::string::npos)
    throw NpyHeaderError("npy header missing ':' after '" + key + "'");
  ++pos;
  // Value ends at the next top-level ',' or '}'.
  int depth = 0;
  std::string value;
  for (; pos < header.size(); ++pos) {
    const char ch = header[pos];
    if (ch == '(' || ch == '[') ++depth;
    if (ch == ')' || ch == ']') --depth;
    if (depth == 0 && (ch == ',' || ch == '}')) break;
    value += ch;
  }
  return trim(value);
}

NpyArray read_npy(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open file for reading: " + path.string());

  char magic[6];
  f.read(magic, 6);
  if (!f || std::memcmp(magic, kMagic, 6) != 0)
    throw NpyHeaderError("not an npy file (bad magic): " + path.string());

  unsigned char version[2];
  f.read(reinterpret_cast<char*>(version), 2);
  if (!f || version[0] != 1 || version[1] != 0)
    throw NpyHeaderError("unsupported npy version (only 1.0 is accepted)");

  unsigned char len_bytes[2];
  f.read(reinterpret_cast<char*>(len_bytes), 2);
  if (!f) throw NpyHeaderError("truncated npy header length");
  const std::size_t header_len = len_bytes[0] | (len_bytes[1] << 8);

  std::string header(header_len, '\0');
  f.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!f) throw NpyHeaderError("truncated npy header");

  NpyArray arr;
  arr.descr = dict_value(header, "descr");
  if (arr.descr.size() >= 2 && arr.descr.front() == '\'' && arr.descr.back() == '\'')
    arr.descr = arr.descr.substr(1, arr.descr.size() - 2);

  const std::string order = dict_value(header, "fortran_order");
  if (order != "False")
    throw NpyDtypeError("fortran_order arrays are not supported");

  std::string shape = dict_value(header, "shape");
  if (shape.size() < 2 || shape.front() != '(' || shape.back() != ')')
    throw NpyHeaderError("malformed shape tuple in npy header");
  shape = shape.substr(1, shape.size() - 2);
  std::stringstream ss(shape);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    std::size_t used = 0;
    const long long v = std::stoll(item, &used);
    if (used != item.size() || v < 0)
      throw NpyHeaderError("malformed shape entry in npy header");
    arr.shape.push_back(v);
  }

  std::size_t itemsize;
  if (arr.descr == "<f4")
    itemsize = 4;
  else if (arr.descr == "|u1" || arr.descr == "<u1" || arr.descr == "u1")
    itemsize = 1;
  else
    throw NpyDtypeError("unsupported npy dtype '" + arr.descr +
                        "' (need little-endian float32 or uint8)");

  std::size_t count = 1;
  for (std::int64_t s : arr.shape) count *= static_cast<std::size_t>(s);
  arr.payload.resize(count * itemsize);
  f.read(arr.payload.data(), static_cast<std::streamsize>(arr.payload.size()));
  if (static_cast<std::size_t>(f.gcount()) != arr.payload.size())
    throw NpyTruncatedError("npy payload shorter than header shape implies");
  return arr;
}

void write_npy(const std::filesystem::path& path, const std::string& descr,
               const std::vector<std::int64_t>& shape, const char* bytes,
               std::size_t nbytes) {
  std::string dict = "{'descr': '" + descr + "', 'fortran_order': False, 'shape': (";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    dict += std::to_string(shape[i]);
    if (shape.size() == 1 || i + 1 < shape.size()) dict += ",";
    if (i + 1 < shape.size()) dict += " ";
  }
  dict += "), }";
  // Total of magic(6) + version(2) + hlen(2) + dict + '\n' padded to 64.
  const std::size_t unpadded = 10 + dict.size() + 1;
  const std::size_t padded = (unpadded + 63) / 64 * 64;
  dict.append(padded - unpadded, ' ');
  dict += '\n';

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open file for writing: " + path.string());
  f.write(kMagic, 6);
  const unsigned char version[2] = {1, 0};
  f.write(reinterpret_cast<const char*>(version), 2);
  const std::size_t hlen = dict.size();
  const unsigned char len_bytes[2] = {static_cast<unsigned char>(hlen & 0xff),
                                      static_cast<unsigned char>(hlen >> 8)};
  f.write(reinterpret_cast<const char*>(len_bytes), 2);
  f.write(dict.data(), static_cast<std::streamsize>(dict.size()));
  f.write(bytes, static_cast<std::streamsize>(nbytes));
  if (!f) throw IoError("write failed: " + path.string());
}

}  // namespace

Tensor read_tensor(const std::filesystem::path& path) {
  NpyArray arr = read_npy(path);
  if (arr.descr != "<f4")
    throw NpyDtypeError("tensor file must be little-endian float32");
  if (arr.shape.size() < 2)
    throw ShapeError("tensor file needs >= 2 axes (spatial..., channels)");
  std::vector<std::int64_t> extents(arr.shape.begin(), arr.shape.end() - 1);
  const std::int64_t channels = arr.shape.back();
  std::vector<float> data(arr.payload.size() / 4);
  std::memcpy(data.data(), arr.payload.data(), arr.payload.size());
  return Tensor(std::move(extents), static_cast<int>(channels), std::move(data));
}

void write_tensor(const Tensor& t, const std::filesystem::path& path) {
  std::vector<std::int64_t> shape = t.extents();
  shape.push_back(t.channels());
  write_npy(path, "<f4", shape, reinterpret_cast<const char*>(t.data()),
            static_cast<std::size_t>(t.size()) * 4);
}

LabelMap read_labels(const std::filesystem::path& path) {
  NpyArray arr = read_npy(path);
  if (!(arr.descr == "|u1" || arr.descr == "<u1" || arr.descr == "u1"))
    throw NpyDtypeError("label file must be uint8");
  if (arr.shape.empty())
    throw ShapeError("label file needs >= 1 axis");
  std::vector<std::uint8_t> labels(arr.payload.size());
  std::memcpy(labels.data(), arr.payload.data(), arr.payload.size());
  return LabelMap(arr.shape, std::move(labels));
}

void write_labels(const LabelMap& l, const std::filesystem::path& path) {
  write_npy(path, "|u1", l.extents,
            reinterpret_cast<const char*>(l.labels.data()), l.labels.size());
}

}  // namespace ndcrf
