#include "prognet/npyio.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace prognet {

namespace {

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  is.seekg(0, std::ios::end);
  const auto size = is.tellg();
  is.seekg(0);
  std::vector<uint8_t> buf(static_cast<size_t>(size));
  is.read(reinterpret_cast<char*>(buf.data()), size);
  if (!is) throw std::runtime_error("read failed: " + path);
  return buf;
}

uint16_t u16(const uint8_t* p) { return static_cast<uint16_t>(p[0] | p[1] << 8); }
uint32_t u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
         static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}

std::vector<uint8_t> inflate_raw(const uint8_t* src, size_t src_len, size_t dst_len) {
  std::vector<uint8_t> out(dst_len);
  z_stream zs{};
  if (inflateInit2(&zs, -MAX_WBITS) != Z_OK) throw std::runtime_error("zlib init failed");
  zs.next_in = const_cast<Bytef*>(src);
  zs.avail_in = static_cast<uInt>(src_len);
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(dst_len);
  const int rc = inflate(&zs, Z_FINISH);
  inflateEnd(&zs);
  if (rc != Z_STREAM_END) throw std::runtime_error("zlib inflate failed");
  return out;
}

std::vector<ImageU8> parse_npy(const std::vector<uint8_t>& buf, const std::string& what) {
  if (buf.size() < 10 || std::memcmp(buf.data(), "\x93NUMPY", 6) != 0)
    throw std::runtime_error(what + ": not an npy array");
  const int major = buf[6];
  size_t header_len, header_off;
  if (major == 1) {
    header_len = u16(buf.data() + 8);
    header_off = 10;
  } else {
    header_len = u32(buf.data() + 8);
    header_off = 12;
  }
  const std::string header(reinterpret_cast<const char*>(buf.data() + header_off), header_len);
  if (header.find("'|u1'") == std::string::npos && header.find("'<u1'") == std::string::npos &&
      header.find("'uint8'") == std::string::npos)
    throw std::runtime_error(what + ": expected a uint8 array, header: " + header);
  if (header.find("'fortran_order': True") != std::string::npos)
    throw std::runtime_error(what + ": fortran-ordered arrays are not supported");
  const auto sp = header.find("'shape':");
  const auto lp = header.find('(', sp), rp = header.find(')', sp);
  if (sp == std::string::npos || lp == std::string::npos || rp == std::string::npos)
    throw std::runtime_error(what + ": malformed npy header");
  std::vector<long> shape;
  std::string dims = header.substr(lp + 1, rp - lp - 1);
  size_t pos = 0;
  while (pos < dims.size()) {
    size_t end = dims.find(',', pos);
    if (end == std::string::npos) end = dims.size();
    const std::string tok = dims.substr(pos, end - pos);
    if (tok.find_first_of("0123456789") != std::string::npos) shape.push_back(std::stol(tok));
    pos = end + 1;
  }
  if (shape.size() == 4 && shape[3] == 1) shape.pop_back();
  if (shape.size() != 3)
    throw std::runtime_error(what + ": expected shape (N,H,W), header: " + header);
  const size_t n = static_cast<size_t>(shape[0]), h = static_cast<size_t>(shape[1]),
               w = static_cast<size_t>(shape[2]);
  const size_t data_off = header_off + header_len;
  if (buf.size() < data_off + n * h * w) throw std::runtime_error(what + ": truncated npy data");
  std::vector<ImageU8> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    ImageU8 img{static_cast<int>(h), static_cast<int>(w), std::vector<uint8_t>(h * w)};
    std::memcpy(img.px.data(), buf.data() + data_off + i * h * w, h * w);
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace

std::vector<ImageU8> read_npy_images(const std::string& path) {
  return parse_npy(read_file(path), path);
}

std::vector<ImageU8> read_npz_images(const std::string& path, const std::string& member) {
  const auto buf = read_file(path);
  // locate the end-of-central-directory record
  if (buf.size() < 22) throw std::runtime_error(path + ": not a zip archive");
  size_t eocd = std::string::npos;
  const size_t scan_from = buf.size() >= 66000 ? buf.size() - 66000 : 0;
  for (size_t i = buf.size() - 22; i + 1 > scan_from; --i) {
    if (u32(buf.data() + i) == 0x06054b50) {
      eocd = i;
      break;
    }
  }
  if (eocd == std::string::npos) throw std::runtime_error(path + ": zip directory not found");
  const uint16_t n_entries = u16(buf.data() + eocd + 10);
  size_t cd = u32(buf.data() + eocd + 16);

  for (uint16_t e = 0; e < n_entries; ++e) {
    if (cd + 46 > buf.size() || u32(buf.data() + cd) != 0x02014b50)
      throw std::runtime_error(path + ": bad zip central directory");
    const uint16_t method = u16(buf.data() + cd + 10);
    const uint32_t csize = u32(buf.data() + cd + 20);
    const uint32_t usize = u32(buf.data() + cd + 24);
    const uint16_t name_len = u16(buf.data() + cd + 28);
    const uint16_t extra_len = u16(buf.data() + cd + 30);
    const uint16_t comment_len = u16(buf.data() + cd + 32);
    const uint32_t local_off = u32(buf.data() + cd + 42);
    const std::string name(reinterpret_cast<const char*>(buf.data() + cd + 46), name_len);
    cd += 46u + name_len + extra_len + comment_len;

    const bool wanted = member.empty() ? name.size() > 4 && name.substr(name.size() - 4) == ".npy"
                                       : (name == member || name == member + ".npy");
    if (!wanted) continue;

    if (local_off + 30 > buf.size() || u32(buf.data() + local_off) != 0x04034b50)
      throw std::runtime_error(path + ": bad zip local header for " + name);
    const uint16_t lname = u16(buf.data() + local_off + 26);
    const uint16_t lextra = u16(buf.data() + local_off + 28);
    const size_t data_off = local_off + 30u + lname + lextra;
    if (data_off + csize > buf.size()) throw std::runtime_error(path + ": truncated zip member");
    if (method == 0) {
      std::vector<uint8_t> raw(buf.begin() + static_cast<std::ptrdiff_t>(data_off),
                               buf.begin() + static_cast<std::ptrdiff_t>(data_off + csize));
      return parse_npy(raw, path + ":" + name);
    }
    if (method == 8) {
      return parse_npy(inflate_raw(buf.data() + data_off, csize, usize), path + ":" + name);
    }
    throw std::runtime_error(path + ": unsupported zip compression method " +
                             std::to_string(method));
  }
  throw std::runtime_error(path + ": no matching npy member" +
                           (member.empty() ? "" : " '" + member + "'"));
}

}  // namespace prognet
