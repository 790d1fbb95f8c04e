#include "m3b/png_io.hpp"

#include <zlib.h>

#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>

namespace m3b {

namespace {

const unsigned char kSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};

void put_u32(std::string& out, uint32_t v) {
  out.push_back(char((v >> 24) & 0xff));
  out.push_back(char((v >> 16) & 0xff));
  out.push_back(char((v >> 8) & 0xff));
  out.push_back(char(v & 0xff));
}

uint32_t get_u32(const unsigned char* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) |
         (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void write_chunk(std::string& out, const char type[4], const std::string& data) {
  put_u32(out, uint32_t(data.size()));
  const size_t start = out.size();
  out.append(type, 4);
  out.append(data);
  uint32_t crc = crc32(0, reinterpret_cast<const Bytef*>(out.data() + start),
                       uInt(out.size() - start));
  put_u32(out, crc);
}

uint8_t paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return uint8_t(a);
  if (pb <= pc) return uint8_t(b);
  return uint8_t(c);
}

std::string read_file(const std::string& path) {
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> f(
      std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!f) throw std::runtime_error("png: cannot open " + path);
  std::fseek(f.get(), 0, SEEK_END);
  const long n = std::ftell(f.get());
  std::fseek(f.get(), 0, SEEK_SET);
  std::string buf(size_t(n), '\0');
  if (std::fread(buf.data(), 1, size_t(n), f.get()) != size_t(n))
    throw std::runtime_error("png: short read on " + path);
  return buf;
}

void write_file(const std::string& path, const std::string& data) {
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> f(
      std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!f) throw std::runtime_error("png: cannot open " + path + " for write");
  if (std::fwrite(data.data(), 1, data.size(), f.get()) != data.size())
    throw std::runtime_error("png: short write on " + path);
}

}  // namespace

void png_write(const std::string& path, const GrayImage& img) {
  if (img.h < 1 || img.w < 1) throw std::invalid_argument("png_write: empty image");
  std::string out(reinterpret_cast<const char*>(kSig), 8);

  std::string ihdr;
  put_u32(ihdr, uint32_t(img.w));
  put_u32(ihdr, uint32_t(img.h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(0);   // grayscale
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter method
  ihdr.push_back(0);   // no interlace
  write_chunk(out, "IHDR", ihdr);

  std::string raw;
  raw.reserve(size_t(img.h) * (size_t(img.w) + 1));
  for (int r = 0; r < img.h; ++r) {
    raw.push_back(0);  // filter: none
    raw.append(reinterpret_cast<const char*>(img.px.data() + size_t(r) * img.w),
               size_t(img.w));
  }
  uLongf bound = compressBound(uLong(raw.size()));
  std::string idat(size_t(bound), '\0');
  if (compress2(reinterpret_cast<Bytef*>(idat.data()), &bound,
                reinterpret_cast<const Bytef*>(raw.data()), uLong(raw.size()),
                6) != Z_OK)
    throw std::runtime_error("png_write: deflate failed");
  idat.resize(size_t(bound));
  write_chunk(out, "IDAT", idat);
  write_chunk(out, "IEND", {});
  write_file(path, out);
}

GrayImage png_read(const std::string& path) {
  const std::string buf = read_file(path);
  if (buf.size() < 8 || std::memcmp(buf.data(), kSig, 8) != 0)
    throw std::runtime_error("png: malformed stream (bad signature)");

  size_t pos = 8;
  int w = 0, h = 0;
  bool have_ihdr = false, have_iend = false;
  std::string idat;
  while (pos + 8 <= buf.size()) {
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
    const uint32_t len = get_u32(p);
    if (pos + 12 + len > buf.size())
      throw std::runtime_error("png: malformed stream (truncated chunk)");
    const std::string type = buf.substr(pos + 4, 4);
    const uint32_t want_crc = get_u32(
        reinterpret_cast<const unsigned char*>(buf.data() + pos + 8 + len));
    const uint32_t got_crc =
        crc32(0, reinterpret_cast<const Bytef*>(buf.data() + pos + 4), len + 4);
    if (want_crc != got_crc)
      throw std::runtime_error("png: malformed stream (bad CRC in " + type + ")");
    const char* data = buf.data() + pos + 8;

    if (type == "IHDR") {
      if (len != 13) throw std::runtime_error("png: malformed IHDR");
      const auto* d = reinterpret_cast<const unsigned char*>(data);
      w = int(get_u32(d));
      h = int(get_u32(d + 4));
      const int bits = d[8], color = d[9], interlace = d[12];
      if (color != 0) throw std::runtime_error("png: grayscale required");
      if (bits != 8) throw std::runtime_error("png: unsupported bit depth");
      if (interlace != 0) throw std::runtime_error("png: interlace unsupported");
      have_ihdr = true;
    } else if (type == "IDAT") {
      idat.append(data, len);
    } else if (type == "IEND") {
      have_iend = true;
      break;
    }
    pos += 12 + len;
  }
  if (!have_ihdr || !have_iend || w < 1 || h < 1)
    throw std::runtime_error("png: malformed stream (missing chunks)");

  const size_t stride = size_t(w) + 1;
  std::string raw(stride * size_t(h), '\0');
  uLongf raw_len = uLongf(raw.size());
  if (uncompress(reinterpret_cast<Bytef*>(raw.data()), &raw_len,
                 reinterpret_cast<const Bytef*>(idat.data()),
                 uLong(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw std::runtime_error("png: malformed stream (inflate failed)");

  GrayImage img(h, w);
  std::vector<uint8_t> prev(size_t(w), 0);
  for (int r = 0; r < h; ++r) {
    const auto* line = reinterpret_cast<const unsigned char*>(raw.data()) +
                       size_t(r) * stride;
    const uint8_t filter = line[0];
    uint8_t* cur = img.px.data() + size_t(r) * w;
    for (int c = 0; c < w; ++c) {
      const int x = line[1 + c];
      const int a = c > 0 ? cur[c - 1] : 0;
      const int b = prev[size_t(c)];
      const int cc = c > 0 ? prev[size_t(c) - 1] : 0;
      switch (filter) {
        case 0: cur[c] = uint8_t(x); break;
        case 1: cur[c] = uint8_t(x + a); break;
        case 2: cur[c] = uint8_t(x + b); break;
        case 3: cur[c] = uint8_t(x + (a + b) / 2); break;
        case 4: cur[c] = uint8_t(x + paeth(a, b, cc)); break;
        default:
          throw std::runtime_error("png: malformed stream (bad filter type)");
      }
    }
    std::memcpy(prev.data(), cur, size_t(w));
  }
  return img;
}

}  // namespace m3b
