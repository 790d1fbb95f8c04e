#include "m3b/nifti.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>

namespace m3b {

namespace {

constexpr int kHeaderSize = 348;
constexpr int kDataOffset = 352;  // header + 4-byte extension flag

constexpr int16_t kDtUint8 = 2;
constexpr int16_t kDtInt16 = 4;
constexpr int16_t kDtFloat32 = 16;

template <typename T>
T read_le(const unsigned char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;  // build targets are little-endian
}

template <typename T>
void write_le(unsigned char* p, T v) {
  std::memcpy(p, &v, sizeof(T));
}

using FilePtr = std::unique_ptr<std::FILE, int (*)(std::FILE*)>;

FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode), &std::fclose);
  if (!f) throw std::runtime_error("nifti: cannot open " + path);
  return f;
}

void fill_header(unsigned char* hdr, int16_t datatype, int16_t bitpix,
                 const Volume& shape_src) {
  std::memset(hdr, 0, kHeaderSize);
  write_le<int32_t>(hdr + 0, kHeaderSize);  // sizeof_hdr
  // dim[0..3]
  write_le<int16_t>(hdr + 40, 3);
  write_le<int16_t>(hdr + 42, int16_t(shape_src.w));
  write_le<int16_t>(hdr + 44, int16_t(shape_src.h));
  write_le<int16_t>(hdr + 46, int16_t(shape_src.d));
  for (int i = 4; i <= 7; ++i) write_le<int16_t>(hdr + 40 + 2 * i, 1);
  write_le<int16_t>(hdr + 70, datatype);
  write_le<int16_t>(hdr + 72, bitpix);
  write_le<float>(hdr + 76, 1.f);  // pixdim[0]
  write_le<float>(hdr + 80, float(shape_src.sx));
  write_le<float>(hdr + 84, float(shape_src.sy));
  write_le<float>(hdr + 88, float(shape_src.sz));
  write_le<float>(hdr + 108, float(kDataOffset));  // vox_offset
  write_le<float>(hdr + 112, 1.f);                 // scl_slope
  std::memcpy(hdr + 344, "n+1\0", 4);
}

}  // namespace

NiftiData read_nifti(const std::string& path) {
  FilePtr f = open_file(path, "rb");
  unsigned char hdr[kHeaderSize];
  if (std::fread(hdr, 1, kHeaderSize, f.get()) != size_t(kHeaderSize))
    throw std::runtime_error("nifti: truncated header in " + path);

  const char* magic = reinterpret_cast<const char*>(hdr + 344);
  const bool plus = std::memcmp(magic, "n+1", 4) == 0;
  const bool pair = std::memcmp(magic, "ni1", 4) == 0;
  if (!plus && !pair)
    throw std::runtime_error("nifti: not NIfTI-1 (bad magic) in " + path);

  const int16_t ndim = read_le<int16_t>(hdr + 40);
  if (ndim < 1 || ndim > 7)
    throw std::runtime_error("nifti: unsupported (byte-swapped?) header in " +
                             path);
  int dims[8] = {1, 1, 1, 1, 1, 1, 1, 1};
  for (int i = 1; i <= ndim; ++i)
    dims[i] = read_le<int16_t>(hdr + 40 + 2 * i);
  for (int i = 4; i <= ndim; ++i)
    if (dims[i] > 1)
      throw std::runtime_error("nifti: >3-D volumes unsupported in " + path);
  const int w = dims[1], h = dims[2], d = std::max(dims[3], 1);
  if (w < 1 || h < 1)
    throw std::runtime_error("nifti: bad dims in " + path);

  const int16_t datatype = read_le<int16_t>(hdr + 70);
  if (datatype != kDtUint8 && datatype != kDtInt16 && datatype != kDtFloat32)
    throw std::runtime_error("nifti: unsupported datatype " +
                             std::to_string(datatype) + " in " + path);

  NiftiData out;
  out.volume = Volume(d, h, w);
  const float px = read_le<float>(hdr + 80);
  const float py = read_le<float>(hdr + 84);
  const float pz = read_le<float>(hdr + 88);
  if (px <= 0 || py <= 0 || pz <= 0)
    throw std::runtime_error("nifti: non-positive pixdim in " + path);
  out.volume.sx = px;
  out.volume.sy = py;
  out.volume.sz = pz;

  // "ni1" pairs keep voxels in a sibling .img file
  FilePtr img_file(nullptr, &std::fclose);
  std::FILE* data_f = f.get();
  long offset = long(read_le<float>(hdr + 108));
  if (pair) {
    std::string img_path = path;
    const size_t dot = img_path.rfind('.');
    img_path = (dot == std::string::npos ? img_path : img_path.substr(0, dot)) +
               ".img";
    img_file = open_file(img_path, "rb");
    data_f = img_file.get();
    offset = 0;
  } else if (offset < kHeaderSize) {
    offset = kDataOffset;
  }
  if (std::fseek(data_f, offset, SEEK_SET) != 0)
    throw std::runtime_error("nifti: truncated payload in " + path);

  const size_t n = size_t(d) * h * w;
  auto read_payload = [&](void* dst, size_t elem) {
    if (std::fread(dst, elem, n, data_f) != n)
      throw std::runtime_error("nifti: truncated payload in " + path);
  };

  if (datatype == kDtInt16) {
    read_payload(out.volume.voxels.data(), 2);
  } else if (datatype == kDtFloat32) {
    std::vector<float> tmp(n);
    read_payload(tmp.data(), 4);
    for (size_t i = 0; i < n; ++i) {
      const double v = std::lround(double(tmp[i]));
      out.volume.voxels[i] = int16_t(std::clamp(v, -32768.0, 32767.0));
    }
  } else {
    std::vector<uint8_t> tmp(n);
    read_payload(tmp.data(), 1);
    for (size_t i = 0; i < n; ++i) out.volume.voxels[i] = tmp[i];
    std::vector<MaskImage> masks;
    masks.reserve(size_t(d));
    for (int z = 0; z < d; ++z) {
      MaskImage m(h, w);
      for (size_t i = 0; i < size_t(h) * w; ++i)
        m.px[i] = tmp[size_t(z) * h * w + i] ? 1 : 0;
      masks.push_back(std::move(m));
    }
    out.masks = std::move(masks);
  }
  return out;
}

void write_nifti(const std::string& path, const Volume& vol) {
  unsigned char hdr[kHeaderSize];
  fill_header(hdr, kDtInt16, 16, vol);
  FilePtr f = open_file(path, "wb");
  const char pad[4] = {0, 0, 0, 0};
  if (std::fwrite(hdr, 1, kHeaderSize, f.get()) != size_t(kHeaderSize) ||
      std::fwrite(pad, 1, 4, f.get()) != 4 ||
      std::fwrite(vol.voxels.data(), 2, vol.voxels.size(), f.get()) !=
          vol.voxels.size())
    throw std::runtime_error("nifti: short write on " + path);
}

void write_nifti_mask(const std::string& path,
                      const std::vector<MaskImage>& masks, double sz,
                      double sy, double sx) {
  if (masks.empty()) throw std::invalid_argument("write_nifti_mask: empty stack");
  Volume shape(int(masks.size()), masks[0].h, masks[0].w);
  shape.sz = sz;
  shape.sy = sy;
  shape.sx = sx;
  unsigned char hdr[kHeaderSize];
  fill_header(hdr, kDtUint8, 8, shape);
  FilePtr f = open_file(path, "wb");
  const char pad[4] = {0, 0, 0, 0};
  if (std::fwrite(hdr, 1, kHeaderSize, f.get()) != size_t(kHeaderSize) ||
      std::fwrite(pad, 1, 4, f.get()) != 4)
    throw std::runtime_error("nifti: short write on " + path);
  for (const MaskImage& m : masks) {
    if (m.h != shape.h || m.w != shape.w)
      throw std::invalid_argument("write_nifti_mask: inconsistent slice dims");
    if (std::fwrite(m.px.data(), 1, m.px.size(), f.get()) != m.px.size())
      throw std::runtime_error("nifti: short write on " + path);
  }
}

}  // namespace m3b
