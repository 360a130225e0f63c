#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "sparsevox/common.hpp"
#include "sparsevox/volume.hpp"

namespace sparsevox {

// Minimal NIfTI-1 subset: single-file .nii and gzip .nii.gz, datatypes
// int16/uint8/float32. Coordinates are voxel-grid indices; the orientation
// matrix is neither read nor honored.

namespace nifti {

constexpr std::int16_t DT_UINT8 = 2;
constexpr std::int16_t DT_INT16 = 4;
constexpr std::int16_t DT_FLOAT32 = 16;

#pragma pack(push, 1)
struct Header {
  std::int32_t sizeof_hdr;      // must be 348
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code, sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4], srow_y[4], srow_z[4];
  char intent_name[16];
  char magic[4];  // "n+1\0" for single-file
};
#pragma pack(pop)
static_assert(sizeof(Header) == 348, "NIfTI-1 header must be 348 bytes");

// Byte-stream abstraction over plain and gzip files.
class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path) {
    gz_ = gzopen(path.c_str(), "rb");
    if (!gz_) throw DataError("cannot open NIfTI file: " + path);
  }
  ~Reader() {
    if (gz_) gzclose(gz_);
  }
  Reader(const Reader&) = delete;
  Reader& operator=(const Reader&) = delete;

  void read(void* dst, std::size_t n) {
    const int got = gzread(gz_, dst, static_cast<unsigned>(n));
    if (got < 0 || static_cast<std::size_t>(got) != n)
      throw DataError("truncated NIfTI file: " + path_);
  }

 private:
  std::string path_;
  gzFile gz_ = nullptr;
};

class Writer {
 public:
  Writer(const std::string& path, bool gzip) : path_(path), gzip_(gzip) {
    if (gzip_) {
      gz_ = gzopen(path.c_str(), "wb");
      if (!gz_) throw DataError("cannot write NIfTI file: " + path);
    } else {
      os_.open(path, std::ios::binary);
      if (!os_) throw DataError("cannot write NIfTI file: " + path);
    }
  }
  ~Writer() {
    if (gz_) gzclose(gz_);
  }
  Writer(const Writer&) = delete;
  Writer& operator=(const Writer&) = delete;

  void write(const void* src, std::size_t n) {
    if (gzip_) {
      if (gzwrite(gz_, src, static_cast<unsigned>(n)) !=
          static_cast<int>(n))
        throw DataError("short write on NIfTI file: " + path_);
    } else {
      os_.write(static_cast<const char*>(src),
                static_cast<std::streamsize>(n));
      if (!os_) throw DataError("short write on NIfTI file: " + path_);
    }
  }

 private:
  std::string path_;
  bool gzip_;
  gzFile gz_ = nullptr;
  std::ofstream os_;
};

inline bool is_gz(const std::string& path) {
  return std::filesystem::path(path).extension() == ".gz";
}

struct Raster {
  std::array<int, 3> dims;
  std::array<double, 3> spacing;
  std::vector<double> values;  // in file order (x-fastest)
};

inline Raster read_raster(const std::string& path) {
  Reader in(path);
  Header h{};
  in.read(&h, sizeof(h));
  if (h.sizeof_hdr != 348)
    throw DataError("NIfTI header field 'sizeof_hdr' is " +
                    std::to_string(h.sizeof_hdr) + ", expected 348: " + path);
  if (std::strncmp(h.magic, "n+1", 3) != 0)
    throw DataError("NIfTI header field 'magic' is not \"n+1\" (two-file or "
                    "non-NIfTI input): " + path);
  if (h.dim[0] < 3 || h.dim[0] > 4 || (h.dim[0] == 4 && h.dim[4] > 1))
    throw DataError("NIfTI header field 'dim[0]' must describe a 3D volume: " +
                    path);
  if (h.datatype != DT_UINT8 && h.datatype != DT_INT16 &&
      h.datatype != DT_FLOAT32)
    throw DataError("NIfTI header field 'datatype' unsupported (" +
                    std::to_string(h.datatype) +
                    "); expected uint8/int16/float32: " + path);

  Raster r;
  std::size_t n = 1;
  for (int a = 0; a < 3; ++a) {
    if (h.dim[a + 1] <= 0)
      throw DataError("NIfTI header field 'dim[" + std::to_string(a + 1) +
                      "]' must be positive: " + path);
    r.dims[a] = h.dim[a + 1];
    r.spacing[a] = h.pixdim[a + 1] > 0.0f ? h.pixdim[a + 1] : 1.0;
    n *= static_cast<std::size_t>(r.dims[a]);
  }

  // Skip from end of header to vox_offset (extensions, if any).
  const std::size_t offset =
      h.vox_offset >= 352.0f ? static_cast<std::size_t>(h.vox_offset) : 352;
  std::vector<char> skip(offset - sizeof(Header));
  if (!skip.empty()) in.read(skip.data(), skip.size());

  const double slope = (h.scl_slope != 0.0f) ? h.scl_slope : 1.0;
  const double inter = h.scl_inter;
  r.values.resize(n);
  if (h.datatype == DT_INT16) {
    std::vector<std::int16_t> buf(n);
    in.read(buf.data(), n * sizeof(std::int16_t));
    for (std::size_t i = 0; i < n; ++i) r.values[i] = slope * buf[i] + inter;
  } else if (h.datatype == DT_UINT8) {
    std::vector<std::uint8_t> buf(n);
    in.read(buf.data(), n);
    for (std::size_t i = 0; i < n; ++i) r.values[i] = slope * buf[i] + inter;
  } else {
    std::vector<float> buf(n);
    in.read(buf.data(), n * sizeof(float));
    for (std::size_t i = 0; i < n; ++i) r.values[i] = slope * buf[i] + inter;
  }
  return r;
}

template <typename T>
void write_raster(const std::string& path, const std::array<int, 3>& dims,
                  const std::array<double, 3>& spacing,
                  const std::vector<T>& data, std::int16_t datatype) {
  Header h{};
  h.sizeof_hdr = 348;
  h.dim[0] = 3;
  for (int a = 0; a < 3; ++a) {
    h.dim[a + 1] = static_cast<std::int16_t>(dims[a]);
    h.pixdim[a + 1] = static_cast<float>(spacing[a]);
  }
  for (int a = 4; a < 8; ++a) h.dim[a] = 1;
  h.datatype = datatype;
  h.bitpix = static_cast<std::int16_t>(sizeof(T) * 8);
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.scl_inter = 0.0f;
  std::memcpy(h.magic, "n+1", 4);

  Writer out(path, is_gz(path));
  out.write(&h, sizeof(h));
  const char pad[4] = {0, 0, 0, 0};  // empty extension field
  out.write(pad, 4);
  out.write(data.data(), data.size() * sizeof(T));
}

}  // namespace nifti

inline void save_nifti(const DenseVolume& v, const std::string& path) {
  v.validate();
  nifti::write_raster(path, v.dims, v.spacing, v.hu, nifti::DT_INT16);
  if (v.has_labels())
    nifti::write_raster(detail::seg_sibling(path), v.dims, v.spacing,
                        v.labels, nifti::DT_UINT8);
}

inline DenseVolume load_nifti(const std::string& path) {
  nifti::Raster img = nifti::read_raster(path);
  DenseVolume v;
  v.dims = img.dims;
  v.spacing = img.spacing;
  v.hu.resize(img.values.size());
  for (std::size_t i = 0; i < img.values.size(); ++i)
    v.hu[i] = clamp_hu(img.values[i]);

  const std::string seg = detail::seg_sibling(path);
  if (std::filesystem::exists(seg)) {
    nifti::Raster lab = nifti::read_raster(seg);
    if (lab.dims != img.dims)
      throw DataError("label dims do not match image dims: " + seg);
    v.labels.resize(lab.values.size());
    for (std::size_t i = 0; i < lab.values.size(); ++i)
      v.labels[i] = static_cast<std::uint8_t>(lab.values[i]);
  }
  v.validate();
  return v;
}

inline DenseVolume load_volume(const std::string& path, VolumeFormat fmt) {
  if (!std::filesystem::exists(path))
    throw DataError("volume file does not exist: " + path);
  return fmt == VolumeFormat::raw ? load_raw(path) : load_nifti(path);
}

inline void save_volume(const DenseVolume& v, const std::string& path,
                        VolumeFormat fmt) {
  if (fmt == VolumeFormat::raw)
    save_raw(v, path);
  else
    save_nifti(v, path);
}

// Guess format from extension; .nii/.nii.gz is NIfTI, anything else raw.
inline VolumeFormat format_for(const std::string& path) {
  std::filesystem::path p(path);
  if (p.extension() == ".gz") p.replace_extension();
  return p.extension() == ".nii" ? VolumeFormat::nifti : VolumeFormat::raw;
}

}  // namespace sparsevox
