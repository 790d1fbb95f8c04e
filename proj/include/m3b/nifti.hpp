#pragma once

#include <optional>
#include <string>
#include <vector>

#include "m3b/image.hpp"

namespace m3b {

struct NiftiData {
  Volume volume;
  // populated when the payload is uint8 (label volumes); nonzero -> 1
  std::optional<std::vector<MaskImage>> masks;
};

// Uncompressed little-endian NIfTI-1, datatypes int16/uint8/float32. Float
// voxels are rounded to int16 HU.
NiftiData read_nifti(const std::string& path);

void write_nifti(const std::string& path, const Volume& vol);
void write_nifti_mask(const std::string& path,
                      const std::vector<MaskImage>& masks, double sz,
                      double sy, double sx);

}  // namespace m3b
