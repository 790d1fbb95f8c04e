#pragma once

#include <string>
#include <vector>

#include "m3b/image.hpp"

namespace m3b {

// Abdominal-like phantom: bright ellipse (soft tissue) on air background,
// a low-contrast target blob drifting through the slices, detached bright
// arcs outside the wall, dark inclusions inside it, Gaussian noise.
struct PhantomSpec {
  uint64_t seed = 1;
  int depth = 5, height = 320, width = 320;
  double spacing_z = 1.0, spacing_y = 0.95, spacing_x = 0.95;

  double abdomen_ry_lo = 0.30, abdomen_ry_hi = 0.38;  // fraction of height
  double abdomen_rx_lo = 0.36, abdomen_rx_hi = 0.44;  // fraction of width
  double tissue_hu_lo = 40.0, tissue_hu_hi = 80.0;

  int blob_radius_lo = 8, blob_radius_hi = 20;
  double blob_contrast_hu = 12.0;  // |intensity offset| vs local tissue, <= 15
  double blob_drift_px = 2.0;     // per-slice center drift
  double blob_edge_px = 1.5;      // smooth boundary width

  int distractor_arcs = 2;  // steel-plate analogs outside the wall
  int dark_inclusions = 2;  // sub-threshold holes inside the wall
  double texture_amp_hu = 8.0;
  double noise_sigma_hu = 4.0;
};

struct Phantom {
  Volume volume;
  std::vector<MaskImage> masks;
  // analytic abdomen geometry, the crop-oracle ground truth
  double ell_cy = 0, ell_cx = 0, ell_ry = 0, ell_rx = 0;
};

Phantom gen_phantom(const PhantomSpec& spec);

struct CorpusCase {
  std::string id;
  std::string volume_path;  // relative to the corpus directory
  std::string mask_path;
};

struct CorpusManifest {
  std::vector<CorpusCase> cases;
};

// n_cases phantom cases (volume.nii + mask.nii each) plus manifest.json.
// Regeneration from the same seed is byte-identical.
void gen_corpus(const std::string& dir, int n_cases, uint64_t seed,
                const PhantomSpec& proto = {});

CorpusManifest read_manifest(const std::string& dir);

}  // namespace m3b
