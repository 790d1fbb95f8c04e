#include "m3b/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "m3b/nifti.hpp"
#include "m3b/rng.hpp"

namespace m3b {

namespace {

struct Bump {
  double cy, cx, sigma, amp;
};

double smoothstep(double x) {
  x = std::clamp(x, 0.0, 1.0);
  return x * x * (3.0 - 2.0 * x);
}

}  // namespace

Phantom gen_phantom(const PhantomSpec& spec) {
  if (spec.depth < 1 || spec.height < 32 || spec.width < 32)
    throw std::invalid_argument("gen_phantom: degenerate dims");
  Rng rng(spec.seed);
  const int D = spec.depth, H = spec.height, W = spec.width;

  Phantom ph;
  ph.volume = Volume(D, H, W, -1000);
  ph.volume.sz = spec.spacing_z;
  ph.volume.sy = spec.spacing_y;
  ph.volume.sx = spec.spacing_x;

  // abdomen ellipse
  ph.ell_cy = H * (0.5 + rng.uniform(-0.02, 0.02));
  ph.ell_cx = W * (0.5 + rng.uniform(-0.02, 0.02));
  ph.ell_ry = H * rng.uniform(spec.abdomen_ry_lo, spec.abdomen_ry_hi);
  ph.ell_rx = W * rng.uniform(spec.abdomen_rx_lo, spec.abdomen_rx_hi);
  const double tissue = rng.uniform(spec.tissue_hu_lo, spec.tissue_hu_hi);

  // smooth tissue texture so the blob is not separable by intensity alone
  std::vector<Bump> bumps;
  for (int i = 0; i < 3; ++i)
    bumps.push_back({ph.ell_cy + rng.uniform(-0.5, 0.5) * ph.ell_ry,
                     ph.ell_cx + rng.uniform(-0.5, 0.5) * ph.ell_rx,
                     rng.uniform(15.0, 40.0),
                     rng.uniform(-spec.texture_amp_hu, spec.texture_amp_hu)});

  // target blob: radius peaks mid-volume, center drifts per slice
  const double base_r =
      rng.uniform(double(spec.blob_radius_lo), double(spec.blob_radius_hi));
  const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
  const double contrast =
      sign * spec.blob_contrast_hu * rng.uniform(0.75, 1.0);
  double by = ph.ell_cy + rng.uniform(-0.45, 0.45) * (ph.ell_ry - base_r - 4);
  double bx = ph.ell_cx + rng.uniform(-0.45, 0.45) * (ph.ell_rx - base_r - 4);
  const double bound =
      ((by - ph.ell_cy) * (by - ph.ell_cy)) /
          ((ph.ell_ry - base_r - 2) * (ph.ell_ry - base_r - 2)) +
      ((bx - ph.ell_cx) * (bx - ph.ell_cx)) /
          ((ph.ell_rx - base_r - 2) * (ph.ell_rx - base_r - 2));
  if (bound > 1.0)
    throw std::runtime_error("gen_phantom: blob/abdomen geometric conflict");

  std::vector<double> slice_by(static_cast<size_t>(D));
  std::vector<double> slice_bx(static_cast<size_t>(D));
  std::vector<double> slice_r(static_cast<size_t>(D));
  for (int z = 0; z < D; ++z) {
    const double t = D == 1 ? 0.0 : (2.0 * z / (D - 1) - 1.0);  // -1..1
    slice_r[size_t(z)] = base_r * std::sqrt(std::max(0.05, 1.0 - 0.8 * t * t));
    slice_by[size_t(z)] =
        by + rng.uniform(-spec.blob_drift_px, spec.blob_drift_px);
    slice_bx[size_t(z)] =
        bx + rng.uniform(-spec.blob_drift_px, spec.blob_drift_px);
  }

  // dark inclusions (holes after thresholding), kept clear of the blob
  struct Inclusion {
    double cy, cx, r;
  };
  std::vector<Inclusion> dark;
  for (int i = 0; i < spec.dark_inclusions && i < 8; ++i) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      Inclusion inc;
      inc.r = rng.uniform(5.0, 10.0);
      inc.cy = ph.ell_cy + rng.uniform(-0.6, 0.6) * (ph.ell_ry - inc.r - 4);
      inc.cx = ph.ell_cx + rng.uniform(-0.6, 0.6) * (ph.ell_rx - inc.r - 4);
      const double d = std::hypot(inc.cy - by, inc.cx - bx);
      if (d > base_r + spec.blob_drift_px + inc.r + 6.0) {
        dark.push_back(inc);
        break;
      }
    }
  }

  // distractor arcs hugging (but not touching) the outside of the wall
  struct Arc {
    double f, a0, a1;
    int thickness;
  };
  std::vector<Arc> arcs;
  for (int i = 0; i < spec.distractor_arcs; ++i)
    arcs.push_back({rng.uniform(1.06, 1.16), rng.uniform(0.0, 6.28),
                    rng.uniform(0.3, 0.8), 2 + (i % 2)});

  ph.masks.assign(size_t(D), MaskImage(H, W));
  for (int z = 0; z < D; ++z) {
    const double r_z = slice_r[size_t(z)];
    const double cy = slice_by[size_t(z)], cx = slice_bx[size_t(z)];
    MaskImage& mask = ph.masks[size_t(z)];
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const double ey = (y - ph.ell_cy) / ph.ell_ry;
        const double ex = (x - ph.ell_cx) / ph.ell_rx;
        if (ey * ey + ex * ex > 1.0) continue;
        double hu = tissue;
        for (const Bump& b : bumps) {
          const double d2 = (y - b.cy) * (y - b.cy) + (x - b.cx) * (x - b.cx);
          hu += b.amp * std::exp(-d2 / (2.0 * b.sigma * b.sigma));
        }
        for (const Inclusion& inc : dark) {
          if (std::hypot(y - inc.cy, x - inc.cx) <= inc.r) hu = -60.0;
        }
        const double dist = std::hypot(y - cy, x - cx);
        if (r_z >= 1.0) {
          const double alpha =
              smoothstep((r_z - dist) / spec.blob_edge_px + 0.5);
          hu += alpha * contrast;
          if (dist <= r_z) mask.at(y, x) = 1;
        }
        ph.volume.at(z, y, x) = int16_t(std::lround(hu));
      }
    }
    // arcs sit outside the ellipse; never the largest component
    for (const Arc& arc : arcs) {
      for (double a = arc.a0; a <= arc.a0 + arc.a1; a += 0.004) {
        for (int t = 0; t < arc.thickness; ++t) {
          const double fy = ph.ell_cy +
                            (arc.f * ph.ell_ry + 2.0 + t) * std::sin(a);
          const double fx = ph.ell_cx +
                            (arc.f * ph.ell_rx + 2.0 + t) * std::cos(a);
          const int y = int(std::lround(fy)), x = int(std::lround(fx));
          if (y >= 0 && y < H && x >= 0 && x < W) ph.volume.at(z, y, x) = 350;
        }
      }
    }
  }

  // noise over every voxel in raster order, clamped to a valid CT range
  for (auto& v : ph.volume.voxels) {
    const double noisy = double(v) + rng.gaussian() * spec.noise_sigma_hu;
    v = int16_t(std::lround(std::clamp(noisy, -1000.0, 400.0)));
  }
  return ph;
}

void gen_corpus(const std::string& dir, int n_cases, uint64_t seed,
                const PhantomSpec& proto) {
  if (n_cases < 4)
    throw std::invalid_argument("gen_corpus: need at least 4 cases");
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  Rng master(seed);

  nlohmann::json manifest;
  manifest["cases"] = nlohmann::json::array();
  for (int i = 0; i < n_cases; ++i) {
    char id[16];
    std::snprintf(id, sizeof(id), "case_%03d", i);
    PhantomSpec spec = proto;
    spec.seed = master.child(uint64_t(i)).next_u64();
    Phantom ph = gen_phantom(spec);

    fs::create_directories(fs::path(dir) / id);
    const std::string vol_rel = std::string(id) + "/volume.nii";
    const std::string mask_rel = std::string(id) + "/mask.nii";
    write_nifti((fs::path(dir) / vol_rel).string(), ph.volume);
    write_nifti_mask((fs::path(dir) / mask_rel).string(), ph.masks,
                     ph.volume.sz, ph.volume.sy, ph.volume.sx);
    manifest["cases"].push_back(
        {{"id", id}, {"volume", vol_rel}, {"mask", mask_rel}});
  }
  std::ofstream out(fs::path(dir) / "manifest.json");
  out << manifest.dump(2) << "\n";
}

CorpusManifest read_manifest(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in)
    throw std::runtime_error("read_manifest: no manifest.json under " + dir);
  nlohmann::json j;
  in >> j;
  CorpusManifest m;
  for (const auto& c : j.at("cases"))
    m.cases.push_back({c.at("id").get<std::string>(),
                       c.at("volume").get<std::string>(),
                       c.at("mask").get<std::string>()});
  return m;
}

}  // namespace m3b
