#pragma once

#include <optional>
#include <string>
#include <vector>

#include "m3b/image.hpp"
#include "m3b/metrics.hpp"
#include "m3b/model.hpp"
#include "m3b/train.hpp"

namespace m3b {

// Axis-aligned crop box in the standard 376x376 frame, [r0, r1) x [c0, c1).
struct RoiBox {
  int r0 = 0, c0 = 0, r1 = 0, c1 = 0;
  enum class Source { kPredicted, kDefault };
  Source source = Source::kPredicted;
  int height() const { return r1 - r0; }
  int width() const { return c1 - c0; }
};

inline constexpr int kRoiPadding = 15;
inline constexpr int kDefaultRoiHeight = 168;
inline constexpr int kDefaultRoiWidth = 229;
inline constexpr int kStage1Size = 256;
inline constexpr int kStage2Size = 64;

struct StageOutput {
  PlaneT<float> prob;  // network-resolution probabilities in (0, 1)
  MaskImage mask;      // prob thresholded at 0.5, >= on the boundary
  MaskImage mask_std;  // stage 1 only: nearest-upscaled to 376x376
};

MaskImage threshold_prob(const PlaneT<float>& prob, float thr = 0.5f);

// Downscale the standardized image to 256, replicate gray to 3 channels, run
// the coarse network, lift the binary mask back to the 376 frame.
StageOutput stage1_infer(ModelGraph& stage1, const GrayImage& img376);

// Extreme coordinates of the predicted mask padded by 15 px and clamped; an
// empty mask falls back to the centered 168x229 default box.
RoiBox roi_from_mask(const MaskImage& mask376);

// 1 x 3 x 64 x 64 network input: ROI crop scaled to [0,1] plus the two
// normalized vertical-detail channels. zero_wavelet blanks channels 1-2
// (ablation hook).
Tensor make_multi_input(const GrayImage& img376, const RoiBox& roi,
                        bool zero_wavelet = false);

StageOutput stage2_infer(ModelGraph& stage2, const Tensor& multi_input);

// Paste the 64x64 prediction back through the ROI and the crop record into
// source-slice dimensions.
MaskImage reassemble(const MaskImage& mask64, const RoiBox& roi,
                     const CropRecord& rec);

struct SlicePrediction {
  int slice = 0;
  RoiBox roi;
  MaskImage mask;  // source-slice dims
  std::optional<double> dsc_pct;
  std::string error;  // non-empty when this slice failed
};

struct PipelineConfig {
  bool zero_wavelet = false;
};

struct PipelineResult {
  std::vector<SlicePrediction> slices;
  std::vector<ConfusionCounts> counts;  // parallel to slices, ground truth only
  std::optional<MetricsReport> metrics;
};

// Full per-volume pass: window -> resample -> abdomen crop -> coarse net ->
// ROI -> wavelet multi-input -> fine net -> reassemble; metrics when ground
// truth is supplied. Per-slice failures are recorded and skipped.
PipelineResult run_pipeline(const Volume& vol,
                            const std::vector<MaskImage>* gt_masks,
                            ModelGraph& stage1, ModelGraph& stage2,
                            const PipelineConfig& cfg = {});

PipelineResult run_pipeline(const Volume& vol,
                            const std::vector<MaskImage>* gt_masks,
                            const std::string& stage1_ckpt,
                            const std::string& stage2_ckpt,
                            const PipelineConfig& cfg = {});

// One PNG mask per slice ({case}_{slice:04}.png) plus manifest.jsonl with
// {case, slice, roi, roi_source, dsc?} per line.
void write_predictions(const std::string& out_dir, const std::string& case_id,
                       const PipelineResult& result);

void write_metrics_json(const MetricsReport& report, const std::string& path);

// --------------------------------------------------------------------------
// dataset preparation shared by training, ROI extraction and cross-validation
// --------------------------------------------------------------------------

struct PreppedSlice {
  int z = 0;
  GrayImage img376;
  CropRecord rec;
  MaskImage gt376;  // ground truth mapped into the standard frame
  MaskImage gt1mm;  // ground truth at resampled source dims
};

struct PreppedCase {
  std::string id;
  std::vector<PreppedSlice> slices;  // retained slices only
};

// window -> resample -> abdomen crop for every retained slice of one case.
PreppedCase prep_case(const std::string& corpus_dir,
                      const std::string& case_id,
                      const std::string& volume_path,
                      const std::string& mask_path);

Sample stage1_sample(const PreppedSlice& s);
Sample stage2_sample(const PreppedSlice& s, const RoiBox& roi,
                     bool zero_wavelet);

// --------------------------------------------------------------------------
// cross-validation
// --------------------------------------------------------------------------

// Stage-2 ablation variants evaluated against one shared stage-1 per fold.
struct StageTwoVariant {
  std::string name = "full";
  bool use_mm_block = true;
  bool zero_wavelet = false;
};

struct CrossValConfig {
  int folds = 4;
  uint64_t seed = 7;
  TrainConfig train;      // protocol for both stages; checkpoint paths derived
  std::string work_dir;   // checkpoints and reports land here
};

struct VariantResult {
  std::string name;
  MetricsReport per_slice;  // every test slice across folds
  MetricsReport per_case;   // per-volume confusion totals
  std::vector<double> fold_mean_dsc;
};

// Patient-independent k-fold protocol: per fold the coarse model trains on
// the train split, supplies ROIs for everything, then each variant's fine
// model trains on the train-split crops and scores the test split.
std::vector<VariantResult> cross_validate(
    const std::string& corpus_dir, const CrossValConfig& cfg,
    const std::vector<StageTwoVariant>& variants = {StageTwoVariant{}});

void write_cross_val_json(const std::vector<VariantResult>& results,
                          const std::string& path);

}  // namespace m3b
