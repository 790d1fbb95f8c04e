#include "m3b/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

#include "json.hpp"
#include "m3b/nifti.hpp"
#include "m3b/png_io.hpp"
#include "m3b/synth.hpp"
#include "m3b/wavelet.hpp"

namespace m3b {

namespace fs = std::filesystem;

MaskImage threshold_prob(const PlaneT<float>& prob, float thr) {
  MaskImage m(prob.h, prob.w);
  for (size_t i = 0; i < m.px.size(); ++i)
    m.px[i] = prob.v[i] >= thr ? 1 : 0;  // p == thr counts as foreground
  return m;
}

namespace {

void require_model(const ModelGraph& model, int channels, int side,
                   const char* what) {
  if (model.entries().empty())
    throw std::invalid_argument(std::string(what) + ": model not built");
  const ModelConfig& c = model.config();
  if (c.in_channels != channels || c.height != side || c.width != side)
    throw std::invalid_argument(std::string(what) + ": model built for " +
                                std::to_string(c.in_channels) + "x" +
                                std::to_string(c.height) + "x" +
                                std::to_string(c.width) + ", need " +
                                std::to_string(channels) + "x" +
                                std::to_string(side) + "x" +
                                std::to_string(side));
}

Tensor replicate_to_3ch(const PlaneT<float>& p) {
  Tensor t({1, 3, p.h, p.w});
  for (int c = 0; c < 3; ++c)
    std::copy(p.v.begin(), p.v.end(), t.data() + int64_t(c) * p.numel());
  return t;
}

PlaneT<float> prob_plane(const Tensor& pred) {
  const Shape4 s = pred.shape();
  PlaneT<float> p(s.h, s.w);
  std::copy(pred.data(), pred.data() + s.plane(), p.v.begin());
  return p;
}

}  // namespace

StageOutput stage1_infer(ModelGraph& stage1, const GrayImage& img376) {
  require_model(stage1, 3, kStage1Size, "stage1_infer");
  if (img376.h != kStandardSize || img376.w != kStandardSize)
    throw std::invalid_argument("stage1_infer: expected a 376x376 image");

  PlaneT<float> p = plane_from_gray(img376);
  for (auto& v : p.v) v /= 255.f;
  PlaneT<float> small = resize_bilinear(p, kStage1Size, kStage1Size);
  auto pred = stage1.forward(nullptr, replicate_to_3ch(small), BnMode::kEval);

  StageOutput out;
  out.prob = prob_plane(pred);
  out.mask = threshold_prob(out.prob);
  PlaneT<uint8_t> m;
  m.h = out.mask.h;
  m.w = out.mask.w;
  m.v = out.mask.px;
  PlaneT<uint8_t> up = resize_nearest(m, kStandardSize, kStandardSize);
  out.mask_std = MaskImage(kStandardSize, kStandardSize);
  out.mask_std.px = std::move(up.v);
  return out;
}

RoiBox roi_from_mask(const MaskImage& mask376) {
  if (mask376.h != kStandardSize || mask376.w != kStandardSize)
    throw std::invalid_argument("roi_from_mask: expected a 376x376 mask");
  int min_r = mask376.h, max_r = -1, min_c = mask376.w, max_c = -1;
  for (int r = 0; r < mask376.h; ++r)
    for (int c = 0; c < mask376.w; ++c)
      if (mask376.at(r, c)) {
        min_r = std::min(min_r, r);
        max_r = std::max(max_r, r);
        min_c = std::min(min_c, c);
        max_c = std::max(max_c, c);
      }

  RoiBox box;
  if (max_r < 0) {
    // detection failed: centered default box
    box.r0 = (kStandardSize - kDefaultRoiHeight) / 2;
    box.r1 = box.r0 + kDefaultRoiHeight;
    box.c0 = (kStandardSize - kDefaultRoiWidth) / 2;
    box.c1 = box.c0 + kDefaultRoiWidth;
    box.source = RoiBox::Source::kDefault;
    return box;
  }
  box.r0 = std::max(0, min_r - kRoiPadding);
  box.c0 = std::max(0, min_c - kRoiPadding);
  box.r1 = std::min(kStandardSize, max_r + kRoiPadding + 1);
  box.c1 = std::min(kStandardSize, max_c + kRoiPadding + 1);
  box.source = RoiBox::Source::kPredicted;
  return box;
}

Tensor make_multi_input(const GrayImage& img376, const RoiBox& roi,
                        bool zero_wavelet) {
  if (roi.r0 < 0 || roi.c0 < 0 || roi.r1 > img376.h || roi.c1 > img376.w ||
      roi.height() < 1 || roi.width() < 1)
    throw std::invalid_argument("make_multi_input: degenerate roi");

  PlaneT<float> crop(roi.height(), roi.width());
  for (int r = 0; r < crop.h; ++r)
    for (int c = 0; c < crop.w; ++c)
      crop.at(r, c) = float(img376.at(roi.r0 + r, roi.c0 + c));
  GrayImage crop64 = gray_from_plane(
      resize_bilinear(crop, kStage2Size, kStage2Size));

  Tensor multi({1, 3, kStage2Size, kStage2Size});
  for (int64_t i = 0; i < int64_t(crop64.px.size()); ++i)
    multi.data()[i] = float(crop64.px[size_t(i)]) / 255.f;

  if (!zero_wavelet) {
    // detail channels in double precision so flat crops stay exactly flat
    auto [v1, v2] = vertical_details(dplane_from_gray(crop64));
    PlaneT<double> c1 = detail_to_channel(v1, kStage2Size);
    PlaneT<double> c2 = detail_to_channel(v2, kStage2Size);
    const int64_t plane = int64_t(kStage2Size) * kStage2Size;
    for (int64_t i = 0; i < plane; ++i) {
      multi.data()[plane + i] = float(c1.v[size_t(i)]);
      multi.data()[2 * plane + i] = float(c2.v[size_t(i)]);
    }
  }
  return multi;
}

StageOutput stage2_infer(ModelGraph& stage2, const Tensor& multi_input) {
  require_model(stage2, 3, kStage2Size, "stage2_infer");
  if (!(multi_input.shape() == Shape4{1, 3, kStage2Size, kStage2Size}))
    throw std::invalid_argument("stage2_infer: expected a 1x3x64x64 input");
  auto pred = stage2.forward(nullptr, multi_input, BnMode::kEval);
  StageOutput out;
  out.prob = prob_plane(pred);
  out.mask = threshold_prob(out.prob);
  return out;
}

MaskImage reassemble(const MaskImage& mask64, const RoiBox& roi,
                     const CropRecord& rec) {
  if (mask64.h != kStage2Size || mask64.w != kStage2Size)
    throw std::invalid_argument("reassemble: expected a 64x64 mask");
  if (roi.height() < 1 || roi.width() < 1 || roi.r1 > kStandardSize ||
      roi.c1 > kStandardSize)
    throw std::invalid_argument("reassemble: inconsistent roi");

  PlaneT<uint8_t> m;
  m.h = mask64.h;
  m.w = mask64.w;
  m.v = mask64.px;
  PlaneT<uint8_t> up = resize_nearest(m, roi.height(), roi.width());

  MaskImage std_frame(kStandardSize, kStandardSize);
  for (int r = 0; r < up.h; ++r)
    for (int c = 0; c < up.w; ++c)
      std_frame.at(roi.r0 + r, roi.c0 + c) = up.at(r, c);
  return uncrop_mask(std_frame, rec);
}

namespace {

struct SliceRun {
  SlicePrediction pred;
  std::optional<ConfusionCounts> counts;
};

SliceRun infer_one_slice(int z, const Volume& vol, const MaskImage* gt,
                         ModelGraph& s1, ModelGraph& s2,
                         const PipelineConfig& cfg) {
  SliceRun run;
  run.pred.slice = z;
  auto windowed = window_to_u8(slice_of(vol, z));
  auto resampled = resample_inplane(windowed, vol.sy, vol.sx);
  auto crop = abdomen_crop(resampled);

  auto s1out = stage1_infer(s1, crop.image);
  run.pred.roi = roi_from_mask(s1out.mask_std);
  auto multi = make_multi_input(crop.image, run.pred.roi, cfg.zero_wavelet);
  auto s2out = stage2_infer(s2, multi);
  run.pred.mask = reassemble(s2out.mask, run.pred.roi, crop.record);

  if (gt) {
    auto gt1mm = resample_mask_inplane(*gt, vol.sy, vol.sx);
    auto c = confusion(run.pred.mask, gt1mm);
    run.counts = c;
    run.pred.dsc_pct = dsc(c);
  }
  return run;
}

}  // namespace

PipelineResult run_pipeline(const Volume& vol,
                            const std::vector<MaskImage>* gt_masks,
                            ModelGraph& stage1, ModelGraph& stage2,
                            const PipelineConfig& cfg) {
  if (gt_masks && int(gt_masks->size()) != vol.d)
    throw std::invalid_argument("run_pipeline: mask stack depth mismatch");

  std::vector<int> slices;
  if (gt_masks) {
    slices = slice_filter(*gt_masks);
  } else {
    slices.resize(size_t(vol.d));
    for (int z = 0; z < vol.d; ++z) slices[size_t(z)] = z;
  }

  PipelineResult result;
  for (int z : slices) {
    try {
      auto run = infer_one_slice(z, vol, gt_masks ? &(*gt_masks)[size_t(z)] : nullptr,
                                 stage1, stage2, cfg);
      result.slices.push_back(std::move(run.pred));
      if (run.counts) result.counts.push_back(*run.counts);
    } catch (const std::exception& e) {
      SlicePrediction failed;
      failed.slice = z;
      failed.error = e.what();
      result.slices.push_back(std::move(failed));
    }
  }
  if (gt_masks && !result.counts.empty())
    result.metrics = aggregate(result.counts);
  return result;
}

PipelineResult run_pipeline(const Volume& vol,
                            const std::vector<MaskImage>* gt_masks,
                            const std::string& stage1_ckpt,
                            const std::string& stage2_ckpt,
                            const PipelineConfig& cfg) {
  ModelConfig c1;
  c1.height = c1.width = kStage1Size;
  c1.use_mm_block = false;
  auto s1 = ModelGraph::build(c1, 0);
  load_checkpoint(stage1_ckpt, s1);

  ModelConfig c2;
  c2.height = c2.width = kStage2Size;
  c2.use_mm_block = true;
  auto s2 = ModelGraph::build(c2, 0);
  try {
    load_checkpoint(stage2_ckpt, s2);
  } catch (const std::runtime_error&) {
    // the plain (ablation) variant has no MM tensors
    c2.use_mm_block = false;
    s2 = ModelGraph::build(c2, 0);
    load_checkpoint(stage2_ckpt, s2);
  }
  return run_pipeline(vol, gt_masks, s1, s2, cfg);
}

void write_predictions(const std::string& out_dir, const std::string& case_id,
                       const PipelineResult& result) {
  fs::create_directories(out_dir);
  std::ofstream manifest(fs::path(out_dir) / (case_id + "_manifest.jsonl"));
  if (!manifest)
    throw std::runtime_error("write_predictions: cannot open manifest");
  for (const auto& s : result.slices) {
    nlohmann::json j;
    j["case"] = case_id;
    j["slice"] = s.slice;
    if (s.error.empty()) {
      char name[64];
      std::snprintf(name, sizeof(name), "%s_%04d.png", case_id.c_str(),
                    s.slice);
      GrayImage img(s.mask.h, s.mask.w);
      for (size_t i = 0; i < img.px.size(); ++i)
        img.px[i] = s.mask.px[i] ? 255 : 0;
      png_write((fs::path(out_dir) / name).string(), img);
      j["mask"] = name;
      j["roi"] = {s.roi.r0, s.roi.c0, s.roi.r1, s.roi.c1};
      j["roi_source"] =
          s.roi.source == RoiBox::Source::kDefault ? "default" : "predicted";
      if (s.dsc_pct) j["dsc"] = *s.dsc_pct;
    } else {
      j["error"] = s.error;
    }
    manifest << j.dump() << "\n";
  }
}

namespace {

nlohmann::json stat_json(const MetricStat& s) {
  return {{"mean", s.mean}, {"std", s.stddev}, {"n", s.n}};
}

nlohmann::json report_json(const MetricsReport& r) {
  return {{"dsc", stat_json(r.dsc)},
          {"iou", stat_json(r.iou)},
          {"specificity", stat_json(r.specificity)},
          {"precision", stat_json(r.precision)},
          {"recall", stat_json(r.recall)}};
}

}  // namespace

void write_metrics_json(const MetricsReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_metrics_json: cannot open " + path);
  out << report_json(report).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// cross-validation
// ---------------------------------------------------------------------------

PreppedCase prep_case(const std::string& corpus_dir,
                      const std::string& case_id,
                      const std::string& volume_path,
                      const std::string& mask_path) {
  PreppedCase out;
  out.id = case_id;
  auto vol = read_nifti((fs::path(corpus_dir) / volume_path).string());
  auto gt = read_nifti((fs::path(corpus_dir) / mask_path).string());
  if (!gt.masks)
    throw std::runtime_error("prep_case: " + mask_path +
                             " is not a mask volume");
  const auto& masks = *gt.masks;
  if (int(masks.size()) != vol.volume.d)
    throw std::runtime_error("prep_case: mask/volume depth mismatch for " +
                             case_id);
  for (int z : slice_filter(masks)) {
    PreppedSlice s;
    s.z = z;
    auto windowed = window_to_u8(slice_of(vol.volume, z));
    auto resampled =
        resample_inplane(windowed, vol.volume.sy, vol.volume.sx);
    auto crop = abdomen_crop(resampled);
    s.img376 = std::move(crop.image);
    s.rec = crop.record;
    s.gt1mm = resample_mask_inplane(masks[size_t(z)], vol.volume.sy,
                                    vol.volume.sx);
    s.gt376 = apply_crop_to_mask(s.gt1mm, s.rec);
    out.slices.push_back(std::move(s));
  }
  return out;
}

Sample stage1_sample(const PreppedSlice& s) {
  PlaneT<float> p = plane_from_gray(s.img376);
  for (auto& v : p.v) v /= 255.f;
  Tensor x = [&] {
    PlaneT<float> small = resize_bilinear(p, kStage1Size, kStage1Size);
    Tensor t({1, 3, kStage1Size, kStage1Size});
    for (int c = 0; c < 3; ++c)
      std::copy(small.v.begin(), small.v.end(),
                t.data() + int64_t(c) * small.numel());
    return t;
  }();
  PlaneT<uint8_t> g;
  g.h = s.gt376.h;
  g.w = s.gt376.w;
  g.v = s.gt376.px;
  PlaneT<uint8_t> small = resize_nearest(g, kStage1Size, kStage1Size);
  Tensor y({1, 1, kStage1Size, kStage1Size});
  for (size_t i = 0; i < small.v.size(); ++i) y.data()[i] = float(small.v[i]);
  return {x, y};
}

Sample stage2_sample(const PreppedSlice& s, const RoiBox& roi,
                     bool zero_wavelet) {
  Tensor x = make_multi_input(s.img376, roi, zero_wavelet);
  MaskImage region(roi.height(), roi.width());
  for (int r = 0; r < region.h; ++r)
    for (int c = 0; c < region.w; ++c)
      region.at(r, c) = s.gt376.at(roi.r0 + r, roi.c0 + c);
  PlaneT<uint8_t> g;
  g.h = region.h;
  g.w = region.w;
  g.v = region.px;
  PlaneT<uint8_t> small = resize_nearest(g, kStage2Size, kStage2Size);
  Tensor y({1, 1, kStage2Size, kStage2Size});
  for (size_t i = 0; i < small.v.size(); ++i) y.data()[i] = float(small.v[i]);
  return {x, y};
}

std::vector<VariantResult> cross_validate(
    const std::string& corpus_dir, const CrossValConfig& cfg,
    const std::vector<StageTwoVariant>& variants) {
  if (variants.empty())
    throw std::invalid_argument("cross_validate: no variants");
  auto manifest = read_manifest(corpus_dir);
  fs::create_directories(cfg.work_dir);

  std::vector<PreppedCase> cases;
  std::vector<std::string> ids;
  for (const auto& c : manifest.cases) {
    cases.push_back(prep_case(corpus_dir, c.id, c.volume_path, c.mask_path));
    ids.push_back(c.id);
  }
  auto find_case = [&](const std::string& id) -> const PreppedCase& {
    for (const auto& c : cases)
      if (c.id == id) return c;
    throw std::runtime_error("cross_validate: unknown case " + id);
  };

  FoldSplit split = make_folds(ids, cfg.folds, cfg.seed);

  struct Accum {
    std::vector<ConfusionCounts> slice_counts;
    std::vector<ConfusionCounts> case_counts;
    std::vector<double> fold_mean_dsc;
  };
  std::vector<Accum> acc(variants.size());

  for (int fold = 0; fold < cfg.folds; ++fold) {
    // stage 1: coarse segmenter on the train split
    ModelConfig c1;
    c1.height = c1.width = kStage1Size;
    c1.use_mm_block = false;
    auto s1 = ModelGraph::build(c1, cfg.seed * 1000 + uint64_t(fold) * 2);

    std::vector<Sample> train1;
    for (const auto& id : split.train_ids(fold))
      for (const auto& s : find_case(id).slices)
        train1.push_back(stage1_sample(s));

    TrainConfig t1 = cfg.train;
    t1.seed = cfg.seed + uint64_t(fold) * 101;
    t1.checkpoint_path =
        (fs::path(cfg.work_dir) / ("fold" + std::to_string(fold) + "_stage1.ckpt"))
            .string();
    auto h1 = fit(s1, train1, t1);
    if (h1.stop_reason == "nan-abort")
      throw std::runtime_error("cross_validate: stage-1 training aborted: " +
                               h1.diagnostic);
    load_checkpoint(t1.checkpoint_path, s1);
    write_history_jsonl(
        h1, (fs::path(cfg.work_dir) / ("fold" + std::to_string(fold) +
                                       "_stage1_history.jsonl"))
                .string());

    // shared ROI extraction for every slice of every case in this fold
    std::map<std::string, std::vector<RoiBox>> rois;
    for (const auto& id : ids) {
      const auto& pc = find_case(id);
      auto& list = rois[id];
      for (const auto& s : pc.slices) {
        auto s1out = stage1_infer(s1, s.img376);
        list.push_back(roi_from_mask(s1out.mask_std));
      }
    }

    for (size_t vi = 0; vi < variants.size(); ++vi) {
      const auto& var = variants[vi];
      ModelConfig c2;
      c2.height = c2.width = kStage2Size;
      c2.use_mm_block = var.use_mm_block;
      auto s2 = ModelGraph::build(c2, cfg.seed * 1000 + uint64_t(fold) * 2 + 1);

      std::vector<Sample> train2;
      for (const auto& id : split.train_ids(fold)) {
        const auto& pc = find_case(id);
        for (size_t si = 0; si < pc.slices.size(); ++si)
          train2.push_back(stage2_sample(pc.slices[si], rois[id][si],
                                         var.zero_wavelet));
      }

      TrainConfig t2 = cfg.train;
      t2.seed = cfg.seed + uint64_t(fold) * 101 + 13;
      t2.checkpoint_path =
          (fs::path(cfg.work_dir) / ("fold" + std::to_string(fold) + "_stage2_" +
                                     var.name + ".ckpt"))
              .string();
      auto h2 = fit(s2, train2, t2);
      if (h2.stop_reason == "nan-abort")
        throw std::runtime_error("cross_validate: stage-2 training aborted: " +
                                 h2.diagnostic);
      load_checkpoint(t2.checkpoint_path, s2);
      write_history_jsonl(
          h2, (fs::path(cfg.work_dir) / ("fold" + std::to_string(fold) +
                                         "_stage2_" + var.name +
                                         "_history.jsonl"))
                  .string());

      // score the held-out patients
      std::vector<double> fold_dscs;
      for (const auto& id : split.test_ids(fold)) {
        const auto& pc = find_case(id);
        ConfusionCounts case_total;
        for (size_t si = 0; si < pc.slices.size(); ++si) {
          const auto& s = pc.slices[si];
          auto multi = make_multi_input(s.img376, rois[id][si],
                                        var.zero_wavelet);
          auto s2out = stage2_infer(s2, multi);
          auto full = reassemble(s2out.mask, rois[id][si], s.rec);
          auto c = confusion(full, s.gt1mm);
          acc[vi].slice_counts.push_back(c);
          fold_dscs.push_back(dsc(c));
          case_total.tp += c.tp;
          case_total.fp += c.fp;
          case_total.fn += c.fn;
          case_total.tn += c.tn;
        }
        acc[vi].case_counts.push_back(case_total);
      }
      acc[vi].fold_mean_dsc.push_back(aggregate_values(fold_dscs).mean);
    }
  }

  std::vector<VariantResult> results;
  for (size_t vi = 0; vi < variants.size(); ++vi) {
    VariantResult r;
    r.name = variants[vi].name;
    r.per_slice = aggregate(acc[vi].slice_counts);
    r.per_case = aggregate(acc[vi].case_counts);
    r.fold_mean_dsc = acc[vi].fold_mean_dsc;
    results.push_back(std::move(r));
  }
  return results;
}

void write_cross_val_json(const std::vector<VariantResult>& results,
                          const std::string& path) {
  nlohmann::json j;
  j["variants"] = nlohmann::json::array();
  for (const auto& r : results) {
    nlohmann::json v;
    v["name"] = r.name;
    v["per_slice"] = report_json(r.per_slice);
    v["per_case"] = report_json(r.per_case);
    v["fold_mean_dsc"] = r.fold_mean_dsc;
    j["variants"].push_back(v);
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_cross_val_json: cannot open " + path);
  out << j.dump(2) << "\n";
}

}  // namespace m3b
