// m3bseg: dual-stage pancreas-segmentation pipeline on synthetic or real
// NIfTI corpora. Every subcommand is deterministic under --seed and exits
// nonzero with a one-line error on failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "json.hpp"
#include "m3b/metrics.hpp"
#include "m3b/model.hpp"
#include "m3b/nifti.hpp"
#include "m3b/pipeline.hpp"
#include "m3b/png_io.hpp"
#include "m3b/synth.hpp"
#include "m3b/tensor.hpp"
#include "m3b/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct GlobalOpts {
  std::string config_path;
  uint64_t seed = 1;
  int threads = 0;
};

// JSON config file: {"train": {...}} with flag overrides on top. Unknown
// keys are rejected so typos fail fast.
m3b::TrainConfig load_train_config(const std::string& path) {
  m3b::TrainConfig cfg;
  if (path.empty()) return cfg;
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  json j;
  in >> j;
  for (const auto& [key, value] : j.items()) {
    if (key != "train")
      throw std::runtime_error("config: unknown top-level key '" + key + "'");
    for (const auto& [k, v] : value.items()) {
      if (k == "batch_size") cfg.batch_size = v.get<int>();
      else if (k == "phase_a_epochs") cfg.phase_a_epochs = v.get<int>();
      else if (k == "phase_a_lr") cfg.phase_a_lr = v.get<double>();
      else if (k == "phase_b_epochs") cfg.phase_b_epochs = v.get<int>();
      else if (k == "phase_b_lr") cfg.phase_b_lr = v.get<double>();
      else if (k == "plateau_factor") cfg.plateau_factor = v.get<double>();
      else if (k == "lr_floor") cfg.lr_floor = v.get<double>();
      else if (k == "plateau_patience") cfg.plateau_patience = v.get<int>();
      else if (k == "early_stop_patience") cfg.early_stop_patience = v.get<int>();
      else if (k == "augment_prob") cfg.augment_prob = v.get<double>();
      else
        throw std::runtime_error("config: unknown train key '" + k + "'");
    }
  }
  return cfg;
}

void require_exists(const std::string& path, const char* what) {
  if (!fs::exists(path))
    throw std::runtime_error(std::string(what) + " not found: " + path);
}

std::vector<m3b::PreppedCase> prep_corpus(const std::string& data_dir) {
  auto manifest = m3b::read_manifest(data_dir);
  std::vector<m3b::PreppedCase> cases;
  for (const auto& c : manifest.cases)
    cases.push_back(m3b::prep_case(data_dir, c.id, c.volume_path, c.mask_path));
  return cases;
}

m3b::ModelGraph build_stage1(uint64_t seed) {
  m3b::ModelConfig c;
  c.height = c.width = m3b::kStage1Size;
  c.use_mm_block = false;
  return m3b::ModelGraph::build(c, seed);
}

m3b::ModelGraph build_stage2(uint64_t seed, bool use_mm) {
  m3b::ModelConfig c;
  c.height = c.width = m3b::kStage2Size;
  c.use_mm_block = use_mm;
  return m3b::ModelGraph::build(c, seed);
}

// ROI manifest: one JSON object per slice, shared by extract-roi, infer and
// train --stage 2.
void write_roi_manifest(const std::string& path,
                        const std::map<std::string, std::vector<std::pair<int, m3b::RoiBox>>>& rois) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  for (const auto& [case_id, list] : rois) {
    for (const auto& [z, box] : list) {
      json j;
      j["case"] = case_id;
      j["slice"] = z;
      j["roi"] = {box.r0, box.c0, box.r1, box.c1};
      j["roi_source"] = box.source == m3b::RoiBox::Source::kDefault
                            ? "default"
                            : "predicted";
      out << j.dump() << "\n";
    }
  }
}

std::map<std::string, std::map<int, m3b::RoiBox>> read_roi_manifest(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open ROI manifest " + path);
  std::map<std::string, std::map<int, m3b::RoiBox>> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    m3b::RoiBox box;
    box.r0 = j.at("roi")[0].get<int>();
    box.c0 = j.at("roi")[1].get<int>();
    box.r1 = j.at("roi")[2].get<int>();
    box.c1 = j.at("roi")[3].get<int>();
    box.source = j.at("roi_source").get<std::string>() == "default"
                     ? m3b::RoiBox::Source::kDefault
                     : m3b::RoiBox::Source::kPredicted;
    out[j.at("case").get<std::string>()][j.at("slice").get<int>()] = box;
  }
  return out;
}

int cmd_gen_data(const std::string& out_dir, int cases, uint64_t seed,
                 int depth, int height, int width) {
  m3b::PhantomSpec proto;
  proto.depth = depth;
  proto.height = height;
  proto.width = width;
  m3b::gen_corpus(out_dir, cases, seed, proto);
  std::printf("wrote %d cases to %s\n", cases, out_dir.c_str());
  return 0;
}

int cmd_preprocess(const std::string& data_dir, const std::string& out_dir) {
  require_exists(data_dir, "--data");
  fs::create_directories(out_dir);
  auto cases = prep_corpus(data_dir);
  int64_t slices = 0;
  for (const auto& pc : cases) {
    std::ofstream rec_out(fs::path(out_dir) / (pc.id + "_crops.jsonl"));
    for (const auto& s : pc.slices) {
      char name[64];
      std::snprintf(name, sizeof(name), "%s_%04d.png", pc.id.c_str(), s.z);
      m3b::png_write((fs::path(out_dir) / name).string(), s.img376);
      char mask_name[64];
      std::snprintf(mask_name, sizeof(mask_name), "%s_%04d_mask.png",
                    pc.id.c_str(), s.z);
      m3b::GrayImage m(s.gt376.h, s.gt376.w);
      for (size_t i = 0; i < m.px.size(); ++i)
        m.px[i] = s.gt376.px[i] ? 255 : 0;
      m3b::png_write((fs::path(out_dir) / mask_name).string(), m);
      json j;
      j["slice"] = s.z;
      j["bbox"] = {s.rec.r0, s.rec.c0, s.rec.r1, s.rec.c1};
      j["src_dims"] = {s.rec.src_h, s.rec.src_w};
      j["uncropped"] = s.rec.uncropped;
      rec_out << j.dump() << "\n";
      ++slices;
    }
  }
  std::printf("preprocessed %zu cases (%lld slices) into %s\n", cases.size(),
              (long long)slices, out_dir.c_str());
  return 0;
}

int cmd_train(int stage, const std::string& data_dir,
              const std::string& out_dir, const std::string& roi_manifest,
              const m3b::TrainConfig& base_cfg, uint64_t seed) {
  require_exists(data_dir, "--data");
  if (stage == 2 && roi_manifest.empty())
    throw std::runtime_error("stage-2 requires ROI manifest");
  fs::create_directories(out_dir);

  auto cases = prep_corpus(data_dir);
  m3b::TrainConfig cfg = base_cfg;
  cfg.seed = seed;

  std::vector<m3b::Sample> samples;
  m3b::ModelGraph model;
  if (stage == 1) {
    for (const auto& pc : cases)
      for (const auto& s : pc.slices) samples.push_back(m3b::stage1_sample(s));
    model = build_stage1(seed);
    cfg.checkpoint_path = (fs::path(out_dir) / "stage1.ckpt").string();
  } else {
    require_exists(roi_manifest, "--stage1-roi");
    auto rois = read_roi_manifest(roi_manifest);
    for (const auto& pc : cases) {
      auto it = rois.find(pc.id);
      if (it == rois.end())
        throw std::runtime_error("ROI manifest has no entries for " + pc.id);
      for (const auto& s : pc.slices) {
        auto rit = it->second.find(s.z);
        if (rit == it->second.end())
          throw std::runtime_error("ROI manifest misses slice " +
                                   std::to_string(s.z) + " of " + pc.id);
        samples.push_back(m3b::stage2_sample(s, rit->second, false));
      }
    }
    model = build_stage2(seed, true);
    cfg.checkpoint_path = (fs::path(out_dir) / "stage2.ckpt").string();
  }

  auto hist = m3b::fit(model, samples, cfg);
  m3b::write_history_jsonl(
      hist, (fs::path(out_dir) / ("stage" + std::to_string(stage) +
                                  "_history.jsonl"))
                .string());
  if (hist.stop_reason == "nan-abort")
    throw std::runtime_error("training aborted: " + hist.diagnostic);
  std::printf("stage-%d training done: best_loss=%.6f stop=%s ckpt=%s\n",
              stage, hist.best_loss, hist.stop_reason.c_str(),
              cfg.checkpoint_path.c_str());
  return 0;
}

int cmd_extract_roi(const std::string& data_dir, const std::string& ckpt,
                    const std::string& out_path) {
  require_exists(data_dir, "--data");
  require_exists(ckpt, "--ckpt");
  auto s1 = build_stage1(0);
  m3b::load_checkpoint(ckpt, s1);
  auto cases = prep_corpus(data_dir);
  std::map<std::string, std::vector<std::pair<int, m3b::RoiBox>>> rois;
  for (const auto& pc : cases)
    for (const auto& s : pc.slices) {
      auto out = m3b::stage1_infer(s1, s.img376);
      rois[pc.id].push_back({s.z, m3b::roi_from_mask(out.mask_std)});
    }
  write_roi_manifest(out_path, rois);
  std::printf("wrote ROI manifest %s\n", out_path.c_str());
  return 0;
}

int cmd_infer(int stage, const std::string& data_dir, const std::string& ckpt,
              const std::string& roi_manifest, const std::string& out_dir) {
  require_exists(data_dir, "--data");
  require_exists(ckpt, "--ckpt");
  fs::create_directories(out_dir);
  auto cases = prep_corpus(data_dir);

  if (stage == 1) {
    auto s1 = build_stage1(0);
    m3b::load_checkpoint(ckpt, s1);
    std::map<std::string, std::vector<std::pair<int, m3b::RoiBox>>> rois;
    for (const auto& pc : cases)
      for (const auto& s : pc.slices) {
        auto out = m3b::stage1_infer(s1, s.img376);
        char name[64];
        std::snprintf(name, sizeof(name), "%s_%04d.png", pc.id.c_str(), s.z);
        m3b::GrayImage img(out.mask_std.h, out.mask_std.w);
        for (size_t i = 0; i < img.px.size(); ++i)
          img.px[i] = out.mask_std.px[i] ? 255 : 0;
        m3b::png_write((fs::path(out_dir) / name).string(), img);
        rois[pc.id].push_back({s.z, m3b::roi_from_mask(out.mask_std)});
      }
    write_roi_manifest((fs::path(out_dir) / "roi_manifest.jsonl").string(),
                       rois);
  } else {
    if (roi_manifest.empty())
      throw std::runtime_error("stage-2 requires ROI manifest");
    require_exists(roi_manifest, "--stage1-roi");
    m3b::ModelGraph s2;
    try {
      s2 = build_stage2(0, true);
      m3b::load_checkpoint(ckpt, s2);
    } catch (const std::runtime_error&) {
      s2 = build_stage2(0, false);
      m3b::load_checkpoint(ckpt, s2);
    }
    auto rois = read_roi_manifest(roi_manifest);
    for (const auto& pc : cases) {
      for (const auto& s : pc.slices) {
        const auto& box = rois.at(pc.id).at(s.z);
        auto multi = m3b::make_multi_input(s.img376, box, false);
        auto out = m3b::stage2_infer(s2, multi);
        char name[64];
        std::snprintf(name, sizeof(name), "%s_%04d.png", pc.id.c_str(), s.z);
        m3b::GrayImage img(out.mask.h, out.mask.w);
        for (size_t i = 0; i < img.px.size(); ++i)
          img.px[i] = out.mask.px[i] ? 255 : 0;
        m3b::png_write((fs::path(out_dir) / name).string(), img);
      }
    }
  }
  std::printf("inference done: %s\n", out_dir.c_str());
  return 0;
}

int cmd_pipeline(const std::string& data_dir, const std::string& s1_ckpt,
                 const std::string& s2_ckpt, const std::string& out_dir,
                 bool zero_wavelet) {
  require_exists(data_dir, "--data");
  require_exists(s1_ckpt, "--stage1-ckpt");
  require_exists(s2_ckpt, "--stage2-ckpt");
  fs::create_directories(out_dir);
  auto manifest = m3b::read_manifest(data_dir);

  m3b::PipelineConfig pcfg;
  pcfg.zero_wavelet = zero_wavelet;
  std::vector<m3b::ConfusionCounts> all_counts;
  for (const auto& c : manifest.cases) {
    auto vol = m3b::read_nifti((fs::path(data_dir) / c.volume_path).string());
    auto gt = m3b::read_nifti((fs::path(data_dir) / c.mask_path).string());
    if (!gt.masks)
      throw std::runtime_error(c.mask_path + " is not a mask volume");
    auto result =
        m3b::run_pipeline(vol.volume, &*gt.masks, s1_ckpt, s2_ckpt, pcfg);
    m3b::write_predictions(out_dir, c.id, result);
    all_counts.insert(all_counts.end(), result.counts.begin(),
                      result.counts.end());
  }
  if (!all_counts.empty()) {
    auto report = m3b::aggregate(all_counts);
    m3b::write_metrics_json(report,
                            (fs::path(out_dir) / "metrics.json").string());
    std::printf("pipeline done: mean DSC %.2f%% over %lld slices\n",
                report.dsc.mean, (long long)report.dsc.n);
  } else {
    std::printf("pipeline done (no ground truth, no metrics)\n");
  }
  return 0;
}

int cmd_evaluate(const std::string& pred_dir, const std::string& data_dir,
                 const std::string& out_path) {
  require_exists(pred_dir, "--pred");
  require_exists(data_dir, "--data");
  auto manifest = m3b::read_manifest(data_dir);
  std::vector<m3b::ConfusionCounts> counts;
  for (const auto& c : manifest.cases) {
    auto gt = m3b::read_nifti((fs::path(data_dir) / c.mask_path).string());
    if (!gt.masks)
      throw std::runtime_error(c.mask_path + " is not a mask volume");
    auto vol = m3b::read_nifti((fs::path(data_dir) / c.volume_path).string());
    const auto man_path = fs::path(pred_dir) / (c.id + "_manifest.jsonl");
    require_exists(man_path.string(), "prediction manifest");
    std::ifstream in(man_path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json j = json::parse(line);
      if (j.contains("error")) continue;
      const int z = j.at("slice").get<int>();
      auto png =
          m3b::png_read((fs::path(pred_dir) / j.at("mask").get<std::string>())
                            .string());
      m3b::MaskImage pred(png.h, png.w);
      for (size_t i = 0; i < png.px.size(); ++i)
        pred.px[i] = png.px[i] >= 128 ? 1 : 0;
      auto gt1mm = m3b::resample_mask_inplane(
          (*gt.masks)[size_t(z)], vol.volume.sy, vol.volume.sx);
      counts.push_back(m3b::confusion(pred, gt1mm));
    }
  }
  if (counts.empty()) throw std::runtime_error("no predictions to evaluate");
  auto report = m3b::aggregate(counts);
  m3b::write_metrics_json(report, out_path);
  std::printf("evaluate: mean DSC %.2f%% over %lld slices -> %s\n",
              report.dsc.mean, (long long)report.dsc.n, out_path.c_str());
  return 0;
}

int cmd_cross_validate(const std::string& data_dir, int folds, uint64_t seed,
                       const std::string& out_dir,
                       const m3b::TrainConfig& train_cfg, bool no_mm_block,
                       bool zero_wavelet, bool ablate) {
  require_exists(data_dir, "--data");
  fs::create_directories(out_dir);
  m3b::CrossValConfig cfg;
  cfg.folds = folds;
  cfg.seed = seed;
  cfg.train = train_cfg;
  cfg.work_dir = out_dir;

  std::vector<m3b::StageTwoVariant> variants;
  if (ablate) {
    variants = {{"full", true, false},
                {"no_mm_block", false, false},
                {"zero_wavelet", true, true}};
  } else {
    variants = {{no_mm_block ? (zero_wavelet ? "no_mm_zero_wavelet"
                                             : "no_mm_block")
                             : (zero_wavelet ? "zero_wavelet" : "full"),
                 !no_mm_block, zero_wavelet}};
  }

  auto results = m3b::cross_validate(data_dir, cfg, variants);
  m3b::write_cross_val_json(results,
                            (fs::path(out_dir) / "cv_report.json").string());
  for (const auto& r : results) {
    std::printf("%-18s per-slice DSC %.2f +- %.2f   per-case DSC %.2f +- %.2f\n",
                r.name.c_str(), r.per_slice.dsc.mean, r.per_slice.dsc.stddev,
                r.per_case.dsc.mean, r.per_case.dsc.stddev);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"m3bseg: dual-stage coarse-to-fine segmentation pipeline"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--config", g.config_path, "JSON config file")
      ->capture_default_str();
  app.add_option("--seed", g.seed, "master RNG seed")->capture_default_str();
  app.add_option("--threads", g.threads, "worker thread cap (0 = hardware)")
      ->capture_default_str();

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic phantom corpus");
  std::string gen_out = "corpus";
  int gen_cases = 40, gen_depth = 5, gen_h = 320, gen_w = 320;
  gen->add_option("--out", gen_out, "output corpus directory")
      ->capture_default_str();
  gen->add_option("--cases", gen_cases, "number of cases (>= 4)")
      ->capture_default_str();
  gen->add_option("--depth", gen_depth, "slices per case")
      ->capture_default_str();
  gen->add_option("--height", gen_h, "slice height")->capture_default_str();
  gen->add_option("--width", gen_w, "slice width")->capture_default_str();

  // preprocess
  auto* pre = app.add_subcommand("preprocess",
                                 "window, resample and contour-crop a corpus");
  std::string pre_data, pre_out = "preprocessed";
  pre->add_option("--data", pre_data, "corpus directory")->required();
  pre->add_option("--out", pre_out, "output directory")->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "train one pipeline stage");
  int tr_stage = 1;
  std::string tr_data, tr_out = "run", tr_roi;
  tr->add_option("--stage", tr_stage, "pipeline stage (1 or 2)")
      ->check(CLI::IsMember({1, 2}))
      ->capture_default_str();
  tr->add_option("--data", tr_data, "corpus directory")->required();
  tr->add_option("--out", tr_out, "output directory")->capture_default_str();
  tr->add_option("--stage1-roi", tr_roi,
                 "ROI manifest from extract-roi (stage 2 only)");

  // extract-roi
  auto* er = app.add_subcommand("extract-roi",
                                "run stage 1 and emit the ROI manifest");
  std::string er_data, er_ckpt, er_out = "roi_manifest.jsonl";
  er->add_option("--data", er_data, "corpus directory")->required();
  er->add_option("--ckpt", er_ckpt, "stage-1 checkpoint")->required();
  er->add_option("--out", er_out, "output manifest path")
      ->capture_default_str();

  // infer
  auto* inf = app.add_subcommand("infer", "run one stage over a corpus");
  int inf_stage = 1;
  std::string inf_data, inf_ckpt, inf_roi, inf_out = "infer_out";
  inf->add_option("--stage", inf_stage, "pipeline stage (1 or 2)")
      ->check(CLI::IsMember({1, 2}))
      ->capture_default_str();
  inf->add_option("--data", inf_data, "corpus directory")->required();
  inf->add_option("--ckpt", inf_ckpt, "stage checkpoint")->required();
  inf->add_option("--stage1-roi", inf_roi, "ROI manifest (stage 2 only)");
  inf->add_option("--out", inf_out, "output directory")
      ->capture_default_str();

  // pipeline
  auto* pl = app.add_subcommand("pipeline", "full dual-stage inference");
  std::string pl_data, pl_s1, pl_s2, pl_out = "predictions";
  bool pl_zero_wavelet = false;
  pl->add_option("--data", pl_data, "corpus directory")->required();
  pl->add_option("--stage1-ckpt", pl_s1, "stage-1 checkpoint")->required();
  pl->add_option("--stage2-ckpt", pl_s2, "stage-2 checkpoint")->required();
  pl->add_option("--out", pl_out, "prediction directory")
      ->capture_default_str();
  pl->add_flag("--zero-wavelet", pl_zero_wavelet,
               "blank the wavelet channels (ablation)");

  // evaluate
  auto* ev = app.add_subcommand("evaluate",
                                "score prediction PNGs against ground truth");
  std::string ev_pred, ev_data, ev_out = "report.json";
  ev->add_option("--pred", ev_pred, "prediction directory")->required();
  ev->add_option("--data", ev_data, "corpus directory")->required();
  ev->add_option("--out", ev_out, "report path")->capture_default_str();

  // cross-validate
  auto* cv = app.add_subcommand("cross-validate",
                                "patient-independent k-fold protocol");
  std::string cv_data, cv_out = "cv";
  int cv_folds = 4;
  bool cv_no_mm = false, cv_zero_wavelet = false, cv_ablate = false;
  cv->add_option("--data", cv_data, "corpus directory")->required();
  cv->add_option("--folds", cv_folds, "fold count")->capture_default_str();
  cv->add_option("--out", cv_out, "work directory")->capture_default_str();
  cv->add_flag("--no-mm-block", cv_no_mm, "plain decoder (ablation)");
  cv->add_flag("--zero-wavelet", cv_zero_wavelet,
               "blank wavelet channels (ablation)");
  cv->add_flag("--ablate", cv_ablate,
               "run full, no-mm-block and zero-wavelet variants");

  CLI11_PARSE(app, argc, argv);

  try {
    if (g.threads > 0) m3b::set_num_threads(g.threads);
    const m3b::TrainConfig train_cfg = load_train_config(g.config_path);

    if (gen->parsed())
      return cmd_gen_data(gen_out, gen_cases, g.seed, gen_depth, gen_h, gen_w);
    if (pre->parsed()) return cmd_preprocess(pre_data, pre_out);
    if (tr->parsed())
      return cmd_train(tr_stage, tr_data, tr_out, tr_roi, train_cfg, g.seed);
    if (er->parsed()) return cmd_extract_roi(er_data, er_ckpt, er_out);
    if (inf->parsed())
      return cmd_infer(inf_stage, inf_data, inf_ckpt, inf_roi, inf_out);
    if (pl->parsed())
      return cmd_pipeline(pl_data, pl_s1, pl_s2, pl_out, pl_zero_wavelet);
    if (ev->parsed()) return cmd_evaluate(ev_pred, ev_data, ev_out);
    if (cv->parsed())
      return cmd_cross_validate(cv_data, cv_folds, g.seed, cv_out, train_cfg,
                                cv_no_mm, cv_zero_wavelet, cv_ablate);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  std::fprintf(stderr, "error: no subcommand\n");
  return 2;
}
