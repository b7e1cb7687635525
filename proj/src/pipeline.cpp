#include "lungcad/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <numeric>
#include <ostream>
#include <set>

#include "lungcad/nvol.hpp"
#include "lungcad/svm.hpp"

namespace lungcad {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kVersion = "1.0.0";

void log_line(const PipelineConfig& cfg, const std::string& msg) {
  if (cfg.log) *cfg.log << msg << std::endl;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_json(const fs::path& p, const json& j) {
  fs::create_directories(p.parent_path());
  write_text_file(p, j.dump(2) + "\n");
}

json read_json(const fs::path& p) {
  if (!fs::exists(p)) throw IoError("missing input " + p.string());
  return json::parse(read_text_file(p));
}

void write_provenance(const PipelineConfig& cfg, const std::string& command, const json& outputs) {
  json rec = {{"command", command},
              {"version", kVersion},
              {"config_hash", hex64(hash_string(cfg.values.dump()))},
              {"seed", cfg.seed()},
              {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                            std::to_string(EIGEN_MINOR_VERSION)},
              {"outputs", outputs}};
  write_json(cfg.path("provenance") / (command + ".json"), rec);
}

std::string num(double v) { return format_number(v); }

// ---------------------------------------------------------------------------
// Corpus access

struct CorpusScan {
  std::string scan_id;
  NoduleLabel label = NoduleLabel::Unlabeled;
  std::map<std::string, std::string> views;
  json zero_regions = json::array();
};

struct Corpus {
  fs::path root;
  std::vector<CorpusScan> scans;
  std::map<std::string, std::vector<NoduleAnnotation>> annotations;
  std::map<std::string, std::vector<WorldPoint>> candidates;
};

Corpus load_corpus(const PipelineConfig& cfg) {
  Corpus c;
  c.root = cfg.path("corpus");
  const json m = read_json(c.root / "manifest.json");
  for (const auto& s : m.at("scans")) {
    CorpusScan cs;
    cs.scan_id = s.at("scan_id").get<std::string>();
    cs.label = nodule_label_from_string(s.value("label", std::string("unlabeled")));
    for (const auto& [k, v] : s.at("views").items()) cs.views[k] = v.get<std::string>();
    if (s.contains("zero_regions")) cs.zero_regions = s["zero_regions"];
    c.scans.push_back(std::move(cs));
  }
  for (auto& a : read_annotations_csv(c.root / m.value("annotations", std::string("annotations.csv"))))
    c.annotations[a.scan_id].push_back(a);
  const fs::path cand = c.root / m.value("candidates", std::string("candidates.csv"));
  if (fs::exists(cand))
    for (const auto& k : read_candidates_csv(cand)) c.candidates[k.scan_id].push_back(k.center);
  return c;
}

std::vector<NoduleAnnotation> annotations_of(const Corpus& c, const std::string& id) {
  const auto it = c.annotations.find(id);
  return it == c.annotations.end() ? std::vector<NoduleAnnotation>{} : it->second;
}

std::vector<std::size_t> detection_split(const PipelineConfig& cfg, const Corpus& c, bool train) {
  const auto n_train = std::min<std::size_t>(c.scans.size(), cfg.at("/detection/train_scans").get<std::size_t>());
  std::vector<std::size_t> out;
  for (std::size_t i = train ? 0 : n_train; i < (train ? n_train : c.scans.size()); ++i) out.push_back(i);
  return out;
}

fs::path preprocessed_dir(const PipelineConfig& cfg, const std::string& id) { return cfg.path("preprocessed") / id; }

// Luminance and lung mask of one view as written by the preprocess stage.
ScanData load_scan(const PipelineConfig& cfg, const Corpus& c, std::size_t i, const std::string& view = "conventional") {
  const CorpusScan& cs = c.scans.at(i);
  const fs::path dir = preprocessed_dir(cfg, cs.scan_id);
  if (!fs::exists(dir / (view + ".json")))
    throw IoError("missing preprocessed view '" + view + "' for " + cs.scan_id + "; run preprocess first");
  ScanData s;
  s.scan_id = cs.scan_id;
  s.luminance = read_nvol(dir / view).volume;
  s.lung = read_mask(dir / "lung");
  s.annotations = annotations_of(c, cs.scan_id);
  if (const auto it = c.candidates.find(cs.scan_id); it != c.candidates.end()) s.candidates = it->second;
  return s;
}

std::vector<ScanData> load_scans(const PipelineConfig& cfg, const Corpus& c, const std::vector<std::size_t>& idx,
                                 const std::string& view = "conventional") {
  std::vector<ScanData> out(idx.size());
  parallel_for(Index(idx.size()), [&](Index k) { out[std::size_t(k)] = load_scan(cfg, c, idx[std::size_t(k)], view); });
  return out;
}

Architecture network_arch(const PipelineConfig& cfg, ScaleTag scale, ModelMode mode) {
  const json& n = cfg.at("/network");
  const Index div = n.at("width_divisor").get<Index>();
  Architecture a = scale == ScaleTag::Large64 ? Architecture::large_scale(div, mode) : Architecture::small_scale(div, mode);
  a.convs_per_group = n.at("convs_per_group").get<std::vector<int>>();
  a.dense_units = n.at("dense_units").get<Index>();
  a.dropout = n.at("dropout").get<double>();
  a.dropout_before_activation = n.at("dropout_before_activation").get<bool>();
  return a;
}

fs::path detector_path(const PipelineConfig& cfg, ScaleTag s) {
  return cfg.path("models") / ("detector_" + to_string(s) + ".ncad");
}

std::vector<ScaleTag> configured_scales(const PipelineConfig& cfg) {
  std::vector<ScaleTag> out;
  for (const auto& s : cfg.at("/detection/scales")) out.push_back(scale_tag_from_string(s.get<std::string>()));
  if (out.empty()) throw InvalidArgument("detection.scales is empty");
  return out;
}

std::vector<View> parse_views(const json& j) {
  std::vector<View> out;
  for (const auto& v : j) out.push_back(view_from_string(v.get<std::string>()));
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

json default_config() {
  json mix = json::object();
  mix["benign"] = 20;
  mix["benign_multinodular"] = 20;
  mix["primary_lung"] = 30;
  mix["melanoma"] = 15;
  mix["colorectal"] = 15;
  return {
      {"seed", 42},
      {"paths",
       {{"corpus", "corpus"},
        {"preprocessed", "preprocessed"},
        {"models", "models"},
        {"detections", "detections"},
        {"froc", "froc"},
        {"regression", "regression"},
        {"regressor_model", "models/regressor.ncad"},
        {"features", "features"},
        {"classify", "classify"},
        {"stats", "stats"},
        {"provenance", "provenance"}}},
      {"phantom", {{"kind", "spectral"}, {"n_scans", 100}, {"mix", mix}, {"spec", json::object()}}},
      {"preprocess",
       {{"target_spacing_mm", {1.0, 1.0, 2.0}},
        {"threshold_hu", -320.0},
        {"close_radius_mm", 3.0},
        {"dilate_radius_mm", 10.0}}},
      {"network",
       {{"width_divisor", 8},
        {"convs_per_group", {1, 1, 2, 2}},
        {"dense_units", 64},
        {"dropout", 0.5},
        {"dropout_before_activation", false}}},
      {"detection",
       {{"scales", {"small32", "large64"}},
        {"train_scans", 80},
        {"steps", {{"small32", 1000}, {"large64", 1000}}},
        {"batch_size", {{"small32", 40}, {"large64", 10}}},
        {"lr", 1e-4},
        {"lr_final_fraction", 1.0},
        {"n_random", 20},
        {"n_candidate", 40},
        {"cell_mm", 8.0},
        {"inference_batch", 32},
        {"hard_negative",
         {{"enabled", true}, {"threshold", 0.5}, {"max_per_scan", 10}, {"scans", -1}, {"steps_fraction", 0.5}}}}},
      {"froc", {{"max_levels", 512}, {"rates", {0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0}}}},
      {"regression",
       {{"steps", 2000},
        {"batch_size", 32},
        {"lr", 1e-4},
        {"lr_final_fraction", 1.0},
        {"folds", 10},
        {"flips", true},
        {"max_rotation_deg", 180.0},
        {"scale_min", 0.8},
        {"scale_max", 1.2}}},
      {"features", {{"views", {"conventional", "low_kev", "high_kev"}}}},
      {"classify",
       {{"runs",
         {{{"name", "conventional"}, {"views", {"conventional"}}},
          {{"name", "spectral"}, {"views", {"conventional", "low_kev", "high_kev"}}}}},
        {"aggregation", "max"},
        {"method", "elementwise"},
        {"class_mode", "three"},
        {"levels", {"scan", "nodule"}},
        {"folds", 10},
        {"c_grid", kDefaultCGrid}}},
      {"stats", {{"n_perm", 1000}, {"level", "scan"}, {"compare", {"conventional", "spectral"}}}},
  };
}

PipelineConfig PipelineConfig::from_json(const json& user, const fs::path& out_dir) {
  PipelineConfig c;
  c.values = default_config();
  c.values.merge_patch(user);
  // A class mix is a whole recipe, not a patch of the default one.
  const json::json_pointer mix("/phantom/mix");
  if (user.contains(mix)) c.values[mix] = user[mix];
  c.out_dir = out_dir;
  return c;
}

const json& PipelineConfig::at(const std::string& pointer) const {
  try {
    return values.at(json::json_pointer(pointer));
  } catch (const json::exception&) {
    throw InvalidArgument("configuration has no value at " + pointer);
  }
}

fs::path PipelineConfig::path(const std::string& name) const {
  const fs::path p = at("/paths/" + name).get<std::string>();
  return p.is_absolute() ? p : out_dir / p;
}

std::uint64_t PipelineConfig::seed() const { return at("/seed").get<std::uint64_t>(); }

// ---------------------------------------------------------------------------
// phantom

json cmd_phantom(const PipelineConfig& cfg) {
  const json& ph = cfg.at("/phantom");
  const std::string kind = ph.at("kind").get<std::string>();
  PhantomSpec base;
  ClassMix mix;
  if (kind == "detection") {
    base = PhantomSpec::detection_default();
    mix = {{NoduleLabel::Unlabeled, ph.at("n_scans").get<int>()}};
  } else if (kind == "spectral") {
    base = PhantomSpec::spectral_default();
    for (const auto& [name, n] : ph.at("mix").items()) mix.push_back({nodule_label_from_string(name), n.get<int>()});
  } else {
    throw InvalidArgument("phantom.kind must be 'detection' or 'spectral'");
  }
  json spec_json = base.to_json();
  spec_json.merge_patch(ph.at("spec"));
  const PhantomSpec spec = PhantomSpec::from_json(spec_json);
  const fs::path root = cfg.path("corpus");
  log_line(cfg, "phantom: generating " + kind + " corpus in " + root.string());
  const json manifest = generate_corpus(spec, mix, cfg.seed(), root);
  json summary = {{"kind", kind}, {"scans", manifest["scans"].size()}, {"corpus", root.string()}};
  write_provenance(cfg, "phantom", {root / "manifest.json"});
  return summary;
}

// ---------------------------------------------------------------------------
// preprocess

json cmd_preprocess(const PipelineConfig& cfg) {
  const Corpus c = load_corpus(cfg);
  const json& p = cfg.at("/preprocess");
  LungMaskParams mp;
  mp.threshold_hu = p.at("threshold_hu").get<double>();
  mp.close_radius_mm = p.at("close_radius_mm").get<double>();
  mp.dilate_radius_mm = p.at("dilate_radius_mm").get<double>();
  const auto ts = p.at("target_spacing_mm").get<std::vector<double>>();
  if (ts.size() != 3) throw InvalidArgument("preprocess.target_spacing_mm needs three values");
  const Vec3 target{ts[0], ts[1], ts[2]};

  auto load_hu = [&](const CorpusScan& cs, const std::string& view) {
    NvolFile f = read_nvol(c.root / cs.views.at(view));
    for (const auto& r : cs.zero_regions) {
      const auto lo = r.at("lo").get<std::vector<Index>>(), hi = r.at("hi").get<std::vector<Index>>();
      for (Index z = std::max<Index>(0, lo[2]); z <= std::min(hi[2], f.volume.grid.dims[2] - 1); ++z)
        for (Index y = std::max<Index>(0, lo[1]); y <= std::min(hi[1], f.volume.grid.dims[1] - 1); ++y)
          for (Index x = std::max<Index>(0, lo[0]); x <= std::min(hi[0], f.volume.grid.dims[0] - 1); ++x)
            f.volume(x, y, z) = 0.0f;
    }
    VolumeF hu = f.volume.unit == Unit::RawDetector
                     ? hu_from_raw(f.volume, f.header.value("rescale_slope", 1.0), f.header.value("rescale_intercept", 0.0))
                     : f.volume;
    if (hu.grid.spacing_mm != target) hu = resample(hu, target);
    return hu;
  };

  json scans = json::array();
  std::vector<json> rows(c.scans.size());
  for (std::size_t i = 0; i < c.scans.size(); ++i) {
    const CorpusScan& cs = c.scans[i];
    const fs::path dir = preprocessed_dir(cfg, cs.scan_id);
    fs::create_directories(dir);
    const VolumeF hu = load_hu(cs, "conventional");
    const LungMasks m = extract_lung_mask(hu, mp);
    write_mask(dir / "lung", m.lung);
    for (const auto& [view, rel] : cs.views) {
      const VolumeF v = view == "conventional" ? hu : load_hu(cs, view);
      write_nvol(dir / view, apply_mask_normalize(clip_and_rescale(v), m.lung, m.ring));
    }
    scans.push_back({{"scan_id", cs.scan_id}, {"lung_voxels", m.lung.count()}});
    log_line(cfg, "preprocess: " + cs.scan_id);
  }
  json summary = {{"scans", scans}, {"target_spacing_mm", ts}};
  write_json(cfg.path("preprocessed") / "summary.json", summary);
  write_provenance(cfg, "preprocess", {cfg.path("preprocessed")});
  return summary;
}

// ---------------------------------------------------------------------------
// train-detector

json cmd_train_detector(const PipelineConfig& cfg) {
  const Corpus c = load_corpus(cfg);
  const auto train_idx = detection_split(cfg, c, true);
  if (train_idx.empty()) throw InvalidArgument("no training scans for the detector");
  const std::vector<ScanData> scans = load_scans(cfg, c, train_idx);
  const json& d = cfg.at("/detection");
  const json& hn = d.at("hard_negative");
  NegativeOptions neg;
  neg.n_random = d.at("n_random").get<int>();
  neg.n_candidate = d.at("n_candidate").get<int>();
  SlidingWindowOptions sw;
  sw.cell_mm = d.at("cell_mm").get<double>();
  sw.batch_size = d.at("inference_batch").get<Index>();

  json summary = json::object();
  fs::create_directories(cfg.path("models"));
  json outputs = json::array();
  for (ScaleTag scale : configured_scales(cfg)) {
    const std::string tag = to_string(scale);
    const std::uint64_t scale_seed = mix_seed(cfg.seed(), hash_string("detector/" + tag));
    ModelParams<float> model = init_model<float>(network_arch(cfg, scale, ModelMode::Detector), scale_seed);
    DetectorPools pools = build_detector_pools(scans, scale_patch_mm(scale), neg, mix_seed(scale_seed, 1));
    for (const auto& w : pools.report.warnings) log_line(cfg, "train-detector: warning: " + w);

    std::vector<std::vector<std::string>> loss_rows;
    TrainOptions o;
    o.steps = d.at("steps").at(tag).get<Index>();
    o.batch_size = d.at("batch_size").at(tag).get<Index>();
    o.lr = d.at("lr").is_object() ? d.at("lr").at(tag).get<double>() : d.at("lr").get<double>();
    o.lr_final_fraction = d.at("lr_final_fraction").get<double>();
    o.seed = mix_seed(scale_seed, 2);
    std::string phase = "initial";
    o.on_step = [&](Index step, double loss) {
      loss_rows.push_back({phase, std::to_string(step), num(loss)});
      if ((step + 1) % 50 == 0) log_line(cfg, "train-detector: " + tag + " " + phase + " step " + std::to_string(step + 1));
    };
    train_detector(model, scans, pools, o);

    Index hard = 0;
    if (hn.at("enabled").get<bool>()) {
      const int limit = hn.at("scans").get<int>();
      const std::size_t n_mine = limit < 0 ? scans.size() : std::min(scans.size(), std::size_t(limit));
      for (std::size_t i = 0; i < n_mine; ++i) {
        const ProbabilityMap pm = sliding_window_predict(model, scans[i].luminance, scans[i].lung, scale, sw);
        for (const auto& w : hard_negative_centers(pm, scans[i].annotations, hn.at("threshold").get<double>(),
                                                   hn.at("max_per_scan").get<std::size_t>())) {
          pools.negatives.push_back({i, w, Provenance::HardNegative, {}});
          ++hard;
        }
      }
      log_line(cfg, "train-detector: " + tag + " mined " + std::to_string(hard) + " hard negatives");
      phase = "hard_negative";
      o.steps = std::max<Index>(1, Index(double(o.steps) * hn.at("steps_fraction").get<double>()));
      o.seed = mix_seed(scale_seed, 3);
      train_detector(model, scans, pools, o);
    }
    save_model(model, detector_path(cfg, scale));
    const fs::path loss_csv = cfg.path("models") / ("detector_" + tag + "_loss.csv");
    write_csv(loss_csv, {"phase", "step", "loss"}, loss_rows);
    outputs.push_back(detector_path(cfg, scale));
    outputs.push_back(loss_csv);

    double tail = 0.0;
    const std::size_t n_tail = std::min<std::size_t>(20, loss_rows.size());
    for (std::size_t k = loss_rows.size() - n_tail; k < loss_rows.size(); ++k) tail += parse_number(loss_rows[k][2]);
    summary[tag] = {{"positives", pools.positives.size()},
                    {"negatives", pools.negatives.size() - std::size_t(hard)},
                    {"hard_negatives", hard},
                    {"steps", loss_rows.size()},
                    {"final_loss", n_tail ? tail / double(n_tail) : 0.0},
                    {"shortfall", pools.report.shortfall}};
  }
  write_json(cfg.path("models") / "detector_summary.json", summary);
  write_provenance(cfg, "train-detector", outputs);
  return summary;
}

// ---------------------------------------------------------------------------
// detect

json cmd_detect(const PipelineConfig& cfg) {
  const Corpus c = load_corpus(cfg);
  const auto eval_idx = detection_split(cfg, c, false);
  const auto scales = configured_scales(cfg);
  std::vector<ModelParams<float>> models;
  for (ScaleTag s : scales) {
    if (!fs::exists(detector_path(cfg, s))) throw IoError("missing model " + detector_path(cfg, s).string());
    models.push_back(load_model(detector_path(cfg, s), ModelMode::Detector));
  }
  SlidingWindowOptions sw;
  sw.cell_mm = cfg.at("/detection/cell_mm").get<double>();
  sw.batch_size = cfg.at("/detection/inference_batch").get<Index>();
  json scans = json::array();
  for (std::size_t i : eval_idx) {
    const ScanData s = load_scan(cfg, c, i);
    const fs::path dir = cfg.path("detections") / s.scan_id;
    fs::create_directories(dir);
    std::vector<ProbabilityMap> maps;
    for (std::size_t k = 0; k < scales.size(); ++k) {
      maps.push_back(sliding_window_predict(models[k], s.luminance, s.lung, scales[k], sw));
      write_probability_map(dir / to_string(scales[k]), maps.back());
    }
    if (maps.size() > 1) write_probability_map(dir / to_string(ScaleTag::Fused), fuse_scales(maps));
    scans.push_back(s.scan_id);
    log_line(cfg, "detect: " + s.scan_id);
  }
  json tags = json::array();
  for (ScaleTag s : scales) tags.push_back(to_string(s));
  if (scales.size() > 1) tags.push_back(to_string(ScaleTag::Fused));
  json summary = {{"scans", scans}, {"maps", tags}};
  write_json(cfg.path("detections") / "summary.json", summary);
  write_provenance(cfg, "detect", {cfg.path("detections")});
  return summary;
}

// ---------------------------------------------------------------------------
// froc

json cmd_froc(const PipelineConfig& cfg) {
  const Corpus c = load_corpus(cfg);
  const json det = read_json(cfg.path("detections") / "summary.json");
  std::vector<std::vector<NoduleAnnotation>> anns;
  std::vector<std::string> ids;
  for (const auto& s : det.at("scans")) {
    ids.push_back(s.get<std::string>());
    anns.push_back(annotations_of(c, ids.back()));
  }
  const auto rates = cfg.at("/froc/rates").get<std::vector<double>>();
  json summary = json::object();
  json outputs = json::array();
  for (const auto& tag_j : det.at("maps")) {
    const std::string tag = tag_j.get<std::string>();
    std::vector<ProbabilityMap> maps;
    for (const auto& id : ids) maps.push_back(read_probability_map(cfg.path("detections") / id / tag));
    const FrocCurve curve = froc_curve(maps, anns, default_thresholds(maps, cfg.at("/froc/max_levels").get<std::size_t>()));
    std::vector<std::vector<std::string>> rows;
    bool monotone = true;
    for (std::size_t k = 0; k < curve.points.size(); ++k) {
      const auto& p = curve.points[k];
      rows.push_back({num(p.threshold), num(p.fp_per_scan), num(p.sensitivity), num(p.raw_fp_per_scan)});
      if (k > 0) {
        const auto& q = curve.points[k - 1];
        monotone = monotone && p.sensitivity >= q.sensitivity && p.fp_per_scan >= q.fp_per_scan;
      }
    }
    const fs::path csv = cfg.path("froc") / ("froc_" + tag + ".csv");
    fs::create_directories(csv.parent_path());
    write_csv(csv, {"threshold", "fp_per_scan", "sensitivity", "raw_fp_per_scan"}, rows);
    outputs.push_back(csv);
    json at = json::object();
    double sum = 0.0;
    for (double r : rates) {
      const double s = sensitivity_at(curve, r);
      at[num(r)] = s;
      sum += s;
    }
    summary[tag] = {{"n_scans", curve.n_scans},
                    {"n_nodules", curve.n_nodules},
                    {"sensitivity_at", at},
                    {"average_sensitivity", sum / double(rates.size())},
                    {"monotone", monotone}};
  }
  write_json(cfg.path("froc") / "summary.json", summary);
  outputs.push_back(cfg.path("froc") / "summary.json");
  write_provenance(cfg, "froc", outputs);
  return summary;
}

// ---------------------------------------------------------------------------
// train-regressor

namespace {

TrainOptions regression_train_options(const PipelineConfig& cfg, std::uint64_t seed) {
  TrainOptions o;
  o.steps = cfg.at("/regression/steps").get<Index>();
  o.batch_size = cfg.at("/regression/batch_size").get<Index>();
  o.lr = cfg.at("/regression/lr").get<double>();
  o.lr_final_fraction = cfg.at("/regression/lr_final_fraction").get<double>();
  o.seed = seed;
  return o;
}

RegressionOptions regression_aug(const PipelineConfig& cfg) {
  RegressionOptions r;
  r.flips = cfg.at("/regression/flips").get<bool>();
  r.max_rotation_deg = cfg.at("/regression/max_rotation_deg").get<double>();
  r.scale_min = cfg.at("/regression/scale_min").get<double>();
  r.scale_max = cfg.at("/regression/scale_max").get<double>();
  return r;
}

}  // namespace

json cmd_train_regressor(const PipelineConfig& cfg) {
  const Corpus c = load_corpus(cfg);
  std::vector<std::size_t> all(c.scans.size());
  std::iota(all.begin(), all.end(), std::size_t(0));
  const std::vector<ScanData> scans = load_scans(cfg, c, all);
  std::vector<std::string> ids;
  std::vector<int> labels;
  for (const auto& cs : c.scans) {
    ids.push_back(cs.scan_id);
    labels.push_back(int(cs.label));
  }
  const int k = cfg.at("/regression/folds").get<int>();
  const std::uint64_t seed = mix_seed(cfg.seed(), hash_string("regressor"));
  const FoldPlan plan = kfold_splits(ids, labels, k, mix_seed(seed, 1));
  const Architecture arch = network_arch(cfg, ScaleTag::Small32, ModelMode::Regressor);
  const RegressionOptions aug = regression_aug(cfg);

  const std::vector<PatchRef> refs_all = regression_refs(scans, all);
  if (refs_all.empty()) throw InvalidArgument("corpus has no nodules with a malignancy score");
  std::vector<double> pred(refs_all.size(), 0.0), truth(refs_all.size());
  std::vector<int> ref_fold(refs_all.size());
  for (std::size_t r = 0; r < refs_all.size(); ++r) {
    truth[r] = *refs_all[r].nodule.malignancy;
    ref_fold[r] = plan.fold[refs_all[r].scan];
  }
  json folds = json::array();
  for (int f = 0; f < k; ++f) {
    std::vector<std::size_t> train_scans, test_scans;
    for (std::size_t i = 0; i < all.size(); ++i) (plan.fold[i] == f ? test_scans : train_scans).push_back(i);
    const auto train_refs = regression_refs(scans, train_scans);
    const auto test_refs = regression_refs(scans, test_scans);
    if (test_refs.empty() || train_refs.empty()) continue;
    ModelParams<float> m = init_model<float>(arch, mix_seed(seed, 100 + std::uint64_t(f)));
    train_regressor(m, scans, train_refs, regression_train_options(cfg, mix_seed(seed, 200 + std::uint64_t(f))), aug);
    const auto p = predict_patches(m, scans, test_refs);
    std::vector<double> ft;
    std::size_t q = 0;
    for (std::size_t r = 0; r < refs_all.size(); ++r)
      if (ref_fold[r] == f) {
        pred[r] = p[q++];
        ft.push_back(truth[r]);
      }
    folds.push_back({{"fold", f}, {"n", p.size()}, {"mae", mae(p, ft)}, {"one_off", one_off_accuracy(p, ft)}});
    log_line(cfg, "train-regressor: fold " + std::to_string(f + 1) + "/" + std::to_string(k));
  }

  std::vector<std::vector<std::string>> rows;
  std::map<std::string, Index> per_scan;
  for (std::size_t r = 0; r < refs_all.size(); ++r) {
    const std::string& id = scans[refs_all[r].scan].scan_id;
    rows.push_back({id, std::to_string(per_scan[id]++), std::to_string(ref_fold[r]), num(truth[r]), num(pred[r])});
  }
  fs::create_directories(cfg.path("regression"));
  write_csv(cfg.path("regression") / "predictions.csv", {"scan_id", "nodule_index", "fold", "truth", "prediction"}, rows);

  ModelParams<float> final_model = init_model<float>(arch, mix_seed(seed, 2));
  train_regressor(final_model, scans, refs_all, regression_train_options(cfg, mix_seed(seed, 3)), aug);
  fs::create_directories(cfg.path("regressor_model").parent_path());
  save_model(final_model, cfg.path("regressor_model"));

  json summary = {{"n_nodules", refs_all.size()},
                  {"folds", folds},
                  {"mae", mae(pred, truth)},
                  {"one_off", one_off_accuracy(pred, truth)}};
  write_json(cfg.path("regression") / "report.json", summary);
  write_provenance(cfg, "train-regressor",
                   {cfg.path("regression") / "predictions.csv", cfg.path("regression") / "report.json",
                    cfg.path("regressor_model")});
  return summary;
}

// ---------------------------------------------------------------------------
// extract-features

json cmd_extract_features(const PipelineConfig& cfg) {
  const Corpus c = load_corpus(cfg);
  const fs::path model_path = cfg.path("regressor_model");
  if (!fs::exists(model_path)) throw IoError("missing model " + model_path.string() + "; run train-regressor first");
  const ModelParams<float> model = load_model(model_path, ModelMode::Regressor);
  json summary = json::object();
  json outputs = json::array();
  for (View view : parse_views(cfg.at("/features/views"))) {
    const std::string vname = to_string(view);
    FeatureTable t;
    t.views = {view};
    std::vector<FeatureVector> feats;
    for (std::size_t i = 0; i < c.scans.size(); ++i) {
      if (!c.scans[i].views.count(vname)) throw IoError("scan " + c.scans[i].scan_id + " has no " + vname + " view");
      const ScanData s = load_scan(cfg, c, i, vname);
      const Vec3 patch_mm{double(model.arch.input[0]) * s.luminance.grid.spacing_mm[0],
                          double(model.arch.input[1]) * s.luminance.grid.spacing_mm[1],
                          double(model.arch.input[2]) * s.luminance.grid.spacing_mm[2]};
      std::vector<Tensor<float>> patches;
      Index k = 0;
      for (const auto& a : s.annotations) {
        if (a.relevance != Relevance::Relevant) continue;
        patches.push_back(crop_patch(s.luminance, a.center, patch_mm));
        t.rows.push_back({s.scan_id, k++, int(c.scans[i].label)});
      }
      for (auto& f : extract_features(model, patches, view)) feats.push_back(std::move(f));
    }
    const Index dims = feats.empty() ? 0 : Index(feats.front().values.size());
    t.values.resize(Index(feats.size()), dims);
    for (std::size_t r = 0; r < feats.size(); ++r) t.values.row(Index(r)) = feats[r].values.cast<float>().transpose();
    const fs::path out = cfg.path("features") / (vname + ".nfeat");
    fs::create_directories(out.parent_path());
    write_feature_table(out, t);
    outputs.push_back(out);
    summary[vname] = {{"rows", t.rows.size()}, {"dims", dims}};
    log_line(cfg, "extract-features: " + vname);
  }
  write_json(cfg.path("features") / "summary.json", summary);
  write_provenance(cfg, "extract-features", outputs);
  return summary;
}

// ---------------------------------------------------------------------------
// classification

ClassMode class_mode_from_string(const std::string& s) {
  if (s == "two") return ClassMode::Two;
  if (s == "three") return ClassMode::Three;
  if (s == "four") return ClassMode::Four;
  throw InvalidArgument("class mode must be 'two', 'three' or 'four', got '" + s + "'");
}

int fold_label(NoduleLabel l, ClassMode mode) {
  switch (l) {
    case NoduleLabel::Benign:
    case NoduleLabel::BenignMultinodular:
      return 0;
    case NoduleLabel::PrimaryLung:
      return 1;
    case NoduleLabel::Melanoma:
      return mode == ClassMode::Two ? 1 : 2;
    case NoduleLabel::Colorectal:
      return mode == ClassMode::Two ? 1 : mode == ClassMode::Three ? 2 : 3;
    case NoduleLabel::Unlabeled:
      break;
  }
  throw InvalidArgument("scan has no diagnosis label");
}

std::vector<std::string> class_names(ClassMode mode) {
  if (mode == ClassMode::Two) return {"benign", "malignant"};
  if (mode == ClassMode::Four) return {"benign", "primary", "melanoma", "colorectal"};
  return {"benign", "primary", "metastases"};
}

ClassificationData load_classification_data(const PipelineConfig& cfg, const std::vector<View>& views, ClassMode mode) {
  if (views.empty()) throw InvalidArgument("a classification run needs at least one view");
  std::vector<FeatureTable> tables;
  for (View v : views) {
    const fs::path p = cfg.path("features") / (to_string(v) + ".nfeat");
    if (!fs::exists(p)) throw IoError("missing feature table " + p.string() + "; run extract-features first");
    tables.push_back(read_feature_table(p));
  }
  for (const auto& t : tables) {
    if (t.rows.size() != tables.front().rows.size()) throw InvalidArgument("feature tables disagree on nodule count");
    for (std::size_t r = 0; r < t.rows.size(); ++r)
      if (t.rows[r].scan_id != tables.front().rows[r].scan_id ||
          t.rows[r].nodule_index != tables.front().rows[r].nodule_index)
        throw InvalidArgument("feature tables disagree on nodule order");
  }
  ClassificationData d;
  for (View v : views) d.view_names.push_back(to_string(v));
  std::map<std::string, std::size_t> bag_of;
  for (std::size_t r = 0; r < tables.front().rows.size(); ++r) {
    const FeatureRow& row = tables.front().rows[r];
    std::vector<FeatureVector> per_view;
    for (std::size_t t = 0; t < tables.size(); ++t)
      per_view.push_back({tables[t].values.row(Index(r)).transpose().cast<double>(), tables[t].views});
    const FeatureVector fv = per_view.size() == 1 ? per_view.front() : concat_spectral(per_view);
    auto it = bag_of.find(row.scan_id);
    if (it == bag_of.end()) {
      it = bag_of.emplace(row.scan_id, d.bags.size()).first;
      d.bags.push_back({row.scan_id, {}, fold_label(NoduleLabel(row.label), mode)});
    }
    d.bags[it->second].vectors.push_back(normalize_unit(fv.values).values);
  }
  return d;
}

namespace {

struct Samples {
  std::vector<int> bag;  // owning bag per sample
  std::vector<Index> nodule;
  Eigen::MatrixXd X;  // element-wise representation; unused for distance bags
};

Samples build_samples(const ClassificationData& data, const ClassifierSettings& s) {
  Samples out;
  std::vector<Eigen::VectorXd> rows;
  for (std::size_t b = 0; b < data.bags.size(); ++b) {
    if (s.nodule_level) {
      for (std::size_t k = 0; k < data.bags[b].vectors.size(); ++k) {
        out.bag.push_back(int(b));
        out.nodule.push_back(Index(k));
        rows.push_back(data.bags[b].vectors[k]);
      }
    } else {
      out.bag.push_back(int(b));
      out.nodule.push_back(-1);
      if (!s.distance_bags) rows.push_back(normalize_unit(aggregate_elementwise(data.bags[b], s.aggregation)).values);
    }
  }
  if (!rows.empty()) {
    out.X.resize(Index(rows.size()), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) out.X.row(Index(i)) = rows[i].transpose();
  }
  return out;
}

// Per-fold train/test matrices of the dissimilarity representation: every bag
// is described by its distances to the training bags of that fold.
struct FoldMatrices {
  Eigen::MatrixXd train, test;
  std::vector<int> train_rows, test_rows;
};

FoldMatrices distance_fold(const ClassificationData& data, const std::vector<int>& fold, int f, Aggregation agg) {
  FoldMatrices m;
  std::vector<FeatureBag> protos, tests;
  for (std::size_t b = 0; b < data.bags.size(); ++b) {
    if (fold[b] == f) {
      m.test_rows.push_back(int(b));
      tests.push_back(data.bags[b]);
    } else {
      m.train_rows.push_back(int(b));
      protos.push_back(data.bags[b]);
    }
  }
  auto normalized = [](Eigen::MatrixXd D) {
    for (Index i = 0; i < D.rows(); ++i) D.row(i) = normalize_unit(D.row(i).transpose()).values.transpose();
    return D;
  };
  m.train = normalized(dissimilarity_matrix(protos, protos, agg));
  if (!tests.empty()) m.test = normalized(dissimilarity_matrix(tests, protos, agg));
  return m;
}

}  // namespace

ClassificationOutcome cross_validate(const ClassificationData& data, const ClassifierSettings& s,
                                     const std::vector<int>* labels) {
  if (data.bags.empty()) throw EmptySelection("no bags to classify");
  if (s.distance_bags && s.nodule_level) throw InvalidArgument("bag dissimilarity is a scan-level representation");
  if (s.c_grid.empty()) throw InvalidArgument("empty C grid");
  std::vector<std::string> ids;
  std::vector<int> true_labels, bag_label;
  for (const auto& b : data.bags) {
    ids.push_back(b.scan_id);
    true_labels.push_back(b.label);
  }
  bag_label = labels ? *labels : true_labels;
  if (bag_label.size() != data.bags.size()) throw InvalidArgument("label count does not match the bags");
  const FoldPlan plan = kfold_splits(ids, true_labels, s.folds, s.seed);

  const Samples sm = build_samples(data, s);
  const std::size_t n = sm.bag.size();
  std::vector<int> y(n), fold(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = bag_label[std::size_t(sm.bag[i])];
    fold[i] = plan.fold[std::size_t(sm.bag[i])];
  }
  std::set<int> class_set(true_labels.begin(), true_labels.end());
  class_set.insert(bag_label.begin(), bag_label.end());
  const std::vector<int> classes(class_set.begin(), class_set.end());

  ClassificationOutcome out;
  out.truth = y;
  out.fold = fold;
  out.predicted.assign(n, 0);
  out.decision_values.assign(n, Eigen::VectorXd());
  for (std::size_t i = 0; i < n; ++i) {
    out.sample_scan.push_back(data.bags[std::size_t(sm.bag[i])].scan_id);
    out.sample_nodule.push_back(sm.nodule[i]);
  }

  // Predictions of every sample for one C value.
  auto predict_all = [&](double C, std::vector<int>& pred, std::vector<Eigen::VectorXd>* dv) {
    pred.assign(n, 0);
    if (s.distance_bags) {
      for (int f = 0; f < s.folds; ++f) {
        const FoldMatrices m = distance_fold(data, fold, f, s.aggregation);
        if (m.test_rows.empty()) continue;
        std::vector<int> ytr;
        for (int r : m.train_rows) ytr.push_back(y[std::size_t(r)]);
        const SvmModel model = svm_train_ovr(m.train, ytr, C);
        for (std::size_t t = 0; t < m.test_rows.size(); ++t) {
          const Eigen::VectorXd x = m.test.row(Index(t)).transpose();
          pred[std::size_t(m.test_rows[t])] = svm_predict(model, x);
          if (dv) (*dv)[std::size_t(m.test_rows[t])] = model.decision_values(x);
        }
      }
      return;
    }
    for (int f = 0; f < s.folds; ++f) {
      std::vector<Index> tr, te;
      for (std::size_t i = 0; i < n; ++i) (fold[i] == f ? te : tr).push_back(Index(i));
      if (te.empty()) continue;
      std::vector<int> ytr;
      for (Index i : tr) ytr.push_back(y[std::size_t(i)]);
      const SvmModel model = svm_train_ovr(sm.X(tr, Eigen::all), ytr, C);
      for (Index i : te) {
        const Eigen::VectorXd x = sm.X.row(i).transpose();
        pred[std::size_t(i)] = svm_predict(model, x);
        if (dv) (*dv)[std::size_t(i)] = model.decision_values(x);
      }
    }
  };

  if (s.distance_bags) {
    // Mean per-fold F1-macro for each C; highest wins, ties go to the smaller C.
    std::vector<std::pair<double, double>> ranked;
    for (double C : s.c_grid) {
      std::vector<int> pred;
      predict_all(C, pred, nullptr);
      std::vector<double> f1s;
      for (int f = 0; f < s.folds; ++f) {
        std::vector<int> yt, yp;
        for (std::size_t i = 0; i < n; ++i)
          if (fold[i] == f) {
            yt.push_back(y[i]);
            yp.push_back(pred[i]);
          }
        if (!yt.empty()) f1s.push_back(f1_macro(confusion_matrix(yt, yp, classes)));
      }
      out.c_scores.push_back(mean_of(f1s));
      ranked.push_back({out.c_scores.back(), C});
    }
    out.C = ranked.front().second;
    double best = ranked.front().first;
    for (const auto& [score, C] : ranked)
      if (score > best || (score == best && C < out.C)) {
        best = score;
        out.C = C;
      }
  } else {
    out.C = select_C(sm.X, y, fold, s.folds, s.c_grid, &out.c_scores);
  }
  predict_all(out.C, out.predicted, &out.decision_values);

  for (int f = 0; f < s.folds; ++f) {
    std::vector<int> yt, yp;
    for (std::size_t i = 0; i < n; ++i)
      if (fold[i] == f) {
        yt.push_back(y[i]);
        yp.push_back(out.predicted[i]);
      }
    if (yt.empty()) continue;
    const ConfusionMatrix cm = confusion_matrix(yt, yp, classes);
    out.fold_accuracy.push_back(accuracy(cm));
    out.fold_f1.push_back(f1_macro(cm));
  }
  out.confusion = confusion_matrix(y, out.predicted, classes);
  out.accuracy = accuracy(out.confusion);
  out.f1 = f1_macro(out.confusion);
  return out;
}

namespace {

struct RunSpec {
  std::string name;
  std::vector<View> views;
};

std::vector<RunSpec> classify_runs(const PipelineConfig& cfg) {
  std::vector<RunSpec> out;
  for (const auto& r : cfg.at("/classify/runs")) out.push_back({r.at("name").get<std::string>(), parse_views(r.at("views"))});
  return out;
}

ClassifierSettings classifier_settings(const PipelineConfig& cfg, const std::string& level) {
  ClassifierSettings s;
  s.mode = class_mode_from_string(cfg.at("/classify/class_mode").get<std::string>());
  s.aggregation = aggregation_from_string(cfg.at("/classify/aggregation").get<std::string>());
  const std::string method = cfg.at("/classify/method").get<std::string>();
  if (method != "elementwise" && method != "distance")
    throw InvalidArgument("classify.method must be 'elementwise' or 'distance'");
  if (level != "scan" && level != "nodule") throw InvalidArgument("classification level must be 'scan' or 'nodule'");
  s.nodule_level = level == "nodule";
  s.distance_bags = method == "distance" && !s.nodule_level;
  s.folds = cfg.at("/classify/folds").get<int>();
  s.c_grid = cfg.at("/classify/c_grid").get<std::vector<double>>();
  s.seed = mix_seed(cfg.seed(), hash_string("folds"));
  return s;
}

}  // namespace

json cmd_classify(const PipelineConfig& cfg) {
  const ClassMode mode = class_mode_from_string(cfg.at("/classify/class_mode").get<std::string>());
  const auto names = class_names(mode);
  json summary = json::object();
  json outputs = json::array();
  for (const RunSpec& run : classify_runs(cfg)) {
    const ClassificationData data = load_classification_data(cfg, run.views, mode);
    json run_summary = json::object();
    for (const auto& level_j : cfg.at("/classify/levels")) {
      const std::string level = level_j.get<std::string>();
      const ClassificationOutcome o = cross_validate(data, classifier_settings(cfg, level));
      const fs::path dir = cfg.path("classify") / run.name / level;
      fs::create_directories(dir);
      std::vector<std::string> header{"scan_id", "nodule_index", "fold", "truth", "predicted"};
      for (const auto& c : names) header.push_back("decision_" + c);
      std::vector<std::vector<std::string>> rows;
      for (std::size_t i = 0; i < o.predicted.size(); ++i) {
        std::vector<std::string> row{o.sample_scan[i], std::to_string(o.sample_nodule[i]), std::to_string(o.fold[i]),
                                     names.at(std::size_t(o.truth[i])), names.at(std::size_t(o.predicted[i]))};
        for (std::size_t c = 0; c < names.size(); ++c)
          row.push_back(Index(c) < o.decision_values[i].size() ? num(o.decision_values[i][Index(c)]) : "");
        rows.push_back(std::move(row));
      }
      write_csv(dir / "predictions.csv", header, rows);
      std::vector<std::vector<std::string>> fold_rows;
      for (std::size_t f = 0; f < o.fold_accuracy.size(); ++f)
        fold_rows.push_back({std::to_string(f), num(o.fold_accuracy[f]), num(o.fold_f1[f])});
      write_csv(dir / "folds.csv", {"fold", "accuracy", "f1_macro"}, fold_rows);
      std::vector<std::string> cm_names;
      for (int c : o.confusion.classes) cm_names.push_back(names.at(std::size_t(c)));
      const json res = {{"views", data.view_names},
                        {"level", level},
                        {"samples", o.predicted.size()},
                        {"C", o.C},
                        {"c_scores", o.c_scores},
                        {"accuracy", o.accuracy},
                        {"f1_macro", o.f1},
                        {"fold_accuracy", o.fold_accuracy},
                        {"fold_f1_macro", o.fold_f1},
                        {"mean_fold_accuracy", mean_of(o.fold_accuracy)},
                        {"confusion", o.confusion.to_json(cm_names)}};
      write_json(dir / "summary.json", res);
      outputs.push_back(dir);
      run_summary[level] = res;
      log_line(cfg, "classify: " + run.name + " " + level + " accuracy " + num(o.accuracy));
    }
    summary[run.name] = run_summary;
  }
  write_json(cfg.path("classify") / "summary.json", summary);
  write_provenance(cfg, "classify", outputs);
  return summary;
}

json cmd_stats(const PipelineConfig& cfg) {
  const ClassMode mode = class_mode_from_string(cfg.at("/classify/class_mode").get<std::string>());
  const std::string level = cfg.at("/stats/level").get<std::string>();
  const int n_perm = cfg.at("/stats/n_perm").get<int>();
  const ClassifierSettings settings = classifier_settings(cfg, level);
  json summary = {{"level", level}, {"n_perm", n_perm}, {"runs", json::object()}};
  std::map<std::string, ClassificationOutcome> outcomes;
  for (const RunSpec& run : classify_runs(cfg)) {
    const ClassificationData data = load_classification_data(cfg, run.views, mode);
    const ClassificationOutcome o = cross_validate(data, settings);
    outcomes[run.name] = o;
    std::vector<int> bag_labels;
    for (const auto& b : data.bags) bag_labels.push_back(b.label);
    const std::uint64_t perm_seed = mix_seed(cfg.seed(), hash_string("permutation/" + run.name));
    double acc = 0.0, f1 = 0.0;
    const double p_acc = permutation_test(
        [&](const std::vector<int>& l) { return cross_validate(data, settings, &l).accuracy; }, bag_labels, n_perm,
        perm_seed, &acc);
    const double p_f1 = permutation_test(
        [&](const std::vector<int>& l) { return cross_validate(data, settings, &l).f1; }, bag_labels, n_perm,
        perm_seed, &f1);
    summary["runs"][run.name] = {{"accuracy", acc}, {"p_accuracy", p_acc}, {"f1_macro", f1}, {"p_f1_macro", p_f1}};
    log_line(cfg, "stats: " + run.name + " p(accuracy) " + num(p_acc) + " p(f1) " + num(p_f1));
  }
  const auto cmp = cfg.at("/stats/compare").get<std::vector<std::string>>();
  if (cmp.size() == 2 && outcomes.count(cmp[0]) && outcomes.count(cmp[1])) {
    const TTestResult t = paired_t_test(outcomes[cmp[0]].fold_accuracy, outcomes[cmp[1]].fold_accuracy);
    summary["paired_t_test"] = {{"a", cmp[0]},
                                {"b", cmp[1]},
                                {"metric", "fold_accuracy"},
                                {"mean_a", mean_of(outcomes[cmp[0]].fold_accuracy)},
                                {"mean_b", mean_of(outcomes[cmp[1]].fold_accuracy)},
                                {"t", t.t},
                                {"p", t.p},
                                {"dof", t.dof}};
  } else if (!cmp.empty()) {
    throw InvalidArgument("stats.compare must name two classification runs");
  }
  write_json(cfg.path("stats") / "stats.json", summary);
  write_provenance(cfg, "stats", {cfg.path("stats") / "stats.json"});
  return summary;
}

// ---------------------------------------------------------------------------

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"phantom", "preprocess",       "train-detector", "detect", "froc",
                                              "train-regressor", "extract-features", "classify", "stats"};
  return names;
}

json run_command(const std::string& name, const PipelineConfig& cfg) {
  if (name == "phantom") return cmd_phantom(cfg);
  if (name == "preprocess") return cmd_preprocess(cfg);
  if (name == "train-detector") return cmd_train_detector(cfg);
  if (name == "detect") return cmd_detect(cfg);
  if (name == "froc") return cmd_froc(cfg);
  if (name == "train-regressor") return cmd_train_regressor(cfg);
  if (name == "extract-features") return cmd_extract_features(cfg);
  if (name == "classify") return cmd_classify(cfg);
  if (name == "stats") return cmd_stats(cfg);
  throw InvalidArgument("unknown command '" + name + "'");
}

}  // namespace lungcad
