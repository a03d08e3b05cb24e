#include "dssl/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <sstream>

#include "dssl/checkpoint.hpp"

namespace dssl {

namespace fs = std::filesystem;

namespace {

Json synth_json(const SynthDocSpec& s) {
  return {{"width", s.width},
          {"height", s.height},
          {"min_tables", s.min_tables},
          {"max_tables", s.max_tables},
          {"min_text_blocks", s.min_text_blocks},
          {"max_text_blocks", s.max_text_blocks},
          {"confuser_prob", s.confuser_prob},
          {"noise", s.noise}};
}

Json data_json() {
  return {{"dir", ""}, {"count", std::size_t{300}}, {"seed", std::uint64_t{0}}, {"synth", synth_json({})}};
}

Json aug_json(const AugPolicy& a) {
  return {{"flip_p", a.flip_p},
          {"resize_p", a.resize_p},
          {"resize_min", a.resize_min},
          {"resize_max", a.resize_max},
          {"erase_p", a.erase_p},
          {"erase_max_patches", a.erase_max_patches},
          {"erase_max_area", a.erase_max_area},
          {"crop_p", a.crop_p},
          {"crop_min_side", a.crop_min_side},
          {"blur_p", a.blur_p},
          {"blur_sigma_min", a.blur_sigma_min},
          {"blur_sigma_max", a.blur_sigma_max},
          {"grayscale_p", a.grayscale_p},
          {"min_side", a.min_side}};
}

AugPolicy aug_from(const Json& j, AugPolicy a) {
  a.flip_p = j.at("flip_p");
  a.resize_p = j.at("resize_p");
  a.resize_min = j.at("resize_min");
  a.resize_max = j.at("resize_max");
  a.erase_p = j.at("erase_p");
  a.erase_max_patches = j.at("erase_max_patches");
  a.erase_max_area = j.at("erase_max_area");
  a.crop_p = j.at("crop_p");
  a.crop_min_side = j.at("crop_min_side");
  a.blur_p = j.at("blur_p");
  a.blur_sigma_min = j.at("blur_sigma_min");
  a.blur_sigma_max = j.at("blur_sigma_max");
  a.grayscale_p = j.at("grayscale_p");
  a.min_side = j.at("min_side");
  return a;
}

Json training_json() {
  const TrainConfig t;
  Json j;
  j["command"] = "train";
  j["seed"] = std::uint64_t{0};
  j["output_dir"] = "";
  j["data"] = data_json();
  j["labels"] = t.labeled_fraction;
  j["split_seed"] = std::uint64_t{0};
  j["mode"] = "semi";
  j["train"] = {{"tau", t.tau},
                {"epochs", t.epochs},
                {"steps_per_epoch", t.steps_per_epoch},
                {"lr", t.lr},
                {"lr_drop_fraction", t.lr_drop_fraction},
                {"batch_size", t.batch_size},
                {"unlabeled_batch_size", t.unlabeled_batch_size},
                {"burn_in_fraction", t.burn_in_fraction},
                {"ema_momentum", t.ema_momentum},
                {"grad_clip", t.grad_clip},
                {"deep_supervision", t.deep_supervision}};
  j["loss"] = {{"alpha_reg", t.loss.alpha_reg},
               {"alpha_cls", t.loss.alpha_cls},
               {"noobj_weight", t.loss.noobj_weight},
               {"l1", t.loss.box.l1},
               {"giou", t.loss.box.giou}};
  j["model"] = to_json(t.model);
  j["augment"] = {{"weak", aug_json(t.weak)}, {"strong", aug_json(t.strong)}};
  return j;
}

bool same_kind(const Json& a, const Json& b) {
  if (a.is_number() && b.is_number()) return true;
  return a.type() == b.type();
}

void merge_into(Json& base, const Json& patch, const std::string& path) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    Json& slot = base[it.key()];
    if (!same_kind(slot, it.value())) {
      throw ConfigError("config key '" + key + "' expects " + std::string(slot.type_name()) + ", got " +
                        it.value().type_name());
    }
    if (slot.is_object()) {
      merge_into(slot, it.value(), key);
    } else if (slot.is_number_unsigned() && it.value().is_number_float()) {
      // Reject 2.5 for a count, but accept 2.0.
      const double v = it.value();
      if (v < 0 || v != static_cast<double>(static_cast<std::uint64_t>(v)))
        throw ConfigError("config key '" + key + "' expects a non-negative integer");
      slot = static_cast<std::uint64_t>(v);
    } else if (slot.is_number_unsigned() && it.value().is_number_integer() && it.value().get<std::int64_t>() < 0) {
      throw ConfigError("config key '" + key + "' expects a non-negative integer");
    } else {
      slot = it.value();
    }
  }
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + file.string());
}

fs::path output_dir_of(const Json& cfg) {
  const std::string dir = cfg.at("output_dir");
  return dir.empty() ? default_output_root() / cfg.at("command").get<std::string>() : fs::path(dir);
}

void write_resolved(const Json& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  Json resolved = cfg;
  resolved["output_dir"] = dir.string();
  write_text(dir / "config.json", resolved.dump(2) + "\n");
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<Detection> model_detections(const Detector& model, const Dataset& ds,
                                        std::span<const std::size_t> indices) {
  NoGradScope guard;
  std::vector<Detection> dets;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& img = ds.images.at(indices[k]);
    auto d = to_detections(model.forward(img.image), indices[k], img.width, img.height);
    dets.insert(dets.end(), d.begin(), d.end());
  }
  return dets;
}

}  // namespace

Json to_json(const ModelConfig& m) {
  return {{"d_model", m.d_model},
          {"encoder_layers", m.encoder_layers},
          {"decoder_layers", m.decoder_layers},
          {"heads", m.heads},
          {"points", m.points},
          {"pyramid_levels", m.pyramid_levels},
          {"num_queries", m.num_queries},
          {"num_classes", m.num_classes},
          {"ffn_dim", m.ffn_dim},
          {"stem_channels1", m.stem_channels1},
          {"stem_channels2", m.stem_channels2}};
}

ModelConfig model_config_from(const Json& j) {
  ModelConfig m;
  m.d_model = j.at("d_model");
  m.encoder_layers = j.at("encoder_layers");
  m.decoder_layers = j.at("decoder_layers");
  m.heads = j.at("heads");
  m.points = j.at("points");
  m.pyramid_levels = j.at("pyramid_levels");
  m.num_queries = j.at("num_queries");
  m.num_classes = j.at("num_classes");
  m.ffn_dim = j.at("ffn_dim");
  m.stem_channels1 = j.at("stem_channels1");
  m.stem_channels2 = j.at("stem_channels2");
  m.validate();
  return m;
}

Json default_config(std::string_view command) {
  if (command == "generate") {
    Json j;
    j["command"] = "generate";
    j["seed"] = std::uint64_t{0};
    j["output_dir"] = "";
    j["force"] = false;
    j["count"] = std::size_t{300};
    j["labels"] = 0.1;
    j["split_seed"] = std::uint64_t{0};
    j["synth"] = synth_json({});
    return j;
  }
  if (command == "train") return training_json();
  if (command == "ablate") {
    Json j = training_json();
    j["command"] = "ablate";
    j["ablate"] = {{"kind", "tau"}, {"grid", {0.5, 0.6, 0.7, 0.8, 0.9}}};
    return j;
  }
  if (command == "eval") {
    const EvalConfig e;
    Json j;
    j["command"] = "eval";
    j["output_dir"] = "";
    j["data"] = data_json();
    j["labels"] = 0.1;
    j["split_seed"] = std::uint64_t{0};
    j["split"] = "test";
    j["run_dir"] = "";
    j["checkpoint"] = "";
    j["predictions"] = "";
    j["model"] = to_json(ModelConfig{});
    j["eval"] = {{"max_detections", e.max_detections},
                 {"score_threshold", e.score_threshold},
                 {"report_ious", e.report_ious}};
    j["overlays"] = true;
    return j;
  }
  throw ConfigError("unknown command '" + std::string(command) + "'");
}

Json merge_config(const Json& base, const Json& patch) {
  if (!patch.is_object()) throw ConfigError("config must be a JSON object");
  Json out = base;
  merge_into(out, patch, "");
  return out;
}

Json load_config(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + file.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError(file.string() + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("command") || !j["command"].is_string())
    throw ConfigError(file.string() + ": missing string field 'command'");
  return merge_config(default_config(j["command"].get<std::string>()), j);
}

fs::path default_output_root() {
  const char* root = std::getenv("DSSL_OUTPUT_ROOT");
  return root && *root ? fs::path(root) : fs::path("runs");
}

SynthDocSpec synth_spec_from(const Json& cfg) {
  const Json& j = cfg.contains("synth") ? cfg.at("synth") : cfg.at("data").at("synth");
  SynthDocSpec s;
  s.width = j.at("width");
  s.height = j.at("height");
  s.min_tables = j.at("min_tables");
  s.max_tables = j.at("max_tables");
  s.min_text_blocks = j.at("min_text_blocks");
  s.max_text_blocks = j.at("max_text_blocks");
  s.confuser_prob = j.at("confuser_prob");
  s.noise = j.at("noise");
  s.seed = cfg.contains("synth") ? cfg.at("seed").get<std::uint64_t>() : cfg.at("data").at("seed").get<std::uint64_t>();
  s.validate();
  return s;
}

TrainConfig train_config_from(const Json& cfg) {
  TrainConfig t;
  const std::string mode = cfg.at("mode");
  if (mode != "semi" && mode != "supervised") throw ConfigError("mode must be 'semi' or 'supervised', got '" + mode + "'");
  t.semi_supervised = mode == "semi";
  t.seed = cfg.at("seed");
  t.labeled_fraction = cfg.at("labels");
  const Json& tr = cfg.at("train");
  t.tau = tr.at("tau");
  t.epochs = tr.at("epochs");
  t.steps_per_epoch = tr.at("steps_per_epoch");
  t.lr = tr.at("lr");
  t.lr_drop_fraction = tr.at("lr_drop_fraction");
  t.batch_size = tr.at("batch_size");
  t.unlabeled_batch_size = tr.at("unlabeled_batch_size");
  t.burn_in_fraction = tr.at("burn_in_fraction");
  t.ema_momentum = tr.at("ema_momentum");
  t.grad_clip = tr.at("grad_clip");
  t.deep_supervision = tr.at("deep_supervision");
  const Json& l = cfg.at("loss");
  t.loss.alpha_reg = l.at("alpha_reg");
  t.loss.alpha_cls = l.at("alpha_cls");
  t.loss.noobj_weight = l.at("noobj_weight");
  t.loss.box.l1 = l.at("l1");
  t.loss.box.giou = l.at("giou");
  t.model = model_config_from(cfg.at("model"));
  t.weak = aug_from(cfg.at("augment").at("weak"), AugPolicy::weak());
  t.strong = aug_from(cfg.at("augment").at("strong"), AugPolicy::strong());
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return t;
}

EvalConfig eval_config_from(const Json& cfg) {
  EvalConfig e;
  const Json& j = cfg.at("eval");
  e.max_detections = j.at("max_detections");
  e.score_threshold = j.at("score_threshold");
  e.report_ious = j.at("report_ious").get<std::vector<double>>();
  return e;
}

Dataset load_split_dataset(const Json& cfg) {
  const Json& data = cfg.at("data");
  const std::string dir = data.at("dir");
  Dataset ds;
  if (dir.empty()) {
    ds = generate(synth_spec_from(cfg), data.at("count"));
  } else {
    if (!fs::exists(fs::path(dir) / "annotations.json"))
      throw std::runtime_error("dataset not found: " + (fs::path(dir) / "annotations.json").string());
    ds = load_dataset(dir);
  }
  return split(ds, cfg.at("labels"), cfg.at("split_seed"));
}

Dataset cmd_generate(const Json& cfg, std::ostream& log) {
  const fs::path dir = output_dir_of(cfg);
  if (fs::exists(dir) && !fs::is_empty(dir) && !cfg.at("force").get<bool>())
    throw std::runtime_error("output directory " + dir.string() + " is not empty (use --force)");
  const std::size_t count = cfg.at("count");
  const Dataset ds = split(generate(synth_spec_from(cfg), count), cfg.at("labels"), cfg.at("split_seed"));
  fs::create_directories(dir);
  save_dataset(ds, dir);
  write_resolved(cfg, dir);
  std::size_t tables = 0;
  for (const auto& img : ds.images) tables += img.annotations.size();
  log << "generated " << ds.size() << " images with " << tables << " tables in " << dir.string() << "\n";
  for (auto s : {Split::labeled, Split::unlabeled, Split::val, Split::test})
    log << "  " << split_name(s) << ": " << ds.indices(s).size() << "\n";
  return ds;
}

TrainResult cmd_train(const Json& cfg, std::ostream& log) {
  const TrainConfig tc = train_config_from(cfg);
  const Dataset ds = load_split_dataset(cfg);
  const fs::path dir = output_dir_of(cfg);
  write_resolved(cfg, dir);
  std::ofstream csv(dir / "metrics.csv", std::ios::binary);
  if (!csv) throw std::runtime_error("cannot write " + (dir / "metrics.csv").string());
  csv << metrics_csv_header();

  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& rec, const TrainState& state, bool improved) {
    csv << metrics_csv_row(rec);
    csv.flush();
    if (improved) save_checkpoint(dir / "checkpoint_best.bin", state.eval_model().parameters());
    if (rec.split == "test") save_checkpoint(dir / "checkpoint_final.bin", state.eval_model().parameters());
    log << rec.split << " epoch " << rec.epoch << " [" << rec.stage << "] loss " << fmt("%.4f", rec.loss) << " mAP "
        << fmt("%.4f", rec.report.map) << " AP50 " << fmt("%.4f", rec.report.ap50) << " pseudo "
        << rec.pseudo_count << "\n";
  };
  TrainResult result;
  try {
    result = full_train(ds, tc, hooks);
  } catch (const TrainingError& e) {
    write_text(dir / "failure.txt", std::string(e.what()) + "\n");
    throw;
  }
  log << "test mAP " << fmt("%.4f", result.final_test.map) << " AP50 " << fmt("%.4f", result.final_test.ap50)
      << " (best val mAP " << fmt("%.4f", result.best_val_map) << " at epoch " << result.best_epoch << ")\n";
  return result;
}

Image draw_boxes(const Image& image, const std::vector<Box>& boxes, double value) {
  Image out = image;
  if (image.width == 0 || image.height == 0) return out;
  auto px = [&](double v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp(std::floor(v), 0.0, static_cast<double>(n - 1)));
  };
  for (const auto& b : boxes) {
    const std::size_t x1 = px(b.x1, image.width), x2 = px(b.x2 - 1e-9, image.width);
    const std::size_t y1 = px(b.y1, image.height), y2 = px(b.y2 - 1e-9, image.height);
    for (std::size_t x = x1; x <= x2; ++x) out.at(y1, x) = out.at(y2, x) = value;
    for (std::size_t y = y1; y <= y2; ++y) out.at(y, x1) = out.at(y, x2) = value;
  }
  return out;
}

EvalReport cmd_eval(const Json& cfg, std::ostream& log) {
  Json c = cfg;
  const std::string run_dir = c.at("run_dir");
  if (!run_dir.empty()) {
    // Model, data and split settings come from the run's own config.
    const Json run = load_config(fs::path(run_dir) / "config.json");
    c["model"] = run.at("model");
    c["data"] = run.at("data");
    c["labels"] = run.at("labels");
    c["split_seed"] = run.at("split_seed");
    if (c.at("checkpoint").get<std::string>().empty())
      c["checkpoint"] = (fs::path(run_dir) / "checkpoint_best.bin").string();
  }
  const EvalConfig ec = eval_config_from(c);
  const Dataset ds = load_split_dataset(c);
  const Split which = parse_split(c.at("split").get<std::string>());
  const auto indices = ds.indices(which);
  const std::string checkpoint = c.at("checkpoint"), predictions = c.at("predictions");
  if (checkpoint.empty() == predictions.empty())
    throw ConfigError("eval needs exactly one of checkpoint (or run_dir) and predictions");

  std::vector<Detection> dets;
  std::size_t num_classes = ds.categories.size();
  if (!predictions.empty()) {
    for (auto& d : load_results(predictions, ds)) {
      if (std::find(indices.begin(), indices.end(), d.image) != indices.end()) dets.push_back(d);
    }
  } else {
    Detector model(model_config_from(c.at("model")), 0);
    auto params = model.parameters();
    try {
      load_checkpoint_into(checkpoint, params);
    } catch (const std::runtime_error& e) {
      throw ConfigError(std::string("checkpoint does not match the model config: ") + e.what());
    }
    if (model.config().num_classes != num_classes)
      throw ConfigError("model has " + std::to_string(model.config().num_classes) + " classes, dataset has " +
                        std::to_string(num_classes));
    dets = model_detections(model, ds, indices);
  }

  // Re-index detections to positions within the split.
  std::vector<std::size_t> position(ds.size(), 0);
  for (std::size_t k = 0; k < indices.size(); ++k) position[indices[k]] = k;
  std::vector<Detection> local = dets;
  for (auto& d : local) d.image = position[d.image];
  std::vector<std::vector<Annotation>> anns;
  for (auto i : indices) anns.push_back(ds.images[i].annotations);
  const EvalReport report = evaluate(local, anns, num_classes, ec);

  const fs::path dir = output_dir_of(c);
  write_resolved(c, dir);
  std::ostringstream csv;
  csv << "metric,iou,value\n";
  csv << "map,0.50:0.95," << fmt("%.6f", report.map) << "\n";
  csv << "ap50,0.50," << fmt("%.6f", report.ap50) << "\n";
  csv << "ap75,0.75," << fmt("%.6f", report.ap75) << "\n";
  csv << "ar100,0.50:0.95," << fmt("%.6f", report.ar100) << "\n";
  for (const auto& t : report.thresholds) {
    const std::string iou = fmt("%.2f", t.iou);
    csv << "precision," << iou << "," << fmt("%.6f", t.precision) << "\n";
    csv << "recall," << iou << "," << fmt("%.6f", t.recall) << "\n";
    csv << "f1," << iou << "," << fmt("%.6f", t.f1) << "\n";
  }
  write_text(dir / "report.csv", csv.str());
  save_results(dets, ds, dir / "detections.json");

  if (c.at("overlays").get<bool>()) {
    fs::create_directories(dir / "overlays");
    for (auto i : indices) {
      const auto& img = ds.images[i];
      std::vector<Box> gt, pred;
      for (const auto& a : img.annotations) gt.push_back(a.box);
      for (const auto& d : dets)
        if (d.image == i && d.score >= ec.score_threshold) pred.push_back(d.box);
      // Ground truth in black, predictions in mid gray on top.
      const Image overlay = draw_boxes(draw_boxes(img.image, gt, 0.0), pred, 0.5);
      write_pgm(dir / "overlays" / img.file_name, overlay);
    }
  }

  log << "evaluated " << indices.size() << " " << split_name(which) << " images\n";
  log << "mAP " << fmt("%.4f", report.map) << "  AP50 " << fmt("%.4f", report.ap50) << "  AP75 "
      << fmt("%.4f", report.ap75) << "  AR100 " << fmt("%.4f", report.ar100) << "\n";
  for (const auto& t : report.thresholds) {
    log << "IoU " << fmt("%.2f", t.iou) << "  P " << fmt("%.4f", t.precision) << "  R " << fmt("%.4f", t.recall)
        << "  F1 " << fmt("%.4f", t.f1) << "\n";
  }
  return report;
}

std::vector<SweepRow> cmd_ablate(const Json& cfg, std::ostream& log) {
  const std::string kind = cfg.at("ablate").at("kind");
  if (kind != "tau" && kind != "queries") throw ConfigError("ablate kind must be 'tau' or 'queries', got '" + kind + "'");
  const auto grid = cfg.at("ablate").at("grid").get<std::vector<double>>();
  if (grid.empty()) throw ConfigError("ablate grid is empty");
  const fs::path dir = output_dir_of(cfg);
  write_resolved(cfg, dir);

  std::vector<SweepRow> rows;
  for (double v : grid) {
    Json run = default_config("train");
    for (auto it = run.begin(); it != run.end(); ++it) run[it.key()] = cfg.at(it.key());
    run["command"] = "train";
    std::string label;
    if (kind == "tau") {
      run["train"]["tau"] = v;
      label = fmt("%g", v);
    } else {
      if (v < 1 || v != std::floor(v)) throw ConfigError("queries grid values must be positive integers");
      run["model"]["num_queries"] = static_cast<std::size_t>(v);
      label = std::to_string(static_cast<std::size_t>(v));
    }
    run["output_dir"] = (dir / (kind + "_" + label)).string();
    log << "== " << kind << " = " << label << "\n";
    const auto t0 = std::chrono::steady_clock::now();
    const TrainResult r = cmd_train(run, log);
    SweepRow row;
    row.value = v;
    row.report = r.final_test;
    row.pseudo_count = r.total_pseudo_labels;
    double conf_sum = 0.0;
    for (const auto& h : r.history) conf_sum += h.pseudo_confidence * static_cast<double>(h.pseudo_count);
    row.pseudo_confidence = row.pseudo_count ? conf_sum / static_cast<double>(row.pseudo_count) : 0.0;
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(row);
  }

  std::ostringstream csv;
  csv << kind << ",map,ap50,ap75,pseudo_count,pseudo_confidence,wall_seconds\n";
  for (const auto& r : rows) {
    csv << fmt("%g", r.value) << "," << fmt("%.6f", r.report.map) << "," << fmt("%.6f", r.report.ap50) << ","
        << fmt("%.6f", r.report.ap75) << "," << r.pseudo_count << "," << fmt("%.6f", r.pseudo_confidence) << ","
        << fmt("%.1f", r.wall_seconds) << "\n";
  }
  write_text(dir / "sweep.csv", csv.str());
  log << "wrote " << (dir / "sweep.csv").string() << "\n";
  return rows;
}

void run_command(const Json& cfg, std::ostream& log) {
  const std::string command = cfg.at("command");
  if (command == "generate") cmd_generate(cfg, log);
  else if (command == "train") cmd_train(cfg, log);
  else if (command == "eval") cmd_eval(cfg, log);
  else if (command == "ablate") cmd_ablate(cfg, log);
  else throw ConfigError("unknown command '" + command + "'");
}

}  // namespace dssl
