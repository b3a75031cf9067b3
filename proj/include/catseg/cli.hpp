// Copyright (c) 2026 The CatSeg Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Command-line front end: export-toy, infer, train, eval and gradcheck.
// Exit codes: 0 success, 1 usage error, 2 any other failure.

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "catseg/gradcheck.hpp"
#include "catseg/io.hpp"
#include "catseg/synthetic.hpp"

namespace catseg {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitFailure = 2;

namespace cli {

/// Options shared by every subcommand that builds a model.
struct ConfigOptions {
  std::string config;
  bool tiny = false;
  std::string mode;

  void add_to(CLI::App& app) {
    app.add_option("--config", config, "JSON run configuration");
    app.add_flag("--tiny", tiny, "start from the small test geometry instead of the defaults");
    app.add_option("--mode", mode, "cost or feature")->check(CLI::IsMember({"cost", "feature"}));
  }

  RunConfig resolve() const {
    RunConfig base = tiny ? RunConfig::tiny() : RunConfig{};
    if (!config.empty()) {
      std::ifstream in(config);
      if (!in) throw IoError("cannot open config " + config);
      json j;
      try {
        in >> j;
      } catch (const json::exception& e) {
        throw ConfigError("config " + config + ": " + e.what());
      }
      base = from_json(j, base);
    }
    if (!mode.empty()) base.mode = parse_mode(mode);
    apply_env_seed(base);
    base.validate();
    return base;
  }
};

inline std::vector<std::string> split_names(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) throw UsageError("empty class name in '" + s + "'");
    out.push_back(item);
  }
  return out;
}

inline std::string fmt(double v, int precision = 6) {
  std::ostringstream o;
  o << std::setprecision(precision) << v;
  return o.str();
}

/// Side length covered by the configured patch grid.
inline std::size_t patch_extent(const PatchConfig& p) {
  return p.n_p * p.size - (p.n_p - 1) * (p.n_p > 1 ? p.overlap : 0);
}

inline PatchPlan config_plan(const RunConfig& c) {
  const std::size_t e = patch_extent(c.patch);
  return plan_patches(e, e, c.patch.n_p, c.patch.size, c.patch.overlap, c.patch.include_global);
}

// ------------------------------------------------------------ export-toy

struct ExportOptions {
  ConfigOptions cfg;
  std::string out, image, classes, gt, weights;
  std::size_t sample = 0;
  bool patch = false;
};

inline int run_export(const ExportOptions& o, std::ostream& out) {
  const RunConfig c = o.cfg.resolve();
  Model<float> model = Model<float>::toy(c);
  if (!o.weights.empty()) load_weights(model.store(), o.weights, true);
  const std::size_t extent = o.patch ? patch_extent(c.patch) : c.train_res;
  std::vector<std::string> names = o.classes.empty()
                                       ? std::vector<std::string>(kColorNames.begin(), kColorNames.begin() + 3)
                                       : split_names(o.classes);
  Tensor<float> image;
  if (!o.image.empty()) {
    image = read_image<float>(o.image);
    if (!o.gt.empty()) throw UsageError("--gt is only available for synthetic images");
  } else {
    const auto ds = make_synthetic<float>(o.sample + 1, extent, c.patch_stride(),
                                          std::min(names.size(), kColors.size()), c.seed);
    image = ds.images[o.sample];
    if (!o.gt.empty()) {
      SegmentationMap m = ds.maps[o.sample];
      m.legend = names;
      write_segmap(m, o.gt);
    }
  }
  std::vector<EmbeddingSet<float>> patches;
  EmbeddingSet<float> whole;
  if (o.patch) {
    const PatchPlan plan = plan_patches(image.dim(1), image.dim(2), c.patch.n_p, c.patch.size,
                                        c.patch.overlap, c.patch.include_global);
    for (const auto& r : plan.rects) {
      if (!r.global) patches.push_back(model.embed(crop(image, r), names));
    }
    whole = model.embed(ops::bilinear_resize(image, c.train_res, c.train_res), names);
  } else {
    whole = model.embed(image, names);
  }
  write_cseg(whole, patches, o.out);
  out << "wrote " << o.out << ": grid " << whole.height() << "x" << whole.width() << "x"
      << whole.image.dim(2) << ", " << names.size() << " classes, " << patches.size()
      << " patch sets\n";
  return kExitOk;
}

// ----------------------------------------------------------------- infer

struct InferOptions {
  ConfigOptions cfg;
  std::string emb, out, weights, logits;
  bool patch = false;
};

inline int run_infer(const InferOptions& o, std::ostream& out) {
  const RunConfig c = o.cfg.resolve();
  const auto contents = read_cseg<float>(o.emb);
  const auto& whole = contents.whole;
  const std::size_t d = whole.image.dim(2);
  const std::size_t gdim = whole.guidance.empty() ? d : whole.guidance.front().dim(2);
  Model<float> model(c, {d, gdim, false});
  if (!o.weights.empty()) load_weights(model.store(), o.weights, true);
  Tensor<float> logits;
  if (o.patch) {
    logits = patch_inference(whole, contents.patches, config_plan(c), model);
  } else {
    logits = model.predict(whole);
  }
  const SegmentationMap map = argmax_map(logits, whole.class_names);
  write_segmap(map, o.out);
  if (!o.logits.empty()) write_tensors(o.logits, {{"logits", logits}});
  out << "wrote " << o.out << ": " << map.height << "x" << map.width << ", "
      << whole.class_names.size() << " classes\n";
  return kExitOk;
}

// ----------------------------------------------------------------- train

struct TrainOptions {
  ConfigOptions cfg;
  std::string finetune, save, log;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr_module, lr_encoder;
  std::optional<std::size_t> batch;
  std::size_t steps = 200, images = 4, classes = 3;
};

inline int run_train(const TrainOptions& o, std::ostream& out) {
  RunConfig c = o.cfg.resolve();
  if (!o.finetune.empty()) c.finetune = parse_preset(o.finetune);
  if (o.seed) c.seed = *o.seed;
  if (o.lr_module) c.lr_module = *o.lr_module;
  if (o.lr_encoder) c.lr_encoder = *o.lr_encoder;
  if (o.batch) c.batch_size = *o.batch;
  c.validate();
  Model<float> model = Model<float>::toy(c);
  const auto ds = make_synthetic<float>(o.images, c.train_res, c.patch_stride(), o.classes, c.seed);
  std::vector<TrainSample<float>> data;
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    data.push_back({ds.images[i], std::nullopt, ds.class_names, ds.maps[i]});
  }
  std::ofstream log;
  if (!o.log.empty()) {
    log.open(o.log);
    if (!log) throw IoError("cannot write " + o.log);
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = train(model, data, o.steps, [&](std::size_t s, double loss) {
    out << "step " << s + 1 << " loss " << fmt(loss, 8) << "\n";
    if (log) log << s + 1 << " " << std::setprecision(17) << loss << "\n";
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ConfusionCounts cc{std::vector<std::uint64_t>(o.classes), std::vector<std::uint64_t>(o.classes)};
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const auto lg = model.predict(model.embed(ds.images[i], ds.class_names), c.train_res, c.train_res);
    cc += confusion(argmax_map(lg, ds.class_names), ds.maps[i], o.classes);
  }
  out << "final_loss " << fmt(r.losses.empty() ? 0.0 : r.losses.back(), 8) << " train_miou "
      << fmt(miou(cc)) << " seconds " << fmt(secs, 3) << "\n";
  if (!o.save.empty()) save_weights(model.store(), o.save);
  return kExitOk;
}

// ------------------------------------------------------------------ eval

struct EvalOptions {
  std::string pred, gt;
};

inline int run_eval(const EvalOptions& o, std::ostream& out) {
  const SegmentationMap pred = read_segmap(o.pred);
  const SegmentationMap gt = read_segmap(o.gt);
  if (!pred.legend.empty() && !gt.legend.empty() && pred.legend != gt.legend) {
    throw ContractError("prediction and ground truth use different class lists");
  }
  const auto& legend = gt.legend.empty() ? pred.legend : gt.legend;
  const auto cc = confusion(pred, gt, legend.size());
  for (std::size_t c = 0; c < legend.size(); ++c) {
    const auto v = cc.iou(c);
    out << "iou " << legend[c] << " " << (v ? fmt(*v) : std::string("absent")) << "\n";
  }
  out << "miou " << fmt(miou(cc)) << "\n";
  return kExitOk;
}

// ------------------------------------------------------------- gradcheck

struct GradcheckOptions {
  std::size_t cases = 10;
  double tolerance = 1e-4;
  bool ops_only = false;
};

inline int run_gradcheck(const GradcheckOptions& o, std::ostream& out) {
  auto results = check_all_ops(o.cases);
  if (!o.ops_only) {
    for (auto& r : check_composites()) results.push_back(std::move(r));
  }
  bool ok = true;
  for (const auto& r : results) {
    const bool pass = r.max_rel_error < o.tolerance;
    ok = ok && pass;
    out << std::left << std::setw(28) << r.name << " " << std::setw(12) << fmt(r.max_rel_error, 3)
        << (pass ? " ok" : " FAIL") << "\n";
  }
  if (!ok) throw NumericalError("gradient check above tolerance " + fmt(o.tolerance));
  return kExitOk;
}

}  // namespace cli

/// Parses `argv` and runs one subcommand.
inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  CLI::App app{"Cost-aggregation open-vocabulary segmentation toolkit", "catseg"};
  app.require_subcommand(1);

  cli::ExportOptions ex;
  auto* sx = app.add_subcommand("export-toy", "encode an image and class list with the toy encoders");
  ex.cfg.add_to(*sx);
  sx->add_option("--out", ex.out, "output .cseg path")->required();
  sx->add_option("--image", ex.image, "PPM image or .cseg holding a tensor \"image\"");
  sx->add_option("--classes", ex.classes, "comma-separated class names");
  sx->add_option("--sample", ex.sample, "index of the synthetic scene");
  sx->add_option("--gt", ex.gt, "write the synthetic ground truth map here");
  sx->add_option("--weights", ex.weights, "encoder weights .cseg written by train");
  sx->add_flag("--patch", ex.patch, "also store per-patch embedding sets");

  cli::InferOptions in;
  auto* si = app.add_subcommand("infer", "segment from a .cseg embedding file");
  in.cfg.add_to(*si);
  si->add_option("--emb", in.emb, "input .cseg")->required();
  si->add_option("--out", in.out, "output .pgm")->required();
  si->add_option("--weights", in.weights, "weights .cseg written by train");
  si->add_option("--logits", in.logits, "also write the logits tensor here");
  si->add_flag("--patch", in.patch, "patch inference over the stored patch sets");

  cli::TrainOptions tr;
  auto* st = app.add_subcommand("train", "train on synthetic scenes with the toy encoders");
  tr.cfg.add_to(*st);
  st->add_option("--finetune", tr.finetune, "fine-tuning preset");
  st->add_option("--seed", tr.seed, "random seed");
  st->add_option("--steps", tr.steps, "optimizer steps");
  st->add_option("--lr-module", tr.lr_module, "learning rate of the aggregation module");
  st->add_option("--lr-encoder", tr.lr_encoder, "learning rate of the encoders");
  st->add_option("--batch", tr.batch, "samples per step");
  st->add_option("--images", tr.images, "number of synthetic scenes");
  st->add_option("--classes", tr.classes, "number of classes")->check(CLI::Range(1, 8));
  st->add_option("--save", tr.save, "write trained weights here");
  st->add_option("--log", tr.log, "write the loss trace here");

  cli::EvalOptions ev;
  auto* se = app.add_subcommand("eval", "mean IoU of a predicted map against ground truth");
  se->add_option("--pred", ev.pred, "predicted .pgm")->required();
  se->add_option("--gt", ev.gt, "ground truth .pgm")->required();

  cli::GradcheckOptions gc;
  auto* sg = app.add_subcommand("gradcheck", "finite-difference check of every backward rule");
  sg->add_option("--cases", gc.cases, "random shapes per op");
  sg->add_option("--tolerance", gc.tolerance, "maximum relative error");
  sg->add_flag("--ops-only", gc.ops_only, "skip the composite model checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  try {
    if (*sx) return cli::run_export(ex, out);
    if (*si) return cli::run_infer(in, out);
    if (*st) return cli::run_train(tr, out);
    if (*se) return cli::run_eval(ev, out);
    return cli::run_gradcheck(gc, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace catseg
