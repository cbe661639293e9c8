#include <CLI11.hpp>

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "xrefine/data.hpp"
#include "xrefine/gradcheck.hpp"
#include "xrefine/image.hpp"
#include "xrefine/manifest.hpp"
#include "xrefine/refine.hpp"
#include "xrefine/training.hpp"

// Command-line entry point. Every command is a pure function of its inputs,
// flags and seed: reruns write byte-identical files. Exit codes: 0 success,
// 1 usage error, 2 data error, 3 numerical failure.

namespace fs = std::filesystem;
using namespace xrefine;

namespace {

// Dataset synthesis draws per-pair streams from these bases (seed, tag + i).
constexpr uint64_t kTagSynthScene = 0xA00000;
constexpr uint64_t kTagSynthMatches = 0xA10000;

std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string pair_name(int index, const char* suffix) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "pair_%03d_%s", index, suffix);
  return buf;
}

void configure_common(CLI::App* sub) {
  sub->set_config("--config", "", "Read options from a key = value manifest file");
  sub->allow_config_extras(false);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  os << text;
  if (!os) throw DataError("failed writing: " + path.string());
}

void set_matrix(Manifest& m, const std::string& prefix, const Eigen::Matrix3d& a) {
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      m.set(prefix + "." + std::to_string(r) + std::to_string(c), a(r, c));
}

Image load_grayscale(const fs::path& path) { return to_grayscale(read_pnm(path)); }

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string out;
  int pairs = 4;
  int matches = 256;
  double noise_std = 1.5;
  uint64_t seed = 1;
  int width = 256;
  int height = 256;
};

int cmd_synth(const SynthArgs& args) {
  fs::create_directories(args.out);
  PairConfig pc;
  pc.width = args.width;
  pc.height = args.height;

  Manifest m;
  m.set("synth.seed", args.seed);
  m.set("synth.pairs", args.pairs);
  m.set("synth.matches_per_pair", args.matches);
  m.set("synth.noise_std", args.noise_std);
  m.set("synth.width", args.width);
  m.set("synth.height", args.height);

  for (int p = 0; p < args.pairs; ++p) {
    const PairScene scene =
        PairScene::generate(Rng::mix(args.seed, kTagSynthScene + static_cast<uint64_t>(p)), pc);
    const MatchSet set = sample_training_matches(
        scene, args.matches, args.noise_std,
        Rng::mix(args.seed, kTagSynthMatches + static_cast<uint64_t>(p)));

    const std::string image_a = pair_name(p, "a.pgm");
    const std::string image_b = pair_name(p, "b.pgm");
    const std::string match_file = pair_name(p, "matches.txt");
    const std::string true_file = pair_name(p, "true.txt");
    write_pgm(scene.image_a(), fs::path(args.out) / image_a);
    write_pgm(scene.image_b(), fs::path(args.out) / image_b);

    std::vector<MatchRecord> noisy(set.samples.size()), exact(set.samples.size());
    for (size_t i = 0; i < set.samples.size(); ++i) {
      noisy[i].a = set.samples[i].keypoint_a;
      noisy[i].b = set.samples[i].keypoint_b;
      exact[i].a = set.samples[i].true_a;
      exact[i].b = set.samples[i].true_b;
    }
    write_match_list(noisy, fs::path(args.out) / match_file, /*with_flags=*/false);
    write_match_list(exact, fs::path(args.out) / true_file, /*with_flags=*/false);

    const std::string key = "pair." + std::to_string(p);
    m.set(key + ".image_a", image_a);
    m.set(key + ".image_b", image_b);
    m.set(key + ".matches", match_file);
    m.set(key + ".true_matches", true_file);
    const CameraIntrinsics& cam = scene.intrinsics();
    m.set(key + ".fx", cam.fx);
    m.set(key + ".fy", cam.fy);
    m.set(key + ".cx", cam.cx);
    m.set(key + ".cy", cam.cy);
    set_matrix(m, key + ".rotation", scene.pose().rotation);
    m.set(key + ".translation.x", scene.pose().translation.x());
    m.set(key + ".translation.y", scene.pose().translation.y());
    m.set(key + ".translation.z", scene.pose().translation.z());
    set_matrix(m, key + ".essential", scene.essential());
  }
  m.save(fs::path(args.out) / "manifest.txt");
  std::cout << "wrote " << args.pairs << " pairs to " << args.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string out;
  std::string resume;
  std::string mode = "both";
  std::string model = "small";
  int patch_size = 11;
  TrainConfig config = TrainConfig::desk();
};

int cmd_train(TrainArgs& args) {
  args.config.model = args.model == "large" ? ModelConfig::large(args.patch_size)
                                            : ModelConfig::small(args.patch_size);
  args.config.model.refine_mode =
      args.mode == "second" ? RefineMode::SecondOnly : RefineMode::Both;
  args.config.validate();
  fs::create_directories(args.out);

  std::optional<TrainState> resumed;
  if (!args.resume.empty()) resumed = load_train_state(args.resume);

  std::vector<std::string> log_lines;
  const TrainState state = train(args.config, resumed ? &*resumed : nullptr, &log_lines);

  std::string log_text;
  for (const std::string& line : log_lines) {
    std::cout << line << "\n";
    log_text += line;
    log_text += '\n';
  }
  write_text(fs::path(args.out) / "train_log.txt", log_text);
  save_weights(state.best.weights, fs::path(args.out) / "best.xrw");
  checkpoint_sidecar(state.best, args.config).save(fs::path(args.out) / "best_checkpoint.txt");
  save_train_state(state, fs::path(args.out) / "state.xrs");

  std::cout << "best epoch " << state.best.epoch << ", validation error "
            << format_double(state.best.metric) << " px\n";
  if (state.aborted) {
    std::cerr << "training aborted on divergence; best checkpoint kept\n";
    return 3;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// refine

struct RefineArgs {
  std::string image_a, image_b, matches, weights, out;
  int threads = 0;
};

int cmd_refine(const RefineArgs& args) {
  const Image a = load_grayscale(args.image_a);
  const Image b = load_grayscale(args.image_b);
  const std::vector<MatchRecord> records = read_match_list(args.matches);
  const ModelWeights<float> weights = load_weights(args.weights);
  const RefineSummary summary = refine_matches(a, b, records, weights, args.threads);
  write_match_list(summary.matches, args.out, /*with_flags=*/true);
  std::cout << "refined " << summary.refined_count << " matches, passed through "
            << summary.passthrough_count << " at the border\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval-pose

struct EvalPoseArgs {
  std::string out;
  std::string weights;
  PoseEvalConfig config;
  bool timing = false;
  int timing_matches = 2048;
  int timing_runs = 100;
};

int cmd_eval_pose(const EvalPoseArgs& args) {
  std::optional<ModelWeights<float>> weights;
  if (!args.weights.empty()) weights = load_weights(args.weights);
  const PoseEvalReport report = eval_pose(args.config, weights ? &*weights : nullptr);

  std::string table = "condition";
  for (const double t : report.thresholds_deg) table += "\tAUC" + format_double(t);
  table += "\nunrefined";
  for (const double v : report.auc_unrefined) table += "\t" + fixed2(v);
  table += "\n";
  if (report.refined) {
    table += "refined";
    for (const double v : report.auc_refined) table += "\t" + fixed2(v);
    table += "\n";
  }
  std::cout << table;

  Manifest m;
  m.set("report.command", "eval-pose");
  m.set("report.seed", args.config.seed);
  m.set("pose.pairs", args.config.pairs);
  m.set("pose.matches_per_pair", args.config.matches_per_pair);
  m.set("pose.noise_std", args.config.noise_std);
  m.set("pose.repetitions", args.config.repetitions);
  m.set("ransac.iterations", args.config.ransac_iterations);
  m.set("ransac.threshold_px", args.config.ransac_threshold_px);
  for (size_t t = 0; t < report.thresholds_deg.size(); ++t) {
    const std::string suffix = format_double(report.thresholds_deg[t]);
    m.set("auc.unrefined." + suffix, report.auc_unrefined[t]);
    if (report.refined) m.set("auc.refined." + suffix, report.auc_refined[t]);
  }
  m.set("failures.unrefined", report.failures_unrefined);
  if (report.refined) m.set("failures.refined", report.failures_refined);
  for (size_t p = 0; p < report.pair_err_unrefined.size(); ++p) {
    const std::string key = "pair." + std::to_string(p);
    m.set(key + ".unrefined_deg", report.pair_err_unrefined[p]);
    if (report.refined) m.set(key + ".refined_deg", report.pair_err_refined[p]);
  }
  if (args.timing) {
    if (!weights) throw DataError("eval-pose: --timing needs --weights");
    const TimingReport timing = benchmark_refinement(*weights, args.timing_matches,
                                                     args.timing_runs, args.config.seed);
    m.set("timing.matches", timing.matches);
    m.set("timing.runs", timing.runs);
    m.set("timing.median_ms", timing.median_ms);
    m.set("timing.min_ms", timing.min_ms);
    m.set("timing.max_ms", timing.max_ms);
  }

  std::string text = "# xrefine pose evaluation\n";
  for (size_t start = 0, end = 0; end != std::string::npos; start = end + 1) {
    end = table.find('\n', start);
    if (end == std::string::npos) break;
    text += "# " + table.substr(start, end - start) + "\n";
  }
  text += m.serialize();
  write_text(args.out, text);
  return 0;
}

// ---------------------------------------------------------------------------
// eval-noise

struct EvalNoiseArgs {
  std::string out;
  NoiseSweepConfig config;
};

int cmd_eval_noise(const EvalNoiseArgs& args) {
  const NoiseSweepReport report = eval_noise_sweep(args.config);

  std::string table = "noise_std";
  for (const double t : report.thresholds_deg) table += "\tAUC" + format_double(t);
  table += "\n";
  for (size_t s = 0; s < report.noise_stds.size(); ++s) {
    table += format_double(report.noise_stds[s]);
    for (const double v : report.auc[s]) table += "\t" + fixed2(v);
    table += "\n";
  }
  std::cout << table;

  Manifest m;
  m.set("report.command", "eval-noise");
  m.set("report.seed", args.config.seed);
  m.set("sweep.pairs", args.config.pairs);
  m.set("sweep.matches_per_pair", args.config.matches_per_pair);
  m.set("ransac.iterations", args.config.ransac_iterations);
  m.set("ransac.threshold_px", args.config.ransac_threshold_px);
  m.set("sweep.levels", static_cast<int>(report.noise_stds.size()));
  for (size_t s = 0; s < report.noise_stds.size(); ++s) {
    const std::string key = "sweep." + std::to_string(s);
    m.set(key + ".std", report.noise_stds[s]);
    for (size_t t = 0; t < report.thresholds_deg.size(); ++t)
      m.set(key + ".auc" + format_double(report.thresholds_deg[t]), report.auc[s][t]);
  }

  std::string text = "# xrefine noise sweep\n";
  for (size_t start = 0, end = 0; end != std::string::npos; start = end + 1) {
    end = table.find('\n', start);
    if (end == std::string::npos) break;
    text += "# " + table.substr(start, end - start) + "\n";
  }
  text += m.serialize();
  write_text(args.out, text);
  return 0;
}

// ---------------------------------------------------------------------------
// eval-tri

struct EvalTriArgs {
  std::string out;
  std::string weights;
  TriEvalConfig config;
};

int cmd_eval_tri(const EvalTriArgs& args) {
  std::optional<ModelWeights<float>> weights;
  if (!args.weights.empty()) weights = load_weights(args.weights);
  const TriEvalReport report = eval_triangulation(args.config, weights ? &*weights : nullptr);

  std::string table = "threshold_units\tacc_unrefined";
  if (report.refined) table += "\tacc_refined";
  table += "\n";
  for (size_t t = 0; t < report.thresholds.size(); ++t) {
    table += format_double(report.thresholds[t]) + "\t" + fixed2(100 * report.acc_unrefined[t]);
    if (report.refined) table += "\t" + fixed2(100 * report.acc_refined[t]);
    table += "\n";
  }
  std::cout << table;

  Manifest m;
  m.set("report.command", "eval-tri");
  m.set("report.seed", args.config.seed);
  m.set("tri.scenes", args.config.scenes);
  m.set("tri.points_per_scene", args.config.points_per_scene);
  m.set("tri.noise_std", args.config.noise_std);
  m.set("tri.unit_scale", args.config.unit_scale);
  m.set("tri.tracks", report.tracks);
  for (size_t t = 0; t < report.thresholds.size(); ++t) {
    const std::string key = "tri.threshold." + std::to_string(t);
    m.set(key + ".units", report.thresholds[t]);
    m.set(key + ".acc_unrefined", report.acc_unrefined[t]);
    if (report.refined) m.set(key + ".acc_refined", report.acc_refined[t]);
  }
  m.set("tri.rmse_unrefined", report.rmse_unrefined);
  if (report.refined) m.set("tri.rmse_refined", report.rmse_refined);

  std::string text = "# xrefine triangulation evaluation\n";
  for (size_t start = 0, end = 0; end != std::string::npos; start = end + 1) {
    end = table.find('\n', start);
    if (end == std::string::npos) break;
    text += "# " + table.substr(start, end - start) + "\n";
  }
  text += m.serialize();
  write_text(args.out, text);
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradCheckArgs {
  uint64_t seed = 1;
  int rounds = 50;
  double tolerance = 1e-4;
};

int cmd_gradcheck(const GradCheckArgs& args) {
  const GradCheckReport report = run_gradchecks(args.seed, args.rounds, args.tolerance);
  for (const GradCheckEntry& e : report.entries)
    std::printf("%-32s max_rel %10.3e  probes %7ld  skipped %4ld  %s\n", e.name.c_str(),
                e.max_rel_error, e.probes, e.skipped, e.passed ? "ok" : "FAIL");
  std::printf("gradcheck %s: max relative error %.3e (tolerance %.1e, %d rounds)\n",
              report.passed ? "passed" : "FAILED", report.max_rel_error, report.tolerance,
              args.rounds);
  return report.passed ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xrefine: detector-agnostic sub-pixel refinement of keypoint matches"};
  app.require_subcommand(1);

  SynthArgs synth;
  CLI::App* s = app.add_subcommand("synth", "Generate a synthetic two-view dataset");
  configure_common(s);
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--pairs", synth.pairs, "Image pairs to generate")->check(CLI::NonNegativeNumber);
  s->add_option("--matches", synth.matches, "Matches per pair")->check(CLI::PositiveNumber);
  s->add_option("--noise", synth.noise_std, "Keypoint noise std in pixels");
  s->add_option("--seed", synth.seed, "Random seed");
  s->add_option("--width", synth.width, "Image width")->check(CLI::PositiveNumber);
  s->add_option("--height", synth.height, "Image height")->check(CLI::PositiveNumber);

  TrainArgs tr;
  CLI::App* t = app.add_subcommand("train", "Train a refinement model on synthetic pairs");
  configure_common(t);
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--seed", tr.config.seed, "Random seed");
  t->add_option("--epochs", tr.config.epochs, "Total epochs (0 = init checkpoint only)")
      ->check(CLI::NonNegativeNumber);
  t->add_option("--pairs-per-epoch", tr.config.pairs_per_epoch, "Scenes per epoch")
      ->check(CLI::PositiveNumber);
  t->add_option("--matches", tr.config.matches_per_pair, "Matches sampled per scene")
      ->check(CLI::PositiveNumber);
  t->add_option("--batch-pairs", tr.config.batch_pairs, "Image pairs per optimizer step")
      ->check(CLI::PositiveNumber);
  t->add_option("--lr", tr.config.lr, "Adam learning rate");
  t->add_option("--noise", tr.config.noise_std, "Keypoint noise std in pixels");
  t->add_option("--offset-penalty", tr.config.offset_penalty,
                "Quadratic penalty on predicted offsets (0 = pure epipolar loss)");
  t->add_option("--val-pairs", tr.config.val_pairs, "Held-out validation scenes")
      ->check(CLI::PositiveNumber);
  t->add_option("--val-matches", tr.config.val_matches_per_pair, "Matches per validation scene")
      ->check(CLI::PositiveNumber);
  t->add_option("--threads", tr.config.threads, "Worker threads (0 = hardware)");
  t->add_option("--mode", tr.mode, "Refinement mode")->check(CLI::IsMember({"both", "second"}));
  t->add_option("--model", tr.model, "Architecture variant")
      ->check(CLI::IsMember({"small", "large"}));
  t->add_option("--patch-size", tr.patch_size, "Patch side length (odd)");
  t->add_option("--resume", tr.resume, "Training state file to resume from");

  RefineArgs rf;
  CLI::App* r = app.add_subcommand("refine", "Refine a match list between two images");
  configure_common(r);
  r->add_option("--image-a", rf.image_a, "First image (PGM/PPM)")->required();
  r->add_option("--image-b", rf.image_b, "Second image (PGM/PPM)")->required();
  r->add_option("--matches", rf.matches, "Input match list")->required();
  r->add_option("--weights", rf.weights, "Weight file")->required();
  r->add_option("--out", rf.out, "Refined match list (with pass-through flags)")->required();
  r->add_option("--threads", rf.threads, "Worker threads (0 = hardware)");

  EvalPoseArgs ep;
  CLI::App* p = app.add_subcommand("eval-pose", "Relative-pose AUC benchmark");
  configure_common(p);
  p->add_option("--out", ep.out, "Report file")->required();
  p->add_option("--weights", ep.weights, "Optional weight file (adds the refined condition)");
  p->add_option("--pairs", ep.config.pairs, "Benchmark pairs")->check(CLI::PositiveNumber);
  p->add_option("--matches", ep.config.matches_per_pair, "Ground-truth matches per pair")
      ->check(CLI::PositiveNumber);
  p->add_option("--noise", ep.config.noise_std, "Keypoint noise std in pixels");
  p->add_option("--reps", ep.config.repetitions, "Repetitions to average")
      ->check(CLI::PositiveNumber);
  p->add_option("--iterations", ep.config.ransac_iterations, "RANSAC iterations")
      ->check(CLI::PositiveNumber);
  p->add_option("--threshold", ep.config.ransac_threshold_px, "RANSAC Sampson threshold (px)");
  p->add_option("--seed", ep.config.seed, "Random seed");
  p->add_option("--threads", ep.config.threads, "Worker threads (0 = hardware)");
  p->add_flag("--timing", ep.timing, "Measure single-core refinement time (needs --weights)");
  p->add_option("--timing-matches", ep.timing_matches, "Batch size for --timing")
      ->check(CLI::PositiveNumber);
  p->add_option("--timing-runs", ep.timing_runs, "Repetitions for --timing")
      ->check(CLI::PositiveNumber);

  EvalNoiseArgs en;
  CLI::App* n = app.add_subcommand("eval-noise", "AUC vs keypoint noise sweep");
  configure_common(n);
  n->add_option("--out", en.out, "Report file")->required();
  n->add_option("--pairs", en.config.pairs, "Benchmark pairs")->check(CLI::PositiveNumber);
  n->add_option("--matches", en.config.matches_per_pair, "Ground-truth matches per pair")
      ->check(CLI::PositiveNumber);
  n->add_option("--stds", en.config.noise_stds, "Noise levels to sweep");
  n->add_option("--iterations", en.config.ransac_iterations, "RANSAC iterations")
      ->check(CLI::PositiveNumber);
  n->add_option("--threshold", en.config.ransac_threshold_px, "RANSAC Sampson threshold (px)");
  n->add_option("--seed", en.config.seed, "Random seed");
  n->add_option("--threads", en.config.threads, "Worker threads (0 = hardware)");

  EvalTriArgs et;
  CLI::App* q = app.add_subcommand("eval-tri", "Multi-view triangulation accuracy");
  configure_common(q);
  q->add_option("--out", et.out, "Report file")->required();
  q->add_option("--weights", et.weights, "Optional SecondOnly weight file");
  q->add_option("--scenes", et.config.scenes, "Scenes to generate")->check(CLI::PositiveNumber);
  q->add_option("--points", et.config.points_per_scene, "Tracked points per scene")
      ->check(CLI::PositiveNumber);
  q->add_option("--views", et.config.scene.views, "Views per scene")->check(CLI::PositiveNumber);
  q->add_option("--noise", et.config.noise_std, "Keypoint noise std in pixels");
  q->add_option("--unit-scale", et.config.unit_scale, "Scene units per threshold unit");
  q->add_option("--thresholds", et.config.thresholds, "Accuracy thresholds (threshold units)");
  q->add_option("--seed", et.config.seed, "Random seed");
  q->add_option("--threads", et.config.threads, "Worker threads (0 = hardware)");

  GradCheckArgs gc;
  CLI::App* g = app.add_subcommand("gradcheck", "Finite-difference check of all backward passes");
  configure_common(g);
  g->add_option("--seed", gc.seed, "Random seed");
  g->add_option("--rounds", gc.rounds, "Random configurations per check")
      ->check(CLI::PositiveNumber);
  g->add_option("--tolerance", gc.tolerance, "Maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (app.got_subcommand(s)) return cmd_synth(synth);
    if (app.got_subcommand(t)) return cmd_train(tr);
    if (app.got_subcommand(r)) return cmd_refine(rf);
    if (app.got_subcommand(p)) return cmd_eval_pose(ep);
    if (app.got_subcommand(n)) return cmd_eval_noise(en);
    if (app.got_subcommand(q)) return cmd_eval_tri(et);
    if (app.got_subcommand(g)) return cmd_gradcheck(gc);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
