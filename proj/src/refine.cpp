#include "xrefine/refine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <string>

#include "xrefine/parallel.hpp"

namespace xrefine {

namespace {

// Every random quantity drawn by the evaluation pipelines comes from
// Rng(Rng::mix(seed, tag)) with a role-specific tag, so adding one consumer
// never shifts another stream. Indexed roles add their index to a widely
// spaced base; per-repetition roles mix twice.
constexpr uint64_t kTagScene = 0x900000;            // + pair index
constexpr uint64_t kTagCorrespondences = 0x910000;  // + pair index
constexpr uint64_t kTagNoise = 0x920000;            // + repetition, then mix pair
constexpr uint64_t kTagRansac = 0x930000;           // + repetition, then mix pair
constexpr uint64_t kTagTriScene = 0x940000;         // + scene index
constexpr uint64_t kTagTriTracks = 0x950000;        // + scene index
constexpr uint64_t kTagBench = 0x960000;

struct GtCorrespondence {
  Eigen::Vector2d a, b;
};

// Exact correspondences sampled uniformly over the valid overlap, both sides
// at least `margin` pixels inside their image. No perturbation here; callers
// add their own noise so one sample set can serve several noise levels.
std::vector<GtCorrespondence> sample_correspondences(const PairScene& scene, int n, double margin,
                                                     uint64_t seed) {
  std::vector<GtCorrespondence> out;
  out.reserve(static_cast<size_t>(n));
  Rng rng(seed);
  const double hix = scene.width() - 1 - margin;
  const double hiy = scene.height() - 1 - margin;
  if (!(hix > margin && hiy > margin))
    throw DataError("sample_correspondences: image smaller than twice the margin");
  long long attempts = 0;
  const long long cap = 500LL * n + 1000;
  while (static_cast<int>(out.size()) < n) {
    if (++attempts > cap)
      throw DataError("sample_correspondences: could not find enough valid correspondences");
    const Eigen::Vector2d pa(rng.uniform(margin, hix), rng.uniform(margin, hiy));
    const PairScene::MapResult m = scene.map_a_to_b(pa);
    if (!m.valid || !in_image_margins(m.point, scene.width(), scene.height(), margin)) continue;
    out.push_back({pa, m.point});
  }
  return out;
}

// Refines one match in place; returns false (coordinates untouched) when the
// patch support of either side exits its image.
bool refine_one(const Image& image_a, const Image& image_b, const ModelWeights<float>& weights,
                double margin, Eigen::Vector2d& a, Eigen::Vector2d& b) {
  if (!in_image_margins(a, image_a.width, image_a.height, margin) ||
      !in_image_margins(b, image_b.width, image_b.height, margin))
    return false;
  const TensorF pa = extract_patch(image_a, a, weights.config.patch_size);
  const TensorF pb = extract_patch(image_b, b, weights.config.patch_size);
  const RefinementOutput<float> out = refine_pair(pa, pb, weights);
  a.x() += static_cast<double>(out.offset_a.dx);
  a.y() += static_cast<double>(out.offset_a.dy);
  b.x() += static_cast<double>(out.offset_b.dx);
  b.y() += static_cast<double>(out.offset_b.dy);
  return true;
}

// Full pose pipeline for one pair: normalize, RANSAC, pose recovery, error
// vs ground truth. Estimation failures score 180 degrees and set *failed.
double estimate_pair_error(const std::vector<Eigen::Vector2d>& ka,
                           const std::vector<Eigen::Vector2d>& kb, const CameraIntrinsics& cam,
                           const RelativePose& gt_pose, int iterations, double threshold_px,
                           uint64_t ransac_seed, bool* failed) {
  *failed = false;
  try {
    std::vector<Eigen::Vector2d> na(ka.size()), nb(kb.size());
    for (size_t i = 0; i < ka.size(); ++i) {
      na[i] = cam.normalize(ka[i]);
      nb[i] = cam.normalize(kb[i]);
    }
    RansacParams rp;
    rp.iterations = iterations;
    rp.threshold_px = threshold_px;
    rp.fmean = cam.fmean();
    rp.seed = ransac_seed;
    const RansacResult rr = ransac_essential(na, nb, rp);
    const RelativePose est = recover_pose(rr.essential, na, nb, &rr.inlier_mask);
    return pose_error(est, gt_pose).max_deg;
  } catch (const NumericalError&) {
    *failed = true;
    return 180.0;
  }
}

int eval_chunks(int n) { return std::min(n, 64); }

}  // namespace

// ---------------------------------------------------------------------------
// Two-view refinement

RefineSummary refine_matches(const Image& image_a, const Image& image_b,
                             const std::vector<MatchRecord>& matches,
                             const ModelWeights<float>& weights, int threads) {
  const double margin = patch_margin(weights.config.patch_size);
  const int n = static_cast<int>(matches.size());
  for (int i = 0; i < n; ++i) {
    const MatchRecord& m = matches[static_cast<size_t>(i)];
    const bool in_a = m.a.x() >= 0 && m.a.x() <= image_a.width - 1 && m.a.y() >= 0 &&
                      m.a.y() <= image_a.height - 1;
    const bool in_b = m.b.x() >= 0 && m.b.x() <= image_b.width - 1 && m.b.y() >= 0 &&
                      m.b.y() <= image_b.height - 1;
    if (!in_a || !in_b)
      throw DataError("refine_matches: match " + std::to_string(i) + " lies outside the images");
  }

  RefineSummary out;
  out.matches = matches;
  // Per-index writes only, so the result is bitwise independent of both the
  // chunking and the thread count.
  parallel_chunks(n, std::min(64, (n + 31) / 32), threads, [&](int, int begin, int end) {
    for (int i = begin; i < end; ++i) {
      MatchRecord& m = out.matches[static_cast<size_t>(i)];
      m.flag = refine_one(image_a, image_b, weights, margin, m.a, m.b) ? 0 : 1;
    }
  });
  for (const MatchRecord& m : out.matches) ++(m.flag ? out.passthrough_count : out.refined_count);
  return out;
}

// ---------------------------------------------------------------------------
// Track refinement

TrackSample refine_track(const TrackSample& track, const ModelWeights<float>& weights) {
  if (weights.config.refine_mode != RefineMode::SecondOnly)
    throw DataError(
        "refine_track: symmetric-mode weights supplied; track refinement needs a SecondOnly "
        "model");
  if (track.observations.size() < 2)
    throw DataError("refine_track: a track needs at least two observations");
  if (track.reference < 0 || track.reference >= static_cast<int>(track.observations.size()))
    throw DataError("refine_track: reference index out of range");

  const TrackObservation& ref = track.observations[static_cast<size_t>(track.reference)];
  if (ref.patch.data.empty()) throw ShapeError("refine_track: reference observation has no patch");

  TrackSample out = track;
  for (size_t i = 0; i < out.observations.size(); ++i) {
    if (static_cast<int>(i) == track.reference) continue;  // bit-identical by construction
    TrackObservation& obs = out.observations[i];
    if (obs.patch.data.empty()) throw ShapeError("refine_track: observation has no patch");
    const RefinementOutput<float> r = refine_pair(ref.patch, obs.patch, weights);
    obs.keypoint.x() += static_cast<double>(r.offset_b.dx);
    obs.keypoint.y() += static_cast<double>(r.offset_b.dy);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pose evaluation benchmark

PoseEvalReport eval_pose(const PoseEvalConfig& config, const ModelWeights<float>* weights) {
  if (config.pairs < 1) throw ShapeError("eval_pose: need at least one pair");
  if (config.matches_per_pair < 8) throw ShapeError("eval_pose: need at least eight matches");
  if (config.repetitions < 1) throw ShapeError("eval_pose: repetitions must be positive");
  if (config.thresholds_deg.empty()) throw ShapeError("eval_pose: no thresholds");
  const int patch_size = weights ? weights->config.patch_size : config.scene.patch_size;
  const double margin = patch_margin(patch_size);
  const int n_pairs = config.pairs;

  // The dataset (scenes and exact correspondences) is fixed; repetitions
  // redraw the keypoint noise and the RANSAC streams.
  std::vector<PairScene> scenes(static_cast<size_t>(n_pairs));
  std::vector<std::vector<GtCorrespondence>> gt(static_cast<size_t>(n_pairs));
  parallel_chunks(n_pairs, n_pairs, config.threads, [&](int, int begin, int end) {
    for (int p = begin; p < end; ++p) {
      scenes[static_cast<size_t>(p)] =
          PairScene::generate(Rng::mix(config.seed, kTagScene + static_cast<uint64_t>(p)),
                              config.scene);
      gt[static_cast<size_t>(p)] = sample_correspondences(
          scenes[static_cast<size_t>(p)], config.matches_per_pair, margin,
          Rng::mix(config.seed, kTagCorrespondences + static_cast<uint64_t>(p)));
    }
  });

  PoseEvalReport report;
  report.thresholds_deg = config.thresholds_deg;
  report.refined = weights != nullptr;
  report.auc_unrefined.assign(config.thresholds_deg.size(), 0.0);
  report.pair_err_unrefined.assign(static_cast<size_t>(n_pairs), 0.0);
  if (report.refined) {
    report.auc_refined.assign(config.thresholds_deg.size(), 0.0);
    report.pair_err_refined.assign(static_cast<size_t>(n_pairs), 0.0);
  }

  std::vector<double> err_u(static_cast<size_t>(n_pairs)), err_r(static_cast<size_t>(n_pairs));
  std::vector<char> fail_u(static_cast<size_t>(n_pairs)), fail_r(static_cast<size_t>(n_pairs));
  const double inv_reps = 1.0 / config.repetitions;
  for (int rep = 0; rep < config.repetitions; ++rep) {
    const uint64_t noise_seed = Rng::mix(config.seed, kTagNoise + static_cast<uint64_t>(rep));
    const uint64_t ransac_seed = Rng::mix(config.seed, kTagRansac + static_cast<uint64_t>(rep));
    parallel_chunks(n_pairs, eval_chunks(n_pairs), config.threads, [&](int, int begin, int end) {
      for (int p = begin; p < end; ++p) {
        const size_t sp = static_cast<size_t>(p);
        const PairScene& scene = scenes[sp];
        const CameraIntrinsics& cam = scene.intrinsics();
        const int n = static_cast<int>(gt[sp].size());
        Rng noise(Rng::mix(noise_seed, static_cast<uint64_t>(p)));
        std::vector<Eigen::Vector2d> ka(static_cast<size_t>(n)), kb(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
          const GtCorrespondence& c = gt[sp][static_cast<size_t>(i)];
          ka[static_cast<size_t>(i)] =
              c.a + config.noise_std * Eigen::Vector2d(noise.normal(), noise.normal());
          kb[static_cast<size_t>(i)] =
              c.b + config.noise_std * Eigen::Vector2d(noise.normal(), noise.normal());
        }
        bool failed = false;
        err_u[sp] = estimate_pair_error(ka, kb, cam, scene.pose(), config.ransac_iterations,
                                        config.ransac_threshold_px,
                                        Rng::mix(ransac_seed, 2 * static_cast<uint64_t>(p)),
                                        &failed);
        fail_u[sp] = failed ? 1 : 0;
        if (weights) {
          // Same perturbed keypoints, refined in place; border cases pass
          // through exactly as refine_matches would treat them.
          for (int i = 0; i < n; ++i)
            refine_one(scene.image_a(), scene.image_b(), *weights, margin,
                       ka[static_cast<size_t>(i)], kb[static_cast<size_t>(i)]);
          err_r[sp] = estimate_pair_error(ka, kb, cam, scene.pose(), config.ransac_iterations,
                                          config.ransac_threshold_px,
                                          Rng::mix(ransac_seed, 2 * static_cast<uint64_t>(p) + 1),
                                          &failed);
          fail_r[sp] = failed ? 1 : 0;
        }
      }
    });

    const std::vector<double> auc_u = auc(err_u, config.thresholds_deg);
    for (size_t t = 0; t < auc_u.size(); ++t) report.auc_unrefined[t] += auc_u[t] * inv_reps;
    for (int p = 0; p < n_pairs; ++p) {
      report.pair_err_unrefined[static_cast<size_t>(p)] +=
          err_u[static_cast<size_t>(p)] * inv_reps;
      report.failures_unrefined += fail_u[static_cast<size_t>(p)];
    }
    if (report.refined) {
      const std::vector<double> auc_r = auc(err_r, config.thresholds_deg);
      for (size_t t = 0; t < auc_r.size(); ++t) report.auc_refined[t] += auc_r[t] * inv_reps;
      for (int p = 0; p < n_pairs; ++p) {
        report.pair_err_refined[static_cast<size_t>(p)] +=
            err_r[static_cast<size_t>(p)] * inv_reps;
        report.failures_refined += fail_r[static_cast<size_t>(p)];
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Noise sweep

NoiseSweepReport eval_noise_sweep(const NoiseSweepConfig& config) {
  if (config.pairs < 1) throw ShapeError("eval_noise_sweep: need at least one pair");
  if (config.matches_per_pair < 8) throw ShapeError("eval_noise_sweep: need at least eight matches");
  if (config.noise_stds.empty()) throw ShapeError("eval_noise_sweep: no noise levels");
  for (const double s : config.noise_stds)
    if (!(s >= 0)) throw ShapeError("eval_noise_sweep: negative noise std");
  const double margin = patch_margin(config.scene.patch_size);
  const int n_pairs = config.pairs;
  const int n = config.matches_per_pair;

  std::vector<PairScene> scenes(static_cast<size_t>(n_pairs));
  std::vector<std::vector<GtCorrespondence>> gt(static_cast<size_t>(n_pairs));
  // One unit-variance draw per keypoint axis, shared across noise levels
  // (common random numbers), so each level perturbs the same matches in the
  // same directions, only scaled.
  std::vector<std::vector<Eigen::Vector2d>> unit_a(static_cast<size_t>(n_pairs));
  std::vector<std::vector<Eigen::Vector2d>> unit_b(static_cast<size_t>(n_pairs));
  parallel_chunks(n_pairs, n_pairs, config.threads, [&](int, int begin, int end) {
    for (int p = begin; p < end; ++p) {
      const size_t sp = static_cast<size_t>(p);
      scenes[sp] = PairScene::generate(
          Rng::mix(config.seed, kTagScene + static_cast<uint64_t>(p)), config.scene);
      gt[sp] = sample_correspondences(
          scenes[sp], n, margin,
          Rng::mix(config.seed, kTagCorrespondences + static_cast<uint64_t>(p)));
      Rng rng(Rng::mix(Rng::mix(config.seed, kTagNoise), static_cast<uint64_t>(p)));
      unit_a[sp].resize(static_cast<size_t>(n));
      unit_b[sp].resize(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) {
        unit_a[sp][static_cast<size_t>(i)] = {rng.normal(), rng.normal()};
        unit_b[sp][static_cast<size_t>(i)] = {rng.normal(), rng.normal()};
      }
    }
  });

  NoiseSweepReport report;
  report.noise_stds = config.noise_stds;
  report.thresholds_deg = config.thresholds_deg;
  report.auc.resize(config.noise_stds.size());

  std::vector<double> err(static_cast<size_t>(n_pairs));
  for (size_t s = 0; s < config.noise_stds.size(); ++s) {
    const double std_px = config.noise_stds[s];
    parallel_chunks(n_pairs, eval_chunks(n_pairs), config.threads, [&](int, int begin, int end) {
      for (int p = begin; p < end; ++p) {
        const size_t sp = static_cast<size_t>(p);
        std::vector<Eigen::Vector2d> ka(static_cast<size_t>(n)), kb(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
          const size_t si = static_cast<size_t>(i);
          ka[si] = gt[sp][si].a + std_px * unit_a[sp][si];
          kb[si] = gt[sp][si].b + std_px * unit_b[sp][si];
        }
        bool failed = false;
        // The RANSAC stream is also shared across noise levels to keep the
        // comparison paired.
        err[sp] = estimate_pair_error(
            ka, kb, scenes[sp].intrinsics(), scenes[sp].pose(), config.ransac_iterations,
            config.ransac_threshold_px,
            Rng::mix(Rng::mix(config.seed, kTagRansac), static_cast<uint64_t>(p)), &failed);
      }
    });
    report.auc[s] = auc(err, config.thresholds_deg);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Triangulation accuracy

namespace {

double triangulation_error(const TrackSample& track, const MultiViewScene& scene) {
  std::vector<Eigen::Matrix<double, 3, 4>> cameras;
  std::vector<Eigen::Vector2d> points;
  cameras.reserve(track.observations.size());
  points.reserve(track.observations.size());
  for (const TrackObservation& obs : track.observations) {
    const RelativePose& pose = scene.pose(obs.view);
    Eigen::Matrix<double, 3, 4> cam;
    cam.leftCols<3>() = pose.rotation;
    cam.col(3) = pose.translation;
    cameras.push_back(cam);
    points.push_back(scene.intrinsics().normalize(obs.keypoint));
  }
  try {
    return (triangulate_dlt(cameras, points) - track.world_point).norm();
  } catch (const NumericalError&) {
    return std::numeric_limits<double>::infinity();
  }
}

}  // namespace

TriEvalReport eval_triangulation(const TriEvalConfig& config, const ModelWeights<float>* weights) {
  if (config.scenes < 1) throw ShapeError("eval_triangulation: need at least one scene");
  if (config.points_per_scene < 1) throw ShapeError("eval_triangulation: need at least one point");
  if (config.thresholds.empty()) throw ShapeError("eval_triangulation: no thresholds");
  if (!(config.unit_scale > 0)) throw ShapeError("eval_triangulation: unit_scale must be positive");
  if (weights && weights->config.refine_mode != RefineMode::SecondOnly)
    throw DataError("eval_triangulation: track refinement needs SecondOnly-mode weights");

  std::vector<MultiViewScene> scenes;
  scenes.reserve(static_cast<size_t>(config.scenes));
  std::vector<std::pair<int, TrackSample>> tracks;  // (scene index, track)
  for (int s = 0; s < config.scenes; ++s) {
    scenes.push_back(MultiViewScene::generate(
        Rng::mix(config.seed, kTagTriScene + static_cast<uint64_t>(s)), config.scene));
    std::vector<TrackSample> built =
        build_tracks(scenes.back(), config.points_per_scene, config.noise_std,
                     Rng::mix(config.seed, kTagTriTracks + static_cast<uint64_t>(s)),
                     config.scene.patch_size);
    for (TrackSample& t : built) tracks.emplace_back(s, std::move(t));
  }
  const int n = static_cast<int>(tracks.size());
  if (n == 0) throw DataError("eval_triangulation: no usable tracks were built");

  TriEvalReport report;
  report.tracks = n;
  report.refined = weights != nullptr;
  report.thresholds.reserve(config.thresholds.size());
  for (const double t : config.thresholds) report.thresholds.push_back(t * config.unit_scale);

  std::vector<double> err_u(static_cast<size_t>(n)), err_r(static_cast<size_t>(n));
  parallel_chunks(n, eval_chunks(n), config.threads, [&](int, int begin, int end) {
    for (int i = begin; i < end; ++i) {
      const size_t si = static_cast<size_t>(i);
      const MultiViewScene& scene = scenes[static_cast<size_t>(tracks[si].first)];
      err_u[si] = triangulation_error(tracks[si].second, scene);
      if (weights) err_r[si] = triangulation_error(refine_track(tracks[si].second, *weights), scene);
    }
  });

  auto summarize = [n](const std::vector<double>& err, const std::vector<double>& thresholds,
                       std::vector<double>* acc, double* rmse, int* failures) {
    acc->assign(thresholds.size(), 0.0);
    double sq = 0;
    int finite = 0;
    for (const double e : err) {
      if (std::isfinite(e)) {
        sq += e * e;
        ++finite;
      } else {
        ++*failures;
      }
      for (size_t t = 0; t < thresholds.size(); ++t)
        if (e <= thresholds[t]) (*acc)[t] += 1.0 / n;
    }
    *rmse = finite > 0 ? std::sqrt(sq / finite) : std::numeric_limits<double>::infinity();
  };

  int failures_u = 0, failures_r = 0;
  summarize(err_u, report.thresholds, &report.acc_unrefined, &report.rmse_unrefined, &failures_u);
  if (report.refined)
    summarize(err_r, report.thresholds, &report.acc_refined, &report.rmse_refined, &failures_r);
  return report;
}

// ---------------------------------------------------------------------------
// Runtime measurement

TimingReport benchmark_refinement(const ModelWeights<float>& weights, int matches, int runs,
                                  uint64_t seed) {
  if (matches < 1 || runs < 1) throw ShapeError("benchmark_refinement: positive counts required");
  PairConfig pc;
  const PairScene scene = PairScene::generate(Rng::mix(seed, kTagBench), pc);
  // The extra sampling margin keeps essentially every perturbed keypoint
  // refinable, so the measurement covers full refinement work.
  const double margin = patch_margin(weights.config.patch_size);
  const std::vector<GtCorrespondence> gt =
      sample_correspondences(scene, matches, margin + 5.0, Rng::mix(seed, kTagBench + 1));
  Rng noise(Rng::mix(seed, kTagBench + 2));
  std::vector<MatchRecord> records(static_cast<size_t>(matches));
  for (int i = 0; i < matches; ++i) {
    MatchRecord& m = records[static_cast<size_t>(i)];
    m.a = gt[static_cast<size_t>(i)].a + 1.5 * Eigen::Vector2d(noise.normal(), noise.normal());
    m.b = gt[static_cast<size_t>(i)].b + 1.5 * Eigen::Vector2d(noise.normal(), noise.normal());
  }

  std::vector<double> times(static_cast<size_t>(runs));
  for (int r = 0; r < runs; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    const RefineSummary summary = refine_matches(scene.image_a(), scene.image_b(), records,
                                                 weights, /*threads=*/1);
    const auto t1 = std::chrono::steady_clock::now();
    if (summary.refined_count == 0)
      throw NumericalError("benchmark_refinement: no match was refinable");
    times[static_cast<size_t>(r)] =
        std::chrono::duration_cast<std::chrono::duration<double, std::milli>>(t1 - t0).count();
  }
  std::sort(times.begin(), times.end());
  TimingReport report;
  report.matches = matches;
  report.runs = runs;
  report.min_ms = times.front();
  report.max_ms = times.back();
  const size_t mid = times.size() / 2;
  report.median_ms =
      times.size() % 2 == 1 ? times[mid] : 0.5 * (times[mid - 1] + times[mid]);
  return report;
}

}  // namespace xrefine
