#pragma once

#include <optional>
#include <vector>

#include "xrefine/data.hpp"
#include "xrefine/geometry.hpp"
#include "xrefine/model.hpp"

// User-facing pipelines: batch two-view match refinement, reference-anchored
// track refinement, and the three evaluation experiments (pose AUC, noise
// sweep, triangulation accuracy).

namespace xrefine {

// ---------------------------------------------------------------------------
// Two-view refinement

struct RefineSummary {
  std::vector<MatchRecord> matches;  // refined coordinates; flag 1 = passed through
  int refined_count = 0;
  int passthrough_count = 0;  // patch support left an image; coordinates unchanged
};

/// Refines every match whose two patch supports lie inside the images;
/// border matches pass through unchanged with flag 1. Keypoints outside the
/// image area are a data error. Results are bitwise independent of the
/// thread count.
RefineSummary refine_matches(const Image& image_a, const Image& image_b,
                             const std::vector<MatchRecord>& matches,
                             const ModelWeights<float>& weights, int threads = 0);

// ---------------------------------------------------------------------------
// Track refinement (SecondOnly weights only)

/// Refines every non-reference observation toward the reference patch using
/// the patches stored in the track. The reference observation is returned
/// bit-identical; per-pair calls are independent, so observation order does
/// not matter. Throws DataError when symmetric-mode weights are supplied.
TrackSample refine_track(const TrackSample& track, const ModelWeights<float>& weights);

// ---------------------------------------------------------------------------
// Pose evaluation benchmark

struct PoseEvalConfig {
  int pairs = 50;
  int matches_per_pair = 512;
  double noise_std = 1.5;
  int repetitions = 10;
  uint64_t seed = 0;
  int ransac_iterations = 1000;
  double ransac_threshold_px = 1.0;
  std::vector<double> thresholds_deg = {5.0, 10.0, 20.0};
  PairConfig scene;
  int threads = 0;
};

struct PoseEvalReport {
  std::vector<double> thresholds_deg;
  std::vector<double> auc_unrefined;  // per threshold, averaged over repetitions
  std::vector<double> auc_refined;    // empty when no weights were supplied
  std::vector<double> pair_err_unrefined;  // per pair, mean over repetitions (deg)
  std::vector<double> pair_err_refined;
  int failures_unrefined = 0;  // estimation failures across all reps (scored 180)
  int failures_refined = 0;
  bool refined = false;
};

/// Synthetic two-view pose benchmark: perturbed ground-truth matches,
/// optional refinement, RANSAC + pose recovery, AUC over pairs, averaged over
/// `repetitions` independently seeded repetitions.
PoseEvalReport eval_pose(const PoseEvalConfig& config, const ModelWeights<float>* weights);

// ---------------------------------------------------------------------------
// Noise sweep (geometry pipeline only, no refinement)

struct NoiseSweepConfig {
  int pairs = 50;
  int matches_per_pair = 512;
  std::vector<double> noise_stds = {0.0, 1.0, 2.0, 3.0};
  uint64_t seed = 0;
  int ransac_iterations = 1000;
  double ransac_threshold_px = 1.0;
  std::vector<double> thresholds_deg = {5.0, 10.0, 20.0};
  PairConfig scene;
  int threads = 0;
};

struct NoiseSweepReport {
  std::vector<double> noise_stds;
  std::vector<double> thresholds_deg;
  std::vector<std::vector<double>> auc;  // [std][threshold]
};

/// Ground-truth matches perturbed at each noise level, then scored through
/// the pose pipeline. The same correspondences underlie every noise level.
NoiseSweepReport eval_noise_sweep(const NoiseSweepConfig& config);

// ---------------------------------------------------------------------------
// Triangulation accuracy

struct TriEvalConfig {
  int scenes = 4;
  int points_per_scene = 150;
  double noise_std = 1.5;
  uint64_t seed = 0;
  std::vector<double> thresholds = {1.0, 2.0, 5.0};  // multiplied by unit_scale
  double unit_scale = 0.06;                           // scene units per threshold unit
  MultiViewConfig scene;
  int threads = 0;
};

struct TriEvalReport {
  std::vector<double> thresholds;  // after unit scaling
  std::vector<double> acc_unrefined;  // fraction of tracks within threshold
  std::vector<double> acc_refined;    // empty when no weights supplied
  double rmse_unrefined = 0;
  double rmse_refined = 0;
  int tracks = 0;
  bool refined = false;
};

/// Builds noisy tracks over multi-view scenes, optionally refines them with a
/// SecondOnly model, triangulates, and reports the fraction of points within
/// each distance threshold of ground truth.
TriEvalReport eval_triangulation(const TriEvalConfig& config, const ModelWeights<float>* weights);

// ---------------------------------------------------------------------------
// Runtime measurement

struct TimingReport {
  int matches = 0;
  int runs = 0;
  double median_ms = 0;
  double min_ms = 0;
  double max_ms = 0;
};

/// Median single-threaded wall-clock time to refine `matches` synthetic
/// matches, over `runs` repetitions of the full batch.
TimingReport benchmark_refinement(const ModelWeights<float>& weights, int matches, int runs,
                                  uint64_t seed);

}  // namespace xrefine
