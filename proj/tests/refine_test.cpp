#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "xrefine/refine.hpp"

using namespace xrefine;

namespace {

ModelWeights<float> zero_offset_weights(RefineMode mode = RefineMode::Both) {
  ModelConfig c = ModelConfig::small();
  c.refine_mode = mode;
  ModelWeights<float> w = ModelWeights<float>::init(c, 9);
  w.score_w.fill(0.0f);
  w.score_b.fill(0.0f);
  return w;
}

}  // namespace

TEST_CASE("refine_matches: zero-offset model returns inputs exactly") {
  PairConfig pc;
  pc.width = 160;
  pc.height = 160;
  const PairScene scene = PairScene::generate(301, pc);
  const MatchSet set = sample_training_matches(scene, 32, 1.5, 302);

  std::vector<MatchRecord> matches;
  for (const MatchSample& m : set.samples) matches.push_back({m.keypoint_a, m.keypoint_b, 0});

  const ModelWeights<float> w = zero_offset_weights();
  const RefineSummary sum = refine_matches(scene.image_a(), scene.image_b(), matches, w, 1);
  REQUIRE(sum.matches.size() == matches.size());
  CHECK(sum.refined_count == static_cast<int>(matches.size()));
  CHECK(sum.passthrough_count == 0);
  for (size_t i = 0; i < matches.size(); ++i) {
    CHECK(sum.matches[i].a == matches[i].a);
    CHECK(sum.matches[i].b == matches[i].b);
    CHECK(sum.matches[i].flag == 0);
  }
}

TEST_CASE("refine_matches: every refinement stays within offset_scale") {
  PairConfig pc;
  pc.width = 160;
  pc.height = 160;
  const PairScene scene = PairScene::generate(311, pc);
  const MatchSet set = sample_training_matches(scene, 64, 1.5, 312);

  std::vector<MatchRecord> matches;
  for (const MatchSample& m : set.samples) matches.push_back({m.keypoint_a, m.keypoint_b, 0});

  ModelWeights<float> w = ModelWeights<float>::init(ModelConfig::small(), 10);
  for (float& v : w.score_w.data) v *= 50.0f;  // force large offsets
  const RefineSummary sum = refine_matches(scene.image_a(), scene.image_b(), matches, w, 1);
  for (size_t i = 0; i < matches.size(); ++i) {
    CHECK((sum.matches[i].a - matches[i].a).lpNorm<Eigen::Infinity>() <=
          w.config.offset_scale);
    CHECK((sum.matches[i].b - matches[i].b).lpNorm<Eigen::Infinity>() <=
          w.config.offset_scale);
  }
}

TEST_CASE("refine_matches: border keypoints pass through with flag 1") {
  PairConfig pc;
  pc.width = 160;
  pc.height = 160;
  const PairScene scene = PairScene::generate(321, pc);

  std::vector<MatchRecord> matches;
  matches.push_back({Eigen::Vector2d(80.0, 80.0), Eigen::Vector2d(80.0, 80.0), 0});
  matches.push_back({Eigen::Vector2d(3.0, 80.0), Eigen::Vector2d(80.0, 80.0), 0});   // a near edge
  matches.push_back({Eigen::Vector2d(80.0, 80.0), Eigen::Vector2d(80.0, 157.0), 0});  // b near edge

  ModelWeights<float> w = ModelWeights<float>::init(ModelConfig::small(), 11);
  const RefineSummary sum = refine_matches(scene.image_a(), scene.image_b(), matches, w, 1);
  CHECK(sum.refined_count == 1);
  CHECK(sum.passthrough_count == 2);
  CHECK(sum.matches[1].flag == 1);
  CHECK(sum.matches[1].a == matches[1].a);
  CHECK(sum.matches[1].b == matches[1].b);
  CHECK(sum.matches[2].flag == 1);

  // keypoints outside the image entirely are a data error
  std::vector<MatchRecord> bad;
  bad.push_back({Eigen::Vector2d(-5.0, 80.0), Eigen::Vector2d(80.0, 80.0), 0});
  CHECK_THROWS_AS(refine_matches(scene.image_a(), scene.image_b(), bad, w, 1), DataError);
}

TEST_CASE("refine_matches: bitwise thread invariance") {
  PairConfig pc;
  pc.width = 192;
  pc.height = 192;
  const PairScene scene = PairScene::generate(331, pc);
  const MatchSet set = sample_training_matches(scene, 120, 1.5, 332);

  std::vector<MatchRecord> matches;
  for (const MatchSample& m : set.samples) matches.push_back({m.keypoint_a, m.keypoint_b, 0});
  ModelWeights<float> w = ModelWeights<float>::init(ModelConfig::small(), 12);

  const RefineSummary one = refine_matches(scene.image_a(), scene.image_b(), matches, w, 1);
  const RefineSummary four = refine_matches(scene.image_a(), scene.image_b(), matches, w, 4);
  REQUIRE(one.matches.size() == four.matches.size());
  for (size_t i = 0; i < one.matches.size(); ++i) {
    CHECK(one.matches[i].a == four.matches[i].a);
    CHECK(one.matches[i].b == four.matches[i].b);
    CHECK(one.matches[i].flag == four.matches[i].flag);
  }
}

TEST_CASE("refine_track: reference bit-identical, others within range") {
  MultiViewConfig mc;
  mc.width = 192;
  mc.height = 192;
  const MultiViewScene scene = MultiViewScene::generate(341, mc);
  const std::vector<TrackSample> tracks = build_tracks(scene, 60, 1.5, 342);
  REQUIRE_FALSE(tracks.empty());

  ModelConfig cfg = ModelConfig::small();
  cfg.refine_mode = RefineMode::SecondOnly;
  const ModelWeights<float> w = ModelWeights<float>::init(cfg, 13);

  for (size_t t = 0; t < std::min<size_t>(tracks.size(), 10); ++t) {
    const TrackSample& track = tracks[t];
    const TrackSample refined = refine_track(track, w);
    REQUIRE(refined.observations.size() == track.observations.size());
    CHECK(refined.reference == track.reference);

    const size_t ref = static_cast<size_t>(track.reference);
    CHECK(refined.observations[ref].keypoint == track.observations[ref].keypoint);
    for (size_t i = 0; i < track.observations.size(); ++i) {
      if (i == ref) continue;
      const double moved =
          (refined.observations[i].keypoint - track.observations[i].keypoint).norm();
      CHECK(moved <= cfg.offset_scale * std::sqrt(2.0) + 1e-9);
    }
  }

  // symmetric weights are the wrong tool for tracks
  const ModelWeights<float> sym = ModelWeights<float>::init(ModelConfig::small(), 14);
  CHECK_THROWS_AS(refine_track(tracks[0], sym), DataError);
}

TEST_CASE("refine_track: observation order does not matter") {
  MultiViewConfig mc;
  mc.width = 192;
  mc.height = 192;
  const MultiViewScene scene = MultiViewScene::generate(351, mc);
  const std::vector<TrackSample> tracks = build_tracks(scene, 60, 1.5, 352);

  ModelConfig cfg = ModelConfig::small();
  cfg.refine_mode = RefineMode::SecondOnly;
  const ModelWeights<float> w = ModelWeights<float>::init(cfg, 15);

  const TrackSample* chosen = nullptr;
  for (const TrackSample& t : tracks)
    if (t.observations.size() >= 3) {
      chosen = &t;
      break;
    }
  REQUIRE(chosen != nullptr);

  const TrackSample refined = refine_track(*chosen, w);

  // permute the observations, refine, undo the permutation
  TrackSample permuted = *chosen;
  std::rotate(permuted.observations.begin(), permuted.observations.begin() + 1,
              permuted.observations.end());
  const size_t n = permuted.observations.size();
  permuted.reference =
      static_cast<int>((static_cast<size_t>(chosen->reference) + n - 1) % n);
  const TrackSample refined_perm = refine_track(permuted, w);

  for (size_t i = 0; i < n; ++i) {
    const size_t j = (i + n - 1) % n;  // position of observation i in permuted
    CHECK(refined.observations[i].keypoint == refined_perm.observations[j].keypoint);
  }
}

TEST_CASE("refine_track: a two-view track equals the pairwise path") {
  MultiViewConfig mc;
  mc.width = 192;
  mc.height = 192;
  mc.views = 2;
  const MultiViewScene scene = MultiViewScene::generate(361, mc);
  const std::vector<TrackSample> tracks = build_tracks(scene, 40, 1.5, 362);

  ModelConfig cfg = ModelConfig::small();
  cfg.refine_mode = RefineMode::SecondOnly;
  const ModelWeights<float> w = ModelWeights<float>::init(cfg, 16);

  int tested = 0;
  for (const TrackSample& t : tracks) {
    if (t.observations.size() != 2) continue;
    const TrackSample refined = refine_track(t, w);
    const size_t ref = static_cast<size_t>(t.reference);
    const size_t other = 1 - ref;

    const RefinementOutput<float> pair = refine_pair(
        t.observations[ref].patch, t.observations[other].patch, w);
    const Eigen::Vector2d expect =
        t.observations[other].keypoint +
        Eigen::Vector2d(pair.offset_b.dx, pair.offset_b.dy);
    CHECK((refined.observations[other].keypoint - expect).norm() == 0.0);
    ++tested;
    if (tested >= 5) break;
  }
  CHECK(tested > 0);
}

TEST_CASE("eval_pose: runs both conditions and reports finite AUCs") {
  PoseEvalConfig cfg;
  cfg.pairs = 3;
  cfg.matches_per_pair = 96;
  cfg.repetitions = 2;
  cfg.ransac_iterations = 200;
  cfg.seed = 5;
  cfg.threads = 1;
  cfg.scene.width = 192;
  cfg.scene.height = 192;

  const PoseEvalReport unref = eval_pose(cfg, nullptr);
  CHECK_FALSE(unref.refined);
  REQUIRE(unref.auc_unrefined.size() == cfg.thresholds_deg.size());
  for (double v : unref.auc_unrefined) {
    CHECK(v >= 0.0);
    CHECK(v <= 100.0);
  }
  REQUIRE(static_cast<int>(unref.pair_err_unrefined.size()) == cfg.pairs);

  const ModelWeights<float> w = zero_offset_weights();
  const PoseEvalReport both = eval_pose(cfg, &w);
  CHECK(both.refined);
  REQUIRE(both.auc_refined.size() == cfg.thresholds_deg.size());
  // zero offsets: the refined condition IS the unrefined condition
  for (size_t i = 0; i < both.auc_refined.size(); ++i)
    CHECK(both.auc_refined[i] == both.auc_unrefined[i]);

  // determinism across calls
  const PoseEvalReport again = eval_pose(cfg, nullptr);
  for (size_t i = 0; i < again.auc_unrefined.size(); ++i)
    CHECK(again.auc_unrefined[i] == unref.auc_unrefined[i]);
}

TEST_CASE("eval_noise_sweep: zero noise is near-perfect and the config is honored") {
  NoiseSweepConfig cfg;
  cfg.pairs = 3;
  cfg.matches_per_pair = 96;
  cfg.noise_stds = {0.0, 2.0};
  cfg.ransac_iterations = 200;
  cfg.seed = 6;
  cfg.threads = 1;
  cfg.scene.width = 192;
  cfg.scene.height = 192;

  const NoiseSweepReport rep = eval_noise_sweep(cfg);
  REQUIRE(rep.noise_stds == cfg.noise_stds);
  REQUIRE(rep.auc.size() == 2);
  REQUIRE(rep.auc[0].size() == cfg.thresholds_deg.size());
  CHECK(rep.auc[0][0] > 95.0);          // exact matches, tiny pose error
  CHECK(rep.auc[1][0] < rep.auc[0][0]);  // noise strictly hurts
}

TEST_CASE("eval_triangulation: zero-offset refinement reproduces the baseline") {
  TriEvalConfig cfg;
  cfg.scenes = 1;
  cfg.points_per_scene = 40;
  cfg.seed = 7;
  cfg.threads = 1;
  cfg.scene.width = 192;
  cfg.scene.height = 192;

  const ModelWeights<float> w = zero_offset_weights(RefineMode::SecondOnly);
  const TriEvalReport rep = eval_triangulation(cfg, &w);
  CHECK(rep.refined);
  CHECK(rep.tracks > 10);
  REQUIRE(rep.thresholds.size() == cfg.thresholds.size());
  for (size_t i = 0; i < rep.thresholds.size(); ++i) {
    CHECK(rep.thresholds[i] == cfg.thresholds[i] * cfg.unit_scale);
    CHECK(rep.acc_refined[i] == rep.acc_unrefined[i]);
    CHECK(rep.acc_unrefined[i] >= 0.0);
    CHECK(rep.acc_unrefined[i] <= 1.0);
  }
  CHECK(rep.rmse_refined == rep.rmse_unrefined);
  // thresholds are increasing, so accuracy is monotone
  for (size_t i = 1; i < rep.thresholds.size(); ++i)
    CHECK(rep.acc_unrefined[i] >= rep.acc_unrefined[i - 1]);
}

TEST_CASE("benchmark_refinement: reports ordered, positive timings") {
  const ModelWeights<float> w = ModelWeights<float>::init(ModelConfig::small(), 17);
  const TimingReport rep = benchmark_refinement(w, 64, 3, 8);
  CHECK(rep.matches == 64);
  CHECK(rep.runs == 3);
  CHECK(rep.min_ms > 0.0);
  CHECK(rep.min_ms <= rep.median_ms);
  CHECK(rep.median_ms <= rep.max_ms);
}
