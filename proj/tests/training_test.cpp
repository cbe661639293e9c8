#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "xrefine/training.hpp"

using namespace xrefine;
namespace fs = std::filesystem;

namespace {

/// Tiny config so every case stays in the seconds range.
TrainConfig tiny_config() {
  TrainConfig c;
  c.epochs = 1;
  c.pairs_per_epoch = 2;
  c.matches_per_pair = 24;
  c.batch_pairs = 2;
  c.val_pairs = 2;
  c.val_matches_per_pair = 24;
  c.threads = 1;
  c.seed = 77;
  c.scene.width = 160;
  c.scene.height = 160;
  return c;
}

bool same_weights(ModelWeights<float>& a, ModelWeights<float>& b) {
  bool same = a.config == b.config;
  a.for_each_param([&](const std::string& name, Tensor<float>& t) {
    b.for_each_param([&](const std::string& bname, Tensor<float>& bt) {
      if (bname != name) return;
      if (t.data != bt.data) same = false;
    });
  });
  return same;
}

}  // namespace

TEST_CASE("train config: validation rejects bad values") {
  CHECK_NOTHROW(TrainConfig::desk().validate());
  CHECK_NOTHROW(TrainConfig::paper().validate());

  TrainConfig c = tiny_config();
  c.epochs = -1;
  CHECK_THROWS_AS(c.validate(), ShapeError);
  c = tiny_config();
  c.lr = 0.0;
  CHECK_THROWS_AS(c.validate(), ShapeError);
  c = tiny_config();
  c.clamp_px2 = 0.0;
  CHECK_THROWS_AS(c.validate(), ShapeError);
  c = tiny_config();
  c.offset_penalty = -0.1;
  CHECK_THROWS_AS(c.validate(), ShapeError);
  c = tiny_config();
  c.batch_pairs = 0;
  CHECK_THROWS_AS(c.validate(), ShapeError);
}

TEST_CASE("match_loss_px2: exact correspondences, clamping, gradients") {
  PairConfig pc;
  const PairScene scene = PairScene::generate(5, pc);
  const Eigen::Matrix3d e = scene.essential();
  const CameraIntrinsics& cam = scene.intrinsics();

  // exact correspondences have zero Sampson distance
  Rng rng(6);
  for (int i = 0; i < 50; ++i) {
    const Eigen::Vector2d pa(rng.uniform(10.0, 245.0), rng.uniform(10.0, 245.0));
    const auto m = scene.map_a_to_b(pa);
    if (!m.valid) continue;
    const double loss = match_loss_px2(e, cam, pa, m.point, 10.0);
    CHECK(loss < 1e-12);
  }

  // a far-off pair hits the clamp with zeroed gradients
  const Eigen::Vector2d pa(128.0, 128.0);
  const auto m = scene.map_a_to_b(pa);
  REQUIRE(m.valid);
  OffsetGrad g;
  const double clamped = match_loss_px2(e, cam, pa, m.point + Eigen::Vector2d(0, 40), 10.0, &g);
  CHECK(clamped == 10.0);
  CHECK(g.clamped);
  CHECK(g.dbx == 0.0);
  CHECK(g.dby == 0.0);

  // below the clamp the gradient matches finite differences
  Eigen::Vector2d pb = m.point + Eigen::Vector2d(0.8, -0.5);
  OffsetGrad g2;
  match_loss_px2(e, cam, pa, pb, 1e9, &g2);
  const double h = 1e-5;
  auto at = [&](double ax, double ay, double bx, double by) {
    return match_loss_px2(e, cam, Eigen::Vector2d(ax, ay), Eigen::Vector2d(bx, by), 1e9);
  };
  const double fdax =
      (at(pa.x() + h, pa.y(), pb.x(), pb.y()) - at(pa.x() - h, pa.y(), pb.x(), pb.y())) / (2 * h);
  const double fday =
      (at(pa.x(), pa.y() + h, pb.x(), pb.y()) - at(pa.x(), pa.y() - h, pb.x(), pb.y())) / (2 * h);
  const double fdbx =
      (at(pa.x(), pa.y(), pb.x() + h, pb.y()) - at(pa.x(), pa.y(), pb.x() - h, pb.y())) / (2 * h);
  const double fdby =
      (at(pa.x(), pa.y(), pb.x(), pb.y() + h) - at(pa.x(), pa.y(), pb.x(), pb.y() - h)) / (2 * h);
  CHECK(g2.dax == doctest::Approx(fdax).epsilon(1e-5));
  CHECK(g2.day == doctest::Approx(fday).epsilon(1e-5));
  CHECK(g2.dbx == doctest::Approx(fdbx).epsilon(1e-5));
  CHECK(g2.dby == doctest::Approx(fdby).epsilon(1e-5));
}

TEST_CASE("epipolar_loss: zero-offset model on exact matches scores zero") {
  PairConfig pc;
  pc.width = 160;
  pc.height = 160;
  const PairScene scene = PairScene::generate(41, pc);
  const MatchSet set = sample_training_matches(scene, 16, 0.0, 42);

  ModelConfig mc = ModelConfig::small();
  ModelWeights<float> w = ModelWeights<float>::init(mc, 1);
  w.score_w.fill(0.0f);  // uniform score map -> zero offsets
  w.score_b.fill(0.0f);

  std::vector<int> idx(set.samples.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  const LossOutput<float> out =
      epipolar_loss(set.samples, idx, scene.essential(), set.cam, w, 10.0);
  CHECK(out.loss < 1e-9);
  CHECK(out.clamped == 0);

  // loss is non-negative and the gradient of a flat-zero loss vanishes
  bool all_zero = true;
  out.grads.for_each_param([&](const std::string&, const Tensor<float>& t) {
    for (float v : t.data)
      if (v != 0.0f) all_zero = false;
  });
  CHECK(all_zero);

  CHECK_THROWS_AS(epipolar_loss(set.samples, {}, scene.essential(), set.cam, w, 10.0),
                  ShapeError);
}

TEST_CASE("epipolar_loss: directional derivative matches finite differences") {
  // Full-model FD probes live in the gradient-check harness; here one random
  // direction through every parameter cross-checks the assembled batch
  // gradient in double precision.
  PairConfig pc;
  pc.width = 160;
  pc.height = 160;
  const PairScene scene = PairScene::generate(51, pc);
  const MatchSet set = sample_training_matches(scene, 4, 1.5, 52);

  ModelConfig mc = ModelConfig::small();
  ModelWeights<double> w = ModelWeights<float>::init(mc, 2).cast<double>();
  std::vector<int> idx = {0, 1, 2, 3};

  const LossOutput<double> out =
      epipolar_loss(set.samples, idx, scene.essential(), set.cam, w, 10.0, 1, 0.003);

  Rng rng(53);
  ModelWeights<double> dir = ModelWeights<double>::zeros_like(mc);
  dir.for_each_param([&](const std::string&, Tensor<double>& t) {
    for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
  });

  double dot = 0;
  out.grads.for_each_param([&](const std::string& name, const Tensor<double>& g) {
    dir.for_each_param([&](const std::string& dname, Tensor<double>& d) {
      if (dname != name) return;
      for (size_t i = 0; i < g.data.size(); ++i) dot += g.data[i] * d.data[i];
    });
  });

  const double h = 1e-6;
  auto shifted = [&](double t) {
    ModelWeights<double> ws = w;
    ws.for_each_param([&](const std::string& name, Tensor<double>& wt) {
      dir.for_each_param([&](const std::string& dname, Tensor<double>& d) {
        if (dname != name) return;
        for (size_t i = 0; i < wt.data.size(); ++i) wt.data[i] += t * d.data[i];
      });
    });
    return epipolar_loss(set.samples, idx, scene.essential(), set.cam, ws, 10.0, 1, 0.003).loss;
  };
  const double fd = (shifted(h) - shifted(-h)) / (2 * h);
  CHECK(dot == doctest::Approx(fd).epsilon(1e-4));
}

TEST_CASE("epipolar_loss: bitwise thread invariance") {
  PairConfig pc;
  pc.width = 160;
  pc.height = 160;
  const PairScene scene = PairScene::generate(61, pc);
  const MatchSet set = sample_training_matches(scene, 96, 1.5, 62);
  ModelWeights<float> w = ModelWeights<float>::init(ModelConfig::small(), 3);

  std::vector<int> idx(set.samples.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);

  const LossOutput<float> one =
      epipolar_loss(set.samples, idx, scene.essential(), set.cam, w, 10.0, 1, 0.005);
  const LossOutput<float> four =
      epipolar_loss(set.samples, idx, scene.essential(), set.cam, w, 10.0, 4, 0.005);
  CHECK(one.loss == four.loss);
  CHECK(one.clamped == four.clamped);
  bool same = true;
  one.grads.for_each_param([&](const std::string& name, const Tensor<float>& t) {
    four.grads.for_each_param([&](const std::string& fname, const Tensor<float>& ft) {
      if (fname != name) return;
      if (t.data != ft.data) same = false;
    });
  });
  CHECK(same);
}

TEST_CASE("epipolar_loss: offset penalty adds the quadratic term") {
  PairConfig pc;
  pc.width = 160;
  pc.height = 160;
  const PairScene scene = PairScene::generate(71, pc);
  const MatchSet set = sample_training_matches(scene, 16, 1.5, 72);
  ModelWeights<float> w = ModelWeights<float>::init(ModelConfig::small(), 4);
  for (float& v : w.score_w.data) v *= 40.0f;  // push offsets away from zero

  std::vector<int> idx(set.samples.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);

  const double base =
      epipolar_loss(set.samples, idx, scene.essential(), set.cam, w, 10.0, 1, 0.0).loss;
  const double pen =
      epipolar_loss(set.samples, idx, scene.essential(), set.cam, w, 10.0, 1, 0.05).loss;
  CHECK(pen > base);

  // the penalty equals 0.05 * mean squared offset magnitude over the batch
  double expected = 0;
  for (const MatchSample& m : set.samples) {
    const RefinementOutput<float> r = refine_pair(m.patch_a, m.patch_b, w);
    expected += static_cast<double>(r.offset_a.dx) * r.offset_a.dx +
                static_cast<double>(r.offset_a.dy) * r.offset_a.dy +
                static_cast<double>(r.offset_b.dx) * r.offset_b.dx +
                static_cast<double>(r.offset_b.dy) * r.offset_b.dy;
  }
  expected *= 0.05 / static_cast<double>(set.samples.size());
  CHECK(pen - base == doctest::Approx(expected).epsilon(1e-4));
}

TEST_CASE("validate: zero-offset model reports the injected noise level") {
  PairConfig pc;
  pc.width = 160;
  pc.height = 160;
  std::vector<MatchSet> sets;
  for (int i = 0; i < 3; ++i) {
    const PairScene scene = PairScene::generate(80 + static_cast<uint64_t>(i), pc);
    sets.push_back(sample_training_matches(scene, 200, 1.5, 90 + static_cast<uint64_t>(i)));
  }
  ModelWeights<float> w = ModelWeights<float>::init(ModelConfig::small(), 5);
  w.score_w.fill(0.0f);
  w.score_b.fill(0.0f);

  const ValReport rep = validate(sets, w, 10.0, 1);
  CHECK(rep.refined_error_px == rep.unrefined_error_px);
  // mean 2D distance of N(0, 1.5^2 I) noise is 1.5 * sqrt(pi/2) ~ 1.88
  CHECK(rep.unrefined_error_px > 1.6);
  CHECK(rep.unrefined_error_px < 2.2);
  CHECK(std::isfinite(rep.mean_residual_px2));
  CHECK_FALSE(rep.auc5.has_value());
}

TEST_CASE("validate: zero-noise sets give zero error for the zero-offset model") {
  PairConfig pc;
  pc.width = 160;
  pc.height = 160;
  std::vector<MatchSet> sets;
  sets.push_back(sample_training_matches(PairScene::generate(85, pc), 60, 0.0, 86));
  ModelWeights<float> w = ModelWeights<float>::init(ModelConfig::small(), 6);
  w.score_w.fill(0.0f);
  w.score_b.fill(0.0f);

  const ValReport rep = validate(sets, w, 10.0, 1);
  CHECK(rep.unrefined_error_px == 0.0);
  CHECK(rep.refined_error_px == 0.0);
  CHECK(rep.mean_residual_px2 < 1e-9);
}

TEST_CASE("train: zero epochs returns the scored initialization") {
  TrainConfig c = tiny_config();
  c.epochs = 0;
  const TrainState st = train(c);
  CHECK(st.completed_epochs == 0);
  CHECK_FALSE(st.aborted);
  CHECK(st.best.epoch == 0);
  CHECK(st.best.metric > 0.0);  // validation ran on the init weights
  REQUIRE(st.history.size() == 1);
  CHECK(st.history[0].epoch == 0);
  CHECK(std::isnan(st.history[0].loss));

  ModelWeights<float> fresh = ModelWeights<float>::init(c.model, c.seed);
  ModelWeights<float> got = st.best.weights;
  CHECK(same_weights(fresh, got));
}

TEST_CASE("train: same seed is bitwise reproducible, different seed is not") {
  TrainConfig c = tiny_config();
  TrainState a = train(c);
  TrainState b = train(c);
  CHECK(same_weights(a.weights, b.weights));
  CHECK(a.best.metric == b.best.metric);
  REQUIRE(a.history.size() == b.history.size());
  for (size_t i = 0; i < a.history.size(); ++i) {
    const bool both_nan = std::isnan(a.history[i].loss) && std::isnan(b.history[i].loss);
    CHECK((both_nan || a.history[i].loss == b.history[i].loss));
    CHECK(a.history[i].val_metric == b.history[i].val_metric);
  }

  TrainConfig c2 = tiny_config();
  c2.seed = 78;
  TrainState d = train(c2);
  CHECK_FALSE(same_weights(a.weights, d.weights));
}

TEST_CASE("train: thread count does not change the result") {
  TrainConfig c = tiny_config();
  TrainState one = train(c);
  c.threads = 3;
  TrainState three = train(c);
  CHECK(same_weights(one.weights, three.weights));
  CHECK(one.best.metric == three.best.metric);
}

TEST_CASE("train: resume reproduces the uninterrupted run bitwise") {
  TrainConfig full = tiny_config();
  full.epochs = 2;
  const TrainState straight = train(full);

  TrainConfig first = tiny_config();
  first.epochs = 1;
  TrainState part = train(first);
  CHECK(part.completed_epochs == 1);
  const TrainState resumed = train(full, &part);

  CHECK(resumed.completed_epochs == 2);
  TrainState s = straight;
  TrainState r = resumed;
  CHECK(same_weights(s.weights, r.weights));
  CHECK(s.best.metric == r.best.metric);
  REQUIRE(s.history.size() == r.history.size());
  for (size_t i = 0; i < s.history.size(); ++i)
    CHECK(s.history[i].val_metric == r.history[i].val_metric);
}

TEST_CASE("train state: save/load round trip is bitwise") {
  TrainConfig c = tiny_config();
  TrainState st = train(c);

  const fs::path dir = fs::temp_directory_path() / "xrefine_training_test";
  fs::create_directories(dir);
  const fs::path file = dir / "state.xrs";
  save_train_state(st, file);
  TrainState back = load_train_state(file);

  CHECK(back.completed_epochs == st.completed_epochs);
  CHECK(back.aborted == st.aborted);
  CHECK(back.best.epoch == st.best.epoch);
  CHECK(back.best.metric == st.best.metric);
  CHECK(same_weights(back.weights, st.weights));
  CHECK(same_weights(back.best.weights, st.best.weights));
  REQUIRE(back.adam.m.size() == st.adam.m.size());
  for (size_t i = 0; i < st.adam.m.size(); ++i) {
    CHECK(back.adam.m[i].data == st.adam.m[i].data);
    CHECK(back.adam.v[i].data == st.adam.v[i].data);
  }
  CHECK(back.adam.step == st.adam.step);
  REQUIRE(back.history.size() == st.history.size());

  CHECK_THROWS_AS(load_train_state(dir / "missing.xrs"), DataError);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint sidecar: records the run parameters") {
  TrainConfig c = tiny_config();
  c.epochs = 0;
  const TrainState st = train(c);
  const Manifest m = checkpoint_sidecar(st.best, c);
  CHECK(m.has("train.seed"));
  CHECK(m.has("train.epochs"));
  CHECK(m.has("train.lr"));
  CHECK(m.has("train.offset_penalty"));
  CHECK(m.has("checkpoint.epoch"));
  CHECK(m.has("checkpoint.metric"));
}
