#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "xrefine/model.hpp"

using namespace xrefine;

namespace {

ModelWeights<float> random_weights(const ModelConfig& config, uint64_t seed) {
  return ModelWeights<float>::init(config, seed);
}

}  // namespace

TEST_CASE("model config: presets and the shape law") {
  const ModelConfig s = ModelConfig::small();
  CHECK(s.patch_size == 11);
  CHECK(s.embed_spatial == 3);  // 11x11 -> 3x3 with one padded conv
  CHECK(s.attention_blocks == 1);
  CHECK(s.padding_pattern() == std::array<bool, 5>{false, false, false, true, false});

  const ModelConfig l = ModelConfig::large();
  CHECK(l.patch_size == 11);
  CHECK(l.embed_spatial == 5);  // 11x11 -> 5x5 with two padded convs
  CHECK(l.attention_blocks == 3);
  CHECK(l.padding_pattern() == std::array<bool, 5>{false, false, true, true, false});

  // the law holds for other odd patch sizes too
  CHECK(ModelConfig::small(15).embed_spatial == 7);
  CHECK(ModelConfig::large(15).embed_spatial == 9);
  CHECK(ModelConfig::small(15).offset_scale == 7.0);

  CHECK_THROWS_AS(ModelConfig::small(8).validate(), ShapeError);   // even
  CHECK_THROWS_AS(ModelConfig::small(5).validate(), ShapeError);   // too small
  ModelConfig bad = ModelConfig::small();
  bad.heads = 5;  // 64 % 5 != 0
  CHECK_THROWS_AS(bad.validate(), ShapeError);
  bad = ModelConfig::small();
  bad.embed_spatial = 4;
  CHECK_THROWS_AS(bad.validate(), ShapeError);
}

TEST_CASE("model: embedding spatial size follows the padding pattern") {
  for (bool large : {false, true}) {
    const ModelConfig c = large ? ModelConfig::large() : ModelConfig::small();
    ModelWeights<float> w = random_weights(c, 3);
    TensorF patch = TensorF::zeros({1, c.patch_size, c.patch_size});
    Rng rng(5);
    for (float& v : patch.data) v = static_cast<float>(rng.uniform());

    const TensorF e = encode(patch, w);
    REQUIRE(e.rank() == 3);
    CHECK(e.dim(0) == c.channels_out);
    CHECK(e.dim(1) == c.embed_spatial);
    CHECK(e.dim(2) == c.embed_spatial);

    RefinementOutput<float> out = refine_pair(patch, patch, w);
    CHECK(out.score_map_a.dim(0) == c.embed_spatial);
    CHECK(out.score_map_a.dim(1) == c.embed_spatial);
  }
}

TEST_CASE("model: parameter counts for the two presets") {
  // conv stack 1->16->16->64->64->64 (3x3 kernels + biases) = 85616,
  // positional encoding ExE x 64 (576 small / 1600 large), four 64x64
  // projections per attention block (16384 x 1 / x 3), score conv 577.
  ModelWeights<float> s = random_weights(ModelConfig::small(), 1);
  ModelWeights<float> l = random_weights(ModelConfig::large(), 1);
  CHECK(s.parameter_count() == 103153);
  CHECK(l.parameter_count() == 136945);
}

TEST_CASE("model: zeroed score head refines to near-zero offsets") {
  ModelConfig c = ModelConfig::small();
  ModelWeights<float> w = random_weights(c, 11);
  w.score_w.fill(0.0f);
  w.score_b.fill(0.0f);

  Rng rng(13);
  TensorF pa = TensorF::zeros({1, 11, 11});
  TensorF pb = TensorF::zeros({1, 11, 11});
  for (float& v : pa.data) v = static_cast<float>(rng.uniform());
  for (float& v : pb.data) v = static_cast<float>(rng.uniform());

  const RefinementOutput<float> out = refine_pair(pa, pb, w);
  // uniform score map -> soft-argmax lands on the grid centroid, up to the
  // rounding of the single-precision expectation sum
  CHECK(std::abs(out.offset_a.dx) <= 1e-6f);
  CHECK(std::abs(out.offset_a.dy) <= 1e-6f);
  CHECK(std::abs(out.offset_b.dx) <= 1e-6f);
  CHECK(std::abs(out.offset_b.dy) <= 1e-6f);
}

TEST_CASE("model: offsets are bounded by offset_scale") {
  for (bool large : {false, true}) {
    const ModelConfig c = large ? ModelConfig::large() : ModelConfig::small();
    Rng rng(101);
    for (int trial = 0; trial < 20; ++trial) {
      ModelWeights<float> w = random_weights(c, 1000 + static_cast<uint64_t>(trial));
      // crank the score head so the soft-argmax saturates toward a corner
      for (float& v : w.score_w.data) v *= 100.0f;
      TensorF pa = TensorF::zeros({1, 11, 11});
      TensorF pb = TensorF::zeros({1, 11, 11});
      for (float& v : pa.data) v = static_cast<float>(rng.uniform());
      for (float& v : pb.data) v = static_cast<float>(rng.uniform());
      const RefinementOutput<float> out = refine_pair(pa, pb, w);
      for (float v : {out.offset_a.dx, out.offset_a.dy, out.offset_b.dx, out.offset_b.dy}) {
        CHECK(v <= c.offset_scale);
        CHECK(v >= -c.offset_scale);
      }
    }
  }
}

TEST_CASE("model: SecondOnly mode pins the first keypoint") {
  ModelConfig c = ModelConfig::small();
  c.refine_mode = RefineMode::SecondOnly;
  ModelWeights<float> w = random_weights(c, 21);

  Rng rng(22);
  TensorF pa = TensorF::zeros({1, 11, 11});
  TensorF pb = TensorF::zeros({1, 11, 11});
  for (float& v : pa.data) v = static_cast<float>(rng.uniform());
  for (float& v : pb.data) v = static_cast<float>(rng.uniform());

  const RefinementOutput<float> out = refine_pair(pa, pb, w);
  CHECK(out.offset_a.dx == 0.0f);
  CHECK(out.offset_a.dy == 0.0f);
  // B side still moves
  CHECK((out.offset_b.dx != 0.0f || out.offset_b.dy != 0.0f));
  for (float v : out.score_map_a.data) CHECK(v == 0.0f);
}

TEST_CASE("model: swapping the patches swaps the offsets (symmetric mode)") {
  // Both streams share one network, so (a,b) -> (da,db) implies
  // (b,a) -> (db,da).
  ModelWeights<float> w = random_weights(ModelConfig::small(), 31);
  Rng rng(32);
  TensorF pa = TensorF::zeros({1, 11, 11});
  TensorF pb = TensorF::zeros({1, 11, 11});
  for (float& v : pa.data) v = static_cast<float>(rng.uniform());
  for (float& v : pb.data) v = static_cast<float>(rng.uniform());

  const RefinementOutput<float> fwd = refine_pair(pa, pb, w);
  const RefinementOutput<float> rev = refine_pair(pb, pa, w);
  CHECK(fwd.offset_a.dx == rev.offset_b.dx);
  CHECK(fwd.offset_a.dy == rev.offset_b.dy);
  CHECK(fwd.offset_b.dx == rev.offset_a.dx);
  CHECK(fwd.offset_b.dy == rev.offset_a.dy);
}

TEST_CASE("model: identical patches under an identity-symmetric setup") {
  // With equal patches the two streams are indistinguishable, so both
  // offsets must coincide exactly.
  ModelWeights<float> w = random_weights(ModelConfig::large(), 41);
  Rng rng(42);
  TensorF p = TensorF::zeros({1, 11, 11});
  for (float& v : p.data) v = static_cast<float>(rng.uniform());

  const RefinementOutput<float> out = refine_pair(p, p, w);
  CHECK(out.offset_a.dx == out.offset_b.dx);
  CHECK(out.offset_a.dy == out.offset_b.dy);
}

TEST_CASE("model: forward pass rejects wrong patch shapes") {
  ModelWeights<float> w = random_weights(ModelConfig::small(), 51);
  TensorF good = TensorF::zeros({1, 11, 11});
  CHECK_THROWS_AS(refine_pair(TensorF::zeros({1, 9, 9}), good, w), ShapeError);
  CHECK_THROWS_AS(refine_pair(good, TensorF::zeros({3, 11, 11}), w), ShapeError);
}

TEST_CASE("model: weight serialization round trip is bitwise") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "xrefine_model_test";
  fs::create_directories(dir);

  for (bool large : {false, true}) {
    ModelConfig c = large ? ModelConfig::large() : ModelConfig::small();
    if (large) c.refine_mode = RefineMode::SecondOnly;
    ModelWeights<float> w = random_weights(c, 61);
    const fs::path file = dir / (large ? "l.xrw" : "s.xrw");
    save_weights(w, file);
    ModelWeights<float> r = load_weights(file);

    CHECK(r.config == w.config);
    bool same = true;
    w.for_each_param([&](const std::string& name, Tensor<float>& t) {
      r.for_each_param([&](const std::string& rname, Tensor<float>& rt) {
        if (rname != name) return;
        if (t.shape != rt.shape || t.data != rt.data) same = false;
      });
    });
    CHECK(same);
  }

  // config-checked load rejects a mismatched architecture
  ModelWeights<float> s = random_weights(ModelConfig::small(), 71);
  save_weights(s, dir / "small2.xrw");
  CHECK_THROWS_AS(load_weights(dir / "small2.xrw", ModelConfig::large()), DataError);
  CHECK_THROWS_AS(load_weights(dir / "missing.xrw"), DataError);
  fs::remove_all(dir);
}

TEST_CASE("model: refined output is deterministic") {
  ModelWeights<float> w = random_weights(ModelConfig::small(), 81);
  Rng rng(82);
  TensorF pa = TensorF::zeros({1, 11, 11});
  TensorF pb = TensorF::zeros({1, 11, 11});
  for (float& v : pa.data) v = static_cast<float>(rng.uniform());
  for (float& v : pb.data) v = static_cast<float>(rng.uniform());

  const RefinementOutput<float> a = refine_pair(pa, pb, w);
  const RefinementOutput<float> b = refine_pair(pa, pb, w);
  CHECK(a.offset_a.dx == b.offset_a.dx);
  CHECK(a.offset_a.dy == b.offset_a.dy);
  CHECK(a.offset_b.dx == b.offset_b.dx);
  CHECK(a.offset_b.dy == b.offset_b.dy);
  CHECK(a.score_map_b.data == b.score_map_b.data);
}
