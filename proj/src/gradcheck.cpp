#include "xrefine/gradcheck.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>

#include "xrefine/data.hpp"
#include "xrefine/geometry.hpp"
#include "xrefine/model.hpp"
#include "xrefine/training.hpp"

namespace xrefine {

namespace {

using TensorD = Tensor<double>;

double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max(1e-5, std::abs(analytic) + std::abs(numeric));
}

double fd_step(double x) { return 1e-5 * std::max(1.0, std::abs(x)); }

// One named check accumulating the worst deviation over all probes.
struct Check {
  GradCheckEntry entry;
  std::string context;  // set by callers for diagnostics

  explicit Check(std::string name) { entry.name = std::move(name); }

  void probe(double analytic, double numeric) {
    const double rel = rel_error(analytic, numeric);
    if (rel > 1e-4 && std::getenv("XREFINE_GRADCHECK_VERBOSE"))
      std::fprintf(stderr, "  [%s] %s: analytic %.12e numeric %.12e rel %.3e\n",
                   entry.name.c_str(), context.c_str(), analytic, numeric, rel);
    entry.max_rel_error = std::max(entry.max_rel_error, rel);
    ++entry.probes;
  }

  /// Central difference of `loss` w.r.t. the coordinate behind `x`. Runs two
  /// step sizes; if they disagree the interval straddles a kink (ReLU, clamp)
  /// and the probe is skipped — finite differences are meaningless there.
  template <class F>
  void probe_coord(double& x, double analytic, const F& loss) {
    const double old = x;
    const double h = fd_step(old);
    x = old + h;
    const double lp = loss();
    x = old - h;
    const double lm = loss();
    x = old + 0.5 * h;
    const double lp2 = loss();
    x = old - 0.5 * h;
    const double lm2 = loss();
    x = old;
    const double fd1 = (lp - lm) / (2 * h);
    const double fd2 = (lp2 - lm2) / h;
    if (std::abs(fd1 - fd2) > 1e-6 * std::max(1.0, std::abs(fd1) + std::abs(fd2))) {
      ++entry.skipped;
      return;
    }
    probe(analytic, fd2);
  }
};

void fill_uniform(TensorD& t, Rng& rng, double lo, double hi) {
  for (double& v : t.data) v = rng.uniform(lo, hi);
}

double weighted_sum(const TensorD& t, const TensorD& w) {
  double s = 0;
  for (size_t i = 0; i < t.data.size(); ++i) s += t.data[i] * w.data[i];
  return s;
}

RelativePose random_pose(Rng& rng, double rot_max_deg, double baseline) {
  Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
  while (axis.norm() < 1e-9) axis = {rng.normal(), rng.normal(), rng.normal()};
  const double angle = rng.uniform(-rot_max_deg, rot_max_deg) * M_PI / 180.0;
  RelativePose pose;
  pose.rotation = Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
  Eigen::Vector3d t(rng.normal(), rng.normal(), rng.normal());
  while (t.norm() < 1e-9) t = {rng.normal(), rng.normal(), rng.normal()};
  pose.translation = baseline * t.normalized();
  return pose;
}

// Exact pixel correspondence of a random 3D point in front of both cameras,
// so perturbed keypoints land in the smooth (unclamped) region of the loss.
std::pair<Eigen::Vector2d, Eigen::Vector2d> project_pair(const CameraIntrinsics& cam,
                                                         const RelativePose& pose, Rng& rng) {
  for (;;) {
    const Eigen::Vector3d xa(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5),
                             rng.uniform(4.0, 8.0));
    const Eigen::Vector3d xb = pose.rotation * xa + pose.translation;
    if (xb.z() < 0.5) continue;
    return {cam.denormalize({xa.x() / xa.z(), xa.y() / xa.z()}),
            cam.denormalize({xb.x() / xb.z(), xb.y() / xb.z()})};
  }
}

// Model weights with a full-strength random score head, so the score path
// contributes gradients of ordinary magnitude to the checks.
ModelWeights<double> random_model(const ModelConfig& config, Rng& rng) {
  ModelWeights<double> w = ModelWeights<double>::init(config, rng.next_u64());
  for (double& v : w.score_w.data) v *= 20.0;
  w.score_b(0) = rng.uniform(-0.2, 0.2);
  for (double& v : w.conv_b[0].data) v = rng.uniform(-0.05, 0.05);
  return w;
}

// ---------------------------------------------------------------------------
// Primitive operations

void check_conv(Check& input_c, Check& kernel_c, Check& bias_c, Rng& rng, bool padded) {
  const int ci = 1 + static_cast<int>(rng.below(3));
  const int co = 1 + static_cast<int>(rng.below(4));
  const int h = 3 + static_cast<int>(rng.below(4));
  const int w = 3 + static_cast<int>(rng.below(4));
  TensorD x = TensorD::zeros({ci, h, w});
  TensorD k = TensorD::zeros({co, ci, 3, 3});
  TensorD b = TensorD::zeros({co});
  fill_uniform(x, rng, -1, 1);
  fill_uniform(k, rng, -1, 1);
  fill_uniform(b, rng, -0.5, 0.5);

  const TensorD out = conv2d(x, k, b, padded);
  TensorD up = TensorD::zeros(out.shape);
  fill_uniform(up, rng, -1, 1);
  const Conv2dGrads<double> g = conv2d_backward(x, k, padded, up);

  const auto loss = [&]() { return weighted_sum(conv2d(x, k, b, padded), up); };
  for (size_t j = 0; j < x.data.size(); ++j) input_c.probe_coord(x.data[j], g.input.data[j], loss);
  for (size_t j = 0; j < k.data.size(); ++j) kernel_c.probe_coord(k.data[j], g.kernel.data[j], loss);
  for (size_t j = 0; j < b.data.size(); ++j) bias_c.probe_coord(b.data[j], g.bias.data[j], loss);
}

void check_relu(Check& c, Rng& rng) {
  TensorD x = TensorD::zeros({24});
  for (double& v : x.data) {
    do {
      v = rng.uniform(-1, 1);
    } while (std::abs(v) < 1e-3);  // keep the finite difference off the kink
  }
  TensorD up = TensorD::zeros(x.shape);
  fill_uniform(up, rng, -1, 1);
  const TensorD g = relu_backward(x, up);
  const auto loss = [&]() { return weighted_sum(relu(x), up); };
  for (size_t j = 0; j < x.data.size(); ++j) c.probe_coord(x.data[j], g.data[j], loss);
}

void check_tanh(Check& c, Rng& rng) {
  TensorD x = TensorD::zeros({24});
  fill_uniform(x, rng, -2, 2);
  TensorD up = TensorD::zeros(x.shape);
  fill_uniform(up, rng, -1, 1);
  const TensorD g = tanh_backward(tanh_map(x), up);
  const auto loss = [&]() { return weighted_sum(tanh_map(x), up); };
  for (size_t j = 0; j < x.data.size(); ++j) c.probe_coord(x.data[j], g.data[j], loss);
}

void check_softmax(Check& c, Rng& rng) {
  const double temperature = rng.uniform(0.5, 2.0);
  TensorD x = TensorD::zeros({9});
  fill_uniform(x, rng, -1.5, 1.5);
  TensorD up = TensorD::zeros(x.shape);
  fill_uniform(up, rng, -1, 1);
  const TensorD g = softmax_backward(softmax(x, temperature), up, temperature);
  const auto loss = [&]() { return weighted_sum(softmax(x, temperature), up); };
  for (size_t j = 0; j < x.data.size(); ++j) c.probe_coord(x.data[j], g.data[j], loss);
}

void check_attention(std::map<std::string, Check>& checks, Rng& rng) {
  const int n = 9;
  const int heads = 1 << rng.below(3);  // 1, 2 or 4
  const int d = 8;
  AttentionWeights<double> w;
  w.heads = heads;
  w.wq = TensorD::zeros({d, d});
  w.wk = TensorD::zeros({d, d});
  w.wv = TensorD::zeros({d, d});
  w.wo = TensorD::zeros({d, d});
  fill_uniform(w.wq, rng, -0.6, 0.6);
  fill_uniform(w.wk, rng, -0.6, 0.6);
  fill_uniform(w.wv, rng, -0.6, 0.6);
  fill_uniform(w.wo, rng, -0.6, 0.6);
  TensorD query = TensorD::zeros({n, d});
  TensorD kv = TensorD::zeros({n, d});
  fill_uniform(query, rng, -1, 1);
  fill_uniform(kv, rng, -1, 1);
  TensorD up = TensorD::zeros({n, d});
  fill_uniform(up, rng, -1, 1);

  AttentionContext<double> ctx;
  (void)multi_head_cross_attention(query, kv, w, &ctx);
  const AttentionGrads<double> g = multi_head_cross_attention_backward(ctx, w, up);
  const auto loss = [&]() { return weighted_sum(multi_head_cross_attention(query, kv, w), up); };

  const std::pair<TensorD*, const TensorD*> pairs[] = {
      {&query, &g.query}, {&kv, &g.kv},   {&w.wq, &g.wq},
      {&w.wk, &g.wk},     {&w.wv, &g.wv}, {&w.wo, &g.wo}};
  const char* names[] = {"attention.query", "attention.kv", "attention.wq",
                         "attention.wk",    "attention.wv", "attention.wo"};
  for (int p = 0; p < 6; ++p) {
    Check& c = checks.at(names[p]);
    TensorD& t = *pairs[p].first;
    const TensorD& a = *pairs[p].second;
    for (size_t j = 0; j < t.data.size(); ++j) c.probe_coord(t.data[j], a.data[j], loss);
  }
}

void check_score_head(std::map<std::string, Check>& checks, Rng& rng) {
  ModelWeights<double> w = random_model(ModelConfig::small(), rng);
  const int e = w.config.embed_spatial;
  const int d = w.config.channels_out;
  TensorD input = TensorD::zeros({d, e, e});
  fill_uniform(input, rng, -1, 1);
  TensorD up = TensorD::zeros({e, e});
  fill_uniform(up, rng, -1, 1);

  ScoreTrace<double> trace;
  (void)score_head(input, w, &trace);
  ModelWeights<double> grad = ModelWeights<double>::zeros_like(w.config);
  const TensorD d_input = score_head_backward(trace, w, up, grad);
  const auto loss = [&]() { return weighted_sum(score_head(input, w), up); };

  Check& ce = checks.at("score_head.embedding");
  Check& cw = checks.at("score_head.weight");
  Check& cb = checks.at("score_head.bias");
  for (int p = 0; p < 40; ++p) {
    const size_t j = rng.below(input.data.size());
    ce.probe_coord(input.data[j], d_input.data[j], loss);
  }
  for (int p = 0; p < 40; ++p) {
    const size_t j = rng.below(w.score_w.data.size());
    cw.probe_coord(w.score_w.data[j], grad.score_w.data[j], loss);
  }
  cb.probe_coord(w.score_b.data[0], grad.score_b.data[0], loss);
}

void check_soft_argmax(Check& c, Rng& rng) {
  const int e = rng.below(2) == 0 ? 3 : 5;
  const double temperature = rng.uniform(0.7, 1.4);
  const double scale = 5.0;
  TensorD map = TensorD::zeros({e, e});
  fill_uniform(map, rng, -1, 1);
  const double wx = rng.uniform(-1, 1), wy = rng.uniform(-1, 1);

  TensorD probs;
  (void)soft_argmax(map, temperature, scale, &probs);
  const TensorD g = soft_argmax_backward(probs, temperature, scale, wx, wy);
  const auto loss = [&]() {
    const Offset<double> off = soft_argmax(map, temperature, scale);
    return wx * off.dx + wy * off.dy;
  };
  for (size_t j = 0; j < map.data.size(); ++j) c.probe_coord(map.data[j], g.data[j], loss);
}

// ---------------------------------------------------------------------------
// Full model

void check_refine_pair(std::map<std::string, Check>& checks, Rng& rng, const ModelConfig& config,
                       const std::string& params_name, const std::string& patches_name) {
  ModelWeights<double> w = random_model(config, rng);
  TensorD pa = TensorD::zeros({1, config.patch_size, config.patch_size});
  TensorD pb = TensorD::zeros({1, config.patch_size, config.patch_size});
  fill_uniform(pa, rng, 0, 1);
  fill_uniform(pb, rng, 0, 1);
  const bool both = config.refine_mode == RefineMode::Both;
  const Offset<double> da{both ? rng.uniform(-1, 1) : 0.0, both ? rng.uniform(-1, 1) : 0.0};
  const Offset<double> db{rng.uniform(-1, 1), rng.uniform(-1, 1)};

  RefineTrace<double> trace;
  (void)refine_pair(pa, pb, w, &trace);
  ModelWeights<double> grad = ModelWeights<double>::zeros_like(config);
  TensorD d_pa, d_pb;
  refine_pair_backward(trace, w, da, db, grad, &d_pa, &d_pb);

  const auto loss = [&]() {
    const RefinementOutput<double> r = refine_pair(pa, pb, w);
    return da.dx * r.offset_a.dx + da.dy * r.offset_a.dy + db.dx * r.offset_b.dx +
           db.dy * r.offset_b.dy;
  };

  Check& cp = checks.at(params_name);
  std::map<std::string, const TensorD*> by_name;
  grad.for_each_param(
      [&](const std::string& name, const TensorD& t) { by_name.emplace(name, &t); });
  w.for_each_param([&](const std::string& name, TensorD& t) {
    const TensorD& a = *by_name.at(name);
    for (int p = 0; p < 2; ++p) {
      const size_t j = rng.below(t.data.size());
      cp.context = name + "[" + std::to_string(j) + "]";
      cp.probe_coord(t.data[j], a.data[j], loss);
    }
  });

  Check& cx = checks.at(patches_name);
  for (int p = 0; p < 4; ++p) {
    const size_t ja = rng.below(pa.data.size());
    cx.context = "patch_a[" + std::to_string(ja) + "]";
    cx.probe_coord(pa.data[ja], d_pa.data[ja], loss);
    const size_t jb = rng.below(pb.data.size());
    cx.context = "patch_b[" + std::to_string(jb) + "]";
    cx.probe_coord(pb.data[jb], d_pb.data[jb], loss);
  }
}

// ---------------------------------------------------------------------------
// Geometry and the training loss

void check_epipolar_residual(Check& c, Rng& rng, EpipolarKind kind) {
  const RelativePose pose = random_pose(rng, 20.0, 1.0);
  const Eigen::Matrix3d e = essential_from_pose(pose);
  double coords[4] = {rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4),
                      rng.uniform(-0.4, 0.4)};
  EpipolarGrad<double> g;
  (void)epipolar_residual<double>(e, coords[0], coords[1], coords[2], coords[3], kind, &g);
  const double* analytic[4] = {&g.dax, &g.day, &g.dbx, &g.dby};
  const auto loss = [&]() {
    return epipolar_residual<double>(e, coords[0], coords[1], coords[2], coords[3], kind);
  };
  for (int j = 0; j < 4; ++j) c.probe_coord(coords[j], *analytic[j], loss);
}

void check_match_loss(Check& c, Rng& rng) {
  CameraIntrinsics cam{256.0, 256.0, 128.0, 128.0};
  const RelativePose pose = random_pose(rng, 10.0, 1.0);
  const Eigen::Matrix3d e = essential_from_pose(pose);
  const double clamp = 10.0;

  // A correspondence with a sub-clamp residual: perturb an exact projection
  // pair until the loss lands inside the smooth region.
  Eigen::Vector2d a, b;
  double loss0 = clamp;
  for (int tries = 0; tries < 200 && (loss0 >= 0.8 * clamp || loss0 < 1e-6); ++tries) {
    const auto [pa, pb] = project_pair(cam, pose, rng);
    a = pa + Eigen::Vector2d(rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8));
    b = pb + Eigen::Vector2d(rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8));
    loss0 = match_loss_px2(e, cam, a, b, clamp);
  }
  if (loss0 >= 0.8 * clamp || loss0 < 1e-6) return;  // no smooth sample this round

  OffsetGrad g;
  (void)match_loss_px2(e, cam, a, b, clamp, &g);
  double* coords[4] = {&a.x(), &a.y(), &b.x(), &b.y()};
  const double* analytic[4] = {&g.dax, &g.day, &g.dbx, &g.dby};
  const auto loss = [&]() { return match_loss_px2(e, cam, a, b, clamp); };
  for (int j = 0; j < 4; ++j) c.probe_coord(*coords[j], *analytic[j], loss);
}

void check_epipolar_loss(Check& c, Rng& rng) {
  CameraIntrinsics cam{256.0, 256.0, 128.0, 128.0};
  const RelativePose pose = random_pose(rng, 10.0, 1.0);
  const Eigen::Matrix3d essential = essential_from_pose(pose);

  const ModelConfig config = ModelConfig::small();
  Rng model_rng(rng.next_u64());
  ModelWeights<double> w = random_model(config, model_rng);

  std::vector<MatchSample> samples(4);
  std::vector<int> indices = {0, 1, 2, 3};
  for (MatchSample& m : samples) {
    m.patch_a = TensorF::zeros({1, config.patch_size, config.patch_size});
    m.patch_b = TensorF::zeros({1, config.patch_size, config.patch_size});
    for (float& v : m.patch_a.data) v = static_cast<float>(rng.uniform(0, 1));
    for (float& v : m.patch_b.data) v = static_cast<float>(rng.uniform(0, 1));
    const auto [pa, pb] = project_pair(cam, pose, rng);
    m.keypoint_a = pa + Eigen::Vector2d(rng.normal(), rng.normal());
    m.keypoint_b = pb + Eigen::Vector2d(rng.normal(), rng.normal());
  }

  const LossOutput<double> out = epipolar_loss(samples, indices, essential, cam, w, 10.0);
  const auto loss = [&]() {
    return epipolar_loss(samples, indices, essential, cam, w, 10.0).loss;
  };

  std::map<std::string, const TensorD*> by_name;
  out.grads.for_each_param(
      [&](const std::string& name, const TensorD& t) { by_name.emplace(name, &t); });
  w.for_each_param([&](const std::string& name, TensorD& t) {
    const TensorD& a = *by_name.at(name);
    for (int p = 0; p < 2; ++p) {
      const size_t j = rng.below(t.data.size());
      c.context = name + "[" + std::to_string(j) + "]";
      c.probe_coord(t.data[j], a.data[j], loss);
    }
  });
}

}  // namespace

GradCheckReport run_gradchecks(uint64_t seed, int rounds, double tolerance) {
  if (rounds < 1) throw ShapeError("run_gradchecks: rounds must be positive");
  if (!(tolerance > 0)) throw ShapeError("run_gradchecks: tolerance must be positive");

  const char* names[] = {"conv2d.input",
                         "conv2d.kernel",
                         "conv2d.bias",
                         "relu",
                         "tanh",
                         "softmax",
                         "attention.query",
                         "attention.kv",
                         "attention.wq",
                         "attention.wk",
                         "attention.wv",
                         "attention.wo",
                         "score_head.embedding",
                         "score_head.weight",
                         "score_head.bias",
                         "soft_argmax",
                         "refine_pair.params",
                         "refine_pair.patches",
                         "refine_pair.params_large",
                         "refine_pair.params_second_only",
                         "refine_pair.patches_second_only",
                         "epipolar.sampson",
                         "epipolar.symmetric",
                         "match_loss",
                         "epipolar_loss.params"};
  std::map<std::string, Check> checks;
  for (const char* n : names) checks.emplace(n, Check(n));

  for (int round = 0; round < rounds; ++round) {
    Rng rng(Rng::mix(seed, static_cast<uint64_t>(round)));
    check_conv(checks.at("conv2d.input"), checks.at("conv2d.kernel"), checks.at("conv2d.bias"),
               rng, round % 2 == 0);
    check_relu(checks.at("relu"), rng);
    check_tanh(checks.at("tanh"), rng);
    check_softmax(checks.at("softmax"), rng);
    check_attention(checks, rng);
    check_score_head(checks, rng);
    check_soft_argmax(checks.at("soft_argmax"), rng);

    check_refine_pair(checks, rng, ModelConfig::small(), "refine_pair.params",
                      "refine_pair.patches");
    if (round % 5 == 0)
      check_refine_pair(checks, rng, ModelConfig::large(), "refine_pair.params_large",
                        "refine_pair.patches");
    ModelConfig second = ModelConfig::small();
    second.refine_mode = RefineMode::SecondOnly;
    check_refine_pair(checks, rng, second, "refine_pair.params_second_only",
                      "refine_pair.patches_second_only");

    check_epipolar_residual(checks.at("epipolar.sampson"), rng, EpipolarKind::Sampson);
    check_epipolar_residual(checks.at("epipolar.symmetric"), rng, EpipolarKind::Symmetric);
    check_match_loss(checks.at("match_loss"), rng);
    check_epipolar_loss(checks.at("epipolar_loss.params"), rng);
  }

  GradCheckReport report;
  report.tolerance = tolerance;
  for (const char* n : names) {
    GradCheckEntry e = checks.at(n).entry;
    e.passed = e.probes > 0 && e.max_rel_error <= tolerance;
    report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
    report.entries.push_back(std::move(e));
  }
  report.passed = true;
  for (const GradCheckEntry& e : report.entries) report.passed = report.passed && e.passed;
  return report;
}

}  // namespace xrefine
