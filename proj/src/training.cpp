#include "xrefine/training.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "xrefine/detail/binio.hpp"

namespace xrefine {
namespace {

// Seed-stream tags; every random decision derives from (config.seed, tag) so
// a resumed run replays the identical stream.
constexpr uint64_t kTagScene = 0x100000;
constexpr uint64_t kTagValScene = 0x200000;
constexpr uint64_t kTagValMatches = 0x300000;
constexpr uint64_t kTagInit = 0x400000;
constexpr uint64_t kTagOrder = 0x500000;
constexpr uint64_t kTagMatches = 0x600000;
constexpr uint64_t kTagValAuc = 0x700000;

std::vector<int> all_indices(int n) {
  std::vector<int> idx(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  return idx;
}

double keypoint_error(const MatchSample& m, const RefinementOutput<float>& r, bool second_only) {
  const Eigen::Vector2d ra(m.keypoint_a.x() + r.offset_a.dx, m.keypoint_a.y() + r.offset_a.dy);
  const Eigen::Vector2d rb(m.keypoint_b.x() + r.offset_b.dx, m.keypoint_b.y() + r.offset_b.dy);
  const double eb = (rb - m.true_b).norm();
  if (second_only) return eb;
  return 0.5 * ((ra - m.true_a).norm() + eb);
}

double unrefined_error(const MatchSample& m, bool second_only) {
  const double eb = (m.keypoint_b - m.true_b).norm();
  if (second_only) return eb;
  return 0.5 * ((m.keypoint_a - m.true_a).norm() + eb);
}

}  // namespace

ValReport validate(const std::vector<MatchSet>& sets, const ModelWeights<float>& weights,
                   double clamp_px2, int threads, const std::vector<RelativePose>* gt_poses) {
  if (sets.empty()) throw ShapeError("validate: no validation sets");
  if (gt_poses && gt_poses->size() != sets.size())
    throw ShapeError("validate: pose/set count mismatch");
  const bool second_only = weights.config.refine_mode == RefineMode::SecondOnly;

  ValReport report;
  long long total = 0;
  std::vector<double> pose_errors;
  for (size_t si = 0; si < sets.size(); ++si) {
    const MatchSet& set = sets[si];
    const int n = static_cast<int>(set.samples.size());
    if (n == 0) throw ShapeError("validate: empty match set");
    const int chunk_count = std::min(64, (n + 31) / 32);
    std::vector<double> c_ref(static_cast<size_t>(chunk_count), 0.0);
    std::vector<double> c_unref(static_cast<size_t>(chunk_count), 0.0);
    std::vector<double> c_res(static_cast<size_t>(chunk_count), 0.0);
    std::vector<Eigen::Vector2d> refined_a(static_cast<size_t>(n)), refined_b(
                                                                        static_cast<size_t>(n));

    parallel_chunks(n, chunk_count, threads, [&](int chunk, int begin, int end) {
      for (int i = begin; i < end; ++i) {
        const MatchSample& m = set.samples[static_cast<size_t>(i)];
        const RefinementOutput<float> r = refine_pair(m.patch_a, m.patch_b, weights);
        c_ref[static_cast<size_t>(chunk)] += keypoint_error(m, r, second_only);
        c_unref[static_cast<size_t>(chunk)] += unrefined_error(m, second_only);
        refined_a[static_cast<size_t>(i)] = {m.keypoint_a.x() + r.offset_a.dx,
                                             m.keypoint_a.y() + r.offset_a.dy};
        refined_b[static_cast<size_t>(i)] = {m.keypoint_b.x() + r.offset_b.dx,
                                             m.keypoint_b.y() + r.offset_b.dy};
        if (set.has_essential)
          c_res[static_cast<size_t>(chunk)] += match_loss_px2(
              set.essential, set.cam, refined_a[static_cast<size_t>(i)],
              refined_b[static_cast<size_t>(i)], clamp_px2);
      }
    });
    for (int c = 0; c < chunk_count; ++c) {
      report.refined_error_px += c_ref[static_cast<size_t>(c)];
      report.unrefined_error_px += c_unref[static_cast<size_t>(c)];
      report.mean_residual_px2 += c_res[static_cast<size_t>(c)];
    }
    total += n;

    if (gt_poses) {
      std::vector<Eigen::Vector2d> na(static_cast<size_t>(n)), nb(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) {
        na[static_cast<size_t>(i)] = set.cam.normalize(refined_a[static_cast<size_t>(i)]);
        nb[static_cast<size_t>(i)] = set.cam.normalize(refined_b[static_cast<size_t>(i)]);
      }
      RansacParams rp;
      rp.fmean = set.cam.fmean();
      rp.seed = Rng::mix(kTagValAuc, static_cast<uint64_t>(si));
      double err = 180.0;
      try {
        const RansacResult rr = ransac_essential(na, nb, rp);
        const RelativePose pose = recover_pose(rr.essential, na, nb, &rr.inlier_mask);
        err = pose_error(pose, (*gt_poses)[si]).max_deg;
      } catch (const NumericalError&) {
        err = 180.0;  // estimation failure convention
      }
      pose_errors.push_back(err);
    }
  }
  report.refined_error_px /= static_cast<double>(total);
  report.unrefined_error_px /= static_cast<double>(total);
  report.mean_residual_px2 /= static_cast<double>(total);
  if (gt_poses) report.auc5 = auc(pose_errors, {5.0})[0];
  return report;
}

TrainState train(const TrainConfig& config, const TrainState* resume,
                 std::vector<std::string>* log_lines) {
  config.validate();
  const int threads = config.threads > 0 ? config.threads : default_thread_count();
  const uint64_t seed = config.seed;

  auto log = [&](const EpochStat& s) {
    if (!log_lines) return;
    std::string line = std::to_string(s.epoch);
    line += '\t';
    line += std::isfinite(s.loss) ? format_double(s.loss) : std::string("-");
    line += '\t';
    line += format_double(s.val_metric);
    log_lines->push_back(std::move(line));
  };

  // Held-out validation sets, fixed for the whole run.
  std::vector<MatchSet> val_sets;
  for (int i = 0; i < config.val_pairs; ++i) {
    const PairScene vs = PairScene::generate(
        Rng::mix(seed, kTagValScene + static_cast<uint64_t>(i)), config.scene);
    val_sets.push_back(sample_training_matches(
        vs, config.val_matches_per_pair, config.noise_std,
        Rng::mix(seed, kTagValMatches + static_cast<uint64_t>(i)), config.model.patch_size));
  }

  TrainState st;
  if (resume) {
    st = *resume;
    if (!(st.weights.config == config.model))
      throw DataError("train: resume state was built for a different model config");
  } else {
    st.weights = ModelWeights<float>::init(config.model, Rng::mix(seed, kTagInit));
    std::vector<Tensor<float>*> params;
    st.weights.for_each_param(
        [&params](const std::string&, Tensor<float>& t) { params.push_back(&t); });
    st.adam = AdamState<float>::init(params);

    const ValReport v0 = validate(val_sets, st.weights, config.clamp_px2, threads);
    st.best = Checkpoint{st.weights, 0, v0.refined_error_px, Rng::mix(seed, 0)};
    st.history.push_back(EpochStat{0, std::numeric_limits<double>::quiet_NaN(),
                                   v0.refined_error_px});
    log(st.history.back());
  }

  AdamParams<float> hp;
  hp.lr = static_cast<float>(config.lr);

  std::vector<Tensor<float>*> params;
  st.weights.for_each_param(
      [&params](const std::string&, Tensor<float>& t) { params.push_back(&t); });

  for (int epoch = st.completed_epochs + 1; epoch <= config.epochs; ++epoch) {
    // Fresh scenes and matches every epoch. Reusing scenes would let the
    // network memorize per-scene epipolar geometry instead of learning
    // appearance: the loss is blind to anything satisfying the constraint.
    // Seeding by (seed, epoch, pair) keeps resumed runs on the same stream.
    std::vector<MatchSet> epoch_sets;
    std::vector<Eigen::Matrix3d> essentials;
    epoch_sets.reserve(static_cast<size_t>(config.pairs_per_epoch));
    essentials.reserve(static_cast<size_t>(config.pairs_per_epoch));
    for (int p = 0; p < config.pairs_per_epoch; ++p) {
      const PairScene scene =
          PairScene::generate(Rng::mix(Rng::mix(seed, kTagScene + static_cast<uint64_t>(epoch)),
                                       static_cast<uint64_t>(p)),
                              config.scene);
      epoch_sets.push_back(sample_training_matches(
          scene, config.matches_per_pair, config.noise_std,
          Rng::mix(Rng::mix(seed, kTagMatches + static_cast<uint64_t>(epoch)),
                   static_cast<uint64_t>(p)),
          config.model.patch_size));
      essentials.push_back(scene.essential());
    }

    // Seeded pair order.
    std::vector<int> order = all_indices(config.pairs_per_epoch);
    Rng shuffle_rng(Rng::mix(seed, kTagOrder + static_cast<uint64_t>(epoch)));
    for (int i = config.pairs_per_epoch - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(shuffle_rng.below(static_cast<uint64_t>(i + 1)))]);

    double epoch_loss = 0;
    long long epoch_matches = 0;
    bool diverged = false;
    for (int b = 0; b < config.pairs_per_epoch && !diverged; b += config.batch_pairs) {
      const int b_end = std::min(b + config.batch_pairs, config.pairs_per_epoch);
      ModelWeights<float> grads = ModelWeights<float>::zeros_like(config.model);
      double batch_loss = 0;
      long long batch_n = 0;
      for (int k = b; k < b_end; ++k) {
        const int p = order[static_cast<size_t>(k)];
        const MatchSet& set = epoch_sets[static_cast<size_t>(p)];
        const LossOutput<float> lo =
            epipolar_loss(set.samples, all_indices(static_cast<int>(set.samples.size())),
                          essentials[static_cast<size_t>(p)], set.cam, st.weights,
                          config.clamp_px2, threads, config.offset_penalty);
        const long long n = static_cast<long long>(set.samples.size());
        batch_loss += lo.loss * static_cast<double>(n);
        batch_n += n;
        grads.for_each_param([&](const std::string& name, Tensor<float>& dst) {
          lo.grads.for_each_param([&](const std::string& sname, const Tensor<float>& src) {
            if (sname != name) return;
            const float w = static_cast<float>(n);
            for (size_t j = 0; j < dst.data.size(); ++j) dst.data[j] += w * src.data[j];
          });
        });
      }
      if (!std::isfinite(batch_loss)) {
        diverged = true;
        break;
      }
      const float inv = 1.0f / static_cast<float>(batch_n);
      std::vector<const Tensor<float>*> grad_ptrs;
      grads.for_each_param([&](const std::string&, Tensor<float>& t) {
        for (float& v : t.data) v *= inv;
        grad_ptrs.push_back(&t);
      });
      adam_step(params, grad_ptrs, st.adam, hp);
      epoch_loss += batch_loss;
      epoch_matches += batch_n;
    }

    if (diverged) {
      st.aborted = true;
      break;  // st.best still holds the last good checkpoint
    }

    const ValReport v = validate(val_sets, st.weights, config.clamp_px2, threads);
    st.completed_epochs = epoch;
    EpochStat stat{epoch, epoch_loss / static_cast<double>(std::max(epoch_matches, 1LL)),
                   v.refined_error_px};
    st.history.push_back(stat);
    log(stat);
    if (v.refined_error_px < st.best.metric) {
      st.best = Checkpoint{st.weights, epoch, v.refined_error_px,
                           Rng::mix(seed, static_cast<uint64_t>(epoch))};
    }
  }
  return st;
}

// ---------------------------------------------------------------------------
// Training-state file ("XRFS"): full resume state. Layout in the README.

namespace {
constexpr uint32_t kStateVersion = 1;

void write_weight_block(std::ostream& os, const ModelWeights<float>& w) {
  uint32_t count = 0;
  w.for_each_param([&count](const std::string&, const Tensor<float>&) { ++count; });
  detail::write_u32(os, count);
  w.for_each_param([&os](const std::string& name, const Tensor<float>& t) {
    detail::write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_tensor_f32(os, t);
  });
}

void read_weight_block(std::istream& is, ModelWeights<float>& w) {
  const uint32_t count = detail::read_u32(is);
  uint32_t expected = 0;
  w.for_each_param([&expected](const std::string&, const Tensor<float>&) { ++expected; });
  if (count != expected) throw DataError("training state: tensor count mismatch");
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t len = detail::read_u32(is);
    if (len > 4096) throw DataError("training state: tensor name too long");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw DataError("training state truncated");
    Tensor<float> t = detail::read_tensor_f32(is);
    bool matched = false;
    w.for_each_param([&](const std::string& pname, Tensor<float>& dst) {
      if (pname != name) return;
      matched = true;
      if (dst.shape != t.shape) throw DataError("training state: shape mismatch for '" + name + "'");
      dst = t;
    });
    if (!matched) throw DataError("training state: unknown tensor '" + name + "'");
  }
}

void write_config_block(std::ostream& os, const ModelConfig& c) {
  detail::write_u32(os, static_cast<uint32_t>(c.patch_size));
  detail::write_u32(os, static_cast<uint32_t>(c.embed_spatial));
  detail::write_u32(os, static_cast<uint32_t>(c.channels_mid));
  detail::write_u32(os, static_cast<uint32_t>(c.channels_out));
  detail::write_u32(os, static_cast<uint32_t>(c.attention_blocks));
  detail::write_u32(os, static_cast<uint32_t>(c.heads));
  detail::write_u32(os, c.refine_mode == RefineMode::SecondOnly ? 1u : 0u);
  detail::write_f64(os, c.softargmax_temperature);
  detail::write_f64(os, c.offset_scale);
}

ModelConfig read_config_block(std::istream& is) {
  ModelConfig c;
  c.patch_size = static_cast<int>(detail::read_u32(is));
  c.embed_spatial = static_cast<int>(detail::read_u32(is));
  c.channels_mid = static_cast<int>(detail::read_u32(is));
  c.channels_out = static_cast<int>(detail::read_u32(is));
  c.attention_blocks = static_cast<int>(detail::read_u32(is));
  c.heads = static_cast<int>(detail::read_u32(is));
  const uint32_t mode = detail::read_u32(is);
  if (mode > 1) throw DataError("training state: unknown refine mode");
  c.refine_mode = mode == 1 ? RefineMode::SecondOnly : RefineMode::Both;
  c.softargmax_temperature = detail::read_f64(is);
  c.offset_scale = detail::read_f64(is);
  c.validate();
  return c;
}

}  // namespace

void save_train_state(const TrainState& state, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open training state for writing: " + path.string());
  os.write("XRFS", 4);
  detail::write_u32(os, kStateVersion);
  write_config_block(os, state.weights.config);
  write_weight_block(os, state.weights);

  detail::write_u64(os, static_cast<uint64_t>(state.adam.step));
  detail::write_u32(os, static_cast<uint32_t>(state.adam.m.size()));
  for (const Tensor<float>& t : state.adam.m) detail::write_tensor_f32(os, t);
  for (const Tensor<float>& t : state.adam.v) detail::write_tensor_f32(os, t);

  detail::write_u32(os, static_cast<uint32_t>(state.completed_epochs));
  detail::write_u32(os, state.aborted ? 1u : 0u);

  write_weight_block(os, state.best.weights);
  detail::write_u32(os, static_cast<uint32_t>(state.best.epoch));
  detail::write_f64(os, state.best.metric);
  detail::write_u64(os, state.best.rng_digest);

  detail::write_u32(os, static_cast<uint32_t>(state.history.size()));
  for (const EpochStat& s : state.history) {
    detail::write_u32(os, static_cast<uint32_t>(s.epoch));
    detail::write_f64(os, s.loss);
    detail::write_f64(os, s.val_metric);
  }
  if (!os) throw DataError("failed writing training state: " + path.string());
}

TrainState load_train_state(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open training state: " + path.string());
  char magic[4] = {};
  if (!is.read(magic, 4) || std::memcmp(magic, "XRFS", 4) != 0)
    throw DataError("not a training state file (bad magic): " + path.string());
  if (detail::read_u32(is) != kStateVersion)
    throw DataError("unsupported training state version");

  TrainState st;
  const ModelConfig config = read_config_block(is);
  st.weights = ModelWeights<float>::zeros_like(config);
  read_weight_block(is, st.weights);

  st.adam.step = static_cast<long>(detail::read_u64(is));
  const uint32_t n_tensors = detail::read_u32(is);
  uint32_t expected = 0;
  st.weights.for_each_param([&expected](const std::string&, const Tensor<float>&) { ++expected; });
  if (n_tensors != expected) throw DataError("training state: adam tensor count mismatch");
  st.adam.m.resize(n_tensors);
  st.adam.v.resize(n_tensors);
  for (uint32_t i = 0; i < n_tensors; ++i) st.adam.m[i] = detail::read_tensor_f32(is);
  for (uint32_t i = 0; i < n_tensors; ++i) st.adam.v[i] = detail::read_tensor_f32(is);

  st.completed_epochs = static_cast<int>(detail::read_u32(is));
  st.aborted = detail::read_u32(is) != 0;

  st.best.weights = ModelWeights<float>::zeros_like(config);
  read_weight_block(is, st.best.weights);
  st.best.epoch = static_cast<int>(detail::read_u32(is));
  st.best.metric = detail::read_f64(is);
  st.best.rng_digest = detail::read_u64(is);

  const uint32_t n_hist = detail::read_u32(is);
  if (n_hist > 1000000) throw DataError("training state: implausible history length");
  st.history.resize(n_hist);
  for (uint32_t i = 0; i < n_hist; ++i) {
    st.history[i].epoch = static_cast<int>(detail::read_u32(is));
    st.history[i].loss = detail::read_f64(is);
    st.history[i].val_metric = detail::read_f64(is);
  }
  return st;
}

Manifest checkpoint_sidecar(const Checkpoint& checkpoint, const TrainConfig& config) {
  Manifest m;
  m.set("checkpoint.epoch", checkpoint.epoch);
  m.set("checkpoint.metric", checkpoint.metric);
  m.set("checkpoint.metric_kind", "mean_refined_keypoint_error_px");
  m.set("checkpoint.rng_digest", checkpoint.rng_digest);
  m.set("train.seed", config.seed);
  m.set("train.epochs", config.epochs);
  m.set("train.pairs_per_epoch", config.pairs_per_epoch);
  m.set("train.matches_per_pair", config.matches_per_pair);
  m.set("train.batch_pairs", config.batch_pairs);
  m.set("train.lr", config.lr);
  m.set("train.noise_std", config.noise_std);
  m.set("train.clamp_px2", config.clamp_px2);
  m.set("train.offset_penalty", config.offset_penalty);
  m.set("model.patch_size", checkpoint.weights.config.patch_size);
  m.set("model.embed_spatial", checkpoint.weights.config.embed_spatial);
  m.set("model.attention_blocks", checkpoint.weights.config.attention_blocks);
  m.set("model.refine_mode",
        checkpoint.weights.config.refine_mode == RefineMode::SecondOnly ? "second_only" : "both");
  return m;
}

}  // namespace xrefine
