#include "xrefine/data.hpp"

#include "xrefine/manifest.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace xrefine {
namespace {

constexpr double kPi = 3.14159265358979323846;

double fade(double t) { return t * t * t * (t * (6.0 * t - 15.0) + 10.0); }

uint64_t lattice_key(int64_t v) { return static_cast<uint64_t>(v); }

Eigen::Vector3d unit_sphere(Rng& rng) {
  // Normalized Gaussian triple; the origin has probability zero.
  Eigen::Vector3d v;
  do {
    v = {rng.normal(), rng.normal(), rng.normal()};
  } while (v.norm() < 1e-9);
  return v.normalized();
}

Eigen::Vector2d project(const CameraIntrinsics& cam, const Eigen::Vector3d& x) {
  return cam.denormalize({x.x() / x.z(), x.y() / x.z()});
}

bool in_margins(const Eigen::Vector2d& p, int width, int height, double margin) {
  return in_image_margins(p, width, height, margin);
}

}  // namespace

// ---------------------------------------------------------------------------
// Texture

double Texture::value(double x, double y) const {
  double acc = 0.0, amp_sum = 0.0;
  for (int o = 0; o < octaves_; ++o) {
    const double amp = std::ldexp(1.0, -o);  // 2^-o
    const double inv_wl = std::ldexp(1.0, o) / base_wavelength_;
    const double gx = x * inv_wl, gy = y * inv_wl;
    const double fx = std::floor(gx), fy = std::floor(gy);
    const int64_t ix = static_cast<int64_t>(fx), iy = static_cast<int64_t>(fy);
    const double tx = fade(gx - fx), ty = fade(gy - fy);

    const uint64_t row = Rng::mix(seed_, static_cast<uint64_t>(o));
    auto corner = [&](int64_t cx, int64_t cy) {
      const uint64_t h = Rng::mix(Rng::mix(row, lattice_key(cx)), lattice_key(cy));
      return static_cast<double>(h >> 11) * 0x1.0p-53;
    };
    const double v00 = corner(ix, iy), v10 = corner(ix + 1, iy);
    const double v01 = corner(ix, iy + 1), v11 = corner(ix + 1, iy + 1);
    const double v = (1 - ty) * ((1 - tx) * v00 + tx * v10) + ty * ((1 - tx) * v01 + tx * v11);
    acc += amp * v;
    amp_sum += amp;
  }
  const double centered = acc / amp_sum - 0.5;
  // tanh contrast stretch, normalized so +-0.5 map to exactly 0/1
  return 0.5 + 0.5 * std::tanh(contrast_ * centered) / std::tanh(contrast_ * 0.5);
}

// ---------------------------------------------------------------------------
// SurfaceModel

int SurfaceModel::cell_of(const Eigen::Vector2d& ref_px) const {
  for (size_t i = 0; i < cells.size(); ++i) {
    const PlaneCell& c = cells[i];
    if (ref_px.x() >= c.x0 && ref_px.x() < c.x1 && ref_px.y() >= c.y0 && ref_px.y() < c.y1)
      return static_cast<int>(i);
  }
  return -1;
}

Eigen::Vector3d SurfaceModel::unproject(const Eigen::Vector2d& ref_px, int cell) const {
  const PlaneCell& c = cells.at(static_cast<size_t>(cell));
  const Eigen::Vector2d n = cam.normalize(ref_px);
  const Eigen::Vector3d ray(n.x(), n.y(), 1.0);
  const double den = c.normal.dot(ray);
  if (std::abs(den) < 1e-15)
    return Eigen::Vector3d::Constant(std::numeric_limits<double>::quiet_NaN());
  return (c.d / den) * ray;
}

int SurfaceModel::winner(const Eigen::Vector2d& view_px, const RelativePose& pose) const {
  const Eigen::Vector2d nv = cam.normalize(view_px);
  const Eigen::Vector3d ray(nv.x(), nv.y(), 1.0);
  int best = -1;
  double best_depth = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < cells.size(); ++i) {
    const PlaneCell& c = cells[i];
    const Eigen::Vector3d n_view = pose.rotation * c.normal;
    const double d_view = c.d + n_view.dot(pose.translation);
    const double den = n_view.dot(ray);
    if (std::abs(den) < 1e-15) continue;
    const double s = d_view / den;  // view depth (ray z-component is 1)
    if (s <= 1e-9 || s >= best_depth) continue;
    const Eigen::Vector3d x_view = s * ray;
    const Eigen::Vector3d x_ref = pose.rotation.transpose() * (x_view - pose.translation);
    if (x_ref.z() <= 1e-9) continue;
    const Eigen::Vector2d p = project(cam, x_ref);
    if (p.x() >= c.x0 && p.x() < c.x1 && p.y() >= c.y0 && p.y() < c.y1) {
      best = static_cast<int>(i);
      best_depth = s;
    }
  }
  return best;
}

SurfaceModel::MapResult SurfaceModel::map_to_view(const Eigen::Vector2d& ref_px,
                                                  const RelativePose& pose) const {
  MapResult r;
  const int c = cell_of(ref_px);
  if (c < 0) return r;
  const Eigen::Vector3d x_ref = unproject(ref_px, c);
  if (!x_ref.allFinite() || x_ref.z() <= 1e-9) return r;
  const Eigen::Vector3d x_view = pose.rotation * x_ref + pose.translation;
  if (x_view.z() <= 1e-9) return r;
  const Eigen::Vector2d q = project(cam, x_view);
  if (winner(q, pose) != c) return r;  // occluded by a nearer cell
  r.point = q;
  r.valid = true;
  return r;
}

SurfaceModel::MapResult SurfaceModel::map_from_view(const Eigen::Vector2d& view_px,
                                                    const RelativePose& pose) const {
  MapResult r;
  const int w = winner(view_px, pose);
  if (w < 0) return r;
  const PlaneCell& c = cells[static_cast<size_t>(w)];
  const Eigen::Vector2d nv = cam.normalize(view_px);
  const Eigen::Vector3d ray(nv.x(), nv.y(), 1.0);
  const Eigen::Vector3d n_view = pose.rotation * c.normal;
  const double d_view = c.d + n_view.dot(pose.translation);
  const Eigen::Vector3d x_view = (d_view / n_view.dot(ray)) * ray;
  const Eigen::Vector3d x_ref = pose.rotation.transpose() * (x_view - pose.translation);
  if (x_ref.z() <= 1e-9) return r;
  r.point = project(cam, x_ref);
  r.valid = true;
  return r;
}

Image SurfaceModel::render_reference() const {
  Image im = Image::zeros(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      im.at(x, y) = static_cast<float>(texture.value(x, y));
  return im;
}

Image SurfaceModel::render_view(const RelativePose& pose) const {
  Image im = Image::zeros(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const MapResult m = map_from_view({static_cast<double>(x), static_cast<double>(y)}, pose);
      im.at(x, y) = m.valid ? static_cast<float>(texture.value(m.point.x(), m.point.y())) : 0.5f;
    }
  return im;
}

// ---------------------------------------------------------------------------
// PairScene

namespace {

CameraIntrinsics centered_camera(int width, int height, double focal) {
  CameraIntrinsics cam;
  cam.fx = cam.fy = focal;
  cam.cx = (width - 1) / 2.0;
  cam.cy = (height - 1) / 2.0;
  return cam;
}

// Random plane facing the camera: normal within tilt_max of the optical axis,
// passing through the given depth along the ray of the rect center.
PlaneCell make_cell(Rng& rng, const CameraIntrinsics& cam, double x0, double y0, double x1,
                    double y1, double depth, double tilt_max_deg) {
  PlaneCell c;
  c.x0 = x0;
  c.y0 = y0;
  c.x1 = x1;
  c.y1 = y1;
  const double theta = rng.uniform(0.0, tilt_max_deg * kPi / 180.0);
  const double phi = rng.uniform(0.0, 2.0 * kPi);
  c.normal = {std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)};
  const Eigen::Vector2d center_px(0.5 * (x0 + x1), 0.5 * (y0 + y1));
  const Eigen::Vector2d n = cam.normalize(center_px);
  const Eigen::Vector3d anchor = depth * Eigen::Vector3d(n.x(), n.y(), 1.0);
  c.d = c.normal.dot(anchor);
  return c;
}

struct GeneratedSurface {
  SurfaceModel surface;
  RelativePose pose;
};

SurfaceModel make_surface(Rng& rng, int width, int height, double focal, SceneKind kind, int grid,
                          double depth, double depth_jitter, double tilt_max_deg,
                          double texture_wavelength, uint64_t texture_seed) {
  SurfaceModel s;
  s.cam = centered_camera(width, height, focal);
  s.texture = Texture(texture_seed, 4, texture_wavelength);
  s.width = width;
  s.height = height;
  const int g = kind == SceneKind::Homography ? 1 : grid;
  for (int j = 0; j < g; ++j)
    for (int i = 0; i < g; ++i) {
      const double x0 = -0.5 + width * static_cast<double>(i) / g;
      const double x1 = -0.5 + width * static_cast<double>(i + 1) / g;
      const double y0 = -0.5 + height * static_cast<double>(j) / g;
      const double y1 = -0.5 + height * static_cast<double>(j + 1) / g;
      const double cell_depth = depth * (1.0 + depth_jitter * rng.uniform(-1.0, 1.0));
      s.cells.push_back(make_cell(rng, s.cam, x0, y0, x1, y1, cell_depth, tilt_max_deg));
    }
  return s;
}

RelativePose random_pose(Rng& rng, double rot_max_deg, double baseline) {
  RelativePose pose;
  const Eigen::Vector3d axis = unit_sphere(rng);
  const double angle = rng.uniform(0.0, rot_max_deg * kPi / 180.0);
  pose.rotation = Eigen::AngleAxisd(angle, axis).toRotationMatrix();
  pose.translation = unit_sphere(rng) * (baseline * rng.uniform(0.8, 1.2));
  return pose;
}

// Fraction of a probe grid with valid, margin-respecting correspondences.
double probe_valid_fraction(const SurfaceModel& surface, const RelativePose& pose, double margin) {
  const int kProbe = 16;
  int valid = 0;
  for (int j = 0; j < kProbe; ++j)
    for (int i = 0; i < kProbe; ++i) {
      const double x = margin + (surface.width - 1 - 2 * margin) * (i + 0.5) / kProbe;
      const double y = margin + (surface.height - 1 - 2 * margin) * (j + 0.5) / kProbe;
      const SurfaceModel::MapResult m = surface.map_to_view({x, y}, pose);
      if (m.valid && in_margins(m.point, surface.width, surface.height, margin)) ++valid;
    }
  return static_cast<double>(valid) / (kProbe * kProbe);
}

}  // namespace

PairScene PairScene::generate(uint64_t seed, const PairConfig& config) {
  if (config.width < 64 || config.height < 64)
    throw ShapeError("PairScene: image size must be at least 64");
  Rng rng(Rng::mix(seed, 0x706169));
  PairScene out;
  const double margin = patch_margin(config.patch_size);
  for (int attempt = 0; attempt < config.max_attempts; ++attempt) {
    SurfaceModel surface =
        make_surface(rng, config.width, config.height, config.focal, config.kind, config.grid,
                     config.depth, config.depth_jitter, config.tilt_max_deg,
                     config.texture_wavelength, Rng::mix(seed, 1));
    RelativePose pose = random_pose(rng, config.rot_max_deg, config.baseline);
    if (probe_valid_fraction(surface, pose, margin) < config.min_valid_fraction) continue;
    out.surface_ = std::move(surface);
    out.pose_ = pose;
    out.image_a_ = out.surface_.render_reference();
    out.image_b_ = out.surface_.render_view(pose);
    return out;
  }
  throw DataError("PairScene: no valid scene configuration after " +
                  std::to_string(config.max_attempts) + " attempts");
}

PairScene PairScene::from_homography(const Eigen::Matrix3d& h, uint64_t texture_seed, int width,
                                     int height) {
  if (width < 64 || height < 64) throw ShapeError("PairScene: image size must be at least 64");
  if (std::abs(h.determinant()) < 1e-12) throw NumericalError("PairScene: singular homography");
  PairScene out;
  out.surface_.cam = centered_camera(width, height, 1.0);
  out.surface_.texture = Texture(texture_seed);
  out.surface_.width = width;
  out.surface_.height = height;
  out.homography_ = h;

  out.image_a_ = out.surface_.render_reference();
  out.image_b_ = Image::zeros(width, height);
  const Eigen::Matrix3d hinv = h.inverse();
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const Eigen::Vector3d p = hinv * Eigen::Vector3d(x, y, 1.0);
      out.image_b_.at(x, y) = std::abs(p.z()) < 1e-12
                                  ? 0.5f
                                  : static_cast<float>(out.surface_.texture.value(
                                        p.x() / p.z(), p.y() / p.z()));
    }
  return out;
}

const RelativePose& PairScene::pose() const {
  if (!pose_) throw DataError("PairScene: scene has no pose");
  return *pose_;
}

Eigen::Matrix3d PairScene::essential() const { return essential_from_pose(pose()); }

PairScene::MapResult PairScene::map_a_to_b(const Eigen::Vector2d& pa) const {
  if (homography_) {
    MapResult r;
    const Eigen::Vector3d q = *homography_ * Eigen::Vector3d(pa.x(), pa.y(), 1.0);
    if (q.z() > 1e-12) {
      r.point = {q.x() / q.z(), q.y() / q.z()};
      r.valid = true;
    }
    return r;
  }
  return surface_.map_to_view(pa, *pose_);
}

PairScene::MapResult PairScene::map_b_to_a(const Eigen::Vector2d& pb) const {
  if (homography_) {
    MapResult r;
    const Eigen::Vector3d p = homography_->inverse() * Eigen::Vector3d(pb.x(), pb.y(), 1.0);
    if (std::abs(p.z()) > 1e-12) {
      r.point = {p.x() / p.z(), p.y() / p.z()};
      r.valid = true;
    }
    return r;
  }
  return surface_.map_from_view(pb, *pose_);
}

// ---------------------------------------------------------------------------
// Patches and matches

TensorF extract_patch(const Image& image, const Eigen::Vector2d& center, int size) {
  if (size < 1 || size % 2 == 0) throw ShapeError("extract_patch: size must be odd and positive");
  if (image.channels != 1) throw ShapeError("extract_patch: grayscale images only");
  const double margin = patch_margin(size);
  if (!in_margins(center, image.width, image.height, margin))
    throw DataError("extract_patch: patch support outside image");
  const int half = (size - 1) / 2;
  TensorF patch = TensorF::zeros({1, size, size});
  for (int dy = -half; dy <= half; ++dy)
    for (int dx = -half; dx <= half; ++dx)
      patch(0, dy + half, dx + half) =
          static_cast<float>(image.bilinear(center.x() + dx, center.y() + dy));
  return patch;
}

MatchSet sample_training_matches(const PairScene& scene, int n, double noise_std, uint64_t seed,
                                 int patch_size) {
  if (n < 0) throw ShapeError("sample_training_matches: negative count");
  if (noise_std < 0) throw ShapeError("sample_training_matches: negative noise std");
  MatchSet set;
  set.cam = scene.intrinsics();
  if (scene.has_pose()) {
    set.has_essential = true;
    set.essential = scene.essential();
  }
  set.samples.reserve(static_cast<size_t>(n));

  const double margin = patch_margin(patch_size);
  const double x_lo = margin, x_hi = scene.width() - 1 - margin;
  const double y_lo = margin, y_hi = scene.height() - 1 - margin;
  if (x_hi <= x_lo || y_hi <= y_lo)
    throw DataError("sample_training_matches: image too small for the patch size");

  Rng rng(seed);
  const long long max_attempts = 500LL * std::max(n, 1) + 1000;
  long long attempts = 0;
  while (static_cast<int>(set.samples.size()) < n) {
    if (++attempts > max_attempts)
      throw DataError("sample_training_matches: insufficient valid area");
    MatchSample s;
    s.true_a = {rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi)};
    const PairScene::MapResult m = scene.map_a_to_b(s.true_a);
    if (!m.valid) continue;
    s.true_b = m.point;
    s.keypoint_a = s.true_a + noise_std * Eigen::Vector2d(rng.normal(), rng.normal());
    s.keypoint_b = s.true_b + noise_std * Eigen::Vector2d(rng.normal(), rng.normal());
    if (!in_margins(s.keypoint_a, scene.width(), scene.height(), margin)) continue;
    if (!in_margins(s.keypoint_b, scene.width(), scene.height(), margin)) continue;
    s.patch_a = extract_patch(scene.image_a(), s.keypoint_a, patch_size);
    s.patch_b = extract_patch(scene.image_b(), s.keypoint_b, patch_size);
    s.true_offset_a = s.true_a - s.keypoint_a;
    s.true_offset_b = s.true_b - s.keypoint_b;
    set.samples.push_back(std::move(s));
  }
  return set;
}

// ---------------------------------------------------------------------------
// Multi-view scenes and tracks

MultiViewScene MultiViewScene::generate(uint64_t seed, const MultiViewConfig& config) {
  if (config.views < 2) throw ShapeError("MultiViewScene: need at least two views");
  if (config.width < 64 || config.height < 64)
    throw ShapeError("MultiViewScene: image size must be at least 64");
  Rng rng(Rng::mix(seed, 0x6d756c7469));
  const double margin = patch_margin(config.patch_size);

  MultiViewScene out;
  for (int attempt = 0; attempt < config.max_attempts; ++attempt) {
    SurfaceModel surface = make_surface(rng, config.width, config.height, config.focal,
                                        SceneKind::DepthPlanes, config.grid, config.depth,
                                        config.depth_jitter, config.tilt_max_deg,
                                        config.texture_wavelength, Rng::mix(seed, 2));
    std::vector<RelativePose> poses;
    poses.emplace_back();  // view 0 == reference
    bool ok = true;
    for (int v = 1; v < config.views; ++v) {
      const RelativePose pose = random_pose(rng, config.rot_max_deg, config.baseline);
      if (probe_valid_fraction(surface, pose, margin) < config.min_valid_fraction) {
        ok = false;
        break;
      }
      poses.push_back(pose);
    }
    if (!ok) continue;
    out.surface_ = std::move(surface);
    out.poses_ = std::move(poses);
    out.images_.clear();
    out.images_.push_back(out.surface_.render_reference());
    for (int v = 1; v < config.views; ++v)
      out.images_.push_back(out.surface_.render_view(out.poses_[static_cast<size_t>(v)]));
    return out;
  }
  throw DataError("MultiViewScene: no valid configuration after " +
                  std::to_string(config.max_attempts) + " attempts");
}

std::vector<TrackSample> build_tracks(const MultiViewScene& scene, int n_points, double noise_std,
                                      uint64_t seed, int patch_size) {
  if (n_points < 0) throw ShapeError("build_tracks: negative count");
  const SurfaceModel& surface = scene.surface();
  const double margin = patch_margin(patch_size);
  const double x_lo = margin, x_hi = surface.width - 1 - margin;
  const double y_lo = margin, y_hi = surface.height - 1 - margin;

  Rng rng(seed);
  std::vector<TrackSample> tracks;
  tracks.reserve(static_cast<size_t>(n_points));
  for (int k = 0; k < n_points; ++k) {
    const Eigen::Vector2d p0(rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi));
    const int cell = surface.cell_of(p0);
    if (cell < 0) continue;
    const Eigen::Vector3d world = surface.unproject(p0, cell);
    if (!world.allFinite() || world.z() <= 0) continue;

    TrackSample track;
    track.world_point = world;
    for (int v = 0; v < scene.view_count(); ++v) {
      const SurfaceModel::MapResult m = surface.map_to_view(p0, scene.pose(v));
      if (!m.valid || !in_margins(m.point, surface.width, surface.height, margin)) continue;
      TrackObservation obs;
      obs.view = v;
      obs.true_point = m.point;
      obs.keypoint = m.point + noise_std * Eigen::Vector2d(rng.normal(), rng.normal());
      if (!in_margins(obs.keypoint, surface.width, surface.height, margin)) continue;
      obs.patch = extract_patch(scene.image(v), obs.keypoint, patch_size);
      track.observations.push_back(std::move(obs));
    }
    if (track.observations.size() < 2) continue;
    track.reference = 0;
    tracks.push_back(std::move(track));
  }
  return tracks;
}

// ---------------------------------------------------------------------------
// Match-list io

std::vector<MatchRecord> read_match_list(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open match list: " + path.string());
  std::vector<MatchRecord> matches;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    MatchRecord m;
    if (!(ls >> m.a.x() >> m.a.y() >> m.b.x() >> m.b.y()))
      throw DataError("match list: line " + std::to_string(line_no) + " needs 4 coordinates");
    if (!(ls >> m.flag)) m.flag = 0;  // optional fifth column
    std::string extra;
    if (ls >> extra)
      throw DataError("match list: line " + std::to_string(line_no) + " has trailing tokens");
    matches.push_back(m);
  }
  return matches;
}

void write_match_list(const std::vector<MatchRecord>& matches, const std::filesystem::path& path,
                      bool with_flags) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open match list for writing: " + path.string());
  for (const MatchRecord& m : matches) {
    os << format_double(m.a.x()) << ' ' << format_double(m.a.y()) << ' ' << format_double(m.b.x())
       << ' ' << format_double(m.b.y());
    if (with_flags) os << ' ' << m.flag;
    os << '\n';
  }
  if (!os) throw DataError("failed writing match list: " + path.string());
}

}  // namespace xrefine
