#pragma once

#include <Eigen/Core>

#include <optional>
#include <vector>

#include "xrefine/geometry.hpp"
#include "xrefine/image.hpp"
#include "xrefine/tensor.hpp"

// Synthetic ground truth. A scene is a textured piecewise-planar surface
// observed by calibrated cameras: the surface is defined per reference-view
// pixel cell (each cell is a slanted plane patch), the texture is procedural
// band-limited value noise painted in reference-view coordinates, and every
// other view is rendered by exact plane-induced homographies with depth-based
// occlusion resolution. Correspondences are therefore available in closed
// form to machine precision, together with the true relative pose and
// essential matrix.

namespace xrefine {

// ---------------------------------------------------------------------------
// Procedural texture: 4 octaves of smoothstep-interpolated value noise on an
// infinite lattice, tanh contrast stretch, values in (0,1).

class Texture {
 public:
  explicit Texture(uint64_t seed, int octaves = 4, double base_wavelength = 32.0,
                   double contrast = 3.0)
      : seed_(seed), octaves_(octaves), base_wavelength_(base_wavelength), contrast_(contrast) {
    if (octaves < 1 || !(base_wavelength > 1.0)) throw ShapeError("Texture: bad parameters");
  }

  double value(double x, double y) const;
  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_ = 0;
  int octaves_ = 4;
  double base_wavelength_ = 32.0;
  double contrast_ = 3.0;
};

// ---------------------------------------------------------------------------
// Piecewise-planar surface seen from a reference camera.

struct PlaneCell {
  Eigen::Vector3d normal{0, 0, 1};  // plane normal . X = d in reference coords
  double d = 1;
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open pixel rect in the reference view
};

struct SurfaceModel {
  CameraIntrinsics cam;
  Texture texture{0};
  int width = 0, height = 0;
  std::vector<PlaneCell> cells;

  struct MapResult {
    Eigen::Vector2d point = Eigen::Vector2d::Zero();
    bool valid = false;
  };

  int cell_of(const Eigen::Vector2d& ref_px) const;
  /// 3D point (reference-camera coords) on the given cell's plane along the
  /// ray of `ref_px`.
  Eigen::Vector3d unproject(const Eigen::Vector2d& ref_px, int cell) const;
  /// Cell visible at `view_px` in the camera with pose (reference -> view),
  /// resolving occlusions by smallest view depth; -1 if none.
  int winner(const Eigen::Vector2d& view_px, const RelativePose& pose) const;

  MapResult map_to_view(const Eigen::Vector2d& ref_px, const RelativePose& pose) const;
  MapResult map_from_view(const Eigen::Vector2d& view_px, const RelativePose& pose) const;

  Image render_reference() const;
  Image render_view(const RelativePose& pose) const;
};

// ---------------------------------------------------------------------------
// Two-view scene.

enum class SceneKind { Homography, DepthPlanes };

struct PairConfig {
  int width = 256, height = 256;
  SceneKind kind = SceneKind::DepthPlanes;
  double focal = 256.0;
  int grid = 4;                 // DepthPlanes cells per axis
  double depth = 6.0;           // mean plane depth, scene units
  double depth_jitter = 0.25;   // relative per-cell depth variation
  double tilt_max_deg = 30.0;   // plane normal tilt bound
  double rot_max_deg = 10.0;    // relative-pose rotation bound
  double baseline = 1.2;        // translation magnitude (+-20% jitter)
  double texture_wavelength = 32.0;  // base wavelength of the coarsest octave
  int patch_size = 11;          // used for valid-region margins
  double min_valid_fraction = 0.25;
  int max_attempts = 100;
};

class PairScene {
 public:
  using MapResult = SurfaceModel::MapResult;

  /// Random posed scene per config; rejection-samples geometry until a probe
  /// grid shows enough valid overlap (throws DataError after max_attempts).
  static PairScene generate(uint64_t seed, const PairConfig& config);

  /// Explicit-homography scene without a pose (map tests and plumbing);
  /// essential() is unavailable.
  static PairScene from_homography(const Eigen::Matrix3d& h, uint64_t texture_seed, int width,
                                   int height);

  const Image& image_a() const { return image_a_; }
  const Image& image_b() const { return image_b_; }
  const CameraIntrinsics& intrinsics() const { return surface_.cam; }
  int width() const { return surface_.width; }
  int height() const { return surface_.height; }

  bool has_pose() const { return pose_.has_value(); }
  const RelativePose& pose() const;
  Eigen::Matrix3d essential() const;

  MapResult map_a_to_b(const Eigen::Vector2d& pa) const;
  MapResult map_b_to_a(const Eigen::Vector2d& pb) const;

 private:
  SurfaceModel surface_;
  std::optional<RelativePose> pose_;
  std::optional<Eigen::Matrix3d> homography_;  // explicit-H mode only
  Image image_a_, image_b_;
};

// ---------------------------------------------------------------------------
// Patch extraction and match sampling.

/// `size` x `size` bilinear samples centered exactly at the subpixel center,
/// returned as a [1, size, size] float tensor. Throws DataError if the
/// support (center +- (size-1)/2, plus the bilinear margin) exits the image.
TensorF extract_patch(const Image& image, const Eigen::Vector2d& center, int size);

/// Smallest distance a patch center must keep from the image border.
inline double patch_margin(int patch_size) { return (patch_size - 1) / 2 + 1.0; }

/// True when `p` keeps at least `margin` pixels from every border of a
/// width x height image, i.e. a patch centered there stays extractable.
inline bool in_image_margins(const Eigen::Vector2d& p, int width, int height, double margin) {
  return p.x() >= margin && p.x() <= width - 1 - margin && p.y() >= margin &&
         p.y() <= height - 1 - margin;
}

struct MatchSample {
  TensorF patch_a, patch_b;
  Eigen::Vector2d keypoint_a, keypoint_b;        // perturbed patch centers
  Eigen::Vector2d true_a, true_b;                // exact correspondence
  Eigen::Vector2d true_offset_a, true_offset_b;  // true point - keypoint
};

struct MatchSet {
  std::vector<MatchSample> samples;
  bool has_essential = false;
  Eigen::Matrix3d essential = Eigen::Matrix3d::Zero();
  CameraIntrinsics cam;
};

/// True correspondences sampled uniformly over the valid overlap, both
/// keypoints independently perturbed with per-axis N(0, noise_std^2), patches
/// cropped at the perturbed keypoints. Fully deterministic in `seed`.
MatchSet sample_training_matches(const PairScene& scene, int n, double noise_std, uint64_t seed,
                                 int patch_size = 11);

// ---------------------------------------------------------------------------
// Multi-view scenes and feature tracks.

struct MultiViewConfig {
  int width = 256, height = 256;
  double focal = 256.0;
  int views = 5;
  int grid = 4;
  double depth = 6.0;
  double depth_jitter = 0.25;
  double tilt_max_deg = 30.0;
  double rot_max_deg = 8.0;
  double baseline = 1.0;
  double texture_wavelength = 32.0;
  int patch_size = 11;
  double min_valid_fraction = 0.3;
  int max_attempts = 100;
};

class MultiViewScene {
 public:
  static MultiViewScene generate(uint64_t seed, const MultiViewConfig& config);

  int view_count() const { return static_cast<int>(poses_.size()); }
  const Image& image(int view) const { return images_.at(static_cast<size_t>(view)); }
  /// Pose mapping reference (view 0 == world) coordinates to the given view.
  const RelativePose& pose(int view) const { return poses_.at(static_cast<size_t>(view)); }
  const CameraIntrinsics& intrinsics() const { return surface_.cam; }
  const SurfaceModel& surface() const { return surface_; }

 private:
  SurfaceModel surface_;
  std::vector<RelativePose> poses_;
  std::vector<Image> images_;
};

struct TrackObservation {
  int view = 0;
  Eigen::Vector2d keypoint = Eigen::Vector2d::Zero();    // perturbed
  Eigen::Vector2d true_point = Eigen::Vector2d::Zero();  // exact projection
  TensorF patch;
};

struct TrackSample {
  std::vector<TrackObservation> observations;  // >= 2, ordered by view id
  int reference = 0;                           // index into observations
  Eigen::Vector3d world_point = Eigen::Vector3d::Zero();
};

/// Projects surface points into every view; invisible views are dropped and
/// tracks with fewer than two surviving observations are discarded, so the
/// result may hold fewer than n_points tracks.
std::vector<TrackSample> build_tracks(const MultiViewScene& scene, int n_points, double noise_std,
                                      uint64_t seed, int patch_size = 11);

// ---------------------------------------------------------------------------
// Match-list text format: one match per line, "x1 y1 x2 y2" with an optional
// fifth column (refinement flag), '#' comments and blank lines ignored.

struct MatchRecord {
  Eigen::Vector2d a = Eigen::Vector2d::Zero(), b = Eigen::Vector2d::Zero();
  int flag = 0;
};

std::vector<MatchRecord> read_match_list(const std::filesystem::path& path);
void write_match_list(const std::vector<MatchRecord>& matches, const std::filesystem::path& path,
                      bool with_flags);

}  // namespace xrefine
