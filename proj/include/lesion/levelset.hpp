#pragma once

// Slice-wise localized region-based level set with CNN-driven energy weights
// and a texture-adaptive local window.
//
// Sign convention: phi < 0 inside the contour. Speeds are outward normal
// speeds: positive expands, and phi is updated as phi -= dt * V * |grad phi|.

#include <stdexcept>
#include <string>
#include <vector>

#include "lesion/convnet.hpp"
#include "lesion/image2d.hpp"
#include "lesion/volgrid.hpp"

namespace lesion {

/// The zero level set disappeared (empty band or no interior left).
class ContourVanished : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PhiField {
  int width = 0;
  int height = 0;
  std::vector<double> phi;
  double band_width = 3.0;

  double operator()(int x, int y) const { return phi[static_cast<std::size_t>(y) * width + x]; }
  double& operator()(int x, int y) { return phi[static_cast<std::size_t>(y) * width + x]; }
  bool inside(int x, int y) const { return (*this)(x, y) < 0.0; }
};

struct EnergyWeights {
  double lambda1 = 1.0;  // interior fidelity, contracts
  double lambda2 = 1.0;  // exterior fidelity, expands
  double mu = 0.0;       // curvature regularization
};

struct WindowParams {
  int side = 5;                // odd, in [5, 41]
  double texture_factor = 1.0; // in [1, 2]
};

/// Circle through two diameter endpoints.
Circle circle_from_points(Point2 a, Point2 b);

/// Exact signed distance to the circle with diameter (a, b), negative inside.
/// Throws ValidationError for coincident points.
PhiField init_phi_from_points(Point2 a, Point2 b, int width, int height, double band_width = 3.0);

/// lambda1 = exp((1 + p2 + p3) / (1 + p1)), lambda2 = exp((1 + p1 + p2) / (1 + p3));
/// mu = mu_factor * (lambda1 + lambda2) / 2. Throws ValidationError when the
/// probabilities are more than 1e-6 off the simplex.
EnergyWeights lambdas_from_probs(const ClassProbs& p, double mu_factor = 0.2);

/// t = 2 - H, side = clamp(nearest odd of 0.4 * D * t, 5, 41).
WindowParams adaptive_window(double diameter, double homogeneity);

struct StepInfo {
  double dt = 0.0;
  double max_change = 0.0;
  std::size_t band_points = 0;
};

/// One explicit update of the localized two-phase energy on the narrow band
/// (|phi| <= band_width, plus every point with a 4-neighbor across the interface).
/// dt = min(dt_max, 0.2 / mu); each point's change dt * V * |grad phi| is
/// clamped to 0.45 voxels.
PhiField evolve_step(const PhiField& phi, const Image2DView& image, const EnergyWeights& w,
                     const WindowParams& win, double dt_max = 1.0, StepInfo* info = nullptr);

/// Signed distance to the piecewise-linear zero level set, exact within
/// `cap` voxels of the interface and clamped to +-cap beyond. Cell signs are
/// preserved. `cap` <= 0 selects band_width + 3.
PhiField reinitialize(const PhiField& phi, double cap = 0.0);

SliceMask inside_mask(const PhiField& phi);
/// Removes every 4-connected interior component except the largest (ties:
/// first in raster order) by flipping its sign. Returns true if any was removed.
bool keep_largest_component(PhiField& phi);
/// Centroid and equivalent radius of the interior; radius 0 when empty.
Circle contour_circle(const PhiField& phi);

struct SegmentConfig {
  int reinit_every = 25;
  int cnn_every = 10;
  int max_iterations = 500;
  double convergence_fraction = 0.005;
  int convergence_checks = 3;
  double band_width = 3.0;
  double mu_factor = 0.2;
  double smoothing_sigma = 1.0;   // pixels, applied before evolution
  double intensity_floor_hu = 10; // lower bound of the normalization scale
  int slice_padding = 1;          // in-plane box growth (voxels) before slicing
  int slice_padding_z = 0;        // extra slices above and below the box
  double dt_max = 1.0;
  bool single_component = true;   // prune all but the largest interior piece
  bool reject_outside = true;     // drop slices whose final contour the CNN calls outside-far
};

struct SliceReport {
  int z = 0;
  int iterations = 0;
  double final_lambda1 = 0.0;
  double final_lambda2 = 0.0;
  int window_side = 0;
  bool converged = false;
  bool vanished = false;
};

struct LesionSegmentation {
  Mask3 mask;  // 1 inside the segmented lesion
  std::vector<SliceReport> slices;
  std::vector<std::string> warnings;
};

/// Smoothed, normalized copy of an axial slice region (x0..x1, y0..y1
/// inclusive), as consumed by the evolution and the CNN.
Image2D prepare_slice(const Volume3& v, int z, const BoxRegion& roi, const SegmentConfig& cfg);

/// In-plane region the level set runs on for a given detection box.
BoxRegion segmentation_roi(const BoxRegion& box, const Dims3& d);

LesionSegmentation segment_lesion(const Volume3& v, const BoxRegion& box, const ConvNet& cnn,
                                  const SegmentConfig& cfg = {});

}  // namespace lesion
