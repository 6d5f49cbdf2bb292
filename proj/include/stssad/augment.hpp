#pragma once
// Differentiable data augmentations plus the two non-differentiable baselines.
//
// Image batches are rank-2 tensors [n, m*m*c], row-major pixels with channels
// minor (flat index = (row*m + col)*c + ch), values in [0,1].
//
// cutdiff and rotate are differentiable with respect to both the batch and the
// augmentation parameter vector; their graphs are built from engine primitives
// only, so they can sit inside a recorded training step and still be
// differentiated a second time by the hypergradient. cutout/cutpaste are hard
// masks for baseline comparisons and are not differentiable.

#include <array>
#include <cstdint>
#include <memory>
#include <vector>

#include "stssad/common.hpp"
#include "stssad/tensor.hpp"

namespace stssad::augment {

enum class Kind { CutDiff, Rotation, CutOut, CutPaste };

std::string_view kind_name(Kind k);
Kind kind_from_name(std::string_view name);

// Box of admissible raw parameter values; gradient updates are clipped back into
// it (the rotation angle wraps instead of clipping).
struct Domain {
    std::vector<double> lo, hi;
};

struct AugParams {
    Kind kind = Kind::CutDiff;
    Tensor a;  // raw parameters: cutdiff (a0,a1,a2) -> L=[[a0,0],[a1,a2]]; rotation angle;
               // cutout size fraction; cutpaste (size fraction, aspect ratio)
    Domain domain;
};

// Parameters with the given raw values and the default domain for the kind.
AugParams make_params(Kind kind, const std::vector<double>& raw);

// Number of raw parameter components for the kind.
int64_t param_count(Kind kind);

// Clip a into its domain (wraps the rotation angle mod 2pi). Non-differentiable;
// replaces params.a values with a detached projected copy.
void project(AugParams& params);

// Uniform draw from the kind's sampling box (random-search baselines). Scale-like
// components draw log-uniformly.
Tensor sample_random(Kind kind, RandomStream& rng);

// Initialization grid for multi-start tuning.
std::vector<Tensor> init_grid(Kind kind);

// ---- cutdiff ----
// Soft elliptical darkening. For image row i with center mu[i] in (0,1)^2, the
// patch over the 1-indexed grid g = ((r+1)/m, (c+1)/m) is
//   p = exp(-(g-mu)^T (L L^T + 1e-6 I)^(-1) (g-mu)),  L = [[a0,0],[a1,a2]]
// and the output is clamp01(x - p) applied to every channel.
Tensor cutdiff(const Tensor& x, int64_t m, int64_t c, const Tensor& a,
               const std::vector<std::array<double, 2>>& mu);

// The patch values alone, [n, m*m]; exposed for tests and visual dumps.
Tensor cutdiff_patch(int64_t m, int64_t n, const Tensor& a,
                     const std::vector<std::array<double, 2>>& mu);

// ---- rotation ----
// Source-sampling grid for a rotation by `angle` (scalar tensor), normalized
// coordinates in [-1,1]^2: row 0 holds x', row 1 holds y' for each of the m*m
// target pixels; (x',y') = (x cos a + y sin a, -x sin a + y cos a), so the image
// content appears rotated by +angle.
Tensor affine_grid(const Tensor& angle, int64_t m);

// Bilinear lookup of every coords column (normalized [-1,1]) in each image of
// the batch, zero padding outside. x: [n, m*m*c], coords: [2, P] -> [n, P*c].
Tensor bilinear_sample(const Tensor& x, int64_t m, int64_t c, const Tensor& coords);

// rotate = bilinear_sample at the affine grid; shape-preserving.
Tensor rotate(const Tensor& x, int64_t m, int64_t c, const Tensor& angle);

// ---- hard-mask baselines (not differentiable) ----
// Zero a square patch of area ~ size_frac at a uniform location inside the image.
Tensor cutout(const Tensor& x, int64_t m, int64_t c, double size_frac, RandomStream& rng);
// Copy a rectangle of area ~ size_frac with the given aspect ratio to another
// uniform location.
Tensor cutpaste(const Tensor& x, int64_t m, int64_t c, double size_frac, double ratio,
                RandomStream& rng);

// ---- parameter geometry ----
struct GSR {
    double g = 0.0, s = 0.0, r = 1.0;
};
// L = R(g)*diag(s/r, s*r). Row-major 2x2.
std::array<double, 4> compose_L(double g, double s, double r);
// Inverse of compose_L. Exact when L has orthogonal columns (every composed L
// does); otherwise the nearest ellipse axes via the eigendecomposition of LL^T.
// In both branches s = sqrt(|det L|).
GSR decompose_L(const std::array<double, 4>& L);
// L entries for a raw cutdiff parameter vector.
std::array<double, 4> cutdiff_L(const Tensor& a);

// Apply the augmentation to a batch. rng drives the per-image patch centers
// (cutdiff) and the baseline mask locations; rotation ignores it.
Tensor apply(const AugParams& params, const Tensor& x, int64_t m, int64_t c, RandomStream& rng);

}  // namespace stssad::augment
