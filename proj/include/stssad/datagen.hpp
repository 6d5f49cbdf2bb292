#pragma once
// Synthetic desk-scale testbeds with known ground-truth augmentation
// parameters, plus dataset persistence.
//
// Label hygiene is structural: the tuner consumes an UnlabeledData view that
// simply has no label member, and the labels inside a Dataset live behind
// SealedLabels whose only accessor bumps a global read counter. Production
// unseal() calls exist in the eval module alone; tests assert the counter
// stays at zero across a whole tuning run.

#include <cstdint>
#include <string>
#include <vector>

#include "stssad/augment.hpp"
#include "stssad/common.hpp"
#include "stssad/tensor.hpp"

namespace stssad::datagen {

enum class AnomalyKind { CutdiffPatch, Rotation };

std::string_view anomaly_kind_name(AnomalyKind k);
AnomalyKind anomaly_kind_from_name(std::string_view name);

struct SynthSpec {
    uint64_t seed = 0;
    int64_t m = 32;          // image side
    int64_t c = 1;           // channels (PNG persistence requires 1)
    int64_t smoothness = 4;  // box-blur width of the texture generator
    int64_t n_train = 64;
    int64_t n_test_normal = 64;
    int64_t n_test_anomaly = 16;
    AnomalyKind anomaly_kind = AnomalyKind::CutdiffPatch;
    // Ground truth: patch size/aspect for cutdiff (angle fixed to 0), or the
    // rotation angle in radians.
    double s_star = 0.08;
    double r_star = 1.0;
    double angle_star = 3.14159265358979323846;
};

// Test labels, 1 = anomaly. Sealed: reading the values requires unseal(),
// and every unseal() is counted process-wide.
class SealedLabels {
  public:
    SealedLabels() = default;
    explicit SealedLabels(std::vector<uint8_t> labels) : v_(std::move(labels)) {}
    int64_t size() const { return int64_t(v_.size()); }
    // Audited accessor. The only production callers are in the eval module.
    const std::vector<uint8_t>& unseal() const;
    static uint64_t read_count();
    static void reset_read_count();

  private:
    std::vector<uint8_t> v_;
};

struct DatasetMeta {
    int64_t m = 0;
    int64_t c = 1;
    uint64_t seed = 0;
    // Empty when the dataset was not synthesized (no known ground truth).
    std::string anomaly_kind;
    // {s*, r*} for cutdiff patches, {angle*} for rotation.
    std::vector<double> true_params;
};

struct Dataset {
    Tensor train;  // [n_train, m*m*c], inliers only
    Tensor test;   // [n_test, m*m*c]
    SealedLabels labels;
    DatasetMeta meta;
};

// The label-free view the tuner consumes.
struct UnlabeledData {
    Tensor train;
    Tensor test;
    int64_t m = 0;
    int64_t c = 1;
};
UnlabeledData view(const Dataset& ds);

// Smoothed uniform noise: separable box blur of the given width over
// uniform(0,1) pixels, contrast-stretched back to [0,1] when the blur actually
// mixed anything (width 1 returns the raw noise unchanged). Deterministic in
// the seed. Returns [1, m*m].
Tensor gen_texture(uint64_t seed, int64_t m, int64_t smoothness);

// Orientation marker for rotation testbeds: a bright gradient wedge blended
// into the top-left corner, so a rotated copy is geometrically distinct.
Tensor add_corner_glyph(const Tensor& img, int64_t m);

// Ground-truth anomaly injection: a cutdiff darkening with
// L = diag(s*/r*, s*·r*) at a fresh center, or a rotation by angle*.
Tensor inject_anomaly(const Tensor& img, const SynthSpec& spec, RandomStream& rng);

// Full testbed: n_train inlier textures, a shuffled test set of fresh inliers
// plus injected anomalies, sealed labels, and metadata recording the ground
// truth. All pixels are quantized to k/255 so PNG persistence is lossless.
Dataset build_testbed(const SynthSpec& spec);

// Directory container: train/ and test/ PNGs, labels.csv (filename,label),
// meta.json. Quantized single-channel data round-trips bitwise; for anything
// else use the raw tensor file in io.hpp, which is lossless.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace stssad::datagen
