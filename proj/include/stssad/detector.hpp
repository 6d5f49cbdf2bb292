#pragma once
// The anomaly detector: a small fully connected encoder trained with binary
// cross entropy to separate inliers from their augmented copies, plus the
// Gaussian density estimator that turns embeddings into anomaly scores and the
// score-variance statistic used to pick among candidate models.

#include <string>
#include <vector>

#include "stssad/common.hpp"
#include "stssad/tensor.hpp"

namespace stssad::detector {

// Layer widths: input -> hidden... -> embedding. relu between hidden layers,
// no activation on the embedding layer.
struct EncoderConfig {
    int64_t in_dim = 0;
    std::vector<int64_t> hidden = {64, 64};
    int64_t embed_dim = 16;

    std::vector<int64_t> dims() const;  // {in, hidden..., embed}
};

// All trainable tensors of the encoder plus the scalar classifier head
// (affine map embedding -> logit; sigmoid applied inside the loss).
struct EncoderParams {
    EncoderConfig config;
    std::vector<Tensor> weights;  // weights[l]: [dims[l], dims[l+1]]
    std::vector<Tensor> biases;   // biases[l]: [dims[l+1]]
    Tensor head_w;                // [embed_dim, 1]
    Tensor head_b;                // [1]

    std::vector<Tensor> all() const;  // every trainable tensor, fixed order
    // Rebuilds the same architecture around replacement tensors (same order as
    // all()); used by gradient steps and by tests that vary one tensor.
    EncoderParams with_tensors(const std::vector<Tensor>& ts) const;
};

// Uniform(-b, b) weights with b = sqrt(6/(fan_in+fan_out)), zero biases.
EncoderParams init_encoder(const EncoderConfig& config, RandomStream& rng);

// [n, in_dim] -> [n, embed_dim] embeddings, recorded on the active tape.
Tensor encode(const EncoderParams& params, const Tensor& x);

// [n, embed_dim] -> [n, 1] classifier logits.
Tensor head_logits(const EncoderParams& params, const Tensor& z);

// Mean over all samples of -log(1-p) on inliers and -log(p) on augmented
// samples, with p = sigmoid(logit). Evaluated in logit space (softplus), so it
// is finite even when the classifier saturates.
Tensor bce_train_loss(const EncoderParams& params, const Tensor& inliers,
                      const Tensor& augmented);

// One full-batch gradient step on an arbitrary scalar loss: returns
// params[i] - alpha * d(loss)/d(params[i]). With create_graph the returned
// tensors stay on the tape as differentiable functions of whatever the loss
// depended on. Fails if any gradient is non-finite, naming the parameter.
std::vector<Tensor> sgd_step(const Tensor& loss, const std::vector<Tensor>& params, double alpha,
                             bool create_graph);

struct TrainStepResult {
    EncoderParams params;
    double loss = 0.0;
};

// theta' = theta - alpha * grad(L_trn). With create_graph=false this runs on a
// private tape and returns fresh leaves; with create_graph=true it records on
// the caller's tape so theta' remains differentiable in the augmentation
// parameters behind `augmented`.
TrainStepResult train_step(const EncoderParams& params, const Tensor& inliers,
                           const Tensor& augmented, double alpha, bool create_graph = false);

// Gaussian density estimator over embedding rows. covariance is the shrunk
// sample covariance (1-rho) S + rho tr(S)/h I + lambda_min I, guaranteeing
// eigenvalues >= lambda_min; inverse and log-determinant come from its
// Cholesky factor.
struct GdeModel {
    int64_t h = 0;
    std::vector<double> mean;        // [h]
    std::vector<double> covariance;  // [h*h] row-major
    std::vector<double> inverse;     // [h*h] row-major
    double log_det = 0.0;
};

inline constexpr double kGdeShrinkage = 0.1;
inline constexpr double kGdeEigenFloor = 1e-6;

GdeModel fit_gde(const Tensor& z_rows);  // needs >= 2 rows

// Negative log likelihood under the fitted Gaussian:
//   0.5 (z-mean)^T Sigma^{-1} (z-mean) + 0.5 log det Sigma + (h/2) log 2*pi.
// Reported raw; ranking metrics are shift-invariant.
double anomaly_score(const std::vector<double>& z, const GdeModel& gde);
std::vector<double> anomaly_scores(const Tensor& z_rows, const GdeModel& gde);

// Sample variance (denominator n-1) of the test-set scores.
double score_variance(const std::vector<double>& scores);

// Versioned binary checkpoint of the architecture and every trainable tensor.
void save_checkpoint(const std::string& path, const EncoderParams& params);
EncoderParams load_checkpoint(const std::string& path);

}  // namespace stssad::detector
