#pragma once
// End-to-end tuning of augmentation hyperparameters. Alternates inner detector
// steps with outer updates of the augmentation parameter vector a, where the
// outer gradient is the second-order hypergradient
//     d L_val(a, theta - alpha * d L_trn(theta, a) / d theta) / d a,
// computed by differentiating through the recorded inner step. Ablation modes:
// a first-order variant that freezes theta', and random-search baselines that
// never look at gradients. The validation loss never sees test labels; the
// tuner consumes the label-free dataset view.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "stssad/augment.hpp"
#include "stssad/datagen.hpp"
#include "stssad/detector.hpp"
#include "stssad/valloss.hpp"

namespace stssad::tuner {

enum class Mode { SecondOrder, FirstOrder, RandomStatic, RandomDynamic };

std::string_view mode_name(Mode m);
Mode mode_from_name(std::string_view name);

struct TunerConfig {
    double alpha = 1e-2;  // inner (detector) step size
    double beta = 1e-2;   // outer (augmentation) step size
    int64_t max_iters = 300;
    double aug_ratio = 1.0;  // |D_aug| / |D_trn|
    int64_t warm_epochs = 20;
    int64_t theta_updates_per_iter = 1;
    Mode mode = Mode::SecondOrder;
    valloss::Kind val_loss_kind = valloss::Kind::MeanDistance;
    std::vector<augment::AugParams> init_list;
    int64_t patience = 20;  // iterations without relative improvement 1e-5
    uint64_t seed = 0;
    // in_dim 0 means "derive from the dataset geometry".
    detector::EncoderConfig encoder{0, {64, 64}, 16};
};

struct TrajectoryPoint {
    int64_t t = 0;
    std::vector<double> a;  // raw augmentation parameters in effect
    double l_trn = 0.0;
    double l_val = 0.0;
    double summed() const { return l_trn + l_val; }
};

struct TunerRun {
    int64_t init_index = 0;
    std::vector<TrajectoryPoint> trajectory;
    augment::AugParams final_a;
    detector::EncoderParams final_theta;
    bool aborted = false;
    std::string abort_reason;
    // Filled by select_init: the selection statistic and the winner flag.
    double score = 0.0;
    bool selected = false;
};

// The augmented companion batch: ceil-free round of aug_ratio * n_train rows,
// built by augmenting whole passes over the training set (plus a leading
// slice); differentiable in a when a.a is recorded.
Tensor augmented_batch(const augment::AugParams& a, const Tensor& train, int64_t m, int64_t c,
                       double aug_ratio, RandomStream& mu_rng);

// Plain detector training at fixed a for `epochs` full-batch steps.
detector::EncoderParams warm_start(detector::EncoderParams theta, const augment::AugParams& a,
                                   int64_t epochs, const datagen::UnlabeledData& data,
                                   double alpha, double aug_ratio, RandomStream& mu_rng);

struct IterationResult {
    double l_trn = 0.0;
    double l_val = 0.0;
    std::vector<double> grad_a;  // empty in the random-search modes
    detector::EncoderParams theta_next;
};

// One alternating iteration at fixed a: theta_updates_per_iter - 1 plain inner
// steps, then one more inner step whose embeddings produce the validation loss
// and (in the gradient modes) d l_val / d a. mu_rng is taken by value so the
// finite-difference oracles can replay an iteration with identical patch
// centers. Throws on non-finite gradients, with the losses in the message.
IterationResult tuner_iteration(Mode mode, const TunerConfig& cfg,
                                const datagen::UnlabeledData& data,
                                const detector::EncoderParams& theta,
                                const augment::AugParams& a, RandomStream mu_rng);

// Convenience wrappers fixing the mode.
std::vector<double> hypergradient(const TunerConfig& cfg, const datagen::UnlabeledData& data,
                                  const detector::EncoderParams& theta,
                                  const augment::AugParams& a, RandomStream mu_rng);
std::vector<double> first_order_step(const TunerConfig& cfg, const datagen::UnlabeledData& data,
                                     const detector::EncoderParams& theta,
                                     const augment::AugParams& a, RandomStream mu_rng);

// True when the summed loss has gone `patience` consecutive entries without a
// relative improvement of at least 1e-5 over the best seen so far.
bool stopping_check(const std::vector<double>& summed_history, int64_t patience);

// One full run from init_list[init_index]: warm start, alternating updates
// with projection after every a update, early stopping, trajectory recording.
// A validation-loss failure aborts the run and marks it instead of throwing.
TunerRun tune_one(const TunerConfig& cfg, const datagen::UnlabeledData& data,
                  int64_t init_index);

// All initializations, in order.
std::vector<TunerRun> tune_all(const TunerConfig& cfg, const datagen::UnlabeledData& data);

// The selection statistic S(theta): sample variance of the density scores on
// the (unlabeled) test set under a Gaussian fit to the training embeddings.
double selection_score(const detector::EncoderParams& theta,
                       const datagen::UnlabeledData& data);

// Scores every completed run, marks and returns the index of the winner
// (highest S; ties by lower final summed loss, then lower index).
int64_t select_init(std::vector<TunerRun>& runs, const datagen::UnlabeledData& data);

// tune_all + select_init; returns the winning run.
TunerRun tune(const TunerConfig& cfg, const datagen::UnlabeledData& data);

// CSV export: header t,a0,a1,a2,l_trn,l_val,l_sum; unused parameter columns
// stay empty.
void write_trajectory_csv(const TunerRun& run, const std::string& path);

}  // namespace stssad::tuner
