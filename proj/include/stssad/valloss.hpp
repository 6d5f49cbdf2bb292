#pragma once
// Unsupervised transductive validation loss. Embeddings of the training,
// augmented, and (unlabeled) test sets are jointly centered and rescaled so
// their total pairwise squared distance is fixed, then the loss measures how
// far test embeddings sit from the training and augmented centroids. Includes
// the kernel two-sample (MMD) variants used as ablation losses and the scalar
// closed-form oracle for the 4-point configuration.

#include <string_view>
#include <vector>

#include "stssad/common.hpp"
#include "stssad/tensor.hpp"

namespace stssad::valloss {

// One embedding matrix per partition; all [n_i, h] with a shared h.
struct EmbeddingBatch {
    Tensor trn;
    Tensor aug;
    Tensor test;
};

// Jointly normalized partitions plus the certificate of what was applied:
// z' = (z - centroid) / s with s = ||Z - centroid||_F / sqrt(N).
struct Normalized {
    Tensor trn;
    Tensor aug;
    Tensor test;
    Tensor centroid;  // [1, h]
    Tensor scale;     // [1], the divisor s
};

// Total pairwise squared distance sum_ij ||z_i - z_j||^2 over all ordered
// pairs, computed in linear time as 2N * sum_i ||z_i - mean||^2.
double tpsd(const Tensor& rows);

// Centering and rescaling of a bare row matrix so that ||Z'||_F^2 = N
// (equivalently TPSD(Z') = 2N^2). Differentiable; fails when the rows have
// collapsed to a single point.
Tensor normalize_rows(const Tensor& rows);

// The same transform applied jointly to the concatenated partitions, which
// are then sliced back apart with their labels preserved.
Normalized normalize_tpsd(const EmbeddingBatch& batch);

// Half the mean over test rows of distance-to-train-centroid plus
// distance-to-augmented-centroid. Equals 1 exactly under perfect alignment
// (each test row on its matching centroid). Distances are smoothed as
// sqrt(||.||^2 + 1e-12) so the loss stays differentiable everywhere.
Tensor mean_distance_loss(const Normalized& normalized);

// Closed form of the loss on the 4-point scalar configuration
// Z_trn={0}, Z_aug={2}, Z_test={u1, u2+2} after joint normalization.
double four_point_oracle(double u1, double u2);

// Squared maximum mean discrepancy with a Gaussian kernel, biased V-statistic
// (diagonal terms included). Bandwidth sigma = median pairwise distance over
// the union of both sets, treated as a constant for differentiation.
Tensor mmd(const Tensor& za, const Tensor& zb);

enum class Kind { MeanDistance, MmdNormalized, MmdRaw };

std::string_view kind_name(Kind k);
Kind kind_from_name(std::string_view name);

// The three selectable validation losses over a full batch. The MMD variants
// use mmd(test, trn) + mmd(test, aug), with or without joint normalization.
Tensor evaluate(Kind kind, const EmbeddingBatch& batch);

}  // namespace stssad::valloss
