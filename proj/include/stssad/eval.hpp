#pragma once
// Label-aware evaluation: AUC on anomaly scores, the paired one-sided Wilcoxon
// signed-rank test, and comparison tables over a task x method x seed grid.
// This module is the only production consumer of sealed test labels.

#include <cstdint>
#include <string>
#include <vector>

#include "stssad/datagen.hpp"
#include "stssad/tuner.hpp"

namespace stssad::eval {

struct ScoredTestSet {
    std::vector<double> scores;  // aligned with test order
    std::vector<uint8_t> labels;  // 1 = anomaly
};

// Probability that a uniformly random anomaly outscores a uniformly random
// normal, ties counted 1/2 (the Mann-Whitney formulation, computed with
// average ranks). Requires both classes present.
double auc(const ScoredTestSet& s);

// One-sided p-value (alternative: the differences are positive, i.e. method A
// greater) of the Wilcoxon signed-rank test. Zero differences are dropped;
// at least 5 nonzero differences are required. Exact enumeration over all 2^n
// sign assignments for n <= 12; normal approximation with tie correction and
// continuity correction above. Ties in |d| get average ranks.
double wilcoxon_one_sided(const std::vector<double>& diffs);

struct RunEvaluation {
    ScoredTestSet scored;
    double auc = 0.0;
};

// Fits the density scorer to the run's final encoder on the training set,
// scores the test set, unseals the labels (the audited production read), and
// computes AUC. The run must have completed.
RunEvaluation evaluate_run(const tuner::TunerRun& run, const datagen::Dataset& ds);

struct RunRecord {
    std::string task;
    std::string method;
    uint64_t seed = 0;
    double auc = 0.0;
};

struct MethodCell {
    double mean = 0.0;
    double stddev = 0.0;  // sample standard deviation; 0 for a single seed
    int64_t n = 0;
};

struct MethodComparison {
    std::string method;   // baseline compared against the reference
    int64_t n_pairs = 0;  // paired (task, seed) differences
    bool degenerate = false;
    double p = 1.0;       // meaningful only when !degenerate
    std::string note;     // failure description when degenerate
};

struct ComparisonTable {
    std::vector<std::string> tasks;    // row order (first appearance)
    std::vector<std::string> methods;  // column order (first appearance)
    // cells[task_index][method_index], same order as above.
    std::vector<std::vector<MethodCell>> cells;
    std::string reference;
    // One entry per non-reference method, in column order; empty when the
    // reference method is absent or alone.
    std::vector<MethodComparison> comparisons;
};

// Aggregates a complete task x method x seed grid: per-cell means and sample
// standard deviations over seeds, plus the reference method's paired Wilcoxon
// comparison against every other method over all (task, seed) pairs.
// Duplicate rows or missing cells fail, listing the offenders. A degenerate
// comparison (for example, identical methods) is reported in place, not
// thrown.
ComparisonTable build_table(const std::vector<RunRecord>& records,
                            const std::string& reference = "st_ssad");

// Report emission. CSV: flat rows task,method,seed,auc. JSON: records plus the
// aggregated table, version-tagged. Markdown: mean +/- std per cell, best mean
// per row in bold, comparisons appended.
void write_results_csv(const std::vector<RunRecord>& records, const std::string& path);
void write_results_json(const std::vector<RunRecord>& records, const ComparisonTable& table,
                        const std::string& path);
void write_table_md(const ComparisonTable& table, const std::string& path);

}  // namespace stssad::eval
