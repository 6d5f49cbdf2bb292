#include "stssad/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <map>
#include <numeric>
#include <set>

#include "stssad/detector.hpp"

namespace stssad::eval {
namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw Error(msg); }

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Average ranks (1-based) of v, ties sharing the mean rank of their group.
std::vector<double> average_ranks(const std::vector<double>& v) {
    const size_t n = v.size();
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t(0));
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double r = 0.5 * double(i + 1 + j + 1);  // mean of 1-based positions
        for (size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}

double normal_upper_tail(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace

double auc(const ScoredTestSet& s) {
    if (s.scores.size() != s.labels.size())
        fail("auc: " + std::to_string(s.scores.size()) + " scores vs " +
             std::to_string(s.labels.size()) + " labels");
    if (s.scores.empty()) fail("auc: empty test set");
    int64_t n1 = 0, n0 = 0;
    for (uint8_t l : s.labels) {
        if (l > 1) fail("auc: labels must be 0 or 1");
        (l ? n1 : n0)++;
    }
    if (n1 == 0 || n0 == 0) fail("auc: labels must contain both classes");
    for (double v : s.scores)
        if (!std::isfinite(v)) fail("auc: non-finite score");

    const std::vector<double> ranks = average_ranks(s.scores);
    double r1 = 0.0;
    for (size_t i = 0; i < ranks.size(); ++i)
        if (s.labels[i]) r1 += ranks[i];
    return (r1 - 0.5 * double(n1) * double(n1 + 1)) / (double(n1) * double(n0));
}

double wilcoxon_one_sided(const std::vector<double>& diffs) {
    std::vector<double> d;
    for (double v : diffs) {
        if (!std::isfinite(v)) fail("wilcoxon: non-finite difference");
        if (v != 0.0) d.push_back(v);
    }
    if (d.empty())
        fail("wilcoxon: all differences are zero (degenerate comparison)");
    const int64_t n = int64_t(d.size());
    if (n < 5)
        fail("wilcoxon: need at least 5 nonzero differences, got " + std::to_string(n));

    std::vector<double> absd(d.size());
    for (size_t i = 0; i < d.size(); ++i) absd[i] = std::fabs(d[i]);
    const std::vector<double> ranks = average_ranks(absd);
    double w = 0.0;
    for (size_t i = 0; i < d.size(); ++i)
        if (d[i] > 0.0) w += ranks[i];

    if (n <= 12) {
        // Exact: enumerate every sign assignment of the observed ranks and
        // count those whose positive-rank sum reaches the observed one.
        const uint64_t total = uint64_t(1) << n;
        uint64_t at_least = 0;
        for (uint64_t mask = 0; mask < total; ++mask) {
            double ws = 0.0;
            for (int64_t i = 0; i < n; ++i)
                if (mask & (uint64_t(1) << i)) ws += ranks[size_t(i)];
            if (ws >= w - 1e-9) ++at_least;
        }
        return double(at_least) / double(total);
    }

    // Normal approximation with tie correction and continuity correction.
    const double dn = double(n);
    const double mean = dn * (dn + 1.0) / 4.0;
    double var = dn * (dn + 1.0) * (2.0 * dn + 1.0) / 24.0;
    {
        std::vector<double> sorted = absd;
        std::sort(sorted.begin(), sorted.end());
        size_t i = 0;
        while (i < sorted.size()) {
            size_t j = i;
            while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
            const double t = double(j - i + 1);
            var -= (t * t * t - t) / 48.0;
            i = j + 1;
        }
    }
    const double z = (w - 0.5 - mean) / std::sqrt(var);
    return normal_upper_tail(z);
}

RunEvaluation evaluate_run(const tuner::TunerRun& run, const datagen::Dataset& ds) {
    if (run.aborted) fail("evaluate_run: run aborted: " + run.abort_reason);
    NoGradGuard ng;
    Tensor z_trn = detector::encode(run.final_theta, ds.train);
    detector::GdeModel gde = detector::fit_gde(z_trn);
    Tensor z_test = detector::encode(run.final_theta, ds.test);

    RunEvaluation ev;
    ev.scored.scores = detector::anomaly_scores(z_test, gde);
    ev.scored.labels = ds.labels.unseal();
    ev.auc = auc(ev.scored);
    return ev;
}

ComparisonTable build_table(const std::vector<RunRecord>& records,
                            const std::string& reference) {
    if (records.empty()) fail("build_table: no results");

    ComparisonTable table;
    table.reference = reference;
    std::map<std::string, size_t> task_idx, method_idx;
    // (task, seed) pairs in first-appearance order define the pairing axis.
    std::vector<std::pair<std::string, uint64_t>> pair_axis;
    std::set<std::pair<std::string, uint64_t>> pair_seen;
    std::map<std::tuple<std::string, std::string, uint64_t>, double> grid;

    for (const RunRecord& r : records) {
        if (task_idx.emplace(r.task, table.tasks.size()).second) table.tasks.push_back(r.task);
        if (method_idx.emplace(r.method, table.methods.size()).second)
            table.methods.push_back(r.method);
        if (!grid.emplace(std::make_tuple(r.task, r.method, r.seed), r.auc).second)
            fail("build_table: duplicate result row task=" + r.task + " method=" + r.method +
                 " seed=" + std::to_string(r.seed));
        if (pair_seen.emplace(r.task, r.seed).second) pair_axis.emplace_back(r.task, r.seed);
    }

    std::string missing;
    for (const std::string& m : table.methods)
        for (const auto& [task, seed] : pair_axis)
            if (!grid.count({task, m, seed}))
                missing += " task=" + task + " method=" + m + " seed=" + std::to_string(seed);
    if (!missing.empty()) fail("build_table: missing cells:" + missing);

    table.cells.assign(table.tasks.size(), std::vector<MethodCell>(table.methods.size()));
    for (size_t ti = 0; ti < table.tasks.size(); ++ti)
        for (size_t mi = 0; mi < table.methods.size(); ++mi) {
            std::vector<double> vals;
            for (const auto& [task, seed] : pair_axis)
                if (task == table.tasks[ti]) vals.push_back(grid.at({task, table.methods[mi], seed}));
            MethodCell& cell = table.cells[ti][mi];
            cell.n = int64_t(vals.size());
            for (double v : vals) cell.mean += v;
            cell.mean /= double(vals.size());
            if (vals.size() > 1) {
                double ss = 0.0;
                for (double v : vals) ss += (v - cell.mean) * (v - cell.mean);
                cell.stddev = std::sqrt(ss / double(vals.size() - 1));
            }
        }

    if (method_idx.count(reference)) {
        for (const std::string& m : table.methods) {
            if (m == reference) continue;
            MethodComparison cmp;
            cmp.method = m;
            std::vector<double> diffs;
            for (const auto& [task, seed] : pair_axis)
                diffs.push_back(grid.at({task, reference, seed}) - grid.at({task, m, seed}));
            cmp.n_pairs = int64_t(diffs.size());
            try {
                cmp.p = wilcoxon_one_sided(diffs);
            } catch (const Error& e) {
                cmp.degenerate = true;
                cmp.note = e.what();
            }
            table.comparisons.push_back(std::move(cmp));
        }
    }
    return table;
}

void write_results_csv(const std::vector<RunRecord>& records, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("write_results_csv: cannot open " + path);
    out << "task,method,seed,auc\n";
    for (const RunRecord& r : records)
        out << r.task << ',' << r.method << ',' << r.seed << ',' << fmt(r.auc) << '\n';
    out.flush();
    if (!out) fail("write_results_csv: write failure on " + path);
}

void write_results_json(const std::vector<RunRecord>& records, const ComparisonTable& table,
                        const std::string& path) {
    json j;
    j["version"] = 1;
    j["records"] = json::array();
    for (const RunRecord& r : records)
        j["records"].push_back(
            {{"task", r.task}, {"method", r.method}, {"seed", r.seed}, {"auc", r.auc}});
    json t;
    t["reference"] = table.reference;
    t["tasks"] = table.tasks;
    t["methods"] = table.methods;
    t["cells"] = json::array();
    for (size_t ti = 0; ti < table.tasks.size(); ++ti)
        for (size_t mi = 0; mi < table.methods.size(); ++mi) {
            const MethodCell& c = table.cells[ti][mi];
            t["cells"].push_back({{"task", table.tasks[ti]},
                                  {"method", table.methods[mi]},
                                  {"mean", c.mean},
                                  {"stddev", c.stddev},
                                  {"n", c.n}});
        }
    t["comparisons"] = json::array();
    for (const MethodComparison& c : table.comparisons) {
        json e = {{"method", c.method}, {"n_pairs", c.n_pairs}, {"degenerate", c.degenerate}};
        if (c.degenerate)
            e["note"] = c.note;
        else
            e["p"] = c.p;
        t["comparisons"].push_back(std::move(e));
    }
    j["table"] = std::move(t);

    std::ofstream out(path);
    if (!out) fail("write_results_json: cannot open " + path);
    out << j.dump(2) << '\n';
    out.flush();
    if (!out) fail("write_results_json: write failure on " + path);
}

void write_table_md(const ComparisonTable& table, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("write_table_md: cannot open " + path);

    out << "| task |";
    for (const std::string& m : table.methods) out << ' ' << m << " |";
    out << "\n| --- |";
    for (size_t mi = 0; mi < table.methods.size(); ++mi) out << " --- |";
    out << '\n';
    char buf[96];
    for (size_t ti = 0; ti < table.tasks.size(); ++ti) {
        double best = -1.0;
        for (const MethodCell& c : table.cells[ti]) best = std::max(best, c.mean);
        out << "| " << table.tasks[ti] << " |";
        for (const MethodCell& c : table.cells[ti]) {
            const bool bold = c.mean == best;
            std::snprintf(buf, sizeof buf, "%s%.3f ± %.3f%s", bold ? "**" : "", c.mean,
                          c.stddev, bold ? "**" : "");
            out << ' ' << buf << " |";
        }
        out << '\n';
    }
    if (!table.comparisons.empty()) {
        out << "\nPaired one-sided Wilcoxon (" << table.reference << " greater):\n\n";
        for (const MethodComparison& c : table.comparisons) {
            out << "- " << table.reference << " vs " << c.method << " ("
                << c.n_pairs << " pairs): ";
            if (c.degenerate)
                out << "degenerate — " << c.note << '\n';
            else {
                std::snprintf(buf, sizeof buf, "p = %.4g", c.p);
                out << buf << '\n';
            }
        }
    }
    out.flush();
    if (!out) fail("write_table_md: write failure on " + path);
}

}  // namespace stssad::eval
