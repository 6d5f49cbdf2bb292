#include "stssad/valloss.hpp"

#include <algorithm>
#include <cmath>

namespace stssad::valloss {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error(msg); }

void check_partition(const char* name, const Tensor& t, int64_t h) {
    if (!t.defined() || t.rank() != 2)
        fail(std::string("validation loss: ") + name + " partition must be a 2-d batch");
    if (t.shape()[0] < 1) fail(std::string("validation loss: ") + name + " partition is empty");
    if (t.shape()[1] != h)
        fail(std::string("validation loss: ") + name + " partition width " +
             std::to_string(t.shape()[1]) + " does not match " + std::to_string(h));
}

void check_batch(const EmbeddingBatch& b) {
    if (!b.trn.defined() || b.trn.rank() != 2)
        fail("validation loss: trn partition must be a 2-d batch");
    const int64_t h = b.trn.shape()[1];
    check_partition("trn", b.trn, h);
    check_partition("aug", b.aug, h);
    check_partition("test", b.test, h);
}

// Row mean as a recorded [1, h] tensor.
Tensor row_mean(const Tensor& rows) {
    const int64_t n = rows.shape()[0];
    return scale(matmul(Tensor::full({1, n}, 1.0), rows), 1.0 / double(n));
}

Tensor expand_row(const Tensor& row1h, const Shape& target) {
    return broadcast(reshape(row1h, {row1h.shape()[1]}), target);
}

}  // namespace

double tpsd(const Tensor& rows) {
    if (rows.rank() != 2) fail("tpsd: rows must be a 2-d batch");
    const int64_t n = rows.shape()[0], h = rows.shape()[1];
    const auto& v = rows.data();
    std::vector<double> mean(static_cast<size_t>(h), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < h; ++j) mean[size_t(j)] += v[size_t(i * h + j)];
    for (auto& m : mean) m /= double(n);
    double ss = 0.0;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < h; ++j) {
            const double d = v[size_t(i * h + j)] - mean[size_t(j)];
            ss += d * d;
        }
    return 2.0 * double(n) * ss;
}

namespace {

// Shared joint-normalization core: returns z', centroid, and scale.
void normalize_core(const Tensor& z, Tensor& zp, Tensor& centroid, Tensor& s) {
    const int64_t n = z.shape()[0];
    centroid = row_mean(z);
    Tensor centered = sub(z, expand_row(centroid, z.shape()));
    Tensor fro2 = sum(square(centered));
    if (fro2.value() <= 1e-24)
        fail("normalize_tpsd: collapsed embeddings (all rows identical)");
    s = sqrt(scale(fro2, 1.0 / double(n)));
    zp = div(centered, broadcast(s, z.shape()));
}

}  // namespace

Tensor normalize_rows(const Tensor& rows) {
    if (!rows.defined() || rows.rank() != 2)
        fail("normalize_rows: input must be a 2-d batch");
    Tensor zp, centroid, s;
    normalize_core(rows, zp, centroid, s);
    return zp;
}

Normalized normalize_tpsd(const EmbeddingBatch& batch) {
    check_batch(batch);
    Tensor z = concat_rows({batch.trn, batch.aug, batch.test});
    const int64_t n = z.shape()[0];
    Tensor zp;
    Normalized out;
    normalize_core(z, zp, out.centroid, out.scale);
    const int64_t nt = batch.trn.shape()[0], na = batch.aug.shape()[0];
    out.trn = slice_rows(zp, 0, nt);
    out.aug = slice_rows(zp, nt, nt + na);
    out.test = slice_rows(zp, nt + na, n);
    return out;
}

Tensor mean_distance_loss(const Normalized& normalized) {
    const Tensor& te = normalized.test;
    Tensor m_trn = row_mean(normalized.trn);
    Tensor m_aug = row_mean(normalized.aug);
    Tensor d_trn = l2norm_rows(sub(te, expand_row(m_trn, te.shape())));
    Tensor d_aug = l2norm_rows(sub(te, expand_row(m_aug, te.shape())));
    return scale(mean(add(d_trn, d_aug)), 0.5);
}

double four_point_oracle(double u1, double u2) {
    const double num =
        std::fabs(u1) + std::fabs(u1 - 2.0) + std::fabs(u2) + std::fabs(u2 + 2.0);
    const double den = std::sqrt(3.0 * u1 * u1 + 3.0 * u2 * u2 - 8.0 * u1 + 8.0 * u2 -
                                 2.0 * u1 * u2 + 16.0);
    return num / den;
}

Tensor mmd(const Tensor& za, const Tensor& zb) {
    if (za.rank() != 2 || zb.rank() != 2 || za.shape()[1] != zb.shape()[1])
        fail("mmd: both sets must be 2-d batches with the same width");
    const int64_t na = za.shape()[0], nb = zb.shape()[0], h = za.shape()[1];

    // Median-heuristic bandwidth over the union, a constant for the tape.
    std::vector<double> dists;
    dists.reserve(size_t((na + nb) * (na + nb - 1) / 2));
    auto row = [&](int64_t i) {
        const bool in_a = i < na;
        return (in_a ? za.data().data() : zb.data().data()) + (in_a ? i : i - na) * h;
    };
    for (int64_t i = 0; i < na + nb; ++i)
        for (int64_t j = i + 1; j < na + nb; ++j) {
            const double *ri = row(i), *rj = row(j);
            double ss = 0.0;
            for (int64_t k = 0; k < h; ++k) ss += (ri[k] - rj[k]) * (ri[k] - rj[k]);
            dists.push_back(std::sqrt(ss));
        }
    double sigma = 1.0;
    if (!dists.empty()) {
        std::sort(dists.begin(), dists.end());
        const size_t mid = dists.size() / 2;
        sigma = dists.size() % 2 ? dists[mid] : 0.5 * (dists[mid - 1] + dists[mid]);
    }
    sigma = std::max(sigma, 1e-9);
    const double gamma = -0.5 / (sigma * sigma);

    auto kernel_mean = [&](const Tensor& a, const Tensor& b) {
        const Shape target{a.shape()[0], b.shape()[0]};
        Tensor sqa = square(l2norm_rows(a));
        Tensor sqb = square(l2norm_rows(b));
        Tensor d2 = sub(add(broadcast_cols(sqa, target), broadcast(sqb, target)),
                        scale(matmul(a, transpose(b)), 2.0));
        return mean(exp(scale(d2, gamma)));
    };
    return sub(add(kernel_mean(za, za), kernel_mean(zb, zb)),
               scale(kernel_mean(za, zb), 2.0));
}

std::string_view kind_name(Kind k) {
    switch (k) {
        case Kind::MeanDistance: return "mean_distance";
        case Kind::MmdNormalized: return "mmd_normalized";
        case Kind::MmdRaw: return "mmd_raw";
    }
    return "?";
}

Kind kind_from_name(std::string_view name) {
    if (name == "mean_distance") return Kind::MeanDistance;
    if (name == "mmd_normalized") return Kind::MmdNormalized;
    if (name == "mmd_raw") return Kind::MmdRaw;
    fail("unknown validation loss kind: " + std::string(name));
}

Tensor evaluate(Kind kind, const EmbeddingBatch& batch) {
    switch (kind) {
        case Kind::MeanDistance: return mean_distance_loss(normalize_tpsd(batch));
        case Kind::MmdNormalized: {
            Normalized n = normalize_tpsd(batch);
            return add(mmd(n.test, n.trn), mmd(n.test, n.aug));
        }
        case Kind::MmdRaw: {
            check_batch(batch);
            return add(mmd(batch.test, batch.trn), mmd(batch.test, batch.aug));
        }
    }
    fail("evaluate: bad validation loss kind");
}

}  // namespace stssad::valloss
