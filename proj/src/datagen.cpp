#include "stssad/datagen.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <numeric>

#include "stssad/io.hpp"

namespace stssad::datagen {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error(msg); }

std::atomic<uint64_t> g_label_reads{0};

std::string image_name(int64_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "img_%04lld.png", static_cast<long long>(i));
    return buf;
}

// Quantize to the 8-bit grid so PNG persistence is exact.
double quantize(double v) { return std::round(v * 255.0) / 255.0; }

void quantize_rows(std::vector<double>& v) {
    for (auto& x : v) x = quantize(x);
}

void check_spec(const SynthSpec& s) {
    if (s.m < 16) fail("build_testbed: image side must be at least 16");
    if (s.c != 1) fail("build_testbed: only single-channel testbeds are generated");
    if (s.smoothness < 1) fail("build_testbed: smoothness must be at least 1");
    if (s.n_train < 8) fail("build_testbed: need at least 8 training images");
    if (s.n_test_normal < 1) fail("build_testbed: need at least 1 normal test image");
    if (s.n_test_anomaly < 0) fail("build_testbed: negative anomaly count");
    if (s.anomaly_kind == AnomalyKind::CutdiffPatch) {
        if (s.s_star <= 0 || s.r_star <= 0)
            fail("build_testbed: patch size and aspect ratio must be positive");
    }
}

}  // namespace

const std::vector<uint8_t>& SealedLabels::unseal() const {
    g_label_reads.fetch_add(1, std::memory_order_relaxed);
    return v_;
}

uint64_t SealedLabels::read_count() { return g_label_reads.load(std::memory_order_relaxed); }

void SealedLabels::reset_read_count() { g_label_reads.store(0, std::memory_order_relaxed); }

std::string_view anomaly_kind_name(AnomalyKind k) {
    switch (k) {
        case AnomalyKind::CutdiffPatch: return "cutdiff_patch";
        case AnomalyKind::Rotation: return "rotation";
    }
    return "?";
}

AnomalyKind anomaly_kind_from_name(std::string_view name) {
    if (name == "cutdiff_patch") return AnomalyKind::CutdiffPatch;
    if (name == "rotation") return AnomalyKind::Rotation;
    fail("unknown anomaly kind: " + std::string(name));
}

UnlabeledData view(const Dataset& ds) {
    UnlabeledData v;
    v.train = ds.train;
    v.test = ds.test;
    v.m = ds.meta.m;
    v.c = ds.meta.c;
    return v;
}

Tensor gen_texture(uint64_t seed, int64_t m, int64_t smoothness) {
    if (m < 16) fail("gen_texture: image side must be at least 16");
    if (smoothness < 1) fail("gen_texture: smoothness must be at least 1");
    RandomStream rng(seed);
    std::vector<double> v(size_t(m * m));
    for (auto& x : v) x = rng.uniform();
    if (smoothness > 1) {
        const int64_t w = smoothness;
        // Separable box blur with windows truncated at the borders.
        auto pass = [&](bool rows) {
            std::vector<double> out(v.size());
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < m; ++j) {
                    const int64_t lo = std::max<int64_t>(0, j - w / 2);
                    const int64_t hi = std::min<int64_t>(m - 1, j - w / 2 + w - 1);
                    double acc = 0.0;
                    for (int64_t k = lo; k <= hi; ++k)
                        acc += rows ? v[size_t(i * m + k)] : v[size_t(k * m + i)];
                    (rows ? out[size_t(i * m + j)] : out[size_t(j * m + i)]) =
                        acc / double(hi - lo + 1);
                }
            v = std::move(out);
        };
        pass(true);
        pass(false);
        // Blurring is a convex combination, so the range shrank; stretch the
        // contrast back to [0,1].
        double lo = v[0], hi = v[0];
        for (double x : v) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        if (hi > lo)
            for (auto& x : v) x = (x - lo) / (hi - lo);
    }
    return Tensor::from({1, m * m}, std::move(v));
}

Tensor add_corner_glyph(const Tensor& img, int64_t m) {
    if (!img.defined() || img.size() != m * m)
        fail("add_corner_glyph: expected a single [1, m*m] image");
    std::vector<double> v(img.data());
    // Bright wedge over r + c < m/3, fading linearly away from the corner.
    for (int64_t r = 0; r < m; ++r)
        for (int64_t c = 0; c < m; ++c) {
            const double d = double(r + c) * 3.0 / double(m);
            if (d < 1.0) {
                const double w = 1.0 - d;
                double& x = v[size_t(r * m + c)];
                x = x + w * (1.0 - x);
            }
        }
    return Tensor::from({1, m * m}, std::move(v));
}

Tensor inject_anomaly(const Tensor& img, const SynthSpec& spec, RandomStream& rng) {
    switch (spec.anomaly_kind) {
        case AnomalyKind::CutdiffPatch: {
            // L = R(0)·S(s*, r*) = diag(s*/r*, s*·r*), the tuner's own cutdiff.
            augment::AugParams p = augment::make_params(
                augment::Kind::CutDiff,
                {spec.s_star / spec.r_star, 0.0, spec.s_star * spec.r_star});
            return augment::apply(p, img, spec.m, spec.c, rng);
        }
        case AnomalyKind::Rotation: {
            augment::AugParams p =
                augment::make_params(augment::Kind::Rotation, {spec.angle_star});
            return augment::apply(p, img, spec.m, spec.c, rng);
        }
    }
    fail("inject_anomaly: bad anomaly kind");
}

Dataset build_testbed(const SynthSpec& spec) {
    check_spec(spec);
    const bool glyphs = spec.anomaly_kind == AnomalyKind::Rotation;
    const int64_t p = spec.m * spec.m;

    auto texture = [&](int64_t index) {
        RandomStream sub(spec.seed, rng_tag::kTextures, uint64_t(index));
        Tensor t = gen_texture(sub.next_u64(), spec.m, spec.smoothness);
        return glyphs ? add_corner_glyph(t, spec.m) : t;
    };

    std::vector<double> train;
    train.reserve(size_t(spec.n_train * p));
    for (int64_t i = 0; i < spec.n_train; ++i) {
        Tensor t = texture(i);
        train.insert(train.end(), t.data().begin(), t.data().end());
    }

    const int64_t n_test = spec.n_test_normal + spec.n_test_anomaly;
    std::vector<std::vector<double>> test_rows;
    std::vector<uint8_t> labels;
    for (int64_t j = 0; j < spec.n_test_normal; ++j) {
        Tensor t = texture(spec.n_train + j);
        test_rows.push_back(t.data());
        labels.push_back(0);
    }
    for (int64_t k = 0; k < spec.n_test_anomaly; ++k) {
        Tensor base = texture(spec.n_train + spec.n_test_normal + k);
        RandomStream inj(spec.seed, rng_tag::kInjection, uint64_t(k));
        Tensor anomaly = inject_anomaly(base, spec, inj);
        test_rows.push_back(anomaly.data());
        labels.push_back(1);
    }

    // Seeded permutation of the test set so anomalies are not trailing.
    std::vector<int64_t> order(static_cast<size_t>(n_test));
    std::iota(order.begin(), order.end(), 0);
    RandomStream shuf(spec.seed, rng_tag::kShuffle);
    for (int64_t i = n_test - 1; i > 0; --i)
        std::swap(order[size_t(i)], order[shuf.uniform_int(uint64_t(i + 1))]);

    std::vector<double> test;
    test.reserve(size_t(n_test * p));
    std::vector<uint8_t> shuffled_labels(static_cast<size_t>(n_test));
    for (int64_t i = 0; i < n_test; ++i) {
        const auto& row = test_rows[size_t(order[size_t(i)])];
        test.insert(test.end(), row.begin(), row.end());
        shuffled_labels[size_t(i)] = labels[size_t(order[size_t(i)])];
    }

    quantize_rows(train);
    quantize_rows(test);

    Dataset ds;
    ds.train = Tensor::from({spec.n_train, p}, std::move(train));
    ds.test = Tensor::from({n_test, p}, std::move(test));
    ds.labels = SealedLabels(std::move(shuffled_labels));
    ds.meta.m = spec.m;
    ds.meta.c = spec.c;
    ds.meta.seed = spec.seed;
    ds.meta.anomaly_kind = std::string(anomaly_kind_name(spec.anomaly_kind));
    if (spec.anomaly_kind == AnomalyKind::CutdiffPatch)
        ds.meta.true_params = {spec.s_star, spec.r_star};
    else
        ds.meta.true_params = {spec.angle_star};
    return ds;
}

namespace {

void save_split(const Tensor& rows, int64_t m, const fs::path& dir) {
    fs::create_directories(dir);
    const int64_t n = rows.shape()[0];
    std::vector<uint8_t> px(size_t(m * m));
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t k = 0; k < m * m; ++k) {
            const double v = rows.data()[size_t(i * m * m + k)];
            px[size_t(k)] = uint8_t(std::lround(std::min(1.0, std::max(0.0, v)) * 255.0));
        }
        io::write_png_gray8((dir / image_name(i)).string(), m, m, px);
    }
}

Tensor load_split(const fs::path& dir, int64_t n, int64_t m) {
    std::vector<double> rows;
    rows.reserve(size_t(n * m * m));
    for (int64_t i = 0; i < n; ++i) {
        const fs::path file = dir / image_name(i);
        if (!fs::exists(file)) fail("load_dataset: missing image " + file.string());
        auto [wh, px] = io::read_png_gray8(file.string());
        if (wh.first != m || wh.second != m)
            fail("load_dataset: " + file.string() + " has the wrong size");
        for (uint8_t b : px) rows.push_back(double(b) / 255.0);
    }
    return Tensor::from({n, m * m}, std::move(rows));
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
    if (ds.meta.c != 1) fail("save_dataset: only single-channel datasets persist as PNG");
    if (!ds.train.defined() || !ds.test.defined() || ds.train.rank() != 2 ||
        ds.test.rank() != 2)
        fail("save_dataset: train and test must be 2-d image batches");
    if (ds.labels.size() != ds.test.shape()[0])
        fail("save_dataset: label count does not match the test set");
    const int64_t m = ds.meta.m;
    if (m * m != ds.train.shape()[1])
        fail("save_dataset: metadata image side does not match the pixel rows");

    const fs::path root(dir);
    fs::create_directories(root);
    save_split(ds.train, m, root / "train");
    save_split(ds.test, m, root / "test");

    {
        // The label file is part of the sealed surface; this is the one
        // persistence-side read.
        const auto& labels = ds.labels.unseal();
        std::ofstream out(root / "labels.csv");
        out << "filename,label\n";
        for (size_t i = 0; i < labels.size(); ++i)
            out << image_name(int64_t(i)) << "," << int(labels[i]) << "\n";
        if (!out) fail("save_dataset: failed writing labels.csv");
    }

    json meta;
    meta["version"] = 1;
    meta["m"] = ds.meta.m;
    meta["c"] = ds.meta.c;
    meta["seed"] = ds.meta.seed;
    meta["anomaly_kind"] = ds.meta.anomaly_kind;
    meta["true_params"] = ds.meta.true_params;
    meta["n_train"] = ds.train.shape()[0];
    meta["n_test"] = ds.test.shape()[0];
    std::ofstream out(root / "meta.json");
    out << meta.dump(2) << "\n";
    if (!out) fail("save_dataset: failed writing meta.json");
}

Dataset load_dataset(const std::string& dir) {
    const fs::path root(dir);
    std::ifstream meta_in(root / "meta.json");
    if (!meta_in) fail("load_dataset: missing meta.json in " + dir);
    json meta;
    try {
        meta_in >> meta;
    } catch (const std::exception& e) {
        fail("load_dataset: malformed meta.json: " + std::string(e.what()));
    }
    if (!meta.contains("version") || meta["version"] != 1)
        fail("load_dataset: unsupported dataset version in meta.json");

    Dataset ds;
    ds.meta.m = meta.at("m").get<int64_t>();
    ds.meta.c = meta.at("c").get<int64_t>();
    ds.meta.seed = meta.at("seed").get<uint64_t>();
    ds.meta.anomaly_kind = meta.at("anomaly_kind").get<std::string>();
    ds.meta.true_params = meta.at("true_params").get<std::vector<double>>();
    const int64_t n_train = meta.at("n_train").get<int64_t>();
    const int64_t n_test = meta.at("n_test").get<int64_t>();
    if (ds.meta.c != 1) fail("load_dataset: only single-channel datasets persist as PNG");
    if (ds.meta.m < 1 || n_train < 1 || n_test < 1)
        fail("load_dataset: implausible sizes in meta.json");

    ds.train = load_split(root / "train", n_train, ds.meta.m);
    ds.test = load_split(root / "test", n_test, ds.meta.m);

    std::ifstream lab(root / "labels.csv");
    if (!lab) fail("load_dataset: missing labels.csv in " + dir);
    std::string line;
    if (!std::getline(lab, line) || line != "filename,label")
        fail("load_dataset: labels.csv header is malformed");
    std::vector<uint8_t> labels;
    for (int64_t i = 0; i < n_test; ++i) {
        if (!std::getline(lab, line)) fail("load_dataset: labels.csv is truncated");
        const size_t comma = line.find(',');
        if (comma == std::string::npos) fail("load_dataset: labels.csv row is malformed");
        if (line.substr(0, comma) != image_name(i))
            fail("load_dataset: labels.csv row " + std::to_string(i) +
                 " names an unexpected file");
        const std::string v = line.substr(comma + 1);
        if (v != "0" && v != "1") fail("load_dataset: labels.csv has a non-binary label");
        labels.push_back(uint8_t(v == "1"));
    }
    ds.labels = SealedLabels(std::move(labels));
    return ds;
}

}  // namespace stssad::datagen
