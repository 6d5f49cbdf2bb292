#include "stssad/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>

#include "stssad/kernels.hpp"

namespace stssad {

namespace {

thread_local Tape* t_active = nullptr;
thread_local bool t_nograd = false;
std::optional<Op> g_mutate;  // test fixture, see debug_mutate_backward

uint64_t next_gen() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

[[noreturn]] void fail(const std::string& msg) { throw Error(msg); }

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
             shape_str(b.shape()));
}

Tensor make(Shape shape, std::vector<double> v) {
    return Tensor::from(std::move(shape), std::move(v));
}

bool recording() { return t_active != nullptr && !t_nograd; }

int64_t find_node(const TensorData* d, uint64_t gen) {
    for (const auto& [g, id] : d->regs)
        if (g == gen) return id;
    return -1;
}

int64_t ensure_leaf(Tape* tp, const Tensor& t) {
    TensorData* d = t.raw();
    int64_t id = find_node(d, tp->gen);
    if (id >= 0) return id;
    if (d->op_result)
        fail("tape: op result from an inactive or destroyed tape consumed by a new op; "
             "detach() it first");
    id = tp->size();
    // Bounded: entries for dead tapes are harmless but should not pile up on
    // long-lived parameters that are re-registered every iteration.
    if (d->regs.size() >= 8) d->regs.erase(d->regs.begin());
    d->regs.emplace_back(tp->gen, id);
    tp->nodes.push_back(Tape::Node{Op::Leaf, {}, {}, t, {}});
    return id;
}

// Registers the freshly computed `out` on the active tape when any input needs
// gradients. All op entry points funnel through here.
Tensor record(Op op, std::vector<Tensor> in, Tensor out, OpAttrs attrs = {}) {
    bool rg = false;
    for (const Tensor& t : in) rg = rg || t.requires_grad();
    out.raw()->requires_grad = rg;
    if (!rg) return out;
    // Outside a recording context the result is a plain value with no tape
    // provenance; only recorded results must be guarded against stale reuse.
    if (!recording()) return out;
    out.raw()->op_result = true;
    Tape* tp = t_active;
    std::vector<int64_t> in_nodes(in.size(), -1);
    for (size_t j = 0; j < in.size(); ++j)
        if (in[j].requires_grad()) in_nodes[j] = ensure_leaf(tp, in[j]);
    const int64_t id = tp->size();
    out.raw()->regs.emplace_back(tp->gen, id);
    tp->nodes.push_back(Tape::Node{op, std::move(in), std::move(in_nodes), out, std::move(attrs)});
    return out;
}

Tensor unary(Op op, kernels::Unary k, const Tensor& a) {
    std::vector<double> v(size_t(a.size()));
    kernels::unary_map(k, a.data().data(), v.data(), a.size());
    return record(op, {a}, make(a.shape(), std::move(v)));
}

Tensor binary(Op op, kernels::Binary k, const Tensor& a, const Tensor& b, const char* name) {
    check_same_shape(name, a, b);
    std::vector<double> v(size_t(a.size()));
    kernels::binary_map(k, a.data().data(), b.data().data(), v.data(), a.size());
    return record(op, {a, b}, make(a.shape(), std::move(v)));
}

// 0/1 mask as a constant tensor; used by relu/clamp01 backward.
Tensor mask_where(const Tensor& x, bool (*pred)(double)) {
    std::vector<double> v(size_t(x.size()));
    const auto& xv = x.data();
    for (size_t i = 0; i < v.size(); ++i) v[i] = pred(xv[i]) ? 1.0 : 0.0;
    return make(x.shape(), std::move(v));
}

}  // namespace

// ---- Tensor ----

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape.empty()) fail("tensor: empty shape");
    for (int64_t e : shape)
        if (e <= 0) fail("tensor: non-positive extent in " + shape_str(shape));
    if (shape_size(shape) != int64_t(values.size()))
        fail("tensor: " + shape_str(shape) + " needs " + std::to_string(shape_size(shape)) +
             " values, got " + std::to_string(values.size()));
    auto d = std::make_shared<TensorData>();
    d->shape = std::move(shape);
    d->v = std::move(values);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
    std::vector<double> v(size_t(shape_size(shape)), value);
    return from(std::move(shape), std::move(v));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

const Shape& Tensor::shape() const {
    if (!d_) fail("tensor: undefined");
    return d_->shape;
}

int64_t Tensor::size() const { return shape_size(shape()); }

const std::vector<double>& Tensor::data() const {
    if (!d_) fail("tensor: undefined");
    return d_->v;
}

double Tensor::value() const {
    if (size() != 1) fail("tensor: value() on non-scalar " + shape_str(shape()));
    return d_->v[0];
}

void Tensor::set_requires_grad(bool rg) {
    if (!d_) fail("tensor: undefined");
    if (rg && d_->op_result) fail("tensor: set_requires_grad on an op result");
    d_->requires_grad = rg;
}

Tensor Tensor::detach() const {
    if (!d_) fail("tensor: undefined");
    auto d = std::make_shared<TensorData>();
    d->shape = d_->shape;
    d->v = d_->v;
    return Tensor(std::move(d));
}

// ---- tape ----

Tape::Tape() : gen(next_gen()) {}

TapeScope::TapeScope(Tape& tape) : prev_(t_active) { t_active = &tape; }
TapeScope::~TapeScope() { t_active = prev_; }

NoGradGuard::NoGradGuard() : prev_(t_nograd) { t_nograd = true; }
NoGradGuard::~NoGradGuard() { t_nograd = prev_; }

Tape* active_tape() { return t_active; }

void debug_mutate_backward(std::optional<Op> op) { g_mutate = op; }

// ---- ops ----

Tensor add(const Tensor& a, const Tensor& b) { return binary(Op::Add, kernels::Binary::Add, a, b, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Op::Sub, kernels::Binary::Sub, a, b, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Op::Mul, kernels::Binary::Mul, a, b, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(Op::Div, kernels::Binary::Div, a, b, "div"); }
Tensor neg(const Tensor& a) { return unary(Op::Neg, kernels::Unary::Neg, a); }

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
        fail("matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int64_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    std::vector<double> v(size_t(n * m));
    kernels::matmul(a.data().data(), b.data().data(), v.data(), n, k, m);
    return record(Op::MatMul, {a, b}, make({n, m}, std::move(v)));
}

Tensor exp(const Tensor& a) { return unary(Op::Exp, kernels::Unary::Exp, a); }

Tensor log(const Tensor& a) {
    const auto& v = a.data();
    for (size_t i = 0; i < v.size(); ++i)
        if (!(v[i] > 0.0))
            fail("log: non-positive input " + std::to_string(v[i]) + " at index " +
                 std::to_string(i));
    return unary(Op::Log, kernels::Unary::Log, a);
}

Tensor sqrt(const Tensor& a) {
    const auto& v = a.data();
    for (size_t i = 0; i < v.size(); ++i)
        if (v[i] < 0.0)
            fail("sqrt: negative input " + std::to_string(v[i]) + " at index " +
                 std::to_string(i));
    return unary(Op::Sqrt, kernels::Unary::Sqrt, a);
}

Tensor square(const Tensor& a) { return unary(Op::Square, kernels::Unary::Square, a); }

Tensor sum(const Tensor& a) {
    double s = kernels::sum_blocked(a.data().data(), a.size());
    return record(Op::Sum, {a}, Tensor::scalar(s));
}

Tensor mean(const Tensor& a) {
    double s = kernels::sum_blocked(a.data().data(), a.size());
    return record(Op::Mean, {a}, Tensor::scalar(s / double(a.size())));
}

Tensor relu(const Tensor& a) { return unary(Op::Relu, kernels::Unary::Relu, a); }
Tensor sigmoid(const Tensor& a) { return unary(Op::Sigmoid, kernels::Unary::Sigmoid, a); }
Tensor clamp01(const Tensor& a) { return unary(Op::Clamp01, kernels::Unary::Clamp01, a); }

Tensor l2norm_rows(const Tensor& a) {
    if (a.rank() != 2) fail("l2norm_rows: expected rank 2, got " + shape_str(a.shape()));
    const int64_t n = a.shape()[0], h = a.shape()[1];
    std::vector<double> v(static_cast<size_t>(n));
    kernels::row_sumsq(a.data().data(), v.data(), n, h);
    for (int64_t i = 0; i < n; ++i) v[size_t(i)] = std::sqrt(v[size_t(i)] + 1e-12);
    return record(Op::L2NormRows, {a}, make({n}, std::move(v)));
}

namespace {
// Broadcast modes stored in attrs.i0.
constexpr int64_t kBcScalar = 0, kBcRow = 1, kBcCol = 2;

Tensor broadcast_impl(const Tensor& a, const Shape& target, int64_t mode) {
    const int64_t tn = shape_size(target);
    std::vector<double> v(static_cast<size_t>(tn));
    const auto& av = a.data();
    if (mode == kBcScalar) {
        for (int64_t i = 0; i < tn; ++i) v[size_t(i)] = av[0];
    } else if (mode == kBcRow) {
        const int64_t rows = target[0], cols = target[1];
        for (int64_t i = 0; i < rows; ++i)
            std::memcpy(v.data() + i * cols, av.data(), size_t(cols) * sizeof(double));
    } else {
        const int64_t rows = target[0], cols = target[1];
        for (int64_t i = 0; i < rows; ++i)
            for (int64_t j = 0; j < cols; ++j) v[size_t(i * cols + j)] = av[size_t(i)];
    }
    OpAttrs attrs;
    attrs.shape = target;
    attrs.i0 = mode;
    return record(Op::Broadcast, {a}, make(target, std::move(v)), std::move(attrs));
}
}  // namespace

Tensor broadcast(const Tensor& a, const Shape& target) {
    if (a.size() == 1) return broadcast_impl(a, target, kBcScalar);
    if (a.rank() == 1 && target.size() == 2 && a.shape()[0] == target[1])
        return broadcast_impl(a, target, kBcRow);
    if (target.size() == 2 && a.shape()[0] == target[0] &&
        (a.rank() == 1 || (a.rank() == 2 && a.shape()[1] == 1)))
        return broadcast_impl(a, target, kBcCol);
    fail("broadcast: cannot expand " + shape_str(a.shape()) + " to " + shape_str(target));
}

Tensor broadcast_cols(const Tensor& a, const Shape& target) {
    if (target.size() == 2 && a.shape()[0] == target[0] &&
        (a.rank() == 1 || (a.rank() == 2 && a.shape()[1] == 1)))
        return broadcast_impl(a, target, kBcCol);
    fail("broadcast_cols: cannot expand " + shape_str(a.shape()) + " to " + shape_str(target));
}

Tensor reshape(const Tensor& a, const Shape& target) {
    if (shape_size(target) != a.size())
        fail("reshape: size mismatch " + shape_str(a.shape()) + " to " + shape_str(target));
    OpAttrs attrs;
    attrs.shape = target;
    return record(Op::Reshape, {a}, make(target, a.data()), std::move(attrs));
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) fail("concat_rows: no inputs");
    const Shape& s0 = parts[0].shape();
    int64_t rows = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != int64_t(s0.size()))
            fail("concat_rows: rank mismatch " + shape_str(p.shape()) + " vs " + shape_str(s0));
        for (size_t d = 1; d < s0.size(); ++d)
            if (p.shape()[d] != s0[d])
                fail("concat_rows: trailing shape mismatch " + shape_str(p.shape()) + " vs " +
                     shape_str(s0));
        rows += p.shape()[0];
    }
    Shape out = s0;
    out[0] = rows;
    std::vector<double> v;
    v.reserve(size_t(shape_size(out)));
    for (const Tensor& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
    return record(Op::ConcatRows, parts, make(std::move(out), std::move(v)));
}

Tensor slice_rows(const Tensor& a, int64_t begin, int64_t end) {
    if (a.rank() < 1 || begin < 0 || end <= begin || end > a.shape()[0])
        fail("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
             ") out of bounds for " + shape_str(a.shape()));
    Shape out = a.shape();
    out[0] = end - begin;
    const int64_t stride = a.size() / a.shape()[0];
    std::vector<double> v(a.data().begin() + begin * stride, a.data().begin() + end * stride);
    OpAttrs attrs;
    attrs.i0 = begin;
    attrs.i1 = end;
    return record(Op::SliceRows, {a}, make(std::move(out), std::move(v)), std::move(attrs));
}

Tensor sin(const Tensor& a) { return unary(Op::Sin, kernels::Unary::Sin, a); }
Tensor cos(const Tensor& a) { return unary(Op::Cos, kernels::Unary::Cos, a); }
Tensor softplus(const Tensor& a) { return unary(Op::Softplus, kernels::Unary::Softplus, a); }

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) fail("transpose: expected rank 2, got " + shape_str(a.shape()));
    const int64_t n = a.shape()[0], m = a.shape()[1];
    std::vector<double> v(size_t(n * m));
    const auto& av = a.data();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) v[size_t(j * n + i)] = av[size_t(i * m + j)];
    return record(Op::Transpose, {a}, make({m, n}, std::move(v)));
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> v(size_t(a.size()));
    const auto& av = a.data();
    for (size_t i = 0; i < v.size(); ++i) v[i] = c * av[i];
    OpAttrs attrs;
    attrs.c = c;
    return record(Op::Scale, {a}, make(a.shape(), std::move(v)), std::move(attrs));
}

namespace {
void check_map(const char* op, const std::vector<int64_t>& map, int64_t cols) {
    for (size_t k = 0; k < map.size(); ++k)
        if (map[k] < -1 || map[k] >= cols)
            fail(std::string(op) + ": map entry " + std::to_string(map[k]) + " at " +
                 std::to_string(k) + " outside [-1," + std::to_string(cols) + ")");
}
}  // namespace

Tensor gather_cols(const Tensor& a, std::shared_ptr<const std::vector<int64_t>> map) {
    if (!map || map->empty()) fail("gather_cols: empty map");
    if (a.rank() != 1 && a.rank() != 2)
        fail("gather_cols: expected rank 1 or 2, got " + shape_str(a.shape()));
    const int64_t rows = a.rank() == 2 ? a.shape()[0] : 1;
    const int64_t cols = a.shape()[a.rank() == 2 ? 1 : 0];
    check_map("gather_cols", *map, cols);
    const int64_t kcount = int64_t(map->size());
    Shape out = a.rank() == 2 ? Shape{rows, kcount} : Shape{kcount};
    std::vector<double> v(size_t(rows * kcount));
    const auto& av = a.data();
    for (int64_t i = 0; i < rows; ++i) {
        const double* src = av.data() + i * cols;
        double* dst = v.data() + i * kcount;
        for (int64_t k = 0; k < kcount; ++k) {
            const int64_t j = (*map)[size_t(k)];
            dst[k] = j < 0 ? 0.0 : src[j];
        }
    }
    OpAttrs attrs;
    attrs.i0 = cols;  // source width, needed to size the scatter in backward
    attrs.map = std::move(map);
    return record(Op::GatherCols, {a}, make(std::move(out), std::move(v)), std::move(attrs));
}

Tensor scatter_cols_add(const Tensor& a, std::shared_ptr<const std::vector<int64_t>> map,
                        int64_t width) {
    if (!map || map->empty()) fail("scatter_cols_add: empty map");
    if (a.rank() != 1 && a.rank() != 2)
        fail("scatter_cols_add: expected rank 1 or 2, got " + shape_str(a.shape()));
    const int64_t rows = a.rank() == 2 ? a.shape()[0] : 1;
    const int64_t kcount = a.shape()[a.rank() == 2 ? 1 : 0];
    if (int64_t(map->size()) != kcount)
        fail("scatter_cols_add: map size " + std::to_string(map->size()) +
             " != input cols " + std::to_string(kcount));
    check_map("scatter_cols_add", *map, width);
    Shape out = a.rank() == 2 ? Shape{rows, width} : Shape{width};
    std::vector<double> v(size_t(rows * width), 0.0);
    const auto& av = a.data();
    for (int64_t i = 0; i < rows; ++i) {
        const double* src = av.data() + i * kcount;
        double* dst = v.data() + i * width;
        for (int64_t k = 0; k < kcount; ++k) {
            const int64_t j = (*map)[size_t(k)];
            if (j >= 0) dst[j] += src[k];
        }
    }
    OpAttrs attrs;
    attrs.i0 = width;
    attrs.map = std::move(map);
    return record(Op::ScatterColsAdd, {a}, make(std::move(out), std::move(v)), std::move(attrs));
}

// ---- backward rules ----

namespace {

// Per-input cotangents of a node; entries stay undefined for inputs that do not
// require grad. Every rule is expressed in public ops so that with recording on
// (create_graph) the results are differentiable again.
std::vector<Tensor> vjp(const Tape::Node& nd, const Tensor& ct) {
    std::vector<Tensor> g(nd.in.size());
    auto need = [&](size_t j) { return nd.in[j].requires_grad(); };
    switch (nd.op) {
        case Op::Leaf:
            break;
        case Op::Add:
            if (need(0)) g[0] = ct;
            if (need(1)) g[1] = ct;
            break;
        case Op::Sub:
            if (need(0)) g[0] = ct;
            if (need(1)) g[1] = neg(ct);
            break;
        case Op::Mul:
            if (need(0)) g[0] = mul(ct, nd.in[1]);
            if (need(1)) g[1] = mul(ct, nd.in[0]);
            break;
        case Op::Div:
            if (need(0)) g[0] = div(ct, nd.in[1]);
            if (need(1)) g[1] = neg(div(mul(ct, nd.in[0]), mul(nd.in[1], nd.in[1])));
            break;
        case Op::Neg:
            if (need(0)) g[0] = neg(ct);
            break;
        case Op::MatMul:
            if (need(0)) g[0] = matmul(ct, transpose(nd.in[1]));
            if (need(1)) g[1] = matmul(transpose(nd.in[0]), ct);
            break;
        case Op::Exp:
            if (need(0)) g[0] = mul(ct, nd.out);
            break;
        case Op::Log:
            if (need(0)) g[0] = div(ct, nd.in[0]);
            break;
        case Op::Sqrt:
            if (need(0)) g[0] = div(ct, scale(nd.out, 2.0));
            break;
        case Op::Square:
            if (need(0)) g[0] = mul(ct, scale(nd.in[0], 2.0));
            break;
        case Op::Sum:
            if (need(0)) g[0] = broadcast(ct, nd.in[0].shape());
            break;
        case Op::Mean:
            if (need(0))
                g[0] = broadcast(scale(ct, 1.0 / double(nd.in[0].size())), nd.in[0].shape());
            break;
        case Op::Relu:
            if (need(0)) g[0] = mul(ct, mask_where(nd.in[0], [](double v) { return v > 0.0; }));
            break;
        case Op::Sigmoid:
            if (need(0)) {
                Tensor one = Tensor::full(nd.out.shape(), 1.0);
                g[0] = mul(ct, mul(nd.out, sub(one, nd.out)));
            }
            break;
        case Op::Clamp01:
            // Subgradient 1 strictly inside (0,1), 0 outside and at the boundary.
            if (need(0))
                g[0] = mul(ct, mask_where(nd.in[0], [](double v) { return v > 0.0 && v < 1.0; }));
            break;
        case Op::L2NormRows:
            if (need(0)) g[0] = mul(nd.in[0], broadcast_cols(div(ct, nd.out), nd.in[0].shape()));
            break;
        case Op::Broadcast:
            if (need(0)) {
                if (nd.attrs.i0 == kBcScalar) {
                    g[0] = reshape(sum(ct), nd.in[0].shape());
                } else if (nd.attrs.i0 == kBcRow) {
                    Tensor ones = Tensor::full({1, nd.attrs.shape[0]}, 1.0);
                    g[0] = reshape(matmul(ones, ct), nd.in[0].shape());
                } else {
                    Tensor ones = Tensor::full({nd.attrs.shape[1], 1}, 1.0);
                    g[0] = reshape(matmul(ct, ones), nd.in[0].shape());
                }
            }
            break;
        case Op::Reshape:
            if (need(0)) g[0] = reshape(ct, nd.in[0].shape());
            break;
        case Op::ConcatRows:
            for (size_t j = 0, off = 0; j < nd.in.size(); ++j) {
                const int64_t rows = nd.in[j].shape()[0];
                if (need(j)) g[j] = slice_rows(ct, int64_t(off), int64_t(off) + rows);
                off += size_t(rows);
            }
            break;
        case Op::SliceRows:
            if (need(0)) {
                const int64_t rows = nd.in[0].shape()[0];
                std::vector<Tensor> parts;
                if (nd.attrs.i0 > 0) {
                    Shape s = nd.in[0].shape();
                    s[0] = nd.attrs.i0;
                    parts.push_back(Tensor::zeros(s));
                }
                parts.push_back(ct);
                if (nd.attrs.i1 < rows) {
                    Shape s = nd.in[0].shape();
                    s[0] = rows - nd.attrs.i1;
                    parts.push_back(Tensor::zeros(s));
                }
                g[0] = parts.size() == 1 ? ct : concat_rows(parts);
            }
            break;
        case Op::Sin:
            if (need(0)) g[0] = mul(ct, cos(nd.in[0]));
            break;
        case Op::Cos:
            if (need(0)) g[0] = neg(mul(ct, sin(nd.in[0])));
            break;
        case Op::Softplus:
            if (need(0)) g[0] = mul(ct, sigmoid(nd.in[0]));
            break;
        case Op::Transpose:
            if (need(0)) g[0] = transpose(ct);
            break;
        case Op::Scale:
            if (need(0)) g[0] = scale(ct, nd.attrs.c);
            break;
        case Op::GatherCols:
            if (need(0)) g[0] = scatter_cols_add(ct, nd.attrs.map, nd.attrs.i0);
            break;
        case Op::ScatterColsAdd:
            if (need(0)) g[0] = gather_cols(ct, nd.attrs.map);
            break;
    }
    if (g_mutate && *g_mutate == nd.op)
        for (Tensor& t : g)
            if (t.defined()) t = neg(t);
    return g;
}

}  // namespace

std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& wrt,
                         bool create_graph) {
    Tape* tp = t_active;
    if (!tp) fail("grad: no active tape on this thread");
    if (output.size() != 1)
        fail("grad: output must be scalar, got shape " + shape_str(output.shape()));

    auto zeros_for = [&](const Tensor& w) { return Tensor::zeros(w.shape()); };

    if (!output.requires_grad()) {
        std::vector<Tensor> out;
        for (const Tensor& w : wrt) out.push_back(zeros_for(w));
        return out;
    }
    TensorData* od = output.raw();
    int64_t root = find_node(od, tp->gen);
    if (root < 0) {
        if (od->op_result)
            fail(od->regs.empty()
                     ? "grad: output requires grad but was never recorded (computed outside "
                       "a tape scope or under NoGrad)"
                     : "grad: output was recorded on a different tape (destroyed or inactive)");
        root = ensure_leaf(tp, output);  // grad of a leaf w.r.t. itself and others
    }

    std::vector<Tensor> cot(size_t(root) + 1);
    cot[size_t(root)] = Tensor::full(output.shape(), 1.0);

    std::optional<NoGradGuard> ng;
    if (!create_graph) ng.emplace();

    for (int64_t id = root; id >= 0; --id) {
        if (!cot[size_t(id)].defined()) continue;
        // Copy: recording during the sweep may reallocate the node vector.
        Tape::Node nd = tp->nodes[size_t(id)];
        if (nd.op == Op::Leaf) continue;
        std::vector<Tensor> gs = vjp(nd, cot[size_t(id)]);
        for (size_t j = 0; j < nd.in.size(); ++j) {
            if (!gs[j].defined() || nd.in_nodes[j] < 0) continue;
            // Inputs were registered before the node, so in_nodes[j] < id <= root.
            Tensor& slot = cot[size_t(nd.in_nodes[j])];
            slot = slot.defined() ? add(slot, gs[j]) : gs[j];
        }
    }

    std::vector<Tensor> out;
    out.reserve(wrt.size());
    for (const Tensor& w : wrt) {
        const int64_t wn = find_node(w.raw(), tp->gen);
        if (wn >= 0 && wn <= root && cot[size_t(wn)].defined())
            out.push_back(cot[size_t(wn)]);
        else
            out.push_back(zeros_for(w));
    }
    return out;
}

// ---- finite differences ----

FdReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double step, double tol) {
    FdReport rep;
    Tensor xg = x.detach();
    xg.set_requires_grad(true);

    std::vector<double> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor y = f(xg);
        if (y.size() != 1) fail("finite_diff_check: f must return a scalar");
        analytic = grad(y, {xg})[0].data();
    }

    NoGradGuard ng;  // numeric passes must not pollute any caller tape
    std::vector<double> base = x.data();
    for (int64_t i = 0; i < x.size(); ++i) {
        std::vector<double> vp = base, vm = base;
        vp[size_t(i)] += step;
        vm[size_t(i)] -= step;
        const double fp = f(Tensor::from(x.shape(), std::move(vp))).value();
        const double fm = f(Tensor::from(x.shape(), std::move(vm))).value();
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            rep.ok = false;
            rep.nonfinite = true;
            rep.nonfinite_index = i;
            continue;
        }
        const double numeric = (fp - fm) / (2.0 * step);
        const double a = analytic[size_t(i)];
        const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
        const double rel = std::fabs(a - numeric) / denom;
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_index = i;
        }
    }
    if (rep.max_rel_err > tol) rep.ok = false;
    return rep;
}

// ---- name table ----

namespace {
struct OpName {
    Op op;
    std::string_view name;
};
constexpr OpName kOpNames[] = {
    {Op::Leaf, "leaf"},           {Op::Add, "add"},
    {Op::Sub, "sub"},             {Op::Mul, "mul"},
    {Op::Div, "div"},             {Op::Neg, "neg"},
    {Op::MatMul, "matmul"},       {Op::Exp, "exp"},
    {Op::Log, "log"},             {Op::Sqrt, "sqrt"},
    {Op::Square, "square"},       {Op::Sum, "sum"},
    {Op::Mean, "mean"},           {Op::Relu, "relu"},
    {Op::Sigmoid, "sigmoid"},     {Op::Clamp01, "clamp01"},
    {Op::L2NormRows, "l2norm_rows"}, {Op::Broadcast, "broadcast"},
    {Op::Reshape, "reshape"},     {Op::ConcatRows, "concat_rows"},
    {Op::SliceRows, "slice_rows"}, {Op::Sin, "sin"},
    {Op::Cos, "cos"},             {Op::Softplus, "softplus"},
    {Op::Transpose, "transpose"}, {Op::Scale, "scale"},
    {Op::GatherCols, "gather_cols"}, {Op::ScatterColsAdd, "scatter_cols_add"},
};
}  // namespace

std::string_view op_name(Op op) {
    for (const auto& e : kOpNames)
        if (e.op == op) return e.name;
    return "?";
}

Op op_from_name(std::string_view name) {
    for (const auto& e : kOpNames)
        if (e.name == name) return e.op;
    fail("unknown op name: " + std::string(name));
}

Tensor primitive(std::string_view op, const std::vector<Tensor>& inputs, const OpAttrs& attrs) {
    auto one = [&]() -> const Tensor& {
        if (inputs.size() != 1) fail(std::string(op) + ": expected 1 input");
        return inputs[0];
    };
    auto two = [&](int) {
        if (inputs.size() != 2) fail(std::string(op) + ": expected 2 inputs");
    };
    switch (op_from_name(op)) {
        case Op::Add: two(0); return add(inputs[0], inputs[1]);
        case Op::Sub: two(0); return sub(inputs[0], inputs[1]);
        case Op::Mul: two(0); return mul(inputs[0], inputs[1]);
        case Op::Div: two(0); return div(inputs[0], inputs[1]);
        case Op::Neg: return neg(one());
        case Op::MatMul: two(0); return matmul(inputs[0], inputs[1]);
        case Op::Exp: return exp(one());
        case Op::Log: return log(one());
        case Op::Sqrt: return sqrt(one());
        case Op::Square: return square(one());
        case Op::Sum: return sum(one());
        case Op::Mean: return mean(one());
        case Op::Relu: return relu(one());
        case Op::Sigmoid: return sigmoid(one());
        case Op::Clamp01: return clamp01(one());
        case Op::L2NormRows: return l2norm_rows(one());
        case Op::Broadcast: return broadcast(one(), attrs.shape);
        case Op::Reshape: return reshape(one(), attrs.shape);
        case Op::ConcatRows: return concat_rows(inputs);
        case Op::SliceRows: return slice_rows(one(), attrs.i0, attrs.i1);
        case Op::Sin: return sin(one());
        case Op::Cos: return cos(one());
        case Op::Softplus: return softplus(one());
        case Op::Transpose: return transpose(one());
        case Op::Scale: return scale(one(), attrs.c);
        case Op::GatherCols: return gather_cols(one(), attrs.map);
        case Op::ScatterColsAdd: return scatter_cols_add(one(), attrs.map, attrs.i0);
        case Op::Leaf: break;
    }
    fail("primitive: cannot dispatch op " + std::string(op));
}

}  // namespace stssad
