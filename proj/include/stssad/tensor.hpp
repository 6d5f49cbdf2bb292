#pragma once
// Reverse-mode autodiff on dense float64 tensors.
//
// The design in one paragraph: every differentiable op appends a node to the
// thread-active Tape; a node keeps handles to its input/output tensors plus the
// attributes needed by its backward rule. grad() sweeps the tape in reverse
// topological order (node ids are already topological) and composes cotangents.
// Backward rules are themselves written in terms of the public ops, so with
// create_graph=true the sweep records new nodes and the returned gradients can
// be differentiated again — that is what makes the second-order hypergradient a
// plain nested grad() call rather than a special code path.
//
// Values are immutable after construction (ops never write through their
// inputs), which keeps saved tensors on the tape valid for the whole sweep.
// Tensors that require grad must not be shared across threads; tapes are
// thread-local by construction (one active tape per thread, see TapeScope).

#include <functional>
#include <memory>
#include <optional>
#include <string_view>
#include <vector>

#include "stssad/common.hpp"

namespace stssad {

enum class Op : uint8_t {
    Leaf,
    Add, Sub, Mul, Div, Neg, MatMul,
    Exp, Log, Sqrt, Square,
    Sum, Mean,
    Relu, Sigmoid, Clamp01,
    L2NormRows,
    Broadcast, Reshape, ConcatRows, SliceRows,
    // Extensions beyond the basic set; needed for rotation grids (sin/cos),
    // matmul's own backward (transpose), bilinear sampling (gather/scatter with a
    // fixed column map), stable BCE (softplus) and constant rescaling (scale).
    Sin, Cos, Softplus, Transpose, Scale, GatherCols, ScatterColsAdd,
};

std::string_view op_name(Op op);
Op op_from_name(std::string_view name);

struct TensorData {
    Shape shape;
    std::vector<double> v;
    bool requires_grad = false;
    // True for tensors produced by an op from grad-requiring inputs. Such a tensor
    // belongs to exactly one tape generation; consuming it under a different tape
    // is an error (detach() first), whereas plain leaves re-register freely.
    bool op_result = false;
    // (tape generation -> node id) registrations. A leaf can be live in several
    // tapes at once (nested scopes), so this is a small list, not a single slot.
    std::vector<std::pair<uint64_t, int64_t>> regs;
};

class Tensor {
  public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);

    bool defined() const { return d_ != nullptr; }
    const Shape& shape() const;
    int64_t size() const;
    int64_t rank() const { return int64_t(shape().size()); }
    const std::vector<double>& data() const;
    // Scalar accessor; requires size() == 1.
    double value() const;

    bool requires_grad() const { return d_ && d_->requires_grad; }
    void set_requires_grad(bool rg);
    // Same values, no grad tracking, no tape node.
    Tensor detach() const;

    TensorData* raw() const { return d_.get(); }

  private:
    explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
    std::shared_ptr<TensorData> d_;
};

// Attributes a backward rule needs beyond input/output values.
struct OpAttrs {
    Shape shape;     // broadcast / reshape target
    int64_t i0 = 0;  // slice begin, broadcast mode, gather source width, scatter width
    int64_t i1 = 0;  // slice end
    double c = 0.0;  // scale factor
    std::shared_ptr<const std::vector<int64_t>> map;  // gather/scatter column map
};

class Tape {
  public:
    struct Node {
        Op op = Op::Leaf;
        std::vector<Tensor> in;
        // Node id of each input, resolved when the node was recorded (-1 for
        // inputs that do not require grad). The sweep must use these rather than
        // re-resolving, since a leaf's registration can move between tapes.
        std::vector<int64_t> in_nodes;
        Tensor out;
        OpAttrs attrs;
    };

    Tape();
    int64_t size() const { return int64_t(nodes.size()); }

    // Internal to the engine; exposed for the sweep in grad().
    std::vector<Node> nodes;
    uint64_t gen = 0;
};

// Activates a tape on this thread for its lifetime; nestable (restores the
// previous active tape on destruction).
class TapeScope {
  public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

  private:
    Tape* prev_;
};

// Suspends recording on this thread (values still computed).
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

Tape* active_tape();

// ---- ops ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor clamp01(const Tensor& a);
// Row-wise Euclidean norms of a rank-2 tensor, smoothed as sqrt(ss + 1e-12) so
// the gradient stays finite at zero rows. [n,h] -> [n]
Tensor l2norm_rows(const Tensor& a);
// Scalar -> any shape; [d] -> [n,d] (row tile); [n] or [n,1] -> [n,h] (column
// tile). When both tilings would fit a square target, the row tile wins.
Tensor broadcast(const Tensor& a, const Shape& target);
// Explicit column tile, for the square-ambiguous case.
Tensor broadcast_cols(const Tensor& a, const Shape& target);
Tensor reshape(const Tensor& a, const Shape& target);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, int64_t begin, int64_t end);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor transpose(const Tensor& a);
Tensor scale(const Tensor& a, double c);
// out[..,k] = map[k] >= 0 ? a[..,map[k]] : 0. Rank 1 or 2; the map is shared by
// all rows. Entries must lie in [-1, cols(a)).
Tensor gather_cols(const Tensor& a, std::shared_ptr<const std::vector<int64_t>> map);
// out[..,map[k]] += a[..,k] into a zero tensor with `width` columns (entries -1 drop).
Tensor scatter_cols_add(const Tensor& a, std::shared_ptr<const std::vector<int64_t>> map,
                        int64_t width);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

// Generic entry point used by the checkers: dispatches on op name. Attribute
// needs: broadcast/reshape take attrs.shape; slice_rows takes i0/i1; scale takes
// c; gather/scatter take map (+ i0 = width for scatter).
Tensor primitive(std::string_view op, const std::vector<Tensor>& inputs,
                 const OpAttrs& attrs = {});

// d(output)/d(wrt[i]) for a scalar output recorded on the active tape. With
// create_graph the returned gradients are themselves recorded and can be
// differentiated again. A wrt entry the output does not depend on gets a zero
// tensor of its shape.
std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& wrt,
                         bool create_graph = false);

// ---- finite-difference oracle ----
struct FdReport {
    bool ok = true;
    double max_rel_err = 0.0;
    int64_t worst_index = -1;   // component with the largest relative error
    bool nonfinite = false;     // a perturbation produced a non-finite value
    int64_t nonfinite_index = -1;
};

// Central differences of a scalar-valued f at x against the recorded gradient.
// Relative error denominator is max(|analytic|, |numeric|, 1e-8).
FdReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double step = 1e-5, double tol = 1e-4);

// Test fixture: flip the sign of the named op's backward rule (nullopt restores).
// Exists so the gradient suites can prove they would catch a broken rule.
void debug_mutate_backward(std::optional<Op> op);

}  // namespace stssad
