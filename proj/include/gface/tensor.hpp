#pragma once
// Dense double-precision tensors with reverse-mode differentiation on an
// explicit tape. Every operation appends a node to its Trace; node inputs
// always precede the node, so the tape is topologically ordered by
// construction and backward() is a single reverse sweep.
//
// Tensors are cheap handles (trace pointer + node index). A Trace is
// single-owner: build a fresh one per training step or evaluation batch and
// drop it. Replaying a single-threaded trace with the same kernel backend
// reproduces every stored value bitwise.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace gface {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class OpKind : std::uint8_t {
    kLeaf,
    kAdd,
    kSub,
    kMul,
    kScale,
    kMatMulNN,
    kMatMulNT,
    kExp,
    kLog,
    kSum,
    kMean,
    kSqNorm,
    kL2Normalize,
    kCosine,
    kSoftmax,
    kLogSoftmax,
    kCrossEntropySoft,
    kCrossEntropyOneHot,
    kGelu,
    kRelu,
    kDropout,
    kConcat,
    kDetach,
    kGradReverse,
    kDiv,
    kGatherRows,
    kMaxMasked,
    kMinMasked,
    kReshape,
};

const char* op_name(OpKind op);

struct Node {
    OpKind op = OpKind::kLeaf;
    bool requires_grad = false;
    bool flag = false;              // dropout: training mode
    Shape shape;
    std::vector<std::size_t> inputs;
    std::vector<double> value;
    std::vector<double> grad;       // sized on demand by backward()
    double p0 = 0.0;                // op scalar: tau / mu / c / rate
    std::uint64_t seed = 0;         // dropout RNG seed; argmax/argmin index for masked reductions
    std::vector<std::uint32_t> aux; // one-hot labels, gather indices, reduction masks
};

class Trace;

class Tensor {
public:
    Tensor() = default;

    bool defined() const { return trace_ != nullptr; }
    Trace& trace() const;
    std::size_t id() const { return id_; }

    const Shape& shape() const;
    std::size_t numel() const;
    std::size_t rows() const;  // rank-1 counts as a single row
    std::size_t cols() const;
    bool requires_grad() const;

    std::span<const double> value() const;
    std::span<const double> grad() const;  // empty until backward() reaches it
    double item() const;                   // scalar tensors only

private:
    friend class Trace;
    friend Tensor make_op(Trace& tr, Node node);
    Tensor(Trace* trace, std::size_t id) : trace_(trace), id_(id) {}
    Trace* trace_ = nullptr;
    std::size_t id_ = 0;
};

// Accumulated leaf gradients keyed by leaf node id (deterministic order).
using GradientMap = std::map<std::size_t, std::vector<double>>;

class Trace {
public:
    Trace() = default;
    Trace(const Trace&) = delete;
    Trace& operator=(const Trace&) = delete;

    Tensor leaf(Shape shape, std::vector<double> data, bool requires_grad);
    Tensor constant(Shape shape, std::vector<double> data);
    Tensor scalar(double v);

    std::size_t size() const { return nodes_.size(); }
    const Node& node(std::size_t id) const { return nodes_.at(id); }

    // Reverse sweep from a scalar root. Gradients accumulate additively into
    // every requires_grad ancestor; the returned map carries one entry per
    // requires_grad leaf on the trace (zero-filled when the root does not
    // reach it). A detached/non-differentiable root yields an empty map.
    GradientMap backward(const Tensor& root);

    void zero_grad();

    // Recompute every non-leaf forward value from stored inputs and compare
    // bitwise against what the tape recorded.
    bool replay_bitwise() const;

private:
    friend Tensor make_op(Trace& tr, Node node);
    friend class Tensor;
    std::vector<Node> nodes_;
};

// ---- operation catalog ----

Tensor add(const Tensor& a, const Tensor& b);       // same shape, or b a row/scalar broadcast
Tensor subtract(const Tensor& a, const Tensor& b);
Tensor multiply(const Tensor& a, const Tensor& b);  // same shape, or b scalar
Tensor divide(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T
Tensor exponent(const Tensor& a);
Tensor natural_log(const Tensor& a);  // argument floored at 1e-12
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor squared_norm(const Tensor& a);
Tensor l2_normalize(const Tensor& a);  // per row, norm floored at 1e-12
Tensor cosine_similarity(const Tensor& a, const Tensor& b);  // rank-1 inputs
Tensor softmax(const Tensor& a, double tau);      // per row, temperature-scaled
Tensor log_softmax(const Tensor& a, double tau = 1.0);
Tensor cross_entropy(const Tensor& probs, const Tensor& target_probs);
Tensor cross_entropy(const Tensor& probs, std::span<const int> labels);
Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor dropout(const Tensor& a, double rate, std::uint64_t seed, bool training);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor detach(const Tensor& a);
Tensor grad_reverse(const Tensor& a, double mu);  // identity forward, -mu * upstream backward
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
Tensor max_masked(const Tensor& a, std::span<const std::uint32_t> mask);  // scalar max over mask==1
Tensor min_masked(const Tensor& a, std::span<const std::uint32_t> mask);
Tensor reshape(const Tensor& a, Shape shape);

// constant helpers
Tensor ones(Trace& tr, Shape shape);
Tensor one_hot(Trace& tr, std::span<const int> labels, std::size_t num_classes);

// ---- finite-difference oracle ----

struct FiniteDiffEntry {
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_dev = 0.0;
};

struct FiniteDiffReport {
    std::vector<FiniteDiffEntry> per_param;
    double max_rel_dev = 0.0;
    std::size_t worst_index = 0;
    bool pass = false;
    bool inconclusive = false;  // non-finite value met at a perturbed point
};

// Central differences (f(p+h) - f(p-h)) / 2h against a caller-supplied
// analytic gradient. rel_dev = |a - n| / max(|a|, |n|, 1e-3), so the check
// degrades to an absolute one for near-zero gradients.
FiniteDiffReport finite_diff_check(
    const std::function<double(std::span<const double>)>& f,
    std::span<double> params, std::span<const double> analytic_grad,
    double h, double tol);

}  // namespace gface
