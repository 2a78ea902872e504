#include "gface/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "gface/kernels.hpp"
#include "gface/rng.hpp"

namespace gface {

namespace {

constexpr double kLogFloor = 1e-12;
constexpr double kNormFloor = 1e-12;

[[noreturn]] void fail(OpKind op, const std::string& msg) {
    throw std::invalid_argument(std::string("op ") + op_name(op) + ": " + msg);
}

void ensure_finite(OpKind op, std::span<const double> v) {
    for (double x : v) {
        if (!std::isfinite(x)) fail(op, "non-finite input value");
    }
}

std::size_t shape_rows(const Shape& s) { return s.size() >= 2 ? s[0] : 1; }
std::size_t shape_cols(const Shape& s) {
    if (s.empty()) return 1;
    return s.size() >= 2 ? s[1] : s[0];
}

void dropout_mask(std::uint64_t seed, double rate, std::vector<std::uint8_t>& mask) {
    Rng rng(seed);
    for (auto& m : mask) m = rng.uniform() >= rate ? 1 : 0;
}

double stable_phi(double x) {  // standard normal pdf
    return std::exp(-0.5 * x * x) * 0.3989422804014326779;
}

double stable_cdf(double x) {  // standard normal cdf
    return 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
}

enum class Broadcast { kSame, kRow, kScalar };

Broadcast broadcast_kind(OpKind op, const Shape& a, const Shape& b) {
    if (a == b) return Broadcast::kSame;
    if (shape_numel(b) == 1) return Broadcast::kScalar;
    if (shape_cols(b) == shape_cols(a) && shape_rows(b) == 1 && shape_rows(a) >= 1) {
        return Broadcast::kRow;
    }
    fail(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

const char* op_name(OpKind op) {
    switch (op) {
        case OpKind::kLeaf: return "leaf";
        case OpKind::kAdd: return "add";
        case OpKind::kSub: return "subtract";
        case OpKind::kMul: return "multiply";
        case OpKind::kScale: return "scale";
        case OpKind::kMatMulNN: return "matmul";
        case OpKind::kMatMulNT: return "matmul_nt";
        case OpKind::kExp: return "exp";
        case OpKind::kLog: return "log";
        case OpKind::kSum: return "sum";
        case OpKind::kMean: return "mean";
        case OpKind::kSqNorm: return "squared_norm";
        case OpKind::kL2Normalize: return "l2_normalize";
        case OpKind::kCosine: return "cosine_similarity";
        case OpKind::kSoftmax: return "softmax";
        case OpKind::kLogSoftmax: return "log_softmax";
        case OpKind::kCrossEntropySoft: return "cross_entropy";
        case OpKind::kCrossEntropyOneHot: return "cross_entropy_onehot";
        case OpKind::kGelu: return "gelu";
        case OpKind::kRelu: return "relu";
        case OpKind::kDropout: return "dropout";
        case OpKind::kConcat: return "concat";
        case OpKind::kDetach: return "detach";
        case OpKind::kGradReverse: return "grad_reverse";
        case OpKind::kDiv: return "divide";
        case OpKind::kGatherRows: return "gather_rows";
        case OpKind::kMaxMasked: return "max_masked";
        case OpKind::kMinMasked: return "min_masked";
        case OpKind::kReshape: return "reshape";
    }
    return "?";
}

// ---- Tensor handle ----

Trace& Tensor::trace() const {
    if (!trace_) throw std::logic_error("Tensor: undefined handle");
    return *trace_;
}

const Shape& Tensor::shape() const { return trace().node(id_).shape; }
std::size_t Tensor::numel() const { return trace().node(id_).value.size(); }
std::size_t Tensor::rows() const { return shape_rows(shape()); }
std::size_t Tensor::cols() const { return shape_cols(shape()); }
bool Tensor::requires_grad() const { return trace().node(id_).requires_grad; }

std::span<const double> Tensor::value() const { return trace().node(id_).value; }
std::span<const double> Tensor::grad() const { return trace().node(id_).grad; }

double Tensor::item() const {
    if (numel() != 1) {
        throw std::invalid_argument("Tensor::item: tensor has " +
                                    std::to_string(numel()) + " elements");
    }
    return value()[0];
}

// ---- Trace ----

Tensor Trace::leaf(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape.empty()) throw std::invalid_argument("leaf: empty shape");
    for (std::size_t d : shape) {
        if (d == 0) throw std::invalid_argument("leaf: zero dimension in " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
        throw std::invalid_argument("leaf: shape " + shape_str(shape) + " expects " +
                                    std::to_string(shape_numel(shape)) + " values, got " +
                                    std::to_string(data.size()));
    }
    ensure_finite(OpKind::kLeaf, data);
    Node n;
    n.op = OpKind::kLeaf;
    n.requires_grad = requires_grad;
    n.shape = std::move(shape);
    n.value = std::move(data);
    nodes_.push_back(std::move(n));
    return Tensor(this, nodes_.size() - 1);
}

Tensor Trace::constant(Shape shape, std::vector<double> data) {
    return leaf(std::move(shape), std::move(data), false);
}

Tensor Trace::scalar(double v) { return constant({1}, {v}); }

void Trace::zero_grad() {
    for (auto& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

// ---- forward evaluation (shared by op construction and replay) ----

namespace {

void compute_value(const std::vector<Node>& nodes, Node& n) {
    const auto& ker = kernels::active();
    auto in = [&](std::size_t i) -> const Node& { return nodes[n.inputs[i]]; };

    switch (n.op) {
        case OpKind::kLeaf:
            break;

        case OpKind::kAdd:
        case OpKind::kSub: {
            const auto& a = in(0);
            const auto& b = in(1);
            const bool is_add = n.op == OpKind::kAdd;
            n.value.resize(a.value.size());
            switch (broadcast_kind(n.op, a.shape, b.shape)) {
                case Broadcast::kSame:
                    (is_add ? ker.add : ker.sub)(a.value.data(), b.value.data(),
                                                 n.value.data(), n.value.size());
                    break;
                case Broadcast::kRow: {
                    const std::size_t r = shape_rows(a.shape), c = shape_cols(a.shape);
                    for (std::size_t i = 0; i < r; ++i) {
                        (is_add ? ker.add : ker.sub)(a.value.data() + i * c, b.value.data(),
                                                     n.value.data() + i * c, c);
                    }
                    break;
                }
                case Broadcast::kScalar: {
                    const double s = is_add ? b.value[0] : -b.value[0];
                    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = a.value[i] + s;
                    break;
                }
            }
            break;
        }

        case OpKind::kMul:
        case OpKind::kDiv: {
            const auto& a = in(0);
            const auto& b = in(1);
            n.value.resize(a.value.size());
            const bool scalar_b = shape_numel(b.shape) == 1 && a.shape != b.shape;
            if (n.op == OpKind::kMul) {
                if (scalar_b) {
                    ker.scale(a.value.data(), b.value[0], n.value.data(), n.value.size());
                } else {
                    ker.mul(a.value.data(), b.value.data(), n.value.data(), n.value.size());
                }
            } else {
                if (scalar_b) {
                    ker.scale(a.value.data(), 1.0 / b.value[0], n.value.data(), n.value.size());
                } else {
                    for (std::size_t i = 0; i < n.value.size(); ++i) {
                        n.value[i] = a.value[i] / b.value[i];
                    }
                }
            }
            break;
        }

        case OpKind::kScale: {
            const auto& a = in(0);
            n.value.resize(a.value.size());
            ker.scale(a.value.data(), n.p0, n.value.data(), n.value.size());
            break;
        }

        case OpKind::kMatMulNN: {
            const auto& a = in(0);
            const auto& b = in(1);
            const std::size_t m = a.shape[0], k = a.shape[1], c = b.shape[1];
            n.value.resize(m * c);
            ker.gemm_nn(a.value.data(), b.value.data(), n.value.data(), m, k, c);
            break;
        }

        case OpKind::kMatMulNT: {
            const auto& a = in(0);
            const auto& b = in(1);
            const std::size_t m = a.shape[0], k = a.shape[1], c = b.shape[0];
            n.value.resize(m * c);
            ker.gemm_nt(a.value.data(), b.value.data(), n.value.data(), m, k, c);
            break;
        }

        case OpKind::kExp: {
            const auto& a = in(0);
            n.value.resize(a.value.size());
            for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = std::exp(a.value[i]);
            break;
        }

        case OpKind::kLog: {
            const auto& a = in(0);
            n.value.resize(a.value.size());
            for (std::size_t i = 0; i < n.value.size(); ++i) {
                n.value[i] = std::log(std::max(a.value[i], kLogFloor));
            }
            break;
        }

        case OpKind::kSum:
            n.value = {kernels::active().sum(in(0).value.data(), in(0).value.size())};
            break;

        case OpKind::kMean:
            n.value = {kernels::active().sum(in(0).value.data(), in(0).value.size()) /
                       static_cast<double>(in(0).value.size())};
            break;

        case OpKind::kSqNorm:
            n.value = {kernels::active().sqsum(in(0).value.data(), in(0).value.size())};
            break;

        case OpKind::kL2Normalize: {
            const auto& a = in(0);
            const std::size_t r = shape_rows(a.shape), c = shape_cols(a.shape);
            n.value.resize(a.value.size());
            for (std::size_t i = 0; i < r; ++i) {
                const double* row = a.value.data() + i * c;
                const double norm = std::sqrt(ker.sqsum(row, c));
                ker.scale(row, 1.0 / std::max(norm, kNormFloor), n.value.data() + i * c, c);
            }
            break;
        }

        case OpKind::kCosine: {
            const auto& a = in(0);
            const auto& b = in(1);
            const double na = std::sqrt(ker.sqsum(a.value.data(), a.value.size()));
            const double nb = std::sqrt(ker.sqsum(b.value.data(), b.value.size()));
            n.value = {ker.dot(a.value.data(), b.value.data(), a.value.size()) /
                       (std::max(na, kNormFloor) * std::max(nb, kNormFloor))};
            break;
        }

        case OpKind::kSoftmax:
        case OpKind::kLogSoftmax: {
            const auto& a = in(0);
            const std::size_t r = shape_rows(a.shape), c = shape_cols(a.shape);
            const double tau = n.p0;
            n.value.resize(a.value.size());
            for (std::size_t i = 0; i < r; ++i) {
                const double* row = a.value.data() + i * c;
                double* out = n.value.data() + i * c;
                const double mx = *std::max_element(row, row + c);
                double denom = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    out[j] = std::exp((row[j] - mx) / tau);
                    denom += out[j];
                }
                if (n.op == OpKind::kSoftmax) {
                    for (std::size_t j = 0; j < c; ++j) out[j] /= denom;
                } else {
                    const double lse = std::log(denom);
                    for (std::size_t j = 0; j < c; ++j) {
                        out[j] = (row[j] - mx) / tau - lse;
                    }
                }
            }
            break;
        }

        case OpKind::kCrossEntropySoft: {
            const auto& p = in(0);
            const auto& t = in(1);
            const std::size_t r = shape_rows(p.shape);
            double acc = 0.0;
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                acc -= t.value[i] * std::log(std::max(p.value[i], kLogFloor));
            }
            n.value = {acc / static_cast<double>(r)};
            break;
        }

        case OpKind::kCrossEntropyOneHot: {
            const auto& p = in(0);
            const std::size_t r = shape_rows(p.shape), c = shape_cols(p.shape);
            double acc = 0.0;
            for (std::size_t i = 0; i < r; ++i) {
                acc -= std::log(std::max(p.value[i * c + n.aux[i]], kLogFloor));
            }
            n.value = {acc / static_cast<double>(r)};
            break;
        }

        case OpKind::kGelu: {
            const auto& a = in(0);
            n.value.resize(a.value.size());
            for (std::size_t i = 0; i < n.value.size(); ++i) {
                n.value[i] = a.value[i] * stable_cdf(a.value[i]);
            }
            break;
        }

        case OpKind::kRelu: {
            const auto& a = in(0);
            n.value.resize(a.value.size());
            for (std::size_t i = 0; i < n.value.size(); ++i) {
                n.value[i] = a.value[i] > 0.0 ? a.value[i] : 0.0;
            }
            break;
        }

        case OpKind::kDropout: {
            const auto& a = in(0);
            n.value = a.value;
            if (n.flag && n.p0 > 0.0) {
                std::vector<std::uint8_t> mask(a.value.size());
                dropout_mask(n.seed, n.p0, mask);
                const double inv_keep = 1.0 / (1.0 - n.p0);
                for (std::size_t i = 0; i < n.value.size(); ++i) {
                    n.value[i] = mask[i] ? n.value[i] * inv_keep : 0.0;
                }
            }
            break;
        }

        case OpKind::kConcat: {
            std::size_t total = 0;
            for (std::size_t idx : n.inputs) total += nodes[idx].value.size();
            n.value.clear();
            n.value.reserve(total);
            for (std::size_t idx : n.inputs) {
                const auto& v = nodes[idx].value;
                n.value.insert(n.value.end(), v.begin(), v.end());
            }
            break;
        }

        case OpKind::kDetach:
        case OpKind::kGradReverse:
        case OpKind::kReshape:
            n.value = in(0).value;
            break;

        case OpKind::kGatherRows: {
            const auto& a = in(0);
            const std::size_t c = shape_cols(a.shape);
            n.value.resize(n.aux.size() * c);
            for (std::size_t i = 0; i < n.aux.size(); ++i) {
                std::memcpy(n.value.data() + i * c, a.value.data() + n.aux[i] * c,
                            c * sizeof(double));
            }
            break;
        }

        case OpKind::kMaxMasked:
        case OpKind::kMinMasked: {
            const auto& a = in(0);
            const bool want_max = n.op == OpKind::kMaxMasked;
            double best = want_max ? -std::numeric_limits<double>::infinity()
                                   : std::numeric_limits<double>::infinity();
            std::size_t best_idx = 0;
            bool found = false;
            for (std::size_t i = 0; i < a.value.size(); ++i) {
                if (!n.aux[i]) continue;
                const bool better = want_max ? a.value[i] > best : a.value[i] < best;
                if (!found || better) {
                    best = a.value[i];
                    best_idx = i;
                    found = true;
                }
            }
            n.seed = best_idx;  // routing target for the backward pass
            n.value = {best};
            break;
        }
    }
}

}  // namespace

Tensor make_op(Trace& tr, Node node) {
    auto& nodes = tr.nodes_;
    bool rg = false;
    for (std::size_t idx : node.inputs) rg = rg || nodes[idx].requires_grad;
    node.requires_grad = node.op == OpKind::kDetach ? false : rg;
    compute_value(nodes, node);
    nodes.push_back(std::move(node));
    return Tensor(&tr, nodes.size() - 1);
}

namespace {

Trace& common_trace(OpKind op, const Tensor& a, const Tensor& b) {
    if (&a.trace() != &b.trace()) fail(op, "operands live on different traces");
    return a.trace();
}

Node binary_node(OpKind op, const Tensor& a, const Tensor& b) {
    ensure_finite(op, a.value());
    ensure_finite(op, b.value());
    Node n;
    n.op = op;
    n.inputs = {a.id(), b.id()};
    return n;
}

Node unary_node(OpKind op, const Tensor& a) {
    ensure_finite(op, a.value());
    Node n;
    n.op = op;
    n.inputs = {a.id()};
    return n;
}

}  // namespace

// ---- op constructors ----

Tensor add(const Tensor& a, const Tensor& b) {
    Trace& tr = common_trace(OpKind::kAdd, a, b);
    Node n = binary_node(OpKind::kAdd, a, b);
    broadcast_kind(OpKind::kAdd, a.shape(), b.shape());  // validates
    n.shape = a.shape();
    return make_op(tr, std::move(n));
}

Tensor subtract(const Tensor& a, const Tensor& b) {
    Trace& tr = common_trace(OpKind::kSub, a, b);
    Node n = binary_node(OpKind::kSub, a, b);
    broadcast_kind(OpKind::kSub, a.shape(), b.shape());
    n.shape = a.shape();
    return make_op(tr, std::move(n));
}

Tensor multiply(const Tensor& a, const Tensor& b) {
    Trace& tr = common_trace(OpKind::kMul, a, b);
    if (a.shape() != b.shape() && b.numel() != 1) {
        fail(OpKind::kMul, "shape mismatch " + shape_str(a.shape()) + " vs " +
                               shape_str(b.shape()));
    }
    Node n = binary_node(OpKind::kMul, a, b);
    n.shape = a.shape();
    return make_op(tr, std::move(n));
}

Tensor divide(const Tensor& a, const Tensor& b) {
    Trace& tr = common_trace(OpKind::kDiv, a, b);
    if (a.shape() != b.shape() && b.numel() != 1) {
        fail(OpKind::kDiv, "shape mismatch " + shape_str(a.shape()) + " vs " +
                               shape_str(b.shape()));
    }
    Node n = binary_node(OpKind::kDiv, a, b);
    n.shape = a.shape();
    return make_op(tr, std::move(n));
}

Tensor scale(const Tensor& a, double c) {
    if (!std::isfinite(c)) fail(OpKind::kScale, "non-finite scale factor");
    Node n = unary_node(OpKind::kScale, a);
    n.shape = a.shape();
    n.p0 = c;
    return make_op(a.trace(), std::move(n));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    Trace& tr = common_trace(OpKind::kMatMulNN, a, b);
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
        fail(OpKind::kMatMulNN, "shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    Node n = binary_node(OpKind::kMatMulNN, a, b);
    n.shape = {a.shape()[0], b.shape()[1]};
    return make_op(tr, std::move(n));
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    Trace& tr = common_trace(OpKind::kMatMulNT, a, b);
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[1]) {
        fail(OpKind::kMatMulNT, "shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    Node n = binary_node(OpKind::kMatMulNT, a, b);
    n.shape = {a.shape()[0], b.shape()[0]};
    return make_op(tr, std::move(n));
}

Tensor exponent(const Tensor& a) {
    Node n = unary_node(OpKind::kExp, a);
    n.shape = a.shape();
    return make_op(a.trace(), std::move(n));
}

Tensor natural_log(const Tensor& a) {
    Node n = unary_node(OpKind::kLog, a);
    n.shape = a.shape();
    return make_op(a.trace(), std::move(n));
}

Tensor sum(const Tensor& a) {
    Node n = unary_node(OpKind::kSum, a);
    n.shape = {1};
    return make_op(a.trace(), std::move(n));
}

Tensor mean(const Tensor& a) {
    Node n = unary_node(OpKind::kMean, a);
    n.shape = {1};
    return make_op(a.trace(), std::move(n));
}

Tensor squared_norm(const Tensor& a) {
    Node n = unary_node(OpKind::kSqNorm, a);
    n.shape = {1};
    return make_op(a.trace(), std::move(n));
}

Tensor l2_normalize(const Tensor& a) {
    Node n = unary_node(OpKind::kL2Normalize, a);
    n.shape = a.shape();
    return make_op(a.trace(), std::move(n));
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    Trace& tr = common_trace(OpKind::kCosine, a, b);
    if (a.shape().size() != 1 || a.shape() != b.shape()) {
        fail(OpKind::kCosine, "rank-1 equal shapes required, got " + shape_str(a.shape()) +
                                  " vs " + shape_str(b.shape()));
    }
    Node n = binary_node(OpKind::kCosine, a, b);
    n.shape = {1};
    return make_op(tr, std::move(n));
}

Tensor softmax(const Tensor& a, double tau) {
    if (!(tau > 0.0)) fail(OpKind::kSoftmax, "temperature must be positive");
    Node n = unary_node(OpKind::kSoftmax, a);
    n.shape = a.shape();
    n.p0 = tau;
    return make_op(a.trace(), std::move(n));
}

Tensor log_softmax(const Tensor& a, double tau) {
    if (!(tau > 0.0)) fail(OpKind::kLogSoftmax, "temperature must be positive");
    Node n = unary_node(OpKind::kLogSoftmax, a);
    n.shape = a.shape();
    n.p0 = tau;
    return make_op(a.trace(), std::move(n));
}

Tensor cross_entropy(const Tensor& probs, const Tensor& target_probs) {
    Trace& tr = common_trace(OpKind::kCrossEntropySoft, probs, target_probs);
    if (probs.shape() != target_probs.shape()) {
        fail(OpKind::kCrossEntropySoft, "shape mismatch " + shape_str(probs.shape()) +
                                            " vs " + shape_str(target_probs.shape()));
    }
    Node n = binary_node(OpKind::kCrossEntropySoft, probs, target_probs);
    n.shape = {1};
    return make_op(tr, std::move(n));
}

Tensor cross_entropy(const Tensor& probs, std::span<const int> labels) {
    const std::size_t r = probs.rows(), c = probs.cols();
    if (labels.size() != r) {
        fail(OpKind::kCrossEntropyOneHot,
             "label count " + std::to_string(labels.size()) + " vs " +
                 std::to_string(r) + " rows");
    }
    Node n = unary_node(OpKind::kCrossEntropyOneHot, probs);
    n.shape = {1};
    n.aux.reserve(r);
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= c) {
            fail(OpKind::kCrossEntropyOneHot, "label out of range: " + std::to_string(y));
        }
        n.aux.push_back(static_cast<std::uint32_t>(y));
    }
    return make_op(probs.trace(), std::move(n));
}

Tensor gelu(const Tensor& a) {
    Node n = unary_node(OpKind::kGelu, a);
    n.shape = a.shape();
    return make_op(a.trace(), std::move(n));
}

Tensor relu(const Tensor& a) {
    Node n = unary_node(OpKind::kRelu, a);
    n.shape = a.shape();
    return make_op(a.trace(), std::move(n));
}

Tensor dropout(const Tensor& a, double rate, std::uint64_t seed, bool training) {
    if (!(rate >= 0.0 && rate < 1.0)) fail(OpKind::kDropout, "rate must be in [0,1)");
    Node n = unary_node(OpKind::kDropout, a);
    n.shape = a.shape();
    n.p0 = rate;
    n.seed = seed;
    n.flag = training;
    return make_op(a.trace(), std::move(n));
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.size() < 2) fail(OpKind::kConcat, "needs at least two inputs");
    Trace& tr = parts[0].trace();
    const std::size_t c = parts[0].cols();
    std::size_t r = 0;
    Node n;
    n.op = OpKind::kConcat;
    for (const Tensor& t : parts) {
        if (&t.trace() != &tr) fail(OpKind::kConcat, "operands live on different traces");
        if (t.cols() != c) {
            fail(OpKind::kConcat, "column mismatch " + shape_str(parts[0].shape()) +
                                      " vs " + shape_str(t.shape()));
        }
        ensure_finite(OpKind::kConcat, t.value());
        r += t.rows();
        n.inputs.push_back(t.id());
    }
    n.shape = {r, c};
    return make_op(tr, std::move(n));
}

Tensor detach(const Tensor& a) {
    Node n;  // skip the finite check: detach is a pure graph cut
    n.op = OpKind::kDetach;
    n.inputs = {a.id()};
    n.shape = a.shape();
    return make_op(a.trace(), std::move(n));
}

Tensor grad_reverse(const Tensor& a, double mu) {
    if (!(mu > 0.0)) fail(OpKind::kGradReverse, "mu must be positive");
    Node n = unary_node(OpKind::kGradReverse, a);
    n.shape = a.shape();
    n.p0 = mu;
    return make_op(a.trace(), std::move(n));
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
    if (rows.empty()) fail(OpKind::kGatherRows, "empty row selection");
    Node n = unary_node(OpKind::kGatherRows, a);
    const std::size_t r = a.rows();
    for (std::size_t idx : rows) {
        if (idx >= r) {
            fail(OpKind::kGatherRows, "row " + std::to_string(idx) + " out of " +
                                          std::to_string(r));
        }
        n.aux.push_back(static_cast<std::uint32_t>(idx));
    }
    n.shape = {rows.size(), a.cols()};
    return make_op(a.trace(), std::move(n));
}

namespace {

Tensor masked_reduce(OpKind op, const Tensor& a, std::span<const std::uint32_t> mask) {
    if (mask.size() != a.numel()) {
        fail(op, "mask length " + std::to_string(mask.size()) + " vs " +
                     std::to_string(a.numel()) + " elements");
    }
    bool any = false;
    for (std::uint32_t m : mask) any = any || m;
    if (!any) fail(op, "empty mask");
    Node n = unary_node(op, a);
    n.shape = {1};
    n.aux.assign(mask.begin(), mask.end());
    return make_op(a.trace(), std::move(n));
}

}  // namespace

Tensor max_masked(const Tensor& a, std::span<const std::uint32_t> mask) {
    return masked_reduce(OpKind::kMaxMasked, a, mask);
}

Tensor min_masked(const Tensor& a, std::span<const std::uint32_t> mask) {
    return masked_reduce(OpKind::kMinMasked, a, mask);
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        fail(OpKind::kReshape, "cannot reshape " + shape_str(a.shape()) + " to " +
                                   shape_str(shape));
    }
    Node n;
    n.op = OpKind::kReshape;
    n.inputs = {a.id()};
    n.shape = std::move(shape);
    return make_op(a.trace(), std::move(n));
}

Tensor ones(Trace& tr, Shape shape) {
    std::vector<double> v(shape_numel(shape), 1.0);
    return tr.constant(std::move(shape), std::move(v));
}

Tensor one_hot(Trace& tr, std::span<const int> labels, std::size_t num_classes) {
    std::vector<double> v(labels.size() * num_classes, 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
            throw std::invalid_argument("one_hot: label out of range: " +
                                        std::to_string(labels[i]));
        }
        v[i * num_classes + labels[i]] = 1.0;
    }
    return tr.constant({labels.size(), num_classes}, std::move(v));
}

// ---- backward ----

namespace {

std::vector<double>& ensure_grad(Node& n) {
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

void backprop_node(std::vector<Node>& nodes, std::size_t id) {
    Node& n = nodes[id];
    if (n.grad.empty() || n.op == OpKind::kLeaf || n.op == OpKind::kDetach) return;
    const auto& ker = kernels::active();
    const std::vector<double>& g = n.grad;
    auto input = [&](std::size_t i) -> Node& { return nodes[n.inputs[i]]; };
    auto wants = [&](std::size_t i) { return nodes[n.inputs[i]].requires_grad; };

    switch (n.op) {
        case OpKind::kLeaf:
        case OpKind::kDetach:
            break;

        case OpKind::kAdd:
        case OpKind::kSub: {
            Node& a = input(0);
            Node& b = input(1);
            const double sign = n.op == OpKind::kAdd ? 1.0 : -1.0;
            if (wants(0)) ker.axpy(ensure_grad(a).data(), 1.0, g.data(), g.size());
            if (wants(1)) {
                auto& gb = ensure_grad(b);
                switch (broadcast_kind(n.op, a.shape, b.shape)) {
                    case Broadcast::kSame:
                        ker.axpy(gb.data(), sign, g.data(), g.size());
                        break;
                    case Broadcast::kRow: {
                        const std::size_t r = shape_rows(a.shape), c = shape_cols(a.shape);
                        for (std::size_t i = 0; i < r; ++i) {
                            ker.axpy(gb.data(), sign, g.data() + i * c, c);
                        }
                        break;
                    }
                    case Broadcast::kScalar:
                        gb[0] += sign * ker.sum(g.data(), g.size());
                        break;
                }
            }
            break;
        }

        case OpKind::kMul: {
            Node& a = input(0);
            Node& b = input(1);
            const bool scalar_b = b.value.size() == 1 && a.value.size() != 1;
            if (wants(0)) {
                auto& ga = ensure_grad(a);
                if (scalar_b) {
                    ker.axpy(ga.data(), b.value[0], g.data(), g.size());
                } else {
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.value[i];
                }
            }
            if (wants(1)) {
                auto& gb = ensure_grad(b);
                if (scalar_b) {
                    gb[0] += ker.dot(g.data(), a.value.data(), g.size());
                } else {
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.value[i];
                }
            }
            break;
        }

        case OpKind::kDiv: {
            Node& a = input(0);
            Node& b = input(1);
            const bool scalar_b = b.value.size() == 1 && a.value.size() != 1;
            if (wants(0)) {
                auto& ga = ensure_grad(a);
                if (scalar_b) {
                    ker.axpy(ga.data(), 1.0 / b.value[0], g.data(), g.size());
                } else {
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / b.value[i];
                }
            }
            if (wants(1)) {
                auto& gb = ensure_grad(b);
                if (scalar_b) {
                    const double inv2 = 1.0 / (b.value[0] * b.value[0]);
                    gb[0] -= inv2 * ker.dot(g.data(), a.value.data(), g.size());
                } else {
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        gb[i] -= g[i] * a.value[i] / (b.value[i] * b.value[i]);
                    }
                }
            }
            break;
        }

        case OpKind::kScale:
            if (wants(0)) {
                ker.axpy(ensure_grad(input(0)).data(), n.p0, g.data(), g.size());
            }
            break;

        case OpKind::kMatMulNN: {
            Node& a = input(0);
            Node& b = input(1);
            const std::size_t m = a.shape[0], k = a.shape[1], c = b.shape[1];
            if (wants(0)) {  // dA = G B^T
                std::vector<double> tmp(m * k);
                ker.gemm_nt(g.data(), b.value.data(), tmp.data(), m, c, k);
                auto& ga = ensure_grad(a);
                ker.axpy(ga.data(), 1.0, tmp.data(), tmp.size());
            }
            if (wants(1)) {  // dB = A^T G
                std::vector<double> tmp(k * c);
                ker.gemm_tn(a.value.data(), g.data(), tmp.data(), m, k, c);
                auto& gb = ensure_grad(b);
                ker.axpy(gb.data(), 1.0, tmp.data(), tmp.size());
            }
            break;
        }

        case OpKind::kMatMulNT: {
            Node& a = input(0);
            Node& b = input(1);
            const std::size_t m = a.shape[0], k = a.shape[1], c = b.shape[0];
            if (wants(0)) {  // dA = G B
                std::vector<double> tmp(m * k);
                ker.gemm_nn(g.data(), b.value.data(), tmp.data(), m, c, k);
                auto& ga = ensure_grad(a);
                ker.axpy(ga.data(), 1.0, tmp.data(), tmp.size());
            }
            if (wants(1)) {  // dB = G^T A
                std::vector<double> tmp(c * k);
                ker.gemm_tn(g.data(), a.value.data(), tmp.data(), m, c, k);
                auto& gb = ensure_grad(b);
                ker.axpy(gb.data(), 1.0, tmp.data(), tmp.size());
            }
            break;
        }

        case OpKind::kExp:
            if (wants(0)) {
                auto& ga = ensure_grad(input(0));
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.value[i];
            }
            break;

        case OpKind::kLog:
            if (wants(0)) {
                Node& a = input(0);
                auto& ga = ensure_grad(a);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    if (a.value[i] > kLogFloor) ga[i] += g[i] / a.value[i];
                }
            }
            break;

        case OpKind::kSum:
            if (wants(0)) {
                auto& ga = ensure_grad(input(0));
                const double g0 = g[0];
                for (double& v : ga) v += g0;
            }
            break;

        case OpKind::kMean:
            if (wants(0)) {
                auto& ga = ensure_grad(input(0));
                const double g0 = g[0] / static_cast<double>(ga.size());
                for (double& v : ga) v += g0;
            }
            break;

        case OpKind::kSqNorm:
            if (wants(0)) {
                Node& a = input(0);
                ker.axpy(ensure_grad(a).data(), 2.0 * g[0], a.value.data(), a.value.size());
            }
            break;

        case OpKind::kL2Normalize:
            if (wants(0)) {
                Node& a = input(0);
                auto& ga = ensure_grad(a);
                const std::size_t r = shape_rows(a.shape), c = shape_cols(a.shape);
                for (std::size_t i = 0; i < r; ++i) {
                    const double* x = a.value.data() + i * c;
                    const double* y = n.value.data() + i * c;
                    const double* gr = g.data() + i * c;
                    double* out = ga.data() + i * c;
                    const double norm = std::sqrt(ker.sqsum(x, c));
                    if (norm > kNormFloor) {
                        const double gy = ker.dot(gr, y, c);
                        for (std::size_t j = 0; j < c; ++j) {
                            out[j] += (gr[j] - y[j] * gy) / norm;
                        }
                    } else {
                        ker.axpy(out, 1.0 / kNormFloor, gr, c);
                    }
                }
            }
            break;

        case OpKind::kCosine: {
            Node& a = input(0);
            Node& b = input(1);
            const std::size_t len = a.value.size();
            const double na = std::sqrt(ker.sqsum(a.value.data(), len));
            const double nb = std::sqrt(ker.sqsum(b.value.data(), len));
            const double ca = std::max(na, kNormFloor), cb = std::max(nb, kNormFloor);
            const double cosv = n.value[0], g0 = g[0];
            if (wants(0)) {
                auto& ga = ensure_grad(a);
                ker.axpy(ga.data(), g0 / (ca * cb), b.value.data(), len);
                if (na > kNormFloor) {
                    ker.axpy(ga.data(), -g0 * cosv / (na * na), a.value.data(), len);
                }
            }
            if (wants(1)) {
                auto& gb = ensure_grad(b);
                ker.axpy(gb.data(), g0 / (ca * cb), a.value.data(), len);
                if (nb > kNormFloor) {
                    ker.axpy(gb.data(), -g0 * cosv / (nb * nb), b.value.data(), len);
                }
            }
            break;
        }

        case OpKind::kSoftmax:
            if (wants(0)) {
                Node& a = input(0);
                auto& ga = ensure_grad(a);
                const std::size_t r = shape_rows(a.shape), c = shape_cols(a.shape);
                for (std::size_t i = 0; i < r; ++i) {
                    const double* y = n.value.data() + i * c;
                    const double* gr = g.data() + i * c;
                    double* out = ga.data() + i * c;
                    const double gy = ker.dot(gr, y, c);
                    for (std::size_t j = 0; j < c; ++j) {
                        out[j] += y[j] * (gr[j] - gy) / n.p0;
                    }
                }
            }
            break;

        case OpKind::kLogSoftmax:
            if (wants(0)) {
                Node& a = input(0);
                auto& ga = ensure_grad(a);
                const std::size_t r = shape_rows(a.shape), c = shape_cols(a.shape);
                for (std::size_t i = 0; i < r; ++i) {
                    const double* y = n.value.data() + i * c;
                    const double* gr = g.data() + i * c;
                    double* out = ga.data() + i * c;
                    const double gsum = ker.sum(gr, c);
                    for (std::size_t j = 0; j < c; ++j) {
                        out[j] += (gr[j] - std::exp(y[j]) * gsum) / n.p0;
                    }
                }
            }
            break;

        case OpKind::kCrossEntropySoft: {
            Node& p = input(0);
            Node& t = input(1);
            const double w = g[0] / static_cast<double>(shape_rows(p.shape));
            if (wants(0)) {
                auto& gp = ensure_grad(p);
                for (std::size_t i = 0; i < p.value.size(); ++i) {
                    if (p.value[i] > kLogFloor) gp[i] -= w * t.value[i] / p.value[i];
                }
            }
            if (wants(1)) {
                auto& gt = ensure_grad(t);
                for (std::size_t i = 0; i < p.value.size(); ++i) {
                    gt[i] -= w * std::log(std::max(p.value[i], kLogFloor));
                }
            }
            break;
        }

        case OpKind::kCrossEntropyOneHot:
            if (wants(0)) {
                Node& p = input(0);
                auto& gp = ensure_grad(p);
                const std::size_t r = shape_rows(p.shape), c = shape_cols(p.shape);
                const double w = g[0] / static_cast<double>(r);
                for (std::size_t i = 0; i < r; ++i) {
                    const double pv = p.value[i * c + n.aux[i]];
                    if (pv > kLogFloor) gp[i * c + n.aux[i]] -= w / pv;
                }
            }
            break;

        case OpKind::kGelu:
            if (wants(0)) {
                Node& a = input(0);
                auto& ga = ensure_grad(a);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double x = a.value[i];
                    ga[i] += g[i] * (stable_cdf(x) + x * stable_phi(x));
                }
            }
            break;

        case OpKind::kRelu:
            if (wants(0)) {
                Node& a = input(0);
                auto& ga = ensure_grad(a);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    if (a.value[i] > 0.0) ga[i] += g[i];
                }
            }
            break;

        case OpKind::kDropout:
            if (wants(0)) {
                auto& ga = ensure_grad(input(0));
                if (n.flag && n.p0 > 0.0) {
                    std::vector<std::uint8_t> mask(g.size());
                    dropout_mask(n.seed, n.p0, mask);
                    const double inv_keep = 1.0 / (1.0 - n.p0);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        if (mask[i]) ga[i] += g[i] * inv_keep;
                    }
                } else {
                    ker.axpy(ga.data(), 1.0, g.data(), g.size());
                }
            }
            break;

        case OpKind::kConcat: {
            std::size_t offset = 0;
            for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                Node& part = nodes[n.inputs[k]];
                if (part.requires_grad) {
                    ker.axpy(ensure_grad(part).data(), 1.0, g.data() + offset,
                             part.value.size());
                }
                offset += part.value.size();
            }
            break;
        }

        case OpKind::kGradReverse:
            if (wants(0)) {
                ker.axpy(ensure_grad(input(0)).data(), -n.p0, g.data(), g.size());
            }
            break;

        case OpKind::kGatherRows:
            if (wants(0)) {
                Node& a = input(0);
                auto& ga = ensure_grad(a);
                const std::size_t c = shape_cols(a.shape);
                for (std::size_t i = 0; i < n.aux.size(); ++i) {
                    ker.axpy(ga.data() + n.aux[i] * c, 1.0, g.data() + i * c, c);
                }
            }
            break;

        case OpKind::kMaxMasked:
        case OpKind::kMinMasked:
            if (wants(0)) {
                ensure_grad(input(0))[n.seed] += g[0];
            }
            break;

        case OpKind::kReshape:
            if (wants(0)) {
                ker.axpy(ensure_grad(input(0)).data(), 1.0, g.data(), g.size());
            }
            break;
    }
}

}  // namespace

GradientMap Trace::backward(const Tensor& root) {
    if (&root.trace() != this) {
        throw std::invalid_argument("backward: root lives on a different trace");
    }
    const Node& rn = nodes_.at(root.id());
    if (rn.value.size() != 1) {
        throw std::invalid_argument("backward: root must be scalar, got shape " +
                                    shape_str(rn.shape));
    }
    GradientMap out;
    if (!rn.requires_grad) return out;  // detached or constant root

    std::vector<char> needed(nodes_.size(), 0);
    needed[root.id()] = 1;
    for (std::size_t id = root.id() + 1; id-- > 0;) {
        if (!needed[id]) continue;
        for (std::size_t in : nodes_[id].inputs) {
            if (nodes_[in].requires_grad) needed[in] = 1;
        }
    }

    ensure_grad(nodes_[root.id()])[0] += 1.0;
    for (std::size_t id = root.id() + 1; id-- > 0;) {
        if (needed[id]) backprop_node(nodes_, id);
    }

    for (std::size_t id = 0; id < nodes_.size(); ++id) {
        const Node& n = nodes_[id];
        if (n.op == OpKind::kLeaf && n.requires_grad) {
            out[id] = n.grad.empty() ? std::vector<double>(n.value.size(), 0.0) : n.grad;
        }
    }
    return out;
}

bool Trace::replay_bitwise() const {
    for (const Node& n : nodes_) {
        if (n.op == OpKind::kLeaf) continue;
        Node copy;
        copy.op = n.op;
        copy.shape = n.shape;
        copy.inputs = n.inputs;
        copy.p0 = n.p0;
        copy.seed = n.seed;
        copy.flag = n.flag;
        copy.aux = n.aux;
        compute_value(nodes_, copy);
        if (copy.value.size() != n.value.size()) return false;
        if (std::memcmp(copy.value.data(), n.value.data(),
                        n.value.size() * sizeof(double)) != 0) {
            return false;
        }
    }
    return true;
}

// ---- finite differences ----

FiniteDiffReport finite_diff_check(
    const std::function<double(std::span<const double>)>& f,
    std::span<double> params, std::span<const double> analytic_grad,
    double h, double tol) {
    if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: h must be positive");
    if (analytic_grad.size() != params.size()) {
        throw std::invalid_argument("finite_diff_check: gradient size mismatch");
    }
    FiniteDiffReport report;
    report.per_param.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double saved = params[i];
        double fp = 0.0, fm = 0.0;
        bool ok = true;
        try {
            params[i] = saved + h;
            fp = f(params);
            params[i] = saved - h;
            fm = f(params);
        } catch (const std::exception&) {
            ok = false;
        }
        params[i] = saved;
        if (!ok || !std::isfinite(fp) || !std::isfinite(fm)) {
            report.inconclusive = true;
            continue;
        }
        const double numeric = (fp - fm) / (2.0 * h);
        const double analytic = analytic_grad[i];
        const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
        const double rel = std::abs(analytic - numeric) / denom;
        report.per_param[i] = {analytic, numeric, rel};
        if (rel > report.max_rel_dev) {
            report.max_rel_dev = rel;
            report.worst_index = i;
        }
    }
    report.pass = !report.inconclusive && report.max_rel_dev <= tol;
    return report;
}

}  // namespace gface
