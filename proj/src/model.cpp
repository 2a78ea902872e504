#include "gface/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "gface/rng.hpp"

namespace gface {

std::vector<ParamBlock> ModelParams::blocks() {
    return {
        {"extractor.w1", &w1}, {"extractor.b1", &b1},
        {"extractor.w2", &w2}, {"extractor.b2", &b2},
        {"projector.w", &wp},  {"projector.b", &bp},
        {"prototypes", &prototypes},
        {"aux.w1", &wa1},      {"aux.b1", &ba1},
        {"aux.w2", &wa2},      {"aux.b2", &ba2},
    };
}

std::vector<const std::vector<double>*> ModelParams::blocks_const() const {
    return {&w1, &b1, &w2, &b2, &wp, &bp, &prototypes, &wa1, &ba1, &wa2, &ba2};
}

std::size_t ModelParams::num_parameters() const {
    std::size_t n = 0;
    for (const auto* b : blocks_const()) n += b->size();
    return n;
}

ModelParams init_model(std::size_t d, std::size_t d_f, std::size_t d_b,
                       std::size_t d_h, std::size_t K, std::uint64_t seed) {
    if (d < 1 || d_f < 1 || d_b < 1 || d_h < 1 || K < 1) {
        throw std::invalid_argument("init_model: all dimensions must be >= 1");
    }
    ModelParams p;
    p.d = d;
    p.d_f = d_f;
    p.d_b = d_b;
    p.d_h = d_h;
    p.K = K;

    Rng rng(derive_seed(seed, 0x111717));
    auto uniform_block = [&](std::vector<double>& w, std::size_t fan_in, std::size_t count) {
        const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
        w.resize(count);
        for (double& v : w) v = (2.0 * rng.uniform() - 1.0) * s;
    };
    uniform_block(p.w1, d, d * d_f);
    p.b1.assign(d_f, 0.0);
    uniform_block(p.w2, d_f, d_f * d_f);
    p.b2.assign(d_f, 0.0);
    uniform_block(p.wp, d_f, d_f * d_b);
    p.bp.assign(d_b, 0.0);
    uniform_block(p.wa1, d_f, d_f * d_h);
    p.ba1.assign(d_h, 0.0);
    uniform_block(p.wa2, d_h, d_h * K);
    p.ba2.assign(K, 0.0);

    // prototypes: unit Gaussian rows, L2-normalized
    p.prototypes.resize(K * d_f);
    for (std::size_t k = 0; k < K; ++k) {
        double norm = 0.0;
        for (std::size_t j = 0; j < d_f; ++j) {
            const double v = rng.normal();
            p.prototypes[k * d_f + j] = v;
            norm += v * v;
        }
        norm = std::sqrt(std::max(norm, 1e-12));
        for (std::size_t j = 0; j < d_f; ++j) p.prototypes[k * d_f + j] /= norm;
    }
    return p;
}

BoundModel bind_model(Trace& tr, const ModelParams& params, bool requires_grad) {
    BoundModel m;
    m.dims = &params;
    const std::size_t d = params.d, d_f = params.d_f, d_b = params.d_b,
                      d_h = params.d_h, K = params.K;
    const Shape shapes[] = {
        {d, d_f},  {1, d_f}, {d_f, d_f}, {1, d_f}, {d_f, d_b}, {1, d_b},
        {K, d_f},  {d_f, d_h}, {1, d_h}, {d_h, K}, {1, K},
    };
    const auto blocks = params.blocks_const();
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        m.leaves.push_back(tr.leaf(shapes[i], *blocks[i], requires_grad));
    }
    return m;
}

Tensor extract(const BoundModel& m, const Tensor& x) {
    if (x.cols() != m.dims->d) {
        throw std::invalid_argument("extract: input dim " + std::to_string(x.cols()) +
                                    " != model d " + std::to_string(m.dims->d));
    }
    Tensor h = gelu(add(matmul(x, m.w1()), m.b1()));
    return add(matmul(h, m.w2()), m.b2());
}

Tensor project(const BoundModel& m, const Tensor& z) {
    if (z.cols() != m.dims->d_f) {
        throw std::invalid_argument("project: input dim " + std::to_string(z.cols()) +
                                    " != model d_f " + std::to_string(m.dims->d_f));
    }
    return l2_normalize(add(matmul(z, m.wp()), m.bp()));
}

HeadOutput main_logits(const BoundModel& m, const Tensor& z, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("main_logits: tau must be positive");
    // cos(z, t_k)/tau realized as normalized rows times normalized prototypes
    Tensor logits = scale(matmul_nt(l2_normalize(z), l2_normalize(m.prototypes())),
                          1.0 / tau);
    return {logits, softmax(logits, 1.0)};
}

HeadOutput aux_logits(const BoundModel& m, const Tensor& z, double mu, bool training,
                      double dropout_rate, std::uint64_t dropout_seed) {
    Tensor r = grad_reverse(z, mu);
    Tensor h = gelu(add(matmul(r, m.wa1()), m.ba1()));
    h = dropout(h, dropout_rate, dropout_seed, training);
    Tensor logits = add(matmul(h, m.wa2()), m.ba2());
    return {logits, softmax(logits, 1.0)};
}

std::vector<int> argmax_rows(std::span<const double> probs, std::size_t rows,
                             std::size_t cols) {
    std::vector<int> out(rows, 0);
    for (std::size_t i = 0; i < rows; ++i) {
        const double* row = probs.data() + i * cols;
        std::size_t best = 0;
        for (std::size_t j = 1; j < cols; ++j) {
            if (row[j] > row[best]) best = j;  // strict: ties go to lowest index
        }
        out[i] = static_cast<int>(best);
    }
    return out;
}

Tensor pseudo_labels(Trace& tr, const HeadOutput& head) {
    const std::size_t rows = head.probs.rows(), cols = head.probs.cols();
    const auto labels = argmax_rows(head.probs.value(), rows, cols);
    return one_hot(tr, labels, cols);
}

// ---- checkpoint io ----

namespace {

constexpr char kMagic[4] = {'G', 'F', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ofstream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::ifstream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
        throw std::runtime_error("checkpoint " + path + ": truncated header");
    }
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(std::ifstream& in, const std::string& path) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) {
        throw std::runtime_error("checkpoint " + path + ": truncated block header");
    }
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

void put_doubles(std::ofstream& out, const std::vector<double>& v) {
    for (double x : v) {
        std::uint64_t bits;
        std::memcpy(&bits, &x, 8);
        put_u64(out, bits);
    }
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
    out.write(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(params.K));
    put_u32(out, static_cast<std::uint32_t>(params.d));
    put_u32(out, static_cast<std::uint32_t>(params.d_f));
    put_u32(out, static_cast<std::uint32_t>(params.d_b));
    put_u32(out, static_cast<std::uint32_t>(params.d_h));
    for (const auto* block : params.blocks_const()) {
        put_u64(out, block->size());
        put_doubles(out, *block);
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

ModelParams load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("checkpoint " + path + ": bad magic (not a GFCK file)");
    }
    const std::uint32_t version = get_u32(in, path);
    if (version != kVersion) {
        throw std::runtime_error("checkpoint " + path + ": unsupported version " +
                                 std::to_string(version) + ", expected " +
                                 std::to_string(kVersion));
    }
    ModelParams p;
    p.K = get_u32(in, path);
    p.d = get_u32(in, path);
    p.d_f = get_u32(in, path);
    p.d_b = get_u32(in, path);
    p.d_h = get_u32(in, path);

    const std::size_t expected[] = {
        p.d * p.d_f, p.d_f, p.d_f * p.d_f, p.d_f, p.d_f * p.d_b, p.d_b,
        p.K * p.d_f, p.d_f * p.d_h, p.d_h, p.d_h * p.K, p.K,
    };
    auto blocks = p.blocks();
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::uint64_t count = get_u64(in, path);
        if (count != expected[i]) {
            throw std::runtime_error("checkpoint " + path + ": block " +
                                     blocks[i].name + " has " + std::to_string(count) +
                                     " values, expected " + std::to_string(expected[i]));
        }
        blocks[i].data->resize(count);
        for (std::uint64_t j = 0; j < count; ++j) {
            const std::uint64_t bits = get_u64(in, path);
            double x;
            std::memcpy(&x, &bits, 8);
            (*blocks[i].data)[j] = x;
        }
    }
    char extra;
    if (in.read(&extra, 1)) {
        throw std::runtime_error("checkpoint " + path + ": trailing bytes");
    }
    return p;
}

}  // namespace gface
