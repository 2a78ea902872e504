#pragma once
// The three trainable pieces: feature extractor (2-layer GeLU map over
// embedding inputs), projector (dense + L2 normalization, feeds the
// contrastive losses), prototype main head (temperature-scaled cosine
// scoring against K learnable prototypes), and the auxiliary head reached
// through a gradient reversal layer.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gface/tensor.hpp"

namespace gface {

struct ParamBlock {
    const char* name;
    std::vector<double>* data;
};

struct ModelParams {
    std::size_t d = 0, d_f = 64, d_b = 32, d_h = 128, K = 0;

    std::vector<double> w1, b1;  // d   x d_f, d_f
    std::vector<double> w2, b2;  // d_f x d_f, d_f
    std::vector<double> wp, bp;  // d_f x d_b, d_b
    std::vector<double> prototypes;  // K x d_f, row per class
    std::vector<double> wa1, ba1;    // d_f x d_h, d_h
    std::vector<double> wa2, ba2;    // d_h x K,   K

    // declaration order; also the checkpoint block order
    std::vector<ParamBlock> blocks();
    std::vector<const std::vector<double>*> blocks_const() const;
    std::size_t num_parameters() const;
};

ModelParams init_model(std::size_t d, std::size_t d_f, std::size_t d_b,
                       std::size_t d_h, std::size_t K, std::uint64_t seed);

// Parameter leaves registered on a trace, in block declaration order.
struct BoundModel {
    const ModelParams* dims = nullptr;
    std::vector<Tensor> leaves;  // aligned with ModelParams::blocks()

    const Tensor& w1() const { return leaves[0]; }
    const Tensor& b1() const { return leaves[1]; }
    const Tensor& w2() const { return leaves[2]; }
    const Tensor& b2() const { return leaves[3]; }
    const Tensor& wp() const { return leaves[4]; }
    const Tensor& bp() const { return leaves[5]; }
    const Tensor& prototypes() const { return leaves[6]; }
    const Tensor& wa1() const { return leaves[7]; }
    const Tensor& ba1() const { return leaves[8]; }
    const Tensor& wa2() const { return leaves[9]; }
    const Tensor& ba2() const { return leaves[10]; }
};

BoundModel bind_model(Trace& tr, const ModelParams& params, bool requires_grad);

struct HeadOutput {
    Tensor logits;  // [rows, K]
    Tensor probs;   // row-stochastic
};

// x: [rows, d] -> features [rows, d_f]; deterministic (no dropout here)
Tensor extract(const BoundModel& m, const Tensor& x);

// z: [rows, d_f] -> L2-normalized bottleneck [rows, d_b]
Tensor project(const BoundModel& m, const Tensor& z);

// logit_k = cos(z, t_k) / tau; probs = softmax(logits)
HeadOutput main_logits(const BoundModel& m, const Tensor& z, double tau);

// gradient reversal, then two dense layers with GeLU and dropout; gradients
// reaching the extractor from this branch arrive negated and scaled by mu
HeadOutput aux_logits(const BoundModel& m, const Tensor& z, double mu, bool training,
                      double dropout_rate, std::uint64_t dropout_seed);

// argmax one-hot targets from head probabilities, detached from the graph;
// ties break to the lowest class index
Tensor pseudo_labels(Trace& tr, const HeadOutput& head);
std::vector<int> argmax_rows(std::span<const double> probs, std::size_t rows,
                             std::size_t cols);

// Checkpoint: magic "GFCK", version u32, K,d,d_f,d_b,d_h u32, then parameter
// blocks in declaration order, each prefixed by a u64 double count.
// Little-endian IEEE-754 doubles; round-trips bitwise.
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace gface
