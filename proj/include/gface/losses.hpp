#pragma once
// The training objective: contrastive representation terms, parametric
// classifier term with mean-entropy regularizer, adversarial min-max term
// (through gradient reversal), confusing-sample mining, and the supervised
// clustering term. Each loss is an independent scalar tensor on the caller's
// trace, so every one of them is finite-difference checkable on its own.

#include <cstdint>
#include <span>
#include <vector>

#include "gface/model.hpp"
#include "gface/tensor.hpp"

namespace gface {

struct LossWeights {
    double lambda = 0.35;   // supervised/unsupervised balance
    double lambda_a = 0.2;  // adversarial
    double lambda_b = 0.3;  // balance (confusing-sample mining)
    double lambda_c = 0.2;  // clustering
    double alpha = 2.0;     // labeled-term coefficient in the adversarial loss
    double beta = 0.2;      // max-min regularizer weight inside the cluster loss
    double eps_bal = 0.05;  // denominator guard for per-class accuracy
    double eps_wb = 1e-6;   // denominator guard for within/between scatter
    double eps_ent = 1.0;   // mean-entropy regularizer weight
    double tau_u = 0.07;    // self-supervised contrastive temperature
    double tau_c = 0.1;     // supervised contrastive temperature
    double tau_s = 0.1;     // student (sharp) classifier temperature
    double tau_t = 0.07;    // teacher classifier temperature (scheduled)

    void validate() const;  // all positive, lambda in (0,1)
};

// Per-old-class running accuracy a_y = correct/total within the epoch;
// a_y = 1.0 before any observation.
class ClassStats {
public:
    explicit ClassStats(std::size_t num_old_classes);
    void reset();
    void update(std::span<const int> predictions, std::span<const int> labels);
    double accuracy(int cls) const;
    std::size_t correct(int cls) const { return correct_.at(cls); }
    std::size_t total(int cls) const { return total_.at(cls); }
    std::size_t num_classes() const { return correct_.size(); }

private:
    std::vector<std::size_t> correct_, total_;
};

// Self-supervised contrastive loss over the whole batch: both view matrices
// must be row-L2-normalized (deviation above 1e-6 is rejected). The
// denominator for anchor i runs over every first-view vector, i included.
Tensor loss_rep_self(const Tensor& z_hat, const Tensor& z_tilde, double tau_u);

struct SupConResult {
    Tensor value;
    bool degenerate = false;  // no positive pair available; value is 0
};

// Supervised contrastive loss on the labeled sub-batch, both views pooled
// (2m anchors). Positives are same-label pool entries other than the anchor;
// the anchor is excluded from its own denominator.
SupConResult loss_rep_sup(const Tensor& z_hat_l, const Tensor& z_tilde_l,
                          std::span<const int> labels, double tau_c);

// (1-lambda) * self + lambda * sup
Tensor loss_rep(const Tensor& l_self, const Tensor& l_sup, double lambda);

// Classifier loss: one-hot CE on the labeled rows of the student view plus
// soft CE against the detached teacher view, minus eps_ent * H(mean batch
// prediction). teacher_probs is detached internally.
Tensor loss_cls(const HeadOutput& student, const Tensor& teacher_probs,
                std::span<const std::size_t> labeled_rows,
                std::span<const int> labels, double lambda, double eps_ent);

// Adversarial loss: alpha * mean CE(aux, detached main soft target) on
// labeled rows minus mean CE(aux, pseudo one-hot) on unlabeled rows. Either
// term vanishes with its row set.
Tensor loss_ad(const HeadOutput& aux, const Tensor& main_probs,
               const Tensor& pseudo_targets,
               std::span<const std::size_t> labeled_rows,
               std::span<const std::size_t> unlabeled_rows, double alpha);

// Confusing-sample mining: per-sample CE weighted by
// (1 - e_t) + e_t / (a_y + eps_bal). e_t = 0 reduces to plain CE (bitwise).
Tensor loss_bal(const Tensor& probs_labeled, std::span<const int> labels,
                const ClassStats& stats, double e_t, double eps_bal);

// Within/between scatter ratio plus beta * mean per-class (max - min)
// squared distance to the class mean, over labeled features.
Tensor loss_cluster(const Tensor& feats_labeled, std::span<const int> labels,
                    double beta, double eps_wb);

// rep + cls + lambda_a*ad + lambda_b*bal + [epoch >= warmup]*lambda_c*cluster.
// cluster may be null; it must be non-null when the gate is open.
Tensor loss_total(const Tensor& rep, const Tensor& cls, const Tensor& ad,
                  const Tensor& bal, const Tensor* cluster,
                  const LossWeights& w, std::size_t epoch, std::size_t warmup);

}  // namespace gface
