#include "gface/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "gface/kernels.hpp"

namespace gface {

namespace {

[[noreturn]] void loss_error(const std::string& msg) {
    throw std::invalid_argument("losses: " + msg);
}

void check_positive(const char* name, double v) {
    if (!(v > 0.0) || !std::isfinite(v)) {
        loss_error(std::string(name) + " must be positive, got " + std::to_string(v));
    }
}

void check_normalized_rows(const char* who, const Tensor& z) {
    const auto& ker = kernels::active();
    const std::size_t r = z.rows(), c = z.cols();
    for (std::size_t i = 0; i < r; ++i) {
        const double norm = std::sqrt(ker.sqsum(z.value().data() + i * c, c));
        if (std::abs(norm - 1.0) > 1e-6) {
            loss_error(std::string(who) + ": row " + std::to_string(i) +
                       " is not L2-normalized (norm " + std::to_string(norm) + ")");
        }
    }
}

// [r,1] tensor of row sums
Tensor row_sums(const Tensor& m) {
    return matmul(m, ones(m.trace(), {m.cols(), 1}));
}

Tensor identity_mask(Trace& tr, std::size_t n) {
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
    return tr.constant({n, n}, std::move(v));
}

}  // namespace

namespace {

void check_nonneg(const char* name, double v) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
        loss_error(std::string(name) + " must be finite and >= 0, got " +
                   std::to_string(v));
    }
}

}  // namespace

void LossWeights::validate() const {
    check_positive("lambda", lambda);
    if (!(lambda < 1.0)) loss_error("lambda must be in (0,1)");
    // zero is allowed on the three debias weights so ablations can switch
    // whole branches off
    check_nonneg("lambda_a", lambda_a);
    check_nonneg("lambda_b", lambda_b);
    check_nonneg("lambda_c", lambda_c);
    check_positive("alpha", alpha);
    check_positive("beta", beta);
    check_positive("eps_bal", eps_bal);
    check_positive("eps_wb", eps_wb);
    check_positive("eps_ent", eps_ent);
    check_positive("tau_u", tau_u);
    check_positive("tau_c", tau_c);
    check_positive("tau_s", tau_s);
    check_positive("tau_t", tau_t);
}

ClassStats::ClassStats(std::size_t num_old_classes)
    : correct_(num_old_classes, 0), total_(num_old_classes, 0) {}

void ClassStats::reset() {
    std::fill(correct_.begin(), correct_.end(), 0);
    std::fill(total_.begin(), total_.end(), 0);
}

void ClassStats::update(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size()) {
        loss_error("class stats: prediction/label count mismatch");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto y = static_cast<std::size_t>(labels[i]);
        if (y >= total_.size()) loss_error("class stats: label outside old classes");
        ++total_[y];
        if (predictions[i] == labels[i]) ++correct_[y];
    }
}

double ClassStats::accuracy(int cls) const {
    const auto y = static_cast<std::size_t>(cls);
    if (y >= total_.size()) loss_error("class stats: label outside old classes");
    if (total_[y] == 0) return 1.0;
    return static_cast<double>(correct_[y]) / static_cast<double>(total_[y]);
}

Tensor loss_rep_self(const Tensor& z_hat, const Tensor& z_tilde, double tau_u) {
    check_positive("tau_u", tau_u);
    if (z_hat.rows() != z_tilde.rows() || z_hat.cols() != z_tilde.cols()) {
        loss_error("rep_self: view shape mismatch");
    }
    check_normalized_rows("rep_self", z_hat);
    check_normalized_rows("rep_self", z_tilde);
    Trace& tr = z_hat.trace();
    const std::size_t b = z_hat.rows();

    // S_ki = zhat_k . ztilde_i / tau; anchor i sums exp(S_ki) over column i
    Tensor sims = scale(matmul_nt(z_hat, z_tilde), 1.0 / tau_u);
    Tensor col_sums = matmul(ones(tr, {1, b}), exponent(sims));        // [1,b]
    Tensor diag = matmul(ones(tr, {1, b}), multiply(sims, identity_mask(tr, b)));
    return mean(subtract(natural_log(col_sums), diag));
}

SupConResult loss_rep_sup(const Tensor& z_hat_l, const Tensor& z_tilde_l,
                          std::span<const int> labels, double tau_c) {
    check_positive("tau_c", tau_c);
    Trace& tr = z_hat_l.trace();
    const std::size_t m = labels.size();
    if (z_hat_l.rows() != m || z_tilde_l.rows() != m) {
        loss_error("rep_sup: label count does not match view rows");
    }
    // fewer than two labeled samples means no cross-sample pool; by contract
    // the loss is 0 with the degenerate flag raised
    if (m <= 1) return {tr.scalar(0.0), true};
    check_normalized_rows("rep_sup", z_hat_l);
    check_normalized_rows("rep_sup", z_tilde_l);

    const std::size_t pool = 2 * m;
    Tensor z = concat_rows({z_hat_l, z_tilde_l});
    Tensor sims = scale(matmul_nt(z, z), 1.0 / tau_c);  // [pool,pool]
    Tensor e = exponent(sims);

    // anchor-excluded denominator: row sum minus the diagonal entry
    Tensor eye = identity_mask(tr, pool);
    Tensor denom = subtract(row_sums(e), row_sums(multiply(e, eye)));  // [pool,1]
    Tensor log_denom = natural_log(denom);

    // positives mask (same label, not self) and per-anchor positive counts
    std::vector<double> mask(pool * pool, 0.0);
    std::vector<double> inv_count(pool, 0.0), valid(pool, 0.0);
    auto label_of = [&](std::size_t i) { return labels[i % m]; };
    std::size_t n_valid = 0;
    for (std::size_t i = 0; i < pool; ++i) {
        std::size_t count = 0;
        for (std::size_t p = 0; p < pool; ++p) {
            if (p != i && label_of(p) == label_of(i)) {
                mask[i * pool + p] = 1.0;
                ++count;
            }
        }
        if (count > 0) {
            inv_count[i] = 1.0 / static_cast<double>(count);
            valid[i] = 1.0;
            ++n_valid;
        }
    }
    if (n_valid == 0) return {tr.scalar(0.0), true};

    Tensor pos_sums = row_sums(multiply(sims, tr.constant({pool, pool}, std::move(mask))));
    Tensor weighted_pos = multiply(pos_sums, tr.constant({pool, 1}, std::move(inv_count)));
    Tensor gated_denom = multiply(log_denom, tr.constant({pool, 1}, std::move(valid)));
    return {scale(sum(subtract(gated_denom, weighted_pos)),
                  1.0 / static_cast<double>(n_valid)),
            false};
}

Tensor loss_rep(const Tensor& l_self, const Tensor& l_sup, double lambda) {
    return add(scale(l_self, 1.0 - lambda), scale(l_sup, lambda));
}

Tensor loss_cls(const HeadOutput& student, const Tensor& teacher_probs,
                std::span<const std::size_t> labeled_rows,
                std::span<const int> labels, double lambda, double eps_ent) {
    check_positive("eps_ent", eps_ent);
    if (labeled_rows.size() != labels.size()) {
        loss_error("cls: labeled row/label count mismatch");
    }
    Trace& tr = student.probs.trace();
    const std::size_t b = student.probs.rows();
    Tensor teacher = detach(teacher_probs);

    Tensor sup = labeled_rows.empty()
                     ? tr.scalar(0.0)
                     : cross_entropy(gather_rows(student.probs, labeled_rows), labels);

    Tensor unsup = cross_entropy(student.probs, teacher);
    // mean prediction over both views, H = -sum p log p
    Tensor pbar = scale(matmul(ones(tr, {1, b}), add(student.probs, teacher)),
                        1.0 / (2.0 * static_cast<double>(b)));
    Tensor entropy = scale(sum(multiply(pbar, natural_log(pbar))), -1.0);
    Tensor unsup_total = subtract(unsup, scale(entropy, eps_ent));

    return add(scale(unsup_total, 1.0 - lambda), scale(sup, lambda));
}

Tensor loss_ad(const HeadOutput& aux, const Tensor& main_probs,
               const Tensor& pseudo_targets,
               std::span<const std::size_t> labeled_rows,
               std::span<const std::size_t> unlabeled_rows, double alpha) {
    check_positive("alpha", alpha);
    Trace& tr = aux.probs.trace();
    Tensor result = tr.scalar(0.0);
    if (!labeled_rows.empty()) {
        Tensor target = gather_rows(detach(main_probs), labeled_rows);
        Tensor ce = cross_entropy(gather_rows(aux.probs, labeled_rows), target);
        result = add(result, scale(ce, alpha));
    }
    if (!unlabeled_rows.empty()) {
        Tensor ce = cross_entropy(gather_rows(aux.probs, unlabeled_rows),
                                  gather_rows(pseudo_targets, unlabeled_rows));
        result = subtract(result, ce);
    }
    return result;
}

Tensor loss_bal(const Tensor& probs_labeled, std::span<const int> labels,
                const ClassStats& stats, double e_t, double eps_bal) {
    if (!(e_t >= 0.0 && e_t <= 0.1)) loss_error("bal: e_t must be in [0, 0.1]");
    check_positive("eps_bal", eps_bal);
    if (probs_labeled.rows() != labels.size()) {
        loss_error("bal: label count does not match rows");
    }
    if (e_t == 0.0) return cross_entropy(probs_labeled, labels);

    Trace& tr = probs_labeled.trace();
    const std::size_t m = labels.size(), k = probs_labeled.cols();
    std::vector<double> weights(m);
    for (std::size_t i = 0; i < m; ++i) {
        weights[i] = (1.0 - e_t) + e_t / (stats.accuracy(labels[i]) + eps_bal);
    }
    Tensor picked = row_sums(multiply(probs_labeled, one_hot(tr, labels, k)));  // [m,1]
    Tensor per_row_ce = scale(natural_log(picked), -1.0);
    return mean(multiply(per_row_ce, tr.constant({m, 1}, std::move(weights))));
}

Tensor loss_cluster(const Tensor& feats_labeled, std::span<const int> labels,
                    double beta, double eps_wb) {
    check_positive("beta", beta);
    check_positive("eps_wb", eps_wb);
    const std::size_t m = feats_labeled.rows();
    if (m == 0 || labels.size() != m) {
        loss_error("cluster: need a nonempty labeled batch with matching labels");
    }
    Trace& tr = feats_labeled.trace();

    int max_label = 0;
    for (int y : labels) {
        if (y < 0) loss_error("cluster: negative label");
        max_label = std::max(max_label, y);
    }
    std::vector<std::size_t> class_count(max_label + 1, 0);
    for (int y : labels) ++class_count[y];
    std::vector<int> present;
    for (int c = 0; c <= max_label; ++c) {
        if (class_count[c] > 0) present.push_back(c);
    }
    const std::size_t n_classes = present.size();

    // per-sample class mean via a constant averaging matrix
    std::vector<double> avg(m * m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            if (labels[i] == labels[j]) {
                avg[i * m + j] = 1.0 / static_cast<double>(class_count[labels[i]]);
            }
        }
    }
    Tensor centered =
        subtract(feats_labeled, matmul(tr.constant({m, m}, std::move(avg)), feats_labeled));
    Tensor within = squared_norm(centered);

    // between-class scatter: sum_c n_c ||mu_c - mu_g||^2
    std::vector<double> class_avg(n_classes * m, 0.0), global_avg(m, 1.0 / m);
    std::vector<double> counts(n_classes);
    for (std::size_t c = 0; c < n_classes; ++c) {
        counts[c] = static_cast<double>(class_count[present[c]]);
        for (std::size_t j = 0; j < m; ++j) {
            if (labels[j] == present[c]) {
                class_avg[c * m + j] = 1.0 / counts[c];
            }
        }
    }
    Tensor mu_c = matmul(tr.constant({n_classes, m}, std::move(class_avg)), feats_labeled);
    Tensor mu_g = matmul(tr.constant({1, m}, std::move(global_avg)), feats_labeled);
    Tensor diff = subtract(mu_c, matmul(ones(tr, {n_classes, 1}), mu_g));
    Tensor between = sum(multiply(row_sums(multiply(diff, diff)),
                                  tr.constant({n_classes, 1}, std::move(counts))));
    Tensor wb = divide(within, add(between, tr.scalar(eps_wb)));

    // max-min compactness over per-sample squared distances to the class mean
    Tensor sq_dist = row_sums(multiply(centered, centered));  // [m,1]
    Tensor mm_sum = tr.scalar(0.0);
    for (std::size_t c = 0; c < n_classes; ++c) {
        std::vector<std::uint32_t> mask(m, 0);
        for (std::size_t j = 0; j < m; ++j) mask[j] = labels[j] == present[c] ? 1 : 0;
        mm_sum = add(mm_sum, subtract(max_masked(sq_dist, mask), min_masked(sq_dist, mask)));
    }
    Tensor mm = scale(mm_sum, 1.0 / static_cast<double>(n_classes));

    return add(wb, scale(mm, beta));
}

Tensor loss_total(const Tensor& rep, const Tensor& cls, const Tensor& ad,
                  const Tensor& bal, const Tensor* cluster,
                  const LossWeights& w, std::size_t epoch, std::size_t warmup) {
    Tensor total = add(add(rep, cls), add(scale(ad, w.lambda_a), scale(bal, w.lambda_b)));
    if (epoch >= warmup) {
        if (cluster == nullptr || !cluster->defined()) {
            loss_error("total: cluster term required once the warmup gate is open");
        }
        total = add(total, scale(*cluster, w.lambda_c));
    }
    return total;
}

}  // namespace gface
