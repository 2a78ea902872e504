#include "gface/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "gface/kernels.hpp"
#include "gface/rng.hpp"

namespace gface {

namespace {

[[noreturn]] void eval_error(const std::string& msg) {
    throw std::invalid_argument("eval: " + msg);
}

}  // namespace

Assignment hungarian(std::span<const double> cost, std::size_t K) {
    if (K == 0) eval_error("hungarian: empty matrix");
    if (cost.size() != K * K) {
        eval_error("hungarian: need a square K x K matrix, got " +
                   std::to_string(cost.size()) + " entries for K=" + std::to_string(K));
    }
    for (double v : cost) {
        if (!std::isfinite(v)) eval_error("hungarian: non-finite cost entry");
    }

    // Kuhn-Munkres with row/column potentials, one augmenting row at a time.
    const std::size_t n = K;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);  // match[col] = row (1-based)

    for (std::size_t i = 1; i <= n; ++i) {
        match[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = match[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    Assignment out;
    out.cluster_to_class.assign(n, 0);
    for (std::size_t j = 1; j <= n; ++j) out.cluster_to_class[match[j] - 1] = j - 1;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += cost[i * n + out.cluster_to_class[i]];
    out.cost = total;
    return out;
}

namespace {

std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

std::vector<std::size_t> best_matching(std::span<const std::size_t> counts, std::size_t K) {
    // Maximize matches == minimize negated co-occurrence counts. Ties between
    // optimal matchings are broken by a key derived from each cluster's count
    // profile (not its index), so the report is invariant under relabeling of
    // the predicted cluster ids.
    const double eps = 1.0 / (4.0 * static_cast<double>(K));
    std::vector<double> neg(K * K);
    for (std::size_t i = 0; i < K; ++i) {
        std::uint64_t h = 0x9e3779b97f4a7c15ull;
        for (std::size_t k = 0; k < K; ++k) h = mix64(h ^ (counts[i * K + k] + 1));
        for (std::size_t k = 0; k < K; ++k) {
            const double key =
                static_cast<double>(mix64(h ^ (k + 1)) >> 11) * 0x1.0p-53;
            neg[i * K + k] = -static_cast<double>(counts[i * K + k]) + eps * key;
        }
    }
    return hungarian(neg, K).cluster_to_class;
}

}  // namespace

AccReport cluster_acc(std::span<const int> predicted, std::span<const int> truth,
                      std::size_t K, std::size_t old_classes,
                      bool per_subset_matching) {
    if (predicted.empty()) eval_error("cluster_acc: empty input");
    if (predicted.size() != truth.size()) {
        eval_error("cluster_acc: prediction/truth length mismatch");
    }
    if (old_classes == 0 || old_classes > K) eval_error("cluster_acc: bad old-class count");
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (predicted[i] < 0 || static_cast<std::size_t>(predicted[i]) >= K) {
            eval_error("cluster_acc: cluster id out of range at index " + std::to_string(i));
        }
        if (truth[i] < 0 || static_cast<std::size_t>(truth[i]) >= K) {
            eval_error("cluster_acc: class id out of range at index " + std::to_string(i));
        }
    }

    AccReport rep;
    rep.confusion.assign(K * K, 0);
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        ++rep.confusion[static_cast<std::size_t>(predicted[i]) * K + truth[i]];
    }
    rep.assignment = best_matching(rep.confusion, K);

    auto subset_acc = [&](const std::vector<std::size_t>& q, bool want_old) {
        std::size_t n = 0, hit = 0;
        for (std::size_t i = 0; i < predicted.size(); ++i) {
            const bool is_old = static_cast<std::size_t>(truth[i]) < old_classes;
            if (is_old != want_old) continue;
            ++n;
            if (q[predicted[i]] == static_cast<std::size_t>(truth[i])) ++hit;
        }
        return std::pair<std::size_t, std::size_t>(hit, n);
    };

    std::size_t hits = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (rep.assignment[predicted[i]] == static_cast<std::size_t>(truth[i])) ++hits;
    }
    rep.n_all = predicted.size();
    rep.acc_all = static_cast<double>(hits) / static_cast<double>(rep.n_all);

    if (!per_subset_matching) {
        auto [old_hit, old_n] = subset_acc(rep.assignment, true);
        auto [new_hit, new_n] = subset_acc(rep.assignment, false);
        rep.n_old = old_n;
        rep.n_new = new_n;
        rep.acc_old = old_n ? static_cast<double>(old_hit) / old_n : 0.0;
        rep.acc_new = new_n ? static_cast<double>(new_hit) / new_n : 0.0;
    } else {
        // independent matching per subset; acc_all keeps the global matching
        for (int pass = 0; pass < 2; ++pass) {
            const bool want_old = pass == 0;
            std::vector<std::size_t> counts(K * K, 0);
            std::size_t n = 0;
            for (std::size_t i = 0; i < predicted.size(); ++i) {
                const bool is_old = static_cast<std::size_t>(truth[i]) < old_classes;
                if (is_old != want_old) continue;
                ++counts[static_cast<std::size_t>(predicted[i]) * K + truth[i]];
                ++n;
            }
            double acc = 0.0;
            if (n > 0) {
                auto q = best_matching(counts, K);
                std::size_t hit = 0;
                for (std::size_t i = 0; i < predicted.size(); ++i) {
                    const bool is_old = static_cast<std::size_t>(truth[i]) < old_classes;
                    if (is_old != want_old) continue;
                    if (q[predicted[i]] == static_cast<std::size_t>(truth[i])) ++hit;
                }
                acc = static_cast<double>(hit) / n;
            }
            if (want_old) {
                rep.acc_old = acc;
                rep.n_old = n;
            } else {
                rep.acc_new = acc;
                rep.n_new = n;
            }
        }
    }
    return rep;
}

std::vector<int> kmeans(std::span<const double> features, std::size_t count,
                        std::size_t dim, std::size_t K, std::uint64_t seed,
                        std::size_t max_iters) {
    if (K == 0 || K > count) eval_error("kmeans: need 1 <= K <= sample count");
    if (features.size() != count * dim) eval_error("kmeans: feature buffer size mismatch");
    const auto& ker = kernels::active();
    Rng rng(derive_seed(seed, 0x4a3a));

    auto sq_dist = [&](const double* a, const double* b) {
        double acc = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
            const double diff = a[j] - b[j];
            acc += diff * diff;
        }
        return acc;
    };

    // greedy distance-weighted seeding: first center uniform, then sample
    // proportional to squared distance from the nearest chosen center
    std::vector<double> centers(K * dim);
    std::vector<double> min_d2(count, std::numeric_limits<double>::infinity());
    std::size_t first = rng.below(count);
    std::copy_n(features.data() + first * dim, dim, centers.begin());
    for (std::size_t c = 1; c < K; ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < count; ++i) {
            const double d2 = sq_dist(features.data() + i * dim,
                                      centers.data() + (c - 1) * dim);
            min_d2[i] = std::min(min_d2[i], d2);
            total += min_d2[i];
        }
        std::size_t pick = 0;
        if (total > 0.0) {
            double r = rng.uniform() * total;
            for (std::size_t i = 0; i < count; ++i) {
                r -= min_d2[i];
                if (r <= 0.0) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = rng.below(count);
        }
        std::copy_n(features.data() + pick * dim, dim, centers.begin() + c * dim);
    }

    std::vector<int> assign(count, -1);
    std::vector<double> sums(K * dim);
    std::vector<std::size_t> sizes(K);
    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < count; ++i) {
            std::size_t best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < K; ++c) {
                const double d = sq_dist(features.data() + i * dim, centers.data() + c * dim);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            if (assign[i] != static_cast<int>(best)) {
                assign[i] = static_cast<int>(best);
                changed = true;
            }
        }
        if (!changed) break;

        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(sizes.begin(), sizes.end(), 0);
        for (std::size_t i = 0; i < count; ++i) {
            ker.axpy(sums.data() + assign[i] * dim, 1.0, features.data() + i * dim, dim);
            ++sizes[assign[i]];
        }
        for (std::size_t c = 0; c < K; ++c) {
            if (sizes[c] > 0) {
                ker.scale(sums.data() + c * dim, 1.0 / static_cast<double>(sizes[c]),
                          centers.data() + c * dim, dim);
            } else {
                // re-seed an empty cluster from the point farthest from its center
                std::size_t far = 0;
                double far_d = -1.0;
                for (std::size_t i = 0; i < count; ++i) {
                    const double d = sq_dist(features.data() + i * dim,
                                             centers.data() + assign[i] * dim);
                    if (d > far_d) {
                        far_d = d;
                        far = i;
                    }
                }
                std::copy_n(features.data() + far * dim, dim, centers.begin() + c * dim);
            }
        }
    }
    return assign;
}

}  // namespace gface
