#pragma once
// Cluster-accuracy evaluation: optimal cluster-to-class assignment via the
// Hungarian algorithm on the co-occurrence matrix, All/Old/New accuracy
// split, and a k-means baseline.

#include <cstdint>
#include <span>
#include <vector>

namespace gface {

struct Assignment {
    std::vector<std::size_t> cluster_to_class;  // bijection on [0,K)
    double cost = 0.0;
};

// Minimum-cost perfect assignment on a square finite matrix, O(K^3)
// (Kuhn-Munkres with potentials). cost is row-major K x K.
Assignment hungarian(std::span<const double> cost, std::size_t K);

struct AccReport {
    double acc_all = 0.0;
    double acc_old = 0.0;
    double acc_new = 0.0;  // 0 when no new-class samples are present
    std::size_t n_all = 0, n_old = 0, n_new = 0;
    std::vector<std::size_t> assignment;  // cluster id -> class id
    std::vector<std::size_t> confusion;   // K x K co-occurrence, row = cluster
};

// One global matching over all samples; Old/New restrict the matched
// predictions by the true class. per_subset_matching recomputes a separate
// matching inside each subset instead (sensitivity analysis only).
AccReport cluster_acc(std::span<const int> predicted, std::span<const int> truth,
                      std::size_t K, std::size_t old_classes,
                      bool per_subset_matching = false);

// Lloyd iterations from a seeded greedy distance-weighted initialization;
// empty clusters are re-seeded from the farthest point. Returns cluster ids.
std::vector<int> kmeans(std::span<const double> features, std::size_t count,
                        std::size_t dim, std::size_t K, std::uint64_t seed,
                        std::size_t max_iters = 100);

}  // namespace gface
