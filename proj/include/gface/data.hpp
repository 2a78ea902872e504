#pragma once
// Problem instances: synthetic Gaussian-mixture embeddings or ingested
// precomputed features, split into a labeled set (old classes only) and an
// unlabeled set (old + new classes). Class ids are canonical dense integers
// [0, K) with the old classes occupying [0, N).
//
// Ground-truth labels of unlabeled samples ride along inside the dataset for
// evaluation; batches hand the training loop only the labeled sub-batch's
// labels.

#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace gface {

enum class SplitTag : std::uint8_t { kLabeled, kUnlabeled };

struct Sample {
    std::size_t id = 0;
    std::vector<double> features;
    int true_class = -1;  // evaluation-only for unlabeled samples
    SplitTag split = SplitTag::kUnlabeled;
};

struct AugmentSpec {
    double noise_sigma = 0.1;
    double mask_fraction = 0.1;
    void validate() const;
};

struct OverlapPair {
    int class_a = 0;
    int class_b = 0;
    double strength = 0.0;  // 0 none .. 1 means coincide
};

class SplitDataset {
public:
    // Samples must already be canonical: classes dense in [0,K), old = [0,N),
    // labeled samples old-class only, at least one unlabeled sample.
    static SplitDataset create(std::vector<Sample> samples, std::size_t old_classes,
                               std::size_t total_classes);

    const std::vector<Sample>& samples() const { return samples_; }
    std::size_t size() const { return samples_.size(); }
    std::size_t K() const { return total_classes_; }
    std::size_t old_count() const { return old_classes_; }
    std::size_t new_count() const { return total_classes_ - old_classes_; }
    std::size_t dim() const { return samples_.empty() ? 0 : samples_[0].features.size(); }

    // empirical fraction of old-class samples within the unlabeled set,
    // recomputed on every call
    double theta() const;

    std::vector<std::size_t> labeled_indices() const;
    std::vector<std::size_t> unlabeled_indices() const;

private:
    SplitDataset() = default;
    std::vector<Sample> samples_;
    std::size_t old_classes_ = 0;
    std::size_t total_classes_ = 0;
};

struct SyntheticSpec {
    std::size_t K = 7;
    std::size_t N = 4;
    std::size_t d = 16;
    std::vector<std::size_t> per_class_counts;  // K entries, all positive
    double class_separation = 4.0;
    double within_class_sigma = 1.0;
    std::vector<OverlapPair> overlap_pairs;
    double labeled_fraction = 0.5;
};

SplitDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

// Tags floor(labeled_fraction * count) samples of every old class as labeled
// (seeded, stratified per class) and remaps class ids to canonical order.
// true_class on the incoming samples is the raw (unmapped) id.
SplitDataset make_gface_split(std::vector<Sample> samples,
                              const std::set<int>& old_classes,
                              double labeled_fraction, std::uint64_t seed);

// Embedding CSV: header `id,split,class,feat_0,...,feat_{d-1}`, UTF-8, LF.
SplitDataset load_embeddings(const std::string& path);
void save_embeddings(const SplitDataset& ds, const std::string& path);

std::pair<std::vector<double>, std::vector<double>> augment_two_views(
    const Sample& sample, const AugmentSpec& spec, std::uint64_t seed);

struct Batch {
    std::vector<std::size_t> sample_ids;    // indices into dataset.samples()
    std::vector<std::size_t> labeled_rows;  // row positions inside the batch
    std::vector<std::size_t> unlabeled_rows;
    std::vector<int> labels;                // -1 on unlabeled rows
};

// Seeded epoch-level shuffle; the final partial batch is emitted. Batches
// with no labeled member still appear (supervised terms are defined as 0).
std::vector<Batch> make_batches(const SplitDataset& ds, std::size_t batch_size,
                                std::uint64_t seed);

}  // namespace gface
