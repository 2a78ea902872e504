#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gface/rng.hpp"
#include "gface/theory.hpp"
#include "testutil.hpp"

using namespace gface;

namespace {

SplitDataset small_instance(std::uint64_t seed, double separation = 6.0) {
    SyntheticSpec spec;
    spec.K = 4;
    spec.N = 2;
    spec.d = 6;
    spec.per_class_counts = {30, 30, 30, 30};
    spec.class_separation = separation;
    return generate_synthetic(spec, seed);
}

// classifies by the nearest class mean of the generating mixture; on a
// well-separated instance this is (near) perfect and fully confident
Hypothesis nearest_mean_hypothesis(const SplitDataset& ds, std::string id) {
    const std::size_t k = ds.K(), d = ds.dim();
    std::vector<double> means(k * d, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (const Sample& s : ds.samples()) {
        ++counts[s.true_class];
        for (std::size_t j = 0; j < d; ++j) means[s.true_class * d + j] += s.features[j];
    }
    for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t j = 0; j < d; ++j) means[c * d + j] /= counts[c];
    }
    Hypothesis h;
    h.id = std::move(id);
    h.K = k;
    h.predict_batch = [means, k, d](std::span<const double> feats, std::size_t count,
                                    std::size_t dim) {
        std::vector<double> out(count * k, 0.0);
        for (std::size_t i = 0; i < count; ++i) {
            std::size_t best = 0;
            double best_d = 1e300;
            for (std::size_t c = 0; c < k; ++c) {
                double acc = 0.0;
                for (std::size_t j = 0; j < dim; ++j) {
                    const double diff = feats[i * dim + j] - means[c * d + j];
                    acc += diff * diff;
                }
                if (acc < best_d) {
                    best_d = acc;
                    best = c;
                }
            }
            out[i * k + best] = 1.0;
        }
        return out;
    };
    return h;
}

}  // namespace

TEST_CASE("pointwise discrepancy basics") {
    const std::vector<double> p{1.0, 0.0}, q{0.0, 1.0};
    CHECK(xi_pointwise(p, p) == 0.0);
    CHECK(xi_pointwise(p, q) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));

    const std::vector<double> bad{0.7, 0.7};
    CHECK_THROWS_AS((void)xi_pointwise(p, bad), std::invalid_argument);
}

TEST_CASE("pointwise discrepancy is symmetric on random pairs") {
    Rng rng(41);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t k = 2 + rng.below(7);
        const auto p = testutil::random_stochastic_rows(rng, 1, k);
        const auto q = testutil::random_stochastic_rows(rng, 1, k);
        CHECK(xi_pointwise(p, q) == xi_pointwise(q, p));
    }
}

TEST_CASE("dataset discrepancy equals the hand-rolled mean of distances") {
    const SplitDataset ds = small_instance(5);
    const ModelParams mp = init_model(ds.dim(), 8, 4, 6, ds.K(), 3);
    const Hypothesis h = make_model_hypothesis(mp, 0.1, "H");
    const Hypothesis g = nearest_mean_hypothesis(ds, "G");

    auto indices = ds.unlabeled_indices();
    indices.resize(10);
    const double got = xi_dataset(h, g, ds, indices);

    double want = 0.0;
    for (std::size_t idx : indices) {
        const Sample& s = ds.samples()[idx];
        const auto ph = h.predict_batch(s.features, 1, ds.dim());
        const auto pg = g.predict_batch(s.features, 1, ds.dim());
        double acc = 0.0;
        for (std::size_t j = 0; j < ds.K(); ++j) {
            acc += (ph[j] - pg[j]) * (ph[j] - pg[j]);
        }
        want += std::sqrt(acc);
    }
    want /= static_cast<double>(indices.size());
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("hypotheses agree with themselves and perfect predictors score zero") {
    const SplitDataset ds = small_instance(7, 12.0);
    const Hypothesis g = nearest_mean_hypothesis(ds, "G");
    CHECK(xi_dataset(g, g, ds, ds.unlabeled_indices()) == 0.0);
    // fully separated: nearest-mean is the truth
    CHECK(xi_dataset_truth(g, ds, ds.unlabeled_indices()) ==
          doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("mixture decomposition residual stays under 1e-12 on 100 random trials") {
    Rng rng(42);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const SplitDataset ds = small_instance(900 + trial, 2.0 + 6.0 * rng.uniform());
        const ModelParams mp =
            init_model(ds.dim(), 8, 4, 6, ds.K(), derive_seed(43, trial));
        const Hypothesis h = make_model_hypothesis(mp, 0.1, "H");
        const DecomposeResult r = decompose_check(h, ds);
        worst = std::max(worst, r.residual);
        CHECK(r.residual <= 1e-12);
        CHECK(r.theta == doctest::Approx(ds.theta()).epsilon(1e-15));
    }
    MESSAGE("worst decomposition residual: ", worst);
}

TEST_CASE("an all-old unlabeled set gives theta 1 and xi_u == xi_old") {
    // class 1 exists in the partition but contributes no samples, so the
    // unlabeled set is old-only; built directly since the split constructor
    // requires new-class samples
    std::vector<Sample> samples;
    Rng rng(44);
    for (int i = 0; i < 6; ++i) {
        Sample s;
        s.id = static_cast<std::size_t>(i);
        s.features = {rng.normal(), rng.normal()};
        s.true_class = 0;
        s.split = i < 3 ? SplitTag::kLabeled : SplitTag::kUnlabeled;
        samples.push_back(s);
    }
    const SplitDataset all_old = SplitDataset::create(samples, 1, 2);
    const ModelParams mp = init_model(2, 4, 3, 4, 2, 4);
    const Hypothesis h = make_model_hypothesis(mp, 0.1, "H");
    const DecomposeResult r = decompose_check(h, all_old);
    CHECK(r.theta == 1.0);
    CHECK(r.xi_u == doctest::Approx(r.xi_old).epsilon(1e-15));
    CHECK(r.residual <= 1e-12);

    // with one unlabeled new-class sample present, theta drops accordingly
    samples.push_back({6, {5.0, 5.0}, 1, SplitTag::kUnlabeled});
    const SplitDataset mixed = SplitDataset::create(samples, 1, 2);
    const DecomposeResult r2 = decompose_check(h, mixed);
    CHECK(r2.theta == doctest::Approx(0.75));
    CHECK(r2.residual <= 1e-12);
}

TEST_CASE("f-discrepancy: singleton family is zero, pairs match enumeration") {
    const SplitDataset ds = small_instance(9);
    const ModelParams a = init_model(ds.dim(), 8, 4, 6, ds.K(), 11);
    const ModelParams b = init_model(ds.dim(), 8, 4, 6, ds.K(), 12);
    const Hypothesis ha = make_model_hypothesis(a, 0.1, "A");
    const Hypothesis hb = make_model_hypothesis(b, 0.1, "B");

    const std::vector<Hypothesis> solo{ha};
    CHECK(f_discrepancy(solo, ds, 2.0) == 0.0);

    const std::vector<Hypothesis> pair{ha, hb};
    const double got = f_discrepancy(pair, ds, 2.0);
    // independent recomputation over the four ordered pairs
    const auto lab = ds.labeled_indices();
    const auto unlab = ds.unlabeled_indices();
    double want = 0.0;
    for (const Hypothesis* x : {&ha, &hb}) {
        for (const Hypothesis* y : {&ha, &hb}) {
            const double v =
                std::abs(xi_dataset(*x, *y, ds, unlab) - 2.0 * xi_dataset(*x, *y, ds, lab));
            want = std::max(want, v);
        }
    }
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("f-discrepancy never decreases when the family grows") {
    const SplitDataset ds = small_instance(10);
    const ModelParams h = init_model(ds.dim(), 8, 4, 6, ds.K(), 21);
    const ModelParams h_star = init_model(ds.dim(), 8, 4, 6, ds.K(), 22);
    double prev = -1.0;
    for (std::size_t n_perturb : {0ul, 2ul, 4ul, 8ul}) {
        const auto family = make_hypothesis_family(h, h_star, n_perturb, 0.05, 0.1, 5);
        const double delta = f_discrepancy(family, ds, 2.0);
        CHECK(delta >= prev);
        prev = delta;
    }
}

TEST_CASE("metric properties hold at 1e-9 and the squared control fails") {
    const MetricPropsReport rep = metric_properties_test(7, 10000);
    CHECK(rep.pass);
    CHECK(rep.nonneg_violations == 0);
    CHECK(rep.symmetry_violations == 0);
    CHECK(rep.triangle_violations == 0);
    CHECK(rep.control_triangle_violations > 0);
}

TEST_CASE("bias bound: perfect predictors give lhs 0 and a nonnegative rhs") {
    const SplitDataset ds = small_instance(13, 14.0);
    const Hypothesis perfect = nearest_mean_hypothesis(ds, "H");
    Hypothesis perfect_star = nearest_mean_hypothesis(ds, "H*");
    const std::vector<Hypothesis> family{perfect, perfect_star};
    const BoundReport r = check_bias_bound(perfect, perfect_star, family, ds, 2.0);
    CHECK(r.lhs == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r.rhs >= 0.0);
    CHECK(r.bound_holds);
    CHECK(r.coefficient_positive);
    CHECK(r.ordering_assumption_holds);
}

TEST_CASE("bias bound rhs matches independent recomposition within 1e-12") {
    const SplitDataset ds = small_instance(17);
    const ModelParams hp = init_model(ds.dim(), 8, 4, 6, ds.K(), 31);
    const ModelParams sp = init_model(ds.dim(), 8, 4, 6, ds.K(), 32);
    const Hypothesis h = make_model_hypothesis(hp, 0.1, "H");
    const Hypothesis h_star = make_model_hypothesis(sp, 0.1, "H*");
    const std::vector<Hypothesis> family{h, h_star};
    const double alpha = 2.0;
    const BoundReport r = check_bias_bound(h, h_star, family, ds, alpha);

    const auto lab = ds.labeled_indices();
    const auto unlab = ds.unlabeled_indices();
    const double delta = f_discrepancy(family, ds, alpha);
    const double lambda_const = alpha * xi_dataset_truth(h_star, ds, lab) +
                                xi_dataset_truth(h_star, ds, unlab);
    const double rhs = ((alpha - r.theta) * xi_dataset_truth(h, ds, lab) + delta +
                        lambda_const) /
                       (1.0 - r.theta);
    CHECK(r.rhs == doctest::Approx(rhs).epsilon(1e-12));
    CHECK(r.delta == doctest::Approx(delta).epsilon(1e-12));
    CHECK(r.lambda_const == doctest::Approx(lambda_const).epsilon(1e-12));
}

TEST_CASE("bias bound holds on seeded trained instances whenever the assumption does") {
    int assumption_held = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const SplitDataset ds = small_instance(100 + seed, 4.0);
        const ModelParams h_params = init_model(ds.dim(), 8, 4, 6, ds.K(), seed);
        const ModelParams star_params =
            train_reference_supervised(ds, 8, 4, 6, 6, 32, 0.05, 0.1, seed + 50);
        const auto family =
            make_hypothesis_family(h_params, star_params, 4, 0.05, 0.1, seed);
        const BoundReport r = check_bias_bound(family[0], family[1], family, ds, 2.0);
        if (r.ordering_assumption_holds && r.coefficient_positive) {
            ++assumption_held;
            CHECK(r.bound_holds);
            CHECK(r.margin >= 0.0);
        }
    }
    MESSAGE("assumption held on ", assumption_held, " of 5 trials");
}

TEST_CASE("bound report flags a nonpositive coefficient instead of asserting") {
    const SplitDataset ds = small_instance(23);
    const ModelParams hp = init_model(ds.dim(), 8, 4, 6, ds.K(), 41);
    const Hypothesis h = make_model_hypothesis(hp, 0.1, "H");
    Hypothesis h_star = make_model_hypothesis(hp, 0.1, "H*");
    const std::vector<Hypothesis> family{h, h_star};
    const BoundReport r = check_bias_bound(h, h_star, family, ds, 0.25);
    CHECK_FALSE(r.coefficient_positive);  // theta = 0.5 > alpha = 0.25
}

TEST_CASE("reference training actually fits the fully labeled data") {
    const SplitDataset ds = small_instance(29, 10.0);
    const ModelParams star =
        train_reference_supervised(ds, 8, 4, 6, 12, 32, 0.05, 0.1, 7);
    const Hypothesis h = make_model_hypothesis(star, 0.1, "H*");
    const double err = xi_dataset_truth(h, ds, ds.unlabeled_indices());
    CHECK(err < 0.35);  // near-one-hot on a cleanly separated instance
}

TEST_CASE("bound checker enforces its preconditions") {
    const SplitDataset ds = small_instance(51);
    const ModelParams hp = init_model(ds.dim(), 8, 4, 6, ds.K(), 61);
    const Hypothesis h = make_model_hypothesis(hp, 0.1, "H");
    const Hypothesis h_star = make_model_hypothesis(hp, 0.1, "H*");

    // family must contain both members
    const std::vector<Hypothesis> missing{h};
    CHECK_THROWS_WITH_AS(
        (void)check_bias_bound(h, h_star, missing, ds, 2.0),
        doctest::Contains("family"), std::invalid_argument);

    // an unlabeled set without new-class samples has no bound target
    std::vector<Sample> samples;
    Rng rng(62);
    for (int i = 0; i < 6; ++i) {
        samples.push_back({static_cast<std::size_t>(i),
                           {rng.normal(), rng.normal(), rng.normal(),
                            rng.normal(), rng.normal(), rng.normal()},
                           0,
                           i < 3 ? SplitTag::kLabeled : SplitTag::kUnlabeled});
    }
    const SplitDataset all_old = SplitDataset::create(samples, 1, 2);
    const ModelParams tiny = init_model(6, 4, 3, 4, 2, 63);
    const Hypothesis th = make_model_hypothesis(tiny, 0.1, "H");
    const Hypothesis ts = make_model_hypothesis(tiny, 0.1, "H*");
    const std::vector<Hypothesis> family{th, ts};
    CHECK_THROWS_WITH_AS((void)check_bias_bound(th, ts, family, all_old, 2.0),
                         doctest::Contains("new-class"), std::invalid_argument);
}
