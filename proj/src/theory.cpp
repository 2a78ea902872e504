#include "gface/theory.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "gface/losses.hpp"
#include "gface/rng.hpp"
#include "gface/tensor.hpp"

namespace gface {

namespace {

constexpr double kPi = 3.14159265358979323846;

[[noreturn]] void theory_error(const std::string& msg) {
    throw std::invalid_argument("theory: " + msg);
}

void check_stochastic(std::span<const double> p) {
    double total = 0.0;
    for (double v : p) {
        if (!(v >= -1e-9) || !std::isfinite(v)) {
            theory_error("probability vector has negative or non-finite entry");
        }
        total += v;
    }
    if (std::abs(total - 1.0) > 1e-6) {
        theory_error("probability vector sums to " + std::to_string(total));
    }
}

double euclidean(std::span<const double> p, std::span<const double> q) {
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double d = p[i] - q[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

// features of the selected samples as one row-major block
std::vector<double> gather_features(const SplitDataset& ds,
                                    std::span<const std::size_t> indices) {
    const std::size_t d = ds.dim();
    std::vector<double> out(indices.size() * d);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto& f = ds.samples()[indices[i]].features;
        std::copy(f.begin(), f.end(), out.begin() + i * d);
    }
    return out;
}

std::vector<double> predict_all(const Hypothesis& h, const SplitDataset& ds,
                                std::span<const std::size_t> indices) {
    const auto features = gather_features(ds, indices);
    auto probs = h.predict_batch(features, indices.size(), ds.dim());
    if (probs.size() != indices.size() * h.K) {
        theory_error("hypothesis " + h.id + " returned a bad prediction block");
    }
    for (std::size_t i = 0; i < indices.size(); ++i) {
        check_stochastic(std::span<const double>(probs).subspan(i * h.K, h.K));
    }
    return probs;
}

double mean_row_distance(std::span<const double> a, std::span<const double> b,
                         std::size_t rows, std::size_t k) {
    if (rows == 0) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        acc += euclidean(a.subspan(i * k, k), b.subspan(i * k, k));
    }
    return acc / static_cast<double>(rows);
}

std::vector<double> one_hot_block(const SplitDataset& ds,
                                  std::span<const std::size_t> indices, std::size_t k) {
    std::vector<double> out(indices.size() * k, 0.0);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        out[i * k + ds.samples()[indices[i]].true_class] = 1.0;
    }
    return out;
}

}  // namespace

Hypothesis make_model_hypothesis(ModelParams params, double tau_s, std::string id) {
    Hypothesis h;
    h.id = std::move(id);
    h.K = params.K;
    h.predict_batch = [params = std::move(params), tau_s](
                          std::span<const double> features, std::size_t count,
                          std::size_t dim) {
        if (dim != params.d) {
            theory_error("hypothesis input dim " + std::to_string(dim) +
                         " != model d " + std::to_string(params.d));
        }
        Trace tr;
        BoundModel m = bind_model(tr, params, false);
        Tensor x = tr.constant({count, dim},
                               std::vector<double>(features.begin(), features.end()));
        HeadOutput head = main_logits(m, extract(m, x), tau_s);
        auto v = head.probs.value();
        return std::vector<double>(v.begin(), v.end());
    };
    return h;
}

double xi_pointwise(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size() || p.empty()) {
        theory_error("xi: probability vectors must have equal nonzero length");
    }
    check_stochastic(p);
    check_stochastic(q);
    return euclidean(p, q);
}

double xi_dataset(const Hypothesis& a, const Hypothesis& b, const SplitDataset& ds,
                  std::span<const std::size_t> indices) {
    if (indices.empty()) theory_error("xi_dataset: empty sample selection");
    if (a.K != b.K) theory_error("xi_dataset: hypothesis class counts differ");
    const auto pa = predict_all(a, ds, indices);
    const auto pb = predict_all(b, ds, indices);
    return mean_row_distance(pa, pb, indices.size(), a.K);
}

double xi_dataset_truth(const Hypothesis& a, const SplitDataset& ds,
                        std::span<const std::size_t> indices) {
    if (indices.empty()) theory_error("xi_dataset: empty sample selection");
    const auto pa = predict_all(a, ds, indices);
    const auto truth = one_hot_block(ds, indices, a.K);
    return mean_row_distance(pa, truth, indices.size(), a.K);
}

DecomposeResult decompose_check(const Hypothesis& h, const SplitDataset& ds) {
    const auto unlabeled = ds.unlabeled_indices();
    if (unlabeled.empty()) theory_error("decompose: no unlabeled samples");
    const auto probs = predict_all(h, ds, unlabeled);
    const auto truth = one_hot_block(ds, unlabeled, h.K);

    double sum_all = 0.0, sum_old = 0.0, sum_new = 0.0;
    std::size_t n_old = 0, n_new = 0;
    for (std::size_t i = 0; i < unlabeled.size(); ++i) {
        const double d = euclidean(std::span<const double>(probs).subspan(i * h.K, h.K),
                                   std::span<const double>(truth).subspan(i * h.K, h.K));
        sum_all += d;
        const auto cls = static_cast<std::size_t>(ds.samples()[unlabeled[i]].true_class);
        if (cls < ds.old_count()) {
            sum_old += d;
            ++n_old;
        } else {
            sum_new += d;
            ++n_new;
        }
    }
    DecomposeResult r;
    const auto n = static_cast<double>(unlabeled.size());
    r.xi_u = sum_all / n;
    r.xi_old = n_old ? sum_old / static_cast<double>(n_old) : 0.0;
    r.xi_new = n_new ? sum_new / static_cast<double>(n_new) : 0.0;
    r.theta = static_cast<double>(n_old) / n;
    r.residual = std::abs(r.xi_u - ((1.0 - r.theta) * r.xi_new + r.theta * r.xi_old));
    return r;
}

double f_discrepancy(std::span<const Hypothesis> family, const SplitDataset& ds,
                     double alpha) {
    if (family.empty()) theory_error("f_discrepancy: empty hypothesis family");
    const auto labeled = ds.labeled_indices();
    const auto unlabeled = ds.unlabeled_indices();
    if (labeled.empty() || unlabeled.empty()) {
        theory_error("f_discrepancy: need both labeled and unlabeled samples");
    }
    const std::size_t k = family[0].K;

    std::vector<std::vector<double>> on_l, on_u;
    on_l.reserve(family.size());
    on_u.reserve(family.size());
    for (const Hypothesis& h : family) {
        if (h.K != k) theory_error("f_discrepancy: hypothesis class counts differ");
        on_l.push_back(predict_all(h, ds, labeled));
        on_u.push_back(predict_all(h, ds, unlabeled));
    }

    double sup = 0.0;
    for (std::size_t a = 0; a < family.size(); ++a) {
        for (std::size_t b = 0; b < family.size(); ++b) {
            const double xi_u = mean_row_distance(on_u[a], on_u[b], unlabeled.size(), k);
            const double xi_l = mean_row_distance(on_l[a], on_l[b], labeled.size(), k);
            sup = std::max(sup, std::abs(xi_u - alpha * xi_l));
        }
    }
    return sup;
}

std::vector<Hypothesis> make_hypothesis_family(const ModelParams& h,
                                               const ModelParams& h_star,
                                               std::size_t n_perturb, double sigma,
                                               double tau_s, std::uint64_t seed) {
    std::vector<Hypothesis> family;
    family.push_back(make_model_hypothesis(h, tau_s, "H"));
    family.push_back(make_model_hypothesis(h_star, tau_s, "H*"));
    for (std::size_t p = 0; p < n_perturb; ++p) {
        ModelParams copy = h;
        Rng rng(derive_seed(seed, 0x9e47, p));
        for (auto& block : copy.blocks()) {
            auto& w = *block.data;
            if (w.empty()) continue;
            double rms = 0.0;
            for (double v : w) rms += v * v;
            rms = std::sqrt(rms / static_cast<double>(w.size()));
            const double s = sigma * (rms > 0.0 ? rms : 1.0);
            for (double& v : w) v += s * rng.normal();
        }
        family.push_back(
            make_model_hypothesis(std::move(copy), tau_s, "H~" + std::to_string(p)));
    }
    return family;
}

BoundReport check_bias_bound(const Hypothesis& h, const Hypothesis& h_star,
                             std::span<const Hypothesis> family,
                             const SplitDataset& ds, double alpha) {
    if (!(alpha > 0.0)) theory_error("bound: alpha must be positive");
    bool has_h = false, has_star = false;
    for (const Hypothesis& f : family) {
        has_h = has_h || f.id == h.id;
        has_star = has_star || f.id == h_star.id;
    }
    if (!has_h || !has_star) {
        theory_error("bound: family must contain both the model and the reference");
    }
    const auto labeled = ds.labeled_indices();
    const auto unlabeled = ds.unlabeled_indices();
    if (labeled.empty()) theory_error("bound: no labeled samples");

    BoundReport r;
    r.alpha = alpha;
    r.xi_l = xi_dataset_truth(h, ds, labeled);
    r.xi_u = xi_dataset_truth(h, ds, unlabeled);
    const DecomposeResult dec = decompose_check(h, ds);
    r.xi_u_old = dec.xi_old;
    r.xi_u_new = dec.xi_new;
    r.theta = dec.theta;
    if (r.theta >= 1.0) theory_error("bound: unlabeled set has no new-class samples");

    r.delta = f_discrepancy(family, ds, alpha);
    r.lambda_const =
        alpha * xi_dataset_truth(h_star, ds, labeled) + xi_dataset_truth(h_star, ds, unlabeled);

    r.lhs = r.xi_u_new;
    r.rhs = ((alpha - r.theta) * r.xi_l + r.delta + r.lambda_const) / (1.0 - r.theta);
    r.margin = r.rhs - r.lhs;
    r.coefficient_positive = alpha > r.theta;
    r.ordering_assumption_holds = r.xi_l <= r.xi_u_old;
    r.bound_holds = r.lhs <= r.rhs;
    return r;
}

ModelParams train_reference_supervised(const SplitDataset& ds, std::size_t d_f,
                                       std::size_t d_b, std::size_t d_h,
                                       std::size_t epochs, std::size_t batch_size,
                                       double lr0, double tau_s, std::uint64_t seed) {
    ModelParams params = init_model(ds.dim(), d_f, d_b, d_h, ds.K(), seed);
    auto blocks = params.blocks();
    std::vector<std::vector<double>> velocity;
    for (auto& b : blocks) velocity.emplace_back(b.data->size(), 0.0);

    std::vector<std::size_t> order(ds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        const double lr = lr0 * (1.0 + std::cos(kPi * static_cast<double>(epoch) /
                                                static_cast<double>(epochs))) /
                          2.0;
        Rng rng(derive_seed(seed, 0x4ef5, epoch));
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += batch_size) {
            const std::size_t stop = std::min(order.size(), start + batch_size);
            const std::size_t b = stop - start;
            std::vector<double> feats(b * ds.dim());
            std::vector<int> labels(b);
            for (std::size_t i = 0; i < b; ++i) {
                const Sample& s = ds.samples()[order[start + i]];
                std::copy(s.features.begin(), s.features.end(),
                          feats.begin() + i * ds.dim());
                labels[i] = s.true_class;  // full supervision on every sample
            }
            Trace tr;
            BoundModel m = bind_model(tr, params, true);
            Tensor x = tr.constant({b, ds.dim()}, std::move(feats));
            HeadOutput head = main_logits(m, extract(m, x), tau_s);
            Tensor loss = cross_entropy(head.probs, labels);
            GradientMap grads = tr.backward(loss);

            std::size_t slot = 0;
            for (auto& block : blocks) {
                const auto& g = grads.at(m.leaves[slot].id());
                auto& w = *block.data;
                auto& v = velocity[slot];
                for (std::size_t j = 0; j < w.size(); ++j) {
                    v[j] = 0.9 * v[j] + g[j] + 5e-4 * w[j];
                    w[j] -= lr * v[j];
                }
                ++slot;
            }
        }
    }
    return params;
}

MetricPropsReport metric_properties_test(std::uint64_t seed, std::size_t trials) {
    if (trials == 0) theory_error("metric test: need at least one trial");
    MetricPropsReport rep;
    rep.trials = trials;
    Rng rng(derive_seed(seed, 0x3713));
    for (std::size_t t = 0; t < trials; ++t) {
        const std::size_t k = 2 + rng.below(7);  // K in {2..8}
        auto draw = [&]() {
            std::vector<double> p(k);
            double total = 0.0;
            for (double& v : p) {
                v = -std::log(1.0 - rng.uniform());
                total += v;
            }
            for (double& v : p) v /= total;
            return p;
        };
        const auto p = draw(), q = draw(), r = draw();
        const double pq = xi_pointwise(p, q);
        const double qp = xi_pointwise(q, p);
        const double qr = xi_pointwise(q, r);
        const double pr = xi_pointwise(p, r);
        if (pq < 0.0 || qr < 0.0 || pr < 0.0) ++rep.nonneg_violations;
        if (std::abs(pq - qp) > 1e-9) ++rep.symmetry_violations;
        if (pr > pq + qr + 1e-9) ++rep.triangle_violations;
        // control: squared distances are not a metric and must fail here
        if (pr * pr > pq * pq + qr * qr + 1e-9) ++rep.control_triangle_violations;
    }
    rep.pass = rep.nonneg_violations == 0 && rep.symmetry_violations == 0 &&
               rep.triangle_violations == 0;
    return rep;
}

}  // namespace gface
