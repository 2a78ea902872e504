#include "gface/train.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "gface/rng.hpp"
#include "gface/tensor.hpp"

namespace gface {

namespace {

constexpr double kPi = 3.14159265358979323846;

[[noreturn]] void train_error(const std::string& msg) {
    throw std::runtime_error("train: " + msg);
}

}  // namespace

void TrainConfig::validate() const {
    if (epochs < 1) train_error("epochs must be >= 1");
    if (warmup_epochs > epochs) train_error("warmup_epochs must be <= epochs");
    if (batch_size < 2) train_error("batch_size must be >= 2");
    if (!(lr0 > 0.0)) train_error("lr0 must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) train_error("momentum must be in [0,1)");
    if (!(weight_decay >= 0.0)) train_error("weight_decay must be >= 0");
    if (!(grad_clip_norm >= 0.0)) train_error("grad_clip_norm must be >= 0");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
        train_error("dropout_rate must be in [0,1)");
    }
    if (!(grl_mu > 0.0)) train_error("grl_mu must be positive");
    if (!(tau_t_start > 0.0 && tau_t_end > 0.0)) train_error("tau_t must be positive");
    weights.validate();
    augment.validate();
}

double schedule_lr(std::size_t t, std::size_t T, double lr0,
                   std::size_t restart_period) {
    if (T == 0) train_error("schedule_lr: T must be positive");
    std::size_t span = T, pos = t;
    if (restart_period > 0) {
        span = restart_period;
        pos = t % restart_period;
    }
    return lr0 * (1.0 + std::cos(kPi * static_cast<double>(pos) /
                                 static_cast<double>(span))) /
           2.0;
}

double schedule_tau_t(std::size_t t, double start, double end, std::size_t span,
                      TauTSchedule shape) {
    if (t == 0) return start;  // exact endpoint, no rounding through the cosine
    if (t >= span) return end;
    const double frac = static_cast<double>(t) / static_cast<double>(span);
    if (shape == TauTSchedule::kLinear) return start + (end - start) * frac;
    return end + (start - end) * (1.0 + std::cos(kPi * frac)) / 2.0;
}

double schedule_tau_t(std::size_t t) {
    return schedule_tau_t(t, 0.07, 0.04, 30, TauTSchedule::kCosine);
}

double schedule_e(std::size_t t, std::size_t T) {
    if (t > T) train_error("schedule_e: t must be <= T");
    return 0.1 * (1.0 - static_cast<double>(t) / static_cast<double>(T));
}

void update_class_stats(ClassStats& stats, std::span<const int> predictions,
                        std::span<const int> labels) {
    stats.update(predictions, labels);
}

AccReport evaluate_model(const ModelParams& params, const SplitDataset& ds,
                         double tau_s) {
    const auto unlabeled = ds.unlabeled_indices();
    const std::size_t n = unlabeled.size(), d = ds.dim();
    std::vector<double> feats(n * d);
    std::vector<int> truth(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Sample& s = ds.samples()[unlabeled[i]];
        std::copy(s.features.begin(), s.features.end(), feats.begin() + i * d);
        truth[i] = s.true_class;
    }
    Trace tr;
    BoundModel m = bind_model(tr, params, false);
    Tensor x = tr.constant({n, d}, std::move(feats));
    HeadOutput head = main_logits(m, extract(m, x), tau_s);
    const auto preds = argmax_rows(head.probs.value(), n, params.K);
    return cluster_acc(preds, truth, params.K, ds.old_count());
}

namespace {

struct Optimizer {
    double lr = 0.0, momentum = 0.9, weight_decay = 5e-4, clip_norm = 10.0;
    std::vector<std::vector<double>> velocity;

    void init(const std::vector<const std::vector<double>*>& blocks) {
        velocity.clear();
        for (const auto* b : blocks) velocity.emplace_back(b->size(), 0.0);
    }

    void step(std::vector<ParamBlock>& blocks, const BoundModel& bound,
              const GradientMap& grads) {
        // global-norm clip: the scatter-ratio and saturated adversarial
        // phases produce rare cliff gradients that momentum would amplify
        double scale = 1.0;
        if (clip_norm > 0.0) {
            double sq = 0.0;
            for (std::size_t slot = 0; slot < blocks.size(); ++slot) {
                const auto it = grads.find(bound.leaves[slot].id());
                if (it == grads.end()) continue;
                for (double g : it->second) sq += g * g;
            }
            const double norm = std::sqrt(sq);
            if (norm > clip_norm) scale = clip_norm / norm;
        }
        for (std::size_t slot = 0; slot < blocks.size(); ++slot) {
            const auto it = grads.find(bound.leaves[slot].id());
            if (it == grads.end()) continue;
            const auto& g = it->second;
            auto& w = *blocks[slot].data;
            auto& v = velocity[slot];
            for (std::size_t j = 0; j < w.size(); ++j) {
                v[j] = momentum * v[j] + scale * g[j] + weight_decay * w[j];
                w[j] -= lr * v[j];
            }
        }
    }
};

}  // namespace

TrainResult train(const SplitDataset& ds, const TrainConfig& config) {
    config.validate();
    const std::size_t K = ds.K(), d = ds.dim(), T = config.epochs;
    const LossWeights& w = config.weights;

    ModelParams params =
        init_model(d, config.d_f, config.d_b, config.d_h, K, config.seed);
    auto blocks = params.blocks();
    Optimizer opt;
    opt.momentum = config.momentum;
    opt.weight_decay = config.weight_decay;
    opt.clip_norm = config.grad_clip_norm;
    opt.init(params.blocks_const());

    ClassStats stats(ds.old_count());
    TrainHistory history;

    for (std::size_t epoch = 0; epoch < T; ++epoch) {
        const double lr = schedule_lr(epoch, T, config.lr0, config.lr_restart_period);
        const double tau_t = schedule_tau_t(epoch, config.tau_t_start, config.tau_t_end,
                                            config.tau_t_epochs, config.tau_t_schedule);
        const double e_t = schedule_e(epoch, T);
        opt.lr = lr;
        if (config.stats_window == StatsWindow::kEpoch) stats.reset();

        const std::uint64_t epoch_seed = derive_seed(config.seed, 0xe90c, epoch);
        const auto batches = make_batches(ds, config.batch_size, epoch_seed);

        double sum_rep = 0.0, sum_cls = 0.0, sum_ad = 0.0, sum_bal = 0.0,
               sum_cluster = 0.0, sum_total = 0.0;

        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            try {
            const Batch& batch = batches[bi];
            const std::size_t b = batch.sample_ids.size();

            std::vector<double> view1(b * d), view2(b * d);
            for (std::size_t row = 0; row < b; ++row) {
                const Sample& s = ds.samples()[batch.sample_ids[row]];
                auto views = augment_two_views(s, config.augment,
                                               derive_seed(epoch_seed, bi + 1, row));
                std::copy(views.first.begin(), views.first.end(),
                          view1.begin() + row * d);
                std::copy(views.second.begin(), views.second.end(),
                          view2.begin() + row * d);
            }

            std::vector<int> labels;
            for (std::size_t r : batch.labeled_rows) labels.push_back(batch.labels[r]);
            const bool has_labeled = !batch.labeled_rows.empty();

            Trace tr;
            BoundModel m = bind_model(tr, params, true);
            Tensor x1 = tr.constant({b, d}, std::move(view1));
            Tensor x2 = tr.constant({b, d}, std::move(view2));
            Tensor z1 = extract(m, x1);
            Tensor z2 = extract(m, x2);

            // representation terms on the normalized projections
            Tensor p1 = project(m, z1);
            Tensor p2 = project(m, z2);
            Tensor l_self = loss_rep_self(p1, p2, w.tau_u);
            Tensor l_sup = has_labeled
                               ? loss_rep_sup(gather_rows(p1, batch.labeled_rows),
                                              gather_rows(p2, batch.labeled_rows),
                                              labels, w.tau_c)
                                     .value
                               : tr.scalar(0.0);
            Tensor l_rep = loss_rep(l_self, l_sup, w.lambda);

            // classifier term: sharp student view against the tempered teacher
            HeadOutput student = main_logits(m, z1, w.tau_s);
            HeadOutput teacher = main_logits(m, z2, tau_t);
            Tensor l_cls = loss_cls(student, teacher.probs, batch.labeled_rows, labels,
                                    w.lambda, w.eps_ent);

            // adversarial term through the reversal layer; skipped entirely
            // when ablated so the step direction reduces to rep + cls
            Tensor l_ad = tr.scalar(0.0);
            if (w.lambda_a > 0.0) {
                HeadOutput aux =
                    aux_logits(m, z1, config.grl_mu, true, config.dropout_rate,
                               derive_seed(epoch_seed, 0xd0, bi));
                Tensor pseudo = pseudo_labels(tr, student);
                l_ad = loss_ad(aux, student.probs, pseudo, batch.labeled_rows,
                               batch.unlabeled_rows, w.alpha);
            }

            Tensor l_bal = tr.scalar(0.0);
            if (w.lambda_b > 0.0 && has_labeled) {
                l_bal = loss_bal(gather_rows(student.probs, batch.labeled_rows), labels,
                                 stats, e_t, w.eps_bal);
            }

            Tensor l_cluster = tr.scalar(0.0);
            const bool cluster_active = epoch >= config.warmup_epochs && w.lambda_c > 0.0;
            // a single-class labeled sub-batch has zero between-class scatter,
            // which puts the ratio on its 1/eps_wb guard scale; treat it as a
            // degenerate supervised batch contributing 0
            bool multi_class = false;
            for (std::size_t i = 1; i < labels.size(); ++i) {
                multi_class = multi_class || labels[i] != labels[0];
            }
            if (cluster_active && has_labeled && multi_class) {
                // the labeled set is fed to the extractor unaugmented here:
                // coordinate masking inflates within-class scatter and swamps
                // the within/between ratio
                std::vector<double> clean(batch.labeled_rows.size() * d);
                for (std::size_t i = 0; i < batch.labeled_rows.size(); ++i) {
                    const Sample& s =
                        ds.samples()[batch.sample_ids[batch.labeled_rows[i]]];
                    std::copy(s.features.begin(), s.features.end(),
                              clean.begin() + i * d);
                }
                Tensor z_labeled = extract(
                    m, tr.constant({batch.labeled_rows.size(), d}, std::move(clean)));
                l_cluster = loss_cluster(z_labeled, labels, w.beta, w.eps_wb);
            }

            Tensor l_total =
                loss_total(l_rep, l_cls, l_ad, l_bal,
                           epoch >= config.warmup_epochs ? &l_cluster : nullptr, w,
                           epoch, config.warmup_epochs);

            const struct {
                const char* name;
                double v;
            } components[] = {
                {"loss_rep", l_rep.item()},   {"loss_cls", l_cls.item()},
                {"loss_ad", l_ad.item()},     {"loss_bal", l_bal.item()},
                {"loss_cluster", l_cluster.item()}, {"loss_total", l_total.item()},
            };
            for (const auto& c : components) {
                if (!std::isfinite(c.v)) {
                    train_error(std::string("non-finite ") + c.name + " at epoch " +
                                std::to_string(epoch) + " batch " + std::to_string(bi) +
                                "; replay batch seed " + std::to_string(epoch_seed));
                }
            }

            GradientMap grads = tr.backward(l_total);
            opt.step(blocks, m, grads);

            // class statistics advance only after this batch's loss used them
            if (has_labeled) {
                const auto preds_all = argmax_rows(student.probs.value(), b, K);
                std::vector<int> preds;
                for (std::size_t r : batch.labeled_rows) preds.push_back(preds_all[r]);
                stats.update(preds, labels);
            }

            sum_rep += components[0].v;
            sum_cls += components[1].v;
            sum_ad += components[2].v;
            sum_bal += components[3].v;
            sum_cluster += components[4].v;
            sum_total += components[5].v;
            } catch (const std::runtime_error&) {
                throw;  // already carries epoch/batch context
            } catch (const std::exception& e) {
                train_error(std::string(e.what()) + " at epoch " +
                            std::to_string(epoch) + " batch " + std::to_string(bi) +
                            "; replay batch seed " + std::to_string(epoch_seed));
            }
        }

        EpochRow row;
        row.epoch = epoch;
        row.lr = lr;
        row.tau_t = tau_t;
        row.e_t = e_t;
        const auto nb = static_cast<double>(batches.size());
        row.loss_rep = sum_rep / nb;
        row.loss_cls = sum_cls / nb;
        row.loss_ad = sum_ad / nb;
        row.loss_bal = sum_bal / nb;
        row.loss_cluster = sum_cluster / nb;
        row.loss_total = sum_total / nb;
        if (config.eval_each_epoch) {
            const AccReport acc = evaluate_model(params, ds, w.tau_s);
            row.acc_all = acc.acc_all;
            row.acc_old = acc.acc_old;
            row.acc_new = acc.acc_new;
        }
        history.rows.push_back(row);
    }

    return {std::move(params), std::move(history)};
}

// ---- history csv ----

void write_history_csv(const TrainHistory& history, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) train_error("cannot write " + path);
    out << "epoch,lr,tau_t,e_t,loss_rep,loss_cls,loss_ad,loss_bal,loss_cluster,"
           "loss_total,acc_all,acc_old,acc_new\n";
    char buf[40];
    auto put = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << ',' << buf;
    };
    for (const EpochRow& r : history.rows) {
        out << r.epoch;
        put(r.lr);
        put(r.tau_t);
        put(r.e_t);
        put(r.loss_rep);
        put(r.loss_cls);
        put(r.loss_ad);
        put(r.loss_bal);
        put(r.loss_cluster);
        put(r.loss_total);
        put(r.acc_all);
        put(r.acc_old);
        put(r.acc_new);
        out << '\n';
    }
    if (!out) train_error("write failed for " + path);
}

TrainHistory read_history_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) train_error("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) train_error(path + ": empty history");
    TrainHistory history;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<double> fields;
        std::size_t start = 0;
        while (start <= line.size()) {
            std::size_t pos = line.find(',', start);
            if (pos == std::string::npos) pos = line.size();
            double v = 0.0;
            const char* b = line.data() + start;
            const char* e = line.data() + pos;
            auto [ptr, ec] = std::from_chars(b, e, v);
            if (ec != std::errc{} || ptr != e) {
                train_error(path + ":" + std::to_string(lineno) + ": bad field");
            }
            fields.push_back(v);
            start = pos + 1;
        }
        if (fields.size() != 13) {
            train_error(path + ":" + std::to_string(lineno) + ": expected 13 fields");
        }
        EpochRow r;
        r.epoch = static_cast<std::size_t>(fields[0]);
        r.lr = fields[1];
        r.tau_t = fields[2];
        r.e_t = fields[3];
        r.loss_rep = fields[4];
        r.loss_cls = fields[5];
        r.loss_ad = fields[6];
        r.loss_bal = fields[7];
        r.loss_cluster = fields[8];
        r.loss_total = fields[9];
        r.acc_all = fields[10];
        r.acc_old = fields[11];
        r.acc_new = fields[12];
        history.rows.push_back(r);
    }
    return history;
}

}  // namespace gface
