#pragma once
// End-to-end training: per-epoch schedules, two-view batch forward, the five
// loss terms, a single SGD-with-momentum step per batch through gradient
// reversal, per-epoch class statistics, accuracy logging, and history
// emission.

#include <cstdint>
#include <string>
#include <vector>

#include "gface/data.hpp"
#include "gface/eval.hpp"
#include "gface/losses.hpp"
#include "gface/model.hpp"

namespace gface {

enum class TauTSchedule : std::uint8_t { kCosine, kLinear };
enum class StatsWindow : std::uint8_t { kEpoch, kCumulative };

struct TrainConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 128;
    double lr0 = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double grad_clip_norm = 10.0;  // global L2 clip per step; 0 disables
    std::size_t warmup_epochs = 50;  // cluster loss is gated off before this
    LossWeights weights;
    AugmentSpec augment;
    std::uint64_t seed = 0;

    std::size_t d_f = 64, d_b = 32, d_h = 128;
    double dropout_rate = 0.1;
    double grl_mu = 1.0;

    TauTSchedule tau_t_schedule = TauTSchedule::kCosine;
    double tau_t_start = 0.07;
    double tau_t_end = 0.04;
    std::size_t tau_t_epochs = 30;
    std::size_t lr_restart_period = 0;  // 0 = single half-cosine, no restarts
    StatsWindow stats_window = StatsWindow::kEpoch;
    bool eval_each_epoch = true;

    void validate() const;
};

struct EpochRow {
    std::size_t epoch = 0;
    double lr = 0.0, tau_t = 0.0, e_t = 0.0;
    double loss_rep = 0.0, loss_cls = 0.0, loss_ad = 0.0, loss_bal = 0.0,
           loss_cluster = 0.0, loss_total = 0.0;
    double acc_all = -1.0, acc_old = -1.0, acc_new = -1.0;  // -1 = not evaluated
};

struct TrainHistory {
    std::vector<EpochRow> rows;
};

// CSV: epoch,lr,tau_t,e_t,loss_rep,loss_cls,loss_ad,loss_bal,loss_cluster,
//      loss_total,acc_all,acc_old,acc_new
void write_history_csv(const TrainHistory& history, const std::string& path);
TrainHistory read_history_csv(const std::string& path);

struct TrainResult {
    ModelParams params;
    TrainHistory history;
};

// lr0 * (1 + cos(pi t / T)) / 2; with a restart period, t wraps modulo it
double schedule_lr(std::size_t t, std::size_t T, double lr0,
                   std::size_t restart_period = 0);

// teacher temperature: start -> end over the first span epochs, then flat
double schedule_tau_t(std::size_t t, double start, double end, std::size_t span,
                      TauTSchedule shape);
double schedule_tau_t(std::size_t t);  // 0.07 -> 0.04 over 30 epochs, cosine

// confusing-sample mixing weight 0.1 * (1 - t/T)
double schedule_e(std::size_t t, std::size_t T);

// Maintains per-class counts from argmaxed predictions on labeled samples.
void update_class_stats(ClassStats& stats, std::span<const int> predictions,
                        std::span<const int> labels);

TrainResult train(const SplitDataset& ds, const TrainConfig& config);

// Cluster ids for every unlabeled sample (argmax of the main head), then the
// Hungarian-matched accuracy report against the hidden ground truth.
AccReport evaluate_model(const ModelParams& params, const SplitDataset& ds,
                         double tau_s);

}  // namespace gface
