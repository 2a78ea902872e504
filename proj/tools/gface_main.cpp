// Command-line front end: generate synthetic embedding datasets, train,
// evaluate with Hungarian-matched accuracies, verify the bias upper bound,
// and render run reports.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "gface/data.hpp"
#include "gface/eval.hpp"
#include "gface/model.hpp"
#include "gface/theory.hpp"
#include "gface/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---- configuration -------------------------------------------------------

struct TheoryConfig {
    double alpha = 2.0;
    std::size_t n_perturb = 8;
    double perturb_sigma = 0.05;
    std::size_t reference_epochs = 30;
    std::size_t reference_batch = 64;
    double reference_lr0 = 0.05;
};

struct EvalConfig {
    bool per_subset_matching = false;
    std::size_t kmeans_max_iters = 100;
    std::uint64_t kmeans_seed = 0;
};

struct AppConfig {
    gface::SyntheticSpec data;
    gface::TrainConfig train;
    EvalConfig eval;
    TheoryConfig theory;
};

void require_keys(const json& obj, const std::string& where,
                  const std::set<std::string>& allowed) {
    if (!obj.is_object()) {
        throw std::runtime_error("config: section '" + where + "' must be an object");
    }
    for (const auto& [key, value] : obj.items()) {
        (void)value;
        if (!allowed.count(key)) {
            throw std::runtime_error("config: unknown key '" + where + "." + key + "'");
        }
    }
}

AppConfig parse_config(const json& root) {
    AppConfig cfg;
    cfg.data.per_class_counts.assign(cfg.data.K, 100);
    require_keys(root, "(root)",
                 {"data", "model", "loss_weights", "schedules", "train", "eval",
                  "theory"});

    if (root.contains("data")) {
        const json& d = root["data"];
        require_keys(d, "data",
                     {"K", "N", "d", "per_class_counts", "class_separation",
                      "within_class_sigma", "overlap_pairs", "labeled_fraction"});
        auto& spec = cfg.data;
        spec.K = d.value("K", spec.K);
        spec.N = d.value("N", spec.N);
        spec.d = d.value("d", spec.d);
        if (d.contains("per_class_counts")) {
            spec.per_class_counts = d["per_class_counts"].get<std::vector<std::size_t>>();
        } else {
            spec.per_class_counts.assign(spec.K, 100);
        }
        spec.class_separation = d.value("class_separation", spec.class_separation);
        spec.within_class_sigma = d.value("within_class_sigma", spec.within_class_sigma);
        spec.labeled_fraction = d.value("labeled_fraction", spec.labeled_fraction);
        if (d.contains("overlap_pairs")) {
            for (const auto& p : d["overlap_pairs"]) {
                if (!p.is_array() || p.size() != 3) {
                    throw std::runtime_error(
                        "config: data.overlap_pairs entries are [class, class, strength]");
                }
                spec.overlap_pairs.push_back(
                    {p[0].get<int>(), p[1].get<int>(), p[2].get<double>()});
            }
        }
    }

    if (root.contains("model")) {
        const json& m = root["model"];
        require_keys(m, "model", {"d_f", "d_b", "d_h", "dropout_rate", "grl_mu"});
        cfg.train.d_f = m.value("d_f", cfg.train.d_f);
        cfg.train.d_b = m.value("d_b", cfg.train.d_b);
        cfg.train.d_h = m.value("d_h", cfg.train.d_h);
        cfg.train.dropout_rate = m.value("dropout_rate", cfg.train.dropout_rate);
        cfg.train.grl_mu = m.value("grl_mu", cfg.train.grl_mu);
    }

    if (root.contains("loss_weights")) {
        const json& w = root["loss_weights"];
        require_keys(w, "loss_weights",
                     {"lambda", "lambda_a", "lambda_b", "lambda_c", "alpha", "beta",
                      "eps_bal", "eps_wb", "eps_ent", "tau_u", "tau_c", "tau_s"});
        auto& lw = cfg.train.weights;
        lw.lambda = w.value("lambda", lw.lambda);
        lw.lambda_a = w.value("lambda_a", lw.lambda_a);
        lw.lambda_b = w.value("lambda_b", lw.lambda_b);
        lw.lambda_c = w.value("lambda_c", lw.lambda_c);
        lw.alpha = w.value("alpha", lw.alpha);
        lw.beta = w.value("beta", lw.beta);
        lw.eps_bal = w.value("eps_bal", lw.eps_bal);
        lw.eps_wb = w.value("eps_wb", lw.eps_wb);
        lw.eps_ent = w.value("eps_ent", lw.eps_ent);
        lw.tau_u = w.value("tau_u", lw.tau_u);
        lw.tau_c = w.value("tau_c", lw.tau_c);
        lw.tau_s = w.value("tau_s", lw.tau_s);
    }

    if (root.contains("schedules")) {
        const json& s = root["schedules"];
        require_keys(s, "schedules",
                     {"tau_t_start", "tau_t_end", "tau_t_epochs", "tau_t_shape",
                      "lr_restart_period"});
        cfg.train.tau_t_start = s.value("tau_t_start", cfg.train.tau_t_start);
        cfg.train.tau_t_end = s.value("tau_t_end", cfg.train.tau_t_end);
        cfg.train.tau_t_epochs = s.value("tau_t_epochs", cfg.train.tau_t_epochs);
        const std::string shape = s.value("tau_t_shape", std::string("cosine"));
        if (shape == "cosine") {
            cfg.train.tau_t_schedule = gface::TauTSchedule::kCosine;
        } else if (shape == "linear") {
            cfg.train.tau_t_schedule = gface::TauTSchedule::kLinear;
        } else {
            throw std::runtime_error("config: schedules.tau_t_shape must be cosine|linear");
        }
        cfg.train.lr_restart_period =
            s.value("lr_restart_period", cfg.train.lr_restart_period);
    }

    if (root.contains("train")) {
        const json& t = root["train"];
        require_keys(t, "train",
                     {"epochs", "batch_size", "lr0", "momentum", "weight_decay",
                      "warmup_epochs", "seed", "augment", "stats_window",
                      "eval_each_epoch", "grad_clip_norm"});
        cfg.train.epochs = t.value("epochs", cfg.train.epochs);
        cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
        cfg.train.lr0 = t.value("lr0", cfg.train.lr0);
        cfg.train.momentum = t.value("momentum", cfg.train.momentum);
        cfg.train.weight_decay = t.value("weight_decay", cfg.train.weight_decay);
        cfg.train.grad_clip_norm = t.value("grad_clip_norm", cfg.train.grad_clip_norm);
        cfg.train.warmup_epochs = t.value("warmup_epochs", cfg.train.warmup_epochs);
        cfg.train.seed = t.value("seed", cfg.train.seed);
        cfg.train.eval_each_epoch = t.value("eval_each_epoch", cfg.train.eval_each_epoch);
        if (t.contains("augment")) {
            require_keys(t["augment"], "train.augment", {"noise_sigma", "mask_fraction"});
            cfg.train.augment.noise_sigma =
                t["augment"].value("noise_sigma", cfg.train.augment.noise_sigma);
            cfg.train.augment.mask_fraction =
                t["augment"].value("mask_fraction", cfg.train.augment.mask_fraction);
        }
        const std::string window = t.value("stats_window", std::string("epoch"));
        if (window == "epoch") {
            cfg.train.stats_window = gface::StatsWindow::kEpoch;
        } else if (window == "cumulative") {
            cfg.train.stats_window = gface::StatsWindow::kCumulative;
        } else {
            throw std::runtime_error("config: train.stats_window must be epoch|cumulative");
        }
    }

    if (root.contains("eval")) {
        const json& e = root["eval"];
        require_keys(e, "eval", {"per_subset_matching", "kmeans_max_iters", "kmeans_seed"});
        cfg.eval.per_subset_matching =
            e.value("per_subset_matching", cfg.eval.per_subset_matching);
        cfg.eval.kmeans_max_iters = e.value("kmeans_max_iters", cfg.eval.kmeans_max_iters);
        cfg.eval.kmeans_seed = e.value("kmeans_seed", cfg.eval.kmeans_seed);
    }

    if (root.contains("theory")) {
        const json& th = root["theory"];
        require_keys(th, "theory",
                     {"alpha", "n_perturb", "perturb_sigma", "reference_epochs",
                      "reference_batch", "reference_lr0"});
        cfg.theory.alpha = th.value("alpha", cfg.theory.alpha);
        cfg.theory.n_perturb = th.value("n_perturb", cfg.theory.n_perturb);
        cfg.theory.perturb_sigma = th.value("perturb_sigma", cfg.theory.perturb_sigma);
        cfg.theory.reference_epochs =
            th.value("reference_epochs", cfg.theory.reference_epochs);
        cfg.theory.reference_batch = th.value("reference_batch", cfg.theory.reference_batch);
        cfg.theory.reference_lr0 = th.value("reference_lr0", cfg.theory.reference_lr0);
    }

    // GFACE_SEED wins over the config file
    if (const char* env = std::getenv("GFACE_SEED")) {
        cfg.train.seed = std::strtoull(env, nullptr, 10);
    }
    return cfg;
}

json effective_config(const AppConfig& cfg) {
    json root;
    const auto& spec = cfg.data;
    json pairs = json::array();
    for (const auto& p : spec.overlap_pairs) {
        pairs.push_back({p.class_a, p.class_b, p.strength});
    }
    root["data"] = {{"K", spec.K},
                    {"N", spec.N},
                    {"d", spec.d},
                    {"per_class_counts", spec.per_class_counts},
                    {"class_separation", spec.class_separation},
                    {"within_class_sigma", spec.within_class_sigma},
                    {"overlap_pairs", pairs},
                    {"labeled_fraction", spec.labeled_fraction}};
    root["model"] = {{"d_f", cfg.train.d_f},
                     {"d_b", cfg.train.d_b},
                     {"d_h", cfg.train.d_h},
                     {"dropout_rate", cfg.train.dropout_rate},
                     {"grl_mu", cfg.train.grl_mu}};
    const auto& lw = cfg.train.weights;
    root["loss_weights"] = {{"lambda", lw.lambda},     {"lambda_a", lw.lambda_a},
                            {"lambda_b", lw.lambda_b}, {"lambda_c", lw.lambda_c},
                            {"alpha", lw.alpha},       {"beta", lw.beta},
                            {"eps_bal", lw.eps_bal},   {"eps_wb", lw.eps_wb},
                            {"eps_ent", lw.eps_ent},   {"tau_u", lw.tau_u},
                            {"tau_c", lw.tau_c},       {"tau_s", lw.tau_s}};
    root["schedules"] = {
        {"tau_t_start", cfg.train.tau_t_start},
        {"tau_t_end", cfg.train.tau_t_end},
        {"tau_t_epochs", cfg.train.tau_t_epochs},
        {"tau_t_shape",
         cfg.train.tau_t_schedule == gface::TauTSchedule::kCosine ? "cosine" : "linear"},
        {"lr_restart_period", cfg.train.lr_restart_period}};
    root["train"] = {{"epochs", cfg.train.epochs},
                     {"batch_size", cfg.train.batch_size},
                     {"lr0", cfg.train.lr0},
                     {"momentum", cfg.train.momentum},
                     {"weight_decay", cfg.train.weight_decay},
                     {"grad_clip_norm", cfg.train.grad_clip_norm},
                     {"warmup_epochs", cfg.train.warmup_epochs},
                     {"seed", cfg.train.seed},
                     {"augment",
                      {{"noise_sigma", cfg.train.augment.noise_sigma},
                       {"mask_fraction", cfg.train.augment.mask_fraction}}},
                     {"stats_window", cfg.train.stats_window == gface::StatsWindow::kEpoch
                                          ? "epoch"
                                          : "cumulative"},
                     {"eval_each_epoch", cfg.train.eval_each_epoch}};
    root["eval"] = {{"per_subset_matching", cfg.eval.per_subset_matching},
                    {"kmeans_max_iters", cfg.eval.kmeans_max_iters},
                    {"kmeans_seed", cfg.eval.kmeans_seed}};
    root["theory"] = {{"alpha", cfg.theory.alpha},
                      {"n_perturb", cfg.theory.n_perturb},
                      {"perturb_sigma", cfg.theory.perturb_sigma},
                      {"reference_epochs", cfg.theory.reference_epochs},
                      {"reference_batch", cfg.theory.reference_batch},
                      {"reference_lr0", cfg.theory.reference_lr0}};
    return root;
}

AppConfig load_config(const std::string& path) {
    if (path.empty()) return parse_config(json::object());
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    json root;
    in >> root;
    return parse_config(root);
}

// ---- small io helpers ------------------------------------------------------

void write_file_atomic(const fs::path& path, const std::string& content) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << content;
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::vector<double> dataset_features(const gface::SplitDataset& ds,
                                     const std::vector<std::size_t>& idx) {
    std::vector<double> out(idx.size() * ds.dim());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto& f = ds.samples()[idx[i]].features;
        std::copy(f.begin(), f.end(), out.begin() + i * ds.dim());
    }
    return out;
}

void check_compat(const gface::ModelParams& params, const gface::SplitDataset& ds) {
    if (params.d != ds.dim()) {
        throw std::runtime_error("checkpoint/data mismatch: model expects d=" +
                                 std::to_string(params.d) + " but the dataset has d=" +
                                 std::to_string(ds.dim()));
    }
    if (params.K != ds.K()) {
        throw std::runtime_error("checkpoint/data mismatch: model has K=" +
                                 std::to_string(params.K) + " but the dataset has K=" +
                                 std::to_string(ds.K()));
    }
}

// ---- svg plotting ----------------------------------------------------------

struct Series {
    std::string label;
    std::string color;
    std::vector<double> y;
};

// Fixed geometry: the plot area spans x in [60, 780] and y in [30, 440], and
// the data range maps onto it exactly, so polyline extremes land on the plot
// edges and the printed min/max labels are the data min/max.
void write_line_svg(const fs::path& path, const std::string& title,
                    const std::vector<double>& x, const std::vector<Series>& series) {
    const double width = 800, height = 480;
    const double left = 60, right = 780, top = 30, bottom = 440;
    double xmin = x.front(), xmax = x.back();
    if (xmax == xmin) xmax = xmin + 1.0;
    double ymin = 1e300, ymax = -1e300;
    for (const Series& s : series) {
        for (double v : s.y) {
            ymin = std::min(ymin, v);
            ymax = std::max(ymax, v);
        }
    }
    if (ymax == ymin) ymax = ymin + 1.0;
    auto px = [&](double v) { return left + (v - xmin) / (xmax - xmin) * (right - left); };
    auto py = [&](double v) {
        return bottom - (v - ymin) / (ymax - ymin) * (bottom - top);
    };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
        << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << " " << height
        << "\">\n";
    svg << "<rect width=\"" << width << "\" height=\"" << height
        << "\" fill=\"white\"/>\n";
    svg << "<text x=\"400\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">" << title
        << "</text>\n";
    svg << "<line x1=\"" << left << "\" y1=\"" << bottom << "\" x2=\"" << right
        << "\" y2=\"" << bottom << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\""
        << bottom << "\" stroke=\"black\"/>\n";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", ymin);
    svg << "<text x=\"" << left - 6 << "\" y=\"" << bottom
        << "\" text-anchor=\"end\" font-size=\"11\">" << buf << "</text>\n";
    std::snprintf(buf, sizeof buf, "%.6g", ymax);
    svg << "<text x=\"" << left - 6 << "\" y=\"" << top + 4
        << "\" text-anchor=\"end\" font-size=\"11\">" << buf << "</text>\n";
    std::snprintf(buf, sizeof buf, "%.6g", xmin);
    svg << "<text x=\"" << left << "\" y=\"" << bottom + 16
        << "\" text-anchor=\"middle\" font-size=\"11\">" << buf << "</text>\n";
    std::snprintf(buf, sizeof buf, "%.6g", xmax);
    svg << "<text x=\"" << right << "\" y=\"" << bottom + 16
        << "\" text-anchor=\"middle\" font-size=\"11\">" << buf << "</text>\n";

    double legend_y = top + 10;
    for (const Series& s : series) {
        svg << "<polyline fill=\"none\" stroke=\"" << s.color
            << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < x.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(x[i]), py(s.y[i]));
            svg << buf;
        }
        svg << "\"/>\n";
        svg << "<text x=\"" << right - 150 << "\" y=\"" << legend_y
            << "\" font-size=\"11\" fill=\"" << s.color << "\">" << s.label
            << "</text>\n";
        legend_y += 14;
    }
    svg << "</svg>\n";
    write_file_atomic(path, svg.str());
}

// ---- subcommands -----------------------------------------------------------

int cmd_gen_data(const std::string& config_path, const std::string& out,
                 std::optional<std::uint64_t> seed_flag) {
    AppConfig cfg = load_config(config_path);
    std::uint64_t seed = cfg.train.seed;
    if (seed_flag) seed = *seed_flag;
    if (const char* env = std::getenv("GFACE_SEED")) {
        seed = std::strtoull(env, nullptr, 10);
    }

    const gface::SplitDataset ds = gface::generate_synthetic(cfg.data, seed);
    const fs::path out_path(out);
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());

    fs::path tmp = out_path;
    tmp += ".tmp";
    gface::save_embeddings(ds, tmp.string());
    fs::rename(tmp, out_path);

    std::vector<std::size_t> counts(ds.K(), 0);
    for (const auto& s : ds.samples()) ++counts[s.true_class];
    json manifest = {{"K", ds.K()},
                     {"N", ds.old_count()},
                     {"M", ds.new_count()},
                     {"theta", ds.theta()},
                     {"d", ds.dim()},
                     {"count_total", ds.size()},
                     {"count_labeled", ds.labeled_indices().size()},
                     {"count_unlabeled", ds.unlabeled_indices().size()},
                     {"per_class_counts", counts},
                     {"seed", seed}};
    write_file_atomic(out_path.string() + ".manifest.json", manifest.dump(2) + "\n");

    std::cout << "wrote " << out << " (" << ds.size() << " samples, K=" << ds.K()
              << ", N=" << ds.old_count() << ", theta=" << ds.theta() << ")\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_path,
              const std::string& rundir, bool force, const std::string& ablate) {
    AppConfig cfg = load_config(config_path);
    if (ablate == "no-debias") {
        cfg.train.weights.lambda_a = 0.0;
        cfg.train.weights.lambda_b = 0.0;
        cfg.train.weights.lambda_c = 0.0;
    } else if (!ablate.empty()) {
        throw std::runtime_error("unknown --ablate mode '" + ablate + "'");
    }

    const fs::path dir(rundir);
    if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
        throw std::runtime_error("run directory " + rundir +
                                 " already has contents; pass --force to overwrite");
    }
    fs::create_directories(dir);

    const gface::SplitDataset ds = gface::load_embeddings(data_path);
    write_file_atomic(dir / "config.json", effective_config(cfg).dump(2) + "\n");

    const gface::TrainResult result = gface::train(ds, cfg.train);
    gface::write_history_csv(result.history, (dir / "history.csv").string());
    fs::path ckpt_tmp = dir / "checkpoint.gfck";
    ckpt_tmp += ".tmp";
    gface::save_checkpoint(result.params, ckpt_tmp.string());
    fs::rename(ckpt_tmp, dir / "checkpoint.gfck");

    const auto& last = result.history.rows.back();
    std::printf("final epoch %zu: acc_all %.4f acc_old %.4f acc_new %.4f\n", last.epoch,
                last.acc_all, last.acc_old, last.acc_new);
    return 0;
}

void print_acc_block(const char* name, const gface::AccReport& rep) {
    std::printf("%s.acc_all %.6f\n", name, rep.acc_all);
    std::printf("%s.acc_old %.6f\n", name, rep.acc_old);
    std::printf("%s.acc_new %.6f\n", name, rep.acc_new);
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint,
             const std::string& data_path, const std::string& baseline,
             bool per_subset, const std::string& out_csv) {
    if (!baseline.empty() && baseline != "kmeans") {
        throw std::runtime_error("unknown --baseline '" + baseline + "' (try kmeans)");
    }
    const bool baseline_kmeans = baseline == "kmeans";
    AppConfig cfg = load_config(config_path);
    cfg.eval.per_subset_matching = cfg.eval.per_subset_matching || per_subset;
    const gface::ModelParams params = gface::load_checkpoint(checkpoint);
    const gface::SplitDataset ds = gface::load_embeddings(data_path);
    check_compat(params, ds);

    const auto unlabeled = ds.unlabeled_indices();
    std::vector<int> truth(unlabeled.size());
    for (std::size_t i = 0; i < unlabeled.size(); ++i) {
        truth[i] = ds.samples()[unlabeled[i]].true_class;
    }

    gface::AccReport rep;
    {
        const auto feats = dataset_features(ds, unlabeled);
        gface::Trace tr;
        gface::BoundModel m = gface::bind_model(tr, params, false);
        gface::Tensor x = tr.constant({unlabeled.size(), ds.dim()}, feats);
        auto head = gface::main_logits(m, gface::extract(m, x), cfg.train.weights.tau_s);
        const auto preds =
            gface::argmax_rows(head.probs.value(), unlabeled.size(), params.K);
        rep = gface::cluster_acc(preds, truth, params.K, ds.old_count(),
                                 cfg.eval.per_subset_matching);
    }
    print_acc_block("model", rep);

    std::string csv = "method,acc_all,acc_old,acc_new\n";
    char line[160];
    std::snprintf(line, sizeof line, "model,%.6f,%.6f,%.6f\n", rep.acc_all, rep.acc_old,
                  rep.acc_new);
    csv += line;

    if (baseline_kmeans) {
        // k-means on the trained features and, separately, on raw inputs
        const auto raw = dataset_features(ds, unlabeled);
        gface::Trace tr;
        gface::BoundModel m = gface::bind_model(tr, params, false);
        gface::Tensor x = tr.constant({unlabeled.size(), ds.dim()}, raw);
        gface::Tensor z = gface::extract(m, x);
        const std::vector<double> zf(z.value().begin(), z.value().end());

        const auto km_feat =
            gface::kmeans(zf, unlabeled.size(), params.d_f, ds.K(), cfg.eval.kmeans_seed,
                          cfg.eval.kmeans_max_iters);
        const auto rep_feat = gface::cluster_acc(km_feat, truth, ds.K(), ds.old_count(),
                                                 cfg.eval.per_subset_matching);
        print_acc_block("kmeans_features", rep_feat);
        std::snprintf(line, sizeof line, "kmeans_features,%.6f,%.6f,%.6f\n",
                      rep_feat.acc_all, rep_feat.acc_old, rep_feat.acc_new);
        csv += line;

        const auto km_raw = gface::kmeans(raw, unlabeled.size(), ds.dim(), ds.K(),
                                          cfg.eval.kmeans_seed, cfg.eval.kmeans_max_iters);
        const auto rep_raw = gface::cluster_acc(km_raw, truth, ds.K(), ds.old_count(),
                                                cfg.eval.per_subset_matching);
        print_acc_block("kmeans_raw", rep_raw);
        std::snprintf(line, sizeof line, "kmeans_raw,%.6f,%.6f,%.6f\n", rep_raw.acc_all,
                      rep_raw.acc_old, rep_raw.acc_new);
        csv += line;
    }
    if (!out_csv.empty()) write_file_atomic(out_csv, csv);
    return 0;
}

int cmd_bound_check(const std::string& config_path, const std::string& checkpoint,
                    const std::string& data_path, std::optional<double> alpha_flag,
                    std::optional<std::size_t> n_perturb_flag,
                    const std::string& out_csv) {
    AppConfig cfg = load_config(config_path);
    const double alpha = alpha_flag.value_or(cfg.theory.alpha);
    const std::size_t n_perturb = n_perturb_flag.value_or(cfg.theory.n_perturb);

    const gface::ModelParams params = gface::load_checkpoint(checkpoint);
    const gface::SplitDataset ds = gface::load_embeddings(data_path);
    check_compat(params, ds);

    const gface::ModelParams reference = gface::train_reference_supervised(
        ds, params.d_f, params.d_b, params.d_h, cfg.theory.reference_epochs,
        cfg.theory.reference_batch, cfg.theory.reference_lr0, cfg.train.weights.tau_s,
        cfg.train.seed + 1);
    const auto family = gface::make_hypothesis_family(
        params, reference, n_perturb, cfg.theory.perturb_sigma, cfg.train.weights.tau_s,
        cfg.train.seed);
    const gface::BoundReport rep =
        gface::check_bias_bound(family[0], family[1], family, ds, alpha);

    std::printf("alpha %.6f\n", rep.alpha);
    std::printf("theta %.6f\n", rep.theta);
    std::printf("xi_labeled %.6f\n", rep.xi_l);
    std::printf("xi_unlabeled %.6f\n", rep.xi_u);
    std::printf("xi_unlabeled_old %.6f\n", rep.xi_u_old);
    std::printf("xi_unlabeled_new %.6f\n", rep.xi_u_new);
    std::printf("f_discrepancy %.6f\n", rep.delta);
    std::printf("lambda_const %.6f\n", rep.lambda_const);
    std::printf("lhs %.6f\n", rep.lhs);
    std::printf("rhs %.6f\n", rep.rhs);
    std::printf("margin %.6f\n", rep.margin);
    std::printf("coefficient_positive %d\n", rep.coefficient_positive ? 1 : 0);
    std::printf("ordering_assumption_holds %d\n", rep.ordering_assumption_holds ? 1 : 0);
    std::printf("bound_holds %d\n", rep.bound_holds ? 1 : 0);

    if (!out_csv.empty()) {
        char line[512];
        std::snprintf(line, sizeof line,
                      "alpha,theta,xi_l,xi_u,xi_u_old,xi_u_new,delta,lambda_const,lhs,"
                      "rhs,margin,coefficient_positive,ordering_assumption_holds,"
                      "bound_holds\n"
                      "%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%d,%d,%d\n",
                      rep.alpha, rep.theta, rep.xi_l, rep.xi_u, rep.xi_u_old,
                      rep.xi_u_new, rep.delta, rep.lambda_const, rep.lhs, rep.rhs,
                      rep.margin, rep.coefficient_positive ? 1 : 0,
                      rep.ordering_assumption_holds ? 1 : 0, rep.bound_holds ? 1 : 0);
        write_file_atomic(out_csv, line);
    }

    if (!rep.coefficient_positive) {
        std::fprintf(stderr,
                     "bound coefficient is nonpositive: alpha %.4f <= theta %.4f, the "
                     "inequality is not asserted\n",
                     rep.alpha, rep.theta);
        return 2;
    }
    return 0;
}

int cmd_report(const std::string& rundir, const std::string& out) {
    const fs::path history_path = fs::path(rundir) / "history.csv";
    if (!fs::exists(history_path)) {
        throw std::runtime_error("no history.csv under " + rundir);
    }
    const gface::TrainHistory history = gface::read_history_csv(history_path.string());
    if (history.rows.empty()) {
        throw std::runtime_error("history at " + history_path.string() + " is empty");
    }
    fs::create_directories(out);

    std::vector<double> epochs;
    Series rep{"rep", "#1f77b4", {}}, cls{"cls", "#ff7f0e", {}},
        ad{"adversarial", "#2ca02c", {}}, bal{"balance", "#d62728", {}},
        cluster{"cluster", "#9467bd", {}}, total{"total", "#000000", {}};
    Series all{"all", "#000000", {}}, old_acc{"old", "#1f77b4", {}},
        new_acc{"new", "#d62728", {}};
    for (const auto& r : history.rows) {
        epochs.push_back(static_cast<double>(r.epoch));
        rep.y.push_back(r.loss_rep);
        cls.y.push_back(r.loss_cls);
        ad.y.push_back(r.loss_ad);
        bal.y.push_back(r.loss_bal);
        cluster.y.push_back(r.loss_cluster);
        total.y.push_back(r.loss_total);
        all.y.push_back(r.acc_all);
        old_acc.y.push_back(r.acc_old);
        new_acc.y.push_back(r.acc_new);
    }
    write_line_svg(fs::path(out) / "losses.svg", "loss components per epoch", epochs,
                   {rep, cls, ad, bal, cluster, total});
    write_line_svg(fs::path(out) / "accuracy.svg", "All/Old/New accuracy per epoch",
                   epochs, {all, old_acc, new_acc});

    std::string digest = "epoch,loss_total,acc_all,acc_old,acc_new\n";
    char line[160];
    for (const auto& r : history.rows) {
        std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g,%.9g\n", r.epoch,
                      r.loss_total, r.acc_all, r.acc_old, r.acc_new);
        digest += line;
    }
    write_file_atomic(fs::path(out) / "digest.csv", digest);
    std::cout << "wrote " << out << "/losses.svg, accuracy.svg, digest.csv ("
              << history.rows.size() << " epochs)\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"generalized category discovery trainer on embedding data"};
    app.require_subcommand(1);

    std::string config_path, out, data_path, rundir, checkpoint, ablate, out_csv,
        baseline;
    bool force = false, per_subset = false;
    std::optional<std::uint64_t> seed_flag;
    std::optional<double> alpha_flag;
    std::optional<std::size_t> n_perturb_flag;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic embedding dataset");
    gen->add_option("--config", config_path, "JSON config file");
    gen->add_option("--out", out, "output CSV path")->required();
    gen->add_option("--seed", seed_flag, "override the config seed");

    auto* tr = app.add_subcommand("train", "train on an embedding dataset");
    tr->add_option("--config", config_path, "JSON config file");
    tr->add_option("--data", data_path, "embedding CSV")->required();
    tr->add_option("--out", rundir, "run directory")->required();
    tr->add_flag("--force", force, "overwrite an existing run directory");
    tr->add_option("--ablate", ablate, "ablation mode (no-debias)");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--config", config_path, "JSON config file");
    ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    ev->add_option("--data", data_path, "embedding CSV")->required();
    ev->add_option("--baseline", baseline, "baseline to report alongside (kmeans)");
    ev->add_flag("--per-subset", per_subset, "match Old/New inside each subset");
    ev->add_option("--out", out_csv, "write the machine-readable CSV here");

    auto* bc = app.add_subcommand("bound-check", "verify the bias upper bound");
    bc->add_option("--config", config_path, "JSON config file");
    bc->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    bc->add_option("--data", data_path, "embedding CSV with ground truth")->required();
    bc->add_option("--alpha", alpha_flag, "labeled-discrepancy coefficient");
    bc->add_option("--n-perturb", n_perturb_flag, "perturbed copies in the family");
    bc->add_option("--out", out_csv, "write the machine-readable CSV here");

    auto* rp = app.add_subcommand("report", "render SVG plots and a digest from a run");
    rp->add_option("--rundir", rundir, "run directory with history.csv")->required();
    rp->add_option("--out", out, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(config_path, out, seed_flag);
        if (tr->parsed()) return cmd_train(config_path, data_path, rundir, force, ablate);
        if (ev->parsed()) {
            return cmd_eval(config_path, checkpoint, data_path, baseline, per_subset,
                            out_csv);
        }
        if (bc->parsed()) {
            return cmd_bound_check(config_path, checkpoint, data_path, alpha_flag,
                                   n_perturb_flag, out_csv);
        }
        if (rp->parsed()) return cmd_report(rundir, out);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
