#include "gface/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "gface/rng.hpp"

namespace gface {

namespace {

[[noreturn]] void data_error(const std::string& msg) {
    throw std::invalid_argument("data: " + msg);
}

}  // namespace

void AugmentSpec::validate() const {
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
        data_error("augment noise_sigma must be finite and >= 0");
    }
    if (!(mask_fraction >= 0.0 && mask_fraction < 1.0)) {
        data_error("augment mask_fraction must be in [0,1)");
    }
}

SplitDataset SplitDataset::create(std::vector<Sample> samples, std::size_t old_classes,
                                  std::size_t total_classes) {
    if (old_classes == 0 || old_classes >= total_classes) {
        data_error("need 0 < N < K, got N=" + std::to_string(old_classes) +
                   " K=" + std::to_string(total_classes));
    }
    if (samples.empty()) data_error("empty sample set");
    const std::size_t d = samples[0].features.size();
    if (d == 0) data_error("zero-dimensional features");
    std::size_t unlabeled = 0;
    for (const Sample& s : samples) {
        if (s.features.size() != d) {
            data_error("inconsistent feature dimension for sample " + std::to_string(s.id));
        }
        for (double v : s.features) {
            if (!std::isfinite(v)) data_error("non-finite feature in sample " + std::to_string(s.id));
        }
        if (s.true_class < 0 || static_cast<std::size_t>(s.true_class) >= total_classes) {
            data_error("class id " + std::to_string(s.true_class) + " outside [0," +
                       std::to_string(total_classes) + ")");
        }
        if (s.split == SplitTag::kLabeled &&
            static_cast<std::size_t>(s.true_class) >= old_classes) {
            data_error("labeled sample " + std::to_string(s.id) +
                       " carries new-class label " + std::to_string(s.true_class) +
                       " (labeled classes must be old classes)");
        }
        if (s.split == SplitTag::kUnlabeled) ++unlabeled;
    }
    if (unlabeled == 0) data_error("dataset has no unlabeled samples");
    SplitDataset ds;
    ds.samples_ = std::move(samples);
    ds.old_classes_ = old_classes;
    ds.total_classes_ = total_classes;
    return ds;
}

double SplitDataset::theta() const {
    std::size_t unlabeled = 0, unlabeled_old = 0;
    for (const Sample& s : samples_) {
        if (s.split != SplitTag::kUnlabeled) continue;
        ++unlabeled;
        if (static_cast<std::size_t>(s.true_class) < old_classes_) ++unlabeled_old;
    }
    return static_cast<double>(unlabeled_old) / static_cast<double>(unlabeled);
}

std::vector<std::size_t> SplitDataset::labeled_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples_.size(); ++i) {
        if (samples_[i].split == SplitTag::kLabeled) out.push_back(i);
    }
    return out;
}

std::vector<std::size_t> SplitDataset::unlabeled_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples_.size(); ++i) {
        if (samples_[i].split == SplitTag::kUnlabeled) out.push_back(i);
    }
    return out;
}

SplitDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    if (spec.N == 0 || spec.N >= spec.K) {
        data_error("need 0 < N < K, got N=" + std::to_string(spec.N) +
                   " K=" + std::to_string(spec.K));
    }
    if (spec.d < 2) data_error("need d >= 2");
    if (spec.per_class_counts.size() != spec.K) {
        data_error("per_class_counts needs K entries");
    }
    for (std::size_t c : spec.per_class_counts) {
        if (c == 0) data_error("per_class_counts entries must be positive");
    }
    if (!(spec.class_separation >= 0.0)) data_error("class_separation must be >= 0");
    if (!(spec.within_class_sigma >= 0.0)) data_error("within_class_sigma must be >= 0");

    Rng rng(derive_seed(seed, 0xda7a));

    // Class means: +/- scaled basis directions give exact pairwise
    // separation; a seeded random rotation then spreads each class across
    // every coordinate so no single feature carries a whole class. Extra
    // classes beyond 2d fall back to random directions.
    std::vector<std::vector<double>> basis(spec.K, std::vector<double>(spec.d, 0.0));
    const double radius = spec.class_separation / std::sqrt(2.0);
    for (std::size_t c = 0; c < spec.K; ++c) {
        if (c < 2 * spec.d) {
            basis[c][c % spec.d] = (c < spec.d ? radius : -radius);
        } else {
            double norm = 0.0;
            for (double& v : basis[c]) {
                v = rng.normal();
                norm += v * v;
            }
            norm = std::sqrt(std::max(norm, 1e-12));
            for (double& v : basis[c]) v *= radius / norm;
        }
    }
    // random orthogonal matrix via Gram-Schmidt on Gaussian columns
    std::vector<std::vector<double>> rot(spec.d, std::vector<double>(spec.d));
    for (std::size_t r = 0; r < spec.d; ++r) {
        for (std::size_t attempt = 0;; ++attempt) {
            for (double& v : rot[r]) v = rng.normal();
            for (std::size_t p = 0; p < r; ++p) {
                double dot = 0.0;
                for (std::size_t j = 0; j < spec.d; ++j) dot += rot[r][j] * rot[p][j];
                for (std::size_t j = 0; j < spec.d; ++j) rot[r][j] -= dot * rot[p][j];
            }
            double norm = 0.0;
            for (double v : rot[r]) norm += v * v;
            norm = std::sqrt(norm);
            if (norm > 1e-6 || attempt > 8) {
                for (double& v : rot[r]) v /= norm;
                break;
            }
        }
    }
    std::vector<std::vector<double>> means(spec.K, std::vector<double>(spec.d, 0.0));
    for (std::size_t c = 0; c < spec.K; ++c) {
        for (std::size_t i = 0; i < spec.d; ++i) {
            for (std::size_t j = 0; j < spec.d; ++j) {
                means[c][i] += rot[j][i] * basis[c][j];
            }
        }
    }
    for (const OverlapPair& p : spec.overlap_pairs) {
        if (p.class_a < 0 || p.class_b < 0 ||
            static_cast<std::size_t>(p.class_a) >= spec.K ||
            static_cast<std::size_t>(p.class_b) >= spec.K || p.class_a == p.class_b) {
            data_error("overlap pair references invalid classes");
        }
        if (!(p.strength >= 0.0 && p.strength <= 1.0)) {
            data_error("overlap strength must be in [0,1]");
        }
        auto& ma = means[p.class_a];
        auto& mb = means[p.class_b];
        for (std::size_t j = 0; j < spec.d; ++j) {
            const double delta = mb[j] - ma[j];
            ma[j] += 0.5 * p.strength * delta;
            mb[j] -= 0.5 * p.strength * delta;
        }
    }

    std::vector<Sample> samples;
    std::size_t next_id = 0;
    for (std::size_t c = 0; c < spec.K; ++c) {
        for (std::size_t i = 0; i < spec.per_class_counts[c]; ++i) {
            Sample s;
            s.id = next_id++;
            s.true_class = static_cast<int>(c);
            s.features.resize(spec.d);
            for (std::size_t j = 0; j < spec.d; ++j) {
                s.features[j] = means[c][j] + spec.within_class_sigma * rng.normal();
            }
            samples.push_back(std::move(s));
        }
    }

    std::set<int> old_classes;
    for (std::size_t c = 0; c < spec.N; ++c) old_classes.insert(static_cast<int>(c));
    return make_gface_split(std::move(samples), old_classes, spec.labeled_fraction,
                            derive_seed(seed, 0x5417));
}

SplitDataset make_gface_split(std::vector<Sample> samples,
                              const std::set<int>& old_classes,
                              double labeled_fraction, std::uint64_t seed) {
    if (!(labeled_fraction > 0.0 && labeled_fraction < 1.0)) {
        data_error("labeled_fraction must be in (0,1)");
    }
    if (old_classes.empty()) data_error("no old classes given (no labeled data possible)");
    if (samples.empty()) data_error("empty sample set");

    std::set<int> all_classes;
    for (const Sample& s : samples) all_classes.insert(s.true_class);
    for (int c : old_classes) {
        if (!all_classes.count(c)) {
            data_error("old class " + std::to_string(c) + " has no samples");
        }
    }
    if (all_classes.size() == old_classes.size()) {
        // tolerated: a fully-old dataset still has 0 < N < K violated
        data_error("no new classes present; need at least one class outside the old set");
    }

    // canonical remap: old classes first (sorted), then new classes (sorted)
    std::map<int, int> remap;
    int next = 0;
    for (int c : old_classes) remap[c] = next++;
    for (int c : all_classes) {
        if (!old_classes.count(c)) remap[c] = next++;
    }

    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        samples[i].true_class = remap.at(samples[i].true_class);
        samples[i].split = SplitTag::kUnlabeled;
        by_class[samples[i].true_class].push_back(i);
    }

    Rng rng(derive_seed(seed, 0x5b711));
    const int n_old = static_cast<int>(old_classes.size());
    for (int c = 0; c < n_old; ++c) {
        auto& members = by_class.at(c);
        if (members.size() < 2) {
            data_error("old class " + std::to_string(c) + " has fewer than 2 samples");
        }
        const auto take = static_cast<std::size_t>(
            labeled_fraction * static_cast<double>(members.size()));
        rng.shuffle(members);
        for (std::size_t i = 0; i < take; ++i) {
            samples[members[i]].split = SplitTag::kLabeled;
        }
    }

    return SplitDataset::create(std::move(samples), old_classes.size(),
                                all_classes.size());
}

// ---- embedding CSV ----

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(',', start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

[[noreturn]] void parse_error(const std::string& path, std::size_t lineno,
                              const std::string& msg) {
    data_error(path + ":" + std::to_string(lineno) + ": " + msg);
}

double parse_double(const std::string& path, std::size_t lineno, const std::string& s) {
    double v = 0.0;
    const char* begin = s.data();
    const char* end = begin + s.size();
    auto [ptr, ec] = std::from_chars(begin, end, v);
    if (ec != std::errc{} || ptr != end) {
        parse_error(path, lineno, "bad numeric literal '" + s + "'");
    }
    return v;
}

long parse_int(const std::string& path, std::size_t lineno, const std::string& s) {
    long v = 0;
    const char* begin = s.data();
    const char* end = begin + s.size();
    auto [ptr, ec] = std::from_chars(begin, end, v);
    if (ec != std::errc{} || ptr != end) {
        parse_error(path, lineno, "bad integer literal '" + s + "'");
    }
    return v;
}

}  // namespace

SplitDataset load_embeddings(const std::string& path) {
    std::ifstream in(path);
    if (!in) data_error("cannot open " + path);
    std::string line;
    std::size_t lineno = 0;

    if (!std::getline(in, line)) data_error(path + ": empty file");
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split_csv_line(line);
    if (header.size() < 4 || header[0] != "id" || header[1] != "split" ||
        header[2] != "class") {
        parse_error(path, lineno, "expected header id,split,class,feat_0,...");
    }
    const std::size_t d = header.size() - 3;
    for (std::size_t j = 0; j < d; ++j) {
        if (header[3 + j] != "feat_" + std::to_string(j)) {
            parse_error(path, lineno, "bad feature column '" + header[3 + j] + "'");
        }
    }

    std::vector<Sample> samples;
    int max_class = -1;
    std::set<int> labeled_classes, seen_classes;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != 3 + d) {
            parse_error(path, lineno, "ragged row: expected " + std::to_string(3 + d) +
                                          " fields, got " + std::to_string(fields.size()));
        }
        Sample s;
        s.id = static_cast<std::size_t>(parse_int(path, lineno, fields[0]));
        if (fields[1] == "labeled") {
            s.split = SplitTag::kLabeled;
        } else if (fields[1] == "unlabeled") {
            s.split = SplitTag::kUnlabeled;
        } else {
            parse_error(path, lineno, "unknown split tag '" + fields[1] + "'");
        }
        s.true_class = static_cast<int>(parse_int(path, lineno, fields[2]));
        if (s.true_class < 0) parse_error(path, lineno, "negative class id");
        s.features.resize(d);
        for (std::size_t j = 0; j < d; ++j) {
            s.features[j] = parse_double(path, lineno, fields[3 + j]);
        }
        max_class = std::max(max_class, s.true_class);
        seen_classes.insert(s.true_class);
        if (s.split == SplitTag::kLabeled) labeled_classes.insert(s.true_class);
        samples.push_back(std::move(s));
    }
    if (samples.empty()) data_error(path + ": no data rows");

    const std::size_t K = static_cast<std::size_t>(max_class) + 1;
    if (seen_classes.size() != K) {
        data_error(path + ": class ids must be dense in [0," + std::to_string(K) + ")");
    }
    if (labeled_classes.empty()) data_error(path + ": no labeled rows");
    const std::size_t N = labeled_classes.size();
    // canonical layout: old (= labeled) classes must occupy [0, N)
    for (const Sample& s : samples) {
        if (s.split == SplitTag::kLabeled && static_cast<std::size_t>(s.true_class) >= N) {
            data_error(path + ": labeled sample id " + std::to_string(s.id) +
                       " carries new-class label " + std::to_string(s.true_class) +
                       " (labeled classes must form the old-class prefix [0," +
                       std::to_string(N) + "))");
        }
    }
    return SplitDataset::create(std::move(samples), N, K);
}

void save_embeddings(const SplitDataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);  // binary: LF endings everywhere
    if (!out) data_error("cannot write " + path);
    const std::size_t d = ds.dim();
    out << "id,split,class";
    for (std::size_t j = 0; j < d; ++j) out << ",feat_" << j;
    out << "\n";
    char buf[40];
    for (const Sample& s : ds.samples()) {
        out << s.id << ',' << (s.split == SplitTag::kLabeled ? "labeled" : "unlabeled")
            << ',' << s.true_class;
        for (double v : s.features) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            out << ',' << buf;
        }
        out << "\n";
    }
    if (!out) data_error("write failed for " + path);
}

std::pair<std::vector<double>, std::vector<double>> augment_two_views(
    const Sample& sample, const AugmentSpec& spec, std::uint64_t seed) {
    spec.validate();
    const std::size_t d = sample.features.size();
    const auto masked = static_cast<std::size_t>(
        spec.mask_fraction * static_cast<double>(d) + 0.5);

    auto make_view = [&](std::uint64_t stream) {
        std::vector<double> v = sample.features;
        Rng rng(derive_seed(seed, stream));
        if (spec.noise_sigma > 0.0) {
            for (double& x : v) x += spec.noise_sigma * rng.normal();
        }
        std::vector<std::size_t> mask_idx;
        if (masked > 0) {
            std::vector<std::size_t> order(d);
            for (std::size_t j = 0; j < d; ++j) order[j] = j;
            rng.shuffle(order);
            mask_idx.assign(order.begin(), order.begin() + masked);
            for (std::size_t j : mask_idx) v[j] = 0.0;
        }
        return std::make_pair(std::move(v), std::move(mask_idx));
    };

    auto a = make_view(1).first;
    auto b = make_view(2).first;
    // mask-only augmentation: re-draw the second mask if it collided, so the
    // two views differ whenever the augmentation is not all-zero
    if (spec.noise_sigma == 0.0 && masked > 0 && masked < d) {
        std::uint64_t bump = 3;
        while (a == b && bump < 16) b = make_view(bump++).first;
    }
    return {std::move(a), std::move(b)};
}

std::vector<Batch> make_batches(const SplitDataset& ds, std::size_t batch_size,
                                std::uint64_t seed) {
    if (batch_size < 2) data_error("batch_size must be >= 2");
    std::vector<std::size_t> order(ds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed, 0xba7c4));
    rng.shuffle(order);

    std::vector<Batch> batches;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t stop = std::min(order.size(), start + batch_size);
        Batch b;
        for (std::size_t i = start; i < stop; ++i) {
            const Sample& s = ds.samples()[order[i]];
            const std::size_t row = b.sample_ids.size();
            b.sample_ids.push_back(order[i]);
            if (s.split == SplitTag::kLabeled) {
                b.labeled_rows.push_back(row);
                b.labels.push_back(s.true_class);
            } else {
                b.unlabeled_rows.push_back(row);
                b.labels.push_back(-1);  // ground truth stays hidden here
            }
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

}  // namespace gface
