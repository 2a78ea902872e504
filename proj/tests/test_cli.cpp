#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output;  // stdout + stderr
};

RunResult run_cli(const std::string& args, const std::string& env = "") {
    const std::string cmd = env + " " + GFACE_CLI_PATH + " " + args + " 2>&1";
    RunResult r;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    char buf[512];
    while (fgets(buf, sizeof buf, pipe)) r.output += buf;
    const int status = pclose(pipe);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), {});
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("gface_cli_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    static int& counter() {
        static int c = 0;
        return c;
    }
    std::string operator/(const char* name) const { return (path / name).string(); }
};

void write_tiny_config(const fs::path& p, bool small_epochs = true) {
    std::ofstream out(p);
    out << R"({
  "data": {"K": 3, "N": 2, "d": 6, "per_class_counts": [24, 24, 24], "class_separation": 8.0},
  "model": {"d_f": 12, "d_b": 6, "d_h": 8},
  "train": {"epochs": )"
        << (small_epochs ? 3 : 8) << R"(, "batch_size": 24, "warmup_epochs": 1, "seed": 11},
  "theory": {"n_perturb": 2, "reference_epochs": 4}
})";
}

}  // namespace

TEST_CASE("gen-data writes the dataset plus a manifest with the constructed theta") {
    TempDir dir;
    const auto r = run_cli("gen-data --out " + (dir / "data.csv"));
    CHECK(r.exit_code == 0);
    CHECK(fs::exists(dir.path / "data.csv"));
    const std::string manifest = slurp(dir.path / "data.csv.manifest.json");
    CHECK(manifest.find("\"K\": 7") != std::string::npos);
    CHECK(manifest.find("\"N\": 4") != std::string::npos);
    CHECK(manifest.find("\"theta\": 0.4") != std::string::npos);
}

TEST_CASE("gen-data without --out fails and leaves nothing behind") {
    TempDir dir;
    const auto r = run_cli("gen-data");
    CHECK(r.exit_code != 0);
    CHECK(fs::is_empty(dir.path));
}

TEST_CASE("different seeds change the data but not the manifest counts") {
    TempDir dir;
    write_tiny_config(dir.path / "cfg.json");
    const std::string cfg = " --config " + (dir / "cfg.json");
    CHECK(run_cli("gen-data" + cfg + " --out " + (dir / "a.csv") + " --seed 1").exit_code ==
          0);
    CHECK(run_cli("gen-data" + cfg + " --out " + (dir / "b.csv") + " --seed 2").exit_code ==
          0);
    CHECK(slurp(dir.path / "a.csv") != slurp(dir.path / "b.csv"));
    auto counts = [&](const char* name) {
        const std::string m = slurp(dir.path / (std::string(name) + ".manifest.json"));
        const std::size_t from = m.find("per_class_counts");
        return m.substr(from, m.find(']', from) - from);
    };
    CHECK(counts("a.csv") == counts("b.csv"));
}

TEST_CASE("GFACE_SEED overrides the seed flag and config") {
    TempDir dir;
    write_tiny_config(dir.path / "cfg.json");
    const std::string cfg = " --config " + (dir / "cfg.json");
    CHECK(run_cli("gen-data" + cfg + " --out " + (dir / "a.csv") + " --seed 1",
                  "GFACE_SEED=9")
              .exit_code == 0);
    CHECK(run_cli("gen-data" + cfg + " --out " + (dir / "b.csv") + " --seed 2",
                  "GFACE_SEED=9")
              .exit_code == 0);
    CHECK(slurp(dir.path / "a.csv") == slurp(dir.path / "b.csv"));
}

TEST_CASE("unknown config keys are rejected before any work happens") {
    TempDir dir;
    {
        std::ofstream out(dir.path / "bad.json");
        out << R"({"train": {"epochs": 2, "warmup": 1}})";
    }
    const auto r = run_cli("gen-data --config " + (dir / "bad.json") + " --out " +
                           (dir / "x.csv"));
    CHECK(r.exit_code != 0);
    CHECK(r.output.find("unknown key") != std::string::npos);
    CHECK(r.output.find("train.warmup") != std::string::npos);
    CHECK_FALSE(fs::exists(dir.path / "x.csv"));
}

TEST_CASE("train, eval, bound-check and report run end to end") {
    TempDir dir;
    write_tiny_config(dir.path / "cfg.json");
    const std::string cfg = " --config " + (dir / "cfg.json");
    REQUIRE(run_cli("gen-data" + cfg + " --out " + (dir / "data.csv")).exit_code == 0);

    const auto train1 = run_cli("train" + cfg + " --data " + (dir / "data.csv") +
                                " --out " + (dir / "run"));
    CHECK(train1.exit_code == 0);
    CHECK(train1.output.find("acc_all") != std::string::npos);
    CHECK(fs::exists(dir.path / "run/config.json"));
    CHECK(fs::exists(dir.path / "run/checkpoint.gfck"));
    CHECK(fs::exists(dir.path / "run/history.csv"));

    // refuses to reuse the run directory without --force
    const auto train2 = run_cli("train" + cfg + " --data " + (dir / "data.csv") +
                                " --out " + (dir / "run"));
    CHECK(train2.exit_code != 0);
    CHECK(train2.output.find("--force") != std::string::npos);
    CHECK(run_cli("train" + cfg + " --data " + (dir / "data.csv") + " --out " +
                  (dir / "run") + " --force")
              .exit_code == 0);

    const auto ev = run_cli("eval" + cfg + " --checkpoint " + (dir / "run") +
                            "/checkpoint.gfck --data " + (dir / "data.csv") +
                            " --baseline kmeans --out " + (dir / "eval.csv"));
    CHECK(ev.exit_code == 0);
    CHECK(ev.output.find("model.acc_all") != std::string::npos);
    CHECK(ev.output.find("kmeans_features.acc_all") != std::string::npos);
    CHECK(ev.output.find("kmeans_raw.acc_all") != std::string::npos);
    const std::string eval_csv = slurp(dir.path / "eval.csv");
    CHECK(eval_csv.find("method,acc_all,acc_old,acc_new") == 0);

    const auto bc = run_cli("bound-check" + cfg + " --checkpoint " + (dir / "run") +
                            "/checkpoint.gfck --data " + (dir / "data.csv") +
                            " --alpha 2 --out " + (dir / "bound.csv"));
    CHECK(bc.exit_code == 0);
    CHECK(bc.output.find("lhs") != std::string::npos);
    CHECK(bc.output.find("rhs") != std::string::npos);
    CHECK(bc.output.find("ordering_assumption_holds") != std::string::npos);

    const auto rp =
        run_cli("report --rundir " + (dir / "run") + " --out " + (dir / "rep"));
    CHECK(rp.exit_code == 0);
    CHECK(fs::exists(dir.path / "rep/losses.svg"));
    CHECK(fs::exists(dir.path / "rep/accuracy.svg"));
    const std::string digest = slurp(dir.path / "rep/digest.csv");
    CHECK(std::count(digest.begin(), digest.end(), '\n') == 1 + 3);  // header + epochs
}

TEST_CASE("the effective-config echo reproduces a run bitwise") {
    TempDir dir;
    write_tiny_config(dir.path / "cfg.json");
    const std::string cfg = " --config " + (dir / "cfg.json");
    REQUIRE(run_cli("gen-data" + cfg + " --out " + (dir / "data.csv")).exit_code == 0);
    REQUIRE(run_cli("train" + cfg + " --data " + (dir / "data.csv") + " --out " +
                    (dir / "run1"))
                .exit_code == 0);
    // feed the echoed config back in
    REQUIRE(run_cli("train --config " + (dir / "run1") + "/config.json --data " +
                    (dir / "data.csv") + " --out " + (dir / "run2"))
                .exit_code == 0);
    CHECK(slurp(dir.path / "run1/checkpoint.gfck") ==
          slurp(dir.path / "run2/checkpoint.gfck"));
    CHECK(slurp(dir.path / "run1/history.csv") == slurp(dir.path / "run2/history.csv"));
}

TEST_CASE("the no-debias ablation zeroes the three debias loss columns") {
    TempDir dir;
    write_tiny_config(dir.path / "cfg.json");
    const std::string cfg = " --config " + (dir / "cfg.json");
    REQUIRE(run_cli("gen-data" + cfg + " --out " + (dir / "data.csv")).exit_code == 0);
    REQUIRE(run_cli("train" + cfg + " --data " + (dir / "data.csv") + " --out " +
                    (dir / "run") + " --ablate no-debias")
                .exit_code == 0);
    std::ifstream in(dir.path / "run/history.csv");
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        // columns: epoch,lr,tau_t,e_t,rep,cls,ad,bal,cluster,...
        std::stringstream ss(line);
        std::string field;
        for (int i = 0; i <= 8; ++i) {
            std::getline(ss, field, ',');
            if (i >= 6) CHECK(std::stod(field) == 0.0);
        }
    }
}

TEST_CASE("eval names a dimension mismatch explicitly") {
    TempDir dir;
    write_tiny_config(dir.path / "cfg.json");
    const std::string cfg = " --config " + (dir / "cfg.json");
    REQUIRE(run_cli("gen-data" + cfg + " --out " + (dir / "data.csv")).exit_code == 0);
    REQUIRE(run_cli("train" + cfg + " --data " + (dir / "data.csv") + " --out " +
                    (dir / "run"))
                .exit_code == 0);
    {
        std::ofstream out(dir.path / "other.json");
        out << R"({"data": {"K": 3, "N": 2, "d": 9, "per_class_counts": [24,24,24]}})";
    }
    REQUIRE(run_cli("gen-data --config " + (dir / "other.json") + " --out " +
                    (dir / "other.csv"))
                .exit_code == 0);
    const auto r = run_cli("eval" + cfg + " --checkpoint " + (dir / "run") +
                           "/checkpoint.gfck --data " + (dir / "other.csv"));
    CHECK(r.exit_code != 0);
    CHECK(r.output.find("d=6") != std::string::npos);
    CHECK(r.output.find("d=9") != std::string::npos);
}

TEST_CASE("bound-check flags alpha at or below theta with a nonzero exit") {
    TempDir dir;
    write_tiny_config(dir.path / "cfg.json");
    const std::string cfg = " --config " + (dir / "cfg.json");
    REQUIRE(run_cli("gen-data" + cfg + " --out " + (dir / "data.csv")).exit_code == 0);
    REQUIRE(run_cli("train" + cfg + " --data " + (dir / "data.csv") + " --out " +
                    (dir / "run"))
                .exit_code == 0);
    const auto r = run_cli("bound-check" + cfg + " --checkpoint " + (dir / "run") +
                           "/checkpoint.gfck --data " + (dir / "data.csv") +
                           " --alpha 0.2");
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("nonpositive") != std::string::npos);
}

TEST_CASE("growing the hypothesis family never shrinks the f-discrepancy") {
    TempDir dir;
    write_tiny_config(dir.path / "cfg.json");
    const std::string cfg = " --config " + (dir / "cfg.json");
    REQUIRE(run_cli("gen-data" + cfg + " --out " + (dir / "data.csv")).exit_code == 0);
    REQUIRE(run_cli("train" + cfg + " --data " + (dir / "data.csv") + " --out " +
                    (dir / "run"))
                .exit_code == 0);
    auto delta_for = [&](const char* n, const char* out) {
        REQUIRE(run_cli("bound-check" + cfg + " --checkpoint " + (dir / "run") +
                        "/checkpoint.gfck --data " + (dir / "data.csv") +
                        " --n-perturb " + n + " --out " + (dir / out))
                    .exit_code == 0);
        std::ifstream in(dir.path / out);
        std::string header, row, field;
        std::getline(in, header);
        std::getline(in, row);
        std::stringstream ss(row);
        for (int i = 0; i <= 6; ++i) std::getline(ss, field, ',');  // delta column
        return std::stod(field);
    };
    const double d0 = delta_for("0", "b0.csv");
    const double d4 = delta_for("4", "b4.csv");
    CHECK(d4 >= d0);
}

TEST_CASE("report polylines span the plot area exactly and reject empty histories") {
    TempDir dir;
    write_tiny_config(dir.path / "cfg.json");
    const std::string cfg = " --config " + (dir / "cfg.json");
    REQUIRE(run_cli("gen-data" + cfg + " --out " + (dir / "data.csv")).exit_code == 0);
    REQUIRE(run_cli("train" + cfg + " --data " + (dir / "data.csv") + " --out " +
                    (dir / "run"))
                .exit_code == 0);
    REQUIRE(run_cli("report --rundir " + (dir / "run") + " --out " + (dir / "rep"))
                .exit_code == 0);

    // parse polyline points: x must start at 60 and end at 780 (full range)
    const std::string svg = slurp(dir.path / "rep/accuracy.svg");
    std::size_t pos = svg.find("points=\"");
    REQUIRE(pos != std::string::npos);
    pos += 8;
    const std::size_t end = svg.find('"', pos);
    std::stringstream pts(svg.substr(pos, end - pos));
    double xmin = 1e9, xmax = -1e9, x, y;
    char comma;
    while (pts >> x >> comma >> y) {
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
    }
    CHECK(xmin == doctest::Approx(60.0));
    CHECK(xmax == doctest::Approx(780.0));

    // y extremes of the full series set must touch the plot's top or bottom
    double ymin = 1e9, ymax = -1e9;
    std::size_t search = 0;
    while ((search = svg.find("points=\"", search)) != std::string::npos) {
        search += 8;
        const std::size_t stop = svg.find('"', search);
        std::stringstream all(svg.substr(search, stop - search));
        while (all >> x >> comma >> y) {
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
        search = stop;
    }
    CHECK(ymin == doctest::Approx(30.0));
    CHECK(ymax == doctest::Approx(440.0));

    // empty history: header only
    fs::create_directories(dir.path / "empty_run");
    {
        std::ofstream out(dir.path / "empty_run/history.csv");
        out << "epoch,lr,tau_t,e_t,loss_rep,loss_cls,loss_ad,loss_bal,loss_cluster,"
               "loss_total,acc_all,acc_old,acc_new\n";
    }
    const auto r =
        run_cli("report --rundir " + (dir / "empty_run") + " --out " + (dir / "rep2"));
    CHECK(r.exit_code != 0);
    CHECK_FALSE(fs::exists(dir.path / "rep2/losses.svg"));
}
