#include <catch2/catch_amalgamated.hpp>

#include <cleanprio/experiment.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

using namespace cleanprio;
namespace fs = std::filesystem;
using experiment::ExperimentConfig;
using numcore::SeededRng;

namespace {

// scratch directory per test run, removed at process exit by the OS tmp
// cleaner; unique enough for parallel ctest invocations
fs::path scratch() {
    static const fs::path base = [] {
        auto p = fs::temp_directory_path() /
                 ("cleanprio_io_test_" + std::to_string(static_cast<unsigned long>(::getpid())));
        fs::create_directories(p);
        return p;
    }();
    return base;
}

std::vector<std::string> split(const std::string& line, char sep = ',') {
    std::vector<std::string> out;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, sep)) out.push_back(cell);
    if (!line.empty() && line.back() == sep) out.push_back("");
    return out;
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::string line;
    std::stringstream ss(text);
    while (std::getline(ss, line)) out.push_back(line);
    return out;
}

trainer::DynamicsTrace tiny_trace(double delta, long long instrument_every = 2) {
    SeededRng rng(3);
    auto train = data::gen_two_clusters(40, {-0.25, 0.0}, {0.25, 0.0}, 0.1, rng);
    if (delta > 0.0) train = data::corrupt_labels(train, delta, rng);
    auto test = data::gen_two_clusters(20, {-0.25, 0.0}, {0.25, 0.0}, 0.1, rng);
    network::NetworkConfig nc;
    nc.input_dim = 2;
    nc.hidden_widths = {32};
    auto state = network::init_ntk(nc, rng);
    trainer::TrainConfig tc;
    tc.eta = 0.5;
    tc.max_steps = 6;
    tc.eval_every = 2;
    tc.instrument_every = instrument_every;
    tc.track_classes = {0, 1};
    return trainer::run(state, train, test, tc);
}

}  // namespace

TEST_CASE("doubles are written shortest round-trip") {
    CHECK(io::format_double(0.1) == "0.1");
    CHECK(io::format_double(2.0) == "2");
    CHECK(io::format_double(-0.25) == "-0.25");
    CHECK(io::format_double(0.0) == "0");
    const double third = 1.0 / 3.0;
    CHECK(std::stod(io::format_double(third)) == third);
    // stod throws on subnormals, so round-trip the extremes through strtod
    const double tiny = 4.9406564584124654e-324;
    CHECK(std::strtod(io::format_double(tiny).c_str(), nullptr) == tiny);
    const double huge = 1.7976931348623157e308;
    CHECK(std::strtod(io::format_double(huge).c_str(), nullptr) == huge);
}

TEST_CASE("csv builder enforces shape and rejects separators") {
    io::CsvBuilder csv({"a", "b"});
    csv.row({"1", "2"});
    CHECK(csv.str() == "a,b\n1,2\n");
    CHECK_THROWS_AS(csv.row({"1"}), io::io_error);
    CHECK_THROWS_AS(csv.row({"1", "x,y"}), io::io_error);
    CHECK_THROWS_AS(csv.row({"1", "x\ny"}), io::io_error);
}

TEST_CASE("atomic text write creates directories and leaves no temp files") {
    const fs::path dir = scratch() / "atomic" / "nested";
    const fs::path target = dir / "file.txt";
    io::write_text_atomic(target, "hello\n");
    CHECK(io::read_text(target) == "hello\n");
    io::write_text_atomic(target, "replaced\n");
    CHECK(io::read_text(target) == "replaced\n");
    std::size_t entries = 0;
    for (const auto& e : fs::directory_iterator(dir)) {
        (void)e;
        ++entries;
    }
    CHECK(entries == 1);  // no .tmp-* litter
    CHECK_THROWS_AS(io::read_text(scratch() / "missing.txt"), io::io_error);
}

TEST_CASE("trace csv has the fixed schema and per-class dominance columns") {
    auto trace = tiny_trace(0.25);
    const auto text = io::trace_csv(trace);
    auto rows = lines_of(text);
    REQUIRE(rows.size() == trace.checkpoints.size() + 1);

    const std::string expected_header =
        "step,loss_total,loss_clean,loss_noise,loss_truth,err_total,err_clean,err_noise,"
        "test_loss,test_err,resid_clean,resid_noise,"
        "ratio_0,alpha_0,cos_cn_0,eta_eff_0,ratio_1,alpha_1,cos_cn_1,eta_eff_1";
    CHECK(rows[0] == expected_header);

    const auto header = split(rows[0]);
    for (std::size_t i = 0; i < trace.checkpoints.size(); ++i) {
        const auto& cp = trace.checkpoints[i];
        auto cells = split(rows[i + 1]);
        REQUIRE(cells.size() == header.size());
        CHECK(cells[0] == std::to_string(cp.step));
        // scalar metrics parse back to the exact stored double
        CHECK(std::stod(cells[1]) == cp.loss_total);
        CHECK(std::stod(cells[9]) == cp.test_err);
        const bool has_dom = cp.instrumented;
        for (std::size_t k = 12; k < cells.size(); ++k)
            CHECK(cells[k].empty() == !has_dom);
    }
}

TEST_CASE("trace csv leaves noise columns empty on clean data") {
    auto trace = tiny_trace(0.0);
    auto rows = lines_of(io::trace_csv(trace));
    auto header = split(rows[0]);
    REQUIRE(rows.size() >= 2);
    for (std::size_t r = 1; r < rows.size(); ++r) {
        auto cells = split(rows[r]);
        REQUIRE(cells.size() == header.size());
        CHECK(cells[3].empty());   // loss_noise
        CHECK(cells[7].empty());   // err_noise
        CHECK(cells[11].empty());  // resid_noise
        for (std::size_t k = 12; k < cells.size(); ++k) CHECK(cells[k].empty());
        CHECK(!cells[2].empty());  // loss_clean is always present
    }
}

TEST_CASE("angle curve csv carries grid endpoints and kind tags") {
    SeededRng rng(5);
    std::vector<theory::AngleCurve> curves;
    curves.push_back(theory::angle_curve(theory::NetKind::linear, 2, 3, 64, 2, rng));
    curves.push_back(theory::angle_curve(theory::NetKind::relu, 2, 3, 64, 2, rng));
    auto rows = lines_of(io::angle_curve_csv(curves));
    REQUIRE(rows.size() == 1 + 2 * 3);
    CHECK(rows[0] == "theta_d_rad,theta_h_closed,theta_h_mc_mean,theta_h_mc_se,kind,depth,width");
    auto first = split(rows[1]);
    auto last = split(rows[3]);
    CHECK(std::stod(first[0]) == 0.0);
    CHECK(std::stod(last[0]) == Catch::Approx(3.14159265358979).margin(1e-12));
    CHECK(first[4] == "linear");
    CHECK(split(rows[4])[4] == "relu");
    CHECK(first[5] == "2");
    CHECK(first[6] == "64");
}

TEST_CASE("histogram csv emits every one-degree bin") {
    analysis::AngleHistogram h;
    h.add_deg(0.4);
    h.add_deg(90.0);
    h.add_deg(180.0);
    std::vector<io::LabeledHistogram> entries{{analysis::AngleKind::within, 1, h}};
    auto rows = lines_of(io::theta_hist_csv(entries));
    REQUIRE(rows.size() == 1 + analysis::AngleHistogram::kBins);
    CHECK(rows[0] == "kind,class,bin_low_deg,bin_high_deg,count");
    long long total = 0;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        auto cells = split(rows[r]);
        CHECK(cells[0] == "within");
        CHECK(cells[1] == "1");
        CHECK(std::stoll(cells[3]) == std::stoll(cells[2]) + 1);
        total += std::stoll(cells[4]);
    }
    CHECK(total == 3);
    CHECK(split(rows[1])[4] == "1");      // 0.4 deg lands in bin [0, 1)
    CHECK(split(rows.back())[4] == "1");  // exact 180 lands in the last bin
}

TEST_CASE("sweep csv flags and axes") {
    trainer::SweepRow row;
    row.point = {128, 0.3, 7};
    row.stop_step = 40;
    row.min_test_error = 0.125;
    row.final_test_error = 0.25;
    row.below_noise = true;
    row.early_clean_priority = false;
    row.aborted = false;
    auto rows = lines_of(io::sweep_csv(std::vector<trainer::SweepRow>{row}));
    REQUIRE(rows.size() == 2);
    CHECK(rows[0] ==
          "width,delta,seed,min_test_err,final_test_err,stop_step,below_noise,"
          "early_clean_priority,aborted");
    CHECK(rows[1] == "128,0.3,7,0.125,0.25,40,1,0,0");
}

TEST_CASE("parameter snapshots round trip bitwise and validate their header") {
    SeededRng rng(9);
    network::NetworkConfig nc;
    nc.input_dim = 3;
    nc.hidden_widths = {16};
    auto state = network::init_ntk(nc, rng);
    const fs::path path = scratch() / "params.bin";
    io::save_params(path, state, 42);

    auto other = network::init_ntk(nc, rng);
    REQUIRE(other.params != state.params);
    CHECK(io::load_params(path, other) == 42);
    CHECK(other.params == state.params);

    network::NetworkConfig small = nc;
    small.hidden_widths = {8};
    auto mismatched = network::init_ntk(small, rng);
    CHECK_THROWS_AS(io::load_params(path, mismatched), io::io_error);

    io::write_text_atomic(scratch() / "junk.bin", "notasnapshot");
    CHECK_THROWS_AS(io::load_params(scratch() / "junk.bin", other), io::io_error);
}

TEST_CASE("config serializes completely and round trips") {
    auto cfg = experiment::default_config();
    cfg.seed = 99;
    cfg.dataset.delta = 0.4;
    cfg.dataset.keep_classes = {7, 9};
    cfg.dataset.relabel = {{7, 0}, {9, 1}};
    cfg.network.hidden_widths = {64, 32};
    cfg.train.loss = "cross_entropy";
    cfg.sweep.noise_levels = {0.1, 0.2};
    auto text = experiment::config_json(cfg).dump(2);
    auto back = experiment::parse_config(text);
    CHECK(back.seed == 99);
    CHECK(back.dataset.delta == 0.4);
    CHECK(back.dataset.keep_classes == std::vector<int>{7, 9});
    CHECK(back.dataset.relabel == std::map<int, int>{{7, 0}, {9, 1}});
    CHECK(back.network.hidden_widths == std::vector<std::size_t>{64, 32});
    CHECK(back.train.loss == "cross_entropy");
    CHECK(back.sweep.noise_levels == std::vector<double>{0.1, 0.2});
    // serialization is stable: parse -> serialize is a fixed point
    CHECK(experiment::config_json(back).dump(2) == text);
}

TEST_CASE("config parser rejects unknown keys, bad types and wrong versions") {
    using experiment::config_error;
    CHECK_THROWS_AS(experiment::parse_config("not json"), config_error);
    CHECK_THROWS_AS(experiment::parse_config(R"({"bogus": 1})"), config_error);
    CHECK_THROWS_AS(experiment::parse_config(R"({"dataset": {"bogus": 1}})"), config_error);
    CHECK_THROWS_AS(experiment::parse_config(R"({"train": {"eta": "fast"}})"), config_error);
    CHECK_THROWS_AS(experiment::parse_config(R"({"schema_version": 2})"), config_error);
    CHECK_THROWS_AS(experiment::parse_config(R"({"dataset": {"relabel": {"seven": 0}}})"),
                    config_error);
    // partial configs are fine: missing keys fall back to defaults
    auto cfg = experiment::parse_config(R"({"seed": 5})");
    CHECK(cfg.seed == 5);
    CHECK(cfg.dataset.kind == "synthetic_clusters");
}

TEST_CASE("seed derivation separates the four streams") {
    auto a = experiment::derive_seeds(1);
    auto b = experiment::derive_seeds(1);
    CHECK(a.train == b.train);
    CHECK(a.data.next_u64() == b.data.next_u64());
    auto c = experiment::derive_seeds(2);
    CHECK(a.train != c.train);
    // the four streams of one master seed disagree pairwise
    auto s = experiment::derive_seeds(1);
    const auto v1 = s.data.next_u64();
    const auto v2 = s.init.next_u64();
    const auto v3 = s.analysis.next_u64();
    CHECK(v1 != v2);
    CHECK(v2 != v3);
    CHECK(v1 != s.train);
}

TEST_CASE("synthetic dataset builder honors class count and corruption") {
    auto cfg = experiment::default_config();
    cfg.dataset.num_classes = 5;
    cfg.dataset.n_train = 500;
    cfg.dataset.n_test = 100;
    cfg.dataset.delta = 0.2;
    auto seeds = experiment::derive_seeds(3);
    auto [train, test] = experiment::build_dataset(cfg, seeds.data);
    CHECK(train.size() == 500);
    CHECK(test.size() == 100);
    CHECK(train.num_classes == 5);
    CHECK(train.noise_count() == 100);  // floor(0.2 * 100) per truth class
    CHECK(test.noise_count() == 0);
    for (std::size_t i = 0; i < test.size(); ++i) CHECK(test.labels[i] == test.truth[i]);
}

TEST_CASE("idx dataset builder filters, relabels and rescales") {
    auto cfg = experiment::default_config();
    cfg.dataset.kind = "idx";
    cfg.base_dir = CLEANPRIO_DATA_DIR;
    cfg.dataset.train_images = "train-images.idx3-ubyte";
    cfg.dataset.train_labels = "train-labels.idx1-ubyte";
    cfg.dataset.test_images = "test-images.idx3-ubyte";
    cfg.dataset.test_labels = "test-labels.idx1-ubyte";
    cfg.dataset.keep_classes = {7, 9};
    cfg.dataset.relabel = {{7, 0}, {9, 1}};
    cfg.dataset.delta = 0.4;
    cfg.dataset.input_norm = 0.25;
    auto seeds = experiment::derive_seeds(11);
    auto [train, test] = experiment::build_dataset(cfg, seeds.data);
    CHECK(train.size() == 1639);
    CHECK(test.size() == 409);
    CHECK(train.num_classes == 2);
    for (std::size_t i : {std::size_t{0}, train.size() - 1}) {
        double ss = 0.0;
        for (double v : train.features.row(i)) ss += v * v;
        CHECK(std::sqrt(ss) == Catch::Approx(0.25).margin(1e-12));
    }
    const double frac = static_cast<double>(train.noise_count()) / static_cast<double>(train.size());
    CHECK(frac == Catch::Approx(0.4).margin(0.002));

    cfg.dataset.train_images = "does-not-exist";
    CHECK_THROWS_AS(experiment::build_dataset(cfg, seeds.data), data::idx_error);
}

TEST_CASE("train runner writes trace, stop report and snapshots") {
    auto cfg = experiment::default_config();
    cfg.seed = 7;
    cfg.dataset.n_train = 60;
    cfg.dataset.n_test = 20;
    cfg.dataset.spread = 0.1;
    cfg.network.hidden_widths = {32};
    cfg.train.eta = 0.5;
    cfg.train.max_steps = 8;
    cfg.train.eval_every = 2;
    cfg.train.instrument_every = 4;
    cfg.snapshots = true;
    const fs::path out = scratch() / "train_run";
    auto res = experiment::run_train(cfg, out);
    REQUIRE(!res.trace.aborted);
    CHECK(fs::exists(out / "trace.csv"));
    REQUIRE(res.stop.has_value());
    CHECK(fs::exists(out / "early_stop.json"));
    auto stop_json = nlohmann::json::parse(io::read_text(out / "early_stop.json"));
    CHECK(stop_json.at("stop_step").get<long long>() == res.stop->stop_step);
    CHECK(stop_json.at("noise_level").get<double>() == 0.3);

    // snapshots exist exactly for instrumented checkpoints and restore bitwise
    std::size_t instrumented = 0;
    for (const auto& cp : res.trace.checkpoints)
        if (cp.instrumented) {
            ++instrumented;
            CHECK(fs::exists(out / "snapshots" / ("params_step_" + std::to_string(cp.step) + ".bin")));
        }
    CHECK(instrumented >= 2);
    auto seeds = experiment::derive_seeds(cfg.seed);
    auto probe = experiment::build_network(cfg, 2, seeds.init);
    CHECK(io::load_params(out / "snapshots" / "params_step_0.bin", probe) == 0);

    // the trace on disk matches the in-memory trace exactly
    CHECK(io::read_text(out / "trace.csv") == io::trace_csv(res.trace));
}

TEST_CASE("verify runner enforces usable options") {
    experiment::VerifyOptions opt;
    opt.grid = 0;
    CHECK_THROWS_AS(experiment::run_verify_theory(opt, scratch()), experiment::config_error);
    opt.grid = 5;
    opt.width = 128;
    opt.trials = 3;
    opt.monotonicity_pairs = 50;
    opt.wishart_m = 2000;
    opt.wishart_repeats = 3;
    opt.wishart_min_pass = 3;
    auto res = experiment::run_verify_theory(opt, scratch() / "verify");
    CHECK(fs::exists(res.curve_path));
    CHECK(fs::exists(res.summary_path));
    REQUIRE(res.curves.size() == 2);
    CHECK(res.curves[0].points.size() == 5);
    CHECK(res.summary.contains("width_note"));  // width != default
    CHECK(res.summary.at("gates").size() == 7);
}

TEST_CASE("sweep runner needs axes") {
    auto cfg = experiment::default_config();
    cfg.sweep = {};
    CHECK_THROWS_AS(experiment::run_sweep(cfg, 1, scratch()), experiment::config_error);
}

TEST_CASE("preset files parse and stay within the schema") {
    const fs::path dir = CLEANPRIO_PRESET_DIR;
    for (const char* name : {"synthetic-binary", "mnist-7v9-fcn", "mnist10-fcn"}) {
        INFO(name);
        auto cfg = experiment::load_config(dir / (std::string(name) + ".json"));
        CHECK(cfg.schema_version == 1);
        CHECK((cfg.dataset.kind == "synthetic_clusters" || cfg.dataset.kind == "idx"));
        CHECK_NOTHROW(experiment::parse_activation(cfg.network.activation));
        CHECK_NOTHROW(experiment::parse_head(cfg.network.head));
        CHECK_NOTHROW(experiment::parse_loss(cfg.train.loss));
        CHECK(cfg.train.eta > 0.0);
    }
    // the mnist presets resolve their idx paths relative to the preset dir
    auto cfg = experiment::load_config(dir / "mnist-7v9-fcn.json");
    CHECK(cfg.base_dir == dir);
    auto seeds = experiment::derive_seeds(cfg.seed);
    auto [train, test] = experiment::build_dataset(cfg, seeds.data);
    CHECK(train.size() == 1639);
    CHECK(train.num_classes == 2);
}
