#pragma once

// Full-batch and mini-batch training loops with checkpointed
// instrumentation, the early-stopping detector on the test-error
// curve, stage summaries around the stopping point, and the sweep
// driver over width/noise/seed grids.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "cleanprio/analysis.hpp"
#include "cleanprio/data.hpp"
#include "cleanprio/network.hpp"
#include "cleanprio/numcore.hpp"

namespace cleanprio::trainer {

using data::LabeledDataset;
using data::SubsetKind;
using data::SubsetView;
using network::Head;
using network::NetworkState;
using numcore::SeededRng;
using numcore::Vector;

class training_aborted : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

enum class LossKind { logistic, cross_entropy };

struct TrainConfig {
    double eta = 0.1;
    std::size_t batch_size = 0;  // 0 trains full batch
    long long max_steps = 1000;
    long long eval_every = 10;
    long long instrument_every = 100;
    std::uint64_t seed = 1;
    LossKind loss = LossKind::logistic;
    std::vector<int> track_classes;  // empty tracks every class

    void validate(const network::NetworkConfig& net) const {
        if (!(eta > 0.0)) throw std::invalid_argument("train config: eta must be positive");
        if (max_steps < 0) throw std::invalid_argument("train config: max_steps must be nonnegative");
        if (eval_every < 1) throw std::invalid_argument("train config: eval_every must be at least 1");
        if (instrument_every < 1)
            throw std::invalid_argument("train config: instrument_every must be at least 1");
        const bool logistic = loss == LossKind::logistic;
        if (logistic != (net.head == Head::sigmoid))
            throw std::invalid_argument("train config: loss kind does not match the network head");
    }
};

// One evaluated checkpoint. Noise-subset fields are absent on clean
// data; dominance records and the recomposition gap only appear on
// instrumented checkpoints.
struct Checkpoint {
    long long step = 0;
    double loss_total = 0.0;
    double loss_clean = 0.0;
    std::optional<double> loss_noise;
    double loss_truth = 0.0;
    double err_total = 0.0;
    double err_clean = 0.0;
    std::optional<double> err_noise;
    double test_loss = 0.0;
    double test_err = 0.0;
    analysis::ResidualStats residuals;
    bool instrumented = false;
    std::vector<analysis::DominanceRecord> dominance;
    std::optional<double> recomposition_gap;
    double param_norm = 0.0;
};

struct DynamicsTrace {
    TrainConfig config;
    double delta = 0.0;
    std::vector<int> tracked_classes;
    std::vector<Checkpoint> checkpoints;
    bool aborted = false;
    std::string abort_reason;
};

struct EarlyStopReport {
    long long stop_step = 0;
    double min_test_error = 0.0;
    double final_test_error = 0.0;
    double noise_level = 0.0;
    bool below_noise = false;
};

// One full-batch update w <- w - eta * mean gradient over the view.
// A non-finite gradient or parameter vector aborts before/after the
// write so the caller never keeps silently poisoned state.
inline void gd_step(NetworkState& state, const SubsetView& view, double eta) {
    if (view.empty()) throw std::invalid_argument("gd_step: empty view");
    const Vector g = network::mean_gradient(state, view);
    if (!numcore::all_finite(g))
        throw training_aborted("gd_step: non-finite gradient (eta " + std::to_string(eta) + ", " +
                               std::to_string(view.size()) + " samples)");
    for (std::size_t i = 0; i < g.size(); ++i) state.params[i] -= eta * g[i];
    if (!numcore::all_finite(state.params))
        throw training_aborted("gd_step: parameters left the finite range");
}

namespace detail {

inline std::vector<std::size_t> shuffled_indices(std::size_t n, SeededRng& rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.next_below(i));
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

inline SubsetView batch_view(const LabeledDataset& ds, const std::vector<std::size_t>& order,
                             std::size_t first, std::size_t count) {
    SubsetView v;
    v.parent = &ds;
    v.kind = SubsetKind::full;
    v.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(first),
                     order.begin() + static_cast<std::ptrdiff_t>(first + count));
    return v;
}

}  // namespace detail

// One pass over a seeded uniform shuffle in sequential mini-batches.
// The shuffle draws only from the supplied stream and never looks at
// labels or the corruption mask.
inline void sgd_epoch(NetworkState& state, const LabeledDataset& ds, std::size_t batch_size, double eta,
                      SeededRng& rng) {
    if (batch_size < 1) throw std::invalid_argument("sgd_epoch: batch size must be at least 1");
    if (ds.size() == 0) throw std::invalid_argument("sgd_epoch: empty dataset");
    const auto order = detail::shuffled_indices(ds.size(), rng);
    for (std::size_t first = 0; first < order.size(); first += batch_size) {
        const std::size_t count = std::min(batch_size, order.size() - first);
        gd_step(state, detail::batch_view(ds, order, first, count), eta);
    }
}

namespace detail {

inline Checkpoint evaluate_checkpoint(const NetworkState& state, const LabeledDataset& train,
                                      const LabeledDataset& test, long long step) {
    Checkpoint cp;
    cp.step = step;
    const auto full = network::evaluate_view(state, data::subset_view(train, SubsetKind::full));
    cp.loss_total = full.loss;
    cp.err_total = full.error;
    const auto clean = network::evaluate_view(state, data::subset_view(train, SubsetKind::clean_all));
    cp.loss_clean = clean.loss;
    cp.err_clean = clean.error;
    const auto noise_view = data::subset_view(train, SubsetKind::noise_all);
    cp.residuals.step = step;
    cp.residuals.n_clean = clean.n;
    cp.residuals.clean_residual = clean.residual;
    cp.residuals.clean_residual_pos = clean.residual_pos;
    if (!noise_view.empty()) {
        const auto noise = network::evaluate_view(state, noise_view);
        cp.loss_noise = noise.loss;
        cp.err_noise = noise.error;
        cp.residuals.n_noise = noise.n;
        cp.residuals.noise_residual = noise.residual;
        cp.residuals.noise_residual_pos = noise.residual_pos;
    }
    cp.loss_truth = network::evaluate_view(state, data::truth_relabeled(train)).loss;
    const auto tst = network::evaluate_view(state, data::subset_view(test, SubsetKind::full));
    cp.test_loss = tst.loss;
    cp.test_err = tst.error;
    cp.param_norm = numcore::norm(state.params);
    return cp;
}

}  // namespace detail

// Trains to max_steps, appending an evaluated checkpoint at step 0,
// on the eval_every cadence, and at the final step. Checkpoints whose
// step also hits the instrument_every cadence (plus first and last)
// carry dominance records. Instrumentation only reads the state, so
// the parameter trajectory is the same whatever the cadences. A
// checkpoint callback, when given, sees the live state at every
// appended checkpoint. Step failures mark the trace aborted and
// return the part recorded so far.
inline DynamicsTrace run(
    NetworkState& state, const LabeledDataset& train, const LabeledDataset& test, const TrainConfig& config,
    const std::function<void(const NetworkState&, const Checkpoint&)>& on_checkpoint = nullptr) {
    config.validate(state.config);
    if (train.size() == 0) throw std::invalid_argument("run: empty training set");
    if (test.size() == 0) throw std::invalid_argument("run: empty test set");
    for (int c : config.track_classes)
        if (c < 0 || c >= train.num_classes)
            throw std::invalid_argument("run: tracked class " + std::to_string(c) + " out of range");

    DynamicsTrace trace;
    trace.config = config;
    trace.delta = train.delta;
    trace.tracked_classes = config.track_classes;
    if (trace.tracked_classes.empty())
        for (int c = 0; c < train.num_classes; ++c) trace.tracked_classes.push_back(c);

    const bool any_noise = train.noise_count() > 0;
    auto append_checkpoint = [&](long long step) {
        Checkpoint cp = detail::evaluate_checkpoint(state, train, test, step);
        const bool on_cadence = step % config.instrument_every == 0;
        if ((on_cadence || step == 0 || step == config.max_steps) && any_noise) {
            auto bundle = analysis::dominance_bundle(state, train, trace.tracked_classes, config.eta);
            for (auto& r : bundle.records) r.step = step;
            cp.dominance = std::move(bundle.records);
            cp.recomposition_gap = bundle.recomposition_gap;
            cp.instrumented = true;
        }
        if (on_checkpoint) on_checkpoint(state, cp);
        trace.checkpoints.push_back(std::move(cp));
    };

    append_checkpoint(0);
    if (config.max_steps == 0) return trace;

    SeededRng shuffle_rng(config.seed);
    const auto full_view = data::subset_view(train, SubsetKind::full);
    const std::size_t batch = config.batch_size == 0 ? train.size() : config.batch_size;
    std::vector<std::size_t> order;
    std::size_t cursor = 0;

    for (long long step = 1; step <= config.max_steps; ++step) {
        try {
            if (config.batch_size == 0) {
                gd_step(state, full_view, config.eta);
            } else {
                if (cursor >= train.size()) cursor = 0;
                if (cursor == 0) order = detail::shuffled_indices(train.size(), shuffle_rng);
                const std::size_t count = std::min(batch, train.size() - cursor);
                gd_step(state, detail::batch_view(train, order, cursor, count), config.eta);
                cursor += count;
            }
        } catch (const training_aborted& e) {
            trace.aborted = true;
            trace.abort_reason = std::string(e.what()) + " at step " + std::to_string(step);
            return trace;
        }
        if (step % config.eval_every == 0 || step == config.max_steps) append_checkpoint(step);
    }
    return trace;
}

// Test-error minimum under a centered moving median (window five,
// shrunk symmetrically near the ends), then the raw minimum inside
// that window around the smoothed argmin. Ties always resolve to the
// earliest checkpoint.
inline EarlyStopReport detect_early_stop(const DynamicsTrace& trace) {
    const auto& cps = trace.checkpoints;
    const std::size_t n = cps.size();
    if (n < 3) throw std::invalid_argument("detect_early_stop: need at least three checkpoints");

    std::vector<double> raw(n);
    for (std::size_t i = 0; i < n; ++i) raw[i] = cps[i].test_err;

    std::vector<double> window;
    auto smoothed_at = [&](std::size_t i) {
        const std::size_t r = std::min<std::size_t>(2, std::min(i, n - 1 - i));
        window.assign(raw.begin() + static_cast<std::ptrdiff_t>(i - r),
                      raw.begin() + static_cast<std::ptrdiff_t>(i + r + 1));
        std::sort(window.begin(), window.end());
        return window[window.size() / 2];
    };
    std::size_t best = 0;
    double best_val = smoothed_at(0);
    for (std::size_t i = 1; i < n; ++i) {
        const double v = smoothed_at(i);
        if (v < best_val) {
            best_val = v;
            best = i;
        }
    }
    const std::size_t lo = best >= 2 ? best - 2 : 0;
    const std::size_t hi = std::min(n - 1, best + 2);
    std::size_t pick = lo;
    for (std::size_t i = lo + 1; i <= hi; ++i)
        if (raw[i] < raw[pick]) pick = i;

    EarlyStopReport rep;
    rep.stop_step = cps[pick].step;
    rep.min_test_error = raw[pick];
    rep.final_test_error = raw.back();
    rep.noise_level = trace.delta;
    rep.below_noise = rep.min_test_error < trace.delta;
    return rep;
}

// Direction statistics of one series across consecutive checkpoints.
struct Trend {
    std::size_t pairs = 0;
    double frac_decreasing = 0.0;
    double frac_increasing = 0.0;
    double net_change = 0.0;
};

inline Trend trend_of(const std::vector<double>& series) {
    Trend t;
    if (series.size() < 2) return t;
    t.pairs = series.size() - 1;
    std::size_t down = 0, up = 0;
    for (std::size_t i = 1; i < series.size(); ++i) {
        if (series[i] < series[i - 1]) ++down;
        if (series[i] > series[i - 1]) ++up;
    }
    t.frac_decreasing = static_cast<double>(down) / static_cast<double>(t.pairs);
    t.frac_increasing = static_cast<double>(up) / static_cast<double>(t.pairs);
    t.net_change = series.back() - series.front();
    return t;
}

struct StageSummary {
    std::size_t checkpoints = 0;
    Trend clean_loss;
    std::optional<Trend> noise_loss;
    Trend clean_residual;
    std::optional<Trend> noise_residual;
    std::optional<Trend> mean_ratio;  // tracked-class mean, instrumented checkpoints only
    std::optional<Trend> mean_alpha;
};

struct StageReport {
    long long stop_step = 0;
    StageSummary early;  // checkpoints at or before the stopping step
    StageSummary later;  // checkpoints at or after it
};

namespace detail {

inline StageSummary summarize_stage(const std::vector<const Checkpoint*>& cps) {
    StageSummary s;
    s.checkpoints = cps.size();
    std::vector<double> clean_loss, noise_loss, clean_res, noise_res, ratios, alphas;
    bool noise_everywhere = !cps.empty();
    for (const Checkpoint* cp : cps) {
        clean_loss.push_back(cp->loss_clean);
        clean_res.push_back(cp->residuals.clean_residual);
        if (cp->loss_noise && cp->residuals.noise_residual) {
            noise_loss.push_back(*cp->loss_noise);
            noise_res.push_back(*cp->residuals.noise_residual);
        } else {
            noise_everywhere = false;
        }
        if (!cp->instrumented) continue;
        double rsum = 0.0, asum = 0.0;
        std::size_t rn = 0;
        for (const auto& d : cp->dominance) {
            if (d.ratio && d.alpha_hat) {
                rsum += *d.ratio;
                asum += *d.alpha_hat;
                ++rn;
            }
        }
        if (rn == cp->dominance.size() && rn > 0) {
            ratios.push_back(rsum / static_cast<double>(rn));
            alphas.push_back(asum / static_cast<double>(rn));
        }
    }
    s.clean_loss = trend_of(clean_loss);
    s.clean_residual = trend_of(clean_res);
    if (noise_everywhere) {
        s.noise_loss = trend_of(noise_loss);
        s.noise_residual = trend_of(noise_res);
    }
    if (ratios.size() >= 2) {
        s.mean_ratio = trend_of(ratios);
        s.mean_alpha = trend_of(alphas);
    }
    return s;
}

}  // namespace detail

// Splits the trace at the stopping step; the boundary checkpoint
// belongs to both stages so each side sees its own endpoint.
inline StageReport stage_report(const DynamicsTrace& trace, const EarlyStopReport& stop) {
    StageReport rep;
    rep.stop_step = stop.stop_step;
    std::vector<const Checkpoint*> early, later;
    for (const auto& cp : trace.checkpoints) {
        if (cp.step <= stop.stop_step) early.push_back(&cp);
        if (cp.step >= stop.stop_step) later.push_back(&cp);
    }
    rep.early = detail::summarize_stage(early);
    rep.later = detail::summarize_stage(later);
    return rep;
}

// The qualitative signature of the early stage: clean-subset loss
// falls on at least nine of ten consecutive pairs and ends lower,
// while the noisy-subset loss ends higher than it started.
inline bool early_clean_priority(const StageReport& rep) {
    const StageSummary& e = rep.early;
    if (e.clean_loss.pairs == 0 || !e.noise_loss) return false;
    return e.clean_loss.frac_decreasing >= 0.9 && e.clean_loss.net_change < 0.0 &&
           e.noise_loss->net_change > 0.0;
}

// One grid point of a width/noise/seed sweep and its summary row.
struct SweepPoint {
    std::size_t width = 0;
    double delta = 0.0;
    std::uint64_t seed = 0;
};

struct RunSetup {
    LabeledDataset train;
    LabeledDataset test;
    NetworkState state;
    TrainConfig config;
};

struct SweepRow {
    SweepPoint point;
    long long stop_step = -1;
    double min_test_error = 0.0;
    double final_test_error = 0.0;
    bool below_noise = false;
    bool early_clean_priority = false;
    bool aborted = false;
};

struct SweepOutcome {
    std::vector<DynamicsTrace> traces;
    std::vector<SweepRow> table;
};

// Runs every point independently through the factory-provided setup,
// optionally across threads; outputs keep the input order so the
// aggregate table is reproducible whatever the parallelism. The
// factory must be safe to call concurrently.
inline SweepOutcome sweep(const std::vector<SweepPoint>& points,
                          const std::function<RunSetup(const SweepPoint&)>& make_setup,
                          std::size_t jobs = 1) {
    SweepOutcome out;
    out.traces.resize(points.size());
    out.table.resize(points.size());
    if (points.empty()) return out;
    if (!make_setup) throw std::invalid_argument("sweep: missing setup factory");

    jobs = std::max<std::size_t>(1, std::min(jobs, points.size()));
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= points.size()) return;
            SweepRow row;
            row.point = points[i];
            try {
                RunSetup setup = make_setup(points[i]);
                DynamicsTrace trace = run(setup.state, setup.train, setup.test, setup.config);
                row.aborted = trace.aborted;
                if (!trace.aborted && trace.checkpoints.size() >= 3) {
                    const auto stop = detect_early_stop(trace);
                    row.stop_step = stop.stop_step;
                    row.min_test_error = stop.min_test_error;
                    row.final_test_error = stop.final_test_error;
                    row.below_noise = stop.below_noise;
                    row.early_clean_priority = early_clean_priority(stage_report(trace, stop));
                }
                out.traces[i] = std::move(trace);
            } catch (const std::exception& e) {
                row.aborted = true;
                out.traces[i].aborted = true;
                out.traces[i].abort_reason = e.what();
            }
            out.table[i] = std::move(row);
        }
    };
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(jobs);
        for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    return out;
}

}  // namespace cleanprio::trainer
