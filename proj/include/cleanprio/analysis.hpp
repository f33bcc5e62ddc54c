#pragma once

// Instrumentation over a frozen network state and dataset: subset
// gradient sums per class, angle statistics between model derivatives
// or per-sample gradients, clean/noise dominance ratios with the
// effective learning rate they imply, and residual summaries.

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cleanprio/data.hpp"
#include "cleanprio/network.hpp"
#include "cleanprio/numcore.hpp"

namespace cleanprio::analysis {

using data::ClassMembership;
using data::LabeledDataset;
using data::SubsetKind;
using data::SubsetView;
using network::GradientMode;
using network::Head;
using network::NetworkState;
using numcore::SeededRng;
using numcore::Vector;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kRadToDeg = 180.0 / kPi;

namespace detail {

// Plain clamped cosine, as opposed to numcore::cosine_angle which
// returns the angle itself.
inline double cos_between(const Vector& a, const Vector& b) {
    const double na = numcore::norm(a);
    const double nb = numcore::norm(b);
    if (na == 0.0 || nb == 0.0) throw numcore::degenerate_angle_error("cos_between: zero-norm input");
    double q = numcore::dot(a, b) / (na * nb);
    if (q > 1.0) q = 1.0;
    if (q < -1.0) q = -1.0;
    return q;
}

}  // namespace detail

// Per-class gradient sums over the clean / corrupted / rest-of-data
// partition, plus the truth-labeled class sum. Noise fields are
// absent (not zero) when the class has no corrupted samples.
struct SubsetGradients {
    int cls = -1;
    GradientMode mode = GradientMode::full;
    Vector g_clean;
    std::optional<Vector> g_noise;
    Vector g_other;
    Vector g_hat;
    double norm_clean = 0.0;
    std::optional<double> norm_noise;
    double norm_other = 0.0;
    double norm_hat = 0.0;
    std::optional<double> cos_clean_noise;
    std::optional<double> cos_clean_other;
};

// Sums per-sample gradients over clean(c), noise(c), other(c) and the
// truth-labeled class-c view. In single_logit mode only logit c is
// differentiated (softmax heads only).
inline SubsetGradients subset_gradients(const NetworkState& state, const LabeledDataset& ds, int c,
                                        GradientMode mode = GradientMode::full,
                                        ClassMembership membership = ClassMembership::by_truth) {
    if (c < 0 || c >= ds.num_classes)
        throw std::invalid_argument("subset_gradients: unknown class " + std::to_string(c));
    if (mode == GradientMode::single_logit && state.config.head != Head::softmax)
        throw network::unsupported_operation("subset_gradients: single-logit mode requires a softmax head");
    const std::size_t logit = static_cast<std::size_t>(c);

    SubsetGradients out;
    out.cls = c;
    out.mode = mode;

    const auto clean = data::subset_view(ds, SubsetKind::clean_of_class, c, membership);
    const auto noise = data::subset_view(ds, SubsetKind::noise_of_class, c, membership);
    const auto other = data::subset_view(ds, SubsetKind::other_of_class, c, membership);
    auto hat = data::subset_view(ds, SubsetKind::class_of, c, membership);
    hat.use_truth_labels = true;

    auto summed = [&](const SubsetView& v) {
        if (v.empty()) return Vector(state.params.size(), 0.0);
        return network::sum_gradient(state, v, mode, logit);
    };
    out.g_clean = summed(clean);
    out.g_other = summed(other);
    out.g_hat = summed(hat);
    out.norm_clean = numcore::norm(out.g_clean);
    out.norm_other = numcore::norm(out.g_other);
    out.norm_hat = numcore::norm(out.g_hat);
    if (!noise.empty()) {
        out.g_noise = network::sum_gradient(state, noise, mode, logit);
        out.norm_noise = numcore::norm(*out.g_noise);
    }
    if (out.norm_noise && *out.norm_noise > 0.0 && out.norm_clean > 0.0)
        out.cos_clean_noise = detail::cos_between(out.g_clean, *out.g_noise);
    if (out.norm_other > 0.0 && out.norm_clean > 0.0)
        out.cos_clean_other = detail::cos_between(out.g_clean, out.g_other);
    return out;
}

// Which angle population a histogram describes. within/between bin
// model-derivative angles for sample pairs of the reference class
// against itself or the rest; the *_vs_ref kinds bin per-sample
// gradient angles against the summed clean-subset gradient.
enum class AngleKind { within, between, clean_vs_ref, noise_vs_ref, other_vs_ref };

inline const char* angle_kind_name(AngleKind k) {
    switch (k) {
        case AngleKind::within: return "within";
        case AngleKind::between: return "between";
        case AngleKind::clean_vs_ref: return "clean_vs_ref";
        case AngleKind::noise_vs_ref: return "noise_vs_ref";
        case AngleKind::other_vs_ref: return "other_vs_ref";
    }
    return "?";
}

struct AngleMarker {
    std::string name;
    double angle_deg = 0.0;
};

// One-degree bins over [0, 180]; an exact 180 lands in the last bin.
struct AngleHistogram {
    static constexpr std::size_t kBins = 181;

    AngleKind kind = AngleKind::within;
    int cls = -1;
    std::vector<std::uint64_t> counts = std::vector<std::uint64_t>(kBins, 0);
    std::uint64_t skipped = 0;  // degenerate (zero-direction) entries, not binned
    std::string reference;
    std::vector<AngleMarker> markers;

    static double bin_low_deg(std::size_t i) { return static_cast<double>(i); }
    static double bin_high_deg(std::size_t i) { return static_cast<double>(i + 1); }

    void add_deg(double a) {
        if (a < 0.0) a = 0.0;
        std::size_t b = static_cast<std::size_t>(a);
        if (b >= kBins) b = kBins - 1;
        ++counts[b];
    }

    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (auto c : counts) t += c;
        return t;
    }

    // Center of the first bin whose cumulative count reaches half.
    double median_deg() const {
        const std::uint64_t t = total();
        if (t == 0) throw std::logic_error("median of an empty histogram");
        const std::uint64_t half = (t + 1) / 2;
        std::uint64_t cum = 0;
        for (std::size_t i = 0; i < kBins; ++i) {
            cum += counts[i];
            if (cum >= half) return bin_low_deg(i) + 0.5;
        }
        return 180.0;
    }
};

namespace detail {

inline std::vector<std::size_t> membership_complement(const LabeledDataset& ds, int c,
                                                      ClassMembership membership) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const int m = membership == ClassMembership::by_truth ? ds.truth[i] : ds.labels[i];
        if (m != c) out.push_back(i);
    }
    return out;
}

// Angle (degrees) between two model derivatives, or nullopt for a
// zero-direction input.
inline std::optional<double> derivative_angle_deg(const NetworkState& state,
                                                  std::span<const double> xa,
                                                  std::span<const double> xb, std::size_t logit) {
    const Vector da = network::model_derivative(state, xa, logit);
    const Vector db = network::model_derivative(state, xb, logit);
    if (numcore::norm(da) == 0.0 || numcore::norm(db) == 0.0) return std::nullopt;
    return numcore::cosine_angle(da, db) * kRadToDeg;
}

}  // namespace detail

// Angle in degrees between one sample's loss gradient and a reference
// direction, or nullopt when the gradient direction is undefined. For
// single-logit heads the gradient is (f - y) grad h, so the angle
// comes from grad h plus the residual sign; that pairs acos(q) with
// acos(-q) under a label flip and keeps the mirror exact sample by
// sample instead of up to elementwise rounding.
inline std::optional<double> gradient_angle_deg(const NetworkState& state, std::span<const double> x,
                                                int y, const Vector& ref) {
    if (numcore::norm(ref) == 0.0)
        throw numcore::degenerate_angle_error("gradient_angle_deg: zero-norm reference");
    if (state.config.num_logits == 1) {
        const Vector dh = network::model_derivative(state, x, 0);
        if (numcore::norm(dh) == 0.0) return std::nullopt;
        const auto rec = network::forward(state, x);
        const double resid = rec.outputs[0] - static_cast<double>(y);
        if (resid == 0.0) return std::nullopt;
        double q = detail::cos_between(dh, ref);
        if (resid < 0.0) q = -q;
        return std::acos(q) * kRadToDeg;
    }
    const auto sg = network::per_sample_gradient(state, x, y);
    if (numcore::norm(sg.grad) == 0.0) return std::nullopt;
    return numcore::cosine_angle(sg.grad, ref) * kRadToDeg;
}

// Builds the requested angle distribution at the given state. Pair
// kinds (within/between) enumerate every pair when the population is
// no larger than pair_budget and otherwise draw pair_budget pairs
// uniformly with replacement; *_vs_ref kinds visit every subset
// sample up to the same budget. For binary heads the *_vs_ref angle
// is computed from the model derivative and the residual sign, which
// is the same direction as the per-sample gradient (f - y) grad h but
// keeps the label-flip mirror exact pair by pair.
inline AngleHistogram angle_histogram(const NetworkState& state, const LabeledDataset& ds, int c,
                                      AngleKind kind, std::size_t pair_budget, SeededRng& rng,
                                      ClassMembership membership = ClassMembership::by_truth) {
    if (pair_budget == 0) throw std::invalid_argument("angle_histogram: pair budget must be positive");
    if (c < 0 || c >= ds.num_classes)
        throw std::invalid_argument("angle_histogram: unknown class " + std::to_string(c));
    const auto& cfg = state.config;
    const std::size_t logit = cfg.num_logits == 1 ? 0 : static_cast<std::size_t>(c);

    AngleHistogram h;
    h.kind = kind;
    h.cls = c;

    if (kind == AngleKind::within || kind == AngleKind::between) {
        const auto cls_view = data::subset_view(ds, SubsetKind::class_of, c, membership);
        const auto& a = cls_view.indices;
        auto record = [&](std::size_t i, std::size_t j) {
            auto ang = detail::derivative_angle_deg(state, ds.features.row(i), ds.features.row(j), logit);
            if (ang)
                h.add_deg(*ang);
            else
                ++h.skipped;
        };
        if (kind == AngleKind::within) {
            if (a.size() < 2) throw std::invalid_argument("angle_histogram: class too small for pairs");
            const std::uint64_t all = static_cast<std::uint64_t>(a.size()) * (a.size() - 1) / 2;
            if (all <= pair_budget) {
                for (std::size_t i = 0; i + 1 < a.size(); ++i)
                    for (std::size_t j = i + 1; j < a.size(); ++j) record(a[i], a[j]);
            } else {
                for (std::size_t k = 0; k < pair_budget; ++k) {
                    const std::uint64_t i = rng.next_below(a.size());
                    std::uint64_t j = rng.next_below(a.size() - 1);
                    if (j >= i) ++j;
                    record(a[i], a[j]);
                }
            }
        } else {
            const auto b = detail::membership_complement(ds, c, membership);
            if (a.empty() || b.empty())
                throw std::invalid_argument("angle_histogram: between kind needs both sides populated");
            const std::uint64_t all = static_cast<std::uint64_t>(a.size()) * b.size();
            if (all <= pair_budget) {
                for (std::size_t i : a)
                    for (std::size_t j : b) record(i, j);
            } else {
                for (std::size_t k = 0; k < pair_budget; ++k)
                    record(a[rng.next_below(a.size())], b[rng.next_below(b.size())]);
            }
        }
        return h;
    }

    // *_vs_ref kinds
    const SubsetKind sub = kind == AngleKind::clean_vs_ref  ? SubsetKind::clean_of_class
                           : kind == AngleKind::noise_vs_ref ? SubsetKind::noise_of_class
                                                             : SubsetKind::other_of_class;
    const auto view = data::subset_view(ds, sub, c, membership);
    if (view.empty()) throw std::invalid_argument("angle_histogram: empty subset for reference comparison");

    const auto sums = subset_gradients(state, ds, c, GradientMode::full, membership);
    if (sums.norm_clean == 0.0)
        throw numcore::degenerate_angle_error("angle_histogram: zero clean reference gradient");
    const Vector& ref = sums.g_clean;
    h.reference = "class-" + std::to_string(c) + " clean-subset gradient sum";

    auto marker = [&](const char* name, const Vector& g, double n) {
        if (n > 0.0) h.markers.push_back({name, numcore::cosine_angle(g, ref) * kRadToDeg});
    };
    marker("clean_sum", sums.g_clean, sums.norm_clean);
    if (sums.g_noise) marker("noise_sum", *sums.g_noise, *sums.norm_noise);
    marker("other_sum", sums.g_other, sums.norm_other);
    marker("truth_sum", sums.g_hat, sums.norm_hat);

    auto record_sample = [&](std::size_t k) {
        const auto ang = gradient_angle_deg(state, view.x(k), view.label(k), ref);
        if (ang)
            h.add_deg(*ang);
        else
            ++h.skipped;
    };
    if (view.size() <= pair_budget) {
        for (std::size_t k = 0; k < view.size(); ++k) record_sample(k);
    } else {
        for (std::size_t k = 0; k < pair_budget; ++k) record_sample(rng.next_below(view.size()));
    }
    return h;
}

// Clean/noise dominance for one class at one step. The ratio and its
// reciprocal alpha_hat come from measured subset-gradient norms;
// eta_effective applies (1 - a)/(1 + a) to the base learning rate.
// Noise-dependent fields are absent when the class has no corrupted
// samples; degenerate marks a vanishing clean gradient.
struct DominanceRecord {
    long long step = -1;
    int cls = -1;
    bool degenerate = false;
    std::optional<double> ratio;
    std::optional<double> alpha_hat;
    std::optional<double> cos_clean_noise;
    std::optional<double> cos_full_vs_truth;
    std::optional<double> eta_effective;
};

inline double effective_rate(double alpha_hat, double eta) {
    return (1.0 - alpha_hat) / (1.0 + alpha_hat) * eta;
}

// Dominance records for a set of classes plus two cross cutting
// diagnostics that fall out of the same sums: the cosine between the
// observed-label and truth-labeled full gradients, and (for binary
// heads when the classes cover every label) the largest elementwise
// gap between the recomposed per-class sums and the actual full
// gradient.
struct DominanceBundle {
    std::vector<DominanceRecord> records;
    std::optional<double> cos_full_vs_truth;
    std::optional<double> recomposition_gap;
};

// Softmax heads are instrumented per logit (the class's own output),
// binary heads with the full gradient.
inline DominanceBundle dominance_bundle(const NetworkState& state, const LabeledDataset& ds,
                                        const std::vector<int>& classes, double eta,
                                        ClassMembership membership = ClassMembership::by_truth) {
    if (classes.empty()) throw std::invalid_argument("dominance_bundle: no classes requested");
    const GradientMode mode =
        state.config.head == Head::softmax ? GradientMode::single_logit : GradientMode::full;

    const Vector g_obs = network::sum_gradient(state, data::subset_view(ds, SubsetKind::full));
    DominanceBundle out;
    {
        const Vector g_truth = network::sum_gradient(state, data::truth_relabeled(ds));
        if (numcore::norm(g_obs) > 0.0 && numcore::norm(g_truth) > 0.0)
            out.cos_full_vs_truth = detail::cos_between(g_obs, g_truth);
    }

    std::vector<char> seen(static_cast<std::size_t>(ds.num_classes), 0);
    Vector recomposed(state.params.size(), 0.0);
    out.records.reserve(classes.size());
    for (int c : classes) {
        const auto sg = subset_gradients(state, ds, c, mode, membership);
        DominanceRecord r;
        r.cls = c;
        r.cos_full_vs_truth = out.cos_full_vs_truth;
        if (sg.norm_clean == 0.0) {
            r.degenerate = true;
        } else if (sg.norm_noise) {
            r.alpha_hat = *sg.norm_noise / sg.norm_clean;
            if (*sg.norm_noise > 0.0) r.ratio = sg.norm_clean / *sg.norm_noise;
            r.cos_clean_noise = sg.cos_clean_noise;
            r.eta_effective = effective_rate(*r.alpha_hat, eta);
        }
        out.records.push_back(std::move(r));
        if (mode == GradientMode::full && !seen[static_cast<std::size_t>(c)]) {
            seen[static_cast<std::size_t>(c)] = 1;
            for (std::size_t i = 0; i < recomposed.size(); ++i) {
                recomposed[i] += sg.g_clean[i];
                if (sg.g_noise) recomposed[i] += (*sg.g_noise)[i];
            }
        }
    }
    bool covered = mode == GradientMode::full;
    for (char s : seen) covered = covered && s != 0;
    if (covered) {
        double gap = 0.0;
        for (std::size_t i = 0; i < recomposed.size(); ++i)
            gap = std::max(gap, std::abs(recomposed[i] - g_obs[i]));
        out.recomposition_gap = gap;
    }
    return out;
}

// One record per requested class; see dominance_bundle.
inline std::vector<DominanceRecord> dominance_record(const NetworkState& state, const LabeledDataset& ds,
                                                     const std::vector<int>& classes, double eta,
                                                     ClassMembership membership = ClassMembership::by_truth) {
    return dominance_bundle(state, ds, classes, eta, membership).records;
}

// Mean residuals split by corruption status: |f - y| for binary
// heads, the one-hot l2 distance for softmax, plus the labeled-logit
// residual 1 - f_y in both cases.
struct ResidualStats {
    long long step = -1;
    std::size_t n_clean = 0;
    std::size_t n_noise = 0;
    double clean_residual = 0.0;
    std::optional<double> noise_residual;
    double clean_residual_pos = 0.0;
    std::optional<double> noise_residual_pos;
};

inline ResidualStats residual_stats(const NetworkState& state, const LabeledDataset& ds) {
    const auto clean = data::subset_view(ds, SubsetKind::clean_all);
    const auto noise = data::subset_view(ds, SubsetKind::noise_all);
    if (clean.empty()) throw std::invalid_argument("residual_stats: no clean samples");
    ResidualStats out;
    const auto mc = network::evaluate_view(state, clean);
    out.n_clean = mc.n;
    out.clean_residual = mc.residual;
    out.clean_residual_pos = mc.residual_pos;
    if (!noise.empty()) {
        const auto mn = network::evaluate_view(state, noise);
        out.n_noise = mn.n;
        out.noise_residual = mn.residual;
        out.noise_residual_pos = mn.residual_pos;
    }
    return out;
}

// Measured single-logit clean/noise norm ratio for one class of a
// softmax model; absent when the class has no corrupted samples or a
// vanishing subset gradient.
inline std::optional<double> multiclass_init_ratio(const NetworkState& state, const LabeledDataset& ds,
                                                   int c) {
    if (state.config.head != Head::softmax)
        throw network::unsupported_operation("multiclass_init_ratio: requires a softmax head");
    const auto sg = subset_gradients(state, ds, c, GradientMode::single_logit);
    if (!sg.norm_noise || *sg.norm_noise == 0.0 || sg.norm_clean == 0.0) return std::nullopt;
    return sg.norm_clean / *sg.norm_noise;
}

// Population prediction for the init-time ratio: (C - 1)(1 - d)/d,
// which reduces to (1 - d)/d for two classes.
inline double expected_init_ratio(int num_classes, double delta) {
    if (num_classes < 2) throw std::invalid_argument("expected_init_ratio: need at least two classes");
    if (delta <= 0.0 || delta >= 0.5) throw std::invalid_argument("expected_init_ratio: delta outside (0, 0.5)");
    return static_cast<double>(num_classes - 1) * (1.0 - delta) / delta;
}

}  // namespace cleanprio::analysis
