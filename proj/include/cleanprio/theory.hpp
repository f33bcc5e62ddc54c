#pragma once

// Closed-form angle relations for two-layer networks at init, their
// Monte-Carlo finite-width validators, and the Wishart concentration
// check backing them.

#include <cleanprio/network.hpp>
#include <cleanprio/numcore.hpp>

#include <cmath>
#include <numbers>
#include <vector>

namespace cleanprio::theory {

using numcore::SeededRng;
using numcore::Vector;

// Linear net: the derivative angle equals the input angle.
inline double theta_h_linear(double theta_d) {
    if (theta_d < 0.0 || theta_d > std::numbers::pi)
        throw std::invalid_argument("theta_h_linear: theta_d outside [0, pi]");
    return theta_d;
}

// ReLU net: cos(theta_h) = ((pi - t)/pi) cos t + sin t / (2 pi).
inline double theta_h_relu(double theta_d) {
    if (theta_d < 0.0 || theta_d > std::numbers::pi)
        throw std::invalid_argument("theta_h_relu: theta_d outside [0, pi]");
    const double pi = std::numbers::pi;
    double c = (pi - theta_d) / pi * std::cos(theta_d) + std::sin(theta_d) / (2.0 * pi);
    c = std::clamp(c, -1.0, 1.0);
    return std::acos(c);
}

enum class NetKind { linear, relu };

struct McEstimate {
    double mean = 0.0;
    double std_error = 0.0;
    std::size_t trials = 0;
};

// Empirical theta_h between the model derivatives at two unit inputs
// on the 1-sphere separated by theta_d, averaged over fresh inits.
// `depth` counts weight layers, so depth 2 has one hidden layer.
inline McEstimate mc_theta_h(NetKind kind, std::size_t depth, double theta_d, std::size_t m,
                             std::size_t trials, SeededRng& rng) {
    if (m < 1 || trials < 1) throw std::invalid_argument("mc_theta_h: m and trials must be >= 1");
    if (depth < 2) throw std::invalid_argument("mc_theta_h: depth must be >= 2");
    network::NetworkConfig cfg;
    cfg.input_dim = 2;
    cfg.hidden_widths.assign(depth - 1, m);
    cfg.activation = kind == NetKind::linear ? network::Activation::linear : network::Activation::relu;
    cfg.head = network::Head::sigmoid;
    cfg.num_logits = 1;

    const Vector x{1.0, 0.0};
    const Vector z{std::cos(theta_d), std::sin(theta_d)};
    Vector angles(trials);
    for (std::size_t t = 0; t < trials; ++t) {
        SeededRng trial_rng = rng.child(t);
        auto st = network::init_ntk(cfg, trial_rng);
        angles[t] = numcore::cosine_angle(network::model_derivative(st, x, 0),
                                          network::model_derivative(st, z, 0));
    }
    McEstimate est;
    est.trials = trials;
    est.mean = numcore::tree_sum(angles) / static_cast<double>(trials);
    if (trials > 1) {
        double ss = 0.0;
        for (double a : angles) ss += (a - est.mean) * (a - est.mean);
        est.std_error = std::sqrt(ss / static_cast<double>(trials - 1)) /
                        std::sqrt(static_cast<double>(trials));
    }
    return est;
}

struct AngleCurvePoint {
    double theta_d = 0.0;
    double theta_h_closed = 0.0;
    double theta_h_mc_mean = 0.0;
    double theta_h_mc_se = 0.0;
};

struct AngleCurve {
    NetKind kind = NetKind::linear;
    std::size_t depth = 2;
    std::size_t width = 0;
    std::size_t trials = 0;
    std::vector<AngleCurvePoint> points;  // grid strictly increasing in theta_d

    double max_closed_form_deviation() const {
        double mx = 0.0;
        for (const auto& p : points) mx = std::max(mx, std::abs(p.theta_h_mc_mean - p.theta_h_closed));
        return mx;
    }
};

// Closed form vs Monte Carlo on a uniform grid over [0, pi]. Deeper
// nets have no closed form in scope; their closed column reuses the
// 2-layer formula purely as a reference curve.
inline AngleCurve angle_curve(NetKind kind, std::size_t depth, std::size_t grid_points,
                              std::size_t m, std::size_t trials, SeededRng& rng) {
    if (grid_points < 2) throw std::invalid_argument("angle_curve: need at least 2 grid points");
    AngleCurve curve;
    curve.kind = kind;
    curve.depth = depth;
    curve.width = m;
    curve.trials = trials;
    for (std::size_t i = 0; i < grid_points; ++i) {
        const double theta = std::numbers::pi * static_cast<double>(i) /
                             static_cast<double>(grid_points - 1);
        AngleCurvePoint p;
        p.theta_d = theta;
        p.theta_h_closed = kind == NetKind::linear ? theta_h_linear(theta) : theta_h_relu(theta);
        SeededRng point_rng = rng.child(i);
        auto est = mc_theta_h(kind, depth, theta, m, trials, point_rng);
        p.theta_h_mc_mean = est.mean;
        p.theta_h_mc_se = est.std_error;
        curve.points.push_back(p);
    }
    return curve;
}

struct MonotonicityReport {
    std::size_t samples = 0;
    std::size_t order_violations = 0;
    std::size_t range_violations = 0;
    bool pass() const { return order_violations == 0 && range_violations == 0; }
};

// Corollary check: on [0, pi/2] the closed-form theta_h preserves the
// order of theta_d and stays inside [0, pi/2].
inline MonotonicityReport corollary_monotonicity_check(NetKind kind, std::size_t samples,
                                                       SeededRng& rng) {
    MonotonicityReport rep;
    rep.samples = samples;
    const double half_pi = std::numbers::pi / 2.0;
    auto f = [kind](double t) { return kind == NetKind::linear ? theta_h_linear(t) : theta_h_relu(t); };
    for (std::size_t i = 0; i < samples; ++i) {
        double a = half_pi * rng.next_uniform();
        double b = half_pi * rng.next_uniform();
        if (a > b) std::swap(a, b);
        const double fa = f(a), fb = f(b);
        if (fa > fb) ++rep.order_violations;
        if (fa < 0.0 || fb < 0.0 || fa > half_pi || fb > half_pi) ++rep.range_violations;
    }
    return rep;
}

// Max entry deviation of (1/m) A^T A from the identity for A with
// i.i.d. standard normal entries.
inline double wishart_identity_check(std::size_t m, std::size_t d, SeededRng& rng) {
    if (m < 1 || d < 1) throw std::invalid_argument("wishart_identity_check: m, d must be >= 1");
    auto a = numcore::gaussian_matrix(m, d, rng);
    double max_dev = 0.0;
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i; j < d; ++j) {
            double acc = 0.0;
            for (std::size_t r = 0; r < m; ++r) acc += a(r, i) * a(r, j);
            const double target = i == j ? 1.0 : 0.0;
            max_dev = std::max(max_dev, std::abs(acc / static_cast<double>(m) - target));
        }
    return max_dev;
}

}  // namespace cleanprio::theory
