#pragma once

// Minimal dense linear algebra, seeded Gaussian sampling and angle
// computation. Everything here is double precision and deterministic:
// identical seeds give identical streams, and every reduction has a
// fixed association order.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

namespace cleanprio::numcore {

using Vector = std::vector<double>;

class degenerate_angle_error : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

// Deterministic stream generator: splitmix64 for the integer stream,
// Box-Muller (with cached spare) for Gaussians. The integer stream is
// exactly portable; the Gaussian stream is bit-stable given one libm.
// Single-owner: parallel callers derive independent streams via child().
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : seed_(seed), state_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t position() const { return draws_; }

    std::uint64_t next_u64() {
        ++draws_;
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform on (0,1]; never returns 0 so it is safe under log().
    double next_uniform_open() {
        return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    }

    // Uniform on [0,1).
    double next_uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, bound) by rejection (unbiased).
    std::uint64_t next_below(std::uint64_t bound) {
        if (bound == 0) throw std::invalid_argument("next_below: bound must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        std::uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % bound;
    }

    // Standard normal via Box-Muller; the sine mate is cached so two
    // uniforms yield two Gaussians.
    double next_gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u = next_uniform_open();
        const double v = next_uniform();
        const double r = std::sqrt(-2.0 * std::log(u));
        const double a = 2.0 * std::numbers::pi * v;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Independent stream for worker/trial `index`, derived from the
    // parent seed only (not from the current position).
    SeededRng child(std::uint64_t index) const {
        std::uint64_t z = seed_ + (index + 1) * 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return SeededRng(z ^ (z >> 31));
    }

private:
    std::uint64_t seed_;
    std::uint64_t state_;
    std::uint64_t draws_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // row-major

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
    std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
};

inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, SeededRng& rng) {
    if (rows == 0 || cols == 0)
        throw std::invalid_argument("gaussian_matrix: dimensions must be positive");
    Matrix m(rows, cols);
    for (double& v : m.data) v = rng.next_gaussian();
    return m;
}

// Dot product with eight explicit accumulator lanes. The association
// order is fixed in source, so the result is deterministic while the
// lanes still vectorize.
inline double dot(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) throw std::invalid_argument("dot: length mismatch");
    const std::size_t n = u.size();
    double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc[0] += u[i] * v[i];
        acc[1] += u[i + 1] * v[i + 1];
        acc[2] += u[i + 2] * v[i + 2];
        acc[3] += u[i + 3] * v[i + 3];
        acc[4] += u[i + 4] * v[i + 4];
        acc[5] += u[i + 5] * v[i + 5];
        acc[6] += u[i + 6] * v[i + 6];
        acc[7] += u[i + 7] * v[i + 7];
    }
    double tail = 0.0;
    for (; i < n; ++i) tail += u[i] * v[i];
    return (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail;
}

inline double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

// Angle in [0, pi]; the cosine quotient is clamped to [-1, 1] before
// arccos so near-parallel vectors cannot produce NaN.
inline double cosine_angle(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) throw std::invalid_argument("cosine_angle: length mismatch");
    const double nu = norm(u);
    const double nv = norm(v);
    if (nu == 0.0 || nv == 0.0)
        throw degenerate_angle_error("cosine_angle: zero-norm input");
    double q = dot(u, v) / (nu * nv);
    if (q > 1.0) q = 1.0;
    if (q < -1.0) q = -1.0;
    return std::acos(q);
}

inline Vector matvec(const Matrix& a, std::span<const double> x) {
    if (a.cols != x.size()) throw std::invalid_argument("matvec: dimension mismatch");
    Vector y(a.rows);
    for (std::size_t i = 0; i < a.rows; ++i) y[i] = dot(a.row(i), x);
    return y;
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
    return t;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul: dimension mismatch");
    Matrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        double* ci = c.data.data() + i * c.cols;
        const double* ai = a.data.data() + i * a.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = ai[k];
            const double* bk = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) ci[j] += aik * bk[j];
        }
    }
    return c;
}

// Raw kernels used by the batched network paths. All accumulate in a
// fixed order.

// c[i,:] += sum_k a[i,k] * b[k,:]      (a: n x k, b: k x m, c: n x m)
inline void gemm_nn_add(const double* a, const double* b, double* c,
                        std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            const double* bp = b + p * m;
            for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
        }
    }
}

// c[i,j] = sum_k a[i,k] * b[j,k]       (a: n x k, b: m x k, c: n x m)
inline void gemm_nt(const double* a, const double* b, double* c,
                    std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * m;
        for (std::size_t j = 0; j < m; ++j)
            ci[j] = dot({ai, k}, {b + j * k, k});
    }
}

// c[j,:] += sum_i a[i,j] * b[i,:]      (a: n x m, b: n x k, c: m x k)
// Accumulates over samples i in index order.
inline void gemm_tn_add(const double* a, const double* b, double* c,
                        std::size_t n, std::size_t m, std::size_t k) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* ai = a + i * m;
        const double* bi = b + i * k;
        for (std::size_t j = 0; j < m; ++j) {
            const double aij = ai[j];
            if (aij == 0.0) continue;
            double* cj = c + j * k;
            for (std::size_t p = 0; p < k; ++p) cj[p] += aij * bi[p];
        }
    }
}

// Deterministic pairwise-tree accumulation of equal-length vectors in
// arrival order. Leaves are blocks of 32 vectors summed sequentially;
// equal-rank partials merge bottom-up, which keeps both the rounding
// error and the memory footprint logarithmic.
class PairwiseAccumulator {
public:
    explicit PairwiseAccumulator(std::size_t dim) : dim_(dim) {}

    void add(std::span<const double> v) {
        if (v.size() != dim_) throw std::invalid_argument("PairwiseAccumulator: length mismatch");
        if (leaf_fill_ == 0) leaf_.assign(dim_, 0.0);
        for (std::size_t i = 0; i < dim_; ++i) leaf_[i] += v[i];
        ++count_;
        if (++leaf_fill_ == kLeaf) flush_leaf();
    }

    std::size_t count() const { return count_; }

    // Sum of everything added so far; the accumulator is consumed.
    Vector take_sum() {
        if (leaf_fill_ > 0) flush_leaf();
        Vector total(dim_, 0.0);
        // Merge remaining partials lowest rank first (fixed order).
        for (auto it = stack_.rbegin(); it != stack_.rend(); ++it)
            for (std::size_t i = 0; i < dim_; ++i) total[i] += it->second[i];
        stack_.clear();
        count_ = 0;
        return total;
    }

private:
    static constexpr std::size_t kLeaf = 32;

    void flush_leaf() {
        std::size_t rank = 0;
        Vector carry = std::move(leaf_);
        leaf_fill_ = 0;
        while (!stack_.empty() && stack_.back().first == rank) {
            const Vector& top = stack_.back().second;
            for (std::size_t i = 0; i < dim_; ++i) carry[i] += top[i];
            stack_.pop_back();
            ++rank;
        }
        stack_.emplace_back(rank, std::move(carry));
    }

    std::size_t dim_;
    std::size_t count_ = 0;
    std::size_t leaf_fill_ = 0;
    Vector leaf_;
    std::vector<std::pair<std::size_t, Vector>> stack_;
};

// Pairwise-tree sum of a scalar sequence.
inline double tree_sum(std::span<const double> xs) {
    const std::size_t n = xs.size();
    if (n == 0) return 0.0;
    if (n <= 32) {
        double s = 0.0;
        for (double x : xs) s += x;
        return s;
    }
    const std::size_t half = n / 2;
    return tree_sum(xs.first(half)) + tree_sum(xs.subspan(half));
}

inline bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace cleanprio::numcore
