#pragma once

// Dataset construction and label corruption with ground-truth
// bookkeeping, plus the subset views (clean/noise/other per class)
// used by the gradient analyses.

#include <cleanprio/numcore.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace cleanprio::data {

using numcore::Matrix;
using numcore::SeededRng;

class idx_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class idx_bad_magic : public idx_error {
public:
    using idx_error::idx_error;
};
class idx_truncated : public idx_error {
public:
    using idx_error::idx_error;
};
class idx_count_mismatch : public idx_error {
public:
    using idx_error::idx_error;
};

struct LabeledDataset {
    Matrix features;              // n x d, observed inputs
    std::vector<int> labels;      // observed (possibly corrupted) labels
    std::vector<int> truth;       // ground-truth labels
    std::vector<char> noise_mask; // 1 exactly where labels != truth
    int num_classes = 0;
    double delta = 0.0;           // corruption fraction requested, 0 if pristine

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return features.cols; }

    std::size_t noise_count() const {
        std::size_t k = 0;
        for (char m : noise_mask) k += (m != 0);
        return k;
    }
    double noise_fraction() const {
        return size() == 0 ? 0.0 : static_cast<double>(noise_count()) / static_cast<double>(size());
    }
};

enum class SubsetKind {
    clean_of_class,  // observed and true class c
    noise_of_class,  // class-c samples whose observed label was corrupted
    other_of_class,  // clean samples outside class c
    class_of,        // all class-c samples
    clean_all,
    noise_all,
    full,
    truth_relabeled
};

// Class membership for the per-class kinds. The default groups a
// noisy sample with its ground-truth class, so noise(c) shares the
// input distribution of clean(c) but carries different labels.
enum class ClassMembership { by_truth, by_observed };

struct SubsetView {
    const LabeledDataset* parent = nullptr;
    std::vector<std::size_t> indices;
    SubsetKind kind = SubsetKind::full;
    int cls = -1;
    bool use_truth_labels = false;

    std::size_t size() const { return indices.size(); }
    bool empty() const { return indices.empty(); }

    std::span<const double> x(std::size_t k) const { return parent->features.row(indices[k]); }
    int label(std::size_t k) const {
        const std::size_t i = indices[k];
        return use_truth_labels ? parent->truth[i] : parent->labels[i];
    }
    std::size_t sample_id(std::size_t k) const { return indices[k]; }
};

inline LabeledDataset gen_two_clusters(std::size_t n, std::array<double, 2> center_a,
                                       std::array<double, 2> center_b, double spread,
                                       SeededRng& rng) {
    if (n == 0 || n % 2 != 0) throw std::invalid_argument("gen_two_clusters: n must be positive and even");
    if (spread <= 0.0) throw std::invalid_argument("gen_two_clusters: spread must be positive");
    if (center_a == center_b) throw std::invalid_argument("gen_two_clusters: centers must be distinct");
    LabeledDataset ds;
    ds.features = Matrix(n, 2);
    ds.labels.resize(n);
    ds.truth.resize(n);
    ds.noise_mask.assign(n, 0);
    ds.num_classes = 2;
    for (std::size_t i = 0; i < n; ++i) {
        const bool second = i >= n / 2;
        const auto& c = second ? center_b : center_a;
        ds.features(i, 0) = c[0] + spread * rng.next_gaussian();
        ds.features(i, 1) = c[1] + spread * rng.next_gaussian();
        ds.labels[i] = ds.truth[i] = second ? 1 : 0;
    }
    return ds;
}

// Multi-class version: gaussian clusters with centers equally spaced
// on a circle of the given radius, n / num_classes samples per class
// laid out class by class.
inline LabeledDataset gen_class_clusters(std::size_t n, int num_classes, double radius, double spread,
                                         SeededRng& rng) {
    if (num_classes < 2) throw std::invalid_argument("gen_class_clusters: need at least two classes");
    if (n == 0 || n % static_cast<std::size_t>(num_classes) != 0)
        throw std::invalid_argument("gen_class_clusters: n must be a positive multiple of the class count");
    if (spread <= 0.0) throw std::invalid_argument("gen_class_clusters: spread must be positive");
    if (radius <= 0.0) throw std::invalid_argument("gen_class_clusters: radius must be positive");
    LabeledDataset ds;
    ds.features = Matrix(n, 2);
    ds.labels.resize(n);
    ds.truth.resize(n);
    ds.noise_mask.assign(n, 0);
    ds.num_classes = num_classes;
    const std::size_t per = n / static_cast<std::size_t>(num_classes);
    constexpr double tau = 6.28318530717958647692;
    for (std::size_t i = 0; i < n; ++i) {
        const int c = static_cast<int>(i / per);
        const double a = tau * static_cast<double>(c) / static_cast<double>(num_classes);
        ds.features(i, 0) = radius * std::cos(a) + spread * rng.next_gaussian();
        ds.features(i, 1) = radius * std::sin(a) + spread * rng.next_gaussian();
        ds.labels[i] = ds.truth[i] = c;
    }
    return ds;
}

namespace detail {

inline std::uint32_t read_u32_be(std::istream& in, const char* what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw idx_truncated(std::string("idx: truncated while reading ") + what);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace detail

inline LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw idx_error("idx: cannot open " + images_path);
    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw idx_error("idx: cannot open " + labels_path);

    const std::uint32_t img_magic = detail::read_u32_be(img, "image magic");
    if (img_magic != 0x00000803u)
        throw idx_bad_magic("idx: image magic " + std::to_string(img_magic) + ", expected 2051");
    const std::uint32_t n_img = detail::read_u32_be(img, "image count");
    const std::uint32_t rows = detail::read_u32_be(img, "row count");
    const std::uint32_t cols = detail::read_u32_be(img, "column count");

    const std::uint32_t lab_magic = detail::read_u32_be(lab, "label magic");
    if (lab_magic != 0x00000801u)
        throw idx_bad_magic("idx: label magic " + std::to_string(lab_magic) + ", expected 2049");
    const std::uint32_t n_lab = detail::read_u32_be(lab, "label count");
    if (n_img != n_lab)
        throw idx_count_mismatch("idx: " + std::to_string(n_img) + " images vs " +
                                 std::to_string(n_lab) + " labels");

    const std::size_t d = std::size_t(rows) * cols;
    LabeledDataset ds;
    ds.features = Matrix(n_img, d);
    ds.labels.resize(n_img);
    ds.truth.resize(n_img);
    ds.noise_mask.assign(n_img, 0);

    std::vector<unsigned char> buf(d);
    for (std::uint32_t i = 0; i < n_img; ++i) {
        if (!img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(d)))
            throw idx_truncated("idx: image payload ends at sample " + std::to_string(i));
        double* row = ds.features.data.data() + std::size_t(i) * d;
        for (std::size_t j = 0; j < d; ++j) row[j] = buf[j] / 255.0;
    }
    std::vector<unsigned char> lbuf(n_lab);
    if (!lab.read(reinterpret_cast<char*>(lbuf.data()), static_cast<std::streamsize>(n_lab)))
        throw idx_truncated("idx: label payload shorter than declared count");
    int max_label = 0;
    for (std::uint32_t i = 0; i < n_lab; ++i) {
        ds.labels[i] = ds.truth[i] = lbuf[i];
        if (lbuf[i] > max_label) max_label = lbuf[i];
    }
    ds.num_classes = max_label + 1;
    return ds;
}

// Test/companion utility so loader behavior can be pinned byte for byte.
inline void write_idx(const std::string& images_path, const std::string& labels_path,
                      const LabeledDataset& ds, std::uint32_t rows, std::uint32_t cols) {
    if (std::size_t(rows) * cols != ds.dim())
        throw std::invalid_argument("write_idx: rows*cols must equal feature dim");
    auto put_u32 = [](std::ostream& out, std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
        out.write(reinterpret_cast<char*>(b), 4);
    };
    std::ofstream img(images_path, std::ios::binary);
    put_u32(img, 0x00000803u);
    put_u32(img, static_cast<std::uint32_t>(ds.size()));
    put_u32(img, rows);
    put_u32(img, cols);
    for (std::size_t i = 0; i < ds.size(); ++i)
        for (double v : ds.features.row(i)) {
            const auto byte = static_cast<unsigned char>(std::lround(v * 255.0));
            img.write(reinterpret_cast<const char*>(&byte), 1);
        }
    std::ofstream lab(labels_path, std::ios::binary);
    put_u32(lab, 0x00000801u);
    put_u32(lab, static_cast<std::uint32_t>(ds.size()));
    for (int y : ds.labels) {
        const auto byte = static_cast<unsigned char>(y);
        lab.write(reinterpret_cast<const char*>(&byte), 1);
    }
}

// Rescales every feature row to a fixed L2 norm. Keeping inputs small keeps
// the init logits of a bias-free net near zero, so sigmoid/softmax outputs
// start near chance and subset gradient sums stay count-proportional.
// All-zero rows are left untouched (their logit is already zero).
inline void scale_to_norm(LabeledDataset& ds, double target_norm) {
    if (!(target_norm > 0.0)) throw std::invalid_argument("scale_to_norm: target_norm must be positive");
    for (std::size_t i = 0; i < ds.size(); ++i) {
        auto row = ds.features.row(i);
        double ss = 0.0;
        for (double v : row) ss += v * v;
        if (ss == 0.0) continue;
        const double s = target_norm / std::sqrt(ss);
        for (double& v : row) v *= s;
    }
}

inline LabeledDataset filter_classes(const LabeledDataset& ds, const std::set<int>& keep,
                                     const std::map<int, int>& relabel) {
    for (int c : keep)
        if (!relabel.count(c)) throw std::invalid_argument("filter_classes: class missing from relabel map");
    std::vector<std::size_t> take;
    for (std::size_t i = 0; i < ds.size(); ++i)
        if (keep.count(ds.truth[i])) take.push_back(i);
    if (take.empty()) throw std::invalid_argument("filter_classes: no samples match the kept classes");

    LabeledDataset out;
    out.features = Matrix(take.size(), ds.dim());
    out.labels.resize(take.size());
    out.truth.resize(take.size());
    out.noise_mask.resize(take.size());
    int max_new = 0;
    for (const auto& [orig, renamed] : relabel) {
        (void)orig;
        max_new = std::max(max_new, renamed);
    }
    out.num_classes = max_new + 1;
    out.delta = ds.delta;
    for (std::size_t k = 0; k < take.size(); ++k) {
        const std::size_t i = take[k];
        std::memcpy(out.features.row(k).data(), ds.features.row(i).data(), ds.dim() * sizeof(double));
        out.labels[k] = relabel.at(ds.labels[i]);
        out.truth[k] = relabel.at(ds.truth[i]);
        out.noise_mask[k] = ds.noise_mask[i];
    }
    return out;
}

// Within each ground-truth class, exactly floor(delta * class size)
// samples chosen without replacement get a label drawn uniformly from
// the other C-1 classes. Truth is preserved.
inline LabeledDataset corrupt_labels(const LabeledDataset& ds, double delta, SeededRng& rng) {
    if (!(delta >= 0.0 && delta < 0.5))
        throw std::invalid_argument("corrupt_labels: delta must lie in [0, 0.5)");
    if (ds.num_classes < 2) throw std::invalid_argument("corrupt_labels: need at least two classes");
    LabeledDataset out = ds;
    out.delta = delta;
    if (delta == 0.0) return out;
    const int C = ds.num_classes;
    for (int c = 0; c < C; ++c) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < ds.size(); ++i)
            if (ds.truth[i] == c) members.push_back(i);
        const auto flips = static_cast<std::size_t>(delta * static_cast<double>(members.size()));
        for (std::size_t k = 0; k < flips; ++k) {
            const std::size_t j = k + rng.next_below(members.size() - k);
            std::swap(members[k], members[j]);
            const auto r = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(C - 1)));
            out.labels[members[k]] = r < c ? r : r + 1;
            out.noise_mask[members[k]] = 1;
        }
    }
    return out;
}

inline SubsetView subset_view(const LabeledDataset& ds, SubsetKind kind, int cls = -1,
                              ClassMembership membership = ClassMembership::by_truth) {
    SubsetView v;
    v.parent = &ds;
    v.kind = kind;
    v.cls = cls;
    const bool per_class = kind == SubsetKind::clean_of_class || kind == SubsetKind::noise_of_class ||
                           kind == SubsetKind::other_of_class || kind == SubsetKind::class_of;
    if (per_class && (cls < 0 || cls >= ds.num_classes))
        throw std::invalid_argument("subset_view: unknown class " + std::to_string(cls));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const bool noisy = ds.noise_mask[i] != 0;
        const int member_class = membership == ClassMembership::by_truth ? ds.truth[i] : ds.labels[i];
        bool take = false;
        switch (kind) {
            case SubsetKind::clean_of_class: take = !noisy && ds.truth[i] == cls; break;
            case SubsetKind::noise_of_class: take = noisy && member_class == cls; break;
            case SubsetKind::other_of_class: take = !noisy && ds.truth[i] != cls; break;
            case SubsetKind::class_of:       take = member_class == cls; break;
            case SubsetKind::clean_all:      take = !noisy; break;
            case SubsetKind::noise_all:      take = noisy; break;
            case SubsetKind::full:
            case SubsetKind::truth_relabeled: take = true; break;
        }
        if (take) v.indices.push_back(i);
    }
    v.use_truth_labels = kind == SubsetKind::truth_relabeled;
    return v;
}

inline SubsetView truth_relabeled(const LabeledDataset& ds) {
    return subset_view(ds, SubsetKind::truth_relabeled);
}

// Binary snapshot of a dataset for reproducible reruns.
// Layout (little endian): magic 'CPDS', version u32, n u64, d u64,
// C i32, delta f64, features n*d f64, labels n i32, truth n i32,
// mask n u8.
inline constexpr std::uint32_t kSnapshotMagic = 0x43504453u;

inline void save_snapshot(const LabeledDataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("snapshot: cannot open " + path + " for writing");
    auto put = [&out](const void* p, std::size_t bytes) {
        out.write(static_cast<const char*>(p), static_cast<std::streamsize>(bytes));
    };
    const std::uint32_t version = 1;
    const std::uint64_t n = ds.size(), d = ds.dim();
    put(&kSnapshotMagic, 4);
    put(&version, 4);
    put(&n, 8);
    put(&d, 8);
    put(&ds.num_classes, 4);
    put(&ds.delta, 8);
    put(ds.features.data.data(), n * d * sizeof(double));
    put(ds.labels.data(), n * sizeof(int));
    put(ds.truth.data(), n * sizeof(int));
    put(ds.noise_mask.data(), n);
    if (!out) throw std::runtime_error("snapshot: write failed for " + path);
}

inline LabeledDataset load_snapshot(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("snapshot: cannot open " + path);
    auto get = [&in, &path](void* p, std::size_t bytes) {
        if (!in.read(static_cast<char*>(p), static_cast<std::streamsize>(bytes)))
            throw std::runtime_error("snapshot: truncated file " + path);
    };
    std::uint32_t magic = 0, version = 0;
    get(&magic, 4);
    if (magic != kSnapshotMagic) throw std::runtime_error("snapshot: bad magic in " + path);
    get(&version, 4);
    if (version != 1) throw std::runtime_error("snapshot: unsupported version in " + path);
    std::uint64_t n = 0, d = 0;
    get(&n, 8);
    get(&d, 8);
    LabeledDataset ds;
    get(&ds.num_classes, 4);
    get(&ds.delta, 8);
    ds.features = Matrix(n, d);
    ds.labels.resize(n);
    ds.truth.resize(n);
    ds.noise_mask.resize(n);
    get(ds.features.data.data(), n * d * sizeof(double));
    get(ds.labels.data(), n * sizeof(int));
    get(ds.truth.data(), n * sizeof(int));
    get(ds.noise_mask.data(), n);
    return ds;
}

}  // namespace cleanprio::data
