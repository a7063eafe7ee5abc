// Measurement toolkit: the semantic-feature diversity metric, condition
// fusion, and the desk-scale distribution-fidelity metrics (sliced
// Wasserstein distance and nearest-centroid class accuracy).
#pragma once

#include "transdiff/rng.hpp"
#include "transdiff/tensor.hpp"

#include <algorithm>
#include <vector>

namespace transdiff::analysis {

// Mean absolute off-diagonal cosine similarity of L2-normalized rows, in
// [0, 1]; smaller = more diverse.
template <class T>
double diversity_metric(const Tensor<T>& features) {
    const std::int64_t n = features.rows();
    if (n < 2) fail("diversity_metric: at least two rows required");
    Tensor<T> unit = features;
    for (std::int64_t r = 0; r < n; ++r) {
        double norm_sq = 0;
        for (std::int64_t c = 0; c < features.cols(); ++c)
            norm_sq += static_cast<double>(features.at(r, c)) * static_cast<double>(features.at(r, c));
        const double norm = std::sqrt(norm_sq);
        if (!(norm > 0)) fail("diversity_metric: zero-norm row");
        for (std::int64_t c = 0; c < features.cols(); ++c)
            unit.at(r, c) = static_cast<T>(static_cast<double>(features.at(r, c)) / norm);
    }
    Tensor<T> sim = matmul_nt(unit, unit);
    double acc = 0;
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < n; ++j)
            if (i != j) acc += std::abs(static_cast<double>(sim.at(i, j)));
    return acc / (static_cast<double>(n) * static_cast<double>(n - 1));
}

enum class FusionMode { Prefix, Interleaved };

// first k token rows from a, remaining rows from b (Prefix); Interleaved
// alternates rows a,b,a,b,... using k rows of a in the even slots
template <class T>
Tensor<T> fuse_conditions(const Tensor<T>& a, const Tensor<T>& b, std::int64_t k,
                          FusionMode mode = FusionMode::Prefix) {
    check_same_shape(a, b, "fuse_conditions");
    const std::int64_t n = a.rows();
    if (k < 0 || k > n) fail("fuse_conditions: k out of range");
    Tensor<T> out(a.shape());
    if (mode == FusionMode::Prefix) {
        for (std::int64_t r = 0; r < n; ++r) {
            const Tensor<T>& src = r < k ? a : b;
            for (std::int64_t c = 0; c < a.cols(); ++c) out.at(r, c) = src.at(r, c);
        }
    } else {
        std::int64_t used_a = 0;
        for (std::int64_t r = 0; r < n; ++r) {
            const bool take_a = (r % 2 == 0 && used_a < k) || (n - r <= k - used_a);
            const Tensor<T>& src = take_a ? a : b;
            if (take_a) ++used_a;
            for (std::int64_t c = 0; c < a.cols(); ++c) out.at(r, c) = src.at(r, c);
        }
    }
    return out;
}

namespace detail {

// exact 1-D Wasserstein-1 between empirical distributions, possibly of
// different sizes, via piecewise-constant quantile functions
inline double wasserstein_1d(std::vector<double> x, std::vector<double> y) {
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    const std::size_t n = x.size(), m = y.size();
    double dist = 0;
    std::size_t i = 0, j = 0;
    double q = 0;
    while (i < n && j < m) {
        const double qx = static_cast<double>(i + 1) / static_cast<double>(n);
        const double qy = static_cast<double>(j + 1) / static_cast<double>(m);
        const double q_next = std::min(qx, qy);
        dist += (q_next - q) * std::abs(x[i] - y[j]);
        q = q_next;
        if (qx <= q_next) ++i;
        if (qy <= q_next) ++j;
    }
    return dist;
}

}  // namespace detail

// mean over random unit directions of the 1-D Wasserstein-1 distance between
// the projected sample sets
template <class T>
double sliced_wasserstein(const std::vector<Tensor<T>>& xs, const std::vector<Tensor<T>>& ys,
                          int n_projections, SeededRng rng) {
    if (xs.empty() || ys.empty()) fail("sliced_wasserstein: empty sample set");
    const std::int64_t dim = xs.front().numel();
    for (const auto& s : xs)
        if (s.numel() != dim) fail("sliced_wasserstein: sample dimensions differ");
    for (const auto& s : ys)
        if (s.numel() != dim) fail("sliced_wasserstein: sample dimensions differ");
    if (n_projections < 1) fail("sliced_wasserstein: need at least one projection");

    double total = 0;
    for (int p = 0; p < n_projections; ++p) {
        SeededRng proj_rng = rng.substream(static_cast<std::uint64_t>(p));
        std::vector<double> dir(static_cast<std::size_t>(dim));
        double norm_sq = 0;
        for (auto& v : dir) {
            v = proj_rng.normal();
            norm_sq += v * v;
        }
        const double inv_norm = 1.0 / std::sqrt(norm_sq);

        auto project = [&](const std::vector<Tensor<T>>& set) {
            std::vector<double> out;
            out.reserve(set.size());
            for (const auto& s : set) {
                double dot = 0;
                for (std::int64_t i = 0; i < dim; ++i)
                    dot += static_cast<double>(s[i]) * dir[static_cast<std::size_t>(i)];
                out.push_back(dot * inv_norm);
            }
            return out;
        };
        total += detail::wasserstein_1d(project(xs), project(ys));
    }
    return total / n_projections;
}

template <class T>
struct LabeledSample {
    std::int64_t label = 0;
    Tensor<T> latent;
};

// class centroids of flattened latents
template <class T>
std::vector<Tensor<T>> class_centroids(const std::vector<LabeledSample<T>>& samples,
                                       std::int64_t n_classes) {
    if (samples.empty()) fail("class_centroids: empty input");
    std::vector<Tensor<T>> centroids;
    std::vector<std::int64_t> counts(static_cast<std::size_t>(n_classes), 0);
    for (std::int64_t c = 0; c < n_classes; ++c) centroids.emplace_back(samples.front().latent.shape());
    for (const auto& s : samples) {
        if (s.label < 0 || s.label >= n_classes) fail("class_centroids: label out of range");
        auto& cen = centroids[static_cast<std::size_t>(s.label)];
        for (std::int64_t i = 0; i < cen.numel(); ++i) cen[i] += s.latent[i];
        ++counts[static_cast<std::size_t>(s.label)];
    }
    for (std::int64_t c = 0; c < n_classes; ++c) {
        if (counts[static_cast<std::size_t>(c)] == 0) fail("class_centroids: class has no samples");
        auto& cen = centroids[static_cast<std::size_t>(c)];
        const T inv = T(1) / static_cast<T>(counts[static_cast<std::size_t>(c)]);
        for (std::int64_t i = 0; i < cen.numel(); ++i) cen[i] *= inv;
    }
    return centroids;
}

template <class T>
double squared_distance(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "squared_distance");
    double acc = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return acc;
}

// fraction of samples whose nearest centroid matches their intended label
template <class T>
double centroid_accuracy(const std::vector<LabeledSample<T>>& samples,
                         const std::vector<Tensor<T>>& centroids) {
    if (samples.empty()) fail("centroid_accuracy: empty input");
    if (centroids.empty()) fail("centroid_accuracy: no centroids");
    for (const auto& s : samples)
        if (s.label < 0 || s.label >= static_cast<std::int64_t>(centroids.size()))
            fail("centroid_accuracy: centroids do not cover all labels");
    std::int64_t hits = 0;
    for (const auto& s : samples) {
        std::int64_t best = 0;
        double best_d = squared_distance(s.latent, centroids[0]);
        for (std::size_t c = 1; c < centroids.size(); ++c) {
            const double dist = squared_distance(s.latent, centroids[c]);
            if (dist < best_d) {
                best_d = dist;
                best = static_cast<std::int64_t>(c);
            }
        }
        if (best == s.label) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(samples.size());
}

}  // namespace transdiff::analysis
