// Synthetic class-conditional latent datasets. Each class owns a fixed mean
// pattern (oriented bars, checkerboard, or Gaussian blob mixture, assigned
// cyclically); samples are the pattern plus Gaussian noise, deterministic in
// (seed, class, sample index).
#pragma once

#include "transdiff/rng.hpp"
#include "transdiff/tensor.hpp"

#include <vector>

namespace transdiff::data {

struct SyntheticDatasetSpec {
    std::int64_t n_classes = 8;
    std::int64_t h = 8, w = 8, d = 4;
    double noise_std = 0.25;
    std::uint64_t seed = 1234;

    void validate() const {
        if (n_classes <= 0) fail("SyntheticDatasetSpec: n_classes must be positive");
        if (h <= 0 || w <= 0 || d <= 0) fail("SyntheticDatasetSpec: geometry must be positive");
        if (!(noise_std > 0)) fail("SyntheticDatasetSpec: noise_std must be positive");
    }
};

// index offset separating held-out samples from the training pool
inline constexpr std::uint64_t kHeldOutIndexBase = std::uint64_t(1) << 30;

template <class T>
class SyntheticDataset {
  public:
    explicit SyntheticDataset(SyntheticDatasetSpec spec) : spec_(spec) {
        spec_.validate();
        build_means();
        verify_separation();
    }

    const SyntheticDatasetSpec& spec() const { return spec_; }
    const Tensor<T>& class_mean(std::int64_t class_id) const {
        check_class(class_id);
        return means_[static_cast<std::size_t>(class_id)];
    }

    // pattern + noise_std * N(0, I), pure function of (seed, class, index)
    Tensor<T> sample(std::int64_t class_id, std::uint64_t index) const {
        check_class(class_id);
        SeededRng rng(spec_.seed,
                      detail::mix64((static_cast<std::uint64_t>(class_id) << 32) ^ index));
        Tensor<T> out = means_[static_cast<std::size_t>(class_id)];
        for (std::int64_t i = 0; i < out.numel(); ++i)
            out[i] += static_cast<T>(spec_.noise_std * rng.normal());
        return out;
    }

    std::vector<Tensor<T>> generate(std::int64_t class_id, std::int64_t count,
                                    std::uint64_t index_base = 0) const {
        if (count < 0) fail("generate: count must be non-negative");
        std::vector<Tensor<T>> out;
        out.reserve(static_cast<std::size_t>(count));
        for (std::int64_t i = 0; i < count; ++i)
            out.push_back(sample(class_id, index_base + static_cast<std::uint64_t>(i)));
        return out;
    }

    double min_mean_separation() const {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t a = 0; a < means_.size(); ++a)
            for (std::size_t b = a + 1; b < means_.size(); ++b) {
                double acc = 0;
                for (std::int64_t i = 0; i < means_[a].numel(); ++i) {
                    const double dd =
                        static_cast<double>(means_[a][i]) - static_cast<double>(means_[b][i]);
                    acc += dd * dd;
                }
                best = std::min(best, std::sqrt(acc));
            }
        return best;
    }

  private:
    void check_class(std::int64_t class_id) const {
        if (class_id < 0 || class_id >= spec_.n_classes) fail("dataset: invalid class");
    }

    void build_means() {
        for (std::int64_t c = 0; c < spec_.n_classes; ++c) {
            SeededRng rng(spec_.seed, 0xc1a55000ULL + static_cast<std::uint64_t>(c));
            Tensor<T> m({spec_.h * spec_.w, spec_.d});
            switch (c % 3) {
                case 0: oriented_bars(rng, c, m); break;
                case 1: checkerboard(rng, c, m); break;
                default: blob_mixture(rng, c, m); break;
            }
            // remove the spatial DC so class identity lives in the pattern
            // shape, then add a small per-channel offset to keep classes of
            // the same family apart
            for (std::int64_t ch = 0; ch < spec_.d; ++ch) {
                T mean_ch = 0;
                for (std::int64_t tok = 0; tok < spec_.h * spec_.w; ++tok) mean_ch += m.at(tok, ch);
                mean_ch /= static_cast<T>(spec_.h * spec_.w);
                const T off = static_cast<T>(0.3 * rng.normal());
                for (std::int64_t tok = 0; tok < spec_.h * spec_.w; ++tok)
                    m.at(tok, ch) += off - mean_ch;
            }
            means_.push_back(std::move(m));
        }
        // scale patterns until the separation invariant is met by construction
        const double need = 4.0 * spec_.noise_std;
        const double have = min_mean_separation();
        if (have < need && have > 0) {
            const T s = static_cast<T>(1.05 * need / have);
            for (auto& m : means_) m = scale(m, s);
        }
    }

    void verify_separation() const {
        if (min_mean_separation() < 4.0 * spec_.noise_std)
            fail("dataset: class means closer than 4x noise_std");
    }

    void oriented_bars(SeededRng& rng, std::int64_t c, Tensor<T>& m) const {
        const double theta = 3.14159265358979 * static_cast<double>(c) /
                                 static_cast<double>(spec_.n_classes) +
                             0.3 * rng.normal();
        const double freq = 1.5 + rng.uniform() * 2.0;
        const double scale_len = static_cast<double>(std::max(spec_.h, spec_.w));
        for (std::int64_t r = 0; r < spec_.h; ++r)
            for (std::int64_t col = 0; col < spec_.w; ++col)
                for (std::int64_t ch = 0; ch < spec_.d; ++ch) {
                    const double u = (std::cos(theta) * r + std::sin(theta) * col) / scale_len;
                    const double phase = 0.9 * static_cast<double>(ch);
                    m.at(r * spec_.w + col, ch) =
                        static_cast<T>(std::sin(6.28318530717959 * freq * u + phase));
                }
    }

    void checkerboard(SeededRng& rng, std::int64_t, Tensor<T>& m) const {
        const std::int64_t cell =
            1 + static_cast<std::int64_t>(rng.index_below(
                    static_cast<std::uint64_t>(std::max<std::int64_t>(1, spec_.h / 2))));
        const std::int64_t pr = static_cast<std::int64_t>(rng.index_below(
            static_cast<std::uint64_t>(std::max<std::int64_t>(1, cell * 2))));
        const std::int64_t pc = static_cast<std::int64_t>(rng.index_below(
            static_cast<std::uint64_t>(std::max<std::int64_t>(1, cell * 2))));
        for (std::int64_t r = 0; r < spec_.h; ++r)
            for (std::int64_t col = 0; col < spec_.w; ++col)
                for (std::int64_t ch = 0; ch < spec_.d; ++ch) {
                    const bool on = (((r + pr) / cell) + ((col + pc) / cell)) % 2 == 0;
                    const double sgn = (ch % 2 == 0) ? 1.0 : -1.0;
                    m.at(r * spec_.w + col, ch) = static_cast<T>((on ? 1.0 : -1.0) * sgn);
                }
    }

    void blob_mixture(SeededRng& rng, std::int64_t, Tensor<T>& m) const {
        // one blob per quadrant with jittered center so the class signature
        // spreads over the whole grid
        for (int k = 0; k < 4; ++k) {
            const double qr = (k / 2 == 0 ? 0.25 : 0.75) * static_cast<double>(spec_.h);
            const double qc = (k % 2 == 0 ? 0.25 : 0.75) * static_cast<double>(spec_.w);
            const double cr = qr + (rng.uniform() - 0.5) * 0.5 * spec_.h;
            const double cc = qc + (rng.uniform() - 0.5) * 0.5 * spec_.w;
            const double s = 0.6 + rng.uniform() * 1.2;
            const double amp = (rng.uniform() < 0.5 ? 1.2 : -1.2);
            for (std::int64_t r = 0; r < spec_.h; ++r)
                for (std::int64_t col = 0; col < spec_.w; ++col) {
                    const double dist_sq = (r - cr) * (r - cr) + (col - cc) * (col - cc);
                    const double g = amp * std::exp(-dist_sq / (2.0 * s * s));
                    for (std::int64_t ch = 0; ch < spec_.d; ++ch)
                        m.at(r * spec_.w + col, ch) +=
                            static_cast<T>(g * (ch % 2 == 0 ? 1.0 : 0.6));
                }
        }
    }

    SyntheticDatasetSpec spec_;
    std::vector<Tensor<T>> means_;
};

}  // namespace transdiff::data
