// Transformer building blocks: block layouts, the two attention mask
// constructors, masked attention, patch merge/split for the compression
// ratio f, MLP and norm layers, sinusoidal timestep embedding.
#pragma once

#include "transdiff/autograd.hpp"
#include "transdiff/rng.hpp"

#include <memory>
#include <vector>

namespace transdiff::nn {

enum class SegmentKind { Class, Mask, Image };

struct Segment {
    SegmentKind kind;
    std::int64_t tokens;
};

// Ordered token segments of an encoder input: one class segment, one mask
// segment, then zero or more image segments.
class BlockLayout {
  public:
    explicit BlockLayout(std::vector<Segment> segments) : segments_(std::move(segments)) {
        if (segments_.size() < 2) fail("BlockLayout: class and mask segments are required");
        if (segments_[0].kind != SegmentKind::Class || segments_[1].kind != SegmentKind::Mask)
            fail("BlockLayout: layout must start with a class segment then a mask segment");
        for (std::size_t i = 0; i < segments_.size(); ++i) {
            if (segments_[i].tokens <= 0) fail("BlockLayout: segment token counts must be positive");
            if (i >= 2 && segments_[i].kind != SegmentKind::Image)
                fail("BlockLayout: only image segments may follow the mask segment");
        }
    }

    static BlockLayout one_step(std::int64_t class_tokens, std::int64_t mask_tokens) {
        return BlockLayout({{SegmentKind::Class, class_tokens}, {SegmentKind::Mask, mask_tokens}});
    }

    static BlockLayout mrar(std::int64_t class_tokens, std::int64_t mask_tokens,
                            const std::vector<std::int64_t>& image_tokens) {
        std::vector<Segment> segs{{SegmentKind::Class, class_tokens},
                                  {SegmentKind::Mask, mask_tokens}};
        for (std::int64_t n : image_tokens) segs.push_back({SegmentKind::Image, n});
        return BlockLayout(std::move(segs));
    }

    const std::vector<Segment>& segments() const { return segments_; }

    std::int64_t total_tokens() const {
        std::int64_t n = 0;
        for (const auto& s : segments_) n += s.tokens;
        return n;
    }

    std::int64_t image_segments() const {
        return static_cast<std::int64_t>(segments_.size()) - 2;
    }

    // token offset where segment i starts
    std::int64_t offset(std::size_t i) const {
        std::int64_t off = 0;
        for (std::size_t k = 0; k < i; ++k) off += segments_[k].tokens;
        return off;
    }

  private:
    std::vector<Segment> segments_;
};

// Additive attention mask: entries are exactly 0 (attend) or -inf (blocked),
// diagonal always 0.
template <class T>
class AttentionMask {
  public:
    explicit AttentionMask(Tensor<T> entries) : entries_(std::move(entries)) {
        if (entries_.ndim() != 2 || entries_.rows() != entries_.cols())
            fail("AttentionMask: entries must be square");
        const T neg_inf = -std::numeric_limits<T>::infinity();
        for (std::int64_t r = 0; r < entries_.rows(); ++r) {
            for (std::int64_t c = 0; c < entries_.cols(); ++c) {
                const T v = entries_.at(r, c);
                if (!(v == T(0) || v == neg_inf))
                    fail("AttentionMask: entries must be 0 or -inf");
            }
            if (entries_.at(r, r) != T(0)) fail("AttentionMask: diagonal must be 0");
        }
    }

    std::int64_t size() const { return entries_.rows(); }
    const Tensor<T>& entries() const { return entries_; }
    bool blocked(std::int64_t query, std::int64_t key) const {
        return entries_.at(query, key) != T(0);
    }

  private:
    Tensor<T> entries_;
};

// all-zero bidirectional mask for the 1-step paradigm (class + mask only)
template <class T>
AttentionMask<T> build_mask_1step(const BlockLayout& layout) {
    if (layout.image_segments() != 0)
        fail("build_mask_1step: layout must not contain image segments");
    const std::int64_t n = layout.total_tokens();
    return AttentionMask<T>(Tensor<T>({n, n}));
}

// block-causal mask: block 0 is (class + mask), each image segment is one
// subsequent block; tokens in block j attend to all tokens in blocks <= j
template <class T>
AttentionMask<T> build_mask_mrar(const BlockLayout& layout) {
    const std::int64_t n = layout.total_tokens();
    std::vector<std::int64_t> block_of(static_cast<std::size_t>(n));
    std::int64_t tok = 0;
    for (std::size_t s = 0; s < layout.segments().size(); ++s) {
        const std::int64_t block = (s <= 1) ? 0 : static_cast<std::int64_t>(s) - 1;
        for (std::int64_t k = 0; k < layout.segments()[s].tokens; ++k)
            block_of[static_cast<std::size_t>(tok++)] = block;
    }
    const T neg_inf = -std::numeric_limits<T>::infinity();
    Tensor<T> m({n, n});
    for (std::int64_t q = 0; q < n; ++q)
        for (std::int64_t k = 0; k < n; ++k)
            if (block_of[static_cast<std::size_t>(k)] > block_of[static_cast<std::size_t>(q)])
                m.at(q, k) = neg_inf;
    return AttentionMask<T>(std::move(m));
}

// ---- patch merge / split (compression ratio f) ----

namespace detail {

// permutation mapping merged layout back into (h*w) x d token order
inline std::shared_ptr<std::vector<std::int64_t>> patch_merge_sources(std::int64_t h,
                                                                      std::int64_t w,
                                                                      std::int64_t d,
                                                                      std::int64_t f) {
    auto perm = std::make_shared<std::vector<std::int64_t>>();
    perm->reserve(static_cast<std::size_t>(h * w * d));
    const std::int64_t ph = h / f, pw = w / f;
    for (std::int64_t pr = 0; pr < ph; ++pr)
        for (std::int64_t pc = 0; pc < pw; ++pc)
            for (std::int64_t i = 0; i < f; ++i)
                for (std::int64_t j = 0; j < f; ++j)
                    for (std::int64_t ch = 0; ch < d; ++ch) {
                        const std::int64_t row = (pr * f + i) * w + (pc * f + j);
                        perm->push_back(row * d + ch);
                    }
    return perm;
}

inline std::shared_ptr<std::vector<std::int64_t>> invert_permutation(
    const std::vector<std::int64_t>& perm) {
    auto inv = std::make_shared<std::vector<std::int64_t>>(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i)
        (*inv)[static_cast<std::size_t>(perm[i])] = static_cast<std::int64_t>(i);
    return inv;
}

inline void check_patch_geometry(std::int64_t h, std::int64_t w, std::int64_t f,
                                 std::int64_t rows, std::int64_t expected_rows) {
    if (f <= 0) fail("patch: compression ratio must be positive");
    if (h % f != 0 || w % f != 0) fail("patch: f must divide h and w");
    if (rows != expected_rows) fail("patch: token count does not match geometry");
}

}  // namespace detail

// (h*w) x d latent -> ((h/f)*(w/f)) x (d*f*f): non-overlapping f x f spatial
// patches flattened channel-wise
template <class T>
Tensor<T> patch_merge(const Tensor<T>& x, std::int64_t h, std::int64_t w, std::int64_t f) {
    detail::check_patch_geometry(h, w, f, x.rows(), h * w);
    const std::int64_t d = x.cols();
    auto perm = detail::patch_merge_sources(h, w, d, f);
    Tensor<T> out({(h / f) * (w / f), d * f * f});
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = x[(*perm)[static_cast<std::size_t>(i)]];
    return out;
}

// exact inverse of patch_merge
template <class T>
Tensor<T> patch_split(const Tensor<T>& c, std::int64_t h, std::int64_t w, std::int64_t f) {
    detail::check_patch_geometry(h, w, f, c.rows(), (h / f) * (w / f));
    if (c.cols() % (f * f) != 0) fail("patch_split: channel count not divisible by f*f");
    const std::int64_t d = c.cols() / (f * f);
    auto perm = detail::patch_merge_sources(h, w, d, f);
    Tensor<T> out({h * w, d});
    for (std::int64_t i = 0; i < c.numel(); ++i) out[(*perm)[static_cast<std::size_t>(i)]] = c[i];
    return out;
}

template <class T>
ag::Var<T> patch_merge(ag::Var<T> x, std::int64_t h, std::int64_t w, std::int64_t f) {
    detail::check_patch_geometry(h, w, f, x.val().rows(), h * w);
    const std::int64_t d = x.val().cols();
    auto perm = detail::patch_merge_sources(h, w, d, f);
    return ag::permute_elements(x, std::shared_ptr<const std::vector<std::int64_t>>(perm),
                                {(h / f) * (w / f), d * f * f});
}

// ---- attention ----

// softmax((Q K^T)/sqrt(d_head) + mask) V over one head
template <class T>
ag::Var<T> attention(ag::Var<T> q, ag::Var<T> k, ag::Var<T> v, const AttentionMask<T>& mask) {
    const std::int64_t tokens = q.val().rows();
    if (k.val().rows() != tokens || v.val().rows() != tokens)
        fail("attention: Q, K, V token counts differ");
    if (q.val().cols() != k.val().cols()) fail("attention: Q and K head dims differ");
    if (mask.size() != tokens) fail("attention: mask size does not match token count");
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(q.val().cols()));
    ag::Var<T> scores = ag::scale(ag::matmul_nt(q, k), inv_sqrt_d);
    ag::Var<T> probs = ag::masked_softmax_rows(scores, mask.entries());
    return ag::matmul(probs, v);
}

// ---- parameter initialization helpers ----

template <class T>
struct Init {
    ParamStore<T>* store;
    SeededRng rng;
    T stddev;

    int normal(const std::string& name, Shape shape) {
        SeededRng r = rng.substream(static_cast<std::uint64_t>(store->size()));
        return store->add(name, rng_normal<T>(r, shape, stddev));
    }
    int zeros(const std::string& name, Shape shape) {
        return store->add(name, Tensor<T>(std::move(shape)));
    }
    int ones(const std::string& name, Shape shape) {
        return store->add(name, Tensor<T>::full(std::move(shape), T(1)));
    }
};

// ---- layers ----

struct LinearIds {
    int w = -1;
    int b = -1;
};

template <class T>
LinearIds make_linear(Init<T>& init, const std::string& prefix, std::int64_t in, std::int64_t out,
                      bool zero_init = false) {
    LinearIds ids;
    ids.w = zero_init ? init.zeros(prefix + ".w", {in, out}) : init.normal(prefix + ".w", {in, out});
    ids.b = init.zeros(prefix + ".b", {out});
    return ids;
}

template <class T>
ag::Var<T> linear(ag::Graph<T>& g, ParamStore<T>& ps, const LinearIds& ids, ag::Var<T> x) {
    return ag::add_rowvec(ag::matmul(x, g.param(ps, ids.w)), g.param(ps, ids.b));
}

struct LayerNormIds {
    int gain = -1;
    int bias = -1;
};

template <class T>
LayerNormIds make_layer_norm(Init<T>& init, const std::string& prefix, std::int64_t width) {
    return LayerNormIds{init.ones(prefix + ".g", {width}), init.zeros(prefix + ".b", {width})};
}

template <class T>
ag::Var<T> layer_norm(ag::Graph<T>& g, ParamStore<T>& ps, const LayerNormIds& ids, ag::Var<T> x,
                      T eps = T(1e-5)) {
    return ag::layer_norm(x, g.param(ps, ids.gain), g.param(ps, ids.bias), eps);
}

// multi-head attention layer: shared QKV projections, per-head masked
// attention, concatenated heads, output projection
struct MhaIds {
    LinearIds q, k, v, o;
    std::int64_t heads = 1;
};

template <class T>
MhaIds make_mha(Init<T>& init, const std::string& prefix, std::int64_t width, std::int64_t heads,
                bool zero_init_out = false) {
    if (width % heads != 0) fail("attention width must be divisible by head count");
    MhaIds ids;
    ids.q = make_linear(init, prefix + ".q", width, width);
    ids.k = make_linear(init, prefix + ".k", width, width);
    ids.v = make_linear(init, prefix + ".v", width, width);
    ids.o = make_linear(init, prefix + ".o", width, width, zero_init_out);
    ids.heads = heads;
    return ids;
}

template <class T>
ag::Var<T> mha(ag::Graph<T>& g, ParamStore<T>& ps, const MhaIds& ids, ag::Var<T> x,
               const AttentionMask<T>& mask) {
    const std::int64_t width = x.val().cols();
    const std::int64_t dh = width / ids.heads;
    ag::Var<T> q = linear(g, ps, ids.q, x);
    ag::Var<T> k = linear(g, ps, ids.k, x);
    ag::Var<T> v = linear(g, ps, ids.v, x);
    std::vector<ag::Var<T>> heads;
    heads.reserve(static_cast<std::size_t>(ids.heads));
    for (std::int64_t h = 0; h < ids.heads; ++h) {
        ag::Var<T> qh = ag::slice_cols(q, h * dh, dh);
        ag::Var<T> kh = ag::slice_cols(k, h * dh, dh);
        ag::Var<T> vh = ag::slice_cols(v, h * dh, dh);
        heads.push_back(attention(qh, kh, vh, mask));
    }
    ag::Var<T> cat = ids.heads == 1 ? heads[0] : ag::concat_cols(heads);
    return linear(g, ps, ids.o, cat);
}

struct MlpIds {
    LinearIds up, down;
};

template <class T>
MlpIds make_mlp(Init<T>& init, const std::string& prefix, std::int64_t width,
                std::int64_t hidden_ratio = 4, bool zero_init_out = false) {
    MlpIds ids;
    ids.up = make_linear(init, prefix + ".up", width, width * hidden_ratio);
    ids.down = make_linear(init, prefix + ".down", width * hidden_ratio, width, zero_init_out);
    return ids;
}

template <class T>
ag::Var<T> mlp(ag::Graph<T>& g, ParamStore<T>& ps, const MlpIds& ids, ag::Var<T> x) {
    return linear(g, ps, ids.down, ag::gelu(linear(g, ps, ids.up, x)));
}

// ---- pre-norm transformer stack (the AR encoder body) ----

struct BlockIds {
    LayerNormIds ln1, ln2;
    MhaIds attn;
    MlpIds mlp;
};

struct StackIds {
    std::vector<BlockIds> blocks;
    std::int64_t width = 0;
};

template <class T>
StackIds make_transformer(Init<T>& init, const std::string& prefix, std::int64_t depth,
                          std::int64_t width, std::int64_t heads) {
    StackIds ids;
    ids.width = width;
    for (std::int64_t b = 0; b < depth; ++b) {
        const std::string bp = prefix + ".block" + std::to_string(b);
        BlockIds blk;
        blk.ln1 = make_layer_norm<T>(init, bp + ".ln1", width);
        blk.attn = make_mha(init, bp + ".attn", width, heads);
        blk.ln2 = make_layer_norm<T>(init, bp + ".ln2", width);
        blk.mlp = make_mlp(init, bp + ".mlp", width);
        ids.blocks.push_back(blk);
    }
    return ids;
}

// pre-norm residual blocks; depth = 0 is the identity
template <class T>
ag::Var<T> transformer_forward(ag::Graph<T>& g, ParamStore<T>& ps, const StackIds& ids,
                               ag::Var<T> tokens, const AttentionMask<T>& mask) {
    if (!ids.blocks.empty() && tokens.val().cols() != ids.width)
        fail("transformer_forward: token width does not match parameters");
    if (mask.size() != tokens.val().rows())
        fail("transformer_forward: mask size does not match token count");
    ag::Var<T> x = tokens;
    for (const BlockIds& blk : ids.blocks) {
        x = ag::add(x, mha(g, ps, blk.attn, layer_norm(g, ps, blk.ln1, x), mask));
        x = ag::add(x, mlp(g, ps, blk.mlp, layer_norm(g, ps, blk.ln2, x)));
    }
    return x;
}

// ---- sinusoidal timestep embedding ----

// half sin / half cos with log-spaced frequencies; plain tensor since t never
// needs a gradient
template <class T>
Tensor<T> timestep_embedding(T t, std::int64_t dim, T max_period = T(10000)) {
    if (dim % 2 != 0) fail("timestep_embedding: dim must be even");
    Tensor<T> out({1, dim});
    const std::int64_t half = dim / 2;
    for (std::int64_t i = 0; i < half; ++i) {
        const double freq =
            std::exp(-std::log(static_cast<double>(max_period)) * static_cast<double>(i) /
                     static_cast<double>(half));
        const double arg = static_cast<double>(t) * freq;
        out[i] = static_cast<T>(std::cos(arg));
        out[half + i] = static_cast<T>(std::sin(arg));
    }
    return out;
}

// ---- adaptive layer-norm (DiT-style) decoder block ----

struct AdaBlockIds {
    MhaIds attn;
    MlpIds mlp;
    LinearIds modulation;  // t embedding -> [shift1 scale1 gate1 shift2 scale2 gate2]
};

// Only the modulation is zero-initialized (gates start closed, block starts
// as identity). The attention and MLP projections stay randomly initialized:
// a zero out-projection and a zero gate would hold each other's gradients at
// exactly zero and never open.
template <class T>
AdaBlockIds make_ada_block(Init<T>& init, const std::string& prefix, std::int64_t width,
                           std::int64_t heads) {
    AdaBlockIds ids;
    ids.attn = make_mha(init, prefix + ".attn", width, heads);
    ids.mlp = make_mlp(init, prefix + ".mlp", width);
    ids.modulation = make_linear(init, prefix + ".ada", width, 6 * width, /*zero_init=*/true);
    return ids;
}

template <class T>
ag::Var<T> modulate(ag::Var<T> x, ag::Var<T> shift, ag::Var<T> scale) {
    // x * (1 + scale) + shift, rows broadcast
    ag::Var<T> one = x.g->constant(Tensor<T>::full(scale.val().shape(), T(1)));
    return ag::add_rowvec(ag::mul_rowvec(x, ag::add(one, scale)), shift);
}

// zero-initialized modulation makes the block the identity at initialization
template <class T>
ag::Var<T> ada_block(ag::Graph<T>& g, ParamStore<T>& ps, const AdaBlockIds& ids, ag::Var<T> x,
                     ag::Var<T> t_emb, const AttentionMask<T>& mask) {
    const std::int64_t width = x.val().cols();
    ag::Var<T> mod = linear(g, ps, ids.modulation, ag::silu(t_emb));
    ag::Var<T> shift1 = ag::slice_cols(mod, 0 * width, width);
    ag::Var<T> scale1 = ag::slice_cols(mod, 1 * width, width);
    ag::Var<T> gate1 = ag::slice_cols(mod, 2 * width, width);
    ag::Var<T> shift2 = ag::slice_cols(mod, 3 * width, width);
    ag::Var<T> scale2 = ag::slice_cols(mod, 4 * width, width);
    ag::Var<T> gate2 = ag::slice_cols(mod, 5 * width, width);

    ag::Var<T> h = modulate(ag::layer_norm_plain(x, T(1e-5)), shift1, scale1);
    x = ag::add(x, ag::mul_rowvec(mha(g, ps, ids.attn, h, mask), gate1));
    h = modulate(ag::layer_norm_plain(x, T(1e-5)), shift2, scale2);
    x = ag::add(x, ag::mul_rowvec(mlp(g, ps, ids.mlp, h), gate2));
    return x;
}

}  // namespace transdiff::nn
