// The TransDiff architecture: input assembly for the 1-step and
// multi-reference paradigms, the AR transformer encoder producing condition
// blocks, the adaLN diffusion decoder predicting velocities, the joint
// training loss, and both inference procedures.
#pragma once

#include "transdiff/flow.hpp"
#include "transdiff/nn.hpp"
#include "transdiff/sampler.hpp"

#include <optional>
#include <string>
#include <vector>

namespace transdiff::model {

struct ModelConfig {
    std::int64_t h = 8, w = 8, d = 4;
    std::int64_t f = 2;
    std::int64_t n_class_tokens = 4;
    std::int64_t n_classes = 8;
    std::int64_t enc_depth = 4, enc_width = 128, enc_heads = 4;
    std::int64_t dec_depth = 4, dec_width = 128, dec_heads = 4;
    double p_cond_drop = 0.1;
    std::int64_t max_references = 4;

    std::int64_t latent_tokens() const { return h * w; }
    std::int64_t cond_tokens() const { return (h / f) * (w / f); }
    std::int64_t cond_width() const { return d * f * f; }
    std::int64_t enc_sequence_max() const {
        return n_class_tokens + cond_tokens() * (1 + max_references);
    }

    void validate() const {
        if (h <= 0 || w <= 0 || d <= 0) fail("ModelConfig: latent geometry must be positive");
        if (f <= 0 || h % f != 0 || w % f != 0) fail("ModelConfig: f must divide h and w");
        if (n_class_tokens <= 0 || n_classes <= 0) fail("ModelConfig: class settings must be positive");
        if (enc_depth < 0 || dec_depth < 0) fail("ModelConfig: depths must be non-negative");
        if (enc_width % enc_heads != 0 || dec_width % dec_heads != 0)
            fail("ModelConfig: widths must be divisible by head counts");
        if (dec_width % 2 != 0) fail("ModelConfig: decoder width must be even");
        if (p_cond_drop < 0.0 || p_cond_drop >= 1.0) fail("ModelConfig: p_cond_drop must be in [0,1)");
        if (max_references < 0) fail("ModelConfig: max_references must be >= 0");
    }

    // gradient-check scale
    static ModelConfig micro() {
        ModelConfig c;
        c.h = c.w = 4;
        c.d = 2;
        c.f = 2;
        c.n_class_tokens = 2;
        c.n_classes = 4;
        c.enc_depth = c.dec_depth = 1;
        c.enc_width = c.dec_width = 16;
        c.enc_heads = c.dec_heads = 2;
        c.max_references = 2;
        return c;
    }

    // default desk-scale geometry; trains on one CPU in minutes
    static ModelConfig desk() { return ModelConfig{}; }

    // paper-scale presets, documented but untested at this scale
    static ModelConfig paper_base() { return paper_preset(24, 768, 12, 768); }
    static ModelConfig paper_large() { return paper_preset(32, 1024, 16, 1024); }
    static ModelConfig paper_huge() { return paper_preset(40, 1280, 20, 1280); }

  private:
    static ModelConfig paper_preset(std::int64_t enc_depth, std::int64_t enc_width,
                                    std::int64_t dec_depth, std::int64_t dec_width) {
        ModelConfig c;
        c.h = c.w = 16;
        c.d = 16;
        c.f = 1;
        c.n_class_tokens = 64;
        c.n_classes = 1000;
        c.enc_depth = enc_depth;
        c.enc_width = enc_width;
        c.enc_heads = enc_width / 64;
        c.dec_depth = dec_depth;
        c.dec_width = dec_width;
        c.dec_heads = dec_width / 64;
        return c;
    }
};

// semantic condition for one image: cond_tokens x cond_width
template <class T>
struct ConditionBlock {
    Tensor<T> tokens;
};

template <class T>
void check_condition_shape(const Tensor<T>& c, const ModelConfig& cfg, const char* what) {
    if (c.ndim() != 2 || c.rows() != cfg.cond_tokens() || c.cols() != cfg.cond_width())
        fail(std::string(what) + ": condition shape " + shape_str(c.shape()) +
             " violates ((h/f)(w/f)) x (d f^2)");
}

template <class T>
struct Assembled {
    ag::Var<T> tokens;
    nn::BlockLayout layout;
    nn::AttentionMask<T> mask;
    std::int64_t class_id = -1;  // -1 for the null (dropped) class
};

template <class T>
struct MrarTrace {
    std::vector<Tensor<T>> generated;   // o_img_0 .. o_img_n
    std::vector<Tensor<T>> conditions;  // condition block used for each image
};

template <class T>
class TransDiff {
  public:
    TransDiff(ModelConfig cfg, std::uint64_t init_seed) : cfg_(cfg) {
        cfg_.validate();
        nn::Init<T> init{&params_, SeededRng(init_seed, 0xa11c0de5), T(0.02)};

        class_emb_ = init.normal("enc.class_emb", {cfg_.n_classes * cfg_.n_class_tokens, cfg_.enc_width});
        null_class_emb_ = init.normal("enc.null_class_emb", {cfg_.n_class_tokens, cfg_.enc_width});
        mask_emb_ = init.normal("enc.mask_emb", {cfg_.cond_tokens(), cfg_.cond_width()});
        proj_in_ = nn::make_linear(init, "enc.proj_in", cfg_.cond_width(), cfg_.enc_width);
        enc_pos_ = init.normal("enc.pos", {cfg_.enc_sequence_max(), cfg_.enc_width});
        encoder_ = nn::make_transformer<T>(init, "enc", cfg_.enc_depth, cfg_.enc_width, cfg_.enc_heads);
        head_ln_ = nn::make_layer_norm<T>(init, "enc.head_ln", cfg_.enc_width);
        head_ = nn::make_linear(init, "enc.head", cfg_.enc_width, cfg_.cond_width());

        cond_in_ = nn::make_linear(init, "dec.cond_in", cfg_.cond_width(), cfg_.dec_width);
        x_in_ = nn::make_linear(init, "dec.x_in", cfg_.d, cfg_.dec_width);
        dec_pos_ = init.normal("dec.pos", {cfg_.cond_tokens() + cfg_.latent_tokens(), cfg_.dec_width});
        temb1_ = nn::make_linear(init, "dec.temb1", cfg_.dec_width, cfg_.dec_width);
        temb2_ = nn::make_linear(init, "dec.temb2", cfg_.dec_width, cfg_.dec_width);
        for (std::int64_t b = 0; b < cfg_.dec_depth; ++b)
            dec_blocks_.push_back(
                nn::make_ada_block(init, "dec.block" + std::to_string(b), cfg_.dec_width, cfg_.dec_heads));
        final_ada_ = nn::make_linear(init, "dec.final_ada", cfg_.dec_width, 2 * cfg_.dec_width,
                                     /*zero_init=*/true);
        final_out_ = nn::make_linear(init, "dec.final", cfg_.dec_width, cfg_.d, /*zero_init=*/true);
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    // ---- input assembly ----

    // [class block | mask block] under an all-zero bidirectional mask
    Assembled<T> assemble_1step(ag::Graph<T>& g, std::int64_t class_id) {
        return assemble(g, class_id, {}, false);
    }

    // class block replaced by the learned null embedding (condition dropout)
    Assembled<T> assemble_1step_null(ag::Graph<T>& g) { return assemble(g, 0, {}, true); }

    // [class | mask | merged reference latents...] under the block-causal mask
    Assembled<T> assemble_mrar(ag::Graph<T>& g, std::int64_t class_id,
                               const std::vector<Tensor<T>>& prev_latents, bool null_class = false) {
        return assemble(g, class_id, prev_latents, null_class);
    }

    // ---- encoder ----

    // conditions[0] reads the mask block; conditions[i >= 1] reads image
    // block i-1, so condition i depends only on references 0..i-1
    std::vector<ag::Var<T>> encode_conditions(ag::Graph<T>& g, const Assembled<T>& input) {
        ag::Var<T> out = nn::transformer_forward(g, params_, encoder_, input.tokens, input.mask);
        std::vector<ag::Var<T>> conditions;
        const auto& segs = input.layout.segments();
        for (std::size_t s = 1; s < segs.size(); ++s) {
            ag::Var<T> rows = ag::slice_rows(out, input.layout.offset(s), segs[s].tokens);
            ag::Var<T> c = nn::linear(g, params_, head_, nn::layer_norm(g, params_, head_ln_, rows));
            conditions.push_back(c);
        }
        return conditions;
    }

    // the learned unconditional block: encoder output for the null-class
    // 1-step assembly
    ag::Var<T> null_condition(ag::Graph<T>& g) {
        Assembled<T> a = assemble_1step_null(g);
        return encode_conditions(g, a)[0];
    }

    // ---- decoder ----

    // condition tokens prepended to noisy-latent tokens, full bidirectional
    // attention, timestep via adaLN; returns velocity rows for the noisy
    // tokens only
    ag::Var<T> decode_velocity(ag::Graph<T>& g, const Tensor<T>& x_t, T t,
                               std::optional<ag::Var<T>> condition) {
        flow::check_t_range(t);
        if (x_t.ndim() != 2 || x_t.rows() != cfg_.latent_tokens() || x_t.cols() != cfg_.d)
            fail("decode_velocity: x_t shape " + shape_str(x_t.shape()) + " must be (h w) x d");
        ag::Var<T> cond = condition ? *condition : null_condition(g);
        check_condition_shape(cond.val(), cfg_, "decode_velocity");

        ag::Var<T> cond_tok = nn::linear(g, params_, cond_in_, cond);
        ag::Var<T> x_tok = nn::linear(g, params_, x_in_, g.constant(x_t));
        ag::Var<T> tokens = ag::concat_rows<T>({cond_tok, x_tok});
        tokens = ag::add(tokens, g.param(params_, dec_pos_));

        ag::Var<T> t_emb = nn::linear(
            g, params_, temb2_,
            ag::silu(nn::linear(g, params_, temb1_,
                                g.constant(nn::timestep_embedding<T>(t * T(1000), cfg_.dec_width)))));

        const std::int64_t n = cfg_.cond_tokens() + cfg_.latent_tokens();
        nn::AttentionMask<T> mask(Tensor<T>({n, n}));
        ag::Var<T> x = tokens;
        for (const auto& blk : dec_blocks_) x = nn::ada_block(g, params_, blk, x, t_emb, mask);

        ag::Var<T> h = ag::layer_norm_plain(x, T(1e-5));
        ag::Var<T> mod = nn::linear(g, params_, final_ada_, ag::silu(t_emb));
        ag::Var<T> shift = ag::slice_cols(mod, 0, cfg_.dec_width);
        ag::Var<T> scale = ag::slice_cols(mod, cfg_.dec_width, cfg_.dec_width);
        h = nn::modulate(h, shift, scale);
        h = ag::slice_rows(h, cfg_.cond_tokens(), cfg_.latent_tokens());
        return nn::linear(g, params_, final_out_, h);
    }

    // ---- joint loss ----

    struct SeqItem {
        std::int64_t class_id = 0;
        Tensor<T> latent;
    };
    struct TrainSequence {
        std::vector<SeqItem> items;  // x_0 .. x_n, all same class
        bool drop_class = false;     // replace class block by the null embedding
    };

    // Mean over all positions of all sequences of the flow-matching loss,
    // each position decoded against the condition produced from its prefix.
    ag::Var<T> joint_loss(ag::Graph<T>& g, const std::vector<TrainSequence>& batch,
                          const std::vector<std::vector<T>>& t_draws,
                          const std::vector<std::vector<Tensor<T>>>& eps_draws) {
        if (batch.empty()) fail("joint_loss: empty batch");
        if (t_draws.size() != batch.size() || eps_draws.size() != batch.size())
            fail("joint_loss: draw counts do not match batch size");
        std::vector<ag::Var<T>> position_losses;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const TrainSequence& seq = batch[b];
            if (seq.items.empty()) fail("joint_loss: empty sequence");
            const std::int64_t cls = seq.items.front().class_id;
            for (const auto& it : seq.items)
                if (it.class_id != cls) fail("joint_loss: class mismatch within a sequence");
            if (t_draws[b].size() != seq.items.size() || eps_draws[b].size() != seq.items.size())
                fail("joint_loss: draw counts do not match sequence length");

            std::vector<Tensor<T>> refs;
            for (std::size_t i = 0; i + 1 < seq.items.size(); ++i)
                refs.push_back(seq.items[i].latent);
            Assembled<T> input = assemble_mrar(g, cls, refs, seq.drop_class);
            std::vector<ag::Var<T>> conditions = encode_conditions(g, input);

            for (std::size_t i = 0; i < seq.items.size(); ++i) {
                const Tensor<T>& x = seq.items[i].latent;
                const Tensor<T>& eps = eps_draws[b][i];
                const T t = t_draws[b][i];
                Tensor<T> x_t = flow::interpolate(x, eps, t);
                ag::Var<T> v = decode_velocity(g, x_t, t, conditions[i]);
                position_losses.push_back(flow::flow_loss(v, x, eps));
            }
        }
        return ag::mean_of(position_losses);
    }

    // ---- inference ----

    // Alg. 1: assemble -> encode -> diffusion sampling bound to the single
    // condition; guidance (when cfg_scale != 1) uses the null condition
    Tensor<T> infer_1step(std::int64_t class_id, const sampler::SamplerConfig& scfg,
                          SeededRng& rng) {
        return infer_1step_traced(class_id, scfg, rng).generated.back();
    }

    MrarTrace<T> infer_1step_traced(std::int64_t class_id, const sampler::SamplerConfig& scfg,
                                    SeededRng& rng) {
        ag::Graph<T> g(false);
        Assembled<T> input = assemble_1step(g, class_id);
        Tensor<T> c = encode_conditions(g, input)[0].val();
        MrarTrace<T> trace;
        trace.conditions.push_back(c);
        trace.generated.push_back(sample_with_condition(c, scfg, rng));
        return trace;
    }

    // Alg. 2: iteration i re-assembles with all previously generated latents,
    // encodes, and decodes image i against its own condition block
    Tensor<T> infer_mrar(std::int64_t class_id, std::int64_t n_refs,
                         const sampler::SamplerConfig& scfg, SeededRng& rng) {
        return infer_mrar_traced(class_id, n_refs, scfg, rng).generated.back();
    }

    MrarTrace<T> infer_mrar_traced(std::int64_t class_id, std::int64_t n_refs,
                                   const sampler::SamplerConfig& scfg, SeededRng& rng) {
        if (n_refs < 0 || n_refs > cfg_.max_references) fail("infer_mrar: too many references");
        MrarTrace<T> trace;
        for (std::int64_t i = 0; i <= n_refs; ++i) {
            ag::Graph<T> g(false);
            Assembled<T> input = assemble_mrar(g, class_id, trace.generated);
            std::vector<ag::Var<T>> conditions = encode_conditions(g, input);
            Tensor<T> c = conditions.back().val();
            trace.conditions.push_back(c);
            trace.generated.push_back(sample_with_condition(c, scfg, rng));
        }
        return trace;
    }

    // diffusion sampling bound to a fixed condition block (used by inference
    // and by the condition-fusion analysis)
    Tensor<T> sample_with_condition(const Tensor<T>& condition, const sampler::SamplerConfig& scfg,
                                    SeededRng& rng) {
        check_condition_shape(condition, cfg_, "sample_with_condition");
        sampler::VelocityFn<T> vfn = [this, &condition](const Tensor<T>& x, T t) {
            ag::Graph<T> g(false);
            return decode_velocity(g, x, t, g.constant(condition)).val();
        };
        std::optional<sampler::VelocityFn<T>> ufn;
        if (scfg.cfg_scale != 1.0) {
            Tensor<T> null_c = [this] {
                ag::Graph<T> g(false);
                return null_condition(g).val();
            }();
            ufn = [this, null_c](const Tensor<T>& x, T t) {
                ag::Graph<T> g(false);
                return decode_velocity(g, x, t, g.constant(null_c)).val();
            };
        }
        return sampler::sample_latent<T>(vfn, ufn, scfg, {cfg_.latent_tokens(), cfg_.d}, rng);
    }

  private:
    Assembled<T> assemble(ag::Graph<T>& g, std::int64_t class_id,
                          const std::vector<Tensor<T>>& prev_latents, bool null_class) {
        if (!null_class && (class_id < 0 || class_id >= cfg_.n_classes))
            fail("assemble: class_id out of range");
        if (static_cast<std::int64_t>(prev_latents.size()) > cfg_.max_references)
            fail("assemble: too many references");

        const std::int64_t ct = cfg_.cond_tokens();
        std::vector<ag::Var<T>> blocks;

        ag::Var<T> class_table = g.param(params_, class_emb_);
        ag::Var<T> class_block =
            null_class ? g.param(params_, null_class_emb_)
                       : ag::slice_rows(class_table, class_id * cfg_.n_class_tokens,
                                        cfg_.n_class_tokens);
        blocks.push_back(class_block);
        blocks.push_back(nn::linear(g, params_, proj_in_, g.param(params_, mask_emb_)));

        std::vector<std::int64_t> image_tokens;
        for (const Tensor<T>& latent : prev_latents) {
            if (latent.rows() != cfg_.latent_tokens() || latent.cols() != cfg_.d)
                fail("assemble: reference latent has wrong shape");
            ag::Var<T> merged = nn::patch_merge(g.constant(latent), cfg_.h, cfg_.w, cfg_.f);
            blocks.push_back(nn::linear(g, params_, proj_in_, merged));
            image_tokens.push_back(ct);
        }

        nn::BlockLayout layout =
            image_tokens.empty() ? nn::BlockLayout::one_step(cfg_.n_class_tokens, ct)
                                 : nn::BlockLayout::mrar(cfg_.n_class_tokens, ct, image_tokens);

        ag::Var<T> tokens = ag::concat_rows(blocks);
        ag::Var<T> pos = ag::slice_rows(g.param(params_, enc_pos_), 0, layout.total_tokens());
        tokens = ag::add(tokens, pos);

        nn::AttentionMask<T> mask = image_tokens.empty() ? nn::build_mask_1step<T>(layout)
                                                         : nn::build_mask_mrar<T>(layout);
        return Assembled<T>{tokens, layout, std::move(mask),
                            null_class ? std::int64_t(-1) : class_id};
    }

    ModelConfig cfg_;
    ParamStore<T> params_;

    int class_emb_ = -1, null_class_emb_ = -1, mask_emb_ = -1, enc_pos_ = -1, dec_pos_ = -1;
    nn::LinearIds proj_in_, head_, cond_in_, x_in_, temb1_, temb2_, final_ada_, final_out_;
    nn::StackIds encoder_;
    nn::LayerNormIds head_ln_;
    std::vector<nn::AdaBlockIds> dec_blocks_;
};

}  // namespace transdiff::model
