// Two-phase training loop: 1-step pretrain then MRAR fine-tune, AdamW with
// decoupled weight decay, global-norm gradient clipping, EMA shadow weights,
// and resume-safe checkpointing. All per-step randomness is keyed by
// (seed, phase, step), so a resumed run replays the exact draw sequence.
#pragma once

#include "transdiff/checkpoint.hpp"
#include "transdiff/config.hpp"
#include "transdiff/dataset.hpp"
#include "transdiff/model.hpp"

#include <functional>
#include <iomanip>
#include <sstream>

namespace transdiff::train {

// ema' = decay * ema + (1 - decay) * params, elementwise
template <class T>
Tensor<T> ema_update(const Tensor<T>& ema, const Tensor<T>& params, T decay) {
    check_same_shape(ema, params, "ema_update");
    if (!(decay >= T(0) && decay <= T(1))) fail("ema_update: decay must lie in [0, 1]");
    Tensor<T> out(ema.shape());
    for (std::int64_t i = 0; i < ema.numel(); ++i)
        out[i] = decay * ema[i] + (T(1) - decay) * params[i];
    return out;
}

struct StepLog {
    std::uint64_t step = 0;
    double loss = 0;
};

struct TrainResult {
    ckpt::Checkpoint checkpoint;
    std::vector<StepLog> curve;
};

inline std::string curve_csv(const std::vector<StepLog>& curve) {
    std::ostringstream os;
    os << "step,loss\n";
    os.precision(10);
    for (const auto& s : curve) os << s.step << "," << s.loss << "\n";
    return os.str();
}

class Trainer {
  public:
    using Model = model::TransDiff<float>;
    using Sequence = Model::TrainSequence;

    Trainer(Model& model, const data::SyntheticDataset<float>& dataset, cfg::TrainConfig tc)
        : model_(model), data_(dataset), tc_(tc) {
        tc_.validate();
        const auto& mc = model_.config();
        const auto& ds = data_.spec();
        if (mc.h != ds.h || mc.w != ds.w || mc.d != ds.d || mc.n_classes != ds.n_classes)
            fail("trainer: model and dataset geometry disagree");
        for (const auto& p : model_.params()) {
            ema_.push_back(p.value);
            m_.emplace_back(p.value.shape());
            v_.emplace_back(p.value.shape());
        }
    }

    std::uint64_t step() const { return step_; }

    ckpt::Checkpoint make_checkpoint() const {
        ckpt::Checkpoint c;
        c.config_text = cfg::serialize_model_config(model_.config());
        c.step = step_;
        std::size_t i = 0;
        for (const auto& p : model_.params()) {
            c.params.push_back({p.name, p.value});
            c.ema.push_back({p.name, ema_[i]});
            c.opt.push_back({"m." + p.name, m_[i]});
            c.opt.push_back({"v." + p.name, v_[i]});
            ++i;
        }
        return c;
    }

    // restore parameters (+ EMA and optimizer state when present) from a
    // checkpoint; reset_step restarts the counter for a new phase
    void load_state(const ckpt::Checkpoint& c, bool reset_step) {
        auto assign = [this](const ckpt::NamedTensor& nt, Tensor<float>& dst,
                             const std::string& what) {
            if (!nt.tensor.same_shape(dst))
                fail("trainer: checkpoint tensor '" + nt.name + "' (" + what + ") has wrong shape");
            dst = nt.tensor;
        };
        ParamStore<float>& ps = model_.params();
        if (c.params.size() != ps.size()) fail("trainer: checkpoint parameter set mismatch");
        for (const auto& nt : c.params) assign(nt, ps.at(nt.name).value, "param");
        std::size_t i = 0;
        for (const auto& p : ps) {
            ema_[i] = p.value;
            ++i;
        }
        for (const auto& nt : c.ema) {
            const auto& name = nt.name;
            std::size_t idx = index_of(name);
            assign(nt, ema_[idx], "ema");
        }
        for (const auto& nt : c.opt) {
            if (nt.name.rfind("m.", 0) == 0)
                assign(nt, m_[index_of(nt.name.substr(2))], "opt.m");
            else if (nt.name.rfind("v.", 0) == 0)
                assign(nt, v_[index_of(nt.name.substr(2))], "opt.v");
            else
                fail("trainer: unknown optimizer tensor '" + nt.name + "'");
        }
        step_ = reset_step ? 0 : c.step;
    }

    using Callback = std::function<void(std::uint64_t step, const Trainer&)>;

    // run until tc.steps total steps have been taken (counting resumed ones)
    TrainResult run(const Callback& on_checkpoint = {}) {
        TrainResult result;
        while (step_ < static_cast<std::uint64_t>(tc_.steps)) {
            const double loss = do_step(step_);
            result.curve.push_back({step_, loss});
            ++step_;
            if (on_checkpoint && tc_.ckpt_every > 0 &&
                step_ % static_cast<std::uint64_t>(tc_.ckpt_every) == 0)
                on_checkpoint(step_, *this);
        }
        result.checkpoint = make_checkpoint();
        return result;
    }

    // single optimizer step on a deterministic batch; returns the loss
    double do_step(std::uint64_t step) {
        const auto batch = build_batch(step);

        model_.params().zero_grad();
        ag::Graph<float> g(true);
        ag::Var<float> loss = model_.joint_loss(g, batch.sequences, batch.t_draws, batch.eps_draws);
        const double loss_value = static_cast<double>(loss.val()[0]);
        if (!std::isfinite(loss_value)) {
            std::ostringstream os;
            os << "training aborted: non-finite loss " << loss_value << " at step " << step;
            fail(os.str());
        }
        g.backward(loss);

        clip_gradients();
        adam_step(step + 1);
        update_ema();
        return loss_value;
    }

  private:
    struct Batch {
        std::vector<Sequence> sequences;
        std::vector<std::vector<float>> t_draws;
        std::vector<std::vector<Tensor<float>>> eps_draws;
    };

    std::size_t index_of(const std::string& name) const {
        return static_cast<std::size_t>(model_.params().id_of(name));
    }

    Batch build_batch(std::uint64_t step) const {
        const auto& mc = model_.config();
        const std::uint64_t phase_tag =
            tc_.phase == cfg::TrainPhase::Pretrain1Step ? 0x1a9e7f00ULL : 0x1a9e7f01ULL;
        SeededRng rng = SeededRng(tc_.seed, phase_tag).substream(step);

        Batch batch;
        const std::uint64_t pool = static_cast<std::uint64_t>(tc_.samples_per_class);
        for (std::int64_t b = 0; b < tc_.batch_size; ++b) {
            const std::int64_t cls =
                static_cast<std::int64_t>(rng.index_below(static_cast<std::uint64_t>(mc.n_classes)));
            std::int64_t refs = 0;
            if (tc_.phase == cfg::TrainPhase::FinetuneMrar)
                refs = static_cast<std::int64_t>(
                    rng.index_below(static_cast<std::uint64_t>(mc.max_references) + 1));
            const std::int64_t seq_len = refs + 1;
            if (pool < static_cast<std::uint64_t>(seq_len))
                fail("trainer: samples_per_class smaller than sequence length");

            Sequence seq;
            std::vector<std::uint64_t> used;
            for (std::int64_t i = 0; i < seq_len; ++i) {
                std::uint64_t idx = rng.index_below(pool);
                while (std::find(used.begin(), used.end(), idx) != used.end())
                    idx = rng.index_below(pool);
                used.push_back(idx);
                seq.items.push_back({cls, data_.sample(cls, idx)});
            }
            seq.drop_class = rng.uniform() < mc.p_cond_drop;
            batch.sequences.push_back(std::move(seq));

            std::vector<float> ts;
            std::vector<Tensor<float>> eps;
            for (std::int64_t i = 0; i < seq_len; ++i) {
                ts.push_back(static_cast<float>(rng.uniform()));
                eps.push_back(rng_normal<float>(rng, {mc.latent_tokens(), mc.d}));
            }
            batch.t_draws.push_back(std::move(ts));
            batch.eps_draws.push_back(std::move(eps));
        }
        return batch;
    }

    void clip_gradients() {
        if (!(tc_.grad_clip > 0)) return;
        double norm_sq = 0;
        for (const auto& p : model_.params())
            for (std::int64_t i = 0; i < p.grad.numel(); ++i)
                norm_sq += static_cast<double>(p.grad[i]) * static_cast<double>(p.grad[i]);
        const double norm = std::sqrt(norm_sq);
        if (norm <= tc_.grad_clip) return;
        const float s = static_cast<float>(tc_.grad_clip / norm);
        for (auto& p : model_.params())
            for (std::int64_t i = 0; i < p.grad.numel(); ++i) p.grad[i] *= s;
    }

    // AdamW: decoupled weight decay, bias-corrected moments
    void adam_step(std::uint64_t t) {
        const double lr = tc_.resolved_lr();
        const double b1 = tc_.beta1, b2 = tc_.beta2;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
        constexpr double eps = 1e-8;
        std::size_t i = 0;
        for (auto& p : model_.params()) {
            Tensor<float>& m = m_[i];
            Tensor<float>& v = v_[i];
            for (std::int64_t k = 0; k < p.value.numel(); ++k) {
                const double grad = p.grad[k];
                const double mk = b1 * m[k] + (1.0 - b1) * grad;
                const double vk = b2 * v[k] + (1.0 - b2) * grad * grad;
                m[k] = static_cast<float>(mk);
                v[k] = static_cast<float>(vk);
                const double update = (mk / bc1) / (std::sqrt(vk / bc2) + eps);
                p.value[k] = static_cast<float>(p.value[k] -
                                                lr * (update + tc_.weight_decay * p.value[k]));
            }
            ++i;
        }
    }

    void update_ema() {
        const float decay = static_cast<float>(tc_.ema_decay);
        std::size_t i = 0;
        for (const auto& p : model_.params()) {
            Tensor<float>& e = ema_[i];
            for (std::int64_t k = 0; k < e.numel(); ++k)
                e[k] = decay * e[k] + (1.0f - decay) * p.value[k];
            ++i;
        }
    }

    Model& model_;
    const data::SyntheticDataset<float>& data_;
    cfg::TrainConfig tc_;
    std::vector<Tensor<float>> ema_, m_, v_;
    std::uint64_t step_ = 0;

  public:
    const std::vector<Tensor<float>>& ema() const { return ema_; }
};

// write checkpoint params (or EMA shadow) into a model's parameter store
inline void load_params_into(model::TransDiff<float>& m, const ckpt::Checkpoint& c, bool use_ema) {
    const auto& src = use_ema && !c.ema.empty() ? c.ema : c.params;
    ParamStore<float>& ps = m.params();
    if (src.size() != ps.size()) fail("checkpoint parameter set mismatch");
    for (const auto& nt : src) {
        Parameter<float>& p = ps.at(nt.name);
        if (!nt.tensor.same_shape(p.value))
            fail("checkpoint tensor '" + nt.name + "' has wrong shape");
        p.value = nt.tensor;
    }
}

}  // namespace transdiff::train
