// transdiff CLI: training, sampling, condition fusion, diversity and
// distribution metrics, and the 64-bit gradient-check suite.

#include "transdiff/analysis.hpp"
#include "transdiff/checkpoint.hpp"
#include "transdiff/config.hpp"
#include "transdiff/dataset.hpp"
#include "transdiff/gradcheck.hpp"
#include "transdiff/model.hpp"
#include "transdiff/tensor_io.hpp"
#include "transdiff/train.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <memory>

using namespace transdiff;

namespace {

struct CommonOpts {
    std::string config_path;
    cfg::KeyValues kv() const {
        return config_path.empty() ? cfg::KeyValues{} : cfg::load_config_file(config_path);
    }
};

struct LoadedModel {
    model::ModelConfig config;
    std::unique_ptr<model::TransDiff<float>> model;
    ckpt::Checkpoint checkpoint;
};

LoadedModel load_model(const std::string& ckpt_path, bool use_ema) {
    LoadedModel out;
    out.checkpoint = ckpt::load_checkpoint(ckpt_path);
    out.config = cfg::parse_model_config(out.checkpoint.config_text);
    out.model = std::make_unique<model::TransDiff<float>>(out.config, 0);
    train::load_params_into(*out.model, out.checkpoint, use_ema);
    return out;
}

sampler::SamplerConfig sampler_from_flags(int steps, const std::string& mode, double s1, double s2,
                                          double sigma, const std::string& sigma_form, double cfg_w,
                                          double t_floor) {
    sampler::SamplerConfig sc;
    sc.steps = steps;
    if (mode == "ode")
        sc.mode = sampler::Mode::Ode;
    else if (mode == "sde")
        sc.mode = sampler::Mode::Sde;
    else
        fail("--mode must be ode or sde");
    sc.s1 = s1;
    sc.s2 = s2;
    sc.sigma_base = sigma;
    if (sigma_form == "paper-literal")
        sc.sigma_form = sampler::SigmaForm::PaperLiteral;
    else if (sigma_form == "standard")
        sc.sigma_form = sampler::SigmaForm::Standard;
    else
        fail("--sigma-form must be paper-literal or standard");
    sc.cfg_scale = cfg_w;
    sc.t_floor = t_floor;
    sc.validate();
    return sc;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) fail("cannot open " + path + " for writing");
    f << content;
}

void export_latent(const std::string& prefix, const Tensor<float>& latent, std::int64_t h,
                   std::int64_t w) {
    io::write_tensor_file(prefix + ".tns", latent);
    io::write_pgm(prefix + ".pgm", latent, h, w);
}

// ---- train / finetune-mrar ----

int run_train(const CommonOpts& common, cfg::TrainPhase phase, const std::string& init_path,
              const std::string& resume_path, const std::string& out_path,
              const std::string& csv_path, std::int64_t steps_override, double lr_override,
              std::int64_t seed_override) {
    cfg::ConfigReader reader(common.kv());
    model::ModelConfig mc = cfg::read_model_config(reader);
    data::SyntheticDatasetSpec ds_defaults;
    ds_defaults.h = mc.h;
    ds_defaults.w = mc.w;
    ds_defaults.d = mc.d;
    ds_defaults.n_classes = mc.n_classes;
    data::SyntheticDatasetSpec ds_spec = cfg::read_dataset_spec(reader, ds_defaults);
    cfg::TrainConfig tc;
    tc.phase = phase;
    tc = cfg::read_train_config(reader, tc);
    reader.finish();

    if (steps_override >= 0) tc.steps = steps_override;
    if (lr_override > 0) tc.lr = lr_override;
    if (seed_override >= 0) tc.seed = static_cast<std::uint64_t>(seed_override);
    tc.validate();

    model::TransDiff<float> model(mc, tc.seed);
    data::SyntheticDataset<float> dataset(ds_spec);
    train::Trainer trainer(model, dataset, tc);

    if (phase == cfg::TrainPhase::FinetuneMrar && init_path.empty() && resume_path.empty())
        fail("finetune-mrar requires --init with a pretrain checkpoint");
    if (!init_path.empty())
        trainer.load_state(ckpt::load_checkpoint(init_path), /*reset_step=*/true);
    if (!resume_path.empty())
        trainer.load_state(ckpt::load_checkpoint(resume_path), /*reset_step=*/false);

    std::cout << "phase=" << (phase == cfg::TrainPhase::Pretrain1Step ? "pretrain-1step"
                                                                      : "finetune-mrar")
              << " steps=" << tc.steps << " batch=" << tc.batch_size << " lr=" << tc.resolved_lr()
              << " seed=" << tc.seed << "\n";

    train::Trainer::Callback on_ckpt = [&](std::uint64_t step, const train::Trainer& t) {
        ckpt::save_checkpoint(t.make_checkpoint(), out_path);
        std::cout << "checkpoint step=" << step << " path=" << out_path << std::endl;
    };
    train::TrainResult result = trainer.run(tc.ckpt_every > 0 ? on_ckpt : train::Trainer::Callback{});

    ckpt::save_checkpoint(result.checkpoint, out_path);
    if (!csv_path.empty()) write_text_file(csv_path, train::curve_csv(result.curve));

    const double first = result.curve.empty() ? 0.0 : result.curve.front().loss;
    const double last = result.curve.empty() ? 0.0 : result.curve.back().loss;
    std::cout << "final_step=" << result.checkpoint.step << " first_loss=" << first
              << " last_loss=" << last << " checkpoint=" << out_path << "\n";
    return 0;
}

// ---- sample ----

int run_sample(const std::string& ckpt_path, std::int64_t class_id, const std::string& paradigm,
               std::int64_t refs, const sampler::SamplerConfig& sc, std::int64_t seed,
               std::int64_t count, const std::string& out_prefix, bool use_ema) {
    LoadedModel lm = load_model(ckpt_path, use_ema);
    if (refs < 0) refs = lm.config.max_references;
    for (std::int64_t i = 0; i < count; ++i) {
        SeededRng rng(static_cast<std::uint64_t>(seed), static_cast<std::uint64_t>(i));
        Tensor<float> latent;
        if (paradigm == "1step")
            latent = lm.model->infer_1step(class_id, sc, rng);
        else if (paradigm == "mrar")
            latent = lm.model->infer_mrar(class_id, refs, sc, rng);
        else
            fail("--paradigm must be 1step or mrar");
        const std::string prefix =
            count == 1 ? out_prefix : out_prefix + "_" + std::to_string(i);
        export_latent(prefix, latent, lm.config.h, lm.config.w);
        std::cout << "sample class=" << class_id << " paradigm=" << paradigm << " seed=" << seed
                  << " stream=" << i << " out=" << prefix << ".tns\n";
    }
    return 0;
}

// ---- fuse ----

int run_fuse(const CommonOpts& common, const std::string& ckpt_path, std::int64_t class_a,
             std::int64_t class_b, std::int64_t k, std::int64_t count,
             const sampler::SamplerConfig& sc, std::int64_t seed, const std::string& out_prefix,
             bool use_ema) {
    LoadedModel lm = load_model(ckpt_path, use_ema);
    model::TransDiff<float>& m = *lm.model;

    ag::Graph<float> g(false);
    Tensor<float> cond_a = m.encode_conditions(g, m.assemble_1step(g, class_a))[0].val();
    Tensor<float> cond_b = m.encode_conditions(g, m.assemble_1step(g, class_b))[0].val();
    if (k < 0) k = cond_a.rows() / 2;
    Tensor<float> fused = analysis::fuse_conditions(cond_a, cond_b, k);

    Tensor<float> mean_latent({lm.config.latent_tokens(), lm.config.d});
    for (std::int64_t i = 0; i < count; ++i) {
        SeededRng rng(static_cast<std::uint64_t>(seed), static_cast<std::uint64_t>(i));
        Tensor<float> latent = m.sample_with_condition(fused, sc, rng);
        for (std::int64_t j = 0; j < latent.numel(); ++j)
            mean_latent[j] += latent[j] / static_cast<float>(count);
        if (!out_prefix.empty())
            export_latent(out_prefix + "_" + std::to_string(i), latent, lm.config.h, lm.config.w);
    }

    std::cout << "fuse class_a=" << class_a << " class_b=" << class_b << " k=" << k
              << " count=" << count << "\n";

    // position of the fused mean relative to the real class centroids
    cfg::ConfigReader reader(common.kv());
    (void)cfg::read_model_config(reader);  // the checkpoint echo is authoritative
    (void)cfg::read_train_config(reader);
    data::SyntheticDatasetSpec ds_defaults;
    ds_defaults.h = lm.config.h;
    ds_defaults.w = lm.config.w;
    ds_defaults.d = lm.config.d;
    ds_defaults.n_classes = lm.config.n_classes;
    data::SyntheticDatasetSpec ds_spec = cfg::read_dataset_spec(reader, ds_defaults);
    reader.finish();
    data::SyntheticDataset<float> dataset(ds_spec);
    const double inter = std::sqrt(
        analysis::squared_distance(dataset.class_mean(class_a), dataset.class_mean(class_b)));
    const double to_a =
        std::sqrt(analysis::squared_distance(mean_latent, dataset.class_mean(class_a)));
    const double to_b =
        std::sqrt(analysis::squared_distance(mean_latent, dataset.class_mean(class_b)));
    std::cout << "inter_centroid=" << inter << "\n";
    std::cout << "dist_to_a=" << to_a << " ratio_a=" << to_a / inter << "\n";
    std::cout << "dist_to_b=" << to_b << " ratio_b=" << to_b / inter << "\n";
    return 0;
}

// ---- diversity ----

int run_diversity(const std::string& ckpt_path, std::int64_t class_id, std::int64_t refs,
                  const sampler::SamplerConfig& sc, std::int64_t seed, std::int64_t n_seeds,
                  const std::string& csv_path, bool use_ema) {
    LoadedModel lm = load_model(ckpt_path, use_ema);
    if (refs < 0) refs = lm.config.max_references;

    std::ostringstream csv;
    csv << "class,paradigm,seed,diversity\n";
    double sum_1step = 0, sum_mrar = 0;
    for (std::int64_t s = 0; s < n_seeds; ++s) {
        SeededRng r1(static_cast<std::uint64_t>(seed), 2 * static_cast<std::uint64_t>(s));
        auto t1 = lm.model->infer_1step_traced(class_id, sc, r1);
        const double d1 = analysis::diversity_metric(t1.conditions.front());
        sum_1step += d1;
        csv << class_id << ",1step," << s << "," << d1 << "\n";

        SeededRng r2(static_cast<std::uint64_t>(seed), 2 * static_cast<std::uint64_t>(s) + 1);
        auto t2 = lm.model->infer_mrar_traced(class_id, refs, sc, r2);
        // every reference-conditioned block counts as an MRAR-phase condition
        double d2 = 0;
        for (std::size_t i = 1; i < t2.conditions.size(); ++i)
            d2 += analysis::diversity_metric(t2.conditions[i]);
        d2 /= static_cast<double>(t2.conditions.size() - 1);
        sum_mrar += d2;
        csv << class_id << ",mrar," << s << "," << d2 << "\n";
    }
    std::cout << "class=" << class_id << "\n";
    std::cout << "diversity.1step=" << sum_1step / static_cast<double>(n_seeds) << "\n";
    std::cout << "diversity.mrar=" << sum_mrar / static_cast<double>(n_seeds) << "\n";
    if (!csv_path.empty()) write_text_file(csv_path, csv.str());
    return 0;
}

// ---- eval ----

int run_eval(const CommonOpts& common, const std::string& ckpt_path, std::int64_t samples,
             const sampler::SamplerConfig& sc, std::int64_t seed, const std::string& csv_path,
             bool use_ema) {
    LoadedModel lm = load_model(ckpt_path, use_ema);
    model::TransDiff<float>& m = *lm.model;

    cfg::ConfigReader reader(common.kv());
    (void)cfg::read_model_config(reader);  // the checkpoint echo is authoritative
    (void)cfg::read_train_config(reader);
    data::SyntheticDatasetSpec ds_defaults;
    ds_defaults.h = lm.config.h;
    ds_defaults.w = lm.config.w;
    ds_defaults.d = lm.config.d;
    ds_defaults.n_classes = lm.config.n_classes;
    data::SyntheticDatasetSpec ds_spec = cfg::read_dataset_spec(reader, ds_defaults);
    reader.finish();
    data::SyntheticDataset<float> dataset(ds_spec);

    std::vector<analysis::LabeledSample<float>> real, generated;
    std::ostringstream csv;
    csv << "class,sliced_wasserstein\n";
    double sw_sum = 0;
    for (std::int64_t c = 0; c < lm.config.n_classes; ++c) {
        std::vector<Tensor<float>> gen, held;
        for (std::int64_t i = 0; i < samples; ++i) {
            SeededRng rng(static_cast<std::uint64_t>(seed),
                          (static_cast<std::uint64_t>(c) << 32) | static_cast<std::uint64_t>(i));
            gen.push_back(m.infer_1step(c, sc, rng));
            held.push_back(dataset.sample(c, data::kHeldOutIndexBase + static_cast<std::uint64_t>(i)));
            generated.push_back({c, gen.back()});
            real.push_back({c, held.back()});
        }
        const double sw = analysis::sliced_wasserstein(gen, held, 128,
                                                       SeededRng(static_cast<std::uint64_t>(seed),
                                                                 0x5115ced0ULL + c));
        sw_sum += sw;
        csv << c << "," << sw << "\n";
        std::cout << "sw.class" << c << "=" << sw << "\n";
    }
    auto centroids = analysis::class_centroids(real, lm.config.n_classes);
    const double acc = analysis::centroid_accuracy(generated, centroids);
    std::cout << "sw.mean=" << sw_sum / static_cast<double>(lm.config.n_classes) << "\n";
    std::cout << "centroid_accuracy=" << acc << "\n";
    if (!csv_path.empty()) write_text_file(csv_path, csv.str());
    return 0;
}

// ---- gradcheck ----

int run_gradcheck() {
    using model::ModelConfig;
    using model::TransDiff;
    using Seq = TransDiff<double>::TrainSequence;
    using SeqL = TransDiff<long double>::TrainSequence;

    ModelConfig mc = ModelConfig::micro();
    TransDiff<double> m(mc, 42);
    SeededRng r(43, 0);
    for (auto& p : m.params())
        for (std::int64_t i = 0; i < p.value.numel(); ++i)
            if (p.value[i] == 0.0) p.value[i] = 0.05 * r.normal();

    SeededRng data_rng(44, 0);
    auto latent = [&] { return rng_normal<double>(data_rng, {mc.latent_tokens(), mc.d}); };
    std::vector<Seq> batch{Seq{{{1, latent()}}, false},
                           Seq{{{2, latent()}, {2, latent()}, {2, latent()}}, false},
                           Seq{{{0, latent()}}, true}};
    std::vector<std::vector<double>> ts{{0.41}, {0.13, 0.57, 0.92}, {0.75}};
    std::vector<std::vector<Tensor<double>>> eps{
        {latent()}, {latent(), latent(), latent()}, {latent()}};

    // extended-precision twin used only for the finite-difference oracle
    TransDiff<long double> wide(mc, 42);
    for (std::size_t i = 0; i < m.params().size(); ++i) {
        const auto& src = m.params().at(static_cast<int>(i));
        auto& dst = wide.params().at(static_cast<int>(i));
        for (std::int64_t k = 0; k < src.value.numel(); ++k)
            dst.value[k] = static_cast<long double>(src.value[k]);
    }
    auto widen = [](const Tensor<double>& t) {
        Tensor<long double> out(t.shape());
        for (std::int64_t i = 0; i < t.numel(); ++i) out[i] = static_cast<long double>(t[i]);
        return out;
    };
    std::vector<SeqL> batch_l;
    std::vector<std::vector<long double>> ts_l;
    std::vector<std::vector<Tensor<long double>>> eps_l;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        SeqL s;
        s.drop_class = batch[b].drop_class;
        for (const auto& it : batch[b].items) s.items.push_back({it.class_id, widen(it.latent)});
        batch_l.push_back(std::move(s));
        ts_l.emplace_back(ts[b].begin(), ts[b].end());
        std::vector<Tensor<long double>> ee;
        for (const auto& e : eps[b]) ee.push_back(widen(e));
        eps_l.push_back(std::move(ee));
    }

    const double err = grad_check_params_wide_oracle<double, long double>(
        m.params(), [&](ag::Graph<double>& g) { return m.joint_loss(g, batch, ts, eps); },
        wide.params(),
        [&](ag::Graph<long double>& g) { return wide.joint_loss(g, batch_l, ts_l, eps_l); },
        1e-5L);
    std::cout << "joint_loss_grad_max_rel_error=" << err << "\n";
    std::cout << "tolerance=1e-4\n";
    const bool ok = err <= 1e-4;
    std::cout << (ok ? "PASS" : "FAIL") << "\n";
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"TransDiff: AR-transformer conditioned rectified-flow generation"};
    app.require_subcommand(1);

    CommonOpts common;

    // train / finetune-mrar
    std::string out_path = "transdiff.tdif", csv_path, init_path, resume_path;
    std::int64_t steps_override = -1, seed_override = -1;
    double lr_override = 0;
    auto add_train_flags = [&](CLI::App* sub) {
        sub->add_option("--config", common.config_path, "key=value config file");
        sub->add_option("--out", out_path, "output checkpoint path");
        sub->add_option("--csv", csv_path, "loss curve CSV path");
        sub->add_option("--resume", resume_path, "resume from checkpoint");
        sub->add_option("--steps", steps_override, "override train.steps");
        sub->add_option("--lr", lr_override, "override train.lr");
        sub->add_option("--seed", seed_override, "override train.seed");
    };
    CLI::App* train_cmd = app.add_subcommand("train", "1-step pretraining");
    add_train_flags(train_cmd);
    CLI::App* finetune_cmd = app.add_subcommand("finetune-mrar", "MRAR fine-tuning");
    add_train_flags(finetune_cmd);
    finetune_cmd->add_option("--init", init_path, "pretrain checkpoint to start from");

    // shared sampling flags
    std::string ckpt_path, paradigm = "1step", mode = "ode", sigma_form = "paper-literal";
    std::int64_t class_id = 0, refs = -1, steps = 50, seed = 0, count = 1;
    double s1 = 1.0, s2 = 1.0, sigma = 0.0, cfg_w = 1.0, t_floor = 1e-3;
    bool raw_weights = false;
    auto add_sampler_flags = [&](CLI::App* sub) {
        sub->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
        sub->add_option("--steps", steps, "sampler steps");
        sub->add_option("--mode", mode, "ode|sde");
        sub->add_option("--s1", s1, "drift scale");
        sub->add_option("--s2", s2, "diffusion scale");
        sub->add_option("--sigma", sigma, "sigma(t) = sigma * t");
        sub->add_option("--sigma-form", sigma_form, "paper-literal|standard");
        sub->add_option("--cfg", cfg_w, "classifier-free guidance scale");
        sub->add_option("--t-floor", t_floor, "score denominator clamp");
        sub->add_option("--seed", seed, "sampling seed");
        sub->add_flag("--raw-weights", raw_weights, "use raw weights instead of EMA");
    };

    CLI::App* sample_cmd = app.add_subcommand("sample", "generate latents");
    add_sampler_flags(sample_cmd);
    std::string sample_out = "sample";
    sample_cmd->add_option("--class", class_id, "class id")->required();
    sample_cmd->add_option("--paradigm", paradigm, "1step|mrar");
    sample_cmd->add_option("--refs", refs, "MRAR reference count (default max)");
    sample_cmd->add_option("--count", count, "number of samples");
    sample_cmd->add_option("--out", sample_out, "output file prefix");

    CLI::App* fuse_cmd = app.add_subcommand("fuse", "sample from fused class conditions");
    add_sampler_flags(fuse_cmd);
    std::int64_t class_a = 0, class_b = 1, fuse_k = -1;
    std::string fuse_out;
    fuse_cmd->add_option("--config", common.config_path, "key=value config file (data keys)");
    fuse_cmd->add_option("--class-a", class_a, "first class")->required();
    fuse_cmd->add_option("--class-b", class_b, "second class")->required();
    fuse_cmd->add_option("--k", fuse_k, "rows taken from class a (default N/2)");
    fuse_cmd->add_option("--count", count, "number of samples");
    fuse_cmd->add_option("--out", fuse_out, "output file prefix");

    CLI::App* div_cmd = app.add_subcommand("diversity", "semantic-feature diversity metric");
    add_sampler_flags(div_cmd);
    std::int64_t n_seeds = 8;
    std::string div_csv;
    div_cmd->add_option("--class", class_id, "class id")->required();
    div_cmd->add_option("--refs", refs, "MRAR reference count (default max)");
    div_cmd->add_option("--seeds", n_seeds, "seeds averaged per paradigm");
    div_cmd->add_option("--csv", div_csv, "per-seed CSV output");

    CLI::App* eval_cmd = app.add_subcommand("eval", "sliced-Wasserstein + centroid accuracy");
    add_sampler_flags(eval_cmd);
    std::int64_t eval_samples = 512;
    std::string eval_csv;
    eval_cmd->add_option("--config", common.config_path, "key=value config file (data keys)");
    eval_cmd->add_option("--samples", eval_samples, "generated samples per class");
    eval_cmd->add_option("--csv", eval_csv, "per-class CSV output");

    app.add_subcommand("gradcheck", "64-bit finite-difference gradient suite");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand("train"))
            return run_train(common, cfg::TrainPhase::Pretrain1Step, "", resume_path, out_path,
                             csv_path, steps_override, lr_override, seed_override);
        if (app.got_subcommand("finetune-mrar"))
            return run_train(common, cfg::TrainPhase::FinetuneMrar, init_path, resume_path,
                             out_path, csv_path, steps_override, lr_override, seed_override);

        const sampler::SamplerConfig sc = app.got_subcommand("gradcheck")
                                              ? sampler::SamplerConfig{}
                                              : sampler_from_flags(static_cast<int>(steps), mode,
                                                                   s1, s2, sigma, sigma_form,
                                                                   cfg_w, t_floor);
        if (app.got_subcommand("sample"))
            return run_sample(ckpt_path, class_id, paradigm, refs, sc, seed, count, sample_out,
                              !raw_weights);
        if (app.got_subcommand("fuse"))
            return run_fuse(common, ckpt_path, class_a, class_b, fuse_k, count, sc, seed, fuse_out,
                            !raw_weights);
        if (app.got_subcommand("diversity"))
            return run_diversity(ckpt_path, class_id, refs, sc, seed, n_seeds, div_csv,
                                 !raw_weights);
        if (app.got_subcommand("eval"))
            return run_eval(common, ckpt_path, eval_samples, sc, seed, eval_csv, !raw_weights);
        if (app.got_subcommand("gradcheck")) return run_gradcheck();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
