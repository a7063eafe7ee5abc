#include "transdiff/checkpoint.hpp"
#include "transdiff/config.hpp"
#include "transdiff/dataset.hpp"
#include "transdiff/tensor_io.hpp"
#include "transdiff/train.hpp"

#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace transdiff;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("synthetic dataset determinism and separation") {
    data::SyntheticDatasetSpec spec;
    spec.n_classes = 8;

    data::SyntheticDataset<float> ds1(spec), ds2(spec);
    for (std::int64_t c = 0; c < spec.n_classes; ++c) {
        auto a = ds1.generate(c, 4);
        auto b = ds2.generate(c, 4);
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(bitwise_equal(a[i], b[i]));
        for (const auto& s : a) {
            CHECK(s.rows() == spec.h * spec.w);
            CHECK(s.cols() == spec.d);
        }
    }

    // pairwise mean separation at least 4x noise std, verified post-construction
    CHECK(ds1.min_mean_separation() >= 4.0 * spec.noise_std);

    // held-out indices do not collide with the training pool
    CHECK_FALSE(bitwise_equal(ds1.sample(0, 0), ds1.sample(0, data::kHeldOutIndexBase)));
    CHECK_THROWS(ds1.sample(99, 0));
}

TEST_CASE("ema_update") {
    SeededRng rng(1, 0);
    Tensor<float> ema = rng_normal<float>(rng, {4, 4});
    Tensor<float> params = rng_normal<float>(rng, {4, 4});

    CHECK(bitwise_equal(train::ema_update(ema, params, 1.0f), ema));
    CHECK(bitwise_equal(train::ema_update(ema, params, 0.0f), params));
    CHECK_THROWS(train::ema_update(ema, Tensor<float>({2, 2}), 0.5f));
    CHECK_THROWS(train::ema_update(ema, params, 1.5f));

    // constant params: error shrinks geometrically, decay^k per step
    const float decay = 0.7f;
    Tensor<float> shadow = ema;
    const float initial_err = max_abs_diff(shadow, params);
    for (int k = 1; k <= 5; ++k) {
        shadow = train::ema_update(shadow, params, decay);
        const float expect = std::pow(decay, static_cast<float>(k)) * initial_err;
        CHECK(max_abs_diff(shadow, params) == doctest::Approx(expect).epsilon(1e-4));
    }
}

TEST_CASE("checkpoint round trip is bitwise lossless") {
    SeededRng rng(2, 0);
    ckpt::Checkpoint c;
    c.config_text = "model.h = 8\n";
    c.step = 1234;
    c.params.push_back({"a", rng_normal<float>(rng, {3, 5})});
    c.params.push_back({"b.weight", rng_normal<float>(rng, {7})});
    c.ema.push_back({"a", rng_normal<float>(rng, {3, 5})});
    c.opt.push_back({"m.a", rng_normal<float>(rng, {3, 5})});

    const std::string path = temp_path("transdiff_ckpt_test.tdif");
    ckpt::save_checkpoint(c, path);
    ckpt::Checkpoint r = ckpt::load_checkpoint(path);

    CHECK(r.version == ckpt::kFormatVersion);
    CHECK(r.config_text == c.config_text);
    CHECK(r.step == 1234);
    REQUIRE(r.params.size() == 2);
    CHECK(r.params[0].name == "a");
    CHECK(bitwise_equal(r.params[0].tensor, c.params[0].tensor));
    CHECK(bitwise_equal(r.params[1].tensor, c.params[1].tensor));
    CHECK(bitwise_equal(r.ema[0].tensor, c.ema[0].tensor));
    CHECK(bitwise_equal(r.opt[0].tensor, c.opt[0].tensor));
    std::remove(path.c_str());
}

TEST_CASE("checkpoint rejects version mismatch and corruption") {
    ckpt::Checkpoint c;
    c.params.push_back({"x", Tensor<float>({2, 2})});

    const std::string path = temp_path("transdiff_ckpt_bad.tdif");
    SUBCASE("foreign format-version fails loudly") {
        c.version = 99;
        ckpt::save_checkpoint(c, path);
        CHECK_THROWS_WITH_AS(ckpt::load_checkpoint(path),
                             "checkpoint: unsupported format-version 99 (expected 1)",
                             std::runtime_error);
    }
    SUBCASE("flipped payload byte fails the checksum") {
        ckpt::save_checkpoint(c, path);
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(20);
        f.put(static_cast<char>(0x5a));
        f.close();
        CHECK_THROWS_WITH_AS(ckpt::load_checkpoint(path), "checkpoint: checksum mismatch",
                             std::runtime_error);
    }
    std::remove(path.c_str());
}

TEST_CASE("config parsing") {
    SUBCASE("defaults, overrides, comments") {
        auto kv = cfg::parse_config_text("# comment\nmodel.h = 4\n\nmodel.w=4 # trailing\n");
        cfg::ConfigReader r(kv);
        model::ModelConfig mc = cfg::read_model_config(r);
        r.finish();
        CHECK(mc.h == 4);
        CHECK(mc.w == 4);
        CHECK(mc.d == model::ModelConfig{}.d);  // untouched default
    }

    SUBCASE("unknown keys are errors") {
        cfg::ConfigReader r(cfg::parse_config_text("model.h = 8\nmodel.hh = 8\n"));
        cfg::read_model_config(r);
        CHECK_THROWS_WITH_AS(r.finish(), "config: unknown key 'model.hh'", std::runtime_error);
    }

    SUBCASE("malformed input") {
        CHECK_THROWS(cfg::parse_config_text("model.h 8\n"));
        CHECK_THROWS(cfg::parse_config_text("model.h = 8\nmodel.h = 9\n"));
        cfg::ConfigReader r(cfg::parse_config_text("model.h = eight\n"));
        CHECK_THROWS(cfg::read_model_config(r));
    }

    SUBCASE("model config echo round trip") {
        model::ModelConfig mc = model::ModelConfig::micro();
        mc.p_cond_drop = 0.125;
        model::ModelConfig back = cfg::parse_model_config(cfg::serialize_model_config(mc));
        CHECK(back.h == mc.h);
        CHECK(back.n_class_tokens == mc.n_class_tokens);
        CHECK(back.p_cond_drop == mc.p_cond_drop);
        CHECK(back.max_references == mc.max_references);
    }
}

TEST_CASE("train config defaults follow the paper anchors") {
    cfg::TrainConfig tc;
    tc.phase = cfg::TrainPhase::FinetuneMrar;
    CHECK(tc.resolved_lr() == 5.0e-5);

    tc.phase = cfg::TrainPhase::Pretrain1Step;
    tc.batch_size = 2048;
    CHECK(tc.resolved_lr() == doctest::Approx(8.0e-4).epsilon(1e-12));
    tc.batch_size = 512;  // sqrt scaling
    CHECK(tc.resolved_lr() == doctest::Approx(4.0e-4).epsilon(1e-12));

    tc.lr = 1e-3;
    CHECK(tc.resolved_lr() == 1e-3);

    cfg::TrainConfig bad;
    bad.ema_decay = 1.0;
    CHECK_THROWS(bad.validate());
}

namespace {

struct TinyRig {
    model::ModelConfig mc;
    data::SyntheticDatasetSpec ds_spec;
    cfg::TrainConfig tc;

    TinyRig() {
        mc = model::ModelConfig::micro();
        mc.n_classes = 4;
        ds_spec.n_classes = 4;
        ds_spec.h = mc.h;
        ds_spec.w = mc.w;
        ds_spec.d = mc.d;
        tc.batch_size = 4;
        tc.steps = 30;
        tc.lr = 1e-3;
        tc.samples_per_class = 32;
        tc.seed = 5;
    }
};

}  // namespace

TEST_CASE("trainer basics") {
    TinyRig rig;

    SUBCASE("steps=0 leaves parameters at initialization") {
        model::TransDiff<float> m(rig.mc, 7);
        model::TransDiff<float> reference(rig.mc, 7);
        data::SyntheticDataset<float> ds(rig.ds_spec);
        cfg::TrainConfig tc = rig.tc;
        tc.steps = 0;
        train::Trainer trainer(m, ds, tc);
        auto result = trainer.run();
        CHECK(result.curve.empty());
        for (const auto& p : reference.params())
            CHECK(bitwise_equal(p.value, m.params().at(p.name).value));
    }

    SUBCASE("training is deterministic and reduces the loss") {
        auto run_once = [&] {
            model::TransDiff<float> m(rig.mc, 7);
            data::SyntheticDataset<float> ds(rig.ds_spec);
            cfg::TrainConfig tc = rig.tc;
            tc.steps = 120;
            train::Trainer trainer(m, ds, tc);
            return trainer.run();
        };
        auto r1 = run_once();
        auto r2 = run_once();
        REQUIRE(r1.curve.size() == 120);
        for (std::size_t i = 0; i < r1.curve.size(); ++i)
            CHECK(r1.curve[i].loss == r2.curve[i].loss);

        // smoothed loss at the end below the start
        auto avg = [&](std::size_t from, std::size_t to) {
            double s = 0;
            for (std::size_t i = from; i < to; ++i) s += r1.curve[i].loss;
            return s / static_cast<double>(to - from);
        };
        CHECK(avg(100, 120) < avg(0, 20));
    }

    SUBCASE("non-finite loss aborts with a diagnostic") {
        model::TransDiff<float> m(rig.mc, 7);
        data::SyntheticDataset<float> ds(rig.ds_spec);
        train::Trainer trainer(m, ds, rig.tc);
        // poison the final bias so the bad value reaches the loss directly
        m.params().at("dec.final.b").value[0] = std::numeric_limits<float>::infinity();
        CHECK_THROWS_WITH_AS(trainer.do_step(0),
                             doctest::Contains("non-finite loss"), std::runtime_error);
    }

    SUBCASE("finetune draws reference counts and still steps") {
        model::TransDiff<float> m(rig.mc, 7);
        data::SyntheticDataset<float> ds(rig.ds_spec);
        cfg::TrainConfig tc = rig.tc;
        tc.phase = cfg::TrainPhase::FinetuneMrar;
        tc.steps = 3;
        train::Trainer trainer(m, ds, tc);
        auto result = trainer.run();
        CHECK(result.curve.size() == 3);
        for (const auto& log : result.curve) CHECK(std::isfinite(log.loss));
    }
}

TEST_CASE("checkpoint resume continues the loss curve") {
    TinyRig rig;
    rig.tc.steps = 40;

    // straight-through run
    model::TransDiff<float> m1(rig.mc, 7);
    data::SyntheticDataset<float> ds(rig.ds_spec);
    train::Trainer t1(m1, ds, rig.tc);
    auto full = t1.run();

    // stop at 20, checkpoint, reload into a fresh model, continue
    cfg::TrainConfig half = rig.tc;
    half.steps = 20;
    model::TransDiff<float> m2(rig.mc, 7);
    train::Trainer t2(m2, ds, half);
    t2.run();
    ckpt::Checkpoint saved = t2.make_checkpoint();

    const std::string path = temp_path("transdiff_resume_test.tdif");
    ckpt::save_checkpoint(saved, path);
    ckpt::Checkpoint loaded = ckpt::load_checkpoint(path);
    std::remove(path.c_str());

    model::TransDiff<float> m3(rig.mc, 999);  // deliberately different init
    train::Trainer t3(m3, ds, rig.tc);
    t3.load_state(loaded, /*reset_step=*/false);
    CHECK(t3.step() == 20);
    auto resumed = t3.run();

    REQUIRE(resumed.curve.size() == 20);
    for (std::size_t i = 0; i < resumed.curve.size(); ++i) {
        const double a = full.curve[20 + i].loss;
        const double b = resumed.curve[i].loss;
        CHECK(std::abs(a - b) <= 1e-5 * std::max(1.0, std::abs(a)));
    }

    // parameters at the end agree too
    for (const auto& p : m1.params())
        CHECK(max_abs_diff(p.value, m3.params().at(p.name).value) <= 1e-6f);
}

TEST_CASE("tensor file and pgm round trips") {
    SeededRng rng(3, 0);
    const std::string path = temp_path("transdiff_tensor_test.tns");

    Tensor<float> t = rng_normal<float>(rng, {6, 4});
    io::write_tensor_file(path, t);
    CHECK(bitwise_equal(io::read_tensor_file_f32(path), t));
    CHECK_THROWS(io::read_tensor_file_f64(path));  // dtype mismatch

    Tensor<double> td = rng_normal<double>(rng, {3, 3});
    io::write_tensor_file(path, td);
    CHECK(bitwise_equal(io::read_tensor_file_f64(path), td));

    const std::string pgm = temp_path("transdiff_render_test.pgm");
    io::write_pgm(pgm, t, 3, 2);
    std::ifstream f(pgm, std::ios::binary);
    std::string header;
    f >> header;
    CHECK(header == "P5");
    std::remove(path.c_str());
    std::remove(pgm.c_str());
}

TEST_CASE("curve csv format") {
    std::vector<train::StepLog> curve{{0, 2.5}, {1, 2.25}};
    const std::string csv = train::curve_csv(curve);
    CHECK(csv.rfind("step,loss\n", 0) == 0);
    CHECK(csv.find("0,2.5\n") != std::string::npos);
    CHECK(csv.find("1,2.25\n") != std::string::npos);
}
