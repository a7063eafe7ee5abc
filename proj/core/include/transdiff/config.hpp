// key=value configuration text: '#' comments, one "key = value" per line.
// Every key has a default; unknown keys are errors.
#pragma once

#include "transdiff/dataset.hpp"
#include "transdiff/model.hpp"

#include <map>
#include <set>
#include <string>

namespace transdiff::cfg {

using KeyValues = std::map<std::string, std::string>;

KeyValues parse_config_text(const std::string& text);
KeyValues load_config_file(const std::string& path);

// Tracks consumed keys so finish() can reject unknown ones.
class ConfigReader {
  public:
    explicit ConfigReader(KeyValues kv) : kv_(std::move(kv)) {}

    std::int64_t get_int(const std::string& key, std::int64_t def);
    double get_real(const std::string& key, double def);
    std::uint64_t get_u64(const std::string& key, std::uint64_t def);
    std::string get_string(const std::string& key, const std::string& def);

    // throws on any key never consumed
    void finish() const;

  private:
    const std::string* find(const std::string& key);

    KeyValues kv_;
    std::set<std::string> used_;
};

enum class TrainPhase { Pretrain1Step, FinetuneMrar };

struct TrainConfig {
    TrainPhase phase = TrainPhase::Pretrain1Step;
    double lr = 0.0;  // 0 selects the phase default rule
    double weight_decay = 0.02;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::int64_t batch_size = 16;
    std::int64_t steps = 2000;
    double ema_decay = 0.99;
    std::uint64_t seed = 7;
    double grad_clip = 1.0;
    std::int64_t ckpt_every = 0;  // 0 = final checkpoint only
    std::int64_t samples_per_class = 256;

    // paper anchor 8.0e-4 at batch 2048, square-root batch scaling
    static double pretrain_lr_rule(std::int64_t batch_size) {
        return 8.0e-4 * std::sqrt(static_cast<double>(batch_size) / 2048.0);
    }
    static constexpr double kFinetuneLr = 5.0e-5;

    double resolved_lr() const {
        if (lr > 0) return lr;
        return phase == TrainPhase::Pretrain1Step ? pretrain_lr_rule(batch_size) : kFinetuneLr;
    }

    void validate() const {
        if (lr < 0) fail("TrainConfig: lr must be >= 0");
        if (!(resolved_lr() > 0)) fail("TrainConfig: resolved lr must be positive");
        if (ema_decay < 0 || ema_decay >= 1) fail("TrainConfig: ema_decay must be in [0, 1)");
        if (batch_size <= 0 || steps < 0) fail("TrainConfig: batch_size/steps invalid");
        if (samples_per_class <= 0) fail("TrainConfig: samples_per_class must be positive");
    }
};

// readers for the dotted config keys; defaults come from the passed structs
model::ModelConfig read_model_config(ConfigReader& r, model::ModelConfig defaults = {});
data::SyntheticDatasetSpec read_dataset_spec(ConfigReader& r, data::SyntheticDatasetSpec defaults = {});
TrainConfig read_train_config(ConfigReader& r, TrainConfig defaults = {});

// round-trip serialization of the ModelConfig echo stored in checkpoints
std::string serialize_model_config(const model::ModelConfig& cfg);
model::ModelConfig parse_model_config(const std::string& text);

}  // namespace transdiff::cfg
