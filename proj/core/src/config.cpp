#include "transdiff/config.hpp"

#include <fstream>
#include <sstream>

namespace transdiff::cfg {

namespace {

std::string trim(const std::string& s) {
    const auto from = s.find_first_not_of(" \t\r\n");
    if (from == std::string::npos) return "";
    const auto to = s.find_last_not_of(" \t\r\n");
    return s.substr(from, to - from + 1);
}

}  // namespace

KeyValues parse_config_text(const std::string& text) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            fail("config: line " + std::to_string(lineno) + " is not 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) fail("config: empty key at line " + std::to_string(lineno));
        if (kv.count(key)) fail("config: duplicate key '" + key + "'");
        kv[key] = value;
    }
    return kv;
}

KeyValues load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) fail("config: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

const std::string* ConfigReader::find(const std::string& key) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return nullptr;
    used_.insert(key);
    return &it->second;
}

std::int64_t ConfigReader::get_int(const std::string& key, std::int64_t def) {
    const std::string* v = find(key);
    if (!v) return def;
    try {
        std::size_t pos = 0;
        const std::int64_t out = std::stoll(*v, &pos);
        if (pos != v->size()) throw std::invalid_argument("");
        return out;
    } catch (const std::exception&) {
        fail("config: key '" + key + "' expects an integer, got '" + *v + "'");
    }
}

std::uint64_t ConfigReader::get_u64(const std::string& key, std::uint64_t def) {
    const std::string* v = find(key);
    if (!v) return def;
    try {
        std::size_t pos = 0;
        const std::uint64_t out = std::stoull(*v, &pos);
        if (pos != v->size()) throw std::invalid_argument("");
        return out;
    } catch (const std::exception&) {
        fail("config: key '" + key + "' expects an unsigned integer, got '" + *v + "'");
    }
}

double ConfigReader::get_real(const std::string& key, double def) {
    const std::string* v = find(key);
    if (!v) return def;
    try {
        std::size_t pos = 0;
        const double out = std::stod(*v, &pos);
        if (pos != v->size()) throw std::invalid_argument("");
        return out;
    } catch (const std::exception&) {
        fail("config: key '" + key + "' expects a real number, got '" + *v + "'");
    }
}

std::string ConfigReader::get_string(const std::string& key, const std::string& def) {
    const std::string* v = find(key);
    return v ? *v : def;
}

void ConfigReader::finish() const {
    for (const auto& [key, value] : kv_)
        if (!used_.count(key)) fail("config: unknown key '" + key + "'");
}

model::ModelConfig read_model_config(ConfigReader& r, model::ModelConfig d) {
    model::ModelConfig c;
    c.h = r.get_int("model.h", d.h);
    c.w = r.get_int("model.w", d.w);
    c.d = r.get_int("model.d", d.d);
    c.f = r.get_int("model.f", d.f);
    c.n_class_tokens = r.get_int("model.n_class_tokens", d.n_class_tokens);
    c.n_classes = r.get_int("model.n_classes", d.n_classes);
    c.enc_depth = r.get_int("model.enc_depth", d.enc_depth);
    c.enc_width = r.get_int("model.enc_width", d.enc_width);
    c.enc_heads = r.get_int("model.enc_heads", d.enc_heads);
    c.dec_depth = r.get_int("model.dec_depth", d.dec_depth);
    c.dec_width = r.get_int("model.dec_width", d.dec_width);
    c.dec_heads = r.get_int("model.dec_heads", d.dec_heads);
    c.p_cond_drop = r.get_real("model.p_cond_drop", d.p_cond_drop);
    c.max_references = r.get_int("model.max_references", d.max_references);
    c.validate();
    return c;
}

data::SyntheticDatasetSpec read_dataset_spec(ConfigReader& r, data::SyntheticDatasetSpec d) {
    data::SyntheticDatasetSpec s;
    s.n_classes = r.get_int("data.n_classes", d.n_classes);
    s.h = r.get_int("data.h", d.h);
    s.w = r.get_int("data.w", d.w);
    s.d = r.get_int("data.d", d.d);
    s.noise_std = r.get_real("data.noise_std", d.noise_std);
    s.seed = r.get_u64("data.seed", d.seed);
    s.validate();
    return s;
}

TrainConfig read_train_config(ConfigReader& r, TrainConfig d) {
    TrainConfig c = d;
    c.lr = r.get_real("train.lr", d.lr);
    c.weight_decay = r.get_real("train.weight_decay", d.weight_decay);
    c.beta1 = r.get_real("train.beta1", d.beta1);
    c.beta2 = r.get_real("train.beta2", d.beta2);
    c.batch_size = r.get_int("train.batch_size", d.batch_size);
    c.steps = r.get_int("train.steps", d.steps);
    c.ema_decay = r.get_real("train.ema_decay", d.ema_decay);
    c.seed = r.get_u64("train.seed", d.seed);
    c.grad_clip = r.get_real("train.grad_clip", d.grad_clip);
    c.ckpt_every = r.get_int("train.ckpt_every", d.ckpt_every);
    c.samples_per_class = r.get_int("train.samples_per_class", d.samples_per_class);
    c.validate();
    return c;
}

std::string serialize_model_config(const model::ModelConfig& c) {
    std::ostringstream os;
    os << "model.h = " << c.h << "\n"
       << "model.w = " << c.w << "\n"
       << "model.d = " << c.d << "\n"
       << "model.f = " << c.f << "\n"
       << "model.n_class_tokens = " << c.n_class_tokens << "\n"
       << "model.n_classes = " << c.n_classes << "\n"
       << "model.enc_depth = " << c.enc_depth << "\n"
       << "model.enc_width = " << c.enc_width << "\n"
       << "model.enc_heads = " << c.enc_heads << "\n"
       << "model.dec_depth = " << c.dec_depth << "\n"
       << "model.dec_width = " << c.dec_width << "\n"
       << "model.dec_heads = " << c.dec_heads << "\n";
    os.precision(17);
    os << "model.p_cond_drop = " << c.p_cond_drop << "\n"
       << "model.max_references = " << c.max_references << "\n";
    return os.str();
}

model::ModelConfig parse_model_config(const std::string& text) {
    ConfigReader r(parse_config_text(text));
    model::ModelConfig c = read_model_config(r);
    r.finish();
    return c;
}

}  // namespace transdiff::cfg
