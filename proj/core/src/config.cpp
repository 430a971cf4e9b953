#include "dape/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dape {

namespace {

using nlohmann::json;

// pulls j[key] with a type check, leaving `out` untouched when absent
template <typename T>
void get_field(const json& j, const char* key, T& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    try {
        out = it->get<T>();
    } catch (const json::exception&) {
        throw std::runtime_error(std::string("config error: bad type for key '") + key + "'");
    }
}

void reject_unknown(const json& j, const char* section, std::initializer_list<const char*> known) {
    if (!j.is_object()) throw std::runtime_error(std::string("config error: section '") + section +
                                                 "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok |= it.key() == k;
        if (!ok)
            throw std::runtime_error("config error: unknown key '" + it.key() + "' in section '" +
                                     section + "'");
    }
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    if (optimizer.lr <= 0.0) throw std::runtime_error("config error: lr must be positive");
    if (optimizer.beta1 <= 0.0 || optimizer.beta1 >= 1.0 || optimizer.beta2 <= 0.0 ||
        optimizer.beta2 >= 1.0)
        throw std::runtime_error("config error: adam betas must be in (0,1)");
    if (optimizer.eps <= 0.0) throw std::runtime_error("config error: adam eps must be positive");
    if (train.steps < 1 || train.batch_size < 1 || train.train_len < 1)
        throw std::runtime_error("config error: train.steps/batch_size/train_len must be positive");
    if (train.warmup_frac < 0.0 || train.warmup_frac > 1.0)
        throw std::runtime_error("config error: warmup_frac must be in [0,1]");
    if (data.source != "text" && data.source != "task")
        throw std::runtime_error("config error: data.source must be 'text' or 'task'");
    if (eval.k < 1 || eval.samples_per_length < 1 || eval.batch_size < 1)
        throw std::runtime_error("config error: eval.k/samples_per_length/batch_size must be positive");
    if (eval.protocol != "last_k" && eval.protocol != "non_overlapping" && eval.protocol != "both")
        throw std::runtime_error("config error: eval.protocol must be last_k, non_overlapping or both");
    for (int len : eval.lengths)
        if (len < 1) throw std::runtime_error("config error: eval lengths must be positive");
}

std::vector<int> RunConfig::eval_lengths() const {
    if (!eval.lengths.empty()) return eval.lengths;
    std::vector<int> out;
    for (int mult : {1, 2, 4, 8, 16}) out.push_back(train.train_len * mult);
    return out;
}

json pe_to_json(const PeConfig& pe) {
    return json{{"kind", pe_kind_name(pe.kind)},
                {"dape", pe.dape},
                {"dape_variant", dape_variant_name(pe.dape_variant)},
                {"dape_hidden", pe.dape_hidden},
                {"dape_shared", pe.dape_shared},
                {"dape_bias_terms", pe.dape_bias_terms},
                {"leaky_slope", pe.leaky_slope},
                {"alibi_slopes", pe.alibi_slopes},
                {"rope_theta", pe.rope_theta},
                {"rrope_factor", pe.rrope_factor},
                {"rrope_pool", pe.rrope_pool},
                {"t5_num_buckets", pe.t5_num_buckets},
                {"t5_max_distance", pe.t5_max_distance},
                {"fire_hidden", pe.fire_hidden},
                {"fire_threshold", pe.fire_threshold},
                {"kerple_init_r1", pe.kerple_init_r1},
                {"kerple_init_r2", pe.kerple_init_r2}};
}

PeConfig pe_from_json(const json& j) {
    reject_unknown(j, "pe",
                   {"kind", "dape", "dape_variant", "dape_hidden", "dape_shared", "dape_bias_terms",
                    "leaky_slope", "alibi_slopes", "rope_theta", "rrope_factor", "rrope_pool",
                    "t5_num_buckets", "t5_max_distance", "fire_hidden", "fire_threshold",
                    "kerple_init_r1", "kerple_init_r2"});
    PeConfig pe;
    std::string kind = pe_kind_name(pe.kind), variant = dape_variant_name(pe.dape_variant);
    get_field(j, "kind", kind);
    get_field(j, "dape", pe.dape);
    get_field(j, "dape_variant", variant);
    get_field(j, "dape_hidden", pe.dape_hidden);
    get_field(j, "dape_shared", pe.dape_shared);
    get_field(j, "dape_bias_terms", pe.dape_bias_terms);
    get_field(j, "leaky_slope", pe.leaky_slope);
    get_field(j, "alibi_slopes", pe.alibi_slopes);
    get_field(j, "rope_theta", pe.rope_theta);
    get_field(j, "rrope_factor", pe.rrope_factor);
    get_field(j, "rrope_pool", pe.rrope_pool);
    get_field(j, "t5_num_buckets", pe.t5_num_buckets);
    get_field(j, "t5_max_distance", pe.t5_max_distance);
    get_field(j, "fire_hidden", pe.fire_hidden);
    get_field(j, "fire_threshold", pe.fire_threshold);
    get_field(j, "kerple_init_r1", pe.kerple_init_r1);
    get_field(j, "kerple_init_r2", pe.kerple_init_r2);
    pe.kind = pe_kind_from_name(kind);
    pe.dape_variant = dape_variant_from_name(variant);
    return pe;
}

json model_to_json(const ModelConfig& m) {
    return json{{"layers", m.layers},
                {"heads", m.heads},
                {"d_model", m.d_model},
                {"vocab_size", m.vocab_size},
                {"max_train_len", m.max_train_len},
                {"ffn_mult", m.ffn_mult},
                {"mode", model_mode_name(m.mode)},
                {"dropout", m.dropout},
                {"tie_embeddings", m.tie_embeddings},
                {"scale_before_pe", m.scale_before_pe},
                {"placeholder_id", m.placeholder_id}};
}

ModelConfig model_from_json(const json& j) {
    reject_unknown(j, "model",
                   {"layers", "heads", "d_model", "vocab_size", "max_train_len", "ffn_mult", "mode",
                    "dropout", "tie_embeddings", "scale_before_pe", "placeholder_id"});
    ModelConfig m;
    std::string mode = model_mode_name(m.mode);
    get_field(j, "layers", m.layers);
    get_field(j, "heads", m.heads);
    get_field(j, "d_model", m.d_model);
    get_field(j, "vocab_size", m.vocab_size);
    get_field(j, "max_train_len", m.max_train_len);
    get_field(j, "ffn_mult", m.ffn_mult);
    get_field(j, "mode", mode);
    get_field(j, "dropout", m.dropout);
    get_field(j, "tie_embeddings", m.tie_embeddings);
    get_field(j, "scale_before_pe", m.scale_before_pe);
    get_field(j, "placeholder_id", m.placeholder_id);
    m.mode = model_mode_from_name(mode);
    return m;
}

json to_json(const RunConfig& cfg) {
    return json{{"model", model_to_json(cfg.model)},
                {"pe", pe_to_json(cfg.model.pe)},
                {"optimizer",
                 json{{"lr", cfg.optimizer.lr},
                      {"beta1", cfg.optimizer.beta1},
                      {"beta2", cfg.optimizer.beta2},
                      {"eps", cfg.optimizer.eps},
                      {"clip_norm", cfg.optimizer.clip_norm}}},
                {"train",
                 json{{"steps", cfg.train.steps},
                      {"batch_size", cfg.train.batch_size},
                      {"train_len", cfg.train.train_len},
                      {"seed", cfg.train.seed},
                      {"checkpoint_every", cfg.train.checkpoint_every},
                      {"log_every", cfg.train.log_every},
                      {"eval_every", cfg.train.eval_every},
                      {"warmup_frac", cfg.train.warmup_frac}}},
                {"data",
                 json{{"source", cfg.data.source},
                      {"text_path", cfg.data.text_path},
                      {"task", cfg.data.task}}},
                {"eval",
                 json{{"lengths", cfg.eval.lengths},
                      {"k", cfg.eval.k},
                      {"samples_per_length", cfg.eval.samples_per_length},
                      {"batch_size", cfg.eval.batch_size},
                      {"protocol", cfg.eval.protocol}}},
                {"out_dir", cfg.out_dir}};
}

RunConfig run_config_from_json(const json& j) {
    reject_unknown(j, "<root>", {"model", "pe", "optimizer", "train", "data", "eval", "out_dir"});
    RunConfig cfg;
    if (j.contains("model")) cfg.model = model_from_json(j.at("model"));
    if (j.contains("pe")) cfg.model.pe = pe_from_json(j.at("pe"));
    if (j.contains("optimizer")) {
        const json& o = j.at("optimizer");
        reject_unknown(o, "optimizer", {"lr", "beta1", "beta2", "eps", "clip_norm"});
        get_field(o, "lr", cfg.optimizer.lr);
        get_field(o, "beta1", cfg.optimizer.beta1);
        get_field(o, "beta2", cfg.optimizer.beta2);
        get_field(o, "eps", cfg.optimizer.eps);
        get_field(o, "clip_norm", cfg.optimizer.clip_norm);
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        reject_unknown(t, "train",
                       {"steps", "batch_size", "train_len", "seed", "checkpoint_every", "log_every",
                        "eval_every", "warmup_frac"});
        get_field(t, "steps", cfg.train.steps);
        get_field(t, "batch_size", cfg.train.batch_size);
        get_field(t, "train_len", cfg.train.train_len);
        get_field(t, "seed", cfg.train.seed);
        get_field(t, "checkpoint_every", cfg.train.checkpoint_every);
        get_field(t, "log_every", cfg.train.log_every);
        get_field(t, "eval_every", cfg.train.eval_every);
        get_field(t, "warmup_frac", cfg.train.warmup_frac);
    }
    if (j.contains("data")) {
        const json& d = j.at("data");
        reject_unknown(d, "data", {"source", "text_path", "task"});
        get_field(d, "source", cfg.data.source);
        get_field(d, "text_path", cfg.data.text_path);
        get_field(d, "task", cfg.data.task);
    }
    if (j.contains("eval")) {
        const json& e = j.at("eval");
        reject_unknown(e, "eval", {"lengths", "k", "samples_per_length", "batch_size", "protocol"});
        get_field(e, "lengths", cfg.eval.lengths);
        get_field(e, "k", cfg.eval.k);
        get_field(e, "samples_per_length", cfg.eval.samples_per_length);
        get_field(e, "batch_size", cfg.eval.batch_size);
        get_field(e, "protocol", cfg.eval.protocol);
    }
    get_field(j, "out_dir", cfg.out_dir);
    cfg.validate();
    return cfg;
}

RunConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config error: cannot open '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error("config error: invalid JSON in '" + path + "': " + e.what());
    }
    return run_config_from_json(j);
}

void apply_override(json& j, const std::string& key_equals_value) {
    auto eq = key_equals_value.find('=');
    if (eq == std::string::npos)
        throw std::runtime_error("config error: override must look like key.path=value, got '" +
                                 key_equals_value + "'");
    std::string path = key_equals_value.substr(0, eq);
    std::string value = key_equals_value.substr(eq + 1);

    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::exception&) {
        parsed = value;  // bare strings stay strings
    }

    json* cursor = &j;
    std::stringstream ss(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) {
        if (part.empty()) throw std::runtime_error("config error: empty override path segment");
        parts.push_back(part);
    }
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) cursor = &(*cursor)[parts[i]];
    (*cursor)[parts.back()] = parsed;
}

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string config_hash(const RunConfig& cfg) {
    json j = to_json(cfg);
    j["train"]["seed"] = 0;
    j["out_dir"] = "";
    std::uint64_t h = fnv1a64(j.dump());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

std::string run_dir_name(const RunConfig& cfg) {
    return config_hash(cfg) + "-s" + std::to_string(cfg.train.seed);
}

std::string model_config_hash(const ModelConfig& m) {
    json j{{"model", model_to_json(m)}, {"pe", pe_to_json(m.pe)}};
    std::uint64_t h = fnv1a64(j.dump());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace dape
