#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "dape/adam.hpp"
#include "dape/model.hpp"

namespace dape {

struct TrainConfig {
    long steps = 1000;
    int batch_size = 16;
    int train_len = 64;  // LM window length; max sampled input length for tasks
    std::uint64_t seed = 1;
    long checkpoint_every = 0;  // 0 writes only the final checkpoint
    long log_every = 10;
    long eval_every = 0;  // 0 disables in-training eval snapshots
    double warmup_frac = 0.01;
};

struct DataConfig {
    std::string source = "text";  // "text" | "task"
    std::string text_path;
    std::string task;
};

struct EvalConfig {
    std::vector<int> lengths;     // empty selects train_len * {1,2,4,8,16}
    int k = 256;                  // scored suffix length for the last_k protocol
    int samples_per_length = 64;  // task accuracy samples
    int batch_size = 32;
    std::string protocol = "last_k";  // "last_k" | "non_overlapping" | "both"
};

struct RunConfig {
    ModelConfig model;  // model.pe carries the positional encoding selection
    AdamConfig optimizer;
    TrainConfig train;
    DataConfig data;
    EvalConfig eval;
    std::string out_dir;

    void validate() const;
    std::vector<int> eval_lengths() const;
};

nlohmann::json pe_to_json(const PeConfig& pe);
PeConfig pe_from_json(const nlohmann::json& j);
nlohmann::json model_to_json(const ModelConfig& m);
ModelConfig model_from_json(const nlohmann::json& j);

nlohmann::json to_json(const RunConfig& cfg);
// Fail-closed: unknown keys or type mismatches abort; absent keys take the
// schema defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_config_file(const std::string& path);

// dot-path override, e.g. "train.steps=500" or "pe.kind=kerple"
void apply_override(nlohmann::json& j, const std::string& key_equals_value);

// 16 hex chars over the canonical config with the seed normalized out, so
// seeds of one experiment share a prefix for paired comparison
std::string config_hash(const RunConfig& cfg);
std::string run_dir_name(const RunConfig& cfg);
// hash over the resolved model+pe sections only (seed-free); reports use
// this so runs of one architecture pair up across seeds
std::string model_config_hash(const ModelConfig& m);

std::uint64_t fnv1a64(const std::string& s);

}  // namespace dape
