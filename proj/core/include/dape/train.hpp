#pragma once

#include <string>

#include "dape/config.hpp"
#include "dape/model.hpp"

namespace dape {

struct TrainResult {
    std::string checkpoint_path;
    std::string metrics_path;
    double first_loss = 0.0;
    double final_loss = 0.0;
    long steps = 0;
};

// Resolves the fields that depend on the data source: task vocabulary and
// placeholder id, the learned-position table extent, the fire threshold
// and the randomized-rope pool. The checkpoint stores this resolved form.
ModelConfig effective_model_config(const RunConfig& cfg);

// Runs the full loop (sample batch, forward, masked cross-entropy,
// backward, adam) and writes checkpoint.bin plus metrics.jsonl under
// run_dir. Deterministic given the config seed.
TrainResult train_run(const RunConfig& cfg, const std::string& run_dir);

}  // namespace dape
