#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dape/rng.hpp"

namespace dape {

enum class TaskId {
    even_pairs,
    modular_arithmetic_simple,
    parity_check,
    cycle_navigation,
    stack_manipulation,
    reverse_string,
    modular_arithmetic,
    solve_equation,
    duplicate_string,
    missing_duplicate,
    odds_first,
    binary_addition,
    compute_sqrt,
    bucket_sort
};

enum class TaskClass { regular, dcf, cs };

struct TaskSpec {
    TaskId id;
    TaskClass cls;
    bool permutation_invariant;
    int train_len_max = 40;
    int eval_len_min = 41;
    int eval_len_max = 500;
};

struct TaskVocab {
    std::vector<std::string> tokens;  // id -> display string
    std::vector<int> output_ids;      // answer alphabet; accuracy argmaxes over these
    int placeholder_id = -1;
    int pad_id = -1;
    int size() const { return static_cast<int>(tokens.size()); }
    int id_of(const std::string& tok) const;
};

struct TaskInstance {
    TaskId task;
    int length = 0;                       // actual input length |x|
    std::vector<int> input_tokens;        // |x|
    std::vector<int> target_tokens;       // |y|
    std::vector<std::uint8_t> loss_mask;  // |x|+|y|, true exactly on answer slots
};

const std::vector<TaskId>& all_tasks();
TaskSpec task_spec(TaskId id);
TaskId task_from_name(const std::string& name);
std::string task_name(TaskId id);
TaskVocab task_vocab(TaskId id);
double random_baseline(TaskId id);

// nearest supported input length not exceeding the request
int feasible_length(TaskId id, int length);

// Uniformly sampled instance with the ground truth computed by a direct
// reference algorithm. Unsupported lengths are adjusted down to the
// nearest feasible one.
TaskInstance generate(const TaskSpec& spec, int length, Rng& rng);

// Re-derives the answer through an independent route (inverse transform,
// recomputation with a different algorithm) and compares.
bool check_instance(const TaskInstance& instance);

// uniform integer in [1, n_max]
int sample_training_length(int n_max, Rng& rng);

// ---- byte-level text ingestion for the perplexity protocol ----

struct TextWindows {
    std::vector<std::vector<int>> windows;  // each holds eval_len byte tokens
    int eval_len = 0;
    int k = 0;  // scored suffix length
    // per-window mask over byte positions; true on the final k
    std::vector<std::uint8_t> window_loss_mask() const;
};

std::vector<int> load_bytes(const std::string& path);
// non-overlapping windows of eval_len bytes; trailing remainder is dropped
TextWindows ingest_text(const std::string& path, int eval_len, int k);
TextWindows windows_from_bytes(const std::vector<int>& bytes, int eval_len, int k);

// byte-level LM vocabulary: 256 byte values plus one BOS special
constexpr int kByteVocab = 257;
constexpr int kByteBos = 256;

// ---- batching for the encoder-with-placeholders mode ----

struct EncoderBatch {
    std::vector<int> tokens;  // [batch * seq_len], padded
    int batch = 0;
    int seq_len = 0;
    std::vector<int> targets;             // [batch * seq_len]
    std::vector<std::uint8_t> loss_mask;  // [batch * seq_len]
    std::vector<int> valid_lengths;       // per example, |x| + |y|
};

EncoderBatch make_encoder_batch(const std::vector<TaskInstance>& instances, const TaskVocab& vocab);

}  // namespace dape
