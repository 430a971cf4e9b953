#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dape/model.hpp"
#include "dape/tasks.hpp"

namespace dape {

struct EvalRow {
    int eval_length = 0;
    std::string metric;
    double mean = 0.0;
    double stddev = 0.0;   // meaningful only when seed_count >= 2
    int seed_count = 1;
};

struct EvalReport {
    std::vector<EvalRow> rows;  // lengths strictly increasing per metric
    std::string pe_name;
    std::string config_hash;
    std::string protocol;  // last_k | non_overlapping | accuracy
};

// exp(mean NLL over the final k positions of every window); the whole
// window participates in the attention context
double last_k_perplexity(Model& model, const TextWindows& windows, int k, int batch_size = 16);

// summed NLL plus the scored-token count (always k * window count)
std::pair<double, long> last_k_nll(Model& model, const TextWindows& windows, int k,
                                   int batch_size = 16);

// per-token accuracy with predictions restricted to the output alphabet
double accuracy_from_logits(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<std::uint8_t>& loss_mask,
                            const std::vector<int>& output_ids);

// perplexity over all tokens of disjoint length-L segments
double non_overlapping_perplexity(Model& model, const std::vector<int>& text_bytes, int segment_len,
                                  int batch_size = 16);

// per-token accuracy over answer slots, one row per evaluation length;
// predictions argmax over the task's output alphabet
EvalReport che_accuracy(Model& model, const TaskSpec& spec, const std::vector<int>& lengths,
                        int samples_per_length, std::uint64_t seed, int batch_size = 32);

// perplexity rows across evaluation lengths on one byte corpus
EvalReport length_sweep(Model& model, const std::vector<int>& bytes, const std::vector<int>& lengths,
                        int k, const std::string& protocol, int batch_size = 16);

struct TimingRow {
    std::string pe_name;
    int seq_len = 0;
    double wall_ms = 0.0;
    double ratio_vs_dape = 1.0;
};

// Median wall time of a forward+backward step per (config, length); two
// warm-up steps are discarded. Ratios normalize against the adaptive row
// at the same length when exactly one is present.
std::vector<TimingRow> timing_bench(const std::vector<std::pair<std::string, ModelConfig>>& configs,
                                    const std::vector<int>& lengths, int reps);

// per-length mean and sample standard deviation over runs sharing a config
EvalReport seed_aggregate(const std::vector<EvalReport>& runs);

struct PairedWins {
    int a_wins = 0;
    int b_wins = 0;
    int ties = 0;
};
PairedWins paired_wins(const EvalReport& a, const EvalReport& b, bool higher_is_better);

void write_report_csv(const EvalReport& report, const std::string& path);
void write_report_jsonl(const EvalReport& report, const std::string& path);
void write_timing_csv(const std::vector<TimingRow>& rows, const std::string& path);

// ---- bias dumps (the numeric substrate of the bias visualizations) ----

struct BiasDumpRow {
    int head = 0;
    int query = 0;  // 1-based
    int key = 0;    // 1-based
    double attention_logit = 0.0;
    double static_bias = 0.0;
    double dape_correction = 0.0;
    double total = 0.0;
};

// Final query row against every key, per head, from one forward pass of
// `tokens`. Requires an additive-bias (or adaptive) encoding.
std::vector<BiasDumpRow> dump_bias_rows(Model& model, const std::vector<int>& tokens, int layer);
void write_bias_csv(const std::vector<BiasDumpRow>& rows, const std::string& path);

}  // namespace dape
