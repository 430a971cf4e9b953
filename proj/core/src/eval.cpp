#include "dape/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <json.hpp>

#include "dape/adam.hpp"
#include "dape/ops.hpp"

namespace dape {

// sum of NLL over masked positions plus the scored-token count
std::pair<double, long> last_k_nll(Model& model, const TextWindows& windows, int k,
                                   int batch_size) {
    if (windows.windows.empty())
        throw std::runtime_error("contract error: perplexity over an empty window set");
    if (k < 1 || k > windows.eval_len)
        throw std::runtime_error("contract error: need 1 <= k <= eval_len");
    const int L = windows.eval_len;
    double total_nll = 0.0;
    long scored = 0;
    for (std::size_t start = 0; start < windows.windows.size();
         start += static_cast<std::size_t>(batch_size)) {
        std::size_t stop = std::min(windows.windows.size(), start + batch_size);
        int b = static_cast<int>(stop - start);
        std::vector<int> tokens(std::size_t(b) * L);
        std::vector<int> targets(std::size_t(b) * L);
        std::vector<std::uint8_t> mask(std::size_t(b) * L, 0);
        for (int w = 0; w < b; ++w) {
            const auto& bytes = windows.windows[start + w];
            std::size_t base = std::size_t(w) * L;
            tokens[base] = kByteBos;
            for (int t = 0; t < L; ++t) {
                if (t > 0) tokens[base + t] = bytes[t - 1];
                targets[base + t] = bytes[t];
                mask[base + t] = t >= L - k;
            }
        }
        Tensor logits = model.forward(tokens, b, L);
        Tensor loss = cross_entropy(logits, targets, mask);
        long batch_scored = static_cast<long>(b) * k;
        total_nll += loss.value() * static_cast<double>(batch_scored);
        scored += batch_scored;
    }
    return {total_nll, scored};
}

double accuracy_from_logits(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<std::uint8_t>& loss_mask,
                            const std::vector<int>& output_ids) {
    if (output_ids.empty()) throw std::runtime_error("contract error: empty output alphabet");
    const int vocab = logits.shape().back();
    long correct = 0, total = 0;
    for (std::size_t pos = 0; pos < loss_mask.size(); ++pos) {
        if (!loss_mask[pos]) continue;
        const double* row = logits.data().data() + pos * vocab;
        int best = output_ids.front();
        for (int cand : output_ids)
            if (row[cand] > row[best]) best = cand;
        correct += best == targets[pos];
        total += 1;
    }
    if (total == 0) throw std::runtime_error("contract error: no scored positions");
    return static_cast<double>(correct) / static_cast<double>(total);
}

namespace {

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double m = mean_of(v), s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

void ensure_parent_dir(const std::string& path) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
}

}  // namespace

double last_k_perplexity(Model& model, const TextWindows& windows, int k, int batch_size) {
    auto [nll, scored] = last_k_nll(model, windows, k, batch_size);
    return std::exp(nll / static_cast<double>(scored));
}

double non_overlapping_perplexity(Model& model, const std::vector<int>& text_bytes, int segment_len,
                                  int batch_size) {
    TextWindows segments = windows_from_bytes(text_bytes, segment_len, segment_len);
    return last_k_perplexity(model, segments, segment_len, batch_size);
}

EvalReport che_accuracy(Model& model, const TaskSpec& spec, const std::vector<int>& lengths,
                        int samples_per_length, std::uint64_t seed, int batch_size) {
    const TaskVocab vocab = task_vocab(spec.id);
    if (model.config().vocab_size != vocab.size())
        throw std::runtime_error("config error: model vocabulary " +
                                 std::to_string(model.config().vocab_size) + " does not match task '" +
                                 task_name(spec.id) + "' vocabulary " + std::to_string(vocab.size()));
    std::vector<int> sorted = lengths;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());

    EvalReport report;
    report.pe_name = model.config().pe.display_name();
    report.protocol = "accuracy";
    for (int len : sorted) {
        Rng rng = Rng(seed).fork(static_cast<std::uint64_t>(len));
        long correct = 0, total = 0;
        for (int start = 0; start < samples_per_length; start += batch_size) {
            int b = std::min(batch_size, samples_per_length - start);
            std::vector<TaskInstance> instances;
            instances.reserve(static_cast<std::size_t>(b));
            for (int i = 0; i < b; ++i) instances.push_back(generate(spec, len, rng));
            EncoderBatch batch = make_encoder_batch(instances, vocab);
            std::vector<std::uint8_t> mask = padded_attn_mask(batch.valid_lengths, batch.seq_len,
                                                              model.config().heads, false);
            ForwardCtx ctx;
            ctx.attn_mask = &mask;
            Tensor logits = model.forward(batch.tokens, batch.batch, batch.seq_len, ctx);
            long batch_total = 0;
            for (auto m : batch.loss_mask) batch_total += m != 0;
            double acc =
                accuracy_from_logits(logits, batch.targets, batch.loss_mask, vocab.output_ids);
            correct += std::lround(acc * static_cast<double>(batch_total));
            total += batch_total;
        }
        EvalRow row;
        row.eval_length = len;
        row.metric = "accuracy";
        row.mean = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
        report.rows.push_back(row);
    }
    return report;
}

EvalReport length_sweep(Model& model, const std::vector<int>& bytes, const std::vector<int>& lengths,
                        int k, const std::string& protocol, int batch_size) {
    std::vector<int> sorted = lengths;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    EvalReport report;
    report.pe_name = model.config().pe.display_name();
    report.protocol = protocol;
    bool want_last_k = protocol == "last_k" || protocol == "both";
    bool want_nonoverlap = protocol == "non_overlapping" || protocol == "both";
    if (!want_last_k && !want_nonoverlap)
        throw std::runtime_error("config error: unknown evaluation protocol '" + protocol + "'");
    for (int len : sorted) {
        if (want_last_k) {
            TextWindows w = windows_from_bytes(bytes, len, std::min(k, len));
            EvalRow row;
            row.eval_length = len;
            row.metric = "ppl_last_k";
            row.mean = last_k_perplexity(model, w, std::min(k, len), batch_size);
            report.rows.push_back(row);
        }
        if (want_nonoverlap) {
            EvalRow row;
            row.eval_length = len;
            row.metric = "ppl_non_overlapping";
            row.mean = non_overlapping_perplexity(model, bytes, len, batch_size);
            report.rows.push_back(row);
        }
    }
    return report;
}

std::vector<TimingRow> timing_bench(const std::vector<std::pair<std::string, ModelConfig>>& configs,
                                    const std::vector<int>& lengths, int reps) {
    if (reps < 3) throw std::runtime_error("contract error: timing_bench needs reps >= 3");
#if defined(__GLIBC__)
    // keep large tensor buffers inside the arena; the default mmap policy
    // re-faults big allocations every step and the penalty depends on the
    // measurement order, which poisons cross-config deltas
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
#endif
    constexpr int kWarmup = 2;
    std::vector<TimingRow> rows;
    for (const auto& [name, base_cfg] : configs) {
        ModelConfig cfg = base_cfg;
        Model model(cfg, 1234);
        for (int n : lengths) {
            Rng rng(99);
            std::vector<int> tokens(static_cast<std::size_t>(n));
            for (auto& t : tokens) t = rng.uniform_int(0, cfg.vocab_size - 1);
            std::vector<int> targets = tokens;
            std::vector<std::uint8_t> mask(tokens.size(), 1);
            std::vector<double> samples;
            for (int rep = 0; rep < reps + kWarmup; ++rep) {
                auto t0 = std::chrono::steady_clock::now();
                Tape tape;
                {
                    TapeScope scope(tape);
                    Tensor logits = model.forward(tokens, 1, n);
                    Tensor loss = cross_entropy(logits, targets, mask);
                    tape.backward(loss);
                }
                for (Tensor& p : model.parameters()) p.zero_grad();
                auto t1 = std::chrono::steady_clock::now();
                if (rep >= kWarmup)
                    samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
            }
            std::sort(samples.begin(), samples.end());
            TimingRow row;
            row.pe_name = name;
            row.seq_len = n;
            row.wall_ms = samples[samples.size() / 2];
            rows.push_back(row);
        }
    }
    // normalize against the adaptive row when exactly one config is adaptive
    for (int n : lengths) {
        const TimingRow* dape_row = nullptr;
        int dape_count = 0;
        for (const auto& row : rows) {
            if (row.seq_len == n && row.pe_name.rfind("dape", 0) == 0) {
                dape_row = &row;
                ++dape_count;
            }
        }
        for (auto& row : rows) {
            if (row.seq_len != n) continue;
            row.ratio_vs_dape = (dape_count == 1) ? row.wall_ms / dape_row->wall_ms
                                                  : std::numeric_limits<double>::quiet_NaN();
        }
    }
    return rows;
}

EvalReport seed_aggregate(const std::vector<EvalReport>& runs) {
    if (runs.empty()) throw std::runtime_error("contract error: seed_aggregate over no runs");
    const EvalReport& first = runs.front();
    for (const auto& run : runs) {
        if (run.config_hash != first.config_hash)
            throw std::runtime_error("contract error: seed_aggregate over mismatched configs ('" +
                                     run.config_hash + "' vs '" + first.config_hash + "')");
        if (run.rows.size() != first.rows.size())
            throw std::runtime_error("contract error: seed_aggregate over mismatched row sets");
        for (std::size_t i = 0; i < run.rows.size(); ++i)
            if (run.rows[i].eval_length != first.rows[i].eval_length ||
                run.rows[i].metric != first.rows[i].metric)
                throw std::runtime_error("contract error: seed_aggregate rows disagree on lengths");
    }
    EvalReport out;
    out.pe_name = first.pe_name;
    out.config_hash = first.config_hash;
    out.protocol = first.protocol;
    for (std::size_t i = 0; i < first.rows.size(); ++i) {
        std::vector<double> values;
        for (const auto& run : runs) values.push_back(run.rows[i].mean);
        EvalRow row;
        row.eval_length = first.rows[i].eval_length;
        row.metric = first.rows[i].metric;
        row.mean = mean_of(values);
        row.stddev = sample_std(values);
        row.seed_count = static_cast<int>(runs.size());
        out.rows.push_back(row);
    }
    return out;
}

PairedWins paired_wins(const EvalReport& a, const EvalReport& b, bool higher_is_better) {
    if (a.rows.size() != b.rows.size())
        throw std::runtime_error("contract error: paired_wins over mismatched reports");
    PairedWins wins;
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        if (a.rows[i].eval_length != b.rows[i].eval_length || a.rows[i].metric != b.rows[i].metric)
            throw std::runtime_error("contract error: paired_wins rows disagree");
        double va = a.rows[i].mean, vb = b.rows[i].mean;
        if (va == vb) {
            ++wins.ties;
        } else if ((va > vb) == higher_is_better) {
            ++wins.a_wins;
        } else {
            ++wins.b_wins;
        }
    }
    return wins;
}

void write_report_csv(const EvalReport& report, const std::string& path) {
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("io error: cannot write '" + path + "'");
    out << "eval_length,metric,mean,std,seed_count\n";
    char buf[64];
    for (const auto& row : report.rows) {
        out << row.eval_length << "," << row.metric << ",";
        std::snprintf(buf, sizeof(buf), "%.12g", row.mean);
        out << buf << ",";
        if (row.seed_count >= 2) {
            std::snprintf(buf, sizeof(buf), "%.12g", row.stddev);
            out << buf;
        }
        out << "," << row.seed_count << "\n";
    }
}

void write_report_jsonl(const EvalReport& report, const std::string& path) {
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("io error: cannot write '" + path + "'");
    for (const auto& row : report.rows) {
        nlohmann::json j{{"eval_length", row.eval_length}, {"metric", row.metric},
                         {"mean", row.mean},               {"seed_count", row.seed_count},
                         {"pe", report.pe_name},           {"config_hash", report.config_hash},
                         {"protocol", report.protocol}};
        if (row.seed_count >= 2) j["std"] = row.stddev;
        out << j.dump() << "\n";
    }
}

void write_timing_csv(const std::vector<TimingRow>& rows, const std::string& path) {
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("io error: cannot write '" + path + "'");
    out << "pe,seq_len,wall_ms,ratio_vs_dape\n";
    char buf[64];
    for (const auto& row : rows) {
        out << row.pe_name << "," << row.seq_len << ",";
        std::snprintf(buf, sizeof(buf), "%.6g", row.wall_ms);
        out << buf << ",";
        if (!std::isnan(row.ratio_vs_dape)) {
            std::snprintf(buf, sizeof(buf), "%.6g", row.ratio_vs_dape);
            out << buf;
        }
        out << "\n";
    }
}

std::vector<BiasDumpRow> dump_bias_rows(Model& model, const std::vector<int>& tokens, int layer) {
    const ModelConfig& cfg = model.config();
    if (!is_additive_bias(cfg.pe.kind))
        throw std::runtime_error("no-bias error: encoding '" + pe_kind_name(cfg.pe.kind) +
                                 "' has no additive bias matrix to dump");
    if (layer < 0 || layer >= cfg.layers)
        throw std::runtime_error("config error: layer " + std::to_string(layer) + " out of range");
    AttnCapture capture;
    capture.layer = layer;
    ForwardCtx ctx;
    ctx.capture = &capture;
    int n = static_cast<int>(tokens.size());
    model.forward(tokens, 1, n, ctx);

    std::vector<BiasDumpRow> rows;
    const int h = cfg.heads;
    const int query = n - 1;
    for (int head = 0; head < h; ++head) {
        for (int key = 0; key < n; ++key) {
            BiasDumpRow row;
            row.head = head;
            row.query = query + 1;
            row.key = key + 1;
            std::size_t cell = (std::size_t(head) * n + query) * n + key;
            row.attention_logit = capture.attn_logits.data()[cell];
            row.static_bias = capture.static_bias.data()[cell];
            row.dape_correction = capture.correction.defined() ? capture.correction.data()[cell] : 0.0;
            row.total = capture.total.data()[cell];
            rows.push_back(row);
        }
    }
    return rows;
}

void write_bias_csv(const std::vector<BiasDumpRow>& rows, const std::string& path) {
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("io error: cannot write '" + path + "'");
    out << "head,i,j,attention_logit,static_bias,dape_correction,total\n";
    char buf[64];
    for (const auto& row : rows) {
        out << row.head << "," << row.query << "," << row.key;
        for (double v : {row.attention_logit, row.static_bias, row.dape_correction, row.total}) {
            std::snprintf(buf, sizeof(buf), "%.12g", v);
            out << "," << buf;
        }
        out << "\n";
    }
}

}  // namespace dape
