#include "dape/train.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "dape/adam.hpp"
#include "dape/ops.hpp"
#include "dape/tasks.hpp"

namespace dape {

namespace {

struct Batch {
    std::vector<int> tokens;
    int batch = 0;
    int seq_len = 0;
    std::vector<int> targets;
    std::vector<std::uint8_t> loss_mask;
    std::vector<std::uint8_t> attn_mask;  // empty selects the mode default
};

Batch make_lm_batch(const std::vector<int>& bytes, int batch_size, int window, Rng& rng) {
    if (static_cast<int>(bytes.size()) < window)
        throw std::runtime_error("too short error: corpus smaller than one training window");
    Batch b;
    b.batch = batch_size;
    b.seq_len = window;
    b.tokens.resize(std::size_t(batch_size) * window);
    b.targets.resize(std::size_t(batch_size) * window);
    b.loss_mask.assign(std::size_t(batch_size) * window, 1);
    int max_start = static_cast<int>(bytes.size()) - window;
    for (int i = 0; i < batch_size; ++i) {
        int start = rng.uniform_int(0, max_start);
        std::size_t base = std::size_t(i) * window;
        b.tokens[base] = kByteBos;
        for (int t = 0; t < window; ++t) {
            if (t > 0) b.tokens[base + t] = bytes[start + t - 1];
            b.targets[base + t] = bytes[start + t];
        }
    }
    return b;
}

Batch make_task_batch(const TaskSpec& spec, const TaskVocab& vocab, int batch_size, int len_max,
                      int heads, Rng& rng) {
    // one sampled length per step: every instance still sees U(1, N)
    // marginally, and the batch packs without padding waste
    int len = sample_training_length(len_max, rng);
    std::vector<TaskInstance> instances;
    instances.reserve(static_cast<std::size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i) instances.push_back(generate(spec, len, rng));
    EncoderBatch enc = make_encoder_batch(instances, vocab);
    Batch b;
    b.tokens = std::move(enc.tokens);
    b.batch = enc.batch;
    b.seq_len = enc.seq_len;
    b.targets = std::move(enc.targets);
    b.loss_mask = std::move(enc.loss_mask);
    b.attn_mask = padded_attn_mask(enc.valid_lengths, b.seq_len, heads, false);
    return b;
}

}  // namespace

ModelConfig effective_model_config(const RunConfig& cfg) {
    ModelConfig m = cfg.model;
    if (cfg.data.source == "task") {
        if (cfg.data.task.empty())
            throw std::runtime_error("config error: data.source=task needs data.task");
        if (m.mode != ModelMode::encoder_placeholder)
            throw std::runtime_error("config error: task training runs in encoder_placeholder mode");
        TaskVocab vocab = task_vocab(task_from_name(cfg.data.task));
        m.vocab_size = vocab.size();
        m.placeholder_id = vocab.placeholder_id;
        // answers can triple the input (duplicate_string), so the learned
        // position table must cover the widest training sequence
        m.max_train_len = 3 * cfg.train.train_len + 2;
    } else {
        if (m.mode != ModelMode::causal_lm)
            throw std::runtime_error("config error: text training runs in causal_lm mode");
        m.vocab_size = kByteVocab;
        m.placeholder_id = -1;
        m.max_train_len = cfg.train.train_len;
    }
    if (m.pe.fire_threshold <= 0) m.pe.fire_threshold = cfg.train.train_len;
    if (m.pe.rrope_pool <= 0) m.pe.rrope_pool = m.pe.rrope_factor * cfg.train.train_len;
    return m;
}

TrainResult train_run(const RunConfig& cfg, const std::string& run_dir) {
    cfg.validate();
    ModelConfig model_cfg = effective_model_config(cfg);
    std::filesystem::create_directories(run_dir);

    Rng master(cfg.train.seed);
    Rng data_rng = master.fork(1);
    Rng pos_rng = master.fork(2);
    Rng dropout_rng = master.fork(3);

    Model model(model_cfg, cfg.train.seed);
    AdamOptimizer optimizer(model.parameters(), cfg.optimizer);

    std::vector<int> corpus;
    TaskSpec spec{};
    TaskVocab vocab;
    if (cfg.data.source == "text") {
        if (cfg.data.text_path.empty())
            throw std::runtime_error("config error: data.source=text needs data.text_path");
        corpus = load_bytes(cfg.data.text_path);
    } else {
        spec = task_spec(task_from_name(cfg.data.task));
        vocab = task_vocab(spec.id);
    }

    TrainResult result;
    result.checkpoint_path = run_dir + "/checkpoint.bin";
    result.metrics_path = run_dir + "/metrics.jsonl";
    std::ofstream log(result.metrics_path, std::ios::trunc);
    if (!log) throw std::runtime_error("io error: cannot write '" + result.metrics_path + "'");

    long warmup_steps = std::max<long>(1, std::lround(cfg.train.warmup_frac *
                                                      static_cast<double>(cfg.train.steps)));
    double last_grad_norm = 0.0;

    for (long step = 1; step <= cfg.train.steps; ++step) {
        Batch batch = cfg.data.source == "text"
                          ? make_lm_batch(corpus, cfg.train.batch_size, cfg.train.train_len, data_rng)
                          : make_task_batch(spec, vocab, cfg.train.batch_size, cfg.train.train_len,
                                            model_cfg.heads, data_rng);

        std::vector<int> positions;
        ForwardCtx ctx;
        if (!batch.attn_mask.empty()) ctx.attn_mask = &batch.attn_mask;
        if (model_cfg.pe.kind == PeKind::randomized_rope) {
            positions = sample_randomized_positions(batch.seq_len, model_cfg.pe.rrope_pool, pos_rng);
            ctx.positions = &positions;
        }
        if (model_cfg.dropout > 0.0) ctx.dropout_rng = &dropout_rng;

        auto t0 = std::chrono::steady_clock::now();
        Tape tape;
        double loss_value;
        auto abort_with_diagnostics = [&](const std::string& reason, double loss_seen) {
            nlohmann::json diag{{"event", "abort"},
                                {"step", step},
                                {"loss", loss_seen},
                                {"lr", cfg.optimizer.lr},
                                {"grad_norm", last_grad_norm},
                                {"reason", reason}};
            log << diag.dump() << "\n";
            log.flush();
            throw std::runtime_error("training aborted at step " + std::to_string(step) + ": " +
                                     reason);
        };
        try {
            TapeScope scope(tape);
            Tensor logits = model.forward(batch.tokens, batch.batch, batch.seq_len, ctx);
            Tensor loss = cross_entropy(logits, batch.targets, batch.loss_mask);
            loss_value = loss.value();
            if (!std::isfinite(loss_value)) abort_with_diagnostics("non-finite loss", loss_value);
            tape.backward(loss);
        } catch (const std::runtime_error& e) {
            if (std::string(e.what()).rfind("training aborted", 0) == 0) throw;
            abort_with_diagnostics(e.what(), std::numeric_limits<double>::quiet_NaN());
        }
        double lr_scale = step <= warmup_steps
                              ? static_cast<double>(step) / static_cast<double>(warmup_steps)
                              : 1.0;
        last_grad_norm = optimizer.step(lr_scale);
        auto t1 = std::chrono::steady_clock::now();

        if (step == 1) result.first_loss = loss_value;
        result.final_loss = loss_value;

        if (step == 1 || step == cfg.train.steps ||
            (cfg.train.log_every > 0 && step % cfg.train.log_every == 0)) {
            nlohmann::json line{{"step", step},
                                {"loss", loss_value},
                                {"lr", cfg.optimizer.lr * lr_scale},
                                {"grad_norm", last_grad_norm},
                                {"wall_ms", std::chrono::duration<double, std::milli>(t1 - t0).count()}};
            log << line.dump() << "\n";
        }
        if (cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 &&
            step != cfg.train.steps)
            save_checkpoint(model, result.checkpoint_path);
        if (cfg.train.eval_every > 0 && step % cfg.train.eval_every == 0) {
            // deterministic holdout loss on a fresh stream keyed by the step
            Rng eval_rng = master.fork(1000 + static_cast<std::uint64_t>(step));
            Batch holdout =
                cfg.data.source == "text"
                    ? make_lm_batch(corpus, cfg.train.batch_size, cfg.train.train_len, eval_rng)
                    : make_task_batch(spec, vocab, cfg.train.batch_size, cfg.train.train_len,
                                      model_cfg.heads, eval_rng);
            ForwardCtx eval_ctx;
            if (!holdout.attn_mask.empty()) eval_ctx.attn_mask = &holdout.attn_mask;
            std::vector<int> eval_positions;
            if (model_cfg.pe.kind == PeKind::randomized_rope) {
                eval_positions = holdout.seq_len <= model_cfg.pe.rrope_pool
                                     ? sample_randomized_positions(holdout.seq_len,
                                                                   model_cfg.pe.rrope_pool, eval_rng)
                                     : identity_positions(holdout.seq_len);
                eval_ctx.positions = &eval_positions;
            }
            Tensor logits = model.forward(holdout.tokens, holdout.batch, holdout.seq_len, eval_ctx);
            Tensor eval_loss = cross_entropy(logits, holdout.targets, holdout.loss_mask);
            nlohmann::json line{{"step", step}, {"eval_loss", eval_loss.value()}};
            log << line.dump() << "\n";
        }
    }

    save_checkpoint(model, result.checkpoint_path);
    result.steps = cfg.train.steps;
    return result;
}

}  // namespace dape
