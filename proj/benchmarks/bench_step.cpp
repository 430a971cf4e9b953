// Microbenchmarks: forward+backward step time across sequence lengths,
// encodings, and adaptive-MLP widths.

#include <benchmark/benchmark.h>

#include "dape/adam.hpp"
#include "dape/config.hpp"
#include "dape/ops.hpp"
#include "dape/tasks.hpp"
#include "dape/train.hpp"

namespace {

using namespace dape;

ModelConfig bench_config(PeKind kind, bool adaptive, int dape_hidden, int train_len) {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.heads = 4;
    cfg.d_model = 128;
    cfg.vocab_size = kByteVocab;
    cfg.max_train_len = train_len;
    cfg.mode = ModelMode::causal_lm;
    cfg.pe.kind = kind;
    cfg.pe.dape = adaptive;
    cfg.pe.dape_hidden = dape_hidden;
    cfg.pe.fire_threshold = train_len;
    cfg.pe.rrope_pool = 4 * train_len;
    return cfg;
}

void run_step(Model& model, int n) {
    Rng rng(7);
    std::vector<int> tokens(static_cast<std::size_t>(n));
    for (auto& t : tokens) t = rng.uniform_int(0, model.config().vocab_size - 1);
    std::vector<int> targets = tokens;
    std::vector<std::uint8_t> mask(tokens.size(), 1);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor logits = model.forward(tokens, 1, n);
        Tensor loss = cross_entropy(logits, targets, mask);
        tape.backward(loss);
    }
    for (Tensor& p : model.parameters()) p.zero_grad();
}

void BM_StepKerple(benchmark::State& state) {
    int n = static_cast<int>(state.range(0));
    Model model(bench_config(PeKind::kerple, false, 0, 512), 1);
    for (auto _ : state) run_step(model, n);
    state.SetComplexityN(n);
}
BENCHMARK(BM_StepKerple)->RangeMultiplier(2)->Range(128, 512)->Complexity()->Unit(benchmark::kMillisecond);

void BM_StepDapeKerple(benchmark::State& state) {
    int n = static_cast<int>(state.range(0));
    Model model(bench_config(PeKind::kerple, true, 32, 512), 1);
    for (auto _ : state) run_step(model, n);
    state.SetComplexityN(n);
}
BENCHMARK(BM_StepDapeKerple)->RangeMultiplier(2)->Range(128, 512)->Complexity()->Unit(benchmark::kMillisecond);

void BM_StepAlibi(benchmark::State& state) {
    int n = static_cast<int>(state.range(0));
    Model model(bench_config(PeKind::alibi, false, 0, 512), 1);
    for (auto _ : state) run_step(model, n);
}
BENCHMARK(BM_StepAlibi)->Arg(256)->Arg(512)->Unit(benchmark::kMillisecond);

void BM_StepRope(benchmark::State& state) {
    int n = static_cast<int>(state.range(0));
    Model model(bench_config(PeKind::rope, false, 0, 512), 1);
    for (auto _ : state) run_step(model, n);
}
BENCHMARK(BM_StepRope)->Arg(256)->Arg(512)->Unit(benchmark::kMillisecond);

// adaptive-MLP width sweep at fixed length: the overhead term is linear in
// the hidden width
void BM_DapeHiddenWidth(benchmark::State& state) {
    int hidden = static_cast<int>(state.range(0));
    Model model(bench_config(PeKind::kerple, true, hidden, 512), 1);
    for (auto _ : state) run_step(model, 256);
}
BENCHMARK(BM_DapeHiddenWidth)->Arg(4)->Arg(16)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
