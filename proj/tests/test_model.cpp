#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dape/model.hpp"
#include "dape/ops.hpp"
#include "dape/tasks.hpp"
#include "gradcheck.hpp"
#include "tmpdir.hpp"

using namespace dape;
using dape::testing::TmpDir;

namespace {

ModelConfig tiny_config(PeKind kind, bool adaptive = false) {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.d_model = 16;
    cfg.vocab_size = 11;
    cfg.max_train_len = 12;
    cfg.mode = ModelMode::causal_lm;
    cfg.pe.kind = kind;
    cfg.pe.dape = adaptive;
    cfg.pe.fire_threshold = 8;
    cfg.pe.rrope_pool = 32;
    return cfg;
}

std::vector<int> random_tokens(int count, int vocab, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<int> out(static_cast<std::size_t>(count));
    for (auto& t : out) t = rng.uniform_int(0, vocab - 1);
    return out;
}

}  // namespace

TEST_CASE("single-head attention matches a hand-rolled per-entry oracle") {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.heads = 1;
    cfg.d_model = 4;
    cfg.vocab_size = 5;
    cfg.max_train_len = 8;
    cfg.pe.kind = PeKind::nope;
    Model model(cfg, 17);

    // orthogonal embedding rows for the three probed tokens
    Tensor emb_table = model.param("embedding.token");
    std::vector<double> rows{1.5, 0, 0, 0, 0, -2.0, 0, 0, 0, 0, 0.75, 0};
    for (int t = 0; t < 3; ++t)
        for (int c = 0; c < 4; ++c) emb_table.data()[t * 4 + c] = rows[t * 4 + c];

    const int n = 3;
    std::vector<int> tokens{0, 1, 2};
    AttnCapture capture;
    ForwardCtx ctx;
    ctx.capture = &capture;
    model.forward(tokens, 1, n, ctx);

    // plain-loop replication: embed -> layer norm -> q/k projections -> scaled gram
    auto vec_param = [&](const char* name) { return model.param(name).data(); };
    const auto& gamma = vec_param("layers.0.attn.ln.gamma");
    const auto& beta = vec_param("layers.0.attn.ln.beta");
    const auto& wq = vec_param("layers.0.attn.wq");
    const auto& bq = vec_param("layers.0.attn.bq");
    const auto& wk = vec_param("layers.0.attn.wk");
    const auto& bk = vec_param("layers.0.attn.bk");

    double normed[3][4], q[3][4], k[3][4];
    for (int i = 0; i < n; ++i) {
        double mean = 0, var = 0;
        for (int c = 0; c < 4; ++c) mean += rows[i * 4 + c];
        mean /= 4;
        for (int c = 0; c < 4; ++c) {
            double d = rows[i * 4 + c] - mean;
            var += d * d;
        }
        var /= 4;
        double inv = 1.0 / std::sqrt(var + 1e-5);
        for (int c = 0; c < 4; ++c)
            normed[i][c] = (rows[i * 4 + c] - mean) * inv * gamma[c] + beta[c];
    }
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < 4; ++c) {
            double sq = bq[c], sk = bk[c];
            for (int d = 0; d < 4; ++d) {
                sq += normed[i][d] * wq[d * 4 + c];
                sk += normed[i][d] * wk[d * 4 + c];
            }
            q[i][c] = sq;
            k[i][c] = sk;
        }
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double gram = 0;
            for (int c = 0; c < 4; ++c) gram += q[i][c] * k[j][c];
            gram /= 2.0;  // sqrt(d_head) = 2
            CHECK(capture.attn_logits.data()[i * n + j] == doctest::Approx(gram).epsilon(1e-12));
        }

    // attention weights: row-softmax of the scaled gram over the causal keys
    for (int i = 0; i < n; ++i) {
        double mx = -1e300;
        for (int j = 0; j <= i; ++j)
            mx = std::max(mx, capture.total.data()[i * n + j]);
        double denom = 0;
        for (int j = 0; j <= i; ++j) denom += std::exp(capture.total.data()[i * n + j] - mx);
        for (int j = 0; j <= i; ++j) {
            double expect = std::exp(capture.total.data()[i * n + j] - mx) / denom;
            CHECK(expect >= 0.0);
            CHECK(expect <= 1.0);
        }
        (void)denom;
    }
}

TEST_CASE("forward produces the declared logits shape and near-uniform initial loss") {
    ModelConfig cfg = tiny_config(PeKind::sinusoidal_ape);
    cfg.vocab_size = 32;
    Model model(cfg, 3);
    std::vector<int> tokens = random_tokens(2 * 16, 32, 5);
    Tensor logits = model.forward(tokens, 2, 16);
    REQUIRE(logits.shape() == std::vector<int>{2, 16, 32});

    std::vector<int> targets = random_tokens(2 * 16, 32, 6);
    std::vector<std::uint8_t> mask(targets.size(), 1);
    double loss = cross_entropy(logits, targets, mask).value();
    double uniform = std::log(32.0);
    CHECK(loss > uniform * 0.85);
    CHECK(loss < uniform * 1.15);
}

TEST_CASE("causal masking: future tokens never leak into past logits") {
    for (PeKind kind : {PeKind::nope, PeKind::sinusoidal_ape, PeKind::learned_ape, PeKind::rope,
                        PeKind::randomized_rope, PeKind::t5_bias, PeKind::alibi, PeKind::kerple,
                        PeKind::fire}) {
        ModelConfig cfg = tiny_config(kind, false);
        Model model(cfg, 11);
        const int n = 8;
        std::vector<int> tokens = random_tokens(n, cfg.vocab_size, 7);
        std::vector<int> fixed_pos = identity_positions(n);
        ForwardCtx ctx;
        if (kind == PeKind::randomized_rope) ctx.positions = &fixed_pos;
        Tensor base = model.forward(tokens, 1, n, ctx);
        for (int t = 0; t + 1 < n; ++t) {
            std::vector<int> perturbed = tokens;
            perturbed[t + 1] = (perturbed[t + 1] + 3) % cfg.vocab_size;
            Tensor other = model.forward(perturbed, 1, n, ctx);
            for (int i = 0; i <= t; ++i)
                for (int v = 0; v < cfg.vocab_size; ++v)
                    CHECK(base.data()[i * cfg.vocab_size + v] ==
                          other.data()[i * cfg.vocab_size + v]);
        }
    }
}

TEST_CASE("adaptive wrapper with zeroed mlp is bit-identical to the static model") {
    ModelConfig dape_cfg = tiny_config(PeKind::kerple, true);
    ModelConfig plain_cfg = tiny_config(PeKind::kerple, false);
    Model adaptive(dape_cfg, 21);
    Model plain(plain_cfg, 21);

    // name-keyed init makes the shared parameters identical under one seed
    for (std::size_t i = 0; i < plain.parameter_names().size(); ++i) {
        const std::string& name = plain.parameter_names()[i];
        Tensor a = adaptive.param(name);
        Tensor b = plain.parameters()[i];
        REQUIRE(a.shape() == b.shape());
        for (std::size_t c = 0; c < a.numel(); ++c) CHECK(a.data()[c] == b.data()[c]);
    }

    for (int layer = 0; layer < dape_cfg.layers; ++layer) {
        std::string p = "layers." + std::to_string(layer) + ".dape.";
        for (const char* suffix : {"w1", "b1", "w2", "b2"})
            for (double& v : adaptive.param(p + suffix).data()) v = 0.0;
    }

    std::vector<int> tokens = random_tokens(10, dape_cfg.vocab_size, 9);
    Tensor a = adaptive.forward(tokens, 1, 10);
    Tensor b = plain.forward(tokens, 1, 10);
    for (std::size_t i = 0; i < a.numel(); ++i)
        CHECK(std::abs(a.data()[i] - b.data()[i]) <= 1e-12);
}

TEST_CASE("adaptive parameter overhead is exactly the four mlp tensors") {
    ModelConfig dape_cfg = tiny_config(PeKind::kerple, true);
    dape_cfg.pe.dape_hidden = 5;
    ModelConfig plain_cfg = tiny_config(PeKind::kerple, false);
    Model adaptive(dape_cfg, 2);
    Model plain(plain_cfg, 2);

    std::vector<std::string> extra;
    for (const auto& name : adaptive.parameter_names())
        if (!plain.has_param(name)) extra.push_back(name);
    REQUIRE(extra.size() == static_cast<std::size_t>(4 * dape_cfg.layers));
    const int in_ch = 2 * dape_cfg.heads, D = 5, h = dape_cfg.heads;
    for (int layer = 0; layer < dape_cfg.layers; ++layer) {
        std::string p = "layers." + std::to_string(layer) + ".dape.";
        CHECK(adaptive.param(p + "w1").numel() == static_cast<std::size_t>(in_ch * D));
        CHECK(adaptive.param(p + "b1").numel() == static_cast<std::size_t>(D));
        CHECK(adaptive.param(p + "w2").numel() == static_cast<std::size_t>(D * h));
        CHECK(adaptive.param(p + "b2").numel() == static_cast<std::size_t>(h));
    }
}

TEST_CASE("every encoding except learned positions accepts lengths beyond training") {
    for (PeKind kind : {PeKind::nope, PeKind::sinusoidal_ape, PeKind::rope, PeKind::randomized_rope,
                        PeKind::t5_bias, PeKind::alibi, PeKind::kerple, PeKind::fire}) {
        ModelConfig cfg = tiny_config(kind);
        Model model(cfg, 31);
        const int n = cfg.max_train_len + 8;
        std::vector<int> tokens = random_tokens(n, cfg.vocab_size, 13);
        CHECK_NOTHROW(model.forward(tokens, 1, n));
    }
    ModelConfig cfg = tiny_config(PeKind::learned_ape);
    Model model(cfg, 31);
    std::vector<int> tokens = random_tokens(cfg.max_train_len + 1, cfg.vocab_size, 13);
    CHECK_THROWS_WITH_AS(model.forward(tokens, 1, cfg.max_train_len + 1),
                         doctest::Contains("unsupported length"), std::runtime_error);
}

TEST_CASE("static bias is input independent while the adaptive correction adapts") {
    ModelConfig cfg = tiny_config(PeKind::kerple, true);
    Model model(cfg, 41);
    const int n = 9;
    std::vector<int> t1 = random_tokens(n, cfg.vocab_size, 1);
    std::vector<int> t2 = random_tokens(n, cfg.vocab_size, 2);
    REQUIRE(t1 != t2);

    AttnCapture c1, c2;
    ForwardCtx ctx1, ctx2;
    ctx1.capture = &c1;
    ctx2.capture = &c2;
    model.forward(t1, 1, n, ctx1);
    model.forward(t2, 1, n, ctx2);

    for (std::size_t i = 0; i < c1.static_bias.numel(); ++i)
        CHECK(c1.static_bias.data()[i] == c2.static_bias.data()[i]);

    bool differs = false;
    for (int h = 0; h < cfg.heads && !differs; ++h)
        for (int i = 0; i < n && !differs; ++i)
            for (int j = 0; j <= i && !differs; ++j) {
                std::size_t cell = (std::size_t(h) * n + i) * n + j;
                differs = c1.correction.data()[cell] != c2.correction.data()[cell];
            }
    CHECK(differs);
}

TEST_CASE("token ids outside the vocabulary are an index error") {
    Model model(tiny_config(PeKind::nope), 1);
    std::vector<int> tokens{0, 1, 99};
    CHECK_THROWS_WITH_AS(model.forward(tokens, 1, 3), doctest::Contains("index error"),
                         std::runtime_error);
}

TEST_CASE("construction is deterministic given the seed") {
    ModelConfig cfg = tiny_config(PeKind::fire, true);
    Model a(cfg, 77), b(cfg, 77);
    REQUIRE(a.parameter_names() == b.parameter_names());
    for (std::size_t p = 0; p < a.parameters().size(); ++p)
        for (std::size_t i = 0; i < a.parameters()[p].numel(); ++i)
            CHECK(a.parameters()[p].data()[i] == b.parameters()[p].data()[i]);

    std::vector<int> tokens = random_tokens(7, cfg.vocab_size, 3);
    Tensor la = a.forward(tokens, 1, 7);
    Tensor lb = b.forward(tokens, 1, 7);
    for (std::size_t i = 0; i < la.numel(); ++i) CHECK(la.data()[i] == lb.data()[i]);
}

TEST_CASE("dape cannot wrap a non-additive encoding") {
    ModelConfig cfg = tiny_config(PeKind::rope, true);
    CHECK_THROWS_WITH_AS(Model(cfg, 1), doctest::Contains("additive"), std::runtime_error);
    ModelConfig odd = tiny_config(PeKind::nope);
    odd.d_model = 15;
    CHECK_THROWS_WITH_AS(Model(odd, 1), doctest::Contains("divisible"), std::runtime_error);
}

TEST_CASE("encoder placeholder forward: appended slots, bidirectional flow") {
    TaskVocab vocab = task_vocab(TaskId::reverse_string);
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.d_model = 16;
    cfg.vocab_size = vocab.size();
    cfg.max_train_len = 32;
    cfg.mode = ModelMode::encoder_placeholder;
    cfg.placeholder_id = vocab.placeholder_id;
    cfg.pe.kind = PeKind::kerple;
    Model model(cfg, 5);

    // "aabba" reversed needs exactly five placeholder slots
    std::vector<int> input{vocab.id_of("a"), vocab.id_of("a"), vocab.id_of("b"), vocab.id_of("b"),
                           vocab.id_of("a")};
    Tensor logits = encoder_placeholder_forward(model, input, 5);
    REQUIRE(logits.shape() == std::vector<int>{1, 10, vocab.size()});

    CHECK_THROWS_WITH_AS(encoder_placeholder_forward(model, input, 0), doctest::Contains("contract"),
                         std::runtime_error);

    // bidirectionality: changing the last input token can move the first
    // placeholder's logits
    std::vector<int> flipped = input;
    flipped[4] = vocab.id_of("b");
    Tensor other = encoder_placeholder_forward(model, flipped, 5);
    bool moved = false;
    for (int v = 0; v < vocab.size() && !moved; ++v)
        moved = logits.data()[5 * vocab.size() + v] != other.data()[5 * vocab.size() + v];
    CHECK(moved);
}

TEST_CASE("padded encoder batches leave real positions untouched") {
    TaskVocab vocab = task_vocab(TaskId::reverse_string);
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.d_model = 16;
    cfg.vocab_size = vocab.size();
    cfg.max_train_len = 32;
    cfg.mode = ModelMode::encoder_placeholder;
    cfg.placeholder_id = vocab.placeholder_id;
    cfg.pe.kind = PeKind::alibi;
    Model model(cfg, 9);

    std::vector<int> seq{vocab.id_of("a"), vocab.id_of("b"), vocab.placeholder_id,
                         vocab.placeholder_id};
    const int real = static_cast<int>(seq.size());

    std::vector<std::uint8_t> tight = padded_attn_mask({real}, real, cfg.heads, false);
    ForwardCtx ctx_tight;
    ctx_tight.attn_mask = &tight;
    Tensor base = model.forward(seq, 1, real, ctx_tight);

    std::vector<int> padded = seq;
    padded.push_back(vocab.pad_id);
    padded.push_back(vocab.pad_id);
    std::vector<std::uint8_t> loose =
        padded_attn_mask({real}, real + 2, cfg.heads, false);
    ForwardCtx ctx_loose;
    ctx_loose.attn_mask = &loose;
    Tensor wide = model.forward(padded, 1, real + 2, ctx_loose);

    for (int i = 0; i < real; ++i)
        for (int v = 0; v < cfg.vocab_size; ++v)
            CHECK(base.data()[i * cfg.vocab_size + v] ==
                  doctest::Approx(wide.data()[i * cfg.vocab_size + v]).epsilon(1e-12));
}

TEST_CASE("checkpoint round trip is exact after float32 quantization") {
    TmpDir tmp("ckpt");
    ModelConfig cfg = tiny_config(PeKind::kerple, true);
    Model model(cfg, 51);
    std::string path = tmp.path + "/model.bin";
    save_checkpoint(model, path);

    Model loaded = load_checkpoint(path);
    REQUIRE(loaded.parameter_names() == model.parameter_names());
    for (std::size_t p = 0; p < model.parameters().size(); ++p) {
        const auto& orig = model.parameters()[p].data();
        const auto& back = loaded.parameters()[p].data();
        for (std::size_t i = 0; i < orig.size(); ++i)
            CHECK(back[i] == static_cast<double>(static_cast<float>(orig[i])));
    }

    // saving the loaded model again reproduces the payload bit for bit
    std::string path2 = tmp.path + "/model2.bin";
    save_checkpoint(loaded, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
}

TEST_CASE("corrupt and mismatched checkpoints are rejected with clear errors") {
    TmpDir tmp("ckpt_bad");
    ModelConfig cfg = tiny_config(PeKind::kerple, false);
    Model model(cfg, 3);
    std::string path = tmp.path + "/model.bin";
    save_checkpoint(model, path);

    // truncation
    {
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::ofstream out(tmp.path + "/short.bin", std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(tmp.path + "/short.bin"),
                         doctest::Contains("corrupt checkpoint"), std::runtime_error);

    // bad magic
    {
        std::ofstream out(tmp.path + "/junk.bin", std::ios::binary);
        out << "NOTACKPTxxxxxxxxxxxxxxxx";
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(tmp.path + "/junk.bin"), doctest::Contains("magic"),
                         std::runtime_error);

    // loading a static checkpoint into an adaptive config names the gap
    ModelConfig dape_cfg = tiny_config(PeKind::kerple, true);
    Model adaptive(dape_cfg, 3);
    CHECK_THROWS_WITH_AS(load_checkpoint_params(adaptive, path), doctest::Contains("dape"),
                         std::runtime_error);
}

TEST_CASE("end-to-end gradients match finite differences on a small adaptive model") {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.d_model = 8;
    cfg.vocab_size = 7;
    cfg.max_train_len = 8;
    cfg.pe.kind = PeKind::kerple;
    cfg.pe.dape = true;
    cfg.pe.dape_hidden = 3;
    Model model(cfg, 61);

    const int n = 5;
    std::vector<int> tokens = random_tokens(n, cfg.vocab_size, 4);
    std::vector<int> targets = random_tokens(n, cfg.vocab_size, 5);
    std::vector<std::uint8_t> mask(targets.size(), 1);

    auto taped = [&] {
        Tensor logits = model.forward(tokens, 1, n);
        return cross_entropy(logits, targets, mask);
    };
    auto plain = [&] {
        Tensor logits = model.forward(tokens, 1, n);
        return cross_entropy(logits, targets, mask).value();
    };
    auto result = dape::testing::gradcheck(model.parameters(), model.parameter_names(), taped, plain);
    INFO("worst parameter: ", result.worst_param, "[", result.worst_index, "] tape ",
         result.tape_grad, " fd ", result.fd_grad);
    CHECK(result.max_rel_error < 1e-4);
}
