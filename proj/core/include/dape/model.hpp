#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dape/pos_enc.hpp"
#include "dape/tensor.hpp"

namespace dape {

enum class ModelMode { causal_lm, encoder_placeholder };

ModelMode model_mode_from_name(const std::string& name);
std::string model_mode_name(ModelMode mode);

struct PeConfig {
    PeKind kind = PeKind::nope;
    bool dape = false;
    DapeVariant dape_variant = DapeVariant::concate_residual;
    int dape_hidden = 0;  // 0 selects the head count
    bool dape_shared = false;
    bool dape_bias_terms = true;
    double leaky_slope = 0.01;
    std::vector<double> alibi_slopes;  // empty selects the geometric default
    double rope_theta = 10000.0;
    int rrope_factor = 4;
    int rrope_pool = 0;  // 0 resolves to rrope_factor * training length
    int t5_num_buckets = 32;
    int t5_max_distance = 128;
    int fire_hidden = 32;
    int fire_threshold = 0;  // 0 selects the training length
    double kerple_init_r1 = 1.0;
    double kerple_init_r2 = 1.0;

    // "kerple", "dape_kerple", ...
    std::string display_name() const;
};

struct ModelConfig {
    int layers = 2;
    int heads = 4;
    int d_model = 64;
    int vocab_size = 257;
    int max_train_len = 64;
    int ffn_mult = 4;
    ModelMode mode = ModelMode::causal_lm;
    double dropout = 0.0;
    bool tie_embeddings = false;
    bool scale_before_pe = true;  // scale QK^T by 1/sqrt(d_head) before the bias is applied
    int placeholder_id = -1;      // encoder mode: reserved token appended for answer slots
    PeConfig pe;

    int d_head() const { return d_model / heads; }
    void validate() const;
};

// Numeric substrate of one attention layer's pre-softmax logits, filled
// on request (bias dumps, adaptivity checks).
struct AttnCapture {
    int layer = 0;
    Tensor attn_logits;  // [B,h,n,n]
    Tensor static_bias;  // [h,n,n]; undefined for rope/nope
    Tensor correction;   // [B,h,n,n]; undefined unless the adaptive wrapper is on
    Tensor total;        // [B,h,n,n] pre-mask logits fed to softmax
};

struct ForwardCtx {
    // keep-mask covering [n*n] (shared) or [B*h*n*n]; nullptr derives the
    // default from the model mode (causal / full)
    const std::vector<std::uint8_t>* attn_mask = nullptr;
    // rope position ids; nullptr selects 0..n-1
    const std::vector<int>* positions = nullptr;
    Rng* dropout_rng = nullptr;
    AttnCapture* capture = nullptr;
};

std::vector<std::uint8_t> causal_mask(int n);
// per-example key-validity mask expanded over heads; keep(b,h,i,j) =
// j < valid[b] and (causal ? j <= i : true)
std::vector<std::uint8_t> padded_attn_mask(const std::vector<int>& valid_lengths, int seq_len,
                                           int heads, bool causal);

class Model {
public:
    Model(ModelConfig cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }

    // tokens laid out row-major [batch x seq_len] -> logits [batch x seq_len x vocab]
    Tensor forward(const std::vector<int>& tokens, int batch, int seq_len,
                   const ForwardCtx& ctx = {});

    std::vector<Tensor>& parameters() { return params_; }
    const std::vector<Tensor>& parameters() const { return params_; }
    const std::vector<std::string>& parameter_names() const { return param_names_; }
    Tensor param(const std::string& name) const;  // throws when absent
    bool has_param(const std::string& name) const;

private:
    struct Layer {
        Tensor ln1_g, ln1_b, ln2_g, ln2_b;
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
        Tensor kerple_raw_r1, kerple_raw_r2;
        Tensor t5_table;
        FireParams fire;
        DapeParams dape;
    };

    Rng param_rng(const std::string& name) const;
    Tensor register_param(const std::string& name, Tensor t);
    Tensor build_bias(const Layer& layer, int n) const;
    Tensor attention(const Tensor& x, const Layer& layer, int layer_idx, int batch, int n,
                     const ForwardCtx& ctx);

    ModelConfig cfg_;
    std::uint64_t seed_;
    Tensor tok_embedding_;
    Tensor ape_table_;  // learned absolute positions, [max_train_len x d]
    std::vector<Layer> layers_;
    DapeParams shared_dape_;
    Tensor final_ln_g_, final_ln_b_;
    Tensor head_w_, head_b_;
    std::vector<Tensor> params_;
    std::vector<std::string> param_names_;
};

// Appends answer_length placeholder tokens and runs the encoder with full
// bidirectional attention; logits cover the whole extended sequence.
Tensor encoder_placeholder_forward(Model& model, const std::vector<int>& input_tokens,
                                   int answer_length, AttnCapture* capture = nullptr);

// ---- checkpointing (float32 payloads, written atomically) ----
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);
// strict by-name/by-shape load into an existing model
void load_checkpoint_params(Model& model, const std::string& path);

}  // namespace dape
