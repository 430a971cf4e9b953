#include "dape/model.hpp"

#include <cmath>
#include <stdexcept>

#include "dape/ops.hpp"

namespace dape {

ModelMode model_mode_from_name(const std::string& name) {
    if (name == "causal_lm") return ModelMode::causal_lm;
    if (name == "encoder_placeholder") return ModelMode::encoder_placeholder;
    throw std::runtime_error("config error: unknown model mode '" + name + "'");
}

std::string model_mode_name(ModelMode mode) {
    return mode == ModelMode::causal_lm ? "causal_lm" : "encoder_placeholder";
}

std::string PeConfig::display_name() const {
    return dape ? "dape_" + pe_kind_name(kind) : pe_kind_name(kind);
}

void ModelConfig::validate() const {
    if (layers < 1 || heads < 1 || d_model < 1 || vocab_size < 2 || max_train_len < 1)
        throw std::runtime_error("config error: model dimensions must be positive");
    if (d_model % heads != 0)
        throw std::runtime_error("config error: d_model " + std::to_string(d_model) +
                                 " not divisible by heads " + std::to_string(heads));
    if (ffn_mult < 1) throw std::runtime_error("config error: ffn_mult must be positive");
    if (dropout < 0.0 || dropout >= 1.0)
        throw std::runtime_error("config error: dropout must be in [0,1)");
    if (pe.dape && !is_additive_bias(pe.kind))
        throw std::runtime_error("config error: dape requires an additive bias encoding "
                                 "(alibi, kerple, fire, t5_bias), got '" +
                                 pe_kind_name(pe.kind) + "'");
}

std::vector<std::uint8_t> causal_mask(int n) {
    std::vector<std::uint8_t> mask(std::size_t(n) * n, 0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) mask[std::size_t(i) * n + j] = 1;
    return mask;
}

std::vector<std::uint8_t> padded_attn_mask(const std::vector<int>& valid_lengths, int seq_len,
                                           int heads, bool causal) {
    int batch = static_cast<int>(valid_lengths.size());
    std::vector<std::uint8_t> mask(std::size_t(batch) * heads * seq_len * seq_len, 0);
    for (int b = 0; b < batch; ++b) {
        int valid = valid_lengths[b];
        for (int h = 0; h < heads; ++h) {
            std::uint8_t* plane =
                mask.data() + ((std::size_t(b) * heads + h) * seq_len) * seq_len;
            for (int i = 0; i < seq_len; ++i)
                for (int j = 0; j < valid && (!causal || j <= i); ++j)
                    plane[std::size_t(i) * seq_len + j] = 1;
            // queries before any valid key (causal rows past the data) still
            // need one live entry; point them at key 0
            if (causal)
                for (int i = 0; i < seq_len; ++i) {
                    bool any = false;
                    for (int j = 0; j < seq_len; ++j) any |= plane[std::size_t(i) * seq_len + j] != 0;
                    if (!any) plane[std::size_t(i) * seq_len] = 1;
                }
        }
    }
    return mask;
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace

Rng Model::param_rng(const std::string& name) const {
    // every parameter draws from its own name-keyed stream so that two
    // configs sharing a parameter initialize it identically under one seed
    return Rng(seed_).fork(fnv1a(name));
}

Tensor Model::register_param(const std::string& name, Tensor t) {
    params_.push_back(t);
    param_names_.push_back(name);
    return t;
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed) {
    cfg_.validate();
    if (cfg_.mode == ModelMode::encoder_placeholder &&
        (cfg_.placeholder_id < 0 || cfg_.placeholder_id >= cfg_.vocab_size))
        throw std::runtime_error("config error: encoder_placeholder mode needs a placeholder_id "
                                 "inside the vocabulary");
    const int d = cfg_.d_model;
    const int ffn = cfg_.ffn_mult * d;
    const double wstd = 0.02;

    auto normal_param = [&](const std::string& name, std::vector<int> shape) {
        Rng r = param_rng(name);
        return register_param(name, Tensor::randn(std::move(shape), wstd, r, true));
    };
    auto const_param = [&](const std::string& name, std::vector<int> shape, double v) {
        return register_param(name, Tensor::full(std::move(shape), v, true));
    };

    tok_embedding_ = normal_param("embedding.token", {cfg_.vocab_size, d});
    if (cfg_.pe.kind == PeKind::learned_ape)
        ape_table_ = normal_param("embedding.position", {cfg_.max_train_len, d});

    if (cfg_.pe.dape && cfg_.pe.dape_shared) {
        Rng r = param_rng("dape");
        shared_dape_ = init_dape(cfg_.heads, cfg_.pe.dape_hidden, cfg_.pe.dape_variant,
                                 cfg_.pe.leaky_slope, cfg_.pe.dape_bias_terms, r);
        register_param("dape.w1", shared_dape_.w1);
        if (cfg_.pe.dape_bias_terms) register_param("dape.b1", shared_dape_.b1);
        register_param("dape.w2", shared_dape_.w2);
        if (cfg_.pe.dape_bias_terms) register_param("dape.b2", shared_dape_.b2);
    }

    layers_.resize(cfg_.layers);
    for (int li = 0; li < cfg_.layers; ++li) {
        Layer& L = layers_[li];
        std::string p = "layers." + std::to_string(li) + ".";
        L.ln1_g = const_param(p + "attn.ln.gamma", {d}, 1.0);
        L.ln1_b = const_param(p + "attn.ln.beta", {d}, 0.0);
        L.wq = normal_param(p + "attn.wq", {d, d});
        L.bq = const_param(p + "attn.bq", {d}, 0.0);
        L.wk = normal_param(p + "attn.wk", {d, d});
        L.bk = const_param(p + "attn.bk", {d}, 0.0);
        L.wv = normal_param(p + "attn.wv", {d, d});
        L.bv = const_param(p + "attn.bv", {d}, 0.0);
        L.wo = normal_param(p + "attn.wo", {d, d});
        L.bo = const_param(p + "attn.bo", {d}, 0.0);

        switch (cfg_.pe.kind) {
            case PeKind::kerple: {
                double raw1 = softplus_inverse(cfg_.pe.kerple_init_r1);
                double raw2 = softplus_inverse(cfg_.pe.kerple_init_r2);
                L.kerple_raw_r1 = const_param(p + "pe.kerple.raw_r1", {cfg_.heads}, raw1);
                L.kerple_raw_r2 = const_param(p + "pe.kerple.raw_r2", {cfg_.heads}, raw2);
                break;
            }
            case PeKind::t5_bias: {
                Rng r = param_rng(p + "pe.t5.table");
                L.t5_table = register_param(
                    p + "pe.t5.table",
                    Tensor::randn({cfg_.heads, cfg_.pe.t5_num_buckets}, wstd, r, true));
                break;
            }
            case PeKind::fire: {
                Rng r = param_rng(p + "pe.fire");
                int threshold =
                    cfg_.pe.fire_threshold > 0 ? cfg_.pe.fire_threshold : cfg_.max_train_len;
                L.fire = init_fire(cfg_.heads, cfg_.pe.fire_hidden, threshold,
                                   cfg_.pe.leaky_slope, r);
                register_param(p + "pe.fire.w1", L.fire.w1);
                register_param(p + "pe.fire.b1", L.fire.b1);
                register_param(p + "pe.fire.w2", L.fire.w2);
                register_param(p + "pe.fire.b2", L.fire.b2);
                register_param(p + "pe.fire.raw_c", L.fire.raw_c);
                break;
            }
            default:
                break;
        }

        if (cfg_.pe.dape) {
            if (cfg_.pe.dape_shared) {
                L.dape = shared_dape_;
            } else {
                Rng r = param_rng(p + "dape");
                L.dape = init_dape(cfg_.heads, cfg_.pe.dape_hidden, cfg_.pe.dape_variant,
                                   cfg_.pe.leaky_slope, cfg_.pe.dape_bias_terms, r);
                register_param(p + "dape.w1", L.dape.w1);
                if (cfg_.pe.dape_bias_terms) register_param(p + "dape.b1", L.dape.b1);
                register_param(p + "dape.w2", L.dape.w2);
                if (cfg_.pe.dape_bias_terms) register_param(p + "dape.b2", L.dape.b2);
            }
        }

        L.ln2_g = const_param(p + "ffn.ln.gamma", {d}, 1.0);
        L.ln2_b = const_param(p + "ffn.ln.beta", {d}, 0.0);
        L.ffn_w1 = normal_param(p + "ffn.w1", {d, ffn});
        L.ffn_b1 = const_param(p + "ffn.b1", {ffn}, 0.0);
        L.ffn_w2 = normal_param(p + "ffn.w2", {ffn, d});
        L.ffn_b2 = const_param(p + "ffn.b2", {d}, 0.0);
    }

    final_ln_g_ = const_param("final_ln.gamma", {d}, 1.0);
    final_ln_b_ = const_param("final_ln.beta", {d}, 0.0);
    if (!cfg_.tie_embeddings) {
        head_w_ = normal_param("head.w", {d, cfg_.vocab_size});
        head_b_ = const_param("head.b", {cfg_.vocab_size}, 0.0);
    }
}

Tensor Model::param(const std::string& name) const {
    for (std::size_t i = 0; i < param_names_.size(); ++i)
        if (param_names_[i] == name) return params_[i];
    throw std::runtime_error("contract error: no parameter named '" + name + "'");
}

bool Model::has_param(const std::string& name) const {
    for (const auto& n : param_names_)
        if (n == name) return true;
    return false;
}

Tensor Model::build_bias(const Layer& layer, int n) const {
    switch (cfg_.pe.kind) {
        case PeKind::alibi: {
            auto slopes = cfg_.pe.alibi_slopes.empty() ? default_alibi_slopes(cfg_.heads)
                                                       : cfg_.pe.alibi_slopes;
            if (static_cast<int>(slopes.size()) != cfg_.heads)
                throw std::runtime_error("config error: alibi slope count must equal head count");
            return alibi_bias(n, slopes);
        }
        case PeKind::kerple:
            return kerple_bias(n, layer.kerple_raw_r1, layer.kerple_raw_r2);
        case PeKind::t5_bias:
            return t5_bucket_bias(n, cfg_.pe.t5_num_buckets, cfg_.pe.t5_max_distance,
                                  layer.t5_table);
        case PeKind::fire:
            return fire_bias(n, layer.fire);
        default:
            return Tensor();
    }
}

Tensor Model::attention(const Tensor& x, const Layer& layer, int layer_idx, int batch, int n,
                        const ForwardCtx& ctx) {
    const int heads = cfg_.heads;
    Tensor q = split_heads(add_bcast(matmul(x, layer.wq), layer.bq), heads);
    Tensor k = split_heads(add_bcast(matmul(x, layer.wk), layer.bk), heads);
    Tensor v = split_heads(add_bcast(matmul(x, layer.wv), layer.bv), heads);

    if (cfg_.pe.kind == PeKind::rope || cfg_.pe.kind == PeKind::randomized_rope) {
        std::vector<int> default_pos;
        const std::vector<int>* pos = ctx.positions;
        if (!pos) {
            default_pos = identity_positions(n);
            pos = &default_pos;
        }
        q = rope_rotate(q, *pos, cfg_.pe.rope_theta);
        k = rope_rotate(k, *pos, cfg_.pe.rope_theta);
    }

    Tensor attn = bmm_nt(q, k);
    if (cfg_.scale_before_pe) attn = scale(attn, 1.0 / std::sqrt(double(cfg_.d_head())));

    Tensor bias = build_bias(layer, n);
    Tensor logits;
    Tensor correction;
    if (cfg_.pe.dape) {
        correction = dape_correction(attn, bias, layer.dape);
        logits = layer.dape.variant == DapeVariant::concate
                     ? add(attn, correction)
                     : add(add_bcast(attn, bias), correction);
    } else if (bias.defined()) {
        logits = add_bcast(attn, bias);
    } else {
        logits = attn;
    }
    if (!cfg_.scale_before_pe) logits = scale(logits, 1.0 / std::sqrt(double(cfg_.d_head())));

    if (ctx.capture && ctx.capture->layer == layer_idx) {
        ctx.capture->attn_logits = attn;
        ctx.capture->static_bias = bias;
        ctx.capture->correction = correction;
        ctx.capture->total = logits;
    }

    Tensor probs;
    if (ctx.attn_mask) {
        probs = softmax_lastdim(logits, *ctx.attn_mask);
    } else if (cfg_.mode == ModelMode::causal_lm) {
        probs = softmax_lastdim(logits, causal_mask(n));
    } else {
        probs = softmax_lastdim(logits);
    }
    if (cfg_.dropout > 0.0 && ctx.dropout_rng) probs = dropout(probs, cfg_.dropout, *ctx.dropout_rng);

    Tensor mixed = merge_heads(bmm_nn(probs, v));
    (void)batch;
    return add_bcast(matmul(mixed, layer.wo), layer.bo);
}

Tensor Model::forward(const std::vector<int>& tokens, int batch, int seq_len,
                      const ForwardCtx& ctx) {
    if (static_cast<std::size_t>(batch) * seq_len != tokens.size())
        throw std::runtime_error("dimension error: expected " + std::to_string(batch * seq_len) +
                                 " tokens, got " + std::to_string(tokens.size()));
    Tensor h = embedding(tok_embedding_, tokens, batch, seq_len);
    if (cfg_.pe.kind == PeKind::sinusoidal_ape) {
        h = add_bcast(h, sinusoidal_ape(seq_len, cfg_.d_model));
    } else if (cfg_.pe.kind == PeKind::learned_ape) {
        if (seq_len > cfg_.max_train_len)
            throw std::runtime_error("unsupported length error: learned positions cover " +
                                     std::to_string(cfg_.max_train_len) + " slots, got sequence of " +
                                     std::to_string(seq_len));
        Tensor rows = embedding(ape_table_, identity_positions(seq_len), 1, seq_len);
        h = add_bcast(h, reshape(rows, {seq_len, cfg_.d_model}));
    }

    for (int li = 0; li < cfg_.layers; ++li) {
        const Layer& L = layers_[li];
        Tensor normed = layer_norm(h, L.ln1_g, L.ln1_b, 1e-5);
        h = add(h, attention(normed, L, li, batch, seq_len, ctx));
        Tensor normed2 = layer_norm(h, L.ln2_g, L.ln2_b, 1e-5);
        Tensor ff = add_bcast(matmul(normed2, L.ffn_w1), L.ffn_b1);
        ff = gelu(ff);
        ff = add_bcast(matmul(ff, L.ffn_w2), L.ffn_b2);
        if (cfg_.dropout > 0.0 && ctx.dropout_rng) ff = dropout(ff, cfg_.dropout, *ctx.dropout_rng);
        h = add(h, ff);
    }

    h = layer_norm(h, final_ln_g_, final_ln_b_, 1e-5);
    if (cfg_.tie_embeddings) return matmul_nt(h, tok_embedding_);
    return add_bcast(matmul(h, head_w_), head_b_);
}

Tensor encoder_placeholder_forward(Model& model, const std::vector<int>& input_tokens,
                                   int answer_length, AttnCapture* capture) {
    if (model.config().mode != ModelMode::encoder_placeholder)
        throw std::runtime_error("config error: placeholder forward needs encoder_placeholder mode");
    if (answer_length <= 0)
        throw std::runtime_error("contract error: answer_length must be positive");
    std::vector<int> tokens = input_tokens;
    tokens.insert(tokens.end(), static_cast<std::size_t>(answer_length),
                  model.config().placeholder_id);
    ForwardCtx ctx;
    ctx.capture = capture;
    return model.forward(tokens, 1, static_cast<int>(tokens.size()), ctx);
}

}  // namespace dape
