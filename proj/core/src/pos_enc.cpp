#include "dape/pos_enc.hpp"

#include <cmath>
#include <stdexcept>

namespace dape {

PeKind pe_kind_from_name(const std::string& name) {
    if (name == "nope") return PeKind::nope;
    if (name == "sinusoidal_ape") return PeKind::sinusoidal_ape;
    if (name == "learned_ape") return PeKind::learned_ape;
    if (name == "rope") return PeKind::rope;
    if (name == "randomized_rope") return PeKind::randomized_rope;
    if (name == "t5_bias") return PeKind::t5_bias;
    if (name == "alibi") return PeKind::alibi;
    if (name == "kerple") return PeKind::kerple;
    if (name == "fire") return PeKind::fire;
    throw std::runtime_error("config error: unknown positional encoding '" + name + "'");
}

std::string pe_kind_name(PeKind kind) {
    switch (kind) {
        case PeKind::nope: return "nope";
        case PeKind::sinusoidal_ape: return "sinusoidal_ape";
        case PeKind::learned_ape: return "learned_ape";
        case PeKind::rope: return "rope";
        case PeKind::randomized_rope: return "randomized_rope";
        case PeKind::t5_bias: return "t5_bias";
        case PeKind::alibi: return "alibi";
        case PeKind::kerple: return "kerple";
        case PeKind::fire: return "fire";
    }
    throw std::runtime_error("config error: bad pe kind");
}

DapeVariant dape_variant_from_name(const std::string& name) {
    if (name == "add_residual") return DapeVariant::add_residual;
    if (name == "concate") return DapeVariant::concate;
    if (name == "concate_residual") return DapeVariant::concate_residual;
    throw std::runtime_error("config error: unknown dape variant '" + name + "'");
}

std::string dape_variant_name(DapeVariant v) {
    switch (v) {
        case DapeVariant::add_residual: return "add_residual";
        case DapeVariant::concate: return "concate";
        case DapeVariant::concate_residual: return "concate_residual";
    }
    throw std::runtime_error("config error: bad dape variant");
}

bool is_additive_bias(PeKind kind) {
    return kind == PeKind::t5_bias || kind == PeKind::alibi || kind == PeKind::kerple ||
           kind == PeKind::fire;
}

Tensor sinusoidal_ape(int n, int d_model) {
    if (d_model % 2 != 0)
        throw std::runtime_error("config error: sinusoidal encoding needs an even model dimension");
    Tensor out = Tensor::zeros({n, d_model});
    for (int pos = 0; pos < n; ++pos) {
        double* row = out.data().data() + std::size_t(pos) * d_model;
        for (int i = 0; i < d_model / 2; ++i) {
            double freq = std::pow(10000.0, -2.0 * i / d_model);
            row[2 * i] = std::sin(pos * freq);
            row[2 * i + 1] = std::cos(pos * freq);
        }
    }
    return out;
}

std::vector<double> default_alibi_slopes(int heads) {
    std::vector<double> slopes(heads);
    for (int k = 1; k <= heads; ++k) slopes[k - 1] = std::pow(2.0, -8.0 * k / heads);
    return slopes;
}

Tensor alibi_bias(int n, const std::vector<double>& slopes) {
    int heads = static_cast<int>(slopes.size());
    for (double s : slopes)
        if (s <= 0.0) throw std::runtime_error("config error: alibi slopes must be positive");
    Tensor out = Tensor::zeros({heads, n, n});
    for (int h = 0; h < heads; ++h) {
        double* plane = out.data().data() + std::size_t(h) * n * n;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) plane[std::size_t(i) * n + j] = -slopes[h] * std::abs(i - j);
    }
    return out;
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double softplus_inverse(double y) {
    // solves softplus(x) = y for y > 0
    return y + std::log(-std::expm1(-y));
}

Tensor kerple_bias(int n, const Tensor& raw_r1, const Tensor& raw_r2) {
    if (raw_r1.rank() != 1 || raw_r2.rank() != 1 || raw_r1.shape() != raw_r2.shape())
        throw std::runtime_error("dimension error: kerple parameters must be equal-length vectors");
    int heads = raw_r1.shape()[0];
    bool rg = active_tape() && (raw_r1.requires_grad() || raw_r2.requires_grad());
    Tensor out = Tensor::zeros({heads, n, n}, rg);
    for (int h = 0; h < heads; ++h) {
        double r1 = softplus(raw_r1.data()[h]);
        double r2 = softplus(raw_r2.data()[h]);
        double* plane = out.data().data() + std::size_t(h) * n * n;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                double dist = std::abs(i - j);
                plane[std::size_t(i) * n + j] = -r1 * std::log1p(r2 * dist);
            }
    }
    if (rg) {
        auto r1n = raw_r1.node(), r2n = raw_r2.node(), on = out.node();
        active_tape()->record([r1n, r2n, on, heads, n] {
            if (on->grad.empty()) return;
            if (r1n->requires_grad) r1n->ensure_grad();
            if (r2n->requires_grad) r2n->ensure_grad();
            for (int h = 0; h < heads; ++h) {
                double raw1 = r1n->data[h], raw2 = r2n->data[h];
                double r1 = softplus(raw1), r2 = softplus(raw2);
                double sig1 = 1.0 / (1.0 + std::exp(-raw1));
                double sig2 = 1.0 / (1.0 + std::exp(-raw2));
                const double* g = on->grad.data() + std::size_t(h) * n * n;
                double acc1 = 0.0, acc2 = 0.0;
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j) {
                        double dist = std::abs(i - j);
                        double gv = g[std::size_t(i) * n + j];
                        acc1 += gv * -std::log1p(r2 * dist);
                        acc2 += gv * -r1 * dist / (1.0 + r2 * dist);
                    }
                if (r1n->requires_grad) r1n->grad[h] += acc1 * sig1;
                if (r2n->requires_grad) r2n->grad[h] += acc2 * sig2;
            }
        });
    }
    return out;
}

int t5_bucket(int distance, int num_buckets, int max_distance) {
    if (num_buckets < 2 || max_distance <= num_buckets)
        throw std::runtime_error("config error: t5 bias needs num_buckets >= 2 and max_distance > num_buckets");
    if (distance < 0) distance = -distance;
    int max_exact = num_buckets / 2;
    if (distance < max_exact) return distance;
    double scaled = std::log(static_cast<double>(distance) / max_exact) /
                    std::log(static_cast<double>(max_distance) / max_exact) *
                    (num_buckets - max_exact);
    int bucket = max_exact + static_cast<int>(scaled);
    return std::min(bucket, num_buckets - 1);
}

Tensor t5_bucket_bias(int n, int num_buckets, int max_distance, const Tensor& table) {
    if (table.rank() != 2 || table.shape()[1] != num_buckets)
        throw std::runtime_error("dimension error: t5 table must be [heads x num_buckets]");
    int heads = table.shape()[0];
    std::vector<int> bucket_of(n);
    for (int d = 0; d < n; ++d) bucket_of[d] = t5_bucket(d, num_buckets, max_distance);
    bool rg = active_tape() && table.requires_grad();
    Tensor out = Tensor::zeros({heads, n, n}, rg);
    for (int h = 0; h < heads; ++h) {
        const double* row = table.data().data() + std::size_t(h) * num_buckets;
        double* plane = out.data().data() + std::size_t(h) * n * n;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                plane[std::size_t(i) * n + j] = row[bucket_of[std::abs(i - j)]];
    }
    if (rg) {
        auto tn = table.node(), on = out.node();
        active_tape()->record([tn, on, heads, n, num_buckets, bucket_of = std::move(bucket_of)] {
            if (on->grad.empty()) return;
            tn->ensure_grad();
            for (int h = 0; h < heads; ++h) {
                const double* g = on->grad.data() + std::size_t(h) * n * n;
                double* gt = tn->grad.data() + std::size_t(h) * num_buckets;
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j)
                        gt[bucket_of[std::abs(i - j)]] += g[std::size_t(i) * n + j];
            }
        });
    }
    return out;
}

FireParams init_fire(int heads, int hidden, int threshold, double leaky_slope, Rng& rng) {
    if (hidden < 1 || threshold < 1)
        throw std::runtime_error("config error: fire needs positive hidden width and threshold");
    FireParams p;
    double bound2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    p.w1 = Tensor::rand_uniform({1, hidden}, 1.0, rng, true);
    p.b1 = Tensor::rand_uniform({hidden}, 1.0, rng, true);
    p.w2 = Tensor::rand_uniform({hidden, heads}, bound2, rng, true);
    p.b2 = Tensor::rand_uniform({heads}, bound2, rng, true);
    p.raw_c = Tensor::from_data({1}, {softplus_inverse(1.0)}, true);
    p.threshold = threshold;
    p.leaky_slope = leaky_slope;
    return p;
}

Tensor fire_normalized_input(int n, const Tensor& raw_c, int threshold) {
    bool rg = active_tape() && raw_c.requires_grad();
    Tensor out = Tensor::zeros({n * n, 1}, rg);
    double c = softplus(raw_c.data()[0]);
    auto psi = [c](double x) { return std::log1p(c * x); };
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double dist = std::abs(i - j);
            double denom_arg = std::max({threshold, i, j});
            out.data()[std::size_t(i) * n + j] = psi(dist) / psi(denom_arg);
        }
    if (rg) {
        auto cn = raw_c.node(), on = out.node();
        active_tape()->record([cn, on, n, threshold] {
            if (on->grad.empty()) return;
            cn->ensure_grad();
            double raw = cn->data[0];
            double c = softplus(raw);
            double sig = 1.0 / (1.0 + std::exp(-raw));
            double acc = 0.0;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    double dist = std::abs(i - j);
                    double m = std::max({static_cast<double>(threshold), static_cast<double>(i),
                                         static_cast<double>(j)});
                    double pd = std::log1p(c * dist), pm = std::log1p(c * m);
                    // d/dc [pd/pm]
                    double dpd = dist / (c * dist + 1.0), dpm = m / (c * m + 1.0);
                    double du = (dpd * pm - pd * dpm) / (pm * pm);
                    acc += on->grad[std::size_t(i) * n + j] * du;
                }
            cn->grad[0] += acc * sig;
        });
    }
    return out;
}

Tensor fire_bias(int n, const FireParams& params) {
    Tensor u = fire_normalized_input(n, params.raw_c, params.threshold);
    Tensor h = leaky_relu(add_bcast(matmul(u, params.w1), params.b1), params.leaky_slope);
    Tensor rows = add_bcast(matmul(h, params.w2), params.b2);  // [n*n x heads]
    Tensor planes = unstack_channels(rows, 1, n, n);           // [1 x heads x n x n]
    int heads = params.w2.shape()[1];
    return reshape(planes, {heads, n, n});
}

std::vector<int> identity_positions(int n) {
    std::vector<int> out(n);
    for (int i = 0; i < n; ++i) out[i] = i;
    return out;
}

std::vector<int> sample_randomized_positions(int n, int pool, Rng& rng) {
    if (n > pool)
        throw std::runtime_error("config error: cannot draw " + std::to_string(n) +
                                 " distinct positions from a pool of " + std::to_string(pool));
    return rng.sample_without_replacement(n, pool);
}

DapeParams init_dape(int heads, int hidden, DapeVariant variant, double leaky_slope, bool bias_terms,
                     Rng& rng) {
    if (heads < 1) throw std::runtime_error("config error: dape needs at least one head");
    DapeParams p;
    p.variant = variant;
    p.heads = heads;
    p.hidden = hidden > 0 ? hidden : heads;
    p.leaky_slope = leaky_slope;
    p.bias_terms = bias_terms;
    int in_ch = p.in_channels();
    double bound1 = 1.0 / std::sqrt(static_cast<double>(in_ch));
    double bound2 = 1.0 / std::sqrt(static_cast<double>(p.hidden));
    p.w1 = Tensor::rand_uniform({in_ch, p.hidden}, bound1, rng, true);
    p.b1 = Tensor::zeros({p.hidden}, bias_terms);
    p.w2 = Tensor::rand_uniform({p.hidden, heads}, bound2, rng, true);
    p.b2 = Tensor::zeros({heads}, bias_terms);
    return p;
}

namespace {

void check_dape_shapes(const Tensor& attn_logits, const Tensor& bias, const DapeParams& params) {
    if (attn_logits.rank() != 4)
        throw std::runtime_error("dimension error: dape expects attention logits [B,h,n,n]");
    if (attn_logits.shape()[1] != params.heads)
        throw std::runtime_error("config error: dape head count " + std::to_string(params.heads) +
                                 " does not match attention heads " +
                                 std::to_string(attn_logits.shape()[1]));
    if (bias.rank() != 3 || bias.shape()[0] != params.heads)
        throw std::runtime_error("config error: dape bias head count mismatch");
}

}  // namespace

Tensor dape_correction(const Tensor& attn_logits, const Tensor& bias, const DapeParams& params) {
    check_dape_shapes(attn_logits, bias, params);
    Tensor b1 = params.bias_terms ? params.b1 : Tensor();
    Tensor b2 = params.bias_terms ? params.b2 : Tensor();
    if (params.variant == DapeVariant::add_residual)
        return cell_mlp(add_bcast(attn_logits, bias), Tensor(), params.w1, b1, params.w2, b2,
                        params.leaky_slope);
    return cell_mlp(attn_logits, bias, params.w1, b1, params.w2, b2, params.leaky_slope);
}

Tensor dape_apply(const Tensor& attn_logits, const Tensor& bias, const DapeParams& params) {
    Tensor f = dape_correction(attn_logits, bias, params);
    if (params.variant == DapeVariant::concate) return add(attn_logits, f);
    return add(add_bcast(attn_logits, bias), f);
}

}  // namespace dape
