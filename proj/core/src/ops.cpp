#include "dape/ops.hpp"

#include <cblas.h>
#include <cmath>
#include <mutex>
#include <stdexcept>

extern "C" void openblas_set_num_threads(int);

namespace dape {

namespace {

using NodePtr = std::shared_ptr<Tensor::Node>;

// Each model instance is single-threaded; BLAS must not spawn its own
// worker pool or step results become schedule-dependent.
void pin_blas_single_thread() {
    static std::once_flag flag;
    std::call_once(flag, [] { openblas_set_num_threads(1); });
}

void dgemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k, double alpha,
           const double* a, int lda, const double* b, int ldb, double beta, double* c, int ldc) {
    pin_blas_single_thread();
    cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

bool taping(const Tensor& a) { return active_tape() != nullptr && a.requires_grad(); }
bool taping(const Tensor& a, const Tensor& b) { return taping(a) || taping(b); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::runtime_error(std::string("dimension error: ") + op + " expects equal shapes, got " +
                                 shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    bool rg = taping(a, b);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const std::size_t n = out.numel();
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (rg) {
        NodePtr an = a.node(), bn = b.node(), on = out.node();
        active_tape()->record([an, bn, on] {
            if (on->grad.empty()) return;
            const double* g = on->grad.data();
            const std::size_t n = on->grad.size();
            if (an->requires_grad) {
                an->ensure_grad();
                double* ga = an->grad.data();
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                double* gb = bn->grad.data();
                for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    bool rg = taping(a, b);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
    if (rg) {
        NodePtr an = a.node(), bn = b.node(), on = out.node();
        active_tape()->record([an, bn, on] {
            if (on->grad.empty()) return;
            const double* g = on->grad.data();
            const std::size_t n = on->grad.size();
            if (an->requires_grad) {
                an->ensure_grad();
                double* ga = an->grad.data();
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                double* gb = bn->grad.data();
                for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    bool rg = taping(a, b);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
    if (rg) {
        NodePtr an = a.node(), bn = b.node(), on = out.node();
        active_tape()->record([an, bn, on] {
            if (on->grad.empty()) return;
            const double* g = on->grad.data();
            const std::size_t n = on->grad.size();
            if (an->requires_grad) {
                an->ensure_grad();
                double* ga = an->grad.data();
                const double* db = bn->data.data();
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * db[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                double* gb = bn->grad.data();
                const double* da = an->data.data();
                for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * da[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double s) {
    bool rg = taping(a);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const double* pa = a.data().data();
    double* po = out.data().data();
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * s;
    if (rg) {
        NodePtr an = a.node(), on = out.node();
        active_tape()->record([an, on, s] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            const double* g = on->grad.data();
            double* ga = an->grad.data();
            for (std::size_t i = 0; i < on->grad.size(); ++i) ga[i] += g[i] * s;
        });
    }
    return out;
}

Tensor add_bcast(const Tensor& a, const Tensor& b) {
    if (b.rank() > a.rank())
        throw std::runtime_error("dimension error: add_bcast addend rank exceeds base rank");
    for (int i = 0; i < b.rank(); ++i) {
        if (b.shape()[b.rank() - 1 - i] != a.shape()[a.rank() - 1 - i])
            throw std::runtime_error("dimension error: add_bcast expects trailing shapes to match, got " +
                                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    bool rg = taping(a, b);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const std::size_t bn_count = b.numel();
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    const std::size_t total = out.numel();
    for (std::size_t base = 0; base < total; base += bn_count)
        for (std::size_t i = 0; i < bn_count; ++i) po[base + i] = pa[base + i] + pb[i];
    if (rg) {
        NodePtr an = a.node(), bn = b.node(), on = out.node();
        active_tape()->record([an, bn, on, bn_count] {
            if (on->grad.empty()) return;
            const double* g = on->grad.data();
            const std::size_t n = on->grad.size();
            if (an->requires_grad) {
                an->ensure_grad();
                double* ga = an->grad.data();
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                double* gb = bn->grad.data();
                for (std::size_t base = 0; base < n; base += bn_count)
                    for (std::size_t i = 0; i < bn_count; ++i) gb[i] += g[base + i];
            }
        });
    }
    return out;
}

Tensor leaky_relu(const Tensor& x, double slope) {
    if (!(slope > 0.0 && slope < 1.0))
        throw std::runtime_error("config error: leaky_relu slope must be in (0,1)");
    bool rg = taping(x);
    Tensor out = Tensor::zeros(x.shape(), rg);
    const double* px = x.data().data();
    double* po = out.data().data();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        double v = px[i];
        po[i] = v >= 0.0 ? v : slope * v;
    }
    if (rg) {
        NodePtr xn = x.node(), on = out.node();
        active_tape()->record([xn, on, slope] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            const double* g = on->grad.data();
            const double* dx = xn->data.data();
            double* gx = xn->grad.data();
            for (std::size_t i = 0; i < on->grad.size(); ++i)
                gx[i] += g[i] * (dx[i] >= 0.0 ? 1.0 : slope);
        });
    }
    return out;
}

Tensor gelu(const Tensor& x) {
    bool rg = taping(x);
    Tensor out = Tensor::zeros(x.shape(), rg);
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    const double* px = x.data().data();
    double* po = out.data().data();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        double v = px[i];
        po[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    if (rg) {
        NodePtr xn = x.node(), on = out.node();
        active_tape()->record([xn, on] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            constexpr double inv_sqrt_2pi = 0.3989422804014326779;
            const double* g = on->grad.data();
            const double* dx = xn->data.data();
            double* gx = xn->grad.data();
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                double v = dx[i];
                double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                gx[i] += g[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

Tensor dropout(const Tensor& x, double drop_prob, Rng& rng) {
    if (drop_prob < 0.0 || drop_prob >= 1.0)
        throw std::runtime_error("config error: dropout probability must be in [0,1)");
    if (drop_prob == 0.0) return x;
    bool rg = taping(x);
    Tensor out = Tensor::zeros(x.shape(), rg);
    double keep_scale = 1.0 / (1.0 - drop_prob);
    std::vector<double> mask(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        mask[i] = rng.uniform() < drop_prob ? 0.0 : keep_scale;
        out.data()[i] = x.data()[i] * mask[i];
    }
    if (rg) {
        NodePtr xn = x.node(), on = out.node();
        active_tape()->record([xn, on, mask = std::move(mask)] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i] * mask[i];
        });
    }
    return out;
}

Tensor sum_all(const Tensor& x) {
    bool rg = taping(x);
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor out = Tensor::from_data({1}, {s}, rg);
    if (rg) {
        NodePtr xn = x.node(), on = out.node();
        active_tape()->record([xn, on] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[0];
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, std::vector<int> new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw std::runtime_error("dimension error: reshape " + shape_str(x.shape()) + " to " +
                                 shape_str(new_shape) + " changes element count");
    bool rg = taping(x);
    Tensor out = Tensor::from_data(std::move(new_shape), x.data(), rg);
    if (rg) {
        NodePtr xn = x.node(), on = out.node();
        active_tape()->record([xn, on] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
        });
    }
    return out;
}

namespace {

void check_matmul(const Tensor& a, const Tensor& w, int k_expected, const char* op) {
    if (a.rank() < 1 || w.rank() != 2)
        throw std::runtime_error(std::string("dimension error: ") + op + " expects a matrix right operand");
    if (a.shape().back() != k_expected)
        throw std::runtime_error(std::string("dimension error: cannot ") + op + " " + shape_str(a.shape()) +
                                 " by " + shape_str(w.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& w) {
    check_matmul(a, w, w.rank() == 2 ? w.shape()[0] : -1, "matmul");
    int k = w.shape()[0], n = w.shape()[1];
    int rows = static_cast<int>(a.numel()) / k;
    std::vector<int> out_shape = a.shape();
    out_shape.back() = n;
    bool rg = taping(a, w);
    Tensor out = Tensor::zeros(std::move(out_shape), rg);
    dgemm(CblasNoTrans, CblasNoTrans, rows, n, k, 1.0, a.data().data(), k, w.data().data(), n, 0.0,
          out.data().data(), n);
    if (rg) {
        NodePtr an = a.node(), wn = w.node(), on = out.node();
        active_tape()->record([an, wn, on, rows, n, k] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                dgemm(CblasNoTrans, CblasTrans, rows, k, n, 1.0, on->grad.data(), n, wn->data.data(), n,
                      1.0, an->grad.data(), k);
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                dgemm(CblasTrans, CblasNoTrans, k, n, rows, 1.0, an->data.data(), k, on->grad.data(), n,
                      1.0, wn->grad.data(), n);
            }
        });
    }
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& w) {
    check_matmul(a, w, w.rank() == 2 ? w.shape()[1] : -1, "matmul_nt");
    int n = w.shape()[0], k = w.shape()[1];
    int rows = static_cast<int>(a.numel()) / k;
    std::vector<int> out_shape = a.shape();
    out_shape.back() = n;
    bool rg = taping(a, w);
    Tensor out = Tensor::zeros(std::move(out_shape), rg);
    dgemm(CblasNoTrans, CblasTrans, rows, n, k, 1.0, a.data().data(), k, w.data().data(), k, 0.0,
          out.data().data(), n);
    if (rg) {
        NodePtr an = a.node(), wn = w.node(), on = out.node();
        active_tape()->record([an, wn, on, rows, n, k] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                dgemm(CblasNoTrans, CblasNoTrans, rows, k, n, 1.0, on->grad.data(), n, wn->data.data(), k,
                      1.0, an->grad.data(), k);
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                dgemm(CblasTrans, CblasNoTrans, n, k, rows, 1.0, on->grad.data(), n, an->data.data(), k,
                      1.0, wn->grad.data(), k);
            }
        });
    }
    return out;
}

namespace {

struct BmmDims {
    int slices, n, m, d;
};

BmmDims check_bmm(const Tensor& a, const Tensor& b, bool b_transposed, const char* op) {
    if (a.rank() < 2 || b.rank() != a.rank())
        throw std::runtime_error(std::string("dimension error: ") + op + " expects equal-rank inputs");
    for (int i = 0; i + 2 < a.rank(); ++i) {
        if (a.shape()[i] != b.shape()[i])
            throw std::runtime_error(std::string("dimension error: ") + op + " leading dims differ: " +
                                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    BmmDims dims{};
    dims.n = a.shape()[a.rank() - 2];
    int a_inner = a.shape()[a.rank() - 1];
    if (b_transposed) {
        dims.m = b.shape()[b.rank() - 2];
        dims.d = a_inner;
        if (b.shape()[b.rank() - 1] != a_inner)
            throw std::runtime_error(std::string("dimension error: cannot ") + op + " " +
                                     shape_str(a.shape()) + " by " + shape_str(b.shape()));
    } else {
        dims.m = a_inner;
        dims.d = b.shape()[b.rank() - 1];
        if (b.shape()[b.rank() - 2] != a_inner)
            throw std::runtime_error(std::string("dimension error: cannot ") + op + " " +
                                     shape_str(a.shape()) + " by " + shape_str(b.shape()));
    }
    dims.slices = static_cast<int>(a.numel()) / (dims.n * a_inner);
    return dims;
}

}  // namespace

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
    BmmDims dm = check_bmm(a, b, true, "bmm_nt");
    std::vector<int> out_shape(a.shape().begin(), a.shape().end() - 2);
    out_shape.push_back(dm.n);
    out_shape.push_back(dm.m);
    bool rg = taping(a, b);
    Tensor out = Tensor::zeros(std::move(out_shape), rg);
    for (int s = 0; s < dm.slices; ++s) {
        dgemm(CblasNoTrans, CblasTrans, dm.n, dm.m, dm.d, 1.0, a.data().data() + std::size_t(s) * dm.n * dm.d,
              dm.d, b.data().data() + std::size_t(s) * dm.m * dm.d, dm.d, 0.0,
              out.data().data() + std::size_t(s) * dm.n * dm.m, dm.m);
    }
    if (rg) {
        NodePtr an = a.node(), bn = b.node(), on = out.node();
        active_tape()->record([an, bn, on, dm] {
            if (on->grad.empty()) return;
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (int s = 0; s < dm.slices; ++s) {
                const double* g = on->grad.data() + std::size_t(s) * dm.n * dm.m;
                if (an->requires_grad) {
                    dgemm(CblasNoTrans, CblasNoTrans, dm.n, dm.d, dm.m, 1.0, g, dm.m,
                          bn->data.data() + std::size_t(s) * dm.m * dm.d, dm.d, 1.0,
                          an->grad.data() + std::size_t(s) * dm.n * dm.d, dm.d);
                }
                if (bn->requires_grad) {
                    dgemm(CblasTrans, CblasNoTrans, dm.m, dm.d, dm.n, 1.0, g, dm.m,
                          an->data.data() + std::size_t(s) * dm.n * dm.d, dm.d, 1.0,
                          bn->grad.data() + std::size_t(s) * dm.m * dm.d, dm.d);
                }
            }
        });
    }
    return out;
}

Tensor bmm_nn(const Tensor& a, const Tensor& b) {
    BmmDims dm = check_bmm(a, b, false, "bmm_nn");
    std::vector<int> out_shape(a.shape().begin(), a.shape().end() - 2);
    out_shape.push_back(dm.n);
    out_shape.push_back(dm.d);
    bool rg = taping(a, b);
    Tensor out = Tensor::zeros(std::move(out_shape), rg);
    for (int s = 0; s < dm.slices; ++s) {
        dgemm(CblasNoTrans, CblasNoTrans, dm.n, dm.d, dm.m, 1.0,
              a.data().data() + std::size_t(s) * dm.n * dm.m, dm.m,
              b.data().data() + std::size_t(s) * dm.m * dm.d, dm.d, 0.0,
              out.data().data() + std::size_t(s) * dm.n * dm.d, dm.d);
    }
    if (rg) {
        NodePtr an = a.node(), bn = b.node(), on = out.node();
        active_tape()->record([an, bn, on, dm] {
            if (on->grad.empty()) return;
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (int s = 0; s < dm.slices; ++s) {
                const double* g = on->grad.data() + std::size_t(s) * dm.n * dm.d;
                if (an->requires_grad) {
                    dgemm(CblasNoTrans, CblasTrans, dm.n, dm.m, dm.d, 1.0, g, dm.d,
                          bn->data.data() + std::size_t(s) * dm.m * dm.d, dm.d, 1.0,
                          an->grad.data() + std::size_t(s) * dm.n * dm.m, dm.m);
                }
                if (bn->requires_grad) {
                    dgemm(CblasTrans, CblasNoTrans, dm.m, dm.d, dm.n, 1.0,
                          an->data.data() + std::size_t(s) * dm.n * dm.m, dm.m, g, dm.d, 1.0,
                          bn->grad.data() + std::size_t(s) * dm.m * dm.d, dm.d);
                }
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (eps <= 0.0) throw std::runtime_error("config error: layer_norm eps must be positive");
    int d = x.shape().back();
    if (gamma.rank() != 1 || gamma.shape()[0] != d || beta.rank() != 1 || beta.shape()[0] != d)
        throw std::runtime_error("dimension error: layer_norm affine params must be [" + std::to_string(d) + "]");
    std::size_t rows = x.numel() / static_cast<std::size_t>(d);
    bool rg = taping(x) || taping(gamma) || taping(beta);
    Tensor out = Tensor::zeros(x.shape(), rg);
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* px = x.data().data() + r * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += px[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            double c = px[j] - mean;
            var += c * c;
        }
        var /= d;
        double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        double* po = out.data().data() + r * d;
        for (int j = 0; j < d; ++j) {
            double xh = (px[j] - mean) * inv;
            xhat[r * d + j] = xh;
            po[j] = xh * gamma.data()[j] + beta.data()[j];
        }
    }
    if (rg) {
        NodePtr xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
        active_tape()->record([xn, gn, bn, on, rows, d, xhat = std::move(xhat),
                               inv_std = std::move(inv_std)] {
            if (on->grad.empty()) return;
            if (xn->requires_grad) xn->ensure_grad();
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* gy = on->grad.data() + r * d;
                const double* xh = xhat.data() + r * d;
                if (gn->requires_grad)
                    for (int j = 0; j < d; ++j) gn->grad[j] += gy[j] * xh[j];
                if (bn->requires_grad)
                    for (int j = 0; j < d; ++j) bn->grad[j] += gy[j];
                if (xn->requires_grad) {
                    double m1 = 0.0, m2 = 0.0;
                    for (int j = 0; j < d; ++j) {
                        double g = gy[j] * gn->data[j];
                        m1 += g;
                        m2 += g * xh[j];
                    }
                    m1 /= d;
                    m2 /= d;
                    double* gx = xn->grad.data() + r * d;
                    for (int j = 0; j < d; ++j) {
                        double g = gy[j] * gn->data[j];
                        gx[j] += (g - m1 - xh[j] * m2) * inv_std[r];
                    }
                }
            }
        });
    }
    return out;
}

namespace {

Tensor softmax_impl(const Tensor& x, const std::vector<std::uint8_t>* keep_mask) {
    int n = x.shape().back();
    std::size_t rows = x.numel() / static_cast<std::size_t>(n);
    std::size_t mask_size = 0;
    if (keep_mask) {
        mask_size = keep_mask->size();
        if (mask_size == 0 || x.numel() % mask_size != 0 || mask_size % static_cast<std::size_t>(n) != 0)
            throw std::runtime_error("dimension error: softmax mask size " + std::to_string(mask_size) +
                                     " does not cover trailing dims of " + shape_str(x.shape()));
    }
    bool rg = taping(x);
    Tensor out = Tensor::zeros(x.shape(), rg);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* px = x.data().data() + r * n;
        double* po = out.data().data() + r * n;
        const std::uint8_t* km = keep_mask ? keep_mask->data() + (r * n) % mask_size : nullptr;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j)
            if (!km || km[j]) mx = std::max(mx, px[j]);
        if (mx == -std::numeric_limits<double>::infinity())
            throw std::runtime_error("degenerate row error: softmax row " + std::to_string(r) +
                                     " is fully masked");
        double denom = 0.0;
        for (int j = 0; j < n; ++j) {
            if (!km || km[j]) {
                po[j] = std::exp(px[j] - mx);
                denom += po[j];
            } else {
                po[j] = 0.0;
            }
        }
        for (int j = 0; j < n; ++j) po[j] /= denom;
    }
    if (rg) {
        NodePtr xn = x.node(), on = out.node();
        std::vector<std::uint8_t> mask_copy = keep_mask ? *keep_mask : std::vector<std::uint8_t>{};
        active_tape()->record([xn, on, rows, n, mask = std::move(mask_copy)] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            std::size_t msz = mask.size();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = on->data.data() + r * n;
                const double* gy = on->grad.data() + r * n;
                const std::uint8_t* km = msz ? mask.data() + (r * n) % msz : nullptr;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += gy[j] * y[j];
                double* gx = xn->grad.data() + r * n;
                for (int j = 0; j < n; ++j) {
                    if (km && !km[j]) continue;
                    gx[j] += y[j] * (gy[j] - dot);
                }
            }
        });
    }
    return out;
}

}  // namespace

Tensor softmax_lastdim(const Tensor& x) { return softmax_impl(x, nullptr); }

Tensor softmax_lastdim(const Tensor& x, const std::vector<std::uint8_t>& keep_mask) {
    return softmax_impl(x, &keep_mask);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<std::uint8_t>& loss_mask) {
    int vocab = logits.shape().back();
    std::size_t rows = logits.numel() / static_cast<std::size_t>(vocab);
    if (targets.size() != rows || loss_mask.size() != rows)
        throw std::runtime_error("dimension error: cross_entropy expects " + std::to_string(rows) +
                                 " targets and mask entries");
    std::size_t scored = 0;
    for (std::size_t r = 0; r < rows; ++r)
        if (loss_mask[r]) ++scored;
    if (scored == 0) throw std::runtime_error("degenerate error: cross_entropy with all positions masked");

    std::vector<double> lse(rows, 0.0);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!loss_mask[r]) continue;
        int t = targets[r];
        if (t < 0 || t >= vocab)
            throw std::runtime_error("index error: target " + std::to_string(t) + " out of range [0," +
                                     std::to_string(vocab) + ")");
        const double* px = logits.data().data() + r * vocab;
        double mx = px[0];
        for (int j = 1; j < vocab; ++j) mx = std::max(mx, px[j]);
        double denom = 0.0;
        for (int j = 0; j < vocab; ++j) denom += std::exp(px[j] - mx);
        lse[r] = mx + std::log(denom);
        total += lse[r] - px[t];
    }
    bool rg = taping(logits);
    Tensor out = Tensor::from_data({1}, {total / static_cast<double>(scored)}, rg);
    if (rg) {
        NodePtr xn = logits.node(), on = out.node();
        active_tape()->record([xn, on, rows, vocab, scored, targets, loss_mask, lse = std::move(lse)] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            double g = on->grad[0] / static_cast<double>(scored);
            for (std::size_t r = 0; r < rows; ++r) {
                if (!loss_mask[r]) continue;
                const double* px = xn->data.data() + r * vocab;
                double* gx = xn->grad.data() + r * vocab;
                for (int j = 0; j < vocab; ++j) {
                    double p = std::exp(px[j] - lse[r]);
                    gx[j] += g * (p - (j == targets[r] ? 1.0 : 0.0));
                }
            }
        });
    }
    return out;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids, int batch, int seq) {
    if (table.rank() != 2) throw std::runtime_error("dimension error: embedding table must be 2-D");
    int vocab = table.shape()[0], d = table.shape()[1];
    if (static_cast<std::size_t>(batch) * seq != ids.size())
        throw std::runtime_error("dimension error: embedding expected " + std::to_string(batch * seq) + " ids");
    bool rg = taping(table);
    Tensor out = Tensor::zeros({batch, seq, d}, rg);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        int id = ids[i];
        if (id < 0 || id >= vocab)
            throw std::runtime_error("index error: token id " + std::to_string(id) + " out of range [0," +
                                     std::to_string(vocab) + ")");
        const double* src = table.data().data() + std::size_t(id) * d;
        double* dst = out.data().data() + i * d;
        for (int j = 0; j < d; ++j) dst[j] = src[j];
    }
    if (rg) {
        NodePtr tn = table.node(), on = out.node();
        active_tape()->record([tn, on, ids, d] {
            if (on->grad.empty()) return;
            tn->ensure_grad();
            for (std::size_t i = 0; i < ids.size(); ++i) {
                const double* g = on->grad.data() + i * d;
                double* gt = tn->grad.data() + std::size_t(ids[i]) * d;
                for (int j = 0; j < d; ++j) gt[j] += g[j];
            }
        });
    }
    return out;
}

Tensor split_heads(const Tensor& x, int heads) {
    if (x.rank() != 3) throw std::runtime_error("dimension error: split_heads expects [B,n,d]");
    int batch = x.shape()[0], n = x.shape()[1], d = x.shape()[2];
    if (d % heads != 0) throw std::runtime_error("config error: model width not divisible by head count");
    int dh = d / heads;
    bool rg = taping(x);
    Tensor out = Tensor::zeros({batch, heads, n, dh}, rg);
    const double* px = x.data().data();
    double* po = out.data().data();
    for (int b = 0; b < batch; ++b)
        for (int i = 0; i < n; ++i)
            for (int h = 0; h < heads; ++h) {
                const double* src = px + (std::size_t(b) * n + i) * d + std::size_t(h) * dh;
                double* dst = po + ((std::size_t(b) * heads + h) * n + i) * dh;
                for (int c = 0; c < dh; ++c) dst[c] = src[c];
            }
    if (rg) {
        NodePtr xn = x.node(), on = out.node();
        active_tape()->record([xn, on, batch, n, d, heads, dh] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            double* gx = xn->grad.data();
            const double* g = on->grad.data();
            for (int b = 0; b < batch; ++b)
                for (int i = 0; i < n; ++i)
                    for (int h = 0; h < heads; ++h) {
                        double* dst = gx + (std::size_t(b) * n + i) * d + std::size_t(h) * dh;
                        const double* src = g + ((std::size_t(b) * heads + h) * n + i) * dh;
                        for (int c = 0; c < dh; ++c) dst[c] += src[c];
                    }
        });
    }
    return out;
}

Tensor merge_heads(const Tensor& x) {
    if (x.rank() != 4) throw std::runtime_error("dimension error: merge_heads expects [B,h,n,dh]");
    int batch = x.shape()[0], heads = x.shape()[1], n = x.shape()[2], dh = x.shape()[3];
    int d = heads * dh;
    bool rg = taping(x);
    Tensor out = Tensor::zeros({batch, n, d}, rg);
    const double* px = x.data().data();
    double* po = out.data().data();
    for (int b = 0; b < batch; ++b)
        for (int h = 0; h < heads; ++h)
            for (int i = 0; i < n; ++i) {
                const double* src = px + ((std::size_t(b) * heads + h) * n + i) * dh;
                double* dst = po + (std::size_t(b) * n + i) * d + std::size_t(h) * dh;
                for (int c = 0; c < dh; ++c) dst[c] = src[c];
            }
    if (rg) {
        NodePtr xn = x.node(), on = out.node();
        active_tape()->record([xn, on, batch, n, d, heads, dh] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            double* gx = xn->grad.data();
            const double* g = on->grad.data();
            for (int b = 0; b < batch; ++b)
                for (int h = 0; h < heads; ++h)
                    for (int i = 0; i < n; ++i) {
                        double* dst = gx + ((std::size_t(b) * heads + h) * n + i) * dh;
                        const double* src = g + (std::size_t(b) * n + i) * d + std::size_t(h) * dh;
                        for (int c = 0; c < dh; ++c) dst[c] += src[c];
                    }
        });
    }
    return out;
}

Tensor rope_rotate(const Tensor& x, const std::vector<int>& positions, double theta_base) {
    int dh = x.shape().back();
    if (dh % 2 != 0) throw std::runtime_error("config error: rope requires an even head dimension");
    int n = x.shape()[x.rank() - 2];
    if (static_cast<int>(positions.size()) != n)
        throw std::runtime_error("dimension error: rope positions length " + std::to_string(positions.size()) +
                                 " does not match sequence length " + std::to_string(n));
    int half = dh / 2;
    // angle table shared by forward and backward
    std::vector<double> cos_t(std::size_t(n) * half), sin_t(std::size_t(n) * half);
    for (int i = 0; i < n; ++i) {
        for (int c = 0; c < half; ++c) {
            double freq = std::pow(theta_base, -2.0 * c / dh);
            double ang = positions[i] * freq;
            cos_t[std::size_t(i) * half + c] = std::cos(ang);
            sin_t[std::size_t(i) * half + c] = std::sin(ang);
        }
    }
    std::size_t slices = x.numel() / (std::size_t(n) * dh);
    bool rg = taping(x);
    Tensor out = Tensor::zeros(x.shape(), rg);
    for (std::size_t s = 0; s < slices; ++s)
        for (int i = 0; i < n; ++i) {
            const double* px = x.data().data() + (s * n + i) * dh;
            double* po = out.data().data() + (s * n + i) * dh;
            for (int c = 0; c < half; ++c) {
                double cv = cos_t[std::size_t(i) * half + c], sv = sin_t[std::size_t(i) * half + c];
                double x0 = px[2 * c], x1 = px[2 * c + 1];
                po[2 * c] = x0 * cv - x1 * sv;
                po[2 * c + 1] = x0 * sv + x1 * cv;
            }
        }
    if (rg) {
        NodePtr xn = x.node(), on = out.node();
        active_tape()->record([xn, on, slices, n, dh, half, cos_t = std::move(cos_t),
                               sin_t = std::move(sin_t)] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::size_t s = 0; s < slices; ++s)
                for (int i = 0; i < n; ++i) {
                    const double* g = on->grad.data() + (s * n + i) * dh;
                    double* gx = xn->grad.data() + (s * n + i) * dh;
                    for (int c = 0; c < half; ++c) {
                        double cv = cos_t[std::size_t(i) * half + c], sv = sin_t[std::size_t(i) * half + c];
                        double g0 = g[2 * c], g1 = g[2 * c + 1];
                        gx[2 * c] += g0 * cv + g1 * sv;
                        gx[2 * c + 1] += -g0 * sv + g1 * cv;
                    }
                }
        });
    }
    return out;
}

namespace {

void check_attn_bias(const Tensor& attn, const Tensor* bias) {
    if (attn.rank() != 4) throw std::runtime_error("dimension error: stack_channels expects [B,h,n,m]");
    if (bias) {
        if (bias->rank() != 3 || bias->shape()[0] != attn.shape()[1] || bias->shape()[1] != attn.shape()[2] ||
            bias->shape()[2] != attn.shape()[3])
            throw std::runtime_error("dimension error: bias " + shape_str(bias->shape()) +
                                     " does not match attention " + shape_str(attn.shape()));
    }
}

}  // namespace

Tensor stack_channels(const Tensor& attn, const Tensor& bias) {
    check_attn_bias(attn, &bias);
    int batch = attn.shape()[0], heads = attn.shape()[1], n = attn.shape()[2], m = attn.shape()[3];
    std::size_t cells = std::size_t(n) * m;
    bool rg = taping(attn, bias);
    Tensor out = Tensor::zeros({batch * n * m, 2 * heads}, rg);
    const double* pa = attn.data().data();
    const double* pb = bias.data().data();
    double* po = out.data().data();
    for (int b = 0; b < batch; ++b) {
        const double* ab = pa + std::size_t(b) * heads * cells;
        double* rows = po + std::size_t(b) * cells * (2 * heads);
        for (std::size_t cell = 0; cell < cells; ++cell) {
            double* row = rows + cell * (2 * heads);
            for (int h = 0; h < heads; ++h) {
                row[h] = ab[std::size_t(h) * cells + cell];
                row[heads + h] = pb[std::size_t(h) * cells + cell];
            }
        }
    }
    if (rg) {
        NodePtr an = attn.node(), bn = bias.node(), on = out.node();
        active_tape()->record([an, bn, on, batch, heads, cells] {
            if (on->grad.empty()) return;
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            const double* g = on->grad.data();
            for (int b = 0; b < batch; ++b) {
                const double* rows = g + std::size_t(b) * cells * (2 * heads);
                double* ga = an->requires_grad ? an->grad.data() + std::size_t(b) * heads * cells
                                               : nullptr;
                double* gb = bn->requires_grad ? bn->grad.data() : nullptr;
                for (std::size_t cell = 0; cell < cells; ++cell) {
                    const double* row = rows + cell * (2 * heads);
                    for (int h = 0; h < heads; ++h) {
                        if (ga) ga[std::size_t(h) * cells + cell] += row[h];
                        if (gb) gb[std::size_t(h) * cells + cell] += row[heads + h];
                    }
                }
            }
        });
    }
    return out;
}

Tensor stack_channels(const Tensor& attn) {
    check_attn_bias(attn, nullptr);
    int batch = attn.shape()[0], heads = attn.shape()[1], n = attn.shape()[2], m = attn.shape()[3];
    std::size_t cells = std::size_t(n) * m;
    bool rg = taping(attn);
    Tensor out = Tensor::zeros({batch * n * m, heads}, rg);
    const double* pa = attn.data().data();
    double* po = out.data().data();
    for (int b = 0; b < batch; ++b) {
        const double* ab = pa + std::size_t(b) * heads * cells;
        double* rows = po + std::size_t(b) * cells * heads;
        for (std::size_t cell = 0; cell < cells; ++cell)
            for (int h = 0; h < heads; ++h)
                rows[cell * heads + h] = ab[std::size_t(h) * cells + cell];
    }
    if (rg) {
        NodePtr an = attn.node(), on = out.node();
        active_tape()->record([an, on, batch, heads, cells] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            const double* g = on->grad.data();
            for (int b = 0; b < batch; ++b) {
                double* ga = an->grad.data() + std::size_t(b) * heads * cells;
                const double* rows = g + std::size_t(b) * cells * heads;
                for (std::size_t cell = 0; cell < cells; ++cell)
                    for (int h = 0; h < heads; ++h)
                        ga[std::size_t(h) * cells + cell] += rows[cell * heads + h];
            }
        });
    }
    return out;
}

Tensor unstack_channels(const Tensor& rows, int batch, int n, int m) {
    if (rows.rank() != 2 || rows.shape()[0] != batch * n * m)
        throw std::runtime_error("dimension error: unstack_channels expects [" +
                                 std::to_string(batch * n * m) + " x h], got " + shape_str(rows.shape()));
    int heads = rows.shape()[1];
    std::size_t cells = std::size_t(n) * m;
    bool rg = taping(rows);
    Tensor out = Tensor::zeros({batch, heads, n, m}, rg);
    const double* pr = rows.data().data();
    double* po = out.data().data();
    for (int b = 0; b < batch; ++b) {
        const double* rrows = pr + std::size_t(b) * cells * heads;
        double* ob = po + std::size_t(b) * heads * cells;
        for (std::size_t cell = 0; cell < cells; ++cell)
            for (int h = 0; h < heads; ++h)
                ob[std::size_t(h) * cells + cell] = rrows[cell * heads + h];
    }
    if (rg) {
        NodePtr rn = rows.node(), on = out.node();
        active_tape()->record([rn, on, batch, heads, cells] {
            if (on->grad.empty()) return;
            rn->ensure_grad();
            const double* g = on->grad.data();
            for (int b = 0; b < batch; ++b) {
                double* rrows = rn->grad.data() + std::size_t(b) * cells * heads;
                const double* gb = g + std::size_t(b) * heads * cells;
                for (std::size_t cell = 0; cell < cells; ++cell)
                    for (int h = 0; h < heads; ++h)
                        rrows[cell * heads + h] += gb[std::size_t(h) * cells + cell];
            }
        });
    }
    return out;
}


namespace {

struct CellMlpDims {
    int batch, heads, n, m, in_ch, hidden, out_ch;
    std::size_t cells;
};

// gather the per-cell channel rows for cells [begin, begin+count) of batch b
void gather_rows(const double* attn, const double* bias, const CellMlpDims& dm, int b,
                 std::size_t begin, std::size_t count, double* rows) {
    const double* ab = attn + std::size_t(b) * dm.heads * dm.cells;
    for (std::size_t c = 0; c < count; ++c) {
        double* row = rows + c * dm.in_ch;
        std::size_t cell = begin + c;
        for (int h = 0; h < dm.heads; ++h) row[h] = ab[std::size_t(h) * dm.cells + cell];
        if (bias)
            for (int h = 0; h < dm.heads; ++h)
                row[dm.heads + h] = bias[std::size_t(h) * dm.cells + cell];
    }
}

}  // namespace

Tensor cell_mlp(const Tensor& attn, const Tensor& bias, const Tensor& w1, const Tensor& b1,
                const Tensor& w2, const Tensor& b2, double slope) {
    check_attn_bias(attn, bias.defined() ? &bias : nullptr);
    CellMlpDims dm{};
    dm.batch = attn.shape()[0];
    dm.heads = attn.shape()[1];
    dm.n = attn.shape()[2];
    dm.m = attn.shape()[3];
    dm.cells = std::size_t(dm.n) * dm.m;
    dm.in_ch = bias.defined() ? 2 * dm.heads : dm.heads;
    if (w1.rank() != 2 || w1.shape()[0] != dm.in_ch)
        throw std::runtime_error("dimension error: cell_mlp first layer expects " +
                                 std::to_string(dm.in_ch) + " input channels, got " +
                                 shape_str(w1.shape()));
    dm.hidden = w1.shape()[1];
    if (w2.rank() != 2 || w2.shape()[0] != dm.hidden)
        throw std::runtime_error("dimension error: cell_mlp layer widths disagree");
    dm.out_ch = w2.shape()[1];
    const bool use_b1 = b1.defined(), use_b2 = b2.defined();

    bool rg = active_tape() &&
              (attn.requires_grad() || (bias.defined() && bias.requires_grad()) ||
               w1.requires_grad() || w2.requires_grad() || (use_b1 && b1.requires_grad()) ||
               (use_b2 && b2.requires_grad()));
    Tensor out = Tensor::zeros({dm.batch, dm.out_ch, dm.n, dm.m}, rg);

    constexpr std::size_t kBlock = 4096;
    std::vector<double> rows(kBlock * dm.in_ch);
    std::vector<double> hidden(kBlock * dm.hidden);
    std::vector<double> cellout(kBlock * dm.out_ch);
    const double* pa = attn.data().data();
    const double* pb = bias.defined() ? bias.data().data() : nullptr;
    double* po = out.data().data();
    for (int b = 0; b < dm.batch; ++b) {
        for (std::size_t begin = 0; begin < dm.cells; begin += kBlock) {
            std::size_t count = std::min(kBlock, dm.cells - begin);
            gather_rows(pa, pb, dm, b, begin, count, rows.data());
            int rows_i = static_cast<int>(count);
            dgemm(CblasNoTrans, CblasNoTrans, rows_i, dm.hidden, dm.in_ch, 1.0, rows.data(),
                  dm.in_ch, w1.data().data(), dm.hidden, 0.0, hidden.data(), dm.hidden);
            const double* pb1 = use_b1 ? b1.data().data() : nullptr;
            for (std::size_t c = 0; c < count; ++c) {
                double* hrow = hidden.data() + c * dm.hidden;
                for (int d = 0; d < dm.hidden; ++d) {
                    double v = hrow[d] + (pb1 ? pb1[d] : 0.0);
                    hrow[d] = v >= 0.0 ? v : slope * v;
                }
            }
            dgemm(CblasNoTrans, CblasNoTrans, rows_i, dm.out_ch, dm.hidden, 1.0, hidden.data(),
                  dm.hidden, w2.data().data(), dm.out_ch, 0.0, cellout.data(), dm.out_ch);
            const double* pb2 = use_b2 ? b2.data().data() : nullptr;
            double* ob = po + std::size_t(b) * dm.out_ch * dm.cells;
            for (std::size_t c = 0; c < count; ++c) {
                const double* crow = cellout.data() + c * dm.out_ch;
                for (int h = 0; h < dm.out_ch; ++h)
                    ob[std::size_t(h) * dm.cells + begin + c] = crow[h] + (pb2 ? pb2[h] : 0.0);
            }
        }
    }

    if (rg) {
        NodePtr an = attn.node(), on = out.node(), w1n = w1.node(), w2n = w2.node();
        NodePtr bn = bias.defined() ? bias.node() : nullptr;
        NodePtr b1n = use_b1 ? b1.node() : nullptr;
        NodePtr b2n = use_b2 ? b2.node() : nullptr;
        active_tape()->record([an, bn, on, w1n, b1n, w2n, b2n, dm, slope] {
            if (on->grad.empty()) return;
            if (an->requires_grad) an->ensure_grad();
            if (bn && bn->requires_grad) bn->ensure_grad();
            if (w1n->requires_grad) w1n->ensure_grad();
            if (w2n->requires_grad) w2n->ensure_grad();
            if (b1n && b1n->requires_grad) b1n->ensure_grad();
            if (b2n && b2n->requires_grad) b2n->ensure_grad();

            constexpr std::size_t kBlock = 4096;
            std::vector<double> rows(kBlock * dm.in_ch);
            std::vector<double> hidden(kBlock * dm.hidden);
            std::vector<double> pre_sign(kBlock * dm.hidden);
            std::vector<double> gout(kBlock * dm.out_ch);
            std::vector<double> ghidden(kBlock * dm.hidden);
            std::vector<double> grows(kBlock * dm.in_ch);
            const double* pa = an->data.data();
            const double* pb = bn ? bn->data.data() : nullptr;
            const double* pb1 = b1n ? b1n->data.data() : nullptr;
            const double* g = on->grad.data();
            for (int b = 0; b < dm.batch; ++b) {
                for (std::size_t begin = 0; begin < dm.cells; begin += kBlock) {
                    std::size_t count = std::min(kBlock, dm.cells - begin);
                    int rows_i = static_cast<int>(count);
                    // recompute the block's hidden activations
                    gather_rows(pa, pb, dm, b, begin, count, rows.data());
                    dgemm(CblasNoTrans, CblasNoTrans, rows_i, dm.hidden, dm.in_ch, 1.0, rows.data(),
                          dm.in_ch, w1n->data.data(), dm.hidden, 0.0, hidden.data(), dm.hidden);
                    for (std::size_t c = 0; c < count; ++c) {
                        double* hrow = hidden.data() + c * dm.hidden;
                        double* srow = pre_sign.data() + c * dm.hidden;
                        for (int d = 0; d < dm.hidden; ++d) {
                            double v = hrow[d] + (pb1 ? pb1[d] : 0.0);
                            srow[d] = v >= 0.0 ? 1.0 : slope;
                            hrow[d] = v >= 0.0 ? v : slope * v;
                        }
                    }
                    // gather upstream cell gradients
                    const double* gb = g + std::size_t(b) * dm.out_ch * dm.cells;
                    for (std::size_t c = 0; c < count; ++c) {
                        double* grow = gout.data() + c * dm.out_ch;
                        for (int h = 0; h < dm.out_ch; ++h)
                            grow[h] = gb[std::size_t(h) * dm.cells + begin + c];
                    }
                    if (b2n && b2n->requires_grad) {
                        double* gb2 = b2n->grad.data();
                        for (std::size_t c = 0; c < count; ++c)
                            for (int h = 0; h < dm.out_ch; ++h) gb2[h] += gout[c * dm.out_ch + h];
                    }
                    if (w2n->requires_grad)
                        dgemm(CblasTrans, CblasNoTrans, dm.hidden, dm.out_ch, rows_i, 1.0,
                              hidden.data(), dm.hidden, gout.data(), dm.out_ch, 1.0,
                              w2n->grad.data(), dm.out_ch);
                    dgemm(CblasNoTrans, CblasTrans, rows_i, dm.hidden, dm.out_ch, 1.0, gout.data(),
                          dm.out_ch, w2n->data.data(), dm.out_ch, 0.0, ghidden.data(), dm.hidden);
                    for (std::size_t c = 0; c < count; ++c) {
                        double* grow = ghidden.data() + c * dm.hidden;
                        const double* srow = pre_sign.data() + c * dm.hidden;
                        for (int d = 0; d < dm.hidden; ++d) grow[d] *= srow[d];
                    }
                    if (b1n && b1n->requires_grad) {
                        double* gb1 = b1n->grad.data();
                        for (std::size_t c = 0; c < count; ++c)
                            for (int d = 0; d < dm.hidden; ++d) gb1[d] += ghidden[c * dm.hidden + d];
                    }
                    if (w1n->requires_grad)
                        dgemm(CblasTrans, CblasNoTrans, dm.in_ch, dm.hidden, rows_i, 1.0,
                              rows.data(), dm.in_ch, ghidden.data(), dm.hidden, 1.0,
                              w1n->grad.data(), dm.hidden);
                    bool need_rows = an->requires_grad || (bn && bn->requires_grad);
                    if (need_rows) {
                        dgemm(CblasNoTrans, CblasTrans, rows_i, dm.in_ch, dm.hidden, 1.0,
                              ghidden.data(), dm.hidden, w1n->data.data(), dm.hidden, 0.0,
                              grows.data(), dm.in_ch);
                        double* ga = an->requires_grad
                                         ? an->grad.data() + std::size_t(b) * dm.heads * dm.cells
                                         : nullptr;
                        double* gbias = bn && bn->requires_grad ? bn->grad.data() : nullptr;
                        for (std::size_t c = 0; c < count; ++c) {
                            const double* grow = grows.data() + c * dm.in_ch;
                            std::size_t cell = begin + c;
                            if (ga)
                                for (int h = 0; h < dm.heads; ++h)
                                    ga[std::size_t(h) * dm.cells + cell] += grow[h];
                            if (gbias && dm.in_ch == 2 * dm.heads)
                                for (int h = 0; h < dm.heads; ++h)
                                    gbias[std::size_t(h) * dm.cells + cell] += grow[dm.heads + h];
                        }
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace dape
