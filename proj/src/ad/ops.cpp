#include "smi/ad/ops.hpp"

#include "smi/core/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace smi::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_same(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
}

std::vector<double>& pgrad(Node& self, std::size_t i) { return self.parents[i]->grad_buffer(); }
bool pneeds(Node& self, std::size_t i) { return self.parents[i]->requires_grad; }
const std::vector<double>& pval(Node& self, std::size_t i) { return self.parents[i]->value; }

template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
    std::vector<double> out(x.size());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
    return Tensor::make_result(x.shape(), std::move(out), {x}, [deriv](Node& self) {
        auto& g = pgrad(self, 0);
        const auto& xv = pval(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(xv[i], self.value[i]);
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (!pneeds(self, p)) continue;
            auto& g = pgrad(self, p);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        if (pneeds(self, 0)) {
            auto& g = pgrad(self, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pneeds(self, 1)) {
            auto& g = pgrad(self, 1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (!pneeds(self, p)) continue;
            auto& g = pgrad(self, p);
            const auto& other = pval(self, 1 - p);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * other[i];
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    return unary(a, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary(a, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
    if (StructureLog::active()) {
        std::uint64_t word = 0;
        std::size_t bit = 0;
        for (double v : x.data()) {
            word = (word << 1) | (v > 0.0 ? 1u : 0u);
            if (++bit == 64) {
                StructureLog::record(word);
                word = 0;
                bit = 0;
            }
        }
        StructureLog::record(word);
    }
    return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                 [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& x) {
    return unary(
        x, [](double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
        [](double v, double) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); });
}

Tensor exp(const Tensor& x) {
    return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor square(const Tensor& x) {
    return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return Tensor::make_result({1}, {s}, {x}, [](Node& self) {
        auto& g = pgrad(self, 0);
        for (auto& v : g) v += self.grad[0];
    });
}

Tensor mean(const Tensor& x) {
    if (x.size() == 0) throw EmptyInputError("mean of empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor log_mean_exp(const Tensor& x) {
    if (x.size() == 0) throw EmptyInputError("log_mean_exp of empty tensor");
    const auto in = x.data();
    const double m = *std::max_element(in.begin(), in.end());
    std::vector<double> w(in.size());
    double s = 0.0;
    for (std::size_t i = 0; i < in.size(); ++i) {
        w[i] = std::exp(in[i] - m);
        s += w[i];
    }
    for (auto& v : w) v /= s;
    const double out = m + std::log(s / static_cast<double>(in.size()));
    return Tensor::make_result({1}, {out}, {x}, [w = std::move(w)](Node& self) {
        auto& g = pgrad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * w[i];
    });
}

Tensor l1_distance(const Tensor& a, const Tensor& b) {
    require_same(a, b, "l1_distance");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a.data()[i] - b.data()[i]);
    return Tensor::make_result({1}, {s}, {a, b}, [](Node& self) {
        const auto& av = pval(self, 0);
        const auto& bv = pval(self, 1);
        const double g0 = self.grad[0];
        for (std::size_t p = 0; p < 2; ++p) {
            if (!pneeds(self, p)) continue;
            auto& g = pgrad(self, p);
            const double sign = p == 0 ? 1.0 : -1.0;
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double d = av[i] - bv[i];
                g[i] += sign * g0 * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
            }
        }
    });
}

Tensor kl_div(const Tensor& p, const Tensor& q) {
    require_same(p, q, "kl_div");
    if (p.rank() != 1 && p.rank() != 2) throw ShapeError("kl_div expects [C] or [R x C]");
    const std::size_t rows = p.rank() == 2 ? p.dim(0) : 1;
    const std::size_t cols = p.size() / std::max<std::size_t>(rows, 1);
    if (rows == 0 || cols == 0) throw EmptyInputError("kl_div of empty tensor");
    const auto pv = p.data();
    const auto qv = q.data();
    for (const auto* t : {&pv, &qv}) {
        for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                const double v = (*t)[r * cols + c];
                if (!(v >= 0.0) || !std::isfinite(v)) throw DomainError("kl_div: negative or non-finite probability");
                s += v;
            }
            if (std::abs(s - 1.0) > 1e-9) throw DomainError("kl_div: row does not sum to 1");
        }
    }
    double total = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        if (pv[i] > 0.0) total += pv[i] * std::log(pv[i] / qv[i]);
    }
    const double inv_rows = 1.0 / static_cast<double>(rows);
    return Tensor::make_result({1}, {total * inv_rows}, {p, q}, [inv_rows](Node& self) {
        const auto& pv = pval(self, 0);
        const auto& qv = pval(self, 1);
        const double g0 = self.grad[0] * inv_rows;
        if (pneeds(self, 0)) {
            auto& g = pgrad(self, 0);
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (pv[i] > 0.0) g[i] += g0 * (std::log(pv[i] / qv[i]) + 1.0);
            }
        }
        if (pneeds(self, 1)) {
            auto& g = pgrad(self, 1);
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (pv[i] > 0.0) g[i] -= g0 * pv[i] / qv[i];
            }
        }
    });
}

Tensor softmax_rows(const Tensor& x) {
    if (x.rank() != 1 && x.rank() != 2) throw ShapeError("softmax_rows expects [C] or [R x C]");
    const std::size_t rows = x.rank() == 2 ? x.dim(0) : 1;
    const std::size_t cols = x.rank() == 2 ? x.dim(1) : x.dim(0);
    std::vector<double> out(x.size());
    const auto in = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = in.data() + r * cols;
        const double m = *std::max_element(row, row + cols);
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += (out[r * cols + c] = std::exp(row[c] - m));
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= s;
    }
    return Tensor::make_result(x.shape(), std::move(out), {x}, [rows, cols](Node& self) {
        auto& g = pgrad(self, 0);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.value.data() + r * cols;
            const double* gy = self.grad.data() + r * cols;
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += y[c] * gy[c];
            for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (gy[c] - dot);
        }
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_size(shape) != x.size()) {
        throw ShapeError("reshape " + shape_string(x.shape()) + " -> " + shape_string(shape));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    return Tensor::make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
        auto& g = pgrad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    }
    const auto m = static_cast<Eigen::Index>(a.dim(0));
    const auto k = static_cast<Eigen::Index>(a.dim(1));
    const auto n = static_cast<Eigen::Index>(b.dim(1));
    std::vector<double> out(static_cast<std::size_t>(m * n));
    MapMat(out.data(), m, n).noalias() = ConstMapMat(a.data().data(), m, k) * ConstMapMat(b.data().data(), k, n);
    return Tensor::make_result({a.dim(0), b.dim(1)}, std::move(out), {a, b}, [m, k, n](Node& self) {
        ConstMapMat gy(self.grad.data(), m, n);
        if (pneeds(self, 0)) {
            MapMat(pgrad(self, 0).data(), m, k).noalias() += gy * ConstMapMat(pval(self, 1).data(), k, n).transpose();
        }
        if (pneeds(self, 1)) {
            MapMat(pgrad(self, 1).data(), k, n).noalias() += ConstMapMat(pval(self, 0).data(), m, k).transpose() * gy;
        }
    });
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0) || b.size() != w.dim(1)) {
        throw ShapeError("dense " + shape_string(x.shape()) + " . " + shape_string(w.shape()) + " + " +
                         shape_string(b.shape()));
    }
    const auto m = static_cast<Eigen::Index>(x.dim(0));
    const auto k = static_cast<Eigen::Index>(x.dim(1));
    const auto n = static_cast<Eigen::Index>(w.dim(1));
    std::vector<double> out(static_cast<std::size_t>(m * n));
    MapMat y(out.data(), m, n);
    y.noalias() = ConstMapMat(x.data().data(), m, k) * ConstMapMat(w.data().data(), k, n);
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data().data(), n);
    return Tensor::make_result({x.dim(0), w.dim(1)}, std::move(out), {x, w, b}, [m, k, n](Node& self) {
        ConstMapMat gy(self.grad.data(), m, n);
        if (pneeds(self, 0)) {
            MapMat(pgrad(self, 0).data(), m, k).noalias() += gy * ConstMapMat(pval(self, 1).data(), k, n).transpose();
        }
        if (pneeds(self, 1)) {
            MapMat(pgrad(self, 1).data(), k, n).noalias() += ConstMapMat(pval(self, 0).data(), m, k).transpose() * gy;
        }
        if (pneeds(self, 2)) {
            Eigen::Map<Eigen::RowVectorXd>(pgrad(self, 2).data(), n) += gy.colwise().sum();
        }
    });
}

Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    if (kernel.rank() != 3) throw ShapeError("conv1d kernel must be [Cout x Cin x K]");
    const std::size_t kw = kernel.dim(2);
    if (kw % 2 == 0) throw ConfigError("conv1d kernel width must be odd, got " + std::to_string(kw));
    if (kw > 9) throw ConfigError("conv1d kernel width must be <= 9, got " + std::to_string(kw));
    if (x.rank() != 3 || x.dim(1) != kernel.dim(1)) {
        throw ShapeError("conv1d input " + shape_string(x.shape()) + " vs kernel " + shape_string(kernel.shape()));
    }
    const std::size_t nb = x.dim(0), cin = x.dim(1), len = x.dim(2), cout = kernel.dim(0);
    if (bias.size() != cout) throw ShapeError("conv1d bias length must equal output channels");
    const long pad = static_cast<long>(kw / 2);
    const auto L = static_cast<long>(len);

    std::vector<double> out(nb * cout * len);
    const double* xv = x.data().data();
    const double* wv = kernel.data().data();
    const double* bv = bias.data().data();
    for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t o = 0; o < cout; ++o) {
            double* y = out.data() + (b * cout + o) * len;
            std::fill(y, y + len, bv[o]);
            for (std::size_t c = 0; c < cin; ++c) {
                const double* xr = xv + (b * cin + c) * len;
                for (std::size_t k = 0; k < kw; ++k) {
                    const double w = wv[(o * cin + c) * kw + k];
                    const long off = static_cast<long>(k) - pad;
                    const long t0 = std::max(0L, -off), t1 = std::min(L, L - off);
                    for (long t = t0; t < t1; ++t) y[t] += w * xr[t + off];
                }
            }
        }
    }
    return Tensor::make_result({nb, cout, len}, std::move(out), {x, kernel, bias},
                               [nb, cin, len, cout, kw, pad, L](Node& self) {
        const double* gy = self.grad.data();
        const double* xv = pval(self, 0).data();
        const double* wv = pval(self, 1).data();
        double* gx = pneeds(self, 0) ? pgrad(self, 0).data() : nullptr;
        double* gw = pneeds(self, 1) ? pgrad(self, 1).data() : nullptr;
        double* gb = pneeds(self, 2) ? pgrad(self, 2).data() : nullptr;
        for (std::size_t b = 0; b < nb; ++b) {
            for (std::size_t o = 0; o < cout; ++o) {
                const double* g = gy + (b * cout + o) * len;
                if (gb) {
                    double s = 0.0;
                    for (std::size_t t = 0; t < len; ++t) s += g[t];
                    gb[o] += s;
                }
                for (std::size_t c = 0; c < cin; ++c) {
                    const double* xr = xv + (b * cin + c) * len;
                    for (std::size_t k = 0; k < kw; ++k) {
                        const long off = static_cast<long>(k) - pad;
                        const long t0 = std::max(0L, -off), t1 = std::min(L, L - off);
                        const std::size_t wi = (o * cin + c) * kw + k;
                        if (gw) {
                            double s = 0.0;
                            for (long t = t0; t < t1; ++t) s += g[t] * xr[t + off];
                            gw[wi] += s;
                        }
                        if (gx) {
                            double* gxr = gx + (b * cin + c) * len;
                            const double w = wv[wi];
                            for (long t = t0; t < t1; ++t) gxr[t + off] += w * g[t];
                        }
                    }
                }
            }
        }
    });
}

Tensor conv1d(const Tensor& x, const Tensor& kernel) {
    if (kernel.rank() != 3) throw ShapeError("conv1d kernel must be [Cout x Cin x K]");
    return conv1d(x, kernel, Tensor::zeros({kernel.dim(0)}));
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
        throw ShapeError("concat_cols " + shape_string(a.shape()) + " , " + shape_string(b.shape()));
    }
    const std::size_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1), cc = ca + cb;
    std::vector<double> out(rows * cc);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(a.data().data() + r * ca, ca, out.data() + r * cc);
        std::copy_n(b.data().data() + r * cb, cb, out.data() + r * cc + ca);
    }
    return Tensor::make_result({rows, cc}, std::move(out), {a, b}, [rows, ca, cb, cc](Node& self) {
        if (pneeds(self, 0)) {
            auto& g = pgrad(self, 0);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < ca; ++c) g[r * ca + c] += self.grad[r * cc + c];
        }
        if (pneeds(self, 1)) {
            auto& g = pgrad(self, 1);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cb; ++c) g[r * cb + c] += self.grad[r * cc + ca + c];
        }
    });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
    if (x.rank() == 0 || x.dim(0) == 0) throw ShapeError("gather_rows on empty tensor");
    const std::size_t n = x.dim(0), stride = x.size() / n;
    Shape shape = x.shape();
    shape[0] = rows.size();
    std::vector<double> out(rows.size() * stride);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= n) throw ShapeError("gather_rows index out of range");
        std::copy_n(x.data().data() + rows[r] * stride, stride, out.data() + r * stride);
    }
    return Tensor::make_result(std::move(shape), std::move(out), {x}, [rows, stride](Node& self) {
        auto& g = pgrad(self, 0);
        for (std::size_t r = 0; r < rows.size(); ++r)
            for (std::size_t c = 0; c < stride; ++c) g[rows[r] * stride + c] += self.grad[r * stride + c];
    });
}

Tensor gather_positions(const Tensor& x, const std::vector<std::size_t>& src) {
    if (x.rank() != 3) throw ShapeError("gather_positions expects [B x C x L]");
    const std::size_t nb = x.dim(0), nc = x.dim(1), len = x.dim(2);
    if (src.size() != nb * len) throw ShapeError("gather_positions: index table must be B*L");
    for (auto s : src)
        if (s >= len) throw ShapeError("gather_positions index out of range");
    std::vector<double> out(x.size());
    const double* xv = x.data().data();
    for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t c = 0; c < nc; ++c)
            for (std::size_t j = 0; j < len; ++j) out[(b * nc + c) * len + j] = xv[(b * nc + c) * len + src[b * len + j]];
    return Tensor::make_result(x.shape(), std::move(out), {x}, [src, nb, nc, len](Node& self) {
        auto& g = pgrad(self, 0);
        for (std::size_t b = 0; b < nb; ++b)
            for (std::size_t c = 0; c < nc; ++c)
                for (std::size_t j = 0; j < len; ++j)
                    g[(b * nc + c) * len + src[b * len + j]] += self.grad[(b * nc + c) * len + j];
    });
}

Tensor gather_columns(const Tensor& x, const std::vector<std::size_t>& cols) {
    if (x.rank() < 1) throw ShapeError("gather_columns needs at least one axis");
    const std::size_t len = x.shape().back();
    const std::size_t outer = x.size() / std::max<std::size_t>(len, 1);
    for (auto c : cols)
        if (c >= len) throw ShapeError("gather_columns index out of range");
    const std::size_t nout = cols.size();
    Shape shape = x.shape();
    shape.back() = nout;
    std::vector<double> out(outer * nout);
    const double* xv = x.data().data();
    for (std::size_t r = 0; r < outer; ++r)
        for (std::size_t j = 0; j < nout; ++j) out[r * nout + j] = xv[r * len + cols[j]];
    return Tensor::make_result(std::move(shape), std::move(out), {x}, [cols, outer, len, nout](Node& self) {
        auto& g = pgrad(self, 0);
        for (std::size_t r = 0; r < outer; ++r)
            for (std::size_t j = 0; j < nout; ++j) g[r * len + cols[j]] += self.grad[r * nout + j];
    });
}

}  // namespace smi::ad
