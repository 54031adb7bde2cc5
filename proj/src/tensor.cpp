#include "hag/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace hag {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t p = 1;
    for (auto d : shape) p *= d;
    return p;
}

GradTape* op_tape(std::initializer_list<const Tensor*> ts) {
    GradTape* tape = nullptr;
    for (const Tensor* t : ts) {
        if (!t->on_tape()) continue;
        if (tape != nullptr && tape != t->tape())
            throw ValueError("operands belong to different gradient tapes");
        tape = t->tape();
    }
    return tape;
}

void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a rank-2 tensor, got " + t.shape_str());
}

void accumulate(std::vector<double>& dst, const std::vector<double>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

// --- Tensor ---------------------------------------------------------------

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::make_shared<std::vector<double>>(std::move(data))) {
    if (shape_product(shape_) != data_->size())
        throw ShapeError("tensor data size " + std::to_string(data_->size()) + " does not match shape " + shape_str());
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    std::size_t n = shape_product(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
    std::size_t n = shape_product(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
}

Tensor Tensor::vector(std::vector<double> data) {
    std::size_t n = data.size();
    return Tensor({n}, std::move(data));
}

Tensor Tensor::glorot(std::size_t rows, std::size_t cols, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::vector<double> data(rows * cols);
    for (auto& v : data) v = (2.0 * rng.next_double() - 1.0) * limit;
    return matrix(rows, cols, std::move(data));
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
    os << ']';
    return os.str();
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str());
    return (*data_)[0];
}

Tensor Tensor::clone() const {
    Tensor t(shape_, *data_);
    t.requires_grad_ = requires_grad_;
    return t;
}

Tensor Tensor::detached() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
}

void Tensor::ensure_finite(const char* op) const {
    for (double v : *data_) {
        if (!std::isfinite(v))
            throw ValueError(std::string(op) + ": non-finite value in tensor " + shape_str());
    }
}

// --- GradTape ---------------------------------------------------------------

int GradTape::add_node(std::size_t size, BackwardFn back) {
    nodes_.push_back(Node{size, std::move(back)});
    return static_cast<int>(nodes_.size()) - 1;
}

std::vector<double>& GradTape::grad_buf(int node) {
    if (grads_[static_cast<std::size_t>(node)].empty())
        grads_[static_cast<std::size_t>(node)].assign(nodes_[static_cast<std::size_t>(node)].size, 0.0);
    return grads_[static_cast<std::size_t>(node)];
}

Tensor GradTape::watch(const Tensor& t) {
    if (!t.requires_grad()) return t;
    if (t.tape_ == this && t.node_ >= 0) return t;
    auto it = leaves_.find(t.buffer_id());
    Tensor out = t;
    if (it != leaves_.end()) {
        attach(out, it->second);
        return out;
    }
    int node = add_node(t.size(), nullptr);
    leaves_.emplace(t.buffer_id(), node);
    attach(out, node);
    return out;
}

int GradTape::node_of(const Tensor& t) const {
    if (t.tape_ == this && t.node_ >= 0) return t.node_;
    auto it = leaves_.find(t.buffer_id());
    if (it != leaves_.end()) return it->second;
    throw ValueError("tensor is not on this gradient tape");
}

void GradTape::backward(const Tensor& loss) {
    if (loss.size() != 1) throw ValueError("backward: loss must be a scalar, got " + loss.shape_str());
    if (loss.tape_ != this || loss.node_ < 0) throw ValueError("backward: loss is not on this gradient tape");
    if (swept_) throw ValueError("backward: tape already swept");
    swept_ = true;
    grads_.assign(nodes_.size(), {});
    grad_buf(loss.node_)[0] = 1.0;
    for (int i = loss.node_; i >= 0; --i) {
        auto& g = grads_[static_cast<std::size_t>(i)];
        if (g.empty()) continue;
        auto& back = nodes_[static_cast<std::size_t>(i)].back;
        if (back) back(g, *this);
    }
}

bool GradTape::has_grad(const Tensor& t) const {
    if (!swept_) return false;
    int node;
    if (t.tape_ == this && t.node_ >= 0) {
        node = t.node_;
    } else {
        auto it = leaves_.find(t.buffer_id());
        if (it == leaves_.end()) return false;
        node = it->second;
    }
    return !grads_[static_cast<std::size_t>(node)].empty();
}

Tensor GradTape::grad(const Tensor& t) const {
    if (!swept_) throw ValueError("grad: backward() has not been run on this tape");
    int node = node_of(t);
    const auto& g = grads_[static_cast<std::size_t>(node)];
    if (g.empty()) return Tensor::zeros(t.shape());
    return Tensor(t.shape(), g);
}

// --- op helpers -------------------------------------------------------------

namespace {

Tensor finish(GradTape* tape, Tensor out, GradTape::BackwardFn back) {
    if (tape != nullptr) {
        int node = tape->add_node(out.size(), std::move(back));
        tape->attach(out, node);
    }
    return out;
}

}  // namespace

// --- ops --------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions do not match, " + a.shape_str() + " vs " + b.shape_str());
    a.ensure_finite("matmul");
    b.ensure_finite("matmul");

    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    std::vector<double> c(n * m, 0.0);
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    for (std::size_t i = 0; i < n; ++i) {
        double* ci = c.data() + i * m;
        const double* ai = pa + i * k;
        for (std::size_t t = 0; t < k; ++t) {
            const double av = ai[t];
            if (av == 0.0) continue;
            const double* bt = pb + t * m;
            for (std::size_t j = 0; j < m; ++j) ci[j] += av * bt[j];
        }
    }

    GradTape* tape = op_tape({&a, &b});
    int na = a.node(), nb = b.node();
    auto av = a.values();
    auto bv = b.values();
    return finish(tape, Tensor::matrix(n, m, std::move(c)),
                  [na, nb, n, k, m, av = std::move(av), bv = std::move(bv)](const std::vector<double>& g, GradTape& t) {
                      if (na >= 0) {
                          auto& da = t.grad_buf(na);
                          // dA = g @ B^T
                          for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t tt = 0; tt < k; ++tt) {
                                  double s = 0.0;
                                  const double* gi = g.data() + i * m;
                                  const double* bt = bv.data() + tt * m;
                                  for (std::size_t j = 0; j < m; ++j) s += gi[j] * bt[j];
                                  da[i * k + tt] += s;
                              }
                      }
                      if (nb >= 0) {
                          auto& db = t.grad_buf(nb);
                          // dB = A^T @ g
                          for (std::size_t i = 0; i < n; ++i) {
                              const double* ai = av.data() + i * k;
                              const double* gi = g.data() + i * m;
                              for (std::size_t tt = 0; tt < k; ++tt) {
                                  const double a_it = ai[tt];
                                  if (a_it == 0.0) continue;
                                  double* dbt = db.data() + tt * m;
                                  for (std::size_t j = 0; j < m; ++j) dbt[j] += a_it * gi[j];
                              }
                          }
                      }
                  });
}

Tensor transpose(const Tensor& a) {
    require_matrix(a, "transpose");
    a.ensure_finite("transpose");
    const std::size_t n = a.rows(), m = a.cols();
    std::vector<double> out(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[j * n + i] = a.values()[i * m + j];
    int na = a.node();
    return finish(op_tape({&a}), Tensor::matrix(m, n, std::move(out)),
                  [na, n, m](const std::vector<double>& g, GradTape& t) {
                      if (na < 0) return;
                      auto& da = t.grad_buf(na);
                      for (std::size_t i = 0; i < n; ++i)
                          for (std::size_t j = 0; j < m; ++j) da[i * m + j] += g[j * n + i];
                  });
}

namespace {

Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* op, double (*fwd)(double, double),
                          void (*bwd)(double ga, double a, double b, double& da, double& db)) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    a.ensure_finite(op);
    b.ensure_finite(op);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.values()[i], b.values()[i]);
    int na = a.node(), nb = b.node();
    auto av = a.values();
    auto bv = b.values();
    return finish(op_tape({&a, &b}), Tensor(a.shape(), std::move(out)),
                  [na, nb, av = std::move(av), bv = std::move(bv), bwd](const std::vector<double>& g, GradTape& t) {
                      std::vector<double>* da = na >= 0 ? &t.grad_buf(na) : nullptr;
                      std::vector<double>* db = nb >= 0 ? &t.grad_buf(nb) : nullptr;
                      double dummy = 0.0;
                      for (std::size_t i = 0; i < g.size(); ++i) {
                          double& ra = da ? (*da)[i] : dummy;
                          double& rb = db ? (*db)[i] : dummy;
                          bwd(g[i], av[i], bv[i], ra, rb);
                      }
                  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double g, double, double, double& da, double& db) {
            da += g;
            db += g;
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double g, double, double, double& da, double& db) {
            da += g;
            db -= g;
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double g, double x, double y, double& da, double& db) {
            da += g * y;
            db += g * x;
        });
}

Tensor scale(const Tensor& a, double c) {
    a.ensure_finite("scale");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
    int na = a.node();
    return finish(op_tape({&a}), Tensor(a.shape(), std::move(out)),
                  [na, c](const std::vector<double>& g, GradTape& t) {
                      if (na < 0) return;
                      auto& da = t.grad_buf(na);
                      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * c;
                  });
}

Tensor add_row_vector(const Tensor& m, const Tensor& v) {
    require_matrix(m, "add_row_vector");
    if (v.size() != m.cols())
        throw ShapeError("add_row_vector: vector size " + v.shape_str() + " does not match matrix " + m.shape_str());
    m.ensure_finite("add_row_vector");
    v.ensure_finite("add_row_vector");
    const std::size_t n = m.rows(), d = m.cols();
    std::vector<double> out(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = m.values()[i * d + j] + v.values()[j];
    int nm = m.node(), nv = v.node();
    return finish(op_tape({&m, &v}), Tensor::matrix(n, d, std::move(out)),
                  [nm, nv, n, d](const std::vector<double>& g, GradTape& t) {
                      if (nm >= 0) accumulate(t.grad_buf(nm), g);
                      if (nv >= 0) {
                          auto& dv = t.grad_buf(nv);
                          for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < d; ++j) dv[j] += g[i * d + j];
                      }
                  });
}

Tensor gelu(const Tensor& x) {
    x.ensure_finite("gelu");
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.values()[i];
        out[i] = v * 0.5 * (1.0 + std::erf(v * kInvSqrt2));
    }
    int nx = x.node();
    auto xv = x.values();
    return finish(op_tape({&x}), Tensor(x.shape(), std::move(out)),
                  [nx, xv = std::move(xv)](const std::vector<double>& g, GradTape& t) {
                      if (nx < 0) return;
                      auto& dx = t.grad_buf(nx);
                      for (std::size_t i = 0; i < g.size(); ++i) {
                          const double v = xv[i];
                          const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                          dx[i] += g[i] * (cdf + v * pdf);
                      }
                  });
}

Tensor tanh(const Tensor& x) {
    x.ensure_finite("tanh");
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.values()[i]);
    int nx = x.node();
    auto ov = out;
    return finish(op_tape({&x}), Tensor(x.shape(), std::move(out)),
                  [nx, ov = std::move(ov)](const std::vector<double>& g, GradTape& t) {
                      if (nx < 0) return;
                      auto& dx = t.grad_buf(nx);
                      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * (1.0 - ov[i] * ov[i]);
                  });
}

Tensor sigmoid(const Tensor& x) {
    x.ensure_finite("sigmoid");
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.values()[i];
        out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    int nx = x.node();
    auto ov = out;
    return finish(op_tape({&x}), Tensor(x.shape(), std::move(out)),
                  [nx, ov = std::move(ov)](const std::vector<double>& g, GradTape& t) {
                      if (nx < 0) return;
                      auto& dx = t.grad_buf(nx);
                      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * ov[i] * (1.0 - ov[i]);
                  });
}

Tensor layer_norm(const Tensor& h, const Tensor& gamma, const Tensor& beta, double eps) {
    require_matrix(h, "layer_norm");
    const std::size_t n = h.rows(), d = h.cols();
    if (gamma.size() != d || beta.size() != d)
        throw ShapeError("layer_norm: gamma/beta must have " + std::to_string(d) + " elements");
    h.ensure_finite("layer_norm");
    gamma.ensure_finite("layer_norm");
    beta.ensure_finite("layer_norm");

    std::vector<double> out(n * d);
    std::vector<double> xhat(n * d);
    std::vector<double> istd(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = h.values().data() + i * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(d);
        istd[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (row[j] - mean) * istd[i];
            out[i * d + j] = xhat[i * d + j] * gamma.values()[j] + beta.values()[j];
        }
    }
    int nh = h.node(), ng = gamma.node(), nb = beta.node();
    auto gv = gamma.values();
    return finish(op_tape({&h, &gamma, &beta}), Tensor::matrix(n, d, std::move(out)),
                  [nh, ng, nb, n, d, xhat = std::move(xhat), istd = std::move(istd),
                   gv = std::move(gv)](const std::vector<double>& g, GradTape& t) {
                      if (ng >= 0) {
                          auto& dg = t.grad_buf(ng);
                          for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < d; ++j) dg[j] += g[i * d + j] * xhat[i * d + j];
                      }
                      if (nb >= 0) {
                          auto& db = t.grad_buf(nb);
                          for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < d; ++j) db[j] += g[i * d + j];
                      }
                      if (nh >= 0) {
                          auto& dh = t.grad_buf(nh);
                          const double dn = static_cast<double>(d);
                          for (std::size_t i = 0; i < n; ++i) {
                              double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                              for (std::size_t j = 0; j < d; ++j) {
                                  const double dxh = g[i * d + j] * gv[j];
                                  sum_dxhat += dxh;
                                  sum_dxhat_xhat += dxh * xhat[i * d + j];
                              }
                              for (std::size_t j = 0; j < d; ++j) {
                                  const double dxh = g[i * d + j] * gv[j];
                                  dh[i * d + j] +=
                                      istd[i] * (dxh - (sum_dxhat + xhat[i * d + j] * sum_dxhat_xhat) / dn);
                              }
                          }
                      }
                  });
}

namespace {

// softmax over a contiguous span, max-subtracted.
void softmax_span(const double* in, double* out, std::size_t n) {
    double mx = in[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = std::exp(in[i] - mx);
        sum += out[i];
    }
    for (std::size_t i = 0; i < n; ++i) out[i] /= sum;
}

void softmax_span_backward(const double* y, const double* g, double* dx, std::size_t n) {
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) dot += g[i] * y[i];
    for (std::size_t i = 0; i < n; ++i) dx[i] += y[i] * (g[i] - dot);
}

}  // namespace

Tensor softmax(const Tensor& v) {
    if (v.size() == 0) throw ShapeError("softmax: empty input");
    v.ensure_finite("softmax");
    std::vector<double> out(v.size());
    softmax_span(v.values().data(), out.data(), v.size());
    int nv = v.node();
    auto ov = out;
    return finish(op_tape({&v}), Tensor(v.shape(), std::move(out)),
                  [nv, ov = std::move(ov)](const std::vector<double>& g, GradTape& t) {
                      if (nv < 0) return;
                      softmax_span_backward(ov.data(), g.data(), t.grad_buf(nv).data(), ov.size());
                  });
}

Tensor softmax_rows(const Tensor& m) {
    require_matrix(m, "softmax_rows");
    m.ensure_finite("softmax_rows");
    const std::size_t n = m.rows(), d = m.cols();
    std::vector<double> out(n * d);
    for (std::size_t i = 0; i < n; ++i) softmax_span(m.values().data() + i * d, out.data() + i * d, d);
    int nm = m.node();
    auto ov = out;
    return finish(op_tape({&m}), Tensor::matrix(n, d, std::move(out)),
                  [nm, n, d, ov = std::move(ov)](const std::vector<double>& g, GradTape& t) {
                      if (nm < 0) return;
                      auto& dm = t.grad_buf(nm);
                      for (std::size_t i = 0; i < n; ++i)
                          softmax_span_backward(ov.data() + i * d, g.data() + i * d, dm.data() + i * d, d);
                  });
}

Tensor cross_entropy_smoothed(const Tensor& logits, std::size_t label, double epsilon) {
    const std::size_t c = logits.size();
    if (c == 0) throw ShapeError("cross_entropy_smoothed: empty logits");
    if (label >= c)
        throw ValueError("cross_entropy_smoothed: label " + std::to_string(label) + " out of range for " +
                         std::to_string(c) + " classes");
    if (epsilon < 0.0 || epsilon >= 1.0) throw ValueError("cross_entropy_smoothed: epsilon must lie in [0, 1)");
    logits.ensure_finite("cross_entropy_smoothed");

    std::vector<double> target(c, c > 1 ? epsilon / static_cast<double>(c - 1) : 0.0);
    target[label] = c > 1 ? 1.0 - epsilon : 1.0;

    const double* z = logits.values().data();
    double mx = z[0];
    for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, z[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < c; ++i) sum += std::exp(z[i] - mx);
    const double lse = mx + std::log(sum);
    double loss = 0.0;
    for (std::size_t i = 0; i < c; ++i) loss -= target[i] * (z[i] - lse);

    std::vector<double> p(c);
    softmax_span(z, p.data(), c);
    int nl = logits.node();
    return finish(op_tape({&logits}), Tensor::scalar(loss),
                  [nl, p = std::move(p), target = std::move(target)](const std::vector<double>& g, GradTape& t) {
                      if (nl < 0) return;
                      auto& dl = t.grad_buf(nl);
                      for (std::size_t i = 0; i < dl.size(); ++i) dl[i] += g[0] * (p[i] - target[i]);
                  });
}

Tensor smooth_top1_svm(const Tensor& logits, std::size_t label, double tau, double alpha) {
    const std::size_t c = logits.size();
    if (c == 0) throw ShapeError("smooth_top1_svm: empty logits");
    if (label >= c)
        throw ValueError("smooth_top1_svm: label " + std::to_string(label) + " out of range for " +
                         std::to_string(c) + " classes");
    if (tau <= 0.0) throw ValueError("smooth_top1_svm: tau must be > 0");
    if (alpha < 0.0) throw ValueError("smooth_top1_svm: alpha must be >= 0");
    logits.ensure_finite("smooth_top1_svm");

    const double* z = logits.values().data();
    std::vector<double> margins(c);
    for (std::size_t j = 0; j < c; ++j)
        margins[j] = (z[j] + (j == label ? 0.0 : alpha) - z[label]) / tau;
    std::vector<double> w(c);
    softmax_span(margins.data(), w.data(), c);
    double mx = margins[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, margins[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(margins[j] - mx);
    const double loss = tau * (mx + std::log(sum));

    int nl = logits.node();
    return finish(op_tape({&logits}), Tensor::scalar(loss),
                  [nl, label, w = std::move(w)](const std::vector<double>& g, GradTape& t) {
                      if (nl < 0) return;
                      auto& dl = t.grad_buf(nl);
                      for (std::size_t j = 0; j < dl.size(); ++j)
                          dl[j] += g[0] * (w[j] - (j == label ? 1.0 : 0.0));
                  });
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
    if (p < 0.0 || p >= 1.0) throw ValueError("dropout: p must lie in [0, 1)");
    if (!training || p == 0.0) return x;
    x.ensure_finite("dropout");
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(x.size());
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        mask[i] = rng.next_double() < p ? 0.0 : keep_scale;
        out[i] = x.values()[i] * mask[i];
    }
    int nx = x.node();
    return finish(op_tape({&x}), Tensor(x.shape(), std::move(out)),
                  [nx, mask = std::move(mask)](const std::vector<double>& g, GradTape& t) {
                      if (nx < 0) return;
                      auto& dx = t.grad_buf(nx);
                      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * mask[i];
                  });
}

Tensor gather_rows(const Tensor& m, const std::vector<std::size_t>& ids) {
    require_matrix(m, "gather_rows");
    m.ensure_finite("gather_rows");
    const std::size_t n = m.rows(), d = m.cols();
    for (std::size_t id : ids)
        if (id >= n)
            throw ValueError("gather_rows: row id " + std::to_string(id) + " out of range for " +
                             std::to_string(n) + " rows");
    std::vector<double> out(ids.size() * d);
    for (std::size_t r = 0; r < ids.size(); ++r)
        std::copy_n(m.values().data() + ids[r] * d, d, out.data() + r * d);
    int nm = m.node();
    return finish(op_tape({&m}), Tensor::matrix(ids.size(), d, std::move(out)),
                  [nm, d, ids](const std::vector<double>& g, GradTape& t) {
                      if (nm < 0) return;
                      auto& dm = t.grad_buf(nm);
                      for (std::size_t r = 0; r < ids.size(); ++r)
                          for (std::size_t j = 0; j < d; ++j) dm[ids[r] * d + j] += g[r * d + j];
                  });
}

Tensor concat_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw ShapeError("concat_rows: empty input list");
    const std::size_t d = rows.front().cols();
    std::size_t n = 0;
    for (const auto& r : rows) {
        require_matrix(r, "concat_rows");
        if (r.cols() != d) throw ShapeError("concat_rows: inconsistent column counts");
        r.ensure_finite("concat_rows");
        n += r.rows();
    }
    std::vector<double> out;
    out.reserve(n * d);
    std::vector<int> nodes;
    std::vector<std::size_t> sizes;
    GradTape* tape = nullptr;
    for (const auto& r : rows) {
        out.insert(out.end(), r.values().begin(), r.values().end());
        nodes.push_back(r.node());
        sizes.push_back(r.size());
        if (r.on_tape()) {
            if (tape != nullptr && tape != r.tape())
                throw ValueError("concat_rows: operands belong to different gradient tapes");
            tape = r.tape();
        }
    }
    return finish(tape, Tensor::matrix(n, d, std::move(out)),
                  [nodes = std::move(nodes), sizes = std::move(sizes)](const std::vector<double>& g, GradTape& t) {
                      std::size_t off = 0;
                      for (std::size_t r = 0; r < nodes.size(); ++r) {
                          if (nodes[r] >= 0) {
                              auto& dr = t.grad_buf(nodes[r]);
                              for (std::size_t i = 0; i < sizes[r]; ++i) dr[i] += g[off + i];
                          }
                          off += sizes[r];
                      }
                  });
}

Tensor segment_mean_rows(const Tensor& m, std::size_t segments) {
    require_matrix(m, "segment_mean_rows");
    if (segments == 0) throw ValueError("segment_mean_rows: segments must be >= 1");
    m.ensure_finite("segment_mean_rows");
    const std::size_t n = m.rows(), d = m.cols();
    const std::size_t group = (n + segments - 1) / segments;
    std::vector<double> out(segments * d, 0.0);
    for (std::size_t s = 0; s < segments; ++s) {
        for (std::size_t t = 0; t < group; ++t) {
            const std::size_t src = std::min(s * group + t, n - 1);
            for (std::size_t j = 0; j < d; ++j) out[s * d + j] += m.values()[src * d + j];
        }
        for (std::size_t j = 0; j < d; ++j) out[s * d + j] /= static_cast<double>(group);
    }
    int nm = m.node();
    return finish(op_tape({&m}), Tensor::matrix(segments, d, std::move(out)),
                  [nm, n, d, group, segments](const std::vector<double>& g, GradTape& t) {
                      if (nm < 0) return;
                      auto& dm = t.grad_buf(nm);
                      const double inv = 1.0 / static_cast<double>(group);
                      for (std::size_t s = 0; s < segments; ++s)
                          for (std::size_t tt = 0; tt < group; ++tt) {
                              const std::size_t src = std::min(s * group + tt, n - 1);
                              for (std::size_t j = 0; j < d; ++j) dm[src * d + j] += g[s * d + j] * inv;
                          }
                  });
}

Tensor sum_all(const Tensor& x) {
    x.ensure_finite("sum_all");
    double s = 0.0;
    for (double v : x.values()) s += v;
    int nx = x.node();
    std::size_t n = x.size();
    return finish(op_tape({&x}), Tensor::scalar(s), [nx, n](const std::vector<double>& g, GradTape& t) {
        if (nx < 0) return;
        auto& dx = t.grad_buf(nx);
        for (std::size_t i = 0; i < n; ++i) dx[i] += g[0];
    });
}

Tensor identity_minus(double c, const Tensor& x) {
    require_matrix(x, "identity_minus");
    if (x.rows() != x.cols()) throw ShapeError("identity_minus: matrix must be square, got " + x.shape_str());
    x.ensure_finite("identity_minus");
    const std::size_t n = x.rows();
    std::vector<double> out(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = (i == j ? c : 0.0) - x.values()[i * n + j];
    int nx = x.node();
    return finish(op_tape({&x}), Tensor::matrix(n, n, std::move(out)),
                  [nx](const std::vector<double>& g, GradTape& t) {
                      if (nx < 0) return;
                      auto& dx = t.grad_buf(nx);
                      for (std::size_t i = 0; i < g.size(); ++i) dx[i] -= g[i];
                  });
}

namespace {

// Shared by the two induced-norm ops: max over lines of abs line sums, where
// a "line" is a row (inf norm) or a column (one norm). Ties take the lowest
// index, which matters only for subgradient choice.
Tensor line_norm(const Tensor& a, bool rows_are_lines, const char* op) {
    require_matrix(a, op);
    a.ensure_finite(op);
    const std::size_t n = a.rows(), m = a.cols();
    const std::size_t lines = rows_are_lines ? n : m;
    const std::size_t width = rows_are_lines ? m : n;
    double best = -1.0;
    std::size_t best_line = 0;
    for (std::size_t l = 0; l < lines; ++l) {
        double s = 0.0;
        for (std::size_t w = 0; w < width; ++w) {
            const std::size_t idx = rows_are_lines ? l * m + w : w * m + l;
            s += std::abs(a.values()[idx]);
        }
        if (s > best) {
            best = s;
            best_line = l;
        }
    }
    int na = a.node();
    auto av = a.values();
    return finish(op_tape({&a}), Tensor::scalar(best),
                  [na, best_line, width, m, rows_are_lines, av = std::move(av)](const std::vector<double>& g,
                                                                                GradTape& t) {
                      if (na < 0) return;
                      auto& da = t.grad_buf(na);
                      for (std::size_t w = 0; w < width; ++w) {
                          const std::size_t idx = rows_are_lines ? best_line * m + w : w * m + best_line;
                          const double v = av[idx];
                          da[idx] += g[0] * (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
                      }
                  });
}

}  // namespace

Tensor norm_inf_scalar(const Tensor& a) { return line_norm(a, true, "norm_inf_scalar"); }

Tensor norm_one_scalar(const Tensor& a) { return line_norm(a, false, "norm_one_scalar"); }

Tensor div_by_scalar(const Tensor& x, const Tensor& s) {
    if (s.size() != 1) throw ShapeError("div_by_scalar: divisor must be a scalar tensor");
    x.ensure_finite("div_by_scalar");
    s.ensure_finite("div_by_scalar");
    const double sv = s.values()[0];
    if (sv == 0.0) throw ValueError("div_by_scalar: division by zero");
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] / sv;
    int nx = x.node(), ns = s.node();
    auto xv = x.values();
    return finish(op_tape({&x, &s}), Tensor(x.shape(), std::move(out)),
                  [nx, ns, sv, xv = std::move(xv)](const std::vector<double>& g, GradTape& t) {
                      if (nx >= 0) {
                          auto& dx = t.grad_buf(nx);
                          for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] / sv;
                      }
                      if (ns >= 0) {
                          double acc = 0.0;
                          for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
                          t.grad_buf(ns)[0] -= acc / (sv * sv);
                      }
                  });
}

// --- optimizer ----------------------------------------------------------

void adam_step(Tensor& param, const Tensor& grad, AdamState& state, const AdamConfig& cfg) {
    if (param.shape() != grad.shape())
        throw ShapeError("adam_step: parameter " + param.shape_str() + " and gradient " + grad.shape_str() +
                         " shapes differ");
    grad.ensure_finite("adam_step");
    const std::size_t n = param.size();
    if (state.m.empty()) {
        state.m.assign(n, 0.0);
        state.v.assign(n, 0.0);
    }
    if (state.m.size() != n || state.v.size() != n)
        throw ShapeError("adam_step: optimizer state does not match parameter shape");

    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step_count));
    auto& p = param.mutable_values();
    const auto& g = grad.values();
    for (std::size_t i = 0; i < n; ++i) {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        p[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p[i]);
    }
}

}  // namespace hag
