#include "xmodal/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace xmodal {

std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

namespace {

[[noreturn]] void shape_error(const std::string& op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

thread_local bool g_grad_enabled = true;

} // namespace

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor::Tensor(std::vector<double> d, Shape s, bool rg)
    : data(std::move(d)), shape(std::move(s)), requires_grad(rg) {
    if (numel(shape) != data.size())
        throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                    std::to_string(data.size()) + " elements");
}

double Tensor::item() const {
    require(data.size() == 1, "item: tensor is not scalar, shape " + shape_str(shape));
    return data[0];
}

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() { grad.assign(data.size(), 0.0); }

TensorPtr make_tensor(std::vector<double> data, Shape shape, bool requires_grad) {
    return std::make_shared<Tensor>(std::move(data), std::move(shape), requires_grad);
}

TensorPtr zeros(Shape shape, bool requires_grad) {
    const std::size_t n = numel(shape);
    return make_tensor(std::vector<double>(n, 0.0), std::move(shape), requires_grad);
}

TensorPtr full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = numel(shape);
    return make_tensor(std::vector<double>(n, value), std::move(shape), requires_grad);
}

TensorPtr scalar_tensor(double value, bool requires_grad) {
    return make_tensor({value}, {1}, requires_grad);
}

TensorPtr randn(Shape shape, Rng& rng, double std, bool requires_grad) {
    std::vector<double> d(numel(shape));
    for (auto& x : d) x = rng.normal() * std;
    return make_tensor(std::move(d), std::move(shape), requires_grad);
}

TensorPtr truncated_normal(Shape shape, Rng& rng, double std, bool requires_grad) {
    std::vector<double> d(numel(shape));
    for (auto& x : d) x = rng.truncated_normal(std);
    return make_tensor(std::move(d), std::move(shape), requires_grad);
}

namespace {

// Builds the output node and wires the graph edges when grads are on.
TensorPtr make_op(std::vector<double> data, Shape shape, std::vector<TensorPtr> inputs,
                  const char* op_name, std::function<void(Tensor*)> bw) {
    bool rg = false;
    for (const auto& t : inputs) rg = rg || t->requires_grad;
    rg = rg && g_grad_enabled;
    auto out = make_tensor(std::move(data), std::move(shape), rg);
    if (rg) {
        out->prev = std::move(inputs);
        out->op = op_name;
        Tensor* raw = out.get();
        out->backward_fn = [raw, bw = std::move(bw)]() { bw(raw); };
    }
    return out;
}

} // namespace

void backward(const TensorPtr& loss) {
    require(loss != nullptr, "backward: null loss");
    require(loss->data.size() == 1,
            "backward: loss must be scalar, got shape " + shape_str(loss->shape));

    // Iterative DFS topological sort over prev edges.
    std::vector<Tensor*> topo;
    std::unordered_set<Tensor*> visited;
    struct Frame {
        Tensor* node;
        std::size_t next_child;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.get(), 0});
    visited.insert(loss.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_child < f.node->prev.size()) {
            Tensor* child = f.node->prev[f.next_child++].get();
            if (!visited.count(child)) {
                visited.insert(child);
                stack.push_back({child, 0});
            }
        } else {
            topo.push_back(f.node);
            stack.pop_back();
        }
    }

    for (Tensor* n : topo) n->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn();
    }
}

// ---- elementwise ----------------------------------------------------------

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) shape_error("add", a->shape, b->shape);
    std::vector<double> d(a->size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] + b->data[i];
    return make_op(std::move(d), a->shape, {a, b}, "add", [](Tensor* out) {
        auto& a = out->prev[0];
        auto& b = out->prev[1];
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i) b->grad[i] += out->grad[i];
        }
    });
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) shape_error("sub", a->shape, b->shape);
    std::vector<double> d(a->size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] - b->data[i];
    return make_op(std::move(d), a->shape, {a, b}, "sub", [](Tensor* out) {
        auto& a = out->prev[0];
        auto& b = out->prev[1];
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i) b->grad[i] -= out->grad[i];
        }
    });
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) shape_error("mul", a->shape, b->shape);
    std::vector<double> d(a->size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] * b->data[i];
    return make_op(std::move(d), a->shape, {a, b}, "mul", [](Tensor* out) {
        auto& a = out->prev[0];
        auto& b = out->prev[1];
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i)
                a->grad[i] += out->grad[i] * b->data[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i)
                b->grad[i] += out->grad[i] * a->data[i];
        }
    });
}

TensorPtr scale(const TensorPtr& a, double c) {
    std::vector<double> d(a->size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] * c;
    return make_op(std::move(d), a->shape, {a}, "scale", [c](Tensor* out) {
        auto& a = out->prev[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i] * c;
    });
}

TensorPtr add_scalar(const TensorPtr& a, double c) {
    std::vector<double> d(a->size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] + c;
    return make_op(std::move(d), a->shape, {a}, "add_scalar", [](Tensor* out) {
        auto& a = out->prev[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i];
    });
}

TensorPtr square(const TensorPtr& a) {
    std::vector<double> d(a->size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] * a->data[i];
    return make_op(std::move(d), a->shape, {a}, "square", [](Tensor* out) {
        auto& a = out->prev[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < out->grad.size(); ++i)
            a->grad[i] += out->grad[i] * 2.0 * a->data[i];
    });
}

TensorPtr sqrt_eps(const TensorPtr& a, double eps) {
    std::vector<double> d(a->size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::sqrt(a->data[i] + eps);
    return make_op(std::move(d), a->shape, {a}, "sqrt_eps", [](Tensor* out) {
        auto& a = out->prev[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < out->grad.size(); ++i)
            a->grad[i] += out->grad[i] * 0.5 / out->data[i];
    });
}

TensorPtr log_op(const TensorPtr& a) {
    std::vector<double> d(a->size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::log(a->data[i]);
    return make_op(std::move(d), a->shape, {a}, "log", [](Tensor* out) {
        auto& a = out->prev[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < out->grad.size(); ++i)
            a->grad[i] += out->grad[i] / a->data[i];
    });
}

TensorPtr relu(const TensorPtr& a) {
    std::vector<double> d(a->size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] > 0.0 ? a->data[i] : 0.0;
    return make_op(std::move(d), a->shape, {a}, "relu", [](Tensor* out) {
        auto& a = out->prev[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < out->grad.size(); ++i)
            if (a->data[i] > 0.0) a->grad[i] += out->grad[i];
    });
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
} // namespace

TensorPtr gelu(const TensorPtr& a) {
    std::vector<double> d(a->size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        double x = a->data[i];
        d[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    }
    return make_op(std::move(d), a->shape, {a}, "gelu", [](Tensor* out) {
        auto& a = out->prev[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < out->grad.size(); ++i) {
            double x = a->data[i];
            double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            a->grad[i] += out->grad[i] * (cdf + x * pdf);
        }
    });
}

// ---- linear algebra --------------------------------------------------------

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    require(a->shape.size() == 2 && b->shape.size() == 2,
            "matmul: needs 2-D operands, got " + shape_str(a->shape) + " and " +
                shape_str(b->shape));
    if (a->shape[1] != b->shape[0]) shape_error("matmul", a->shape, b->shape);
    const int m = a->shape[0], k = a->shape[1], n = b->shape[1];
    std::vector<double> d(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        const double* arow = &a->data[static_cast<std::size_t>(i) * k];
        double* drow = &d[static_cast<std::size_t>(i) * n];
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = &b->data[static_cast<std::size_t>(p) * n];
            for (int j = 0; j < n; ++j) drow[j] += av * brow[j];
        }
    }
    return make_op(std::move(d), {m, n}, {a, b}, "matmul", [m, k, n](Tensor* out) {
        auto& a = out->prev[0];
        auto& b = out->prev[1];
        if (a->requires_grad) {
            a->ensure_grad();
            // dA = dY * B^T
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    const double g = out->grad[static_cast<std::size_t>(i) * n + j];
                    if (g == 0.0) continue;
                    for (int p = 0; p < k; ++p)
                        a->grad[static_cast<std::size_t>(i) * k + p] +=
                            g * b->data[static_cast<std::size_t>(p) * n + j];
                }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            // dB = A^T * dY
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    const double av = a->data[static_cast<std::size_t>(i) * k + p];
                    if (av == 0.0) continue;
                    for (int j = 0; j < n; ++j)
                        b->grad[static_cast<std::size_t>(p) * n + j] +=
                            av * out->grad[static_cast<std::size_t>(i) * n + j];
                }
        }
    });
}

TensorPtr transpose(const TensorPtr& a) {
    require(a->shape.size() == 2, "transpose: needs 2-D operand, got " + shape_str(a->shape));
    const int r = a->shape[0], c = a->shape[1];
    std::vector<double> d(a->size());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            d[static_cast<std::size_t>(j) * r + i] = a->data[static_cast<std::size_t>(i) * c + j];
    return make_op(std::move(d), {c, r}, {a}, "transpose", [r, c](Tensor* out) {
        auto& a = out->prev[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                a->grad[static_cast<std::size_t>(i) * c + j] +=
                    out->grad[static_cast<std::size_t>(j) * r + i];
    });
}

TensorPtr linear(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
    require(x->shape.size() == 2 && w->shape.size() == 2,
            "linear: needs 2-D x and w, got " + shape_str(x->shape) + " and " +
                shape_str(w->shape));
    if (x->shape[1] != w->shape[1]) shape_error("linear", x->shape, w->shape);
    const int t = x->shape[0], in = x->shape[1], out_dim = w->shape[0];
    require(static_cast<int>(b->size()) == out_dim,
            "linear: bias size " + std::to_string(b->size()) + " vs out dim " +
                std::to_string(out_dim));
    std::vector<double> d(static_cast<std::size_t>(t) * out_dim);
    for (int i = 0; i < t; ++i) {
        const double* xr = &x->data[static_cast<std::size_t>(i) * in];
        double* dr = &d[static_cast<std::size_t>(i) * out_dim];
        for (int o = 0; o < out_dim; ++o) {
            const double* wr = &w->data[static_cast<std::size_t>(o) * in];
            double acc = b->data[o];
            for (int p = 0; p < in; ++p) acc += xr[p] * wr[p];
            dr[o] = acc;
        }
    }
    return make_op(std::move(d), {t, out_dim}, {x, w, b}, "linear", [t, in, out_dim](Tensor* out) {
        auto& x = out->prev[0];
        auto& w = out->prev[1];
        auto& b = out->prev[2];
        if (x->requires_grad) {
            x->ensure_grad();
            for (int i = 0; i < t; ++i)
                for (int o = 0; o < out_dim; ++o) {
                    const double g = out->grad[static_cast<std::size_t>(i) * out_dim + o];
                    if (g == 0.0) continue;
                    const double* wr = &w->data[static_cast<std::size_t>(o) * in];
                    double* xr = &x->grad[static_cast<std::size_t>(i) * in];
                    for (int p = 0; p < in; ++p) xr[p] += g * wr[p];
                }
        }
        if (w->requires_grad) {
            w->ensure_grad();
            for (int i = 0; i < t; ++i) {
                const double* xr = &x->data[static_cast<std::size_t>(i) * in];
                for (int o = 0; o < out_dim; ++o) {
                    const double g = out->grad[static_cast<std::size_t>(i) * out_dim + o];
                    if (g == 0.0) continue;
                    double* wr = &w->grad[static_cast<std::size_t>(o) * in];
                    for (int p = 0; p < in; ++p) wr[p] += g * xr[p];
                }
            }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int i = 0; i < t; ++i)
                for (int o = 0; o < out_dim; ++o)
                    b->grad[o] += out->grad[static_cast<std::size_t>(i) * out_dim + o];
        }
    });
}

int conv1d_out_len(int in_len, int kernel, int stride, int padding) {
    return (in_len + 2 * padding - kernel) / stride + 1;
}

TensorPtr conv1d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int stride,
                 int padding) {
    require(x->shape.size() == 2, "conv1d: x must be [T, Cin], got " + shape_str(x->shape));
    require(w->shape.size() == 3, "conv1d: w must be [Cout, Cin, K], got " + shape_str(w->shape));
    const int t_in = x->shape[0], c_in = x->shape[1];
    const int c_out = w->shape[0], k = w->shape[2];
    if (w->shape[1] != c_in) shape_error("conv1d", x->shape, w->shape);
    require(static_cast<int>(b->size()) == c_out, "conv1d: bias size mismatch");
    const int t_out = conv1d_out_len(t_in, k, stride, padding);
    require(t_out > 0, "conv1d: kernel " + std::to_string(k) + " too large for input length " +
                           std::to_string(t_in));
    std::vector<double> d(static_cast<std::size_t>(t_out) * c_out);
    for (int ot = 0; ot < t_out; ++ot) {
        const int start = ot * stride - padding;
        for (int oc = 0; oc < c_out; ++oc) {
            double acc = b->data[oc];
            const double* wc = &w->data[static_cast<std::size_t>(oc) * c_in * k];
            for (int kk = 0; kk < k; ++kk) {
                const int it = start + kk;
                if (it < 0 || it >= t_in) continue;
                const double* xr = &x->data[static_cast<std::size_t>(it) * c_in];
                for (int ic = 0; ic < c_in; ++ic) acc += xr[ic] * wc[static_cast<std::size_t>(ic) * k + kk];
            }
            d[static_cast<std::size_t>(ot) * c_out + oc] = acc;
        }
    }
    return make_op(std::move(d), {t_out, c_out}, {x, w, b}, "conv1d",
                   [t_in, c_in, c_out, k, stride, padding, t_out](Tensor* out) {
                       auto& x = out->prev[0];
                       auto& w = out->prev[1];
                       auto& b = out->prev[2];
                       if (x->requires_grad) x->ensure_grad();
                       if (w->requires_grad) w->ensure_grad();
                       if (b->requires_grad) b->ensure_grad();
                       for (int ot = 0; ot < t_out; ++ot) {
                           const int start = ot * stride - padding;
                           for (int oc = 0; oc < c_out; ++oc) {
                               const double g =
                                   out->grad[static_cast<std::size_t>(ot) * c_out + oc];
                               if (g == 0.0) continue;
                               if (b->requires_grad) b->grad[oc] += g;
                               for (int kk = 0; kk < k; ++kk) {
                                   const int it = start + kk;
                                   if (it < 0 || it >= t_in) continue;
                                   for (int ic = 0; ic < c_in; ++ic) {
                                       const std::size_t wi =
                                           (static_cast<std::size_t>(oc) * c_in + ic) * k + kk;
                                       const std::size_t xi =
                                           static_cast<std::size_t>(it) * c_in + ic;
                                       if (w->requires_grad) w->grad[wi] += g * x->data[xi];
                                       if (x->requires_grad) x->grad[xi] += g * w->data[wi];
                                   }
                               }
                           }
                       }
                   });
}

TensorPtr embedding(const TensorPtr& table, const std::vector<int>& indices) {
    require(table->shape.size() == 2, "embedding: table must be 2-D");
    const int v = table->shape[0], dim = table->shape[1];
    const int n = static_cast<int>(indices.size());
    for (int idx : indices)
        require(idx >= 0 && idx < v,
                "embedding: index " + std::to_string(idx) + " out of vocab " + std::to_string(v));
    std::vector<double> d(static_cast<std::size_t>(n) * dim);
    for (int i = 0; i < n; ++i)
        std::copy_n(&table->data[static_cast<std::size_t>(indices[i]) * dim], dim,
                    &d[static_cast<std::size_t>(i) * dim]);
    return make_op(std::move(d), {n, dim}, {table}, "embedding", [indices, dim](Tensor* out) {
        auto& table = out->prev[0];
        if (!table->requires_grad) return;
        table->ensure_grad();
        for (std::size_t i = 0; i < indices.size(); ++i)
            for (int j = 0; j < dim; ++j)
                table->grad[static_cast<std::size_t>(indices[i]) * dim + j] +=
                    out->grad[i * dim + j];
    });
}

// ---- softmax / normalization ----------------------------------------------

TensorPtr softmax_rows(const TensorPtr& a) {
    require(a->shape.size() == 2, "softmax: needs 2-D input, got " + shape_str(a->shape));
    const int r = a->shape[0], c = a->shape[1];
    std::vector<double> d(a->size());
    for (int i = 0; i < r; ++i) {
        const double* x = &a->data[static_cast<std::size_t>(i) * c];
        double* y = &d[static_cast<std::size_t>(i) * c];
        double mx = x[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        for (int j = 0; j < c; ++j) y[j] /= sum;
    }
    return make_op(std::move(d), a->shape, {a}, "softmax", [r, c](Tensor* out) {
        auto& a = out->prev[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int i = 0; i < r; ++i) {
            const double* s = &out->data[static_cast<std::size_t>(i) * c];
            const double* g = &out->grad[static_cast<std::size_t>(i) * c];
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += g[j] * s[j];
            double* ga = &a->grad[static_cast<std::size_t>(i) * c];
            for (int j = 0; j < c; ++j) ga[j] += s[j] * (g[j] - dot);
        }
    });
}

namespace {

// Shared backward for mean/variance normalizers: given normalized values
// xhat, sigma and upstream u = gain .* g over a region, accumulates
// (u - mean(u) - xhat * mean(u .* xhat)) / sigma.
void norm_region_backward(const double* xhat, double sigma, const double* u, double* gx, int n) {
    double mu = 0.0, mux = 0.0;
    for (int i = 0; i < n; ++i) {
        mu += u[i];
        mux += u[i] * xhat[i];
    }
    mu /= n;
    mux /= n;
    for (int i = 0; i < n; ++i) gx[i] += (u[i] - mu - xhat[i] * mux) / sigma;
}

} // namespace

TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                     double eps) {
    require(x->shape.size() == 2, "layer_norm: needs 2-D input, got " + shape_str(x->shape));
    const int r = x->shape[0], c = x->shape[1];
    require(static_cast<int>(gain->size()) == c && static_cast<int>(bias->size()) == c,
            "layer_norm: affine size mismatch with " + std::to_string(c) + " columns");
    std::vector<double> d(x->size());
    auto xhat = std::make_shared<std::vector<double>>(x->size());
    auto sigmas = std::make_shared<std::vector<double>>(r);
    for (int i = 0; i < r; ++i) {
        const double* row = &x->data[static_cast<std::size_t>(i) * c];
        double mu = 0.0;
        for (int j = 0; j < c; ++j) mu += row[j];
        mu /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= c;
        const double sigma = std::sqrt(var + eps);
        (*sigmas)[i] = sigma;
        for (int j = 0; j < c; ++j) {
            const double h = (row[j] - mu) / sigma;
            (*xhat)[static_cast<std::size_t>(i) * c + j] = h;
            d[static_cast<std::size_t>(i) * c + j] = h * gain->data[j] + bias->data[j];
        }
    }
    return make_op(std::move(d), x->shape, {x, gain, bias}, "layer_norm",
                   [r, c, xhat, sigmas](Tensor* out) {
                       auto& x = out->prev[0];
                       auto& gain = out->prev[1];
                       auto& bias = out->prev[2];
                       std::vector<double> u(c);
                       for (int i = 0; i < r; ++i) {
                           const double* g = &out->grad[static_cast<std::size_t>(i) * c];
                           const double* h = &(*xhat)[static_cast<std::size_t>(i) * c];
                           if (gain->requires_grad) {
                               gain->ensure_grad();
                               for (int j = 0; j < c; ++j) gain->grad[j] += g[j] * h[j];
                           }
                           if (bias->requires_grad) {
                               bias->ensure_grad();
                               for (int j = 0; j < c; ++j) bias->grad[j] += g[j];
                           }
                           if (x->requires_grad) {
                               x->ensure_grad();
                               for (int j = 0; j < c; ++j) u[j] = g[j] * gain->data[j];
                               norm_region_backward(h, (*sigmas)[i], u.data(),
                                                    &x->grad[static_cast<std::size_t>(i) * c], c);
                           }
                       }
                   });
}

TensorPtr group_norm(const TensorPtr& x, int groups, const TensorPtr& gain, const TensorPtr& bias,
                     double eps) {
    require(x->shape.size() == 2, "group_norm: needs 2-D input, got " + shape_str(x->shape));
    const int t = x->shape[0], c = x->shape[1];
    require(groups > 0 && c % groups == 0, "group_norm: " + std::to_string(groups) +
                                               " groups do not divide " + std::to_string(c) +
                                               " channels");
    require(static_cast<int>(gain->size()) == c && static_cast<int>(bias->size()) == c,
            "group_norm: affine size mismatch");
    const int gc = c / groups;
    std::vector<double> d(x->size());
    auto xhat = std::make_shared<std::vector<double>>(x->size());
    auto sigmas = std::make_shared<std::vector<double>>(groups);
    for (int g = 0; g < groups; ++g) {
        double mu = 0.0;
        for (int i = 0; i < t; ++i)
            for (int j = g * gc; j < (g + 1) * gc; ++j)
                mu += x->data[static_cast<std::size_t>(i) * c + j];
        const int n = t * gc;
        mu /= n;
        double var = 0.0;
        for (int i = 0; i < t; ++i)
            for (int j = g * gc; j < (g + 1) * gc; ++j) {
                const double v = x->data[static_cast<std::size_t>(i) * c + j] - mu;
                var += v * v;
            }
        var /= n;
        const double sigma = std::sqrt(var + eps);
        (*sigmas)[g] = sigma;
        for (int i = 0; i < t; ++i)
            for (int j = g * gc; j < (g + 1) * gc; ++j) {
                const std::size_t idx = static_cast<std::size_t>(i) * c + j;
                const double h = (x->data[idx] - mu) / sigma;
                (*xhat)[idx] = h;
                d[idx] = h * gain->data[j] + bias->data[j];
            }
    }
    return make_op(
        std::move(d), x->shape, {x, gain, bias}, "group_norm",
        [t, c, gc, groups, xhat, sigmas](Tensor* out) {
            auto& x = out->prev[0];
            auto& gain = out->prev[1];
            auto& bias = out->prev[2];
            if (gain->requires_grad) gain->ensure_grad();
            if (bias->requires_grad) bias->ensure_grad();
            for (int i = 0; i < t; ++i)
                for (int j = 0; j < c; ++j) {
                    const std::size_t idx = static_cast<std::size_t>(i) * c + j;
                    if (gain->requires_grad) gain->grad[j] += out->grad[idx] * (*xhat)[idx];
                    if (bias->requires_grad) bias->grad[j] += out->grad[idx];
                }
            if (!x->requires_grad) return;
            x->ensure_grad();
            const int n = t * gc;
            std::vector<double> u(n), h(n), gx(n);
            for (int g = 0; g < groups; ++g) {
                int p = 0;
                for (int i = 0; i < t; ++i)
                    for (int j = g * gc; j < (g + 1) * gc; ++j, ++p) {
                        const std::size_t idx = static_cast<std::size_t>(i) * c + j;
                        u[p] = out->grad[idx] * gain->data[j];
                        h[p] = (*xhat)[idx];
                    }
                std::fill(gx.begin(), gx.end(), 0.0);
                norm_region_backward(h.data(), (*sigmas)[g], u.data(), gx.data(), n);
                p = 0;
                for (int i = 0; i < t; ++i)
                    for (int j = g * gc; j < (g + 1) * gc; ++j, ++p)
                        x->grad[static_cast<std::size_t>(i) * c + j] += gx[p];
            }
        });
}

TensorPtr batch_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                     BatchNormBuffers& buffers, bool train, double momentum, double eps) {
    require(x->shape.size() == 2, "batch_norm: needs 2-D input, got " + shape_str(x->shape));
    const int b = x->shape[0], f = x->shape[1];
    require(static_cast<int>(gain->size()) == f && static_cast<int>(bias->size()) == f,
            "batch_norm: affine size mismatch");
    if (buffers.running_mean.empty()) {
        buffers.running_mean.assign(f, 0.0);
        buffers.running_var.assign(f, 1.0);
    }
    std::vector<double> d(x->size());
    if (!train) {
        std::vector<double> inv(f);
        for (int j = 0; j < f; ++j) inv[j] = 1.0 / std::sqrt(buffers.running_var[j] + eps);
        for (int i = 0; i < b; ++i)
            for (int j = 0; j < f; ++j) {
                const std::size_t idx = static_cast<std::size_t>(i) * f + j;
                d[idx] = (x->data[idx] - buffers.running_mean[j]) * inv[j] * gain->data[j] +
                         bias->data[j];
            }
        return make_op(std::move(d), x->shape, {x, gain, bias}, "batch_norm_eval",
                       [b, f, inv, &buffers](Tensor* out) {
                           auto& x = out->prev[0];
                           auto& gain = out->prev[1];
                           auto& bias = out->prev[2];
                           if (gain->requires_grad) gain->ensure_grad();
                           if (bias->requires_grad) bias->ensure_grad();
                           if (x->requires_grad) x->ensure_grad();
                           for (int i = 0; i < b; ++i)
                               for (int j = 0; j < f; ++j) {
                                   const std::size_t idx = static_cast<std::size_t>(i) * f + j;
                                   const double g = out->grad[idx];
                                   const double xh =
                                       (x->data[idx] - buffers.running_mean[j]) * inv[j];
                                   if (gain->requires_grad) gain->grad[j] += g * xh;
                                   if (bias->requires_grad) bias->grad[j] += g;
                                   if (x->requires_grad)
                                       x->grad[idx] += g * gain->data[j] * inv[j];
                               }
                       });
    }
    auto xhat = std::make_shared<std::vector<double>>(x->size());
    auto sigmas = std::make_shared<std::vector<double>>(f);
    for (int j = 0; j < f; ++j) {
        double mu = 0.0;
        for (int i = 0; i < b; ++i) mu += x->data[static_cast<std::size_t>(i) * f + j];
        mu /= b;
        double var = 0.0;
        for (int i = 0; i < b; ++i) {
            const double v = x->data[static_cast<std::size_t>(i) * f + j] - mu;
            var += v * v;
        }
        var /= b; // biased, used for normalization
        const double sigma = std::sqrt(var + eps);
        (*sigmas)[j] = sigma;
        for (int i = 0; i < b; ++i) {
            const std::size_t idx = static_cast<std::size_t>(i) * f + j;
            const double h = (x->data[idx] - mu) / sigma;
            (*xhat)[idx] = h;
            d[idx] = h * gain->data[j] + bias->data[j];
        }
        const double unbiased = b > 1 ? var * b / (b - 1) : var;
        buffers.running_mean[j] = (1.0 - momentum) * buffers.running_mean[j] + momentum * mu;
        buffers.running_var[j] = (1.0 - momentum) * buffers.running_var[j] + momentum * unbiased;
    }
    buffers.steps++;
    return make_op(std::move(d), x->shape, {x, gain, bias}, "batch_norm",
                   [b, f, xhat, sigmas](Tensor* out) {
                       auto& x = out->prev[0];
                       auto& gain = out->prev[1];
                       auto& bias = out->prev[2];
                       if (gain->requires_grad) gain->ensure_grad();
                       if (bias->requires_grad) bias->ensure_grad();
                       for (int i = 0; i < b; ++i)
                           for (int j = 0; j < f; ++j) {
                               const std::size_t idx = static_cast<std::size_t>(i) * f + j;
                               if (gain->requires_grad)
                                   gain->grad[j] += out->grad[idx] * (*xhat)[idx];
                               if (bias->requires_grad) bias->grad[j] += out->grad[idx];
                           }
                       if (!x->requires_grad) return;
                       x->ensure_grad();
                       std::vector<double> u(b), h(b), gx(b);
                       for (int j = 0; j < f; ++j) {
                           for (int i = 0; i < b; ++i) {
                               const std::size_t idx = static_cast<std::size_t>(i) * f + j;
                               u[i] = out->grad[idx] * gain->data[j];
                               h[i] = (*xhat)[idx];
                           }
                           std::fill(gx.begin(), gx.end(), 0.0);
                           norm_region_backward(h.data(), (*sigmas)[j], u.data(), gx.data(), b);
                           for (int i = 0; i < b; ++i)
                               x->grad[static_cast<std::size_t>(i) * f + j] += gx[i];
                       }
                   });
}

TensorPtr znorm_rows(const TensorPtr& a, double eps) {
    require(a->shape.size() == 2, "znorm: needs 2-D input, got " + shape_str(a->shape));
    const int r = a->shape[0], c = a->shape[1];
    std::vector<double> d(a->size());
    auto raw_std = std::make_shared<std::vector<double>>(r);
    for (int i = 0; i < r; ++i) {
        const double* row = &a->data[static_cast<std::size_t>(i) * c];
        double mu = 0.0;
        for (int j = 0; j < c; ++j) mu += row[j];
        mu /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        const double s = std::sqrt(var / c);
        (*raw_std)[i] = s;
        const double denom = s + eps;
        for (int j = 0; j < c; ++j) d[static_cast<std::size_t>(i) * c + j] = (row[j] - mu) / denom;
    }
    return make_op(std::move(d), a->shape, {a}, "znorm", [r, c, eps, raw_std](Tensor* out) {
        auto& a = out->prev[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        // y_j = (x_j - mu) / (s + eps), s the biased row std. Then
        // dx_k = (g_k - mean(g)) / (s + eps) - mean(g . y) * y_k / s,
        // the second term dropped for (numerically) constant rows.
        for (int i = 0; i < r; ++i) {
            const double s = (*raw_std)[i];
            const double denom = s + eps;
            const double* g = &out->grad[static_cast<std::size_t>(i) * c];
            const double* y = &out->data[static_cast<std::size_t>(i) * c];
            double gm = 0.0, gy = 0.0;
            for (int j = 0; j < c; ++j) {
                gm += g[j];
                gy += g[j] * y[j];
            }
            gm /= c;
            gy /= c;
            double* ga = &a->grad[static_cast<std::size_t>(i) * c];
            for (int j = 0; j < c; ++j) {
                double v = (g[j] - gm) / denom;
                if (s > 1e-300) v -= gy * y[j] / s;
                ga[j] += v;
            }
        }
    });
}

TensorPtr mean_all(const TensorPtr& a) {
    double s = 0.0;
    for (double v : a->data) s += v;
    const double n = static_cast<double>(a->size());
    return make_op({s / n}, {1}, {a}, "mean_all", [n](Tensor* out) {
        auto& a = out->prev[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        const double g = out->grad[0] / n;
        for (auto& v : a->grad) v += g;
    });
}

TensorPtr sum_all(const TensorPtr& a) {
    double s = 0.0;
    for (double v : a->data) s += v;
    return make_op({s}, {1}, {a}, "sum_all", [](Tensor* out) {
        auto& a = out->prev[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        const double g = out->grad[0];
        for (auto& v : a->grad) v += g;
    });
}

TensorPtr mean_axis0(const TensorPtr& a) {
    require(a->shape.size() == 2, "mean_axis0: needs 2-D input");
    const int r = a->shape[0], c = a->shape[1];
    std::vector<double> d(c, 0.0);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) d[j] += a->data[static_cast<std::size_t>(i) * c + j];
    for (auto& v : d) v /= r;
    return make_op(std::move(d), {c}, {a}, "mean_axis0", [r, c](Tensor* out) {
        auto& a = out->prev[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                a->grad[static_cast<std::size_t>(i) * c + j] += out->grad[j] / r;
    });
}

TensorPtr sum_axis0(const TensorPtr& a) {
    require(a->shape.size() == 2, "sum_axis0: needs 2-D input");
    const int r = a->shape[0], c = a->shape[1];
    std::vector<double> d(c, 0.0);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) d[j] += a->data[static_cast<std::size_t>(i) * c + j];
    return make_op(std::move(d), {c}, {a}, "sum_axis0", [r, c](Tensor* out) {
        auto& a = out->prev[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                a->grad[static_cast<std::size_t>(i) * c + j] += out->grad[j];
    });
}

TensorPtr mean_pool_rows(const TensorPtr& a) {
    require(a->shape.size() == 2, "mean_pool: needs 2-D input");
    return mean_axis0(a);
}

TensorPtr masked_mean_pool(const TensorPtr& a, const std::vector<double>& mask) {
    require(a->shape.size() == 2, "masked_mean_pool: needs 2-D input");
    const int r = a->shape[0], c = a->shape[1];
    require(static_cast<int>(mask.size()) == r, "masked_mean_pool: mask length " +
                                                    std::to_string(mask.size()) + " vs " +
                                                    std::to_string(r) + " rows");
    double count = 0.0;
    for (double m : mask) count += (m != 0.0) ? 1.0 : 0.0;
    require(count > 0.0, "masked_mean_pool: all positions masked out");
    std::vector<double> d(c, 0.0);
    for (int i = 0; i < r; ++i) {
        if (mask[i] == 0.0) continue;
        for (int j = 0; j < c; ++j) d[j] += a->data[static_cast<std::size_t>(i) * c + j];
    }
    for (auto& v : d) v /= count;
    return make_op(std::move(d), {c}, {a}, "masked_mean_pool", [r, c, mask, count](Tensor* out) {
        auto& a = out->prev[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int i = 0; i < r; ++i) {
            if (mask[i] == 0.0) continue;
            for (int j = 0; j < c; ++j)
                a->grad[static_cast<std::size_t>(i) * c + j] += out->grad[j] / count;
        }
    });
}

TensorPtr stack_rows(const std::vector<TensorPtr>& rows) {
    require(!rows.empty(), "stack_rows: empty input");
    const int d = static_cast<int>(rows[0]->size());
    for (const auto& r : rows)
        if (static_cast<int>(r->size()) != d) shape_error("stack_rows", rows[0]->shape, r->shape);
    const int b = static_cast<int>(rows.size());
    std::vector<double> out(static_cast<std::size_t>(b) * d);
    for (int i = 0; i < b; ++i)
        std::copy(rows[i]->data.begin(), rows[i]->data.end(), &out[static_cast<std::size_t>(i) * d]);
    return make_op(std::move(out), {b, d}, rows, "stack_rows", [b, d](Tensor* outp) {
        for (int i = 0; i < b; ++i) {
            auto& r = outp->prev[i];
            if (!r->requires_grad) continue;
            r->ensure_grad();
            for (int j = 0; j < d; ++j)
                r->grad[j] += outp->grad[static_cast<std::size_t>(i) * d + j];
        }
    });
}

TensorPtr slice_cols(const TensorPtr& a, int c0, int c1) {
    require(a->shape.size() == 2, "slice_cols: needs 2-D input");
    const int r = a->shape[0], c = a->shape[1];
    require(0 <= c0 && c0 < c1 && c1 <= c, "slice_cols: bad range [" + std::to_string(c0) + "," +
                                               std::to_string(c1) + ") for " + shape_str(a->shape));
    const int w = c1 - c0;
    std::vector<double> d(static_cast<std::size_t>(r) * w);
    for (int i = 0; i < r; ++i)
        std::copy_n(&a->data[static_cast<std::size_t>(i) * c + c0], w,
                    &d[static_cast<std::size_t>(i) * w]);
    return make_op(std::move(d), {r, w}, {a}, "slice_cols", [r, c, c0, w](Tensor* out) {
        auto& a = out->prev[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < w; ++j)
                a->grad[static_cast<std::size_t>(i) * c + c0 + j] +=
                    out->grad[static_cast<std::size_t>(i) * w + j];
    });
}

TensorPtr slice_rows(const TensorPtr& a, int r0, int r1) {
    require(a->shape.size() == 2, "slice_rows: needs 2-D input");
    const int r = a->shape[0], c = a->shape[1];
    require(0 <= r0 && r0 < r1 && r1 <= r, "slice_rows: bad range [" + std::to_string(r0) + "," +
                                               std::to_string(r1) + ") for " + shape_str(a->shape));
    const int h = r1 - r0;
    std::vector<double> d(static_cast<std::size_t>(h) * c);
    std::copy_n(&a->data[static_cast<std::size_t>(r0) * c], static_cast<std::size_t>(h) * c,
                d.begin());
    return make_op(std::move(d), {h, c}, {a}, "slice_rows", [r0, h, c](Tensor* out) {
        auto& a = out->prev[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < static_cast<std::size_t>(h) * c; ++i)
            a->grad[static_cast<std::size_t>(r0) * c + i] += out->grad[i];
    });
}

TensorPtr concat_cols(const TensorPtr& a, const TensorPtr& b) {
    require(a->shape.size() == 2 && b->shape.size() == 2, "concat_cols: needs 2-D inputs");
    if (a->shape[0] != b->shape[0]) shape_error("concat_cols", a->shape, b->shape);
    const int r = a->shape[0], ca = a->shape[1], cb = b->shape[1];
    std::vector<double> d(static_cast<std::size_t>(r) * (ca + cb));
    for (int i = 0; i < r; ++i) {
        std::copy_n(&a->data[static_cast<std::size_t>(i) * ca], ca,
                    &d[static_cast<std::size_t>(i) * (ca + cb)]);
        std::copy_n(&b->data[static_cast<std::size_t>(i) * cb], cb,
                    &d[static_cast<std::size_t>(i) * (ca + cb) + ca]);
    }
    return make_op(std::move(d), {r, ca + cb}, {a, b}, "concat_cols", [r, ca, cb](Tensor* out) {
        auto& a = out->prev[0];
        auto& b = out->prev[1];
        if (a->requires_grad) {
            a->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < ca; ++j)
                    a->grad[static_cast<std::size_t>(i) * ca + j] +=
                        out->grad[static_cast<std::size_t>(i) * (ca + cb) + j];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < cb; ++j)
                    b->grad[static_cast<std::size_t>(i) * cb + j] +=
                        out->grad[static_cast<std::size_t>(i) * (ca + cb) + ca + j];
        }
    });
}

namespace {

void check_row_vec(const TensorPtr& x, const TensorPtr& r, const char* op) {
    require(x->shape.size() == 2, std::string(op) + ": x must be 2-D");
    const int c = x->shape[1];
    const bool ok = (r->shape.size() == 1 && r->shape[0] == c) ||
                    (r->shape.size() == 2 && r->shape[0] == 1 && r->shape[1] == c);
    if (!ok) shape_error(op, x->shape, r->shape);
}

} // namespace

TensorPtr add_row_broadcast(const TensorPtr& x, const TensorPtr& r) {
    check_row_vec(x, r, "add_row_broadcast");
    const int rows = x->shape[0], c = x->shape[1];
    std::vector<double> d(x->size());
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < c; ++j)
            d[static_cast<std::size_t>(i) * c + j] =
                x->data[static_cast<std::size_t>(i) * c + j] + r->data[j];
    return make_op(std::move(d), x->shape, {x, r}, "add_row_broadcast", [rows, c](Tensor* out) {
        auto& x = out->prev[0];
        auto& r = out->prev[1];
        if (x->requires_grad) {
            x->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i) x->grad[i] += out->grad[i];
        }
        if (r->requires_grad) {
            r->ensure_grad();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < c; ++j)
                    r->grad[j] += out->grad[static_cast<std::size_t>(i) * c + j];
        }
    });
}

TensorPtr sub_row_broadcast(const TensorPtr& x, const TensorPtr& r) {
    check_row_vec(x, r, "sub_row_broadcast");
    const int rows = x->shape[0], c = x->shape[1];
    std::vector<double> d(x->size());
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < c; ++j)
            d[static_cast<std::size_t>(i) * c + j] =
                x->data[static_cast<std::size_t>(i) * c + j] - r->data[j];
    return make_op(std::move(d), x->shape, {x, r}, "sub_row_broadcast", [rows, c](Tensor* out) {
        auto& x = out->prev[0];
        auto& r = out->prev[1];
        if (x->requires_grad) {
            x->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i) x->grad[i] += out->grad[i];
        }
        if (r->requires_grad) {
            r->ensure_grad();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < c; ++j)
                    r->grad[j] -= out->grad[static_cast<std::size_t>(i) * c + j];
        }
    });
}

TensorPtr mul_row_broadcast(const TensorPtr& x, const TensorPtr& r) {
    check_row_vec(x, r, "mul_row_broadcast");
    const int rows = x->shape[0], c = x->shape[1];
    std::vector<double> d(x->size());
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < c; ++j)
            d[static_cast<std::size_t>(i) * c + j] =
                x->data[static_cast<std::size_t>(i) * c + j] * r->data[j];
    return make_op(std::move(d), x->shape, {x, r}, "mul_row_broadcast", [rows, c](Tensor* out) {
        auto& x = out->prev[0];
        auto& r = out->prev[1];
        if (x->requires_grad) {
            x->ensure_grad();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < c; ++j)
                    x->grad[static_cast<std::size_t>(i) * c + j] +=
                        out->grad[static_cast<std::size_t>(i) * c + j] * r->data[j];
        }
        if (r->requires_grad) {
            r->ensure_grad();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < c; ++j)
                    r->grad[j] += out->grad[static_cast<std::size_t>(i) * c + j] *
                                  x->data[static_cast<std::size_t>(i) * c + j];
        }
    });
}

TensorPtr mul_col_broadcast(const TensorPtr& x, const TensorPtr& c) {
    require(x->shape.size() == 2, "mul_col_broadcast: x must be 2-D");
    const int rows = x->shape[0], cols = x->shape[1];
    const bool ok = (c->shape.size() == 1 && c->shape[0] == rows) ||
                    (c->shape.size() == 2 && c->shape[0] == rows && c->shape[1] == 1);
    if (!ok) shape_error("mul_col_broadcast", x->shape, c->shape);
    std::vector<double> d(x->size());
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            d[static_cast<std::size_t>(i) * cols + j] =
                x->data[static_cast<std::size_t>(i) * cols + j] * c->data[i];
    return make_op(std::move(d), x->shape, {x, c}, "mul_col_broadcast", [rows, cols](Tensor* out) {
        auto& x = out->prev[0];
        auto& c = out->prev[1];
        if (x->requires_grad) {
            x->ensure_grad();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j)
                    x->grad[static_cast<std::size_t>(i) * cols + j] +=
                        out->grad[static_cast<std::size_t>(i) * cols + j] * c->data[i];
        }
        if (c->requires_grad) {
            c->ensure_grad();
            for (int i = 0; i < rows; ++i) {
                double acc = 0.0;
                for (int j = 0; j < cols; ++j)
                    acc += out->grad[static_cast<std::size_t>(i) * cols + j] *
                           x->data[static_cast<std::size_t>(i) * cols + j];
                c->grad[i] += acc;
            }
        }
    });
}

TensorPtr sum_sq_offdiag(const TensorPtr& a) {
    require(a->shape.size() == 2 && a->shape[0] == a->shape[1],
            "sum_sq_offdiag: needs square matrix, got " + shape_str(a->shape));
    const int n = a->shape[0];
    double s = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i != j) {
                const double v = a->data[static_cast<std::size_t>(i) * n + j];
                s += v * v;
            }
    return make_op({s}, {1}, {a}, "sum_sq_offdiag", [n](Tensor* out) {
        auto& a = out->prev[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        const double g = out->grad[0];
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                if (i != j)
                    a->grad[static_cast<std::size_t>(i) * n + j] +=
                        2.0 * g * a->data[static_cast<std::size_t>(i) * n + j];
    });
}

TensorPtr reshape(const TensorPtr& a, Shape s) {
    if (numel(s) != a->size()) shape_error("reshape", a->shape, s);
    std::vector<double> d = a->data;
    return make_op(std::move(d), std::move(s), {a}, "reshape", [](Tensor* out) {
        auto& a = out->prev[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i];
    });
}

TensorPtr dropout(const TensorPtr& a, double p, Rng& rng, bool train) {
    if (!train || p <= 0.0) return a;
    require(p < 1.0, "dropout: rate must be < 1");
    auto keep = std::make_shared<std::vector<char>>(a->size());
    const double inv = 1.0 / (1.0 - p);
    std::vector<double> d(a->size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        const bool k = rng.uniform() >= p;
        (*keep)[i] = k;
        d[i] = k ? a->data[i] * inv : 0.0;
    }
    return make_op(std::move(d), a->shape, {a}, "dropout", [keep, inv](Tensor* out) {
        auto& a = out->prev[0];
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < out->grad.size(); ++i)
            if ((*keep)[i]) a->grad[i] += out->grad[i] * inv;
    });
}

TensorPtr scaled_dot_attention(const TensorPtr& q, const TensorPtr& k, const TensorPtr& v,
                               const std::vector<double>* key_mask) {
    require(q->shape.size() == 2 && k->shape.size() == 2 && v->shape.size() == 2,
            "attention: needs 2-D q, k, v");
    if (q->shape[1] != k->shape[1]) shape_error("attention q/k", q->shape, k->shape);
    if (k->shape[0] != v->shape[0]) shape_error("attention k/v", k->shape, v->shape);
    const int dk = q->shape[1];
    auto scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dk)));
    if (key_mask) {
        require(static_cast<int>(key_mask->size()) == k->shape[0],
                "attention: key mask length mismatch");
        auto m = make_tensor(*key_mask, {k->shape[0]}, false);
        scores = add_row_broadcast(scores, m);
    }
    return matmul(softmax_rows(scores), v);
}

} // namespace xmodal
