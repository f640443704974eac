#include "psvdd/numerics/autograd.hpp"

#include <Eigen/Core>
#include <cmath>
#include <unordered_set>

namespace psvdd::numerics {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
Tensor<T>& ensure_grad(Node<T>& node) {
    if (node.grad.shape() != node.value.shape()) {
        node.grad = Tensor<T>(node.value.shape());
    }
    return node.grad;
}

template <typename T>
void require_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                             shape_string(b.shape()) + " differ");
    }
}

struct ConvGeometry {
    std::size_t batch, height, width, in_ch, kh, kw, out_ch, stride, out_h, out_w;
    std::size_t rows() const { return batch * out_h * out_w; }
    std::size_t cols() const { return kh * kw * in_ch; }
};

template <typename T>
ConvGeometry conv_geometry(const Shape& in, const Shape& k, const Shape& b, std::size_t stride) {
    if (in.size() != 3 && in.size() != 4) {
        throw DimensionError("conv2d: input must be [H,W,C] or [N,H,W,C], got " + shape_string(in));
    }
    if (k.size() != 4) throw DimensionError("conv2d: kernel must be [kh,kw,Cin,Cout], got " + shape_string(k));
    if (stride == 0) throw ArgumentError("conv2d: stride must be positive");
    ConvGeometry g{};
    const std::size_t off = in.size() == 4 ? 1 : 0;
    g.batch = off ? in[0] : 1;
    g.height = in[off];
    g.width = in[off + 1];
    g.in_ch = in[off + 2];
    g.kh = k[0];
    g.kw = k[1];
    g.out_ch = k[3];
    g.stride = stride;
    if (k[2] != g.in_ch) {
        throw DimensionError("conv2d: input channels " + std::to_string(g.in_ch) + " vs kernel Cin " +
                             std::to_string(k[2]));
    }
    if (b.size() != 1 || b[0] != g.out_ch) {
        throw DimensionError("conv2d: bias " + shape_string(b) + " vs Cout " + std::to_string(g.out_ch));
    }
    if (g.kh > g.height || g.kw > g.width || g.kh == 0 || g.kw == 0) {
        throw DimensionError("conv2d: kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                             " does not fit input " + std::to_string(g.height) + "x" + std::to_string(g.width));
    }
    g.out_h = (g.height - g.kh) / stride + 1;
    g.out_w = (g.width - g.kw) / stride + 1;
    return g;
}

// Patch matrix: one row per output position, columns ordered (ky, kx, c) to
// match the kernel's row-major layout.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
    const std::size_t row_len = g.kw * g.in_ch;
    for (std::size_t n = 0; n < g.batch; ++n) {
        const T* img = x + n * g.height * g.width * g.in_ch;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                for (std::size_t ky = 0; ky < g.kh; ++ky) {
                    const T* src = img + ((oy * g.stride + ky) * g.width + ox * g.stride) * g.in_ch;
                    std::copy(src, src + row_len, col);
                    col += row_len;
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
    const std::size_t row_len = g.kw * g.in_ch;
    for (std::size_t n = 0; n < g.batch; ++n) {
        T* img = dx + n * g.height * g.width * g.in_ch;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                for (std::size_t ky = 0; ky < g.kh; ++ky) {
                    T* dst = img + ((oy * g.stride + ky) * g.width + ox * g.stride) * g.in_ch;
                    for (std::size_t i = 0; i < row_len; ++i) dst[i] += col[i];
                    col += row_len;
                }
            }
        }
    }
}

}  // namespace

template <typename T>
Var<T> Var<T>::constant(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    return Var(std::move(node));
}

template <typename T>
Var<T> Var<T>::parameter(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->grad = Tensor<T>(value.shape());
    node->value = std::move(value);
    node->requires_grad = true;
    return Var(std::move(node));
}

template <typename T>
Var<T> Var<T>::from_op(Tensor<T> value, std::vector<Var> inputs, std::function<void(Node<T>&)> backward_fn) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->leaf = false;
    for (const auto& in : inputs) {
        if (in.requires_grad()) node->requires_grad = true;
    }
    if (node->requires_grad) {
        for (auto& in : inputs) node->parents.push_back(in.node_);
        node->backward_fn = std::move(backward_fn);
    }
    return Var(std::move(node));
}

template <typename T>
void Var<T>::zero_grad() {
    node_->grad = Tensor<T>(node_->value.shape());
}

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const Var<T>& bias, std::size_t stride) {
    const ConvGeometry g = conv_geometry<T>(input.shape(), kernel.shape(), bias.shape(), stride);
    const bool track = input.requires_grad() || kernel.requires_grad() || bias.requires_grad();

    auto col = std::make_shared<AlignedVector<T>>(g.rows() * g.cols());
    im2col(input.value().data(), g, col->data());

    Shape out_shape = input.shape().size() == 4 ? Shape{g.batch, g.out_h, g.out_w, g.out_ch}
                                                : Shape{g.out_h, g.out_w, g.out_ch};
    Tensor<T> out(out_shape);
    {
        ConstMatMap<T> cm(col->data(), g.rows(), g.cols());
        ConstMatMap<T> km(kernel.value().data(), g.cols(), g.out_ch);
        MatMap<T> om(out.data(), g.rows(), g.out_ch);
        om.noalias() = cm * km;
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bm(bias.value().data(), g.out_ch);
        om.rowwise() += bm;
    }
    if (!track) col.reset();

    return Var<T>::from_op(std::move(out), {input, kernel, bias}, [g, col](Node<T>& self) {
        ConstMatMap<T> dout(self.grad.data(), g.rows(), g.out_ch);
        auto& in_node = *self.parents[0];
        auto& k_node = *self.parents[1];
        auto& b_node = *self.parents[2];
        if (k_node.requires_grad) {
            ConstMatMap<T> cm(col->data(), g.rows(), g.cols());
            MatMap<T> dk(ensure_grad(k_node).data(), g.cols(), g.out_ch);
            dk.noalias() += cm.transpose() * dout;
        }
        if (b_node.requires_grad) {
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(ensure_grad(b_node).data(), g.out_ch);
            db += dout.colwise().sum();
        }
        if (in_node.requires_grad) {
            ConstMatMap<T> km(k_node.value.data(), g.cols(), g.out_ch);
            RowMat<T> dcol = dout * km.transpose();
            col2im_add(dcol.data(), g, ensure_grad(in_node).data());
        }
    });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T alpha) {
    if (!(alpha >= T(0) && alpha < T(1))) throw ArgumentError("leaky_relu: alpha must lie in [0,1)");
    Tensor<T> out(x.shape());
    const T* in = x.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > T(0) ? in[i] : alpha * in[i];
    return Var<T>::from_op(std::move(out), {x}, [alpha](Node<T>& self) {
        auto& p = *self.parents[0];
        auto& g = ensure_grad(p);
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += self.grad[i] * (p.value[i] > T(0) ? T(1) : alpha);
        }
    });
}

template <typename T>
Var<T> linear(const Var<T>& input, const Var<T>& weight, const Var<T>& bias) {
    const Shape& in = input.shape();
    const Shape& w = weight.shape();
    if (w.size() != 2) throw DimensionError("linear: weight must be [n,m], got " + shape_string(w));
    if (in.empty() || in.size() > 2 || in.back() != w[0]) {
        throw DimensionError("linear: input " + shape_string(in) + " does not conform to weight " + shape_string(w));
    }
    if (bias.shape() != Shape{w[1]}) {
        throw DimensionError("linear: bias " + shape_string(bias.shape()) + " vs output width " + std::to_string(w[1]));
    }
    const std::size_t rows = in.size() == 2 ? in[0] : 1;
    const std::size_t n = w[0];
    const std::size_t m = w[1];
    Tensor<T> out(in.size() == 2 ? Shape{rows, m} : Shape{m});
    {
        ConstMatMap<T> xm(input.value().data(), rows, n);
        ConstMatMap<T> wm(weight.value().data(), n, m);
        MatMap<T> om(out.data(), rows, m);
        om.noalias() = xm * wm;
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bm(bias.value().data(), m);
        om.rowwise() += bm;
    }
    return Var<T>::from_op(std::move(out), {input, weight, bias}, [rows, n, m](Node<T>& self) {
        ConstMatMap<T> dout(self.grad.data(), rows, m);
        auto& x_node = *self.parents[0];
        auto& w_node = *self.parents[1];
        auto& b_node = *self.parents[2];
        if (w_node.requires_grad) {
            ConstMatMap<T> xm(x_node.value.data(), rows, n);
            MatMap<T> dw(ensure_grad(w_node).data(), n, m);
            dw.noalias() += xm.transpose() * dout;
        }
        if (b_node.requires_grad) {
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(ensure_grad(b_node).data(), m);
            db += dout.colwise().sum();
        }
        if (x_node.requires_grad) {
            ConstMatMap<T> wm(w_node.value.data(), n, m);
            MatMap<T> dx(ensure_grad(x_node).data(), rows, n);
            dx.noalias() += dout * wm.transpose();
        }
    });
}

namespace {

// Writes softmax(row) into probs and returns -log softmax(row)[label].
template <typename T>
T cross_entropy_row(const T* row, std::size_t k, int label, T* probs) {
    T peak = row[0];
    for (std::size_t j = 1; j < k; ++j) peak = std::max(peak, row[j]);
    T total = 0;
    for (std::size_t j = 0; j < k; ++j) {
        probs[j] = std::exp(row[j] - peak);
        total += probs[j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[j] /= total;
    return std::log(total) - (row[label] - peak);
}

void check_label(int label, std::size_t k) {
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
        throw ArgumentError("softmax_cross_entropy: label " + std::to_string(label) + " outside [0," +
                            std::to_string(k) + ")");
    }
}

}  // namespace

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, int label) {
    if (logits.shape().size() != 1 || logits.shape()[0] == 0) {
        throw DimensionError("softmax_cross_entropy: logits must be [k], got " + shape_string(logits.shape()));
    }
    const std::size_t k = logits.shape()[0];
    check_label(label, k);
    auto probs = std::make_shared<std::vector<T>>(k);
    const T loss = cross_entropy_row(logits.value().data(), k, label, probs->data());
    return Var<T>::from_op(Tensor<T>(Shape{}, {loss}), {logits}, [probs, label](Node<T>& self) {
        auto& g = ensure_grad(*self.parents[0]);
        const T up = self.grad[0];
        for (std::size_t j = 0; j < probs->size(); ++j) {
            g[j] += up * ((*probs)[j] - (static_cast<int>(j) == label ? T(1) : T(0)));
        }
    });
}

template <typename T>
Var<T> softmax_cross_entropy_mean(const Var<T>& logits, std::span<const int> labels) {
    const Shape& s = logits.shape();
    if (s.size() != 2 || s[0] != labels.size() || s[0] == 0 || s[1] == 0) {
        throw DimensionError("softmax_cross_entropy_mean: logits " + shape_string(s) + " vs " +
                             std::to_string(labels.size()) + " labels");
    }
    const std::size_t rows = s[0];
    const std::size_t k = s[1];
    for (int y : labels) check_label(y, k);
    auto probs = std::make_shared<std::vector<T>>(rows * k);
    auto ys = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
    T total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        total += cross_entropy_row(logits.value().data() + r * k, k, labels[r], probs->data() + r * k);
    }
    return Var<T>::from_op(Tensor<T>(Shape{}, {total / T(rows)}), {logits}, [probs, ys, rows, k](Node<T>& self) {
        auto& g = ensure_grad(*self.parents[0]);
        const T up = self.grad[0] / T(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < k; ++j) {
                const T onehot = static_cast<int>(j) == (*ys)[r] ? T(1) : T(0);
                g[r * k + j] += up * ((*probs)[r * k + j] - onehot);
            }
        }
    });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape("add", a, b);
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    return Var<T>::from_op(std::move(out), {a, b}, [](Node<T>& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            auto& g = ensure_grad(*p);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape("sub", a, b);
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    return Var<T>::from_op(std::move(out), {a, b}, [](Node<T>& self) {
        if (self.parents[0]->requires_grad) {
            auto& g = ensure_grad(*self.parents[0]);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (self.parents[1]->requires_grad) {
            auto& g = ensure_grad(*self.parents[1]);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <typename T>
Var<T> sub_row(const Var<T>& a, const Var<T>& row) {
    const Shape& s = a.shape();
    if (s.size() != 2 || row.shape() != Shape{s[1]}) {
        throw DimensionError("sub_row: " + shape_string(s) + " minus " + shape_string(row.shape()));
    }
    const std::size_t rows = s[0];
    const std::size_t d = s[1];
    Tensor<T> out(s);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = a.value()[r * d + j] - row.value()[j];
    }
    return Var<T>::from_op(std::move(out), {a, row}, [rows, d](Node<T>& self) {
        if (self.parents[0]->requires_grad) {
            auto& g = ensure_grad(*self.parents[0]);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (self.parents[1]->requires_grad) {
            auto& g = ensure_grad(*self.parents[1]);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < d; ++j) g[j] -= self.grad[r * d + j];
            }
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * factor;
    return Var<T>::from_op(std::move(out), {a}, [factor](Node<T>& self) {
        auto& g = ensure_grad(*self.parents[0]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
    T total = 0;
    for (T v : a.value().values()) total += v;
    return Var<T>::from_op(Tensor<T>(Shape{}, {total}), {a}, [](Node<T>& self) {
        auto& g = ensure_grad(*self.parents[0]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
    });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    if (a.value().empty()) throw DimensionError("mean: empty tensor");
    return scale(sum(a), T(1) / T(a.value().size()));
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    Tensor<T> out = a.value().reshaped(std::move(shape));
    return Var<T>::from_op(std::move(out), {a}, [](Node<T>& self) {
        auto& g = ensure_grad(*self.parents[0]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

template <typename T>
Var<T> slice_rows(const Var<T>& a, std::size_t begin, std::size_t end) {
    const Shape& s = a.shape();
    if (s.empty() || begin > end || end > s[0]) {
        throw DimensionError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                             shape_string(s));
    }
    const std::size_t stride = s[0] == 0 ? 0 : a.value().size() / s[0];
    Shape out_shape = s;
    out_shape[0] = end - begin;
    const T* src = a.value().data() + begin * stride;
    Tensor<T> out(out_shape, AlignedVector<T>(src, src + (end - begin) * stride));
    const std::size_t offset = begin * stride;
    return Var<T>::from_op(std::move(out), {a}, [offset](Node<T>& self) {
        auto& g = ensure_grad(*self.parents[0]);
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[offset + i] += self.grad[i];
    });
}

template <typename T>
Var<T> row_norms(const Var<T>& a, T eps) {
    const Shape& s = a.shape();
    if (s.size() != 2) throw DimensionError("row_norms: expected [B,D], got " + shape_string(s));
    const std::size_t rows = s[0];
    const std::size_t d = s[1];
    Tensor<T> out(Shape{rows});
    for (std::size_t r = 0; r < rows; ++r) {
        T acc = 0;
        for (std::size_t j = 0; j < d; ++j) acc += a.value()[r * d + j] * a.value()[r * d + j];
        out[r] = std::sqrt(acc + eps);
    }
    return Var<T>::from_op(std::move(out), {a}, [rows, d](Node<T>& self) {
        auto& p = *self.parents[0];
        auto& g = ensure_grad(p);
        for (std::size_t r = 0; r < rows; ++r) {
            const T coeff = self.grad[r] / self.value[r];
            for (std::size_t j = 0; j < d; ++j) g[r * d + j] += coeff * p.value[r * d + j];
        }
    });
}

template <typename T>
void backward(const Var<T>& loss) {
    if (!loss.valid() || loss.value().size() != 1) {
        throw ArgumentError("backward: loss must be a scalar, got " +
                            (loss.valid() ? shape_string(loss.shape()) : std::string("null")));
    }
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS yields a topological order (inputs first).
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node<T>* node : order) {
        if (!node->leaf) node->grad = Tensor<T>(node->value.shape());
    }
    loss.node()->grad = Tensor<T>(loss.shape(), T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (!node->leaf && node->backward_fn) node->backward_fn(*node);
    }
}

#define PSVDD_INSTANTIATE(T)                                                                  \
    template class Var<T>;                                                                    \
    template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t);         \
    template Var<T> leaky_relu(const Var<T>&, T);                                             \
    template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                      \
    template Var<T> softmax_cross_entropy(const Var<T>&, int);                                \
    template Var<T> softmax_cross_entropy_mean(const Var<T>&, std::span<const int>);          \
    template Var<T> add(const Var<T>&, const Var<T>&);                                        \
    template Var<T> sub(const Var<T>&, const Var<T>&);                                        \
    template Var<T> sub_row(const Var<T>&, const Var<T>&);                                    \
    template Var<T> scale(const Var<T>&, T);                                                  \
    template Var<T> sum(const Var<T>&);                                                       \
    template Var<T> mean(const Var<T>&);                                                      \
    template Var<T> reshape(const Var<T>&, Shape);                                            \
    template Var<T> slice_rows(const Var<T>&, std::size_t, std::size_t);                      \
    template Var<T> row_norms(const Var<T>&, T);                                              \
    template void backward(const Var<T>&);

PSVDD_INSTANTIATE(float)
PSVDD_INSTANTIATE(double)

#undef PSVDD_INSTANTIATE

}  // namespace psvdd::numerics
