#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "vqt/errors.hpp"

namespace vqt {

// Dense row-major tensors with reverse-mode automatic differentiation.
// Storage is always a contiguous copy: reshape/transpose materialize, there
// are no strided views. Scalar type S is float (training default) or double
// (gradient-check mode).

template <std::floating_point S>
struct Node {
    std::vector<size_t> shape;
    std::vector<S> value;
    std::vector<S> grad;  // empty until first accumulation / zero_grad
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node<S>>> parents;
    // Pulls from this->grad and accumulates (+=) into parents' grad.
    std::function<void(Node<S>&)> backward_fn;

    size_t numel() const {
        size_t n = 1;
        for (size_t d : shape) n *= d;
        return n;
    }
    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), S(0));
    }
};

inline std::string shape_str(const std::vector<size_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + "]";
}

namespace detail {

inline size_t shape_numel(const std::vector<size_t>& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

template <std::floating_point S>
std::shared_ptr<Node<S>> new_node(std::vector<size_t> shape,
                                  std::vector<std::shared_ptr<Node<S>>> parents,
                                  const char* op) {
    auto n = std::make_shared<Node<S>>();
    n->shape = std::move(shape);
    n->value.assign(detail::shape_numel(n->shape), S(0));
    n->op = op;
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    return n;
}

template <std::floating_point S>
void check_finite(const Node<S>& n) {
    for (const S& v : n.value) {
        if (!std::isfinite(v))
            throw NumericError(std::string("op '") + n.op + "' produced a non-finite value");
    }
}

// [outer, len, inner] decomposition around one axis.
struct AxisView {
    size_t outer, len, inner;
};

inline AxisView axis_view(const std::vector<size_t>& shape, size_t axis) {
    AxisView v{1, shape[axis], 1};
    for (size_t i = 0; i < axis; ++i) v.outer *= shape[i];
    for (size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
    return v;
}

}  // namespace detail

template <std::floating_point S>
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<S>> n) : node_(std::move(n)) {}

    static Tensor zeros(std::vector<size_t> shape, bool requires_grad = false) {
        auto n = detail::new_node<S>(std::move(shape), {}, "leaf");
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor full(std::vector<size_t> shape, S v, bool requires_grad = false) {
        auto t = zeros(std::move(shape), requires_grad);
        std::fill(t.node_->value.begin(), t.node_->value.end(), v);
        detail::check_finite(*t.node_);
        return t;
    }

    static Tensor from(std::vector<size_t> shape, std::vector<S> data, bool requires_grad = false) {
        if (detail::shape_numel(shape) != data.size())
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
        auto n = detail::new_node<S>(std::move(shape), {}, "leaf");
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        detail::check_finite(*n);
        return Tensor(std::move(n));
    }

    const std::vector<size_t>& shape() const { return node_->shape; }
    size_t rank() const { return node_->shape.size(); }
    size_t dim(size_t i) const { return node_->shape[i]; }
    size_t numel() const { return node_->numel(); }

    const std::vector<S>& values() const { return node_->value; }
    // In-place mutation is reserved for leaves (init, optimizer updates,
    // finite-difference probes); intermediates are immutable.
    std::vector<S>& values_mut() { return node_->value; }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<S>& grad() const {
        if (node_->grad.empty()) throw ContractError("tensor: gradient not populated");
        return node_->grad;
    }
    void zero_grad() { node_->grad.assign(node_->value.size(), S(0)); }

    S scalar() const {
        if (numel() != 1) throw ContractError("tensor: scalar() on shape " + shape_str(shape()));
        return node_->value[0];
    }

    S at(const std::vector<size_t>& idx) const {
        if (idx.size() != rank()) throw ShapeError("tensor: index rank mismatch");
        size_t flat = 0;
        for (size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] >= node_->shape[i]) throw ShapeError("tensor: index out of bounds");
            flat = flat * node_->shape[i] + idx[i];
        }
        return node_->value[flat];
    }

    std::shared_ptr<Node<S>> node() const { return node_; }
    bool defined() const { return node_ != nullptr; }

  private:
    std::shared_ptr<Node<S>> node_;
};

// ---------------------------------------------------------------------------
// Tape: the recorded forward graph in topological order (parents first).
// Backward replay walks it once, in reverse.

template <std::floating_point S>
class Tape {
  public:
    static Tape trace(const Tensor<S>& root) {
        Tape t;
        std::unordered_set<Node<S>*> seen;
        // Iterative post-order DFS.
        std::vector<std::pair<std::shared_ptr<Node<S>>, size_t>> stack;
        stack.push_back({root.node(), 0});
        seen.insert(root.node().get());
        while (!stack.empty()) {
            auto& [node, next_child] = stack.back();
            if (next_child < node->parents.size()) {
                auto child = node->parents[next_child++];
                if (!seen.count(child.get())) {
                    seen.insert(child.get());
                    stack.push_back({child, 0});
                }
            } else {
                t.order_.push_back(node);
                stack.pop_back();
            }
        }
        return t;
    }

    const std::vector<std::shared_ptr<Node<S>>>& nodes() const { return order_; }

    void run_backward() {
        if (order_.empty()) throw ContractError("backward: empty tape");
        auto& root = order_.back();
        root->ensure_grad();
        std::fill(root->grad.begin(), root->grad.end(), S(1));
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            Node<S>& n = **it;
            if (n.backward_fn && n.requires_grad && !n.grad.empty()) n.backward_fn(n);
        }
    }

  private:
    std::vector<std::shared_ptr<Node<S>>> order_;
};

// Populates .grad of every requires_grad tensor reachable from a scalar loss.
// Gradients accumulate (+=) across fan-out; call zero_grad between steps.
template <std::floating_point S>
void backward(const Tensor<S>& loss) {
    if (loss.numel() != 1)
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    Tape<S>::trace(loss).run_backward();
}

// ---------------------------------------------------------------------------
// Ops.

namespace detail {

template <std::floating_point S>
Tensor<S> finish(std::shared_ptr<Node<S>> n, std::function<void(Node<S>&)> bw) {
    check_finite(*n);
    if (n->requires_grad) n->backward_fn = std::move(bw);
    return Tensor<S>(std::move(n));
}

}  // namespace detail

template <std::floating_point S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto n = detail::new_node<S>(a.shape(), {a.node(), b.node()}, "add");
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] + bv[i];
    return detail::finish<S>(std::move(n), [](Node<S>& n) {
        for (int p = 0; p < 2; ++p) {
            if (!n.parents[p]->requires_grad) continue;
            n.parents[p]->ensure_grad();
            auto& g = n.parents[p]->grad;
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
    });
}

template <std::floating_point S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto n = detail::new_node<S>(a.shape(), {a.node(), b.node()}, "sub");
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] - bv[i];
    return detail::finish<S>(std::move(n), [](Node<S>& n) {
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            auto& g = n.parents[0]->grad;
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            auto& g = n.parents[1]->grad;
            for (size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
        }
    });
}

// Broadcast-add a [D] bias over the last axis.
template <std::floating_point S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& b) {
    if (b.rank() != 1 || x.rank() < 1 || b.dim(0) != x.shape().back())
        throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " does not match last axis of " +
                         shape_str(x.shape()));
    const size_t d = b.dim(0);
    const size_t rows = x.numel() / d;
    auto n = detail::new_node<S>(x.shape(), {x.node(), b.node()}, "add_bias");
    const auto& xv = x.values();
    const auto& bv = b.values();
    for (size_t r = 0; r < rows; ++r)
        for (size_t i = 0; i < d; ++i) n->value[r * d + i] = xv[r * d + i] + bv[i];
    return detail::finish<S>(std::move(n), [d, rows](Node<S>& n) {
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            auto& g = n.parents[0]->grad;
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            auto& g = n.parents[1]->grad;
            for (size_t r = 0; r < rows; ++r)
                for (size_t i = 0; i < d; ++i) g[i] += n.grad[r * d + i];
        }
    });
}

template <std::floating_point S>
Tensor<S> scale(const Tensor<S>& x, double c) {
    auto n = detail::new_node<S>(x.shape(), {x.node()}, "scale");
    const auto& xv = x.values();
    const S sc = static_cast<S>(c);
    for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = xv[i] * sc;
    return detail::finish<S>(std::move(n), [sc](Node<S>& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        auto& g = n.parents[0]->grad;
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * sc;
    });
}

// Matrix product, batched over equal leading axes: [B...,m,k] x [B...,k,n].
template <std::floating_point S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    auto fail = [&] {
        throw ShapeError("matmul: incompatible shapes " + shape_str(as) + " vs " + shape_str(bs));
    };
    if (as.size() < 2 || bs.size() != as.size()) fail();
    for (size_t i = 0; i + 2 < as.size(); ++i)
        if (as[i] != bs[i]) fail();
    const size_t m = as[as.size() - 2], k = as[as.size() - 1];
    const size_t k2 = bs[bs.size() - 2], nn = bs[bs.size() - 1];
    if (k != k2) fail();
    size_t batch = 1;
    for (size_t i = 0; i + 2 < as.size(); ++i) batch *= as[i];

    std::vector<size_t> out_shape(as.begin(), as.end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(nn);
    auto node = detail::new_node<S>(std::move(out_shape), {a.node(), b.node()}, "matmul");
    const S* av = a.values().data();
    const S* bv = b.values().data();
    S* ov = node->value.data();
    for (size_t bt = 0; bt < batch; ++bt) {
        const S* A = av + bt * m * k;
        const S* B = bv + bt * k * nn;
        S* C = ov + bt * m * nn;
        for (size_t i = 0; i < m; ++i) {
            for (size_t kk = 0; kk < k; ++kk) {
                const S aik = A[i * k + kk];
                const S* Brow = B + kk * nn;
                S* Crow = C + i * nn;
                for (size_t j = 0; j < nn; ++j) Crow[j] += aik * Brow[j];
            }
        }
    }
    return detail::finish<S>(std::move(node), [batch, m, k, nn](Node<S>& n) {
        const S* av = n.parents[0]->value.data();
        const S* bv = n.parents[1]->value.data();
        const S* gv = n.grad.data();
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            S* ga = n.parents[0]->grad.data();
            for (size_t bt = 0; bt < batch; ++bt) {
                const S* B = bv + bt * k * nn;
                const S* G = gv + bt * m * nn;
                S* GA = ga + bt * m * k;
                for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < nn; ++j) {
                        const S gij = G[i * nn + j];
                        for (size_t kk = 0; kk < k; ++kk) GA[i * k + kk] += gij * B[kk * nn + j];
                    }
            }
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            S* gb = n.parents[1]->grad.data();
            for (size_t bt = 0; bt < batch; ++bt) {
                const S* A = av + bt * m * k;
                const S* G = gv + bt * m * nn;
                S* GB = gb + bt * k * nn;
                for (size_t i = 0; i < m; ++i)
                    for (size_t kk = 0; kk < k; ++kk) {
                        const S aik = A[i * k + kk];
                        const S* Grow = G + i * nn;
                        S* GBrow = GB + kk * nn;
                        for (size_t j = 0; j < nn; ++j) GBrow[j] += aik * Grow[j];
                    }
            }
        }
    });
}

template <std::floating_point S>
Tensor<S> reshape(const Tensor<S>& x, std::vector<size_t> new_shape) {
    if (detail::shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
    auto n = detail::new_node<S>(std::move(new_shape), {x.node()}, "reshape");
    n->value = x.values();
    return detail::finish<S>(std::move(n), [](Node<S>& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        auto& g = n.parents[0]->grad;
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
}

namespace detail {

// out[idx] = in[permuted idx]; used by permute forward and (inverted) backward.
template <std::floating_point S>
void permute_copy(const std::vector<size_t>& in_shape, const std::vector<size_t>& axes,
                  const S* in, S* out, bool accumulate) {
    const size_t r = in_shape.size();
    std::vector<size_t> out_shape(r), in_strides(r, 1), out_of_in(r);
    for (size_t i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];
    for (size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
    // stride in input space for each output axis
    std::vector<size_t> stride_for_out(r);
    for (size_t i = 0; i < r; ++i) stride_for_out[i] = in_strides[axes[i]];
    std::vector<size_t> idx(r, 0);
    const size_t total = shape_numel(in_shape);
    size_t in_off = 0;
    for (size_t flat = 0; flat < total; ++flat) {
        if (accumulate)
            out[flat] += in[in_off];
        else
            out[flat] = in[in_off];
        // increment output multi-index, tracking input offset
        for (size_t ax = r; ax-- > 0;) {
            idx[ax]++;
            in_off += stride_for_out[ax];
            if (idx[ax] < out_shape[ax]) break;
            in_off -= stride_for_out[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

}  // namespace detail

// Axis permutation with copy; axes[i] names the input axis placed at i.
template <std::floating_point S>
Tensor<S> permute(const Tensor<S>& x, std::vector<size_t> axes) {
    const size_t r = x.rank();
    if (axes.size() != r) throw ShapeError("permute: axes rank mismatch");
    std::vector<bool> used(r, false);
    std::vector<size_t> out_shape(r);
    for (size_t i = 0; i < r; ++i) {
        if (axes[i] >= r || used[axes[i]]) throw ShapeError("permute: invalid axes");
        used[axes[i]] = true;
        out_shape[i] = x.dim(axes[i]);
    }
    auto n = detail::new_node<S>(out_shape, {x.node()}, "permute");
    detail::permute_copy<S>(x.shape(), axes, x.values().data(), n->value.data(), false);
    return detail::finish<S>(std::move(n), [axes, out_shape](Node<S>& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        std::vector<size_t> inv(axes.size());
        for (size_t i = 0; i < axes.size(); ++i) inv[axes[i]] = i;
        detail::permute_copy<S>(out_shape, inv, n.grad.data(), n.parents[0]->grad.data(), true);
    });
}

template <std::floating_point S>
Tensor<S> transpose(const Tensor<S>& x) {
    if (x.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(x.shape()));
    return permute(x, {1, 0});
}

template <std::floating_point S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const auto& s0 = parts[0].shape();
    if (axis >= s0.size()) throw ShapeError("concat: axis out of range");
    size_t axis_total = 0;
    for (const auto& p : parts) {
        if (p.rank() != s0.size()) throw ShapeError("concat: rank mismatch");
        for (size_t i = 0; i < s0.size(); ++i)
            if (i != axis && p.dim(i) != s0[i])
                throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(s0));
        axis_total += p.dim(axis);
    }
    std::vector<size_t> out_shape = s0;
    out_shape[axis] = axis_total;
    std::vector<std::shared_ptr<Node<S>>> parent_nodes;
    for (const auto& p : parts) parent_nodes.push_back(p.node());
    auto n = detail::new_node<S>(out_shape, std::move(parent_nodes), "concat");
    const auto view = detail::axis_view(out_shape, axis);
    std::vector<size_t> lens;
    for (const auto& p : parts) lens.push_back(p.dim(axis));
    size_t start = 0;
    for (size_t pi = 0; pi < parts.size(); ++pi) {
        const auto& pv = parts[pi].values();
        const size_t len = lens[pi];
        for (size_t o = 0; o < view.outer; ++o)
            std::copy(pv.begin() + o * len * view.inner, pv.begin() + (o + 1) * len * view.inner,
                      n->value.begin() + (o * view.len + start) * view.inner);
        start += len;
    }
    return detail::finish<S>(std::move(n), [view, lens](Node<S>& n) {
        size_t start = 0;
        for (size_t pi = 0; pi < n.parents.size(); ++pi) {
            const size_t len = lens[pi];
            if (n.parents[pi]->requires_grad) {
                n.parents[pi]->ensure_grad();
                auto& g = n.parents[pi]->grad;
                for (size_t o = 0; o < view.outer; ++o) {
                    const S* src = n.grad.data() + (o * view.len + start) * view.inner;
                    S* dst = g.data() + o * len * view.inner;
                    for (size_t i = 0; i < len * view.inner; ++i) dst[i] += src[i];
                }
            }
            start += len;
        }
    });
}

// Contiguous range [start, start+len) along an axis.
template <std::floating_point S>
Tensor<S> narrow(const Tensor<S>& x, size_t axis, size_t start, size_t len) {
    if (axis >= x.rank()) throw ShapeError("narrow: axis out of range");
    if (start + len > x.dim(axis) || len == 0)
        throw ShapeError("narrow: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") exceeds axis of length " + std::to_string(x.dim(axis)));
    std::vector<size_t> out_shape = x.shape();
    out_shape[axis] = len;
    auto n = detail::new_node<S>(out_shape, {x.node()}, "narrow");
    const auto view = detail::axis_view(x.shape(), axis);
    const auto& xv = x.values();
    for (size_t o = 0; o < view.outer; ++o)
        std::copy(xv.begin() + (o * view.len + start) * view.inner,
                  xv.begin() + (o * view.len + start + len) * view.inner,
                  n->value.begin() + o * len * view.inner);
    return detail::finish<S>(std::move(n), [view, start, len](Node<S>& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        auto& g = n.parents[0]->grad;
        for (size_t o = 0; o < view.outer; ++o) {
            const S* src = n.grad.data() + o * len * view.inner;
            S* dst = g.data() + (o * view.len + start) * view.inner;
            for (size_t i = 0; i < len * view.inner; ++i) dst[i] += src[i];
        }
    });
}

// Row gather along axis 0 (also serves as embedding lookup). Indices may
// repeat; backward scatter-adds.
template <std::floating_point S>
Tensor<S> gather_rows(const Tensor<S>& x, std::vector<size_t> indices) {
    if (x.rank() < 1) throw ShapeError("gather_rows: rank 0 input");
    const size_t rows = x.dim(0);
    for (size_t i : indices)
        if (i >= rows) throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range");
    const size_t inner = x.numel() / rows;
    std::vector<size_t> out_shape = x.shape();
    out_shape[0] = indices.size();
    auto n = detail::new_node<S>(out_shape, {x.node()}, "gather_rows");
    const auto& xv = x.values();
    for (size_t r = 0; r < indices.size(); ++r)
        std::copy(xv.begin() + indices[r] * inner, xv.begin() + (indices[r] + 1) * inner,
                  n->value.begin() + r * inner);
    return detail::finish<S>(std::move(n), [indices, inner](Node<S>& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        auto& g = n.parents[0]->grad;
        for (size_t r = 0; r < indices.size(); ++r) {
            const S* src = n.grad.data() + r * inner;
            S* dst = g.data() + indices[r] * inner;
            for (size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    });
}

// Mean along one axis; the axis is removed from the shape.
template <std::floating_point S>
Tensor<S> mean_axis(const Tensor<S>& x, size_t axis) {
    if (axis >= x.rank()) throw ShapeError("mean_axis: axis out of range");
    std::vector<size_t> out_shape;
    for (size_t i = 0; i < x.rank(); ++i)
        if (i != axis) out_shape.push_back(x.dim(i));
    if (out_shape.empty()) out_shape.push_back(1);
    const auto view = detail::axis_view(x.shape(), axis);
    auto n = detail::new_node<S>(out_shape, {x.node()}, "mean_axis");
    const auto& xv = x.values();
    const S inv = S(1) / static_cast<S>(view.len);
    for (size_t o = 0; o < view.outer; ++o)
        for (size_t l = 0; l < view.len; ++l)
            for (size_t i = 0; i < view.inner; ++i)
                n->value[o * view.inner + i] += xv[(o * view.len + l) * view.inner + i] * inv;
    return detail::finish<S>(std::move(n), [view, inv](Node<S>& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        auto& g = n.parents[0]->grad;
        for (size_t o = 0; o < view.outer; ++o)
            for (size_t l = 0; l < view.len; ++l)
                for (size_t i = 0; i < view.inner; ++i)
                    g[(o * view.len + l) * view.inner + i] += n.grad[o * view.inner + i] * inv;
    });
}

template <std::floating_point S>
Tensor<S> sum_all(const Tensor<S>& x) {
    auto n = detail::new_node<S>({1}, {x.node()}, "sum_all");
    S acc = 0;
    for (S v : x.values()) acc += v;
    n->value[0] = acc;
    return detail::finish<S>(std::move(n), [](Node<S>& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        auto& g = n.parents[0]->grad;
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0];
    });
}

// Numerically stable softmax along an axis: every slice is max-subtracted
// before exponentiation, so slices sum to 1 and constant shifts cancel.
template <std::floating_point S>
Tensor<S> softmax(const Tensor<S>& x, size_t axis) {
    if (axis >= x.rank()) throw ShapeError("softmax: axis out of range");
    const auto view = detail::axis_view(x.shape(), axis);
    auto n = detail::new_node<S>(x.shape(), {x.node()}, "softmax");
    const auto& xv = x.values();
    for (size_t o = 0; o < view.outer; ++o) {
        for (size_t i = 0; i < view.inner; ++i) {
            const size_t base = o * view.len * view.inner + i;
            S mx = xv[base];
            for (size_t l = 1; l < view.len; ++l) mx = std::max(mx, xv[base + l * view.inner]);
            S denom = 0;
            for (size_t l = 0; l < view.len; ++l) {
                const S e = std::exp(xv[base + l * view.inner] - mx);
                n->value[base + l * view.inner] = e;
                denom += e;
            }
            for (size_t l = 0; l < view.len; ++l) n->value[base + l * view.inner] /= denom;
        }
    }
    return detail::finish<S>(std::move(n), [view](Node<S>& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        auto& g = n.parents[0]->grad;
        for (size_t o = 0; o < view.outer; ++o) {
            for (size_t i = 0; i < view.inner; ++i) {
                const size_t base = o * view.len * view.inner + i;
                S dot = 0;
                for (size_t l = 0; l < view.len; ++l)
                    dot += n.grad[base + l * view.inner] * n.value[base + l * view.inner];
                for (size_t l = 0; l < view.len; ++l) {
                    const size_t k = base + l * view.inner;
                    g[k] += n.value[k] * (n.grad[k] - dot);
                }
            }
        }
    });
}

// Layer normalization over the last axis: zero mean, unit variance
// (epsilon 1e-5 inside the square root), then elementwise gain and bias.
template <std::floating_point S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias) {
    const size_t d = x.shape().back();
    if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != d || bias.dim(0) != d)
        throw ShapeError("layer_norm: gain/bias must match last axis of " + shape_str(x.shape()));
    const size_t rows = x.numel() / d;
    auto n = detail::new_node<S>(x.shape(), {x.node(), gain.node(), bias.node()}, "layer_norm");
    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    constexpr double kEps = 1e-5;
    for (size_t r = 0; r < rows; ++r) {
        const S* row = xv.data() + r * d;
        double mu = 0;
        for (size_t i = 0; i < d; ++i) mu += row[i];
        mu /= double(d);
        double var = 0;
        for (size_t i = 0; i < d; ++i) {
            const double c = double(row[i]) - mu;
            var += c * c;
        }
        var /= double(d);
        const double inv = 1.0 / std::sqrt(var + kEps);
        for (size_t i = 0; i < d; ++i) {
            const double xh = (double(row[i]) - mu) * inv;
            n->value[r * d + i] = static_cast<S>(xh) * gv[i] + bv[i];
        }
    }
    return detail::finish<S>(std::move(n), [d, rows](Node<S>& n) {
        const auto& xv = n.parents[0]->value;
        const auto& gv = n.parents[1]->value;
        constexpr double kEps = 1e-5;
        const bool need_x = n.parents[0]->requires_grad;
        const bool need_g = n.parents[1]->requires_grad;
        const bool need_b = n.parents[2]->requires_grad;
        if (need_x) n.parents[0]->ensure_grad();
        if (need_g) n.parents[1]->ensure_grad();
        if (need_b) n.parents[2]->ensure_grad();
        for (size_t r = 0; r < rows; ++r) {
            const S* row = xv.data() + r * d;
            double mu = 0;
            for (size_t i = 0; i < d; ++i) mu += row[i];
            mu /= double(d);
            double var = 0;
            for (size_t i = 0; i < d; ++i) {
                const double c = double(row[i]) - mu;
                var += c * c;
            }
            var /= double(d);
            const double inv = 1.0 / std::sqrt(var + kEps);
            double mean_dxh = 0, mean_dxh_xh = 0;
            for (size_t i = 0; i < d; ++i) {
                const double xh = (double(row[i]) - mu) * inv;
                const double dxh = double(n.grad[r * d + i]) * double(gv[i]);
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh;
                if (need_g) n.parents[1]->grad[i] += n.grad[r * d + i] * static_cast<S>(xh);
                if (need_b) n.parents[2]->grad[i] += n.grad[r * d + i];
            }
            mean_dxh /= double(d);
            mean_dxh_xh /= double(d);
            if (need_x) {
                for (size_t i = 0; i < d; ++i) {
                    const double xh = (double(row[i]) - mu) * inv;
                    const double dxh = double(n.grad[r * d + i]) * double(gv[i]);
                    n.parents[0]->grad[r * d + i] +=
                        static_cast<S>(inv * (dxh - mean_dxh - xh * mean_dxh_xh));
                }
            }
        }
    });
}

template <std::floating_point S>
Tensor<S> gelu(const Tensor<S>& x) {
    auto n = detail::new_node<S>(x.shape(), {x.node()}, "gelu");
    const auto& xv = x.values();
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    for (size_t i = 0; i < n->value.size(); ++i) {
        const double v = xv[i];
        n->value[i] = static_cast<S>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
    }
    return detail::finish<S>(std::move(n), [](Node<S>& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        const auto& xv = n.parents[0]->value;
        auto& g = n.parents[0]->grad;
        constexpr double kInvSqrt2 = 0.70710678118654752440;
        constexpr double kInvSqrt2Pi = 0.39894228040143267794;
        for (size_t i = 0; i < g.size(); ++i) {
            const double v = xv[i];
            const double d = 0.5 * (1.0 + std::erf(v * kInvSqrt2)) +
                             v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
            g[i] += n.grad[i] * static_cast<S>(d);
        }
    });
}

template <std::floating_point S>
Tensor<S> relu(const Tensor<S>& x) {
    auto n = detail::new_node<S>(x.shape(), {x.node()}, "relu");
    const auto& xv = x.values();
    for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = xv[i] > S(0) ? xv[i] : S(0);
    return detail::finish<S>(std::move(n), [](Node<S>& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        const auto& xv = n.parents[0]->value;
        auto& g = n.parents[0]->grad;
        for (size_t i = 0; i < g.size(); ++i)
            if (xv[i] > S(0)) g[i] += n.grad[i];
    });
}

// Bilinear resampling of a [..., R, C, D] grid at per-cell continuous
// offsets [..., R, C, 2] (row delta, col delta). Out-of-range coordinates
// clamp to the border; with zero offsets the result equals the grid exactly.
// Differentiable in both the grid values and the offsets.
template <std::floating_point S>
Tensor<S> bilinear_sample(const Tensor<S>& grid, const Tensor<S>& offsets) {
    const auto& gs = grid.shape();
    const auto& os = offsets.shape();
    if (gs.size() < 3 || os.size() != gs.size())
        throw ShapeError("bilinear_sample: need [...,R,C,D] grid and [...,R,C,2] offsets, got " +
                         shape_str(gs) + " and " + shape_str(os));
    for (size_t i = 0; i + 1 < gs.size(); ++i)
        if (gs[i] != os[i]) throw ShapeError("bilinear_sample: grid/offset shape mismatch " +
                                             shape_str(gs) + " vs " + shape_str(os));
    if (os.back() != 2) throw ShapeError("bilinear_sample: offsets last axis must be 2");
    const size_t D = gs[gs.size() - 1];
    const size_t C = gs[gs.size() - 2];
    const size_t R = gs[gs.size() - 3];
    size_t batch = 1;
    for (size_t i = 0; i + 3 < gs.size(); ++i) batch *= gs[i];

    auto n = detail::new_node<S>(gs, {grid.node(), offsets.node()}, "bilinear_sample");
    const auto& gv = grid.values();
    const auto& ov = offsets.values();
    auto corners = [R, C](double rr, double cc, size_t& r0, size_t& r1, size_t& c0, size_t& c1,
                          double& fr, double& fc) {
        rr = std::clamp(rr, 0.0, double(R - 1));
        cc = std::clamp(cc, 0.0, double(C - 1));
        r0 = static_cast<size_t>(std::floor(rr));
        c0 = static_cast<size_t>(std::floor(cc));
        if (r0 > R - 1) r0 = R - 1;
        if (c0 > C - 1) c0 = C - 1;
        r1 = std::min(r0 + 1, R - 1);
        c1 = std::min(c0 + 1, C - 1);
        fr = rr - double(r0);
        fc = cc - double(c0);
    };
    for (size_t b = 0; b < batch; ++b) {
        const S* G = gv.data() + b * R * C * D;
        const S* O = ov.data() + b * R * C * 2;
        S* out = n->value.data() + b * R * C * D;
        for (size_t r = 0; r < R; ++r) {
            for (size_t c = 0; c < C; ++c) {
                const size_t cell = r * C + c;
                size_t r0, r1, c0, c1;
                double fr, fc;
                corners(double(r) + double(O[cell * 2]), double(c) + double(O[cell * 2 + 1]), r0, r1,
                        c0, c1, fr, fc);
                const S w00 = static_cast<S>((1 - fr) * (1 - fc));
                const S w01 = static_cast<S>((1 - fr) * fc);
                const S w10 = static_cast<S>(fr * (1 - fc));
                const S w11 = static_cast<S>(fr * fc);
                const S* g00 = G + (r0 * C + c0) * D;
                const S* g01 = G + (r0 * C + c1) * D;
                const S* g10 = G + (r1 * C + c0) * D;
                const S* g11 = G + (r1 * C + c1) * D;
                S* dst = out + cell * D;
                for (size_t d = 0; d < D; ++d)
                    dst[d] = w00 * g00[d] + w01 * g01[d] + w10 * g10[d] + w11 * g11[d];
            }
        }
    }
    return detail::finish<S>(std::move(n), [batch, R, C, D, corners](Node<S>& n) {
        const auto& gv = n.parents[0]->value;
        const auto& ov = n.parents[1]->value;
        const bool need_grid = n.parents[0]->requires_grad;
        const bool need_off = n.parents[1]->requires_grad;
        if (need_grid) n.parents[0]->ensure_grad();
        if (need_off) n.parents[1]->ensure_grad();
        for (size_t b = 0; b < batch; ++b) {
            const S* G = gv.data() + b * R * C * D;
            const S* O = ov.data() + b * R * C * 2;
            const S* dy = n.grad.data() + b * R * C * D;
            for (size_t r = 0; r < R; ++r) {
                for (size_t c = 0; c < C; ++c) {
                    const size_t cell = r * C + c;
                    const double raw_r = double(r) + double(O[cell * 2]);
                    const double raw_c = double(c) + double(O[cell * 2 + 1]);
                    size_t r0, r1, c0, c1;
                    double fr, fc;
                    corners(raw_r, raw_c, r0, r1, c0, c1, fr, fc);
                    const bool r_in = raw_r > 0.0 && raw_r < double(R - 1);
                    const bool c_in = raw_c > 0.0 && raw_c < double(C - 1);
                    const S* g00 = G + (r0 * C + c0) * D;
                    const S* g01 = G + (r0 * C + c1) * D;
                    const S* g10 = G + (r1 * C + c0) * D;
                    const S* g11 = G + (r1 * C + c1) * D;
                    double acc_dr = 0, acc_dc = 0;
                    for (size_t d = 0; d < D; ++d) {
                        const double gy = dy[cell * D + d];
                        if (need_grid) {
                            S* gg = n.parents[0]->grad.data() + b * R * C * D;
                            gg[(r0 * C + c0) * D + d] += static_cast<S>(gy * (1 - fr) * (1 - fc));
                            gg[(r0 * C + c1) * D + d] += static_cast<S>(gy * (1 - fr) * fc);
                            gg[(r1 * C + c0) * D + d] += static_cast<S>(gy * fr * (1 - fc));
                            gg[(r1 * C + c1) * D + d] += static_cast<S>(gy * fr * fc);
                        }
                        if (need_off) {
                            const double dval_drr = (1 - fc) * (double(g10[d]) - double(g00[d])) +
                                                    fc * (double(g11[d]) - double(g01[d]));
                            const double dval_dcc = (1 - fr) * (double(g01[d]) - double(g00[d])) +
                                                    fr * (double(g11[d]) - double(g10[d]));
                            acc_dr += gy * dval_drr;
                            acc_dc += gy * dval_dcc;
                        }
                    }
                    if (need_off) {
                        S* og = n.parents[1]->grad.data() + b * R * C * 2;
                        if (r_in) og[cell * 2] += static_cast<S>(acc_dr);
                        if (c_in) og[cell * 2 + 1] += static_cast<S>(acc_dc);
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Named parameter collection + AdamW.

template <std::floating_point S>
class ParamSet {
  public:
    Tensor<S>& add(const std::string& name, Tensor<S> t) {
        if (index_.count(name)) throw ContractError("params: duplicate name '" + name + "'");
        index_[name] = items_.size();
        items_.emplace_back(name, std::move(t));
        return items_.back().second;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<S>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("params: unknown name '" + name + "'");
        return items_[it->second].second;
    }
    const Tensor<S>& at(const std::string& name) const {
        return const_cast<ParamSet*>(this)->at(name);
    }

    size_t size() const { return items_.size(); }
    const std::string& name(size_t i) const { return items_[i].first; }
    Tensor<S>& tensor(size_t i) { return items_[i].second; }
    const Tensor<S>& tensor(size_t i) const { return items_[i].second; }

    void zero_grad() {
        for (auto& [name, t] : items_) t.zero_grad();
    }

  private:
    std::vector<std::pair<std::string, Tensor<S>>> items_;
    std::unordered_map<std::string, size_t> index_;
};

// AdamW: Adam moments with bias correction plus decoupled weight decay.
// Moment buffers persist across steps; the learning rate may change between
// steps (schedules drive it).
template <std::floating_point S>
class AdamW {
  public:
    AdamW(double lr, double beta1 = 0.9, double beta2 = 0.999, double weight_decay = 0.0,
          double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {}

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

    // Parameter groups: names starting with `prefix` train at lr * scale.
    void add_lr_scale(const std::string& prefix, double scale) {
        lr_scales_.emplace_back(prefix, scale);
    }

    void step(ParamSet<S>& params) {
        if (slots_.size() < params.size()) slots_.resize(params.size());
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, double(t_));
        const double bc2 = 1.0 - std::pow(beta2_, double(t_));
        for (size_t i = 0; i < params.size(); ++i) {
            Tensor<S>& p = params.tensor(i);
            if (!p.has_grad())
                throw ContractError("adamw_step: parameter '" + params.name(i) + "' has no gradient");
            double lr = lr_;
            for (const auto& [prefix, scale] : lr_scales_)
                if (params.name(i).rfind(prefix, 0) == 0) lr *= scale;
            auto& slot = slots_[i];
            if (slot.m.empty()) {
                slot.m.assign(p.numel(), S(0));
                slot.v.assign(p.numel(), S(0));
            }
            const auto& g = p.grad();
            auto& w = p.values_mut();
            for (size_t k = 0; k < w.size(); ++k) {
                const double gk = g[k];
                const double m = beta1_ * double(slot.m[k]) + (1.0 - beta1_) * gk;
                const double v = beta2_ * double(slot.v[k]) + (1.0 - beta2_) * gk * gk;
                slot.m[k] = static_cast<S>(m);
                slot.v[k] = static_cast<S>(v);
                const double update = (m / bc1) / (std::sqrt(v / bc2) + eps_);
                w[k] = static_cast<S>(double(w[k]) - lr * update - lr * weight_decay_ * double(w[k]));
            }
        }
    }

  private:
    struct Slot {
        std::vector<S> m, v;
    };
    double lr_, beta1_, beta2_, weight_decay_, eps_;
    int64_t t_ = 0;
    std::vector<Slot> slots_;
    std::vector<std::pair<std::string, double>> lr_scales_;
};

}  // namespace vqt
