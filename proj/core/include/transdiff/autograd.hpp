// Reverse-mode automatic differentiation on a flat tape. Nodes are created in
// topological order, so backward() is a single reverse sweep. Closures pull
// the node's gradient into its parents; leaves accumulate into external
// gradient sinks (parameters or grad_check probes).
#pragma once

#include "transdiff/tensor.hpp"

#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace transdiff {

template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
};

// Named parameter tensors in registration order. Single writer (the
// optimizer) between forward/backward passes.
template <class T>
class ParamStore {
  public:
    int add(const std::string& name, Tensor<T> init) {
        if (index_.count(name)) fail("duplicate parameter name: " + name);
        const int id = static_cast<int>(params_.size());
        Tensor<T> grad(init.shape());
        params_.push_back(Parameter<T>{name, std::move(init), std::move(grad)});
        index_.emplace(name, id);
        return id;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Parameter<T>& at(int id) { return params_[static_cast<std::size_t>(id)]; }
    const Parameter<T>& at(int id) const { return params_[static_cast<std::size_t>(id)]; }

    Parameter<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) fail("unknown parameter: " + name);
        return params_[static_cast<std::size_t>(it->second)];
    }
    const Parameter<T>& at(const std::string& name) const {
        return const_cast<ParamStore*>(this)->at(name);
    }

    int id_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) fail("unknown parameter: " + name);
        return it->second;
    }

    std::size_t size() const { return params_.size(); }
    std::int64_t total_elements() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p.value.numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_)
            std::fill(p.grad.data(), p.grad.data() + p.grad.numel(), T(0));
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

  private:
    std::vector<Parameter<T>> params_;
    std::unordered_map<std::string, int> index_;
};

namespace ag {

template <class T>
class Graph;

template <class T>
struct Var {
    Graph<T>* g = nullptr;
    int id = -1;

    const Tensor<T>& val() const { return g->value(id); }
    const Shape& shape() const { return g->value(id).shape(); }
};

template <class T>
class Graph {
  public:
    explicit Graph(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }

    Var<T> constant(Tensor<T> v) { return push(std::move(v), false, nullptr); }

    // differentiable input whose gradient accumulates into *grad_sink
    Var<T> leaf(const Tensor<T>& value, Tensor<T>* grad_sink) {
        Var<T> out = push(Tensor<T>(value), recording_, nullptr);
        if (recording_) {
            const int id = out.id;
            nodes_[id].backprop = [grad_sink](Graph& g, int self) {
                const Tensor<T>& d = g.grad_of(self);
                for (std::int64_t i = 0; i < d.numel(); ++i) (*grad_sink)[i] += d[i];
            };
        }
        return out;
    }

    // leaf bound to a named parameter, cached per graph so shared weights are
    // materialized once per forward pass
    Var<T> param(ParamStore<T>& store, int param_id) {
        auto it = param_cache_.find(param_id);
        if (it != param_cache_.end()) return Var<T>{this, it->second};
        Parameter<T>& p = store.at(param_id);
        Var<T> v = leaf(p.value, &p.grad);
        param_cache_.emplace(param_id, v.id);
        return v;
    }
    Var<T> param(ParamStore<T>& store, const std::string& name) {
        return param(store, store.id_of(name));
    }

    Var<T> push(Tensor<T> value, bool needs_grad, std::function<void(Graph&, int)> backprop) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = recording_ && needs_grad;
        if (n.needs_grad) n.backprop = std::move(backprop);
        nodes_.push_back(std::move(n));
        return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

    // gradient buffer of a node, zero-initialized on first touch
    Tensor<T>& grad_buffer(int id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
        return n.grad;
    }
    const Tensor<T>& grad_of(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
    bool grad_touched(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

    void accum(int parent, const Tensor<T>& contribution) {
        Node& n = nodes_[static_cast<std::size_t>(parent)];
        if (!n.needs_grad) return;
        Tensor<T>& g = grad_buffer(parent);
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += contribution[i];
    }

    // reverse sweep from a scalar root; leaves push into their grad sinks
    void backward(Var<T> root) {
        if (!recording_) fail("backward on a non-recording graph");
        if (root.val().numel() != 1) fail("backward root must be a scalar");
        grad_buffer(root.id)[0] = T(1);
        for (int id = root.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.needs_grad || n.grad.empty() || !n.backprop) continue;
            n.backprop(*this, id);
        }
    }

    std::size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool needs_grad = false;
        std::function<void(Graph&, int)> backprop;
    };

    bool recording_;
    // deque: node references must stay valid while later ops push nodes
    std::deque<Node> nodes_;
    std::unordered_map<int, int> param_cache_;
};

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

template <class T>
bool any_needs_grad(std::initializer_list<Var<T>> vars) {
    for (const Var<T>& v : vars)
        if (v.g->needs_grad(v.id)) return true;
    return false;
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    Graph<T>& g = *a.g;
    Tensor<T> out = transdiff::add(a.val(), b.val());
    const int pa = a.id, pb = b.id;
    return g.push(std::move(out), any_needs_grad({a, b}), [pa, pb](Graph<T>& g, int self) {
        const Tensor<T>& d = g.grad_of(self);
        g.accum(pa, d);
        g.accum(pb, d);
    });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
    Graph<T>& g = *a.g;
    Tensor<T> out = transdiff::sub(a.val(), b.val());
    const int pa = a.id, pb = b.id;
    return g.push(std::move(out), any_needs_grad({a, b}), [pa, pb](Graph<T>& g, int self) {
        const Tensor<T>& d = g.grad_of(self);
        g.accum(pa, d);
        if (g.needs_grad(pb)) {
            Tensor<T>& gb = g.grad_buffer(pb);
            for (std::int64_t i = 0; i < d.numel(); ++i) gb[i] -= d[i];
        }
    });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    Graph<T>& g = *a.g;
    Tensor<T> out = transdiff::mul(a.val(), b.val());
    const int pa = a.id, pb = b.id;
    return g.push(std::move(out), any_needs_grad({a, b}), [pa, pb](Graph<T>& g, int self) {
        const Tensor<T>& d = g.grad_of(self);
        if (g.needs_grad(pa)) {
            const Tensor<T>& vb = g.value(pb);
            Tensor<T>& ga = g.grad_buffer(pa);
            for (std::int64_t i = 0; i < d.numel(); ++i) ga[i] += d[i] * vb[i];
        }
        if (g.needs_grad(pb)) {
            const Tensor<T>& va = g.value(pa);
            Tensor<T>& gb = g.grad_buffer(pb);
            for (std::int64_t i = 0; i < d.numel(); ++i) gb[i] += d[i] * va[i];
        }
    });
}

template <class T>
Var<T> scale(Var<T> a, T c) {
    Graph<T>& g = *a.g;
    Tensor<T> out = transdiff::scale(a.val(), c);
    const int pa = a.id;
    return g.push(std::move(out), g.needs_grad(pa), [pa, c](Graph<T>& g, int self) {
        const Tensor<T>& d = g.grad_of(self);
        if (!g.needs_grad(pa)) return;
        Tensor<T>& ga = g.grad_buffer(pa);
        for (std::int64_t i = 0; i < d.numel(); ++i) ga[i] += d[i] * c;
    });
}

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    Graph<T>& g = *a.g;
    Tensor<T> out = transdiff::matmul(a.val(), b.val());
    const int pa = a.id, pb = b.id;
    return g.push(std::move(out), any_needs_grad({a, b}), [pa, pb](Graph<T>& g, int self) {
        const Tensor<T>& d = g.grad_of(self);
        if (g.needs_grad(pa)) {
            Tensor<T>& ga = g.grad_buffer(pa);
            as_matrix(ga).noalias() += as_matrix(d) * as_matrix(g.value(pb)).transpose();
        }
        if (g.needs_grad(pb)) {
            Tensor<T>& gb = g.grad_buffer(pb);
            as_matrix(gb).noalias() += as_matrix(g.value(pa)).transpose() * as_matrix(d);
        }
    });
}

// a * b^T
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
    Graph<T>& g = *a.g;
    Tensor<T> out = transdiff::matmul_nt(a.val(), b.val());
    const int pa = a.id, pb = b.id;
    return g.push(std::move(out), any_needs_grad({a, b}), [pa, pb](Graph<T>& g, int self) {
        const Tensor<T>& d = g.grad_of(self);
        if (g.needs_grad(pa)) {
            Tensor<T>& ga = g.grad_buffer(pa);
            as_matrix(ga).noalias() += as_matrix(d) * as_matrix(g.value(pb));
        }
        if (g.needs_grad(pb)) {
            Tensor<T>& gb = g.grad_buffer(pb);
            as_matrix(gb).noalias() += as_matrix(d).transpose() * as_matrix(g.value(pa));
        }
    });
}

// x (R x C) + v broadcast over rows; v is (C) or (1 x C). This is the one
// documented broadcast in the tensor layer (bias addition).
template <class T>
Var<T> add_rowvec(Var<T> x, Var<T> v) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    const Tensor<T>& vv = v.val();
    const std::int64_t C = xv.cols();
    if (vv.numel() != C) fail("add_rowvec: vector length does not match columns");
    Tensor<T> out(xv.shape());
    for (std::int64_t r = 0; r < xv.rows(); ++r)
        for (std::int64_t c = 0; c < C; ++c) out.at(r, c) = xv.at(r, c) + vv[c];
    const int px = x.id, pv = v.id;
    return g.push(std::move(out), any_needs_grad({x, v}), [px, pv, C](Graph<T>& g, int self) {
        const Tensor<T>& d = g.grad_of(self);
        g.accum(px, d);
        if (g.needs_grad(pv)) {
            Tensor<T>& gv = g.grad_buffer(pv);
            for (std::int64_t r = 0; r < d.rows(); ++r)
                for (std::int64_t c = 0; c < C; ++c) gv[c] += d.at(r, c);
        }
    });
}

// x (R x C) * v broadcast over rows (adaptive layer-norm scaling)
template <class T>
Var<T> mul_rowvec(Var<T> x, Var<T> v) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.val();
    const Tensor<T>& vv = v.val();
    const std::int64_t C = xv.cols();
    if (vv.numel() != C) fail("mul_rowvec: vector length does not match columns");
    Tensor<T> out(xv.shape());
    for (std::int64_t r = 0; r < xv.rows(); ++r)
        for (std::int64_t c = 0; c < C; ++c) out.at(r, c) = xv.at(r, c) * vv[c];
    const int px = x.id, pv = v.id;
    return g.push(std::move(out), any_needs_grad({x, v}), [px, pv, C](Graph<T>& g, int self) {
        const Tensor<T>& d = g.grad_of(self);
        if (g.needs_grad(px)) {
            const Tensor<T>& vvv = g.value(pv);
            Tensor<T>& gx = g.grad_buffer(px);
            for (std::int64_t r = 0; r < d.rows(); ++r)
                for (std::int64_t c = 0; c < C; ++c) gx.at(r, c) += d.at(r, c) * vvv[c];
        }
        if (g.needs_grad(pv)) {
            const Tensor<T>& xvv = g.value(px);
            Tensor<T>& gv = g.grad_buffer(pv);
            for (std::int64_t r = 0; r < d.rows(); ++r)
                for (std::int64_t c = 0; c < C; ++c) gv[c] += d.at(r, c) * xvv.at(r, c);
        }
    });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    if (parts.empty()) fail("concat_rows: empty input");
    Graph<T>& g = *parts.front().g;
    const std::int64_t C = parts.front().val().cols();
    std::int64_t R = 0;
    bool needs = false;
    for (const auto& p : parts) {
        if (p.val().cols() != C) fail("concat_rows: column counts differ");
        R += p.val().rows();
        needs = needs || g.needs_grad(p.id);
    }
    Tensor<T> out({R, C});
    std::vector<int> ids;
    std::vector<std::int64_t> offsets;
    std::int64_t r0 = 0;
    for (const auto& p : parts) {
        const Tensor<T>& v = p.val();
        std::memcpy(out.row_ptr(r0), v.data(), sizeof(T) * static_cast<std::size_t>(v.numel()));
        ids.push_back(p.id);
        offsets.push_back(r0);
        r0 += v.rows();
    }
    return g.push(std::move(out), needs, [ids, offsets](Graph<T>& g, int self) {
        const Tensor<T>& d = g.grad_of(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!g.needs_grad(ids[k])) continue;
            Tensor<T>& gp = g.grad_buffer(ids[k]);
            const std::int64_t rows = gp.rows(), cols = gp.cols();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t c = 0; c < cols; ++c) gp.at(r, c) += d.at(offsets[k] + r, c);
        }
    });
}

template <class T>
Var<T> slice_rows(Var<T> a, std::int64_t r0, std::int64_t nrows) {
    Graph<T>& g = *a.g;
    const Tensor<T>& v = a.val();
    if (r0 < 0 || nrows <= 0 || r0 + nrows > v.rows()) fail("slice_rows: range out of bounds");
    Tensor<T> out({nrows, v.cols()});
    std::memcpy(out.data(), v.row_ptr(r0), sizeof(T) * static_cast<std::size_t>(out.numel()));
    const int pa = a.id;
    return g.push(std::move(out), g.needs_grad(pa), [pa, r0](Graph<T>& g, int self) {
        if (!g.needs_grad(pa)) return;
        const Tensor<T>& d = g.grad_of(self);
        Tensor<T>& ga = g.grad_buffer(pa);
        for (std::int64_t r = 0; r < d.rows(); ++r)
            for (std::int64_t c = 0; c < d.cols(); ++c) ga.at(r0 + r, c) += d.at(r, c);
    });
}

template <class T>
Var<T> slice_cols(Var<T> a, std::int64_t c0, std::int64_t ncols) {
    Graph<T>& g = *a.g;
    const Tensor<T>& v = a.val();
    if (c0 < 0 || ncols <= 0 || c0 + ncols > v.cols()) fail("slice_cols: range out of bounds");
    Tensor<T> out({v.rows(), ncols});
    for (std::int64_t r = 0; r < v.rows(); ++r)
        for (std::int64_t c = 0; c < ncols; ++c) out.at(r, c) = v.at(r, c0 + c);
    const int pa = a.id;
    return g.push(std::move(out), g.needs_grad(pa), [pa, c0](Graph<T>& g, int self) {
        if (!g.needs_grad(pa)) return;
        const Tensor<T>& d = g.grad_of(self);
        Tensor<T>& ga = g.grad_buffer(pa);
        for (std::int64_t r = 0; r < d.rows(); ++r)
            for (std::int64_t c = 0; c < d.cols(); ++c) ga.at(r, c0 + c) += d.at(r, c);
    });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    if (parts.empty()) fail("concat_cols: empty input");
    Graph<T>& g = *parts.front().g;
    const std::int64_t R = parts.front().val().rows();
    std::int64_t C = 0;
    bool needs = false;
    for (const auto& p : parts) {
        if (p.val().rows() != R) fail("concat_cols: row counts differ");
        C += p.val().cols();
        needs = needs || g.needs_grad(p.id);
    }
    Tensor<T> out({R, C});
    std::vector<int> ids;
    std::vector<std::int64_t> offsets;
    std::int64_t c0 = 0;
    for (const auto& p : parts) {
        const Tensor<T>& v = p.val();
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t c = 0; c < v.cols(); ++c) out.at(r, c0 + c) = v.at(r, c);
        ids.push_back(p.id);
        offsets.push_back(c0);
        c0 += v.cols();
    }
    return g.push(std::move(out), needs, [ids, offsets](Graph<T>& g, int self) {
        const Tensor<T>& d = g.grad_of(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!g.needs_grad(ids[k])) continue;
            Tensor<T>& gp = g.grad_buffer(ids[k]);
            for (std::int64_t r = 0; r < gp.rows(); ++r)
                for (std::int64_t c = 0; c < gp.cols(); ++c) gp.at(r, c) += d.at(r, offsets[k] + c);
        }
    });
}

// out[i] = in[perm[i]]; perm must be a bijection (used by patch merge/split)
template <class T>
Var<T> permute_elements(Var<T> a, std::shared_ptr<const std::vector<std::int64_t>> perm,
                        Shape out_shape) {
    Graph<T>& g = *a.g;
    const Tensor<T>& v = a.val();
    if (static_cast<std::int64_t>(perm->size()) != v.numel())
        fail("permute_elements: permutation size mismatch");
    Tensor<T> out(std::move(out_shape));
    if (out.numel() != v.numel()) fail("permute_elements: element count mismatch");
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = v[(*perm)[static_cast<std::size_t>(i)]];
    const int pa = a.id;
    return g.push(std::move(out), g.needs_grad(pa), [pa, perm](Graph<T>& g, int self) {
        if (!g.needs_grad(pa)) return;
        const Tensor<T>& d = g.grad_of(self);
        Tensor<T>& ga = g.grad_buffer(pa);
        for (std::int64_t i = 0; i < d.numel(); ++i) ga[(*perm)[static_cast<std::size_t>(i)]] += d[i];
    });
}

// out row k = table row rows[k]; backward scatter-adds (embedding lookup)
template <class T>
Var<T> gather_rows(Var<T> table, std::shared_ptr<const std::vector<std::int64_t>> rows) {
    Graph<T>& g = *table.g;
    const Tensor<T>& v = table.val();
    Tensor<T> out({static_cast<std::int64_t>(rows->size()), v.cols()});
    for (std::size_t k = 0; k < rows->size(); ++k) {
        const std::int64_t r = (*rows)[k];
        if (r < 0 || r >= v.rows()) fail("gather_rows: row index out of range");
        std::memcpy(out.row_ptr(static_cast<std::int64_t>(k)), v.row_ptr(r),
                    sizeof(T) * static_cast<std::size_t>(v.cols()));
    }
    const int pt = table.id;
    return g.push(std::move(out), g.needs_grad(pt), [pt, rows](Graph<T>& g, int self) {
        if (!g.needs_grad(pt)) return;
        const Tensor<T>& d = g.grad_of(self);
        Tensor<T>& gt = g.grad_buffer(pt);
        for (std::size_t k = 0; k < rows->size(); ++k) {
            const std::int64_t r = (*rows)[k];
            for (std::int64_t c = 0; c < d.cols(); ++c)
                gt.at(r, c) += d.at(static_cast<std::int64_t>(k), c);
        }
    });
}

template <class T>
Var<T> gelu(Var<T> a) {
    Graph<T>& g = *a.g;
    const Tensor<T>& v = a.val();
    const T kC = T(0.7978845608028653558798921198687L);  // sqrt(2/pi)
    const T kA = T(0.044715L);
    Tensor<T> out(v.shape());
    for (std::int64_t i = 0; i < v.numel(); ++i) {
        const T x = v[i];
        out[i] = T(0.5) * x * (T(1) + std::tanh(kC * (x + kA * x * x * x)));
    }
    const int pa = a.id;
    return g.push(std::move(out), g.needs_grad(pa), [pa, kC, kA](Graph<T>& g, int self) {
        if (!g.needs_grad(pa)) return;
        const Tensor<T>& d = g.grad_of(self);
        const Tensor<T>& v = g.value(pa);
        Tensor<T>& ga = g.grad_buffer(pa);
        for (std::int64_t i = 0; i < d.numel(); ++i) {
            const T x = v[i];
            const T u = kC * (x + kA * x * x * x);
            const T t = std::tanh(u);
            const T du = kC * (T(1) + T(3) * kA * x * x);
            ga[i] += d[i] * (T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du);
        }
    });
}

template <class T>
Var<T> silu(Var<T> a) {
    Graph<T>& g = *a.g;
    const Tensor<T>& v = a.val();
    Tensor<T> out(v.shape());
    for (std::int64_t i = 0; i < v.numel(); ++i) {
        const T x = v[i];
        out[i] = x / (T(1) + std::exp(-x));
    }
    const int pa = a.id;
    return g.push(std::move(out), g.needs_grad(pa), [pa](Graph<T>& g, int self) {
        if (!g.needs_grad(pa)) return;
        const Tensor<T>& d = g.grad_of(self);
        const Tensor<T>& v = g.value(pa);
        Tensor<T>& ga = g.grad_buffer(pa);
        for (std::int64_t i = 0; i < d.numel(); ++i) {
            const T x = v[i];
            const T s = T(1) / (T(1) + std::exp(-x));
            ga[i] += d[i] * (s * (T(1) + x * (T(1) - s)));
        }
    });
}

template <class T>
Var<T> sin_op(Var<T> a) {
    Graph<T>& g = *a.g;
    const Tensor<T>& v = a.val();
    Tensor<T> out(v.shape());
    for (std::int64_t i = 0; i < v.numel(); ++i) out[i] = std::sin(v[i]);
    const int pa = a.id;
    return g.push(std::move(out), g.needs_grad(pa), [pa](Graph<T>& g, int self) {
        if (!g.needs_grad(pa)) return;
        const Tensor<T>& d = g.grad_of(self);
        const Tensor<T>& v = g.value(pa);
        Tensor<T>& ga = g.grad_buffer(pa);
        for (std::int64_t i = 0; i < d.numel(); ++i) ga[i] += d[i] * std::cos(v[i]);
    });
}

// row-wise softmax(x + mask); mask entries are 0 or -inf and rows that are
// fully masked are rejected
template <class T>
Var<T> masked_softmax_rows(Var<T> x, const Tensor<T>& mask) {
    Graph<T>& g = *x.g;
    const Tensor<T>& v = x.val();
    check_same_shape(v, mask, "masked_softmax_rows");
    Tensor<T> out(v.shape());
    const std::int64_t R = v.rows(), C = v.cols();
    for (std::int64_t r = 0; r < R; ++r) {
        T rowmax = -std::numeric_limits<T>::infinity();
        bool any_open = false;
        for (std::int64_t c = 0; c < C; ++c) {
            if (mask.at(r, c) == -std::numeric_limits<T>::infinity()) continue;
            any_open = true;
            rowmax = std::max(rowmax, v.at(r, c) + mask.at(r, c));
        }
        if (!any_open) fail("fully masked attention row");
        if (!std::isfinite(static_cast<double>(rowmax))) fail("attention scores non-finite");
        T denom = 0;
        for (std::int64_t c = 0; c < C; ++c) {
            if (mask.at(r, c) == -std::numeric_limits<T>::infinity()) {
                out.at(r, c) = T(0);
                continue;
            }
            const T e = std::exp(v.at(r, c) + mask.at(r, c) - rowmax);
            out.at(r, c) = e;
            denom += e;
        }
        for (std::int64_t c = 0; c < C; ++c) out.at(r, c) /= denom;
    }
    const int px = x.id;
    return g.push(std::move(out), g.needs_grad(px), [px](Graph<T>& g, int self) {
        if (!g.needs_grad(px)) return;
        const Tensor<T>& d = g.grad_of(self);
        const Tensor<T>& p = g.value(self);
        Tensor<T>& gx = g.grad_buffer(px);
        for (std::int64_t r = 0; r < d.rows(); ++r) {
            T dot = 0;
            for (std::int64_t c = 0; c < d.cols(); ++c) dot += d.at(r, c) * p.at(r, c);
            for (std::int64_t c = 0; c < d.cols(); ++c)
                gx.at(r, c) += p.at(r, c) * (d.at(r, c) - dot);
        }
    });
}

namespace detail {
template <class T>
void layer_norm_stats(const Tensor<T>& v, T eps, Tensor<T>& y, std::vector<T>& inv_std) {
    const std::int64_t R = v.rows(), C = v.cols();
    for (std::int64_t r = 0; r < R; ++r) {
        T m = 0;
        for (std::int64_t c = 0; c < C; ++c) m += v.at(r, c);
        m /= static_cast<T>(C);
        T var = 0;
        for (std::int64_t c = 0; c < C; ++c) {
            const T dvc = v.at(r, c) - m;
            var += dvc * dvc;
        }
        var /= static_cast<T>(C);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = is;
        for (std::int64_t c = 0; c < C; ++c) y.at(r, c) = (v.at(r, c) - m) * is;
    }
}

template <class T>
void layer_norm_input_grad(Graph<T>& g, int px, const Tensor<T>& dy, const Tensor<T>& y,
                           const std::vector<T>& inv_std) {
    Tensor<T>& gx = g.grad_buffer(px);
    const std::int64_t R = dy.rows(), C = dy.cols();
    for (std::int64_t r = 0; r < R; ++r) {
        T mean_dy = 0, mean_dyy = 0;
        for (std::int64_t c = 0; c < C; ++c) {
            mean_dy += dy.at(r, c);
            mean_dyy += dy.at(r, c) * y.at(r, c);
        }
        mean_dy /= static_cast<T>(C);
        mean_dyy /= static_cast<T>(C);
        const T is = inv_std[static_cast<std::size_t>(r)];
        for (std::int64_t c = 0; c < C; ++c)
            gx.at(r, c) += is * (dy.at(r, c) - mean_dy - y.at(r, c) * mean_dyy);
    }
}
}  // namespace detail

// per-row layer norm without learned affine (the adaLN path supplies shift
// and scale externally)
template <class T>
Var<T> layer_norm_plain(Var<T> x, T eps) {
    Graph<T>& g = *x.g;
    const Tensor<T>& v = x.val();
    Tensor<T> y(v.shape());
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(v.rows()));
    detail::layer_norm_stats(v, eps, y, *inv_std);
    const int px = x.id;
    return g.push(std::move(y), g.needs_grad(px), [px, inv_std](Graph<T>& g, int self) {
        if (!g.needs_grad(px)) return;
        detail::layer_norm_input_grad(g, px, g.grad_of(self), g.value(self), *inv_std);
    });
}

template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
    Var<T> y = layer_norm_plain(x, eps);
    return add_rowvec(mul_rowvec(y, gain), bias);
}

// mean over elements of (pred - target)^2 with a constant target
template <class T>
Var<T> mean_sq_diff(Var<T> pred, const Tensor<T>& target) {
    Graph<T>& g = *pred.g;
    const Tensor<T>& p = pred.val();
    check_same_shape(p, target, "mean_sq_diff");
    T acc = 0;
    for (std::int64_t i = 0; i < p.numel(); ++i) {
        const T e = p[i] - target[i];
        acc += e * e;
    }
    Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(p.numel()));
    const int pp = pred.id;
    auto tgt = std::make_shared<Tensor<T>>(target);
    return g.push(std::move(out), g.needs_grad(pp), [pp, tgt](Graph<T>& g, int self) {
        if (!g.needs_grad(pp)) return;
        const T d = g.grad_of(self)[0];
        const Tensor<T>& p = g.value(pp);
        Tensor<T>& gp = g.grad_buffer(pp);
        const T inv_n = T(1) / static_cast<T>(p.numel());
        for (std::int64_t i = 0; i < p.numel(); ++i)
            gp[i] += d * T(2) * (p[i] - (*tgt)[i]) * inv_n;
    });
}

template <class T>
Var<T> mean_all(Var<T> a) {
    Graph<T>& g = *a.g;
    const Tensor<T>& v = a.val();
    Tensor<T> out = Tensor<T>::scalar(transdiff::mean(v));
    const int pa = a.id;
    return g.push(std::move(out), g.needs_grad(pa), [pa](Graph<T>& g, int self) {
        if (!g.needs_grad(pa)) return;
        const T d = g.grad_of(self)[0];
        Tensor<T>& ga = g.grad_buffer(pa);
        const T inv_n = d / static_cast<T>(ga.numel());
        for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += inv_n;
    });
}

// average of scalar vars (positionwise loss reduction)
template <class T>
Var<T> mean_of(const std::vector<Var<T>>& scalars) {
    if (scalars.empty()) fail("mean_of: empty input");
    Graph<T>& g = *scalars.front().g;
    T acc = 0;
    bool needs = false;
    std::vector<int> ids;
    ids.reserve(scalars.size());
    for (const auto& s : scalars) {
        if (s.val().numel() != 1) fail("mean_of: inputs must be scalars");
        acc += s.val()[0];
        needs = needs || g.needs_grad(s.id);
        ids.push_back(s.id);
    }
    Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(scalars.size()));
    return g.push(std::move(out), needs, [ids](Graph<T>& g, int self) {
        const T share = g.grad_of(self)[0] / static_cast<T>(ids.size());
        for (int id : ids) {
            if (!g.needs_grad(id)) continue;
            g.grad_buffer(id)[0] += share;
        }
    });
}

}  // namespace ag
}  // namespace transdiff
