#include "dblend/tape.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dblend/kernels.hpp"
#include "dblend/rng.hpp"

namespace dblend {

const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::matmul: return "matmul";
        case Op::conv2d: return "conv2d";
        case Op::add: return "add";
        case Op::scale: return "scale";
        case Op::mul: return "mul";
        case Op::silu: return "silu";
        case Op::group_norm: return "group_norm";
        case Op::softmax: return "softmax";
        case Op::reshape: return "reshape";
        case Op::transpose: return "transpose";
        case Op::mean: return "mean";
        case Op::abs: return "abs";
        case Op::concat: return "concat";
        case Op::embedding: return "embedding";
        case Op::upsample2x: return "upsample2x";
        case Op::downsample2x: return "downsample2x";
    }
    return "?";
}

namespace {

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
void add_into(BasicTensor<T>& dst, const BasicTensor<T>& src) {
    T* d = dst.ptr();
    const T* s = src.ptr();
    for (std::size_t i = 0; i < dst.numel(); ++i) d[i] += s[i];
}

// Splits a shape around `axis` into (outer, axis, inner) extents.
struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.extent = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace

template <typename T>
NodeId Tape<T>::push(Node node) {
    evaluate(node);
    nodes_.push_back(std::move(node));
    const NodeId id = NodeId(nodes_.size() - 1);
    check(id);
    return id;
}

template <typename T>
void Tape<T>::check(NodeId id) const {
    const Node& n = nodes_[id];
    if (!n.value.all_finite())
        fail(ErrorCode::non_finite, std::string("non-finite value produced by ") + op_name(n.op) + " (node " +
                                        std::to_string(id) + (n.name.empty() ? "" : ", " + n.name) + ")");
}

template <typename T>
NodeId Tape<T>::leaf(tensor_type value, std::string name) {
    Node n;
    n.op = Op::leaf;
    n.value = std::move(value);
    n.name = std::move(name);
    nodes_.push_back(std::move(n));
    const NodeId id = NodeId(nodes_.size() - 1);
    check(id);
    return id;
}

template <typename T>
NodeId Tape<T>::matmul(NodeId a, NodeId b) {
    const Shape& sa = value(a).shape();
    const Shape& sb = value(b).shape();
    require(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0], ErrorCode::shape_mismatch,
            "matmul: " + shape_str(sa) + " x " + shape_str(sb));
    Node n;
    n.op = Op::matmul;
    n.inputs = {a, b};
    return push(std::move(n));
}

template <typename T>
NodeId Tape<T>::conv2d(NodeId x, NodeId weight, NodeId bias) {
    const Shape& sx = value(x).shape();
    const Shape& sw = value(weight).shape();
    require(sx.size() == 3 && sw.size() == 4 && sw[1] == sx[0] && sw[2] == sw[3] && sw[2] % 2 == 1,
            ErrorCode::shape_mismatch, "conv2d: input " + shape_str(sx) + " weight " + shape_str(sw));
    if (bias != no_node)
        require(value(bias).shape() == Shape{sw[0]}, ErrorCode::shape_mismatch,
                "conv2d: bias " + shape_str(value(bias).shape()));
    Node n;
    n.op = Op::conv2d;
    n.inputs = {x, weight};
    if (bias != no_node) n.inputs.push_back(bias);
    return push(std::move(n));
}

template <typename T>
NodeId Tape<T>::add(NodeId a, NodeId b) {
    const Shape& sa = value(a).shape();
    const Shape& sb = value(b).shape();
    require(sa == sb || sa.empty() || sb.empty(), ErrorCode::shape_mismatch,
            "add: " + shape_str(sa) + " + " + shape_str(sb));
    Node n;
    n.op = Op::add;
    n.inputs = {a, b};
    return push(std::move(n));
}

template <typename T>
NodeId Tape<T>::scale(NodeId a, T factor) {
    Node n;
    n.op = Op::scale;
    n.inputs = {a};
    n.scalar = factor;
    return push(std::move(n));
}

template <typename T>
NodeId Tape<T>::mul(NodeId a, NodeId b) {
    require(value(a).shape() == value(b).shape(), ErrorCode::shape_mismatch,
            "mul: " + shape_str(value(a).shape()) + " * " + shape_str(value(b).shape()));
    Node n;
    n.op = Op::mul;
    n.inputs = {a, b};
    return push(std::move(n));
}

template <typename T>
NodeId Tape<T>::silu(NodeId a) {
    Node n;
    n.op = Op::silu;
    n.inputs = {a};
    return push(std::move(n));
}

template <typename T>
NodeId Tape<T>::group_norm(NodeId x, NodeId gamma, NodeId beta, std::size_t groups, T eps) {
    const Shape& sx = value(x).shape();
    require(sx.size() >= 2 && groups > 0 && sx[0] % groups == 0, ErrorCode::shape_mismatch,
            "group_norm: input " + shape_str(sx) + " with " + std::to_string(groups) + " groups");
    require(value(gamma).shape() == Shape{sx[0]} && value(beta).shape() == Shape{sx[0]}, ErrorCode::shape_mismatch,
            "group_norm: affine parameters must have shape [C]");
    Node n;
    n.op = Op::group_norm;
    n.inputs = {x, gamma, beta};
    n.count = groups;
    n.scalar = eps;
    return push(std::move(n));
}

template <typename T>
NodeId Tape<T>::softmax(NodeId a) {
    require(value(a).rank() >= 1, ErrorCode::shape_mismatch, "softmax of a rank-0 tensor");
    Node n;
    n.op = Op::softmax;
    n.inputs = {a};
    return push(std::move(n));
}

template <typename T>
NodeId Tape<T>::reshape(NodeId a, Shape shape) {
    require(shape_numel(shape) == value(a).numel(), ErrorCode::shape_mismatch,
            "reshape " + shape_str(value(a).shape()) + " to " + shape_str(shape));
    Node n;
    n.op = Op::reshape;
    n.inputs = {a};
    n.shape_attr = std::move(shape);
    return push(std::move(n));
}

template <typename T>
NodeId Tape<T>::transpose(NodeId a) {
    require(value(a).rank() == 2, ErrorCode::shape_mismatch, "transpose needs rank 2, got " + shape_str(value(a).shape()));
    Node n;
    n.op = Op::transpose;
    n.inputs = {a};
    return push(std::move(n));
}

template <typename T>
NodeId Tape<T>::mean(NodeId a) {
    Node n;
    n.op = Op::mean;
    n.inputs = {a};
    return push(std::move(n));
}

template <typename T>
NodeId Tape<T>::abs(NodeId a) {
    Node n;
    n.op = Op::abs;
    n.inputs = {a};
    return push(std::move(n));
}

template <typename T>
NodeId Tape<T>::concat(std::span<const NodeId> parts, std::size_t axis) {
    require(!parts.empty(), ErrorCode::invalid_argument, "concat of nothing");
    const Shape& s0 = value(parts[0]).shape();
    require(axis < s0.size(), ErrorCode::shape_mismatch, "concat axis out of range for " + shape_str(s0));
    for (NodeId p : parts) {
        const Shape& s = value(p).shape();
        bool ok = s.size() == s0.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
        require(ok, ErrorCode::shape_mismatch, "concat: " + shape_str(s0) + " with " + shape_str(s));
    }
    Node n;
    n.op = Op::concat;
    n.inputs.assign(parts.begin(), parts.end());
    n.count = axis;
    return push(std::move(n));
}

template <typename T>
NodeId Tape<T>::embedding(NodeId table, std::vector<int> ids) {
    const Shape& st = value(table).shape();
    require(st.size() == 2, ErrorCode::shape_mismatch, "embedding table must be rank 2, got " + shape_str(st));
    for (int id : ids)
        require(id >= 0 && std::size_t(id) < st[0], ErrorCode::invalid_argument,
                "embedding id " + std::to_string(id) + " outside table of " + std::to_string(st[0]) + " rows");
    Node n;
    n.op = Op::embedding;
    n.inputs = {table};
    n.ids = std::move(ids);
    return push(std::move(n));
}

template <typename T>
NodeId Tape<T>::upsample2x(NodeId x) {
    require(value(x).rank() == 3, ErrorCode::shape_mismatch, "upsample2x needs [C,H,W]");
    Node n;
    n.op = Op::upsample2x;
    n.inputs = {x};
    return push(std::move(n));
}

template <typename T>
NodeId Tape<T>::downsample2x(NodeId x) {
    const Shape& s = value(x).shape();
    require(s.size() == 3 && s[1] % 2 == 0 && s[2] % 2 == 0, ErrorCode::shape_mismatch,
            "downsample2x needs [C,H,W] with even H,W, got " + shape_str(s));
    Node n;
    n.op = Op::downsample2x;
    n.inputs = {x};
    return push(std::move(n));
}

template <typename T>
void Tape<T>::set_name(NodeId id, std::string name) {
    nodes_.at(id).name = std::move(name);
}

template <typename T>
NodeId Tape<T>::find(const std::string& name) const {
    for (std::size_t i = 0; i < nodes_.size(); ++i)
        if (nodes_[i].name == name) return NodeId(i);
    fail(ErrorCode::invalid_argument, "no tape node named '" + name + "'");
}

template <typename T>
void Tape<T>::bind(NodeId leaf_id, tensor_type v) {
    Node& n = nodes_.at(leaf_id);
    require(n.op == Op::leaf, ErrorCode::invalid_argument, "bind() target is not a leaf");
    require(n.value.shape() == v.shape(), ErrorCode::shape_mismatch,
            "bind: leaf shape " + shape_str(n.value.shape()) + " vs " + shape_str(v.shape()));
    n.value = std::move(v);
    check(leaf_id);
}

template <typename T>
void Tape<T>::replay() {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].op == Op::leaf) continue;
        evaluate(nodes_[i]);
        check(NodeId(i));
    }
}

template <typename T>
void Tape<T>::evaluate(Node& n) const {
    auto in = [&](std::size_t i) -> const tensor_type& { return nodes_[n.inputs[i]].value; };
    switch (n.op) {
        case Op::leaf: return;
        case Op::matmul: {
            const tensor_type& a = in(0);
            const tensor_type& b = in(1);
            const std::size_t m = a.dim(0), k = a.dim(1), c = b.dim(1);
            n.value = tensor_type({m, c});
            kernels::gemm(m, c, k, a.ptr(), k, b.ptr(), c, n.value.ptr(), c);
            return;
        }
        case Op::conv2d: {
            const tensor_type& x = in(0);
            const tensor_type& w = in(1);
            const std::size_t ch = x.dim(0), h = x.dim(1), wd = x.dim(2), out = w.dim(0), ks = w.dim(2);
            const std::size_t hw = h * wd, patch = ch * ks * ks;
            n.value = tensor_type({out, h, wd});
            if (ks == 1) {
                kernels::gemm(out, hw, patch, w.ptr(), patch, x.ptr(), hw, n.value.ptr(), hw);
                n.saved.clear();
            } else {
                tensor_type cols({patch, hw});
                kernels::im2col(x.ptr(), ch, h, wd, ks, cols.ptr());
                kernels::gemm(out, hw, patch, w.ptr(), patch, cols.ptr(), hw, n.value.ptr(), hw);
                n.saved.assign(1, std::move(cols));
            }
            if (n.inputs.size() == 3) {
                const tensor_type& b = in(2);
                T* y = n.value.ptr();
                for (std::size_t o = 0; o < out; ++o)
                    for (std::size_t i = 0; i < hw; ++i) y[o * hw + i] += b[o];
            }
            return;
        }
        case Op::add: {
            const tensor_type& a = in(0);
            const tensor_type& b = in(1);
            if (a.shape() == b.shape()) {
                n.value = a;
                add_into(n.value, b);
            } else if (b.rank() == 0) {
                n.value = a;
                const T s = b[0];
                for (T& v : n.value.data()) v += s;
            } else {
                n.value = b;
                const T s = a[0];
                for (T& v : n.value.data()) v = s + v;
            }
            return;
        }
        case Op::scale: {
            n.value = in(0);
            for (T& v : n.value.data()) v *= n.scalar;
            return;
        }
        case Op::mul: {
            n.value = in(0);
            const tensor_type& b = in(1);
            for (std::size_t i = 0; i < n.value.numel(); ++i) n.value[i] *= b[i];
            return;
        }
        case Op::silu: {
            n.value = in(0);
            for (T& v : n.value.data()) v = v * sigmoid(v);
            return;
        }
        case Op::group_norm: {
            const tensor_type& x = in(0);
            const tensor_type& gamma = in(1);
            const tensor_type& beta = in(2);
            const std::size_t ch = x.dim(0), groups = n.count, per = ch / groups;
            const std::size_t spatial = x.numel() / ch, len = per * spatial;
            n.value = tensor_type(x.shape());
            tensor_type stats({groups, 2});
            for (std::size_t g = 0; g < groups; ++g) {
                const T* xs = x.ptr() + g * len;
                T sum = T(0);
                for (std::size_t i = 0; i < len; ++i) sum += xs[i];
                const T mu = sum / T(len);
                T sq = T(0);
                for (std::size_t i = 0; i < len; ++i) sq += (xs[i] - mu) * (xs[i] - mu);
                const T rstd = T(1) / std::sqrt(sq / T(len) + n.scalar);
                stats[2 * g] = mu;
                stats[2 * g + 1] = rstd;
                T* ys = n.value.ptr() + g * len;
                for (std::size_t c = 0; c < per; ++c) {
                    const std::size_t cc = g * per + c;
                    for (std::size_t i = 0; i < spatial; ++i) {
                        const std::size_t j = c * spatial + i;
                        ys[j] = (xs[j] - mu) * rstd * gamma[cc] + beta[cc];
                    }
                }
            }
            n.saved.assign(1, std::move(stats));
            return;
        }
        case Op::softmax: {
            n.value = in(0);
            const std::size_t cols = n.value.shape().back();
            const std::size_t rows = n.value.numel() / cols;
            for (std::size_t r = 0; r < rows; ++r) {
                T* row = n.value.ptr() + r * cols;
                T mx = row[0];
                for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
                T sum = T(0);
                for (std::size_t c = 0; c < cols; ++c) {
                    row[c] = std::exp(row[c] - mx);
                    sum += row[c];
                }
                const T inv = T(1) / sum;
                for (std::size_t c = 0; c < cols; ++c) row[c] *= inv;
            }
            return;
        }
        case Op::reshape: n.value = in(0).reshaped(n.shape_attr); return;
        case Op::transpose: {
            const tensor_type& a = in(0);
            n.value = tensor_type({a.dim(1), a.dim(0)});
            kernels::transpose(a.dim(0), a.dim(1), a.ptr(), n.value.ptr());
            return;
        }
        case Op::mean: {
            const tensor_type& a = in(0);
            T sum = T(0);
            for (T v : a.data()) sum += v;
            n.value = tensor_type::scalar(sum / T(a.numel()));
            return;
        }
        case Op::abs: {
            n.value = in(0);
            for (T& v : n.value.data()) v = std::abs(v);
            return;
        }
        case Op::concat: {
            const std::size_t axis = n.count;
            Shape out = in(0).shape();
            out[axis] = 0;
            for (std::size_t i = 0; i < n.inputs.size(); ++i) out[axis] += in(i).dim(axis);
            n.value = tensor_type(out);
            const AxisSplit so = split_axis(out, axis);
            std::size_t offset = 0;
            for (std::size_t i = 0; i < n.inputs.size(); ++i) {
                const tensor_type& p = in(i);
                const std::size_t block = p.dim(axis) * so.inner;
                for (std::size_t o = 0; o < so.outer; ++o)
                    std::copy_n(p.ptr() + o * block, block, n.value.ptr() + o * so.extent * so.inner + offset);
                offset += block;
            }
            return;
        }
        case Op::embedding: {
            const tensor_type& table = in(0);
            const std::size_t d = table.dim(1);
            n.value = tensor_type({n.ids.size(), d});
            for (std::size_t i = 0; i < n.ids.size(); ++i)
                std::copy_n(table.ptr() + std::size_t(n.ids[i]) * d, d, n.value.ptr() + i * d);
            return;
        }
        case Op::upsample2x: {
            const tensor_type& x = in(0);
            const std::size_t ch = x.dim(0), h = x.dim(1), w = x.dim(2);
            n.value = tensor_type({ch, 2 * h, 2 * w});
            for (std::size_t c = 0; c < ch; ++c)
                for (std::size_t y = 0; y < 2 * h; ++y)
                    for (std::size_t xx = 0; xx < 2 * w; ++xx)
                        n.value[(c * 2 * h + y) * 2 * w + xx] = x[(c * h + y / 2) * w + xx / 2];
            return;
        }
        case Op::downsample2x: {
            const tensor_type& x = in(0);
            const std::size_t ch = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2;
            n.value = tensor_type({ch, h, w});
            for (std::size_t c = 0; c < ch; ++c)
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t xx = 0; xx < w; ++xx)
                        n.value[(c * h + y) * w + xx] = x[(c * 2 * h + 2 * y) * 2 * w + 2 * xx];
            return;
        }
    }
}

template <typename T>
void Tape<T>::backward_node(const Node& n, const tensor_type& g, std::vector<tensor_type>& grads,
                            std::vector<bool>& have, const std::vector<bool>& live) const {
    auto in = [&](std::size_t i) -> const tensor_type& { return nodes_[n.inputs[i]].value; };
    auto wants = [&](std::size_t i) { return live[n.inputs[i]]; };
    auto emit = [&](std::size_t i, tensor_type contrib) {
        if (n.op == corrupt_op_ && corrupt_factor_ != T(1))
            for (T& v : contrib.data()) v *= corrupt_factor_;
        const NodeId id = n.inputs[i];
        if (!have[id]) {
            grads[id] = std::move(contrib);
            have[id] = true;
        } else {
            add_into(grads[id], contrib);
        }
    };

    switch (n.op) {
        case Op::leaf: return;
        case Op::matmul: {
            const tensor_type& a = in(0);
            const tensor_type& b = in(1);
            const std::size_t m = a.dim(0), k = a.dim(1), c = b.dim(1);
            if (wants(0)) {
                tensor_type bt({c, k});
                kernels::transpose(k, c, b.ptr(), bt.ptr());
                tensor_type ga({m, k});
                kernels::gemm(m, k, c, g.ptr(), c, bt.ptr(), k, ga.ptr(), k);
                emit(0, std::move(ga));
            }
            if (wants(1)) {
                tensor_type at({k, m});
                kernels::transpose(m, k, a.ptr(), at.ptr());
                tensor_type gb({k, c});
                kernels::gemm(k, c, m, at.ptr(), m, g.ptr(), c, gb.ptr(), c);
                emit(1, std::move(gb));
            }
            return;
        }
        case Op::conv2d: {
            const tensor_type& x = in(0);
            const tensor_type& w = in(1);
            const std::size_t ch = x.dim(0), h = x.dim(1), wd = x.dim(2), out = w.dim(0), ks = w.dim(2);
            const std::size_t hw = h * wd, patch = ch * ks * ks;
            const T* cols = ks == 1 ? x.ptr() : n.saved[0].ptr();
            if (wants(1)) {
                tensor_type colst({hw, patch});
                kernels::transpose(patch, hw, cols, colst.ptr());
                tensor_type gw(w.shape());
                kernels::gemm(out, patch, hw, g.ptr(), hw, colst.ptr(), patch, gw.ptr(), patch);
                emit(1, std::move(gw));
            }
            if (n.inputs.size() == 3 && wants(2)) {
                tensor_type gb({out});
                for (std::size_t o = 0; o < out; ++o) {
                    T s = T(0);
                    for (std::size_t i = 0; i < hw; ++i) s += g[o * hw + i];
                    gb[o] = s;
                }
                emit(2, std::move(gb));
            }
            if (wants(0)) {
                tensor_type wt({patch, out});
                kernels::transpose(out, patch, w.ptr(), wt.ptr());
                tensor_type gx(x.shape());
                if (ks == 1) {
                    kernels::gemm(patch, hw, out, wt.ptr(), out, g.ptr(), hw, gx.ptr(), hw);
                } else {
                    tensor_type gcols({patch, hw});
                    kernels::gemm(patch, hw, out, wt.ptr(), out, g.ptr(), hw, gcols.ptr(), hw);
                    kernels::col2im(gcols.ptr(), ch, h, wd, ks, gx.ptr());
                }
                emit(0, std::move(gx));
            }
            return;
        }
        case Op::add: {
            for (std::size_t i = 0; i < 2; ++i) {
                if (!wants(i)) continue;
                if (in(i).shape() == g.shape()) {
                    emit(i, g);
                } else {
                    T s = T(0);
                    for (T v : g.data()) s += v;
                    emit(i, tensor_type::scalar(s));
                }
            }
            return;
        }
        case Op::scale: {
            if (!wants(0)) return;
            tensor_type r = g;
            for (T& v : r.data()) v *= n.scalar;
            emit(0, std::move(r));
            return;
        }
        case Op::mul: {
            for (std::size_t i = 0; i < 2; ++i) {
                if (!wants(i)) continue;
                tensor_type r = g;
                const tensor_type& other = in(1 - i);
                for (std::size_t j = 0; j < r.numel(); ++j) r[j] *= other[j];
                emit(i, std::move(r));
            }
            return;
        }
        case Op::silu: {
            if (!wants(0)) return;
            const tensor_type& x = in(0);
            tensor_type r = g;
            for (std::size_t j = 0; j < r.numel(); ++j) {
                const T s = sigmoid(x[j]);
                r[j] *= s * (T(1) + x[j] * (T(1) - s));
            }
            emit(0, std::move(r));
            return;
        }
        case Op::group_norm: {
            const tensor_type& x = in(0);
            const tensor_type& gamma = in(1);
            const tensor_type& stats = n.saved[0];
            const std::size_t ch = x.dim(0), groups = n.count, per = ch / groups;
            const std::size_t spatial = x.numel() / ch, len = per * spatial;
            tensor_type gx(x.shape()), ggamma({ch}), gbeta({ch});
            for (std::size_t gi = 0; gi < groups; ++gi) {
                const T mu = stats[2 * gi], rstd = stats[2 * gi + 1];
                const T* xs = x.ptr() + gi * len;
                const T* gs = g.ptr() + gi * len;
                T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
                for (std::size_t c = 0; c < per; ++c) {
                    const std::size_t cc = gi * per + c;
                    T sg = T(0), sgx = T(0);
                    for (std::size_t i = 0; i < spatial; ++i) {
                        const std::size_t j = c * spatial + i;
                        const T xhat = (xs[j] - mu) * rstd;
                        sg += gs[j];
                        sgx += gs[j] * xhat;
                        const T dxhat = gs[j] * gamma[cc];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    ggamma[cc] = sgx;
                    gbeta[cc] = sg;
                }
                const T mean_dxhat = sum_dxhat / T(len), mean_dxhat_xhat = sum_dxhat_xhat / T(len);
                T* dx = gx.ptr() + gi * len;
                for (std::size_t c = 0; c < per; ++c) {
                    const std::size_t cc = gi * per + c;
                    for (std::size_t i = 0; i < spatial; ++i) {
                        const std::size_t j = c * spatial + i;
                        const T xhat = (xs[j] - mu) * rstd;
                        dx[j] = rstd * (gs[j] * gamma[cc] - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
            }
            if (wants(0)) emit(0, std::move(gx));
            if (wants(1)) emit(1, std::move(ggamma));
            if (wants(2)) emit(2, std::move(gbeta));
            return;
        }
        case Op::softmax: {
            if (!wants(0)) return;
            const tensor_type& y = n.value;
            const std::size_t cols = y.shape().back(), rows = y.numel() / cols;
            tensor_type r(y.shape());
            for (std::size_t row = 0; row < rows; ++row) {
                const T* yr = y.ptr() + row * cols;
                const T* gr = g.ptr() + row * cols;
                T dot = T(0);
                for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
                for (std::size_t c = 0; c < cols; ++c) r[row * cols + c] = yr[c] * (gr[c] - dot);
            }
            emit(0, std::move(r));
            return;
        }
        case Op::reshape: {
            if (wants(0)) emit(0, g.reshaped(in(0).shape()));
            return;
        }
        case Op::transpose: {
            if (!wants(0)) return;
            const tensor_type& a = in(0);
            tensor_type r(a.shape());
            kernels::transpose(a.dim(1), a.dim(0), g.ptr(), r.ptr());
            emit(0, std::move(r));
            return;
        }
        case Op::mean: {
            if (!wants(0)) return;
            const tensor_type& a = in(0);
            emit(0, tensor_type(a.shape(), g[0] / T(a.numel())));
            return;
        }
        case Op::abs: {
            if (!wants(0)) return;
            const tensor_type& x = in(0);
            tensor_type r = g;
            for (std::size_t j = 0; j < r.numel(); ++j) {
                // sign(0) = 0
                const T s = x[j] > T(0) ? T(1) : (x[j] < T(0) ? T(-1) : T(0));
                r[j] *= s;
            }
            emit(0, std::move(r));
            return;
        }
        case Op::concat: {
            const std::size_t axis = n.count;
            const AxisSplit so = split_axis(g.shape(), axis);
            std::size_t offset = 0;
            for (std::size_t i = 0; i < n.inputs.size(); ++i) {
                const tensor_type& p = in(i);
                const std::size_t block = p.dim(axis) * so.inner;
                if (wants(i)) {
                    tensor_type r(p.shape());
                    for (std::size_t o = 0; o < so.outer; ++o)
                        std::copy_n(g.ptr() + o * so.extent * so.inner + offset, block, r.ptr() + o * block);
                    emit(i, std::move(r));
                }
                offset += block;
            }
            return;
        }
        case Op::embedding: {
            if (!wants(0)) return;
            const tensor_type& table = in(0);
            const std::size_t d = table.dim(1);
            tensor_type r(table.shape());
            for (std::size_t i = 0; i < n.ids.size(); ++i) {
                T* dst = r.ptr() + std::size_t(n.ids[i]) * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
            }
            emit(0, std::move(r));
            return;
        }
        case Op::upsample2x: {
            if (!wants(0)) return;
            const tensor_type& x = in(0);
            const std::size_t ch = x.dim(0), h = x.dim(1), w = x.dim(2);
            tensor_type r(x.shape());
            for (std::size_t c = 0; c < ch; ++c)
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t xx = 0; xx < w; ++xx) {
                        const std::size_t base = (c * 2 * h + 2 * y) * 2 * w + 2 * xx;
                        r[(c * h + y) * w + xx] = g[base] + g[base + 1] + g[base + 2 * w] + g[base + 2 * w + 1];
                    }
            emit(0, std::move(r));
            return;
        }
        case Op::downsample2x: {
            if (!wants(0)) return;
            const tensor_type& x = in(0);
            const std::size_t ch = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2;
            tensor_type r(x.shape());
            for (std::size_t c = 0; c < ch; ++c)
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t xx = 0; xx < w; ++xx)
                        r[(c * 2 * h + 2 * y) * 2 * w + 2 * xx] = g[(c * h + y) * w + xx];
            emit(0, std::move(r));
            return;
        }
    }
}

template <typename T>
std::vector<BasicTensor<T>> Tape<T>::backward(NodeId output, std::span<const NodeId> wrt) const {
    require(output < nodes_.size(), ErrorCode::invalid_argument, "backward: output node does not exist");
    require(nodes_[output].value.rank() == 0, ErrorCode::shape_mismatch,
            "backward: output must be rank 0, got " + shape_str(nodes_[output].value.shape()));
    for (NodeId w : wrt) require(w < nodes_.size(), ErrorCode::invalid_argument, "backward: wrt node does not exist");

    // A node is live when it lies downstream of some wrt node.
    std::vector<bool> live(nodes_.size(), false);
    for (NodeId w : wrt) live[w] = true;
    for (std::size_t i = 0; i <= output; ++i) {
        if (live[i]) continue;
        for (NodeId p : nodes_[i].inputs)
            if (live[p]) {
                live[i] = true;
                break;
            }
    }

    std::vector<tensor_type> grads(output + 1);
    std::vector<bool> have(output + 1, false);
    if (live[output]) {
        grads[output] = tensor_type::scalar(T(1));
        have[output] = true;
    }
    for (std::size_t i = output + 1; i-- > 0;) {
        if (!have[i] || nodes_[i].op == Op::leaf) continue;
        backward_node(nodes_[i], grads[i], grads, have, live);
        // Interior gradients are no longer needed once propagated.
        if (std::find(wrt.begin(), wrt.end(), NodeId(i)) == wrt.end()) grads[i] = tensor_type();
    }

    std::vector<tensor_type> result;
    result.reserve(wrt.size());
    for (NodeId w : wrt) {
        if (w <= output && have[w]) {
            if (!grads[w].all_finite())
                fail(ErrorCode::non_finite, "backward: non-finite gradient for node " + std::to_string(w) +
                                                (nodes_[w].name.empty() ? "" : " (" + nodes_[w].name + ")"));
            result.push_back(grads[w]);
        } else {
            result.emplace_back(nodes_[w].value.shape());
        }
    }
    return result;
}

template class Tape<float>;
template class Tape<double>;

template <typename T>
std::map<std::string, BasicTensor<T>> forward_eval(Tape<T>& tape,
                                                   const std::map<std::string, BasicTensor<T>>& leaf_values) {
    for (const auto& [name, v] : leaf_values) tape.bind(name, v);
    tape.replay();
    std::map<std::string, BasicTensor<T>> out;
    for (std::size_t i = 0; i < tape.size(); ++i) {
        const std::string& nm = tape.name(NodeId(i));
        if (!nm.empty()) out[nm] = tape.value(NodeId(i));
    }
    return out;
}

template std::map<std::string, Tensor> forward_eval(Tape<float>&, const std::map<std::string, Tensor>&);
template std::map<std::string, TensorD> forward_eval(Tape<double>&, const std::map<std::string, TensorD>&);

GradCheckReport grad_check(Tape<double>& tape, NodeId output, NodeId wrt, double tolerance, std::size_t max_coords,
                           std::uint64_t seed) {
    require(tape.op(wrt) == Op::leaf, ErrorCode::invalid_argument, "grad_check: wrt must be a leaf");
    constexpr double h = 1e-5;
    const NodeId wrt_ids[] = {wrt};
    const TensorD analytic = tape.backward(output, wrt_ids)[0];
    const TensorD base = tape.value(wrt);
    const std::size_t n = base.numel();

    std::vector<std::size_t> coords;
    if (max_coords == 0 || n <= max_coords) {
        coords.resize(n);
        for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
        CounterRng rng(seed);
        std::vector<std::size_t> all(n);
        for (std::size_t i = 0; i < n; ++i) all[i] = i;
        // Partial Fisher-Yates
        for (std::size_t i = 0; i < max_coords; ++i) {
            const std::size_t j = i + std::size_t(rng.next_u64() % (n - i));
            std::swap(all[i], all[j]);
        }
        coords.assign(all.begin(), all.begin() + long(max_coords));
        std::sort(coords.begin(), coords.end());
    }

    std::vector<double> numeric(coords.size());
    TensorD probe = base;
    for (std::size_t c = 0; c < coords.size(); ++c) {
        const std::size_t i = coords[c];
        probe[i] = base[i] + h;
        tape.bind(wrt, probe);
        tape.replay();
        const double fp = tape.value(output).item();
        probe[i] = base[i] - h;
        tape.bind(wrt, probe);
        tape.replay();
        const double fm = tape.value(output).item();
        probe[i] = base[i];
        numeric[c] = (fp - fm) / (2 * h);
    }
    tape.bind(wrt, base);
    tape.replay();

    double scale = 0.0;
    for (double v : numeric) scale = std::max(scale, std::abs(v));
    const double floor = std::max(1e-8 * scale, 1e-300);

    GradCheckReport rep;
    rep.coords_checked = coords.size();
    for (std::size_t c = 0; c < coords.size(); ++c) {
        const double a = analytic[coords[c]], nm = numeric[c];
        const double rel = std::abs(a - nm) / std::max({std::abs(a), std::abs(nm), floor});
        if (c == 0 || rel > rep.max_rel_error) {
            rep.max_rel_error = rel;
            rep.worst_index = coords[c];
            rep.worst_analytic = a;
            rep.worst_numeric = nm;
        }
    }
    rep.passed = rep.max_rel_error <= tolerance;
    return rep;
}

std::string describe(const GradCheckReport& r) {
    std::ostringstream os;
    os << (r.passed ? "PASS" : "FAIL") << " max_rel_err=" << r.max_rel_error << " coords=" << r.coords_checked
       << " worst_index=" << r.worst_index << " analytic=" << r.worst_analytic << " numeric=" << r.worst_numeric;
    return os.str();
}

}  // namespace dblend
