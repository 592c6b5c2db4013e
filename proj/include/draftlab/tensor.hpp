#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace draftlab {

// Raised when an op produces NaN/Inf or a gradient check blows up.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
    return r + "]";
}

// Live tape-buffer accounting, in scalar elements. Used by the checkpointing
// tests to verify that peak activation memory does not grow with chain length.
struct AllocStats {
    int64_t current = 0;
    int64_t peak = 0;

    void add(int64_t n) {
        current += n;
        peak = std::max(peak, current);
    }
    void sub(int64_t n) { current -= n; }
    void reset_peak() { peak = current; }

    static AllocStats& global() {
        static AllocStats s;
        return s;
    }
};

enum class OpKind : uint8_t {
    Leaf,
    StopGrad,
    Add,
    Sub,
    Mul,
    Div,
    Axpby,         // a*x + b*y, scalars a, b
    ScalarAffine,  // a*x + b
    Matmul,
    Conv3x3,
    AddRowBias,
    Silu,
    SoftmaxRows,
    LogSoftmaxRows,
    Reshape,
    SumAll,
    MeanAll,
    Pick,
    EmbedRow,
    BlockDct8,
    BlockIdct8,
    BlockScale8,  // per 8x8 block elementwise multiply by a fixed table
    Rot90,
    Clamp01,
    RoundSte,
    Checkpoint,
};

template <class T>
class Tape;

template <class T>
struct Tensor {
    Tape<T>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Shape& shape() const;
    const std::vector<T>& value() const;
    const std::vector<T>& grad() const;
    int64_t size() const { return numel(shape()); }
    T item() const;
};

template <class T>
struct CheckpointRec {
    using Fn = std::function<std::vector<Tensor<T>>(Tape<T>&, const std::vector<Tensor<T>>&)>;
    Fn fn;
    std::vector<int> inputs;
    std::vector<int> outputs;
    bool verify_replay = false;
    bool done = false;  // backward handles the whole record once
};

template <class T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    ~Tape() {
        for (auto& n : nodes_) {
            if (n.owns_value) AllocStats::global().sub(static_cast<int64_t>(n.value.size()));
            AllocStats::global().sub(static_cast<int64_t>(n.grad.size()));
        }
    }

    // ----- leaves ------------------------------------------------------

    Tensor<T> leaf(const Shape& shape, std::vector<T> data, bool requires_grad) {
        if (static_cast<int64_t>(data.size()) != numel(shape))
            throw std::invalid_argument("leaf: data size does not match shape " + shape_str(shape));
        int id = new_node(OpKind::Leaf, shape, requires_grad);
        nodes_[id].value = std::move(data);
        AllocStats::global().add(static_cast<int64_t>(nodes_[id].value.size()));
        check_finite(id, "leaf");
        return {this, id};
    }

    Tensor<T> zeros(const Shape& shape, bool requires_grad = false) {
        return leaf(shape, std::vector<T>(numel(shape), T(0)), requires_grad);
    }

    Tensor<T> scalar(T v) { return leaf({1}, {v}, false); }

    // Leaf whose storage stays outside the tape (frozen weights). The pointee
    // must outlive the tape and stay unmodified until backward completes.
    Tensor<T> leaf_ref(const Shape& shape, const std::vector<T>* data, bool requires_grad) {
        if (static_cast<int64_t>(data->size()) != numel(shape))
            throw std::invalid_argument("leaf_ref: data size does not match shape");
        int id = new_node(OpKind::Leaf, shape, requires_grad);
        nodes_[id].ext = data;
        nodes_[id].owns_value = false;
        return {this, id};
    }

    // ----- elementwise -------------------------------------------------

    Tensor<T> add(Tensor<T> x, Tensor<T> y) { return binary(OpKind::Add, x, y); }
    Tensor<T> sub(Tensor<T> x, Tensor<T> y) { return binary(OpKind::Sub, x, y); }
    Tensor<T> mul(Tensor<T> x, Tensor<T> y) { return binary(OpKind::Mul, x, y); }
    Tensor<T> div(Tensor<T> x, Tensor<T> y) { return binary(OpKind::Div, x, y); }

    Tensor<T> axpby(T a, Tensor<T> x, T b, Tensor<T> y) {
        Tensor<T> out = binary(OpKind::Axpby, x, y);
        nodes_[out.id].a = a;
        nodes_[out.id].b = b;
        auto& v = nodes_[out.id].value;
        const auto& xv = val(x.id);
        const auto& yv = val(y.id);
        for (size_t i = 0; i < v.size(); ++i) v[i] = a * xv[i] + b * yv[i];
        check_finite(out.id, "axpby");
        return out;
    }

    Tensor<T> scalar_affine(Tensor<T> x, T a, T b) {
        int id = new_node(OpKind::ScalarAffine, shape_of(x.id), req(x.id), x.id);
        nodes_[id].a = a;
        nodes_[id].b = b;
        alloc_value(id);
        const auto& xv = val(x.id);
        auto& v = nodes_[id].value;
        for (size_t i = 0; i < v.size(); ++i) v[i] = a * xv[i] + b;
        check_finite(id, "scalar_affine");
        return {this, id};
    }

    Tensor<T> neg(Tensor<T> x) { return scalar_affine(x, T(-1), T(0)); }

    Tensor<T> stop_grad(Tensor<T> x) {
        int id = new_node(OpKind::StopGrad, shape_of(x.id), false, x.id);
        alloc_value(id);
        nodes_[id].value = val(x.id);
        return {this, id};
    }

    Tensor<T> silu(Tensor<T> x) {
        int id = new_node(OpKind::Silu, shape_of(x.id), req(x.id), x.id);
        alloc_value(id);
        const auto& xv = val(x.id);
        auto& v = nodes_[id].value;
        for (size_t i = 0; i < v.size(); ++i) v[i] = xv[i] * sigmoid(xv[i]);
        check_finite(id, "silu");
        return {this, id};
    }

    Tensor<T> clamp01(Tensor<T> x) {
        int id = new_node(OpKind::Clamp01, shape_of(x.id), req(x.id), x.id);
        alloc_value(id);
        const auto& xv = val(x.id);
        auto& v = nodes_[id].value;
        for (size_t i = 0; i < v.size(); ++i) v[i] = std::min(T(1), std::max(T(0), xv[i]));
        return {this, id};
    }

    // Forward: round to nearest. Backward: identity (straight-through).
    Tensor<T> round_ste(Tensor<T> x) {
        int id = new_node(OpKind::RoundSte, shape_of(x.id), req(x.id), x.id);
        alloc_value(id);
        const auto& xv = val(x.id);
        auto& v = nodes_[id].value;
        for (size_t i = 0; i < v.size(); ++i) v[i] = std::nearbyint(xv[i]);
        return {this, id};
    }

    // ----- linear algebra ----------------------------------------------

    Tensor<T> matmul(Tensor<T> a, Tensor<T> b) {
        const Shape& sa = shape_of(a.id);
        const Shape& sb = shape_of(b.id);
        if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
            throw std::invalid_argument("matmul: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
        int M = sa[0], K = sa[1], N = sb[1];
        int id = new_node(OpKind::Matmul, {M, N}, req(a.id) || req(b.id), a.id, b.id);
        nodes_[id].i0 = M;
        nodes_[id].i1 = K;
        nodes_[id].i2 = N;
        alloc_value(id);
        gemm(val(a.id).data(), val(b.id).data(), nodes_[id].value.data(), M, K, N);
        check_finite(id, "matmul");
        return {this, id};
    }

    // x: [Cin, H, W], w: [Cout, Cin*9] flattened 3x3 kernels; stride 1, same padding.
    Tensor<T> conv3x3(Tensor<T> x, Tensor<T> w) {
        const Shape& sx = shape_of(x.id);
        const Shape& sw = shape_of(w.id);
        if (sx.size() != 3 || sw.size() != 2 || sw[1] != sx[0] * 9)
            throw std::invalid_argument("conv3x3: incompatible shapes " + shape_str(sx) + ", " + shape_str(sw));
        int Cin = sx[0], H = sx[1], W = sx[2], Cout = sw[0];
        int id = new_node(OpKind::Conv3x3, {Cout, H, W}, req(x.id) || req(w.id), x.id, w.id);
        nodes_[id].i0 = Cin;
        nodes_[id].i1 = H;
        nodes_[id].i2 = W;
        alloc_value(id);
        auto& col = conv_scratch();
        col.resize(static_cast<size_t>(Cin) * 9 * H * W);
        im2col(val(x.id).data(), Cin, H, W, col.data());
        gemm(val(w.id).data(), col.data(), nodes_[id].value.data(), Cout, Cin * 9, H * W);
        check_finite(id, "conv3x3");
        return {this, id};
    }

    // x: [R, ...] treated as R rows; bias has R elements, added to each row.
    Tensor<T> add_row_bias(Tensor<T> x, Tensor<T> bias) {
        const Shape sx = shape_of(x.id);  // copy: new_node may reallocate nodes_
        int R = sx[0];
        if (numel(shape_of(bias.id)) != R)
            throw std::invalid_argument("add_row_bias: bias size must equal leading dim");
        int id = new_node(OpKind::AddRowBias, sx, req(x.id) || req(bias.id), x.id, bias.id);
        alloc_value(id);
        int64_t cols = numel(sx) / R;
        const auto& xv = val(x.id);
        const auto& bv = val(bias.id);
        auto& v = nodes_[id].value;
        for (int r = 0; r < R; ++r)
            for (int64_t c = 0; c < cols; ++c) v[r * cols + c] = xv[r * cols + c] + bv[r];
        check_finite(id, "add_row_bias");
        return {this, id};
    }

    Tensor<T> reshape(Tensor<T> x, const Shape& shape) {
        if (numel(shape) != numel(shape_of(x.id)))
            throw std::invalid_argument("reshape: element count mismatch");
        int id = new_node(OpKind::Reshape, shape, req(x.id), x.id);
        alloc_value(id);
        nodes_[id].value = val(x.id);
        return {this, id};
    }

    // ----- reductions & indexing ---------------------------------------

    Tensor<T> sum_all(Tensor<T> x) { return reduce(OpKind::SumAll, x); }
    Tensor<T> mean_all(Tensor<T> x) { return reduce(OpKind::MeanAll, x); }

    Tensor<T> pick(Tensor<T> x, int index) {
        if (index < 0 || index >= numel(shape_of(x.id)))
            throw std::invalid_argument("pick: index out of range");
        int id = new_node(OpKind::Pick, {1}, req(x.id), x.id);
        nodes_[id].i0 = index;
        alloc_value(id);
        nodes_[id].value[0] = val(x.id)[index];
        return {this, id};
    }

    // table: [R, D]; returns row `row` as a [D] tensor.
    Tensor<T> embed_row(Tensor<T> table, int row) {
        const Shape st = shape_of(table.id);  // copy: new_node may reallocate nodes_
        if (st.size() != 2 || row < 0 || row >= st[0])
            throw std::invalid_argument("embed_row: bad table shape or row");
        int id = new_node(OpKind::EmbedRow, {st[1]}, req(table.id), table.id);
        nodes_[id].i0 = row;
        alloc_value(id);
        const auto& tv = val(table.id);
        std::copy(tv.begin() + static_cast<size_t>(row) * st[1], tv.begin() + static_cast<size_t>(row + 1) * st[1],
                  nodes_[id].value.begin());
        return {this, id};
    }

    // ----- softmax -------------------------------------------------------

    Tensor<T> softmax_rows(Tensor<T> x) { return softmax_impl(x, false); }
    Tensor<T> log_softmax_rows(Tensor<T> x) { return softmax_impl(x, true); }

    // ----- 8x8 block transforms (JPEG codec) -----------------------------

    // x: [C, H, W] with H, W multiples of 8. Applies D * B * D^T per block.
    Tensor<T> block_dct8(Tensor<T> x) { return block_transform(x, OpKind::BlockDct8); }
    Tensor<T> block_idct8(Tensor<T> x) { return block_transform(x, OpKind::BlockIdct8); }

    // Elementwise multiply of every 8x8 block by `table`: either 64 entries
    // (shared across channels) or 64*C entries (one table per channel).
    Tensor<T> block_scale8(Tensor<T> x, const std::vector<T>& table) {
        const Shape sx = shape_of(x.id);  // copy: new_node may reallocate nodes_
        check_blocks(sx);
        if (table.size() != 64 && table.size() != static_cast<size_t>(sx[0]) * 64)
            throw std::invalid_argument("block_scale8: table must have 64 or 64*C entries");
        int id = new_node(OpKind::BlockScale8, sx, req(x.id), x.id);
        nodes_[id].table = std::make_shared<std::vector<T>>(table);
        alloc_value(id);
        apply_block_scale(val(x.id), nodes_[id].value, sx, table);
        check_finite(id, "block_scale8");
        return {this, id};
    }

    // x: [C, H, W] with H == W; rotates each channel by k*90 degrees CCW.
    Tensor<T> rot90(Tensor<T> x, int k) {
        const Shape sx = shape_of(x.id);  // copy: new_node may reallocate nodes_
        if (sx.size() != 3 || sx[1] != sx[2]) throw std::invalid_argument("rot90: need square [C,H,H] input");
        k = ((k % 4) + 4) % 4;
        int id = new_node(OpKind::Rot90, sx, req(x.id), x.id);
        nodes_[id].i0 = k;
        alloc_value(id);
        rotate_into(val(x.id), nodes_[id].value, sx[0], sx[1], k);
        return {this, id};
    }

    // ----- checkpointing -------------------------------------------------

    // Runs `fn` on a scratch tape, keeping only its inputs and outputs on this
    // tape. Backward replays `fn` from the saved inputs. `fn` must be
    // deterministic given its inputs; with verify_replay, a forward/replay
    // value mismatch raises NumericalError.
    std::vector<Tensor<T>> checkpoint_segment(typename CheckpointRec<T>::Fn fn,
                                              const std::vector<Tensor<T>>& inputs,
                                              bool verify_replay = false) {
        auto rec = std::make_shared<CheckpointRec<T>>();
        rec->fn = fn;
        rec->verify_replay = verify_replay;
        bool any_grad = false;
        for (const auto& in : inputs) {
            if (in.tape != this) throw std::invalid_argument("checkpoint_segment: input not on this tape");
            rec->inputs.push_back(in.id);
            any_grad = any_grad || req(in.id);
        }

        std::vector<std::vector<T>> out_vals;
        std::vector<Shape> out_shapes;
        {
            Tape<T> scratch;
            std::vector<Tensor<T>> sub_inputs;
            sub_inputs.reserve(inputs.size());
            for (const auto& in : inputs) sub_inputs.push_back(scratch.leaf(shape_of(in.id), val(in.id), false));
            std::vector<Tensor<T>> sub_out = fn(scratch, sub_inputs);
            for (const auto& o : sub_out) {
                out_vals.push_back(o.value());
                out_shapes.push_back(o.shape());
            }
        }

        std::vector<Tensor<T>> outputs;
        for (size_t i = 0; i < out_vals.size(); ++i) {
            int id = new_node(OpKind::Checkpoint, out_shapes[i], any_grad);
            nodes_[id].value = std::move(out_vals[i]);
            AllocStats::global().add(static_cast<int64_t>(nodes_[id].value.size()));
            nodes_[id].ckpt = rec;
            rec->outputs.push_back(id);
            check_finite(id, "checkpoint");
            outputs.push_back({this, id});
        }
        return outputs;
    }

    // ----- backward ------------------------------------------------------

    void backward(Tensor<T> loss) {
        if (loss.tape != this) throw std::invalid_argument("backward: loss not on this tape");
        if (numel(shape_of(loss.id)) != 1) throw std::invalid_argument("backward: loss must be a scalar");
        if (consumed_) throw std::logic_error("backward: tape already consumed");
        consumed_ = true;

        alloc_grad(loss.id);
        nodes_[loss.id].grad[0] = T(1);

        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[id];
            if (n.grad.empty() || !n.requires_grad) continue;
            backward_node(id);
        }
    }

    bool consumed() const { return consumed_; }

    // ----- accessors -----------------------------------------------------

    const Shape& shape_of(int id) const { return nodes_[id].shape; }
    const std::vector<T>& val(int id) const { return nodes_[id].owns_value ? nodes_[id].value : *nodes_[id].ext; }
    bool req(int id) const { return nodes_[id].requires_grad; }

    const std::vector<T>& grad_of(int id) const {
        if (nodes_[id].gext) return *nodes_[id].gext;
        if (nodes_[id].grad.empty()) {
            static thread_local std::vector<T> zeros;
            zeros.assign(val(id).size(), T(0));
            return zeros;
        }
        return nodes_[id].grad;
    }

    size_t num_nodes() const { return nodes_.size(); }

private:
    struct Node {
        OpKind op = OpKind::Leaf;
        Shape shape;
        std::vector<T> value;
        std::vector<T> grad;
        const std::vector<T>* ext = nullptr;
        bool owns_value = true;
        bool requires_grad = false;
        int p0 = -1, p1 = -1;
        int i0 = 0, i1 = 0, i2 = 0;
        T a = T(0), b = T(0);
        std::shared_ptr<CheckpointRec<T>> ckpt;
        std::shared_ptr<std::vector<T>> table;
        // When set, gradient accumulation goes directly into this external
        // buffer instead of `grad`. Used by checkpoint replay so that a
        // segment's leaf gradients land in the enclosing tape's buffers with
        // exactly the same per-op accumulation order as an un-checkpointed
        // backward, keeping the two paths bitwise identical.
        std::vector<T>* gext = nullptr;
    };

    std::vector<Node> nodes_;
    bool consumed_ = false;

    int new_node(OpKind op, const Shape& shape, bool requires_grad, int p0 = -1, int p1 = -1) {
        Node n;
        n.op = op;
        n.shape = shape;
        n.requires_grad = requires_grad;
        n.p0 = p0;
        n.p1 = p1;
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    void alloc_value(int id) {
        nodes_[id].value.assign(static_cast<size_t>(numel(nodes_[id].shape)), T(0));
        AllocStats::global().add(static_cast<int64_t>(nodes_[id].value.size()));
    }

    void alloc_grad(int id) {
        if (nodes_[id].gext) return;  // externally managed, pre-sized by the owner
        if (nodes_[id].grad.empty()) {
            nodes_[id].grad.assign(val(id).size(), T(0));
            AllocStats::global().add(static_cast<int64_t>(nodes_[id].grad.size()));
        }
    }

    // Effective gradient buffer of a node (external if aliased).
    std::vector<T>& gref(int id) { return nodes_[id].gext ? *nodes_[id].gext : nodes_[id].grad; }

    void accum(int id, size_t i, T g) {
        alloc_grad(id);
        gref(id)[i] += g;
    }

    Tensor<T> binary(OpKind op, Tensor<T> x, Tensor<T> y) {
        if (x.tape != this || y.tape != this) throw std::invalid_argument("op: tensor not on this tape");
        if (shape_of(x.id) != shape_of(y.id) && numel(shape_of(x.id)) != numel(shape_of(y.id)))
            throw std::invalid_argument("elementwise op: shape mismatch " + shape_str(shape_of(x.id)) + " vs " +
                                        shape_str(shape_of(y.id)));
        int id = new_node(op, shape_of(x.id), req(x.id) || req(y.id), x.id, y.id);
        alloc_value(id);
        const auto& xv = val(x.id);
        const auto& yv = val(y.id);
        auto& v = nodes_[id].value;
        switch (op) {
            case OpKind::Add:
                for (size_t i = 0; i < v.size(); ++i) v[i] = xv[i] + yv[i];
                break;
            case OpKind::Sub:
                for (size_t i = 0; i < v.size(); ++i) v[i] = xv[i] - yv[i];
                break;
            case OpKind::Mul:
                for (size_t i = 0; i < v.size(); ++i) v[i] = xv[i] * yv[i];
                break;
            case OpKind::Div:
                for (size_t i = 0; i < v.size(); ++i) v[i] = xv[i] / yv[i];
                break;
            default:
                break;  // Axpby fills in caller
        }
        if (op != OpKind::Axpby) check_finite(id, "elementwise");
        return {this, id};
    }

    Tensor<T> reduce(OpKind op, Tensor<T> x) {
        int id = new_node(op, {1}, req(x.id), x.id);
        alloc_value(id);
        const auto& xv = val(x.id);
        // fixed left-to-right fold for bit-level reproducibility
        T s = T(0);
        for (size_t i = 0; i < xv.size(); ++i) s += xv[i];
        nodes_[id].value[0] = op == OpKind::MeanAll ? s / static_cast<T>(xv.size()) : s;
        check_finite(id, "reduce");
        return {this, id};
    }

    Tensor<T> softmax_impl(Tensor<T> x, bool log_form) {
        const Shape& sx = shape_of(x.id);
        int R = sx.size() >= 2 ? sx[0] : 1;
        int C = static_cast<int>(numel(sx)) / R;
        int id = new_node(log_form ? OpKind::LogSoftmaxRows : OpKind::SoftmaxRows, sx, req(x.id), x.id);
        nodes_[id].i0 = R;
        nodes_[id].i1 = C;
        alloc_value(id);
        const auto& xv = val(x.id);
        auto& v = nodes_[id].value;
        for (int r = 0; r < R; ++r) {
            const T* row = xv.data() + static_cast<size_t>(r) * C;
            T* out = v.data() + static_cast<size_t>(r) * C;
            T m = row[0];
            for (int c = 1; c < C; ++c) m = std::max(m, row[c]);
            T z = T(0);
            for (int c = 0; c < C; ++c) z += std::exp(row[c] - m);
            if (log_form) {
                T lz = std::log(z) + m;
                for (int c = 0; c < C; ++c) out[c] = row[c] - lz;
            } else {
                for (int c = 0; c < C; ++c) out[c] = std::exp(row[c] - m) / z;
            }
        }
        check_finite(id, "softmax");
        return {this, id};
    }

    static void check_blocks(const Shape& s) {
        if (s.size() != 3 || s[1] % 8 != 0 || s[2] % 8 != 0)
            throw std::invalid_argument("block op: need [C,H,W] with H,W multiples of 8, got " + shape_str(s));
    }

    Tensor<T> block_transform(Tensor<T> x, OpKind op) {
        const Shape sx = shape_of(x.id);  // copy: new_node may reallocate nodes_
        check_blocks(sx);
        int id = new_node(op, sx, req(x.id), x.id);
        alloc_value(id);
        apply_block_dct(val(x.id), nodes_[id].value, sx, op == OpKind::BlockIdct8);
        check_finite(id, "block_dct");
        return {this, id};
    }

    // Orthonormal DCT-II basis, row k: c_k * cos((2n+1) k pi / 16).
    static const std::array<T, 64>& dct_basis() {
        static const std::array<T, 64> D = [] {
            std::array<T, 64> d{};
            const double pi = 3.14159265358979323846;
            for (int k = 0; k < 8; ++k) {
                double ck = k == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
                for (int n = 0; n < 8; ++n) d[k * 8 + n] = static_cast<T>(ck * std::cos((2 * n + 1) * k * pi / 16.0));
            }
            return d;
        }();
        return D;
    }

    // out_block = D * in_block * D^T (or D^T * in * D for the inverse).
    static void apply_block_dct(const std::vector<T>& in, std::vector<T>& out, const Shape& s, bool inverse) {
        const auto& D = dct_basis();
        int C = s[0], H = s[1], W = s[2];
        T tmp[64], blk[64], res[64];
        for (int c = 0; c < C; ++c)
            for (int by = 0; by < H; by += 8)
                for (int bx = 0; bx < W; bx += 8) {
                    for (int i = 0; i < 8; ++i)
                        for (int j = 0; j < 8; ++j)
                            blk[i * 8 + j] = in[static_cast<size_t>(c) * H * W + (by + i) * W + bx + j];
                    for (int i = 0; i < 8; ++i)
                        for (int j = 0; j < 8; ++j) {
                            T acc = T(0);
                            for (int k = 0; k < 8; ++k)
                                acc += (inverse ? D[k * 8 + i] : D[i * 8 + k]) * blk[k * 8 + j];
                            tmp[i * 8 + j] = acc;
                        }
                    for (int i = 0; i < 8; ++i)
                        for (int j = 0; j < 8; ++j) {
                            T acc = T(0);
                            for (int k = 0; k < 8; ++k)
                                acc += tmp[i * 8 + k] * (inverse ? D[k * 8 + j] : D[j * 8 + k]);
                            res[i * 8 + j] = acc;
                        }
                    for (int i = 0; i < 8; ++i)
                        for (int j = 0; j < 8; ++j)
                            out[static_cast<size_t>(c) * H * W + (by + i) * W + bx + j] = res[i * 8 + j];
                }
    }

    static void apply_block_scale(const std::vector<T>& in, std::vector<T>& out, const Shape& s,
                                  const std::vector<T>& table) {
        int C = s[0], H = s[1], W = s[2];
        bool per_channel = table.size() == static_cast<size_t>(C) * 64;
        for (int c = 0; c < C; ++c) {
            const T* tbl = table.data() + (per_channel ? static_cast<size_t>(c) * 64 : 0);
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    out[static_cast<size_t>(c) * H * W + y * W + x] =
                        in[static_cast<size_t>(c) * H * W + y * W + x] * tbl[(y % 8) * 8 + (x % 8)];
        }
    }

    static void rotate_into(const std::vector<T>& in, std::vector<T>& out, int C, int H, int k) {
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < H; ++x) {
                    int sy = y, sx = x;
                    // out(y,x) = in(src) for CCW rotation by k*90
                    switch (k) {
                        case 1: sy = x; sx = H - 1 - y; break;
                        case 2: sy = H - 1 - y; sx = H - 1 - x; break;
                        case 3: sy = H - 1 - x; sx = y; break;
                        default: break;
                    }
                    out[static_cast<size_t>(c) * H * H + y * H + x] = in[static_cast<size_t>(c) * H * H + sy * H + sx];
                }
    }

    static T sigmoid(T x) { return T(1) / (T(1) + std::exp(-x)); }

    static std::vector<T>& conv_scratch() {
        static thread_local std::vector<T> buf;
        return buf;
    }

    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using CMap = Eigen::Map<const Mat>;
    using MMap = Eigen::Map<Mat>;

    static void gemm(const T* a, const T* b, T* c, int M, int K, int N) {
        MMap(c, M, N).noalias() = CMap(a, M, K) * CMap(b, K, N);
    }

    static void gemm_acc(const T* a, const T* b, T* c, int M, int K, int N) {
        MMap(c, M, N).noalias() += CMap(a, M, K) * CMap(b, K, N);
    }

    static void gemm_tn(const T* a, const T* b, T* c, int M, int K, int N) {
        // c[K,N] = a^T[K,M] * b[M,N]; a stored [M,K]
        MMap(c, K, N).noalias() = CMap(a, M, K).transpose() * CMap(b, M, N);
    }

    static void gemm_nt_acc(const T* a, const T* b, T* c, int M, int K, int N) {
        // c[M,K] += a[M,N] * b^T[N,K]; b stored [K,N]
        MMap(c, M, K).noalias() += CMap(a, M, N) * CMap(b, K, N).transpose();
    }

    static void im2col(const T* x, int Cin, int H, int W, T* col) {
        // col layout: [Cin*9, H*W]; kernel index k = (dy+1)*3 + (dx+1)
        const int64_t HW = static_cast<int64_t>(H) * W;
        for (int c = 0; c < Cin; ++c)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    T* dst = col + (static_cast<int64_t>(c) * 9 + (dy + 1) * 3 + (dx + 1)) * HW;
                    const T* src = x + static_cast<int64_t>(c) * HW;
                    for (int y = 0; y < H; ++y) {
                        int sy = y + dy;
                        if (sy < 0 || sy >= H) {
                            std::fill(dst + static_cast<int64_t>(y) * W, dst + static_cast<int64_t>(y + 1) * W, T(0));
                            continue;
                        }
                        for (int x2 = 0; x2 < W; ++x2) {
                            int sx = x2 + dx;
                            dst[static_cast<int64_t>(y) * W + x2] =
                                (sx < 0 || sx >= W) ? T(0) : src[static_cast<int64_t>(sy) * W + sx];
                        }
                    }
                }
    }

    static void col2im_acc(const T* col, int Cin, int H, int W, T* x) {
        const int64_t HW = static_cast<int64_t>(H) * W;
        for (int c = 0; c < Cin; ++c)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const T* src = col + (static_cast<int64_t>(c) * 9 + (dy + 1) * 3 + (dx + 1)) * HW;
                    T* dst = x + static_cast<int64_t>(c) * HW;
                    for (int y = 0; y < H; ++y) {
                        int sy = y + dy;
                        if (sy < 0 || sy >= H) continue;
                        for (int x2 = 0; x2 < W; ++x2) {
                            int sx = x2 + dx;
                            if (sx >= 0 && sx < W)
                                dst[static_cast<int64_t>(sy) * W + sx] += src[static_cast<int64_t>(y) * W + x2];
                        }
                    }
                }
    }

    void check_finite(int id, const char* where) {
        const auto& v = val(id);
        T acc = T(0);
        for (size_t i = 0; i < v.size(); ++i) acc += std::abs(v[i]);
        if (!std::isfinite(static_cast<double>(acc)))
            throw NumericalError(std::string("non-finite value produced by ") + where);
    }

    void backward_node(int id) {
        Node& n = nodes_[id];
        const std::vector<T>& g = n.grad;
        switch (n.op) {
            case OpKind::Leaf:
            case OpKind::StopGrad:
                break;
            case OpKind::Add:
                if (req(n.p0)) { alloc_grad(n.p0); axpy(g, gref(n.p0), T(1)); }
                if (req(n.p1)) { alloc_grad(n.p1); axpy(g, gref(n.p1), T(1)); }
                break;
            case OpKind::Sub:
                if (req(n.p0)) { alloc_grad(n.p0); axpy(g, gref(n.p0), T(1)); }
                if (req(n.p1)) { alloc_grad(n.p1); axpy(g, gref(n.p1), T(-1)); }
                break;
            case OpKind::Mul: {
                const auto& xv = val(n.p0);
                const auto& yv = val(n.p1);
                if (req(n.p0)) {
                    alloc_grad(n.p0);
                    auto& gx = gref(n.p0);
                    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yv[i];
                }
                if (req(n.p1)) {
                    alloc_grad(n.p1);
                    auto& gy = gref(n.p1);
                    for (size_t i = 0; i < g.size(); ++i) gy[i] += g[i] * xv[i];
                }
                break;
            }
            case OpKind::Div: {
                const auto& xv = val(n.p0);
                const auto& yv = val(n.p1);
                if (req(n.p0)) {
                    alloc_grad(n.p0);
                    auto& gx = gref(n.p0);
                    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / yv[i];
                }
                if (req(n.p1)) {
                    alloc_grad(n.p1);
                    auto& gy = gref(n.p1);
                    for (size_t i = 0; i < g.size(); ++i) gy[i] -= g[i] * xv[i] / (yv[i] * yv[i]);
                }
                break;
            }
            case OpKind::Axpby:
                if (req(n.p0)) { alloc_grad(n.p0); axpy(g, gref(n.p0), n.a); }
                if (req(n.p1)) { alloc_grad(n.p1); axpy(g, gref(n.p1), n.b); }
                break;
            case OpKind::ScalarAffine:
                if (req(n.p0)) { alloc_grad(n.p0); axpy(g, gref(n.p0), n.a); }
                break;
            case OpKind::Silu: {
                if (!req(n.p0)) break;
                alloc_grad(n.p0);
                const auto& xv = val(n.p0);
                auto& gx = gref(n.p0);
                for (size_t i = 0; i < g.size(); ++i) {
                    T s = sigmoid(xv[i]);
                    gx[i] += g[i] * s * (T(1) + xv[i] * (T(1) - s));
                }
                break;
            }
            case OpKind::Clamp01: {
                if (!req(n.p0)) break;
                alloc_grad(n.p0);
                const auto& xv = val(n.p0);
                auto& gx = gref(n.p0);
                for (size_t i = 0; i < g.size(); ++i)
                    if (xv[i] >= T(0) && xv[i] <= T(1)) gx[i] += g[i];
                break;
            }
            case OpKind::RoundSte:
            case OpKind::Reshape:
                if (req(n.p0)) { alloc_grad(n.p0); axpy(g, gref(n.p0), T(1)); }
                break;
            case OpKind::Matmul: {
                int M = n.i0, K = n.i1, N = n.i2;
                if (req(n.p0)) {
                    alloc_grad(n.p0);
                    gemm_nt_acc(g.data(), val(n.p1).data(), gref(n.p0).data(), M, K, N);
                }
                if (req(n.p1)) {
                    alloc_grad(n.p1);
                    // dB[K,N] += A^T[K,M] * G[M,N]
                    MMap(gref(n.p1).data(), K, N).noalias() +=
                        CMap(val(n.p0).data(), M, K).transpose() * CMap(g.data(), M, N);
                }
                break;
            }
            case OpKind::Conv3x3: {
                int Cin = n.i0, H = n.i1, W = n.i2;
                int Cout = n.shape[0];
                int HW = H * W;
                auto& col = conv_scratch();
                col.resize(static_cast<size_t>(Cin) * 9 * HW);
                if (req(n.p1)) {
                    alloc_grad(n.p1);
                    im2col(val(n.p0).data(), Cin, H, W, col.data());
                    gemm_nt_acc(g.data(), col.data(), gref(n.p1).data(), Cout, Cin * 9, HW);
                }
                if (req(n.p0)) {
                    alloc_grad(n.p0);
                    gemm_tn(val(n.p1).data(), g.data(), col.data(), Cout, Cin * 9, HW);
                    col2im_acc(col.data(), Cin, H, W, gref(n.p0).data());
                }
                break;
            }
            case OpKind::AddRowBias: {
                int R = n.shape[0];
                int64_t cols = numel(n.shape) / R;
                if (req(n.p0)) { alloc_grad(n.p0); axpy(g, gref(n.p0), T(1)); }
                if (req(n.p1)) {
                    alloc_grad(n.p1);
                    auto& gb = gref(n.p1);
                    for (int r = 0; r < R; ++r) {
                        T s = T(0);
                        for (int64_t c = 0; c < cols; ++c) s += g[r * cols + c];
                        gb[r] += s;
                    }
                }
                break;
            }
            case OpKind::SumAll:
                if (req(n.p0)) {
                    alloc_grad(n.p0);
                    auto& gx = gref(n.p0);
                    for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
                }
                break;
            case OpKind::MeanAll:
                if (req(n.p0)) {
                    alloc_grad(n.p0);
                    auto& gx = gref(n.p0);
                    T s = g[0] / static_cast<T>(gx.size());
                    for (size_t i = 0; i < gx.size(); ++i) gx[i] += s;
                }
                break;
            case OpKind::Pick:
                if (req(n.p0)) { alloc_grad(n.p0); gref(n.p0)[n.i0] += g[0]; }
                break;
            case OpKind::EmbedRow:
                if (req(n.p0)) {
                    alloc_grad(n.p0);
                    int D = n.shape[0];
                    auto& gt = gref(n.p0);
                    for (int i = 0; i < D; ++i) gt[static_cast<size_t>(n.i0) * D + i] += g[i];
                }
                break;
            case OpKind::SoftmaxRows: {
                if (!req(n.p0)) break;
                alloc_grad(n.p0);
                int R = n.i0, C = n.i1;
                auto& gx = gref(n.p0);
                const auto& y = n.value;
                for (int r = 0; r < R; ++r) {
                    const T* yr = y.data() + static_cast<size_t>(r) * C;
                    const T* gr = g.data() + static_cast<size_t>(r) * C;
                    T dot = T(0);
                    for (int c = 0; c < C; ++c) dot += gr[c] * yr[c];
                    for (int c = 0; c < C; ++c) gx[static_cast<size_t>(r) * C + c] += yr[c] * (gr[c] - dot);
                }
                break;
            }
            case OpKind::LogSoftmaxRows: {
                if (!req(n.p0)) break;
                alloc_grad(n.p0);
                int R = n.i0, C = n.i1;
                auto& gx = gref(n.p0);
                const auto& y = n.value;
                for (int r = 0; r < R; ++r) {
                    const T* yr = y.data() + static_cast<size_t>(r) * C;
                    const T* gr = g.data() + static_cast<size_t>(r) * C;
                    T gsum = T(0);
                    for (int c = 0; c < C; ++c) gsum += gr[c];
                    for (int c = 0; c < C; ++c)
                        gx[static_cast<size_t>(r) * C + c] += gr[c] - std::exp(yr[c]) * gsum;
                }
                break;
            }
            case OpKind::BlockDct8:
            case OpKind::BlockIdct8: {
                if (!req(n.p0)) break;
                alloc_grad(n.p0);
                // orthonormal linear map: adjoint == inverse transform
                std::vector<T> gi(g.size());
                apply_block_dct(g, gi, n.shape, n.op == OpKind::BlockDct8);
                axpy(gi, gref(n.p0), T(1));
                break;
            }
            case OpKind::BlockScale8: {
                if (!req(n.p0)) break;
                alloc_grad(n.p0);
                std::vector<T> gi(g.size());
                apply_block_scale(g, gi, n.shape, *n.table);
                axpy(gi, gref(n.p0), T(1));
                break;
            }
            case OpKind::Rot90: {
                if (!req(n.p0)) break;
                alloc_grad(n.p0);
                std::vector<T> gi(g.size());
                rotate_into(g, gi, n.shape[0], n.shape[1], (4 - n.i0) % 4);
                axpy(gi, gref(n.p0), T(1));
                break;
            }
            case OpKind::Checkpoint: {
                auto rec = n.ckpt;
                if (rec->done) break;
                rec->done = true;
                replay_checkpoint(*rec);
                break;
            }
        }
    }

    void replay_checkpoint(CheckpointRec<T>& rec) {
        Tape<T> scratch;
        std::vector<Tensor<T>> sub_inputs;
        sub_inputs.reserve(rec.inputs.size());
        for (int pid : rec.inputs) {
            Tensor<T> t = scratch.leaf(shape_of(pid), val(pid), req(pid));
            if (req(pid)) {
                // alias the scratch leaf's gradient to the enclosing buffer so
                // accumulation order matches the un-checkpointed backward
                alloc_grad(pid);
                scratch.nodes_[static_cast<size_t>(t.id)].gext = &gref(pid);
            }
            sub_inputs.push_back(t);
        }
        std::vector<Tensor<T>> sub_out = rec.fn(scratch, sub_inputs);
        if (sub_out.size() != rec.outputs.size())
            throw NumericalError("checkpoint replay produced a different number of outputs");

        if (rec.verify_replay) {
            for (size_t i = 0; i < sub_out.size(); ++i)
                if (sub_out[i].value() != val(rec.outputs[i]))
                    throw NumericalError("checkpoint replay mismatch: segment is not deterministic");
        }

        // Seed cotangents of the replayed outputs, then run the scratch
        // backward through a synthetic scalar: sum_i <g_i, y_i>.
        // Building the dot products on the scratch tape keeps one code path.
        Tensor<T> total = scratch.scalar(T(0));
        bool any = false;
        for (size_t i = 0; i < sub_out.size(); ++i) {
            const auto& gout = grad_of(rec.outputs[i]);
            bool nonzero = false;
            for (T v : gout)
                if (v != T(0)) { nonzero = true; break; }
            if (!nonzero) continue;
            Tensor<T> gleaf = scratch.leaf(sub_out[i].shape(), gout, false);
            total = scratch.add(total, scratch.sum_all(scratch.mul(gleaf, sub_out[i])));
            any = true;
        }
        if (!any) return;
        // input gradients land directly in the enclosing buffers via gext
        scratch.backward(total);
    }

    static void axpy(const std::vector<T>& src, std::vector<T>& dst, T a) {
        for (size_t i = 0; i < src.size(); ++i) dst[i] += a * src[i];
    }
};

template <class T>
const Shape& Tensor<T>::shape() const {
    return tape->shape_of(id);
}
template <class T>
const std::vector<T>& Tensor<T>::value() const {
    return tape->val(id);
}
template <class T>
const std::vector<T>& Tensor<T>::grad() const {
    return tape->grad_of(id);
}
template <class T>
T Tensor<T>::item() const {
    return tape->val(id)[0];
}

// Max relative error between the analytic gradient of f at x and central
// finite differences, max over coordinates of |g - fd| / (|fd| + 1e-12).
template <class T>
double finite_diff_check(const std::function<double(const std::vector<T>&)>& f, std::vector<T> x,
                         const std::vector<T>& analytic_grad, double eps) {
    if (eps <= 0) throw std::invalid_argument("finite_diff_check: eps must be positive");
    double worst = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        T orig = x[i];
        x[i] = orig + static_cast<T>(eps);
        double fp = f(x);
        x[i] = orig - static_cast<T>(eps);
        double fm = f(x);
        x[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericalError("finite_diff_check: function returned non-finite value");
        double fd = (fp - fm) / (2.0 * eps);
        double rel = std::abs(static_cast<double>(analytic_grad[i]) - fd) / (std::abs(fd) + 1e-12);
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace draftlab
