#pragma once
// Reverse-mode tape autodiff over 2-D row-major matrices.
//
// Design notes that matter to callers:
//  - Forward values are computed eagerly as nodes are created; the tape then
//    supports any number of backward sweeps over the same graph.
//  - A backward sweep can sever gradient flow through a set of rows of one
//    node (a "row cut"). Severed contributions are skipped, not multiplied by
//    zero, so downstream equality checks against exact zeros are valid.
//  - Sweeps can stop above a node (leaving its accumulated adjoint readable)
//    or start from an injected adjoint at a node and run only below it. Both
//    are exact restrictions of the full sweep.
//  - A forward-mode sweep (jvp) propagates a parameter-space tangent up to a
//    node, giving Jacobian-vector products without a second backward pass.
//  - All reductions run single-threaded in fixed order: two sweeps over the
//    same tape yield bit-identical results.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#ifdef GRADSPLIT_USE_CBLAS
#include <cblas.h>
extern "C" void openblas_set_num_threads(int);
#endif

namespace gradsplit {

struct AutodiffError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define GS_REQUIRE(cond, msg)                                    \
    do {                                                         \
        if (!(cond)) throw ::gradsplit::AutodiffError(           \
            std::string("autodiff: ") + (msg));                  \
    } while (0)

template <class Real>
struct Matrix {
    int64_t rows = 0, cols = 0;
    std::vector<Real> v;

    Matrix() = default;
    Matrix(int64_t r, int64_t c) : rows(r), cols(c), v(size_t(r * c), Real(0)) {}
    Real& at(int64_t r, int64_t c_) { return v[size_t(r * cols + c_)]; }
    Real at(int64_t r, int64_t c_) const { return v[size_t(r * cols + c_)]; }
    int64_t numel() const { return rows * cols; }
};

// ---------------- parameter indexing ----------------

struct ParamInfo {
    std::string name;
    int64_t offset = 0, rows = 0, cols = 0;
};

struct ParamIndex {
    std::vector<ParamInfo> entries;
    std::map<std::string, int> by_name;
    int64_t total = 0;

    int add(const std::string& name, int64_t rows, int64_t cols) {
        GS_REQUIRE(!by_name.count(name), "duplicate parameter name: " + name);
        ParamInfo info{name, total, rows, cols};
        entries.push_back(info);
        by_name[name] = int(entries.size()) - 1;
        total += rows * cols;
        return int(entries.size()) - 1;
    }
    int id_of(const std::string& name) const {
        auto it = by_name.find(name);
        GS_REQUIRE(it != by_name.end(), "unknown parameter name: " + name);
        return it->second;
    }
};

// Flat vector aligned with a ParamIndex layout. Used for parameter values,
// gradients, and optimizer state alike.
template <class Real>
struct GradVector {
    std::shared_ptr<const ParamIndex> index;
    std::vector<Real> flat;

    GradVector() = default;
    explicit GradVector(std::shared_ptr<const ParamIndex> idx)
        : index(std::move(idx)), flat(size_t(index->total), Real(0)) {}

    void zero() { std::fill(flat.begin(), flat.end(), Real(0)); }
    int64_t size() const { return int64_t(flat.size()); }

    void add_scaled(const GradVector& other, Real s) {
        GS_REQUIRE(flat.size() == other.flat.size(), "GradVector size mismatch");
        for (size_t i = 0; i < flat.size(); ++i) flat[i] += s * other.flat[i];
    }
    void scale(Real s) {
        for (auto& x : flat) x *= s;
    }
    double dot(const GradVector& other) const {
        GS_REQUIRE(flat.size() == other.flat.size(), "GradVector size mismatch");
        double s = 0;
        for (size_t i = 0; i < flat.size(); ++i) s += double(flat[i]) * double(other.flat[i]);
        return s;
    }
    double norm() const { return std::sqrt(dot(*this)); }
};

// ---------------- dense kernels ----------------

inline void pin_blas_threads() {
#ifdef GRADSPLIT_USE_CBLAS
    static bool done = [] {
        openblas_set_num_threads(1);
        return true;
    }();
    (void)done;
#endif
}

// C = alpha * op(A) * op(B) + beta * C, row-major.
template <class Real>
inline void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, Real alpha,
                 const Real* A, int64_t lda, const Real* B, int64_t ldb, Real beta,
                 Real* C, int64_t ldc) {
#ifdef GRADSPLIT_USE_CBLAS
    pin_blas_threads();
    if constexpr (std::is_same_v<Real, float>) {
        cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
                    tb ? CblasTrans : CblasNoTrans, int(m), int(n), int(k), alpha, A,
                    int(lda), B, int(ldb), beta, C, int(ldc));
        return;
    } else if constexpr (std::is_same_v<Real, double>) {
        cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
                    tb ? CblasTrans : CblasNoTrans, int(m), int(n), int(k), alpha, A,
                    int(lda), B, int(ldb), beta, C, int(ldc));
        return;
    }
#endif
    // Fallback: straightforward blocked loops. beta == 0 must not read C
    // (the output buffer may hold stale reused memory, matching BLAS rules).
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0;
            for (int64_t p = 0; p < k; ++p) {
                Real a = ta ? A[p * lda + i] : A[i * lda + p];
                Real b = tb ? B[j * ldb + p] : B[p * ldb + j];
                acc += double(a) * double(b);
            }
            C[i * ldc + j] =
                beta == Real(0) ? alpha * Real(acc) : alpha * Real(acc) + beta * C[i * ldc + j];
        }
}

// ---------------- tape ----------------

enum class Op : uint8_t {
    Leaf,
    Gather,
    Add,
    AddBias,
    Mul,
    Scale,
    MatMul,
    LayerNorm,
    Gelu,
    Softmax,
    Attention,
    GatherRows,
    PlaceRows,
    ConcatRows,
    AddToRows,
    Detach,
    ReduceSum,
    WeightedSum,
    XentRows,
};

template <class Real>
class Tape {
  public:
    static constexpr Real kLnEps = Real(1e-5);

    struct Node {
        Op op;
        int a = -1, b = -1, c = -1;
        int64_t rows = 0, cols = 0;
        std::vector<Real> val, adj, tan;
        bool adj_dirty = false, tan_dirty = false;
        bool ta = false, tb = false;     // matmul transposes
        Real scale = 0;                  // Scale factor, attention 1/sqrt(dh)
        std::vector<int32_t> idx;        // gather ids / row lists / xent targets
        std::vector<Real> aux;           // op-specific saved state
        std::vector<Real> w;             // WeightedSum row weights
        int B = 0, T = 0, H = 0;         // attention metadata
        bool myopic = false;
        int param_id = -1;
    };

    // Rows {pos + k*stride} of one node are severed during a backward sweep.
    struct RowCut {
        int node = -1;
        int64_t pos = 0, stride = 0;
        bool active() const { return node >= 0; }
    };

    explicit Tape(std::shared_ptr<const ParamIndex> pindex = nullptr)
        : pindex_(std::move(pindex)) {}

    void clear() {
        nodes_.clear();
        leaves_.clear();
    }
    int size() const { return int(nodes_.size()); }
    const Node& node(int n) const { return nodes_.at(size_t(n)); }

    int64_t rows(int n) const { return nodes_[size_t(n)].rows; }
    int64_t cols(int n) const { return nodes_[size_t(n)].cols; }
    const Real* data(int n) const { return nodes_[size_t(n)].val.data(); }
    Real scalar(int n) const {
        GS_REQUIRE(nodes_[size_t(n)].rows == 1 && nodes_[size_t(n)].cols == 1,
                   "scalar() on non-scalar node");
        return nodes_[size_t(n)].val[0];
    }
    Matrix<Real> value(int n) const {
        Matrix<Real> m(rows(n), cols(n));
        m.v = nodes_[size_t(n)].val;
        return m;
    }
    const Real* adjoint(int n) const {
        GS_REQUIRE(nodes_[size_t(n)].adj_dirty, "adjoint not computed for node");
        return nodes_[size_t(n)].adj.data();
    }
    const Real* tangent(int n) const {
        GS_REQUIRE(nodes_[size_t(n)].tan_dirty, "tangent not computed for node");
        return nodes_[size_t(n)].tan.data();
    }

    // ---- node constructors ----

    int constant(const Matrix<Real>& m) {
        Node nd;
        nd.op = Op::Leaf;
        nd.rows = m.rows;
        nd.cols = m.cols;
        nd.val = acquire(m.v.size());
        std::memcpy(nd.val.data(), m.v.data(), m.v.size() * sizeof(Real));
        return push(std::move(nd));
    }

    int param(const Real* flat, int param_id) {
        GS_REQUIRE(pindex_ != nullptr, "tape has no parameter index");
        const ParamInfo& info = pindex_->entries.at(size_t(param_id));
        Node nd;
        nd.op = Op::Leaf;
        nd.rows = info.rows;
        nd.cols = info.cols;
        nd.param_id = param_id;
        size_t n = size_t(info.rows * info.cols);
        nd.val = acquire(n);
        std::memcpy(nd.val.data(), flat + info.offset, n * sizeof(Real));
        int id = push(std::move(nd));
        leaves_.push_back(id);
        return id;
    }

    int gather(int table, const std::vector<int32_t>& ids) {
        const Node& t = nodes_[size_t(table)];
        for (int32_t i : ids)
            GS_REQUIRE(i >= 0 && i < t.rows, "gather: row id out of range");
        Node nd;
        nd.op = Op::Gather;
        nd.a = table;
        nd.idx = ids;
        nd.rows = int64_t(ids.size());
        nd.cols = t.cols;
        nd.val = acquire(size_t(nd.rows * nd.cols));
        int id = push(std::move(nd));
        Node& o = nodes_[size_t(id)];
        const Node& tt = nodes_[size_t(table)];
        for (size_t r = 0; r < o.idx.size(); ++r)
            std::memcpy(&o.val[r * size_t(o.cols)], &tt.val[size_t(o.idx[r]) * size_t(o.cols)],
                        size_t(o.cols) * sizeof(Real));
        return id;
    }

    int add(int a, int b) {
        same_shape("add", a, b);
        Node nd = elementwise(Op::Add, a, b);
        int id = push(std::move(nd));
        binary_loop(id, [](Real x, Real y) { return x + y; });
        return id;
    }

    int add_bias(int a, int bias) {
        GS_REQUIRE(nodes_[size_t(bias)].rows == 1 && nodes_[size_t(bias)].cols == cols(a),
                   "add_bias: bias must be (1, cols)");
        Node nd = elementwise(Op::AddBias, a, bias);
        int id = push(std::move(nd));
        Node& o = nodes_[size_t(id)];
        const Node& x = nodes_[size_t(o.a)];
        const Node& bb = nodes_[size_t(o.b)];
        for (int64_t r = 0; r < o.rows; ++r)
            for (int64_t c = 0; c < o.cols; ++c)
                o.val[size_t(r * o.cols + c)] = x.val[size_t(r * o.cols + c)] + bb.val[size_t(c)];
        return id;
    }

    int mul(int a, int b) {
        same_shape("mul", a, b);
        Node nd = elementwise(Op::Mul, a, b);
        int id = push(std::move(nd));
        binary_loop(id, [](Real x, Real y) { return x * y; });
        return id;
    }

    int scale(int a, Real s) {
        Node nd = elementwise(Op::Scale, a, -1);
        nd.scale = s;
        int id = push(std::move(nd));
        Node& o = nodes_[size_t(id)];
        const Node& x = nodes_[size_t(o.a)];
        for (size_t i = 0; i < o.val.size(); ++i) o.val[i] = x.val[i] * s;
        return id;
    }

    int matmul(int a, int b, bool ta = false, bool tb = false) {
        int64_t am = ta ? cols(a) : rows(a), ak = ta ? rows(a) : cols(a);
        int64_t bk = tb ? cols(b) : rows(b), bn = tb ? rows(b) : cols(b);
        GS_REQUIRE(ak == bk, "matmul: inner dimensions differ (" + shape_str(a) + " x " +
                                 shape_str(b) + ")");
        Node nd;
        nd.op = Op::MatMul;
        nd.a = a;
        nd.b = b;
        nd.ta = ta;
        nd.tb = tb;
        nd.rows = am;
        nd.cols = bn;
        nd.val = acquire(size_t(am * bn));
        int id = push(std::move(nd));
        Node& o = nodes_[size_t(id)];
        const Node& A = nodes_[size_t(a)];
        const Node& B = nodes_[size_t(b)];
        gemm<Real>(ta, tb, am, bn, ak, Real(1), A.val.data(), A.cols, B.val.data(), B.cols,
                   Real(0), o.val.data(), o.cols);
        return id;
    }

    int layer_norm(int x, int gain, int bias) {
        GS_REQUIRE(nodes_[size_t(gain)].rows == 1 && nodes_[size_t(gain)].cols == cols(x),
                   "layer_norm: gain must be (1, cols)");
        GS_REQUIRE(nodes_[size_t(bias)].rows == 1 && nodes_[size_t(bias)].cols == cols(x),
                   "layer_norm: bias must be (1, cols)");
        Node nd;
        nd.op = Op::LayerNorm;
        nd.a = x;
        nd.b = gain;
        nd.c = bias;
        nd.rows = rows(x);
        nd.cols = cols(x);
        nd.val = acquire(size_t(nd.rows * nd.cols));
        nd.aux = acquire(size_t(2 * nd.rows));  // per row: mean, inv std
        int id = push(std::move(nd));
        Node& o = nodes_[size_t(id)];
        const Node& xx = nodes_[size_t(o.a)];
        const Node& g = nodes_[size_t(o.b)];
        const Node& bb = nodes_[size_t(o.c)];
        int64_t C = o.cols;
        for (int64_t r = 0; r < o.rows; ++r) {
            const Real* row = &xx.val[size_t(r * C)];
            double mu = 0;
            for (int64_t c = 0; c < C; ++c) mu += double(row[c]);
            mu /= double(C);
            double var = 0;
            for (int64_t c = 0; c < C; ++c) {
                double d = double(row[c]) - mu;
                var += d * d;
            }
            var /= double(C);
            double inv = 1.0 / std::sqrt(var + double(kLnEps));
            o.aux[size_t(2 * r)] = Real(mu);
            o.aux[size_t(2 * r + 1)] = Real(inv);
            for (int64_t c = 0; c < C; ++c)
                o.val[size_t(r * C + c)] =
                    Real((double(row[c]) - mu) * inv) * g.val[size_t(c)] + bb.val[size_t(c)];
        }
        return id;
    }

    int gelu(int a) {
        Node nd = elementwise(Op::Gelu, a, -1);
        nd.aux = acquire(nd.val.size());  // tanh(inner) per element
        int id = push(std::move(nd));
        Node& o = nodes_[size_t(id)];
        const Node& x = nodes_[size_t(o.a)];
        constexpr Real c0 = Real(0.7978845608028654);  // sqrt(2/pi)
        constexpr Real c1 = Real(0.044715);
        for (size_t i = 0; i < o.val.size(); ++i) {
            Real xv = x.val[i];
            Real z = c0 * (xv + c1 * xv * xv * xv);
            // tanh(z) = 2*sigmoid(2z) - 1; exp is much cheaper than tanh here
            // and the identity saturates cleanly at both ends.
            Real w = Real(1) / (Real(1) + std::exp(Real(-2) * z));
            Real t = Real(2) * w - Real(1);
            o.aux[i] = t;
            o.val[i] = xv * w;
        }
        return id;
    }

    int softmax(int a) {
        Node nd = elementwise(Op::Softmax, a, -1);
        int id = push(std::move(nd));
        Node& o = nodes_[size_t(id)];
        const Node& x = nodes_[size_t(o.a)];
        for (int64_t r = 0; r < o.rows; ++r)
            softmax_row(&x.val[size_t(r * o.cols)], &o.val[size_t(r * o.cols)], o.cols);
        return id;
    }

    // Causal multi-head self-attention on (B*T, D) rows grouped per sequence.
    // Myopic mode keeps forward values identical but, during backward sweeps,
    // only a position's own K/V rows receive gradient (cross-position K/V
    // contributions are skipped entirely).
    int attention(int q, int k, int v, int B, int T, int H, bool myopic) {
        int64_t R = rows(q), D = cols(q);
        GS_REQUIRE(R == int64_t(B) * T, "attention: rows != B*T");
        GS_REQUIRE(rows(k) == R && rows(v) == R && cols(k) == D && cols(v) == D,
                   "attention: Q/K/V shapes differ");
        GS_REQUIRE(D % H == 0, "attention: head count must divide width");
        Node nd;
        nd.op = Op::Attention;
        nd.a = q;
        nd.b = k;
        nd.c = v;
        nd.rows = R;
        nd.cols = D;
        nd.B = B;
        nd.T = T;
        nd.H = H;
        nd.myopic = myopic;
        nd.scale = Real(1.0 / std::sqrt(double(D / H)));
        nd.val = acquire_zeroed(size_t(R * D));
        nd.aux = acquire_zeroed(size_t(int64_t(B) * H * T * T));  // attn probabilities
        int id = push(std::move(nd));
        Node& o = nodes_[size_t(id)];
        const Real* Q = nodes_[size_t(q)].val.data();
        const Real* K = nodes_[size_t(k)].val.data();
        const Real* V = nodes_[size_t(v)].val.data();
        int64_t dh = D / H;
        std::vector<Real> s(static_cast<size_t>(T));
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < H; ++h) {
                int64_t hoff = int64_t(h) * dh;
                Real* P = &o.aux[size_t(((int64_t(b) * H) + h) * T * T)];
                for (int i = 0; i < T; ++i) {
                    const Real* qi = &Q[(int64_t(b) * T + i) * D + hoff];
                    for (int j = 0; j <= i; ++j) {
                        const Real* kj = &K[(int64_t(b) * T + j) * D + hoff];
                        double acc = 0;
                        for (int64_t c = 0; c < dh; ++c) acc += double(qi[c]) * double(kj[c]);
                        s[size_t(j)] = Real(acc) * o.scale;
                    }
                    softmax_row(s.data(), &P[int64_t(i) * T], i + 1);
                    Real* out = &o.val[(int64_t(b) * T + i) * D + hoff];
                    for (int j = 0; j <= i; ++j) {
                        Real p = P[int64_t(i) * T + j];
                        const Real* vj = &V[(int64_t(b) * T + j) * D + hoff];
                        for (int64_t c = 0; c < dh; ++c) out[c] += p * vj[c];
                    }
                }
            }
        return id;
    }

    int gather_rows(int a, std::vector<int32_t> rows_list) {
        for (int32_t r : rows_list)
            GS_REQUIRE(r >= 0 && r < rows(a), "gather_rows: row out of range");
        Node nd;
        nd.op = Op::GatherRows;
        nd.a = a;
        nd.idx = std::move(rows_list);
        nd.rows = int64_t(nd.idx.size());
        nd.cols = cols(a);
        nd.val = acquire(size_t(nd.rows * nd.cols));
        int id = push(std::move(nd));
        Node& o = nodes_[size_t(id)];
        const Node& x = nodes_[size_t(o.a)];
        for (size_t r = 0; r < o.idx.size(); ++r)
            std::memcpy(&o.val[r * size_t(o.cols)], &x.val[size_t(o.idx[r]) * size_t(o.cols)],
                        size_t(o.cols) * sizeof(Real));
        return id;
    }

    // Rows of `a` placed at idx[r] in a zero matrix of out_rows rows.
    int place_rows(int a, std::vector<int32_t> dest, int64_t out_rows) {
        GS_REQUIRE(int64_t(dest.size()) == rows(a), "place_rows: dest size != rows");
        for (int32_t r : dest)
            GS_REQUIRE(r >= 0 && r < out_rows, "place_rows: dest row out of range");
        Node nd;
        nd.op = Op::PlaceRows;
        nd.a = a;
        nd.idx = std::move(dest);
        nd.rows = out_rows;
        nd.cols = cols(a);
        nd.val = acquire_zeroed(size_t(out_rows * nd.cols));
        int id = push(std::move(nd));
        Node& o = nodes_[size_t(id)];
        const Node& x = nodes_[size_t(o.a)];
        for (size_t r = 0; r < o.idx.size(); ++r)
            std::memcpy(&o.val[size_t(o.idx[r]) * size_t(o.cols)], &x.val[r * size_t(o.cols)],
                        size_t(o.cols) * sizeof(Real));
        return id;
    }

    int concat_rows(int a, int b) {
        GS_REQUIRE(cols(a) == cols(b), "concat_rows: column mismatch");
        Node nd;
        nd.op = Op::ConcatRows;
        nd.a = a;
        nd.b = b;
        nd.rows = rows(a) + rows(b);
        nd.cols = cols(a);
        nd.val = acquire(size_t(nd.rows * nd.cols));
        int id = push(std::move(nd));
        Node& o = nodes_[size_t(id)];
        const Node& x = nodes_[size_t(o.a)];
        const Node& y = nodes_[size_t(o.b)];
        std::memcpy(o.val.data(), x.val.data(), x.val.size() * sizeof(Real));
        std::memcpy(o.val.data() + x.val.size(), y.val.data(), y.val.size() * sizeof(Real));
        return id;
    }

    int slice_rows(int a, int64_t r0, int64_t r1) {
        GS_REQUIRE(0 <= r0 && r0 < r1 && r1 <= rows(a), "slice_rows: bad range");
        std::vector<int32_t> list;
        for (int64_t r = r0; r < r1; ++r) list.push_back(int32_t(r));
        return gather_rows(a, std::move(list));
    }

    // out = a with vec (1, C) added to the listed rows. Used for activation
    // interventions; gradient and tangent pass through unchanged.
    int add_to_rows(int a, int vec, const std::vector<int32_t>& rows_list) {
        GS_REQUIRE(nodes_[size_t(vec)].rows == 1 && nodes_[size_t(vec)].cols == cols(a),
                   "add_to_rows: vec must be (1, cols)");
        Node nd = elementwise(Op::AddToRows, a, vec);
        nd.idx = rows_list;
        int id = push(std::move(nd));
        Node& o = nodes_[size_t(id)];
        const Node& x = nodes_[size_t(o.a)];
        const Node& d = nodes_[size_t(o.b)];
        std::memcpy(o.val.data(), x.val.data(), x.val.size() * sizeof(Real));
        for (int32_t r : o.idx) {
            GS_REQUIRE(r >= 0 && r < o.rows, "add_to_rows: row out of range");
            for (int64_t c = 0; c < o.cols; ++c) o.val[size_t(r * o.cols + c)] += d.val[size_t(c)];
        }
        return id;
    }

    int detach(int a) {
        Node nd = elementwise(Op::Detach, a, -1);
        int id = push(std::move(nd));
        Node& o = nodes_[size_t(id)];
        const Node& x = nodes_[size_t(o.a)];
        std::memcpy(o.val.data(), x.val.data(), x.val.size() * sizeof(Real));
        return id;
    }

    int reduce_sum(int a) {
        Node nd;
        nd.op = Op::ReduceSum;
        nd.a = a;
        nd.rows = 1;
        nd.cols = 1;
        nd.val = acquire(1);
        int id = push(std::move(nd));
        Node& o = nodes_[size_t(id)];
        const Node& x = nodes_[size_t(o.a)];
        double s = 0;
        for (Real xv : x.val) s += double(xv);
        o.val[0] = Real(s);
        return id;
    }

    // Scalar = sum_r weights[r] * a[r, 0]; a must be a column vector.
    int weighted_sum(int a, std::vector<Real> weights) {
        GS_REQUIRE(cols(a) == 1, "weighted_sum: input must be a column vector");
        GS_REQUIRE(int64_t(weights.size()) == rows(a), "weighted_sum: weights size mismatch");
        Node nd;
        nd.op = Op::WeightedSum;
        nd.a = a;
        nd.w = std::move(weights);
        nd.rows = 1;
        nd.cols = 1;
        nd.val = acquire(1);
        int id = push(std::move(nd));
        Node& o = nodes_[size_t(id)];
        const Node& x = nodes_[size_t(o.a)];
        double s = 0;
        for (size_t r = 0; r < o.w.size(); ++r) s += double(o.w[r]) * double(x.val[r]);
        o.val[0] = Real(s);
        return id;
    }

    // Per-row cross entropy from logits; rows with target -1 produce loss 0
    // and no gradient. Log-sum-exp uses row-max subtraction.
    int xent_rows(int logits, const std::vector<int32_t>& targets) {
        GS_REQUIRE(int64_t(targets.size()) == rows(logits), "xent_rows: target count mismatch");
        int64_t V = cols(logits);
        for (int32_t t : targets)
            GS_REQUIRE(t >= -1 && t < V, "xent_rows: target id out of range");
        Node nd;
        nd.op = Op::XentRows;
        nd.a = logits;
        nd.idx = targets;
        nd.rows = rows(logits);
        nd.cols = 1;
        nd.val = acquire(size_t(nd.rows));
        nd.aux = acquire(size_t(nd.rows * V));  // softmax probabilities
        int id = push(std::move(nd));
        Node& o = nodes_[size_t(id)];
        const Node& x = nodes_[size_t(o.a)];
        for (int64_t r = 0; r < o.rows; ++r) {
            const Real* row = &x.val[size_t(r * V)];
            Real* p = &o.aux[size_t(r * V)];
            double lse = softmax_row(row, p, V);
            int32_t t = o.idx[size_t(r)];
            o.val[size_t(r)] = t < 0 ? Real(0) : Real(lse - double(row[t]));
        }
        return id;
    }

    // ---- backward sweeps ----

    // Full sweep from a scalar node, optionally severing rows of one node and
    // optionally stopping above `stop_above` (adjoints at and below it stay
    // untouched; the stop node's accumulated adjoint is readable afterwards).
    void backward(int seed, const RowCut& cut = RowCut{}, int stop_above = -1) {
        GS_REQUIRE(nodes_[size_t(seed)].rows == 1 && nodes_[size_t(seed)].cols == 1,
                   "backward: seed must be scalar");
        clear_adjoints();
        Node& s = nodes_[size_t(seed)];
        ensure_adj(seed);
        s.adj[0] = Real(1);
        run_backward(seed, stop_above, cut);
    }

    // Sweep from an injected adjoint at `node`, running only at and below it.
    void inject_backward(int node, const std::vector<Real>& seed_adj, const RowCut& cut = RowCut{}) {
        Node& n = nodes_[size_t(node)];
        GS_REQUIRE(int64_t(seed_adj.size()) == n.rows * n.cols,
                   "inject_backward: seed size mismatch");
        clear_adjoints();
        ensure_adj(node);
        n.adj = seed_adj;
        n.adj_dirty = true;
        run_backward(node, -1, cut);
    }

    // Copy accumulated leaf adjoints into a parameter-space gradient.
    void extract_grad(GradVector<Real>& out) const {
        GS_REQUIRE(out.index.get() == pindex_.get(), "extract_grad: index mismatch");
        out.zero();
        for (int id : leaves_) {
            const Node& n = nodes_[size_t(id)];
            if (!n.adj_dirty) continue;
            const ParamInfo& info = pindex_->entries[size_t(n.param_id)];
            Real* dst = out.flat.data() + info.offset;
            for (size_t i = 0; i < n.adj.size(); ++i) dst[i] += n.adj[i];
        }
    }

    // ---- forward-mode sweep ----

    // Propagate the parameter-space tangent `dir` through nodes 0..upto
    // (inclusive). Afterwards tangent(n) is d(value of n)/d(eps) for
    // parameters moving along dir. Mode flags (myopic) do not alter tangents:
    // this is the true Jacobian of the forward function.
    void jvp(const GradVector<Real>& dir, int upto) {
        GS_REQUIRE(dir.index.get() == pindex_.get(), "jvp: index mismatch");
        GS_REQUIRE(upto >= 0 && upto < size(), "jvp: node out of range");
        for (Node& n : nodes_) n.tan_dirty = false;
        for (int n = 0; n <= upto; ++n) forward_tangent(n, dir);
    }

    std::shared_ptr<const ParamIndex> param_index() const { return pindex_; }

    // Drops the graph but keeps its buffers for the next build. A loop that
    // resets and rebuilds an identically-shaped graph reuses every value,
    // adjoint, and tangent allocation.
    void reset() {
        for (Node& n : nodes_) {
            stash(std::move(n.val));
            stash(std::move(n.adj));
            stash(std::move(n.tan));
            stash(std::move(n.aux));
            stash(std::move(n.w));
        }
        nodes_.clear();
        leaves_.clear();
    }

  private:
    std::shared_ptr<const ParamIndex> pindex_;
    std::vector<Node> nodes_;
    std::vector<int> leaves_;
    std::vector<Real> zero_scratch_;
    // Retired buffers bucketed by exact size. Graphs rebuilt step after step
    // have identical shapes, so reset() + rebuild touches the allocator only
    // on the first step.
    std::unordered_map<size_t, std::vector<std::vector<Real>>> pool_;

    // Contents are stale on reuse; callers either overwrite every element or
    // use acquire_zeroed.
    std::vector<Real> acquire(size_t n) {
        auto it = pool_.find(n);
        if (it != pool_.end() && !it->second.empty()) {
            std::vector<Real> v = std::move(it->second.back());
            it->second.pop_back();
            return v;
        }
        return std::vector<Real>(n);
    }

    std::vector<Real> acquire_zeroed(size_t n) {
        std::vector<Real> v = acquire(n);
        std::fill(v.begin(), v.end(), Real(0));
        return v;
    }

    void stash(std::vector<Real>&& v) {
        if (!v.empty()) pool_[v.size()].push_back(std::move(v));
    }

    int push(Node&& nd) {
        nodes_.push_back(std::move(nd));
        return int(nodes_.size()) - 1;
    }

    Node elementwise(Op op, int a, int b) {
        Node nd;
        nd.op = op;
        nd.a = a;
        nd.b = b;
        nd.rows = rows(a);
        nd.cols = cols(a);
        nd.val = acquire(size_t(nd.rows * nd.cols));
        return nd;
    }

    template <class F>
    void binary_loop(int id, F f) {
        Node& o = nodes_[size_t(id)];
        const Node& x = nodes_[size_t(o.a)];
        const Node& y = nodes_[size_t(o.b)];
        for (size_t i = 0; i < o.val.size(); ++i) o.val[i] = f(x.val[i], y.val[i]);
    }

    void same_shape(const char* what, int a, int b) {
        GS_REQUIRE(rows(a) == rows(b) && cols(a) == cols(b),
                   std::string(what) + ": shape mismatch (" + shape_str(a) + " vs " +
                       shape_str(b) + ")");
    }

    std::string shape_str(int n) const {
        return std::to_string(rows(n)) + "x" + std::to_string(cols(n));
    }

    // log-sum-exp with max subtraction; writes softmax probs, returns lse.
    static double softmax_row(const Real* x, Real* p, int64_t n) {
        double mx = double(x[0]);
        for (int64_t i = 1; i < n; ++i) mx = std::max(mx, double(x[i]));
        double denom = 0;
        for (int64_t i = 0; i < n; ++i) {
            double e = std::exp(double(x[i]) - mx);
            p[i] = Real(e);
            denom += e;
        }
        double inv = 1.0 / denom;
        for (int64_t i = 0; i < n; ++i) p[i] = Real(double(p[i]) * inv);
        return mx + std::log(denom);
    }

    void ensure_adj(int n) {
        Node& nd = nodes_[size_t(n)];
        if (nd.adj.size() != nd.val.size()) nd.adj = acquire_zeroed(nd.val.size());
        nd.adj_dirty = true;
    }

    void clear_adjoints() {
        for (Node& n : nodes_)
            if (n.adj_dirty) {
                std::fill(n.adj.begin(), n.adj.end(), Real(0));
                n.adj_dirty = false;
            }
    }

    Real* adj_into(int n) {
        ensure_adj(n);
        return nodes_[size_t(n)].adj.data();
    }

    void run_backward(int from, int stop_above, const RowCut& cut) {
        for (int n = from; n >= 0; --n) {
            if (n <= stop_above && stop_above >= 0) break;
            Node& nd = nodes_[size_t(n)];
            if (!nd.adj_dirty) continue;
            if (cut.active() && cut.node == n) sever_rows(nd, cut);
            propagate(n);
        }
    }

    static void sever_rows(Node& nd, const RowCut& cut) {
        GS_REQUIRE(cut.stride > 0 && cut.pos >= 0 && cut.pos < cut.stride,
                   "row cut: bad position/stride");
        for (int64_t r = cut.pos; r < nd.rows; r += cut.stride)
            std::fill(&nd.adj[size_t(r * nd.cols)], &nd.adj[size_t((r + 1) * nd.cols)], Real(0));
    }

    void propagate(int id) {
        Node& o = nodes_[size_t(id)];
        const Real* g = o.adj.data();
        switch (o.op) {
            case Op::Leaf:
            case Op::Detach:
                break;  // leaves hold their adjoint; detach drops it
            case Op::Gather: {
                Real* da = adj_into(o.a);
                int64_t C = o.cols;
                for (size_t r = 0; r < o.idx.size(); ++r) {
                    Real* dst = &da[size_t(o.idx[r]) * size_t(C)];
                    const Real* src = &g[int64_t(r) * C];
                    for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
                }
                break;
            }
            case Op::Add: {
                axpy(o.a, g, o.val.size());
                axpy(o.b, g, o.val.size());
                break;
            }
            case Op::AddBias: {
                axpy(o.a, g, o.val.size());
                Real* db = adj_into(o.b);
                for (int64_t r = 0; r < o.rows; ++r)
                    for (int64_t c = 0; c < o.cols; ++c) db[c] += g[r * o.cols + c];
                break;
            }
            case Op::Mul: {
                const Node& x = nodes_[size_t(o.a)];
                const Node& y = nodes_[size_t(o.b)];
                Real* da = adj_into(o.a);
                Real* db = adj_into(o.b);
                for (size_t i = 0; i < o.val.size(); ++i) {
                    da[i] += g[i] * y.val[i];
                    db[i] += g[i] * x.val[i];
                }
                break;
            }
            case Op::Scale: {
                Real* da = adj_into(o.a);
                for (size_t i = 0; i < o.val.size(); ++i) da[i] += g[i] * o.scale;
                break;
            }
            case Op::MatMul:
                backward_matmul(o, g);
                break;
            case Op::LayerNorm:
                backward_layer_norm(o, g);
                break;
            case Op::Gelu: {
                const Node& x = nodes_[size_t(o.a)];
                Real* da = adj_into(o.a);
                constexpr Real c0 = Real(0.7978845608028654);
                constexpr Real c1 = Real(0.044715);
                for (size_t i = 0; i < o.val.size(); ++i) {
                    Real xv = x.val[i];
                    Real t = o.aux[i];
                    Real dy = Real(0.5) * (Real(1) + t) +
                              Real(0.5) * xv * (Real(1) - t * t) * c0 *
                                  (Real(1) + Real(3) * c1 * xv * xv);
                    da[i] += g[i] * dy;
                }
                break;
            }
            case Op::Softmax: {
                Real* da = adj_into(o.a);
                for (int64_t r = 0; r < o.rows; ++r) {
                    const Real* p = &o.val[size_t(r * o.cols)];
                    const Real* gr = &g[r * o.cols];
                    double dot = 0;
                    for (int64_t c = 0; c < o.cols; ++c) dot += double(p[c]) * double(gr[c]);
                    Real* dst = &da[size_t(r * o.cols)];
                    for (int64_t c = 0; c < o.cols; ++c)
                        dst[c] += p[c] * (gr[c] - Real(dot));
                }
                break;
            }
            case Op::Attention:
                backward_attention(o, g);
                break;
            case Op::GatherRows: {
                Real* da = adj_into(o.a);
                for (size_t r = 0; r < o.idx.size(); ++r) {
                    Real* dst = &da[size_t(o.idx[r]) * size_t(o.cols)];
                    const Real* src = &g[int64_t(r) * o.cols];
                    for (int64_t c = 0; c < o.cols; ++c) dst[c] += src[c];
                }
                break;
            }
            case Op::PlaceRows: {
                Real* da = adj_into(o.a);
                for (size_t r = 0; r < o.idx.size(); ++r) {
                    const Real* src = &g[int64_t(o.idx[r]) * o.cols];
                    Real* dst = &da[r * size_t(o.cols)];
                    for (int64_t c = 0; c < o.cols; ++c) dst[c] += src[c];
                }
                break;
            }
            case Op::ConcatRows: {
                const Node& x = nodes_[size_t(o.a)];
                axpy(o.a, g, x.val.size());
                Real* db = adj_into(o.b);
                const Real* src = g + x.val.size();
                for (size_t i = 0; i < nodes_[size_t(o.b)].val.size(); ++i) db[i] += src[i];
                break;
            }
            case Op::AddToRows: {
                axpy(o.a, g, o.val.size());
                Real* db = adj_into(o.b);
                for (int32_t r : o.idx)
                    for (int64_t c = 0; c < o.cols; ++c) db[c] += g[int64_t(r) * o.cols + c];
                break;
            }
            case Op::ReduceSum: {
                Real* da = adj_into(o.a);
                Real s = g[0];
                for (size_t i = 0; i < nodes_[size_t(o.a)].val.size(); ++i) da[i] += s;
                break;
            }
            case Op::WeightedSum: {
                Real* da = adj_into(o.a);
                Real s = g[0];
                for (size_t r = 0; r < o.w.size(); ++r) da[r] += s * o.w[r];
                break;
            }
            case Op::XentRows: {
                Real* da = adj_into(o.a);
                int64_t V = nodes_[size_t(o.a)].cols;
                for (int64_t r = 0; r < o.rows; ++r) {
                    int32_t t = o.idx[size_t(r)];
                    if (t < 0) continue;
                    Real gr = g[r];
                    if (gr == Real(0)) continue;
                    const Real* p = &o.aux[size_t(r * V)];
                    Real* dst = &da[size_t(r * V)];
                    for (int64_t c = 0; c < V; ++c) dst[c] += gr * p[c];
                    dst[t] -= gr;
                }
                break;
            }
        }
    }

    void axpy(int target, const Real* g, size_t n) {
        Real* d = adj_into(target);
        for (size_t i = 0; i < n; ++i) d[i] += g[i];
    }

    void backward_matmul(Node& o, const Real* g) {
        const Node& A = nodes_[size_t(o.a)];
        const Node& B = nodes_[size_t(o.b)];
        int64_t m = o.rows, n = o.cols;
        int64_t k = o.ta ? A.rows : A.cols;
        Real* da = adj_into(o.a);
        Real* db = adj_into(o.b);
        if (!o.ta && !o.tb) {
            gemm<Real>(false, true, m, k, n, Real(1), g, n, B.val.data(), B.cols, Real(1), da, A.cols);
            gemm<Real>(true, false, k, n, m, Real(1), A.val.data(), A.cols, g, n, Real(1), db, B.cols);
        } else if (!o.ta && o.tb) {
            gemm<Real>(false, false, m, k, n, Real(1), g, n, B.val.data(), B.cols, Real(1), da, A.cols);
            gemm<Real>(true, false, n, k, m, Real(1), g, n, A.val.data(), A.cols, Real(1), db, B.cols);
        } else if (o.ta && !o.tb) {
            gemm<Real>(false, true, k, m, n, Real(1), B.val.data(), B.cols, g, n, Real(1), da, A.cols);
            gemm<Real>(false, false, k, n, m, Real(1), A.val.data(), A.cols, g, n, Real(1), db, B.cols);
        } else {
            gemm<Real>(true, true, k, m, n, Real(1), B.val.data(), B.cols, g, n, Real(1), da, A.cols);
            gemm<Real>(true, true, n, k, m, Real(1), g, n, A.val.data(), A.cols, Real(1), db, B.cols);
        }
    }

    void backward_layer_norm(Node& o, const Real* g) {
        const Node& x = nodes_[size_t(o.a)];
        const Node& gn = nodes_[size_t(o.b)];
        Real* dx = adj_into(o.a);
        Real* dg = adj_into(o.b);
        Real* db = adj_into(o.c);
        int64_t C = o.cols;
        std::vector<double> h(static_cast<size_t>(C));
        for (int64_t r = 0; r < o.rows; ++r) {
            double mu = double(o.aux[size_t(2 * r)]);
            double inv = double(o.aux[size_t(2 * r + 1)]);
            const Real* xr = &x.val[size_t(r * C)];
            const Real* gr = &g[r * C];
            double m1 = 0, m2 = 0;
            for (int64_t c = 0; c < C; ++c) {
                double xh = (double(xr[c]) - mu) * inv;
                double hc = double(gr[c]) * double(gn.val[size_t(c)]);
                h[size_t(c)] = hc;
                m1 += hc;
                m2 += hc * xh;
                dg[c] += Real(double(gr[c]) * xh);
                db[c] += gr[c];
            }
            m1 /= double(C);
            m2 /= double(C);
            Real* dxr = &dx[size_t(r * C)];
            for (int64_t c = 0; c < C; ++c) {
                double xh = (double(xr[c]) - mu) * inv;
                dxr[c] += Real(inv * (h[size_t(c)] - m1 - xh * m2));
            }
        }
    }

    void backward_attention(Node& o, const Real* g) {
        const Real* Q = nodes_[size_t(o.a)].val.data();
        const Real* K = nodes_[size_t(o.b)].val.data();
        const Real* V = nodes_[size_t(o.c)].val.data();
        Real* dQ = adj_into(o.a);
        Real* dK = adj_into(o.b);
        Real* dV = adj_into(o.c);
        int B = o.B, T = o.T, H = o.H;
        int64_t D = o.cols, dh = D / H;
        std::vector<double> dp(static_cast<size_t>(T)), ds(static_cast<size_t>(T));
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < H; ++h) {
                int64_t hoff = int64_t(h) * dh;
                const Real* P = &o.aux[size_t(((int64_t(b) * H) + h) * T * T)];
                for (int i = 0; i < T; ++i) {
                    const Real* go = &g[(int64_t(b) * T + i) * D + hoff];
                    const Real* prow = &P[int64_t(i) * T];
                    double sum = 0;
                    for (int j = 0; j <= i; ++j) {
                        const Real* vj = &V[(int64_t(b) * T + j) * D + hoff];
                        double acc = 0;
                        for (int64_t c = 0; c < dh; ++c) acc += double(go[c]) * double(vj[c]);
                        dp[size_t(j)] = acc;
                        sum += double(prow[j]) * acc;
                    }
                    for (int j = 0; j <= i; ++j)
                        ds[size_t(j)] = double(prow[j]) * (dp[size_t(j)] - sum);
                    Real* dqi = &dQ[(int64_t(b) * T + i) * D + hoff];
                    for (int j = 0; j <= i; ++j) {
                        double s = ds[size_t(j)] * double(o.scale);
                        const Real* kj = &K[(int64_t(b) * T + j) * D + hoff];
                        for (int64_t c = 0; c < dh; ++c) dqi[c] += Real(s * double(kj[c]));
                        // Cross-position K/V gradients are skipped under
                        // myopic mode; the position's own row always flows.
                        if (o.myopic && j != i) continue;
                        Real* dkj = &dK[(int64_t(b) * T + j) * D + hoff];
                        const Real* qi = &Q[(int64_t(b) * T + i) * D + hoff];
                        for (int64_t c = 0; c < dh; ++c) dkj[c] += Real(s * double(qi[c]));
                        Real* dvj = &dV[(int64_t(b) * T + j) * D + hoff];
                        Real p = prow[j];
                        for (int64_t c = 0; c < dh; ++c) dvj[c] += p * go[c];
                    }
                }
            }
    }

    // ---- tangent propagation ----

    const Real* tan_or_null(int n) const {
        const Node& nd = nodes_[size_t(n)];
        return nd.tan_dirty ? nd.tan.data() : nullptr;
    }

    Real* tan_into(int n) {
        Node& nd = nodes_[size_t(n)];
        if (nd.tan.size() != nd.val.size()) nd.tan = acquire(nd.val.size());
        std::fill(nd.tan.begin(), nd.tan.end(), Real(0));
        nd.tan_dirty = true;
        return nd.tan.data();
    }

    void forward_tangent(int id, const GradVector<Real>& dir) {
        Node& o = nodes_[size_t(id)];
        switch (o.op) {
            case Op::Leaf: {
                if (o.param_id < 0) return;  // constants carry zero tangent
                const ParamInfo& info = pindex_->entries[size_t(o.param_id)];
                Real* t = tan_into(id);
                const Real* src = dir.flat.data() + info.offset;
                bool any = false;
                for (size_t i = 0; i < o.val.size(); ++i) {
                    t[i] = src[i];
                    any |= (src[i] != Real(0));
                }
                if (!any) o.tan_dirty = false;  // keep sparsity: skip zero streams
                return;
            }
            case Op::Detach:
                return;  // tangent blocked by definition
            case Op::Gather: {
                const Real* ta = tan_or_null(o.a);
                if (!ta) return;
                Real* t = tan_into(id);
                for (size_t r = 0; r < o.idx.size(); ++r)
                    std::memcpy(&t[r * size_t(o.cols)], &ta[size_t(o.idx[r]) * size_t(o.cols)],
                                size_t(o.cols) * sizeof(Real));
                return;
            }
            case Op::Add: {
                const Real* ta = tan_or_null(o.a);
                const Real* tb = tan_or_null(o.b);
                if (!ta && !tb) return;
                Real* t = tan_into(id);
                for (size_t i = 0; i < o.val.size(); ++i)
                    t[i] = (ta ? ta[i] : Real(0)) + (tb ? tb[i] : Real(0));
                return;
            }
            case Op::AddBias: {
                const Real* ta = tan_or_null(o.a);
                const Real* tb = tan_or_null(o.b);
                if (!ta && !tb) return;
                Real* t = tan_into(id);
                for (int64_t r = 0; r < o.rows; ++r)
                    for (int64_t c = 0; c < o.cols; ++c)
                        t[r * o.cols + c] = (ta ? ta[r * o.cols + c] : Real(0)) +
                                            (tb ? tb[c] : Real(0));
                return;
            }
            case Op::Mul: {
                const Real* ta = tan_or_null(o.a);
                const Real* tb = tan_or_null(o.b);
                if (!ta && !tb) return;
                const Node& x = nodes_[size_t(o.a)];
                const Node& y = nodes_[size_t(o.b)];
                Real* t = tan_into(id);
                for (size_t i = 0; i < o.val.size(); ++i)
                    t[i] = (ta ? ta[i] * y.val[i] : Real(0)) + (tb ? tb[i] * x.val[i] : Real(0));
                return;
            }
            case Op::Scale: {
                const Real* ta = tan_or_null(o.a);
                if (!ta) return;
                Real* t = tan_into(id);
                for (size_t i = 0; i < o.val.size(); ++i) t[i] = ta[i] * o.scale;
                return;
            }
            case Op::MatMul: {
                const Real* ta = tan_or_null(o.a);
                const Real* tb = tan_or_null(o.b);
                if (!ta && !tb) return;
                const Node& A = nodes_[size_t(o.a)];
                const Node& B = nodes_[size_t(o.b)];
                int64_t m = o.rows, n = o.cols, k = o.ta ? A.rows : A.cols;
                Real* t = tan_into(id);
                if (ta)
                    gemm<Real>(o.ta, o.tb, m, n, k, Real(1), ta, A.cols, B.val.data(), B.cols,
                               Real(0), t, n);
                if (tb)
                    gemm<Real>(o.ta, o.tb, m, n, k, Real(1), A.val.data(), A.cols, tb, B.cols,
                               ta ? Real(1) : Real(0), t, n);
                return;
            }
            case Op::LayerNorm:
                tangent_layer_norm(o, dir);
                return;
            case Op::Gelu: {
                const Real* ta = tan_or_null(o.a);
                if (!ta) return;
                const Node& x = nodes_[size_t(o.a)];
                Real* t = tan_into(id);
                constexpr Real c0 = Real(0.7978845608028654);
                constexpr Real c1 = Real(0.044715);
                for (size_t i = 0; i < o.val.size(); ++i) {
                    Real xv = x.val[i];
                    Real tt = o.aux[i];
                    Real dy = Real(0.5) * (Real(1) + tt) +
                              Real(0.5) * xv * (Real(1) - tt * tt) * c0 *
                                  (Real(1) + Real(3) * c1 * xv * xv);
                    t[i] = dy * ta[i];
                }
                return;
            }
            case Op::Softmax: {
                const Real* ta = tan_or_null(o.a);
                if (!ta) return;
                Real* t = tan_into(id);
                for (int64_t r = 0; r < o.rows; ++r) {
                    const Real* p = &o.val[size_t(r * o.cols)];
                    const Real* tr = &ta[r * o.cols];
                    double dot = 0;
                    for (int64_t c = 0; c < o.cols; ++c) dot += double(p[c]) * double(tr[c]);
                    for (int64_t c = 0; c < o.cols; ++c)
                        t[r * o.cols + c] = p[c] * (tr[c] - Real(dot));
                }
                return;
            }
            case Op::Attention:
                tangent_attention(o);
                return;
            case Op::GatherRows: {
                const Real* ta = tan_or_null(o.a);
                if (!ta) return;
                Real* t = tan_into(id);
                for (size_t r = 0; r < o.idx.size(); ++r)
                    std::memcpy(&t[r * size_t(o.cols)], &ta[size_t(o.idx[r]) * size_t(o.cols)],
                                size_t(o.cols) * sizeof(Real));
                return;
            }
            case Op::PlaceRows: {
                const Real* ta = tan_or_null(o.a);
                if (!ta) return;
                Real* t = tan_into(id);
                for (size_t r = 0; r < o.idx.size(); ++r)
                    std::memcpy(&t[size_t(o.idx[r]) * size_t(o.cols)], &ta[r * size_t(o.cols)],
                                size_t(o.cols) * sizeof(Real));
                return;
            }
            case Op::ConcatRows: {
                const Real* ta = tan_or_null(o.a);
                const Real* tb = tan_or_null(o.b);
                if (!ta && !tb) return;
                const Node& x = nodes_[size_t(o.a)];
                Real* t = tan_into(id);
                if (ta) std::memcpy(t, ta, x.val.size() * sizeof(Real));
                if (tb)
                    std::memcpy(t + x.val.size(), tb,
                                nodes_[size_t(o.b)].val.size() * sizeof(Real));
                return;
            }
            case Op::AddToRows: {
                const Real* ta = tan_or_null(o.a);
                const Real* tb = tan_or_null(o.b);
                if (!ta && !tb) return;
                Real* t = tan_into(id);
                if (ta) std::memcpy(t, ta, o.val.size() * sizeof(Real));
                if (tb)
                    for (int32_t r : o.idx)
                        for (int64_t c = 0; c < o.cols; ++c) t[int64_t(r) * o.cols + c] += tb[c];
                return;
            }
            case Op::ReduceSum: {
                const Real* ta = tan_or_null(o.a);
                if (!ta) return;
                Real* t = tan_into(id);
                double s = 0;
                for (size_t i = 0; i < nodes_[size_t(o.a)].val.size(); ++i) s += double(ta[i]);
                t[0] = Real(s);
                return;
            }
            case Op::WeightedSum: {
                const Real* ta = tan_or_null(o.a);
                if (!ta) return;
                Real* t = tan_into(id);
                double s = 0;
                for (size_t r = 0; r < o.w.size(); ++r) s += double(o.w[r]) * double(ta[r]);
                t[0] = Real(s);
                return;
            }
            case Op::XentRows: {
                const Real* ta = tan_or_null(o.a);
                if (!ta) return;
                int64_t V = nodes_[size_t(o.a)].cols;
                Real* t = tan_into(id);
                for (int64_t r = 0; r < o.rows; ++r) {
                    int32_t tg = o.idx[size_t(r)];
                    if (tg < 0) {
                        t[r] = Real(0);
                        continue;
                    }
                    const Real* p = &o.aux[size_t(r * V)];
                    const Real* tr = &ta[r * V];
                    double s = 0;
                    for (int64_t c = 0; c < V; ++c) s += double(p[c]) * double(tr[c]);
                    t[r] = Real(s - double(tr[tg]));
                }
                return;
            }
        }
    }

    void tangent_layer_norm(Node& o, const GradVector<Real>&) {
        const Real* tx = tan_or_null(o.a);
        const Real* tg = tan_or_null(o.b);
        const Real* tb = tan_or_null(o.c);
        if (!tx && !tg && !tb) return;
        const Node& x = nodes_[size_t(o.a)];
        const Node& gn = nodes_[size_t(o.b)];
        int64_t C = o.cols;
        Real* t = tan_into(int(&o - nodes_.data()));
        for (int64_t r = 0; r < o.rows; ++r) {
            double mu = double(o.aux[size_t(2 * r)]);
            double inv = double(o.aux[size_t(2 * r + 1)]);
            const Real* xr = &x.val[size_t(r * C)];
            double tmu = 0, tvar = 0;
            if (tx) {
                const Real* txr = &tx[r * C];
                for (int64_t c = 0; c < C; ++c) tmu += double(txr[c]);
                tmu /= double(C);
                for (int64_t c = 0; c < C; ++c)
                    tvar += (double(xr[c]) - mu) * (double(txr[c]) - tmu);
                tvar *= 2.0 / double(C);
            }
            double tinv = -0.5 * inv * inv * inv * tvar;
            for (int64_t c = 0; c < C; ++c) {
                double xh = (double(xr[c]) - mu) * inv;
                double txh = tinv * (double(xr[c]) - mu);
                if (tx) txh += (double(tx[r * C + c]) - tmu) * inv;
                double out = txh * double(gn.val[size_t(c)]);
                if (tg) out += xh * double(tg[c]);
                if (tb) out += double(tb[c]);
                t[r * C + c] = Real(out);
            }
        }
    }

    void tangent_attention(Node& o) {
        const Real* tQ = tan_or_null(o.a);
        const Real* tK = tan_or_null(o.b);
        const Real* tV = tan_or_null(o.c);
        if (!tQ && !tK && !tV) return;
        const Real* Q = nodes_[size_t(o.a)].val.data();
        const Real* K = nodes_[size_t(o.b)].val.data();
        const Real* V = nodes_[size_t(o.c)].val.data();
        int B = o.B, T = o.T, H = o.H;
        int64_t D = o.cols, dh = D / H;
        Real* t = tan_into(int(&o - nodes_.data()));
        std::vector<double> ts(static_cast<size_t>(T)), tp(static_cast<size_t>(T));
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < H; ++h) {
                int64_t hoff = int64_t(h) * dh;
                const Real* P = &o.aux[size_t(((int64_t(b) * H) + h) * T * T)];
                for (int i = 0; i < T; ++i) {
                    const Real* qi = &Q[(int64_t(b) * T + i) * D + hoff];
                    const Real* tqi = tQ ? &tQ[(int64_t(b) * T + i) * D + hoff] : nullptr;
                    const Real* prow = &P[int64_t(i) * T];
                    double mean_ts = 0;
                    for (int j = 0; j <= i; ++j) {
                        const Real* kj = &K[(int64_t(b) * T + j) * D + hoff];
                        const Real* tkj = tK ? &tK[(int64_t(b) * T + j) * D + hoff] : nullptr;
                        double acc = 0;
                        for (int64_t c = 0; c < dh; ++c) {
                            if (tqi) acc += double(tqi[c]) * double(kj[c]);
                            if (tkj) acc += double(qi[c]) * double(tkj[c]);
                        }
                        ts[size_t(j)] = acc * double(o.scale);
                        mean_ts += double(prow[j]) * ts[size_t(j)];
                    }
                    for (int j = 0; j <= i; ++j)
                        tp[size_t(j)] = double(prow[j]) * (ts[size_t(j)] - mean_ts);
                    Real* ti = &t[(int64_t(b) * T + i) * D + hoff];
                    for (int j = 0; j <= i; ++j) {
                        const Real* vj = &V[(int64_t(b) * T + j) * D + hoff];
                        const Real* tvj = tV ? &tV[(int64_t(b) * T + j) * D + hoff] : nullptr;
                        for (int64_t c = 0; c < dh; ++c) {
                            double add = tp[size_t(j)] * double(vj[c]);
                            if (tvj) add += double(prow[j]) * double(tvj[c]);
                            ti[c] += Real(add);
                        }
                    }
                }
            }
    }
};

// ---------------- finite-difference harness ----------------

// Central finite differences of f around `point`, compared against the
// provided analytic gradient. Returns the max relative discrepancy, where the
// denominator is max(|fd|, |analytic|, floor). Non-finite values are rejected.
inline double grad_check(const std::function<double(const std::vector<double>&)>& f,
                         const std::vector<double>& analytic, std::vector<double> point,
                         double step, double floor = 1e-6) {
    if (analytic.size() != point.size())
        throw AutodiffError("grad_check: gradient/point size mismatch");
    if (!(step > 0) || !std::isfinite(step)) throw AutodiffError("grad_check: bad step");
    double worst = 0;
    for (size_t i = 0; i < point.size(); ++i) {
        double orig = point[i];
        point[i] = orig + step;
        double up = f(point);
        point[i] = orig - step;
        double dn = f(point);
        point[i] = orig;
        if (!std::isfinite(up) || !std::isfinite(dn))
            throw AutodiffError("grad_check: non-finite function value");
        double fd = (up - dn) / (2 * step);
        double denom = std::max({std::fabs(fd), std::fabs(analytic[i]), floor});
        worst = std::max(worst, std::fabs(fd - analytic[i]) / denom);
    }
    return worst;
}

}  // namespace gradsplit
