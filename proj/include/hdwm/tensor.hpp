// SPDX-License-Identifier: Apache-2.0
//
// Dense float tensors with reverse-mode autodiff on an explicit tape,
// a decoupled-weight-decay Adam optimizer, and the counter-based RNG
// used for every random draw in the project. Templated on the scalar
// type: training runs in float, gradient-check tests replay in double.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hdwm {

struct ContractViolation : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractViolation(msg);
}

// Runtime toggle for the per-op finite scan. Creation from raw data is
// always validated; op outputs are scanned only when this is on.
inline bool& finite_checks() {
#ifdef NDEBUG
    static bool on = false;
#else
    static bool on = true;
#endif
    return on;
}

// ---------------------------------------------------------------------------
// Rng: splitmix64 stream addressed by (seed, counter). Identical seed and
// call sequence reproduce the draw sequence bit for bit on any platform.
// ---------------------------------------------------------------------------
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), counter_(0) {}

    std::uint64_t next_u64() {
        ++counter_;
        return mix(seed_ + counter_ * 0x9E3779B97F4A7C15ULL);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    int uniform_int(int n) {
        require(n > 0, "uniform_int: n must be positive");
        return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
    }

    // standard normal via Box-Muller; consumes two uniforms per call so the
    // draw sequence is a pure function of (seed, counter)
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // independent child stream
    Rng fork(std::uint64_t stream) const {
        return Rng(mix(seed_ ^ mix(stream + 0x632BE59BD9B4E019ULL)));
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t seed_;
    std::uint64_t counter_;
};

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------
template <typename S>
struct TensorT;

template <typename S>
using TensorPtrT = std::shared_ptr<TensorT<S>>;

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

template <typename S>
struct TensorT {
    std::vector<int> shape;
    std::vector<S> data;
    bool requires_grad = false;
    std::vector<S> grad;       // sized lazily; always matches data when present
    bool tape_output = false;  // produced by a recorded op (not a leaf)

    static std::int64_t numel_of(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int d : shape) {
            require(d > 0, "tensor: shape dims must be positive, got " + shape_str(shape));
            n *= d;
        }
        return n;
    }

    static TensorPtrT<S> create(std::vector<int> shape, std::vector<S> values,
                                bool requires_grad = false) {
        auto t = std::make_shared<TensorT<S>>();
        std::int64_t n = numel_of(shape);
        require(static_cast<std::int64_t>(values.size()) == n,
                "tensor: data length " + std::to_string(values.size()) +
                    " does not match shape " + shape_str(shape));
        for (S v : values) {
            if (!std::isfinite(static_cast<double>(v)))
                throw NumericError("tensor: non-finite value at creation");
        }
        t->shape = std::move(shape);
        t->data = std::move(values);
        t->requires_grad = requires_grad;
        return t;
    }

    static TensorPtrT<S> zeros(std::vector<int> shape, bool requires_grad = false) {
        auto t = std::make_shared<TensorT<S>>();
        t->data.assign(static_cast<std::size_t>(numel_of(shape)), S(0));
        t->shape = std::move(shape);
        t->requires_grad = requires_grad;
        return t;
    }

    static TensorPtrT<S> full(std::vector<int> shape, S value, bool requires_grad = false) {
        auto t = zeros(std::move(shape), requires_grad);
        std::fill(t->data.begin(), t->data.end(), value);
        return t;
    }

    static TensorPtrT<S> scalar(S value, bool requires_grad = false) {
        return create({1}, {value}, requires_grad);
    }

    static TensorPtrT<S> randn(std::vector<int> shape, Rng& rng, S scale = S(1),
                               bool requires_grad = false) {
        auto t = zeros(std::move(shape), requires_grad);
        for (auto& v : t->data) v = static_cast<S>(rng.normal()) * scale;
        return t;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? (shape.empty() ? 1 : shape[0]) : shape[1]; }

    S& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
    S at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), S(0));
    }

    TensorPtrT<S> clone_detached() const {
        auto t = std::make_shared<TensorT<S>>();
        t->shape = shape;
        t->data = data;
        return t;
    }
};

using Tensor = TensorT<float>;
using TensorPtr = TensorPtrT<float>;

// ---------------------------------------------------------------------------
// Tape: reverse-mode recorder. Backward walks nodes in reverse recording
// order exactly once; leaf grads accumulate across calls, non-leaf grads
// are recomputed fresh per call.
// ---------------------------------------------------------------------------
template <typename S>
struct TapeT {
    struct Node {
        const char* op;
        TensorPtrT<S> output;
        std::function<void()> backward;
    };
    std::vector<Node> nodes;
};

template <typename S>
inline thread_local TapeT<S>* g_active_tape = nullptr;

template <typename S>
class TapeScope {
public:
    explicit TapeScope(TapeT<S>& tape) : prev_(g_active_tape<S>) { g_active_tape<S> = &tape; }
    ~TapeScope() { g_active_tape<S> = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    TapeT<S>* prev_;
};

template <typename S>
class NoGradScope {
public:
    NoGradScope() : prev_(g_active_tape<S>) { g_active_tape<S> = nullptr; }
    ~NoGradScope() { g_active_tape<S> = prev_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    TapeT<S>* prev_;
};

namespace detail {

template <typename S>
void maybe_check_finite(const TensorPtrT<S>& t, const char* op) {
    if (!finite_checks()) return;
    for (S v : t->data) {
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError(std::string("non-finite value produced by op ") + op);
    }
}

template <typename S, typename Backward>
void record(const char* op, std::initializer_list<TensorPtrT<S>> inputs,
            const TensorPtrT<S>& out, Backward&& bw) {
    maybe_check_finite(out, op);
    TapeT<S>* tape = g_active_tape<S>;
    if (!tape) return;
    bool any = false;
    for (const auto& in : inputs) any = any || in->requires_grad;
    if (!any) return;
    out->requires_grad = true;
    out->tape_output = true;
    tape->nodes.push_back({op, out, std::forward<Backward>(bw)});
}

template <typename S>
bool wants_grad(const TensorPtrT<S>& t) {
    return t->requires_grad;
}

}  // namespace detail

template <typename S>
void backward(TapeT<S>& tape, const TensorPtrT<S>& loss) {
    require(loss->numel() == 1, "backward: loss must be scalar, got shape " + shape_str(loss->shape));
    require(!tape.nodes.empty(), "backward: tape is empty");
    // fresh pass: clear grads of tape outputs, keep accumulated leaf grads
    for (auto& node : tape.nodes) {
        node.output->ensure_grad();
        node.output->zero_grad();
    }
    loss->ensure_grad();
    loss->grad[0] += S(1);
    for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) it->backward();
}

// ---------------------------------------------------------------------------
// Ops. Shapes are 1-D [n] or 2-D [r,c]; broadcast is allowed only for a
// 1-D right operand against the rows of a 2-D left operand.
// ---------------------------------------------------------------------------

template <typename S>
void check_same_shape(const TensorPtrT<S>& a, const TensorPtrT<S>& b, const char* op) {
    require(a->shape == b->shape, std::string(op) + ": shape mismatch " + shape_str(a->shape) +
                                      " vs " + shape_str(b->shape));
}

template <typename S>
TensorPtrT<S> add(const TensorPtrT<S>& a, const TensorPtrT<S>& b) {
    const bool row_broadcast = (a->shape.size() == 2 && b->shape.size() == 1 &&
                                a->shape[1] == b->shape[0]);
    if (!row_broadcast) check_same_shape(a, b, "add");
    auto out = TensorT<S>::zeros(a->shape);
    if (row_broadcast) {
        int r = a->shape[0], c = a->shape[1];
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                out->data[static_cast<std::size_t>(i) * c + j] =
                    a->data[static_cast<std::size_t>(i) * c + j] + b->data[j];
    } else {
        for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
    }
    detail::record<S>("add", {a, b}, out, [a, b, out, row_broadcast] {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < a->data.size(); ++i) a->grad[i] += out->grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            if (row_broadcast) {
                int r = a->shape[0], c = a->shape[1];
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j)
                        b->grad[j] += out->grad[static_cast<std::size_t>(i) * c + j];
            } else {
                for (std::size_t i = 0; i < b->data.size(); ++i) b->grad[i] += out->grad[i];
            }
        }
    });
    return out;
}

template <typename S>
TensorPtrT<S> sub(const TensorPtrT<S>& a, const TensorPtrT<S>& b) {
    check_same_shape(a, b, "sub");
    auto out = TensorT<S>::zeros(a->shape);
    for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] - b->data[i];
    detail::record<S>("sub", {a, b}, out, [a, b, out] {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < a->data.size(); ++i) a->grad[i] += out->grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < b->data.size(); ++i) b->grad[i] -= out->grad[i];
        }
    });
    return out;
}

template <typename S>
TensorPtrT<S> mul(const TensorPtrT<S>& a, const TensorPtrT<S>& b) {
    check_same_shape(a, b, "mul");
    auto out = TensorT<S>::zeros(a->shape);
    for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] * b->data[i];
    detail::record<S>("mul", {a, b}, out, [a, b, out] {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < a->data.size(); ++i) a->grad[i] += out->grad[i] * b->data[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < b->data.size(); ++i) b->grad[i] += out->grad[i] * a->data[i];
        }
    });
    return out;
}

template <typename S>
TensorPtrT<S> mulc(const TensorPtrT<S>& a, S c) {
    auto out = TensorT<S>::zeros(a->shape);
    for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] * c;
    detail::record<S>("mulc", {a}, out, [a, out, c] {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < a->data.size(); ++i) a->grad[i] += out->grad[i] * c;
    });
    return out;
}

template <typename S>
TensorPtrT<S> addc(const TensorPtrT<S>& a, S c) {
    auto out = TensorT<S>::zeros(a->shape);
    for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] + c;
    detail::record<S>("addc", {a}, out, [a, out] {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < a->data.size(); ++i) a->grad[i] += out->grad[i];
    });
    return out;
}

// C = A * B, or A * B^T when transpose_b is set.
template <typename S>
TensorPtrT<S> matmul(const TensorPtrT<S>& a, const TensorPtrT<S>& b, bool transpose_b = false) {
    require(a->shape.size() == 2 && b->shape.size() == 2,
            "matmul: operands must be 2-D, got " + shape_str(a->shape) + " and " +
                shape_str(b->shape));
    const int m = a->shape[0];
    const int k = a->shape[1];
    const int bk = transpose_b ? b->shape[1] : b->shape[0];
    const int n = transpose_b ? b->shape[0] : b->shape[1];
    require(k == bk, "matmul: inner dims differ, " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape) + (transpose_b ? " (transposed)" : ""));
    auto out = TensorT<S>::zeros({m, n});
    const S* A = a->data.data();
    const S* B = b->data.data();
    S* C = out->data.data();
    if (!transpose_b) {
        for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
                const S av = A[static_cast<std::size_t>(i) * k + p];
                const S* brow = B + static_cast<std::size_t>(p) * n;
                S* crow = C + static_cast<std::size_t>(i) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
    } else {
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                const S* arow = A + static_cast<std::size_t>(i) * k;
                const S* brow = B + static_cast<std::size_t>(j) * k;
                S acc = 0;
                for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
                C[static_cast<std::size_t>(i) * n + j] = acc;
            }
    }
    detail::record<S>("matmul", {a, b}, out, [a, b, out, m, n, k, transpose_b] {
        const S* G = out->grad.data();
        if (a->requires_grad) {
            a->ensure_grad();
            S* GA = a->grad.data();
            const S* B = b->data.data();
            if (!transpose_b) {
                // dA = G * B^T
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        const S* grow = G + static_cast<std::size_t>(i) * n;
                        const S* brow = B + static_cast<std::size_t>(p) * n;
                        S acc = 0;
                        for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        GA[static_cast<std::size_t>(i) * k + p] += acc;
                    }
            } else {
                // dA = G * B
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        const S gv = G[static_cast<std::size_t>(i) * n + j];
                        const S* brow = B + static_cast<std::size_t>(j) * k;
                        S* garow = GA + static_cast<std::size_t>(i) * k;
                        for (int p = 0; p < k; ++p) garow[p] += gv * brow[p];
                    }
            }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            S* GB = b->grad.data();
            const S* A = a->data.data();
            if (!transpose_b) {
                // dB = A^T * G
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        const S av = A[static_cast<std::size_t>(i) * k + p];
                        const S* grow = G + static_cast<std::size_t>(i) * n;
                        S* gbrow = GB + static_cast<std::size_t>(p) * n;
                        for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
            } else {
                // out = A * B^T, dB = G^T * A
                for (int j = 0; j < n; ++j)
                    for (int i = 0; i < m; ++i) {
                        const S gv = G[static_cast<std::size_t>(i) * n + j];
                        const S* arow = A + static_cast<std::size_t>(i) * k;
                        S* gbrow = GB + static_cast<std::size_t>(j) * k;
                        for (int p = 0; p < k; ++p) gbrow[p] += gv * arow[p];
                    }
            }
        }
    });
    return out;
}

template <typename S>
TensorPtrT<S> slice_rows(const TensorPtrT<S>& a, int r0, int nr) {
    require(a->shape.size() == 2, "slice_rows: operand must be 2-D");
    const int r = a->shape[0], c = a->shape[1];
    require(r0 >= 0 && nr > 0 && r0 + nr <= r,
            "slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r0 + nr) +
                ") out of bounds for " + shape_str(a->shape));
    auto out = TensorT<S>::zeros({nr, c});
    std::copy_n(a->data.begin() + static_cast<std::size_t>(r0) * c,
                static_cast<std::size_t>(nr) * c, out->data.begin());
    detail::record<S>("slice_rows", {a}, out, [a, out, r0, c] {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < out->data.size(); ++i)
            a->grad[static_cast<std::size_t>(r0) * c + i] += out->grad[i];
    });
    return out;
}

template <typename S>
TensorPtrT<S> slice_cols(const TensorPtrT<S>& a, int c0, int nc) {
    require(a->shape.size() == 2, "slice_cols: operand must be 2-D");
    const int r = a->shape[0], c = a->shape[1];
    require(c0 >= 0 && nc > 0 && c0 + nc <= c,
            "slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c0 + nc) +
                ") out of bounds for " + shape_str(a->shape));
    auto out = TensorT<S>::zeros({r, nc});
    for (int i = 0; i < r; ++i)
        std::copy_n(a->data.begin() + static_cast<std::size_t>(i) * c + c0, nc,
                    out->data.begin() + static_cast<std::size_t>(i) * nc);
    detail::record<S>("slice_cols", {a}, out, [a, out, c0, nc, r, c] {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < nc; ++j)
                a->grad[static_cast<std::size_t>(i) * c + c0 + j] +=
                    out->grad[static_cast<std::size_t>(i) * nc + j];
    });
    return out;
}

template <typename S>
TensorPtrT<S> concat_rows(const std::vector<TensorPtrT<S>>& parts) {
    require(!parts.empty(), "concat_rows: no parts");
    const int c = parts[0]->cols();
    int r = 0;
    for (const auto& p : parts) {
        require(p->shape.size() == 2 && p->shape[1] == c,
                "concat_rows: column mismatch " + shape_str(p->shape));
        r += p->shape[0];
    }
    auto out = TensorT<S>::zeros({r, c});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->data.begin(), p->data.end(), out->data.begin() + off);
        off += p->data.size();
    }
    bool any = false;
    for (const auto& p : parts) any = any || p->requires_grad;
    TapeT<S>* tape = g_active_tape<S>;
    if (tape && any) {
        out->requires_grad = true;
        out->tape_output = true;
        auto held = parts;
        tape->nodes.push_back({"concat_rows", out, [held, out] {
            std::size_t off = 0;
            for (const auto& p : held) {
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (std::size_t i = 0; i < p->data.size(); ++i)
                        p->grad[i] += out->grad[off + i];
                }
                off += p->data.size();
            }
        }});
    }
    detail::maybe_check_finite(out, "concat_rows");
    return out;
}

template <typename S>
TensorPtrT<S> concat_cols(const std::vector<TensorPtrT<S>>& parts) {
    require(!parts.empty(), "concat_cols: no parts");
    const int r = parts[0]->rows();
    int c = 0;
    for (const auto& p : parts) {
        require(p->shape.size() == 2 && p->shape[0] == r,
                "concat_cols: row mismatch " + shape_str(p->shape));
        c += p->shape[1];
    }
    auto out = TensorT<S>::zeros({r, c});
    int c0 = 0;
    for (const auto& p : parts) {
        const int pc = p->shape[1];
        for (int i = 0; i < r; ++i)
            std::copy_n(p->data.begin() + static_cast<std::size_t>(i) * pc, pc,
                        out->data.begin() + static_cast<std::size_t>(i) * c + c0);
        c0 += pc;
    }
    bool any = false;
    for (const auto& p : parts) any = any || p->requires_grad;
    TapeT<S>* tape = g_active_tape<S>;
    if (tape && any) {
        out->requires_grad = true;
        out->tape_output = true;
        auto held = parts;
        tape->nodes.push_back({"concat_cols", out, [held, out, r, c] {
            int c0 = 0;
            for (const auto& p : held) {
                const int pc = p->shape[1];
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < pc; ++j)
                            p->grad[static_cast<std::size_t>(i) * pc + j] +=
                                out->grad[static_cast<std::size_t>(i) * c + c0 + j];
                }
                c0 += pc;
            }
        }});
    }
    detail::maybe_check_finite(out, "concat_cols");
    return out;
}

// Row-wise layer normalization without affine parameters. A zero-variance
// row maps to zeros (epsilon 1e-5 in the denominator).
template <typename S>
TensorPtrT<S> layernorm(const TensorPtrT<S>& a) {
    const int r = a->shape.size() == 2 ? a->shape[0] : 1;
    const int c = a->shape.size() == 2 ? a->shape[1] : a->shape[0];
    require(c > 0, "layernorm: empty rows");
    auto out = TensorT<S>::zeros(a->shape);
    std::vector<S> inv_sigma(static_cast<std::size_t>(r));
    const S eps = static_cast<S>(1e-5);
    for (int i = 0; i < r; ++i) {
        const S* x = a->data.data() + static_cast<std::size_t>(i) * c;
        S mu = 0;
        for (int j = 0; j < c; ++j) mu += x[j];
        mu /= static_cast<S>(c);
        S var = 0;
        for (int j = 0; j < c; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<S>(c);
        const S is = S(1) / std::sqrt(var + eps);
        inv_sigma[static_cast<std::size_t>(i)] = is;
        S* y = out->data.data() + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) y[j] = (x[j] - mu) * is;
    }
    detail::record<S>("layernorm", {a}, out, [a, out, r, c, inv_sigma] {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int i = 0; i < r; ++i) {
            const S* y = out->data.data() + static_cast<std::size_t>(i) * c;
            const S* g = out->grad.data() + static_cast<std::size_t>(i) * c;
            S* gx = a->grad.data() + static_cast<std::size_t>(i) * c;
            S gmean = 0, gymean = 0;
            for (int j = 0; j < c; ++j) {
                gmean += g[j];
                gymean += g[j] * y[j];
            }
            gmean /= static_cast<S>(c);
            gymean /= static_cast<S>(c);
            const S is = inv_sigma[static_cast<std::size_t>(i)];
            for (int j = 0; j < c; ++j) gx[j] += is * (g[j] - gmean - y[j] * gymean);
        }
    });
    return out;
}

// Row-wise softmax with max subtraction.
template <typename S>
TensorPtrT<S> softmax(const TensorPtrT<S>& a) {
    const int r = a->shape.size() == 2 ? a->shape[0] : 1;
    const int c = a->shape.size() == 2 ? a->shape[1] : a->shape[0];
    auto out = TensorT<S>::zeros(a->shape);
    for (int i = 0; i < r; ++i) {
        const S* x = a->data.data() + static_cast<std::size_t>(i) * c;
        S* y = out->data.data() + static_cast<std::size_t>(i) * c;
        S mx = x[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
        S sum = 0;
        for (int j = 0; j < c; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        const S inv = S(1) / sum;
        for (int j = 0; j < c; ++j) y[j] *= inv;
    }
    detail::record<S>("softmax", {a}, out, [a, out, r, c] {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int i = 0; i < r; ++i) {
            const S* y = out->data.data() + static_cast<std::size_t>(i) * c;
            const S* g = out->grad.data() + static_cast<std::size_t>(i) * c;
            S* gx = a->grad.data() + static_cast<std::size_t>(i) * c;
            S dot = 0;
            for (int j = 0; j < c; ++j) dot += y[j] * g[j];
            for (int j = 0; j < c; ++j) gx[j] += y[j] * (g[j] - dot);
        }
    });
    return out;
}

template <typename S>
TensorPtrT<S> silu(const TensorPtrT<S>& a) {
    auto out = TensorT<S>::zeros(a->shape);
    for (std::size_t i = 0; i < a->data.size(); ++i) {
        const S x = a->data[i];
        out->data[i] = x / (S(1) + std::exp(-x));
    }
    detail::record<S>("silu", {a}, out, [a, out] {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < a->data.size(); ++i) {
            const S x = a->data[i];
            const S sig = S(1) / (S(1) + std::exp(-x));
            a->grad[i] += out->grad[i] * sig * (S(1) + x * (S(1) - sig));
        }
    });
    return out;
}

template <typename S>
TensorPtrT<S> sum(const TensorPtrT<S>& a) {
    S acc = 0;
    for (S v : a->data) acc += v;
    auto out = TensorT<S>::scalar(acc);
    detail::record<S>("sum", {a}, out, [a, out] {
        if (!a->requires_grad) return;
        a->ensure_grad();
        const S g = out->grad[0];
        for (std::size_t i = 0; i < a->data.size(); ++i) a->grad[i] += g;
    });
    return out;
}

template <typename S>
TensorPtrT<S> mean(const TensorPtrT<S>& a) {
    S acc = 0;
    for (S v : a->data) acc += v;
    const S inv = S(1) / static_cast<S>(a->data.size());
    auto out = TensorT<S>::scalar(acc * inv);
    detail::record<S>("mean", {a}, out, [a, out, inv] {
        if (!a->requires_grad) return;
        a->ensure_grad();
        const S g = out->grad[0] * inv;
        for (std::size_t i = 0; i < a->data.size(); ++i) a->grad[i] += g;
    });
    return out;
}

template <typename S>
TensorPtrT<S> sum_sq(const TensorPtrT<S>& a) {
    S acc = 0;
    for (S v : a->data) acc += v * v;
    auto out = TensorT<S>::scalar(acc);
    detail::record<S>("sum_sq", {a}, out, [a, out] {
        if (!a->requires_grad) return;
        a->ensure_grad();
        const S g = out->grad[0];
        for (std::size_t i = 0; i < a->data.size(); ++i) a->grad[i] += S(2) * a->data[i] * g;
    });
    return out;
}

// Constant copy outside the recorded graph.
template <typename S>
TensorPtrT<S> detach(const TensorPtrT<S>& a) {
    return a->clone_detached();
}

// ---------------------------------------------------------------------------
// sinusoidal_embedding: interleaved sin/cos at geometric frequencies from 1
// down to 1/10000. One row of `dim` values per input element.
// ---------------------------------------------------------------------------
template <typename S>
TensorPtrT<S> sinusoidal_embedding(const std::vector<S>& x, int dim) {
    require(dim >= 2 && dim % 2 == 0, "sinusoidal_embedding: dim must be even and >= 2, got " +
                                          std::to_string(dim));
    const int half = dim / 2;
    auto out = TensorT<S>::zeros({static_cast<int>(x.size()), dim});
    for (std::size_t i = 0; i < x.size(); ++i) {
        S* row = out->data.data() + i * static_cast<std::size_t>(dim);
        for (int j = 0; j < half; ++j) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / half);
            const double v = static_cast<double>(x[i]) * freq;
            row[2 * j] = static_cast<S>(std::sin(v));
            row[2 * j + 1] = static_cast<S>(std::cos(v));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Named parameter registry + AdamW
// ---------------------------------------------------------------------------
template <typename S>
struct NamedParamsT {
    std::vector<std::pair<std::string, TensorPtrT<S>>> items;

    void add(const std::string& name, const TensorPtrT<S>& t) {
        t->requires_grad = true;
        items.emplace_back(name, t);
    }

    TensorPtrT<S> find(const std::string& name) const {
        for (const auto& [n, t] : items)
            if (n == name) return t;
        throw ContractViolation("param not found: " + name);
    }

    std::vector<TensorPtrT<S>> tensors() const {
        std::vector<TensorPtrT<S>> out;
        out.reserve(items.size());
        for (const auto& [n, t] : items) out.push_back(t);
        return out;
    }

    std::int64_t count() const {
        std::int64_t n = 0;
        for (const auto& [name, t] : items) n += t->numel();
        return n;
    }

    void zero_grad() const {
        for (const auto& [name, t] : items) t->zero_grad();
    }

    // FNV-1a over the raw value bits, in registry order.
    std::uint64_t fingerprint() const {
        std::uint64_t h = 0xCBF29CE484222325ULL;
        auto eat = [&h](const void* p, std::size_t n) {
            const unsigned char* b = static_cast<const unsigned char*>(p);
            for (std::size_t i = 0; i < n; ++i) {
                h ^= b[i];
                h *= 0x100000001B3ULL;
            }
        };
        for (const auto& [name, t] : items) {
            eat(name.data(), name.size());
            eat(t->data.data(), t->data.size() * sizeof(S));
        }
        return h;
    }

    void copy_from(const NamedParamsT<S>& other) {
        require(items.size() == other.items.size(), "copy_from: parameter list size mismatch");
        for (std::size_t i = 0; i < items.size(); ++i) {
            require(items[i].first == other.items[i].first &&
                        items[i].second->shape == other.items[i].second->shape,
                    "copy_from: parameter mismatch at " + items[i].first);
            items[i].second->data = other.items[i].second->data;
        }
    }
};

using NamedParams = NamedParamsT<float>;

// AdamW with bias correction; weight decay is decoupled and applied
// multiplicatively before the moment update.
template <typename S>
struct AdamWT {
    S lr = static_cast<S>(1e-3);
    S beta1 = static_cast<S>(0.9);
    S beta2 = static_cast<S>(0.999);
    S eps = static_cast<S>(1e-8);
    S weight_decay = 0;
    long step_count = 0;

    std::vector<std::vector<S>> m_;
    std::vector<std::vector<S>> v_;

    void step(const std::vector<TensorPtrT<S>>& params) {
        require(lr >= 0 && beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1 && eps > 0,
                "adamw: invalid hyperparameters");
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                m_[i].assign(params[i]->data.size(), S(0));
                v_[i].assign(params[i]->data.size(), S(0));
            }
        }
        require(m_.size() == params.size(), "adamw: parameter list changed size");
        // reject the whole step before mutating anything
        for (const auto& p : params) {
            if (p->grad.empty()) continue;
            for (S g : p->grad)
                if (!std::isfinite(static_cast<double>(g)))
                    throw NumericError("adamw: non-finite gradient, step rejected");
        }
        ++step_count;
        const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta1), step_count));
        const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta2), step_count));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = *params[i];
            require(m_[i].size() == p.data.size(), "adamw: moment shape mismatch");
            const S decay = S(1) - lr * weight_decay;
            for (std::size_t j = 0; j < p.data.size(); ++j) {
                const S g = p.grad.empty() ? S(0) : p.grad[j];
                p.data[j] *= decay;
                m_[i][j] = beta1 * m_[i][j] + (S(1) - beta1) * g;
                v_[i][j] = beta2 * v_[i][j] + (S(1) - beta2) * g * g;
                const S mhat = m_[i][j] / bc1;
                const S vhat = v_[i][j] / bc2;
                p.data[j] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }
};

using AdamW = AdamWT<float>;

}  // namespace hdwm
