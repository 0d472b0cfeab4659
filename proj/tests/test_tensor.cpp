// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "hdwm/tensor.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

using namespace hdwm;

namespace {

// Central finite-difference oracle. `fn` maps the inputs to a scalar; every
// input with requires_grad set is checked coordinate by coordinate against
// the tape gradient.
template <typename S>
struct OpCase {
    std::string name;
    std::function<std::vector<TensorPtrT<S>>(Rng&)> make_inputs;
    std::function<TensorPtrT<S>(const std::vector<TensorPtrT<S>>&)> fn;
};

template <typename S>
void check_gradients(const OpCase<S>& c, int instances, double h, double tol,
                     std::uint64_t seed) {
    Rng root(seed);
    for (int inst = 0; inst < instances; ++inst) {
        Rng rng = root.fork(static_cast<std::uint64_t>(inst));
        auto inputs = c.make_inputs(rng);
        TapeT<S> tape;
        TensorPtrT<S> loss;
        {
            TapeScope<S> scope(tape);
            loss = c.fn(inputs);
            backward(tape, loss);
        }
        for (auto& in : inputs) {
            if (!in->requires_grad) continue;
            for (std::size_t j = 0; j < in->data.size(); ++j) {
                const S keep = in->data[j];
                in->data[j] = keep + static_cast<S>(h);
                const double fp = static_cast<double>(c.fn(inputs)->data[0]);
                in->data[j] = keep - static_cast<S>(h);
                const double fm = static_cast<double>(c.fn(inputs)->data[0]);
                in->data[j] = keep;
                const double fd = (fp - fm) / (2.0 * h);
                const double an = static_cast<double>(in->grad[j]);
                const double err =
                    std::fabs(an - fd) / std::max({1.0, std::fabs(an), std::fabs(fd)});
                INFO(c.name, " instance ", inst, " coord ", j, " analytic=", an, " fd=", fd);
                CHECK(err <= tol);
            }
        }
    }
}

template <typename S>
TensorPtrT<S> weighted_sum(const TensorPtrT<S>& out, const TensorPtrT<S>& w) {
    return sum(mul(out, w));
}

template <typename S>
std::vector<OpCase<S>> all_op_cases() {
    std::vector<OpCase<S>> cases;
    auto rand_t = [](Rng& rng, std::vector<int> shape, bool grad) {
        return TensorT<S>::randn(std::move(shape), rng, S(0.8), grad);
    };
    auto two_plus_w = [rand_t](Rng& rng) {
        int r = 2 + rng.uniform_int(3), c = 2 + rng.uniform_int(3);
        return std::vector<TensorPtrT<S>>{rand_t(rng, {r, c}, true), rand_t(rng, {r, c}, true),
                                          rand_t(rng, {r, c}, false)};
    };
    auto one_plus_w = [rand_t](Rng& rng) {
        int r = 2 + rng.uniform_int(3), c = 2 + rng.uniform_int(3);
        return std::vector<TensorPtrT<S>>{rand_t(rng, {r, c}, true), rand_t(rng, {r, c}, false)};
    };
    cases.push_back({"add",
                     two_plus_w,
                     [](const auto& in) { return weighted_sum(add(in[0], in[1]), in[2]); }});
    cases.push_back({"add_row_broadcast",
                     [rand_t](Rng& rng) {
                         int r = 2 + rng.uniform_int(3), c = 2 + rng.uniform_int(3);
                         return std::vector<TensorPtrT<S>>{rand_t(rng, {r, c}, true),
                                                           rand_t(rng, {c}, true),
                                                           rand_t(rng, {r, c}, false)};
                     },
                     [](const auto& in) { return weighted_sum(add(in[0], in[1]), in[2]); }});
    cases.push_back({"sub",
                     two_plus_w,
                     [](const auto& in) { return weighted_sum(sub(in[0], in[1]), in[2]); }});
    cases.push_back({"mul",
                     two_plus_w,
                     [](const auto& in) { return weighted_sum(mul(in[0], in[1]), in[2]); }});
    cases.push_back({"mulc",
                     one_plus_w,
                     [](const auto& in) { return weighted_sum(mulc(in[0], S(1.7)), in[1]); }});
    cases.push_back({"addc",
                     one_plus_w,
                     [](const auto& in) { return weighted_sum(addc(in[0], S(0.4)), in[1]); }});
    cases.push_back({"matmul",
                     [rand_t](Rng& rng) {
                         int m = 2 + rng.uniform_int(3), k = 2 + rng.uniform_int(3),
                             n = 2 + rng.uniform_int(3);
                         return std::vector<TensorPtrT<S>>{rand_t(rng, {m, k}, true),
                                                           rand_t(rng, {k, n}, true),
                                                           rand_t(rng, {m, n}, false)};
                     },
                     [](const auto& in) { return weighted_sum(matmul(in[0], in[1]), in[2]); }});
    cases.push_back({"matmul_transpose_b",
                     [rand_t](Rng& rng) {
                         int m = 2 + rng.uniform_int(3), k = 2 + rng.uniform_int(3),
                             n = 2 + rng.uniform_int(3);
                         return std::vector<TensorPtrT<S>>{rand_t(rng, {m, k}, true),
                                                           rand_t(rng, {n, k}, true),
                                                           rand_t(rng, {m, n}, false)};
                     },
                     [](const auto& in) {
                         return weighted_sum(matmul(in[0], in[1], true), in[2]);
                     }});
    cases.push_back({"slice_rows",
                     [rand_t](Rng& rng) {
                         return std::vector<TensorPtrT<S>>{rand_t(rng, {4, 3}, true),
                                                           rand_t(rng, {2, 3}, false)};
                     },
                     [](const auto& in) {
                         return weighted_sum(slice_rows(in[0], 1, 2), in[1]);
                     }});
    cases.push_back({"slice_cols",
                     [rand_t](Rng& rng) {
                         return std::vector<TensorPtrT<S>>{rand_t(rng, {3, 5}, true),
                                                           rand_t(rng, {3, 2}, false)};
                     },
                     [](const auto& in) {
                         return weighted_sum(slice_cols(in[0], 2, 2), in[1]);
                     }});
    cases.push_back({"concat_rows",
                     [rand_t](Rng& rng) {
                         return std::vector<TensorPtrT<S>>{rand_t(rng, {2, 3}, true),
                                                           rand_t(rng, {3, 3}, true),
                                                           rand_t(rng, {5, 3}, false)};
                     },
                     [](const auto& in) {
                         return weighted_sum(concat_rows<S>({in[0], in[1]}), in[2]);
                     }});
    cases.push_back({"concat_cols",
                     [rand_t](Rng& rng) {
                         return std::vector<TensorPtrT<S>>{rand_t(rng, {3, 2}, true),
                                                           rand_t(rng, {3, 4}, true),
                                                           rand_t(rng, {3, 6}, false)};
                     },
                     [](const auto& in) {
                         return weighted_sum(concat_cols<S>({in[0], in[1]}), in[2]);
                     }});
    cases.push_back({"layernorm",
                     [rand_t](Rng& rng) {
                         int r = 2 + rng.uniform_int(3), c = 3 + rng.uniform_int(3);
                         auto x = rand_t(rng, {r, c}, true);
                         // keep rows away from the zero-variance singularity
                         for (int i = 0; i < r; ++i)
                             for (int j = 0; j < c; ++j)
                                 x->data[static_cast<std::size_t>(i) * c + j] +=
                                     static_cast<S>(0.9 * j);
                         return std::vector<TensorPtrT<S>>{x, rand_t(rng, {r, c}, false)};
                     },
                     [](const auto& in) { return weighted_sum(layernorm(in[0]), in[1]); }});
    cases.push_back({"softmax",
                     one_plus_w,
                     [](const auto& in) { return weighted_sum(softmax(in[0]), in[1]); }});
    cases.push_back({"silu",
                     one_plus_w,
                     [](const auto& in) { return weighted_sum(silu(in[0]), in[1]); }});
    cases.push_back({"sum",
                     one_plus_w,
                     [](const auto& in) { return sum(in[0]); }});
    cases.push_back({"mean",
                     one_plus_w,
                     [](const auto& in) { return mean(in[0]); }});
    cases.push_back({"sum_sq",
                     one_plus_w,
                     [](const auto& in) { return mulc(sum_sq(in[0]), S(0.25)); }});
    return cases;
}

// Small random MLP used by the whole-net gradient check.
template <typename S>
TensorPtrT<S> three_layer_net(const std::vector<TensorPtrT<S>>& in) {
    // in: x [1,4], W1 [4,8], W2 [8,8], W3 [8,2]
    auto h1 = silu(matmul(in[0], in[1]));
    auto h2 = silu(layernorm(matmul(h1, in[2])));
    auto y = matmul(h2, in[3]);
    return mulc(sum_sq(y), S(0.5));
}

}  // namespace

TEST_CASE("matmul identity and hand-computed values") {
    auto I = Tensor::create({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Rng rng(7);
    auto A = Tensor::randn({3, 3}, rng);
    auto out = matmul(I, A);
    for (std::size_t i = 0; i < A->data.size(); ++i) CHECK(out->data[i] == A->data[i]);

    auto a = Tensor::create({2, 2}, {1, 2, 3, 4});
    auto b = Tensor::create({2, 2}, {5, 6, 7, 8});
    auto c = matmul(a, b);
    CHECK(c->data == std::vector<float>{19, 22, 43, 50});
}

TEST_CASE("shape mismatch reports both shapes") {
    auto a = Tensor::zeros({2, 3});
    auto b = Tensor::zeros({4, 2});
    try {
        matmul(a, b);
        FAIL("expected ContractViolation");
    } catch (const ContractViolation& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,2]") != std::string::npos);
    }
    CHECK_THROWS_AS(add(a, b), ContractViolation);
}

TEST_CASE("layernorm of a constant vector is zero") {
    auto x = Tensor::full({6}, 3.25f);
    auto y = layernorm(x);
    for (float v : y->data) CHECK(v == 0.0f);
    auto m = Tensor::full({2, 4}, -1.5f);
    auto ym = layernorm(m);
    for (float v : ym->data) CHECK(v == 0.0f);
}

TEST_CASE("backward basics: x^2 and sum(Wx)") {
    auto x = Tensor::create({1, 1}, {3.0f}, true);
    TapeT<float> tape;
    {
        TapeScope<float> scope(tape);
        auto loss = sum_sq(x);
        backward(tape, loss);
    }
    CHECK(x->grad[0] == doctest::Approx(6.0f));

    auto W = Tensor::create({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    auto xv = Tensor::create({3, 1}, {10, 20, 30});
    TapeT<float> tape2;
    {
        TapeScope<float> scope(tape2);
        auto loss = sum(matmul(W, xv));
        backward(tape2, loss);
    }
    // d sum(Wx) / dW_ij = x_j
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j) CHECK(W->grad[i * 3 + j] == doctest::Approx(xv->data[j]));
}

TEST_CASE("backward contract violations") {
    auto x = Tensor::create({2}, {1, 2}, true);
    TapeT<float> tape;
    TapeScope<float> scope(tape);
    auto y = mulc(x, 2.0f);
    CHECK_THROWS_AS(backward(tape, y), ContractViolation);  // non-scalar loss
    TapeT<float> empty;
    auto s = sum(y);
    CHECK_THROWS_AS(backward(empty, s), ContractViolation);  // empty tape
}

TEST_CASE("repeated backward accumulates leaf grads") {
    auto x = Tensor::create({1, 1}, {3.0f}, true);
    TapeT<float> tape;
    TapeScope<float> scope(tape);
    auto loss = sum_sq(x);
    backward(tape, loss);
    backward(tape, loss);
    CHECK(x->grad[0] == doctest::Approx(12.0f));
    x->zero_grad();
    backward(tape, loss);
    CHECK(x->grad[0] == doctest::Approx(6.0f));
}

TEST_CASE("backward linearity in the loss") {
    Rng rng(11);
    auto x = Tensor::randn({3, 3}, rng, 1.0f, true);
    auto w1 = Tensor::randn({3, 3}, rng);
    auto w2 = Tensor::randn({3, 3}, rng);

    TapeT<float> tape;
    {
        TapeScope<float> scope(tape);
        auto loss = add(sum(mul(x, w1)), sum(mul(x, w2)));
        backward(tape, loss);
    }
    std::vector<float> combined = x->grad;

    x->zero_grad();
    TapeT<float> ta;
    {
        TapeScope<float> scope(ta);
        backward(ta, sum(mul(x, w1)));
    }
    TapeT<float> tb;
    {
        TapeScope<float> scope(tb);
        backward(tb, sum(mul(x, w2)));
    }
    for (std::size_t i = 0; i < combined.size(); ++i)
        CHECK(combined[i] == doctest::Approx(x->grad[i]).epsilon(1e-6));
}

TEST_CASE("finite-difference oracle, 32-bit forward") {
    for (const auto& c : all_op_cases<float>()) check_gradients<float>(c, 20, 3e-3, 1e-3, 101);
}

TEST_CASE("finite-difference oracle, 64-bit verification mode") {
    for (const auto& c : all_op_cases<double>()) check_gradients<double>(c, 20, 1e-5, 1e-6, 202);
}

TEST_CASE("three-layer net gradient vs finite differences (64-bit replay)") {
    OpCase<double> net{
        "three_layer_net",
        [](Rng& rng) {
            return std::vector<TensorPtrT<double>>{
                TensorT<double>::randn({1, 4}, rng, 0.9, true),
                TensorT<double>::randn({4, 8}, rng, 0.5, true),
                TensorT<double>::randn({8, 8}, rng, 0.5, true),
                TensorT<double>::randn({8, 2}, rng, 0.5, true)};
        },
        [](const auto& in) { return three_layer_net<double>(in); }};
    check_gradients<double>(net, 3, 1e-3, 1e-3, 303);
}

TEST_CASE("gradients only reach tensors that require grad") {
    auto x = Tensor::create({2, 2}, {1, 2, 3, 4}, true);
    auto c = Tensor::create({2, 2}, {5, 6, 7, 8});  // constant
    TapeT<float> tape;
    {
        TapeScope<float> scope(tape);
        backward(tape, sum(mul(x, c)));
    }
    CHECK(c->grad.empty());
    CHECK(x->grad.size() == 4);
}

TEST_CASE("adamw decoupled decay and edge cases") {
    auto make_param = [] {
        auto p = Tensor::create({1}, {1.0f}, true);
        p->ensure_grad();
        return p;
    };

    SUBCASE("zero gradient decays param multiplicatively") {
        auto p = make_param();
        AdamW opt;
        opt.lr = 0.1f;
        opt.weight_decay = 0.01f;
        opt.step({p});
        CHECK(p->data[0] == doctest::Approx(0.999f).epsilon(1e-7));
    }
    SUBCASE("lr 0 leaves params unchanged") {
        auto p = make_param();
        p->grad[0] = 5.0f;
        AdamW opt;
        opt.lr = 0.0f;
        opt.weight_decay = 0.01f;
        opt.step({p});
        CHECK(p->data[0] == 1.0f);
    }
    SUBCASE("NaN gradient rejects the step without mutation") {
        auto p = make_param();
        p->grad[0] = std::nanf("");
        AdamW opt;
        opt.lr = 0.1f;
        CHECK_THROWS_AS(opt.step({p}), NumericError);
        CHECK(p->data[0] == 1.0f);
        CHECK(opt.step_count == 0);
    }
    SUBCASE("two identical runs are bit-identical") {
        auto run = [] {
            Rng rng(42);
            auto p = Tensor::randn({4, 4}, rng, 1.0f, true);
            AdamW opt;
            opt.lr = 0.05f;
            opt.weight_decay = 0.01f;
            for (int i = 0; i < 10; ++i) {
                TapeT<float> tape;
                TapeScope<float> scope(tape);
                auto target = Tensor::randn({4, 4}, rng);
                auto loss = sum_sq(sub(p, target));
                p->zero_grad();
                backward(tape, loss);
                opt.step({p});
            }
            return p->data;
        };
        CHECK(run() == run());
    }
}

TEST_CASE("sinusoidal embedding") {
    SUBCASE("x = 0 gives sin 0 / cos 1") {
        auto e = sinusoidal_embedding<float>({0.0f}, 8);
        for (int j = 0; j < 4; ++j) {
            CHECK(e->data[2 * j] == 0.0f);
            CHECK(e->data[2 * j + 1] == 1.0f);
        }
    }
    SUBCASE("odd dim rejected") {
        CHECK_THROWS_AS(sinusoidal_embedding<float>({1.0f}, 7), ContractViolation);
        CHECK_THROWS_AS(sinusoidal_embedding<float>({1.0f}, 0), ContractViolation);
    }
    SUBCASE("injective on a 1e3-point grid") {
        const int n = 1000;
        std::vector<float> xs(n);
        for (int i = 0; i < n; ++i) xs[i] = -3.0f + 6.0f * static_cast<float>(i) / (n - 1);
        auto e = sinusoidal_embedding<float>(xs, 8);
        bool collision = false;
        for (int i = 0; i < n && !collision; ++i)
            for (int j = i + 1; j < n; ++j) {
                bool equal = true;
                for (int d = 0; d < 8; ++d)
                    if (e->data[i * 8 + d] != e->data[j * 8 + d]) {
                        equal = false;
                        break;
                    }
                if (equal) {
                    collision = true;
                    break;
                }
            }
        CHECK_FALSE(collision);
    }
    SUBCASE("sin channels are odd in x") {
        auto ep = sinusoidal_embedding<float>({0.73f}, 12);
        auto en = sinusoidal_embedding<float>({-0.73f}, 12);
        for (int j = 0; j < 6; ++j) {
            CHECK(en->data[2 * j] == doctest::Approx(-ep->data[2 * j]));
            CHECK(en->data[2 * j + 1] == doctest::Approx(ep->data[2 * j + 1]));
        }
    }
}

TEST_CASE("rng determinism and forking") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(123);
    auto f1 = c.fork(1), f2 = c.fork(2);
    CHECK(f1.next_u64() != f2.next_u64());
    // forks are independent of the parent's counter position
    Rng d(123);
    d.next_u64();
    CHECK(d.fork(1).next_u64() == Rng(123).fork(1).next_u64());
}

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor::create({2, 2}, {1, 2, 3}), ContractViolation);
    CHECK_THROWS_AS(Tensor::create({2}, {1.0f, std::nanf("")}), NumericError);
    auto t = Tensor::zeros({3, 4});
    CHECK(t->numel() == 12);
    t->ensure_grad();
    CHECK(t->grad.size() == t->data.size());
}

TEST_CASE("named params fingerprint tracks values") {
    Rng rng(5);
    NamedParams p;
    p.add("w", Tensor::randn({3, 3}, rng));
    p.add("b", Tensor::zeros({3}));
    CHECK(p.count() == 12);
    auto f1 = p.fingerprint();
    p.find("w")->data[0] += 1.0f;
    CHECK(p.fingerprint() != f1);
    CHECK_THROWS_AS(p.find("missing"), ContractViolation);
}
