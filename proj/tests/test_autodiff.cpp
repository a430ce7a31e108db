#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mtprompt/grad_check.hpp"
#include "mtprompt/loss_ops.hpp"
#include "mtprompt/nn_ops.hpp"
#include "mtprompt/ops.hpp"
#include "mtprompt/rng.hpp"

using namespace mtp;

TEST_CASE("grad_check on an exact linear function is near machine precision") {
    Rng rng(55);
    auto x = Tensor<double>::uniform({7}, rng, -2, 2);
    const double err = grad_check([](Tape<double>& t, const Tensor<double>& v) { return sum_all(t, v); }, x);
    CHECK(err < 1e-10);
}

TEST_CASE("backward: linear case grad is ones") {
    Tape<double> t;
    auto x = Tensor<double>::from({3}, {2.0, -1.0, 5.0}, true);
    auto loss = sum_all(t, x);
    t.backward(loss);
    for (int i = 0; i < 3; ++i) CHECK(x.grad()[static_cast<size_t>(i)] == 1.0);
}

TEST_CASE("backward: quadratic analytic derivative") {
    Tape<double> t;
    auto x = Tensor<double>::from({2}, {1.0, 2.0}, true);
    auto loss = sum_all(t, mul(t, x, x));
    t.backward(loss);
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 4.0);
}

TEST_CASE("backward: detached leaf has no grad") {
    Tape<double> t;
    auto x = Tensor<double>::from({2}, {1.0, 2.0}, true);
    auto d = Tensor<double>::from({2}, {3.0, 4.0}, false);
    auto loss = sum_all(t, mul(t, x, d));
    t.backward(loss);
    CHECK(x.grad()[0] == 3.0);
    CHECK_FALSE(d.grad_allocated());
}

TEST_CASE("backward: non-scalar loss rejected, off-tape loss rejected") {
    Tape<double> t;
    auto x = Tensor<double>::from({2}, {1.0, 2.0}, true);
    auto y = mul(t, x, x);
    CHECK_THROWS_AS(t.backward(y), ContractError);
    auto leaf = Tensor<double>::scalar(1.0);
    CHECK_THROWS_AS(t.backward(leaf), ContractError);
}

TEST_CASE("backward twice without zeroing doubles leaf grads exactly") {
    Tape<double> t;
    auto x = Tensor<double>::from({2}, {0.3, -0.7}, true);
    auto h = gelu(t, matmul(t, reshape(t, x, {1, 2}), Tensor<double>::from({2, 2}, {1, 2, -1, 0.5})));
    auto loss = mean_all(t, h);
    t.backward(loss);
    std::vector<double> once(x.grad().begin(), x.grad().end());
    t.backward(loss);
    CHECK(x.grad()[0] == 2.0 * once[0]);
    CHECK(x.grad()[1] == 2.0 * once[1]);
}

TEST_CASE("gradients accumulate additively across fan-out") {
    Tape<double> t;
    auto x = Tensor<double>::from({2}, {1.0, 2.0}, true);
    auto a = scale(t, x, 2.0);
    auto b = scale(t, x, 3.0);
    auto loss = sum_all(t, add(t, a, b));
    t.backward(loss);
    CHECK(x.grad()[0] == 5.0);
    CHECK(x.grad()[1] == 5.0);
}

namespace {

// grad_check trials per op over random inputs in [-2, 2]. A linear ballast
// term keeps every coordinate's gradient O(1): central differences cannot
// resolve relative error below ~1e-10/|grad|, so near-cancelling coordinates
// would otherwise dominate the max with pure FD round-off.
template <typename F>
double check_op(F&& f, std::vector<int> shape, Rng& rng, int trials = 100) {
    auto anchored = [&](Tape<double>& t, const Tensor<double>& x) {
        return add(t, f(t, x), scale(t, sum_all(t, x), 10.0));
    };
    double worst = 0;
    for (int i = 0; i < trials; ++i) {
        auto x = Tensor<double>::uniform(shape, rng, -2, 2);
        worst = std::max(worst, grad_check(anchored, x, 1e-5));
    }
    return worst;
}

} // namespace

TEST_CASE("per-op gradient checks stay under 1e-6") {
    Rng rng(42);

    auto b = Tensor<double>::uniform({4, 5}, rng, -2, 2);
    CHECK(check_op([&](Tape<double>& t, const Tensor<double>& x) { return sum_all(t, matmul(t, x, b)); },
                   {3, 4}, rng) < 1e-6);

    auto a2 = Tensor<double>::uniform({3, 4}, rng, -2, 2);
    CHECK(check_op([&](Tape<double>& t, const Tensor<double>& x) { return sum_all(t, matmul(t, a2, x)); },
                   {4, 5}, rng) < 1e-6);

    auto other = Tensor<double>::uniform({3, 4}, rng, -2, 2);
    CHECK(check_op([&](Tape<double>& t, const Tensor<double>& x) {
              return sum_all(t, mul(t, add(t, x, other), sub(t, x, other)));
          },
          {3, 4}, rng) < 1e-6);

    CHECK(check_op([&](Tape<double>& t, const Tensor<double>& x) {
              return mean_all(t, gelu(t, scale(t, x, 1.7)));
          },
          {3, 4}, rng) < 1e-6);

    // weight the softmax/mean outputs so the check exercises off-diagonal terms
    auto w6 = Tensor<double>::uniform({4, 6}, rng, -2, 2);
    CHECK(check_op([&](Tape<double>& t, const Tensor<double>& x) {
              return sum_all(t, mul(t, softmax_rows(t, x), w6));
          },
          {4, 6}, rng) < 1e-6);

    auto gamma = Tensor<double>::uniform({6}, rng, 0.5, 2);
    auto beta = Tensor<double>::uniform({6}, rng, -1, 1);
    auto wln = Tensor<double>::uniform({4, 6}, rng, -2, 2);
    CHECK(check_op([&](Tape<double>& t, const Tensor<double>& x) {
              return sum_all(t, mul(t, layer_norm(t, x, gamma, beta), wln));
          },
          {4, 6}, rng) < 1e-6);
    CHECK(check_op([&](Tape<double>& t, const Tensor<double>& g) {
              auto x = Tensor<double>::from({2, 6}, {1, 2, 3, -1, 0.5, 2, -2, 1, 0.3, 0.7, 1.1, -0.4});
              return sum_all(t, mul(t, layer_norm(t, x, g, beta), slice_rows(t, wln, 0, 2)));
          },
          {6}, rng) < 1e-6);

    CHECK(check_op([&](Tape<double>& t, const Tensor<double>& x) {
              return sum_all(t, mul(t, transpose(t, x), b));
          },
          {5, 4}, rng) < 1e-6);

    auto wcat = Tensor<double>::uniform({7, 4}, rng, -2, 2);
    CHECK(check_op([&](Tape<double>& t, const Tensor<double>& x) {
              auto c = concat_rows(t, {x, slice_rows(t, x, 0, 3)});
              return sum_all(t, mul(t, c, wcat));
          },
          {4, 4}, rng) < 1e-6);

    auto wcc = Tensor<double>::uniform({3, 6}, rng, -2, 2);
    CHECK(check_op([&](Tape<double>& t, const Tensor<double>& x) {
              auto c = concat_cols(t, {x, slice_cols(t, x, 1, 3)});
              return sum_all(t, mul(t, c, wcc));
          },
          {3, 4}, rng) < 1e-6);

    auto wrv = Tensor<double>::uniform({5, 3}, rng, -2, 2);
    auto xrv = Tensor<double>::uniform({5, 3}, rng, -2, 2);
    CHECK(check_op([&](Tape<double>& t, const Tensor<double>& v) {
              return sum_all(t, mul(t, add_rowvec(t, xrv, v), wrv));
          },
          {3}, rng) < 1e-6);

    auto wmr = Tensor<double>::uniform({1, 4}, rng, -2, 2);
    CHECK(check_op([&](Tape<double>& t, const Tensor<double>& x) {
              return sum_all(t, mul(t, mean_rows(t, x), wmr));
          },
          {6, 4}, rng) < 1e-6);

    CHECK(check_op([&](Tape<double>& t, const Tensor<double>& x) {
              auto r = reshape(t, x, {2, 6});
              return mean_all(t, mul(t, r, r));
          },
          {3, 4}, rng) < 1e-6);

    auto wsc = Tensor<double>::uniform({3, 4}, rng, -2, 2);
    CHECK(check_op([&](Tape<double>& t, const Tensor<double>& w) {
              return sum_all(t, scale_by_entry(t, w, 1, wsc));
          },
          {2, 2}, rng) < 1e-6);
    CHECK(check_op([&](Tape<double>& t, const Tensor<double>& x) {
              auto w = Tensor<double>::from({2}, {0.7, -1.3});
              return sum_all(t, scale_by_entry(t, w, 0, x));
          },
          {3, 4}, rng) < 1e-6);
}

TEST_CASE("per-op gradient checks: spatial and attention ops") {
    Rng rng(77);

    auto anchored = [](auto&& f) {
        return [f](Tape<double>& t, const Tensor<double>& x) {
            return add(t, f(t, x), scale(t, sum_all(t, x), 10.0));
        };
    };

    auto wt = Tensor<double>::uniform({3, 2, 2, 4}, rng, -1, 1);
    auto bias = Tensor<double>::uniform({4}, rng, -1, 1);
    auto wout = Tensor<double>::uniform({6, 8, 4}, rng, -1, 1);
    auto wsum = [&](Tape<double>& t, const Tensor<double>& y) {
        return sum_all(t, mul(t, y, wout));
    };
    // input, weight and bias routes separately
    double worst = 0;
    for (int i = 0; i < 30; ++i) {
        auto x = Tensor<double>::uniform({3, 4, 3}, rng, -2, 2);
        worst = std::max(worst, grad_check(anchored([&](Tape<double>& t, const Tensor<double>& v) {
            return wsum(t, conv_transpose2d(t, v, wt, bias, 2));
        }), x, 1e-5));
    }
    CHECK(worst < 1e-6);
    auto x0 = Tensor<double>::uniform({3, 4, 3}, rng, -2, 2);
    CHECK(grad_check(anchored([&](Tape<double>& t, const Tensor<double>& w) {
              return wsum(t, conv_transpose2d(t, x0, w, bias, 2));
          }), wt.clone(), 1e-5) < 1e-6);
    CHECK(grad_check(anchored([&](Tape<double>& t, const Tensor<double>& bb) {
              return wsum(t, conv_transpose2d(t, x0, wt, bb, 2));
          }), bias.clone(), 1e-5) < 1e-6);

    auto wbl = Tensor<double>::uniform({6, 8, 3}, rng, -1, 1);
    double worst_b = 0;
    for (int i = 0; i < 30; ++i) {
        auto x = Tensor<double>::uniform({3, 4, 3}, rng, -2, 2);
        worst_b = std::max(worst_b, grad_check(anchored([&](Tape<double>& t, const Tensor<double>& v) {
            return sum_all(t, mul(t, bilinear_upsample2x(t, v), wbl));
        }), x, 1e-5));
    }
    CHECK(worst_b < 1e-6);

    const int sites = 3, heads = 2, tasks = 3, d = 4;
    auto wsa = Tensor<double>::uniform({sites * tasks, d}, rng, -1, 1);
    auto qf = Tensor<double>::uniform({sites * tasks, d}, rng, -1, 1);
    auto kf = Tensor<double>::uniform({sites * tasks, d}, rng, -1, 1);
    auto xf = Tensor<double>::uniform({sites * tasks, d}, rng, -1, 1);
    double worst_q = 0, worst_k = 0, worst_x = 0;
    for (int i = 0; i < 30; ++i) {
        auto r = Tensor<double>::uniform({sites * tasks, d}, rng, -2, 2);
        worst_q = std::max(worst_q, grad_check(anchored([&](Tape<double>& t, const Tensor<double>& v) {
            return sum_all(t, mul(t, site_task_attention(t, v, kf, xf, heads, sites), wsa));
        }), r.clone(), 1e-5));
        worst_k = std::max(worst_k, grad_check(anchored([&](Tape<double>& t, const Tensor<double>& v) {
            return sum_all(t, mul(t, site_task_attention(t, qf, v, xf, heads, sites), wsa));
        }), r.clone(), 1e-5));
        worst_x = std::max(worst_x, grad_check(anchored([&](Tape<double>& t, const Tensor<double>& v) {
            return sum_all(t, mul(t, site_task_attention(t, qf, kf, v, heads, sites), wsa));
        }), r.clone(), 1e-5));
    }
    CHECK(worst_q < 1e-6);
    CHECK(worst_k < 1e-6);
    CHECK(worst_x < 1e-6);
}

TEST_CASE("per-op gradient checks: loss primitives") {
    Rng rng(123);
    auto anchored = [](auto&& f) {
        return [f](Tape<double>& t, const Tensor<double>& x) {
            return add(t, f(t, x), scale(t, sum_all(t, x), 10.0));
        };
    };
    std::vector<int32_t> labels = {0, 2, 1, 255, 2, 0};
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
        auto x = Tensor<double>::uniform({6, 3}, rng, -2, 2);
        worst = std::max(worst, grad_check(anchored([&](Tape<double>& t, const Tensor<double>& v) {
            return cross_entropy_map(t, v, labels);
        }), x, 1e-5));
    }
    CHECK(worst < 1e-6);

    auto gt = Tensor<double>::uniform({5, 3}, rng, -2, 2);
    std::vector<uint8_t> mask = {1, 0, 1, 1, 0};
    double worst_l1 = 0;
    for (int i = 0; i < 100; ++i) {
        auto x = Tensor<double>::uniform({5, 3}, rng, -2, 2);
        worst_l1 = std::max(worst_l1, grad_check(anchored([&](Tape<double>& t, const Tensor<double>& v) {
            return l1_map(t, v, gt, mask);
        }), x, 1e-5));
    }
    CHECK(worst_l1 < 1e-6);

    std::vector<uint8_t> targets = {1, 0, 0, 1, 1, 0, 1, 0};
    double worst_bce = 0;
    for (int i = 0; i < 100; ++i) {
        auto x = Tensor<double>::uniform({8}, rng, -2, 2);
        worst_bce = std::max(worst_bce, grad_check(anchored([&](Tape<double>& t, const Tensor<double>& v) {
            return bce_logits_map(t, v, targets);
        }), x, 1e-5));
    }
    CHECK(worst_bce < 1e-6);
}

TEST_CASE("grad_check rejects non-finite function values") {
    auto f = [](Tape<double>& t, const Tensor<double>& x) {
        auto y = sum_all(t, x);
        y.data()[0] = std::numeric_limits<double>::quiet_NaN();
        return y;
    };
    auto x = Tensor<double>::from({2}, {1.0, 2.0});
    CHECK_THROWS_AS((void)grad_check(f, x, 1e-6), std::runtime_error);
}
