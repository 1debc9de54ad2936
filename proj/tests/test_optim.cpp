#include <gtest/gtest.h>

#include <cmath>

#include "steer/optim.hpp"

using namespace steer;

TEST(CosineLr, Endpoints) {
    EXPECT_EQ(cosine_lr(0, 1000, 1e-4, 1e-3), 1e-4);
    EXPECT_NEAR(cosine_lr(1000, 1000, 1e-4, 1e-3), 1e-7, 1e-20);
    EXPECT_NEAR(cosine_lr(500, 1000, 1e-4, 1e-3), (1e-4 + 1e-7) / 2, 1e-19);
}

TEST(CosineLr, MonotoneAndErrors) {
    double prev = 1.0;
    for (std::size_t s = 0; s <= 77; ++s) {
        double lr = cosine_lr(s, 77, 1e-4, 1e-3);
        EXPECT_LE(lr, prev);
        prev = lr;
    }
    EXPECT_THROW(cosine_lr(11, 10, 1e-4, 1e-3), std::out_of_range);
    EXPECT_EQ(cosine_lr(0, 0, 0.5, 1e-3), 0.5);
}

TEST(AdamW, ZeroGradientNoDecayLeavesParams) {
    Tensor x = Tensor::vector({1.0, -2.0, 3.0});
    Tensor g = Tensor::zeros({3});
    AdamWState st;
    for (int i = 0; i < 5; ++i) adamw_step({{"x", &x, &g}}, st, 1e-2, {0.9, 0.999, 1e-8, 0.0});
    EXPECT_EQ(x, Tensor::vector({1.0, -2.0, 3.0}));
    EXPECT_EQ(st.step, 5u);
}

TEST(AdamW, MatchesScalarReference) {
    // Reference: plain scalar recursion written out independently.
    const double lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 1e-2;
    double xr = 0.7, m = 0.0, v = 0.0;
    Tensor x = Tensor::vector({0.7});
    AdamWState st;
    const double grads[] = {1.0, 1.0, -0.5, 2.0, 0.25};
    for (int t = 1; t <= 5; ++t) {
        double g = grads[t - 1];
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        double step = (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
        xr = xr - lr * wd * xr - lr * step;
        Tensor gt = Tensor::vector({g});
        adamw_step({{"x", &x, &gt}}, st, lr, {b1, b2, eps, wd});
        EXPECT_NEAR(x[0], xr, 1e-15);
    }
}

TEST(AdamW, FirstStepIsSignedLearningRate) {
    Tensor x = Tensor::vector({0.0});
    Tensor g = Tensor::vector({1.0});
    AdamWState st;
    adamw_step({{"x", &x, &g}}, st, 1e-4, {0.9, 0.999, 1e-8, 0.0});
    EXPECT_NEAR(x[0], -1e-4 / (1.0 + 1e-8), 1e-18);
}

TEST(AdamW, DecoupledDecayShrinksParameter) {
    Tensor x = Tensor::vector({2.0});
    Tensor g = Tensor::zeros({1});
    AdamWState st;
    adamw_step({{"x", &x, &g}}, st, 1e-2, {0.9, 0.999, 1e-8, 0.1});
    EXPECT_NEAR(x[0], 2.0 - 1e-2 * 0.1 * 2.0, 1e-15);
}

TEST(AdamW, NanGradientNamesParameterAndWritesNothing) {
    Tensor a = Tensor::vector({1.0}), b = Tensor::vector({1.0});
    Tensor ga = Tensor::vector({0.5}), gb = Tensor::vector({std::nan("")});
    AdamWState st;
    try {
        adamw_step({{"alpha", &a, &ga}, {"decoder.w2", &b, &gb}}, st, 1e-2);
        FAIL() << "expected an error";
    } catch (const std::domain_error& e) {
        EXPECT_NE(std::string(e.what()).find("decoder.w2"), std::string::npos);
    }
    EXPECT_EQ(a[0], 1.0);
    EXPECT_EQ(st.step, 0u);
    Tensor wrong = Tensor::zeros({2});
    EXPECT_THROW(adamw_step({{"alpha", &a, &wrong}}, st, 1e-2), DimensionError);
}
