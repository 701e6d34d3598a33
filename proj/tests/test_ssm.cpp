#include <catch2/catch_amalgamated.hpp>

#include "msmu/ssm.hpp"
#include "testing_util.hpp"

using namespace msmu;
using testutil::LossProbe;
using testutil::max_grad_rel_err;
using testutil::random_tensor;

namespace {

// Time-invariant bundle: per-channel constant delta, shared B/C rows.
ScanParams invariant_params(int B, int L, int D, int N, Rng& rng) {
    ScanParams p;
    p.delta = Tensor::zeros({B, L, D});
    p.b_in = Tensor::zeros({B, L, N});
    p.c_out = Tensor::zeros({B, L, N});
    p.a_log = Tensor::zeros({D, N});
    std::vector<double> dts(static_cast<size_t>(D));
    for (auto& v : dts) v = rng.uniform(0.01, 0.3);
    std::vector<double> brow(static_cast<size_t>(N)), crow(static_cast<size_t>(N));
    for (auto& v : brow) v = rng.uniform(-1.0, 1.0);
    for (auto& v : crow) v = rng.uniform(-1.0, 1.0);
    for (int b = 0; b < B; ++b)
        for (int l = 0; l < L; ++l) {
            for (int d = 0; d < D; ++d)
                p.delta.data()[(static_cast<long long>(b) * L + l) * D + d] = dts[static_cast<size_t>(d)];
            for (int n = 0; n < N; ++n) {
                p.b_in.data()[(static_cast<long long>(b) * L + l) * N + n] = brow[static_cast<size_t>(n)];
                p.c_out.data()[(static_cast<long long>(b) * L + l) * N + n] = crow[static_cast<size_t>(n)];
            }
        }
    for (auto& v : p.a_log.data()) v = rng.uniform(-1.0, 1.5);
    return p;
}

}  // namespace

TEST_CASE("zoh scalar cases") {
    // series limit at A = 0
    auto [a1, b1] = zoh_discretize(0.0, 2.0, 0.5);
    CHECK(a1 == 1.0);
    CHECK(b1 == 1.0);

    auto [a2, b2] = zoh_discretize(-1.0, 1.0, 1.0);
    CHECK(a2 == Catch::Approx(std::exp(-1.0)).margin(1e-12));
    CHECK(b2 == Catch::Approx(1.0 - std::exp(-1.0)).margin(1e-12));
    CHECK(a2 == Catch::Approx(0.367879).margin(1e-6));
    CHECK(b2 == Catch::Approx(0.632121).margin(1e-6));

    CHECK_THROWS_AS(zoh_discretize(-1.0, 1.0, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(zoh_discretize(-1.0, 1.0, -0.1), std::invalid_argument);
}

TEST_CASE("zoh Taylor limit: Abar -> I + dt*A at order 2, Bbar -> dt*B") {
    const double a = -1.7, b = 0.8;
    double prev_err_a = 0.0, prev_err_b = 0.0;
    int step = 0;
    for (double dt : {1e-2, 1e-3, 1e-4}) {
        auto [abar, bbar] = zoh_discretize(a, b, dt);
        const double err_a = std::abs(abar - (1.0 + dt * a));
        const double err_b = std::abs(bbar - dt * b);
        if (step > 0) {
            // decimating dt by 10 must shrink the defect by ~100 (order >= 1.9)
            CHECK(std::log10(prev_err_a / err_a) >= 1.9);
            CHECK(std::log10(prev_err_b / err_b) >= 1.9);
        }
        prev_err_a = err_a;
        prev_err_b = err_b;
        ++step;
    }
}

TEST_CASE("zoh tensor form validates and matches scalar route") {
    Tensor a = Tensor::from_data({2}, {-1.0, -0.5});
    Tensor b = Tensor::from_data({2}, {1.0, 2.0});
    Tensor dt = Tensor::from_data({2}, {1.0, 0.25});
    auto [abar, bbar] = zoh_discretize(a, b, dt);
    for (int i = 0; i < 2; ++i) {
        auto [ea, eb] = zoh_discretize(a.data()[i], b.data()[i], dt.data()[i]);
        CHECK(abar.data()[i] == ea);
        CHECK(bbar.data()[i] == eb);
    }
    Tensor bad = Tensor::from_data({2}, {1.0, 0.0});
    CHECK_THROWS_AS(zoh_discretize(a, b, bad), std::invalid_argument);
}

TEST_CASE("scan recurrence single step and integrator limit") {
    SECTION("L = 1 gives y = C * Bbar * x") {
        Rng rng(3);
        ScanParams p = invariant_params(1, 1, 1, 4, rng);
        Tensor u = Tensor::from_data({1, 1, 1}, {0.7});
        Tensor y = scan_recurrence(u, p);
        double expect = 0.0;
        const double dt = p.delta.data()[0];
        for (int n = 0; n < 4; ++n) {
            const double a = -std::exp(p.a_log.data()[static_cast<size_t>(n)]);
            auto [abar, bbar] = zoh_discretize(a, p.b_in.data()[static_cast<size_t>(n)], dt);
            (void)abar;
            expect += p.c_out.data()[static_cast<size_t>(n)] * bbar * 0.7;
        }
        CHECK(y.item() == Catch::Approx(expect).margin(1e-12));
    }
    SECTION("A -> 0 limit accumulates dt * prefix sums") {
        const int L = 12;
        ScanParams p;
        p.delta = Tensor::full({1, L, 1}, 0.25);
        p.b_in = Tensor::full({1, L, 1}, 1.0);
        p.c_out = Tensor::full({1, L, 1}, 1.0);
        p.a_log = Tensor::full({1, 1}, -30.0);  // A = -e^-30, numerically the integrator
        Rng rng(5);
        Tensor u = random_tensor({1, L, 1}, rng);
        Tensor y = scan_recurrence(u, p);
        double run = 0.0;
        for (int t = 0; t < L; ++t) {
            run += u.data()[static_cast<size_t>(t)];
            CHECK(y.data()[static_cast<size_t>(t)] == Catch::Approx(0.25 * run).margin(1e-9));
        }
    }
    SECTION("L = 0 rejected") {
        ScanParams p;
        p.delta = Tensor::zeros({1, 0, 1});
        p.b_in = Tensor::zeros({1, 0, 2});
        p.c_out = Tensor::zeros({1, 0, 2});
        p.a_log = Tensor::zeros({1, 2});
        CHECK_THROWS_AS(scan_recurrence(Tensor::zeros({1, 0, 1}), p), std::invalid_argument);
    }
}

TEST_CASE("kernel coefficients hand cases") {
    SECTION("nilpotent state: Abar = 0") {
        auto kern = ssm_kernel_coeffs({0.0}, {0.8}, {0.5}, 4);
        CHECK(kern[0] == Catch::Approx(0.4));
        for (int j = 1; j < 4; ++j) CHECK(kern[static_cast<size_t>(j)] == 0.0);
    }
    SECTION("geometric kernel (1, 1/2, 1/4)") {
        auto kern = ssm_kernel_coeffs({0.5}, {1.0}, {1.0}, 3);
        CHECK(kern[0] == 1.0);
        CHECK(kern[1] == 0.5);
        CHECK(kern[2] == 0.25);
    }
}

TEST_CASE("kernel route equals scan for time-invariant parameters") {
    Rng rng(11);
    for (int L : {8, 64, 256}) {
        for (int trial = 0; trial < 5; ++trial) {
            const int N = rng.uniform_int(1, 16);
            const int D = rng.uniform_int(1, 3);
            ScanParams p = invariant_params(1, L, D, N, rng);
            Tensor u = random_tensor({1, L, D}, rng);
            Tensor via_scan = scan_recurrence(u, p);
            Tensor via_kernel = ssm_kernel(u, p);
            CHECK(testutil::max_abs_diff(via_scan.data(), via_kernel.data()) <= 1e-8);
        }
    }
}

TEST_CASE("kernel route rejects selective parameters") {
    Rng rng(13);
    ScanParams p = invariant_params(1, 8, 1, 4, rng);
    p.delta.data()[3] += 0.05;  // vary one timestep
    Tensor u = random_tensor({1, 8, 1}, rng);
    CHECK_THROWS_WITH(ssm_kernel(u, p), Catch::Matchers::ContainsSubstring("selectivity"));
}

TEST_CASE("stability: bounded input keeps the scan finite over L = 4096") {
    Rng rng(17);
    const int L = 4096, N = 8;
    ScanParams p = invariant_params(1, L, 1, N, rng);
    Tensor u = random_tensor({1, L, 1}, rng, -1.0, 1.0);
    Tensor y = scan_recurrence(u, p);
    // hidden-state norm bound M * max|Bbar| / (1 - max|Abar|), |y| <= sum|C| * bound
    double max_abar = 0.0, max_bbar = 0.0, sum_c = 0.0;
    const double dt = p.delta.data()[0];
    for (int n = 0; n < N; ++n) {
        const double a = -std::exp(p.a_log.data()[static_cast<size_t>(n)]);
        auto [abar, bbar] = zoh_discretize(a, p.b_in.data()[static_cast<size_t>(n)], dt);
        max_abar = std::max(max_abar, std::abs(abar));
        max_bbar = std::max(max_bbar, std::abs(bbar));
        sum_c += std::abs(p.c_out.data()[static_cast<size_t>(n)]);
    }
    REQUIRE(max_abar < 1.0);
    const double bound = sum_c * max_bbar / (1.0 - max_abar) + 1e-9;
    for (double v : y.data()) {
        REQUIRE(std::isfinite(v));
        CHECK(std::abs(v) <= bound);
    }
}

TEST_CASE("causality and selectivity") {
    Rng rng(19);
    const int L = 16, D = 2, N = 4;
    SECTION("perturbing x_t leaves y_1..y_{t-1} unchanged exactly") {
        ScanParams p = invariant_params(1, L, D, N, rng);
        Tensor u = random_tensor({1, L, D}, rng);
        Tensor y0 = scan_recurrence(u, p);
        const int t = 9;
        u.data()[static_cast<size_t>(t * D)] += 0.5;
        Tensor y1 = scan_recurrence(u, p);
        for (int i = 0; i < t * D; ++i)
            CHECK(y0.data()[static_cast<size_t>(i)] == y1.data()[static_cast<size_t>(i)]);
        bool differs = false;
        for (int i = t * D; i < L * D; ++i)
            differs |= (y0.data()[static_cast<size_t>(i)] != y1.data()[static_cast<size_t>(i)]);
        CHECK(differs);
    }
    SECTION("input-dependent delta: difference at t propagates only to >= t") {
        // delta derived from the input makes the scan selective
        Tensor w_dt = random_tensor({D, D}, rng, 0.1, 0.5);
        auto run = [&](const Tensor& u) {
            ScanParams p;
            p.delta = softplus(linear(u, w_dt));
            p.b_in = Tensor::full({1, L, N}, 0.6);
            p.c_out = Tensor::full({1, L, N}, 0.8);
            p.a_log = Tensor::zeros({D, N});
            return scan_recurrence(u, p);
        };
        Tensor u = random_tensor({1, L, D}, rng);
        Tensor u2 = Tensor::from_data(u.shape(), u.data());
        const int t = 6;
        u2.data()[static_cast<size_t>(t * D + 1)] += 0.3;
        Tensor y0 = run(u);
        Tensor y1 = run(u2);
        for (int i = 0; i < t * D; ++i)
            CHECK(y0.data()[static_cast<size_t>(i)] == y1.data()[static_cast<size_t>(i)]);
        bool differs = false;
        for (int i = t * D; i < L * D; ++i)
            differs |= (y0.data()[static_cast<size_t>(i)] != y1.data()[static_cast<size_t>(i)]);
        CHECK(differs);
    }
}

TEST_CASE("selective scan gradients vs finite differences") {
    Rng rng(23);
    const int B = 1, L = 5, D = 2, N = 3;
    Tensor u = random_tensor({B, L, D}, rng, -1.0, 1.0, true);
    ScanParams p;
    p.delta = random_tensor({B, L, D}, rng, 0.05, 0.4, true);
    p.b_in = random_tensor({B, L, N}, rng, -1.0, 1.0, true);
    p.c_out = random_tensor({B, L, N}, rng, -1.0, 1.0, true);
    p.a_log = random_tensor({D, N}, rng, -1.0, 1.0, true);
    LossProbe probe(B * L * D);
    auto fwd = [&] { return probe(scan_recurrence(u, p)); };
    CHECK(max_grad_rel_err(fwd, u) < 1e-4);
    CHECK(max_grad_rel_err(fwd, p.delta) < 1e-4);
    CHECK(max_grad_rel_err(fwd, p.b_in) < 1e-4);
    CHECK(max_grad_rel_err(fwd, p.c_out) < 1e-4);
    CHECK(max_grad_rel_err(fwd, p.a_log) < 1e-4);
}

TEST_CASE("image <-> sequence adapters") {
    SECTION("raster order") {
        Tensor x = Tensor::from_data({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
        SequenceView v = image_to_sequence(x);
        REQUIRE(v.tokens.shape() == Shape{1, 4, 1});
        for (int i = 0; i < 4; ++i) CHECK(v.tokens.data()[static_cast<size_t>(i)] == i + 1.0);
    }
    SECTION("round trip identity") {
        Rng rng(29);
        Tensor x = random_tensor({2, 3, 4, 5}, rng);
        SequenceView v = image_to_sequence(x);
        Tensor back = sequence_to_image(v);
        CHECK(testutil::max_abs_diff(back.data(), x.data()) == 0.0);
    }
    SECTION("stage-1 map at paper scale records L = 56*56") {
        Tensor x = Tensor::zeros({1, 2, 56, 56});
        SequenceView v = image_to_sequence(x);
        CHECK(v.tokens.dim(1) == 3136);
        CHECK(v.height * v.width == 3136);
    }
    SECTION("mismatched origin shape rejected") {
        SequenceView v;
        v.tokens = Tensor::zeros({1, 12, 3});
        v.height = 3;
        v.width = 5;
        CHECK_THROWS_AS(sequence_to_image(v), std::invalid_argument);
    }
    SECTION("gradients flow through the permutes") {
        Rng rng(31);
        Tensor x = random_tensor({1, 2, 3, 3}, rng, -1.0, 1.0, true);
        LossProbe probe(18);
        auto fwd = [&] { return probe(sequence_to_image(image_to_sequence(x))); };
        CHECK(max_grad_rel_err(fwd, x) < 1e-4);
    }
}

TEST_CASE("mamba block") {
    Rng rng(37);
    MambaOptions opts;
    opts.width = 4;
    opts.state_size = 4;

    SECTION("zero-initialized output projection makes the block an identity") {
        MambaBlock block(opts, rng);
        for (auto& v : block.out_projection().data()) v = 0.0;
        Tensor x = random_tensor({2, 5, 4}, rng);
        Tensor y = block.forward(x);
        CHECK(testutil::max_abs_diff(y.data(), x.data()) == 0.0);
    }
    SECTION("shape contract for arbitrary (B, L, D)") {
        MambaBlock block(opts, rng);
        for (auto [b, l] : {std::pair{1, 3}, {2, 7}, {3, 1}}) {
            Tensor x = random_tensor({b, l, 4}, rng);
            CHECK(block.forward(x).shape() == Shape{b, l, 4});
        }
    }
    SECTION("end-to-end gradient check at B=1, L=6, D=4, N=4") {
        MambaBlock block(opts, rng);
        std::vector<Tensor> params;
        block.collect_params(params, "blk");
        Tensor x = random_tensor({1, 6, 4}, rng, -1.0, 1.0, true);
        LossProbe probe(24);
        auto fwd = [&] { return probe(block.forward(x)); };
        CHECK(max_grad_rel_err(fwd, x, 1e-5, 1e-4) < 1e-3);
        for (Tensor& param : params) {
            INFO(param.name());
            CHECK(max_grad_rel_err(fwd, param, 1e-5, 1e-4) < 1e-3);
        }
    }
}
