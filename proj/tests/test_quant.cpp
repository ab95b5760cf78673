#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "moqe/quant.hpp"

using namespace moqe;

namespace {

Tensor column(std::vector<float> vals) {
    const int64_t n = static_cast<int64_t>(vals.size());
    return Tensor({n, 1}, std::move(vals));
}

Tensor random_matrix(int64_t r, int64_t c, std::mt19937& rng, float scale = 1.0f) {
    std::normal_distribution<float> dist(0.0f, scale);
    Tensor t({r, c});
    for (float& v : t.data) v = dist(rng);
    return t;
}

// Element-wise linear round-trip bound. s/2 holds exactly for the unrounded
// abs-max scale; rounding the scale to binary16 before the division widens
// the clamp-side bound by (2^(b-1)-1) times the scale rounding gap.
double linear_bound(double stored_scale, double exact_scale, int bits) {
    double half = 0.5 * stored_scale;
    double clamp_side = (std::ldexp(1.0, bits - 1) - 0.5) * exact_scale -
                        (std::ldexp(1.0, bits - 1) - 1.0) * stored_scale;
    return std::max(half, clamp_side) + 1e-12;
}

// Brute-force linearly nearest exponent index; on an exact tie the lower
// exponent (larger k) is recorded as `tie_k`.
int oracle_k(double t, int bits, bool& tie, int& tie_k) {
    const int kmax = (1 << (bits - 1)) - 1;
    t = std::clamp(t, std::ldexp(1.0, -kmax), 1.0);
    int best = 0;
    double bestd = 1e300;
    tie = false;
    for (int k = 0; k <= kmax; ++k) {
        double d = std::fabs(t - std::ldexp(1.0, -k));
        if (d < bestd) {
            bestd = d;
            best = k;
            tie = false;
        } else if (d == bestd) {
            tie = true;
            tie_k = std::max(best, k);
        }
    }
    return best;
}

double grid_search_log_mse(const std::vector<float>& vals, int bits) {
    double amax = 0.0;
    for (float v : vals) amax = std::max(amax, static_cast<double>(std::fabs(v)));
    double best = 1e300;
    for (int i = 0; i < 10000; ++i) {
        double s = (0.1 + 1.9 * static_cast<double>(i) / 9999.0) * amax;
        double acc = 0.0;
        for (float v : vals) {
            double d = (v < 0 ? -1.0 : 1.0) * s * std::ldexp(1.0, -log_exponent_index(v, s, bits));
            double e = v - d;
            acc += e * e;
        }
        best = std::min(best, acc / static_cast<double>(vals.size()));
    }
    return best;
}

double mse_with_scale(const std::vector<float>& vals, double s, int bits) {
    double acc = 0.0;
    for (float v : vals) {
        double d = (v < 0 ? -1.0 : 1.0) * s * std::ldexp(1.0, -log_exponent_index(v, s, bits));
        acc += (v - d) * (v - d);
    }
    return acc / static_cast<double>(vals.size());
}

}  // namespace

TEST_CASE("linear_scales reference values") {
    CHECK(linear_scales(column({0.5f, -1.0f, 0.25f}), 2, Granularity::PerChannel)[0] ==
          0.66650390625f);
    CHECK(linear_scales(column({0.0f, 0.0f}), 4, Granularity::PerChannel)[0] == 0.0f);
    CHECK(linear_scales(column({7.5f}), 4, Granularity::PerChannel)[0] == 1.0f);
}

TEST_CASE("quantize_linear reference codes") {
    QuantizedTensor qt = quantize_linear(column({0.5f, -1.0f, 0.25f}), 2, Granularity::PerChannel);
    CHECK(qt.codes.codes == std::vector<int8_t>{1, -2, 0});

    Tensor zero({3, 2});
    QuantizedTensor zq = quantize_linear(zero, 4, Granularity::PerChannel);
    for (int8_t q : zq.codes.codes) CHECK(q == 0);
    CHECK(dequantize(zq) == zero);

    // +7.5 steps rounds up then clamps; -7.5 steps stays in range
    QuantizedTensor cl = quantize_linear(column({1.0f, -1.0f}), 4, Granularity::PerChannel);
    CHECK(cl.codes.codes == std::vector<int8_t>{7, -8});
}

TEST_CASE("dequantize reference values") {
    QuantizedTensor qt;
    qt.scheme = Scheme::LinearAbsMax;
    qt.bits = 2;
    qt.granularity = Granularity::PerChannel;
    qt.shape = {3, 1};
    qt.codes = CodeArray{2, {1, -2, 0}};
    qt.scales = {0.66650390625f};
    Tensor d = dequantize(qt);
    CHECK(d.data[0] == 0.66650390625f);
    CHECK(d.data[1] == -1.3330078125f);
    CHECK(d.data[2] == 0.0f);

    QuantizedTensor lg;
    lg.scheme = Scheme::LogScale;
    lg.bits = 3;
    lg.granularity = Granularity::PerTensor;
    lg.shape = {1, 1};
    lg.codes = CodeArray{3, {log_encode(false, 2, 3)}};
    lg.scales = {1.0f};
    CHECK(dequantize(lg).data[0] == 0.25f);
}

TEST_CASE("quantize_log reference exponents") {
    // s = max|a| = 1; 0.3 -> ceil(log2(0.2)) = -2 -> 0.25
    Tensor a = column({0.3f, 1.0f});
    QuantizedTensor qt = quantize_log(a, 3, Granularity::PerChannel, LogScaleMode::AbsMax);
    Tensor d = dequantize(qt);
    CHECK(d.data[0] == 0.25f);
    CHECK(d.data[1] == 1.0f);  // abs-max element maps to exponent 0

    // below the clip floor: t clipped to 0.125, exponent floor of the range
    Tensor b = column({0.001f, 1.0f});
    Tensor db = dequantize(quantize_log(b, 3, Granularity::PerChannel, LogScaleMode::AbsMax));
    CHECK(db.data[0] == 0.125f);
}

TEST_CASE("log zero column convention") {
    Tensor z({4, 1});
    QuantizedTensor qt = quantize_log(z, 3, Granularity::PerChannel, LogScaleMode::AbsMax);
    CHECK(qt.scales[0] == 0.0f);
    CHECK(dequantize(qt) == z);
}

TEST_CASE("fit_log_scale: single nonzero value is exact") {
    CHECK(fit_log_scale({0.75f}, 3) == 0.75f);
    CHECK(fit_log_scale({-0.5f, 0.0f}, 4) == 0.5f);
}

TEST_CASE("fit_log_scale: exact powers of two are a fixed point") {
    std::vector<float> vals{1.0f, 0.5f, 0.25f, 0.125f};
    float s = fit_log_scale(vals, 4);
    CHECK(s == 1.0f);
    CHECK(mse_with_scale(vals, s, 4) == 0.0);
}

TEST_CASE("fit_log_scale: heavy-tailed column beats abs-max and matches grid search") {
    std::mt19937 rng(42);
    std::student_t_distribution<double> heavy(3.0);
    std::vector<float> vals(1000);
    for (float& v : vals) v = static_cast<float>(heavy(rng) * 0.1);

    float s_fit = fit_log_scale(vals, 3);
    double amax = 0.0;
    for (float v : vals) amax = std::max(amax, static_cast<double>(std::fabs(v)));
    double mse_fit = mse_with_scale(vals, s_fit, 3);
    double mse_absmax = mse_with_scale(vals, round_to_binary16(static_cast<float>(amax)), 3);
    double mse_grid = grid_search_log_mse(vals, 3);

    CHECK(mse_fit <= mse_absmax);
    CHECK(mse_fit <= mse_grid * 1.01);
}

TEST_CASE("fit_log_scale rejects all-zero input") {
    CHECK_THROWS_AS(fit_log_scale({0.0f, 0.0f}, 3), std::invalid_argument);
}

TEST_CASE("quant_error reference cases") {
    // 2-bit reference column with hand-known reconstruction
    Tensor a2 = column({0.5f, -1.0f, 0.25f});
    ErrorReport r = quant_error(a2, quantize_linear(a2, 2, Granularity::PerChannel));
    const double d0 = 0.66650390625, d1 = -1.3330078125, d2 = 0.0;
    const double e0 = 0.5 - d0, e1 = -1.0 - d1, e2 = 0.25 - d2;
    const double sum_sq = e0 * e0 + e1 * e1 + e2 * e2;
    CHECK(r.max_abs_err == doctest::Approx(std::fabs(e1)).epsilon(1e-12));
    CHECK(r.mse == doctest::Approx(sum_sq / 3.0).epsilon(1e-12));
    CHECK(r.relative_frobenius_err ==
          doctest::Approx(std::sqrt(sum_sq / 1.3125)).epsilon(1e-12));

    Tensor z({3, 3});
    ErrorReport zr = quant_error(z, quantize_linear(z, 4, Granularity::PerTensor));
    CHECK(zr.max_abs_err == 0.0);
    CHECK(zr.mse == 0.0);

    std::mt19937 rng(17);
    Tensor m = random_matrix(64, 64, rng);
    QuantizedTensor qm = quantize_linear(m, 4, Granularity::PerChannel);
    ErrorReport rm = quant_error(m, qm);
    double max_s = 0.0;
    for (float s : qm.scales) max_s = std::max(max_s, static_cast<double>(s));
    CHECK(rm.max_abs_err <= (0.5 + 8.0 / 2048.0) * max_s);

    CHECK_THROWS_AS(quant_error(Tensor({2, 2}), qm), std::invalid_argument);
}

TEST_CASE("property: linear round-trip bound, all bit widths and granularities") {
    std::mt19937 rng(2024);
    for (int bits : {2, 3, 4, 8}) {
        for (Granularity g : {Granularity::PerChannel, Granularity::PerTensor}) {
            for (int trial = 0; trial < 50; ++trial) {
                Tensor a = random_matrix(16, 8, rng);
                QuantizedTensor qt = quantize_linear(a, bits, g);
                Tensor d = dequantize(qt);
                for (int64_t i = 0; i < a.rows(); ++i)
                    for (int64_t j = 0; j < a.cols(); ++j) {
                        double s = qt.scales[g == Granularity::PerTensor ? 0 : j];
                        double amax = 0.0;
                        if (g == Granularity::PerTensor) {
                            for (float v : a.data) amax = std::max(amax, std::fabs((double)v));
                        } else {
                            for (int64_t r = 0; r < a.rows(); ++r)
                                amax = std::max(amax, std::fabs((double)a.at(r, j)));
                        }
                        double s_exact = 2.0 * amax / ((1 << bits) - 1);
                        double err = std::fabs((double)a.at(i, j) - d.at(i, j));
                        REQUIRE(err <= linear_bound(s, s_exact, bits));
                    }
            }
        }
    }
}

TEST_CASE("property: per-channel scales never exceed the per-tensor scale") {
    std::mt19937 rng(55);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor a = random_matrix(12, 6, rng);
        for (int bits : {2, 3, 4, 8}) {
            auto chan = linear_scales(a, bits, Granularity::PerChannel);
            auto full = linear_scales(a, bits, Granularity::PerTensor);
            for (float s : chan) REQUIRE(s <= full[0]);
        }
    }
}

TEST_CASE("property: log exponent matches linear-nearest oracle away from midpoints") {
    std::mt19937 rng(77);
    std::uniform_real_distribution<double> dist(1e-4, 1.2);
    for (int bits : {2, 3, 4, 8}) {
        for (int trial = 0; trial < 5000; ++trial) {
            double t = dist(rng);
            bool tie = false;
            int tie_k = 0;
            int k_oracle = oracle_k(t, bits, tie, tie_k);
            int k_formula = log_exponent_index(static_cast<float>(t), 1.0, bits);
            if (tie)
                REQUIRE(k_formula == tie_k);  // midpoint: lower exponent, larger k
            else
                REQUIRE(k_formula == k_oracle);
        }
        // explicit midpoints t = 1.5 * 2^-k pick the lower exponent (index k)
        const int kmax = (1 << (bits - 1)) - 1;
        for (int k = 1; k <= kmax; ++k) {
            double t = 1.5 * std::ldexp(1.0, -k);
            REQUIRE(log_exponent_index(static_cast<float>(t), 1.0, bits) == k);
        }
    }
}

TEST_CASE("property: sign preservation") {
    std::mt19937 rng(88);
    Tensor a = random_matrix(20, 5, rng);
    for (int bits : {2, 4}) {
        Tensor dl = dequantize(quantize_linear(a, bits, Granularity::PerChannel));
        Tensor dg = dequantize(quantize_log(a, bits, Granularity::PerChannel, LogScaleMode::AbsMax));
        for (size_t i = 0; i < a.data.size(); ++i) {
            if (a.data[i] > 0) CHECK(dl.data[i] >= 0.0f);
            if (a.data[i] < 0) CHECK(dl.data[i] <= 0.0f);
            if (a.data[i] != 0.0f)
                CHECK(std::signbit(dg.data[i]) == std::signbit(a.data[i]));
        }
    }
}

TEST_CASE("property: linear mse monotone in bits") {
    std::mt19937 rng(99);
    for (int trial = 0; trial < 25; ++trial) {
        Tensor a = random_matrix(32, 16, rng);
        double prev = 1e300;
        for (int bits : {2, 3, 4, 8}) {
            double mse = quant_error(a, quantize_linear(a, bits, Granularity::PerChannel)).mse;
            REQUIRE(mse <= prev);
            prev = mse;
        }
    }
}

TEST_CASE("determinism: identical inputs give bit-identical results") {
    std::mt19937 rng(123);
    Tensor a = random_matrix(24, 8, rng);
    CHECK(quantize_linear(a, 3, Granularity::PerChannel) ==
          quantize_linear(a, 3, Granularity::PerChannel));
    CHECK(quantize_log(a, 4, Granularity::PerTensor, LogScaleMode::MseOptimal) ==
          quantize_log(a, 4, Granularity::PerTensor, LogScaleMode::MseOptimal));
}

TEST_CASE("non-finite and non-2D inputs rejected") {
    Tensor bad({1, 1}, {std::numeric_limits<float>::infinity()});
    CHECK_THROWS_AS(quantize_linear(bad, 4, Granularity::PerChannel), std::invalid_argument);
    Tensor vec({4}, {1, 2, 3, 4});
    CHECK_THROWS_AS(quantize_linear(vec, 4, Granularity::PerChannel), std::invalid_argument);
}
