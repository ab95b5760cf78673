#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "moqe/analysis.hpp"

using namespace moqe;

namespace {

const std::vector<std::vector<int32_t>> kProbe = {{1, 2, 3, 4, 5, 6, 7, 8},
                                                  {42, 17, 901, 3, 3, 250}};

Tensor flat(std::vector<float> vals) {
    const int64_t n = static_cast<int64_t>(vals.size());
    return Tensor({n}, std::move(vals));
}

}  // namespace

TEST_CASE("weight_stats: hand-computed box plot with one outlier") {
    DistributionStats s = weight_stats(flat({1, 2, 3, 4, 5, 100}));
    CHECK(s.min == 1.0);
    CHECK(s.max == 100.0);
    CHECK(s.q1 == doctest::Approx(2.25).epsilon(1e-12));
    CHECK(s.median == doctest::Approx(3.5).epsilon(1e-12));
    CHECK(s.q3 == doctest::Approx(4.75).epsilon(1e-12));
    // upper fence q3 + 1.5*iqr = 8.5 < max, lower fence below min -> clamp
    CHECK(s.whisker_low == 1.0);
    CHECK(s.whisker_high == doctest::Approx(8.5).epsilon(1e-12));
    CHECK(s.n_outliers == 1);
}

TEST_CASE("weight_stats: symmetric data has symmetric quartiles") {
    DistributionStats s = weight_stats(flat({-2, -1, 0, 1, 2}));
    CHECK(s.median == 0.0);
    CHECK(s.q1 == -s.q3);
    CHECK(s.n_outliers == 0);
    CHECK(s.whisker_low == -2.0);
    CHECK(s.whisker_high == 2.0);
}

TEST_CASE("weight_stats: single value and empty input") {
    DistributionStats s = weight_stats(flat({3.0f}));
    CHECK(s.min == 3.0);
    CHECK(s.q1 == 3.0);
    CHECK(s.median == 3.0);
    CHECK(s.max == 3.0);
    CHECK_THROWS_AS(weight_stats(Tensor{}), std::invalid_argument);
}

TEST_CASE("skewness: reference value for [0,0,0,1]") {
    // mean .25, m2 = 3/16, m3 = 3/32 -> g1 = 2/sqrt(3)
    CHECK(skewness(flat({0, 0, 0, 1})) ==
          doctest::Approx(2.0 / std::sqrt(3.0)).epsilon(1e-12));
}

TEST_CASE("skewness: invariances and error cases") {
    Tensor base = flat({0.1f, -0.4f, 2.0f, 0.7f, -1.1f, 0.3f});
    double g = skewness(base);
    Tensor scaled = base;
    for (float& v : scaled.data) v *= 3.0f;
    CHECK(skewness(scaled) == doctest::Approx(g).epsilon(1e-6));
    Tensor neg = base;
    for (float& v : neg.data) v = -v;
    CHECK(skewness(neg) == doctest::Approx(-g).epsilon(1e-9));
    CHECK_THROWS_AS(skewness(flat({1.0f})), std::invalid_argument);
    CHECK_THROWS_AS(skewness(flat({2.0f, 2.0f, 2.0f})), std::invalid_argument);
}

TEST_CASE("compare_forward: identical results mean zero degradation") {
    ModelSpec spec = ModelSpec::toy();
    Checkpoint ckpt = build_random_checkpoint(spec, 8);
    ForwardResult r = model_forward(kProbe, ckpt, spec);
    Degradation d = compare_forward(r, r);
    CHECK(d.logit_mse == 0.0);
    CHECK(d.mean_kl == 0.0);
    CHECK(d.hidden_cosine == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("compare_forward: KL is positive for genuinely different logits") {
    ModelSpec spec = ModelSpec::toy();
    Checkpoint a = build_random_checkpoint(spec, 1);
    Checkpoint b = build_random_checkpoint(spec, 2);
    Degradation d = compare_forward(model_forward(kProbe, a, spec),
                                    model_forward(kProbe, b, spec));
    CHECK(d.logit_mse > 0.0);
    CHECK(d.mean_kl > 0.0);
    CHECK(d.hidden_cosine < 1.0);
}

TEST_CASE("group_sensitivity leaves the input checkpoint untouched") {
    ModelSpec spec = ModelSpec::toy();
    Checkpoint ckpt = build_random_checkpoint(spec, 3);
    Checkpoint copy = ckpt;
    SensitivityReport r = group_sensitivity(ckpt, spec, kProbe, LayerGroup::ExpertFFN, 4,
                                            Scheme::LinearAbsMax, Granularity::PerChannel);
    CHECK(ckpt == copy);
    CHECK(!r.group_absent);
    CHECK(r.bits == 4);
    CHECK(r.logit_mse >= 0.0);
    CHECK(r.weight_error.mse > 0.0);
    CHECK(r.target == std::string("expert_ffn"));
}

TEST_CASE("group_sensitivity flags an absent group") {
    ModelSpec spec = ModelSpec::dense_of(ModelSpec::toy());
    Checkpoint ckpt = build_random_checkpoint(spec, 3);
    SensitivityReport r = group_sensitivity(ckpt, spec, kProbe, LayerGroup::ExpertFFN, 4,
                                            Scheme::LinearAbsMax, Granularity::PerChannel);
    CHECK(r.group_absent);
    CHECK(r.logit_mse == 0.0);
}

TEST_CASE("sensitivity is deterministic") {
    ModelSpec spec = ModelSpec::toy();
    Checkpoint ckpt = build_random_checkpoint(spec, 9);
    auto a = group_sensitivity(ckpt, spec, kProbe, LayerGroup::ExpertFFN, 2,
                               Scheme::LinearAbsMax, Granularity::PerChannel);
    auto b = group_sensitivity(ckpt, spec, kProbe, LayerGroup::ExpertFFN, 2,
                               Scheme::LinearAbsMax, Granularity::PerChannel);
    CHECK(a.logit_mse == b.logit_mse);
    CHECK(a.mean_kl == b.mean_kl);
    CHECK(a.hidden_cosine == b.hidden_cosine);
}

TEST_CASE("granularity: an outlier column hurts per-tensor much more") {
    std::mt19937 rng(4);
    std::normal_distribution<float> dist(0.0f, 0.1f);
    Tensor a({64, 8});
    for (float& v : a.data) v = dist(rng);
    for (int64_t i = 0; i < 64; ++i) a.at(i, 3) *= 10.0f;
    auto [chan, tens] = granularity_comparison(a, 4, Scheme::LinearAbsMax);
    CHECK(chan.mse < tens.mse);
    CHECK(chan.relative_frobenius_err < tens.relative_frobenius_err);
}

TEST_CASE("granularity: uniform columns make the two nearly equal") {
    std::mt19937 rng(5);
    std::normal_distribution<float> dist(0.0f, 0.1f);
    Tensor a({128, 16});
    for (float& v : a.data) v = dist(rng);
    auto [chan, tens] = granularity_comparison(a, 8, Scheme::LinearAbsMax);
    CHECK(chan.mse <= tens.mse * 1.05);
    CHECK(tens.mse <= chan.mse * 2.0);
}

TEST_CASE("synthetic checkpoint: dense fc2 strongly negative-skewed, experts near-symmetric") {
    ModelSpec spec = ModelSpec::toy();
    Checkpoint ckpt = make_synthetic_checkpoint(spec, 123);

    double dense_skew_sum = 0.0;
    int dense_n = 0;
    double expert_abs_skew_max = 0.0;
    for (const auto& e : ckpt.entries) {
        if (!e.name.ends_with(".fc2.w")) continue;
        double g = skewness(e.tensor);
        if (e.group == LayerGroup::DenseFFN) {
            dense_skew_sum += g;
            ++dense_n;
        } else if (e.group == LayerGroup::ExpertFFN) {
            expert_abs_skew_max = std::max(expert_abs_skew_max, std::fabs(g));
        }
    }
    REQUIRE(dense_n > 0);
    double dense_skew = dense_skew_sum / dense_n;
    CHECK(dense_skew < -1.4);
    CHECK(dense_skew > -2.3);
    CHECK(expert_abs_skew_max < 0.4);

    // the plain variant stays near-symmetric everywhere
    Checkpoint plain = make_synthetic_checkpoint(spec, 123, false);
    for (const auto& e : plain.entries)
        if (e.group == LayerGroup::DenseFFN && e.name.ends_with(".fc2.w"))
            CHECK(std::fabs(skewness(e.tensor)) < 0.4);
}

TEST_CASE("sensitivity ordering on the synthetic checkpoint") {
    ModelSpec spec = ModelSpec::toy();
    Checkpoint ckpt = make_synthetic_checkpoint(spec, 123);

    auto expert2 = group_sensitivity(ckpt, spec, kProbe, LayerGroup::ExpertFFN, 2,
                                     Scheme::LinearAbsMax, Granularity::PerChannel);
    auto dense2 = group_sensitivity(ckpt, spec, kProbe, LayerGroup::DenseFFN, 2,
                                    Scheme::LinearAbsMax, Granularity::PerChannel);
    CHECK(dense2.logit_mse > expert2.logit_mse);
    CHECK(dense2.mean_kl > expert2.mean_kl);
    CHECK(dense2.hidden_cosine < expert2.hidden_cosine);

    // degradation non-increasing in bits, per group
    for (LayerGroup g : {LayerGroup::ExpertFFN, LayerGroup::DenseFFN}) {
        double prev_mse = 1e300, prev_kl = 1e300, prev_cos = -1e300;
        for (int bits : {2, 3, 4, 8}) {
            auto r = group_sensitivity(ckpt, spec, kProbe, g, bits, Scheme::LinearAbsMax,
                                       Granularity::PerChannel);
            CHECK(r.logit_mse <= prev_mse);
            CHECK(r.mean_kl <= prev_kl);
            CHECK(r.hidden_cosine >= prev_cos);
            prev_mse = r.logit_mse;
            prev_kl = r.mean_kl;
            prev_cos = r.hidden_cosine;
        }
    }

    // quantizing all dense layers is at least as harmful as even layers only
    auto all2 = dense_layer_subset_sensitivity(ckpt, spec, kProbe, LayerSubset::All, 2);
    auto even2 = dense_layer_subset_sensitivity(ckpt, spec, kProbe, LayerSubset::Even, 2);
    CHECK(all2.logit_mse >= even2.logit_mse);
    CHECK(all2.mean_kl >= even2.mean_kl);
    CHECK(all2.hidden_cosine <= even2.hidden_cosine);
    CHECK(even2.target == std::string("dense_ffn[even]"));
}

TEST_CASE("report formatting round-trips the key fields") {
    SensitivityReport r;
    r.target = "expert_ffn";
    r.bits = 3;
    r.logit_mse = 0.5;
    std::string row = to_tsv_row(r);
    CHECK(row.find("expert_ffn\t3\t0.5") == 0);
    CHECK(sensitivity_tsv_header().find("logit_mse") != std::string::npos);
    DistributionStats s;
    CHECK(to_tsv_row("w", s, -1.8).find("w\t") == 0);
    CHECK(stats_tsv_header().find("skewness") != std::string::npos);
}
