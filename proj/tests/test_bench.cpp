#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "moqe/bench.hpp"
#include "moqe/sizing.hpp"

using namespace moqe;

namespace {

Tensor random_matrix(int64_t r, int64_t c, std::mt19937& rng, float scale = 0.3f) {
    std::normal_distribution<float> dist(0.0f, scale);
    Tensor t({r, c});
    for (float& v : t.data) v = dist(rng);
    return t;
}

}  // namespace

TEST_CASE("fused matmul: hand-sized identity-style oracle") {
    // weights exactly representable: codes times a power-of-two scale
    Tensor w({2, 2}, {0.5f, -1.0f, 0.25f, 0.75f});
    QuantizedTensor qt = quantize_linear(w, 8, Granularity::PerChannel);
    Tensor dq = dequantize(qt);
    Tensor x({1, 2}, {2.0f, -4.0f});
    Tensor out = matmul_dequant_fused(qt, x);
    CHECK(out.at(0, 0) == doctest::Approx(2.0 * dq.at(0, 0) - 4.0 * dq.at(1, 0)).epsilon(1e-6));
    CHECK(out.at(0, 1) == doctest::Approx(2.0 * dq.at(0, 1) - 4.0 * dq.at(1, 1)).epsilon(1e-6));
}

TEST_CASE("fused matmul matches unfused across tile boundaries") {
    std::mt19937 rng(6);
    for (auto [k, n] : {std::pair<int64_t, int64_t>{64, 64}, {65, 63}, {130, 127}}) {
        Tensor w = random_matrix(k, n, rng);
        QuantizedTensor qt = quantize_linear(w, 4, Granularity::PerChannel);
        Tensor x = random_matrix(3, k, rng);
        Tensor fused = matmul_dequant_fused(qt, x);
        Tensor dq = dequantize(qt);
        for (int64_t i = 0; i < 3; ++i)
            for (int64_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int64_t p = 0; p < k; ++p) acc += (double)x.at(i, p) * dq.at(p, j);
                REQUIRE(fused.at(i, j) == doctest::Approx(acc).epsilon(1e-3));
            }
    }
}

TEST_CASE("fused matmul rejects bad inputs") {
    std::mt19937 rng(9);
    Tensor w = random_matrix(8, 8, rng);
    QuantizedTensor lin = quantize_linear(w, 4, Granularity::PerChannel);
    QuantizedTensor lg = quantize_log(w, 3, Granularity::PerTensor);
    CHECK_THROWS_AS(matmul_dequant_fused(lg, random_matrix(2, 8, rng)), std::invalid_argument);
    CHECK_THROWS_AS(matmul_dequant_fused(lin, random_matrix(2, 7, rng)), std::invalid_argument);
}

TEST_CASE("per-token FLOPs: MoE equals its dense twin within 1%") {
    ModelSpec moe = ModelSpec::toy();
    ModelSpec dense = ModelSpec::dense_of(moe);
    uint64_t fm = flops_per_token(moe);
    uint64_t fd = flops_per_token(dense);
    CHECK(fm >= fd);  // router adds a little
    CHECK(static_cast<double>(fm - fd) / static_cast<double>(fd) < 0.01);

    // closed form for the dense toy model
    const uint64_t d = 64, f = 256, v = 1000;
    uint64_t expect = 4 * (8 * d * d + 4 * d * f)     // encoder layers
                      + 2 * (16 * d * d + 4 * d * f)  // decoder layers
                      + 2 * d * v;
    CHECK(fd == expect);
}

TEST_CASE("resident weight bytes track the sizing arithmetic") {
    ModelSpec spec = ModelSpec::toy();
    Checkpoint ckpt = build_random_checkpoint(spec, 21);
    Checkpoint q = quantize_model(ckpt, {LayerGroup::ExpertFFN}, 4, Scheme::LinearAbsMax,
                                  Granularity::PerChannel);
    SizeReport rep = size_report(spec, QuantPlan::moqe(4));

    uint64_t resident = resident_weight_bytes(q);
    uint64_t planned_payload = 0;
    for (const auto& d : rep.planned_entries)
        planned_payload += entry_data_bytes(d) + entry_scale_bytes(d);
    CHECK(resident == planned_payload);

    // quantized experts shrink the resident set
    CHECK(resident < resident_weight_bytes(ckpt));
}

TEST_CASE("throughput report measures all variants and keeps determinism") {
    ModelSpec spec = ModelSpec::toy();
    Checkpoint fp = build_random_checkpoint(spec, 77);
    Checkpoint q4 = quantize_model(fp, {LayerGroup::ExpertFFN}, 4, Scheme::LinearAbsMax,
                                   Granularity::PerChannel);
    std::vector<BenchVariant> variants = {{"fp32", &fp}, {"int4-experts", &q4}};
    std::vector<std::vector<int32_t>> probe = {{1, 2, 3, 4, 5, 6, 7, 8}};

    auto rows = throughput_report(spec, variants, probe, 3, 1);
    REQUIRE(rows.size() == 2);
    for (const auto& r : rows) {
        CHECK(r.median_seconds > 0.0);
        CHECK(r.tokens_per_sec > 0.0);
        CHECK(r.flops_per_token == flops_per_token(spec));
    }
    CHECK(rows[0].weight_bytes > rows[1].weight_bytes);
    CHECK(rows[0].name == "fp32");

    CHECK_THROWS_AS(throughput_report(spec, variants, probe, 2, 1), std::invalid_argument);

    std::string hdr = bench_tsv_header();
    CHECK(hdr.find("tokens_per_sec") != std::string::npos);
    CHECK(to_tsv_row(rows[0]).find("fp32\t") == 0);
}
