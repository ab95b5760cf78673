#include "moqe/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace moqe {

Tensor matmul_dequant_fused(const QuantizedTensor& qt, const Tensor& x) {
    if (qt.scheme != Scheme::LinearAbsMax)
        throw std::invalid_argument("matmul_dequant_fused: only the linear scheme is supported");
    if (qt.shape.size() != 2 || !x.is2d() || x.cols() != qt.rows())
        throw std::invalid_argument("matmul_dequant_fused: shape mismatch");

    const int64_t m = x.rows(), k = qt.rows(), n = qt.cols();
    constexpr int64_t kTile = 64;
    Tensor out({m, n});
    std::vector<float> tile(static_cast<size_t>(kTile * kTile));

    for (int64_t j0 = 0; j0 < n; j0 += kTile) {
        const int64_t jn = std::min(kTile, n - j0);
        for (int64_t p0 = 0; p0 < k; p0 += kTile) {
            const int64_t pn = std::min(kTile, k - p0);
            // Dequantize one [pn x jn] weight tile.
            for (int64_t p = 0; p < pn; ++p)
                for (int64_t j = 0; j < jn; ++j) {
                    float s = qt.scales[qt.granularity == Granularity::PerTensor
                                            ? 0
                                            : static_cast<size_t>(j0 + j)];
                    int8_t q = qt.codes.codes[static_cast<size_t>((p0 + p) * n + j0 + j)];
                    tile[static_cast<size_t>(p * jn + j)] = static_cast<float>(q) * s;
                }
            for (int64_t i = 0; i < m; ++i) {
                float* orow = &out.data[static_cast<size_t>(i * n + j0)];
                for (int64_t p = 0; p < pn; ++p) {
                    float xv = x.at(i, p0 + p);
                    if (xv == 0.0f) continue;
                    const float* trow = &tile[static_cast<size_t>(p * jn)];
                    for (int64_t j = 0; j < jn; ++j) orow[j] += xv * trow[j];
                }
            }
        }
    }
    return out;
}

uint64_t flops_per_token(const ModelSpec& spec) {
    const uint64_t d = static_cast<uint64_t>(spec.d_model);
    const uint64_t f = static_cast<uint64_t>(spec.d_ffn);
    uint64_t total = 0;
    for (int i = 0; i < spec.enc_layers; ++i) {
        total += 8 * d * d;      // q,k,v,o projections
        total += 4 * d * f;      // FFN (one expert under top-1)
        if (spec.moe_layer(i)) total += 2 * d * static_cast<uint64_t>(spec.n_experts);
    }
    for (int i = 0; i < spec.dec_layers; ++i) {
        total += 16 * d * d;     // self + cross projections
        total += 4 * d * f;
        if (spec.moe_layer(i)) total += 2 * d * static_cast<uint64_t>(spec.n_experts);
    }
    total += 2 * d * static_cast<uint64_t>(spec.vocab);  // tied output projection
    return total;
}

uint64_t resident_weight_bytes(const Checkpoint& ckpt) {
    uint64_t total = 0;
    for (const auto& e : ckpt.entries) {
        EntryDesc d = describe(e);
        if (d.dtype == "f32") {
            d.dtype = "f16";
            d.bits = 16;
        }
        total += entry_data_bytes(d) + entry_scale_bytes(d);
    }
    return total;
}

std::vector<BenchRow> throughput_report(const ModelSpec& spec,
                                        const std::vector<BenchVariant>& variants,
                                        const std::vector<std::vector<int32_t>>& probe, int reps,
                                        int threads) {
    if (reps < 3) throw std::invalid_argument("throughput_report: need at least 3 repetitions");
    uint64_t tokens = 0;
    for (const auto& s : probe) tokens += s.size();

    std::vector<BenchRow> rows;
    for (const auto& v : variants) {
        BenchRow row;
        row.name = v.name;
        row.threads = threads;
        row.weight_bytes = resident_weight_bytes(*v.ckpt);
        row.flops_per_token = flops_per_token(spec);

        model_forward(probe, *v.ckpt, spec);  // warm-up, discarded
        std::vector<double> times;
        for (int r = 0; r < reps; ++r) {
            auto t0 = std::chrono::steady_clock::now();
            model_forward(probe, *v.ckpt, spec);
            auto t1 = std::chrono::steady_clock::now();
            times.push_back(std::chrono::duration<double>(t1 - t0).count());
        }
        std::sort(times.begin(), times.end());
        row.median_seconds = times[times.size() / 2];
        row.tokens_per_sec =
            row.median_seconds > 0.0 ? static_cast<double>(tokens) / row.median_seconds : 0.0;
        rows.push_back(row);
    }
    return rows;
}

std::string bench_tsv_header() {
    return "variant\tmedian_seconds\ttokens_per_sec\tweight_bytes\tflops_per_token\tthreads\n";
}

std::string to_tsv_row(const BenchRow& r) {
    std::ostringstream os;
    os << r.name << '\t' << r.median_seconds << '\t' << r.tokens_per_sec << '\t' << r.weight_bytes
       << '\t' << r.flops_per_token << '\t' << r.threads << '\n';
    return os.str();
}

}  // namespace moqe
