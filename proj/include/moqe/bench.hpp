#pragma once

#include <string>
#include <vector>

#include "moqe/model.hpp"

namespace moqe {

// X [m x k] times dequantize(QT) [k x n] without materializing the full
// dequantized matrix: weights are dequantized one tile at a time. Linear
// scheme only.
Tensor matmul_dequant_fused(const QuantizedTensor& qt, const Tensor& x);

// Weight-matmul FLOPs per token (multiply-accumulate = 2 FLOPs); independent
// of n_experts under top-1 routing except for the router projection.
uint64_t flops_per_token(const ModelSpec& spec);

// Serialized weight footprint of a checkpoint as held for inference; float
// tensors are counted at half precision, matching the sizing convention.
uint64_t resident_weight_bytes(const Checkpoint& ckpt);

struct BenchVariant {
    std::string name;
    const Checkpoint* ckpt = nullptr;
};

struct BenchRow {
    std::string name;
    double median_seconds = 0.0;
    double tokens_per_sec = 0.0;  // report-only; hardware-dependent
    uint64_t weight_bytes = 0;
    uint64_t flops_per_token = 0;
    int threads = 1;
};

// Median wall-clock over `reps` timed runs after one discarded warm-up.
std::vector<BenchRow> throughput_report(const ModelSpec& spec,
                                        const std::vector<BenchVariant>& variants,
                                        const std::vector<std::vector<int32_t>>& probe, int reps,
                                        int threads);

std::string bench_tsv_header();
std::string to_tsv_row(const BenchRow& r);

}  // namespace moqe
