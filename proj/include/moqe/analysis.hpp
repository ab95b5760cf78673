#pragma once

#include <string>
#include <utility>
#include <vector>

#include "moqe/model.hpp"
#include "moqe/sizing.hpp"

namespace moqe {

// Box-plot statistics with R-7 (linear interpolation) quartiles. Whiskers
// are the 1.5*IQR fences clamped to the observed range, so
// min <= whisker_low <= q1 <= median <= q3 <= whisker_high <= max.
struct DistributionStats {
    double min = 0, max = 0;
    double q1 = 0, median = 0, q3 = 0;
    double whisker_low = 0, whisker_high = 0;
    uint64_t n_outliers = 0;
};

DistributionStats weight_stats(const Tensor& t);

// Fisher-Pearson moment coefficient g1 = m3 / m2^(3/2) over all elements.
double skewness(const Tensor& t);

struct SensitivityReport {
    std::string target;  // layer group name or "dense_ffn[even]" style descriptor
    int bits = 0;
    double logit_mse = 0.0;
    double mean_kl = 0.0;
    double hidden_cosine = 1.0;  // 1 = unchanged; lower = more degradation
    ErrorReport weight_error;
    bool group_absent = false;
};

// Quantizes only the given group, runs the probe through both checkpoints,
// and reports output degradation plus aggregated weight error. The input
// checkpoint is left untouched.
SensitivityReport group_sensitivity(const Checkpoint& ckpt, const ModelSpec& spec,
                                    const std::vector<std::vector<int32_t>>& probe,
                                    LayerGroup group, int bits, Scheme scheme,
                                    Granularity granularity);

SensitivityReport dense_layer_subset_sensitivity(const Checkpoint& ckpt, const ModelSpec& spec,
                                                 const std::vector<std::vector<int32_t>>& probe,
                                                 LayerSubset subset, int bits);

// (per-channel, per-tensor) error reports for the same matrix.
std::pair<ErrorReport, ErrorReport> granularity_comparison(const Tensor& a, int bits,
                                                           Scheme scheme);

// Random checkpoint with a deliberately asymmetric weight mix: expert FFN weights
// near-symmetric, dense FFN fc2 weights heavy-tailed with strong negative
// skew (outliers injected as scaled extreme negatives).
Checkpoint make_synthetic_checkpoint(const ModelSpec& spec, uint64_t seed,
                                     bool outlier_shaped = true);

// Degradation metrics between two forward results over the same probe.
struct Degradation {
    double logit_mse = 0.0;
    double mean_kl = 0.0;
    double hidden_cosine = 1.0;
};
Degradation compare_forward(const ForwardResult& ref, const ForwardResult& alt);

std::string stats_tsv_header();
std::string to_tsv_row(const std::string& name, const DistributionStats& s, double skew);
std::string to_text(const std::string& name, const DistributionStats& s, double skew);

std::string sensitivity_tsv_header();
std::string to_tsv_row(const SensitivityReport& r);
std::string to_text(const SensitivityReport& r);

}  // namespace moqe
