#pragma once

#include <cstdint>
#include <vector>

#include "moqe/bitpack.hpp"
#include "moqe/tensor.hpp"

namespace moqe {

enum class Scheme { LinearAbsMax, LogScale };
enum class Granularity { PerChannel, PerTensor };
enum class LogScaleMode { AbsMax, MseOptimal };

const char* to_string(Scheme s);
const char* to_string(Granularity g);

// Weight-only quantized matrix. Linear codes are the signed integers q with
// a' = q * s_j. Log codes pack a sign bit (set = negative) into the top of
// the b-bit field and the exponent index k in the low b-1 bits, so that
// a' = sign * s * 2^(-k); both live in the same offset-binary CodeArray.
struct QuantizedTensor {
    Scheme scheme = Scheme::LinearAbsMax;
    int bits = 8;
    Granularity granularity = Granularity::PerChannel;
    std::vector<int64_t> shape;
    CodeArray codes;
    std::vector<float> scales;  // binary16 values, one per channel or one total

    int64_t rows() const { return shape.size() == 2 ? shape[0] : 0; }
    int64_t cols() const { return shape.size() == 2 ? shape[1] : (shape.empty() ? 0 : 1); }
    int64_t numel() const;

    bool operator==(const QuantizedTensor& o) const = default;
};

struct ErrorReport {
    double max_abs_err = 0.0;
    double mse = 0.0;
    double relative_frobenius_err = 0.0;
};

// Log-code field helpers (k in [0, 2^(b-1)-1]).
int8_t log_encode(bool negative, int k, int bits);
void log_decode(int8_t code, int bits, bool& negative, int& k);

// s_j = 2*max|A[:,j]| / (2^b - 1), binary16-rounded; all-zero column -> 0.
std::vector<float> linear_scales(const Tensor& a, int bits, Granularity g);

QuantizedTensor quantize_linear(const Tensor& a, int bits, Granularity g);

QuantizedTensor quantize_log(const Tensor& a, int bits, Granularity g,
                             LogScaleMode mode = LogScaleMode::MseOptimal);

// Exponent index for one element under scale s: t = clip(|a|/s, 2^(1-2^(b-1)), 1),
// k = -ceil(log2((2/3)*t)). Exact at the 1.5*2^-k midpoints (picks the lower
// exponent). s must be > 0.
int log_exponent_index(float a, double s, int bits);

// MSE-optimal log scale for one value group, alternating between exponent
// assignment and the closed-form least-squares scale. Result binary16-rounded
// and never worse (in MSE) than the binary16-rounded abs-max scale.
float fit_log_scale(const std::vector<float>& column, int bits);

Tensor dequantize(const QuantizedTensor& qt);

ErrorReport quant_error(const Tensor& a, const QuantizedTensor& qt);
ErrorReport error_between(const Tensor& a, const Tensor& b);

// Convenience dispatch over scheme.
QuantizedTensor quantize(const Tensor& a, Scheme scheme, int bits, Granularity g,
                         LogScaleMode mode = LogScaleMode::MseOptimal);

}  // namespace moqe
