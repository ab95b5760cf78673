#include "moqe/quant.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace moqe {

const char* to_string(Scheme s) { return s == Scheme::LinearAbsMax ? "linear" : "log"; }
const char* to_string(Granularity g) { return g == Granularity::PerChannel ? "channel" : "tensor"; }

int64_t QuantizedTensor::numel() const {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
}

int8_t log_encode(bool negative, int k, int bits) {
    int u = (negative ? 1 << (bits - 1) : 0) | k;
    return static_cast<int8_t>(u - (1 << (bits - 1)));
}

void log_decode(int8_t code, int bits, bool& negative, int& k) {
    int u = static_cast<int>(code) + (1 << (bits - 1));
    negative = (u >> (bits - 1)) & 1;
    k = u & ((1 << (bits - 1)) - 1);
}

namespace {

void require_quantizable(const Tensor& a, int bits) {
    if (!a.is2d()) throw std::invalid_argument("quant: tensor must be 2D");
    if (!valid_bits(bits)) throw std::invalid_argument("quant: unsupported bit width");
    if (!a.all_finite()) throw std::invalid_argument("quant: non-finite values");
}

// max|a| per column, or a single global max for PerTensor.
std::vector<double> absmax_per_group(const Tensor& a, Granularity g) {
    const int64_t rows = a.rows(), cols = a.cols();
    if (g == Granularity::PerTensor) {
        double m = 0.0;
        for (float v : a.data) m = std::max(m, static_cast<double>(std::fabs(v)));
        return {m};
    }
    std::vector<double> m(static_cast<size_t>(cols), 0.0);
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j)
            m[static_cast<size_t>(j)] =
                std::max(m[static_cast<size_t>(j)], static_cast<double>(std::fabs(a.at(i, j))));
    return m;
}

size_t scale_index(Granularity g, int64_t j) {
    return g == Granularity::PerTensor ? 0 : static_cast<size_t>(j);
}

}  // namespace

std::vector<float> linear_scales(const Tensor& a, int bits, Granularity g) {
    require_quantizable(a, bits);
    auto maxes = absmax_per_group(a, g);
    std::vector<float> scales(maxes.size());
    const double denom = static_cast<double>((1 << bits) - 1);
    for (size_t i = 0; i < maxes.size(); ++i)
        scales[i] = maxes[i] == 0.0
                        ? 0.0f
                        : round_to_binary16(static_cast<float>(2.0 * maxes[i] / denom));
    return scales;
}

QuantizedTensor quantize_linear(const Tensor& a, int bits, Granularity g) {
    QuantizedTensor qt;
    qt.scheme = Scheme::LinearAbsMax;
    qt.bits = bits;
    qt.granularity = g;
    qt.shape = a.shape;
    qt.scales = linear_scales(a, bits, g);
    qt.codes.bits = bits;
    qt.codes.codes.resize(a.data.size());

    const double lo = code_min(bits), hi = code_max(bits);
    const int64_t rows = a.rows(), cols = a.cols();
    for (int64_t i = 0; i < rows; ++i) {
        for (int64_t j = 0; j < cols; ++j) {
            double s = qt.scales[scale_index(g, j)];
            double q = 0.0;
            if (s != 0.0) {
                q = std::nearbyint(static_cast<double>(a.at(i, j)) / s);
                q = std::clamp(q, lo, hi);
            }
            qt.codes.codes[static_cast<size_t>(i * cols + j)] = static_cast<int8_t>(q);
        }
    }
    return qt;
}

int log_exponent_index(float a, double s, int bits) {
    const int kmax = (1 << (bits - 1)) - 1;
    double t = std::fabs(static_cast<double>(a)) / s;
    t = std::clamp(t, std::ldexp(1.0, -kmax), 1.0);
    // Smallest Q with (2/3)*t <= 2^Q, computed exactly: 2t <= 3*2^Q.
    int q = static_cast<int>(std::ceil(std::log2(2.0 * t / 3.0)));
    while (2.0 * t <= 3.0 * std::ldexp(1.0, q - 1)) --q;
    while (2.0 * t > 3.0 * std::ldexp(1.0, q)) ++q;
    return std::clamp(-q, 0, kmax);
}

namespace {

double log_mse(const std::vector<float>& vals, double s, int bits) {
    double acc = 0.0;
    for (float v : vals) {
        double d = (v < 0.0f ? -1.0 : 1.0) * s * std::ldexp(1.0, -log_exponent_index(v, s, bits));
        double e = static_cast<double>(v) - d;
        acc += e * e;
    }
    return acc / static_cast<double>(vals.size());
}

}  // namespace

float fit_log_scale(const std::vector<float>& column, int bits) {
    if (column.empty()) throw std::invalid_argument("fit_log_scale: empty column");
    double amax = 0.0;
    for (float v : column) amax = std::max(amax, static_cast<double>(std::fabs(v)));
    if (amax == 0.0) throw std::invalid_argument("fit_log_scale: all-zero column");

    // Alternating optimization: fix exponents, then solve least squares for
    // s (d_i = p_i*2^-k_i, s = sum(a*d)/sum(d^2) = sum(|a|*2^-k)/sum(2^-2k)).
    // The objective is piecewise-quadratic with local minima on heavy-tailed
    // inputs, so the iteration runs from a fixed ladder of starting scales
    // and keeps the best.
    auto refine = [&](double s) {
        for (int iter = 0; iter < 50; ++iter) {
            double num = 0.0, den = 0.0;
            for (float v : column) {
                double d = std::ldexp(1.0, -log_exponent_index(v, s, bits));
                num += std::fabs(static_cast<double>(v)) * d;
                den += d * d;
            }
            double s_new = num / den;
            bool converged = std::fabs(s_new - s) <= 1e-6 * s;
            s = s_new;
            if (converged) break;
        }
        return s;
    };
    // Candidate starts: the abs-max scale first (canonical on ties), then a
    // coarse deterministic sweep of the same range the grid oracle covers.
    std::vector<double> starts = {amax};
    constexpr int kSweep = 512;
    double sweep_best = amax, sweep_best_mse = 1e300;
    for (int i = 0; i < kSweep; ++i) {
        double cand = (0.1 + 1.9 * static_cast<double>(i) / (kSweep - 1)) * amax;
        double mse = log_mse(column, static_cast<float>(cand), bits);
        if (mse < sweep_best_mse) {
            sweep_best_mse = mse;
            sweep_best = cand;
        }
    }
    starts.push_back(sweep_best);
    double s = amax;
    double best_mse = 1e300;
    for (double start : starts) {
        for (double cand : {refine(start), start}) {
            if (cand <= 0.0 || !std::isfinite(cand)) continue;
            double mse = log_mse(column, static_cast<float>(cand), bits);
            if (mse < best_mse) {
                best_mse = mse;
                s = cand;
            }
        }
    }
    float s_fit = round_to_binary16(static_cast<float>(s));
    float s_abs = round_to_binary16(static_cast<float>(amax));
    if (s_fit <= 0.0f) s_fit = s_abs;
    return log_mse(column, s_fit, bits) <= log_mse(column, s_abs, bits) ? s_fit : s_abs;
}

QuantizedTensor quantize_log(const Tensor& a, int bits, Granularity g, LogScaleMode mode) {
    require_quantizable(a, bits);
    QuantizedTensor qt;
    qt.scheme = Scheme::LogScale;
    qt.bits = bits;
    qt.granularity = g;
    qt.shape = a.shape;
    qt.codes.bits = bits;
    qt.codes.codes.resize(a.data.size());

    const int64_t rows = a.rows(), cols = a.cols();
    const int kmax = (1 << (bits - 1)) - 1;
    const size_t ngroups = g == Granularity::PerTensor ? 1 : static_cast<size_t>(cols);

    qt.scales.resize(ngroups);
    for (size_t grp = 0; grp < ngroups; ++grp) {
        std::vector<float> vals;
        if (g == Granularity::PerTensor) {
            vals = a.data;
        } else {
            vals.reserve(static_cast<size_t>(rows));
            for (int64_t i = 0; i < rows; ++i) vals.push_back(a.at(i, static_cast<int64_t>(grp)));
        }
        double amax = 0.0;
        for (float v : vals) amax = std::max(amax, static_cast<double>(std::fabs(v)));
        if (amax == 0.0) {
            qt.scales[grp] = 0.0f;
        } else if (mode == LogScaleMode::AbsMax) {
            qt.scales[grp] = round_to_binary16(static_cast<float>(amax));
        } else {
            qt.scales[grp] = fit_log_scale(vals, bits);
        }
    }

    for (int64_t i = 0; i < rows; ++i) {
        for (int64_t j = 0; j < cols; ++j) {
            float v = a.at(i, j);
            bool negative = v < 0.0f;  // sign(0) = +1
            double s = qt.scales[scale_index(g, j)];
            int k = s == 0.0 ? kmax : log_exponent_index(v, s, bits);
            qt.codes.codes[static_cast<size_t>(i * cols + j)] = log_encode(negative, k, bits);
        }
    }
    return qt;
}

Tensor dequantize(const QuantizedTensor& qt) {
    Tensor out(qt.shape);
    const int64_t cols = qt.cols();
    for (size_t idx = 0; idx < qt.codes.codes.size(); ++idx) {
        int64_t j = cols > 0 ? static_cast<int64_t>(idx) % cols : 0;
        float s = qt.scales[scale_index(qt.granularity, j)];
        if (qt.scheme == Scheme::LinearAbsMax) {
            out.data[idx] = static_cast<float>(qt.codes.codes[idx]) * s;
        } else {
            bool negative;
            int k;
            log_decode(qt.codes.codes[idx], qt.bits, negative, k);
            float v = s * static_cast<float>(std::ldexp(1.0, -k));
            out.data[idx] = negative ? -v : v;
        }
    }
    return out;
}

ErrorReport error_between(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) throw std::invalid_argument("quant_error: shape mismatch");
    ErrorReport r;
    double sq = 0.0, ref = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double e = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        r.max_abs_err = std::max(r.max_abs_err, std::fabs(e));
        sq += e * e;
        ref += static_cast<double>(a.data[i]) * static_cast<double>(a.data[i]);
    }
    if (!a.data.empty()) r.mse = sq / static_cast<double>(a.data.size());
    r.relative_frobenius_err = ref == 0.0 ? 0.0 : std::sqrt(sq) / std::sqrt(ref);
    return r;
}

ErrorReport quant_error(const Tensor& a, const QuantizedTensor& qt) {
    if (a.shape != qt.shape) throw std::invalid_argument("quant_error: shape mismatch");
    return error_between(a, dequantize(qt));
}

QuantizedTensor quantize(const Tensor& a, Scheme scheme, int bits, Granularity g, LogScaleMode mode) {
    return scheme == Scheme::LinearAbsMax ? quantize_linear(a, bits, g)
                                          : quantize_log(a, bits, g, mode);
}

}  // namespace moqe
