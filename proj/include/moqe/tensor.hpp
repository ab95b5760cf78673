#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace moqe {

// Dense row-major f32 tensor. The last dimension is the "channel" (column)
// axis for 2D weight matrices: callers orient weights so the output-feature
// dimension is the column index.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel()), 0.0f);
    }
    Tensor(std::vector<int64_t> s, std::vector<float> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != numel())
            throw std::invalid_argument("tensor: data length does not match shape");
    }

    int64_t numel() const {
        int64_t n = 1;
        for (int64_t d : shape) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            n *= d;
        }
        return n;
    }
    int64_t rows() const { return shape.size() == 2 ? shape[0] : 0; }
    int64_t cols() const { return shape.size() == 2 ? shape[1] : 0; }
    bool is2d() const { return shape.size() == 2; }

    float& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
    float at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }

    bool all_finite() const;

    bool operator==(const Tensor& o) const = default;
};

// Layer-group tag carried by every checkpoint tensor.
enum class LayerGroup {
    ExpertFFN,
    DenseFFN,
    SelfAttention,
    CrossAttention,
    Embedding,
    Router,
    Other,
};

const char* to_string(LayerGroup g);
LayerGroup layer_group_from_string(const std::string& s);

// --- IEEE-754 binary16 conversion ---------------------------------------
//
// Scales are stored in half precision; these conversions define the exact
// on-disk values. Round-to-nearest-even, same as hardware F16C.

uint16_t f32_to_f16_bits(float x);   // finite inputs; may yield inf bits (0x7C00)
float f16_bits_to_f32(uint16_t h);

// Nearest binary16 value re-widened to f32. Throws std::range_error when the
// value rounds to binary16 infinity (|x| > 65504 after rounding).
float round_to_binary16(float x);

}  // namespace moqe
