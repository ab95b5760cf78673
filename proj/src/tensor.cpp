#include "moqe/tensor.hpp"

#include <bit>
#include <cmath>

namespace moqe {

bool Tensor::all_finite() const {
    for (float v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

const char* to_string(LayerGroup g) {
    switch (g) {
        case LayerGroup::ExpertFFN: return "expert_ffn";
        case LayerGroup::DenseFFN: return "dense_ffn";
        case LayerGroup::SelfAttention: return "self_attn";
        case LayerGroup::CrossAttention: return "cross_attn";
        case LayerGroup::Embedding: return "embedding";
        case LayerGroup::Router: return "router";
        case LayerGroup::Other: return "other";
    }
    return "other";
}

LayerGroup layer_group_from_string(const std::string& s) {
    if (s == "expert_ffn") return LayerGroup::ExpertFFN;
    if (s == "dense_ffn") return LayerGroup::DenseFFN;
    if (s == "self_attn") return LayerGroup::SelfAttention;
    if (s == "cross_attn") return LayerGroup::CrossAttention;
    if (s == "embedding") return LayerGroup::Embedding;
    if (s == "router") return LayerGroup::Router;
    if (s == "other") return LayerGroup::Other;
    throw std::invalid_argument("unknown layer group: " + s);
}

uint16_t f32_to_f16_bits(float x) {
    uint32_t bits = std::bit_cast<uint32_t>(x);
    uint16_t sign = static_cast<uint16_t>((bits >> 16) & 0x8000u);
    uint32_t abs = bits & 0x7FFFFFFFu;

    if (abs >= 0x7F800000u) {
        // inf / nan
        uint32_t mant = abs & 0x7FFFFFu;
        return static_cast<uint16_t>(sign | 0x7C00u | (mant ? 0x200u : 0u));
    }
    // Half-precision exponent = f32 exponent - 127 + 15.
    int32_t exp = static_cast<int32_t>(abs >> 23) - 112;
    uint32_t mant = abs & 0x7FFFFFu;

    if (exp >= 31) return static_cast<uint16_t>(sign | 0x7C00u);  // overflow
    if (exp <= 0) {
        // Subnormal half (or zero). Shift the implicit-1 mantissa right and
        // round to nearest even on the dropped bits.
        if (exp < -10) return sign;  // underflows to zero even after rounding
        mant |= 0x800000u;
        uint32_t shift = static_cast<uint32_t>(14 - exp);  // in [14, 24]
        uint32_t half = mant >> shift;
        uint32_t rem = mant & ((1u << shift) - 1u);
        uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half & 1u)))
            ++half;
        return static_cast<uint16_t>(sign | half);
    }
    // Normal half: keep 10 mantissa bits, round-to-nearest-even on the 13 dropped.
    uint16_t h = static_cast<uint16_t>(sign | (exp << 10) | (mant >> 13));
    uint32_t rem = mant & 0x1FFFu;
    if (rem > 0x1000u || (rem == 0x1000u && (h & 1u)))
        ++h;  // may carry into the exponent, including up to inf: that is correct RNE
    return h;
}

float f16_bits_to_f32(uint16_t h) {
    uint32_t sign = static_cast<uint32_t>(h & 0x8000u) << 16;
    uint32_t exp = (h >> 10) & 0x1Fu;
    uint32_t mant = h & 0x3FFu;
    uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            // subnormal: normalize
            int shift = 0;
            while (!(mant & 0x400u)) {
                mant <<= 1;
                ++shift;
            }
            mant &= 0x3FFu;
            bits = sign | ((113 - shift) << 23) | (mant << 13);
        }
    } else if (exp == 31) {
        bits = sign | 0x7F800000u | (mant << 13);
    } else {
        bits = sign | ((exp + 112) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

float round_to_binary16(float x) {
    if (!std::isfinite(x)) throw std::range_error("round_to_binary16: non-finite input");
    uint16_t h = f32_to_f16_bits(x);
    if ((h & 0x7FFFu) == 0x7C00u)
        throw std::range_error("round_to_binary16: overflow above binary16 max 65504");
    return f16_bits_to_f32(h);
}

}  // namespace moqe
