#include "moqe/bitpack.hpp"

#include <stdexcept>
#include <string>

namespace moqe {

bool valid_bits(int bits) { return bits == 2 || bits == 3 || bits == 4 || bits == 8; }
int8_t code_min(int bits) { return static_cast<int8_t>(-(1 << (bits - 1))); }
int8_t code_max(int bits) { return static_cast<int8_t>((1 << (bits - 1)) - 1); }

size_t packed_size(int bits, size_t count) {
    if (!valid_bits(bits)) throw std::invalid_argument("bitpack: unsupported width " + std::to_string(bits));
    if (bits == 3) return 3 * ((count + 7) / 8);
    return (count * static_cast<size_t>(bits) + 7) / 8;
}

std::vector<uint8_t> pack(const CodeArray& c) {
    const int b = c.bits;
    if (!valid_bits(b)) throw std::invalid_argument("bitpack: unsupported width " + std::to_string(b));
    const int lo = code_min(b), hi = code_max(b);
    const uint32_t bias = 1u << (b - 1);

    std::vector<uint8_t> out(packed_size(b, c.codes.size()), 0);
    for (size_t i = 0; i < c.codes.size(); ++i) {
        int q = c.codes[i];
        if (q < lo || q > hi)
            throw std::out_of_range("bitpack: code " + std::to_string(q) + " out of range for " +
                                    std::to_string(b) + " bits");
        uint32_t u = static_cast<uint32_t>(q + static_cast<int>(bias));
        size_t bitpos = (b == 3) ? (i / 8) * 24 + (i % 8) * 3 : i * static_cast<size_t>(b);
        size_t byte = bitpos / 8;
        unsigned shift = static_cast<unsigned>(bitpos % 8);
        out[byte] |= static_cast<uint8_t>(u << shift);
        if (shift + static_cast<unsigned>(b) > 8)
            out[byte + 1] |= static_cast<uint8_t>(u >> (8 - shift));
    }
    return out;
}

CodeArray unpack(const uint8_t* data, size_t len, int bits, size_t count) {
    if (!valid_bits(bits)) throw std::invalid_argument("bitpack: unsupported width " + std::to_string(bits));
    if (len != packed_size(bits, count))
        throw std::invalid_argument("bitpack: data length " + std::to_string(len) +
                                    " does not match " + std::to_string(count) + " codes at " +
                                    std::to_string(bits) + " bits");
    const uint32_t bias = 1u << (bits - 1);
    const uint32_t mask = (1u << bits) - 1u;

    CodeArray c;
    c.bits = bits;
    c.codes.resize(count);
    for (size_t i = 0; i < count; ++i) {
        size_t bitpos = (bits == 3) ? (i / 8) * 24 + (i % 8) * 3 : i * static_cast<size_t>(bits);
        size_t byte = bitpos / 8;
        unsigned shift = static_cast<unsigned>(bitpos % 8);
        uint32_t u = static_cast<uint32_t>(data[byte]) >> shift;
        if (shift + static_cast<unsigned>(bits) > 8)
            u |= static_cast<uint32_t>(data[byte + 1]) << (8 - shift);
        u &= mask;
        c.codes[i] = static_cast<int8_t>(static_cast<int>(u) - static_cast<int>(bias));
    }
    return c;
}

CodeArray unpack(const std::vector<uint8_t>& data, int bits, size_t count) {
    return unpack(data.data(), data.size(), bits, count);
}

}  // namespace moqe
