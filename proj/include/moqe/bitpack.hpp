#pragma once

#include <cstdint>
#include <vector>

namespace moqe {

// Signed b-bit codes, b in {2,3,4,8}, each in [-(2^(b-1)), 2^(b-1)-1].
struct CodeArray {
    int bits = 8;
    std::vector<int8_t> codes;

    bool operator==(const CodeArray& o) const = default;
};

bool valid_bits(int bits);
int8_t code_min(int bits);
int8_t code_max(int bits);

// Packed byte length for `count` codes at `bits` width:
// ceil(count*bits/8) for 2/4/8, 3*ceil(count/8) for 3.
size_t packed_size(int bits, size_t count);

// Offset-binary packing, u = q + 2^(b-1). For 2/4/8-bit, u values fill each
// byte LSB-first. For 3-bit, every 8 codes form a 24-bit little-endian group
// with code i at bit positions [3i, 3i+3). Partial trailing groups are
// zero-padded.
std::vector<uint8_t> pack(const CodeArray& c);

CodeArray unpack(const std::vector<uint8_t>& data, int bits, size_t count);
CodeArray unpack(const uint8_t* data, size_t len, int bits, size_t count);

}  // namespace moqe
