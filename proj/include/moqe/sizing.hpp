#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "moqe/model.hpp"

namespace moqe {

// One quantization rule; at most one rule applies per (group, layer).
struct QuantRule {
    LayerGroup group = LayerGroup::ExpertFFN;
    LayerSubset subset = LayerSubset::All;
    int bits = 4;
    Scheme scheme = Scheme::LinearAbsMax;
    Granularity granularity = Granularity::PerChannel;
};

struct QuantPlan {
    std::vector<QuantRule> rules;
    int default_bits = 16;  // storage width of unquantized tensors (16 or 32)

    const QuantRule* rule_for(LayerGroup g, std::optional<int> layer) const;
    static QuantPlan from_file(const std::string& path);
    static QuantPlan moqe(int bits);  // quantize ExpertFFN only, channel-wise linear
};

struct GroupCounts {
    std::map<LayerGroup, uint64_t> by_group;
    uint64_t total = 0;

    uint64_t of(LayerGroup g) const {
        auto it = by_group.find(g);
        return it == by_group.end() ? 0 : it->second;
    }
};

// Closed-form parameter counting per layer group: attention 4d^2+4d per
// block, FFN 2*d*d_ffn+d_ffn+d (times n_experts at MoE layers), router
// d*n_experts per MoE layer, tied embedding vocab*d, 2d per layer norm.
GroupCounts param_count(const ModelSpec& spec);

struct SizeReport {
    GroupCounts params;
    uint64_t fp16_bytes = 0;     // all-fp16 MQE1 serialization
    uint64_t planned_bytes = 0;  // codes + scales + container overhead
    uint64_t code_bytes = 0;
    uint64_t scale_bytes = 0;
    double ratio = 1.0;  // planned / fp16
    double moe_weight_fraction = 0.0;
    std::vector<EntryDesc> planned_entries;
};

SizeReport size_report(const ModelSpec& spec, const QuantPlan& plan);

struct VerifyResult {
    bool pass = false;
    uint64_t predicted = 0;
    uint64_t actual = 0;
    double rel_delta = 0.0;
    std::vector<std::string> deltas;  // per-tensor mismatches, if any
};

// Actual container file size must be within 1% of the prediction; on
// mismatch the per-tensor byte deltas are listed.
VerifyResult verify_against_checkpoint(const SizeReport& report, const std::string& ckpt_path);

std::string to_text(const SizeReport& r);
std::string to_tsv(const SizeReport& r);

}  // namespace moqe
