#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "moqe/checkpoint.hpp"

namespace moqe {

enum class MoePlacement { Even, Odd, All };
enum class LayerSubset { Even, Odd, All };

// Architectural hyperparameters. n_experts = 1 means a dense model; with
// more experts, an MoE layer replaces the FFN at every layer selected by
// moe_placement (default: even-numbered layers).
struct ModelSpec {
    int enc_layers = 4;
    int dec_layers = 2;
    int d_model = 64;
    int d_ffn = 256;
    int n_heads = 4;
    int vocab = 1000;
    int n_experts = 8;
    MoePlacement moe_placement = MoePlacement::Even;

    bool moe_layer(int layer) const {
        if (n_experts <= 1) return false;
        switch (moe_placement) {
            case MoePlacement::Even: return layer % 2 == 0;
            case MoePlacement::Odd: return layer % 2 == 1;
            case MoePlacement::All: return true;
        }
        return false;
    }

    void validate() const;

    // 4 enc / 2 dec, d 64, ffn 256, 4 heads, vocab 1000, 8 experts.
    static ModelSpec toy();
    // 24 enc / 12 dec, d 1024, ffn 4096, 32 experts, 128k vocab.
    static ModelSpec reference_large();
    static ModelSpec dense_of(const ModelSpec& s);  // same dims, n_experts = 1

    static ModelSpec from_file(const std::string& path);
    static std::optional<ModelSpec> from_meta(const Checkpoint& ckpt);
    void save_to_meta(Checkpoint& ckpt) const;

    bool operator==(const ModelSpec& o) const = default;
};

// --- routing and expert FFN ----------------------------------------------

struct RouterState {
    const Tensor* gate_weights = nullptr;  // [d_model x n_experts]
};

struct RouteResult {
    std::vector<int> expert;   // argmax expert per token (ties -> lowest index)
    std::vector<float> gate;   // softmax probability of the chosen expert
};

RouteResult top1_route(const Tensor& h, const RouterState& router);

// Float or quantized weight matrix.
struct WeightRef {
    const Tensor* f = nullptr;
    const QuantizedTensor* q = nullptr;
    bool quantized() const { return q != nullptr; }
};

struct ExpertWeights {
    WeightRef w1, w2;              // [d_model x d_ffn], [d_ffn x d_model]
    const Tensor* b1 = nullptr;    // [d_ffn]
    const Tensor* b2 = nullptr;    // [d_model]
};

struct ExpertBank {
    std::vector<ExpertWeights> experts;
};

// Top-1 routed two-layer ReLU FFN; expert output scaled by the gate
// probability. Quantized experts are dequantized on the fly, only for
// experts that actually receive tokens.
Tensor moe_ffn_forward(const Tensor& h, const ExpertBank& bank, const RouterState& router);

// --- full model -----------------------------------------------------------

struct ForwardResult {
    Tensor logits;        // [tokens x vocab]
    Tensor final_hidden;  // [tokens x d_model]
};

// Pre-LN transformer with sinusoidal positions. With dec_layers > 0 the
// token sequence is encoded and then decoded against itself with a causal
// mask; logits come from the decoder. Deterministic.
ForwardResult model_forward(const std::vector<std::vector<int32_t>>& sequences,
                            const Checkpoint& ckpt, const ModelSpec& spec);

Tensor model_logits(const std::vector<std::vector<int32_t>>& sequences,
                    const Checkpoint& ckpt, const ModelSpec& spec);

// Replaces every 2D weight tensor tagged with one of `groups` (optionally
// filtered by layer index parity) by its quantization. 1D tensors in the
// selection are skipped with a warning. The MoQE recipe is groups =
// {ExpertFFN}.
Checkpoint quantize_model(const Checkpoint& ckpt, const std::set<LayerGroup>& groups,
                          int bits, Scheme scheme, Granularity granularity,
                          LayerSubset subset = LayerSubset::All,
                          LogScaleMode mode = LogScaleMode::MseOptimal,
                          int n_threads = 1);

// Layer index encoded in a canonical tensor name ("enc.3.ffn.fc1.w" -> 3).
std::optional<int> layer_index_of(const std::string& name);

// Canonical tensor enumeration for a spec: names, groups, and shapes in
// serialization order (dtype f32). Shared by the checkpoint builder and the
// sizing arithmetic.
std::vector<EntryDesc> model_tensor_descs(const ModelSpec& spec);

// Canonical random-initialized checkpoint for a spec (f32 weights).
Checkpoint build_random_checkpoint(const ModelSpec& spec, uint64_t seed,
                                   float weight_scale = 0.08f);

LayerSubset layer_subset_from_string(const std::string& s);
const char* to_string(LayerSubset s);

}  // namespace moqe
