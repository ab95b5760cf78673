#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "moqe/quant.hpp"
#include "moqe/tensor.hpp"

namespace moqe {

enum class CkptError {
    BadMagic,
    BadVersion,
    Truncated,
    BadIndex,
    InvalidTensor,
};

class CheckpointError : public std::runtime_error {
  public:
    CheckpointError(CkptError kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}
    CkptError kind() const { return kind_; }

  private:
    CkptError kind_;
};

// One named tensor in a checkpoint. Float payloads can be stored at f32 or
// f16 on disk; f16 entries must already be binary16-representable so the
// container round-trips bit-exactly.
struct CheckpointEntry {
    enum class Kind { F32, F16, Quantized };

    std::string name;
    LayerGroup group = LayerGroup::Other;
    Kind kind = Kind::F32;
    Tensor tensor;            // Kind::F32 / Kind::F16
    QuantizedTensor qtensor;  // Kind::Quantized

    static CheckpointEntry f32(std::string name, LayerGroup g, Tensor t);
    static CheckpointEntry f16(std::string name, LayerGroup g, Tensor t);
    static CheckpointEntry quantized(std::string name, LayerGroup g, QuantizedTensor qt);

    const std::vector<int64_t>& shape() const {
        return kind == Kind::Quantized ? qtensor.shape : tensor.shape;
    }
    int64_t numel() const;
    bool is_quantized() const { return kind == Kind::Quantized; }

    bool operator==(const CheckpointEntry& o) const = default;
};

// Ordered, uniquely named tensor collection. Iteration order is
// serialization order. Immutable after load by convention.
struct Checkpoint {
    std::vector<CheckpointEntry> entries;
    std::map<std::string, std::string> meta;  // keys/values without whitespace

    void add(CheckpointEntry e);
    const CheckpointEntry* find(const std::string& name) const;
    CheckpointEntry* find(const std::string& name);

    bool operator==(const Checkpoint& o) const = default;
};

// --- MQE1 container ------------------------------------------------------
//
// Little-endian throughout: magic "MQE1", u32 version, u64 index length,
// UTF-8 text index, then a data section with each blob 64-byte aligned.
// Offsets in the index are fixed-width hex so the layout is computable
// before rendering.

inline constexpr uint32_t kContainerVersion = 1;

uint64_t write_checkpoint(const Checkpoint& ckpt, std::ostream& sink);
uint64_t write_checkpoint_file(const Checkpoint& ckpt, const std::string& path);

Checkpoint read_checkpoint(std::istream& source);
Checkpoint read_checkpoint_file(const std::string& path);

// Closed-form container size for a planned set of entries; matches the
// writer byte-for-byte for the same descriptions.
struct EntryDesc {
    std::string name;
    LayerGroup group = LayerGroup::Other;
    std::string dtype;  // f32 | f16 | q-lin | q-log
    int bits = 32;
    Granularity granularity = Granularity::PerChannel;
    std::vector<int64_t> shape;
};

EntryDesc describe(const CheckpointEntry& e);
uint64_t entry_data_bytes(const EntryDesc& d);
uint64_t entry_scale_bytes(const EntryDesc& d);
uint64_t predict_container_size(const std::vector<EntryDesc>& entries,
                                const std::map<std::string, std::string>& meta);

// Ingestion of externally produced weights: a directory of raw little-endian
// f32 binaries `<name>.bin` with text sidecars `<name>.shape` (first line:
// dimension sizes, optional second line: `group <tag>`).
Checkpoint import_raw_dir(const std::string& dir);

// Reads either an MQE1 file or a raw directory.
Checkpoint load_checkpoint_any(const std::string& path);

}  // namespace moqe
