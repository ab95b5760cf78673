#include "moqe/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "MQE1 serialization assumes a little-endian host");

namespace moqe {

namespace fs = std::filesystem;

CheckpointEntry CheckpointEntry::f32(std::string name, LayerGroup g, Tensor t) {
    return CheckpointEntry{std::move(name), g, Kind::F32, std::move(t), {}};
}
CheckpointEntry CheckpointEntry::f16(std::string name, LayerGroup g, Tensor t) {
    return CheckpointEntry{std::move(name), g, Kind::F16, std::move(t), {}};
}
CheckpointEntry CheckpointEntry::quantized(std::string name, LayerGroup g, QuantizedTensor qt) {
    return CheckpointEntry{std::move(name), g, Kind::Quantized, {}, std::move(qt)};
}

int64_t CheckpointEntry::numel() const {
    return kind == Kind::Quantized ? qtensor.numel() : tensor.numel();
}

void Checkpoint::add(CheckpointEntry e) {
    if (find(e.name)) throw CheckpointError(CkptError::InvalidTensor, "duplicate tensor name: " + e.name);
    entries.push_back(std::move(e));
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}
CheckpointEntry* Checkpoint::find(const std::string& name) {
    for (auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

namespace {

constexpr uint64_t kAlign = 64;
constexpr size_t kHeaderBytes = 16;  // magic + u32 version + u64 index length

uint64_t align_up(uint64_t x) { return (x + kAlign - 1) & ~(kAlign - 1); }

bool clean_token(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s)
        if (std::isspace(static_cast<unsigned char>(c)) || std::iscntrl(static_cast<unsigned char>(c)))
            return false;
    return true;
}

std::string shape_string(const std::vector<int64_t>& shape) {
    std::string out;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) out += 'x';
        out += std::to_string(shape[i]);
    }
    return out;
}

std::string hex16(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

struct Region {
    uint64_t data_off = 0, data_len = 0, scale_off = 0, scale_len = 0;
};

std::string index_line(const EntryDesc& d, const Region& r) {
    std::string gran = (d.dtype == "f32" || d.dtype == "f16") ? "-" : to_string(d.granularity);
    std::string line = "t " + d.name + ' ' + to_string(d.group) + ' ' + d.dtype + ' ' +
                       std::to_string(d.bits) + ' ' + gran + ' ' + shape_string(d.shape) + ' ' +
                       hex16(r.data_off) + ' ' + hex16(r.data_len) + ' ' + hex16(r.scale_off) +
                       ' ' + hex16(r.scale_len) + '\n';
    return line;
}

struct Layout {
    std::string index;  // fully rendered index text
    std::vector<Region> regions;
    uint64_t file_size = 0;
};

Layout compute_layout(const std::vector<EntryDesc>& entries,
                      const std::map<std::string, std::string>& meta) {
    Layout lay;
    std::string metatext;
    for (const auto& [k, v] : meta) {
        if (!clean_token(k) || !clean_token(v))
            throw CheckpointError(CkptError::InvalidTensor, "meta key/value must be whitespace-free: " + k);
        metatext += "m " + k + ' ' + v + '\n';
    }
    // Offsets are fixed-width, so the index length is known before offsets are.
    uint64_t index_len = metatext.size();
    for (const auto& d : entries) index_len += index_line(d, Region{}).size();

    uint64_t cursor = align_up(kHeaderBytes + index_len);
    lay.regions.resize(entries.size());
    for (size_t i = 0; i < entries.size(); ++i) {
        Region& r = lay.regions[i];
        r.data_len = entry_data_bytes(entries[i]);
        r.scale_len = entry_scale_bytes(entries[i]);
        r.data_off = cursor;
        cursor = r.data_off + r.data_len;
        if (r.scale_len) {
            r.scale_off = align_up(cursor);
            cursor = r.scale_off + r.scale_len;
        }
        cursor = align_up(cursor);
    }
    lay.file_size = entries.empty() ? kHeaderBytes + index_len : cursor;

    lay.index = std::move(metatext);
    for (size_t i = 0; i < entries.size(); ++i) lay.index += index_line(entries[i], lay.regions[i]);
    return lay;
}

void validate_entry(const CheckpointEntry& e) {
    if (!clean_token(e.name))
        throw CheckpointError(CkptError::InvalidTensor, "invalid tensor name");
    const auto& shape = e.shape();
    if (shape.empty())
        throw CheckpointError(CkptError::InvalidTensor, e.name + ": empty shape");
    for (int64_t d : shape)
        if (d <= 0)
            throw CheckpointError(CkptError::InvalidTensor, e.name + ": unserializable shape (dimension <= 0)");

    if (e.kind != CheckpointEntry::Kind::Quantized) {
        if (static_cast<int64_t>(e.tensor.data.size()) != e.tensor.numel())
            throw CheckpointError(CkptError::InvalidTensor, e.name + ": data/shape mismatch");
        if (!e.tensor.all_finite())
            throw CheckpointError(CkptError::InvalidTensor, e.name + ": non-finite values");
        if (e.kind == CheckpointEntry::Kind::F16)
            for (float v : e.tensor.data)
                if (f16_bits_to_f32(f32_to_f16_bits(v)) != v)
                    throw CheckpointError(CkptError::InvalidTensor,
                                          e.name + ": value not binary16-representable for f16 storage");
    } else {
        const auto& q = e.qtensor;
        if (!valid_bits(q.bits) || q.codes.bits != q.bits)
            throw CheckpointError(CkptError::InvalidTensor, e.name + ": bad bit width");
        if (static_cast<int64_t>(q.codes.codes.size()) != q.numel())
            throw CheckpointError(CkptError::InvalidTensor, e.name + ": codes/shape mismatch");
        size_t want = q.granularity == Granularity::PerTensor ? 1 : static_cast<size_t>(q.cols());
        if (q.scales.size() != want)
            throw CheckpointError(CkptError::InvalidTensor, e.name + ": scale count mismatch");
        for (float s : q.scales) {
            if (!(s >= 0.0f) || !std::isfinite(s) || f16_bits_to_f32(f32_to_f16_bits(s)) != s)
                throw CheckpointError(CkptError::InvalidTensor, e.name + ": scale not a finite binary16 value");
        }
    }
}

void put_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void put_padding(std::ostream& os, uint64_t from, uint64_t to) {
    static const char zeros[kAlign] = {};
    while (from < to) {
        uint64_t n = std::min<uint64_t>(to - from, kAlign);
        put_bytes(os, zeros, static_cast<size_t>(n));
        from += n;
    }
}

}  // namespace

EntryDesc describe(const CheckpointEntry& e) {
    EntryDesc d;
    d.name = e.name;
    d.group = e.group;
    d.shape = e.shape();
    switch (e.kind) {
        case CheckpointEntry::Kind::F32:
            d.dtype = "f32";
            d.bits = 32;
            break;
        case CheckpointEntry::Kind::F16:
            d.dtype = "f16";
            d.bits = 16;
            break;
        case CheckpointEntry::Kind::Quantized:
            d.dtype = e.qtensor.scheme == Scheme::LinearAbsMax ? "q-lin" : "q-log";
            d.bits = e.qtensor.bits;
            d.granularity = e.qtensor.granularity;
            break;
    }
    return d;
}

uint64_t entry_data_bytes(const EntryDesc& d) {
    uint64_t n = 1;
    for (int64_t s : d.shape) n *= static_cast<uint64_t>(s);
    if (d.dtype == "f32") return 4 * n;
    if (d.dtype == "f16") return 2 * n;
    return packed_size(d.bits, static_cast<size_t>(n));
}

uint64_t entry_scale_bytes(const EntryDesc& d) {
    if (d.dtype == "f32" || d.dtype == "f16") return 0;
    uint64_t channels = d.shape.size() == 2 ? static_cast<uint64_t>(d.shape[1]) : 1;
    return 2 * (d.granularity == Granularity::PerTensor ? 1 : channels);
}

uint64_t predict_container_size(const std::vector<EntryDesc>& entries,
                                const std::map<std::string, std::string>& meta) {
    return compute_layout(entries, meta).file_size;
}

uint64_t write_checkpoint(const Checkpoint& ckpt, std::ostream& sink) {
    std::vector<EntryDesc> descs;
    descs.reserve(ckpt.entries.size());
    for (const auto& e : ckpt.entries) {
        validate_entry(e);
        descs.push_back(describe(e));
    }
    Layout lay = compute_layout(descs, ckpt.meta);

    put_bytes(sink, "MQE1", 4);
    uint32_t version = kContainerVersion;
    put_bytes(sink, &version, 4);
    uint64_t index_len = lay.index.size();
    put_bytes(sink, &index_len, 8);
    put_bytes(sink, lay.index.data(), lay.index.size());

    uint64_t cursor = kHeaderBytes + index_len;
    for (size_t i = 0; i < ckpt.entries.size(); ++i) {
        const auto& e = ckpt.entries[i];
        const Region& r = lay.regions[i];
        put_padding(sink, cursor, r.data_off);
        cursor = r.data_off;
        if (e.kind == CheckpointEntry::Kind::F32) {
            put_bytes(sink, e.tensor.data.data(), e.tensor.data.size() * 4);
        } else if (e.kind == CheckpointEntry::Kind::F16) {
            std::vector<uint16_t> half(e.tensor.data.size());
            for (size_t k = 0; k < half.size(); ++k) half[k] = f32_to_f16_bits(e.tensor.data[k]);
            put_bytes(sink, half.data(), half.size() * 2);
        } else {
            std::vector<uint8_t> packed;
            try {
                packed = pack(e.qtensor.codes);
            } catch (const std::exception& ex) {
                throw CheckpointError(CkptError::InvalidTensor, e.name + ": " + ex.what());
            }
            put_bytes(sink, packed.data(), packed.size());
        }
        cursor += r.data_len;
        if (r.scale_len) {
            put_padding(sink, cursor, r.scale_off);
            std::vector<uint16_t> half(e.qtensor.scales.size());
            for (size_t k = 0; k < half.size(); ++k) half[k] = f32_to_f16_bits(e.qtensor.scales[k]);
            put_bytes(sink, half.data(), half.size() * 2);
            cursor = r.scale_off + r.scale_len;
        }
    }
    put_padding(sink, cursor, lay.file_size);
    sink.flush();
    if (!sink) throw CheckpointError(CkptError::Truncated, "write failed (sink error)");
    return lay.file_size;
}

uint64_t write_checkpoint_file(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError(CkptError::Truncated, "cannot open for write: " + path);
    return write_checkpoint(ckpt, f);
}

namespace {

std::vector<int64_t> parse_shape(const std::string& s) {
    std::vector<int64_t> shape;
    size_t pos = 0;
    while (pos < s.size()) {
        size_t next = s.find('x', pos);
        std::string tok = s.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
        size_t used = 0;
        int64_t d = std::stoll(tok, &used);
        if (used != tok.size() || d <= 0) throw std::invalid_argument("bad dimension");
        shape.push_back(d);
        if (next == std::string::npos) break;
        pos = next + 1;
    }
    if (shape.empty()) throw std::invalid_argument("empty shape");
    return shape;
}

uint64_t parse_hex(const std::string& s) {
    size_t used = 0;
    uint64_t v = std::stoull(s, &used, 16);
    if (used != s.size()) throw std::invalid_argument("bad hex field");
    return v;
}

}  // namespace

Checkpoint read_checkpoint(std::istream& source) {
    std::string bytes((std::istreambuf_iterator<char>(source)), std::istreambuf_iterator<char>());
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "MQE1", 4) != 0)
        throw CheckpointError(CkptError::BadMagic, "bad magic (not an MQE1 container)");
    if (bytes.size() < kHeaderBytes)
        throw CheckpointError(CkptError::Truncated, "truncated header");
    uint32_t version;
    std::memcpy(&version, bytes.data() + 4, 4);
    if (version != kContainerVersion)
        throw CheckpointError(CkptError::BadVersion,
                              "unsupported container version " + std::to_string(version));
    uint64_t index_len;
    std::memcpy(&index_len, bytes.data() + 8, 8);
    if (bytes.size() < kHeaderBytes + index_len)
        throw CheckpointError(CkptError::Truncated, "truncated index");

    Checkpoint ckpt;
    std::istringstream index(bytes.substr(kHeaderBytes, index_len));
    std::string line;
    while (std::getline(index, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "m") {
            std::string k, v;
            if (!(ls >> k >> v)) throw CheckpointError(CkptError::BadIndex, "malformed meta line");
            ckpt.meta[k] = v;
            continue;
        }
        if (tag != "t") throw CheckpointError(CkptError::BadIndex, "unknown index record: " + tag);
        std::string name, group, dtype, gran, shape_s, off_s, len_s, soff_s, slen_s;
        int bits;
        if (!(ls >> name >> group >> dtype >> bits >> gran >> shape_s >> off_s >> len_s >> soff_s >> slen_s))
            throw CheckpointError(CkptError::BadIndex, "malformed tensor record");
        std::vector<int64_t> shape;
        uint64_t off, len, soff, slen;
        LayerGroup lg;
        try {
            shape = parse_shape(shape_s);
            off = parse_hex(off_s);
            len = parse_hex(len_s);
            soff = parse_hex(soff_s);
            slen = parse_hex(slen_s);
            lg = layer_group_from_string(group);
        } catch (const std::exception& ex) {
            throw CheckpointError(CkptError::BadIndex, name + ": " + ex.what());
        }
        uint64_t n = 1;
        for (int64_t d : shape) n *= static_cast<uint64_t>(d);

        EntryDesc desc{name, lg, dtype, bits, Granularity::PerChannel, shape};
        if (dtype == "q-lin" || dtype == "q-log") {
            if (gran == "channel")
                desc.granularity = Granularity::PerChannel;
            else if (gran == "tensor")
                desc.granularity = Granularity::PerTensor;
            else
                throw CheckpointError(CkptError::BadIndex, name + ": bad granularity " + gran);
            if (!valid_bits(bits))
                throw CheckpointError(CkptError::BadIndex, name + ": bad bit width");
        } else if (dtype != "f32" && dtype != "f16") {
            throw CheckpointError(CkptError::BadIndex, name + ": unknown dtype " + dtype);
        }
        if (len != entry_data_bytes(desc) || slen != entry_scale_bytes(desc))
            throw CheckpointError(CkptError::BadIndex, name + ": index/offset inconsistency");
        if (off + len > bytes.size() || (slen && soff + slen > bytes.size()))
            throw CheckpointError(CkptError::Truncated, "truncated data section for tensor " + name);

        const uint8_t* data = reinterpret_cast<const uint8_t*>(bytes.data()) + off;
        if (dtype == "f32") {
            Tensor t(shape);
            std::memcpy(t.data.data(), data, static_cast<size_t>(len));
            ckpt.add(CheckpointEntry::f32(name, lg, std::move(t)));
        } else if (dtype == "f16") {
            Tensor t(shape);
            for (uint64_t i = 0; i < n; ++i) {
                uint16_t h;
                std::memcpy(&h, data + 2 * i, 2);
                t.data[static_cast<size_t>(i)] = f16_bits_to_f32(h);
            }
            ckpt.add(CheckpointEntry::f16(name, lg, std::move(t)));
        } else {
            QuantizedTensor qt;
            qt.scheme = dtype == "q-lin" ? Scheme::LinearAbsMax : Scheme::LogScale;
            qt.bits = bits;
            qt.granularity = desc.granularity;
            qt.shape = shape;
            qt.codes = unpack(data, static_cast<size_t>(len), bits, static_cast<size_t>(n));
            size_t nscales = static_cast<size_t>(slen / 2);
            qt.scales.resize(nscales);
            const uint8_t* sdata = reinterpret_cast<const uint8_t*>(bytes.data()) + soff;
            for (size_t i = 0; i < nscales; ++i) {
                uint16_t h;
                std::memcpy(&h, sdata + 2 * i, 2);
                qt.scales[i] = f16_bits_to_f32(h);
            }
            ckpt.add(CheckpointEntry::quantized(name, lg, std::move(qt)));
        }
    }
    return ckpt;
}

Checkpoint read_checkpoint_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError(CkptError::Truncated, "cannot open: " + path);
    return read_checkpoint(f);
}

Checkpoint import_raw_dir(const std::string& dir) {
    std::vector<std::string> stems;
    for (const auto& ent : fs::directory_iterator(dir)) {
        if (ent.path().extension() == ".shape") stems.push_back(ent.path().stem().string());
    }
    std::sort(stems.begin(), stems.end());

    Checkpoint ckpt;
    for (const auto& name : stems) {
        fs::path side = fs::path(dir) / (name + ".shape");
        fs::path bin = fs::path(dir) / (name + ".bin");
        std::ifstream sf(side);
        if (!sf) throw CheckpointError(CkptError::BadIndex, "cannot read sidecar: " + side.string());
        std::string dims_line, group_line;
        std::getline(sf, dims_line);
        std::getline(sf, group_line);
        std::istringstream ds(dims_line);
        std::vector<int64_t> shape;
        int64_t d;
        while (ds >> d) shape.push_back(d);
        if (shape.empty())
            throw CheckpointError(CkptError::BadIndex, name + ": sidecar has no dimensions");
        LayerGroup lg = LayerGroup::Other;
        std::istringstream gs(group_line);
        std::string word, tagname;
        if (gs >> word >> tagname && word == "group") lg = layer_group_from_string(tagname);

        Tensor t(shape);
        std::ifstream bf(bin, std::ios::binary);
        if (!bf) throw CheckpointError(CkptError::Truncated, "cannot read: " + bin.string());
        bf.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * 4));
        if (bf.gcount() != static_cast<std::streamsize>(t.data.size() * 4))
            throw CheckpointError(CkptError::Truncated, name + ": raw binary shorter than shape implies");
        ckpt.add(CheckpointEntry::f32(name, lg, std::move(t)));
    }
    return ckpt;
}

Checkpoint load_checkpoint_any(const std::string& path) {
    if (fs::is_directory(path)) return import_raw_dir(path);
    return read_checkpoint_file(path);
}

}  // namespace moqe
