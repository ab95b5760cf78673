#include "moqe/sizing.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace moqe {

const QuantRule* QuantPlan::rule_for(LayerGroup g, std::optional<int> layer) const {
    for (const auto& r : rules) {
        if (r.group != g) continue;
        if (r.subset != LayerSubset::All) {
            if (!layer) continue;
            if (r.subset == LayerSubset::Even && *layer % 2 != 0) continue;
            if (r.subset == LayerSubset::Odd && *layer % 2 != 1) continue;
        }
        return &r;
    }
    return nullptr;
}

QuantPlan QuantPlan::moqe(int bits) {
    QuantPlan p;
    p.rules.push_back(QuantRule{LayerGroup::ExpertFFN, LayerSubset::All, bits,
                                Scheme::LinearAbsMax, Granularity::PerChannel});
    return p;
}

QuantPlan QuantPlan::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("cannot read plan file: " + path);
    QuantPlan plan;
    std::string line;
    while (std::getline(f, line)) {
        auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::istringstream ls(line);
        std::string head;
        if (!(ls >> head)) continue;
        if (head == "default_bits") {
            if (!(ls >> plan.default_bits) || (plan.default_bits != 16 && plan.default_bits != 32))
                throw std::invalid_argument("plan: default_bits must be 16 or 32");
            continue;
        }
        if (head != "rule") throw std::invalid_argument("plan: unknown directive " + head);
        QuantRule r;
        std::string tok;
        while (ls >> tok) {
            auto eq = tok.find('=');
            if (eq == std::string::npos) throw std::invalid_argument("plan: bad token " + tok);
            std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
            if (key == "group") r.group = layer_group_from_string(val);
            else if (key == "layers") r.subset = layer_subset_from_string(val);
            else if (key == "bits") r.bits = std::stoi(val);
            else if (key == "scheme") r.scheme = val == "log" ? Scheme::LogScale : Scheme::LinearAbsMax;
            else if (key == "granularity")
                r.granularity = val == "tensor" ? Granularity::PerTensor : Granularity::PerChannel;
            else throw std::invalid_argument("plan: unknown key " + key);
        }
        if (!valid_bits(r.bits)) throw std::invalid_argument("plan: bits must be one of 2,3,4,8");
        plan.rules.push_back(r);
    }
    return plan;
}

GroupCounts param_count(const ModelSpec& spec) {
    spec.validate();
    const uint64_t d = static_cast<uint64_t>(spec.d_model);
    const uint64_t f = static_cast<uint64_t>(spec.d_ffn);
    const uint64_t attn = 4 * d * d + 4 * d;
    const uint64_t ffn = 2 * d * f + f + d;

    uint64_t enc_moe = 0, dec_moe = 0;
    for (int i = 0; i < spec.enc_layers; ++i) enc_moe += spec.moe_layer(i) ? 1 : 0;
    for (int i = 0; i < spec.dec_layers; ++i) dec_moe += spec.moe_layer(i) ? 1 : 0;
    const uint64_t n_moe = enc_moe + dec_moe;
    const uint64_t n_dense =
        static_cast<uint64_t>(spec.enc_layers + spec.dec_layers) - n_moe;
    const uint64_t norms = 2 * static_cast<uint64_t>(spec.enc_layers) +
                           3 * static_cast<uint64_t>(spec.dec_layers) +
                           (spec.enc_layers > 0 ? 1 : 0) + (spec.dec_layers > 0 ? 1 : 0);

    GroupCounts c;
    c.by_group[LayerGroup::Embedding] = static_cast<uint64_t>(spec.vocab) * d;
    c.by_group[LayerGroup::SelfAttention] =
        static_cast<uint64_t>(spec.enc_layers + spec.dec_layers) * attn;
    c.by_group[LayerGroup::CrossAttention] = static_cast<uint64_t>(spec.dec_layers) * attn;
    c.by_group[LayerGroup::ExpertFFN] = n_moe * static_cast<uint64_t>(spec.n_experts) * ffn;
    c.by_group[LayerGroup::DenseFFN] = n_dense * ffn;
    c.by_group[LayerGroup::Router] = n_moe * d * static_cast<uint64_t>(spec.n_experts);
    c.by_group[LayerGroup::Other] = norms * 2 * d;
    for (const auto& [g, n] : c.by_group) c.total += n;
    return c;
}

SizeReport size_report(const ModelSpec& spec, const QuantPlan& plan) {
    SizeReport rep;
    rep.params = param_count(spec);
    rep.moe_weight_fraction =
        static_cast<double>(rep.params.of(LayerGroup::ExpertFFN)) / static_cast<double>(rep.params.total);

    Checkpoint metaonly;
    spec.save_to_meta(metaonly);

    std::vector<EntryDesc> base = model_tensor_descs(spec);
    std::vector<EntryDesc> fp16 = base;
    for (auto& d : fp16) {
        d.dtype = "f16";
        d.bits = 16;
    }
    rep.fp16_bytes = predict_container_size(fp16, metaonly.meta);

    rep.planned_entries = base;
    for (auto& d : rep.planned_entries) {
        const QuantRule* r =
            d.shape.size() == 2 ? plan.rule_for(d.group, layer_index_of(d.name)) : nullptr;
        if (r) {
            d.dtype = r->scheme == Scheme::LinearAbsMax ? "q-lin" : "q-log";
            d.bits = r->bits;
            d.granularity = r->granularity;
            rep.code_bytes += entry_data_bytes(d);
            rep.scale_bytes += entry_scale_bytes(d);
        } else {
            d.dtype = plan.default_bits == 32 ? "f32" : "f16";
            d.bits = plan.default_bits;
        }
    }
    rep.planned_bytes = predict_container_size(rep.planned_entries, metaonly.meta);
    rep.ratio = static_cast<double>(rep.planned_bytes) / static_cast<double>(rep.fp16_bytes);
    return rep;
}

VerifyResult verify_against_checkpoint(const SizeReport& report, const std::string& ckpt_path) {
    VerifyResult res;
    res.predicted = report.planned_bytes;
    res.actual = std::filesystem::file_size(ckpt_path);
    res.rel_delta = std::abs(static_cast<double>(res.actual) - static_cast<double>(res.predicted)) /
                    static_cast<double>(res.predicted);
    res.pass = res.rel_delta <= 0.01;
    if (res.pass) return res;

    // List per-tensor byte deltas against the prediction.
    Checkpoint ckpt = read_checkpoint_file(ckpt_path);
    std::map<std::string, uint64_t> predicted;
    for (const auto& d : report.planned_entries)
        predicted[d.name] = entry_data_bytes(d) + entry_scale_bytes(d);
    for (const auto& e : ckpt.entries) {
        EntryDesc d = describe(e);
        uint64_t actual = entry_data_bytes(d) + entry_scale_bytes(d);
        auto it = predicted.find(e.name);
        if (it == predicted.end()) {
            res.deltas.push_back(e.name + ": unexpected tensor (" + std::to_string(actual) + " bytes)");
        } else {
            if (it->second != actual)
                res.deltas.push_back(e.name + ": predicted " + std::to_string(it->second) +
                                     " bytes, actual " + std::to_string(actual));
            predicted.erase(it);
        }
    }
    for (const auto& [name, bytes] : predicted)
        res.deltas.push_back(name + ": missing from checkpoint (predicted " + std::to_string(bytes) + " bytes)");
    return res;
}

std::string to_text(const SizeReport& r) {
    std::ostringstream os;
    os << "parameters total: " << r.params.total << '\n';
    for (const auto& [g, n] : r.params.by_group)
        if (n) os << "  " << to_string(g) << ": " << n << '\n';
    os << "moe weight fraction: " << r.moe_weight_fraction << '\n';
    os << "fp16 bytes: " << r.fp16_bytes << '\n';
    os << "planned bytes: " << r.planned_bytes << " (codes " << r.code_bytes << ", scales "
       << r.scale_bytes << ")\n";
    os << "size ratio vs fp16: " << r.ratio << '\n';
    return os.str();
}

std::string to_tsv(const SizeReport& r) {
    std::ostringstream os;
    os << "total_params\tmoe_weight_fraction\tfp16_bytes\tplanned_bytes\tcode_bytes\tscale_bytes\tratio\n";
    os << r.params.total << '\t' << r.moe_weight_fraction << '\t' << r.fp16_bytes << '\t'
       << r.planned_bytes << '\t' << r.code_bytes << '\t' << r.scale_bytes << '\t' << r.ratio << '\n';
    return os.str();
}

}  // namespace moqe
