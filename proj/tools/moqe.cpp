// moqe: weight-only quantization toolkit for MoE transformer checkpoints.
//
// Exit codes: 0 success, 1 usage error, 2 data/format error, 3 invariant
// failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "moqe/analysis.hpp"
#include "moqe/bench.hpp"
#include "moqe/sizing.hpp"

using namespace moqe;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitInvariant = 3;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

int default_threads() {
    const char* env = std::getenv("MOQE_THREADS");
    if (!env) return 1;
    int n = std::atoi(env);
    return n > 0 ? n : 1;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, ','))
        if (!cur.empty()) out.push_back(cur);
    return out;
}

std::set<LayerGroup> parse_groups(const std::string& list) {
    std::set<LayerGroup> groups;
    for (const std::string& tok : split_list(list)) {
        if (tok == "none") continue;
        groups.insert(layer_group_from_string(tok));
    }
    if (groups.empty()) throw UsageError("empty group list");
    return groups;
}

Scheme parse_scheme(const std::string& s) {
    if (s == "linear") return Scheme::LinearAbsMax;
    if (s == "log") return Scheme::LogScale;
    throw UsageError("unknown scheme: " + s);
}

Granularity parse_granularity(const std::string& s) {
    if (s == "channel") return Granularity::PerChannel;
    if (s == "tensor") return Granularity::PerTensor;
    throw UsageError("unknown granularity: " + s);
}

// One sequence per line, whitespace-separated token ids.
std::vector<std::vector<int32_t>> read_probe(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw CheckpointError(CkptError::Truncated, "cannot read token file: " + path);
    std::vector<std::vector<int32_t>> sequences;
    std::string line;
    while (std::getline(f, line)) {
        std::istringstream ls(line);
        std::vector<int32_t> seq;
        int64_t id;
        while (ls >> id) {
            if (id < 0 || id > INT32_MAX)
                throw CheckpointError(CkptError::BadIndex, "bad token id in " + path);
            seq.push_back(static_cast<int32_t>(id));
        }
        if (!seq.empty()) sequences.push_back(std::move(seq));
    }
    if (sequences.empty())
        throw CheckpointError(CkptError::Truncated, "no token sequences in " + path);
    return sequences;
}

ModelSpec spec_from_checkpoint(const Checkpoint& ckpt) {
    auto spec = ModelSpec::from_meta(ckpt);
    if (!spec)
        throw CheckpointError(CkptError::BadIndex,
                              "checkpoint carries no model spec metadata (spec.* keys)");
    return *spec;
}

// Size summary of an in-memory checkpoint against its all-f16 serialization.
void print_size_summary(const Checkpoint& ckpt) {
    std::vector<EntryDesc> actual, fp16;
    uint64_t code_bytes = 0, scale_bytes = 0;
    for (const auto& e : ckpt.entries) {
        EntryDesc d = describe(e);
        if (e.is_quantized()) {
            code_bytes += entry_data_bytes(d);
            scale_bytes += entry_scale_bytes(d);
        }
        actual.push_back(d);
        d.dtype = "f16";
        d.bits = 16;
        fp16.push_back(std::move(d));
    }
    uint64_t planned = predict_container_size(actual, ckpt.meta);
    uint64_t base = predict_container_size(fp16, ckpt.meta);
    std::cout << "container bytes: " << planned << '\n';
    std::cout << "fp16 baseline bytes: " << base << '\n';
    std::cout << "quantized payload: codes " << code_bytes << ", scales " << scale_bytes << '\n';
    std::cout << "size ratio vs fp16: " << static_cast<double>(planned) / static_cast<double>(base)
              << '\n';
}

int run_quantize(const std::string& input, const std::string& output, const std::string& groups,
                 int bits, const std::string& scheme, const std::string& granularity,
                 const std::string& subset, const std::string& log_mode, int threads) {
    Checkpoint ckpt = load_checkpoint_any(input);
    Checkpoint q = quantize_model(
        ckpt, parse_groups(groups), bits, parse_scheme(scheme), parse_granularity(granularity),
        layer_subset_from_string(subset),
        log_mode == "absmax" ? LogScaleMode::AbsMax : LogScaleMode::MseOptimal, threads);
    write_checkpoint_file(q, output);
    std::cout << "wrote " << output << '\n';
    print_size_summary(q);
    return 0;
}

int run_analyze(const std::string& input, bool per_layer, const std::string& format) {
    Checkpoint ckpt = load_checkpoint_any(input);
    const bool tsv = format == "tsv";
    if (tsv) std::cout << stats_tsv_header();

    auto emit = [&](const std::string& name, const Tensor& t) {
        if (t.data.size() < 2) return;
        DistributionStats s = weight_stats(t);
        double skew = std::numeric_limits<double>::quiet_NaN();
        try {
            skew = skewness(t);
        } catch (const std::invalid_argument&) {
            // constant tensor: skew undefined
        }
        std::cout << (tsv ? to_tsv_row(name, s, skew) : to_text(name, s, skew));
    };

    if (per_layer) {
        for (const auto& e : ckpt.entries) {
            if (e.is_quantized()) continue;
            emit(e.name, e.tensor);
        }
    } else {
        std::map<LayerGroup, Tensor> pooled;
        for (const auto& e : ckpt.entries) {
            if (e.is_quantized()) continue;
            Tensor& t = pooled[e.group];
            t.data.insert(t.data.end(), e.tensor.data.begin(), e.tensor.data.end());
        }
        for (auto& [g, t] : pooled) {
            t.shape = {static_cast<int64_t>(t.data.size())};
            emit(to_string(g), t);
        }
    }
    return 0;
}

int run_sensitivity(const std::string& input, const std::string& probe_path,
                    const std::string& groups, const std::string& sweep,
                    const std::string& scheme, const std::string& granularity) {
    Checkpoint ckpt = load_checkpoint_any(input);
    ModelSpec spec = spec_from_checkpoint(ckpt);
    auto probe = read_probe(probe_path);
    Scheme sch = parse_scheme(scheme);
    Granularity gran = parse_granularity(granularity);

    std::vector<int> bits;
    for (const std::string& tok : split_list(sweep)) {
        int b = std::stoi(tok);
        if (!valid_bits(b)) throw UsageError("bits must be one of 2,3,4,8");
        bits.push_back(b);
    }
    if (bits.empty()) throw UsageError("empty bits sweep");

    std::cout << sensitivity_tsv_header();
    for (LayerGroup g : parse_groups(groups))
        for (int b : bits)
            std::cout << to_tsv_row(group_sensitivity(ckpt, spec, probe, g, b, sch, gran));
    return 0;
}

int run_size_report(const std::string& spec_path, const std::string& input,
                    const std::string& plan_path, bool verify, const std::string& format) {
    ModelSpec spec;
    if (!spec_path.empty()) {
        spec = ModelSpec::from_file(spec_path);
    } else {
        spec = spec_from_checkpoint(load_checkpoint_any(input));
    }
    QuantPlan plan = QuantPlan::from_file(plan_path);
    SizeReport rep = size_report(spec, plan);
    std::cout << (format == "tsv" ? to_tsv(rep) : to_text(rep));

    if (verify) {
        if (input.empty()) throw UsageError("--verify needs --input");
        VerifyResult v = verify_against_checkpoint(rep, input);
        std::cout << "verify: predicted " << v.predicted << " actual " << v.actual
                  << " rel_delta " << v.rel_delta << (v.pass ? " PASS" : " FAIL") << '\n';
        if (!v.pass) {
            for (const auto& d : v.deltas) std::cerr << "  " << d << '\n';
            return kExitInvariant;
        }
    }
    return 0;
}

int run_forward(const std::string& input, const std::string& tokens, const std::string& out,
                bool greedy) {
    Checkpoint ckpt = load_checkpoint_any(input);
    ModelSpec spec = spec_from_checkpoint(ckpt);
    auto probe = read_probe(tokens);
    Tensor logits = model_logits(probe, ckpt, spec);

    std::ofstream f(out);
    if (!f) throw CheckpointError(CkptError::Truncated, "cannot write " + out);
    f.precision(9);
    for (int64_t i = 0; i < logits.rows(); ++i) {
        if (greedy) {
            int64_t best = 0;
            for (int64_t j = 1; j < logits.cols(); ++j)
                if (logits.at(i, j) > logits.at(i, best)) best = j;
            f << best << '\n';
        } else {
            for (int64_t j = 0; j < logits.cols(); ++j)
                f << logits.at(i, j) << (j + 1 == logits.cols() ? '\n' : ' ');
        }
    }
    std::cout << "wrote " << out << " (" << logits.rows() << " rows)\n";
    return 0;
}

int run_bench(const std::string& input, const std::string& variants_list,
              const std::string& probe_path, int threads, int reps) {
    Checkpoint base = load_checkpoint_any(input);
    ModelSpec spec = spec_from_checkpoint(base);

    std::vector<std::vector<int32_t>> probe;
    if (!probe_path.empty()) {
        probe = read_probe(probe_path);
    } else {
        std::vector<int32_t> seq;
        for (int32_t t = 0; t < 16; ++t) seq.push_back(t % spec.vocab);
        probe.push_back(std::move(seq));
    }

    // Variants: "fp" for the input as-is, "intN" for expert-only linear
    // channel-wise quantization at N bits.
    std::vector<Checkpoint> storage;
    std::vector<std::string> names;
    for (const std::string& tok : split_list(variants_list)) {
        if (tok == "fp") {
            storage.push_back(base);
        } else if (tok.rfind("int", 0) == 0) {
            int b = std::stoi(tok.substr(3));
            if (!valid_bits(b)) throw UsageError("unknown variant: " + tok);
            storage.push_back(quantize_model(base, {LayerGroup::ExpertFFN}, b,
                                             Scheme::LinearAbsMax, Granularity::PerChannel,
                                             LayerSubset::All, LogScaleMode::MseOptimal, threads));
        } else {
            throw UsageError("unknown variant: " + tok);
        }
        names.push_back(tok);
    }
    if (storage.empty()) throw UsageError("empty variant list");

    std::vector<BenchVariant> variants;
    for (size_t i = 0; i < storage.size(); ++i) variants.push_back({names[i], &storage[i]});
    std::cout << bench_tsv_header();
    for (const auto& row : throughput_report(spec, variants, probe, reps, threads))
        std::cout << to_tsv_row(row);
    return 0;
}

int run_selftest() {
    int failures = 0;
    auto check = [&](bool ok, const char* what) {
        std::cout << (ok ? "pass" : "FAIL") << ": " << what << '\n';
        if (!ok) ++failures;
    };
    std::mt19937 rng(2468);

    // pack/unpack round-trips
    bool pack_ok = true;
    for (int bits : {2, 3, 4, 8}) {
        std::uniform_int_distribution<int> dist(code_min(bits), code_max(bits));
        for (size_t count = 0; count <= 40 && pack_ok; ++count) {
            CodeArray c;
            c.bits = bits;
            c.codes.resize(count);
            for (auto& q : c.codes) q = static_cast<int8_t>(dist(rng));
            pack_ok = unpack(pack(c), bits, count) == c;
        }
    }
    check(pack_ok, "bit-pack round-trip");

    // linear quantizer bound (scale rounding widens s/2 by 2^(b-1)*2^-11)
    bool bound_ok = true;
    std::normal_distribution<float> nd(0.0f, 1.0f);
    for (int bits : {2, 3, 4, 8}) {
        Tensor a({32, 8});
        for (float& v : a.data) v = nd(rng);
        QuantizedTensor qt = quantize_linear(a, bits, Granularity::PerChannel);
        Tensor d = dequantize(qt);
        for (int64_t i = 0; i < a.rows() && bound_ok; ++i)
            for (int64_t j = 0; j < a.cols(); ++j) {
                double s = qt.scales[static_cast<size_t>(j)];
                double tol = s * (0.5 + std::ldexp(1.0, bits - 1) / 2048.0) + 1e-12;
                if (std::fabs(static_cast<double>(a.at(i, j)) - d.at(i, j)) > tol) {
                    bound_ok = false;
                    break;
                }
            }
    }
    check(bound_ok, "linear round-trip bound");

    // router invariants on the toy model
    ModelSpec spec = ModelSpec::toy();
    Checkpoint ckpt = build_random_checkpoint(spec, 97);
    const Tensor& rw = ckpt.find("enc.0.router.w")->tensor;
    Tensor h({5, static_cast<int64_t>(spec.d_model)});
    for (float& v : h.data) v = nd(rng);
    RouteResult route = top1_route(h, RouterState{&rw});
    bool route_ok = route.expert.size() == 5;
    for (size_t i = 0; i < route.expert.size(); ++i) {
        route_ok = route_ok && route.expert[i] >= 0 && route.expert[i] < spec.n_experts;
        route_ok = route_ok && route.gate[i] > 0.0f && route.gate[i] <= 1.0f;
    }
    check(route_ok, "top-1 routing invariants");

    // forward determinism
    std::vector<std::vector<int32_t>> probe = {{1, 2, 3, 4}};
    Tensor l1 = model_logits(probe, ckpt, spec);
    Tensor l2 = model_logits(probe, ckpt, spec);
    check(l1 == l2, "forward determinism");

    // container round-trip
    std::ostringstream os(std::ios::binary);
    write_checkpoint(ckpt, os);
    std::istringstream is(os.str(), std::ios::binary);
    check(read_checkpoint(is) == ckpt, "container round-trip");

    if (failures) {
        std::cerr << failures << " selftest failure(s)\n";
        return kExitInvariant;
    }
    std::cout << "all selftests passed\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"weight-only quantization toolkit for MoE transformer checkpoints"};
    app.require_subcommand(1);

    // quantize
    auto* q = app.add_subcommand("quantize", "quantize checkpoint weight groups");
    std::string q_in, q_out, q_groups, q_scheme = "linear", q_gran = "channel";
    std::string q_subset = "all", q_logmode = "mse";
    int q_bits = 4, q_threads = default_threads();
    q->add_option("--input", q_in, "input checkpoint (MQE1 file or raw directory)")->required();
    q->add_option("--output", q_out, "output MQE1 path")->required();
    q->add_option("--groups", q_groups, "comma list of layer groups")->required();
    q->add_option("--bits", q_bits)->check(CLI::IsMember({2, 3, 4, 8}))->required();
    q->add_option("--scheme", q_scheme)->check(CLI::IsMember({"linear", "log"}));
    q->add_option("--granularity", q_gran)->check(CLI::IsMember({"channel", "tensor"}));
    q->add_option("--layer-subset", q_subset)->check(CLI::IsMember({"even", "odd", "all"}));
    q->add_option("--log-scale-mode", q_logmode)->check(CLI::IsMember({"absmax", "mse"}));
    q->add_option("--threads", q_threads)->check(CLI::PositiveNumber);

    // analyze
    auto* an = app.add_subcommand("analyze", "weight distribution statistics");
    std::string an_in, an_format = "text";
    bool an_per_layer = false;
    an->add_option("--input", an_in)->required();
    an->add_flag("--per-layer", an_per_layer, "per tensor instead of per group");
    an->add_option("--format", an_format)->check(CLI::IsMember({"text", "tsv"}));

    // sensitivity
    auto* se = app.add_subcommand("sensitivity", "quantization sensitivity sweep");
    std::string se_in, se_probe, se_groups, se_sweep, se_scheme = "linear", se_gran = "channel";
    se->add_option("--input", se_in)->required();
    se->add_option("--probe", se_probe, "token id file, one sequence per line")->required();
    se->add_option("--groups", se_groups)->required();
    se->add_option("--bits-sweep", se_sweep, "comma list of bit widths")->required();
    se->add_option("--scheme", se_scheme)->check(CLI::IsMember({"linear", "log"}));
    se->add_option("--granularity", se_gran)->check(CLI::IsMember({"channel", "tensor"}));

    // size-report
    auto* sr = app.add_subcommand("size-report", "closed-form size arithmetic for a plan");
    std::string sr_spec, sr_in, sr_plan, sr_format = "text";
    bool sr_verify = false;
    sr->add_option("--spec", sr_spec, "model spec file");
    sr->add_option("--input", sr_in, "checkpoint with spec metadata");
    sr->add_option("--plan", sr_plan, "quantization plan file")->required();
    sr->add_flag("--verify", sr_verify, "compare prediction against --input file size");
    sr->add_option("--format", sr_format)->check(CLI::IsMember({"text", "tsv"}));

    // forward
    auto* fw = app.add_subcommand("forward", "deterministic forward pass");
    std::string fw_in, fw_tokens, fw_out;
    bool fw_greedy = false;
    fw->add_option("--input", fw_in)->required();
    fw->add_option("--tokens", fw_tokens)->required();
    fw->add_option("--out", fw_out)->required();
    fw->add_flag("--greedy", fw_greedy, "write argmax token ids instead of logits");

    // bench
    auto* be = app.add_subcommand("bench", "throughput measurements");
    std::string be_in, be_variants = "fp,int4", be_probe;
    int be_threads = default_threads(), be_reps = 5;
    be->add_option("--input", be_in)->required();
    be->add_option("--variants", be_variants, "comma list: fp, int8, int4, int3, int2");
    be->add_option("--probe", be_probe, "token id file (default: built-in)");
    be->add_option("--threads", be_threads)->check(CLI::PositiveNumber);
    be->add_option("--reps", be_reps)->check(CLI::PositiveNumber);

    auto* st = app.add_subcommand("selftest", "run embedded invariant checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (*q)
            return run_quantize(q_in, q_out, q_groups, q_bits, q_scheme, q_gran, q_subset,
                                q_logmode, q_threads);
        if (*an) return run_analyze(an_in, an_per_layer, an_format);
        if (*se) return run_sensitivity(se_in, se_probe, se_groups, se_sweep, se_scheme, se_gran);
        if (*sr) {
            if (sr_spec.empty() == sr_in.empty())
                throw UsageError("size-report needs exactly one of --spec or --input");
            return run_size_report(sr_spec, sr_in, sr_plan, sr_verify, sr_format);
        }
        if (*fw) return run_forward(fw_in, fw_tokens, fw_out, fw_greedy);
        if (*be) return run_bench(be_in, be_variants, be_probe, be_threads, be_reps);
        if (*st) return run_selftest();
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const CheckpointError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitData;
    }
    return kExitUsage;
}
