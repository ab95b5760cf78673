#include "moqe/model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace moqe {

// --- ModelSpec -------------------------------------------------------------

void ModelSpec::validate() const {
    if (enc_layers < 0 || dec_layers < 0 || enc_layers + dec_layers == 0)
        throw std::invalid_argument("spec: need at least one layer");
    if (d_model <= 0 || d_ffn <= 0 || n_heads <= 0 || vocab <= 0 || n_experts < 1)
        throw std::invalid_argument("spec: dimensions must be positive");
    if (d_model % n_heads != 0)
        throw std::invalid_argument("spec: d_model must be divisible by n_heads");
}

ModelSpec ModelSpec::toy() { return ModelSpec{}; }

ModelSpec ModelSpec::reference_large() {
    ModelSpec s;
    s.enc_layers = 24;
    s.dec_layers = 12;
    s.d_model = 1024;
    s.d_ffn = 4096;
    s.n_heads = 16;
    s.vocab = 128000;
    s.n_experts = 32;
    s.moe_placement = MoePlacement::Even;
    return s;
}

ModelSpec ModelSpec::dense_of(const ModelSpec& s) {
    ModelSpec d = s;
    d.n_experts = 1;
    return d;
}

namespace {

const char* placement_str(MoePlacement p) {
    switch (p) {
        case MoePlacement::Even: return "even";
        case MoePlacement::Odd: return "odd";
        case MoePlacement::All: return "all";
    }
    return "even";
}

MoePlacement placement_from(const std::string& s) {
    if (s == "even") return MoePlacement::Even;
    if (s == "odd") return MoePlacement::Odd;
    if (s == "all") return MoePlacement::All;
    throw std::invalid_argument("spec: bad moe_placement " + s);
}

}  // namespace

LayerSubset layer_subset_from_string(const std::string& s) {
    if (s == "even") return LayerSubset::Even;
    if (s == "odd") return LayerSubset::Odd;
    if (s == "all") return LayerSubset::All;
    throw std::invalid_argument("bad layer subset: " + s);
}

const char* to_string(LayerSubset s) {
    switch (s) {
        case LayerSubset::Even: return "even";
        case LayerSubset::Odd: return "odd";
        case LayerSubset::All: return "all";
    }
    return "all";
}

ModelSpec ModelSpec::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("cannot read spec file: " + path);
    ModelSpec s;
    std::string line;
    while (std::getline(f, line)) {
        for (char& c : line)
            if (c == '=') c = ' ';
        auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::istringstream ls(line);
        std::string key;
        if (!(ls >> key)) continue;
        std::string val;
        if (!(ls >> val)) throw std::invalid_argument("spec: missing value for " + key);
        if (key == "enc_layers") s.enc_layers = std::stoi(val);
        else if (key == "dec_layers") s.dec_layers = std::stoi(val);
        else if (key == "d_model") s.d_model = std::stoi(val);
        else if (key == "d_ffn") s.d_ffn = std::stoi(val);
        else if (key == "n_heads") s.n_heads = std::stoi(val);
        else if (key == "vocab") s.vocab = std::stoi(val);
        else if (key == "n_experts") s.n_experts = std::stoi(val);
        else if (key == "moe_placement") s.moe_placement = placement_from(val);
        else throw std::invalid_argument("spec: unknown key " + key);
    }
    s.validate();
    return s;
}

void ModelSpec::save_to_meta(Checkpoint& ckpt) const {
    auto& m = ckpt.meta;
    m["spec.enc_layers"] = std::to_string(enc_layers);
    m["spec.dec_layers"] = std::to_string(dec_layers);
    m["spec.d_model"] = std::to_string(d_model);
    m["spec.d_ffn"] = std::to_string(d_ffn);
    m["spec.n_heads"] = std::to_string(n_heads);
    m["spec.vocab"] = std::to_string(vocab);
    m["spec.n_experts"] = std::to_string(n_experts);
    m["spec.moe_placement"] = placement_str(moe_placement);
}

std::optional<ModelSpec> ModelSpec::from_meta(const Checkpoint& ckpt) {
    const auto& m = ckpt.meta;
    auto get = [&](const char* k) -> const std::string* {
        auto it = m.find(k);
        return it == m.end() ? nullptr : &it->second;
    };
    const std::string* v = get("spec.d_model");
    if (!v) return std::nullopt;
    ModelSpec s;
    try {
        s.d_model = std::stoi(*v);
        s.enc_layers = std::stoi(*get("spec.enc_layers"));
        s.dec_layers = std::stoi(*get("spec.dec_layers"));
        s.d_ffn = std::stoi(*get("spec.d_ffn"));
        s.n_heads = std::stoi(*get("spec.n_heads"));
        s.vocab = std::stoi(*get("spec.vocab"));
        s.n_experts = std::stoi(*get("spec.n_experts"));
        s.moe_placement = placement_from(*get("spec.moe_placement"));
        s.validate();
    } catch (...) {
        return std::nullopt;
    }
    return s;
}

// --- dense linear algebra ---------------------------------------------------

namespace {

Tensor matmul(const Tensor& a, const Tensor& b) {
    const int64_t m = a.rows(), k = a.cols(), n = b.cols();
    if (!a.is2d() || !b.is2d() || b.rows() != k)
        throw std::invalid_argument("matmul: shape mismatch");
    Tensor out({m, n});
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            float av = a.at(i, p);
            if (av == 0.0f) continue;
            const float* brow = &b.data[static_cast<size_t>(p * n)];
            float* orow = &out.data[static_cast<size_t>(i * n)];
            for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

// a [m,k] times b^T where b is [n,k]
Tensor matmul_bt(const Tensor& a, const Tensor& b) {
    const int64_t m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k) throw std::invalid_argument("matmul_bt: shape mismatch");
    Tensor out({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t p = 0; p < k; ++p) acc += static_cast<double>(a.at(i, p)) * b.at(j, p);
            out.at(i, j) = static_cast<float>(acc);
        }
    return out;
}

void add_bias(Tensor& x, const Tensor& b) {
    const int64_t n = x.cols();
    for (int64_t i = 0; i < x.rows(); ++i)
        for (int64_t j = 0; j < n; ++j) x.at(i, j) += b.data[static_cast<size_t>(j)];
}

void relu(Tensor& x) {
    for (float& v : x.data) v = v > 0.0f ? v : 0.0f;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    Tensor out(x.shape);
    const int64_t n = x.cols();
    for (int64_t i = 0; i < x.rows(); ++i) {
        double mean = 0.0;
        for (int64_t j = 0; j < n; ++j) mean += x.at(i, j);
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            double d = x.at(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        double inv = 1.0 / std::sqrt(var + 1e-5);
        for (int64_t j = 0; j < n; ++j)
            out.at(i, j) = static_cast<float>((x.at(i, j) - mean) * inv * gain.data[static_cast<size_t>(j)] +
                                              bias.data[static_cast<size_t>(j)]);
    }
    return out;
}

void softmax_rows(Tensor& x) {
    const int64_t n = x.cols();
    for (int64_t i = 0; i < x.rows(); ++i) {
        double mx = -1e300;
        for (int64_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(x.at(i, j)));
        double sum = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            double e = std::exp(static_cast<double>(x.at(i, j)) - mx);
            x.at(i, j) = static_cast<float>(e);
            sum += e;
        }
        for (int64_t j = 0; j < n; ++j) x.at(i, j) = static_cast<float>(x.at(i, j) / sum);
    }
}

Tensor sinusoidal_positions(int64_t len, int64_t d) {
    Tensor pos({len, d});
    for (int64_t t = 0; t < len; ++t)
        for (int64_t j = 0; j < d; ++j) {
            double rate = std::pow(10000.0, -2.0 * static_cast<double>(j / 2) / static_cast<double>(d));
            double ang = static_cast<double>(t) * rate;
            pos.at(t, j) = static_cast<float>((j % 2 == 0) ? std::sin(ang) : std::cos(ang));
        }
    return pos;
}

// Weight lookup over a checkpoint with a dequantization cache for
// non-expert tensors.
struct WeightCtx {
    const Checkpoint& ckpt;
    std::map<std::string, Tensor> cache;

    const CheckpointEntry& entry(const std::string& name) {
        const CheckpointEntry* e = ckpt.find(name);
        if (!e) throw std::out_of_range("missing tensor: " + name);
        return *e;
    }
    const Tensor& mat(const std::string& name) {
        const CheckpointEntry& e = entry(name);
        if (!e.is_quantized()) return e.tensor;
        auto it = cache.find(name);
        if (it == cache.end()) it = cache.emplace(name, dequantize(e.qtensor)).first;
        return it->second;
    }
    WeightRef ref(const std::string& name) {
        const CheckpointEntry& e = entry(name);
        WeightRef r;
        if (e.is_quantized())
            r.q = &e.qtensor;
        else
            r.f = &e.tensor;
        return r;
    }
};

Tensor attention(WeightCtx& w, const std::string& prefix, const Tensor& xq, const Tensor& xkv,
                 int n_heads, bool causal) {
    Tensor q = matmul(xq, w.mat(prefix + ".wq"));
    add_bias(q, w.mat(prefix + ".bq"));
    Tensor k = matmul(xkv, w.mat(prefix + ".wk"));
    add_bias(k, w.mat(prefix + ".bk"));
    Tensor v = matmul(xkv, w.mat(prefix + ".wv"));
    add_bias(v, w.mat(prefix + ".bv"));

    const int64_t tq = q.rows(), tk = k.rows(), d = q.cols();
    const int64_t dh = d / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor ctx({tq, d});
    for (int h = 0; h < n_heads; ++h) {
        const int64_t off = h * dh;
        Tensor scores({tq, tk});
        for (int64_t i = 0; i < tq; ++i)
            for (int64_t j = 0; j < tk; ++j) {
                if (causal && j > i) {
                    scores.at(i, j) = -1e30f;
                    continue;
                }
                double acc = 0.0;
                for (int64_t p = 0; p < dh; ++p)
                    acc += static_cast<double>(q.at(i, off + p)) * k.at(j, off + p);
                scores.at(i, j) = static_cast<float>(acc * inv_sqrt);
            }
        softmax_rows(scores);
        for (int64_t i = 0; i < tq; ++i)
            for (int64_t p = 0; p < dh; ++p) {
                double acc = 0.0;
                for (int64_t j = 0; j < tk; ++j)
                    acc += static_cast<double>(scores.at(i, j)) * v.at(j, off + p);
                ctx.at(i, off + p) = static_cast<float>(acc);
            }
    }
    Tensor out = matmul(ctx, w.mat(prefix + ".wo"));
    add_bias(out, w.mat(prefix + ".bo"));
    return out;
}

void add_inplace(Tensor& x, const Tensor& y) {
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += y.data[i];
}

Tensor dense_ffn(WeightCtx& w, const std::string& prefix, const Tensor& x) {
    Tensor h = matmul(x, w.mat(prefix + ".fc1.w"));
    add_bias(h, w.mat(prefix + ".fc1.b"));
    relu(h);
    Tensor y = matmul(h, w.mat(prefix + ".fc2.w"));
    add_bias(y, w.mat(prefix + ".fc2.b"));
    return y;
}

}  // namespace

// --- routing ----------------------------------------------------------------

RouteResult top1_route(const Tensor& h, const RouterState& router) {
    if (!router.gate_weights) throw std::invalid_argument("top1_route: no gate weights");
    Tensor logits = matmul(h, *router.gate_weights);
    const int64_t t = logits.rows(), e = logits.cols();
    Tensor probs = logits;
    softmax_rows(probs);

    RouteResult r;
    r.expert.resize(static_cast<size_t>(t));
    r.gate.resize(static_cast<size_t>(t));
    for (int64_t i = 0; i < t; ++i) {
        int best = 0;
        for (int64_t j = 1; j < e; ++j)
            if (logits.at(i, j) > logits.at(i, best)) best = static_cast<int>(j);
        r.expert[static_cast<size_t>(i)] = best;
        r.gate[static_cast<size_t>(i)] = probs.at(i, best);
    }
    return r;
}

Tensor moe_ffn_forward(const Tensor& h, const ExpertBank& bank, const RouterState& router) {
    if (bank.experts.empty()) throw std::invalid_argument("moe_ffn_forward: empty expert bank");
    bool quant = bank.experts[0].w1.quantized();
    for (const auto& e : bank.experts)
        if (e.w1.quantized() != quant || e.w2.quantized() != quant)
            throw std::invalid_argument("moe_ffn_forward: mixed float/quantized expert bank");

    RouteResult route = top1_route(h, router);
    const int64_t t = h.rows(), d = h.cols();
    Tensor out({t, d});

    // Dequantize each used expert once, then batch its tokens through the FFN.
    for (size_t e = 0; e < bank.experts.size(); ++e) {
        std::vector<int64_t> mine;
        for (int64_t i = 0; i < t; ++i)
            if (route.expert[static_cast<size_t>(i)] == static_cast<int>(e)) mine.push_back(i);
        if (mine.empty()) continue;

        const ExpertWeights& ew = bank.experts[e];
        Tensor w1_local, w2_local;
        const Tensor* w1 = ew.w1.f;
        const Tensor* w2 = ew.w2.f;
        if (quant) {
            w1_local = dequantize(*ew.w1.q);
            w2_local = dequantize(*ew.w2.q);
            w1 = &w1_local;
            w2 = &w2_local;
        }

        Tensor x({static_cast<int64_t>(mine.size()), d});
        for (size_t r = 0; r < mine.size(); ++r)
            for (int64_t j = 0; j < d; ++j) x.at(static_cast<int64_t>(r), j) = h.at(mine[r], j);

        Tensor mid = matmul(x, *w1);
        if (ew.b1) add_bias(mid, *ew.b1);
        relu(mid);
        Tensor y = matmul(mid, *w2);
        if (ew.b2) add_bias(y, *ew.b2);

        for (size_t r = 0; r < mine.size(); ++r) {
            float g = route.gate[static_cast<size_t>(mine[r])];
            for (int64_t j = 0; j < d; ++j) out.at(mine[r], j) = g * y.at(static_cast<int64_t>(r), j);
        }
    }
    return out;
}

// --- full forward -------------------------------------------------------------

namespace {

Tensor ffn_block(WeightCtx& w, const ModelSpec& spec, const std::string& stack, int layer,
                 const Tensor& x) {
    std::string base = stack + "." + std::to_string(layer);
    if (spec.moe_layer(layer)) {
        RouterState router{&w.mat(base + ".router.w")};
        ExpertBank bank;
        bank.experts.resize(static_cast<size_t>(spec.n_experts));
        for (int e = 0; e < spec.n_experts; ++e) {
            std::string ep = base + ".expert." + std::to_string(e);
            auto& ew = bank.experts[static_cast<size_t>(e)];
            ew.w1 = w.ref(ep + ".fc1.w");
            ew.w2 = w.ref(ep + ".fc2.w");
            ew.b1 = &w.mat(ep + ".fc1.b");
            ew.b2 = &w.mat(ep + ".fc2.b");
        }
        return moe_ffn_forward(x, bank, router);
    }
    return dense_ffn(w, base + ".ffn", x);
}

Tensor run_stack(WeightCtx& w, const ModelSpec& spec, const std::string& stack, Tensor x,
                 const Tensor* memory) {
    const bool is_dec = stack == "dec";
    const int layers = is_dec ? spec.dec_layers : spec.enc_layers;
    for (int i = 0; i < layers; ++i) {
        std::string base = stack + "." + std::to_string(i);
        Tensor normed = layer_norm(x, w.mat(base + ".ln_attn.g"), w.mat(base + ".ln_attn.b"));
        add_inplace(x, attention(w, base + ".attn", normed, normed, spec.n_heads, is_dec));
        if (is_dec) {
            Tensor cn = layer_norm(x, w.mat(base + ".ln_cross.g"), w.mat(base + ".ln_cross.b"));
            add_inplace(x, attention(w, base + ".xattn", cn, *memory, spec.n_heads, false));
        }
        Tensor fn = layer_norm(x, w.mat(base + ".ln_ffn.g"), w.mat(base + ".ln_ffn.b"));
        add_inplace(x, ffn_block(w, spec, stack, i, fn));
    }
    return layer_norm(x, w.mat(stack + ".final_ln.g"), w.mat(stack + ".final_ln.b"));
}

Tensor embed_sequence(WeightCtx& w, const ModelSpec& spec, const std::vector<int32_t>& ids) {
    const Tensor& emb = w.mat("embed.weight");
    const int64_t d = spec.d_model;
    Tensor x({static_cast<int64_t>(ids.size()), d});
    for (size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || ids[t] >= spec.vocab)
            throw std::out_of_range("token id " + std::to_string(ids[t]) + " out of range");
        for (int64_t j = 0; j < d; ++j) x.at(static_cast<int64_t>(t), j) = emb.at(ids[t], j);
    }
    Tensor pos = sinusoidal_positions(static_cast<int64_t>(ids.size()), d);
    add_inplace(x, pos);
    return x;
}

}  // namespace

ForwardResult model_forward(const std::vector<std::vector<int32_t>>& sequences,
                            const Checkpoint& ckpt, const ModelSpec& spec) {
    spec.validate();
    WeightCtx w{ckpt, {}};

    int64_t total = 0;
    for (const auto& s : sequences) total += static_cast<int64_t>(s.size());
    ForwardResult res;
    res.logits = Tensor({total, spec.vocab});
    res.final_hidden = Tensor({total, spec.d_model});

    int64_t row = 0;
    for (const auto& seq : sequences) {
        if (seq.empty()) continue;
        Tensor x = embed_sequence(w, spec, seq);
        Tensor hidden;
        if (spec.dec_layers > 0) {
            Tensor memory = spec.enc_layers > 0 ? run_stack(w, spec, "enc", x, nullptr) : x;
            Tensor y = embed_sequence(w, spec, seq);
            hidden = run_stack(w, spec, "dec", std::move(y), &memory);
        } else {
            hidden = run_stack(w, spec, "enc", std::move(x), nullptr);
        }
        Tensor logits = matmul_bt(hidden, w.mat("embed.weight"));
        for (int64_t i = 0; i < hidden.rows(); ++i, ++row) {
            for (int64_t j = 0; j < spec.vocab; ++j) res.logits.at(row, j) = logits.at(i, j);
            for (int64_t j = 0; j < spec.d_model; ++j) res.final_hidden.at(row, j) = hidden.at(i, j);
        }
    }
    return res;
}

Tensor model_logits(const std::vector<std::vector<int32_t>>& sequences, const Checkpoint& ckpt,
                    const ModelSpec& spec) {
    return model_forward(sequences, ckpt, spec).logits;
}

// --- checkpoint construction and quantization ---------------------------------

std::optional<int> layer_index_of(const std::string& name) {
    auto a = name.find('.');
    if (a == std::string::npos) return std::nullopt;
    auto b = name.find('.', a + 1);
    if (b == std::string::npos) return std::nullopt;
    std::string tok = name.substr(a + 1, b - a - 1);
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos) return std::nullopt;
    return std::stoi(tok);
}

std::vector<EntryDesc> model_tensor_descs(const ModelSpec& spec) {
    std::vector<EntryDesc> out;
    auto add = [&](std::string name, LayerGroup g, std::vector<int64_t> shape) {
        out.push_back(EntryDesc{std::move(name), g, "f32", 32, Granularity::PerChannel, std::move(shape)});
    };
    const int64_t d = spec.d_model, f = spec.d_ffn, v = spec.vocab, e = spec.n_experts;

    add("embed.weight", LayerGroup::Embedding, {v, d});
    for (const std::string stack : {std::string("enc"), std::string("dec")}) {
        const bool is_dec = stack == "dec";
        const int layers = is_dec ? spec.dec_layers : spec.enc_layers;
        if (layers == 0) continue;
        for (int i = 0; i < layers; ++i) {
            std::string base = stack + "." + std::to_string(i);
            add(base + ".ln_attn.g", LayerGroup::Other, {d});
            add(base + ".ln_attn.b", LayerGroup::Other, {d});
            for (const char* n : {"wq", "wk", "wv", "wo"})
                add(base + ".attn." + n, LayerGroup::SelfAttention, {d, d});
            for (const char* n : {"bq", "bk", "bv", "bo"})
                add(base + ".attn." + n, LayerGroup::SelfAttention, {d});
            if (is_dec) {
                add(base + ".ln_cross.g", LayerGroup::Other, {d});
                add(base + ".ln_cross.b", LayerGroup::Other, {d});
                for (const char* n : {"wq", "wk", "wv", "wo"})
                    add(base + ".xattn." + n, LayerGroup::CrossAttention, {d, d});
                for (const char* n : {"bq", "bk", "bv", "bo"})
                    add(base + ".xattn." + n, LayerGroup::CrossAttention, {d});
            }
            add(base + ".ln_ffn.g", LayerGroup::Other, {d});
            add(base + ".ln_ffn.b", LayerGroup::Other, {d});
            if (spec.moe_layer(i)) {
                add(base + ".router.w", LayerGroup::Router, {d, e});
                for (int x = 0; x < e; ++x) {
                    std::string ep = base + ".expert." + std::to_string(x);
                    add(ep + ".fc1.w", LayerGroup::ExpertFFN, {d, f});
                    add(ep + ".fc1.b", LayerGroup::ExpertFFN, {f});
                    add(ep + ".fc2.w", LayerGroup::ExpertFFN, {f, d});
                    add(ep + ".fc2.b", LayerGroup::ExpertFFN, {d});
                }
            } else {
                add(base + ".ffn.fc1.w", LayerGroup::DenseFFN, {d, f});
                add(base + ".ffn.fc1.b", LayerGroup::DenseFFN, {f});
                add(base + ".ffn.fc2.w", LayerGroup::DenseFFN, {f, d});
                add(base + ".ffn.fc2.b", LayerGroup::DenseFFN, {d});
            }
        }
        add(stack + ".final_ln.g", LayerGroup::Other, {d});
        add(stack + ".final_ln.b", LayerGroup::Other, {d});
    }
    return out;
}

Checkpoint build_random_checkpoint(const ModelSpec& spec, uint64_t seed, float weight_scale) {
    spec.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> dist(0.0f, weight_scale);

    Checkpoint ckpt;
    for (const auto& desc : model_tensor_descs(spec)) {
        Tensor t(desc.shape);
        bool is_norm_gain = desc.name.ends_with(".g");
        bool is_bias = desc.shape.size() == 1 && !is_norm_gain;
        if (is_norm_gain) {
            for (float& v : t.data) v = 1.0f;
        } else if (is_bias) {
            // zero biases and norm offsets
        } else {
            for (float& v : t.data) v = dist(rng);
        }
        ckpt.add(CheckpointEntry::f32(desc.name, desc.group, std::move(t)));
    }
    spec.save_to_meta(ckpt);
    return ckpt;
}

Checkpoint quantize_model(const Checkpoint& ckpt, const std::set<LayerGroup>& groups, int bits,
                          Scheme scheme, Granularity granularity, LayerSubset subset,
                          LogScaleMode mode, int n_threads) {
    if (groups.empty()) throw std::invalid_argument("quantize_model: empty group list");
    if (!valid_bits(bits)) throw std::invalid_argument("quantize_model: unsupported bit width");

    auto selected = [&](const CheckpointEntry& e) {
        if (!groups.count(e.group)) return false;
        if (subset != LayerSubset::All) {
            auto idx = layer_index_of(e.name);
            if (!idx) return false;
            if (subset == LayerSubset::Even && *idx % 2 != 0) return false;
            if (subset == LayerSubset::Odd && *idx % 2 != 1) return false;
        }
        return true;
    };

    Checkpoint out;
    out.meta = ckpt.meta;
    out.entries = ckpt.entries;

    std::vector<size_t> work;
    for (size_t i = 0; i < out.entries.size(); ++i) {
        CheckpointEntry& e = out.entries[i];
        if (!selected(e)) continue;
        if (e.is_quantized()) {
            std::fprintf(stderr, "warning: %s already quantized, skipping\n", e.name.c_str());
            continue;
        }
        if (e.shape().size() != 2) {
            std::fprintf(stderr, "warning: skipping non-2D tensor %s\n", e.name.c_str());
            continue;
        }
        work.push_back(i);
    }

    auto run = [&](size_t begin, size_t end) {
        for (size_t w = begin; w < end; ++w) {
            CheckpointEntry& e = out.entries[work[w]];
            QuantizedTensor qt = quantize(e.tensor, scheme, bits, granularity, mode);
            e.kind = CheckpointEntry::Kind::Quantized;
            e.qtensor = std::move(qt);
            e.tensor = Tensor{};
        }
    };

    if (n_threads <= 1 || work.size() < 2) {
        run(0, work.size());
    } else {
        size_t nt = std::min<size_t>(static_cast<size_t>(n_threads), work.size());
        std::vector<std::thread> pool;
        size_t chunk = (work.size() + nt - 1) / nt;
        for (size_t t = 0; t < nt; ++t) {
            size_t b = t * chunk, e = std::min(work.size(), b + chunk);
            if (b < e) pool.emplace_back(run, b, e);
        }
        for (auto& th : pool) th.join();
    }
    return out;
}

}  // namespace moqe
