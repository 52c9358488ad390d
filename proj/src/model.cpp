#include "tinyvlm/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace tinyvlm {

namespace {
constexpr int kMlpFactor = 2;
constexpr double kLnEps = 1e-5;
}

void VisionEncoderConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
        throw InvalidRequestError("image_size must be divisible by patch_size");
    if (embed_dim <= 0 || embed_dim % num_heads != 0)
        throw InvalidRequestError("encoder embed_dim must be divisible by num_heads");
    if (num_query_tokens <= 0)
        throw InvalidRequestError("num_query_tokens must be positive");
}

void ProjectionConfig::validate() const {
    if (depth != 1 && depth != 3)
        throw InvalidRequestError("projection depth must be 1 or 3");
    if (in_dim <= 0 || out_dim <= 0)
        throw InvalidRequestError("projection dims must be positive");
}

void LMConfig::validate() const {
    if (vocab_size <= 0) throw InvalidRequestError("vocab_size must be set");
    if (embed_dim <= 0 || embed_dim % num_heads != 0)
        throw InvalidRequestError("lm embed_dim must be divisible by num_heads");
    if (max_seq_len <= 0)
        throw InvalidRequestError("max_seq_len must be positive");
}

void ModelConfig::validate() const {
    encoder.validate();
    projection.validate();
    lm.validate();
    if (projection.in_dim != encoder.embed_dim)
        throw InvalidRequestError("projection in_dim must equal encoder embed_dim");
    if (projection.out_dim != lm.embed_dim)
        throw InvalidRequestError("projection out_dim must equal lm embed_dim");
}

void ModelConfig::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write config: " + path);
    f << "image_size=" << encoder.image_size << "\n"
      << "patch_size=" << encoder.patch_size << "\n"
      << "encoder_embed_dim=" << encoder.embed_dim << "\n"
      << "encoder_blocks=" << encoder.num_blocks << "\n"
      << "encoder_heads=" << encoder.num_heads << "\n"
      << "num_query_tokens=" << encoder.num_query_tokens << "\n"
      << "use_resampler=" << (encoder.use_resampler ? 1 : 0) << "\n"
      << "projection_depth=" << projection.depth << "\n"
      << "vocab_size=" << lm.vocab_size << "\n"
      << "lm_embed_dim=" << lm.embed_dim << "\n"
      << "lm_blocks=" << lm.num_blocks << "\n"
      << "lm_heads=" << lm.num_heads << "\n"
      << "max_seq_len=" << lm.max_seq_len << "\n"
      << "train_resampler=" << (train_resampler ? 1 : 0) << "\n";
}

ModelConfig ModelConfig::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read config: " + path);
    std::map<std::string, int> kv;
    std::string line;
    while (std::getline(f, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        kv[line.substr(0, eq)] = std::stoi(line.substr(eq + 1));
    }
    ModelConfig c;
    auto get = [&](const char* k, int dflt) {
        auto it = kv.find(k);
        return it == kv.end() ? dflt : it->second;
    };
    c.encoder.image_size = get("image_size", 32);
    c.encoder.patch_size = get("patch_size", 8);
    c.encoder.embed_dim = get("encoder_embed_dim", 64);
    c.encoder.num_blocks = get("encoder_blocks", 2);
    c.encoder.num_heads = get("encoder_heads", 4);
    c.encoder.num_query_tokens = get("num_query_tokens", 8);
    c.encoder.use_resampler = get("use_resampler", 1) != 0;
    c.projection.depth = get("projection_depth", 1);
    c.lm.vocab_size = get("vocab_size", 0);
    c.lm.embed_dim = get("lm_embed_dim", 64);
    c.lm.num_blocks = get("lm_blocks", 2);
    c.lm.num_heads = get("lm_heads", 4);
    c.lm.max_seq_len = get("max_seq_len", 256);
    c.train_resampler = get("train_resampler", 0) != 0;
    c.projection.in_dim = c.encoder.embed_dim;
    c.projection.out_dim = c.lm.embed_dim;
    c.validate();
    return c;
}

TensorPtr patchify(const TensorPtr& pixels, const VisionEncoderConfig& cfg) {
    const int s = cfg.image_size, ps = cfg.patch_size;
    if (pixels->shape != std::vector<int>{s, s, 3})
        throw DimensionError("encode_image: expected [" + std::to_string(s) +
                             "," + std::to_string(s) + ",3], got " +
                             pixels->shape_str());
    const int side = s / ps;
    const int pdim = ps * ps * 3;
    auto out = make_tensor({side * side, pdim});
    for (int pr = 0; pr < side; ++pr) {
        for (int pc = 0; pc < side; ++pc) {
            double* dst =
                out->data.data() +
                static_cast<std::size_t>(pr * side + pc) * pdim;
            for (int y = 0; y < ps; ++y)
                for (int x = 0; x < ps; ++x)
                    for (int c = 0; c < 3; ++c)
                        *dst++ = pixels->data[(static_cast<std::size_t>(
                                                   pr * ps + y) *
                                                   s +
                                               (pc * ps + x)) *
                                                  3 +
                                              c];
        }
    }
    return out;
}

namespace {

struct BlockParams {
    TensorPtr ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    TensorPtr ln2_g, ln2_b, w1, b1, w2, b2;
};

// multi-head scaled dot-product attention on the tape
TensorPtr attention(Tape& tape, const TensorPtr& q_in, const TensorPtr& kv_in,
                    const BlockParams& p, int num_heads, bool causal) {
    const int d = q_in->shape[1];
    const int dh = d / num_heads;
    auto q = bias_add(tape, matmul(tape, q_in, p.wq), p.bq);
    auto k = bias_add(tape, matmul(tape, kv_in, p.wk), p.bk);
    auto v = bias_add(tape, matmul(tape, kv_in, p.wv), p.bv);
    TensorPtr mask;
    if (causal) {
        const int t = q_in->shape[0];
        mask = make_tensor({t, t});
        for (int i = 0; i < t; ++i)
            for (int j = i + 1; j < t; ++j)
                mask->data[static_cast<std::size_t>(i) * t + j] = -1e9;
    }
    std::vector<TensorPtr> heads;
    for (int h = 0; h < num_heads; ++h) {
        auto qh = slice_cols(tape, q, h * dh, dh);
        auto kh = slice_cols(tape, k, h * dh, dh);
        auto vh = slice_cols(tape, v, h * dh, dh);
        auto scores =
            scale(tape, matmul(tape, qh, transpose(tape, kh)),
                  1.0 / std::sqrt(static_cast<double>(dh)));
        if (causal) scores = add(tape, scores, mask);
        auto probs = softmax_rows(tape, scores);
        heads.push_back(matmul(tape, probs, vh));
    }
    auto merged = concat_cols(tape, heads);
    return bias_add(tape, matmul(tape, merged, p.wo), p.bo);
}

TensorPtr transformer_block(Tape& tape, const TensorPtr& x,
                            const BlockParams& p, int num_heads, bool causal) {
    auto xn = layer_norm(tape, x, p.ln1_g, p.ln1_b, kLnEps);
    auto attn = attention(tape, xn, xn, p, num_heads, causal);
    auto h = add(tape, x, attn);
    auto hn = layer_norm(tape, h, p.ln2_g, p.ln2_b, kLnEps);
    auto mlp = bias_add(
        tape, matmul(tape, silu(tape, bias_add(tape, matmul(tape, hn, p.w1), p.b1)),
                     p.w2),
        p.b2);
    return add(tape, h, mlp);
}

}  // namespace

AlignmentModel::AlignmentModel(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed ^ 0x2545f4914f6cdd1dull);

    auto normal_tensor = [&](std::vector<int> shape, double sc) {
        auto t = make_tensor(std::move(shape));
        for (double& v : t->data) v = sc * rng.normal();
        return t;
    };
    auto fan_in_tensor = [&](int in, int out) {
        return normal_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
    };
    auto ones = [&](int n) {
        auto t = make_tensor({n});
        std::fill(t->data.begin(), t->data.end(), 1.0);
        return t;
    };
    auto zeros = [&](int n) { return make_tensor({n}); };

    auto add_block = [&](const std::string& base, int d) {
        store_.add(base + ".ln1.g", ones(d), true);
        store_.add(base + ".ln1.b", zeros(d), true);
        store_.add(base + ".attn.wq", fan_in_tensor(d, d), true);
        store_.add(base + ".attn.bq", zeros(d), true);
        store_.add(base + ".attn.wk", fan_in_tensor(d, d), true);
        store_.add(base + ".attn.bk", zeros(d), true);
        store_.add(base + ".attn.wv", fan_in_tensor(d, d), true);
        store_.add(base + ".attn.bv", zeros(d), true);
        store_.add(base + ".attn.wo", fan_in_tensor(d, d), true);
        store_.add(base + ".attn.bo", zeros(d), true);
        store_.add(base + ".ln2.g", ones(d), true);
        store_.add(base + ".ln2.b", zeros(d), true);
        store_.add(base + ".mlp.w1", fan_in_tensor(d, d * kMlpFactor), true);
        store_.add(base + ".mlp.b1", zeros(d * kMlpFactor), true);
        store_.add(base + ".mlp.w2", fan_in_tensor(d * kMlpFactor, d), true);
        store_.add(base + ".mlp.b2", zeros(d), true);
    };

    const auto& e = config_.encoder;
    const int pdim = e.patch_size * e.patch_size * 3;
    store_.add("enc.patch.w", fan_in_tensor(pdim, e.embed_dim), true);
    store_.add("enc.patch.b", zeros(e.embed_dim), true);
    store_.add("enc.pos", normal_tensor({e.num_patches(), e.embed_dim}, 0.05),
               true);
    for (int b = 0; b < e.num_blocks; ++b)
        add_block("enc.block" + std::to_string(b), e.embed_dim);
    store_.add("enc.lnf.g", ones(e.embed_dim), true);
    store_.add("enc.lnf.b", zeros(e.embed_dim), true);

    store_.add("res.queries",
               normal_tensor({e.num_query_tokens, e.embed_dim}, 0.05), true);
    store_.add("res.attn.wq", fan_in_tensor(e.embed_dim, e.embed_dim), true);
    store_.add("res.attn.bq", zeros(e.embed_dim), true);
    store_.add("res.attn.wk", fan_in_tensor(e.embed_dim, e.embed_dim), true);
    store_.add("res.attn.bk", zeros(e.embed_dim), true);
    store_.add("res.attn.wv", fan_in_tensor(e.embed_dim, e.embed_dim), true);
    store_.add("res.attn.bv", zeros(e.embed_dim), true);
    store_.add("res.attn.wo", fan_in_tensor(e.embed_dim, e.embed_dim), true);
    store_.add("res.attn.bo", zeros(e.embed_dim), true);

    const auto& pj = config_.projection;
    store_.add("proj.0.w", fan_in_tensor(pj.in_dim, pj.out_dim), false);
    store_.add("proj.0.b", zeros(pj.out_dim), false);
    if (pj.depth == 3) {
        store_.add("proj.1.w", fan_in_tensor(pj.out_dim, pj.out_dim), false);
        store_.add("proj.1.b", zeros(pj.out_dim), false);
        store_.add("proj.2.w", fan_in_tensor(pj.out_dim, pj.out_dim), false);
        store_.add("proj.2.b", zeros(pj.out_dim), false);
    }

    const auto& l = config_.lm;
    lm_tok_ = normal_tensor({l.vocab_size, l.embed_dim}, 0.05);
    store_.add("lm.tok", lm_tok_, true);
    store_.add("lm.pos", normal_tensor({l.max_seq_len, l.embed_dim}, 0.05),
               true);
    for (int b = 0; b < l.num_blocks; ++b)
        add_block("lm.block" + std::to_string(b), l.embed_dim);
    store_.add("lm.lnf.g", ones(l.embed_dim), true);
    store_.add("lm.lnf.b", zeros(l.embed_dim), true);

    apply_default_freeze();
}

void AlignmentModel::set_frozen(const std::string& prefix, bool frozen) {
    for (auto& p : store_.params) {
        if (p.name.rfind(prefix, 0) == 0) {
            p.frozen = frozen;
            p.tensor->requires_grad = !frozen;
            if (!frozen) p.tensor->ensure_grad();
        }
    }
}

void AlignmentModel::apply_default_freeze() {
    set_frozen("enc.", true);
    set_frozen("res.", true);
    set_frozen("lm.", true);
    set_frozen("proj.", false);
    if (config_.train_resampler) set_frozen("res.", false);
}

int AlignmentModel::visual_prefix_len() const {
    return config_.encoder.use_resampler ? config_.encoder.num_query_tokens
                                         : config_.encoder.num_patches();
}

namespace {
BlockParams block_params(const ParamStore& store, const std::string& base) {
    auto g = [&](const std::string& suffix) {
        for (const auto& p : store.params)
            if (p.name == base + suffix) return p.tensor;
        throw InternalStateError("missing parameter " + base + suffix);
    };
    return {g(".ln1.g"), g(".ln1.b"), g(".attn.wq"), g(".attn.bq"),
            g(".attn.wk"), g(".attn.bk"), g(".attn.wv"), g(".attn.bv"),
            g(".attn.wo"), g(".attn.bo"), g(".ln2.g"), g(".ln2.b"),
            g(".mlp.w1"), g(".mlp.b1"), g(".mlp.w2"), g(".mlp.b2")};
}
}  // namespace

TensorPtr AlignmentModel::encode_patches(Tape& tape,
                                         const TensorPtr& pixels) const {
    const auto& e = config_.encoder;
    auto patches = patchify(pixels, e);
    auto get = [&](const char* n) { return store_.find(n)->tensor; };
    auto x = bias_add(tape, matmul(tape, patches, get("enc.patch.w")),
                      get("enc.patch.b"));
    x = add(tape, x, get("enc.pos"));
    for (int b = 0; b < e.num_blocks; ++b) {
        auto p = block_params(store_, "enc.block" + std::to_string(b));
        x = transformer_block(tape, x, p, e.num_heads, /*causal=*/false);
    }
    return layer_norm(tape, x, get("enc.lnf.g"), get("enc.lnf.b"), kLnEps);
}

TensorPtr AlignmentModel::resample(Tape& tape,
                                   const TensorPtr& patch_features) const {
    auto get = [&](const char* n) { return store_.find(n)->tensor; };
    BlockParams p;
    p.wq = get("res.attn.wq");
    p.bq = get("res.attn.bq");
    p.wk = get("res.attn.wk");
    p.bk = get("res.attn.bk");
    p.wv = get("res.attn.wv");
    p.bv = get("res.attn.bv");
    p.wo = get("res.attn.wo");
    p.bo = get("res.attn.bo");
    return attention(tape, get("res.queries"), patch_features, p,
                     config_.encoder.num_heads, /*causal=*/false);
}

TensorPtr AlignmentModel::project(Tape& tape, const TensorPtr& features) const {
    auto get = [&](const std::string& n) { return store_.find(n)->tensor; };
    auto x = bias_add(tape, matmul(tape, features, get("proj.0.w")),
                      get("proj.0.b"));
    if (config_.projection.depth == 3) {
        x = silu(tape, x);
        x = bias_add(tape, matmul(tape, x, get("proj.1.w")), get("proj.1.b"));
        x = silu(tape, x);
        x = bias_add(tape, matmul(tape, x, get("proj.2.w")), get("proj.2.b"));
    }
    return x;
}

TensorPtr AlignmentModel::encode_image(Tape& tape,
                                       const TensorPtr& pixels) const {
    auto features = encode_patches(tape, pixels);
    if (config_.encoder.use_resampler) features = resample(tape, features);
    return project(tape, features);
}

TensorPtr AlignmentModel::lm_forward(Tape& tape,
                                     const TensorPtr& embeddings) const {
    const auto& l = config_.lm;
    if (embeddings->shape.size() != 2 || embeddings->shape[1] != l.embed_dim)
        throw DimensionError("lm_forward: expected [T," +
                             std::to_string(l.embed_dim) + "], got " +
                             embeddings->shape_str());
    const int t = embeddings->shape[0];
    if (t > l.max_seq_len)
        throw CapacityError("sequence length " + std::to_string(t) +
                            " exceeds max_seq_len " +
                            std::to_string(l.max_seq_len));
    auto get = [&](const char* n) { return store_.find(n)->tensor; };
    std::vector<int> pos_ids(static_cast<std::size_t>(t));
    for (int i = 0; i < t; ++i) pos_ids[static_cast<std::size_t>(i)] = i;
    auto x = add(tape, embeddings,
                 embedding_rows(tape, get("lm.pos"), pos_ids));
    for (int b = 0; b < l.num_blocks; ++b) {
        auto p = block_params(store_, "lm.block" + std::to_string(b));
        x = transformer_block(tape, x, p, l.num_heads, /*causal=*/true);
    }
    x = layer_norm(tape, x, get("lm.lnf.g"), get("lm.lnf.b"), kLnEps);
    return matmul(tape, x, transpose(tape, lm_tok_));
}

// --- incremental decoding ----------------------------------------------------

namespace {

void raw_layer_norm(const double* x, const double* g, const double* b, int d,
                    double* out) {
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += x[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= d;
    const double is = 1.0 / std::sqrt(var + kLnEps);
    for (int j = 0; j < d; ++j) out[j] = g[j] * (x[j] - mu) * is + b[j];
}

// out[n] = x[d] * W[d,n] + b[n]
void raw_affine(const double* x, const Tensor& w, const Tensor& b,
                std::vector<double>& out) {
    const int d = w.shape[0], n = w.shape[1];
    out.assign(static_cast<std::size_t>(n), 0.0);
    for (int p = 0; p < d; ++p) {
        const double xv = x[p];
        if (xv == 0.0) continue;
        const double* wrow = w.data.data() + static_cast<std::size_t>(p) * n;
        for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j)] += xv * wrow[j];
    }
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j)] += b.data[static_cast<std::size_t>(j)];
}

}  // namespace

DecodeState AlignmentModel::begin_decode() const {
    DecodeState s;
    s.keys.resize(static_cast<std::size_t>(config_.lm.num_blocks));
    s.values.resize(static_cast<std::size_t>(config_.lm.num_blocks));
    return s;
}

std::vector<double> AlignmentModel::decode_append(
    DecodeState& state, const std::vector<double>& emb_row) const {
    const auto& l = config_.lm;
    const int d = l.embed_dim;
    if (static_cast<int>(emb_row.size()) != d)
        throw DimensionError("decode_append: embedding width mismatch");
    if (state.length >= l.max_seq_len)
        throw CapacityError("decode position " + std::to_string(state.length) +
                            " exceeds max_seq_len " +
                            std::to_string(l.max_seq_len));
    auto get = [&](const std::string& n) { return store_.find(n)->tensor; };
    const int t = state.length;
    const int heads = l.num_heads;
    const int dh = d / heads;

    std::vector<double> x(emb_row);
    {
        const double* pos =
            get("lm.pos")->data.data() + static_cast<std::size_t>(t) * d;
        for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(j)] += pos[j];
    }
    std::vector<double> xn(static_cast<std::size_t>(d));
    std::vector<double> q, k, v, attn_out, tmp;
    for (int b = 0; b < l.num_blocks; ++b) {
        const std::string base = "lm.block" + std::to_string(b);
        raw_layer_norm(x.data(), get(base + ".ln1.g")->data.data(),
                       get(base + ".ln1.b")->data.data(), d, xn.data());
        raw_affine(xn.data(), *get(base + ".attn.wq"), *get(base + ".attn.bq"), q);
        raw_affine(xn.data(), *get(base + ".attn.wk"), *get(base + ".attn.bk"), k);
        raw_affine(xn.data(), *get(base + ".attn.wv"), *get(base + ".attn.bv"), v);
        auto& kc = state.keys[static_cast<std::size_t>(b)];
        auto& vc = state.values[static_cast<std::size_t>(b)];
        kc.insert(kc.end(), k.begin(), k.end());
        vc.insert(vc.end(), v.begin(), v.end());
        // attention over all cached positions (causal by construction)
        std::vector<double> merged(static_cast<std::size_t>(d), 0.0);
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        for (int h = 0; h < heads; ++h) {
            std::vector<double> scores(static_cast<std::size_t>(t) + 1);
            double mx = -1e300;
            for (int p = 0; p <= t; ++p) {
                double s = 0.0;
                const double* kp =
                    kc.data() + static_cast<std::size_t>(p) * d + h * dh;
                const double* qh = q.data() + h * dh;
                for (int j = 0; j < dh; ++j) s += qh[j] * kp[j];
                s *= inv_sqrt;
                scores[static_cast<std::size_t>(p)] = s;
                mx = std::max(mx, s);
            }
            double z = 0.0;
            for (int p = 0; p <= t; ++p) {
                scores[static_cast<std::size_t>(p)] =
                    std::exp(scores[static_cast<std::size_t>(p)] - mx);
                z += scores[static_cast<std::size_t>(p)];
            }
            for (int p = 0; p <= t; ++p) {
                const double wgt = scores[static_cast<std::size_t>(p)] / z;
                const double* vp =
                    vc.data() + static_cast<std::size_t>(p) * d + h * dh;
                for (int j = 0; j < dh; ++j)
                    merged[static_cast<std::size_t>(h * dh + j)] += wgt * vp[j];
            }
        }
        raw_affine(merged.data(), *get(base + ".attn.wo"),
                   *get(base + ".attn.bo"), attn_out);
        for (int j = 0; j < d; ++j)
            x[static_cast<std::size_t>(j)] += attn_out[static_cast<std::size_t>(j)];
        raw_layer_norm(x.data(), get(base + ".ln2.g")->data.data(),
                       get(base + ".ln2.b")->data.data(), d, xn.data());
        raw_affine(xn.data(), *get(base + ".mlp.w1"), *get(base + ".mlp.b1"),
                   tmp);
        for (double& u : tmp) u = u / (1.0 + std::exp(-u));
        raw_affine(tmp.data(), *get(base + ".mlp.w2"), *get(base + ".mlp.b2"),
                   attn_out);
        for (int j = 0; j < d; ++j)
            x[static_cast<std::size_t>(j)] += attn_out[static_cast<std::size_t>(j)];
    }
    raw_layer_norm(x.data(), get("lm.lnf.g")->data.data(),
                   get("lm.lnf.b")->data.data(), d, xn.data());
    // tied output head
    const auto& tok = *lm_tok_;
    std::vector<double> logits(static_cast<std::size_t>(l.vocab_size), 0.0);
    for (int vtok = 0; vtok < l.vocab_size; ++vtok) {
        const double* row =
            tok.data.data() + static_cast<std::size_t>(vtok) * d;
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += xn[static_cast<std::size_t>(j)] * row[j];
        logits[static_cast<std::size_t>(vtok)] = s;
    }
    ++state.length;
    return logits;
}

std::vector<double> AlignmentModel::token_embedding_row(int id) const {
    const int d = config_.lm.embed_dim;
    std::vector<double> row(static_cast<std::size_t>(d));
    std::copy_n(lm_tok_->data.data() + static_cast<std::size_t>(id) * d, d,
                row.begin());
    return row;
}

std::vector<int> AlignmentModel::run_decode(
    const std::vector<std::vector<double>>& prompt_rows,
    const DecodeConfig& decode) const {
    if (decode.max_new_tokens < 1)
        throw InvalidRequestError("max_new_tokens must be >= 1");
    Rng rng(decode.seed ^ 0xd1b54a32d192ed03ull);
    DecodeState state = begin_decode();
    std::vector<double> logits;
    for (const auto& row : prompt_rows) logits = decode_append(state, row);
    std::vector<int> out;
    for (int i = 0; i < decode.max_new_tokens; ++i) {
        int next;
        if (decode.greedy) {
            next = 0;
            for (std::size_t j = 1; j < logits.size(); ++j)
                if (logits[j] > logits[static_cast<std::size_t>(next)])
                    next = static_cast<int>(j);
        } else {
            if (decode.temperature <= 0.0)
                throw InvalidRequestError("temperature must be positive");
            double mx = logits[0];
            for (double v : logits) mx = std::max(mx, v);
            std::vector<double> probs(logits.size());
            double z = 0.0;
            for (std::size_t j = 0; j < logits.size(); ++j) {
                probs[j] = std::exp((logits[j] - mx) / decode.temperature);
                z += probs[j];
            }
            const double r = rng.uniform() * z;
            double acc = 0.0;
            next = static_cast<int>(logits.size()) - 1;
            for (std::size_t j = 0; j < probs.size(); ++j) {
                acc += probs[j];
                if (r < acc) {
                    next = static_cast<int>(j);
                    break;
                }
            }
        }
        if (next == decode.stop_token) break;
        out.push_back(next);
        if (state.length >= config_.lm.max_seq_len) break;
        logits = decode_append(state, token_embedding_row(next));
    }
    return out;
}

std::vector<int> AlignmentModel::generate(const TokenSequence& prompt,
                                          const TensorPtr& visual_prefix,
                                          const DecodeConfig& decode) const {
    if (prompt.visual_start < 0)
        throw InvalidRequestError("generate: prompt has no visual span");
    if (visual_prefix->shape.size() != 2 ||
        visual_prefix->shape[0] != prompt.visual_len ||
        visual_prefix->shape[1] != config_.lm.embed_dim)
        throw DimensionError("generate: visual prefix " +
                             visual_prefix->shape_str() +
                             " does not match prompt span");
    std::vector<std::vector<double>> rows;
    rows.reserve(static_cast<std::size_t>(prompt.length()));
    const int d = config_.lm.embed_dim;
    for (int i = 0; i < prompt.length(); ++i) {
        if (i >= prompt.visual_start &&
            i < prompt.visual_start + prompt.visual_len) {
            const int r = i - prompt.visual_start;
            std::vector<double> row(static_cast<std::size_t>(d));
            std::copy_n(visual_prefix->data.data() +
                            static_cast<std::size_t>(r) * d,
                        d, row.begin());
            rows.push_back(std::move(row));
        } else {
            rows.push_back(token_embedding_row(prompt.ids[static_cast<std::size_t>(i)]));
        }
    }
    return run_decode(rows, decode);
}

std::vector<int> AlignmentModel::generate_text(
    const std::vector<int>& prompt_ids, const DecodeConfig& decode) const {
    std::vector<std::vector<double>> rows;
    rows.reserve(prompt_ids.size());
    for (int id : prompt_ids) rows.push_back(token_embedding_row(id));
    return run_decode(rows, decode);
}

}  // namespace tinyvlm
