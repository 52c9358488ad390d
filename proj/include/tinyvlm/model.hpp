// Toy three-part alignment architecture: frozen patch-transformer vision
// encoder with a learned query-token resampler, a trainable projection
// stack, and a frozen decoder-only language model.
#pragma once

#include <string>
#include <vector>

#include "tinyvlm/tensor.hpp"
#include "tinyvlm/vocab.hpp"

namespace tinyvlm {

struct VisionEncoderConfig {
    int image_size = 32;
    int patch_size = 8;
    int embed_dim = 64;
    int num_blocks = 2;
    int num_heads = 4;
    int num_query_tokens = 8;
    bool use_resampler = true;

    int num_patches() const {
        const int side = image_size / patch_size;
        return side * side;
    }
    void validate() const;
};

struct ProjectionConfig {
    int depth = 1;  // 1 or 3
    int in_dim = 64;
    int out_dim = 64;
    void validate() const;
};

struct LMConfig {
    int vocab_size = 0;
    int embed_dim = 64;
    int num_blocks = 2;
    int num_heads = 4;
    int max_seq_len = 256;
    void validate() const;
};

struct ModelConfig {
    VisionEncoderConfig encoder;
    ProjectionConfig projection;
    LMConfig lm;
    bool train_resampler = false;  // Tab.4(c)-style ablation

    void validate() const;
    void save(const std::string& path) const;
    static ModelConfig load(const std::string& path);
};

// Incremental decoding state: cached keys/values per LM block.
struct DecodeState {
    std::vector<std::vector<double>> keys;    // per block, t*d flat
    std::vector<std::vector<double>> values;  // per block, t*d flat
    int length = 0;
};

struct DecodeConfig {
    bool greedy = true;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    int max_new_tokens = 120;
    int stop_token = Vocabulary::kStop;
};

class AlignmentModel {
public:
    AlignmentModel(ModelConfig config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    // Marks every parameter whose name starts with prefix.
    void set_frozen(const std::string& prefix, bool frozen);
    // Default contract: everything frozen except the projection stack
    // (plus the resampler under the train_resampler ablation).
    void apply_default_freeze();

    int visual_prefix_len() const;

    // pixels [H,W,3] -> visual prefix [Q or P, d_m] in LM embedding space
    TensorPtr encode_image(Tape& tape, const TensorPtr& pixels) const;
    // encoder features without the projection stack, [P, d_v]
    TensorPtr encode_patches(Tape& tape, const TensorPtr& pixels) const;
    TensorPtr resample(Tape& tape, const TensorPtr& patch_features) const;
    TensorPtr project(Tape& tape, const TensorPtr& features) const;

    // causal decoder forward over spliced embeddings, [T,d_m] -> [T,V]
    TensorPtr lm_forward(Tape& tape, const TensorPtr& embeddings) const;

    TensorPtr token_table() const { return lm_tok_; }

    // tape-free incremental decoding; bit-compatible with lm_forward row
    // arithmetic up to summation order
    DecodeState begin_decode() const;
    std::vector<double> decode_append(DecodeState& state,
                                      const std::vector<double>& emb_row) const;

    // autoregressive sampling from an assembled prompt + visual prefix;
    // the returned ids exclude the stop token
    std::vector<int> generate(const TokenSequence& prompt,
                              const TensorPtr& visual_prefix,
                              const DecodeConfig& decode) const;
    // text-only variant (no visual span in the prompt)
    std::vector<int> generate_text(const std::vector<int>& prompt_ids,
                                   const DecodeConfig& decode) const;

private:
    ModelConfig config_;
    ParamStore store_;
    TensorPtr lm_tok_;

    std::vector<double> token_embedding_row(int id) const;
    std::vector<int> run_decode(const std::vector<std::vector<double>>& prompt_rows,
                                const DecodeConfig& decode) const;
};

// [P, patch_size*patch_size*3] constant patch matrix from an image tensor
TensorPtr patchify(const TensorPtr& pixels, const VisionEncoderConfig& cfg);

}  // namespace tinyvlm
