// Word-level closed vocabulary, conversational prompt templates, visual
// soft-prompt splicing, and loss-mask construction.
#pragma once

#include <string>
#include <vector>

#include "tinyvlm/tensor.hpp"

namespace tinyvlm {

struct TokenizationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Verbatim prompt text used by the pipeline.
namespace prompts {
// detail-description generation prompt (curation stage)
extern const char* kDetailInstruction;
// continuation turn marker word
extern const char* kContinueWord;
// description-repair system prompt sent to the fixer
extern const char* kFixerPrompt;
// caption-coverage judge prompt; {1} and {2} are substituted
std::string judge_prompt(const std::string& reference,
                         const std::string& candidate);
// hallucination-eval prompts
extern const char* kLongModeInstruction;
extern const char* kShortModeInstruction;
// failure-rate eval prompts
extern const char* kFailureDetailInstruction;
extern const char* kFailurePoemInstruction;
// advanced-ability task prompts, shipped as data only
extern const std::vector<std::string>& task_prompts();
// default finetuning instruction set
extern const std::vector<std::string>& default_instructions();
}  // namespace prompts

class Vocabulary {
public:
    // Fixed special-token ids; word tokens follow.
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kHuman = 2;      // "###Human:"
    static constexpr int kAssistant = 3;  // "###Assistant:"
    static constexpr int kImgOpen = 4;    // "<Img>"
    static constexpr int kImgClose = 5;   // "</Img>"
    static constexpr int kImageSlot = 6;  // "<ImageFeature>"
    static constexpr int kContinue = 7;   // "Continue"
    static constexpr int kStop = 8;       // "###", also the generation stop

    // The full closed language: caption grammar plus every shipped prompt.
    static Vocabulary build_default();

    int size() const { return static_cast<int>(tokens_.size()); }
    int id_of(const std::string& token) const;       // throws on unknown
    bool contains(const std::string& token) const;
    const std::string& token(int id) const;

    std::vector<int> tokenize(const std::string& text) const;
    std::string detokenize(const std::vector<int>& ids) const;

    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);

private:
    std::vector<std::string> tokens_;
    void add(const std::string& token);
    void add_words_of(const std::string& text);
};

struct TemplateSegment {
    enum Kind { Literal, ImageSlot, InstructionSlot } kind;
    std::string literal;  // used when kind == Literal
};

struct PromptTemplate {
    std::vector<TemplateSegment> segments;
    // "###Human: <Img><ImageFeature></Img> <Instruction> ###Assistant:"
    static PromptTemplate conversational();
    // stage-1 form with no instruction slot
    static PromptTemplate stage1();
};

struct TokenSequence {
    std::vector<int> ids;
    std::vector<bool> loss_mask;
    int visual_start = -1;
    int visual_len = 0;

    int length() const { return static_cast<int>(ids.size()); }
    bool operator==(const TokenSequence&) const = default;
};

// Expands IMAGE_SLOT to visual_len placeholder positions; appends target
// tokens plus STOP with loss_mask true. Empty target gives an
// inference-ready sequence with an all-false mask.
TokenSequence assemble(const Vocabulary& vocab, const PromptTemplate& tmpl,
                       const std::string& instruction,
                       const std::string& target, int visual_len);

// The stage-2 generation prompt of the curation pipeline.
TokenSequence build_detail_prompt(const Vocabulary& vocab, int visual_len);

// previous prompt + generated tokens + "###Human: Continue ###Assistant:"
TokenSequence build_continue_prompt(const Vocabulary& vocab,
                                    const TokenSequence& previous,
                                    const std::vector<int>& generated,
                                    int max_seq_len);

// Token embeddings everywhere except visual_span, where prefix rows are
// spliced in; gradient flows into the prefix.
TensorPtr embed_with_visual(Tape& tape, const TokenSequence& seq,
                            const TensorPtr& token_table,
                            const TensorPtr& prefix);

struct InstructionSet {
    std::vector<std::string> instructions;

    const std::string& sample(Rng& rng) const;
    void save(const std::string& path) const;
    static InstructionSet load(const std::string& path);
    static InstructionSet defaults();
};

}  // namespace tinyvlm
