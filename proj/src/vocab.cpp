#include "tinyvlm/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "tinyvlm/synthetic.hpp"

namespace tinyvlm {

namespace prompts {

const char* kDetailInstruction =
    "Describe this image in detail. Give as many details as possible. "
    "Say everything you see.";

const char* kContinueWord = "Continue";

const char* kFixerPrompt =
    "Fix the error in the given paragraph. Remove any repeating sentences, "
    "meaningless characters, not English sentences, and so on. Remove "
    "unnecessary repetition. Rewrite any incomplete sentences. Return "
    "directly the results without explanation. Return directly the input "
    "paragraph if it is already correct without explanation.";

std::string judge_prompt(const std::string& reference,
                         const std::string& candidate) {
    return "There is one image caption1 `" + reference +
           "', and there is another image caption2 `" + candidate +
           "'. Does image caption2 cover all the objects and visual "
           "relations shown in image caption1? Only answer yes or no "
           "without any explanation.";
}

const char* kLongModeInstruction =
    "Please describe this image as detailed as possible.";

const char* kShortModeInstruction =
    "Please describe the image shortly and precisely, in less than 20 words.";

const char* kFailureDetailInstruction = "Describe the image in detail.";

const char* kFailurePoemInstruction =
    "Can you write a beautiful poem about this image?";

const std::vector<std::string>& task_prompts() {
    static const std::vector<std::string> v = {
        "Explain why this meme is funny.",
        "How should I make something like this?",
        "Help me draft a professional advertisement for this.",
        "Can you craft a beautiful poem about this image?",
    };
    return v;
}

const std::vector<std::string>& default_instructions() {
    static const std::vector<std::string> v = {
        "Describe this image in detail",
        "Could you describe the contents of this image for me",
    };
    return v;
}

}  // namespace prompts

namespace {

const std::string kPunct = ".,?!";

bool is_punct_token(const std::string& t) {
    return t.size() == 1 && kPunct.find(t[0]) != std::string::npos;
}

const char* kSpecialSurfaces[] = {"<PAD>",  "<BOS>",          "###Human:",
                                  "###Assistant:", "<Img>",  "</Img>",
                                  "<ImageFeature>", "Continue", "###"};

std::string capitalize(std::string w) {
    if (!w.empty() && w[0] >= 'a' && w[0] <= 'z')
        w[0] = static_cast<char>(w[0] - 'a' + 'A');
    return w;
}

}  // namespace

void Vocabulary::add(const std::string& token) {
    if (!contains(token)) tokens_.push_back(token);
}

void Vocabulary::add_words_of(const std::string& text) {
    std::istringstream is(text);
    std::string piece;
    while (is >> piece) {
        // peel trailing punctuation into its own tokens
        std::vector<std::string> tail;
        while (piece.size() > 1 &&
               kPunct.find(piece.back()) != std::string::npos) {
            tail.push_back(std::string(1, piece.back()));
            piece.pop_back();
        }
        add(piece);
        for (auto it = tail.rbegin(); it != tail.rend(); ++it) add(*it);
    }
}

Vocabulary Vocabulary::build_default() {
    Vocabulary v;
    for (const char* s : kSpecialSurfaces) v.tokens_.push_back(s);
    for (char c : kPunct) v.add(std::string(1, c));
    // caption grammar
    for (const char* w : grammar::kColors) v.add(w);
    for (const char* w : grammar::kShapes) v.add(w);
    for (const char* w : grammar::kRowNames) v.add(w);
    for (const char* w : grammar::kColNames) v.add(w);
    for (const char* w : grammar::kCountWords) v.add(w);
    for (const std::string w :
         {"In", "the", "there", "is", "a", "A", "You", "can", "see", "in",
          "sits", "The", "image", "contains", "object", "objects"})
        v.add(w);
    for (const char* w : grammar::kRowNames) v.add(capitalize(w));
    // sentence-initial forms used by the detailed caption grammar
    for (const char* w : grammar::kColors) v.add(capitalize(w));
    // every shipped prompt and instruction string
    v.add_words_of(prompts::kDetailInstruction);
    v.add_words_of(prompts::kLongModeInstruction);
    v.add_words_of(prompts::kShortModeInstruction);
    v.add_words_of(prompts::kFailureDetailInstruction);
    v.add_words_of(prompts::kFailurePoemInstruction);
    for (const auto& s : prompts::task_prompts()) v.add_words_of(s);
    for (const auto& s : prompts::default_instructions()) v.add_words_of(s);
    // words the curation filter and fixer rules need to recognize
    v.add_words_of("I'm sorry I made a mistake");
    v.add_words_of("I apologize for that");
    // extra instruction-style words for the pretraining corpus
    v.add_words_of("Give a short description");
    v.add_words_of("Describe the image shortly");
    return v;
}

int Vocabulary::id_of(const std::string& token) const {
    for (std::size_t i = 0; i < tokens_.size(); ++i)
        if (tokens_[i] == token) return static_cast<int>(i);
    throw TokenizationError("unknown token: \"" + token + "\"");
}

bool Vocabulary::contains(const std::string& token) const {
    return std::find(tokens_.begin(), tokens_.end(), token) != tokens_.end();
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || id >= size())
        throw InvalidRequestError("token id out of range: " +
                                  std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::tokenize(const std::string& text) const {
    std::vector<int> out;
    std::istringstream is(text);
    std::string piece;
    while (is >> piece) {
        if (contains(piece)) {
            out.push_back(id_of(piece));
            continue;
        }
        std::vector<std::string> tail;
        while (piece.size() > 1 &&
               kPunct.find(piece.back()) != std::string::npos) {
            tail.push_back(std::string(1, piece.back()));
            piece.pop_back();
        }
        out.push_back(id_of(piece));
        for (auto it = tail.rbegin(); it != tail.rend(); ++it)
            out.push_back(id_of(*it));
    }
    return out;
}

std::string Vocabulary::detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        const std::string& t = token(id);
        if (!out.empty() && !is_punct_token(t)) out += ' ';
        out += t;
    }
    return out;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write vocabulary: " + path);
    for (const auto& t : tokens_) f << t << "\n";
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read vocabulary: " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty()) v.tokens_.push_back(line);
    }
    return v;
}

PromptTemplate PromptTemplate::conversational() {
    return {{
        {TemplateSegment::Literal, "###Human:"},
        {TemplateSegment::Literal, "<Img>"},
        {TemplateSegment::ImageSlot, ""},
        {TemplateSegment::Literal, "</Img>"},
        {TemplateSegment::InstructionSlot, ""},
        {TemplateSegment::Literal, "###Assistant:"},
    }};
}

PromptTemplate PromptTemplate::stage1() {
    return {{
        {TemplateSegment::Literal, "###Human:"},
        {TemplateSegment::Literal, "<Img>"},
        {TemplateSegment::ImageSlot, ""},
        {TemplateSegment::Literal, "</Img>"},
        {TemplateSegment::Literal, "###Assistant:"},
    }};
}

TokenSequence assemble(const Vocabulary& vocab, const PromptTemplate& tmpl,
                       const std::string& instruction,
                       const std::string& target, int visual_len) {
    if (visual_len <= 0)
        throw InvalidRequestError("assemble: visual_len must be positive");
    int slots = 0;
    for (const auto& seg : tmpl.segments)
        if (seg.kind == TemplateSegment::ImageSlot) ++slots;
    if (slots != 1)
        throw InvalidRequestError(
            "assemble: template must contain exactly one image slot");

    TokenSequence seq;
    seq.ids.push_back(Vocabulary::kBos);
    for (const auto& seg : tmpl.segments) {
        switch (seg.kind) {
            case TemplateSegment::Literal:
                for (int id : vocab.tokenize(seg.literal)) seq.ids.push_back(id);
                break;
            case TemplateSegment::ImageSlot:
                seq.visual_start = seq.length();
                seq.visual_len = visual_len;
                for (int i = 0; i < visual_len; ++i)
                    seq.ids.push_back(Vocabulary::kImageSlot);
                break;
            case TemplateSegment::InstructionSlot:
                if (!instruction.empty())
                    for (int id : vocab.tokenize(instruction))
                        seq.ids.push_back(id);
                break;
        }
    }
    seq.loss_mask.assign(seq.ids.size(), false);
    if (!target.empty()) {
        for (int id : vocab.tokenize(target)) {
            seq.ids.push_back(id);
            seq.loss_mask.push_back(true);
        }
        seq.ids.push_back(Vocabulary::kStop);
        seq.loss_mask.push_back(true);
    }
    return seq;
}

TokenSequence build_detail_prompt(const Vocabulary& vocab, int visual_len) {
    return assemble(vocab, PromptTemplate::conversational(),
                    prompts::kDetailInstruction, "", visual_len);
}

TokenSequence build_continue_prompt(const Vocabulary& vocab,
                                    const TokenSequence& previous,
                                    const std::vector<int>& generated,
                                    int max_seq_len) {
    TokenSequence seq = previous;
    for (int id : generated) seq.ids.push_back(id);
    seq.ids.push_back(vocab.id_of("###Human:"));
    seq.ids.push_back(vocab.id_of("Continue"));
    seq.ids.push_back(vocab.id_of("###Assistant:"));
    seq.loss_mask.assign(seq.ids.size(), false);
    if (seq.length() > max_seq_len)
        throw CapacityError("continue prompt length " +
                            std::to_string(seq.length()) + " exceeds " +
                            std::to_string(max_seq_len));
    return seq;
}

TensorPtr embed_with_visual(Tape& tape, const TokenSequence& seq,
                            const TensorPtr& token_table,
                            const TensorPtr& prefix) {
    if (seq.visual_start < 0)
        throw InvalidRequestError("sequence has no visual span");
    if (prefix->shape.size() != 2 || prefix->shape[0] != seq.visual_len)
        throw DimensionError("visual prefix " + prefix->shape_str() +
                             " does not match visual span length " +
                             std::to_string(seq.visual_len));
    auto emb = embedding_rows(tape, token_table, seq.ids);
    const int t = seq.length();
    const int s = seq.visual_start;
    const int e = s + seq.visual_len;
    std::vector<TensorPtr> parts;
    if (s > 0) parts.push_back(slice_rows(tape, emb, 0, s));
    parts.push_back(prefix);
    if (e < t) parts.push_back(slice_rows(tape, emb, e, t - e));
    return concat_rows(tape, parts);
}

const std::string& InstructionSet::sample(Rng& rng) const {
    if (instructions.empty())
        throw InvalidRequestError("instruction set is empty");
    return instructions[rng.below(instructions.size())];
}

void InstructionSet::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write instruction set: " + path);
    for (const auto& s : instructions) f << s << "\n";
}

InstructionSet InstructionSet::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read instruction set: " + path);
    InstructionSet set;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) set.instructions.push_back(line);
    if (set.instructions.empty())
        throw InvalidRequestError("instruction set file is empty: " + path);
    return set;
}

InstructionSet InstructionSet::defaults() {
    return {prompts::default_instructions()};
}

}  // namespace tinyvlm
