#include "tinyvlm/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "tinyvlm/vocab.hpp"

namespace tinyvlm {

namespace {

std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

// lowercase words with punctuation stripped
std::vector<std::string> caption_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c)) || c == '.' ||
            c == ',' || c == '!' || c == '?') {
            if (!cur.empty()) words.push_back(lower(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) words.push_back(lower(cur));
    return words;
}

}  // namespace

ObjectLexicon ObjectLexicon::build_default() {
    ObjectLexicon lex;
    for (int c = 0; c < static_cast<int>(grammar::kColors.size()); ++c) {
        for (int s = 0; s < static_cast<int>(grammar::kShapes.size()); ++s) {
            const std::string color = grammar::kColors[c];
            const std::string shape = grammar::kShapes[s];
            lex.entries.push_back({{color, shape}, s, c});
            lex.entries.push_back({{color, shape + "s"}, s, c});
        }
    }
    return lex;
}

ChairResult chair_i(const std::string& caption,
                    const std::vector<SceneObject>& ground_truth,
                    const ObjectLexicon& lexicon) {
    ChairResult result;
    std::set<std::pair<int, int>> truth;
    for (const auto& obj : ground_truth) truth.insert({obj.shape, obj.color});

    const auto words = caption_words(caption);
    // longest-match scan so "red circle" isn't double counted
    std::size_t i = 0;
    while (i < words.size()) {
        const ObjectLexicon::Entry* best = nullptr;
        for (const auto& entry : lexicon.entries) {
            if (best && entry.words.size() <= best->words.size()) continue;
            if (i + entry.words.size() > words.size()) continue;
            bool match = true;
            for (std::size_t k = 0; k < entry.words.size(); ++k) {
                if (words[i + k] != entry.words[k]) {
                    match = false;
                    break;
                }
            }
            if (match) best = &entry;
        }
        if (best) {
            result.mentions.push_back({best->shape, best->color});
            if (truth.count({best->shape, best->color}) == 0)
                ++result.hallucinated;
            i += best->words.size();
        } else {
            ++i;
        }
    }

    if (result.mentions.empty()) {
        result.zero_mentions = true;
        result.chair_i = 0.0;
    } else {
        result.chair_i = static_cast<double>(result.hallucinated) /
                         static_cast<double>(result.mentions.size());
    }
    return result;
}

void HallucinationReport::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw InvalidRequestError("cannot write report: " + path);
    out << "image_id\tmentions\thallucinated\tchair_i\tlength_tokens\n";
    for (const auto& row : rows) {
        out << row.image_id << '\t' << row.mentions << '\t' << row.hallucinated
            << '\t' << row.chair_i << '\t' << row.length_tokens << '\n';
    }
    out << "# corpus_chair_i=" << corpus_chair_i
        << " avg_length_tokens=" << avg_length_tokens << '\n';
}

HallucinationReport hallucination_eval(const AlignmentModel& model,
                                       const Vocabulary& vocab,
                                       const std::vector<ManifestRecord>& images,
                                       PromptMode mode,
                                       const DecodeConfig& decode) {
    const std::string instruction = mode == PromptMode::Long
                                        ? prompts::kLongModeInstruction
                                        : prompts::kShortModeInstruction;
    const auto lexicon = ObjectLexicon::build_default();
    const auto tmpl = PromptTemplate::conversational();
    const int visual_len = model.visual_prefix_len();

    HallucinationReport report;
    long length_sum = 0;
    for (const auto& img : images) {
        const auto pixels = read_ppm(img.image_path);
        Tape tape;
        const auto prefix = model.encode_image(tape, pixels);
        const auto prompt = assemble(vocab, tmpl, instruction, "", visual_len);
        const auto ids = model.generate(prompt, prefix, decode);
        const std::string caption = vocab.detokenize(ids);

        const auto chair = chair_i(caption, img.ground_truth, lexicon);
        HallucinationReport::Row row;
        row.image_id = img.image_id;
        row.mentions = static_cast<int>(chair.mentions.size());
        row.hallucinated = chair.hallucinated;
        row.chair_i = chair.chair_i;
        row.length_tokens = static_cast<int>(ids.size());
        report.rows.push_back(row);

        report.total_mentions += row.mentions;
        report.total_hallucinated += row.hallucinated;
        length_sum += row.length_tokens;
    }
    report.corpus_chair_i =
        report.total_mentions == 0
            ? 0.0
            : static_cast<double>(report.total_hallucinated) /
                  static_cast<double>(report.total_mentions);
    report.avg_length_tokens =
        images.empty() ? 0.0
                       : static_cast<double>(length_sum) /
                             static_cast<double>(images.size());
    return report;
}

JudgeVerdict OracleJudge::judge(const std::string& reference,
                                const std::string& candidate) {
    const auto ref_objs = parse_caption_objects(reference);
    std::multiset<SceneObject> cand;
    for (const auto& obj : parse_caption_objects(candidate)) cand.insert(obj);
    for (const auto& obj : ref_objs) {
        auto it = cand.find(obj);
        if (it == cand.end()) return JudgeVerdict::No;
        cand.erase(it);
    }
    return JudgeVerdict::Yes;
}

RemoteJudge::RemoteJudge(Transport transport, std::string request_log_path)
    : transport_(std::move(transport)),
      request_log_path_(std::move(request_log_path)) {}

JudgeVerdict RemoteJudge::judge(const std::string& reference,
                                const std::string& candidate) {
    const std::string prompt = prompts::judge_prompt(reference, candidate);
    if (!request_log_path_.empty()) {
        std::ofstream log(request_log_path_, std::ios::app | std::ios::binary);
        log.write(prompt.data(),
                  static_cast<std::streamsize>(prompt.size()));
        log.put('\n');
    }
    const std::string reply = transport_(prompt);
    const std::string norm = lower(reply);
    // first yes/no word wins
    std::istringstream in(norm);
    std::string word;
    while (in >> word) {
        while (!word.empty() && !std::isalpha(static_cast<unsigned char>(word.back())))
            word.pop_back();
        if (word == "yes") return JudgeVerdict::Yes;
        if (word == "no") return JudgeVerdict::No;
    }
    throw JudgeFormatError("judge reply is not yes/no: " + reply);
}

std::string format_percent(int correct, int total) {
    const double pct =
        total == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / total;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f%%", pct);
    return buf;
}

CoverageResult coverage_eval(const std::vector<std::string>& references,
                             const std::vector<std::string>& candidates,
                             JudgeClient& judge, bool strict) {
    if (references.size() != candidates.size())
        throw InvalidRequestError("coverage_eval: size mismatch");
    CoverageResult result;
    result.total = static_cast<int>(references.size());
    for (std::size_t i = 0; i < references.size(); ++i) {
        try {
            if (judge.judge(references[i], candidates[i]) == JudgeVerdict::Yes)
                ++result.correct;
        } catch (const JudgeFormatError&) {
            if (strict) throw;
            ++result.errors;
        }
    }
    result.percentage =
        result.total == 0
            ? 0.0
            : 100.0 * static_cast<double>(result.correct) / result.total;
    result.formatted = format_percent(result.correct, result.total);
    return result;
}

FailureVerdict failure_detect(const std::string& text) {
    FailureVerdict v;
    std::string stripped = text;
    while (!stripped.empty() &&
           std::isspace(static_cast<unsigned char>(stripped.back())))
        stripped.pop_back();

    if (stripped.empty()) {
        v.empty = true;
        v.failed = true;
        return v;
    }

    const char last = stripped.back();
    v.fragment = last != '.' && last != '!' && last != '?';

    // repetition: any 4-word window occurring three or more times
    const auto words = caption_words(text);
    if (words.size() >= 4) {
        std::map<std::array<std::string, 4>, int> counts;
        for (std::size_t i = 0; i + 4 <= words.size(); ++i) {
            std::array<std::string, 4> gram = {words[i], words[i + 1],
                                               words[i + 2], words[i + 3]};
            if (++counts[gram] >= 3) {
                v.repetition = true;
                break;
            }
        }
    }

    v.failed = v.repetition || v.fragment || v.empty;
    return v;
}

FailureRates failure_rate_eval(const AlignmentModel& model_before,
                               const AlignmentModel& model_after,
                               const Vocabulary& vocab,
                               const std::vector<ManifestRecord>& images,
                               const DecodeConfig& decode) {
    FailureRates rates;
    rates.denominator = static_cast<int>(images.size());
    if (images.empty()) return rates;

    int failed_before = 0;
    int failed_after = 0;
    for (const auto& img : images) {
        const auto pixels = read_ppm(img.image_path);
        const auto prompt =
            build_detail_prompt(vocab, model_before.visual_prefix_len());
        {
            Tape tape;
            const auto prefix = model_before.encode_image(tape, pixels);
            const auto ids = model_before.generate(prompt, prefix, decode);
            if (failure_detect(vocab.detokenize(ids)).failed) ++failed_before;
        }
        {
            Tape tape;
            const auto prefix = model_after.encode_image(tape, pixels);
            const auto ids = model_after.generate(prompt, prefix, decode);
            if (failure_detect(vocab.detokenize(ids)).failed) ++failed_after;
        }
    }
    rates.before = static_cast<double>(failed_before) / rates.denominator;
    rates.after = static_cast<double>(failed_after) / rates.denominator;
    return rates;
}

}  // namespace tinyvlm
