// Quantitative protocols: CHAIR_i hallucination rate, judge-based caption
// coverage, and the automated failure-rate measurement that stands in for
// manual counting.
#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tinyvlm/curation.hpp"  // ExternalServiceError
#include "tinyvlm/model.hpp"
#include "tinyvlm/synthetic.hpp"

namespace tinyvlm {

struct JudgeFormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Surface phrases mapped to canonical (shape,color) objects.
struct ObjectLexicon {
    struct Entry {
        std::vector<std::string> words;  // lowercase phrase words
        int shape;
        int color;
    };
    std::vector<Entry> entries;

    // "{color} {shape}" and the plural form for all 24 objects
    static ObjectLexicon build_default();
};

struct ChairResult {
    std::vector<std::pair<int, int>> mentions;  // (shape,color), per mention
    int hallucinated = 0;
    double chair_i = 0.0;
    bool zero_mentions = false;
};

ChairResult chair_i(const std::string& caption,
                    const std::vector<SceneObject>& ground_truth,
                    const ObjectLexicon& lexicon);

struct HallucinationReport {
    struct Row {
        std::string image_id;
        int mentions = 0;
        int hallucinated = 0;
        double chair_i = 0.0;
        int length_tokens = 0;
    };
    std::vector<Row> rows;
    long total_mentions = 0;
    long total_hallucinated = 0;
    double corpus_chair_i = 0.0;  // mention-weighted: sum hall / sum mentions
    double avg_length_tokens = 0.0;

    void save(const std::string& path) const;
};

enum class PromptMode { Long, Short };

HallucinationReport hallucination_eval(const AlignmentModel& model,
                                       const Vocabulary& vocab,
                                       const std::vector<ManifestRecord>& images,
                                       PromptMode mode,
                                       const DecodeConfig& decode);

enum class JudgeVerdict { Yes, No };

class JudgeClient {
public:
    virtual ~JudgeClient() = default;
    virtual JudgeVerdict judge(const std::string& reference,
                               const std::string& candidate) = 0;
};

// Deterministic containment oracle: yes iff every (shape,color,cell) parsed
// from the reference also parses from the candidate.
class OracleJudge : public JudgeClient {
public:
    JudgeVerdict judge(const std::string& reference,
                       const std::string& candidate) override;
};

// Sends the verbatim coverage prompt over an injectable transport and logs
// every request payload; replies are parsed case-insensitively as yes/no.
class RemoteJudge : public JudgeClient {
public:
    using Transport = std::function<std::string(const std::string& prompt)>;
    RemoteJudge(Transport transport, std::string request_log_path);
    JudgeVerdict judge(const std::string& reference,
                       const std::string& candidate) override;

private:
    Transport transport_;
    std::string request_log_path_;
};

struct CoverageResult {
    int correct = 0;
    int total = 0;
    int errors = 0;  // malformed judge replies (strict=false only)
    double percentage = 0.0;
    std::string formatted;  // e.g. "66.2%"
};

CoverageResult coverage_eval(const std::vector<std::string>& references,
                             const std::vector<std::string>& candidates,
                             JudgeClient& judge, bool strict = true);

std::string format_percent(int correct, int total);

struct FailureVerdict {
    bool repetition = false;  // some 4-token n-gram occurs >= 3 times
    bool fragment = false;    // final sentence lacks terminal punctuation
    bool empty = false;
    bool failed = false;
};

FailureVerdict failure_detect(const std::string& text);

struct FailureRates {
    double before = 0.0;
    double after = 0.0;
    int denominator = 0;
};

FailureRates failure_rate_eval(const AlignmentModel& model_before,
                               const AlignmentModel& model_after,
                               const Vocabulary& vocab,
                               const std::vector<ManifestRecord>& images,
                               const DecodeConfig& decode);

}  // namespace tinyvlm
