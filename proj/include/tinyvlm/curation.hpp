// Description-curation pipeline: stage-1 model generates detailed
// descriptions, a continuation rule extends short ones, a fixer repairs the
// text, and hard-coded rules filter the survivors. Every stage is recorded
// with provenance.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tinyvlm/model.hpp"
#include "tinyvlm/synthetic.hpp"
#include "tinyvlm/vocab.hpp"

namespace tinyvlm {

struct ExternalServiceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CurationRecord {
    std::string image_id;
    std::string raw_generation;
    bool continued = false;
    std::string combined;
    std::string fixed;
    bool kept = false;
    std::string drop_reason;          // empty when kept
    std::string fixer_provenance;     // "remote" or "mock"
};

class FixerClient {
public:
    virtual ~FixerClient() = default;
    // prompt is the repair instruction; payload is the paragraph to fix
    virtual std::string send(const std::string& prompt,
                             const std::string& payload) = 0;
    virtual std::string provenance() const = 0;
};

// Deterministic stand-in for the remote repair model: splits on sentence
// delimiters, drops exact duplicates after the first, drops sentences
// containing banned phrases or out-of-vocabulary tokens, rejoins.
class RuleMockFixer : public FixerClient {
public:
    RuleMockFixer(Vocabulary vocab, std::vector<std::string> banned);
    std::string send(const std::string& prompt,
                     const std::string& payload) override;
    std::string provenance() const override { return "mock"; }

private:
    Vocabulary vocab_;
    std::vector<std::string> banned_;
};

// Single-endpoint text-in/text-out client: POSTs {system, user} JSON with
// bearer-token auth from TINYVLM_API_TOKEN, with timeout/retry/backoff.
class RemoteFixer : public FixerClient {
public:
    // transport is injectable for tests; the default performs the HTTP call
    using Transport = std::function<std::string(const std::string& url,
                                                const std::string& body,
                                                const std::string& token,
                                                int timeout_seconds)>;
    RemoteFixer(std::string url, int timeout_seconds = 30, int max_retries = 3,
                Transport transport = nullptr);
    std::string send(const std::string& prompt,
                     const std::string& payload) override;
    std::string provenance() const override { return "remote"; }

private:
    std::string url_;
    int timeout_seconds_;
    int max_retries_;
    Transport transport_;
};

struct FilterRules {
    std::vector<std::string> banned_phrases = {
        "I'm sorry I made a mistake",
        "I apologize for that",
    };
    int min_tokens = 6;
    int max_tokens = 200;
};

struct RetentionStats {
    int total = 0;
    int kept = 0;
    int dropped = 0;
};

// One image through generation + continuation. generate_fn abstracts the
// model call so the boundary rule is testable with forced lengths.
CurationRecord curate_one(
    const std::string& image_id, const Vocabulary& vocab, int visual_len,
    int threshold_tokens, int max_seq_len,
    const std::function<std::vector<int>(const TokenSequence&)>& generate_fn);

std::vector<CurationRecord> generate_descriptions(
    const AlignmentModel& model, const Vocabulary& vocab,
    const std::vector<ManifestRecord>& images, int threshold_tokens,
    const DecodeConfig& decode);

// Sends every record's combined text through the fixer with the verbatim
// repair prompt; exhausted retries mark the record dropped. Calls run with
// bounded parallelism; results are restored to input order.
void repair(std::vector<CurationRecord>& records, FixerClient& fixer,
            int parallelism = 4);

RetentionStats filter(std::vector<CurationRecord>& records,
                      const FilterRules& rules, const Vocabulary& vocab);

struct PipelineResult {
    std::vector<CurationRecord> records;
    RetentionStats stats;
};

// generate -> repair -> filter; writes the kept records as a training
// manifest (ground truth carried from the input images) and a full audit log.
PipelineResult run_pipeline(const AlignmentModel& model,
                            const Vocabulary& vocab,
                            const std::vector<ManifestRecord>& images,
                            FixerClient& fixer, const FilterRules& rules,
                            int threshold_tokens, std::uint64_t seed,
                            const std::string& out_manifest,
                            const std::string& audit_log, int parallelism = 4);

}  // namespace tinyvlm
