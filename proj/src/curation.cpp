#include "tinyvlm/curation.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>
#include <httplib.h>

namespace tinyvlm {

namespace {

std::string lowercase(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    return s;
}

bool contains_ci(const std::string& haystack, const std::string& needle) {
    return lowercase(haystack).find(lowercase(needle)) != std::string::npos;
}

std::vector<std::string> split_sentences(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        cur += c;
        if (c == '.' || c == '!' || c == '?') {
            while (!cur.empty() && cur.front() == ' ') cur.erase(cur.begin());
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        }
    }
    while (!cur.empty() && cur.front() == ' ') cur.erase(cur.begin());
    if (!cur.empty()) out.push_back(cur);
    return out;
}

// whitespace words with trailing punctuation peeled, for vocab checks
std::vector<std::string> naive_words(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string w;
    while (is >> w) {
        std::vector<std::string> tail;
        while (w.size() > 1 && std::string(".,?!").find(w.back()) !=
                                   std::string::npos) {
            tail.push_back(std::string(1, w.back()));
            w.pop_back();
        }
        out.push_back(w);
        for (auto it = tail.rbegin(); it != tail.rend(); ++it)
            out.push_back(*it);
    }
    return out;
}

}  // namespace

RuleMockFixer::RuleMockFixer(Vocabulary vocab, std::vector<std::string> banned)
    : vocab_(std::move(vocab)), banned_(std::move(banned)) {}

std::string RuleMockFixer::send(const std::string& /*prompt*/,
                                const std::string& payload) {
    std::vector<std::string> kept;
    for (const auto& sentence : split_sentences(payload)) {
        if (std::find(kept.begin(), kept.end(), sentence) != kept.end())
            continue;  // exact duplicate
        bool banned = false;
        for (const auto& phrase : banned_)
            if (contains_ci(sentence, phrase)) banned = true;
        if (banned) continue;
        bool unknown = false;
        for (const auto& w : naive_words(sentence))
            if (!vocab_.contains(w)) unknown = true;
        if (unknown) continue;
        // mend fragmented sentences by terminating them
        std::string mended = sentence;
        const char last = mended.empty() ? '\0' : mended.back();
        if (last != '.' && last != '!' && last != '?') mended += '.';
        if (std::find(kept.begin(), kept.end(), mended) != kept.end())
            continue;
        kept.push_back(mended);
    }
    std::string out;
    for (const auto& s : kept) {
        if (!out.empty()) out += ' ';
        out += s;
    }
    return out;
}

RemoteFixer::RemoteFixer(std::string url, int timeout_seconds, int max_retries,
                         Transport transport)
    : url_(std::move(url)), timeout_seconds_(timeout_seconds),
      max_retries_(max_retries), transport_(std::move(transport)) {
    if (!transport_) {
        transport_ = [](const std::string& url, const std::string& body,
                        const std::string& token, int timeout) {
            const auto scheme_end = url.find("://");
            if (scheme_end == std::string::npos)
                throw ExternalServiceError("bad fixer url: " + url);
            const auto path_start = url.find('/', scheme_end + 3);
            const std::string host_port =
                url.substr(0, path_start == std::string::npos ? url.size()
                                                              : path_start);
            const std::string path = path_start == std::string::npos
                                         ? "/"
                                         : url.substr(path_start);
            httplib::Client client(host_port);
            client.set_connection_timeout(timeout);
            client.set_read_timeout(timeout);
            httplib::Headers headers;
            if (!token.empty())
                headers.emplace("Authorization", "Bearer " + token);
            auto res = client.Post(path, headers, body, "application/json");
            if (!res)
                throw ExternalServiceError("fixer endpoint unreachable: " +
                                           url);
            if (res->status != 200)
                throw ExternalServiceError("fixer endpoint returned status " +
                                           std::to_string(res->status));
            return res->body;
        };
    }
}

std::string RemoteFixer::send(const std::string& prompt,
                              const std::string& payload) {
    nlohmann::json body = {{"system", prompt}, {"user", payload}};
    const char* token_env = std::getenv("TINYVLM_API_TOKEN");
    const std::string token = token_env ? token_env : "";
    int backoff_ms = 250;
    for (int attempt = 0;; ++attempt) {
        try {
            const std::string reply =
                transport_(url_, body.dump(), token, timeout_seconds_);
            auto parsed = nlohmann::json::parse(reply, nullptr, false);
            if (parsed.is_object() && parsed.contains("text"))
                return parsed["text"].get<std::string>();
            return reply;
        } catch (const ExternalServiceError&) {
            if (attempt + 1 >= max_retries_) throw;
            std::this_thread::sleep_for(
                std::chrono::milliseconds(backoff_ms));
            backoff_ms *= 2;
        }
    }
}

CurationRecord curate_one(
    const std::string& image_id, const Vocabulary& vocab, int visual_len,
    int threshold_tokens, int max_seq_len,
    const std::function<std::vector<int>(const TokenSequence&)>& generate_fn) {
    CurationRecord rec;
    rec.image_id = image_id;
    const TokenSequence prompt = build_detail_prompt(vocab, visual_len);
    const std::vector<int> raw = generate_fn(prompt);
    rec.raw_generation = vocab.detokenize(raw);
    // "exceeds 80 tokens" avoids the extra turn: length <= threshold continues
    if (static_cast<int>(raw.size()) <= threshold_tokens) {
        rec.continued = true;
        const TokenSequence cont =
            build_continue_prompt(vocab, prompt, raw, max_seq_len);
        const std::vector<int> extra = generate_fn(cont);
        rec.combined = rec.raw_generation;
        const std::string extra_text = vocab.detokenize(extra);
        if (!extra_text.empty()) {
            // the turn boundary is a sentence boundary: mark it so the
            // fixer can treat each turn's output as its own sentence
            if (!rec.combined.empty()) {
                const char last = rec.combined.back();
                if (last != '.' && last != '!' && last != '?')
                    rec.combined += '.';
                rec.combined += ' ';
            }
            rec.combined += extra_text;
        }
    } else {
        rec.continued = false;
        rec.combined = rec.raw_generation;
    }
    return rec;
}

std::vector<CurationRecord> generate_descriptions(
    const AlignmentModel& model, const Vocabulary& vocab,
    const std::vector<ManifestRecord>& images, int threshold_tokens,
    const DecodeConfig& decode) {
    std::vector<CurationRecord> out;
    out.reserve(images.size());
    const int visual_len = model.visual_prefix_len();
    for (const auto& img : images) {
        try {
            const auto pixels = read_ppm(img.image_path);
            Tape tape;
            auto prefix_t = model.encode_image(tape, pixels);
            out.push_back(curate_one(
                img.image_id, vocab, visual_len, threshold_tokens,
                model.config().lm.max_seq_len,
                [&](const TokenSequence& prompt) {
                    return model.generate(prompt, prefix_t, decode);
                }));
        } catch (const CapacityError& e) {
            throw CapacityError(std::string(e.what()) + " (image " +
                                img.image_id + ")");
        }
    }
    return out;
}

void repair(std::vector<CurationRecord>& records, FixerClient& fixer,
            int parallelism) {
    if (parallelism < 1) parallelism = 1;
    auto worker = [&](std::size_t idx) {
        auto& rec = records[idx];
        try {
            rec.fixed = fixer.send(prompts::kFixerPrompt, rec.combined);
            rec.fixer_provenance = fixer.provenance();
        } catch (const ExternalServiceError&) {
            rec.kept = false;
            rec.drop_reason = "fixer_unavailable";
            rec.fixer_provenance = fixer.provenance();
        }
    };
    if (parallelism == 1) {
        for (std::size_t i = 0; i < records.size(); ++i) worker(i);
        return;
    }
    // records are indexed, so output order matches input order regardless
    // of completion order
    for (std::size_t base = 0; base < records.size();
         base += static_cast<std::size_t>(parallelism)) {
        std::vector<std::thread> threads;
        const std::size_t end =
            std::min(records.size(), base + static_cast<std::size_t>(parallelism));
        for (std::size_t i = base; i < end; ++i)
            threads.emplace_back(worker, i);
        for (auto& t : threads) t.join();
    }
}

RetentionStats filter(std::vector<CurationRecord>& records,
                      const FilterRules& rules, const Vocabulary& vocab) {
    RetentionStats stats;
    stats.total = static_cast<int>(records.size());
    for (auto& rec : records) {
        if (!rec.drop_reason.empty()) {  // already dropped upstream
            ++stats.dropped;
            continue;
        }
        if (rec.fixed.empty()) {
            rec.drop_reason = "empty";
            ++stats.dropped;
            continue;
        }
        bool banned = false;
        for (const auto& phrase : rules.banned_phrases)
            if (contains_ci(rec.fixed, phrase)) banned = true;
        if (banned) {
            rec.drop_reason = "banned_phrase";
            ++stats.dropped;
            continue;
        }
        int token_count = 0;
        bool unknown = false;
        for (const auto& w : naive_words(rec.fixed)) {
            ++token_count;
            if (!vocab.contains(w)) unknown = true;
        }
        if (unknown) {
            rec.drop_reason = "outside_vocabulary";
            ++stats.dropped;
            continue;
        }
        if (token_count < rules.min_tokens) {
            rec.drop_reason = "too_short";
            ++stats.dropped;
            continue;
        }
        if (token_count > rules.max_tokens) {
            rec.drop_reason = "too_long";
            ++stats.dropped;
            continue;
        }
        rec.kept = true;
        ++stats.kept;
    }
    return stats;
}

PipelineResult run_pipeline(const AlignmentModel& model,
                            const Vocabulary& vocab,
                            const std::vector<ManifestRecord>& images,
                            FixerClient& fixer, const FilterRules& rules,
                            int threshold_tokens, std::uint64_t seed,
                            const std::string& out_manifest,
                            const std::string& audit_log, int parallelism) {
    // sampled decoding: greedy generations collapse under the continuation
    // rule (every "Continue" turn repeats the same phrase), which starves
    // the curated corpus of variety; the seed keeps the pipeline
    // deterministic
    DecodeConfig decode;
    decode.greedy = false;
    decode.temperature = 0.9;
    decode.seed = seed;
    PipelineResult result;
    result.records =
        generate_descriptions(model, vocab, images, threshold_tokens, decode);
    repair(result.records, fixer, parallelism);
    result.stats = filter(result.records, rules, vocab);

    std::vector<ManifestRecord> kept;
    for (std::size_t i = 0; i < result.records.size(); ++i) {
        if (!result.records[i].kept) continue;
        ManifestRecord r = images[i];
        r.kind = "detailed";
        r.text = result.records[i].fixed;
        kept.push_back(std::move(r));
    }
    write_manifest(out_manifest, kept);

    std::ofstream log(audit_log);
    if (!log) throw std::runtime_error("cannot write audit log: " + audit_log);
    for (const auto& rec : result.records) {
        log << rec.image_id << "\t" << (rec.continued ? 1 : 0) << "\t"
            << (rec.kept ? "kept" : "dropped(" + rec.drop_reason + ")") << "\t"
            << rec.fixer_provenance << "\t" << rec.raw_generation << "\t"
            << rec.combined << "\t" << rec.fixed << "\n";
    }
    return result;
}

}  // namespace tinyvlm
