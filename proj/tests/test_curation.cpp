// Curation pipeline: continuation boundary, fixers, filtering, and
// end-to-end determinism.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "tinyvlm/curation.hpp"
#include "tinyvlm/training.hpp"

using namespace tinyvlm;

namespace {

const Vocabulary& vocab() {
    static Vocabulary v = Vocabulary::build_default();
    return v;
}

// generate_fn stub that returns a fixed-length id sequence regardless of the
// prompt, so the boundary rule is isolated from any model.
std::function<std::vector<int>(const TokenSequence&)> fixed_length(int n) {
    const auto& v = vocab();
    const int a = v.id_of("a"), red = v.id_of("red"), circle = v.id_of("circle");
    std::vector<int> ids;
    for (int i = 0; i < n; ++i) ids.push_back(i % 3 == 0 ? a
                                              : i % 3 == 1 ? red
                                                           : circle);
    return [ids](const TokenSequence&) { return ids; };
}

struct UppercaseFixer : FixerClient {
    std::string last_prompt;
    std::string send(const std::string& prompt,
                     const std::string& payload) override {
        last_prompt = prompt;
        std::string out = payload;
        for (char& c : out)
            c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
        return out;
    }
    std::string provenance() const override { return "mock"; }
};

struct IdentityFixer : FixerClient {
    std::string send(const std::string&, const std::string& payload) override {
        return payload;
    }
    std::string provenance() const override { return "mock"; }
};

struct FlakyFixer : FixerClient {
    int failures_left;
    int calls = 0;
    explicit FlakyFixer(int failures) : failures_left(failures) {}
    std::string send(const std::string&, const std::string& payload) override {
        ++calls;
        if (failures_left-- > 0)
            throw ExternalServiceError("synthetic outage");
        return payload;
    }
    std::string provenance() const override { return "mock"; }
};

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("continuation boundary: 80 continues, 81 does not") {
    const auto& v = vocab();
    {
        const auto rec = curate_one("img0", v, 8, 80, 256, fixed_length(80));
        CHECK(rec.continued);
        CHECK(rec.combined.size() > rec.raw_generation.size());
    }
    {
        const auto rec = curate_one("img0", v, 8, 80, 256, fixed_length(81));
        CHECK_FALSE(rec.continued);
        CHECK(rec.combined == rec.raw_generation);
    }
    {
        const auto rec = curate_one("img0", v, 8, 80, 256, fixed_length(100));
        CHECK_FALSE(rec.continued);
    }
    {
        const auto rec = curate_one("img0", v, 8, 80, 256, fixed_length(40));
        CHECK(rec.continued);
        CHECK(rec.combined.size() > rec.raw_generation.size());
    }
}

TEST_CASE("repair sends the verbatim fix prompt and applies the fixer") {
    const auto& v = vocab();
    std::vector<CurationRecord> records;
    auto rec = curate_one("img1", v, 8, 80, 256, fixed_length(90));
    records.push_back(rec);

    UppercaseFixer fixer;
    repair(records, fixer, 1);
    CHECK(records[0].fixer_provenance == "mock");
    std::string upper = records[0].combined;
    for (char& c : upper)
        c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    CHECK(records[0].fixed == upper);
    CHECK(fixer.last_prompt == prompts::kFixerPrompt);
    CHECK(fixer.last_prompt.find("Fix the error in the given paragraph") !=
          std::string::npos);
}

TEST_CASE("rule-mock fixer dedupes and strips banned sentences") {
    FilterRules rules;
    RuleMockFixer fixer(vocab(), rules.banned_phrases);
    const std::string input =
        "In the top left, there is a red circle. "
        "In the top left, there is a red circle. "
        "I apologize for that. "
        "Blue square sits in the bottom right.";
    const std::string fixed = fixer.send(prompts::kFixerPrompt, input);
    // first duplicate survives, second removed, apology removed
    CHECK(fixed.find("red circle") != std::string::npos);
    CHECK(fixed.find("apologize") == std::string::npos);
    CHECK(fixed.find("Blue square") != std::string::npos);
    const auto first = fixed.find("red circle");
    CHECK(fixed.find("red circle", first + 1) == std::string::npos);

    // out-of-vocabulary sentences are dropped too
    const std::string oov =
        "A red circle sits in the top left. The quantum zebra vibrates.";
    const std::string cleaned = fixer.send(prompts::kFixerPrompt, oov);
    CHECK(cleaned.find("zebra") == std::string::npos);
    CHECK(cleaned.find("red circle") != std::string::npos);

    // already-correct input passes through unchanged
    const std::string good = "A red circle sits in the top left.";
    CHECK(fixer.send(prompts::kFixerPrompt, good) == good);
}

TEST_CASE("identity-fixed records stay eligible for keeping") {
    const auto& v = vocab();
    std::vector<CurationRecord> records = {
        curate_one("img2", v, 8, 80, 256, fixed_length(90))};
    IdentityFixer fixer;
    repair(records, fixer, 1);
    CHECK(records[0].fixed == records[0].combined);

    FilterRules rules;
    rules.min_tokens = 1;
    const auto stats = filter(records, rules, v);
    CHECK(stats.kept == 1);
    CHECK(records[0].kept);
}

TEST_CASE("filter drops banned phrases case-insensitively") {
    const auto& v = vocab();
    FilterRules rules;
    rules.min_tokens = 1;
    std::vector<CurationRecord> records(3);
    records[0].image_id = "a";
    records[0].fixed = "A red circle sits in the top left.";
    records[1].image_id = "b";
    records[1].fixed = "well, i APOLOGIZE For That, but the circle is red.";
    records[2].image_id = "c";
    records[2].fixed = "I'm sorry I made a mistake. A red circle.";
    const auto stats = filter(records, rules, v);
    CHECK(stats.total == 3);
    CHECK(stats.kept == 1);
    CHECK(records[0].kept);
    CHECK_FALSE(records[1].kept);
    CHECK(records[1].drop_reason == "banned_phrase");
    CHECK_FALSE(records[2].kept);
    CHECK(records[2].drop_reason == "banned_phrase");
}

TEST_CASE("filter length bounds and empties") {
    const auto& v = vocab();
    FilterRules rules;
    rules.min_tokens = 6;
    rules.max_tokens = 10;
    std::vector<CurationRecord> records(3);
    records[0].fixed = "a red circle";  // 3 tokens: too short
    records[1].fixed = "A red circle sits in the top left.";  // in range
    records[2].fixed = "";
    const auto stats = filter(records, rules, v);
    CHECK(stats.kept == 1);
    CHECK(records[0].drop_reason == "too_short");
    CHECK(records[1].kept);
    CHECK(records[2].drop_reason == "empty");
    CHECK(stats.kept + stats.dropped == stats.total);
}

TEST_CASE("fixer outages retry then drop") {
    const auto& v = vocab();
    // RemoteFixer with an injected transport that always fails
    int attempts = 0;
    RemoteFixer broken(
        "http://localhost:1/fix", 1, 3,
        [&attempts](const std::string&, const std::string&, const std::string&,
                    int) -> std::string {
            ++attempts;
            throw ExternalServiceError("connection refused");
        });
    std::vector<CurationRecord> records = {
        curate_one("img3", v, 8, 80, 256, fixed_length(90))};
    repair(records, broken, 1);
    CHECK(attempts == 3);
    CHECK_FALSE(records[0].kept);
    CHECK(records[0].drop_reason == "fixer_unavailable");
    CHECK(records[0].fixed.empty());

    FilterRules rules;
    auto recs = records;
    const auto stats = filter(recs, rules, v);
    CHECK(stats.kept == 0);

    // a transient outage that recovers within the retry budget succeeds
    int tries = 0;
    RemoteFixer flaky(
        "http://localhost:1/fix", 1, 3,
        [&tries](const std::string&, const std::string& body,
                 const std::string&, int) -> std::string {
            if (++tries < 3) throw ExternalServiceError("timeout");
            return "{\"text\": \"A red circle sits in the top left.\"}";
        });
    std::vector<CurationRecord> ok = {
        curate_one("img4", v, 8, 80, 256, fixed_length(90))};
    repair(ok, flaky, 1);
    CHECK(tries == 3);
    CHECK(ok[0].fixed == "A red circle sits in the top left.");
}

TEST_CASE("remote fixer wraps the prompt and payload as json") {
    std::string seen_body, seen_token;
    setenv("TINYVLM_API_TOKEN", "test-token-123", 1);
    RemoteFixer fixer(
        "http://localhost:1/fix", 1, 1,
        [&](const std::string&, const std::string& body,
            const std::string& token, int) -> std::string {
            seen_body = body;
            seen_token = token;
            return "fixed text";
        });
    const std::string out = fixer.send("PROMPT", "PAYLOAD");
    CHECK(out == "fixed text");
    CHECK(seen_token == "test-token-123");
    CHECK(seen_body.find("PROMPT") != std::string::npos);
    CHECK(seen_body.find("PAYLOAD") != std::string::npos);
    CHECK(seen_body.find("system") != std::string::npos);
    CHECK(seen_body.find("user") != std::string::npos);
}

TEST_CASE("pipeline end to end with a real stage-1-style model") {
    const auto& v = vocab();
    const auto dir = temp_dir("curation_e2e");
    const std::string img_manifest = (dir / "images.tsv").string();
    build_dataset(dir.string(), img_manifest, 6, "short_noisy", 0.2, 5);
    const auto images = read_manifest(img_manifest);

    ModelConfig cfg;
    cfg.lm.vocab_size = v.size();
    AlignmentModel model(cfg, 3);

    FilterRules permissive;
    permissive.min_tokens = 0;
    permissive.max_tokens = 100000;
    RuleMockFixer mock(v, permissive.banned_phrases);

    const std::string out_manifest = (dir / "curated.tsv").string();
    const std::string audit = (dir / "audit.tsv").string();

    SUBCASE("permissive identity-ish run keeps accounting consistent") {
        IdentityFixer identity;
        const auto result =
            run_pipeline(model, v, images, identity, permissive, 80, 9,
                         out_manifest, audit, 2);
        CHECK(result.records.size() == images.size());
        CHECK(result.stats.total == static_cast<int>(images.size()));
        CHECK(result.stats.kept + result.stats.dropped == result.stats.total);
        // every image appears exactly once in the audit log
        std::ifstream log(audit);
        std::string line;
        int lines = 0;
        while (std::getline(log, line)) ++lines;
        CHECK(lines == static_cast<int>(images.size()));
    }

    SUBCASE("rules banning everything keep nothing, reasons logged") {
        FilterRules ban;
        ban.min_tokens = 1000000;  // nothing passes
        IdentityFixer identity;
        const auto result = run_pipeline(model, v, images, identity, ban, 80,
                                         9, out_manifest, audit, 2);
        CHECK(result.stats.kept == 0);
        for (const auto& r : result.records) {
            CHECK_FALSE(r.kept);
            CHECK_FALSE(r.drop_reason.empty());
        }
        // kept manifest is empty
        std::ifstream m(out_manifest);
        std::string line;
        CHECK_FALSE(static_cast<bool>(std::getline(m, line)));
    }

    SUBCASE("same seed and mock fixer give byte-identical outputs") {
        const std::string out2 = (dir / "curated2.tsv").string();
        const std::string audit2 = (dir / "audit2.tsv").string();
        run_pipeline(model, v, images, mock, permissive, 80, 9, out_manifest,
                     audit, 4);
        run_pipeline(model, v, images, mock, permissive, 80, 9, out2, audit2,
                     4);
        const auto slurp = [](const std::string& p) {
            std::ifstream f(p, std::ios::binary);
            return std::string(std::istreambuf_iterator<char>(f), {});
        };
        CHECK(slurp(out_manifest) == slurp(out2));
        CHECK(slurp(audit) == slurp(audit2));
    }

    std::filesystem::remove_all(dir);
}
