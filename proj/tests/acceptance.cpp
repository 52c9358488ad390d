// End-to-end acceptance suite. Runs the full desk-scale pipeline once and
// checks every top-level criterion, printing one PASS/FAIL line each.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "tinyvlm/curation.hpp"
#include "tinyvlm/evaluation.hpp"
#include "tinyvlm/training.hpp"

namespace fs = std::filesystem;
using namespace tinyvlm;
using Clock = std::chrono::steady_clock;

namespace {

struct Criterion {
    int id;
    bool pass;
    std::string detail;
};
std::vector<Criterion> results;

void report(int id, bool pass, const std::string& detail) {
    results.push_back({id, pass, detail});
    std::cout << "CRITERION " << id << ": " << (pass ? "PASS" : "FAIL")
              << " - " << detail << std::endl;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
}

double elapsed_minutes(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count() / 60.0;
}

// ---- criterion 1: finite-difference gradient checks ------------------------

TensorPtr rand_t(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    auto t = make_tensor(std::move(shape), true);
    for (auto& v : t->data) v = scale * rng.normal();
    return t;
}

bool fd_check(const std::vector<TensorPtr>& inputs,
              const std::function<TensorPtr(Tape&)>& op, Rng& rng) {
    Tape probe;
    auto out0 = op(probe);
    std::vector<double> w(out0->size());
    for (auto& v : w) v = rng.normal();
    auto w_col = make_tensor({static_cast<int>(w.size()), 1}, w);
    const auto run = [&](Tape& t) {
        auto out = op(t);
        auto flat = reshape(t, out, {1, static_cast<int>(out->size())});
        return matmul(t, flat, w_col);
    };

    Tape tape;
    tape.backward(run(tape));
    for (const auto& in : inputs) {
        for (std::size_t i = 0; i < in->size(); ++i) {
            const double saved = in->data[i];
            const double h = 1e-5;
            in->data[i] = saved + h;
            Tape up_t;
            const double up = run(up_t)->data[0];
            in->data[i] = saved - h;
            Tape dn_t;
            const double dn = run(dn_t)->data[0];
            in->data[i] = saved;
            const double numeric = (up - dn) / (2.0 * h);
            const double analytic = in->grad[i];
            const double denom =
                std::max({std::abs(analytic), std::abs(numeric), 1e-3});
            if (std::abs(analytic - numeric) / denom >= 1e-4) return false;
        }
        in->zero_grad();
    }
    return true;
}

bool criterion1() {
    Rng rng(4242);
    for (int trial = 0; trial < 100; ++trial) {
        Rng local(9000 + trial);
        bool ok = true;
        {
            auto a = rand_t({3, 4}, local), b = rand_t({4, 2}, local);
            ok = ok && fd_check({a, b},
                                [&](Tape& t) { return matmul(t, a, b); }, rng);
        }
        {
            auto x = rand_t({3, 5}, local);
            auto bias = rand_t({5}, local);
            ok = ok && fd_check({x, bias},
                                [&](Tape& t) {
                                    return bias_add(t, transpose(t, transpose(t, x)), bias);
                                },
                                rng);
        }
        {
            auto x = rand_t({3, 6}, local);
            ok = ok && fd_check(
                           {x}, [&](Tape& t) { return softmax_rows(t, x); },
                           rng);
        }
        {
            auto x = rand_t({3, 8}, local);
            auto g = rand_t({8}, local, 0.3);
            for (auto& v : g->data) v += 1.0;
            auto b = rand_t({8}, local, 0.3);
            ok = ok &&
                 fd_check({x, g, b},
                          [&](Tape& t) { return layer_norm(t, x, g, b, 1e-5); },
                          rng);
        }
        {
            auto x = rand_t({4, 4}, local);
            ok = ok && fd_check(
                           {x},
                           [&](Tape& t) {
                               auto s = silu(t, scale(t, x, 0.8));
                               auto parts = std::vector<TensorPtr>{
                                   slice_cols(t, s, 0, 2), slice_cols(t, s, 2, 2)};
                               return concat_cols(t, parts);
                           },
                           rng);
        }
        {
            auto table = rand_t({7, 3}, local);
            const std::vector<int> ids = {2, 5, 2, 0, 6};
            ok = ok &&
                 fd_check({table},
                          [&](Tape& t) {
                              auto e = embedding_rows(t, table, ids);
                              auto top = slice_rows(t, e, 0, 2);
                              auto rest = slice_rows(t, e, 2, 3);
                              return concat_rows(t, {rest, top});
                          },
                          rng);
        }
        {
            auto logits = rand_t({4, 5}, local);
            const std::vector<int> targets = {1, 0, 4, 2};
            const std::vector<bool> mask = {true, false, true, true};
            Tape tape;
            auto loss = masked_cross_entropy(tape, logits, targets, mask);
            tape.backward(loss);
            for (std::size_t i = 0; i < logits->size(); ++i) {
                const double saved = logits->data[i];
                const double h = 1e-5;
                logits->data[i] = saved + h;
                Tape t1;
                const double up =
                    masked_cross_entropy(t1, logits, targets, mask)->data[0];
                logits->data[i] = saved - h;
                Tape t2;
                const double dn =
                    masked_cross_entropy(t2, logits, targets, mask)->data[0];
                logits->data[i] = saved;
                const double numeric = (up - dn) / (2.0 * h);
                const double denom = std::max(
                    {std::abs(logits->grad[i]), std::abs(numeric), 1e-3});
                if (std::abs(logits->grad[i] - numeric) / denom >= 1e-4)
                    ok = false;
            }
            logits->zero_grad();
        }
        if (!ok) return false;
    }
    return true;
}

}  // namespace

int main() {
    const auto t_start = Clock::now();
    const fs::path work = fs::temp_directory_path() / "acceptance_run";
    fs::remove_all(work);
    fs::create_directories(work);

    // --- criterion 1: gradient correctness (also timed) ---
    {
        const auto t0 = Clock::now();
        const bool pass = criterion1();
        const double secs =
            std::chrono::duration<double>(Clock::now() - t0).count();
        report(1, pass && secs < 60.0,
               "finite-difference checks, 100 trials per op, " +
                   std::to_string(secs) + "s");
    }

    const Vocabulary vocab = Vocabulary::build_default();
    ModelConfig config;
    config.lm.vocab_size = vocab.size();

    // --- shared pipeline artifacts ---
    std::cout << "[pipeline] generating datasets..." << std::endl;
    const std::string stage1_manifest = (work / "stage1.tsv").string();
    build_dataset((work / "stage1_data").string(), stage1_manifest, 5000,
                  "short_noisy", 0.2, 101);
    const std::string curation_manifest = (work / "curation_in.tsv").string();
    build_dataset((work / "curation_data").string(), curation_manifest, 5000,
                  "detailed", 0.0, 202);
    std::vector<std::vector<ManifestRecord>> heldout;
    for (std::uint64_t s : {301ull, 302ull, 303ull}) {
        const std::string m =
            (work / ("heldout" + std::to_string(s) + ".tsv")).string();
        heldout.push_back(build_dataset(
            (work / ("heldout" + std::to_string(s))).string(), m, 100,
            "detailed", 0.0, s));
    }

    std::cout << "[pipeline] pretraining components..." << std::endl;
    const std::string enc_ckpt = (work / "encoder.ckpt").string();
    const std::string lm_ckpt = (work / "lm.ckpt").string();
    pretrain_components(config, vocab, 7, enc_ckpt, lm_ckpt);

    std::cout << "[pipeline] stage-1 training (2000 x 32)..." << std::endl;
    AlignmentModel model1(config, 5);
    load_components(model1, enc_ckpt, lm_ckpt);
    StageConfig s1 = StageConfig::stage1_defaults();
    s1.manifest_path = stage1_manifest;
    s1.seed = 5;
    s1.checkpoint_out = (work / "stage1.ckpt").string();
    const TrainLog log1 = train_stage1(model1, vocab, s1);

    std::cout << "[pipeline] curation over 5000 images..." << std::endl;
    const auto curation_images = read_manifest(curation_manifest);
    FilterRules rules;
    RuleMockFixer fixer(vocab, rules.banned_phrases);
    const std::string curated = (work / "curated.tsv").string();
    const std::string audit = (work / "audit.tsv").string();
    const auto pipe = run_pipeline(model1, vocab, curation_images, fixer,
                                   rules, 80, 11, curated, audit, 4);
    std::cout << "[pipeline] curation kept " << pipe.stats.kept << "/"
              << pipe.stats.total << std::endl;

    std::cout << "[pipeline] stage-2 training (400 x 12)..." << std::endl;
    AlignmentModel model2(config, 5);
    load_checkpoint(s1.checkpoint_out, model2.params());
    StageConfig s2 = StageConfig::stage2_defaults();
    s2.manifest_path = curated;
    s2.seed = 13;
    s2.checkpoint_out = (work / "stage2.ckpt").string();
    const TrainLog log2 =
        train_stage2(model2, vocab, s2, InstructionSet::defaults());

    // --- criterion 2: freeze contract + ablation trainable sets ---
    {
        bool pass = log1.frozen_untouched() && log2.frozen_untouched();
        // trainable set is exactly the projection stack
        for (const auto& p : model2.params().params) {
            const bool is_proj = p.name.rfind("proj.", 0) == 0;
            pass = pass && (p.frozen == !is_proj);
        }
        // ablation variants change trainable counts exactly as configured
        const auto count = [&](int depth, bool train_res) {
            ModelConfig c = config;
            c.projection.depth = depth;
            c.train_resampler = train_res;
            AlignmentModel m(c, 1);
            return m.params().trainable_scalar_count();
        };
        const std::size_t d = 64;
        pass = pass && (count(3, false) - count(1, false) == 2 * (d * d + d));
        AlignmentModel res_model([&] {
            ModelConfig c = config;
            c.train_resampler = true;
            return c;
        }(), 1);
        std::size_t res_params = 0;
        for (const auto& p : res_model.params().params)
            if (p.name.rfind("res.", 0) == 0) res_params += p.tensor->size();
        pass = pass &&
               (count(1, true) - count(1, false) == res_params) &&
               res_params > 0;
        report(2, pass, "frozen digests bit-identical after both stages; "
                        "trainable sets match config and ablations");
    }

    // --- criterion 3: loss-mask contract on randomized batches ---
    {
        bool pass = true;
        for (int trial = 0; trial < 5; ++trial) {
            const auto scene = generate_scene(640000 + trial);
            const auto img = render(scene);
            Tape et;
            const auto prefix = model2.encode_image(et, img.pixels);
            const auto seq =
                assemble(vocab, PromptTemplate::conversational(),
                         prompts::kDetailInstruction,
                         caption_detailed(scene).text,
                         model2.visual_prefix_len());

            std::vector<int> targets(seq.ids.begin() + 1, seq.ids.end());
            Tape t1;
            const auto base = sequence_loss(t1, model2, seq, prefix);
            t1.backward(base);
            std::vector<double> base_grads;
            for (const auto& p : model2.params().params)
                if (!p.frozen)
                    base_grads.insert(base_grads.end(), p.tensor->grad.begin(),
                                      p.tensor->grad.end());
            model2.params().zero_grads();

            Rng rng(trial);
            for (std::size_t i = 0; i + 1 < seq.ids.size(); ++i)
                if (!seq.loss_mask[i + 1])
                    targets[i] = static_cast<int>(rng.below(vocab.size()));
            Tape t2;
            const auto mut =
                sequence_loss_with_targets(t2, model2, seq, prefix, targets);
            t2.backward(mut);
            std::vector<double> mut_grads;
            for (const auto& p : model2.params().params)
                if (!p.frozen)
                    mut_grads.insert(mut_grads.end(), p.tensor->grad.begin(),
                                     p.tensor->grad.end());
            model2.params().zero_grads();

            pass = pass && base->data[0] == mut->data[0] &&
                   base_grads == mut_grads;
        }
        report(3, pass,
               "mutating prompt-position targets leaves loss and every "
               "gradient bit-identical");
    }

    // --- criterion 4: failure-rate drop, 3 held-out seeds ---
    {
        int wins = 0;
        std::ostringstream detail;
        for (std::size_t k = 0; k < heldout.size(); ++k) {
            DecodeConfig decode;
            decode.seed = 7000 + k;
            const auto rates =
                failure_rate_eval(model1, model2, vocab, heldout[k], decode);
            const bool win =
                rates.before >= 0.15 && rates.before >= 5.0 * rates.after;
            wins += win ? 1 : 0;
            detail << " seed" << k << "=" << 100.0 * rates.before << "%->"
                   << 100.0 * rates.after << "%";
        }
        report(4, wins >= 2,
               "stage-1 failure >= 15% and >= 5x reduction in " +
                   std::to_string(wins) + "/3 seeds:" + detail.str());
    }

    // --- criterion 5: CHAIR correctness ---
    {
        const auto lex = ObjectLexicon::build_default();
        bool pass = true;
        for (int i = 0; i < 1000; ++i) {
            const auto scene = generate_scene(700000 + i);
            std::string caption = caption_detailed(scene).text;
            if (i % 2 == 0) caption += " You can see a pink triangle there.";
            const auto r = chair_i(caption, scene.objects, lex);
            // brute-force oracle: substring scan of every lexicon phrase
            std::set<std::pair<int, int>> truth;
            for (const auto& o : scene.objects)
                truth.insert({o.shape, o.color});
            std::string lower = caption;
            for (char& ch : lower)
                ch = static_cast<char>(std::tolower(
                    static_cast<unsigned char>(ch)));
            int mentions = 0, hall = 0;
            for (int ci = 0; ci < 8; ++ci) {
                for (int si = 0; si < 3; ++si) {
                    const std::string phrase =
                        std::string(grammar::kColors[ci]) + " " +
                        grammar::kShapes[si];
                    std::size_t pos = 0;
                    while ((pos = lower.find(phrase, pos)) !=
                           std::string::npos) {
                        ++mentions;
                        if (!truth.count({si, ci})) ++hall;
                        pos += phrase.size();
                    }
                }
            }
            pass = pass && static_cast<int>(r.mentions.size()) == mentions &&
                   r.hallucinated == hall;
        }
        // hand example: 1/3
        const std::vector<SceneObject> gt = {{0, 0, 0, 0}, {1, 1, 0, 1}};
        const auto r13 = chair_i(
            "A red circle sits next to a blue square and a green triangle.",
            gt, lex);
        pass = pass && r13.mentions.size() == 3 && r13.hallucinated == 1 &&
               std::abs(r13.chair_i - 1.0 / 3.0) < 1e-15;
        // mention-weighted corpus 1/4
        const std::vector<SceneObject> gtA = {{1, 1, 0, 0}};
        const auto rA = chair_i("a red circle", gtA, lex);
        const std::vector<SceneObject> gtB = {
            {0, 0, 0, 0}, {1, 1, 0, 1}, {2, 2, 0, 2}};
        const auto rB = chair_i(
            "a red circle and a blue square and a green triangle", gtB, lex);
        const double corpus =
            double(rA.hallucinated + rB.hallucinated) /
            double(rA.mentions.size() + rB.mentions.size());
        pass = pass && corpus == 0.25;
        report(5, pass,
               "chair_i matches brute-force oracle on 1000 captions; hand "
               "examples exact");
    }

    // --- criterion 6: long vs short prompt, 3 seeds ---
    {
        int wins = 0;
        std::ostringstream detail;
        for (std::size_t k = 0; k < heldout.size(); ++k) {
            DecodeConfig decode;
            decode.seed = 8000 + k;
            const auto lng = hallucination_eval(model2, vocab, heldout[k],
                                                PromptMode::Long, decode);
            const auto sht = hallucination_eval(model2, vocab, heldout[k],
                                                PromptMode::Short, decode);
            const bool win = lng.avg_length_tokens > sht.avg_length_tokens &&
                             lng.corpus_chair_i >= sht.corpus_chair_i;
            wins += win ? 1 : 0;
            detail << " seed" << k << ": len " << lng.avg_length_tokens
                   << ">" << sht.avg_length_tokens << " chair "
                   << lng.corpus_chair_i << ">=" << sht.corpus_chair_i;
        }
        report(6, wins >= 2,
               "long-prompt length and CHAIR dominate in " +
                   std::to_string(wins) + "/3 seeds:" + detail.str());
    }

    // --- criterion 7: curation rules ---
    {
        const auto fixed_gen = [&vocab](int n) {
            const int a = vocab.id_of("a"), red = vocab.id_of("red"),
                      circle = vocab.id_of("circle");
            std::vector<int> ids;
            for (int i = 0; i < n; ++i)
                ids.push_back(i % 3 == 0 ? a : i % 3 == 1 ? red : circle);
            return [ids](const TokenSequence&) { return ids; };
        };
        const auto at80 = curate_one("b80", vocab, 8, 80, 256, fixed_gen(80));
        const auto at81 = curate_one("b81", vocab, 8, 80, 256, fixed_gen(81));
        bool pass = at80.continued && !at81.continued;

        // no kept record contains a banned phrase (case-insensitive)
        const auto contains_ci = [](const std::string& hay,
                                    const std::string& needle) {
            auto low = [](std::string s) {
                for (char& c : s)
                    c = static_cast<char>(std::tolower(
                        static_cast<unsigned char>(c)));
                return s;
            };
            return low(hay).find(low(needle)) != std::string::npos;
        };
        for (const auto& r : pipe.records) {
            if (!r.kept) continue;
            for (const auto& phrase : rules.banned_phrases)
                pass = pass && !contains_ci(r.fixed, phrase);
        }
        // exact accounting over 5000 inputs
        pass = pass && pipe.stats.total == 5000 &&
               pipe.stats.kept + pipe.stats.dropped == 5000 &&
               pipe.records.size() == 5000;

        // byte-determinism on a re-run (100-image subset)
        std::vector<ManifestRecord> subset(curation_images.begin(),
                                           curation_images.begin() + 100);
        const std::string ca = (work / "cur_a.tsv").string();
        const std::string cb = (work / "cur_b.tsv").string();
        run_pipeline(model1, vocab, subset, fixer, rules, 80, 11, ca,
                     (work / "cur_a_audit.tsv").string(), 4);
        run_pipeline(model1, vocab, subset, fixer, rules, 80, 11, cb,
                     (work / "cur_b_audit.tsv").string(), 4);
        pass = pass && slurp(ca) == slurp(cb) &&
               slurp((work / "cur_a_audit.tsv").string()) ==
                   slurp((work / "cur_b_audit.tsv").string());
        report(7, pass,
               "80/81 boundary, banned-phrase exclusion, exact 5000-in "
               "accounting (kept=" + std::to_string(pipe.stats.kept) +
                   "), byte-deterministic re-run");
    }

    // --- criterion 8: coverage protocol ---
    {
        OracleJudge judge;
        std::vector<std::string> refs, perfect, broken;
        int made = 0;
        for (int i = 0; made < 50; ++i) {
            const auto scene = generate_scene(910000 + i);
            if (scene.objects.size() < 2) continue;
            refs.push_back(caption_detailed(scene).text);
            perfect.push_back(refs.back());
            SceneSpec cut = scene;
            cut.objects.erase(cut.objects.begin());
            broken.push_back(caption_detailed(cut).text);
            ++made;
        }
        const auto full = coverage_eval(refs, perfect, judge);
        const auto none = coverage_eval(refs, broken, judge);
        bool pass = full.correct == 50 && full.formatted == "100.0%" &&
                    none.correct == 0 && none.formatted == "0.0%";

        // verbatim prompt bytes in remote request logs
        const std::string log_path = (work / "judge.log").string();
        std::string seen;
        RemoteJudge remote(
            [&seen](const std::string& p) {
                seen = p;
                return std::string("yes");
            },
            log_path);
        (void)remote.judge(refs[0], perfect[0]);
        const std::string expected = prompts::judge_prompt(refs[0], perfect[0]);
        pass = pass && seen == expected && slurp(log_path) == expected + "\n";
        report(8, pass,
               "oracle coverage 100%/0% on 50 pairs; verbatim judge prompt "
               "byte-exact in request log");
    }

    // --- criterion 9: determinism of the pipeline commands ---
    {
        bool pass = true;
        // gen-data
        const std::string da = (work / "det_a").string();
        const std::string db = (work / "det_b").string();
        const auto ra =
            build_dataset(da, da + "/m.tsv", 50, "short_noisy", 0.2, 77);
        const auto rb =
            build_dataset(db, db + "/m.tsv", 50, "short_noisy", 0.2, 77);
        pass = pass && slurp(da + "/m.tsv").size() > 0;
        // manifests differ only in paths; compare text+GT and image bytes
        for (std::size_t i = 0; i < ra.size(); ++i) {
            pass = pass && ra[i].text == rb[i].text &&
                   ra[i].ground_truth == rb[i].ground_truth &&
                   slurp(ra[i].image_path) == slurp(rb[i].image_path);
        }
        // train-stage1 / train-stage2 (reduced step budget, same property)
        const auto run_s1 = [&](const std::string& out) {
            AlignmentModel m(config, 5);
            load_components(m, enc_ckpt, lm_ckpt);
            StageConfig c = StageConfig::stage1_defaults();
            c.steps = 50;
            c.batch_size = 8;
            c.manifest_path = stage1_manifest;
            c.seed = 21;
            c.checkpoint_out = out;
            train_stage1(m, vocab, c);
            return m.params().digest_all();
        };
        pass = pass && run_s1((work / "det_s1a.ckpt").string()) ==
                           run_s1((work / "det_s1b.ckpt").string());
        const auto run_s2 = [&](const std::string& out) {
            AlignmentModel m(config, 5);
            load_checkpoint(s1.checkpoint_out, m.params());
            StageConfig c = StageConfig::stage2_defaults();
            c.steps = 25;
            c.batch_size = 4;
            c.manifest_path = curated;
            c.seed = 23;
            c.checkpoint_out = out;
            train_stage2(m, vocab, c, InstructionSet::defaults());
            return m.params().digest_all();
        };
        pass = pass && run_s2((work / "det_s2a.ckpt").string()) ==
                           run_s2((work / "det_s2b.ckpt").string());
        // curate --fixer mock determinism was checked in criterion 7; assert
        // the checkpoint files themselves are byte-identical too
        pass = pass && slurp((work / "det_s1a.ckpt").string()) ==
                           slurp((work / "det_s1b.ckpt").string());
        pass = pass && slurp((work / "det_s2a.ckpt").string()) ==
                           slurp((work / "det_s2b.ckpt").string());
        report(9, pass,
               "gen-data, train-stage1, train-stage2, curate(mock) all "
               "bit-reproducible from (seed, config)");
    }

    // --- criterion 10: end-to-end budget and stage-2 loss descent ---
    {
        const double minutes = elapsed_minutes(t_start);
        const double first = log2.losses.front();
        const double last = log2.losses.back();
        const bool pass = minutes < 45.0 && last < 0.5 * first;
        std::ostringstream detail;
        detail << "end-to-end " << minutes << " min; stage-2 loss " << first
               << " -> " << last;
        report(10, pass, detail.str());
    }

    int failures = 0;
    for (const auto& r : results) failures += r.pass ? 0 : 1;
    std::cout << (failures == 0 ? "ALL CRITERIA PASSED"
                                : std::to_string(failures) +
                                      " CRITERIA FAILED")
              << std::endl;
    return failures == 0 ? 0 : 1;
}
