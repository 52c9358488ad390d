// Command-line front end for the full pipeline: data generation, component
// pretraining, two-stage alignment training, description curation,
// hallucination / coverage / failure-rate evaluation, ablations, and an
// interactive chat loop.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "tinyvlm/curation.hpp"
#include "tinyvlm/evaluation.hpp"
#include "tinyvlm/training.hpp"

namespace fs = std::filesystem;
using namespace tinyvlm;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitContract = 3;
constexpr int kExitExternal = 4;

ModelConfig default_config(int vocab_size) {
    ModelConfig cfg;
    cfg.lm.vocab_size = vocab_size;
    return cfg;
}

// Writes the fully resolved configuration next to the command's outputs so
// every artifact is reproducible from disk alone.
void write_snapshot(const std::string& path,
                    const std::vector<std::pair<std::string, std::string>>& kv) {
    std::ofstream out(path);
    for (const auto& [k, v] : kv) out << k << "=" << v << "\n";
}

AlignmentModel load_model(const std::string& config_path,
                          const std::string& checkpoint_path) {
    ModelConfig cfg = ModelConfig::load(config_path);
    AlignmentModel model(cfg, /*seed=*/0);
    load_checkpoint(checkpoint_path, model.params());
    return model;
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

int cmd_gen_data(const std::string& out_dir, const std::string& manifest,
                 int n, const std::string& kind, double p_noise,
                 std::uint64_t seed) {
    fs::create_directories(out_dir);
    const auto records = build_dataset(out_dir, manifest, n, kind, p_noise, seed);
    write_snapshot(manifest + ".config",
                   {{"n", std::to_string(n)},
                    {"kind", kind},
                    {"p_noise", fmt_double(p_noise)},
                    {"seed", std::to_string(seed)}});
    std::cout << "wrote " << records.size() << " samples to " << manifest
              << "\n";
    return 0;
}

int cmd_pretrain(const std::string& out_dir, std::uint64_t seed,
                 const PretrainOptions& opts) {
    fs::create_directories(out_dir);
    const Vocabulary vocab = Vocabulary::build_default();
    const ModelConfig cfg = default_config(vocab.size());

    const std::string enc_ckpt = out_dir + "/encoder.ckpt";
    const std::string lm_ckpt = out_dir + "/lm.ckpt";
    const auto result =
        pretrain_components(cfg, vocab, seed, enc_ckpt, lm_ckpt, opts);

    cfg.save(out_dir + "/model.cfg");
    vocab.save(out_dir + "/vocab.txt");
    write_snapshot(out_dir + "/pretrain.config",
                   {{"seed", std::to_string(seed)},
                    {"corpus_scenes", std::to_string(opts.corpus_scenes)},
                    {"lm_perplexity", fmt_double(result.lm_perplexity)},
                    {"encoder_accuracy", fmt_double(result.encoder_accuracy)},
                    {"lm_steps", std::to_string(result.lm_steps)},
                    {"encoder_steps", std::to_string(result.encoder_steps)}});
    std::cout << "lm perplexity " << result.lm_perplexity
              << ", encoder accuracy " << result.encoder_accuracy << "\n";
    return 0;
}

int cmd_train_stage(int stage, const std::string& components_dir,
                    const std::string& init_ckpt, StageConfig cfg) {
    const Vocabulary vocab = Vocabulary::load(components_dir + "/vocab.txt");
    ModelConfig mcfg = ModelConfig::load(components_dir + "/model.cfg");
    AlignmentModel model(mcfg, cfg.seed);
    if (init_ckpt.empty()) {
        load_components(model, components_dir + "/encoder.ckpt",
                        components_dir + "/lm.ckpt");
    } else {
        load_checkpoint(init_ckpt, model.params());
    }

    TrainLog log;
    if (stage == 1) {
        log = train_stage1(model, vocab, cfg);
    } else {
        InstructionSet instructions =
            cfg.instruction_set_path.empty()
                ? InstructionSet::defaults()
                : InstructionSet::load(cfg.instruction_set_path);
        log = train_stage2(model, vocab, cfg, instructions);
    }
    log.save(cfg.checkpoint_out + ".log");
    mcfg.save(cfg.checkpoint_out + ".cfg");
    write_snapshot(cfg.checkpoint_out + ".config",
                   {{"stage", std::to_string(stage)},
                    {"steps", std::to_string(cfg.steps)},
                    {"batch_size", std::to_string(cfg.batch_size)},
                    {"learning_rate", fmt_double(cfg.learning_rate)},
                    {"manifest", cfg.manifest_path},
                    {"seed", std::to_string(cfg.seed)}});
    std::cout << "stage " << stage << " done: final loss "
              << (log.losses.empty() ? 0.0 : log.losses.back()) << " in "
              << log.wall_seconds << "s\n";
    return 0;
}

int cmd_curate(const std::string& components_dir, const std::string& ckpt,
               const std::string& manifest, const std::string& out_manifest,
               const std::string& audit_log, const std::string& fixer_kind,
               const std::string& fixer_url, int threshold, int parallel,
               std::uint64_t seed) {
    const Vocabulary vocab = Vocabulary::load(components_dir + "/vocab.txt");
    AlignmentModel model = load_model(ckpt + ".cfg", ckpt);
    const auto images = read_manifest(manifest);

    FilterRules rules;
    std::unique_ptr<FixerClient> fixer;
    if (fixer_kind == "mock") {
        fixer = std::make_unique<RuleMockFixer>(vocab, rules.banned_phrases);
    } else {
        fixer = std::make_unique<RemoteFixer>(fixer_url);
    }

    const auto result = run_pipeline(model, vocab, images, *fixer, rules,
                                     threshold, seed, out_manifest, audit_log,
                                     parallel);
    write_snapshot(out_manifest + ".config",
                   {{"fixer", fixer_kind},
                    {"threshold", std::to_string(threshold)},
                    {"parallel", std::to_string(parallel)},
                    {"seed", std::to_string(seed)},
                    {"input_manifest", manifest}});
    std::cout << "kept " << result.stats.kept << "/" << result.stats.total
              << " descriptions\n";
    return 0;
}

int cmd_eval_chair(const std::string& components_dir, const std::string& ckpt,
                   const std::string& manifest, const std::string& mode,
                   const std::string& report_path, std::uint64_t seed) {
    const Vocabulary vocab = Vocabulary::load(components_dir + "/vocab.txt");
    AlignmentModel model = load_model(ckpt + ".cfg", ckpt);
    const auto images = read_manifest(manifest);
    DecodeConfig decode;
    decode.seed = seed;
    const auto report = hallucination_eval(
        model, vocab, images,
        mode == "long" ? PromptMode::Long : PromptMode::Short, decode);
    if (!report_path.empty()) report.save(report_path);
    std::cout << "chair_i " << report.corpus_chair_i << " avg_length "
              << report.avg_length_tokens << " over " << report.rows.size()
              << " images\n";
    return 0;
}

int cmd_eval_coverage(const std::string& components_dir,
                      const std::string& ckpt, const std::string& manifest,
                      const std::string& judge_kind,
                      const std::string& judge_url, bool strict,
                      const std::string& request_log, std::uint64_t seed) {
    const Vocabulary vocab = Vocabulary::load(components_dir + "/vocab.txt");
    AlignmentModel model = load_model(ckpt + ".cfg", ckpt);
    const auto images = read_manifest(manifest);
    const auto tmpl = PromptTemplate::conversational();

    DecodeConfig decode;
    decode.seed = seed;
    std::vector<std::string> references;
    std::vector<std::string> candidates;
    for (const auto& img : images) {
        SceneSpec scene;
        scene.objects = img.ground_truth;
        references.push_back(caption_detailed(scene).text);
        const auto pixels = read_ppm(img.image_path);
        Tape tape;
        const auto prefix = model.encode_image(tape, pixels);
        const auto prompt = assemble(vocab, tmpl, prompts::kLongModeInstruction,
                                     "", model.visual_prefix_len());
        candidates.push_back(vocab.detokenize(model.generate(prompt, prefix, decode)));
    }

    std::unique_ptr<JudgeClient> judge;
    if (judge_kind == "oracle") {
        judge = std::make_unique<OracleJudge>();
    } else {
        judge = std::make_unique<RemoteJudge>(
            [judge_url](const std::string& prompt) {
                RemoteFixer relay(judge_url);
                return relay.send(prompt, "");
            },
            request_log);
    }
    const auto result = coverage_eval(references, candidates, *judge, strict);
    std::cout << "coverage " << result.formatted << " (" << result.correct
              << "/" << result.total << ", " << result.errors << " errors)\n";
    return 0;
}

int cmd_eval_failure(const std::string& components_dir,
                     const std::string& ckpt_before,
                     const std::string& ckpt_after,
                     const std::string& manifest, std::uint64_t seed) {
    const Vocabulary vocab = Vocabulary::load(components_dir + "/vocab.txt");
    AlignmentModel before = load_model(ckpt_before + ".cfg", ckpt_before);
    AlignmentModel after = load_model(ckpt_after + ".cfg", ckpt_after);
    const auto images = read_manifest(manifest);
    DecodeConfig decode;
    decode.seed = seed;
    const auto rates = failure_rate_eval(before, after, vocab, images, decode);
    std::cout << "failure rate before " << 100.0 * rates.before << "% after "
              << 100.0 * rates.after << "% over " << rates.denominator
              << " images\n";
    return 0;
}

int cmd_chat(const std::string& components_dir, const std::string& ckpt,
             std::uint64_t seed) {
    const Vocabulary vocab = Vocabulary::load(components_dir + "/vocab.txt");
    AlignmentModel model = load_model(ckpt + ".cfg", ckpt);
    const auto tmpl = PromptTemplate::conversational();
    DecodeConfig decode;
    decode.seed = seed;

    std::cout << "image path (blank to quit): " << std::flush;
    std::string image_path;
    while (std::getline(std::cin, image_path) && !image_path.empty()) {
        std::cout << "instruction: " << std::flush;
        std::string instruction;
        if (!std::getline(std::cin, instruction)) break;
        try {
            const auto pixels = read_ppm(image_path);
            Tape tape;
            const auto prefix = model.encode_image(tape, pixels);
            const auto prompt = assemble(vocab, tmpl, instruction, "",
                                         model.visual_prefix_len());
            const auto ids = model.generate(prompt, prefix, decode);
            std::cout << vocab.detokenize(ids) << "\n";
        } catch (const std::exception& e) {
            std::cout << "error: " << e.what() << "\n";
        }
        std::cout << "image path (blank to quit): " << std::flush;
    }
    return 0;
}

// Projection-depth and resampler-training grid over short stage-1 runs.
int cmd_ablate(const std::string& components_dir, const std::string& manifest,
               const std::string& out_dir, int steps, int batch,
               std::uint64_t seed) {
    fs::create_directories(out_dir);
    const Vocabulary vocab = Vocabulary::load(components_dir + "/vocab.txt");
    const ModelConfig base = ModelConfig::load(components_dir + "/model.cfg");

    struct Cell {
        int depth;
        bool train_resampler;
        std::size_t trainable;
        double final_loss;
    };
    std::vector<Cell> cells;
    for (int depth : {1, 3}) {
        for (bool train_res : {false, true}) {
            ModelConfig cfg = base;
            cfg.projection.depth = depth;
            cfg.train_resampler = train_res;
            AlignmentModel model(cfg, seed);
            load_components(model, components_dir + "/encoder.ckpt",
                            components_dir + "/lm.ckpt");

            StageConfig sc = StageConfig::stage1_defaults();
            sc.steps = steps;
            sc.batch_size = batch;
            sc.manifest_path = manifest;
            sc.seed = seed;
            sc.checkpoint_out = out_dir + "/ablate_d" + std::to_string(depth) +
                                (train_res ? "_res" : "_nores") + ".ckpt";
            const auto log = train_stage1(model, vocab, sc);
            cells.push_back({depth, train_res,
                             model.params().trainable_scalar_count(),
                             log.losses.empty() ? 0.0 : log.losses.back()});
        }
    }

    std::ostringstream table;
    table << "depth\ttrain_resampler\ttrainable_params\tfinal_loss\n";
    for (const auto& c : cells) {
        table << c.depth << '\t' << (c.train_resampler ? "yes" : "no") << '\t'
              << c.trainable << '\t' << c.final_loss << '\n';
    }
    std::ofstream(out_dir + "/ablation.tsv") << table.str();
    std::cout << table.str();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"toy vision-language alignment pipeline"};
    app.require_subcommand(1);

    // gen-data
    std::string gd_out = "data", gd_manifest;  // default: <out>/manifest.tsv
    std::string gd_kind = "short_noisy";
    int gd_n = 1000;
    double gd_p_noise = 0.2;
    std::uint64_t gd_seed = 1;
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    gen->add_option("--out", gd_out);
    gen->add_option("--manifest", gd_manifest);
    gen->add_option("--n", gd_n);
    gen->add_option("--kind", gd_kind)
        ->check(CLI::IsMember({"short_noisy", "detailed"}));
    gen->add_option("--p-noise", gd_p_noise);
    gen->add_option("--seed", gd_seed);

    // pretrain-components
    std::string pt_out = "components";
    std::uint64_t pt_seed = 7;
    PretrainOptions pt_opts;
    auto* pre = app.add_subcommand("pretrain-components",
                                   "pretrain the frozen encoder and LM");
    pre->add_option("--out", pt_out);
    pre->add_option("--seed", pt_seed);
    pre->add_option("--corpus-scenes", pt_opts.corpus_scenes);
    pre->add_option("--lm-max-steps", pt_opts.lm_max_steps);
    pre->add_option("--encoder-max-steps", pt_opts.encoder_max_steps);

    // train-stage1 / train-stage2
    std::string t_components = "components", t_init, t_instructions;
    StageConfig s1 = StageConfig::stage1_defaults();
    StageConfig s2 = StageConfig::stage2_defaults();
    auto* ts1 = app.add_subcommand("train-stage1",
                                   "align the projection on short captions");
    ts1->add_option("--components", t_components);
    ts1->add_option("--manifest", s1.manifest_path)->required();
    ts1->add_option("--out", s1.checkpoint_out)->required();
    ts1->add_option("--steps", s1.steps);
    ts1->add_option("--batch", s1.batch_size);
    ts1->add_option("--lr", s1.learning_rate);
    ts1->add_option("--seed", s1.seed);

    auto* ts2 = app.add_subcommand("train-stage2",
                                   "finetune on curated descriptions");
    ts2->add_option("--components", t_components);
    ts2->add_option("--init", t_init)->required();
    ts2->add_option("--manifest", s2.manifest_path)->required();
    ts2->add_option("--instructions", t_instructions);
    ts2->add_option("--out", s2.checkpoint_out)->required();
    ts2->add_option("--steps", s2.steps);
    ts2->add_option("--batch", s2.batch_size);
    ts2->add_option("--lr", s2.learning_rate);
    ts2->add_option("--seed", s2.seed);

    // curate
    std::string c_components = "components", c_ckpt, c_manifest, c_out,
                c_audit = "curation_audit.tsv", c_fixer = "mock", c_url;
    int c_threshold = 80, c_parallel = 4;
    std::uint64_t c_seed = 11;
    auto* cur = app.add_subcommand("curate", "generate + repair + filter");
    cur->add_option("--components", c_components);
    cur->add_option("--ckpt", c_ckpt)->required();
    cur->add_option("--manifest", c_manifest)->required();
    cur->add_option("--out-manifest", c_out)->required();
    cur->add_option("--audit", c_audit);
    cur->add_option("--fixer", c_fixer)->check(CLI::IsMember({"mock", "remote"}));
    cur->add_option("--url", c_url);
    cur->add_option("--threshold", c_threshold);
    cur->add_option("--parallel", c_parallel);
    cur->add_option("--seed", c_seed);

    // eval-chair
    std::string ec_components = "components", ec_ckpt, ec_manifest,
                ec_mode = "long", ec_report;
    std::uint64_t ec_seed = 13;
    auto* chair = app.add_subcommand("eval-chair", "hallucination evaluation");
    chair->add_option("--components", ec_components);
    chair->add_option("--ckpt", ec_ckpt)->required();
    chair->add_option("--manifest", ec_manifest)->required();
    chair->add_option("--mode", ec_mode)->check(CLI::IsMember({"long", "short"}));
    chair->add_option("--report", ec_report);
    chair->add_option("--seed", ec_seed);

    // eval-coverage
    std::string cov_components = "components", cov_ckpt, cov_manifest,
                cov_judge = "oracle", cov_url, cov_log;
    bool cov_strict = false;
    std::uint64_t cov_seed = 17;
    auto* cov = app.add_subcommand("eval-coverage", "caption coverage judging");
    cov->add_option("--components", cov_components);
    cov->add_option("--ckpt", cov_ckpt)->required();
    cov->add_option("--manifest", cov_manifest)->required();
    cov->add_option("--judge", cov_judge)->check(CLI::IsMember({"oracle", "remote"}));
    cov->add_option("--url", cov_url);
    cov->add_option("--request-log", cov_log);
    cov->add_flag("--strict", cov_strict);
    cov->add_option("--seed", cov_seed);

    // eval-failure
    std::string ef_components = "components", ef_before, ef_after, ef_manifest;
    std::uint64_t ef_seed = 19;
    auto* fail = app.add_subcommand("eval-failure",
                                    "failure-rate comparison of two models");
    fail->add_option("--components", ef_components);
    fail->add_option("--before", ef_before)->required();
    fail->add_option("--after", ef_after)->required();
    fail->add_option("--manifest", ef_manifest)->required();
    fail->add_option("--seed", ef_seed);

    // chat
    std::string ch_components = "components", ch_ckpt;
    std::uint64_t ch_seed = 23;
    auto* chat = app.add_subcommand("chat", "interactive image chat");
    chat->add_option("--components", ch_components);
    chat->add_option("--ckpt", ch_ckpt)->required();
    chat->add_option("--seed", ch_seed);

    // ablate
    std::string ab_components = "components", ab_manifest, ab_out = "ablation";
    int ab_steps = 200, ab_batch = 8;
    std::uint64_t ab_seed = 29;
    auto* abl = app.add_subcommand("ablate", "design-variant grid");
    abl->add_option("--components", ab_components);
    abl->add_option("--manifest", ab_manifest)->required();
    abl->add_option("--out", ab_out);
    abl->add_option("--steps", ab_steps);
    abl->add_option("--batch", ab_batch);
    abl->add_option("--seed", ab_seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (gen->parsed())
            if (gd_manifest.empty()) gd_manifest = gd_out + "/manifest.tsv";
            return cmd_gen_data(gd_out, gd_manifest, gd_n, gd_kind, gd_p_noise,
                                gd_seed);
        if (pre->parsed()) return cmd_pretrain(pt_out, pt_seed, pt_opts);
        if (ts1->parsed()) return cmd_train_stage(1, t_components, "", s1);
        if (ts2->parsed()) {
            s2.instruction_set_path = t_instructions;
            return cmd_train_stage(2, t_components, t_init, s2);
        }
        if (cur->parsed())
            return cmd_curate(c_components, c_ckpt, c_manifest, c_out, c_audit,
                              c_fixer, c_url, c_threshold, c_parallel, c_seed);
        if (chair->parsed())
            return cmd_eval_chair(ec_components, ec_ckpt, ec_manifest, ec_mode,
                                  ec_report, ec_seed);
        if (cov->parsed())
            return cmd_eval_coverage(cov_components, cov_ckpt, cov_manifest,
                                     cov_judge, cov_url, cov_strict, cov_log,
                                     cov_seed);
        if (fail->parsed())
            return cmd_eval_failure(ef_components, ef_before, ef_after,
                                    ef_manifest, ef_seed);
        if (chat->parsed()) return cmd_chat(ch_components, ch_ckpt, ch_seed);
        if (abl->parsed())
            return cmd_ablate(ab_components, ab_manifest, ab_out, ab_steps,
                              ab_batch, ab_seed);
    } catch (const FreezeContractError& e) {
        std::cerr << "freeze contract violation: " << e.what() << "\n";
        return kExitContract;
    } catch (const InternalStateError& e) {
        std::cerr << "internal state error: " << e.what() << "\n";
        return kExitContract;
    } catch (const ExternalServiceError& e) {
        std::cerr << "external service failure: " << e.what() << "\n";
        return kExitExternal;
    } catch (const InvalidRequestError& e) {
        std::cerr << "invalid request: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitUsage;
}
