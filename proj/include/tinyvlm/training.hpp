// Two-stage training recipe: component pretraining (toy stand-ins for the
// frozen "pretrained" encoder and LM), stage-1 projection-only alignment on
// noisy short captions, stage-2 finetuning on curated detailed descriptions.
#pragma once

#include <string>
#include <vector>

#include "tinyvlm/model.hpp"
#include "tinyvlm/synthetic.hpp"
#include "tinyvlm/vocab.hpp"

namespace tinyvlm {

struct TrainingFailureError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FreezeContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct StageConfig {
    int stage = 1;
    int steps = 2000;      // stage two default: 400
    int batch_size = 32;   // stage two default: 12
    double learning_rate = 3e-4;  // stage two default: 1e-4
    std::string manifest_path;
    std::string instruction_set_path;  // stage two only
    std::uint64_t seed = 0;
    std::string checkpoint_out;

    static StageConfig stage1_defaults();
    static StageConfig stage2_defaults();
};

struct TrainLog {
    std::vector<double> losses;
    double wall_seconds = 0.0;
    std::uint64_t initial_frozen_digest = 0;
    std::uint64_t final_frozen_digest = 0;

    bool frozen_untouched() const {
        return initial_frozen_digest == final_frozen_digest;
    }
    void save(const std::string& path) const;
};

struct PretrainOptions {
    int corpus_scenes = 1500;
    int holdout_scenes = 100;
    int lm_max_steps = 4000;
    int lm_batch = 8;
    double lm_learning_rate = 1e-3;
    double lm_stop_perplexity = 2.2;      // early-stop target
    double lm_required_perplexity = 3.0;  // failure threshold at budget end
    int encoder_max_steps = 3000;
    int encoder_batch = 8;
    double encoder_learning_rate = 1e-3;
    double encoder_stop_accuracy = 0.98;
    double encoder_required_accuracy = 0.95;
    int eval_every = 100;
};

struct PretrainResult {
    double lm_perplexity = 0.0;
    double encoder_accuracy = 0.0;
    int lm_steps = 0;
    int encoder_steps = 0;
};

// Trains the toy LM as a plain language model over the caption grammar (with
// instruction-conditioned text so the frozen LM carries instruction-following
// style, mirroring an instruction-tuned backbone) and the encoder+resampler
// on per-cell object classification, then writes both as frozen checkpoints.
PretrainResult pretrain_components(const ModelConfig& config,
                                   const Vocabulary& vocab,
                                   std::uint64_t seed,
                                   const std::string& encoder_ckpt,
                                   const std::string& lm_ckpt,
                                   const PretrainOptions& opts = {});

// Loads the component checkpoints written by pretrain_components into a
// freshly constructed model.
void load_components(AlignmentModel& model, const std::string& encoder_ckpt,
                     const std::string& lm_ckpt);

TrainLog train_stage1(AlignmentModel& model, const Vocabulary& vocab,
                      const StageConfig& config);
TrainLog train_stage2(AlignmentModel& model, const Vocabulary& vocab,
                      const StageConfig& config,
                      const InstructionSet& instructions);

// Per-sample loss for an assembled sequence with its visual prefix spliced
// in: logits at position t-1 are scored against token t wherever the mask
// selects it. Shared by both stages and by tests.
TensorPtr sequence_loss(Tape& tape, const AlignmentModel& model,
                        const TokenSequence& seq, const TensorPtr& prefix);
// Same forward pass with the CE target vector replaced; inputs stay intact.
// Used by the loss-mask contract checks.
TensorPtr sequence_loss_with_targets(Tape& tape, const AlignmentModel& model,
                                     const TokenSequence& seq,
                                     const TensorPtr& prefix,
                                     const std::vector<int>& targets);

// Loss for a text-only sequence (LM pretraining path).
TensorPtr text_loss(Tape& tape, const AlignmentModel& model,
                    const std::vector<int>& ids,
                    const std::vector<bool>& target_mask);

// ParamStore views sharing tensors with the model, used for component
// checkpoints. Order follows the model store.
ParamStore component_subset(const ParamStore& store,
                            const std::vector<std::string>& prefixes);

}  // namespace tinyvlm
