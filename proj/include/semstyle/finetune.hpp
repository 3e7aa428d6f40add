#pragma once

#include <torch/torch.h>

#include <memory>
#include <optional>
#include <vector>

#include "semstyle/generator.hpp"
#include "semstyle/losses.hpp"

namespace semstyle {

/// Hyperparameters of constrained fine-tuning. With both lambda_semantic and
/// lambda_paired at zero the loop is plain adversarial fine-tuning and its
/// output is the unconstrained generator G*.
struct FinetuneConfig {
    double lambda_id = 0.1;
    double lambda_semantic = 1.0;
    double lambda_paired = 1.0;
    double lr = 0.02;
    int batch_size = 4;
    int iterations = 1000;
    int pair_level = 2;
    double truncation_psi_eval = 0.7;
    uint64_t seed = 0;
    double r1_gamma = 10.0;
    int r1_interval = 16;
    /// Intermediate checkpoint period in steps; 0 keeps only the final one.
    int checkpoint_every = 0;

    bool constrained() const { return lambda_semantic > 0.0 || lambda_paired > 0.0; }
    void validate() const;
    json to_json() const;
    static FinetuneConfig from_json(const json& j);
};

/// Pseudo-paired supervision at one level: codes [N, L, d] with their style
/// images [N, 3, R, R].
struct PairSet {
    torch::Tensor codes;
    torch::Tensor styles;
    int64_t size() const { return codes.defined() ? codes.size(0) : 0; }
};

struct StepReport {
    int step = 0;
    double adv = 0.0;
    double semantic = 0.0;
    double paired = 0.0;
    double total = 0.0;
    double d_loss = 0.0;
    std::optional<double> r1;
    json to_json() const;
};

/// Optimizers and sampling state that persist across fine-tuning steps.
struct FinetuneState {
    FinetuneState(const Generator& g_prime, Discriminator& disc, const FinetuneConfig& cfg, bool train_mapping = false);
    std::unique_ptr<torch::optim::Adam> g_opt;
    std::unique_ptr<torch::optim::Adam> d_opt;
    at::Generator rng;
    int step = 0;
};

/// One discriminator update followed by one update of G'. The semantic term
/// compares G and G' on the same z; the paired term decodes pair codes with
/// G'. Raises NumericAbort with the component breakdown on a non-finite loss.
StepReport finetune_step(Generator& g_prime, const Generator& g_frozen, Discriminator& disc,
                         const torch::Tensor& style_batch, const PairSet& pair_batch, const FinetuneConfig& cfg,
                         LossNets& nets, FinetuneState& state);

struct FinetuneResult {
    Generator generator;
    Discriminator discriminator;
    std::vector<StepReport> reports;
};

/// Fine-tunes a copy of `pretrained` towards `style_images`. The
/// discriminator starts from `disc_init` when given. When `run_dir` is set
/// it receives config.json, log.jsonl (one record per step) and ckpt_<step>/
/// generator checkpoints (with the discriminator under discriminator/); the
/// directory is locked for the duration.
FinetuneResult finetune(const Generator& pretrained, const torch::Tensor& style_images,
                        const std::optional<PairSet>& pairs, const FinetuneConfig& cfg, LossNets& nets,
                        const Discriminator* disc_init = nullptr, const fs::path& run_dir = {},
                        const StepLogger& log = {});

struct PretrainConfig {
    int steps = 2000;
    int batch_size = 8;
    double lr = 0.0025;
    double r1_gamma = 1.0;
    int r1_interval = 16;
    uint64_t seed = 0;
    uint64_t w_mean_seed = 1;
    json to_json() const;
    static PretrainConfig from_json(const json& j);
};

struct PretrainResult {
    Generator generator;
    Discriminator discriminator;
    std::vector<StepReport> reports;
};

/// Trains the desk-scale real-face generator from scratch (all parameters,
/// mapping included), then computes its w_mean.
PretrainResult pretrain(const GeneratorConfig& config, const torch::Tensor& real_images, const PretrainConfig& cfg,
                        const StepLogger& log = {});

/// Uniform draw with replacement of `count` rows.
torch::Tensor sample_rows(const torch::Tensor& data, int64_t count, at::Generator& rng);

/// Exclusive advisory lock on a directory, released on destruction. A second
/// holder fails with a Conflict error instead of blocking.
class DirectoryLock {
public:
    explicit DirectoryLock(const fs::path& dir);
    ~DirectoryLock();
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

private:
    int fd_ = -1;
};

}  // namespace semstyle
