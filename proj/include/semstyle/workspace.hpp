#pragma once

#include <optional>
#include <string>
#include <vector>

#include "semstyle/encoder.hpp"
#include "semstyle/finetune.hpp"
#include "semstyle/generator.hpp"
#include "semstyle/inversion.hpp"
#include "semstyle/losses.hpp"
#include "semstyle/pseudo_pairs.hpp"
#include "semstyle/stylize.hpp"
#include "semstyle/synthetic_faces.hpp"

namespace semstyle {

struct DataConfig {
    int real_count = 400;
    int test_count = 16;
    int style_count = 10;
    std::string style_kind = "cartoon";
    uint64_t seed = 0;
};

struct EvaluateConfig {
    int samples = 200;          // generator samples on the FID side
    int semantic_samples = 64;  // shared z draws for the semantic distance
    uint64_t seed = 1234;
};

struct StudyConfig {
    int references = 3;
    /// Fine-tuning iterations per run of the pair-level study and the sweeps.
    int iterations = 1000;
    std::vector<double> lambda_semantic_values = {0.001, 0.01, 0.1, 1.0, 10.0};
    std::vector<double> lambda_paired_values = {0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0};
};

/// The single project configuration. Every section falls back to its
/// defaults when absent; unknown keys are ignored.
struct ProjectConfig {
    GeneratorConfig generator;
    std::string style = "cartoon";
    DataConfig data;
    PretrainConfig pretrain;
    EncoderTrainConfig encoder;
    FinetuneConfig finetune;
    PairBuildConfig pairs;
    InversionConfig inversion;
    int basis_k = 64;
    double policy_psi = 0.7;
    EvaluateConfig evaluate;
    StudyConfig study;
    uint64_t perceptual_seed = 7;
    uint64_t identity_seed = 11;

    json to_json() const;
    static ProjectConfig from_json(const json& j);
};

/// Per-invocation overrides coming from command-line flags.
struct Overrides {
    std::optional<uint64_t> seed;
    std::optional<double> psi;
    std::optional<int64_t> k;
    std::optional<int> pair_level;
    std::optional<int> iters;
};

/// Paths of a workspace. All artifacts live under one root:
///
///   config.json
///   data/{real,test,<style>}/          image sets
///   models/{G,D,E_w,E_wplus,E_zplus,perceptual,identity}/
///   <style>/{G_star,G_prime,pairs,policy.json}
///   runs/<name>/                       config, logs, checkpoints, reports
///   cache/refs/                        reference embeddings
class Workspace {
public:
    explicit Workspace(fs::path root);

    const fs::path& root() const { return root_; }
    fs::path config_path() const { return root_ / "config.json"; }
    fs::path data(const std::string& set) const { return root_ / "data" / set; }
    fs::path model(const std::string& name) const { return root_ / "models" / name; }
    fs::path style_dir(const std::string& style) const { return root_ / style; }
    fs::path run(const std::string& name) const { return root_ / "runs" / name; }
    fs::path refs_cache() const { return root_ / "cache" / "refs"; }

    /// Reads `config_file` when given, else config.json of the workspace,
    /// else defaults.
    ProjectConfig load_config(const std::optional<fs::path>& config_file = {}) const;

private:
    fs::path root_;
};

std::string encoder_model_name(LatentSpace space);
LossNets load_loss_nets(const Workspace& ws, const ProjectConfig& cfg);

/// Models needed to serve one style.
struct StyleModels {
    StylePolicy policy;
    Generator g_prime;
    SefaBasis basis;
};
StyleModels load_style(const Workspace& ws, const std::string& style, int basis_k);

// Subcommands. Each returns the JSON report it also prints or stores.

json cmd_make_data(const Workspace& ws, const ProjectConfig& cfg);
json cmd_pretrain(const Workspace& ws, ProjectConfig cfg, const Overrides& ov);
json cmd_train_encoder(const Workspace& ws, ProjectConfig cfg, LatentSpace space, const Overrides& ov);
json cmd_finetune_unconstrained(const Workspace& ws, ProjectConfig cfg, const std::string& style,
                                const Overrides& ov);
json cmd_make_pairs(const Workspace& ws, ProjectConfig cfg, const std::string& style, const Overrides& ov,
                    PairBuildStats* stats = nullptr);
/// Constrained fine-tuning. `pairs_dir` defaults to `<style>/pairs`; with
/// lambda_paired > 0 a missing dataset is a config error raised before any
/// model is loaded. `run_name` and `output` default to the style's
/// constrained run and `<style>/G_prime`; an explicit output skips the
/// policy update.
json cmd_finetune(const Workspace& ws, ProjectConfig cfg, const std::string& style, const Overrides& ov,
                  const std::optional<fs::path>& pairs_dir = {}, const std::optional<std::string>& run_name = {},
                  const std::optional<fs::path>& output = {});

json cmd_stylize(const Workspace& ws, const ProjectConfig& cfg, const std::string& style, const fs::path& input,
                 const fs::path& output, const Overrides& ov);
/// Noise mode when `reference_id` is empty, reference mode otherwise.
json cmd_mix(const Workspace& ws, const ProjectConfig& cfg, const std::string& style, const fs::path& input,
             const fs::path& output, const Overrides& ov, const std::string& reference_id = {});
json cmd_invert_ref(const Workspace& ws, ProjectConfig cfg, const std::string& style, const fs::path& input,
                    const Overrides& ov);

/// Metrics of one fine-tuned generator against the style set and the test
/// portraits. `generator_dir` defaults to `<style>/G_prime`.
json cmd_evaluate(const Workspace& ws, const ProjectConfig& cfg, const std::string& style,
                  const std::optional<fs::path>& generator_dir = {}, const Overrides& ov = {});

json cmd_study_content_space(const Workspace& ws, const ProjectConfig& cfg, const std::string& style,
                             const Overrides& ov);
json cmd_study_ref_space(const Workspace& ws, ProjectConfig cfg, const std::string& style, const Overrides& ov);
json cmd_study_pair_level(const Workspace& ws, ProjectConfig cfg, const std::string& style, const Overrides& ov);
/// `param` is lambda_semantic or lambda_paired; `values` defaults to the preset.
json cmd_study_sweep(const Workspace& ws, ProjectConfig cfg, const std::string& style, const std::string& param,
                     const Overrides& ov, const std::vector<double>& values = {});

}  // namespace semstyle
