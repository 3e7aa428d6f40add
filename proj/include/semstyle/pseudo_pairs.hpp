#pragma once

#include <torch/torch.h>

#include <string>
#include <vector>

#include "semstyle/encoder.hpp"
#include "semstyle/finetune.hpp"
#include "semstyle/generator.hpp"
#include "semstyle/losses.hpp"

namespace semstyle {

struct Level1 {
    LatentCode z1;
    LatentCode w1;
    torch::Tensor p1;
};

/// z1 = E_z+(S), w1 = mapping of G applied to z1, P1 = G(w1).
Level1 embed_level1(const torch::Tensor& style_image, Encoder& e_zplus, const Generator& g);

struct Level2 {
    LatentCode z2;
    LatentCode w2;
    torch::Tensor p2;
    /// Semantic loss of every visited iterate: the start plus one entry per
    /// update, so iters + 1 values.
    std::vector<double> loss_curve;
    int best_iterate = 0;
    double initial_loss() const { return loss_curve.front(); }
    double final_loss() const { return loss_curve[static_cast<size_t>(best_iterate)]; }
};

/// Minimizes the semantic loss between G*(z) and S over Z+ starting at z1,
/// returns the best iterate, then decodes it with the pretrained G (not G*).
Level2 optimize_level2(const LatentCode& z1, const torch::Tensor& style_image, const Generator& g_star,
                       const Generator& g, int iters, double lr, double lambda_id, LossNets& nets);

struct Level3 {
    LatentCode w3;
    torch::Tensor p3;
};

/// w3 = E_w+(S), P3 = G(w3).
Level3 refine_level3(const torch::Tensor& style_image, Encoder& e_wplus, const Generator& g);

struct PairedSample {
    std::string id;
    torch::Tensor style;  // S, [3, R, R]
    torch::Tensor p1, p2, p3;
    LatentCode z1, z2, w1, w2, w3;
    json meta;

    const LatentCode& w_at(int level) const;
    const torch::Tensor& p_at(int level) const;
};

struct PairedDataset {
    std::string style_name;
    int level_default = 2;
    fs::path root;
    std::vector<PairedSample> samples;

    /// Codes and style images at one level, ready for fine-tuning.
    PairSet at_level(int level) const;
};

struct PairBuildConfig {
    int iters = 1000;
    double lr = 0.02;
    double lambda_id = 0.1;
    int level_default = 2;
    std::string style_name = "style";
    json to_json() const;
};

struct PairBuildStats {
    int built = 0;
    int resumed = 0;
    int64_t optimization_steps = 0;
    std::vector<std::string> skipped;  // unreadable inputs
};

/// Runs all three levels for every image in `style_dir` and writes
/// `pairs_dir/<id>/{S,P1,P2,P3}.png, {z1,z2,w1,w2,w3}.f32, meta.json` plus
/// `pairs_dir/manifest.json`. Samples whose meta.json exists are loaded, not
/// recomputed.
PairedDataset build_pair_dataset(const fs::path& style_dir, const fs::path& pairs_dir, const Generator& g,
                                 const Generator& g_star, Encoder& e_zplus, Encoder& e_wplus,
                                 const PairBuildConfig& cfg, LossNets& nets, PairBuildStats* stats = nullptr);

PairedDataset load_pair_dataset(const fs::path& pairs_dir, const GeneratorConfig& config);

/// Digest over every stored code and image of the dataset, in id order.
std::string pair_dataset_hash(const fs::path& pairs_dir);

/// Regenerates P1..P3 and w1, w2 from the stored codes and compares them
/// bit-exactly (images after 8-bit quantization). Returns a list of
/// mismatches, empty when the sample is consistent.
std::vector<std::string> verify_sample(const PairedSample& sample, const Generator& g);

/// sha256 over parameter and buffer names and bytes of a module.
std::string state_digest(const torch::nn::Module& module);

}  // namespace semstyle
