#pragma once

#include <torch/torch.h>

#include <string>
#include <vector>

#include "semstyle/generator.hpp"
#include "semstyle/layers.hpp"

namespace semstyle {

/// Side length images are resized to before perceptual and identity
/// feature extraction.
inline constexpr int64_t kLossResolution = 256;

/// Multi-stage convolutional feature extractor behind the LPIPS-style
/// distance: unit-normalize channels per position, weight the squared
/// differences per channel, average over space, sum over stages.
class PerceptualNetImpl : public torch::nn::Module {
public:
    explicit PerceptualNetImpl(uint64_t seed, int64_t input_size = kLossResolution);
    std::vector<torch::Tensor> features(const torch::Tensor& images);
    /// Per-sample distance, [N].
    torch::Tensor distance(const torch::Tensor& a, const torch::Tensor& b);
    int64_t input_size() const { return input_size_; }
    uint64_t seed() const { return seed_; }

private:
    std::vector<EqualConv2d> stages_;
    std::vector<torch::Tensor> channel_weights_;
    int64_t input_size_;
    uint64_t seed_;
};
TORCH_MODULE(PerceptualNet);

/// Face-embedding network: conv trunk, 4x4 spatial pooling, linear
/// projection, L2 normalization.
class IdentityNetImpl : public torch::nn::Module {
public:
    static constexpr int64_t kEmbeddingDim = 128;

    explicit IdentityNetImpl(uint64_t seed, int64_t input_size = kLossResolution);
    /// Unit-norm embeddings, [N, kEmbeddingDim].
    torch::Tensor embed(const torch::Tensor& images);
    uint64_t seed() const { return seed_; }
    int64_t input_size() const { return input_size_; }

private:
    std::vector<EqualConv2d> stages_;
    EqualLinear head_{nullptr};
    int64_t input_size_;
    uint64_t seed_;
};
TORCH_MODULE(IdentityNet);

/// Convolutional critic matched to a generator config; one logit per image.
class DiscriminatorImpl : public torch::nn::Module {
public:
    static constexpr int64_t kFeatureDim = 64;

    DiscriminatorImpl(const GeneratorConfig& config, uint64_t seed);
    torch::Tensor forward(const torch::Tensor& images);
    /// Penultimate activations, [N, kFeatureDim]; used as the desk-scale FID
    /// feature space.
    torch::Tensor features(const torch::Tensor& images);
    const GeneratorConfig& config() const { return config_; }
    uint64_t seed() const { return seed_; }

private:
    GeneratorConfig config_;
    uint64_t seed_;
    EqualConv2d from_rgb_{nullptr};
    std::vector<EqualConv2d> convs_;
    EqualConv2d final_conv_{nullptr};
    EqualLinear fc_{nullptr};
    EqualLinear out_{nullptr};
};
TORCH_MODULE(Discriminator);

/// Perceptual and identity extractors used by every loss.
struct LossNets {
    PerceptualNet perceptual{nullptr};
    IdentityNet identity{nullptr};
};

/// Fixed-seed randomly initialized extractors (the desk-scale surrogate for
/// pretrained VGG / ArcFace weights).
LossNets random_loss_nets(uint64_t perceptual_seed = 7, uint64_t identity_seed = 11);
void freeze(torch::nn::Module& module);

void save_perceptual_net(PerceptualNet& net, const fs::path& dir);
PerceptualNet load_perceptual_net(const fs::path& dir);
void save_identity_net(IdentityNet& net, const fs::path& dir);
IdentityNet load_identity_net(const fs::path& dir);
void save_discriminator(Discriminator& disc, const fs::path& dir);
Discriminator load_discriminator(const fs::path& dir);

// Losses. Image arguments are [3,H,W] or [N,3,H,W]; batched results are
// means over the batch.

torch::Tensor lpips(const torch::Tensor& a, const torch::Tensor& b, PerceptualNet& net);
/// Per-row 1 - cos between unit embeddings, [N].
torch::Tensor embedding_distance(const torch::Tensor& ea, const torch::Tensor& eb);
/// 1 - cos(embed(a), embed(b)), in [0, 2].
torch::Tensor identity_loss(const torch::Tensor& a, const torch::Tensor& b, IdentityNet& net);
/// lpips + lambda_id * identity_loss.
torch::Tensor semantic_loss(const torch::Tensor& a, const torch::Tensor& b, double lambda_id, LossNets& nets);
/// Per-sample semantic loss, [N].
torch::Tensor semantic_loss_per_sample(const torch::Tensor& a, const torch::Tensor& b, double lambda_id,
                                       LossNets& nets);
/// LPIPS between a decoded pair code and its style image.
torch::Tensor paired_loss(const torch::Tensor& generated, const torch::Tensor& style_image, PerceptualNet& net);

struct AdversarialLosses {
    torch::Tensor g_loss;
    torch::Tensor d_loss;
};

/// Non-saturating logistic losses: g = E[softplus(-D(fake))],
/// d = E[softplus(D(fake))] + E[softplus(-D(real))].
AdversarialLosses adversarial_losses_from_logits(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);
AdversarialLosses adversarial_losses(const torch::Tensor& real, const torch::Tensor& fake, Discriminator& disc);
/// E[|grad_x D(x)|^2] on real images.
torch::Tensor r1_penalty(const torch::Tensor& real, Discriminator& disc);

torch::Tensor total_loss(const torch::Tensor& adv, const torch::Tensor& semantic, const torch::Tensor& paired,
                         double lambda_semantic, double lambda_paired);

}  // namespace semstyle
