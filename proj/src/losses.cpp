#include "semstyle/losses.hpp"

#include "semstyle/checkpoint.hpp"

namespace semstyle {

namespace F = torch::nn::functional;

namespace {

torch::Tensor as_batch(const torch::Tensor& x) {
    require(x.dim() == 3 || x.dim() == 4, ErrorKind::InvalidImage, "images must be [3,H,W] or [N,3,H,W]");
    auto b = x.dim() == 3 ? x.unsqueeze(0) : x;
    require(b.size(1) == 3, ErrorKind::InvalidImage, "images must have 3 channels");
    return b;
}

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b) {
    require(a.sizes() == b.sizes(), ErrorKind::InvalidImage, "image shapes differ");
}

torch::Tensor unit_channels(const torch::Tensor& f) { return f * torch::rsqrt(f.pow(2).sum(1, true) + 1e-10); }

constexpr int64_t kPerceptualWidths[] = {16, 32, 64, 64};
constexpr int64_t kIdentityWidths[] = {16, 32, 64, 64};

}  // namespace

// ---------------------------------------------------------------------------

PerceptualNetImpl::PerceptualNetImpl(uint64_t seed, int64_t input_size) : input_size_(input_size), seed_(seed) {
    auto rng = make_rng(seed);
    int64_t in = 3;
    int i = 0;
    for (auto out : kPerceptualWidths) {
        stages_.push_back(register_module("stage" + std::to_string(i), EqualConv2d(in, out, 3, rng, 2)));
        channel_weights_.push_back(register_buffer(
            "lin" + std::to_string(i), torch::full({out}, 1.0 / static_cast<double>(std::size(kPerceptualWidths)))));
        in = out;
        ++i;
    }
}

std::vector<torch::Tensor> PerceptualNetImpl::features(const torch::Tensor& images) {
    auto x = resize_square(as_batch(images), input_size_);
    std::vector<torch::Tensor> out;
    for (auto& stage : stages_) {
        x = smooth_lrelu(stage->forward(x));
        out.push_back(x);
    }
    return out;
}

torch::Tensor PerceptualNetImpl::distance(const torch::Tensor& a, const torch::Tensor& b) {
    check_same_shape(a, b);
    auto ba = as_batch(a);
    auto bb = as_batch(b);
    auto n = ba.size(0);
    // one pass over the concatenated batch keeps both sides on the same kernels
    auto feats = features(torch::cat({ba, bb}));
    auto total = torch::zeros({n}, ba.options());
    for (size_t l = 0; l < feats.size(); ++l) {
        auto fa = unit_channels(feats[l].slice(0, 0, n));
        auto fb = unit_channels(feats[l].slice(0, n, 2 * n));
        auto diff = (fa - fb).pow(2) * channel_weights_[l].view({1, -1, 1, 1});
        total = total + diff.sum(1).mean({1, 2});
    }
    return total;
}

IdentityNetImpl::IdentityNetImpl(uint64_t seed, int64_t input_size) : input_size_(input_size), seed_(seed) {
    auto rng = make_rng(seed);
    int64_t in = 3;
    int i = 0;
    for (auto out : kIdentityWidths) {
        stages_.push_back(register_module("stage" + std::to_string(i), EqualConv2d(in, out, 3, rng, 2)));
        in = out;
        ++i;
    }
    head_ = register_module("head", EqualLinear(in * 16, kEmbeddingDim, rng));
}

torch::Tensor IdentityNetImpl::embed(const torch::Tensor& images) {
    auto x = resize_square(as_batch(images), input_size_);
    for (auto& stage : stages_) x = smooth_lrelu(stage->forward(x));
    x = F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions(4)).flatten(1);
    auto e = head_->forward(x);
    return e * torch::rsqrt(e.pow(2).sum(1, true) + 1e-12);
}

DiscriminatorImpl::DiscriminatorImpl(const GeneratorConfig& config, uint64_t seed) : config_(config), seed_(seed) {
    config_.validate();
    auto rng = make_rng(seed);
    from_rgb_ = register_module("from_rgb", EqualConv2d(3, config_.channels_at(config_.resolution), 1, rng));
    for (int res = config_.resolution; res > 4; res /= 2) {
        auto in = config_.channels_at(res);
        auto out = config_.channels_at(res / 2);
        auto tag = std::to_string(res);
        convs_.push_back(register_module("conv" + tag + "_a", EqualConv2d(in, in, 3, rng)));
        convs_.push_back(register_module("conv" + tag + "_b", EqualConv2d(in, out, 3, rng)));
    }
    auto c4 = config_.channels_at(4);
    final_conv_ = register_module("final_conv", EqualConv2d(c4, c4, 3, rng));
    fc_ = register_module("fc", EqualLinear(c4 * 16, kFeatureDim, rng));
    out_ = register_module("out", EqualLinear(kFeatureDim, 1, rng));
}

torch::Tensor DiscriminatorImpl::features(const torch::Tensor& images) {
    auto x = as_batch(images);
    require(x.size(2) == config_.resolution && x.size(3) == config_.resolution, ErrorKind::InvalidImage,
            "discriminator input resolution mismatch");
    x = smooth_lrelu(from_rgb_->forward(x));
    for (size_t i = 0; i < convs_.size(); i += 2) {
        x = smooth_lrelu(convs_[i]->forward(x));
        x = smooth_lrelu(downsample2x(convs_[i + 1]->forward(x)));
    }
    x = smooth_lrelu(final_conv_->forward(x));
    return smooth_lrelu(fc_->forward(x.flatten(1)));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& images) { return out_->forward(features(images)).squeeze(1); }

// ---------------------------------------------------------------------------

void freeze(torch::nn::Module& module) {
    for (auto& p : module.parameters()) p.set_requires_grad(false);
}

LossNets random_loss_nets(uint64_t perceptual_seed, uint64_t identity_seed) {
    LossNets nets{PerceptualNet(perceptual_seed), IdentityNet(identity_seed)};
    freeze(*nets.perceptual);
    freeze(*nets.identity);
    return nets;
}

void save_perceptual_net(PerceptualNet& net, const fs::path& dir) {
    write_checkpoint(dir, "perceptual", {{"seed", net->seed()}, {"input_size", net->input_size()}}, module_state(*net));
}

PerceptualNet load_perceptual_net(const fs::path& dir) {
    auto ck = read_checkpoint(dir, "perceptual");
    PerceptualNet net(header_field<uint64_t>(ck.header, "seed"), header_field<int64_t>(ck.header, "input_size"));
    load_module_state(*net, ck.tensors);
    freeze(*net);
    return net;
}

void save_identity_net(IdentityNet& net, const fs::path& dir) {
    write_checkpoint(dir, "identity", {{"seed", net->seed()}, {"input_size", net->input_size()}}, module_state(*net));
}

IdentityNet load_identity_net(const fs::path& dir) {
    auto ck = read_checkpoint(dir, "identity");
    IdentityNet net(header_field<uint64_t>(ck.header, "seed"), header_field<int64_t>(ck.header, "input_size"));
    load_module_state(*net, ck.tensors);
    freeze(*net);
    return net;
}

void save_discriminator(Discriminator& disc, const fs::path& dir) {
    write_checkpoint(dir, "discriminator", {{"config", disc->config().to_json()}, {"seed", disc->seed()}},
                     module_state(*disc));
}

Discriminator load_discriminator(const fs::path& dir) {
    auto ck = read_checkpoint(dir, "discriminator");
    Discriminator disc(GeneratorConfig::from_json(header_field<json>(ck.header, "config")),
                       header_field<uint64_t>(ck.header, "seed"));
    load_module_state(*disc, ck.tensors);
    return disc;
}

// ---------------------------------------------------------------------------

torch::Tensor lpips(const torch::Tensor& a, const torch::Tensor& b, PerceptualNet& net) {
    return net->distance(a, b).mean();
}

torch::Tensor embedding_distance(const torch::Tensor& ea, const torch::Tensor& eb) {
    require(ea.sizes() == eb.sizes() && ea.dim() == 2, ErrorKind::InvalidParameter, "embedding batches differ in shape");
    return 1.0 - (ea * eb).sum(1).clamp(-1.0, 1.0);
}

torch::Tensor identity_loss(const torch::Tensor& a, const torch::Tensor& b, IdentityNet& net) {
    check_same_shape(a, b);
    auto ba = as_batch(a);
    auto n = ba.size(0);
    auto e = net->embed(torch::cat({ba, as_batch(b)}));
    return embedding_distance(e.slice(0, 0, n), e.slice(0, n, 2 * n)).mean();
}

torch::Tensor semantic_loss_per_sample(const torch::Tensor& a, const torch::Tensor& b, double lambda_id,
                                       LossNets& nets) {
    require(lambda_id >= 0.0, ErrorKind::InvalidParameter, "lambda_id must be >= 0");
    auto perceptual = nets.perceptual->distance(a, b);
    if (lambda_id == 0.0) return perceptual;
    auto ba = as_batch(a);
    auto n = ba.size(0);
    auto e = nets.identity->embed(torch::cat({ba, as_batch(b)}));
    auto id = embedding_distance(e.slice(0, 0, n), e.slice(0, n, 2 * n));
    return perceptual + lambda_id * id;
}

torch::Tensor semantic_loss(const torch::Tensor& a, const torch::Tensor& b, double lambda_id, LossNets& nets) {
    require(lambda_id >= 0.0, ErrorKind::InvalidParameter, "lambda_id must be >= 0");
    auto perceptual = lpips(a, b, nets.perceptual);
    if (lambda_id == 0.0) return perceptual;
    return perceptual + lambda_id * identity_loss(a, b, nets.identity);
}

torch::Tensor paired_loss(const torch::Tensor& generated, const torch::Tensor& style_image, PerceptualNet& net) {
    return lpips(generated, style_image, net);
}

AdversarialLosses adversarial_losses_from_logits(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
    require(real_logits.numel() > 0 && fake_logits.numel() > 0, ErrorKind::InvalidParameter,
            "adversarial losses need non-empty batches");
    return {F::softplus(-fake_logits).mean(), F::softplus(fake_logits).mean() + F::softplus(-real_logits).mean()};
}

AdversarialLosses adversarial_losses(const torch::Tensor& real, const torch::Tensor& fake, Discriminator& disc) {
    require(real.numel() > 0 && fake.numel() > 0, ErrorKind::InvalidParameter,
            "adversarial losses need non-empty batches");
    return adversarial_losses_from_logits(disc->forward(real), disc->forward(fake));
}

torch::Tensor r1_penalty(const torch::Tensor& real, Discriminator& disc) {
    auto x = as_batch(real).detach().requires_grad_(true);
    auto logits = disc->forward(x);
    auto grad = torch::autograd::grad({logits.sum()}, {x}, {}, /*retain_graph=*/true, /*create_graph=*/true)[0];
    return grad.pow(2).sum({1, 2, 3}).mean();
}

torch::Tensor total_loss(const torch::Tensor& adv, const torch::Tensor& semantic, const torch::Tensor& paired,
                         double lambda_semantic, double lambda_paired) {
    require(lambda_semantic >= 0.0 && lambda_paired >= 0.0, ErrorKind::InvalidParameter, "loss weights must be >= 0");
    return adv + lambda_semantic * semantic + lambda_paired * paired;
}

}  // namespace semstyle
