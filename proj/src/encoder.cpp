#include "semstyle/encoder.hpp"

#include <bit>
#include <cmath>

#include "semstyle/checkpoint.hpp"

namespace semstyle {

namespace {

int64_t split_row(int64_t layers, int64_t numerator) {
    // 18-layer pSp split (3 coarse, 4 medium, 11 fine) scaled to `layers`.
    return std::clamp<int64_t>(std::llround(static_cast<double>(layers * numerator) / 18.0), 1, layers);
}

}  // namespace

StyleHeadImpl::StyleHeadImpl(int64_t width, int64_t spatial, int64_t latent_dim, at::Generator& rng) {
    const int steps = std::countr_zero(static_cast<uint64_t>(spatial));
    for (int i = 0; i < steps; ++i)
        convs_.push_back(register_module("conv" + std::to_string(i), EqualConv2d(width, width, 3, rng, 2)));
    linear_ = register_module("linear", EqualLinear(width, latent_dim, rng));
    torch::NoGradGuard guard;
    // Small initial outputs keep a fresh encoder close to the offset.
    const_cast<torch::Tensor&>(linear_->weight()).mul_(0.1);
}

torch::Tensor StyleHeadImpl::forward(const torch::Tensor& features) {
    auto x = features;
    for (auto& conv : convs_) x = smooth_lrelu(conv->forward(x));
    return linear_->forward(x.flatten(1));
}

EncoderNetImpl::EncoderNetImpl(const GeneratorConfig& config, LatentSpace target, uint64_t seed)
    : config_(config), target_(target), seed_(seed) {
    config_.validate();
    require(target == LatentSpace::W || target == LatentSpace::WPlus || target == LatentSpace::ZPlus,
            ErrorKind::Config, "encoders target W, WPlus or ZPlus");
    const int64_t layers = config_.layer_count();
    coarse_end_ = split_row(layers, 3);
    medium_end_ = std::max(coarse_end_, split_row(layers, 7));
    const int64_t res = config_.resolution;
    const int64_t width = kPyramidWidth;
    auto rng = make_rng(seed);

    from_rgb_ = register_module("from_rgb", EqualConv2d(3, config_.channels_at(res), 1, rng));
    for (int64_t r = res; r > res / 16; r /= 2) {
        auto in = config_.channels_at(static_cast<int>(r));
        auto out = config_.channels_at(static_cast<int>(r / 2));
        auto tag = std::to_string(r);
        body_.push_back(register_module("body" + tag + "_a", EqualConv2d(in, in, 3, rng)));
        body_.push_back(register_module("body" + tag + "_b", EqualConv2d(in, out, 3, rng)));
    }
    lateral_fine_ = register_module("lateral_fine", EqualConv2d(config_.channels_at(static_cast<int>(res / 4)), width, 1, rng));
    lateral_medium_ =
        register_module("lateral_medium", EqualConv2d(config_.channels_at(static_cast<int>(res / 8)), width, 1, rng));
    lateral_coarse_ =
        register_module("lateral_coarse", EqualConv2d(config_.channels_at(static_cast<int>(res / 16)), width, 1, rng));

    if (target == LatentSpace::W) {
        heads_.push_back(register_module("head", StyleHead(width, res / 16, config_.latent_dim, rng)));
    } else {
        for (int64_t i = 0; i < layers; ++i) {
            int64_t spatial = i < coarse_end_ ? res / 16 : (i < medium_end_ ? res / 8 : res / 4);
            heads_.push_back(
                register_module("head" + std::to_string(i), StyleHead(width, spatial, config_.latent_dim, rng)));
        }
    }
    offset_ = register_buffer("offset", torch::zeros({config_.latent_dim}));
}

torch::Tensor EncoderNetImpl::forward(const torch::Tensor& images) {
    auto x = images.dim() == 3 ? images.unsqueeze(0) : images;
    const int64_t res = config_.resolution;
    require(x.dim() == 4 && x.size(1) == 3 && x.size(2) == res && x.size(3) == res, ErrorKind::InvalidImage,
            "encoder expects [N, 3, " + std::to_string(res) + ", " + std::to_string(res) + "] images");
    x = smooth_lrelu(from_rgb_->forward(x));
    std::vector<torch::Tensor> taps;  // R/2, R/4, R/8, R/16
    for (size_t i = 0; i < body_.size(); i += 2) {
        x = smooth_lrelu(body_[i]->forward(x));
        x = smooth_lrelu(downsample2x(body_[i + 1]->forward(x)));
        taps.push_back(x);
    }
    auto coarse = lateral_coarse_->forward(taps[3]);
    auto medium = lateral_medium_->forward(taps[2]) + upsample2x(coarse);
    auto fine = lateral_fine_->forward(taps[1]) + upsample2x(medium);

    torch::Tensor out;
    if (target_ == LatentSpace::W) {
        out = heads_[0]->forward(coarse).unsqueeze(1);
    } else {
        std::vector<torch::Tensor> rows;
        rows.reserve(heads_.size());
        for (int64_t i = 0; i < static_cast<int64_t>(heads_.size()); ++i) {
            const auto& feats = i < coarse_end_ ? coarse : (i < medium_end_ ? medium : fine);
            rows.push_back(heads_[static_cast<size_t>(i)]->forward(feats));
        }
        out = torch::stack(rows, 1);
    }
    if (target_ != LatentSpace::ZPlus) out = out + offset_;
    return out;
}

void EncoderNetImpl::set_latent_offset(const torch::Tensor& w_mean) {
    require(w_mean.numel() == config_.latent_dim, ErrorKind::InvalidParameter, "offset has the wrong dimension");
    torch::NoGradGuard guard;
    offset_.copy_(w_mean.reshape({-1}));
}

std::vector<torch::Tensor> EncoderNetImpl::head_parameters() {
    std::vector<torch::Tensor> out;
    for (auto& h : heads_)
        for (auto& p : h->parameters()) out.push_back(p);
    return out;
}

Encoder make_encoder(LatentSpace target, const Generator& gen, uint64_t seed) {
    Encoder enc(gen.config(), target, seed);
    if (target != LatentSpace::ZPlus) enc->set_latent_offset(gen.w_mean());
    return enc;
}

LatentCode encode(const torch::Tensor& image, Encoder& enc) {
    require(image.dim() == 3, ErrorKind::InvalidImage, "encode expects one [3, R, R] image");
    torch::NoGradGuard guard;
    return LatentCode(enc->target_space(), enc->forward(image.unsqueeze(0))[0]);
}

torch::Tensor decode_encoded(const torch::Tensor& codes, LatentSpace space, const Generator& gen) {
    const auto layers = gen.config().layer_count();
    switch (space) {
        case LatentSpace::W: return gen.synthesize_batch(codes.expand({-1, layers, -1}));
        case LatentSpace::WPlus: return gen.synthesize_batch(codes);
        case LatentSpace::ZPlus: return gen.synthesize_batch(gen.map(codes));
        default: fail(ErrorKind::InvalidCode, "encoder outputs are W, WPlus or ZPlus");
    }
}

EncoderTrainReport train_encoder(Encoder& enc, const Generator& gen, const torch::Tensor& images,
                                 const EncoderTrainConfig& cfg, LossNets& nets, const StepLogger& log) {
    require(images.dim() == 4 && images.size(0) >= 1, ErrorKind::Config, "encoder training needs a non-empty dataset");
    require(cfg.steps >= 0 && cfg.batch_size >= 1, ErrorKind::Config, "encoder training needs steps >= 0, batch >= 1");
    require(enc->config() == gen.config(), ErrorKind::Config, "encoder and generator configs differ");
    gen.set_requires_grad(false);
    enc->train();
    torch::optim::Adam opt(enc->parameters(), torch::optim::AdamOptions(cfg.lr).betas({0.9, 0.99}));
    auto rng = make_rng(cfg.seed);
    EncoderTrainReport report;
    const auto n = images.size(0);
    for (int step = 0; step < cfg.steps; ++step) {
        auto idx = torch::randint(n, {cfg.batch_size}, rng, torch::kLong);
        auto batch = images.index_select(0, idx);
        auto recon = decode_encoded(enc->forward(batch), enc->target_space(), gen);
        auto l2 = (recon - batch).pow(2).mean();
        auto perceptual = lpips(recon, batch, nets.perceptual);
        auto id = identity_loss(recon, batch, nets.identity);
        auto loss = cfg.lambda_l2 * l2 + cfg.lambda_lpips * perceptual + cfg.lambda_id * id;
        const double value = loss.item<double>();
        if (!std::isfinite(value)) {
            fail(ErrorKind::NumericAbort, "encoder loss became non-finite at step " + std::to_string(step) +
                                              " (l2 " + std::to_string(l2.item<double>()) + ", lpips " +
                                              std::to_string(perceptual.item<double>()) + ", id " +
                                              std::to_string(id.item<double>()) + ")");
        }
        opt.zero_grad();
        loss.backward();
        opt.step();
        report.losses.push_back(value);
        if (log) {
            log({{"step", step},
                 {"loss", value},
                 {"l2", l2.item<double>()},
                 {"lpips", perceptual.item<double>()},
                 {"identity", id.item<double>()}});
        }
    }
    enc->eval();
    return report;
}

void save_encoder(Encoder& enc, const fs::path& dir) {
    json header = {{"config", enc->config().to_json()},
                   {"target_space", to_string(enc->target_space())},
                   {"seed", enc->seed()}};
    write_checkpoint(dir, "encoder", header, module_state(*enc));
}

Encoder load_encoder(const fs::path& dir) {
    auto ck = read_checkpoint(dir, "encoder");
    auto config = GeneratorConfig::from_json(header_field<json>(ck.header, "config"));
    LatentSpace target;
    try {
        target = parse_latent_space(header_field<std::string>(ck.header, "target_space"));
    } catch (const Error& e) {
        fail(ErrorKind::Load, std::string("manifest field 'header.target_space' invalid: ") + e.what());
    }
    Encoder enc(config, target, header_field<uint64_t>(ck.header, "seed"));
    load_module_state(*enc, ck.tensors);
    enc->eval();
    return enc;
}

}  // namespace semstyle
