#pragma once

#include <torch/torch.h>

#include <vector>

#include "semstyle/generator.hpp"
#include "semstyle/losses.hpp"

namespace semstyle {

/// Collapses a feature map to a single style vector with stride-2
/// convolutions followed by a linear layer.
class StyleHeadImpl : public torch::nn::Module {
public:
    StyleHeadImpl(int64_t width, int64_t spatial, int64_t latent_dim, at::Generator& rng);
    torch::Tensor forward(const torch::Tensor& features);

private:
    std::vector<EqualConv2d> convs_;
    EqualLinear linear_{nullptr};
};
TORCH_MODULE(StyleHead);

/// Feature-pyramid image encoder. Rows [0, coarse_end) read the coarsest
/// pyramid level (R/16), rows up to medium_end the middle one (R/8), the
/// remaining rows the finest (R/4), mirroring how synthesis layers go from
/// structure to texture. The W variant has a single head on the coarse level.
class EncoderNetImpl : public torch::nn::Module {
public:
    static constexpr int64_t kPyramidWidth = 64;

    EncoderNetImpl(const GeneratorConfig& config, LatentSpace target, uint64_t seed);

    /// [N, 3, R, R] -> [N, rows, d]; rows is 1 for W and L otherwise.
    torch::Tensor forward(const torch::Tensor& images);

    const GeneratorConfig& config() const { return config_; }
    LatentSpace target_space() const { return target_; }
    uint64_t seed() const { return seed_; }
    int64_t rows() const { return target_ == LatentSpace::W ? 1 : config_.layer_count(); }
    int64_t coarse_end() const { return coarse_end_; }
    int64_t medium_end() const { return medium_end_; }
    /// Offset added to W / W+ outputs so an untrained encoder starts at the
    /// average face. Z+ outputs carry no offset.
    void set_latent_offset(const torch::Tensor& w_mean);
    std::vector<torch::Tensor> head_parameters();

private:
    GeneratorConfig config_;
    LatentSpace target_;
    uint64_t seed_;
    int64_t coarse_end_;
    int64_t medium_end_;
    EqualConv2d from_rgb_{nullptr};
    std::vector<EqualConv2d> body_;
    EqualConv2d lateral_coarse_{nullptr}, lateral_medium_{nullptr}, lateral_fine_{nullptr};
    std::vector<StyleHead> heads_;
    torch::Tensor offset_;
};
TORCH_MODULE(EncoderNet);

using Encoder = EncoderNet;

/// Fresh encoder for `gen`'s config; W / W+ outputs are offset by gen's w_mean.
Encoder make_encoder(LatentSpace target, const Generator& gen, uint64_t seed);

/// Encodes one [3, R, R] image.
LatentCode encode(const torch::Tensor& image, Encoder& enc);

/// Decodes an encoder output batch [N, rows, d] through `gen` (mapping first
/// for Z+, broadcast for W).
torch::Tensor decode_encoded(const torch::Tensor& codes, LatentSpace space, const Generator& gen);

struct EncoderTrainConfig {
    int steps = 2000;
    int batch_size = 4;
    double lr = 1e-3;
    double lambda_l2 = 1.0;
    double lambda_lpips = 1.0;
    double lambda_id = 0.1;
    uint64_t seed = 0;
};

struct EncoderTrainReport {
    std::vector<double> losses;  // one entry per step
};

/// Trains `enc` to reconstruct `images` through the frozen generator with
/// pixel L2 + LPIPS + lambda_id * identity. Raises NumericAbort on a
/// non-finite loss.
EncoderTrainReport train_encoder(Encoder& enc, const Generator& gen, const torch::Tensor& images,
                                 const EncoderTrainConfig& cfg, LossNets& nets, const StepLogger& log = {});

void save_encoder(Encoder& enc, const fs::path& dir);
Encoder load_encoder(const fs::path& dir);

}  // namespace semstyle
