#pragma once

#include <torch/torch.h>

#include <memory>
#include <string_view>
#include <vector>

#include "semstyle/io.hpp"
#include "semstyle/latent.hpp"
#include "semstyle/layers.hpp"

namespace semstyle {

enum class GeneratorRole { Pretrained, UnconstrainedFinetuned, ConstrainedFinetuned };

std::string_view to_string(GeneratorRole role);
GeneratorRole parse_generator_role(std::string_view name);

/// Shape parameters shared by the generator, the encoders and the
/// discriminator. layer_count() = 2 * (log2(resolution) - 1), so 1024 px has
/// 18 style inputs and the 64 px desk-scale model has 10.
struct GeneratorConfig {
    int resolution = 64;
    int latent_dim = 512;
    int channel_base = 1024;
    int channel_max = 64;
    int mapping_layers = 4;

    int layer_count() const;
    int log2_resolution() const;
    int channels_at(int res) const;
    void validate() const;

    json to_json() const;
    static GeneratorConfig from_json(const json& j);
    bool operator==(const GeneratorConfig&) const = default;
};

class MappingNetworkImpl : public torch::nn::Module {
public:
    MappingNetworkImpl(const GeneratorConfig& config, at::Generator& rng);
    /// Maps z rows to w rows; any leading shape is kept.
    torch::Tensor forward(const torch::Tensor& z);
    EqualLinear& last_layer() { return layers_.back(); }

private:
    std::vector<EqualLinear> layers_;
};
TORCH_MODULE(MappingNetwork);

class StyledConvImpl : public torch::nn::Module {
public:
    StyledConvImpl(int64_t in, int64_t out, int64_t res, int64_t latent_dim, at::Generator& rng, bool upsample);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& w);

private:
    ModulatedConv2d conv_{nullptr};
    torch::Tensor noise_strength_;
    torch::Tensor bias_;
    torch::Tensor noise_;
};
TORCH_MODULE(StyledConv);

class ToRGBImpl : public torch::nn::Module {
public:
    ToRGBImpl(int64_t in, int64_t latent_dim, at::Generator& rng);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& w, const torch::Tensor& skip);

private:
    ModulatedConv2d conv_{nullptr};
    torch::Tensor bias_;
};
TORCH_MODULE(ToRGB);

/// Constant 4x4 input, one styled conv at 4x4, then two styled convs per
/// doubling; RGB outputs are accumulated through upsampled skips. Noise
/// inputs are fixed buffers drawn at construction, so synthesis is a pure
/// function of (w+, parameters).
class SynthesisNetworkImpl : public torch::nn::Module {
public:
    SynthesisNetworkImpl(const GeneratorConfig& config, at::Generator& rng);
    /// wplus: [N, L, d] -> images [N, 3, R, R] in [-1, 1].
    torch::Tensor forward(const torch::Tensor& wplus);

private:
    torch::Tensor const_input_;
    StyledConv conv4_{nullptr};
    ToRGB rgb4_{nullptr};
    std::vector<StyledConv> convs_;
    std::vector<ToRGB> rgbs_;
    int64_t layer_count_;
};
TORCH_MODULE(SynthesisNetwork);

class GeneratorNetImpl : public torch::nn::Module {
public:
    GeneratorNetImpl(const GeneratorConfig& config, at::Generator& rng);
    MappingNetwork mapping{nullptr};
    SynthesisNetwork synthesis{nullptr};
    torch::Tensor w_mean;
};

/// StyleGAN-style generator: mapping network, synthesis network and the
/// cached mean latent. Move-only; clone() makes an independent deep copy.
class Generator {
public:
    static constexpr int64_t kMeanSamples = 10000;

    explicit Generator(const GeneratorConfig& config, uint64_t seed = 0,
                       GeneratorRole role = GeneratorRole::Pretrained);
    Generator(Generator&&) noexcept = default;
    Generator& operator=(Generator&&) noexcept = default;
    Generator(const Generator&) = delete;
    Generator& operator=(const Generator&) = delete;

    Generator clone() const;

    const GeneratorConfig& config() const { return config_; }
    GeneratorRole role() const { return role_; }
    void set_role(GeneratorRole role) { role_ = role; }
    uint64_t seed() const { return seed_; }

    /// [..., d] z rows -> [..., d] w rows.
    torch::Tensor map(const torch::Tensor& z) const;
    /// [N, L, d] -> [N, 3, R, R].
    torch::Tensor synthesize_batch(const torch::Tensor& wplus) const;
    /// Z rows [N, d] through mapping, broadcast to every layer, then synthesis.
    torch::Tensor generate(const torch::Tensor& z) const;

    /// Monte-Carlo mean of mapped standard-normal samples.
    void compute_w_mean(uint64_t seed, int64_t count = kMeanSamples);
    torch::Tensor w_mean() const { return net_->w_mean; }
    uint64_t w_mean_seed() const { return w_mean_seed_; }
    int64_t w_mean_count() const { return w_mean_count_; }

    std::vector<torch::Tensor> parameters() const { return net_->parameters(); }
    std::vector<torch::Tensor> mapping_parameters() const { return net_->mapping->parameters(); }
    std::vector<torch::Tensor> synthesis_parameters() const { return net_->synthesis->parameters(); }
    void set_requires_grad(bool on) const;
    /// Weight of the final mapping layer as applied at runtime, [d_out, d_in].
    torch::Tensor mapping_output_weight() const;

    torch::nn::Module& module() const { return *net_; }

private:
    friend Generator load_generator(const fs::path& dir);

    GeneratorConfig config_;
    GeneratorRole role_;
    uint64_t seed_;
    uint64_t w_mean_seed_ = 0;
    int64_t w_mean_count_ = 0;
    std::shared_ptr<GeneratorNetImpl> net_;
};

/// Mean of a batch of mapped samples accumulated in double precision.
torch::Tensor mapped_mean(const Generator& gen, const torch::Tensor& z, int64_t chunk = 1000);

// Latent algebra ----------------------------------------------------------

LatentCode map_latent(const LatentCode& code, const Generator& gen);
/// w' = w_mean + psi * (w - w_mean) row-wise; psi == 1 returns the input
/// unchanged.
LatentCode truncate(const LatentCode& code, double psi, const Generator& gen);
torch::Tensor truncate_rows(const torch::Tensor& w, double psi, const torch::Tensor& w_mean);
/// WPlus code -> 3xRxR image. A W code conditions every layer on its row.
torch::Tensor synthesize(const LatentCode& code, const Generator& gen);
LatentCode broadcast_w(const LatentCode& code, int64_t layer_count);
/// Rows [0, k) from content, rows [k, L) from tail.
LatentCode mix_codes(const LatentCode& content, const LatentCode& tail, int64_t k);
std::vector<LatentCode> sample_z(int64_t count, uint64_t seed, LatentSpace space, const GeneratorConfig& config);

void save_generator(const Generator& gen, const fs::path& dir);
Generator load_generator(const fs::path& dir);

}  // namespace semstyle
