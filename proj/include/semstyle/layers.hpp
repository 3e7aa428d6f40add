#pragma once

#include <torch/torch.h>

#include <cstdint>

namespace semstyle {

at::Generator make_rng(uint64_t seed);

/// Sets the runtime to one intra-op thread with deterministic kernels. Every
/// entry point (CLI, tests, python module) calls this before touching a
/// model so that reruns reproduce bit-identical checkpoints.
void configure_runtime();

/// Smooth leaky activation 0.2x + 0.8(softplus(x) - ln 2) with a sqrt(2)
/// gain: slope 0.2 far left, 1 far right, zero at the origin and
/// differentiable everywhere.
torch::Tensor smooth_lrelu(const torch::Tensor& x);
torch::Tensor upsample2x(const torch::Tensor& x);
torch::Tensor downsample2x(const torch::Tensor& x);
/// Bilinear resize of an NCHW batch to size x size; antialiased when shrinking.
torch::Tensor resize_square(const torch::Tensor& x, int64_t size);

/// Linear layer with runtime weight scaling (equalized learning rate).
///
/// Row results do not depend on how many rows share the call: small inputs
/// are padded to kMinRows before the matrix product, since the BLAS kernel
/// for very short inputs rounds differently from the blocked one.
class EqualLinearImpl : public torch::nn::Module {
public:
    static constexpr int64_t kMinRows = 8;

    EqualLinearImpl(int64_t in, int64_t out, at::Generator& rng, double bias_init = 0.0, double lr_mul = 1.0);
    torch::Tensor forward(const torch::Tensor& x);

    const torch::Tensor& weight() const { return weight_; }
    double scale() const { return scale_; }

private:
    torch::Tensor weight_;
    torch::Tensor bias_;
    double scale_;
    double lr_mul_;
};
TORCH_MODULE(EqualLinear);

class EqualConv2dImpl : public torch::nn::Module {
public:
    EqualConv2dImpl(int64_t in, int64_t out, int64_t kernel, at::Generator& rng, int64_t stride = 1, bool bias = true);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::Tensor weight_;
    torch::Tensor bias_;
    double scale_;
    int64_t stride_;
    int64_t padding_;
};
TORCH_MODULE(EqualConv2d);

/// Style-modulated convolution: per-sample input scaling from an affine map
/// of w, optional weight demodulation.
class ModulatedConv2dImpl : public torch::nn::Module {
public:
    ModulatedConv2dImpl(int64_t in, int64_t out, int64_t kernel, int64_t latent_dim, at::Generator& rng,
                        bool demodulate = true, bool upsample = false);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& w);

private:
    EqualLinear affine_{nullptr};
    torch::Tensor weight_;
    double scale_;
    int64_t padding_;
    bool demodulate_;
    bool upsample_;
};
TORCH_MODULE(ModulatedConv2d);

}  // namespace semstyle
