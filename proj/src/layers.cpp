#include "semstyle/layers.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>

namespace semstyle {

namespace F = torch::nn::functional;

at::Generator make_rng(uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

void configure_runtime() {
    torch::set_num_threads(1);
    at::globalContext().setDeterministicAlgorithms(true, /*warn_only=*/true);
}

torch::Tensor smooth_lrelu(const torch::Tensor& x) {
    static const double kLog2 = std::log(2.0);
    return (0.2 * x + 0.8 * (F::softplus(x) - kLog2)) * std::sqrt(2.0);
}

torch::Tensor upsample2x(const torch::Tensor& x) {
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{x.size(2) * 2, x.size(3) * 2})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
}

torch::Tensor downsample2x(const torch::Tensor& x) { return F::avg_pool2d(x, F::AvgPool2dFuncOptions(2)); }

torch::Tensor resize_square(const torch::Tensor& x, int64_t size) {
    if (x.size(2) == size && x.size(3) == size) return x;
    bool shrink = x.size(2) > size;
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{size, size})
                                 .mode(torch::kBilinear)
                                 .align_corners(false)
                                 .antialias(shrink));
}

EqualLinearImpl::EqualLinearImpl(int64_t in, int64_t out, at::Generator& rng, double bias_init, double lr_mul)
    : scale_(lr_mul / std::sqrt(static_cast<double>(in))), lr_mul_(lr_mul) {
    weight_ = register_parameter("weight", torch::randn({out, in}, rng).div_(lr_mul));
    bias_ = register_parameter("bias", torch::full({out}, bias_init / lr_mul));
}

torch::Tensor EqualLinearImpl::forward(const torch::Tensor& x) {
    auto flat = x.reshape({-1, x.size(-1)});
    auto rows = flat.size(0);
    if (rows < kMinRows) flat = torch::cat({flat, flat.new_zeros({kMinRows - rows, flat.size(1)})});
    auto y = F::linear(flat, weight_ * scale_, bias_ * lr_mul_);
    if (rows < kMinRows) y = y.slice(0, 0, rows);
    auto shape = x.sizes().vec();
    shape.back() = weight_.size(0);
    return y.reshape(shape);
}

EqualConv2dImpl::EqualConv2dImpl(int64_t in, int64_t out, int64_t kernel, at::Generator& rng, int64_t stride, bool bias)
    : scale_(1.0 / std::sqrt(static_cast<double>(in * kernel * kernel))), stride_(stride), padding_(kernel / 2) {
    weight_ = register_parameter("weight", torch::randn({out, in, kernel, kernel}, rng));
    if (bias) bias_ = register_parameter("bias", torch::zeros({out}));
}

torch::Tensor EqualConv2dImpl::forward(const torch::Tensor& x) {
    return torch::conv2d(x, weight_ * scale_, bias_, stride_, padding_);
}

ModulatedConv2dImpl::ModulatedConv2dImpl(int64_t in, int64_t out, int64_t kernel, int64_t latent_dim, at::Generator& rng,
                                         bool demodulate, bool upsample)
    : scale_(1.0 / std::sqrt(static_cast<double>(in * kernel * kernel))),
      padding_(kernel / 2),
      demodulate_(demodulate),
      upsample_(upsample) {
    affine_ = register_module("affine", EqualLinear(latent_dim, in, rng, 1.0));
    weight_ = register_parameter("weight", torch::randn({out, in, kernel, kernel}, rng));
}

torch::Tensor ModulatedConv2dImpl::forward(const torch::Tensor& x, const torch::Tensor& w) {
    auto style = affine_->forward(w);  // [N, in]
    auto weight = weight_ * scale_;
    auto h = upsample_ ? upsample2x(x) : x;
    h = h * style.unsqueeze(-1).unsqueeze(-1);
    h = torch::conv2d(h, weight, {}, 1, padding_);
    if (demodulate_) {
        auto wsq = weight.pow(2).sum({2, 3});                       // [out, in]
        auto dcoef = torch::rsqrt(style.pow(2).matmul(wsq.t()) + 1e-8);  // [N, out]
        h = h * dcoef.unsqueeze(-1).unsqueeze(-1);
    }
    return h;
}

}  // namespace semstyle
