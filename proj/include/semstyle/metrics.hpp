#pragma once

#include <torch/torch.h>

#include <string>

#include "semstyle/generator.hpp"
#include "semstyle/losses.hpp"

namespace semstyle {

/// N x m feature matrix (double precision) tagged with the extractor that
/// produced it.
struct FeatureSet {
    torch::Tensor features;
    std::string extractor_id;

    FeatureSet(torch::Tensor features, std::string extractor_id);
    int64_t size() const { return features.size(0); }
    int64_t dim() const { return features.size(1); }
};

struct FidResult {
    double value = 0.0;
    /// Eigenvalues of the symmetrized covariance product that were negative
    /// beyond tolerance and clamped to zero.
    int clamped = 0;
};

/// Frechet distance between Gaussian fits of two feature sets:
/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)). The cross term is
/// evaluated as Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)) with eigenvalues floored
/// at zero.
FidResult fid_detailed(const FeatureSet& a, const FeatureSet& b);
double fid(const FeatureSet& a, const FeatureSet& b);

/// Discriminator penultimate features of an image batch.
FeatureSet extract_features(const torch::Tensor& images, Discriminator& disc, int64_t chunk = 32);

/// Identifier of a feature extractor derived from its weights.
std::string extractor_id(Discriminator& disc);

/// Mean LPIPS over aligned pairs.
double perceptual_distance(const torch::Tensor& sources, const torch::Tensor& outputs, PerceptualNet& net,
                           int64_t chunk = 16);

/// Mean (1 - cos) of identity embeddings over aligned pairs.
double identity_distance(const torch::Tensor& sources, const torch::Tensor& outputs, IdentityNet& net,
                         int64_t chunk = 16);

/// Mean LPIPS between G(z_i) and G'(z_i) over n shared samples drawn with `seed`.
double semantic_distance(const Generator& g, const Generator& g_prime, int64_t n, uint64_t seed, PerceptualNet& net,
                         int64_t chunk = 8);

/// Images from `count` Z samples drawn with `seed`, truncated by psi.
torch::Tensor sample_images(const Generator& gen, int64_t count, uint64_t seed, double psi = 1.0, int64_t chunk = 16);

/// Report record {metric, value, extractor_id, n, seed}.
json metric_record(const std::string& metric, double value, const std::string& extractor, int64_t n, uint64_t seed);

}  // namespace semstyle
