#pragma once

#include <torch/torch.h>

#include <string>
#include <vector>

#include "semstyle/encoder.hpp"
#include "semstyle/generator.hpp"
#include "semstyle/inversion.hpp"

namespace semstyle {

/// Per-style inference settings, stored as `<workspace>/<style>/policy.json`.
struct StylePolicy {
    std::string style_id;
    std::string generator_ckpt;  // relative to the workspace root
    double truncation_psi = 0.7;
    std::vector<int64_t> default_mix_indices;
    int pair_level_used = 2;

    void validate(int64_t layer_count) const;
    json to_json() const;
    static StylePolicy from_json(const json& j);
};

/// Mixing indices of the 18-layer model (3, 6, 9, 12) scaled to `layer_count`.
std::vector<int64_t> scaled_mix_indices(int64_t layer_count, const std::vector<int64_t>& indices_at_18 = {3, 6, 9, 12});

enum class TailSource { Noise, Reference };
std::string_view to_string(TailSource source);
TailSource parse_tail_source(std::string_view name);

struct MixSpec {
    int64_t k = 0;
    TailSource tail_source = TailSource::Noise;
    double truncation_psi = 1.0;
    uint64_t seed = 0;
    std::string reference_id;
};

struct Stylized {
    LatentCode code;  // W+ code entering synthesis
    torch::Tensor image;
};

/// Content code: encode with the W encoder, broadcast to every layer,
/// truncate towards G' w_mean by psi.
LatentCode content_code(const torch::Tensor& image, Encoder& e_w, const Generator& g_prime, double psi);

/// synthesize(truncate(broadcast(E_w(image)), psi), G').
Stylized stylize_general(const torch::Tensor& image, double psi, Encoder& e_w, const Generator& g_prime);

/// Noise tail: truncate(mapping(Z+ sample drawn with spec.seed), spec.psi);
/// content uses the same psi.
Stylized stylize_multimodal_one(const torch::Tensor& image, const MixSpec& spec, Encoder& e_w,
                                const Generator& g_prime);
std::vector<Stylized> stylize_multimodal(const torch::Tensor& image, const std::vector<MixSpec>& specs, Encoder& e_w,
                                         const Generator& g_prime);

/// Reference tail: broadcast(ref.w_code), untruncated, so k = 0 reproduces
/// the stored reference reconstruction.
Stylized stylize_reference(const torch::Tensor& image, const StylePolicy& policy, double psi, Encoder& e_w,
                           const Generator& g_prime, const ReferenceEmbedding& ref, int64_t k);

}  // namespace semstyle
