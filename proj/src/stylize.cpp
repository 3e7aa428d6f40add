#include "semstyle/stylize.hpp"

#include <cmath>

#include "semstyle/checkpoint.hpp"

namespace semstyle {

void StylePolicy::validate(int64_t layer_count) const {
    require(!style_id.empty(), ErrorKind::Config, "policy needs a style_id");
    require(truncation_psi >= 0.0 && truncation_psi <= 1.0, ErrorKind::Config, "policy psi must lie in [0, 1]");
    for (auto k : default_mix_indices)
        require(k >= 0 && k <= layer_count, ErrorKind::Config, "policy mix index outside [0, L]");
    require(pair_level_used >= 1 && pair_level_used <= 3, ErrorKind::Config, "pair_level_used must be 1, 2 or 3");
}

json StylePolicy::to_json() const {
    return {{"style_id", style_id},
            {"generator_ckpt", generator_ckpt},
            {"truncation_psi", truncation_psi},
            {"default_mix_indices", default_mix_indices},
            {"pair_level_used", pair_level_used}};
}

StylePolicy StylePolicy::from_json(const json& j) {
    StylePolicy p;
    p.style_id = header_field<std::string>(j, "style_id");
    p.generator_ckpt = header_field<std::string>(j, "generator_ckpt");
    p.truncation_psi = header_field<double>(j, "truncation_psi");
    p.default_mix_indices = header_field<std::vector<int64_t>>(j, "default_mix_indices");
    p.pair_level_used = header_field<int>(j, "pair_level_used");
    return p;
}

std::vector<int64_t> scaled_mix_indices(int64_t layer_count, const std::vector<int64_t>& indices_at_18) {
    std::vector<int64_t> out;
    for (auto k : indices_at_18) {
        auto scaled = static_cast<int64_t>(std::lround(static_cast<double>(k * layer_count) / 18.0));
        out.push_back(std::clamp<int64_t>(scaled, 0, layer_count));
    }
    return out;
}

std::string_view to_string(TailSource source) { return source == TailSource::Noise ? "noise" : "reference"; }

TailSource parse_tail_source(std::string_view name) {
    if (name == "noise") return TailSource::Noise;
    if (name == "reference") return TailSource::Reference;
    fail(ErrorKind::InvalidParameter, "mix mode must be 'noise' or 'reference', got '" + std::string(name) + "'");
}

LatentCode content_code(const torch::Tensor& image, Encoder& e_w, const Generator& g_prime, double psi) {
    require(e_w->target_space() == LatentSpace::W, ErrorKind::Config, "content encoding uses the W encoder");
    require(e_w->config() == g_prime.config(), ErrorKind::Config, "encoder and generator configs differ");
    auto w = encode(image, e_w);
    return truncate(broadcast_w(w, g_prime.config().layer_count()), psi, g_prime);
}

Stylized stylize_general(const torch::Tensor& image, double psi, Encoder& e_w, const Generator& g_prime) {
    torch::NoGradGuard guard;
    auto code = content_code(image, e_w, g_prime, psi);
    auto out = synthesize(code, g_prime);
    return {code, out};
}

Stylized stylize_multimodal_one(const torch::Tensor& image, const MixSpec& spec, Encoder& e_w,
                                const Generator& g_prime) {
    require(spec.tail_source == TailSource::Noise, ErrorKind::InvalidParameter, "multimodal mixing uses noise tails");
    torch::NoGradGuard guard;
    auto content = content_code(image, e_w, g_prime, spec.truncation_psi);
    auto z = sample_z(1, spec.seed, LatentSpace::ZPlus, g_prime.config())[0];
    auto tail = truncate(map_latent(z, g_prime), spec.truncation_psi, g_prime);
    auto code = mix_codes(content, tail, spec.k);
    auto out = synthesize(code, g_prime);
    return {code, out};
}

std::vector<Stylized> stylize_multimodal(const torch::Tensor& image, const std::vector<MixSpec>& specs, Encoder& e_w,
                                         const Generator& g_prime) {
    std::vector<Stylized> out;
    out.reserve(specs.size());
    for (const auto& spec : specs) out.push_back(stylize_multimodal_one(image, spec, e_w, g_prime));
    return out;
}

Stylized stylize_reference(const torch::Tensor& image, const StylePolicy& policy, double psi, Encoder& e_w,
                           const Generator& g_prime, const ReferenceEmbedding& ref, int64_t k) {
    require(ref.style_id == policy.style_id, ErrorKind::Conflict,
            "reference belongs to style '" + ref.style_id + "', not '" + policy.style_id + "'");
    torch::NoGradGuard guard;
    auto content = content_code(image, e_w, g_prime, psi);
    auto tail = broadcast_w(ref.w_code, g_prime.config().layer_count());
    auto code = mix_codes(content, tail, k);
    auto out = synthesize(code, g_prime);
    return {code, out};
}

}  // namespace semstyle
