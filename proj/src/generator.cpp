#include "semstyle/generator.hpp"

#include <bit>
#include <cmath>

#include "semstyle/checkpoint.hpp"

namespace semstyle {

std::string_view to_string(GeneratorRole role) {
    switch (role) {
        case GeneratorRole::Pretrained: return "pretrained";
        case GeneratorRole::UnconstrainedFinetuned: return "unconstrained_finetuned";
        case GeneratorRole::ConstrainedFinetuned: return "constrained_finetuned";
    }
    return "?";
}

GeneratorRole parse_generator_role(std::string_view name) {
    if (name == "pretrained") return GeneratorRole::Pretrained;
    if (name == "unconstrained_finetuned") return GeneratorRole::UnconstrainedFinetuned;
    if (name == "constrained_finetuned") return GeneratorRole::ConstrainedFinetuned;
    fail(ErrorKind::Load, "unknown generator role '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------

int GeneratorConfig::log2_resolution() const { return std::countr_zero(static_cast<unsigned>(resolution)); }

int GeneratorConfig::layer_count() const { return 2 * (log2_resolution() - 1); }

int GeneratorConfig::channels_at(int res) const { return std::max(1, std::min(channel_base / res, channel_max)); }

void GeneratorConfig::validate() const {
    require(resolution >= 16 && std::has_single_bit(static_cast<unsigned>(resolution)), ErrorKind::Config,
            "resolution must be a power of two >= 16, got " + std::to_string(resolution));
    require(latent_dim > 0, ErrorKind::Config, "latent_dim must be positive");
    require(channel_base > 0 && channel_max > 0, ErrorKind::Config, "channel widths must be positive");
    require(mapping_layers >= 1, ErrorKind::Config, "mapping_layers must be >= 1");
}

json GeneratorConfig::to_json() const {
    return {{"resolution", resolution},
            {"latent_dim", latent_dim},
            {"channel_base", channel_base},
            {"channel_max", channel_max},
            {"mapping_layers", mapping_layers},
            {"layer_count", layer_count()}};
}

GeneratorConfig GeneratorConfig::from_json(const json& j) {
    GeneratorConfig c;
    c.resolution = header_field<int>(j, "resolution");
    c.latent_dim = header_field<int>(j, "latent_dim");
    c.channel_base = header_field<int>(j, "channel_base");
    c.channel_max = header_field<int>(j, "channel_max");
    c.mapping_layers = header_field<int>(j, "mapping_layers");
    try {
        c.validate();
    } catch (const Error& e) {
        fail(ErrorKind::Load, std::string("manifest field 'config' invalid: ") + e.what());
    }
    if (j.contains("layer_count") && j["layer_count"].get<int>() != c.layer_count())
        fail(ErrorKind::Load, "manifest field 'config.layer_count' inconsistent with resolution");
    return c;
}

// ---------------------------------------------------------------------------

namespace {

torch::Tensor pixel_norm(const torch::Tensor& x) { return x * torch::rsqrt(x.pow(2).mean(-1, true) + 1e-8); }

}  // namespace

MappingNetworkImpl::MappingNetworkImpl(const GeneratorConfig& config, at::Generator& rng) {
    for (int i = 0; i < config.mapping_layers; ++i) {
        layers_.push_back(register_module("fc" + std::to_string(i),
                                          EqualLinear(config.latent_dim, config.latent_dim, rng, 0.0, 0.01)));
    }
}

torch::Tensor MappingNetworkImpl::forward(const torch::Tensor& z) {
    auto x = pixel_norm(z);
    for (auto& layer : layers_) x = smooth_lrelu(layer->forward(x));
    return x;
}

StyledConvImpl::StyledConvImpl(int64_t in, int64_t out, int64_t res, int64_t latent_dim, at::Generator& rng,
                               bool upsample) {
    conv_ = register_module("conv", ModulatedConv2d(in, out, 3, latent_dim, rng, true, upsample));
    noise_strength_ = register_parameter("noise_strength", torch::zeros({1}));
    bias_ = register_parameter("bias", torch::zeros({out}));
    noise_ = register_buffer("noise", torch::randn({1, 1, res, res}, rng));
}

torch::Tensor StyledConvImpl::forward(const torch::Tensor& x, const torch::Tensor& w) {
    auto h = conv_->forward(x, w);
    h = h + noise_strength_ * noise_ + bias_.view({1, -1, 1, 1});
    return smooth_lrelu(h);
}

ToRGBImpl::ToRGBImpl(int64_t in, int64_t latent_dim, at::Generator& rng) {
    conv_ = register_module("conv", ModulatedConv2d(in, 3, 1, latent_dim, rng, false, false));
    bias_ = register_parameter("bias", torch::zeros({3}));
}

torch::Tensor ToRGBImpl::forward(const torch::Tensor& x, const torch::Tensor& w, const torch::Tensor& skip) {
    auto rgb = conv_->forward(x, w) + bias_.view({1, -1, 1, 1});
    return skip.defined() ? rgb + upsample2x(skip) : rgb;
}

SynthesisNetworkImpl::SynthesisNetworkImpl(const GeneratorConfig& config, at::Generator& rng)
    : layer_count_(config.layer_count()) {
    const int64_t d = config.latent_dim;
    const int64_t c4 = config.channels_at(4);
    const_input_ = register_parameter("const", torch::randn({1, c4, 4, 4}, rng));
    conv4_ = register_module("conv4", StyledConv(c4, c4, 4, d, rng, false));
    rgb4_ = register_module("rgb4", ToRGB(c4, d, rng));
    int64_t in = c4;
    for (int res = 8; res <= config.resolution; res *= 2) {
        const int64_t out = config.channels_at(res);
        auto tag = std::to_string(res);
        convs_.push_back(register_module("conv" + tag + "_up", StyledConv(in, out, res, d, rng, true)));
        convs_.push_back(register_module("conv" + tag, StyledConv(out, out, res, d, rng, false)));
        rgbs_.push_back(register_module("rgb" + tag, ToRGB(out, d, rng)));
        in = out;
    }
}

torch::Tensor SynthesisNetworkImpl::forward(const torch::Tensor& wplus) {
    require(wplus.dim() == 3 && wplus.size(1) == layer_count_, ErrorKind::InvalidCode,
            "synthesis expects [N, " + std::to_string(layer_count_) + ", d] codes");
    auto n = wplus.size(0);
    auto x = const_input_.expand({n, -1, -1, -1});
    x = conv4_->forward(x, wplus.select(1, 0));
    auto rgb = rgb4_->forward(x, wplus.select(1, 1), {});
    int64_t idx = 1;
    for (size_t b = 0; b < rgbs_.size(); ++b) {
        x = convs_[2 * b]->forward(x, wplus.select(1, idx));
        x = convs_[2 * b + 1]->forward(x, wplus.select(1, idx + 1));
        rgb = rgbs_[b]->forward(x, wplus.select(1, idx + 2), rgb);
        idx += 2;
    }
    return torch::tanh(rgb);
}

GeneratorNetImpl::GeneratorNetImpl(const GeneratorConfig& config, at::Generator& rng) {
    mapping = register_module("mapping", MappingNetwork(config, rng));
    synthesis = register_module("synthesis", SynthesisNetwork(config, rng));
    w_mean = register_buffer("w_mean", torch::zeros({config.latent_dim}));
}

// ---------------------------------------------------------------------------

Generator::Generator(const GeneratorConfig& config, uint64_t seed, GeneratorRole role)
    : config_(config), role_(role), seed_(seed) {
    config_.validate();
    auto rng = make_rng(seed);
    net_ = std::make_shared<GeneratorNetImpl>(config_, rng);
}

Generator Generator::clone() const {
    Generator copy(config_, seed_, role_);
    copy.w_mean_seed_ = w_mean_seed_;
    copy.w_mean_count_ = w_mean_count_;
    load_module_state(*copy.net_, module_state(*net_));
    return copy;
}

torch::Tensor Generator::map(const torch::Tensor& z) const {
    require(z.size(-1) == config_.latent_dim, ErrorKind::InvalidCode, "z has the wrong latent dimension");
    return net_->mapping->forward(z);
}

torch::Tensor Generator::synthesize_batch(const torch::Tensor& wplus) const { return net_->synthesis->forward(wplus); }

torch::Tensor Generator::generate(const torch::Tensor& z) const {
    auto w = map(z);
    return synthesize_batch(w.unsqueeze(1).expand({-1, config_.layer_count(), -1}));
}

torch::Tensor mapped_mean(const Generator& gen, const torch::Tensor& z, int64_t chunk) {
    torch::NoGradGuard guard;
    auto acc = torch::zeros({z.size(1)}, torch::kFloat64);
    for (int64_t start = 0; start < z.size(0); start += chunk) {
        auto end = std::min(start + chunk, z.size(0));
        acc += gen.map(z.slice(0, start, end)).to(torch::kFloat64).sum(0);
    }
    return (acc / static_cast<double>(z.size(0))).to(torch::kFloat32);
}

void Generator::compute_w_mean(uint64_t seed, int64_t count) {
    require(count >= 1, ErrorKind::InvalidParameter, "w_mean sample count must be >= 1");
    auto rng = make_rng(seed);
    auto z = torch::randn({count, config_.latent_dim}, rng);
    auto mean = mapped_mean(*this, z);
    torch::NoGradGuard guard;
    net_->w_mean.copy_(mean);
    w_mean_seed_ = seed;
    w_mean_count_ = count;
}

void Generator::set_requires_grad(bool on) const {
    for (auto& p : net_->parameters()) p.set_requires_grad(on);
}

torch::Tensor Generator::mapping_output_weight() const {
    auto& last = net_->mapping->last_layer();
    return (last->weight() * last->scale()).detach();
}

// ---------------------------------------------------------------------------

namespace {

void check_dim(const LatentCode& code, const GeneratorConfig& config) {
    require(code.dim() == config.latent_dim, ErrorKind::InvalidCode,
            std::string(to_string(code.space())) + " code has dimension " + std::to_string(code.dim()) +
                ", generator expects " + std::to_string(config.latent_dim));
    if (is_extended(code.space()))
        require(code.rows() == config.layer_count(), ErrorKind::InvalidCode,
                std::string(to_string(code.space())) + " code has " + std::to_string(code.rows()) +
                    " rows, generator expects " + std::to_string(config.layer_count()));
}

}  // namespace

LatentCode map_latent(const LatentCode& code, const Generator& gen) {
    require(code.space() == LatentSpace::Z || code.space() == LatentSpace::ZPlus, ErrorKind::InvalidCode,
            "map_latent expects a Z or ZPlus code");
    check_dim(code, gen.config());
    auto out = code.space() == LatentSpace::Z ? LatentSpace::W : LatentSpace::WPlus;
    return LatentCode(out, gen.map(code.values()));
}

torch::Tensor truncate_rows(const torch::Tensor& w, double psi, const torch::Tensor& w_mean) {
    require(psi >= 0.0 && psi <= 1.0, ErrorKind::InvalidParameter, "truncation psi must lie in [0, 1]");
    if (psi == 1.0) return w;
    return w_mean + psi * (w - w_mean);
}

LatentCode truncate(const LatentCode& code, double psi, const Generator& gen) {
    require(code.space() == LatentSpace::W || code.space() == LatentSpace::WPlus, ErrorKind::InvalidCode,
            "truncate expects a W or WPlus code");
    check_dim(code, gen.config());
    return LatentCode(code.space(), truncate_rows(code.values(), psi, gen.w_mean()));
}

torch::Tensor synthesize(const LatentCode& code, const Generator& gen) {
    const auto layers = gen.config().layer_count();
    if (code.space() == LatentSpace::W) {
        check_dim(code, gen.config());
        return gen.synthesize_batch(code.values().unsqueeze(0).expand({1, layers, -1}))[0];
    }
    require(code.space() == LatentSpace::WPlus, ErrorKind::InvalidCode, "synthesize expects a WPlus code");
    check_dim(code, gen.config());
    return gen.synthesize_batch(code.values().unsqueeze(0))[0];
}

LatentCode broadcast_w(const LatentCode& code, int64_t layer_count) {
    require(code.space() == LatentSpace::W, ErrorKind::InvalidCode, "broadcast_w expects a W code");
    require(layer_count >= 1, ErrorKind::InvalidParameter, "layer_count must be >= 1");
    return LatentCode(LatentSpace::WPlus, code.values().expand({layer_count, -1}).contiguous());
}

LatentCode mix_codes(const LatentCode& content, const LatentCode& tail, int64_t k) {
    require(content.space() == LatentSpace::WPlus && tail.space() == LatentSpace::WPlus, ErrorKind::InvalidCode,
            "mix_codes expects two WPlus codes");
    require(content.rows() == tail.rows() && content.dim() == tail.dim(), ErrorKind::InvalidCode,
            "mix_codes operands differ in shape");
    const auto layers = content.rows();
    require(k >= 0 && k <= layers, ErrorKind::InvalidParameter,
            "mix index " + std::to_string(k) + " outside [0, " + std::to_string(layers) + "]");
    auto rows = torch::cat({content.values().slice(0, 0, k), tail.values().slice(0, k, layers)});
    return LatentCode(LatentSpace::WPlus, rows);
}

std::vector<LatentCode> sample_z(int64_t count, uint64_t seed, LatentSpace space, const GeneratorConfig& config) {
    require(count >= 1, ErrorKind::InvalidParameter, "sample count must be >= 1");
    require(space == LatentSpace::Z || space == LatentSpace::ZPlus, ErrorKind::InvalidParameter,
            "sample_z draws Z or ZPlus codes");
    const int64_t rows = space == LatentSpace::Z ? 1 : config.layer_count();
    auto rng = make_rng(seed);
    auto all = torch::randn({count, rows, config.latent_dim}, rng);
    std::vector<LatentCode> out;
    out.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) out.emplace_back(space, all[i].clone());
    return out;
}

void save_generator(const Generator& gen, const fs::path& dir) {
    json header = {{"config", gen.config().to_json()},
                   {"role", to_string(gen.role())},
                   {"seed", gen.seed()},
                   {"w_mean_seed", gen.w_mean_seed()},
                   {"w_mean_count", gen.w_mean_count()}};
    write_checkpoint(dir, "generator", header, module_state(gen.module()));
}

Generator load_generator(const fs::path& dir) {
    auto ck = read_checkpoint(dir, "generator");
    auto config = GeneratorConfig::from_json(header_field<json>(ck.header, "config"));
    auto role = parse_generator_role(header_field<std::string>(ck.header, "role"));
    Generator gen(config, header_field<uint64_t>(ck.header, "seed"), role);
    gen.w_mean_seed_ = header_field<uint64_t>(ck.header, "w_mean_seed");
    gen.w_mean_count_ = header_field<int64_t>(ck.header, "w_mean_count");
    load_module_state(*gen.net_, ck.tensors);
    return gen;
}

}  // namespace semstyle
