#include "semstyle/inversion.hpp"

#include <unistd.h>

#include <Eigen/Eigenvalues>
#include <chrono>
#include <cmath>
#include <ctime>

namespace semstyle {

SefaBasis sefa_basis(const Generator& gen, int64_t k) {
    const int64_t d = gen.config().latent_dim;
    require(k >= 1 && k <= d, ErrorKind::InvalidParameter,
            "basis size k must lie in [1, " + std::to_string(d) + "], got " + std::to_string(k));
    auto a = gen.mapping_output_weight().to(torch::kFloat64).contiguous();
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> A(a.data_ptr<double>(), d,
                                                                                                 a.size(1));
    Eigen::MatrixXd gram = A * A.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram);
    require(solver.info() == Eigen::Success, ErrorKind::NumericAbort, "eigendecomposition of the mapping weight failed");

    auto basis = torch::empty({d, k}, torch::kFloat64);
    auto values = torch::empty({k}, torch::kFloat64);
    auto b = basis.accessor<double, 2>();
    for (int64_t j = 0; j < k; ++j) {
        // Eigen sorts ascending.
        const Eigen::Index col = d - 1 - j;
        Eigen::VectorXd v = solver.eigenvectors().col(col);
        Eigen::Index arg;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) v = -v;  // fixed sign convention
        for (int64_t i = 0; i < d; ++i) b[i][j] = v(i);
        values[j] = solver.eigenvalues()(col);
    }
    return {basis.to(torch::kFloat32), values.to(torch::kFloat32), gen.w_mean().clone()};
}

LatentCode v_to_w(const LatentCode& v, const SefaBasis& basis) {
    require(v.space() == LatentSpace::V && v.dim() == basis.k(), ErrorKind::InvalidCode,
            "V code must have one row of " + std::to_string(basis.k()) + " coefficients");
    return LatentCode(LatentSpace::W, (basis.anchor + torch::mv(basis.basis, v.values()[0])).unsqueeze(0));
}

torch::Tensor decode_variable(const torch::Tensor& variable, LatentSpace space, const Generator& gen,
                              const SefaBasis* basis) {
    const auto layers = gen.config().layer_count();
    switch (space) {
        case LatentSpace::ZPlus: return gen.synthesize_batch(gen.map(variable).unsqueeze(0));
        case LatentSpace::WPlus: return gen.synthesize_batch(variable.unsqueeze(0));
        case LatentSpace::W: return gen.synthesize_batch(variable.unsqueeze(0).expand({1, layers, -1}));
        case LatentSpace::V: {
            require(basis != nullptr, ErrorKind::InvalidParameter, "V-space decoding needs a basis");
            auto w = basis->anchor + torch::mv(basis->basis, variable[0]);
            return gen.synthesize_batch(w.view({1, 1, -1}).expand({1, layers, -1}));
        }
        case LatentSpace::Z: break;
    }
    fail(ErrorKind::InvalidParameter, "inversion targets ZPlus, W, WPlus or V");
}

torch::Tensor inversion_objective(const torch::Tensor& variable, const torch::Tensor& image, LatentSpace space,
                                  const Generator& gen, const SefaBasis* basis, double lambda_id, LossNets& nets) {
    return semantic_loss(decode_variable(variable, space, gen, basis), image.dim() == 3 ? image.unsqueeze(0) : image,
                         lambda_id, nets);
}

torch::Tensor inversion_start(LatentSpace space, const Generator& gen, const SefaBasis* basis) {
    const auto& c = gen.config();
    switch (space) {
        case LatentSpace::ZPlus: return torch::zeros({c.layer_count(), c.latent_dim});
        case LatentSpace::W: return gen.w_mean().unsqueeze(0).clone();
        case LatentSpace::WPlus: return gen.w_mean().unsqueeze(0).expand({c.layer_count(), -1}).clone();
        case LatentSpace::V:
            require(basis != nullptr, ErrorKind::InvalidParameter, "V-space inversion needs a basis");
            return torch::zeros({1, basis->k()});
        case LatentSpace::Z: break;
    }
    fail(ErrorKind::InvalidParameter, "inversion targets ZPlus, W, WPlus or V");
}

InversionResult invert(const torch::Tensor& image, const Generator& gen, LatentSpace space,
                       const InversionConfig& cfg, LossNets& nets, const SefaBasis* basis) {
    require(cfg.iters >= 1, ErrorKind::InvalidParameter, "inversion needs iters >= 1");
    require(image.dim() == 3 && image.size(1) == gen.config().resolution, ErrorKind::InvalidImage,
            "reference image must be [3, R, R] at the generator resolution");
    gen.set_requires_grad(false);
    auto x = inversion_start(space, gen, basis).requires_grad_(true);
    json start = {{"space", to_string(space)},
                  {"init", space == LatentSpace::W || space == LatentSpace::WPlus ? "w_mean" : "zeros"},
                  {"seed", cfg.seed}};
    torch::optim::Adam opt({x}, torch::optim::AdamOptions(cfg.lr).betas({0.0, 0.99}));
    std::vector<double> curve;
    torch::Tensor best = x.detach().clone();
    double best_loss = INFINITY;
    int best_it = 0;
    for (int it = 0; it <= cfg.iters; ++it) {
        auto loss = inversion_objective(x, image, space, gen, basis, cfg.lambda_id, nets);
        const double value = loss.item<double>();
        if (!std::isfinite(value))
            fail(ErrorKind::NumericAbort, "inversion loss non-finite at iterate " + std::to_string(it));
        curve.push_back(value);
        if (value < best_loss) {
            best_loss = value;
            best = x.detach().clone();
            best_it = it;
        }
        if (it == cfg.iters) break;
        opt.zero_grad();
        loss.backward();
        opt.step();
        if (cfg.progress) cfg.progress(it + 1, cfg.iters);
    }
    torch::NoGradGuard guard;
    auto recon = decode_variable(best, space, gen, basis)[0];
    return {LatentCode(space, best), recon, std::move(curve), best_it, start};
}

// ---------------------------------------------------------------------------

std::string reference_image_hash(const torch::Tensor& image) { return tensor_digest(quantize_8bit(image)); }

ReferenceCache::ReferenceCache(fs::path root) : root_(std::move(root)) {}

std::optional<ReferenceEmbedding> ReferenceCache::get(const std::string& style_id, const std::string& image_hash) const {
    const auto dir = root_ / style_id / image_hash;
    if (!fs::exists(dir / "meta.json")) return std::nullopt;
    try {
        auto meta = read_json(dir / "meta.json");
        const auto k = meta.at("k").get<int64_t>();
        const auto d = meta.at("latent_dim").get<int64_t>();
        if (meta.at("style_id").get<std::string>() != style_id || meta.at("image_hash").get<std::string>() != image_hash)
            fail(ErrorKind::Load, "key fields do not match the entry location");
        return ReferenceEmbedding{style_id,
                                  LatentCode(LatentSpace::V, read_f32(dir / "v.f32", {1, k})),
                                  LatentCode(LatentSpace::W, read_f32(dir / "w.f32", {1, d})),
                                  image_hash,
                                  meta.at("created_at").get<std::string>(),
                                  meta};
    } catch (const std::exception& e) {
        log_line("reference-cache", "ignoring corrupt entry " + dir.string() + ": " + e.what());
        return std::nullopt;
    }
}

void ReferenceCache::put(const ReferenceEmbedding& emb) {
    std::lock_guard lock(write_mutex_);
    const auto dir = root_ / emb.style_id / emb.image_hash;
    const auto staging = dir.parent_path() / (emb.image_hash + ".staging-" + std::to_string(::getpid()));
    fs::remove_all(staging);
    fs::create_directories(staging);
    write_f32(staging / "v.f32", emb.v_code.values());
    write_f32(staging / "w.f32", emb.w_code.values());
    json meta = emb.meta;
    meta["style_id"] = emb.style_id;
    meta["image_hash"] = emb.image_hash;
    meta["created_at"] = emb.created_at;
    meta["k"] = emb.v_code.dim();
    meta["latent_dim"] = emb.w_code.dim();
    write_json(staging / "meta.json", meta);
    fs::remove_all(dir);
    fs::rename(staging, dir);
}

namespace {

std::string utc_now() {
    auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace

ReferenceEmbedding embed_reference(const torch::Tensor& image, const std::string& style_id, const Generator& gen,
                                   const SefaBasis& basis, ReferenceCache& cache, const InversionConfig& cfg,
                                   LossNets& nets, ReferenceStats* stats) {
    const auto hash = reference_image_hash(image);
    if (auto hit = cache.get(style_id, hash)) {
        if (stats) *stats = {true, 0};
        return *hit;
    }
    auto result = invert(quantize_8bit(image), gen, LatentSpace::V, cfg, nets, &basis);
    ReferenceEmbedding emb{style_id,
                           result.code,
                           v_to_w(result.code, basis),
                           hash,
                           utc_now(),
                           {{"iters", cfg.iters},
                            {"lr", cfg.lr},
                            {"lambda_id", cfg.lambda_id},
                            {"initial_loss", result.initial_loss()},
                            {"final_loss", result.final_loss()},
                            {"best_iterate", result.best_iterate},
                            {"basis_digest", tensor_digest(basis.basis)}}};
    cache.put(emb);
    if (stats) *stats = {false, cfg.iters};
    return emb;
}

}  // namespace semstyle
