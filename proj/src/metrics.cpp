#include "semstyle/metrics.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>

#include "semstyle/checkpoint.hpp"

namespace semstyle {

namespace {

using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr double kAsymmetryTolerance = 1e-6;

struct Moments {
    Eigen::VectorXd mean;
    Matrix cov;
};

Moments moments(const torch::Tensor& features) {
    auto f = features.to(torch::kFloat64).contiguous();
    Eigen::Map<const RowMatrix> x(f.data_ptr<double>(), f.size(0), f.size(1));
    Moments m;
    m.mean = x.colwise().mean();
    Matrix centered = x.rowwise() - m.mean.transpose();
    m.cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
    return m;
}

// Symmetric PSD square root with eigenvalues floored at zero.
Matrix psd_sqrt(const Matrix& s, int* clamped, double tolerance) {
    Eigen::SelfAdjointEigenSolver<Matrix> solver(0.5 * (s + s.transpose()));
    Eigen::VectorXd values = solver.eigenvalues();
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        if (values(i) < 0) {
            if (values(i) < -tolerance && clamped) ++*clamped;
            values(i) = 0;
        }
    }
    return solver.eigenvectors() * values.cwiseSqrt().asDiagonal() * solver.eigenvectors().transpose();
}

}  // namespace

FeatureSet::FeatureSet(torch::Tensor f, std::string id) : features(std::move(f)), extractor_id(std::move(id)) {
    require(features.defined() && features.dim() == 2, ErrorKind::InvalidParameter, "features must be an N x m matrix");
    require(features.size(0) >= 2, ErrorKind::InvalidParameter, "a feature set needs at least 2 samples");
    require(torch::isfinite(features).all().item<bool>(), ErrorKind::InvalidParameter, "features must be finite");
    features = features.to(torch::kFloat64).contiguous();
}

FidResult fid_detailed(const FeatureSet& a, const FeatureSet& b) {
    require(a.extractor_id == b.extractor_id, ErrorKind::InvalidParameter,
            "feature sets come from different extractors ('" + a.extractor_id + "' vs '" + b.extractor_id + "')");
    require(a.dim() == b.dim(), ErrorKind::InvalidParameter, "feature dimensions differ");
    auto ma = moments(a.features);
    auto mb = moments(b.features);
    FidResult result;
    const double scale = std::max({1.0, ma.cov.trace(), mb.cov.trace()});
    const double tolerance = kAsymmetryTolerance * scale;
    Matrix root_a = psd_sqrt(ma.cov, &result.clamped, tolerance);
    Matrix inner = root_a * mb.cov * root_a;
    Eigen::SelfAdjointEigenSolver<Matrix> solver(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
    double cross = 0.0;
    for (Eigen::Index i = 0; i < solver.eigenvalues().size(); ++i) {
        double v = solver.eigenvalues()(i);
        if (v < 0) {
            if (v < -tolerance) ++result.clamped;
            continue;
        }
        cross += std::sqrt(v);
    }
    const double mean_term = (ma.mean - mb.mean).squaredNorm();
    result.value = std::max(0.0, mean_term + ma.cov.trace() + mb.cov.trace() - 2.0 * cross);
    if (result.clamped > 0)
        log_line("fid", "clamped " + std::to_string(result.clamped) + " negative eigenvalues to zero");
    return result;
}

double fid(const FeatureSet& a, const FeatureSet& b) { return fid_detailed(a, b).value; }

std::string extractor_id(Discriminator& disc) {
    std::vector<std::uint8_t> buf;
    for (const auto& t : module_state(*disc)) {
        buf.insert(buf.end(), t.name.begin(), t.name.end());
        auto hex = tensor_digest(t.value);
        buf.insert(buf.end(), hex.begin(), hex.end());
    }
    return "disc-penultimate:" + sha256_hex(buf).substr(0, 16);
}

FeatureSet extract_features(const torch::Tensor& images, Discriminator& disc, int64_t chunk) {
    torch::NoGradGuard guard;
    std::vector<torch::Tensor> parts;
    for (int64_t s = 0; s < images.size(0); s += chunk)
        parts.push_back(disc->features(images.slice(0, s, std::min(s + chunk, images.size(0)))));
    return {torch::cat(parts).to(torch::kFloat64), extractor_id(disc)};
}

double perceptual_distance(const torch::Tensor& sources, const torch::Tensor& outputs, PerceptualNet& net,
                           int64_t chunk) {
    require(sources.dim() == 4 && sources.size(0) >= 1, ErrorKind::InvalidParameter, "need at least one pair");
    require(sources.sizes() == outputs.sizes(), ErrorKind::InvalidImage, "pair batches differ in shape");
    torch::NoGradGuard guard;
    double acc = 0.0;
    for (int64_t s = 0; s < sources.size(0); s += chunk) {
        auto e = std::min(s + chunk, sources.size(0));
        acc += net->distance(sources.slice(0, s, e), outputs.slice(0, s, e)).to(torch::kFloat64).sum().item<double>();
    }
    return acc / static_cast<double>(sources.size(0));
}

double identity_distance(const torch::Tensor& sources, const torch::Tensor& outputs, IdentityNet& net, int64_t chunk) {
    require(sources.dim() == 4 && sources.size(0) >= 1, ErrorKind::InvalidParameter, "need at least one pair");
    require(sources.sizes() == outputs.sizes(), ErrorKind::InvalidImage, "pair batches differ in shape");
    torch::NoGradGuard guard;
    double acc = 0.0;
    for (int64_t s = 0; s < sources.size(0); s += chunk) {
        auto e = std::min(s + chunk, sources.size(0));
        auto ea = net->embed(sources.slice(0, s, e));
        auto eb = net->embed(outputs.slice(0, s, e));
        acc += embedding_distance(ea, eb).to(torch::kFloat64).sum().item<double>();
    }
    return acc / static_cast<double>(sources.size(0));
}

double semantic_distance(const Generator& g, const Generator& g_prime, int64_t n, uint64_t seed, PerceptualNet& net,
                         int64_t chunk) {
    require(g.config() == g_prime.config(), ErrorKind::Config, "semantic distance needs generators with one config");
    require(n >= 1, ErrorKind::InvalidParameter, "semantic distance needs n >= 1");
    torch::NoGradGuard guard;
    auto z = torch::randn({n, g.config().latent_dim}, make_rng(seed));
    double acc = 0.0;
    for (int64_t s = 0; s < n; s += chunk) {
        auto zc = z.slice(0, s, std::min(s + chunk, n));
        acc += net->distance(g.generate(zc), g_prime.generate(zc)).to(torch::kFloat64).sum().item<double>();
    }
    return acc / static_cast<double>(n);
}

torch::Tensor sample_images(const Generator& gen, int64_t count, uint64_t seed, double psi, int64_t chunk) {
    torch::NoGradGuard guard;
    auto z = torch::randn({count, gen.config().latent_dim}, make_rng(seed));
    std::vector<torch::Tensor> parts;
    const auto layers = gen.config().layer_count();
    for (int64_t s = 0; s < count; s += chunk) {
        auto w = truncate_rows(gen.map(z.slice(0, s, std::min(s + chunk, count))), psi, gen.w_mean());
        parts.push_back(gen.synthesize_batch(w.unsqueeze(1).expand({-1, layers, -1})));
    }
    return torch::cat(parts);
}

json metric_record(const std::string& metric, double value, const std::string& extractor, int64_t n, uint64_t seed) {
    return {{"metric", metric}, {"value", value}, {"extractor_id", extractor}, {"n", n}, {"seed", seed}};
}

}  // namespace semstyle
