#pragma once

#include <torch/torch.h>

#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "semstyle/generator.hpp"
#include "semstyle/losses.hpp"

namespace semstyle {

/// Closed-form factorization basis of a generator's W space: the top-k
/// eigenvectors of A A^T, where A is the runtime weight of the last mapping
/// layer. These are the directions in W along which the mapping output
/// varies most. Columns are orthonormal; `anchor` is w_mean.
struct SefaBasis {
    torch::Tensor basis;        // [d, k]
    torch::Tensor eigenvalues;  // [k], descending
    torch::Tensor anchor;       // [d]
    int64_t k() const { return basis.size(1); }
};

SefaBasis sefa_basis(const Generator& gen, int64_t k);

/// w = anchor + basis * v, returned as a W code.
LatentCode v_to_w(const LatentCode& v, const SefaBasis& basis);

struct InversionConfig {
    int iters = 1000;
    double lr = 0.02;
    double lambda_id = 0.1;
    uint64_t seed = 0;
    /// Called with (updates done, iters) after every update.
    std::function<void(int, int)> progress;
};

struct InversionResult {
    LatentCode code;
    torch::Tensor recon;  // [3, R, R]
    std::vector<double> loss_curve;  // iters + 1 entries
    int best_iterate = 0;
    json start;  // description of the initial point
    double initial_loss() const { return loss_curve.front(); }
    double final_loss() const { return loss_curve[static_cast<size_t>(best_iterate)]; }
};

/// Decodes an optimization variable of the given space to a [1, 3, R, R]
/// image: Z+ rows go through the mapping network, W and V codes are
/// broadcast to every layer.
torch::Tensor decode_variable(const torch::Tensor& variable, LatentSpace space, const Generator& gen,
                              const SefaBasis* basis);

/// Semantic loss between the decoded variable and `image`.
torch::Tensor inversion_objective(const torch::Tensor& variable, const torch::Tensor& image, LatentSpace space,
                                  const Generator& gen, const SefaBasis* basis, double lambda_id, LossNets& nets);

/// Starting point: zeros for Z+ and V, w_mean for W and W+.
torch::Tensor inversion_start(LatentSpace space, const Generator& gen, const SefaBasis* basis);

/// Gradient-based inversion into Z+, W, W+ or V (V needs `basis`). Returns
/// the best iterate of the trajectory.
InversionResult invert(const torch::Tensor& image, const Generator& gen, LatentSpace space,
                       const InversionConfig& cfg, LossNets& nets, const SefaBasis* basis = nullptr);

struct ReferenceEmbedding {
    std::string style_id;
    LatentCode v_code;
    LatentCode w_code;
    std::string image_hash;
    std::string created_at;
    json meta;
};

/// Digest identifying a reference image: sha256 of its 8-bit pixels.
std::string reference_image_hash(const torch::Tensor& image);

/// On-disk store of reference embeddings keyed by (style_id, image_hash):
/// `<root>/<style_id>/<image_hash>/{v.f32, w.f32, meta.json}`. Writers are
/// serialized; entries appear atomically, so readers never see a partial one.
class ReferenceCache {
public:
    explicit ReferenceCache(fs::path root);

    /// A corrupt entry counts as a miss and is logged.
    std::optional<ReferenceEmbedding> get(const std::string& style_id, const std::string& image_hash) const;
    void put(const ReferenceEmbedding& emb);
    const fs::path& root() const { return root_; }

private:
    fs::path root_;
    mutable std::mutex write_mutex_;
};

struct ReferenceStats {
    bool cache_hit = false;
    int64_t inversion_steps = 0;
};

/// Returns the cached embedding for the image or inverts it into V and
/// stores the result.
ReferenceEmbedding embed_reference(const torch::Tensor& image, const std::string& style_id, const Generator& gen,
                                   const SefaBasis& basis, ReferenceCache& cache, const InversionConfig& cfg,
                                   LossNets& nets, ReferenceStats* stats = nullptr);

}  // namespace semstyle
