#include "semstyle/latent.hpp"

#include <string>

namespace semstyle {

std::string_view to_string(LatentSpace space) {
    switch (space) {
        case LatentSpace::Z: return "Z";
        case LatentSpace::ZPlus: return "ZPlus";
        case LatentSpace::W: return "W";
        case LatentSpace::WPlus: return "WPlus";
        case LatentSpace::V: return "V";
    }
    return "?";
}

LatentSpace parse_latent_space(std::string_view name) {
    if (name == "Z") return LatentSpace::Z;
    if (name == "ZPlus" || name == "Z+") return LatentSpace::ZPlus;
    if (name == "W") return LatentSpace::W;
    if (name == "WPlus" || name == "W+") return LatentSpace::WPlus;
    if (name == "V") return LatentSpace::V;
    fail(ErrorKind::InvalidParameter, "unknown latent space '" + std::string(name) + "'");
}

LatentCode::LatentCode(LatentSpace space, torch::Tensor values) : space_(space) {
    require(values.defined() && values.dim() == 2, ErrorKind::InvalidCode,
            std::string(to_string(space)) + " code must be a 2-D tensor");
    require(values.size(0) >= 1 && values.size(1) >= 1, ErrorKind::InvalidCode, "empty latent code");
    if (!is_extended(space)) {
        require(values.size(0) == 1, ErrorKind::InvalidCode,
                std::string(to_string(space)) + " code must have exactly one row, got " +
                    std::to_string(values.size(0)));
    }
    require(values.scalar_type() == torch::kFloat32, ErrorKind::InvalidCode, "latent codes are float32");
    require(torch::isfinite(values.detach()).all().item<bool>(), ErrorKind::InvalidCode,
            "latent code has non-finite entries");
    values_ = values.contiguous();
}

bool LatentCode::bit_equal(const LatentCode& other) const {
    return space_ == other.space_ && torch::equal(values_, other.values_);
}

}  // namespace semstyle
