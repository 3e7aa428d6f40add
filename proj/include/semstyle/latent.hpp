#pragma once

#include <torch/torch.h>

#include <string_view>

#include "semstyle/errors.hpp"

namespace semstyle {

enum class LatentSpace { Z, ZPlus, W, WPlus, V };

std::string_view to_string(LatentSpace space);
LatentSpace parse_latent_space(std::string_view name);

inline bool is_extended(LatentSpace s) { return s == LatentSpace::ZPlus || s == LatentSpace::WPlus; }

/// A point in one of the generator's latent spaces.
///
/// Values are a 2-D float32 tensor: one row for Z, W and V codes and one row
/// per synthesis layer for the extended spaces. The row/shape contract and
/// finiteness are checked on construction. The dimension check against a
/// particular generator happens in the operations that consume the code.
class LatentCode {
public:
    LatentCode(LatentSpace space, torch::Tensor values);

    LatentSpace space() const { return space_; }
    const torch::Tensor& values() const { return values_; }
    int64_t rows() const { return values_.size(0); }
    int64_t dim() const { return values_.size(1); }
    torch::Tensor row(int64_t i) const { return values_[i]; }

    bool bit_equal(const LatentCode& other) const;

private:
    LatentSpace space_;
    torch::Tensor values_;
};

}  // namespace semstyle
