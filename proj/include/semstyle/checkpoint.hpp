#pragma once

#include <torch/torch.h>

#include <string>
#include <string_view>
#include <vector>

#include "semstyle/errors.hpp"
#include "semstyle/io.hpp"

namespace semstyle {

/// On-disk checkpoint shared by every model in the toolkit.
///
///   <dir>/manifest.json   format tag, kind, model header, tensor table,
///                         weights byte count and sha256
///   <dir>/weights.bin     all tensors as raw little-endian float32,
///                         concatenated in table order
///
/// The manifest is written with sorted keys and no timestamps so identical
/// models produce identical bytes. checkpoint_hash() is the sha256 of the
/// manifest, which transitively covers the weights.
struct NamedTensor {
    std::string name;
    torch::Tensor value;
};

struct Checkpoint {
    std::string kind;
    json header;
    std::vector<NamedTensor> tensors;
    std::string hash;

    const torch::Tensor& tensor(std::string_view name) const;
};

inline constexpr std::string_view kCheckpointFormat = "semstyle-checkpoint";
inline constexpr int kCheckpointVersion = 1;

void write_checkpoint(const fs::path& dir, std::string_view kind, const json& header,
                      const std::vector<NamedTensor>& tensors);
Checkpoint read_checkpoint(const fs::path& dir, std::string_view expected_kind);
std::string checkpoint_hash(const fs::path& dir);

/// Parameters then buffers, in registration order.
std::vector<NamedTensor> module_state(const torch::nn::Module& module);
/// Copies tensors into the module. Every module tensor must be present with
/// a matching shape; extra entries are an error too.
void load_module_state(torch::nn::Module& module, const std::vector<NamedTensor>& tensors,
                       std::string_view prefix = "");
/// Restricts a tensor list to names under prefix (prefix stripped).
std::vector<NamedTensor> with_prefix(const std::vector<NamedTensor>& tensors, std::string_view prefix);
std::vector<NamedTensor> add_prefix(std::vector<NamedTensor> tensors, std::string_view prefix);

/// Reads a required manifest field addressed by a dotted path
/// ("config.resolution"); a missing or mistyped field is a load error that
/// names the field.
template <typename T>
T header_field(const json& header, std::string_view path) {
    const json* node = &header;
    std::string walked;
    size_t start = 0;
    while (start <= path.size()) {
        auto dot = path.find('.', start);
        auto key = std::string(path.substr(start, dot == std::string_view::npos ? std::string_view::npos : dot - start));
        walked += walked.empty() ? key : "." + key;
        if (!node->is_object() || !node->contains(key)) fail(ErrorKind::Load, "manifest field '" + walked + "' missing");
        node = &(*node)[key];
        if (dot == std::string_view::npos) break;
        start = dot + 1;
    }
    try {
        return node->get<T>();
    } catch (const json::exception&) {
        fail(ErrorKind::Load, "manifest field '" + std::string(path) + "' has the wrong type");
    }
}

/// Optional config field: the fallback when absent, a config error naming
/// the key when present with the wrong type.
template <typename T>
T field_or(const json& j, const char* key, T fallback) {
    if (!j.is_object() || !j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        fail(ErrorKind::Config, std::string("config field '") + key + "' has the wrong type");
    }
}

}  // namespace semstyle
