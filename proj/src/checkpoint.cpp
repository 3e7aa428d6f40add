#include "semstyle/checkpoint.hpp"

#include <unistd.h>

#include <cstring>
#include <map>

namespace semstyle {

const torch::Tensor& Checkpoint::tensor(std::string_view name) const {
    for (const auto& t : tensors)
        if (t.name == name) return t.value;
    fail(ErrorKind::Load, "checkpoint has no tensor '" + std::string(name) + "'");
}

void write_checkpoint(const fs::path& dir, std::string_view kind, const json& header,
                      const std::vector<NamedTensor>& tensors) {
    std::vector<std::uint8_t> blob;
    json table = json::array();
    for (const auto& [name, value] : tensors) {
        auto c = value.detach().to(torch::kFloat32).contiguous();
        auto nbytes = static_cast<size_t>(c.numel()) * sizeof(float);
        table.push_back({{"name", name}, {"shape", c.sizes().vec()}, {"offset", blob.size()}, {"nbytes", nbytes}});
        auto* p = reinterpret_cast<const std::uint8_t*>(c.data_ptr<float>());
        blob.insert(blob.end(), p, p + nbytes);
    }
    json manifest = {
        {"format", kCheckpointFormat},
        {"version", kCheckpointVersion},
        {"kind", kind},
        {"header", header},
        {"tensors", table},
        {"weights", {{"file", "weights.bin"}, {"bytes", blob.size()}, {"sha256", sha256_hex(blob)}}},
    };

    // Stage the whole directory, then swap it into place.
    auto parent = dir.has_parent_path() ? dir.parent_path() : fs::path(".");
    fs::create_directories(parent);
    auto staging = parent / (dir.filename().string() + ".staging-" + std::to_string(::getpid()));
    fs::remove_all(staging);
    fs::create_directories(staging);
    write_bytes_atomic(staging / "weights.bin", blob);
    write_text_atomic(staging / "manifest.json", manifest.dump(2) + "\n");
    if (fs::exists(dir)) {
        auto old = parent / (dir.filename().string() + ".old-" + std::to_string(::getpid()));
        fs::remove_all(old);
        fs::rename(dir, old);
        fs::rename(staging, dir);
        fs::remove_all(old);
    } else {
        fs::rename(staging, dir);
    }
}

Checkpoint read_checkpoint(const fs::path& dir, std::string_view expected_kind) {
    auto manifest_path = dir / "manifest.json";
    if (!fs::exists(manifest_path)) fail(ErrorKind::Load, "missing manifest: " + manifest_path.string());
    auto manifest_bytes = read_bytes(manifest_path);
    json manifest;
    try {
        manifest = json::parse(manifest_bytes.begin(), manifest_bytes.end());
    } catch (const json::parse_error& e) {
        fail(ErrorKind::Load, manifest_path.string() + ": malformed JSON (" + e.what() + ")");
    }
    if (header_field<std::string>(manifest, "format") != kCheckpointFormat)
        fail(ErrorKind::Load, "manifest field 'format' is not " + std::string(kCheckpointFormat));
    if (header_field<int>(manifest, "version") != kCheckpointVersion)
        fail(ErrorKind::Load, "manifest field 'version' unsupported");
    Checkpoint ck;
    ck.kind = header_field<std::string>(manifest, "kind");
    if (!expected_kind.empty() && ck.kind != expected_kind)
        fail(ErrorKind::Load, "manifest field 'kind' is '" + ck.kind + "', expected '" + std::string(expected_kind) + "'");
    if (!manifest.contains("header")) fail(ErrorKind::Load, "manifest field 'header' missing");
    ck.header = manifest["header"];

    auto weights_file = header_field<std::string>(manifest, "weights.file");
    auto expected_bytes = header_field<size_t>(manifest, "weights.bytes");
    auto weights_path = dir / weights_file;
    if (!fs::exists(weights_path)) fail(ErrorKind::Load, "missing weight file: " + weights_path.string());
    auto blob = read_bytes(weights_path);
    if (blob.size() != expected_bytes) {
        fail(ErrorKind::Load, "weight file " + weights_path.string() + " truncated or padded: expected " +
                                  std::to_string(expected_bytes) + " bytes, found " + std::to_string(blob.size()));
    }
    if (sha256_hex(blob) != header_field<std::string>(manifest, "weights.sha256"))
        fail(ErrorKind::Load, "weight file " + weights_path.string() + " does not match manifest field 'weights.sha256'");

    if (!manifest.contains("tensors") || !manifest["tensors"].is_array())
        fail(ErrorKind::Load, "manifest field 'tensors' missing");
    for (const auto& entry : manifest["tensors"]) {
        auto name = header_field<std::string>(entry, "name");
        auto shape = header_field<std::vector<int64_t>>(entry, "shape");
        auto offset = header_field<size_t>(entry, "offset");
        auto nbytes = header_field<size_t>(entry, "nbytes");
        int64_t count = 1;
        for (auto s : shape) count *= s;
        if (nbytes != static_cast<size_t>(count) * sizeof(float) || offset + nbytes > blob.size())
            fail(ErrorKind::Load, "manifest field 'tensors' entry '" + name + "' is inconsistent with weights");
        auto t = torch::empty(shape, torch::kFloat32);
        std::memcpy(t.data_ptr<float>(), blob.data() + offset, nbytes);
        ck.tensors.push_back({name, t});
    }
    ck.hash = sha256_hex(manifest_bytes);
    return ck;
}

std::string checkpoint_hash(const fs::path& dir) {
    auto path = dir / "manifest.json";
    if (!fs::exists(path)) fail(ErrorKind::Load, "missing manifest: " + path.string());
    return sha256_file(path);
}

std::vector<NamedTensor> module_state(const torch::nn::Module& module) {
    std::vector<NamedTensor> out;
    for (const auto& p : module.named_parameters(true)) out.push_back({p.key(), p.value()});
    for (const auto& b : module.named_buffers(true)) out.push_back({b.key(), b.value()});
    return out;
}

void load_module_state(torch::nn::Module& module, const std::vector<NamedTensor>& tensors, std::string_view prefix) {
    std::map<std::string, torch::Tensor> by_name;
    for (const auto& t : tensors) by_name[t.name] = t.value;
    torch::NoGradGuard guard;
    size_t used = 0;
    auto assign = [&](const std::string& name, torch::Tensor& target) {
        auto it = by_name.find(name);
        if (it == by_name.end()) fail(ErrorKind::Load, "checkpoint is missing tensor '" + std::string(prefix) + name + "'");
        if (it->second.sizes() != target.sizes())
            fail(ErrorKind::Load, "checkpoint tensor '" + std::string(prefix) + name + "' has the wrong shape");
        target.copy_(it->second);
        ++used;
    };
    for (auto& p : module.named_parameters(true)) assign(p.key(), p.value());
    for (auto& b : module.named_buffers(true)) assign(b.key(), b.value());
    if (used != by_name.size()) fail(ErrorKind::Load, "checkpoint carries tensors the model does not have");
}

std::vector<NamedTensor> with_prefix(const std::vector<NamedTensor>& tensors, std::string_view prefix) {
    std::vector<NamedTensor> out;
    for (const auto& t : tensors)
        if (t.name.starts_with(prefix)) out.push_back({t.name.substr(prefix.size()), t.value});
    return out;
}

std::vector<NamedTensor> add_prefix(std::vector<NamedTensor> tensors, std::string_view prefix) {
    for (auto& t : tensors) t.name = std::string(prefix) + t.name;
    return tensors;
}

}  // namespace semstyle
