#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace semstyle {

namespace fs = std::filesystem;
using nlohmann::json;

/// Receives one JSON object per training step.
using StepLogger = std::function<void(const json&)>;

/// Appends JSON lines to a file, flushing after every record.
class JsonlWriter {
public:
    explicit JsonlWriter(const fs::path& path, bool truncate = true);
    void write(const json& record);

private:
    fs::path path_;
};

/// Progress / warning line on stderr, prefixed with the component name.
void log_line(std::string_view component, std::string_view message);

// Hashing ------------------------------------------------------------------

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const fs::path& path);
/// Digest of a tensor's float32 contents (row-major, little-endian).
std::string tensor_digest(const torch::Tensor& t);

// Files --------------------------------------------------------------------

std::vector<std::uint8_t> read_bytes(const fs::path& path);
/// Writes through a temporary sibling and renames it into place.
void write_bytes_atomic(const fs::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const fs::path& path, std::string_view text);

json read_json(const fs::path& path);
void write_json(const fs::path& path, const json& j);

/// Raw little-endian float32, row-major. Used by the pair dataset and the
/// reference cache.
void write_f32(const fs::path& path, const torch::Tensor& t);
torch::Tensor read_f32(const fs::path& path, std::vector<int64_t> shape);

// Images -------------------------------------------------------------------
//
// Images are float32 tensors of shape 3xHxW with values in [-1, 1]. Pixels
// map to 8-bit RGB linearly: round((x + 1) * 127.5), clamped.

std::vector<std::uint8_t> encode_png(const torch::Tensor& image);
/// Decodes a PNG (or any format OpenCV reads) and resizes it to
/// resolution x resolution when resolution > 0.
torch::Tensor decode_image(std::span<const std::uint8_t> bytes, int resolution);
void save_png(const fs::path& path, const torch::Tensor& image);
torch::Tensor load_image(const fs::path& path, int resolution);
/// Sorted list of image files (png/jpg/jpeg/bmp) in a directory.
std::vector<fs::path> list_images(const fs::path& dir);
/// Quantizes an image to the 8-bit grid it would have after a PNG round trip.
torch::Tensor quantize_8bit(const torch::Tensor& image);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

}  // namespace semstyle
