#include "semstyle/io.hpp"

#include <openssl/evp.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "semstyle/errors.hpp"

namespace semstyle {

static_assert(std::endian::native == std::endian::little, "raw .f32 files assume a little-endian host");

namespace {

std::string hex(const unsigned char* data, unsigned len) {
    std::ostringstream os;
    for (unsigned i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(data[i]);
    return os.str();
}

fs::path temp_sibling(const fs::path& path) {
    return path.parent_path() / (path.filename().string() + ".tmp-" + std::to_string(::getpid()));
}

}  // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned len = 0;
    EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr);
    return hex(md, len);
}

std::string sha256_hex(std::string_view text) {
    return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_bytes(path)); }

std::string tensor_digest(const torch::Tensor& t) {
    auto c = t.detach().to(torch::kFloat32).contiguous();
    return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(c.data_ptr<float>()), c.numel() * sizeof(float)));
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Load, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    auto tmp = temp_sibling(path);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorKind::Load, "cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) fail(ErrorKind::Load, "short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

void write_text_atomic(const fs::path& path, std::string_view text) {
    write_bytes_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

json read_json(const fs::path& path) {
    auto bytes = read_bytes(path);
    try {
        return json::parse(bytes.begin(), bytes.end());
    } catch (const json::parse_error& e) {
        fail(ErrorKind::Load, path.string() + ": malformed JSON (" + e.what() + ")");
    }
}

void write_json(const fs::path& path, const json& j) { write_text_atomic(path, j.dump(2) + "\n"); }

JsonlWriter::JsonlWriter(const fs::path& path, bool truncate) : path_(path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, truncate ? std::ios::trunc : std::ios::app);
    if (!out) fail(ErrorKind::Load, "cannot open " + path.string());
}

void JsonlWriter::write(const json& record) {
    std::ofstream out(path_, std::ios::app);
    out << record.dump() << '\n';
    out.flush();
    if (!out) fail(ErrorKind::Load, "cannot append to " + path_.string());
}

void log_line(std::string_view component, std::string_view message) {
    std::clog << "[" << component << "] " << message << std::endl;
}

void write_f32(const fs::path& path, const torch::Tensor& t) {
    auto c = t.detach().to(torch::kFloat32).contiguous();
    write_bytes_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(c.data_ptr<float>()), c.numel() * sizeof(float)));
}

torch::Tensor read_f32(const fs::path& path, std::vector<int64_t> shape) {
    auto bytes = read_bytes(path);
    int64_t count = 1;
    for (auto s : shape) count *= s;
    if (static_cast<int64_t>(bytes.size()) != count * static_cast<int64_t>(sizeof(float))) {
        fail(ErrorKind::Load, path.string() + ": expected " + std::to_string(count * sizeof(float)) + " bytes, found " +
                                  std::to_string(bytes.size()));
    }
    auto out = torch::empty(shape, torch::kFloat32);
    std::memcpy(out.data_ptr<float>(), bytes.data(), bytes.size());
    return out;
}

namespace {

cv::Mat to_mat(const torch::Tensor& image) {
    require(image.dim() == 3 && image.size(0) == 3, ErrorKind::InvalidImage, "image must be 3xHxW");
    auto u8 = ((image.detach().to(torch::kFloat32) + 1.0) * 127.5).round().clamp(0, 255).to(torch::kUInt8);
    auto hwc = u8.permute({1, 2, 0}).contiguous();
    cv::Mat rgb(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3, hwc.data_ptr<std::uint8_t>());
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    return bgr;
}

torch::Tensor from_mat(const cv::Mat& bgr, int resolution) {
    cv::Mat img = bgr;
    if (resolution > 0 && (img.rows != resolution || img.cols != resolution)) {
        cv::Mat resized;
        int interp = img.rows > resolution ? cv::INTER_AREA : cv::INTER_LINEAR;
        cv::resize(img, resized, cv::Size(resolution, resolution), 0, 0, interp);
        img = resized;
    }
    cv::Mat rgb;
    cv::cvtColor(img, rgb, cv::COLOR_BGR2RGB);
    auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
    return t.permute({2, 0, 1}).to(torch::kFloat32).div(127.5).sub(1.0).contiguous();
}

}  // namespace

std::vector<std::uint8_t> encode_png(const torch::Tensor& image) {
    std::vector<std::uint8_t> buf;
    if (!cv::imencode(".png", to_mat(image), buf)) fail(ErrorKind::InvalidImage, "PNG encoding failed");
    return buf;
}

torch::Tensor decode_image(std::span<const std::uint8_t> bytes, int resolution) {
    cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
    cv::Mat bgr = bytes.empty() ? cv::Mat() : cv::imdecode(raw, cv::IMREAD_COLOR);
    if (bgr.empty()) fail(ErrorKind::InvalidImage, "cannot decode image bytes");
    return from_mat(bgr, resolution);
}

void save_png(const fs::path& path, const torch::Tensor& image) { write_bytes_atomic(path, encode_png(image)); }

torch::Tensor load_image(const fs::path& path, int resolution) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) fail(ErrorKind::InvalidImage, "cannot read image " + path.string());
    return from_mat(bgr, resolution);
}

std::vector<fs::path> list_images(const fs::path& dir) {
    if (!fs::is_directory(dir)) fail(ErrorKind::Config, "not a directory: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        auto ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
        if (ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp") out.push_back(entry.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

torch::Tensor quantize_8bit(const torch::Tensor& image) {
    return ((image.detach() + 1.0) * 127.5).round().clamp(0, 255).div(127.5).sub(1.0).to(torch::kFloat32);
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
    out.resize(static_cast<size_t>(n));
    return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
    std::string clean;
    clean.reserve(text.size());
    for (char c : text)
        if (!std::isspace(static_cast<unsigned char>(c))) clean.push_back(c);
    if (clean.size() % 4 != 0) fail(ErrorKind::InvalidImage, "base64 length is not a multiple of 4");
    std::vector<std::uint8_t> out(3 * clean.size() / 4);
    int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()), static_cast<int>(clean.size()));
    if (n < 0) fail(ErrorKind::InvalidImage, "malformed base64");
    // EVP_DecodeBlock keeps the padding bytes; drop them.
    size_t pad = 0;
    if (!clean.empty() && clean.back() == '=') ++pad;
    if (clean.size() > 1 && clean[clean.size() - 2] == '=') ++pad;
    out.resize(static_cast<size_t>(n) - pad);
    return out;
}

}  // namespace semstyle
