#pragma once

#include <doctest.h>
#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "gradcheck.hpp"
#include "semstyle/generator.hpp"

namespace semstyle::testing {

/// Small generator shape for fast unit tests (32 px, 6 layers).
inline GeneratorConfig tiny_config() {
    GeneratorConfig c;
    c.resolution = 32;
    c.latent_dim = 32;
    c.channel_base = 256;
    c.channel_max = 16;
    c.mapping_layers = 2;
    return c;
}

class TempDir {
public:
    explicit TempDir(const std::string& tag = "semstyle") {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / (tag + "-" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

}  // namespace semstyle::testing
