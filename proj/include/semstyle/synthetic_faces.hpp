#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "semstyle/io.hpp"

namespace semstyle {

/// Procedural portrait renderer used as the desk-scale stand-in for aligned
/// face photographs (the "real" domain) and for a stylized target domain.
enum class FaceStyle { Real, Cartoon };

std::string_view to_string(FaceStyle style);
FaceStyle parse_face_style(std::string_view name);

/// Geometry and colours of one synthetic face. Lengths are fractions of the
/// image side; colours are RGB in [0, 1].
struct FaceParams {
    double center_x = 0.5, center_y = 0.52;
    double face_width = 0.30, face_height = 0.38;
    double tilt_deg = 0.0;
    double eye_spacing = 0.12, eye_height = 0.46, eye_size = 0.035;
    double mouth_width = 0.10, mouth_height = 0.67, mouth_curve = 0.02;
    double brow_lift = 0.05;
    int hair_style = 0;  // 0 short, 1 long, 2 bald-ish fringe
    bool glasses = false;
    double skin[3] = {0.85, 0.68, 0.56};
    double hair[3] = {0.25, 0.16, 0.10};
    double iris[3] = {0.25, 0.35, 0.45};
    double lips[3] = {0.70, 0.35, 0.35};
    double background_top[3] = {0.6, 0.7, 0.8};
    double background_bottom[3] = {0.3, 0.35, 0.45};
};

FaceParams sample_face_params(std::mt19937_64& rng);

/// Renders a face as a [3, R, R] tensor in [-1, 1]. Drawing happens at 4x
/// the target size and is area-downsampled. `grain_seed` drives the sensor
/// noise of the real style and is ignored for the cartoon style.
torch::Tensor render_face(const FaceParams& params, FaceStyle style, int resolution, uint64_t grain_seed = 0);

/// Writes `count` PNGs named 00000.png, 00001.png, ... into `dir` and returns
/// their paths. Identical arguments give byte-identical files.
std::vector<fs::path> make_face_dataset(const fs::path& dir, int count, FaceStyle style, uint64_t seed,
                                        int resolution);

/// Loads every image in `dir` as a [N, 3, R, R] batch, resized to `resolution`.
torch::Tensor load_image_batch(const fs::path& dir, int resolution);

}  // namespace semstyle
