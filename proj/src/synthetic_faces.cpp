#include "semstyle/synthetic_faces.hpp"

#include <cmath>
#include <cstdio>

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "semstyle/errors.hpp"

namespace semstyle {

std::string_view to_string(FaceStyle style) { return style == FaceStyle::Real ? "real" : "cartoon"; }

FaceStyle parse_face_style(std::string_view name) {
    if (name == "real") return FaceStyle::Real;
    if (name == "cartoon") return FaceStyle::Cartoon;
    fail(ErrorKind::InvalidParameter, "unknown face style '" + std::string(name) + "'");
}

namespace {

constexpr int kSupersample = 4;

double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

void set_rgb(double* out, double r, double g, double b) {
    out[0] = std::clamp(r, 0.0, 1.0);
    out[1] = std::clamp(g, 0.0, 1.0);
    out[2] = std::clamp(b, 0.0, 1.0);
}

cv::Scalar bgr(const double* rgb, double gain = 1.0) {
    return {255.0 * std::clamp(rgb[2] * gain, 0.0, 1.0), 255.0 * std::clamp(rgb[1] * gain, 0.0, 1.0),
            255.0 * std::clamp(rgb[0] * gain, 0.0, 1.0)};
}

// Saturated, brighter palette for the cartoon domain.
void cartoonize(const double* in, double* out, double saturation, double lift) {
    double mean = (in[0] + in[1] + in[2]) / 3.0;
    for (int c = 0; c < 3; ++c) out[c] = std::clamp(mean + saturation * (in[c] - mean) + lift, 0.0, 1.0);
}

struct Canvas {
    cv::Mat img;
    double side;
    cv::Point pt(double x, double y) const {
        return {static_cast<int>(std::lround(x * side)), static_cast<int>(std::lround(y * side))};
    }
    cv::Size sz(double w, double h) const {
        return {std::max(1, static_cast<int>(std::lround(w * side))), std::max(1, static_cast<int>(std::lround(h * side)))};
    }
    int px(double v) const { return std::max(1, static_cast<int>(std::lround(v * side))); }
};

void draw_background(Canvas& c, const double* top, const double* bottom) {
    for (int y = 0; y < c.img.rows; ++y) {
        double t = static_cast<double>(y) / (c.img.rows - 1);
        double row[3];
        for (int k = 0; k < 3; ++k) row[k] = (1 - t) * top[k] + t * bottom[k];
        c.img.row(y).setTo(bgr(row));
    }
}

}  // namespace

FaceParams sample_face_params(std::mt19937_64& rng) {
    FaceParams p;
    p.center_x = uniform(rng, 0.46, 0.54);
    p.center_y = uniform(rng, 0.49, 0.56);
    p.face_width = uniform(rng, 0.25, 0.34);
    p.face_height = uniform(rng, 0.33, 0.42);
    p.tilt_deg = uniform(rng, -10.0, 10.0);
    p.eye_spacing = uniform(rng, 0.09, 0.14);
    p.eye_height = uniform(rng, 0.43, 0.49);
    p.eye_size = uniform(rng, 0.025, 0.045);
    p.mouth_width = uniform(rng, 0.07, 0.14);
    p.mouth_height = uniform(rng, 0.64, 0.70);
    p.mouth_curve = uniform(rng, -0.015, 0.035);
    p.brow_lift = uniform(rng, 0.035, 0.065);
    p.hair_style = std::uniform_int_distribution<int>(0, 2)(rng);
    p.glasses = uniform(rng, 0.0, 1.0) < 0.25;
    double tone = uniform(rng, 0.35, 1.0);
    set_rgb(p.skin, 0.45 + 0.5 * tone, 0.30 + 0.42 * tone, 0.22 + 0.38 * tone);
    double hair_light = uniform(rng, 0.05, 0.75);
    set_rgb(p.hair, hair_light * uniform(rng, 0.8, 1.2), hair_light * uniform(rng, 0.55, 0.85),
            hair_light * uniform(rng, 0.3, 0.6));
    set_rgb(p.iris, uniform(rng, 0.1, 0.5), uniform(rng, 0.15, 0.55), uniform(rng, 0.15, 0.6));
    set_rgb(p.lips, uniform(rng, 0.55, 0.85), uniform(rng, 0.25, 0.45), uniform(rng, 0.25, 0.45));
    set_rgb(p.background_top, uniform(rng, 0.2, 0.95), uniform(rng, 0.2, 0.95), uniform(rng, 0.2, 0.95));
    for (int k = 0; k < 3; ++k) p.background_bottom[k] = p.background_top[k] * uniform(rng, 0.4, 0.9);
    return p;
}

torch::Tensor render_face(const FaceParams& p, FaceStyle style, int resolution, uint64_t grain_seed) {
    require(resolution >= 8, ErrorKind::InvalidParameter, "render resolution must be >= 8");
    const bool cartoon = style == FaceStyle::Cartoon;
    const int side = resolution * kSupersample;
    Canvas c{cv::Mat(side, side, CV_8UC3), static_cast<double>(side)};

    double skin[3], hair[3], iris[3], lips[3], top[3], bottom[3];
    if (cartoon) {
        cartoonize(p.skin, skin, 1.3, 0.08);
        cartoonize(p.hair, hair, 1.8, 0.05);
        cartoonize(p.iris, iris, 2.0, 0.0);
        cartoonize(p.lips, lips, 1.8, 0.0);
        cartoonize(p.background_top, top, 1.6, 0.1);
        cartoonize(p.background_top, bottom, 1.6, 0.1);
    } else {
        std::copy(p.skin, p.skin + 3, skin);
        std::copy(p.hair, p.hair + 3, hair);
        std::copy(p.iris, p.iris + 3, iris);
        std::copy(p.lips, p.lips + 3, lips);
        std::copy(p.background_top, p.background_top + 3, top);
        std::copy(p.background_bottom, p.background_bottom + 3, bottom);
    }
    draw_background(c, top, bottom);

    const cv::Scalar ink(20, 20, 20);
    const int outline = cartoon ? c.px(0.012) : 0;
    const double cx = p.center_x, cy = p.center_y;
    const double fw = p.face_width, fh = p.face_height;
    // Eyes scale up and features simplify in the cartoon domain.
    const double eye = cartoon ? p.eye_size * 1.6 : p.eye_size;

    auto ellipse = [&](double x, double y, double w, double h, const cv::Scalar& color, double angle = 0.0,
                       double a0 = 0, double a1 = 360, int thickness = cv::FILLED) {
        cv::ellipse(c.img, c.pt(x, y), c.sz(w, h), angle + p.tilt_deg, a0, a1, color, thickness, cv::LINE_AA);
    };

    // shoulders
    ellipse(cx, cy + fh * 1.25, fw * 1.6, fh * 0.6, bgr(hair, 0.6));
    // hair behind the face
    if (p.hair_style == 1) ellipse(cx, cy + fh * 0.25, fw * 1.25, fh * 1.15, bgr(hair));
    else if (p.hair_style == 0) ellipse(cx, cy - fh * 0.15, fw * 1.12, fh * 0.95, bgr(hair));
    // neck and face
    cv::rectangle(c.img, c.pt(cx - fw * 0.35, cy + fh * 0.5), c.pt(cx + fw * 0.35, cy + fh * 1.0), bgr(skin, 0.85),
                  cv::FILLED, cv::LINE_AA);
    ellipse(cx, cy, fw, fh, bgr(skin));
    if (!cartoon) {
        // soft side shading
        ellipse(cx + fw * 0.45, cy + fh * 0.1, fw * 0.45, fh * 0.8, bgr(skin, 0.9));
        ellipse(cx - fw * 0.2, cy - fh * 0.2, fw * 0.5, fh * 0.45, bgr(skin, 1.05));
    }
    if (outline) ellipse(cx, cy, fw, fh, ink, 0, 0, 360, outline);
    // fringe
    if (p.hair_style != 1) ellipse(cx, cy - fh * 0.78, fw * 0.95, fh * 0.35, bgr(hair), 0, 180, 360);
    else ellipse(cx, cy - fh * 0.75, fw * 1.0, fh * 0.4, bgr(hair), 0, 180, 360);

    const double rad = p.tilt_deg * M_PI / 180.0;
    auto rot = [&](double dx, double dy) {
        return std::pair{cx + dx * std::cos(rad) - dy * std::sin(rad), cy + dx * std::sin(rad) + dy * std::cos(rad)};
    };
    const double eye_dy = (p.eye_height - 0.5) * 2.0 * fh + 0.0;
    for (int s : {-1, 1}) {
        auto [ex, ey] = rot(s * p.eye_spacing, eye_dy);
        ellipse(ex, ey, eye * 1.5, eye, cv::Scalar(245, 245, 245));
        ellipse(ex, ey, eye * 0.8, eye * 0.8, bgr(iris));
        ellipse(ex, ey, eye * 0.35, eye * 0.35, cv::Scalar(15, 15, 15));
        if (cartoon) {
            ellipse(ex - eye * 0.3, ey - eye * 0.3, eye * 0.22, eye * 0.22, cv::Scalar(255, 255, 255));
            ellipse(ex, ey, eye * 1.5, eye, ink, 0, 0, 360, outline);
        }
        auto [bx, by] = rot(s * p.eye_spacing, eye_dy - p.brow_lift - eye * 0.5);
        ellipse(bx, by, eye * 1.7, eye * 0.5, bgr(hair, 0.8), 0, 180, 360, c.px(cartoon ? 0.014 : 0.01));
        if (p.glasses) ellipse(ex, ey, eye * 2.2, eye * 1.7, cv::Scalar(30, 30, 30), 0, 0, 360, c.px(0.008));
    }
    if (p.glasses) {
        auto [l, ly] = rot(-p.eye_spacing + p.eye_size * 2.2, eye_dy);
        auto [r, ry] = rot(p.eye_spacing - p.eye_size * 2.2, eye_dy);
        cv::line(c.img, c.pt(l, ly), c.pt(r, ry), cv::Scalar(30, 30, 30), c.px(0.008), cv::LINE_AA);
    }
    // nose
    {
        auto [nx, ny] = rot(0.0, (0.575 - 0.5) * 2.0 * fh);
        if (cartoon) ellipse(nx, ny, 0.012, 0.008, ink);
        else ellipse(nx, ny, 0.02, 0.035, bgr(skin, 0.82), 0, 20, 160, c.px(0.008));
    }
    // mouth: upper arc or frown
    {
        auto [mx, my] = rot(0.0, (p.mouth_height - 0.5) * 2.0 * fh);
        double curve = std::abs(p.mouth_curve) + 0.005;
        double a0 = p.mouth_curve >= 0 ? 0 : 180, a1 = p.mouth_curve >= 0 ? 180 : 360;
        double yoff = p.mouth_curve >= 0 ? -curve : curve;
        ellipse(mx, my + yoff, p.mouth_width / 2, curve, cartoon ? ink : bgr(lips), 0, a0, a1,
                c.px(cartoon ? 0.014 : 0.012));
    }

    if (!cartoon) cv::GaussianBlur(c.img, c.img, cv::Size(0, 0), side / 256.0 * 1.2);
    cv::Mat small;
    cv::resize(c.img, small, cv::Size(resolution, resolution), 0, 0, cv::INTER_AREA);
    cv::Mat rgb;
    cv::cvtColor(small, rgb, cv::COLOR_BGR2RGB);
    auto t = torch::from_blob(rgb.data, {resolution, resolution, 3}, torch::kUInt8)
                 .permute({2, 0, 1})
                 .to(torch::kFloat32)
                 .div(127.5)
                 .sub(1.0);
    if (cartoon) {
        // flat colour bands
        t = torch::round((t + 1.0) * 3.5) / 3.5 - 1.0;
    } else {
        auto gen = at::make_generator<at::CPUGeneratorImpl>(grain_seed);
        t = t + 0.03 * torch::randn(t.sizes(), gen);
    }
    return t.clamp(-1.0, 1.0).contiguous();
}

std::vector<fs::path> make_face_dataset(const fs::path& dir, int count, FaceStyle style, uint64_t seed,
                                        int resolution) {
    require(count >= 1, ErrorKind::InvalidParameter, "dataset size must be >= 1");
    fs::create_directories(dir);
    std::mt19937_64 rng(seed);
    std::vector<fs::path> paths;
    for (int i = 0; i < count; ++i) {
        auto params = sample_face_params(rng);
        char name[32];
        std::snprintf(name, sizeof(name), "%05d.png", i);
        auto path = dir / name;
        save_png(path, render_face(params, style, resolution, seed * 1000003ULL + static_cast<uint64_t>(i)));
        paths.push_back(path);
    }
    return paths;
}

torch::Tensor load_image_batch(const fs::path& dir, int resolution) {
    auto paths = list_images(dir);
    require(!paths.empty(), ErrorKind::Config, "no images in " + dir.string());
    std::vector<torch::Tensor> images;
    images.reserve(paths.size());
    for (const auto& p : paths) images.push_back(load_image(p, resolution));
    return torch::stack(images);
}

}  // namespace semstyle
