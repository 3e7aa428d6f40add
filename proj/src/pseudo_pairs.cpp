#include "semstyle/pseudo_pairs.hpp"

#include <cmath>
#include <cstring>
#include <map>

#include "semstyle/checkpoint.hpp"

namespace semstyle {

namespace {

constexpr const char* kCodeFiles[] = {"z1", "z2", "w1", "w2", "w3"};
constexpr const char* kImageFiles[] = {"S", "P1", "P2", "P3"};

torch::Tensor image_from_png(const fs::path& path) {
    auto bytes = read_bytes(path);
    return decode_image(bytes, 0);
}

}  // namespace

std::string state_digest(const torch::nn::Module& module) {
    std::vector<std::uint8_t> buf;
    for (const auto& t : module_state(module)) {
        buf.insert(buf.end(), t.name.begin(), t.name.end());
        buf.push_back(0);
        auto hex = tensor_digest(t.value);
        buf.insert(buf.end(), hex.begin(), hex.end());
    }
    return sha256_hex(buf);
}

Level1 embed_level1(const torch::Tensor& style_image, Encoder& e_zplus, const Generator& g) {
    require(e_zplus->target_space() == LatentSpace::ZPlus, ErrorKind::Config, "level 1 needs a Z+ encoder");
    require(g.role() == GeneratorRole::Pretrained, ErrorKind::Config, "level 1 decodes with the pretrained generator");
    torch::NoGradGuard guard;
    auto z1 = encode(style_image, e_zplus);
    auto w1 = map_latent(z1, g);
    auto p1 = synthesize(w1, g);
    return {z1, w1, p1};
}

Level2 optimize_level2(const LatentCode& z1, const torch::Tensor& style_image, const Generator& g_star,
                       const Generator& g, int iters, double lr, double lambda_id, LossNets& nets) {
    require(g_star.role() == GeneratorRole::UnconstrainedFinetuned, ErrorKind::Config,
            "level 2 optimizes through the unconstrained fine-tuned generator G*");
    require(g.role() == GeneratorRole::Pretrained, ErrorKind::Config, "level 2 decodes with the pretrained generator");
    require(z1.space() == LatentSpace::ZPlus, ErrorKind::InvalidCode, "level 2 starts from a Z+ code");
    require(iters >= 1, ErrorKind::InvalidParameter, "level 2 needs iters >= 1");
    g_star.set_requires_grad(false);
    auto target = style_image.unsqueeze(0);
    auto z = z1.values().clone().requires_grad_(true);
    torch::optim::Adam opt({z}, torch::optim::AdamOptions(lr).betas({0.0, 0.99}));

    Level2 out{z1, map_latent(z1, g), {}, {}, 0};
    torch::Tensor best = z.detach().clone();
    double best_loss = INFINITY;
    for (int it = 0; it <= iters; ++it) {
        auto recon = g_star.synthesize_batch(g_star.map(z).unsqueeze(0));
        auto loss = semantic_loss(recon, target, lambda_id, nets);
        const double value = loss.item<double>();
        if (!std::isfinite(value))
            fail(ErrorKind::NumericAbort, "level 2 loss non-finite at iterate " + std::to_string(it));
        out.loss_curve.push_back(value);
        if (value < best_loss) {
            best_loss = value;
            best = z.detach().clone();
            out.best_iterate = it;
        }
        if (it == iters) break;
        opt.zero_grad();
        loss.backward();
        opt.step();
    }
    torch::NoGradGuard guard;
    out.z2 = LatentCode(LatentSpace::ZPlus, best);
    out.w2 = map_latent(out.z2, g);
    out.p2 = synthesize(out.w2, g);
    return out;
}

Level3 refine_level3(const torch::Tensor& style_image, Encoder& e_wplus, const Generator& g) {
    require(e_wplus->target_space() == LatentSpace::WPlus, ErrorKind::Config, "level 3 needs a W+ encoder");
    torch::NoGradGuard guard;
    auto w3 = encode(style_image, e_wplus);
    return {w3, synthesize(w3, g)};
}

const LatentCode& PairedSample::w_at(int level) const {
    switch (level) {
        case 1: return w1;
        case 2: return w2;
        case 3: return w3;
    }
    fail(ErrorKind::InvalidParameter, "pair level must be 1, 2 or 3");
}

const torch::Tensor& PairedSample::p_at(int level) const {
    switch (level) {
        case 1: return p1;
        case 2: return p2;
        case 3: return p3;
    }
    fail(ErrorKind::InvalidParameter, "pair level must be 1, 2 or 3");
}

PairSet PairedDataset::at_level(int level) const {
    require(!samples.empty(), ErrorKind::Config, "pseudo-paired dataset is empty");
    std::vector<torch::Tensor> codes, styles;
    for (const auto& s : samples) {
        codes.push_back(s.w_at(level).values());
        styles.push_back(s.style);
    }
    return {torch::stack(codes), torch::stack(styles)};
}

json PairBuildConfig::to_json() const {
    return {{"iters", iters}, {"lr", lr}, {"lambda_id", lambda_id}, {"level_default", level_default},
            {"style_name", style_name}};
}

namespace {

void write_sample(const fs::path& dir, const PairedSample& s) {
    fs::create_directories(dir);
    save_png(dir / "S.png", s.style);
    save_png(dir / "P1.png", s.p1);
    save_png(dir / "P2.png", s.p2);
    save_png(dir / "P3.png", s.p3);
    const LatentCode* codes[] = {&s.z1, &s.z2, &s.w1, &s.w2, &s.w3};
    for (size_t i = 0; i < std::size(kCodeFiles); ++i) write_f32(dir / (std::string(kCodeFiles[i]) + ".f32"), codes[i]->values());
    // meta.json last: its presence marks the sample complete.
    write_json(dir / "meta.json", s.meta);
}

PairedSample read_sample(const fs::path& dir, const GeneratorConfig& config) {
    auto meta = read_json(dir / "meta.json");
    const std::vector<int64_t> shape = {config.layer_count(), config.latent_dim};
    auto code = [&](const char* name, LatentSpace space) {
        return LatentCode(space, read_f32(dir / (std::string(name) + ".f32"), shape));
    };
    return PairedSample{
        .id = dir.filename().string(),
        .style = image_from_png(dir / "S.png"),
        .p1 = image_from_png(dir / "P1.png"),
        .p2 = image_from_png(dir / "P2.png"),
        .p3 = image_from_png(dir / "P3.png"),
        .z1 = code("z1", LatentSpace::ZPlus),
        .z2 = code("z2", LatentSpace::ZPlus),
        .w1 = code("w1", LatentSpace::WPlus),
        .w2 = code("w2", LatentSpace::WPlus),
        .w3 = code("w3", LatentSpace::WPlus),
        .meta = meta,
    };
}

}  // namespace

PairedDataset build_pair_dataset(const fs::path& style_dir, const fs::path& pairs_dir, const Generator& g,
                                 const Generator& g_star, Encoder& e_zplus, Encoder& e_wplus,
                                 const PairBuildConfig& cfg, LossNets& nets, PairBuildStats* stats) {
    require(g.config() == g_star.config() && e_zplus->config() == g.config() && e_wplus->config() == g.config(),
            ErrorKind::Config, "generators and encoders must share one config");
    require(g_star.role() == GeneratorRole::UnconstrainedFinetuned, ErrorKind::Config,
            "pair generation needs G* (role unconstrained_finetuned), got role " + std::string(to_string(g_star.role())));
    require(cfg.level_default >= 1 && cfg.level_default <= 3, ErrorKind::Config, "level_default must be 1, 2 or 3");
    auto inputs = list_images(style_dir);
    require(!inputs.empty(), ErrorKind::Config, "no style images in " + style_dir.string());
    fs::create_directories(pairs_dir);

    PairBuildStats local;
    PairBuildStats& st = stats ? *stats : local;
    const json models = {{"G", state_digest(g.module())},
                         {"G_star", state_digest(g_star.module())},
                         {"E_zplus", state_digest(*e_zplus)},
                         {"E_wplus", state_digest(*e_wplus)}};
    PairedDataset ds{cfg.style_name, cfg.level_default, pairs_dir, {}};
    json skipped = json::array();
    const int res = g.config().resolution;
    for (const auto& path : inputs) {
        const auto id = path.stem().string();
        const auto dir = pairs_dir / id;
        if (fs::exists(dir / "meta.json")) {
            ds.samples.push_back(read_sample(dir, g.config()));
            ++st.resumed;
            continue;
        }
        torch::Tensor style;
        try {
            style = quantize_8bit(load_image(path, res));
        } catch (const Error& e) {
            log_line("make-pairs", "skipping " + path.string() + ": " + e.what());
            st.skipped.push_back(path.filename().string());
            skipped.push_back({{"file", path.filename().string()}, {"reason", e.what()}});
            continue;
        }
        auto l1 = embed_level1(style, e_zplus, g);
        auto l2 = optimize_level2(l1.z1, style, g_star, g, cfg.iters, cfg.lr, cfg.lambda_id, nets);
        auto l3 = refine_level3(style, e_wplus, g);
        st.optimization_steps += cfg.iters;
        const std::vector<int64_t> shape = {g.config().layer_count(), g.config().latent_dim};
        json meta = {
            {"id", id},
            {"source", path.filename().string()},
            {"shapes", {{"code", shape}, {"image", {3, res, res}}}},
            {"spaces", {{"z1", "ZPlus"}, {"z2", "ZPlus"}, {"w1", "WPlus"}, {"w2", "WPlus"}, {"w3", "WPlus"}}},
            {"level2", {{"iters", cfg.iters},
                        {"lr", cfg.lr},
                        {"lambda_id", cfg.lambda_id},
                        {"initial_loss", l2.initial_loss()},
                        {"final_loss", l2.final_loss()},
                        {"best_iterate", l2.best_iterate}}},
            {"models", models},
        };
        PairedSample s{.id = id,
                       .style = style,
                       .p1 = l1.p1,
                       .p2 = l2.p2,
                       .p3 = l3.p3,
                       .z1 = l1.z1,
                       .z2 = l2.z2,
                       .w1 = l1.w1,
                       .w2 = l2.w2,
                       .w3 = l3.w3,
                       .meta = meta};
        write_sample(dir, s);
        // Keep what was stored so in-memory and reloaded datasets agree.
        ds.samples.push_back(read_sample(dir, g.config()));
        ++st.built;
    }
    require(!ds.samples.empty(), ErrorKind::Config, "no readable style images in " + style_dir.string());
    json ids = json::array();
    for (const auto& s : ds.samples) ids.push_back(s.id);
    json manifest = {{"style_name", cfg.style_name},
                     {"level_default", cfg.level_default},
                     {"config", g.config().to_json()},
                     {"build", cfg.to_json()},
                     {"samples", ids},
                     {"skipped", skipped},
                     {"hash", pair_dataset_hash(pairs_dir)}};
    write_json(pairs_dir / "manifest.json", manifest);
    return ds;
}

PairedDataset load_pair_dataset(const fs::path& pairs_dir, const GeneratorConfig& config) {
    auto manifest = read_json(pairs_dir / "manifest.json");
    PairedDataset ds;
    ds.root = pairs_dir;
    ds.style_name = header_field<std::string>(manifest, "style_name");
    ds.level_default = header_field<int>(manifest, "level_default");
    if (GeneratorConfig::from_json(header_field<json>(manifest, "config")) != config)
        fail(ErrorKind::Config, "pseudo-paired dataset was built for a different generator config");
    for (const auto& id : header_field<std::vector<std::string>>(manifest, "samples"))
        ds.samples.push_back(read_sample(pairs_dir / id, config));
    require(!ds.samples.empty(), ErrorKind::Load, "pseudo-paired dataset " + pairs_dir.string() + " is empty");
    return ds;
}

std::string pair_dataset_hash(const fs::path& pairs_dir) {
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(pairs_dir))
        if (entry.is_directory() && fs::exists(entry.path() / "meta.json")) dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());
    std::string acc;
    for (const auto& dir : dirs) {
        acc += dir.filename().string() + "\n";
        for (const char* name : kImageFiles) acc += sha256_file(dir / (std::string(name) + ".png")) + "\n";
        for (const char* name : kCodeFiles) acc += sha256_file(dir / (std::string(name) + ".f32")) + "\n";
        acc += sha256_file(dir / "meta.json") + "\n";
    }
    return sha256_hex(acc);
}

std::vector<std::string> verify_sample(const PairedSample& s, const Generator& g) {
    torch::NoGradGuard guard;
    std::vector<std::string> problems;
    auto same = [](const torch::Tensor& a, const torch::Tensor& b) { return torch::equal(a, b); };
    if (!same(map_latent(s.z1, g).values(), s.w1.values())) problems.push_back("w1 != mapping(z1)");
    if (!same(map_latent(s.z2, g).values(), s.w2.values())) problems.push_back("w2 != mapping(z2)");
    const LatentCode* codes[] = {&s.w1, &s.w2, &s.w3};
    const torch::Tensor* images[] = {&s.p1, &s.p2, &s.p3};
    for (int i = 0; i < 3; ++i) {
        if (!same(quantize_8bit(synthesize(*codes[i], g)), *images[i]))
            problems.push_back("P" + std::to_string(i + 1) + " does not regenerate from w" + std::to_string(i + 1));
    }
    return problems;
}

}  // namespace semstyle
