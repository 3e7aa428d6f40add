#include "semstyle/workspace.hpp"

#include <algorithm>
#include <cmath>

#include "semstyle/checkpoint.hpp"
#include "semstyle/metrics.hpp"

namespace semstyle {

namespace {

json encoder_config_json(const EncoderTrainConfig& c) {
    return {{"steps", c.steps},           {"batch_size", c.batch_size},     {"lr", c.lr},
            {"lambda_l2", c.lambda_l2},   {"lambda_lpips", c.lambda_lpips}, {"lambda_id", c.lambda_id},
            {"seed", c.seed}};
}

EncoderTrainConfig encoder_config_from(const json& j) {
    EncoderTrainConfig c;
    c.steps = field_or(j, "steps", c.steps);
    c.batch_size = field_or(j, "batch_size", c.batch_size);
    c.lr = field_or(j, "lr", c.lr);
    c.lambda_l2 = field_or(j, "lambda_l2", c.lambda_l2);
    c.lambda_lpips = field_or(j, "lambda_lpips", c.lambda_lpips);
    c.lambda_id = field_or(j, "lambda_id", c.lambda_id);
    c.seed = field_or(j, "seed", c.seed);
    require(c.steps >= 0 && c.batch_size >= 1 && c.lr >= 0, ErrorKind::Config, "encoder config invalid");
    return c;
}

GeneratorConfig generator_config_from(const json& j) {
    GeneratorConfig c;
    c.resolution = field_or(j, "resolution", c.resolution);
    c.latent_dim = field_or(j, "latent_dim", c.latent_dim);
    c.channel_base = field_or(j, "channel_base", c.channel_base);
    c.channel_max = field_or(j, "channel_max", c.channel_max);
    c.mapping_layers = field_or(j, "mapping_layers", c.mapping_layers);
    try {
        c.validate();
    } catch (const Error& e) {
        fail(ErrorKind::Config, std::string("generator config invalid: ") + e.what());
    }
    return c;
}

const json& section(const json& j, const char* key) {
    static const json empty = json::object();
    if (!j.contains(key)) return empty;
    require(j.at(key).is_object(), ErrorKind::Config, std::string("config section '") + key + "' must be an object");
    return j.at(key);
}

void apply_iters(FinetuneConfig& f, const Overrides& ov) {
    if (ov.iters) f.iterations = *ov.iters;
    if (ov.seed) f.seed = *ov.seed;
    if (ov.pair_level) f.pair_level = *ov.pair_level;
}

/// Run directory with an exclusive lock and the effective project config.
struct RunDir {
    fs::path path;
    DirectoryLock lock;
    RunDir(const fs::path& p, const ProjectConfig& cfg) : path(p), lock(p) {
        write_json(p / "project_config.json", cfg.to_json());
    }
};

StepLogger progress_logger(const std::string& component, int total, JsonlWriter* writer = nullptr) {
    int every = std::max(1, total / 10);
    return [component, every, total, writer, step = 0](const json& record) mutable {
        if (writer) writer->write(record);
        ++step;
        if (step % every == 0 || step == total)
            log_line(component, "step " + std::to_string(step) + "/" + std::to_string(total) + " " + record.dump());
    };
}

Encoder load_encoder_checked(const Workspace& ws, LatentSpace space) {
    auto dir = ws.model(encoder_model_name(space));
    require(fs::exists(dir / "manifest.json"), ErrorKind::Config,
            "encoder " + encoder_model_name(space) + " missing; run train-encoder first");
    auto enc = load_encoder(dir);
    freeze(*enc);
    return enc;
}

Generator load_generator_checked(const fs::path& dir, const std::string& what) {
    require(fs::exists(dir / "manifest.json"), ErrorKind::Config, what + " missing at " + dir.string());
    auto g = load_generator(dir);
    g.set_requires_grad(false);
    return g;
}

std::string png_digest(const torch::Tensor& image) {
    auto bytes = encode_png(image);
    return sha256_hex(bytes);
}

torch::Tensor load_set(const Workspace& ws, const std::string& set, int resolution) {
    auto dir = ws.data(set);
    require(fs::is_directory(dir) && !list_images(dir).empty(), ErrorKind::Config,
            "image set '" + set + "' missing; run make-data first");
    return load_image_batch(dir, resolution);
}

torch::Tensor stack_stylized(const torch::Tensor& portraits, Encoder& e_w, const Generator& g_prime, double psi) {
    std::vector<torch::Tensor> out;
    for (int64_t i = 0; i < portraits.size(0); ++i) out.push_back(stylize_general(portraits[i], psi, e_w, g_prime).image);
    return torch::stack(out);
}

struct EvalContext {
    Generator g;
    Discriminator disc;
    Encoder e_w;
    LossNets nets;
    torch::Tensor style_images;
    torch::Tensor test_images;
    FeatureSet style_features;
};

EvalContext load_eval_context(const Workspace& ws, const ProjectConfig& cfg, const std::string& style) {
    auto g = load_generator_checked(ws.model("G"), "pretrained generator");
    auto disc = load_discriminator(ws.model("D"));
    freeze(*disc);
    auto e_w = load_encoder_checked(ws, LatentSpace::W);
    auto nets = load_loss_nets(ws, cfg);
    auto styles = load_set(ws, style, cfg.generator.resolution);
    auto tests = load_set(ws, "test", cfg.generator.resolution);
    auto features = extract_features(styles, disc);
    return {std::move(g), disc, e_w, nets, styles, tests, features};
}

/// Metric records for one fine-tuned generator.
json evaluate_generator(EvalContext& ctx, const Generator& g_prime, const ProjectConfig& cfg, double psi) {
    const auto& ev = cfg.evaluate;
    json records = json::array();
    const auto id = ctx.style_features.extractor_id;

    auto samples = sample_images(g_prime, ev.samples, ev.seed, 1.0);
    auto sample_fid = fid(extract_features(samples, ctx.disc), ctx.style_features);
    records.push_back(metric_record("fid_samples", sample_fid, id, ev.samples, ev.seed));

    auto stylized = stack_stylized(ctx.test_images, ctx.e_w, g_prime, psi);
    auto stylized_fid = fid(extract_features(stylized, ctx.disc), ctx.style_features);
    const auto n_test = ctx.test_images.size(0);
    records.push_back(metric_record("fid_stylized", stylized_fid, id, n_test, 0));

    auto dis = semantic_distance(ctx.g, g_prime, ev.semantic_samples, ev.seed, ctx.nets.perceptual);
    records.push_back(metric_record("semantic_distance", dis, "lpips", ev.semantic_samples, ev.seed));

    records.push_back(metric_record("perceptual", perceptual_distance(ctx.test_images, stylized, ctx.nets.perceptual),
                                    "lpips", n_test, 0));
    records.push_back(metric_record("identity", identity_distance(ctx.test_images, stylized, ctx.nets.identity),
                                    "identity", n_test, 0));
    return records;
}

json summarize_row(const json& records) {
    json row = json::object();
    for (const auto& r : records) row[r.at("metric").get<std::string>()] = r.at("value");
    return row;
}

void write_report(const fs::path& dir, const json& report) {
    fs::create_directories(dir);
    write_json(dir / "report.json", report);
}

}  // namespace

// ---------------------------------------------------------------------------

json ProjectConfig::to_json() const {
    json pairs_json = pairs.to_json();
    // the pair set is always named after the project style
    pairs_json["style_name"] = style;
    return {{"generator", generator.to_json()},
            {"style", style},
            {"data",
             {{"real_count", data.real_count},
              {"test_count", data.test_count},
              {"style_count", data.style_count},
              {"style_kind", data.style_kind},
              {"seed", data.seed}}},
            {"pretrain", pretrain.to_json()},
            {"encoder", encoder_config_json(encoder)},
            {"finetune", finetune.to_json()},
            {"pairs", pairs_json},
            {"inversion",
             {{"iters", inversion.iters},
              {"lr", inversion.lr},
              {"lambda_id", inversion.lambda_id},
              {"seed", inversion.seed},
              {"basis_k", basis_k}}},
            {"policy", {{"truncation_psi", policy_psi}}},
            {"evaluate",
             {{"samples", evaluate.samples}, {"semantic_samples", evaluate.semantic_samples}, {"seed", evaluate.seed}}},
            {"study",
             {{"references", study.references},
              {"iterations", study.iterations},
              {"lambda_semantic_values", study.lambda_semantic_values},
              {"lambda_paired_values", study.lambda_paired_values}}},
            {"loss_nets", {{"perceptual_seed", perceptual_seed}, {"identity_seed", identity_seed}}}};
}

ProjectConfig ProjectConfig::from_json(const json& j) {
    require(j.is_object(), ErrorKind::Config, "config must be a JSON object");
    ProjectConfig c;
    c.generator = generator_config_from(section(j, "generator"));
    c.style = field_or(j, "style", c.style);
    require(!c.style.empty() && c.style.find('/') == std::string::npos && c.style != "runs" && c.style != "models" &&
                c.style != "data" && c.style != "cache",
            ErrorKind::Config, "style name '" + c.style + "' is not a usable directory name");

    const auto& d = section(j, "data");
    c.data.real_count = field_or(d, "real_count", c.data.real_count);
    c.data.test_count = field_or(d, "test_count", c.data.test_count);
    c.data.style_count = field_or(d, "style_count", c.data.style_count);
    c.data.style_kind = field_or(d, "style_kind", c.data.style_kind);
    c.data.seed = field_or(d, "seed", c.data.seed);
    require(c.data.real_count >= 1 && c.data.test_count >= 2 && c.data.style_count >= 2, ErrorKind::Config,
            "data counts too small");
    try {
        (void)parse_face_style(c.data.style_kind);
    } catch (const Error& e) {
        fail(ErrorKind::Config, e.what());
    }

    c.pretrain = PretrainConfig::from_json(section(j, "pretrain"));
    c.encoder = encoder_config_from(section(j, "encoder"));
    c.finetune = FinetuneConfig::from_json(section(j, "finetune"));

    const auto& p = section(j, "pairs");
    c.pairs.iters = field_or(p, "iters", c.pairs.iters);
    c.pairs.lr = field_or(p, "lr", c.pairs.lr);
    c.pairs.lambda_id = field_or(p, "lambda_id", c.pairs.lambda_id);
    c.pairs.level_default = field_or(p, "level_default", c.pairs.level_default);
    require(c.pairs.iters >= 1 && c.pairs.lr >= 0 && c.pairs.lambda_id >= 0, ErrorKind::Config, "pairs config invalid");

    const auto& inv = section(j, "inversion");
    c.inversion.iters = field_or(inv, "iters", c.inversion.iters);
    c.inversion.lr = field_or(inv, "lr", c.inversion.lr);
    c.inversion.lambda_id = field_or(inv, "lambda_id", c.inversion.lambda_id);
    c.inversion.seed = field_or(inv, "seed", c.inversion.seed);
    c.basis_k = field_or(inv, "basis_k", c.basis_k);
    require(c.inversion.iters >= 1 && c.basis_k >= 1 && c.basis_k <= c.generator.latent_dim, ErrorKind::Config,
            "inversion config invalid");

    c.policy_psi = field_or(section(j, "policy"), "truncation_psi", c.policy_psi);
    require(c.policy_psi >= 0 && c.policy_psi <= 1, ErrorKind::Config, "policy truncation_psi must lie in [0, 1]");

    const auto& ev = section(j, "evaluate");
    c.evaluate.samples = field_or(ev, "samples", c.evaluate.samples);
    c.evaluate.semantic_samples = field_or(ev, "semantic_samples", c.evaluate.semantic_samples);
    c.evaluate.seed = field_or(ev, "seed", c.evaluate.seed);
    require(c.evaluate.samples >= 2 && c.evaluate.semantic_samples >= 1, ErrorKind::Config, "evaluate config invalid");

    const auto& st = section(j, "study");
    c.study.references = field_or(st, "references", c.study.references);
    c.study.iterations = field_or(st, "iterations", c.study.iterations);
    c.study.lambda_semantic_values = field_or(st, "lambda_semantic_values", c.study.lambda_semantic_values);
    c.study.lambda_paired_values = field_or(st, "lambda_paired_values", c.study.lambda_paired_values);
    require(c.study.references >= 1 && c.study.iterations >= 1, ErrorKind::Config, "study config invalid");

    const auto& ln = section(j, "loss_nets");
    c.perceptual_seed = field_or(ln, "perceptual_seed", c.perceptual_seed);
    c.identity_seed = field_or(ln, "identity_seed", c.identity_seed);
    c.pairs.style_name = c.style;
    return c;
}

Workspace::Workspace(fs::path root) : root_(std::move(root)) {}

ProjectConfig Workspace::load_config(const std::optional<fs::path>& config_file) const {
    fs::path path = config_file ? *config_file : config_path();
    if (!fs::exists(path)) {
        require(!config_file, ErrorKind::Config, "config file " + path.string() + " not found");
        return ProjectConfig{};
    }
    json j;
    try {
        j = read_json(path);
    } catch (const Error& e) {
        fail(ErrorKind::Config, std::string("cannot read config: ") + e.what());
    }
    return ProjectConfig::from_json(j);
}

std::string encoder_model_name(LatentSpace space) {
    switch (space) {
        case LatentSpace::W: return "E_w";
        case LatentSpace::WPlus: return "E_wplus";
        case LatentSpace::ZPlus: return "E_zplus";
        default: fail(ErrorKind::Config, "encoders target W, W+ or Z+, not " + std::string(to_string(space)));
    }
}

LossNets load_loss_nets(const Workspace& ws, const ProjectConfig& cfg) {
    LossNets nets;
    auto pdir = ws.model("perceptual");
    auto idir = ws.model("identity");
    if (fs::exists(pdir / "manifest.json") && fs::exists(idir / "manifest.json")) {
        nets.perceptual = load_perceptual_net(pdir);
        nets.identity = load_identity_net(idir);
        freeze(*nets.perceptual);
        freeze(*nets.identity);
    } else {
        nets = random_loss_nets(cfg.perceptual_seed, cfg.identity_seed);
    }
    return nets;
}

StyleModels load_style(const Workspace& ws, const std::string& style, int basis_k) {
    auto policy_path = ws.style_dir(style) / "policy.json";
    require(fs::exists(policy_path), ErrorKind::NotFound, "unknown style '" + style + "'");
    auto policy = StylePolicy::from_json(read_json(policy_path));
    auto g_prime = load_generator_checked(ws.root() / policy.generator_ckpt, "style generator");
    policy.validate(g_prime.config().layer_count());
    auto basis = sefa_basis(g_prime, basis_k);
    return {std::move(policy), std::move(g_prime), std::move(basis)};
}

// Subcommands ----------------------------------------------------------------

json cmd_make_data(const Workspace& ws, const ProjectConfig& cfg) {
    const auto res = cfg.generator.resolution;
    const auto& d = cfg.data;
    fs::create_directories(ws.root());
    write_json(ws.config_path(), cfg.to_json());
    auto real = make_face_dataset(ws.data("real"), d.real_count, FaceStyle::Real, d.seed, res);
    auto test = make_face_dataset(ws.data("test"), d.test_count, FaceStyle::Real, d.seed + 1, res);
    auto style = make_face_dataset(ws.data(cfg.style), d.style_count, parse_face_style(d.style_kind), d.seed + 2, res);
    auto digest = [](const std::vector<fs::path>& files) {
        std::string acc;
        for (const auto& f : files) acc += sha256_file(f);
        return sha256_hex(acc);
    };
    return {{"command", "make-data"},
            {"real", {{"count", real.size()}, {"hash", digest(real)}}},
            {"test", {{"count", test.size()}, {"hash", digest(test)}}},
            {cfg.style, {{"count", style.size()}, {"hash", digest(style)}}}};
}

json cmd_pretrain(const Workspace& ws, ProjectConfig cfg, const Overrides& ov) {
    if (ov.iters) cfg.pretrain.steps = *ov.iters;
    if (ov.seed) cfg.pretrain.seed = *ov.seed;
    auto real = load_set(ws, "real", cfg.generator.resolution);
    RunDir run(ws.run("pretrain"), cfg);
    write_json(run.path / "config.json", cfg.pretrain.to_json());
    JsonlWriter writer(run.path / "log.jsonl");
    auto result = pretrain(cfg.generator, real, cfg.pretrain, progress_logger("pretrain", cfg.pretrain.steps, &writer));
    save_generator(result.generator, ws.model("G"));
    save_discriminator(result.discriminator, ws.model("D"));
    auto nets = random_loss_nets(cfg.perceptual_seed, cfg.identity_seed);
    save_perceptual_net(nets.perceptual, ws.model("perceptual"));
    save_identity_net(nets.identity, ws.model("identity"));
    json report = {{"command", "pretrain"},
                   {"steps", cfg.pretrain.steps},
                   {"generator_hash", checkpoint_hash(ws.model("G"))},
                   {"discriminator_hash", checkpoint_hash(ws.model("D"))},
                   {"final", result.reports.empty() ? json(nullptr) : result.reports.back().to_json()}};
    write_report(run.path, report);
    return report;
}

json cmd_train_encoder(const Workspace& ws, ProjectConfig cfg, LatentSpace space, const Overrides& ov) {
    const auto name = encoder_model_name(space);
    if (ov.iters) cfg.encoder.steps = *ov.iters;
    if (ov.seed) cfg.encoder.seed = *ov.seed;
    auto g = load_generator_checked(ws.model("G"), "pretrained generator");
    auto real = load_set(ws, "real", cfg.generator.resolution);
    auto nets = load_loss_nets(ws, cfg);
    RunDir run(ws.run("encoder-" + name), cfg);
    write_json(run.path / "config.json", encoder_config_json(cfg.encoder));
    JsonlWriter writer(run.path / "log.jsonl");
    auto enc = make_encoder(space, g, cfg.encoder.seed);
    auto report_losses = train_encoder(enc, g, real, cfg.encoder, nets, progress_logger(name, cfg.encoder.steps, &writer));
    save_encoder(enc, ws.model(name));
    json report = {{"command", "train-encoder"},
                   {"encoder", name},
                   {"steps", cfg.encoder.steps},
                   {"encoder_hash", checkpoint_hash(ws.model(name))},
                   {"first_loss", report_losses.losses.empty() ? json(nullptr) : json(report_losses.losses.front())},
                   {"last_loss", report_losses.losses.empty() ? json(nullptr) : json(report_losses.losses.back())}};
    write_report(run.path, report);
    return report;
}

namespace {

json run_finetune(const Workspace& ws, const ProjectConfig& cfg, const std::string& style, const FinetuneConfig& ft,
                  const std::optional<PairSet>& pairs, const fs::path& run_path, const fs::path& output,
                  const std::string& command) {
    auto g = load_generator_checked(ws.model("G"), "pretrained generator");
    require(g.config() == cfg.generator, ErrorKind::Config, "pretrained generator config differs from the project config");
    auto styles = load_set(ws, style, cfg.generator.resolution);
    auto nets = load_loss_nets(ws, cfg);
    std::optional<Discriminator> disc;
    if (fs::exists(ws.model("D") / "manifest.json")) disc = load_discriminator(ws.model("D"));
    fs::create_directories(run_path);
    write_json(run_path / "project_config.json", cfg.to_json());
    auto result = finetune(g, styles, pairs, ft, nets, disc ? &*disc : nullptr, run_path,
                           progress_logger(command, ft.iterations));
    save_generator(result.generator, output);
    json report = {{"command", command},
                   {"style", style},
                   {"role", to_string(result.generator.role())},
                   {"iterations", ft.iterations},
                   {"generator_hash", checkpoint_hash(output)},
                   {"final", result.reports.back().to_json()},
                   {"log_hash", sha256_file(run_path / "log.jsonl")}};
    write_report(run_path, report);
    return report;
}

}  // namespace

json cmd_finetune_unconstrained(const Workspace& ws, ProjectConfig cfg, const std::string& style,
                                const Overrides& ov) {
    auto ft = cfg.finetune;
    apply_iters(ft, ov);
    ft.lambda_semantic = 0.0;
    ft.lambda_paired = 0.0;
    ft.validate();
    return run_finetune(ws, cfg, style, ft, std::nullopt, ws.run(style + "-unconstrained"),
                        ws.style_dir(style) / "G_star", "finetune-unconstrained");
}

json cmd_make_pairs(const Workspace& ws, ProjectConfig cfg, const std::string& style, const Overrides& ov,
                    PairBuildStats* stats) {
    if (ov.iters) cfg.pairs.iters = *ov.iters;
    if (ov.pair_level) cfg.pairs.level_default = *ov.pair_level;
    cfg.pairs.style_name = style;
    auto g_star = load_generator_checked(ws.style_dir(style) / "G_star", "G*");
    require(g_star.role() == GeneratorRole::UnconstrainedFinetuned, ErrorKind::Config,
            "make-pairs needs an unconstrained_finetuned generator, " + (ws.style_dir(style) / "G_star").string() +
                " has role " + std::string(to_string(g_star.role())));
    auto g = load_generator_checked(ws.model("G"), "pretrained generator");
    auto e_zplus = load_encoder_checked(ws, LatentSpace::ZPlus);
    auto e_wplus = load_encoder_checked(ws, LatentSpace::WPlus);
    auto nets = load_loss_nets(ws, cfg);
    RunDir run(ws.run(style + "-pairs"), cfg);
    PairBuildStats local;
    PairBuildStats& st = stats ? *stats : local;
    auto ds = build_pair_dataset(ws.data(style), ws.style_dir(style) / "pairs", g, g_star, e_zplus, e_wplus,
                                 cfg.pairs, nets, &st);
    json level2 = json::array();
    for (const auto& s : ds.samples)
        level2.push_back({{"id", s.id}, {"initial_loss", s.meta.at("level2").at("initial_loss")},
                          {"final_loss", s.meta.at("level2").at("final_loss")}});
    json report = {{"command", "make-pairs"},
                   {"style", style},
                   {"samples", ds.samples.size()},
                   {"built", st.built},
                   {"resumed", st.resumed},
                   {"optimization_steps", st.optimization_steps},
                   {"skipped", st.skipped},
                   {"dataset_hash", pair_dataset_hash(ws.style_dir(style) / "pairs")},
                   {"level2", level2}};
    write_report(run.path, report);
    return report;
}

json cmd_finetune(const Workspace& ws, ProjectConfig cfg, const std::string& style, const Overrides& ov,
                  const std::optional<fs::path>& pairs_dir, const std::optional<std::string>& run_name,
                  const std::optional<fs::path>& output) {
    auto ft = cfg.finetune;
    apply_iters(ft, ov);
    ft.validate();
    const fs::path pairs_path = pairs_dir ? *pairs_dir : ws.style_dir(style) / "pairs";
    std::optional<PairSet> pairs;
    if (ft.lambda_paired > 0.0) {
        require(fs::exists(pairs_path / "manifest.json"), ErrorKind::Config,
                "lambda_paired > 0 needs a pseudo-paired dataset, none at " + pairs_path.string() +
                    " (run make-pairs or pass --pairs)");
        pairs = load_pair_dataset(pairs_path, cfg.generator).at_level(ft.pair_level);
    }
    const auto run_path = ws.run(run_name ? *run_name : style + "-constrained");
    const auto out = output ? *output : ws.style_dir(style) / "G_prime";
    auto report = run_finetune(ws, cfg, style, ft, pairs, run_path, out, "finetune");
    if (!output) {
        StylePolicy policy;
        policy.style_id = style;
        policy.generator_ckpt = fs::relative(out, ws.root()).generic_string();
        policy.truncation_psi = ov.psi ? *ov.psi : cfg.policy_psi;
        policy.default_mix_indices = scaled_mix_indices(cfg.generator.layer_count());
        policy.pair_level_used = ft.pair_level;
        policy.validate(cfg.generator.layer_count());
        write_json(ws.style_dir(style) / "policy.json", policy.to_json());
        report["policy"] = policy.to_json();
    }
    return report;
}

json cmd_stylize(const Workspace& ws, const ProjectConfig& cfg, const std::string& style, const fs::path& input,
                 const fs::path& output, const Overrides& ov) {
    auto models = load_style(ws, style, cfg.basis_k);
    auto e_w = load_encoder_checked(ws, LatentSpace::W);
    auto image = load_image(input, models.g_prime.config().resolution);
    const double psi = ov.psi ? *ov.psi : models.policy.truncation_psi;
    auto out = stylize_general(image, psi, e_w, models.g_prime);
    save_png(output, out.image);
    return {{"command", "stylize"}, {"style", style}, {"psi", psi}, {"output", output.string()},
            {"image_hash", png_digest(out.image)}};
}

json cmd_mix(const Workspace& ws, const ProjectConfig& cfg, const std::string& style, const fs::path& input,
             const fs::path& output, const Overrides& ov, const std::string& reference_id) {
    auto models = load_style(ws, style, cfg.basis_k);
    auto e_w = load_encoder_checked(ws, LatentSpace::W);
    auto image = load_image(input, models.g_prime.config().resolution);
    const auto layers = models.g_prime.config().layer_count();
    const double psi = ov.psi ? *ov.psi : models.policy.truncation_psi;
    const int64_t k = ov.k ? *ov.k
                           : (models.policy.default_mix_indices.empty() ? layers
                                                                        : models.policy.default_mix_indices.front());
    require(k >= 0 && k <= layers, ErrorKind::InvalidParameter,
            "mix index " + std::to_string(k) + " outside [0, " + std::to_string(layers) + "]");
    json report = {{"command", "mix"}, {"style", style}, {"k", k}, {"psi", psi}};
    auto out = [&]() -> Stylized {
        if (reference_id.empty()) {
            MixSpec spec;
            spec.k = k;
            spec.truncation_psi = psi;
            spec.seed = ov.seed ? *ov.seed : 0;
            report["mode"] = "noise";
            report["seed"] = spec.seed;
            return stylize_multimodal_one(image, spec, e_w, models.g_prime);
        }
        ReferenceCache cache(ws.refs_cache());
        auto ref = cache.get(style, reference_id);
        require(ref.has_value(), ErrorKind::NotFound,
                "reference '" + reference_id + "' not found for style '" + style + "'; run invert-ref first");
        report["mode"] = "reference";
        report["reference_id"] = reference_id;
        return stylize_reference(image, models.policy, psi, e_w, models.g_prime, *ref, k);
    }();
    save_png(output, out.image);
    report["output"] = output.string();
    report["image_hash"] = png_digest(out.image);
    return report;
}

json cmd_invert_ref(const Workspace& ws, ProjectConfig cfg, const std::string& style, const fs::path& input,
                    const Overrides& ov) {
    if (ov.iters) cfg.inversion.iters = *ov.iters;
    if (ov.seed) cfg.inversion.seed = *ov.seed;
    auto models = load_style(ws, style, cfg.basis_k);
    auto nets = load_loss_nets(ws, cfg);
    auto image = load_image(input, models.g_prime.config().resolution);
    ReferenceCache cache(ws.refs_cache());
    ReferenceStats stats;
    auto emb = embed_reference(image, style, models.g_prime, models.basis, cache, cfg.inversion, nets, &stats);
    return {{"command", "invert-ref"},
            {"style", style},
            {"reference_id", emb.image_hash},
            {"cache_hit", stats.cache_hit},
            {"inversion_steps", stats.inversion_steps},
            {"final_loss", emb.meta.value("final_loss", json(nullptr))}};
}

json cmd_evaluate(const Workspace& ws, const ProjectConfig& cfg, const std::string& style,
                  const std::optional<fs::path>& generator_dir, const Overrides& ov) {
    const auto dir = generator_dir ? *generator_dir : ws.style_dir(style) / "G_prime";
    auto g_prime = load_generator_checked(dir, "generator under evaluation");
    auto ctx = load_eval_context(ws, cfg, style);
    const double psi = ov.psi ? *ov.psi : cfg.policy_psi;
    json report = {{"command", "evaluate"},
                   {"style", style},
                   {"generator", fs::relative(dir, ws.root()).generic_string()},
                   {"generator_hash", checkpoint_hash(dir)},
                   {"role", to_string(g_prime.role())},
                   {"psi", psi},
                   {"metrics", evaluate_generator(ctx, g_prime, cfg, psi)}};
    auto name = fs::relative(dir, ws.root()).generic_string();
    std::replace(name.begin(), name.end(), '/', '-');
    write_report(ws.run("evaluate-" + name), report);
    return report;
}

// Studies ----------------------------------------------------------------------

json cmd_study_content_space(const Workspace& ws, const ProjectConfig& cfg, const std::string& style,
                             const Overrides& ov) {
    auto models = load_style(ws, style, cfg.basis_k);
    auto ctx = load_eval_context(ws, cfg, style);
    const double psi = ov.psi ? *ov.psi : models.policy.truncation_psi;
    const auto& gp = models.g_prime;
    const auto layers = gp.config().layer_count();
    json rows = json::array();
    for (auto space : {LatentSpace::W, LatentSpace::WPlus, LatentSpace::ZPlus}) {
        auto enc = load_encoder_checked(ws, space);
        std::vector<torch::Tensor> outs;
        for (int64_t i = 0; i < ctx.test_images.size(0); ++i) {
            torch::NoGradGuard guard;
            auto code = encode(ctx.test_images[i], enc);
            LatentCode wplus = space == LatentSpace::W       ? broadcast_w(code, layers)
                               : space == LatentSpace::ZPlus ? map_latent(code, gp)
                                                             : code;
            outs.push_back(synthesize(truncate(wplus, psi, gp), gp));
        }
        auto stylized = torch::stack(outs);
        const auto n = ctx.test_images.size(0);
        rows.push_back({{"content_space", to_string(space)},
                        {"fid_stylized", fid(extract_features(stylized, ctx.disc), ctx.style_features)},
                        {"perceptual", perceptual_distance(ctx.test_images, stylized, ctx.nets.perceptual)},
                        {"identity", identity_distance(ctx.test_images, stylized, ctx.nets.identity)},
                        {"n", n}});
    }
    json table = {{"study", "content-space"}, {"style", style}, {"psi", psi},
                  {"extractor_id", ctx.style_features.extractor_id}, {"rows", rows}};
    write_report(ws.run("study-content-space-" + style), table);
    return table;
}

json cmd_study_ref_space(const Workspace& ws, ProjectConfig cfg, const std::string& style, const Overrides& ov) {
    if (ov.iters) cfg.inversion.iters = *ov.iters;
    if (ov.seed) cfg.inversion.seed = *ov.seed;
    auto models = load_style(ws, style, cfg.basis_k);
    auto nets = load_loss_nets(ws, cfg);
    auto refs = load_set(ws, style, cfg.generator.resolution);
    const auto n = std::min<int64_t>(cfg.study.references, refs.size(0));
    refs = refs.slice(0, 0, n);
    json rows = json::array();
    for (auto space : {LatentSpace::WPlus, LatentSpace::ZPlus, LatentSpace::W, LatentSpace::V}) {
        std::vector<torch::Tensor> recons;
        double initial = 0.0, final = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            auto r = invert(refs[i], models.g_prime, space, cfg.inversion, nets,
                            space == LatentSpace::V ? &models.basis : nullptr);
            recons.push_back(r.recon);
            initial += r.initial_loss();
            final += r.final_loss();
        }
        auto stacked = torch::stack(recons);
        rows.push_back({{"ref_space", to_string(space)},
                        {"initial_loss", initial / static_cast<double>(n)},
                        {"final_loss", final / static_cast<double>(n)},
                        {"perceptual", perceptual_distance(refs, stacked, nets.perceptual)},
                        {"identity", identity_distance(refs, stacked, nets.identity)},
                        {"n", n}});
    }
    json table = {{"study", "ref-space"}, {"style", style}, {"iters", cfg.inversion.iters}, {"rows", rows}};
    write_report(ws.run("study-ref-space-" + style), table);
    return table;
}

json cmd_study_pair_level(const Workspace& ws, ProjectConfig cfg, const std::string& style, const Overrides& ov) {
    const auto pairs_path = ws.style_dir(style) / "pairs";
    require(fs::exists(pairs_path / "manifest.json"), ErrorKind::Config,
            "pair-level study needs the pseudo-paired dataset; run make-pairs first");
    auto dataset = load_pair_dataset(pairs_path, cfg.generator);
    const auto study_dir = ws.run("study-pair-level-" + style);
    fs::create_directories(study_dir);
    DirectoryLock lock(study_dir);
    auto ft = cfg.finetune;
    ft.iterations = ov.iters ? *ov.iters : cfg.study.iterations;
    if (ov.seed) ft.seed = *ov.seed;
    auto ctx = load_eval_context(ws, cfg, style);
    const double psi = ov.psi ? *ov.psi : cfg.policy_psi;
    json rows = json::array();
    for (int level = 1; level <= 3; ++level) {
        ft.pair_level = level;
        ft.validate();
        const auto run_path = study_dir / ("level" + std::to_string(level));
        auto report = run_finetune(ws, cfg, style, ft, dataset.at_level(level), run_path, run_path / "G_prime",
                                   "study-pair-level");
        auto g_prime = load_generator(run_path / "G_prime");
        json row = summarize_row(evaluate_generator(ctx, g_prime, cfg, psi));
        row["level"] = level;
        row["generator_hash"] = report["generator_hash"];
        rows.push_back(row);
        log_line("study", "pair level " + std::to_string(level) + ": " + row.dump());
    }
    json table = {{"study", "pair-level"}, {"style", style}, {"iterations", ft.iterations}, {"psi", psi},
                  {"extractor_id", ctx.style_features.extractor_id}, {"rows", rows}};
    write_json(study_dir / "table.json", table);
    return table;
}

json cmd_study_sweep(const Workspace& ws, ProjectConfig cfg, const std::string& style, const std::string& param,
                     const Overrides& ov, const std::vector<double>& values) {
    require(param == "lambda_semantic" || param == "lambda_paired", ErrorKind::Config,
            "sweep parameter must be lambda_semantic or lambda_paired, got '" + param + "'");
    const auto& preset = param == "lambda_semantic" ? cfg.study.lambda_semantic_values : cfg.study.lambda_paired_values;
    const auto& grid = values.empty() ? preset : values;
    require(!grid.empty(), ErrorKind::Config, "sweep needs at least one value");
    auto ft = cfg.finetune;
    ft.iterations = ov.iters ? *ov.iters : cfg.study.iterations;
    if (ov.seed) ft.seed = *ov.seed;
    if (ov.pair_level) ft.pair_level = *ov.pair_level;
    for (double v : grid) require(v >= 0.0, ErrorKind::Config, "sweep values must be >= 0");

    std::optional<PairedDataset> dataset;
    const auto pairs_path = ws.style_dir(style) / "pairs";
    const bool needs_pairs = param == "lambda_paired" ? std::any_of(grid.begin(), grid.end(), [](double v) { return v > 0; })
                                                      : ft.lambda_paired > 0;
    if (needs_pairs) {
        require(fs::exists(pairs_path / "manifest.json"), ErrorKind::Config,
                "sweep with lambda_paired > 0 needs the pseudo-paired dataset; run make-pairs first");
        dataset = load_pair_dataset(pairs_path, cfg.generator);
    }
    const auto study_dir = ws.run("study-sweep-" + param + "-" + style);
    fs::create_directories(study_dir);
    DirectoryLock lock(study_dir);
    auto ctx = load_eval_context(ws, cfg, style);
    const double psi = ov.psi ? *ov.psi : cfg.policy_psi;
    json rows = json::array();
    for (size_t i = 0; i < grid.size(); ++i) {
        auto run_cfg = ft;
        (param == "lambda_semantic" ? run_cfg.lambda_semantic : run_cfg.lambda_paired) = grid[i];
        run_cfg.validate();
        std::optional<PairSet> pairs;
        if (run_cfg.lambda_paired > 0) pairs = dataset->at_level(run_cfg.pair_level);
        const auto run_path = study_dir / ("run" + std::to_string(i));
        auto report = run_finetune(ws, cfg, style, run_cfg, pairs, run_path, run_path / "G_prime", "study-sweep");
        auto g_prime = load_generator(run_path / "G_prime");
        json row = summarize_row(evaluate_generator(ctx, g_prime, cfg, psi));
        row[param] = grid[i];
        row["generator_hash"] = report["generator_hash"];
        rows.push_back(row);
        log_line("study", param + " = " + std::to_string(grid[i]) + ": " + row.dump());
    }
    json table = {{"study", "sweep"}, {"param", param}, {"style", style}, {"iterations", ft.iterations},
                  {"extractor_id", ctx.style_features.extractor_id}, {"rows", rows}};
    write_json(study_dir / "table.json", table);
    return table;
}

}  // namespace semstyle
