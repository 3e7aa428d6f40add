#include "semstyle/finetune.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cmath>

#include "semstyle/checkpoint.hpp"

namespace semstyle {

namespace {

void set_requires_grad(torch::nn::Module& module, bool on) {
    for (auto& p : module.parameters()) p.set_requires_grad(on);
}

Discriminator copy_discriminator(const Discriminator& src) {
    Discriminator out(src->config(), src->seed());
    load_module_state(*out, module_state(*src));
    return out;
}

std::string breakdown(const StepReport& r) {
    return "adv " + std::to_string(r.adv) + ", semantic " + std::to_string(r.semantic) + ", paired " +
           std::to_string(r.paired) + ", d_loss " + std::to_string(r.d_loss);
}

}  // namespace

void FinetuneConfig::validate() const {
    require(lambda_id >= 0 && lambda_semantic >= 0 && lambda_paired >= 0, ErrorKind::Config,
            "loss weights must be >= 0");
    require(lr >= 0, ErrorKind::Config, "lr must be >= 0");
    require(batch_size >= 1, ErrorKind::Config, "batch_size must be >= 1");
    require(iterations >= 1, ErrorKind::Config, "iterations must be >= 1");
    require(pair_level >= 1 && pair_level <= 3, ErrorKind::Config, "pair_level must be 1, 2 or 3");
    require(truncation_psi_eval >= 0 && truncation_psi_eval <= 1, ErrorKind::Config,
            "truncation_psi_eval must lie in [0, 1]");
    require(r1_gamma >= 0 && r1_interval >= 1, ErrorKind::Config, "r1 settings invalid");
    require(checkpoint_every >= 0, ErrorKind::Config, "checkpoint_every must be >= 0");
}

json FinetuneConfig::to_json() const {
    return {{"lambda_id", lambda_id},
            {"lambda_semantic", lambda_semantic},
            {"lambda_paired", lambda_paired},
            {"lr", lr},
            {"batch_size", batch_size},
            {"iterations", iterations},
            {"pair_level", pair_level},
            {"truncation_psi_eval", truncation_psi_eval},
            {"seed", seed},
            {"r1_gamma", r1_gamma},
            {"r1_interval", r1_interval},
            {"checkpoint_every", checkpoint_every}};
}

FinetuneConfig FinetuneConfig::from_json(const json& j) {
    FinetuneConfig c;
    c.lambda_id = field_or(j, "lambda_id", c.lambda_id);
    c.lambda_semantic = field_or(j, "lambda_semantic", c.lambda_semantic);
    c.lambda_paired = field_or(j, "lambda_paired", c.lambda_paired);
    c.lr = field_or(j, "lr", c.lr);
    c.batch_size = field_or(j, "batch_size", c.batch_size);
    c.iterations = field_or(j, "iterations", c.iterations);
    c.pair_level = field_or(j, "pair_level", c.pair_level);
    c.truncation_psi_eval = field_or(j, "truncation_psi_eval", c.truncation_psi_eval);
    c.seed = field_or(j, "seed", c.seed);
    c.r1_gamma = field_or(j, "r1_gamma", c.r1_gamma);
    c.r1_interval = field_or(j, "r1_interval", c.r1_interval);
    c.checkpoint_every = field_or(j, "checkpoint_every", c.checkpoint_every);
    c.validate();
    return c;
}

json StepReport::to_json() const {
    json j = {{"step", step},         {"adv", adv},     {"semantic", semantic},
              {"paired", paired},     {"total", total}, {"d_loss", d_loss}};
    if (r1) j["r1"] = *r1;
    return j;
}

FinetuneState::FinetuneState(const Generator& g_prime, Discriminator& disc, const FinetuneConfig& cfg,
                             bool train_mapping)
    : rng(make_rng(cfg.seed * 2654435761ULL + 17)) {
    auto adam = torch::optim::AdamOptions(cfg.lr).betas({0.0, 0.99}).eps(1e-8);
    auto g_params = train_mapping ? g_prime.parameters() : g_prime.synthesis_parameters();
    g_opt = std::make_unique<torch::optim::Adam>(g_params, adam);
    d_opt = std::make_unique<torch::optim::Adam>(disc->parameters(), adam);
}

torch::Tensor sample_rows(const torch::Tensor& data, int64_t count, at::Generator& rng) {
    require(data.defined() && data.size(0) >= 1, ErrorKind::InvalidParameter, "cannot sample from an empty set");
    auto idx = torch::randint(data.size(0), {count}, rng, torch::kLong);
    return data.index_select(0, idx);
}

StepReport finetune_step(Generator& g_prime, const Generator& g_frozen, Discriminator& disc,
                         const torch::Tensor& style_batch, const PairSet& pair_batch, const FinetuneConfig& cfg,
                         LossNets& nets, FinetuneState& state) {
    require(style_batch.defined() && style_batch.size(0) >= 1, ErrorKind::InvalidParameter,
            "style batch must be non-empty");
    require(pair_batch.size() >= 1 || cfg.lambda_paired == 0.0, ErrorKind::InvalidParameter,
            "pair batch may only be empty when lambda_paired is 0");
    StepReport report;
    report.step = state.step;
    const auto n = style_batch.size(0);
    auto z = torch::randn({n, g_prime.config().latent_dim}, state.rng);

    // Discriminator update.
    set_requires_grad(*disc, true);
    torch::Tensor fake_detached;
    {
        torch::NoGradGuard guard;
        fake_detached = g_prime.generate(z);
    }
    auto d_losses = adversarial_losses(style_batch, fake_detached, disc);
    auto d_total = d_losses.d_loss;
    if (cfg.r1_gamma > 0.0 && state.step % cfg.r1_interval == 0) {
        auto r1 = r1_penalty(style_batch, disc);
        report.r1 = r1.item<double>();
        d_total = d_total + r1 * (0.5 * cfg.r1_gamma * cfg.r1_interval);
    }
    report.d_loss = d_losses.d_loss.item<double>();
    if (!std::isfinite(d_total.item<double>()))
        fail(ErrorKind::NumericAbort, "discriminator loss non-finite at step " + std::to_string(state.step) +
                                          " (" + breakdown(report) + ")");
    state.d_opt->zero_grad();
    d_total.backward();
    state.d_opt->step();

    // Generator update on the same z.
    set_requires_grad(*disc, false);
    auto fake = g_prime.generate(z);
    auto adv = torch::nn::functional::softplus(-disc->forward(fake)).mean();
    torch::Tensor semantic = torch::zeros({}, fake.options());
    if (cfg.lambda_semantic > 0.0) {
        torch::Tensor reference;
        {
            torch::NoGradGuard guard;
            reference = g_frozen.generate(z);
        }
        semantic = semantic_loss(reference, fake, cfg.lambda_id, nets);
    }
    torch::Tensor paired = torch::zeros({}, fake.options());
    if (cfg.lambda_paired > 0.0) paired = paired_loss(g_prime.synthesize_batch(pair_batch.codes), pair_batch.styles, nets.perceptual);
    auto total = total_loss(adv, semantic, paired, cfg.lambda_semantic, cfg.lambda_paired);
    report.adv = adv.item<double>();
    report.semantic = semantic.item<double>();
    report.paired = paired.item<double>();
    report.total = total.item<double>();
    if (!std::isfinite(report.total))
        fail(ErrorKind::NumericAbort, "generator loss non-finite at step " + std::to_string(state.step) + " (" +
                                          breakdown(report) + ")");
    state.g_opt->zero_grad();
    total.backward();
    state.g_opt->step();
    set_requires_grad(*disc, true);
    ++state.step;
    return report;
}

FinetuneResult finetune(const Generator& pretrained, const torch::Tensor& style_images,
                        const std::optional<PairSet>& pairs, const FinetuneConfig& cfg, LossNets& nets,
                        const Discriminator* disc_init, const fs::path& run_dir, const StepLogger& log) {
    cfg.validate();
    require(style_images.defined() && style_images.dim() == 4 && style_images.size(0) >= 1, ErrorKind::Config,
            "fine-tuning needs at least one style image");
    const bool have_pairs = pairs && pairs->size() >= 1;
    require(have_pairs || cfg.lambda_paired == 0.0, ErrorKind::Config,
            "lambda_paired > 0 requires a pseudo-paired dataset");
    if (have_pairs)
        require(pairs->codes.size(1) == pretrained.config().layer_count() && pairs->styles.size(0) == pairs->codes.size(0),
                ErrorKind::Config, "pair set does not match the generator config");

    std::optional<DirectoryLock> lock;
    std::optional<JsonlWriter> writer;
    if (!run_dir.empty()) {
        fs::create_directories(run_dir);
        lock.emplace(run_dir);
        write_json(run_dir / "config.json", cfg.to_json());
        writer.emplace(run_dir / "log.jsonl");
    }

    Generator g_prime = pretrained.clone();
    g_prime.set_role(cfg.constrained() ? GeneratorRole::ConstrainedFinetuned : GeneratorRole::UnconstrainedFinetuned);
    pretrained.set_requires_grad(false);
    g_prime.set_requires_grad(false);
    for (auto& p : g_prime.synthesis_parameters()) p.set_requires_grad(true);
    Discriminator disc = disc_init ? copy_discriminator(*disc_init) : Discriminator(pretrained.config(), cfg.seed + 1);

    FinetuneState state(g_prime, disc, cfg);
    std::vector<StepReport> reports;
    reports.reserve(static_cast<size_t>(cfg.iterations));
    for (int i = 0; i < cfg.iterations; ++i) {
        auto style_batch = sample_rows(style_images, cfg.batch_size, state.rng);
        PairSet pair_batch;
        if (have_pairs && cfg.lambda_paired > 0.0) {
            auto idx = torch::randint(pairs->size(), {cfg.batch_size}, state.rng, torch::kLong);
            pair_batch = {pairs->codes.index_select(0, idx), pairs->styles.index_select(0, idx)};
        }
        auto report = finetune_step(g_prime, pretrained, disc, style_batch, pair_batch, cfg, nets, state);
        reports.push_back(report);
        if (writer) writer->write(report.to_json());
        if (log) log(report.to_json());
        const int done = i + 1;
        const bool last = done == cfg.iterations;
        if (!run_dir.empty() && (last || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0))) {
            auto dir = run_dir / ("ckpt_" + std::to_string(done));
            save_generator(g_prime, dir);
            save_discriminator(disc, dir / "discriminator");
        }
    }
    g_prime.set_requires_grad(false);
    return {std::move(g_prime), std::move(disc), std::move(reports)};
}

json PretrainConfig::to_json() const {
    return {{"steps", steps},           {"batch_size", batch_size},   {"lr", lr},
            {"r1_gamma", r1_gamma},     {"r1_interval", r1_interval}, {"seed", seed},
            {"w_mean_seed", w_mean_seed}};
}

PretrainConfig PretrainConfig::from_json(const json& j) {
    PretrainConfig c;
    c.steps = field_or(j, "steps", c.steps);
    c.batch_size = field_or(j, "batch_size", c.batch_size);
    c.lr = field_or(j, "lr", c.lr);
    c.r1_gamma = field_or(j, "r1_gamma", c.r1_gamma);
    c.r1_interval = field_or(j, "r1_interval", c.r1_interval);
    c.seed = field_or(j, "seed", c.seed);
    c.w_mean_seed = field_or(j, "w_mean_seed", c.w_mean_seed);
    require(c.steps >= 0 && c.batch_size >= 1 && c.lr >= 0 && c.r1_interval >= 1, ErrorKind::Config,
            "pretrain config invalid");
    return c;
}

PretrainResult pretrain(const GeneratorConfig& config, const torch::Tensor& real_images, const PretrainConfig& cfg,
                        const StepLogger& log) {
    require(real_images.defined() && real_images.dim() == 4 && real_images.size(0) >= 1, ErrorKind::Config,
            "pretraining needs at least one image");
    Generator gen(config, cfg.seed, GeneratorRole::Pretrained);
    Discriminator disc(config, cfg.seed + 1);
    FinetuneConfig step_cfg;
    step_cfg.lambda_semantic = 0.0;
    step_cfg.lambda_paired = 0.0;
    step_cfg.lr = cfg.lr;
    step_cfg.batch_size = cfg.batch_size;
    step_cfg.seed = cfg.seed;
    step_cfg.r1_gamma = cfg.r1_gamma;
    step_cfg.r1_interval = cfg.r1_interval;
    gen.set_requires_grad(true);
    FinetuneState state(gen, disc, step_cfg, /*train_mapping=*/true);
    LossNets unused;
    std::vector<StepReport> reports;
    for (int i = 0; i < cfg.steps; ++i) {
        auto batch = sample_rows(real_images, cfg.batch_size, state.rng);
        auto report = finetune_step(gen, gen, disc, batch, {}, step_cfg, unused, state);
        reports.push_back(report);
        if (log) log(report.to_json());
    }
    gen.set_requires_grad(false);
    gen.compute_w_mean(cfg.w_mean_seed);
    return {std::move(gen), std::move(disc), std::move(reports)};
}

DirectoryLock::DirectoryLock(const fs::path& dir) {
    fs::create_directories(dir);
    auto path = dir / ".lock";
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
    if (fd_ < 0) fail(ErrorKind::Config, "cannot open lock file " + path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
        ::close(fd_);
        fd_ = -1;
        fail(ErrorKind::Conflict, dir.string() + " is locked by another process");
    }
}

DirectoryLock::~DirectoryLock() {
    if (fd_ >= 0) {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
}

}  // namespace semstyle
