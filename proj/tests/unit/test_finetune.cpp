#include <doctest.h>

#include <fstream>

#include "semstyle/checkpoint.hpp"
#include "semstyle/finetune.hpp"
#include "test_support.hpp"

using namespace semstyle;
using namespace semstyle::testing;

namespace {

Generator tiny_generator(uint64_t seed = 3) {
    Generator g(tiny_config(), seed);
    g.compute_w_mean(1, 500);
    return g;
}

torch::Tensor style_images(int64_t n = 4) {
    return torch::rand({n, 3, 32, 32}, make_rng(21)).mul(2.0).sub(1.0);
}

PairSet tiny_pairs(const Generator& g, int64_t n = 3) {
    const auto L = g.config().layer_count();
    auto codes = g.w_mean().expand({n, L, g.config().latent_dim}).clone() +
                 0.1 * torch::randn({n, L, g.config().latent_dim}, make_rng(22));
    return {codes, torch::rand({n, 3, 32, 32}, make_rng(23)).mul(2.0).sub(1.0)};
}

FinetuneConfig small_config() {
    FinetuneConfig c;
    c.iterations = 2;
    c.batch_size = 2;
    c.r1_interval = 2;
    return c;
}

bool same_parameters(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (!torch::equal(a[i], b[i])) return false;
    return true;
}

std::vector<torch::Tensor> snapshot(const std::vector<torch::Tensor>& params) {
    std::vector<torch::Tensor> out;
    for (auto& p : params) out.push_back(p.detach().clone());
    return out;
}

}  // namespace

TEST_CASE("config validation and json round trip") {
    FinetuneConfig c;
    c.lambda_semantic = 0.25;
    c.pair_level = 3;
    auto back = FinetuneConfig::from_json(c.to_json());
    CHECK(back.lambda_semantic == 0.25);
    CHECK(back.pair_level == 3);
    CHECK(back.to_json() == c.to_json());
    c.lambda_paired = -1.0;
    CHECK_THROWS_AS(c.validate(), Error);
    CHECK_THROWS_AS(FinetuneConfig::from_json(json{{"iterations", "many"}}), Error);
    CHECK(FinetuneConfig::from_json(json::object()).iterations == FinetuneConfig{}.iterations);
}

TEST_CASE("step losses combine as the weighted sum") {
    auto g = tiny_generator();
    auto nets = random_loss_nets();
    auto pairs = tiny_pairs(g, 2);
    auto cfg = small_config();
    cfg.lambda_semantic = 0.7;
    cfg.lambda_paired = 1.3;
    auto g_prime = g.clone();
    Discriminator disc(g.config(), 4);
    FinetuneState state(g_prime, disc, cfg);
    auto r = finetune_step(g_prime, g, disc, style_images(2), pairs, cfg, nets, state);
    CHECK(r.semantic > 0.0);
    CHECK(r.paired > 0.0);
    CHECK(r.total == doctest::Approx(r.adv + 0.7 * r.semantic + 1.3 * r.paired).epsilon(1e-6));
    CHECK(r.r1.has_value());
    CHECK(state.step == 1);
}

TEST_CASE("with both weights zero the objective is the adversarial term") {
    auto g = tiny_generator();
    auto nets = random_loss_nets();
    auto cfg = small_config();
    cfg.lambda_semantic = 0.0;
    cfg.lambda_paired = 0.0;
    CHECK_FALSE(cfg.constrained());
    auto result = finetune(g, style_images(), std::nullopt, cfg, nets);
    for (const auto& r : result.reports) {
        CHECK(r.semantic == 0.0);
        CHECK(r.paired == 0.0);
        CHECK(r.total == r.adv);
    }
    CHECK(result.generator.role() == GeneratorRole::UnconstrainedFinetuned);
}

TEST_CASE("zero learning rate leaves the generator unchanged") {
    auto g = tiny_generator();
    auto nets = random_loss_nets();
    auto cfg = small_config();
    cfg.lr = 0.0;
    auto result = finetune(g, style_images(), tiny_pairs(g), cfg, nets);
    CHECK(same_parameters(snapshot(g.parameters()), snapshot(result.generator.parameters())));
    CHECK(result.generator.role() == GeneratorRole::ConstrainedFinetuned);
}

TEST_CASE("fine-tuning starts from the pretrained weights and only moves synthesis") {
    auto g = tiny_generator();
    auto before = snapshot(g.parameters());
    auto nets = random_loss_nets();
    auto cfg = small_config();
    cfg.iterations = 1;
    auto result = finetune(g, style_images(), tiny_pairs(g), cfg, nets);
    // the source generator is untouched
    CHECK(same_parameters(before, snapshot(g.parameters())));
    CHECK(same_parameters(snapshot(g.mapping_parameters()), snapshot(result.generator.mapping_parameters())));
    CHECK_FALSE(same_parameters(snapshot(g.synthesis_parameters()), snapshot(result.generator.synthesis_parameters())));
    CHECK(torch::equal(g.w_mean(), result.generator.w_mean()));
}

TEST_CASE("discriminator initialisation is copied, not shared") {
    auto g = tiny_generator();
    auto nets = random_loss_nets();
    Discriminator init(g.config(), 9);
    auto before = snapshot(init->parameters());
    auto cfg = small_config();
    cfg.iterations = 1;
    cfg.lambda_paired = 0.0;
    auto result = finetune(g, style_images(), std::nullopt, cfg, nets, &init);
    CHECK(same_parameters(before, snapshot(init->parameters())));
    CHECK_FALSE(same_parameters(before, snapshot(result.discriminator->parameters())));
}

TEST_CASE("missing pairs with a positive paired weight is a config error") {
    auto g = tiny_generator();
    auto nets = random_loss_nets();
    auto cfg = small_config();
    cfg.lambda_paired = 1.0;
    TempDir dir;
    try {
        finetune(g, style_images(), std::nullopt, cfg, nets, nullptr, dir / "run");
        FAIL("expected a config error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Config);
    }
    // rejected before any run state is written
    CHECK_FALSE(fs::exists(dir / "run"));
    CHECK_THROWS_AS(finetune(g, style_images(), PairSet{}, cfg, nets), Error);
    cfg.lambda_paired = 0.0;
    CHECK_THROWS_AS(finetune(g, torch::zeros({0, 3, 32, 32}), std::nullopt, cfg, nets), Error);
}

TEST_CASE("runs are reproducible and fully logged") {
    auto g = tiny_generator();
    auto nets = random_loss_nets();
    auto cfg = small_config();
    cfg.iterations = 3;
    cfg.checkpoint_every = 2;
    TempDir dir;
    auto a = finetune(g, style_images(), tiny_pairs(g), cfg, nets, nullptr, dir / "a");
    auto b = finetune(g, style_images(), tiny_pairs(g), cfg, nets, nullptr, dir / "b");
    CHECK(same_parameters(snapshot(a.generator.parameters()), snapshot(b.generator.parameters())));
    CHECK(checkpoint_hash(dir / "a" / "ckpt_3") == checkpoint_hash(dir / "b" / "ckpt_3"));
    CHECK(sha256_file(dir / "a" / "log.jsonl") == sha256_file(dir / "b" / "log.jsonl"));

    CHECK(fs::exists(dir / "a" / "ckpt_2"));
    CHECK(fs::exists(dir / "a" / "ckpt_3" / "discriminator"));
    CHECK(read_json(dir / "a" / "config.json") == cfg.to_json());

    std::ifstream log(dir / "a" / "log.jsonl");
    std::string line;
    int count = 0;
    while (std::getline(log, line)) {
        auto rec = json::parse(line);
        CHECK(rec.at("step") == count);
        for (auto key : {"adv", "semantic", "paired", "total", "d_loss"}) CHECK(rec.contains(key));
        ++count;
    }
    CHECK(count == 3);

    auto reloaded = load_generator(dir / "a" / "ckpt_3");
    CHECK(same_parameters(snapshot(reloaded.parameters()), snapshot(a.generator.parameters())));
    CHECK(reloaded.role() == GeneratorRole::ConstrainedFinetuned);
}

TEST_CASE("a locked run directory is refused") {
    TempDir dir;
    DirectoryLock lock(dir / "run");
    CHECK_THROWS_AS(DirectoryLock(dir / "run"), Error);
    auto g = tiny_generator();
    auto nets = random_loss_nets();
    auto cfg = small_config();
    cfg.lambda_paired = 0.0;
    try {
        finetune(g, style_images(), std::nullopt, cfg, nets, nullptr, dir / "run");
        FAIL("expected a conflict");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Conflict);
    }
}

TEST_CASE("sample_rows draws with replacement from the data") {
    auto data = torch::arange(5).to(torch::kFloat32).view({5, 1});
    auto rng = make_rng(1);
    auto rows = sample_rows(data, 20, rng);
    CHECK(rows.size(0) == 20);
    CHECK(rows.min().item<float>() >= 0.0f);
    CHECK(rows.max().item<float>() <= 4.0f);
}
